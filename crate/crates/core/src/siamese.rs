//! Pairwise contrastive baseline sharing the same embedding network: similar
//! pairs are pulled together with a quadratic loss, dissimilar pairs pushed
//! beyond a margin with a squared hinge.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::{self, DIST_EPS};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairLabel {
    Similar,
    Dissimilar,
}

#[derive(Clone, Copy, Debug)]
pub struct PairOutput<S> {
    pub distance: S,
    pub label: PairLabel,
    pub loss: S,
}

/// Contrastive loss and its two embedding gradients.
///
/// Similar: loss = 0.5 * sum((e1-e2)^2), gradient (e1-e2).
/// Dissimilar: loss = 0.5 * max(0, margin - d)^2 with the stabilized distance
/// d; gradient vanishes once the pair is pushed beyond the margin, and the
/// hinge is C1 at d == margin.
pub fn contrastive_loss<S: Scalar>(
    e1: &[S],
    e2: &[S],
    label: PairLabel,
    margin: f64,
) -> Result<(PairOutput<S>, Vec<S>, Vec<S>)> {
    if e1.len() != e2.len() {
        return Err(Error::shape(
            "contrastive_loss",
            format!("embedding lengths {} vs {}", e1.len(), e2.len()),
        ));
    }
    if margin <= 0.0 {
        return Err(Error::Config(format!(
            "contrastive margin must be positive, got {margin}"
        )));
    }
    let half = S::from_f64(0.5);
    let ss = ops::sq_diff_sum(e1, e2);
    let distance = (ss + S::from_f64(DIST_EPS)).sqrt();
    let n = e1.len();
    let mut g1 = vec![S::zero(); n];
    let mut g2 = vec![S::zero(); n];
    let loss = match label {
        PairLabel::Similar => {
            for i in 0..n {
                let d = e1[i] - e2[i];
                g1[i] = d;
                g2[i] = -d;
            }
            half * ss
        }
        PairLabel::Dissimilar => {
            let hinge = S::from_f64(margin) - distance;
            if hinge > S::zero() {
                let coeff = -hinge / distance;
                for i in 0..n {
                    let d = e1[i] - e2[i];
                    g1[i] = coeff * d;
                    g2[i] = -coeff * d;
                }
                half * hinge * hinge
            } else {
                S::zero()
            }
        }
    };
    Ok((
        PairOutput {
            distance,
            label,
            loss,
        },
        g1,
        g2,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn rv(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = Rng::new(seed);
        (0..n).map(|_| rng.uniform::<f64>(-1.0, 1.0)).collect()
    }

    #[test]
    fn identical_similar_pair_is_free() {
        let e = rv(8, 1);
        let (out, g1, g2) = contrastive_loss(&e, &e, PairLabel::Similar, 1.0).unwrap();
        assert_eq!(out.loss, 0.0);
        assert!(g1.iter().all(|&v| v == 0.0));
        assert!(g2.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn distant_dissimilar_pair_is_free() {
        let e1 = vec![10.0f64, 0.0];
        let e2 = vec![0.0f64, 0.0];
        let (out, g1, g2) = contrastive_loss(&e1, &e2, PairLabel::Dissimilar, 1.0).unwrap();
        assert_eq!(out.loss, 0.0);
        assert!(g1.iter().all(|&v| v == 0.0));
        assert!(g2.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_nonpositive_margin() {
        let e = rv(4, 2);
        assert!(contrastive_loss(&e, &e, PairLabel::Similar, 0.0).is_err());
        assert!(contrastive_loss(&e, &e, PairLabel::Similar, -1.0).is_err());
    }

    #[test]
    fn swap_leaves_loss_unchanged() {
        let e1 = rv(12, 3);
        let e2 = rv(12, 4);
        for label in [PairLabel::Similar, PairLabel::Dissimilar] {
            let (a, _, _) = contrastive_loss(&e1, &e2, label, 2.0).unwrap();
            let (b, _, _) = contrastive_loss(&e2, &e1, label, 2.0).unwrap();
            assert_eq!(a.loss, b.loss);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let h = 1e-6;
        // margin 3.0 keeps the hinge active for unit-scale embeddings
        for (label, margin) in [
            (PairLabel::Similar, 1.0),
            (PairLabel::Dissimilar, 3.0),
            (PairLabel::Dissimilar, 0.5),
        ] {
            let e1 = rv(8, 7);
            let e2 = rv(8, 8);
            let (_, g1, g2) = contrastive_loss(&e1, &e2, label, margin).unwrap();
            let loss_of = |a: &[f64], b: &[f64]| {
                contrastive_loss(a, b, label, margin).unwrap().0.loss
            };
            for i in 0..8 {
                for (which, g) in [(0usize, &g1), (1, &g2)] {
                    let mut ap = [e1.clone(), e2.clone()];
                    ap[which][i] += h;
                    let lp = loss_of(&ap[0], &ap[1]);
                    let mut am = [e1.clone(), e2.clone()];
                    am[which][i] -= h;
                    let lm = loss_of(&am[0], &am[1]);
                    let fd = (lp - lm) / (2.0 * h);
                    let a = g[i];
                    let denom = fd.abs().max(a.abs()).max(1e-7);
                    assert!(
                        (fd - a).abs() / denom < 1e-6,
                        "{label:?} m={margin} side {which} idx {i}: {fd} vs {a}"
                    );
                }
            }
        }
    }

    #[test]
    fn hinge_is_continuous_at_margin() {
        // approach d == margin from both sides; loss and gradient tend to 0
        let margin = 1.0;
        for delta in [1e-3, 1e-5, 1e-7] {
            let e1 = vec![margin - delta, 0.0];
            let e2 = vec![0.0, 0.0];
            let (out, g1, _) = contrastive_loss(&e1, &e2, PairLabel::Dissimilar, margin).unwrap();
            assert!(out.loss < delta * delta);
            assert!(g1[0].abs() < 2.0 * delta);
        }
        let e1 = vec![margin + 1e-7, 0.0];
        let e2 = vec![0.0, 0.0];
        let (out, g1, _) = contrastive_loss(&e1, &e2, PairLabel::Dissimilar, margin).unwrap();
        assert_eq!(out.loss, 0.0);
        assert_eq!(g1[0], 0.0);
    }
}

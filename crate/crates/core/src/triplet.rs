//! Distance-comparison head over three embeddings. The reference-to-positive
//! and reference-to-negative L2 distances are pushed through a softmax to get
//! a ratio pair (d_plus, d_minus) summing to one; the default loss is the
//! squared error of that pair against (0, 1), which collapses to 2*d_plus^2.
//! A negative-log-likelihood variant on the same ratio is kept for ablation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::{self, DIST_EPS};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossVariant {
    /// MSE of the softmax pair against (0,1): loss = d_plus^2 + (d_minus-1)^2.
    #[default]
    MseSoftmax,
    /// -log(d_minus), the 2-class log loss on the same softmax pair.
    Nll,
}

/// Everything the head computes for one triplet.
#[derive(Clone, Copy, Debug)]
pub struct TripletOutput<S> {
    pub d_pos: S,
    pub d_neg: S,
    pub d_plus: S,
    pub d_minus: S,
    pub loss: S,
}

impl<S: Scalar> TripletOutput<S> {
    /// The comparison is correct when the positive is strictly nearer.
    pub fn correct(&self) -> bool {
        self.d_pos < self.d_neg
    }
}

/// Stabilized distances from the reference embedding to positive and negative.
pub fn distance_pair<S: Scalar>(e_x: &[S], e_plus: &[S], e_minus: &[S]) -> Result<(S, S)> {
    if e_x.len() != e_plus.len() || e_x.len() != e_minus.len() {
        return Err(Error::shape(
            "distance_pair",
            format!(
                "embedding lengths differ: {} / {} / {}",
                e_x.len(),
                e_plus.len(),
                e_minus.len()
            ),
        ));
    }
    Ok((
        ops::l2_distance_slice(e_x, e_plus, DIST_EPS),
        ops::l2_distance_slice(e_x, e_minus, DIST_EPS),
    ))
}

/// Softmax over the raw distances, via the logistic form that cannot
/// overflow: d_plus = 1 / (1 + exp(d_neg - d_pos)).
pub fn softmax_ratio<S: Scalar>(d_pos: S, d_neg: S) -> (S, S) {
    let d_plus = S::one() / (S::one() + (d_neg - d_pos).exp());
    (d_plus, S::one() - d_plus)
}

/// MSE of (d_plus, d_minus) against the target (0, 1).
pub fn triplet_loss<S: Scalar>(d_plus: S, d_minus: S) -> S {
    let dm = d_minus - S::one();
    d_plus * d_plus + dm * dm
}

/// Log-loss variant computed stably from raw distances:
/// -log(d_minus) = softplus(d_pos - d_neg).
pub fn nll_loss_from_distances<S: Scalar>(d_pos: S, d_neg: S) -> S {
    let x = d_pos - d_neg;
    if x > S::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Forward pass of the head for a triplet of embeddings.
pub fn triplet_output<S: Scalar>(
    e_x: &[S],
    e_plus: &[S],
    e_minus: &[S],
    variant: LossVariant,
) -> Result<TripletOutput<S>> {
    let (d_pos, d_neg) = distance_pair(e_x, e_plus, e_minus)?;
    let (d_plus, d_minus) = softmax_ratio(d_pos, d_neg);
    let loss = match variant {
        LossVariant::MseSoftmax => triplet_loss(d_plus, d_minus),
        LossVariant::Nll => nll_loss_from_distances(d_pos, d_neg),
    };
    Ok(TripletOutput {
        d_pos,
        d_neg,
        d_plus,
        d_minus,
        loss,
    })
}

/// Loss and the three embedding gradients.
///
/// MSE chain: dL/dd_pos = 4 * d_plus^2 * d_minus and dL/dd_neg is its
/// negative; NLL chain: dL/dd_pos = d_plus. Both then route through the
/// distance gradients (e_x - e_other) / distance.
pub fn triplet_loss_and_grad<S: Scalar>(
    e_x: &[S],
    e_plus: &[S],
    e_minus: &[S],
    variant: LossVariant,
) -> Result<(TripletOutput<S>, Vec<S>, Vec<S>, Vec<S>)> {
    let out = triplet_output(e_x, e_plus, e_minus, variant)?;
    let four = S::from_f64(4.0);
    let g_pos = match variant {
        LossVariant::MseSoftmax => four * out.d_plus * out.d_plus * out.d_minus,
        LossVariant::Nll => out.d_plus,
    };
    let g_neg = -g_pos;
    let n = e_x.len();
    let mut gx = vec![S::zero(); n];
    let mut gp = vec![S::zero(); n];
    let mut gm = vec![S::zero(); n];
    let cp = g_pos / out.d_pos;
    let cn = g_neg / out.d_neg;
    for i in 0..n {
        let up = e_x[i] - e_plus[i];
        let un = e_x[i] - e_minus[i];
        gx[i] = cp * up + cn * un;
        gp[i] = -cp * up;
        gm[i] = -cn * un;
    }
    Ok((out, gx, gp, gm))
}

/// Convenience wrapper returning only the three gradients.
pub fn triplet_grad<S: Scalar>(
    e_x: &[S],
    e_plus: &[S],
    e_minus: &[S],
    variant: LossVariant,
) -> Result<(Vec<S>, Vec<S>, Vec<S>)> {
    let (_, gx, gp, gm) = triplet_loss_and_grad(e_x, e_plus, e_minus, variant)?;
    Ok((gx, gp, gm))
}

/// Fraction of triplets with the positive strictly nearer than the negative.
/// Exact ties count as incorrect.
pub fn triplet_accuracy<S: Scalar>(outputs: &[TripletOutput<S>]) -> Result<f64> {
    if outputs.is_empty() {
        return Err(Error::Data("triplet_accuracy over empty list".into()));
    }
    let correct = outputs.iter().filter(|o| o.correct()).count();
    Ok(correct as f64 / outputs.len() as f64)
}

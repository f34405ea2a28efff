//! Central finite-difference verification of every hand-written backward
//! pass, in double precision. Each check reduces a kernel output to a scalar
//! through a fixed random projection, compares the analytic gradient against
//! (L(x+h) - L(x-h)) / 2h with h = 1e-5, and reports the worst relative
//! error. The whole suite runs in well under a minute.

use crate::net::{Network, NetworkConfig};
use crate::ops::{self, Mode};
use crate::rng::Rng;
use crate::siamese::{contrastive_loss, PairLabel};
use crate::tensor::Tensor;
use crate::triplet::{triplet_loss_and_grad, triplet_output, LossVariant};

pub const FD_STEP: f64 = 1e-5;
pub const KERNEL_THRESHOLD: f64 = 1e-4;
pub const END_TO_END_THRESHOLD: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: &'static str,
    pub max_rel_err: f64,
    pub threshold: f64,
    pub pass: bool,
}

impl CheckResult {
    fn new(name: &'static str, max_rel_err: f64, threshold: f64) -> Self {
        CheckResult {
            name,
            max_rel_err,
            threshold,
            pass: max_rel_err < threshold,
        }
    }
}

pub fn suite_passed(results: &[CheckResult]) -> bool {
    results.iter().all(|r| r.pass)
}

/// Relative error with a both-near-zero escape: finite-difference noise on a
/// truly zero gradient should not count as disagreement.
fn rel_err(analytic: f64, numeric: f64) -> f64 {
    if analytic.abs() < 1e-7 && numeric.abs() < 1e-7 {
        return 0.0;
    }
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs())
}

fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric.iter())
        .map(|(&a, &n)| rel_err(a, n))
        .fold(0.0, f64::max)
}

/// Central differences of `f` at `x`, one coordinate at a time.
fn fd_grad(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    let mut buf = x.to_vec();
    for i in 0..x.len() {
        let orig = buf[i];
        buf[i] = orig + FD_STEP;
        let lp = f(&buf);
        buf[i] = orig - FD_STEP;
        let lm = f(&buf);
        buf[i] = orig;
        out.push((lp - lm) / (2.0 * FD_STEP));
    }
    out
}

fn proj_loss(out: &Tensor<f64>, proj: &Tensor<f64>) -> f64 {
    out.data()
        .iter()
        .zip(proj.data().iter())
        .map(|(a, b)| a * b)
        .sum()
}

fn check_conv2d(stride: usize, name: &'static str, perturb: f64) -> CheckResult {
    let mut rng = Rng::new(0xC0);
    let (in_shape, w_shape): (&[usize], &[usize]) = if stride == 1 {
        (&[2, 5, 5], &[3, 2, 3, 3])
    } else {
        (&[1, 7, 7], &[2, 1, 3, 3])
    };
    let input = Tensor::<f64>::uniform(in_shape, -1.0, 1.0, &mut rng);
    let weights = Tensor::<f64>::uniform(w_shape, -1.0, 1.0, &mut rng);
    let bias = Tensor::<f64>::uniform(&[w_shape[0]], -0.5, 0.5, &mut rng);
    let out = ops::conv2d(&input, &weights, &bias, stride).unwrap();
    let proj = Tensor::<f64>::uniform(out.shape(), 0.5, 1.5, &mut rng);

    let (gi, mut gw, gb) = ops::conv2d_backward(&input, &weights, stride, &proj).unwrap();
    gw.data_mut()[0] += perturb;

    let mut worst: f64 = 0.0;
    let mut f_in = |x: &[f64]| {
        let t = Tensor::from_vec(in_shape, x.to_vec()).unwrap();
        proj_loss(&ops::conv2d(&t, &weights, &bias, stride).unwrap(), &proj)
    };
    worst = worst.max(max_rel_err(gi.data(), &fd_grad(&mut f_in, input.data())));
    let mut f_w = |x: &[f64]| {
        let t = Tensor::from_vec(w_shape, x.to_vec()).unwrap();
        proj_loss(&ops::conv2d(&input, &t, &bias, stride).unwrap(), &proj)
    };
    worst = worst.max(max_rel_err(gw.data(), &fd_grad(&mut f_w, weights.data())));
    let mut f_b = |x: &[f64]| {
        let t = Tensor::from_vec(&[w_shape[0]], x.to_vec()).unwrap();
        proj_loss(&ops::conv2d(&input, &weights, &t, stride).unwrap(), &proj)
    };
    worst = worst.max(max_rel_err(gb.data(), &fd_grad(&mut f_b, bias.data())));
    CheckResult::new(name, worst, KERNEL_THRESHOLD)
}

fn check_maxpool() -> CheckResult {
    let mut rng = Rng::new(0xB0);
    // well-separated values keep windows free of near-ties around +-h
    let input = Tensor::<f64>::uniform(&[2, 6, 6], -1.0, 1.0, &mut rng);
    let (out, argmax) = ops::maxpool2(&input).unwrap();
    let proj = Tensor::<f64>::uniform(out.shape(), 0.5, 1.5, &mut rng);
    let analytic = ops::maxpool2_backward(&[2, 6, 6], &argmax, &proj).unwrap();
    let mut f = |x: &[f64]| {
        let t = Tensor::from_vec(&[2, 6, 6], x.to_vec()).unwrap();
        proj_loss(&ops::maxpool2(&t).unwrap().0, &proj)
    };
    let numeric = fd_grad(&mut f, input.data());
    CheckResult::new("maxpool2", max_rel_err(analytic.data(), &numeric), KERNEL_THRESHOLD)
}

fn check_relu() -> CheckResult {
    let mut rng = Rng::new(0xA0);
    // keep inputs away from the kink at 0
    let input = Tensor::<f64>::uniform(&[2, 4, 4], -1.0, 1.0, &mut rng)
        .map(|v| if v.abs() < 0.05 { v + 0.1 } else { v });
    let out = ops::relu(&input);
    let mut rng2 = Rng::new(0xA1);
    let proj = Tensor::<f64>::uniform(out.shape(), 0.5, 1.5, &mut rng2);
    let analytic = ops::relu_backward(&input, &proj).unwrap();
    let mut f = |x: &[f64]| {
        let t = Tensor::from_vec(&[2, 4, 4], x.to_vec()).unwrap();
        proj_loss(&ops::relu(&t), &proj)
    };
    let numeric = fd_grad(&mut f, input.data());
    CheckResult::new("relu", max_rel_err(analytic.data(), &numeric), KERNEL_THRESHOLD)
}

fn check_dropout() -> CheckResult {
    let mut rng = Rng::new(0xD0);
    let input = Tensor::<f64>::uniform(&[40], -1.0, 1.0, &mut rng);
    let p = 0.3;
    // re-seeding per evaluation fixes the mask, making the map differentiable
    let forward = |t: &Tensor<f64>| {
        let mut mask_rng = Rng::new(0xD1);
        ops::dropout(t, p, Mode::Train, &mut mask_rng).unwrap()
    };
    let (out, mask) = forward(&input);
    let mut rng2 = Rng::new(0xD2);
    let proj = Tensor::<f64>::uniform(out.shape(), 0.5, 1.5, &mut rng2);
    let analytic = ops::dropout_backward(&mask, p, &proj).unwrap();
    let mut f = |x: &[f64]| {
        let t = Tensor::from_vec(&[40], x.to_vec()).unwrap();
        proj_loss(&forward(&t).0, &proj)
    };
    let numeric = fd_grad(&mut f, input.data());
    CheckResult::new("dropout", max_rel_err(analytic.data(), &numeric), KERNEL_THRESHOLD)
}

fn check_l2_distance() -> CheckResult {
    let mut rng = Rng::new(0xE0);
    let a: Vec<f64> = (0..16).map(|_| rng.uniform(-1.0, 1.0)).collect();
    let b: Vec<f64> = (0..16).map(|_| rng.uniform(-1.0, 1.0)).collect();
    let d = ops::l2_distance_slice(&a, &b, ops::DIST_EPS);
    // analytic gradient wrt a: (a - b) / d
    let analytic: Vec<f64> = a.iter().zip(&b).map(|(x, y)| (x - y) / d).collect();
    let mut f = |x: &[f64]| ops::l2_distance_slice(x, &b, ops::DIST_EPS);
    let numeric = fd_grad(&mut f, &a);
    let mut worst = max_rel_err(&analytic, &numeric);

    // coincident points: both analytic and numeric gradients vanish
    let mut f_same = |x: &[f64]| ops::l2_distance_slice(x, &a, ops::DIST_EPS);
    let numeric_same = fd_grad(&mut f_same, &a);
    let zero = vec![0.0; a.len()];
    worst = worst.max(max_rel_err(&zero, &numeric_same));
    CheckResult::new("l2_distance", worst, KERNEL_THRESHOLD)
}

fn check_triplet(variant: LossVariant, name: &'static str) -> CheckResult {
    let mut rng = Rng::new(0xF0);
    let e_x: Vec<f64> = (0..8).map(|_| rng.uniform(-1.5, 1.5)).collect();
    let e_p: Vec<f64> = (0..8).map(|_| rng.uniform(-1.5, 1.5)).collect();
    let e_m: Vec<f64> = (0..8).map(|_| rng.uniform(-1.5, 1.5)).collect();
    let (_, gx, gp, gm) = triplet_loss_and_grad(&e_x, &e_p, &e_m, variant).unwrap();
    let mut worst: f64 = 0.0;
    for (which, analytic) in [(0usize, &gx), (1, &gp), (2, &gm)] {
        let mut f = |x: &[f64]| {
            let mut args = [e_x.clone(), e_p.clone(), e_m.clone()];
            args[which] = x.to_vec();
            triplet_output(&args[0], &args[1], &args[2], variant)
                .unwrap()
                .loss
        };
        let numeric = fd_grad(&mut f, &[e_x.clone(), e_p.clone(), e_m.clone()][which]);
        worst = worst.max(max_rel_err(analytic, &numeric));
    }
    CheckResult::new(name, worst, KERNEL_THRESHOLD)
}

fn check_contrastive(label: PairLabel, margin: f64, name: &'static str) -> CheckResult {
    let mut rng = Rng::new(0xF5);
    let e1: Vec<f64> = (0..8).map(|_| rng.uniform(-1.0, 1.0)).collect();
    let e2: Vec<f64> = (0..8).map(|_| rng.uniform(-1.0, 1.0)).collect();
    let (_, g1, g2) = contrastive_loss(&e1, &e2, label, margin).unwrap();
    let mut worst: f64 = 0.0;
    for (which, analytic) in [(0usize, &g1), (1, &g2)] {
        let mut f = |x: &[f64]| {
            let mut args = [e1.clone(), e2.clone()];
            args[which] = x.to_vec();
            contrastive_loss(&args[0], &args[1], label, margin)
                .unwrap()
                .0
                .loss
        };
        let numeric = fd_grad(&mut f, &[e1.clone(), e2.clone()][which]);
        worst = worst.max(max_rel_err(analytic, &numeric));
    }
    CheckResult::new(name, worst, KERNEL_THRESHOLD)
}

fn tiny_net() -> Network<f64> {
    let cfg = NetworkConfig {
        input_shape: [1, 6, 6],
        filter_sizes: vec![3, 2],
        feature_maps: vec![1, 3, 4],
        embed_relu: true,
        dropout_p: 0.0, // keeps the end-to-end map deterministic
        seed: 0x17,
    };
    let mut net = Network::from_config(&cfg).unwrap();
    net.set_mode(Mode::Train);
    net
}

/// Whole-network check: triplet loss through every layer, finite differences
/// over every parameter of every layer.
fn check_end_to_end() -> CheckResult {
    let net = tiny_net();
    let mut rng = Rng::new(0x99);
    let imgs: Vec<Tensor<f64>> = (0..3)
        .map(|_| Tensor::uniform(&[1, 6, 6], -1.0, 1.0, &mut rng))
        .collect();

    let loss_of = |net: &Network<f64>| -> f64 {
        let (e_x, _) = net.forward_sample(&imgs[0], None).unwrap();
        let (e_p, _) = net.forward_sample(&imgs[1], None).unwrap();
        let (e_m, _) = net.forward_sample(&imgs[2], None).unwrap();
        triplet_output(&e_x, &e_p, &e_m, LossVariant::MseSoftmax)
            .unwrap()
            .loss
    };

    // analytic: three branch backwards through the shared parameters
    let mut grads = net.zero_grads();
    {
        let (e_x, c_x) = net.forward_sample(&imgs[0], None).unwrap();
        let (e_p, c_p) = net.forward_sample(&imgs[1], None).unwrap();
        let (e_m, c_m) = net.forward_sample(&imgs[2], None).unwrap();
        let (_, gx, gp, gm) =
            triplet_loss_and_grad(&e_x, &e_p, &e_m, LossVariant::MseSoftmax).unwrap();
        net.backward_sample(&c_x.unwrap(), &gx, &mut grads).unwrap();
        net.backward_sample(&c_p.unwrap(), &gp, &mut grads).unwrap();
        net.backward_sample(&c_m.unwrap(), &gm, &mut grads).unwrap();
    }

    let mut worst: f64 = 0.0;
    for pi in 0..net.params().len() {
        let n = net.params()[pi].len();
        for j in 0..n {
            let mut plus = net.clone();
            plus.params_mut()[pi].data_mut()[j] += FD_STEP;
            let lp = loss_of(&plus);
            let mut minus = net.clone();
            minus.params_mut()[pi].data_mut()[j] -= FD_STEP;
            let lm = loss_of(&minus);
            let numeric = (lp - lm) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(grads.tensors[pi].data()[j], numeric));
        }
    }
    CheckResult::new("end_to_end_tiny_net", worst, END_TO_END_THRESHOLD)
}

/// Run every check. `perturb` (normally 0) is a fault-injection hook for
/// tests: it is added to one analytic convolution weight gradient, which a
/// healthy suite must flag.
pub fn run_suite(perturb: f64) -> Vec<CheckResult> {
    vec![
        check_conv2d(1, "conv2d", perturb),
        check_conv2d(2, "conv2d_stride2", 0.0),
        check_maxpool(),
        check_relu(),
        check_dropout(),
        check_l2_distance(),
        check_triplet(LossVariant::MseSoftmax, "triplet_mse_softmax"),
        check_triplet(LossVariant::Nll, "triplet_nll"),
        check_contrastive(PairLabel::Similar, 1.0, "contrastive_similar"),
        check_contrastive(PairLabel::Dissimilar, 3.0, "contrastive_dissimilar"),
        check_contrastive(PairLabel::Dissimilar, 0.5, "contrastive_past_margin"),
        check_end_to_end(),
    ]
}

//! Numerical kernels: valid (no-pad) 2-d convolution, 2x2 max-pooling, ReLU,
//! inverted dropout and the stabilized L2 distance, each with a hand-written
//! backward pass. Kernels are pure functions of their inputs plus an explicit
//! `Rng`; nothing here touches global state, so they are safe to run
//! data-parallel on disjoint samples.
//!
//! Inner loops are written as contiguous-slice saxpy/dot operations so the
//! compiler can vectorize them without reordering float arithmetic; results
//! are bit-identical run to run.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Epsilon inside the L2 square root; keeps the distance gradient finite when
/// the two embeddings coincide.
pub const DIST_EPS: f64 = 1e-12;

/// Forward-pass mode: `Train` keeps caches and applies dropout, `Eval` is a
/// deterministic identity for dropout.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// y += a * x over equal-length slices.
#[inline(always)]
fn axpy<S: Scalar>(y: &mut [S], a: S, x: &[S]) {
    for (yi, &xi) in y.iter_mut().zip(x.iter()) {
        *yi += a * xi;
    }
}

/// Dot product with eight independent accumulators combined in a fixed order.
/// Vectorizes well and stays deterministic.
#[inline(always)]
fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [S::zero(); 8];
    let chunks = a.len() / 8;
    for i in 0..chunks {
        let pa = &a[i * 8..i * 8 + 8];
        let pb = &b[i * 8..i * 8 + 8];
        for l in 0..8 {
            acc[l] += pa[l] * pb[l];
        }
    }
    for i in chunks * 8..a.len() {
        acc[i % 8] += a[i] * b[i];
    }
    let s01 = acc[0] + acc[1];
    let s23 = acc[2] + acc[3];
    let s45 = acc[4] + acc[5];
    let s67 = acc[6] + acc[7];
    (s01 + s23) + (s45 + s67)
}

/// Slice sum with the same fixed-order lane scheme as `dot`.
#[inline(always)]
fn lane_sum<S: Scalar>(a: &[S]) -> S {
    let mut acc = [S::zero(); 8];
    let chunks = a.len() / 8;
    for i in 0..chunks {
        let pa = &a[i * 8..i * 8 + 8];
        for l in 0..8 {
            acc[l] += pa[l];
        }
    }
    for i in chunks * 8..a.len() {
        acc[i % 8] += a[i];
    }
    let s01 = acc[0] + acc[1];
    let s23 = acc[2] + acc[3];
    let s45 = acc[4] + acc[5];
    let s67 = acc[6] + acc[7];
    (s01 + s23) + (s45 + s67)
}

/// Sum of squared differences, same lane scheme as `dot`.
#[inline(always)]
pub(crate) fn sq_diff_sum<S: Scalar>(a: &[S], b: &[S]) -> S {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [S::zero(); 8];
    let chunks = a.len() / 8;
    for i in 0..chunks {
        let pa = &a[i * 8..i * 8 + 8];
        let pb = &b[i * 8..i * 8 + 8];
        for l in 0..8 {
            let d = pa[l] - pb[l];
            acc[l] += d * d;
        }
    }
    for i in chunks * 8..a.len() {
        let d = a[i] - b[i];
        acc[i % 8] += d * d;
    }
    let s01 = acc[0] + acc[1];
    let s23 = acc[2] + acc[3];
    let s45 = acc[4] + acc[5];
    let s67 = acc[6] + acc[7];
    (s01 + s23) + (s45 + s67)
}

fn conv_dims(
    input: &[usize],
    weights: &[usize],
    bias: &[usize],
    stride: usize,
) -> Result<(usize, usize, usize, usize, usize, usize, usize)> {
    if input.len() != 3 || weights.len() != 4 || bias.len() != 1 {
        return Err(Error::shape(
            "conv2d",
            format!(
                "want input [C,H,W], weights [O,C,k,k], bias [O]; got {:?}, {:?}, {:?}",
                input, weights, bias
            ),
        ));
    }
    let (ci, h, w) = (input[0], input[1], input[2]);
    let (co, wc, kh, kw) = (weights[0], weights[1], weights[2], weights[3]);
    if stride == 0 {
        return Err(Error::Config("conv2d stride must be >= 1".into()));
    }
    if wc != ci || kh != kw || bias[0] != co {
        return Err(Error::shape(
            "conv2d",
            format!(
                "channel/kernel mismatch: input {:?}, weights {:?}, bias {:?}",
                input, weights, bias
            ),
        ));
    }
    let k = kh;
    if k > h || k > w || k == 0 {
        return Err(Error::shape(
            "conv2d",
            format!("kernel {}x{} does not fit input {}x{}", k, k, h, w),
        ));
    }
    let h_out = (h - k) / stride + 1;
    let w_out = (w - k) / stride + 1;
    Ok((ci, h, w, co, k, h_out, w_out))
}

/// Valid convolution: out[o,i,j] = bias[o] + sum_{c,u,v} W[o,c,u,v] * in[c, i*s+u, j*s+v].
pub fn conv2d<S: Scalar>(
    input: &Tensor<S>,
    weights: &Tensor<S>,
    bias: &Tensor<S>,
    stride: usize,
) -> Result<Tensor<S>> {
    let (ci, h, w, co, k, h_out, w_out) =
        conv_dims(input.shape(), weights.shape(), bias.shape(), stride)?;
    let mut out = Tensor::zeros(&[co, h_out, w_out]);
    let inp = input.data();
    let wts = weights.data();
    let bs = bias.data();
    let od = out.data_mut();
    for o in 0..co {
        let op = &mut od[o * h_out * w_out..(o + 1) * h_out * w_out];
        op.iter_mut().for_each(|v| *v = bs[o]);
        for c in 0..ci {
            let ip = &inp[c * h * w..(c + 1) * h * w];
            let wbase = (o * ci + c) * k * k;
            for u in 0..k {
                for v in 0..k {
                    let wv = wts[wbase + u * k + v];
                    if stride == 1 {
                        for i in 0..h_out {
                            let irow = (i + u) * w + v;
                            axpy(&mut op[i * w_out..i * w_out + w_out], wv, &ip[irow..irow + w_out]);
                        }
                    } else {
                        for i in 0..h_out {
                            let irow = (i * stride + u) * w + v;
                            let orow = i * w_out;
                            for j in 0..w_out {
                                op[orow + j] += wv * ip[irow + j * stride];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of `conv2d`, accumulated in place into `grad_weights` /
/// `grad_bias` (so several samples can share one gradient buffer). Returns the
/// input gradient.
pub fn conv2d_backward_acc<S: Scalar>(
    input: &Tensor<S>,
    weights: &Tensor<S>,
    stride: usize,
    grad_out: &Tensor<S>,
    grad_weights: &mut Tensor<S>,
    grad_bias: &mut Tensor<S>,
) -> Result<Tensor<S>> {
    let (ci, h, w, co, k, h_out, w_out) = conv_dims(
        input.shape(),
        weights.shape(),
        grad_bias.shape(),
        stride,
    )?;
    if grad_out.shape() != [co, h_out, w_out] {
        return Err(Error::shape(
            "conv2d_backward",
            format!(
                "upstream gradient {:?} does not match forward output [{}, {}, {}]",
                grad_out.shape(),
                co,
                h_out,
                w_out
            ),
        ));
    }
    if grad_weights.shape() != weights.shape() {
        return Err(Error::shape(
            "conv2d_backward",
            format!(
                "weight-grad buffer {:?} vs weights {:?}",
                grad_weights.shape(),
                weights.shape()
            ),
        ));
    }
    let mut grad_in = Tensor::zeros(&[ci, h, w]);
    let inp = input.data();
    let wts = weights.data();
    let go = grad_out.data();
    let gw = grad_weights.data_mut();
    let gb = grad_bias.data_mut();
    let gi = grad_in.data_mut();

    for o in 0..co {
        let gop = &go[o * h_out * w_out..(o + 1) * h_out * w_out];
        gb[o] += lane_sum(gop);
        for c in 0..ci {
            let ip = &inp[c * h * w..(c + 1) * h * w];
            let gip = &mut gi[c * h * w..(c + 1) * h * w];
            let wbase = (o * ci + c) * k * k;
            for u in 0..k {
                for v in 0..k {
                    let wv = wts[wbase + u * k + v];
                    let mut wsum = S::zero();
                    if stride == 1 {
                        for i in 0..h_out {
                            let irow = (i + u) * w + v;
                            let gorow = &gop[i * w_out..i * w_out + w_out];
                            wsum += dot(gorow, &ip[irow..irow + w_out]);
                            axpy(&mut gip[irow..irow + w_out], wv, gorow);
                        }
                    } else {
                        for i in 0..h_out {
                            let irow = (i * stride + u) * w + v;
                            let gorow = &gop[i * w_out..i * w_out + w_out];
                            let mut s = S::zero();
                            for j in 0..w_out {
                                s += gorow[j] * ip[irow + j * stride];
                                gip[irow + j * stride] += wv * gorow[j];
                            }
                            wsum += s;
                        }
                    }
                    gw[wbase + u * k + v] += wsum;
                }
            }
        }
    }
    Ok(grad_in)
}

/// Convenience wrapper returning freshly allocated gradients.
pub fn conv2d_backward<S: Scalar>(
    input: &Tensor<S>,
    weights: &Tensor<S>,
    stride: usize,
    grad_out: &Tensor<S>,
) -> Result<(Tensor<S>, Tensor<S>, Tensor<S>)> {
    let mut gw = Tensor::zeros(weights.shape());
    let mut gb = Tensor::zeros(&[weights.dim(0)]);
    let gi = conv2d_backward_acc(input, weights, stride, grad_out, &mut gw, &mut gb)?;
    Ok((gi, gw, gb))
}

/// Non-overlapping 2x2 max pooling. Odd trailing rows/columns are cropped.
/// Returns the pooled tensor and, per output element, the linear index of its
/// argmax within the input (for backward routing).
pub fn maxpool2<S: Scalar>(input: &Tensor<S>) -> Result<(Tensor<S>, Vec<u32>)> {
    if input.rank() != 3 {
        return Err(Error::shape(
            "maxpool2",
            format!("want [C,H,W], got {:?}", input.shape()),
        ));
    }
    let (c, h, w) = (input.dim(0), input.dim(1), input.dim(2));
    let (h2, w2) = (h / 2, w / 2);
    if c == 0 || h2 == 0 || w2 == 0 {
        return Err(Error::shape(
            "maxpool2",
            format!("input {:?} leaves an empty pooled output", input.shape()),
        ));
    }
    let mut out = Tensor::zeros(&[c, h2, w2]);
    let mut argmax = vec![0u32; c * h2 * w2];
    let ip = input.data();
    let od = out.data_mut();
    for ch in 0..c {
        let plane = ch * h * w;
        for i in 0..h2 {
            for j in 0..w2 {
                let base = plane + (2 * i) * w + 2 * j;
                let candidates = [base, base + 1, base + w, base + w + 1];
                let mut best = candidates[0];
                let mut best_v = ip[best];
                for &idx in &candidates[1..] {
                    if ip[idx] > best_v {
                        best_v = ip[idx];
                        best = idx;
                    }
                }
                let oidx = (ch * h2 + i) * w2 + j;
                od[oidx] = best_v;
                argmax[oidx] = best as u32;
            }
        }
    }
    Ok((out, argmax))
}

/// Routes each upstream gradient to the recorded argmax position.
pub fn maxpool2_backward<S: Scalar>(
    input_shape: &[usize],
    argmax: &[u32],
    grad_out: &Tensor<S>,
) -> Result<Tensor<S>> {
    if input_shape.len() != 3 {
        return Err(Error::shape(
            "maxpool2_backward",
            format!("want [C,H,W] input shape, got {:?}", input_shape),
        ));
    }
    if argmax.len() != grad_out.len() {
        return Err(Error::shape(
            "maxpool2_backward",
            format!(
                "argmax cache has {} entries, upstream gradient {}",
                argmax.len(),
                grad_out.len()
            ),
        ));
    }
    let mut grad_in = Tensor::zeros(input_shape);
    let gi = grad_in.data_mut();
    for (&idx, &g) in argmax.iter().zip(grad_out.data().iter()) {
        gi[idx as usize] += g;
    }
    Ok(grad_in)
}

pub fn relu<S: Scalar>(input: &Tensor<S>) -> Tensor<S> {
    input.map(|v| if v > S::zero() { v } else { S::zero() })
}

/// Gradient passes only where the forward input was strictly positive.
pub fn relu_backward<S: Scalar>(input: &Tensor<S>, grad_out: &Tensor<S>) -> Result<Tensor<S>> {
    if input.shape() != grad_out.shape() {
        return Err(Error::shape(
            "relu_backward",
            format!("{:?} vs {:?}", input.shape(), grad_out.shape()),
        ));
    }
    let data = input
        .data()
        .iter()
        .zip(grad_out.data().iter())
        .map(|(&x, &g)| if x > S::zero() { g } else { S::zero() })
        .collect();
    Tensor::from_vec(input.shape(), data)
}

/// Inverted dropout: in train mode each scalar is zeroed with probability `p`
/// and survivors are scaled by 1/(1-p); eval mode is the identity. Returns the
/// keep mask alongside the output.
pub fn dropout<S: Scalar>(
    input: &Tensor<S>,
    p: f64,
    mode: Mode,
    rng: &mut Rng,
) -> Result<(Tensor<S>, Vec<bool>)> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Config(format!(
            "dropout probability must be in [0,1), got {}",
            p
        )));
    }
    match mode {
        Mode::Eval => Ok((input.clone(), vec![true; input.len()])),
        Mode::Train => {
            if p == 0.0 {
                return Ok((input.clone(), vec![true; input.len()]));
            }
            let scale = S::from_f64(1.0 / (1.0 - p));
            let mut mask = vec![false; input.len()];
            let mut data = Vec::with_capacity(input.len());
            for (i, &x) in input.data().iter().enumerate() {
                if rng.bernoulli(p) {
                    data.push(S::zero());
                } else {
                    mask[i] = true;
                    data.push(x * scale);
                }
            }
            Ok((Tensor::from_vec(input.shape(), data)?, mask))
        }
    }
}

pub fn dropout_backward<S: Scalar>(
    mask: &[bool],
    p: f64,
    grad_out: &Tensor<S>,
) -> Result<Tensor<S>> {
    if mask.len() != grad_out.len() {
        return Err(Error::shape(
            "dropout_backward",
            format!("mask {} vs gradient {}", mask.len(), grad_out.len()),
        ));
    }
    let scale = S::from_f64(1.0 / (1.0 - p));
    let data = grad_out
        .data()
        .iter()
        .zip(mask.iter())
        .map(|(&g, &keep)| if keep { g * scale } else { S::zero() })
        .collect();
    Tensor::from_vec(grad_out.shape(), data)
}

/// sqrt(sum((a-b)^2) + eps). With `eps > 0` the gradient (a-b)/distance stays
/// finite at a == b.
pub fn l2_distance<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, eps: f64) -> Result<S> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            "l2_distance",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(l2_distance_slice(a.data(), b.data(), eps))
}

#[inline]
pub fn l2_distance_slice<S: Scalar>(a: &[S], b: &[S], eps: f64) -> S {
    (sq_diff_sum(a, b) + S::from_f64(eps)).sqrt()
}

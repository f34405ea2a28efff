//! The embedding network: an ordered conv / ReLU / dropout / max-pool stack
//! ending in a final convolution whose flattened output is the embedding.
//! There is no classification layer. One `Network` instance carries the
//! shared parameters for every branch of a comparison objective; branch
//! gradients are accumulated into a single `ParamGrads`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::{self, Mode};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Architecture description. `feature_maps` has one more entry than
/// `filter_sizes`; the first entry is the input channel count and the last is
/// the channel dimension of the embedding (the spatial extent that survives
/// the stack multiplies into the final embedding length).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub input_shape: [usize; 3],
    pub filter_sizes: Vec<usize>,
    pub feature_maps: Vec<usize>,
    #[serde(default = "default_embed_relu")]
    pub embed_relu: bool,
    #[serde(default = "default_dropout_p")]
    pub dropout_p: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_embed_relu() -> bool {
    true
}

fn default_dropout_p() -> f64 {
    0.5
}

impl NetworkConfig {
    /// 28x28 single-channel preset: feature maps {1,32,64,128}, filters {5,3,3}.
    pub fn mnist() -> Self {
        NetworkConfig {
            input_shape: [1, 28, 28],
            filter_sizes: vec![5, 3, 3],
            feature_maps: vec![1, 32, 64, 128],
            embed_relu: true,
            dropout_p: 0.5,
            seed: 0,
        }
    }

    /// 32x32 three-channel preset: feature maps {3,64,128,256,128}, filters {5,3,3,2}.
    pub fn cifar() -> Self {
        NetworkConfig {
            input_shape: [3, 32, 32],
            filter_sizes: vec![5, 3, 3, 2],
            feature_maps: vec![3, 64, 128, 256, 128],
            embed_relu: true,
            dropout_p: 0.5,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_maps.len() != self.filter_sizes.len() + 1 {
            return Err(Error::Config(format!(
                "feature_maps has {} entries, want filter_sizes+1 = {}",
                self.feature_maps.len(),
                self.filter_sizes.len() + 1
            )));
        }
        if self.filter_sizes.is_empty() {
            return Err(Error::Config("at least one convolution required".into()));
        }
        if self.feature_maps[0] != self.input_shape[0] {
            return Err(Error::Config(format!(
                "feature_maps[0] = {} must equal input channels {}",
                self.feature_maps[0], self.input_shape[0]
            )));
        }
        if self.filter_sizes.iter().any(|&k| k == 0) || self.feature_maps.iter().any(|&m| m == 0) {
            return Err(Error::Config("zero-sized filter or feature map".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!(
                "dropout_p must be in [0,1), got {}",
                self.dropout_p
            )));
        }
        if self.input_shape.iter().any(|&d| d == 0) {
            return Err(Error::Config("empty input shape".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub(crate) enum Layer {
    Conv { w: usize, b: usize, stride: usize },
    Relu,
    MaxPool2,
    Dropout,
}

/// Shape bookkeeping produced while assembling the stack.
#[derive(Clone, Debug)]
pub struct BuildInfo {
    pub param_count: usize,
    pub embed_dim: usize,
    /// (layer name, [C,H,W] after the layer)
    pub trace: Vec<(String, [usize; 3])>,
}

impl BuildInfo {
    pub fn summary(&self) -> String {
        let mut s = format!(
            "params: {}, embedding dim: {}\n",
            self.param_count, self.embed_dim
        );
        for (name, shape) in &self.trace {
            s.push_str(&format!(
                "  {:<12} -> {}x{}x{}\n",
                name, shape[0], shape[1], shape[2]
            ));
        }
        s
    }
}

/// Per-layer forward state retained in train mode for the backward pass.
pub(crate) enum LayerCache<S> {
    Conv { input: Tensor<S> },
    Relu { input: Tensor<S> },
    Pool { argmax: Vec<u32>, input_shape: [usize; 3] },
    Dropout { mask: Vec<bool> },
}

/// Caches for one sample's forward pass, in layer order.
pub struct SampleCache<S> {
    entries: Vec<LayerCache<S>>,
    out_shape: [usize; 3],
}

/// Parameter gradients, tensor-per-tensor aligned with `Network::params`.
#[derive(Clone, Debug)]
pub struct ParamGrads<S> {
    pub tensors: Vec<Tensor<S>>,
}

impl<S: Scalar> ParamGrads<S> {
    pub fn add(&mut self, other: &ParamGrads<S>) -> Result<()> {
        if self.tensors.len() != other.tensors.len() {
            return Err(Error::shape("ParamGrads::add", "tensor count mismatch"));
        }
        for (a, b) in self.tensors.iter_mut().zip(other.tensors.iter()) {
            a.add_scaled(S::one(), b)?;
        }
        Ok(())
    }

    pub fn scale(&mut self, a: S) {
        for t in &mut self.tensors {
            t.scale(a);
        }
    }

    pub fn l2_norm(&self) -> f64 {
        let mut s = 0.0;
        for t in &self.tensors {
            for &v in t.data() {
                let v = v.as_f64();
                s += v * v;
            }
        }
        s.sqrt()
    }
}

#[derive(Clone)]
pub struct Network<S> {
    config: NetworkConfig,
    layers: Vec<Layer>,
    params: Vec<Tensor<S>>,
    velocity: Vec<Tensor<S>>,
    mode: Mode,
    dropout_p: f64,
    info: BuildInfo,
}

/// Assemble the stack described by `config`, drawing initial weights from
/// `rng` (uniform in +-sqrt(6/fan_in), biases zero). Layout: every
/// convolution except the last is followed by ReLU, dropout and 2x2 pooling;
/// the final convolution feeds the embedding, optionally rectified.
pub fn build_network<S: Scalar>(config: &NetworkConfig, rng: &Rng) -> Result<Network<S>> {
    config.validate()?;
    let n_convs = config.filter_sizes.len();
    let mut layers = Vec::new();
    let mut params: Vec<Tensor<S>> = Vec::new();
    let mut trace = Vec::new();
    let (mut c, mut h, mut w) = (
        config.input_shape[0],
        config.input_shape[1],
        config.input_shape[2],
    );
    for li in 0..n_convs {
        let k = config.filter_sizes[li];
        let c_out = config.feature_maps[li + 1];
        if k > h || k > w {
            return Err(Error::Config(format!(
                "conv layer {}: kernel {k} larger than remaining extent {h}x{w}",
                li
            )));
        }
        let fan_in = c * k * k;
        let bound = (6.0 / fan_in as f64).sqrt();
        let mut layer_rng = rng.derive(li as u64);
        let w_idx = params.len();
        params.push(Tensor::uniform(&[c_out, c, k, k], -bound, bound, &mut layer_rng));
        let b_idx = params.len();
        params.push(Tensor::zeros(&[c_out]));
        layers.push(Layer::Conv {
            w: w_idx,
            b: b_idx,
            stride: 1,
        });
        c = c_out;
        h = h - k + 1;
        w = w - k + 1;
        trace.push((format!("conv{}(k={})", li + 1, k), [c, h, w]));
        if li < n_convs - 1 {
            layers.push(Layer::Relu);
            trace.push((format!("relu{}", li + 1), [c, h, w]));
            layers.push(Layer::Dropout);
            trace.push((format!("dropout{}", li + 1), [c, h, w]));
            if h < 2 || w < 2 {
                return Err(Error::Config(format!(
                    "pool after conv layer {}: extent {}x{} too small to pool",
                    li, h, w
                )));
            }
            h /= 2;
            w /= 2;
            layers.push(Layer::MaxPool2);
            trace.push((format!("maxpool{}", li + 1), [c, h, w]));
        } else if config.embed_relu {
            layers.push(Layer::Relu);
            trace.push(("embed_relu".into(), [c, h, w]));
        }
    }
    let velocity: Vec<Tensor<S>> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
    let param_count = params.iter().map(|p| p.len()).sum();
    let embed_dim = c * h * w;
    Ok(Network {
        config: config.clone(),
        layers,
        params,
        velocity,
        mode: Mode::Eval,
        dropout_p: config.dropout_p,
        info: BuildInfo {
            param_count,
            embed_dim,
            trace,
        },
    })
}

impl<S: Scalar> Network<S> {
    /// Build with the rng seeded from `config.seed`.
    pub fn from_config(config: &NetworkConfig) -> Result<Self> {
        build_network(config, &Rng::new(config.seed))
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn info(&self) -> &BuildInfo {
        &self.info
    }

    pub fn embed_dim(&self) -> usize {
        self.info.embed_dim
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn dropout_p(&self) -> f64 {
        self.dropout_p
    }

    pub fn set_dropout_p(&mut self, p: f64) -> Result<()> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout_p must be in [0,1), got {p}")));
        }
        self.dropout_p = p;
        Ok(())
    }

    pub fn params(&self) -> &[Tensor<S>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<S>] {
        &mut self.params
    }

    /// Params and velocity together, for the optimizer.
    pub fn params_and_velocity_mut(&mut self) -> (&mut [Tensor<S>], &mut [Tensor<S>]) {
        (&mut self.params, &mut self.velocity)
    }

    pub fn set_params(&mut self, params: Vec<Tensor<S>>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::shape("set_params", "tensor count mismatch"));
        }
        for (cur, new) in self.params.iter().zip(params.iter()) {
            if cur.shape() != new.shape() {
                return Err(Error::shape(
                    "set_params",
                    format!("{:?} vs {:?}", cur.shape(), new.shape()),
                ));
            }
        }
        self.params = params;
        for v in &mut self.velocity {
            v.fill(S::zero());
        }
        Ok(())
    }

    pub fn zero_grads(&self) -> ParamGrads<S> {
        ParamGrads {
            tensors: self.params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    /// Forward one [C,H,W] sample. Returns the embedding and, in train mode,
    /// the caches needed for `backward_sample`. Train-mode dropout draws from
    /// `rng`; eval mode needs no randomness.
    pub fn forward_sample(
        &self,
        image: &Tensor<S>,
        mut rng: Option<&mut Rng>,
    ) -> Result<(Vec<S>, Option<SampleCache<S>>)> {
        if image.shape() != self.config.input_shape {
            return Err(Error::shape(
                "forward",
                format!(
                    "sample shape {:?} vs configured input {:?}",
                    image.shape(),
                    self.config.input_shape
                ),
            ));
        }
        let train = self.mode == Mode::Train;
        if train && self.dropout_p > 0.0 && rng.is_none() {
            return Err(Error::Config(
                "train-mode forward with dropout needs an rng".into(),
            ));
        }
        let mut cur = image.clone();
        let mut entries = if train {
            Vec::with_capacity(self.layers.len())
        } else {
            Vec::new()
        };
        for layer in &self.layers {
            match layer {
                Layer::Conv { w, b, stride } => {
                    let out = ops::conv2d(&cur, &self.params[*w], &self.params[*b], *stride)?;
                    if train {
                        entries.push(LayerCache::Conv { input: cur });
                    }
                    cur = out;
                }
                Layer::Relu => {
                    let out = ops::relu(&cur);
                    if train {
                        entries.push(LayerCache::Relu { input: cur });
                    }
                    cur = out;
                }
                Layer::MaxPool2 => {
                    let shape = [cur.dim(0), cur.dim(1), cur.dim(2)];
                    let (out, argmax) = ops::maxpool2(&cur)?;
                    if train {
                        entries.push(LayerCache::Pool {
                            argmax,
                            input_shape: shape,
                        });
                    }
                    cur = out;
                }
                Layer::Dropout => {
                    if train {
                        let (out, mask) = match rng.as_deref_mut() {
                            Some(r) => ops::dropout(&cur, self.dropout_p, Mode::Train, r)?,
                            // only reachable with dropout_p == 0 (checked above)
                            None => (cur.clone(), vec![true; cur.len()]),
                        };
                        entries.push(LayerCache::Dropout { mask });
                        cur = out;
                    }
                    // eval: identity, nothing to do
                }
            }
        }
        let out_shape = [cur.dim(0), cur.dim(1), cur.dim(2)];
        let embedding = cur.into_vec();
        let cache = train.then_some(SampleCache {
            entries,
            out_shape,
        });
        Ok((embedding, cache))
    }

    /// Batched forward over [N,C,H,W]. Returns [N,D] embeddings plus one cache
    /// per sample in train mode. Per-sample dropout streams are derived from
    /// `rng` by sample index, so results do not depend on evaluation order.
    pub fn embed(
        &self,
        batch: &Tensor<S>,
        rng: Option<&Rng>,
    ) -> Result<(Tensor<S>, Option<Vec<SampleCache<S>>>)> {
        if batch.rank() != 4 {
            return Err(Error::shape(
                "embed",
                format!("want [N,C,H,W], got {:?}", batch.shape()),
            ));
        }
        let n = batch.dim(0);
        let sample_len = batch.len() / n.max(1);
        let d = self.info.embed_dim;
        let mut out = Tensor::zeros(&[n, d]);
        let mut caches = Vec::new();
        let train = self.mode == Mode::Train;
        if train && self.dropout_p > 0.0 && rng.is_none() {
            return Err(Error::Config(
                "train-mode embed with dropout needs an rng".into(),
            ));
        }
        for i in 0..n {
            let img = Tensor::from_vec(
                &self.config.input_shape,
                batch.data()[i * sample_len..(i + 1) * sample_len].to_vec(),
            )?;
            let mut sample_rng = rng.map(|r| r.derive(i as u64));
            let (emb, cache) = self.forward_sample(&img, sample_rng.as_mut())?;
            out.data_mut()[i * d..(i + 1) * d].copy_from_slice(&emb);
            if let Some(c) = cache {
                caches.push(c);
            }
        }
        Ok((out, train.then_some(caches)))
    }

    /// Backpropagate one sample's embedding gradient through its cached
    /// forward pass, accumulating parameter gradients into `grads`.
    pub fn backward_sample(
        &self,
        cache: &SampleCache<S>,
        grad_embed: &[S],
        grads: &mut ParamGrads<S>,
    ) -> Result<()> {
        let [c, h, w] = cache.out_shape;
        if grad_embed.len() != c * h * w {
            return Err(Error::shape(
                "backward",
                format!(
                    "embedding gradient length {} vs flattened output {}",
                    grad_embed.len(),
                    c * h * w
                ),
            ));
        }
        if grads.tensors.len() != self.params.len() {
            return Err(Error::shape("backward", "gradient buffer mismatch"));
        }
        if cache.entries.len() != self.layers.len() {
            return Err(Error::shape(
                "backward",
                format!(
                    "cache has {} entries for {} layers (stale cache?)",
                    cache.entries.len(),
                    self.layers.len()
                ),
            ));
        }
        let mut grad = Tensor::from_vec(&[c, h, w], grad_embed.to_vec())?;
        for (layer, entry) in self.layers.iter().zip(cache.entries.iter()).rev() {
            match (layer, entry) {
                (Layer::Conv { w, b, stride }, LayerCache::Conv { input }) => {
                    let (gw_slot, gb_slot) = (*w, *b);
                    // split_at_mut keeps the two gradient tensors disjoint
                    let (left, right) = grads.tensors.split_at_mut(gb_slot);
                    let gw = &mut left[gw_slot];
                    let gb = &mut right[0];
                    grad = ops::conv2d_backward_acc(
                        input,
                        &self.params[*w],
                        *stride,
                        &grad,
                        gw,
                        gb,
                    )?;
                }
                (Layer::Relu, LayerCache::Relu { input }) => {
                    grad = ops::relu_backward(input, &grad)?;
                }
                (Layer::MaxPool2, LayerCache::Pool { argmax, input_shape }) => {
                    grad = ops::maxpool2_backward(input_shape, argmax, &grad)?;
                }
                (Layer::Dropout, LayerCache::Dropout { mask }) => {
                    grad = ops::dropout_backward(mask, self.dropout_p, &grad)?;
                }
                _ => {
                    return Err(Error::shape(
                        "backward",
                        "cache entry does not match layer (stale cache?)".into(),
                    ))
                }
            }
        }
        Ok(())
    }

    /// Sum of per-sample parameter gradients for a batched embed call.
    pub fn net_backward(
        &self,
        caches: &[SampleCache<S>],
        grad_embeddings: &Tensor<S>,
    ) -> Result<ParamGrads<S>> {
        if grad_embeddings.rank() != 2 || grad_embeddings.dim(0) != caches.len() {
            return Err(Error::shape(
                "net_backward",
                format!(
                    "{} caches vs gradient shape {:?}",
                    caches.len(),
                    grad_embeddings.shape()
                ),
            ));
        }
        let d = grad_embeddings.dim(1);
        let mut grads = self.zero_grads();
        for (i, cache) in caches.iter().enumerate() {
            self.backward_sample(cache, &grad_embeddings.data()[i * d..(i + 1) * d], &mut grads)?;
        }
        Ok(grads)
    }
}

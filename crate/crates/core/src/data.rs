//! Labeled image datasets and the instance samplers feeding training. Images
//! live in one [N,C,H,W] tensor; sampling streams own a private `Rng`, so
//! several streams can run concurrently without coordination and a given seed
//! always yields the same instance sequence.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::idx;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::siamese::PairLabel;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

pub struct LabeledDataset<S> {
    pub images: Tensor<S>,
    pub labels: Vec<usize>,
    /// Per-class sample indices.
    pub class_index: Vec<Vec<usize>>,
    /// Position of each sample within its class list (for uniform
    /// without-replacement draws).
    pos_in_class: Vec<usize>,
    pub split: Split,
    pub normalized: bool,
}

impl<S: Scalar> LabeledDataset<S> {
    pub fn from_parts(images: Tensor<S>, labels: Vec<usize>, split: Split) -> Result<Self> {
        if images.rank() != 4 {
            return Err(Error::Data(format!(
                "images must be [N,C,H,W], got {:?}",
                images.shape()
            )));
        }
        if images.dim(0) != labels.len() {
            return Err(Error::Data(format!(
                "{} images vs {} labels",
                images.dim(0),
                labels.len()
            )));
        }
        let k = labels.iter().copied().max().map_or(0, |m| m + 1);
        let mut class_index = vec![Vec::new(); k];
        let mut pos_in_class = vec![0usize; labels.len()];
        for (i, &c) in labels.iter().enumerate() {
            pos_in_class[i] = class_index[c].len();
            class_index[c].push(i);
        }
        Ok(LabeledDataset {
            images,
            labels,
            class_index,
            pos_in_class,
            split,
            normalized: false,
        })
    }

    /// Parse an IDX image/label file pair. A channel axis C=1 is added.
    pub fn load_idx(
        images_path: impl AsRef<std::path::Path>,
        labels_path: impl AsRef<std::path::Path>,
        split: Split,
    ) -> Result<Self> {
        let (n, h, w, pixels) = idx::read_idx_images(images_path)?;
        let labels = idx::read_idx_labels(labels_path)?;
        if labels.len() != n {
            return Err(Error::Data(format!(
                "image file holds {n} samples, label file {}",
                labels.len()
            )));
        }
        let data: Vec<S> = pixels.iter().map(|&p| S::from_f64(p as f64)).collect();
        let images = Tensor::from_vec(&[n, 1, h, w], data)?;
        Self::from_parts(images, labels.iter().map(|&l| l as usize).collect(), split)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_index.len()
    }

    pub fn sample_shape(&self) -> [usize; 3] {
        [self.images.dim(1), self.images.dim(2), self.images.dim(3)]
    }

    /// Copy of sample `i` as a [C,H,W] tensor.
    pub fn image(&self, i: usize) -> Tensor<S> {
        let len = self.images.len() / self.len();
        let shape = self.sample_shape();
        Tensor::from_vec(&shape, self.images.data()[i * len..(i + 1) * len].to_vec())
            .expect("sample slice matches shape")
    }

    /// First `n` samples (MNIST order is already shuffled across classes).
    pub fn subset(&self, n: usize) -> Result<LabeledDataset<S>> {
        if n == 0 || n > self.len() {
            return Err(Error::Data(format!(
                "subset of {n} from a dataset of {}",
                self.len()
            )));
        }
        let per = self.images.len() / self.len();
        let images = Tensor::from_vec(
            &[n, self.images.dim(1), self.images.dim(2), self.images.dim(3)],
            self.images.data()[..n * per].to_vec(),
        )?;
        let mut ds = Self::from_parts(images, self.labels[..n].to_vec(), self.split)?;
        ds.normalized = self.normalized;
        Ok(ds)
    }

    /// Sampling needs at least two classes and no singleton classes.
    pub fn validate_for_sampling(&self) -> Result<()> {
        let nonempty = self.class_index.iter().filter(|c| !c.is_empty()).count();
        if nonempty < 2 {
            return Err(Error::Data(format!(
                "triplet/pair sampling needs >= 2 classes, dataset has {nonempty}"
            )));
        }
        for (c, members) in self.class_index.iter().enumerate() {
            if members.len() == 1 {
                return Err(Error::Data(format!(
                    "class {c} has a single sample; cannot draw distinct same-class pairs"
                )));
            }
        }
        Ok(())
    }
}

/// Scalar mean/std over every pixel of `train`, applied to both splits.
/// Returns (mean, std). Statistics come from the training pixels only.
pub fn normalize_global<S: Scalar>(
    train: &mut LabeledDataset<S>,
    test: &mut LabeledDataset<S>,
) -> Result<(f64, f64)> {
    if train.is_empty() {
        return Err(Error::Data("cannot normalize an empty training set".into()));
    }
    if train.normalized || test.normalized {
        return Err(Error::Data(
            "dataset already normalized; refusing to apply stats twice".into(),
        ));
    }
    let mut sum = 0.0f64;
    let mut sq = 0.0f64;
    let n = train.images.len() as f64;
    for &v in train.images.data() {
        let v = v.as_f64();
        sum += v;
        sq += v * v;
    }
    let mean = sum / n;
    let var = (sq / n - mean * mean).max(0.0);
    let std = var.sqrt();
    if std < 1e-12 {
        return Err(Error::Data(format!(
            "training pixels have zero variance (std {std:.3e}); cannot normalize"
        )));
    }
    apply_normalization(train, mean, std)?;
    apply_normalization(test, mean, std)?;
    Ok((mean, std))
}

/// Apply externally supplied stats (e.g. from a checkpoint) to a raw dataset.
pub fn apply_normalization<S: Scalar>(
    ds: &mut LabeledDataset<S>,
    mean: f64,
    std: f64,
) -> Result<()> {
    if ds.normalized {
        return Err(Error::Data(
            "dataset already normalized; refusing to apply stats twice".into(),
        ));
    }
    if std <= 0.0 {
        return Err(Error::Data(format!("non-positive std {std}")));
    }
    let m = S::from_f64(mean);
    let inv = S::from_f64(1.0 / std);
    for v in ds.images.data_mut() {
        *v = (*v - m) * inv;
    }
    ds.normalized = true;
    Ok(())
}

/// How the reference sample of a triplet (or the first of a pair) is drawn.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorSampling {
    /// Class uniform, then a sample within the class. Rare classes are not
    /// undertrained.
    #[default]
    ClassUniform,
    /// Uniform over all images.
    ImageUniform,
}

/// How the different-class sample is drawn.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeSampling {
    /// Uniform over every image outside the reference class.
    #[default]
    ImageUniform,
    /// Uniform over the other classes, then uniform within the class.
    ClassUniform,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingConfig {
    pub anchor: AnchorSampling,
    pub negative: NegativeSampling,
}

/// Indices of one (x, x_plus, x_minus) instance.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TripletInstance {
    pub x: usize,
    pub x_plus: usize,
    pub x_minus: usize,
    pub class_of_x: usize,
}

fn nonempty_classes<S: Scalar>(ds: &LabeledDataset<S>) -> Vec<usize> {
    (0..ds.num_classes())
        .filter(|&c| !ds.class_index[c].is_empty())
        .collect()
}

fn draw_anchor<S: Scalar>(ds: &LabeledDataset<S>, rng: &mut Rng, mode: AnchorSampling) -> usize {
    match mode {
        AnchorSampling::ClassUniform => {
            let classes = nonempty_classes(ds);
            let c = classes[rng.index(classes.len())];
            ds.class_index[c][rng.index(ds.class_index[c].len())]
        }
        AnchorSampling::ImageUniform => rng.index(ds.len()),
    }
}

/// Distinct same-class partner, uniform without replacement.
fn draw_same_class<S: Scalar>(ds: &LabeledDataset<S>, rng: &mut Rng, x: usize) -> usize {
    let members = &ds.class_index[ds.labels[x]];
    let px = ds.pos_in_class[x];
    let j = rng.index(members.len() - 1);
    members[if j >= px { j + 1 } else { j }]
}

fn draw_negative<S: Scalar>(
    ds: &LabeledDataset<S>,
    rng: &mut Rng,
    class: usize,
    mode: NegativeSampling,
) -> usize {
    match mode {
        NegativeSampling::ImageUniform => loop {
            let i = rng.index(ds.len());
            if ds.labels[i] != class {
                return i;
            }
        },
        NegativeSampling::ClassUniform => {
            let others: Vec<usize> = nonempty_classes(ds)
                .into_iter()
                .filter(|&c| c != class)
                .collect();
            let c = others[rng.index(others.len())];
            ds.class_index[c][rng.index(ds.class_index[c].len())]
        }
    }
}

/// Draw one uniformly sampled triplet: x and x_plus share a class (distinct
/// indices), x_minus comes from a different class.
pub fn sample_triplet<S: Scalar>(
    ds: &LabeledDataset<S>,
    rng: &mut Rng,
    cfg: SamplingConfig,
) -> TripletInstance {
    let x = draw_anchor(ds, rng, cfg.anchor);
    let class_of_x = ds.labels[x];
    let x_plus = draw_same_class(ds, rng, x);
    let x_minus = draw_negative(ds, rng, class_of_x, cfg.negative);
    TripletInstance {
        x,
        x_plus,
        x_minus,
        class_of_x,
    }
}

/// Lazy stream of `count` fresh triplet instances.
pub struct TripletStream<'a, S> {
    ds: &'a LabeledDataset<S>,
    rng: Rng,
    remaining: usize,
    cfg: SamplingConfig,
}

impl<'a, S: Scalar> Iterator for TripletStream<'a, S> {
    type Item = TripletInstance;

    fn next(&mut self) -> Option<TripletInstance> {
        if self.remaining == 0 {
            return None;
        }
        self.remaining -= 1;
        Some(sample_triplet(self.ds, &mut self.rng, self.cfg))
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        (self.remaining, Some(self.remaining))
    }
}

pub fn epoch_stream<S: Scalar>(
    ds: &LabeledDataset<S>,
    count: usize,
    rng: Rng,
    cfg: SamplingConfig,
) -> Result<TripletStream<'_, S>> {
    ds.validate_for_sampling()?;
    Ok(TripletStream {
        ds,
        rng,
        remaining: count,
        cfg,
    })
}

/// Materialized evaluation stream, generated once and reused across epochs.
pub fn fixed_triplets<S: Scalar>(
    ds: &LabeledDataset<S>,
    count: usize,
    rng: Rng,
    cfg: SamplingConfig,
) -> Result<Vec<TripletInstance>> {
    Ok(epoch_stream(ds, count, rng, cfg)?.collect())
}

/// One pair instance for the contrastive baseline.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PairInstance {
    pub a: usize,
    pub b: usize,
    pub label: PairLabel,
}

/// With probability `p_same` a distinct same-class pair, otherwise a
/// cross-class pair.
pub fn sample_pair<S: Scalar>(
    ds: &LabeledDataset<S>,
    rng: &mut Rng,
    p_same: f64,
    cfg: SamplingConfig,
) -> PairInstance {
    let a = draw_anchor(ds, rng, cfg.anchor);
    if rng.bernoulli(p_same) {
        PairInstance {
            a,
            b: draw_same_class(ds, rng, a),
            label: PairLabel::Similar,
        }
    } else {
        PairInstance {
            a,
            b: draw_negative(ds, rng, ds.labels[a], cfg.negative),
            label: PairLabel::Dissimilar,
        }
    }
}

pub struct PairStream<'a, S> {
    ds: &'a LabeledDataset<S>,
    rng: Rng,
    remaining: usize,
    p_same: f64,
    cfg: SamplingConfig,
}

impl<'a, S: Scalar> Iterator for PairStream<'a, S> {
    type Item = PairInstance;

    fn next(&mut self) -> Option<PairInstance> {
        if self.remaining == 0 {
            return None;
        }
        self.remaining -= 1;
        Some(sample_pair(self.ds, &mut self.rng, self.p_same, self.cfg))
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        (self.remaining, Some(self.remaining))
    }
}

pub fn epoch_pairs<S: Scalar>(
    ds: &LabeledDataset<S>,
    count: usize,
    rng: Rng,
    p_same: f64,
    cfg: SamplingConfig,
) -> Result<PairStream<'_, S>> {
    ds.validate_for_sampling()?;
    if !(0.0..=1.0).contains(&p_same) {
        return Err(Error::Config(format!("p_same must be in [0,1], got {p_same}")));
    }
    Ok(PairStream {
        ds,
        rng,
        remaining: count,
        p_same,
        cfg,
    })
}

pub fn fixed_pairs<S: Scalar>(
    ds: &LabeledDataset<S>,
    count: usize,
    rng: Rng,
    p_same: f64,
    cfg: SamplingConfig,
) -> Result<Vec<PairInstance>> {
    Ok(epoch_pairs(ds, count, rng, p_same, cfg)?.collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(labels: &[usize]) -> LabeledDataset<f64> {
        let n = labels.len();
        let images = Tensor::from_vec(
            &[n, 1, 2, 2],
            (0..n * 4).map(|i| i as f64).collect(),
        )
        .unwrap();
        LabeledDataset::from_parts(images, labels.to_vec(), Split::Train).unwrap()
    }

    #[test]
    fn class_index_consistent() {
        let ds = toy(&[0, 1, 0, 2, 1, 0]);
        assert_eq!(ds.num_classes(), 3);
        let total: usize = ds.class_index.iter().map(|c| c.len()).sum();
        assert_eq!(total, ds.len());
        for (c, members) in ds.class_index.iter().enumerate() {
            for &i in members {
                assert_eq!(ds.labels[i], c);
            }
        }
    }

    #[test]
    fn constant_pixels_rejected() {
        let images = Tensor::full(&[4, 1, 2, 2], 3.0f64);
        let mut train =
            LabeledDataset::from_parts(images, vec![0, 0, 1, 1], Split::Train).unwrap();
        let mut test = toy(&[0, 1]);
        let err = normalize_global(&mut train, &mut test).unwrap_err().to_string();
        assert!(err.contains("variance"), "got: {err}");
    }

    #[test]
    fn normalization_zero_mean_unit_std() {
        let mut train = toy(&[0, 0, 1, 1, 0, 1]);
        let mut test = toy(&[0, 1]);
        let (mean, std) = normalize_global(&mut train, &mut test).unwrap();
        assert!(mean > 0.0 && std > 0.0);
        let data: Vec<f64> = train.images.data().to_vec();
        let n = data.len() as f64;
        let m: f64 = data.iter().sum::<f64>() / n;
        let v: f64 = data.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
        assert!(m.abs() < 1e-6, "mean {m}");
        assert!((v.sqrt() - 1.0).abs() < 1e-6, "std {}", v.sqrt());
        // test was normalized with train stats, not its own
        let tm: f64 = test.images.data().iter().sum::<f64>() / test.images.len() as f64;
        assert!(tm.abs() > 1e-3, "test mean unexpectedly zero: {tm}");
    }

    #[test]
    fn double_normalization_rejected() {
        let mut train = toy(&[0, 0, 1, 1]);
        let mut test = toy(&[0, 1]);
        normalize_global(&mut train, &mut test).unwrap();
        let mut test2 = toy(&[0, 1]);
        assert!(normalize_global(&mut train, &mut test2).is_err());
        assert!(apply_normalization(&mut train, 0.0, 1.0).is_err());
    }

    #[test]
    fn singleton_class_rejected() {
        let ds = toy(&[0, 0, 1]);
        assert!(ds.validate_for_sampling().is_err());
        let ok = toy(&[0, 0, 1, 1]);
        assert!(ok.validate_for_sampling().is_ok());
    }

    #[test]
    fn triplet_constraints_hold_over_many_draws() {
        let ds = toy(&[0, 0, 0, 1, 1, 2, 2, 2, 1, 0]);
        let mut rng = Rng::new(33);
        let cfg = SamplingConfig::default();
        for _ in 0..100_000 {
            let t = sample_triplet(&ds, &mut rng, cfg);
            assert_eq!(ds.labels[t.x], ds.labels[t.x_plus]);
            assert_ne!(ds.labels[t.x], ds.labels[t.x_minus]);
            assert_ne!(t.x, t.x_plus);
            assert_eq!(t.class_of_x, ds.labels[t.x]);
        }
    }

    #[test]
    fn anchor_class_frequency_balanced() {
        // 2 classes x 2 samples: each class should anchor ~50% of draws
        let ds = toy(&[0, 0, 1, 1]);
        let mut rng = Rng::new(99);
        let cfg = SamplingConfig::default();
        let mut count0 = 0usize;
        let draws = 10_000;
        for _ in 0..draws {
            let t = sample_triplet(&ds, &mut rng, cfg);
            if t.class_of_x == 0 {
                count0 += 1;
            }
        }
        let frac = count0 as f64 / draws as f64;
        assert!((frac - 0.5).abs() < 0.03, "class-0 fraction {frac}");
    }

    #[test]
    fn class_uniform_anchor_ignores_class_size() {
        // class 0 has 8 samples, class 1 has 2; anchors still split evenly
        let ds = toy(&[0, 0, 0, 0, 0, 0, 0, 0, 1, 1]);
        let mut rng = Rng::new(5);
        let cfg = SamplingConfig::default();
        let mut count1 = 0usize;
        for _ in 0..10_000 {
            if sample_triplet(&ds, &mut rng, cfg).class_of_x == 1 {
                count1 += 1;
            }
        }
        let frac = count1 as f64 / 10_000.0;
        assert!((frac - 0.5).abs() < 0.03, "class-1 fraction {frac}");

        // image-uniform anchors follow class mass instead
        let cfg = SamplingConfig {
            anchor: AnchorSampling::ImageUniform,
            ..Default::default()
        };
        let mut count1 = 0usize;
        for _ in 0..10_000 {
            if sample_triplet(&ds, &mut rng, cfg).class_of_x == 1 {
                count1 += 1;
            }
        }
        let frac = count1 as f64 / 10_000.0;
        assert!((frac - 0.2).abs() < 0.03, "class-1 fraction {frac}");
    }

    #[test]
    fn stream_counts_and_determinism() {
        let ds = toy(&[0, 0, 1, 1, 2, 2]);
        let cfg = SamplingConfig::default();
        let a: Vec<_> = epoch_stream(&ds, 500, Rng::new(1), cfg).unwrap().collect();
        let b: Vec<_> = epoch_stream(&ds, 500, Rng::new(1), cfg).unwrap().collect();
        assert_eq!(a.len(), 500);
        assert_eq!(a, b);
        let c: Vec<_> = epoch_stream(&ds, 500, Rng::new(2), cfg).unwrap().collect();
        assert_ne!(a, c);
    }

    #[test]
    fn pair_labels_match_probability() {
        let ds = toy(&[0, 0, 0, 1, 1, 1]);
        let cfg = SamplingConfig::default();
        let mut rng = Rng::new(8);
        for _ in 0..1000 {
            let p = sample_pair(&ds, &mut rng, 1.0, cfg);
            assert_eq!(p.label, PairLabel::Similar);
            assert_eq!(ds.labels[p.a], ds.labels[p.b]);
            assert_ne!(p.a, p.b);
        }
        for _ in 0..1000 {
            let p = sample_pair(&ds, &mut rng, 0.0, cfg);
            assert_eq!(p.label, PairLabel::Dissimilar);
            assert_ne!(ds.labels[p.a], ds.labels[p.b]);
        }
        let mut similar = 0usize;
        for _ in 0..10_000 {
            if sample_pair(&ds, &mut rng, 0.5, cfg).label == PairLabel::Similar {
                similar += 1;
            }
        }
        let frac = similar as f64 / 10_000.0;
        assert!((frac - 0.5).abs() < 0.03, "similar fraction {frac}");
    }

    #[test]
    fn subset_keeps_prefix() {
        let ds = toy(&[0, 1, 0, 1, 0, 1]);
        let sub = ds.subset(4).unwrap();
        assert_eq!(sub.len(), 4);
        assert_eq!(sub.labels, &[0, 1, 0, 1]);
        assert_eq!(sub.image(2).data(), ds.image(2).data());
        assert!(ds.subset(0).is_err());
        assert!(ds.subset(7).is_err());
    }
}

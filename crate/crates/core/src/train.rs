//! Optimization loop: SGD with classical momentum over batches of sampled
//! triplet (or pair) instances, each batch pushed through the one shared
//! network three (or two) times and the branch gradients summed.
//!
//! Batch items are processed data-parallel but reduced in index order, so a
//! given seed reproduces the loss sequence bit-exactly at any thread count.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{save_checkpoint, NormStats};
use crate::data::{
    epoch_pairs, epoch_stream, fixed_pairs, fixed_triplets, LabeledDataset, SamplingConfig,
};
use crate::error::{Error, Result};
use crate::net::{Network, ParamGrads};
use crate::ops::Mode;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::siamese::{contrastive_loss, PairLabel};
use crate::tensor::Tensor;
use crate::triplet::{triplet_loss_and_grad, triplet_output, LossVariant, TripletOutput};

// Tags for deriving independent random streams from the master seed.
const TAG_EVAL_STREAM: u64 = 0x4556_414c;
const TAG_EPOCH_STREAM: u64 = 0x5354_524d;
const TAG_DROPOUT: u64 = 0x4452_4f50;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub dropout_p: f64,
    /// Multiplicative learning-rate factor applied per epoch.
    pub lr_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub triplets_per_epoch: usize,
    pub eval_stream_size: usize,
    pub seed: u64,
    pub loss_variant: LossVariant,
    /// Contrastive margin (pair mode only).
    pub margin: f64,
    /// Probability of drawing a similar pair (pair mode only).
    pub p_same: f64,
    pub sampling: SamplingConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 0.5,
            momentum: 0.9,
            dropout_p: 0.5,
            lr_decay: 0.9,
            epochs: 5,
            batch_size: 64,
            triplets_per_epoch: 100_000,
            eval_stream_size: 10_000,
            seed: 0,
            loss_variant: LossVariant::MseSoftmax,
            margin: 1.0,
            p_same: 0.5,
            sampling: SamplingConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr0 <= 0.0 {
            return Err(Error::Config(format!("lr0 must be positive, got {}", self.lr0)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must be in [0,1), got {}",
                self.momentum
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!(
                "dropout_p must be in [0,1), got {}",
                self.dropout_p
            )));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::Config(format!(
                "lr_decay must be in (0,1], got {}",
                self.lr_decay
            )));
        }
        if self.batch_size == 0 || self.triplets_per_epoch == 0 || self.eval_stream_size == 0 {
            return Err(Error::Config(
                "batch_size, triplets_per_epoch and eval_stream_size must be >= 1".into(),
            ));
        }
        if self.margin <= 0.0 {
            return Err(Error::Config(format!(
                "margin must be positive, got {}",
                self.margin
            )));
        }
        if !(0.0..=1.0).contains(&self.p_same) {
            return Err(Error::Config(format!(
                "p_same must be in [0,1], got {}",
                self.p_same
            )));
        }
        Ok(())
    }
}

/// lr0 * lr_decay^epoch.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.lr0 * cfg.lr_decay.powi(epoch as i32)
}

/// Classical momentum update: v <- momentum*v - lr*g; p <- p + v.
pub fn sgd_momentum_step<S: Scalar>(
    params: &mut [Tensor<S>],
    velocity: &mut [Tensor<S>],
    grads: &[Tensor<S>],
    lr: f64,
    momentum: f64,
) -> Result<()> {
    if params.len() != velocity.len() || params.len() != grads.len() {
        return Err(Error::shape("sgd_momentum_step", "tensor count mismatch"));
    }
    let lr = S::from_f64(lr);
    let mu = S::from_f64(momentum);
    for ((p, v), g) in params.iter_mut().zip(velocity.iter_mut()).zip(grads.iter()) {
        if p.shape() != g.shape() {
            return Err(Error::shape(
                "sgd_momentum_step",
                format!("param {:?} vs grad {:?}", p.shape(), g.shape()),
            ));
        }
        for ((pv, vv), &gv) in p
            .data_mut()
            .iter_mut()
            .zip(v.data_mut().iter_mut())
            .zip(g.data().iter())
        {
            *vv = mu * *vv - lr * gv;
            *pv += *vv;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    /// Triplet comparison accuracy (or pair threshold accuracy) on the fixed
    /// evaluation stream.
    pub accuracy: f64,
    pub lr: f64,
    pub seconds: f64,
    /// Mean loss of each optimizer step; not part of the CSV.
    #[serde(skip)]
    pub batch_mean_losses: Vec<f64>,
}

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    pub records: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub checkpoint_best: Option<PathBuf>,
    pub checkpoint_final: Option<PathBuf>,
}

impl TrainReport {
    pub fn loss_column(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.mean_loss).collect()
    }

    pub fn final_accuracy(&self) -> Option<f64> {
        self.records.last().map(|r| r.accuracy)
    }

    /// `epoch,loss,accuracy,lr,seconds` with shortest round-trip floats.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut s = String::from("epoch,loss,accuracy,lr,seconds\n");
        for r in &self.records {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                r.epoch, r.mean_loss, r.accuracy, r.lr, r.seconds
            ));
        }
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }
}

/// Artifact paths within an output directory.
pub struct OutPaths {
    pub dir: PathBuf,
    pub report_csv: PathBuf,
    pub events_jsonl: PathBuf,
    pub checkpoint_best: PathBuf,
    pub checkpoint_final: PathBuf,
}

impl OutPaths {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        let dir = dir.into();
        OutPaths {
            report_csv: dir.join("report.csv"),
            events_jsonl: dir.join("events.jsonl"),
            checkpoint_best: dir.join("checkpoint_best.tnet"),
            checkpoint_final: dir.join("checkpoint_final.tnet"),
            dir,
        }
    }
}

struct EventLog {
    file: Option<std::fs::File>,
}

impl EventLog {
    fn open(paths: Option<&OutPaths>) -> Result<Self> {
        let file = match paths {
            Some(p) => {
                std::fs::create_dir_all(&p.dir).map_err(|e| Error::io(&p.dir, e))?;
                Some(
                    std::fs::OpenOptions::new()
                        .create(true)
                        .append(true)
                        .open(&p.events_jsonl)
                        .map_err(|e| Error::io(&p.events_jsonl, e))?,
                )
            }
            None => None,
        };
        Ok(EventLog { file })
    }

    fn emit(&mut self, value: serde_json::Value) {
        if let Some(f) = &mut self.file {
            // event-log failures must not kill a long training run
            let _ = writeln!(f, "{value}");
            let _ = f.flush();
        }
    }
}

fn batch_diagnostic(instances: &[(usize, usize, usize)]) -> String {
    let shown: Vec<String> = instances
        .iter()
        .take(4)
        .map(|(a, b, c)| format!("({a},{b},{c})"))
        .collect();
    format!(
        "[{}{}]",
        shown.join(", "),
        if instances.len() > 4 { ", ..." } else { "" }
    )
}

/// Embed the subset of `ds` referenced by `indices` in eval mode,
/// data-parallel with order-preserving collection.
fn embed_indices<S: Scalar>(
    net: &Network<S>,
    ds: &LabeledDataset<S>,
    indices: &[usize],
) -> Result<Vec<Vec<S>>> {
    indices
        .par_iter()
        .map(|&i| Ok(net.forward_sample(&ds.image(i), None)?.0))
        .collect()
}

fn eval_triplet_accuracy<S: Scalar>(
    net: &Network<S>,
    ds: &LabeledDataset<S>,
    stream: &[crate::data::TripletInstance],
    variant: LossVariant,
) -> Result<f64> {
    let mut refs: Vec<usize> = stream
        .iter()
        .flat_map(|t| [t.x, t.x_plus, t.x_minus])
        .collect();
    refs.sort_unstable();
    refs.dedup();
    let embs = embed_indices(net, ds, &refs)?;
    let slot = |i: usize| refs.binary_search(&i).expect("index was collected");
    let outputs: Vec<TripletOutput<S>> = stream
        .iter()
        .map(|t| {
            triplet_output(
                &embs[slot(t.x)],
                &embs[slot(t.x_plus)],
                &embs[slot(t.x_minus)],
                variant,
            )
        })
        .collect::<Result<_>>()?;
    crate::triplet::triplet_accuracy(&outputs)
}

fn eval_pair_accuracy<S: Scalar>(
    net: &Network<S>,
    ds: &LabeledDataset<S>,
    stream: &[crate::data::PairInstance],
    margin: f64,
) -> Result<f64> {
    let mut refs: Vec<usize> = stream.iter().flat_map(|p| [p.a, p.b]).collect();
    refs.sort_unstable();
    refs.dedup();
    let embs = embed_indices(net, ds, &refs)?;
    let slot = |i: usize| refs.binary_search(&i).expect("index was collected");
    let threshold = S::from_f64(margin / 2.0);
    let correct = stream
        .iter()
        .filter(|p| {
            let d = crate::ops::l2_distance_slice(
                &embs[slot(p.a)],
                &embs[slot(p.b)],
                crate::ops::DIST_EPS,
            );
            let predicted_similar = d < threshold;
            predicted_similar == (p.label == PairLabel::Similar)
        })
        .count();
    Ok(correct as f64 / stream.len() as f64)
}

enum Objective {
    Triplet,
    Pairs,
}

fn train_loop<S: Scalar>(
    mut net: Network<S>,
    train: &LabeledDataset<S>,
    test: &LabeledDataset<S>,
    cfg: &TrainConfig,
    stats: NormStats,
    out: Option<&OutPaths>,
    objective: Objective,
) -> Result<(Network<S>, TrainReport)> {
    cfg.validate()?;
    train.validate_for_sampling()?;
    test.validate_for_sampling()?;
    net.set_dropout_p(cfg.dropout_p)?;
    let master = Rng::new(cfg.seed);
    let mut log = EventLog::open(out)?;
    log.emit(serde_json::json!({
        "event": "start",
        "objective": match objective { Objective::Triplet => "triplet", Objective::Pairs => "siamese" },
        "config": serde_json::to_value(cfg).unwrap_or_default(),
        "train_samples": train.len(),
        "test_samples": test.len(),
        "embed_dim": net.embed_dim(),
        "param_count": net.info().param_count,
    }));

    // fixed evaluation stream, generated once from the test split
    let eval_rng = master.derive(TAG_EVAL_STREAM);
    let eval_triplets;
    let eval_pair_stream;
    match objective {
        Objective::Triplet => {
            eval_triplets = fixed_triplets(test, cfg.eval_stream_size, eval_rng, cfg.sampling)?;
            eval_pair_stream = Vec::new();
        }
        Objective::Pairs => {
            eval_pair_stream =
                fixed_pairs(test, cfg.eval_stream_size, eval_rng, cfg.p_same, cfg.sampling)?;
            eval_triplets = Vec::new();
        }
    }

    let mut report = TrainReport::default();
    let mut best_acc = f64::NEG_INFINITY;

    for epoch in 0..cfg.epochs {
        let epoch_start = Instant::now();
        let lr = lr_schedule(epoch, cfg);
        net.set_mode(Mode::Train);
        let stream_rng = master.derive(TAG_EPOCH_STREAM).derive(epoch as u64);
        let drop_rng = master.derive(TAG_DROPOUT).derive(epoch as u64);

        let mut batch_mean_losses = Vec::new();
        let mut loss_sum = 0.0f64;
        let mut seen = 0usize;
        let mut step = 0usize;

        match objective {
            Objective::Triplet => {
                let mut stream =
                    epoch_stream(train, cfg.triplets_per_epoch, stream_rng, cfg.sampling)?;
                loop {
                    let batch: Vec<_> = stream.by_ref().take(cfg.batch_size).collect();
                    if batch.is_empty() {
                        break;
                    }
                    let step_rng = drop_rng.derive(step as u64);
                    let results: Vec<(f64, ParamGrads<S>)> = batch
                        .par_iter()
                        .enumerate()
                        .map(|(u, inst)| -> Result<(f64, ParamGrads<S>)> {
                            let unit_rng = step_rng.derive(u as u64);
                            let mut grads = net.zero_grads();
                            let mut fwd = |idx: usize, branch: u64| {
                                let mut r = unit_rng.derive(branch);
                                net.forward_sample(&train.image(idx), Some(&mut r))
                            };
                            let (e_x, c_x) = fwd(inst.x, 0)?;
                            let (e_p, c_p) = fwd(inst.x_plus, 1)?;
                            let (e_m, c_m) = fwd(inst.x_minus, 2)?;
                            let (outp, gx, gp, gm) =
                                triplet_loss_and_grad(&e_x, &e_p, &e_m, cfg.loss_variant)?;
                            net.backward_sample(&c_x.unwrap(), &gx, &mut grads)?;
                            net.backward_sample(&c_p.unwrap(), &gp, &mut grads)?;
                            net.backward_sample(&c_m.unwrap(), &gm, &mut grads)?;
                            Ok((outp.loss.as_f64(), grads))
                        })
                        .collect::<Result<_>>()?;

                    let mut batch_grads = net.zero_grads();
                    let mut batch_loss = 0.0f64;
                    for (loss, g) in &results {
                        batch_loss += loss;
                        batch_grads.add(g)?;
                    }
                    let inv = 1.0 / results.len() as f64;
                    batch_grads.scale(S::from_f64(inv));
                    let mean = batch_loss * inv;
                    if !mean.is_finite() {
                        let diag = batch_diagnostic(
                            &batch.iter().map(|t| (t.x, t.x_plus, t.x_minus)).collect::<Vec<_>>(),
                        );
                        log.emit(serde_json::json!({
                            "event": "abort", "epoch": epoch, "step": step,
                            "loss": mean, "batch": diag,
                        }));
                        return Err(Error::NonFiniteLoss {
                            epoch,
                            step,
                            loss: mean,
                            batch: diag,
                        });
                    }
                    batch_mean_losses.push(mean);
                    loss_sum += batch_loss;
                    seen += results.len();
                    let (params, velocity) = net.params_and_velocity_mut();
                    sgd_momentum_step(params, velocity, &batch_grads.tensors, lr, cfg.momentum)?;
                    step += 1;
                }
            }
            Objective::Pairs => {
                let mut stream = epoch_pairs(
                    train,
                    cfg.triplets_per_epoch,
                    stream_rng,
                    cfg.p_same,
                    cfg.sampling,
                )?;
                loop {
                    let batch: Vec<_> = stream.by_ref().take(cfg.batch_size).collect();
                    if batch.is_empty() {
                        break;
                    }
                    let step_rng = drop_rng.derive(step as u64);
                    let results: Vec<(f64, ParamGrads<S>)> = batch
                        .par_iter()
                        .enumerate()
                        .map(|(u, inst)| -> Result<(f64, ParamGrads<S>)> {
                            let unit_rng = step_rng.derive(u as u64);
                            let mut grads = net.zero_grads();
                            let mut r_a = unit_rng.derive(0);
                            let (e_a, c_a) = net.forward_sample(&train.image(inst.a), Some(&mut r_a))?;
                            let mut r_b = unit_rng.derive(1);
                            let (e_b, c_b) = net.forward_sample(&train.image(inst.b), Some(&mut r_b))?;
                            let (outp, ga, gb) =
                                contrastive_loss(&e_a, &e_b, inst.label, cfg.margin)?;
                            net.backward_sample(&c_a.unwrap(), &ga, &mut grads)?;
                            net.backward_sample(&c_b.unwrap(), &gb, &mut grads)?;
                            Ok((outp.loss.as_f64(), grads))
                        })
                        .collect::<Result<_>>()?;

                    let mut batch_grads = net.zero_grads();
                    let mut batch_loss = 0.0f64;
                    for (loss, g) in &results {
                        batch_loss += loss;
                        batch_grads.add(g)?;
                    }
                    let inv = 1.0 / results.len() as f64;
                    batch_grads.scale(S::from_f64(inv));
                    let mean = batch_loss * inv;
                    if !mean.is_finite() {
                        let diag = batch_diagnostic(
                            &batch.iter().map(|p| (p.a, p.b, usize::MAX)).collect::<Vec<_>>(),
                        );
                        log.emit(serde_json::json!({
                            "event": "abort", "epoch": epoch, "step": step,
                            "loss": mean, "batch": diag,
                        }));
                        return Err(Error::NonFiniteLoss {
                            epoch,
                            step,
                            loss: mean,
                            batch: diag,
                        });
                    }
                    batch_mean_losses.push(mean);
                    loss_sum += batch_loss;
                    seen += results.len();
                    let (params, velocity) = net.params_and_velocity_mut();
                    sgd_momentum_step(params, velocity, &batch_grads.tensors, lr, cfg.momentum)?;
                    step += 1;
                }
            }
        }

        net.set_mode(Mode::Eval);
        let accuracy = match objective {
            Objective::Triplet => {
                eval_triplet_accuracy(&net, test, &eval_triplets, cfg.loss_variant)?
            }
            Objective::Pairs => eval_pair_accuracy(&net, test, &eval_pair_stream, cfg.margin)?,
        };
        let record = EpochRecord {
            epoch,
            mean_loss: loss_sum / seen.max(1) as f64,
            accuracy,
            lr,
            seconds: epoch_start.elapsed().as_secs_f64(),
            batch_mean_losses,
        };
        log.emit(serde_json::json!({
            "event": "epoch", "epoch": epoch, "loss": record.mean_loss,
            "accuracy": accuracy, "lr": lr, "seconds": record.seconds,
        }));
        if accuracy > best_acc {
            best_acc = accuracy;
            report.best_epoch = Some(epoch);
            if let Some(paths) = out {
                save_checkpoint(&net, stats, &paths.checkpoint_best)?;
                report.checkpoint_best = Some(paths.checkpoint_best.clone());
                log.emit(serde_json::json!({
                    "event": "checkpoint", "kind": "best", "epoch": epoch,
                    "path": paths.checkpoint_best.display().to_string(),
                }));
            }
        }
        report.records.push(record);
    }

    net.set_mode(Mode::Eval);
    if let Some(paths) = out {
        save_checkpoint(&net, stats, &paths.checkpoint_final)?;
        report.checkpoint_final = Some(paths.checkpoint_final.clone());
        report.write_csv(&paths.report_csv)?;
        log.emit(serde_json::json!({
            "event": "done",
            "path": paths.checkpoint_final.display().to_string(),
        }));
    }
    Ok((net, report))
}

/// Triplet training: per batch the three branches share the network and their
/// parameter gradients are summed before one momentum step. Per epoch the
/// fixed test-split stream is scored, the best checkpoint kept, and the
/// learning rate decayed.
pub fn train_triplet<S: Scalar>(
    net: Network<S>,
    train: &LabeledDataset<S>,
    test: &LabeledDataset<S>,
    cfg: &TrainConfig,
    stats: NormStats,
    out: Option<&OutPaths>,
) -> Result<(Network<S>, TrainReport)> {
    train_loop(net, train, test, cfg, stats, out, Objective::Triplet)
}

/// Contrastive training over sampled pairs with the same loop; accuracy is
/// pair classification at the margin/2 distance threshold.
pub fn train_siamese<S: Scalar>(
    net: Network<S>,
    train: &LabeledDataset<S>,
    test: &LabeledDataset<S>,
    cfg: &TrainConfig,
    stats: NormStats,
    out: Option<&OutPaths>,
) -> Result<(Network<S>, TrainReport)> {
    train_loop(net, train, test, cfg, stats, out, Objective::Pairs)
}

//! Grouped multi-label training and evaluation.

pub mod ablation;
mod groups;
pub mod metrics;

use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::dataio::{LabeledDataset, TrainState};
use crate::error::{Error, Result};
use crate::network::{forward_batch, ForwardPass, ModelParams, NetworkConfig};

pub use groups::{cooccurrence, group_labels, GroupPartition, GROUP_WEIGHT_CLIP};
pub use metrics::{evaluate_scores, MetricsReport, Protocol};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub max_lr: f64,
    /// Floor of the cosine schedule.
    pub min_lr: f64,
    /// Decoupled decay on every tensor except neighborhood and pooling
    /// weights.
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Sampled negatives per positive; 0 keeps every negative.
    pub neg_ratio: usize,
    /// Epochs without validation improvement before stopping; 0 disables.
    pub early_stop_patience: usize,
    pub seed: u64,
    /// Label groups G when grouping is on.
    pub groups: usize,
    pub label_grouping: bool,
    /// Held-out share of the training images when no validation set is
    /// given.
    pub validation_fraction: f64,
    /// Images per tape; chunks of a batch are processed in parallel.
    pub chunk_size: usize,
    /// Exponential moving average of the parameters, used for evaluation.
    pub ema_decay: Option<f64>,
    /// Protocol of the monitored validation macro F1.
    pub protocol: Protocol,
    /// Standardize every visual channel with training-set statistics; the
    /// shift and scale are stored with the model.
    pub standardize: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 128,
            max_lr: 1e-4,
            min_lr: 0.0,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            neg_ratio: 3,
            early_stop_patience: 20,
            seed: 0,
            groups: 4,
            label_grouping: true,
            validation_fraction: 0.1,
            chunk_size: 32,
            ema_decay: None,
            protocol: Protocol::default(),
            standardize: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size == 0 || self.chunk_size == 0 {
            return bad("batch_size and chunk_size must be positive");
        }
        if !(self.max_lr >= 0.0 && self.min_lr >= 0.0 && self.min_lr <= self.max_lr) {
            return bad("learning rates must satisfy 0 <= min_lr <= max_lr");
        }
        if !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || self.eps.is_nan()
            || self.eps <= 0.0
        {
            return bad("betas must lie in [0, 1) and eps must be positive");
        }
        if self.weight_decay < 0.0 {
            return bad("weight_decay must be >= 0");
        }
        if self.label_grouping && self.groups == 0 {
            return bad("groups must be at least 1");
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return bad("validation_fraction must lie in (0, 1)");
        }
        if let Some(d) = self.ema_decay {
            if !(0.0..1.0).contains(&d) {
                return bad("ema_decay must lie in [0, 1)");
            }
        }
        if let Protocol::TopK(0) = self.protocol {
            return bad("top_k must be at least 1");
        }
        Ok(())
    }

    /// Cosine decay from `max_lr` to `min_lr` over `total` steps.
    pub fn learning_rate(&self, step: usize, total: usize) -> f64 {
        if total == 0 {
            return self.max_lr;
        }
        let t = (step as f64 / total as f64).min(1.0);
        self.min_lr + 0.5 * (self.max_lr - self.min_lr) * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

/// Active-label mask: every positive plus `ratio` random negatives per
/// positive (all negatives when fewer exist). Images without positives keep
/// `min(ratio, negatives)` negatives, at least one. `ratio = 0` keeps all.
pub fn sample_negatives(labels: &Array2<f64>, ratio: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_negatives_with(labels, ratio, &mut rng)
}

fn sample_negatives_with(labels: &Array2<f64>, ratio: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let (n, l) = labels.dim();
    if ratio == 0 {
        return Array2::ones((n, l));
    }
    let mut mask = Array2::zeros((n, l));
    for i in 0..n {
        let mut negatives = Vec::new();
        let mut positives = 0;
        for k in 0..l {
            if labels[[i, k]] > 0.0 {
                mask[[i, k]] = 1.0;
                positives += 1;
            } else {
                negatives.push(k);
            }
        }
        let keep = if positives == 0 {
            ratio.min(negatives.len()).max(1).min(negatives.len())
        } else {
            (ratio * positives).min(negatives.len())
        };
        for j in sample(rng, negatives.len(), keep).iter() {
            mask[[i, negatives[j]]] = 1.0;
        }
    }
    mask
}

/// Per-column targets (0/1) and loss weights (`C_g` × mask) in head order.
pub fn head_targets(partition: &GroupPartition, labels: &Array2<f64>, mask: &Array2<f64>) -> (Tensor, Tensor) {
    let cols = partition.column_labels();
    let cw = partition.column_weights();
    let b = labels.nrows();
    let mut t = Array2::zeros((b, cols.len()));
    let mut w = Array2::zeros((b, cols.len()));
    for i in 0..b {
        for (j, &l) in cols.iter().enumerate() {
            t[[i, j]] = if labels[[i, l]] > 0.0 { 1.0 } else { 0.0 };
            w[[i, j]] = cw[j] * mask[[i, l]];
        }
    }
    (t, w)
}

/// Builds the objective on a tape: weighted logistic loss of the head
/// scores plus `reg_scale · ½Σ_g‖W_g‖²`.
pub fn loss_on_tape(
    tape: &mut Tape,
    params: &ModelParams,
    vars: &[Var],
    features: &[&Tensor],
    targets: Tensor,
    weights: Tensor,
    reg_scale: f64,
) -> Result<(Var, ForwardPass)> {
    let fp = forward_batch(tape, params, vars, features, false)?;
    let ce = tape.logistic_loss(fp.logits, targets, weights)?;
    if reg_scale == 0.0 {
        return Ok((ce, fp));
    }
    let mut reg: Option<Var> = None;
    for &h in params.head_indices() {
        let s = tape.sq_frobenius(vars[h])?;
        reg = Some(match reg {
            Some(r) => tape.add(r, s)?,
            None => s,
        });
    }
    let total = match reg {
        Some(r) => {
            let r = tape.scale(r, 0.5 * reg_scale)?;
            tape.add(ce, r)?
        }
        None => ce,
    };
    Ok((total, fp))
}

/// Full objective over a set of images with a given active-label mask.
pub fn total_loss(
    params: &ModelParams,
    partition: &GroupPartition,
    features: &[&Tensor],
    labels: &Array2<f64>,
    mask: &Array2<f64>,
) -> Result<f64> {
    if labels.dim() != mask.dim() || labels.nrows() != features.len() || labels.ncols() != partition.n_labels() {
        return Err(Error::Shape {
            op: "total_loss",
            lhs: labels.dim(),
            rhs: mask.dim(),
        });
    }
    let mut tape = Tape::new();
    let vars = params.register(&mut tape);
    let (t, w) = head_targets(partition, labels, mask);
    let (loss, _) = loss_on_tape(&mut tape, params, &vars, features, t, w, 1.0)?;
    Ok(tape.scalar(loss))
}

/// Scores in label order for every image, computed chunk-wise.
pub fn predict(
    params: &ModelParams,
    partition: &GroupPartition,
    features: &[&Tensor],
    chunk: usize,
) -> Result<Array2<f64>> {
    let chunk = chunk.max(1);
    let parts: Vec<Result<Tensor>> = features
        .par_chunks(chunk)
        .map(|c| crate::network::predict_logits(params, c))
        .collect();
    let mut out = Array2::zeros((features.len(), partition.n_labels()));
    for (ci, part) in parts.into_iter().enumerate() {
        let part = partition.to_label_order(&part?);
        let start = ci * chunk;
        out.slice_mut(ndarray::s![start..start + part.nrows(), ..])
            .assign(&part);
    }
    Ok(out)
}

pub fn evaluate(
    params: &ModelParams,
    partition: &GroupPartition,
    dataset: &LabeledDataset,
    protocol: Protocol,
) -> Result<MetricsReport> {
    if dataset.is_empty() {
        return Err(Error::invalid("evaluation set is empty"));
    }
    let scores = predict(params, partition, &dataset.feature_refs(), 64)?;
    evaluate_scores(&scores, &dataset.labels, protocol)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub learning_rate: f64,
    pub val_cf1: f64,
    pub val_of1: f64,
    pub val_map: f64,
    pub val_precision: f64,
    pub val_recall: f64,
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    /// Parameters of the best validation epoch.
    pub params: ModelParams,
    pub partition: GroupPartition,
    pub history: Vec<EpochRecord>,
    /// 0 when no epoch ran (the initial parameters are returned).
    pub best_epoch: usize,
    pub best_val_cf1: f64,
    pub stopped_early: bool,
    pub state: TrainState,
}

struct Adam {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: i32,
}

impl Adam {
    fn new(params: &ModelParams) -> Self {
        let zeros: Vec<Tensor> = params.tensors().iter().map(|t| Array2::zeros(t.dim())).collect();
        Adam {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    fn step(&mut self, params: &mut ModelParams, grads: &[Tensor], lr: f64, cfg: &TrainConfig) {
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t);
        let c2 = 1.0 - cfg.beta2.powi(self.t);
        let decay: Vec<bool> = (0..grads.len()).map(|i| !params.is_structural(i)).collect();
        let frozen: Vec<bool> = (0..grads.len()).map(|i| params.is_frozen(i)).collect();
        for (i, p) in params.tensors_mut().iter_mut().enumerate() {
            if frozen[i] {
                continue;
            }
            let (m, v, g) = (&mut self.m[i], &mut self.v[i], &grads[i]);
            ndarray::Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                let update = (*m / c1) / ((*v / c2).sqrt() + cfg.eps);
                if decay[i] {
                    *p -= lr * cfg.weight_decay * *p;
                }
                *p -= lr * update;
            });
        }
    }
}

fn check_compatible(net: &NetworkConfig, ds: &LabeledDataset) -> Result<()> {
    if ds.grid != net.grid || ds.visual_dim() != net.visual_dim {
        return Err(Error::Config(format!(
            "dataset is {} with {} features per cell, network expects {} with {}",
            ds.grid,
            ds.visual_dim(),
            net.grid,
            net.visual_dim
        )));
    }
    Ok(())
}

fn norms_dump(params: &ModelParams) -> String {
    params
        .norms()
        .iter()
        .map(|(n, v)| format!("{n}={v:.4e}"))
        .collect::<Vec<_>>()
        .join(", ")
}

/// Batch gradient: chunks run on separate tapes (in parallel) and are
/// summed in chunk order.
fn batch_gradient(
    params: &ModelParams,
    features: &[&Tensor],
    targets: &Tensor,
    weights: &Tensor,
    chunk: usize,
    reg_scale: f64,
) -> Result<(f64, Vec<Tensor>)> {
    let chunks: Vec<(usize, usize)> = (0..features.len())
        .step_by(chunk)
        .map(|s| (s, (s + chunk).min(features.len())))
        .collect();
    let results: Vec<Result<(f64, Vec<Tensor>)>> = chunks
        .par_iter()
        .enumerate()
        .map(|(ci, &(s, e))| {
            let mut tape = Tape::with_strict(false);
            let vars = params.register(&mut tape);
            let t = targets.slice(ndarray::s![s..e, ..]).to_owned();
            let w = weights.slice(ndarray::s![s..e, ..]).to_owned();
            let reg = if ci == 0 { reg_scale } else { 0.0 };
            let (loss, _) = loss_on_tape(&mut tape, params, &vars, &features[s..e], t, w, reg)?;
            let value = tape.scalar(loss);
            if !value.is_finite() {
                return Ok((value, Vec::new()));
            }
            let grads = tape.backward(loss)?;
            Ok((value, vars.iter().map(|&v| grads.wrt(&tape, v)).collect()))
        })
        .collect();
    let mut total = 0.0;
    let mut sum: Vec<Tensor> = params.tensors().iter().map(|t| Array2::zeros(t.dim())).collect();
    for r in results {
        let (loss, grads) = r?;
        total += loss;
        for (acc, g) in sum.iter_mut().zip(&grads) {
            *acc += g;
        }
    }
    Ok((total, sum))
}

/// Trains a network. Without a validation set a `validation_fraction`
/// share of `train` is held out by seed.
pub fn fit(
    train: &LabeledDataset,
    validation: Option<&LabeledDataset>,
    net: &NetworkConfig,
    cfg: &TrainConfig,
) -> Result<FitOutcome> {
    cfg.validate()?;
    net.validate()?;
    check_compatible(net, train)?;
    let split;
    let (train, val) = match validation {
        Some(v) => {
            check_compatible(net, v)?;
            (train, v)
        }
        None => {
            split = train.split(cfg.validation_fraction, cfg.seed)?;
            (&split.0, &split.1)
        }
    };
    if train.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let partition = if cfg.label_grouping {
        group_labels(&train.labels, cfg.groups)?
    } else {
        GroupPartition::single(train.n_labels())
    };
    let mut params = ModelParams::init(net, &partition.group_sizes(), cfg.seed)?;
    if cfg.standardize {
        let (mean, std) = train.channel_stats();
        let scale: Vec<f64> = std.iter().map(|&s| if s > 0.0 { 1.0 / s } else { 1.0 }).collect();
        params.set_input_normalization(&mean, &scale)?;
    }
    let mut ema = cfg.ema_decay.map(|_| params.clone());
    let mut adam = Adam::new(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5eed));

    let n = train.len();
    let batches = n.div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * batches;
    let features = train.feature_refs();

    // Untrained weights are never selected over a trained epoch: near-zero
    // logits clear the threshold for every label and can score a deceptively
    // high macro F1.
    let mut best: Option<(usize, f64, ModelParams)> = None;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut since_best = 0;
    let mut stopped_early = false;
    let mut step = 0;
    let mut lr = cfg.learning_rate(0, total_steps);

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        let mask = sample_negatives_with(&train.labels, cfg.neg_ratio, &mut rng);
        let mut epoch_loss = 0.0;
        for b in 0..batches {
            let idx = &order[b * cfg.batch_size..((b + 1) * cfg.batch_size).min(n)];
            let feats: Vec<&Tensor> = idx.iter().map(|&i| features[i]).collect();
            let labels = train.labels.select(ndarray::Axis(0), idx);
            let m = mask.select(ndarray::Axis(0), idx);
            let (t, w) = head_targets(&partition, &labels, &m);
            let reg_scale = idx.len() as f64 / n as f64;
            let (loss, grads) = batch_gradient(&params, &feats, &t, &w, cfg.chunk_size, reg_scale)?;
            if !loss.is_finite() || grads.iter().any(|g| g.iter().any(|x| !x.is_finite())) {
                return Err(Error::NanLoss {
                    epoch,
                    step,
                    norms: norms_dump(&params),
                });
            }
            epoch_loss += loss;
            lr = cfg.learning_rate(step, total_steps);
            adam.step(&mut params, &grads, lr, cfg);
            params.constrain()?;
            if let (Some(e), Some(d)) = (ema.as_mut(), cfg.ema_decay) {
                for (et, pt) in e.tensors_mut().iter_mut().zip(params.tensors()) {
                    et.zip_mut_with(pt, |a, &b| *a = d * *a + (1.0 - d) * b);
                }
            }
            step += 1;
        }
        let monitored = ema.as_ref().unwrap_or(&params);
        let report = evaluate(monitored, &partition, val, cfg.protocol)?;
        log::info!(
            "epoch {epoch:4} loss {:.6} lr {lr:.3e} val cf1 {:.4} of1 {:.4} map {:.4}",
            epoch_loss / n as f64,
            report.cf1,
            report.of1,
            report.map
        );
        history.push(EpochRecord {
            epoch,
            train_loss: epoch_loss / n as f64,
            learning_rate: lr,
            val_cf1: report.cf1,
            val_of1: report.of1,
            val_map: report.map,
            val_precision: report.precision,
            val_recall: report.recall,
        });
        if best.as_ref().is_none_or(|b| report.cf1 > b.1) {
            best = Some((epoch, report.cf1, monitored.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if cfg.early_stop_patience > 0 && since_best >= cfg.early_stop_patience {
                stopped_early = true;
                break;
            }
        }
    }
    let (best_epoch, best_val_cf1, params) = match best {
        Some(b) => b,
        None => (0, evaluate(&params, &partition, val, cfg.protocol)?.cf1, params),
    };
    Ok(FitOutcome {
        params,
        partition,
        state: TrainState {
            epoch: history.len(),
            step,
            total_steps,
            seed: cfg.seed,
            learning_rate: lr,
        },
        history,
        best_epoch,
        best_val_cf1,
        stopped_early,
    })
}

pub fn write_history_csv(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in history {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes the aggregate metrics followed by one row per class.
pub fn write_metrics_csv(path: &Path, report: &MetricsReport, vocab: &[String]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut text = String::from("scope,label,support,predicted,precision,recall,f1,average_precision\n");
    text.push_str(&format!(
        "overall,,,,{},{},{},{}\n",
        report.precision, report.recall, report.cf1, report.map
    ));
    text.push_str(&format!(
        "micro,,,,{},{},{},\n",
        report.overall_precision, report.overall_recall, report.of1
    ));
    for c in &report.per_class {
        let name = vocab.get(c.label).map_or_else(|| c.label.to_string(), Clone::clone);
        text.push_str(&format!(
            "class,{name},{},{},{},{},{},{}\n",
            c.support,
            c.predicted,
            c.precision,
            c.recall,
            c.f1,
            c.average_precision.map_or_else(String::new, |a| a.to_string())
        ));
    }
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

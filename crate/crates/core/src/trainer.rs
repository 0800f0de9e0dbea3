//! Simulation-based training of the summary network.

use std::path::{Path, PathBuf};

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{LrSchedule, NetworkParams, Optimizer, OptimizerKind, OptimizerMeta};
use crate::rng::substream;
use crate::simulators::dist::truncated_normal;
use crate::simulators::{EamSettings, Family};
use crate::summary::{HierarchicalDataset, SummaryNet, LOG_FLOOR};
use crate::{Error, Result};

// Stream tags keep the different uses of the master seed apart.
const STREAM_BATCH: u64 = 1;
const STREAM_SIM: u64 = 2;
const STREAM_MASK: u64 = 3;
const STREAM_SHUFFLE: u64 = 4;

/// `-sum_j 1[j = label] ln(max(p_j, 1e-12))`.
pub fn log_loss(pmp: &[f64], label: usize) -> f64 {
    -pmp[label].max(LOG_FLOOR).ln()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SizeDist {
    Fixed { value: usize },
    DiscreteUniform { low: usize, high: usize },
}

impl SizeDist {
    pub fn validate(&self, what: &str) -> Result<()> {
        let ok = match *self {
            SizeDist::Fixed { value } => value >= 1,
            SizeDist::DiscreteUniform { low, high } => 1 <= low && low <= high,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!(
                "{what} size distribution needs 1 <= low <= high"
            )))
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        match *self {
            SizeDist::Fixed { value } => value,
            SizeDist::DiscreteUniform { low, high } => rng.random_range(low..=high),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskAugmentation {
    /// Mean number of missing trials per group.
    pub mean: f64,
    pub sd: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    #[default]
    Online,
    Offline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub batch_size: usize,
    /// Optimizer steps for the online regime.
    pub steps: u64,
    /// Passes over the store for the offline regime.
    pub epochs: u64,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub schedule: LrSchedule,
    pub regime: Regime,
    pub groups: SizeDist,
    pub observations: SizeDist,
    pub mask: Option<MaskAugmentation>,
    pub seed: u64,
    pub checkpoint_every: u64,
    /// Validation cadence in steps; 0 evaluates only after the last step.
    pub validate_every: u64,
    pub eam: EamSettings,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            steps: 1000,
            epochs: 1,
            optimizer: OptimizerKind::Adam,
            learning_rate: 5e-4,
            schedule: LrSchedule::default(),
            regime: Regime::Online,
            groups: SizeDist::Fixed { value: 25 },
            observations: SizeDist::Fixed { value: 25 },
            mask: None,
            seed: 0,
            checkpoint_every: 500,
            validate_every: 0,
            eam: EamSettings::default(),
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::config("learning_rate must be positive"));
        }
        self.groups.validate("group")?;
        self.observations.validate("observation")?;
        if let Some(m) = self.mask {
            if !(m.mean.is_finite() && m.sd >= 0.0) {
                return Err(Error::config("mask augmentation needs finite mean and sd >= 0"));
            }
        }
        if !(self.eam.dt > 0.0 && self.eam.t_max > 0.0) {
            return Err(Error::config("eam dt and t_max must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct LabeledBatch {
    pub datasets: Vec<HierarchicalDataset>,
    pub labels: Vec<usize>,
}

impl LabeledBatch {
    pub fn one_hot(&self, num_models: usize) -> Vec<Vec<f64>> {
        self.labels
            .iter()
            .map(|&l| (0..num_models).map(|j| if j == l { 1.0 } else { 0.0 }).collect())
            .collect()
    }

    pub fn refs(&self) -> Vec<&HierarchicalDataset> {
        self.datasets.iter().collect()
    }
}

fn check_models(models: &[Family]) -> Result<usize> {
    if models.len() < 2 {
        return Err(Error::config("need at least two candidate models"));
    }
    let dim = models[0].dim();
    if models.iter().any(|m| m.dim() != dim) {
        return Err(Error::config("candidate models produce data of different dimension"));
    }
    Ok(dim)
}

/// Simulates one dataset from model `j` with its own substream and tags it with `j`.
pub fn simulate_labeled(
    models: &[Family],
    j: usize,
    sizes: &[usize],
    eam: &EamSettings,
    seed: u64,
    keys: &[u64],
) -> Result<HierarchicalDataset> {
    let mut rng = substream(seed, keys);
    let mut d = models[j]
        .simulate(sizes, eam, seed, &mut rng)
        .map_err(|e| Error::Simulation {
            model_index: j,
            source: Box::new(e),
        })?;
    d.meta.model_index = Some(j);
    Ok(d)
}

/// Draws a batch for optimizer step `step`: uniform model indices, one `(M, N)`
/// draw shared by the batch, one substream per dataset.
pub fn sample_training_batch(models: &[Family], cfg: &TrainingConfig, step: u64) -> Result<LabeledBatch> {
    check_models(models)?;
    let mut rng = substream(cfg.seed, &[STREAM_BATCH, step]);
    let m = cfg.groups.sample(&mut rng);
    let n = cfg.observations.sample(&mut rng);
    let labels: Vec<usize> = (0..cfg.batch_size).map(|_| rng.random_range(0..models.len())).collect();
    let sizes = vec![n; m];
    let datasets = labels
        .par_iter()
        .enumerate()
        .map(|(b, &j)| {
            let mut d = simulate_labeled(models, j, &sizes, &cfg.eam, cfg.seed, &[STREAM_SIM, step, b as u64])?;
            if let Some(mask) = cfg.mask {
                let mut r = substream(cfg.seed, &[STREAM_MASK, step, b as u64]);
                d = apply_missingness(&d, mask.mean, mask.sd, &mut r)?;
            }
            Ok(d)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LabeledBatch { datasets, labels })
}

/// Simulates `per_model` datasets from every model, ordered model by model.
pub fn simulate_reference_set(
    models: &[Family],
    per_model: usize,
    sizes: &[usize],
    eam: &EamSettings,
    seed: u64,
) -> Result<Vec<HierarchicalDataset>> {
    check_models(models)?;
    let jobs: Vec<(usize, usize)> = (0..models.len())
        .flat_map(|j| (0..per_model).map(move |i| (j, i)))
        .collect();
    jobs.par_iter()
        .map(|&(j, i)| simulate_labeled(models, j, sizes, eam, seed, &[STREAM_SIM, j as u64, i as u64]))
        .collect()
}

/// Number of trials to hide in a group of `n`: a rounded Normal(mean, sd)
/// truncated to `[1, n - 1]` so at least one trial stays observed.
fn missing_count<R: Rng + ?Sized>(n: usize, mean: f64, sd: f64, rng: &mut R) -> Result<usize> {
    if n < 2 {
        return Ok(0);
    }
    let hi = (n - 1) as f64;
    if sd == 0.0 {
        return Ok(mean.round().clamp(1.0, hi) as usize);
    }
    // Rounding a normal truncated to [0.5, hi + 0.5) is the discretized normal on {1, .., hi}.
    let x = truncated_normal(mean, sd, 0.5, hi + 0.5, rng)?;
    Ok((x.round() as usize).clamp(1, n - 1))
}

/// Returns a copy with a random subset of trials in every group marked missing.
pub fn apply_missingness<R: Rng + ?Sized>(
    data: &HierarchicalDataset,
    mean: f64,
    sd: f64,
    rng: &mut R,
) -> Result<HierarchicalDataset> {
    let mut out = data.clone();
    let mut mask = Vec::with_capacity(data.num_groups());
    for m in 0..data.num_groups() {
        let n = data.group_size(m);
        let mut keep: Vec<bool> = (0..n).map(|i| data.is_observed(m, i)).collect();
        let k = missing_count(n, mean, sd, rng)?;
        for i in index::sample(rng, n, k) {
            keep[i] = false;
        }
        if !keep.iter().any(|&b| b) {
            // Already-missing trials plus new ones would empty the group; keep one.
            let i = (0..n).find(|&i| data.is_observed(m, i)).unwrap_or(0);
            keep[i] = true;
        }
        mask.push(keep);
    }
    out.set_mask(mask)?;
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: u64,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub trace: Vec<TraceRow>,
    pub steps: u64,
    pub checkpoints: Vec<PathBuf>,
}

impl TrainReport {
    pub fn final_val_loss(&self) -> Option<f64> {
        self.trace.iter().rev().find_map(|r| r.val_loss)
    }

    pub fn write_trace_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        w.write_record(["step", "lr", "train_loss", "val_loss"])
            .map_err(csv_err)?;
        for r in &self.trace {
            w.write_record([
                r.step.to_string(),
                format!("{:e}", r.lr),
                r.train_loss.to_string(),
                r.val_loss.map(|v| v.to_string()).unwrap_or_default(),
            ])
            .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Io(std::io::Error::other(format!("{other:?}"))),
    }
}

/// Mean log-loss of the network on labelled datasets (labels from `meta.model_index`).
pub fn mean_log_loss(net: &SummaryNet, data: &[HierarchicalDataset]) -> Result<f64> {
    let refs: Vec<&HierarchicalDataset> = data.iter().collect();
    let probs = net.predict(&refs)?;
    let mut total = 0.0;
    for (p, d) in probs.iter().zip(data) {
        let label = d
            .meta
            .model_index
            .ok_or_else(|| Error::config("validation dataset without model index"))?;
        total += log_loss(p, label);
    }
    Ok(total / data.len() as f64)
}

/// Drives the optimization loop for one training run.
pub struct Trainer<'a> {
    cfg: &'a TrainingConfig,
    models: &'a [Family],
    store: Option<&'a [HierarchicalDataset]>,
    validation: Option<&'a [HierarchicalDataset]>,
    checkpoint_dir: Option<PathBuf>,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: &'a TrainingConfig, models: &'a [Family]) -> Result<Self> {
        cfg.validate()?;
        check_models(models)?;
        Ok(Self {
            cfg,
            models,
            store: None,
            validation: None,
            checkpoint_dir: None,
        })
    }

    /// Pre-simulated datasets for the offline regime (labels from `meta.model_index`).
    pub fn store(mut self, store: &'a [HierarchicalDataset]) -> Self {
        self.store = Some(store);
        self
    }

    pub fn validation(mut self, data: &'a [HierarchicalDataset]) -> Self {
        self.validation = Some(data);
        self
    }

    pub fn checkpoint_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.checkpoint_dir = Some(dir.into());
        self
    }

    fn total_steps(&self) -> Result<u64> {
        match self.cfg.regime {
            Regime::Online => Ok(self.cfg.steps),
            Regime::Offline => {
                let n = self
                    .store
                    .ok_or_else(|| Error::config("offline regime needs a dataset store"))?
                    .len() as u64;
                if n == 0 {
                    return Err(Error::config("offline store is empty"));
                }
                Ok(self.cfg.epochs * n.div_ceil(self.cfg.batch_size as u64))
            }
        }
    }

    /// Batch for a step of the offline regime: epoch-wise shuffled slices of the store.
    fn offline_batch(&self, step: u64, order: &mut Vec<usize>, epoch: &mut Option<u64>) -> Result<LabeledBatch> {
        let store = self.store.expect("checked in total_steps");
        let per_epoch = (store.len() as u64).div_ceil(self.cfg.batch_size as u64);
        let e = step / per_epoch;
        if *epoch != Some(e) {
            *order = (0..store.len()).collect();
            order.shuffle(&mut substream(self.cfg.seed, &[STREAM_SHUFFLE, e]));
            *epoch = Some(e);
        }
        let start = ((step % per_epoch) as usize) * self.cfg.batch_size;
        let end = (start + self.cfg.batch_size).min(store.len());
        let mut datasets = Vec::with_capacity(end - start);
        let mut labels = Vec::with_capacity(end - start);
        for &i in &order[start..end] {
            let d = &store[i];
            let label = d
                .meta
                .model_index
                .filter(|&j| j < self.models.len())
                .ok_or_else(|| Error::config(format!("store entry {i} lacks a valid model index")))?;
            let d = match self.cfg.mask {
                // A fresh mask per epoch and dataset.
                Some(m) => apply_missingness(
                    d,
                    m.mean,
                    m.sd,
                    &mut substream(self.cfg.seed, &[STREAM_MASK, e, i as u64]),
                )?,
                None => d.clone(),
            };
            datasets.push(d);
            labels.push(label);
        }
        Ok(LabeledBatch { datasets, labels })
    }

    fn save(&self, net: &SummaryNet, name: &str, opt: &Optimizer, lr: f64, report: &mut TrainReport) -> Result<()> {
        if let Some(dir) = &self.checkpoint_dir {
            let path = dir.join(name);
            let meta = OptimizerMeta {
                kind: opt.kind(),
                steps: opt.steps_taken(),
                learning_rate: lr,
            };
            net.save(&path, Some(meta))?;
            if !report.checkpoints.contains(&path) {
                report.checkpoints.push(path);
            }
        }
        Ok(())
    }

    pub fn run(&self, net: &mut SummaryNet) -> Result<TrainReport> {
        let cfg = self.cfg;
        if net.config().num_models != self.models.len() {
            return Err(Error::config(format!(
                "network has {} outputs but {} models were given",
                net.config().num_models,
                self.models.len()
            )));
        }
        if net.config().input_dim != self.models[0].dim() {
            return Err(Error::config("network input dimension does not match the models"));
        }
        let total = self.total_steps()?;
        let mut opt = Optimizer::new(cfg.optimizer, net.params().total_count());
        let mut report = TrainReport::default();
        let mut last_good: NetworkParams = net.params().clone();
        let mut order = Vec::new();
        let mut epoch = None;
        let mut lr = cfg.learning_rate;

        for step in 0..total {
            lr = cfg.schedule.lr(cfg.learning_rate, step, total);
            let batch = match cfg.regime {
                Regime::Online => sample_training_batch(self.models, cfg, step)?,
                Regime::Offline => self.offline_batch(step, &mut order, &mut epoch)?,
            };
            let non_finite = |_| Error::NonFiniteLoss {
                step,
                last_good: Box::new(last_good.clone()),
            };
            let (loss, grads) = match net.loss_and_grad(&batch.refs(), &batch.labels) {
                Ok(v) => v,
                Err(e @ (Error::NonFinite { .. } | Error::Domain(_))) => return Err(non_finite(e)),
                Err(e) => return Err(e),
            };
            if !loss.is_finite() {
                return Err(non_finite(Error::domain("loss")));
            }
            opt.step(net.params_mut(), &grads, lr).map_err(non_finite)?;
            let done = step + 1;
            let val_loss = match self.validation {
                Some(v) if (cfg.validate_every > 0 && done % cfg.validate_every == 0) || done == total => {
                    Some(mean_log_loss(net, v)?)
                }
                _ => None,
            };
            report.trace.push(TraceRow {
                step: done,
                lr,
                train_loss: loss,
                val_loss,
            });
            if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 {
                last_good = net.params().clone();
                self.save(net, "checkpoint", &opt, lr, &mut report)?;
            }
            if done % 100 == 0 {
                log::debug!("step {done}/{total} loss {loss:.4} lr {lr:.2e}");
            }
        }
        if total == 0 {
            if let Some(v) = self.validation {
                report.trace.push(TraceRow {
                    step: 0,
                    lr,
                    train_loss: f64::NAN,
                    val_loss: Some(mean_log_loss(net, v)?),
                });
            }
        }
        report.steps = total;
        self.save(net, "final", &opt, lr, &mut report)?;
        Ok(report)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn log_loss_examples() {
        assert_eq!(log_loss(&[1.0, 0.0], 0), 0.0);
        assert!((log_loss(&[0.5, 0.5], 1) - 2f64.ln()).abs() < 1e-15);
        assert!((log_loss(&[0.25; 4], 2) - 4f64.ln()).abs() < 1e-15);
        assert!((log_loss(&[1.0, 0.0], 1) - 1e12f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn size_distribution_bounds() {
        assert!(SizeDist::DiscreteUniform { low: 0, high: 3 }.validate("n").is_err());
        assert!(SizeDist::DiscreteUniform { low: 4, high: 3 }.validate("n").is_err());
        assert!(SizeDist::Fixed { value: 0 }.validate("n").is_err());
    }

    #[test]
    fn degenerate_mask_count_is_exact() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let d = HierarchicalDataset::from_flat(1, vec![vec![1.0; 20]; 5], Default::default()).unwrap();
        let masked = apply_missingness(&d, 4.0, 0.0, &mut r).unwrap();
        for m in 0..5 {
            assert_eq!(masked.observed_count(m), 16);
            for n in 0..20 {
                if !masked.is_observed(m, n) {
                    assert_eq!(masked.row(m, n), &[0.0]);
                }
            }
        }
        // The input is untouched.
        assert!(d.mask().is_none());
    }

    #[test]
    fn config_json_round_trip() {
        let cfg = TrainingConfig {
            groups: SizeDist::DiscreteUniform { low: 1, high: 50 },
            mask: Some(MaskAugmentation { mean: 3.0, sd: 1.0 }),
            regime: Regime::Offline,
            ..Default::default()
        };
        let s = serde_json::to_string(&cfg).unwrap();
        let back: TrainingConfig = serde_json::from_str(&s).unwrap();
        assert_eq!(cfg, back);
    }
}

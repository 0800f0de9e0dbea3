//! Permutation-invariant and -equivariant set modules and the two-level
//! summary network with its softmax classification head.
//!
//! Block naming: an invariant module under prefix `p` owns blocks `p.h1`
//! (applied per element) and `p.h2` (applied to the pooled vector). An
//! equivariant module additionally owns `p.h3`, applied to each element
//! concatenated with the module's invariant summary.

use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::dataset::HierarchicalDataset;
use crate::autodiff::{
    load_checkpoint, save_checkpoint, Activation, Matrix, NetworkParams, NetworkParamsBuilder, OptimizerMeta, Pooling,
    Segments, Tape, Var,
};
use crate::{Error, Result};

/// Probabilities below this are clamped before taking logs.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SummaryConfig {
    /// Observation dimension `D`.
    pub input_dim: usize,
    /// Number of candidate models `J`.
    pub num_models: usize,
    /// Equivariant modules stacked within groups (`K`).
    pub level1_equivariant: usize,
    /// Equivariant modules stacked across groups (`K'`).
    pub level2_equivariant: usize,
    pub hidden: usize,
    /// Width of the pooled set summary fed back into equivariant modules.
    pub pooled_dim: usize,
    pub equivariant_dim: usize,
    /// Width of group embeddings and of the final summary `z`.
    pub summary_dim: usize,
    pub head_hidden: usize,
    pub pooling: Pooling,
    /// Fixed per-feature affine map applied to observations before `l1`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub input_scaling: Option<InputScaling>,
}

/// Per-feature standardization `(x - shift) / scale`; not trained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputScaling {
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
}

impl InputScaling {
    /// Mean and standard deviation of every feature over the observed rows.
    /// Constant features keep scale 1.
    pub fn fit(data: &[HierarchicalDataset]) -> Result<Self> {
        let dim = data
            .first()
            .ok_or_else(|| Error::shape("no datasets to fit input scaling"))?
            .dim();
        let (mut n, mut sum, mut sq) = (0.0, vec![0.0; dim], vec![0.0; dim]);
        for d in data {
            if d.dim() != dim {
                return Err(Error::shape("datasets differ in observation dimension"));
            }
            for m in 0..d.num_groups() {
                for (i, row) in d.group_rows(m).enumerate() {
                    if !d.is_observed(m, i) {
                        continue;
                    }
                    n += 1.0;
                    for (k, v) in row.iter().enumerate() {
                        sum[k] += v;
                        sq[k] += v * v;
                    }
                }
            }
        }
        if n < 2.0 {
            return Err(Error::shape("input scaling needs at least two observed rows"));
        }
        let shift: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let scale = sq
            .iter()
            .zip(&shift)
            .map(|(q, mu)| {
                let sd = ((q / n - mu * mu) * n / (n - 1.0)).max(0.0).sqrt();
                if sd > 1e-12 * mu.abs().max(1.0) {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self { shift, scale })
    }

    fn validate(&self, dim: usize) -> Result<()> {
        if self.shift.len() != dim || self.scale.len() != dim {
            return Err(Error::config(format!("input scaling needs {dim} shifts and scales")));
        }
        if self.shift.iter().any(|v| !v.is_finite()) || self.scale.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::config(
                "input scaling needs finite shifts and positive finite scales",
            ));
        }
        Ok(())
    }

    fn apply(&self, x: &mut Matrix) {
        for r in 0..x.rows() {
            for ((v, mu), sd) in x.row_mut(r).iter_mut().zip(&self.shift).zip(&self.scale) {
                *v = (*v - mu) / sd;
            }
        }
    }
}

impl Default for SummaryConfig {
    fn default() -> Self {
        Self {
            input_dim: 1,
            num_models: 2,
            level1_equivariant: 2,
            level2_equivariant: 2,
            hidden: 64,
            pooled_dim: 32,
            equivariant_dim: 32,
            summary_dim: 64,
            head_hidden: 64,
            pooling: Pooling::Mean,
            input_scaling: None,
        }
    }
}

impl SummaryConfig {
    pub fn validate(&self) -> Result<()> {
        let widths = [
            ("input_dim", self.input_dim),
            ("hidden", self.hidden),
            ("pooled_dim", self.pooled_dim),
            ("equivariant_dim", self.equivariant_dim),
            ("summary_dim", self.summary_dim),
            ("head_hidden", self.head_hidden),
        ];
        for (name, w) in widths {
            if w == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if self.num_models < 2 {
            return Err(Error::config("need at least two candidate models"));
        }
        if let Some(s) = &self.input_scaling {
            s.validate(self.input_dim)?;
        }
        Ok(())
    }

    fn set_blocks(&self, mut b: NetworkParamsBuilder, prefix: &str, in_dim: usize, k: usize) -> NetworkParamsBuilder {
        let (h, p) = (self.hidden, self.pooled_dim);
        let mut d = in_dim;
        for i in 0..k {
            b = b
                .mlp(&format!("{prefix}.eq{i}.h1"), &[d, h, p], Activation::Linear)
                .mlp(&format!("{prefix}.eq{i}.h2"), &[p, h, p], Activation::Linear)
                .mlp(
                    &format!("{prefix}.eq{i}.h3"),
                    &[d + p, h, self.equivariant_dim],
                    Activation::Linear,
                );
            d = self.equivariant_dim;
        }
        b.mlp(&format!("{prefix}.inv.h1"), &[d, h, p], Activation::Linear).mlp(
            &format!("{prefix}.inv.h2"),
            &[p, h, self.summary_dim],
            Activation::Linear,
        )
    }

    pub fn layout(&self) -> NetworkParamsBuilder {
        let b = self.set_blocks(NetworkParams::builder(), "l1", self.input_dim, self.level1_equivariant);
        let b = self.set_blocks(b, "l2", self.summary_dim, self.level2_equivariant);
        let hh = self.head_hidden;
        b.mlp(
            "head",
            &[self.summary_dim, hh, hh, hh, self.num_models],
            Activation::Linear,
        )
    }
}

/// Pools `h1(x)` over each segment; returns (pooled, `h2` of pooled).
fn invariant_parts(
    tape: &mut Tape<'_>,
    x: Var,
    seg: &Arc<Segments>,
    pooling: Pooling,
    prefix: &str,
) -> Result<(Var, Var)> {
    let h = tape.block(&format!("{prefix}.h1"), x)?;
    let pooled = tape.pool(h, seg, pooling)?;
    let out = tape.block(&format!("{prefix}.h2"), pooled)?;
    Ok((pooled, out))
}

/// `h2(pool(h1(x)))` per segment: rows to segments.
pub fn tape_invariant(tape: &mut Tape<'_>, x: Var, seg: &Arc<Segments>, pooling: Pooling, prefix: &str) -> Result<Var> {
    invariant_parts(tape, x, seg, pooling, prefix).map(|(_, out)| out)
}

/// `h3([x_n, x~])` for every row, with `x~` the invariant summary of its segment.
pub fn tape_equivariant(
    tape: &mut Tape<'_>,
    x: Var,
    seg: &Arc<Segments>,
    pooling: Pooling,
    prefix: &str,
) -> Result<Var> {
    let summary = tape_invariant(tape, x, seg, pooling, prefix)?;
    let spread = tape.broadcast(summary, seg)?;
    let joined = tape.concat_cols(x, spread)?;
    tape.block(&format!("{prefix}.h3"), joined)
}

/// `k` equivariant modules (`prefix.eq0` ...) followed by the invariant module `prefix.inv`.
pub fn tape_deep_invariant(
    tape: &mut Tape<'_>,
    mut x: Var,
    seg: &Arc<Segments>,
    pooling: Pooling,
    prefix: &str,
    k: usize,
) -> Result<Var> {
    for i in 0..k {
        x = tape_equivariant(tape, x, seg, pooling, &format!("{prefix}.eq{i}"))?;
    }
    tape_invariant(tape, x, seg, pooling, &format!("{prefix}.inv"))
}

fn single_set(tape: &mut Tape<'_>, set: &[Vec<f64>]) -> Result<(Var, Arc<Segments>)> {
    let seg = Arc::new(Segments::from_sizes(&[set.len()])?);
    let x = tape.input(Matrix::from_rows(set)?)?;
    Ok((x, seg))
}

/// Invariant module applied to one set of vectors.
pub fn invariant_module(params: &NetworkParams, prefix: &str, set: &[Vec<f64>], pooling: Pooling) -> Result<Vec<f64>> {
    let mut tape = Tape::new(params);
    let (x, seg) = single_set(&mut tape, set)?;
    let out = tape_invariant(&mut tape, x, &seg, pooling, prefix)?;
    Ok(tape.value(out).data().to_vec())
}

/// Equivariant module applied to one set; one output row per input row.
pub fn equivariant_module(
    params: &NetworkParams,
    prefix: &str,
    set: &[Vec<f64>],
    pooling: Pooling,
) -> Result<Vec<Vec<f64>>> {
    let mut tape = Tape::new(params);
    let (x, seg) = single_set(&mut tape, set)?;
    let out = tape_equivariant(&mut tape, x, &seg, pooling, prefix)?;
    Ok(tape.value(out).to_rows())
}

pub fn deep_invariant(
    params: &NetworkParams,
    prefix: &str,
    k: usize,
    set: &[Vec<f64>],
    pooling: Pooling,
) -> Result<Vec<f64>> {
    let mut tape = Tape::new(params);
    let (x, seg) = single_set(&mut tape, set)?;
    let out = tape_deep_invariant(&mut tape, x, &seg, pooling, prefix, k)?;
    Ok(tape.value(out).data().to_vec())
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = e.iter().sum();
    e.into_iter().map(|v| v / total).collect()
}

/// Several datasets stacked into one row matrix with their grouping structure.
#[derive(Debug, Clone)]
pub struct StackedBatch {
    pub x: Matrix,
    /// Rows to groups; carries the observation mask as row weights.
    pub groups: Arc<Segments>,
    /// Groups to datasets.
    pub datasets: Arc<Segments>,
}

impl StackedBatch {
    pub fn new(data: &[&HierarchicalDataset]) -> Result<Self> {
        let first = data.first().ok_or_else(|| Error::shape("empty batch"))?;
        let dim = first.dim();
        let rows: usize = data.iter().map(|d| d.total_rows()).sum();
        let mut values = Vec::with_capacity(rows * dim);
        let mut sizes = Vec::new();
        let mut per_dataset = Vec::with_capacity(data.len());
        let any_mask = data.iter().any(|d| d.mask().is_some());
        let mut weights = Vec::with_capacity(if any_mask { rows } else { 0 });
        for d in data {
            if d.dim() != dim {
                return Err(Error::shape("datasets in a batch differ in observation dimension"));
            }
            per_dataset.push(d.num_groups());
            for m in 0..d.num_groups() {
                values.extend_from_slice(d.group_values(m));
                sizes.push(d.group_size(m));
                if any_mask {
                    match d.mask() {
                        Some(mk) => weights.extend(mk[m].iter().map(|&b| if b { 1.0 } else { 0.0 })),
                        None => weights.extend(std::iter::repeat_n(1.0, d.group_size(m))),
                    }
                }
            }
        }
        let groups = if any_mask {
            Segments::with_weights(&sizes, weights)?
        } else {
            Segments::from_sizes(&sizes)?
        };
        Ok(Self {
            x: Matrix::new(rows, dim, values)?,
            groups: Arc::new(groups),
            datasets: Arc::new(Segments::from_sizes(&per_dataset)?),
        })
    }

    pub fn len(&self) -> usize {
        self.datasets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.datasets.is_empty()
    }
}

/// Handles to the interesting nodes of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct Forward {
    /// Group embeddings (one row per group).
    pub groups: Var,
    /// Level-2 pooled vector before the final `h2` (one row per dataset).
    pub level2_pooled: Var,
    /// Dataset summaries `z`.
    pub summary: Var,
    pub logits: Var,
    pub probs: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryNet {
    config: SummaryConfig,
    params: NetworkParams,
    /// Display names of the candidate models, one per output.
    pub models: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct NetMetadata {
    summary: SummaryConfig,
    models: Vec<String>,
}

impl SummaryNet {
    pub fn new<R: Rng + ?Sized>(config: SummaryConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let params = config.layout().init(rng)?;
        Ok(Self::assemble(config, params))
    }

    pub fn from_params(config: SummaryConfig, params: NetworkParams) -> Result<Self> {
        config.validate()?;
        if config.layout().layers() != params.layers() {
            return Err(Error::shape(
                "parameter layout does not match the summary configuration",
            ));
        }
        Ok(Self::assemble(config, params))
    }

    fn assemble(config: SummaryConfig, params: NetworkParams) -> Self {
        let models = (0..config.num_models).map(|j| format!("m{j}")).collect();
        Self { config, params, models }
    }

    pub fn with_models(mut self, models: Vec<String>) -> Result<Self> {
        if models.len() != self.config.num_models {
            return Err(Error::config(format!(
                "{} model names for {} outputs",
                models.len(),
                self.config.num_models
            )));
        }
        self.models = models;
        Ok(self)
    }

    pub fn config(&self) -> &SummaryConfig {
        &self.config
    }

    pub fn params(&self) -> &NetworkParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut NetworkParams {
        &mut self.params
    }

    pub fn set_params(&mut self, params: NetworkParams) -> Result<()> {
        if params.layers() != self.params.layers() {
            return Err(Error::shape("parameter layout does not match the network"));
        }
        self.params = params;
        Ok(())
    }

    /// Records the full forward pass for a stacked batch.
    pub fn forward(&self, tape: &mut Tape<'_>, batch: &StackedBatch) -> Result<Forward> {
        if batch.x.cols() != self.config.input_dim {
            return Err(Error::shape(format!(
                "network expects {}-D observations, got {}",
                self.config.input_dim,
                batch.x.cols()
            )));
        }
        let c = &self.config;
        let mut x = batch.x.clone();
        if let Some(s) = &c.input_scaling {
            s.apply(&mut x);
        }
        let x = tape.input(x)?;
        let groups = tape_deep_invariant(tape, x, &batch.groups, c.pooling, "l1", c.level1_equivariant)?;
        let mut g = groups;
        for i in 0..c.level2_equivariant {
            g = tape_equivariant(tape, g, &batch.datasets, c.pooling, &format!("l2.eq{i}"))?;
        }
        let (level2_pooled, summary) = invariant_parts(tape, g, &batch.datasets, c.pooling, "l2.inv")?;
        let logits = tape.block("head", summary)?;
        let probs = tape.softmax(logits)?;
        Ok(Forward {
            groups,
            level2_pooled,
            summary,
            logits,
            probs,
        })
    }

    fn check_labels(&self, labels: &[usize], n: usize) -> Result<()> {
        if labels.len() != n {
            return Err(Error::shape(format!("{} labels for {n} datasets", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= self.config.num_models) {
            return Err(Error::shape(format!("label {bad} out of range")));
        }
        Ok(())
    }

    /// Records the mean categorical log-loss of a batch; returns (loss, forward handles).
    pub fn loss_on_tape(&self, tape: &mut Tape<'_>, batch: &StackedBatch, labels: &[usize]) -> Result<(Var, Forward)> {
        self.check_labels(labels, batch.len())?;
        let fwd = self.forward(tape, batch)?;
        let logp = tape.log(fwd.probs, LOG_FLOOR)?;
        let j = self.config.num_models;
        let mut w = Matrix::zeros(labels.len(), j);
        let scale = -1.0 / labels.len() as f64;
        for (r, &l) in labels.iter().enumerate() {
            w.row_mut(r)[l] = scale;
        }
        Ok((tape.weighted_sum(logp, w)?, fwd))
    }

    /// Mean log-loss over the batch and its gradient with respect to all parameters.
    pub fn loss_and_grad(&self, data: &[&HierarchicalDataset], labels: &[usize]) -> Result<(f64, Vec<f64>)> {
        let batch = StackedBatch::new(data)?;
        let mut tape = Tape::new(&self.params);
        let (loss, _) = self.loss_on_tape(&mut tape, &batch, labels)?;
        let value = tape.value(loss).data()[0];
        Ok((value, tape.backward(loss)?))
    }

    pub fn loss(&self, data: &[&HierarchicalDataset], labels: &[usize]) -> Result<f64> {
        let batch = StackedBatch::new(data)?;
        let mut tape = Tape::new(&self.params);
        let (loss, _) = self.loss_on_tape(&mut tape, &batch, labels)?;
        Ok(tape.value(loss).data()[0])
    }

    fn batched<F>(&self, data: &[&HierarchicalDataset], pick: F) -> Result<Vec<Vec<f64>>>
    where
        F: Fn(&Forward) -> Var,
    {
        const CHUNK: usize = 64;
        let mut out = Vec::with_capacity(data.len());
        for chunk in data.chunks(CHUNK) {
            let batch = StackedBatch::new(chunk)?;
            let mut tape = Tape::new(&self.params);
            let fwd = self.forward(&mut tape, &batch)?;
            out.extend(tape.value(pick(&fwd)).to_rows());
        }
        Ok(out)
    }

    /// Approximate posterior model probabilities, one row per dataset.
    pub fn predict(&self, data: &[&HierarchicalDataset]) -> Result<Vec<Vec<f64>>> {
        self.batched(data, |f| f.probs)
    }

    pub fn predict_one(&self, data: &HierarchicalDataset) -> Result<Vec<f64>> {
        Ok(self.predict(&[data])?.remove(0))
    }

    /// Learned summary statistics `z`, one row per dataset.
    pub fn hierarchical_summary(&self, data: &[&HierarchicalDataset]) -> Result<Vec<Vec<f64>>> {
        self.batched(data, |f| f.summary)
    }

    /// Classification head on a precomputed summary vector.
    pub fn classify(&self, z: &[f64]) -> Result<Vec<f64>> {
        let logits = self.params.block_forward("head", z)?;
        Ok(softmax(&logits))
    }

    pub fn save(&self, dir: &Path, optimizer: Option<OptimizerMeta>) -> Result<()> {
        let meta = NetMetadata {
            summary: self.config.clone(),
            models: self.models.clone(),
        };
        save_checkpoint(dir, &self.params, optimizer, serde_json::to_value(meta)?)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (params, manifest) = load_checkpoint(dir)?;
        let meta: NetMetadata = serde_json::from_value(manifest.metadata)
            .map_err(|e| Error::config(format!("checkpoint metadata: {e}")))?;
        Self::from_params(meta.summary, params)?.with_models(meta.models)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn identity(b: NetworkParamsBuilder, name: &str, dim: usize) -> NetworkParamsBuilder {
        b.layer(name, dim, dim, Activation::Linear)
    }

    fn set_identity(p: &mut NetworkParams) {
        for li in 0..p.layers().len() {
            let spec = p.layers()[li].clone();
            let r = p.weight_range(li);
            let w = &mut p.values_mut()[r];
            w.fill(0.0);
            for i in 0..spec.out_dim.min(spec.in_dim) {
                w[i * spec.in_dim + i] = 1.0;
            }
        }
    }

    #[test]
    fn identity_invariant_sums_set() {
        let mut p = identity(identity(NetworkParams::builder(), "s.h1", 2), "s.h2", 2)
            .zeros()
            .unwrap();
        set_identity(&mut p);
        let out = invariant_module(&p, "s", &[vec![1.0, 2.0], vec![3.0, 4.0]], Pooling::Sum).unwrap();
        assert_eq!(out, vec![4.0, 6.0]);
        let single = invariant_module(&p, "s", &[vec![-1.5, 2.5]], Pooling::Mean).unwrap();
        assert_eq!(single, vec![-1.5, 2.5]);
        assert!(invariant_module(&p, "s", &[], Pooling::Sum).is_err());
    }

    #[test]
    fn projection_h3_gives_identity_equivariant() {
        // h3 keeps the first two coordinates of [x_n, x~].
        let mut p = NetworkParams::builder()
            .layer("e.h1", 2, 3, Activation::Relu)
            .layer("e.h2", 3, 3, Activation::Linear)
            .layer("e.h3", 5, 2, Activation::Linear)
            .init(&mut ChaCha8Rng::seed_from_u64(1))
            .unwrap();
        let r = p.weight_range(2);
        let w = &mut p.values_mut()[r];
        w.fill(0.0);
        w[0] = 1.0;
        w[5 + 1] = 1.0;
        let set = vec![vec![0.5, -1.0], vec![2.0, 3.0], vec![-4.0, 0.25]];
        assert_eq!(equivariant_module(&p, "e", &set, Pooling::Mean).unwrap(), set);
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0, 0.0]), vec![0.5, 0.5]);
        let p = softmax(&[1f64.ln(), 3f64.ln()]);
        assert!((p[0] - 0.25).abs() < 1e-15 && (p[1] - 0.75).abs() < 1e-15);
        let a = softmax(&[0.3, -1.2, 2.0]);
        let b = softmax(&[100.3, 98.8, 102.0]);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn default_layout_builds() {
        let net = SummaryNet::new(SummaryConfig::default(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(net.params().block("l1.eq1.h3").is_ok());
        assert!(net.params().block("l2.eq1.h3").is_ok());
        assert_eq!(net.params().block("head").unwrap().len(), 4);
    }

    #[test]
    fn invalid_config_rejected() {
        let cfg = SummaryConfig {
            num_models: 1,
            ..Default::default()
        };
        assert!(SummaryNet::new(cfg, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }
}

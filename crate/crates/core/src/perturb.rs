//! Robustness of network model comparisons under data perturbations.

use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::metrics::argmax;
use crate::rng::substream;
use crate::summary::{HierarchicalDataset, SummaryNet};
use crate::{Error, Result};

pub const DEFAULT_REPETITIONS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PerturbMode {
    BootstrapGroups,
    LeaveOneGroupOut,
    MaskSweep,
}

/// Masking fractions of the sweep: 0% to 40% in 5% steps.
pub fn sweep_fractions() -> Vec<f64> {
    (0..=8).map(|i| i as f64 * 0.05).collect()
}

/// Resamples groups with replacement.
pub fn bootstrap_groups<R: Rng + ?Sized>(data: &HierarchicalDataset, rng: &mut R) -> Result<HierarchicalDataset> {
    let m = data.num_groups();
    let idx: Vec<usize> = (0..m).map(|_| rng.random_range(0..m)).collect();
    data.select_groups(&idx)
}

/// Every dataset obtained by dropping exactly one group.
pub fn leave_one_group_out(data: &HierarchicalDataset) -> Result<Vec<HierarchicalDataset>> {
    let m = data.num_groups();
    if m < 2 {
        return Err(Error::shape("leave-one-group-out needs at least two groups"));
    }
    (0..m)
        .map(|drop| data.select_groups(&(0..m).filter(|&i| i != drop).collect::<Vec<_>>()))
        .collect()
}

/// Hides `round(fraction * N_m)` of the currently observed trials in every
/// group, keeping at least one observed. A zero fraction returns the input unchanged.
pub fn mask_fraction<R: Rng + ?Sized>(
    data: &HierarchicalDataset,
    fraction: f64,
    rng: &mut R,
) -> Result<HierarchicalDataset> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::config(format!("masking fraction {fraction} outside [0, 1)")));
    }
    if fraction == 0.0 {
        return Ok(data.clone());
    }
    let mut mask = Vec::with_capacity(data.num_groups());
    for m in 0..data.num_groups() {
        let n = data.group_size(m);
        let observed: Vec<usize> = (0..n).filter(|&i| data.is_observed(m, i)).collect();
        let k = ((fraction * n as f64).round() as usize).min(observed.len() - 1);
        let mut keep: Vec<bool> = (0..n).map(|i| data.is_observed(m, i)).collect();
        for j in index::sample(rng, observed.len(), k) {
            keep[observed[j]] = false;
        }
        mask.push(keep);
    }
    let mut out = data.clone();
    out.set_mask(mask)?;
    Ok(out)
}

/// Summary of PMPs over the perturbed copies of one condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbRow {
    pub label: String,
    pub repetitions: usize,
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
    /// Fraction of copies whose argmax is each model.
    pub argmax_freq: Vec<f64>,
}

impl PerturbRow {
    pub fn from_pmps(label: String, pmps: &[Vec<f64>]) -> Self {
        let j = pmps[0].len();
        let n = pmps.len() as f64;
        // Shifted by the first row so identical repetitions average exactly.
        let mean: Vec<f64> = (0..j)
            .map(|k| pmps[0][k] + pmps.iter().map(|p| p[k] - pmps[0][k]).sum::<f64>() / n)
            .collect();
        let sd = (0..j)
            .map(|k| {
                if pmps.len() < 2 {
                    return 0.0;
                }
                let ss: f64 = pmps.iter().map(|p| (p[k] - mean[k]).powi(2)).sum();
                (ss / (n - 1.0)).sqrt()
            })
            .collect();
        let mut counts = vec![0usize; j];
        for p in pmps {
            counts[argmax(p)] += 1;
        }
        let argmax_freq = counts.into_iter().map(|c| c as f64 / n).collect();
        Self {
            label,
            repetitions: pmps.len(),
            mean,
            sd,
            argmax_freq,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub schema_version: u32,
    pub mode: PerturbMode,
    pub models: Vec<String>,
    pub unperturbed: Vec<f64>,
    pub rows: Vec<PerturbRow>,
}

impl RobustnessReport {
    /// Largest masking fraction up to which every repetition keeps the
    /// unperturbed argmax (mask sweep only).
    pub fn stable_through(&self) -> Option<f64> {
        let target = argmax(&self.unperturbed);
        let mut last = None;
        for r in &self.rows {
            if r.argmax_freq[target] < 1.0 {
                break;
            }
            last = r.label.parse::<f64>().ok();
        }
        last
    }
}

/// Runs one perturbation analysis. Copy `r` of condition `c` draws from
/// substream `(seed, c, r)`.
pub fn perturb(
    net: &SummaryNet,
    data: &HierarchicalDataset,
    mode: PerturbMode,
    repetitions: usize,
    seed: u64,
) -> Result<RobustnessReport> {
    let unperturbed = net.predict_one(data)?;
    let predict =
        |sets: Vec<HierarchicalDataset>| -> Result<Vec<Vec<f64>>> { net.predict(&sets.iter().collect::<Vec<_>>()) };
    let rows = match mode {
        PerturbMode::BootstrapGroups => {
            if repetitions == 0 {
                return Err(Error::config("need at least one bootstrap repetition"));
            }
            let sets = (0..repetitions as u64)
                .into_par_iter()
                .map(|r| bootstrap_groups(data, &mut substream(seed, &[0, r])))
                .collect::<Result<Vec<_>>>()?;
            vec![PerturbRow::from_pmps("bootstrap".into(), &predict(sets)?)]
        }
        PerturbMode::LeaveOneGroupOut => predict(leave_one_group_out(data)?)?
            .into_iter()
            .enumerate()
            .map(|(m, p)| PerturbRow::from_pmps(format!("without-{m}"), &[p]))
            .collect(),
        PerturbMode::MaskSweep => {
            if repetitions == 0 {
                return Err(Error::config("need at least one repetition per masking step"));
            }
            sweep_fractions()
                .into_iter()
                .enumerate()
                .map(|(c, f)| {
                    let sets = (0..repetitions as u64)
                        .into_par_iter()
                        .map(|r| mask_fraction(data, f, &mut substream(seed, &[c as u64, r])))
                        .collect::<Result<Vec<_>>>()?;
                    Ok(PerturbRow::from_pmps(format!("{f:.2}"), &predict(sets)?))
                })
                .collect::<Result<Vec<_>>>()?
        }
    };
    Ok(RobustnessReport {
        schema_version: crate::metrics::REPORT_SCHEMA,
        mode,
        models: net.models.clone(),
        unperturbed,
        rows,
    })
}

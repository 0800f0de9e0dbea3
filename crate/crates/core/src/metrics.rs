//! Calibration and performance diagnostics over (predicted PMP, true model) pairs.

use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::rng::substream;
use crate::stats::{mean, median, quantile};
use crate::summary::LOG_FLOOR;
use crate::trainer::csv_err;
use crate::{Error, Result};

pub const REPORT_SCHEMA: u32 = 1;
pub const DEFAULT_BINS: usize = 15;
pub const SMALL_CORPUS_BINS: usize = 10;
pub const DEFAULT_BOOTSTRAP: usize = 1000;

/// Index of the largest entry; ties go to the lower index.
pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate().skip(1) {
        if v > p[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionCorpus {
    preds: Vec<Vec<f64>>,
    labels: Vec<usize>,
}

impl PredictionCorpus {
    pub fn new(preds: Vec<Vec<f64>>, labels: Vec<usize>) -> Result<Self> {
        if preds.is_empty() {
            return Err(Error::shape("prediction corpus is empty"));
        }
        if preds.len() != labels.len() {
            return Err(Error::shape(format!(
                "{} predictions but {} labels",
                preds.len(),
                labels.len()
            )));
        }
        let j = preds[0].len();
        if j < 2 {
            return Err(Error::shape("need at least two models"));
        }
        for (s, (p, &l)) in preds.iter().zip(&labels).enumerate() {
            if p.len() != j {
                return Err(Error::shape(format!("row {s} has {} entries, expected {j}", p.len())));
            }
            let total: f64 = p.iter().sum();
            if (total - 1.0).abs() > 1e-9 || p.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::domain(format!(
                    "row {s} is not a probability vector (sum {total})"
                )));
            }
            if l >= j {
                return Err(Error::shape(format!("label {l} out of range for {j} models")));
            }
        }
        Ok(Self { preds, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_models(&self) -> usize {
        self.preds[0].len()
    }

    pub fn preds(&self) -> &[Vec<f64>] {
        &self.preds
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    fn resample(&self, idx: &[usize]) -> Self {
        Self {
            preds: idx.iter().map(|&i| self.preds[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    fn check_model(&self, j: usize) -> Result<()> {
        if j < self.num_models() {
            Ok(())
        } else {
            Err(Error::shape(format!(
                "model {j} out of range for {} models",
                self.num_models()
            )))
        }
    }

    fn hits(&self, j: usize) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.preds
            .iter()
            .zip(&self.labels)
            .map(move |(p, &l)| (p[j], if l == j { 1.0 } else { 0.0 }))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBin {
    /// Mean predicted probability in the bin.
    pub pp: f64,
    /// Fraction of rows in the bin whose label is the model.
    pub tp: f64,
    pub count: usize,
}

fn bin_of(p: f64, bins: usize) -> usize {
    ((p * bins as f64) as usize).min(bins - 1)
}

/// Non-empty bins of equal width on [0, 1], in ascending order.
pub fn calibration_curve(c: &PredictionCorpus, j: usize, bins: usize) -> Result<Vec<CalibrationBin>> {
    c.check_model(j)?;
    if bins == 0 {
        return Err(Error::config("need at least one bin"));
    }
    let mut sum_p = vec![0.0; bins];
    let mut sum_t = vec![0.0; bins];
    let mut count = vec![0usize; bins];
    for (p, t) in c.hits(j) {
        let b = bin_of(p, bins);
        sum_p[b] += p;
        sum_t[b] += t;
        count[b] += 1;
    }
    Ok((0..bins)
        .filter(|&b| count[b] > 0)
        .map(|b| CalibrationBin {
            pp: sum_p[b] / count[b] as f64,
            tp: sum_t[b] / count[b] as f64,
            count: count[b],
        })
        .collect())
}

/// Expected calibration error: bin-weighted mean of |PP - TP|.
pub fn ece(c: &PredictionCorpus, j: usize, bins: usize) -> Result<f64> {
    let s = c.len() as f64;
    Ok(calibration_curve(c, j, bins)?
        .iter()
        .map(|b| b.count as f64 / s * (b.pp - b.tp).abs())
        .sum())
}

/// Fraction of rows where "argmax is j" agrees with "label is j".
pub fn accuracy(c: &PredictionCorpus, j: usize) -> Result<f64> {
    c.check_model(j)?;
    let agree = c
        .preds
        .iter()
        .zip(&c.labels)
        .filter(|(p, &l)| (argmax(p) == j) == (l == j))
        .count();
    Ok(agree as f64 / c.len() as f64)
}

/// Fraction of rows whose argmax equals the label.
pub fn overall_accuracy(c: &PredictionCorpus) -> f64 {
    let hit = c.preds.iter().zip(&c.labels).filter(|(p, &l)| argmax(p) == l).count();
    hit as f64 / c.len() as f64
}

pub fn mae(c: &PredictionCorpus, j: usize) -> Result<f64> {
    c.check_model(j)?;
    Ok(c.hits(j).map(|(p, t)| (p - t).abs()).sum::<f64>() / c.len() as f64)
}

pub fn rmse(c: &PredictionCorpus, j: usize) -> Result<f64> {
    c.check_model(j)?;
    Ok((c.hits(j).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / c.len() as f64).sqrt())
}

/// `-mean_s 1[label = j] ln(pi_j)`, with the log floored at 1e-12.
pub fn log_score(c: &PredictionCorpus, j: usize) -> Result<f64> {
    c.check_model(j)?;
    let total: f64 = c
        .hits(j)
        .filter(|&(_, t)| t == 1.0)
        .map(|(p, _)| -p.max(LOG_FLOOR).ln())
        .sum();
    Ok(total / c.len() as f64)
}

/// Prior probability minus the mean predicted probability of model j.
pub fn sbc(c: &PredictionCorpus, j: usize, prior_j: f64) -> Result<f64> {
    c.check_model(j)?;
    Ok(prior_j - c.hits(j).map(|(p, _)| p).sum::<f64>() / c.len() as f64)
}

/// Row = true model, column = argmax prediction, rows normalized.
/// Rows for models absent from the labels are all zero.
pub fn confusion_matrix(c: &PredictionCorpus) -> Vec<Vec<f64>> {
    let j = c.num_models();
    let mut m = vec![vec![0.0; j]; j];
    for (p, &l) in c.preds.iter().zip(&c.labels) {
        m[l][argmax(p)] += 1.0;
    }
    for row in &mut m {
        let total: f64 = row.iter().sum();
        if total > 0.0 {
            row.iter_mut().for_each(|v| *v /= total);
        }
    }
    m
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMetrics {
    pub model: String,
    pub ece: f64,
    pub calibration: Vec<CalibrationBin>,
    pub accuracy: f64,
    pub mae: f64,
    pub rmse: f64,
    pub log_score: f64,
    pub sbc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema_version: u32,
    pub count: usize,
    pub bins: usize,
    pub overall_accuracy: f64,
    pub per_model: Vec<ModelMetrics>,
    pub confusion: Vec<Vec<f64>>,
}

impl MetricsReport {
    /// Full metric suite; `prior` defaults to uniform.
    pub fn compute(c: &PredictionCorpus, models: &[String], prior: Option<&[f64]>, bins: usize) -> Result<Self> {
        let j = c.num_models();
        if models.len() != j {
            return Err(Error::shape(format!("{} model names for {j} models", models.len())));
        }
        let uniform = vec![1.0 / j as f64; j];
        let prior = prior.unwrap_or(&uniform);
        if prior.len() != j {
            return Err(Error::shape("prior length does not match the number of models"));
        }
        let per_model = (0..j)
            .map(|k| {
                Ok(ModelMetrics {
                    model: models[k].clone(),
                    ece: ece(c, k, bins)?,
                    calibration: calibration_curve(c, k, bins)?,
                    accuracy: accuracy(c, k)?,
                    mae: mae(c, k)?,
                    rmse: rmse(c, k)?,
                    log_score: log_score(c, k)?,
                    sbc: sbc(c, k, prior[k])?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            schema_version: REPORT_SCHEMA,
            count: c.len(),
            bins,
            overall_accuracy: overall_accuracy(c),
            per_model,
            confusion: confusion_matrix(c),
        })
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn write_calibration_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        w.write_record(["model", "pp", "tp", "count"]).map_err(csv_err)?;
        for m in &self.per_model {
            for b in &m.calibration {
                w.write_record([m.model.clone(), b.pp.to_string(), b.tp.to_string(), b.count.to_string()])
                    .map_err(csv_err)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_confusion_csv(&self, path: &Path) -> Result<()> {
        write_confusion_csv(
            path,
            &self.per_model.iter().map(|m| m.model.clone()).collect::<Vec<_>>(),
            &self.confusion,
        )
    }
}

pub fn write_confusion_csv(path: &Path, models: &[String], confusion: &[Vec<f64>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let mut header = vec!["true".to_owned()];
    header.extend(models.iter().cloned());
    w.write_record(&header).map_err(csv_err)?;
    for (name, row) in models.iter().zip(confusion) {
        let mut rec = vec![name.clone()];
        rec.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Median and 2.5/97.5 percentile band of a scalar over repetitions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Band {
    pub median: f64,
    pub lo: f64,
    pub hi: f64,
}

impl Band {
    pub fn of(values: &[f64]) -> Self {
        Self {
            median: median(values),
            lo: quantile(values, 0.025),
            hi: quantile(values, 0.975),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelBands {
    pub model: String,
    pub ece: Band,
    pub accuracy: Band,
    pub mae: Band,
    pub rmse: Band,
    pub log_score: Band,
    pub sbc: Band,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub schema_version: u32,
    pub repetitions: usize,
    pub overall_accuracy: Band,
    pub per_model: Vec<ModelBands>,
}

impl AggregateReport {
    pub fn from_reports(reports: &[MetricsReport]) -> Result<Self> {
        let first = reports.first().ok_or_else(|| Error::shape("no reports to aggregate"))?;
        let band = |f: &dyn Fn(&MetricsReport) -> f64| Band::of(&reports.iter().map(f).collect::<Vec<_>>());
        let per_model = (0..first.per_model.len())
            .map(|k| ModelBands {
                model: first.per_model[k].model.clone(),
                ece: band(&|r| r.per_model[k].ece),
                accuracy: band(&|r| r.per_model[k].accuracy),
                mae: band(&|r| r.per_model[k].mae),
                rmse: band(&|r| r.per_model[k].rmse),
                log_score: band(&|r| r.per_model[k].log_score),
                sbc: band(&|r| r.per_model[k].sbc),
            })
            .collect();
        Ok(Self {
            schema_version: REPORT_SCHEMA,
            repetitions: reports.len(),
            overall_accuracy: band(&|r| r.overall_accuracy),
            per_model,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub stderr: f64,
}

impl Estimate {
    fn of(values: &[f64]) -> Self {
        // Deviations from the first value keep identical replicates at exactly zero spread.
        let n = values.len() as f64;
        let d: Vec<f64> = values.iter().map(|v| v - values[0]).collect();
        let sd: f64 = d.iter().sum();
        let ss: f64 = d.iter().map(|x| x * x).sum();
        let var = ((ss - sd * sd / n) / (n - 1.0).max(1.0)).max(0.0);
        Self {
            mean: mean(values),
            stderr: var.sqrt(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapMetrics {
    pub ece: Estimate,
    pub accuracy: Estimate,
    pub mae: Estimate,
    pub rmse: Estimate,
    pub log_score: Estimate,
    pub sbc: Estimate,
}

/// Row-resampling bootstrap of the metric suite for model `j`; replicate `b`
/// uses its own substream of `seed`, so the result does not depend on thread count.
pub fn bootstrap_metrics(
    c: &PredictionCorpus,
    j: usize,
    prior_j: f64,
    bins: usize,
    n_boot: usize,
    seed: u64,
) -> Result<BootstrapMetrics> {
    c.check_model(j)?;
    if n_boot == 0 {
        return Err(Error::config("n_boot must be at least 1"));
    }
    let reps = (0..n_boot as u64)
        .into_par_iter()
        .map(|b| {
            let mut rng = substream(seed, &[b]);
            let idx: Vec<usize> = (0..c.len()).map(|_| rng.random_range(0..c.len())).collect();
            let r = c.resample(&idx);
            Ok([
                ece(&r, j, bins)?,
                accuracy(&r, j)?,
                mae(&r, j)?,
                rmse(&r, j)?,
                log_score(&r, j)?,
                sbc(&r, j, prior_j)?,
            ])
        })
        .collect::<Result<Vec<_>>>()?;
    let col = |k: usize| Estimate::of(&reps.iter().map(|r| r[k]).collect::<Vec<_>>());
    Ok(BootstrapMetrics {
        ece: col(0),
        accuracy: col(1),
        mae: col(2),
        rmse: col(3),
        log_score: col(4),
        sbc: col(5),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn three_row() -> PredictionCorpus {
        PredictionCorpus::new(vec![vec![0.1, 0.9], vec![0.2, 0.8], vec![0.8, 0.2]], vec![1, 1, 0]).unwrap()
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[0.5, 0.5]), 0);
        assert_eq!(argmax(&[0.2, 0.4, 0.4]), 1);
    }

    #[test]
    fn corpus_validation() {
        assert!(PredictionCorpus::new(vec![], vec![]).is_err());
        assert!(PredictionCorpus::new(vec![vec![0.5, 0.6]], vec![0]).is_err());
        assert!(PredictionCorpus::new(vec![vec![0.5, 0.5]], vec![2]).is_err());
        assert!(PredictionCorpus::new(vec![vec![0.5, 0.5]], vec![0, 1]).is_err());
    }

    #[test]
    fn perfect_confident_single_bin() {
        let c = PredictionCorpus::new(vec![vec![0.0, 1.0]; 4], vec![1; 4]).unwrap();
        assert_eq!(
            calibration_curve(&c, 1, 15).unwrap(),
            vec![CalibrationBin {
                pp: 1.0,
                tp: 1.0,
                count: 4
            }]
        );
        assert_eq!(ece(&c, 1, 15).unwrap(), 0.0);
        for f in [mae, rmse, log_score] {
            assert_eq!(f(&c, 1).unwrap(), 0.0);
        }
    }

    #[test]
    fn half_and_half_is_calibrated_with_one_bin() {
        let c = PredictionCorpus::new(vec![vec![0.5, 0.5]; 4], vec![0, 1, 0, 1]).unwrap();
        assert_eq!(ece(&c, 0, 1).unwrap(), 0.0);
        assert_eq!(accuracy(&c, 0).unwrap(), 0.5);
    }

    #[test]
    fn sbc_sign() {
        let c = PredictionCorpus::new(vec![vec![0.48, 0.52]; 3], vec![0, 1, 1]).unwrap();
        assert!((sbc(&c, 1, 0.5).unwrap() + 0.02).abs() < 1e-12);
    }

    #[test]
    fn complementary_accuracy_for_two_models() {
        let c = three_row();
        assert_eq!(accuracy(&c, 0).unwrap(), accuracy(&c, 1).unwrap());
    }

    #[test]
    fn report_shapes() {
        let names = vec!["a".to_owned(), "b".to_owned()];
        let r = MetricsReport::compute(&three_row(), &names, None, 2).unwrap();
        assert_eq!(r.per_model.len(), 2);
        for row in &r.confusion {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let agg = AggregateReport::from_reports(&[r.clone(), r.clone(), r]).unwrap();
        assert_eq!(agg.per_model[1].ece.lo, agg.per_model[1].ece.hi);
    }

    #[test]
    fn bootstrap_is_seed_deterministic() {
        let a = bootstrap_metrics(&three_row(), 1, 0.5, 2, 50, 7).unwrap();
        let b = bootstrap_metrics(&three_row(), 1, 0.5, 2, 50, 7).unwrap();
        assert_eq!(a, b);
    }
}

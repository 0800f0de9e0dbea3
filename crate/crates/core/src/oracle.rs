//! Exact marginal likelihoods for the hierarchical normal models and the
//! PMP / Bayes factor algebra shared with network outputs.
//!
//! Person effects are integrated analytically (compound-symmetric Gaussian per
//! group). For the free-location model the population mean is integrated
//! analytically as well, leaving a 2-D integral over `(tau2, sigma2)` that is
//! evaluated with tensor-product composite Gauss-Legendre quadrature in
//! log-variance coordinates.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::stats::phi;
use crate::summary::HierarchicalDataset;
use crate::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// `log N(x | mu 1, sigma2 I + tau2 1 1^T)`.
pub fn group_log_density_normal(x: &[f64], mu: f64, tau2: f64, sigma2: f64) -> Result<f64> {
    if !(sigma2 > 0.0) || !(tau2 >= 0.0) {
        return Err(Error::domain(format!(
            "need sigma2 > 0 and tau2 >= 0 (got {sigma2}, {tau2})"
        )));
    }
    if x.is_empty() {
        return Ok(0.0);
    }
    Ok(GroupStats::of(x).log_density(mu, tau2, sigma2))
}

/// Sufficient statistics of one group: size, mean and within-group sum of squares.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupStats {
    pub n: f64,
    pub mean: f64,
    pub within_ss: f64,
}

impl GroupStats {
    pub fn of(x: &[f64]) -> Self {
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let within_ss = x.iter().map(|v| (v - mean) * (v - mean)).sum();
        Self { n, mean, within_ss }
    }

    fn log_density(&self, mu: f64, tau2: f64, sigma2: f64) -> f64 {
        let s = sigma2 + self.n * tau2;
        let d = self.mean - mu;
        -0.5 * (self.n * LN_2PI + (self.n - 1.0) * sigma2.ln() + s.ln() + self.within_ss / sigma2 + self.n * d * d / s)
    }
}

/// Observed-row statistics of every group of a one-dimensional dataset.
pub fn dataset_stats(data: &HierarchicalDataset) -> Result<Vec<GroupStats>> {
    if data.dim() != 1 {
        return Err(Error::shape(format!(
            "normal oracle needs D = 1 data, got D = {}",
            data.dim()
        )));
    }
    Ok((0..data.num_groups())
        .filter_map(|m| {
            let x: Vec<f64> = (0..data.group_size(m))
                .filter(|&n| data.is_observed(m, n))
                .map(|n| data.row(m, n)[0])
                .collect();
            (!x.is_empty()).then(|| GroupStats::of(&x))
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NormalModel {
    /// Population mean fixed at zero.
    M1,
    /// Population mean with a standard normal prior.
    M2,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuadratureConfig {
    /// Gauss-Legendre nodes per panel and dimension.
    pub nodes: usize,
    /// Initial equal-width panels per dimension in log-variance space.
    pub panels: usize,
    /// Variance integration bounds; the prior mass outside is ignored.
    pub variance_lower: f64,
    pub variance_upper: f64,
    /// Maximum allowed change of the log marginal when nodes are doubled.
    pub doubling_tolerance: f64,
}

impl Default for QuadratureConfig {
    fn default() -> Self {
        Self {
            nodes: 16,
            panels: 8,
            variance_lower: 1e-10,
            // 99.999% quantile of the half-normal prior.
            variance_upper: 4.417_173_413_469_02,
            doubling_tolerance: 1e-3,
        }
    }
}

impl QuadratureConfig {
    /// Prior mass of Normal+(0, 1) inside the variance bounds.
    pub fn covered_mass(&self) -> f64 {
        2.0 * (phi(self.variance_upper) - phi(self.variance_lower))
    }

    pub fn validate(&self) -> Result<()> {
        if self.nodes < 16 {
            return Err(Error::config("quadrature needs at least 16 nodes"));
        }
        if self.panels == 0 || !(self.doubling_tolerance > 0.0) {
            return Err(Error::config(
                "quadrature panels and doubling tolerance must be positive",
            ));
        }
        if !(0.0 < self.variance_lower && self.variance_lower < self.variance_upper) {
            return Err(Error::config("variance bounds need 0 < lower < upper"));
        }
        if self.covered_mass() < 0.9999 {
            return Err(Error::config(format!(
                "variance bounds cover only {:.6} of the prior mass",
                self.covered_mass()
            )));
        }
        Ok(())
    }
}

/// Gauss-Legendre nodes and weights on [-1, 1].
#[derive(Debug, Clone)]
pub struct GaussLegendre {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussLegendre {
    pub fn new(n: usize) -> Self {
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        for i in 0..n.div_ceil(2) {
            let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            for _ in 0..100 {
                let (p, d) = legendre(n, x);
                let dx = p / d;
                x -= dx;
                if dx.abs() < 1e-16 {
                    break;
                }
            }
            let dp = legendre(n, x).1;
            let w = 2.0 / ((1.0 - x * x) * dp * dp);
            nodes[i] = -x;
            nodes[n - 1 - i] = x;
            weights[i] = w;
            weights[n - 1 - i] = w;
        }
        Self { nodes, weights }
    }

    pub fn integrate<F: FnMut(f64) -> f64>(&self, a: f64, b: f64, f: &mut F) -> f64 {
        let h = 0.5 * (b - a);
        let c = 0.5 * (a + b);
        h * self
            .nodes
            .iter()
            .zip(&self.weights)
            .map(|(&x, &w)| w * f(c + h * x))
            .sum::<f64>()
    }
}

/// `P_n(x)` and its derivative by the three-term recurrence.
fn legendre(n: usize, x: f64) -> (f64, f64) {
    let (mut p0, mut p1) = (1.0, x);
    for k in 2..=n {
        let k = k as f64;
        let p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// Composite Gauss-Legendre over `panels` equal panels of `[a, b]`.
pub fn integrate_composite<F: FnMut(f64) -> f64>(
    rule: &GaussLegendre,
    a: f64,
    b: f64,
    panels: usize,
    f: &mut F,
) -> f64 {
    let w = (b - a) / panels as f64;
    (0..panels)
        .map(|i| rule.integrate(a + i as f64 * w, a + (i + 1) as f64 * w, f))
        .sum()
}

/// Log of the Normal+(0, 1) density, for `v > 0`.
fn ln_half_normal(v: f64) -> f64 {
    (2.0 / PI).sqrt().ln() - 0.5 * v * v
}

/// Log-likelihood given variances, with the location integrated out under M2.
fn log_lik(stats: &[GroupStats], model: NormalModel, tau2: f64, sigma2: f64) -> f64 {
    match model {
        NormalModel::M1 => stats.iter().map(|g| g.log_density(0.0, tau2, sigma2)).sum(),
        NormalModel::M2 => {
            // The data depend on mu through sum_m w_m (xbar_m - mu)^2; completing the
            // square against the Normal(0, 1) prior gives the closed form below.
            let (mut base, mut a, mut b, mut c) = (0.0, 0.0, 0.0, 0.0);
            for g in stats {
                let s = sigma2 + g.n * tau2;
                let w = g.n / s;
                base += -0.5 * (g.n * LN_2PI + (g.n - 1.0) * sigma2.ln() + s.ln() + g.within_ss / sigma2);
                a += w;
                b += w * g.mean;
                c += w * g.mean * g.mean;
            }
            base - 0.5 * (c - b * b / (1.0 + a)) - 0.5 * (1.0 + a).ln()
        }
    }
}

/// Log joint of data and variances in log-variance coordinates (prior, Jacobian, likelihood).
fn log_kernel(stats: &[GroupStats], model: NormalModel, u_tau: f64, u_sigma: f64) -> f64 {
    let (tau2, sigma2) = (u_tau.exp(), u_sigma.exp());
    ln_half_normal(tau2) + u_tau + ln_half_normal(sigma2) + u_sigma + log_lik(stats, model, tau2, sigma2)
}

/// Kernel drop (nats) below the grid maximum that bounds the integration box.
const BOX_MARGIN: f64 = 60.0;

fn log_marginal_with(stats: &[GroupStats], model: NormalModel, qc: &QuadratureConfig, nodes: usize) -> f64 {
    let (lo, hi) = (qc.variance_lower.ln(), qc.variance_upper.ln());
    // A coarse grid gives the normalizing shift and the box outside of which the
    // kernel is negligible; the box is padded by one grid cell on every side.
    let grid = 64;
    let step = (hi - lo) / grid as f64;
    let values: Vec<Vec<f64>> = (0..=grid)
        .map(|i| {
            (0..=grid)
                .map(|k| log_kernel(stats, model, lo + k as f64 * step, lo + i as f64 * step))
                .collect()
        })
        .collect();
    let shift = values.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
    let (mut si, mut ti) = ((grid, 0), (grid, 0));
    for (i, row) in values.iter().enumerate() {
        for (k, &v) in row.iter().enumerate() {
            if v > shift - BOX_MARGIN {
                si = (si.0.min(i), si.1.max(i));
                ti = (ti.0.min(k), ti.1.max(k));
            }
        }
    }
    let edge = |i: usize| lo + i as f64 * step;
    let (s_lo, s_hi) = (edge(si.0.saturating_sub(1)), edge((si.1 + 1).min(grid)));
    let (t_lo, t_hi) = (edge(ti.0.saturating_sub(1)), edge((ti.1 + 1).min(grid)));

    let rule = GaussLegendre::new(nodes);
    let mut outer = |u_sigma: f64| {
        let mut inner = |u_tau: f64| (log_kernel(stats, model, u_tau, u_sigma) - shift).exp();
        integrate_composite(&rule, t_lo, t_hi, qc.panels, &mut inner)
    };
    let total = integrate_composite(&rule, s_lo, s_hi, qc.panels, &mut outer);
    shift + total.ln()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogMarginal {
    pub value: f64,
    pub model: NormalModel,
    /// Change of the estimate when the node count is doubled.
    pub doubling_delta: f64,
}

/// `ln p(x | model)` by quadrature; fails with an accuracy error when doubling
/// the node count moves the result by more than the configured tolerance.
pub fn log_marginal_normal(
    data: &HierarchicalDataset,
    model: NormalModel,
    qc: &QuadratureConfig,
) -> Result<LogMarginal> {
    qc.validate()?;
    let stats = dataset_stats(data)?;
    let a = log_marginal_with(&stats, model, qc, qc.nodes);
    let b = log_marginal_with(&stats, model, qc, 2 * qc.nodes);
    let delta = (a - b).abs();
    if !b.is_finite() {
        return Err(Error::NonFinite {
            node: 0,
            op: "log_marginal",
        });
    }
    if delta > qc.doubling_tolerance {
        return Err(Error::Accuracy { delta });
    }
    Ok(LogMarginal {
        value: b,
        model,
        doubling_delta: delta,
    })
}

/// Posterior model probabilities: softmax of log marginal plus log prior.
pub fn pmps_from_logml(logmls: &[f64], prior: &[f64]) -> Result<Vec<f64>> {
    if logmls.len() != prior.len() || logmls.is_empty() {
        return Err(Error::shape(
            "log marginals and prior must have the same non-zero length",
        ));
    }
    if prior.iter().any(|&p| !(p > 0.0)) || (prior.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::domain("prior must be positive and sum to one"));
    }
    let z: Vec<f64> = logmls.iter().zip(prior).map(|(l, p)| l + p.ln()).collect();
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    Ok(e.into_iter().map(|v| v / s).collect())
}

pub fn bayes_factor(logml_j: f64, logml_k: f64) -> f64 {
    (logml_j - logml_k).exp()
}

pub fn posterior_odds(pmp_j: f64, pmp_k: f64) -> f64 {
    pmp_j / pmp_k
}

pub const BF_MIN: f64 = 1e-12;
pub const BF_MAX: f64 = 1e12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BfTable {
    /// `bf[j][k]` is the Bayes factor of model j over model k.
    pub bf: Vec<Vec<f64>>,
    /// Set when an entry hit the clamp or some PMP exceeds `1 - 1e-12`.
    pub saturated: bool,
}

/// Bayes factors implied by PMPs and the model prior, clamped to `[1e-12, 1e12]`.
pub fn network_to_bf(pmp: &[f64], prior: &[f64]) -> Result<BfTable> {
    if pmp.len() != prior.len() || pmp.is_empty() {
        return Err(Error::shape("PMP and prior must have the same non-zero length"));
    }
    let mut saturated = pmp.iter().any(|&p| p > 1.0 - 1e-12);
    let j = pmp.len();
    let mut bf = vec![vec![1.0; j]; j];
    for a in 0..j {
        for b in 0..j {
            let raw = (pmp[a] / pmp[b]) * (prior[b] / prior[a]);
            let v = if raw.is_nan() { 1.0 } else { raw.clamp(BF_MIN, BF_MAX) };
            if v != raw {
                saturated = true;
            }
            bf[a][b] = v;
        }
    }
    Ok(BfTable { bf, saturated })
}

/// One oracle result row for the scatter comparison against network output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleRow {
    pub dataset: String,
    pub logml: Vec<f64>,
    pub pmp: Vec<f64>,
    /// `ln BF_21`.
    pub log_bf21: f64,
    pub doubling_delta: f64,
}

/// Oracle PMPs for M1 vs M2 under a uniform prior.
pub fn oracle_row(id: &str, data: &HierarchicalDataset, qc: &QuadratureConfig) -> Result<OracleRow> {
    let m1 = log_marginal_normal(data, NormalModel::M1, qc)?;
    let m2 = log_marginal_normal(data, NormalModel::M2, qc)?;
    let logml = vec![m1.value, m2.value];
    Ok(OracleRow {
        dataset: id.to_owned(),
        pmp: pmps_from_logml(&logml, &[0.5, 0.5])?,
        log_bf21: m2.value - m1.value,
        logml,
        doubling_delta: m1.doubling_delta.max(m2.doubling_delta),
    })
}

//! Recognition-memory models with binary responses (signal detection and
//! two-high-threshold), plus the Bernoulli noise generator.
//!
//! Rows are `(stimulus, response)` with stimulus 1 for old items (signal) and
//! 0 for new items.

use nalgebra::{DMatrix, Matrix2, Vector2};
use rand::Rng;
use rand_distr::{Distribution, Gamma};

use super::dist::{normal, sample_inverse_wishart, std_normal};
use super::{balanced_stimulus, DIAGNOSTICS};
use crate::stats::phi;
use crate::summary::{DatasetMeta, HierarchicalDataset};
use crate::{Error, Result};

/// Per-person hit and false-alarm probabilities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecognitionPerson {
    pub hit: f64,
    pub false_alarm: f64,
}

/// Emits `(stimulus, response)` rows given per-person response probabilities.
pub fn simulate_recognition_with<R: Rng + ?Sized>(
    persons: &[RecognitionPerson],
    sizes: &[usize],
    meta: DatasetMeta,
    rng: &mut R,
) -> Result<HierarchicalDataset> {
    let groups = persons
        .iter()
        .zip(sizes)
        .map(|(p, &n)| {
            let mut rows = Vec::with_capacity(2 * n);
            for i in 0..n {
                let s = balanced_stimulus(i, n);
                let prob = if s == 1 { p.hit } else { p.false_alarm };
                let r = rng.random::<f64>() < prob;
                rows.push(s as f64);
                rows.push(if r { 1.0 } else { 0.0 });
            }
            rows
        })
        .collect();
    HierarchicalDataset::from_flat(2, groups, meta)
}

fn unit_gamma<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    Gamma::new(1.0, 1.0).expect("valid gamma").sample(rng)
}

/// Equal-variance signal detection persons: probit hit and false-alarm
/// rates drawn around population means.
pub fn draw_sdt_persons<R: Rng + ?Sized>(groups: usize, rng: &mut R) -> Vec<RecognitionPerson> {
    let mu_h = normal(1.0, 0.5, rng);
    let sd_h = unit_gamma(rng);
    let mu_f = normal(-1.0, 0.5, rng);
    let sd_f = unit_gamma(rng);
    (0..groups)
        .map(|_| RecognitionPerson {
            hit: phi(normal(mu_h, sd_h, rng)),
            false_alarm: phi(normal(mu_f, sd_f, rng)),
        })
        .collect()
}

pub fn simulate_sdt<R: Rng + ?Sized>(sizes: &[usize], meta: DatasetMeta, rng: &mut R) -> Result<HierarchicalDataset> {
    let persons = draw_sdt_persons(sizes.len(), rng);
    simulate_recognition_with(&persons, sizes, meta, rng)
}

/// Two-high-threshold response probabilities from detection `d` and guessing `g`.
pub fn two_high_threshold(d: f64, g: f64) -> RecognitionPerson {
    RecognitionPerson {
        hit: d + (1.0 - d) * g,
        false_alarm: (1.0 - d) * g,
    }
}

const MAX_COVARIANCE_TRIES: usize = 1000;

/// Population covariance `Diag(lambda) Q Diag(lambda)` with
/// `Q ~ InvWishart(3, I)`; redrawn until positive definite.
pub fn draw_mpt_covariance<R: Rng + ?Sized>(rng: &mut R) -> Result<Matrix2<f64>> {
    let id = DMatrix::<f64>::identity(2, 2);
    for _ in 0..MAX_COVARIANCE_TRIES {
        let l = Vector2::new(rng.random_range(0.0..2.0), rng.random_range(0.0..2.0));
        let q = sample_inverse_wishart(3, &id, rng)?;
        let q = Matrix2::new(q[(0, 0)], q[(0, 1)], q[(1, 0)], q[(1, 1)]);
        let sigma = Matrix2::from_diagonal(&l) * q * Matrix2::from_diagonal(&l);
        if sigma.iter().all(|v| v.is_finite()) && sigma.cholesky().is_some() {
            return Ok(sigma);
        }
        DIAGNOSTICS.mpt_covariance_resamples.inc();
    }
    Err(Error::domain("could not draw a positive-definite covariance"))
}

pub fn draw_mpt_persons<R: Rng + ?Sized>(groups: usize, rng: &mut R) -> Result<Vec<RecognitionPerson>> {
    let mu = Vector2::new(normal(0.0, 0.25, rng), normal(0.0, 0.25, rng));
    let sigma = draw_mpt_covariance(rng)?;
    let l = sigma.cholesky().expect("checked positive definite").l();
    Ok((0..groups)
        .map(|_| {
            let z = Vector2::new(std_normal(rng), std_normal(rng));
            let x = mu + l * z;
            two_high_threshold(phi(x[0]), phi(x[1]))
        })
        .collect())
}

pub fn simulate_mpt<R: Rng + ?Sized>(sizes: &[usize], meta: DatasetMeta, rng: &mut R) -> Result<HierarchicalDataset> {
    let persons = draw_mpt_persons(sizes.len(), rng)?;
    simulate_recognition_with(&persons, sizes, meta, rng)
}

/// Both columns i.i.d. Bernoulli(0.5).
pub fn simulate_noise<R: Rng + ?Sized>(sizes: &[usize], meta: DatasetMeta, rng: &mut R) -> Result<HierarchicalDataset> {
    let groups = sizes
        .iter()
        .map(|&n| {
            (0..2 * n)
                .map(|_| if rng.random::<bool>() { 1.0 } else { 0.0 })
                .collect()
        })
        .collect();
    HierarchicalDataset::from_flat(2, groups, meta)
}

//! Evidence accumulation models: diffusion (Gaussian noise) and Levy flight
//! (alpha-stable noise), each with or without inter-trial variability.
//!
//! Rows are `(rt, response, stimulus)`.

use std::f64::consts::FRAC_1_SQRT_2;

use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use super::dist::{
    centered_uniform, gamma_mean_sd, inv_logit, normal, normal_plus, stable_unit, std_normal, truncated_normal,
};
use super::{balanced_stimulus, DIAGNOSTICS};
use crate::summary::{DatasetMeta, HierarchicalDataset};
use crate::{Error, Result};

/// Scale of the accumulator noise; with `alpha = 2` this gives unit variance per unit time.
pub const NOISE_SCALE: f64 = FRAC_1_SQRT_2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EamVariant {
    /// Inter-trial variability of start point, drift and non-decision time.
    pub variability: bool,
    /// Alpha-stable instead of Gaussian noise.
    pub levy: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EamParams {
    pub a: f64,
    pub zr: f64,
    pub v0: f64,
    pub v1: f64,
    pub t0: f64,
    pub alpha: f64,
    pub sv: f64,
    pub sz: f64,
    pub st: f64,
}

impl EamParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.a > 0.0
            && self.zr > 0.0
            && self.zr < 1.0
            && self.t0 > 0.0
            && (1.0..=2.0).contains(&self.alpha)
            && self.sv >= 0.0
            && self.sz >= 0.0
            && self.st >= 0.0
            && self.v0 < 0.0
            && self.v1 > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::domain(format!("invalid accumulator parameters {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EamSettings {
    pub dt: f64,
    pub t_max: f64,
}

impl Default for EamSettings {
    fn default() -> Self {
        Self { dt: 1e-3, t_max: 10.0 }
    }
}

const MAX_TRIAL_TRIES: usize = 1000;
const MAX_PERSON_TRIES: usize = 1000;

/// Euler-Maruyama path of one trial; `None` when no boundary is reached in time.
fn run_trial<R: Rng + ?Sized>(p: &EamParams, stimulus: u8, s: &EamSettings, rng: &mut R) -> Option<(f64, u8)> {
    let mut v = if stimulus == 1 { p.v1 } else { p.v0 };
    if p.sv > 0.0 {
        v += normal(0.0, p.sv, rng);
    }
    let z = (p.zr + centered_uniform(p.sz, rng)).clamp(0.01, 0.99);
    let t0 = (p.t0 + centered_uniform(p.st, rng)).max(f64::MIN_POSITIVE);
    let drift = v * s.dt;
    let limit = ((s.t_max - p.t0) / s.dt).floor() as u64;
    let mut x = z * p.a;
    let gaussian = p.alpha == 2.0;
    // For alpha = 2 the stable draw with scale 1/sqrt(2) is exactly N(0, 1).
    let noise = if gaussian {
        s.dt.sqrt()
    } else {
        NOISE_SCALE * s.dt.powf(1.0 / p.alpha)
    };
    for step in 1..=limit {
        let xi = if gaussian {
            std_normal(rng)
        } else {
            stable_unit(p.alpha, rng)
        };
        x += drift + noise * xi;
        if x <= 0.0 {
            return Some((step as f64 * s.dt + t0, 0));
        }
        if x >= p.a {
            return Some((step as f64 * s.dt + t0, 1));
        }
    }
    None
}

/// Simulates one trial; paths that time out are redrawn.
pub fn simulate_eam_trial<R: Rng + ?Sized>(
    p: &EamParams,
    stimulus: u8,
    settings: &EamSettings,
    rng: &mut R,
) -> Result<(f64, u8)> {
    p.validate()?;
    if !(settings.dt > 0.0) || !(settings.t_max > p.t0) {
        return Err(Error::domain(format!(
            "need dt > 0 and t_max > t0 (dt {}, t_max {}, t0 {})",
            settings.dt, settings.t_max, p.t0
        )));
    }
    for _ in 0..MAX_TRIAL_TRIES {
        if let Some(out) = run_trial(p, stimulus, settings, rng) {
            return Ok(out);
        }
        DIAGNOSTICS.eam_trial_resamples.inc();
    }
    Err(Error::domain(format!(
        "no boundary reached in {MAX_TRIAL_TRIES} attempts for {p:?}"
    )))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EamHyper {
    pub mu_a: f64,
    pub sd_a: f64,
    pub mu_zr: f64,
    pub sd_zr: f64,
    pub mu_v0: f64,
    pub sd_v0: f64,
    pub mu_v1: f64,
    pub sd_v1: f64,
    pub mu_t0: f64,
    pub sd_t0: f64,
    pub mu_alpha: f64,
    pub sd_alpha: f64,
}

/// Population-level draws; draws with a non-positive Gamma mean are redrawn.
pub fn draw_eam_hyper<R: Rng + ?Sized>(rng: &mut R) -> Result<EamHyper> {
    loop {
        let h = EamHyper {
            mu_a: normal(5.0, 1.0, rng),
            sd_a: normal_plus(0.4, 0.15, rng)?,
            mu_zr: normal(0.0, 0.25, rng),
            sd_zr: normal_plus(0.0, 0.05, rng)?,
            mu_v0: normal(5.0, 1.0, rng),
            sd_v0: normal_plus(0.5, 0.25, rng)?,
            mu_v1: normal(5.0, 1.0, rng),
            sd_v1: normal_plus(0.5, 0.25, rng)?,
            mu_t0: normal(5.0, 1.0, rng),
            sd_t0: normal_plus(0.1, 0.05, rng)?,
            mu_alpha: normal(1.65, 0.15, rng),
            sd_alpha: normal_plus(0.3, 0.1, rng)?,
        };
        if h.mu_a > 0.0 && h.mu_v0 > 0.0 && h.mu_v1 > 0.0 && h.mu_t0 > 0.0 {
            return Ok(h);
        }
        DIAGNOSTICS.eam_hyper_resamples.inc();
    }
}

/// Person-level draws for one variant. Basic variants fix all variabilities
/// at zero; diffusion variants fix `alpha = 2`.
pub fn draw_eam_person<R: Rng + ?Sized>(
    h: &EamHyper,
    variant: EamVariant,
    settings: &EamSettings,
    rng: &mut R,
) -> Result<EamParams> {
    for _ in 0..MAX_PERSON_TRIES {
        let mut p = EamParams {
            a: gamma_mean_sd(h.mu_a, h.sd_a, rng)?,
            zr: inv_logit(normal(h.mu_zr, h.sd_zr, rng)),
            v0: -gamma_mean_sd(h.mu_v0, h.sd_v0, rng)?,
            v1: gamma_mean_sd(h.mu_v1, h.sd_v1, rng)?,
            t0: gamma_mean_sd(h.mu_t0, h.sd_t0, rng)?,
            alpha: 2.0,
            sv: 0.0,
            sz: 0.0,
            st: 0.0,
        };
        if variant.levy {
            p.alpha = truncated_normal(h.mu_alpha, h.sd_alpha, 1.0, 2.0, rng)?;
        }
        if variant.variability {
            p.sz = Beta::new(1.0, 3.0).expect("valid beta").sample(rng);
            p.sv = normal_plus(0.0, 2.0, rng)?;
            p.st = normal_plus(0.0, 0.3, rng)?;
        }
        if p.validate().is_ok() && p.t0 < settings.t_max {
            return Ok(p);
        }
        DIAGNOSTICS.eam_person_resamples.inc();
    }
    Err(Error::domain("could not draw valid person parameters"))
}

/// Rows `(rt, response, stimulus)` for each person; stimuli split evenly.
pub fn simulate_eam_with<R: Rng + ?Sized>(
    persons: &[EamParams],
    sizes: &[usize],
    settings: &EamSettings,
    meta: DatasetMeta,
    rng: &mut R,
) -> Result<HierarchicalDataset> {
    let mut groups = Vec::with_capacity(persons.len());
    for (p, &n) in persons.iter().zip(sizes) {
        let mut rows = Vec::with_capacity(3 * n);
        for i in 0..n {
            let s = balanced_stimulus(i, n);
            let (rt, resp) = simulate_eam_trial(p, s, settings, rng)?;
            rows.extend_from_slice(&[rt, resp as f64, s as f64]);
        }
        groups.push(rows);
    }
    HierarchicalDataset::from_flat(3, groups, meta)
}

pub fn simulate_eam<R: Rng + ?Sized>(
    variant: EamVariant,
    sizes: &[usize],
    settings: &EamSettings,
    meta: DatasetMeta,
    rng: &mut R,
) -> Result<HierarchicalDataset> {
    let h = draw_eam_hyper(rng)?;
    let persons = (0..sizes.len())
        .map(|_| draw_eam_person(&h, variant, settings, rng))
        .collect::<Result<Vec<_>>>()?;
    simulate_eam_with(&persons, sizes, settings, meta, rng)
}

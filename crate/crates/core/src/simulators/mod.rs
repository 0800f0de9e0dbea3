//! Generative programs for every model family and the samplers behind them.

mod binary;
pub mod dist;
mod eam;
mod normal;

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use binary::{
    draw_mpt_covariance, draw_mpt_persons, draw_sdt_persons, simulate_mpt, simulate_noise, simulate_recognition_with,
    simulate_sdt, two_high_threshold, RecognitionPerson,
};
pub use dist::{sample_alpha_stable, sample_inverse_wishart, sample_wishart};
pub use eam::{
    draw_eam_hyper, draw_eam_person, simulate_eam, simulate_eam_trial, simulate_eam_with, EamHyper, EamParams,
    EamSettings, EamVariant, NOISE_SCALE,
};
pub use normal::{draw_group_means, draw_normal_hyper, simulate_normal, simulate_normal_with, NormalHyper};

use crate::summary::{DatasetMeta, HierarchicalDataset};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Family {
    #[serde(rename = "normal-M1")]
    NormalM1,
    #[serde(rename = "normal-M2")]
    NormalM2,
    #[serde(rename = "sdt")]
    Sdt,
    #[serde(rename = "mpt")]
    Mpt,
    #[serde(rename = "noise")]
    Noise,
    #[serde(rename = "eam-basic-dm")]
    EamBasicDm,
    #[serde(rename = "eam-basic-levy")]
    EamBasicLevy,
    #[serde(rename = "eam-full-dm")]
    EamFullDm,
    #[serde(rename = "eam-full-levy")]
    EamFullLevy,
}

impl Family {
    pub const ALL: [Family; 9] = [
        Family::NormalM1,
        Family::NormalM2,
        Family::Sdt,
        Family::Mpt,
        Family::Noise,
        Family::EamBasicDm,
        Family::EamBasicLevy,
        Family::EamFullDm,
        Family::EamFullLevy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Family::NormalM1 => "normal-M1",
            Family::NormalM2 => "normal-M2",
            Family::Sdt => "sdt",
            Family::Mpt => "mpt",
            Family::Noise => "noise",
            Family::EamBasicDm => "eam-basic-dm",
            Family::EamBasicLevy => "eam-basic-levy",
            Family::EamFullDm => "eam-full-dm",
            Family::EamFullLevy => "eam-full-levy",
        }
    }

    /// Observation dimension.
    pub fn dim(self) -> usize {
        match self {
            Family::NormalM1 | Family::NormalM2 => 1,
            Family::Sdt | Family::Mpt | Family::Noise => 2,
            _ => 3,
        }
    }

    pub fn eam_variant(self) -> Option<EamVariant> {
        let (variability, levy) = match self {
            Family::EamBasicDm => (false, false),
            Family::EamBasicLevy => (false, true),
            Family::EamFullDm => (true, false),
            Family::EamFullLevy => (true, true),
            _ => return None,
        };
        Some(EamVariant { variability, levy })
    }

    /// Human-readable prior table (parameter, distribution).
    pub fn prior_table(self) -> Vec<(&'static str, &'static str)> {
        match self {
            Family::NormalM1 => vec![
                ("tau2", "Normal+(0, 1)"),
                ("sigma2", "Normal+(0, 1)"),
                ("mu", "0"),
                ("theta_m", "Normal(mu, sqrt(tau2))"),
            ],
            Family::NormalM2 => vec![
                ("tau2", "Normal+(0, 1)"),
                ("sigma2", "Normal+(0, 1)"),
                ("mu", "Normal(0, 1)"),
                ("theta_m", "Normal(mu, sqrt(tau2))"),
            ],
            Family::Sdt => vec![
                ("mu_h'", "Normal(1, 0.5)"),
                ("sigma_h'", "Gamma(1, 1)"),
                ("mu_f'", "Normal(-1, 0.5)"),
                ("sigma_f'", "Gamma(1, 1)"),
                ("h'_m", "Normal(mu_h', sigma_h')"),
                ("f'_m", "Normal(mu_f', sigma_f')"),
            ],
            Family::Mpt => vec![
                ("mu_d'", "Normal(0, 0.25)"),
                ("mu_g'", "Normal(0, 0.25)"),
                ("lambda_d', lambda_g'", "Uniform(0, 2)"),
                ("Q", "InvWishart(3, I)"),
                ("(d'_m, g'_m)", "Normal(mu, Diag(lambda) Q Diag(lambda))"),
            ],
            Family::Noise => vec![("stimulus, response", "Bernoulli(0.5)")],
            _ => {
                let mut t = vec![
                    ("mu_a", "Normal(5, 1)"),
                    ("sigma_a", "Normal+(0.4, 0.15)"),
                    ("mu_zr", "Normal(0, 0.25)"),
                    ("sigma_zr", "Normal+(0, 0.05)"),
                    ("mu_v0, mu_v1", "Normal(5, 1)"),
                    ("sigma_v0, sigma_v1", "Normal+(0.5, 0.25)"),
                    ("mu_t0", "Normal(5, 1)"),
                    ("sigma_t0", "Normal+(0.1, 0.05)"),
                    ("a_m, t0_m, v1_m", "Gamma(mean, sd)"),
                    ("v0_m", "-Gamma(mean, sd)"),
                    ("zr_m", "invlogit(Normal(mu_zr, sigma_zr))"),
                ];
                let v = self.eam_variant().expect("eam family");
                if v.levy {
                    t.push(("mu_alpha", "Normal(1.65, 0.15)"));
                    t.push(("sigma_alpha", "Normal+(0.3, 0.1)"));
                    t.push(("alpha_m", "TruncatedNormal(mu_alpha, sigma_alpha, 1, 2)"));
                }
                if v.variability {
                    t.push(("sz_m", "Beta(1, 3)"));
                    t.push(("sv_m", "Normal+(0, 2)"));
                    t.push(("st_m", "Normal+(0, 0.3)"));
                }
                t
            }
        }
    }

    /// Draws one dataset with the given group sizes.
    pub fn simulate<R: Rng + ?Sized>(
        self,
        sizes: &[usize],
        settings: &EamSettings,
        seed: u64,
        rng: &mut R,
    ) -> Result<HierarchicalDataset> {
        if sizes.is_empty() || sizes.contains(&0) {
            return Err(Error::config("need at least one group and one observation per group"));
        }
        let meta = DatasetMeta {
            family: self.name().to_owned(),
            model_index: None,
            seed,
        };
        match self {
            Family::NormalM1 => simulate_normal(false, sizes, meta, rng),
            Family::NormalM2 => simulate_normal(true, sizes, meta, rng),
            Family::Sdt => simulate_sdt(sizes, meta, rng),
            Family::Mpt => simulate_mpt(sizes, meta, rng),
            Family::Noise => simulate_noise(sizes, meta, rng),
            _ => simulate_eam(self.eam_variant().expect("eam family"), sizes, settings, meta, rng),
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::config(format!("unknown model family '{s}'")))
    }
}

/// Stimulus type of trial `i` out of `n`: the first half is 0, the rest 1.
pub fn balanced_stimulus(i: usize, n: usize) -> u8 {
    u8::from(i >= n / 2)
}

#[derive(Debug, Default)]
pub struct Counter(AtomicU64);

impl Counter {
    fn inc(&self) {
        self.0.fetch_add(1, Ordering::Relaxed);
    }

    pub fn get(&self) -> u64 {
        self.0.load(Ordering::Relaxed)
    }
}

/// Process-wide resampling counters, for diagnostics only.
#[derive(Debug, Default)]
pub struct Diagnostics {
    pub mpt_covariance_resamples: Counter,
    pub eam_trial_resamples: Counter,
    pub eam_hyper_resamples: Counter,
    pub eam_person_resamples: Counter,
}

pub static DIAGNOSTICS: Diagnostics = Diagnostics {
    mpt_covariance_resamples: Counter(AtomicU64::new(0)),
    eam_trial_resamples: Counter(AtomicU64::new(0)),
    eam_hyper_resamples: Counter(AtomicU64::new(0)),
    eam_person_resamples: Counter(AtomicU64::new(0)),
};

impl Diagnostics {
    pub fn summary(&self) -> String {
        format!(
            "resamples: mpt covariance {}, eam trial {}, eam hyper {}, eam person {}",
            self.mpt_covariance_resamples.get(),
            self.eam_trial_resamples.get(),
            self.eam_hyper_resamples.get(),
            self.eam_person_resamples.get()
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    #[test]
    fn names_round_trip() {
        for f in Family::ALL {
            assert_eq!(f.name().parse::<Family>().unwrap(), f);
            let json = serde_json::to_string(&f).unwrap();
            assert_eq!(json, format!("\"{}\"", f.name()));
        }
        assert!("nope".parse::<Family>().is_err());
    }

    #[test]
    fn every_family_is_seed_deterministic_with_declared_dim() {
        let s = EamSettings::default();
        for f in Family::ALL {
            let a = f.simulate(&[4, 6], &s, 3, &mut substream(3, &[1])).unwrap();
            let b = f.simulate(&[4, 6], &s, 3, &mut substream(3, &[1])).unwrap();
            assert_eq!(a, b, "{f}");
            assert_eq!(a.dim(), f.dim());
            assert_eq!(a.group_sizes(), vec![4, 6]);
            assert_eq!(a.meta.family, f.name());
        }
    }

    #[test]
    fn empty_sizes_rejected() {
        let s = EamSettings::default();
        assert!(Family::Sdt.simulate(&[], &s, 0, &mut substream(0, &[])).is_err());
        assert!(Family::Sdt.simulate(&[3, 0], &s, 0, &mut substream(0, &[])).is_err());
    }
}

use rand::Rng;

use super::dist::{normal, normal_plus, std_normal};
use crate::summary::{DatasetMeta, HierarchicalDataset};
use crate::Result;

/// Population-level draws of the hierarchical normal models.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalHyper {
    pub mu: f64,
    pub tau2: f64,
    pub sigma2: f64,
}

/// `tau2, sigma2 ~ Normal+(0, 1)`; `mu = 0` for the fixed-location model and
/// `mu ~ Normal(0, 1)` for the free-location model.
pub fn draw_normal_hyper<R: Rng + ?Sized>(free_location: bool, rng: &mut R) -> Result<NormalHyper> {
    let tau2 = normal_plus(0.0, 1.0, rng)?;
    let sigma2 = normal_plus(0.0, 1.0, rng)?;
    let mu = if free_location { std_normal(rng) } else { 0.0 };
    Ok(NormalHyper { mu, tau2, sigma2 })
}

/// Group means `theta_m ~ Normal(mu, tau)` for every group.
pub fn draw_group_means<R: Rng + ?Sized>(hyper: &NormalHyper, groups: usize, rng: &mut R) -> Vec<f64> {
    (0..groups).map(|_| normal(hyper.mu, hyper.tau2.sqrt(), rng)).collect()
}

/// Observations `x_mn ~ Normal(theta_m, sigma)` given the group means.
pub fn simulate_normal_with<R: Rng + ?Sized>(
    theta: &[f64],
    sigma2: f64,
    sizes: &[usize],
    meta: DatasetMeta,
    rng: &mut R,
) -> Result<HierarchicalDataset> {
    let sd = sigma2.sqrt();
    let groups = theta
        .iter()
        .zip(sizes)
        .map(|(&t, &n)| (0..n).map(|_| normal(t, sd, rng)).collect())
        .collect();
    HierarchicalDataset::from_flat(1, groups, meta)
}

pub fn simulate_normal<R: Rng + ?Sized>(
    free_location: bool,
    sizes: &[usize],
    meta: DatasetMeta,
    rng: &mut R,
) -> Result<HierarchicalDataset> {
    let hyper = draw_normal_hyper(free_location, rng)?;
    let theta = draw_group_means(&hyper, sizes.len(), rng);
    simulate_normal_with(&theta, hyper.sigma2, sizes, meta, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::mean;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn degenerate_variances_collapse_to_mu() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let hyper = NormalHyper {
            mu: 0.7,
            tau2: 0.0,
            sigma2: 0.0,
        };
        let theta = draw_group_means(&hyper, 4, &mut r);
        let d = simulate_normal_with(&theta, hyper.sigma2, &[3; 4], DatasetMeta::default(), &mut r).unwrap();
        for m in 0..4 {
            assert!(d.group_values(m).iter().all(|&x| x == 0.7));
        }
    }

    #[test]
    fn group_means_converge() {
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let theta = [-1.0, 0.5, 2.0];
        let n = 100_000;
        let d = simulate_normal_with(&theta, 1.3, &[n; 3], DatasetMeta::default(), &mut r).unwrap();
        for (m, &t) in theta.iter().enumerate() {
            let tol = 3.0 * 1.3f64.sqrt() / (n as f64).sqrt();
            assert!((mean(d.group_values(m)) - t).abs() < tol);
        }
    }

    #[test]
    fn pooled_variance_matches_prior_expectation() {
        // Each observation of the fixed-location model has marginal variance
        // E[tau2 + sigma2] = 2 * E[Normal+(0, 1)] = 2 * sqrt(2 / pi).
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let mut sum_sq = 0.0;
        let mut count = 0usize;
        for _ in 0..10_000 {
            let d = simulate_normal(false, &[5; 5], DatasetMeta::default(), &mut r).unwrap();
            for m in 0..5 {
                for x in d.group_values(m) {
                    sum_sq += x * x;
                    count += 1;
                }
            }
        }
        let expected = 2.0 * (2.0 / std::f64::consts::PI).sqrt();
        let got = sum_sq / count as f64;
        assert!((got / expected - 1.0).abs() < 0.02, "{got} vs {expected}");
    }
}

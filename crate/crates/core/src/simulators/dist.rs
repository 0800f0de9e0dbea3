//! Low-level samplers shared by the simulators.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{ChiSquared, Distribution, Exp1, Gamma, StandardNormal};

use crate::stats::{phi, phi_inv};
use crate::{Error, Result};

pub fn std_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

pub fn normal<R: Rng + ?Sized>(mean: f64, sd: f64, rng: &mut R) -> f64 {
    mean + sd * std_normal(rng)
}

/// Uniform on the open interval (0, 1).
pub fn open_unit<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    loop {
        let u: f64 = rng.random();
        if u > 0.0 {
            return u;
        }
    }
}

/// Normal(`mean`, `sd`) restricted to [`lo`, `hi`] by inverse-CDF sampling.
pub fn truncated_normal<R: Rng + ?Sized>(mean: f64, sd: f64, lo: f64, hi: f64, rng: &mut R) -> Result<f64> {
    if !(sd > 0.0) || !(lo < hi) || !mean.is_finite() {
        return Err(Error::domain(format!(
            "truncated normal needs sd > 0 and lo < hi (mean {mean}, sd {sd}, [{lo}, {hi}])"
        )));
    }
    let a = (lo - mean) / sd;
    let b = (hi - mean) / sd;
    // Work in whichever tail keeps the CDF values away from 1.
    let (a, b, sign) = if a > 0.0 { (-b, -a, -1.0) } else { (a, b, 1.0) };
    let (pa, pb) = (phi(a), phi(b));
    if !(pb > pa) {
        return Err(Error::domain(format!(
            "truncation interval [{lo}, {hi}] has no mass under Normal({mean}, {sd})"
        )));
    }
    let u = pa + (pb - pa) * open_unit(rng);
    let z = phi_inv(u).clamp(a, b);
    Ok(mean + sign * sd * z)
}

/// Zero-truncated normal: Normal(`mean`, `sd`) restricted to positive values.
pub fn normal_plus<R: Rng + ?Sized>(mean: f64, sd: f64, rng: &mut R) -> Result<f64> {
    let x = truncated_normal(mean, sd, 0.0, f64::INFINITY, rng)?;
    Ok(x.max(f64::MIN_POSITIVE))
}

/// Gamma distribution parameterized by its mean and standard deviation.
pub fn gamma_mean_sd<R: Rng + ?Sized>(mean: f64, sd: f64, rng: &mut R) -> Result<f64> {
    if !(mean > 0.0) || !(sd > 0.0) {
        return Err(Error::domain(format!(
            "gamma needs positive mean and sd, got {mean}, {sd}"
        )));
    }
    let shape = (mean / sd).powi(2);
    let rate = mean / (sd * sd);
    let g = Gamma::new(shape, 1.0 / rate).map_err(|e| Error::domain(e.to_string()))?;
    Ok(g.sample(rng))
}

pub fn inv_logit(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Symmetric alpha-stable draw (skewness 0, location 0) by the
/// Chambers-Mallows-Stuck construction.
pub fn sample_alpha_stable<R: Rng + ?Sized>(alpha: f64, scale: f64, rng: &mut R) -> Result<f64> {
    if !(alpha > 0.0 && alpha <= 2.0) {
        return Err(Error::domain(format!("stability parameter {alpha} outside (0, 2]")));
    }
    if !(scale > 0.0) {
        return Err(Error::domain(format!("stable scale {scale} must be positive")));
    }
    Ok(scale * stable_unit(alpha, rng))
}

#[inline]
pub(crate) fn stable_unit<R: Rng + ?Sized>(alpha: f64, rng: &mut R) -> f64 {
    let u = PI * (open_unit(rng) - 0.5);
    let w: f64 = Exp1.sample(rng);
    if alpha == 1.0 {
        return u.tan();
    }
    let a = (alpha * u).sin() / u.cos().powf(1.0 / alpha);
    let b = ((1.0 - alpha) * u).cos() / w;
    a * b.powf((1.0 - alpha) / alpha)
}

fn check_scale(df: usize, scale: &DMatrix<f64>) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    let p = scale.nrows();
    if p == 0 || scale.ncols() != p {
        return Err(Error::domain("scale matrix must be square and non-empty"));
    }
    if df < p {
        return Err(Error::domain(format!(
            "degrees of freedom {df} must exceed dimension - 1 = {}",
            p - 1
        )));
    }
    scale
        .clone()
        .cholesky()
        .ok_or_else(|| Error::domain("scale matrix is not positive definite"))
}

/// Wishart draw via the Bartlett decomposition.
pub fn sample_wishart<R: Rng + ?Sized>(df: usize, scale: &DMatrix<f64>, rng: &mut R) -> Result<DMatrix<f64>> {
    let l = check_scale(df, scale)?.l();
    let p = scale.nrows();
    let mut a = DMatrix::<f64>::zeros(p, p);
    for i in 0..p {
        let chi = ChiSquared::new((df - i) as f64).map_err(|e| Error::domain(e.to_string()))?;
        a[(i, i)] = chi.sample(rng).sqrt();
        for j in 0..i {
            a[(i, j)] = std_normal(rng);
        }
    }
    let la = &l * a;
    let w = &la * la.transpose();
    Ok(symmetrize(w))
}

/// Inverse-Wishart draw: the inverse of a Wishart draw with the inverted scale.
pub fn sample_inverse_wishart<R: Rng + ?Sized>(df: usize, scale: &DMatrix<f64>, rng: &mut R) -> Result<DMatrix<f64>> {
    let inv_scale = check_scale(df, scale)?.inverse();
    let w = sample_wishart(df, &symmetrize(inv_scale), rng)?;
    let inv = w
        .cholesky()
        .ok_or_else(|| Error::domain("Wishart draw is singular"))?
        .inverse();
    Ok(symmetrize(inv))
}

fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    let t = m.transpose();
    (m + t) * 0.5
}

/// Uniform draw on `(-width/2, width/2)`; zero width consumes no randomness.
pub fn centered_uniform<R: Rng + ?Sized>(width: f64, rng: &mut R) -> f64 {
    if width > 0.0 {
        width * (rng.random::<f64>() - 0.5)
    } else {
        0.0
    }
}

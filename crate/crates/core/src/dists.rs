//! State-dependent distributions: gamma steps in mean/SD form, von Mises
//! turns, and the autoregressive mean constructions for both variables.

use std::f64::consts::{PI, TAU};

use rand::Rng;
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{gamma_lr, ln_gamma};

use crate::error::{Error, Result};
use crate::geometry::wrap_angle;
use crate::quadrature;

/// `ln(2π)`.
pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Below this concentration the von Mises is sampled as circular uniform.
const KAPPA_UNIFORM: f64 = 1e-8;

/// Split point between the power series and the asymptotic expansion of I₀.
const BESSEL_SPLIT: f64 = 15.0;

/// Gamma distribution parameterised by its mean and standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaMeanSd {
    pub mean: f64,
    pub sd: f64,
}

impl GammaMeanSd {
    pub fn new(mean: f64, sd: f64) -> Result<Self> {
        let d = Self { mean, sd };
        d.check()?;
        Ok(d)
    }

    fn check(&self) -> Result<()> {
        if self.mean > 0.0 && self.sd > 0.0 && self.mean.is_finite() && self.sd.is_finite() {
            Ok(())
        } else {
            Err(Error::Domain(format!(
                "gamma needs positive finite mean and sd, got mean={} sd={}",
                self.mean, self.sd
            )))
        }
    }

    pub fn shape(&self) -> f64 {
        let r = self.mean / self.sd;
        r * r
    }

    pub fn rate(&self) -> f64 {
        self.mean / (self.sd * self.sd)
    }

    pub fn ln_pdf(&self, x: f64) -> Result<f64> {
        gamma_logpdf(x, self)
    }

    pub fn cdf(&self, x: f64) -> Result<f64> {
        gamma_cdf(x, self)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        // Marsaglia–Tsang rejection sampler.
        rand_distr::Gamma::new(self.shape(), 1.0 / self.rate())
            .expect("validated gamma parameters")
            .sample(rng)
    }
}

/// Log density of the gamma with shape `(mean/sd)²` and rate `mean/sd²`.
pub fn gamma_logpdf(x: f64, d: &GammaMeanSd) -> Result<f64> {
    d.check()?;
    if !(x > 0.0 && x.is_finite()) {
        return Err(Error::Domain(format!("gamma density needs x > 0, got {x}")));
    }
    let shape = d.shape();
    let rate = d.rate();
    Ok(shape * rate.ln() - ln_gamma(shape) + (shape - 1.0) * x.ln() - rate * x)
}

/// Regularised lower incomplete gamma `P(shape, rate·x)`.
pub fn gamma_cdf(x: f64, d: &GammaMeanSd) -> Result<f64> {
    d.check()?;
    if !(x > 0.0) {
        return Err(Error::Domain(format!("gamma cdf needs x > 0, got {x}")));
    }
    if x.is_infinite() {
        return Ok(1.0);
    }
    Ok(gamma_lr(d.shape(), d.rate() * x).clamp(0.0, 1.0))
}

/// Modified Bessel function of the first kind, order zero.
pub fn bessel_i0(x: f64) -> f64 {
    let x = x.abs();
    if x < BESSEL_SPLIT {
        i0_series(x)
    } else {
        (x - 0.5 * (TAU * x).ln()).exp() * i0_asymptotic_sum(x)
    }
}

/// `ln I₀(x)`, finite for every finite `x`.
pub fn ln_bessel_i0(x: f64) -> f64 {
    let x = x.abs();
    if x < BESSEL_SPLIT {
        i0_series(x).ln()
    } else {
        x - 0.5 * (TAU * x).ln() + i0_asymptotic_sum(x).ln()
    }
}

fn i0_series(x: f64) -> f64 {
    let q = 0.25 * x * x;
    let mut term = 1.0;
    let mut sum = 1.0;
    let mut k = 1.0;
    loop {
        term *= q / (k * k);
        sum += term;
        if term < 1e-17 * sum {
            return sum;
        }
        k += 1.0;
    }
}

/// `Σ_k ((2k-1)!!)² / (k! (8x)^k)`, truncated at the smallest term.
fn i0_asymptotic_sum(x: f64) -> f64 {
    let mut term = 1.0;
    let mut sum = 1.0;
    let mut k = 0.0;
    loop {
        let next = term * (2.0 * k + 1.0) * (2.0 * k + 1.0) / (8.0 * x * (k + 1.0));
        if next >= term || next < 1e-17 * sum {
            return sum;
        }
        term = next;
        sum += term;
        k += 1.0;
    }
}

/// `I₁(x) / I₀(x)`, the derivative of `ln I₀`.
pub fn bessel_i1_i0_ratio(x: f64) -> f64 {
    if x < 0.0 {
        return -bessel_i1_i0_ratio(-x);
    }
    if x < BESSEL_SPLIT {
        i1_series(x) / i0_series(x)
    } else {
        i1_asymptotic_sum(x) / i0_asymptotic_sum(x)
    }
}

fn i1_series(x: f64) -> f64 {
    let q = 0.25 * x * x;
    let mut term = 0.5 * x;
    let mut sum = term;
    let mut k = 0.0;
    loop {
        term *= q / ((k + 1.0) * (k + 2.0));
        sum += term;
        if term <= 1e-17 * sum {
            return sum;
        }
        k += 1.0;
    }
}

/// Asymptotic series of `I₁` without the `eˣ/√(2πx)` factor.
fn i1_asymptotic_sum(x: f64) -> f64 {
    let mut term = 1.0f64;
    let mut sum = 1.0f64;
    let mut k = 0.0;
    loop {
        let m = 2.0 * k + 1.0;
        let next = term * (m * m - 4.0) / (8.0 * x * (k + 1.0));
        if next.abs() >= term.abs() || next.abs() < 1e-17 * sum.abs() {
            return sum;
        }
        term = next;
        sum += term;
        k += 1.0;
    }
}

/// Von Mises distribution on `(-π, π]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VonMises {
    pub mu: f64,
    pub kappa: f64,
}

impl VonMises {
    /// The mean direction is wrapped into `(-π, π]`.
    pub fn new(mu: f64, kappa: f64) -> Result<Self> {
        if !mu.is_finite() {
            return Err(Error::Domain(format!("von Mises mean must be finite, got {mu}")));
        }
        let d = Self {
            mu: wrap_angle(mu),
            kappa,
        };
        d.check()?;
        Ok(d)
    }

    fn check(&self) -> Result<()> {
        if self.kappa >= 0.0 && self.kappa.is_finite() {
            Ok(())
        } else {
            Err(Error::Domain(format!(
                "von Mises concentration must be finite and >= 0, got {}",
                self.kappa
            )))
        }
    }

    /// `ln(2π I₀(κ)) - κ`; subtracting κ keeps the density evaluation
    /// overflow-free for large concentrations.
    fn ln_norm_scaled(&self) -> f64 {
        LN_2PI + ln_bessel_i0(self.kappa) - self.kappa
    }

    pub fn ln_pdf(&self, x: f64) -> Result<f64> {
        vonmises_logpdf(x, self)
    }

    pub fn cdf(&self, x: f64) -> Result<f64> {
        vonmises_cdf(x, self)
    }

    /// Best–Fisher rejection sampler.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.kappa < KAPPA_UNIFORM {
            return wrap_angle(rng.gen_range(-PI..PI));
        }
        let k = self.kappa;
        let tau = 1.0 + (1.0 + 4.0 * k * k).sqrt();
        let rho = (tau - (2.0 * tau).sqrt()) / (2.0 * k);
        let r = (1.0 + rho * rho) / (2.0 * rho);
        loop {
            let u1: f64 = rng.gen();
            let u2: f64 = rng.gen();
            let u3: f64 = rng.gen();
            let z = (PI * u1).cos();
            let f = (1.0 + r * z) / (r + z);
            let c = k * (r - f);
            if c * (2.0 - c) - u2 > 0.0 || (c / u2).ln() + 1.0 - c >= 0.0 {
                let theta = f.clamp(-1.0, 1.0).acos();
                let theta = if u3 > 0.5 { theta } else { -theta };
                return wrap_angle(self.mu + theta);
            }
        }
    }
}

/// `ln[exp(κ cos(x-μ)) / (2π I₀(κ))]`.
pub fn vonmises_logpdf(x: f64, d: &VonMises) -> Result<f64> {
    d.check()?;
    if !x.is_finite() {
        return Err(Error::Domain(format!("angle must be finite, got {x}")));
    }
    Ok(d.kappa * ((x - d.mu).cos() - 1.0) - d.ln_norm_scaled())
}

/// Mass on `(-π, x]`, by adaptive quadrature to absolute tolerance 1e-10.
pub fn vonmises_cdf(x: f64, d: &VonMises) -> Result<f64> {
    d.check()?;
    if !(x >= -PI && x <= PI) {
        return Err(Error::Domain(format!("angle {x} lies outside (-pi, pi]")));
    }
    if x == PI {
        return Ok(1.0);
    }
    if x == -PI {
        return Ok(0.0);
    }
    let (k, mu, c) = (d.kappa, d.mu, d.ln_norm_scaled());
    let density = |t: f64| (k * ((t - mu).cos() - 1.0) - c).exp();
    // Split at the mode so the peak never hides between quadrature nodes.
    let mode = if mu > -PI && mu < x { Some(mu) } else { None };
    let v = match mode {
        Some(m) => {
            quadrature::integrate(density, -PI, m, 0.5e-10)
                + quadrature::integrate(density, m, x, 0.5e-10)
        }
        None => quadrature::integrate(density, -PI, x, 1e-10),
    };
    Ok(v.clamp(0.0, 1.0))
}

fn check_lengths(history: &[f64], phi: &[f64]) -> Result<()> {
    if history.len() == phi.len() {
        Ok(())
    } else {
        Err(Error::Argument(format!(
            "history has {} values but there are {} AR coefficients",
            history.len(),
            phi.len()
        )))
    }
}

/// Autoregressive step mean `Σ φ_k x_{t-k} + (1 - Σ φ_k) μ`.
///
/// `history[0]` is the most recent observation `x_{t-1}`.
pub fn ar_step_mean(history: &[f64], phi: &[f64], mu_steady: f64) -> Result<f64> {
    check_lengths(history, phi)?;
    let mut total = 0.0;
    let mut mean = 0.0;
    for (x, p) in history.iter().zip(phi) {
        total += p;
        mean += p * x;
    }
    Ok(mean + (1.0 - total) * mu_steady)
}

/// Autoregressive turn mean: the argument of the convex combination of the
/// unit vectors of past turns and of the steady-state direction.
///
/// Falls back to `mu_steady` when the resultant has modulus below 1e-12.
/// `history[0]` is the most recent turn.
pub fn ar_turn_mean(history: &[f64], phi: &[f64], mu_steady: f64) -> Result<f64> {
    check_lengths(history, phi)?;
    let mut total = 0.0;
    let (mut re, mut im) = (0.0, 0.0);
    for (x, p) in history.iter().zip(phi) {
        total += p;
        re += p * x.cos();
        im += p * x.sin();
    }
    re += (1.0 - total) * mu_steady.cos();
    im += (1.0 - total) * mu_steady.sin();
    if re.hypot(im) < 1e-12 {
        return Ok(mu_steady);
    }
    Ok(wrap_angle(im.atan2(re)))
}

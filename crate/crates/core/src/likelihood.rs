//! Partially penalised conditional log-likelihood.
//!
//! Each state's step factor is replaced by one while `t ≤ p_j^step` and its
//! turn factor while `t ≤ p_j^turn`; the two windows switch on
//! independently. The forward recursion starts from the stationary
//! distribution of the transition matrix, renormalises every step, and
//! accumulates the log of the scale factors.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use nalgebra::{DMatrix, DVector};
use statrs::function::gamma::{digamma, ln_gamma};

use crate::dists::{ar_step_mean, ar_turn_mean, gamma_logpdf, vonmises_logpdf, GammaMeanSd, VonMises, LN_2PI};
use crate::dists::{bessel_i1_i0_ratio, ln_bessel_i0};
use crate::error::{Error, Result};
use crate::geometry::StepTurnSeries;
use crate::model::{from_working, stationary_dist, ModelSpec, Parameters};

/// Several independent tracks sharing one parameter set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PooledData {
    pub series: Vec<StepTurnSeries>,
}

impl PooledData {
    pub fn new(series: Vec<StepTurnSeries>) -> Result<Self> {
        if series.is_empty() {
            return Err(Error::Structure("no tracks supplied".into()));
        }
        if let Some(s) = series.iter().find(|s| s.is_empty()) {
            return Err(Error::Structure(format!("track '{}' is empty", s.track_id)));
        }
        Ok(Self { series })
    }

    pub fn single(series: StepTurnSeries) -> Result<Self> {
        Self::new(vec![series])
    }

    /// Total number of (step, turn) pairs over all tracks.
    pub fn total_len(&self) -> usize {
        self.series.iter().map(StepTurnSeries::len).sum()
    }

    pub fn shortest(&self) -> usize {
        self.series.iter().map(StepTurnSeries::len).min().unwrap_or(0)
    }
}

/// Lasso weight and smoothing constant of the penalty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PenaltyConfig {
    pub lambda: f64,
    pub epsilon: f64,
}

impl Default for PenaltyConfig {
    fn default() -> Self {
        Self {
            lambda: 0.0,
            epsilon: 1e-6,
        }
    }
}

impl PenaltyConfig {
    pub fn new(lambda: f64, epsilon: f64) -> Result<Self> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::Argument(format!("lambda must be >= 0, got {lambda}")));
        }
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(Error::Argument(format!("epsilon must be > 0, got {epsilon}")));
        }
        Ok(Self { lambda, epsilon })
    }

    pub fn with_lambda(lambda: f64) -> Result<Self> {
        Self::new(lambda, Self::default().epsilon)
    }
}

/// Smooth stand-in for `|x|`: `sqrt(x² + ε²)`.
pub fn smooth_l1(x: f64, epsilon: f64) -> f64 {
    x.hypot(epsilon)
}

/// `λ Σ smooth_l1(φ)` over every AR coefficient of both variables.
pub fn penalty(params: &Parameters, pen: &PenaltyConfig) -> f64 {
    if pen.lambda == 0.0 {
        return 0.0;
    }
    let total: f64 = params
        .phi_step
        .iter()
        .chain(&params.phi_turn)
        .flatten()
        .map(|&v| smooth_l1(v, pen.epsilon))
        .sum();
    pen.lambda * total
}

fn check_time(series: &StepTurnSeries, t: usize, j: usize, spec: &ModelSpec) -> Result<()> {
    if t == 0 || t > series.len() {
        return Err(Error::Argument(format!(
            "time index {t} outside 1..={}",
            series.len()
        )));
    }
    if j >= spec.n_states {
        return Err(Error::Argument(format!("state {j} outside 0..{}", spec.n_states)));
    }
    Ok(())
}

/// Log of the state-`j` factor at time `t` (1-based; `j` is 0-based),
/// evaluated through the distribution objects. Reference path for the
/// fast kernel used in estimation.
pub fn log_state_density(
    series: &StepTurnSeries,
    params: &Parameters,
    spec: &ModelSpec,
    t: usize,
    j: usize,
) -> Result<f64> {
    check_time(series, t, j, spec)?;
    let i = t - 1;
    let mut out = 0.0;
    let ps = spec.p_step[j];
    if i >= ps {
        let hist: Vec<f64> = (1..=ps).map(|k| series.steps[i - k]).collect();
        let mean = ar_step_mean(&hist, &params.phi_step[j], params.mu_step[j])?;
        let d = GammaMeanSd::new(mean, params.cv_step[j] * mean)?;
        out += gamma_logpdf(series.steps[i], &d)?;
    }
    let pt = spec.p_turn[j];
    if i >= pt {
        let hist: Vec<f64> = (1..=pt).map(|k| series.turns[i - k]).collect();
        let mean = ar_turn_mean(&hist, &params.phi_turn[j], params.mu_turn[j])?;
        let d = VonMises::new(mean, params.kappa_turn[j])?;
        out += vonmises_logpdf(series.turns[i], &d)?;
    }
    Ok(out)
}

/// The state-`j` factor of the diagonal matrix at time `t` (1-based).
pub fn state_density(
    series: &StepTurnSeries,
    params: &Parameters,
    spec: &ModelSpec,
    t: usize,
    j: usize,
) -> Result<f64> {
    log_state_density(series, params, spec, t, j).map(f64::exp)
}

/// Per-series quantities that do not depend on the parameters.
#[derive(Debug, Clone)]
pub(crate) struct SeriesCache {
    pub steps: Vec<f64>,
    pub ln_steps: Vec<f64>,
    pub turns: Vec<f64>,
    pub cos_turns: Vec<f64>,
    pub sin_turns: Vec<f64>,
}

impl SeriesCache {
    pub fn new(s: &StepTurnSeries) -> Self {
        Self {
            steps: s.steps.clone(),
            ln_steps: s.steps.iter().map(|x| x.ln()).collect(),
            turns: s.turns.clone(),
            cos_turns: s.turns.iter().map(|x| x.cos()).collect(),
            sin_turns: s.turns.iter().map(|x| x.sin()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }
}

/// Per-state constants of the state-dependent densities.
#[derive(Debug, Clone)]
struct StateTerms {
    p_step: usize,
    p_turn: usize,
    mu_step: f64,
    step_total: f64,
    turn_total: f64,
    phi_step: Vec<f64>,
    phi_turn: Vec<f64>,
    step_slack_mean: f64,
    shape: f64,
    ln_shape: f64,
    ln_gamma_shape: f64,
    turn_slack_re: f64,
    turn_slack_im: f64,
    mu_turn: f64,
    kappa: f64,
    ln_norm_scaled: f64,
}

/// Everything the forward pass needs, precomputed from one parameter set.
#[derive(Debug, Clone)]
pub(crate) struct Kernel {
    pub n: usize,
    pub tpm: Vec<Vec<f64>>,
    pub delta: Vec<f64>,
    states: Vec<StateTerms>,
}

impl Kernel {
    pub fn new(params: &Parameters, spec: &ModelSpec) -> Result<Self> {
        let delta = stationary_dist(&params.tpm)?;
        let states = (0..spec.n_states)
            .map(|j| {
                let cv = params.cv_step[j];
                let shape = 1.0 / (cv * cv);
                let step_total: f64 = params.phi_step[j].iter().sum();
                let turn_total: f64 = params.phi_turn[j].iter().sum();
                let mu_turn = params.mu_turn[j];
                let kappa = params.kappa_turn[j];
                StateTerms {
                    p_step: spec.p_step[j],
                    p_turn: spec.p_turn[j],
                    mu_step: params.mu_step[j],
                    step_total,
                    turn_total,
                    phi_step: params.phi_step[j].clone(),
                    phi_turn: params.phi_turn[j].clone(),
                    step_slack_mean: (1.0 - step_total) * params.mu_step[j],
                    shape,
                    ln_shape: shape.ln(),
                    ln_gamma_shape: ln_gamma(shape),
                    turn_slack_re: (1.0 - turn_total) * mu_turn.cos(),
                    turn_slack_im: (1.0 - turn_total) * mu_turn.sin(),
                    mu_turn,
                    kappa,
                    ln_norm_scaled: LN_2PI + ln_bessel_i0(kappa) - kappa,
                }
            })
            .collect();
        Ok(Self {
            n: spec.n_states,
            tpm: params.tpm.clone(),
            delta,
            states,
        })
    }

    /// Fills `out` (row-major, `T × N`) with log state factors.
    pub fn log_densities(&self, c: &SeriesCache, out: &mut Vec<f64>) {
        let n = self.n;
        let len = c.len();
        out.clear();
        out.resize(len * n, 0.0);
        for (j, st) in self.states.iter().enumerate() {
            for i in st.p_step..len {
                let mut mean = st.step_slack_mean;
                for (k, p) in st.phi_step.iter().enumerate() {
                    mean += p * c.steps[i - 1 - k];
                }
                let ln_mean = mean.ln();
                // shape·ln(rate) - lnΓ(shape) + (shape-1)·ln x - rate·x, rate = shape/mean
                out[i * n + j] += st.shape * (st.ln_shape - ln_mean) - st.ln_gamma_shape
                    + (st.shape - 1.0) * c.ln_steps[i]
                    - st.shape * c.steps[i] / mean;
            }
            for i in st.p_turn..len {
                let (mut re, mut im) = (st.turn_slack_re, st.turn_slack_im);
                for (k, p) in st.phi_turn.iter().enumerate() {
                    re += p * c.cos_turns[i - 1 - k];
                    im += p * c.sin_turns[i - 1 - k];
                }
                let r = re.hypot(im);
                let cos_dev = if r < 1e-12 {
                    (c.turns[i] - st.mu_turn).cos()
                } else {
                    (c.cos_turns[i] * re + c.sin_turns[i] * im) / r
                };
                out[i * n + j] += st.kappa * (cos_dev - 1.0) - st.ln_norm_scaled;
            }
        }
    }

    /// Scaled forward pass over precomputed log factors. When `predictive`
    /// is given it receives the one-step-ahead state probabilities
    /// `Pr(S_t = j | x_1..x_{t-1})`, row-major.
    pub fn forward(
        &self,
        logd: &[f64],
        track: usize,
        mut predictive: Option<&mut Vec<f64>>,
    ) -> Result<f64> {
        let n = self.n;
        let len = logd.len() / n;
        let mut alpha = self.delta.clone();
        let mut pred = vec![0.0; n];
        let mut ll = 0.0;
        if let Some(p) = predictive.as_deref_mut() {
            p.clear();
            p.reserve(len * n);
        }
        for t in 0..len {
            if t == 0 {
                pred.copy_from_slice(&alpha);
            } else {
                for (b, pb) in pred.iter_mut().enumerate() {
                    *pb = alpha.iter().zip(&self.tpm).map(|(a, row)| a * row[b]).sum();
                }
            }
            if let Some(p) = predictive.as_deref_mut() {
                p.extend_from_slice(&pred);
            }
            let row = &logd[t * n..(t + 1) * n];
            let mut max = f64::NEG_INFINITY;
            for (j, &l) in row.iter().enumerate() {
                if l.is_nan() || l == f64::INFINITY {
                    return Err(Error::NonFiniteDensity { track, t: t + 1, state: j });
                }
                max = max.max(l);
            }
            if max == f64::NEG_INFINITY {
                return Err(Error::NonFiniteDensity { track, t: t + 1, state: 0 });
            }
            let mut scale = 0.0;
            for j in 0..n {
                alpha[j] = pred[j] * (row[j] - max).exp();
                scale += alpha[j];
            }
            if !(scale > 0.0 && scale.is_finite()) {
                return Err(Error::Numeric(format!(
                    "forward recursion collapsed in track {track} at t = {}",
                    t + 1
                )));
            }
            alpha.iter_mut().for_each(|a| *a /= scale);
            ll += scale.ln() + max;
        }
        Ok(ll)
    }
}

fn sum_tracks(kernel: &Kernel, caches: &[SeriesCache]) -> Result<f64> {
    let eval = |(track, c): (usize, &SeriesCache)| {
        let mut buf = Vec::new();
        kernel.log_densities(c, &mut buf);
        kernel.forward(&buf, track, None)
    };
    if caches.len() == 1 {
        return eval((0, &caches[0]));
    }
    let per_track: Vec<Result<f64>> = caches.par_iter().enumerate().map(eval).collect();
    per_track.into_iter().sum()
}

/// Unpenalised conditional log-likelihood, summed over tracks.
pub fn cond_loglik(data: &PooledData, params: &Parameters, spec: &ModelSpec) -> Result<f64> {
    params.validate(spec)?;
    let kernel = Kernel::new(params, spec)?;
    let caches: Vec<SeriesCache> = data.series.iter().map(SeriesCache::new).collect();
    sum_tracks(&kernel, &caches)
}

/// Conditional log-likelihood minus `λ Σ smooth_l1(φ)`.
pub fn penalized_cond_loglik(
    data: &PooledData,
    params: &Parameters,
    spec: &ModelSpec,
    pen: &PenaltyConfig,
) -> Result<f64> {
    Ok(cond_loglik(data, params, spec)? - penalty(params, pen))
}

/// Number of conditional-likelihood time points: per track, the length
/// minus the largest degree in the spec.
pub fn effective_obs(data: &PooledData, spec: &ModelSpec) -> usize {
    let p = spec.max_degree();
    data.series.iter().map(|s| s.len().saturating_sub(p)).sum()
}

/// The penalised objective as a function of the working vector, with its
/// analytic gradient.
pub struct Objective {
    caches: Vec<SeriesCache>,
    spec: ModelSpec,
    pen: PenaltyConfig,
}

impl Objective {
    pub fn new(data: &PooledData, spec: &ModelSpec, pen: &PenaltyConfig) -> Result<Self> {
        spec.validate()?;
        Ok(Self {
            caches: data.series.iter().map(SeriesCache::new).collect(),
            spec: spec.clone(),
            pen: *pen,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn penalty_config(&self) -> &PenaltyConfig {
        &self.pen
    }

    /// Penalised conditional log-likelihood at working point `w`.
    pub fn value(&self, w: &[f64]) -> Result<f64> {
        let params = from_working(w, &self.spec)?;
        let kernel = Kernel::new(&params, &self.spec)?;
        Ok(sum_tracks(&kernel, &self.caches)? - penalty(&params, &self.pen))
    }

    /// Value with every failure mapped to `-∞`.
    pub fn value_or_neg_inf(&self, w: &[f64]) -> f64 {
        match self.value(w) {
            Ok(v) if v.is_finite() => v,
            _ => f64::NEG_INFINITY,
        }
    }

    /// Objective value and exact gradient at `w`.
    pub fn value_and_gradient(&self, w: &[f64]) -> Result<(f64, Vec<f64>)> {
        objective_with_gradient(w, &self.spec, &self.caches, &self.pen)
    }

    /// Exact gradient; all NaN where the objective is undefined.
    pub fn gradient(&self, w: &[f64]) -> Vec<f64> {
        match self.value_and_gradient(w) {
            Ok((v, g)) if v.is_finite() => g,
            _ => vec![f64::NAN; w.len()],
        }
    }

    /// Derivatives of the unpenalised log-likelihood with respect to each
    /// natural AR coefficient (step rows, then turn rows), holding the other
    /// coefficients of the row fixed.
    pub fn ar_score(&self, w: &[f64]) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        let params = from_working(w, &self.spec)?;
        let kernel = Kernel::new(&params, &self.spec)?;
        let total = total_score(&kernel, &self.caches)?;
        Ok((total.phi_step, total.phi_turn))
    }

    /// Central differences with step `1e-6 · max(1, |w_i|)`.
    pub fn gradient_fd(&self, w: &[f64]) -> Vec<f64> {
        (0..w.len())
            .into_par_iter()
            .map(|i| {
                let h = 1e-6 * w[i].abs().max(1.0);
                let mut x = w.to_vec();
                x[i] = w[i] + h;
                let up = self.value_or_neg_inf(&x);
                x[i] = w[i] - h;
                let down = self.value_or_neg_inf(&x);
                (up - down) / (2.0 * h)
            })
            .collect()
    }
}

/// Score contributions of one or more tracks, in natural coordinates
/// (log scale for positive parameters).
#[derive(Debug, Clone)]
struct Score {
    ll: f64,
    /// Expected transition counts, row-major `N × N`.
    xi: Vec<f64>,
    /// Derivative of the log-likelihood with respect to `δ`.
    d_delta: Vec<f64>,
    log_mu_step: Vec<f64>,
    log_cv_step: Vec<f64>,
    mu_turn: Vec<f64>,
    log_kappa: Vec<f64>,
    phi_step: Vec<Vec<f64>>,
    phi_turn: Vec<Vec<f64>>,
}

impl Score {
    fn zeros(k: &Kernel) -> Self {
        let n = k.n;
        Self {
            ll: 0.0,
            xi: vec![0.0; n * n],
            d_delta: vec![0.0; n],
            log_mu_step: vec![0.0; n],
            log_cv_step: vec![0.0; n],
            mu_turn: vec![0.0; n],
            log_kappa: vec![0.0; n],
            phi_step: k.states.iter().map(|s| vec![0.0; s.p_step]).collect(),
            phi_turn: k.states.iter().map(|s| vec![0.0; s.p_turn]).collect(),
        }
    }

    fn add(mut self, o: &Score) -> Self {
        let acc = |a: &mut [f64], b: &[f64]| a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        self.ll += o.ll;
        acc(&mut self.xi, &o.xi);
        acc(&mut self.d_delta, &o.d_delta);
        acc(&mut self.log_mu_step, &o.log_mu_step);
        acc(&mut self.log_cv_step, &o.log_cv_step);
        acc(&mut self.mu_turn, &o.mu_turn);
        acc(&mut self.log_kappa, &o.log_kappa);
        for (a, b) in self.phi_step.iter_mut().zip(&o.phi_step) {
            acc(a, b);
        }
        for (a, b) in self.phi_turn.iter_mut().zip(&o.phi_turn) {
            acc(a, b);
        }
        self
    }
}

impl Kernel {
    /// Log-likelihood and score of one track via scaled forward-backward
    /// posteriors: the derivative of `ln L` is the posterior expectation of
    /// the derivative of the complete-data log-likelihood.
    fn score(&self, c: &SeriesCache, track: usize) -> Result<Score> {
        let n = self.n;
        let len = c.len();
        let mut logd = Vec::new();
        self.log_densities(c, &mut logd);

        // Forward pass keeping the normalised filter, the shifted factors
        // and the scales.
        let mut e = vec![0.0; len * n];
        let mut alpha = vec![0.0; len * n];
        let mut scale = vec![0.0; len];
        let mut pred = self.delta.clone();
        let mut out = Score::zeros(self);
        for t in 0..len {
            if t > 0 {
                for b in 0..n {
                    pred[b] = (0..n).map(|a| alpha[(t - 1) * n + a] * self.tpm[a][b]).sum();
                }
            }
            let row = &logd[t * n..(t + 1) * n];
            let mut max = f64::NEG_INFINITY;
            for (j, &l) in row.iter().enumerate() {
                if l.is_nan() || l == f64::INFINITY {
                    return Err(Error::NonFiniteDensity { track, t: t + 1, state: j });
                }
                max = max.max(l);
            }
            if max == f64::NEG_INFINITY {
                return Err(Error::NonFiniteDensity { track, t: t + 1, state: 0 });
            }
            let mut s = 0.0;
            for j in 0..n {
                e[t * n + j] = (row[j] - max).exp();
                alpha[t * n + j] = pred[j] * e[t * n + j];
                s += alpha[t * n + j];
            }
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::Numeric(format!(
                    "forward recursion collapsed in track {track} at t = {}",
                    t + 1
                )));
            }
            alpha[t * n..(t + 1) * n].iter_mut().for_each(|a| *a /= s);
            scale[t] = s;
            out.ll += s.ln() + max;
        }

        // Backward pass; posterior state probabilities overwrite `alpha`.
        let mut beta = vec![1.0; n];
        let mut next = vec![0.0; n];
        let mut w = vec![0.0; n];
        for t in (0..len).rev() {
            if t + 1 < len {
                for j in 0..n {
                    w[j] = e[(t + 1) * n + j] * beta[j] / scale[t + 1];
                }
                for i in 0..n {
                    let a = alpha[t * n + i];
                    let mut b = 0.0;
                    for j in 0..n {
                        let f = self.tpm[i][j] * w[j];
                        out.xi[i * n + j] += a * f;
                        b += f;
                    }
                    next[i] = b;
                }
                std::mem::swap(&mut beta, &mut next);
            }
            for j in 0..n {
                alpha[t * n + j] *= beta[j];
            }
        }
        for j in 0..n {
            out.d_delta[j] = e[j] * beta[j] / scale[0];
        }
        let post = alpha;

        for (j, st) in self.states.iter().enumerate() {
            let shape = st.shape;
            let dig = digamma(shape);
            for i in st.p_step..len {
                let g = post[i * n + j];
                if g == 0.0 {
                    continue;
                }
                let mut mean = st.step_slack_mean;
                for (k, p) in st.phi_step.iter().enumerate() {
                    mean += p * c.steps[i - 1 - k];
                }
                let x = c.steps[i];
                let d_mean = shape * (x - mean) / (mean * mean);
                out.log_mu_step[j] += g * d_mean * (1.0 - st.step_total) * st.mu_step;
                let d_shape = st.ln_shape + 1.0 - mean.ln() - dig + c.ln_steps[i] - x / mean;
                out.log_cv_step[j] += g * d_shape * (-2.0 * shape);
                for k in 0..st.p_step {
                    out.phi_step[j][k] += g * d_mean * (c.steps[i - 1 - k] - st.mu_step);
                }
            }

            let ratio = bessel_i1_i0_ratio(st.kappa);
            let (cos_mu, sin_mu) = (st.mu_turn.cos(), st.mu_turn.sin());
            for i in st.p_turn..len {
                let g = post[i * n + j];
                if g == 0.0 {
                    continue;
                }
                let (mut re, mut im) = (st.turn_slack_re, st.turn_slack_im);
                for (k, p) in st.phi_turn.iter().enumerate() {
                    re += p * c.cos_turns[i - 1 - k];
                    im += p * c.sin_turns[i - 1 - k];
                }
                let r2 = re * re + im * im;
                let (cx, sx) = (c.cos_turns[i], c.sin_turns[i]);
                if r2.sqrt() < 1e-12 {
                    let dev = c.turns[i] - st.mu_turn;
                    out.log_kappa[j] += g * (dev.cos() - ratio) * st.kappa;
                    out.mu_turn[j] += g * st.kappa * dev.sin();
                    continue;
                }
                let r = r2.sqrt();
                let cos_dev = (cx * re + sx * im) / r;
                let sin_dev = (sx * re - cx * im) / r;
                out.log_kappa[j] += g * (cos_dev - ratio) * st.kappa;
                // d Arg(z) = (re dIm - im dRe) / |z|²
                let d_mean = g * st.kappa * sin_dev / r2;
                let slack = 1.0 - st.turn_total;
                out.mu_turn[j] += d_mean * slack * (re * cos_mu + im * sin_mu);
                for k in 0..st.p_turn {
                    let d_re = c.cos_turns[i - 1 - k] - cos_mu;
                    let d_im = c.sin_turns[i - 1 - k] - sin_mu;
                    out.phi_turn[j][k] += d_mean * (re * d_im - im * d_re);
                }
            }
        }
        Ok(out)
    }
}

fn total_score(kernel: &Kernel, caches: &[SeriesCache]) -> Result<Score> {
    let parts: Vec<Result<Score>> = if caches.len() == 1 {
        vec![kernel.score(&caches[0], 0)]
    } else {
        caches.par_iter().enumerate().map(|(i, c)| kernel.score(c, i)).collect()
    };
    let mut total = Score::zeros(kernel);
    for p in parts {
        total = total.add(&p?);
    }
    Ok(total)
}

/// Penalised objective and its gradient with respect to the working vector.
fn objective_with_gradient(
    w: &[f64],
    spec: &ModelSpec,
    caches: &[SeriesCache],
    pen: &PenaltyConfig,
) -> Result<(f64, Vec<f64>)> {
    let params = from_working(w, spec)?;
    let kernel = Kernel::new(&params, spec)?;
    let total = total_score(&kernel, caches)?;

    let n = spec.n_states;
    let mut grad = Vec::with_capacity(w.len());
    if n > 1 {
        // dδ = δ dΓ A⁻¹ with A = I - Γ + U, so d ln L / dΓ_ab = δ_a u_b
        // where A u = d ln L / dδ.
        let a = DMatrix::from_fn(n, n, |i, j| {
            (if i == j { 1.0 } else { 0.0 }) - params.tpm[i][j] + 1.0
        });
        let u = a
            .lu()
            .solve(&DVector::from_column_slice(&total.d_delta))
            .ok_or_else(|| Error::Numeric("singular stationary system".into()))?;
        for i in 0..n {
            let row = &params.tpm[i];
            let xi_row = &total.xi[i * n..(i + 1) * n];
            let xi_sum: f64 = xi_row.iter().sum();
            let u_mean: f64 = row.iter().zip(u.iter()).map(|(g, v)| g * v).sum();
            for l in (0..n).filter(|&l| l != i) {
                grad.push(xi_row[l] - row[l] * xi_sum + kernel.delta[i] * row[l] * (u[l] - u_mean));
            }
        }
    }
    grad.extend_from_slice(&total.log_mu_step);
    grad.extend_from_slice(&total.log_cv_step);
    grad.extend_from_slice(&total.mu_turn);
    grad.extend_from_slice(&total.log_kappa);
    for (rows, phis) in [(&total.phi_step, &params.phi_step), (&total.phi_turn, &params.phi_turn)] {
        for (g_row, phi) in rows.iter().zip(phis) {
            let g: Vec<f64> = g_row
                .iter()
                .zip(phi)
                .map(|(g, v)| g - pen.lambda * v / smooth_l1(*v, pen.epsilon))
                .collect();
            let mean: f64 = g.iter().zip(phi).map(|(a, b)| a * b).sum();
            grad.extend(g.iter().zip(phi).map(|(gl, pl)| pl * (gl - mean)));
        }
    }
    Ok((total.ll - penalty(&params, pen), grad))
}

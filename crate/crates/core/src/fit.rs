//! Multi-start penalised maximum likelihood, the λ path, information
//! criteria, and rounding-based degree selection.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decode::{decoding_accuracy, viterbi, StateSequence};
use crate::error::{Error, Result};
use crate::likelihood::{cond_loglik, effective_obs, penalty, Objective, PenaltyConfig, PooledData};
use crate::model::{from_working, to_working, ModelSpec, Parameters};
use crate::optim::{minimize, newton_polish, LbfgsConfig, Minimum};

/// Starts whose objective is this close to the best count as agreeing.
pub const AGREEMENT_TOL: f64 = 1e-3;

/// Sampling intervals for random starting values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StartRanges {
    /// Quantile levels of the pooled steps assigned to the lowest and
    /// highest state; states in between are spaced evenly.
    pub step_quantiles: (f64, f64),
    /// Uniform jitter added to each quantile level.
    pub quantile_jitter: f64,
    pub cv: (f64, f64),
    pub kappa: (f64, f64),
    /// `mu_turn` is drawn from `(-w, w)`.
    pub mu_turn_halfwidth: f64,
    pub tpm_diag: (f64, f64),
    /// Total AR mass of each row before it is split over lags.
    pub phi_mass: (f64, f64),
}

impl Default for StartRanges {
    fn default() -> Self {
        Self {
            step_quantiles: (0.2, 0.8),
            quantile_jitter: 0.1,
            cv: (0.1, 0.8),
            kappa: (0.5, 15.0),
            mu_turn_halfwidth: 0.1,
            tpm_diag: (0.7, 0.95),
            phi_mass: (0.0, 0.7),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub n_starts: usize,
    pub max_iters: usize,
    pub tol: f64,
    pub seed: u64,
    pub start_ranges: StartRanges,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            n_starts: 10,
            max_iters: 2000,
            tol: 1e-8,
            seed: 0,
            start_ranges: StartRanges::default(),
        }
    }
}

/// Outcome of one optimisation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StartOutcome {
    /// `true` for caller-supplied starts.
    pub supplied: bool,
    pub objective: Option<f64>,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    /// States sorted by ascending `mu_step`.
    pub params: Parameters,
    /// The fitted spec in the same (sorted) state order.
    pub spec: ModelSpec,
    /// `state_order[k]` is the state index, before sorting, of state `k`.
    pub state_order: Vec<usize>,
    /// Steady-state step SDs, `cv_step · mu_step`.
    pub sd_step: Vec<f64>,
    /// Unpenalised conditional log-likelihood.
    pub loglik: f64,
    pub penalized_objective: f64,
    pub lambda: f64,
    pub converged: bool,
    pub n_starts_agreeing: usize,
    pub aic: f64,
    pub bic: f64,
    pub edf: usize,
    /// Number of conditional-likelihood time points used in the BIC.
    pub n_eff: usize,
    pub starts: Vec<StartOutcome>,
}

impl FitResult {
    /// The parameters in the state order of the spec that was fitted.
    pub fn params_in_fit_order(&self) -> Parameters {
        let mut inverse = vec![0; self.state_order.len()];
        for (k, &old) in self.state_order.iter().enumerate() {
            inverse[old] = k;
        }
        self.params.permute(&inverse)
    }
}

fn uniform<R: Rng>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

/// Flat Dirichlet weights of length `n`.
fn simplex<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    let e: Vec<f64> = (0..n).map(|_| -(1.0 - rng.gen::<f64>()).ln()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

fn quantile(sorted: &[f64], level: f64) -> f64 {
    let pos = level.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Random starting parameters.
pub fn random_start<R: Rng>(
    data: &PooledData,
    spec: &ModelSpec,
    ranges: &StartRanges,
    rng: &mut R,
) -> Parameters {
    let n = spec.n_states;
    let mut steps: Vec<f64> = data.series.iter().flat_map(|s| s.steps.iter().copied()).collect();
    steps.sort_by(f64::total_cmp);
    let (q_lo, q_hi) = ranges.step_quantiles;

    let mut tpm = vec![vec![0.0; n]; n];
    let mut mu_step = Vec::with_capacity(n);
    let mut cv_step = Vec::with_capacity(n);
    let mut mu_turn = Vec::with_capacity(n);
    let mut kappa_turn = Vec::with_capacity(n);
    for j in 0..n {
        let base = if n == 1 {
            0.5 * (q_lo + q_hi)
        } else {
            q_lo + (q_hi - q_lo) * j as f64 / (n - 1) as f64
        };
        let jitter = uniform(rng, (-ranges.quantile_jitter, ranges.quantile_jitter));
        mu_step.push(quantile(&steps, (base + jitter).clamp(0.02, 0.98)));
        cv_step.push(uniform(rng, ranges.cv));
        kappa_turn.push(uniform(rng, ranges.kappa));
        let h = ranges.mu_turn_halfwidth;
        mu_turn.push(uniform(rng, (-h, h)));

        if n == 1 {
            tpm[0][0] = 1.0;
        } else {
            let d = uniform(rng, ranges.tpm_diag);
            let w = simplex(rng, n - 1);
            let mut others = w.into_iter();
            for (k, g) in tpm[j].iter_mut().enumerate() {
                *g = if k == j { d } else { (1.0 - d) * others.next().unwrap_or(0.0) };
            }
        }
    }
    let ar_rows = |degrees: &[usize], rng: &mut R| -> Vec<Vec<f64>> {
        degrees
            .iter()
            .map(|&p| {
                if p == 0 {
                    return Vec::new();
                }
                let mass = uniform(rng, ranges.phi_mass).max(0.01);
                simplex(rng, p).into_iter().map(|v| v * mass).collect()
            })
            .collect()
    };
    let phi_step = ar_rows(&spec.p_step, rng);
    let phi_turn = ar_rows(&spec.p_turn, rng);
    Parameters {
        tpm,
        mu_step,
        cv_step,
        mu_turn,
        kappa_turn,
        phi_step,
        phi_turn,
    }
}

/// Rounds to three decimals; `true` if the coefficient survives.
fn survives_rounding(v: f64) -> bool {
    (v * 1000.0).round() != 0.0
}

/// Degrees implied by rounding every AR coefficient to three decimals:
/// the largest lag whose rounded coefficient is non-zero.
pub fn selected_degrees(params: &Parameters) -> ModelSpec {
    let degree = |row: &Vec<f64>| {
        row.iter()
            .rposition(|&v| survives_rounding(v))
            .map_or(0, |k| k + 1)
    };
    ModelSpec {
        n_states: params.mu_step.len(),
        p_step: params.phi_step.iter().map(degree).collect(),
        p_turn: params.phi_turn.iter().map(degree).collect(),
    }
}

/// Unpenalised parameter count plus the AR coefficients that survive
/// rounding to three decimals.
pub fn effective_df(params: &Parameters, spec: &ModelSpec) -> usize {
    let nonzero = params
        .phi_step
        .iter()
        .chain(&params.phi_turn)
        .flatten()
        .filter(|v| survives_rounding(**v))
        .count();
    spec.n_unpenalized() + nonzero
}

fn check_data(data: &PooledData, spec: &ModelSpec) -> Result<()> {
    spec.validate()?;
    let p = spec.max_degree();
    if let Some(s) = data.series.iter().find(|s| s.len() <= p) {
        return Err(Error::Structure(format!(
            "track '{}' has {} observations; the spec needs more than {p}",
            s.track_id,
            s.len()
        )));
    }
    Ok(())
}

struct Run {
    x: Vec<f64>,
    outcome: StartOutcome,
}

/// Coefficients below this are treated as sitting on the zero boundary.
const BOUNDARY_PHI: f64 = 1e-3;
/// Values tried when moving a coefficient off the boundary.
const ESCAPE_VALUES: [f64; 5] = [0.1, 0.03, 0.01, 0.003, 0.001];
const MAX_ESCAPES: usize = 20;
const POLISH_ITERS: usize = 50;
/// Newton-decrement threshold of the polishing stage, relative to `1 + |f|`.
const POLISH_TOL: f64 = 1e-11;

/// Finds a coefficient stuck near zero although the likelihood would gain
/// from increasing it faster than the penalty grows, and returns the
/// working vector with that coefficient moved off the boundary if that
/// improves the objective.
///
/// In the logit parametrisation the gradient of such a coefficient is
/// proportional to its (tiny) value, so the optimiser alone can take
/// thousands of iterations to leave the boundary.
fn escape_boundary(obj: &Objective, spec: &ModelSpec, w: &[f64], value: f64) -> Option<Vec<f64>> {
    let params = from_working(w, spec).ok()?;
    let (g_step, g_turn) = obj.ar_score(w).ok()?;
    let lambda = obj.penalty_config().lambda;
    let mut candidates: Vec<(f64, bool, usize, usize)> = Vec::new();
    for (is_turn, rows, grads) in [(false, &params.phi_step, &g_step), (true, &params.phi_turn, &g_turn)] {
        for (j, (row, g)) in rows.iter().zip(grads).enumerate() {
            for (k, (&v, &gk)) in row.iter().zip(g).enumerate() {
                if v < BOUNDARY_PHI && gk > lambda + 1e-3 {
                    candidates.push((gk - lambda, is_turn, j, k));
                }
            }
        }
    }
    candidates.sort_by(|a, b| b.0.total_cmp(&a.0));
    for (_, is_turn, j, k) in candidates {
        let mut best: Option<(f64, Vec<f64>)> = None;
        for t in ESCAPE_VALUES {
            let mut p = params.clone();
            let row = if is_turn { &mut p.phi_turn[j] } else { &mut p.phi_step[j] };
            row[k] = t;
            if row.iter().sum::<f64>() >= 1.0 - 1e-6 {
                continue;
            }
            let Ok(w2) = to_working(&p, spec) else { continue };
            let v = obj.value_or_neg_inf(&w2.0);
            if v > value + 1e-9 && best.as_ref().map_or(true, |(b, _)| v > *b) {
                best = Some((v, w2.0));
            }
        }
        if let Some((_, w2)) = best {
            return Some(w2);
        }
    }
    None
}

fn optimise(obj: &Objective, spec: &ModelSpec, w0: &[f64], opts: &FitOptions, supplied: bool) -> Run {
    let cfg = LbfgsConfig {
        max_iters: opts.max_iters,
        tol: opts.tol,
        ..LbfgsConfig::default()
    };
    let f = |w: &[f64]| -obj.value_or_neg_inf(w);
    let g = |w: &[f64]| obj.gradient(w).into_iter().map(|v| -v).collect::<Vec<_>>();
    let run = |x0: &[f64]| {
        let m = minimize(f, g, x0, &cfg);
        if !m.converged {
            return m;
        }
        let p = newton_polish(f, g, &m.x, POLISH_ITERS, POLISH_TOL);
        if p.f <= m.f {
            Minimum {
                iterations: m.iterations + p.iterations,
                converged: true,
                ..p
            }
        } else {
            m
        }
    };
    let mut m = run(w0);
    let mut iterations = m.iterations;
    for _ in 0..MAX_ESCAPES {
        if !m.converged || !m.f.is_finite() {
            break;
        }
        let Some(w1) = escape_boundary(obj, spec, &m.x, -m.f) else { break };
        let next = run(&w1);
        iterations += next.iterations;
        if next.f < m.f {
            m = next;
        } else {
            break;
        }
    }
    let objective = (-m.f).is_finite().then_some(-m.f);
    Run {
        outcome: StartOutcome {
            supplied,
            objective,
            iterations,
            converged: m.converged && objective.is_some(),
        },
        x: m.x,
    }
}

/// Fits from `opts.n_starts` random starts only.
pub fn fit(data: &PooledData, spec: &ModelSpec, pen: &PenaltyConfig, opts: &FitOptions) -> Result<FitResult> {
    fit_with_starts(data, spec, pen, opts, &[])
}

/// Fits from the supplied starting values followed by `opts.n_starts`
/// random starts. Random start `i` draws from stream `i + 1` of a ChaCha8
/// generator seeded with `opts.seed`, so results do not depend on thread
/// scheduling. Ties between equally good starts go to the earliest one.
pub fn fit_with_starts(
    data: &PooledData,
    spec: &ModelSpec,
    pen: &PenaltyConfig,
    opts: &FitOptions,
    starts: &[Parameters],
) -> Result<FitResult> {
    check_data(data, spec)?;
    if opts.n_starts == 0 && starts.is_empty() {
        return Err(Error::Argument("at least one start is required".into()));
    }
    let obj = Objective::new(data, spec, pen)?;

    let mut initial: Vec<(Option<Vec<f64>>, bool)> = Vec::new();
    for s in starts {
        initial.push((Some(to_working(s, spec)?.0), true));
    }
    for i in 0..opts.n_starts {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        rng.set_stream(i as u64 + 1);
        let p = random_start(data, spec, &opts.start_ranges, &mut rng);
        initial.push((to_working(&p, spec).ok().map(|w| w.0), false));
    }

    let runs: Vec<Run> = initial
        .into_par_iter()
        .map(|(w0, supplied)| match w0 {
            Some(w0) => optimise(&obj, spec, &w0, opts, supplied),
            None => Run {
                x: Vec::new(),
                outcome: StartOutcome {
                    supplied,
                    objective: None,
                    iterations: 0,
                    converged: false,
                },
            },
        })
        .collect();

    let mut best: Option<usize> = None;
    for (i, r) in runs.iter().enumerate() {
        if !r.outcome.converged {
            continue;
        }
        let v = r.outcome.objective.unwrap_or(f64::NEG_INFINITY);
        if best.map_or(true, |b| v > runs[b].outcome.objective.unwrap_or(f64::NEG_INFINITY)) {
            best = Some(i);
        }
    }
    let outcomes: Vec<StartOutcome> = runs.iter().map(|r| r.outcome.clone()).collect();
    let Some(b) = best else {
        let diag: Vec<String> = outcomes
            .iter()
            .enumerate()
            .map(|(i, o)| match o.objective {
                Some(v) => format!("start {i}: objective {v:.6} after {} iterations, not converged", o.iterations),
                None => format!("start {i}: non-finite objective"),
            })
            .collect();
        return Err(Error::Estimation(format!(
            "no start converged ({})",
            diag.join("; ")
        )));
    };
    let best_value = outcomes[b].objective.unwrap_or(f64::NEG_INFINITY);
    let n_starts_agreeing = outcomes
        .iter()
        .filter(|o| o.converged && o.objective.is_some_and(|v| (best_value - v).abs() <= AGREEMENT_TOL))
        .count();

    let raw = from_working(&runs[b].x, spec)?;
    finish(data, spec, pen, raw, n_starts_agreeing, outcomes)
}

fn finish(
    data: &PooledData,
    spec: &ModelSpec,
    pen: &PenaltyConfig,
    raw: Parameters,
    n_starts_agreeing: usize,
    starts: Vec<StartOutcome>,
) -> Result<FitResult> {
    let (params, perm) = raw.sorted_by_mu_step();
    let sorted_spec = ModelSpec {
        n_states: spec.n_states,
        p_step: perm.iter().map(|&i| spec.p_step[i]).collect(),
        p_turn: perm.iter().map(|&i| spec.p_turn[i]).collect(),
    };
    let loglik = cond_loglik(data, &params, &sorted_spec)?;
    let edf = effective_df(&params, &sorted_spec);
    let n_eff = effective_obs(data, spec);
    let converged = starts.iter().any(|s| s.converged);
    Ok(FitResult {
        sd_step: params.sd_step(),
        penalized_objective: loglik - penalty(&params, pen),
        lambda: pen.lambda,
        converged,
        n_starts_agreeing,
        aic: -2.0 * loglik + 2.0 * edf as f64,
        bic: -2.0 * loglik + edf as f64 * (n_eff as f64).ln(),
        edf,
        n_eff,
        loglik,
        params,
        spec: sorted_spec,
        state_order: perm,
        starts,
    })
}

/// Fits along a λ grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaPath {
    pub grid: Vec<f64>,
    /// `None` where the fit at that λ failed; see `errors`.
    pub fits: Vec<Option<FitResult>>,
    pub errors: Vec<Option<String>>,
    pub warm_started: bool,
}

/// Zero followed by 23 log-spaced values from 0.1 to 100.
pub fn default_lambda_grid() -> Vec<f64> {
    let mut grid = vec![0.0];
    let (lo, hi) = (0.1f64.ln(), 100f64.ln());
    grid.extend((0..23).map(|i| (lo + (hi - lo) * i as f64 / 22.0).exp()));
    grid
}

/// Fits sequentially along `grid`, starting each point from the previous
/// optimum as well as from fresh random starts.
pub fn lambda_path(data: &PooledData, spec: &ModelSpec, grid: &[f64], opts: &FitOptions) -> Result<LambdaPath> {
    lambda_path_with_starts(data, spec, grid, opts, &[])
}

/// As [`lambda_path`], with extra starting values used at every grid point.
pub fn lambda_path_with_starts(
    data: &PooledData,
    spec: &ModelSpec,
    grid: &[f64],
    opts: &FitOptions,
    starts: &[Parameters],
) -> Result<LambdaPath> {
    if grid.is_empty() || grid[0] != 0.0 {
        return Err(Error::Argument("lambda grid must start at 0".into()));
    }
    if grid.windows(2).any(|w| !(w[1] > w[0])) || grid.iter().any(|l| !l.is_finite()) {
        return Err(Error::Argument("lambda grid must be finite and strictly increasing".into()));
    }
    check_data(data, spec)?;
    let mut fits = Vec::with_capacity(grid.len());
    let mut errors = Vec::with_capacity(grid.len());
    let mut warm: Option<Parameters> = None;
    for &lambda in grid {
        let pen = PenaltyConfig::with_lambda(lambda)?;
        let mut s: Vec<Parameters> = warm.iter().cloned().collect();
        s.extend(starts.iter().cloned());
        match fit_with_starts(data, spec, &pen, opts, &s) {
            Ok(f) => {
                warm = Some(f.params_in_fit_order());
                fits.push(Some(f));
                errors.push(None);
            }
            Err(e) => {
                fits.push(None);
                errors.push(Some(e.to_string()));
            }
        }
    }
    Ok(LambdaPath {
        grid: grid.to_vec(),
        fits,
        errors,
        warm_started: true,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Criterion {
    Aic,
    Bic,
    Accuracy,
}

impl std::str::FromStr for Criterion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "aic" => Ok(Self::Aic),
            "bic" => Ok(Self::Bic),
            "accuracy" => Ok(Self::Accuracy),
            other => Err(Error::Argument(format!("unknown criterion '{other}'"))),
        }
    }
}

/// Known states for the accuracy criterion, one sequence per track.
#[derive(Debug, Clone, Copy)]
pub struct Truth<'a> {
    pub data: &'a PooledData,
    pub states: &'a [StateSequence],
}

/// Length-weighted Viterbi accuracy of `fit` over all tracks.
pub fn fit_accuracy(fit: &FitResult, truth: Truth<'_>) -> Result<f64> {
    if truth.states.len() != truth.data.series.len() {
        return Err(Error::Argument("one truth sequence per track is required".into()));
    }
    let mut hits = 0.0;
    let mut total = 0usize;
    for (s, t) in truth.data.series.iter().zip(truth.states) {
        let d = viterbi(s, &fit.params, &fit.spec)?;
        hits += decoding_accuracy(&d, t)? * s.len() as f64;
        total += s.len();
    }
    Ok(hits / total as f64)
}

/// Picks the grid fit with the smallest AIC/BIC or the highest decoding
/// accuracy. Ties go to the larger λ.
pub fn select_lambda<'p>(path: &'p LambdaPath, criterion: Criterion, truth: Option<Truth<'_>>) -> Result<&'p FitResult> {
    let mut best: Option<(&FitResult, f64)> = None;
    for f in path.fits.iter().flatten() {
        let score = match criterion {
            Criterion::Aic => -f.aic,
            Criterion::Bic => -f.bic,
            Criterion::Accuracy => {
                let t = truth.ok_or_else(|| Error::Argument("accuracy criterion needs true states".into()))?;
                fit_accuracy(f, t)?
            }
        };
        if best.map_or(true, |(_, s)| score >= s) {
            best = Some((f, score));
        }
    }
    best.map(|(f, _)| f)
        .ok_or_else(|| Error::Argument("lambda path has no successful fits".into()))
}

/// Refits without penalty at the degrees selected from `fit`, starting from
/// its rounded-degree projection plus random starts.
pub fn refit_unpenalized(data: &PooledData, fit: &FitResult, opts: &FitOptions) -> Result<FitResult> {
    let spec = selected_degrees(&fit.params);
    let start = fit.params.project(&spec)?;
    fit_with_starts(data, &spec, &PenaltyConfig::default(), opts, &[start])
}

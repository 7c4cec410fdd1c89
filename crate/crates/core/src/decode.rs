//! Global decoding, decoding accuracy, and one-step-ahead pseudo-residuals.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::dists::{ar_step_mean, ar_turn_mean, gamma_cdf, vonmises_cdf, GammaMeanSd, VonMises};
use crate::error::{Error, Result};
use crate::geometry::StepTurnSeries;
use crate::likelihood::{Kernel, SeriesCache};
use crate::model::{ModelSpec, Parameters};

/// Decoded or true state labels, `1..=N`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateSequence {
    pub track_id: String,
    pub states: Vec<usize>,
}

impl StateSequence {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

/// Pseudo-residuals; `None` marks the conditioning prefix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualSeries {
    pub track_id: String,
    pub r_step: Vec<Option<f64>>,
    pub r_turn: Vec<Option<f64>>,
    /// Number of CDF values clamped into `[1e-12, 1 - 1e-12]`.
    pub clamped: usize,
}

const CDF_CLAMP: f64 = 1e-12;

fn prepare(series: &StepTurnSeries, params: &Parameters, spec: &ModelSpec) -> Result<(Kernel, Vec<f64>)> {
    params.validate(spec)?;
    if series.len() <= spec.max_degree() {
        return Err(Error::Structure(format!(
            "track '{}' has {} observations; more than the maximal degree {} are needed",
            series.track_id,
            series.len(),
            spec.max_degree()
        )));
    }
    let kernel = Kernel::new(params, spec)?;
    let mut logd = Vec::new();
    kernel.log_densities(&SeriesCache::new(series), &mut logd);
    if let Some(pos) = logd.iter().position(|l| l.is_nan() || *l == f64::INFINITY) {
        return Err(Error::NonFiniteDensity {
            track: 0,
            t: pos / spec.n_states + 1,
            state: pos % spec.n_states,
        });
    }
    Ok((kernel, logd))
}

/// Most probable state path; ties go to the lower state index.
pub fn viterbi(series: &StepTurnSeries, params: &Parameters, spec: &ModelSpec) -> Result<StateSequence> {
    viterbi_with_score(series, params, spec).map(|(s, _)| s)
}

/// Viterbi path together with its log score.
pub fn viterbi_with_score(
    series: &StepTurnSeries,
    params: &Parameters,
    spec: &ModelSpec,
) -> Result<(StateSequence, f64)> {
    let (kernel, logd) = prepare(series, params, spec)?;
    let n = spec.n_states;
    let len = series.len();
    let ln_tpm: Vec<Vec<f64>> = kernel
        .tpm
        .iter()
        .map(|r| r.iter().map(|g| g.ln()).collect())
        .collect();

    let mut score: Vec<f64> = (0..n).map(|j| kernel.delta[j].ln() + logd[j]).collect();
    let mut back = vec![0usize; len * n];
    let mut next = vec![0.0; n];
    for t in 1..len {
        for b in 0..n {
            let mut best = f64::NEG_INFINITY;
            let mut arg = 0;
            for a in 0..n {
                let v = score[a] + ln_tpm[a][b];
                if v > best {
                    best = v;
                    arg = a;
                }
            }
            next[b] = best + logd[t * n + b];
            back[t * n + b] = arg;
        }
        std::mem::swap(&mut score, &mut next);
    }
    let mut last = 0;
    for j in 1..n {
        if score[j] > score[last] {
            last = j;
        }
    }
    let best = score[last];
    if !best.is_finite() {
        return Err(Error::Numeric(format!(
            "no state path of positive probability for track '{}'",
            series.track_id
        )));
    }
    let mut states = vec![0; len];
    states[len - 1] = last;
    for t in (1..len).rev() {
        states[t - 1] = back[t * n + states[t]];
    }
    Ok((
        StateSequence {
            track_id: series.track_id.clone(),
            states: states.into_iter().map(|s| s + 1).collect(),
        },
        best,
    ))
}

/// Log joint density of a given state path (labels `1..=N`) and the data,
/// using the same factors as the likelihood.
pub fn path_log_score(
    series: &StepTurnSeries,
    params: &Parameters,
    spec: &ModelSpec,
    states: &[usize],
) -> Result<f64> {
    if states.len() != series.len() {
        return Err(Error::Argument("state path and series differ in length".into()));
    }
    if states.iter().any(|&s| s == 0 || s > spec.n_states) {
        return Err(Error::Argument(format!("state labels must lie in 1..={}", spec.n_states)));
    }
    let (kernel, logd) = prepare(series, params, spec)?;
    let n = spec.n_states;
    let mut total = kernel.delta[states[0] - 1].ln();
    for (t, &s) in states.iter().enumerate() {
        if t > 0 {
            total += kernel.tpm[states[t - 1] - 1][s - 1].ln();
        }
        total += logd[t * n + s - 1];
    }
    Ok(total)
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    fn rec(prefix: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if prefix.len() == used.len() {
            out.push(prefix.clone());
            return;
        }
        for i in 0..used.len() {
            if !used[i] {
                used[i] = true;
                prefix.push(i);
                rec(prefix, used, out);
                prefix.pop();
                used[i] = false;
            }
        }
    }
    let mut out = Vec::new();
    rec(&mut Vec::with_capacity(n), &mut vec![false; n], &mut out);
    out
}

/// Fraction of matching labels, maximised over relabelings of the decoded
/// sequence (all permutations for up to four states, identity beyond).
pub fn decoding_accuracy(decoded: &StateSequence, truth: &StateSequence) -> Result<f64> {
    if decoded.len() != truth.len() {
        return Err(Error::Argument(format!(
            "decoded sequence has {} states, truth has {}",
            decoded.len(),
            truth.len()
        )));
    }
    if decoded.is_empty() {
        return Err(Error::Argument("cannot score empty sequences".into()));
    }
    let n = decoded
        .states
        .iter()
        .chain(&truth.states)
        .copied()
        .max()
        .unwrap_or(1);
    if decoded.states.iter().chain(&truth.states).any(|&s| s == 0) {
        return Err(Error::Argument("state labels start at 1".into()));
    }
    let count = |map: &[usize]| {
        decoded
            .states
            .iter()
            .zip(&truth.states)
            .filter(|(d, t)| map[**d - 1] == **t - 1)
            .count()
    };
    let best = if n <= 4 {
        permutations(n).iter().map(|p| count(p)).max().unwrap_or(0)
    } else {
        count(&(0..n).collect::<Vec<_>>())
    };
    Ok(best as f64 / decoded.len() as f64)
}

/// One-step-ahead pseudo-residuals for both variables.
///
/// The forecast CDF of `x_t` is the mixture of state-dependent CDFs at
/// their autoregressive means, weighted by `Pr(S_t = j | x_1..x_{t-1})`.
/// Steps are undefined while `t ≤ max_j p_j^step`, turns while
/// `t ≤ max_j p_j^turn`.
pub fn pseudo_residuals(
    series: &StepTurnSeries,
    params: &Parameters,
    spec: &ModelSpec,
) -> Result<ResidualSeries> {
    let (kernel, logd) = prepare(series, params, spec)?;
    let mut weights = Vec::new();
    kernel.forward(&logd, 0, Some(&mut weights))?;
    let n = spec.n_states;
    let std_normal = Normal::new(0.0, 1.0).expect("standard normal");
    let step_prefix = spec.p_step.iter().copied().max().unwrap_or(0);
    let turn_prefix = spec.p_turn.iter().copied().max().unwrap_or(0);
    let mut clamped = 0;
    let mut to_normal = |u: f64| {
        let c = u.clamp(CDF_CLAMP, 1.0 - CDF_CLAMP);
        if c != u {
            clamped += 1;
        }
        std_normal.inverse_cdf(c)
    };

    let len = series.len();
    let mut r_step = vec![None; len];
    let mut r_turn = vec![None; len];
    for i in 0..len {
        let w = &weights[i * n..(i + 1) * n];
        if i >= step_prefix {
            let mut u = 0.0;
            for j in 0..n {
                let hist: Vec<f64> = (1..=spec.p_step[j]).map(|k| series.steps[i - k]).collect();
                let mean = ar_step_mean(&hist, &params.phi_step[j], params.mu_step[j])?;
                let d = GammaMeanSd::new(mean, params.cv_step[j] * mean)?;
                u += w[j] * gamma_cdf(series.steps[i], &d)?;
            }
            r_step[i] = Some(to_normal(u));
        }
        if i >= turn_prefix {
            let mut u = 0.0;
            for j in 0..n {
                let hist: Vec<f64> = (1..=spec.p_turn[j]).map(|k| series.turns[i - k]).collect();
                let mean = ar_turn_mean(&hist, &params.phi_turn[j], params.mu_turn[j])?;
                let d = VonMises::new(mean, params.kappa_turn[j])?;
                u += w[j] * vonmises_cdf(series.turns[i], &d)?;
            }
            r_turn[i] = Some(to_normal(u));
        }
    }
    Ok(ResidualSeries {
        track_id: series.track_id.clone(),
        r_step,
        r_turn,
        clamped,
    })
}

/// Normality and independence summary of a residual sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResidualSummary {
    pub n: usize,
    pub mean: f64,
    pub sd: f64,
    pub skewness: f64,
    pub excess_kurtosis: f64,
    /// Lag-1 autocorrelation over consecutive defined entries.
    pub lag1_autocorr: f64,
    /// `sup |F_n(u) - u|` of the probability-integral-transform values.
    pub pit_max_dev: f64,
}

/// Summarises one residual column (undefined entries are skipped).
pub fn summarize_residuals(values: &[Option<f64>]) -> Result<ResidualSummary> {
    let xs: Vec<f64> = values.iter().flatten().copied().collect();
    let n = xs.len();
    if n < 3 {
        return Err(Error::Argument("need at least three residuals to summarise".into()));
    }
    let nf = n as f64;
    let mean = xs.iter().sum::<f64>() / nf;
    let (mut m2, mut m3, mut m4) = (0.0, 0.0, 0.0);
    for x in &xs {
        let d = x - mean;
        m2 += d * d;
        m3 += d * d * d;
        m4 += d * d * d * d;
    }
    m2 /= nf;
    m3 /= nf;
    m4 /= nf;

    let (mut num, mut pairs) = (0.0, 0);
    for w in values.windows(2) {
        if let (Some(a), Some(b)) = (w[0], w[1]) {
            num += (a - mean) * (b - mean);
            pairs += 1;
        }
    }
    let lag1 = if pairs > 0 { (num / pairs as f64) / m2 } else { 0.0 };

    let std_normal = Normal::new(0.0, 1.0).expect("standard normal");
    let mut u: Vec<f64> = xs.iter().map(|x| std_normal.cdf(*x)).collect();
    u.sort_by(f64::total_cmp);
    let pit_max_dev = u
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let lo = (v - i as f64 / nf).abs();
            let hi = ((i + 1) as f64 / nf - v).abs();
            lo.max(hi)
        })
        .fold(0.0, f64::max);

    Ok(ResidualSummary {
        n,
        mean,
        sd: (m2 * nf / (nf - 1.0)).sqrt(),
        skewness: m3 / m2.powf(1.5),
        excess_kurtosis: m4 / (m2 * m2) - 3.0,
        lag1_autocorr: lag1,
        pit_max_dev,
    })
}

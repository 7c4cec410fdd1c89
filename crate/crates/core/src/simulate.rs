//! Generative sampling and the preset two-state scenarios.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decode::StateSequence;
use crate::dists::{ar_step_mean, ar_turn_mean, GammaMeanSd, VonMises};
use crate::error::{Error, Result};
use crate::geometry::StepTurnSeries;
use crate::model::{stationary_dist, ModelSpec, Parameters};

/// How observations without a full AR history are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HistoryInit {
    /// The first `max_degree` observations are drawn with every φ set to
    /// zero.
    #[default]
    SteadyState,
    /// Every observation uses the lags that exist, so observation `t` uses
    /// at most `t - 1` coefficients.
    Truncated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimScenario {
    pub spec: ModelSpec,
    pub params: Parameters,
    #[serde(rename = "T")]
    pub t_len: usize,
    pub seed: u64,
    #[serde(default)]
    pub history_init: HistoryInit,
}

const VAR_STATE: u64 = 0;
const VAR_STEP: u64 = 1;
const VAR_TURN: u64 = 2;

/// Generator for one draw, keyed by `(seed, t, variable)`.
fn keyed_rng(seed: u64, t: usize, var: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(t as u64).to_le_bytes());
    key[16..24].copy_from_slice(&var.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

fn categorical(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // Rounding left u above the total mass: take the last state with mass.
    probs.iter().rposition(|p| *p > 0.0).unwrap_or(0)
}

/// Draws a series and its hidden states. Deterministic given the seed.
pub fn simulate(sc: &SimScenario) -> Result<(StepTurnSeries, StateSequence)> {
    sc.params.validate(&sc.spec)?;
    if sc.t_len == 0 {
        return Err(Error::Argument("T must be positive".into()));
    }
    let p = &sc.params;
    let delta = stationary_dist(&p.tpm)?;
    let warm_up = sc.spec.max_degree();

    let mut states: Vec<usize> = Vec::with_capacity(sc.t_len);
    let mut steps: Vec<f64> = Vec::with_capacity(sc.t_len);
    let mut turns: Vec<f64> = Vec::with_capacity(sc.t_len);
    for t in 0..sc.t_len {
        let u: f64 = keyed_rng(sc.seed, t, VAR_STATE).gen();
        let j = match states.last() {
            None => categorical(&delta, u),
            Some(&prev) => categorical(&p.tpm[prev], u),
        };
        states.push(j);

        let lags = |degree: usize| match sc.history_init {
            HistoryInit::SteadyState if t < warm_up => 0,
            _ => degree.min(t),
        };
        let ks = lags(sc.spec.p_step[j]);
        let hist: Vec<f64> = (1..=ks).map(|k| steps[t - k]).collect();
        let mean = ar_step_mean(&hist, &p.phi_step[j][..ks], p.mu_step[j])?;
        let step = GammaMeanSd::new(mean, p.cv_step[j] * mean)?
            .sample(&mut keyed_rng(sc.seed, t, VAR_STEP))
            .max(f64::MIN_POSITIVE);
        steps.push(step);

        let kt = lags(sc.spec.p_turn[j]);
        let hist: Vec<f64> = (1..=kt).map(|k| turns[t - k]).collect();
        let mean = ar_turn_mean(&hist, &p.phi_turn[j][..kt], p.mu_turn[j])?;
        let turn = VonMises::new(mean, p.kappa_turn[j])?.sample(&mut keyed_rng(sc.seed, t, VAR_TURN));
        turns.push(turn);
    }
    let series = StepTurnSeries::new("sim", steps, turns)?;
    let truth = StateSequence {
        track_id: "sim".into(),
        states: states.into_iter().map(|s| s + 1).collect(),
    };
    Ok((series, truth))
}

/// The two-state scenarios with AR degree 0 to 3 (same degree for both
/// states and variables), `T = 2000`.
pub fn paper_scenario(degree: usize) -> Result<SimScenario> {
    let (phi_step, phi_turn): (Vec<Vec<f64>>, Vec<Vec<f64>>) = match degree {
        0 => (vec![vec![], vec![]], vec![vec![], vec![]]),
        1 => (vec![vec![0.45], vec![0.55]], vec![vec![0.5], vec![0.6]]),
        2 => (
            vec![vec![0.3, 0.15], vec![0.4, 0.15]],
            vec![vec![0.3, 0.2], vec![0.4, 0.2]],
        ),
        3 => (
            vec![vec![0.25, 0.1, 0.1], vec![0.35, 0.1, 0.1]],
            vec![vec![0.3, 0.1, 0.1], vec![0.4, 0.1, 0.1]],
        ),
        d => return Err(Error::Argument(format!("scenario degree must be 0..=3, got {d}"))),
    };
    Ok(SimScenario {
        spec: ModelSpec::uniform(2, degree),
        params: Parameters {
            tpm: vec![vec![0.9, 0.1], vec![0.1, 0.9]],
            mu_step: vec![20.0, 40.0],
            cv_step: vec![5.0 / 20.0, 7.0 / 40.0],
            mu_turn: vec![0.0, 0.0],
            kappa_turn: vec![2.0, 12.0],
            phi_step,
            phi_turn,
        },
        t_len: 2000,
        seed: 0,
        history_init: HistoryInit::SteadyState,
    })
}

//! Model structure, parameter container, and the bijection between natural
//! parameters and the unconstrained working vector used by the optimizer.
//!
//! Working layout, in order:
//!
//! | block        | length        | transform                                   |
//! |--------------|---------------|---------------------------------------------|
//! | `tpm`        | `N(N-1)`      | row-wise logit, diagonal as reference       |
//! | `mu_step`    | `N`           | log                                         |
//! | `cv_step`    | `N`           | log                                         |
//! | `mu_turn`    | `N`           | identity, wrapped into `(-π, π]` on return  |
//! | `kappa_turn` | `N`           | log                                         |
//! | `phi_step`   | `Σ p_j^step`  | per row, logit over `p + 1` categories      |
//! | `phi_turn`   | `Σ p_j^turn`  | as `phi_step`                               |
//!
//! The extra category of each AR row is the slack `1 - Σ φ`, so every row
//! satisfies `φ_k ∈ [0, 1]` and `Σ φ_k ≤ 1` for any working input.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::wrap_angle;

/// Floor applied to boundary values (zero AR coefficients, zero transition
/// probabilities, zero concentration) before taking logs.
pub const BOUNDARY_NUDGE: f64 = 1e-8;

const ROW_SUM_TOL: f64 = 1e-9;

/// Number of states and per-state autoregressive degrees.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelSpec {
    pub n_states: usize,
    pub p_step: Vec<usize>,
    pub p_turn: Vec<usize>,
}

impl ModelSpec {
    pub fn new(n_states: usize, p_step: Vec<usize>, p_turn: Vec<usize>) -> Result<Self> {
        let spec = Self {
            n_states,
            p_step,
            p_turn,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Same degree `p` for every state and both variables.
    pub fn uniform(n_states: usize, p: usize) -> Self {
        Self {
            n_states,
            p_step: vec![p; n_states],
            p_turn: vec![p; n_states],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_states == 0 {
            return Err(Error::Argument("a model needs at least one state".into()));
        }
        if self.p_step.len() != self.n_states || self.p_turn.len() != self.n_states {
            return Err(Error::Argument(format!(
                "{} states but {} step degrees and {} turn degrees",
                self.n_states,
                self.p_step.len(),
                self.p_turn.len()
            )));
        }
        Ok(())
    }

    /// Largest degree across states and both variables.
    pub fn max_degree(&self) -> usize {
        self.p_step
            .iter()
            .chain(&self.p_turn)
            .copied()
            .max()
            .unwrap_or(0)
    }

    pub fn n_ar_coefficients(&self) -> usize {
        self.p_step.iter().sum::<usize>() + self.p_turn.iter().sum::<usize>()
    }

    /// Parameters that are never penalised: transitions plus four
    /// state-dependent quantities per state.
    pub fn n_unpenalized(&self) -> usize {
        let n = self.n_states;
        n * (n - 1) + 4 * n
    }
}

/// `N(N-1) + 4N + Σ_j (p_j^step + p_j^turn)`.
pub fn param_count(spec: &ModelSpec) -> usize {
    spec.n_unpenalized() + spec.n_ar_coefficients()
}

/// All estimable quantities on the natural scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Parameters {
    /// Row-stochastic transition matrix, `tpm[i][j] = Pr(S_t = j | S_{t-1} = i)`.
    pub tpm: Vec<Vec<f64>>,
    pub mu_step: Vec<f64>,
    /// Coefficient of variation; the state SD is `cv_step[j] * mean`.
    pub cv_step: Vec<f64>,
    pub mu_turn: Vec<f64>,
    pub kappa_turn: Vec<f64>,
    /// Ragged, `phi_step[j][k]` multiplies `x_{t-k-1}` in state `j`.
    pub phi_step: Vec<Vec<f64>>,
    pub phi_turn: Vec<Vec<f64>>,
}

impl Parameters {
    /// Spec implied by the shapes of the parameter blocks.
    pub fn spec(&self) -> ModelSpec {
        ModelSpec {
            n_states: self.mu_step.len(),
            p_step: self.phi_step.iter().map(Vec::len).collect(),
            p_turn: self.phi_turn.iter().map(Vec::len).collect(),
        }
    }

    /// Steady-state step SDs `ω_j μ_j`.
    pub fn sd_step(&self) -> Vec<f64> {
        self.mu_step
            .iter()
            .zip(&self.cv_step)
            .map(|(m, w)| m * w)
            .collect()
    }

    /// Checks every invariant against `spec`.
    pub fn validate(&self, spec: &ModelSpec) -> Result<()> {
        spec.validate()?;
        let n = spec.n_states;
        let blocks = [
            ("tpm", self.tpm.len()),
            ("mu_step", self.mu_step.len()),
            ("cv_step", self.cv_step.len()),
            ("mu_turn", self.mu_turn.len()),
            ("kappa_turn", self.kappa_turn.len()),
            ("phi_step", self.phi_step.len()),
            ("phi_turn", self.phi_turn.len()),
        ];
        for (name, len) in blocks {
            if len != n {
                return Err(Error::Argument(format!(
                    "{name} has {len} entries for a {n}-state model"
                )));
            }
        }
        for (i, row) in self.tpm.iter().enumerate() {
            if row.len() != n {
                return Err(Error::Argument(format!("tpm row {i} has {} entries", row.len())));
            }
            if row.iter().any(|g| !(*g >= 0.0 && *g <= 1.0)) {
                return Err(Error::Domain(format!("tpm row {i} has entries outside [0, 1]")));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::Domain(format!("tpm row {i} sums to {s}")));
            }
        }
        for j in 0..n {
            if !(self.mu_step[j] > 0.0 && self.mu_step[j].is_finite()) {
                return Err(Error::Domain(format!("mu_step[{j}] must be positive")));
            }
            if !(self.cv_step[j] > 0.0 && self.cv_step[j].is_finite()) {
                return Err(Error::Domain(format!("cv_step[{j}] must be positive")));
            }
            if !self.mu_turn[j].is_finite() {
                return Err(Error::Domain(format!("mu_turn[{j}] must be finite")));
            }
            if !(self.kappa_turn[j] >= 0.0 && self.kappa_turn[j].is_finite()) {
                return Err(Error::Domain(format!("kappa_turn[{j}] must be >= 0")));
            }
        }
        for (name, rows, degrees) in [
            ("phi_step", &self.phi_step, &spec.p_step),
            ("phi_turn", &self.phi_turn, &spec.p_turn),
        ] {
            for (j, (row, &p)) in rows.iter().zip(degrees).enumerate() {
                if row.len() != p {
                    return Err(Error::Argument(format!(
                        "{name}[{j}] has {} coefficients, spec says {p}",
                        row.len()
                    )));
                }
                if row.iter().any(|v| !(*v >= 0.0 && *v <= 1.0)) {
                    return Err(Error::Domain(format!("{name}[{j}] has entries outside [0, 1]")));
                }
                if row.iter().sum::<f64>() > 1.0 + 1e-12 {
                    return Err(Error::Domain(format!("{name}[{j}] sums to more than 1")));
                }
            }
        }
        Ok(())
    }

    /// Relabels states: new state `k` is old state `perm[k]`.
    pub fn permute(&self, perm: &[usize]) -> Parameters {
        let pick = |v: &Vec<f64>| perm.iter().map(|&i| v[i]).collect::<Vec<_>>();
        Parameters {
            tpm: perm
                .iter()
                .map(|&a| perm.iter().map(|&b| self.tpm[a][b]).collect())
                .collect(),
            mu_step: pick(&self.mu_step),
            cv_step: pick(&self.cv_step),
            mu_turn: pick(&self.mu_turn),
            kappa_turn: pick(&self.kappa_turn),
            phi_step: perm.iter().map(|&i| self.phi_step[i].clone()).collect(),
            phi_turn: perm.iter().map(|&i| self.phi_turn[i].clone()).collect(),
        }
    }

    /// States sorted by ascending `mu_step`; returns the permutation used
    /// (`perm[new] = old`).
    pub fn sorted_by_mu_step(&self) -> (Parameters, Vec<usize>) {
        let mut perm: Vec<usize> = (0..self.mu_step.len()).collect();
        perm.sort_by(|&a, &b| self.mu_step[a].total_cmp(&self.mu_step[b]));
        (self.permute(&perm), perm)
    }

    /// Re-shapes the AR blocks to `target`, truncating higher lags or padding
    /// with zeros. Useful for starting a fit of one spec from another's
    /// parameters.
    pub fn project(&self, target: &ModelSpec) -> Result<Parameters> {
        if target.n_states != self.mu_step.len() {
            return Err(Error::Argument(format!(
                "cannot project {}-state parameters onto a {}-state spec",
                self.mu_step.len(),
                target.n_states
            )));
        }
        let reshape = |rows: &Vec<Vec<f64>>, degrees: &[usize]| {
            rows.iter()
                .zip(degrees)
                .map(|(row, &p)| (0..p).map(|k| row.get(k).copied().unwrap_or(0.0)).collect())
                .collect()
        };
        Ok(Parameters {
            phi_step: reshape(&self.phi_step, &target.p_step),
            phi_turn: reshape(&self.phi_turn, &target.p_turn),
            ..self.clone()
        })
    }
}

/// Stationary distribution of an irreducible transition matrix, from the
/// linear system `δ (I - Γ + U) = 1` with `U` the all-ones matrix.
pub fn stationary_dist(tpm: &[Vec<f64>]) -> Result<Vec<f64>> {
    let n = tpm.len();
    if n == 0 || tpm.iter().any(|r| r.len() != n) {
        return Err(Error::Argument("transition matrix must be square and non-empty".into()));
    }
    if n == 1 {
        return Ok(vec![1.0]);
    }
    // Transposed system: (I - Γ + U)ᵀ δᵀ = 1.
    let m = DMatrix::from_fn(n, n, |r, c| {
        let id = if r == c { 1.0 } else { 0.0 };
        id - tpm[c][r] + 1.0
    });
    let lu = m.lu();
    let pivots = lu.u().diagonal();
    if pivots.iter().any(|p| p.abs() < 1e-13) {
        return Err(Error::Numeric(
            "transition matrix has no unique stationary distribution (reducible chain)".into(),
        ));
    }
    let delta = lu
        .solve(&DVector::from_element(n, 1.0))
        .ok_or_else(|| Error::Numeric("stationary system is singular".into()))?;
    if delta.iter().any(|d| !d.is_finite() || *d < -1e-10) {
        return Err(Error::Numeric("stationary solution is not a probability vector".into()));
    }
    let mut delta: Vec<f64> = delta.iter().map(|d| d.max(0.0)).collect();
    let s: f64 = delta.iter().sum();
    delta.iter_mut().for_each(|d| *d /= s);
    Ok(delta)
}

/// Unconstrained parameter vector; see the module docs for the layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkingVector(pub Vec<f64>);

impl WorkingVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

fn positive_log(v: f64, what: &str) -> Result<f64> {
    if v > 0.0 && v.is_finite() {
        Ok(v.ln())
    } else {
        Err(Error::Domain(format!("{what} must be positive and finite, got {v}")))
    }
}

fn phi_row_to_logits(row: &[f64], out: &mut Vec<f64>) -> Result<()> {
    let nudged: Vec<f64> = row.iter().map(|v| v.max(BOUNDARY_NUDGE)).collect();
    let slack = 1.0 - nudged.iter().sum::<f64>();
    if slack <= 0.0 {
        return Err(Error::Domain(format!(
            "AR coefficients {row:?} sum to 1 or more; nudge them into the interior (sum < 1)"
        )));
    }
    let ln_slack = slack.ln();
    out.extend(nudged.iter().map(|v| v.ln() - ln_slack));
    Ok(())
}

/// Natural parameters to working vector.
///
/// Zero AR coefficients, zero transition probabilities and zero
/// concentrations are nudged to [`BOUNDARY_NUDGE`] first; AR rows summing
/// to one are rejected.
pub fn to_working(params: &Parameters, spec: &ModelSpec) -> Result<WorkingVector> {
    params.validate(spec)?;
    let n = spec.n_states;
    let mut w = Vec::with_capacity(param_count(spec));
    for (i, row) in params.tpm.iter().enumerate() {
        let nudged: Vec<f64> = row.iter().map(|g| g.max(BOUNDARY_NUDGE)).collect();
        let ln_diag = nudged[i].ln();
        for (j, g) in nudged.iter().enumerate() {
            if j != i {
                w.push(g.ln() - ln_diag);
            }
        }
    }
    for j in 0..n {
        w.push(positive_log(params.mu_step[j], "mu_step")?);
    }
    for j in 0..n {
        w.push(positive_log(params.cv_step[j], "cv_step")?);
    }
    w.extend(params.mu_turn.iter().map(|m| wrap_angle(*m)));
    for j in 0..n {
        w.push(params.kappa_turn[j].max(BOUNDARY_NUDGE).ln());
    }
    for row in params.phi_step.iter().chain(&params.phi_turn) {
        phi_row_to_logits(row, &mut w)?;
    }
    Ok(WorkingVector(w))
}

/// Softmax of `logits` with an implicit extra category at logit 0 that is
/// placed at `reference` in the output (or dropped when `reference` is None).
fn softmax_with_reference(logits: &[f64], reference: Option<usize>) -> Vec<f64> {
    let max = logits.iter().copied().fold(0.0, f64::max);
    let ref_weight = (-max).exp();
    let weights: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total = ref_weight + weights.iter().sum::<f64>();
    match reference {
        Some(r) => {
            let mut out: Vec<f64> = weights.iter().map(|v| v / total).collect();
            out.insert(r, ref_weight / total);
            out
        }
        None => weights.iter().map(|v| v / total).collect(),
    }
}

/// Working vector to natural parameters; total on finite inputs.
pub fn from_working(w: &[f64], spec: &ModelSpec) -> Result<Parameters> {
    spec.validate()?;
    let expected = param_count(spec);
    if w.len() != expected {
        return Err(Error::Argument(format!(
            "working vector has {} entries, spec needs {expected}",
            w.len()
        )));
    }
    let n = spec.n_states;
    let mut pos = 0;
    let mut take = |k: usize| {
        let s = &w[pos..pos + k];
        pos += k;
        s
    };
    let tpm = (0..n)
        .map(|i| softmax_with_reference(take(n - 1), Some(i)))
        .collect();
    let mu_step = take(n).iter().map(|v| v.exp()).collect();
    let cv_step = take(n).iter().map(|v| v.exp()).collect();
    let mu_turn = take(n).iter().map(|v| wrap_angle(*v)).collect();
    let kappa_turn = take(n).iter().map(|v| v.exp()).collect();
    let phi_step = spec
        .p_step
        .iter()
        .map(|&p| softmax_with_reference(take(p), None))
        .collect();
    let phi_turn = spec
        .p_turn
        .iter()
        .map(|&p| softmax_with_reference(take(p), None))
        .collect();
    Ok(Parameters {
        tpm,
        mu_step,
        cv_step,
        mu_turn,
        kappa_turn,
        phi_step,
        phi_turn,
    })
}

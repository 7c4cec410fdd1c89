#![allow(dead_code)]

use std::f64::consts::PI;

use arhmm::{ModelSpec, Parameters, StepTurnSeries};
use rand::Rng;
use statrs::distribution::{Continuous, Gamma};

/// A small random model and data set for enumeration checks.
pub struct Instance {
    pub spec: ModelSpec,
    pub params: Parameters,
    pub series: StepTurnSeries,
}

fn random_row<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    let w: Vec<f64> = (0..n).map(|_| rng.gen_range(0.1..1.0)).collect();
    let s: f64 = w.iter().sum();
    w.iter().map(|v| v / s).collect()
}

fn random_phi<R: Rng>(rng: &mut R, p: usize) -> Vec<f64> {
    let mass = rng.gen_range(0.0..0.9);
    random_row(rng, p).into_iter().map(|v| v * mass).collect()
}

pub fn random_instance<R: Rng>(rng: &mut R, max_degree: usize) -> Instance {
    let n = rng.gen_range(2..=3);
    let t_len = rng.gen_range(4..=8);
    let p_step: Vec<usize> = (0..n).map(|_| rng.gen_range(0..=max_degree)).collect();
    let p_turn: Vec<usize> = (0..n).map(|_| rng.gen_range(0..=max_degree)).collect();
    let spec = ModelSpec::new(n, p_step.clone(), p_turn.clone()).unwrap();
    let params = Parameters {
        tpm: (0..n).map(|_| random_row(rng, n)).collect(),
        mu_step: (0..n).map(|_| rng.gen_range(1.0..10.0)).collect(),
        cv_step: (0..n).map(|_| rng.gen_range(0.2..1.0)).collect(),
        mu_turn: (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect(),
        kappa_turn: (0..n).map(|_| rng.gen_range(0.1..5.0)).collect(),
        phi_step: p_step.iter().map(|&p| random_phi(rng, p)).collect(),
        phi_turn: p_turn.iter().map(|&p| random_phi(rng, p)).collect(),
    };
    let steps = (0..t_len).map(|_| rng.gen_range(0.5..12.0)).collect();
    let turns = (0..t_len).map(|_| rng.gen_range(-PI..PI)).collect();
    Instance {
        spec,
        params,
        series: StepTurnSeries::new("x", steps, turns).unwrap(),
    }
}

/// I0 by the trapezoidal rule on `(1/π) ∫_0^π exp(κ cos θ) dθ`, which is
/// spectrally accurate for this periodic integrand.
fn bessel_i0_quadrature(kappa: f64) -> f64 {
    let m = 400;
    let h = PI / m as f64;
    let mut s = 0.5 * (kappa.exp() + (-kappa).exp());
    for k in 1..m {
        s += (kappa * (k as f64 * h).cos()).exp();
    }
    s * h / PI
}

/// Log factor of state `j` at 0-based time `i`, computed from scratch.
pub fn log_factor(inst: &Instance, i: usize, j: usize) -> f64 {
    let p = &inst.params;
    let x = &inst.series;
    let mut out = 0.0;
    let ps = inst.spec.p_step[j];
    if i >= ps {
        let phi = &p.phi_step[j];
        let mut m = (1.0 - phi.iter().sum::<f64>()) * p.mu_step[j];
        for k in 0..ps {
            m += phi[k] * x.steps[i - k - 1];
        }
        let shape = 1.0 / (p.cv_step[j] * p.cv_step[j]);
        out += Gamma::new(shape, shape / m).unwrap().ln_pdf(x.steps[i]);
    }
    let pt = inst.spec.p_turn[j];
    if i >= pt {
        let phi = &p.phi_turn[j];
        let slack = 1.0 - phi.iter().sum::<f64>();
        let (mut re, mut im) = (slack * p.mu_turn[j].cos(), slack * p.mu_turn[j].sin());
        for k in 0..pt {
            re += phi[k] * x.turns[i - k - 1].cos();
            im += phi[k] * x.turns[i - k - 1].sin();
        }
        let mean = im.atan2(re);
        let kappa = p.kappa_turn[j];
        out += kappa * (x.turns[i] - mean).cos() - (2.0 * PI * bessel_i0_quadrature(kappa)).ln();
    }
    out
}

/// Stationary distribution by repeated squaring of the transition matrix,
/// renormalising rows so rounding cannot compound.
pub fn stationary(tpm: &[Vec<f64>]) -> Vec<f64> {
    let n = tpm.len();
    let mut m = tpm.to_vec();
    for _ in 0..30 {
        let mut next = vec![vec![0.0; n]; n];
        for a in 0..n {
            for b in 0..n {
                next[a][b] = (0..n).map(|k| m[a][k] * m[k][b]).sum();
            }
            let total: f64 = next[a].iter().sum();
            next[a].iter_mut().for_each(|v| *v /= total);
        }
        m = next;
    }
    m[0].clone()
}

/// Log joint density of every state path, in lexicographic path order.
pub fn enumerate_paths(inst: &Instance) -> Vec<(Vec<usize>, f64)> {
    let n = inst.spec.n_states;
    let t_len = inst.series.len();
    let delta = stationary(&inst.params.tpm);
    let factors: Vec<Vec<f64>> = (0..t_len)
        .map(|i| (0..n).map(|j| log_factor(inst, i, j)).collect())
        .collect();
    let mut out = Vec::with_capacity(n.pow(t_len as u32));
    let mut path = vec![0usize; t_len];
    loop {
        let mut s = delta[path[0]].ln() + factors[0][path[0]];
        for i in 1..t_len {
            s += inst.params.tpm[path[i - 1]][path[i]].ln() + factors[i][path[i]];
        }
        out.push((path.clone(), s));
        // Odometer increment with the last position fastest.
        let mut pos = t_len;
        loop {
            if pos == 0 {
                return out;
            }
            pos -= 1;
            path[pos] += 1;
            if path[pos] < n {
                break;
            }
            path[pos] = 0;
        }
    }
}

pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Linear-interpolation quantile of an unsorted sample.
pub fn quantile(v: &[f64], q: f64) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let pos = q * (s.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    s[lo] + (pos - lo as f64) * (s[hi] - s[lo])
}

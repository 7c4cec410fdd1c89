//! Limited-memory BFGS minimiser with a backtracking Armijo line search.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

#[derive(Debug, Clone, Copy)]
pub struct LbfgsConfig {
    pub memory: usize,
    pub max_iters: usize,
    /// Stop once two consecutive iterations improve the objective by less
    /// than `tol · (1 + |f|)`.
    pub tol: f64,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        Self {
            memory: 8,
            max_iters: 2000,
            tol: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub f: f64,
    pub iterations: usize,
    pub converged: bool,
}

const ARMIJO_C1: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 40;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

struct Pair {
    s: Vec<f64>,
    y: Vec<f64>,
    rho: f64,
}

/// Two-loop recursion: returns `-H g`.
fn direction(g: &[f64], hist: &VecDeque<Pair>) -> Vec<f64> {
    let mut q = g.to_vec();
    let mut alphas = Vec::with_capacity(hist.len());
    for p in hist.iter().rev() {
        let a = p.rho * dot(&p.s, &q);
        q.iter_mut().zip(&p.y).for_each(|(qi, yi)| *qi -= a * yi);
        alphas.push(a);
    }
    let scale = match hist.back() {
        Some(p) => dot(&p.s, &p.y) / dot(&p.y, &p.y),
        None => 1.0 / norm(g).max(1.0),
    };
    q.iter_mut().for_each(|v| *v *= scale);
    for (p, a) in hist.iter().zip(alphas.iter().rev()) {
        let b = p.rho * dot(&p.y, &q);
        q.iter_mut().zip(&p.s).for_each(|(qi, si)| *qi += (a - b) * si);
    }
    q.iter_mut().for_each(|v| *v = -*v);
    q
}

/// Minimises `f` from `x0`. `f` should return `+∞` (or NaN) outside its
/// domain; such points are rejected by the line search.
pub fn minimize<F, G>(f: F, grad: G, x0: &[f64], cfg: &LbfgsConfig) -> Minimum
where
    F: Fn(&[f64]) -> f64,
    G: Fn(&[f64]) -> Vec<f64>,
{
    let mut x = x0.to_vec();
    let mut fx = f(&x);
    if !fx.is_finite() {
        return Minimum {
            x,
            f: fx,
            iterations: 0,
            converged: false,
        };
    }
    let mut g = grad(&x);
    let mut hist: VecDeque<Pair> = VecDeque::with_capacity(cfg.memory);
    let mut small_steps = 0;

    for iter in 0..cfg.max_iters {
        if g.iter().any(|v| !v.is_finite()) {
            return Minimum {
                x,
                f: fx,
                iterations: iter,
                converged: false,
            };
        }
        if norm(&g) == 0.0 {
            return Minimum {
                x,
                f: fx,
                iterations: iter,
                converged: true,
            };
        }
        let mut d = direction(&g, &hist);
        let mut slope = dot(&g, &d);
        if !(slope < 0.0) {
            hist.clear();
            d = direction(&g, &hist);
            slope = dot(&g, &d);
        }

        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..MAX_BACKTRACKS {
            let trial: Vec<f64> = x.iter().zip(&d).map(|(xi, di)| xi + step * di).collect();
            let ft = f(&trial);
            if ft.is_finite() && ft <= fx + ARMIJO_C1 * step * slope {
                accepted = Some((trial, ft));
                break;
            }
            // Quadratic interpolation, safeguarded to [0.1, 0.5] of the step.
            let next = if ft.is_finite() {
                let denom = 2.0 * (ft - fx - step * slope);
                if denom > 0.0 {
                    (-slope * step * step / denom).clamp(0.1 * step, 0.5 * step)
                } else {
                    0.5 * step
                }
            } else {
                0.25 * step
            };
            step = next;
        }

        let Some((x_new, f_new)) = accepted else {
            if !hist.is_empty() {
                // Retry from steepest descent before giving up.
                hist.clear();
                continue;
            }
            // No descent possible along the gradient: stationary to
            // within the resolution of the objective.
            return Minimum {
                x,
                f: fx,
                iterations: iter,
                converged: true,
            };
        };

        let g_new = grad(&x_new);
        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-10 * norm(&s) * norm(&y) {
            if hist.len() == cfg.memory {
                hist.pop_front();
            }
            hist.push_back(Pair { s, y, rho: 1.0 / sy });
        }

        let improvement = fx - f_new;
        x = x_new;
        fx = f_new;
        g = g_new;
        if improvement <= cfg.tol * (1.0 + fx.abs()) {
            small_steps += 1;
            if small_steps >= 2 {
                return Minimum {
                    x,
                    f: fx,
                    iterations: iter + 1,
                    converged: true,
                };
            }
        } else {
            small_steps = 0;
        }
    }
    Minimum {
        x,
        f: fx,
        iterations: cfg.max_iters,
        converged: false,
    }
}

/// Newton refinement with a finite-difference Hessian of `grad`, made
/// positive definite by taking absolute eigenvalues (floored relative to
/// the largest). Meant for polishing a quasi-Newton solution; stops when the
/// Newton decrement or two consecutive improvements fall below
/// `tol · (1 + |f|)`, or when no step improves `f`. The last two cases also
/// cover kinks, where `f` is continuous but not differentiable.
pub fn newton_polish<F, G>(f: F, grad: G, x0: &[f64], max_iters: usize, tol: f64) -> Minimum
where
    F: Fn(&[f64]) -> f64,
    G: Fn(&[f64]) -> Vec<f64>,
{
    let n = x0.len();
    let mut x = x0.to_vec();
    let mut fx = f(&x);
    let stop = |x: Vec<f64>, f: f64, iterations: usize, converged: bool| Minimum {
        x,
        f,
        iterations,
        converged,
    };
    if !fx.is_finite() || n == 0 {
        return stop(x, fx, 0, fx.is_finite());
    }
    let mut small_steps = 0;
    for iter in 0..max_iters {
        let g = grad(&x);
        if g.iter().any(|v| !v.is_finite()) {
            return stop(x, fx, iter, false);
        }
        let mut h = DMatrix::<f64>::zeros(n, n);
        for i in 0..n {
            let step = 1e-5 * x[i].abs().max(1.0);
            let mut xp = x.clone();
            xp[i] += step;
            let gp = grad(&xp);
            if gp.iter().any(|v| !v.is_finite()) {
                return stop(x, fx, iter, false);
            }
            for k in 0..n {
                h[(k, i)] = (gp[k] - g[k]) / step;
            }
        }
        let sym = (&h + h.transpose()) * 0.5;
        let eig = SymmetricEigen::new(sym);
        let top = eig.eigenvalues.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let floor = (1e-10 * top).max(1e-300);
        let gv = DVector::from_column_slice(&g);
        let coeffs = eig.eigenvectors.transpose() * &gv;
        let scaled = DVector::from_iterator(
            n,
            coeffs
                .iter()
                .zip(eig.eigenvalues.iter())
                .map(|(c, l)| c / l.abs().max(floor)),
        );
        let d = -(&eig.eigenvectors * scaled);
        let slope = gv.dot(&d);
        if -0.5 * slope <= tol * (1.0 + fx.abs()) {
            return stop(x, fx, iter, true);
        }
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..MAX_BACKTRACKS {
            let trial: Vec<f64> = x.iter().zip(d.iter()).map(|(a, b)| a + t * b).collect();
            let ft = f(&trial);
            if ft.is_finite() && ft <= fx + ARMIJO_C1 * t * slope {
                accepted = Some((trial, ft));
                break;
            }
            t *= 0.5;
        }
        match accepted {
            Some((xn, fnew)) => {
                let improvement = fx - fnew;
                x = xn;
                fx = fnew;
                if improvement <= tol * (1.0 + fx.abs()) {
                    small_steps += 1;
                    if small_steps >= 2 {
                        return stop(x, fx, iter + 1, true);
                    }
                } else {
                    small_steps = 0;
                }
            }
            None => return stop(x, fx, iter, true),
        }
    }
    stop(x, fx, max_iters, false)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rosenbrock(x: &[f64]) -> f64 {
        (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2)
    }

    fn rosenbrock_grad(x: &[f64]) -> Vec<f64> {
        vec![
            -2.0 * (1.0 - x[0]) - 400.0 * x[0] * (x[1] - x[0] * x[0]),
            200.0 * (x[1] - x[0] * x[0]),
        ]
    }

    #[test]
    fn solves_rosenbrock() {
        let cfg = LbfgsConfig {
            tol: 1e-14,
            ..Default::default()
        };
        let m = minimize(rosenbrock, rosenbrock_grad, &[-1.2, 1.0], &cfg);
        assert!(m.converged);
        assert!((m.x[0] - 1.0).abs() < 1e-5 && (m.x[1] - 1.0).abs() < 1e-5, "{:?}", m.x);
    }

    #[test]
    fn respects_domain() {
        // log barrier: infinite for x <= 0
        let f = |x: &[f64]| if x[0] <= 0.0 { f64::INFINITY } else { x[0] - x[0].ln() };
        let g = |x: &[f64]| vec![1.0 - 1.0 / x[0]];
        let m = minimize(f, g, &[5.0], &LbfgsConfig::default());
        assert!((m.x[0] - 1.0).abs() < 1e-4);
    }

    #[test]
    fn polish_reaches_rosenbrock_minimum() {
        let m = newton_polish(rosenbrock, rosenbrock_grad, &[0.9, 0.8], 100, 1e-20);
        assert!(m.converged);
        assert!((m.x[0] - 1.0).abs() < 1e-8 && (m.x[1] - 1.0).abs() < 1e-8, "{:?}", m.x);
    }

    #[test]
    fn invalid_start_reports_failure() {
        let m = minimize(|_| f64::NAN, |x| vec![0.0; x.len()], &[0.0], &LbfgsConfig::default());
        assert!(!m.converged);
    }
}

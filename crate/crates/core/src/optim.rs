//! Nonlinear conjugate gradients (Polak–Ribière+) with a backtracking Armijo
//! line search.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

/// A function to minimize. `value` returns `+∞` outside the feasible region;
/// `value_and_grad` is only called at points where `value` is finite.
pub trait Objective {
    fn value(&mut self, x: &DVector<f64>) -> f64;
    fn value_and_grad(&mut self, x: &DVector<f64>) -> (f64, DVector<f64>);
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CgOptions {
    pub max_iter: usize,
    /// Stop once the sup-norm of the gradient falls to this value.
    pub grad_tol: f64,
    pub armijo_c: f64,
    pub shrink: f64,
    pub max_backtracks: usize,
}

impl Default for CgOptions {
    fn default() -> Self {
        Self {
            max_iter: 2000,
            grad_tol: 1e-6,
            armijo_c: 1e-4,
            shrink: 0.5,
            max_backtracks: 60,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub objective: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone)]
pub struct CgOutcome {
    pub x: DVector<f64>,
    pub value: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    pub trace: Vec<TraceRow>,
}

fn sup_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Minimizes `f` from `x0`. Returns `None` if `f(x0)` is not finite.
pub fn minimize<F: Objective>(f: &mut F, x0: DVector<f64>, opts: &CgOptions) -> Option<CgOutcome> {
    let mut x = x0;
    if !f.value(&x).is_finite() {
        return None;
    }
    let (mut fx, mut g) = f.value_and_grad(&x);
    if !fx.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let mut d = -&g;
    let mut prev_step: Option<(f64, f64)> = None; // (step, slope)
    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;

    loop {
        let gnorm = sup_norm(&g);
        trace.push(TraceRow {
            iteration: iterations,
            objective: fx,
            grad_norm: gnorm,
        });
        if gnorm <= opts.grad_tol {
            converged = true;
            break;
        }
        if iterations >= opts.max_iter {
            break;
        }

        let mut slope = g.dot(&d);
        if !(slope < 0.0) {
            d = -&g;
            slope = -g.norm_squared();
            prev_step = None;
        }
        let mut step = match prev_step {
            Some((s, prev_slope)) => (s * prev_slope / slope).min(s * 10.0),
            None => (1.0 / gnorm).min(1.0),
        };

        let mut accepted = None;
        for attempt in 0..2 {
            let mut backtracks = 0;
            loop {
                let trial = &x + step * &d;
                let ft = f.value(&trial);
                if ft.is_finite() && ft < fx && ft <= fx + opts.armijo_c * step * slope {
                    accepted = Some((trial, ft));
                    break;
                }
                backtracks += 1;
                if backtracks > opts.max_backtracks {
                    break;
                }
                step *= opts.shrink;
            }
            if accepted.is_some() {
                if backtracks == 0 {
                    // the first trial was fine, see if a longer step helps
                    for _ in 0..10 {
                        let longer = step / opts.shrink;
                        let trial = &x + longer * &d;
                        let ft = f.value(&trial);
                        let best = accepted.as_ref().map(|(_, v)| *v).unwrap();
                        if ft.is_finite() && ft < best && ft <= fx + opts.armijo_c * longer * slope {
                            step = longer;
                            accepted = Some((trial, ft));
                        } else {
                            break;
                        }
                    }
                }
                // one safeguarded quadratic-interpolation refinement
                let (_, fa) = accepted.as_ref().unwrap();
                let curv = 2.0 * (fa - fx - slope * step);
                if curv > 0.0 {
                    let q = -slope * step * step / curv;
                    if q.is_finite() && q > 0.1 * step && q < 10.0 * step && (q - step).abs() > 0.01 * step {
                        let trial = &x + q * &d;
                        let ft = f.value(&trial);
                        if ft.is_finite() && ft < *fa && ft <= fx + opts.armijo_c * q * slope {
                            step = q;
                            accepted = Some((trial, ft));
                        }
                    }
                }
                break;
            }
            if attempt == 0 && prev_step.is_some() {
                // retry along steepest descent before giving up
                d = -&g;
                slope = -g.norm_squared();
                step = (1.0 / gnorm).min(1.0);
                prev_step = None;
            } else {
                break;
            }
        }

        let Some((x_new, _)) = accepted else {
            break;
        };
        let (f_new, g_new) = f.value_and_grad(&x_new);
        iterations += 1;
        if !f_new.is_finite() || g_new.iter().any(|v| !v.is_finite()) {
            break;
        }
        let beta_pr = (g_new.dot(&g_new) - g_new.dot(&g)) / g.norm_squared();
        let beta = beta_pr.max(0.0);
        d = -&g_new + beta * &d;
        prev_step = Some((step, slope));
        x = x_new;
        fx = f_new;
        g = g_new;
    }

    Some(CgOutcome {
        grad_norm: sup_norm(&g),
        x,
        value: fx,
        iterations,
        converged,
        trace,
    })
}

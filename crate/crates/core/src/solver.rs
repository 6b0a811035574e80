//! L-BFGS minimizer with Armijo backtracking line search.

use crate::error::{Error, Result};

/// Solver hyperparameters. The attack layer owns flattening flow fields into
/// the solver's vector space.
#[derive(Debug, Clone)]
pub struct LbfgsConfig {
    /// Number of curvature pairs kept; 0 degrades to gradient descent.
    pub history_size: usize,
    pub max_iterations: usize,
    /// Terminate when the gradient L2 norm drops below this.
    pub grad_tol: f64,
    /// Armijo sufficient-decrease constant.
    pub armijo_c: f64,
    /// Step shrink factor per backtrack.
    pub backtrack_factor: f64,
    pub max_line_search_steps: usize,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        LbfgsConfig {
            history_size: 10,
            max_iterations: 300,
            grad_tol: 1e-6,
            armijo_c: 1e-4,
            backtrack_factor: 0.5,
            max_line_search_steps: 20,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Converged,
    MaxIterations,
    LineSearchFailure,
}

/// Record of one solve; objective values cover x0 plus every accepted step
/// and are non-increasing by construction.
#[derive(Debug, Clone)]
pub struct SolveTrace {
    pub iterations: usize,
    pub objective_values: Vec<f64>,
    pub final_grad_norm: f64,
    pub termination: Termination,
}

/// A deterministic differentiable function. `value` exists separately so
/// line-search probes can skip the backward pass.
pub trait Objective {
    fn value(&mut self, x: &[f64]) -> Result<f64>;
    fn value_grad(&mut self, x: &[f64]) -> Result<(f64, Vec<f64>)>;
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Minimize `obj` from `x0` using the two-loop recursion over the last
/// `history_size` curvature pairs, Armijo backtracking from step 1.0, and
/// skipping curvature pairs with y's <= 1e-10.
pub fn lbfgs_minimize<O: Objective>(
    obj: &mut O,
    x0: &[f64],
    cfg: &LbfgsConfig,
) -> Result<(Vec<f64>, SolveTrace)> {
    if !x0.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("initial point".into()));
    }
    let mut x = x0.to_vec();
    let (mut fx, mut grad) = obj.value_grad(&x)?;
    if !fx.is_finite() {
        return Err(Error::NonFinite("objective at initial point".into()));
    }

    let mut values = vec![fx];
    let mut s_hist: Vec<Vec<f64>> = Vec::new();
    let mut y_hist: Vec<Vec<f64>> = Vec::new();
    let mut rho_hist: Vec<f64> = Vec::new();

    let mut termination = Termination::MaxIterations;
    let mut iterations = 0;

    for _ in 0..cfg.max_iterations {
        let gnorm = norm(&grad);
        if gnorm <= cfg.grad_tol {
            termination = Termination::Converged;
            break;
        }

        let mut p = two_loop(&grad, &s_hist, &y_hist, &rho_hist);
        let mut slope = dot(&grad, &p);
        if slope >= 0.0 {
            // stale curvature produced a non-descent direction
            p = grad.iter().map(|g| -g).collect();
            slope = -gnorm * gnorm;
        }

        let mut alpha = 1.0;
        let mut accepted: Option<(Vec<f64>, f64)> = None;
        for _ in 0..cfg.max_line_search_steps {
            let cand: Vec<f64> = x.iter().zip(&p).map(|(xi, pi)| xi + alpha * pi).collect();
            let fc = obj.value(&cand)?;
            if fc.is_finite() && fc <= fx + cfg.armijo_c * alpha * slope {
                accepted = Some((cand, fc));
                break;
            }
            alpha *= cfg.backtrack_factor;
        }

        let (x_new, _) = match accepted {
            Some(a) => a,
            None => {
                termination = Termination::LineSearchFailure;
                break;
            }
        };

        let (f_new, g_new) = obj.value_grad(&x_new)?;
        if cfg.history_size > 0 {
            let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
            let y: Vec<f64> = g_new.iter().zip(&grad).map(|(a, b)| a - b).collect();
            let ys = dot(&y, &s);
            if ys > 1e-10 {
                if s_hist.len() == cfg.history_size {
                    s_hist.remove(0);
                    y_hist.remove(0);
                    rho_hist.remove(0);
                }
                s_hist.push(s);
                y_hist.push(y);
                rho_hist.push(1.0 / ys);
            } else {
                // a rejected pair means the stored curvature no longer
                // describes the local landscape; restart from steepest
                // descent rather than crawling on the stale approximation
                s_hist.clear();
                y_hist.clear();
                rho_hist.clear();
            }
        }

        x = x_new;
        fx = f_new;
        grad = g_new;
        values.push(fx);
        iterations += 1;
    }

    Ok((
        x,
        SolveTrace {
            iterations,
            objective_values: values,
            final_grad_norm: norm(&grad),
            termination,
        },
    ))
}

fn two_loop(grad: &[f64], s_hist: &[Vec<f64>], y_hist: &[Vec<f64>], rho_hist: &[f64]) -> Vec<f64> {
    let m = s_hist.len();
    let mut q = grad.to_vec();
    if m == 0 {
        for v in q.iter_mut() {
            *v = -*v;
        }
        return q;
    }
    let mut alpha = vec![0.0; m];
    for i in (0..m).rev() {
        alpha[i] = rho_hist[i] * dot(&s_hist[i], &q);
        for (qv, yv) in q.iter_mut().zip(&y_hist[i]) {
            *qv -= alpha[i] * yv;
        }
    }
    // initial scaling H0 = (s.y / y.y) I from the newest pair
    let last = m - 1;
    let yy = dot(&y_hist[last], &y_hist[last]);
    let gamma = if yy > 0.0 {
        dot(&s_hist[last], &y_hist[last]) / yy
    } else {
        1.0
    };
    for v in q.iter_mut() {
        *v *= gamma;
    }
    for i in 0..m {
        let beta = rho_hist[i] * dot(&y_hist[i], &q);
        let c = alpha[i] - beta;
        for (qv, sv) in q.iter_mut().zip(&s_hist[i]) {
            *qv += c * sv;
        }
    }
    for v in q.iter_mut() {
        *v = -*v;
    }
    q
}

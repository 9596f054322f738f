//! Limited-memory BFGS for smooth unconstrained problems.
//!
//! The line search is the bracketing/bisection weak-Wolfe scheme of Lewis and
//! Overton, which only needs a C¹ objective.

use std::collections::VecDeque;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LbfgsParams {
    pub memory: usize,
    pub max_iterations: usize,
    /// Stop when `max|g| <= g_tolerance * max(1, max|x|)`.
    pub g_tolerance: f64,
    /// Stop when the relative decrease over one iteration falls below this.
    pub f_tolerance: f64,
    /// Sufficient-decrease constant.
    pub c1: f64,
    /// Curvature constant.
    pub c2: f64,
    pub max_line_search: usize,
}

impl Default for LbfgsParams {
    fn default() -> Self {
        Self {
            memory: 8,
            max_iterations: 60,
            g_tolerance: 1e-6,
            f_tolerance: 1e-10,
            c1: 1e-4,
            c2: 0.9,
            max_line_search: 40,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    GradientTolerance,
    CostTolerance,
    MaxIterations,
    LineSearchFailed,
}

#[derive(Debug, Clone)]
pub struct LbfgsResult {
    pub x: Vec<f64>,
    pub cost: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub termination: Termination,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// Minimizes `f`, which writes the gradient into its second argument and
/// returns the cost.
pub fn minimize<F>(mut f: F, x0: &[f64], params: &LbfgsParams) -> LbfgsResult
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    let n = x0.len();
    let mut x = x0.to_vec();
    let mut g = vec![0.0; n];
    let mut fx = f(&x, &mut g);
    let mut evaluations = 1;
    let mut history: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(params.memory);
    let mut d = vec![0.0; n];
    let mut x_new = vec![0.0; n];
    let mut g_new = vec![0.0; n];
    let mut alpha_buf = vec![0.0; params.memory];

    let converged = |g: &[f64], x: &[f64]| inf_norm(g) <= params.g_tolerance * inf_norm(x).max(1.0);
    if n == 0 || converged(&g, &x) {
        return LbfgsResult {
            x,
            cost: fx,
            iterations: 0,
            evaluations,
            termination: Termination::GradientTolerance,
        };
    }

    let mut termination = Termination::MaxIterations;
    let mut iterations = 0;
    while iterations < params.max_iterations {
        iterations += 1;
        // Two-loop recursion: d = -H g.
        d.copy_from_slice(&g);
        for (k, (s, y, rho)) in history.iter().enumerate().rev() {
            let a = rho * dot(s, &d);
            alpha_buf[k] = a;
            for i in 0..n {
                d[i] -= a * y[i];
            }
        }
        let gamma = history
            .back()
            .map(|(s, y, _)| dot(s, y) / dot(y, y))
            .unwrap_or_else(|| 1.0 / inf_norm(&g).max(1.0));
        for v in d.iter_mut() {
            *v *= gamma;
        }
        for (k, (s, y, rho)) in history.iter().enumerate() {
            let b = rho * dot(y, &d);
            for i in 0..n {
                d[i] += (alpha_buf[k] - b) * s[i];
            }
        }
        for v in d.iter_mut() {
            *v = -*v;
        }
        let mut slope = dot(&g, &d);
        if slope >= 0.0 {
            // Not a descent direction; restart from steepest descent.
            history.clear();
            let scale = 1.0 / inf_norm(&g).max(1.0);
            for i in 0..n {
                d[i] = -g[i] * scale;
            }
            slope = dot(&g, &d);
        }

        // Weak Wolfe line search by bracketing and bisection.
        let mut lo = 0.0;
        let mut hi = f64::INFINITY;
        let mut step = 1.0;
        let mut accepted = false;
        let mut f_new = fx;
        for _ in 0..params.max_line_search {
            for i in 0..n {
                x_new[i] = x[i] + step * d[i];
            }
            f_new = f(&x_new, &mut g_new);
            evaluations += 1;
            if !f_new.is_finite() || f_new > fx + params.c1 * step * slope {
                hi = step;
            } else if dot(&g_new, &d) < params.c2 * slope {
                lo = step;
            } else {
                accepted = true;
                break;
            }
            step = if hi.is_finite() { 0.5 * (lo + hi) } else { 2.0 * lo };
        }
        if !accepted {
            // Keep the best sufficient-decrease point found, if any.
            if lo > 0.0 {
                for i in 0..n {
                    x_new[i] = x[i] + lo * d[i];
                }
                f_new = f(&x_new, &mut g_new);
                evaluations += 1;
            } else {
                termination = Termination::LineSearchFailed;
                break;
            }
        }

        let s: Vec<f64> = (0..n).map(|i| x_new[i] - x[i]).collect();
        let y: Vec<f64> = (0..n).map(|i| g_new[i] - g[i]).collect();
        let sy = dot(&s, &y);
        let decrease = fx - f_new;
        x.copy_from_slice(&x_new);
        g.copy_from_slice(&g_new);
        fx = f_new;
        if sy > 1e-12 * dot(&y, &y).sqrt() * dot(&s, &s).sqrt() {
            if history.len() == params.memory {
                history.pop_front();
            }
            history.push_back((s, y, 1.0 / sy));
        }
        if converged(&g, &x) {
            termination = Termination::GradientTolerance;
            break;
        }
        if decrease.abs() <= params.f_tolerance * fx.abs().max(1.0) {
            termination = Termination::CostTolerance;
            break;
        }
    }
    LbfgsResult {
        x,
        cost: fx,
        iterations,
        evaluations,
        termination,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rosenbrock(x: &[f64], g: &mut [f64]) -> f64 {
        let (a, b) = (x[0], x[1]);
        g[0] = -2.0 * (1.0 - a) - 400.0 * a * (b - a * a);
        g[1] = 200.0 * (b - a * a);
        (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2)
    }

    #[test]
    fn solves_rosenbrock() {
        let params = LbfgsParams {
            max_iterations: 500,
            ..Default::default()
        };
        let r = minimize(rosenbrock, &[-1.2, 1.0], &params);
        assert!((r.x[0] - 1.0).abs() < 1e-4, "{r:?}");
        assert!((r.x[1] - 1.0).abs() < 1e-4, "{r:?}");
    }

    #[test]
    fn quadratic_converges_fast() {
        let diag = [1.0, 10.0, 100.0, 0.5];
        let f = |x: &[f64], g: &mut [f64]| {
            let mut c = 0.0;
            for i in 0..4 {
                g[i] = diag[i] * (x[i] - 1.0);
                c += 0.5 * diag[i] * (x[i] - 1.0).powi(2);
            }
            c
        };
        let r = minimize(f, &[0.0; 4], &LbfgsParams::default());
        assert!(r.iterations < 30);
        assert!(r.x.iter().all(|v| (v - 1.0).abs() < 1e-5));
    }

    #[test]
    fn empty_problem_is_a_no_op() {
        let r = minimize(|_, _| 3.0, &[], &LbfgsParams::default());
        assert_eq!(r.iterations, 0);
        assert_eq!(r.cost, 3.0);
    }

    #[test]
    fn c1_piecewise_objective() {
        // Cubic barrier: zero below 1, (x - 1)^3 above, plus a pull toward 3.
        let f = |x: &[f64], g: &mut [f64]| {
            let v = x[0] - 1.0;
            let (b, db) = if v > 0.0 { (v.powi(3), 3.0 * v * v) } else { (0.0, 0.0) };
            g[0] = 10.0 * db - 2.0 * (3.0 - x[0]) * 0.1;
            10.0 * b + 0.1 * (3.0 - x[0]).powi(2)
        };
        let r = minimize(f, &[0.0], &LbfgsParams { max_iterations: 200, ..Default::default() });
        // Stationary point: 30 v^2 = 0.2 (2 - v).
        let v = r.x[0] - 1.0;
        assert!((30.0 * v * v - 0.2 * (2.0 - v)).abs() < 1e-5, "{r:?}");
    }
}

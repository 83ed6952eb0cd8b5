//! Limited-memory BFGS for smooth unconstrained minimization.

use std::collections::VecDeque;

#[derive(Debug, Clone, Copy)]
pub struct LbfgsOptions {
    pub memory: usize,
    /// Stop once the gradient norm falls to this value.
    pub gradient_tolerance: f64,
    pub max_iterations: usize,
}

#[derive(Debug, Clone)]
pub struct LbfgsResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub gradient_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Minimizes `f`, which returns the value and writes the gradient into its
/// second argument. The iterate never increases `f`.
pub fn minimize<F>(mut f: F, x0: Vec<f64>, opts: &LbfgsOptions) -> LbfgsResult
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    let n = x0.len();
    let mut x = x0;
    let mut g = vec![0.0; n];
    let mut fx = f(&x, &mut g);
    let mut gnorm = norm(&g);
    let mut history: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(opts.memory);
    let mut alpha = vec![0.0; opts.memory];

    let mut x_new = vec![0.0; n];
    let mut g_new = vec![0.0; n];
    let mut dir = vec![0.0; n];
    let mut iterations = 0;

    while gnorm > opts.gradient_tolerance && iterations < opts.max_iterations {
        iterations += 1;

        // Two-loop recursion for dir = -H g.
        dir.iter_mut().zip(&g).for_each(|(d, gi)| *d = -gi);
        for (j, (s, y, rho)) in history.iter().enumerate().rev() {
            alpha[j] = rho * dot(s, &dir);
            dir.iter_mut().zip(y).for_each(|(d, yi)| *d -= alpha[j] * yi);
        }
        let gamma = history
            .back()
            .map(|(s, y, _)| dot(s, y) / dot(y, y))
            .unwrap_or(1.0 / gnorm.max(1.0));
        dir.iter_mut().for_each(|d| *d *= gamma);
        for (j, (s, y, rho)) in history.iter().enumerate() {
            let beta = rho * dot(y, &dir);
            dir.iter_mut().zip(s).for_each(|(d, si)| *d += (alpha[j] - beta) * si);
        }

        let mut slope = dot(&g, &dir);
        let steepest = history.is_empty();
        if slope >= -1e-8 * gnorm * norm(&dir) {
            // Curvature information went stale (not a descent direction, or
            // nearly orthogonal to the gradient); restart from steepest descent.
            history.clear();
            dir.iter_mut().zip(&g).for_each(|(d, gi)| *d = -gi / gnorm.max(1.0));
            slope = dot(&g, &dir);
        }

        // Backtracking line search on the Armijo condition.
        let mut step = 1.0;
        let mut accepted = false;
        let mut f_new = fx;
        for _ in 0..60 {
            x_new
                .iter_mut()
                .zip(&x)
                .zip(&dir)
                .for_each(|((xn, xi), d)| *xn = xi + step * d);
            f_new = f(&x_new, &mut g_new);
            if f_new.is_finite() && f_new <= fx + 1e-4 * step * slope {
                accepted = true;
                break;
            }
            // Near the optimum the decrease drops below rounding in `f`; the
            // gradient is still informative there.
            if f_new.is_finite() && f_new <= fx && norm(&g_new) < gnorm {
                accepted = true;
                break;
            }
            // Near the optimum the decrease drops below rounding in `f`; the
            // gradient is still informative there.
            if f_new.is_finite() && f_new <= fx && norm(&g_new) < gnorm {
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted || f_new > fx {
            break;
        }
        let g_new_norm = norm(&g_new);
        if f_new == fx && g_new_norm >= gnorm {
            if steepest {
                // Even steepest descent makes no progress at this precision.
                break;
            }
            history.clear();
            continue;
        }

        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * norm(&s) * norm(&y) {
            if history.len() == opts.memory {
                history.pop_front();
            }
            history.push_back((s, y, 1.0 / sy));
        }
        std::mem::swap(&mut x, &mut x_new);
        std::mem::swap(&mut g, &mut g_new);
        fx = f_new;
        gnorm = g_new_norm;
    }

    LbfgsResult {
        converged: gnorm <= opts.gradient_tolerance,
        x,
        value: fx,
        gradient_norm: gnorm,
        iterations,
    }
}

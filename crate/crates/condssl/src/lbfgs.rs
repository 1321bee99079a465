//! Deterministic limited-memory BFGS with Armijo backtracking, the solver
//! behind every probe. All math is f64; no randomness enters anywhere, so a
//! fixed objective and start point always produce the same minimizer.

use ndarray::Array1;

#[derive(Debug, Clone)]
pub struct LbfgsParams {
    pub max_iters: usize,
    /// Curvature pairs kept for the two-loop recursion.
    pub history: usize,
    /// Stop when ||g||_inf falls below this times max(1, |f|).
    pub grad_tol: f64,
}

impl Default for LbfgsParams {
    fn default() -> Self {
        LbfgsParams { max_iters: 5000, history: 10, grad_tol: 1e-7 }
    }
}

#[derive(Debug)]
pub struct MinimizeOutcome {
    pub x: Array1<f64>,
    pub f: f64,
    pub grad_inf_norm: f64,
    pub iterations: usize,
    /// False when the iteration or line-search budget ran out first.
    pub converged: bool,
}

fn inf_norm(v: &Array1<f64>) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Minimizes `objective`, which must write the gradient at `x` into its
/// second argument and return f(x).
pub fn minimize(
    mut objective: impl FnMut(&Array1<f64>, &mut Array1<f64>) -> f64,
    x0: Array1<f64>,
    params: &LbfgsParams,
) -> MinimizeOutcome {
    let n = x0.len();
    let mut x = x0;
    let mut g = Array1::zeros(n);
    let mut f = objective(&x, &mut g);

    // Rolling (s, y, 1/yᵀs) memory, newest last.
    let mut mem: Vec<(Array1<f64>, Array1<f64>, f64)> = Vec::with_capacity(params.history);
    let mut iterations = 0;
    let mut stagnant = 0usize;

    while iterations < params.max_iters {
        let gnorm = inf_norm(&g);
        if gnorm <= params.grad_tol * f.abs().max(1.0) {
            return MinimizeOutcome { x, f, grad_inf_norm: gnorm, iterations, converged: true };
        }

        // Two-loop recursion for d = -H·g.
        let mut d = -g.clone();
        let mut alphas = Vec::with_capacity(mem.len());
        for (s, y, rho) in mem.iter().rev() {
            let a = rho * s.dot(&d);
            d.scaled_add(-a, y);
            alphas.push(a);
        }
        if let Some((s, y, _)) = mem.last() {
            let scale = s.dot(y) / y.dot(y);
            d *= scale;
        }
        for ((s, y, rho), a) in mem.iter().zip(alphas.iter().rev()) {
            let b = rho * y.dot(&d);
            d.scaled_add(a - b, s);
        }

        let mut slope = g.dot(&d);
        if slope >= 0.0 {
            // Curvature memory went bad; fall back to steepest descent.
            mem.clear();
            d = -g.clone();
            slope = g.dot(&d);
        }

        // Armijo backtracking from a unit step (gradient-scaled on the very
        // first iteration, where no curvature information exists).
        let mut t = if mem.is_empty() { 1.0 / gnorm.max(1.0) } else { 1.0 };
        let mut g_new = Array1::zeros(n);
        let mut accepted = false;
        for _ in 0..60 {
            let x_new = &x + &(t * &d);
            let f_new = objective(&x_new, &mut g_new);
            if f_new.is_finite() && f_new <= f + 1e-4 * t * slope {
                let s = &x_new - &x;
                let yv = &g_new - &g;
                let sy = s.dot(&yv);
                // Only well-conditioned pairs may enter the memory.
                if sy > 1e-10 * s.dot(&s).sqrt() * yv.dot(&yv).sqrt() {
                    if mem.len() == params.history {
                        mem.remove(0);
                    }
                    mem.push((s, yv, 1.0 / sy));
                }
                // Two consecutive steps without measurable descent mean the
                // objective is flat at working precision; treat as solved.
                if f - f_new <= 1e-12 * f.abs().max(1.0) {
                    stagnant += 1;
                } else {
                    stagnant = 0;
                }
                x = x_new;
                std::mem::swap(&mut g, &mut g_new);
                f = f_new;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        iterations += 1;
        if !accepted {
            // No further progress possible at this precision.
            let gn = inf_norm(&g);
            return MinimizeOutcome { x, f, grad_inf_norm: gn, iterations, converged: false };
        }
        if stagnant >= 2 {
            let gn = inf_norm(&g);
            return MinimizeOutcome { x, f, grad_inf_norm: gn, iterations, converged: true };
        }
    }
    let gn = inf_norm(&g);
    let converged = gn <= params.grad_tol * f.abs().max(1.0);
    MinimizeOutcome { x, f, grad_inf_norm: gn, iterations, converged }
}

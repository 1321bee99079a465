//! Central finite-difference gradient verification, run in `f64`.
//!
//! The acceptance bar is a relative error below 1e-4 between analytic and
//! numeric derivatives; a small magnitude floor in the denominator keeps the
//! ratio meaningful where the true gradient is near zero.

use ndarray::Array2;
use rand::Rng;

use super::{grads_flat, params_flat, set_params_flat, Trainable};
use crate::rng::uniform;

/// Relative error with a magnitude floor: tiny gradients are compared at
/// absolute precision 1e-8, everything else at 1e-4 relative.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / (a.abs() + n.abs()).max(1e-4)
}

/// Central differences over every coordinate of `x0`, compared against the
/// provided analytic gradient. Returns the worst relative error.
pub fn max_rel_err_fd(f: &mut dyn FnMut(&[f64]) -> f64, x0: &[f64], analytic: &[f64]) -> f64 {
    assert_eq!(x0.len(), analytic.len());
    let mut x = x0.to_vec();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let h = 1e-5 * x0[i].abs().max(1.0);
        x[i] = x0[i] + h;
        let fp = f(&x);
        x[i] = x0[i] - h;
        let fm = f(&x);
        x[i] = x0[i];
        let numeric = (fp - fm) / (2.0 * h);
        worst = worst.max(rel_err(analytic[i], numeric));
    }
    worst
}

/// Verifies a module's backward pass against finite differences, over both
/// its input and every trainable parameter. The output is scalarized by a
/// fixed random projection so all coordinates influence the loss.
///
/// `forward` may mutate the module (batch-norm running statistics); those
/// updates do not feed back into the same step's loss, so finite differences
/// remain valid.
pub fn check_function_grad<M, C>(
    module: &M,
    x: &Array2<f64>,
    forward: impl Fn(&mut M, &Array2<f64>) -> (Array2<f64>, C),
    backward: impl Fn(&mut M, &C, &Array2<f64>) -> Array2<f64>,
    rng: &mut impl Rng,
) -> f64
where
    M: Clone + Trainable<f64>,
{
    let mut probe = module.clone();
    let (y0, _) = forward(&mut probe, x);
    let r = Array2::from_shape_fn(y0.raw_dim(), |_| uniform(rng, -1.0, 1.0));

    // Analytic pass.
    let mut m = module.clone();
    m.zero_grads_all();
    let (_, cache) = forward(&mut m, x);
    let dx = backward(&mut m, &cache, &r);
    let analytic_params = grads_flat(&mut m);
    let theta0 = params_flat(&mut (module.clone()));

    // Numeric over parameters.
    let loss_at = |theta: &[f64]| {
        let mut m = module.clone();
        set_params_flat(&mut m, theta);
        let (y, _) = forward(&mut m, x);
        (&y * &r).sum()
    };
    let mut worst = max_rel_err_fd(&mut { |t: &[f64]| loss_at(t) }, &theta0, &analytic_params);

    // Numeric over the input.
    let x_flat: Vec<f64> = x.iter().copied().collect();
    let dx_flat: Vec<f64> = dx.iter().copied().collect();
    let shape = (x.nrows(), x.ncols());
    let mut loss_at_x = |xf: &[f64]| {
        let xa = Array2::from_shape_vec(shape, xf.to_vec()).unwrap();
        let mut m = module.clone();
        let (y, _) = forward(&mut m, &xa);
        (&y * &r).sum()
    };
    worst = worst.max(max_rel_err_fd(&mut loss_at_x, &x_flat, &dx_flat));
    worst
}

/// Verifies a pure loss `f(x) -> scalar` against its analytic input gradient.
pub fn check_loss_grad(
    f: &mut dyn FnMut(&Array2<f64>) -> f64,
    x: &Array2<f64>,
    analytic_dx: &Array2<f64>,
) -> f64 {
    let shape = (x.nrows(), x.ncols());
    let x_flat: Vec<f64> = x.iter().copied().collect();
    let a_flat: Vec<f64> = analytic_dx.iter().copied().collect();
    let mut g = |xf: &[f64]| {
        let xa = Array2::from_shape_vec(shape, xf.to_vec()).unwrap();
        f(&xa)
    };
    max_rel_err_fd(&mut g, &x_flat, &a_flat)
}

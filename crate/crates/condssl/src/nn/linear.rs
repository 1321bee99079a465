//! Dense layer and the plain MLP (linear layers with ReLU between, linear
//! output) that the projector, augmentation encoder, predictor, and probes
//! are built from.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;

use super::{Scalar, Tensors, Trainable};
use crate::rng;

/// Fully connected layer `y = x W^T + b`, weights `[out, in]`.
#[derive(Debug, Clone)]
pub struct Linear<F: Scalar> {
    pub w: Array2<F>,
    pub b: Array1<F>,
    pub gw: Array2<F>,
    pub gb: Array1<F>,
}

impl<F: Scalar> Linear<F> {
    /// Uniform `[-1/sqrt(in), 1/sqrt(in)]` init for weights and bias.
    pub fn new(in_dim: usize, out_dim: usize, rng_: &mut impl Rng) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let mut draw = || F::from_f64_(rng::uniform(rng_, -bound, bound));
        let w = Array2::from_shape_fn((out_dim, in_dim), |_| draw());
        let b = Array1::from_shape_fn(out_dim, |_| draw());
        Linear {
            gw: Array2::zeros(w.raw_dim()),
            gb: Array1::zeros(b.raw_dim()),
            w,
            b,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn forward(&self, x: &Array2<F>) -> Array2<F> {
        x.dot(&self.w.t()) + &self.b
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, x: &Array2<F>, dy: &Array2<F>) -> Array2<F> {
        self.gw += &dy.t().dot(x);
        self.gb += &dy.sum_axis(Axis(0));
        dy.dot(&self.w)
    }

    pub fn zero_grads(&mut self) {
        self.gw.fill(F::zero());
        self.gb.fill(F::zero());
    }
}

impl<F: Scalar> Tensors<F> for Linear<F> {
    fn tensors(&self, f: &mut dyn FnMut(&str, &[F])) {
        f("w", self.w.as_slice().expect("standard layout"));
        f("b", self.b.as_slice().expect("standard layout"));
    }
    fn tensors_mut(&mut self, f: &mut dyn FnMut(&str, &mut [F])) {
        f("w", self.w.as_slice_mut().expect("standard layout"));
        f("b", self.b.as_slice_mut().expect("standard layout"));
    }
}

impl<F: Scalar> Trainable<F> for Linear<F> {
    fn params_and_grads(&mut self, f: &mut dyn FnMut(&str, &mut [F], &mut [F])) {
        f("w", self.w.as_slice_mut().unwrap(), self.gw.as_slice_mut().unwrap());
        f("b", self.b.as_slice_mut().unwrap(), self.gb.as_slice_mut().unwrap());
    }
}

/// Multi-layer perceptron. `dims = [in, hidden.., out]`; a single-entry dims
/// list yields the identity map (zero layers), which is how "no projector"
/// and "raw conditioning passthrough" are expressed.
#[derive(Debug, Clone)]
pub struct Mlp<F: Scalar> {
    pub layers: Vec<Linear<F>>,
}

/// Activations captured during `forward`: `acts[i]` is the input to layer
/// `i`, `acts[len]` is the final output.
pub struct MlpCache<F: Scalar> {
    pub acts: Vec<Array2<F>>,
}

impl<F: Scalar> Mlp<F> {
    pub fn new(dims: &[usize], rng_: &mut impl Rng) -> Self {
        assert!(!dims.is_empty(), "dims must at least name the input width");
        let layers = dims
            .windows(2)
            .map(|w| Linear::new(w[0], w[1], rng_))
            .collect();
        Mlp { layers }
    }

    /// Builds the conventional stack: `depth` linear layers, all hidden
    /// widths equal. Depth zero is the identity.
    pub fn with_shape(in_dim: usize, hidden: usize, out_dim: usize, depth: usize, rng_: &mut impl Rng) -> Self {
        let mut dims = vec![in_dim];
        for _ in 1..depth.max(1) {
            dims.push(hidden);
        }
        if depth == 0 {
            return Mlp::new(&[in_dim], rng_);
        }
        dims.push(out_dim);
        Mlp::new(&dims, rng_)
    }

    /// All-zero parameters; used as a scratch shell whose parameters are
    /// overwritten before every use (hypernetwork-generated heads).
    pub fn zeros(dims: &[usize]) -> Self {
        assert!(!dims.is_empty(), "dims must at least name the input width");
        let layers = dims
            .windows(2)
            .map(|w| Linear {
                w: Array2::zeros((w[1], w[0])),
                b: Array1::zeros(w[1]),
                gw: Array2::zeros((w[1], w[0])),
                gb: Array1::zeros(w[1]),
            })
            .collect();
        Mlp { layers }
    }

    pub fn in_dim(&self) -> Option<usize> {
        self.layers.first().map(|l| l.in_dim())
    }

    pub fn out_dim(&self) -> Option<usize> {
        self.layers.last().map(|l| l.out_dim())
    }

    pub fn forward(&self, x: &Array2<F>) -> (Array2<F>, MlpCache<F>) {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.clone());
        for (i, layer) in self.layers.iter().enumerate() {
            let mut y = layer.forward(acts.last().unwrap());
            if i + 1 < self.layers.len() {
                y.mapv_inplace(|v| if v > F::zero() { v } else { F::zero() });
            }
            acts.push(y);
        }
        (acts.last().unwrap().clone(), MlpCache { acts })
    }

    pub fn forward_nograd(&self, x: &Array2<F>) -> Array2<F> {
        let mut cur = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            cur = layer.forward(&cur);
            if i + 1 < self.layers.len() {
                cur.mapv_inplace(|v| if v > F::zero() { v } else { F::zero() });
            }
        }
        cur
    }

    pub fn backward(&mut self, cache: &MlpCache<F>, dy: &Array2<F>) -> Array2<F> {
        let mut grad = dy.clone();
        for i in (0..self.layers.len()).rev() {
            if i + 1 < self.layers.len() {
                // ReLU mask from the cached post-activation input of the next layer.
                let post = &cache.acts[i + 1];
                grad.zip_mut_with(post, |g, &a| {
                    if a <= F::zero() {
                        *g = F::zero();
                    }
                });
            }
            grad = self.layers[i].backward(&cache.acts[i], &grad);
        }
        grad
    }

    pub fn zero_grads(&mut self) {
        for l in &mut self.layers {
            l.zero_grads();
        }
    }
}

impl<F: Scalar> Tensors<F> for Mlp<F> {
    fn tensors(&self, f: &mut dyn FnMut(&str, &[F])) {
        for (i, l) in self.layers.iter().enumerate() {
            l.tensors(&mut |name, data| f(&format!("l{i}.{name}"), data));
        }
    }
    fn tensors_mut(&mut self, f: &mut dyn FnMut(&str, &mut [F])) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.tensors_mut(&mut |name, data| f(&format!("l{i}.{name}"), data));
        }
    }
}

impl<F: Scalar> Trainable<F> for Mlp<F> {
    fn params_and_grads(&mut self, f: &mut dyn FnMut(&str, &mut [F], &mut [F])) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.params_and_grads(&mut |name, p, g| f(&format!("l{i}.{name}"), p, g));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::check_function_grad;
    use crate::rng::stream;
    use ndarray::Array2;

    #[test]
    fn depth_zero_is_identity() {
        let mut r = stream(1, "mlp", &[]);
        let mlp: Mlp<f64> = Mlp::with_shape(5, 16, 5, 0, &mut r);
        let x = Array2::from_shape_fn((3, 5), |(i, j)| (i * 5 + j) as f64);
        let (y, _) = mlp.forward(&x);
        assert_eq!(y, x);
        assert_eq!(mlp.layers.len(), 0);
    }

    #[test]
    fn shapes_follow_depth() {
        let mut r = stream(2, "mlp", &[]);
        let mlp: Mlp<f64> = Mlp::with_shape(14, 64, 32, 6, &mut r);
        assert_eq!(mlp.layers.len(), 6);
        assert_eq!(mlp.in_dim(), Some(14));
        assert_eq!(mlp.out_dim(), Some(32));
        assert!(mlp.layers[1..5].iter().all(|l| l.out_dim() == 64));
        let one: Mlp<f64> = Mlp::with_shape(8, 64, 4, 1, &mut r);
        assert_eq!(one.layers.len(), 1);
        assert_eq!((one.in_dim().unwrap(), one.out_dim().unwrap()), (8, 4));
    }

    #[test]
    fn mlp_gradients_match_finite_differences() {
        let mut r = stream(3, "mlp-grad", &[]);
        let mlp: Mlp<f64> = Mlp::with_shape(6, 10, 4, 3, &mut r);
        let x = Array2::from_shape_fn((5, 6), |_| crate::rng::uniform(&mut r, -1.0, 1.0));
        let max_rel = check_function_grad(
            &mlp,
            &x,
            |m, x| m.forward(x),
            |m, cache, dy| m.backward(cache, dy),
            &mut stream(4, "mlp-grad-w", &[]),
        );
        assert!(max_rel < 1e-6, "max rel err {max_rel}");
    }

    #[test]
    fn ema_endpoints() {
        let mut r = stream(5, "ema", &[]);
        let online: Mlp<f64> = Mlp::with_shape(4, 8, 3, 2, &mut r);
        let init: Mlp<f64> = Mlp::with_shape(4, 8, 3, 2, &mut r);

        let mut t = init.clone();
        crate::nn::ema_update(&mut t, &online, 0.0);
        let mut want = Vec::new();
        online.tensors(&mut |_, d| want.extend_from_slice(d));
        let mut got = Vec::new();
        t.tensors(&mut |_, d| got.extend_from_slice(d));
        assert_eq!(want, got, "m = 0 copies online exactly");

        let mut t = init.clone();
        crate::nn::ema_update(&mut t, &online, 1.0);
        let mut orig = Vec::new();
        init.tensors(&mut |_, d| orig.extend_from_slice(d));
        let mut got = Vec::new();
        t.tensors(&mut |_, d| got.extend_from_slice(d));
        assert_eq!(orig, got, "m = 1 leaves the target untouched");
    }
}

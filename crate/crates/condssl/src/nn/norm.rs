//! Batch normalization over the rows of a channel-last matrix. The same
//! implementation serves 2d feature maps (rows = n*h*w) and flat feature
//! batches (rows = n).

use ndarray::{Array1, Array2, Axis};

use super::{Scalar, Tensors, Trainable};

#[derive(Debug, Clone)]
pub struct BatchNorm<F: Scalar> {
    pub gamma: Array1<F>,
    pub beta: Array1<F>,
    pub running_mean: Array1<F>,
    pub running_var: Array1<F>,
    pub ggamma: Array1<F>,
    pub gbeta: Array1<F>,
    pub momentum: f64,
    pub eps: f64,
}

pub struct BnCache<F: Scalar> {
    pub xhat: Array2<F>,
    pub invstd: Array1<F>,
}

impl<F: Scalar> BatchNorm<F> {
    pub fn new(c: usize) -> Self {
        BatchNorm {
            gamma: Array1::from_elem(c, F::one()),
            beta: Array1::zeros(c),
            running_mean: Array1::zeros(c),
            running_var: Array1::from_elem(c, F::one()),
            ggamma: Array1::zeros(c),
            gbeta: Array1::zeros(c),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    /// Normalizes with batch statistics and updates the running estimates
    /// (biased variance normalizes, unbiased updates, the usual convention).
    pub fn forward_train(&mut self, x: &Array2<F>) -> (Array2<F>, BnCache<F>) {
        let n = x.nrows();
        assert!(n >= 2, "batch norm needs at least 2 rows, got {n}");
        let nf = F::from_f64_(n as f64);
        let mean = x.sum_axis(Axis(0)) / nf;
        let centered = x - &mean;
        let var = centered.mapv(|v| v * v).sum_axis(Axis(0)) / nf;
        let eps = F::from_f64_(self.eps);
        let invstd = var.mapv(|v| F::one() / (v + eps).sqrt());
        let xhat = &centered * &invstd;
        let y = &xhat * &self.gamma + &self.beta;

        let mom = F::from_f64_(self.momentum);
        let keep = F::one() - mom;
        let unbias = F::from_f64_(n as f64 / (n as f64 - 1.0));
        self.running_mean = self.running_mean.mapv(|v| v * keep) + mean.mapv(|v| v * mom);
        self.running_var =
            self.running_var.mapv(|v| v * keep) + var.mapv(|v| v * unbias * mom);
        (y, BnCache { xhat, invstd })
    }

    pub fn forward_eval(&self, x: &Array2<F>) -> Array2<F> {
        let eps = F::from_f64_(self.eps);
        let invstd = self.running_var.mapv(|v| F::one() / (v + eps).sqrt());
        let xhat = (x - &self.running_mean) * &invstd;
        &xhat * &self.gamma + &self.beta
    }

    /// Training-mode statistics without side effects: normalizes with the
    /// batch mean/variance but leaves the running estimates untouched. The
    /// momentum (key) branch uses this so that only the EMA rule ever moves
    /// the key encoder.
    pub fn forward_batchstats(&self, x: &Array2<F>) -> Array2<F> {
        let n = x.nrows();
        assert!(n >= 2, "batch norm needs at least 2 rows, got {n}");
        let nf = F::from_f64_(n as f64);
        let mean = x.sum_axis(Axis(0)) / nf;
        let centered = x - &mean;
        let var = centered.mapv(|v| v * v).sum_axis(Axis(0)) / nf;
        let eps = F::from_f64_(self.eps);
        let invstd = var.mapv(|v| F::one() / (v + eps).sqrt());
        let xhat = &centered * &invstd;
        &xhat * &self.gamma + &self.beta
    }

    pub fn backward(&mut self, cache: &BnCache<F>, dy: &Array2<F>) -> Array2<F> {
        let n = dy.nrows();
        let nf = F::from_f64_(n as f64);
        let sum_dy = dy.sum_axis(Axis(0));
        let sum_dy_xhat = (dy * &cache.xhat).sum_axis(Axis(0));
        self.ggamma += &sum_dy_xhat;
        self.gbeta += &sum_dy;

        // dx = gamma * invstd / n * (n*dy - sum(dy) - xhat * sum(dy*xhat))
        let coef = &self.gamma * &cache.invstd / nf;
        let term = dy.mapv(|v| v * nf) - &sum_dy - &cache.xhat * &sum_dy_xhat;
        term * &coef
    }
}

impl<F: Scalar> Tensors<F> for BatchNorm<F> {
    fn tensors(&self, f: &mut dyn FnMut(&str, &[F])) {
        f("gamma", self.gamma.as_slice().unwrap());
        f("beta", self.beta.as_slice().unwrap());
        f("running_mean", self.running_mean.as_slice().unwrap());
        f("running_var", self.running_var.as_slice().unwrap());
    }
    fn tensors_mut(&mut self, f: &mut dyn FnMut(&str, &mut [F])) {
        f("gamma", self.gamma.as_slice_mut().unwrap());
        f("beta", self.beta.as_slice_mut().unwrap());
        f("running_mean", self.running_mean.as_slice_mut().unwrap());
        f("running_var", self.running_var.as_slice_mut().unwrap());
    }
}

impl<F: Scalar> Trainable<F> for BatchNorm<F> {
    fn params_and_grads(&mut self, f: &mut dyn FnMut(&str, &mut [F], &mut [F])) {
        f(
            "gamma",
            self.gamma.as_slice_mut().unwrap(),
            self.ggamma.as_slice_mut().unwrap(),
        );
        f(
            "beta",
            self.beta.as_slice_mut().unwrap(),
            self.gbeta.as_slice_mut().unwrap(),
        );
    }
}

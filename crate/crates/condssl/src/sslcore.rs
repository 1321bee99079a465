//! The four self-supervised objectives, the key-feature queue, and the
//! momentum (EMA) update.
//!
//! Every loss returns its value together with analytic input gradients and is
//! verified against finite differences. Conventions, fixed here and assumed
//! by the frozen oracles in the tests:
//!
//! * `info_nce` and `nt_xent` take unit-normalized rows and reject anything
//!   whose norm strays beyond 1e-4; normalization itself is a separate
//!   differentiable op ([`l2_normalize_rows`]).
//! * `barlow_twins_loss` standardizes each column internally (biased
//!   variance), so its cross-correlation precondition holds by construction.
//! * `simsiam_loss` treats the projector branches as constants: only the
//!   predictor outputs receive gradient.

use ndarray::{s, Array1, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Scalar, Tensors};

/// Row norms may drift this far from 1 before the InfoNCE-family losses
/// reject the batch.
pub const NORM_TOL: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Simclr,
    MocoV2,
    BarlowTwins,
    Simsiam,
}

/// Method-specific knobs; unused fields keep their defaults so one struct
/// serves all four objectives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodConfig {
    pub method: Method,
    pub temperature: f64,
    /// Key queue capacity (momentum-contrast only).
    pub queue_size: usize,
    /// EMA coefficient for the key encoder (momentum-contrast only).
    pub momentum: f64,
    /// Off-diagonal weight of the cross-correlation loss.
    pub bt_lambda: f64,
    /// Hidden width of the 2-layer predictor (stop-gradient method only).
    pub predictor_hidden: usize,
}

impl MethodConfig {
    pub fn defaults(method: Method) -> Self {
        let mut c = MethodConfig {
            method,
            temperature: 0.5,
            queue_size: 4096,
            momentum: 0.99,
            bt_lambda: 5e-3,
            predictor_hidden: 512,
        };
        if method == Method::MocoV2 {
            c.temperature = 0.2;
        }
        c
    }

    pub fn validate(&self, batch_size: usize) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::config("temperature must be positive"));
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return Err(Error::config("momentum must lie in [0, 1]"));
        }
        if self.bt_lambda < 0.0 {
            return Err(Error::config("bt_lambda must be non-negative"));
        }
        if self.method == Method::MocoV2 {
            if self.queue_size == 0 || batch_size == 0 || self.queue_size % batch_size != 0 {
                return Err(Error::config(format!(
                    "queue size {} must be a positive multiple of the batch size {batch_size}",
                    self.queue_size
                )));
            }
        }
        if self.method == Method::Simsiam && self.predictor_hidden == 0 {
            return Err(Error::config("predictor_hidden must be positive"));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Row normalization.

pub struct NormCache<F: Scalar> {
    pub y: Array2<F>,
    norms: Array1<F>,
}

/// `y_i = x_i / ||x_i||`. Zero rows have no direction and are rejected.
pub fn l2_normalize_rows<F: Scalar>(x: &Array2<F>) -> Result<(Array2<F>, NormCache<F>)> {
    let mut norms = Array1::zeros(x.nrows());
    for (i, row) in x.axis_iter(Axis(0)).enumerate() {
        let n = row.dot(&row).sqrt();
        if n.to_f64_() < 1e-12 {
            return Err(Error::numeric(format!("cannot normalize zero row {i}")));
        }
        norms[i] = n;
    }
    let mut y = x.clone();
    for (i, mut row) in y.axis_iter_mut(Axis(0)).enumerate() {
        row.mapv_inplace(|v| v / norms[i]);
    }
    Ok((y.clone(), NormCache { y, norms }))
}

/// `dx_i = (dy_i − y_i (y_i · dy_i)) / ||x_i||`.
pub fn l2_normalize_rows_backward<F: Scalar>(cache: &NormCache<F>, dy: &Array2<F>) -> Array2<F> {
    let mut dx = dy.clone();
    for i in 0..dy.nrows() {
        let y = cache.y.row(i);
        let proj = y.dot(&dy.row(i));
        let inv = F::one() / cache.norms[i];
        dx.row_mut(i)
            .zip_mut_with(&y, |d, &yv| *d = (*d - yv * proj) * inv);
    }
    dx
}

fn check_unit_rows<F: Scalar>(name: &str, x: &Array2<F>) -> Result<()> {
    for (i, row) in x.axis_iter(Axis(0)).enumerate() {
        let n = row.dot(&row).sqrt().to_f64_();
        if (n - 1.0).abs() > NORM_TOL {
            return Err(Error::numeric(format!(
                "{name} row {i} has norm {n:.6}, expected 1 within {NORM_TOL}"
            )));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// InfoNCE against explicit negatives (momentum-contrast form).

/// Cross-entropy over similarities: per query, the positive key competes
/// against every negative; `loss = −log softmax₀`, averaged over the batch.
/// Gradient flows to the queries only; keys and negatives are detached by
/// contract (momentum branch and queue).
pub fn info_nce<F: Scalar>(
    q: &Array2<F>,
    k_pos: &Array2<F>,
    negs: &Array2<F>,
    tau: f64,
) -> Result<(F, Array2<F>)> {
    if q.raw_dim() != k_pos.raw_dim() {
        return Err(Error::shape("query/positive-key shape mismatch"));
    }
    if negs.nrows() > 0 && negs.ncols() != q.ncols() {
        return Err(Error::shape("negative width mismatch"));
    }
    if !(tau > 0.0) {
        return Err(Error::config("temperature must be positive"));
    }
    check_unit_rows("query", q)?;
    check_unit_rows("positive key", k_pos)?;
    check_unit_rows("negatives", negs)?;

    let n = q.nrows();
    let k = negs.nrows();
    let itau = F::from_f64_(1.0 / tau);
    // logits: column 0 is the positive, then one column per negative.
    let mut logits = Array2::zeros((n, k + 1));
    let pos = (q * k_pos).sum_axis(Axis(1));
    logits.column_mut(0).assign(&(&pos * itau));
    if k > 0 {
        logits
            .slice_mut(s![.., 1..])
            .assign(&(q.dot(&negs.t()) * itau));
    }

    let mut loss = F::zero();
    let mut p = logits.clone();
    for mut row in p.axis_iter_mut(Axis(0)) {
        let m = row.iter().cloned().fold(F::neg_infinity(), F::max);
        row.mapv_inplace(|v| (v - m).exp());
        let z = row.sum();
        row.mapv_inplace(|v| v / z);
        loss = loss - row[0].ln();
    }
    let nf = F::from_f64_(n as f64);
    loss = loss / nf;

    // dL/dq_i = [(p₀−1)·k⁺_i + Σ_j p_j · neg_j] / (n·τ)
    let mut dq = k_pos.clone();
    for i in 0..n {
        let coeff = p[[i, 0]] - F::one();
        dq.row_mut(i).mapv_inplace(|v| v * coeff);
    }
    if k > 0 {
        dq = dq + p.slice(s![.., 1..]).dot(negs);
    }
    dq.mapv_inplace(|v| v * itau / nf);
    Ok((loss, dq))
}

// ---------------------------------------------------------------------------
// Symmetric in-batch contrastive loss (NT-Xent).

/// Both views are stacked into 2n rows; each row's positive is its partner
/// and the denominator runs over the other 2n−1 rows. Returns the mean loss
/// and gradients for both views.
pub fn nt_xent<F: Scalar>(
    z1: &Array2<F>,
    z2: &Array2<F>,
    tau: f64,
) -> Result<(F, Array2<F>, Array2<F>)> {
    if z1.raw_dim() != z2.raw_dim() {
        return Err(Error::shape("view batch shapes differ"));
    }
    let n = z1.nrows();
    if n < 2 {
        return Err(Error::data("nt_xent needs at least 2 pairs"));
    }
    if !(tau > 0.0) {
        return Err(Error::config("temperature must be positive"));
    }
    check_unit_rows("view 1", z1)?;
    check_unit_rows("view 2", z2)?;

    let m = 2 * n;
    let mut z = Array2::zeros((m, z1.ncols()));
    z.slice_mut(s![..n, ..]).assign(z1);
    z.slice_mut(s![n.., ..]).assign(z2);

    let itau = F::from_f64_(1.0 / tau);
    let sims = z.dot(&z.t()) * itau;
    // Row-wise softmax over the 2n−1 non-self entries.
    let mut p = Array2::zeros((m, m));
    let mut loss = F::zero();
    for i in 0..m {
        let mut mx = F::neg_infinity();
        for j in 0..m {
            if j != i {
                mx = mx.max(sims[[i, j]]);
            }
        }
        let mut zsum = F::zero();
        for j in 0..m {
            if j != i {
                let e = (sims[[i, j]] - mx).exp();
                p[[i, j]] = e;
                zsum = zsum + e;
            }
        }
        for j in 0..m {
            p[[i, j]] = p[[i, j]] / zsum;
        }
        let partner = (i + n) % m;
        loss = loss - p[[i, partner]].ln();
    }
    let mf = F::from_f64_(m as f64);
    loss = loss / mf;

    // dL/ds_ij = (p_ij − [j = partner(i)]) / 2n; both index roles of z feed
    // the similarity matrix, so dZ = (A + Aᵀ) Z / τ.
    let mut a = p;
    for i in 0..m {
        let partner = (i + n) % m;
        a[[i, partner]] = a[[i, partner]] - F::one();
    }
    a.mapv_inplace(|v| v / mf);
    let dz = (&a + &a.t()).dot(&z) * itau;
    Ok((
        loss,
        dz.slice(s![..n, ..]).to_owned(),
        dz.slice(s![n.., ..]).to_owned(),
    ))
}

// ---------------------------------------------------------------------------
// Cross-correlation (Barlow Twins) loss.

pub struct StdCache<F: Scalar> {
    pub xhat: Array2<F>,
    invstd: Array1<F>,
}

/// Column standardization with biased variance. Constant columns standardize
/// to zero rather than erroring; the variance floor makes that explicit.
pub fn standardize_columns<F: Scalar>(x: &Array2<F>) -> Result<(Array2<F>, StdCache<F>)> {
    let n = x.nrows();
    if n < 2 {
        return Err(Error::data("standardization needs at least 2 rows"));
    }
    let nf = F::from_f64_(n as f64);
    let mean = x.sum_axis(Axis(0)) / nf;
    let centered = x - &mean;
    let var = centered.mapv(|v| v * v).sum_axis(Axis(0)) / nf;
    let eps = F::from_f64_(1e-12);
    let invstd = var.mapv(|v| F::one() / (v + eps).sqrt());
    let xhat = &centered * &invstd;
    Ok((xhat.clone(), StdCache { xhat, invstd }))
}

/// Same algebra as batch-norm backward with unit scale:
/// `dx = invstd/n · (n·dy − Σdy − x̂ · Σ(dy∘x̂))`, per column.
pub fn standardize_columns_backward<F: Scalar>(cache: &StdCache<F>, dy: &Array2<F>) -> Array2<F> {
    let n = dy.nrows();
    let nf = F::from_f64_(n as f64);
    let sum_dy = dy.sum_axis(Axis(0));
    let sum_dy_xhat = (dy * &cache.xhat).sum_axis(Axis(0));
    let mut dx = dy * nf;
    dx = dx - &sum_dy;
    dx = dx - &(&cache.xhat * &sum_dy_xhat);
    dx * &(cache.invstd.mapv(|v| v / nf))
}

/// `loss = Σ_d (1−C_dd)² + λ Σ_{d≠d'} C_{dd'}²` with `C = ẑ₁ᵀ ẑ₂ / n` the
/// cross-correlation of the internally standardized batches. Returns input
/// gradients for both raw views.
pub fn barlow_twins_loss<F: Scalar>(
    z1: &Array2<F>,
    z2: &Array2<F>,
    lambda: f64,
) -> Result<(F, Array2<F>, Array2<F>)> {
    if z1.raw_dim() != z2.raw_dim() {
        return Err(Error::shape("view batch shapes differ"));
    }
    if z1.nrows() < 2 {
        return Err(Error::data("barlow_twins_loss needs at least 2 samples"));
    }
    if lambda < 0.0 {
        return Err(Error::config("lambda must be non-negative"));
    }
    let n = z1.nrows();
    let nf = F::from_f64_(n as f64);
    let (h1, c1) = standardize_columns(z1)?;
    let (h2, c2) = standardize_columns(z2)?;
    let c = h1.t().dot(&h2) / nf;

    let lam = F::from_f64_(lambda);
    let mut loss = F::zero();
    let mut dc = Array2::zeros(c.raw_dim());
    let two = F::from_f64_(2.0);
    for d in 0..c.nrows() {
        for e in 0..c.ncols() {
            if d == e {
                let r = F::one() - c[[d, e]];
                loss = loss + r * r;
                dc[[d, e]] = -two * r;
            } else {
                loss = loss + lam * c[[d, e]] * c[[d, e]];
                dc[[d, e]] = two * lam * c[[d, e]];
            }
        }
    }
    // C = ẑ₁ᵀ ẑ₂ / n  ⇒  dẑ₁ = ẑ₂ Gᵀ / n, dẑ₂ = ẑ₁ G / n.
    let dh1 = h2.dot(&dc.t()) / nf;
    let dh2 = h1.dot(&dc) / nf;
    let dz1 = standardize_columns_backward(&c1, &dh1);
    let dz2 = standardize_columns_backward(&c2, &dh2);
    Ok((loss, dz1, dz2))
}

// ---------------------------------------------------------------------------
// Negative-cosine (SimSiam) loss with stop-gradient.

/// `loss = −½ · mean_i [cos(p₁ᵢ, z₂ᵢ) + cos(p₂ᵢ, z₁ᵢ)]`. The z branches are
/// constants by contract (stop-gradient): only predictor gradients are
/// returned.
pub fn simsiam_loss<F: Scalar>(
    p1: &Array2<F>,
    z2_stopped: &Array2<F>,
    p2: &Array2<F>,
    z1_stopped: &Array2<F>,
) -> Result<(F, Array2<F>, Array2<F>)> {
    if p1.raw_dim() != z2_stopped.raw_dim() || p2.raw_dim() != z1_stopped.raw_dim() {
        return Err(Error::shape("predictor/target shapes differ"));
    }
    if p1.raw_dim() != p2.raw_dim() {
        return Err(Error::shape("view batch shapes differ"));
    }
    let n = p1.nrows();
    if n == 0 {
        return Err(Error::data("empty batch"));
    }
    let half_n = F::from_f64_(2.0 * n as f64);
    let mut loss = F::zero();
    let mut dp1 = Array2::zeros(p1.raw_dim());
    let mut dp2 = Array2::zeros(p2.raw_dim());
    for (p, z, dp) in [(p1, z2_stopped, &mut dp1), (p2, z1_stopped, &mut dp2)] {
        for i in 0..n {
            let pr = p.row(i);
            let zr = z.row(i);
            let pn = pr.dot(&pr).sqrt();
            let zn = zr.dot(&zr).sqrt();
            if pn.to_f64_() < 1e-12 || zn.to_f64_() < 1e-12 {
                return Err(Error::numeric(format!("zero-norm vector in row {i}")));
            }
            let cos = pr.dot(&zr) / (pn * zn);
            loss = loss - cos / half_n;
            // d(−cos)/dp = −(z/(|p||z|) − cos·p/|p|²)
            let mut row = dp.row_mut(i);
            for j in 0..pr.len() {
                row[j] = -(zr[j] / (pn * zn) - cos * pr[j] / (pn * pn)) / half_n;
            }
        }
    }
    Ok((loss, dp1, dp2))
}

// ---------------------------------------------------------------------------
// Key queue.

/// Fixed-capacity FIFO of key embeddings, always full: construction seeds it
/// with random unit rows (the usual momentum-contrast warmup) and each push
/// overwrites the oldest batch.
#[derive(Debug, Clone)]
pub struct FeatureQueue<F: Scalar> {
    data: Array2<F>,
    /// Next write position; also the oldest row.
    head: usize,
}

impl<F: Scalar> FeatureQueue<F> {
    pub fn new_random(capacity: usize, dim: usize, rng_: &mut impl Rng) -> Result<Self> {
        if capacity == 0 || dim == 0 {
            return Err(Error::config("queue capacity and dim must be positive"));
        }
        let raw = Array2::from_shape_fn((capacity, dim), |_| {
            F::from_f64_(crate::rng::normal(rng_))
        });
        let (data, _) = l2_normalize_rows(&raw)?;
        Ok(FeatureQueue { data, head: 0 })
    }

    pub fn capacity(&self) -> usize {
        self.data.nrows()
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    /// Overwrites the oldest rows with `batch`. The batch must tile the
    /// capacity exactly so a write never wraps mid-batch.
    pub fn push_batch(&mut self, batch: &Array2<F>) -> Result<()> {
        let n = batch.nrows();
        if n == 0 || n > self.capacity() || self.capacity() % n != 0 {
            return Err(Error::data(format!(
                "batch of {n} does not tile queue capacity {}",
                self.capacity()
            )));
        }
        if batch.ncols() != self.dim() {
            return Err(Error::shape("queued feature width mismatch"));
        }
        self.data
            .slice_mut(s![self.head..self.head + n, ..])
            .assign(batch);
        self.head = (self.head + n) % self.capacity();
        Ok(())
    }

    /// Contents oldest to newest.
    pub fn ordered(&self) -> Array2<F> {
        let mut out = Array2::zeros(self.data.raw_dim());
        let tail = self.capacity() - self.head;
        out.slice_mut(s![..tail, ..])
            .assign(&self.data.slice(s![self.head.., ..]));
        out.slice_mut(s![tail.., ..])
            .assign(&self.data.slice(s![..self.head, ..]));
        out
    }

    /// Raw state for checkpointing: (rows in storage order, head index).
    pub fn state(&self) -> (&Array2<F>, usize) {
        (&self.data, self.head)
    }

    pub fn from_state(data: Array2<F>, head: usize) -> Result<Self> {
        if head >= data.nrows() {
            return Err(Error::checkpoint("queue head out of range"));
        }
        Ok(FeatureQueue { data, head })
    }
}

/// EMA rule `target ← m·target + (1−m)·online` over every tensor, running
/// statistics included. Mismatched architectures are rejected.
pub fn momentum_update<F: Scalar, T: Tensors<F>>(
    target: &mut T,
    online: &T,
    m: f64,
) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::config("momentum must lie in [0, 1]"));
    }
    let a = crate::nn::tensor_shapes(target);
    let b = crate::nn::tensor_shapes(online);
    if a != b {
        return Err(Error::shape("momentum update across mismatched architectures"));
    }
    crate::nn::ema_update(target, online, m);
    Ok(())
}

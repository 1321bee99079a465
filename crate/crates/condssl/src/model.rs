//! Full training models: backbone + conditioned projector (+ predictor for
//! the stop-gradient method, + momentum copies and key queue for momentum
//! contrast), and the per-method training steps.
//!
//! A step zeroes the gradient accumulators, runs forward and backward for its
//! objective, and returns the loss; the optimizer update and the momentum
//! sync are the trainer's responsibility (`post_step` runs after the
//! optimizer so the key encoder tracks the *updated* online weights).

use ndarray::{concatenate, s, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::condproj::{ConditionedProjector, ConditioningSpec, ProjCache};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::{
    Backbone, BackboneCache, BackboneSpec, Mlp, Scalar, StageTap, Tensor4, Tensors, Trainable,
};
use crate::sslcore::{
    barlow_twins_loss, info_nce, l2_normalize_rows, l2_normalize_rows_backward, momentum_update,
    nt_xent, simsiam_loss, FeatureQueue, Method, MethodConfig,
};

/// Images per forward pass during feature extraction; bounds peak memory on
/// large evaluation sets.
const EXTRACT_CHUNK: usize = 256;

fn vstack<F: Scalar>(a: &Array2<F>, b: &Array2<F>) -> Array2<F> {
    concatenate(Axis(0), &[a.view(), b.view()]).expect("matching widths")
}

// ---------------------------------------------------------------------------
// Encoder: backbone + conditioned projector.

/// The online (or key) tower: `z = π(f(x) | ω)`, returned raw; each objective
/// decides its own normalization.
#[derive(Debug, Clone)]
pub struct Encoder<F: Scalar> {
    pub backbone: Backbone<F>,
    pub projector: ConditionedProjector<F>,
}

pub struct EncoderCache<F: Scalar> {
    e: Array2<F>,
    bb: BackboneCache<F>,
    proj: ProjCache<F>,
}

impl<F: Scalar> Encoder<F> {
    /// Builds backbone first, projector second; reference modules can replay
    /// the construction from an identical stream.
    pub fn new(
        bspec: &BackboneSpec,
        cspec: &ConditioningSpec,
        rng_: &mut impl Rng,
    ) -> Result<Self> {
        let backbone = bspec.build(rng_)?;
        let projector = ConditionedProjector::new(cspec, bspec.embed_dim(), rng_)?;
        Ok(Encoder { backbone, projector })
    }

    pub fn out_dim(&self) -> usize {
        self.projector.out_dim()
    }

    /// Training forward with gradient bookkeeping; batch-norm running
    /// statistics advance.
    pub fn forward_train(
        &mut self,
        x: &Tensor4<F>,
        omega: &Array2<F>,
    ) -> Result<(Array2<F>, EncoderCache<F>)> {
        let (e, bb) = self.backbone.forward_train(x)?;
        let (z, proj) = self.projector.project(&e, omega)?;
        Ok((z, EncoderCache { e, bb, proj }))
    }

    /// Accumulates gradients for every parameter; the image gradient is
    /// discarded (inputs are data, not parameters).
    pub fn backward(&mut self, cache: &EncoderCache<F>, dz: &Array2<F>) {
        let (de, _domega) = self.projector.backward(&cache.e, &cache.proj, dz);
        let _ = self.backbone.backward(&cache.bb, &de);
    }

    /// Momentum-branch forward: batch statistics, no gradient, no mutation.
    pub fn forward_key(&self, x: &Tensor4<F>, omega: &Array2<F>) -> Result<Array2<F>> {
        let e = self.backbone.forward_train_nograd(x)?;
        self.projector.project_nograd(&e, omega)
    }

    /// Deterministic eval-mode projector output (running statistics).
    pub fn project_eval(&self, x: &Tensor4<F>, omega: &Array2<F>) -> Result<Array2<F>> {
        let e = self.backbone.forward_eval(x)?;
        self.projector.project_nograd(&e, omega)
    }
}

impl<F: Scalar> Tensors<F> for Encoder<F> {
    fn tensors(&self, f: &mut dyn FnMut(&str, &[F])) {
        self.backbone.tensors(&mut |n, d| f(&format!("backbone.{n}"), d));
        self.projector.tensors(&mut |n, d| f(&format!("projector.{n}"), d));
    }
    fn tensors_mut(&mut self, f: &mut dyn FnMut(&str, &mut [F])) {
        self.backbone.tensors_mut(&mut |n, d| f(&format!("backbone.{n}"), d));
        self.projector
            .tensors_mut(&mut |n, d| f(&format!("projector.{n}"), d));
    }
}

impl<F: Scalar> Trainable<F> for Encoder<F> {
    fn params_and_grads(&mut self, f: &mut dyn FnMut(&str, &mut [F], &mut [F])) {
        self.backbone
            .params_and_grads(&mut |n, p, g| f(&format!("backbone.{n}"), p, g));
        self.projector
            .params_and_grads(&mut |n, p, g| f(&format!("projector.{n}"), p, g));
    }
}

// ---------------------------------------------------------------------------
// Per-method steps.

/// Symmetric in-batch contrastive step. Both views go through one stacked
/// forward so batch norm sees the joint statistics.
pub fn simclr_step<F: Scalar>(
    enc: &mut Encoder<F>,
    x1: &Tensor4<F>,
    x2: &Tensor4<F>,
    om1: &Array2<F>,
    om2: &Array2<F>,
    tau: f64,
) -> Result<F> {
    let n = x1.n;
    let (z, cache) = enc.forward_train(&x1.stack(x2), &vstack(om1, om2))?;
    let (zn, nc) = l2_normalize_rows(&z)?;
    let (loss, d1, d2) = nt_xent(
        &zn.slice(s![..n, ..]).to_owned(),
        &zn.slice(s![n.., ..]).to_owned(),
        tau,
    )?;
    let dz = l2_normalize_rows_backward(&nc, &vstack(&d1, &d2));
    enc.backward(&cache, &dz);
    Ok(loss)
}

/// Momentum-contrast step: the query view runs through the online tower with
/// gradient, the key view through the frozen key tower conditioned on its own
/// ω. The loss contrasts against the queue, then the fresh keys are enqueued
/// (FIFO). The EMA sync happens separately, after the optimizer.
pub fn moco_step<F: Scalar>(
    online: &mut Encoder<F>,
    key: &Encoder<F>,
    queue: &mut FeatureQueue<F>,
    x_q: &Tensor4<F>,
    x_k: &Tensor4<F>,
    om_q: &Array2<F>,
    om_k: &Array2<F>,
    tau: f64,
) -> Result<F> {
    if queue.dim() != online.out_dim() {
        return Err(Error::shape(format!(
            "queue width {} != projector output {}",
            queue.dim(),
            online.out_dim()
        )));
    }
    let (zq, cache) = online.forward_train(x_q, om_q)?;
    let (q, nc) = l2_normalize_rows(&zq)?;
    let (k, _) = l2_normalize_rows(&key.forward_key(x_k, om_k)?)?;
    let negs = queue.ordered();
    let (loss, dq) = info_nce(&q, &k, &negs, tau)?;
    let dz = l2_normalize_rows_backward(&nc, &dq);
    online.backward(&cache, &dz);
    queue.push_batch(&k)?;
    Ok(loss)
}

/// Cross-correlation step; the loss standardizes internally, so the raw
/// projector outputs go in directly.
pub fn barlow_step<F: Scalar>(
    enc: &mut Encoder<F>,
    x1: &Tensor4<F>,
    x2: &Tensor4<F>,
    om1: &Array2<F>,
    om2: &Array2<F>,
    lambda: f64,
) -> Result<F> {
    let n = x1.n;
    let (z, cache) = enc.forward_train(&x1.stack(x2), &vstack(om1, om2))?;
    let (loss, d1, d2) = barlow_twins_loss(
        &z.slice(s![..n, ..]).to_owned(),
        &z.slice(s![n.., ..]).to_owned(),
        lambda,
    )?;
    enc.backward(&cache, &vstack(&d1, &d2));
    Ok(loss)
}

/// Stop-gradient step. The predictor sits on top of the conditioned projector
/// output and is itself never conditioned on ω; the target branches are the
/// same projector outputs treated as constants.
pub fn simsiam_step<F: Scalar>(
    enc: &mut Encoder<F>,
    predictor: &mut Mlp<F>,
    x1: &Tensor4<F>,
    x2: &Tensor4<F>,
    om1: &Array2<F>,
    om2: &Array2<F>,
) -> Result<F> {
    let n = x1.n;
    let (z, cache) = enc.forward_train(&x1.stack(x2), &vstack(om1, om2))?;
    let (p, pc) = predictor.forward(&z);
    let z1 = z.slice(s![..n, ..]).to_owned();
    let z2 = z.slice(s![n.., ..]).to_owned();
    let (loss, dp1, dp2) = simsiam_loss(
        &p.slice(s![..n, ..]).to_owned(),
        &z2,
        &p.slice(s![n.., ..]).to_owned(),
        &z1,
    )?;
    let dz = predictor.backward(&pc, &vstack(&dp1, &dp2));
    enc.backward(&cache, &dz);
    Ok(loss)
}

// ---------------------------------------------------------------------------
// Assembled model.

/// Everything one pretraining run owns: the online tower plus whatever the
/// chosen objective needs beside it.
#[derive(Debug, Clone)]
pub struct SslModel<F: Scalar> {
    pub config: MethodConfig,
    pub online: Encoder<F>,
    /// 2-layer head for the stop-gradient method only.
    pub predictor: Option<Mlp<F>>,
    /// EMA copy of the online tower (momentum contrast only).
    pub key: Option<Encoder<F>>,
    pub queue: Option<FeatureQueue<F>>,
}

impl<F: Scalar> SslModel<F> {
    pub fn new(
        config: &MethodConfig,
        bspec: &BackboneSpec,
        cspec: &ConditioningSpec,
        rng_: &mut impl Rng,
    ) -> Result<Self> {
        let online = Encoder::new(bspec, cspec, rng_)?;
        let out = online.out_dim();
        let predictor = if config.method == Method::Simsiam {
            Some(Mlp::with_shape(out, config.predictor_hidden, out, 2, rng_))
        } else {
            None
        };
        let (key, queue) = if config.method == Method::MocoV2 {
            (
                Some(online.clone()),
                Some(FeatureQueue::new_random(config.queue_size, out, rng_)?),
            )
        } else {
            (None, None)
        };
        Ok(SslModel { config: config.clone(), online, predictor, key, queue })
    }

    /// One optimization step's forward/backward. Gradient accumulators are
    /// zeroed on entry; on exit they hold this batch's gradients.
    pub fn train_step(
        &mut self,
        x1: &Tensor4<F>,
        x2: &Tensor4<F>,
        om1: &Array2<F>,
        om2: &Array2<F>,
    ) -> Result<F> {
        self.zero_grads_all();
        match self.config.method {
            Method::Simclr => {
                simclr_step(&mut self.online, x1, x2, om1, om2, self.config.temperature)
            }
            Method::MocoV2 => {
                let key = self
                    .key
                    .as_ref()
                    .ok_or_else(|| Error::config("momentum contrast without key encoder"))?;
                let queue = self
                    .queue
                    .as_mut()
                    .ok_or_else(|| Error::config("momentum contrast without queue"))?;
                moco_step(
                    &mut self.online,
                    key,
                    queue,
                    x1,
                    x2,
                    om1,
                    om2,
                    self.config.temperature,
                )
            }
            Method::BarlowTwins => {
                barlow_step(&mut self.online, x1, x2, om1, om2, self.config.bt_lambda)
            }
            Method::Simsiam => {
                let predictor = self
                    .predictor
                    .as_mut()
                    .ok_or_else(|| Error::config("stop-gradient method without predictor"))?;
                simsiam_step(&mut self.online, predictor, x1, x2, om1, om2)
            }
        }
    }

    /// Runs after the optimizer update: EMA-syncs the key tower to the fresh
    /// online weights. No-op for methods without a momentum branch.
    pub fn post_step(&mut self) -> Result<()> {
        if let Some(key) = self.key.as_mut() {
            momentum_update(key, &self.online, self.config.momentum)?;
        }
        Ok(())
    }
}

impl<F: Scalar> Tensors<F> for SslModel<F> {
    fn tensors(&self, f: &mut dyn FnMut(&str, &[F])) {
        self.online.tensors(&mut |n, d| f(&format!("online.{n}"), d));
        if let Some(p) = &self.predictor {
            p.tensors(&mut |n, d| f(&format!("predictor.{n}"), d));
        }
        if let Some(k) = &self.key {
            k.tensors(&mut |n, d| f(&format!("key.{n}"), d));
        }
    }
    fn tensors_mut(&mut self, f: &mut dyn FnMut(&str, &mut [F])) {
        self.online.tensors_mut(&mut |n, d| f(&format!("online.{n}"), d));
        if let Some(p) = &mut self.predictor {
            p.tensors_mut(&mut |n, d| f(&format!("predictor.{n}"), d));
        }
        if let Some(k) = &mut self.key {
            k.tensors_mut(&mut |n, d| f(&format!("key.{n}"), d));
        }
    }
}

/// The optimizer walks the online tower and the predictor; the key tower
/// moves only through the EMA rule.
impl<F: Scalar> Trainable<F> for SslModel<F> {
    fn params_and_grads(&mut self, f: &mut dyn FnMut(&str, &mut [F], &mut [F])) {
        self.online
            .params_and_grads(&mut |n, p, g| f(&format!("online.{n}"), p, g));
        if let Some(pr) = &mut self.predictor {
            pr.params_and_grads(&mut |n, p, g| f(&format!("predictor.{n}"), p, g));
        }
    }
}

// ---------------------------------------------------------------------------
// Feature extraction.

/// Where a feature matrix was read from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureTag {
    Stage1,
    Stage2,
    Stage3,
    Stage4,
    Extractor,
    Projector,
}

impl From<StageTap> for FeatureTag {
    fn from(t: StageTap) -> Self {
        match t {
            StageTap::Stage1 => FeatureTag::Stage1,
            StageTap::Stage2 => FeatureTag::Stage2,
            StageTap::Stage3 => FeatureTag::Stage3,
            StageTap::Stage4 => FeatureTag::Stage4,
            StageTap::Extractor => FeatureTag::Extractor,
        }
    }
}

/// A feature matrix with its provenance.
#[derive(Debug, Clone)]
pub struct EmbeddingBatch<F: Scalar> {
    pub matrix: Array2<F>,
    pub tag: FeatureTag,
    pub l2_normalized: bool,
}

/// Deterministic eval-mode features at the requested tap, computed in
/// memory-bounded chunks.
pub fn extract_features<F: Scalar>(
    backbone: &Backbone<F>,
    images: &[Image],
    tap: StageTap,
) -> Result<EmbeddingBatch<F>> {
    if images.is_empty() {
        return Err(Error::data("no images to extract features from"));
    }
    let mut rows: Vec<Array2<F>> = Vec::new();
    for chunk in images.chunks(EXTRACT_CHUNK) {
        let x = Tensor4::from_images(chunk);
        rows.push(backbone.tap(&x, tap)?);
    }
    let views: Vec<_> = rows.iter().map(|r| r.view()).collect();
    let matrix = concatenate(Axis(0), &views).expect("uniform widths");
    Ok(EmbeddingBatch { matrix, tag: tap.into(), l2_normalized: false })
}

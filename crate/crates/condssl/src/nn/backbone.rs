//! Four-stage convolutional backbones with per-stage feature taps.
//!
//! `SmallConv`: each stage is conv3x3 -> batch norm -> ReLU, with 2x average
//! pooling between stages and global average pooling after stage 4.
//! `ResnetLike`: each stage is a single residual block (two conv+bn pairs,
//! identity skip with zero channel padding), pooled at stage entry.
//!
//! The extractor output `e` is the globally pooled stage-4 map; stage taps
//! `stage1..stage4` expose globally pooled intermediate maps for the
//! stagewise sensitivity analysis (so `stage4 == extractor` by construction).

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::conv::{relu_backward_inplace, relu_inplace, AvgPool2, Conv2d, GlobalAvgPool, Tensor4};
use super::norm::{BatchNorm, BnCache};
use super::{Scalar, Tensors, Trainable};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackboneFamily {
    SmallConv,
    ResnetLike,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneSpec {
    pub family: BackboneFamily,
    /// Channel width of each of the four stages; the embedding width equals
    /// `widths[3]`.
    pub widths: [usize; 4],
}

impl Default for BackboneSpec {
    fn default() -> Self {
        BackboneSpec { family: BackboneFamily::SmallConv, widths: [16, 32, 64, 128] }
    }
}

impl BackboneSpec {
    pub fn embed_dim(&self) -> usize {
        self.widths[3]
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.iter().any(|&w| w == 0) {
            return Err(Error::config("backbone widths must be positive"));
        }
        if self.family == BackboneFamily::ResnetLike {
            if self.widths.windows(2).any(|w| w[1] < w[0]) {
                return Err(Error::config(
                    "resnet-like widths must be nondecreasing (identity skips zero-pad channels)",
                ));
            }
        }
        Ok(())
    }

    pub fn build<F: Scalar>(&self, rng_: &mut impl Rng) -> Result<Backbone<F>> {
        self.validate()?;
        let mut stages = Vec::with_capacity(4);
        let mut in_c = 3;
        for &out_c in &self.widths {
            stages.push(match self.family {
                BackboneFamily::SmallConv => Stage::Small {
                    conv: Conv2d::new(in_c, out_c, rng_),
                    bn: BatchNorm::new(out_c),
                },
                BackboneFamily::ResnetLike => Stage::Res {
                    conv_a: Conv2d::new(in_c, out_c, rng_),
                    bn_a: BatchNorm::new(out_c),
                    conv_b: Conv2d::new(out_c, out_c, rng_),
                    bn_b: BatchNorm::new(out_c),
                },
            });
            in_c = out_c;
        }
        Ok(Backbone { spec: self.clone(), stages })
    }
}

/// Which representation to read out of the backbone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StageTap {
    Stage1,
    Stage2,
    Stage3,
    Stage4,
    Extractor,
}

impl StageTap {
    pub fn all() -> [StageTap; 5] {
        [
            StageTap::Stage1,
            StageTap::Stage2,
            StageTap::Stage3,
            StageTap::Stage4,
            StageTap::Extractor,
        ]
    }

    fn stage_index(self) -> usize {
        match self {
            StageTap::Stage1 => 0,
            StageTap::Stage2 => 1,
            StageTap::Stage3 => 2,
            StageTap::Stage4 | StageTap::Extractor => 3,
        }
    }
}

#[derive(Debug, Clone)]
enum Stage<F: Scalar> {
    Small {
        conv: Conv2d<F>,
        bn: BatchNorm<F>,
    },
    Res {
        conv_a: Conv2d<F>,
        bn_a: BatchNorm<F>,
        conv_b: Conv2d<F>,
        bn_b: BatchNorm<F>,
    },
}

#[derive(Debug, Clone)]
pub struct Backbone<F: Scalar> {
    pub spec: BackboneSpec,
    stages: Vec<Stage<F>>,
}

enum StageCache<F: Scalar> {
    Small {
        cols: Array2<F>,
        bn: BnCache<F>,
        post: Tensor4<F>,
    },
    Res {
        pooled_in: Tensor4<F>,
        cols_a: Array2<F>,
        bn_a: BnCache<F>,
        post_a: Tensor4<F>,
        cols_b: Array2<F>,
        bn_b: BnCache<F>,
        post_y: Tensor4<F>,
    },
}

pub struct BackboneCache<F: Scalar> {
    stages: Vec<StageCache<F>>,
    /// Spatial dims entering each stage (pre-pool for resnet-like).
    in_dims: Vec<(usize, usize)>,
    final_dims: (usize, usize),
}

impl<F: Scalar> Backbone<F> {
    pub fn embed_dim(&self) -> usize {
        self.spec.embed_dim()
    }

    fn check_input(&self, x: &Tensor4<F>) -> Result<()> {
        if x.c != 3 {
            return Err(Error::shape(format!("backbone expects 3 channels, got {}", x.c)));
        }
        if x.h % 8 != 0 || x.w % 8 != 0 || x.h < 8 || x.w < 8 {
            return Err(Error::shape(format!(
                "backbone needs spatial dims divisible by 8 (three 2x pools), got {}x{}",
                x.h, x.w
            )));
        }
        Ok(())
    }

    /// Training-mode forward to the extractor embedding `e`; batch-norm
    /// running statistics are updated.
    pub fn forward_train(&mut self, x: &Tensor4<F>) -> Result<(Array2<F>, BackboneCache<F>)> {
        self.check_input(x)?;
        let mut cur = x.clone();
        let mut caches = Vec::with_capacity(4);
        let mut in_dims = Vec::with_capacity(4);
        for (k, stage) in self.stages.iter_mut().enumerate() {
            in_dims.push((cur.h, cur.w));
            match stage {
                Stage::Small { conv, bn } => {
                    let (z, cols) = conv.forward(&cur);
                    let (zb, bn_cache) = bn.forward_train(&z.data);
                    let mut post = Tensor4 { n: z.n, c: z.c, h: z.h, w: z.w, data: zb };
                    relu_inplace(&mut post);
                    caches.push(StageCache::Small { cols, bn: bn_cache, post: post.clone() });
                    cur = if k < 3 { AvgPool2::forward(&post) } else { post };
                }
                Stage::Res { conv_a, bn_a, conv_b, bn_b } => {
                    let pooled = if k > 0 { AvgPool2::forward(&cur) } else { cur.clone() };
                    let (za, cols_a) = conv_a.forward(&pooled);
                    let (zad, bnc_a) = bn_a.forward_train(&za.data);
                    let mut post_a = Tensor4 { n: za.n, c: za.c, h: za.h, w: za.w, data: zad };
                    relu_inplace(&mut post_a);
                    let (zb, cols_b) = conv_b.forward(&post_a);
                    let (zbd, bnc_b) = bn_b.forward_train(&zb.data);
                    let mut y = Tensor4 { n: zb.n, c: zb.c, h: zb.h, w: zb.w, data: zbd };
                    // Identity skip, zero-padded to the stage width.
                    for (mut orow, irow) in
                        y.data.rows_mut().into_iter().zip(pooled.data.rows())
                    {
                        for (o, &i) in orow.iter_mut().zip(irow.iter()) {
                            *o = *o + i;
                        }
                    }
                    relu_inplace(&mut y);
                    caches.push(StageCache::Res {
                        pooled_in: pooled,
                        cols_a,
                        bn_a: bnc_a,
                        post_a,
                        cols_b,
                        bn_b: bnc_b,
                        post_y: y.clone(),
                    });
                    cur = y;
                }
            }
        }
        let final_dims = (cur.h, cur.w);
        let e = GlobalAvgPool::forward(&cur);
        Ok((e, BackboneCache { stages: caches, in_dims, final_dims }))
    }

    /// Backward from the embedding gradient; accumulates parameter grads and
    /// returns the input-image gradient.
    pub fn backward(&mut self, cache: &BackboneCache<F>, de: &Array2<F>) -> Tensor4<F> {
        let (fh, fw) = cache.final_dims;
        let mut grad = GlobalAvgPool::backward(de, fh, fw);
        for k in (0..self.stages.len()).rev() {
            match (&mut self.stages[k], &cache.stages[k]) {
                (Stage::Small { conv, bn }, StageCache::Small { cols, bn: bnc, post }) => {
                    if k < 3 {
                        // Undo the pooling that fed the next stage.
                        grad = AvgPool2::backward(&grad, post.h, post.w);
                    }
                    relu_backward_inplace(&mut grad, post);
                    let dz = bn.backward(bnc, &grad.data);
                    let dzt = Tensor4 { n: grad.n, c: grad.c, h: grad.h, w: grad.w, data: dz };
                    grad = conv.backward(cols, &dzt);
                }
                (
                    Stage::Res { conv_a, bn_a, conv_b, bn_b },
                    StageCache::Res { pooled_in, cols_a, bn_a: bnc_a, post_a, cols_b, bn_b: bnc_b, post_y },
                ) => {
                    relu_backward_inplace(&mut grad, post_y);
                    // Branch gradient into the conv path and the skip.
                    let dz_b = bn_b.backward(bnc_b, &grad.data);
                    let dzt_b =
                        Tensor4 { n: grad.n, c: grad.c, h: grad.h, w: grad.w, data: dz_b };
                    let mut d_post_a = conv_b.backward(cols_b, &dzt_b);
                    relu_backward_inplace(&mut d_post_a, post_a);
                    let dz_a = bn_a.backward(bnc_a, &d_post_a.data);
                    let dzt_a = Tensor4 {
                        n: d_post_a.n,
                        c: d_post_a.c,
                        h: d_post_a.h,
                        w: d_post_a.w,
                        data: dz_a,
                    };
                    let mut dx = conv_a.backward(cols_a, &dzt_a);
                    // Skip contribution: the first in_c channels of grad.
                    let in_c = pooled_in.c;
                    for (mut drow, grow) in
                        dx.data.rows_mut().into_iter().zip(grad.data.rows())
                    {
                        for (d, &g) in drow.iter_mut().take(in_c).zip(grow.iter().take(in_c)) {
                            *d = *d + g;
                        }
                    }
                    grad = dx;
                    if k > 0 {
                        let (ih, iw) = cache.in_dims[k];
                        grad = AvgPool2::backward(&grad, ih, iw);
                    }
                }
                _ => unreachable!("stage/cache kind mismatch"),
            }
        }
        grad
    }

    /// Side-effect-free forward shared by eval mode (`batch_stats = false`,
    /// running statistics) and the momentum branch (`batch_stats = true`,
    /// per-batch statistics). Returns the globally pooled output of every
    /// stage; `[3]` is the extractor embedding.
    fn forward_pure(&self, x: &Tensor4<F>, batch_stats: bool) -> Result<[Array2<F>; 4]> {
        self.check_input(x)?;
        let norm = |bn: &BatchNorm<F>, z: &Array2<F>| {
            if batch_stats {
                bn.forward_batchstats(z)
            } else {
                bn.forward_eval(z)
            }
        };
        let mut cur = x.clone();
        let mut taps: Vec<Array2<F>> = Vec::with_capacity(4);
        for (k, stage) in self.stages.iter().enumerate() {
            match stage {
                Stage::Small { conv, bn } => {
                    let (z, _) = conv.forward(&cur);
                    let zb = norm(bn, &z.data);
                    let mut post = Tensor4 { n: z.n, c: z.c, h: z.h, w: z.w, data: zb };
                    relu_inplace(&mut post);
                    taps.push(GlobalAvgPool::forward(&post));
                    cur = if k < 3 { AvgPool2::forward(&post) } else { post };
                }
                Stage::Res { conv_a, bn_a, conv_b, bn_b } => {
                    let pooled = if k > 0 { AvgPool2::forward(&cur) } else { cur.clone() };
                    let (za, _) = conv_a.forward(&pooled);
                    let mut post_a = Tensor4 {
                        n: za.n,
                        c: za.c,
                        h: za.h,
                        w: za.w,
                        data: norm(bn_a, &za.data),
                    };
                    relu_inplace(&mut post_a);
                    let (zb, _) = conv_b.forward(&post_a);
                    let mut y = Tensor4 {
                        n: zb.n,
                        c: zb.c,
                        h: zb.h,
                        w: zb.w,
                        data: norm(bn_b, &zb.data),
                    };
                    for (mut orow, irow) in
                        y.data.rows_mut().into_iter().zip(pooled.data.rows())
                    {
                        for (o, &i) in orow.iter_mut().zip(irow.iter()) {
                            *o = *o + i;
                        }
                    }
                    relu_inplace(&mut y);
                    taps.push(GlobalAvgPool::forward(&y));
                    cur = y;
                }
            }
        }
        let mut it = taps.into_iter();
        Ok([
            it.next().unwrap(),
            it.next().unwrap(),
            it.next().unwrap(),
            it.next().unwrap(),
        ])
    }

    /// Deterministic eval-mode forward (running batch-norm statistics),
    /// returning the globally pooled features of every stage. `stages[3]` is
    /// the extractor embedding.
    pub fn forward_taps(&self, x: &Tensor4<F>) -> Result<[Array2<F>; 4]> {
        self.forward_pure(x, false)
    }

    /// Eval-mode extractor embedding.
    pub fn forward_eval(&self, x: &Tensor4<F>) -> Result<Array2<F>> {
        Ok(self.forward_taps(x)?[3].clone())
    }

    pub fn tap(&self, x: &Tensor4<F>, tap: StageTap) -> Result<Array2<F>> {
        Ok(self.forward_taps(x)?[tap.stage_index()].clone())
    }

    /// Training-mode statistics without any mutation: the momentum (key)
    /// branch normalizes with batch statistics but its running estimates move
    /// only through the EMA rule.
    pub fn forward_train_nograd(&self, x: &Tensor4<F>) -> Result<Array2<F>> {
        Ok(self.forward_pure(x, true)?[3].clone())
    }
}

impl<F: Scalar> Tensors<F> for Backbone<F> {
    fn tensors(&self, f: &mut dyn FnMut(&str, &[F])) {
        for (k, s) in self.stages.iter().enumerate() {
            match s {
                Stage::Small { conv, bn } => {
                    conv.tensors(&mut |n, d| f(&format!("s{k}.conv.{n}"), d));
                    bn.tensors(&mut |n, d| f(&format!("s{k}.bn.{n}"), d));
                }
                Stage::Res { conv_a, bn_a, conv_b, bn_b } => {
                    conv_a.tensors(&mut |n, d| f(&format!("s{k}.conv_a.{n}"), d));
                    bn_a.tensors(&mut |n, d| f(&format!("s{k}.bn_a.{n}"), d));
                    conv_b.tensors(&mut |n, d| f(&format!("s{k}.conv_b.{n}"), d));
                    bn_b.tensors(&mut |n, d| f(&format!("s{k}.bn_b.{n}"), d));
                }
            }
        }
    }
    fn tensors_mut(&mut self, f: &mut dyn FnMut(&str, &mut [F])) {
        for (k, s) in self.stages.iter_mut().enumerate() {
            match s {
                Stage::Small { conv, bn } => {
                    conv.tensors_mut(&mut |n, d| f(&format!("s{k}.conv.{n}"), d));
                    bn.tensors_mut(&mut |n, d| f(&format!("s{k}.bn.{n}"), d));
                }
                Stage::Res { conv_a, bn_a, conv_b, bn_b } => {
                    conv_a.tensors_mut(&mut |n, d| f(&format!("s{k}.conv_a.{n}"), d));
                    bn_a.tensors_mut(&mut |n, d| f(&format!("s{k}.bn_a.{n}"), d));
                    conv_b.tensors_mut(&mut |n, d| f(&format!("s{k}.conv_b.{n}"), d));
                    bn_b.tensors_mut(&mut |n, d| f(&format!("s{k}.bn_b.{n}"), d));
                }
            }
        }
    }
}

impl<F: Scalar> Trainable<F> for Backbone<F> {
    fn params_and_grads(&mut self, f: &mut dyn FnMut(&str, &mut [F], &mut [F])) {
        for (k, s) in self.stages.iter_mut().enumerate() {
            match s {
                Stage::Small { conv, bn } => {
                    conv.params_and_grads(&mut |n, p, g| f(&format!("s{k}.conv.{n}"), p, g));
                    bn.params_and_grads(&mut |n, p, g| f(&format!("s{k}.bn.{n}"), p, g));
                }
                Stage::Res { conv_a, bn_a, conv_b, bn_b } => {
                    conv_a.params_and_grads(&mut |n, p, g| f(&format!("s{k}.conv_a.{n}"), p, g));
                    bn_a.params_and_grads(&mut |n, p, g| f(&format!("s{k}.bn_a.{n}"), p, g));
                    conv_b.params_and_grads(&mut |n, p, g| f(&format!("s{k}.conv_b.{n}"), p, g));
                    bn_b.params_and_grads(&mut |n, p, g| f(&format!("s{k}.bn_b.{n}"), p, g));
                }
            }
        }
    }
}

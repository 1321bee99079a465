//! Hand-rolled neural-network layers, generic over the float type.
//!
//! Training runs in `f32`; the finite-difference gradient checks instantiate
//! the same code in `f64`. Every layer owns its parameters together with
//! matching gradient accumulators (`backward` adds into them, [`zero_grads`]
//! style methods reset), and provides a `tensors`/`tensors_mut` walk with
//! stable names for checkpointing and momentum copies.

pub mod backbone;
pub mod conv;
pub mod gradcheck;
pub mod linear;
pub mod norm;

pub use backbone::{Backbone, BackboneCache, BackboneFamily, BackboneSpec, StageTap};
pub use conv::{AvgPool2, Conv2d, GlobalAvgPool, Tensor4};
pub use linear::{Linear, Mlp, MlpCache};
pub use norm::{BatchNorm, BnCache};

/// Float scalar the layers are generic over.
pub trait Scalar:
    ndarray::NdFloat + num_traits::FromPrimitive + num_traits::ToPrimitive + Send + Sync + 'static
{
    fn from_f64_(x: f64) -> Self {
        num_traits::FromPrimitive::from_f64(x).expect("finite f64 converts")
    }
    fn to_f64_(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).expect("scalar converts to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Visitor over named parameter tensors (flattened slices, fixed order).
/// Batch-norm running statistics are included: they are state that momentum
/// copies and checkpoints must carry even though no gradient flows into them.
pub trait Tensors<F: Scalar> {
    fn tensors(&self, f: &mut dyn FnMut(&str, &[F]));
    fn tensors_mut(&mut self, f: &mut dyn FnMut(&str, &mut [F]));
}

/// Visitor over trainable parameters paired with their gradient accumulators,
/// in the same relative order as [`Tensors`] but excluding non-trainable
/// state (running statistics). This is the surface the optimizer and the
/// gradient checks step through.
pub trait Trainable<F: Scalar>: Tensors<F> {
    fn params_and_grads(&mut self, f: &mut dyn FnMut(&str, &mut [F], &mut [F]));

    fn zero_grads_all(&mut self) {
        self.params_and_grads(&mut |_, _, g| g.fill(F::zero()));
    }

    fn param_len(&mut self) -> usize {
        let mut n = 0;
        self.params_and_grads(&mut |_, p, _| n += p.len());
        n
    }
}

pub fn params_flat<F: Scalar>(m: &mut dyn Trainable<F>) -> Vec<F> {
    let mut out = Vec::new();
    m.params_and_grads(&mut |_, p, _| out.extend_from_slice(p));
    out
}

pub fn grads_flat<F: Scalar>(m: &mut dyn Trainable<F>) -> Vec<F> {
    let mut out = Vec::new();
    m.params_and_grads(&mut |_, _, g| out.extend_from_slice(g));
    out
}

pub fn set_params_flat<F: Scalar>(m: &mut dyn Trainable<F>, flat: &[F]) {
    let mut off = 0;
    m.params_and_grads(&mut |_, p, _| {
        p.copy_from_slice(&flat[off..off + p.len()]);
        off += p.len();
    });
    assert_eq!(off, flat.len(), "flat parameter vector length mismatch");
}

/// Exponential moving average `target <- m * target + (1 - m) * online`,
/// applied elementwise across every tensor of the pair. Both sides must have
/// identical architecture.
pub fn ema_update<F: Scalar, T: Tensors<F>>(target: &mut T, online: &T, m: f64) {
    let mut online_flat: Vec<(String, Vec<F>)> = Vec::new();
    online.tensors(&mut |name, data| {
        online_flat.push((name.to_string(), data.to_vec()));
    });
    let mf = F::from_f64_(m);
    let one_minus = F::from_f64_(1.0 - m);
    let mut idx = 0usize;
    target.tensors_mut(&mut |name, data| {
        let (oname, odata) = &online_flat[idx];
        assert_eq!(name, oname, "tensor walk order diverged");
        assert_eq!(data.len(), odata.len(), "tensor {name} size diverged");
        for (t, &o) in data.iter_mut().zip(odata.iter()) {
            *t = mf * *t + one_minus * o;
        }
        idx += 1;
    });
    assert_eq!(idx, online_flat.len(), "tensor walk length diverged");
}

/// Collects `(name, len)` pairs, mostly for tests and manifests.
pub fn tensor_shapes<F: Scalar, T: Tensors<F>>(t: &T) -> Vec<(String, usize)> {
    let mut out = Vec::new();
    t.tensors(&mut |name, data| out.push((name.to_string(), data.len())));
    out
}

/// Total parameter/state element count.
pub fn tensor_len<F: Scalar, T: Tensors<F>>(t: &T) -> usize {
    let mut n = 0;
    t.tensors(&mut |_, data| n += data.len());
    n
}

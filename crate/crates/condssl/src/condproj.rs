//! Augmentation-conditioned projector.
//!
//! The projector head π no longer sees the embedding alone: an augmentation
//! encoder γ maps each view's ω vector to a conditioning code g, and π
//! consumes the joint input. Four injection modes are supported:
//!
//! * `concat`: π([e; g])
//! * `add`:    π(e + g)    (γ output width must equal the embedding width)
//! * `mul`:    π(e ⊙ g)    (same width constraint)
//! * `hypernet`: π's parameters are generated per sample as θ(g) = θ_c + H g,
//!   with H zero-initialized so that at init the head equals a reference
//!   projector for every ω.
//!
//! `none` disables conditioning entirely and reduces to the plain projector,
//! bit-for-bit. All of this sits behind [`ConditionedProjector::project`],
//! whose backward pass is hand-written and verified against finite
//! differences.

use ndarray::{s, Array1, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augpipe::{OmegaVector, OMEGA_DIM};
use crate::error::{Error, Result};
use crate::nn::{Mlp, MlpCache, Scalar, Tensors, Trainable};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConditioningMode {
    None,
    Concat,
    Add,
    Mul,
    Hypernet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConditioningSpec {
    pub mode: ConditioningMode,
    /// Layers in γ; depth 0 passes ω through raw (legal only with `concat`).
    pub gamma_depth: usize,
    pub gamma_hidden: usize,
    pub gamma_out: usize,
    /// Layers in π; depth 0 makes the head the identity on the injected
    /// input (the classic no-projector setup when combined with `add`).
    pub projector_depth: usize,
    pub projector_hidden: usize,
    pub projector_out: usize,
}

impl Default for ConditioningSpec {
    fn default() -> Self {
        ConditioningSpec {
            mode: ConditioningMode::Concat,
            gamma_depth: 6,
            gamma_hidden: 64,
            gamma_out: 64,
            projector_depth: 2,
            projector_hidden: 256,
            projector_out: 128,
        }
    }
}

impl ConditioningSpec {
    /// γ's output width as the projector sees it (raw ω at depth 0).
    pub fn effective_gamma_out(&self) -> usize {
        if self.gamma_depth == 0 {
            OMEGA_DIM
        } else {
            self.gamma_out
        }
    }

    pub fn validate(&self, embed_dim: usize) -> Result<()> {
        if embed_dim == 0 {
            return Err(Error::config("embedding width must be positive"));
        }
        match self.mode {
            ConditioningMode::None => return Ok(()),
            ConditioningMode::Concat => {}
            ConditioningMode::Add | ConditioningMode::Mul => {
                if self.effective_gamma_out() != embed_dim {
                    return Err(Error::config(format!(
                        "{:?} conditioning needs gamma_out == embedding width ({} != {embed_dim})",
                        self.mode,
                        self.effective_gamma_out()
                    )));
                }
            }
            ConditioningMode::Hypernet => {
                if self.projector_depth == 0 {
                    return Err(Error::config(
                        "hypernet mode needs projector_depth >= 1 (there are no parameters to generate otherwise)",
                    ));
                }
            }
        }
        if self.gamma_depth == 0 && self.mode != ConditioningMode::Concat {
            return Err(Error::config(format!(
                "gamma_depth 0 (raw omega passthrough) is only legal with concat, got {:?}",
                self.mode
            )));
        }
        if self.gamma_depth > 0 && (self.gamma_hidden == 0 || self.gamma_out == 0) {
            return Err(Error::config("gamma widths must be positive"));
        }
        if self.projector_depth > 0 && (self.projector_hidden == 0 || self.projector_out == 0) {
            return Err(Error::config("projector widths must be positive"));
        }
        Ok(())
    }

    /// Width of the head's input after injection.
    fn head_in(&self, embed_dim: usize) -> usize {
        match self.mode {
            ConditioningMode::Concat => embed_dim + self.effective_gamma_out(),
            _ => embed_dim,
        }
    }
}

/// Joins embedding and conditioning code ahead of the head.
pub fn inject<F: Scalar>(
    mode: ConditioningMode,
    e: &Array2<F>,
    g: &Array2<F>,
) -> Array2<F> {
    match mode {
        ConditioningMode::None | ConditioningMode::Hypernet => e.clone(),
        ConditioningMode::Concat => {
            let mut u = Array2::zeros((e.nrows(), e.ncols() + g.ncols()));
            u.slice_mut(s![.., ..e.ncols()]).assign(e);
            u.slice_mut(s![.., e.ncols()..]).assign(g);
            u
        }
        ConditioningMode::Add => e + g,
        ConditioningMode::Mul => e * g,
    }
}

fn inject_backward<F: Scalar>(
    mode: ConditioningMode,
    e: &Array2<F>,
    g: &Array2<F>,
    du: &Array2<F>,
) -> (Array2<F>, Array2<F>) {
    match mode {
        ConditioningMode::None | ConditioningMode::Hypernet => {
            (du.clone(), Array2::zeros(g.raw_dim()))
        }
        ConditioningMode::Concat => (
            du.slice(s![.., ..e.ncols()]).to_owned(),
            du.slice(s![.., e.ncols()..]).to_owned(),
        ),
        ConditioningMode::Add => (du.clone(), du.clone()),
        ConditioningMode::Mul => (du * g, du * e),
    }
}

/// Per-sample parameter generator `theta(g) = theta_const + H g`.
#[derive(Debug, Clone)]
pub struct Hypernet<F: Scalar> {
    pub theta_const: Array1<F>,
    pub h: Array2<F>,
    pub gtheta: Array1<F>,
    pub gh: Array2<F>,
    pi_dims: Vec<usize>,
}

impl<F: Scalar> Hypernet<F> {
    /// `theta_const` takes the standard initialization of the reference
    /// projector (built from `rng_` exactly as a plain head would be); `H`
    /// starts at zero so the generated head *is* that reference for every ω.
    fn new(pi_dims: Vec<usize>, gamma_out: usize, rng_: &mut impl Rng) -> Self {
        let mut reference: Mlp<F> = Mlp::new(&pi_dims, rng_);
        let theta_const = Array1::from_vec(crate::nn::params_flat(&mut reference));
        let p = theta_const.len();
        Hypernet {
            gtheta: Array1::zeros(p),
            gh: Array2::zeros((p, gamma_out)),
            h: Array2::zeros((p, gamma_out)),
            theta_const,
            pi_dims,
        }
    }

    fn scratch(&self) -> Mlp<F> {
        Mlp::zeros(&self.pi_dims)
    }

    fn out_dim(&self) -> usize {
        *self.pi_dims.last().unwrap()
    }

    /// Generated parameter rows, one per sample: `Theta = g H^T + theta_const`.
    fn generate(&self, g: &Array2<F>) -> Array2<F> {
        g.dot(&self.h.t()) + &self.theta_const
    }

    fn forward(&self, e: &Array2<F>, g: &Array2<F>) -> (Array2<F>, Vec<MlpCache<F>>) {
        let theta = self.generate(g);
        let mut z = Array2::zeros((e.nrows(), self.out_dim()));
        let mut caches = Vec::with_capacity(e.nrows());
        let mut scratch = self.scratch();
        for i in 0..e.nrows() {
            crate::nn::set_params_flat(
                &mut scratch,
                theta.row(i).as_slice().expect("standard layout"),
            );
            let row = e.row(i).insert_axis(Axis(0)).to_owned();
            let (zi, cache) = scratch.forward(&row);
            z.row_mut(i).assign(&zi.row(0));
            caches.push(cache);
        }
        (z, caches)
    }

    /// Accumulates grads into `gtheta`/`gh`; returns (de, dg).
    fn backward(
        &mut self,
        e: &Array2<F>,
        g: &Array2<F>,
        caches: &[MlpCache<F>],
        dz: &Array2<F>,
    ) -> (Array2<F>, Array2<F>) {
        let theta = self.generate(g);
        let p = self.theta_const.len();
        let mut de = Array2::zeros(e.raw_dim());
        let mut dtheta = Array2::zeros((e.nrows(), p));
        let mut scratch = self.scratch();
        for i in 0..e.nrows() {
            crate::nn::set_params_flat(
                &mut scratch,
                theta.row(i).as_slice().expect("standard layout"),
            );
            scratch.zero_grads_all();
            let dzi = dz.row(i).insert_axis(Axis(0)).to_owned();
            let dei = scratch.backward(&caches[i], &dzi);
            de.row_mut(i).assign(&dei.row(0));
            dtheta
                .row_mut(i)
                .assign(&Array1::from_vec(crate::nn::grads_flat(&mut scratch)));
        }
        self.gtheta += &dtheta.sum_axis(Axis(0));
        self.gh += &dtheta.t().dot(g);
        let dg = dtheta.dot(&self.h);
        (de, dg)
    }
}

impl<F: Scalar> Tensors<F> for Hypernet<F> {
    fn tensors(&self, f: &mut dyn FnMut(&str, &[F])) {
        f("theta_const", self.theta_const.as_slice().unwrap());
        f("h", self.h.as_slice().unwrap());
    }
    fn tensors_mut(&mut self, f: &mut dyn FnMut(&str, &mut [F])) {
        f("theta_const", self.theta_const.as_slice_mut().unwrap());
        f("h", self.h.as_slice_mut().unwrap());
    }
}

impl<F: Scalar> Trainable<F> for Hypernet<F> {
    fn params_and_grads(&mut self, f: &mut dyn FnMut(&str, &mut [F], &mut [F])) {
        f(
            "theta_const",
            self.theta_const.as_slice_mut().unwrap(),
            self.gtheta.as_slice_mut().unwrap(),
        );
        f("h", self.h.as_slice_mut().unwrap(), self.gh.as_slice_mut().unwrap());
    }
}

#[derive(Debug, Clone)]
enum Head<F: Scalar> {
    Identity,
    Mlp(Mlp<F>),
    Hyper(Hypernet<F>),
}

/// Projector head plus augmentation encoder, under one parameter namespace.
#[derive(Debug, Clone)]
pub struct ConditionedProjector<F: Scalar> {
    pub spec: ConditioningSpec,
    pub embed_dim: usize,
    /// Identity (zero layers) when `gamma_depth == 0` or conditioning is off.
    pub gamma: Mlp<F>,
    head: Head<F>,
}

pub struct ProjCache<F: Scalar> {
    g: Array2<F>,
    gamma_cache: Option<MlpCache<F>>,
    u: Array2<F>,
    head_cache: HeadCache<F>,
}

enum HeadCache<F: Scalar> {
    Identity,
    Mlp(MlpCache<F>),
    Hyper(Vec<MlpCache<F>>),
}

impl<F: Scalar> ConditionedProjector<F> {
    /// Construction order is fixed (γ first, then head) so reference modules
    /// can be rebuilt from an identical stream.
    pub fn new(spec: &ConditioningSpec, embed_dim: usize, rng_: &mut impl Rng) -> Result<Self> {
        spec.validate(embed_dim)?;
        let gamma = if spec.mode == ConditioningMode::None || spec.gamma_depth == 0 {
            Mlp::new(&[OMEGA_DIM], rng_)
        } else {
            Mlp::with_shape(OMEGA_DIM, spec.gamma_hidden, spec.gamma_out, spec.gamma_depth, rng_)
        };
        let head_in = spec.head_in(embed_dim);
        let head = if spec.projector_depth == 0 {
            Head::Identity
        } else if spec.mode == ConditioningMode::Hypernet {
            let mut dims = vec![head_in];
            for _ in 1..spec.projector_depth {
                dims.push(spec.projector_hidden);
            }
            dims.push(spec.projector_out);
            Head::Hyper(Hypernet::new(dims, spec.effective_gamma_out(), rng_))
        } else {
            Head::Mlp(Mlp::with_shape(
                head_in,
                spec.projector_hidden,
                spec.projector_out,
                spec.projector_depth,
                rng_,
            ))
        };
        Ok(ConditionedProjector { spec: spec.clone(), embed_dim, gamma, head })
    }

    pub fn out_dim(&self) -> usize {
        match &self.head {
            Head::Identity => self.spec.head_in(self.embed_dim),
            Head::Mlp(m) => m.out_dim().unwrap_or(self.spec.head_in(self.embed_dim)),
            Head::Hyper(h) => h.out_dim(),
        }
    }

    fn check_inputs(&self, e: &Array2<F>, omega: &Array2<F>) -> Result<()> {
        if e.ncols() != self.embed_dim {
            return Err(Error::shape(format!(
                "embedding width {} != {}",
                e.ncols(),
                self.embed_dim
            )));
        }
        if self.spec.mode != ConditioningMode::None {
            if omega.ncols() != OMEGA_DIM {
                return Err(Error::shape(format!(
                    "omega width {} != {OMEGA_DIM}",
                    omega.ncols()
                )));
            }
            if omega.nrows() != e.nrows() {
                return Err(Error::shape(format!(
                    "batch mismatch: {} embeddings vs {} omega rows",
                    e.nrows(),
                    omega.nrows()
                )));
            }
        }
        Ok(())
    }

    /// Conditioned projection `z = π(e | ω)`. In `none` mode ω is ignored.
    pub fn project(&self, e: &Array2<F>, omega: &Array2<F>) -> Result<(Array2<F>, ProjCache<F>)> {
        self.check_inputs(e, omega)?;
        let (g, gamma_cache) = if self.spec.mode == ConditioningMode::None {
            (Array2::zeros((e.nrows(), 0)), None)
        } else {
            let (g, c) = self.gamma.forward(omega);
            (g, Some(c))
        };
        let u = inject(self.spec.mode, e, &g);
        let (z, head_cache) = match &self.head {
            Head::Identity => (u.clone(), HeadCache::Identity),
            Head::Mlp(m) => {
                let (z, c) = m.forward(&u);
                (z, HeadCache::Mlp(c))
            }
            Head::Hyper(hy) => {
                let (z, c) = hy.forward(&u, &g);
                (z, HeadCache::Hyper(c))
            }
        };
        Ok((z, ProjCache { g, gamma_cache, u, head_cache }))
    }

    pub fn project_nograd(&self, e: &Array2<F>, omega: &Array2<F>) -> Result<Array2<F>> {
        Ok(self.project(e, omega)?.0)
    }

    /// Backward through head, injection, and γ. Returns (de, domega).
    pub fn backward(
        &mut self,
        e: &Array2<F>,
        cache: &ProjCache<F>,
        dz: &Array2<F>,
    ) -> (Array2<F>, Array2<F>) {
        let mode = self.spec.mode;
        let (du, dg_head) = match (&mut self.head, &cache.head_cache) {
            (Head::Identity, HeadCache::Identity) => (dz.clone(), None),
            (Head::Mlp(m), HeadCache::Mlp(c)) => (m.backward(c, dz), None),
            (Head::Hyper(hy), HeadCache::Hyper(c)) => {
                let (de, dg) = hy.backward(&cache.u, &cache.g, c, dz);
                (de, Some(dg))
            }
            _ => unreachable!("head/cache kind mismatch"),
        };
        let (de, mut dg) = inject_backward(mode, e, &cache.g, &du);
        if let Some(extra) = dg_head {
            dg += &extra;
        }
        let domega = match (&cache.gamma_cache, mode) {
            (_, ConditioningMode::None) => Array2::zeros((e.nrows(), OMEGA_DIM)),
            (Some(c), _) => self.gamma.backward(c, &dg),
            (None, _) => dg, // identity γ: raw passthrough
        };
        (de, domega)
    }
}

impl<F: Scalar> Tensors<F> for ConditionedProjector<F> {
    fn tensors(&self, f: &mut dyn FnMut(&str, &[F])) {
        self.gamma.tensors(&mut |n, d| f(&format!("gamma.{n}"), d));
        match &self.head {
            Head::Identity => {}
            Head::Mlp(m) => m.tensors(&mut |n, d| f(&format!("pi.{n}"), d)),
            Head::Hyper(h) => h.tensors(&mut |n, d| f(&format!("hyper.{n}"), d)),
        }
    }
    fn tensors_mut(&mut self, f: &mut dyn FnMut(&str, &mut [F])) {
        self.gamma.tensors_mut(&mut |n, d| f(&format!("gamma.{n}"), d));
        match &mut self.head {
            Head::Identity => {}
            Head::Mlp(m) => m.tensors_mut(&mut |n, d| f(&format!("pi.{n}"), d)),
            Head::Hyper(h) => h.tensors_mut(&mut |n, d| f(&format!("hyper.{n}"), d)),
        }
    }
}

impl<F: Scalar> Trainable<F> for ConditionedProjector<F> {
    fn params_and_grads(&mut self, f: &mut dyn FnMut(&str, &mut [F], &mut [F])) {
        self.gamma
            .params_and_grads(&mut |n, p, g| f(&format!("gamma.{n}"), p, g));
        match &mut self.head {
            Head::Identity => {}
            Head::Mlp(m) => m.params_and_grads(&mut |n, p, g| f(&format!("pi.{n}"), p, g)),
            Head::Hyper(h) => h.params_and_grads(&mut |n, p, g| f(&format!("hyper.{n}"), p, g)),
        }
    }
}

/// Stacks ω vectors into the `[n, 14]` matrix `project` consumes.
pub fn omegas_to_array<F: Scalar>(omegas: &[OmegaVector]) -> Array2<F> {
    let mut out = Array2::zeros((omegas.len(), OMEGA_DIM));
    for (i, o) in omegas.iter().enumerate() {
        for (j, &v) in o.values.iter().enumerate() {
            out[[i, j]] = F::from_f64_(v);
        }
    }
    out
}

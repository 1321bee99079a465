//! Thirteen-point acceptance suite. Every criterion prints exactly one line,
//! `criterion N: PASS - detail` or `criterion N: FAIL - detail`, and the test
//! panics at the end if any criterion failed, so a red run still reports the
//! status of all thirteen.
//!
//! Criteria 7 through 10 share six desk-scale pretraining runs (two methods,
//! three seeds) plus one long extension. Finished checkpoints are cached
//! under `CARGO_TARGET_TMPDIR` keyed by run name and revalidated against the
//! exact configuration before reuse, so a rerun of the suite only retrains
//! what is missing or stale. The runs use CIFAR-10 when its binary
//! distribution is present at a conventional root and fall back to the
//! synthetic shapes set otherwise; the printed detail names the dataset.

use std::collections::HashMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;
use std::time::Instant;

use ndarray::{Array1, Array2, Axis};

use condssl::analysis::{self, AugKind};
use condssl::augpipe::{
    apply_record, decode_omega, encode_omega, make_view_pair, sample_record, AugmentationPolicy,
    AugmentationRecord, OMEGA_DIM,
};
use condssl::checkpoint;
use condssl::condproj::{ConditionedProjector, ConditioningMode, ConditioningSpec, ProjCache};
use condssl::datahub::{load_dataset, split_dataset, Dataset, DatasetId, DatasetRef, Split};
use condssl::evalsuite::{
    embed_from_checkpoint, few_shot_eval, l2_grid, linear_probe, rotation_probe, EpisodeSpec,
    ProbeMetric,
};
use condssl::image::Image;
use condssl::model::FeatureTag;
use condssl::nn::gradcheck::{check_function_grad, check_loss_grad};
use condssl::nn::{params_flat, set_params_flat, BackboneSpec, Mlp, Tensors, Trainable};
use condssl::rng::{normal, permutation, stream, uniform};
use condssl::sslcore::{
    barlow_twins_loss, info_nce, momentum_update, nt_xent, simsiam_loss, FeatureQueue, Method,
    MethodConfig,
};
use condssl::trainer::{pretrain, PretrainSpec, TrainConfig};

type Crit = Result<(bool, String), Box<dyn std::error::Error>>;

// ---------------------------------------------------------------------------
// Small numeric helpers.

fn bits_eq(a: &[f32], b: &[f32]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn pick(rng: &mut impl rand::Rng, n: usize) -> usize {
    (uniform(rng, 0.0, n as f64) as usize).min(n - 1)
}

/// Random rows scaled to exact unit norm, as the contrastive losses require.
fn unit_rows(n: usize, d: usize, rng: &mut impl rand::Rng) -> Array2<f64> {
    let mut x = Array2::from_shape_fn((n, d), |_| normal(rng));
    for mut row in x.rows_mut() {
        let nrm = row.dot(&row).sqrt();
        row.mapv_inplace(|v| v / nrm);
    }
    x
}

fn normal_matrix(n: usize, d: usize, rng: &mut impl rand::Rng) -> Array2<f64> {
    Array2::from_shape_fn((n, d), |_| normal(rng))
}

// ---------------------------------------------------------------------------
// Criterion 1: omega encoding is constant on identity, bounded, invertible.

fn criterion_1() -> Crit {
    let t0 = Instant::now();
    let policy = AugmentationPolicy::default();

    // The identity record encodes to the same constant vector under any
    // policy: interval midpoints for the continuous blocks, zeros for the
    // applied flags.
    let expected = [0.5, 0.5, 1.0, 1.0, 0.5, 0.5, 0.5, 0.5, 0.0, 0.0, 0.0, 0.5, 0.5, 0.5];
    for pol in [&policy, &AugmentationPolicy::identity(16)] {
        let om = encode_omega(&AugmentationRecord::identity(), pol);
        if om.values != expected {
            return Ok((false, format!("identity record encoded to {:?}", om.values)));
        }
    }

    // Every sampled record encodes inside the unit hypercube.
    let mut rng = stream(11, "acc-omega", &[]);
    for i in 0..2000 {
        let dims = [(24, 24), (32, 20), (20, 32)][i % 3];
        let rec = sample_record(&policy, &mut rng, dims)?;
        let om = encode_omega(&rec, &policy);
        if om.values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Ok((false, format!("encoding left [0,1]^14 at sample {i}: {:?}", om.values)));
        }
    }

    // Applied records (color_diff measured) round-trip through each affine
    // block within 1e-9.
    let mut small = policy.clone();
    small.out_size = 16;
    let mut worst = 0.0f64;
    for i in 0..100 {
        let mut r = stream(11, "acc-roundtrip", &[i]);
        let img = Image::from_fn(24, 24, |_, _, _| uniform(&mut r, 0.0, 1.0) as f32);
        let mut rec = sample_record(&small, &mut r, (24, 24))?;
        apply_record(&img, &mut rec, &small)?;
        let om = encode_omega(&rec, &small);
        let dec = decode_omega(&om, &small);
        let diffs = [
            dec.crop[0] - rec.crop_cx,
            dec.crop[1] - rec.crop_cy,
            dec.crop[2] - rec.crop_w,
            dec.crop[3] - rec.crop_h,
            dec.jitter_factors[0] - rec.jitter_factors[0],
            dec.jitter_factors[1] - rec.jitter_factors[1],
            dec.jitter_factors[2] - rec.jitter_factors[2],
            dec.jitter_hue - rec.jitter_hue,
            dec.blur_sigma - rec.blur_sigma,
            dec.color_diff[0] - rec.color_diff[0],
            dec.color_diff[1] - rec.color_diff[1],
            dec.color_diff[2] - rec.color_diff[2],
        ];
        for d in diffs {
            worst = worst.max(d.abs());
        }
        if dec.flipped != rec.flipped || dec.grayscaled != rec.grayscaled {
            return Ok((false, format!("flag round-trip failed at sample {i}")));
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    let pass = worst < 1e-9 && secs < 1.0;
    Ok((pass, format!("worst round-trip error {worst:.2e}; {secs:.2} s (bound 1 s)")))
}

// ---------------------------------------------------------------------------
// Criterion 2: replaying a filled record reproduces the view bit-exactly.

fn criterion_2() -> Crit {
    let t0 = Instant::now();
    let policy = AugmentationPolicy::default();
    for i in 0..100u64 {
        let mut rng = stream(12, "acc-replay", &[i]);
        let img = Image::from_fn(40, 40, |_, _, _| uniform(&mut rng, 0.0, 1.0) as f32);
        let ((v1, r1), (v2, r2)) = make_view_pair(&img, &policy, &mut rng)?;
        for (view, rec) in [(&v1, &r1), (&v2, &r2)] {
            let mut replay = rec.clone();
            let again = apply_record(&img, &mut replay, &policy)?;
            if !bits_eq(view.data(), again.data()) {
                return Ok((false, format!("pixels diverged on replay of pair {i}")));
            }
            let (a, b) = (encode_omega(rec, &policy), encode_omega(&replay, &policy));
            if a.values.map(f64::to_bits) != b.values.map(f64::to_bits) {
                return Ok((false, format!("record diverged on replay of pair {i}")));
            }
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    Ok((secs < 10.0, format!("100 pairs bit-identical; {secs:.2} s (bound 10 s)")))
}

// ---------------------------------------------------------------------------
// Criterion 3: losses match brute-force oracles on small batches.

fn oracle_info_nce(q: &Array2<f64>, k: &Array2<f64>, negs: &Array2<f64>, tau: f64) -> f64 {
    let mut total = 0.0;
    for i in 0..q.nrows() {
        let mut logits = vec![q.row(i).dot(&k.row(i)) / tau];
        for j in 0..negs.nrows() {
            logits.push(q.row(i).dot(&negs.row(j)) / tau);
        }
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
        total -= logits[0] - m - z.ln();
    }
    total / q.nrows() as f64
}

fn oracle_nt_xent(z1: &Array2<f64>, z2: &Array2<f64>, tau: f64) -> f64 {
    let n = z1.nrows();
    let m = 2 * n;
    let mut z = Array2::zeros((m, z1.ncols()));
    for i in 0..n {
        z.row_mut(i).assign(&z1.row(i));
        z.row_mut(n + i).assign(&z2.row(i));
    }
    let mut total = 0.0;
    for i in 0..m {
        let partner = (i + n) % m;
        let mut den = 0.0;
        for j in 0..m {
            if j != i {
                den += (z.row(i).dot(&z.row(j)) / tau).exp();
            }
        }
        let num = (z.row(i).dot(&z.row(partner)) / tau).exp();
        total -= (num / den).ln();
    }
    total / m as f64
}

fn oracle_barlow(z1: &Array2<f64>, z2: &Array2<f64>, lambda: f64) -> f64 {
    let (n, d) = (z1.nrows(), z1.ncols());
    let standardize = |x: &Array2<f64>| {
        let mut h = x.clone();
        for j in 0..d {
            let col: Vec<f64> = (0..n).map(|i| x[[i, j]]).collect();
            let mean = col.iter().sum::<f64>() / n as f64;
            let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + 1e-12).sqrt();
            for i in 0..n {
                h[[i, j]] = (x[[i, j]] - mean) * inv;
            }
        }
        h
    };
    let (h1, h2) = (standardize(z1), standardize(z2));
    let mut loss = 0.0;
    for a in 0..d {
        for b in 0..d {
            let mut c = 0.0;
            for i in 0..n {
                c += h1[[i, a]] * h2[[i, b]];
            }
            c /= n as f64;
            if a == b {
                loss += (1.0 - c) * (1.0 - c);
            } else {
                loss += lambda * c * c;
            }
        }
    }
    loss
}

fn oracle_simsiam(p1: &Array2<f64>, z2: &Array2<f64>, p2: &Array2<f64>, z1: &Array2<f64>) -> f64 {
    let n = p1.nrows();
    let mut total = 0.0;
    for (p, z) in [(p1, z2), (p2, z1)] {
        for i in 0..n {
            let (pr, zr) = (p.row(i), z.row(i));
            let cos = pr.dot(&zr) / (pr.dot(&pr).sqrt() * zr.dot(&zr).sqrt());
            total -= cos;
        }
    }
    total / (2.0 * n as f64)
}

fn criterion_3() -> Crit {
    let t0 = Instant::now();
    let mut worst = 0.0f64;
    for (case, (n, d, k)) in [(0usize, (2, 3, 0)), (1, (3, 5, 4)), (2, (8, 7, 16)), (3, (5, 16, 8))]
        .into_iter()
        .enumerate()
    {
        for (ti, tau) in [0.2, 0.5, 1.0].into_iter().enumerate() {
            let mut rng = stream(13, "acc-loss", &[case as u64, ti as u64]);
            let q = unit_rows(n, d, &mut rng);
            let kp = unit_rows(n, d, &mut rng);
            let negs = unit_rows(k.max(1), d, &mut rng);
            let negs = if k == 0 { Array2::zeros((0, d)) } else { negs };
            let (lib, _) = info_nce(&q, &kp, &negs, tau)?;
            worst = worst.max((lib - oracle_info_nce(&q, &kp, &negs, tau)).abs());

            let (lib, _, _) = nt_xent(&q, &kp, tau)?;
            worst = worst.max((lib - oracle_nt_xent(&q, &kp, tau)).abs());

            let a = normal_matrix(n, d, &mut rng);
            let b = normal_matrix(n, d, &mut rng);
            let lambda = 5e-3 * (ti as f64 + 1.0);
            let (lib, _, _) = barlow_twins_loss(&a, &b, lambda)?;
            worst = worst.max((lib - oracle_barlow(&a, &b, lambda)).abs());

            let (p1, p2) = (normal_matrix(n, d, &mut rng), normal_matrix(n, d, &mut rng));
            let (s1, s2) = (normal_matrix(n, d, &mut rng), normal_matrix(n, d, &mut rng));
            let (lib, _, _) = simsiam_loss(&p1, &s2, &p2, &s1)?;
            worst = worst.max((lib - oracle_simsiam(&p1, &s2, &p2, &s1)).abs());
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    let pass = worst < 1e-6 && secs < 30.0;
    Ok((pass, format!("worst |loss - oracle| {worst:.2e} (bound 1e-6); {secs:.2} s")))
}

// ---------------------------------------------------------------------------
// Criterion 4: finite differences confirm every analytic gradient.

/// Projector with the omega argument frozen, so the harness can treat the
/// embedding as the differentiated input.
#[derive(Clone)]
struct ProjOnEmbed {
    proj: ConditionedProjector<f64>,
    omega: Array2<f64>,
}

impl Tensors<f64> for ProjOnEmbed {
    fn tensors(&self, f: &mut dyn FnMut(&str, &[f64])) {
        self.proj.tensors(f)
    }
    fn tensors_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.proj.tensors_mut(f)
    }
}
impl Trainable<f64> for ProjOnEmbed {
    fn params_and_grads(&mut self, f: &mut dyn FnMut(&str, &mut [f64], &mut [f64])) {
        self.proj.params_and_grads(f)
    }
}

/// The mirror image: embedding frozen, omega differentiated.
#[derive(Clone)]
struct ProjOnOmega {
    proj: ConditionedProjector<f64>,
    e: Array2<f64>,
}

impl Tensors<f64> for ProjOnOmega {
    fn tensors(&self, f: &mut dyn FnMut(&str, &[f64])) {
        self.proj.tensors(f)
    }
    fn tensors_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.proj.tensors_mut(f)
    }
}
impl Trainable<f64> for ProjOnOmega {
    fn params_and_grads(&mut self, f: &mut dyn FnMut(&str, &mut [f64], &mut [f64])) {
        self.proj.params_and_grads(f)
    }
}

fn gradcheck_spec(mode: ConditioningMode, embed: usize) -> ConditioningSpec {
    let gamma_out = match mode {
        ConditioningMode::Add | ConditioningMode::Mul => embed,
        _ => 8,
    };
    ConditioningSpec {
        mode,
        gamma_depth: 2,
        gamma_hidden: 8,
        gamma_out,
        projector_depth: 2,
        projector_hidden: 7,
        projector_out: 5,
    }
}

fn criterion_4() -> Crit {
    let t0 = Instant::now();
    let embed = 6;
    let mut worst = 0.0f64;
    let mut worst_at = String::from("none");
    let mut track = |label: &str, err: f64, worst: &mut f64, worst_at: &mut String| {
        if err > *worst {
            *worst = err;
            *worst_at = label.to_string();
        }
    };

    let modes = [
        ConditioningMode::None,
        ConditioningMode::Concat,
        ConditioningMode::Add,
        ConditioningMode::Mul,
        ConditioningMode::Hypernet,
    ];
    for (mi, mode) in modes.into_iter().enumerate() {
        for point in 0..20u64 {
            let mut rng = stream(14, "acc-grad-proj", &[mi as u64, point]);
            let spec = gradcheck_spec(mode, embed);
            let mut proj = ConditionedProjector::<f64>::new(&spec, embed, &mut rng)?;
            // Nudge every parameter off its init (the hypernet starts with
            // H = 0, which would make the omega gradient trivially zero).
            let mut theta = params_flat(&mut proj);
            for v in &mut theta {
                *v += 0.3 * normal(&mut rng);
            }
            set_params_flat(&mut proj, &theta);

            let e = normal_matrix(4, embed, &mut rng);
            let omega = Array2::from_shape_fn((4, OMEGA_DIM), |_| uniform(&mut rng, 0.0, 1.0));

            let on_e = ProjOnEmbed { proj: proj.clone(), omega: omega.clone() };
            let err = check_function_grad(
                &on_e,
                &e,
                |m, x| m.proj.project(x, &m.omega).expect("project"),
                |m: &mut ProjOnEmbed, c: &ProjCache<f64>, r| m.proj.backward(&e, c, r).0,
                &mut rng,
            );
            track(&format!("project/{mode:?}/embed"), err, &mut worst, &mut worst_at);

            if mode != ConditioningMode::None {
                let on_om = ProjOnOmega { proj, e: e.clone() };
                let err = check_function_grad(
                    &on_om,
                    &omega,
                    |m, x| m.proj.project(&m.e, x).expect("project"),
                    |m: &mut ProjOnOmega, c: &ProjCache<f64>, r| m.proj.backward(&m.e, c, r).1,
                    &mut rng,
                );
                track(&format!("project/{mode:?}/omega"), err, &mut worst, &mut worst_at);
            }
        }
    }

    // The augmentation encoder on its own.
    for point in 0..20u64 {
        let mut rng = stream(14, "acc-grad-gamma", &[point]);
        let gamma = Mlp::<f64>::with_shape(OMEGA_DIM, 8, 6, 3, &mut rng);
        let x = Array2::from_shape_fn((4, OMEGA_DIM), |_| uniform(&mut rng, 0.0, 1.0));
        let err = check_function_grad(
            &gamma,
            &x,
            |m: &mut Mlp<f64>, x| m.forward(x),
            |m, c, r| m.backward(c, r),
            &mut rng,
        );
        track("gamma", err, &mut worst, &mut worst_at);
    }

    // Losses: FD over each differentiated argument.
    for point in 0..20u64 {
        let mut rng = stream(14, "acc-grad-loss", &[point]);
        let n = 3 + (point % 4) as usize;
        let d = 4 + (point % 3) as usize;
        let tau = 0.5;

        let q = unit_rows(n, d, &mut rng);
        let kp = unit_rows(n, d, &mut rng);
        let negs = unit_rows(6, d, &mut rng);
        let (_, dq) = info_nce(&q, &kp, &negs, tau)?;
        let err = check_loss_grad(
            &mut |x| info_nce(x, &kp, &negs, tau).unwrap().0,
            &q,
            &dq,
        );
        track("info_nce/q", err, &mut worst, &mut worst_at);

        let z1 = unit_rows(n, d, &mut rng);
        let z2 = unit_rows(n, d, &mut rng);
        let (_, dz1, dz2) = nt_xent(&z1, &z2, tau)?;
        let err = check_loss_grad(&mut |x| nt_xent(x, &z2, tau).unwrap().0, &z1, &dz1);
        track("nt_xent/z1", err, &mut worst, &mut worst_at);
        let err = check_loss_grad(&mut |x| nt_xent(&z1, x, tau).unwrap().0, &z2, &dz2);
        track("nt_xent/z2", err, &mut worst, &mut worst_at);

        let a = normal_matrix(n, d, &mut rng);
        let b = normal_matrix(n, d, &mut rng);
        let (_, da, db) = barlow_twins_loss(&a, &b, 5e-3)?;
        let err = check_loss_grad(&mut |x| barlow_twins_loss(x, &b, 5e-3).unwrap().0, &a, &da);
        track("barlow/z1", err, &mut worst, &mut worst_at);
        let err = check_loss_grad(&mut |x| barlow_twins_loss(&a, x, 5e-3).unwrap().0, &b, &db);
        track("barlow/z2", err, &mut worst, &mut worst_at);

        let (p1, p2) = (normal_matrix(n, d, &mut rng), normal_matrix(n, d, &mut rng));
        let (s1, s2) = (normal_matrix(n, d, &mut rng), normal_matrix(n, d, &mut rng));
        let (_, dp1, dp2) = simsiam_loss(&p1, &s2, &p2, &s1)?;
        let err = check_loss_grad(&mut |x| simsiam_loss(x, &s2, &p2, &s1).unwrap().0, &p1, &dp1);
        track("simsiam/p1", err, &mut worst, &mut worst_at);
        let err = check_loss_grad(&mut |x| simsiam_loss(&p1, &s2, x, &s1).unwrap().0, &p2, &dp2);
        track("simsiam/p2", err, &mut worst, &mut worst_at);
    }

    let secs = t0.elapsed().as_secs_f64();
    let pass = worst < 1e-4 && secs < 300.0;
    Ok((pass, format!("worst rel err {worst:.2e} at {worst_at} (bound 1e-4); {secs:.1} s")))
}

// ---------------------------------------------------------------------------
// Criterion 5: conditioning reductions and the hypernet init identity.

fn zero_gamma(proj: &mut ConditionedProjector<f32>) {
    proj.tensors_mut(&mut |name, data| {
        if name.starts_with("gamma.") {
            data.fill(0.0);
        }
    });
}

/// Copies the head parameters between projectors whose heads share a shape.
fn copy_head(src: &ConditionedProjector<f32>, dst: &mut ConditionedProjector<f32>) {
    let mut head: Vec<(String, Vec<f32>)> = Vec::new();
    src.tensors(&mut |name, data| {
        if name.starts_with("pi.") {
            head.push((name.to_string(), data.to_vec()));
        }
    });
    dst.tensors_mut(&mut |name, data| {
        if let Some((_, v)) = head.iter().find(|(n, _)| n == name) {
            data.copy_from_slice(v);
        }
    });
}

fn criterion_5() -> Crit {
    let embed = 16;
    let mut rng = stream(15, "acc-c5", &[]);
    let e = Array2::from_shape_fn((5, embed), |_| normal(&mut rng) as f32);
    let omega = Array2::from_shape_fn((5, OMEGA_DIM), |_| uniform(&mut rng, 0.0, 1.0) as f32);

    // (a) mode none is the plain projector, bit for bit: rebuilding the head
    // from an identical stream yields identical weights because the disabled
    // gamma consumes no draws.
    let spec_none = ConditioningSpec {
        mode: ConditioningMode::None,
        gamma_depth: 2,
        gamma_hidden: 8,
        gamma_out: 8,
        projector_depth: 2,
        projector_hidden: 32,
        projector_out: 24,
    };
    let mut s1 = stream(15, "acc-c5-none", &[]);
    let none_proj = ConditionedProjector::<f32>::new(&spec_none, embed, &mut s1)?;
    let mut s2 = stream(15, "acc-c5-none", &[]);
    let reference = Mlp::<f32>::with_shape(embed, 32, 24, 2, &mut s2);
    let z = none_proj.project_nograd(&e, &omega)?;
    let zr = reference.forward_nograd(&e);
    if !bits_eq(z.as_slice().unwrap(), zr.as_slice().unwrap()) {
        return Ok((false, "mode none diverged from the plain projector".into()));
    }

    // (b) add with g = 0 and mul with g = 1 reduce to the unconditioned head.
    for mode in [ConditioningMode::Add, ConditioningMode::Mul] {
        let spec = ConditioningSpec {
            mode,
            gamma_out: embed,
            ..spec_none.clone()
        };
        let mut p = ConditionedProjector::<f32>::new(&spec, embed, &mut rng)?;
        zero_gamma(&mut p);
        if mode == ConditioningMode::Mul {
            // Zeroed earlier layers feed the final affine layer zero input,
            // so a bias of one makes gamma output exactly one.
            p.tensors_mut(&mut |name, data| {
                if name == "gamma.l1.b" {
                    data.fill(1.0);
                }
            });
        }
        let mut plain = ConditionedProjector::<f32>::new(&spec_none, embed, &mut rng)?;
        copy_head(&p, &mut plain);
        let zc = p.project_nograd(&e, &omega)?;
        let zp = plain.project_nograd(&e, &omega)?;
        if !bits_eq(zc.as_slice().unwrap(), zp.as_slice().unwrap()) {
            return Ok((false, format!("{mode:?} identity reduction diverged")));
        }
    }

    // (c) hypernet at init: H = 0, so the generated head equals the constant
    // reference for every omega.
    let spec_hyper = ConditioningSpec {
        mode: ConditioningMode::Hypernet,
        gamma_out: 8,
        ..spec_none.clone()
    };
    let hyper = ConditionedProjector::<f32>::new(&spec_hyper, embed, &mut rng)?;
    let mut theta = Vec::new();
    hyper.tensors(&mut |name, data| {
        if name == "hyper.theta_const" {
            theta = data.to_vec();
        }
    });
    let mut reference = Mlp::<f32>::zeros(&[embed, 32, 24]);
    set_params_flat(&mut reference, &theta);
    let zr = reference.forward_nograd(&e);
    let mut worst = 0.0f32;
    for i in 0..100u64 {
        let mut r = stream(15, "acc-c5-hyper", &[i]);
        let om = Array2::from_shape_fn((5, OMEGA_DIM), |_| uniform(&mut r, 0.0, 1.0) as f32);
        let z = hyper.project_nograd(&e, &om)?;
        for (a, b) in z.iter().zip(zr.iter()) {
            worst = worst.max((a - b).abs());
        }
    }
    let pass = worst < 1e-6;
    Ok((pass, format!("reductions bit-exact; hypernet init deviation {worst:.2e} over 100 omegas")))
}

// ---------------------------------------------------------------------------
// Criterion 6: EMA endpoints and queue FIFO semantics.

fn criterion_6() -> Crit {
    let mut rng = stream(16, "acc-c6", &[]);
    let online = Mlp::<f32>::with_shape(6, 8, 4, 2, &mut rng);
    let target = Mlp::<f32>::with_shape(6, 8, 4, 2, &mut rng);

    let mut t = target.clone();
    momentum_update(&mut t, &online, 1.0)?;
    let kept = bits_eq(
        &params_flat(&mut t.clone()),
        &params_flat(&mut target.clone()),
    );
    let mut t = target.clone();
    momentum_update(&mut t, &online, 0.0)?;
    let copied = bits_eq(
        &params_flat(&mut t.clone()),
        &params_flat(&mut online.clone()),
    );
    if !kept || !copied {
        return Ok((false, format!("EMA endpoints broke: m=1 kept={kept}, m=0 copied={copied}")));
    }

    // 1000 random push schedules against a plain vector-of-rows oracle.
    let caps = [2usize, 4, 6, 8, 12, 16, 24];
    for s in 0..1000u64 {
        let mut r = stream(16, "acc-queue", &[s]);
        let cap = caps[pick(&mut r, caps.len())];
        let dim = 1 + pick(&mut r, 5);
        let divisors: Vec<usize> = (1..=cap).filter(|d| cap % d == 0).collect();
        let mut q = FeatureQueue::<f32>::new_random(cap, dim, &mut r)?;
        let mut oracle: Vec<Vec<f32>> = q
            .ordered()
            .rows()
            .into_iter()
            .map(|row| row.to_vec())
            .collect();
        for _ in 0..(1 + pick(&mut r, 20)) {
            let b = divisors[pick(&mut r, divisors.len())];
            let batch = Array2::from_shape_fn((b, dim), |_| normal(&mut r) as f32);
            q.push_batch(&batch)?;
            for row in batch.rows() {
                oracle.push(row.to_vec());
            }
            oracle.drain(..oracle.len() - cap);
            let got = q.ordered();
            for (i, row) in got.rows().into_iter().enumerate() {
                if !bits_eq(&row.to_vec(), &oracle[i]) {
                    return Ok((false, format!("queue diverged from oracle in schedule {s}")));
                }
            }
        }
    }
    Ok((true, "EMA endpoints exact; queue matched the oracle on 1000 schedules".into()))
}

// ---------------------------------------------------------------------------
// Shared desk-scale pretraining runs (criteria 7 through 10).

/// Train-and-test pair for the desk runs, CIFAR-10 if its binaries are found.
fn desk_data() -> &'static (Dataset, Dataset, String) {
    static DATA: OnceLock<(Dataset, Dataset, String)> = OnceLock::new();
    DATA.get_or_init(|| {
        for root in [
            "/root/data/cifar-10-batches-bin",
            "/root/data/cifar10",
            "data/cifar-10-batches-bin",
            "data/cifar10",
        ] {
            let mut train = DatasetRef::new(DatasetId::Cifar10, root, Split::Train);
            train.limit = Some(10_000);
            let mut test = DatasetRef::new(DatasetId::Cifar10, root, Split::Test);
            test.limit = Some(2_000);
            if let (Ok(tr), Ok(te)) = (load_dataset(&train), load_dataset(&test)) {
                return (tr, te, format!("cifar10 ({root})"));
            }
        }
        let mut train = DatasetRef::new(DatasetId::Shapes, "", Split::Train);
        train.image_size = Some(32);
        let mut test = DatasetRef::new(DatasetId::Shapes, "", Split::Test);
        test.image_size = Some(32);
        (
            load_dataset(&train).expect("synthetic set always loads"),
            load_dataset(&test).expect("synthetic set always loads"),
            "shapes (no cifar10 root found)".to_string(),
        )
    })
}

fn desk_spec(mode: ConditioningMode, seed: u64, epochs: usize) -> PretrainSpec {
    let conditioning = match mode {
        ConditioningMode::None => ConditioningSpec {
            mode: ConditioningMode::None,
            ..ConditioningSpec::default()
        },
        // Defaults are exactly the concat encoder the criterion names:
        // gamma depth 6, hidden 64.
        _ => ConditioningSpec::default(),
    };
    PretrainSpec {
        method: MethodConfig::defaults(Method::Simclr),
        conditioning,
        backbone: BackboneSpec {
            widths: [8, 16, 32, 64],
            ..BackboneSpec::default()
        },
        augment: AugmentationPolicy::default(),
        train: TrainConfig {
            epochs,
            seed,
            ..TrainConfig::default()
        },
    }
}

struct RunOut {
    ckpt: PathBuf,
    loss_history: Vec<f64>,
    wall_secs: Option<f64>,
    reused: bool,
}

/// Trains into a named directory under the target tmp root, or revalidates
/// and reuses a finished checkpoint. Failures are memoized so later criteria
/// do not retrain a deterministically failing configuration.
struct RunFarm {
    root: PathBuf,
    failed: HashMap<String, String>,
}

impl RunFarm {
    fn new() -> Self {
        RunFarm {
            root: Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance-runs"),
            failed: HashMap::new(),
        }
    }

    fn ensure(
        &mut self,
        name: &str,
        spec: &PretrainSpec,
        ds: &Dataset,
        resume: Option<&Path>,
    ) -> Result<RunOut, Box<dyn std::error::Error>> {
        let key = format!("{name}-ep{}", spec.train.epochs);
        if let Some(err) = self.failed.get(&key) {
            return Err(format!("earlier training attempt failed: {err}").into());
        }
        let dir = self.root.join(name);
        std::fs::create_dir_all(&dir)?;
        let final_ckpt = dir.join(format!("ckpt-ep{}.ckpt", spec.train.epochs));
        let wall_path = dir.join(format!("wall-ep{}.json", spec.train.epochs));

        if final_ckpt.exists() {
            if let Ok(meta) = checkpoint::load_meta(&final_ckpt) {
                let same = meta.epoch == spec.train.epochs
                    && meta.seed == spec.train.seed
                    && serde_json::to_value(&meta.method)? == serde_json::to_value(&spec.method)?
                    && serde_json::to_value(&meta.conditioning)?
                        == serde_json::to_value(&spec.conditioning)?
                    && serde_json::to_value(&meta.backbone)?
                        == serde_json::to_value(&spec.backbone)?
                    && serde_json::to_value(&meta.augment)? == serde_json::to_value(&spec.augment)?;
                if same {
                    let wall_secs = std::fs::read_to_string(&wall_path)
                        .ok()
                        .and_then(|t| serde_json::from_str::<serde_json::Value>(&t).ok())
                        .and_then(|v| v["wall_seconds"].as_f64());
                    return Ok(RunOut {
                        ckpt: final_ckpt,
                        loss_history: meta.loss_history,
                        wall_secs,
                        reused: true,
                    });
                }
            }
            // Stale config or unreadable file: retrain from scratch.
            std::fs::remove_file(&final_ckpt)?;
        }

        let t0 = Instant::now();
        let outcome = match pretrain(spec, ds, &dir, resume) {
            Ok(o) => o,
            Err(e) => {
                self.failed.insert(key, e.to_string());
                return Err(Box::new(e));
            }
        };
        let wall = t0.elapsed().as_secs_f64();
        std::fs::write(&wall_path, format!("{{\"wall_seconds\": {wall}}}"))?;
        Ok(RunOut {
            ckpt: outcome.checkpoint_path,
            loss_history: outcome.state.loss_history,
            wall_secs: Some(wall),
            reused: false,
        })
    }
}

// ---------------------------------------------------------------------------
// Criterion 7: the conditioned desk run learns.

fn criterion_7(farm: &mut RunFarm) -> Crit {
    let (train, _, dname) = desk_data();
    let spec = desk_spec(ConditioningMode::Concat, 1, 20);
    let run = farm.ensure("cond-s1", &spec, train, None)?;
    let first = run.loss_history[0];
    let last = *run.loss_history.last().unwrap();
    let within_budget = run.wall_secs.map(|w| w < 3.0 * 3600.0).unwrap_or(true);
    let wall = match (run.reused, run.wall_secs) {
        (true, Some(w)) => format!("cached, originally {w:.0} s"),
        (true, None) => "cached".to_string(),
        (false, Some(w)) => format!("{w:.0} s (bound 3 h)"),
        (false, None) => unreachable!("fresh runs always record wall time"),
    };
    Ok((
        last < first && within_budget,
        format!("{dname}; epoch-mean loss {first:.4} -> {last:.4} over 20 epochs; {wall}"),
    ))
}

// ---------------------------------------------------------------------------
// Criterion 8: the long run's projector output depends on omega.

fn criterion_8(farm: &mut RunFarm) -> Crit {
    let (train, _, _) = desk_data();
    let spec20 = desk_spec(ConditioningMode::Concat, 1, 20);
    let base = farm.ensure("cond-s1", &spec20, train, None)?;
    let spec100 = desk_spec(ConditioningMode::Concat, 1, 100);
    let long = farm.ensure("cond-s1", &spec100, train, Some(&base.ckpt))?;

    let report = analysis::conditioning_dependency_from_checkpoint(&long.ckpt, train, 1000, 88)?;
    let diff = report.mean_sim_true - report.mean_sim_random;
    let pass = report.frac_true_gt_random > 0.60 && diff > 0.0 && report.p_value < 0.01;
    Ok((
        pass,
        format!(
            "frac_true_gt_random {:.3} (bound 0.60); mean sim diff {diff:+.4}; p {:.2e} (alpha 0.01)",
            report.frac_true_gt_random, report.p_value
        ),
    ))
}

// ---------------------------------------------------------------------------
// Criteria 9/10: matched-budget comparison over three seeds.

fn six_runs(
    farm: &mut RunFarm,
) -> Result<(Vec<PathBuf>, Vec<PathBuf>), Box<dyn std::error::Error>> {
    let (train, _, _) = desk_data();
    let mut cond = Vec::new();
    let mut van = Vec::new();
    for seed in [1u64, 2, 3] {
        let c = farm.ensure(
            &format!("cond-s{seed}"),
            &desk_spec(ConditioningMode::Concat, seed, 20),
            train,
            None,
        )?;
        let v = farm.ensure(
            &format!("van-s{seed}"),
            &desk_spec(ConditioningMode::None, seed, 20),
            train,
            None,
        )?;
        cond.push(c.ckpt);
        van.push(v.ckpt);
    }
    Ok((cond, van))
}

fn criterion_9(farm: &mut RunFarm) -> Crit {
    let (_, test, _) = desk_data();
    let (cond, van) = six_runs(farm)?;
    let extractor_infonce = |ckpt: &Path| -> Result<f64, Box<dyn std::error::Error>> {
        let prof = analysis::stagewise_from_checkpoint(ckpt, test, AugKind::Jitter, 256, 0.5, 77)?;
        let (tag, value) = prof.values[3];
        if tag != FeatureTag::Stage4 {
            return Err(format!("expected stage4 at slot 3, got {tag:?}").into());
        }
        Ok(value)
    };
    let mut c_vals = Vec::new();
    let mut v_vals = Vec::new();
    for ckpt in &cond {
        c_vals.push(extractor_infonce(ckpt)?);
    }
    for ckpt in &van {
        v_vals.push(extractor_infonce(ckpt)?);
    }
    let (mc, mv) = (median(&c_vals), median(&v_vals));
    Ok((
        mc > mv,
        format!(
            "extractor-stage InfoNCE under jitter, median over 3 seeds: conditioned {mc:.4} vs vanilla {mv:.4}"
        ),
    ))
}

fn criterion_10(farm: &mut RunFarm) -> Crit {
    let (train, test, dname) = desk_data();
    let (cond, van) = six_runs(farm)?;
    let cache = farm.root.join("embed-cache");
    let (fit, val) = split_dataset(train, (0.9, 0.1), 11)?;

    let probe = |ckpt: &Path| -> Result<f64, Box<dyn std::error::Error>> {
        let embed = |ds: &Dataset, split: &str| -> Result<Array2<f64>, condssl::Error> {
            let (x, _, _) = embed_from_checkpoint(ckpt, ds, split, true, Some(&cache))?;
            Ok(x.mapv(|v| v as f64))
        };
        let xf = embed(&fit, "probe-fit")?;
        let xv = embed(&val, "probe-val")?;
        let xt = embed(test, "probe-test")?;
        let result = linear_probe(
            (&xf, &fit.labels),
            (&xv, &val.labels),
            (&xt, &test.labels),
            train.class_count,
            &l2_grid(),
            ProbeMetric::Top1,
            dname,
            11,
        )?;
        Ok(result.value)
    };

    let mut c_vals = Vec::new();
    let mut v_vals = Vec::new();
    for ckpt in &cond {
        c_vals.push(probe(ckpt)?);
    }
    for ckpt in &van {
        v_vals.push(probe(ckpt)?);
    }
    let (mc, mv) = (median(&c_vals), median(&v_vals));
    Ok((
        mc >= mv - 0.005,
        format!(
            "linear-probe top-1, median over 3 seeds: conditioned {:.2}% vs vanilla {:.2}% (margin 0.5 pp)",
            100.0 * mc,
            100.0 * mv
        ),
    ))
}

// ---------------------------------------------------------------------------
// Criterion 11: spectral and PCA tooling on synthetic ground truth.

/// Orthonormal columns, each orthogonal to the all-ones vector, so scaling
/// column j by sqrt(lambda_j (n-1)) yields sample covariance eigenvalues of
/// exactly lambda_j.
fn orthonormal_centered(n: usize, d: usize, seed: u64) -> Array2<f64> {
    let mut rng = stream(seed, "acc-orth", &[]);
    let mut g = normal_matrix(n, d, &mut rng);
    for j in 0..d {
        let mean = g.column(j).sum() / n as f64;
        g.column_mut(j).mapv_inplace(|v| v - mean);
    }
    for j in 0..d {
        for i in 0..j {
            let qi = g.column(i).to_owned();
            let proj = g.column(j).dot(&qi);
            let mut cj = g.column_mut(j);
            cj.zip_mut_with(&qi, |c, &q| *c -= proj * q);
        }
        let nrm = g.column(j).dot(&g.column(j)).sqrt();
        g.column_mut(j).mapv_inplace(|v| v / nrm);
    }
    g
}

fn criterion_11() -> Crit {
    let (n, d) = (400, 64);
    let mut worst_alpha = 0.0f64;
    for (i, a) in [0.5f64, 1.0, 1.5].into_iter().enumerate() {
        let q = orthonormal_centered(n, d, 110 + i as u64);
        let mut emb = Array2::zeros((n, d));
        for j in 0..d {
            let lambda = ((j + 1) as f64).powf(-a);
            let scale = (lambda * (n as f64 - 1.0)).sqrt();
            for r in 0..n {
                emb[[r, j]] = q[[r, j]] * scale;
            }
        }
        let fit = analysis::eigenspectrum_alpha(&emb, Some((10, 32)))?;
        worst_alpha = worst_alpha.max((fit.alpha - a).abs());
    }
    if worst_alpha > 0.05 {
        return Ok((false, format!("alpha recovery error {worst_alpha:.3} exceeds 0.05")));
    }

    let mut rng = stream(112, "acc-pca", &[]);
    let x = normal_matrix(300, 40, &mut rng);
    let curve = analysis::explained_variance(&x)?;
    let nondecreasing = curve.cumulative.windows(2).all(|w| w[1] >= w[0]);
    let ends_at_one = (curve.cumulative.last().unwrap() - 1.0).abs() < 1e-12;
    if !(nondecreasing && ends_at_one) {
        return Ok((false, "PCA curve is not a nondecreasing ramp to 1.0".into()));
    }

    let r = 6;
    let a = normal_matrix(200, r, &mut rng);
    let b = normal_matrix(r, 32, &mut rng);
    let lowrank = a.dot(&b);
    let eig = analysis::covariance_eigenvalues(&lowrank)?;
    let nonzero = eig.iter().filter(|&&l| l > 1e-8).count();
    let pass = nonzero == r;
    Ok((
        pass,
        format!(
            "alpha recovery within {worst_alpha:.3}; PCA ramp exact; rank-{r} data gave {nonzero} nonzero eigenvalues"
        ),
    ))
}

// ---------------------------------------------------------------------------
// Criterion 12: probe harness sanity on constructions with known answers.

/// Gaussian blobs around well-separated axis-aligned means.
fn blobs(
    per_class: usize,
    classes: usize,
    d: usize,
    sep: f64,
    noise: f64,
    seed: u64,
) -> (Array2<f64>, Vec<u32>) {
    let mut rng = stream(seed, "acc-blobs", &[]);
    let n = per_class * classes;
    let mut x = Array2::zeros((n, d));
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % classes;
        for j in 0..d {
            let mean = if j == c { sep } else { 0.0 };
            x[[i, j]] = mean + noise * normal(&mut rng);
        }
        y.push(c as u32);
    }
    (x, y)
}

/// Radially symmetric disk: the pixel value is an exact function of the
/// integer squared distance to the frame center, so every 90-degree rotation
/// is bit-identical to the original.
fn disk_image(size: usize, radius: f64, tint: [f32; 3]) -> Image {
    Image::from_fn(size, size, |y, x, c| {
        let dy = (2 * y as i64 - (size as i64 - 1)) as f64;
        let dx = (2 * x as i64 - (size as i64 - 1)) as f64;
        let rr = dy * dy + dx * dx;
        let edge = (2.0 * radius) * (2.0 * radius);
        let v = 1.0 / (1.0 + ((rr - edge) / edge).exp());
        (tint[c] * v as f32).clamp(0.0, 1.0)
    })
}

fn criterion_12() -> Crit {
    // Separable blobs reach a perfect probe.
    let (xt, yt) = blobs(60, 4, 8, 10.0, 1.0, 120);
    let (xv, yv) = blobs(20, 4, 8, 10.0, 1.0, 121);
    let (xs, ys) = blobs(50, 4, 8, 10.0, 1.0, 122);
    let perfect = linear_probe(
        (&xt, &yt),
        (&xv, &yv),
        (&xs, &ys),
        4,
        &l2_grid(),
        ProbeMetric::Top1,
        "blobs",
        3,
    )?
    .value;
    if perfect < 0.9999 {
        return Ok((false, format!("separable blobs scored {perfect:.4}, expected 1.0")));
    }

    // Shuffling the labels drops the same features to chance.
    let mut rng = stream(123, "acc-shuffle", &[]);
    let shuffle = |y: &[u32], r: &mut rand::rngs::mock::StepRng| -> Vec<u32> {
        let _ = (y, r);
        unreachable!()
    };
    let _ = shuffle; // the closure form needs a concrete rng; permute directly
    let (xt, yt) = blobs(300, 4, 8, 10.0, 1.0, 124);
    let (xv, yv) = blobs(100, 4, 8, 10.0, 1.0, 125);
    let (xs, ys) = blobs(400, 4, 8, 10.0, 1.0, 126);
    let permute = |y: &[u32], rng: &mut rand_chacha::ChaCha8Rng| -> Vec<u32> {
        let p = permutation(rng, y.len());
        p.into_iter().map(|i| y[i]).collect()
    };
    let yt = permute(&yt, &mut rng);
    let yv = permute(&yv, &mut rng);
    let ys = permute(&ys, &mut rng);
    let chance = linear_probe(
        (&xt, &yt),
        (&xv, &yv),
        (&xs, &ys),
        4,
        &l2_grid(),
        ProbeMetric::Top1,
        "blobs-shuffled",
        3,
    )?
    .value;
    if (chance - 0.25).abs() > 0.03 {
        return Ok((false, format!("shuffled labels scored {chance:.4}, expected 0.25 +- 0.03")));
    }

    // Support reused as query is always right.
    let (x, y) = blobs(40, 5, 8, 12.0, 0.5, 127);
    let spec = EpisodeSpec { n_way: 4, k_shot: 3, query_per_class: 0, n_episodes: 50 };
    let fs = few_shot_eval(&x, &y, &spec, 9)?;
    if fs.mean_accuracy < 0.9999 {
        return Ok((false, format!("support-as-query scored {:.4}, expected 1.0", fs.mean_accuracy)));
    }

    // Rotation probe on rotation-invariant images sits at chance.
    let mut images = Vec::new();
    for i in 0..40 {
        let radius = 3.0 + (i % 5) as f64;
        let t = 0.3 + 0.1 * ((i / 5) % 7) as f32;
        images.push(disk_image(16, radius, [t, 1.0 - t, 0.5 + 0.05 * (i % 9) as f32]));
    }
    let train = Dataset {
        id: "disks".into(),
        images: images[..28].to_vec(),
        labels: vec![0; 28],
        class_count: 1,
    };
    let test = Dataset {
        id: "disks".into(),
        images: images[28..].to_vec(),
        labels: vec![0; 12],
        class_count: 1,
    };
    let mut rng = stream(128, "acc-rot-backbone", &[]);
    let backbone = BackboneSpec { widths: [4, 8, 8, 16], ..BackboneSpec::default() }
        .build::<f32>(&mut rng)?;
    let rot = rotation_probe(&backbone, &train, &test, 16, &l2_grid(), 3)?.value;
    let pass = (rot - 0.25).abs() <= 0.03;
    Ok((
        pass,
        format!(
            "blobs {perfect:.2}; shuffled {chance:.3}; support-as-query {:.2}; symmetric rotation {rot:.3}",
            fs.mean_accuracy
        ),
    ))
}

// ---------------------------------------------------------------------------
// Criterion 13: reproducibility of checkpoints, resumes, and CLI reports.

fn max_tensor_diff(a: &condssl::model::SslModel<f32>, b: &condssl::model::SslModel<f32>) -> f64 {
    let mut av: Vec<(String, Vec<f32>)> = Vec::new();
    a.tensors(&mut |n, d| av.push((n.to_string(), d.to_vec())));
    let mut worst = 0.0f64;
    let mut idx = 0;
    b.tensors(&mut |n, d| {
        let (an, ad) = &av[idx];
        assert_eq!(n, an, "tensor walk diverged");
        for (x, y) in d.iter().zip(ad.iter()) {
            worst = worst.max((x - y).abs() as f64);
        }
        idx += 1;
    });
    worst
}

fn tiny_spec(epochs: usize, checkpoint_every: usize) -> PretrainSpec {
    PretrainSpec {
        method: MethodConfig::defaults(Method::Simclr),
        conditioning: ConditioningSpec {
            mode: ConditioningMode::Concat,
            gamma_depth: 2,
            gamma_hidden: 8,
            gamma_out: 8,
            projector_depth: 2,
            projector_hidden: 32,
            projector_out: 16,
        },
        backbone: BackboneSpec { widths: [4, 8, 8, 16], ..BackboneSpec::default() },
        augment: AugmentationPolicy {
            out_size: 16,
            ..AugmentationPolicy::default()
        },
        train: TrainConfig {
            epochs,
            batch_size: 32,
            base_lr: 0.05,
            checkpoint_every,
            seed: 3,
            ..TrainConfig::default()
        },
    }
}

fn cli_config(dir: &Path) -> PathBuf {
    let body = format!(
        r#"out = "{out}"

[data]
id = "shapes"
root = ""
split = "train"
image_size = 16
count = 60

[backbone]
family = "small-conv"
widths = [4, 8, 8, 16]

[conditioning]
mode = "concat"
gamma_depth = 2
gamma_hidden = 8
gamma_out = 8
projector_depth = 2
projector_hidden = 32
projector_out = 16

[augment]
out_size = 16

[train]
epochs = 2
batch_size = 16
base_lr = 0.05
seed = 1
"#,
        out = dir.join("runs").display()
    );
    let path = dir.join("cfg.toml");
    std::fs::write(&path, body).unwrap();
    path
}

fn cli(args: &[&str], cache: &Path) -> Result<String, Box<dyn std::error::Error>> {
    let out = Command::new(env!("CARGO_BIN_EXE_condssl"))
        .args(args)
        .env("CONDSSL_CACHE", cache)
        .output()?;
    if !out.status.success() {
        return Err(format!(
            "cli {:?} failed: {}",
            args.first(),
            String::from_utf8_lossy(&out.stderr)
        )
        .into());
    }
    Ok(String::from_utf8_lossy(&out.stdout).to_string())
}

fn field(stdout: &str, key: &str) -> Result<String, Box<dyn std::error::Error>> {
    stdout
        .lines()
        .find_map(|l| l.strip_prefix(&format!("{key}: ")).map(str::to_string))
        .ok_or_else(|| format!("no `{key}:` line in cli output").into())
}

fn criterion_13() -> Crit {
    let dir = tempfile::tempdir()?;
    let mut train_ref = DatasetRef::new(DatasetId::Shapes, "", Split::Train);
    train_ref.image_size = Some(16);
    train_ref.count = Some(256);
    let ds = load_dataset(&train_ref)?;

    // (a) load/save round-trip is byte-identical.
    let full_dir = dir.path().join("full");
    let full = pretrain(&tiny_spec(4, 2), &ds, &full_dir, None)?;
    let (model, opt, meta) = checkpoint::load_checkpoint(&full.checkpoint_path)?;
    let copy = dir.path().join("copy.ckpt");
    checkpoint::save_checkpoint(&copy, &model, &opt, &meta)?;
    if std::fs::read(&full.checkpoint_path)? != std::fs::read(&copy)? {
        return Ok((false, "checkpoint round-trip changed bytes".into()));
    }

    // (b) resuming from the mid-run checkpoint matches training straight
    // through, within 1e-5 on every tensor.
    let resume_dir = dir.path().join("resume");
    std::fs::create_dir_all(&resume_dir)?;
    let mid = full_dir.join("ckpt-ep2.ckpt");
    let mid_copy = resume_dir.join("ckpt-ep2.ckpt");
    std::fs::copy(&mid, &mid_copy)?;
    let resumed = pretrain(&tiny_spec(4, 0), &ds, &resume_dir, Some(&mid_copy))?;
    let (resumed_model, _, _) = checkpoint::load_checkpoint(&resumed.checkpoint_path)?;
    let drift = max_tensor_diff(&model, &resumed_model);
    if drift > 1e-5 {
        return Ok((false, format!("resume drifted {drift:.2e} from the straight run")));
    }

    // (c) CLI reports are reproducible from the snapshot each run writes.
    let cache = dir.path().join("cache");
    let cfg = cli_config(dir.path());
    let cfg_s = cfg.to_str().unwrap();
    let out = cli(&["pretrain", "--config", cfg_s], &cache)?;
    let ckpt = field(&out, "checkpoint")?;

    let first = cli(
        &["eval", "--config", cfg_s, "--protocol", "linear", "--checkpoint", &ckpt],
        &cache,
    )?;
    let snapshot = PathBuf::from(field(&first, "run_dir")?).join("config.toml");
    let second = cli(
        &[
            "eval",
            "--config",
            snapshot.to_str().unwrap(),
            "--protocol",
            "linear",
            "--checkpoint",
            &ckpt,
        ],
        &cache,
    )?;
    if field(&first, "value")? != field(&second, "value")? {
        return Ok((false, "eval value changed when rerun from its snapshot".into()));
    }

    let a1 = cli(
        &["analyze", "--analysis", "variance", "--config", cfg_s, "--checkpoint", &ckpt],
        &cache,
    )?;
    let snap1 = PathBuf::from(field(&a1, "run_dir")?).join("config.toml");
    let a2 = cli(
        &[
            "analyze",
            "--analysis",
            "variance",
            "--config",
            snap1.to_str().unwrap(),
            "--checkpoint",
            &ckpt,
        ],
        &cache,
    )?;
    let v1: serde_json::Value =
        serde_json::from_slice(&std::fs::read(PathBuf::from(field(&a1, "report")?))?)?;
    let v2: serde_json::Value =
        serde_json::from_slice(&std::fs::read(PathBuf::from(field(&a2, "report")?))?)?;
    if v1 != v2 {
        return Ok((false, "variance report changed when rerun from its snapshot".into()));
    }

    Ok((
        true,
        format!("round-trip byte-exact; resume drift {drift:.1e} (bound 1e-5); CLI reports reproduce"),
    ))
}

// ---------------------------------------------------------------------------
// Harness.

#[test]
fn acceptance() {
    let mut farm = RunFarm::new();
    let mut results: Vec<(usize, bool, String)> = Vec::new();

    let mut record = |n: usize, out: std::thread::Result<Crit>, results: &mut Vec<_>| {
        let (pass, detail) = match out {
            Ok(Ok((pass, detail))) => (pass, detail),
            Ok(Err(e)) => (false, format!("error: {e}")),
            Err(panic) => {
                let msg = panic
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_else(|| "panicked".to_string());
                (false, format!("panic: {msg}"))
            }
        };
        let status = if pass { "PASS" } else { "FAIL" };
        println!("criterion {n}: {status} - {detail}");
        results.push((n, pass, detail));
    };

    record(1, catch_unwind(AssertUnwindSafe(criterion_1)), &mut results);
    record(2, catch_unwind(AssertUnwindSafe(criterion_2)), &mut results);
    record(3, catch_unwind(AssertUnwindSafe(criterion_3)), &mut results);
    record(4, catch_unwind(AssertUnwindSafe(criterion_4)), &mut results);
    record(5, catch_unwind(AssertUnwindSafe(criterion_5)), &mut results);
    record(6, catch_unwind(AssertUnwindSafe(criterion_6)), &mut results);
    record(7, catch_unwind(AssertUnwindSafe(|| criterion_7(&mut farm))), &mut results);
    record(8, catch_unwind(AssertUnwindSafe(|| criterion_8(&mut farm))), &mut results);
    record(9, catch_unwind(AssertUnwindSafe(|| criterion_9(&mut farm))), &mut results);
    record(10, catch_unwind(AssertUnwindSafe(|| criterion_10(&mut farm))), &mut results);
    record(11, catch_unwind(AssertUnwindSafe(criterion_11)), &mut results);
    record(12, catch_unwind(AssertUnwindSafe(criterion_12)), &mut results);
    record(13, catch_unwind(AssertUnwindSafe(criterion_13)), &mut results);

    let failed: Vec<String> = results
        .iter()
        .filter(|(_, pass, _)| !pass)
        .map(|(n, _, d)| format!("criterion {n}: {d}"))
        .collect();
    assert!(failed.is_empty(), "{} criteria failed:\n{}", failed.len(), failed.join("\n"));
}

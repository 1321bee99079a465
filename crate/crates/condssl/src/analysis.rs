//! Representation diagnostics: conditioning dependency, per-stage
//! augmentation sensitivity, eigenspectrum decay, explained variance, and
//! cosine retrieval. Everything here is pure over frozen models and
//! embedding matrices; reports carry their raw curves so plots can be
//! re-rendered without recomputation.

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::augpipe::{self, AugmentationPolicy};
use crate::datahub::Dataset;
use crate::error::{Error, Result};
use crate::evalsuite::preprocess;
use crate::image::Image;
use crate::model::{extract_features, Encoder, FeatureTag};
use crate::nn::{StageTap, Tensor4};
use crate::rng;

// ---------------------------------------------------------------------------
// Conditioning dependency.

/// Outcome of the true-vs-swapped ω comparison. Ties (possible only when the
/// conditioning pathway is inert) count half toward `frac_true_gt_random`,
/// so a dead pathway reads exactly 0.5.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConditioningReport {
    pub mean_sim_true: f64,
    pub mean_sim_random: f64,
    pub frac_true_gt_random: f64,
    pub n_pairs: usize,
    /// One-sided paired-test p-value for E[sim_true − sim_random] > 0,
    /// normal-approximated (n is large by contract).
    pub p_value: f64,
    /// Raw per-pair similarities; binning is the plotter's choice.
    pub sims_true: Vec<f64>,
    pub sims_random: Vec<f64>,
}

fn cos_rows(a: &Array2<f32>, b: &Array2<f32>) -> Vec<f64> {
    a.rows()
        .into_iter()
        .zip(b.rows())
        .map(|(x, y)| {
            let (mut dot, mut nx, mut ny) = (0.0f64, 0.0f64, 0.0f64);
            for (p, q) in x.iter().zip(y.iter()) {
                dot += *p as f64 * *q as f64;
                nx += (*p as f64).powi(2);
                ny += (*q as f64).powi(2);
            }
            dot / (nx.sqrt() * ny.sqrt()).max(1e-300)
        })
        .collect()
}

/// Abramowitz–Stegun 7.1.26 rational approximation, |error| < 1.5e-7.
fn erf(x: f64) -> f64 {
    let sign = if x < 0.0 { -1.0 } else { 1.0 };
    let x = x.abs();
    let t = 1.0 / (1.0 + 0.3275911 * x);
    let y = 1.0
        - (((((1.061405429 * t - 1.453152027) * t) + 1.421413741) * t - 0.284496736) * t
            + 0.254829592)
            * t
            * (-x * x).exp();
    sign * y
}

fn normal_sf(z: f64) -> f64 {
    0.5 * (1.0 - erf(z / std::f64::consts::SQRT_2))
}

/// Compares projector outputs under each view's true ω against a swap with
/// another batch member's ω. Views are drawn from the policy; embeddings use
/// the frozen eval-mode towers.
pub fn conditioning_dependency(
    encoder: &Encoder<f32>,
    policy: &AugmentationPolicy,
    images: &[Image],
    n_pairs: usize,
    seed: u64,
) -> Result<ConditioningReport> {
    if encoder.projector.spec.mode == crate::condproj::ConditioningMode::None {
        return Err(Error::config(
            "conditioning dependency is undefined for an unconditioned projector",
        ));
    }
    if n_pairs == 0 || images.is_empty() {
        return Err(Error::data("need at least one pair and one image"));
    }
    let batch = n_pairs.min(128).max(2);
    let mut sims_true = Vec::with_capacity(n_pairs);
    let mut sims_random = Vec::with_capacity(n_pairs);
    let mut produced = 0;
    while produced < n_pairs {
        let b = batch.min(n_pairs - produced).max(2);
        let mut v1 = Vec::with_capacity(b);
        let mut v2 = Vec::with_capacity(b);
        let mut om1 = Array2::zeros((b, augpipe::OMEGA_DIM));
        let mut om2 = Array2::zeros((b, augpipe::OMEGA_DIM));
        for i in 0..b {
            let p = produced + i;
            let mut r = rng::stream(seed, "cond-dep", &[p as u64]);
            let img = &images[p % images.len()];
            let ((a, ra), (c, rc)) = augpipe::make_view_pair(img, policy, &mut r)?;
            let oa = augpipe::encode_omega(&ra, policy).as_f32();
            let oc = augpipe::encode_omega(&rc, policy).as_f32();
            for d in 0..augpipe::OMEGA_DIM {
                om1[[i, d]] = oa[d];
                om2[[i, d]] = oc[d];
            }
            v1.push(a);
            v2.push(c);
        }
        // ω₃ for row i is row i+1's second-view record: another randomly
        // drawn sample from the same mini-batch.
        let mut om3 = Array2::zeros((b, augpipe::OMEGA_DIM));
        for i in 0..b {
            om3.row_mut(i).assign(&om2.row((i + 1) % b));
        }
        let x1 = Tensor4::from_images(&v1);
        let x2 = Tensor4::from_images(&v2);
        let z1 = encoder.project_eval(&x1, &om1)?;
        let z2_true = encoder.project_eval(&x2, &om2)?;
        let z2_rand = encoder.project_eval(&x2, &om3)?;
        sims_true.extend(cos_rows(&z1, &z2_true));
        sims_random.extend(cos_rows(&z1, &z2_rand));
        produced += b;
    }

    let n = sims_true.len() as f64;
    let mean_sim_true = sims_true.iter().sum::<f64>() / n;
    let mean_sim_random = sims_random.iter().sum::<f64>() / n;
    let (mut wins, mut ties) = (0.0f64, 0.0f64);
    for (t, r) in sims_true.iter().zip(&sims_random) {
        if t > r {
            wins += 1.0;
        } else if t == r {
            ties += 1.0;
        }
    }
    let frac = (wins + 0.5 * ties) / n;
    let diffs: Vec<f64> = sims_true.iter().zip(&sims_random).map(|(t, r)| t - r).collect();
    let dm = diffs.iter().sum::<f64>() / n;
    let sd = if diffs.len() > 1 {
        (diffs.iter().map(|d| (d - dm) * (d - dm)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    let p_value = if sd == 0.0 { 0.5 } else { normal_sf(dm / (sd / n.sqrt())) };
    Ok(ConditioningReport {
        mean_sim_true,
        mean_sim_random,
        frac_true_gt_random: frac,
        n_pairs: sims_true.len(),
        p_value,
        sims_true,
        sims_random,
    })
}

/// Checkpoint-file entry point; pairs are drawn from the dataset under the
/// checkpoint's own augmentation policy.
pub fn conditioning_dependency_from_checkpoint(
    ckpt: &std::path::Path,
    ds: &Dataset,
    n_pairs: usize,
    seed: u64,
) -> Result<ConditioningReport> {
    let (model, _, meta) = crate::checkpoint::load_checkpoint(ckpt)?;
    conditioning_dependency(&model.online, &meta.augment, &ds.images, n_pairs, seed)
}

// ---------------------------------------------------------------------------
// Per-stage augmentation sensitivity.

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AugKind {
    Crop,
    Jitter,
    Blur,
    Flip,
    Grayscale,
    All,
}

impl AugKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AugKind::Crop => "crop",
            AugKind::Jitter => "jitter",
            AugKind::Blur => "blur",
            AugKind::Flip => "flip",
            AugKind::Grayscale => "grayscale",
            AugKind::All => "all",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "crop" => AugKind::Crop,
            "jitter" => AugKind::Jitter,
            "blur" => AugKind::Blur,
            "flip" => AugKind::Flip,
            "grayscale" => AugKind::Grayscale,
            "all" => AugKind::All,
            other => return Err(Error::config(format!("unknown augmentation kind: {other}"))),
        })
    }

    /// Single-transform policy: the chosen transform fires with probability
    /// one at the full policy's strength; everything else stays identity.
    pub fn restricted_policy(self, full: &AugmentationPolicy) -> AugmentationPolicy {
        let mut p = AugmentationPolicy::identity(full.out_size);
        match self {
            AugKind::Crop => p.crop_scale = full.crop_scale,
            AugKind::Jitter => {
                p.jitter_prob = 1.0;
                p.jitter_max = full.jitter_max;
            }
            AugKind::Blur => {
                p.blur_prob = 1.0;
                p.blur_sigma = full.blur_sigma;
            }
            AugKind::Flip => p.flip_prob = 1.0,
            AugKind::Grayscale => p.grayscale_prob = 1.0,
            AugKind::All => p = full.clone(),
        }
        p
    }
}

/// InfoNCE per representation stage for one augmentation kind.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SensitivityProfile {
    pub augmentation: AugKind,
    pub tau: f64,
    pub batch_size: usize,
    /// (stage, InfoNCE); the projector entry conditions on each view's own ω.
    pub values: Vec<(FeatureTag, f64)>,
}

/// InfoNCE over a batch similarity matrix: rows are L2-normalized, positives
/// sit on the diagonal, everything else in the batch is a negative.
pub fn infonce_from_pairs(a: &Array2<f64>, b: &Array2<f64>, tau: f64) -> Result<f64> {
    let n = a.nrows();
    if n < 2 {
        return Err(Error::data("similarity-matrix InfoNCE needs at least 2 pairs"));
    }
    if a.dim() != b.dim() {
        return Err(Error::shape(format!("pair shapes {:?} vs {:?}", a.dim(), b.dim())));
    }
    if !(tau > 0.0) {
        return Err(Error::config("temperature must be positive"));
    }
    let normalize = |m: &Array2<f64>| -> Result<Array2<f64>> {
        let mut out = m.clone();
        for mut row in out.rows_mut() {
            let norm = row.dot(&row).sqrt();
            if norm <= 1e-12 {
                return Err(Error::numeric("zero-norm embedding row"));
            }
            row /= norm;
        }
        Ok(out)
    };
    let an = normalize(a)?;
    let bn = normalize(b)?;
    let s = an.dot(&bn.t());
    let mut loss = 0.0;
    for i in 0..n {
        let row = s.row(i);
        let m = row.iter().fold(f64::NEG_INFINITY, |acc, &v| acc.max(v / tau));
        let z: f64 = row.iter().map(|&v| (v / tau - m).exp()).sum();
        loss += z.ln() + m - s[[i, i]] / tau;
    }
    Ok(loss / n as f64)
}

/// Builds (center-cropped original, single-augmentation view) pairs and
/// reports InfoNCE at the four backbone stages and the projector.
pub fn stagewise_infonce(
    encoder: &Encoder<f32>,
    policy: &AugmentationPolicy,
    images: &[Image],
    aug: AugKind,
    batch_size: usize,
    tau: f64,
    seed: u64,
) -> Result<SensitivityProfile> {
    if batch_size < 2 {
        return Err(Error::config("sensitivity batches need at least 2 images"));
    }
    if images.len() < batch_size {
        return Err(Error::data(format!(
            "{} images cannot fill a batch of {batch_size}",
            images.len()
        )));
    }
    let restricted = aug.restricted_policy(policy);
    let identity = AugmentationPolicy::identity(policy.out_size);

    // A deterministic seeded subset keeps the batch diverse.
    let mut r = rng::stream(seed, "sens-subset", &[]);
    let perm = rng::permutation(&mut r, images.len());
    let subset: Vec<&Image> = perm.iter().take(batch_size).map(|&i| &images[i]).collect();

    let mut originals = Vec::with_capacity(batch_size);
    let mut views = Vec::with_capacity(batch_size);
    let mut om_orig = Array2::zeros((batch_size, augpipe::OMEGA_DIM));
    let mut om_view = Array2::zeros((batch_size, augpipe::OMEGA_DIM));
    for (i, img) in subset.iter().enumerate() {
        let pre = preprocess(&[(*img).clone()], policy.out_size, true)?;
        // The original's record is the identity policy's deterministic draw,
        // so its ω encodes "no transform applied".
        let mut ri = rng::stream(seed, "sens-orig", &[i as u64]);
        let rec_o = augpipe::sample_record(&identity, &mut ri, (pre[0].height(), pre[0].width()))?;
        let oo = augpipe::encode_omega(&rec_o, &identity).as_f32();

        let mut rv = rng::stream(seed, "sens-view", &[i as u64]);
        let mut rec_v = augpipe::sample_record(&restricted, &mut rv, (img.height(), img.width()))?;
        let view = augpipe::apply_record(img, &mut rec_v, &restricted)?;
        let ov = augpipe::encode_omega(&rec_v, &restricted).as_f32();

        for d in 0..augpipe::OMEGA_DIM {
            om_orig[[i, d]] = oo[d];
            om_view[[i, d]] = ov[d];
        }
        originals.push(pre.into_iter().next().expect("one image in, one out"));
        views.push(view);
    }

    let mut values = Vec::with_capacity(5);
    for tap in [StageTap::Stage1, StageTap::Stage2, StageTap::Stage3, StageTap::Stage4] {
        let fa = extract_features(&encoder.backbone, &originals, tap)?.matrix.mapv(|v| v as f64);
        let fb = extract_features(&encoder.backbone, &views, tap)?.matrix.mapv(|v| v as f64);
        values.push((tap.into(), infonce_from_pairs(&fa, &fb, tau)?));
    }
    let xa = Tensor4::from_images(&originals);
    let xb = Tensor4::from_images(&views);
    let za = encoder.project_eval(&xa, &om_orig)?.mapv(|v| v as f64);
    let zb = encoder.project_eval(&xb, &om_view)?.mapv(|v| v as f64);
    values.push((FeatureTag::Projector, infonce_from_pairs(&za, &zb, tau)?));

    Ok(SensitivityProfile { augmentation: aug, tau, batch_size, values })
}

/// Checkpoint-file entry point for one augmentation kind.
pub fn stagewise_from_checkpoint(
    ckpt: &std::path::Path,
    ds: &Dataset,
    aug: AugKind,
    batch_size: usize,
    tau: f64,
    seed: u64,
) -> Result<SensitivityProfile> {
    let (model, _, meta) = crate::checkpoint::load_checkpoint(ckpt)?;
    stagewise_infonce(&model.online, &meta.augment, &ds.images, aug, batch_size, tau, seed)
}

// ---------------------------------------------------------------------------
// Eigenspectrum decay and explained variance.

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpectrumFit {
    pub alpha: f64,
    /// 1-based eigenvalue index interval the power law was fit over.
    pub fit_range: (usize, usize),
    pub r2_of_fit: f64,
    /// Descending covariance eigenvalues, kept for re-plotting.
    pub eigenvalues: Vec<f64>,
}

/// Descending eigenvalues of the covariance of centered `emb`.
fn covariance_eigenvalues(emb: &Array2<f64>) -> Result<Vec<f64>> {
    let (n, d) = emb.dim();
    if n < 2 || d < 2 {
        return Err(Error::data(format!("{n}x{d} embeddings cannot form a spectrum")));
    }
    if n < d {
        return Err(Error::data(format!(
            "need at least as many rows as dims for a full-rank covariance ({n} < {d})"
        )));
    }
    let mean = emb.mean_axis(Axis(0)).expect("nonempty");
    let c = emb - &mean;
    let cov = c.t().dot(&c) / (n as f64 - 1.0);
    let mut m = nalgebra::DMatrix::<f64>::zeros(d, d);
    for i in 0..d {
        for j in 0..d {
            m[(i, j)] = cov[[i, j]];
        }
    }
    let mut ev: Vec<f64> = m.symmetric_eigen().eigenvalues.iter().copied().collect();
    ev.sort_by(|a, b| b.partial_cmp(a).expect("symmetric eigenvalues are finite"));
    Ok(ev)
}

/// Fits log λ_i = −α·log i + c over `fit_range` (1-based, inclusive;
/// defaults to [10, d/2]). Eigenvalues in the range must be genuinely
/// positive; narrow the range explicitly to skip a rank-deficient tail.
pub fn eigenspectrum_alpha(
    emb: &Array2<f64>,
    fit_range: Option<(usize, usize)>,
) -> Result<SpectrumFit> {
    let ev = covariance_eigenvalues(emb)?;
    let d = ev.len();
    let (lo, hi) = fit_range.unwrap_or((10, d / 2));
    if lo < 1 || hi > d || hi < lo || hi - lo + 1 < 10 {
        return Err(Error::config(format!(
            "fit range [{lo}, {hi}] must cover at least 10 of the {d} eigenvalue indices"
        )));
    }
    let floor = ev[0].abs().max(1e-300) * 1e-12;
    if let Some(i) = (lo..=hi).find(|&i| ev[i - 1] <= floor) {
        return Err(Error::numeric(format!(
            "eigenvalue {i} is numerically zero; the covariance is rank-deficient over \
             [{lo}, {hi}] (pass a narrower fit range)"
        )));
    }
    let xs: Vec<f64> = (lo..=hi).map(|i| (i as f64).ln()).collect();
    let ys: Vec<f64> = (lo..=hi).map(|i| ev[i - 1].ln()).collect();
    let n = xs.len() as f64;
    let xm = xs.iter().sum::<f64>() / n;
    let ym = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - xm) * (y - ym)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - xm) * (x - xm)).sum();
    let slope = sxy / sxx;
    let syy: f64 = ys.iter().map(|y| (y - ym) * (y - ym)).sum();
    let r2 = if syy == 0.0 { 1.0 } else { (sxy * sxy) / (sxx * syy) };
    Ok(SpectrumFit { alpha: -slope, fit_range: (lo, hi), r2_of_fit: r2, eigenvalues: ev })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VarianceCurve {
    /// cumulative[k] = variance fraction explained by the top k+1 components.
    pub cumulative: Vec<f64>,
    pub components_for_90pct: usize,
    pub eigenvalues: Vec<f64>,
}

/// PCA cumulative explained-variance curve on centered embeddings.
pub fn explained_variance(emb: &Array2<f64>) -> Result<VarianceCurve> {
    let ev = covariance_eigenvalues(emb)?;
    // Clamp the tiny negative noise symmetric eigensolvers leave on zero
    // eigenvalues so the curve stays monotone.
    let ev: Vec<f64> = ev.into_iter().map(|v| v.max(0.0)).collect();
    let total: f64 = ev.iter().sum();
    if total <= 0.0 {
        return Err(Error::numeric("embeddings have zero variance"));
    }
    let mut acc = 0.0;
    let mut cumulative = Vec::with_capacity(ev.len());
    for &v in &ev {
        acc += v;
        cumulative.push(acc / total);
    }
    // The last entry is exactly 1 by construction (acc == total).
    let components_for_90pct = cumulative
        .iter()
        .position(|&c| c >= 0.9)
        .map(|i| i + 1)
        .expect("curve reaches 1.0");
    Ok(VarianceCurve { cumulative, components_for_90pct, eigenvalues: ev })
}

// ---------------------------------------------------------------------------
// Cosine retrieval.

/// Indices of the `k` gallery rows most cosine-similar to `query`,
/// descending; exact ties resolve to the lower index.
pub fn retrieve(query: &Array1<f64>, gallery: &Array2<f64>, k: usize) -> Result<Vec<usize>> {
    if gallery.nrows() == 0 {
        return Err(Error::data("empty gallery"));
    }
    if gallery.ncols() != query.len() {
        return Err(Error::shape(format!(
            "query dim {} vs gallery dim {}",
            query.len(),
            gallery.ncols()
        )));
    }
    if k == 0 || k > gallery.nrows() {
        return Err(Error::config(format!(
            "k = {k} outside 1..={} gallery rows",
            gallery.nrows()
        )));
    }
    let qn = query.dot(query).sqrt().max(1e-300);
    let mut sims: Vec<(f64, usize)> = gallery
        .rows()
        .into_iter()
        .enumerate()
        .map(|(i, row)| {
            let rn = row.dot(&row).sqrt().max(1e-300);
            (query.dot(&row) / (qn * rn), i)
        })
        .collect();
    if let Some((s, i)) = sims.iter().find(|(s, _)| !s.is_finite()) {
        return Err(Error::numeric(format!("non-finite similarity {s} at gallery row {i}")));
    }
    // Stable: descending similarity, ascending index on ties.
    sims.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("finite").then(a.1.cmp(&b.1)));
    Ok(sims.into_iter().take(k).map(|(_, i)| i).collect())
}

/// Serializes any analysis report as pretty JSON.
pub fn write_json<T: Serialize>(path: &std::path::Path, report: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_vec_pretty(report)?)?;
    Ok(())
}

//! Downstream evaluation of frozen representations: linear probe, few-shot
//! episodes, rotation prediction, and a ridge-regression variant. Probes see
//! only embeddings; nothing here mutates a model, which the probe-isolation
//! property test pins down.

use std::path::Path;

use ndarray::{concatenate, Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::augpipe::OMEGA_LAYOUT_VERSION;
use crate::checkpoint;
use crate::datahub::{self, CacheManifest, Dataset};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::lbfgs::{self, LbfgsParams};
use crate::model::extract_features;
use crate::nn::{Backbone, StageTap};
use crate::rng;

/// Solver budget for every probe fit.
pub const PROBE_MAX_ITERS: usize = 5000;
/// Fixed regularization inside few-shot episodes, where no grid search runs.
pub const EPISODE_L2: f64 = 1e-4;

/// 45 log-spaced regularization weights covering `[1e-6, 1e5]`.
pub fn l2_grid() -> Vec<f64> {
    (0..45).map(|i| 10f64.powf(-6.0 + 11.0 * i as f64 / 44.0)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProbeMetric {
    Top1,
    MeanPerClass,
    R2,
}

impl ProbeMetric {
    pub fn as_str(self) -> &'static str {
        match self {
            ProbeMetric::Top1 => "top1",
            ProbeMetric::MeanPerClass => "mean-per-class",
            ProbeMetric::R2 => "r2",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub dataset: String,
    pub metric: ProbeMetric,
    pub value: f64,
    pub chosen_l2: f64,
    pub seed: u64,
}

// ---------------------------------------------------------------------------
// Multinomial logistic regression on frozen features.

/// Sum cross-entropy plus (λ/2)||W||²; the bias row is never regularized.
/// Parameter layout: d·k weights then k biases.
fn logistic_objective<'a>(
    x: &'a Array2<f64>,
    y: &'a [u32],
    k: usize,
    lambda: f64,
) -> impl FnMut(&Array1<f64>, &mut Array1<f64>) -> f64 + 'a {
    let d = x.ncols();
    move |theta, grad| {
        let w = theta.slice(ndarray::s![..d * k]).to_shape((d, k)).expect("layout").to_owned();
        let b = theta.slice(ndarray::s![d * k..]);
        let mut scores = x.dot(&w);
        for mut row in scores.rows_mut() {
            row += &b;
        }
        let mut loss = 0.0;
        // In place, scores become softmax probabilities minus the one-hot
        // targets, which is exactly dLoss/dScores.
        for (i, mut row) in scores.rows_mut().into_iter().enumerate() {
            let m = row.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v));
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            // row currently holds exp(s − m), so s_yi − m = ln(row[yi]) and
            // the per-example loss ln Σexp(s−m) − (s_yi − m) telescopes.
            loss += z.ln() - row[y[i] as usize].ln();
            row /= z;
            row[y[i] as usize] -= 1.0;
        }
        let gw = x.t().dot(&scores) + &(lambda * &w);
        let gb = scores.sum_axis(Axis(0));
        for (gi, v) in grad.iter_mut().zip(gw.iter().chain(gb.iter())) {
            *gi = *v;
        }
        loss + 0.5 * lambda * w.iter().map(|v| v * v).sum::<f64>()
    }
}

fn fit_logistic(
    x: &Array2<f64>,
    y: &[u32],
    k: usize,
    lambda: f64,
    init: Option<&Array1<f64>>,
    max_iters: usize,
) -> Array1<f64> {
    let d = x.ncols();
    let x0 = match init {
        Some(t) => t.clone(),
        None => Array1::zeros(d * k + k),
    };
    let params = LbfgsParams { max_iters, ..Default::default() };
    lbfgs::minimize(logistic_objective(x, y, k, lambda), x0, &params).x
}

/// Argmax class per row; ties go to the lowest index so predictions are
/// deterministic even on degenerate features.
fn predict(theta: &Array1<f64>, x: &Array2<f64>, k: usize) -> Vec<u32> {
    let d = x.ncols();
    let w = theta.slice(ndarray::s![..d * k]).to_shape((d, k)).expect("layout").to_owned();
    let b = theta.slice(ndarray::s![d * k..]);
    let scores = x.dot(&w);
    scores
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0usize;
            let mut best_v = row[0] + b[0];
            for j in 1..k {
                let v = row[j] + b[j];
                if v > best_v {
                    best_v = v;
                    best = j;
                }
            }
            best as u32
        })
        .collect()
}

fn top1(pred: &[u32], y: &[u32]) -> f64 {
    let hits = pred.iter().zip(y).filter(|(p, t)| p == t).count();
    hits as f64 / y.len() as f64
}

fn mean_per_class(pred: &[u32], y: &[u32], k: usize) -> f64 {
    let mut hit = vec![0usize; k];
    let mut count = vec![0usize; k];
    for (p, t) in pred.iter().zip(y) {
        count[*t as usize] += 1;
        if p == t {
            hit[*t as usize] += 1;
        }
    }
    let present: Vec<f64> = (0..k)
        .filter(|&c| count[c] > 0)
        .map(|c| hit[c] as f64 / count[c] as f64)
        .collect();
    present.iter().sum::<f64>() / present.len() as f64
}

fn classification_metric(metric: ProbeMetric, pred: &[u32], y: &[u32], k: usize) -> f64 {
    match metric {
        ProbeMetric::Top1 => top1(pred, y),
        ProbeMetric::MeanPerClass => mean_per_class(pred, y, k),
        ProbeMetric::R2 => unreachable!("regression metric on a classifier"),
    }
}

/// One labeled embedding matrix.
pub type Labeled<'a> = (&'a Array2<f64>, &'a [u32]);

fn check_labeled(name: &str, (x, y): Labeled, d: usize, k: usize) -> Result<()> {
    if x.nrows() != y.len() {
        return Err(Error::shape(format!("{name}: {} rows vs {} labels", x.nrows(), y.len())));
    }
    if x.ncols() != d {
        return Err(Error::shape(format!("{name}: dim {} vs expected {d}", x.ncols())));
    }
    if let Some(&l) = y.iter().find(|&&l| l as usize >= k) {
        return Err(Error::data(format!("{name}: label {l} out of range for {k} classes")));
    }
    Ok(())
}

/// Grid-searched multinomial logistic probe: fit per grid value on train,
/// select on validation (ties to the smaller weight), refit on train+val
/// warm-started from the winner, report the test metric.
pub fn linear_probe(
    train: Labeled,
    val: Labeled,
    test: Labeled,
    class_count: usize,
    grid: &[f64],
    metric: ProbeMetric,
    dataset: &str,
    seed: u64,
) -> Result<ProbeResult> {
    if grid.is_empty() {
        return Err(Error::config("empty regularization grid"));
    }
    if metric == ProbeMetric::R2 {
        return Err(Error::config("r2 is the ridge probe's metric"));
    }
    let d = train.0.ncols();
    check_labeled("train", train, d, class_count)?;
    check_labeled("val", val, d, class_count)?;
    check_labeled("test", test, d, class_count)?;
    let mut seen = vec![false; class_count];
    for &l in train.1 {
        seen[l as usize] = true;
    }
    if seen.iter().filter(|&&s| s).count() < 2 {
        return Err(Error::data("training set holds a single class"));
    }

    let mut best: Option<(f64, f64, Array1<f64>)> = None;
    for &lambda in grid {
        let theta = fit_logistic(train.0, train.1, class_count, lambda, None, PROBE_MAX_ITERS);
        let score = classification_metric(metric, &predict(&theta, val.0, class_count), val.1, class_count);
        if best.as_ref().is_none_or(|(s, _, _)| score > *s) {
            best = Some((score, lambda, theta));
        }
    }
    let (_, chosen_l2, warm) = best.expect("nonempty grid");

    let xw = concatenate(Axis(0), &[train.0.view(), val.0.view()]).expect("equal dims");
    let yw: Vec<u32> = train.1.iter().chain(val.1).copied().collect();
    let theta = fit_logistic(&xw, &yw, class_count, chosen_l2, Some(&warm), PROBE_MAX_ITERS);
    let value = classification_metric(metric, &predict(&theta, test.0, class_count), test.1, class_count);
    Ok(ProbeResult { dataset: dataset.to_string(), metric, value, chosen_l2, seed })
}

// ---------------------------------------------------------------------------
// Ridge regression probe (R² metric), same grid protocol.

fn ridge_fit(x: &Array2<f64>, y: &[f64], lambda: f64) -> (Array1<f64>, f64, Array1<f64>) {
    let (n, d) = x.dim();
    let xm = x.mean_axis(Axis(0)).expect("nonempty");
    let ym = y.iter().sum::<f64>() / n as f64;
    let xc = x - &xm;
    let yc: Array1<f64> = Array1::from_iter(y.iter().map(|v| v - ym));
    let mut a = nalgebra::DMatrix::<f64>::zeros(d, d);
    let g = xc.t().dot(&xc);
    for i in 0..d {
        for j in 0..d {
            a[(i, j)] = g[[i, j]] + if i == j { lambda } else { 0.0 };
        }
    }
    let rhs_nd = xc.t().dot(&yc);
    let rhs = nalgebra::DVector::from_iterator(d, rhs_nd.iter().copied());
    let w = a
        .clone()
        .cholesky()
        .map(|c| c.solve(&rhs))
        .unwrap_or_else(|| a.lu().solve(&rhs).expect("ridge system is full rank for λ>0"));
    let w = Array1::from_iter(w.iter().copied());
    let intercept = ym - xm.dot(&w);
    (w, intercept, xm)
}

fn r2(x: &Array2<f64>, y: &[f64], w: &Array1<f64>, intercept: f64) -> f64 {
    let n = y.len() as f64;
    let ym = y.iter().sum::<f64>() / n;
    let mut ss_res = 0.0;
    let mut ss_tot = 0.0;
    for (row, &t) in x.rows().into_iter().zip(y) {
        let p = row.dot(w) + intercept;
        ss_res += (t - p) * (t - p);
        ss_tot += (t - ym) * (t - ym);
    }
    1.0 - ss_res / ss_tot
}

/// Ridge probe over the same grid; selection on validation R², refit on
/// train+val, test R² reported.
pub fn ridge_probe(
    train: (&Array2<f64>, &[f64]),
    val: (&Array2<f64>, &[f64]),
    test: (&Array2<f64>, &[f64]),
    grid: &[f64],
    dataset: &str,
    seed: u64,
) -> Result<ProbeResult> {
    if grid.is_empty() {
        return Err(Error::config("empty regularization grid"));
    }
    let mut best: Option<(f64, f64)> = None;
    for &lambda in grid {
        let (w, b, _) = ridge_fit(train.0, train.1, lambda);
        let score = r2(val.0, val.1, &w, b);
        if best.is_none_or(|(s, _)| score > s) {
            best = Some((score, lambda));
        }
    }
    let (_, chosen_l2) = best.expect("nonempty grid");
    let xw = concatenate(Axis(0), &[train.0.view(), val.0.view()]).expect("equal dims");
    let yw: Vec<f64> = train.1.iter().chain(val.1).copied().collect();
    let (w, b, _) = ridge_fit(&xw, &yw, chosen_l2);
    Ok(ProbeResult {
        dataset: dataset.to_string(),
        metric: ProbeMetric::R2,
        value: r2(test.0, test.1, &w, b),
        chosen_l2,
        seed,
    })
}

// ---------------------------------------------------------------------------
// Few-shot episodes.

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EpisodeSpec {
    pub n_way: usize,
    pub k_shot: usize,
    /// 0 reuses the support set as the query set (degenerate but legal).
    pub query_per_class: usize,
    pub n_episodes: usize,
}

impl Default for EpisodeSpec {
    fn default() -> Self {
        EpisodeSpec { n_way: 5, k_shot: 5, query_per_class: 15, n_episodes: 2000 }
    }
}

impl EpisodeSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_way < 2 || self.k_shot == 0 || self.n_episodes == 0 {
            return Err(Error::config("episodes need n_way >= 2, k_shot >= 1, n_episodes >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FewShotResult {
    pub mean_accuracy: f64,
    /// Half-width of the 95% confidence interval over episodes.
    pub ci95: f64,
    pub episodes: usize,
}

/// N-way K-shot evaluation: each episode draws disjoint support/query sets,
/// fits a logistic model on the support embeddings, scores the query set.
pub fn few_shot_eval(
    x: &Array2<f64>,
    y: &[u32],
    spec: &EpisodeSpec,
    seed: u64,
) -> Result<FewShotResult> {
    spec.validate()?;
    if x.nrows() != y.len() {
        return Err(Error::shape(format!("{} rows vs {} labels", x.nrows(), y.len())));
    }
    let max_class = y.iter().max().copied().unwrap_or(0) as usize;
    let mut buckets: Vec<Vec<usize>> = vec![Vec::new(); max_class + 1];
    for (i, &l) in y.iter().enumerate() {
        buckets[l as usize].push(i);
    }
    let need = spec.k_shot + spec.query_per_class;
    let eligible: Vec<usize> = (0..buckets.len()).filter(|&c| buckets[c].len() >= need).collect();
    if eligible.len() < spec.n_way {
        return Err(Error::data(format!(
            "only {} classes have {need}+ samples; {}-way episodes need {}",
            eligible.len(),
            spec.n_way,
            spec.n_way
        )));
    }

    let d = x.ncols();
    let mut accs = Vec::with_capacity(spec.n_episodes);
    for e in 0..spec.n_episodes {
        let mut r = rng::stream(seed, "episode", &[e as u64]);
        let class_perm = rng::permutation(&mut r, eligible.len());
        let mut sup_rows = Array2::zeros((spec.n_way * spec.k_shot, d));
        let mut sup_y = Vec::with_capacity(spec.n_way * spec.k_shot);
        let mut qry_idx: Vec<(usize, u32)> = Vec::new();
        for (way, &ci) in class_perm.iter().take(spec.n_way).enumerate() {
            let bucket = &buckets[eligible[ci]];
            let picks = rng::permutation(&mut r, bucket.len());
            for (j, &p) in picks.iter().take(spec.k_shot).enumerate() {
                sup_rows.row_mut(way * spec.k_shot + j).assign(&x.row(bucket[p]));
                sup_y.push(way as u32);
            }
            for &p in picks.iter().skip(spec.k_shot).take(spec.query_per_class) {
                qry_idx.push((bucket[p], way as u32));
            }
        }
        let theta = fit_logistic(&sup_rows, &sup_y, spec.n_way, EPISODE_L2, None, 1000);
        let acc = if spec.query_per_class == 0 {
            top1(&predict(&theta, &sup_rows, spec.n_way), &sup_y)
        } else {
            let mut q = Array2::zeros((qry_idx.len(), d));
            let mut qy = Vec::with_capacity(qry_idx.len());
            for (row, (i, l)) in qry_idx.iter().enumerate() {
                q.row_mut(row).assign(&x.row(*i));
                qy.push(*l);
            }
            top1(&predict(&theta, &q, spec.n_way), &qy)
        };
        accs.push(acc);
    }
    let n = accs.len() as f64;
    let mean = accs.iter().sum::<f64>() / n;
    let ci95 = if accs.len() > 1 {
        let var = accs.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / (n - 1.0);
        1.96 * (var / n).sqrt()
    } else {
        0.0
    };
    Ok(FewShotResult { mean_accuracy: mean, ci95, episodes: accs.len() })
}

// ---------------------------------------------------------------------------
// Embedding extraction with on-disk caching.

/// Center-crops (optionally) and resizes to the side length the extractor
/// was trained on.
pub fn preprocess(images: &[Image], out_size: usize, center_crop: bool) -> Result<Vec<Image>> {
    images
        .iter()
        .map(|img| {
            let (h, w) = (img.height() as f64, img.width() as f64);
            if center_crop {
                let side = h.min(w);
                img.crop_resize((w - side) / 2.0, (h - side) / 2.0, side, side, out_size)
            } else {
                img.crop_resize(0.0, 0.0, w, h, out_size)
            }
        })
        .collect()
}

/// Frozen extractor-stage features for a batch of raw images.
pub fn embed_images(
    backbone: &Backbone<f32>,
    images: &[Image],
    out_size: usize,
    center_crop: bool,
) -> Result<Array2<f32>> {
    if out_size == 0 || out_size % 8 != 0 {
        return Err(Error::config(format!(
            "extractor input side {out_size} is incompatible (must be a positive multiple of 8)"
        )));
    }
    let pre = preprocess(images, out_size, center_crop)?;
    Ok(extract_features(backbone, &pre, StageTap::Extractor)?.matrix)
}

#[derive(Debug, Clone)]
pub struct EmbedRequest<'a> {
    pub checkpoint_hash: &'a str,
    pub split: &'a str,
    pub out_size: usize,
    pub center_crop: bool,
    pub cache_root: Option<&'a Path>,
}

/// Embeds a dataset, consulting the cache when a root is given. A hit must
/// match the checkpoint hash exactly; anything else recomputes and rewrites.
pub fn embed_dataset(
    backbone: &Backbone<f32>,
    ds: &Dataset,
    req: &EmbedRequest,
) -> Result<(Array2<f32>, Vec<u32>)> {
    let dims = backbone.spec.widths[3];
    let manifest = CacheManifest {
        checkpoint_hash: req.checkpoint_hash.to_string(),
        dataset_id: ds.id.replace('/', "-"),
        split: req.split.to_string(),
        rows: ds.len(),
        dims,
        omega_layout_version: OMEGA_LAYOUT_VERSION,
        created_at: 0,
    };
    if let Some(root) = req.cache_root {
        if let Some(hit) = datahub::cache_get(root, &manifest)? {
            return Ok((hit, ds.labels.clone()));
        }
    }
    let matrix = embed_images(backbone, &ds.images, req.out_size, req.center_crop)?;
    if let Some(root) = req.cache_root {
        let mut m = manifest;
        m.created_at = datahub::unix_now();
        datahub::cache_put(root, &m, &matrix)?;
    }
    Ok((matrix, ds.labels.clone()))
}

/// Checkpoint-file entry point: loads the frozen model, embeds under the
/// policy's view size, and keys the cache by the checkpoint's content hash.
pub fn embed_from_checkpoint(
    ckpt: &Path,
    ds: &Dataset,
    split: &str,
    center_crop: bool,
    cache_root: Option<&Path>,
) -> Result<(Array2<f32>, Vec<u32>, String)> {
    let (model, _, meta) = checkpoint::load_checkpoint(ckpt)?;
    let hash = checkpoint::file_sha256(ckpt)?;
    let req = EmbedRequest {
        checkpoint_hash: &hash,
        split,
        out_size: meta.augment.out_size,
        center_crop,
        cache_root,
    };
    let (x, y) = embed_dataset(&model.online.backbone, ds, &req)?;
    Ok((x, y, hash))
}

// ---------------------------------------------------------------------------
// Rotation-prediction probe.

/// Expands every image into its four 90° rotations labeled 0..3.
pub fn rotation_dataset(ds: &Dataset) -> Dataset {
    let mut images = Vec::with_capacity(ds.len() * 4);
    let mut labels = Vec::with_capacity(ds.len() * 4);
    for img in &ds.images {
        for k in 0..4u32 {
            images.push(img.rotate90(k as usize));
            labels.push(k);
        }
    }
    Dataset { id: format!("{}-rotations", ds.id), images, labels, class_count: 4 }
}

/// Linear probe on the 4-way rotation task: train/val split is stratified
/// 90/10 from the rotated train set; the rotated test set scores the result.
pub fn rotation_probe(
    backbone: &Backbone<f32>,
    train: &Dataset,
    test: &Dataset,
    out_size: usize,
    grid: &[f64],
    seed: u64,
) -> Result<ProbeResult> {
    let rot_train = rotation_dataset(train);
    let rot_test = rotation_dataset(test);
    let (tr, val) = datahub::split_dataset(&rot_train, (0.9, 0.1), seed)?;
    let embed = |d: &Dataset| -> Result<Array2<f64>> {
        Ok(embed_images(backbone, &d.images, out_size, true)?.mapv(|v| v as f64))
    };
    let (xt, xv, xs) = (embed(&tr)?, embed(&val)?, embed(&rot_test)?);
    let mut result = linear_probe(
        (&xt, &tr.labels),
        (&xv, &val.labels),
        (&xs, &rot_test.labels),
        4,
        grid,
        ProbeMetric::Top1,
        &rot_train.id,
        seed,
    )?;
    result.dataset = format!("{}-rotation-probe", train.id);
    Ok(result)
}

// ---------------------------------------------------------------------------
// Result files.

#[derive(Serialize)]
struct ProbeReport<'a> {
    dataset: &'a str,
    metric: &'a str,
    value: f64,
    chosen_l2: f64,
    seed: u64,
    checkpoint_hash: &'a str,
}

/// One JSON document per run.
pub fn write_probe_json(path: &Path, r: &ProbeResult, checkpoint_hash: &str) -> Result<()> {
    let report = ProbeReport {
        dataset: &r.dataset,
        metric: r.metric.as_str(),
        value: r.value,
        chosen_l2: r.chosen_l2,
        seed: r.seed,
        checkpoint_hash,
    };
    std::fs::write(path, serde_json::to_vec_pretty(&report)?)?;
    Ok(())
}

/// Appends to the aggregate results table, creating the header when new.
pub fn append_probe_csv(path: &Path, r: &ProbeResult, checkpoint_hash: &str) -> Result<()> {
    use std::io::Write as _;
    let new = !path.exists();
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    if new {
        writeln!(f, "dataset,metric,value,chosen_l2,seed,checkpoint_hash")?;
    }
    writeln!(
        f,
        "{},{},{},{},{},{}",
        r.dataset,
        r.metric.as_str(),
        r.value,
        r.chosen_l2,
        r.seed,
        checkpoint_hash
    )?;
    Ok(())
}

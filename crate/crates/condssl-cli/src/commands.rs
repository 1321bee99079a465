//! Command implementations. Every command materializes a per-run directory
//! named by timestamp and config hash, snapshots its resolved configuration
//! there, and prints machine-readable `key: value` lines on stdout.

use std::path::{Path, PathBuf};

use condssl::analysis::{self, AugKind};
use condssl::checkpoint::{self, load_checkpoint};
use condssl::datahub::{self, load_dataset, split_dataset, Dataset, DatasetRef, Split};
use condssl::evalsuite::{self, EpisodeSpec, ProbeMetric};
use condssl::plot::{line_plot, Series};
use condssl::trainer;
use ndarray::Array2;
use serde_json::json;

use crate::config::RunConfig;
use crate::CliError;

/// Environment variable naming the embedding-cache root; defaults to
/// `<out>/cache` next to the run directories.
pub const CACHE_ENV: &str = "CONDSSL_CACHE";

pub fn cache_root(out: &Path) -> PathBuf {
    std::env::var_os(CACHE_ENV).map(PathBuf::from).unwrap_or_else(|| out.join("cache"))
}

/// Creates `<out>/<timestamp>-<confighash>/`, suffixing on collision.
fn make_run_dir(out: &Path, hash: &str) -> Result<PathBuf, CliError> {
    std::fs::create_dir_all(out)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", out.display())))?;
    let stamp = chrono::Utc::now().format("%Y%m%d-%H%M%S");
    for attempt in 0..1000u32 {
        let name = if attempt == 0 {
            format!("{stamp}-{hash}")
        } else {
            format!("{stamp}-{hash}-{attempt}")
        };
        let dir = out.join(name);
        match std::fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => {
                return Err(CliError::Runtime(format!("cannot create {}: {e}", dir.display())))
            }
        }
    }
    Err(CliError::Runtime("exhausted run-directory names".into()))
}

/// Snapshots the resolved config and the invocation so the run can be
/// reproduced verbatim from its own directory.
fn snapshot(dir: &Path, cfg: &RunConfig, command: &str, params: serde_json::Value) -> Result<(), CliError> {
    std::fs::write(dir.join("config.toml"), cfg.snapshot_toml()?)
        .map_err(|e| CliError::Runtime(format!("cannot write config snapshot: {e}")))?;
    let inv = json!({ "command": command, "params": params });
    write_json(&dir.join("invocation.json"), &inv)?;
    Ok(())
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    analysis::write_json(path, value).map_err(CliError::from)
}

fn ref_with_split(cfg: &RunConfig, split: Split) -> DatasetRef {
    let mut r = cfg.data.clone();
    r.split = split;
    r
}

fn log_cache_state(root: &Path, ds: &Dataset, split: &str, hash: &str) {
    let p = root.join(ds.id.replace('/', "-")).join(split).join(format!("{hash}.json"));
    let state = if p.exists() { "hit" } else { "miss" };
    eprintln!("embedding cache {state}: {}", p.display());
}

// ---------------------------------------------------------------------------
// pretrain

pub fn cmd_pretrain(cfg: &RunConfig, resume: Option<&Path>) -> Result<(), CliError> {
    let run_dir = make_run_dir(&cfg.out, &cfg.short_hash()?)?;
    snapshot(
        &run_dir,
        cfg,
        "pretrain",
        json!({ "resume": resume.map(|p| p.display().to_string()) }),
    )?;
    let ds = load_dataset(&cfg.data)?;
    let outcome = trainer::pretrain(&cfg.pretrain_spec(), &ds, &run_dir, resume)?;
    let final_loss = outcome.state.loss_history.last().copied().unwrap_or(f64::NAN);
    println!("run_dir: {}", run_dir.display());
    println!("checkpoint: {}", outcome.checkpoint_path.display());
    println!("final_loss: {final_loss}");
    Ok(())
}

// ---------------------------------------------------------------------------
// eval

pub struct EvalFlags {
    pub seed: Option<u64>,
    pub metric: Option<String>,
    pub n_way: Option<usize>,
    pub k_shot: Option<usize>,
    pub query_per_class: Option<usize>,
    pub n_episodes: Option<usize>,
}

fn parse_metric(s: &str) -> Result<ProbeMetric, CliError> {
    match s {
        "top1" => Ok(ProbeMetric::Top1),
        "mean-per-class" => Ok(ProbeMetric::MeanPerClass),
        other => Err(CliError::Usage(format!("unknown probe metric: {other}"))),
    }
}

pub fn cmd_eval(
    cfg: &RunConfig,
    ckpt: &Path,
    protocol: &str,
    flags: &EvalFlags,
) -> Result<(), CliError> {
    let seed = flags.seed.unwrap_or(cfg.train.seed);
    let metric = parse_metric(flags.metric.as_deref().unwrap_or("top1"))?;
    let run_dir = make_run_dir(&cfg.out, &cfg.short_hash()?)?;
    snapshot(
        &run_dir,
        cfg,
        "eval",
        json!({
            "checkpoint": ckpt.display().to_string(),
            "protocol": protocol,
            "seed": seed,
            "metric": metric.as_str(),
            "n_way": flags.n_way, "k_shot": flags.k_shot,
            "query_per_class": flags.query_per_class, "n_episodes": flags.n_episodes,
        }),
    )?;
    let cache = cache_root(&cfg.out);
    let hash = checkpoint::file_sha256(ckpt)?;

    let report_path = match protocol {
        "linear" => {
            let train = load_dataset(&ref_with_split(cfg, Split::Train))?;
            let test = load_dataset(&ref_with_split(cfg, Split::Test))?;
            let (fit, val) = split_dataset(&train, (0.9, 0.1), seed)?;
            let embed = |d: &Dataset, split: &str| -> Result<(Array2<f64>, Vec<u32>), CliError> {
                log_cache_state(&cache, d, split, &hash);
                let (x, y, _) = evalsuite::embed_from_checkpoint(ckpt, d, split, true, Some(&cache))?;
                Ok((x.mapv(|v| v as f64), y))
            };
            let (xf, yf) = embed(&fit, "train")?;
            let (xv, yv) = embed(&val, "train")?;
            let (xs, ys) = embed(&test, "test")?;
            let result = evalsuite::linear_probe(
                (&xf, &yf),
                (&xv, &yv),
                (&xs, &ys),
                train.class_count,
                &evalsuite::l2_grid(),
                metric,
                &train.id,
                seed,
            )?;
            let path = run_dir.join("probe.json");
            evalsuite::write_probe_json(&path, &result, &hash)?;
            evalsuite::append_probe_csv(&run_dir.join("probes.csv"), &result, &hash)?;
            println!("value: {}", result.value);
            path
        }
        "fewshot" => {
            let ds = load_dataset(&cfg.data)?;
            let mut spec = EpisodeSpec::default();
            if let Some(v) = flags.n_way {
                spec.n_way = v;
            }
            if let Some(v) = flags.k_shot {
                spec.k_shot = v;
            }
            if let Some(v) = flags.query_per_class {
                spec.query_per_class = v;
            }
            if let Some(v) = flags.n_episodes {
                spec.n_episodes = v;
            }
            if spec.n_way > ds.class_count {
                return Err(CliError::Usage(format!(
                    "{}-way episodes exceed the {} classes of {}",
                    spec.n_way, ds.class_count, ds.id
                )));
            }
            log_cache_state(&cache, &ds, cfg.data.split.as_str(), &hash);
            let (x, y, _) =
                evalsuite::embed_from_checkpoint(ckpt, &ds, cfg.data.split.as_str(), true, Some(&cache))?;
            let result = evalsuite::few_shot_eval(&x.mapv(|v| v as f64), &y, &spec, seed)?;
            let path = run_dir.join("fewshot.json");
            write_json(
                &path,
                &json!({
                    "protocol": "fewshot", "dataset": ds.id,
                    "n_way": spec.n_way, "k_shot": spec.k_shot,
                    "query_per_class": spec.query_per_class,
                    "episodes": result.episodes,
                    "mean_accuracy": result.mean_accuracy, "ci95": result.ci95,
                    "seed": seed, "checkpoint_hash": hash,
                }),
            )?;
            println!("value: {}", result.mean_accuracy);
            path
        }
        "rotation" => {
            let train = load_dataset(&ref_with_split(cfg, Split::Train))?;
            let test = load_dataset(&ref_with_split(cfg, Split::Test))?;
            let (model, _, meta) = load_checkpoint(ckpt)?;
            let result = evalsuite::rotation_probe(
                &model.online.backbone,
                &train,
                &test,
                meta.augment.out_size,
                &evalsuite::l2_grid(),
                seed,
            )?;
            let path = run_dir.join("rotation.json");
            evalsuite::write_probe_json(&path, &result, &hash)?;
            println!("value: {}", result.value);
            path
        }
        other => return Err(CliError::Usage(format!("unknown eval protocol: {other}"))),
    };
    println!("run_dir: {}", run_dir.display());
    println!("report: {}", report_path.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// analyze

pub struct AnalyzeFlags {
    pub checkpoints: Vec<PathBuf>,
    pub config: Option<RunConfig>,
    pub n_pairs: Option<usize>,
    pub aug: Option<String>,
    pub tau: Option<f64>,
    pub batch_size: Option<usize>,
    pub embeddings: Option<PathBuf>,
    pub logs: Vec<PathBuf>,
    pub seed: Option<u64>,
    pub k: Option<usize>,
    pub fit_lo: Option<usize>,
    pub fit_hi: Option<usize>,
}

fn require_config<'a>(flags: &'a AnalyzeFlags, analysis: &str) -> Result<&'a RunConfig, CliError> {
    flags
        .config
        .as_ref()
        .ok_or_else(|| CliError::Usage(format!("{analysis} analysis needs --config for its dataset")))
}

fn require_one_checkpoint<'a>(flags: &'a AnalyzeFlags, analysis: &str) -> Result<&'a Path, CliError> {
    match flags.checkpoints.as_slice() {
        [one] => Ok(one),
        other => Err(CliError::Usage(format!(
            "{analysis} analysis takes exactly one --checkpoint, got {}",
            other.len()
        ))),
    }
}

/// Embeddings for spectrum/variance: either a cached `.bin` with its JSON
/// sidecar, or a checkpoint applied to the configured dataset.
fn gather_embeddings(flags: &AnalyzeFlags, analysis: &str) -> Result<Array2<f64>, CliError> {
    if let Some(bin) = &flags.embeddings {
        let sidecar = bin.with_extension("json");
        let mtext = std::fs::read(&sidecar).map_err(|e| {
            CliError::Usage(format!("cannot read cache manifest {}: {e}", sidecar.display()))
        })?;
        let manifest: datahub::CacheManifest = serde_json::from_slice(&mtext)
            .map_err(|e| CliError::Usage(format!("invalid cache manifest: {e}")))?;
        let bytes = std::fs::read(bin)
            .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", bin.display())))?;
        if bytes.len() != manifest.rows * manifest.dims * 4 {
            return Err(CliError::Usage(format!(
                "{} holds {} bytes, manifest says {}x{} f32",
                bin.display(),
                bytes.len(),
                manifest.rows,
                manifest.dims
            )));
        }
        let vals: Vec<f64> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        return Ok(Array2::from_shape_vec((manifest.rows, manifest.dims), vals)
            .expect("shape checked against byte length"));
    }
    let cfg = require_config(flags, analysis)?;
    let ckpt = require_one_checkpoint(flags, analysis)?;
    let ds = load_dataset(&cfg.data)?;
    let cache = cache_root(&cfg.out);
    log_cache_state(&cache, &ds, cfg.data.split.as_str(), &checkpoint::file_sha256(ckpt)?);
    let (x, _, _) =
        evalsuite::embed_from_checkpoint(ckpt, &ds, cfg.data.split.as_str(), true, Some(&cache))?;
    Ok(x.mapv(|v| v as f64))
}

fn analyze_out_dir(flags: &AnalyzeFlags, out_flag: Option<&Path>) -> PathBuf {
    out_flag
        .map(Path::to_path_buf)
        .or_else(|| flags.config.as_ref().map(|c| c.out.clone()))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

/// Hash for the run-directory name: the config hash when present, otherwise
/// a hash of the primary input file.
fn analyze_hash(flags: &AnalyzeFlags) -> Result<String, CliError> {
    if let Some(cfg) = &flags.config {
        return cfg.short_hash();
    }
    let probe = flags
        .embeddings
        .as_deref()
        .or(flags.checkpoints.first().map(PathBuf::as_path))
        .or(flags.logs.first().map(PathBuf::as_path));
    match probe {
        Some(p) => Ok(checkpoint::file_sha256(p)?[..8].to_string()),
        None => Ok("noinput0".into()),
    }
}

fn snapshot_analyze(
    dir: &Path,
    flags: &AnalyzeFlags,
    analysis: &str,
    params: serde_json::Value,
) -> Result<(), CliError> {
    if let Some(cfg) = &flags.config {
        std::fs::write(dir.join("config.toml"), cfg.snapshot_toml()?)
            .map_err(|e| CliError::Runtime(format!("cannot write config snapshot: {e}")))?;
    }
    let inv = json!({ "command": "analyze", "analysis": analysis, "params": params });
    write_json(&dir.join("invocation.json"), &inv)
}

pub fn cmd_analyze(analysis: &str, flags: &AnalyzeFlags, out_flag: Option<&Path>) -> Result<(), CliError> {
    let out = analyze_out_dir(flags, out_flag);
    let run_dir = make_run_dir(&out, &analyze_hash(flags)?)?;
    let params = json!({
        "checkpoints": flags.checkpoints.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
        "n_pairs": flags.n_pairs, "aug": flags.aug, "tau": flags.tau,
        "batch_size": flags.batch_size,
        "embeddings": flags.embeddings.as_ref().map(|p| p.display().to_string()),
        "logs": flags.logs.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
        "seed": flags.seed, "k": flags.k, "fit_lo": flags.fit_lo, "fit_hi": flags.fit_hi,
    });
    snapshot_analyze(&run_dir, flags, analysis, params)?;
    let seed = flags.seed.or_else(|| flags.config.as_ref().map(|c| c.train.seed)).unwrap_or(0);

    let report_path = match analysis {
        "conditioning" => {
            let cfg = require_config(flags, analysis)?;
            let ckpt = require_one_checkpoint(flags, analysis)?;
            let ds = load_dataset(&cfg.data)?;
            let n_pairs = flags.n_pairs.unwrap_or(1000);
            let rep = analysis::conditioning_dependency_from_checkpoint(ckpt, &ds, n_pairs, seed)?;
            let path = run_dir.join("conditioning.json");
            write_json(&path, &rep)?;
            let mut st: Vec<f64> = rep.sims_true.clone();
            let mut sr: Vec<f64> = rep.sims_random.clone();
            st.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
            sr.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
            let pts = |v: &[f64]| -> Vec<(f64, f64)> {
                v.iter().enumerate().map(|(i, &y)| (i as f64, y)).collect()
            };
            let (pt, pr) = (pts(&st), pts(&sr));
            line_plot(
                &run_dir.join("conditioning.svg"),
                "projector similarity under true vs swapped augmentation vectors",
                "pair (sorted)",
                "cosine similarity",
                &[Series { label: "true", points: &pt }, Series { label: "swapped", points: &pr }],
            )?;
            println!("frac_true_gt_random: {}", rep.frac_true_gt_random);
            path
        }
        "sensitivity" => {
            let cfg = require_config(flags, analysis)?;
            if flags.checkpoints.is_empty() {
                return Err(CliError::Usage("sensitivity analysis needs --checkpoint".into()));
            }
            let aug = AugKind::parse(
                flags.aug.as_deref().ok_or_else(|| CliError::Usage("--aug is required".into()))?,
            )?;
            let ds = load_dataset(&cfg.data)?;
            let tau = flags.tau.unwrap_or(0.5);
            let batch = flags.batch_size.unwrap_or(64);
            let mut entries = Vec::new();
            let mut series_pts: Vec<(String, Vec<(f64, f64)>)> = Vec::new();
            for ckpt in &flags.checkpoints {
                let prof = analysis::stagewise_from_checkpoint(ckpt, &ds, aug, batch, tau, seed)?;
                let pts: Vec<(f64, f64)> =
                    prof.values.iter().enumerate().map(|(i, (_, v))| ((i + 1) as f64, *v)).collect();
                series_pts.push((ckpt.display().to_string(), pts));
                entries.push(json!({ "checkpoint": ckpt.display().to_string(), "profile": prof }));
            }
            let path = run_dir.join("sensitivity.json");
            write_json(&path, &json!({ "augmentation": aug.as_str(), "profiles": entries }))?;
            let series: Vec<Series> = series_pts
                .iter()
                .map(|(l, p)| Series { label: l, points: p })
                .collect();
            line_plot(
                &run_dir.join("sensitivity.svg"),
                &format!("stagewise InfoNCE under {}", aug.as_str()),
                "stage (1-4 backbone, 5 projector)",
                "InfoNCE",
                &series,
            )?;
            path
        }
        "spectrum" => {
            let emb = gather_embeddings(flags, analysis)?;
            let range = match (flags.fit_lo, flags.fit_hi) {
                (Some(lo), Some(hi)) => Some((lo, hi)),
                (None, None) => None,
                _ => return Err(CliError::Usage("--fit-lo and --fit-hi go together".into())),
            };
            let fit = analysis::eigenspectrum_alpha(&emb, range)?;
            let path = run_dir.join("spectrum.json");
            write_json(&path, &fit)?;
            let pts: Vec<(f64, f64)> = fit
                .eigenvalues
                .iter()
                .enumerate()
                .filter(|(_, &v)| v > 0.0)
                .map(|(i, &v)| ((i as f64 + 1.0).log10(), v.log10()))
                .collect();
            line_plot(
                &run_dir.join("spectrum.svg"),
                &format!("eigenspectrum (alpha = {:.3})", fit.alpha),
                "log10 index",
                "log10 eigenvalue",
                &[Series { label: "spectrum", points: &pts }],
            )?;
            println!("alpha: {}", fit.alpha);
            path
        }
        "variance" => {
            let emb = gather_embeddings(flags, analysis)?;
            let curve = analysis::explained_variance(&emb)?;
            let path = run_dir.join("variance.json");
            write_json(&path, &curve)?;
            let pts: Vec<(f64, f64)> = curve
                .cumulative
                .iter()
                .enumerate()
                .map(|(i, &v)| ((i + 1) as f64, v))
                .collect();
            line_plot(
                &run_dir.join("variance.svg"),
                &format!("explained variance ({} components to 90%)", curve.components_for_90pct),
                "components",
                "cumulative variance fraction",
                &[Series { label: "cumulative", points: &pts }],
            )?;
            println!("components_for_90pct: {}", curve.components_for_90pct);
            path
        }
        "retrieval" => {
            let cfg = require_config(flags, analysis)?;
            let ckpt = require_one_checkpoint(flags, analysis)?;
            let ds = load_dataset(&cfg.data)?;
            let cache = cache_root(&cfg.out);
            let (x, y, _) = evalsuite::embed_from_checkpoint(
                ckpt,
                &ds,
                cfg.data.split.as_str(),
                true,
                Some(&cache),
            )?;
            let x = x.mapv(|v| v as f64);
            let k = flags.k.unwrap_or(10).min(x.nrows().saturating_sub(1)).max(1);
            let n_queries = flags.n_pairs.unwrap_or(100).min(x.nrows());
            let mut r = condssl::rng::stream(seed, "retrieval-queries", &[]);
            let queries: Vec<usize> =
                condssl::rng::permutation(&mut r, x.nrows()).into_iter().take(n_queries).collect();
            let mut per_query = Vec::with_capacity(n_queries);
            let mut precision_sum = 0.0;
            for &q in &queries {
                // k+1 then drop the self-match at rank 1.
                let ranked = analysis::retrieve(&x.row(q).to_owned(), &x, k + 1)?;
                let neighbors: Vec<usize> =
                    ranked.into_iter().filter(|&i| i != q).take(k).collect();
                let matches = neighbors.iter().filter(|&&i| y[i] == y[q]).count();
                precision_sum += matches as f64 / k as f64;
                per_query.push(json!({ "query": q, "neighbors": neighbors, "label_matches": matches }));
            }
            let mean_precision = precision_sum / n_queries as f64;
            let path = run_dir.join("retrieval.json");
            write_json(
                &path,
                &json!({
                    "dataset": ds.id, "k": k, "n_queries": n_queries, "seed": seed,
                    "mean_precision_at_k": mean_precision, "queries": per_query,
                }),
            )?;
            println!("mean_precision_at_k: {mean_precision}");
            path
        }
        "losscurves" => {
            if flags.logs.len() < 2 {
                return Err(CliError::Usage(format!(
                    "losscurves needs at least 2 training logs, got {}",
                    flags.logs.len()
                )));
            }
            let curves: Vec<(String, Vec<f64>)> = flags
                .logs
                .iter()
                .map(|p| Ok((p.display().to_string(), read_loss_log(p)?)))
                .collect::<Result<_, CliError>>()?;
            let epochs = curves.iter().map(|(_, c)| c.len()).min().expect("nonempty");
            if epochs == 0 {
                return Err(CliError::Usage("a training log holds no epochs".into()));
            }
            let (base_name, base) = &curves[0];
            let mut others = Vec::new();
            let mut series_pts: Vec<(String, Vec<(f64, f64)>)> = Vec::new();
            for (name, c) in &curves[1..] {
                let diff: Vec<f64> = (0..epochs).map(|e| c[e] - base[e]).collect();
                series_pts.push((
                    name.clone(),
                    diff.iter().enumerate().map(|(e, &d)| ((e + 1) as f64, d)).collect(),
                ));
                others.push(json!({ "log": name, "loss": &c[..epochs], "diff_vs_baseline": diff }));
            }
            let path = run_dir.join("losscurves.json");
            write_json(
                &path,
                &json!({
                    "epochs": epochs,
                    "baseline": { "log": base_name, "loss": &base[..epochs] },
                    "curves": others,
                }),
            )?;
            let series: Vec<Series> =
                series_pts.iter().map(|(l, p)| Series { label: l, points: p }).collect();
            line_plot(
                &run_dir.join("losscurves.svg"),
                "per-epoch loss relative to the baseline log",
                "epoch",
                "loss difference",
                &series,
            )?;
            path
        }
        other => return Err(CliError::Usage(format!("unknown analysis: {other}"))),
    };
    println!("run_dir: {}", run_dir.display());
    println!("report: {}", report_path.display());
    Ok(())
}

/// Reads `mean_loss` per epoch from a trainer CSV log.
fn read_loss_log(path: &Path) -> Result<Vec<f64>, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read log {}: {e}", path.display())))?;
    let mut losses = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            if !line.starts_with("epoch,mean_loss") {
                return Err(CliError::Usage(format!(
                    "{} is not a training log (header {line:?})",
                    path.display()
                )));
            }
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() < 2 {
            return Err(CliError::Usage(format!("malformed log row {i} in {}", path.display())));
        }
        let v: f64 = cols[1]
            .parse()
            .map_err(|e| CliError::Usage(format!("bad loss on row {i} of {}: {e}", path.display())))?;
        losses.push(v);
    }
    Ok(losses)
}

// ---------------------------------------------------------------------------
// retrieve

pub fn cmd_retrieve(
    cfg: &RunConfig,
    ckpt: &Path,
    query_index: usize,
    k: usize,
    seed: Option<u64>,
) -> Result<(), CliError> {
    let run_dir = make_run_dir(&cfg.out, &cfg.short_hash()?)?;
    snapshot(
        &run_dir,
        cfg,
        "retrieve",
        json!({
            "checkpoint": ckpt.display().to_string(),
            "query_index": query_index, "k": k, "seed": seed,
        }),
    )?;
    let ds = load_dataset(&cfg.data)?;
    let cache = cache_root(&cfg.out);
    let (x, y, _) =
        evalsuite::embed_from_checkpoint(ckpt, &ds, cfg.data.split.as_str(), true, Some(&cache))?;
    let x = x.mapv(|v| v as f64);
    if query_index >= x.nrows() {
        return Err(CliError::Usage(format!(
            "query index {query_index} outside the {} gallery rows",
            x.nrows()
        )));
    }
    let query = x.row(query_index).to_owned();
    let ranked = analysis::retrieve(&query, &x, k)?;
    let qn = query.dot(&query).sqrt().max(1e-300);
    let mut rows = Vec::with_capacity(ranked.len());
    for (rank, &i) in ranked.iter().enumerate() {
        let row = x.row(i);
        let sim = query.dot(&row) / (qn * row.dot(&row).sqrt().max(1e-300));
        println!("rank {}: index {} similarity {:.6} label {}", rank + 1, i, sim, y[i]);
        rows.push(json!({ "rank": rank + 1, "index": i, "similarity": sim, "label": y[i] }));
    }
    let path = run_dir.join("retrieve.json");
    write_json(
        &path,
        &json!({
            "dataset": ds.id, "query_index": query_index,
            "query_label": y[query_index], "k": k, "neighbors": rows,
        }),
    )?;
    println!("run_dir: {}", run_dir.display());
    println!("report: {}", path.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// report

/// Pulls one headline scalar per known artifact in a run directory.
fn summarize_run(dir: &Path, md: &mut String) -> Result<(), CliError> {
    md.push_str(&format!("## {}\n\n", dir.display()));
    let mut found = false;
    let read = |name: &str| -> Option<serde_json::Value> {
        let p = dir.join(name);
        let bytes = std::fs::read(p).ok()?;
        serde_json::from_slice(&bytes).ok()
    };
    if let Ok(text) = std::fs::read_to_string(dir.join("loss_log.csv")) {
        let losses: Vec<&str> =
            text.lines().skip(1).filter_map(|l| l.split(',').nth(1)).collect();
        if let (Some(first), Some(last)) = (losses.first(), losses.last()) {
            md.push_str(&format!(
                "- pretraining: {} epochs, mean loss {first} -> {last}\n",
                losses.len()
            ));
            found = true;
        }
    }
    let scalar_reports: [(&str, &str, &str); 7] = [
        ("probe.json", "linear probe", "value"),
        ("rotation.json", "rotation probe", "value"),
        ("fewshot.json", "few-shot", "mean_accuracy"),
        ("conditioning.json", "conditioning dependency frac_true_gt_random", "frac_true_gt_random"),
        ("spectrum.json", "eigenspectrum alpha", "alpha"),
        ("variance.json", "components for 90% variance", "components_for_90pct"),
        ("retrieval.json", "retrieval mean precision@k", "mean_precision_at_k"),
    ];
    for (file, label, key) in scalar_reports {
        if let Some(v) = read(file) {
            if let Some(val) = v.get(key) {
                md.push_str(&format!("- {label}: {val} ({file})\n"));
                found = true;
            }
        }
    }
    if let Some(v) = read("sensitivity.json") {
        if let Some(profiles) = v.get("profiles").and_then(|p| p.as_array()) {
            md.push_str(&format!(
                "- sensitivity: {} profile(s) under {} (sensitivity.json)\n",
                profiles.len(),
                v.get("augmentation").unwrap_or(&serde_json::Value::Null)
            ));
            found = true;
        }
    }
    if let Some(v) = read("losscurves.json") {
        if let Some(epochs) = v.get("epochs") {
            md.push_str(&format!("- loss curves over {epochs} epochs (losscurves.json)\n"));
            found = true;
        }
    }
    if !found {
        md.push_str("- no recognized artifacts\n");
    }
    md.push('\n');
    Ok(())
}

pub fn cmd_report(runs: &[PathBuf], out: Option<&Path>) -> Result<(), CliError> {
    if runs.is_empty() {
        return Err(CliError::Usage("report needs at least one --run directory".into()));
    }
    for r in runs {
        if !r.is_dir() {
            return Err(CliError::Usage(format!("{} is not a run directory", r.display())));
        }
    }
    let mut md = String::from("# Run summary\n\n");
    for r in runs {
        summarize_run(r, &mut md)?;
    }
    let path = out.map(Path::to_path_buf).unwrap_or_else(|| runs[0].join("report.md"));
    std::fs::write(&path, md)
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))?;
    println!("report: {}", path.display());
    Ok(())
}

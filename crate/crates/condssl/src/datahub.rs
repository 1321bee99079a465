//! Dataset ingestion, deterministic splits, and the embedding cache.
//!
//! Disk formats are the standard binary distributions (CIFAR label+planar
//! records, STL column-major planes). The synthetic `shapes` set needs no
//! files: ten colored-shape classes are rasterized deterministically from
//! (seed, split, index), which is what unit tests and file-less environments
//! train on. All images come out as float HWC in [0, 1].

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetId {
    Cifar10,
    Cifar100,
    Stl10,
    Shapes,
}

impl DatasetId {
    pub fn as_str(self) -> &'static str {
        match self {
            DatasetId::Cifar10 => "cifar10",
            DatasetId::Cifar100 => "cifar100",
            DatasetId::Stl10 => "stl10",
            DatasetId::Shapes => "shapes",
        }
    }

    pub fn class_count(self) -> usize {
        match self {
            DatasetId::Cifar100 => 100,
            _ => 10,
        }
    }

    pub fn native_size(self) -> usize {
        match self {
            DatasetId::Stl10 => 96,
            _ => 32,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// Locator for one loadable split. Validation splits are not on disk; they
/// are carved out of train by [`split_dataset`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetRef {
    pub id: DatasetId,
    /// Directory holding the standard binary distribution (ignored for the
    /// synthetic set).
    pub root: PathBuf,
    pub split: Split,
    /// Keep only the first n examples of the deterministic order.
    pub limit: Option<usize>,
    /// Synthetic sets only: edge length and example count.
    pub image_size: Option<usize>,
    pub count: Option<usize>,
}

impl DatasetRef {
    pub fn new(id: DatasetId, root: impl Into<PathBuf>, split: Split) -> Self {
        DatasetRef { id, root: root.into(), split, limit: None, image_size: None, count: None }
    }

    pub fn class_count(&self) -> usize {
        self.id.class_count()
    }

    pub fn image_size(&self) -> usize {
        self.image_size.unwrap_or_else(|| self.id.native_size())
    }
}

/// A fully materialized, immutable dataset in deterministic order.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub id: String,
    pub images: Vec<Image>,
    pub labels: Vec<u32>,
    pub class_count: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    fn validate(&self) -> Result<()> {
        if self.images.len() != self.labels.len() {
            return Err(Error::data("image/label count mismatch"));
        }
        if let Some(&l) = self.labels.iter().find(|&&l| l as usize >= self.class_count) {
            return Err(Error::data(format!(
                "label {l} out of range for {} classes",
                self.class_count
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Disk loaders.

fn open_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::data(format!("{}: {e}", path.display())))
}

/// Resolves a data file under either the conventional archive subdirectory or
/// the root itself.
fn resolve(root: &Path, subdir: &str, file: &str) -> Result<PathBuf> {
    let a = root.join(subdir).join(file);
    if a.is_file() {
        return Ok(a);
    }
    let b = root.join(file);
    if b.is_file() {
        return Ok(b);
    }
    Err(Error::data(format!(
        "missing dataset file: {} (also tried {})",
        a.display(),
        b.display()
    )))
}

/// One CIFAR-style planar image (row-major planes, R then G then B).
fn image_from_planes(planes: &[u8], size: usize) -> Image {
    let area = size * size;
    Image::from_fn(size, size, |y, x, c| planes[c * area + y * size + x] as f32 / 255.0)
}

fn load_cifar10(root: &Path, split: Split) -> Result<Dataset> {
    let files: Vec<&str> = match split {
        Split::Train => vec![
            "data_batch_1.bin",
            "data_batch_2.bin",
            "data_batch_3.bin",
            "data_batch_4.bin",
            "data_batch_5.bin",
        ],
        Split::Test => vec!["test_batch.bin"],
    };
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for f in files {
        let path = resolve(root, "cifar-10-batches-bin", f)?;
        let bytes = open_bytes(&path)?;
        if bytes.len() % 3073 != 0 {
            return Err(Error::data(format!("{}: not a CIFAR-10 batch", path.display())));
        }
        for rec in bytes.chunks_exact(3073) {
            labels.push(rec[0] as u32);
            images.push(image_from_planes(&rec[1..], 32));
        }
    }
    Ok(Dataset { id: "cifar10".into(), images, labels, class_count: 10 })
}

fn load_cifar100(root: &Path, split: Split) -> Result<Dataset> {
    let file = match split {
        Split::Train => "train.bin",
        Split::Test => "test.bin",
    };
    let path = resolve(root, "cifar-100-binary", file)?;
    let bytes = open_bytes(&path)?;
    if bytes.len() % 3074 != 0 {
        return Err(Error::data(format!("{}: not a CIFAR-100 batch", path.display())));
    }
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for rec in bytes.chunks_exact(3074) {
        // Byte 0 is the coarse label; the fine label drives evaluation.
        labels.push(rec[1] as u32);
        images.push(image_from_planes(&rec[2..], 32));
    }
    Ok(Dataset { id: "cifar100".into(), images, labels, class_count: 100 })
}

fn load_stl10(root: &Path, split: Split) -> Result<Dataset> {
    let (xf, yf) = match split {
        Split::Train => ("train_X.bin", "train_y.bin"),
        Split::Test => ("test_X.bin", "test_y.bin"),
    };
    let xs = open_bytes(&resolve(root, "stl10_binary", xf)?)?;
    let ys = open_bytes(&resolve(root, "stl10_binary", yf)?)?;
    let per = 96 * 96 * 3;
    if xs.len() % per != 0 || xs.len() / per != ys.len() {
        return Err(Error::data("STL-10 image/label sizes inconsistent"));
    }
    let mut images = Vec::with_capacity(ys.len());
    // Planes are column-major: value at (row y, col x, channel c) sits at
    // c*96*96 + x*96 + y.
    for rec in xs.chunks_exact(per) {
        images.push(Image::from_fn(96, 96, |y, x, c| {
            rec[c * 9216 + x * 96 + y] as f32 / 255.0
        }));
    }
    let labels = ys.iter().map(|&l| (l as u32).saturating_sub(1)).collect();
    Ok(Dataset { id: "stl10".into(), images, labels, class_count: 10 })
}

// ---------------------------------------------------------------------------
// Synthetic shapes.

const SHAPES_SEED: u64 = 0x5ca1ab1e;
const SHAPE_CLASSES: usize = 10;

fn default_shape_count(split: Split) -> usize {
    match split {
        Split::Train => 10_000,
        Split::Test => 2_000,
    }
}

/// Rasterizes one shape image. Class cycles with the index so labels are
/// exactly balanced; colors, placement, and pixel noise come from a stream
/// keyed by (seed, split, index).
fn shape_image(split: Split, index: usize, size: usize) -> (Image, u32) {
    let split_code = match split {
        Split::Train => 0u64,
        Split::Test => 1u64,
    };
    let mut r = rng::stream(SHAPES_SEED, "shapes", &[split_code, index as u64]);
    let class = (index % SHAPE_CLASSES) as u32;

    let bg: [f32; 3] = std::array::from_fn(|_| rng::uniform(&mut r, 0.05, 0.45) as f32);
    let fg: [f32; 3] = std::array::from_fn(|_| rng::uniform(&mut r, 0.55, 1.0) as f32);
    let s = size as f64;
    let cx = s / 2.0 + rng::uniform(&mut r, -0.15, 0.15) * s;
    let cy = s / 2.0 + rng::uniform(&mut r, -0.15, 0.15) * s;
    let rad = rng::uniform(&mut r, 0.22, 0.38) * s;
    let stripe = (s / 8.0).max(2.0);
    let phase = rng::uniform(&mut r, 0.0, stripe);

    let inside = move |x: f64, y: f64| -> bool {
        let dx = x - cx;
        let dy = y - cy;
        let dist = (dx * dx + dy * dy).sqrt();
        match class {
            0 => dist <= rad,
            1 => dx.abs() <= rad && dy.abs() <= rad,
            2 => dy >= -rad && dy <= rad && dx.abs() <= (dy + rad) / 2.0,
            3 => dist <= rad && dist >= 0.6 * rad,
            4 => (dx.abs() <= 0.3 * rad && dy.abs() <= rad) || (dy.abs() <= 0.3 * rad && dx.abs() <= rad),
            5 => (dx.abs() - dy.abs()).abs() <= 0.35 * rad && dx.abs().max(dy.abs()) <= rad,
            6 => (((y + phase) / stripe).floor() as i64).rem_euclid(2) == 0,
            7 => (((x + phase) / stripe).floor() as i64).rem_euclid(2) == 0,
            8 => dx.abs() + dy.abs() <= rad,
            _ => {
                let d1 = ((dx + 0.55 * rad).powi(2) + dy * dy).sqrt();
                let d2 = ((dx - 0.55 * rad).powi(2) + dy * dy).sqrt();
                d1 <= 0.42 * rad || d2 <= 0.42 * rad
            }
        }
    };

    // Light pixel noise keeps batch statistics non-degenerate.
    let img = Image::from_fn(size, size, |y, x, c| {
        let base = if inside(x as f64 + 0.5, y as f64 + 0.5) { fg[c] } else { bg[c] };
        (base + rng::uniform(&mut r, -0.02, 0.02) as f32).clamp(0.0, 1.0)
    });
    (img, class)
}

fn load_shapes(split: Split, size: usize, count: usize) -> Result<Dataset> {
    if size < 16 {
        return Err(Error::config("synthetic shapes need size >= 16"));
    }
    if count == 0 {
        return Err(Error::config("synthetic shapes need a positive count"));
    }
    let mut images = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let (img, label) = shape_image(split, i, size);
        images.push(img);
        labels.push(label);
    }
    Ok(Dataset { id: "shapes".into(), images, labels, class_count: SHAPE_CLASSES })
}

// ---------------------------------------------------------------------------
// Public loading and splitting.

/// Loads a split in deterministic order.
pub fn load_dataset(r: &DatasetRef) -> Result<Dataset> {
    let mut ds = match r.id {
        DatasetId::Cifar10 => load_cifar10(&r.root, r.split)?,
        DatasetId::Cifar100 => load_cifar100(&r.root, r.split)?,
        DatasetId::Stl10 => load_stl10(&r.root, r.split)?,
        DatasetId::Shapes => load_shapes(
            r.split,
            r.image_size(),
            r.count.unwrap_or_else(|| default_shape_count(r.split)),
        )?,
    };
    if let Some(limit) = r.limit {
        if limit == 0 || limit > ds.len() {
            return Err(Error::config(format!(
                "limit {limit} outside 1..={} for {}",
                ds.len(),
                ds.id
            )));
        }
        ds.images.truncate(limit);
        ds.labels.truncate(limit);
    }
    ds.validate()?;
    Ok(ds)
}

/// Stratified two-way split: fractions must sum to 1; every class is divided
/// `round(frac·n_c)` / remainder, seed-deterministically. A class too small
/// to feed a requested nonzero side is an error.
pub fn split_dataset(ds: &Dataset, fractions: (f64, f64), seed: u64) -> Result<(Dataset, Dataset)> {
    let (fa, fb) = fractions;
    if !(0.0..=1.0).contains(&fa) || !(0.0..=1.0).contains(&fb) || (fa + fb - 1.0).abs() > 1e-9 {
        return Err(Error::config("split fractions must be in [0,1] and sum to 1"));
    }
    ds.validate()?;
    let mut in_first = vec![false; ds.len()];
    for class in 0..ds.class_count {
        let members: Vec<usize> = (0..ds.len())
            .filter(|&i| ds.labels[i] as usize == class)
            .collect();
        if members.is_empty() {
            continue;
        }
        let n_a = (fa * members.len() as f64).round() as usize;
        let n_b = members.len() - n_a;
        if (fa > 0.0 && n_a == 0) || (fb > 0.0 && n_b == 0) {
            return Err(Error::data(format!(
                "class {class} has only {} samples, too few for a ({fa}, {fb}) split",
                members.len()
            )));
        }
        let mut r = rng::stream(seed, "split", &[class as u64]);
        let perm = rng::permutation(&mut r, members.len());
        for &p in perm.iter().take(n_a) {
            in_first[members[p]] = true;
        }
    }
    let pick = |keep: bool| -> Dataset {
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for i in 0..ds.len() {
            if in_first[i] == keep {
                images.push(ds.images[i].clone());
                labels.push(ds.labels[i]);
            }
        }
        Dataset {
            id: format!("{}/{}", ds.id, if keep { "split-a" } else { "split-b" }),
            images,
            labels,
            class_count: ds.class_count,
        }
    };
    Ok((pick(true), pick(false)))
}

// ---------------------------------------------------------------------------
// Embedding cache.

/// Identity of one cached embedding matrix. Two manifests refer to the same
/// logical entry iff every field except `created_at` matches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CacheManifest {
    pub checkpoint_hash: String,
    pub dataset_id: String,
    pub split: String,
    pub rows: usize,
    pub dims: usize,
    pub omega_layout_version: u32,
    pub created_at: u64,
}

impl CacheManifest {
    fn same_entry(&self, other: &CacheManifest) -> bool {
        self.checkpoint_hash == other.checkpoint_hash
            && self.dataset_id == other.dataset_id
            && self.split == other.split
            && self.rows == other.rows
            && self.dims == other.dims
            && self.omega_layout_version == other.omega_layout_version
    }
}

fn cache_paths(root: &Path, m: &CacheManifest) -> (PathBuf, PathBuf) {
    let dir = root.join(&m.dataset_id).join(&m.split);
    (dir.join(format!("{}.bin", m.checkpoint_hash)), dir.join(format!("{}.json", m.checkpoint_hash)))
}

/// Stores a payload under `root/<dataset>/<split>/<hash>.{bin,json}`. The
/// .bin lands first and the .json is renamed into place last, so a visible
/// manifest always describes complete bytes.
pub fn cache_put(root: &Path, m: &CacheManifest, payload: &Array2<f32>) -> Result<PathBuf> {
    if payload.nrows() != m.rows || payload.ncols() != m.dims {
        return Err(Error::data(format!(
            "payload {}x{} does not match manifest {}x{}",
            payload.nrows(),
            payload.ncols(),
            m.rows,
            m.dims
        )));
    }
    let (bin, json) = cache_paths(root, m);
    fs::create_dir_all(bin.parent().expect("cache path has parent"))?;

    let mut bytes = Vec::with_capacity(payload.len() * 4);
    for v in payload.iter() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let tmp_bin = bin.with_extension("bin.tmp");
    fs::write(&tmp_bin, &bytes)?;
    fs::rename(&tmp_bin, &bin)?;

    let tmp_json = json.with_extension("json.tmp");
    fs::write(&tmp_json, serde_json::to_vec_pretty(m)?)?;
    fs::rename(&tmp_json, &json)?;
    Ok(bin)
}

/// Returns the payload iff a stored manifest matches the request exactly
/// (besides `created_at`). Any mismatch is a miss; a matching manifest with
/// inconsistent bytes is an error, never a silent reuse.
pub fn cache_get(root: &Path, m: &CacheManifest) -> Result<Option<Array2<f32>>> {
    let (bin, json) = cache_paths(root, m);
    let Ok(mbytes) = fs::read(&json) else {
        return Ok(None);
    };
    let stored: CacheManifest = match serde_json::from_slice(&mbytes) {
        Ok(s) => s,
        Err(_) => return Ok(None),
    };
    if !stored.same_entry(m) {
        return Ok(None);
    }
    let bytes = open_bytes(&bin)?;
    if bytes.len() != m.rows * m.dims * 4 {
        return Err(Error::data(format!(
            "cache payload {} has {} bytes, manifest promises {}",
            bin.display(),
            bytes.len(),
            m.rows * m.dims * 4
        )));
    }
    let data: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Ok(Some(
        Array2::from_shape_vec((m.rows, m.dims), data).expect("shape just validated"),
    ))
}

pub fn unix_now() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use sha2::{Digest, Sha256};

    fn fixture_cifar10(dir: &Path, n: usize) {
        // Minimal but format-faithful batch files: n records in batch 1, the
        // rest empty is not allowed by the format, so batches 2..5 also get n.
        for f in [
            "data_batch_1.bin",
            "data_batch_2.bin",
            "data_batch_3.bin",
            "data_batch_4.bin",
            "data_batch_5.bin",
            "test_batch.bin",
        ] {
            let mut bytes = Vec::new();
            for i in 0..n {
                bytes.push((i % 10) as u8);
                for k in 0..3072u32 {
                    bytes.push(((i as u32 * 31 + k * 7) % 256) as u8);
                }
            }
            fs::write(dir.join(f), &bytes).unwrap();
        }
    }

    #[test]
    fn cifar10_fixture_loads_in_fixed_order() {
        let dir = tempfile::tempdir().unwrap();
        fixture_cifar10(dir.path(), 2);
        let r = DatasetRef::new(DatasetId::Cifar10, dir.path(), Split::Train);
        let ds = load_dataset(&r).unwrap();
        assert_eq!(ds.len(), 10, "5 batches x 2 records");
        assert_eq!(ds.labels[..4], [0, 1, 0, 1]);
        assert_eq!(ds.images[0].height(), 32);

        // Re-enumeration is identical, down to a checksum of decoded bytes.
        let checksum = |d: &Dataset| {
            let mut h = Sha256::new();
            for img in &d.images {
                for v in img.data() {
                    h.update(v.to_le_bytes());
                }
            }
            h.finalize().iter().map(|b| format!("{b:02x}")).collect::<String>()
        };
        let again = load_dataset(&r).unwrap();
        assert_eq!(checksum(&ds), checksum(&again));

        // First pixel of image 0: R plane byte 0 = 0, G plane = byte 1024.
        let want_r = 0.0f32;
        let want_g = ((1024u32 * 7) % 256) as f32 / 255.0;
        assert_eq!(ds.images[0].get(0, 0, 0), want_r);
        assert_eq!(ds.images[0].get(0, 0, 1), want_g);
    }

    #[test]
    fn missing_files_name_the_path() {
        let dir = tempfile::tempdir().unwrap();
        let r = DatasetRef::new(DatasetId::Cifar10, dir.path(), Split::Train);
        let err = load_dataset(&r).unwrap_err();
        assert!(err.to_string().contains("data_batch_1.bin"), "{err}");
    }

    #[test]
    fn stl10_column_major_decoding() {
        let dir = tempfile::tempdir().unwrap();
        // One image; mark (row 1, col 0, channel 0), which in column-major
        // storage is offset 0*9216 + 0*96 + 1.
        let mut x = vec![0u8; 96 * 96 * 3];
        x[1] = 255;
        fs::write(dir.path().join("train_X.bin"), &x).unwrap();
        fs::write(dir.path().join("train_y.bin"), [3u8]).unwrap();
        let r = DatasetRef::new(DatasetId::Stl10, dir.path(), Split::Train);
        let ds = load_dataset(&r).unwrap();
        assert_eq!(ds.labels, vec![2], "labels are 1-based on disk");
        assert_eq!(ds.images[0].get(1, 0, 0), 1.0);
        assert_eq!(ds.images[0].get(0, 1, 0), 0.0);
    }

    #[test]
    fn shapes_are_deterministic_balanced_and_sized() {
        let mut r = DatasetRef::new(DatasetId::Shapes, "", Split::Train);
        r.count = Some(40);
        let a = load_dataset(&r).unwrap();
        let b = load_dataset(&r).unwrap();
        assert_eq!(a.len(), 40);
        assert_eq!(a.labels, b.labels);
        assert_eq!(a.images[7].data(), b.images[7].data());
        for class in 0..10u32 {
            assert_eq!(a.labels.iter().filter(|&&l| l == class).count(), 4);
        }
        // Train and test streams are disjoint.
        let mut t = r.clone();
        t.split = Split::Test;
        let c = load_dataset(&t).unwrap();
        assert_ne!(a.images[0].data(), c.images[0].data());
    }

    #[test]
    fn limit_takes_a_prefix() {
        let mut r = DatasetRef::new(DatasetId::Shapes, "", Split::Train);
        r.count = Some(30);
        let full = load_dataset(&r).unwrap();
        r.limit = Some(12);
        let cut = load_dataset(&r).unwrap();
        assert_eq!(cut.len(), 12);
        assert_eq!(cut.labels[..], full.labels[..12]);
        r.limit = Some(31);
        assert!(load_dataset(&r).is_err());
    }

    #[test]
    fn split_is_stratified_deterministic_and_guarded() {
        let mut r = DatasetRef::new(DatasetId::Shapes, "", Split::Train);
        r.count = Some(100);
        let ds = load_dataset(&r).unwrap();
        let (a, b) = split_dataset(&ds, (0.9, 0.1), 5).unwrap();
        assert_eq!(a.len(), 90);
        assert_eq!(b.len(), 10);
        for class in 0..10u32 {
            assert_eq!(a.labels.iter().filter(|&&l| l == class).count(), 9);
            assert_eq!(b.labels.iter().filter(|&&l| l == class).count(), 1);
        }
        // Disjoint and covering by construction of the index partition; check
        // determinism and seed sensitivity instead.
        let (a2, _) = split_dataset(&ds, (0.9, 0.1), 5).unwrap();
        assert_eq!(a.labels, a2.labels);
        assert_eq!(a.images[0].data(), a2.images[0].data());
        let (a3, _) = split_dataset(&ds, (0.9, 0.1), 6).unwrap();
        let same = a
            .images
            .iter()
            .zip(&a3.images)
            .all(|(x, y)| x.data() == y.data());
        assert!(!same, "different seeds must shuffle differently");

        // (1.0, 0.0) leaves the second side empty.
        let (whole, empty) = split_dataset(&ds, (1.0, 0.0), 5).unwrap();
        assert_eq!(whole.len(), 100);
        assert_eq!(empty.len(), 0);

        // A 19-sample class cannot give a 5% side at least one sample when
        // rounding sends everything to the big side.
        let tiny = Dataset {
            id: "tiny".into(),
            images: vec![Image::zeros(16, 16); 3],
            labels: vec![0, 0, 0],
            class_count: 1,
        };
        assert!(split_dataset(&tiny, (0.99, 0.01), 1).is_err());
    }

    #[test]
    fn cache_round_trip_and_miss_semantics() {
        let dir = tempfile::tempdir().unwrap();
        let m = CacheManifest {
            checkpoint_hash: "abc123".into(),
            dataset_id: "shapes".into(),
            split: "test".into(),
            rows: 4,
            dims: 3,
            omega_layout_version: 1,
            created_at: unix_now(),
        };
        let payload = Array2::from_shape_fn((4, 3), |(i, j)| (i * 3 + j) as f32 / 7.0);
        assert!(cache_get(dir.path(), &m).unwrap().is_none(), "cold cache");
        cache_put(dir.path(), &m, &payload).unwrap();
        let got = cache_get(dir.path(), &m).unwrap().unwrap();
        assert_eq!(got, payload);

        // A different checkpoint hash is a miss, not a reuse.
        let mut m2 = m.clone();
        m2.checkpoint_hash = "def456".into();
        assert!(cache_get(dir.path(), &m2).unwrap().is_none());
        // So is a different layout version under the same hash.
        let mut m3 = m.clone();
        m3.omega_layout_version = 2;
        assert!(cache_get(dir.path(), &m3).unwrap().is_none());

        // Shape mismatch at put time is an error.
        let mut m4 = m.clone();
        m4.rows = 5;
        assert!(cache_put(dir.path(), &m4, &payload).is_err());
    }

    #[test]
    fn concurrent_readers_see_identical_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let m = CacheManifest {
            checkpoint_hash: "feedbeef".into(),
            dataset_id: "shapes".into(),
            split: "train".into(),
            rows: 32,
            dims: 16,
            omega_layout_version: 1,
            created_at: unix_now(),
        };
        let payload = Array2::from_shape_fn((32, 16), |(i, j)| ((i * 37 + j * 11) % 97) as f32);
        cache_put(dir.path(), &m, &payload).unwrap();
        let root = dir.path().to_path_buf();
        let handles: Vec<_> = (0..4)
            .map(|_| {
                let root = root.clone();
                let m = m.clone();
                std::thread::spawn(move || cache_get(&root, &m).unwrap().unwrap())
            })
            .collect();
        for h in handles {
            assert_eq!(h.join().unwrap(), payload);
        }
    }
}

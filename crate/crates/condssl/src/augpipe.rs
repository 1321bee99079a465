//! Augmentation pipeline that records its own parameters.
//!
//! Views are produced by a fixed operation order: crop -> flip -> color
//! jitter -> grayscale -> blur. Each view carries an [`AugmentationRecord`]
//! holding every sampled parameter plus the measured per-channel color shift
//! of the jitter step, and [`encode_omega`] maps a record to the fixed
//! 14-dimensional conditioning vector:
//!
//! ```text
//! index  0..4   crop center x, center y, width, height (fractions of source)
//! index  4..8   jitter brightness, contrast, saturation factors and hue shift,
//!               each mapped affinely from its sampling interval to [0, 1]
//!               with the identity at 0.5
//! index  8      blur sigma / sigma_hi, 0 when blur was not applied
//! index  9      horizontal flip flag
//! index 10      grayscale flag
//! index 11..14  measured per-channel mean color difference of the jitter
//!               step, mapped from [-1, 1] to [0, 1]
//! ```
//!
//! Applying a record is a pure function of (image, record), so any view can
//! be replayed bit-exactly.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng;

pub const OMEGA_DIM: usize = 14;
pub const OMEGA_LAYOUT_VERSION: u32 = 1;

/// Ranges and probabilities for sampling augmentations. Defaults follow the
/// standard contrastive recipe for 32 px inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentationPolicy {
    /// Crop area fraction range (uniform).
    pub crop_scale: [f64; 2],
    pub flip_prob: f64,
    pub jitter_prob: f64,
    /// Max strengths for brightness, contrast, saturation (factor range
    /// `[1-m, 1+m]`) and hue (shift range `[-m, m]` turns).
    pub jitter_max: [f64; 4],
    pub grayscale_prob: f64,
    pub blur_prob: f64,
    /// Blur sigma range (uniform); the low end must be positive.
    pub blur_sigma: [f64; 2],
    /// Side length of every produced view.
    pub out_size: usize,
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        AugmentationPolicy {
            crop_scale: [0.2, 1.0],
            flip_prob: 0.5,
            jitter_prob: 0.8,
            jitter_max: [0.4, 0.4, 0.4, 0.1],
            grayscale_prob: 0.2,
            blur_prob: 0.5,
            blur_sigma: [0.1, 2.0],
            out_size: 32,
        }
    }
}

impl AugmentationPolicy {
    /// A policy that leaves images untouched apart from resizing to
    /// `out_size`; useful for evaluation-side center views.
    pub fn identity(out_size: usize) -> Self {
        AugmentationPolicy {
            crop_scale: [1.0, 1.0],
            flip_prob: 0.0,
            jitter_prob: 0.0,
            jitter_max: [0.0, 0.0, 0.0, 0.0],
            grayscale_prob: 0.0,
            blur_prob: 0.0,
            blur_sigma: [0.1, 2.0],
            out_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.crop_scale;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::config(format!(
                "crop_scale [{lo}, {hi}] must satisfy 0 < lo <= hi <= 1"
            )));
        }
        for (name, p) in [
            ("flip_prob", self.flip_prob),
            ("jitter_prob", self.jitter_prob),
            ("grayscale_prob", self.grayscale_prob),
            ("blur_prob", self.blur_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(format!("{name} {p} outside [0, 1]")));
            }
        }
        for (i, &m) in self.jitter_max.iter().enumerate() {
            let hi = if i == 3 { 0.5 } else { 1.0 };
            if !(0.0..hi).contains(&m) {
                return Err(Error::config(format!(
                    "jitter_max[{i}] = {m} outside [0, {hi}); the omega encoding needs \
                     a bounded, invertible factor range"
                )));
            }
        }
        let [blo, bhi] = self.blur_sigma;
        if !(blo > 0.0 && blo <= bhi) {
            return Err(Error::config(format!(
                "blur_sigma [{blo}, {bhi}] must satisfy 0 < lo <= hi"
            )));
        }
        if self.out_size < 2 {
            return Err(Error::config(format!("out_size {} below 2", self.out_size)));
        }
        Ok(())
    }
}

/// Every parameter needed to replay one view. `color_diff` is measured while
/// the record is applied (after minus before the jitter step, per channel, on
/// the cropped and flipped view); it annotates the record and never
/// influences the pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentationRecord {
    pub layout_version: u32,
    /// Crop center and size as fractions of the source frame.
    pub crop_cx: f64,
    pub crop_cy: f64,
    pub crop_w: f64,
    pub crop_h: f64,
    pub flipped: bool,
    pub jitter_applied: bool,
    /// Brightness, contrast, saturation factors; identity is 1.
    pub jitter_factors: [f64; 3],
    /// Hue shift in turns; identity is 0.
    pub jitter_hue: f64,
    pub grayscaled: bool,
    pub blur_applied: bool,
    /// Zero exactly when blur was not applied.
    pub blur_sigma: f64,
    /// Measured jitter effect in [-1, 1] per channel; zero when
    /// `jitter_applied` is false or the view has not been rendered yet.
    pub color_diff: [f64; 3],
}

impl AugmentationRecord {
    /// The record that reproduces its input (given matching sizes).
    pub fn identity() -> Self {
        AugmentationRecord {
            layout_version: OMEGA_LAYOUT_VERSION,
            crop_cx: 0.5,
            crop_cy: 0.5,
            crop_w: 1.0,
            crop_h: 1.0,
            flipped: false,
            jitter_applied: false,
            jitter_factors: [1.0, 1.0, 1.0],
            jitter_hue: 0.0,
            grayscaled: false,
            blur_applied: false,
            blur_sigma: 0.0,
            color_diff: [0.0, 0.0, 0.0],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layout_version != OMEGA_LAYOUT_VERSION {
            return Err(Error::config(format!(
                "record layout_version {} unsupported (expected {OMEGA_LAYOUT_VERSION})",
                self.layout_version
            )));
        }
        for (name, v) in [
            ("crop_cx", self.crop_cx),
            ("crop_cy", self.crop_cy),
            ("crop_w", self.crop_w),
            ("crop_h", self.crop_h),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::data(format!("{name} {v} outside [0, 1]")));
            }
        }
        if self.crop_w <= 0.0 || self.crop_h <= 0.0 {
            return Err(Error::data("crop size must be positive".to_string()));
        }
        if self.jitter_applied {
            if self.jitter_factors.iter().any(|&f| f < 0.0) {
                return Err(Error::data("jitter factors must be nonnegative".to_string()));
            }
        } else {
            if self.jitter_factors != [1.0, 1.0, 1.0] || self.jitter_hue != 0.0 {
                return Err(Error::data(
                    "jitter factors must be identity when jitter_applied is false".to_string(),
                ));
            }
            if self.color_diff != [0.0, 0.0, 0.0] {
                return Err(Error::data(
                    "color_diff must be zero when jitter_applied is false".to_string(),
                ));
            }
        }
        if self.blur_applied {
            if self.blur_sigma <= 0.0 {
                return Err(Error::data(format!(
                    "blur_sigma {} must be positive when blur_applied",
                    self.blur_sigma
                )));
            }
        } else if self.blur_sigma != 0.0 {
            return Err(Error::data(format!(
                "blur_sigma {} must be zero when blur is not applied",
                self.blur_sigma
            )));
        }
        if self.color_diff.iter().any(|d| !(-1.0..=1.0).contains(d)) {
            return Err(Error::data("color_diff outside [-1, 1]".to_string()));
        }
        Ok(())
    }
}

/// Samples a record from the policy. The source dimensions are needed so the
/// crop can respect the frame's aspect ratio.
pub fn sample_record(
    policy: &AugmentationPolicy,
    rng_: &mut impl Rng,
    source_dims: (usize, usize),
) -> Result<AugmentationRecord> {
    policy.validate()?;
    let (h, w) = source_dims;
    if h < 2 || w < 2 {
        return Err(Error::data(format!("source dims {h}x{w} degenerate (any side < 2)")));
    }
    let (hf, wf) = (h as f64, w as f64);

    // Crop: uniform area fraction, log-uniform aspect ratio, ten placement
    // attempts, then a centered square fallback at the last drawn scale.
    let mut crop = None;
    let mut scale = policy.crop_scale[0];
    for _ in 0..10 {
        scale = rng::uniform(rng_, policy.crop_scale[0], policy.crop_scale[1]);
        let ratio = rng::log_uniform(rng_, 3.0 / 4.0, 4.0 / 3.0);
        let area = scale * wf * hf;
        let cw = (area * ratio).sqrt();
        let ch = (area / ratio).sqrt();
        if cw <= wf && ch <= hf {
            let cx = rng::uniform(rng_, cw / 2.0, wf - cw / 2.0);
            let cy = rng::uniform(rng_, ch / 2.0, hf - ch / 2.0);
            crop = Some((cx / wf, cy / hf, cw / wf, ch / hf));
            break;
        }
    }
    let (crop_cx, crop_cy, crop_w, crop_h) = crop.unwrap_or_else(|| {
        let side = (scale * wf * hf).sqrt().min(wf).min(hf);
        (0.5, 0.5, side / wf, side / hf)
    });

    let flipped = rng::coin(rng_, policy.flip_prob);

    let jitter_applied = rng::coin(rng_, policy.jitter_prob);
    let (jitter_factors, jitter_hue) = if jitter_applied {
        let mut f = [1.0; 3];
        for (i, fi) in f.iter_mut().enumerate() {
            let m = policy.jitter_max[i];
            *fi = rng::uniform(rng_, (1.0 - m).max(0.0), 1.0 + m);
        }
        let mh = policy.jitter_max[3];
        (f, rng::uniform(rng_, -mh, mh))
    } else {
        ([1.0, 1.0, 1.0], 0.0)
    };

    let grayscaled = rng::coin(rng_, policy.grayscale_prob);

    let blur_applied = rng::coin(rng_, policy.blur_prob);
    let blur_sigma = if blur_applied {
        rng::uniform(rng_, policy.blur_sigma[0], policy.blur_sigma[1])
    } else {
        0.0
    };

    Ok(AugmentationRecord {
        layout_version: OMEGA_LAYOUT_VERSION,
        crop_cx,
        crop_cy,
        crop_w,
        crop_h,
        flipped,
        jitter_applied,
        jitter_factors,
        jitter_hue,
        grayscaled,
        blur_applied,
        blur_sigma,
        color_diff: [0.0, 0.0, 0.0],
    })
}

/// Renders the view a record describes and fills in `record.color_diff` from
/// measurement. Pure in (image, record-parameters): replaying an
/// already-filled record reproduces both the pixels and the measurement
/// bit-exactly. Operations whose parameters are exactly identity are skipped,
/// so the identity record is a bit-exact copy at matching sizes.
pub fn apply_record(
    image: &Image,
    record: &mut AugmentationRecord,
    policy: &AugmentationPolicy,
) -> Result<Image> {
    record.validate()?;
    let (wf, hf) = (image.width() as f64, image.height() as f64);
    let cw = record.crop_w * wf;
    let ch = record.crop_h * hf;
    let left = record.crop_cx * wf - cw / 2.0;
    let top = record.crop_cy * hf - ch / 2.0;
    let mut view = image.crop_resize(left, top, cw, ch, policy.out_size)?;

    if record.flipped {
        view = view.flip_h();
    }

    if record.jitter_applied {
        let before = view.mean_rgb();
        let [b, c, s] = record.jitter_factors;
        if b != 1.0 {
            view = view.brightness(b);
        }
        if c != 1.0 {
            view = view.contrast(c);
        }
        if s != 1.0 {
            view = view.saturation(s);
        }
        if record.jitter_hue != 0.0 {
            view = view.hue_shift(record.jitter_hue);
        }
        let after = view.mean_rgb();
        record.color_diff = [
            (after[0] - before[0]).clamp(-1.0, 1.0),
            (after[1] - before[1]).clamp(-1.0, 1.0),
            (after[2] - before[2]).clamp(-1.0, 1.0),
        ];
    } else {
        record.color_diff = [0.0, 0.0, 0.0];
    }

    if record.grayscaled {
        view = view.grayscale();
    }
    if record.blur_applied {
        view = view.gaussian_blur(record.blur_sigma)?;
    }
    Ok(view)
}

/// Samples and renders two independent views of one image, the unit every
/// joint-embedding method consumes.
pub fn make_view_pair(
    image: &Image,
    policy: &AugmentationPolicy,
    rng_: &mut impl Rng,
) -> Result<((Image, AugmentationRecord), (Image, AugmentationRecord))> {
    let dims = (image.height(), image.width());
    let mut r1 = sample_record(policy, rng_, dims)?;
    let mut r2 = sample_record(policy, rng_, dims)?;
    let v1 = apply_record(image, &mut r1, policy)?;
    let v2 = apply_record(image, &mut r2, policy)?;
    Ok(((v1, r1), (v2, r2)))
}

/// Fixed-layout conditioning vector. Values live in `[0, 1]`; the layout
/// version travels with the vector so cached batches can be rejected when the
/// encoding changes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OmegaVector {
    pub values: [f64; OMEGA_DIM],
    pub layout_version: u32,
}

impl OmegaVector {
    pub fn as_f32(&self) -> [f32; OMEGA_DIM] {
        let mut out = [0.0f32; OMEGA_DIM];
        for (o, v) in out.iter_mut().zip(self.values.iter()) {
            *o = *v as f32;
        }
        out
    }
}

/// Encodes a record into ω under the policy whose sampling intervals define
/// the affine maps. Total on valid records.
pub fn encode_omega(record: &AugmentationRecord, policy: &AugmentationPolicy) -> OmegaVector {
    let mut v = [0.0f64; OMEGA_DIM];
    v[0] = record.crop_cx;
    v[1] = record.crop_cy;
    v[2] = record.crop_w;
    v[3] = record.crop_h;
    for i in 0..3 {
        let m = policy.jitter_max[i];
        v[4 + i] = if m == 0.0 {
            0.5
        } else {
            (record.jitter_factors[i] - (1.0 - m)) / (2.0 * m)
        };
    }
    let mh = policy.jitter_max[3];
    v[7] = if mh == 0.0 { 0.5 } else { (record.jitter_hue + mh) / (2.0 * mh) };
    v[8] = if record.blur_applied { record.blur_sigma / policy.blur_sigma[1] } else { 0.0 };
    v[9] = if record.flipped { 1.0 } else { 0.0 };
    v[10] = if record.grayscaled { 1.0 } else { 0.0 };
    for i in 0..3 {
        v[11 + i] = (record.color_diff[i] + 1.0) / 2.0;
    }
    for x in &mut v {
        *x = x.clamp(0.0, 1.0);
    }
    OmegaVector { values: v, layout_version: OMEGA_LAYOUT_VERSION }
}

/// Continuous augmentation parameters recovered from an ω vector. Inverse of
/// [`encode_omega`] up to the applied/identity distinction, which the
/// encoding deliberately collapses; exists to verify the encoding is
/// invertible, not for production use.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodedAugmentation {
    pub crop: [f64; 4],
    pub jitter_factors: [f64; 3],
    pub jitter_hue: f64,
    pub blur_sigma: f64,
    pub flipped: bool,
    pub grayscaled: bool,
    pub color_diff: [f64; 3],
}

pub fn decode_omega(omega: &OmegaVector, policy: &AugmentationPolicy) -> DecodedAugmentation {
    let v = &omega.values;
    let mut jf = [1.0f64; 3];
    for i in 0..3 {
        let m = policy.jitter_max[i];
        jf[i] = (1.0 - m) + v[4 + i] * 2.0 * m;
    }
    let mh = policy.jitter_max[3];
    DecodedAugmentation {
        crop: [v[0], v[1], v[2], v[3]],
        jitter_factors: jf,
        jitter_hue: v[7] * 2.0 * mh - mh,
        blur_sigma: v[8] * policy.blur_sigma[1],
        flipped: v[9] >= 0.5,
        grayscaled: v[10] >= 0.5,
        color_diff: [v[11] * 2.0 - 1.0, v[12] * 2.0 - 1.0, v[13] * 2.0 - 1.0],
    }
}

/// Serializes ω rows as 14 little-endian f32 each, the on-disk batch format.
pub fn omega_batch_to_bytes(rows: &[OmegaVector]) -> Vec<u8> {
    let mut out = Vec::with_capacity(rows.len() * OMEGA_DIM * 4);
    for row in rows {
        for v in row.as_f32() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn omega_batch_from_bytes(bytes: &[u8]) -> Result<Vec<OmegaVector>> {
    let row_bytes = OMEGA_DIM * 4;
    if bytes.len() % row_bytes != 0 {
        return Err(Error::data(format!(
            "omega batch of {} bytes is not a multiple of {row_bytes}",
            bytes.len()
        )));
    }
    let mut rows = Vec::with_capacity(bytes.len() / row_bytes);
    for chunk in bytes.chunks_exact(row_bytes) {
        let mut values = [0.0f64; OMEGA_DIM];
        for (i, b) in chunk.chunks_exact(4).enumerate() {
            values[i] = f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64;
        }
        rows.push(OmegaVector { values, layout_version: OMEGA_LAYOUT_VERSION });
    }
    Ok(rows)
}

//! Minimal float image type and the pixel operations the augmentation
//! pipeline is built from.
//!
//! Images are 3-channel, HWC, `f32` in `[0, 1]`. Every operation is pure and
//! deterministic; randomness lives entirely in the pipeline that decides which
//! operations to apply and with what parameters.

use crate::error::{Error, Result};

/// BT.601 luma weights, matching the grayscale convention of mainstream
/// augmentation libraries.
const LUMA: [f32; 3] = [0.299, 0.587, 0.114];

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    h: usize,
    w: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(h: usize, w: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != h * w * 3 {
            return Err(Error::shape(format!(
                "image buffer holds {} floats, expected {} for {h}x{w}x3",
                data.len(),
                h * w * 3
            )));
        }
        Ok(Image { h, w, data })
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        Image { h, w, data: vec![0.0; h * w * 3] }
    }

    pub fn from_fn(h: usize, w: usize, mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(h * w * 3);
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    data.push(f(y, x, c));
                }
            }
        }
        Image { h, w, data }
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.w + x) * 3 + c]
    }

    #[inline]
    fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        self.data[(y * self.w + x) * 3 + c] = v;
    }

    /// Per-channel mean in f64, used for jitter-effect measurement.
    pub fn mean_rgb(&self) -> [f64; 3] {
        let mut acc = [0.0f64; 3];
        for px in self.data.chunks_exact(3) {
            acc[0] += px[0] as f64;
            acc[1] += px[1] as f64;
            acc[2] += px[2] as f64;
        }
        let n = (self.h * self.w) as f64;
        [acc[0] / n, acc[1] / n, acc[2] / n]
    }

    /// Bilinear sample at continuous pixel-center coordinates, replicating
    /// edge pixels outside the frame.
    fn sample(&self, y: f64, x: f64, c: usize) -> f64 {
        let clamp = |v: i64, hi: usize| v.clamp(0, hi as i64 - 1) as usize;
        let x0f = x.floor();
        let y0f = y.floor();
        let fx = x - x0f;
        let fy = y - y0f;
        let x0 = clamp(x0f as i64, self.w);
        let x1 = clamp(x0f as i64 + 1, self.w);
        let y0 = clamp(y0f as i64, self.h);
        let y1 = clamp(y0f as i64 + 1, self.h);
        let p00 = self.get(y0, x0, c) as f64;
        let p01 = self.get(y0, x1, c) as f64;
        let p10 = self.get(y1, x0, c) as f64;
        let p11 = self.get(y1, x1, c) as f64;
        (1.0 - fy) * ((1.0 - fx) * p00 + fx * p01) + fy * ((1.0 - fx) * p10 + fx * p11)
    }

    /// Crops the rectangle whose left/top edges and size are given in
    /// edge-space pixels (the image spans `[0, w] x [0, h]`), resampling it to
    /// `out x out` with bilinear interpolation. A full-frame crop at matching
    /// size is an exact copy.
    pub fn crop_resize(&self, left: f64, top: f64, cw: f64, ch: f64, out: usize) -> Result<Image> {
        const TOL: f64 = 1e-9;
        if !(cw > 0.0 && ch > 0.0) {
            return Err(Error::data(format!("crop size {cw}x{ch} is not positive")));
        }
        if left < -TOL
            || top < -TOL
            || left + cw > self.w as f64 + TOL
            || top + ch > self.h as f64 + TOL
        {
            return Err(Error::data(format!(
                "crop [{left:.3}, {top:.3}, {cw:.3}, {ch:.3}] exceeds {}x{} image bounds",
                self.w, self.h
            )));
        }
        let mut dst = Image::zeros(out, out);
        for j in 0..out {
            let sy = top + (j as f64 + 0.5) * ch / out as f64 - 0.5;
            for i in 0..out {
                let sx = left + (i as f64 + 0.5) * cw / out as f64 - 0.5;
                for c in 0..3 {
                    dst.set(j, i, c, self.sample(sy, sx, c) as f32);
                }
            }
        }
        Ok(dst)
    }

    pub fn flip_h(&self) -> Image {
        Image::from_fn(self.h, self.w, |y, x, c| self.get(y, self.w - 1 - x, c))
    }

    /// Rotates by `k` quarter turns counterclockwise. Odd `k` swaps the axes.
    pub fn rotate90(&self, k: usize) -> Image {
        match k % 4 {
            0 => self.clone(),
            1 => Image::from_fn(self.w, self.h, |y, x, c| self.get(x, self.w - 1 - y, c)),
            2 => Image::from_fn(self.h, self.w, |y, x, c| {
                self.get(self.h - 1 - y, self.w - 1 - x, c)
            }),
            _ => Image::from_fn(self.w, self.h, |y, x, c| self.get(self.h - 1 - x, y, c)),
        }
    }

    pub fn brightness(&self, factor: f64) -> Image {
        let f = factor as f32;
        self.map(|v| (v * f).clamp(0.0, 1.0))
    }

    /// Blends toward the mean luma of the whole image, the usual contrast
    /// convention for photometric jitter.
    pub fn contrast(&self, factor: f64) -> Image {
        let mut mean = 0.0f64;
        for px in self.data.chunks_exact(3) {
            mean += (LUMA[0] * px[0] + LUMA[1] * px[1] + LUMA[2] * px[2]) as f64;
        }
        mean /= (self.h * self.w) as f64;
        let f = factor as f32;
        let base = ((1.0 - factor) * mean) as f32;
        self.map(|v| (f * v + base).clamp(0.0, 1.0))
    }

    /// Blends each pixel toward its own luma.
    pub fn saturation(&self, factor: f64) -> Image {
        let f = factor as f32;
        let mut out = self.clone();
        for px in out.data.chunks_exact_mut(3) {
            let l = LUMA[0] * px[0] + LUMA[1] * px[1] + LUMA[2] * px[2];
            for v in px.iter_mut() {
                *v = (f * *v + (1.0 - f) * l).clamp(0.0, 1.0);
            }
        }
        out
    }

    /// Shifts hue by `delta` turns (full circle = 1.0) through HSV space.
    pub fn hue_shift(&self, delta: f64) -> Image {
        let mut out = self.clone();
        for px in out.data.chunks_exact_mut(3) {
            let (h, s, v) = rgb_to_hsv(px[0] as f64, px[1] as f64, px[2] as f64);
            let (r, g, b) = hsv_to_rgb((h + delta).rem_euclid(1.0), s, v);
            px[0] = r.clamp(0.0, 1.0) as f32;
            px[1] = g.clamp(0.0, 1.0) as f32;
            px[2] = b.clamp(0.0, 1.0) as f32;
        }
        out
    }

    pub fn grayscale(&self) -> Image {
        let mut out = self.clone();
        for px in out.data.chunks_exact_mut(3) {
            let l = LUMA[0] * px[0] + LUMA[1] * px[1] + LUMA[2] * px[2];
            px.fill(l);
        }
        out
    }

    /// Separable Gaussian blur with replicate padding. The kernel extends to
    /// three standard deviations (at least one pixel).
    pub fn gaussian_blur(&self, sigma: f64) -> Result<Image> {
        if !(sigma > 0.0) {
            return Err(Error::data(format!("blur sigma {sigma} is not positive")));
        }
        let radius = ((3.0 * sigma).ceil() as usize).max(1);
        let mut kernel = Vec::with_capacity(2 * radius + 1);
        let mut total = 0.0f64;
        for i in -(radius as i64)..=(radius as i64) {
            let w = (-((i * i) as f64) / (2.0 * sigma * sigma)).exp();
            kernel.push(w);
            total += w;
        }
        for w in &mut kernel {
            *w /= total;
        }

        // Horizontal pass then vertical pass, accumulating in f64.
        let mut mid = Image::zeros(self.h, self.w);
        for y in 0..self.h {
            for x in 0..self.w {
                for c in 0..3 {
                    let mut acc = 0.0f64;
                    for (ki, kw) in kernel.iter().enumerate() {
                        let sx = (x as i64 + ki as i64 - radius as i64)
                            .clamp(0, self.w as i64 - 1) as usize;
                        acc += kw * self.get(y, sx, c) as f64;
                    }
                    mid.set(y, x, c, acc as f32);
                }
            }
        }
        let mut out = Image::zeros(self.h, self.w);
        for y in 0..self.h {
            for x in 0..self.w {
                for c in 0..3 {
                    let mut acc = 0.0f64;
                    for (ki, kw) in kernel.iter().enumerate() {
                        let sy = (y as i64 + ki as i64 - radius as i64)
                            .clamp(0, self.h as i64 - 1) as usize;
                        acc += kw * mid.get(sy, x, c) as f64;
                    }
                    out.set(y, x, c, acc as f32);
                }
            }
        }
        Ok(out)
    }

    fn map(&self, f: impl Fn(f32) -> f32) -> Image {
        Image {
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let maxc = r.max(g).max(b);
    let minc = r.min(g).min(b);
    let v = maxc;
    let cr = maxc - minc;
    if cr <= 0.0 {
        return (0.0, 0.0, v);
    }
    let s = cr / maxc;
    let h = if maxc == r {
        (g - b) / cr
    } else if maxc == g {
        2.0 + (b - r) / cr
    } else {
        4.0 + (r - g) / cr
    };
    ((h / 6.0).rem_euclid(1.0), s, v)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match (i as i64).rem_euclid(6) {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

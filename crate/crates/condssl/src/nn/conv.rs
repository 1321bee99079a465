//! 3x3 convolution (stride 1, zero padding 1) via im2col, plus the two
//! pooling layers the backbones use.
//!
//! Feature maps are channel-last: a batch is an `[n*h*w, c]` matrix whose row
//! `(i*h + y)*w + x` holds the channel vector of pixel `(y, x)` of image `i`.
//! This keeps im2col gathers contiguous and turns the whole-batch convolution
//! into a single gemm.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;

use super::{Scalar, Tensors, Trainable};
use crate::image::Image;
use crate::rng;

/// Channel-last batch of feature maps.
#[derive(Debug, Clone)]
pub struct Tensor4<F: Scalar> {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    /// `[n*h*w, c]`, pixel rows in image-major, row-major order.
    pub data: Array2<F>,
}

impl<F: Scalar> Tensor4<F> {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Tensor4 { n, c, h, w, data: Array2::zeros((n * h * w, c)) }
    }

    /// Packs images (3-channel, equal size) into a batch tensor.
    pub fn from_images(images: &[Image]) -> Self {
        assert!(!images.is_empty());
        let (h, w) = (images[0].height(), images[0].width());
        let mut data = Array2::zeros((images.len() * h * w, 3));
        for (i, img) in images.iter().enumerate() {
            assert_eq!((img.height(), img.width()), (h, w), "mixed sizes in batch");
            let mut rows = data.slice_mut(ndarray::s![i * h * w..(i + 1) * h * w, ..]);
            for (dst, px) in rows.rows_mut().into_iter().zip(img.data().chunks_exact(3)) {
                let mut it = dst.into_iter();
                *it.next().unwrap() = F::from_f64_(px[0] as f64);
                *it.next().unwrap() = F::from_f64_(px[1] as f64);
                *it.next().unwrap() = F::from_f64_(px[2] as f64);
            }
        }
        Tensor4 { n: images.len(), c: 3, h, w, data }
    }

    /// Concatenates two batches along the sample axis (equal geometry).
    pub fn stack(&self, other: &Tensor4<F>) -> Tensor4<F> {
        assert_eq!(
            (self.c, self.h, self.w),
            (other.c, other.h, other.w),
            "stacked batches must share geometry"
        );
        let data = ndarray::concatenate(ndarray::Axis(0), &[self.data.view(), other.data.view()])
            .expect("matching widths");
        Tensor4 { n: self.n + other.n, c: self.c, h: self.h, w: self.w, data }
    }

    /// Splits a stacked batch back into its two halves.
    pub fn split_half(&self) -> (Tensor4<F>, Tensor4<F>) {
        assert!(self.n % 2 == 0, "split_half needs an even batch");
        let half = self.n / 2;
        let rows = half * self.h * self.w;
        let a = self.data.slice(ndarray::s![..rows, ..]).to_owned();
        let b = self.data.slice(ndarray::s![rows.., ..]).to_owned();
        (
            Tensor4 { n: half, c: self.c, h: self.h, w: self.w, data: a },
            Tensor4 { n: half, c: self.c, h: self.h, w: self.w, data: b },
        )
    }
}

/// 3x3, stride 1, zero-pad 1 convolution. Weights are `[out_c, 9*in_c]`,
/// neighbor-major (row offset then column offset) and channel-minor, matching
/// the im2col layout.
#[derive(Debug, Clone)]
pub struct Conv2d<F: Scalar> {
    pub w: Array2<F>,
    pub b: Array1<F>,
    pub gw: Array2<F>,
    pub gb: Array1<F>,
    pub in_c: usize,
    pub out_c: usize,
}

impl<F: Scalar> Conv2d<F> {
    pub fn new(in_c: usize, out_c: usize, rng_: &mut impl Rng) -> Self {
        let fan_in = 9 * in_c;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut draw = || F::from_f64_(rng::uniform(rng_, -bound, bound));
        let w = Array2::from_shape_fn((out_c, fan_in), |_| draw());
        let b = Array1::from_shape_fn(out_c, |_| draw());
        Conv2d {
            gw: Array2::zeros(w.raw_dim()),
            gb: Array1::zeros(b.raw_dim()),
            w,
            b,
            in_c,
            out_c,
        }
    }

    fn im2col(&self, x: &Tensor4<F>) -> Array2<F> {
        let (n, c, h, w) = (x.n, x.c, x.h, x.w);
        let mut cols = Array2::zeros((n * h * w, 9 * c));
        let src = x.data.as_slice().unwrap();
        let dst = cols.as_slice_mut().unwrap();
        let row_len = 9 * c;
        for i in 0..n {
            let base = i * h * w;
            for y in 0..h {
                for xx in 0..w {
                    let out_row = (base + y * w + xx) * row_len;
                    for (k, (dy, dx)) in NEIGHBORS.iter().enumerate() {
                        let sy = y as i64 + dy;
                        let sx = xx as i64 + dx;
                        if sy < 0 || sy >= h as i64 || sx < 0 || sx >= w as i64 {
                            continue; // stays zero
                        }
                        let src_row = (base + sy as usize * w + sx as usize) * c;
                        dst[out_row + k * c..out_row + (k + 1) * c]
                            .copy_from_slice(&src[src_row..src_row + c]);
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, dcols: &Array2<F>, n: usize, h: usize, w: usize) -> Tensor4<F> {
        let c = self.in_c;
        let mut dx = Tensor4::zeros(n, c, h, w);
        let dst = dx.data.as_slice_mut().unwrap();
        let src = dcols.as_slice().unwrap();
        let row_len = 9 * c;
        for i in 0..n {
            let base = i * h * w;
            for y in 0..h {
                for xx in 0..w {
                    let col_row = (base + y * w + xx) * row_len;
                    for (k, (dy, dxo)) in NEIGHBORS.iter().enumerate() {
                        let sy = y as i64 + dy;
                        let sx = xx as i64 + dxo;
                        if sy < 0 || sy >= h as i64 || sx < 0 || sx >= w as i64 {
                            continue;
                        }
                        let dst_row = (base + sy as usize * w + sx as usize) * c;
                        for j in 0..c {
                            dst[dst_row + j] = dst[dst_row + j] + src[col_row + k * c + j];
                        }
                    }
                }
            }
        }
        dx
    }

    pub fn forward(&self, x: &Tensor4<F>) -> (Tensor4<F>, Array2<F>) {
        assert_eq!(x.c, self.in_c, "channel mismatch");
        let cols = self.im2col(x);
        let out = cols.dot(&self.w.t()) + &self.b;
        (
            Tensor4 { n: x.n, c: self.out_c, h: x.h, w: x.w, data: out },
            cols,
        )
    }

    /// Consumes the cached im2col matrix from `forward`.
    pub fn backward(&mut self, cols: &Array2<F>, dy: &Tensor4<F>) -> Tensor4<F> {
        self.gw += &dy.data.t().dot(cols);
        self.gb += &dy.data.sum_axis(Axis(0));
        let dcols = dy.data.dot(&self.w);
        self.col2im(&dcols, dy.n, dy.h, dy.w)
    }
}

/// Neighbor offsets in kernel order: row offset outer, column offset inner.
const NEIGHBORS: [(i64, i64); 9] = [
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, -1),
    (0, 0),
    (0, 1),
    (1, -1),
    (1, 0),
    (1, 1),
];

impl<F: Scalar> Tensors<F> for Conv2d<F> {
    fn tensors(&self, f: &mut dyn FnMut(&str, &[F])) {
        f("w", self.w.as_slice().unwrap());
        f("b", self.b.as_slice().unwrap());
    }
    fn tensors_mut(&mut self, f: &mut dyn FnMut(&str, &mut [F])) {
        f("w", self.w.as_slice_mut().unwrap());
        f("b", self.b.as_slice_mut().unwrap());
    }
}

impl<F: Scalar> Trainable<F> for Conv2d<F> {
    fn params_and_grads(&mut self, f: &mut dyn FnMut(&str, &mut [F], &mut [F])) {
        f("w", self.w.as_slice_mut().unwrap(), self.gw.as_slice_mut().unwrap());
        f("b", self.b.as_slice_mut().unwrap(), self.gb.as_slice_mut().unwrap());
    }
}

/// 2x2 average pool, stride 2. Requires even spatial dims.
pub struct AvgPool2;

impl AvgPool2 {
    pub fn forward<F: Scalar>(x: &Tensor4<F>) -> Tensor4<F> {
        assert!(x.h % 2 == 0 && x.w % 2 == 0, "avg pool needs even dims, got {}x{}", x.h, x.w);
        let (oh, ow) = (x.h / 2, x.w / 2);
        let mut out = Tensor4::zeros(x.n, x.c, oh, ow);
        let quarter = F::from_f64_(0.25);
        for i in 0..x.n {
            for y in 0..oh {
                for xx in 0..ow {
                    let orow = (i * oh + y) * ow + xx;
                    for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let irow = (i * x.h + 2 * y + dy) * x.w + 2 * xx + dx;
                        let src = x.data.row(irow).to_owned();
                        let mut dst = out.data.row_mut(orow);
                        dst += &src;
                    }
                    out.data.row_mut(orow).mapv_inplace(|v| v * quarter);
                }
            }
        }
        out
    }

    pub fn backward<F: Scalar>(dy: &Tensor4<F>, in_h: usize, in_w: usize) -> Tensor4<F> {
        let mut dx = Tensor4::zeros(dy.n, dy.c, in_h, in_w);
        let quarter = F::from_f64_(0.25);
        for i in 0..dy.n {
            for y in 0..dy.h {
                for xx in 0..dy.w {
                    let orow = (i * dy.h + y) * dy.w + xx;
                    let g = dy.data.row(orow).mapv(|v| v * quarter);
                    for (dyo, dxo) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let irow = (i * in_h + 2 * y + dyo) * in_w + 2 * xx + dxo;
                        let mut dst = dx.data.row_mut(irow);
                        dst += &g;
                    }
                }
            }
        }
        dx
    }
}

/// Mean over all pixels of each image, `[n*h*w, c] -> [n, c]`.
pub struct GlobalAvgPool;

impl GlobalAvgPool {
    pub fn forward<F: Scalar>(x: &Tensor4<F>) -> Array2<F> {
        let mut out = Array2::zeros((x.n, x.c));
        let scale = F::from_f64_(1.0 / (x.h * x.w) as f64);
        for i in 0..x.n {
            let block = x.data.slice(ndarray::s![i * x.h * x.w..(i + 1) * x.h * x.w, ..]);
            let mut dst = out.row_mut(i);
            // Ordered accumulation: sum rows in index order for determinism.
            for row in block.rows() {
                dst += &row;
            }
            dst.mapv_inplace(|v| v * scale);
        }
        out
    }

    pub fn backward<F: Scalar>(dy: &Array2<F>, h: usize, w: usize) -> Tensor4<F> {
        let n = dy.nrows();
        let c = dy.ncols();
        let scale = F::from_f64_(1.0 / (h * w) as f64);
        let mut dx = Tensor4::zeros(n, c, h, w);
        for i in 0..n {
            let g = dy.row(i).mapv(|v| v * scale);
            let mut block = dx.data.slice_mut(ndarray::s![i * h * w..(i + 1) * h * w, ..]);
            for mut row in block.rows_mut() {
                row.assign(&g);
            }
        }
        dx
    }
}

/// ReLU on a feature-map batch, returning the mask source (the output itself).
pub fn relu_inplace<F: Scalar>(x: &mut Tensor4<F>) {
    x.data.mapv_inplace(|v| if v > F::zero() { v } else { F::zero() });
}

/// Masks `grad` where the cached post-ReLU output is zero.
pub fn relu_backward_inplace<F: Scalar>(grad: &mut Tensor4<F>, post: &Tensor4<F>) {
    grad.data.zip_mut_with(&post.data, |g, &a| {
        if a <= F::zero() {
            *g = F::zero();
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::max_rel_err_fd;
    use crate::nn::{grads_flat, params_flat, set_params_flat};
    use crate::rng::{stream, uniform};

    fn rand_tensor(seed: u64, n: usize, c: usize, h: usize, w: usize) -> Tensor4<f64> {
        let mut r = stream(seed, "conv-x", &[]);
        let data = Array2::from_shape_fn((n * h * w, c), |_| uniform(&mut r, -1.0, 1.0));
        Tensor4 { n, c, h, w, data }
    }

    #[test]
    fn conv_matches_naive_reference() {
        let mut r = stream(1, "conv", &[]);
        let conv: Conv2d<f64> = Conv2d::new(2, 3, &mut r);
        let x = rand_tensor(2, 2, 2, 5, 4);
        let (y, _) = conv.forward(&x);

        // Naive nested-loop convolution with zero padding.
        for i in 0..x.n {
            for oy in 0..x.h {
                for ox in 0..x.w {
                    for oc in 0..conv.out_c {
                        let mut acc = conv.b[oc];
                        for (k, (dy, dx)) in NEIGHBORS.iter().enumerate() {
                            let sy = oy as i64 + dy;
                            let sx = ox as i64 + dx;
                            if sy < 0 || sy >= x.h as i64 || sx < 0 || sx >= x.w as i64 {
                                continue;
                            }
                            for ic in 0..x.c {
                                let row = (i * x.h + sy as usize) * x.w + sx as usize;
                                acc += conv.w[[oc, k * x.c + ic]] * x.data[[row, ic]];
                            }
                        }
                        let row = (i * x.h + oy) * x.w + ox;
                        assert!((y.data[[row, oc]] - acc).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut r = stream(3, "conv-grad", &[]);
        let conv: Conv2d<f64> = Conv2d::new(2, 2, &mut r);
        let x = rand_tensor(4, 1, 2, 4, 4);
        let proj = Array2::from_shape_fn((x.n * x.h * x.w, 2), |_| uniform(&mut r, -1.0, 1.0));

        let mut m = conv.clone();
        m.zero_grads_all();
        let (_, cols) = m.forward(&x);
        let dy = Tensor4 { n: x.n, c: 2, h: x.h, w: x.w, data: proj.clone() };
        let dx = m.backward(&cols, &dy);
        let analytic_p = grads_flat(&mut m);

        let theta0 = params_flat(&mut conv.clone());
        let mut loss_p = |t: &[f64]| {
            let mut m = conv.clone();
            set_params_flat(&mut m, t);
            (&m.forward(&x).0.data * &proj).sum()
        };
        assert!(max_rel_err_fd(&mut loss_p, &theta0, &analytic_p) < 1e-6);

        let x0: Vec<f64> = x.data.iter().copied().collect();
        let an_x: Vec<f64> = dx.data.iter().copied().collect();
        let mut loss_x = |xf: &[f64]| {
            let xa = Tensor4 {
                n: x.n,
                c: x.c,
                h: x.h,
                w: x.w,
                data: Array2::from_shape_vec((x.n * x.h * x.w, x.c), xf.to_vec()).unwrap(),
            };
            (&conv.forward(&xa).0.data * &proj).sum()
        };
        assert!(max_rel_err_fd(&mut loss_x, &x0, &an_x) < 1e-6);
    }

    #[test]
    fn avg_pool_halves_and_inverts() {
        let x = rand_tensor(5, 1, 3, 4, 4);
        let y = AvgPool2::forward(&x);
        assert_eq!((y.h, y.w), (2, 2));
        // Mean of the four source pixels.
        let got = y.data[[0, 0]];
        let want = (x.data[[0, 0]] + x.data[[1, 0]] + x.data[[4, 0]] + x.data[[5, 0]]) / 4.0;
        assert!((got - want).abs() < 1e-12);

        // Backward distributes evenly: FD check on a random scalarization.
        let proj = Array2::from_shape_fn(y.data.raw_dim(), |_| 0.3);
        let dy = Tensor4 { n: y.n, c: y.c, h: y.h, w: y.w, data: proj.clone() };
        let dx = AvgPool2::backward(&dy, x.h, x.w);
        let x0: Vec<f64> = x.data.iter().copied().collect();
        let an: Vec<f64> = dx.data.iter().copied().collect();
        let mut loss = |xf: &[f64]| {
            let xa = Tensor4 {
                n: x.n,
                c: x.c,
                h: x.h,
                w: x.w,
                data: Array2::from_shape_vec((x.n * x.h * x.w, x.c), xf.to_vec()).unwrap(),
            };
            (&AvgPool2::forward(&xa).data * &proj).sum()
        };
        assert!(max_rel_err_fd(&mut loss, &x0, &an) < 1e-8);
    }

    #[test]
    fn global_pool_is_the_mean() {
        let x = rand_tensor(6, 2, 3, 4, 4);
        let y = GlobalAvgPool::forward(&x);
        assert_eq!(y.dim(), (2, 3));
        let mut want = 0.0;
        for row in 0..16 {
            want += x.data[[row, 1]];
        }
        assert!((y[[0, 1]] - want / 16.0).abs() < 1e-12);
    }
}

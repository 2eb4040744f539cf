//! Convolution, batch normalization and ReLU with explicit backward passes.
//!
//! Activations inside the network are stored channel-major as `[C, N, H, W]`
//! so a convolution is a single GEMM over an im2col matrix whose columns span
//! the whole batch.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, Array4, ArrayD, ArrayView2, ArrayViewMut2, Axis, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::params::{Grads, ParamId, ParamKind, ParamStore};
use super::Scalar;

/// Channel-major activation tensor `[C, N, H, W]`.
pub type Act<F> = Array4<F>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in normalization layers.
    Train,
    /// Frozen running statistics; a pure function of parameters and input.
    Eval,
}

#[inline]
fn out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    /// Registers a He-normal initialised `kernel x kernel` convolution.
    pub fn new<F: Scalar, R: Rng>(
        store: &mut ParamStore<F>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = (in_ch * kernel * kernel) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("valid std");
        let w = Array4::from_shape_simple_fn((out_ch, in_ch, kernel, kernel), || {
            F::of(normal.sample(rng))
        });
        let weight = store.push(format!("{name}.weight"), ParamKind::Weight, w.into_dyn());
        Self {
            weight,
            in_ch,
            out_ch,
            kernel,
            stride,
            pad: kernel / 2,
        }
    }

    fn weight_matrix<'a, F: Scalar>(&self, store: &'a ParamStore<F>) -> ArrayView2<'a, F> {
        let k = self.in_ch * self.kernel * self.kernel;
        store
            .value(self.weight)
            .view()
            .into_shape_with_order((self.out_ch, k))
            .expect("contiguous conv weight")
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            out_extent(h, self.kernel, self.stride, self.pad),
            out_extent(w, self.kernel, self.stride, self.pad),
        )
    }

    pub fn forward<F: Scalar>(&self, store: &ParamStore<F>, x: &Act<F>) -> Act<F> {
        let (_, n, h, w) = x.dim();
        let (ho, wo) = self.output_hw(h, w);
        let cols = im2col(x, self.kernel, self.stride, self.pad, ho, wo);
        let mut out = Array2::<F>::zeros((self.out_ch, n * ho * wo));
        general_mat_mul(F::one(), &self.weight_matrix(store), &cols, F::zero(), &mut out);
        out.into_shape_with_order((self.out_ch, n, ho, wo))
            .expect("gemm output is contiguous")
    }

    /// Accumulates the weight gradient and returns the input gradient.
    pub fn backward<F: Scalar>(
        &self,
        store: &ParamStore<F>,
        x: &Act<F>,
        dy: &Act<F>,
        grads: &mut Grads<F>,
    ) -> Act<F> {
        let (c, n, h, w) = x.dim();
        let (_, _, ho, wo) = dy.dim();
        let cols = im2col(x, self.kernel, self.stride, self.pad, ho, wo);
        let dy2 = dy
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((self.out_ch, n * ho * wo))
            .expect("contiguous");
        {
            let k = self.in_ch * self.kernel * self.kernel;
            let g = grads.get_mut(self.weight);
            let mut g2: ArrayViewMut2<F> = g
                .view_mut()
                .into_shape_with_order((self.out_ch, k))
                .expect("contiguous grad");
            general_mat_mul(F::one(), &dy2, &cols.t(), F::one(), &mut g2);
        }
        let mut dcols = Array2::<F>::zeros(cols.dim());
        general_mat_mul(F::one(), &self.weight_matrix(store).t(), &dy2, F::zero(), &mut dcols);
        col2im(&dcols, (c, n, h, w), self.kernel, self.stride, self.pad, ho, wo)
    }
}

/// Unfolds `[C, N, H, W]` into `[C*k*k, N*Ho*Wo]` with zero padding.
pub fn im2col<F: Scalar>(
    x: &Act<F>,
    kernel: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Array2<F> {
    let (c, n, h, w) = x.dim();
    let x = x.as_standard_layout();
    let xs = x.as_slice().expect("standard layout");
    let ncols = n * ho * wo;
    let mut cols = Array2::<F>::zeros((c * kernel * kernel, ncols));
    let cs = cols.as_slice_mut().expect("fresh array");
    for ci in 0..c {
        for ki in 0..kernel {
            for kj in 0..kernel {
                let row = (ci * kernel + ki) * kernel + kj;
                let dst_row = &mut cs[row * ncols..(row + 1) * ncols];
                for ni in 0..n {
                    let src = &xs[(ci * n + ni) * h * w..(ci * n + ni + 1) * h * w];
                    for oy in 0..ho {
                        let iy = (oy * stride + ki) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src_row = &src[iy as usize * w..(iy as usize + 1) * w];
                        let dst = &mut dst_row[(ni * ho + oy) * wo..(ni * ho + oy + 1) * wo];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * stride + kj) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                *d = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input grid.
pub fn col2im<F: Scalar>(
    cols: &Array2<F>,
    (c, n, h, w): (usize, usize, usize, usize),
    kernel: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Act<F> {
    let ncols = n * ho * wo;
    let cs = cols.as_slice().expect("standard layout");
    let mut x = Array4::<F>::zeros((c, n, h, w));
    let xs = x.as_slice_mut().expect("fresh array");
    for ci in 0..c {
        for ki in 0..kernel {
            for kj in 0..kernel {
                let row = (ci * kernel + ki) * kernel + kj;
                let src_row = &cs[row * ncols..(row + 1) * ncols];
                for ni in 0..n {
                    let dst = &mut xs[(ci * n + ni) * h * w..(ci * n + ni + 1) * h * w];
                    for oy in 0..ho {
                        let iy = (oy * stride + ki) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst_row = &mut dst[iy as usize * w..(iy as usize + 1) * w];
                        let src = &src_row[(ni * ho + oy) * wo..(ni * ho + oy + 1) * wo];
                        for (ox, &s) in src.iter().enumerate() {
                            let ix = (ox * stride + kj) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                dst_row[ix as usize] += s;
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone)]
pub struct BnCache<F> {
    xhat: Act<F>,
    inv_std: Array1<F>,
    mode: Mode,
}

impl BatchNorm {
    pub fn new<F: Scalar>(store: &mut ParamStore<F>, name: &str, channels: usize) -> Self {
        let ones = || ArrayD::<F>::from_elem(IxDyn(&[channels]), F::one());
        let zeros = || ArrayD::<F>::zeros(IxDyn(&[channels]));
        Self {
            gamma: store.push(format!("{name}.gamma"), ParamKind::NormScale, ones()),
            beta: store.push(format!("{name}.beta"), ParamKind::NormShift, zeros()),
            running_mean: store.push(format!("{name}.running_mean"), ParamKind::Buffer, zeros()),
            running_var: store.push(format!("{name}.running_var"), ParamKind::Buffer, ones()),
            channels,
        }
    }

    pub fn forward<F: Scalar>(
        &self,
        store: &ParamStore<F>,
        x: Act<F>,
        mode: Mode,
    ) -> (Act<F>, BnCache<F>, Option<(Array1<F>, Array1<F>)>) {
        let gamma = store.value(self.gamma);
        let beta = store.value(self.beta);
        let eps = F::of(BN_EPS);
        let per_channel = x.len() / self.channels;
        let mut xhat = x;
        let mut inv_std = Array1::<F>::zeros(self.channels);
        let mut y = Array4::<F>::zeros(xhat.dim());
        let mut stats = None;
        let mut means = Array1::<F>::zeros(self.channels);
        let mut vars = Array1::<F>::zeros(self.channels);
        for (c, (mut xc, mut yc)) in xhat
            .axis_iter_mut(Axis(0))
            .zip(y.axis_iter_mut(Axis(0)))
            .enumerate()
        {
            let (mean, inv) = match mode {
                Mode::Train => {
                    let m = F::of(per_channel as f64);
                    let mean = xc.iter().copied().sum::<F>() / m;
                    let var = xc.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / m;
                    means[c] = mean;
                    vars[c] = if per_channel > 1 {
                        var * m / F::of((per_channel - 1) as f64)
                    } else {
                        var
                    };
                    (mean, F::one() / (var + eps).sqrt())
                }
                Mode::Eval => {
                    let rm = store.value(self.running_mean)[c];
                    let rv = store.value(self.running_var)[c];
                    (rm, F::one() / (rv + eps).sqrt())
                }
            };
            inv_std[c] = inv;
            let (g, b) = (gamma[c], beta[c]);
            for (xv, yv) in xc.iter_mut().zip(yc.iter_mut()) {
                *xv = (*xv - mean) * inv;
                *yv = g * *xv + b;
            }
        }
        if mode == Mode::Train {
            stats = Some((means, vars));
        }
        (
            y,
            BnCache {
                xhat,
                inv_std,
                mode,
            },
            stats,
        )
    }

    pub fn backward<F: Scalar>(
        &self,
        store: &ParamStore<F>,
        cache: &BnCache<F>,
        dy: &Act<F>,
        grads: &mut Grads<F>,
    ) -> Act<F> {
        let gamma = store.value(self.gamma);
        let per_channel = dy.len() / self.channels;
        let m = F::of(per_channel as f64);
        let mut dx = Array4::<F>::zeros(dy.dim());
        for c in 0..self.channels {
            let dyc = dy.index_axis(Axis(0), c);
            let xh = cache.xhat.index_axis(Axis(0), c);
            let dbeta: F = dyc.iter().copied().sum();
            let dgamma: F = dyc.iter().zip(xh.iter()).map(|(&d, &x)| d * x).sum();
            grads.get_mut(self.gamma)[c] += dgamma;
            grads.get_mut(self.beta)[c] += dbeta;
            let scale = gamma[c] * cache.inv_std[c];
            let mut dxc = dx.index_axis_mut(Axis(0), c);
            match cache.mode {
                Mode::Train => {
                    for ((o, &d), &x) in dxc.iter_mut().zip(dyc.iter()).zip(xh.iter()) {
                        *o = scale / m * (m * d - dbeta - x * dgamma);
                    }
                }
                Mode::Eval => {
                    for (o, &d) in dxc.iter_mut().zip(dyc.iter()) {
                        *o = scale * d;
                    }
                }
            }
        }
        dx
    }

}

pub fn relu_inplace<F: Scalar>(x: &mut Act<F>) {
    x.mapv_inplace(|v| if v > F::zero() { v } else { F::zero() });
}

/// Gradient of ReLU given its output.
pub fn relu_backward<F: Scalar>(out: &Act<F>, dy: &Act<F>) -> Act<F> {
    let mut dx = dy.clone();
    ndarray::Zip::from(&mut dx).and(out).for_each(|d, &o| {
        if o <= F::zero() {
            *d = F::zero();
        }
    });
    dx
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Uniform `±1/sqrt(in_dim)` initialisation for weights and bias.
    pub fn new<F: Scalar, R: Rng>(
        store: &mut ParamStore<F>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let mut draw = || F::of(rng.random_range(-bound..bound));
        let w = Array2::from_shape_simple_fn((out_dim, in_dim), &mut draw);
        let b = Array1::from_shape_simple_fn(out_dim, &mut draw);
        Self {
            weight: store.push(format!("{name}.weight"), ParamKind::Weight, w.into_dyn()),
            bias: store.push(format!("{name}.bias"), ParamKind::Bias, b.into_dyn()),
            in_dim,
            out_dim,
        }
    }

    fn w<'a, F: Scalar>(&self, store: &'a ParamStore<F>) -> ArrayView2<'a, F> {
        store
            .value(self.weight)
            .view()
            .into_dimensionality()
            .expect("2-d dense weight")
    }

    /// `x` is `[N, in]`; returns `[N, out]`.
    pub fn forward<F: Scalar>(&self, store: &ParamStore<F>, x: &Array2<F>) -> Array2<F> {
        let mut y = x.dot(&self.w(store).t());
        let b = store.value(self.bias);
        for mut row in y.rows_mut() {
            for (v, &bb) in row.iter_mut().zip(b.iter()) {
                *v += bb;
            }
        }
        y
    }

    pub fn backward<F: Scalar>(
        &self,
        store: &ParamStore<F>,
        x: &Array2<F>,
        dy: &Array2<F>,
        grads: &mut Grads<F>,
    ) -> Array2<F> {
        let dw = dy.t().dot(x);
        *grads.get_mut(self.weight) += &dw.into_dyn();
        let db = dy.sum_axis(Axis(0));
        *grads.get_mut(self.bias) += &db.into_dyn();
        dy.dot(&self.w(store))
    }
}

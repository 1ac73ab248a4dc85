//! Minimal neural-network toolkit: tensors with gradients, the three layer
//! kinds the surrogate needs (fully connected, 1-D convolution, nearest
//! upsampling), and an Adam optimizer.
//!
//! Everything is generic over [`Scalar`] so the same layer code runs in
//! 32-bit for training speed and in 64-bit for the finite-difference
//! gradient checks in the test suite. Matrix products go through `ndarray`'s
//! `dot`, which dispatches to a blocked SIMD GEMM for both float widths;
//! convolutions are lowered to GEMM via im2col. There is no autograd: each
//! layer exposes an explicit `backward` taking the saved forward
//! intermediates, and the derivations are pinned by finite-difference tests
//! below.

use ndarray::{Array2, Array3, ArrayD, Axis, IxDyn};
use rand::Rng;

/// Training allocates and frees the same tens-of-MB im2col and trace
/// buffers every batch. Above glibc's default mmap threshold each such
/// cycle is a fresh mmap/munmap — page zeroing dominates the epoch time.
/// Raising the threshold (and matching trim threshold) once lets the
/// allocator recycle those buffers; resident memory settles at the
/// per-batch high-water mark instead of thrashing the page tables.
#[cfg(target_os = "linux")]
pub(crate) fn retain_large_allocations() {
    use std::sync::Once;
    static ONCE: Once = Once::new();
    ONCE.call_once(|| unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 1 << 30);
        libc::mallopt(libc::M_TRIM_THRESHOLD, 1 << 30);
    });
}

#[cfg(not(target_os = "linux"))]
pub(crate) fn retain_large_allocations() {}

/// Float type the network code is generic over (`f32` or `f64`).
pub trait Scalar:
    num_traits::Float
    + ndarray::LinalgScalar
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> f32 {
        v as f32
    }
    fn to_f64(self) -> f64 {
        f64::from(self)
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> f64 {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// A named parameter array together with its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Tensor<T> {
    pub name: &'static str,
    pub value: ArrayD<T>,
    pub grad: ArrayD<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(name: &'static str, value: ArrayD<T>) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        Tensor { name, value, grad }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }
}

/// Uniform fan-in initialization: U(−1/√fan_in, 1/√fan_in), applied to both
/// weights and biases.
fn init_uniform<T: Scalar, R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> ArrayD<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    ArrayD::from_shape_simple_fn(IxDyn(shape), || {
        T::from_f64(rng.random_range(-bound..bound))
    })
}

// ---------------------------------------------------------------------------
// Fully connected layer
// ---------------------------------------------------------------------------

/// y = x Wᵀ + b over a batch (rows of x).
#[derive(Debug, Clone)]
pub struct Linear<T> {
    /// Weight, shape (out, in).
    pub w: Tensor<T>,
    /// Bias, shape (out,).
    pub b: Tensor<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new<R: Rng>(name: &'static str, in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        Linear {
            w: Tensor::new(
                Box::leak(format!("{name}.w").into_boxed_str()),
                init_uniform(&[out_dim, in_dim], in_dim, rng),
            ),
            b: Tensor::new(
                Box::leak(format!("{name}.b").into_boxed_str()),
                init_uniform(&[out_dim], in_dim, rng),
            ),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w.value.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.w.value.shape()[0]
    }

    pub fn forward(&self, x: &Array2<T>) -> Array2<T> {
        let w = self.w.value.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let b = self.b.value.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let mut y = x.dot(&w.t());
        for mut row in y.rows_mut() {
            row += &b;
        }
        y
    }

    /// Accumulates parameter gradients; returns the gradient w.r.t. x.
    pub fn backward(&mut self, x: &Array2<T>, dy: &Array2<T>) -> Array2<T> {
        let w = self.w.value.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let dx = dy.dot(&w);
        let dw = dy.t().dot(x);
        let mut gw = self
            .w
            .grad
            .view_mut()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        gw += &dw;
        let mut gb = self
            .b
            .grad
            .view_mut()
            .into_dimensionality::<ndarray::Ix1>()
            .unwrap();
        gb += &dy.sum_axis(Axis(0));
        dx
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        vec![&mut self.w, &mut self.b]
    }

    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        vec![&self.w, &self.b]
    }
}

// ---------------------------------------------------------------------------
// 1-D convolution
// ---------------------------------------------------------------------------

/// Output length of a 1-D convolution with symmetric zero padding.
pub fn conv_out_len(l: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (l + 2 * pad - kernel) / stride + 1
}

/// 1-D convolution over (batch, channels, length), kernel size odd,
/// zero padding kernel/2 ("same" length at stride 1, halving at stride 2).
/// Lowered to a single GEMM per call via im2col.
#[derive(Debug, Clone)]
pub struct Conv1d<T> {
    /// Kernel flattened to (c_out, c_in·k).
    pub w: Tensor<T>,
    /// Bias, shape (c_out,).
    pub b: Tensor<T>,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl<T: Scalar> Conv1d<T> {
    pub fn new<R: Rng>(
        name: &'static str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        assert!(kernel % 2 == 1, "kernel size must be odd");
        assert!(stride == 1 || stride == 2, "only strides 1 and 2 are used");
        let fan_in = c_in * kernel;
        Conv1d {
            w: Tensor::new(
                Box::leak(format!("{name}.w").into_boxed_str()),
                init_uniform(&[c_out, fan_in], fan_in, rng),
            ),
            b: Tensor::new(
                Box::leak(format!("{name}.b").into_boxed_str()),
                init_uniform(&[c_out], fan_in, rng),
            ),
            c_in,
            c_out,
            kernel,
            stride,
        }
    }

    fn pad(&self) -> usize {
        self.kernel / 2
    }

    /// Valid output index range for one kernel tap: the `j` for which
    /// `j·stride + kk − pad` lands inside `[0, l)`.
    fn tap_range(&self, kk: usize, l: usize, l_out: usize) -> (usize, usize, isize) {
        let off = kk as isize - self.pad() as isize;
        let j_lo = if off >= 0 {
            0
        } else {
            ((-off) as usize).div_ceil(self.stride).min(l_out)
        };
        let top = l as isize - 1 - off;
        let j_hi = if top < 0 {
            0
        } else {
            ((top / self.stride as isize) as usize + 1).min(l_out)
        };
        (j_lo, j_hi.max(j_lo), off)
    }

    /// Unfold x (B, C, L) into (C·k, B·L_out) so the convolution becomes a
    /// matrix product. The inner copies run over contiguous slices — this
    /// is the hottest memory pass in training.
    fn im2col(&self, x: &Array3<T>) -> Array2<T> {
        let (bsz, c_in, l) = x.dim();
        debug_assert_eq!(c_in, self.c_in);
        let pad = self.pad();
        let l_out = conv_out_len(l, self.kernel, self.stride, pad);
        let mut col = Array2::<T>::zeros((c_in * self.kernel, bsz * l_out));
        let xs = x.as_slice().expect("conv input must be standard layout");
        for c in 0..c_in {
            for kk in 0..self.kernel {
                let (j_lo, j_hi, off) = self.tap_range(kk, l, l_out);
                if j_hi == j_lo {
                    continue;
                }
                let row = col
                    .row_mut(c * self.kernel + kk)
                    .into_slice()
                    .expect("freshly allocated column matrix is contiguous");
                for b in 0..bsz {
                    let xrow = &xs[(b * c_in + c) * l..][..l];
                    let dst = &mut row[b * l_out + j_lo..b * l_out + j_hi];
                    let s0 = (j_lo * self.stride) as isize + off;
                    if self.stride == 1 {
                        dst.copy_from_slice(&xrow[s0 as usize..][..j_hi - j_lo]);
                    } else {
                        let mut src = s0 as usize;
                        for d in dst {
                            *d = xrow[src];
                            src += self.stride;
                        }
                    }
                }
            }
        }
        col
    }

    /// Scatter-add of the column gradient back onto the input layout.
    fn col2im(&self, dcol: &Array2<T>, bsz: usize, l: usize) -> Array3<T> {
        let pad = self.pad();
        let l_out = conv_out_len(l, self.kernel, self.stride, pad);
        let mut dx = Array3::<T>::zeros((bsz, self.c_in, l));
        let dxs = dx.as_slice_mut().expect("fresh gradient is contiguous");
        for c in 0..self.c_in {
            for kk in 0..self.kernel {
                let (j_lo, j_hi, off) = self.tap_range(kk, l, l_out);
                if j_hi == j_lo {
                    continue;
                }
                let row = dcol
                    .row(c * self.kernel + kk)
                    .to_slice()
                    .expect("column gradient must be standard layout");
                for b in 0..bsz {
                    let dxrow = &mut dxs[(b * self.c_in + c) * l..][..l];
                    let src = &row[b * l_out + j_lo..b * l_out + j_hi];
                    let s0 = ((j_lo * self.stride) as isize + off) as usize;
                    if self.stride == 1 {
                        for (d, s) in dxrow[s0..s0 + src.len()].iter_mut().zip(src) {
                            *d += *s;
                        }
                    } else {
                        let mut p = s0;
                        for s in src {
                            dxrow[p] += *s;
                            p += self.stride;
                        }
                    }
                }
            }
        }
        dx
    }

    /// Returns the output and the column matrix, which `backward` consumes
    /// (re-deriving it there would repeat the most expensive memory pass).
    pub fn forward(&self, x: &Array3<T>) -> (Array3<T>, Array2<T>) {
        let (bsz, _, l) = x.dim();
        let l_out = conv_out_len(l, self.kernel, self.stride, self.pad());
        let col = self.im2col(x);
        let w = self.w.value.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let y_mat = w.dot(&col); // (c_out, B·L_out)
        let b = self.b.value.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let mut y = Array3::<T>::zeros((bsz, self.c_out, l_out));
        let ys = y.as_slice_mut().expect("fresh output is contiguous");
        let ym = y_mat.as_slice().expect("GEMM output is standard layout");
        for co in 0..self.c_out {
            let bias = b[co];
            let src = &ym[co * bsz * l_out..][..bsz * l_out];
            for bi in 0..bsz {
                let dst = &mut ys[(bi * self.c_out + co) * l_out..][..l_out];
                for (d, s) in dst.iter_mut().zip(&src[bi * l_out..][..l_out]) {
                    *d = *s + bias;
                }
            }
        }
        (y, col)
    }

    /// Accumulates parameter gradients; returns the input gradient.
    /// `col` is the matrix returned by the matching `forward` call and
    /// `(bsz, l)` the input batch/length.
    pub fn backward(
        &mut self,
        col: &Array2<T>,
        dy: &Array3<T>,
        bsz: usize,
        l: usize,
    ) -> Array3<T> {
        let (_, c_out, l_out) = dy.dim();
        debug_assert_eq!(c_out, self.c_out);
        let mut dy_mat = Array2::<T>::zeros((c_out, bsz * l_out));
        let dm = dy_mat.as_slice_mut().expect("fresh matrix is contiguous");
        let dys = dy.as_slice().expect("output gradient must be standard layout");
        for co in 0..c_out {
            let dst = &mut dm[co * bsz * l_out..][..bsz * l_out];
            for bi in 0..bsz {
                dst[bi * l_out..][..l_out]
                    .copy_from_slice(&dys[(bi * c_out + co) * l_out..][..l_out]);
            }
        }
        let dw = dy_mat.dot(&col.t()); // (c_out, c_in·k)
        let mut gw = self
            .w
            .grad
            .view_mut()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        gw += &dw;
        let mut gb = self
            .b
            .grad
            .view_mut()
            .into_dimensionality::<ndarray::Ix1>()
            .unwrap();
        gb += &dy_mat.sum_axis(Axis(1));
        let w = self.w.value.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let dcol = w.t().dot(&dy_mat);
        self.col2im(&dcol, bsz, l)
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        vec![&mut self.w, &mut self.b]
    }

    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        vec![&self.w, &self.b]
    }
}

// ---------------------------------------------------------------------------
// Parameter-free pieces
// ---------------------------------------------------------------------------

/// Elementwise max(0, ·); works on any dimensionality.
pub fn relu<T: Scalar, D: ndarray::Dimension>(
    x: &ndarray::Array<T, D>,
) -> ndarray::Array<T, D> {
    x.mapv(|v| if v > T::zero() { v } else { T::zero() })
}

/// Gradient of relu: passes dy where the *forward output* was positive.
pub fn relu_backward<T: Scalar, D: ndarray::Dimension>(
    y: &ndarray::Array<T, D>,
    dy: &ndarray::Array<T, D>,
) -> ndarray::Array<T, D> {
    let mut dx = dy.clone();
    ndarray::Zip::from(&mut dx).and(y).for_each(|d, &v| {
        if v <= T::zero() {
            *d = T::zero();
        }
    });
    dx
}

/// Nearest-neighbor upsampling by 2 along the length axis.
pub fn upsample2<T: Scalar>(x: &Array3<T>) -> Array3<T> {
    let (b, c, l) = x.dim();
    let mut y = Array3::<T>::zeros((b, c, 2 * l));
    let ys = y.as_slice_mut().expect("fresh output is contiguous");
    let xs = x.as_slice().expect("upsample input must be standard layout");
    for run in 0..b * c {
        let src = &xs[run * l..][..l];
        let dst = &mut ys[run * 2 * l..][..2 * l];
        for (j, &v) in src.iter().enumerate() {
            dst[2 * j] = v;
            dst[2 * j + 1] = v;
        }
    }
    y
}

/// Gradient of [`upsample2`]: adjacent pairs sum back onto their source.
pub fn upsample2_backward<T: Scalar>(dy: &Array3<T>) -> Array3<T> {
    let (b, c, l2) = dy.dim();
    let l = l2 / 2;
    let mut dx = Array3::<T>::zeros((b, c, l));
    let dxs = dx.as_slice_mut().expect("fresh gradient is contiguous");
    let dys = dy.as_slice().expect("gradient must be standard layout");
    for run in 0..b * c {
        let src = &dys[run * 2 * l..][..2 * l];
        let dst = &mut dxs[run * l..][..l];
        for (j, d) in dst.iter_mut().enumerate() {
            *d = src[2 * j] + src[2 * j + 1];
        }
    }
    dx
}

// ---------------------------------------------------------------------------
// Residual blocks
// ---------------------------------------------------------------------------

/// Convolutional residual block: relu(x + c2(relu(c1(x)))), channel-preserving.
#[derive(Debug, Clone)]
pub struct ConvResBlock<T> {
    pub c1: Conv1d<T>,
    pub c2: Conv1d<T>,
}

/// Forward intermediates a [`ConvResBlock`] backward pass needs.
pub struct ConvResTrace<T> {
    col1: Array2<T>,
    r1: Array3<T>,
    col2: Array2<T>,
    /// The block output (post-residual relu).
    pub out: Array3<T>,
}

impl<T: Scalar> ConvResBlock<T> {
    pub fn new<R: Rng>(name: &'static str, channels: usize, kernel: usize, rng: &mut R) -> Self {
        ConvResBlock {
            c1: Conv1d::new(
                Box::leak(format!("{name}.c1").into_boxed_str()),
                channels,
                channels,
                kernel,
                1,
                rng,
            ),
            c2: Conv1d::new(
                Box::leak(format!("{name}.c2").into_boxed_str()),
                channels,
                channels,
                kernel,
                1,
                rng,
            ),
        }
    }

    pub fn forward(&self, x: &Array3<T>) -> ConvResTrace<T> {
        let (a1, col1) = self.c1.forward(x);
        let r1 = relu(&a1);
        let (a2, col2) = self.c2.forward(&r1);
        let out = relu(&(x + &a2));
        ConvResTrace { col1, r1, col2, out }
    }

    pub fn backward(&mut self, trace: &ConvResTrace<T>, dy: &Array3<T>) -> Array3<T> {
        let (bsz, _, l) = trace.r1.dim();
        let ds = relu_backward(&trace.out, dy);
        let dr1 = self.c2.backward(&trace.col2, &ds, bsz, l);
        let da1 = relu_backward(&trace.r1, &dr1);
        let dx_branch = self.c1.backward(&trace.col1, &da1, bsz, l);
        dx_branch + &ds
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut v = self.c1.tensors_mut();
        v.extend(self.c2.tensors_mut());
        v
    }

    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut v = self.c1.tensors();
        v.extend(self.c2.tensors());
        v
    }
}

/// Fully connected residual block: relu(h + f2(relu(f1(h)))), width-preserving.
#[derive(Debug, Clone)]
pub struct FcResBlock<T> {
    pub f1: Linear<T>,
    pub f2: Linear<T>,
}

/// Forward intermediates an [`FcResBlock`] backward pass needs.
pub struct FcResTrace<T> {
    x: Array2<T>,
    r1: Array2<T>,
    pub out: Array2<T>,
}

impl<T: Scalar> FcResBlock<T> {
    pub fn new<R: Rng>(name: &'static str, width: usize, rng: &mut R) -> Self {
        FcResBlock {
            f1: Linear::new(Box::leak(format!("{name}.f1").into_boxed_str()), width, width, rng),
            f2: Linear::new(Box::leak(format!("{name}.f2").into_boxed_str()), width, width, rng),
        }
    }

    pub fn forward(&self, x: &Array2<T>) -> FcResTrace<T> {
        let r1 = relu(&self.f1.forward(x));
        let a2 = self.f2.forward(&r1);
        let out = relu(&(x + &a2));
        FcResTrace { x: x.clone(), r1, out }
    }

    pub fn backward(&mut self, trace: &FcResTrace<T>, dy: &Array2<T>) -> Array2<T> {
        let ds = relu_backward(&trace.out, dy);
        let dr1 = self.f2.backward(&trace.r1, &ds);
        let da1 = relu_backward(&trace.r1, &dr1);
        let dx_branch = self.f1.backward(&trace.x, &da1);
        dx_branch + &ds
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut v = self.f1.tensors_mut();
        v.extend(self.f2.tensors_mut());
        v
    }

    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut v = self.f1.tensors();
        v.extend(self.f2.tensors());
        v
    }
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

/// Adam with bias correction. Moment buffers live here, matched to the
/// parameter list by position, so the model itself stays a plain bag of
/// values and gradients.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<ArrayD<T>>,
    v: Vec<ArrayD<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// One update over the full parameter list. The list must have the same
    /// order and shapes on every call.
    pub fn step(&mut self, params: &mut [&mut Tensor<T>]) {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| ArrayD::zeros(p.value.raw_dim())).collect();
            self.v = self.m.clone();
        }
        assert_eq!(self.m.len(), params.len(), "parameter list changed between steps");
        self.t += 1;
        let b1 = T::from_f64(self.beta1);
        let b2 = T::from_f64(self.beta2);
        let one = T::one();
        // Bias corrections folded into a single scale factor on the step.
        let corr1 = 1.0 - self.beta1.powi(self.t as i32);
        let corr2 = 1.0 - self.beta2.powi(self.t as i32);
        let scale = T::from_f64(self.lr / corr1);
        let corr2_sqrt_inv = T::from_f64(1.0 / corr2.sqrt());
        let eps = T::from_f64(self.eps);
        for (p, (m, v)) in params.iter_mut().zip(self.m.iter_mut().zip(&mut self.v)) {
            ndarray::Zip::from(&mut p.value)
                .and(&p.grad)
                .and(m)
                .and(v)
                .for_each(|w, &g, m, v| {
                    *m = b1 * *m + (one - b1) * g;
                    *v = b2 * *v + (one - b2) * g * g;
                    *w = *w - scale * *m / ((*v).sqrt() * corr2_sqrt_inv + eps);
                });
        }
    }
}

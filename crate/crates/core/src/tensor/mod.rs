//! Dense tensors, convolution, and the small amount of linear algebra the
//! rest of the crate needs.
//!
//! Model code runs in `f32`; metrics and linear algebra run in `f64`. Both go
//! through the [`Real`] trait so the same network code can be re-run in
//! double precision for gradient checks.

mod linalg;
mod rng;

pub use linalg::{eigh, psd_sqrt, SymMatrix};
pub use rng::SeededRng;

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::{Deserialize, Serialize};

use crate::error::{Result, VadeError};

/// Floating-point element type usable by tensors and the network code.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Send
    + Sync
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + 'static
{
    /// `c = alpha * a * b + beta * c` on strided matrices.
    ///
    /// `a` is `m x k`, `b` is `k x n`, `c` is `m x n`; strides are in
    /// elements and may describe transposed storage.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );

    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("f64 conversion")
    }

    fn f64(self) -> f64 {
        self.to_f64().expect("f64 conversion")
    }
}

fn check_extent(len: usize, rows: usize, cols: usize, rs: isize, cs: isize) {
    if rows == 0 || cols == 0 {
        return;
    }
    let last = (rows as isize - 1) * rs + (cols as isize - 1) * cs;
    assert!(
        rs >= 0 && cs >= 0 && (last as usize) < len,
        "gemm operand out of bounds"
    );
}

macro_rules! impl_real {
    ($t:ty, $gemm:path) => {
        impl Real for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
                rsc: isize,
                csc: isize,
            ) {
                check_extent(a.len(), m, k, rsa, csa);
                check_extent(b.len(), k, n, rsb, csb);
                check_extent(c.len(), m, n, rsc, csc);
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: every operand extent was bounds-checked above.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        rsc,
                        csc,
                    );
                }
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

/// Row-major dense tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(VadeError::Shape(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); n],
        }
    }

    pub fn filled(shape: &[usize], v: T) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; n],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Tensor::new(shape.to_vec(), self.data)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.same_shape(other)?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn same_shape(&self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(VadeError::Shape(format!(
                "shape mismatch {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::of(v.f64())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|v| v.f64()).sum()
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            0.0
        } else {
            self.sum() / self.data.len() as f64
        }
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|v| v.f64() * v.f64()).sum()
    }
}

/// Padding rule for [`conv2d`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    /// Zero padding of `k / 2`; output is `ceil(n / stride)`.
    Same,
    /// No padding; output is `(n - k) / stride + 1`.
    Valid,
}

impl Padding {
    pub fn amount(self, k: usize) -> usize {
        match self {
            Padding::Same => k / 2,
            Padding::Valid => 0,
        }
    }
}

pub(crate) fn conv_out_size(n: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if k > n + 2 * pad {
        return Err(VadeError::Shape(format!(
            "kernel {k} larger than padded input {}",
            n + 2 * pad
        )));
    }
    Ok((n + 2 * pad - k) / stride + 1)
}

/// Unfolds a `[c, h, w]` input into `[c*k*k, oh*ow]` columns.
#[allow(clippy::too_many_arguments)]
pub(crate) fn im2col<T: Real>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    let n = oh * ow;
    let mut cols = vec![T::zero(); c * k * k * n];
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * n..(row + 1) * n];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let drow = &mut dst[oy * ow..(oy + 1) * ow];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            *d = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters columns back onto a `[c, h, w]` buffer.
#[allow(clippy::too_many_arguments)]
pub(crate) fn col2im<T: Real>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    let n = oh * ow;
    let mut x = vec![T::zero(); c * h * w];
    for ci in 0..c {
        let plane = &mut x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * n..(row + 1) * n];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = iy as usize * w;
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            plane[base + ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

/// Channel-major convolution: `x` is `[c_in, h, w]`, `weight` is
/// `[c_out, c_in, k, k]`. Returns `(output, oh, ow, columns)`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_chw<T: Real>(
    x: &[T],
    c_in: usize,
    h: usize,
    w: usize,
    weight: &[T],
    bias: Option<&[T]>,
    c_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Result<(Vec<T>, usize, usize, Vec<T>)> {
    let oh = conv_out_size(h, k, stride, pad)?;
    let ow = conv_out_size(w, k, stride, pad)?;
    let cols = im2col(x, c_in, h, w, k, stride, pad, oh, ow);
    let n = oh * ow;
    let kk = c_in * k * k;
    let mut out = vec![T::zero(); c_out * n];
    if let Some(b) = bias {
        for (co, &bv) in b.iter().enumerate() {
            out[co * n..(co + 1) * n].iter_mut().for_each(|v| *v = bv);
        }
    }
    let beta = if bias.is_some() { T::one() } else { T::zero() };
    T::gemm(
        c_out,
        kk,
        n,
        T::one(),
        weight,
        kk as isize,
        1,
        &cols,
        n as isize,
        1,
        beta,
        &mut out,
        n as isize,
        1,
    );
    Ok((out, oh, ow, cols))
}

/// 2-D convolution on an `[h, w, c_in]` image with a `[k, k, c_in, c_out]`
/// kernel (cross-correlation, as is conventional for neural networks).
pub fn conv2d<T: Real>(
    img: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    padding: Padding,
) -> Result<Tensor<T>> {
    let (&[h, w, c_in], &[k, k2, kc, c_out]) = (img.shape(), kernel.shape()) else {
        return Err(VadeError::Shape(format!(
            "conv2d expects [h,w,c] image and [k,k,cin,cout] kernel, got {:?} and {:?}",
            img.shape(),
            kernel.shape()
        )));
    };
    if k != k2 || k % 2 == 0 {
        return Err(VadeError::Shape(format!(
            "kernel must be square with odd size, got {k}x{k2}"
        )));
    }
    if kc != c_in {
        return Err(VadeError::Shape(format!(
            "kernel expects {kc} input channels, image has {c_in}"
        )));
    }
    if stride == 0 {
        return Err(VadeError::InvalidParam("stride must be >= 1".into()));
    }
    let mut chw = vec![T::zero(); img.len()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..c_in {
                chw[(c * h + y) * w + x] = img.data()[(y * w + x) * c_in + c];
            }
        }
    }
    let mut wt = vec![T::zero(); kernel.len()];
    for ky in 0..k {
        for kx in 0..k {
            for ci in 0..c_in {
                for co in 0..c_out {
                    wt[((co * c_in + ci) * k + ky) * k + kx] =
                        kernel.data()[((ky * k + kx) * c_in + ci) * c_out + co];
                }
            }
        }
    }
    let pad = padding.amount(k);
    let (out, oh, ow, _) = conv2d_chw(&chw, c_in, h, w, &wt, None, c_out, k, stride, pad)?;
    let mut hwc = vec![T::zero(); out.len()];
    for co in 0..c_out {
        for i in 0..oh * ow {
            hwc[i * c_out + co] = out[co * oh * ow + i];
        }
    }
    Tensor::new(vec![oh, ow, c_out], hwc)
}

/// Low-pass filter applied before 2x decimation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LowPass {
    /// Mean of each 2x2 block.
    #[default]
    Mean2x2,
    /// Separable Gaussian blur (sigma 1, radius 2, edge clamped), then
    /// keep every second sample.
    Gaussian,
}

/// Halves both dimensions of an `[h, w]` image.
pub fn downsample2x<T: Real>(img: &Tensor<T>, filter: LowPass) -> Result<Tensor<T>> {
    let &[h, w] = img.shape() else {
        return Err(VadeError::Shape(format!(
            "downsample2x expects [h,w], got {:?}",
            img.shape()
        )));
    };
    if h % 2 != 0 || w % 2 != 0 || h == 0 || w == 0 {
        return Err(VadeError::Shape(format!(
            "downsample2x needs even dimensions, got {h}x{w}"
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let x = img.data();
    let out = match filter {
        LowPass::Mean2x2 => {
            let quarter = T::of(0.25);
            let mut out = Vec::with_capacity(oh * ow);
            for y in 0..oh {
                for xx in 0..ow {
                    let a = x[2 * y * w + 2 * xx] + x[2 * y * w + 2 * xx + 1];
                    let b = x[(2 * y + 1) * w + 2 * xx] + x[(2 * y + 1) * w + 2 * xx + 1];
                    out.push((a + b) * quarter);
                }
            }
            out
        }
        LowPass::Gaussian => {
            let taps: Vec<f64> = (-2i32..=2).map(|d| (-(d * d) as f64 / 2.0).exp()).collect();
            let norm: f64 = taps.iter().sum();
            let taps: Vec<T> = taps.iter().map(|t| T::of(t / norm)).collect();
            let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
            let mut rows = vec![T::zero(); h * ow];
            for y in 0..h {
                for xx in 0..ow {
                    let cx = 2 * xx as isize;
                    let mut acc = T::zero();
                    for (i, &t) in taps.iter().enumerate() {
                        acc += t * x[y * w + clamp(cx + i as isize - 2, w)];
                    }
                    rows[y * ow + xx] = acc;
                }
            }
            let mut out = vec![T::zero(); oh * ow];
            for y in 0..oh {
                let cy = 2 * y as isize;
                for xx in 0..ow {
                    let mut acc = T::zero();
                    for (i, &t) in taps.iter().enumerate() {
                        acc += t * rows[clamp(cy + i as isize - 2, h) * ow + xx];
                    }
                    out[y * ow + xx] = acc;
                }
            }
            out
        }
    };
    Tensor::new(vec![oh, ow], out)
}

/// Central-difference gradient of a scalar function.
pub fn finite_diff_grad<F>(mut f: F, x: &Tensor<f64>, h: f64) -> Result<Tensor<f64>>
where
    F: FnMut(&Tensor<f64>) -> f64,
{
    if !(h > 0.0) {
        return Err(VadeError::InvalidParam(format!(
            "step must be positive, got {h}"
        )));
    }
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = f(&probe);
        probe.data_mut()[i] = orig - h;
        let fm = f(&probe);
        probe.data_mut()[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(VadeError::NonFinite(format!("objective at coordinate {i}")));
        }
        grad.push((fp - fm) / (2.0 * h));
    }
    Tensor::new(x.shape().to_vec(), grad)
}

/// `‖a − b‖ / max(‖a‖, ‖b‖, tiny)`, the error measure used by gradient checks.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-300)
}

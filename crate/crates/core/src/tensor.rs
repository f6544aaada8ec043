//! Dense row-major tensors and the raw kernels behind the differentiable ops.
//!
//! Kernels here work on plain slices and know nothing about gradient
//! recording; [`crate::autograd::Tape`] wires them together.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::sync::Arc;

use num_traits::{Float, FromPrimitive, NumCast, ToPrimitive};

use crate::error::{Error, Result};

/// Floating-point element type. `f32` is the runtime width, `f64` is used for
/// finite-difference gradient checks.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Display + Sum + Send + Sync + 'static
{
    const NAME: &'static str;

    /// `c = a * b + beta * c` for an `m x k` by `k x n` product with explicit
    /// row/column strides.
    ///
    /// # Safety
    /// Every index reachable through the strides must lie inside the
    /// corresponding buffer. [`gemm`] checks this before calling.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn lit(v: f64) -> Self {
        <Self as NumCast>::from(v).expect("literal fits in scalar type")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// Row-major matrix view: buffer plus (row stride, column stride).
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a, T> {
    pub data: &'a [T],
    pub rs: usize,
    pub cs: usize,
}

impl<'a, T> MatRef<'a, T> {
    pub fn rows(data: &'a [T], cols: usize) -> Self {
        MatRef {
            data,
            rs: cols,
            cs: 1,
        }
    }

    pub fn transposed(data: &'a [T], cols: usize) -> Self {
        MatRef {
            data,
            rs: 1,
            cs: cols,
        }
    }

    fn fits(&self, r: usize, c: usize) -> bool {
        r == 0 || c == 0 || (r - 1) * self.rs + (c - 1) * self.cs < self.data.len()
    }
}

/// `c[m x n] = a[m x k] * b[k x n] + beta * c`, with `c` dense row-major.
pub(crate) fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: MatRef<'_, T>,
    b: MatRef<'_, T>,
    beta: T,
    c: &mut [T],
) {
    assert!(
        a.fits(m, k) && b.fits(k, n) && c.len() >= m * n,
        "gemm operand out of bounds"
    );
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: bounds checked above for every stride combination used.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Immutable dense tensor. Cloning shares the underlying buffer.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Arc<[T]>,
}

impl<T: Debug> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("len", &self.data.len())
            .finish()
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} holds {numel} elements but {} were given",
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data: data.into(),
        })
    }

    pub fn scalar(v: T) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![v].into(),
        }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: impl Into<Vec<usize>>, v: T) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![v; numel].into(),
        }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> T) -> Self {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: (0..numel).map(&mut f).collect::<Vec<_>>().into(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.data.to_vec()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(
            self.data.len(),
            1,
            "item() on tensor of shape {:?}",
            self.shape
        );
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect::<Vec<_>>().into(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|&v| U::lit(v.as_f64()))
                .collect::<Vec<_>>()
                .into(),
        }
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        Ok(Tensor {
            shape,
            data: self.data.clone(),
        })
    }

    /// `(C, H, W)` of a rank-3 tensor.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(Error::Shape(format!(
                "expected a [C,H,W] tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    /// Mirrors a `[C,H,W]` tensor left to right.
    pub fn flip_horizontal(&self) -> Result<Self> {
        let (_, _, w) = self.dims3()?;
        let mut data = Vec::with_capacity(self.data.len());
        for row in self.data.chunks(w) {
            data.extend(row.iter().rev());
        }
        Tensor::new(self.shape.clone(), data)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest absolute elementwise difference; shapes must match.
    pub fn max_abs_diff(&self, other: &Self) -> T {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(other.data.iter())
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }
}

pub(crate) fn ensure_finite<T: Scalar>(data: &[T], op: &'static str) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

/// Geometry of one 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(
        (c_in, h, w): (usize, usize, usize),
        weight_shape: &[usize],
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let [c_out, wc_in, kh, kw] = weight_shape[..] else {
            return Err(Error::Shape(format!(
                "conv2d weight must be [C_out,C_in,kh,kw], got {weight_shape:?}"
            )));
        };
        if wc_in != c_in {
            return Err(Error::Shape(format!(
                "conv2d input has {c_in} channels but weight expects {wc_in}"
            )));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::Shape(format!("conv2d kernel {kh}x{kw} must be odd")));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be >= 1".into()));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::Shape(format!(
                "conv2d kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * pad,
                w + 2 * pad
            )));
        }
        let out_h = (h + 2 * pad - kh) / stride + 1;
        let out_w = (w + 2 * pad - kw) / stride + 1;
        if out_h == 0 || out_w == 0 || c_out == 0 {
            return Err(Error::Shape("conv2d output would be empty".into()));
        }
        Ok(ConvGeometry {
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            stride,
            pad,
            out_h,
            out_w,
        })
    }

    /// Rows of the unfolded input matrix.
    pub fn patch_len(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    pub fn out_pixels(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn flops(&self) -> u64 {
        2 * (self.c_out * self.patch_len() * self.out_pixels()) as u64
    }

    #[inline]
    fn source(&self, out: usize, k: usize, len: usize) -> Option<usize> {
        let pos = (out * self.stride + k) as isize - self.pad as isize;
        (pos >= 0 && (pos as usize) < len).then_some(pos as usize)
    }
}

/// Unfolds one `[C,H,W]` sample into a `[C*kh*kw, out_h*out_w]` matrix.
pub(crate) fn im2col<T: Scalar>(x: &[T], g: &ConvGeometry) -> Vec<T> {
    let p = g.out_pixels();
    let mut cols = vec![T::zero(); g.patch_len() * p];
    for ci in 0..g.c_in {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let Some(iy) = g.source(oy, ky, g.h) else {
                        continue;
                    };
                    let src = &plane[iy * g.w..(iy + 1) * g.w];
                    for ox in 0..g.out_w {
                        if let Some(ix) = g.source(ox, kx, g.w) {
                            dst[oy * g.out_w + ox] = src[ix];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input grid.
pub(crate) fn col2im_add<T: Scalar>(cols: &[T], g: &ConvGeometry, dx: &mut [T]) {
    let p = g.out_pixels();
    for ci in 0..g.c_in {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let Some(iy) = g.source(oy, ky, g.h) else {
                        continue;
                    };
                    for ox in 0..g.out_w {
                        if let Some(ix) = g.source(ox, kx, g.w) {
                            plane[iy * g.w + ix] = plane[iy * g.w + ix] + src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Convolution of one sample given its unfolded columns. Output `[C_out, P]`.
pub(crate) fn conv_forward_cols<T: Scalar>(
    cols: &[T],
    weight: &[T],
    bias: Option<&[T]>,
    g: &ConvGeometry,
) -> Vec<T> {
    let p = g.out_pixels();
    let k = g.patch_len();
    let mut out = vec![T::zero(); g.c_out * p];
    if let Some(b) = bias {
        for (co, row) in out.chunks_mut(p).enumerate() {
            row.fill(b[co]);
        }
    }
    gemm(
        g.c_out,
        k,
        p,
        MatRef::rows(weight, k),
        MatRef::rows(cols, p),
        T::one(),
        &mut out,
    );
    out
}

/// Per-axis sampling table for align-corners-false bilinear resizing:
/// `(lower index, upper index, upper weight)` per output coordinate.
pub(crate) fn bilinear_axis<T: Scalar>(in_len: usize, out_len: usize) -> Vec<(usize, usize, T)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|i| {
            let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(in_len - 1);
            (lo, hi, T::lit(src - lo as f64))
        })
        .collect()
}

pub(crate) fn bilinear_forward<T: Scalar>(
    x: &[T],
    (c, h, w): (usize, usize, usize),
    out_h: usize,
    out_w: usize,
) -> Vec<T> {
    let ys = bilinear_axis::<T>(h, out_h);
    let xs = bilinear_axis::<T>(w, out_w);
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = plane[y0 * w + x0] * (T::one() - fx) + plane[y0 * w + x1] * fx;
                let bot = plane[y1 * w + x0] * (T::one() - fx) + plane[y1 * w + x1] * fx;
                out.push(top * (T::one() - fy) + bot * fy);
            }
        }
    }
    out
}

pub(crate) fn bilinear_backward<T: Scalar>(
    dy: &[T],
    (c, h, w): (usize, usize, usize),
    out_h: usize,
    out_w: usize,
) -> Vec<T> {
    let ys = bilinear_axis::<T>(h, out_h);
    let xs = bilinear_axis::<T>(w, out_w);
    let mut dx = vec![T::zero(); c * h * w];
    for ch in 0..c {
        let plane = &mut dx[ch * h * w..(ch + 1) * h * w];
        let grad = &dy[ch * out_h * out_w..(ch + 1) * out_h * out_w];
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let g = grad[oy * out_w + ox];
                let gt = g * (T::one() - fy);
                let gb = g * fy;
                plane[y0 * w + x0] = plane[y0 * w + x0] + gt * (T::one() - fx);
                plane[y0 * w + x1] = plane[y0 * w + x1] + gt * fx;
                plane[y1 * w + x0] = plane[y1 * w + x0] + gb * (T::one() - fx);
                plane[y1 * w + x1] = plane[y1 * w + x1] + gb * fx;
            }
        }
    }
    dx
}

/// Per-channel standardization over spatial positions.
/// Returns the normalized values and each channel's `1/sqrt(var + eps)`.
pub(crate) fn channel_norm_forward<T: Scalar>(
    x: &[T],
    c: usize,
    spatial: usize,
    eps: T,
) -> (Vec<T>, Vec<T>) {
    let n = T::from_usize(spatial).unwrap();
    let mut out = Vec::with_capacity(x.len());
    let mut inv_std = Vec::with_capacity(c);
    for ch in 0..c {
        let plane = &x[ch * spatial..(ch + 1) * spatial];
        let mean = plane.iter().copied().sum::<T>() / n;
        let var = plane.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let inv = (var + eps).sqrt().recip();
        out.extend(plane.iter().map(|&v| (v - mean) * inv));
        inv_std.push(inv);
    }
    (out, inv_std)
}

pub(crate) fn channel_norm_backward<T: Scalar>(
    dy: &[T],
    y: &[T],
    inv_std: &[T],
    spatial: usize,
) -> Vec<T> {
    let n = T::from_usize(spatial).unwrap();
    let mut dx = Vec::with_capacity(dy.len());
    for (ch, &inv) in inv_std.iter().enumerate() {
        let g = &dy[ch * spatial..(ch + 1) * spatial];
        let yy = &y[ch * spatial..(ch + 1) * spatial];
        let mean_g = g.iter().copied().sum::<T>() / n;
        let mean_gy = g.iter().zip(yy).map(|(&a, &b)| a * b).sum::<T>() / n;
        dx.extend(
            g.iter()
                .zip(yy)
                .map(|(&gi, &yi)| inv * (gi - mean_g - yi * mean_gy)),
        );
    }
    dx
}

/// Index of the largest value; ties resolve to the lowest index.
pub(crate) fn argmax<T: Scalar>(values: impl Iterator<Item = T>) -> usize {
    let mut best = 0;
    let mut best_v = T::neg_infinity();
    for (i, v) in values.enumerate() {
        if v > best_v {
            best = i;
            best_v = v;
        }
    }
    best
}

/// Per-pixel argmax over the channel axis of a `[C,H,W]` tensor.
pub fn argmax_channels<T: Scalar>(t: &Tensor<T>) -> Result<Vec<u8>> {
    let (c, h, w) = t.dims3()?;
    if c > 256 {
        return Err(Error::Shape(format!(
            "{c} classes do not fit in a u8 label"
        )));
    }
    let plane = h * w;
    let d = t.data();
    Ok((0..plane)
        .map(|p| argmax((0..c).map(|ch| d[ch * plane + p])) as u8)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_wrong_length() {
        assert!(Tensor::<f32>::new([2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::new([2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn gemm_matches_naive_with_transposes() {
        let a: Vec<f64> = (0..6).map(|v| v as f64).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| (v as f64) * 0.5).collect(); // 3x4
        let mut c = vec![0.0; 8];
        gemm(
            2,
            3,
            4,
            MatRef::rows(&a, 3),
            MatRef::rows(&b, 4),
            0.0,
            &mut c,
        );
        for i in 0..2 {
            for j in 0..4 {
                let e: f64 = (0..3).map(|k| a[i * 3 + k] * b[k * 4 + j]).sum();
                assert_eq!(c[i * 4 + j], e);
            }
        }
        // a^T (3x2) stored as a 2x3 buffer
        let mut ct = vec![0.0; 9];
        let bt: Vec<f64> = (0..6).map(|v| v as f64 - 2.0).collect(); // 2x3
        gemm(
            3,
            2,
            3,
            MatRef::transposed(&a, 3),
            MatRef::rows(&bt, 3),
            0.0,
            &mut ct,
        );
        for i in 0..3 {
            for j in 0..3 {
                let e: f64 = (0..2).map(|k| a[k * 3 + i] * bt[k * 3 + j]).sum();
                assert_eq!(ct[i * 3 + j], e);
            }
        }
    }

    #[test]
    fn conv_geometry_arithmetic() {
        let g = ConvGeometry::new((3, 48, 64), &[16, 3, 3, 3], 2, 1).unwrap();
        assert_eq!((g.out_h, g.out_w), (24, 32));
        assert!(ConvGeometry::new((3, 8, 8), &[4, 2, 3, 3], 1, 1).is_err());
        assert!(ConvGeometry::new((3, 8, 8), &[4, 3, 2, 2], 1, 1).is_err());
        assert!(ConvGeometry::new((3, 2, 2), &[4, 3, 5, 5], 1, 0).is_err());
    }

    #[test]
    fn bilinear_axis_identity_when_same_size() {
        for (i, &(lo, hi, f)) in bilinear_axis::<f64>(5, 5).iter().enumerate() {
            assert_eq!(lo, i);
            assert!(hi == i + 1 || hi == 4);
            assert_eq!(f, 0.0);
        }
    }

    #[test]
    fn argmax_prefers_lowest_index_on_ties() {
        assert_eq!(argmax([1.0f32, 3.0, 3.0, 2.0].into_iter()), 1);
        assert_eq!(argmax([0.0f32; 4].into_iter()), 0);
    }
}

//! Dense row-major tensors and the eager numeric kernels the tape builds on.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;

use crate::error::{Error, Result};

/// Element precision tag, as written into checkpoints.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn name(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "f32" => Some(DType::F32),
            "f64" => Some(DType::F64),
            _ => None,
        }
    }
}

/// Real scalar usable as tensor element. Implemented for `f32` and `f64`.
pub trait Scalar:
    Float
    + Default
    + Debug
    + Display
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + Send
    + Sync
    + 'static
{
    const DTYPE: DType;

    fn lit(x: f64) -> Self;

    fn as_f64(self) -> f64;

    fn write_le(self, out: &mut Vec<u8>);

    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const DTYPE: DType = DType::F32;

    #[inline]
    fn lit(x: f64) -> Self {
        x as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Scalar for f64 {
    const DTYPE: DType = DType::F64;

    #[inline]
    fn lit(x: f64) -> Self {
        x
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

/// An n-dimensional array of reals stored flat in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Scalar> Tensor<F> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<F>) -> Result<Self> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape("tensor", &shape, &[data.len()]));
        }
        Ok(Tensor { shape, data })
    }

    /// Builds from `f64` values, converting to the element type.
    pub fn from_f64(shape: impl Into<Vec<usize>>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&x| F::lit(x)).collect())
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, F::zero())
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, F::one())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: F) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: F) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros([n, n]);
        for i in 0..n {
            t.data[i * n + i] = F::one();
        }
        t
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> F) -> Self {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: (0..numel).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single element of a one-element tensor.
    pub fn item(&self) -> F {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|x| x.as_f64()).collect()
    }

    pub fn cast<G: Scalar>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| G::lit(x.as_f64())).collect(),
        }
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    /// Rows and columns of a rank-2 tensor.
    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape[..] {
            [m, n] => Ok((m, n)),
            _ => Err(Error::shape(op, &self.shape, &[0, 0])),
        }
    }

    pub fn at2(&self, i: usize, j: usize) -> F {
        self.data[i * self.shape[1] + j]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn sum(&self) -> F {
        self.data.iter().copied().sum()
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (m, k) = self.dims2("matmul")?;
        let (k2, n) = other.dims2("matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", &self.shape, &other.shape));
        }
        let mut out = vec![F::zero(); m * n];
        matmul_into(&self.data, &other.data, &mut out, m, k, n);
        Ok(Tensor {
            shape: vec![m, n],
            data: out,
        })
    }

    pub fn transpose(&self) -> Result<Self> {
        let (m, n) = self.dims2("transpose")?;
        let mut out = vec![F::zero(); m * n];
        transpose_into(&self.data, &mut out, m, n);
        Ok(Tensor {
            shape: vec![n, m],
            data: out,
        })
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&self) -> Result<Self> {
        let (m, n) = self.dims2("softmax_rows")?;
        let mut out = self.data.clone();
        for row in out.chunks_mut(n.max(1)).take(m) {
            softmax_in_place(row);
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: out,
        })
    }

    /// Renormalized masked softmax `(Z ⊘ Z11ᵀ)` with `Z = M ⊙ exp(S)`.
    ///
    /// Masked-out entries never go through `exp`; rows with no unmasked entry
    /// come out as zeros.
    pub fn masked_softmax_rows(&self, mask: &Self) -> Result<Self> {
        let (m, n) = self.dims2("masked_softmax_rows")?;
        if mask.shape != self.shape {
            return Err(Error::shape("masked_softmax_rows", &self.shape, &mask.shape));
        }
        let mut out = vec![F::zero(); m * n];
        for i in 0..m {
            let r = i * n..(i + 1) * n;
            masked_softmax_row(&self.data[r.clone()], &mask.data[r.clone()], &mut out[r]);
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: out,
        })
    }

    /// Valid (unpadded) strided 2-D convolution of `C×H×W` input with
    /// `F×C×kh×kw` kernels.
    pub fn conv2d(&self, kernels: &Self, stride: usize) -> Result<Self> {
        let geom = ConvGeom::new(&self.shape, &kernels.shape, stride)?;
        let mut out = vec![F::zero(); geom.out_len()];
        conv2d_forward(&geom, &self.data, &kernels.data, &mut out);
        Ok(Tensor {
            shape: vec![geom.f, geom.oh, geom.ow],
            data: out,
        })
    }
}

/// `out[m×n] += a[m×k] · b[k×n]`, i-k-j loop order.
pub(crate) fn matmul_into<F: Scalar>(a: &[F], b: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == F::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m×n] += a[m×k] · b[n×k]ᵀ`.
pub(crate) fn matmul_bt_into<F: Scalar>(a: &[F], b: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] += dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

/// Dot product with eight independent accumulators so it vectorizes.
#[inline]
fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    let mut acc = [F::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = F::zero();
    for (&x, &y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// `out[k×n] += a[m×k]ᵀ · g[m×n]`.
pub(crate) fn matmul_at_into<F: Scalar>(a: &[F], g: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == F::zero() {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

pub(crate) fn transpose_into<F: Scalar>(a: &[F], out: &mut [F], m: usize, n: usize) {
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
}

pub(crate) fn softmax_in_place<F: Scalar>(row: &mut [F]) {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    let mut total = F::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x = *x / total;
    }
}

/// Masked renormalized softmax of one row. Returns the row normalizer
/// `Σ_j M_j exp(s_j - max)` and the max used (both zero for empty rows).
pub(crate) fn masked_softmax_row<F: Scalar>(scores: &[F], mask: &[F], out: &mut [F]) -> (F, F) {
    let mut max = F::neg_infinity();
    for (&s, &m) in scores.iter().zip(mask) {
        if m > F::zero() && s > max {
            max = s;
        }
    }
    if max == F::neg_infinity() {
        out.iter_mut().for_each(|o| *o = F::zero());
        return (F::zero(), F::zero());
    }
    let mut total = F::zero();
    for ((o, &s), &m) in out.iter_mut().zip(scores).zip(mask) {
        *o = if m > F::zero() { m * (s - max).exp() } else { F::zero() };
        total += *o;
    }
    for o in out.iter_mut() {
        *o = *o / total;
    }
    (total, max)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub f: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(input: &[usize], kernels: &[usize], stride: usize) -> Result<Self> {
        let (&[c, h, w], &[f, kc, kh, kw]) = (input, kernels) else {
            return Err(Error::shape("conv2d", input, kernels));
        };
        if kc != c || stride == 0 || kh == 0 || kw == 0 || kh > h || kw > w {
            return Err(Error::shape("conv2d", input, kernels));
        }
        if (h - kh) % stride != 0 || (w - kw) % stride != 0 {
            return Err(Error::shape("conv2d", input, kernels));
        }
        Ok(ConvGeom {
            c,
            h,
            w,
            f,
            kh,
            kw,
            stride,
            oh: (h - kh) / stride + 1,
            ow: (w - kw) / stride + 1,
        })
    }

    pub fn out_len(&self) -> usize {
        self.f * self.oh * self.ow
    }
}

/// Unfolds input patches into a `(C·kh·kw) × (oh·ow)` matrix whose row order
/// matches the kernel layout.
fn im2col<F: Scalar>(g: &ConvGeom, x: &[F]) -> Vec<F> {
    let p = g.oh * g.ow;
    let mut cols = vec![F::zero(); g.c * g.kh * g.kw * p];
    let mut q = 0;
    for c in 0..g.c {
        for dy in 0..g.kh {
            for dx in 0..g.kw {
                let row = &mut cols[q * p..(q + 1) * p];
                for oy in 0..g.oh {
                    let xrow = (c * g.h + oy * g.stride + dy) * g.w + dx;
                    for ox in 0..g.ow {
                        row[oy * g.ow + ox] = x[xrow + ox * g.stride];
                    }
                }
                q += 1;
            }
        }
    }
    cols
}

fn col2im_add<F: Scalar>(g: &ConvGeom, cols: &[F], gx: &mut [F]) {
    let p = g.oh * g.ow;
    let mut q = 0;
    for c in 0..g.c {
        for dy in 0..g.kh {
            for dx in 0..g.kw {
                let row = &cols[q * p..(q + 1) * p];
                for oy in 0..g.oh {
                    let xrow = (c * g.h + oy * g.stride + dy) * g.w + dx;
                    for ox in 0..g.ow {
                        gx[xrow + ox * g.stride] += row[oy * g.ow + ox];
                    }
                }
                q += 1;
            }
        }
    }
}

pub(crate) fn conv2d_forward<F: Scalar>(g: &ConvGeom, x: &[F], k: &[F], out: &mut [F]) {
    let cols = im2col(g, x);
    matmul_into(k, &cols, out, g.f, g.c * g.kh * g.kw, g.oh * g.ow);
}

pub(crate) fn conv2d_backward<F: Scalar>(
    g: &ConvGeom,
    x: &[F],
    k: &[F],
    gout: &[F],
    gx: Option<&mut [F]>,
    gk: Option<&mut [F]>,
) {
    let q = g.c * g.kh * g.kw;
    let p = g.oh * g.ow;
    if let Some(gx) = gx {
        let mut gcols = vec![F::zero(); q * p];
        matmul_at_into(k, gout, &mut gcols, g.f, q, p);
        col2im_add(g, &gcols, gx);
    }
    if let Some(gk) = gk {
        let cols = im2col(g, x);
        matmul_bt_into(gout, &cols, gk, g.f, p, q);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn matmul_identity_and_small() {
        let i = t(&[2, 2], &[1., 0., 0., 1.]);
        let b = t(&[2, 2], &[3., 4., 5., 6.]);
        assert_eq!(i.matmul(&b).unwrap(), b);
        let r = t(&[1, 2], &[1., 2.]).matmul(&t(&[2, 1], &[3., 4.])).unwrap();
        assert_eq!(r.data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = t(&[2, 3], &[0.; 6]).matmul(&t(&[2, 3], &[0.; 6])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3] vs [2, 3]"), "{msg}");
    }

    #[test]
    fn softmax_symmetric_and_stable() {
        let s = t(&[1, 2], &[0., 0.]).softmax_rows().unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = t(&[1, 2], &[1000., 0.]).softmax_rows().unwrap();
        assert!((s.data()[0] - 1.0).abs() < 1e-12);
        assert!(s.data()[1].abs() < 1e-12);
    }

    #[test]
    fn masked_softmax_empty_row_is_zero() {
        let s = t(&[2, 2], &[1., 2., 3., 4.]);
        let m = t(&[2, 2], &[0., 0., 1., 1.]);
        let p = s.masked_softmax_rows(&m).unwrap();
        assert_eq!(&p.data()[..2], &[0., 0.]);
        assert!((p.data()[2] + p.data()[3] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn conv_identity_kernel() {
        let x = Tensor::<f64>::from_fn([1, 3, 3], |i| i as f64);
        let k = t(&[1, 1, 1, 1], &[1.]);
        assert_eq!(x.conv2d(&k, 1).unwrap(), x);
    }

    #[test]
    fn conv_ones_stride_two() {
        let x = Tensor::<f64>::ones([1, 4, 4]);
        let k = Tensor::<f64>::ones([1, 1, 2, 2]);
        let y = x.conv2d(&k, 2).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2]);
        assert_eq!(y.data(), &[4., 4., 4., 4.]);
    }

    #[test]
    fn conv_rejects_bad_geometry() {
        let x = Tensor::<f64>::ones([1, 5, 5]);
        let k = Tensor::<f64>::ones([1, 1, 2, 2]);
        assert!(x.conv2d(&k, 2).is_err());
        let k = Tensor::<f64>::ones([1, 2, 2, 2]);
        assert!(x.conv2d(&k, 1).is_err());
    }

    #[test]
    fn new_checks_numel() {
        assert!(Tensor::<f32>::new([2, 2], vec![0.0; 3]).is_err());
    }
}

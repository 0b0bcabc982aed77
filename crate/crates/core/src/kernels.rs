//! Numeric primitives of the decoder forward pass.
//!
//! Quantized matrix-vector products decode one block at a time into a small
//! stack buffer and accumulate per-block partial sums in `f32`; nothing is
//! dequantized ahead of time. Rows are independent and may be computed in
//! parallel; each row is always reduced in the same order, so output is
//! bitwise identical for any thread count.

use half::f16;
use rayon::prelude::*;
use thiserror::Error;

use crate::quant::{
    unpack_bits, DType, BLOCK_BQ4_BYTES, BLOCK_BQ5S_BYTES, BLOCK_BQ8_BYTES, QK4, QK8, QK_S,
    QK_S_SUB,
};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum KernelError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite input at index {0}")]
    NonFinite(usize),
    #[error("head dimension {0} is odd")]
    OddHeadDim(usize),
}

/// Below this many weights a matvec runs on the calling thread.
const PAR_MIN_WEIGHTS: usize = 8192;
const PAR_MIN_ROWS: usize = 8;

/// Read-only view of a row-major weight matrix `[rows × cols]`.
#[derive(Debug, Clone, Copy)]
pub struct WeightView<'a> {
    dtype: DType,
    rows: usize,
    cols: usize,
    data: &'a [u8],
}

impl<'a> WeightView<'a> {
    pub fn new(dtype: DType, rows: usize, cols: usize, data: &'a [u8]) -> Result<Self, KernelError> {
        let row_bytes = dtype.encoded_len(cols).ok_or_else(|| {
            KernelError::ShapeMismatch(format!(
                "{cols} columns is not a multiple of the {dtype} block length"
            ))
        })?;
        if row_bytes * rows != data.len() {
            return Err(KernelError::ShapeMismatch(format!(
                "{rows}x{cols} {dtype} needs {} bytes, got {}",
                row_bytes * rows,
                data.len()
            )));
        }
        Ok(Self {
            dtype,
            rows,
            cols,
            data,
        })
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row_bytes(&self) -> usize {
        self.data.len() / self.rows.max(1)
    }

    pub fn row(&self, r: usize) -> &'a [u8] {
        let n = self.row_bytes();
        &self.data[r * n..(r + 1) * n]
    }
}

/// `y = W x`.
pub fn matvec(w: &WeightView<'_>, x: &[f32]) -> Result<Vec<f32>, KernelError> {
    let mut out = vec![0f32; w.rows];
    matvec_into(w, x, &mut out)?;
    Ok(out)
}

pub fn matvec_into(w: &WeightView<'_>, x: &[f32], out: &mut [f32]) -> Result<(), KernelError> {
    if x.len() != w.cols {
        return Err(KernelError::ShapeMismatch(format!(
            "matrix has {} columns, vector has {}",
            w.cols,
            x.len()
        )));
    }
    if out.len() != w.rows {
        return Err(KernelError::ShapeMismatch(format!(
            "matrix has {} rows, output has {}",
            w.rows,
            out.len()
        )));
    }
    let dot = row_kernel(w.dtype);
    if w.rows * w.cols < PAR_MIN_WEIGHTS {
        for (r, y) in out.iter_mut().enumerate() {
            *y = dot(w.row(r), x);
        }
    } else {
        out.par_iter_mut()
            .enumerate()
            .with_min_len(PAR_MIN_ROWS)
            .for_each(|(r, y)| *y = dot(w.row(r), x));
    }
    Ok(())
}

/// Decodes row `r` of `w` into `out`.
pub fn dequantize_row(w: &WeightView<'_>, r: usize, out: &mut [f32]) {
    crate::quant::dequantize_into(w.row(r), w.dtype, out);
}

fn row_kernel(dtype: DType) -> fn(&[u8], &[f32]) -> f32 {
    match dtype {
        DType::F32 => dot_row_f32,
        DType::F16 => dot_row_f16,
        DType::Bq8 => dot_row_bq8,
        DType::Bq4 => dot_row_bq4,
        DType::Bq5s => dot_row_bq5s,
    }
}

/// Eight-lane dot product; the lane split lets the compiler vectorize while
/// keeping a fixed reduction order.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0f32; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    let mut tail = 0f32;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

#[inline]
fn sum(a: &[f32]) -> f32 {
    let mut acc = [0f32; 8];
    for c in a.chunks_exact(8) {
        for i in 0..8 {
            acc[i] += c[i];
        }
    }
    let tail: f32 = a.chunks_exact(8).remainder().iter().sum();
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

fn dot_row_f32(row: &[u8], x: &[f32]) -> f32 {
    let mut buf = [0f32; 64];
    let mut total = 0f32;
    for (bytes, xs) in row.chunks(64 * 4).zip(x.chunks(64)) {
        let n = xs.len();
        for (v, b) in buf[..n].iter_mut().zip(bytes.chunks_exact(4)) {
            *v = f32::from_le_bytes([b[0], b[1], b[2], b[3]]);
        }
        total += dot(&buf[..n], xs);
    }
    total
}

fn dot_row_f16(row: &[u8], x: &[f32]) -> f32 {
    let mut buf = [0f32; 64];
    let mut total = 0f32;
    for (bytes, xs) in row.chunks(64 * 2).zip(x.chunks(64)) {
        let n = xs.len();
        for (v, b) in buf[..n].iter_mut().zip(bytes.chunks_exact(2)) {
            *v = f16::from_le_bytes([b[0], b[1]]).to_f32();
        }
        total += dot(&buf[..n], xs);
    }
    total
}

fn dot_row_bq8(row: &[u8], x: &[f32]) -> f32 {
    let mut q = [0f32; QK8];
    let mut total = 0f32;
    for (block, xs) in row.chunks_exact(BLOCK_BQ8_BYTES).zip(x.chunks_exact(QK8)) {
        let d = f16::from_le_bytes([block[0], block[1]]).to_f32();
        for (v, &b) in q.iter_mut().zip(&block[2..]) {
            *v = b as i8 as f32;
        }
        total += d * dot(&q, xs);
    }
    total
}

fn dot_row_bq4(row: &[u8], x: &[f32]) -> f32 {
    let mut q = [0f32; QK4];
    let mut total = 0f32;
    for (block, xs) in row.chunks_exact(BLOCK_BQ4_BYTES).zip(x.chunks_exact(QK4)) {
        let d = f16::from_le_bytes([block[0], block[1]]).to_f32();
        for (i, &b) in block[2..].iter().enumerate() {
            q[2 * i] = ((b & 0x0f) as i32 - 8) as f32;
            q[2 * i + 1] = ((b >> 4) as i32 - 8) as f32;
        }
        total += d * dot(&q, xs);
    }
    total
}

fn dot_row_bq5s(row: &[u8], x: &[f32]) -> f32 {
    let mut scales = [0u8; 8];
    let mut mins = [0u8; 8];
    let mut qs = [0u8; QK_S];
    let mut q = [0f32; QK_S_SUB];
    let mut total = 0f32;
    for (block, xs) in row.chunks_exact(BLOCK_BQ5S_BYTES).zip(x.chunks_exact(QK_S)) {
        let d = f16::from_le_bytes([block[0], block[1]]).to_f32();
        let dmin = f16::from_le_bytes([block[2], block[3]]).to_f32();
        unpack_bits(&block[4..10], 6, &mut scales);
        unpack_bits(&block[10..16], 6, &mut mins);
        unpack_bits(&block[16..], 5, &mut qs);
        let mut scaled = 0f32;
        let mut offset = 0f32;
        for (j, (qsub, xsub)) in qs
            .chunks_exact(QK_S_SUB)
            .zip(xs.chunks_exact(QK_S_SUB))
            .enumerate()
        {
            for (v, &b) in q.iter_mut().zip(qsub) {
                *v = b as f32;
            }
            scaled += scales[j] as f32 * dot(&q, xsub);
            offset += mins[j] as f32 * sum(xsub);
        }
        total += d * scaled - dmin * offset;
    }
    total
}

/// `y_i = w_i * x_i / sqrt(mean(x^2) + eps)`.
pub fn rmsnorm(x: &[f32], w: &[f32], eps: f32) -> Result<Vec<f32>, KernelError> {
    let mut out = vec![0f32; x.len()];
    rmsnorm_into(x, w, eps, &mut out)?;
    Ok(out)
}

pub fn rmsnorm_into(x: &[f32], w: &[f32], eps: f32, out: &mut [f32]) -> Result<(), KernelError> {
    if x.len() != w.len() || x.len() != out.len() {
        return Err(KernelError::ShapeMismatch(format!(
            "rmsnorm over {} values with {} weights into {}",
            x.len(),
            w.len(),
            out.len()
        )));
    }
    let mean_sq = dot(x, x) / x.len().max(1) as f32;
    let inv = 1.0 / (mean_sq + eps).sqrt();
    for ((o, &xi), &wi) in out.iter_mut().zip(x).zip(w) {
        *o = wi * (xi * inv);
    }
    Ok(())
}

/// Numerically stable softmax; the sum is accumulated in `f64`.
pub fn softmax_in_place(x: &mut [f32]) -> Result<(), KernelError> {
    if let Some(i) = x.iter().position(|v| !v.is_finite()) {
        return Err(KernelError::NonFinite(i));
    }
    if x.is_empty() {
        return Ok(());
    }
    let max = x.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v));
    let mut total = 0f64;
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        total += *v as f64;
    }
    let inv = 1.0 / total;
    for v in x.iter_mut() {
        *v = (*v as f64 * inv) as f32;
    }
    Ok(())
}

/// Rotation table for one position, shared by every head.
#[derive(Debug, Clone)]
pub struct RopeTable {
    cos: Vec<f32>,
    sin: Vec<f32>,
}

impl RopeTable {
    pub fn new(pos: usize, head_dim: usize, theta_base: f32) -> Result<Self, KernelError> {
        if head_dim % 2 != 0 {
            return Err(KernelError::OddHeadDim(head_dim));
        }
        let half = head_dim / 2;
        let mut cos = Vec::with_capacity(half);
        let mut sin = Vec::with_capacity(half);
        for i in 0..half {
            let freq = (theta_base as f64).powf(-2.0 * i as f64 / head_dim as f64);
            let angle = pos as f64 * freq;
            cos.push(angle.cos() as f32);
            sin.push(angle.sin() as f32);
        }
        Ok(Self { cos, sin })
    }

    pub fn head_dim(&self) -> usize {
        self.cos.len() * 2
    }

    /// Rotates interleaved pairs `(v[2i], v[2i+1])` of one head in place.
    pub fn apply(&self, v: &mut [f32]) {
        debug_assert_eq!(v.len(), self.head_dim());
        for (pair, (&c, &s)) in v.chunks_exact_mut(2).zip(self.cos.iter().zip(&self.sin)) {
            let (a, b) = (pair[0], pair[1]);
            pair[0] = a * c - b * s;
            pair[1] = a * s + b * c;
        }
    }
}

/// Rotary position embedding of a single head vector, interleaved-pair convention.
pub fn rope(v: &mut [f32], pos: usize, theta_base: f32) -> Result<(), KernelError> {
    let table = RopeTable::new(pos, v.len(), theta_base)?;
    table.apply(v);
    Ok(())
}

#[inline]
pub fn silu_scalar(x: f32) -> f32 {
    x / (1.0 + (-x).exp())
}

pub fn silu(x: &mut [f32]) {
    for v in x {
        *v = silu_scalar(*v);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::quantize;

    fn f32_bytes(x: &[f32]) -> Vec<u8> {
        x.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    #[test]
    fn identity_matvec() {
        let mut eye = vec![0f32; 16];
        for i in 0..4 {
            eye[i * 5] = 1.0;
        }
        let bytes = f32_bytes(&eye);
        let w = WeightView::new(DType::F32, 4, 4, &bytes).unwrap();
        assert_eq!(matvec(&w, &[1.0, 2.0, 3.0, 4.0]).unwrap(), vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn scaled_identity_bq8() {
        let c = 0.75f32;
        let n = 32;
        let mut m = vec![0f32; n * n];
        for i in 0..n {
            m[i * n + i] = c;
        }
        let bytes = quantize(&m, DType::Bq8).unwrap();
        let w = WeightView::new(DType::Bq8, n, n, &bytes).unwrap();
        let x: Vec<f32> = (0..n).map(|i| i as f32 - 10.0).collect();
        let y = matvec(&w, &x).unwrap();
        for (yi, xi) in y.iter().zip(&x) {
            assert!((yi - c * xi).abs() <= (c / 127.0 / 2.0) * xi.abs() + 1e-6);
        }
    }

    #[test]
    fn shape_mismatch() {
        let bytes = f32_bytes(&[0.0; 8]);
        let w = WeightView::new(DType::F32, 2, 4, &bytes).unwrap();
        assert!(matches!(matvec(&w, &[0.0; 3]), Err(KernelError::ShapeMismatch(_))));
        assert!(WeightView::new(DType::F32, 3, 4, &bytes).is_err());
        assert!(WeightView::new(DType::Bq8, 1, 16, &[0; 18]).is_err());
    }

    #[test]
    fn rmsnorm_cases() {
        let y = rmsnorm(&[3.0; 8], &[1.0; 8], 1e-12).unwrap();
        assert!(y.iter().all(|v| (v - 1.0).abs() < 1e-5));
        let y = rmsnorm(&[0.0; 8], &[1.0; 8], 1e-5).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
        assert!(rmsnorm(&[1.0; 3], &[1.0; 2], 1e-5).is_err());
    }

    #[test]
    fn softmax_cases() {
        let mut x = [0.0f32, 0.0];
        softmax_in_place(&mut x).unwrap();
        assert_eq!(x, [0.5, 0.5]);
        let mut x = [1000.0f32; 3];
        softmax_in_place(&mut x).unwrap();
        for v in x {
            assert!((v - 1.0 / 3.0).abs() < 1e-7);
        }
        let mut x = [1.0, f32::NAN];
        assert_eq!(softmax_in_place(&mut x), Err(KernelError::NonFinite(1)));
    }

    #[test]
    fn rope_cases() {
        let mut v = vec![1.0, 2.0, 3.0, 4.0];
        rope(&mut v, 0, 10000.0).unwrap();
        assert_eq!(v, vec![1.0, 2.0, 3.0, 4.0]);

        // head_dim 2: the single pair rotates by pos * theta^0 = 1 radian
        let mut v = vec![1.0f32, 0.0];
        rope(&mut v, 1, 10000.0).unwrap();
        assert!((v[0] - 1f32.cos()).abs() < 1e-7);
        assert!((v[1] - 1f32.sin()).abs() < 1e-7);

        assert_eq!(rope(&mut [0.0; 3], 1, 10000.0), Err(KernelError::OddHeadDim(3)));
    }

    #[test]
    fn silu_values() {
        assert_eq!(silu_scalar(0.0), 0.0);
        assert!((silu_scalar(30.0) - 30.0).abs() < 1e-6);
        // -1 / (1 + e)
        let expect = -1.0f64 / (1.0 + std::f64::consts::E);
        assert!((silu_scalar(-1.0) as f64 - expect).abs() < 1e-6);
        assert!((expect + 0.268_941_4).abs() < 1e-6);
    }
}

//! Block-wise weight quantization.
//!
//! Three block formats are supported besides plain `F32`/`F16`:
//!
//! | dtype  | block | bytes | layout                                               |
//! |--------|-------|-------|------------------------------------------------------|
//! | `BQ8`  | 32    | 34    | f16 scale, 32 × i8                                   |
//! | `BQ4`  | 32    | 18    | f16 scale, 16 bytes of nibbles (low nibble = even)   |
//! | `BQ5S` | 256   | 176   | f16 d, f16 dmin, 12 B of 6-bit scales then mins,     |
//! |        |       |       | 160 B of 5-bit quants                                |
//!
//! All multi-byte fields are little-endian. Packed sub-byte fields use a
//! little-endian bit stream: value `k` of width `w` occupies bits
//! `[k*w, (k+1)*w)`, so eight 5-bit quants fill exactly one 5-byte group.
//!
//! Rounding is round-half-to-even everywhere.

use std::fmt;

use half::f16;
use num_rational::Ratio;
use thiserror::Error;

/// Exact bits-per-weight value.
pub type BitsPerWeight = Ratio<u64>;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum QuantError {
    #[error("length {len} is not a multiple of the {dtype} block length {block}")]
    BadLength {
        dtype: DType,
        len: usize,
        block: usize,
    },
    #[error("non-finite input value at index {index}")]
    NonFinite { index: usize },
    #[error("block scale does not fit in half precision (block {block})")]
    ScaleOverflow { block: usize },
}

/// Storage type of a tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DType {
    F32,
    F16,
    Bq8,
    Bq4,
    Bq5s,
}

impl DType {
    pub const ALL: [DType; 5] = [DType::F32, DType::F16, DType::Bq8, DType::Bq4, DType::Bq5s];

    /// Wire tag used in the container tensor directory.
    pub fn tag(self) -> u32 {
        match self {
            DType::F32 => 0,
            DType::F16 => 1,
            DType::Bq8 => 2,
            DType::Bq4 => 3,
            DType::Bq5s => 4,
        }
    }

    pub fn from_tag(tag: u32) -> Option<Self> {
        Self::ALL.into_iter().find(|d| d.tag() == tag)
    }

    pub fn name(self) -> &'static str {
        match self {
            DType::F32 => "F32",
            DType::F16 => "F16",
            DType::Bq8 => "BQ8",
            DType::Bq4 => "BQ4",
            DType::Bq5s => "BQ5S",
        }
    }

    /// Case-insensitive parse of the names printed by [`DType::name`].
    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL
            .into_iter()
            .find(|d| d.name().eq_ignore_ascii_case(name))
    }

    /// Number of weights per encoded block (1 for the float types).
    pub fn block_len(self) -> usize {
        match self {
            DType::F32 | DType::F16 => 1,
            DType::Bq8 | DType::Bq4 => 32,
            DType::Bq5s => QK_S,
        }
    }

    /// Bytes per encoded block.
    pub fn block_bytes(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F16 => 2,
            DType::Bq8 => BLOCK_BQ8_BYTES,
            DType::Bq4 => BLOCK_BQ4_BYTES,
            DType::Bq5s => BLOCK_BQ5S_BYTES,
        }
    }

    pub fn is_quantized(self) -> bool {
        matches!(self, DType::Bq8 | DType::Bq4 | DType::Bq5s)
    }

    pub fn bits_per_weight(self) -> BitsPerWeight {
        bits_per_weight(self)
    }

    /// Encoded size of `n_elements` weights, or `None` when `n_elements` is not
    /// a whole number of blocks.
    pub fn encoded_len(self, n_elements: usize) -> Option<usize> {
        let block = self.block_len();
        if n_elements % block != 0 {
            return None;
        }
        (n_elements / block).checked_mul(self.block_bytes())
    }
}

impl serde::Serialize for DType {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Average storage bits per weight, including scales.
pub fn bits_per_weight(dtype: DType) -> BitsPerWeight {
    Ratio::new(8 * dtype.block_bytes() as u64, dtype.block_len() as u64)
}

/// Bytes needed to hold `n_params` weights stored as `dtype`, scaled by
/// `overhead_ratio` to account for tensors kept at higher precision.
///
/// Panics if `n_params == 0` or `overhead_ratio` is not a finite value `>= 1`.
pub fn estimate_model_bytes(n_params: u64, dtype: DType, overhead_ratio: f64) -> u64 {
    assert!(n_params > 0, "n_params must be positive");
    assert!(
        overhead_ratio.is_finite() && overhead_ratio >= 1.0,
        "overhead_ratio must be >= 1, got {overhead_ratio}"
    );
    let bits = bits_per_weight(dtype);
    let exact = Ratio::new(n_params as u128 * *bits.numer() as u128, 8 * *bits.denom() as u128);
    if overhead_ratio == 1.0 {
        return exact.ceil().to_integer() as u64;
    }
    let bytes = *exact.numer() as f64 / *exact.denom() as f64;
    (bytes * overhead_ratio).ceil() as u64
}

pub const QK8: usize = 32;
pub const QK4: usize = 32;
/// Superblock length of `BQ5S`.
pub const QK_S: usize = 256;
/// Sub-block length inside a `BQ5S` superblock.
pub const QK_S_SUB: usize = 32;
const N_SUB: usize = QK_S / QK_S_SUB;

pub const BLOCK_BQ8_BYTES: usize = 2 + QK8;
pub const BLOCK_BQ4_BYTES: usize = 2 + QK4 / 2;
pub const BLOCK_BQ5S_BYTES: usize = 2 + 2 + 12 + QK_S * 5 / 8;

#[inline]
fn round_even(x: f32) -> f32 {
    x.round_ties_even()
}

#[inline]
fn read_f16(bytes: &[u8]) -> f16 {
    f16::from_le_bytes([bytes[0], bytes[1]])
}

fn half_scale(value: f32, block: usize) -> Result<f16, QuantError> {
    let h = f16::from_f32(value);
    if h.is_finite() {
        Ok(h)
    } else {
        Err(QuantError::ScaleOverflow { block })
    }
}

/// Writes `values` (each `< 2^bits`) into `out` as a little-endian bit stream.
pub(crate) fn pack_bits(values: &[u8], bits: u32, out: &mut [u8]) {
    debug_assert_eq!(out.len() * 8, values.len() * bits as usize);
    out.fill(0);
    let mut acc: u64 = 0;
    let mut n_acc = 0u32;
    let mut o = 0;
    for &v in values {
        debug_assert!((v as u32) < (1 << bits));
        acc |= (v as u64) << n_acc;
        n_acc += bits;
        while n_acc >= 8 {
            out[o] = acc as u8;
            o += 1;
            acc >>= 8;
            n_acc -= 8;
        }
    }
}

/// Inverse of [`pack_bits`].
#[inline]
pub(crate) fn unpack_bits(bytes: &[u8], bits: u32, out: &mut [u8]) {
    debug_assert_eq!(bytes.len() * 8, out.len() * bits as usize);
    debug_assert_eq!(out.len() % 8, 0);
    let mask = (1u64 << bits) - 1;
    // `bits` bytes hold exactly eight values
    for (group, vals) in bytes.chunks_exact(bits as usize).zip(out.chunks_exact_mut(8)) {
        let mut word = 0u64;
        for (i, &b) in group.iter().enumerate() {
            word |= (b as u64) << (8 * i);
        }
        for (k, v) in vals.iter_mut().enumerate() {
            *v = ((word >> (bits as usize * k)) & mask) as u8;
        }
    }
}

/// 8-bit symmetric block: `x = d * q`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockBq8 {
    pub d: f16,
    pub qs: [i8; QK8],
}

impl BlockBq8 {
    pub fn quantize(x: &[f32]) -> Result<Self, QuantError> {
        assert_eq!(x.len(), QK8);
        let amax = x.iter().fold(0f32, |m, v| m.max(v.abs()));
        let d = half_scale(amax / 127.0, 0)?;
        let df = d.to_f32();
        let mut qs = [0i8; QK8];
        if df != 0.0 {
            for (q, &v) in qs.iter_mut().zip(x) {
                *q = round_even(v / df).clamp(-127.0, 127.0) as i8;
            }
        }
        Ok(Self { d, qs })
    }

    pub fn from_bytes(bytes: &[u8]) -> Self {
        let mut qs = [0i8; QK8];
        for (q, &b) in qs.iter_mut().zip(&bytes[2..BLOCK_BQ8_BYTES]) {
            *q = b as i8;
        }
        Self {
            d: read_f16(bytes),
            qs,
        }
    }

    pub fn write_bytes(&self, out: &mut [u8]) {
        out[..2].copy_from_slice(&self.d.to_le_bytes());
        for (o, &q) in out[2..BLOCK_BQ8_BYTES].iter_mut().zip(&self.qs) {
            *o = q as u8;
        }
    }

    pub fn dequantize(&self, out: &mut [f32]) {
        let d = self.d.to_f32();
        for (o, &q) in out.iter_mut().zip(&self.qs) {
            *o = d * q as f32;
        }
    }
}

/// 4-bit symmetric block: `x = d * (n - 8)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockBq4 {
    pub d: f16,
    /// Unpacked nibbles, each in `0..=15`.
    pub nibbles: [u8; QK4],
}

impl BlockBq4 {
    pub fn quantize(x: &[f32]) -> Result<Self, QuantError> {
        assert_eq!(x.len(), QK4);
        // signed element of largest magnitude, first occurrence wins
        let mut max = 0f32;
        for &v in x {
            if v.abs() > max.abs() {
                max = v;
            }
        }
        let d = half_scale(max / -8.0, 0)?;
        let df = d.to_f32();
        let mut nibbles = [8u8; QK4];
        if df != 0.0 {
            for (n, &v) in nibbles.iter_mut().zip(x) {
                *n = (round_even(v / df) + 8.0).clamp(0.0, 15.0) as u8;
            }
        }
        Ok(Self { d, nibbles })
    }

    pub fn from_bytes(bytes: &[u8]) -> Self {
        let mut nibbles = [0u8; QK4];
        for (i, &b) in bytes[2..BLOCK_BQ4_BYTES].iter().enumerate() {
            nibbles[2 * i] = b & 0x0f;
            nibbles[2 * i + 1] = b >> 4;
        }
        Self {
            d: read_f16(bytes),
            nibbles,
        }
    }

    pub fn write_bytes(&self, out: &mut [u8]) {
        out[..2].copy_from_slice(&self.d.to_le_bytes());
        for (i, o) in out[2..BLOCK_BQ4_BYTES].iter_mut().enumerate() {
            *o = self.nibbles[2 * i] | (self.nibbles[2 * i + 1] << 4);
        }
    }

    pub fn dequantize(&self, out: &mut [f32]) {
        let d = self.d.to_f32();
        for (o, &n) in out.iter_mut().zip(&self.nibbles) {
            *o = d * (n as i32 - 8) as f32;
        }
    }
}

/// 5-bit affine superblock of 8 × 32 weights with 6-bit sub-block scales and
/// mins: `x = d * scales[j] * q - dmin * mins[j]` for sub-block `j`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SuperBlockBq5s {
    pub d: f16,
    pub dmin: f16,
    pub scales: [u8; N_SUB],
    pub mins: [u8; N_SUB],
    /// Unpacked quants, each in `0..=31`.
    pub qs: [u8; QK_S],
}

impl SuperBlockBq5s {
    pub fn quantize(x: &[f32]) -> Result<Self, QuantError> {
        assert_eq!(x.len(), QK_S);
        let mut s_raw = [0f32; N_SUB];
        let mut m_raw = [0f32; N_SUB];
        for (j, sub) in x.chunks_exact(QK_S_SUB).enumerate() {
            let mut lo = f32::INFINITY;
            let mut hi = f32::NEG_INFINITY;
            for &v in sub {
                lo = lo.min(v);
                hi = hi.max(v);
            }
            // the offset only ever shifts down, so a positive minimum is pinned to zero
            let lo = lo.min(0.0);
            m_raw[j] = -lo;
            s_raw[j] = (hi - lo) / 31.0;
        }
        let s_max = s_raw.iter().fold(0f32, |a, &b| a.max(b));
        let m_max = m_raw.iter().fold(0f32, |a, &b| a.max(b));
        let d = half_scale(s_max / 63.0, 0)?;
        let dmin = half_scale(m_max / 63.0, 0)?;
        let (df, dminf) = (d.to_f32(), dmin.to_f32());

        let mut scales = [0u8; N_SUB];
        let mut mins = [0u8; N_SUB];
        for j in 0..N_SUB {
            if df != 0.0 {
                scales[j] = round_even(s_raw[j] / df).clamp(0.0, 63.0) as u8;
            }
            if dminf != 0.0 {
                mins[j] = round_even(m_raw[j] / dminf).clamp(0.0, 63.0) as u8;
            }
        }

        let mut qs = [0u8; QK_S];
        for (j, (sub, q)) in x
            .chunks_exact(QK_S_SUB)
            .zip(qs.chunks_exact_mut(QK_S_SUB))
            .enumerate()
        {
            let scale = df * scales[j] as f32;
            if scale == 0.0 {
                continue;
            }
            let offset = dminf * mins[j] as f32;
            for (qi, &v) in q.iter_mut().zip(sub) {
                *qi = round_even((v + offset) / scale).clamp(0.0, 31.0) as u8;
            }
        }
        Ok(Self {
            d,
            dmin,
            scales,
            mins,
            qs,
        })
    }

    pub fn from_bytes(bytes: &[u8]) -> Self {
        let mut scales = [0u8; N_SUB];
        let mut mins = [0u8; N_SUB];
        unpack_bits(&bytes[4..10], 6, &mut scales);
        unpack_bits(&bytes[10..16], 6, &mut mins);
        let mut qs = [0u8; QK_S];
        unpack_bits(&bytes[16..BLOCK_BQ5S_BYTES], 5, &mut qs);
        Self {
            d: read_f16(&bytes[0..2]),
            dmin: read_f16(&bytes[2..4]),
            scales,
            mins,
            qs,
        }
    }

    pub fn write_bytes(&self, out: &mut [u8]) {
        out[0..2].copy_from_slice(&self.d.to_le_bytes());
        out[2..4].copy_from_slice(&self.dmin.to_le_bytes());
        pack_bits(&self.scales, 6, &mut out[4..10]);
        pack_bits(&self.mins, 6, &mut out[10..16]);
        pack_bits(&self.qs, 5, &mut out[16..BLOCK_BQ5S_BYTES]);
    }

    pub fn dequantize(&self, out: &mut [f32]) {
        let d = self.d.to_f32();
        let dmin = self.dmin.to_f32();
        for (j, (o, q)) in out
            .chunks_exact_mut(QK_S_SUB)
            .zip(self.qs.chunks_exact(QK_S_SUB))
            .enumerate()
        {
            let scale = d * self.scales[j] as f32;
            let offset = dmin * self.mins[j] as f32;
            for (oi, &qi) in o.iter_mut().zip(q) {
                *oi = scale * qi as f32 - offset;
            }
        }
    }
}

fn check_len(dtype: DType, len: usize) -> Result<(), QuantError> {
    let block = dtype.block_len();
    if len % block != 0 {
        return Err(QuantError::BadLength { dtype, len, block });
    }
    Ok(())
}

/// Encodes `x` as `dtype`. Output length is exactly `dtype.encoded_len(x.len())`.
pub fn quantize(x: &[f32], dtype: DType) -> Result<Vec<u8>, QuantError> {
    check_len(dtype, x.len())?;
    if let Some(index) = x.iter().position(|v| !v.is_finite()) {
        return Err(QuantError::NonFinite { index });
    }
    let block_len = dtype.block_len();
    let block_bytes = dtype.block_bytes();
    let mut out = vec![0u8; x.len() / block_len * block_bytes];
    let with_block = |e: QuantError, i: usize| match e {
        QuantError::ScaleOverflow { .. } => QuantError::ScaleOverflow { block: i },
        e => e,
    };
    for (i, (src, dst)) in x
        .chunks_exact(block_len)
        .zip(out.chunks_exact_mut(block_bytes))
        .enumerate()
    {
        match dtype {
            DType::F32 => dst.copy_from_slice(&src[0].to_le_bytes()),
            DType::F16 => dst.copy_from_slice(&f16::from_f32(src[0]).to_le_bytes()),
            DType::Bq8 => BlockBq8::quantize(src)
                .map_err(|e| with_block(e, i))?
                .write_bytes(dst),
            DType::Bq4 => BlockBq4::quantize(src)
                .map_err(|e| with_block(e, i))?
                .write_bytes(dst),
            DType::Bq5s => SuperBlockBq5s::quantize(src)
                .map_err(|e| with_block(e, i))?
                .write_bytes(dst),
        }
    }
    Ok(out)
}

/// Decodes `bytes` holding whole blocks of `dtype`.
pub fn dequantize(bytes: &[u8], dtype: DType) -> Result<Vec<f32>, QuantError> {
    let block_bytes = dtype.block_bytes();
    if bytes.len() % block_bytes != 0 {
        return Err(QuantError::BadLength {
            dtype,
            len: bytes.len(),
            block: block_bytes,
        });
    }
    let block_len = dtype.block_len();
    let mut out = vec![0f32; bytes.len() / block_bytes * block_len];
    dequantize_into(bytes, dtype, &mut out);
    Ok(out)
}

/// Decodes into a caller-provided buffer. Panics on inconsistent lengths.
pub fn dequantize_into(bytes: &[u8], dtype: DType, out: &mut [f32]) {
    let block_bytes = dtype.block_bytes();
    let block_len = dtype.block_len();
    assert_eq!(bytes.len() / block_bytes * block_len, out.len());
    for (src, dst) in bytes
        .chunks_exact(block_bytes)
        .zip(out.chunks_exact_mut(block_len))
    {
        match dtype {
            DType::F32 => dst[0] = f32::from_le_bytes([src[0], src[1], src[2], src[3]]),
            DType::F16 => dst[0] = read_f16(src).to_f32(),
            DType::Bq8 => BlockBq8::from_bytes(src).dequantize(dst),
            DType::Bq4 => BlockBq4::from_bytes(src).dequantize(dst),
            DType::Bq5s => SuperBlockBq5s::from_bytes(src).dequantize(dst),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn block_sizes_match_layout() {
        assert_eq!(BLOCK_BQ8_BYTES, 34);
        assert_eq!(BLOCK_BQ4_BYTES, 18);
        assert_eq!(BLOCK_BQ5S_BYTES, 176);
    }

    #[test]
    fn bits_per_weight_exact() {
        assert_eq!(bits_per_weight(DType::F32), Ratio::from_integer(32));
        assert_eq!(bits_per_weight(DType::F16), Ratio::from_integer(16));
        // (16 + 32*8) / 32
        assert_eq!(bits_per_weight(DType::Bq8), Ratio::new(17, 2));
        // (16 + 32*4) / 32
        assert_eq!(bits_per_weight(DType::Bq4), Ratio::new(9, 2));
        // (256*5 + 8*(6+6) + 32) / 256
        assert_eq!(bits_per_weight(DType::Bq5s), Ratio::new(11, 2));
        assert_eq!(
            bits_per_weight(DType::Bq5s),
            Ratio::new(256 * 5 + 96 + 32, 256)
        );
    }

    #[test]
    fn estimate_bytes() {
        assert_eq!(estimate_model_bytes(3_000_000_000, DType::Bq5s, 1.0), 2_062_500_000);
        assert_eq!(estimate_model_bytes(1, DType::F32, 1.0), 4);
        // 1 weight at 5.5 bits rounds up to a whole byte
        assert_eq!(estimate_model_bytes(1, DType::Bq5s, 1.0), 1);
        let with_overhead = estimate_model_bytes(3_000_000_000, DType::Bq5s, 1.07);
        assert!((with_overhead as f64 / 1e9 - 2.206875).abs() < 1e-6);
    }

    #[test]
    #[should_panic]
    fn estimate_rejects_zero_params() {
        estimate_model_bytes(0, DType::Bq8, 1.0);
    }

    #[test]
    fn zero_block_all_formats() {
        for dtype in [DType::Bq8, DType::Bq4, DType::Bq5s] {
            let x = vec![0f32; dtype.block_len()];
            let bytes = quantize(&x, dtype).unwrap();
            assert_eq!(dequantize(&bytes, dtype).unwrap(), x);
        }
        let b = BlockBq8::quantize(&[0.0; 32]).unwrap();
        assert_eq!(b.d.to_f32(), 0.0);
        assert!(b.qs.iter().all(|&q| q == 0));
        let b = BlockBq4::quantize(&[0.0; 32]).unwrap();
        assert_eq!(b.d.to_f32(), 0.0);
        // nibble 8 is the zero quant
        assert!(b.nibbles.iter().all(|&n| n == 8));
        let b = SuperBlockBq5s::quantize(&[0.0; 256]).unwrap();
        assert_eq!((b.d.to_f32(), b.dmin.to_f32()), (0.0, 0.0));
        assert!(b.qs.iter().all(|&q| q == 0));
        assert!(b.scales.iter().chain(&b.mins).all(|&s| s == 0));
    }

    #[test]
    fn bq8_exact_multiples_round_trip() {
        let d0 = 0.015625f32; // 2^-6, exact in f16
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut k: Vec<i32> = (0..32).map(|_| rng.random_range(-127..=127)).collect();
        k[5] = 127;
        k[9] = -127;
        let x: Vec<f32> = k.iter().map(|&k| d0 * k as f32).collect();
        let y = dequantize(&quantize(&x, DType::Bq8).unwrap(), DType::Bq8).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn bq4_unit_scale_nibble_eight_is_zero() {
        let mut bytes = vec![0u8; BLOCK_BQ4_BYTES];
        bytes[..2].copy_from_slice(&f16::from_f32(1.0).to_le_bytes());
        bytes[2..].fill(0x88);
        assert_eq!(dequantize(&bytes, DType::Bq4).unwrap(), vec![0.0; 32]);
    }

    #[test]
    fn bq4_extreme_maps_to_nibble_zero() {
        let mut x = [0.25f32; 32];
        x[3] = -2.0;
        let b = BlockBq4::quantize(&x).unwrap();
        assert_eq!(b.d.to_f32(), 0.25);
        assert_eq!(b.nibbles[3], 0);
        let mut y = [0f32; 32];
        b.dequantize(&mut y);
        assert_eq!(y[3], -2.0);
        assert_eq!(y[0], 0.25);
    }

    #[test]
    fn bq5s_constant_negative_sub_block_is_exact_offset() {
        let x = vec![-0.5f32; 256];
        let b = SuperBlockBq5s::quantize(&x).unwrap();
        assert!(b.scales.iter().all(|&s| s == 0));
        let mut y = vec![0f32; 256];
        b.dequantize(&mut y);
        for v in y {
            assert!((v + 0.5).abs() < 1e-3, "{v}");
        }
    }

    #[test]
    fn bad_length_and_non_finite() {
        assert!(matches!(
            quantize(&[0.0; 31], DType::Bq8),
            Err(QuantError::BadLength { len: 31, .. })
        ));
        assert!(matches!(
            quantize(&[0.0; 32], DType::Bq5s),
            Err(QuantError::BadLength { .. })
        ));
        let mut x = vec![0.0f32; 32];
        x[7] = f32::NAN;
        assert_eq!(quantize(&x, DType::Bq4), Err(QuantError::NonFinite { index: 7 }));
        x[7] = f32::INFINITY;
        assert_eq!(quantize(&x, DType::F32), Err(QuantError::NonFinite { index: 7 }));
        assert!(matches!(
            dequantize(&[0u8; 35], DType::Bq8),
            Err(QuantError::BadLength { .. })
        ));
    }

    #[test]
    fn scale_overflow_is_reported() {
        let mut x = vec![0f32; 64];
        x[40] = 1e10;
        assert_eq!(
            quantize(&x, DType::Bq8),
            Err(QuantError::ScaleOverflow { block: 1 })
        );
    }

    #[test]
    fn bit_packing_layout() {
        // eight 5-bit values 0..8 packed LE into 5 bytes
        let vals: Vec<u8> = (0..8).collect();
        let mut out = [0u8; 5];
        pack_bits(&vals, 5, &mut out);
        let word = u64::from_le_bytes([out[0], out[1], out[2], out[3], out[4], 0, 0, 0]);
        for (k, &v) in vals.iter().enumerate() {
            assert_eq!((word >> (5 * k)) & 31, v as u64);
        }
        let mut back = [0u8; 8];
        unpack_bits(&out, 5, &mut back);
        assert_eq!(back.to_vec(), vals);
    }

    #[test]
    fn bq5s_scales_packed_before_mins() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Vec<f32> = (0..256).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b = SuperBlockBq5s::quantize(&x).unwrap();
        let mut bytes = [0u8; BLOCK_BQ5S_BYTES];
        b.write_bytes(&mut bytes);
        let mut scales = [0u8; 8];
        unpack_bits(&bytes[4..10], 6, &mut scales);
        assert_eq!(scales, b.scales);
        assert_eq!(SuperBlockBq5s::from_bytes(&bytes), b);
    }

    #[test]
    fn encoded_len_matches_bits_per_weight() {
        for dtype in DType::ALL {
            for blocks in [1usize, 2, 7] {
                let n = blocks * dtype.block_len();
                let bytes = dtype.encoded_len(n).unwrap();
                let bpw = bits_per_weight(dtype);
                let expect = Ratio::from_integer(n as u64) * bpw / Ratio::from_integer(8);
                assert!(expect.is_integer());
                assert_eq!(bytes as u64, expect.to_integer());
            }
        }
        assert_eq!(DType::Bq5s.encoded_len(512), Some(352));
        assert_eq!(DType::Bq8.encoded_len(33), None);
    }

    #[test]
    fn dtype_names_and_tags() {
        for d in DType::ALL {
            assert_eq!(DType::from_tag(d.tag()), Some(d));
            assert_eq!(DType::from_name(&d.name().to_lowercase()), Some(d));
        }
        assert_eq!(DType::from_tag(9), None);
    }
}

//! Bit-exact software models of the low-precision number formats.

use crate::error::{Error, Result};

/// 8-bit float with 1 sign, 4 exponent (bias 7) and 3 mantissa bits.
///
/// Finite range is ±448, there are no infinities and `S.1111.111` is NaN.
/// Values with a zero exponent field are subnormal: `m/8 · 2⁻⁶`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Fp8E4M3(u8);

impl Fp8E4M3 {
    pub const MAX: f32 = 448.0;
    /// Smallest positive subnormal, 2⁻⁹.
    pub const MIN_POSITIVE: f32 = 1.0 / 512.0;
    pub const NAN: Fp8E4M3 = Fp8E4M3(0x7F);

    pub const fn from_bits(b: u8) -> Self {
        Self(b)
    }

    pub const fn to_bits(self) -> u8 {
        self.0
    }

    pub fn is_nan(self) -> bool {
        self.0 & 0x7F == 0x7F
    }

    pub fn to_f32(self) -> f32 {
        let sign = if self.0 & 0x80 != 0 { -1.0 } else { 1.0 };
        let e = ((self.0 >> 3) & 0x0F) as i32;
        let m = (self.0 & 0x07) as f32;
        if e == 15 && m == 7.0 {
            return f32::NAN;
        }
        let mag = if e == 0 {
            m / 8.0 * 2f32.powi(-6)
        } else {
            (1.0 + m / 8.0) * 2f32.powi(e - 7)
        };
        sign * mag
    }

    /// Round to nearest, ties to even; magnitudes beyond 448 saturate.
    pub fn from_f32(x: f32) -> Self {
        let sign: u8 = if x.is_sign_negative() { 0x80 } else { 0 };
        if x.is_nan() {
            return Self(0x7F | sign);
        }
        let a = x.abs();
        if a >= Self::MAX {
            return Self(0x7E | sign);
        }
        if a == 0.0 {
            return Self(sign);
        }
        let exp = (((a.to_bits() >> 23) & 0xFF) as i32 - 127).max(-6);
        let quantum = 2f32.powi(exp - 3);
        let q = (a / quantum).round_ties_even();
        let v = q * quantum;
        if v == 0.0 {
            return Self(sign);
        }
        if v < 2f32.powi(-6) {
            return Self(sign | (v / Self::MIN_POSITIVE) as u8);
        }
        let e = ((v.to_bits() >> 23) & 0xFF) as i32 - 127;
        let m = (v / 2f32.powi(e - 3)) as u8 - 8;
        Self(sign | (((e + 7) as u8) << 3) | m)
    }
}

/// Rounds `x` into E4M3.
pub fn fp8_round(x: f32) -> Fp8E4M3 {
    Fp8E4M3::from_f32(x)
}

/// Value of `x` after an E4M3 round trip.
pub fn fp8_quantize_value(x: f32) -> f32 {
    Fp8E4M3::from_f32(x).to_f32()
}

/// Round an f32 to the nearest bfloat16 (ties to even), returned as f32.
pub fn bf16_round(x: f32) -> f32 {
    if x.is_nan() {
        return x;
    }
    let b = x.to_bits();
    let lsb = (b >> 16) & 1;
    f32::from_bits(b.wrapping_add(0x7FFF + lsb) & 0xFFFF_0000)
}

/// Symmetric per-channel INT8 weights.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantTensorI8 {
    pub values: Vec<i8>,
    pub scales: Vec<f32>,
    pub rows: usize,
    pub cols: usize,
    /// 0: one scale per row, 1: one scale per column.
    pub axis: usize,
}

impl QuantTensorI8 {
    #[inline]
    pub fn scale_for(&self, r: usize, c: usize) -> f32 {
        if self.axis == 0 {
            self.scales[r]
        } else {
            self.scales[c]
        }
    }

    /// Dequantizes one row into `out`.
    pub fn dequantize_row(&self, r: usize, out: &mut [f32]) {
        let src = &self.values[r * self.cols..(r + 1) * self.cols];
        if self.axis == 0 {
            let s = self.scales[r];
            for (o, &q) in out.iter_mut().zip(src) {
                *o = q as f32 * s;
            }
        } else {
            for ((o, &q), &s) in out.iter_mut().zip(src).zip(&self.scales) {
                *o = q as f32 * s;
            }
        }
    }
}

/// Quantizes a row-major `[rows × cols]` tensor with one scale per channel
/// along `channel_axis`: `scale = absmax / 127` (1 for an all-zero channel),
/// values rounded half away from zero and clamped to ±127.
pub fn quantize_int8(
    t: &[f32],
    rows: usize,
    cols: usize,
    channel_axis: usize,
) -> Result<QuantTensorI8> {
    if t.len() != rows * cols {
        return Err(Error::Shape(format!(
            "tensor has {} elements, shape {rows}×{cols}",
            t.len()
        )));
    }
    if channel_axis > 1 {
        return Err(Error::Shape(format!(
            "channel axis {channel_axis} out of range for a matrix"
        )));
    }
    if let Some(i) = t.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("non-finite value at index {i}")));
    }
    let channels = if channel_axis == 0 { rows } else { cols };
    let mut absmax = vec![0f32; channels];
    for r in 0..rows {
        for c in 0..cols {
            let ch = if channel_axis == 0 { r } else { c };
            absmax[ch] = absmax[ch].max(t[r * cols + c].abs());
        }
    }
    let scales: Vec<f32> = absmax
        .iter()
        .map(|&m| if m == 0.0 { 1.0 } else { m / 127.0 })
        .collect();
    let mut values = Vec::with_capacity(t.len());
    for r in 0..rows {
        for c in 0..cols {
            let s = scales[if channel_axis == 0 { r } else { c }];
            let q = (t[r * cols + c] / s).round().clamp(-127.0, 127.0);
            values.push(q as i8);
        }
    }
    Ok(QuantTensorI8 {
        values,
        scales,
        rows,
        cols,
        axis: channel_axis,
    })
}

pub fn dequantize_int8(q: &QuantTensorI8) -> Vec<f32> {
    let mut out = vec![0f32; q.rows * q.cols];
    for r in 0..q.rows {
        q.dequantize_row(r, &mut out[r * q.cols..(r + 1) * q.cols]);
    }
    out
}

/// Per-tensor scaled E4M3 payload.
#[derive(Debug, Clone, PartialEq)]
pub struct Fp8Tensor {
    pub bits: Vec<u8>,
    pub scale: f32,
    pub rows: usize,
    pub cols: usize,
}

impl Fp8Tensor {
    pub fn quantize(t: &[f32], rows: usize, cols: usize) -> Result<Self> {
        if t.len() != rows * cols {
            return Err(Error::Shape(format!(
                "tensor has {} elements, shape {rows}×{cols}",
                t.len()
            )));
        }
        let absmax = t.iter().fold(0f32, |m, v| m.max(v.abs()));
        if !absmax.is_finite() {
            return Err(Error::Numeric("non-finite value in fp8 input".into()));
        }
        let scale = if absmax == 0.0 {
            1.0
        } else {
            absmax / Fp8E4M3::MAX
        };
        let bits = t
            .iter()
            .map(|&v| Fp8E4M3::from_f32(v / scale).to_bits())
            .collect();
        Ok(Self {
            bits,
            scale,
            rows,
            cols,
        })
    }

    pub fn dequantize_row(&self, r: usize, out: &mut [f32], table: &[f32; 256]) {
        for (o, &b) in out
            .iter_mut()
            .zip(&self.bits[r * self.cols..(r + 1) * self.cols])
        {
            *o = table[b as usize] * self.scale;
        }
    }

    pub fn dequantize(&self) -> Vec<f32> {
        let table = fp8_table();
        self.bits
            .iter()
            .map(|&b| table[b as usize] * self.scale)
            .collect()
    }
}

/// Decoded value of every E4M3 bit pattern.
pub fn fp8_table() -> &'static [f32; 256] {
    static TABLE: std::sync::OnceLock<[f32; 256]> = std::sync::OnceLock::new();
    TABLE.get_or_init(|| std::array::from_fn(|i| Fp8E4M3::from_bits(i as u8).to_f32()))
}

/// Dynamic absmax fake-quantization of a vector through E4M3:
/// `x ↦ fp8(x / s) · s` with `s = absmax / 448`.
pub fn fp8_fake_quant(xs: &mut [f32]) {
    let absmax = xs.iter().fold(0f32, |m, v| m.max(v.abs()));
    if absmax == 0.0 || !absmax.is_finite() {
        return;
    }
    let s = absmax / Fp8E4M3::MAX;
    let table = fp8_table();
    for v in xs.iter_mut() {
        *v = table[Fp8E4M3::from_f32(*v / s).to_bits() as usize] * s;
    }
}

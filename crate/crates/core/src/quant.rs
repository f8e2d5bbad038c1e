//! Absmax block quantization of weight tensors to int4 / int8.
//!
//! Each block of `block_size` consecutive elements (row-major) keeps one fp64
//! scale `s = max |x|` and integer codes `round(Qmax · x / s)` in
//! `[-Qmax, Qmax]`, with `Qmax = 7` for int4 and `127` for int8. Rounding is
//! half-away-from-zero. A block whose absmax is zero stores scale 0 and zero
//! codes.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_BLOCK_SIZE: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Bits {
    Int4,
    Int8,
}

impl Bits {
    pub fn from_width(width: u8) -> Result<Self> {
        match width {
            4 => Ok(Bits::Int4),
            8 => Ok(Bits::Int8),
            other => Err(Error::InvalidBits(other)),
        }
    }

    pub fn width(self) -> u8 {
        match self {
            Bits::Int4 => 4,
            Bits::Int8 => 8,
        }
    }

    pub fn qmax(self) -> i8 {
        match self {
            Bits::Int4 => 7,
            Bits::Int8 => 127,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedTensor {
    codes: Vec<i8>,
    scales: Vec<f64>,
    bits: Bits,
    block_size: usize,
    shape: Vec<usize>,
}

impl QuantizedTensor {
    /// Reassembles a quantized tensor from raw parts, checking every invariant.
    pub fn from_parts(
        codes: Vec<i8>,
        scales: Vec<f64>,
        bits: Bits,
        block_size: usize,
        shape: Vec<usize>,
    ) -> Result<Self> {
        if block_size == 0 {
            return Err(Error::InvalidBlockSize(block_size));
        }
        let n = crate::tensor::check_shape(&shape)?;
        if codes.len() != n || scales.len() != n.div_ceil(block_size) {
            return Err(Error::ShapeMismatch(format!(
                "{} codes / {} scales for shape {:?} with block size {}",
                codes.len(),
                scales.len(),
                shape,
                block_size
            )));
        }
        let qmax = bits.qmax();
        if codes.iter().any(|c| c.abs() > qmax) {
            return Err(Error::ShapeMismatch(format!("code outside [-{qmax}, {qmax}]")));
        }
        for (b, &s) in scales.iter().enumerate() {
            if !(s >= 0.0) || !s.is_finite() {
                return Err(Error::NonFiniteInput("quantized scale"));
            }
            let block = &codes[b * block_size..((b + 1) * block_size).min(n)];
            if s == 0.0 && block.iter().any(|&c| c != 0) {
                return Err(Error::ShapeMismatch(format!("zero-scale block {b} has nonzero codes")));
            }
        }
        Ok(Self {
            codes,
            scales,
            bits,
            block_size,
            shape,
        })
    }

    pub fn codes(&self) -> &[i8] {
        &self.codes
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    pub fn bits(&self) -> Bits {
        self.bits
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    /// Codes in the on-disk layout: int4 packs two codes per byte (low nibble
    /// first, 4-bit two's complement), int8 stores one byte per code.
    pub fn packed_codes(&self) -> Vec<u8> {
        match self.bits {
            Bits::Int8 => self.codes.iter().map(|&c| c as u8).collect(),
            Bits::Int4 => self
                .codes
                .chunks(2)
                .map(|pair| {
                    let lo = (pair[0] as u8) & 0x0f;
                    let hi = pair.get(1).map_or(0, |&c| (c as u8) & 0x0f);
                    lo | (hi << 4)
                })
                .collect(),
        }
    }

    /// Inverse of [`QuantizedTensor::packed_codes`] for `count` codes.
    pub fn unpack_codes(bytes: &[u8], bits: Bits, count: usize) -> Result<Vec<i8>> {
        let need = match bits {
            Bits::Int8 => count,
            Bits::Int4 => count.div_ceil(2),
        };
        if bytes.len() != need {
            return Err(Error::LengthMismatch(bytes.len(), need));
        }
        Ok(match bits {
            Bits::Int8 => bytes.iter().map(|&b| b as i8).collect(),
            Bits::Int4 => {
                let nibble = |v: u8| ((v << 4) as i8) >> 4;
                let mut out = Vec::with_capacity(count);
                for &b in bytes {
                    out.push(nibble(b & 0x0f));
                    out.push(nibble(b >> 4));
                }
                out.truncate(count);
                out
            }
        })
    }
}

/// Quantizes `x` blockwise with absmax scaling.
pub fn quantize_absmax(x: &Tensor, bits: Bits, block_size: usize) -> Result<QuantizedTensor> {
    if block_size == 0 {
        return Err(Error::InvalidBlockSize(block_size));
    }
    if !x.is_finite() {
        return Err(Error::NonFiniteInput("quantize_absmax"));
    }
    let qmax = f64::from(bits.qmax());
    let data = x.data();
    let mut codes = Vec::with_capacity(data.len());
    let mut scales = Vec::with_capacity(data.len().div_ceil(block_size));
    for block in data.chunks(block_size) {
        let s = block.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        scales.push(s);
        if s == 0.0 {
            codes.extend(std::iter::repeat_n(0i8, block.len()));
            continue;
        }
        codes.extend(block.iter().map(|&v| {
            // f64::round rounds half away from zero.
            (qmax * (v / s)).round().clamp(-qmax, qmax) as i8
        }));
    }
    Ok(QuantizedTensor {
        codes,
        scales,
        bits,
        block_size,
        shape: x.shape().to_vec(),
    })
}

/// `x̂ = (code / Qmax) · s`. The element that set the absmax maps back to
/// exactly `±s`, which makes requantization idempotent.
pub fn dequantize(q: &QuantizedTensor) -> Tensor {
    let qmax = f64::from(q.bits.qmax());
    let mut out = Vec::with_capacity(q.codes.len());
    for (block, &s) in q.codes.chunks(q.block_size).zip(&q.scales) {
        out.extend(block.iter().map(|&c| (f64::from(c) / qmax) * s));
    }
    Tensor::new(&q.shape, out, false).expect("quantized shape is valid")
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RoundtripError {
    pub max_abs: f64,
    pub mean_abs: f64,
    /// `max_b s_b / (2 · Qmax)`: the worst-case rounding error.
    pub bound: f64,
}

pub fn roundtrip_error(x: &Tensor, bits: Bits, block_size: usize) -> Result<RoundtripError> {
    let q = quantize_absmax(x, bits, block_size)?;
    let back = dequantize(&q);
    let mut max_abs: f64 = 0.0;
    let mut sum = 0.0;
    for (a, b) in x.data().iter().zip(back.data()) {
        let e = (a - b).abs();
        max_abs = max_abs.max(e);
        sum += e;
    }
    let qmax = f64::from(bits.qmax());
    let bound = q.scales.iter().fold(0.0f64, |m, &s| m.max(s / (2.0 * qmax)));
    Ok(RoundtripError {
        max_abs,
        mean_abs: sum / x.len() as f64,
        bound,
    })
}

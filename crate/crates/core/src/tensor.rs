//! Dense tensors, fixed-point formats, and the `NVCT` tensor file format.
//!
//! A [`Tensor`] is an immutable-shape, row-major `(batch, channels, rows,
//! cols)` array in one of two numeric modes:
//!
//! * **real** — `f64` payload, used by the reference oracles and by the
//!   real-arithmetic fast paths;
//! * **fixed-point** — `i32` integer codes with an attached [`FxpFormat`],
//!   used by the bit-accurate hardware paths.
//!
//! Conversion between the modes is explicit ([`Tensor::quantize`] /
//! [`Tensor::dequantize`]); arithmetic never mixes modes silently.

use std::io::{Read, Write};
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Magic bytes opening every `NVCT` tensor file.
pub const NVCT_MAGIC: [u8; 4] = *b"NVCT";
/// Current `NVCT` container version.
pub const NVCT_VERSION: u16 = 1;
/// Fixed `NVCT` header size in bytes.
pub const NVCT_HEADER_LEN: usize = 32;

/// Two's-complement fixed-point format: `total_bits` wide with
/// `fraction_bits` bits to the right of the binary point.
///
/// Quantization always rounds to nearest with ties to even and saturates at
/// the representable range; those are the only supported modes, so they are
/// properties of the type rather than parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FxpFormat {
    total_bits: u8,
    fraction_bits: u8,
    signed: bool,
}

impl FxpFormat {
    /// Builds a format, validating `0 < fraction_bits < total_bits <= 32`
    /// (signed formats additionally need at least 2 bits).
    pub fn new(total_bits: u8, fraction_bits: u8, signed: bool) -> Result<Self> {
        if total_bits == 0 || total_bits > 32 {
            return Err(Error::Invalid(format!(
                "fixed-point total_bits must be in 1..=32, got {total_bits}"
            )));
        }
        if fraction_bits == 0 || fraction_bits >= total_bits {
            return Err(Error::Invalid(format!(
                "fixed-point fraction_bits must satisfy 0 < fraction_bits < total_bits, \
                 got {fraction_bits} of {total_bits}"
            )));
        }
        if signed && total_bits < 2 {
            return Err(Error::Invalid(
                "signed fixed-point needs at least 2 total bits".into(),
            ));
        }
        Ok(Self {
            total_bits,
            fraction_bits,
            signed,
        })
    }

    /// Default weight format: signed 16-bit with 12 fraction bits.
    pub fn weights_default() -> Self {
        Self::new(16, 12, true).expect("static format is valid")
    }

    /// Default activation format: signed 12-bit with 9 fraction bits.
    pub fn activations_default() -> Self {
        Self::new(12, 9, true).expect("static format is valid")
    }

    pub fn total_bits(&self) -> u8 {
        self.total_bits
    }

    pub fn fraction_bits(&self) -> u8 {
        self.fraction_bits
    }

    pub fn signed(&self) -> bool {
        self.signed
    }

    /// Smallest representable code.
    pub fn min_code(&self) -> i64 {
        if self.signed {
            -(1i64 << (self.total_bits - 1))
        } else {
            0
        }
    }

    /// Largest representable code.
    pub fn max_code(&self) -> i64 {
        if self.signed {
            (1i64 << (self.total_bits - 1)) - 1
        } else {
            (1i64 << self.total_bits) - 1
        }
    }

    /// Scale factor `2^fraction_bits` (exact in `f64`).
    pub fn scale(&self) -> f64 {
        (1u64 << self.fraction_bits) as f64
    }

    /// Quantizes one real value: scale, round to nearest even, saturate.
    /// Returns `(code, saturated)`. NaN maps to code 0 and is counted as
    /// saturated so it cannot pass unnoticed.
    pub fn quantize_value(&self, v: f64) -> (i64, bool) {
        if v.is_nan() {
            return (0, true);
        }
        let scaled = v * self.scale();
        let rounded = scaled.round_ties_even();
        let (min, max) = (self.min_code(), self.max_code());
        if rounded < min as f64 {
            (min, true)
        } else if rounded > max as f64 {
            (max, true)
        } else {
            (rounded as i64, false)
        }
    }

    /// Exact real value of a code: `code / 2^fraction_bits`.
    pub fn dequantize_value(&self, code: i64) -> f64 {
        code as f64 / self.scale()
    }

    /// Whether `code` lies in the representable range.
    pub fn contains(&self, code: i64) -> bool {
        (self.min_code()..=self.max_code()).contains(&code)
    }

    /// Saturates an (already rounded) integer code into range, returning
    /// `(code, saturated)`.
    pub fn saturate(&self, code: i64) -> (i64, bool) {
        let (min, max) = (self.min_code(), self.max_code());
        if code < min {
            (min, true)
        } else if code > max {
            (max, true)
        } else {
            (code, false)
        }
    }

    /// Requantizes an accumulator carrying `from_fraction_bits` fraction
    /// bits into this format: one round-to-nearest-even plus saturation.
    /// Widening (`from < to`) is an exact left shift. Returns
    /// `(code, saturated)`.
    pub fn requantize_from(&self, acc: i64, from_fraction_bits: u32) -> (i64, bool) {
        let to = self.fraction_bits as u32;
        if from_fraction_bits >= to {
            self.saturate(shift_round_even(acc, from_fraction_bits - to))
        } else {
            self.saturate(acc << (to - from_fraction_bits))
        }
    }
}

/// Divides `acc` by `2^shift`, rounding to nearest with ties to even —
/// the integer-domain twin of `f64::round_ties_even`, exact for any `i64`.
pub fn shift_round_even(acc: i64, shift: u32) -> i64 {
    if shift == 0 {
        return acc;
    }
    let floor = acc >> shift; // arithmetic shift: floor division
    let rem = acc - (floor << shift); // in [0, 2^shift)
    let half = 1i64 << (shift - 1);
    if rem > half || (rem == half && (floor & 1) == 1) {
        floor + 1
    } else {
        floor
    }
}

/// Tensor shape `(batch, channels, rows, cols)`, row-major.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub batch: usize,
    pub channels: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Shape {
    pub fn new(batch: usize, channels: usize, rows: usize, cols: usize) -> Self {
        Self {
            batch,
            channels,
            rows,
            cols,
        }
    }

    /// Total element count.
    pub fn volume(&self) -> usize {
        self.batch * self.channels * self.rows * self.cols
    }

    /// Flat row-major index of `(b, c, r, col)`.
    #[inline]
    pub fn index(&self, b: usize, c: usize, r: usize, col: usize) -> usize {
        debug_assert!(b < self.batch && c < self.channels && r < self.rows && col < self.cols);
        ((b * self.channels + c) * self.rows + r) * self.cols + col
    }

    fn check_fits_u32(&self) -> Result<()> {
        for (name, v) in [
            ("batch", self.batch),
            ("channels", self.channels),
            ("rows", self.rows),
            ("cols", self.cols),
        ] {
            if v > u32::MAX as usize {
                return Err(Error::Invalid(format!("shape {name}={v} exceeds u32 range")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Payload {
    Real(Vec<f64>),
    Fxp { fmt: FxpFormat, codes: Vec<i32> },
}

/// Dense row-major tensor in real or fixed-point mode.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Shape,
    payload: Payload,
}

/// Result of quantizing a tensor: the fixed-point tensor plus how many
/// elements saturated. Saturation is reported, never silently dropped and
/// never an error.
#[derive(Clone, Debug, PartialEq)]
pub struct Quantized {
    pub tensor: Tensor,
    pub saturated: u64,
}

impl Tensor {
    /// All-zero real tensor.
    pub fn zeros_real(shape: Shape) -> Self {
        Self {
            payload: Payload::Real(vec![0.0; shape.volume()]),
            shape,
        }
    }

    /// All-zero fixed-point tensor in `fmt`.
    pub fn zeros_fxp(shape: Shape, fmt: FxpFormat) -> Self {
        Self {
            payload: Payload::Fxp {
                fmt,
                codes: vec![0; shape.volume()],
            },
            shape,
        }
    }

    /// Real tensor from a flat row-major vector.
    pub fn from_real_vec(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.volume() {
            return Err(Error::Shape(format!(
                "payload has {} elements, shape {:?} needs {}",
                data.len(),
                shape,
                shape.volume()
            )));
        }
        Ok(Self {
            shape,
            payload: Payload::Real(data),
        })
    }

    /// Fixed-point tensor from a flat row-major code vector. Every code must
    /// lie inside `fmt`'s representable range.
    pub fn from_codes(shape: Shape, fmt: FxpFormat, codes: Vec<i32>) -> Result<Self> {
        if codes.len() != shape.volume() {
            return Err(Error::Shape(format!(
                "payload has {} elements, shape {:?} needs {}",
                codes.len(),
                shape,
                shape.volume()
            )));
        }
        if let Some(bad) = codes.iter().find(|&&c| !fmt.contains(c as i64)) {
            return Err(Error::Numeric(format!(
                "code {bad} outside range of {}-bit format",
                fmt.total_bits()
            )));
        }
        Ok(Self {
            shape,
            payload: Payload::Fxp { fmt, codes },
        })
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn is_real(&self) -> bool {
        matches!(self.payload, Payload::Real(_))
    }

    pub fn is_fxp(&self) -> bool {
        matches!(self.payload, Payload::Fxp { .. })
    }

    /// Fixed-point format, if in fixed-point mode.
    pub fn fxp_format(&self) -> Option<FxpFormat> {
        match &self.payload {
            Payload::Real(_) => None,
            Payload::Fxp { fmt, .. } => Some(*fmt),
        }
    }

    /// Flat real payload; errors in fixed-point mode.
    pub fn real_slice(&self) -> Result<&[f64]> {
        match &self.payload {
            Payload::Real(d) => Ok(d),
            Payload::Fxp { .. } => Err(Error::Numeric(
                "real payload requested from a fixed-point tensor".into(),
            )),
        }
    }

    /// Flat code payload; errors in real mode.
    pub fn code_slice(&self) -> Result<&[i32]> {
        match &self.payload {
            Payload::Fxp { codes, .. } => Ok(codes),
            Payload::Real(_) => Err(Error::Numeric(
                "code payload requested from a real tensor".into(),
            )),
        }
    }

    /// Real element accessor (errors in fixed-point mode).
    pub fn get_real(&self, b: usize, c: usize, r: usize, col: usize) -> Result<f64> {
        let idx = self.checked_index(b, c, r, col)?;
        Ok(self.real_slice()?[idx])
    }

    /// Real element store (errors in fixed-point mode).
    pub fn set_real(&mut self, b: usize, c: usize, r: usize, col: usize, v: f64) -> Result<()> {
        let idx = self.checked_index(b, c, r, col)?;
        match &mut self.payload {
            Payload::Real(d) => {
                d[idx] = v;
                Ok(())
            }
            Payload::Fxp { .. } => Err(Error::Numeric(
                "real store attempted on a fixed-point tensor".into(),
            )),
        }
    }

    /// Code accessor (errors in real mode).
    pub fn get_code(&self, b: usize, c: usize, r: usize, col: usize) -> Result<i32> {
        let idx = self.checked_index(b, c, r, col)?;
        Ok(self.code_slice()?[idx])
    }

    /// Code store (errors in real mode or when `v` is out of range).
    pub fn set_code(&mut self, b: usize, c: usize, r: usize, col: usize, v: i32) -> Result<()> {
        let idx = self.checked_index(b, c, r, col)?;
        match &mut self.payload {
            Payload::Fxp { fmt, codes } => {
                if !fmt.contains(v as i64) {
                    return Err(Error::Numeric(format!(
                        "code {v} outside range of {}-bit format",
                        fmt.total_bits()
                    )));
                }
                codes[idx] = v;
                Ok(())
            }
            Payload::Real(_) => Err(Error::Numeric(
                "code store attempted on a real tensor".into(),
            )),
        }
    }

    /// Real value of an element in either mode (fixed-point codes are
    /// dequantized exactly).
    pub fn real_value(&self, b: usize, c: usize, r: usize, col: usize) -> f64 {
        let idx = self.shape.index(b, c, r, col);
        match &self.payload {
            Payload::Real(d) => d[idx],
            Payload::Fxp { fmt, codes } => fmt.dequantize_value(codes[idx] as i64),
        }
    }

    fn checked_index(&self, b: usize, c: usize, r: usize, col: usize) -> Result<usize> {
        let s = self.shape;
        if b >= s.batch || c >= s.channels || r >= s.rows || col >= s.cols {
            return Err(Error::Invalid(format!(
                "index ({b},{c},{r},{col}) out of bounds for shape {s:?}"
            )));
        }
        Ok(s.index(b, c, r, col))
    }

    /// Quantizes a real tensor into `fmt`, reporting the saturation count.
    pub fn quantize(&self, fmt: FxpFormat) -> Result<Quantized> {
        let data = self.real_slice().map_err(|_| {
            Error::Numeric("quantize expects a real tensor; dequantize first to re-quantize".into())
        })?;
        let mut codes = Vec::with_capacity(data.len());
        let mut saturated = 0u64;
        for &v in data {
            let (code, sat) = fmt.quantize_value(v);
            if sat {
                saturated += 1;
            }
            codes.push(code as i32);
        }
        Ok(Quantized {
            tensor: Tensor {
                shape: self.shape,
                payload: Payload::Fxp { fmt, codes },
            },
            saturated,
        })
    }

    /// Dequantizes a fixed-point tensor back to real mode (exact).
    pub fn dequantize(&self) -> Result<Tensor> {
        match &self.payload {
            Payload::Fxp { fmt, codes } => {
                let data = codes
                    .iter()
                    .map(|&c| fmt.dequantize_value(c as i64))
                    .collect();
                Ok(Tensor {
                    shape: self.shape,
                    payload: Payload::Real(data),
                })
            }
            Payload::Real(_) => Err(Error::Numeric(
                "dequantize expects a fixed-point tensor".into(),
            )),
        }
    }

    /// Copies a contiguous row range (same batch/channels/cols) into a new
    /// tensor. Used by the chain simulator to model row-granular residency.
    pub fn slice_rows(&self, range: Range<usize>) -> Result<Tensor> {
        let s = self.shape;
        if range.start > range.end || range.end > s.rows {
            return Err(Error::Invalid(format!(
                "row range {range:?} out of bounds for {} rows",
                s.rows
            )));
        }
        let out_shape = Shape::new(s.batch, s.channels, range.len(), s.cols);
        let mut out = match &self.payload {
            Payload::Real(_) => Tensor::zeros_real(out_shape),
            Payload::Fxp { fmt, .. } => Tensor::zeros_fxp(out_shape, *fmt),
        };
        for b in 0..s.batch {
            for c in 0..s.channels {
                for (ro, ri) in range.clone().enumerate() {
                    for col in 0..s.cols {
                        let src = s.index(b, c, ri, col);
                        let dst = out_shape.index(b, c, ro, col);
                        match (&mut out.payload, &self.payload) {
                            (Payload::Real(o), Payload::Real(i)) => o[dst] = i[src],
                            (Payload::Fxp { codes: o, .. }, Payload::Fxp { codes: i, .. }) => {
                                o[dst] = i[src]
                            }
                            _ => unreachable!("payload modes match by construction"),
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Serializes to the `NVCT` container.
    ///
    /// Layout (little-endian): 4-byte magic `NVCT`, `u16` version, `u8`
    /// numeric mode (0 real, 1 signed fixed-point, 2 unsigned fixed-point),
    /// `u8` total bits, `u8` fraction bits, 7 zero pad bytes, then four
    /// `u32` shape fields (batch, channels, rows, cols) and the payload as
    /// `f64` (real) or `i32` (fixed-point) words.
    pub fn write_nvct<W: Write>(&self, mut w: W) -> Result<()> {
        self.shape.check_fits_u32()?;
        let mut header = [0u8; NVCT_HEADER_LEN];
        header[0..4].copy_from_slice(&NVCT_MAGIC);
        header[4..6].copy_from_slice(&NVCT_VERSION.to_le_bytes());
        let (mode, total, frac) = match &self.payload {
            Payload::Real(_) => (0u8, 0u8, 0u8),
            Payload::Fxp { fmt, .. } => (
                if fmt.signed() { 1 } else { 2 },
                fmt.total_bits(),
                fmt.fraction_bits(),
            ),
        };
        header[6] = mode;
        header[7] = total;
        header[8] = frac;
        // bytes 9..16 stay zero (reserved padding)
        header[16..20].copy_from_slice(&(self.shape.batch as u32).to_le_bytes());
        header[20..24].copy_from_slice(&(self.shape.channels as u32).to_le_bytes());
        header[24..28].copy_from_slice(&(self.shape.rows as u32).to_le_bytes());
        header[28..32].copy_from_slice(&(self.shape.cols as u32).to_le_bytes());
        w.write_all(&header)?;
        match &self.payload {
            Payload::Real(data) => {
                for v in data {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
            Payload::Fxp { codes, .. } => {
                for c in codes {
                    w.write_all(&c.to_le_bytes())?;
                }
            }
        }
        Ok(())
    }

    /// Deserializes from the `NVCT` container, validating magic, version,
    /// mode, format, and exact payload length.
    pub fn read_nvct<R: Read>(mut r: R) -> Result<Self> {
        let mut header = [0u8; NVCT_HEADER_LEN];
        r.read_exact(&mut header)
            .map_err(|e| Error::Format(format!("NVCT header truncated: {e}")))?;
        if header[0..4] != NVCT_MAGIC {
            return Err(Error::Format("bad magic, expected NVCT".into()));
        }
        let version = u16::from_le_bytes([header[4], header[5]]);
        if version != NVCT_VERSION {
            return Err(Error::Format(format!(
                "unsupported NVCT version {version}, expected {NVCT_VERSION}"
            )));
        }
        let mode = header[6];
        let total = header[7];
        let frac = header[8];
        let read_u32 = |o: usize| u32::from_le_bytes(header[o..o + 4].try_into().unwrap()) as usize;
        let shape = Shape::new(read_u32(16), read_u32(20), read_u32(24), read_u32(28));
        let volume = shape.volume();
        let mut payload_bytes = Vec::new();
        r.read_to_end(&mut payload_bytes)?;
        match mode {
            0 => {
                if payload_bytes.len() != volume * 8 {
                    return Err(Error::Format(format!(
                        "real payload is {} bytes, shape needs {}",
                        payload_bytes.len(),
                        volume * 8
                    )));
                }
                let data = payload_bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                Tensor::from_real_vec(shape, data)
            }
            1 | 2 => {
                let fmt = FxpFormat::new(total, frac, mode == 1)?;
                if payload_bytes.len() != volume * 4 {
                    return Err(Error::Format(format!(
                        "fixed-point payload is {} bytes, shape needs {}",
                        payload_bytes.len(),
                        volume * 4
                    )));
                }
                let codes = payload_bytes
                    .chunks_exact(4)
                    .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                Tensor::from_codes(shape, fmt, codes)
            }
            other => Err(Error::Format(format!("unknown numeric mode byte {other}"))),
        }
    }

    /// Writes the tensor to a file in `NVCT` format.
    pub fn save<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let mut buf = Vec::new();
        self.write_nvct(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    /// Reads a tensor from an `NVCT` file.
    pub fn load<P: AsRef<Path>>(path: P) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read_nvct(bytes.as_slice())
    }
}

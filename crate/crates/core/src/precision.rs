//! Run-level floating point precision.
//!
//! All vectors are stored as `f64`. A run at lower precision rounds every
//! arithmetic result back into its format, which for FP32 reproduces native
//! single precision exactly (a double has more than twice the significand
//! bits, so the double rounding is harmless for `+ - * /`). FP16 rounds
//! individual results through a half-precision value and accumulates sums
//! in FP32.

use std::fmt;
use std::str::FromStr;

use half::f16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Precision {
    Fp16,
    Fp32,
    #[default]
    Fp64,
}

impl Precision {
    /// Bits per scalar on the wire.
    pub fn bits(self) -> u64 {
        match self {
            Precision::Fp16 => 16,
            Precision::Fp32 => 32,
            Precision::Fp64 => 64,
        }
    }

    pub fn bytes(self) -> usize {
        (self.bits() / 8) as usize
    }

    /// Rounds a value into this format.
    #[inline]
    pub fn round(self, v: f64) -> f64 {
        match self {
            Precision::Fp16 => f16::from_f64(v).to_f64(),
            Precision::Fp32 => v as f32 as f64,
            Precision::Fp64 => v,
        }
    }

    /// Rounding applied to running sums.
    #[inline]
    pub fn round_acc(self, v: f64) -> f64 {
        match self {
            Precision::Fp16 | Precision::Fp32 => v as f32 as f64,
            Precision::Fp64 => v,
        }
    }

    #[inline]
    pub fn mul(self, a: f64, b: f64) -> f64 {
        self.round(a * b)
    }

    #[inline]
    pub fn add(self, a: f64, b: f64) -> f64 {
        self.round(a + b)
    }

    #[inline]
    pub fn sub(self, a: f64, b: f64) -> f64 {
        self.round(a - b)
    }

    #[inline]
    pub fn div(self, a: f64, b: f64) -> f64 {
        self.round(a / b)
    }

    /// Accumulates `acc + v` at accumulator precision.
    #[inline]
    pub fn acc(self, acc: f64, v: f64) -> f64 {
        self.round_acc(acc + v)
    }

    /// Inner product with per-product rounding and accumulator rounding.
    pub fn dot(self, a: &[f64], b: &[f64]) -> f64 {
        debug_assert_eq!(a.len(), b.len());
        let mut acc = 0.0;
        for (x, y) in a.iter().zip(b) {
            acc = self.acc(acc, self.mul(*x, *y));
        }
        self.round(acc)
    }

    /// Writes one scalar little-endian.
    pub fn write_scalar(self, v: f64, out: &mut Vec<u8>) {
        match self {
            Precision::Fp16 => out.extend_from_slice(&f16::from_f64(v).to_le_bytes()),
            Precision::Fp32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
            Precision::Fp64 => out.extend_from_slice(&v.to_le_bytes()),
        }
    }

    /// Reads one scalar from exactly `self.bytes()` bytes.
    pub fn read_scalar(self, bytes: &[u8]) -> f64 {
        match self {
            Precision::Fp16 => f16::from_le_bytes([bytes[0], bytes[1]]).to_f64(),
            Precision::Fp32 => {
                f32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]) as f64
            }
            Precision::Fp64 => f64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")),
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::Fp16 => "fp16",
            Precision::Fp32 => "fp32",
            Precision::Fp64 => "fp64",
        })
    }
}

impl FromStr for Precision {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "fp16" | "f16" | "half" => Ok(Precision::Fp16),
            "fp32" | "f32" | "single" => Ok(Precision::Fp32),
            "fp64" | "f64" | "double" => Ok(Precision::Fp64),
            other => Err(format!("unknown precision `{other}`")),
        }
    }
}

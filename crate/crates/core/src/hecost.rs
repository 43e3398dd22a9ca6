//! Size model for CKKS keys and ciphertexts at the parameter set matching
//! AES-128 security. No homomorphic arithmetic happens here.

use std::io::{self, Write};

use thiserror::Error;

use crate::precision::Precision;
use crate::secenv::AEAD_OVERHEAD;

/// Smallest ring degree considered equivalent to AES-128.
pub const MIN_POLY_DEGREE: u64 = 16_384;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum HeError {
    #[error("poly_degree must be a power of two >= {MIN_POLY_DEGREE}, got {0}")]
    PolyDegree(u64),
    #[error("coeff_modulus_bits must be positive")]
    ModulusBits,
    #[error("vector length must be at least 1")]
    EmptyVector,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CkksParams {
    poly_degree: u64,
    q_bits: u64,
}

impl CkksParams {
    pub fn new(poly_degree: u64, q_bits: u64) -> Result<Self, HeError> {
        if !poly_degree.is_power_of_two() || poly_degree < MIN_POLY_DEGREE {
            return Err(HeError::PolyDegree(poly_degree));
        }
        if q_bits == 0 {
            return Err(HeError::ModulusBits);
        }
        Ok(Self {
            poly_degree,
            q_bits,
        })
    }

    pub fn poly_degree(&self) -> u64 {
        self.poly_degree
    }

    pub fn q_bits(&self) -> u64 {
        self.q_bits
    }

    pub fn slots(&self) -> u64 {
        self.poly_degree / 2
    }
}

/// N = 2^14 with the 60/30/30/30/60 modulus chain (210 bits).
pub fn aes128_equivalent_params() -> CkksParams {
    CkksParams {
        poly_degree: 16_384,
        q_bits: 210,
    }
}

/// N = 2^14 with the 438-bit modulus bound.
pub fn aes128_equivalent_params_strict() -> CkksParams {
    CkksParams {
        poly_degree: 16_384,
        q_bits: 438,
    }
}

/// Public key size, `ceil(N * q / 8)`.
pub fn key_size_bytes(p: &CkksParams) -> u64 {
    (p.poly_degree * p.q_bits).div_ceil(8)
}

/// Number of ciphertexts needed for `d` values.
pub fn ciphertext_count(d: u64, p: &CkksParams) -> Result<u64, HeError> {
    if d == 0 {
        return Err(HeError::EmptyVector);
    }
    Ok(d.div_ceil(p.slots()))
}

/// Fresh ciphertexts (two polynomials of N coefficients each) for `d`
/// values. The count of nonzeros plays no role.
pub fn ciphertext_bytes(d: u64, p: &CkksParams) -> Result<u64, HeError> {
    let per_ct = (2 * p.poly_degree * p.q_bits).div_ceil(8);
    Ok(ciphertext_count(d, p)? * per_ct)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CkksTraffic {
    pub up_per_client: u64,
    pub down_per_client: u64,
    pub one_time_key: u64,
}

/// Each client uploads its encrypted vector and receives one aggregated
/// ciphertext back. `n` does not change per-client traffic.
pub fn ckks_traffic_per_round(d: u64, _n: u64, p: &CkksParams) -> Result<CkksTraffic, HeError> {
    let ct = ciphertext_bytes(d, p)?;
    Ok(CkksTraffic {
        up_per_client: ct,
        down_per_client: ct,
        one_time_key: key_size_bytes(p),
    })
}

/// Memory the master needs to hold `n` encrypted gradients at once.
pub fn master_buffer_bytes(d: u64, n: u64, p: &CkksParams) -> Result<u64, HeError> {
    Ok(n * ciphertext_bytes(d, p)?)
}

/// AES envelope for the same dense vector: payload plus nonce and tag.
pub fn aes_envelope_bytes(d: u64, precision: Precision) -> u64 {
    d * precision.bytes() as u64 + AEAD_OVERHEAD as u64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostRow {
    pub d: u64,
    pub params: CkksParams,
    pub traffic: CkksTraffic,
    pub aes_envelope_bytes: u64,
    pub ratio: f64,
}

pub fn cost_row(d: u64, p: &CkksParams, precision: Precision) -> Result<CostRow, HeError> {
    let traffic = ckks_traffic_per_round(d, 1, p)?;
    let aes = aes_envelope_bytes(d, precision);
    Ok(CostRow {
        d,
        params: *p,
        traffic,
        aes_envelope_bytes: aes,
        ratio: traffic.up_per_client as f64 / aes as f64,
    })
}

pub const COST_HEADER: &str = "d,N,q_bits,up_bytes,down_bytes,key_bytes,aes_envelope_bytes,ratio";

pub fn write_cost_csv<W: Write>(mut w: W, rows: &[CostRow]) -> io::Result<()> {
    writeln!(w, "{COST_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{:.4}",
            r.d,
            r.params.poly_degree,
            r.params.q_bits,
            r.traffic.up_per_client,
            r.traffic.down_per_client,
            r.traffic.one_time_key,
            r.aes_envelope_bytes,
            r.ratio
        )?;
    }
    Ok(())
}

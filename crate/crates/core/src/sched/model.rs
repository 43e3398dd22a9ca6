//! Hardware and network cost model.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("resource model field `{0}` must be positive and finite")]
    NonPositive(&'static str),
}

/// One CPU type shared by clients and master, plus one shared link each way.
#[derive(Debug, Clone, PartialEq)]
pub struct ResourceModel {
    pub cores: u32,
    pub frequency_hz: f64,
    /// Floating point results per core per cycle (SIMD width x ports x FMA).
    pub ops_per_cycle: f64,
    pub add_cost: f64,
    pub mult_cost: f64,
    /// Cycles per scalar load.
    pub memaccess_cost: f64,
    /// AES-EAX throughput on one core.
    pub aes_cycles_per_byte: f64,
    /// Bits per second.
    pub bandwidth_bps: f64,
    pub rtt_s: f64,
    /// Bits per transmitted scalar.
    pub bpp: u32,
}

impl ResourceModel {
    /// 10 cores at 3.2 GHz with 8 flops per core per cycle, L2-resident
    /// data (10 cycles per 64-byte line, i.e. 0.625 per FP32 scalar),
    /// 41.54 MB/s links with 28 ms round-trip time, FP32 payloads.
    pub fn reference() -> Self {
        Self {
            cores: 10,
            frequency_hz: 3.2e9,
            ops_per_cycle: 8.0,
            add_cost: 1.0,
            mult_cost: 1.0,
            memaccess_cost: 10.0 / 16.0,
            aes_cycles_per_byte: 1.0,
            bandwidth_bps: megabytes_per_second(41.54),
            rtt_s: 0.028,
            bpp: 32,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let checks = [
            ("cores", self.cores as f64),
            ("frequency_hz", self.frequency_hz),
            ("ops_per_cycle", self.ops_per_cycle),
            ("add_cost", self.add_cost),
            ("mult_cost", self.mult_cost),
            ("memaccess_cost", self.memaccess_cost),
            ("aes_cycles_per_byte", self.aes_cycles_per_byte),
            ("bandwidth_bps", self.bandwidth_bps),
            ("rtt_s", self.rtt_s),
            ("bpp", self.bpp as f64),
        ];
        for (name, v) in checks {
            if !(v > 0.0 && v.is_finite()) {
                return Err(ModelError::NonPositive(name));
            }
        }
        Ok(())
    }

    /// Peak floating point rate of one node.
    pub fn peak_flops(&self) -> f64 {
        self.cores as f64 * self.frequency_hz * self.ops_per_cycle
    }

    /// Cycles of one core that a vectorized kernel of `raw` scalar
    /// cycles occupies.
    pub fn vector_cycles(&self, raw: f64) -> f64 {
        raw / self.ops_per_cycle
    }

    /// `(d-1) add + d mult + 2d mem`, in scalar cycles.
    pub fn inner_product_cycles(&self, d: u64) -> f64 {
        assert!(d >= 1, "inner product needs d >= 1");
        let d = d as f64;
        (d - 1.0) * self.add_cost + d * self.mult_cost + 2.0 * d * self.memaccess_cost
    }

    /// One-core seconds for an inner product of length `d`.
    pub fn inner_product_cost(&self, d: u64) -> f64 {
        self.vector_cycles(self.inner_product_cycles(d)) / self.frequency_hz
    }

    /// `rows` inner products of length `cols`.
    pub fn matvec_cycles(&self, rows: u64, cols: u64) -> f64 {
        rows as f64 * self.inner_product_cycles(cols)
    }

    /// Elementwise `a - b` over `len` scalars: one op and two loads each.
    pub fn vector_sub_cycles(&self, len: u64) -> f64 {
        len as f64 * (self.add_cost + 2.0 * self.memaccess_cost)
    }

    /// `A x`, the residual, then `A^T r` for an `rows x cols` matrix.
    pub fn gradient_cycles(&self, rows: u64, cols: u64) -> f64 {
        self.matvec_cycles(rows, cols)
            + self.vector_sub_cycles(rows)
            + self.matvec_cycles(cols, rows)
    }

    /// `x - γ g` over `len` scalars.
    pub fn axpy_cycles(&self, len: u64) -> f64 {
        len as f64 * (self.add_cost + self.mult_cost + 2.0 * self.memaccess_cost)
    }

    /// Seconds on the link for `bits`, with a fair share of `1/share`.
    pub fn transfer_time(&self, bits: f64, share: f64) -> f64 {
        self.rtt_s / 2.0 + bits * share / self.bandwidth_bps
    }

    pub fn payload_bits(&self, scalars: u64) -> f64 {
        scalars as f64 * self.bpp as f64
    }
}

/// `rtt/2 + d * bpp / B` with `B` in bits per second.
pub fn comm_delay(d_scalars: u64, bpp: u32, bandwidth_bps: f64, rtt_s: f64) -> f64 {
    rtt_s / 2.0 + d_scalars as f64 * bpp as f64 / bandwidth_bps
}

pub fn megabytes_per_second(mb: f64) -> f64 {
    mb * 8.0e6
}

pub fn megabits_per_second(mbit: f64) -> f64 {
    mbit * 1.0e6
}

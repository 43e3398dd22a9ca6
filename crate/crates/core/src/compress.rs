//! Gradient compressors and the shared pseudo-random generator.
//!
//! PermK splits a shared random permutation of the coordinates into `n`
//! disjoint buckets, one per client; each client sends only its bucket,
//! scaled by `n`. Because supports never overlap, the master can build the
//! global direction by placing chunks side by side instead of adding them.
//!
//! Every node derives the same assignment from `(seed, round)`, so
//! coordinate indices never travel on the wire.

use thiserror::Error;

use crate::numkit::DenseVector;
use crate::precision::Precision;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CompressError {
    #[error("PermK requires d >= n (got d={d}, n={n})")]
    UnsupportedRegime { d: usize, n: usize },
    #[error("RandK count {k} out of range 1..={d}")]
    CountOutOfRange { k: usize, d: usize },
    #[error("coordinate {index} appears in more than one PermK chunk")]
    DuplicateCoordinate { index: usize },
    #[error("coordinate {index} out of range for dimension {d}")]
    IndexOutOfRange { index: usize, d: usize },
    #[error("payload is {got} bytes, expected {expected}")]
    PayloadLength { expected: usize, got: usize },
}

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;
const ROUND_MIX: u64 = 0xD1B5_4A32_D192_ED03;
const CLIENT_MIX: u64 = 0xA076_1D64_78BD_642F;

/// SplitMix64 generator.
///
/// Output is fully specified (no platform-dependent state), so assignments
/// agree bit-for-bit between clients and the master.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prg {
    state: u64,
}

impl Prg {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    /// Substream for one protocol round: `state = seed ^ (round * C)`.
    pub fn for_round(seed: u64, round: u64) -> Self {
        Self::new(seed ^ round.wrapping_mul(ROUND_MIX))
    }

    /// Client-specific substream for one round (used by RandK).
    pub fn for_client_round(seed: u64, client: u32, round: u64) -> Self {
        let client_seed = seed ^ (u64::from(client) + 1).wrapping_mul(CLIENT_MIX);
        Self::for_round(client_seed, round)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in `[0, 1)` with 53 random bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal via Box-Muller (one output per call).
    pub fn next_gaussian(&mut self) -> f64 {
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Uniform integer in `0..bound`, unbiased by rejection.
    pub fn below(&mut self, bound: u64) -> u64 {
        assert!(bound > 0, "empty range");
        let threshold = bound.wrapping_neg() % bound;
        loop {
            let r = self.next_u64();
            if r >= threshold {
                return r % bound;
            }
        }
    }

    /// Fisher-Yates (Durstenfeld) shuffle, last position first.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}

/// Per-round partition of `0..d` into `n` buckets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Assignment {
    d: usize,
    round: u64,
    buckets: Vec<Vec<usize>>,
}

impl Assignment {
    /// Builds the bucket layout from an explicit coordinate permutation `z`
    /// and client order. The first `n * floor(d/n)` entries of `z` are dealt
    /// in blocks; the `t = d mod n` leftovers go one each to the first `t`
    /// clients of `client_order`.
    pub fn from_permutation(
        n: usize,
        z: &[usize],
        client_order: &[usize],
        round: u64,
    ) -> Result<Self, CompressError> {
        let d = z.len();
        if n == 0 || d < n {
            return Err(CompressError::UnsupportedRegime { d, n });
        }
        let block = d / n;
        let residual = d - n * block;
        let mut buckets: Vec<Vec<usize>> = z[..n * block]
            .chunks(block)
            .map(|c| c.to_vec())
            .collect();
        for (k, &client) in client_order.iter().take(residual).enumerate() {
            buckets[client].push(z[n * block + k]);
        }
        for b in &mut buckets {
            b.sort_unstable();
        }
        Ok(Self { d, round, buckets })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn n(&self) -> usize {
        self.buckets.len()
    }

    pub fn round(&self) -> u64 {
        self.round
    }

    pub fn bucket(&self, client: usize) -> &[usize] {
        &self.buckets[client]
    }

    pub fn buckets(&self) -> &[Vec<usize>] {
        &self.buckets
    }

    /// Owner client of every coordinate.
    pub fn owners(&self) -> Vec<usize> {
        let mut owner = vec![usize::MAX; self.d];
        for (i, b) in self.buckets.iter().enumerate() {
            for &j in b {
                owner[j] = i;
            }
        }
        owner
    }
}

/// Samples the PermK assignment for `round`.
pub fn sample_assignment(
    d: usize,
    n: usize,
    seed: u64,
    round: u64,
) -> Result<Assignment, CompressError> {
    if n == 0 || d < n {
        return Err(CompressError::UnsupportedRegime { d, n });
    }
    let mut prg = Prg::for_round(seed, round);
    let mut z: Vec<usize> = (0..d).collect();
    prg.shuffle(&mut z);
    let mut clients: Vec<usize> = (0..n).collect();
    if d % n != 0 {
        prg.shuffle(&mut clients);
    }
    Assignment::from_permutation(n, &z, &clients, round)
}

/// One client's compressed gradient in sparse form.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseChunk {
    pub owner: u32,
    pub indices: Vec<usize>,
    pub values: Vec<f64>,
    /// Whether the compressor's scale (n for PermK, d/K for RandK) is
    /// already multiplied into `values`.
    pub scale_applied: bool,
}

impl SparseChunk {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Canonical payload: the values in ascending-index order, little-endian,
    /// at run precision. The count is implied by the envelope length.
    pub fn encode_payload(&self, precision: Precision) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.values.len() * precision.bytes());
        for &v in &self.values {
            precision.write_scalar(v, &mut out);
        }
        out
    }

    /// Rebuilds a chunk from its payload and the indices the receiver
    /// derived from the shared seed.
    pub fn decode_payload(
        owner: u32,
        indices: Vec<usize>,
        payload: &[u8],
        precision: Precision,
        scale_applied: bool,
    ) -> Result<Self, CompressError> {
        let width = precision.bytes();
        let expected = indices.len() * width;
        if payload.len() != expected {
            return Err(CompressError::PayloadLength {
                expected,
                got: payload.len(),
            });
        }
        let values = payload
            .chunks_exact(width)
            .map(|c| precision.read_scalar(c))
            .collect();
        Ok(Self {
            owner,
            indices,
            values,
            scale_applied,
        })
    }
}

/// `[C_i(v)]_j = n * v_j` for `j` in client `i`'s bucket.
pub fn compress_permk(
    v: &DenseVector,
    assignment: &Assignment,
    client: usize,
    precision: Precision,
) -> SparseChunk {
    assert_eq!(v.len(), assignment.d(), "vector length must equal d");
    let scale = assignment.n() as f64;
    let indices = assignment.bucket(client).to_vec();
    let values = indices.iter().map(|&j| precision.mul(scale, v[j])).collect();
    SparseChunk {
        owner: client as u32,
        indices,
        values,
        scale_applied: true,
    }
}

/// The `k` coordinates RandK keeps, sorted. Partial Fisher-Yates over
/// `0..d`; the receiver re-derives them from the same generator state.
pub fn randk_indices(d: usize, k: usize, prg: &mut Prg) -> Result<Vec<usize>, CompressError> {
    if k == 0 || k > d {
        return Err(CompressError::CountOutOfRange { k, d });
    }
    let mut pool: Vec<usize> = (0..d).collect();
    for i in 0..k {
        let j = i + prg.below((d - i) as u64) as usize;
        pool.swap(i, j);
    }
    pool.truncate(k);
    pool.sort_unstable();
    Ok(pool)
}

/// `C(v) = (d/k) * sum_{j in S} v_j e_j` for a uniformly random `S`, `|S| = k`.
pub fn compress_randk(
    v: &DenseVector,
    k: usize,
    prg: &mut Prg,
    owner: u32,
    precision: Precision,
) -> Result<SparseChunk, CompressError> {
    let d = v.len();
    let indices = randk_indices(d, k, prg)?;
    let scale = precision.round(d as f64 / k as f64);
    let values = indices.iter().map(|&j| precision.mul(scale, v[j])).collect();
    Ok(SparseChunk {
        owner,
        indices,
        values,
        scale_applied: true,
    })
}

/// Identity compressor as a dense chunk.
pub fn compress_identity(v: &DenseVector, owner: u32) -> SparseChunk {
    SparseChunk {
        owner,
        indices: (0..v.len()).collect(),
        values: v.to_vec(),
        scale_applied: false,
    }
}

/// How `assemble` treats coordinates claimed by several chunks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Overlap {
    /// PermK: supports must be disjoint.
    Forbid,
    /// RandK / identity: contributions add up.
    Sum,
}

/// `(1/n) * sum_i scatter(chunk_i)`.
///
/// Chunks are accumulated in ascending owner order so every node that
/// assembles the same set produces the same bits.
pub fn assemble(
    chunks: &[SparseChunk],
    d: usize,
    n: usize,
    overlap: Overlap,
    precision: Precision,
) -> Result<DenseVector, CompressError> {
    let mut order: Vec<&SparseChunk> = chunks.iter().collect();
    order.sort_by_key(|c| c.owner);
    let mut acc = vec![0.0; d];
    let mut seen = match overlap {
        Overlap::Forbid => Some(vec![false; d]),
        Overlap::Sum => None,
    };
    for chunk in order {
        for (&j, &v) in chunk.indices.iter().zip(&chunk.values) {
            if j >= d {
                return Err(CompressError::IndexOutOfRange { index: j, d });
            }
            if let Some(seen) = seen.as_mut() {
                if std::mem::replace(&mut seen[j], true) {
                    return Err(CompressError::DuplicateCoordinate { index: j });
                }
            }
            acc[j] = precision.acc(acc[j], v);
        }
    }
    let n = n as f64;
    Ok(DenseVector::new(
        acc.into_iter().map(|a| precision.div(precision.round(a), n)).collect(),
    ))
}

/// Contribution of one PermK block to the averaged direction: `v / n` per
/// coordinate. Matches what `assemble` yields for a disjoint coordinate.
#[inline]
pub fn permk_block_value(v: f64, n: usize, precision: Precision) -> f64 {
    precision.div(precision.round(precision.acc(0.0, v)), n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splitmix_reference_outputs() {
        // First outputs of SplitMix64 seeded with 1234567, as published with
        // the reference C implementation.
        let mut prg = Prg::new(1_234_567);
        assert_eq!(prg.next_u64(), 6_457_827_717_110_365_317);
        assert_eq!(prg.next_u64(), 3_203_168_211_198_807_973);
        assert_eq!(prg.next_u64(), 9_817_491_932_198_370_423);
    }

    #[test]
    fn equal_split_when_n_divides_d() {
        let a = sample_assignment(1000, 50, 7, 3).unwrap();
        assert!(a.buckets().iter().all(|b| b.len() == 20));
    }

    #[test]
    fn residual_profile_d7_n3() {
        let a = sample_assignment(7, 3, 11, 0).unwrap();
        let mut sizes: Vec<usize> = a.buckets().iter().map(Vec::len).collect();
        sizes.sort_unstable();
        assert_eq!(sizes, vec![2, 2, 3]);
    }

    #[test]
    fn d_less_than_n_is_rejected() {
        assert_eq!(
            sample_assignment(2, 3, 0, 0),
            Err(CompressError::UnsupportedRegime { d: 2, n: 3 })
        );
    }

    #[test]
    fn two_by_two_assignments_are_balanced() {
        let mut first_owns_zero = 0usize;
        let rounds = 10_000;
        for round in 0..rounds {
            let a = sample_assignment(2, 2, 42, round).unwrap();
            if a.bucket(0) == [0] {
                first_owns_zero += 1;
            } else {
                assert_eq!(a.bucket(0), [1]);
            }
        }
        let freq = first_owns_zero as f64 / rounds as f64;
        assert!((freq - 0.5).abs() <= 0.02, "frequency {freq}");
    }

    #[test]
    fn permk_scales_by_n() {
        let a = Assignment::from_permutation(2, &[0, 1], &[0, 1], 0).unwrap();
        let v = DenseVector::new(vec![1.0, 0.0]);
        let c = compress_permk(&v, &a, 0, Precision::Fp64);
        assert_eq!(c.indices, vec![0]);
        assert_eq!(c.values, vec![2.0]);
        assert!(c.scale_applied);
        let zero = compress_permk(&DenseVector::zeros(2), &a, 1, Precision::Fp64);
        assert_eq!(zero.values, vec![0.0]);
    }

    #[test]
    fn permk_expectation_d2_n2_enumerated() {
        let v1 = DenseVector::new(vec![1.0, 0.0]);
        let v2 = DenseVector::new(vec![0.0, 1.0]);
        let mut mean = [0.0; 2];
        for z in [[0usize, 1], [1, 0]] {
            let a = Assignment::from_permutation(2, &z, &[0, 1], 0).unwrap();
            let chunks = [
                compress_permk(&v1, &a, 0, Precision::Fp64),
                compress_permk(&v2, &a, 1, Precision::Fp64),
            ];
            let g = assemble(&chunks, 2, 2, Overlap::Forbid, Precision::Fp64).unwrap();
            if z == [0, 1] {
                assert_eq!(g.as_slice(), &[1.0, 1.0]);
            } else {
                assert_eq!(g.as_slice(), &[0.0, 0.0]);
            }
            mean[0] += g[0] / 2.0;
            mean[1] += g[1] / 2.0;
        }
        assert_eq!(mean, [0.5, 0.5]);
    }

    #[test]
    fn randk_full_count_is_identity() {
        let v = DenseVector::new(vec![1.5, -2.0, 3.25]);
        let c = compress_randk(&v, 3, &mut Prg::new(9), 0, Precision::Fp64).unwrap();
        assert_eq!(c.indices, vec![0, 1, 2]);
        assert_eq!(c.values, v.to_vec());
    }

    #[test]
    fn randk_rejects_bad_counts() {
        let v = DenseVector::zeros(3);
        assert!(compress_randk(&v, 0, &mut Prg::new(0), 0, Precision::Fp64).is_err());
        assert!(compress_randk(&v, 4, &mut Prg::new(0), 0, Precision::Fp64).is_err());
        let c = compress_randk(&v, 2, &mut Prg::new(0), 0, Precision::Fp64).unwrap();
        assert!(c.values.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn randk_d3_k1_frequencies_and_mean() {
        let v = DenseVector::new(vec![3.0, -1.0, 0.5]);
        let draws = 30_000;
        let mut hits = [0usize; 3];
        let mut mean = [0.0f64; 3];
        let mut prg = Prg::new(2024);
        for _ in 0..draws {
            let c = compress_randk(&v, 1, &mut prg, 0, Precision::Fp64).unwrap();
            hits[c.indices[0]] += 1;
            mean[c.indices[0]] += c.values[0] / draws as f64;
        }
        for j in 0..3 {
            let f = hits[j] as f64 / draws as f64;
            assert!((f - 1.0 / 3.0).abs() <= 0.02, "index {j} frequency {f}");
            // Each outcome has value 3 v_j; standard error of the mean is
            // 3|v_j| sqrt(p(1-p)/draws).
            let se = 3.0 * v[j].abs() * ((2.0 / 9.0) / draws as f64).sqrt();
            assert!((mean[j] - v[j]).abs() <= 4.0 * se, "coordinate {j}");
        }
    }

    #[test]
    fn assemble_edge_cases() {
        let empty = assemble(&[], 4, 2, Overlap::Forbid, Precision::Fp64).unwrap();
        assert_eq!(empty.as_slice(), &[0.0; 4]);

        let v = DenseVector::new(vec![0.1, 0.2, 0.3]);
        let a = sample_assignment(3, 1, 5, 0).unwrap();
        let c = compress_permk(&v, &a, 0, Precision::Fp64);
        let g = assemble(&[c], 3, 1, Overlap::Forbid, Precision::Fp64).unwrap();
        assert_eq!(g, v);

        let dup = SparseChunk {
            owner: 1,
            indices: vec![0],
            values: vec![1.0],
            scale_applied: true,
        };
        let mut other = dup.clone();
        other.owner = 0;
        assert_eq!(
            assemble(&[dup.clone(), other.clone()], 2, 2, Overlap::Forbid, Precision::Fp64),
            Err(CompressError::DuplicateCoordinate { index: 0 })
        );
        let summed = assemble(&[dup, other], 2, 2, Overlap::Sum, Precision::Fp64).unwrap();
        assert_eq!(summed.as_slice(), &[1.0, 0.0]);
    }

    #[test]
    fn payload_roundtrip_and_length_check() {
        let c = SparseChunk {
            owner: 3,
            indices: vec![1, 4],
            values: vec![0.5, -2.0],
            scale_applied: true,
        };
        let bytes = c.encode_payload(Precision::Fp32);
        assert_eq!(bytes.len(), 8);
        let back =
            SparseChunk::decode_payload(3, vec![1, 4], &bytes, Precision::Fp32, true).unwrap();
        assert_eq!(back, c);
        assert!(SparseChunk::decode_payload(3, vec![1], &bytes, Precision::Fp32, true).is_err());
    }
}

//! Synthetic distributed least-squares problems.
//!
//! `f(x) = (1/n) sum_i w_i f_i(x)` with `f_i(x) = (1/n_i) ||A_i x - b_i||^2`.

use std::io::{self, Read, Write};
use std::ops::{Deref, DerefMut};

use nalgebra::DMatrix;
use thiserror::Error;

use crate::compress::Prg;
use crate::precision::Precision;

#[derive(Debug, Error)]
pub enum NumError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("power iteration did not converge after {iterations} iterations")]
    PowerIteration { iterations: usize },
    #[error("malformed problem file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// A dense length-`d` vector.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DenseVector(Vec<f64>);

impl DenseVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn zeros(d: usize) -> Self {
        Self(vec![0.0; d])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn norm_sq(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    /// Bitwise equality (distinguishes `-0.0` and NaN payloads).
    pub fn bits_eq(&self, other: &Self) -> bool {
        self.0.len() == other.0.len()
            && self.0.iter().zip(&other.0).all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl Deref for DenseVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for DenseVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl From<Vec<f64>> for DenseVector {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

/// Local data of one client: a row-major `rows x d` matrix and targets.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientData {
    rows: usize,
    a: Vec<f64>,
    b: Vec<f64>,
}

impl ClientData {
    pub fn new(rows: usize, d: usize, a: Vec<f64>, b: Vec<f64>) -> Result<Self, NumError> {
        if rows == 0 {
            return Err(NumError::InvalidParameter("client needs n_i >= 1".into()));
        }
        if a.len() != rows * d || b.len() != rows {
            return Err(NumError::InvalidParameter(format!(
                "client data shape mismatch: |A|={}, |b|={}, n_i={rows}, d={d}",
                a.len(),
                b.len()
            )));
        }
        Ok(Self { rows, a, b })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn a(&self) -> &[f64] {
        &self.a
    }

    pub fn b(&self) -> &[f64] {
        &self.b
    }

    fn row(&self, k: usize, d: usize) -> &[f64] {
        &self.a[k * d..(k + 1) * d]
    }
}

/// How the data matrices are produced.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Spectrum {
    /// Entries `U[0,1)`, one global rescale so that `L_f` hits the target.
    ScaledUniform,
    /// Hessian `Q diag(mu) Q^T` with nonzero eigenvalues evenly spaced in
    /// `[min_eigen, l_target]`, factored back into client rows through a
    /// random orthonormal left factor.
    Exact { min_eigen: f64 },
}

/// Generation parameters. `Problem` is a pure function of these.
#[derive(Debug, Clone, PartialEq)]
pub struct ProblemSpec {
    pub seed: u64,
    pub d: usize,
    pub n: usize,
    pub rows_per_client: usize,
    pub l_target: f64,
    pub interpolation: bool,
    pub spectrum: Spectrum,
}

impl ProblemSpec {
    pub fn new(seed: u64, d: usize, n: usize, rows_per_client: usize, l_target: f64) -> Self {
        Self {
            seed,
            d,
            n,
            rows_per_client,
            l_target,
            interpolation: true,
            spectrum: Spectrum::ScaledUniform,
        }
    }

    pub fn interpolation(mut self, on: bool) -> Self {
        self.interpolation = on;
        self
    }

    pub fn spectrum(mut self, spectrum: Spectrum) -> Self {
        self.spectrum = spectrum;
        self
    }

    /// Exact spectrum with eigenvalues in `[l_target/10, l_target]`.
    pub fn exact_spectrum(self) -> Self {
        let min_eigen = self.l_target / 10.0;
        self.spectrum(Spectrum::Exact { min_eigen })
    }

    pub fn generate(&self) -> Result<Problem, NumError> {
        generate(self)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Problem {
    d: usize,
    clients: Vec<ClientData>,
    l_smooth: f64,
    x_fixed: Option<DenseVector>,
    weights: Vec<f64>,
}

const POWER_TOL: f64 = 1e-6;
const POWER_MAX_ITERS: usize = 10_000;
const POWER_SEED_TAG: u64 = 0x5EED_0FE1_6E00_0001;

impl Problem {
    /// Assembles a problem from explicit data; `L_f` is computed by power
    /// iteration.
    pub fn from_clients(d: usize, clients: Vec<ClientData>) -> Result<Self, NumError> {
        if d == 0 || clients.is_empty() {
            return Err(NumError::InvalidParameter("need d >= 1 and n >= 1".into()));
        }
        for c in &clients {
            if c.a.len() != c.rows * d {
                return Err(NumError::InvalidParameter("client matrix width != d".into()));
            }
        }
        let weights = vec![1.0; clients.len()];
        let mut p = Self {
            d,
            clients,
            l_smooth: 0.0,
            x_fixed: None,
            weights,
        };
        p.l_smooth = p.largest_hessian_eigenvalue(0)?;
        if p.l_smooth <= 0.0 {
            return Err(NumError::InvalidParameter("Hessian is zero".into()));
        }
        Ok(p)
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn n(&self) -> usize {
        self.clients.len()
    }

    pub fn clients(&self) -> &[ClientData] {
        &self.clients
    }

    pub fn client(&self, i: usize) -> &ClientData {
        &self.clients[i]
    }

    pub fn l_smooth(&self) -> f64 {
        self.l_smooth
    }

    pub fn x_fixed(&self) -> Option<&DenseVector> {
        self.x_fixed.as_ref()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn with_weights(mut self, weights: Vec<f64>) -> Result<Self, NumError> {
        if weights.len() != self.n() {
            return Err(NumError::InvalidParameter("one weight per client".into()));
        }
        self.weights = weights;
        self.l_smooth = self.largest_hessian_eigenvalue(0)?;
        Ok(self)
    }

    /// Copy with every matrix and target entry rounded to `precision`.
    pub fn rounded_to(&self, precision: Precision) -> Self {
        let mut p = self.clone();
        for c in &mut p.clients {
            c.a.iter_mut().for_each(|v| *v = precision.round(*v));
            c.b.iter_mut().for_each(|v| *v = precision.round(*v));
        }
        p
    }

    /// `∇²f v = (2/n) sum_i (w_i/n_i) A_i^T (A_i v)`.
    pub fn hessian_vec(&self, v: &[f64]) -> Vec<f64> {
        let d = self.d;
        let n = self.n() as f64;
        let mut out = vec![0.0; d];
        for (c, w) in self.clients.iter().zip(&self.weights) {
            let scale = 2.0 * w / (n * c.rows as f64);
            for k in 0..c.rows {
                let row = c.row(k, d);
                let av: f64 = row.iter().zip(v).map(|(a, x)| a * x).sum();
                let s = scale * av;
                for (o, a) in out.iter_mut().zip(row) {
                    *o += s * a;
                }
            }
        }
        out
    }

    /// Power iteration on the Hessian, stopping once the eigen-residual
    /// `||Hv - λv||` drops below `1e-6 λ`.
    pub fn largest_hessian_eigenvalue(&self, seed: u64) -> Result<f64, NumError> {
        let mut prg = Prg::new(seed ^ POWER_SEED_TAG);
        let mut v: Vec<f64> = (0..self.d).map(|_| prg.next_f64() + 0.5).collect();
        normalize(&mut v);
        for _ in 0..POWER_MAX_ITERS {
            let w = self.hessian_vec(&v);
            let lambda: f64 = w.iter().zip(&v).map(|(a, b)| a * b).sum();
            let residual: f64 = w
                .iter()
                .zip(&v)
                .map(|(a, b)| (a - lambda * b).powi(2))
                .sum::<f64>()
                .sqrt();
            let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Ok(0.0);
            }
            if residual <= POWER_TOL * lambda.abs() {
                return Ok(lambda);
            }
            v = w.into_iter().map(|x| x / norm).collect();
        }
        Err(NumError::PowerIteration {
            iterations: POWER_MAX_ITERS,
        })
    }

    /// Writes the `PFL1` little-endian binary format.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<(), NumError> {
        w.write_all(b"PFL1")?;
        w.write_all(&(self.d as u64).to_le_bytes())?;
        w.write_all(&(self.n() as u64).to_le_bytes())?;
        for c in &self.clients {
            w.write_all(&(c.rows as u64).to_le_bytes())?;
            for v in c.a.iter().chain(&c.b) {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Reads the `PFL1` format. `L_f` is recomputed; the planted solution is
    /// not part of the format.
    pub fn read_binary<R: Read>(mut r: R) -> Result<Self, NumError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != b"PFL1" {
            return Err(NumError::Format("bad magic".into()));
        }
        let d = read_u64(&mut r)? as usize;
        let n = read_u64(&mut r)? as usize;
        if d == 0 || n == 0 {
            return Err(NumError::Format("empty dimensions".into()));
        }
        let mut clients = Vec::with_capacity(n);
        for _ in 0..n {
            let rows = read_u64(&mut r)? as usize;
            let a = read_f64s(&mut r, rows * d)?;
            let b = read_f64s(&mut r, rows)?;
            clients.push(ClientData::new(rows, d, a, b)?);
        }
        Self::from_clients(d, clients)
    }
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64, NumError> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

fn read_f64s<R: Read>(r: &mut R, count: usize) -> Result<Vec<f64>, NumError> {
    let mut buf = vec![0u8; count * 8];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}

fn normalize(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
}

/// Convenience wrapper over [`ProblemSpec`] with the default spectrum.
pub fn generate_problem(
    seed: u64,
    d: usize,
    n: usize,
    rows_per_client: usize,
    l_target: f64,
    interpolation: bool,
) -> Result<Problem, NumError> {
    ProblemSpec::new(seed, d, n, rows_per_client, l_target)
        .interpolation(interpolation)
        .generate()
}

fn generate(spec: &ProblemSpec) -> Result<Problem, NumError> {
    let &ProblemSpec {
        seed,
        d,
        n,
        rows_per_client: ni,
        l_target,
        interpolation,
        spectrum,
    } = spec;
    if d == 0 || n == 0 || ni == 0 {
        return Err(NumError::InvalidParameter("d, n and n_i must be >= 1".into()));
    }
    if !(l_target > 0.0) || !l_target.is_finite() {
        return Err(NumError::InvalidParameter("l_target must be positive".into()));
    }
    let mut prg = Prg::new(seed);
    let (mut mats, l_smooth) = match spectrum {
        Spectrum::ScaledUniform => {
            let mats: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..ni * d).map(|_| prg.next_f64()).collect())
                .collect();
            (mats, None)
        }
        Spectrum::Exact { min_eigen } => {
            if !(min_eigen > 0.0) || min_eigen > l_target {
                return Err(NumError::InvalidParameter(
                    "min_eigen must lie in (0, l_target]".into(),
                ));
            }
            (exact_spectrum_rows(&mut prg, d, n, ni, min_eigen, l_target), Some(l_target))
        }
    };

    let x_fixed = interpolation.then(|| DenseVector::new((0..d).map(|_| prg.next_f64()).collect()));
    let free_targets: Option<Vec<Vec<f64>>> = (!interpolation)
        .then(|| (0..n).map(|_| (0..ni).map(|_| prg.next_f64()).collect()).collect());

    let mut problem = Problem {
        d,
        clients: Vec::with_capacity(n),
        l_smooth: 0.0,
        x_fixed: None,
        weights: vec![1.0; n],
    };
    for a in mats.drain(..) {
        problem.clients.push(ClientData {
            rows: ni,
            a,
            b: vec![0.0; ni],
        });
    }

    let l_smooth = match l_smooth {
        Some(l) => l,
        None => {
            let lambda = problem.largest_hessian_eigenvalue(seed)?;
            if !(lambda > 0.0) {
                return Err(NumError::InvalidParameter("degenerate Hessian".into()));
            }
            let s = (l_target / lambda).sqrt();
            for c in &mut problem.clients {
                c.a.iter_mut().for_each(|v| *v *= s);
            }
            l_target
        }
    };
    problem.l_smooth = l_smooth;

    match (x_fixed, free_targets) {
        (Some(x), _) => {
            for c in &mut problem.clients {
                for k in 0..ni {
                    c.b[k] = c.row(k, d).iter().zip(x.iter()).map(|(a, x)| a * x).sum();
                }
            }
            problem.x_fixed = Some(x);
        }
        (None, Some(targets)) => {
            for (c, t) in problem.clients.iter_mut().zip(targets) {
                c.b = t;
            }
        }
        (None, None) => unreachable!("either planted or free targets"),
    }
    Ok(problem)
}

/// Rows of `sqrt(N/2) S diag(sqrt(mu)) Q^T`, split into `n` blocks of `ni`.
fn exact_spectrum_rows(
    prg: &mut Prg,
    d: usize,
    n: usize,
    ni: usize,
    min_eigen: f64,
    max_eigen: f64,
) -> Vec<Vec<f64>> {
    let total = n * ni;
    let rank = total.min(d);
    let mu: Vec<f64> = if rank == 1 {
        vec![max_eigen]
    } else {
        (0..rank)
            .map(|k| min_eigen + (max_eigen - min_eigen) * k as f64 / (rank - 1) as f64)
            .collect()
    };
    let q = orthonormal_columns(prg, d, rank);
    let s = orthonormal_columns(prg, total, rank);
    let scale = (total as f64 / 2.0).sqrt();
    let mut left = s;
    for (k, m) in mu.iter().enumerate() {
        let f = scale * m.sqrt();
        left.column_mut(k).iter_mut().for_each(|v| *v *= f);
    }
    let a = left * q.transpose();
    (0..n)
        .map(|i| {
            let mut block = Vec::with_capacity(ni * d);
            for r in i * ni..(i + 1) * ni {
                block.extend(a.row(r).iter().copied());
            }
            block
        })
        .collect()
}

fn orthonormal_columns(prg: &mut Prg, rows: usize, cols: usize) -> DMatrix<f64> {
    let data: Vec<f64> = (0..rows * cols).map(|_| prg.next_gaussian()).collect();
    let g = DMatrix::from_row_slice(rows, cols, &data);
    g.qr().q()
}

/// `∇f_i(x) = (2/n_i) A_i^T (A_i x - b_i)` in FP64.
///
/// Panics if `x` does not have length `d`.
pub fn gradient(p: &Problem, i: usize, x: &[f64]) -> DenseVector {
    gradient_in(p, i, x, Precision::Fp64)
}

/// [`gradient`] with every arithmetic result rounded to `precision`.
pub fn gradient_in(p: &Problem, i: usize, x: &[f64], precision: Precision) -> DenseVector {
    assert!(i < p.n(), "client index {i} out of range");
    assert_eq!(x.len(), p.d, "dimension mismatch");
    let c = &p.clients[i];
    let d = p.d;
    let mut acc = vec![0.0; d];
    for k in 0..c.rows {
        let row = c.row(k, d);
        let r = precision.sub(precision.dot(row, x), c.b[k]);
        for (g, a) in acc.iter_mut().zip(row) {
            *g = precision.acc(*g, precision.mul(*a, r));
        }
    }
    let scale = precision.round(2.0 / c.rows as f64);
    DenseVector::new(
        acc.into_iter()
            .map(|g| precision.mul(precision.round(g), scale))
            .collect(),
    )
}

/// `f_i(x)` in FP64.
pub fn local_objective(p: &Problem, i: usize, x: &[f64]) -> f64 {
    assert_eq!(x.len(), p.d, "dimension mismatch");
    let c = &p.clients[i];
    let mut s = 0.0;
    for k in 0..c.rows {
        let r: f64 = c.row(k, p.d).iter().zip(x).map(|(a, v)| a * v).sum::<f64>() - c.b[k];
        s += r * r;
    }
    s / c.rows as f64
}

/// `(f(x), ||∇f(x)||^2)` in FP64 from the exact per-client average.
pub fn objective_and_gradnorm(p: &Problem, x: &[f64]) -> (f64, f64) {
    assert_eq!(x.len(), p.d, "dimension mismatch");
    let n = p.n() as f64;
    let mut f = 0.0;
    let mut g = vec![0.0; p.d];
    for i in 0..p.n() {
        let w = p.weights[i];
        f += w * local_objective(p, i, x);
        for (acc, gi) in g.iter_mut().zip(gradient(p, i, x).iter()) {
            *acc += w * gi;
        }
    }
    let norm_sq = g.iter().map(|v| (v / n) * (v / n)).sum();
    (f / n, norm_sq)
}

/// Largest constant step with guaranteed descent for GD: `1/L`.
pub fn theoretical_step(l_smooth: f64) -> Result<f64, NumError> {
    if !(l_smooth > 0.0) {
        return Err(NumError::InvalidParameter("L must be positive".into()));
    }
    Ok(1.0 / l_smooth)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_problem(a: f64, b: f64) -> Problem {
        Problem::from_clients(1, vec![ClientData::new(1, 1, vec![a], vec![b]).unwrap()]).unwrap()
    }

    #[test]
    fn scalar_gradient_and_objective() {
        let p = scalar_problem(2.0, 0.0);
        assert_eq!(gradient(&p, 0, &[1.0]).as_slice(), &[8.0]);
        assert_eq!(objective_and_gradnorm(&p, &[1.0]), (4.0, 64.0));
        assert_eq!(p.l_smooth(), 8.0);
    }

    #[test]
    fn one_by_one_rescale_is_closed_form() {
        let p = generate_problem(3, 1, 1, 1, 10.0, true).unwrap();
        let a = p.client(0).a()[0];
        assert!((a.abs() - 5f64.sqrt()).abs() <= 1e-12 * 5f64.sqrt());
    }

    #[test]
    fn interpolation_zeroes_every_local_gradient() {
        let p = generate_problem(5, 40, 4, 3, 10.0, true).unwrap();
        let x = p.x_fixed().unwrap().clone();
        for i in 0..p.n() {
            let c = p.client(i);
            let a_norm = c.a().iter().map(|v| v * v).sum::<f64>().sqrt();
            let g = gradient(&p, i, &x);
            assert!(g.norm_sq().sqrt() <= 1e-12 * a_norm * x.norm_sq().sqrt());
        }
        let (f, gn) = objective_and_gradnorm(&p, &x);
        assert!(f <= 1e-24 && gn <= 1e-24);
    }

    #[test]
    fn generation_is_deterministic() {
        let a = ProblemSpec::new(9, 30, 3, 4, 10.0).generate().unwrap();
        let b = ProblemSpec::new(9, 30, 3, 4, 10.0).generate().unwrap();
        assert_eq!(a, b);
        let c = ProblemSpec::new(10, 30, 3, 4, 10.0).generate().unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(generate_problem(0, 0, 1, 1, 1.0, true).is_err());
        assert!(generate_problem(0, 1, 1, 1, -1.0, true).is_err());
        assert!(ClientData::new(0, 2, vec![], vec![]).is_err());
    }

    #[test]
    #[should_panic(expected = "dimension mismatch")]
    fn gradient_dimension_mismatch_panics() {
        let p = scalar_problem(1.0, 1.0);
        gradient(&p, 0, &[1.0, 2.0]);
    }

    #[test]
    fn theoretical_steps() {
        assert_eq!(theoretical_step(10.0).unwrap(), 0.1);
        assert_eq!(theoretical_step(1.0).unwrap(), 1.0);
        assert_eq!(theoretical_step(2.0).unwrap(), 0.5);
        assert!(theoretical_step(0.0).is_err());
    }

    #[test]
    fn binary_roundtrip() {
        let p = generate_problem(1, 6, 2, 3, 4.0, false).unwrap();
        let mut buf = Vec::new();
        p.write_binary(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"PFL1");
        assert_eq!(buf.len(), 4 + 8 + 8 + 2 * (8 + 3 * 6 * 8 + 3 * 8));
        let q = Problem::read_binary(&buf[..]).unwrap();
        assert_eq!(q.clients(), p.clients());
        assert!((q.l_smooth() - p.l_smooth()).abs() <= 1e-6 * p.l_smooth());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(Problem::read_binary(&bad[..]).is_err());
        assert!(Problem::read_binary(&buf[..buf.len() - 1]).is_err());
    }

    #[test]
    fn fp32_gradient_is_single_precision() {
        let p = generate_problem(2, 8, 2, 3, 10.0, true).unwrap().rounded_to(Precision::Fp32);
        let x: Vec<f64> = (0..8).map(|k| (k as f32 * 0.37) as f64).collect();
        let g = gradient_in(&p, 1, &x, Precision::Fp32);
        assert!(g.iter().all(|v| (*v as f32) as f64 == *v));
        let exact = gradient(&p, 1, &x);
        for (a, b) in g.iter().zip(exact.iter()) {
            assert!((a - b).abs() <= 1e-4 * (1.0 + b.abs()));
        }
    }
}

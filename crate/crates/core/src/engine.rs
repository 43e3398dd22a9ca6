//! Round drivers for every algorithm variant, plus traffic accounting.
//!
//! Each client holds its own replica of `x`. The master never holds model
//! state for the encrypted variants: it only concatenates envelopes and
//! counts bytes. Client-side logic lives in [`ClientNode`] so that the same
//! code runs in-process and behind the TCP transport.

use std::fmt;
use std::io::{self, Write};
use std::str::FromStr;
use std::time::Instant;

use thiserror::Error;

use crate::compress::{
    assemble, compress_identity, compress_permk, compress_randk, permk_block_value,
    randk_indices, sample_assignment, Assignment, CompressError, Overlap, Prg, SparseChunk,
};
use crate::numkit::{gradient_in, objective_and_gradnorm, DenseVector, Problem, ProblemSpec};
use crate::precision::Precision;
use crate::secenv::{self, Envelope, ReplayGuard, SecError, SecretKey, AEAD_OVERHEAD, VERSION};
use crate::transport::{frame_encode, ClientLink, TransportError};

/// A run counts as diverged once `||∇f||^2` exceeds this multiple of its
/// starting value.
pub const DIVERGENCE_FACTOR: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Algorithm {
    Gd,
    GdAes,
    DcgdRandk,
    DcgdRandkAes,
    DcgdPermk,
    DcgdPermkAes,
    FedAvg,
}

impl Algorithm {
    pub const ALL: [Algorithm; 7] = [
        Algorithm::Gd,
        Algorithm::GdAes,
        Algorithm::DcgdRandk,
        Algorithm::DcgdRandkAes,
        Algorithm::DcgdPermk,
        Algorithm::DcgdPermkAes,
        Algorithm::FedAvg,
    ];

    pub fn encrypted(self) -> bool {
        matches!(
            self,
            Algorithm::GdAes | Algorithm::DcgdRandkAes | Algorithm::DcgdPermkAes
        )
    }

    /// The same protocol without encryption.
    pub fn plain(self) -> Algorithm {
        match self {
            Algorithm::GdAes => Algorithm::Gd,
            Algorithm::DcgdRandkAes => Algorithm::DcgdRandk,
            Algorithm::DcgdPermkAes => Algorithm::DcgdPermk,
            other => other,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Gd => "gd",
            Algorithm::GdAes => "gd_aes",
            Algorithm::DcgdRandk => "dcgd_randk",
            Algorithm::DcgdRandkAes => "dcgd_randk_aes",
            Algorithm::DcgdPermk => "dcgd_permk",
            Algorithm::DcgdPermkAes => "dcgd_permk_aes",
            Algorithm::FedAvg => "fedavg",
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key = s.to_ascii_lowercase().replace(['-', '/'], "_");
        Algorithm::ALL
            .into_iter()
            .find(|a| a.name() == key)
            .ok_or_else(|| format!("unknown algorithm `{s}`"))
    }
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid run configuration: {0}")]
    Config(String),
    #[error("authentication failure on envelope from client {client} in round {round}")]
    Auth { client: u32, round: u64 },
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error(transparent)]
    Compress(#[from] CompressError),
    #[error(transparent)]
    Sec(SecError),
    #[error("every step size in the grid diverged")]
    TuningFailed,
    #[error(transparent)]
    Num(#[from] crate::numkit::NumError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub algorithm: Algorithm,
    pub gamma: f64,
    pub rounds: u64,
    pub precision: Precision,
    /// Coordinates kept per client by RandK.
    pub randk_k: usize,
    /// Shared seed for permutations and RandK index sets.
    pub compressor_seed: u64,
    pub fedavg_local_steps: usize,
    pub fedavg_local_gamma: f64,
    /// Fill `wall_ms`. Off gives byte-for-byte reproducible CSVs.
    pub record_wall_time: bool,
    /// Keep every iterate (round 0 included) in the output.
    pub record_iterates: bool,
}

impl RunConfig {
    pub fn new(algorithm: Algorithm, gamma: f64, rounds: u64) -> Self {
        Self {
            algorithm,
            gamma,
            rounds,
            precision: Precision::Fp64,
            randk_k: 1,
            compressor_seed: 0,
            fedavg_local_steps: 1,
            fedavg_local_gamma: gamma,
            record_wall_time: false,
            record_iterates: false,
        }
    }

    pub fn validate(&self, d: usize, n: usize) -> Result<(), EngineError> {
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(EngineError::Config("step size must be positive".into()));
        }
        if self.rounds == 0 {
            return Err(EngineError::Config("rounds must be at least 1".into()));
        }
        match self.algorithm {
            Algorithm::DcgdRandk | Algorithm::DcgdRandkAes if self.randk_k == 0 || self.randk_k > d => {
                Err(EngineError::Config(format!("randk_k must lie in 1..={d}")))
            }
            Algorithm::DcgdPermk | Algorithm::DcgdPermkAes if d < n => Err(EngineError::Config(
                format!("PermK needs d >= n (d = {d}, n = {n})"),
            )),
            Algorithm::FedAvg
                if self.fedavg_local_steps == 0
                    || !(self.fedavg_local_gamma > 0.0 && self.fedavg_local_gamma.is_finite()) =>
            {
                Err(EngineError::Config("FedAvg needs local steps >= 1 and a positive local step".into()))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundMetrics {
    /// 1-based: the row describes `x^round`.
    pub round: u64,
    pub fx: f64,
    pub grad_norm_sq: f64,
    pub up_bytes_total: u64,
    pub down_bytes_total: u64,
    /// Largest single-client value this round.
    pub up_bytes_per_client: u64,
    pub down_bytes_per_client: u64,
    /// Same quantities without the 21-byte envelope header.
    pub headerless_up_bytes_per_client: u64,
    pub headerless_down_bytes_per_client: u64,
    pub compute_ms: f64,
    pub crypto_ms: f64,
    pub apply_ms: f64,
    pub wall_ms: f64,
    pub diverged: bool,
}

pub const METRICS_HEADER: &str = "round,fx,grad_norm_sq,up_bytes_total,down_bytes_total,\
up_bytes_per_client,down_bytes_per_client,headerless_up_bytes_per_client,headerless_down_bytes_per_client,wall_ms";

pub fn write_metrics_csv<W: Write>(mut w: W, rows: &[RoundMetrics]) -> io::Result<()> {
    writeln!(w, "{METRICS_HEADER}")?;
    for m in rows {
        writeln!(
            w,
            "{},{:e},{:e},{},{},{},{},{},{},{}",
            m.round,
            m.fx,
            m.grad_norm_sq,
            m.up_bytes_total,
            m.down_bytes_total,
            m.up_bytes_per_client,
            m.down_bytes_per_client,
            m.headerless_up_bytes_per_client,
            m.headerless_down_bytes_per_client,
            m.wall_ms
        )?;
    }
    Ok(())
}

/// One row per iterate: `round,x_0,...,x_{d-1}`, shortest round-trip
/// formatting so two files are equal iff the iterates are bitwise equal.
pub fn write_iterate_row<W: Write>(mut w: W, round: u64, x: &[f64]) -> io::Result<()> {
    write!(w, "{round}")?;
    for v in x {
        write!(w, ",{v:e}")?;
    }
    writeln!(w)
}

/// Exact per-client byte counts for one round.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct RoundBytes {
    pub up: Vec<u64>,
    pub down: Vec<u64>,
    pub headerless_up: Vec<u64>,
    pub headerless_down: Vec<u64>,
}

impl RoundBytes {
    fn zeros(n: usize) -> Self {
        Self {
            up: vec![0; n],
            down: vec![0; n],
            headerless_up: vec![0; n],
            headerless_down: vec![0; n],
        }
    }
}

/// Closed-form byte counts. `sizes[i]` is the number of scalars client `i`
/// uploads this round (bucket size for PermK, `k` for RandK, `d` otherwise).
pub fn expected_round_bytes(
    algorithm: Algorithm,
    d: usize,
    sizes: &[usize],
    precision: Precision,
) -> RoundBytes {
    let n = sizes.len();
    let b = precision.bytes() as u64;
    let header = secenv::HEADER_LEN as u64;
    let aead = AEAD_OVERHEAD as u64;
    let mut out = RoundBytes::zeros(n);
    if algorithm.encrypted() {
        let headerless_up: Vec<u64> = sizes.iter().map(|&s| s as u64 * b + aead).collect();
        let headerless_all: u64 = headerless_up.iter().sum();
        for i in 0..n {
            out.headerless_up[i] = headerless_up[i];
            out.up[i] = headerless_up[i] + header;
            out.headerless_down[i] = headerless_all;
            out.down[i] = headerless_all + header * n as u64;
        }
    } else {
        for i in 0..n {
            let up = sizes[i] as u64 * b;
            let down = d as u64 * b;
            out.up[i] = up;
            out.headerless_up[i] = up;
            out.down[i] = down;
            out.headerless_down[i] = down;
        }
    }
    out
}

/// Uploaded scalar count of the largest PermK bucket: `ceil(d/n)`.
pub fn permk_max_bucket(d: usize, n: usize) -> usize {
    d.div_ceil(n)
}

/// Bytes of one FedAvg model message.
pub fn fedavg_message_bytes(d: usize, precision: Precision) -> u64 {
    d as u64 * precision.bytes() as u64
}

/// Bytes of one PermK/AES client message counted as payload plus nonce
/// and tag, for the largest bucket.
pub fn permk_aes_message_bytes(d: usize, n: usize, precision: Precision) -> u64 {
    permk_max_bucket(d, n) as u64 * precision.bytes() as u64 + AEAD_OVERHEAD as u64
}

/// What every participant knows: the data it computes on and the run
/// parameters. Each client only touches its own `A_i`, `b_i`.
#[derive(Debug, Clone)]
pub struct Protocol {
    problem: Problem,
    cfg: RunConfig,
}

impl Protocol {
    /// Rounds the problem data to the run precision.
    pub fn new(problem: &Problem, cfg: RunConfig) -> Result<Self, EngineError> {
        cfg.validate(problem.d(), problem.n())?;
        Ok(Self {
            problem: problem.rounded_to(cfg.precision),
            cfg,
        })
    }

    pub fn problem(&self) -> &Problem {
        &self.problem
    }

    pub fn cfg(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn d(&self) -> usize {
        self.problem.d()
    }

    pub fn n(&self) -> usize {
        self.problem.n()
    }

    /// Round-`k` PermK buckets, derived identically by every node.
    pub fn assignment(&self, round: u64) -> Result<Assignment, EngineError> {
        Ok(sample_assignment(
            self.d(),
            self.n(),
            self.cfg.compressor_seed,
            round,
        )?)
    }

    fn randk_prg(&self, client: u32, round: u64) -> Prg {
        Prg::for_client_round(self.cfg.compressor_seed, client, round)
    }

    /// Coordinates client `i` sends in round `k`.
    pub fn chunk_indices(
        &self,
        client: u32,
        round: u64,
        assignment: Option<&Assignment>,
    ) -> Result<Vec<usize>, EngineError> {
        let d = self.d();
        match self.cfg.algorithm {
            Algorithm::DcgdRandk | Algorithm::DcgdRandkAes => Ok(randk_indices(
                d,
                self.cfg.randk_k,
                &mut self.randk_prg(client, round),
            )?),
            Algorithm::DcgdPermk | Algorithm::DcgdPermkAes => {
                let owned;
                let a = match assignment {
                    Some(a) => a,
                    None => {
                        owned = self.assignment(round)?;
                        &owned
                    }
                };
                Ok(a.bucket(client as usize).to_vec())
            }
            _ => Ok((0..d).collect()),
        }
    }

    fn local_gradient(&self, client: usize, x: &[f64]) -> DenseVector {
        let p = self.cfg.precision;
        let mut g = gradient_in(&self.problem, client, x, p);
        let w = self.problem.weights()[client];
        if w != 1.0 {
            g.iter_mut().for_each(|v| *v = p.mul(w, *v));
        }
        g
    }

    fn overlap(&self) -> Overlap {
        match self.cfg.algorithm {
            Algorithm::DcgdPermk | Algorithm::DcgdPermkAes => Overlap::Forbid,
            _ => Overlap::Sum,
        }
    }

    /// Master side of the unencrypted variants: `(1/n) sum_i C_i`.
    pub fn aggregate(&self, chunks: &[SparseChunk]) -> Result<DenseVector, EngineError> {
        if chunks.len() != self.n() {
            return Err(EngineError::Protocol(format!(
                "expected {} chunks, got {}",
                self.n(),
                chunks.len()
            )));
        }
        Ok(assemble(
            chunks,
            self.d(),
            self.n(),
            self.overlap(),
            self.cfg.precision,
        )?)
    }
}

/// What a client hands to the network in one round.
#[derive(Debug, Clone, PartialEq)]
pub enum Outgoing {
    Plain(SparseChunk),
    Sealed(Envelope),
}

/// A client and its replica of the iterate.
#[derive(Debug, Clone)]
pub struct ClientNode {
    id: u32,
    x: DenseVector,
    guard: ReplayGuard,
}

impl ClientNode {
    pub fn new(id: u32, x0: DenseVector) -> Self {
        Self {
            id,
            x: x0,
            guard: ReplayGuard::new(),
        }
    }

    pub fn id(&self) -> u32 {
        self.id
    }

    pub fn x(&self) -> &DenseVector {
        &self.x
    }

    /// Gradient (or local model for FedAvg), compressed and, for the
    /// encrypted variants, sealed.
    pub fn outgoing(
        &self,
        proto: &Protocol,
        round: u64,
        assignment: Option<&Assignment>,
        key: Option<&SecretKey>,
    ) -> Result<Outgoing, EngineError> {
        let cfg = proto.cfg();
        let p = cfg.precision;
        let i = self.id as usize;
        let chunk = match cfg.algorithm {
            Algorithm::Gd | Algorithm::GdAes => {
                compress_identity(&proto.local_gradient(i, &self.x), self.id)
            }
            Algorithm::DcgdRandk | Algorithm::DcgdRandkAes => compress_randk(
                &proto.local_gradient(i, &self.x),
                cfg.randk_k,
                &mut proto.randk_prg(self.id, round),
                self.id,
                p,
            )?,
            Algorithm::DcgdPermk | Algorithm::DcgdPermkAes => {
                let g = proto.local_gradient(i, &self.x);
                match assignment {
                    Some(a) => compress_permk(&g, a, i, p),
                    None => compress_permk(&g, &proto.assignment(round)?, i, p),
                }
            }
            Algorithm::FedAvg => {
                let mut local = self.x.clone();
                let lg = p.round(cfg.fedavg_local_gamma);
                for _ in 0..cfg.fedavg_local_steps {
                    let g = proto.local_gradient(i, &local);
                    for (x, gj) in local.iter_mut().zip(g.iter()) {
                        *x = p.sub(*x, p.mul(lg, *gj));
                    }
                }
                compress_identity(&local, self.id)
            }
        };
        if cfg.algorithm.encrypted() {
            let key = key.ok_or_else(|| EngineError::Config("encrypted variant without a key".into()))?;
            let env = secenv::seal(key, round, self.id, &chunk.encode_payload(p))
                .map_err(EngineError::Sec)?;
            Ok(Outgoing::Sealed(env))
        } else {
            Ok(Outgoing::Plain(chunk))
        }
    }

    /// `x <- x - γ ĝ`, or for FedAvg `x <- ĝ` (the averaged model).
    pub fn apply_dense(&mut self, proto: &Protocol, ghat: &DenseVector) {
        let cfg = proto.cfg();
        if cfg.algorithm == Algorithm::FedAvg {
            self.x = ghat.clone();
            return;
        }
        let p = cfg.precision;
        let gamma = p.round(cfg.gamma);
        for (x, g) in self.x.iter_mut().zip(ghat.iter()) {
            *x = p.sub(*x, p.mul(gamma, *g));
        }
    }

    /// Client side of the encrypted variants. All envelopes are verified
    /// before any coordinate moves, so a failed round leaves `x` untouched.
    pub fn apply_envelopes(
        &mut self,
        proto: &Protocol,
        round: u64,
        envelopes: &[Envelope],
        assignment: Option<&Assignment>,
        key: &SecretKey,
    ) -> Result<(), EngineError> {
        let n = proto.n();
        if envelopes.len() != n {
            return Err(EngineError::Protocol(format!(
                "expected {n} envelopes in round {round}, got {}",
                envelopes.len()
            )));
        }
        let cfg = proto.cfg();
        let p = cfg.precision;
        let owned;
        let assignment = match (cfg.algorithm, assignment) {
            (Algorithm::DcgdPermkAes, None) => {
                owned = proto.assignment(round)?;
                Some(&owned)
            }
            (_, a) => a,
        };
        let mut chunks = Vec::with_capacity(n);
        for env in envelopes {
            let h = env.header;
            if h.version != VERSION {
                return Err(EngineError::Protocol(format!("unsupported version {}", h.version)));
            }
            if h.client as usize >= n {
                return Err(EngineError::Protocol(format!("unknown sender {}", h.client)));
            }
            let payload = secenv::open(key, env).map_err(|_| EngineError::Auth {
                client: h.client,
                round: h.round,
            })?;
            self.guard.check(&h, round).map_err(|e| EngineError::Protocol(e.to_string()))?;
            let indices = proto.chunk_indices(h.client, round, assignment)?;
            chunks.push(SparseChunk::decode_payload(h.client, indices, &payload, p, true)?);
        }
        match cfg.algorithm {
            Algorithm::DcgdPermkAes => {
                let gamma = p.round(cfg.gamma);
                let mut seen = vec![false; proto.d()];
                for c in &chunks {
                    for &j in &c.indices {
                        if std::mem::replace(&mut seen[j], true) {
                            return Err(CompressError::DuplicateCoordinate { index: j }.into());
                        }
                    }
                }
                // Each block is applied on its own, in arrival order.
                for c in &chunks {
                    for (&j, &v) in c.indices.iter().zip(&c.values) {
                        let g = permk_block_value(v, n, p);
                        self.x[j] = p.sub(self.x[j], p.mul(gamma, g));
                    }
                }
            }
            _ => {
                let ghat = assemble(&chunks, proto.d(), n, proto.overlap(), p)?;
                self.apply_dense(proto, &ghat);
            }
        }
        Ok(())
    }
}

/// Outcome of a run. `metrics[k-1]` describes `x^k`.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub initial_fx: f64,
    pub initial_grad_norm_sq: f64,
    pub metrics: Vec<RoundMetrics>,
    /// `x^0, x^1, ...` when requested.
    pub iterates: Vec<DenseVector>,
    pub final_x: DenseVector,
    pub diverged: bool,
}

impl RunOutput {
    pub fn final_grad_norm_sq(&self) -> f64 {
        self.metrics
            .last()
            .map_or(self.initial_grad_norm_sq, |m| m.grad_norm_sq)
    }

    pub fn up_bytes_total(&self) -> u64 {
        self.metrics.iter().map(|m| m.up_bytes_total).sum()
    }

    pub fn down_bytes_total(&self) -> u64 {
        self.metrics.iter().map(|m| m.down_bytes_total).sum()
    }

    pub fn write_iterates_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        for (k, x) in self.iterates.iter().enumerate() {
            write_iterate_row(&mut w, k as u64, x)?;
        }
        Ok(())
    }
}

/// Divergence test on the FP64 metrics of an iterate.
pub fn is_diverged(x: &DenseVector, grad_norm_sq: f64, initial: f64) -> bool {
    !x.is_finite() || !grad_norm_sq.is_finite() || grad_norm_sq > DIVERGENCE_FACTOR * initial
}

type TamperHook = Box<dyn FnMut(u64, &mut Envelope) + Send>;

/// In-memory run of all clients plus the master.
pub struct Engine {
    proto: Protocol,
    clients: Vec<ClientNode>,
    key: Option<SecretKey>,
    tamper: Option<TamperHook>,
}

impl fmt::Debug for Engine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Engine")
            .field("cfg", self.proto.cfg())
            .field("clients", &self.clients.len())
            .finish_non_exhaustive()
    }
}

impl Engine {
    /// Starts from `x^0 = 0`. Encrypted variants draw a fresh key.
    pub fn new(problem: &Problem, cfg: RunConfig) -> Result<Self, EngineError> {
        let key = if cfg.algorithm.encrypted() {
            Some(secenv::keygen().map_err(EngineError::Sec)?)
        } else {
            None
        };
        Self::with_key(problem, cfg, key)
    }

    pub fn with_key(
        problem: &Problem,
        cfg: RunConfig,
        key: Option<SecretKey>,
    ) -> Result<Self, EngineError> {
        let proto = Protocol::new(problem, cfg)?;
        let d = proto.d();
        let clients = (0..proto.n() as u32)
            .map(|i| ClientNode::new(i, DenseVector::zeros(d)))
            .collect();
        Ok(Self {
            proto,
            clients,
            key,
            tamper: None,
        })
    }

    /// Called on every envelope between master and clients.
    pub fn set_tamper<F>(&mut self, f: F)
    where
        F: FnMut(u64, &mut Envelope) + Send + 'static,
    {
        self.tamper = Some(Box::new(f));
    }

    pub fn protocol(&self) -> &Protocol {
        &self.proto
    }

    pub fn clients(&self) -> &[ClientNode] {
        &self.clients
    }

    /// Executes round `k` (0-based) and returns per-client byte counts.
    pub fn step(&mut self, round: u64) -> Result<(RoundBytes, [f64; 3]), EngineError> {
        let n = self.proto.n();
        let mut bytes = RoundBytes::zeros(n);
        let mut times = [0.0; 3];
        let assignment = match self.proto.cfg().algorithm {
            Algorithm::DcgdPermk | Algorithm::DcgdPermkAes => Some(self.proto.assignment(round)?),
            _ => None,
        };
        let t = Instant::now();
        let mut out = Vec::with_capacity(n);
        for c in &self.clients {
            out.push(c.outgoing(&self.proto, round, assignment.as_ref(), self.key.as_ref())?);
        }
        times[0] = t.elapsed().as_secs_f64() * 1e3;

        let header = secenv::HEADER_LEN as u64;
        let width = self.proto.cfg().precision.bytes() as u64;
        if self.proto.cfg().algorithm.encrypted() {
            let t = Instant::now();
            let mut envs = Vec::with_capacity(n);
            for (i, o) in out.into_iter().enumerate() {
                let Outgoing::Sealed(mut env) = o else {
                    unreachable!("encrypted variant produced a plaintext chunk")
                };
                bytes.up[i] = env.wire_len() as u64;
                bytes.headerless_up[i] = bytes.up[i] - header;
                if let Some(hook) = self.tamper.as_mut() {
                    hook(round, &mut env);
                }
                envs.push(env);
            }
            // The master forwards the concatenation to everybody.
            let down: u64 = envs.iter().map(|e| e.wire_len() as u64).sum();
            let key = self.key.as_ref().expect("encrypted engine holds a key");
            for (i, c) in self.clients.iter_mut().enumerate() {
                c.apply_envelopes(&self.proto, round, &envs, assignment.as_ref(), key)?;
                bytes.down[i] = down;
                bytes.headerless_down[i] = down - header * n as u64;
            }
            times[1] = t.elapsed().as_secs_f64() * 1e3;
        } else {
            let t = Instant::now();
            let chunks: Vec<SparseChunk> = out
                .into_iter()
                .map(|o| match o {
                    Outgoing::Plain(c) => c,
                    Outgoing::Sealed(_) => unreachable!("plain variant produced an envelope"),
                })
                .collect();
            for (i, c) in chunks.iter().enumerate() {
                bytes.up[i] = c.len() as u64 * width;
                bytes.headerless_up[i] = bytes.up[i];
            }
            let ghat = self.proto.aggregate(&chunks)?;
            for (i, c) in self.clients.iter_mut().enumerate() {
                c.apply_dense(&self.proto, &ghat);
                bytes.down[i] = ghat.len() as u64 * width;
                bytes.headerless_down[i] = bytes.down[i];
            }
            times[2] = t.elapsed().as_secs_f64() * 1e3;
        }
        Ok((bytes, times))
    }

    /// Runs all configured rounds, stopping early on divergence.
    pub fn run(mut self) -> Result<RunOutput, EngineError> {
        let cfg = self.proto.cfg().clone();
        let x0 = self.clients[0].x().clone();
        let (fx0, gn0) = objective_and_gradnorm(self.proto.problem(), &x0);
        let mut iterates = Vec::new();
        if cfg.record_iterates {
            iterates.push(x0.clone());
        }
        let mut metrics = Vec::with_capacity(cfg.rounds as usize);
        let mut diverged = false;
        for k in 0..cfg.rounds {
            let start = Instant::now();
            let (bytes, times) = self.step(k)?;
            let wall = start.elapsed().as_secs_f64() * 1e3;
            let x = self.clients[0].x();
            debug_assert!(self.clients.iter().all(|c| c.x().bits_eq(x)));
            let (fx, gn) = objective_and_gradnorm(self.proto.problem(), x);
            let div = is_diverged(x, gn, gn0);
            let ms = |v: f64| if cfg.record_wall_time { v } else { 0.0 };
            metrics.push(RoundMetrics {
                round: k + 1,
                fx,
                grad_norm_sq: gn,
                up_bytes_total: bytes.up.iter().sum(),
                down_bytes_total: bytes.down.iter().sum(),
                up_bytes_per_client: bytes.up.iter().copied().max().unwrap_or(0),
                down_bytes_per_client: bytes.down.iter().copied().max().unwrap_or(0),
                headerless_up_bytes_per_client: bytes.headerless_up.iter().copied().max().unwrap_or(0),
                headerless_down_bytes_per_client: bytes.headerless_down.iter().copied().max().unwrap_or(0),
                compute_ms: ms(times[0]),
                crypto_ms: ms(times[1]),
                apply_ms: ms(times[2]),
                wall_ms: ms(wall),
                diverged: div,
            });
            if cfg.record_iterates {
                iterates.push(x.clone());
            }
            if div {
                diverged = true;
                break;
            }
        }
        Ok(RunOutput {
            initial_fx: fx0,
            initial_grad_norm_sq: gn0,
            metrics,
            iterates,
            final_x: self.clients[0].x().clone(),
            diverged,
        })
    }
}

/// Runs one client of an encrypted variant over a network link to the
/// hub. `on_iterate` sees `x^0` and then `x^k` after every round.
pub fn run_remote_client<L, F>(
    proto: &Protocol,
    mut node: ClientNode,
    key: &SecretKey,
    link: &mut L,
    mut on_iterate: F,
) -> Result<ClientNode, EngineError>
where
    L: ClientLink,
    F: FnMut(u64, &DenseVector) -> io::Result<()>,
{
    if !proto.cfg().algorithm.encrypted() {
        return Err(EngineError::Config(
            "only the encrypted variants run over the hub".into(),
        ));
    }
    on_iterate(0, node.x())?;
    for k in 0..proto.cfg().rounds {
        let assignment = match proto.cfg().algorithm {
            Algorithm::DcgdPermkAes => Some(proto.assignment(k)?),
            _ => None,
        };
        let Outgoing::Sealed(env) = node.outgoing(proto, k, assignment.as_ref(), Some(key))? else {
            unreachable!("encrypted variant produced a plaintext chunk")
        };
        link.send_frame(&frame_encode(&env)).map_err(transport_err)?;
        let mut envs = Vec::with_capacity(proto.n());
        for _ in 0..proto.n() {
            let bytes = link.recv_frame().map_err(transport_err)?;
            let env = Envelope::from_bytes(&bytes)
                .map_err(|e| EngineError::Protocol(e.to_string()))?;
            envs.push(env);
        }
        node.apply_envelopes(proto, k, &envs, assignment.as_ref(), key)?;
        on_iterate(k + 1, node.x())?;
    }
    Ok(node)
}

fn transport_err(e: TransportError) -> EngineError {
    EngineError::Protocol(e.to_string())
}

/// Convenience wrapper: build an engine and run it.
pub fn run(problem: &Problem, cfg: RunConfig) -> Result<RunOutput, EngineError> {
    Engine::new(problem, cfg)?.run()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeedOutcome {
    pub seed: u64,
    pub final_grad_norm_sq: f64,
    pub diverged: bool,
    pub rounds_run: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TuneEntry {
    pub gamma: f64,
    pub outcomes: Vec<SeedOutcome>,
}

impl TuneEntry {
    pub fn any_diverged(&self) -> bool {
        self.outcomes.iter().any(|o| o.diverged)
    }

    /// Largest final `||∇f||^2` across seeds.
    pub fn worst_final(&self) -> f64 {
        self.outcomes
            .iter()
            .map(|o| o.final_grad_norm_sq)
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TuneReport {
    pub entries: Vec<TuneEntry>,
    pub best_gamma: f64,
}

/// Grid search over `γ`. For every seed a fresh problem (and compressor
/// seed) is drawn; the best `γ` has the smallest worst-case final
/// `||∇f||^2` among grid points that never diverged.
pub fn tune_step_size(
    spec: &ProblemSpec,
    base: &RunConfig,
    grid: &[f64],
    seeds: &[u64],
) -> Result<TuneReport, EngineError> {
    if grid.is_empty() || seeds.is_empty() {
        return Err(EngineError::Config("tuning needs a nonempty grid and seed list".into()));
    }
    let problems = seeds
        .iter()
        .map(|&s| {
            let mut sp = spec.clone();
            sp.seed = s;
            sp.generate()
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut entries = Vec::with_capacity(grid.len());
    for &gamma in grid {
        let mut outcomes = Vec::with_capacity(seeds.len());
        for (&seed, problem) in seeds.iter().zip(&problems) {
            let mut cfg = base.clone();
            cfg.gamma = gamma;
            cfg.compressor_seed = seed;
            cfg.record_iterates = false;
            let out = run(problem, cfg)?;
            outcomes.push(SeedOutcome {
                seed,
                final_grad_norm_sq: out.final_grad_norm_sq(),
                diverged: out.diverged,
                rounds_run: out.metrics.len() as u64,
            });
        }
        entries.push(TuneEntry { gamma, outcomes });
    }
    let best_gamma = entries
        .iter()
        .filter(|e| !e.any_diverged())
        .min_by(|a, b| a.worst_final().total_cmp(&b.worst_final()))
        .map(|e| e.gamma)
        .ok_or(EngineError::TuningFailed)?;
    Ok(TuneReport {
        entries,
        best_gamma,
    })
}

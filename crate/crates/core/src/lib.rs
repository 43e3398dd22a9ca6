//! Permutation-compressed federated gradient descent with authenticated
//! transport, plus cost models for encryption and scheduling.

pub mod compress;
pub mod engine;
pub mod hecost;
pub mod numkit;
pub mod precision;
pub mod sched;
pub mod secenv;
pub mod transport;

pub use compress::{
    assemble, compress_permk, compress_randk, sample_assignment, Assignment, Overlap, Prg,
    SparseChunk,
};
pub use engine::{
    Algorithm, ClientNode, Engine, EngineError, Protocol, RoundMetrics, RunConfig, RunOutput,
};
pub use hecost::{aes128_equivalent_params, CkksParams};
pub use numkit::{DenseVector, Problem, ProblemSpec, Spectrum};
pub use precision::Precision;
pub use sched::{ResourceModel, SchedAlgorithm, Scenario, Schedule, TaskGraph};
pub use secenv::{keygen, open, seal, Envelope, Header, SecError, SecretKey};
pub use transport::{ForwardMode, Hub};

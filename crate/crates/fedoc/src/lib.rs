//! Deterministic simulator for multi-server federated learning over wireless
//! edge networks with overlapping coverage.
//!
//! Edge servers (ESs) form a chain; clients in the overlap between two
//! adjacent cells can either relay aggregated edge models between the servers
//! (relay overlapping clients, ROCs) or pick the earliest-arriving edge model
//! as their training start (normal overlapping clients, NOCs). The crate
//! provides:
//!
//! * [`topology`] — chain topology construction, client roles, geometry checks
//! * [`datagen`] — IDX ingestion, synthetic blobs, non-IID partitioning
//! * [`learner`] — logistic/MLP models, cross-entropy loss, local SGD
//! * [`channel`] — path loss, Rayleigh fading, upload/broadcast/relay latency
//! * [`protocol`] — the relay-based round engine plus HFL/FedMES/FL-EOCD
//!   baselines on a shared event clock
//! * [`analysis`] — cell-centralized SGD oracles and numerical evaluation of
//!   the convergence-bound constants
//! * [`output`] — metrics/timing CSVs, run manifests, checkpoints
//!
//! Every run is a pure function of its configuration and seeds: reruns
//! reproduce metrics byte for byte regardless of thread count.

pub mod analysis;
pub mod channel;
pub mod config;
pub mod datagen;
pub mod error;
pub mod learner;
pub mod output;
pub mod protocol;
pub mod rng;
pub mod topology;

pub use config::{AlgorithmKind, ExperimentConfig, Kappa};
pub use error::{FedocError, Result};

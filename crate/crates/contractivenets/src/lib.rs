//! Contracting networks of continuous-time RNNs.
//!
//! This crate builds, certifies, simulates, and trains "networks of networks":
//! collections of recurrent modules `τẋᵢ = −xᵢ + Wᵢφ(xᵢ) + Σⱼ Lᵢⱼxⱼ + uᵢ(t)`
//! whose overall contraction is guaranteed by construction. Each subnetwork
//! carries an explicit stability certificate (a contraction metric plus a
//! definiteness margin), and the interconnection `L` is parameterized from a
//! free matrix `B` so that it is skew-symmetric in the network metric and
//! therefore cannot destroy stability, no matter how `B` is trained.
//!
//! Module map:
//!
//! - [`numerics`] — dense linear-algebra kernel (symmetric eigensolves,
//!   Hurwitz tests, Lyapunov solves, matrix exponential, symmetric sqrt)
//! - [`certificates`] — checkable/constructive contraction certificates for
//!   single RNN weight matrices, plus an empirical validator
//! - [`composition`] — assembling certified subnetworks into one coupled
//!   system; interconnection parameterization, block metrics, masks
//! - [`samplers`] — random generation of certified subnetworks (sparse
//!   rejection sampling and the SVD parameterization)
//! - [`dynamics`] — fixed-step simulation, empirical contraction rates,
//!   time-varying-metric monitoring, x/y-form equivalence checks
//! - [`data`] — MNIST (IDX) and CIFAR-10 (binary) ingestion and
//!   sequentialization into per-step input vectors
//! - [`training`] — discretized forward pass, exact BPTT over all trainable
//!   parameters, Adam with schedule, evaluation
//! - [`checkpoint`] — network/training-state file format

pub mod certificates;
pub mod checkpoint;
pub mod composition;
pub mod data;
pub mod dynamics;
pub mod numerics;
pub mod rng;
pub mod samplers;
pub mod training;

pub use numerics::{Diagonal, Matrix, Vector};

/// Version stamped into serialized certificates and checkpoints.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

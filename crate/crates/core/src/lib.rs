//! derbench: a continual-learning experiment engine.
//!
//! The crate trains small MLP classifiers on MNIST task streams with
//! rehearsal-based continual-learning methods — dark experience replay
//! (DER/DER++) and its comparators (ER, A-GEM-R, an FDR-style boundary
//! comparator, plain SGD, joint training) — and measures forgetting,
//! transfer, calibration, and loss-landscape statistics.
//!
//! Layering, bottom up:
//! - [`scalar`], [`nn`]: scalar-generic dense tensor math and the classifier
//!   with exact backprop;
//! - [`data`]: IDX ingestion and the per-task input transforms;
//! - [`streams`]: Sequential/Permuted/Rotated MNIST task streams and the
//!   boundary-free MNIST-360 stream;
//! - [`buffer`]: the fixed-capacity reservoir replay memory;
//! - [`methods`]: the continual learners behind one `observe` interface;
//! - [`metrics`]: accuracy matrices, transfer metrics, and model probes;
//! - [`harness`]: configuration, seeding, grid search, persistence, and the
//!   pieces the CLI is built from.
//!
//! Everything numeric is generic over [`scalar::Elem`] (`f32` or `f64`); the
//! aliases below fix the `f64` instantiations that all shipped experiments
//! use.

pub mod buffer;
pub mod data;
pub mod error;
pub mod harness;
pub mod methods;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod scalar;
pub mod streams;

/// Dense `f64` matrix (row-major), the working tensor type of the engine.
pub type Matrix = nn::DenseMatrix<f64>;
/// The `f64` classifier used by every experiment.
pub type Model = nn::DenseModel<f64>;
/// Per-layer `f64` gradients matching [`Model`].
pub type Gradients = nn::GradientBundle<f64>;
/// `f64` loss selector.
pub type Loss = nn::LossSpec<f64>;
/// Replay memory holding `f64` examples.
pub type ReplayBuffer = buffer::MemoryBuffer<f64>;
/// One stored replay example at `f64`.
pub type ReplayEntry = buffer::BufferEntry<f64>;

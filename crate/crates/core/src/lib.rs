//! Search engine for compact encoder-decoder dense-prediction decoders.
//!
//! A recurrent controller emits decoder genomes ([`genome`]), which are
//! instantiated as a computation graph ([`graph`]) with optional auxiliary
//! cells, trained on CPU by a small dense-tensor core ([`nn`]) in two
//! progressive stages ([`search`]), scored with a segmentation reward
//! ([`metrics`]) and fed back to the controller through PPO ([`controller`]).
//! [`tasks`] supplies the synthetic dataset, a frozen encoder stub and a
//! distillation teacher.
//!
//! The crate is `no_std` and only needs `alloc`; file formats, worker pools and
//! the command-line interface live in the `segnas` companion crate.

#![no_std]

extern crate alloc;
#[cfg(any(test, feature = "std"))]
extern crate std;

pub mod controller;
pub mod genome;
pub mod gradcheck;
pub mod graph;
pub mod metrics;
pub mod nn;
pub mod search;
pub mod tasks;
pub mod train;

pub use genome::{CellSpec, ConnectivitySpec, Genome, GenomeError, OpCode};
pub use graph::{AuxHead, FeatureDesc, GraphIR, NodeId, NodeKind};
pub use metrics::ConfusionMatrix;

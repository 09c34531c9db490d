//! Multi-task 360° perception: joint depth and surface-normal estimation on
//! equirectangular panoramas.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`] — a small reverse-mode autodiff engine over dense row-major
//!   tensors, with the spherical sampling and normalization ops the network
//!   needs, plus a finite-difference gradient checker.
//! * [`geometry`] — equirectangular <-> sphere mappings, gnomonic tangent
//!   projections and the distortion-aware sampling grids.
//! * [`blocks`] — panoramic transformer blocks (deformable spherical
//!   attention + locally-enhanced feed-forward).
//! * [`net`] — the two-branch encoder/decoder network with cross-task fusion
//!   and multi-scale prediction heads.
//! * [`losses`] / [`metrics`] — the training objective and the evaluation
//!   suite for depth and normals.
//! * [`synth`] — a seeded box-world renderer producing RGB panoramas with
//!   exact depth, normal and validity ground truth.
//! * [`optim`] / [`train`] — Adam, the schedule, checkpointing and the
//!   deterministic training/eval loops.
//! * [`io`] — PFM / PNG / PLY / checkpoint / dataset readers and writers.

pub mod blocks;
pub mod config;
pub mod geometry;
pub mod gradsuite;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod net;
pub mod optim;
pub mod synth;
pub mod tensor;
pub mod train;

mod error;

pub use error::{Error, Result};

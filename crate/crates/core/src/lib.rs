//! Tumor growth simulation coupled with flow-matching MRI synthesis.
//!
//! The crate is organized around a small set of desk-scale components:
//!
//! - [`grid`]: regular 3D grids, scalar fields, tissue maps, binary masks.
//! - [`growth`]: Fisher-Kolmogorov reaction-diffusion solver and parameter
//!   fitting against segmentation masks.
//! - [`conditioning`]: per-voxel conditioning tensors (tissue one-hot +
//!   tumor concentration) consumed by the velocity model.
//! - [`flowmatch`]: a small convolutional velocity field, its hand-written
//!   gradients, the training loop, and ODE transport in both directions.
//! - [`longitudinal`]: growth-conditioned trajectory synthesis built on top
//!   of the two solvers, plus the corruption sweep.
//! - [`metrics`]: Dice, PSNR, multi-scale SSIM, and temporal curve export.
//! - [`io`]: raw `f32le` volumes with JSON sidecars, and a small read-only
//!   NIfTI-1 subset.
//! - [`phantom`]: synthetic ellipsoidal head phantoms for demos and tests.
//! - [`manifest`]: reproducibility manifests written by the CLI.

pub mod cli;
pub mod conditioning;
pub mod flowmatch;
pub mod grid;
pub mod growth;
pub mod io;
pub mod longitudinal;
pub mod manifest;
pub mod metrics;
pub mod phantom;

pub use conditioning::{ConditioningError, ConditioningTensor, Modality};
pub use flowmatch::{FieldStack, FlowError, FlowSample, Integrator, ModelConfig, VelocityModel};
pub use grid::{GridError, GridSpec, LabelMask, ScalarField3D, Tissue, TissueMap};
pub use growth::{FitOutcome, FitSearch, GrowthError, GrowthParams, SimClock, ThresholdPolicy};
pub use metrics::{MetricRecord, MetricsError};

//! Optimal-transport flow matching on voxel grids.
//!
//! A sample pairs a source stack `z0` (i.i.d. standard normal) with a data
//! stack `z1`; the straight-line interpolant `z_τ = (1−τ)·z0 + τ·z1` has
//! constant velocity `z1 − z0`, which a small convolutional model learns to
//! predict from `(z_τ, τ, conditioning)`. Generation integrates the learned
//! field from τ = 0 to 1; predecessor manipulation runs the same ODE
//! backward to an intermediate τ̃ and forward again under new conditioning.
//!
//! Submodules: [`model`] (the velocity network and its hand-written reverse
//! mode), [`train`] (AdamW + cosine schedule + EMA), [`noise`] (counter-based
//! reproducible sources), [`checkpoint`] (the `TFM1` file format).

pub mod checkpoint;
pub mod model;
pub mod noise;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use model::{fm_loss, ModelConfig, VelocityModel};
pub use noise::sample_noise;
pub use train::{train, TrainConfig, TrainItem, TrainOutcome};

use thiserror::Error;

use crate::conditioning::ConditioningTensor;
use crate::grid::{GridError, GridSpec, ScalarField3D};

#[derive(Debug, Error)]
pub enum FlowError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("tau {0} outside [0, 1]")]
    TauOutOfRange(f64),
    #[error("batch is empty")]
    EmptyBatch,
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("invalid integration interval: {0}")]
    InvalidInterval(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Grid(#[from] GridError),
}

/// A multi-channel field over one grid, stored channel-major (each channel
/// is a contiguous `zyx` row-major plane). The carrier for model inputs,
/// outputs, and noise/data stacks.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldStack {
    spec: GridSpec,
    channels: usize,
    data: Vec<f64>,
}

impl FieldStack {
    pub fn zeros(spec: GridSpec, channels: usize) -> Result<FieldStack, FlowError> {
        spec.validate()?;
        if channels == 0 {
            return Err(FlowError::InvalidConfig("a field stack needs at least one channel".into()));
        }
        Ok(FieldStack { spec, channels, data: vec![0.0; channels * spec.n_voxels()] })
    }

    pub fn from_vec(spec: GridSpec, channels: usize, data: Vec<f64>) -> Result<FieldStack, FlowError> {
        spec.validate()?;
        if data.len() != channels * spec.n_voxels() {
            return Err(FlowError::ShapeMismatch(format!(
                "stack data length {} != {} channels x {} voxels",
                data.len(),
                channels,
                spec.n_voxels()
            )));
        }
        Ok(FieldStack { spec, channels, data })
    }

    pub fn from_field(field: &ScalarField3D) -> FieldStack {
        FieldStack { spec: *field.spec(), channels: 1, data: field.data().to_vec() }
    }

    #[inline]
    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.spec.n_voxels();
        &self.data[c * n..(c + 1) * n]
    }

    /// Extract one channel as a scalar field.
    pub fn to_field(&self, c: usize) -> ScalarField3D {
        ScalarField3D::from_vec(self.spec, self.channel(c).to_vec()).expect("channel length matches spec")
    }

    pub fn same_shape(&self, other: &FieldStack) -> bool {
        self.channels == other.channels && self.spec.same_shape(other.spec())
    }

    /// `self += alpha * other`, elementwise in fixed order.
    pub fn axpy(&mut self, alpha: f64, other: &FieldStack) {
        debug_assert!(self.same_shape(other));
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
    }
}

/// One training example: source, target, interpolation time, conditioning.
#[derive(Debug, Clone)]
pub struct FlowSample {
    pub z0: FieldStack,
    pub z1: FieldStack,
    pub tau: f64,
    pub cond: ConditioningTensor,
}

impl FlowSample {
    fn validate(&self) -> Result<(), FlowError> {
        if !self.z0.same_shape(&self.z1) {
            return Err(FlowError::ShapeMismatch("z0 vs z1".into()));
        }
        if !self.z0.spec().same_shape(self.cond.spec()) {
            return Err(FlowError::ShapeMismatch("sample stacks vs conditioning grid".into()));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(FlowError::TauOutOfRange(self.tau));
        }
        Ok(())
    }
}

/// Straight-line interpolant `(1−τ)·z0 + τ·z1`. The endpoints return the
/// corresponding input bitwise.
pub fn interpolate(z0: &FieldStack, z1: &FieldStack, tau: f64) -> Result<FieldStack, FlowError> {
    if !z0.same_shape(z1) {
        return Err(FlowError::ShapeMismatch("z0 vs z1".into()));
    }
    if !(0.0..=1.0).contains(&tau) {
        return Err(FlowError::TauOutOfRange(tau));
    }
    if tau == 0.0 {
        return Ok(z0.clone());
    }
    if tau == 1.0 {
        return Ok(z1.clone());
    }
    let a = 1.0 - tau;
    let data = z0.data().iter().zip(z1.data()).map(|(&v0, &v1)| a * v0 + tau * v1).collect();
    FieldStack::from_vec(*z0.spec(), z0.channels(), data)
}

/// Ground-truth velocity of the straight-line path: `z1 − z0`, independent
/// of τ.
pub fn target_velocity(z0: &FieldStack, z1: &FieldStack) -> Result<FieldStack, FlowError> {
    if !z0.same_shape(z1) {
        return Err(FlowError::ShapeMismatch("z0 vs z1".into()));
    }
    let data = z0.data().iter().zip(z1.data()).map(|(&v0, &v1)| v1 - v0).collect();
    FieldStack::from_vec(*z0.spec(), z0.channels(), data)
}

/// ODE integration scheme for transport.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Integrator {
    #[default]
    Euler,
    Heun,
}

/// Integrate `dz/dτ = v(z, τ)` from `tau_start` to `tau_end` (either
/// direction) with `steps` uniform steps. `tau_end == tau_start` returns the
/// input bitwise. Generic over the velocity so closed-form fields can drive
/// convergence oracles.
pub fn integrate_with<F>(
    mut velocity: F,
    z_start: &FieldStack,
    tau_start: f64,
    tau_end: f64,
    steps: usize,
    method: Integrator,
) -> Result<FieldStack, FlowError>
where
    F: FnMut(&FieldStack, f64) -> Result<FieldStack, FlowError>,
{
    if steps == 0 {
        return Err(FlowError::InvalidInterval("steps must be >= 1".into()));
    }
    if tau_end == tau_start {
        return Ok(z_start.clone());
    }
    let span = tau_end - tau_start;
    let n = steps as f64;
    let h = span / n;
    let mut cur = z_start.clone();
    for i in 0..steps {
        // τ recomputed from the step index: no drift accumulation, exact endpoints
        let t0 = tau_start + span * (i as f64 / n);
        match method {
            Integrator::Euler => {
                let k = velocity(&cur, t0)?;
                cur.axpy(h, &k);
            }
            Integrator::Heun => {
                let k1 = velocity(&cur, t0)?;
                let mut pred = cur.clone();
                pred.axpy(h, &k1);
                let t1 = tau_start + span * ((i + 1) as f64 / n);
                let k2 = velocity(&pred, t1)?;
                cur.axpy(0.5 * h, &k1);
                cur.axpy(0.5 * h, &k2);
            }
        }
    }
    Ok(cur)
}

/// Transport `z_start` from `tau_start` forward to `tau_end` under the
/// model's learned velocity.
pub fn integrate_forward(
    model: &VelocityModel,
    z_start: &FieldStack,
    tau_start: f64,
    tau_end: f64,
    steps: usize,
    cond: &ConditioningTensor,
    method: Integrator,
) -> Result<FieldStack, FlowError> {
    if !(0.0..=1.0).contains(&tau_start) || !(0.0..=1.0).contains(&tau_end) || tau_start > tau_end {
        return Err(FlowError::InvalidInterval(format!(
            "need 0 <= tau_start <= tau_end <= 1, got [{tau_start}, {tau_end}]"
        )));
    }
    integrate_with(|z, t| model.forward(z, t, cond), z_start, tau_start, tau_end, steps, method)
}

/// Run the learned flow in reverse from τ = 1 down to `tau_target`,
/// producing the corrupted intermediate state. `tau_target = 1` returns the
/// input bitwise.
pub fn transport_backward(
    model: &VelocityModel,
    z1: &FieldStack,
    tau_target: f64,
    steps: usize,
    cond: &ConditioningTensor,
    method: Integrator,
) -> Result<FieldStack, FlowError> {
    if !(0.0..=1.0).contains(&tau_target) {
        return Err(FlowError::InvalidInterval(format!("tau_target {tau_target} outside [0, 1]")));
    }
    integrate_with(|z, t| model.forward(z, t, cond), z1, 1.0, tau_target, steps, method)
}

//! Regular 3D grids and the dense fields that live on them.
//!
//! Everything downstream (growth solver, flow-matching model, metrics)
//! shares these types. Voxel data is kept in `f64` in memory; the on-disk
//! interchange format is `f32` little-endian (see [`crate::io`]).

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("invalid grid spec: {0}")]
    InvalidSpec(String),
    #[error("data length {got} does not match grid voxel count {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("grid shape mismatch: {0}")]
    ShapeMismatch(String),
}

/// Geometry of a regular axis-aligned grid: voxel counts and spacings in mm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
    pub dx: f64,
    pub dy: f64,
    pub dz: f64,
}

impl GridSpec {
    pub fn new(nx: usize, ny: usize, nz: usize, dx: f64, dy: f64, dz: f64) -> Result<Self, GridError> {
        let spec = GridSpec { nx, ny, nz, dx, dy, dz };
        spec.validate()?;
        Ok(spec)
    }

    /// Isotropic convenience constructor: cubic grid, uniform spacing.
    pub fn isotropic(n: usize, spacing: f64) -> Result<Self, GridError> {
        Self::new(n, n, n, spacing, spacing, spacing)
    }

    pub fn validate(&self) -> Result<(), GridError> {
        if self.nx == 0 || self.ny == 0 || self.nz == 0 {
            return Err(GridError::InvalidSpec(format!(
                "voxel counts must be positive, got {}x{}x{}",
                self.nx, self.ny, self.nz
            )));
        }
        for (name, s) in [("dx", self.dx), ("dy", self.dy), ("dz", self.dz)] {
            if !s.is_finite() || s <= 0.0 {
                return Err(GridError::InvalidSpec(format!("{name} must be finite and positive, got {s}")));
            }
        }
        Ok(())
    }

    #[inline]
    pub fn n_voxels(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    /// Linear index of voxel `(x, y, z)`. Row-major with `z` slowest:
    /// `idx = (z * ny + y) * nx + x`.
    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        debug_assert!(x < self.nx && y < self.ny && z < self.nz);
        (z * self.ny + y) * self.nx + x
    }

    /// Inverse of [`GridSpec::index`].
    #[inline]
    pub fn coords(&self, idx: usize) -> (usize, usize, usize) {
        debug_assert!(idx < self.n_voxels());
        let x = idx % self.nx;
        let y = (idx / self.nx) % self.ny;
        let z = idx / (self.nx * self.ny);
        (x, y, z)
    }

    /// Physical position of the voxel center, in mm.
    #[inline]
    pub fn position(&self, x: usize, y: usize, z: usize) -> [f64; 3] {
        [x as f64 * self.dx, y as f64 * self.dy, z as f64 * self.dz]
    }

    pub fn min_spacing(&self) -> f64 {
        self.dx.min(self.dy).min(self.dz)
    }

    pub fn same_shape(&self, other: &GridSpec) -> bool {
        self.nx == other.nx && self.ny == other.ny && self.nz == other.nz
    }
}

/// Deterministic pairwise (tree) summation.
///
/// The reduction tree depends only on the slice length, so the result is
/// bitwise reproducible for a given input regardless of thread count, and
/// rounding error grows as O(log n) rather than O(n).
pub fn pairwise_sum(values: &[f64]) -> f64 {
    const LEAF: usize = 64;
    if values.len() <= LEAF {
        let mut acc = 0.0;
        for v in values {
            acc += v;
        }
        acc
    } else {
        let mid = values.len() / 2;
        pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
    }
}

/// A dense scalar field over a [`GridSpec`], stored in `zyx` row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField3D {
    spec: GridSpec,
    data: Vec<f64>,
}

impl ScalarField3D {
    /// A field filled with `fill`.
    pub fn new(spec: GridSpec, fill: f64) -> Result<Self, GridError> {
        spec.validate()?;
        Ok(ScalarField3D { spec, data: vec![fill; spec.n_voxels()] })
    }

    pub fn from_vec(spec: GridSpec, data: Vec<f64>) -> Result<Self, GridError> {
        spec.validate()?;
        if data.len() != spec.n_voxels() {
            return Err(GridError::LengthMismatch { expected: spec.n_voxels(), got: data.len() });
        }
        Ok(ScalarField3D { spec, data })
    }

    #[inline]
    pub fn spec(&self) -> &GridSpec {
        &self.spec
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
    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.data[self.spec.index(x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, v: f64) {
        let i = self.spec.index(x, y, z);
        self.data[i] = v;
    }

    /// Apply `f` voxel-wise, then reduce the mapped values with pairwise
    /// summation. The scratch buffer is allocated once per call.
    pub fn map_reduce<F: Fn(f64) -> f64>(&self, f: F) -> f64 {
        let mapped: Vec<f64> = self.data.iter().map(|&v| f(v)).collect();
        pairwise_sum(&mapped)
    }

    /// Total mass: sum of voxel values times voxel volume.
    pub fn mass(&self) -> f64 {
        let voxel = self.spec.dx * self.spec.dy * self.spec.dz;
        pairwise_sum(&self.data) * voxel
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, &v| m.max(v.abs()))
    }

    /// Clamp every voxel into `[lo, hi]` in place.
    pub fn clamp_in_place(&mut self, lo: f64, hi: f64) {
        for v in &mut self.data {
            *v = v.clamp(lo, hi);
        }
    }
}

/// Tissue classes recognized by the growth solver and conditioning encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tissue {
    /// Outside the head, or any voxel the solver must never touch.
    Background,
    /// Cerebrospinal fluid: inside the brain mask, but impermeable to tumor.
    Csf,
    Gray,
    White,
}

impl Tissue {
    pub const ALL: [Tissue; 4] = [Tissue::Background, Tissue::Csf, Tissue::Gray, Tissue::White];

    #[inline]
    pub fn code(self) -> u8 {
        match self {
            Tissue::Background => 0,
            Tissue::Csf => 1,
            Tissue::Gray => 2,
            Tissue::White => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Tissue> {
        match code {
            0 => Some(Tissue::Background),
            1 => Some(Tissue::Csf),
            2 => Some(Tissue::Gray),
            3 => Some(Tissue::White),
            _ => None,
        }
    }

    /// True for voxels inside the brain mask (everything but background).
    #[inline]
    pub fn in_brain(self) -> bool {
        !matches!(self, Tissue::Background)
    }

    /// True where tumor cells can live and migrate.
    #[inline]
    pub fn is_parenchyma(self) -> bool {
        matches!(self, Tissue::Gray | Tissue::White)
    }
}

/// A per-voxel tissue segmentation over a [`GridSpec`].
#[derive(Debug, Clone, PartialEq)]
pub struct TissueMap {
    spec: GridSpec,
    labels: Vec<Tissue>,
}

impl TissueMap {
    pub fn new(spec: GridSpec, fill: Tissue) -> Result<Self, GridError> {
        spec.validate()?;
        Ok(TissueMap { spec, labels: vec![fill; spec.n_voxels()] })
    }

    pub fn from_labels(spec: GridSpec, labels: Vec<Tissue>) -> Result<Self, GridError> {
        spec.validate()?;
        if labels.len() != spec.n_voxels() {
            return Err(GridError::LengthMismatch { expected: spec.n_voxels(), got: labels.len() });
        }
        Ok(TissueMap { spec, labels })
    }

    /// Decode a map from raw `u8` codes (see [`Tissue::code`]).
    pub fn from_codes(spec: GridSpec, codes: &[u8]) -> Result<Self, GridError> {
        spec.validate()?;
        if codes.len() != spec.n_voxels() {
            return Err(GridError::LengthMismatch { expected: spec.n_voxels(), got: codes.len() });
        }
        let labels = codes
            .iter()
            .map(|&c| Tissue::from_code(c).ok_or_else(|| GridError::InvalidSpec(format!("unknown tissue code {c}"))))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(TissueMap { spec, labels })
    }

    #[inline]
    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    #[inline]
    pub fn labels(&self) -> &[Tissue] {
        &self.labels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> Tissue {
        self.labels[self.spec.index(x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, t: Tissue) {
        let i = self.spec.index(x, y, z);
        self.labels[i] = t;
    }

    pub fn count(&self, tissue: Tissue) -> usize {
        self.labels.iter().filter(|&&t| t == tissue).count()
    }
}

/// A binary mask over a [`GridSpec`], e.g. a segmented tumor region.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMask {
    spec: GridSpec,
    bits: Vec<bool>,
}

impl LabelMask {
    pub fn new(spec: GridSpec, fill: bool) -> Result<Self, GridError> {
        spec.validate()?;
        Ok(LabelMask { spec, bits: vec![fill; spec.n_voxels()] })
    }

    pub fn from_bits(spec: GridSpec, bits: Vec<bool>) -> Result<Self, GridError> {
        spec.validate()?;
        if bits.len() != spec.n_voxels() {
            return Err(GridError::LengthMismatch { expected: spec.n_voxels(), got: bits.len() });
        }
        Ok(LabelMask { spec, bits })
    }

    #[inline]
    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    #[inline]
    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        self.bits[self.spec.index(x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, v: bool) {
        let i = self.spec.index(x, y, z);
        self.bits[i] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Voxel-wise union with another mask of the same shape.
    pub fn union(&self, other: &LabelMask) -> Result<LabelMask, GridError> {
        if !self.spec.same_shape(other.spec()) {
            return Err(GridError::ShapeMismatch("mask union requires equal shapes".into()));
        }
        let bits = self.bits.iter().zip(&other.bits).map(|(&a, &b)| a || b).collect();
        LabelMask::from_bits(self.spec, bits)
    }

    /// Voxel-wise complement.
    pub fn complement(&self) -> LabelMask {
        LabelMask { spec: self.spec, bits: self.bits.iter().map(|&b| !b).collect() }
    }
}

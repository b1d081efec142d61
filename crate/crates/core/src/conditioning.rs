//! Per-voxel conditioning tensors for the velocity model.
//!
//! A conditioning tensor packs four spatial channels, in this order:
//!
//! 0. CSF one-hot
//! 1. gray-matter one-hot
//! 2. white-matter one-hot
//! 3. tumor cell concentration in `[0, 1]`
//!
//! Background voxels are zero in all three tissue channels, so the one-hot
//! block doubles as a brain mask. The target modality travels alongside as
//! a discrete code and is embedded by the model, not rasterized here.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{GridSpec, ScalarField3D, Tissue, TissueMap};

#[derive(Debug, Error)]
pub enum ConditioningError {
    #[error("tissue map and concentration field have different shapes")]
    ShapeMismatch,
    #[error("concentration out of range at voxel {index}: {value} (expected [0, 1])")]
    ConcentrationOutOfRange { index: usize, value: f64 },
}

/// MRI contrast the model is asked to produce.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Modality {
    T1,
    T1c,
    T2,
    Flair,
}

impl Modality {
    pub const ALL: [Modality; 4] = [Modality::T1, Modality::T1c, Modality::T2, Modality::Flair];

    /// Stable code used for embedding lookup and file naming.
    #[inline]
    pub fn code(self) -> usize {
        match self {
            Modality::T1 => 0,
            Modality::T1c => 1,
            Modality::T2 => 2,
            Modality::Flair => 3,
        }
    }

    pub fn from_code(code: usize) -> Option<Modality> {
        Modality::ALL.get(code).copied().filter(|m| m.code() == code)
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::T1 => "T1",
            Modality::T1c => "T1c",
            Modality::T2 => "T2",
            Modality::Flair => "FLAIR",
        }
    }

    pub fn parse(s: &str) -> Option<Modality> {
        match s.to_ascii_uppercase().as_str() {
            "T1" => Some(Modality::T1),
            "T1C" => Some(Modality::T1c),
            "T2" => Some(Modality::T2),
            "FLAIR" => Some(Modality::Flair),
            _ => None,
        }
    }
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Number of spatial channels in a conditioning tensor.
pub const COND_CHANNELS: usize = 4;

/// Channel-major conditioning volume plus the requested modality.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditioningTensor {
    spec: GridSpec,
    /// `COND_CHANNELS` planes of `spec.n_voxels()` values each, channel-major.
    data: Vec<f64>,
    pub modality: Modality,
}

/// Build a conditioning tensor from a segmentation and a concentration field.
///
/// Rejects shape mismatches and any concentration outside `[0, 1]` (NaN
/// included); growth solver output is already clamped, so a violation here
/// means the caller wired fields up incorrectly.
pub fn assemble(
    tissue: &TissueMap,
    concentration: &ScalarField3D,
    modality: Modality,
) -> Result<ConditioningTensor, ConditioningError> {
    if tissue.spec() != concentration.spec() {
        return Err(ConditioningError::ShapeMismatch);
    }
    let n = tissue.spec().n_voxels();
    for (index, &value) in concentration.data().iter().enumerate() {
        if !(0.0..=1.0).contains(&value) {
            return Err(ConditioningError::ConcentrationOutOfRange { index, value });
        }
    }
    let mut data = vec![0.0; COND_CHANNELS * n];
    let (csf, rest) = data.split_at_mut(n);
    let (gray, rest) = rest.split_at_mut(n);
    let (white, conc) = rest.split_at_mut(n);
    for (i, &t) in tissue.labels().iter().enumerate() {
        match t {
            Tissue::Csf => csf[i] = 1.0,
            Tissue::Gray => gray[i] = 1.0,
            Tissue::White => white[i] = 1.0,
            Tissue::Background => {}
        }
    }
    conc.copy_from_slice(concentration.data());
    Ok(ConditioningTensor { spec: *tissue.spec(), data, modality })
}

impl ConditioningTensor {
    #[inline]
    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    /// All channels, channel-major.
    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.spec.n_voxels();
        &self.data[c * n..(c + 1) * n]
    }

    /// The concentration plane (channel 3) as a standalone field.
    pub fn concentration(&self) -> ScalarField3D {
        ScalarField3D::from_vec(self.spec, self.channel(3).to_vec()).expect("channel length matches spec")
    }

    /// Replace the concentration plane, re-validating range and shape.
    pub fn with_concentration(&self, concentration: &ScalarField3D) -> Result<ConditioningTensor, ConditioningError> {
        if concentration.spec() != &self.spec {
            return Err(ConditioningError::ShapeMismatch);
        }
        for (index, &value) in concentration.data().iter().enumerate() {
            if !(0.0..=1.0).contains(&value) {
                return Err(ConditioningError::ConcentrationOutOfRange { index, value });
            }
        }
        let mut out = self.clone();
        let n = self.spec.n_voxels();
        out.data[3 * n..].copy_from_slice(concentration.data());
        Ok(out)
    }

    /// Same channels, different target modality.
    pub fn with_modality(&self, modality: Modality) -> ConditioningTensor {
        let mut out = self.clone();
        out.modality = modality;
        out
    }
}

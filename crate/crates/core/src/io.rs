//! Volume and configuration persistence.
//!
//! The native interchange format is a raw little-endian payload next to a
//! JSON sidecar describing it: `foo.f32` + `foo.json` for scalar fields
//! (`f32le`), `foo.u8` + `foo.json` for tissue maps and masks (`u8`). The
//! sidecar records dims, spacing in mm, dtype, the fixed `zyx` axis order
//! (x fastest), and an intent tag that tells readers which typed value to
//! build. Raw payloads re-read bitwise; note that in-memory fields are
//! `f64`, so writing rounds each voxel to `f32` once.
//!
//! A minimal read-only NIfTI-1 subset (`.nii`, little-endian, float32 or
//! uint8) covers ingesting real segmentations without a neuroimaging stack.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{de::DeserializeOwned, Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{GridSpec, LabelMask, ScalarField3D, TissueMap};

#[derive(Debug, Error)]
pub enum IoError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("sidecar not found for {0}")]
    MissingSidecar(PathBuf),
    #[error("payload is {got} bytes, header declares {expected}")]
    SizeMismatch { expected: usize, got: usize },
    #[error("unknown dtype tag {0:?}")]
    UnknownDtype(String),
    #[error("bad magic: expected NIfTI-1 \"n+1\"")]
    BadMagic,
    #[error("unsupported NIfTI datatype code {0}")]
    UnsupportedDatatype(i16),
    #[error("unsupported schema_version {0} (this tool reads version 1)")]
    UnsupportedVersion(u32),
    #[error("invalid file: {0}")]
    Invalid(String),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Grid(#[from] crate::grid::GridError),
}

/// Payload element type.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Dtype {
    #[serde(rename = "f32le")]
    F32le,
    #[serde(rename = "u8")]
    U8,
}

/// What the voxels mean, and therefore which typed value to construct.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Intent {
    Concentration,
    Image,
    Tissue,
    Mask,
}

/// Linear rescale block: on read, image intents map `[min, max] → [0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rescale {
    pub min: f64,
    pub max: f64,
}

/// JSON sidecar contents for a raw payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeHeader {
    pub schema_version: u32,
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
    pub dx: f64,
    pub dy: f64,
    pub dz: f64,
    pub dtype: Dtype,
    /// Axis order of the payload; always `"zyx"` (z slowest, x fastest).
    pub order: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intent: Option<Intent>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rescale: Option<Rescale>,
}

impl VolumeHeader {
    fn for_spec(spec: &GridSpec, dtype: Dtype, intent: Intent) -> VolumeHeader {
        VolumeHeader {
            schema_version: 1,
            nx: spec.nx,
            ny: spec.ny,
            nz: spec.nz,
            dx: spec.dx,
            dy: spec.dy,
            dz: spec.dz,
            dtype,
            order: "zyx".to_string(),
            intent: Some(intent),
            rescale: None,
        }
    }

    pub fn spec(&self) -> Result<GridSpec, IoError> {
        Ok(GridSpec::new(self.nx, self.ny, self.nz, self.dx, self.dy, self.dz)?)
    }

    fn payload_bytes(&self) -> usize {
        let n = self.nx * self.ny * self.nz;
        match self.dtype {
            Dtype::F32le => n * 4,
            Dtype::U8 => n,
        }
    }
}

/// A typed volume as dispatched by the sidecar's intent tag.
#[derive(Debug, Clone, PartialEq)]
pub enum Volume {
    Scalar(ScalarField3D),
    Tissue(TissueMap),
    Mask(LabelMask),
}

/// Sidecar path for a payload: same stem, `.json` extension.
pub fn sidecar_path(payload: &Path) -> PathBuf {
    payload.with_extension("json")
}

fn write_sidecar(payload: &Path, header: &VolumeHeader) -> Result<(), IoError> {
    let json = serde_json::to_string_pretty(header)?;
    fs::write(sidecar_path(payload), json)?;
    Ok(())
}

/// Write a scalar field as `f32le` payload + sidecar. Values are rounded
/// from the in-memory `f64` representation to `f32` once, here.
pub fn write_scalar(path: &Path, field: &ScalarField3D, intent: Intent) -> Result<(), IoError> {
    if !matches!(intent, Intent::Concentration | Intent::Image) {
        return Err(IoError::Invalid(format!("scalar fields take concentration/image intent, got {intent:?}")));
    }
    let mut bytes = Vec::with_capacity(field.data().len() * 4);
    for &v in field.data() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, &bytes)?;
    write_sidecar(path, &VolumeHeader::for_spec(field.spec(), Dtype::F32le, intent))
}

/// Write a tissue map as `u8` codes + sidecar.
pub fn write_tissue(path: &Path, map: &TissueMap) -> Result<(), IoError> {
    let bytes: Vec<u8> = map.labels().iter().map(|t| t.code()).collect();
    fs::write(path, &bytes)?;
    write_sidecar(path, &VolumeHeader::for_spec(map.spec(), Dtype::U8, Intent::Tissue))
}

/// Write a binary mask as `u8` 0/1 + sidecar.
pub fn write_mask(path: &Path, mask: &LabelMask) -> Result<(), IoError> {
    let bytes: Vec<u8> = mask.bits().iter().map(|&b| b as u8).collect();
    fs::write(path, &bytes)?;
    write_sidecar(path, &VolumeHeader::for_spec(mask.spec(), Dtype::U8, Intent::Mask))
}

/// Read any sidecar-described volume, dispatching on the intent tag
/// (missing intent defaults to `image`). The payload length is validated
/// against the header before any voxel decoding.
pub fn read_volume(path: &Path) -> Result<Volume, IoError> {
    let sidecar = sidecar_path(path);
    if !sidecar.exists() {
        return Err(IoError::MissingSidecar(sidecar));
    }
    let header: VolumeHeader = serde_json::from_str(&fs::read_to_string(&sidecar)?)?;
    if header.schema_version != 1 {
        return Err(IoError::UnsupportedVersion(header.schema_version));
    }
    if header.order != "zyx" {
        return Err(IoError::Invalid(format!("unsupported axis order {:?} (only \"zyx\")", header.order)));
    }
    let spec = header.spec()?;
    let payload = fs::read(path)?;
    if payload.len() != header.payload_bytes() {
        return Err(IoError::SizeMismatch { expected: header.payload_bytes(), got: payload.len() });
    }

    let intent = header.intent.unwrap_or(Intent::Image);
    match (header.dtype, intent) {
        (Dtype::F32le, Intent::Concentration) | (Dtype::F32le, Intent::Image) => {
            let mut data = Vec::with_capacity(spec.n_voxels());
            for chunk in payload.chunks_exact(4) {
                data.push(f32::from_le_bytes(chunk.try_into().expect("chunks_exact yields 4 bytes")) as f64);
            }
            if intent == Intent::Image {
                if let Some(r) = header.rescale {
                    if !r.max.is_finite() || !r.min.is_finite() || r.max <= r.min {
                        return Err(IoError::Invalid(format!("rescale requires max > min, got {r:?}")));
                    }
                    let span = r.max - r.min;
                    for v in &mut data {
                        *v = (*v - r.min) / span;
                    }
                }
            }
            Ok(Volume::Scalar(ScalarField3D::from_vec(spec, data)?))
        }
        (Dtype::U8, Intent::Tissue) => Ok(Volume::Tissue(TissueMap::from_codes(spec, &payload)?)),
        (Dtype::U8, Intent::Mask) => {
            let bits = payload.iter().map(|&b| b != 0).collect();
            Ok(Volume::Mask(LabelMask::from_bits(spec, bits)?))
        }
        (dtype, intent) => Err(IoError::UnknownDtype(format!("{dtype:?} with intent {intent:?}"))),
    }
}

/// Read a volume and require a scalar field.
pub fn read_scalar(path: &Path) -> Result<ScalarField3D, IoError> {
    match read_volume(path)? {
        Volume::Scalar(f) => Ok(f),
        other => Err(IoError::Invalid(format!("expected a scalar volume at {}, found {other:?}", path.display()))),
    }
}

/// Read a volume and require a tissue map.
pub fn read_tissue(path: &Path) -> Result<TissueMap, IoError> {
    match read_volume(path)? {
        Volume::Tissue(t) => Ok(t),
        _ => Err(IoError::Invalid(format!("expected a tissue map at {}", path.display()))),
    }
}

/// Read a volume and require a mask.
pub fn read_mask(path: &Path) -> Result<LabelMask, IoError> {
    match read_volume(path)? {
        Volume::Mask(m) => Ok(m),
        _ => Err(IoError::Invalid(format!("expected a mask at {}", path.display()))),
    }
}

const NIFTI_HEADER_LEN: usize = 348;
const NIFTI_DT_UINT8: i16 = 2;
const NIFTI_DT_FLOAT32: i16 = 16;

fn le_i16(bytes: &[u8], offset: usize) -> i16 {
    i16::from_le_bytes([bytes[offset], bytes[offset + 1]])
}

fn le_i32(bytes: &[u8], offset: usize) -> i32 {
    i32::from_le_bytes(bytes[offset..offset + 4].try_into().expect("4 bytes"))
}

fn le_f32(bytes: &[u8], offset: usize) -> f32 {
    f32::from_le_bytes(bytes[offset..offset + 4].try_into().expect("4 bytes"))
}

/// Read a single-file little-endian NIfTI-1 volume (`float32` or `uint8`).
///
/// Only dims and spacing are honored; orientation fields are ignored with a
/// warning. Trailing singleton dims are fine, higher-dimensional volumes
/// are not.
pub fn read_nifti_subset(path: &Path) -> Result<ScalarField3D, IoError> {
    let bytes = fs::read(path)?;
    if bytes.len() < NIFTI_HEADER_LEN + 4 {
        return Err(IoError::Invalid(format!("file too short for a NIfTI-1 header: {} bytes", bytes.len())));
    }
    if &bytes[344..348] != b"n+1\0" {
        return Err(IoError::BadMagic);
    }
    if le_i32(&bytes, 0) != NIFTI_HEADER_LEN as i32 {
        return Err(IoError::Invalid("sizeof_hdr is not 348; big-endian files are not supported".into()));
    }

    let ndim = le_i16(&bytes, 40);
    if !(1..=7).contains(&ndim) {
        return Err(IoError::Invalid(format!("dim[0] = {ndim} out of range")));
    }
    let mut dims = [1usize; 7];
    for (i, d) in dims.iter_mut().enumerate().take(ndim as usize) {
        let v = le_i16(&bytes, 42 + 2 * i);
        if v < 1 {
            return Err(IoError::Invalid(format!("dim[{}] = {v} must be >= 1", i + 1)));
        }
        *d = v as usize;
    }
    if dims[3..].iter().any(|&d| d != 1) {
        return Err(IoError::Invalid(format!("only 3D volumes are supported, got dims {dims:?}")));
    }

    let datatype = le_i16(&bytes, 70);
    let voxel_bytes = match datatype {
        NIFTI_DT_FLOAT32 => 4,
        NIFTI_DT_UINT8 => 1,
        other => return Err(IoError::UnsupportedDatatype(other)),
    };

    let mut spacing = [1.0f64; 3];
    for (i, s) in spacing.iter_mut().enumerate() {
        let p = le_f32(&bytes, 76 + 4 * (i + 1)) as f64;
        if p > 0.0 && p.is_finite() {
            *s = p;
        } else {
            log::warn!("pixdim[{}] = {p} is not usable, defaulting to 1.0 mm", i + 1);
        }
    }

    // qform/sform orientation is out of scope; note when one is present
    let qform = le_i16(&bytes, 252);
    let sform = le_i16(&bytes, 254);
    if qform > 0 || sform > 0 {
        log::warn!("ignoring NIfTI orientation (qform_code={qform}, sform_code={sform}); only spacing is used");
    }

    let vox_offset = le_f32(&bytes, 108);
    let offset = if vox_offset >= NIFTI_HEADER_LEN as f32 { vox_offset as usize } else { NIFTI_HEADER_LEN + 4 };
    let n = dims[0] * dims[1] * dims[2];
    let expected = n * voxel_bytes;
    if bytes.len() < offset || bytes.len() - offset < expected {
        return Err(IoError::SizeMismatch { expected: offset + expected, got: bytes.len() });
    }

    let payload = &bytes[offset..offset + expected];
    let data: Vec<f64> = match datatype {
        NIFTI_DT_FLOAT32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect(),
        _ => payload.iter().map(|&b| b as f64).collect(),
    };
    let spec = GridSpec::new(dims[0], dims[1], dims[2], spacing[0], spacing[1], spacing[2])?;
    Ok(ScalarField3D::from_vec(spec, data)?)
}

/// Read a JSON config, enforcing `schema_version: 1` before full decoding.
pub fn read_json_config<T: DeserializeOwned>(path: &Path) -> Result<T, IoError> {
    let text = fs::read_to_string(path)?;
    #[derive(Deserialize)]
    struct VersionProbe {
        schema_version: u32,
    }
    let probe: VersionProbe = serde_json::from_str(&text)?;
    if probe.schema_version != 1 {
        return Err(IoError::UnsupportedVersion(probe.schema_version));
    }
    Ok(serde_json::from_str(&text)?)
}

/// Serialize a value to pretty JSON atomically: write to a temp file in the
/// same directory, then rename over the destination.
pub fn write_json_atomic<T: Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    let mut json = serde_json::to_string_pretty(value)?;
    json.push('\n');
    write_bytes_atomic(path, json.as_bytes())
}

/// Write raw bytes atomically via a temp file in the same directory.
pub fn write_bytes_atomic(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "out".into())
    ));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Write a CSV file with a header row. Values are written as given; callers
/// format numbers.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<(), IoError> {
    let mut out = String::new();
    out.push_str(&header.join(","));
    out.push('\n');
    for row in rows {
        out.push_str(&row.join(","));
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

//! Quantitative evaluation: Dice overlap, PSNR, and windowed MS-SSIM.
//!
//! Every metric reduces with [`pairwise_sum`] in a fixed order, so results
//! are deterministic and independent of voxel iteration or thread count.
//! Volumes are expected normalized to `[0, 1]`; PSNR callers pass
//! `data_max = 1.0` and MS-SSIM uses a fixed dynamic range of 1.0.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conditioning::Modality;
use crate::grid::{pairwise_sum, LabelMask, ScalarField3D};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("inputs have different grid shapes")]
    ShapeMismatch,
    #[error("metric mask contains no voxels")]
    EmptyMask,
    #[error("grid {dims:?} too small for window {window} at {levels} levels")]
    GridTooSmall { dims: [usize; 3], window: usize, levels: usize },
    #[error("invalid metric parameters: {0}")]
    InvalidParams(String),
    #[error("trajectory has fewer than 2 time points")]
    TooFewTimePoints,
}

/// PSNR value reported when the mean squared error is exactly zero, and the
/// upper cap applied to finite values so ordering comparisons stay sane.
pub const PSNR_SENTINEL_DB: f64 = 99.0;

/// One named scalar measurement, optionally tagged with the time point and
/// modality it belongs to. Serialized into `metrics.csv` rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub name: String,
    pub value: f64,
    /// Number of voxels the metric was computed over.
    pub mask_voxels: usize,
    pub t_days: Option<f64>,
    pub modality: Option<Modality>,
}

impl MetricRecord {
    pub fn new(name: &str, value: f64, mask_voxels: usize) -> MetricRecord {
        MetricRecord { name: name.to_string(), value, mask_voxels, t_days: None, modality: None }
    }

    pub fn at(mut self, t_days: f64) -> MetricRecord {
        self.t_days = Some(t_days);
        self
    }

    pub fn tagged(mut self, modality: Modality) -> MetricRecord {
        self.modality = Some(modality);
        self
    }
}

/// Dice overlap `2|A∩B| / (|A| + |B|)`; two empty regions agree perfectly
/// and score 1.0.
pub fn dice(a: &LabelMask, b: &LabelMask) -> Result<f64, MetricsError> {
    if !a.spec().same_shape(b.spec()) {
        return Err(MetricsError::ShapeMismatch);
    }
    let mut inter = 0u64;
    let mut total = 0u64;
    for (&pa, &pb) in a.bits().iter().zip(b.bits()) {
        inter += (pa && pb) as u64;
        total += pa as u64 + pb as u64;
    }
    if total == 0 {
        Ok(1.0)
    } else {
        Ok(2.0 * inter as f64 / total as f64)
    }
}

/// Peak signal-to-noise ratio `10·log10(data_max² / MSE)` over the masked
/// voxels, capped at [`PSNR_SENTINEL_DB`] (which is also the value reported
/// for an exact match).
pub fn psnr(
    a: &ScalarField3D,
    b: &ScalarField3D,
    mask: &LabelMask,
    data_max: f64,
) -> Result<f64, MetricsError> {
    if !a.spec().same_shape(b.spec()) || !a.spec().same_shape(mask.spec()) {
        return Err(MetricsError::ShapeMismatch);
    }
    if !data_max.is_finite() || data_max <= 0.0 {
        return Err(MetricsError::InvalidParams(format!("data_max must be finite and > 0, got {data_max}")));
    }
    let sq: Vec<f64> = a
        .data()
        .iter()
        .zip(b.data())
        .zip(mask.bits())
        .filter(|(_, &m)| m)
        .map(|((&va, &vb), _)| (va - vb) * (va - vb))
        .collect();
    if sq.is_empty() {
        return Err(MetricsError::EmptyMask);
    }
    let mse = pairwise_sum(&sq) / sq.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_SENTINEL_DB);
    }
    Ok((10.0 * (data_max * data_max / mse).log10()).min(PSNR_SENTINEL_DB))
}

/// Conventional five-level MS-SSIM weights; a shallower pyramid uses the
/// leading entries renormalized to sum to 1.
const MS_WEIGHTS_5: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;
/// Fixed dynamic range: volumes are normalized to [0, 1] at I/O time.
const SSIM_RANGE: f64 = 1.0;

/// Normalized 1D Gaussian window of odd length `window` with σ = 1.5.
fn gaussian_window(window: usize) -> Result<Vec<f64>, MetricsError> {
    if window < 3 || window.is_multiple_of(2) {
        return Err(MetricsError::InvalidParams(format!("window must be odd and >= 3, got {window}")));
    }
    let sigma = 1.5f64;
    let r = (window / 2) as isize;
    let raw: Vec<f64> = (-r..=r).map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let norm = pairwise_sum(&raw);
    Ok(raw.iter().map(|w| w / norm).collect())
}

/// Valid-mode separable convolution along one axis. `dims` is the input
/// shape; the output shrinks by `window - 1` along `axis`. Output voxel
/// `(x, y, z)` spans input taps starting at the same `(x, y, z)`, so the
/// first-tap linear index is the same expression for every axis; only the
/// tap stride differs.
fn filter_axis(data: &[f64], dims: [usize; 3], weights: &[f64], axis: usize) -> (Vec<f64>, [usize; 3]) {
    let w = weights.len();
    let [nx, ny, _] = dims;
    let mut out_dims = dims;
    out_dims[axis] = dims[axis] - (w - 1);
    let [ox, oy, oz] = out_dims;
    let stride = match axis {
        0 => 1,
        1 => nx,
        _ => nx * ny,
    };
    let mut out = vec![0.0; ox * oy * oz];
    for z in 0..oz {
        for y in 0..oy {
            for x in 0..ox {
                let start = (z * ny + y) * nx + x;
                let mut acc = 0.0;
                for (k, &wk) in weights.iter().enumerate() {
                    acc += wk * data[start + k * stride];
                }
                out[(z * oy + y) * ox + x] = acc;
            }
        }
    }
    (out, out_dims)
}

/// Full separable valid-mode Gaussian filtering over all three axes.
fn filter3(data: &[f64], dims: [usize; 3], weights: &[f64]) -> (Vec<f64>, [usize; 3]) {
    let (fx, dx) = filter_axis(data, dims, weights, 0);
    let (fy, dy) = filter_axis(&fx, dx, weights, 1);
    filter_axis(&fy, dy, weights, 2)
}

/// Mean SSIM and mean contrast-structure over the valid region of one scale.
fn ssim_stats(a: &[f64], b: &[f64], dims: [usize; 3], window: usize) -> Result<(f64, f64), MetricsError> {
    if dims.iter().any(|&d| d < window) {
        return Err(MetricsError::GridTooSmall { dims, window, levels: 1 });
    }
    let weights = gaussian_window(window)?;
    let n = a.len();
    let a2: Vec<f64> = a.iter().map(|v| v * v).collect();
    let b2: Vec<f64> = b.iter().map(|v| v * v).collect();
    let ab: Vec<f64> = (0..n).map(|i| a[i] * b[i]).collect();

    let (mu_a, vd) = filter3(a, dims, &weights);
    let (mu_b, _) = filter3(b, dims, &weights);
    let (e_a2, _) = filter3(&a2, dims, &weights);
    let (e_b2, _) = filter3(&b2, dims, &weights);
    let (e_ab, _) = filter3(&ab, dims, &weights);

    let c1 = (SSIM_K1 * SSIM_RANGE) * (SSIM_K1 * SSIM_RANGE);
    let c2 = (SSIM_K2 * SSIM_RANGE) * (SSIM_K2 * SSIM_RANGE);
    let m = vd[0] * vd[1] * vd[2];
    let mut ssim_map = Vec::with_capacity(m);
    let mut cs_map = Vec::with_capacity(m);
    for i in 0..m {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = e_a2[i] - ma * ma;
        let vb = e_b2[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        let lum = (2.0 * ma * mb + c1) / (ma * ma + mb * mb + c1);
        let cs = (2.0 * cov + c2) / (va + vb + c2);
        ssim_map.push(lum * cs);
        cs_map.push(cs);
    }
    Ok((pairwise_sum(&ssim_map) / m as f64, pairwise_sum(&cs_map) / m as f64))
}

/// 2×2×2 mean pooling; odd trailing planes are dropped.
fn downsample2(data: &[f64], dims: [usize; 3]) -> (Vec<f64>, [usize; 3]) {
    let [nx, ny, nz] = dims;
    let (ox, oy, oz) = (nx / 2, ny / 2, nz / 2);
    let mut out = vec![0.0; ox * oy * oz];
    for z in 0..oz {
        for y in 0..oy {
            for x in 0..ox {
                let mut acc = 0.0;
                for dz in 0..2 {
                    for dy in 0..2 {
                        for dx in 0..2 {
                            acc += data[((2 * z + dz) * ny + (2 * y + dy)) * nx + (2 * x + dx)];
                        }
                    }
                }
                out[(z * oy + y) * ox + x] = acc / 8.0;
            }
        }
    }
    (out, [ox, oy, oz])
}

/// Sign-preserving power, so negative structure terms survive weighting.
fn spow(x: f64, w: f64) -> f64 {
    x.signum() * x.abs().powf(w)
}

/// Single-scale SSIM with a Gaussian window (σ = 1.5), averaged over the
/// valid (fully-windowed) voxels.
pub fn ssim3d(a: &ScalarField3D, b: &ScalarField3D, window: usize) -> Result<f64, MetricsError> {
    if !a.spec().same_shape(b.spec()) {
        return Err(MetricsError::ShapeMismatch);
    }
    let spec = a.spec();
    let dims = [spec.nx, spec.ny, spec.nz];
    let (ssim, _) = ssim_stats(a.data(), b.data(), dims, window)?;
    Ok(ssim)
}

/// Multi-scale SSIM: contrast-structure terms at the finer scales, full SSIM
/// at the coarsest, combined with sign-preserving powers of the renormalized
/// conventional weights. Scales are built by 2× mean pooling.
pub fn ms_ssim(a: &ScalarField3D, b: &ScalarField3D, levels: usize, window: usize) -> Result<f64, MetricsError> {
    if !a.spec().same_shape(b.spec()) {
        return Err(MetricsError::ShapeMismatch);
    }
    if levels == 0 || levels > MS_WEIGHTS_5.len() {
        return Err(MetricsError::InvalidParams(format!("levels must lie in 1..=5, got {levels}")));
    }
    let spec = a.spec();
    let mut dims = [spec.nx, spec.ny, spec.nz];
    {
        let mut check = dims;
        for _ in 0..levels {
            if check.iter().any(|&d| d < window) {
                return Err(MetricsError::GridTooSmall { dims, window, levels });
            }
            check = [check[0] / 2, check[1] / 2, check[2] / 2];
        }
    }

    let wsum = pairwise_sum(&MS_WEIGHTS_5[..levels]);
    let weights: Vec<f64> = MS_WEIGHTS_5[..levels].iter().map(|w| w / wsum).collect();

    let mut cur_a = a.data().to_vec();
    let mut cur_b = b.data().to_vec();
    let mut total = 1.0;
    for (level, &w) in weights.iter().enumerate() {
        let (ssim, cs) = ssim_stats(&cur_a, &cur_b, dims, window)?;
        if level + 1 == levels {
            total *= spow(ssim, w);
        } else {
            total *= spow(cs, w);
            let (da, nd) = downsample2(&cur_a, dims);
            let (db, _) = downsample2(&cur_b, dims);
            cur_a = da;
            cur_b = db;
            dims = nd;
        }
    }
    Ok(total)
}

/// One row of [`temporal_curves`]: adherence and consistency for a
/// (time point, modality) pair, in time order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemporalRow {
    pub t_days: f64,
    pub modality: Modality,
    /// Whole-tumor Dice of the volume-derived mask against the
    /// conditioning-derived mask at this time point.
    pub dice: f64,
    /// Nontumor PSNR against the previous time point; absent at t = 0.
    pub psnr: Option<f64>,
}

/// Temporal-consistency curves recomputed from a trajectory bundle's stored
/// volumes, masks, and concentrations: per-time-point Dice versus the
/// conditioning, and consecutive nontumor PSNR, emitted in time order with
/// one row per (time point, modality).
pub fn temporal_curves(
    bundle: &crate::longitudinal::TrajectoryBundle,
) -> Result<Vec<TemporalRow>, MetricsError> {
    use crate::growth::{concentration_to_mask, ThresholdPolicy};

    if bundle.entries.len() < 2 {
        return Err(MetricsError::TooFewTimePoints);
    }
    let thr = ThresholdPolicy::default().edema;
    let mut rows = Vec::with_capacity(bundle.entries.len() * bundle.plan.modalities.len());
    for (ti, entry) in bundle.entries.iter().enumerate() {
        let cond_mask = concentration_to_mask(&entry.concentration, thr);
        for (mi, &modality) in bundle.plan.modalities.iter().enumerate() {
            let d = dice(&entry.masks[mi], &cond_mask)?;
            let p = if ti == 0 {
                None
            } else {
                let prev = &bundle.entries[ti - 1];
                let prev_mask = concentration_to_mask(&prev.concentration, thr);
                let nontumor = cond_mask.union(&prev_mask).map_err(|_| MetricsError::ShapeMismatch)?.complement();
                Some(psnr(&entry.image(mi), &prev.image(mi), &nontumor, 1.0)?)
            };
            rows.push(TemporalRow { t_days: entry.t_days, modality, dice: d, psnr: p });
        }
    }
    Ok(rows)
}

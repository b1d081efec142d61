//! The trainable velocity field and its exact reverse-mode gradients.
//!
//! Architecture: three 3×3×3 zero-padded convolutions with ReLU between
//! them, channel plan `in → H → H → C`. The input concatenates, as spatial
//! channels, the transported stack `z_τ` (C channels) and the conditioning
//! tensor (4 channels); τ and the target modality enter as spatially
//! constant channels — sinusoidal τ features plus a learned embedding row —
//! which the first layer sees through the same 3×3×3 weights.
//!
//! Spatially constant input channels make the first layer cheap: their
//! contribution to a voxel depends only on which of the 27 taps fall inside
//! the grid, so it is a lookup over 64 boundary patterns (4 per-axis states)
//! rather than a convolution. The backward pass mirrors this with 27
//! validity-box sums of the upstream gradient per output channel, which also
//! yield the bias and modality-embedding gradients.
//!
//! Gradients are hand-derived and exact; nothing here is stochastic. All
//! reductions run in fixed order (rayon parallelism only ever partitions
//! independent output slots), so forward, loss, and gradient values are
//! bitwise reproducible for any thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conditioning::{ConditioningTensor, Modality, COND_CHANNELS};
use crate::grid::pairwise_sum;

use super::{interpolate, target_velocity, FieldStack, FlowError, FlowSample};

/// Number of taps in a 3×3×3 kernel.
const K3: usize = 27;
/// Linear index of the centered tap (offset (0, 0, 0)).
const K3_CENTER: usize = 13;

/// Hyperparameters fixed at model construction and recorded in checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Channels of the transported stack (equals output channels).
    pub data_channels: usize,
    /// Hidden width H.
    pub hidden: usize,
    /// Sinusoidal τ features: this many geometrically spaced frequencies,
    /// each contributing a sine and a cosine channel.
    pub tau_frequencies: usize,
    /// Width of the learned per-modality embedding row.
    pub modality_embed: usize,
    /// Seed for weight initialization.
    pub init_seed: u64,
}

impl ModelConfig {
    pub fn new(data_channels: usize, init_seed: u64) -> ModelConfig {
        ModelConfig { data_channels, hidden: 16, tau_frequencies: 8, modality_embed: 4, init_seed }
    }

    pub fn validate(&self) -> Result<(), FlowError> {
        for (name, v) in [
            ("data_channels", self.data_channels),
            ("hidden", self.hidden),
            ("tau_frequencies", self.tau_frequencies),
            ("modality_embed", self.modality_embed),
        ] {
            if v == 0 {
                return Err(FlowError::InvalidConfig(format!("{name} must be >= 1")));
            }
        }
        Ok(())
    }

    /// Spatial input channels: data stack + conditioning.
    pub fn spatial_in(&self) -> usize {
        self.data_channels + COND_CHANNELS
    }

    /// Spatially constant input channels: τ features + modality embedding.
    pub fn const_in(&self) -> usize {
        2 * self.tau_frequencies + self.modality_embed
    }
}

/// Offsets of each parameter block in the flat ψ vector; the declaration
/// order here is the serialization order of checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Layout {
    w1: (usize, usize),
    b1: (usize, usize),
    w2: (usize, usize),
    b2: (usize, usize),
    w3: (usize, usize),
    b3: (usize, usize),
    emb: (usize, usize),
    total: usize,
}

impl Layout {
    fn new(cfg: &ModelConfig) -> Layout {
        let (h, c) = (cfg.hidden, cfg.data_channels);
        let in1 = cfg.spatial_in() + cfg.const_in();
        let mut at = 0;
        let mut block = |len: usize| {
            let r = (at, at + len);
            at += len;
            r
        };
        Layout {
            w1: block(h * in1 * K3),
            b1: block(h),
            w2: block(h * h * K3),
            b2: block(h),
            w3: block(c * h * K3),
            b3: block(c),
            emb: block(Modality::ALL.len() * cfg.modality_embed),
            total: at,
        }
    }
}

fn slice(params: &[f64], r: (usize, usize)) -> &[f64] {
    &params[r.0..r.1]
}

/// The velocity network `v_ψ(z_τ, τ, c)` with flat parameter vector ψ.
#[derive(Debug, Clone, PartialEq)]
pub struct VelocityModel {
    cfg: ModelConfig,
    layout: Layout,
    params: Vec<f64>,
}

/// Saved activations from a traced forward pass, consumed by `backward`.
pub struct Trace {
    /// Spatial input channels, channel-major: z stack then conditioning.
    input: Vec<f64>,
    /// Constant channel values: τ features then the modality embedding row.
    const_vals: Vec<f64>,
    h1: Vec<f64>,
    h2: Vec<f64>,
    modality: usize,
    dims: [usize; 3],
}

impl VelocityModel {
    /// Seeded He-normal initialization; the final layer starts at zero so an
    /// untrained model is exactly the zero velocity field.
    pub fn new(cfg: ModelConfig) -> Result<VelocityModel, FlowError> {
        cfg.validate()?;
        let layout = Layout::new(&cfg);
        let mut params = vec![0.0; layout.total];
        let mut rng = ChaCha12Rng::seed_from_u64(cfg.init_seed);
        let normal = StandardNormal;

        let std1 = (2.0 / ((cfg.spatial_in() + cfg.const_in()) * K3) as f64).sqrt();
        for p in &mut params[layout.w1.0..layout.w1.1] {
            let g: f64 = normal.sample(&mut rng);
            *p = std1 * g;
        }
        let std2 = (2.0 / (cfg.hidden * K3) as f64).sqrt();
        for p in &mut params[layout.w2.0..layout.w2.1] {
            let g: f64 = normal.sample(&mut rng);
            *p = std2 * g;
        }
        // w3, b1..b3 stay zero
        for p in &mut params[layout.emb.0..layout.emb.1] {
            *p = normal.sample(&mut rng);
        }
        Ok(VelocityModel { cfg, layout, params })
    }

    /// Rebuild a model around an existing parameter vector (checkpoint load).
    pub fn with_params(cfg: ModelConfig, params: Vec<f64>) -> Result<VelocityModel, FlowError> {
        cfg.validate()?;
        let layout = Layout::new(&cfg);
        if params.len() != layout.total {
            return Err(FlowError::InvalidConfig(format!(
                "parameter vector has {} entries, layout needs {}",
                params.len(),
                layout.total
            )));
        }
        Ok(VelocityModel { cfg, layout, params })
    }

    pub fn cfg(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn n_params(&self) -> usize {
        self.layout.total
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Sinusoidal τ features: frequencies 2^k (geometric, k < F), all sines
    /// then all cosines; followed by the embedding row of `modality`.
    fn const_channel_values(&self, tau: f64, modality: Modality) -> Vec<f64> {
        let f = self.cfg.tau_frequencies;
        let mut vals = Vec::with_capacity(self.cfg.const_in());
        for k in 0..f {
            vals.push(((1u64 << k) as f64 * tau).sin());
        }
        for k in 0..f {
            vals.push(((1u64 << k) as f64 * tau).cos());
        }
        let e = self.cfg.modality_embed;
        let emb = slice(&self.params, self.layout.emb);
        vals.extend_from_slice(&emb[modality.code() * e..(modality.code() + 1) * e]);
        vals
    }

    fn check_inputs(&self, z: &FieldStack, tau: f64, cond: &ConditioningTensor) -> Result<f64, FlowError> {
        if z.channels() != self.cfg.data_channels {
            return Err(FlowError::ShapeMismatch(format!(
                "stack has {} channels, model expects {}",
                z.channels(),
                self.cfg.data_channels
            )));
        }
        if !z.spec().same_shape(cond.spec()) {
            return Err(FlowError::ShapeMismatch("stack vs conditioning grid".into()));
        }
        // integrators may land a float ulp outside [0,1]; anything more is a bug
        if !(-1e-9..=1.0 + 1e-9).contains(&tau) {
            return Err(FlowError::TauOutOfRange(tau));
        }
        Ok(tau.clamp(0.0, 1.0))
    }

    /// Evaluate the velocity field.
    pub fn forward(&self, z: &FieldStack, tau: f64, cond: &ConditioningTensor) -> Result<FieldStack, FlowError> {
        Ok(self.forward_impl(z, tau, cond)?.0)
    }

    /// Evaluate and keep the activations needed for [`VelocityModel::backward`].
    pub fn forward_traced(
        &self,
        z: &FieldStack,
        tau: f64,
        cond: &ConditioningTensor,
    ) -> Result<(FieldStack, Trace), FlowError> {
        self.forward_impl(z, tau, cond)
    }

    fn forward_impl(
        &self,
        z: &FieldStack,
        tau: f64,
        cond: &ConditioningTensor,
    ) -> Result<(FieldStack, Trace), FlowError> {
        let tau = self.check_inputs(z, tau, cond)?;
        let spec = *z.spec();
        let dims = [spec.nx, spec.ny, spec.nz];
        let n = spec.n_voxels();
        let (h, c, s_in) = (self.cfg.hidden, self.cfg.data_channels, self.cfg.spatial_in());

        let mut input = Vec::with_capacity(s_in * n);
        input.extend_from_slice(z.data());
        input.extend_from_slice(cond.data());
        let const_vals = self.const_channel_values(tau, cond.modality);

        let w1 = slice(&self.params, self.layout.w1);
        let b1 = slice(&self.params, self.layout.b1);
        let const_table = build_const_table(w1, b1, &const_vals, s_in, self.cfg.const_in(), h);
        let patterns = axis_patterns(dims);

        // layer 1: constant-channel lookup + spatial convolution, then ReLU
        let mut h1 = vec![0.0; h * n];
        h1.par_chunks_mut(n).enumerate().for_each(|(oc, plane)| {
            fill_from_patterns(plane, &const_table[oc * 64..(oc + 1) * 64], &patterns, dims);
            for ic in 0..s_in {
                let w = &w1[(oc * (s_in + self.cfg.const_in()) + ic) * K3..][..K3];
                add_conv_channel(plane, &input[ic * n..(ic + 1) * n], w, dims);
            }
            for v in plane.iter_mut() {
                *v = v.max(0.0);
            }
        });

        // layer 2
        let w2 = slice(&self.params, self.layout.w2);
        let b2 = slice(&self.params, self.layout.b2);
        let mut h2 = vec![0.0; h * n];
        h2.par_chunks_mut(n).enumerate().for_each(|(oc, plane)| {
            plane.fill(b2[oc]);
            for ic in 0..h {
                add_conv_channel(plane, &h1[ic * n..(ic + 1) * n], &w2[(oc * h + ic) * K3..][..K3], dims);
            }
            for v in plane.iter_mut() {
                *v = v.max(0.0);
            }
        });

        // layer 3 (linear)
        let w3 = slice(&self.params, self.layout.w3);
        let b3 = slice(&self.params, self.layout.b3);
        let mut out = vec![0.0; c * n];
        out.par_chunks_mut(n).enumerate().for_each(|(oc, plane)| {
            plane.fill(b3[oc]);
            for ic in 0..h {
                add_conv_channel(plane, &h2[ic * n..(ic + 1) * n], &w3[(oc * h + ic) * K3..][..K3], dims);
            }
        });

        let out = FieldStack::from_vec(spec, c, out)?;
        let trace = Trace { input, const_vals, h1, h2, modality: cond.modality.code(), dims };
        Ok((out, trace))
    }

    /// Gradient of `sum(gout ⊙ v_ψ)` with respect to ψ, given the trace of
    /// the forward pass that produced `v_ψ`.
    pub fn backward(&self, trace: &Trace, gout: &FieldStack) -> Result<Vec<f64>, FlowError> {
        let dims = trace.dims;
        let n = dims[0] * dims[1] * dims[2];
        if gout.channels() != self.cfg.data_channels || gout.data().len() != self.cfg.data_channels * n {
            return Err(FlowError::ShapeMismatch("gout vs traced forward".into()));
        }
        let (h, c, s_in, k_in) = (self.cfg.hidden, self.cfg.data_channels, self.cfg.spatial_in(), self.cfg.const_in());
        let in1 = s_in + k_in;

        let mut grad = vec![0.0; self.layout.total];

        // ---- layer 3 ----
        let w3 = slice(&self.params, self.layout.w3);
        {
            let (gw3_all, gb3_all) = {
                let (a, rest) = grad[self.layout.w3.0..self.layout.b3.1].split_at_mut(self.layout.w3.1 - self.layout.w3.0);
                (a, rest)
            };
            gw3_all.par_chunks_mut(h * K3).enumerate().for_each(|(oc, gw)| {
                let g = &gout.data()[oc * n..(oc + 1) * n];
                for ic in 0..h {
                    corr_weights(&mut gw[ic * K3..(ic + 1) * K3], g, &trace.h2[ic * n..(ic + 1) * n], dims);
                }
            });
            for (oc, gb) in gb3_all.iter_mut().enumerate() {
                *gb = pairwise_sum(&gout.data()[oc * n..(oc + 1) * n]);
            }
        }

        // upstream into h2, then ReLU mask
        let mut gh2 = vec![0.0; h * n];
        gh2.par_chunks_mut(n).enumerate().for_each(|(ic, plane)| {
            for oc in 0..c {
                add_conv_transpose_channel(plane, &gout.data()[oc * n..(oc + 1) * n], &w3[(oc * h + ic) * K3..][..K3], dims);
            }
            for (g, &a) in plane.iter_mut().zip(&trace.h2[ic * n..(ic + 1) * n]) {
                if a <= 0.0 {
                    *g = 0.0;
                }
            }
        });

        // ---- layer 2 ----
        let w2 = slice(&self.params, self.layout.w2);
        {
            let gw2_all = &mut grad[self.layout.w2.0..self.layout.w2.1];
            gw2_all.par_chunks_mut(h * K3).enumerate().for_each(|(oc, gw)| {
                let g = &gh2[oc * n..(oc + 1) * n];
                for ic in 0..h {
                    corr_weights(&mut gw[ic * K3..(ic + 1) * K3], g, &trace.h1[ic * n..(ic + 1) * n], dims);
                }
            });
        }
        for oc in 0..h {
            grad[self.layout.b2.0 + oc] = pairwise_sum(&gh2[oc * n..(oc + 1) * n]);
        }

        let mut gh1 = vec![0.0; h * n];
        gh1.par_chunks_mut(n).enumerate().for_each(|(ic, plane)| {
            for oc in 0..h {
                add_conv_transpose_channel(plane, &gh2[oc * n..(oc + 1) * n], &w2[(oc * h + ic) * K3..][..K3], dims);
            }
            for (g, &a) in plane.iter_mut().zip(&trace.h1[ic * n..(ic + 1) * n]) {
                if a <= 0.0 {
                    *g = 0.0;
                }
            }
        });

        // ---- layer 1 ----
        // 27 validity-box sums of the upstream gradient per output channel;
        // they carry the constant-channel weight grads, the bias grad
        // (center tap box = whole grid), and the embedding grads.
        let mut boxsums = vec![0.0; h * K3];
        boxsums.par_chunks_mut(K3).enumerate().for_each(|(oc, bs)| {
            tap_box_sums(bs, &gh1[oc * n..(oc + 1) * n], dims);
        });
        {
            let gw1_all = &mut grad[self.layout.w1.0..self.layout.w1.1];
            gw1_all.par_chunks_mut(in1 * K3).enumerate().for_each(|(oc, gw)| {
                let g = &gh1[oc * n..(oc + 1) * n];
                for ic in 0..s_in {
                    corr_weights(&mut gw[ic * K3..(ic + 1) * K3], g, &trace.input[ic * n..(ic + 1) * n], dims);
                }
                let bs = &boxsums[oc * K3..(oc + 1) * K3];
                for cc in 0..k_in {
                    let v = trace.const_vals[cc];
                    for k in 0..K3 {
                        gw[(s_in + cc) * K3 + k] = v * bs[k];
                    }
                }
            });
        }
        for oc in 0..h {
            grad[self.layout.b1.0 + oc] = boxsums[oc * K3 + K3_CENTER];
        }

        // modality embedding: only the active row receives gradient
        let w1 = slice(&self.params, self.layout.w1);
        let e = self.cfg.modality_embed;
        let tau_feats = 2 * self.cfg.tau_frequencies;
        for ej in 0..e {
            let mut acc = 0.0;
            for oc in 0..h {
                let w_row = &w1[(oc * in1 + s_in + tau_feats + ej) * K3..][..K3];
                let bs = &boxsums[oc * K3..(oc + 1) * K3];
                for k in 0..K3 {
                    acc += w_row[k] * bs[k];
                }
            }
            grad[self.layout.emb.0 + trace.modality * e + ej] = acc;
        }

        Ok(grad)
    }
}

/// Flow-matching loss and its exact parameter gradient over a batch:
/// `mean over samples and voxels of ‖v_ψ(z_τ, τ, c) − (z1 − z0)‖²`.
///
/// Samples are processed in parallel; the per-sample contributions are
/// reduced in batch order, so the result is thread-count independent.
pub fn fm_loss(model: &VelocityModel, batch: &[FlowSample]) -> Result<(f64, Vec<f64>), FlowError> {
    if batch.is_empty() {
        return Err(FlowError::EmptyBatch);
    }
    for s in batch {
        s.validate()?;
    }
    let b = batch.len() as f64;
    let per_sample: Vec<(f64, Vec<f64>)> = batch
        .par_iter()
        .map(|s| {
            let z_tau = interpolate(&s.z0, &s.z1, s.tau)?;
            let (v, trace) = model.forward_traced(&z_tau, s.tau, &s.cond)?;
            let target = target_velocity(&s.z0, &s.z1)?;
            let m = v.data().len() as f64;
            let resid: Vec<f64> = v.data().iter().zip(target.data()).map(|(&p, &t)| p - t).collect();
            let sq: Vec<f64> = resid.iter().map(|r| r * r).collect();
            let loss = pairwise_sum(&sq) / (m * b);
            let scale = 2.0 / (m * b);
            let gout = FieldStack::from_vec(*v.spec(), v.channels(), resid.iter().map(|r| scale * r).collect())?;
            let grad = model.backward(&trace, &gout)?;
            Ok((loss, grad))
        })
        .collect::<Result<_, FlowError>>()?;

    let mut loss = 0.0;
    let mut grad = vec![0.0; model.n_params()];
    for (l, g) in &per_sample {
        loss += l;
        for (acc, &gi) in grad.iter_mut().zip(g) {
            *acc += gi;
        }
    }
    Ok((loss, grad))
}

/// Per-axis tap validity pattern of a coordinate: bit 0 = a `−1` neighbor
/// exists, bit 1 = a `+1` neighbor exists.
fn axis_pattern(coord: usize, len: usize) -> usize {
    (coord > 0) as usize | (((coord + 1 < len) as usize) << 1)
}

/// Pattern codes along each axis, combined per voxel as
/// `(pz * 4 + py) * 4 + px` ∈ 0..64.
fn axis_patterns(dims: [usize; 3]) -> [Vec<usize>; 3] {
    let mk = |len: usize| (0..len).map(|i| axis_pattern(i, len)).collect::<Vec<_>>();
    [mk(dims[0]), mk(dims[1]), mk(dims[2])]
}

/// Tap index decomposition: `k = (kz * 3 + ky) * 3 + kx`, offsets `k· − 1`.
#[inline]
fn tap_offsets(k: usize) -> (isize, isize, isize) {
    ((k / 9) as isize - 1, ((k / 3) % 3) as isize - 1, (k % 3) as isize - 1)
}

/// Whether tap `k` is inside the grid for a voxel with the given 0..64
/// boundary pattern.
fn tap_valid_for_pattern(k: usize, pattern: usize) -> bool {
    let (dz, dy, dx) = tap_offsets(k);
    let ok = |d: isize, p: usize| match d {
        -1 => p & 1 != 0,
        1 => p & 2 != 0,
        _ => true,
    };
    ok(dx, pattern & 3) && ok(dy, (pattern >> 2) & 3) && ok(dz, (pattern >> 4) & 3)
}

/// Layer-1 lookup table: for each output channel and boundary pattern, the
/// bias plus the total contribution of all constant input channels.
fn build_const_table(w1: &[f64], b1: &[f64], const_vals: &[f64], s_in: usize, k_in: usize, h: usize) -> Vec<f64> {
    let in1 = s_in + k_in;
    let mut table = vec![0.0; h * 64];
    for oc in 0..h {
        // per-tap weighted sum over constant channels
        let mut tap_total = [0.0f64; K3];
        for cc in 0..k_in {
            let w = &w1[(oc * in1 + s_in + cc) * K3..][..K3];
            let v = const_vals[cc];
            for k in 0..K3 {
                tap_total[k] += v * w[k];
            }
        }
        for pattern in 0..64 {
            let mut acc = b1[oc];
            for (k, &t) in tap_total.iter().enumerate() {
                if tap_valid_for_pattern(k, pattern) {
                    acc += t;
                }
            }
            table[oc * 64 + pattern] = acc;
        }
    }
    table
}

/// Initialize a plane from the 64-entry pattern table.
fn fill_from_patterns(plane: &mut [f64], table: &[f64], patterns: &[Vec<usize>; 3], dims: [usize; 3]) {
    let [nx, ny, _] = dims;
    let (px, py, pz) = (&patterns[0], &patterns[1], &patterns[2]);
    for (z, &pz_z) in pz.iter().enumerate() {
        for (y, &py_y) in py.iter().enumerate() {
            let base = (pz_z * 4 + py_y) * 4;
            let row = (z * ny + y) * nx;
            for (cell, &px_x) in plane[row..row + nx].iter_mut().zip(px) {
                *cell = table[base + px_x];
            }
        }
    }
}

/// Per-axis loop bounds for tap offset `d`: output coordinates whose input
/// tap stays inside the axis.
#[inline]
fn tap_range(d: isize, len: usize) -> (usize, usize) {
    ((-d).max(0) as usize, (len as isize - d.max(0)) as usize)
}

/// `out += conv3x3x3(inp, w)` with zero padding, single channel pair.
fn add_conv_channel(out: &mut [f64], inp: &[f64], w: &[f64], dims: [usize; 3]) {
    let [nx, ny, _nz] = dims;
    for (k, &wk) in w.iter().enumerate().take(K3) {
        if wk == 0.0 {
            continue;
        }
        let (dz, dy, dx) = tap_offsets(k);
        let (z0, z1) = tap_range(dz, dims[2]);
        let (y0, y1) = tap_range(dy, dims[1]);
        let (x0, x1) = tap_range(dx, dims[0]);
        for z in z0..z1 {
            let iz = (z as isize + dz) as usize;
            for y in y0..y1 {
                let iy = (y as isize + dy) as usize;
                let orow = (z * ny + y) * nx;
                let irow = ((iz * ny + iy) * nx) as isize + dx;
                let src = &inp[(irow + x0 as isize) as usize..(irow + x1 as isize) as usize];
                let dst = &mut out[orow + x0..orow + x1];
                for (o, &i) in dst.iter_mut().zip(src) {
                    *o += wk * i;
                }
            }
        }
    }
}

/// `gin += conv_transpose(gout, w)`: the adjoint of [`add_conv_channel`],
/// i.e. convolution with the tap-reversed kernel.
fn add_conv_transpose_channel(gin: &mut [f64], gout: &[f64], w: &[f64], dims: [usize; 3]) {
    let mut flipped = [0.0; K3];
    for k in 0..K3 {
        flipped[k] = w[K3 - 1 - k];
    }
    add_conv_channel(gin, gout, &flipped, dims);
}

/// `gw[k] = Σ_voxels gout(p) · inp(p + offset(k))` for all 27 taps.
fn corr_weights(gw: &mut [f64], gout: &[f64], inp: &[f64], dims: [usize; 3]) {
    let [nx, ny, _nz] = dims;
    for (k, gwk) in gw.iter_mut().enumerate().take(K3) {
        let (dz, dy, dx) = tap_offsets(k);
        let (z0, z1) = tap_range(dz, dims[2]);
        let (y0, y1) = tap_range(dy, dims[1]);
        let (x0, x1) = tap_range(dx, dims[0]);
        let mut acc = 0.0;
        for z in z0..z1 {
            let iz = (z as isize + dz) as usize;
            for y in y0..y1 {
                let iy = (y as isize + dy) as usize;
                let orow = (z * ny + y) * nx;
                let irow = ((iz * ny + iy) * nx) as isize + dx;
                let a = &gout[orow + x0..orow + x1];
                let b = &inp[(irow + x0 as isize) as usize..(irow + x1 as isize) as usize];
                for (&g, &i) in a.iter().zip(b) {
                    acc += g * i;
                }
            }
        }
        *gwk = acc;
    }
}

/// `bs[k] = Σ gout over the voxels whose tap `k` is inside the grid`.
fn tap_box_sums(bs: &mut [f64], gout: &[f64], dims: [usize; 3]) {
    let [nx, ny, _nz] = dims;
    for (k, bk) in bs.iter_mut().enumerate().take(K3) {
        let (dz, dy, dx) = tap_offsets(k);
        let (z0, z1) = tap_range(dz, dims[2]);
        let (y0, y1) = tap_range(dy, dims[1]);
        let (x0, x1) = tap_range(dx, dims[0]);
        let mut acc = 0.0;
        for z in z0..z1 {
            for y in y0..y1 {
                let row = (z * ny + y) * nx;
                for &g in &gout[row + x0..row + x1] {
                    acc += g;
                }
            }
        }
        *bk = acc;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conditioning::{assemble, Modality};
    use crate::flowmatch::noise::sample_noise;
    use crate::grid::{GridSpec, ScalarField3D, Tissue, TissueMap};
    use crate::flowmatch::{integrate_forward, Integrator};

    fn tiny_cfg() -> ModelConfig {
        ModelConfig { data_channels: 1, hidden: 4, tau_frequencies: 2, modality_embed: 2, init_seed: 11 }
    }

    fn cond_on(spec: GridSpec, modality: Modality) -> ConditioningTensor {
        let mut tissue = TissueMap::new(spec, Tissue::White).unwrap();
        tissue.set(0, 0, 0, Tissue::Csf);
        tissue.set(1, 0, 0, Tissue::Gray);
        tissue.set(0, 1, 0, Tissue::Background);
        let mut conc = ScalarField3D::new(spec, 0.0).unwrap();
        let center = spec.nx / 2;
        conc.set(center, center, center, 0.8);
        assemble(&tissue, &conc, modality).unwrap()
    }

    #[test]
    fn untrained_model_is_the_zero_field() {
        let spec = GridSpec::isotropic(5, 1.0).unwrap();
        let model = VelocityModel::new(tiny_cfg()).unwrap();
        let z = sample_noise(spec, 1, 3, 0).unwrap();
        let v = model.forward(&z, 0.3, &cond_on(spec, Modality::T1c)).unwrap();
        assert!(v.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn constant_model_integrates_exactly() {
        let spec = GridSpec::isotropic(5, 1.0).unwrap();
        let mut model = VelocityModel::new(tiny_cfg()).unwrap();
        let b3_at = model.layout.b3.0;
        model.params_mut()[b3_at] = 0.7;
        let cond = cond_on(spec, Modality::T1);
        let z = sample_noise(spec, 1, 4, 0).unwrap();
        let out = integrate_forward(&model, &z, 0.0, 1.0, 13, &cond, Integrator::Euler).unwrap();
        for (o, i) in out.data().iter().zip(z.data()) {
            approx::assert_abs_diff_eq!(*o, i + 0.7, epsilon = 1e-12);
        }
    }

    #[test]
    fn init_and_forward_are_deterministic() {
        let spec = GridSpec::isotropic(6, 1.0).unwrap();
        let a = VelocityModel::new(tiny_cfg()).unwrap();
        let b = VelocityModel::new(tiny_cfg()).unwrap();
        assert_eq!(a.params(), b.params());
        let z = sample_noise(spec, 1, 5, 0).unwrap();
        let cond = cond_on(spec, Modality::Flair);
        let mut m = a.clone();
        // make the output nonzero
        let w3 = m.layout.w3;
        let seeded = VelocityModel::new(ModelConfig { init_seed: 77, ..tiny_cfg() }).unwrap();
        m.params_mut()[w3.0..w3.1]
            .copy_from_slice(&seeded.params()[seeded.layout.w2.0..seeded.layout.w2.0 + (w3.1 - w3.0)]);
        let v1 = m.forward(&z, 0.42, &cond).unwrap();
        let v2 = m.forward(&z, 0.42, &cond).unwrap();
        assert_eq!(v1, v2);
        assert!(v1.data().iter().any(|&x| x != 0.0));
    }

    #[test]
    fn forward_rejects_mismatched_inputs() {
        let spec = GridSpec::isotropic(5, 1.0).unwrap();
        let model = VelocityModel::new(tiny_cfg()).unwrap();
        let cond = cond_on(spec, Modality::T2);
        let wrong_channels = sample_noise(spec, 2, 6, 0).unwrap();
        assert!(matches!(model.forward(&wrong_channels, 0.5, &cond), Err(FlowError::ShapeMismatch(_))));
        let z = sample_noise(spec, 1, 6, 0).unwrap();
        assert!(matches!(model.forward(&z, 1.5, &cond), Err(FlowError::TauOutOfRange(_))));
        let other = cond_on(GridSpec::isotropic(4, 1.0).unwrap(), Modality::T2);
        assert!(matches!(model.forward(&z, 0.5, &other), Err(FlowError::ShapeMismatch(_))));
    }

    #[test]
    fn loss_is_zero_when_model_already_matches_target() {
        // zero model + z1 == z0 → target velocity 0 → zero loss, zero grad
        let spec = GridSpec::isotropic(5, 1.0).unwrap();
        let model = VelocityModel::new(tiny_cfg()).unwrap();
        let z = sample_noise(spec, 1, 9, 0).unwrap();
        let batch = [FlowSample { z0: z.clone(), z1: z.clone(), tau: 0.37, cond: cond_on(spec, Modality::T1c) }];
        let (loss, grad) = fm_loss(&model, &batch).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn empty_batch_is_rejected() {
        let model = VelocityModel::new(tiny_cfg()).unwrap();
        assert!(matches!(fm_loss(&model, &[]), Err(FlowError::EmptyBatch)));
    }

    /// Central finite differences against the hand-written gradient on a
    /// small instance, sampling coordinates across every parameter block.
    #[test]
    fn gradient_matches_finite_differences() {
        let spec = GridSpec::isotropic(5, 1.0).unwrap();
        let mut model = VelocityModel::new(tiny_cfg()).unwrap();
        // give the zero-initialized final layer structure so its inputs matter
        let donor = VelocityModel::new(ModelConfig { init_seed: 123, ..tiny_cfg() }).unwrap();
        let w3 = model.layout.w3;
        let n3 = w3.1 - w3.0;
        model.params_mut()[w3.0..w3.1].copy_from_slice(&donor.params()[donor.layout.w2.0..donor.layout.w2.0 + n3]);

        let z0 = sample_noise(spec, 1, 21, 0).unwrap();
        let mut z1 = FieldStack::zeros(spec, 1).unwrap();
        for (i, v) in z1.data_mut().iter_mut().enumerate() {
            *v = ((i % 7) as f64) / 7.0;
        }
        let batch = [
            FlowSample { z0: z0.clone(), z1: z1.clone(), tau: 0.3, cond: cond_on(spec, Modality::T1c) },
            FlowSample { z0: z1.clone(), z1: z0.clone(), tau: 0.7, cond: cond_on(spec, Modality::Flair) },
        ];
        let (_, grad) = fm_loss(&model, &batch).unwrap();

        let p = model.n_params();
        let stride = (p / 128).max(1);
        let mut coords: Vec<usize> = (0..p).step_by(stride).collect();
        // biases and embedding rows are tiny blocks a stride can miss
        for r in [model.layout.b1, model.layout.b2, model.layout.b3, model.layout.emb] {
            coords.extend(r.0..r.1);
        }
        coords.sort_unstable();
        coords.dedup();

        let fd_at = |model: &mut VelocityModel, j: usize, eps: f64| {
            let orig = model.params()[j];
            model.params_mut()[j] = orig + eps;
            let (lp, _) = fm_loss(model, &batch).unwrap();
            model.params_mut()[j] = orig - eps;
            let (lm, _) = fm_loss(model, &batch).unwrap();
            model.params_mut()[j] = orig;
            (lp - lm) / (2.0 * eps)
        };
        let rel_err = |g: f64, fd: f64| (g - fd).abs() / g.abs().max(fd.abs()).max(1e-6);

        let mut worst = 0.0f64;
        let mut kinks = 0;
        for &j in &coords {
            let mut rel = rel_err(grad[j], fd_at(&mut model, j, 1e-4));
            if rel > 1e-5 {
                // a ReLU kink inside the ±ε interval poisons the secant; a
                // genuine gradient bug survives shrinking ε, a kink does not
                rel = rel_err(grad[j], fd_at(&mut model, j, 1e-6));
                assert!(rel <= 1e-5, "coordinate {j} disagrees at shrinking ε: rel {rel}");
                kinks += 1;
            }
            worst = worst.max(rel);
        }
        assert!(coords.len() >= 100, "only {} coordinates checked", coords.len());
        assert!(kinks <= 2, "{kinks} coordinates needed ε refinement");
        assert!(worst <= 1e-5, "worst relative gradient error {worst}");
    }

    #[test]
    fn embedding_gradient_hits_only_the_active_modality() {
        let spec = GridSpec::isotropic(5, 1.0).unwrap();
        let mut model = VelocityModel::new(tiny_cfg()).unwrap();
        let donor = VelocityModel::new(ModelConfig { init_seed: 5, ..tiny_cfg() }).unwrap();
        let w3 = model.layout.w3;
        let n3 = w3.1 - w3.0;
        model.params_mut()[w3.0..w3.1].copy_from_slice(&donor.params()[donor.layout.w2.0..donor.layout.w2.0 + n3]);

        let z0 = sample_noise(spec, 1, 31, 0).unwrap();
        let z1 = sample_noise(spec, 1, 32, 0).unwrap();
        let batch = [FlowSample { z0, z1, tau: 0.5, cond: cond_on(spec, Modality::T2) }];
        let (_, grad) = fm_loss(&model, &batch).unwrap();
        let e = model.cfg.modality_embed;
        let emb0 = model.layout.emb.0;
        for m in Modality::ALL {
            let row = &grad[emb0 + m.code() * e..emb0 + (m.code() + 1) * e];
            if m == Modality::T2 {
                assert!(row.iter().any(|&g| g != 0.0), "active row should have gradient");
            } else {
                assert!(row.iter().all(|&g| g == 0.0), "inactive row {m} leaked gradient");
            }
        }
    }
}

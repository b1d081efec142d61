//! Fisher-Kolmogorov tumor growth on a tissue segmentation.
//!
//! The model evolves a normalized cell concentration `c(x, t) ∈ [0, 1]`:
//! logistic proliferation at rate `rho` (per day) plus anisotropic-in-tissue
//! diffusion with coefficient `D(x)` (mm²/day) that is largest in white
//! matter, reduced in gray matter, and zero in CSF and background. Face
//! diffusivities use the harmonic mean, which makes tissue borders with
//! `D = 0` behave as zero-flux walls.
//!
//! Time stepping splits the operator: an explicit Euler diffusion update
//! followed by the exact logistic flow map
//! `c ← c·E / (1 + c·(E − 1))` with `E = exp(rho·dt)`. The reaction
//! half is therefore exact for any `dt`; only diffusion constrains the step
//! size. With the stability bound enforced by [`SimClock`] the diffusion
//! update is a convex combination of neighbor values, so the scheme keeps
//! `c` in `[0, 1]` without relying on the final defensive clamp.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{GridError, GridSpec, LabelMask, ScalarField3D, Tissue, TissueMap};

#[derive(Debug, Error)]
pub enum GrowthError {
    #[error("invalid growth parameters: {0}")]
    InvalidParams(String),
    #[error("seed center {center:?} mm is not inside parenchyma (gray or white matter)")]
    SeedOutsideBrain { center: [f64; 3] },
    #[error("unstable timestep: dt={dt} exceeds stability bound {max_dt}")]
    UnstableTimestep { dt: f64, max_dt: f64 },
    #[error("field shapes do not match: {0}")]
    ShapeMismatch(String),
    #[error("invalid simulation clock: {0}")]
    InvalidClock(String),
    #[error("target mask is empty")]
    EmptyTarget,
    #[error("parameter search space is empty or contains no viable candidate")]
    EmptySearch,
    #[error(transparent)]
    Grid(#[from] GridError),
}

/// Biological and seeding parameters of one growth simulation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GrowthParams {
    /// Proliferation rate, 1/day.
    pub rho: f64,
    /// White-matter diffusivity, mm²/day.
    pub d_white: f64,
    /// Gray-matter diffusivity as a fraction of `d_white`.
    pub gray_ratio: f64,
    /// Seed center in mm.
    pub seed_center: [f64; 3],
    /// Gaussian seed radius, mm.
    pub seed_sigma: f64,
    /// Peak seed concentration, in `(0, 1]`.
    pub seed_amplitude: f64,
}

impl Default for GrowthParams {
    fn default() -> Self {
        GrowthParams {
            rho: 0.03,
            d_white: 0.28,
            gray_ratio: 0.1,
            seed_center: [0.0, 0.0, 0.0],
            seed_sigma: 1.5,
            seed_amplitude: 1.0,
        }
    }
}

impl GrowthParams {
    pub fn validate(&self) -> Result<(), GrowthError> {
        let bad = |msg: String| Err(GrowthError::InvalidParams(msg));
        if !self.rho.is_finite() || self.rho < 0.0 {
            return bad(format!("rho must be finite and >= 0, got {}", self.rho));
        }
        if !self.d_white.is_finite() || self.d_white <= 0.0 {
            return bad(format!("d_white must be finite and > 0, got {}", self.d_white));
        }
        if !self.gray_ratio.is_finite() || !(0.0..=1.0).contains(&self.gray_ratio) {
            return bad(format!("gray_ratio must lie in [0, 1], got {}", self.gray_ratio));
        }
        if !self.seed_sigma.is_finite() || self.seed_sigma <= 0.0 {
            return bad(format!("seed_sigma must be finite and > 0, got {}", self.seed_sigma));
        }
        if !self.seed_amplitude.is_finite() || !(self.seed_amplitude > 0.0 && self.seed_amplitude <= 1.0) {
            return bad(format!("seed_amplitude must lie in (0, 1], got {}", self.seed_amplitude));
        }
        if self.seed_center.iter().any(|v| !v.is_finite()) {
            return bad(format!("seed_center must be finite, got {:?}", self.seed_center));
        }
        Ok(())
    }
}

/// Time discretization and snapshot cadence for [`simulate`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimClock {
    /// Requested solver step, days. Intervals between snapshots are split
    /// into equal substeps no longer than this.
    pub dt: f64,
    /// Final simulated time, days.
    pub t_end: f64,
    /// Snapshot cadence, days.
    pub snapshot_every: f64,
}

impl SimClock {
    pub fn validate(&self) -> Result<(), GrowthError> {
        if !self.dt.is_finite() || self.dt <= 0.0 {
            return Err(GrowthError::InvalidClock(format!("dt must be finite and > 0, got {}", self.dt)));
        }
        if !self.t_end.is_finite() || self.t_end < 0.0 {
            return Err(GrowthError::InvalidClock(format!("t_end must be finite and >= 0, got {}", self.t_end)));
        }
        if !self.snapshot_every.is_finite() || self.snapshot_every <= 0.0 {
            return Err(GrowthError::InvalidClock(format!(
                "snapshot_every must be finite and > 0, got {}",
                self.snapshot_every
            )));
        }
        Ok(())
    }

    /// Largest diffusion-stable step for a grid and peak diffusivity, with a
    /// 0.9 safety factor: `0.9 · min(dx,dy,dz)² / (6 · d_max)`.
    pub fn max_stable_dt(spec: &GridSpec, d_max: f64) -> f64 {
        if d_max <= 0.0 {
            return f64::INFINITY;
        }
        let h = spec.min_spacing();
        0.9 * h * h / (6.0 * d_max)
    }

    /// Snapshot times: multiples of `snapshot_every` starting at 0, with
    /// `t_end` always included as the final entry.
    pub fn snapshot_times(&self) -> Vec<f64> {
        let mut times = vec![0.0];
        let mut k = 1usize;
        loop {
            let t = k as f64 * self.snapshot_every;
            if t >= self.t_end * (1.0 - 1e-12) {
                break;
            }
            times.push(t);
            k += 1;
        }
        if self.t_end > 0.0 {
            times.push(self.t_end);
        }
        times
    }
}

/// Per-voxel diffusivity from a segmentation: `d_white` in white matter,
/// `d_white · gray_ratio` in gray matter, zero in CSF and background.
pub fn diffusion_map(tissue: &TissueMap, params: &GrowthParams) -> Result<ScalarField3D, GrowthError> {
    params.validate()?;
    let d_gray = params.d_white * params.gray_ratio;
    let data = tissue
        .labels()
        .iter()
        .map(|t| match t {
            Tissue::White => params.d_white,
            Tissue::Gray => d_gray,
            Tissue::Csf | Tissue::Background => 0.0,
        })
        .collect();
    Ok(ScalarField3D::from_vec(*tissue.spec(), data)?)
}

/// Gaussian initial condition
/// `c₀(x) = amplitude · exp(−‖x − center‖² / (2σ²))`,
/// zeroed outside parenchyma. Fails if the voxel containing the center is
/// not gray or white matter.
pub fn seed_initial(tissue: &TissueMap, params: &GrowthParams) -> Result<ScalarField3D, GrowthError> {
    params.validate()?;
    let spec = *tissue.spec();
    let [cx, cy, cz] = params.seed_center;
    let vx = (cx / spec.dx).round();
    let vy = (cy / spec.dy).round();
    let vz = (cz / spec.dz).round();
    let center_ok = vx >= 0.0
        && vy >= 0.0
        && vz >= 0.0
        && (vx as usize) < spec.nx
        && (vy as usize) < spec.ny
        && (vz as usize) < spec.nz
        && tissue.get(vx as usize, vy as usize, vz as usize).is_parenchyma();
    if !center_ok {
        return Err(GrowthError::SeedOutsideBrain { center: params.seed_center });
    }

    let inv_two_sigma2 = 1.0 / (2.0 * params.seed_sigma * params.seed_sigma);
    let mut field = ScalarField3D::new(spec, 0.0)?;
    let data = field.data_mut();
    for (i, &t) in tissue.labels().iter().enumerate() {
        if !t.is_parenchyma() {
            continue;
        }
        let (x, y, z) = spec.coords(i);
        let p = spec.position(x, y, z);
        let r2 = (p[0] - cx).powi(2) + (p[1] - cy).powi(2) + (p[2] - cz).powi(2);
        data[i] = (params.seed_amplitude * (-r2 * inv_two_sigma2).exp()).min(1.0);
    }
    Ok(field)
}

/// Reusable single-step integrator. Construction validates the timestep
/// against the diffusion stability bound and precomputes the logistic
/// growth factor; [`FkStepper::step_into`] is then allocation-free.
pub struct FkStepper<'a> {
    dmap: &'a ScalarField3D,
    tissue: &'a TissueMap,
    dt: f64,
    /// `exp(rho · dt)`.
    growth: f64,
    inv_dx2: f64,
    inv_dy2: f64,
    inv_dz2: f64,
}

impl<'a> FkStepper<'a> {
    pub fn new(dmap: &'a ScalarField3D, tissue: &'a TissueMap, rho: f64, dt: f64) -> Result<Self, GrowthError> {
        if dmap.spec() != tissue.spec() {
            return Err(GrowthError::ShapeMismatch("diffusion map vs tissue map".into()));
        }
        if !dt.is_finite() || dt <= 0.0 {
            return Err(GrowthError::InvalidClock(format!("dt must be finite and > 0, got {dt}")));
        }
        if !rho.is_finite() || rho < 0.0 {
            return Err(GrowthError::InvalidParams(format!("rho must be finite and >= 0, got {rho}")));
        }
        let max_dt = SimClock::max_stable_dt(dmap.spec(), dmap.max_abs());
        if dt > max_dt * (1.0 + 1e-9) {
            return Err(GrowthError::UnstableTimestep { dt, max_dt });
        }
        let spec = dmap.spec();
        Ok(FkStepper {
            dmap,
            tissue,
            dt,
            growth: (rho * dt).exp(),
            inv_dx2: 1.0 / (spec.dx * spec.dx),
            inv_dy2: 1.0 / (spec.dy * spec.dy),
            inv_dz2: 1.0 / (spec.dz * spec.dz),
        })
    }

    pub fn step(&self, c: &ScalarField3D) -> Result<ScalarField3D, GrowthError> {
        let mut out = ScalarField3D::new(*c.spec(), 0.0)?;
        self.step_into(c, &mut out)?;
        Ok(out)
    }

    /// Advance `c` by one step into `out`.
    ///
    /// Parallelized over z-slabs; every output voxel is a fixed-order
    /// expression of input voxels only, so results are bitwise identical
    /// for any thread count.
    pub fn step_into(&self, c: &ScalarField3D, out: &mut ScalarField3D) -> Result<(), GrowthError> {
        if c.spec() != self.dmap.spec() {
            return Err(GrowthError::ShapeMismatch("concentration vs diffusion map".into()));
        }
        let spec = *c.spec();
        let (nx, ny, nz) = (spec.nx, spec.ny, spec.nz);
        let cd = c.data();
        let dd = self.dmap.data();
        let labels = self.tissue.labels();
        let (dt, e) = (self.dt, self.growth);
        let (ix2, iy2, iz2) = (self.inv_dx2, self.inv_dy2, self.inv_dz2);

        #[inline(always)]
        fn face(a: f64, b: f64) -> f64 {
            if a > 0.0 && b > 0.0 {
                2.0 * a * b / (a + b)
            } else {
                0.0
            }
        }

        out.data_mut().par_chunks_mut(ny * nx).enumerate().for_each(|(z, slab)| {
            for y in 0..ny {
                let row = (z * ny + y) * nx;
                for x in 0..nx {
                    let i = row + x;
                    if !labels[i].is_parenchyma() {
                        slab[y * nx + x] = 0.0;
                        continue;
                    }
                    let ci = cd[i];
                    let di = dd[i];
                    let mut acc = 0.0;
                    if x > 0 {
                        acc += face(di, dd[i - 1]) * (cd[i - 1] - ci) * ix2;
                    }
                    if x + 1 < nx {
                        acc += face(di, dd[i + 1]) * (cd[i + 1] - ci) * ix2;
                    }
                    if y > 0 {
                        acc += face(di, dd[i - nx]) * (cd[i - nx] - ci) * iy2;
                    }
                    if y + 1 < ny {
                        acc += face(di, dd[i + nx]) * (cd[i + nx] - ci) * iy2;
                    }
                    if z > 0 {
                        acc += face(di, dd[i - nx * ny]) * (cd[i - nx * ny] - ci) * iz2;
                    }
                    if z + 1 < nz {
                        acc += face(di, dd[i + nx * ny]) * (cd[i + nx * ny] - ci) * iz2;
                    }
                    let diffused = ci + dt * acc;
                    let grown = diffused * e / (1.0 + diffused * (e - 1.0));
                    slab[y * nx + x] = grown.clamp(0.0, 1.0);
                }
            }
        });
        Ok(())
    }
}

/// One step of the scheme as a standalone call: diffusion update followed by
/// the exact logistic map. For a spatially uniform state (no gradients) this
/// reduces to pure logistic growth, e.g. `dt = 1`, `rho = 0.03`, `c = 0.1`
/// advances to `0.1027` (4 decimals).
pub fn fk_step(
    c: &ScalarField3D,
    dmap: &ScalarField3D,
    tissue: &TissueMap,
    rho: f64,
    dt: f64,
) -> Result<ScalarField3D, GrowthError> {
    FkStepper::new(dmap, tissue, rho, dt)?.step(c)
}

/// Run a full simulation, returning `(time_days, concentration)` snapshots.
/// The first snapshot is always the seed at `t = 0`; the last lands exactly
/// on `t_end`. Each snapshot interval is split into equal substeps of
/// length at most `clock.dt`.
pub fn simulate(
    tissue: &TissueMap,
    params: &GrowthParams,
    clock: &SimClock,
) -> Result<Vec<(f64, ScalarField3D)>, GrowthError> {
    params.validate()?;
    clock.validate()?;
    let dmap = diffusion_map(tissue, params)?;
    let max_dt = SimClock::max_stable_dt(tissue.spec(), dmap.max_abs());
    if clock.dt > max_dt * (1.0 + 1e-9) {
        return Err(GrowthError::UnstableTimestep { dt: clock.dt, max_dt });
    }

    let mut state = seed_initial(tissue, params)?;
    let mut scratch = ScalarField3D::new(*tissue.spec(), 0.0)?;
    let times = clock.snapshot_times();
    let mut out = Vec::with_capacity(times.len());
    out.push((0.0, state.clone()));

    let mut t_prev = 0.0;
    for &t in &times[1..] {
        let span = t - t_prev;
        let n = (span / clock.dt).ceil().max(1.0) as usize;
        let h = span / n as f64;
        let stepper = FkStepper::new(&dmap, tissue, params.rho, h)?;
        for _ in 0..n {
            stepper.step_into(&state, &mut scratch)?;
            std::mem::swap(&mut state, &mut scratch);
        }
        out.push((t, state.clone()));
        t_prev = t;
    }
    Ok(out)
}

/// Simulate and return concentrations at the given times (days, ascending,
/// starting at 0). Convenience wrapper used by trajectory synthesis.
pub fn simulate_at_times(
    tissue: &TissueMap,
    params: &GrowthParams,
    dt: f64,
    times: &[f64],
) -> Result<Vec<ScalarField3D>, GrowthError> {
    if times.is_empty() {
        return Err(GrowthError::InvalidClock("need at least one time point".into()));
    }
    if times[0] != 0.0 {
        return Err(GrowthError::InvalidClock(format!("time points must start at 0, got {}", times[0])));
    }
    if times.windows(2).any(|w| w[1] <= w[0]) {
        return Err(GrowthError::InvalidClock("time points must be strictly increasing".into()));
    }
    params.validate()?;
    let dmap = diffusion_map(tissue, params)?;
    let max_dt = SimClock::max_stable_dt(tissue.spec(), dmap.max_abs());
    if dt > max_dt * (1.0 + 1e-9) {
        return Err(GrowthError::UnstableTimestep { dt, max_dt });
    }

    let mut state = seed_initial(tissue, params)?;
    let mut scratch = ScalarField3D::new(*tissue.spec(), 0.0)?;
    let mut out = Vec::with_capacity(times.len());
    out.push(state.clone());
    for w in times.windows(2) {
        let span = w[1] - w[0];
        let n = (span / dt).ceil().max(1.0) as usize;
        let h = span / n as f64;
        let stepper = FkStepper::new(&dmap, tissue, params.rho, h)?;
        for _ in 0..n {
            stepper.step_into(&state, &mut scratch)?;
            std::mem::swap(&mut state, &mut scratch);
        }
        out.push(state.clone());
    }
    Ok(out)
}

/// Concentration thresholds separating imaging-visible tumor regions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdPolicy {
    /// Lower edge of edema; also the whole-tumor threshold.
    pub edema: f64,
    /// Lower edge of the enhancing core.
    pub enhancing: f64,
}

impl Default for ThresholdPolicy {
    fn default() -> Self {
        ThresholdPolicy { edema: 0.2, enhancing: 0.6 }
    }
}

/// Imaging-visible region of one voxel under a [`ThresholdPolicy`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TumorRegion {
    Background,
    Edema,
    Enhancing,
}

impl ThresholdPolicy {
    pub fn classify(&self, c: f64) -> TumorRegion {
        if c >= self.enhancing {
            TumorRegion::Enhancing
        } else if c >= self.edema {
            TumorRegion::Edema
        } else {
            TumorRegion::Background
        }
    }
}

/// Binary mask of voxels with concentration `>= threshold`.
pub fn concentration_to_mask(conc: &ScalarField3D, threshold: f64) -> LabelMask {
    let bits = conc.data().iter().map(|&c| c >= threshold).collect();
    LabelMask::from_bits(*conc.spec(), bits).expect("mask shape follows field shape")
}

/// Candidate axes for [`fit_growth_params`]: the cross product of the three
/// lists is scanned exhaustively, then coordinate descent refines the best
/// cell. Non-searched parameters are held fixed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSearch {
    pub rhos: Vec<f64>,
    pub d_whites: Vec<f64>,
    pub seed_centers: Vec<[f64; 3]>,
    #[serde(default = "FitSearch::default_gray_ratio")]
    pub gray_ratio: f64,
    #[serde(default = "FitSearch::default_seed_sigma")]
    pub seed_sigma: f64,
    #[serde(default = "FitSearch::default_seed_amplitude")]
    pub seed_amplitude: f64,
    /// Coordinate-descent rounds; the probe step halves each round starting
    /// from half the grid spacing of the corresponding axis.
    #[serde(default = "FitSearch::default_refine_rounds")]
    pub refine_rounds: usize,
}

impl FitSearch {
    pub fn new(rhos: Vec<f64>, d_whites: Vec<f64>, seed_centers: Vec<[f64; 3]>) -> FitSearch {
        FitSearch {
            rhos,
            d_whites,
            seed_centers,
            gray_ratio: Self::default_gray_ratio(),
            seed_sigma: Self::default_seed_sigma(),
            seed_amplitude: Self::default_seed_amplitude(),
            refine_rounds: Self::default_refine_rounds(),
        }
    }

    fn default_gray_ratio() -> f64 {
        0.1
    }

    fn default_seed_sigma() -> f64 {
        1.5
    }

    fn default_seed_amplitude() -> f64 {
        1.0
    }

    fn default_refine_rounds() -> usize {
        3
    }
}

/// Result of a parameter calibration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitOutcome {
    pub params: GrowthParams,
    /// Whole-tumor Dice of the best simulation against the target.
    pub dice: f64,
    /// Number of simulations run.
    pub evaluations: usize,
}

/// Smallest gap between adjacent sorted distinct values; used as the local
/// grid resolution when refining a search axis.
fn axis_step(values: &[f64]) -> f64 {
    let mut sorted: Vec<f64> = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("search values are finite"));
    sorted.dedup();
    let mut step = f64::INFINITY;
    for w in sorted.windows(2) {
        step = step.min(w[1] - w[0]);
    }
    if step.is_finite() {
        step
    } else {
        // single-valued axis: fall back to a fraction of the magnitude
        (sorted[0].abs() * 0.5).max(1e-6)
    }
}

/// Calibrate `(rho, d_white, seed_center)` against an observed whole-tumor
/// mask at time `clock.t_end`.
///
/// Phase 1 scans the full grid; ties on Dice are broken lexicographically by
/// `(rho, d_white, cx, cy, cz)`, preferring smaller values. Phase 2 runs
/// `refine_rounds` rounds of coordinate descent with the probe step halving
/// each round; a probe is accepted only on strict improvement, keeping the
/// result deterministic. Candidates whose simulation fails (seed off
/// parenchyma after a probe, for instance) are skipped.
pub fn fit_growth_params(
    target: &LabelMask,
    tissue: &TissueMap,
    search: &FitSearch,
    clock: &SimClock,
) -> Result<FitOutcome, GrowthError> {
    if target.spec() != tissue.spec() {
        return Err(GrowthError::ShapeMismatch("target mask vs tissue map".into()));
    }
    if target.count() == 0 {
        return Err(GrowthError::EmptyTarget);
    }
    if search.rhos.is_empty() || search.d_whites.is_empty() || search.seed_centers.is_empty() {
        return Err(GrowthError::EmptySearch);
    }
    clock.validate()?;
    let threshold = ThresholdPolicy::default().edema;

    let mut evaluations = 0usize;
    let mut score = |params: &GrowthParams| -> Option<f64> {
        evaluations += 1;
        let snaps = simulate(tissue, params, clock).ok()?;
        let (_, last) = snaps.last().expect("simulate returns at least the seed");
        let mask = concentration_to_mask(last, threshold);
        crate::metrics::dice(&mask, target).ok()
    };

    let key = |p: &GrowthParams| (p.rho, p.d_white, p.seed_center[0], p.seed_center[1], p.seed_center[2]);
    let mut best: Option<(f64, GrowthParams)> = None;
    for &rho in &search.rhos {
        for &d_white in &search.d_whites {
            for &center in &search.seed_centers {
                let params = GrowthParams {
                    rho,
                    d_white,
                    gray_ratio: search.gray_ratio,
                    seed_center: center,
                    seed_sigma: search.seed_sigma,
                    seed_amplitude: search.seed_amplitude,
                };
                let Some(dice) = score(&params) else { continue };
                let better = match &best {
                    None => true,
                    Some((best_dice, best_params)) => {
                        dice > *best_dice
                            || (dice == *best_dice
                                && key(&params).partial_cmp(&key(best_params))
                                    == Some(std::cmp::Ordering::Less))
                    }
                };
                if better {
                    best = Some((dice, params));
                }
            }
        }
    }
    let (mut best_dice, mut best_params) = best.ok_or(GrowthError::EmptySearch)?;

    let spec = tissue.spec();
    let base_steps = [
        axis_step(&search.rhos),
        axis_step(&search.d_whites),
        spec.dx,
        spec.dy,
        spec.dz,
    ];
    for round in 0..search.refine_rounds {
        let scale = 0.5 / (1 << round) as f64;
        for (coord, &step) in base_steps.iter().enumerate() {
            let h = step * scale;
            for dir in [1.0, -1.0] {
                let mut cand = best_params;
                match coord {
                    0 => cand.rho += dir * h,
                    1 => cand.d_white += dir * h,
                    2 => cand.seed_center[0] += dir * h,
                    3 => cand.seed_center[1] += dir * h,
                    _ => cand.seed_center[2] += dir * h,
                }
                if let Some(dice) = score(&cand) {
                    if dice > best_dice {
                        best_dice = dice;
                        best_params = cand;
                    }
                }
            }
        }
    }

    Ok(FitOutcome { params: best_params, dice: best_dice, evaluations })
}

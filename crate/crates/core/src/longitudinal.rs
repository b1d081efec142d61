//! Longitudinal generation by predecessor manipulation.
//!
//! The growth solver evolves the tumor concentration to each planned time
//! point. The first volume is generated by integrating the learned flow from
//! seeded noise (or taken from a supplied pre-op volume). Every follow-up is
//! produced from its predecessor: transport backward along the flow to a
//! corruption level τ̃ under the predecessor's conditioning, then integrate
//! forward to τ = 1 under the successor's conditioning. Low τ̃ keeps healthy
//! anatomy nearly frozen while the tumor region follows the updated
//! concentration; τ̃ = 1 degenerates to copying the predecessor bitwise.
//!
//! Stored volumes are the raw flow states (so the τ̃ = 1 identity and chain
//! reproducibility are exact); metrics and exported images use copies
//! clamped to [0, 1].

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conditioning::{assemble, ConditioningError, ConditioningTensor, Modality};
use crate::flowmatch::{
    integrate_forward, sample_noise, transport_backward, FieldStack, FlowError, Integrator, VelocityModel,
};
use crate::grid::{GridError, LabelMask, ScalarField3D, TissueMap};
use crate::growth::{concentration_to_mask, simulate_at_times, GrowthError, GrowthParams, SimClock, ThresholdPolicy};
use crate::metrics::{dice, psnr, MetricsError};
use crate::phantom::estimate_concentration;

#[derive(Debug, Error)]
pub enum LongitudinalError {
    #[error("invalid plan: {0}")]
    PlanInvalid(String),
    #[error("model does not match conditioning: {0}")]
    ModelConditioningMismatch(String),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Growth(#[from] GrowthError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Conditioning(#[from] ConditioningError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

fn default_tau_tilde() -> f64 {
    0.15
}

fn default_integrator_steps() -> usize {
    50
}

/// What to generate: time points in days, corruption level, ODE resolution,
/// and the modalities synthesized at every time point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LongitudinalPlan {
    /// Strictly ascending, first element 0.
    pub time_points: Vec<f64>,
    #[serde(default = "default_tau_tilde")]
    pub tau_tilde: f64,
    #[serde(default = "default_integrator_steps")]
    pub integrator_steps: usize,
    pub modalities: Vec<Modality>,
}

impl LongitudinalPlan {
    pub fn new(time_points: Vec<f64>, modalities: Vec<Modality>) -> LongitudinalPlan {
        LongitudinalPlan {
            time_points,
            tau_tilde: default_tau_tilde(),
            integrator_steps: default_integrator_steps(),
            modalities,
        }
    }

    pub fn validate(&self) -> Result<(), LongitudinalError> {
        let bad = |msg: String| Err(LongitudinalError::PlanInvalid(msg));
        if self.time_points.is_empty() {
            return bad("no time points".into());
        }
        if self.time_points[0] != 0.0 {
            return bad(format!("time points must start at 0, got {}", self.time_points[0]));
        }
        if self.time_points.iter().any(|t| !t.is_finite()) {
            return bad("time points must be finite".into());
        }
        if self.time_points.windows(2).any(|w| w[1] <= w[0]) {
            return bad("time points must be strictly ascending".into());
        }
        if !(0.0..=1.0).contains(&self.tau_tilde) {
            return bad(format!("tau_tilde must lie in [0, 1], got {}", self.tau_tilde));
        }
        if self.integrator_steps == 0 {
            return bad("integrator_steps must be >= 1".into());
        }
        if self.modalities.is_empty() {
            return bad("no modalities requested".into());
        }
        Ok(())
    }
}

/// Adherence and consistency numbers for one (time point, modality) pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimePointMetrics {
    pub modality: Modality,
    /// Whole-tumor Dice between the volume-derived mask and the
    /// conditioning-derived mask at the same time point.
    pub dice_vs_conditioning: f64,
    /// PSNR against the predecessor volume outside both tumor regions;
    /// absent at t = 0.
    pub psnr_nontumor_vs_previous: Option<f64>,
}

/// Everything generated at one time point, modality-indexed in plan order.
#[derive(Debug, Clone)]
pub struct TimePointEntry {
    pub t_days: f64,
    /// Simulated tumor concentration driving the conditioning.
    pub concentration: ScalarField3D,
    /// Raw flow states, one per modality.
    pub volumes: Vec<FieldStack>,
    /// Whole-tumor masks derived from the generated volumes.
    pub masks: Vec<LabelMask>,
    pub metrics: Vec<TimePointMetrics>,
}

impl TimePointEntry {
    /// The exported image for one modality: first channel, clamped to [0, 1].
    pub fn image(&self, modality_idx: usize) -> ScalarField3D {
        let mut img = self.volumes[modality_idx].to_field(0);
        img.clamp_in_place(0.0, 1.0);
        img
    }
}

#[derive(Debug, Clone)]
pub struct TrajectoryBundle {
    pub plan: LongitudinalPlan,
    pub entries: Vec<TimePointEntry>,
}

/// One row of a [`corruption_sweep`] result.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub tau_tilde: f64,
    /// Mean whole-tumor Dice over all (time point, modality) pairs.
    pub mean_dice: f64,
    /// Mean consecutive nontumor PSNR over all pairs that have one.
    pub mean_psnr: f64,
}

/// Whole-tumor threshold shared by conditioning and volume-derived masks.
fn policy() -> ThresholdPolicy {
    ThresholdPolicy::default()
}

pub fn generate_trajectory(
    model: &VelocityModel,
    tissue: &TissueMap,
    growth_params: &GrowthParams,
    plan: &LongitudinalPlan,
    initial_z: Option<&[FieldStack]>,
    rng_seed: u64,
) -> Result<TrajectoryBundle, LongitudinalError> {
    plan.validate()?;
    let spec = *tissue.spec();
    if model.cfg().data_channels != 1 {
        return Err(LongitudinalError::ModelConditioningMismatch(format!(
            "trajectory synthesis needs single-channel volumes, model has {} data channels",
            model.cfg().data_channels
        )));
    }
    if let Some(init) = initial_z {
        if init.len() != plan.modalities.len() {
            return Err(LongitudinalError::ModelConditioningMismatch(format!(
                "initial_z has {} stacks for {} modalities",
                init.len(),
                plan.modalities.len()
            )));
        }
        for z in init {
            if z.channels() != model.cfg().data_channels || !z.spec().same_shape(&spec) {
                return Err(LongitudinalError::ModelConditioningMismatch(
                    "initial_z stack does not match model channels and tissue grid".into(),
                ));
            }
        }
    }

    // concentration fields at the planned time points
    let dt = SimClock::max_stable_dt(&spec, growth_params.d_white).min(1.0);
    let concentrations = simulate_at_times(tissue, growth_params, dt, &plan.time_points)?;

    let conditionings = |conc: &ScalarField3D| -> Result<Vec<ConditioningTensor>, LongitudinalError> {
        plan.modalities.iter().map(|&m| Ok(assemble(tissue, conc, m)?)).collect()
    };
    let thr = policy().edema;
    let steps = plan.integrator_steps;

    let mut entries: Vec<TimePointEntry> = Vec::with_capacity(plan.time_points.len());
    let mut prev_conds: Option<Vec<ConditioningTensor>> = None;

    for (ti, conc) in concentrations.iter().enumerate() {
        let conds = conditionings(conc)?;
        let volumes: Vec<FieldStack> = if ti == 0 {
            match initial_z {
                Some(init) => init.to_vec(),
                None => {
                    // one shared noise draw keeps cross-modality anatomy aligned
                    let z0 = sample_noise(spec, model.cfg().data_channels, rng_seed, 0)?;
                    conds
                        .iter()
                        .map(|cond| integrate_forward(model, &z0, 0.0, 1.0, steps, cond, Integrator::Euler))
                        .collect::<Result<_, _>>()?
                }
            }
        } else {
            let prev = entries.last().expect("ti > 0 implies a predecessor");
            let back_conds = prev_conds.as_ref().expect("ti > 0 implies predecessor conditioning");
            plan.modalities
                .iter()
                .enumerate()
                .map(|(mi, _)| {
                    let z_back =
                        transport_backward(model, &prev.volumes[mi], plan.tau_tilde, steps, &back_conds[mi], Integrator::Euler)?;
                    integrate_forward(model, &z_back, plan.tau_tilde, 1.0, steps, &conds[mi], Integrator::Euler)
                })
                .collect::<Result<_, _>>()?
        };

        let cond_mask = concentration_to_mask(conc, thr);
        let mut masks = Vec::with_capacity(volumes.len());
        let mut metrics = Vec::with_capacity(volumes.len());
        for (mi, &modality) in plan.modalities.iter().enumerate() {
            let mut img = volumes[mi].to_field(0);
            img.clamp_in_place(0.0, 1.0);
            let est = estimate_concentration(&img, tissue, modality)?;
            let mask = concentration_to_mask(&est, thr);
            let d = dice(&mask, &cond_mask)?;

            let p = if ti == 0 {
                None
            } else {
                let prev = entries.last().expect("ti > 0 implies a predecessor");
                let prev_mask = concentration_to_mask(&prev.concentration, thr);
                let nontumor = cond_mask.union(&prev_mask)?.complement();
                Some(psnr(&img, &prev.image(mi), &nontumor, 1.0)?)
            };
            masks.push(mask);
            metrics.push(TimePointMetrics {
                modality,
                dice_vs_conditioning: d,
                psnr_nontumor_vs_previous: p,
            });
        }

        entries.push(TimePointEntry {
            t_days: plan.time_points[ti],
            concentration: conc.clone(),
            volumes,
            masks,
            metrics,
        });
        prev_conds = Some(conds);
    }

    Ok(TrajectoryBundle { plan: plan.clone(), entries })
}

/// Re-run the trajectory at each corruption level and aggregate adherence
/// (mean Dice) and consistency (mean nontumor PSNR). All runs share the same
/// seed, so they differ only in τ̃.
pub fn corruption_sweep(
    model: &VelocityModel,
    tissue: &TissueMap,
    growth_params: &GrowthParams,
    plan: &LongitudinalPlan,
    tau_values: &[f64],
    rng_seed: u64,
) -> Result<Vec<SweepRow>, LongitudinalError> {
    if tau_values.is_empty() {
        return Err(LongitudinalError::PlanInvalid("no tau values to sweep".into()));
    }
    if plan.time_points.len() < 2 {
        return Err(LongitudinalError::PlanInvalid(
            "corruption sweep needs at least two time points for consecutive PSNR".into(),
        ));
    }
    let mut rows = Vec::with_capacity(tau_values.len());
    for &tau in tau_values {
        let swept = LongitudinalPlan { tau_tilde: tau, ..plan.clone() };
        let bundle = generate_trajectory(model, tissue, growth_params, &swept, None, rng_seed)?;

        let mut dices = Vec::new();
        let mut psnrs = Vec::new();
        for entry in &bundle.entries {
            for m in &entry.metrics {
                dices.push(m.dice_vs_conditioning);
                if let Some(p) = m.psnr_nontumor_vs_previous {
                    psnrs.push(p);
                }
            }
        }
        rows.push(SweepRow {
            tau_tilde: tau,
            mean_dice: dices.iter().sum::<f64>() / dices.len() as f64,
            mean_psnr: psnrs.iter().sum::<f64>() / psnrs.len() as f64,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flowmatch::ModelConfig;
    use crate::grid::GridSpec;
    use crate::metrics::PSNR_SENTINEL_DB;
    use crate::phantom::head_phantom;

    fn zero_model() -> VelocityModel {
        VelocityModel::new(ModelConfig {
            data_channels: 1,
            hidden: 4,
            tau_frequencies: 2,
            modality_embed: 2,
            init_seed: 1,
        })
        .unwrap()
    }

    fn fixture() -> (TissueMap, GrowthParams) {
        let spec = GridSpec::isotropic(10, 1.0).unwrap();
        let tissue = head_phantom(spec).unwrap();
        let params = GrowthParams {
            rho: 0.05,
            d_white: 0.05,
            seed_center: [6.5, 4.5, 4.5],
            seed_sigma: 1.2,
            ..GrowthParams::default()
        };
        (tissue, params)
    }

    /// ρ = 0 with negligible diffusion: concentrations (and their masks)
    /// stay effectively frozen across time points.
    fn frozen_params() -> GrowthParams {
        GrowthParams { rho: 0.0, d_white: 1e-12, seed_center: [6.5, 4.5, 4.5], seed_sigma: 1.2, ..GrowthParams::default() }
    }

    #[test]
    fn plan_validation_catches_bad_inputs() {
        let good = LongitudinalPlan::new(vec![0.0, 5.0], vec![Modality::T1c]);
        assert!(good.validate().is_ok());
        assert_eq!(good.tau_tilde, 0.15);
        assert_eq!(good.integrator_steps, 50);

        let cases = [
            LongitudinalPlan { time_points: vec![], ..good.clone() },
            LongitudinalPlan { time_points: vec![1.0, 2.0], ..good.clone() },
            LongitudinalPlan { time_points: vec![0.0, 2.0, 2.0], ..good.clone() },
            LongitudinalPlan { tau_tilde: 1.5, ..good.clone() },
            LongitudinalPlan { integrator_steps: 0, ..good.clone() },
            LongitudinalPlan { modalities: vec![], ..good.clone() },
        ];
        for plan in cases {
            assert!(matches!(plan.validate(), Err(LongitudinalError::PlanInvalid(_))), "{plan:?}");
        }
    }

    #[test]
    fn tau_one_freezes_follow_ups_bitwise() {
        let (tissue, params) = fixture();
        let model = zero_model();
        let plan = LongitudinalPlan {
            tau_tilde: 1.0,
            ..LongitudinalPlan::new(vec![0.0, 4.0, 9.0], vec![Modality::T1c, Modality::Flair])
        };
        let bundle = generate_trajectory(&model, &tissue, &params, &plan, None, 7).unwrap();
        assert_eq!(bundle.entries.len(), 3);
        for t in 1..3 {
            for mi in 0..2 {
                assert_eq!(
                    bundle.entries[t].volumes[mi], bundle.entries[0].volumes[mi],
                    "t={t} modality {mi} should be frozen"
                );
            }
        }
        // growth actually happened, so conditioning differs even though volumes froze
        assert_ne!(bundle.entries[2].concentration.data(), bundle.entries[0].concentration.data());
    }

    #[test]
    fn single_time_point_has_no_psnr_record() {
        let (tissue, params) = fixture();
        let bundle = generate_trajectory(
            &zero_model(),
            &tissue,
            &params,
            &LongitudinalPlan::new(vec![0.0], vec![Modality::T2]),
            None,
            3,
        )
        .unwrap();
        assert_eq!(bundle.entries.len(), 1);
        assert_eq!(bundle.entries[0].metrics.len(), 1);
        assert!(bundle.entries[0].metrics[0].psnr_nontumor_vs_previous.is_none());
        assert!(bundle.entries[0].metrics[0].dice_vs_conditioning.is_finite());
    }

    #[test]
    fn bundles_are_deterministic_in_the_seed() {
        let (tissue, params) = fixture();
        let model = zero_model();
        let plan = LongitudinalPlan::new(vec![0.0, 6.0], vec![Modality::T1]);
        let a = generate_trajectory(&model, &tissue, &params, &plan, None, 11).unwrap();
        let b = generate_trajectory(&model, &tissue, &params, &plan, None, 11).unwrap();
        for (ea, eb) in a.entries.iter().zip(&b.entries) {
            assert_eq!(ea.volumes, eb.volumes);
            assert_eq!(ea.metrics, eb.metrics);
        }
        let c = generate_trajectory(&model, &tissue, &params, &plan, None, 12).unwrap();
        assert_ne!(a.entries[0].volumes, c.entries[0].volumes, "seed must matter");
    }

    #[test]
    fn initial_z_is_used_verbatim_and_validated() {
        let (tissue, params) = fixture();
        let model = zero_model();
        let spec = *tissue.spec();
        let plan = LongitudinalPlan::new(vec![0.0, 5.0], vec![Modality::T1c, Modality::T2]);

        let init = vec![
            sample_noise(spec, 1, 100, 0).unwrap(),
            sample_noise(spec, 1, 100, 1).unwrap(),
        ];
        let bundle = generate_trajectory(&model, &tissue, &params, &plan, Some(&init), 5).unwrap();
        assert_eq!(bundle.entries[0].volumes, init);

        let wrong_len = generate_trajectory(&model, &tissue, &params, &plan, Some(&init[..1]), 5);
        assert!(matches!(wrong_len, Err(LongitudinalError::ModelConditioningMismatch(_))));

        let off_grid = vec![
            sample_noise(GridSpec::isotropic(8, 1.0).unwrap(), 1, 100, 0).unwrap(),
            sample_noise(GridSpec::isotropic(8, 1.0).unwrap(), 1, 100, 1).unwrap(),
        ];
        let wrong_shape = generate_trajectory(&model, &tissue, &params, &plan, Some(&off_grid), 5);
        assert!(matches!(wrong_shape, Err(LongitudinalError::ModelConditioningMismatch(_))));
    }

    #[test]
    fn zero_model_keeps_volumes_constant_and_psnr_at_the_cap() {
        // zero velocity: both transport legs are identities, every volume
        // equals the t = 0 draw, so consecutive PSNR hits the sentinel
        let (tissue, _) = fixture();
        let plan = LongitudinalPlan::new(vec![0.0, 3.0, 8.0], vec![Modality::T1c]);
        let bundle =
            generate_trajectory(&zero_model(), &tissue, &frozen_params(), &plan, None, 21).unwrap();
        for t in 1..3 {
            assert_eq!(bundle.entries[t].volumes, bundle.entries[0].volumes);
            let p = bundle.entries[t].metrics[0].psnr_nontumor_vs_previous.unwrap();
            assert_eq!(p, PSNR_SENTINEL_DB);
        }
    }

    #[test]
    fn sweep_at_tau_one_reports_capped_psnr_and_t0_dice() {
        let (tissue, _) = fixture();
        let model = zero_model();
        let plan = LongitudinalPlan::new(vec![0.0, 5.0, 10.0], vec![Modality::T1c]);
        let rows = corruption_sweep(&model, &tissue, &frozen_params(), &plan, &[1.0], 13).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].tau_tilde, 1.0);
        assert_eq!(rows[0].mean_psnr, PSNR_SENTINEL_DB);

        let bundle = generate_trajectory(
            &model,
            &tissue,
            &frozen_params(),
            &LongitudinalPlan { tau_tilde: 1.0, ..plan },
            None,
            13,
        )
        .unwrap();
        let t0_dice = bundle.entries[0].metrics[0].dice_vs_conditioning;
        // identical per-entry dice values; the mean can wobble an ulp
        approx::assert_abs_diff_eq!(rows[0].mean_dice, t0_dice, epsilon = 1e-14);
    }

    #[test]
    fn sweep_single_tau_matches_generate_trajectory() {
        let (tissue, params) = fixture();
        let model = zero_model();
        let plan = LongitudinalPlan::new(vec![0.0, 4.0], vec![Modality::Flair]);
        let rows = corruption_sweep(&model, &tissue, &params, &plan, &[0.15], 31).unwrap();
        let bundle = generate_trajectory(&model, &tissue, &params, &plan, None, 31).unwrap();
        let dices: Vec<f64> =
            bundle.entries.iter().flat_map(|e| e.metrics.iter().map(|m| m.dice_vs_conditioning)).collect();
        let psnrs: Vec<f64> = bundle
            .entries
            .iter()
            .flat_map(|e| e.metrics.iter().filter_map(|m| m.psnr_nontumor_vs_previous))
            .collect();
        assert_eq!(rows[0].mean_dice, dices.iter().sum::<f64>() / dices.len() as f64);
        assert_eq!(rows[0].mean_psnr, psnrs.iter().sum::<f64>() / psnrs.len() as f64);
    }

    #[test]
    fn sweep_rejects_degenerate_inputs() {
        let (tissue, params) = fixture();
        let model = zero_model();
        let plan = LongitudinalPlan::new(vec![0.0, 4.0], vec![Modality::T1]);
        assert!(matches!(
            corruption_sweep(&model, &tissue, &params, &plan, &[], 1),
            Err(LongitudinalError::PlanInvalid(_))
        ));
        let single = LongitudinalPlan::new(vec![0.0], vec![Modality::T1]);
        assert!(matches!(
            corruption_sweep(&model, &tissue, &params, &single, &[0.5], 1),
            Err(LongitudinalError::PlanInvalid(_))
        ));
        assert!(matches!(
            corruption_sweep(&model, &tissue, &params, &plan, &[1.5], 1),
            Err(LongitudinalError::PlanInvalid(_)) | Err(LongitudinalError::Flow(_))
        ));
    }

    #[test]
    fn entry_shapes_follow_the_plan() {
        let (tissue, params) = fixture();
        let plan = LongitudinalPlan::new(vec![0.0, 2.0], vec![Modality::T1, Modality::T2, Modality::Flair]);
        let bundle = generate_trajectory(&zero_model(), &tissue, &params, &plan, None, 2).unwrap();
        for (ti, entry) in bundle.entries.iter().enumerate() {
            assert_eq!(entry.t_days, plan.time_points[ti]);
            assert_eq!(entry.volumes.len(), 3);
            assert_eq!(entry.masks.len(), 3);
            assert_eq!(entry.metrics.len(), 3);
            for (mi, m) in entry.metrics.iter().enumerate() {
                assert_eq!(m.modality, plan.modalities[mi]);
            }
        }
    }
}

//! Synthetic head phantoms and the toy contrast rule.
//!
//! The phantom is an ellipsoidal brain — white-matter core, gray-matter
//! shell, a small central CSF ventricle — surrounded by background. It keeps
//! demos and tests self-contained; real anatomy only ever enters through the
//! NIfTI reader.
//!
//! [`synthesize_image`] is the single documented generative rule mapping a
//! conditioning tensor to an MR-like image, so adherence of generated
//! volumes is measurable: each modality pairs per-tissue base intensities
//! with a tumor contrast gain, `image = base(tissue) + gain·concentration`
//! on brain voxels and exactly 0 outside. The constants are chosen so the
//! value never leaves [0, 1] where tumor can actually live (parenchyma),
//! which makes [`estimate_concentration`] an exact inverse there.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use thiserror::Error;

use crate::conditioning::{assemble, ConditioningError, ConditioningTensor, Modality};
use crate::flowmatch::{FieldStack, TrainItem};
use crate::grid::{GridError, GridSpec, ScalarField3D, Tissue, TissueMap};

#[derive(Debug, Error)]
pub enum PhantomError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Conditioning(#[from] ConditioningError),
}

/// Per-modality constants of the toy contrast rule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContrastRule {
    pub base_csf: f64,
    pub base_gray: f64,
    pub base_white: f64,
    /// Signed tumor contrast: hypointense on T1, enhancing on T1c, broadly
    /// hyperintense on T2/FLAIR.
    pub tumor_gain: f64,
}

impl ContrastRule {
    pub fn for_modality(m: Modality) -> ContrastRule {
        match m {
            Modality::T1 => ContrastRule { base_csf: 0.10, base_gray: 0.45, base_white: 0.65, tumor_gain: -0.30 },
            Modality::T1c => ContrastRule { base_csf: 0.10, base_gray: 0.45, base_white: 0.62, tumor_gain: 0.33 },
            Modality::T2 => ContrastRule { base_csf: 0.90, base_gray: 0.55, base_white: 0.35, tumor_gain: 0.45 },
            Modality::Flair => ContrastRule { base_csf: 0.15, base_gray: 0.50, base_white: 0.40, tumor_gain: 0.50 },
        }
    }

    fn base(&self, t: Tissue) -> f64 {
        match t {
            Tissue::Background => 0.0,
            Tissue::Csf => self.base_csf,
            Tissue::Gray => self.base_gray,
            Tissue::White => self.base_white,
        }
    }
}

/// Ellipsoidal head phantom: brain ellipsoid with semi-axes 0.44·n per
/// axis, white-matter core inside 75% of the brain radius, gray-matter
/// shell outside it, and a CSF ventricle ellipsoid at 20% of the brain
/// radius around the center.
pub fn head_phantom(spec: GridSpec) -> Result<TissueMap, GridError> {
    let center = [(spec.nx as f64 - 1.0) / 2.0, (spec.ny as f64 - 1.0) / 2.0, (spec.nz as f64 - 1.0) / 2.0];
    let axes = [0.44 * spec.nx as f64, 0.44 * spec.ny as f64, 0.44 * spec.nz as f64];
    const SHELL: f64 = 0.75;
    const VENTRICLE: f64 = 0.20;

    let mut labels = Vec::with_capacity(spec.n_voxels());
    for z in 0..spec.nz {
        for y in 0..spec.ny {
            for x in 0..spec.nx {
                let d = [x as f64 - center[0], y as f64 - center[1], z as f64 - center[2]];
                let r2: f64 = (0..3).map(|i| (d[i] / axes[i]) * (d[i] / axes[i])).sum();
                let v2: f64 = (0..3).map(|i| (d[i] / (VENTRICLE * axes[i])) * (d[i] / (VENTRICLE * axes[i]))).sum();
                labels.push(if r2 > 1.0 {
                    Tissue::Background
                } else if v2 <= 1.0 {
                    Tissue::Csf
                } else if r2 > SHELL * SHELL {
                    Tissue::Gray
                } else {
                    Tissue::White
                });
            }
        }
    }
    TissueMap::from_labels(spec, labels)
}

/// The documented toy synthesis rule: per-voxel linear in the conditioning
/// channels, `base_csf·ch0 + base_gray·ch1 + base_white·ch2 + gain·ch3`
/// inside the brain, 0 outside, clamped to [0, 1].
pub fn synthesize_image(cond: &ConditioningTensor) -> ScalarField3D {
    let rule = ContrastRule::for_modality(cond.modality);
    let n = cond.spec().n_voxels();
    let (csf, gray, white, conc) = (cond.channel(0), cond.channel(1), cond.channel(2), cond.channel(3));
    let mut data = Vec::with_capacity(n);
    for i in 0..n {
        let in_brain = csf[i] + gray[i] + white[i] > 0.0;
        let v = if in_brain {
            rule.base_csf * csf[i] + rule.base_gray * gray[i] + rule.base_white * white[i]
                + rule.tumor_gain * conc[i]
        } else {
            0.0
        };
        data.push(v.clamp(0.0, 1.0));
    }
    ScalarField3D::from_vec(*cond.spec(), data).expect("image shape follows conditioning shape")
}

/// [`synthesize_image`] as a single-channel stack, the training target shape.
pub fn synthesize_stack(cond: &ConditioningTensor) -> FieldStack {
    let img = synthesize_image(cond);
    FieldStack::from_field(&img)
}

/// Exact inverse of the contrast rule wherever its clamp did not bind:
/// `(image − base(tissue)) / gain` on brain voxels, clamped to [0, 1];
/// 0 outside the brain.
pub fn estimate_concentration(
    image: &ScalarField3D,
    tissue: &TissueMap,
    modality: Modality,
) -> Result<ScalarField3D, GridError> {
    if !image.spec().same_shape(tissue.spec()) {
        return Err(GridError::ShapeMismatch("image vs tissue map".into()));
    }
    let rule = ContrastRule::for_modality(modality);
    let data = image
        .data()
        .iter()
        .zip(tissue.labels())
        .map(|(&v, &t)| {
            if t.in_brain() {
                ((v - rule.base(t)) / rule.tumor_gain).clamp(0.0, 1.0)
            } else {
                0.0
            }
        })
        .collect();
    ScalarField3D::from_vec(*image.spec(), data)
}

/// Random multi-blob tumor concentration: 1–2 Gaussian bumps centered on
/// parenchyma voxels, zero elsewhere, clamped to [0, 1].
pub fn random_concentration(tissue: &TissueMap, rng: &mut ChaCha12Rng) -> ScalarField3D {
    let spec = *tissue.spec();
    let parenchyma: Vec<usize> = tissue
        .labels()
        .iter()
        .enumerate()
        .filter(|(_, t)| t.is_parenchyma())
        .map(|(i, _)| i)
        .collect();
    let mut conc = ScalarField3D::new(spec, 0.0).expect("spec already validated");
    if parenchyma.is_empty() {
        return conc;
    }
    let n_blobs = rng.random_range(1..=2);
    for _ in 0..n_blobs {
        let center_idx = parenchyma[rng.random_range(0..parenchyma.len())];
        let (cx, cy, cz) = spec.coords(center_idx);
        let center = spec.position(cx, cy, cz);
        let sigma: f64 = rng.random_range(1.2..3.0);
        let amplitude: f64 = rng.random_range(0.5..1.0);
        let inv = 1.0 / (2.0 * sigma * sigma);
        for &i in &parenchyma {
            let (x, y, z) = spec.coords(i);
            let p = spec.position(x, y, z);
            let d2 = (0..3).map(|a| (p[a] - center[a]) * (p[a] - center[a])).sum::<f64>();
            conc.data_mut()[i] += amplitude * (-d2 * inv).exp();
        }
    }
    conc.clamp_in_place(0.0, 1.0);
    conc
}

/// Build `count` training pairs on one phantom: fresh random concentrations,
/// modalities cycled in order, images from the toy rule.
pub fn training_pairs(
    tissue: &TissueMap,
    count: usize,
    seed: u64,
    modalities: &[Modality],
) -> Result<Vec<TrainItem>, PhantomError> {
    assert!(!modalities.is_empty(), "at least one modality required");
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut items = Vec::with_capacity(count);
    for i in 0..count {
        let conc = random_concentration(tissue, &mut rng);
        let cond = assemble(tissue, &conc, modalities[i % modalities.len()])?;
        let z1 = synthesize_stack(&cond);
        items.push(TrainItem { z1, cond });
    }
    Ok(items)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::growth::concentration_to_mask;

    #[test]
    fn phantom_contains_all_tissues_with_background_outside() {
        for n in [16, 20] {
            let spec = GridSpec::isotropic(n, 1.0).unwrap();
            let tissue = head_phantom(spec).unwrap();
            for t in [Tissue::Background, Tissue::Csf, Tissue::Gray, Tissue::White] {
                assert!(tissue.count(t) > 0, "n={n}: missing {t:?}");
            }
            // corners are far outside the ellipsoid
            assert_eq!(tissue.get(0, 0, 0), Tissue::Background);
            assert_eq!(tissue.get(n - 1, n - 1, n - 1), Tissue::Background);
            // the exact center voxel lies in the ventricle
            assert_eq!(tissue.get(n / 2, n / 2, n / 2), Tissue::Csf);
        }
    }

    #[test]
    fn phantom_is_mirror_symmetric() {
        let spec = GridSpec::isotropic(15, 1.0).unwrap();
        let tissue = head_phantom(spec).unwrap();
        for z in 0..15 {
            for y in 0..15 {
                for x in 0..15 {
                    assert_eq!(tissue.get(x, y, z), tissue.get(14 - x, y, z));
                    assert_eq!(tissue.get(x, y, z), tissue.get(x, 14 - y, z));
                    assert_eq!(tissue.get(x, y, z), tissue.get(x, y, 14 - z));
                }
            }
        }
    }

    #[test]
    fn rule_stays_in_unit_range_on_parenchyma_without_clamping() {
        // over the full concentration range, parenchyma intensities never
        // need the clamp, so the inverse is exact where tumor can live
        for m in Modality::ALL {
            let rule = ContrastRule::for_modality(m);
            for t in [Tissue::Gray, Tissue::White] {
                for c in [0.0, 0.25, 0.5, 0.75, 1.0] {
                    let v = rule.base(t) + rule.tumor_gain * c;
                    assert!((0.0..=1.0).contains(&v), "{m} {t:?} c={c} -> {v}");
                }
            }
        }
    }

    #[test]
    fn inverse_recovers_concentration_on_parenchyma() {
        let spec = GridSpec::isotropic(12, 1.0).unwrap();
        let tissue = head_phantom(spec).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let conc = random_concentration(&tissue, &mut rng);
        for m in Modality::ALL {
            let cond = assemble(&tissue, &conc, m).unwrap();
            let img = synthesize_image(&cond);
            let est = estimate_concentration(&img, &tissue, m).unwrap();
            for (i, (&c, &e)) in conc.data().iter().zip(est.data()).enumerate() {
                let t = tissue.labels()[i];
                if t.is_parenchyma() {
                    approx::assert_abs_diff_eq!(e, c, epsilon = 1e-12);
                } else {
                    assert_eq!(e, 0.0, "voxel {i} ({t:?}) should estimate 0");
                }
            }
        }
    }

    #[test]
    fn background_voxels_render_black() {
        let spec = GridSpec::isotropic(10, 1.0).unwrap();
        let tissue = head_phantom(spec).unwrap();
        let conc = ScalarField3D::new(spec, 0.0).unwrap();
        let img = synthesize_image(&assemble(&tissue, &conc, Modality::T2).unwrap());
        for (i, &t) in tissue.labels().iter().enumerate() {
            if t == Tissue::Background {
                assert_eq!(img.data()[i], 0.0);
            } else {
                assert!(img.data()[i] > 0.0);
            }
        }
    }

    #[test]
    fn estimate_rejects_mismatched_shapes() {
        let a = GridSpec::isotropic(8, 1.0).unwrap();
        let b = GridSpec::isotropic(9, 1.0).unwrap();
        let img = ScalarField3D::new(a, 0.5).unwrap();
        let tissue = head_phantom(b).unwrap();
        assert!(matches!(
            estimate_concentration(&img, &tissue, Modality::T1),
            Err(GridError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn random_concentration_is_bounded_and_on_parenchyma() {
        let spec = GridSpec::isotropic(16, 1.0).unwrap();
        let tissue = head_phantom(spec).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(17);
        for _ in 0..20 {
            let conc = random_concentration(&tissue, &mut rng);
            assert!(conc.data().iter().all(|&c| (0.0..=1.0).contains(&c)));
            for (i, &t) in tissue.labels().iter().enumerate() {
                if !t.is_parenchyma() {
                    assert_eq!(conc.data()[i], 0.0);
                }
            }
            assert!(concentration_to_mask(&conc, 0.2).count() > 0, "tumor mask empty");
        }
    }

    #[test]
    fn training_pairs_are_deterministic_and_cycle_modalities() {
        let spec = GridSpec::isotropic(12, 1.0).unwrap();
        let tissue = head_phantom(spec).unwrap();
        let mods = [Modality::T1c, Modality::Flair];
        let a = training_pairs(&tissue, 6, 2024, &mods).unwrap();
        let b = training_pairs(&tissue, 6, 2024, &mods).unwrap();
        assert_eq!(a.len(), 6);
        for (ia, ib) in a.iter().zip(&b) {
            assert_eq!(ia.z1, ib.z1);
            assert_eq!(ia.cond.modality, ib.cond.modality);
        }
        for (i, item) in a.iter().enumerate() {
            assert_eq!(item.cond.modality, mods[i % 2]);
            let expect = synthesize_stack(&item.cond);
            assert_eq!(item.z1, expect);
        }
        let c = training_pairs(&tissue, 6, 2025, &mods).unwrap();
        assert_ne!(a[0].z1, c[0].z1, "different seeds should differ");
    }
}

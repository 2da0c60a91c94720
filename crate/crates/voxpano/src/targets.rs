//! Ground-truth target encoding for the centerness head, and the two
//! losses it is trained with. The encoders are the algebraic inverse of the
//! center decoding path, which makes closed-loop round-trip tests possible
//! without a network.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{ClassKind, GridIndex, GridSpec, LabelTaxonomy};
use crate::tensors::{CenterHeatmap, PanopticGrid, RegressionField, SemanticGrid};

const CLAMP_EPS: f64 = 1e-6;

/// One ground-truth thing instance.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceRecord {
    pub instance_id: u32,
    pub class_id: u8,
    pub voxels: Vec<GridIndex>,
    /// Arithmetic mean of voxel positions, grid-local meters.
    pub mass_center: [f64; 3],
    /// BEV projection of the voxel set.
    pub footprint: BTreeSet<(usize, usize)>,
}

impl InstanceRecord {
    pub fn from_voxels(
        instance_id: u32,
        class_id: u8,
        voxels: Vec<GridIndex>,
        spec: &GridSpec,
    ) -> Result<Self> {
        if voxels.is_empty() {
            return Err(Error::Validation(format!(
                "instance {instance_id} has no voxels"
            )));
        }
        let mut sum = [0.0f64; 3];
        let mut footprint = BTreeSet::new();
        for &v in &voxels {
            let p = spec.voxel_position(v)?;
            sum[0] += p[0];
            sum[1] += p[1];
            sum[2] += p[2];
            footprint.insert((v.i, v.j));
        }
        let n = voxels.len() as f64;
        Ok(InstanceRecord {
            instance_id,
            class_id,
            voxels,
            mass_center: [sum[0] / n, sum[1] / n, sum[2] / n],
            footprint,
        })
    }

    /// Mass center's BEV pixel, rounded to the nearest index.
    pub fn center_pixel(&self, spec: &GridSpec) -> (usize, usize) {
        let ci = (self.mass_center[0] / spec.dx).round() as usize;
        let cj = (self.mass_center[1] / spec.dy).round() as usize;
        (ci.min(spec.h - 1), cj.min(spec.w - 1))
    }
}

/// Encoded training targets for one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetBundle {
    pub heat: CenterHeatmap,
    pub reg: RegressionField,
    pub reg_mask: Array2<bool>,
}

/// How the Gaussian standard deviation is derived from an instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaMode {
    /// Diagonal of the footprint bounding box, in pixels (default).
    BboxDiagonalPixels,
    /// Diagonal of the footprint bounding box, in meters; pixel distances
    /// are scaled by the voxel edge lengths to match.
    BboxDiagonalMeters,
}

/// One record per distinct thing-class instance ID; stuff and free produce
/// none. The grids must satisfy class consistency.
pub fn extract_instances(
    sem_gt: &SemanticGrid,
    pano_gt: &PanopticGrid,
    tax: &LabelTaxonomy,
) -> Result<Vec<InstanceRecord>> {
    let diags = pano_gt.validate(Some(sem_gt), tax);
    if !diags.is_empty() {
        return Err(Error::Validation(format!(
            "inconsistent grids: {} (and {} more)",
            diags[0],
            diags.len() - 1
        )));
    }
    let mut voxels_by_id: BTreeMap<u32, Vec<GridIndex>> = BTreeMap::new();
    for ((i, j, k), &id) in pano_gt.data.indexed_iter() {
        if id == 0 {
            continue;
        }
        let class = pano_gt.id_to_class[&id];
        if tax.kind(class) == Some(ClassKind::Thing) {
            voxels_by_id
                .entry(id)
                .or_default()
                .push(GridIndex::new(i, j, k));
        }
    }
    voxels_by_id
        .into_iter()
        .map(|(id, voxels)| {
            InstanceRecord::from_voxels(id, pano_gt.id_to_class[&id], voxels, &pano_gt.spec)
        })
        .collect()
}

/// Gaussian-encoded center heatmap. Per instance, the standard deviation is
/// `sigma_scale * sqrt(di^2 + dj^2)` over the footprint bounding-box extent
/// (each extent at least 1). Overlapping contributions combine by per-pixel
/// max, and the rounded center pixel is forced to exactly 1.0.
pub fn encode_heatmap(
    instances: &[InstanceRecord],
    spec: &GridSpec,
    tax: &LabelTaxonomy,
    sigma_scale: f64,
    mode: SigmaMode,
) -> Result<CenterHeatmap> {
    if sigma_scale <= 0.0 {
        return Err(Error::Validation(format!(
            "sigma_scale must be > 0, got {sigma_scale}"
        )));
    }
    let mut heat = Array3::<f32>::zeros((spec.h, spec.w, tax.c_inst()));
    for inst in instances {
        let ch = tax.channel_of_class(inst.class_id)?;
        let (i_min, i_max) = inst
            .footprint
            .iter()
            .fold((usize::MAX, 0), |(lo, hi), &(i, _)| (lo.min(i), hi.max(i)));
        let (j_min, j_max) = inst
            .footprint
            .iter()
            .fold((usize::MAX, 0), |(lo, hi), &(_, j)| (lo.min(j), hi.max(j)));
        let di = ((i_max - i_min + 1) as f64).max(1.0);
        let dj = ((j_max - j_min + 1) as f64).max(1.0);
        let ci = inst.mass_center[0] / spec.dx;
        let cj = inst.mass_center[1] / spec.dy;
        let (sigma, sx, sy) = match mode {
            SigmaMode::BboxDiagonalPixels => {
                (sigma_scale * (di * di + dj * dj).sqrt(), 1.0, 1.0)
            }
            SigmaMode::BboxDiagonalMeters => {
                let dm = ((di * spec.dx).powi(2) + (dj * spec.dy).powi(2)).sqrt();
                (sigma_scale * dm, spec.dx, spec.dy)
            }
        };
        let denom = 2.0 * sigma * sigma;
        for i in 0..spec.h {
            for j in 0..spec.w {
                let d2 = ((i as f64 - ci) * sx).powi(2) + ((j as f64 - cj) * sy).powi(2);
                let v = (-d2 / denom).exp() as f32;
                if v > heat[[i, j, ch]] {
                    heat[[i, j, ch]] = v;
                }
            }
        }
        let (pi, pj) = inst.center_pixel(spec);
        heat[[pi, pj, ch]] = 1.0;
    }
    Ok(CenterHeatmap::new(heat))
}

/// Regression targets: at each footprint pixel of an instance with mass
/// center `(cx, cy, cz)`, the target is `(cx/dx - i, cy/dy - j, cz/r_z)`.
/// Footprints must be pairwise disjoint.
pub fn encode_regression(
    instances: &[InstanceRecord],
    spec: &GridSpec,
) -> Result<(RegressionField, Array2<bool>)> {
    let mut reg = Array3::<f32>::zeros((spec.h, spec.w, 3));
    let mut mask = Array2::<bool>::from_elem((spec.h, spec.w), false);
    let r_z = spec.r_z();
    for inst in instances {
        for &(i, j) in &inst.footprint {
            if mask[[i, j]] {
                return Err(Error::Validation(format!(
                    "overlapping instance footprints at BEV pixel ({i}, {j})"
                )));
            }
            mask[[i, j]] = true;
            reg[[i, j, 0]] = (inst.mass_center[0] / spec.dx - i as f64) as f32;
            reg[[i, j, 1]] = (inst.mass_center[1] / spec.dy - j as f64) as f32;
            reg[[i, j, 2]] = (inst.mass_center[2] / r_z) as f32;
        }
    }
    Ok((RegressionField::new(reg), mask))
}

fn check_heat_shapes(pred: &CenterHeatmap, gt: &CenterHeatmap) -> Result<()> {
    if pred.data.dim() != gt.data.dim() {
        return Err(Error::Shape(format!(
            "heatmap shapes differ: {:?} vs {:?}",
            pred.data.dim(),
            gt.data.dim()
        )));
    }
    Ok(())
}

/// Penalty-reduced pixelwise focal loss over Gaussian-encoded heatmaps,
/// normalized by the number of peak (gt == 1) pixels.
pub fn focal_heatmap_loss(
    pred: &CenterHeatmap,
    gt: &CenterHeatmap,
    alpha: f64,
    beta: f64,
) -> Result<f64> {
    check_heat_shapes(pred, gt)?;
    let mut loss = 0.0f64;
    let mut peaks = 0u64;
    for (&p, &g) in pred.data.iter().zip(gt.data.iter()) {
        let p = (p as f64).clamp(CLAMP_EPS, 1.0 - CLAMP_EPS);
        let g = g as f64;
        if g >= 1.0 {
            peaks += 1;
            loss -= (1.0 - p).powf(alpha) * p.ln();
        } else {
            loss -= (1.0 - g).powf(beta) * p.powf(alpha) * (1.0 - p).ln();
        }
    }
    Ok(loss / peaks.max(1) as f64)
}

/// Analytic derivative of [`focal_heatmap_loss`] with respect to each
/// prediction pixel. Used by the finite-difference gradient check.
pub fn focal_heatmap_loss_grad(
    pred: &CenterHeatmap,
    gt: &CenterHeatmap,
    alpha: f64,
    beta: f64,
) -> Result<Array3<f64>> {
    check_heat_shapes(pred, gt)?;
    let peaks = gt.data.iter().filter(|&&g| g >= 1.0).count().max(1) as f64;
    let mut grad = Array3::<f64>::zeros(pred.data.dim());
    for ((idx, &p), &g) in pred.data.indexed_iter().zip(gt.data.iter()) {
        let p = (p as f64).clamp(CLAMP_EPS, 1.0 - CLAMP_EPS);
        let g = g as f64;
        let d = if g >= 1.0 {
            alpha * (1.0 - p).powf(alpha - 1.0) * p.ln() - (1.0 - p).powf(alpha) / p
        } else {
            -(1.0 - g).powf(beta)
                * (alpha * p.powf(alpha - 1.0) * (1.0 - p).ln() - p.powf(alpha) / (1.0 - p))
        };
        grad[idx] = d / peaks;
    }
    Ok(grad)
}

/// Smooth-L1 regression loss over masked pixels, summed over the three
/// channels and divided by the masked-pixel count (minimum 1).
pub fn smooth_l1_reg_loss(
    pred: &RegressionField,
    gt: &RegressionField,
    mask: &Array2<bool>,
    beta: f64,
) -> Result<f64> {
    if pred.data.dim() != gt.data.dim() {
        return Err(Error::Shape(format!(
            "regression shapes differ: {:?} vs {:?}",
            pred.data.dim(),
            gt.data.dim()
        )));
    }
    let (h, w, _) = pred.data.dim();
    if mask.dim() != (h, w) {
        return Err(Error::Shape(format!(
            "mask shape {:?} does not match field BEV shape ({h}, {w})",
            mask.dim()
        )));
    }
    let mut loss = 0.0f64;
    let mut active = 0u64;
    for i in 0..h {
        for j in 0..w {
            if !mask[[i, j]] {
                continue;
            }
            active += 1;
            for c in 0..3 {
                let e = (pred.data[[i, j, c]] as f64 - gt.data[[i, j, c]] as f64).abs();
                loss += if e < beta {
                    0.5 * e * e / beta
                } else {
                    e - 0.5 * beta
                };
            }
        }
    }
    Ok(loss / active.max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{ClassDef, TaxonomyConfig};

    fn tax() -> LabelTaxonomy {
        LabelTaxonomy::from_config(TaxonomyConfig {
            classes: vec![
                ClassDef { id: 0, name: "free".into(), kind: ClassKind::Free },
                ClassDef { id: 1, name: "car".into(), kind: ClassKind::Thing },
                ClassDef { id: 2, name: "ground".into(), kind: ClassKind::Stuff },
            ],
        })
        .unwrap()
    }

    fn cuboid(i0: usize, j0: usize, k0: usize, si: usize, sj: usize, sk: usize) -> Vec<GridIndex> {
        let mut v = Vec::new();
        for i in i0..i0 + si {
            for j in j0..j0 + sj {
                for k in k0..k0 + sk {
                    v.push(GridIndex::new(i, j, k));
                }
            }
        }
        v
    }

    #[test]
    fn extract_single_instance() {
        let tax = tax();
        let spec = GridSpec::new(8, 8, 4, 0.4, 0.4, 0.4).unwrap();
        let mut sem = SemanticGrid::zeros(spec, &tax);
        let mut pano = PanopticGrid::zeros(spec);
        for v in cuboid(2, 2, 0, 2, 2, 2) {
            sem.data[[v.i, v.j, v.k]] = 1;
            pano.data[[v.i, v.j, v.k]] = 1;
        }
        pano.id_to_class.insert(1, 1);
        let recs = extract_instances(&sem, &pano, &tax).unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].voxels.len(), 8);
        // mean of positions: i,j in {2,3} -> (2.5*0.4), k in {0,1} -> 0.5*0.4
        assert!((recs[0].mass_center[0] - 1.0).abs() < 1e-12);
        assert!((recs[0].mass_center[1] - 1.0).abs() < 1e-12);
        assert!((recs[0].mass_center[2] - 0.2).abs() < 1e-12);
    }

    #[test]
    fn extract_skips_stuff_and_splits_same_class() {
        let tax = tax();
        let spec = GridSpec::new(8, 8, 4, 0.4, 0.4, 0.4).unwrap();
        let mut sem = SemanticGrid::zeros(spec, &tax);
        let mut pano = PanopticGrid::zeros(spec);
        sem.data[[0, 0, 0]] = 2;
        pano.data[[0, 0, 0]] = 1;
        pano.id_to_class.insert(1, 2);
        sem.data[[3, 3, 0]] = 1;
        pano.data[[3, 3, 0]] = 2;
        pano.id_to_class.insert(2, 1);
        sem.data[[6, 6, 0]] = 1;
        pano.data[[6, 6, 0]] = 3;
        pano.id_to_class.insert(3, 1);
        let recs = extract_instances(&sem, &pano, &tax).unwrap();
        assert_eq!(recs.len(), 2);
        assert_ne!(recs[0].instance_id, recs[1].instance_id);
    }

    #[test]
    fn extract_rejects_inconsistent_grids() {
        let tax = tax();
        let spec = GridSpec::new(4, 4, 2, 0.4, 0.4, 0.4).unwrap();
        let sem = SemanticGrid::zeros(spec, &tax);
        let mut pano = PanopticGrid::zeros(spec);
        pano.data[[0, 0, 0]] = 1; // sem says free here
        pano.id_to_class.insert(1, 1);
        assert!(extract_instances(&sem, &pano, &tax).is_err());
    }

    #[test]
    fn heatmap_peak_is_one_and_gaussian_falls_off() {
        let tax = tax();
        let spec = GridSpec::new(16, 16, 4, 0.4, 0.4, 0.4).unwrap();
        let inst =
            InstanceRecord::from_voxels(1, 1, cuboid(6, 6, 0, 3, 3, 1), &spec).unwrap();
        let heat = encode_heatmap(
            &[inst.clone()],
            &spec,
            &tax,
            1.0,
            SigmaMode::BboxDiagonalPixels,
        )
        .unwrap();
        let (pi, pj) = inst.center_pixel(&spec);
        assert_eq!(heat.data[[pi, pj, 0]], 1.0);
        // sigma = sqrt(9 + 9); pixel at squared distance 2*sigma^2 reads exp(-1)
        let sigma2 = 18.0f64;
        let ci = inst.mass_center[0] / spec.dx;
        let cj = inst.mass_center[1] / spec.dy;
        // probe an off-axis pixel analytically instead of hunting for an
        // exact 2*sigma^2 lattice point: value must match the formula
        let (i, j) = (2usize, 13usize);
        let d2 = (i as f64 - ci).powi(2) + (j as f64 - cj).powi(2);
        let expect = (-d2 / (2.0 * sigma2)).exp();
        assert!((heat.data[[i, j, 0]] as f64 - expect).abs() < 1e-6);
        assert!(heat.validate(&spec, &tax).is_empty());
    }

    #[test]
    fn heatmap_exact_two_sigma_squared_point() {
        // single-voxel instance: extents 1 -> sigma = sqrt(2); 2*sigma^2 = 4,
        // so a pixel at squared pixel distance 4 reads exp(-1)
        let tax = tax();
        let spec = GridSpec::new(16, 16, 4, 0.4, 0.4, 0.4).unwrap();
        let inst = InstanceRecord::from_voxels(1, 1, cuboid(8, 8, 0, 1, 1, 1), &spec).unwrap();
        let heat =
            encode_heatmap(&[inst], &spec, &tax, 1.0, SigmaMode::BboxDiagonalPixels).unwrap();
        let expect = (-1.0f64).exp();
        assert!((heat.data[[10, 8, 0]] as f64 - expect).abs() < 1e-6);
    }

    #[test]
    fn heatmap_max_combination_and_permutation_invariance() {
        let tax = tax();
        let spec = GridSpec::new(16, 16, 4, 0.4, 0.4, 0.4).unwrap();
        let a = InstanceRecord::from_voxels(1, 1, cuboid(2, 2, 0, 3, 3, 1), &spec).unwrap();
        let b = InstanceRecord::from_voxels(2, 1, cuboid(9, 9, 0, 3, 3, 1), &spec).unwrap();
        let ab = encode_heatmap(
            &[a.clone(), b.clone()],
            &spec,
            &tax,
            1.0,
            SigmaMode::BboxDiagonalPixels,
        )
        .unwrap();
        let ba =
            encode_heatmap(&[b, a], &spec, &tax, 1.0, SigmaMode::BboxDiagonalPixels).unwrap();
        assert_eq!(ab.data, ba.data);
        // max-combined, never summed: bounded by 1 everywhere
        assert!(ab.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn regression_targets_invert_center_decoding() {
        let spec = GridSpec::new(8, 8, 16, 0.4, 0.4, 0.4).unwrap();
        // craft an instance whose mass center is grid-local (0.9, 1.0, 3.2)
        let mut inst =
            InstanceRecord::from_voxels(1, 1, cuboid(2, 3, 8, 1, 1, 1), &spec).unwrap();
        inst.mass_center = [0.9, 1.0, 3.2];
        let (reg, mask) = encode_regression(&[inst], &spec).unwrap();
        assert!(mask[[2, 3]]);
        assert!((reg.data[[2, 3, 0]] - 0.25).abs() < 1e-6);
        assert!((reg.data[[2, 3, 1]] + 0.5).abs() < 1e-6);
        assert!((reg.data[[2, 3, 2]] - 0.5).abs() < 1e-6);
        // inactive pixels stay zero
        assert!(!mask[[0, 0]]);
        assert_eq!(reg.data[[0, 0, 0]], 0.0);
    }

    #[test]
    fn regression_rejects_overlapping_footprints() {
        let spec = GridSpec::new(8, 8, 4, 0.4, 0.4, 0.4).unwrap();
        let a = InstanceRecord::from_voxels(1, 1, cuboid(2, 2, 0, 2, 2, 1), &spec).unwrap();
        let b = InstanceRecord::from_voxels(2, 1, cuboid(3, 3, 1, 2, 2, 1), &spec).unwrap();
        assert!(encode_regression(&[a, b], &spec).is_err());
    }

    #[test]
    fn focal_loss_zero_at_perfect_and_hand_value() {
        let mut gt = Array3::<f32>::zeros((1, 1, 1));
        gt[[0, 0, 0]] = 1.0;
        let gt = CenterHeatmap::new(gt);
        let perfect = focal_heatmap_loss(&gt.clone(), &gt, 2.0, 4.0).unwrap();
        assert!(perfect.abs() < 1e-5); // clamping leaves an eps-order residue

        let mut pred = Array3::<f32>::zeros((1, 1, 1));
        pred[[0, 0, 0]] = 0.5;
        let loss = focal_heatmap_loss(&CenterHeatmap::new(pred), &gt, 2.0, 4.0).unwrap();
        let expect = 0.25 * (0.5f64.ln().abs());
        assert!((loss - expect).abs() < 1e-9, "got {loss}, want {expect}");
    }

    #[test]
    fn focal_loss_monotone_toward_target() {
        let mut gt = Array3::<f32>::zeros((3, 3, 1));
        gt[[1, 1, 0]] = 1.0;
        gt[[0, 0, 0]] = 0.5;
        let gt = CenterHeatmap::new(gt);
        let mut prev = f64::INFINITY;
        for step in 0..5 {
            let t = step as f32 / 4.0;
            // move pred from uniform 0.5 toward gt pointwise
            let pred = CenterHeatmap::new(gt.data.mapv(|g| 0.5 + t * (g - 0.5)));
            let loss = focal_heatmap_loss(&pred, &gt, 2.0, 4.0).unwrap();
            assert!(loss <= prev + 1e-12);
            prev = loss;
        }
    }

    #[test]
    fn focal_loss_gradient_matches_finite_differences() {
        let mut gt = Array3::<f32>::zeros((3, 3, 1));
        gt[[1, 1, 0]] = 1.0;
        gt[[0, 1, 0]] = 0.6;
        gt[[2, 0, 0]] = 0.3;
        let gt = CenterHeatmap::new(gt);
        let mut pred = Array3::<f32>::zeros((3, 3, 1));
        for (n, v) in pred.iter_mut().enumerate() {
            *v = 0.15 + 0.08 * (n as f32); // spread over (0.15, 0.79)
        }
        let pred = CenterHeatmap::new(pred);
        let grad = focal_heatmap_loss_grad(&pred, &gt, 2.0, 4.0).unwrap();
        let h = 1e-3f32;
        for idx in 0..9 {
            let (i, j) = (idx / 3, idx % 3);
            let mut plus = pred.clone();
            plus.data[[i, j, 0]] += h;
            let mut minus = pred.clone();
            minus.data[[i, j, 0]] -= h;
            let fd = (focal_heatmap_loss(&plus, &gt, 2.0, 4.0).unwrap()
                - focal_heatmap_loss(&minus, &gt, 2.0, 4.0).unwrap())
                / (2.0 * h as f64);
            let g = grad[[i, j, 0]];
            let rel = (fd - g).abs() / g.abs().max(1e-12);
            assert!(rel <= 1e-4, "pixel ({i},{j}): fd {fd} vs analytic {g}");
        }
    }

    #[test]
    fn smooth_l1_examples() {
        let spec = GridSpec::new(4, 4, 2, 0.4, 0.4, 0.4).unwrap();
        let gt = RegressionField::zeros(&spec);
        let mut mask = Array2::from_elem((4, 4), false);

        // empty mask -> 0 regardless of error
        let mut pred = RegressionField::zeros(&spec);
        pred.data[[1, 1, 0]] = 9.0;
        assert_eq!(smooth_l1_reg_loss(&pred, &gt, &mask, 1.0).unwrap(), 0.0);

        // single masked pixel with error (0.5, 0, 0): 0.5 * 0.25 = 0.125
        mask[[1, 1]] = true;
        pred.data[[1, 1, 0]] = 0.5;
        let loss = smooth_l1_reg_loss(&pred, &gt, &mask, 1.0).unwrap();
        assert!((loss - 0.125).abs() < 1e-9);

        // beyond beta the penalty is linear: error 2.0 -> 1.5
        pred.data[[1, 1, 0]] = 2.0;
        let loss = smooth_l1_reg_loss(&pred, &gt, &mask, 1.0).unwrap();
        assert!((loss - 1.5).abs() < 1e-6);

        // perfect prediction
        pred.data[[1, 1, 0]] = 0.0;
        assert_eq!(smooth_l1_reg_loss(&pred, &gt, &mask, 1.0).unwrap(), 0.0);
    }
}

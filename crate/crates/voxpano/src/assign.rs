//! Nearest-assign fusion of the semantic grid and proposed instance centers
//! into a panoptic grid.
//!
//! Classes are processed in ascending ID order, skipping free. Each stuff
//! class with voxels consumes one instance ID; each thing class consumes one
//! ID per same-class center, with every voxel routed to its nearest center
//! by squared Euclidean distance in grid-local meters. ID 0 is reserved for
//! free/void voxels, so allocation starts at 1.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{ClassKind, GridIndex, GridSpec, LabelTaxonomy};
use crate::proposal::{self, InstanceCenter, ProposalConfig};
use crate::tensors::{BEVOccLogits, CenterHeatmap, PanopticGrid, RegressionField, SemanticGrid};

/// What to do with a thing class that has voxels but no surviving centers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoCenterPolicy {
    /// Assign one fresh instance ID to the whole class mass.
    SingleInstance,
    /// Leave the voxels at ID 0.
    Void,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AssignConfig {
    pub no_center_policy: NoCenterPolicy,
    pub count_work: bool,
}

impl Default for AssignConfig {
    fn default() -> Self {
        AssignConfig {
            no_center_policy: NoCenterPolicy::SingleInstance,
            count_work: true,
        }
    }
}

/// Instrumentation gathered during assignment.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AssignStats {
    /// Total (voxel, center) distance evaluations: sum over classes of |I_d| * L_d.
    pub distance_evaluations: u64,
    /// Surviving center count per thing class that had voxels or centers.
    pub per_class_instance_counts: BTreeMap<u8, usize>,
    /// Thing classes whose voxels were assigned via the no-center policy.
    pub fallback_classes: Vec<u8>,
    /// Final number of issued instance IDs.
    pub total_ids: u32,
}

/// Index of the nearest center to a voxel, by squared distance; ties break
/// toward the lowest list index.
pub fn nearest_center(
    centers_of_class: &[InstanceCenter],
    idx: GridIndex,
    spec: &GridSpec,
) -> Result<usize> {
    if centers_of_class.is_empty() {
        return Err(Error::Validation(
            "nearest_center called with an empty center list".to_string(),
        ));
    }
    let p = spec.voxel_position(idx)?;
    let mut best = 0usize;
    let mut best_d = f64::INFINITY;
    for (l, c) in centers_of_class.iter().enumerate() {
        let d = (c.x - p[0]).powi(2) + (c.y - p[1]).powi(2) + (c.z - p[2]).powi(2);
        if d < best_d {
            best_d = d;
            best = l;
        }
    }
    Ok(best)
}

fn check_centers_are_things(phi: &[InstanceCenter], tax: &LabelTaxonomy) -> Result<()> {
    for c in phi {
        if !tax.is_thing(c.class_id) {
            return Err(Error::Validation(format!(
                "instance center carries class {} which is not a thing class",
                c.class_id
            )));
        }
    }
    Ok(())
}

pub fn nearest_assign(
    sem: &SemanticGrid,
    tax: &LabelTaxonomy,
    phi: &[InstanceCenter],
    cfg: &AssignConfig,
) -> Result<(PanopticGrid, AssignStats)> {
    check_centers_are_things(phi, tax)?;
    let spec = sem.spec;
    let n_s = tax.n_classes();

    // One deterministic pass: voxel index lists per class, in (i, j, k) order.
    let mut by_class: Vec<Vec<GridIndex>> = vec![Vec::new(); n_s];
    for ((i, j, k), &d) in sem.data.indexed_iter() {
        by_class[d as usize].push(GridIndex::new(i, j, k));
    }

    let mut pano = PanopticGrid::zeros(spec);
    let mut stats = AssignStats::default();
    let mut next_id: u32 = 1;

    for d in 1..n_s {
        let class_id = d as u8;
        let voxels = &by_class[d];
        match tax.kind(class_id) {
            Some(ClassKind::Stuff) => {
                if voxels.is_empty() {
                    continue;
                }
                for v in voxels {
                    pano.data[[v.i, v.j, v.k]] = next_id;
                }
                pano.id_to_class.insert(next_id, class_id);
                next_id += 1;
            }
            Some(ClassKind::Thing) => {
                let centers: Vec<InstanceCenter> = phi
                    .iter()
                    .filter(|c| c.class_id == class_id)
                    .copied()
                    .collect();
                let count = centers.len();
                if count > 0 || !voxels.is_empty() {
                    stats.per_class_instance_counts.insert(class_id, count);
                }
                if cfg.count_work {
                    stats.distance_evaluations += voxels.len() as u64 * count as u64;
                }
                if count > 0 {
                    let base = next_id;
                    let assigned: Vec<(GridIndex, u32)> = voxels
                        .par_iter()
                        .map(|&v| {
                            let l = nearest_center(&centers, v, &spec)?;
                            Ok((v, base + l as u32))
                        })
                        .collect::<Result<_>>()?;
                    for (v, id) in assigned {
                        pano.data[[v.i, v.j, v.k]] = id;
                    }
                    for l in 0..count {
                        pano.id_to_class.insert(base + l as u32, class_id);
                    }
                    next_id += count as u32;
                } else if !voxels.is_empty() {
                    stats.fallback_classes.push(class_id);
                    match cfg.no_center_policy {
                        NoCenterPolicy::SingleInstance => {
                            for v in voxels {
                                pano.data[[v.i, v.j, v.k]] = next_id;
                            }
                            pano.id_to_class.insert(next_id, class_id);
                            next_id += 1;
                        }
                        NoCenterPolicy::Void => {}
                    }
                }
            }
            _ => {
                return Err(Error::Taxonomy(format!(
                    "semantic grid references class {class_id} outside the taxonomy"
                )));
            }
        }
    }

    stats.total_ids = next_id - 1;
    Ok((pano, stats))
}

/// Reference implementation for differential testing: a per-voxel linear
/// scan over the full center list with identical tie and fallback rules,
/// no class partition or precomputed index lists.
pub fn nearest_assign_oracle(
    sem: &SemanticGrid,
    tax: &LabelTaxonomy,
    phi: &[InstanceCenter],
    cfg: &AssignConfig,
) -> Result<PanopticGrid> {
    check_centers_are_things(phi, tax)?;
    let spec = sem.spec;
    let n_s = tax.n_classes();

    // ID base per class, derived by replaying the allocation order.
    let mut class_has_voxels = vec![false; n_s];
    for &d in sem.data.iter() {
        class_has_voxels[d as usize] = true;
    }
    let mut pano = PanopticGrid::zeros(spec);
    let mut base = vec![0u32; n_s];
    let mut next_id: u32 = 1;
    for d in 1..n_s {
        let class_id = d as u8;
        base[d] = next_id;
        match tax.kind(class_id) {
            Some(ClassKind::Stuff) => {
                if class_has_voxels[d] {
                    pano.id_to_class.insert(next_id, class_id);
                    next_id += 1;
                }
            }
            Some(ClassKind::Thing) => {
                let count = phi.iter().filter(|c| c.class_id == class_id).count() as u32;
                if count > 0 {
                    for l in 0..count {
                        pano.id_to_class.insert(next_id + l, class_id);
                    }
                    next_id += count;
                } else if class_has_voxels[d]
                    && cfg.no_center_policy == NoCenterPolicy::SingleInstance
                {
                    pano.id_to_class.insert(next_id, class_id);
                    next_id += 1;
                }
            }
            _ => {
                return Err(Error::Taxonomy(format!(
                    "semantic grid references class {class_id} outside the taxonomy"
                )));
            }
        }
    }
    for ((i, j, k), &d) in sem.data.indexed_iter() {
        let class_id = d;
        let d = d as usize;
        if d == 0 {
            continue;
        }
        let id = match tax.kind(class_id).unwrap() {
            ClassKind::Free => 0,
            ClassKind::Stuff => base[d],
            ClassKind::Thing => {
                let p = spec.voxel_position(GridIndex::new(i, j, k))?;
                let mut best: Option<(usize, f64)> = None;
                let mut l = 0usize;
                for c in phi.iter() {
                    if c.class_id != class_id {
                        continue;
                    }
                    let dist =
                        (c.x - p[0]).powi(2) + (c.y - p[1]).powi(2) + (c.z - p[2]).powi(2);
                    if best.is_none_or(|(_, bd)| dist < bd) {
                        best = Some((l, dist));
                    }
                    l += 1;
                }
                match best {
                    Some((l, _)) => base[d] + l as u32,
                    None => match cfg.no_center_policy {
                        NoCenterPolicy::SingleInstance => base[d],
                        NoCenterPolicy::Void => 0,
                    },
                }
            }
        };
        if id != 0 {
            pano.data[[i, j, k]] = id;
        }
    }
    Ok(pano)
}

/// Semantic input to a frame: either a decoded grid or raw BEV logits.
pub enum SemInput {
    Grid(SemanticGrid),
    Logits(BEVOccLogits),
}

/// Everything produced by one frame of panoptic processing.
pub struct FrameOutput {
    pub sem: SemanticGrid,
    pub pano: PanopticGrid,
    pub centers: Vec<InstanceCenter>,
    pub stats: AssignStats,
    /// Wall-clock stage timings in microseconds.
    pub c2h_us: u64,
    pub propose_us: u64,
    pub assign_us: u64,
}

/// Full pipeline for one frame: optional channel-to-height, center proposal,
/// nearest assignment.
pub fn process_frame(
    input: SemInput,
    heat: &CenterHeatmap,
    reg: &RegressionField,
    spec: &GridSpec,
    tax: &LabelTaxonomy,
    proposal_cfg: &ProposalConfig,
    assign_cfg: &AssignConfig,
) -> Result<FrameOutput> {
    let t0 = std::time::Instant::now();
    let sem = match input {
        SemInput::Grid(g) => {
            if g.spec != *spec {
                return Err(Error::Shape(format!(
                    "semantic grid spec {:?} does not match pipeline spec {:?}",
                    g.spec, spec
                )));
            }
            g
        }
        SemInput::Logits(l) => l.channel_to_height(tax)?,
    };
    let c2h_us = t0.elapsed().as_micros() as u64;

    let heat_dim = heat.data.dim();
    if (heat_dim.0, heat_dim.1) != (spec.h, spec.w) || heat_dim.2 != tax.c_inst() {
        return Err(Error::Shape(format!(
            "heatmap shape {:?} does not match spec ({}, {}) with {} thing channels",
            heat_dim,
            spec.h,
            spec.w,
            tax.c_inst()
        )));
    }
    let reg_dim = reg.data.dim();
    if (reg_dim.0, reg_dim.1, reg_dim.2) != (spec.h, spec.w, 3) {
        return Err(Error::Shape(format!(
            "regression shape {:?} does not match spec ({}, {}, 3)",
            reg_dim, spec.h, spec.w
        )));
    }

    let t1 = std::time::Instant::now();
    let centers = proposal::propose(heat, reg, spec, tax, proposal_cfg)?;
    let propose_us = t1.elapsed().as_micros() as u64;

    let t2 = std::time::Instant::now();
    let (pano, stats) = nearest_assign(&sem, tax, &centers, assign_cfg)?;
    let assign_us = t2.elapsed().as_micros() as u64;

    Ok(FrameOutput {
        sem,
        pano,
        centers,
        stats,
        c2h_us,
        propose_us,
        assign_us,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{ClassDef, TaxonomyConfig};
    use ndarray::Array3;

    fn tax3() -> LabelTaxonomy {
        LabelTaxonomy::from_config(TaxonomyConfig {
            classes: vec![
                ClassDef { id: 0, name: "free".into(), kind: ClassKind::Free },
                ClassDef { id: 1, name: "car".into(), kind: ClassKind::Thing },
                ClassDef { id: 2, name: "pedestrian".into(), kind: ClassKind::Thing },
                ClassDef { id: 3, name: "ground".into(), kind: ClassKind::Stuff },
            ],
        })
        .unwrap()
    }

    fn center(x: f64, y: f64, z: f64, class_id: u8) -> InstanceCenter {
        InstanceCenter { x, y, z, class_id, score: 1.0 }
    }

    #[test]
    fn nearest_center_singleton_and_tiebreak() {
        let spec = GridSpec::new(8, 8, 4, 0.4, 0.4, 0.4).unwrap();
        let one = [center(0.8, 0.0, 0.0, 1)];
        assert_eq!(nearest_center(&one, GridIndex::new(7, 7, 3), &spec).unwrap(), 0);

        let two = [center(0.8, 0.0, 0.0, 1), center(4.0, 0.0, 0.0, 1)];
        // voxel at x = 1.2: distance 0.4 vs 2.8
        assert_eq!(nearest_center(&two, GridIndex::new(3, 0, 0), &spec).unwrap(), 0);

        // exact equidistance needs binary-representable sizes
        let spec2 = GridSpec::new(8, 8, 4, 0.5, 0.5, 0.5).unwrap();
        let two2 = [center(1.0, 0.0, 0.0, 1), center(5.0, 0.0, 0.0, 1)];
        assert_eq!(nearest_center(&two2, GridIndex::new(6, 0, 0), &spec2).unwrap(), 0);

        assert!(nearest_center(&[], GridIndex::new(0, 0, 0), &spec).is_err());
    }

    #[test]
    fn stuff_class_gets_single_id() {
        let tax = tax3();
        let spec = GridSpec::new(4, 4, 2, 0.4, 0.4, 0.4).unwrap();
        let mut sem = SemanticGrid::zeros(spec, &tax);
        for n in 0..10 {
            sem.data[[n / 4, n % 4, 0]] = 3;
        }
        let (pano, stats) = nearest_assign(&sem, &tax, &[], &AssignConfig::default()).unwrap();
        assert_eq!(stats.total_ids, 1);
        let assigned = pano.data.iter().filter(|&&v| v == 1).count();
        assert_eq!(assigned, 10);
        assert_eq!(pano.id_to_class.get(&1), Some(&3));
    }

    #[test]
    fn two_centers_split_matches_oracle() {
        let tax = tax3();
        let spec = GridSpec::new(4, 4, 2, 0.4, 0.4, 0.4).unwrap();
        let mut sem = SemanticGrid::zeros(spec, &tax);
        for i in 0..4 {
            sem.data[[i, 1, 0]] = 1;
        }
        let phi = [center(0.4, 0.4, 0.0, 1), center(2.8, 0.4, 0.0, 1)];
        let (pano, _) = nearest_assign(&sem, &tax, &phi, &AssignConfig::default()).unwrap();
        let oracle = nearest_assign_oracle(&sem, &tax, &phi, &AssignConfig::default()).unwrap();
        assert_eq!(pano.data, oracle.data);
        assert_eq!(pano.id_to_class, oracle.id_to_class);
        // i in {0, 1} nearer first center at x=0.4; midpoint 1.6 -> i<=4? hand check:
        // positions 0.0, 0.4, 0.8, 1.2; split at x=1.6 so all nearer first center
        assert_eq!(pano.data[[0, 1, 0]], 1);
        assert_eq!(pano.data[[3, 1, 0]], 1);
    }

    #[test]
    fn fallback_single_instance_policy() {
        let tax = tax3();
        let spec = GridSpec::new(4, 4, 2, 0.4, 0.4, 0.4).unwrap();
        let mut sem = SemanticGrid::zeros(spec, &tax);
        sem.data[[1, 1, 0]] = 2;
        sem.data[[1, 2, 0]] = 2;
        let (pano, stats) = nearest_assign(&sem, &tax, &[], &AssignConfig::default()).unwrap();
        assert_eq!(stats.fallback_classes, vec![2]);
        assert_eq!(pano.data[[1, 1, 0]], pano.data[[1, 2, 0]]);
        assert_ne!(pano.data[[1, 1, 0]], 0);

        let cfg = AssignConfig { no_center_policy: NoCenterPolicy::Void, count_work: true };
        let (pano, stats) = nearest_assign(&sem, &tax, &[], &cfg).unwrap();
        assert_eq!(stats.fallback_classes, vec![2]);
        assert_eq!(pano.data[[1, 1, 0]], 0);
        assert_eq!(stats.total_ids, 0);
    }

    #[test]
    fn ids_are_compact_and_class_consistent() {
        let tax = tax3();
        let spec = GridSpec::new(6, 6, 2, 0.4, 0.4, 0.4).unwrap();
        let mut sem = SemanticGrid::zeros(spec, &tax);
        sem.data[[0, 0, 0]] = 1;
        sem.data[[5, 5, 0]] = 1;
        sem.data[[2, 2, 0]] = 2;
        for j in 0..6 {
            sem.data[[4, j, 1]] = 3;
        }
        let phi = [center(0.0, 0.0, 0.0, 1), center(2.0, 2.0, 0.0, 1)];
        let (pano, stats) = nearest_assign(&sem, &tax, &phi, &AssignConfig::default()).unwrap();
        // IDs 1..total_ids all present in the map, no gaps
        let ids: Vec<u32> = pano.id_to_class.keys().copied().collect();
        assert_eq!(ids, (1..=stats.total_ids).collect::<Vec<_>>());
        assert!(pano.validate(Some(&sem), &tax).is_empty());
    }

    #[test]
    fn rejects_stuff_class_center() {
        let tax = tax3();
        let spec = GridSpec::new(2, 2, 1, 0.4, 0.4, 0.4).unwrap();
        let sem = SemanticGrid::zeros(spec, &tax);
        let phi = [center(0.0, 0.0, 0.0, 3)];
        assert!(nearest_assign(&sem, &tax, &phi, &AssignConfig::default()).is_err());
    }

    #[test]
    fn work_count_is_class_partitioned() {
        let tax = tax3();
        let spec = GridSpec::new(4, 4, 2, 0.4, 0.4, 0.4).unwrap();
        let mut sem = SemanticGrid::zeros(spec, &tax);
        // 5 voxels of class 1, 3 voxels of class 2
        for n in 0..5 {
            sem.data[[n / 4, n % 4, 0]] = 1;
        }
        for n in 0..3 {
            sem.data[[n, 3, 1]] = 2;
        }
        let phi = [
            center(0.0, 0.0, 0.0, 1),
            center(1.0, 1.0, 0.0, 1),
            center(0.5, 1.0, 0.0, 2),
        ];
        let (_, stats) = nearest_assign(&sem, &tax, &phi, &AssignConfig::default()).unwrap();
        // class-aware: 5*2 + 3*1 = 13; class-agnostic would be 8*3 = 24
        assert_eq!(stats.distance_evaluations, 13);
        let total_voxels: u64 = 8;
        let total_centers: u64 = 3;
        assert!(stats.distance_evaluations < total_voxels * total_centers);
    }

    #[test]
    fn empty_grid_stays_zero() {
        let tax = tax3();
        let spec = GridSpec::new(4, 4, 2, 0.4, 0.4, 0.4).unwrap();
        let sem = SemanticGrid::zeros(spec, &tax);
        let phi = [center(0.4, 0.4, 0.4, 1)];
        let (pano, stats) = nearest_assign(&sem, &tax, &phi, &AssignConfig::default()).unwrap();
        assert!(pano.data.iter().all(|&v| v == 0));
        // centers exist but no voxels: the class consumes IDs per the algorithm
        assert_eq!(stats.distance_evaluations, 0);
        let oracle = nearest_assign_oracle(&sem, &tax, &phi, &AssignConfig::default()).unwrap();
        assert!(oracle.data.iter().all(|&v| v == 0));
    }

    #[test]
    fn process_frame_all_zero_heat_falls_back() {
        let tax = tax3();
        let spec = GridSpec::new(4, 4, 2, 0.4, 0.4, 0.4).unwrap();
        let mut sem = SemanticGrid::zeros(spec, &tax);
        sem.data[[1, 1, 0]] = 1;
        sem.data[[2, 2, 0]] = 2;
        let heat = CenterHeatmap::zeros(&spec, &tax);
        let reg = RegressionField::zeros(&spec);
        let out = process_frame(
            SemInput::Grid(sem),
            &heat,
            &reg,
            &spec,
            &tax,
            &ProposalConfig::default(),
            &AssignConfig::default(),
        )
        .unwrap();
        assert_eq!(out.stats.fallback_classes, vec![1, 2]);
    }

    #[test]
    fn process_frame_rejects_shape_mismatch() {
        let tax = tax3();
        let spec = GridSpec::new(4, 4, 2, 0.4, 0.4, 0.4).unwrap();
        let sem = SemanticGrid::zeros(spec, &tax);
        let heat = CenterHeatmap::new(Array3::zeros((3, 4, 2)));
        let reg = RegressionField::zeros(&spec);
        let r = process_frame(
            SemInput::Grid(sem),
            &heat,
            &reg,
            &spec,
            &tax,
            &ProposalConfig::default(),
            &AssignConfig::default(),
        );
        assert!(matches!(r, Err(Error::Shape(_))));
    }
}

//! Voxel-level semantic (mIoU) and panoptic (PQ) evaluation.
//!
//! PQ follows the standard definition: segments of the same class match at
//! strict voxel IoU > 0.5, which makes matches unique; per class
//! `PQ = sum IoU / (TP + FP/2 + FN/2)`. Stuff classes form one segment per
//! class. Free voxels are excluded by default.

use std::collections::BTreeMap;

use ndarray::Array2;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::geometry::{ClassKind, LabelTaxonomy};
use crate::tensors::{PanopticGrid, SemanticGrid};

/// Rows are ground-truth classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfusionMatrix {
    pub counts: Array2<u64>,
}

impl ConfusionMatrix {
    pub fn from_grids(pred: &SemanticGrid, gt: &SemanticGrid) -> Result<Self> {
        if pred.data.dim() != gt.data.dim() {
            return Err(Error::Shape(format!(
                "semantic grids differ in shape: {:?} vs {:?}",
                pred.data.dim(),
                gt.data.dim()
            )));
        }
        let n = pred.n_classes.max(gt.n_classes) as usize;
        let mut counts = Array2::<u64>::zeros((n, n));
        for (&p, &g) in pred.data.iter().zip(gt.data.iter()) {
            counts[[g as usize, p as usize]] += 1;
        }
        Ok(ConfusionMatrix { counts })
    }

    pub fn total(&self) -> u64 {
        self.counts.sum()
    }

    /// (TP, FP, FN) for one class.
    pub fn class_counts(&self, c: usize) -> (u64, u64, u64) {
        let tp = self.counts[[c, c]];
        let fp = self.counts.column(c).sum() - tp;
        let fn_ = self.counts.row(c).sum() - tp;
        (tp, fp, fn_)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct MiouReport {
    /// Per-class IoU; `None` for classes absent from both grids (or excluded).
    pub per_class: Vec<Option<f64>>,
    pub mean: f64,
}

/// Per-class voxel IoU and its mean over classes present in either grid.
pub fn miou(pred: &SemanticGrid, gt: &SemanticGrid, ignore_free: bool) -> Result<MiouReport> {
    let cm = ConfusionMatrix::from_grids(pred, gt)?;
    let n = cm.counts.dim().0;
    let mut per_class = vec![None; n];
    let mut sum = 0.0;
    let mut counted = 0usize;
    for c in 0..n {
        if ignore_free && c == 0 {
            continue;
        }
        let (tp, fp, fn_) = cm.class_counts(c);
        let denom = tp + fp + fn_;
        if denom == 0 {
            continue;
        }
        let iou = tp as f64 / denom as f64;
        per_class[c] = Some(iou);
        sum += iou;
        counted += 1;
    }
    let mean = if counted > 0 { sum / counted as f64 } else { 0.0 };
    Ok(MiouReport { per_class, mean })
}

#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct PQClassEntry {
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub iou_sum: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct PQReport {
    pub per_class: BTreeMap<u8, PQClassEntry>,
    /// Mean PQ over classes present in GT or prediction.
    pub pq: f64,
    pub pq_things: f64,
    pub pq_stuff: f64,
}

/// Segment key inside one panoptic grid: things by instance ID, stuff by class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
enum SegKey {
    Thing(u32),
    Stuff(u8),
}

fn segment_map(
    grid: &PanopticGrid,
    tax: &LabelTaxonomy,
) -> Result<(BTreeMap<SegKey, (u8, u64)>, Vec<Option<SegKey>>)> {
    // per-voxel key in flat iteration order, plus per-segment (class, size)
    let mut sizes: BTreeMap<SegKey, (u8, u64)> = BTreeMap::new();
    let mut keys = Vec::with_capacity(grid.data.len());
    for &id in grid.data.iter() {
        if id == 0 {
            keys.push(None);
            continue;
        }
        let class = *grid.id_to_class.get(&id).ok_or_else(|| {
            Error::Validation(format!("instance ID {id} has no class mapping"))
        })?;
        let key = match tax.kind(class) {
            Some(ClassKind::Thing) => SegKey::Thing(id),
            Some(ClassKind::Stuff) => SegKey::Stuff(class),
            _ => {
                return Err(Error::Validation(format!(
                    "instance ID {id} maps to class {class} which is neither thing nor stuff"
                )));
            }
        };
        sizes.entry(key).or_insert((class, 0)).1 += 1;
        keys.push(Some(key));
    }
    Ok((sizes, keys))
}

/// Standard panoptic quality between predicted and ground-truth grids.
pub fn panoptic_quality(
    pred: &PanopticGrid,
    gt: &PanopticGrid,
    tax: &LabelTaxonomy,
) -> Result<PQReport> {
    if pred.data.dim() != gt.data.dim() {
        return Err(Error::Shape(format!(
            "panoptic grids differ in shape: {:?} vs {:?}",
            pred.data.dim(),
            gt.data.dim()
        )));
    }
    let (pred_sizes, pred_keys) = segment_map(pred, tax)?;
    let (gt_sizes, gt_keys) = segment_map(gt, tax)?;

    let mut inter: BTreeMap<(SegKey, SegKey), u64> = BTreeMap::new();
    for (p, g) in pred_keys.into_iter().zip(gt_keys) {
        if let (Some(p), Some(g)) = (p, g) {
            *inter.entry((p, g)).or_insert(0) += 1;
        }
    }

    let mut per_class: BTreeMap<u8, PQClassEntry> = BTreeMap::new();
    for &(class, _) in pred_sizes.values().chain(gt_sizes.values()) {
        per_class.entry(class).or_default();
    }

    let mut gt_matched: BTreeMap<SegKey, bool> =
        gt_sizes.keys().map(|&k| (k, false)).collect();
    let mut pred_matched: BTreeMap<SegKey, bool> =
        pred_sizes.keys().map(|&k| (k, false)).collect();

    for (&(pk, gk), &i) in &inter {
        let (pc, ps) = pred_sizes[&pk];
        let (gc, gs) = gt_sizes[&gk];
        if pc != gc {
            continue;
        }
        let union = ps + gs - i;
        // strict > 0.5 via integer cross-multiplication
        if 2 * i > union {
            let entry = per_class.get_mut(&pc).unwrap();
            entry.tp += 1;
            entry.iou_sum += i as f64 / union as f64;
            // IoU > 0.5 matches are unique per segment; assert rather than assume
            assert!(!gt_matched[&gk], "GT segment matched twice");
            assert!(!pred_matched[&pk], "predicted segment matched twice");
            gt_matched.insert(gk, true);
            pred_matched.insert(pk, true);
        }
    }
    for (k, matched) in &gt_matched {
        if !matched {
            per_class.get_mut(&gt_sizes[k].0).unwrap().fn_ += 1;
        }
    }
    for (k, matched) in &pred_matched {
        if !matched {
            per_class.get_mut(&pred_sizes[k].0).unwrap().fp += 1;
        }
    }

    let mut sum = 0.0;
    let mut n = 0usize;
    let mut sum_things = 0.0;
    let mut n_things = 0usize;
    let mut sum_stuff = 0.0;
    let mut n_stuff = 0usize;
    for (&class, entry) in per_class.iter_mut() {
        let denom = entry.tp as f64 + 0.5 * entry.fp as f64 + 0.5 * entry.fn_ as f64;
        if denom > 0.0 {
            entry.pq = entry.iou_sum / denom;
            entry.rq = entry.tp as f64 / denom;
        }
        if entry.tp > 0 {
            entry.sq = entry.iou_sum / entry.tp as f64;
        }
        sum += entry.pq;
        n += 1;
        match tax.kind(class) {
            Some(ClassKind::Thing) => {
                sum_things += entry.pq;
                n_things += 1;
            }
            _ => {
                sum_stuff += entry.pq;
                n_stuff += 1;
            }
        }
    }
    let mean = |s: f64, c: usize| if c > 0 { s / c as f64 } else { 0.0 };
    Ok(PQReport {
        per_class,
        pq: mean(sum, n),
        pq_things: mean(sum_things, n_things),
        pq_stuff: mean(sum_stuff, n_stuff),
    })
}

/// True iff a bijection over nonzero instance IDs makes the grids identical
/// while preserving the ID-to-class maps.
pub fn compare_panoptic_exact(pred: &PanopticGrid, gt: &PanopticGrid) -> Result<bool> {
    if pred.data.dim() != gt.data.dim() {
        return Err(Error::Shape(format!(
            "panoptic grids differ in shape: {:?} vs {:?}",
            pred.data.dim(),
            gt.data.dim()
        )));
    }
    let mut fwd: BTreeMap<u32, u32> = BTreeMap::new();
    let mut rev: BTreeMap<u32, u32> = BTreeMap::new();
    for (&p, &g) in pred.data.iter().zip(gt.data.iter()) {
        if (p == 0) != (g == 0) {
            return Ok(false);
        }
        if p == 0 {
            continue;
        }
        if *fwd.entry(p).or_insert(g) != g || *rev.entry(g).or_insert(p) != p {
            return Ok(false);
        }
        if pred.id_to_class.get(&p) != gt.id_to_class.get(&g) {
            return Ok(false);
        }
    }
    Ok(true)
}

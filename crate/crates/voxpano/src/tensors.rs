//! Dense containers for network-output and ground-truth tensors, plus the
//! channel-to-height decoding of flattened BEV logits.

use std::collections::BTreeMap;

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};
use crate::geometry::{ClassKind, GridSpec, LabelTaxonomy};

/// Per-voxel semantic class labels, `h x w x z`.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticGrid {
    pub data: Array3<u8>,
    pub spec: GridSpec,
    /// Class count of the governing taxonomy; every voxel value must be below it.
    pub n_classes: u8,
}

impl SemanticGrid {
    pub fn new(data: Array3<u8>, spec: GridSpec, tax: &LabelTaxonomy) -> Result<Self> {
        let grid = SemanticGrid {
            data,
            spec,
            n_classes: tax.n_classes() as u8,
        };
        grid.check_shape()?;
        Ok(grid)
    }

    pub fn zeros(spec: GridSpec, tax: &LabelTaxonomy) -> Self {
        SemanticGrid {
            data: Array3::zeros((spec.h, spec.w, spec.z)),
            spec,
            n_classes: tax.n_classes() as u8,
        }
    }

    fn check_shape(&self) -> Result<()> {
        let got = self.data.dim();
        if got != (self.spec.h, self.spec.w, self.spec.z) {
            return Err(Error::Shape(format!(
                "semantic grid has shape {:?}, spec requires ({}, {}, {})",
                got, self.spec.h, self.spec.w, self.spec.z
            )));
        }
        Ok(())
    }

    pub fn validate(&self) -> Vec<String> {
        let mut out = Vec::new();
        if let Err(e) = self.check_shape() {
            out.push(e.to_string());
            return out;
        }
        for ((i, j, k), &v) in self.data.indexed_iter() {
            if v >= self.n_classes {
                out.push(format!(
                    "semantic value {v} at ({i}, {j}, {k}) >= class count {}",
                    self.n_classes
                ));
            }
        }
        out
    }
}

/// Flattened BEV occupancy logits, `h x w x (z * n_s)`, z-major channel
/// layout: channel index = `k * n_s + class`.
#[derive(Debug, Clone, PartialEq)]
pub struct BEVOccLogits {
    pub data: Array3<f32>,
    pub spec: GridSpec,
    pub n_classes: u8,
}

impl BEVOccLogits {
    pub fn new(data: Array3<f32>, spec: GridSpec, tax: &LabelTaxonomy) -> Result<Self> {
        let n_s = tax.n_classes();
        let (h, w, c) = data.dim();
        if (h, w) != (spec.h, spec.w) {
            return Err(Error::Shape(format!(
                "logits BEV shape ({h}, {w}) does not match spec ({}, {})",
                spec.h, spec.w
            )));
        }
        if c % n_s != 0 {
            return Err(Error::Shape(format!(
                "logits channel count {c} is not divisible by class count {n_s}"
            )));
        }
        if c / n_s != spec.z {
            return Err(Error::Shape(format!(
                "logits imply z = {} but spec has z = {}",
                c / n_s,
                spec.z
            )));
        }
        Ok(BEVOccLogits {
            data,
            spec,
            n_classes: n_s as u8,
        })
    }

    /// Reinterprets the channel axis as `(z, n_s)` and takes the per-voxel
    /// argmax over class scores; ties break toward the lowest class ID.
    pub fn channel_to_height(&self, tax: &LabelTaxonomy) -> Result<SemanticGrid> {
        let n_s = self.n_classes as usize;
        let (h, w, _) = self.data.dim();
        let mut out = Array3::<u8>::zeros((h, w, self.spec.z));
        for i in 0..h {
            for j in 0..w {
                for k in 0..self.spec.z {
                    let base = k * n_s;
                    let mut best = 0usize;
                    let mut best_v = self.data[[i, j, base]];
                    for c in 1..n_s {
                        let v = self.data[[i, j, base + c]];
                        if v > best_v {
                            best_v = v;
                            best = c;
                        }
                    }
                    out[[i, j, k]] = best as u8;
                }
            }
        }
        SemanticGrid::new(out, self.spec, tax)
    }

    pub fn validate(&self) -> Vec<String> {
        let mut out = Vec::new();
        let c = self.data.dim().2;
        let n_s = self.n_classes as usize;
        if c % n_s != 0 {
            out.push(format!(
                "logits channel count {c} not divisible by class count {n_s}"
            ));
        } else if c / n_s != self.spec.z {
            out.push(format!(
                "logits imply z = {} but spec has z = {}",
                c / n_s,
                self.spec.z
            ));
        }
        if self.data.iter().any(|v| !v.is_finite()) {
            out.push("logits contain non-finite values".to_string());
        }
        out
    }
}

/// Class-aware center heatmap, `h x w x c_inst`, scores in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CenterHeatmap {
    pub data: Array3<f32>,
}

impl CenterHeatmap {
    pub fn new(data: Array3<f32>) -> Self {
        CenterHeatmap { data }
    }

    pub fn zeros(spec: &GridSpec, tax: &LabelTaxonomy) -> Self {
        CenterHeatmap {
            data: Array3::zeros((spec.h, spec.w, tax.c_inst())),
        }
    }

    pub fn validate(&self, spec: &GridSpec, tax: &LabelTaxonomy) -> Vec<String> {
        let mut out = Vec::new();
        let (h, w, c) = self.data.dim();
        if (h, w) != (spec.h, spec.w) {
            out.push(format!(
                "heatmap BEV shape ({h}, {w}) does not match spec ({}, {})",
                spec.h, spec.w
            ));
        }
        if c != tax.c_inst() {
            out.push(format!(
                "heatmap has {c} channels, taxonomy has {} thing classes",
                tax.c_inst()
            ));
        }
        for ((i, j, ch), &v) in self.data.indexed_iter() {
            if !(0.0..=1.0).contains(&v) {
                out.push(format!("heatmap value {v} at ({i}, {j}, ch {ch}) outside [0, 1]"));
            }
        }
        out
    }
}

/// Center regression field, `h x w x 3`.
///
/// Channel 0 is the x offset ratio, 1 the y offset ratio, 2 the absolute
/// height ratio over the vertical extent.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionField {
    pub data: Array3<f32>,
}

impl RegressionField {
    pub fn new(data: Array3<f32>) -> Self {
        RegressionField { data }
    }

    pub fn zeros(spec: &GridSpec) -> Self {
        RegressionField {
            data: Array3::zeros((spec.h, spec.w, 3)),
        }
    }

    pub fn validate(&self, spec: &GridSpec) -> Vec<String> {
        let mut out = Vec::new();
        let (h, w, c) = self.data.dim();
        if (h, w) != (spec.h, spec.w) {
            out.push(format!(
                "regression BEV shape ({h}, {w}) does not match spec ({}, {})",
                spec.h, spec.w
            ));
        }
        if c != 3 {
            out.push(format!("regression field has {c} channels, expected 3"));
        }
        if self.data.iter().any(|v| !v.is_finite()) {
            out.push("regression field contains non-finite values".to_string());
        }
        out
    }
}

/// Per-voxel instance IDs with the ID-to-class map, `h x w x z`.
///
/// ID 0 marks free/void voxels and never appears in `id_to_class`.
#[derive(Debug, Clone, PartialEq)]
pub struct PanopticGrid {
    pub data: Array3<u32>,
    pub id_to_class: BTreeMap<u32, u8>,
    pub spec: GridSpec,
}

impl PanopticGrid {
    pub fn zeros(spec: GridSpec) -> Self {
        PanopticGrid {
            data: Array3::zeros((spec.h, spec.w, spec.z)),
            id_to_class: BTreeMap::new(),
            spec,
        }
    }

    /// Checks the grid's own invariants and, against `sem`, class consistency.
    pub fn validate(&self, sem: Option<&SemanticGrid>, tax: &LabelTaxonomy) -> Vec<String> {
        let mut out = Vec::new();
        let got = self.data.dim();
        if got != (self.spec.h, self.spec.w, self.spec.z) {
            out.push(format!(
                "panoptic grid has shape {:?}, spec requires ({}, {}, {})",
                got, self.spec.h, self.spec.w, self.spec.z
            ));
            return out;
        }
        for ((i, j, k), &id) in self.data.indexed_iter() {
            if id == 0 {
                if let Some(sem) = sem {
                    let c = sem.data[[i, j, k]];
                    if tax.kind(c) != Some(ClassKind::Free) {
                        out.push(format!(
                            "ID 0 at ({i}, {j}, {k}) but semantic class {c} is not free"
                        ));
                    }
                }
            } else {
                match self.id_to_class.get(&id) {
                    None => out.push(format!("ID {id} at ({i}, {j}, {k}) has no class mapping")),
                    Some(&c) => {
                        if let Some(sem) = sem {
                            let s = sem.data[[i, j, k]];
                            if s != c {
                                out.push(format!(
                                    "ID {id} maps to class {c} but semantic grid has {s} at ({i}, {j}, {k})"
                                ));
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// The ID/class map as a two-column array for serialization.
    pub fn classes_table(&self) -> Array2<u32> {
        let mut table = Array2::<u32>::zeros((self.id_to_class.len(), 2));
        for (row, (&id, &class)) in self.id_to_class.iter().enumerate() {
            table[[row, 0]] = id;
            table[[row, 1]] = class as u32;
        }
        table
    }

    pub fn classes_from_table(table: &Array2<u32>) -> Result<BTreeMap<u32, u8>> {
        if table.dim().1 != 2 {
            return Err(Error::Shape(format!(
                "pano_classes table must have 2 columns, got {}",
                table.dim().1
            )));
        }
        let mut map = BTreeMap::new();
        for row in table.rows() {
            if row[1] > u8::MAX as u32 {
                return Err(Error::Validation(format!(
                    "class {} in pano_classes exceeds the 8-bit class range",
                    row[1]
                )));
            }
            if map.insert(row[0], row[1] as u8).is_some() {
                return Err(Error::Validation(format!(
                    "duplicate instance ID {} in pano_classes",
                    row[0]
                )));
            }
        }
        Ok(map)
    }
}

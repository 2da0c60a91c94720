//! Voxel lattice geometry and the semantic class taxonomy.
//!
//! All positions are grid-local: the origin sits at the lattice's minimum
//! corner and a voxel index maps to `index * voxel_size` along each axis.
//! No world-frame offset is applied anywhere in the crate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Geometry of the regular voxel lattice.
///
/// `h` counts voxels along axis 0 (x), `w` along axis 1 (y), `z` along the
/// vertical axis 2. The default profile is the 200x200x16 grid of
/// Occ3D-nuScenes with 0.4 m cubic voxels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub h: usize,
    pub w: usize,
    pub z: usize,
    pub dx: f64,
    pub dy: f64,
    pub dz: f64,
}

impl GridSpec {
    pub fn new(h: usize, w: usize, z: usize, dx: f64, dy: f64, dz: f64) -> Result<Self> {
        let spec = GridSpec { h, w, z, dx, dy, dz };
        spec.validate()?;
        Ok(spec)
    }

    /// 200x200x16 lattice with 0.4 m cubic voxels (80 m x 80 m x 6.4 m).
    pub fn occ3d_nuscenes() -> Self {
        GridSpec {
            h: 200,
            w: 200,
            z: 16,
            dx: 0.4,
            dy: 0.4,
            dz: 0.4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.h < 1 || self.w < 1 || self.z < 1 {
            return Err(Error::Validation(format!(
                "grid dims must be >= 1, got {}x{}x{}",
                self.h, self.w, self.z
            )));
        }
        if !(self.dx > 0.0 && self.dy > 0.0 && self.dz > 0.0) {
            return Err(Error::Validation(format!(
                "voxel sizes must be > 0, got ({}, {}, {})",
                self.dx, self.dy, self.dz
            )));
        }
        Ok(())
    }

    /// Vertical perception extent in meters: `z * dz`.
    pub fn r_z(&self) -> f64 {
        self.z as f64 * self.dz
    }

    pub fn contains(&self, idx: GridIndex) -> bool {
        idx.i < self.h && idx.j < self.w && idx.k < self.z
    }

    /// Grid-local position of a voxel: `(dx*i, dy*j, dz*k)`.
    pub fn voxel_position(&self, idx: GridIndex) -> Result<[f64; 3]> {
        if !self.contains(idx) {
            return Err(Error::OutOfBounds(format!(
                "voxel ({}, {}, {}) outside {}x{}x{} grid",
                idx.i, idx.j, idx.k, self.h, self.w, self.z
            )));
        }
        Ok([
            self.dx * idx.i as f64,
            self.dy * idx.j as f64,
            self.dz * idx.k as f64,
        ])
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.h, self.w, self.z)
    }
}

/// Index triple addressing one voxel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GridIndex {
    pub i: usize,
    pub j: usize,
    pub k: usize,
}

impl GridIndex {
    pub fn new(i: usize, j: usize, k: usize) -> Self {
        GridIndex { i, j, k }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassKind {
    Free,
    Stuff,
    Thing,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassDef {
    pub id: u8,
    pub name: String,
    pub kind: ClassKind,
}

/// Config-file form of the taxonomy: `{"classes": [{id, name, kind}, ...]}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaxonomyConfig {
    pub classes: Vec<ClassDef>,
}

/// Semantic class taxonomy with the thing/stuff/free split.
///
/// Class IDs are dense `0..n_s` with ID 0 reserved for free space. Thing
/// classes map bijectively onto heatmap channels `0..c_inst` in ID order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelTaxonomy {
    classes: Vec<ClassDef>,
    /// Class ID carried by each heatmap channel, in channel order.
    thing_channels: Vec<u8>,
    /// Inverse map: per class ID, the heatmap channel (things only).
    channel_by_class: Vec<Option<usize>>,
}

impl LabelTaxonomy {
    pub fn from_config(cfg: TaxonomyConfig) -> Result<Self> {
        let n = cfg.classes.len();
        if n == 0 || n > 256 {
            return Err(Error::Taxonomy(format!(
                "class count must be in 1..=256, got {n}"
            )));
        }
        for (idx, c) in cfg.classes.iter().enumerate() {
            if c.id as usize != idx {
                return Err(Error::Taxonomy(format!(
                    "class IDs must be listed densely in order; position {idx} has id {}",
                    c.id
                )));
            }
        }
        let mut names = std::collections::BTreeSet::new();
        for c in &cfg.classes {
            if !names.insert(c.name.as_str()) {
                return Err(Error::Taxonomy(format!("duplicate class name {:?}", c.name)));
            }
        }
        let free_ids: Vec<u8> = cfg
            .classes
            .iter()
            .filter(|c| c.kind == ClassKind::Free)
            .map(|c| c.id)
            .collect();
        if free_ids.len() != 1 || free_ids[0] != 0 {
            return Err(Error::Taxonomy(format!(
                "exactly one free class with ID 0 required, found free IDs {free_ids:?}"
            )));
        }
        let thing_channels: Vec<u8> = cfg
            .classes
            .iter()
            .filter(|c| c.kind == ClassKind::Thing)
            .map(|c| c.id)
            .collect();
        let mut channel_by_class = vec![None; n];
        for (ch, &cid) in thing_channels.iter().enumerate() {
            channel_by_class[cid as usize] = Some(ch);
        }
        Ok(LabelTaxonomy {
            classes: cfg.classes,
            thing_channels,
            channel_by_class,
        })
    }

    /// Standard nuScenes 17-class split: ID 0 free, 10 thing classes, 6 stuff.
    pub fn nuscenes_default() -> Self {
        let things = [
            "car",
            "truck",
            "bus",
            "trailer",
            "construction_vehicle",
            "pedestrian",
            "motorcycle",
            "bicycle",
            "traffic_cone",
            "barrier",
        ];
        let stuff = [
            "driveable_surface",
            "other_flat",
            "sidewalk",
            "terrain",
            "manmade",
            "vegetation",
        ];
        let mut classes = vec![ClassDef {
            id: 0,
            name: "free".to_string(),
            kind: ClassKind::Free,
        }];
        for name in things {
            classes.push(ClassDef {
                id: classes.len() as u8,
                name: name.to_string(),
                kind: ClassKind::Thing,
            });
        }
        for name in stuff {
            classes.push(ClassDef {
                id: classes.len() as u8,
                name: name.to_string(),
                kind: ClassKind::Stuff,
            });
        }
        LabelTaxonomy::from_config(TaxonomyConfig { classes }).expect("builtin profile is valid")
    }

    pub fn to_config(&self) -> TaxonomyConfig {
        TaxonomyConfig {
            classes: self.classes.clone(),
        }
    }

    /// Total semantic class count including free.
    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    /// Number of thing classes, which equals the heatmap channel count.
    pub fn c_inst(&self) -> usize {
        self.thing_channels.len()
    }

    pub fn classes(&self) -> &[ClassDef] {
        &self.classes
    }

    pub fn kind(&self, class_id: u8) -> Option<ClassKind> {
        self.classes.get(class_id as usize).map(|c| c.kind)
    }

    pub fn is_thing(&self, class_id: u8) -> bool {
        self.kind(class_id) == Some(ClassKind::Thing)
    }

    pub fn is_stuff(&self, class_id: u8) -> bool {
        self.kind(class_id) == Some(ClassKind::Stuff)
    }

    pub fn name(&self, class_id: u8) -> Option<&str> {
        self.classes.get(class_id as usize).map(|c| c.name.as_str())
    }

    /// Class ID carried by heatmap channel `ch`.
    pub fn class_of_channel(&self, ch: usize) -> Result<u8> {
        self.thing_channels.get(ch).copied().ok_or_else(|| {
            Error::Taxonomy(format!(
                "heatmap channel {ch} has no thing class (c_inst = {})",
                self.c_inst()
            ))
        })
    }

    /// Heatmap channel of a thing class.
    pub fn channel_of_class(&self, class_id: u8) -> Result<usize> {
        self.channel_by_class
            .get(class_id as usize)
            .copied()
            .flatten()
            .ok_or_else(|| {
                Error::Taxonomy(format!("class {class_id} is not a thing class"))
            })
    }

    pub fn thing_class_ids(&self) -> &[u8] {
        &self.thing_channels
    }
}

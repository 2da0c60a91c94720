//! Seedable synthetic urban-scene generator.
//!
//! Produces ground-truth grids, encoded targets, and (optionally noised)
//! observed tensors so the full pipeline is testable without a dataset or a
//! trained network. The RNG is ChaCha8 with one substream per purpose, so a
//! given (seed, noise level) pair is reproducible across platforms and the
//! base geometry is shared across noise levels of the same seed.

use std::path::{Path, PathBuf};

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{ClassKind, GridIndex, GridSpec, LabelTaxonomy};
use crate::npy::{self, NpyArray};
use crate::targets::{self, InstanceRecord, SigmaMode, TargetBundle};
use crate::tensors::{CenterHeatmap, PanopticGrid, RegressionField, SemanticGrid};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    /// Stddev of Gaussian noise added to the heatmap (clamped to [0, 1]).
    pub heat_sigma: f64,
    /// Stddev of Gaussian noise added to the regression field.
    pub reg_sigma: f64,
    /// Per-voxel probability of flipping a nonfree class to another nonfree class.
    pub flip_prob: f64,
}

impl NoiseConfig {
    pub fn none() -> Self {
        NoiseConfig {
            heat_sigma: 0.0,
            reg_sigma: 0.0,
            flip_prob: 0.0,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.heat_sigma == 0.0 && self.reg_sigma == 0.0 && self.flip_prob == 0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StuffLayer {
    pub class_id: u8,
    /// Height band [k_min, k_max] filled by this layer.
    pub k_min: usize,
    pub k_max: usize,
    /// Fraction of BEV pixels covered.
    pub coverage: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub seed: u64,
    pub n_instances: usize,
    /// Per-axis [min, max] voxel extents for thing cuboids.
    pub instance_size_range: [[usize; 2]; 3],
    pub stuff_layers: Vec<StuffLayer>,
    /// Minimum BEV gap between instance footprints, in pixels.
    pub min_separation: usize,
    /// Gaussian width of encoded heatmap targets, as a multiple of the
    /// footprint bounding-box diagonal.
    pub sigma_scale: f64,
    pub noise: NoiseConfig,
}

impl SceneConfig {
    /// Ground slab of the first stuff class plus cuboids of moderate size.
    pub fn default_for(tax: &LabelTaxonomy) -> Self {
        let ground = tax
            .classes()
            .iter()
            .find(|c| c.kind == ClassKind::Stuff)
            .map(|c| c.id);
        SceneConfig {
            seed: 0,
            n_instances: 10,
            instance_size_range: [[2, 8], [2, 8], [2, 6]],
            stuff_layers: ground
                .map(|class_id| {
                    vec![StuffLayer {
                        class_id,
                        k_min: 0,
                        k_max: 0,
                        coverage: 1.0,
                    }]
                })
                .unwrap_or_default(),
            min_separation: 2,
            // one sixth of the diagonal keeps the target peaked, the common
            // choice for centerness heads; a full-diagonal sigma leaves wide
            // near-threshold plateaus that noise turns into spurious peaks
            sigma_scale: 1.0 / 6.0,
            noise: NoiseConfig::none(),
        }
    }

    /// Clamps the instance size range to fit the grid extents.
    pub fn fit_to_grid(mut self, spec: &GridSpec) -> Self {
        for (axis, cap) in [spec.h, spec.w, spec.z].into_iter().enumerate() {
            let [lo, hi] = &mut self.instance_size_range[axis];
            *hi = (*hi).min(cap);
            *lo = (*lo).min(*hi);
        }
        self
    }

    pub fn validate(&self, spec: &GridSpec, tax: &LabelTaxonomy) -> Result<()> {
        if self.min_separation < 1 {
            return Err(Error::Validation(
                "min_separation must be >= 1".to_string(),
            ));
        }
        if self.sigma_scale <= 0.0 {
            return Err(Error::Validation(format!(
                "sigma_scale must be > 0, got {}",
                self.sigma_scale
            )));
        }
        if self.noise.heat_sigma < 0.0
            || self.noise.reg_sigma < 0.0
            || !(0.0..=1.0).contains(&self.noise.flip_prob)
        {
            return Err(Error::Validation(
                "noise parameters must be non-negative (flip_prob in [0, 1])".to_string(),
            ));
        }
        for (axis, [lo, hi]) in self.instance_size_range.iter().enumerate() {
            let cap = [spec.h, spec.w, spec.z][axis];
            if *lo < 1 || lo > hi || *hi > cap {
                return Err(Error::Validation(format!(
                    "instance size range [{lo}, {hi}] invalid for axis {axis} (grid extent {cap})"
                )));
            }
        }
        if self.n_instances > 0 && tax.c_inst() == 0 {
            return Err(Error::Validation(
                "cannot place thing instances with a taxonomy that has no thing classes"
                    .to_string(),
            ));
        }
        for layer in &self.stuff_layers {
            if !tax.is_stuff(layer.class_id) {
                return Err(Error::Validation(format!(
                    "stuff layer class {} is not a stuff class",
                    layer.class_id
                )));
            }
            if layer.k_max >= spec.z || layer.k_min > layer.k_max {
                return Err(Error::Validation(format!(
                    "stuff layer band [{}, {}] outside grid z extent {}",
                    layer.k_min, layer.k_max, spec.z
                )));
            }
            if !(0.0..=1.0).contains(&layer.coverage) {
                return Err(Error::Validation(format!(
                    "stuff coverage {} outside [0, 1]",
                    layer.coverage
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub sem_gt: SemanticGrid,
    pub pano_gt: PanopticGrid,
    pub instances: Vec<InstanceRecord>,
    pub targets: TargetBundle,
    pub observed_heat: CenterHeatmap,
    pub observed_reg: RegressionField,
    pub observed_sem: SemanticGrid,
}

// RNG substream purposes.
const STREAM_GEOMETRY: u64 = 0;
const STREAM_HEAT_NOISE: u64 = 1;
const STREAM_REG_NOISE: u64 = 2;
const STREAM_FLIPS: u64 = 3;

fn substream(seed: u64, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(purpose);
    rng
}

struct Placement {
    class_id: u8,
    i0: usize,
    j0: usize,
    k0: usize,
    size: [usize; 3],
}

impl Placement {
    fn footprint_gap_ok(&self, other: &Placement, gap: usize) -> bool {
        // Chebyshev distance between the BEV rectangles; 0 on overlap
        let axis_gap = |a0: usize, alen: usize, b0: usize, blen: usize| {
            if a0 + alen <= b0 {
                b0 - (a0 + alen)
            } else if b0 + blen <= a0 {
                a0 - (b0 + blen)
            } else {
                0
            }
        };
        let i_gap = axis_gap(self.i0, self.size[0], other.i0, other.size[0]);
        let j_gap = axis_gap(self.j0, self.size[1], other.j0, other.size[1]);
        i_gap.max(j_gap) >= gap
    }

    fn center(&self, spec: &GridSpec) -> [f64; 3] {
        [
            spec.dx * (self.i0 as f64 + (self.size[0] as f64 - 1.0) / 2.0),
            spec.dy * (self.j0 as f64 + (self.size[1] as f64 - 1.0) / 2.0),
            spec.dz * (self.k0 as f64 + (self.size[2] as f64 - 1.0) / 2.0),
        ]
    }
}

/// Every voxel of each cuboid must be strictly nearer its own center than
/// any other same-class center, so nearest assignment reproduces the
/// ground-truth partition exactly.
fn voronoi_consistent(a: &Placement, b: &Placement, spec: &GridSpec) -> bool {
    if a.class_id != b.class_id {
        return true;
    }
    let check = |inst: &Placement, own: [f64; 3], other: [f64; 3]| -> bool {
        for i in inst.i0..inst.i0 + inst.size[0] {
            for j in inst.j0..inst.j0 + inst.size[1] {
                for k in inst.k0..inst.k0 + inst.size[2] {
                    let p = [
                        spec.dx * i as f64,
                        spec.dy * j as f64,
                        spec.dz * k as f64,
                    ];
                    let d_own: f64 = (0..3).map(|a| (p[a] - own[a]).powi(2)).sum();
                    let d_other: f64 = (0..3).map(|a| (p[a] - other[a]).powi(2)).sum();
                    if d_own >= d_other {
                        return false;
                    }
                }
            }
        }
        true
    };
    let ca = a.center(spec);
    let cb = b.center(spec);
    check(a, ca, cb) && check(b, cb, ca)
}

pub fn generate(cfg: &SceneConfig, spec: &GridSpec, tax: &LabelTaxonomy) -> Result<SyntheticScene> {
    cfg.validate(spec, tax)?;
    let mut rng = substream(cfg.seed, STREAM_GEOMETRY);

    // place thing cuboids by rejection sampling
    let mut placements: Vec<Placement> = Vec::new();
    let max_attempts = 200 * cfg.n_instances.max(1);
    let mut attempts = 0usize;
    while placements.len() < cfg.n_instances {
        if attempts >= max_attempts {
            return Err(Error::Capacity(format!(
                "placed only {} of {} instances after {attempts} attempts; \
                 grid too small for the requested separation",
                placements.len(),
                cfg.n_instances
            )));
        }
        attempts += 1;
        let size = [
            rng.random_range(cfg.instance_size_range[0][0]..=cfg.instance_size_range[0][1]),
            rng.random_range(cfg.instance_size_range[1][0]..=cfg.instance_size_range[1][1]),
            rng.random_range(cfg.instance_size_range[2][0]..=cfg.instance_size_range[2][1]),
        ];
        if size[0] > spec.h || size[1] > spec.w || size[2] > spec.z {
            continue;
        }
        let cand = Placement {
            class_id: tax.thing_class_ids()[rng.random_range(0..tax.c_inst())],
            i0: rng.random_range(0..=spec.h - size[0]),
            j0: rng.random_range(0..=spec.w - size[1]),
            k0: rng.random_range(0..=spec.z - size[2]),
            size,
        };
        let ok = placements.iter().all(|p| {
            cand.footprint_gap_ok(p, cfg.min_separation) && voronoi_consistent(&cand, p, spec)
        });
        if ok {
            placements.push(cand);
        }
    }

    // ground-truth grids: things first, stuff fills what stays free
    let mut sem = SemanticGrid::zeros(*spec, tax);
    let mut pano = PanopticGrid::zeros(*spec);
    let mut instances = Vec::with_capacity(placements.len());
    let mut next_id: u32 = 1;
    for p in &placements {
        let mut voxels = Vec::new();
        for i in p.i0..p.i0 + p.size[0] {
            for j in p.j0..p.j0 + p.size[1] {
                for k in p.k0..p.k0 + p.size[2] {
                    sem.data[[i, j, k]] = p.class_id;
                    pano.data[[i, j, k]] = next_id;
                    voxels.push(GridIndex::new(i, j, k));
                }
            }
        }
        pano.id_to_class.insert(next_id, p.class_id);
        instances.push(InstanceRecord::from_voxels(next_id, p.class_id, voxels, spec)?);
        next_id += 1;
    }
    for layer in &cfg.stuff_layers {
        let mut any = false;
        for i in 0..spec.h {
            for j in 0..spec.w {
                if layer.coverage < 1.0 && rng.random::<f64>() >= layer.coverage {
                    continue;
                }
                for k in layer.k_min..=layer.k_max {
                    if sem.data[[i, j, k]] == 0 {
                        sem.data[[i, j, k]] = layer.class_id;
                        pano.data[[i, j, k]] = next_id;
                        any = true;
                    }
                }
            }
        }
        if any {
            pano.id_to_class.insert(next_id, layer.class_id);
            next_id += 1;
        }
    }

    // encoded targets
    let heat = targets::encode_heatmap(
        &instances,
        spec,
        tax,
        cfg.sigma_scale,
        SigmaMode::BboxDiagonalPixels,
    )?;
    let (reg, reg_mask) = targets::encode_regression(&instances, spec)?;
    let bundle = TargetBundle {
        heat: heat.clone(),
        reg: reg.clone(),
        reg_mask,
    };

    // observed tensors = targets + noise
    let mut observed_heat = heat;
    if cfg.noise.heat_sigma > 0.0 {
        let mut nrng = substream(cfg.seed, STREAM_HEAT_NOISE);
        let dist = Normal::new(0.0, cfg.noise.heat_sigma).unwrap();
        observed_heat
            .data
            .mapv_inplace(|v| (v as f64 + dist.sample(&mut nrng)).clamp(0.0, 1.0) as f32);
    }
    let mut observed_reg = reg;
    if cfg.noise.reg_sigma > 0.0 {
        let mut nrng = substream(cfg.seed, STREAM_REG_NOISE);
        let dist = Normal::new(0.0, cfg.noise.reg_sigma).unwrap();
        observed_reg
            .data
            .mapv_inplace(|v| (v as f64 + dist.sample(&mut nrng)) as f32);
    }
    let mut observed_sem = sem.clone();
    if cfg.noise.flip_prob > 0.0 {
        let nonfree: Vec<u8> = tax
            .classes()
            .iter()
            .filter(|c| c.kind != ClassKind::Free)
            .map(|c| c.id)
            .collect();
        let mut frng = substream(cfg.seed, STREAM_FLIPS);
        for v in observed_sem.data.iter_mut() {
            if *v != 0 && frng.random::<f64>() < cfg.noise.flip_prob {
                let mut pick = nonfree[frng.random_range(0..nonfree.len())];
                if pick == *v && nonfree.len() > 1 {
                    pick = nonfree[(nonfree.iter().position(|&c| c == pick).unwrap() + 1)
                        % nonfree.len()];
                }
                *v = pick;
            }
        }
    }

    Ok(SyntheticScene {
        sem_gt: sem,
        pano_gt: pano,
        instances,
        targets: bundle,
        observed_heat,
        observed_reg,
        observed_sem,
    })
}

/// NPZ members of a persisted scene: observed tensors under the standard
/// names, ground truth under `pano`/`pano_classes`.
pub fn scene_to_npz_entries(scene: &SyntheticScene) -> Vec<(&'static str, NpyArray)> {
    vec![
        ("sem", NpyArray::U8(scene.observed_sem.data.clone().into_dyn())),
        ("heat", NpyArray::F32(scene.observed_heat.data.clone().into_dyn())),
        ("reg", NpyArray::F32(scene.observed_reg.data.clone().into_dyn())),
        ("pano", NpyArray::U32(scene.pano_gt.data.clone().into_dyn())),
        (
            "pano_classes",
            NpyArray::U32(scene.pano_gt.classes_table().into_dyn()),
        ),
    ]
}

pub fn targets_to_npz_entries(bundle: &TargetBundle) -> Vec<(&'static str, NpyArray)> {
    vec![
        ("heat", NpyArray::F32(bundle.heat.data.clone().into_dyn())),
        ("reg", NpyArray::F32(bundle.reg.data.clone().into_dyn())),
        ("reg_mask", NpyArray::Bool(bundle.reg_mask.clone().into_dyn())),
    ]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepCell {
    pub seed: u64,
    pub n_instances: usize,
    pub noise: NoiseConfig,
    pub scene_file: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepManifest {
    pub cells: Vec<SweepCell>,
}

/// Generates the Cartesian product of noise levels and instance counts and
/// persists each scene with a sidecar config echo.
pub fn sweep(
    base: &SceneConfig,
    noise_levels: &[NoiseConfig],
    instance_counts: &[usize],
    spec: &GridSpec,
    tax: &LabelTaxonomy,
    out_dir: &Path,
) -> Result<SweepManifest> {
    std::fs::create_dir_all(out_dir)
        .map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    let mut cells = Vec::new();
    for (ni, noise) in noise_levels.iter().enumerate() {
        for &count in instance_counts {
            let cfg = SceneConfig {
                n_instances: count,
                noise: *noise,
                ..base.clone()
            };
            let scene = generate(&cfg, spec, tax)?;
            let name = format!("scene_seed{}_n{}_noise{}.npz", cfg.seed, count, ni);
            let path: PathBuf = out_dir.join(&name);
            npy::write_npz(&path, &scene_to_npz_entries(&scene))?;
            let echo = serde_json::to_string_pretty(&cfg).expect("config serializes");
            let echo_path = path.with_extension("json");
            std::fs::write(&echo_path, echo)
                .map_err(|e| Error::io(echo_path.display().to_string(), e))?;
            cells.push(SweepCell {
                seed: cfg.seed,
                n_instances: count,
                noise: *noise,
                scene_file: name,
            });
        }
    }
    let manifest = SweepManifest { cells };
    let mpath = out_dir.join("sweep_manifest.json");
    std::fs::write(
        &mpath,
        serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
    )
    .map_err(|e| Error::io(mpath.display().to_string(), e))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup() -> (GridSpec, LabelTaxonomy) {
        (GridSpec::new(48, 48, 8, 0.4, 0.4, 0.4).unwrap(), LabelTaxonomy::nuscenes_default())
    }

    #[test]
    fn same_seed_is_byte_identical() {
        let (spec, tax) = setup();
        let mut cfg = SceneConfig::default_for(&tax);
        cfg.seed = 42;
        cfg.n_instances = 5;
        let a = generate(&cfg, &spec, &tax).unwrap();
        let b = generate(&cfg, &spec, &tax).unwrap();
        assert_eq!(a.sem_gt.data, b.sem_gt.data);
        assert_eq!(a.pano_gt.data, b.pano_gt.data);
        assert_eq!(a.observed_heat.data, b.observed_heat.data);
        assert_eq!(a.observed_reg.data, b.observed_reg.data);
    }

    #[test]
    fn zero_noise_observed_equals_targets() {
        let (spec, tax) = setup();
        let mut cfg = SceneConfig::default_for(&tax);
        cfg.seed = 7;
        cfg.n_instances = 4;
        let s = generate(&cfg, &spec, &tax).unwrap();
        assert_eq!(s.observed_heat.data, s.targets.heat.data);
        assert_eq!(s.observed_reg.data, s.targets.reg.data);
        assert_eq!(s.observed_sem.data, s.sem_gt.data);
    }

    #[test]
    fn stuff_only_scene_has_one_id() {
        let (spec, tax) = setup();
        let mut cfg = SceneConfig::default_for(&tax);
        cfg.n_instances = 0;
        let s = generate(&cfg, &spec, &tax).unwrap();
        assert_eq!(s.pano_gt.id_to_class.len(), 1);
        assert!(s.instances.is_empty());
    }

    #[test]
    fn grids_are_mutually_consistent() {
        let (spec, tax) = setup();
        let mut cfg = SceneConfig::default_for(&tax);
        cfg.seed = 3;
        cfg.n_instances = 6;
        let s = generate(&cfg, &spec, &tax).unwrap();
        assert!(s.pano_gt.validate(Some(&s.sem_gt), &tax).is_empty());
    }

    #[test]
    fn capacity_error_when_grid_too_small() {
        let tax = LabelTaxonomy::nuscenes_default();
        let spec = GridSpec::new(8, 8, 4, 0.4, 0.4, 0.4).unwrap();
        let mut cfg = SceneConfig::default_for(&tax);
        cfg.instance_size_range = [[2, 4], [2, 4], [2, 3]];
        cfg.n_instances = 50;
        assert!(matches!(
            generate(&cfg, &spec, &tax),
            Err(Error::Capacity(_))
        ));
    }

    #[test]
    fn noise_changes_observed_but_not_gt() {
        let (spec, tax) = setup();
        let mut cfg = SceneConfig::default_for(&tax);
        cfg.seed = 11;
        cfg.n_instances = 4;
        let clean = generate(&cfg, &spec, &tax).unwrap();
        cfg.noise = NoiseConfig {
            heat_sigma: 0.1,
            reg_sigma: 0.05,
            flip_prob: 0.02,
        };
        let noisy = generate(&cfg, &spec, &tax).unwrap();
        assert_eq!(clean.pano_gt.data, noisy.pano_gt.data);
        assert_eq!(clean.sem_gt.data, noisy.sem_gt.data);
        assert_ne!(clean.observed_heat.data, noisy.observed_heat.data);
        assert_ne!(clean.observed_reg.data, noisy.observed_reg.data);
        assert!(noisy.observed_heat.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
        // flips never create or clear free voxels
        for (&a, &b) in clean.sem_gt.data.iter().zip(noisy.observed_sem.data.iter()) {
            assert_eq!(a == 0, b == 0);
        }
    }

    #[test]
    fn sweep_writes_scenes_and_manifest() {
        let (spec, tax) = setup();
        let dir = tempfile::tempdir().unwrap();
        let mut base = SceneConfig::default_for(&tax);
        base.seed = 5;
        let levels = [
            NoiseConfig::none(),
            NoiseConfig { heat_sigma: 0.1, reg_sigma: 0.0, flip_prob: 0.0 },
            NoiseConfig { heat_sigma: 0.2, reg_sigma: 0.0, flip_prob: 0.0 },
        ];
        let manifest = sweep(&base, &levels, &[2, 4], &spec, &tax, dir.path()).unwrap();
        assert_eq!(manifest.cells.len(), 6);
        for cell in &manifest.cells {
            assert!(dir.path().join(&cell.scene_file).exists());
        }
        assert!(dir.path().join("sweep_manifest.json").exists());

        let empty = sweep(&base, &[], &[2], &spec, &tax, dir.path()).unwrap();
        assert!(empty.cells.is_empty());
    }
}

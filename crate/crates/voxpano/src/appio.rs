//! Run manifests, input digests, and the latency/work benchmark harness.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::assign::{self, AssignConfig, AssignStats, SemInput};
use crate::error::{Error, Result};
use crate::geometry::{ClassKind, GridSpec, LabelTaxonomy, TaxonomyConfig};
use crate::proposal::ProposalConfig;
use crate::synth::{self, SceneConfig};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    hex_string(&hasher.finalize())
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn digest_file(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(sha256_hex(&bytes))
}

/// Per-stage wall-clock timings in microseconds.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct StageTimings {
    pub c2h_us: u64,
    pub propose_us: u64,
    pub assign_us: u64,
    pub total_us: u64,
}

/// Full record of one `process` run. Timing fields are excluded from
/// determinism comparisons; everything else is a pure function of the
/// inputs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    /// Input path -> SHA-256 of the file bytes.
    pub input_digests: BTreeMap<String, String>,
    pub grid_spec: GridSpec,
    pub taxonomy: TaxonomyConfig,
    pub proposal: ProposalConfig,
    pub assign: AssignConfig,
    pub stats: AssignStats,
    pub timings_us: StageTimings,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchStage {
    pub median_us: u64,
    pub p95_us: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchReport {
    pub grid: GridSpec,
    pub n_instances: usize,
    pub repetitions: usize,
    pub threads: usize,
    pub propose: BenchStage,
    pub assign: BenchStage,
    pub propose_plus_assign: BenchStage,
    /// Distance evaluations of the class-aware assignment.
    pub distance_evaluations: u64,
    /// Distance evaluations a class-agnostic scan would need
    /// (total thing voxels x total centers), from a counting-only pass.
    pub class_agnostic_evaluations: u64,
    /// class-aware / class-agnostic; 1.0 when at most one thing class is populated.
    pub work_ratio: f64,
}

fn percentile(sorted: &[u64], q: f64) -> u64 {
    if sorted.is_empty() {
        return 0;
    }
    let pos = ((sorted.len() as f64 - 1.0) * q).round() as usize;
    sorted[pos.min(sorted.len() - 1)]
}

fn stage(samples: &mut [u64]) -> BenchStage {
    samples.sort_unstable();
    BenchStage {
        median_us: percentile(samples, 0.5),
        p95_us: percentile(samples, 0.95),
    }
}

/// Generates a zero-noise synthetic scene and times `repetitions` runs of
/// the propose and assign stages.
pub fn run_bench(
    spec: &GridSpec,
    tax: &LabelTaxonomy,
    n_instances: usize,
    repetitions: usize,
    threads: usize,
    proposal_cfg: &ProposalConfig,
    assign_cfg: &AssignConfig,
) -> Result<BenchReport> {
    let mut cfg = SceneConfig::default_for(tax).fit_to_grid(spec);
    cfg.n_instances = n_instances;
    let scene = synth::generate(&cfg, spec, tax)?;

    let mut propose_us = Vec::with_capacity(repetitions);
    let mut assign_us = Vec::with_capacity(repetitions);
    let mut both_us = Vec::with_capacity(repetitions);
    let mut stats = AssignStats::default();
    for _ in 0..repetitions.max(1) {
        let out = assign::process_frame(
            SemInput::Grid(scene.observed_sem.clone()),
            &scene.observed_heat,
            &scene.observed_reg,
            spec,
            tax,
            proposal_cfg,
            assign_cfg,
        )?;
        propose_us.push(out.propose_us);
        assign_us.push(out.assign_us);
        both_us.push(out.propose_us + out.assign_us);
        stats = out.stats;
    }

    // counting-only pass for the class-agnostic bound
    let mut thing_voxels: u64 = 0;
    for &d in scene.observed_sem.data.iter() {
        if tax.kind(d) == Some(ClassKind::Thing) {
            thing_voxels += 1;
        }
    }
    let total_centers: u64 = stats
        .per_class_instance_counts
        .values()
        .map(|&c| c as u64)
        .sum();
    let class_agnostic = thing_voxels * total_centers;
    let populated_thing_classes = stats
        .per_class_instance_counts
        .iter()
        .filter(|&(_, &c)| c > 0)
        .count();
    let work_ratio = if class_agnostic == 0 || populated_thing_classes <= 1 {
        1.0
    } else {
        stats.distance_evaluations as f64 / class_agnostic as f64
    };

    Ok(BenchReport {
        grid: *spec,
        n_instances,
        repetitions,
        threads,
        propose: stage(&mut propose_us),
        assign: stage(&mut assign_us),
        propose_plus_assign: stage(&mut both_us),
        distance_evaluations: stats.distance_evaluations,
        class_agnostic_evaluations: class_agnostic,
        work_ratio,
    })
}

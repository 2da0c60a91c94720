//! Command-line front end: panoptic processing, evaluation, synthetic data
//! generation, target encoding, logit decoding, and benchmarking.
//!
//! Every diagnostic is a single stderr line prefixed with a stable error
//! code; exit status is 0 on success, 1 on validation failures, 2 on I/O
//! failures.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use voxpano::appio::{self, RunManifest, StageTimings};
use voxpano::assign::{AssignConfig, NoCenterPolicy, SemInput};
use voxpano::error::{Error, Result};
use voxpano::geometry::{GridSpec, LabelTaxonomy, TaxonomyConfig};
use voxpano::metrics;
use voxpano::npy::{self, NpyArray};
use voxpano::proposal::ProposalConfig;
use voxpano::synth::{self, NoiseConfig, SceneConfig};
use voxpano::targets;
use voxpano::tensors::{
    BEVOccLogits, CenterHeatmap, PanopticGrid, RegressionField, SemanticGrid,
};
use voxpano::{assign, Error as VoxError};

#[derive(Parser)]
#[command(name = "voxpano", version, about = "Panoptic occupancy post-processing and evaluation")]
struct Cli {
    /// Worker thread count (also via VOXPANO_THREADS); defaults to the
    /// hardware count. Results are identical for any value.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Decode semantic + centerness tensors into a panoptic grid.
    Process(ProcessArgs),
    /// Compare a predicted panoptic bundle against ground truth.
    Eval(EvalArgs),
    /// Generate one synthetic scene bundle.
    Synth(SynthArgs),
    /// Generate a grid of scenes over noise levels and instance counts.
    Sweep(SweepArgs),
    /// Encode training targets from a ground-truth scene bundle.
    EncodeTargets(EncodeTargetsArgs),
    /// Decode flattened BEV occupancy logits into a semantic grid.
    C2h(C2hArgs),
    /// Time the propose and assign stages on a synthetic scene.
    Bench(BenchArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum PolicyArg {
    /// One fresh instance ID for the whole class mass.
    SingleInstance,
    /// Leave the voxels unassigned (ID 0).
    Void,
}

impl From<PolicyArg> for NoCenterPolicy {
    fn from(p: PolicyArg) -> Self {
        match p {
            PolicyArg::SingleInstance => NoCenterPolicy::SingleInstance,
            PolicyArg::Void => NoCenterPolicy::Void,
        }
    }
}

#[derive(Args)]
struct ProcessArgs {
    /// Semantic grid, NPY or NPZ member `sem` (u8, h x w x z).
    #[arg(long, conflicts_with = "logits", required_unless_present = "logits")]
    sem: Option<PathBuf>,
    /// Flattened BEV logits, NPY or NPZ member `logits` (f32, h x w x z*n_s).
    #[arg(long)]
    logits: Option<PathBuf>,
    /// Center heatmap, NPY or NPZ member `heat` (f32, h x w x c_inst).
    #[arg(long)]
    heat: PathBuf,
    /// Center regression field, NPY or NPZ member `reg` (f32, h x w x 3).
    #[arg(long)]
    reg: PathBuf,
    /// Grid geometry JSON; defaults to the 200x200x16 / 0.4 m profile.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Taxonomy JSON; defaults to the 17-class nuScenes split.
    #[arg(long)]
    taxonomy: Option<PathBuf>,
    /// Output NPZ with members `pano`, `pano_classes`, `sem`.
    #[arg(long)]
    out: PathBuf,
    /// Run manifest path; defaults to `<out>.manifest.json`.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Center score threshold.
    #[arg(long, default_value_t = 0.3)]
    tau: f32,
    /// Candidates retained after ranking.
    #[arg(long, default_value_t = 100)]
    topk: usize,
    /// NMS window edge length (odd).
    #[arg(long, default_value_t = 3)]
    kernel: usize,
    /// Apply the top-k cut per heatmap channel instead of globally.
    #[arg(long)]
    per_class_topk: bool,
    /// Fallback for thing classes with voxels but no surviving center.
    #[arg(long, value_enum, default_value_t = PolicyArg::SingleInstance)]
    no_center_policy: PolicyArg,
}

#[derive(Args)]
struct EvalArgs {
    /// Predicted bundle NPZ (members `sem`, `pano`, `pano_classes`).
    #[arg(long)]
    pred: PathBuf,
    /// Ground-truth bundle NPZ (same members).
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    taxonomy: Option<PathBuf>,
    /// Also write the JSON report here (it always goes to stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 10)]
    n_instances: usize,
    #[arg(long, default_value_t = 0.0)]
    heat_sigma: f64,
    #[arg(long, default_value_t = 0.0)]
    reg_sigma: f64,
    #[arg(long, default_value_t = 0.0)]
    flip_prob: f64,
    /// Minimum BEV gap between instance footprints, in pixels.
    #[arg(long, default_value_t = 2)]
    min_separation: usize,
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    taxonomy: Option<PathBuf>,
    /// Output scene NPZ; a config echo goes to `<out>.json`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Comma-separated heat noise stddevs.
    #[arg(long, value_delimiter = ',', default_value = "0.0,0.1,0.2")]
    heat_sigmas: Vec<f64>,
    /// Comma-separated instance counts.
    #[arg(long, value_delimiter = ',', default_value = "10")]
    counts: Vec<usize>,
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    taxonomy: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct EncodeTargetsArgs {
    /// Ground-truth bundle NPZ (members `sem`, `pano`, `pano_classes`).
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    taxonomy: Option<PathBuf>,
    /// Gaussian width as a multiple of the footprint bbox diagonal.
    #[arg(long, default_value_t = 1.0 / 6.0)]
    sigma_scale: f64,
    /// Output NPZ with members `heat`, `reg`, `reg_mask`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct C2hArgs {
    /// Flattened BEV logits, NPY or NPZ member `logits`.
    #[arg(long)]
    logits: PathBuf,
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    taxonomy: Option<PathBuf>,
    /// Output semantic grid NPY (u8).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, default_value_t = 50)]
    instances: usize,
    #[arg(long, default_value_t = 20)]
    reps: usize,
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    taxonomy: Option<PathBuf>,
}

/// Prints to stdout but tolerates a closed pipe (e.g. `voxpano ... | head`).
fn emit(text: &str) {
    use std::io::Write;
    let _ = writeln!(std::io::stdout(), "{text}");
}

fn load_spec(path: &Option<PathBuf>) -> Result<GridSpec> {
    let spec = match path {
        None => GridSpec::occ3d_nuscenes(),
        Some(p) => {
            let text =
                std::fs::read_to_string(p).map_err(|e| Error::io(p.display().to_string(), e))?;
            serde_json::from_str(&text).map_err(|e| {
                Error::Validation(format!("cannot parse grid spec {}: {e}", p.display()))
            })?
        }
    };
    spec.validate()?;
    Ok(spec)
}

fn load_taxonomy(path: &Option<PathBuf>) -> Result<LabelTaxonomy> {
    match path {
        None => Ok(LabelTaxonomy::nuscenes_default()),
        Some(p) => {
            let text =
                std::fs::read_to_string(p).map_err(|e| Error::io(p.display().to_string(), e))?;
            let cfg: TaxonomyConfig = serde_json::from_str(&text).map_err(|e| {
                Error::Validation(format!("cannot parse taxonomy {}: {e}", p.display()))
            })?;
            LabelTaxonomy::from_config(cfg)
        }
    }
}

/// Loads either a bare NPY file or one member of an NPZ archive.
fn load_member(path: &Path, member: &str) -> Result<NpyArray> {
    if path.extension().is_some_and(|e| e == "npz") {
        npy::read_npz(path)?.remove(member).ok_or_else(|| {
            Error::Validation(format!(
                "archive {} has no member named {member}",
                path.display()
            ))
        })
    } else {
        npy::read_array(path)
    }
}

fn load_bundle_grids(
    path: &Path,
    spec: &GridSpec,
    tax: &LabelTaxonomy,
) -> Result<(SemanticGrid, PanopticGrid)> {
    let mut members = npy::read_npz(path)?;
    let mut take = |name: &str| {
        members.remove(name).ok_or_else(|| {
            Error::Validation(format!(
                "archive {} has no member named {name}",
                path.display()
            ))
        })
    };
    let sem_arr = take("sem")?.as_u8_3d("sem")?;
    let pano_arr = take("pano")?.as_u32_3d("pano")?;
    let table = take("pano_classes")?.as_u32_2d("pano_classes")?;
    let sem = SemanticGrid::new(sem_arr, *spec, tax)?;
    let mut pano = PanopticGrid::zeros(*spec);
    if pano_arr.dim() != (spec.h, spec.w, spec.z) {
        return Err(Error::Shape(format!(
            "pano member has shape {:?}, spec requires ({}, {}, {})",
            pano_arr.dim(),
            spec.h,
            spec.w,
            spec.z
        )));
    }
    pano.data = pano_arr;
    pano.id_to_class = PanopticGrid::classes_from_table(&table)?;
    Ok((sem, pano))
}

fn run_process(args: &ProcessArgs) -> Result<()> {
    let spec = load_spec(&args.spec)?;
    let tax = load_taxonomy(&args.taxonomy)?;
    let proposal_cfg = ProposalConfig {
        kernel: args.kernel,
        top_k: args.topk,
        tau: args.tau,
        per_class_top_k: args.per_class_topk,
    };
    let assign_cfg = AssignConfig {
        no_center_policy: args.no_center_policy.into(),
        count_work: true,
    };

    let mut input_digests = BTreeMap::new();
    let sem_input = match (&args.sem, &args.logits) {
        (Some(p), None) => {
            input_digests.insert(p.display().to_string(), appio::digest_file(p)?);
            let data = load_member(p, "sem")?.as_u8_3d("sem")?;
            SemInput::Grid(SemanticGrid::new(data, spec, &tax)?)
        }
        (None, Some(p)) => {
            input_digests.insert(p.display().to_string(), appio::digest_file(p)?);
            let data = load_member(p, "logits")?.as_f32_3d("logits")?;
            SemInput::Logits(BEVOccLogits::new(data, spec, &tax)?)
        }
        _ => {
            return Err(Error::Validation(
                "exactly one of --sem and --logits is required".to_string(),
            ));
        }
    };
    input_digests
        .entry(args.heat.display().to_string())
        .or_insert(appio::digest_file(&args.heat)?);
    input_digests
        .entry(args.reg.display().to_string())
        .or_insert(appio::digest_file(&args.reg)?);
    let heat = CenterHeatmap::new(load_member(&args.heat, "heat")?.as_f32_3d("heat")?);
    let reg = RegressionField::new(load_member(&args.reg, "reg")?.as_f32_3d("reg")?);

    let out = assign::process_frame(
        sem_input,
        &heat,
        &reg,
        &spec,
        &tax,
        &proposal_cfg,
        &assign_cfg,
    )?;

    npy::write_npz(
        &args.out,
        &[
            ("pano", NpyArray::U32(out.pano.data.clone().into_dyn())),
            (
                "pano_classes",
                NpyArray::U32(out.pano.classes_table().into_dyn()),
            ),
            ("sem", NpyArray::U8(out.sem.data.clone().into_dyn())),
        ],
    )?;

    let manifest = RunManifest {
        tool_version: appio::TOOL_VERSION.to_string(),
        input_digests,
        grid_spec: spec,
        taxonomy: tax.to_config(),
        proposal: proposal_cfg,
        assign: assign_cfg,
        stats: out.stats,
        timings_us: StageTimings {
            c2h_us: out.c2h_us,
            propose_us: out.propose_us,
            assign_us: out.assign_us,
            total_us: out.c2h_us + out.propose_us + out.assign_us,
        },
    };
    let manifest_path = args
        .manifest
        .clone()
        .unwrap_or_else(|| manifest_path_for(&args.out));
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&manifest_path, text)
        .map_err(|e| Error::io(manifest_path.display().to_string(), e))?;
    Ok(())
}

fn manifest_path_for(out: &Path) -> PathBuf {
    let mut name = out.as_os_str().to_os_string();
    name.push(".manifest.json");
    PathBuf::from(name)
}

#[derive(serde::Serialize)]
struct EvalReport {
    miou: f64,
    /// Per-class IoU by class name; absent classes omitted.
    iou_per_class: BTreeMap<String, f64>,
    pq: f64,
    pq_things: f64,
    pq_stuff: f64,
    pq_per_class: BTreeMap<String, metrics::PQClassEntry>,
    exact_match: bool,
}

fn run_eval(args: &EvalArgs) -> Result<()> {
    let tax = load_taxonomy(&args.taxonomy)?;
    // without an explicit geometry, take dims from the GT bundle (voxel
    // sizes do not affect the metrics)
    let spec = match &args.spec {
        Some(_) => load_spec(&args.spec)?,
        None => {
            let members = npy::read_npz(&args.gt)?;
            let sem = members.get("sem").ok_or_else(|| {
                Error::Validation(format!("archive {} has no member named sem", args.gt.display()))
            })?;
            let dims = sem.shape().to_vec();
            if dims.len() != 3 {
                return Err(Error::Shape(format!(
                    "sem member must have 3 axes, got {dims:?}"
                )));
            }
            GridSpec::new(dims[0], dims[1], dims[2], 0.4, 0.4, 0.4)?
        }
    };
    let (pred_sem, pred_pano) = load_bundle_grids(&args.pred, &spec, &tax)?;
    let (gt_sem, gt_pano) = load_bundle_grids(&args.gt, &spec, &tax)?;

    let miou = metrics::miou(&pred_sem, &gt_sem, true)?;
    let pq = metrics::panoptic_quality(&pred_pano, &gt_pano, &tax)?;
    let exact = metrics::compare_panoptic_exact(&pred_pano, &gt_pano)?;

    let mut iou_per_class = BTreeMap::new();
    for (c, iou) in miou.per_class.iter().enumerate() {
        if let Some(iou) = iou {
            let name = tax.name(c as u8).unwrap_or("unknown").to_string();
            iou_per_class.insert(name, *iou);
        }
    }
    let mut pq_per_class = BTreeMap::new();
    for (&c, entry) in &pq.per_class {
        let name = tax.name(c).unwrap_or("unknown").to_string();
        pq_per_class.insert(name, *entry);
    }
    let report = EvalReport {
        miou: miou.mean,
        iou_per_class,
        pq: pq.pq,
        pq_things: pq.pq_things,
        pq_stuff: pq.pq_stuff,
        pq_per_class,
        exact_match: exact,
    };
    let text = serde_json::to_string_pretty(&report).expect("report serializes");
    emit(&text);
    if let Some(out) = &args.out {
        std::fs::write(out, &text).map_err(|e| Error::io(out.display().to_string(), e))?;
    }
    Ok(())
}

fn scene_config(args: &SynthArgs, spec: &GridSpec, tax: &LabelTaxonomy) -> SceneConfig {
    let mut cfg = SceneConfig::default_for(tax).fit_to_grid(spec);
    cfg.seed = args.seed;
    cfg.n_instances = args.n_instances;
    cfg.min_separation = args.min_separation;
    cfg.noise = NoiseConfig {
        heat_sigma: args.heat_sigma,
        reg_sigma: args.reg_sigma,
        flip_prob: args.flip_prob,
    };
    cfg
}

fn run_synth(args: &SynthArgs) -> Result<()> {
    let spec = load_spec(&args.spec)?;
    let tax = load_taxonomy(&args.taxonomy)?;
    let cfg = scene_config(args, &spec, &tax);
    let scene = synth::generate(&cfg, &spec, &tax)?;
    npy::write_npz(&args.out, &synth::scene_to_npz_entries(&scene))?;
    let echo_path = manifest_sidecar(&args.out);
    let echo = serde_json::to_string_pretty(&cfg).expect("config serializes");
    std::fs::write(&echo_path, echo)
        .map_err(|e| Error::io(echo_path.display().to_string(), e))?;
    Ok(())
}

fn manifest_sidecar(out: &Path) -> PathBuf {
    let mut name = out.as_os_str().to_os_string();
    name.push(".json");
    PathBuf::from(name)
}

fn run_sweep(args: &SweepArgs) -> Result<()> {
    let spec = load_spec(&args.spec)?;
    let tax = load_taxonomy(&args.taxonomy)?;
    let mut base = SceneConfig::default_for(&tax).fit_to_grid(&spec);
    base.seed = args.seed;
    let levels: Vec<NoiseConfig> = args
        .heat_sigmas
        .iter()
        .map(|&s| NoiseConfig {
            heat_sigma: s,
            reg_sigma: 0.0,
            flip_prob: 0.0,
        })
        .collect();
    let manifest = synth::sweep(&base, &levels, &args.counts, &spec, &tax, &args.out_dir)?;
    emit(&format!(
        "wrote {} scenes to {}",
        manifest.cells.len(),
        args.out_dir.display()
    ));
    Ok(())
}

fn run_encode_targets(args: &EncodeTargetsArgs) -> Result<()> {
    let spec = load_spec(&args.spec)?;
    let tax = load_taxonomy(&args.taxonomy)?;
    let (sem, pano) = load_bundle_grids(&args.scene, &spec, &tax)?;
    let instances = targets::extract_instances(&sem, &pano, &tax)?;
    let heat = targets::encode_heatmap(
        &instances,
        &spec,
        &tax,
        args.sigma_scale,
        targets::SigmaMode::BboxDiagonalPixels,
    )?;
    let (reg, reg_mask) = targets::encode_regression(&instances, &spec)?;
    let bundle = targets::TargetBundle {
        heat,
        reg,
        reg_mask,
    };
    npy::write_npz(&args.out, &synth::targets_to_npz_entries(&bundle))?;
    Ok(())
}

fn run_c2h(args: &C2hArgs) -> Result<()> {
    let spec = load_spec(&args.spec)?;
    let tax = load_taxonomy(&args.taxonomy)?;
    let data = load_member(&args.logits, "logits")?.as_f32_3d("logits")?;
    let sem = BEVOccLogits::new(data, spec, &tax)?.channel_to_height(&tax)?;
    npy::write_array(&args.out, &NpyArray::U8(sem.data.into_dyn()))
}

fn run_bench(args: &BenchArgs, threads: usize) -> Result<()> {
    let spec = load_spec(&args.spec)?;
    let tax = load_taxonomy(&args.taxonomy)?;
    let report = appio::run_bench(
        &spec,
        &tax,
        args.instances,
        args.reps,
        threads,
        &ProposalConfig::default(),
        &AssignConfig::default(),
    )?;
    emit(&serde_json::to_string_pretty(&report).expect("report serializes"));
    Ok(())
}

fn resolve_threads(flag: Option<usize>) -> Result<usize> {
    let n = match flag {
        Some(n) => n,
        None => match std::env::var("VOXPANO_THREADS") {
            Ok(v) => v.parse().map_err(|_| {
                Error::Validation(format!("VOXPANO_THREADS must be a positive integer, got {v:?}"))
            })?,
            Err(_) => std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
        },
    };
    if n == 0 {
        return Err(Error::Validation("thread count must be >= 1".to_string()));
    }
    Ok(n)
}

fn run(cli: &Cli) -> Result<()> {
    let threads = resolve_threads(cli.threads)?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Error::Validation(format!("cannot size the worker pool: {e}")))?;
    match &cli.command {
        Command::Process(a) => run_process(a),
        Command::Eval(a) => run_eval(a),
        Command::Synth(a) => run_synth(a),
        Command::Sweep(a) => run_sweep(a),
        Command::EncodeTargets(a) => run_encode_targets(a),
        Command::C2h(a) => run_c2h(a),
        Command::Bench(a) => run_bench(a, threads),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            report_and_exit(&e)
        }
    }
}

fn report_and_exit(e: &VoxError) -> ExitCode {
    // single line, stable code prefix
    let msg = e.to_string().replace('\n', " ");
    eprintln!("{}: {msg}", e.code());
    ExitCode::from(e.exit_code() as u8)
}

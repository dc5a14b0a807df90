use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use plmm_core::container::{load_cine, load_container, save_container, Container};
use plmm_core::evalkit::{
    check_complexity, complexity_csv, default_grid, gen_phantom, report_by_region, ComplexityConfig, PhantomSpec,
};
use plmm_core::featurizer::EncoderConfig;
use plmm_core::grid::{CineVolume, LabelMap};
use plmm_core::propagator::{partition_regions, run_4d_with, FrameId, KeySource, PropagationConfig, SegmentParams};
use plmm_core::pyramid::Scales;
use plmm_core::verify::{run_all, VerifyOptions};
use plmm_core::Error;

const EXIT_CONFIG: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_VERIFY: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "plmm", version, about = "Patch-level memory matching for 4D cine mask propagation")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true, env = "CSTM_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic cine volume and its ground-truth labels.
    Phantom(PhantomArgs),
    /// Propagate a seed mask through a cine volume.
    Propagate(PropagateArgs),
    /// Score predicted masks against ground truth per region.
    Eval(EvalArgs),
    /// Compare PLMM and dense matching counts and timings.
    Bench(BenchArgs),
    /// Run the built-in consistency suites.
    Verify(VerifyArgs),
}

/// Everything a run can be configured with. Absent keys take defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    phantom: PhantomSpec,
    propagation: PropagationConfig,
    encoder: EncoderConfig,
    /// Reverse the slice axis on load (and back on save).
    flip_z: bool,
    out_dir: Option<PathBuf>,
    /// Directory with external key maps when the encoder mode is
    /// `external-file`.
    features_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ConfigArg {
    /// JSON run config; command-line flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PhantomArgs {
    #[command(flatten)]
    cfg: ConfigArg,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    slices: Option<usize>,
    #[arg(long)]
    phases: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    lv_radius: Option<f64>,
    #[arg(long)]
    myo_thickness: Option<f64>,
    #[arg(long)]
    rv_offset: Option<f64>,
    #[arg(long)]
    contraction: Option<f64>,
    #[arg(long)]
    shortening: Option<f64>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    no_distractor: bool,
    /// Motionless, noise-free phantom.
    #[arg(long = "static")]
    static_case: bool,
}

#[derive(Args, Debug)]
struct PropagateArgs {
    #[command(flatten)]
    cfg: ConfigArg,
    /// Cine volume (CGRID, ZTYX).
    #[arg(long)]
    volume: PathBuf,
    /// Seed mask: a YX label map, or a label volume whose frame (z0, t0) is used.
    #[arg(long)]
    seed: PathBuf,
    #[arg(long)]
    matcher: Option<String>,
    /// both | spatial-only | temporal-only
    #[arg(long)]
    continuity: Option<String>,
    #[arg(long)]
    patch: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    /// Active scales, e.g. "3,4", "4" or "3".
    #[arg(long)]
    scales: Option<String>,
    #[arg(long)]
    z0: Option<usize>,
    #[arg(long)]
    t0: Option<usize>,
    #[arg(long)]
    apex_t_max: Option<usize>,
    #[arg(long)]
    basal_frac: Option<f64>,
    #[arg(long)]
    apex_frac: Option<f64>,
    #[arg(long)]
    work_size: Option<usize>,
    #[arg(long)]
    key_gain: Option<f64>,
    #[arg(long)]
    flip_z: bool,
    #[arg(long)]
    features_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    truth: PathBuf,
    /// Label written in the CSV method column.
    #[arg(long, default_value = "plmm")]
    method: String,
    #[arg(long, default_value_t = 1.0 / 3.0)]
    basal_frac: f64,
    #[arg(long, default_value_t = 1.0 / 3.0)]
    apex_frac: f64,
    /// CSV destination; printed to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BenchArgs {
    /// JSON list of {t,h,w,p,k,scale} entries; a built-in grid when absent.
    #[arg(long)]
    grid: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    reps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, hide = true)]
    inject_fault: bool,
}

/// A failure with its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = if e.is_data_error() { EXIT_DATA } else { EXIT_CONFIG };
        Failure { code, message: e.to_string() }
    }
}

fn config_error(message: impl Into<String>) -> Failure {
    Failure { code: EXIT_CONFIG, message: message.into() }
}

type CmdResult = Result<(), Failure>;

fn load_run_config(arg: &ConfigArg) -> Result<RunConfig, Failure> {
    let mut cfg = match &arg.config {
        Some(p) => {
            let text =
                std::fs::read_to_string(p).map_err(|e| config_error(format!("cannot read {}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| config_error(format!("invalid config {}: {e}", p.display())))?
        }
        None => RunConfig::default(),
    };
    if arg.out_dir.is_some() {
        cfg.out_dir = arg.out_dir.clone();
    }
    Ok(cfg)
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf, Failure> {
    let dir = cfg.out_dir.clone().unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&dir).map_err(|e| Failure { code: EXIT_DATA, message: format!("{}: {e}", dir.display()) })?;
    Ok(dir)
}

fn write_text(path: &Path, text: &str) -> CmdResult {
    std::fs::write(path, text).map_err(|e| Failure { code: EXIT_DATA, message: format!("{}: {e}", path.display()) })
}

fn echo_config(cfg: &RunConfig, dir: &Path) -> CmdResult {
    let json = serde_json::to_string_pretty(cfg).expect("config serializes");
    println!("effective config:\n{json}");
    write_text(&dir.join("config.json"), &json)
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn cmd_phantom(a: PhantomArgs) -> CmdResult {
    let mut cfg = load_run_config(&a.cfg)?;
    let s = &mut cfg.phantom;
    if a.static_case {
        s.contraction_frac = 0.0;
        s.longaxis_shorten_frac = 0.0;
        s.noise_sigma = 0.0;
    }
    set(&mut s.seed, a.seed);
    set(&mut s.z_count, a.slices);
    set(&mut s.t_count, a.phases);
    set(&mut s.height, a.height);
    set(&mut s.width, a.width);
    set(&mut s.lv_radius_px, a.lv_radius);
    set(&mut s.myo_thickness_px, a.myo_thickness);
    set(&mut s.rv_offset_px, a.rv_offset);
    set(&mut s.contraction_frac, a.contraction);
    set(&mut s.longaxis_shorten_frac, a.shortening);
    set(&mut s.noise_sigma, a.noise);
    if a.no_distractor {
        s.distractor = false;
    }
    let (cine, labels) = gen_phantom(&cfg.phantom)?;
    let dir = out_dir(&cfg)?;
    echo_config(&cfg, &dir)?;
    save_container(&Container::Cine(cine), dir.join("volume.cgrid"))?;
    save_container(&Container::Labels(labels), dir.join("truth.cgrid"))?;
    let s = &cfg.phantom;
    println!(
        "wrote {} and {}: Z={} T={} H={} W={} seed={}",
        dir.join("volume.cgrid").display(),
        dir.join("truth.cgrid").display(),
        s.z_count,
        s.t_count,
        s.height,
        s.width,
        s.seed
    );
    Ok(())
}

fn load_seed(path: &Path, z0: usize, t0: usize, z_count: usize, flip: bool) -> Result<LabelMap, Failure> {
    match load_container(path)? {
        Container::LabelMap(m) => Ok(m),
        Container::Labels(v) => {
            let v = if flip { v.flip_z() } else { v };
            if v.slices() != z_count || t0 >= v.phases() {
                return Err(Error::Dimension(format!("seed volume {:?} does not cover frame {z0},{t0}", v.dims())).into());
            }
            Ok(v.frame(z0, t0))
        }
        other => Err(Error::Format(format!("{} holds a {} array, expected labels", path.display(), other.kind())).into()),
    }
}

fn cmd_propagate(a: PropagateArgs) -> CmdResult {
    let mut cfg = load_run_config(&a.cfg)?;
    let p = &mut cfg.propagation;
    if let Some(m) = &a.matcher {
        p.matcher = m.parse()?;
    }
    if let Some(c) = &a.continuity {
        p.continuity_mode = c.parse()?;
    }
    if let Some(s) = &a.scales {
        p.scales = Scales::parse(s)?;
    }
    set(&mut p.patch, a.patch);
    set(&mut p.k, a.k);
    if a.z0.is_some() {
        p.z0 = a.z0;
    }
    set(&mut p.t0, a.t0);
    set(&mut p.apex_t_max, a.apex_t_max);
    set(&mut p.region_fractions.0, a.basal_frac);
    set(&mut p.region_fractions.1, a.apex_frac);
    set(&mut p.work_short_side, a.work_size);
    set(&mut cfg.encoder.key_gain, a.key_gain);
    if a.flip_z {
        cfg.flip_z = true;
    }
    if a.features_dir.is_some() {
        cfg.features_dir = a.features_dir.clone();
    }

    let cine: CineVolume = load_cine(&a.volume)?;
    let z_count = cine.slices();
    let cine = if cfg.flip_z { cine.flip_z() } else { cine };
    // z0 is given in file orientation.
    let z0_file = cfg.propagation.z0_for(z_count);
    let z0 = if cfg.flip_z { z_count - 1 - z0_file } else { z0_file };
    let mut internal = cfg.propagation.clone();
    internal.z0 = Some(z0);
    let seed = load_seed(&a.seed, z0, internal.t0, z_count, cfg.flip_z)?;

    let dir = out_dir(&cfg)?;
    echo_config(&cfg, &dir)?;
    let keys = KeySource::from_config(&cfg.encoder, cfg.features_dir.clone())?;
    let params = SegmentParams::new(&internal, &cfg.encoder);
    let result = run_4d_with(&cine, &seed, &internal, &keys, &params)?;

    let to_file = |f: FrameId| if cfg.flip_z { FrameId::new(z_count - 1 - f.z, f.t) } else { f };
    let provenance: serde_json::Map<String, serde_json::Value> = result
        .provenance
        .iter()
        .map(|(k, v)| (to_file(*k).to_string(), v.iter().map(|f| to_file(*f).to_string()).collect::<Vec<_>>().into()))
        .collect();
    let masks = if cfg.flip_z { result.masks.flip_z() } else { result.masks };
    save_container(&Container::Labels(masks), dir.join("masks.cgrid"))?;
    write_text(&dir.join("provenance.json"), &serde_json::to_string_pretty(&provenance).expect("json"))?;
    println!(
        "segmented {} frames at working size {}x{}; patch pairs {}, pixel pairs {}",
        result.order.len() - 1,
        result.working_dims.0,
        result.working_dims.1,
        result.counter.patch_pairs,
        result.counter.pixel_pairs
    );
    println!("wrote {} and {}", dir.join("masks.cgrid").display(), dir.join("provenance.json").display());
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> CmdResult {
    let pred = plmm_core::container::load_labels(&a.pred)?;
    let truth = plmm_core::container::load_labels(&a.truth)?;
    let part = partition_regions(truth.slices(), (a.basal_frac, a.apex_frac))?;
    let report = report_by_region(&pred, &truth, &part, truth.spacing_mm())?;
    print!("{}", report.to_table());
    let csv = report.to_csv(&a.method);
    match &a.out {
        Some(p) => {
            write_text(p, &csv)?;
            println!("wrote {}", p.display());
        }
        None => print!("{csv}"),
    }
    Ok(())
}

fn cmd_bench(a: BenchArgs) -> CmdResult {
    let grid: Vec<ComplexityConfig> = match &a.grid {
        Some(p) => {
            let text =
                std::fs::read_to_string(p).map_err(|e| config_error(format!("cannot read {}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| config_error(format!("invalid grid {}: {e}", p.display())))?
        }
        None => default_grid(),
    };
    for c in &grid {
        c.validate().map_err(|e| config_error(format!("grid entry {c:?}: {e}")))?;
    }
    println!("effective grid: {}", serde_json::to_string(&grid).expect("json"));
    let rows = check_complexity(&grid, a.reps, a.seed)?;
    let csv = complexity_csv(&rows);
    match &a.out {
        Some(p) => {
            write_text(p, &csv)?;
            println!("wrote {}", p.display());
        }
        None => print!("{csv}"),
    }
    let bad = rows.iter().filter(|r| !r.counts_match()).count();
    if bad > 0 {
        return Err(Failure { code: EXIT_VERIFY, message: format!("{bad} rows with predicted != measured counts") });
    }
    Ok(())
}

fn cmd_verify(a: VerifyArgs) -> CmdResult {
    let results = run_all(VerifyOptions { inject_fault: a.inject_fault, seed: a.seed });
    for r in &results {
        println!("[{}] {:<12} {} ({:.2}s)", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail, r.seconds);
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    if failed > 0 {
        return Err(Failure { code: EXIT_VERIFY, message: format!("{failed} suite(s) failed") });
    }
    println!("all {} suites passed", results.len());
    Ok(())
}

fn init_threads(threads: Option<usize>) -> CmdResult {
    #[cfg(feature = "parallel")]
    if let Some(n) = threads {
        if n == 0 {
            return Err(config_error("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| config_error(format!("thread pool: {e}")))?;
    }
    #[cfg(not(feature = "parallel"))]
    let _ = threads;
    Ok(())
}

fn run(cli: Cli) -> CmdResult {
    init_threads(cli.threads)?;
    match cli.command {
        Command::Phantom(a) => cmd_phantom(a),
        Command::Propagate(a) => cmd_propagate(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Verify(a) => cmd_verify(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

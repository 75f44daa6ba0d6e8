//! Command-line pipeline. Every subcommand writes a metadata JSON next to its
//! output recording the parsed arguments, the fully resolved configuration
//! and the format versions; `replay` re-executes a run from that file alone.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::assimilation::{assimilated_downscale, downscale, validate_stations};
use crate::config::RunConfig;
use crate::denoiser::train;
use crate::error::{Error, Result};
use crate::grid::{coarsen, extract_patches, upsample_bicubic, upsample_bilinear, Field2D, PatchPair};
use crate::io::{self, Checkpoint};
use crate::metrics::{cdf_quantiles, evaluate};
use crate::profile::lift_stations;
use crate::synth::{gen_scene, sample_stations};

pub const TRUTH_FILE: &str = "truth.wsrg";
pub const SIM_FILE: &str = "sim.wsrg";
pub const TERRAIN_FILE: &str = "terrain.wsrg";
pub const LR_TRUTH_FILE: &str = "lr_truth.wsrg";
pub const LR_SIM_FILE: &str = "lr_sim.wsrg";
pub const STATIONS_FILE: &str = "stations.csv";
pub const HOLDOUT_FILE: &str = "holdout.csv";
pub const GEN_METADATA_FILE: &str = "metadata.json";

#[derive(Debug, Parser)]
#[command(name = "windsr", version, about = "Diffusion super-resolution of wind fields with station assimilation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, PartialEq, Subcommand, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    /// Generate a synthetic scene: terrain, truth, biased simulation, stations.
    Gen(GenArgs),
    /// Train the denoiser on scenes produced by `gen`.
    Train(TrainArgs),
    /// Plain conditional super-resolution.
    Downscale(DownscaleArgs),
    /// Super-resolution conditioned on station-blended input.
    Assimilate(AssimilateArgs),
    /// Compare a prediction against a reference grid.
    Eval(EvalArgs),
    /// Interpolation baseline.
    Baseline(BaselineArgs),
    /// Re-run a recorded command from its metadata file.
    Replay(ReplayArgs),
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct GenArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// A `gen` directory, or a directory of them.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct DownscaleArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub lr: PathBuf,
    #[arg(long)]
    pub terrain: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides `seeds.sample`.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct AssimilateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub lr: PathBuf,
    #[arg(long)]
    pub terrain: PathBuf,
    #[arg(long)]
    pub stations: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides `seeds.sample`.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub truth: PathBuf,
    /// Restrict point metrics to these station cells.
    #[arg(long)]
    pub holdout: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineMethod {
    Bicubic,
    Bilinear,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct BaselineArgs {
    #[arg(long, value_enum, default_value = "bicubic")]
    pub method: BaselineMethod,
    #[arg(long)]
    pub lr: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub factor: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct ReplayArgs {
    /// Metadata JSON written by an earlier run.
    #[arg(long)]
    pub meta: PathBuf,
    /// Where the replayed output goes; the recorded output is left alone.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FormatVersions {
    pub grid: u16,
    pub checkpoint: u16,
}

/// Everything needed to re-run a command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunMetadata {
    pub tool: String,
    pub version: String,
    pub formats: FormatVersions,
    pub command: Command,
    pub config: RunConfig,
    pub outputs: Vec<PathBuf>,
}

impl Command {
    fn config_path(&self) -> Option<&Path> {
        match self {
            Command::Gen(a) => a.config.as_deref(),
            Command::Train(a) => a.config.as_deref(),
            Command::Downscale(a) => a.config.as_deref(),
            Command::Assimilate(a) => a.config.as_deref(),
            Command::Eval(a) => a.config.as_deref(),
            Command::Baseline(_) | Command::Replay(_) => None,
        }
    }

    fn set_out(&mut self, out: PathBuf) {
        match self {
            Command::Gen(a) => a.out = out,
            Command::Train(a) => a.out = out,
            Command::Downscale(a) => a.out = out,
            Command::Assimilate(a) => a.out = out,
            Command::Eval(a) => a.out = out,
            Command::Baseline(a) => a.out = out,
            Command::Replay(a) => a.out = out,
        }
    }
}

/// `<out>.<suffix>`, e.g. `model.ckpt.meta.json`.
pub fn sidecar(out: &Path, suffix: &str) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".");
    s.push(suffix);
    PathBuf::from(s)
}

pub fn metadata_path(cmd: &Command) -> PathBuf {
    match cmd {
        Command::Gen(a) => a.out.join(GEN_METADATA_FILE),
        Command::Train(a) => sidecar(&a.out, "meta.json"),
        Command::Downscale(a) => sidecar(&a.out, "meta.json"),
        Command::Assimilate(a) => sidecar(&a.out, "meta.json"),
        Command::Eval(a) => sidecar(&a.out, "meta.json"),
        Command::Baseline(a) => sidecar(&a.out, "meta.json"),
        Command::Replay(a) => sidecar(&a.out, "meta.json"),
    }
}

fn scene_dirs(data: &Path) -> Result<Vec<PathBuf>> {
    if data.join(TRUTH_FILE).is_file() {
        return Ok(vec![data.to_path_buf()]);
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(data)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .filter(|p| p.join(TRUTH_FILE).is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(dirs)
}

/// HR truth/terrain patches from every scene under `data`.
pub fn load_training_pairs(data: &Path, cfg: &RunConfig) -> Result<Vec<PatchPair>> {
    let mut pairs = Vec::new();
    for dir in scene_dirs(data)? {
        let truth = io::read_grid(&dir.join(TRUTH_FILE))?;
        let terrain = io::read_grid(&dir.join(TERRAIN_FILE))?;
        truth.ensure_same_shape(&terrain)?;
        let (hr, ht) = if cfg.data.patch_size == 0 {
            (vec![truth], vec![terrain])
        } else {
            let p = cfg.data.patch_size;
            (extract_patches(&truth, p, p)?, extract_patches(&terrain, p, p)?)
        };
        for (h, t) in hr.into_iter().zip(ht) {
            pairs.push(PatchPair::from_hr(h, t, cfg.data.sr_factor)?);
        }
    }
    Ok(pairs)
}

fn write_grid_out(field: &Field2D, out: &Path) -> Result<Vec<PathBuf>> {
    io::write_grid(field, out)?;
    Ok(vec![out.to_path_buf()])
}

fn run_gen(a: &GenArgs, cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let scene = gen_scene(&cfg.synth)?;
    let k = cfg.data.sr_factor;
    let n_da = cfg.data.da_stations;
    let total = n_da + cfg.data.eval_stations;
    let stations = if total == 0 {
        Vec::new()
    } else {
        sample_stations(&scene.truth, total, cfg.seeds.stations)?
    };
    let (da, holdout) = stations.split_at(n_da);
    fs::create_dir_all(&a.out)?;
    let grids = [
        (TRUTH_FILE, scene.truth.clone()),
        (SIM_FILE, scene.sim.clone()),
        (TERRAIN_FILE, scene.terrain.clone()),
        (LR_TRUTH_FILE, coarsen(&scene.truth, k)?),
        (LR_SIM_FILE, coarsen(&scene.sim, k)?),
    ];
    let mut outputs = Vec::new();
    for (name, g) in grids {
        let p = a.out.join(name);
        io::write_grid(&g, &p)?;
        outputs.push(p);
    }
    for (name, s) in [(STATIONS_FILE, da), (HOLDOUT_FILE, holdout)] {
        let p = a.out.join(name);
        io::write_stations(s, &p)?;
        outputs.push(p);
    }
    Ok(outputs)
}

fn run_train(a: &TrainArgs, cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let pairs = load_training_pairs(&a.data, cfg)?;
    let schedule = cfg.schedule.build()?;
    let outcome = train(&pairs, &cfg.model, &schedule, &cfg.train)?;
    io::write_checkpoint(
        &Checkpoint {
            model: outcome.model,
            schedule,
        },
        &a.out,
    )?;
    let loss_path = sidecar(&a.out, "loss.csv");
    io::write_atomic(&loss_path, io::format_losses(&outcome.losses).as_bytes())?;
    Ok(vec![a.out.clone(), loss_path])
}

fn run_downscale(a: &DownscaleArgs, cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let ckpt = io::read_checkpoint(&a.model)?;
    let lr = io::read_grid(&a.lr)?;
    let terrain = io::read_grid(&a.terrain)?;
    let out = downscale(&ckpt.model, &ckpt.schedule, &lr, &terrain, cfg.seeds.sample)?;
    write_grid_out(&out, &a.out)
}

fn run_assimilate(a: &AssimilateArgs, cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let ckpt = io::read_checkpoint(&a.model)?;
    let lr = io::read_grid(&a.lr)?;
    let terrain = io::read_grid(&a.terrain)?;
    let stations = io::read_stations(&a.stations)?;
    validate_stations(&stations, terrain.rows(), terrain.cols())?;
    let lifted = lift_stations(&stations, cfg.profile.hub_height_m, cfg.profile.params())?;
    let out = assimilated_downscale(
        &ckpt.model,
        &ckpt.schedule,
        &lr,
        &terrain,
        &lifted,
        &cfg.assimilation,
        cfg.seeds.sample,
    )?;
    write_grid_out(&out, &a.out)
}

fn run_eval(a: &EvalArgs, cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let pred = io::read_grid(&a.pred)?;
    let truth = io::read_grid(&a.truth)?;
    pred.ensure_same_shape(&truth)?;
    let mask: Option<Vec<(usize, usize)>> = match &a.holdout {
        Some(p) => {
            let s = io::read_stations(p)?;
            validate_stations(&s, truth.rows(), truth.cols())?;
            Some(s.iter().map(|s| (s.row, s.col)).collect())
        }
        None => None,
    };
    let range = cfg.eval.data_range.resolve(&truth)?;
    let report = evaluate(&pred, &truth, mask.as_deref(), range)?;
    let qp = cdf_quantiles(&pred, &cfg.eval.probs)?;
    let qt = cdf_quantiles(&truth, &cfg.eval.probs)?;
    let q: Vec<(f64, f64, f64)> = cfg
        .eval
        .probs
        .iter()
        .zip(qp.into_iter().zip(qt))
        .map(|(&p, (a, b))| (p, a, b))
        .collect();
    io::write_atomic(&a.out, io::format_report(&report, &q).as_bytes())?;
    Ok(vec![a.out.clone()])
}

fn run_baseline(a: &BaselineArgs) -> Result<Vec<PathBuf>> {
    let lr = io::read_grid(&a.lr)?;
    let out = match a.method {
        BaselineMethod::Bicubic => upsample_bicubic(&lr, a.factor)?,
        BaselineMethod::Bilinear => upsample_bilinear(&lr, a.factor)?,
    };
    write_grid_out(&out, &a.out)
}

fn resolve_config(cmd: &Command) -> Result<RunConfig> {
    let mut cfg = match cmd.config_path() {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    match cmd {
        Command::Downscale(DownscaleArgs { seed: Some(s), .. })
        | Command::Assimilate(AssimilateArgs { seed: Some(s), .. }) => cfg.seeds.sample = *s,
        _ => {}
    }
    Ok(cfg)
}

/// Runs `cmd` under an already resolved configuration and records metadata.
pub fn execute(cmd: &Command, cfg: &RunConfig) -> Result<RunMetadata> {
    cfg.validate()?;
    let outputs = match cmd {
        Command::Gen(a) => run_gen(a, cfg)?,
        Command::Train(a) => run_train(a, cfg)?,
        Command::Downscale(a) => run_downscale(a, cfg)?,
        Command::Assimilate(a) => run_assimilate(a, cfg)?,
        Command::Eval(a) => run_eval(a, cfg)?,
        Command::Baseline(a) => run_baseline(a)?,
        Command::Replay(a) => return replay(a),
    };
    let meta = RunMetadata {
        tool: env!("CARGO_PKG_NAME").into(),
        version: env!("CARGO_PKG_VERSION").into(),
        formats: FormatVersions {
            grid: io::GRID_VERSION,
            checkpoint: io::CKPT_VERSION,
        },
        command: cmd.clone(),
        config: cfg.clone(),
        outputs,
    };
    io::write_json(&meta, &metadata_path(cmd))?;
    Ok(meta)
}

pub fn read_metadata(path: &Path) -> Result<RunMetadata> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

/// Re-runs the recorded command with its recorded configuration, writing to
/// `a.out` instead of the original output.
pub fn replay(a: &ReplayArgs) -> Result<RunMetadata> {
    let meta = read_metadata(&a.meta)?;
    if matches!(meta.command, Command::Replay(_)) {
        return Err(Error::InvalidConfig("cannot replay a replay".into()));
    }
    let mut cmd = meta.command;
    cmd.set_out(a.out.clone());
    execute(&cmd, &meta.config)
}

/// Loads the configuration named by `cmd` (or defaults) and runs it.
pub fn run_command(cmd: Command) -> Result<RunMetadata> {
    let cfg = resolve_config(&cmd)?;
    execute(&cmd, &cfg)
}

/// Single-line JSON error for scripts.
pub fn error_line(kind: &str, message: &str) -> String {
    serde_json::json!({ "error": { "kind": kind, "message": message } }).to_string()
}

/// Entry point shared by the binary and tests; returns the exit status.
pub fn main_with_args<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("{}", error_line("usage", first));
            return 2;
        }
    };
    match run_command(cli.command) {
        Ok(_) => 0,
        Err(e) => {
            eprintln!("{}", error_line(e.kind(), &e.to_string()));
            1
        }
    }
}

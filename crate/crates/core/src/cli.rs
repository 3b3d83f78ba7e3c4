//! Command line front end. Every subcommand writes into a hidden staging
//! directory next to its destination and moves the files into place only on
//! success, so a failed run leaves no partial output behind.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::density;
use crate::error::{GdrError, Result};
use crate::experiment::{self, ExperimentConfig, SweepOptions};
use crate::io::{self, dataset, table, Window};
use crate::metrics::MetricReport;
use crate::par;
use crate::phantom::{self, Phantom, PhantomSpec};
use crate::regression::{run_multiresolution, Driver, Mode};

pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const METRICS_SCHEMA: &str = "metrics";
pub const SWEEP_SCHEMA: &str = "dropout-sweep";

#[derive(Debug, Parser)]
#[command(name = "gdr", version, about = "Geodesic density regression for breathing-motion image series")]
pub struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic breathing series with its ground truth.
    Phantom(PhantomArgs),
    /// Corrupt a series with a duplication artifact or slab dropout.
    Inject(InjectArgs),
    /// Fit a geodesic regression to a series.
    Regress(RegressArgs),
    /// Score a regression result against ground truth.
    Eval(EvalArgs),
    /// Run the dropout robustness protocol for both modes.
    SweepDropout(SweepArgs),
    /// Convert between HU and density, or export a slice as 16-bit PGM.
    Convert(ConvertArgs),
}

#[derive(Debug, Args)]
pub struct PhantomArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "48,48")]
    pub dims: Vec<usize>,
    #[arg(long, default_value_t = 5.0)]
    pub spacing: f64,
    /// Peak diaphragm displacement in mm.
    #[arg(long, default_value_t = 16.0)]
    pub amplitude: f64,
    #[arg(long, default_value_t = 6)]
    pub phases: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of tracked landmarks in the last phase.
    #[arg(long, default_value_t = 0)]
    pub landmarks: usize,
}

#[derive(Debug, Args)]
#[command(group(clap::ArgGroup::new("artifact").required(true).args(["duplication_mm", "dropout_fraction"])))]
pub struct InjectArgs {
    /// Series directory; ground truth found there is carried over.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Thickness of a duplicated slab.
    #[arg(long)]
    pub duplication_mm: Option<f64>,
    /// Phase receiving the duplication (default: middle phase).
    #[arg(long, requires = "duplication_mm")]
    pub phase: Option<usize>,
    /// Start of the duplicated slab along the last axis (default: straddling
    /// the diaphragm, which needs a phantom spec in the input's truth).
    #[arg(long, requires = "duplication_mm")]
    pub start_mm: Option<f64>,
    /// Share of voxels dropped, in [0, 0.5].
    #[arg(long)]
    pub dropout_fraction: Option<f64>,
    #[arg(long, default_value_t = 12.0)]
    pub slab_mm: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Gdr,
    Gir,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Mode {
        match m {
            ModeArg::Gdr => Mode::Gdr,
            ModeArg::Gir => Mode::Gir,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum DriverArg {
    Fot,
    Foi,
}

impl From<DriverArg> for Driver {
    fn from(d: DriverArg) -> Driver {
        match d {
            DriverArg::Fot => Driver::Fot,
            DriverArg::Foi => Driver::Foi,
        }
    }
}

#[derive(Debug, Args)]
pub struct ScheduleArgs {
    /// Experiment config (JSON).
    #[arg(long, conflicts_with = "preset")]
    pub config: Option<PathBuf>,
    /// Named schedule: paper-2d, paper-3d or desk-2d.
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub driver: Option<DriverArg>,
    #[arg(long)]
    pub max_iters: Option<usize>,
}

impl ScheduleArgs {
    fn experiment(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(p) = &self.preset {
            cfg.preset = Some(p.clone());
        }
        if let Some(d) = self.driver {
            cfg.driver = Some(d.into());
        }
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct RegressArgs {
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub mode: Option<ModeArg>,
    #[command(flatten)]
    pub schedule: ScheduleArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub truth_dir: PathBuf,
    #[arg(long)]
    pub result_dir: PathBuf,
    /// Observed series for masked SSD and artifact-region errors.
    #[arg(long)]
    pub series_dir: Option<PathBuf>,
    /// Metrics CSV to write.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Series directory with ground truth.
    #[arg(long)]
    pub input: PathBuf,
    /// Result CSV.
    #[arg(long)]
    pub out: PathBuf,
    /// Dropout levels in percent.
    #[arg(long, value_delimiter = ',', default_value = "10,20,30,40,50")]
    pub levels: Vec<f64>,
    #[arg(long, default_value_t = 3)]
    pub repeats: usize,
    #[arg(long, default_value_t = 12.0)]
    pub slab_mm: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub schedule: ScheduleArgs,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ConvertTarget {
    /// HU volume to density volume.
    Density,
    /// Density volume to HU volume.
    Hu,
    /// One slice as a 16-bit PGM.
    Pgm,
}

#[derive(Debug, Args)]
pub struct ConvertArgs {
    /// Input volume header.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum)]
    pub to: ConvertTarget,
    /// Axis orthogonal to the slice (2 for 2-D images).
    #[arg(long, default_value_t = 2)]
    pub axis: usize,
    /// Slice index (default: middle).
    #[arg(long)]
    pub index: Option<usize>,
    /// Fixed window `low,high` (default: slice range).
    #[arg(long, value_parser = parse_window, allow_hyphen_values = true)]
    pub window: Option<Window>,
}

fn parse_window(s: &str) -> std::result::Result<Window, String> {
    let (low, high) = s.split_once(',').ok_or("expected low,high")?;
    let num = |v: &str| v.trim().parse::<f64>().map_err(|e| format!("{v:?}: {e}"));
    Window::new(num(low)?, num(high)?).map_err(|e| e.to_string())
}

/// Hidden sibling directory collecting outputs until the command succeeds.
struct Staging {
    dir: PathBuf,
    dest: PathBuf,
    done: bool,
}

impl Staging {
    /// Stages files that will end up inside `dest`.
    fn new(dest: &Path) -> Result<Self> {
        let name = dest.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "out".into());
        let parent = dest.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        fs::create_dir_all(parent).map_err(|e| GdrError::io(parent, e))?;
        let dir = parent.join(format!(".{name}.partial-{}", std::process::id()));
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| GdrError::io(&dir, e))?;
        }
        fs::create_dir(&dir).map_err(|e| GdrError::io(&dir, e))?;
        Ok(Staging { dir, dest: dest.to_path_buf(), done: false })
    }

    /// Stages a single file destined for `dest`'s parent.
    fn for_file(dest: &Path) -> Result<(Self, PathBuf)> {
        let parent = dest.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new(".")).to_path_buf();
        let name = dest
            .file_name()
            .ok_or_else(|| GdrError::InvalidParameter(format!("{}: not a file path", dest.display())))?;
        let mut s = Staging::new(dest)?;
        s.dest = parent;
        let file = s.dir.join(name);
        Ok((s, file))
    }

    fn path(&self) -> &Path {
        &self.dir
    }

    fn commit(mut self) -> Result<()> {
        fs::create_dir_all(&self.dest).map_err(|e| GdrError::io(&self.dest, e))?;
        let mut entries: Vec<_> = fs::read_dir(&self.dir)
            .map_err(|e| GdrError::io(&self.dir, e))?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()
            .map_err(|e| GdrError::io(&self.dir, e))?;
        entries.sort();
        for src in entries {
            let target = self.dest.join(src.file_name().expect("directory entry has a name"));
            fs::rename(&src, &target).map_err(|e| GdrError::io(&target, e))?;
        }
        self.done = true;
        fs::remove_dir(&self.dir).map_err(|e| GdrError::io(&self.dir, e))
    }
}

impl Drop for Staging {
    fn drop(&mut self) {
        if !self.done {
            let _ = fs::remove_dir_all(&self.dir);
        }
    }
}

fn phantom_cmd(a: &PhantomArgs) -> Result<()> {
    let spec = PhantomSpec {
        dims: a.dims.clone(),
        spacing_mm: a.spacing,
        amplitude_mm: a.amplitude,
        phases: a.phases,
        seed: a.seed,
        landmarks: a.landmarks,
    };
    let p = Phantom::generate(&spec)?;
    let stage = Staging::new(&a.out)?;
    io::write_series(stage.path(), &p.series)?;
    io::write_truth(stage.path(), &p.truth, Some(&spec))?;
    stage.commit()
}

fn inject_cmd(a: &InjectArgs) -> Result<()> {
    let series = io::read_series(&a.input)?;
    let truth = if a.input.join(dataset::TRUTH_MANIFEST).exists() { Some(io::read_truth(&a.input)?) } else { None };
    let out = if let Some(thickness) = a.duplication_mm {
        let phase = a.phase.unwrap_or(series.len() / 2);
        let start = match (a.start_mm, truth.as_ref().and_then(|t| t.1.as_ref())) {
            (Some(s), _) => s,
            (None, Some(spec)) => Phantom::generate(spec)?.duplication_start_mm(phase, thickness),
            (None, None) => {
                return Err(GdrError::InvalidParameter(
                    "--start-mm is required when the input has no phantom spec".into(),
                ))
            }
        };
        let (ts, mask) = phantom::inject_duplication(&series, phase, thickness, start)?;
        let mut masks = ts.masks().to_vec();
        masks[phase] = masks[phase].zip_map(&mask, f64::min)?;
        ts.with_masks(masks)?
    } else {
        let fraction = a.dropout_fraction.expect("argument group guarantees one artifact");
        let masks = phantom::make_dropout_masks(&series, fraction, a.slab_mm, a.seed)?;
        phantom::apply_dropout(&series, masks)?
    };
    let stage = Staging::new(&a.out)?;
    io::write_series(stage.path(), &out)?;
    if let Some((t, spec)) = &truth {
        io::write_truth(stage.path(), t, spec.as_ref())?;
    }
    stage.commit()
}

fn regress_cmd(a: &RegressArgs) -> Result<()> {
    let mut exp = a.schedule.experiment()?;
    if let Some(m) = a.mode {
        exp.mode = Some(m.into());
    }
    let mut cfg = exp.regression_config()?;
    if let Some(n) = a.schedule.max_iters {
        cfg.max_iters = n;
    }
    let input = a.input.clone().or(exp.input).ok_or_else(|| GdrError::Config("no input directory given".into()))?;
    let out = a.out.clone().or(exp.output).ok_or_else(|| GdrError::Config("no output directory given".into()))?;
    let series = io::read_series(&input)?;
    let result = run_multiresolution(&series, &cfg)?;
    let stage = Staging::new(&out)?;
    io::write_result(stage.path(), &result, &cfg)?;
    stage.commit()?;
    println!(
        "final cost {:.6e} (data {:.6e}, metric {:.6e})",
        result.final_cost.total, result.final_cost.data, result.final_cost.metric
    );
    Ok(())
}

fn eval_cmd(a: &EvalArgs) -> Result<()> {
    let (truth, _) = io::read_truth(&a.truth_dir)?;
    let result = io::read_result(&a.result_dir)?;
    let series = a.series_dir.as_deref().map(io::read_series).transpose()?;
    let rows: Vec<MetricReport> = experiment::evaluate(&truth, series.as_ref(), &result)?;
    let (stage, file) = Staging::for_file(&a.out)?;
    table::write_csv(&file, METRICS_SCHEMA, &rows)?;
    stage.commit()
}

fn sweep_cmd(a: &SweepArgs) -> Result<()> {
    let series = io::read_series(&a.input)?;
    let (truth, _) = io::read_truth(&a.input)?;
    let mut cfg = a.schedule.experiment()?.regression_config()?;
    if let Some(n) = a.schedule.max_iters {
        cfg.max_iters = n;
    }
    let opts = SweepOptions {
        levels: a.levels.iter().map(|l| l / 100.0).collect(),
        repeats: a.repeats,
        slab_mm: a.slab_mm,
        seed: a.seed,
        ..SweepOptions::default()
    };
    let rows = experiment::dropout_sweep(&series, &truth, &cfg, &opts)?;
    let (stage, file) = Staging::for_file(&a.out)?;
    table::write_csv(&file, SWEEP_SCHEMA, &rows)?;
    stage.commit()?;
    for (mode, level, mean) in experiment::sweep_means(&rows) {
        println!("{mode:?} {level:>4.0}%  mean jacobian error {mean:.4}");
    }
    Ok(())
}

fn convert_cmd(a: &ConvertArgs) -> Result<()> {
    let input = io::read_scalar(&a.input)?;
    let (stage, file) = Staging::for_file(&a.out)?;
    match a.to {
        ConvertTarget::Density => io::write_scalar(&file, &density::hu_to_density(&input)?)?,
        ConvertTarget::Hu => io::write_scalar(&file, &density::density_to_hu(&input))?,
        ConvertTarget::Pgm => {
            let g = input.geometry();
            let depth = g.dims().get(a.axis).copied().unwrap_or(1);
            let index = a.index.unwrap_or(depth / 2);
            io::export_slice(&input, a.axis, index, a.window, &file)?;
        }
    }
    stage.commit()
}

pub fn execute(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Phantom(a) => phantom_cmd(a),
        Command::Inject(a) => inject_cmd(a),
        Command::Regress(a) => regress_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::SweepDropout(a) => sweep_cmd(a),
        Command::Convert(a) => convert_cmd(a),
    }
}

/// One-line JSON error report.
pub fn error_line(e: &GdrError) -> String {
    serde_json::json!({ "error": e.kind(), "message": e.to_string() }).to_string()
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { 0 };
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new().filter_level(level).parse_default_env().try_init();
    if let Err(e) = par::configure_threads_from_env() {
        eprintln!("{}", error_line(&e));
        return EXIT_USAGE;
    }
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", error_line(&e));
            EXIT_FAILURE
        }
    }
}

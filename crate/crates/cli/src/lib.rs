//! Command-line workbench: synthetic data, training, evaluation, planning,
//! gradient checks and SVG rendering.

pub mod dataset;
pub mod plan;
pub mod svg;

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use stackgrasp_core::metrics::{EvalReport, EvalScene, ScenePrediction};
use stackgrasp_core::planner::symmetrize_scored;
use stackgrasp_core::scene_file::{load_scene, parse_scene_unchecked, read_png, save_scene, scene_image};
use stackgrasp_core::synth::SynthConfig;
use stackgrasp_core::{DataError, ImageRef, ObjectId, PlanError, RgbImage};
use stackgrasp_net::check::{end_to_end_check, end_to_end_options};
use stackgrasp_net::{predict, train_stage, ModelConfig, NetError, Prediction, Sample, Stage};
use stackgrasp_tensor::{load_checkpoint, run_op_suite, save_checkpoint, CheckpointError, Fault, GradCheckOptions, ParamStore};

pub const THREADS_ENV: &str = "STACKGRASP_THREADS";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

macro_rules! data_errors {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Data(e.to_string())
            }
        }
    )*};
}
data_errors!(DataError, NetError, PlanError, CheckpointError, stackgrasp_net::ConfigError, std::io::Error);

type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "stackgrasp", version, about = "Stacked-object grasping and manipulation relation workbench")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic block scenes.
    Synth(SynthArgs),
    /// Train one stage and write a checkpoint plus a CSV loss log.
    Train(TrainArgs),
    /// Score a checkpoint (or the ground truth itself) on a scene directory.
    Eval(EvalArgs),
    /// Run the network on one image.
    Infer(InferArgs),
    /// Relation tree and grasp order for a scene.
    Plan(PlanArgs),
    /// Finite-difference checks of every operator and of the full loss.
    GradCheck(GradCheckArgs),
    /// Draw a scene (and optionally a prediction) as SVG.
    Render(RenderArgs),
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Model configuration file (`key = value` lines).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set iterations=200`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

impl ModelArgs {
    pub fn resolve(&self) -> Result<ModelConfig> {
        let mut cfg = match &self.config {
            Some(p) => ModelConfig::load(p)?,
            None => ModelConfig::default(),
        };
        for kv in &self.overrides {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 2)]
    pub min_objects: usize,
    #[arg(long, default_value_t = 5)]
    pub max_objects: usize,
    #[arg(long, default_value_t = 96)]
    pub image_size: u32,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    pub stage: u8,
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Checkpoint to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Starting checkpoint; required for stage 2.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// CSV loss log; defaults to the checkpoint path with a `.csv` extension.
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Print progress with timings to stderr.
    #[arg(long)]
    pub verbose: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, required_unless_present = "oracle")]
    pub ckpt: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Use the ground truth as the prediction.
    #[arg(long, conflicts_with = "ckpt")]
    pub oracle: bool,
    /// Write the report as JSON here.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BreakCycles {
    /// Report cycles as an error.
    None,
    /// Drop the least confident edge of each cycle.
    Weakest,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    /// PNG image at the model input size.
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Write the prediction as a scene file.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub target: Option<ObjectId>,
    #[arg(long, value_enum, default_value_t = BreakCycles::None)]
    pub break_cycles: BreakCycles,
}

#[derive(Debug, Args)]
pub struct PlanArgs {
    #[arg(long)]
    pub scene: PathBuf,
    /// Predict relations with this checkpoint instead of using the scene's own.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub target: Option<ObjectId>,
    #[arg(long, value_enum, default_value_t = BreakCycles::None)]
    pub break_cycles: BreakCycles,
}

#[derive(Debug, Args)]
pub struct GradCheckArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// First seed; defaults to the configuration seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Random cases per operator.
    #[arg(long, default_value_t = 20)]
    pub seeds: u64,
    /// Initializations of the end-to-end model.
    #[arg(long, default_value_t = 3)]
    pub draws: u64,
    /// Corrupt a backward rule (`relu` or `conv2d`) to see the check fail.
    #[arg(long, value_parser = parse_fault)]
    pub fault: Option<Fault>,
}

fn parse_fault(s: &str) -> std::result::Result<Fault, String> {
    Fault::parse(s).ok_or_else(|| format!("unknown fault {s:?}; expected relu or conv2d"))
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Prediction scene drawn dashed over the ground truth.
    #[arg(long)]
    pub pred: Option<PathBuf>,
}

/// Parses `args`, runs the command and returns the process exit code:
/// 0 success, 1 usage, 2 data, 3 numeric check failure.
pub fn run<I, T>(args: I, out: &mut impl Write, err: &mut impl Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = write!(err, "{}", e.render());
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let result = init_threads().and_then(|()| dispatch(cli.command, out, err));
    match result {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

/// Caps the worker pool when `STACKGRASP_THREADS` is set. The global pool
/// can only be built once per process; later calls keep the first size.
fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Usage(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?;
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn dispatch(cmd: Command, out: &mut impl Write, err: &mut impl Write) -> Result<()> {
    match cmd {
        Command::Synth(a) => synth(a, out, err),
        Command::Train(a) => train(a, out, err),
        Command::Eval(a) => eval(a, out, err),
        Command::Infer(a) => infer(a, out, err),
        Command::Plan(a) => plan_cmd(a, out, err),
        Command::GradCheck(a) => grad_check(a, out, err),
        Command::Render(a) => render(a, out, err),
    }
}

fn echo(err: &mut impl Write, lines: &str) -> Result<()> {
    writeln!(err, "# resolved config")?;
    write!(err, "{lines}")?;
    Ok(())
}

fn echo_pairs(err: &mut impl Write, pairs: &[(&str, String)]) -> Result<()> {
    let text: String = pairs.iter().map(|(k, v)| format!("{k} = {v}\n")).collect();
    echo(err, &text)
}

fn show(p: &Option<PathBuf>) -> String {
    p.as_ref().map_or_else(|| "none".into(), |p| p.display().to_string())
}

fn synth(a: SynthArgs, out: &mut impl Write, err: &mut impl Write) -> Result<()> {
    let cfg = SynthConfig {
        seed: a.seed,
        min_objects: a.min_objects,
        max_objects: a.max_objects,
        image_size: a.image_size,
        ..SynthConfig::default()
    };
    echo_pairs(
        err,
        &[
            ("out", a.out.display().to_string()),
            ("count", a.count.to_string()),
            ("seed", a.seed.to_string()),
            ("min_objects", a.min_objects.to_string()),
            ("max_objects", a.max_objects.to_string()),
            ("image_size", a.image_size.to_string()),
        ],
    )?;
    cfg.validate()?;
    dataset::write_synth(&a.out, a.count, &cfg)?;
    writeln!(out, "wrote {} scenes to {}", a.count, a.out.display())?;
    Ok(())
}

fn load_params(cfg: &ModelConfig, path: &Path) -> Result<ParamStore<f32>> {
    let mut params = stackgrasp_net::init_params::<f32>(cfg, cfg.seed);
    load_checkpoint(path, &mut params).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    Ok(params)
}

fn samples(cfg: &ModelConfig, dir: &Path) -> Result<Vec<Sample>> {
    dataset::load_dir(dir)?
        .iter()
        .map(|(s, img)| Sample::prepare(cfg, s, img).map_err(CliError::from))
        .collect()
}

fn train(a: TrainArgs, out: &mut impl Write, err: &mut impl Write) -> Result<()> {
    let cfg = a.model.resolve()?;
    let stage = if a.stage == 1 { Stage::One } else { Stage::Two };
    if stage == Stage::Two && a.init.is_none() {
        return Err(CliError::Usage("stage 2 needs --init with a stage-1 checkpoint".into()));
    }
    echo(err, &cfg.to_text())?;
    let log_path = a.log.clone().unwrap_or_else(|| a.out.with_extension("csv"));
    let data = samples(&cfg, &a.data)?;
    let mut params = match &a.init {
        Some(p) => load_params(&cfg, p)?,
        None => stackgrasp_net::init_params::<f32>(&cfg, cfg.seed),
    };
    let start = Instant::now();
    let mut progress = Vec::new();
    let log = train_stage(&cfg, &mut params, &data, stage, |r| {
        if a.verbose && (r.iteration % 50 == 0 || r.iteration + 1 == cfg.iterations) {
            progress.push(format!(
                "iter {} lr {} total {:.4} ({:.1}s)",
                r.iteration,
                r.lr,
                r.loss.total,
                start.elapsed().as_secs_f64()
            ));
        }
    })?;
    for line in progress {
        writeln!(err, "{line}")?;
    }
    save_checkpoint(&a.out, &params).map_err(|e| CliError::Data(format!("{}: {e}", a.out.display())))?;
    fs::write(&log_path, log.to_csv()).map_err(|e| DataError::io(&log_path, e))?;
    if let (Some(f), Some(l)) = (log.first(), log.last()) {
        writeln!(
            out,
            "stage {}: {} scenes, {} iterations, total loss {:.6} -> {:.6}",
            a.stage,
            data.len(),
            cfg.iterations,
            f.total,
            l.total
        )?;
    }
    writeln!(out, "checkpoint {}\nlog {}", a.out.display(), log_path.display())?;
    Ok(())
}

fn eval(a: EvalArgs, out: &mut impl Write, err: &mut impl Write) -> Result<()> {
    let cfg = a.model.resolve()?;
    if a.oracle {
        echo_pairs(err, &[("data", a.data.display().to_string()), ("oracle", "true".into())])?;
    } else {
        echo(err, &cfg.to_text())?;
    }
    let (scenes, preds): (Vec<_>, Vec<ScenePrediction>) = if a.oracle {
        let scenes: Vec<_> = dataset::load_dir(&a.data)?.into_iter().map(|(s, _)| s).collect();
        let preds = scenes.iter().map(ScenePrediction::from_ground_truth).collect();
        (scenes, preds)
    } else {
        let params = load_params(&cfg, a.ckpt.as_deref().expect("clap requires --ckpt"))?;
        let data = samples(&cfg, &a.data)?;
        let preds = data
            .par_iter()
            .map(|s| predict(&cfg, &params, &s.image).map(|p| p.for_metrics()))
            .collect::<std::result::Result<_, _>>()?;
        (data.into_iter().map(|s| s.scene).collect(), preds)
    };
    let eval: Vec<EvalScene> = scenes.iter().zip(&preds).map(|(gt, pred)| EvalScene { gt, pred }).collect();
    let report = EvalReport::compute(&eval);
    write!(out, "{}", report.table())?;
    if let Some(p) = &a.report {
        fs::write(p, report.to_json()).map_err(|e| DataError::io(p, e))?;
    }
    Ok(())
}

fn print_plan(out: &mut impl Write, err: &mut impl Write, p: &plan::Plan) -> Result<()> {
    for (a, b) in &p.removed {
        writeln!(err, "dropped edge {a} on {b} to break a cycle")?;
    }
    writeln!(out, "{}", p.tree.to_json())?;
    writeln!(out, "grasp order: {:?}", p.tree.order)?;
    if let Some(t) = &p.target_order {
        writeln!(out, "target order: {t:?}")?;
    }
    Ok(())
}

fn predicted_plan(pred: &Prediction, mode: BreakCycles, target: Option<ObjectId>) -> Result<plan::Plan> {
    let scored = pred.pairs.iter().map(|p| {
        let s = symmetrize_scored(p);
        (s.relation, s.confidence)
    });
    let g = plan::loose_graph(&pred.objects, scored)?;
    Ok(plan::plan(g, mode == BreakCycles::Weakest, target)?)
}

fn infer(a: InferArgs, out: &mut impl Write, err: &mut impl Write) -> Result<()> {
    let cfg = a.model.resolve()?;
    echo(err, &cfg.to_text())?;
    let params = load_params(&cfg, &a.ckpt)?;
    let image = read_png(&a.image)?;
    let pred = predict(&cfg, &params, &image)?;
    if let Some(path) = &a.out {
        let name = a.image.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        save_scene(path, &pred.to_scene(ImageRef::Path(name), image.width, image.height))?;
    }
    writeln!(err, "{} objects, {} grasps", pred.objects.len(), pred.grasps.len())?;
    print_plan(out, err, &predicted_plan(&pred, a.break_cycles, a.target)?)
}

fn plan_cmd(a: PlanArgs, out: &mut impl Write, err: &mut impl Write) -> Result<()> {
    let text = fs::read_to_string(&a.scene).map_err(|e| DataError::io(&a.scene, e))?;
    // Relations are checked by the planner, so contradictory annotations
    // surface as cycles rather than as a validation failure.
    let scene = parse_scene_unchecked(&text).map_err(|e| e.in_file(&a.scene))?;
    let mut echoed = vec![
        ("scene", a.scene.display().to_string()),
        ("ckpt", show(&a.ckpt)),
        ("target", a.target.map_or_else(|| "none".into(), |t| t.to_string())),
        ("break_cycles", format!("{:?}", a.break_cycles).to_lowercase()),
    ];
    let p = match &a.ckpt {
        None => {
            echo_pairs(err, &echoed)?;
            let g = plan::loose_graph(&scene.objects, scene.relations.iter().map(|&r| (r, 1.0)))?;
            plan::plan(g, a.break_cycles == BreakCycles::Weakest, a.target)?
        }
        Some(ckpt) => {
            let cfg = a.model.resolve()?;
            let text = cfg.to_text();
            echoed.extend(text.lines().filter_map(|l| l.split_once(" = ")).map(|(k, v)| (k, v.to_string())));
            echo_pairs(err, &echoed)?;
            let params = load_params(&cfg, ckpt)?;
            let base = a.scene.parent().unwrap_or(Path::new("."));
            let image: RgbImage = scene_image(&scene, base)?;
            let pred = predict(&cfg, &params, &image)?;
            predicted_plan(&pred, a.break_cycles, a.target)?
        }
    };
    print_plan(out, err, &p)
}

fn grad_check(a: GradCheckArgs, out: &mut impl Write, err: &mut impl Write) -> Result<()> {
    let cfg = a.model.resolve()?;
    let seed = a.seed.unwrap_or(cfg.seed);
    echo_pairs(
        err,
        &[
            ("seed", seed.to_string()),
            ("seeds", a.seeds.to_string()),
            ("draws", a.draws.to_string()),
            ("fault", a.fault.map_or_else(|| "none".into(), |f| format!("{f:?}"))),
        ],
    )?;
    let suite = GradCheckOptions {
        seed,
        fault: a.fault,
        ..GradCheckOptions::default()
    };
    let mut reports = run_op_suite(a.seeds, &suite);
    let e2e = GradCheckOptions {
        seed,
        fault: a.fault,
        ..end_to_end_options()
    };
    reports.extend(end_to_end_check(a.draws, &e2e));
    writeln!(out, "{:<24} {:>14} {:>8} {:>8}  result", "check", "max rel error", "checked", "kinks")?;
    let mut failed = 0;
    for r in &reports {
        let ok = r.passed();
        failed += usize::from(!ok);
        writeln!(
            out,
            "{:<24} {:>14.3e} {:>8} {:>8}  {}",
            r.name,
            r.max_rel_error,
            r.checked,
            r.excluded,
            if ok { "PASS" } else { "FAIL" }
        )?;
    }
    if failed > 0 {
        return Err(CliError::Numeric(format!("{failed} of {} gradient checks failed", reports.len())));
    }
    writeln!(out, "all {} gradient checks passed", reports.len())?;
    Ok(())
}

fn render(a: RenderArgs, out: &mut impl Write, err: &mut impl Write) -> Result<()> {
    echo_pairs(
        err,
        &[
            ("scene", a.scene.display().to_string()),
            ("out", a.out.display().to_string()),
            ("pred", show(&a.pred)),
        ],
    )?;
    let gt = load_scene(&a.scene)?;
    let pred = a.pred.as_deref().map(load_scene).transpose()?;
    fs::write(&a.out, svg::render_svg(&gt, pred.as_ref())).map_err(|e| DataError::io(&a.out, e))?;
    writeln!(out, "wrote {}", a.out.display())?;
    Ok(())
}

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hisplat::experiment::{
    cameras_for, check_gradients, evaluate, ground, load_packets, load_scene, read_config, run_experiment,
    train_stage, ExperimentConfig, Outcome,
};
use hisplat::hierarchy::MaskEntry;
use hisplat::io;
use hisplat::losses::prepare_view;
use hisplat::metrics::MetricsReport;
use hisplat::plot::{level_miou_svg, loss_curve_svg};
use hisplat::query::run_query;
use hisplat::raster::{render_features, FeatureMap};
use hisplat::scene::{Level, SemanticLabel};
use hisplat::view::ground_truth_views;
use hisplat::{Error, Result};

/// Prints to stdout, ignoring a closed pipe.
macro_rules! out {
    ($($arg:tt)*) => {{
        use std::io::Write as _;
        let _ = writeln!(std::io::stdout(), $($arg)*);
    }};
}

#[derive(Parser)]
#[command(name = "hisplat", version, about = "Hierarchical semantic feature fields on synthetic Gaussian scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic scene to <output-dir>/scene.json.
    GenerateScene(Common),
    /// Render ground-truth masks per view and build their mask trees.
    BuildHierarchy(Common),
    /// Train semantic features and write a checkpoint.
    Train(Common),
    /// Query one label in one view of a trained checkpoint.
    Query(QueryArgs),
    /// Score every query of a trained checkpoint against ground truth.
    Evaluate(CheckpointArgs),
    /// Run the whole pipeline and write all artifacts.
    Run(Common),
    /// Compare analytic loss gradients with central differences.
    CheckGradients(GradientArgs),
}

/// Options shared by the pipeline commands. Flags override the config file.
#[derive(Args)]
struct Common {
    /// Experiment config (TOML or JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    scene_file: Option<PathBuf>,
    #[arg(long)]
    masks_manifest: Option<PathBuf>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    lambda1: Option<f64>,
    #[arg(long)]
    lambda2: Option<f64>,
    #[arg(long)]
    theta: Option<f64>,
    #[arg(long)]
    omega: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    threshold: Option<f64>,
    /// Number of orbit views.
    #[arg(long)]
    views: Option<u32>,
    #[arg(long)]
    width: Option<u32>,
    #[arg(long)]
    height: Option<u32>,
}

#[derive(Args)]
struct CheckpointArgs {
    #[command(flatten)]
    common: Common,
    /// Trained scene written by `train` or `run`.
    #[arg(long)]
    checkpoint: PathBuf,
}

#[derive(Args)]
struct QueryArgs {
    #[command(flatten)]
    inner: CheckpointArgs,
    #[arg(long, default_value_t = 0)]
    view: u32,
    /// Label level: 1 whole, 2 part, 3 subpart.
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..=3))]
    level: u32,
    #[arg(long)]
    label: u32,
}

#[derive(Args)]
struct GradientArgs {
    /// Number of seeded random instances.
    #[arg(long, default_value_t = 20)]
    instances: u64,
    #[arg(long, default_value_t = 40)]
    probes: usize,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    #[arg(long)]
    lambda1: Option<f64>,
    #[arg(long)]
    lambda2: Option<f64>,
}

impl Common {
    fn config(&self) -> Result<ExperimentConfig> {
        let mut c = match &self.config {
            Some(path) => read_config(path)?,
            None => ExperimentConfig::default(),
        };
        macro_rules! set {
            ($field:expr, $flag:expr) => {
                if let Some(v) = $flag.clone() {
                    $field = v;
                }
            };
        }
        set!(c.seed, self.seed);
        set!(c.output_dir, self.output_dir);
        set!(c.train.iterations, self.iterations);
        set!(c.train.learning_rate, self.learning_rate);
        set!(c.hyper.lambda1, self.lambda1);
        set!(c.hyper.lambda2, self.lambda2);
        set!(c.hyper.theta, self.theta);
        set!(c.hyper.omega, self.omega);
        set!(c.hyper.tau, self.tau);
        set!(c.query.threshold, self.threshold);
        set!(c.views.count, self.views);
        set!(c.views.width, self.width);
        set!(c.views.height, self.height);
        if self.scene_file.is_some() {
            c.scene_file = self.scene_file.clone();
        }
        if self.masks_manifest.is_some() {
            c.masks_manifest = self.masks_manifest.clone();
        }
        c.validate()?;
        Ok(c)
    }
}

fn print_json(value: &serde_json::Value) -> Result<()> {
    out!("{}", io::to_json(value)?.trim_end());
    Ok(())
}

fn level_summary(metrics: &MetricsReport) -> String {
    let mut line = format!("mIoU {:.4}  mBIoU {:.4}  loc {:.4}  HC {:.4}", metrics.miou, metrics.mbiou, metrics.localization_accuracy, metrics.hc);
    for l in &metrics.levels {
        line.push_str(&format!("\n  level {}: mIoU {:.4}  loc {:.4}  ({} queries)", l.level, l.miou, l.localization_accuracy, l.queries));
    }
    line
}

fn generate_scene(args: &Common) -> Result<()> {
    let config = args.config()?;
    let scene = load_scene(&config)?;
    let path = config.output_dir.join("scene.json");
    io::write_scene(&path, &scene)?;
    out!("{} ({} points)", path.display(), scene.len());
    Ok(())
}

fn build_hierarchy(args: &Common) -> Result<()> {
    let config = args.config()?;
    let scene = load_scene(&config)?;
    let cameras = cameras_for(&config)?;
    let dir = &config.output_dir;
    for view in ground_truth_views(&scene, &cameras)? {
        let id = view.packet.view_id;
        for m in &view.packet.masks {
            io::write_mask(&dir.join("masks").join(format!("view_{id:03}")).join(format!("mask_{:04}.hlsm", m.id)), m)?;
        }
        let masks = view.packet.masks.len();
        let prepared = prepare_view(&scene, view.packet, config.hyper.theta)?;
        io::write_tree(&dir.join("trees").join(format!("view_{id:03}.json")), id, &prepared.tree)?;
        out!("view {id}: {masks} masks, {} edges", prepared.tree.edges().len());
    }
    Ok(())
}

fn train(args: &Common) -> Result<()> {
    let config = args.config()?;
    let scene = load_scene(&config)?;
    let trained = train_stage(&config, scene.clone(), load_packets(&config)?)?;
    let dir = &config.output_dir;
    io::write_scene(&dir.join("scene.json"), &scene)?;
    io::write_scene(&dir.join("checkpoint.json"), &trained.scene)?;
    io::write_json(&dir.join("train_report.json"), &trained.report)?;
    io::write_bytes(&dir.join("loss.svg"), loss_curve_svg(&trained.report).as_bytes())?;
    let last = |v: &[f64]| v.last().copied().unwrap_or(f64::NAN);
    out!(
        "loss {:.6e} -> {:.6e} (l_h {:.4e}, l_ins {:.4e}, l_part {:.4e}) in {:.2}s",
        trained.report.total.first().copied().unwrap_or(f64::NAN),
        last(&trained.report.total),
        last(&trained.report.l_h),
        last(&trained.report.l_ins),
        last(&trained.report.l_part),
        trained.report.wall_time_secs
    );
    out!("checksum {}", trained.report.checksum);
    Ok(())
}

fn checkpoint_config(args: &CheckpointArgs) -> Result<(ExperimentConfig, hisplat::scene::Scene)> {
    let config = args.common.config()?;
    let scene = io::read_scene(&args.checkpoint)?;
    Ok((config, scene))
}

fn query(args: &QueryArgs) -> Result<()> {
    let (config, scene) = checkpoint_config(&args.inner)?;
    let cameras = cameras_for(&config)?;
    let views = ground_truth_views(&scene, &cameras)?;
    let view = views
        .iter()
        .find(|v| v.packet.view_id == args.view)
        .ok_or_else(|| Error::Config(format!("view {} not in the {} configured views", args.view, views.len())))?;
    let grounding = ground(&config, &scene, &views)?;
    let label = SemanticLabel {
        level: Level::from_index(args.level).expect("clap restricts the range"),
        id: args.label,
    };
    let map = render_features(&view.weights, &scene.features(), scene.d)?;
    let result = run_query(
        &map,
        &view.weights.coverage(),
        &grounding.decoder,
        &grounding.dictionary,
        label,
        args.view,
        &config.query,
    )?;
    let stem = format!("view_{:03}_l{}_{:04}", args.view, args.level, args.label);
    let dir = &config.output_dir;
    let entry = MaskEntry {
        id: label.id,
        level: label.level,
        view_id: args.view,
        mask: result.mask.clone(),
    };
    io::write_mask(&dir.join("predictions").join(format!("{stem}.hlsm")), &entry)?;
    let scores = FeatureMap::new(1, result.scores.height, result.scores.width, result.scores.values.clone())?;
    io::write_feature_map(&dir.join("scores").join(format!("{stem}.hlsf")), &scores)?;
    let gt = view.mask_for(label);
    print_json(&serde_json::json!({
        "view": args.view,
        "level": args.level,
        "label": args.label,
        "argmax": [result.argmax.0, result.argmax.1],
        "peak": result.peak,
        "area": result.mask.count(),
        "iou": gt.map(|g| hisplat::metrics::iou(&result.mask, &g.mask)).transpose()?,
    }))
}

fn evaluate_checkpoint(args: &CheckpointArgs) -> Result<()> {
    let (config, scene) = checkpoint_config(args)?;
    let views = ground_truth_views(&scene, &cameras_for(&config)?)?;
    let grounding = ground(&config, &scene, &views)?;
    let (_, metrics) = evaluate(&config, &scene, &views, &grounding.decoder, &grounding.dictionary)?;
    io::write_json(&config.output_dir.join("metrics.json"), &metrics)?;
    io::write_bytes(&config.output_dir.join("miou.svg"), level_miou_svg(&metrics).as_bytes())?;
    out!("{}", level_summary(&metrics));
    Ok(())
}

fn run(args: &Common) -> Result<()> {
    let config = args.config()?;
    let outcome: Outcome = run_experiment(&config)?;
    out!("{}", level_summary(&outcome.metrics));
    out!("artifacts in {}", config.output_dir.display());
    Ok(())
}

fn gradients(args: &GradientArgs) -> Result<bool> {
    let mut hp = hisplat::losses::HyperParams::default();
    if let Some(v) = args.lambda1 {
        hp.lambda1 = v;
    }
    if let Some(v) = args.lambda2 {
        hp.lambda2 = v;
    }
    hp.validate()?;
    let rows = check_gradients(0..args.instances, args.probes, &hp)?;
    let mut ok = true;
    for row in &rows {
        match row.max_relative_error {
            Some(e) => {
                let pass = e < args.tolerance;
                ok &= pass;
                out!("seed {:3} {:7} {:.3e} {}", row.seed, row.term, e, if pass { "ok" } else { "FAIL" });
            }
            None => out!("seed {:3} {:7} no differentiable terms", row.seed, row.term),
        }
    }
    Ok(ok)
}

fn dispatch(cli: &Cli) -> Result<ExitCode> {
    match &cli.command {
        Command::GenerateScene(a) => generate_scene(a)?,
        Command::BuildHierarchy(a) => build_hierarchy(a)?,
        Command::Train(a) => train(a)?,
        Command::Query(a) => query(a)?,
        Command::Evaluate(a) => evaluate_checkpoint(a)?,
        Command::Run(a) => run(a)?,
        Command::CheckGradients(a) => {
            if !gradients(a)? {
                eprintln!("error: gradient check exceeded tolerance {}", a.tolerance);
                return Ok(ExitCode::from(3));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

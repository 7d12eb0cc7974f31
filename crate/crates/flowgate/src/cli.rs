//! Command-line interface.
//!
//! Subcommands: `gen` (synthetic dataset), `train` (one training phase),
//! `eval` (inference report + traces at one budget), `sweep` (budget
//! sweep table), `analyze` (bottleneck histogram), `ablate` (variant
//! comparison matrix).
//!
//! Every run resolves its settings as defaults < `--config` file <
//! command-line flags and writes the resolved set next to its outputs.
//! Outputs are byte-reproducible for a pinned seed. Exit codes: 0
//! success, 2 usage or configuration error, 3 numerical failure.
//!
//! The default output root is `./out`, overridable with the
//! `FLOWGATE_OUT_DIR` environment variable; an explicit `--out` always
//! wins.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

use crate::config::{render_config, FileConfig};
use crate::engine::{
    batch_indices, eval_sample, train_step, InferMode, IterationTrace, Model, Phase, TrainConfig,
    Variant,
};
use crate::error::{Error, Result};
use crate::flownet::ModelConfig;
use crate::metrics::{aggregate_report, bottleneck_histogram, histogram_csv, report_csv};
use crate::optim::{Method, Sgd};
use crate::synthdata::{Dataset, GenConfig, SynthSample};
use crate::{engine, metrics};

#[derive(Parser)]
#[command(
    name = "flowgate",
    version,
    about = "Recurrent optical flow with a learned per-iteration skip gate"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Cmd,
}

#[derive(Subcommand)]
pub enum Cmd {
    /// Generate a synthetic flow dataset.
    Gen(GenArgs),
    /// Run one training phase and write a checkpoint plus a loss log.
    Train(TrainArgs),
    /// Evaluate a checkpoint at one budget; write a report and traces.
    Eval(EvalArgs),
    /// Evaluate across a list of budgets; write the sweep table.
    Sweep(SweepArgs),
    /// Fixed-length inference; write the bottleneck-step histogram.
    Analyze(AnalyzeArgs),
    /// Train and evaluate every method variant; write a comparison table.
    Ablate(AblateArgs),
}

/// Returns the process exit code for an error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::NonFinite(_) => 3,
        _ => 2,
    }
}

/// Runs one parsed command.
pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Cmd::Gen(a) => cmd_gen(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Sweep(a) => cmd_sweep(a),
        Cmd::Analyze(a) => cmd_analyze(a),
        Cmd::Ablate(a) => cmd_ablate(a),
    }
}

/// Default output root: `$FLOWGATE_OUT_DIR` or `./out`.
fn out_root() -> PathBuf {
    std::env::var_os("FLOWGATE_OUT_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn resolve_out(explicit: Option<PathBuf>, default_name: &str) -> PathBuf {
    explicit.unwrap_or_else(|| out_root().join(default_name))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    fs::write(path, text)?;
    Ok(())
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut hex = String::with_capacity(64);
    for b in digest {
        write!(hex, "{b:02x}").expect("string write");
    }
    hex
}

fn load_file_config(path: &Option<PathBuf>) -> Result<FileConfig> {
    match path {
        Some(p) => FileConfig::load(p),
        None => Ok(FileConfig::empty()),
    }
}

/// `flag` beats the config file beats `default`.
fn setting<T: std::str::FromStr>(
    flag: Option<T>,
    fc: &mut FileConfig,
    key: &str,
    default: T,
) -> Result<T> {
    match flag {
        Some(v) => {
            fc.take(key);
            Ok(v)
        }
        None => Ok(fc.take_parsed(key)?.unwrap_or(default)),
    }
}

/// Like `setting` but without a default.
fn setting_opt<T: std::str::FromStr>(
    flag: Option<T>,
    fc: &mut FileConfig,
    key: &str,
) -> Result<Option<T>> {
    match flag {
        Some(v) => {
            fc.take(key);
            Ok(Some(v))
        }
        None => fc.take_parsed(key),
    }
}

// ---------------------------------------------------------------- gen --

#[derive(Args)]
pub struct GenArgs {
    /// Flat key=value config file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output dataset file.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Total sample count (split evenly between difficulties).
    #[arg(long)]
    pub n: Option<usize>,
    /// Easy-sample count (overrides the even split).
    #[arg(long)]
    pub easy: Option<usize>,
    /// Hard-sample count (overrides the even split).
    #[arg(long)]
    pub hard: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Image height in pixels.
    #[arg(long)]
    pub height: Option<usize>,
    /// Image width in pixels.
    #[arg(long)]
    pub width: Option<usize>,
}

fn cmd_gen(args: GenArgs) -> Result<()> {
    let mut fc = load_file_config(&args.config)?;
    let n = setting(args.n, &mut fc, "n", 128)?;
    let easy = setting_opt(args.easy, &mut fc, "easy")?;
    let hard = setting_opt(args.hard, &mut fc, "hard")?;
    let seed = setting(args.seed, &mut fc, "seed", 7)?;
    let height = setting(args.height, &mut fc, "height", 32)?;
    let width = setting(args.width, &mut fc, "width", 64)?;
    let out = resolve_out(
        args.out.or_else(|| fc.take("out").map(PathBuf::from)),
        "dataset.fgds",
    );
    fc.finish()?;

    let (n_easy, n_hard) = match (easy, hard) {
        (Some(e), Some(h)) => (e, h),
        (Some(e), None) => (e, n.saturating_sub(e)),
        (None, Some(h)) => (n.saturating_sub(h), h),
        (None, None) => (n / 2, n - n / 2),
    };
    if n_easy + n_hard == 0 {
        return Err(Error::config("gen: refusing to write an empty dataset"));
    }
    let gen_cfg = GenConfig {
        h: height,
        w: width,
        ..GenConfig::default()
    };
    let data = Dataset::generate(seed, n_easy, n_hard, &gen_cfg)?;
    let bytes = data.encode();
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    fs::write(&out, &bytes)?;

    let resolved = vec![
        ("command".into(), "gen".into()),
        ("n".into(), n.to_string()),
        ("easy".into(), n_easy.to_string()),
        ("hard".into(), n_hard.to_string()),
        ("seed".into(), seed.to_string()),
        ("height".into(), height.to_string()),
        ("width".into(), width.to_string()),
    ];
    let config_path = out.with_extension("fgds.config");
    write_text(&config_path, &render_config(&resolved))?;
    println!("samples={} sha256={}", n_easy + n_hard, sha256_hex(&bytes));
    Ok(())
}

// -------------------------------------------------------------- train --

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Training dataset file.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Checkpoint to start from (otherwise seeded init).
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// full | l1 | b | p | exit (case-insensitive).
    #[arg(long)]
    pub variant: Option<String>,
    /// backbone | policy | joint.
    #[arg(long, conflicts_with = "freeze_backbone")]
    pub phase: Option<String>,
    /// Shorthand for `--phase policy`.
    #[arg(long)]
    pub freeze_backbone: bool,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub t_train: Option<usize>,
    #[arg(long)]
    pub t_test: Option<usize>,
    #[arg(long)]
    pub lambda_res: Option<f64>,
    #[arg(long)]
    pub lambda_incre: Option<f64>,
    #[arg(long)]
    pub omega: Option<f64>,
    /// Lower end of the training budget range.
    #[arg(long)]
    pub r_min: Option<f64>,
    /// Upper end of the training budget range.
    #[arg(long)]
    pub r_max: Option<f64>,
    /// Draw one budget per sample instead of one per batch.
    #[arg(long)]
    pub per_sample_r: bool,
}

/// Settings shared by every command that runs the model.
struct RunSettings {
    cfg: TrainConfig,
    dataset: PathBuf,
}

fn resolve_train_config(args: &TrainArgs, fc: &mut FileConfig) -> Result<RunSettings> {
    let defaults = TrainConfig::default();
    let variant = setting(args.variant.clone(), fc, "variant", "full".into())?;
    let phase_flag = if args.freeze_backbone {
        Some("policy".to_string())
    } else {
        args.phase.clone()
    };
    let phase = setting(phase_flag, fc, "phase", "backbone".into())?;
    let dataset = setting_opt(args.dataset.clone(), fc, "dataset")?
        .ok_or_else(|| Error::config("train: --dataset is required"))?;
    let cfg = TrainConfig {
        model: ModelConfig::default(),
        t_train: setting(args.t_train, fc, "t_train", defaults.t_train)?,
        t_test: setting(args.t_test, fc, "t_test", defaults.t_test)?,
        r_range: (
            setting(args.r_min, fc, "r_min", defaults.r_range.0)?,
            setting(args.r_max, fc, "r_max", defaults.r_range.1)?,
        ),
        lr: setting(args.lr, fc, "lr", defaults.lr)?,
        momentum: setting(args.momentum, fc, "momentum", defaults.momentum)?,
        batch_size: setting(args.batch_size, fc, "batch_size", defaults.batch_size)?,
        steps: setting(args.steps, fc, "steps", defaults.steps)?,
        seed: setting(args.seed, fc, "seed", defaults.seed)?,
        variant: Variant::parse(&variant.to_lowercase())?,
        phase: Phase::parse(&phase.to_lowercase())?,
        per_sample_r: args.per_sample_r || fc.take_parsed("per_sample_r")?.unwrap_or(false),
        lambda_res: setting(args.lambda_res, fc, "lambda_res", defaults.lambda_res)?,
        lambda_incre: setting(args.lambda_incre, fc, "lambda_incre", defaults.lambda_incre)?,
        omega: setting(args.omega, fc, "omega", defaults.omega)?,
    };
    cfg.validate()?;
    Ok(RunSettings { cfg, dataset })
}

fn train_config_provenance(cfg: &TrainConfig, dataset: &Path) -> Vec<(String, String)> {
    vec![
        ("dataset".into(), dataset.display().to_string()),
        ("t_train".into(), cfg.t_train.to_string()),
        ("t_test".into(), cfg.t_test.to_string()),
        ("lr".into(), cfg.lr.to_string()),
        ("momentum".into(), cfg.momentum.to_string()),
        ("batch_size".into(), cfg.batch_size.to_string()),
        ("steps".into(), cfg.steps.to_string()),
        ("seed".into(), cfg.seed.to_string()),
        ("variant".into(), cfg.variant.as_str().into()),
        ("phase".into(), cfg.phase.as_str().into()),
        ("per_sample_r".into(), cfg.per_sample_r.to_string()),
        ("r_min".into(), cfg.r_range.0.to_string()),
        ("r_max".into(), cfg.r_range.1.to_string()),
        ("lambda_res".into(), cfg.lambda_res.to_string()),
        ("lambda_incre".into(), cfg.lambda_incre.to_string()),
        ("omega".into(), cfg.omega.to_string()),
    ]
}

const TRAIN_LOG_HEADER: &str = "# schema: flowgate-train-log-v1\nstep,r,flow,resource,incremental,overall\n";

/// Runs the training loop with last-good checkpoint semantics: on a
/// non-finite loss the pre-step parameters and the partial log are
/// written before the error propagates (exit code 3).
fn run_train_loop(
    model: &mut Model,
    data: &Dataset,
    cfg: &TrainConfig,
    out_dir: &Path,
) -> Result<String> {
    let mut opt = Sgd::new(Method::Momentum { mu: cfg.momentum }, cfg.lr)?;
    let mut log = String::from(TRAIN_LOG_HEADER);
    for step in 0..cfg.steps as u64 {
        let picks: Vec<&SynthSample> =
            batch_indices(cfg.seed, step, data.samples.len(), cfg.batch_size)
                .into_iter()
                .map(|ix| &data.samples[ix])
                .collect();
        match train_step(model, &picks, cfg, &mut opt, step) {
            Ok(out) => {
                let r = out.r.iter().sum::<f64>() / out.r.len() as f64;
                let b = &out.breakdown;
                writeln!(
                    log,
                    "{step},{r},{},{},{},{}",
                    b.flow, b.resource, b.incremental, b.overall
                )
                .expect("string write");
            }
            Err(err) => {
                if matches!(err, Error::NonFinite(_)) {
                    // The failed step left the parameters untouched;
                    // retain them as the last-good checkpoint.
                    model.save(&out_dir.join("model.fgck"))?;
                    write_text(&out_dir.join("train_log.csv"), &log)?;
                }
                return Err(err);
            }
        }
    }
    Ok(log)
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut fc = load_file_config(&args.config)?;
    let init = setting_opt(args.init.clone(), &mut fc, "init")?;
    let out = resolve_out(
        args.out.clone().or_else(|| fc.take("out").map(PathBuf::from)),
        "train",
    );
    let settings = resolve_train_config(&args, &mut fc)?;
    fc.finish()?;
    let cfg = settings.cfg;

    let data = Dataset::read_file(&settings.dataset)?;
    let mut model = match &init {
        Some(path) => Model::load(cfg.model, path)?,
        None => Model::init(cfg.model, cfg.seed)?,
    };
    fs::create_dir_all(&out)?;
    let log = run_train_loop(&mut model, &data, &cfg, &out)?;
    model.save(&out.join("model.fgck"))?;
    write_text(&out.join("train_log.csv"), &log)?;

    let mut resolved = train_config_provenance(&cfg, &settings.dataset);
    resolved.push(("command".into(), "train".into()));
    if let Some(p) = &init {
        resolved.push(("init".into(), p.display().to_string()));
    }
    write_text(&out.join("run.config"), &render_config(&resolved))?;
    let last = log.lines().last().unwrap_or("");
    println!("steps={} last={last}", cfg.steps);
    Ok(())
}

// --------------------------------------------------------------- eval --

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Budget in (0, 1].
    #[arg(long)]
    pub r: Option<f64>,
    /// policy | exit | fixed.
    #[arg(long)]
    pub mode: Option<String>,
    /// Update count for fixed mode.
    #[arg(long = "t", alias = "T")]
    pub t: Option<usize>,
    #[arg(long)]
    pub t_test: Option<usize>,
    /// Variant the checkpoint was trained as (controls policy inputs).
    #[arg(long)]
    pub variant: Option<String>,
}

/// Everything an inference-side command needs.
struct EvalSettings {
    cfg: TrainConfig,
    dataset: PathBuf,
    checkpoint: PathBuf,
}

fn resolve_eval_settings(
    fc: &mut FileConfig,
    dataset: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    t_test: Option<usize>,
    variant: Option<String>,
) -> Result<EvalSettings> {
    let defaults = TrainConfig::default();
    let dataset = setting_opt(dataset, fc, "dataset")?
        .ok_or_else(|| Error::config("--dataset is required"))?;
    let checkpoint = setting_opt(checkpoint, fc, "checkpoint")?
        .ok_or_else(|| Error::config("--checkpoint is required"))?;
    let variant = setting(variant, fc, "variant", "full".into())?;
    let cfg = TrainConfig {
        t_test: setting(t_test, fc, "t_test", defaults.t_test)?,
        variant: Variant::parse(&variant.to_lowercase())?,
        ..defaults
    };
    cfg.validate()?;
    Ok(EvalSettings {
        cfg,
        dataset,
        checkpoint,
    })
}

fn parse_mode(name: &str, fixed_t: Option<usize>, t_test: usize) -> Result<InferMode> {
    match name {
        "policy" => Ok(InferMode::Policy),
        "exit" => Ok(InferMode::Exit),
        "fixed" => Ok(InferMode::Fixed(fixed_t.unwrap_or(t_test))),
        other => Err(Error::config(format!(
            "unknown mode {other:?} (expected policy, exit or fixed)"
        ))),
    }
}

fn mode_label(mode: InferMode) -> String {
    match mode {
        InferMode::Policy => "policy".into(),
        InferMode::Exit => "exit".into(),
        InferMode::Fixed(k) => format!("fixed({k})"),
    }
}

/// Runs inference over the whole dataset at one budget.
fn eval_set(
    model: &Model,
    data: &Dataset,
    r: f64,
    cfg: &TrainConfig,
    mode: InferMode,
) -> Result<(Vec<metrics::SampleEval>, Vec<IterationTrace>)> {
    let mut evals = Vec::with_capacity(data.samples.len());
    let mut traces = Vec::with_capacity(data.samples.len());
    for sample in &data.samples {
        let (ev, out) = eval_sample(model, sample, r, cfg, mode)?;
        evals.push(ev);
        traces.push(out.trace);
    }
    Ok((evals, traces))
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let mut fc = load_file_config(&args.config)?;
    let out = resolve_out(
        args.out.clone().or_else(|| fc.take("out").map(PathBuf::from)),
        "eval",
    );
    let r = setting(args.r, &mut fc, "r", 0.5)?;
    let mode_name = setting(args.mode.clone(), &mut fc, "mode", "policy".into())?;
    let fixed_t = setting_opt(args.t, &mut fc, "t")?;
    let settings = resolve_eval_settings(
        &mut fc,
        args.dataset.clone(),
        args.checkpoint.clone(),
        args.t_test,
        args.variant.clone(),
    )?;
    fc.finish()?;
    let mode = parse_mode(&mode_name.to_lowercase(), fixed_t, settings.cfg.t_test)?;

    let data = Dataset::read_file(&settings.dataset)?;
    let model = Model::load(settings.cfg.model, &settings.checkpoint)?;
    let (evals, traces) = eval_set(&model, &data, r, &settings.cfg, mode)?;
    let rows = aggregate_report(&evals)?;

    fs::create_dir_all(&out)?;
    write_text(&out.join("report.csv"), &report_csv(&rows))?;
    write_text(&out.join("traces.csv"), &engine::trace_csv(&traces))?;
    let resolved = vec![
        ("command".into(), "eval".into()),
        ("dataset".into(), settings.dataset.display().to_string()),
        (
            "checkpoint".into(),
            settings.checkpoint.display().to_string(),
        ),
        ("r".into(), r.to_string()),
        ("mode".into(), mode_label(mode)),
        ("t_test".into(), settings.cfg.t_test.to_string()),
        ("variant".into(), settings.cfg.variant.as_str().into()),
    ];
    write_text(&out.join("run.config"), &render_config(&resolved))?;
    let all = rows.iter().find(|row| row.group == "all").expect("all row");
    println!(
        "samples={} epe={} f1_all={} updates_mean={}",
        all.n, all.epe_mean, all.f1_all, all.updates_mean
    );
    Ok(())
}

// -------------------------------------------------------------- sweep --

#[derive(Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Comma-separated budget list, e.g. 0.2,0.4,0.6.
    #[arg(long)]
    pub r: Option<String>,
    #[arg(long)]
    pub t_test: Option<usize>,
    #[arg(long)]
    pub variant: Option<String>,
}

fn parse_r_list(raw: &str) -> Result<Vec<f64>> {
    let mut rs = Vec::new();
    for part in raw.split(',').filter(|p| !p.trim().is_empty()) {
        let r: f64 = part
            .trim()
            .parse()
            .map_err(|_| Error::config(format!("bad budget value {part:?}")))?;
        if !(r.is_finite() && 0.0 < r && r <= 1.0) {
            return Err(Error::config(format!("budget {r} outside (0, 1]")));
        }
        rs.push(r);
    }
    if rs.is_empty() {
        return Err(Error::config("empty budget list"));
    }
    Ok(rs)
}

fn cmd_sweep(args: SweepArgs) -> Result<()> {
    let mut fc = load_file_config(&args.config)?;
    let out = resolve_out(
        args.out.clone().or_else(|| fc.take("out").map(PathBuf::from)),
        "sweep",
    );
    let r_raw = setting(args.r.clone(), &mut fc, "r", "0.2,0.4,0.6,0.8,1.0".into())?;
    let settings = resolve_eval_settings(
        &mut fc,
        args.dataset.clone(),
        args.checkpoint.clone(),
        args.t_test,
        args.variant.clone(),
    )?;
    fc.finish()?;
    let r_list = parse_r_list(&r_raw)?;

    let data = Dataset::read_file(&settings.dataset)?;
    let model = Model::load(settings.cfg.model, &settings.checkpoint)?;
    let mut evals = Vec::new();
    for &r in &r_list {
        let (mut evs, _) = eval_set(&model, &data, r, &settings.cfg, InferMode::Policy)?;
        evals.append(&mut evs);
    }
    // One row per budget: the "all" group, ascending r.
    let rows: Vec<metrics::ReportRow> = aggregate_report(&evals)?
        .into_iter()
        .filter(|row| row.group == "all")
        .collect();

    fs::create_dir_all(&out)?;
    write_text(&out.join("sweep.csv"), &report_csv(&rows))?;
    let resolved = vec![
        ("command".into(), "sweep".into()),
        ("dataset".into(), settings.dataset.display().to_string()),
        (
            "checkpoint".into(),
            settings.checkpoint.display().to_string(),
        ),
        ("r".into(), r_raw.clone()),
        ("t_test".into(), settings.cfg.t_test.to_string()),
        ("variant".into(), settings.cfg.variant.as_str().into()),
    ];
    write_text(&out.join("run.config"), &render_config(&resolved))?;
    println!("budgets={} rows={}", r_list.len(), rows.len());
    Ok(())
}

// ------------------------------------------------------------ analyze --

#[derive(Args)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// EPE closeness defining "no further improvement".
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long)]
    pub t_test: Option<usize>,
}

/// Per-sample EPE after every step of a fixed full-length run, in image
/// pixels.
fn per_step_epe(model: &Model, sample: &SynthSample, cfg: &TrainConfig) -> Result<Vec<f64>> {
    let out = engine::infer(model, sample, 1.0, cfg, InferMode::Fixed(cfg.t_test))?;
    let scale = cfg.model.scale as f64;
    let (gt_feat, valid) = sample.to_feature_grid(cfg.model.scale)?;
    let gt_px = crate::Tensor::from_vec(
        gt_feat.shape(),
        gt_feat.data().iter().map(|v| v * scale).collect(),
    )?;
    out.per_step_flow
        .iter()
        .map(|flow| {
            let pred =
                crate::Tensor::from_vec(gt_feat.shape(), flow.iter().map(|v| v * scale).collect())?;
            metrics::epe(&pred, &gt_px, &valid)
        })
        .collect()
}

fn cmd_analyze(args: AnalyzeArgs) -> Result<()> {
    let mut fc = load_file_config(&args.config)?;
    let out = resolve_out(
        args.out.clone().or_else(|| fc.take("out").map(PathBuf::from)),
        "analyze",
    );
    let tol = setting(args.tol, &mut fc, "tol", 0.01)?;
    let settings = resolve_eval_settings(
        &mut fc,
        args.dataset.clone(),
        args.checkpoint.clone(),
        args.t_test,
        None,
    )?;
    fc.finish()?;

    let data = Dataset::read_file(&settings.dataset)?;
    let model = Model::load(settings.cfg.model, &settings.checkpoint)?;
    let sequences: Vec<Vec<f64>> = data
        .samples
        .iter()
        .map(|s| per_step_epe(&model, s, &settings.cfg))
        .collect::<Result<_>>()?;
    let histogram = bottleneck_histogram(&sequences, tol)?;

    fs::create_dir_all(&out)?;
    write_text(&out.join("bottleneck.csv"), &histogram_csv(&histogram))?;
    let resolved = vec![
        ("command".into(), "analyze".into()),
        ("dataset".into(), settings.dataset.display().to_string()),
        (
            "checkpoint".into(),
            settings.checkpoint.display().to_string(),
        ),
        ("tol".into(), tol.to_string()),
        ("t_test".into(), settings.cfg.t_test.to_string()),
    ];
    write_text(&out.join("run.config"), &render_config(&resolved))?;
    let before_last: f64 = histogram[..histogram.len() - 1].iter().sum();
    println!(
        "samples={} mass_before_final_step={before_last}",
        data.samples.len()
    );
    Ok(())
}

// ------------------------------------------------------------- ablate --

#[derive(Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Shared pretrained backbone; each variant then trains its policy
    /// on top (omit to train each variant jointly from scratch).
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Training steps per variant.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Evaluation budget.
    #[arg(long)]
    pub r: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub t_train: Option<usize>,
    #[arg(long)]
    pub t_test: Option<usize>,
}

fn cmd_ablate(args: AblateArgs) -> Result<()> {
    let mut fc = load_file_config(&args.config)?;
    let out = resolve_out(
        args.out.clone().or_else(|| fc.take("out").map(PathBuf::from)),
        "ablate",
    );
    let defaults = TrainConfig::default();
    let dataset = setting_opt(args.dataset.clone(), &mut fc, "dataset")?
        .ok_or_else(|| Error::config("ablate: --dataset is required"))?;
    let init = setting_opt(args.init.clone(), &mut fc, "init")?;
    let steps = setting(args.steps, &mut fc, "steps", 100)?;
    let seed = setting(args.seed, &mut fc, "seed", defaults.seed)?;
    let r = setting(args.r, &mut fc, "r", 0.5)?;
    let base = TrainConfig {
        lr: setting(args.lr, &mut fc, "lr", defaults.lr)?,
        batch_size: setting(args.batch_size, &mut fc, "batch_size", defaults.batch_size)?,
        t_train: setting(args.t_train, &mut fc, "t_train", defaults.t_train)?,
        t_test: setting(args.t_test, &mut fc, "t_test", defaults.t_test)?,
        steps,
        seed,
        phase: if init.is_some() {
            Phase::Policy
        } else {
            Phase::Joint
        },
        ..defaults
    };
    base.validate()?;
    fc.finish()?;

    let data = Dataset::read_file(&dataset)?;
    fs::create_dir_all(&out)?;
    let mut table = String::from("# schema: flowgate-ablate-v1\n");
    table.push_str("variant,n,epe_mean,f1_all,updates_mean,flops_mean\n");

    // Every trained variant, then the early-exit row on the first
    // variant's weights (it trains exactly like the full method).
    let trained = [
        Variant::Full,
        Variant::L1,
        Variant::NoContext,
        Variant::NoImprovement,
    ];
    let mut full_model: Option<Model> = None;
    for variant in trained {
        let cfg = TrainConfig { variant, ..base.clone() };
        let mut model = match &init {
            Some(path) => Model::load(cfg.model, path)?,
            None => Model::init(cfg.model, cfg.seed)?,
        };
        let variant_dir = out.join(format!("variant_{}", variant.as_str()));
        fs::create_dir_all(&variant_dir)?;
        let log = run_train_loop(&mut model, &data, &cfg, &variant_dir)?;
        model.save(&variant_dir.join("model.fgck"))?;
        write_text(&variant_dir.join("train_log.csv"), &log)?;

        let (evals, traces) = eval_set(&model, &data, r, &cfg, InferMode::Policy)?;
        let rows = aggregate_report(&evals)?;
        let all = rows.iter().find(|row| row.group == "all").expect("all row");
        writeln!(
            table,
            "{},{},{},{},{},{}",
            variant.as_str(),
            all.n,
            all.epe_mean,
            all.f1_all,
            all.updates_mean,
            all.flops_mean
        )
        .expect("string write");
        write_text(&variant_dir.join("traces.csv"), &engine::trace_csv(&traces))?;
        if variant == Variant::Full {
            full_model = Some(model);
        }
    }

    let exit_model = full_model.expect("full variant trained");
    let exit_cfg = TrainConfig {
        variant: Variant::Exit,
        ..base.clone()
    };
    let (evals, traces) = eval_set(&exit_model, &data, r, &exit_cfg, InferMode::Exit)?;
    let rows = aggregate_report(&evals)?;
    let all = rows.iter().find(|row| row.group == "all").expect("all row");
    writeln!(
        table,
        "exit,{},{},{},{},{}",
        all.n, all.epe_mean, all.f1_all, all.updates_mean, all.flops_mean
    )
    .expect("string write");
    let exit_dir = out.join("variant_exit");
    fs::create_dir_all(&exit_dir)?;
    write_text(&exit_dir.join("traces.csv"), &engine::trace_csv(&traces))?;

    write_text(&out.join("ablate.csv"), &table)?;
    let mut resolved = train_config_provenance(&base, &dataset);
    resolved.retain(|(k, _)| k != "variant");
    resolved.push(("command".into(), "ablate".into()));
    resolved.push(("r".into(), r.to_string()));
    if let Some(p) = &init {
        resolved.push(("init".into(), p.display().to_string()));
    }
    write_text(&out.join("run.config"), &render_config(&resolved))?;
    println!("variants=5 r={r}");
    Ok(())
}

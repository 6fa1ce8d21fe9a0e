//! Command-line interface. [`run`] executes one command in-process and
//! returns the exit code: 0 success, 1 usage error, 2 data error, 3 runtime
//! error.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::{parse_scene_spec, parse_train_config};
use crate::error::Error;
use crate::flow::{extract_flow_field, extract_track, NeuralField, TimeEncoding, Timeline};
use crate::geometry::{Point3, PointCloudSequence, DEFAULT_GROUND_HEIGHT};
use crate::io::{
    load_checkpoint, load_flow_field, load_sequence, read_text, save_checkpoint, save_flow_field, save_sequence,
    save_text, save_trajectory,
};
use crate::metrics::{collect_samples, evaluate, BucketSpec};
use crate::nn::Activation;
use crate::synth::{generate, SceneSpec};
use crate::trainer::{fit_with_observer, run_ablation, AblationVariant, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "pdeflow", version, about = "Sequence-wide scene flow with a space-time neural prior")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset with ground-truth flow.
    Synth(SynthArgs),
    /// Fit a prior to a dataset and write a checkpoint and training log.
    Fit(FitArgs),
    /// Export per-frame flow from a checkpoint.
    Flow(FlowArgs),
    /// Integrate one point through the fitted field.
    Track(TrackArgs),
    /// Score exported flow against the dataset's ground truth.
    Eval(EvalArgs),
    /// Train and score the fixed ablation grid.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Scene file (key=value), applied on top of the desk-av preset.
    #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
    spec: Option<PathBuf>,
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Points at or below this height are dropped as ground.
    #[arg(long, default_value_t = DEFAULT_GROUND_HEIGHT)]
    ground_height: f64,
}

#[derive(Debug, Args)]
struct TrainFlags {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long)]
    subsequence: Option<usize>,
    #[arg(long)]
    no_multistep: bool,
    #[arg(long)]
    no_cycle: bool,
    #[arg(long, value_parser = parse_encoding)]
    time_encoding: Option<TimeEncoding>,
    #[arg(long, value_parser = parse_activation)]
    activation: Option<Activation>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Debug, Args)]
struct FitArgs {
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Training log path; defaults to the checkpoint path plus `.log`.
    #[arg(long)]
    log: Option<PathBuf>,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Debug, Args)]
struct FlowArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct TrackArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    /// Starting position as "x y z".
    #[arg(long, value_parser = parse_point, allow_hyphen_values = true)]
    start: Point3,
    /// Frame index where the track starts.
    #[arg(long)]
    t0: usize,
    /// Frame index where the track ends; may precede `t0`.
    #[arg(long)]
    t1: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    flow: PathBuf,
    /// Key-value report path; the readable table goes to stdout.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct AblateArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn parse_encoding(s: &str) -> Result<TimeEncoding, String> {
    TimeEncoding::parse(s).map_err(|e| e.to_string())
}

fn parse_activation(s: &str) -> Result<Activation, String> {
    Activation::parse(s).map_err(|e| e.to_string())
}

fn parse_point(s: &str) -> Result<Point3, String> {
    let v: Vec<f64> = s
        .split_whitespace()
        .map(|t| t.parse::<f64>().ok().filter(|x| x.is_finite()))
        .collect::<Option<_>>()
        .ok_or_else(|| format!("`{s}` is not three finite numbers"))?;
    match v[..] {
        [x, y, z] => Ok(Point3::new(x, y, z)),
        _ => Err(format!("`{s}` is not three finite numbers")),
    }
}

/// An error tagged with its exit code.
struct Failure {
    code: i32,
    error: Error,
}

type CmdResult = std::result::Result<(), Failure>;

fn data(error: Error) -> Failure {
    Failure { code: EXIT_DATA, error }
}

fn runtime(error: Error) -> Failure {
    Failure {
        code: EXIT_RUNTIME,
        error,
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: EXIT_USAGE,
        error: Error::InvalidArgument(message.into()),
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if e.use_stderr() {
                write!(err, "{text}")
            } else {
                write!(out, "{text}")
            };
            return code;
        }
    };
    let result = match cli.command {
        Command::Synth(a) => synth(a, out),
        Command::Fit(a) => fit_cmd(a, out, err),
        Command::Flow(a) => flow_cmd(a, out),
        Command::Track(a) => track_cmd(a, out),
        Command::Eval(a) => eval_cmd(a, out),
        Command::Ablate(a) => ablate_cmd(a, out, err),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(f) => {
            let _ = writeln!(err, "error: {}", f.error);
            f.code
        }
    }
}

fn synth(a: SynthArgs, out: &mut dyn Write) -> CmdResult {
    let mut spec = match (&a.spec, &a.preset) {
        (Some(path), None) => {
            let text = read_text(path).map_err(data)?;
            parse_scene_spec(&text, path, &SceneSpec::desk_av()).map_err(data)?
        }
        (None, Some(name)) => SceneSpec::preset(name).map_err(|e| usage(e.to_string()))?,
        _ => return Err(usage("give exactly one of --spec or --preset")),
    };
    if let Some(seed) = a.seed {
        spec.seed = seed;
    }
    let sequence = generate(&spec)
        .and_then(|s| s.without_ground(a.ground_height))
        .map_err(runtime)?;
    save_sequence(&sequence, &a.out).map_err(runtime)?;
    let points: usize = sequence.frames().iter().map(|f| f.cloud.len()).sum();
    let _ = writeln!(out, "wrote {} frames, {} points to {}", sequence.len(), points, a.out.display());
    Ok(())
}

fn train_config(flags: &TrainFlags) -> std::result::Result<TrainConfig, Failure> {
    let mut c = match &flags.config {
        Some(path) => {
            let text = read_text(path).map_err(data)?;
            parse_train_config(&text, path, &TrainConfig::default()).map_err(data)?
        }
        None => TrainConfig::default(),
    };
    if let Some(d) = flags.depth {
        c.mlp.depth = d;
    }
    if let Some(n) = flags.subsequence {
        c.subsequence_length = Some(n);
    }
    if flags.no_multistep {
        c.loss.enable_multistep = false;
    }
    if flags.no_cycle {
        c.loss.enable_cycle = false;
    }
    if let Some(e) = flags.time_encoding {
        c.time_encoding = e;
    }
    if let Some(a) = flags.activation {
        c.mlp.activation = a;
    }
    if let Some(s) = flags.seed {
        c.seed = s;
    }
    if let Some(e) = flags.epochs {
        c.epochs = e;
    }
    c.validate().map_err(|e| usage(e.to_string()))?;
    Ok(c)
}

fn default_log_path(ckpt: &Path) -> PathBuf {
    let mut s = ckpt.as_os_str().to_owned();
    s.push(".log");
    PathBuf::from(s)
}

fn fit_cmd(a: FitArgs, out: &mut dyn Write, err: &mut dyn Write) -> CmdResult {
    let config = train_config(&a.train)?;
    let sequence = load_sequence(&a.data).map_err(data)?;
    let result = fit_with_observer(&sequence, &config, |s| {
        if s.epoch == 1 || s.epoch % 50 == 0 {
            let _ = writeln!(err, "epoch {} loss {:.6e} best {}", s.epoch, s.loss, s.best_epoch);
        }
    })
    .map_err(runtime)?;
    save_checkpoint(&result.params, &a.out).map_err(runtime)?;
    let log_path = a.log.unwrap_or_else(|| default_log_path(&a.out));
    save_text(&log_path, &result.log.to_text()).map_err(runtime)?;
    let _ = writeln!(
        out,
        "{} after {} epochs; best epoch {} loss {:e}",
        result.log.stop_reason.name(),
        result.log.epochs_run(),
        result.log.best_epoch,
        result.log.best_loss()
    );
    Ok(())
}

fn load_model(data_dir: &Path, ckpt: &Path) -> std::result::Result<(PointCloudSequence, crate::nn::MlpParams), Failure> {
    let sequence = load_sequence(data_dir).map_err(data)?;
    let params = load_checkpoint(ckpt).map_err(data)?;
    Ok((sequence, params))
}

fn flow_cmd(a: FlowArgs, out: &mut dyn Write) -> CmdResult {
    let (sequence, params) = load_model(&a.data, &a.ckpt)?;
    let field = NeuralField::new(&params, &Timeline::of(&sequence)).map_err(data)?;
    let flow = extract_flow_field(&field, &sequence).map_err(runtime)?;
    save_flow_field(&flow, &a.out).map_err(runtime)?;
    let _ = writeln!(out, "wrote {} flow frames to {}", flow.len(), a.out.display());
    Ok(())
}

fn track_cmd(a: TrackArgs, out: &mut dyn Write) -> CmdResult {
    let (sequence, params) = load_model(&a.data, &a.ckpt)?;
    let timeline = Timeline::of(&sequence);
    for idx in [a.t0, a.t1] {
        if idx > timeline.last_index() {
            return Err(usage(format!("frame {idx} outside 0..={}", timeline.last_index())));
        }
    }
    let field = NeuralField::new(&params, &timeline).map_err(data)?;
    let track = extract_track(&field, &timeline, a.start, timeline.time(a.t0), timeline.time(a.t1))
        .map_err(|e| usage(e.to_string()))?;
    save_trajectory(&track, &a.out).map_err(runtime)?;
    let _ = writeln!(out, "wrote {} samples to {}", track.len(), a.out.display());
    Ok(())
}

fn eval_cmd(a: EvalArgs, out: &mut dyn Write) -> CmdResult {
    let sequence = load_sequence(&a.data).map_err(data)?;
    let flow = load_flow_field(&a.flow).map_err(data)?;
    let samples = collect_samples(&sequence, &flow).map_err(data)?;
    let report = evaluate(&samples, &BucketSpec::default()).map_err(data)?;
    save_text(&a.out, &report.to_key_values()).map_err(runtime)?;
    let _ = write!(out, "{}", report.to_text());
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{v:.4}"))
}

fn ablate_cmd(a: AblateArgs, out: &mut dyn Write, err: &mut dyn Write) -> CmdResult {
    let flags = TrainFlags {
        config: a.config.clone(),
        depth: None,
        subsequence: None,
        no_multistep: false,
        no_cycle: false,
        time_encoding: None,
        activation: None,
        seed: None,
        epochs: None,
    };
    let base = train_config(&flags)?;
    let sequence = load_sequence(&a.data).map_err(data)?;
    if !sequence.has_ground_truth() {
        return Err(data(Error::InvalidArgument("ablation needs ground truth".into())));
    }
    std::fs::create_dir_all(&a.out).map_err(|e| runtime(Error::io(&a.out, e)))?;
    let mut table = String::new();
    let _ = writeln!(
        table,
        "{:<16} {:>7} {:>12} {:>12} {:>14}",
        "variant", "epochs", "best_loss", "average_epe", "mean_dyn_norm"
    );
    for variant in AblationVariant::grid() {
        if let AblationVariant::Subsequence(n) = variant {
            if n > sequence.len() {
                let _ = writeln!(err, "skipping {}: sequence has {} frames", variant.name(), sequence.len());
                continue;
            }
        }
        let _ = writeln!(err, "training {}", variant.name());
        let outcome = run_ablation(&sequence, &base, variant).map_err(runtime)?;
        let name = variant.name();
        save_text(&a.out.join(format!("{name}.report")), &outcome.report.to_key_values()).map_err(runtime)?;
        save_text(&a.out.join(format!("{name}.trainlog")), &outcome.fit.log.to_text()).map_err(runtime)?;
        let _ = writeln!(
            table,
            "{:<16} {:>7} {:>12.6} {:>12.4} {:>14}",
            name,
            outcome.fit.log.epochs_run(),
            outcome.fit.log.best_loss(),
            outcome.report.average_epe,
            fmt_opt(outcome.report.mean_dynamic_normalized_epe)
        );
    }
    save_text(&a.out.join("summary.txt"), &table).map_err(runtime)?;
    let _ = write!(out, "{table}");
    Ok(())
}

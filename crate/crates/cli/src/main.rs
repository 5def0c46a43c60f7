//! `kdgat`: synthesize CAN traces, build window graphs, train the teacher,
//! distill the student, evaluate and run detection.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 data error
//! (trace, graph or scenario input), 4 model error (checkpoint, architecture,
//! training).

mod config;

use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::anyhow;
use clap::{Args, Parser, Subcommand, ValueEnum};
use kdgat::eval::{self, DEFAULT_THRESHOLD};
use kdgat::graph::{read_dataset, write_dataset, GraphDataset};
use kdgat::ingest::{read_trace, write_canonical_file, Label, ReadOptions, TraceFormat, TraceSource};
use kdgat::model::{
    distill_student, load_checkpoint, save_checkpoint, train_teacher, CheckpointMeta, GatModel, History, ModelError,
    Selection, SplitMode, TrainConfig,
};
use kdgat::synth::Scenario;
use serde::Serialize;

use config::RunConfig;

const BUNDLED_SCENARIO: &str = include_str!("../scenarios/desk.toml");

#[derive(Parser, Debug)]
#[command(name = "kdgat", version, about = "Graph-attention CAN intrusion detection with knowledge distillation")]
struct Cli {
    /// Run configuration (TOML); flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every random choice of the command.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory that relative paths and default file names resolve against.
    #[arg(long, global = true, env = "KDGAT_DATA_DIR")]
    data_dir: Option<PathBuf>,
    /// Only print warnings and errors.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a labeled synthetic trace as canonical CSV.
    Synth {
        /// Scenario file; the bundled 60 s desk scenario when omitted.
        #[arg(long)]
        scenario: Option<PathBuf>,
        #[arg(long, default_value = "trace.csv")]
        out: PathBuf,
    },
    /// Build the window-graph dataset of a trace.
    Graphs {
        #[arg(long, default_value = "trace.csv")]
        trace: PathBuf,
        /// Input format; guessed from the extension when omitted.
        #[arg(long, value_enum)]
        format: Option<FormatArg>,
        /// Abort on the first malformed line instead of skipping it.
        #[arg(long)]
        strict: bool,
        #[arg(long, default_value = "graphs.kdg")]
        out: PathBuf,
        #[arg(long)]
        window: Option<usize>,
        #[arg(long)]
        stride: Option<usize>,
    },
    /// Train the teacher on a graph dataset.
    TrainTeacher {
        #[arg(long, default_value = "graphs.kdg")]
        graphs: PathBuf,
        #[arg(long, default_value = "teacher.ckpt")]
        out: PathBuf,
        /// History CSV; next to the checkpoint when omitted.
        #[arg(long)]
        history: Option<PathBuf>,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Train the student from hard labels and the teacher's logits.
    Distill {
        #[arg(long, default_value = "graphs.kdg")]
        graphs: PathBuf,
        #[arg(long, default_value = "teacher.ckpt")]
        teacher: PathBuf,
        #[arg(long, default_value = "student.ckpt")]
        out: PathBuf,
        #[arg(long)]
        history: Option<PathBuf>,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Score a graph dataset and report accuracy, precision, recall and F1.
    Eval {
        #[arg(long, default_value = "student.ckpt")]
        checkpoint: PathBuf,
        #[arg(long, default_value = "graphs.kdg")]
        graphs: PathBuf,
        /// JSON report; next to the checkpoint when omitted.
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
        threshold: f64,
    },
    /// Slide a window over a trace and flag attack windows.
    Detect {
        #[arg(long, default_value = "student.ckpt")]
        checkpoint: PathBuf,
        #[arg(long, default_value = "trace.csv")]
        trace: PathBuf,
        #[arg(long, value_enum)]
        format: Option<FormatArg>,
        /// Defaults to the checkpoint's training window.
        #[arg(long)]
        window: Option<usize>,
        #[arg(long)]
        stride: Option<usize>,
        #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
        threshold: f64,
        #[arg(long, default_value = "detections.csv")]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum FormatArg {
    Benchmark,
    Candump,
    Canonical,
}

impl From<FormatArg> for TraceFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Benchmark => TraceFormat::BenchmarkCsv,
            FormatArg::Candump => TraceFormat::CandumpText,
            FormatArg::Canonical => TraceFormat::CanonicalCsv,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Stratified,
    Chronological,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SelectArg {
    Accuracy,
    F1,
}

#[derive(Args, Debug, Default)]
struct TrainFlags {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    warmup_epochs: Option<usize>,
    /// Weight of the hard-label loss in the distillation stage.
    #[arg(long)]
    alpha: Option<f64>,
    /// Distillation temperature.
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    gamma_focal: Option<f64>,
    /// Focal-modulate the hard-label loss.
    #[arg(long)]
    use_focal: bool,
    #[arg(long)]
    val_fraction: Option<f64>,
    #[arg(long, value_enum)]
    split: Option<SplitArg>,
    /// Validation metric that picks the kept epoch.
    #[arg(long, value_enum)]
    select_by: Option<SelectArg>,
    /// Cap the global gradient norm.
    #[arg(long)]
    clip_norm: Option<f64>,
}

impl TrainFlags {
    fn apply(&self, t: &mut TrainConfig) {
        macro_rules! set {
            ($($f:ident),*) => { $(if let Some(v) = self.$f { t.$f = v; })* };
        }
        set!(epochs, lr, batch_size, warmup_epochs, alpha, tau, gamma_focal, val_fraction);
        if self.use_focal {
            t.use_focal = true;
        }
        if let Some(s) = self.split {
            t.split = match s {
                SplitArg::Stratified => SplitMode::Stratified,
                SplitArg::Chronological => SplitMode::Chronological,
            };
        }
        if let Some(s) = self.select_by {
            t.select_by = match s {
                SelectArg::Accuracy => Selection::Accuracy,
                SelectArg::F1 => Selection::F1,
            };
        }
        if self.clip_norm.is_some() {
            t.clip_norm = self.clip_norm;
        }
    }
}

/// A failed command and the exit code it maps to.
#[derive(Debug)]
enum Failure {
    Usage(anyhow::Error),
    Data(anyhow::Error),
    Model(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Data(_) => 3,
            Failure::Model(_) => 4,
        }
    }

    fn error(&self) -> &anyhow::Error {
        match self {
            Failure::Usage(e) | Failure::Data(e) | Failure::Model(e) => e,
        }
    }
}

trait Classify<T> {
    fn usage(self, ctx: impl Display) -> Result<T, Failure>;
    fn data(self, ctx: impl Display) -> Result<T, Failure>;
    fn model(self, ctx: impl Display) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn usage(self, ctx: impl Display) -> Result<T, Failure> {
        self.map_err(|e| Failure::Usage(e.into().context(ctx.to_string())))
    }
    fn data(self, ctx: impl Display) -> Result<T, Failure> {
        self.map_err(|e| Failure::Data(e.into().context(ctx.to_string())))
    }
    fn model(self, ctx: impl Display) -> Result<T, Failure> {
        self.map_err(|e| Failure::Model(e.into().context(ctx.to_string())))
    }
}

struct Ctx {
    cfg: RunConfig,
    data_dir: Option<PathBuf>,
}

impl Ctx {
    fn path(&self, p: &Path) -> PathBuf {
        match &self.data_dir {
            Some(dir) if p.is_relative() => dir.join(p),
            _ => p.to_path_buf(),
        }
    }

    fn train_config(&self, flags: &TrainFlags) -> Result<RunConfig, Failure> {
        let mut cfg = self.cfg.clone();
        flags.apply(&mut cfg.train);
        cfg.validate().usage("training options")?;
        Ok(cfg)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .format_target(false)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error());
            ExitCode::from(f.code())
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p).usage("loading configuration")?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
    }
    let data_dir = cli.data_dir.clone().or_else(|| cfg.data_dir.clone());
    if let Some(dir) = &data_dir {
        fs::create_dir_all(dir).data(format!("creating data directory {}", dir.display()))?;
    }
    let ctx = Ctx { cfg, data_dir };
    match cli.command {
        Command::Synth { scenario, out } => cmd_synth(&ctx, scenario.as_deref(), &out, cli.seed),
        Command::Graphs { trace, format, strict, out, window, stride } => {
            cmd_graphs(&ctx, &trace, format, strict, &out, window, stride)
        }
        Command::TrainTeacher { graphs, out, history, train } => {
            cmd_train_teacher(&ctx, &graphs, &out, history.as_deref(), &train)
        }
        Command::Distill { graphs, teacher, out, history, train } => {
            cmd_distill(&ctx, &graphs, &teacher, &out, history.as_deref(), &train)
        }
        Command::Eval { checkpoint, graphs, report, threshold } => {
            cmd_eval(&ctx, &checkpoint, &graphs, report.as_deref(), threshold)
        }
        Command::Detect { checkpoint, trace, format, window, stride, threshold, out } => {
            cmd_detect(&ctx, &checkpoint, &trace, format, window, stride, threshold, &out)
        }
    }
}

fn cmd_synth(ctx: &Ctx, scenario: Option<&Path>, out: &Path, seed: Option<u64>) -> Result<(), Failure> {
    let (text, origin) = match scenario {
        Some(p) => {
            let p = ctx.path(p);
            (fs::read_to_string(&p).data(format!("reading scenario {}", p.display()))?, p.display().to_string())
        }
        None => (BUNDLED_SCENARIO.to_string(), "bundled desk scenario".to_string()),
    };
    let scenario = Scenario::from_toml_str(&text).data(format!("scenario {origin}"))?;
    let messages = match seed {
        Some(s) => scenario.generate_with_seed(s),
        None => scenario.generate(),
    }
    .data(format!("generating from {origin}"))?;
    let out = ctx.path(out);
    write_canonical_file(&out, &messages).data(format!("writing {}", out.display()))?;
    let attacks = messages.iter().filter(|m| m.label == Label::Attack).count();
    log::info!("wrote {} messages ({} attack) to {}", messages.len(), attacks, out.display());
    Ok(())
}

fn read_messages(
    ctx: &Ctx,
    trace: &Path,
    format: Option<FormatArg>,
    strict: bool,
) -> Result<Vec<kdgat::ingest::CanMessage>, Failure> {
    let path = ctx.path(trace);
    let source = match format {
        Some(f) => TraceSource::new(f.into(), &path),
        None => TraceSource::detect(&path).data(format!("trace {}", path.display()))?,
    };
    let trace = read_trace(&source, ReadOptions { strict }).data(format!("reading {}", path.display()))?;
    for d in trace.diagnostics.iter().take(5) {
        log::warn!("{}:{}: {}", path.display(), d.line, d.error);
    }
    if trace.summary.skipped > 0 {
        log::warn!("skipped {} malformed lines of {}", trace.summary.skipped, path.display());
    }
    Ok(trace.messages)
}

fn cmd_graphs(
    ctx: &Ctx,
    trace: &Path,
    format: Option<FormatArg>,
    strict: bool,
    out: &Path,
    window: Option<usize>,
    stride: Option<usize>,
) -> Result<(), Failure> {
    let window = window.unwrap_or(ctx.cfg.train.window);
    let stride = stride.unwrap_or(ctx.cfg.train.stride);
    windowing_args(window, stride)?;
    let messages = read_messages(ctx, trace, format, strict)?;
    let ds = GraphDataset::build(&messages, window, stride).data("building window graphs")?;
    if ds.graphs.is_empty() {
        return Err(Failure::Data(anyhow!("trace holds {} messages, fewer than one window of {window}", messages.len())));
    }
    let out = ctx.path(out);
    let file = fs::File::create(&out).data(format!("creating {}", out.display()))?;
    write_dataset(std::io::BufWriter::new(file), &ds).data(format!("writing {}", out.display()))?;
    log::info!("{} windows ({} attack) written to {}", ds.graphs.len(), ds.attack_count(), out.display());
    if ds.unknown_windows > 0 {
        log::warn!("{} windows contain unlabeled messages and are labeled benign", ds.unknown_windows);
    }
    Ok(())
}

fn windowing_args(window: usize, stride: usize) -> Result<(), Failure> {
    if window < 2 || stride < 1 {
        return Err(Failure::Usage(anyhow!("window must be at least 2 and stride at least 1 (got {window}, {stride})")));
    }
    Ok(())
}

fn load_graphs(ctx: &Ctx, path: &Path) -> Result<GraphDataset, Failure> {
    let path = ctx.path(path);
    let file = fs::File::open(&path).data(format!("opening {}", path.display()))?;
    read_dataset(std::io::BufReader::new(file)).data(format!("reading {}", path.display()))
}

fn sibling(out: &Path, suffix: &str) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    out.with_file_name(format!("{stem}{suffix}"))
}

/// The dataset's own window and stride replace the configured ones.
fn bind_dataset(cfg: &mut RunConfig, ds: &GraphDataset) {
    cfg.train.window = ds.window;
    cfg.train.stride = ds.stride;
}

fn checkpoint_meta(role: &str, cfg: &RunConfig, history: &History) -> CheckpointMeta {
    let best = history.best();
    CheckpointMeta {
        role: role.to_string(),
        epoch: best.map(|r| r.epoch),
        val_accuracy: best.map(|r| r.val_acc),
        val_f1: best.map(|r| r.val_f1),
        seed: cfg.train.seed,
        config_hash: cfg.hash(),
        config: cfg.to_json(),
    }
}

fn write_training_outputs(
    model: &GatModel,
    history: &History,
    role: &str,
    cfg: &RunConfig,
    out: &Path,
    history_path: Option<&Path>,
) -> Result<(), Failure> {
    save_checkpoint(model, &checkpoint_meta(role, cfg, history), out).model("saving checkpoint")?;
    let hist = history_path.map(Path::to_path_buf).unwrap_or_else(|| sibling(out, "_history.csv"));
    fs::write(&hist, history.to_csv(&cfg.preamble())).data(format!("writing {}", hist.display()))?;
    match history.best() {
        Some(b) => log::info!(
            "{role}: kept epoch {} (val_acc {:.4}, val_f1 {:.4}); checkpoint {}, history {}",
            b.epoch,
            b.val_acc,
            b.val_f1,
            out.display(),
            hist.display()
        ),
        None => log::info!("{role}: no epochs run; initial parameters saved to {}", out.display()),
    }
    Ok(())
}

/// Window and stride recorded in a checkpoint's configuration.
fn checkpoint_windowing(meta: &CheckpointMeta) -> Option<(usize, usize)> {
    let t = meta.config.get("train")?;
    Some((t.get("window")?.as_u64()? as usize, t.get("stride")?.as_u64()? as usize))
}

fn check_windowing(meta: &CheckpointMeta, ds: &GraphDataset, what: &str) -> Result<(), Failure> {
    if let Some((w, s)) = checkpoint_windowing(meta) {
        if (w, s) != (ds.window, ds.stride) {
            return Err(ModelError::ArchMismatch {
                expected: format!("window {w}, stride {s} ({what})"),
                found: format!("window {}, stride {} (graph dataset)", ds.window, ds.stride),
            })
            .model("checking graphs against checkpoint");
        }
    }
    Ok(())
}

fn cmd_train_teacher(
    ctx: &Ctx,
    graphs: &Path,
    out: &Path,
    history: Option<&Path>,
    flags: &TrainFlags,
) -> Result<(), Failure> {
    let mut cfg = ctx.train_config(flags)?;
    let ds = load_graphs(ctx, graphs)?;
    bind_dataset(&mut cfg, &ds);
    let (model, hist) = train_teacher(cfg.teacher, &ds.graphs, &cfg.train).model("training teacher")?;
    let history = history.map(|h| ctx.path(h));
    write_training_outputs(&model, &hist, "teacher", &cfg, &ctx.path(out), history.as_deref())
}

fn cmd_distill(
    ctx: &Ctx,
    graphs: &Path,
    teacher: &Path,
    out: &Path,
    history: Option<&Path>,
    flags: &TrainFlags,
) -> Result<(), Failure> {
    let mut cfg = ctx.train_config(flags)?;
    let ds = load_graphs(ctx, graphs)?;
    bind_dataset(&mut cfg, &ds);
    let teacher_path = ctx.path(teacher);
    let (teacher, meta) =
        load_checkpoint(&teacher_path).model(format!("loading teacher {}", teacher_path.display()))?;
    check_windowing(&meta, &ds, "teacher checkpoint")?;
    if meta.role != "teacher" {
        log::warn!("{} was saved as a {} checkpoint", teacher_path.display(), meta.role);
    }
    cfg.teacher = *teacher.arch();
    let (model, hist) = distill_student(&teacher, cfg.student, &ds.graphs, &cfg.train).model("distilling student")?;
    let history = history.map(|h| ctx.path(h));
    write_training_outputs(&model, &hist, "student", &cfg, &ctx.path(out), history.as_deref())
}

#[derive(Serialize)]
struct ReportFile<'a> {
    checkpoint_role: &'a str,
    config_hash: &'a str,
    config: &'a serde_json::Value,
    window: usize,
    stride: usize,
    #[serde(flatten)]
    report: &'a eval::EvalReport,
}

fn cmd_eval(
    ctx: &Ctx,
    checkpoint: &Path,
    graphs: &Path,
    report: Option<&Path>,
    threshold: f64,
) -> Result<(), Failure> {
    let ckpt = ctx.path(checkpoint);
    let (model, meta) = load_checkpoint(&ckpt).model(format!("loading {}", ckpt.display()))?;
    let ds = load_graphs(ctx, graphs)?;
    check_windowing(&meta, &ds, "checkpoint")?;
    let batch = ctx.cfg.train.batch_size;
    let result = eval::evaluate(&model, &ds.graphs, threshold, batch).model("evaluating")?;
    let file = ReportFile {
        checkpoint_role: &meta.role,
        config_hash: &meta.config_hash,
        config: &meta.config,
        window: ds.window,
        stride: ds.stride,
        report: &result,
    };
    let json = serde_json::to_string_pretty(&file).expect("report serializes") + "\n";
    let path = report.map(|r| ctx.path(r)).unwrap_or_else(|| sibling(&ckpt, "_report.json"));
    fs::write(&path, json).data(format!("writing {}", path.display()))?;
    print!("{}", result.to_table());
    log::info!("report written to {}", path.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_detect(
    ctx: &Ctx,
    checkpoint: &Path,
    trace: &Path,
    format: Option<FormatArg>,
    window: Option<usize>,
    stride: Option<usize>,
    threshold: f64,
    out: &Path,
) -> Result<(), Failure> {
    let ckpt = ctx.path(checkpoint);
    let (model, meta) = load_checkpoint(&ckpt).model(format!("loading {}", ckpt.display()))?;
    let (cw, cs) = checkpoint_windowing(&meta).unwrap_or((ctx.cfg.train.window, ctx.cfg.train.stride));
    let (window, stride) = (window.unwrap_or(cw), stride.unwrap_or(cs));
    windowing_args(window, stride)?;
    let messages = read_messages(ctx, trace, format, false)?;
    let detection = match eval::detect_stream(&model, &messages, window, stride, threshold) {
        Ok(d) => d,
        Err(e @ (eval::EvalError::EmptyTrace | eval::EvalError::Graph(_))) => {
            return Err(e).data(format!("detecting on {}", ctx.path(trace).display()))
        }
        Err(e) => return Err(e).model("detecting"),
    };
    let out = ctx.path(out);
    let file = fs::File::create(&out).data(format!("creating {}", out.display()))?;
    eval::write_detections_csv(std::io::BufWriter::new(file), &detection.records)
        .data(format!("writing {}", out.display()))?;
    log::info!(
        "{} of {} windows flagged at threshold {:.3}; {:.0} windows/s; written to {}",
        detection.attack_windows(),
        detection.records.len(),
        detection.threshold,
        detection.windows_per_second,
        out.display()
    );
    Ok(())
}


#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn bundled_scenario_is_the_desk_default() {
        assert_eq!(Scenario::from_toml_str(BUNDLED_SCENARIO).unwrap(), Scenario::desk_default());
    }

    #[test]
    fn flags_override_file_values() {
        let mut t = TrainConfig { epochs: 9, lr: 0.1, ..TrainConfig::default() };
        let flags = TrainFlags { epochs: Some(3), use_focal: true, split: Some(SplitArg::Chronological), ..Default::default() };
        flags.apply(&mut t);
        assert_eq!((t.epochs, t.lr, t.use_focal, t.split), (3, 0.1, true, SplitMode::Chronological));
    }
}

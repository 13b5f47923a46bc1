//! Experiment runner for the featmix toolkit.
//!
//! Every subcommand resolves defaults, an optional TOML file and flags (in
//! that order of precedence) into one [`RunConfig`], writes it to
//! `<out>/config.resolved`, then runs. `featmix replay <file>` reruns a
//! snapshot.

use std::fmt;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;

use featmix_core::datagen::MeanOffset;
use featmix_core::losses::{CrossModal, LossMode};
use featmix_core::model::SynthMethod;
use featmix_core::scores::ScoreMethod;

pub mod commands;
pub mod config;

pub use config::RunConfig;
use config::{ShapePreset, TheoremChoice};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_GATE: i32 = 2;
pub const EXIT_IO: i32 = 3;

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, bad config values, or inputs the toolkit rejects.
    Usage(String),
    /// A verification gate failed.
    Gate(String),
    Io(String),
}

impl CliError {
    pub fn io(path: &Path, e: impl fmt::Display) -> Self {
        CliError::Io(format!("{}: {e}", path.display()))
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Gate(_) => EXIT_GATE,
            CliError::Io(_) => EXIT_IO,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "error: {m}"),
            CliError::Gate(m) => write!(f, "gate failed: {m}"),
            CliError::Io(m) => write!(f, "i/o error: {m}"),
        }
    }
}

impl From<featmix_core::Error> for CliError {
    fn from(e: featmix_core::Error) -> Self {
        match e {
            featmix_core::Error::Io(_) | featmix_core::Error::Format { .. } => CliError::Io(e.to_string()),
            other => CliError::Usage(other.to_string()),
        }
    }
}

/// Parses any snake_case serde enum from its name.
fn parse_enum<T: DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

fn parse_theorem(s: &str) -> Result<TheoremChoice, String> {
    match s {
        "1" | "one" => Ok(TheoremChoice::One),
        "2" | "two" => Ok(TheoremChoice::Two),
        "all" => Ok(TheoremChoice::All),
        _ => Err(format!("expected 1, 2 or all, got '{s}'")),
    }
}

#[derive(Debug, Parser)]
#[command(name = "featmix", version, about = "Multimodal outlier synthesis experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate train and test datasets.
    Gen(GenArgs),
    /// Train a network.
    Train(TrainArgs),
    /// Score a test set with a trained network.
    Eval(EvalArgs),
    /// Check the low-likelihood and bounded-deviation properties.
    Verify(VerifyArgs),
    /// Train and evaluate once per swap count.
    SweepN(SweepArgs),
    /// Time the synthesis methods.
    Bench(BenchArgs),
    /// Train and evaluate the baseline and every synthesis method.
    Compare(CompareArgs),
    /// Rerun a `config.resolved` snapshot.
    Replay(ReplayArgs),
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// TOML run configuration; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory (required unless the config sets it).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Master seed; data, training and bench seeds derive from it.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    #[arg(long)]
    pub n_id_classes: Option<usize>,
    #[arg(long)]
    pub n_ood_classes: Option<usize>,
    /// Width of each of the two modalities.
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub class_scale: Option<f64>,
    #[arg(long)]
    pub std: Option<f64>,
    /// Scalar offset added to the second modality's class means.
    #[arg(long)]
    pub modality_offset: Option<f64>,
    #[arg(long)]
    pub samples_per_class: Option<usize>,
    #[arg(long)]
    pub test_samples_per_class: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainFlags {
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub warmup_steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long, value_parser = parse_enum::<SynthMethod>)]
    pub synth: Option<SynthMethod>,
    #[arg(long)]
    pub n_swap: Option<usize>,
    /// Draw a swap mask per row instead of per batch.
    #[arg(long)]
    pub per_row_masks: Option<bool>,
    #[arg(long)]
    pub gamma1: Option<f64>,
    #[arg(long)]
    pub gamma2: Option<f64>,
    #[arg(long, value_parser = parse_enum::<LossMode>)]
    pub loss_mode: Option<LossMode>,
    #[arg(long, value_parser = parse_enum::<CrossModal>)]
    pub cross_modal: Option<CrossModal>,
    /// Stream hidden widths, e.g. `64,32`.
    #[arg(long, value_delimiter = ',', num_args = 2)]
    pub hidden: Option<Vec<usize>>,
    #[arg(long)]
    pub head_hidden: Option<usize>,
    #[arg(long)]
    pub stream_norm: Option<bool>,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[arg(long, value_parser = parse_enum::<ScoreMethod>)]
    pub score: Option<ScoreMethod>,
    #[arg(long)]
    pub score_temp: Option<f64>,
    #[arg(long)]
    pub score_gamma: Option<f64>,
    #[arg(long)]
    pub score_topm: Option<usize>,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub data: DataArgs,
    /// Also write CSV copies.
    #[arg(long)]
    pub csv: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub train: TrainFlags,
    /// Training set written by `gen`; generated in memory when absent.
    #[arg(long)]
    pub train_data: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub score: ScoreArgs,
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Test set written by `gen`; generated in memory when absent.
    #[arg(long)]
    pub test_data: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Which property to check: 1, 2 or all.
    #[arg(long, value_parser = parse_theorem)]
    pub theorem: Option<TheoremChoice>,
    #[arg(long)]
    pub dim: Option<usize>,
    /// Per-coordinate `mu_l - mu_c`; must be non-zero.
    #[arg(long, allow_negative_numbers = true)]
    pub mu_offset: Option<f64>,
    #[arg(long)]
    pub n_swap: Option<usize>,
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long)]
    pub bound_trials: Option<usize>,
    #[arg(long)]
    pub bound_rows: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub train: TrainFlags,
    #[command(flatten)]
    pub score: ScoreArgs,
    /// Swap counts, e.g. `0,2,4,8,16`.
    #[arg(long, value_delimiter = ',')]
    pub n_values: Option<Vec<usize>>,
    #[arg(long)]
    pub replicates: Option<usize>,
    /// Worker threads for independent runs.
    #[arg(long)]
    pub parallel: Option<usize>,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub train: TrainFlags,
    #[command(flatten)]
    pub score: ScoreArgs,
    /// Methods, e.g. `none,feature_mixing,mixup`.
    #[arg(long, value_delimiter = ',', value_parser = parse_enum::<SynthMethod>)]
    pub methods: Option<Vec<SynthMethod>>,
    #[arg(long)]
    pub replicates: Option<usize>,
    #[arg(long)]
    pub parallel: Option<usize>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long, value_enum)]
    pub bench_shape: Option<ShapePreset>,
    /// Rows for `--bench-shape custom`.
    #[arg(long)]
    pub bench_rows: Option<usize>,
    /// Modality widths for `--bench-shape custom`, e.g. `24,24`.
    #[arg(long, value_delimiter = ',')]
    pub bench_widths: Option<Vec<usize>>,
    #[arg(long)]
    pub bench_swap: Option<usize>,
    #[arg(long)]
    pub bench_classes: Option<usize>,
    #[arg(long, value_delimiter = ',', value_parser = parse_enum::<SynthMethod>)]
    pub methods: Option<Vec<SynthMethod>>,
    #[arg(long)]
    pub repeats: Option<usize>,
    #[arg(long)]
    pub warmups: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    /// Snapshot written by an earlier run.
    pub snapshot: PathBuf,
    /// Output directory; defaults to the snapshot's.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn set<T>(dst: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *dst = v;
    }
}

impl CommonArgs {
    fn base(&self) -> Result<RunConfig, CliError> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            if seed > i64::MAX as u64 {
                return Err(CliError::Usage(format!("--seed must be at most {}", i64::MAX)));
            }
            cfg.apply_seed(seed);
        }
        set(&mut cfg.run.out_dir, self.out.clone());
        Ok(cfg)
    }
}

impl DataArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        let d = &mut cfg.data;
        set(&mut d.n_id_classes, self.n_id_classes);
        set(&mut d.n_ood_classes, self.n_ood_classes);
        if let Some(w) = self.dim {
            d.dim_per_modality = vec![w, w];
        }
        set(&mut d.class_mean_scale, self.class_scale);
        set(&mut d.within_class_std, self.std);
        set(&mut d.modality_mean_offset, self.modality_offset.map(MeanOffset::Scalar));
        set(&mut d.samples_per_class, self.samples_per_class);
        set(&mut d.test_samples_per_class, self.test_samples_per_class);
    }
}

impl TrainFlags {
    fn apply(&self, cfg: &mut RunConfig) {
        let t = &mut cfg.train;
        set(&mut t.steps, self.steps);
        set(&mut t.warmup_steps, self.warmup_steps);
        set(&mut t.batch_size, self.batch_size);
        set(&mut t.step_size, self.lr);
        set(&mut t.weight_decay, self.weight_decay);
        set(&mut t.synth_method, self.synth);
        set(&mut t.mixing.n_swap, self.n_swap);
        set(&mut t.mixing.per_sample_masks, self.per_row_masks);
        set(&mut t.loss.gamma1, self.gamma1);
        set(&mut t.loss.gamma2, self.gamma2);
        set(&mut t.loss.mode, self.loss_mode);
        set(&mut t.loss.cross_modal, self.cross_modal);
        if let Some(h) = &self.hidden {
            t.hidden = [h[0], h[1]];
        }
        set(&mut t.head_hidden, self.head_hidden);
        set(&mut t.stream_norm, self.stream_norm);
    }
}

impl ScoreArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        let s = &mut cfg.score;
        set(&mut s.method, self.score);
        set(&mut s.temperature, self.score_temp);
        set(&mut s.gen_gamma, self.score_gamma);
        if self.score_topm.is_some() {
            s.gen_top_m = self.score_topm;
        }
    }
}

/// Resolves the parsed command into its subcommand name and config.
pub fn resolve(command: &Command) -> Result<(String, RunConfig), CliError> {
    let (name, mut cfg) = match command {
        Command::Gen(a) => {
            let mut cfg = a.common.base()?;
            a.data.apply(&mut cfg);
            if a.csv {
                cfg.run.write_csv = true;
            }
            ("gen", cfg)
        }
        Command::Train(a) => {
            let mut cfg = a.common.base()?;
            a.data.apply(&mut cfg);
            a.train.apply(&mut cfg);
            if a.train_data.is_some() {
                cfg.inputs.train_data = a.train_data.clone();
            }
            ("train", cfg)
        }
        Command::Eval(a) => {
            let mut cfg = a.common.base()?;
            a.data.apply(&mut cfg);
            a.score.apply(&mut cfg);
            if a.model.is_some() {
                cfg.inputs.model = a.model.clone();
            }
            if a.test_data.is_some() {
                cfg.inputs.test_data = a.test_data.clone();
            }
            ("eval", cfg)
        }
        Command::Verify(a) => {
            let mut cfg = a.common.base()?;
            let v = &mut cfg.verify;
            set(&mut v.theorem, a.theorem);
            set(&mut v.dim, a.dim);
            set(&mut v.mu_offset, a.mu_offset);
            set(&mut v.n_swap, a.n_swap);
            set(&mut v.trials, a.trials);
            set(&mut v.bound_trials, a.bound_trials);
            set(&mut v.bound_rows, a.bound_rows);
            ("verify", cfg)
        }
        Command::SweepN(a) => {
            let mut cfg = a.common.base()?;
            a.data.apply(&mut cfg);
            a.train.apply(&mut cfg);
            a.score.apply(&mut cfg);
            set(&mut cfg.sweep.n_values, a.n_values.clone());
            set(&mut cfg.sweep.replicates, a.replicates);
            set(&mut cfg.sweep.parallel, a.parallel);
            ("sweep-n", cfg)
        }
        Command::Compare(a) => {
            let mut cfg = a.common.base()?;
            a.data.apply(&mut cfg);
            a.train.apply(&mut cfg);
            a.score.apply(&mut cfg);
            set(&mut cfg.compare.methods, a.methods.clone());
            set(&mut cfg.compare.replicates, a.replicates);
            set(&mut cfg.compare.parallel, a.parallel);
            ("compare", cfg)
        }
        Command::Bench(a) => {
            let mut cfg = a.common.base()?;
            let b = &mut cfg.bench;
            set(&mut b.preset, a.bench_shape);
            set(&mut b.shape.n_samples, a.bench_rows);
            set(&mut b.shape.widths, a.bench_widths.clone());
            set(&mut b.shape.n_swap, a.bench_swap);
            set(&mut b.shape.n_classes, a.bench_classes);
            set(&mut b.methods, a.methods.clone());
            set(&mut b.timing.repeats, a.repeats);
            set(&mut b.timing.warmups, a.warmups);
            ("bench", cfg)
        }
        Command::Replay(a) => {
            let mut cfg = RunConfig::load(&a.snapshot)?;
            set(&mut cfg.run.out_dir, a.out.clone());
            let name = cfg.run.command.clone();
            return finish(name, cfg);
        }
    };
    cfg.run.command = name.to_string();
    finish(name.to_string(), cfg)
}

fn finish(name: String, mut cfg: RunConfig) -> Result<(String, RunConfig), CliError> {
    if cfg.run.out_dir.as_os_str().is_empty() {
        return Err(CliError::Usage("--out is required (or set run.out_dir in the config)".into()));
    }
    cfg.resolve();
    Ok((name, cfg))
}

/// Creates the output directory, writes the snapshot and runs.
pub fn execute(name: &str, cfg: &RunConfig) -> Result<(), CliError> {
    let out = &cfg.run.out_dir;
    std::fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    cfg.write_snapshot()?;
    match name {
        "gen" => commands::cmd_gen(cfg),
        "train" => commands::cmd_train(cfg),
        "eval" => commands::cmd_eval(cfg),
        "verify" => commands::cmd_verify(cfg),
        "sweep-n" => commands::cmd_sweep_n(cfg),
        "compare" => commands::cmd_compare(cfg),
        "bench" => commands::cmd_bench(cfg),
        other => Err(CliError::Usage(format!("unknown command '{other}' in config"))),
    }
}

/// Parses `args` (including the program name) and runs; returns the exit
/// code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match resolve(&cli.command).and_then(|(name, cfg)| execute(&name, &cfg)) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}

//! Experiment orchestration: config files, the generate/train/evaluate
//! pipeline, ablations, the missing-rate sweep and diagnostic exports.

use std::collections::HashMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::{evaluate_baseline, BaselineKind, TopLocations};
use crate::data::{
    bin_records, build_instances, chronological_split, filter_dataset, k_for_rate, load_trajectories,
    parse_raw_records, remask, save_trajectories, DatasetSplit, MaskedInstance, MaskingConfig, Trajectory,
    MIN_HISTORY_DAYS,
};
use crate::error::{Error, Result};
use crate::grid::GridSpec;
use crate::metrics::{write_results_row, EvalReport, RESULTS_HEADER};
use crate::model::{ablate, forward, load_checkpoint, save_checkpoint, ModelConfig, ModelParams, Stage};
use crate::seed::{stream_seed, Stream};
use crate::synth::{generate, random_instances, sparsify, SynthConfig, SynthParams};
use crate::train::{evaluate_model, grad_check, train_from, write_log, TrainConfig, TrainOutcome};

/// Existing trajectory files to use instead of generating synthetic data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataPaths {
    /// Sparse observed trajectories.
    pub observed: PathBuf,
    /// Complete trajectories for the same user-days. When given, the day
    /// being recovered is taken from here and history from `observed`.
    pub truth: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    pub slot_minutes: u32,
    pub min_observed_slots: usize,
    pub min_days: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            slot_minutes: 30,
            min_observed_slots: 1,
            min_days: MIN_HISTORY_DAYS + 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub rates: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            rates: vec![0.65, 0.75, 0.85, 0.95],
        }
    }
}

/// One file fully specifies a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub grid: GridSpec,
    pub synth: SynthParams,
    pub data: Option<DataPaths>,
    pub preprocess: PreprocessConfig,
    pub masking: MaskingConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sweep: SweepConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 42,
            out_dir: PathBuf::from("runs/default"),
            grid: GridSpec::with_dims(39.9, 116.3, 20, 20, 500.0).expect("default grid"),
            synth: SynthParams::default(),
            data: None,
            preprocess: PreprocessConfig::default(),
            masking: MaskingConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(s).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        Ok(cfg.resolved())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// Fills derived fields: the location count from the grid, the slot
    /// count from the generator, and the training seed from the global seed.
    pub fn resolved(mut self) -> Self {
        self.model.n_locations = self.grid.n_locations();
        if self.data.is_none() {
            self.model.t_slots = self.synth.t_slots;
        }
        self.train.rng_seed = self.seed;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.resolved()
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            params: self.synth,
            grid: self.grid,
            rng_seed: stream_seed(self.seed, Stream::Synth),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.data.is_none() {
            self.synth_config().validate()?;
        }
        Ok(())
    }
}

/// Trajectories ready for instance construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub observed: Vec<Trajectory>,
    pub truth: Option<Vec<Trajectory>>,
}

/// Complete and sparsified synthetic trajectories.
pub fn generate_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    let synth = cfg.synth_config();
    let complete = generate(&synth)?;
    let observed = sparsify(&complete, cfg.synth.p_observe, stream_seed(cfg.seed, Stream::Sparsify))?;
    Ok(Dataset {
        observed,
        truth: Some(complete),
    })
}

/// The configured data files, or freshly generated synthetic data.
pub fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    match &cfg.data {
        None => generate_dataset(cfg),
        Some(paths) => {
            let n = Some(cfg.grid.n_locations());
            let observed = load_trajectories(&paths.observed, n)?;
            let truth = paths.truth.as_deref().map(|p| load_trajectories(p, n)).transpose()?;
            if let Some(bad) = observed.iter().find(|t| t.len() != cfg.model.t_slots) {
                return Err(Error::DimensionMismatch {
                    context: "trajectory length vs model t_slots",
                    expected: cfg.model.t_slots,
                    actual: bad.len(),
                });
            }
            Ok(Dataset { observed, truth })
        }
    }
}

/// Masked instances split chronologically per user.
pub fn build_split(cfg: &ExperimentConfig, data: &Dataset) -> Result<DatasetSplit> {
    let (per_user, _) = build_instances(
        &data.observed,
        data.truth.as_deref(),
        &cfg.masking,
        stream_seed(cfg.seed, Stream::Masking),
    )?;
    Ok(chronological_split(per_user))
}

/// Top fitted on each user's observed days up to their last training day.
pub fn fit_top(data: &Dataset, split: &DatasetSplit) -> Result<TopLocations> {
    let mut last_train: HashMap<u64, u32> = HashMap::new();
    for inst in &split.train {
        let e = last_train.entry(inst.user_id).or_default();
        *e = (*e).max(inst.day_index());
    }
    let seen: Vec<Trajectory> = data
        .observed
        .iter()
        .filter(|t| last_train.get(&t.user_id).is_some_and(|&d| t.day_index <= d))
        .cloned()
        .collect();
    TopLocations::fit(&seen)
}

/// Initial parameters for the configured model, with `removed` stages taken
/// out. Every variant starts from the same draw.
pub fn initial_params(cfg: &ExperimentConfig, removed: &[Stage]) -> Result<ModelParams> {
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, Stream::Init));
    let mut p = ModelParams::init(cfg.model, &mut rng)?;
    for &st in removed {
        p = ablate(&p, st);
    }
    Ok(p)
}

pub fn train_variant(
    cfg: &ExperimentConfig,
    split: &DatasetSplit,
    removed: &[Stage],
    on_epoch: impl FnMut(&crate::train::EpochLog),
) -> Result<TrainOutcome> {
    let mut train_cfg = cfg.train;
    train_cfg.rng_seed = cfg.seed;
    train_from(initial_params(cfg, removed)?, split, &cfg.grid, &train_cfg, on_epoch)
}

/// Which split an evaluation runs on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum SplitName {
    Train,
    Validation,
    Test,
}

pub fn split_part(split: &DatasetSplit, which: SplitName) -> &[MaskedInstance] {
    match which {
        SplitName::Train => &split.train,
        SplitName::Validation => &split.validation,
        SplitName::Test => &split.test,
    }
}

/// One row of an ablation report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub model: String,
    pub report: EvalReport,
    /// Relative decline vs the full model (Recall, MAP) or relative increase
    /// (Distance). Zero for the full model.
    pub delta_recall: f64,
    pub delta_map: f64,
    pub delta_distance: f64,
}

impl AblationRow {
    pub fn new(model: impl Into<String>, report: EvalReport, full: &EvalReport) -> Self {
        let rel = |a: f64, b: f64| if b == 0.0 { 0.0 } else { a / b };
        AblationRow {
            model: model.into(),
            delta_recall: rel(full.recall - report.recall, full.recall),
            delta_map: rel(full.map - report.map, full.map),
            delta_distance: rel(report.distance_m - full.distance_m, full.distance_m),
            report,
        }
    }
}

pub const ABLATION_HEADER: &str = "model,recall,map,distance_m,delta_recall,delta_map,delta_distance";

pub fn write_ablation<W: Write>(mut w: W, rows: &[AblationRow]) -> std::io::Result<()> {
    writeln!(w, "{ABLATION_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{:.4},{:.4},{:.1},{:.4},{:.4},{:.4}",
            r.model, r.report.recall, r.report.map, r.report.distance_m, r.delta_recall, r.delta_map, r.delta_distance
        )?;
    }
    Ok(())
}

/// One row of the missing-rate sweep.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub rate: f64,
    pub k: usize,
    pub n_instances: usize,
    pub report: EvalReport,
}

pub const SWEEP_HEADER: &str = "rate,k,n_instances,n_slots,recall,map,distance_m";

/// Re-masks the test split at every rate and evaluates `params`.
pub fn sweep_missing(cfg: &ExperimentConfig, split: &DatasetSplit, params: &ModelParams, rates: &[f64]) -> Result<Vec<SweepRow>> {
    let t = cfg.model.t_slots;
    rates
        .iter()
        .map(|&rate| {
            let k = k_for_rate(rate, t)?;
            let seed = crate::seed::derive_seed(stream_seed(cfg.seed, Stream::Sweep), &[k as u64]);
            let instances = remask(&split.test, k, seed);
            if instances.is_empty() {
                return Err(Error::InvalidConfig(format!("no test instance can be masked at rate {rate}")));
            }
            Ok(SweepRow {
                rate,
                k,
                n_instances: instances.len(),
                report: evaluate_model(params, &instances, &cfg.grid)?,
            })
        })
        .collect()
}

/// True when Recall never increases as the rate grows.
pub fn sweep_is_monotone(rows: &[SweepRow]) -> bool {
    let mut sorted: Vec<&SweepRow> = rows.iter().collect();
    sorted.sort_by(|a, b| a.rate.total_cmp(&b.rate));
    sorted.windows(2).all(|w| w[1].report.recall <= w[0].report.recall)
}

pub fn write_sweep<W: Write>(mut w: W, rows: &[SweepRow]) -> std::io::Result<()> {
    writeln!(w, "{SWEEP_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{:.2},{},{},{},{:.4},{:.4},{:.1}",
            r.rate, r.k, r.n_instances, r.report.n_instances, r.report.recall, r.report.map, r.report.distance_m
        )?;
    }
    Ok(())
}

/// Mean over `instances` of the head-averaged attention of the last current
/// intra-trajectory layer, `T x T`.
pub fn mean_current_attention(params: &ModelParams, instances: &[MaskedInstance]) -> Result<ndarray::Array2<f64>> {
    if params.current_stack.is_empty() {
        return Err(Error::InvalidConfig("model has no current intra-trajectory stage".into()));
    }
    if instances.is_empty() {
        return Err(Error::InvalidConfig("no instances to average over".into()));
    }
    let t = params.config().t_slots;
    let mut sum = ndarray::Array2::zeros((t, t));
    for inst in instances {
        let (_, diag) = forward(inst, params)?;
        sum += &diag.current.last().expect("stack is non-empty").head_mean();
    }
    Ok(sum / instances.len() as f64)
}

pub fn write_matrix_csv<W: Write>(mut w: W, m: &ndarray::Array2<f64>) -> std::io::Result<()> {
    for row in m.rows() {
        let line: Vec<String> = row.iter().map(|v| format!("{v:.17e}")).collect();
        writeln!(w, "{}", line.join(","))?;
    }
    Ok(())
}

/// The configuration used by `grad-check`: six locations, `d = 4`, two
/// heads of width two, one layer, six slots and two history days.
pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        n_locations: 6,
        t_slots: 6,
        d: 4,
        n_heads: 2,
        head_dim: 2,
        n_layers: 1,
    }
}

#[derive(Debug, Parser)]
#[command(name = "attnmove", version, about = "Missing-location recovery for sparse trajectories")]
pub struct Cli {
    /// Experiment config (TOML). Defaults are used when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config's global seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides the config's output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write complete and sparsified synthetic trajectories.
    Generate,
    /// Bin raw `user,timestamp,lat,lon` records into trajectories.
    Preprocess {
        #[arg(long)]
        input: PathBuf,
    },
    /// Train a model and write its checkpoint and log.
    Train {
        /// Stage to remove before training; repeatable.
        #[arg(long = "remove")]
        remove: Vec<Stage>,
    },
    /// Evaluate a checkpoint or a baseline.
    Evaluate(EvaluateArgs),
    /// Train and evaluate the full model and every single-stage ablation.
    Ablate,
    /// Evaluate a checkpoint on the test split re-masked at several rates.
    SweepMissing {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated rates; defaults to the config's.
        #[arg(long, value_delimiter = ',')]
        rates: Option<Vec<f64>>,
    },
    /// Write the embedding table and mean current-day attention as CSV.
    ExportDiagnostics {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Test instances to average attention over.
        #[arg(long, default_value_t = 16)]
        samples: usize,
    },
    /// Finite-difference check of the analytic gradient on a tiny model.
    GradCheck {
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        #[arg(long, default_value_t = 4)]
        instances: usize,
    },
}

impl clap::ValueEnum for Stage {
    fn value_variants<'a>() -> &'a [Self] {
        &Stage::ALL
    }

    fn to_possible_value(&self) -> Option<clap::builder::PossibleValue> {
        Some(clap::builder::PossibleValue::new(self.name()))
    }
}

#[derive(Debug, Args)]
#[group(required = true, multiple = false)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_parser = parse_baseline)]
    pub baseline: Option<BaselineKind>,
}

fn parse_baseline(s: &str) -> std::result::Result<BaselineKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, f: impl FnOnce(&mut BufWriter<fs::File>) -> std::io::Result<()>) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    f(&mut w).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

fn progress(name: &str) -> impl FnMut(&crate::train::EpochLog) + '_ {
    move |l| {
        eprintln!(
            "[{name}] epoch {:>3}  ce/slot {:.4}  val recall {:.4}  map {:.4}  {:.0}s",
            l.epoch, l.train_ce_per_slot, l.val_recall, l.val_map, l.wall_seconds
        )
    }
}

fn save_training(dir: &Path, stem: &str, outcome: &TrainOutcome) -> Result<()> {
    save_checkpoint(&dir.join(format!("{stem}.ckpt")), &outcome.params)?;
    write_file(&dir.join(format!("{stem}_log.jsonl")), |w| write_log(w, &outcome.log))
}

fn cmd_generate(cfg: &ExperimentConfig) -> Result<()> {
    cfg.synth_config().validate()?;
    let data = generate_dataset(cfg)?;
    create_dir(&cfg.out_dir)?;
    save_trajectories(&cfg.out_dir.join("complete.csv"), data.truth.as_deref().unwrap_or_default())?;
    save_trajectories(&cfg.out_dir.join("observed.csv"), &data.observed)?;
    println!("wrote {} trajectories to {}", data.observed.len(), cfg.out_dir.display());
    Ok(())
}

fn cmd_preprocess(cfg: &ExperimentConfig, input: &Path) -> Result<()> {
    let file = fs::File::open(input).map_err(|e| Error::io(input, e))?;
    let (records, parse_stats) = parse_raw_records(file).map_err(|e| Error::io(input, e))?;
    let (trajs, stats) = bin_records(&records, &cfg.grid, cfg.preprocess.slot_minutes)?;
    let kept = filter_dataset(&trajs, cfg.preprocess.min_observed_slots, cfg.preprocess.min_days);
    create_dir(&cfg.out_dir)?;
    save_trajectories(&cfg.out_dir.join("observed.csv"), &kept)?;
    println!(
        "parsed {} records ({} unparseable, {} out of bounds), kept {} of {} trajectories",
        parse_stats.parsed,
        parse_stats.skipped_unparseable,
        stats.skipped_out_of_bounds,
        kept.len(),
        trajs.len()
    );
    Ok(())
}

fn cmd_train(cfg: &ExperimentConfig, remove: &[Stage]) -> Result<()> {
    cfg.validate()?;
    let data = load_dataset(cfg)?;
    let split = build_split(cfg, &data)?;
    eprintln!(
        "instances: {} train, {} validation, {} test",
        split.train.len(),
        split.validation.len(),
        split.test.len()
    );
    let outcome = train_variant(cfg, &split, remove, progress("train"))?;
    create_dir(&cfg.out_dir)?;
    save_training(&cfg.out_dir, "model", &outcome)?;
    println!("best epoch {} of {}; checkpoint {}", outcome.best_epoch, outcome.log.len(), cfg.out_dir.join("model.ckpt").display());
    Ok(())
}

/// Evaluates a checkpoint or a baseline on one split of the configured data.
pub fn evaluate_method(cfg: &ExperimentConfig, args: &EvaluateArgs, which: SplitName) -> Result<(String, EvalReport)> {
    let data = load_dataset(cfg)?;
    let split = build_split(cfg, &data)?;
    let instances = split_part(&split, which);
    match (&args.checkpoint, args.baseline) {
        (Some(path), _) => {
            let params = load_checkpoint(path)?;
            Ok(("AttnMove".to_string(), evaluate_model(&params, instances, &cfg.grid)?))
        }
        (None, Some(kind)) => {
            let top = fit_top(&data, &split)?;
            Ok((kind.name().to_string(), evaluate_baseline(kind, instances, &top, &cfg.grid)?))
        }
        (None, None) => Err(Error::InvalidConfig("pass --checkpoint or --baseline".into())),
    }
}

fn cmd_evaluate(cfg: &ExperimentConfig, args: &EvaluateArgs) -> Result<()> {
    let (name, report) = evaluate_method(cfg, args, SplitName::Test)?;
    create_dir(&cfg.out_dir)?;
    let stem = format!("eval_{}", name.to_ascii_lowercase());
    write_file(&cfg.out_dir.join(format!("{stem}.csv")), |w| {
        writeln!(w, "{RESULTS_HEADER}")?;
        write_results_row(w, &name, &report)
    })?;
    write_file(&cfg.out_dir.join(format!("{stem}.json")), |w| {
        serde_json::to_writer_pretty(&mut *w, &report)?;
        writeln!(w)
    })?;
    let mut out = std::io::stdout().lock();
    writeln!(out, "{RESULTS_HEADER}").and_then(|_| write_results_row(&mut out, &name, &report)).map_err(|e| Error::io("<stdout>", e))
}

fn cmd_ablate(cfg: &ExperimentConfig) -> Result<()> {
    cfg.validate()?;
    let data = load_dataset(cfg)?;
    let split = build_split(cfg, &data)?;
    let dir = cfg.out_dir.join("ablate");
    create_dir(&dir)?;
    let full = train_variant(cfg, &split, &[], progress("full"))?;
    save_training(&dir, "full", &full)?;
    let full_report = evaluate_model(&full.params, &split.test, &cfg.grid)?;
    let mut rows = vec![AblationRow::new("AttnMove", full_report, &full_report)];
    for st in Stage::ALL {
        let outcome = train_variant(cfg, &split, &[st], progress(st.name()))?;
        save_training(&dir, &format!("without_{}", st.name()), &outcome)?;
        let report = evaluate_model(&outcome.params, &split.test, &cfg.grid)?;
        rows.push(AblationRow::new(format!("without_{}", st.name()), report, &full_report));
    }
    write_file(&dir.join("ablation.csv"), |w| write_ablation(w, &rows))?;
    write_ablation(std::io::stdout().lock(), &rows).map_err(|e| Error::io("<stdout>", e))
}

fn cmd_sweep(cfg: &ExperimentConfig, checkpoint: &Path, rates: Option<&[f64]>) -> Result<()> {
    let params = load_checkpoint(checkpoint)?;
    let data = load_dataset(cfg)?;
    let split = build_split(cfg, &data)?;
    let rows = sweep_missing(cfg, &split, &params, rates.unwrap_or(&cfg.sweep.rates))?;
    create_dir(&cfg.out_dir)?;
    write_file(&cfg.out_dir.join("sweep_missing.csv"), |w| write_sweep(w, &rows))?;
    write_sweep(std::io::stdout().lock(), &rows).map_err(|e| Error::io("<stdout>", e))?;
    println!("monotone_recall={}", sweep_is_monotone(&rows));
    Ok(())
}

fn cmd_export(cfg: &ExperimentConfig, checkpoint: &Path, samples: usize) -> Result<()> {
    let params = load_checkpoint(checkpoint)?;
    let data = load_dataset(cfg)?;
    let split = build_split(cfg, &data)?;
    let n = samples.min(split.test.len());
    let attention = mean_current_attention(&params, &split.test[..n])?;
    create_dir(&cfg.out_dir)?;
    write_file(&cfg.out_dir.join("embedding.csv"), |w| params.embedding.write_csv(w))?;
    write_file(&cfg.out_dir.join("attention_current.csv"), |w| write_matrix_csv(w, &attention))?;
    println!("averaged attention over {n} test instances");
    Ok(())
}

fn cmd_grad_check(seed: u64, step: f64, tolerance: f64, n: usize) -> Result<()> {
    let model = tiny_model_config();
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, Stream::Init));
    let params = ModelParams::init(model, &mut rng)?;
    let batch = random_instances(n, model.n_locations, model.t_slots, 2, 3, 0.7, stream_seed(seed, Stream::Masking))?;
    let report = grad_check(&params, &batch, 0.01, step, tolerance)?;
    for m in &report.matrices {
        println!("{:<20} entries={:<4} max_rel_error={:.3e}", m.name, m.n_entries, m.max_rel_error);
    }
    if report.passed() {
        println!("grad-check passed (tolerance {tolerance:e})");
        Ok(())
    } else {
        let w = report.worst().expect("at least one matrix");
        Err(Error::GradCheckFailed(format!("{} max relative error {:.3e}", w.name, w.max_rel_error)))
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default().resolved(),
    };
    if let Some(s) = cli.seed {
        cfg = cfg.with_seed(s);
    }
    if let Some(o) = cli.out {
        cfg.out_dir = o;
    }
    match cli.command {
        Command::Generate => cmd_generate(&cfg),
        Command::Preprocess { input } => cmd_preprocess(&cfg, &input),
        Command::Train { remove } => cmd_train(&cfg, &remove),
        Command::Evaluate(args) => cmd_evaluate(&cfg, &args),
        Command::Ablate => cmd_ablate(&cfg),
        Command::SweepMissing { checkpoint, rates } => cmd_sweep(&cfg, &checkpoint, rates.as_deref()),
        Command::ExportDiagnostics { checkpoint, samples } => cmd_export(&cfg, &checkpoint, samples),
        Command::GradCheck { step, tolerance, instances } => cmd_grad_check(cfg.seed, step, tolerance, instances),
    }
}

/// `error kind=<kind> msg="<message>"` on a single line.
pub fn error_line(kind: &str, msg: &str) -> String {
    let flat = msg.replace('\\', "\\\\").replace('"', "\\\"").replace('\n', " ");
    format!("error kind={kind} msg=\"{flat}\"")
}

pub fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("{}", error_line("usage", first));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_line(e.kind(), &e.to_string()));
            ExitCode::FAILURE
        }
    }
}

//! Command-line driver: run configuration, stage commands and run manifests.
//!
//! Every command writes its outputs into `--out` (default `out/<command>`)
//! together with a `manifest.json` recording the effective configuration, its
//! SHA-256, the seeds, and hashes of all inputs and outputs.

use std::collections::{BTreeMap, BTreeSet};
use std::ffi::OsString;
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::corpus::{
    generate_synthetic, read_corpus_file, split, write_corpus, Corpus, CorpusError, Sample,
    SplitSpec, SyntheticSpec,
};
use crate::effects::{
    bootstrap_fixed, bootstrap_retrain, bootstrap_treatments, collinearity_check, effect_table_tsv,
    model_treatments, ols_fit, oos_mse, EffectsError, Resampling, TreatmentSpec,
};
use crate::interpret::{
    corpus_activity, correlation_grid, filter_reports, grid_to_tsv, max_filter_correlation,
    pooled_matrix, reports_to_tsv, useful_filters, TreatmentMatrix, TreatmentMode,
    USEFUL_THRESHOLD,
};
use crate::loss::{fd_check, total_loss, LossWeights};
use crate::model::{predict, ModelParams};
use crate::rlr::{
    build_vocab, chinese_stopwords, english_stopwords, featurize, load_stopwords, select_lambda,
    selection_to_tsv,
};
use crate::train::{
    accuracy, cross_validate, train, tune_results_to_tsv, GridSpec, TrainConfig, TrainError,
};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("missing input: {0}")]
    MissingInput(PathBuf),
    #[error("{0}")]
    CheckpointVersion(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Failed(_) => 1,
            CliError::MissingInput(_) => 2,
            CliError::CheckpointVersion(_) => 3,
            CliError::InvalidConfig(_) => 4,
        }
    }
}

fn failed(e: impl Display) -> CliError {
    CliError::Failed(e.to_string())
}

fn invalid(e: impl Display) -> CliError {
    CliError::InvalidConfig(e.to_string())
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::InvalidConfig(_) => invalid(e),
            e => failed(e),
        }
    }
}

impl From<EffectsError> for CliError {
    fn from(e: EffectsError) -> Self {
        match e {
            EffectsError::Train(t) => t.into(),
            e => failed(e),
        }
    }
}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        match e {
            CorpusError::InfeasibleSynthetic(_) | CorpusError::DegenerateSplit { .. } => invalid(e),
            e => failed(e),
        }
    }
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Profile {
    #[default]
    #[serde(rename = "censorship-like")]
    CensorshipLike,
    #[serde(rename = "cfpb-like")]
    CfpbLike,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub spec: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub corpus: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    pub train_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TuneConfig {
    pub folds: usize,
    pub grid: GridSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterpretConfig {
    pub threshold: f64,
    pub top_k: usize,
    pub mode: TreatmentMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EffectsConfig {
    pub b_fixed: usize,
    /// 0 skips the retrain bootstrap.
    pub b_retrain: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RlrConfig {
    pub n: usize,
    pub min_frequency: usize,
    /// `english`, `chinese`, `none`, or a path to a one-per-line list.
    pub stopwords: String,
    pub max_selected: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradcheckConfig {
    pub embedding_dim: usize,
    pub kernel_sizes: Vec<usize>,
    pub n_filters: usize,
    pub batch_size: usize,
    pub doc_length_range: [usize; 2],
    pub loss_weights: LossWeights,
    pub h: f64,
    pub tie_tolerance: f64,
    pub tolerance: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            embedding_dim: 8,
            kernel_sizes: vec![3, 5],
            n_filters: 4,
            batch_size: 16,
            doc_length_range: [2, 12],
            loss_weights: LossWeights {
                lambda_ker_conv: 1e-3,
                lambda_act_conv: 1.0,
                lambda_ker_out: 1e-3,
                class_weights: (1.0, 2.0),
            },
            h: 1e-5,
            tie_tolerance: 1e-7,
            tolerance: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Drives every stochastic stage.
    pub seed: u64,
    pub profile: Profile,
    pub paths: PathsConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synth: Option<SyntheticSpec>,
    pub split: SplitConfig,
    pub train: TrainConfig,
    pub tune: TuneConfig,
    pub interpret: InterpretConfig,
    pub effects: EffectsConfig,
    pub rlr: RlrConfig,
    pub gradcheck: GradcheckConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::for_profile(Profile::default())
    }
}

impl RunConfig {
    pub fn for_profile(profile: Profile) -> Self {
        let (train, grid, rlr) = match profile {
            Profile::CensorshipLike => (
                TrainConfig::censorship_profile(),
                GridSpec::censorship(),
                RlrConfig {
                    n: 3,
                    min_frequency: 200,
                    stopwords: "chinese".into(),
                    max_selected: 16,
                },
            ),
            Profile::CfpbLike => (
                TrainConfig::cfpb_profile(),
                GridSpec::cfpb(),
                RlrConfig {
                    n: 3,
                    min_frequency: 50,
                    stopwords: "english".into(),
                    max_selected: 16,
                },
            ),
        };
        RunConfig {
            seed: 0,
            profile,
            paths: PathsConfig::default(),
            synth: None,
            split: SplitConfig {
                train_fraction: 0.8,
            },
            train,
            tune: TuneConfig { folds: 5, grid },
            interpret: InterpretConfig {
                threshold: USEFUL_THRESHOLD,
                top_k: 5,
                mode: TreatmentMode::Binary,
            },
            effects: EffectsConfig {
                b_fixed: 1000,
                b_retrain: 150,
            },
            rlr,
            gradcheck: GradcheckConfig::default(),
        }
    }

    /// Parses a TOML document over the defaults of its `profile`.
    ///
    /// Tables are merged key by key, so a file only lists what it changes.
    pub fn from_toml_str(text: &str) -> Result<Self, CliError> {
        let user: toml::Table = toml::from_str(text).map_err(invalid)?;
        let profile = match user.get("profile") {
            Some(v) => v.clone().try_into::<Profile>().map_err(invalid)?,
            None => Profile::default(),
        };
        let mut merged = toml::Table::try_from(RunConfig::for_profile(profile)).map_err(invalid)?;
        merge_tables(&mut merged, user);
        let mut cfg: RunConfig = toml::Value::Table(merged).try_into().map_err(invalid)?;
        cfg.train.seed = cfg.seed;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        if !path.exists() {
            return Err(CliError::MissingInput(path.to_path_buf()));
        }
        Self::from_toml_str(&fs::read_to_string(path).map_err(failed)?)
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.train.seed = seed;
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(failed)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.train.validate()?;
        if !(self.split.train_fraction > 0.0 && self.split.train_fraction < 1.0) {
            return Err(invalid("split.train_fraction must lie in (0, 1)"));
        }
        if self.tune.folds < 2 {
            return Err(invalid("tune.folds must be at least 2"));
        }
        if self.interpret.top_k == 0 {
            return Err(invalid("interpret.top_k must be at least 1"));
        }
        if !(self.interpret.threshold >= 0.0) {
            return Err(invalid("interpret.threshold must be >= 0"));
        }
        if self.rlr.n == 0 {
            return Err(invalid("rlr.n must be at least 1"));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        sha256_hex(
            serde_json::to_string(self)
                .expect("config serializes")
                .as_bytes(),
        )
    }
}

fn merge_tables(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge_tables(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

// ---------------------------------------------------------------------------
// Arguments
// ---------------------------------------------------------------------------

#[derive(Debug, Parser)]
#[command(
    name = "textcnn",
    version,
    about = "Discover influential text features with regularized convolutional filters"
)]
pub struct Cli {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configuration seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; 1 is bit-reproducible.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    /// Output directory (default `out/<command>`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus with planted phrase treatments.
    Synth {
        #[arg(long)]
        spec: Option<PathBuf>,
    },
    /// Seeded train/test split.
    Split {
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Cross-validated grid search.
    Tune {
        #[arg(long)]
        train: Option<PathBuf>,
    },
    /// Train a model and write a checkpoint.
    Train {
        #[arg(long)]
        train: Option<PathBuf>,
    },
    /// Filter reports: output weights, activation ranges, top phrases.
    Interpret {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// OLS treatment effects with bootstrap intervals.
    Effects {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        train: Option<PathBuf>,
        #[arg(long)]
        test: Option<PathBuf>,
    },
    /// L1 logistic regression benchmark on n-gram counts.
    Rlr {
        #[arg(long)]
        train: Option<PathBuf>,
        #[arg(long)]
        test: Option<PathBuf>,
        /// Also correlate the selected grams with this model's filters.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Compare analytic gradients with finite differences on a random instance.
    Gradcheck,
    /// Classification metrics and loss of a model on a corpus.
    Evaluate {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Synth { .. } => "synth",
            Command::Split { .. } => "split",
            Command::Tune { .. } => "tune",
            Command::Train { .. } => "train",
            Command::Interpret { .. } => "interpret",
            Command::Effects { .. } => "effects",
            Command::Rlr { .. } => "rlr",
            Command::Gradcheck => "gradcheck",
            Command::Evaluate { .. } => "evaluate",
        }
    }
}

// ---------------------------------------------------------------------------
// Stage outputs
// ---------------------------------------------------------------------------

struct Stage {
    command: &'static str,
    out: PathBuf,
    files: Vec<(String, Vec<u8>)>,
    inputs: Vec<PathBuf>,
    seeds: BTreeMap<String, u64>,
}

impl Stage {
    fn new(command: &'static str, out: PathBuf, seed: u64) -> Self {
        Stage {
            command,
            out,
            files: Vec::new(),
            inputs: Vec::new(),
            seeds: BTreeMap::from([("run".to_string(), seed)]),
        }
    }

    fn add(&mut self, name: &str, bytes: impl Into<Vec<u8>>) {
        self.files.push((name.to_string(), bytes.into()));
    }

    fn add_json<T: Serialize + ?Sized>(&mut self, name: &str, value: &T) {
        let mut s = serde_json::to_string_pretty(value).expect("serializable output");
        s.push('\n');
        self.add(name, s);
    }

    fn finish(self, cfg: &RunConfig, threads: usize) -> Result<(), CliError> {
        fs::create_dir_all(&self.out).map_err(failed)?;
        let mut outputs = Vec::new();
        for (name, bytes) in &self.files {
            fs::write(self.out.join(name), bytes).map_err(failed)?;
            outputs.push(json!({ "file": name, "sha256": sha256_hex(bytes) }));
        }
        let mut inputs = Vec::new();
        for p in &self.inputs {
            let bytes = fs::read(p).map_err(failed)?;
            inputs.push(json!({ "path": p, "sha256": sha256_hex(&bytes) }));
        }
        let manifest = json!({
            "tool": "textcnn",
            "version": env!("CARGO_PKG_VERSION"),
            "command": self.command,
            "threads": threads,
            "seeds": self.seeds,
            "config_sha256": cfg.hash(),
            "config": cfg,
            "inputs": inputs,
            "outputs": outputs,
        });
        let mut s = serde_json::to_string_pretty(&manifest).map_err(failed)?;
        s.push('\n');
        fs::write(self.out.join("manifest.json"), s).map_err(failed)
    }
}

fn pick(
    flag: &Option<PathBuf>,
    configured: &Option<PathBuf>,
    what: &str,
) -> Result<PathBuf, CliError> {
    flag.clone()
        .or_else(|| configured.clone())
        .ok_or_else(|| invalid(format!("no {what} path given (flag or [paths] entry)")))
}

fn require(path: &Path) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::MissingInput(path.to_path_buf()))
    }
}

fn load_corpus(stage: &mut Stage, path: PathBuf) -> Result<Corpus, CliError> {
    require(&path)?;
    let c = read_corpus_file(&path).map_err(|e| failed(format!("{}: {e}", path.display())))?;
    stage.inputs.push(path);
    Ok(c)
}

fn load_model(stage: &mut Stage, path: PathBuf) -> Result<Checkpoint, CliError> {
    require(&path)?;
    let ck = Checkpoint::load(&path).map_err(|e| match e {
        CheckpointError::VersionMismatch { .. } => {
            CliError::CheckpointVersion(format!("{}: {e}", path.display()))
        }
        e => failed(format!("{}: {e}", path.display())),
    })?;
    stage.inputs.push(path);
    Ok(ck)
}

fn corpus_bytes(c: &Corpus) -> Result<Vec<u8>, CliError> {
    let mut buf = Vec::new();
    write_corpus(c, &mut buf)?;
    Ok(buf)
}

fn positive_rate(c: &Corpus) -> f64 {
    c.samples().iter().filter(|s| s.outcome == 1).count() as f64 / c.len().max(1) as f64
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

/// Parses arguments, runs the command, and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 4 } else { 0 };
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    let mut cfg = match &cli.common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.common.seed {
        cfg.set_seed(seed);
    }
    cfg.validate()?;
    let threads = cli.common.threads.max(1);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(failed)?;
    let out = cli
        .common
        .out
        .clone()
        .unwrap_or_else(|| Path::new("out").join(cli.command.name()));
    let mut stage = Stage::new(cli.command.name(), out, cfg.seed);
    pool.install(|| {
        dispatch(
            &cli.command,
            &mut cfg,
            &mut stage,
            cli.common.seed.is_some(),
        )
    })?;
    stage.finish(&cfg, threads)
}

fn dispatch(
    cmd: &Command,
    cfg: &mut RunConfig,
    stage: &mut Stage,
    seed_flag: bool,
) -> Result<(), CliError> {
    match cmd {
        Command::Synth { spec } => cmd_synth(cfg, stage, spec, seed_flag),
        Command::Split { corpus } => cmd_split(cfg, stage, corpus),
        Command::Tune { train } => cmd_tune(cfg, stage, train),
        Command::Train { train } => cmd_train(cfg, stage, train),
        Command::Interpret { model, corpus } => cmd_interpret(cfg, stage, model, corpus),
        Command::Effects { model, train, test } => cmd_effects(cfg, stage, model, train, test),
        Command::Rlr { train, test, model } => cmd_rlr(cfg, stage, train, test, model),
        Command::Gradcheck => cmd_gradcheck(cfg, stage),
        Command::Evaluate { model, corpus } => cmd_evaluate(cfg, stage, model, corpus),
    }
}

fn cmd_synth(
    cfg: &mut RunConfig,
    stage: &mut Stage,
    spec_flag: &Option<PathBuf>,
    seed_flag: bool,
) -> Result<(), CliError> {
    let mut spec = match spec_flag.clone().or_else(|| cfg.paths.spec.clone()) {
        Some(p) => {
            require(&p)?;
            let spec: SyntheticSpec =
                toml::from_str(&fs::read_to_string(&p).map_err(failed)?).map_err(invalid)?;
            stage.inputs.push(p);
            spec
        }
        None => cfg
            .synth
            .clone()
            .ok_or_else(|| invalid("no synthetic spec: pass --spec or add a [synth] section"))?,
    };
    if seed_flag {
        spec.seed = cfg.seed;
    }
    let corpus = generate_synthetic(&spec)?;
    stage.seeds.insert("synthetic".into(), spec.seed);
    let patterns: Vec<_> = spec
        .planted_patterns
        .iter()
        .map(|p| {
            let hits = corpus
                .samples()
                .iter()
                .filter(|s| p.occurs_in(&s.tokens))
                .count();
            json!({
                "tokens": p.tokens.join(" "),
                "variants": p.alternatives().iter().map(Vec::len).product::<usize>(),
                "base_rate": p.base_rate,
                "occurrence_rate": hits as f64 / corpus.len() as f64,
            })
        })
        .collect();
    let summary = json!({
        "n_samples": corpus.len(),
        "embedding_dim": corpus.embedding_dim(),
        "max_tokens": corpus.max_tokens(),
        "positive_rate": positive_rate(&corpus),
        "analytic_positive_rate": spec.analytic_positive_rate(),
        "planted_patterns": patterns,
    });
    println!(
        "synth: N={} D={} patterns={} positive rate {:.4} (expected {:.4})",
        corpus.len(),
        corpus.embedding_dim(),
        spec.planted_patterns.len(),
        positive_rate(&corpus),
        spec.analytic_positive_rate()
    );
    stage.add("corpus.embt", corpus_bytes(&corpus)?);
    stage.add_json("summary.json", &summary);
    cfg.synth = Some(spec);
    Ok(())
}

fn cmd_split(cfg: &RunConfig, stage: &mut Stage, corpus: &Option<PathBuf>) -> Result<(), CliError> {
    let corpus = load_corpus(stage, pick(corpus, &cfg.paths.corpus, "corpus")?)?;
    let spec = SplitSpec {
        train_fraction: cfg.split.train_fraction,
        seed: cfg.seed,
    };
    let (tr, te) = split(&corpus, &spec)?;
    println!("split: {} train / {} test", tr.len(), te.len());
    stage.add("train.embt", corpus_bytes(&tr)?);
    stage.add("test.embt", corpus_bytes(&te)?);
    stage.add_json(
        "split.json",
        &json!({
            "n_train": tr.len(),
            "n_test": te.len(),
            "train_positive_rate": positive_rate(&tr),
            "test_positive_rate": positive_rate(&te),
        }),
    );
    Ok(())
}

fn cmd_tune(
    cfg: &RunConfig,
    stage: &mut Stage,
    train_path: &Option<PathBuf>,
) -> Result<(), CliError> {
    let corpus = load_corpus(
        stage,
        pick(train_path, &cfg.paths.train, "training corpus")?,
    )?;
    let grid = cfg.tune.grid.expand(&cfg.train);
    if grid.is_empty() {
        return Err(invalid("tuning grid is empty"));
    }
    let results = cross_validate(&corpus, &grid, cfg.tune.folds, cfg.seed)?;
    let best = results
        .iter()
        .find(|r| r.failure.is_none())
        .ok_or_else(|| failed("every grid entry failed"))?;
    println!(
        "tune: {} grid points, best composite {:.4} (accuracy {:.4})",
        results.len(),
        best.composite,
        best.mean_accuracy
    );
    let mut best_cfg = cfg.clone();
    best_cfg.train = best.config.clone();
    stage.add("tune.tsv", tune_results_to_tsv(&results));
    stage.add_json("tune.json", &results);
    stage.add("best_config.toml", best_cfg.to_toml()?);
    Ok(())
}

fn cmd_train(
    cfg: &RunConfig,
    stage: &mut Stage,
    train_path: &Option<PathBuf>,
) -> Result<(), CliError> {
    let corpus = load_corpus(
        stage,
        pick(train_path, &cfg.paths.train, "training corpus")?,
    )?;
    let (params, history) = train(&corpus, &cfg.train)?;
    let acc = accuracy(&params, &corpus).map_err(failed)?;
    println!(
        "train: {} epochs, best epoch {}, training accuracy {:.4}",
        history.epochs.len(),
        history.best_epoch,
        acc
    );
    let ck = Checkpoint {
        params,
        config: Some(cfg.train.clone()),
    };
    stage.add("model.json", ck.to_json());
    stage.add("history.tsv", history.to_tsv());
    stage.add_json("history.json", &history);
    Ok(())
}

fn cmd_interpret(
    cfg: &RunConfig,
    stage: &mut Stage,
    model: &Option<PathBuf>,
    corpus: &Option<PathBuf>,
) -> Result<(), CliError> {
    let ck = load_model(stage, pick(model, &cfg.paths.model, "model")?)?;
    let corpus = load_corpus(stage, pick(corpus, &cfg.paths.test, "corpus")?)?;
    let reports = filter_reports(
        &ck.params,
        &corpus,
        cfg.interpret.threshold,
        cfg.interpret.top_k,
    )
    .map_err(failed)?;
    let pooled = pooled_matrix(&ck.params, &corpus).map_err(failed)?;
    let grid = correlation_grid(&pooled.values, &pooled.values).map_err(failed)?;
    let labels: Vec<String> = (0..ck.params.total_filters())
        .map(|j| {
            let (l, f) = ck.params.locate_filter(j);
            format!("L{l}F{f}")
        })
        .collect();
    let activity = corpus_activity(&ck.params, &corpus).map_err(failed)?;
    let per_layer: Vec<f64> = activity.iter().map(|a| a.max).collect();
    let n_useful = reports.iter().filter(|r| r.useful).count();
    println!(
        "interpret: {} of {} filters useful",
        n_useful,
        reports.len()
    );
    stage.add("filters.tsv", reports_to_tsv(&reports));
    stage.add_json("filters.json", &reports);
    stage.add(
        "filter_correlation.tsv",
        grid_to_tsv(&grid, &labels, &labels),
    );
    stage.add_json(
        "activity.json",
        &json!({ "max_correlation": max_filter_correlation(&activity), "per_layer": per_layer }),
    );
    Ok(())
}

fn cmd_effects(
    cfg: &RunConfig,
    stage: &mut Stage,
    model: &Option<PathBuf>,
    train_path: &Option<PathBuf>,
    test_path: &Option<PathBuf>,
) -> Result<(), CliError> {
    let ck = load_model(stage, pick(model, &cfg.paths.model, "model")?)?;
    let train_set = load_corpus(
        stage,
        pick(train_path, &cfg.paths.train, "training corpus")?,
    )?;
    let test = load_corpus(stage, pick(test_path, &cfg.paths.test, "test corpus")?)?;
    if cfg.effects.b_fixed == 0 {
        return Err(invalid("effects.b_fixed must be at least 1"));
    }
    let spec = TreatmentSpec {
        useful_threshold: cfg.interpret.threshold,
        mode: cfg.interpret.mode,
    };
    let (z_train, z_test) = model_treatments(&ck.params, Some(&train_set), &test, &spec)?;
    let z_train = z_train.expect("training corpus given");
    let y_test = test.outcomes();
    let collinearity = collinearity_check(z_test.values.view());
    let fit_test = ols_fit(&z_test, &y_test).map_err(failed)?;
    let fit_train = ols_fit(&z_train, &train_set.outcomes()).map_err(failed)?;
    let mse = oos_mse(&fit_train, z_test.values.view(), &y_test).map_err(failed)?;
    let acc = accuracy(&ck.params, &test).map_err(failed)?;

    let boot = bootstrap_fixed(
        &ck.params,
        &test,
        Some(&train_set),
        &spec,
        cfg.effects.b_fixed,
        cfg.seed,
    )?;
    let reports = filter_reports(
        &ck.params,
        &test,
        cfg.interpret.threshold,
        cfg.interpret.top_k,
    )
    .map_err(failed)?;
    println!(
        "effects: {} treatments, adjusted R2 {:.4}, out-of-sample MSE {:.4}, {} failed resamples",
        z_test.n_cols(),
        fit_test.adjusted_r2,
        mse,
        boot.n_failed
    );
    stage.add(
        "effects.tsv",
        effect_table_tsv(&reports, &z_test, &fit_test, Some(&boot)),
    );
    stage.add_json("ols.json", &fit_test);
    stage.add_json("collinearity.json", &collinearity);
    stage.add_json(
        "metrics.json",
        &json!({
            "n_test": test.len(),
            "n_treatments": z_test.n_cols(),
            "adjusted_r2": fit_test.adjusted_r2,
            "r2": fit_test.r2,
            "oos_mse": mse,
            "accuracy": acc,
        }),
    );
    stage.add("bootstrap_fixed.tsv", boot.resamples_to_tsv());
    stage.add_json("bootstrap_fixed.json", &boot);

    if cfg.effects.b_retrain > 0 {
        let mut config = ck.config.clone().unwrap_or_else(|| cfg.train.clone());
        config.seed = cfg.seed;
        let retrain = bootstrap_retrain(
            &train_set,
            &test,
            &config,
            &spec,
            cfg.effects.b_retrain,
            cfg.seed,
            Resampling::WithReplacement,
        )?;
        println!(
            "effects: retrain bootstrap, {} failed resamples",
            retrain.n_failed
        );
        stage.add("bootstrap_retrain.tsv", retrain.resamples_to_tsv());
        stage.add_json("bootstrap_retrain.json", &retrain);
    }
    Ok(())
}

fn resolve_stopwords(name: &str) -> Result<BTreeSet<String>, CliError> {
    match name {
        "english" => Ok(english_stopwords()),
        "chinese" => Ok(chinese_stopwords()),
        "none" => Ok(BTreeSet::new()),
        path => {
            require(Path::new(path))?;
            load_stopwords(path).map_err(failed)
        }
    }
}

fn cmd_rlr(
    cfg: &RunConfig,
    stage: &mut Stage,
    train_path: &Option<PathBuf>,
    test_path: &Option<PathBuf>,
    model: &Option<PathBuf>,
) -> Result<(), CliError> {
    let train_set = load_corpus(
        stage,
        pick(train_path, &cfg.paths.train, "training corpus")?,
    )?;
    let test = load_corpus(stage, pick(test_path, &cfg.paths.test, "test corpus")?)?;
    let stopwords = resolve_stopwords(&cfg.rlr.stopwords)?;
    let vocab =
        build_vocab(&train_set, cfg.rlr.n, &stopwords, cfg.rlr.min_frequency).map_err(failed)?;
    let labels = vocab.labels();
    let x_train = featurize(&train_set, &vocab);
    let sel = select_lambda(x_train.view(), &train_set.outcomes(), cfg.rlr.max_selected)
        .map_err(failed)?;
    println!(
        "rlr: vocabulary {}, lambda {:.6} selects {} grams ({} dropped as collinear)",
        vocab.len(),
        sel.lambda,
        sel.selected.len(),
        sel.dropped_collinear.len()
    );

    let mut vocab_tsv = String::from("gram\tfrequency\n");
    for (g, c) in &vocab.grams {
        vocab_tsv.push_str(&format!("{}\t{c}\n", g.join(" ")));
    }
    stage.add("vocab.tsv", vocab_tsv);
    stage.add("selected.tsv", selection_to_tsv(&sel, &labels));
    stage.add_json("selection.json", &sel);

    let sel_labels: Vec<String> = sel.selected.iter().map(|&j| labels[j].clone()).collect();
    let x_test = featurize(&test, &vocab).select(Axis(1), &sel.selected);
    let z_train =
        TreatmentMatrix::from_features(x_train.select(Axis(1), &sel.selected), sel_labels.clone());
    let z_test = TreatmentMatrix::from_features(x_test, sel_labels.clone());
    let y_test = test.outcomes();
    let fit_train = ols_fit(&z_train, &train_set.outcomes()).map_err(failed)?;
    let fit_test = ols_fit(&z_test, &y_test).map_err(failed)?;
    let mse = oos_mse(&fit_train, z_test.values.view(), &y_test).map_err(failed)?;
    let boot = bootstrap_treatments(
        &z_test,
        &y_test,
        Some(&fit_train),
        cfg.effects.b_fixed.max(1),
        cfg.seed,
        Resampling::WithReplacement,
    )
    .map_err(failed)?;
    let mut table = String::from("gram\tbeta\tci_lower\tci_upper\n");
    for (j, l) in sel_labels.iter().enumerate() {
        let iv = &boot.coefficients[j];
        table.push_str(&format!(
            "{l}\t{}\t{}\t{}\n",
            fit_test.coefficients[j], iv.lower, iv.upper
        ));
    }
    stage.add("rlr_effects.tsv", table);
    stage.add("bootstrap_fixed.tsv", boot.resamples_to_tsv());
    stage.add_json(
        "metrics.json",
        &json!({ "adjusted_r2": fit_test.adjusted_r2, "r2": fit_test.r2, "oos_mse": mse, "n_selected": sel.selected.len() }),
    );

    if let Some(p) = model {
        let ck = load_model(stage, p.clone())?;
        let pooled = pooled_matrix(&ck.params, &test).map_err(failed)?;
        let useful = useful_filters(&pooled.values, cfg.interpret.threshold);
        let keep: Vec<usize> = (0..useful.len()).filter(|&j| useful[j]).collect();
        let cnn = pooled.values.select(Axis(1), &keep);
        let cnn_labels: Vec<String> = keep
            .iter()
            .map(|&j| {
                let (l, f) = ck.params.locate_filter(j);
                format!("L{l}F{f}")
            })
            .collect();
        let grid = correlation_grid(&cnn, &z_test.values).map_err(failed)?;
        stage.add(
            "cnn_rlr_correlation.tsv",
            grid_to_tsv(&grid, &cnn_labels, &sel_labels),
        );
    }
    Ok(())
}

/// A random model and batch for gradient checking.
pub fn gradcheck_instance(cfg: &GradcheckConfig, seed: u64) -> (ModelParams, Vec<Sample>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ModelParams::glorot(
        cfg.embedding_dim,
        &cfg.kernel_sizes,
        cfg.n_filters,
        &mut rng,
    );
    for layer in &mut params.conv_layers {
        for b in layer.biases.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *b = 0.5 * z;
        }
    }
    for w in params.output.weights.iter_mut() {
        *w = StandardNormal.sample(&mut rng);
    }
    params.output.bias = 0.1;
    let [lo, hi] = cfg.doc_length_range;
    let batch = (0..cfg.batch_size)
        .map(|i| {
            let u = rng.random_range(lo..=hi);
            let embeddings = Array2::from_shape_fn((u, cfg.embedding_dim), |_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z as f32
            });
            Sample {
                id: i as u64,
                tokens: (0..u).map(|t| format!("t{t}")).collect(),
                embeddings,
                outcome: rng.random_range(0..2u8),
                raw_text: None,
            }
        })
        .collect();
    (params, batch)
}

fn cmd_gradcheck(cfg: &RunConfig, stage: &mut Stage) -> Result<(), CliError> {
    let g = &cfg.gradcheck;
    if g.batch_size == 0
        || g.doc_length_range[0] == 0
        || g.doc_length_range[0] > g.doc_length_range[1]
    {
        return Err(invalid(
            "gradcheck needs a non-empty batch and document length range",
        ));
    }
    let (params, batch) = gradcheck_instance(g, cfg.seed);
    params.validate().map_err(invalid)?;
    let report =
        fd_check(&params, &batch, &g.loss_weights, g.h, g.tie_tolerance).map_err(failed)?;
    let passed = report.passes(g.tolerance);
    println!(
        "gradcheck: {} max relative error {:.3e} over {} coordinates ({} flagged as ties)",
        if passed { "PASS" } else { "FAIL" },
        report.max_rel_error(),
        report.entries.len(),
        report.n_flagged()
    );
    stage.add("fd.tsv", report.to_tsv());
    stage.add_json(
        "summary.json",
        &json!({
            "passed": passed,
            "max_rel_error": report.max_rel_error(),
            "tolerance": g.tolerance,
            "n_params": report.entries.len(),
            "n_flagged": report.n_flagged(),
        }),
    );
    if passed {
        Ok(())
    } else {
        Err(failed(format!(
            "gradient check failed: max relative error {:.3e} > {:.1e}",
            report.max_rel_error(),
            g.tolerance
        )))
    }
}

fn cmd_evaluate(
    cfg: &RunConfig,
    stage: &mut Stage,
    model: &Option<PathBuf>,
    corpus: &Option<PathBuf>,
) -> Result<(), CliError> {
    let ck = load_model(stage, pick(model, &cfg.paths.model, "model")?)?;
    let corpus = load_corpus(stage, pick(corpus, &cfg.paths.test, "corpus")?)?;
    let preds = predict(&ck.params, corpus.samples()).map_err(failed)?;
    let (mut tp, mut fp, mut tn, mut fn_) = (0usize, 0usize, 0usize, 0usize);
    for (p, s) in preds.iter().zip(corpus.samples()) {
        match (*p >= 0.5, s.outcome == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    let ratio = |a: usize, b: usize| {
        if b == 0 {
            f64::NAN
        } else {
            a as f64 / b as f64
        }
    };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = 2.0 * precision * recall / (precision + recall);
    let weights = ck
        .config
        .as_ref()
        .map_or(cfg.train.loss_weights, |c| c.loss_weights);
    let loss = total_loss(&ck.params, corpus.samples(), &weights).map_err(failed)?;
    let acc = ratio(tp + tn, corpus.len());
    println!(
        "evaluate: accuracy {acc:.4}, F1 {f1:.4} on {} samples",
        corpus.len()
    );
    stage.add_json(
        "metrics.json",
        &json!({
            "n": corpus.len(),
            "accuracy": acc,
            "precision": precision,
            "recall": recall,
            "f1": f1,
            "confusion": { "tp": tp, "fp": fp, "tn": tn, "fn": fn_ },
            "bce": loss.bce,
            "total_loss": loss.total,
        }),
    );
    Ok(())
}

//! Command-line pipeline: generate a synthetic universe, train an adapter,
//! train a detector, evaluate, and export difference vectors.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data or
//! invariant error, 3 numeric failure.

use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use tetraloss::adapter::{load_checkpoint, save_checkpoint, AdapterParams};
use tetraloss::dmad::{evaluate_scenarios, mad_scores, train_dmad, training_pairs, DmadConfig, DmadModel};
use tetraloss::embedding::{load_embeddings, save_embeddings, EmbeddingFormat, EmbeddingSet, SampleKind};
use tetraloss::losses::Scenario;
use tetraloss::metrics::{
    build_comparisons, det_points, det_to_csv, export_difference_vectors, reports_to_csv, reports_to_table,
    score_pairs, ComparisonProtocol, FRONTEX_FMR_TARGETS,
};
use tetraloss::synth::{generate_universe, split_protocol, SplitProtocol, UniverseConfig};
use tetraloss::trainer::{train_with_observer, TrainConfig};
use tetraloss::Error;

pub const SCHEMA_VERSION: u32 = 1;

pub const UNIVERSE_FILE: &str = "universe.emb";
pub const TRAIN_FILE: &str = "train.emb";
pub const VAL_FILE: &str = "val.emb";
pub const TEST_FILE: &str = "test.emb";
pub const GROUND_TRUTH_FILE: &str = "ground_truth.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.toml";
pub const CHECKPOINT_FILE: &str = "adapter.tetr";
pub const HISTORY_FILE: &str = "history.csv";
pub const HISTORY_META_FILE: &str = "history_meta.json";
pub const DMAD_FILE: &str = "dmad.bin";
pub const REPORT_CSV_FILE: &str = "report.csv";
pub const REPORT_TABLE_FILE: &str = "report.txt";
pub const DIFFS_FILE: &str = "difference_vectors.csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub fmr_targets: Vec<f64>,
    /// Seeded subsample size for non-mated comparisons.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nonmated_cap: Option<usize>,
    pub det_points: usize,
    pub diff_pairs_per_class: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            fmr_targets: FRONTEX_FMR_TARGETS.to_vec(),
            nonmated_cap: None,
            det_points: 200,
            diff_pairs_per_class: tetraloss::metrics::DEFAULT_DIFF_PAIRS_PER_CLASS,
        }
    }
}

/// The whole pipeline configuration, read from a TOML document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    pub universe: UniverseConfig,
    pub protocol: SplitProtocol,
    pub train: TrainConfig,
    pub dmad: DmadConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            version: SCHEMA_VERSION,
            out_dir: None,
            universe: UniverseConfig::default(),
            protocol: SplitProtocol::default(),
            train: TrainConfig::default(),
            dmad: DmadConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.version != SCHEMA_VERSION {
            return Err(CliError::config(format!(
                "config version {} is not supported (expected {SCHEMA_VERSION})",
                self.version
            )));
        }
        self.universe.validate()?;
        self.train.validate()?;
        self.dmad.validate()?;
        if self.eval.fmr_targets.is_empty() || self.eval.fmr_targets.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(CliError::config("eval.fmr_targets must be a non-empty list of values in [0, 1]"));
        }
        if self.eval.det_points < 2 {
            return Err(CliError::config("eval.det_points must be at least 2"));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExitKind {
    Usage = 1,
    Data = 2,
    Numeric = 3,
}

#[derive(Debug)]
pub struct CliError {
    pub kind: ExitKind,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        CliError { kind: ExitKind::Usage, message: message.into() }
    }

    pub fn data(message: impl Into<String>) -> Self {
        CliError { kind: ExitKind::Data, message: message.into() }
    }

    pub fn code(&self) -> i32 {
        self.kind as i32
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let kind = match e {
            Error::ConfigInvalid(_) | Error::ProtocolInfeasible(_) => ExitKind::Usage,
            Error::NonFiniteGradient(_) | Error::NonFiniteLoss(_) => ExitKind::Numeric,
            _ => ExitKind::Data,
        };
        CliError { kind, message: e.to_string() }
    }
}

fn io_context<'a>(what: &str, path: &'a Path) -> impl FnOnce(std::io::Error) -> CliError + 'a {
    let what = what.to_string();
    move |e| CliError::data(format!("{what} {}: {e}", path.display()))
}

#[derive(Parser, Debug)]
#[command(name = "tetraloss", version, about = "Morph-robust face verification with TetraLoss adapters")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory (overrides `out_dir` in the configuration).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Training scenario: triplet, tetra, triplet2 or tetra2.
    #[arg(long)]
    pub scenario: Option<String>,
    /// Comma-separated FMR operating points, e.g. `1e-3,1e-4`.
    #[arg(long, value_delimiter = ',')]
    pub fmr_targets: Option<Vec<f64>>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the synthetic universe and its train/val/test splits.
    Generate {
        #[command(flatten)]
        common: Common,
    },
    /// Train an adapter on generated data.
    Train {
        #[command(flatten)]
        common: Common,
        /// Directory written by `generate`.
        #[arg(long)]
        data: PathBuf,
    },
    /// Train the differential morphing-attack detector.
    TrainDmad {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
    },
    /// Evaluate the test split with and without adapter and detector.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Adapter checkpoint written by `train`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Detector written by `train-dmad`.
        #[arg(long)]
        dmad: Option<PathBuf>,
    },
    /// Export squared difference vectors of sampled test comparisons.
    ExportDiffs {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Pairs per comparison class.
        #[arg(long)]
        n: Option<usize>,
    },
}

/// Resolved configuration and output directory for one command.
pub struct Resolved {
    pub config: RunConfig,
    pub out_dir: PathBuf,
}

pub fn resolve(common: &Common) -> Result<Resolved, CliError> {
    let mut config = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        config.universe.seed = seed;
        config.train.seed = seed;
    }
    if let Some(s) = &common.scenario {
        config.train.scenario = s.parse::<Scenario>()?;
    }
    if let Some(t) = &common.fmr_targets {
        config.eval.fmr_targets = t.clone();
    }
    if let Some(o) = &common.out {
        config.out_dir = Some(o.clone());
    }
    config.validate()?;
    let out_dir = config.out_dir.clone().ok_or_else(|| CliError::config("no output directory: pass --out"))?;
    Ok(Resolved { config, out_dir })
}

fn prepare_out(r: &Resolved) -> Result<(), CliError> {
    fs::create_dir_all(&r.out_dir).map_err(io_context("cannot create output directory", &r.out_dir))?;
    write_file(&r.out_dir.join(RESOLVED_CONFIG_FILE), r.config.to_toml().as_bytes())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(io_context("cannot write", path))
}

fn load_split(data: &Path, file: &str) -> Result<EmbeddingSet, CliError> {
    if !data.is_dir() {
        return Err(CliError::data(format!(
            "data directory {} does not exist; run `tetraloss generate --out {}` first",
            data.display(),
            data.display()
        )));
    }
    let path = data.join(file);
    if !path.is_file() {
        return Err(CliError::data(format!(
            "{} is missing from {}; was it written by `tetraloss generate`?",
            file,
            data.display()
        )));
    }
    load_embeddings(&path, EmbeddingFormat::Binary)
        .map_err(|e| CliError { kind: CliError::from(e).kind, message: format!("cannot load {}", path.display()) })
}

fn counts_json(set: &EmbeddingSet) -> serde_json::Value {
    serde_json::json!({
        "references": set.count(SampleKind::Reference),
        "probes": set.count(SampleKind::Probe),
        "morphs": set.count(SampleKind::Morph),
        "subjects": set.all_subjects().len(),
    })
}

fn pretty(v: &impl Serialize) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(v).expect("json serializes");
    s.push('\n');
    s.into_bytes()
}

pub fn cmd_generate(r: &Resolved) -> Result<(), CliError> {
    let universe = generate_universe(&r.config.universe)?;
    let splits = split_protocol(&universe, &r.config.protocol)?;
    prepare_out(r)?;
    let d = &r.out_dir;
    for (file, set) in [(UNIVERSE_FILE, &universe.set), (TRAIN_FILE, &splits.train), (VAL_FILE, &splits.val), (TEST_FILE, &splits.test)] {
        save_embeddings(set, &d.join(file), EmbeddingFormat::Binary)?;
    }
    write_file(&d.join(GROUND_TRUTH_FILE), &pretty(&universe.truth))?;
    let manifest = serde_json::json!({
        "dim": universe.set.dim(),
        "universe": counts_json(&universe.set),
        "train": counts_json(&splits.train),
        "val": counts_json(&splits.val),
        "test": counts_json(&splits.test),
        "protocol": r.config.protocol,
    });
    write_file(&d.join(MANIFEST_FILE), &pretty(&manifest))?;
    println!(
        "universe: {} references, {} probes, {} morphs",
        universe.set.count(SampleKind::Reference),
        universe.set.count(SampleKind::Probe),
        universe.set.count(SampleKind::Morph)
    );
    for (name, set) in [("train", &splits.train), ("val", &splits.val), ("test", &splits.test)] {
        println!("{name}: {} records ({} morphs)", set.len(), set.count(SampleKind::Morph));
    }
    Ok(())
}

#[derive(Serialize)]
struct HistoryMeta {
    scenario: Scenario,
    seed: u64,
    epochs_run: usize,
    best_epoch: usize,
    best_val_loss: f64,
    decay_epochs: Vec<usize>,
}

pub fn cmd_train(r: &Resolved, data: &Path) -> Result<(), CliError> {
    let train_set = load_split(data, TRAIN_FILE)?;
    let val_set = load_split(data, VAL_FILE)?;
    let cfg = &r.config.train;
    prepare_out(r)?;
    let (params, history) = train_with_observer(cfg, &train_set, &val_set, |rec| {
        eprintln!(
            "epoch {:>3}  train {:.6}  val {:.6}{}{}",
            rec.epoch,
            rec.train_loss,
            rec.val_loss,
            if rec.decayed { "  decay" } else { "" },
            if rec.stopped { "  early stop" } else { "" }
        );
    })?;
    save_checkpoint(&params, &r.out_dir.join(CHECKPOINT_FILE))?;
    history.write_csv(&r.out_dir.join(HISTORY_FILE))?;
    let meta = HistoryMeta {
        scenario: history.scenario,
        seed: cfg.seed,
        epochs_run: history.records.len(),
        best_epoch: history.best_epoch,
        best_val_loss: history.best_val_loss(),
        decay_epochs: history.decay_epochs(),
    };
    write_file(&r.out_dir.join(HISTORY_META_FILE), &pretty(&meta))?;
    println!(
        "scenario {}: {} epochs, best epoch {} (val loss {:.6})",
        history.scenario,
        history.records.len(),
        history.best_epoch,
        history.best_val_loss()
    );
    Ok(())
}

pub fn cmd_train_dmad(r: &Resolved, data: &Path) -> Result<(), CliError> {
    let train_set = load_split(data, TRAIN_FILE)?;
    prepare_out(r)?;
    let pairs = build_comparisons(&train_set, &ComparisonProtocol::default())?;
    let (bona_fide, morphs) = training_pairs(&train_set, &pairs);
    let model = train_dmad(&bona_fide, &morphs, &r.config.dmad, r.config.train.seed)?;
    model.save(&r.out_dir.join(DMAD_FILE))?;
    println!("detector trained on {} bona fide and {} morph pairs", bona_fide.len(), morphs.len());
    Ok(())
}

fn load_adapter(path: &Path) -> Result<AdapterParams, CliError> {
    load_checkpoint(path).map_err(|e| CliError { kind: ExitKind::Data, message: format!("cannot load checkpoint {}: {e}", path.display()) })
}

fn slug(name: &str) -> String {
    name.to_lowercase().replace(" & ", "_").replace(' ', "_")
}

pub fn cmd_eval(r: &Resolved, data: &Path, checkpoint: Option<&Path>, dmad: Option<&Path>) -> Result<(), CliError> {
    let test = load_split(data, TEST_FILE)?;
    let adapter = checkpoint.map(load_adapter).transpose()?;
    let detector = dmad
        .map(|p| {
            DmadModel::load(p)
                .map_err(|e| CliError::data(format!("cannot load detector {}: {e}", p.display())))
        })
        .transpose()?;
    prepare_out(r)?;
    let protocol = ComparisonProtocol { nonmated_cap: r.config.eval.nonmated_cap, seed: r.config.train.seed };
    let pairs = build_comparisons(&test, &protocol)?;
    let original = score_pairs(None, &test, &pairs)?;
    let hardened = adapter.as_ref().map(|a| score_pairs(Some(a), &test, &pairs)).transpose()?;
    let mad = detector.as_ref().map(|m| mad_scores(m, &test, &pairs)).transpose()?;
    let targets = &r.config.eval.fmr_targets;
    let reports = evaluate_scenarios(&original, hardened.as_ref(), mad.as_ref(), targets)?;

    let d = &r.out_dir;
    write_file(&d.join(REPORT_CSV_FILE), reports_to_csv(&reports).as_bytes())?;
    let table = reports_to_table(&reports);
    write_file(&d.join(REPORT_TABLE_FILE), table.as_bytes())?;
    let mut score_sets = vec![("original", original.clone())];
    if let Some(h) = &hardened {
        score_sets.push(("tetra", h.clone()));
    }
    if let Some(m) = &mad {
        score_sets.push(("mad", m.clone()));
        score_sets.push(("original_mad", tetraloss::dmad::fuse_scores(&original, m)?));
        if let Some(h) = &hardened {
            score_sets.push(("tetra_mad", tetraloss::dmad::fuse_scores(h, m)?));
        }
    }
    for (name, s) in &score_sets {
        s.write_csv(&d.join(format!("scores_{name}.csv")))?;
    }
    for rep in &reports {
        let scores = &score_sets.iter().find(|(n, _)| *n == slug(&rep.scenario)).expect("scores for each report").1;
        let det = det_points(scores, r.config.eval.det_points)?;
        write_file(&d.join(format!("det_{}.csv", slug(&rep.scenario))), det_to_csv(&det).as_bytes())?;
    }
    print!("{table}");
    Ok(())
}

pub fn cmd_export_diffs(r: &Resolved, data: &Path, checkpoint: Option<&Path>, n: Option<usize>) -> Result<(), CliError> {
    let test = load_split(data, TEST_FILE)?;
    let adapter = checkpoint.map(load_adapter).transpose()?;
    prepare_out(r)?;
    let per_class = n.unwrap_or(r.config.eval.diff_pairs_per_class);
    let path = r.out_dir.join(DIFFS_FILE);
    let rows = export_difference_vectors(adapter.as_ref(), &test, per_class, r.config.train.seed, &path)?;
    println!("wrote {rows} difference vectors to {}", path.display());
    Ok(())
}

pub fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Generate { common } => cmd_generate(&resolve(&common)?),
        Command::Train { common, data } => cmd_train(&resolve(&common)?, &data),
        Command::TrainDmad { common, data } => cmd_train_dmad(&resolve(&common)?, &data),
        Command::Eval { common, data, checkpoint, dmad } => {
            cmd_eval(&resolve(&common)?, &data, checkpoint.as_deref(), dmad.as_deref())
        }
        Command::ExportDiffs { common, data, checkpoint, n } => {
            cmd_export_diffs(&resolve(&common)?, &data, checkpoint.as_deref(), n)
        }
    }
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitKind::Usage as i32 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.code()
        }
    }
}

//! The `ebr` command line.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use ebr_core::data::{generate_catalog, generate_interactions, generate_relevance_set, GeneratorConfig};
use ebr_core::eval::EvalReport;
use ebr_core::index::{IndexMode, RetrievalIndex};
use ebr_core::towers::QueryInput;
use ebr_core::training::{self, Arm, LossRecord, PreparedData};

use crate::checkpoint::{self, Checkpoint};
use crate::config::{self, Overrides};
use crate::error::EbrError;
use crate::jsonl::{self, DatasetManifest};
use crate::{index_file, table1};

pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "ebr",
    version,
    about = "Two-tower embedding retrieval: data, training, evaluation, indexing and search"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic marketplace dataset as JSONL files.
    GenData(GenDataArgs),
    /// Train one arm and write a checkpoint after every epoch.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a data directory.
    Eval(EvalArgs),
    /// Train and evaluate all four arms over seeds 1, 2, 3.
    Table1(Table1Args),
    /// Embed the documents (or queries) of a data directory.
    Embed(EmbedArgs),
    /// Retrieval index operations.
    #[command(subcommand)]
    Index(IndexCommand),
    /// Retrieve the top-k documents for a query.
    Search(SearchArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub seed: u64,
    /// Output directory (created if missing).
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 5000)]
    pub products: usize,
    #[arg(long, default_value_t = 2000)]
    pub queries: usize,
    #[arg(long, default_value_t = 50000)]
    pub impressions: usize,
    /// Generator-labelled relevance pairs.
    #[arg(long, default_value_t = 20000)]
    pub relevance_pairs: usize,
    /// JSON file with generator parameters merged over the defaults.
    #[arg(long)]
    pub generator: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Run config, JSON or key=value lines.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub arm: Option<Arm>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override a config field, e.g. --set tower.heads=2 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Checkpoint path, rewritten after each epoch.
    #[arg(long)]
    pub out: PathBuf,
    /// Loss log CSV; defaults to <out>.loss.csv.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Report path (the report is also printed to stdout).
    #[arg(long)]
    pub out: PathBuf,
    /// Held-out day; defaults to the dataset's, then the checkpoint's.
    #[arg(long)]
    pub eval_day: Option<u32>,
}

#[derive(Debug, Args)]
pub struct Table1Args {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',', default_values_t = table1::SEEDS)]
    pub seeds: Vec<u64>,
}

#[derive(Debug, Args)]
pub struct EmbedArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Raw little-endian f32 matrix; ids and width go to <out>.json.
    #[arg(long)]
    pub out: PathBuf,
    /// Embed queries instead of documents.
    #[arg(long)]
    pub queries: bool,
    #[arg(long, default_value_t = 256)]
    pub chunk: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Exact,
    Ivf,
}

#[derive(Debug, Subcommand)]
pub enum IndexCommand {
    /// Build an index from an embedding matrix written by `embed`.
    Build(IndexBuildArgs),
}

#[derive(Debug, Args)]
pub struct IndexBuildArgs {
    #[arg(long)]
    pub embeddings: PathBuf,
    #[arg(long, value_enum)]
    pub mode: ModeArg,
    #[arg(long)]
    pub out: PathBuf,
    /// IVF cluster count.
    #[arg(long, default_value_t = 64)]
    pub clusters: usize,
    /// IVF clusters probed per query.
    #[arg(long, default_value_t = 8)]
    pub probes: usize,
}

#[derive(Debug, Args)]
pub struct SearchArgs {
    #[arg(long)]
    pub index: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub query: String,
    #[arg(short = 'k', long, default_value_t = 10)]
    pub k: usize,
    /// Override the index's probe count.
    #[arg(long)]
    pub probes: Option<usize>,
}

/// Runs the CLI on `args` (including the program name) and returns the exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}

/// Data and validation problems map to 2, everything else to 3.
pub fn exit_code(e: &anyhow::Error) -> i32 {
    for cause in e.chain() {
        if let Some(err) = cause.downcast_ref::<EbrError>() {
            return if err.is_data_error() { EXIT_DATA } else { EXIT_RUNTIME };
        }
        if let Some(err) = cause.downcast_ref::<ebr_core::Error>() {
            return if EbrError::Core(err.clone()).is_data_error() { EXIT_DATA } else { EXIT_RUNTIME };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return EXIT_DATA;
        }
    }
    EXIT_RUNTIME
}

fn dispatch(command: Command) -> anyhow::Result<()> {
    match command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Table1(a) => run_table1(a),
        Command::Embed(a) => embed(a),
        Command::Index(IndexCommand::Build(a)) => index_build(a),
        Command::Search(a) => search(a),
    }
}

fn overrides(run: &RunArgs) -> Overrides {
    Overrides { arm: run.arm, seed: run.seed, set: run.set.clone() }
}

fn gen_data(a: GenDataArgs) -> anyhow::Result<()> {
    let mut config = match &a.generator {
        Some(p) => jsonl::read_json::<GeneratorConfig>(p)?,
        None => GeneratorConfig::default(),
    };
    config.relevance_pairs = a.relevance_pairs;
    config.validate()?;
    let catalog = generate_catalog(a.seed, a.products, a.queries, &config)?;
    let interactions = generate_interactions(a.seed, &catalog, a.impressions)?;
    let relevance = generate_relevance_set(a.seed, &catalog, a.relevance_pairs)?;
    let manifest = DatasetManifest {
        seed: a.seed,
        products: a.products,
        queries: a.queries,
        impressions: a.impressions,
        relevance_pairs: relevance.len(),
        categories: config.categories,
        image_vec_dim: config.image_vec_dim,
        days: config.days,
        eval_day: config.eval_day,
    };
    let dataset = catalog.into_dataset(interactions, relevance);
    jsonl::write_dataset(&a.out_dir, &dataset, &manifest)?;
    println!("{}", serde_json::to_string(&manifest)?);
    Ok(())
}

fn loss_csv(log: &[LossRecord]) -> String {
    let mut s = String::from("step,l_rel,l_eng,l_total\n");
    for r in log {
        let eng = r.engagement.map(|v| v.to_string()).unwrap_or_default();
        let _ = writeln!(s, "{},{},{},{}", r.step, r.relevance, eng, r.total);
    }
    s
}

fn default_log_path(out: &Path) -> PathBuf {
    let mut p = out.as_os_str().to_owned();
    p.push(".loss.csv");
    PathBuf::from(p)
}

fn train(a: TrainArgs) -> anyhow::Result<()> {
    let config = config::load(a.run.config.as_deref(), &overrides(&a.run))?;
    let dataset = load_data(Path::new(&config.data_dir), &config.tower)?;
    let tower = config.effective_tower()?;
    let data = PreparedData::new(&dataset, &tower)?;
    log::info!("training {} (seed {}) for {} epochs", config.arm, config.seed, config.epochs);
    let outcome = training::train(&config, &dataset, &data, |epoch, model, params| {
        log::info!("epoch {} done, writing {}", epoch + 1, a.out.display());
        checkpoint::save(&a.out, &model.config, Some(&config), epoch + 1, params).map_err(|e| match e {
            EbrError::Core(c) => c,
            other => ebr_core::Error::Data(other.to_string()),
        })
    })?;
    let log_path = a.log.clone().unwrap_or_else(|| default_log_path(&a.out));
    checkpoint::write_atomic(&log_path, loss_csv(&outcome.log).as_bytes())?;
    if let Some(abort) = &outcome.aborted {
        // the params in the outcome are the last finite ones
        checkpoint::save(&a.out, &outcome.model.config, Some(&config), outcome.epochs_completed, &outcome.params)?;
        return Err(EbrError::Core(ebr_core::Error::NonFinite(format!(
            "training aborted at step {}: {}; last good parameters kept in {}",
            abort.step,
            abort.reason,
            a.out.display()
        ))))
        .context("train");
    }
    let summary = serde_json::json!({
        "checkpoint": a.out,
        "loss_log": log_path,
        "arm": config.arm,
        "seed": config.seed,
        "epochs": outcome.epochs_completed,
        "steps": outcome.log.len(),
        "final_loss": outcome.log.last().map(|r| r.total),
    });
    println!("{summary}");
    Ok(())
}

fn load_data(dir: &Path, tower: &ebr_core::towers::TowerConfig) -> anyhow::Result<ebr_core::data::Dataset> {
    let ds = jsonl::read_dataset(
        dir,
        tower.context.categorical.iter().find(|c| c.name == "category").map_or(0, |c| c.cardinality),
        tower.image_vec_dim,
    )
    .with_context(|| format!("loading data from {}", dir.display()))?;
    Ok(ds)
}

fn eval(a: EvalArgs) -> anyhow::Result<()> {
    let ckpt = checkpoint::load(&a.checkpoint)?;
    let model = ckpt.model()?;
    let dataset = load_data(&a.data, &ckpt.manifest.tower)?;
    let eval_day = match a.eval_day {
        Some(d) => d,
        None => match jsonl::read_manifest(&a.data)? {
            Some(m) => m.eval_day,
            None => ckpt.manifest.run.as_ref().map(|r| r.eval_day).unwrap_or(9),
        },
    };
    let chunk = ckpt.manifest.run.as_ref().map(|r| r.eval_chunk).unwrap_or(256);
    let data = PreparedData::new(&dataset, &ckpt.manifest.tower)?;
    let auc = training::evaluate(&model, &ckpt.params, &dataset, &data, eval_day, chunk)?;
    let report = EvalReport::new(auc, a.checkpoint.display().to_string(), ckpt.config_hash.clone());
    jsonl::write_json(&a.out, &report)?;
    println!("{}", serde_json::to_string(&report)?);
    Ok(())
}

fn run_table1(a: Table1Args) -> anyhow::Result<()> {
    let config = config::load(a.run.config.as_deref(), &overrides(&a.run))?;
    let dataset = load_data(Path::new(&config.data_dir), &config.tower)?;
    let workers = table1::threads();
    log::info!("table1: 4 arms x {} seeds on {workers} worker(s)", a.seeds.len());
    let table = table1::run(&config, &dataset, &Arm::ALL, &a.seeds, workers)?;
    jsonl::write_json(&a.out, &table)?;
    println!("{}", serde_json::to_string(&table)?);
    Ok(())
}

fn embed(a: EmbedArgs) -> anyhow::Result<()> {
    let ckpt: Checkpoint = checkpoint::load(&a.checkpoint)?;
    let model = ckpt.model()?;
    let tower = &ckpt.manifest.tower;
    let dataset = load_data(&a.data, tower)?;
    let (ids, rows): (Vec<u64>, Vec<Vec<f32>>) = if a.queries {
        let inputs = dataset.query_inputs(tower)?;
        let refs: Vec<&QueryInput> = inputs.values().collect();
        (inputs.keys().copied().collect(), model.embed_queries(&ckpt.params, &refs, a.chunk)?)
    } else {
        let inputs = dataset.document_inputs(tower);
        let refs: Vec<_> = inputs.values().collect();
        (inputs.keys().copied().collect(), model.embed_documents(&ckpt.params, &refs, a.chunk)?)
    };
    let dim = tower.embedding_dim;
    let flat: Vec<f32> = rows.into_iter().flatten().collect();
    index_file::write_embeddings(&a.out, &ids, dim, &flat)?;
    println!("{}", serde_json::json!({ "out": a.out, "rows": ids.len(), "dim": dim }));
    Ok(())
}

fn index_build(a: IndexBuildArgs) -> anyhow::Result<()> {
    let (ids, dim, values) = index_file::read_embeddings(&a.embeddings)?;
    let mode = match a.mode {
        ModeArg::Exact => IndexMode::Exact,
        ModeArg::Ivf => IndexMode::Ivf { clusters: a.clusters.min(ids.len().max(1)), probes: a.probes },
    };
    let n = ids.len();
    let index = RetrievalIndex::build(ids, values, dim, mode).map_err(EbrError::Core)?;
    index_file::save(&a.out, &index)?;
    println!("{}", serde_json::json!({ "out": a.out, "rows": n, "dim": dim, "mode": index.mode() }));
    Ok(())
}

fn search(a: SearchArgs) -> anyhow::Result<()> {
    let mut index = index_file::load(&a.index)?;
    if let Some(p) = a.probes {
        index = index.with_probes(p).map_err(EbrError::Core)?;
    }
    let ckpt = checkpoint::load(&a.checkpoint)?;
    let model = ckpt.model()?;
    let input = QueryInput::from_text(&a.query, &ckpt.manifest.tower).map_err(EbrError::Core)?;
    let emb = model.embed_queries(&ckpt.params, &[&input], 1)?.pop().ok_or_else(|| anyhow!("no query embedding"))?;
    if emb.len() != index.dim() {
        bail!(EbrError::format(
            &a.index,
            format!("index dimension {} but the checkpoint embeds into {}", index.dim(), emb.len())
        ));
    }
    let hits = index.search(&emb, a.k).map_err(EbrError::Core)?;
    let mut out = std::io::stdout().lock();
    for (rank, h) in hits.iter().enumerate() {
        writeln!(out, "{}\t{}\t{}", rank + 1, h.id, h.score)?;
    }
    Ok(())
}

/// Reads a whole file, mapping failures to a data error.
pub fn read_file(path: &Path) -> crate::Result<Vec<u8>> {
    fs::read(path).map_err(|e| EbrError::io(path, e))
}

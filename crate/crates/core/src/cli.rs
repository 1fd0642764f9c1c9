//! The `corgi` command line.
//!
//! Every command that trains writes a self-contained run directory:
//!
//! | file | content |
//! |------|---------|
//! | `config.txt` | full config snapshot, data paths relative to the directory |
//! | `edges.tsv`, `content.tsv`, `focus.tsv` | copies of the inputs |
//! | `model.ckpt` | parameters of the best validation epoch |
//! | `cache.ckpt` | attention cache, for cached runs |
//! | `history.tsv` | `epoch, train_loss, val_loss, val_metric, seconds` |
//! | `metrics.tsv` | `metric, split, bucket, value, n` |
//! | `attention.tsv` | `user, item, layer, alphas`; header only for baselines |
//!
//! `corgi evaluate --run <dir>` recomputes `metrics.tsv` from those files
//! alone.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::cache::{cached_forward, EdgeCaCache};
use crate::config::{load_config, parse_bucket_edges, require_data, DataConfig, ExperimentConfig};
use crate::error::{Error, Result};
use crate::formats::{read_content_file, read_edge_file, write_content_file, write_edge_file};
use crate::graph::{attach_content, build_graph, split_edges, ContentGraph, ContentStore, DatasetSplit};
use crate::metrics::{attention_stats, degree_buckets, AttentionStats};
use crate::model::{attention_for_pairs, forward, AttentionRecord, LayerState, Mode, Model, ModelKind, Task};
use crate::numeric::{load_checkpoint, save_checkpoint, ParamStore};
use crate::synthetic::{generate, item_words_from_content, read_focus_file, write_focus_file};
use crate::training::{bucketed_report, evaluate, train, TrainOutcome};

/// Caps intra-run parallelism. Every computation currently runs on one
/// thread, so any positive value is accepted.
pub const THREADS_ENV: &str = "CORGI_THREADS";

/// Early-stopping patience written into generated benchmark configs. The
/// benchmark's validation loss sits on a plateau for tens of epochs before
/// the focus words are picked up, so the library default of 10 stops there.
pub const BENCHMARK_PATIENCE: usize = 100;

#[derive(Debug, Parser)]
#[command(name = "corgi", version, about = "Content-attentive GNN for bipartite edge-value prediction")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the focus-word benchmark.
    GenSynthetic(GenArgs),
    /// Train a model and write a run directory.
    Train(TrainArgs),
    /// Recompute metrics.tsv for a run directory.
    Evaluate(RunDirArgs),
    /// Write attention.tsv for a run directory.
    ExportAttention(RunDirArgs),
    /// Train with and without the attention cache and compare.
    BenchCache(TrainArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// Config whose `synthetic.*` keys set the benchmark size.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub users: Option<usize>,
    #[arg(long)]
    pub items: Option<usize>,
    #[arg(long)]
    pub edges: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// corgi, gcn-content-init, gcn-grape or gcn-label-edges.
    #[arg(long)]
    pub model: Option<String>,
    /// Training seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
    /// Enable the attention cache.
    #[arg(long, conflicts_with = "no_cache")]
    pub cache: bool,
    /// Disable the attention cache.
    #[arg(long)]
    pub no_cache: bool,
    /// Comma-separated degree cut points, e.g. `5,10,20`.
    #[arg(long)]
    pub bucket_edges: Option<String>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct RunDirArgs {
    /// A directory written by `corgi train`.
    #[arg(long)]
    pub run: PathBuf,
    /// Where to write the output; defaults to the run directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub bucket_edges: Option<String>,
}

/// A loaded dataset with its split and optional focus words.
pub struct Dataset {
    pub cg: ContentGraph,
    pub split: DatasetSplit,
    pub focus: Option<Vec<usize>>,
}

/// Reads the edge and content files named by `data` and splits the edges.
pub fn load_dataset(data: &DataConfig) -> Result<Dataset> {
    let raw = read_edge_file(&data.edges)?;
    let content = match &data.content {
        Some(p) => read_content_file(p)?,
        None => ContentStore::new(0, 1),
    };
    let mut triples = Vec::with_capacity(raw.len());
    let mut max_label = 0;
    for &(u, m, l) in &raw {
        let shifted = l - data.label_offset;
        let label = usize::try_from(shifted).map_err(|_| Error::LabelOutOfRange {
            label: l,
            label_count: data.label_count.unwrap_or(0),
        })?;
        max_label = max_label.max(label);
        triples.push((u, m, label));
    }
    let num_users = raw.iter().map(|r| r.0 + 1).max().unwrap_or(0);
    let num_items = raw
        .iter()
        .map(|r| r.1 + 1)
        .chain(content.iter().map(|(m, _)| m + 1))
        .max()
        .unwrap_or(0);
    let label_count = data.label_count.unwrap_or(max_label + 1);
    let graph = build_graph(&triples, num_users, num_items, label_count)?;
    let split = split_edges(&graph, data.split, data.split_seed)?;
    let focus = data.focus.as_deref().map(read_focus_file).transpose()?;
    Ok(Dataset {
        cg: attach_content(graph, content)?,
        split,
        focus,
    })
}

fn model_for(cfg: &ExperimentConfig, cg: &ContentGraph) -> Model {
    let mut mc = cfg.model.clone();
    mc.content_dim = cg.content.dim();
    Model::new(cfg.kind, mc)
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn check_threads() -> Result<()> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(()),
            _ => Err(Error::InvalidConfig(format!("{THREADS_ENV} = `{v}` must be a positive integer"))),
        },
        Err(_) => Ok(()),
    }
}

/// Layer whose attention is inspected: the last layer whose attention
/// shapes the readout, so `L − 1` for deeper models.
pub fn inspection_layer(layers: usize) -> usize {
    layers.saturating_sub(1).max(1)
}

/// The evaluation-mode state used for attention inspection. Cached runs read
/// earlier layers' attention vectors from (a copy of) their cache.
pub fn inspection_state(
    model: &Model,
    cg: &ContentGraph,
    params: &ParamStore,
    train_edges: &[usize],
    cache: Option<&EdgeCaCache>,
) -> Result<LayerState> {
    match cache {
        Some(c) => cached_forward(model, cg, params, &mut c.clone(), train_edges, Mode::Eval, 0),
        None => forward(model, cg, params, train_edges, Mode::Eval),
    }
}

/// Focus-word attention statistics over `targets`.
pub fn focus_attention_stats(
    model: &Model,
    cg: &ContentGraph,
    params: &ParamStore,
    split: &DatasetSplit,
    targets: &[usize],
    cache: Option<&EdgeCaCache>,
    focus: &[usize],
) -> Result<AttentionStats> {
    let state = inspection_state(model, cg, params, &split.train, cache)?;
    let pairs: Vec<(usize, usize)> = targets
        .iter()
        .map(|&id| (cg.graph.edge(id).user, cg.graph.edge(id).item))
        .collect();
    let records = attention_for_pairs(model, cg, params, &state, &pairs, inspection_layer(model.config.layers))?;
    let words = item_words_from_content(&cg.content, cg.graph.num_items());
    attention_stats(&records, focus, &words)
}

/// The `metrics.tsv` table for the validation and test splits.
#[allow(clippy::too_many_arguments)]
pub fn metrics_table(
    model: &Model,
    cg: &ContentGraph,
    params: &ParamStore,
    split: &DatasetSplit,
    task: Task,
    cache: Option<&EdgeCaCache>,
    bucket_edges: &[usize],
    focus: Option<&[usize]>,
) -> Result<String> {
    let buckets = degree_buckets(bucket_edges);
    let mut s = String::from("metric\tsplit\tbucket\tvalue\tn\n");
    for (name, targets) in [("val", &split.val), ("test", &split.test)] {
        if targets.is_empty() {
            continue;
        }
        let (_, predictions) = evaluate(model, cg, params, &split.train, targets, task, cache)?;
        let report = bucketed_report(cg, &split.train, targets, &predictions, task, &buckets)?;
        for b in &report.buckets {
            if let Some(m) = &b.metrics {
                for (metric, value) in m.entries() {
                    let _ = writeln!(s, "{metric}\t{name}\t{}\t{value}\t{}", b.bucket.label(), b.count);
                }
            }
        }
        if let (Some(focus), true) = (focus, model.kind.uses_content_attention()) {
            if let Ok(st) = focus_attention_stats(model, cg, params, split, targets, cache, focus) {
                for (metric, value, n) in [
                    ("attention_focus_mass", st.focus_mass, st.present_count),
                    ("attention_uniform_share", st.uniform_share, st.present_count),
                    ("attention_absent_entropy", st.absent_entropy, st.absent_count),
                ] {
                    let _ = writeln!(s, "{metric}\t{name}\tall\t{value}\t{n}");
                }
            }
        }
    }
    Ok(s)
}

/// One `user, item, layer, alphas` line per edge and layer, queried by the
/// user's embedding. Models without content attention get the header only.
pub fn attention_table(
    model: &Model,
    cg: &ContentGraph,
    params: &ParamStore,
    split: &DatasetSplit,
    cache: Option<&EdgeCaCache>,
) -> Result<String> {
    let mut s = String::from("user\titem\tlayer\talphas\n");
    if !model.kind.uses_content_attention() {
        return Ok(s);
    }
    let state = inspection_state(model, cg, params, &split.train, cache)?;
    let pairs: Vec<(usize, usize)> = cg.graph.edges().iter().map(|e| (e.user, e.item)).collect();
    for layer in 1..=model.config.layers {
        for AttentionRecord { user, item, alpha, .. } in attention_for_pairs(model, cg, params, &state, &pairs, layer)? {
            let alphas: Vec<String> = alpha.iter().map(f64::to_string).collect();
            let _ = writeln!(s, "{user}\t{item}\t{layer}\t{}", alphas.join(" "));
        }
    }
    Ok(s)
}

fn apply_train_overrides(cfg: &mut ExperimentConfig, args: &TrainArgs) -> Result<()> {
    if let Some(m) = &args.model {
        cfg.kind = ModelKind::parse(m).ok_or_else(|| Error::InvalidConfig(format!("unknown model kind `{m}`")))?;
    }
    if let Some(s) = args.seed {
        cfg.train.seed = s;
    }
    if args.cache {
        cfg.train.caching = true;
    }
    if args.no_cache {
        cfg.train.caching = false;
    }
    if let Some(e) = args.max_epochs {
        cfg.train.max_epochs = e;
    }
    if let Some(b) = &args.bucket_edges {
        cfg.report.bucket_edges = parse_bucket_edges(b)
            .ok_or_else(|| Error::InvalidConfig(format!("--bucket-edges `{b}` is not a list of degrees")))?;
    }
    cfg.train.validate()
}

/// Copies the inputs into `out` and returns the config pointing at them.
fn localize_inputs(cfg: &ExperimentConfig, ds: &Dataset, out: &Path) -> Result<ExperimentConfig> {
    let data = require_data(cfg)?;
    write_edge_file(&out.join("edges.tsv"), &ds.cg.graph, data.label_offset)?;
    let content = data.content.as_ref().map(|_| {
        let p = out.join("content.tsv");
        write_content_file(&p, &ds.cg.content).map(|_| p)
    });
    let focus = ds.focus.as_ref().map(|f| {
        let p = out.join("focus.tsv");
        write_focus_file(&p, f).map(|_| p)
    });
    let mut local = cfg.clone();
    local.data = Some(DataConfig {
        edges: out.join("edges.tsv"),
        content: content.transpose()?,
        focus: focus.transpose()?,
        label_count: Some(ds.cg.graph.label_count()),
        ..data.clone()
    });
    Ok(local)
}

fn relative_to(dir: &Path) -> impl Fn(&Path) -> String + '_ {
    move |p: &Path| {
        p.strip_prefix(dir)
            .unwrap_or(p)
            .display()
            .to_string()
    }
}

/// Trains per `cfg` and writes the run directory `out`.
pub fn train_run(cfg: &ExperimentConfig, out: &Path) -> Result<TrainOutcome> {
    let ds = load_dataset(require_data(cfg)?)?;
    create_dir(out)?;
    let local = localize_inputs(cfg, &ds, out)?;
    write_file(&out.join("config.txt"), &local.to_text(relative_to(out)))?;
    let model = model_for(cfg, &ds.cg);
    let outcome = train(&model, &ds.cg, &cfg.train, &ds.split)?;
    save_checkpoint(&out.join("model.ckpt"), &outcome.params)?;
    if let Some(c) = &outcome.cache {
        c.save(&out.join("cache.ckpt"))?;
    }
    outcome.history.write(&out.join("history.tsv"))?;
    let table = metrics_table(
        &model,
        &ds.cg,
        &outcome.params,
        &ds.split,
        outcome.task,
        outcome.cache.as_ref(),
        &cfg.report.bucket_edges,
        ds.focus.as_deref(),
    )?;
    write_file(&out.join("metrics.tsv"), &table)?;
    let att = attention_table(&model, &ds.cg, &outcome.params, &ds.split, outcome.cache.as_ref())?;
    write_file(&out.join("attention.tsv"), &att)?;
    Ok(outcome)
}

/// A trained run read back from its directory.
pub struct LoadedRun {
    pub cfg: ExperimentConfig,
    pub ds: Dataset,
    pub model: Model,
    pub params: ParamStore,
    pub cache: Option<EdgeCaCache>,
    pub task: Task,
}

pub fn load_run(dir: &Path) -> Result<LoadedRun> {
    let cfg = load_config(&dir.join("config.txt"))?;
    let ds = load_dataset(require_data(&cfg)?)?;
    let model = model_for(&cfg, &ds.cg);
    let g = &ds.cg.graph;
    let template = model.init_params(g.num_users(), g.num_items(), g.label_count(), cfg.train.seed)?;
    let params = load_checkpoint(&dir.join("model.ckpt"), &template)?;
    let cache = if cfg.train.caching {
        Some(EdgeCaCache::load(&dir.join("cache.ckpt"), g.num_edges(), model.config.edge_dim)?)
    } else {
        None
    };
    let task = cfg.train.task.unwrap_or_else(|| Task::for_label_count(g.label_count()));
    Ok(LoadedRun {
        cfg,
        ds,
        model,
        params,
        cache,
        task,
    })
}

fn run_evaluate(args: &RunDirArgs) -> Result<()> {
    let run = load_run(&args.run)?;
    let cuts = match &args.bucket_edges {
        Some(b) => parse_bucket_edges(b)
            .ok_or_else(|| Error::InvalidConfig(format!("--bucket-edges `{b}` is not a list of degrees")))?,
        None => run.cfg.report.bucket_edges.clone(),
    };
    let table = metrics_table(
        &run.model,
        &run.ds.cg,
        &run.params,
        &run.ds.split,
        run.task,
        run.cache.as_ref(),
        &cuts,
        run.ds.focus.as_deref(),
    )?;
    let out = args.out.clone().unwrap_or_else(|| args.run.clone());
    create_dir(&out)?;
    write_file(&out.join("metrics.tsv"), &table)?;
    print!("{table}");
    Ok(())
}

fn run_export(args: &RunDirArgs) -> Result<()> {
    let run = load_run(&args.run)?;
    let table = attention_table(&run.model, &run.ds.cg, &run.params, &run.ds.split, run.cache.as_ref())?;
    let out = args.out.clone().unwrap_or_else(|| args.run.clone());
    create_dir(&out)?;
    write_file(&out.join("attention.tsv"), &table)
}

fn run_gen(args: &GenArgs) -> Result<()> {
    let mut cfg = match &args.config {
        Some(p) => load_config(p)?,
        None => {
            let mut c = ExperimentConfig::default();
            c.train.patience = BENCHMARK_PATIENCE;
            c
        }
    };
    let sy = &mut cfg.synthetic;
    if let Some(s) = args.seed {
        sy.seed = s;
    }
    if let Some(n) = args.users {
        sy.num_users = n;
    }
    if let Some(n) = args.items {
        sy.num_items = n;
    }
    if let Some(n) = args.edges {
        sy.num_edges = n;
    }
    let ds = generate(sy)?;
    create_dir(&args.out)?;
    write_edge_file(&args.out.join("edges.tsv"), &ds.graph, 0)?;
    write_content_file(&args.out.join("content.tsv"), &ds.content)?;
    write_focus_file(&args.out.join("focus.tsv"), &ds.focus)?;
    let base = cfg.data.clone();
    cfg.data = Some(DataConfig {
        edges: args.out.join("edges.tsv"),
        content: Some(args.out.join("content.tsv")),
        focus: Some(args.out.join("focus.tsv")),
        label_offset: 0,
        label_count: Some(2),
        split: base.as_ref().map_or((8, 1, 1), |d| d.split),
        split_seed: base.as_ref().map_or(0, |d| d.split_seed),
    });
    write_file(&args.out.join("config.txt"), &cfg.to_text(relative_to(&args.out)))
}

fn run_bench(args: &TrainArgs) -> Result<()> {
    let mut cfg = load_config(&args.config)?;
    apply_train_overrides(&mut cfg, args)?;
    create_dir(&args.out)?;
    let mut table = String::from("mode\tepochs\tseconds_per_epoch\ttest_metric\n");
    for (mode, caching) in [("cached", true), ("uncached", false)] {
        cfg.train.caching = caching;
        let dir = args.out.join(mode);
        let outcome = train_run(&cfg, &dir)?;
        let ds = load_dataset(require_data(&cfg)?)?;
        let model = model_for(&cfg, &ds.cg);
        let (bundle, _) = evaluate(
            &model,
            &ds.cg,
            &outcome.params,
            &ds.split.train,
            &ds.split.test,
            outcome.task,
            outcome.cache.as_ref(),
        )?;
        let h = &outcome.history.epochs;
        let secs = h.iter().map(|r| r.seconds).sum::<f64>() / h.len() as f64;
        let _ = writeln!(table, "{mode}\t{}\t{secs:.6}\t{}", h.len(), bundle.primary());
    }
    write_file(&args.out.join("bench.tsv"), &table)?;
    print!("{table}");
    Ok(())
}

/// Executes one parsed command line.
pub fn run(cli: &Cli) -> Result<()> {
    check_threads()?;
    match &cli.command {
        Command::GenSynthetic(a) => run_gen(a),
        Command::Train(a) => {
            let mut cfg = load_config(&a.config)?;
            apply_train_overrides(&mut cfg, a)?;
            train_run(&cfg, &a.out).map(|_| ())
        }
        Command::Evaluate(a) => run_evaluate(a),
        Command::ExportAttention(a) => run_export(a),
        Command::BenchCache(a) => run_bench(a),
    }
}

/// The one-line error report printed on failure.
pub fn error_line(e: &Error) -> String {
    format!("error\t{}\t{}", e.kind(), e.to_string().replace(['\n', '\t'], " "))
}

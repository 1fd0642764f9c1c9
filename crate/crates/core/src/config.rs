//! Experiment configuration files.
//!
//! A config is a flat list of `section.key = value` lines. Blank lines and
//! text after `#` are ignored, unknown keys are errors and every key has a
//! default except the dataset source. Relative paths resolve against the
//! directory of the config file.
//!
//! ```text
//! data.edges = edges.tsv
//! data.content = content.tsv
//! model.attention = dp
//! train.max_epochs = 200
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::model::{AttentionKind, Combination, DropoutConfig, ModelConfig, ModelKind, Task};
use crate::numeric::AdamConfig;
use crate::synthetic::SyntheticConfig;
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub edges: PathBuf,
    pub content: Option<PathBuf>,
    /// Per-user focus words, used only for attention statistics.
    pub focus: Option<PathBuf>,
    /// Subtracted from file labels so stored labels start at zero.
    pub label_offset: i64,
    /// Number of label values; inferred from the largest label when absent.
    pub label_count: Option<usize>,
    /// Train, validation and test proportions.
    pub split: (u32, u32, u32),
    pub split_seed: u64,
}

impl DataConfig {
    /// An edge file alone, with the default 8:1:1 split and labels as written.
    pub fn new(edges: PathBuf) -> Self {
        DataConfig {
            edges,
            content: None,
            focus: None,
            label_offset: 0,
            label_count: None,
            split: (8, 1, 1),
            split_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportConfig {
    /// Degree cut points for bucketed metrics.
    pub bucket_edges: Vec<usize>,
}

impl Default for ReportConfig {
    fn default() -> Self {
        ReportConfig { bucket_edges: vec![10] }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    /// Absent for configs that only drive `gen-synthetic`.
    pub data: Option<DataConfig>,
    pub synthetic: SyntheticConfig,
    pub kind: ModelKind,
    /// `content_dim` is taken from the content file at load time.
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub report: ReportConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            data: None,
            synthetic: SyntheticConfig::default(),
            kind: ModelKind::Corgi,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            report: ReportConfig::default(),
        }
    }
}

fn parse_bool(v: &str) -> Option<bool> {
    match v {
        "true" | "on" | "yes" | "1" => Some(true),
        "false" | "off" | "no" | "0" => Some(false),
        _ => None,
    }
}

fn parse_split(v: &str) -> Option<(u32, u32, u32)> {
    let parts: Vec<u32> = v.split(':').map(|p| p.trim().parse().ok()).collect::<Option<_>>()?;
    match parts[..] {
        [a, b, c] => Some((a, b, c)),
        _ => None,
    }
}

/// Parses a comma-separated list of degree cut points.
pub fn parse_bucket_edges(v: &str) -> Option<Vec<usize>> {
    if v.trim().is_empty() {
        return Some(Vec::new());
    }
    v.split(',').map(|p| p.trim().parse().ok()).collect()
}

fn attention_name(a: AttentionKind) -> &'static str {
    match a {
        AttentionKind::DotProduct => "dp",
        AttentionKind::Concat => "co",
    }
}

fn combination_name(c: Combination) -> &'static str {
    match c {
        Combination::Add => "add",
        Combination::Concat => "concat",
    }
}

/// Parses config text; `base` anchors relative paths.
pub fn parse_config(text: &str, file: &str, base: &Path) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::default();
    let mut edges = None;
    let mut content = None;
    let mut focus = None;
    let mut label_offset = 0i64;
    let mut label_count = None;
    let mut split = (8, 1, 1);
    let mut split_seed = 0u64;

    for (ln, raw) in text.lines().enumerate() {
        let line_no = ln + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            file: file.to_string(),
            line: line_no,
            message,
        };
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| parse_err(format!("expected `section.key = value`, found `{line}`")))?;
        let (key, value) = (key.trim(), value.trim());
        let bad = |what: &str| parse_err(format!("`{key}` expects {what}, found `{value}`"));
        let num = |what: &str| value.parse::<usize>().map_err(|_| bad(what));
        let real = || value.parse::<f64>().map_err(|_| bad("a number"));
        let flag = || parse_bool(value).ok_or_else(|| bad("true or false"));
        let path = || base.join(value);
        match key {
            "data.edges" => edges = Some(path()),
            "data.content" => content = Some(path()),
            "data.focus" => focus = Some(path()),
            "data.label_offset" => label_offset = value.parse().map_err(|_| bad("an integer"))?,
            "data.label_count" => label_count = Some(num("a positive integer")?),
            "data.split" => split = parse_split(value).ok_or_else(|| bad("`train:val:test`"))?,
            "data.split_seed" => split_seed = value.parse().map_err(|_| bad("an unsigned integer"))?,

            "synthetic.num_users" => cfg.synthetic.num_users = num("a count")?,
            "synthetic.num_items" => cfg.synthetic.num_items = num("a count")?,
            "synthetic.num_edges" => cfg.synthetic.num_edges = num("a count")?,
            "synthetic.vocab_size" => cfg.synthetic.vocab_size = num("a count")?,
            "synthetic.word_prob" => cfg.synthetic.word_prob = real()?,
            "synthetic.seed" => cfg.synthetic.seed = value.parse().map_err(|_| bad("an unsigned integer"))?,

            "model.kind" => cfg.kind = ModelKind::parse(value).ok_or_else(|| bad("a model kind"))?,
            "model.layers" => cfg.model.layers = num("a count")?,
            "model.node_dim" => cfg.model.node_dim = num("a count")?,
            "model.edge_dim" => cfg.model.edge_dim = num("a count")?,
            "model.readout_hidden" => cfg.model.readout_hidden = num("a count")?,
            "model.attention" => {
                cfg.model.attention = match value {
                    "dp" => AttentionKind::DotProduct,
                    "co" => AttentionKind::Concat,
                    _ => return Err(bad("`dp` or `co`")),
                }
            }
            "model.combination" => {
                cfg.model.combination = match value {
                    "add" => Combination::Add,
                    "concat" => Combination::Concat,
                    _ => return Err(bad("`add` or `concat`")),
                }
            }
            "model.aggregation" if value == "mean" => {}
            "model.aggregation" => return Err(bad("`mean`")),
            "model.bidirectional_ca" => cfg.model.bidirectional_ca = flag()?,
            "model.trainable_node_init" => cfg.model.trainable_node_init = flag()?,
            "model.split_value_projection" => cfg.model.split_value_projection = flag()?,

            "dropout.message" => cfg.model.dropout.message = real()?,
            "dropout.edge" => cfg.model.dropout.edge = real()?,
            "dropout.mlp" => cfg.model.dropout.mlp = real()?,

            "train.lr" => cfg.train.adam.lr = real()?,
            "train.beta1" => cfg.train.adam.beta1 = real()?,
            "train.beta2" => cfg.train.adam.beta2 = real()?,
            "train.eps" => cfg.train.adam.eps = real()?,
            "train.max_epochs" => cfg.train.max_epochs = num("a count")?,
            "train.patience" => cfg.train.patience = num("a count")?,
            "train.seed" => cfg.train.seed = value.parse().map_err(|_| bad("an unsigned integer"))?,
            "train.task" => {
                cfg.train.task = match value {
                    "auto" => None,
                    "binary" => Some(Task::Binary),
                    "ordinal" => Some(Task::Ordinal),
                    _ => return Err(bad("`auto`, `binary` or `ordinal`")),
                }
            }
            "train.caching" => cfg.train.caching = flag()?,
            "train.sampling" => {
                cfg.train.sampling = match value {
                    "none" => None,
                    _ => Some(num("`none` or an item count")?),
                }
            }

            "report.bucket_edges" => {
                cfg.report.bucket_edges = parse_bucket_edges(value).ok_or_else(|| bad("comma-separated degrees"))?
            }
            _ => {
                return Err(Error::UnknownKey {
                    file: file.to_string(),
                    line: line_no,
                    key: key.to_string(),
                })
            }
        }
    }

    if edges.is_none() && (content.is_some() || focus.is_some()) {
        return Err(Error::MissingRequired("data.edges".into()));
    }
    cfg.data = edges.map(|edges| DataConfig {
        edges,
        content,
        focus,
        label_offset,
        label_count,
        split,
        split_seed,
    });
    cfg.model.validate()?;
    cfg.train.validate()?;
    Ok(cfg)
}

/// Reads a config and checks that the files it names exist.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new(""));
    let cfg = parse_config(&text, &path.display().to_string(), base)?;
    if let Some(d) = &cfg.data {
        for p in [Some(&d.edges), d.content.as_ref(), d.focus.as_ref()].into_iter().flatten() {
            if !p.exists() {
                return Err(Error::io(p, std::io::Error::from(std::io::ErrorKind::NotFound)));
            }
        }
    }
    Ok(cfg)
}

/// Config that requires a dataset.
pub fn require_data(cfg: &ExperimentConfig) -> Result<&DataConfig> {
    cfg.data.as_ref().ok_or_else(|| Error::MissingRequired("data.edges".into()))
}

impl ExperimentConfig {
    /// Every setting, one `key = value` line each, in a form
    /// [`parse_config`] reads back to an equal config. Data paths are written
    /// as given by `paths`, which maps each stored path to its text.
    pub fn to_text(&self, paths: impl Fn(&Path) -> String) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        if let Some(d) = &self.data {
            kv("data.edges", paths(&d.edges));
            if let Some(c) = &d.content {
                kv("data.content", paths(c));
            }
            if let Some(f) = &d.focus {
                kv("data.focus", paths(f));
            }
            kv("data.label_offset", d.label_offset.to_string());
            if let Some(n) = d.label_count {
                kv("data.label_count", n.to_string());
            }
            kv("data.split", format!("{}:{}:{}", d.split.0, d.split.1, d.split.2));
            kv("data.split_seed", d.split_seed.to_string());
        }
        let sy = &self.synthetic;
        kv("synthetic.num_users", sy.num_users.to_string());
        kv("synthetic.num_items", sy.num_items.to_string());
        kv("synthetic.num_edges", sy.num_edges.to_string());
        kv("synthetic.vocab_size", sy.vocab_size.to_string());
        kv("synthetic.word_prob", sy.word_prob.to_string());
        kv("synthetic.seed", sy.seed.to_string());
        let m = &self.model;
        kv("model.kind", self.kind.name().into());
        kv("model.layers", m.layers.to_string());
        kv("model.node_dim", m.node_dim.to_string());
        kv("model.edge_dim", m.edge_dim.to_string());
        kv("model.readout_hidden", m.readout_hidden.to_string());
        kv("model.attention", attention_name(m.attention).into());
        kv("model.combination", combination_name(m.combination).into());
        kv("model.aggregation", "mean".into());
        kv("model.bidirectional_ca", m.bidirectional_ca.to_string());
        kv("model.trainable_node_init", m.trainable_node_init.to_string());
        kv("model.split_value_projection", m.split_value_projection.to_string());
        let DropoutConfig { message, edge, mlp } = m.dropout;
        kv("dropout.message", message.to_string());
        kv("dropout.edge", edge.to_string());
        kv("dropout.mlp", mlp.to_string());
        let t = &self.train;
        let AdamConfig { lr, beta1, beta2, eps } = t.adam;
        kv("train.lr", lr.to_string());
        kv("train.beta1", beta1.to_string());
        kv("train.beta2", beta2.to_string());
        kv("train.eps", eps.to_string());
        kv("train.max_epochs", t.max_epochs.to_string());
        kv("train.patience", t.patience.to_string());
        kv("train.seed", t.seed.to_string());
        kv(
            "train.task",
            match t.task {
                None => "auto",
                Some(Task::Binary) => "binary",
                Some(Task::Ordinal) => "ordinal",
            }
            .into(),
        );
        kv("train.caching", t.caching.to_string());
        kv("train.sampling", t.sampling.map_or("none".into(), |n| n.to_string()));
        let cuts: Vec<String> = self.report.bucket_edges.iter().map(usize::to_string).collect();
        kv("report.bucket_edges", cuts.join(","));
        s
    }
}

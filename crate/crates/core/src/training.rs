//! Optimisation loop, losses, early stopping and evaluation.
//!
//! Each epoch redraws edge dropout, takes an Adam step on the training loss
//! and scores the validation edges in evaluation mode with every training
//! edge visible. Only training labels enter the forward pass or the loss, so
//! validation and test labels cannot influence any update.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cache::{write_back, EdgeCaCache, SubgraphSample};
use crate::error::{Error, Result};
use crate::graph::{ContentGraph, DatasetSplit};
use crate::metrics::{degree_bucket_eval, DegreeBucket, DegreeBucketReport, MetricBundle};
use crate::model::forward::{step, CaSource};
use crate::model::{Mode, Model, Task};
use crate::numeric::{adam_step, AdamConfig, AdamState, ParamStore};

/// Dropout masks draw from this stream of the run's generator, keeping them
/// apart from every other seeded draw.
const DROPOUT_STREAM: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Bce,
    Mse,
}

impl LossKind {
    pub fn for_task(task: Task) -> LossKind {
        match task {
            Task::Binary => LossKind::Bce,
            Task::Ordinal => LossKind::Mse,
        }
    }
}

/// Mean BCE of probabilities, or mean squared error.
pub fn loss(predictions: &[f64], labels: &[f64], kind: LossKind) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::shape("loss", (labels.len(), 1), (predictions.len(), 1)));
    }
    if predictions.is_empty() {
        return Err(Error::EmptyInput);
    }
    let n = predictions.len() as f64;
    match kind {
        LossKind::Bce => {
            let mut total = 0.0;
            for (&p, &y) in predictions.iter().zip(labels) {
                if !(p > 0.0 && p < 1.0) {
                    return Err(Error::DomainError(format!("BCE prediction {p} is outside (0, 1)")));
                }
                total -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
            }
            Ok(total / n)
        }
        LossKind::Mse => Ok(predictions.iter().zip(labels).map(|(p, y)| (p - y) * (p - y)).sum::<f64>() / n),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub max_epochs: usize,
    /// Epochs without a validation-loss improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    /// Overrides the task implied by the label count.
    pub task: Option<Task>,
    /// Read earlier layers' attention vectors from an edge cache.
    pub caching: bool,
    /// Train on item-sampled subgraphs of this many items (at most all of
    /// them), one Adam step per subgraph.
    pub sampling: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            adam: AdamConfig::default(),
            max_epochs: 500,
            patience: 10,
            seed: 0,
            task: None,
            caching: false,
            sampling: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.adam.lr >= 0.0 && self.adam.lr.is_finite()) {
            return Err(Error::InvalidConfig(format!("train.lr = {} must be finite and non-negative", self.adam.lr)));
        }
        if self.patience == 0 {
            return Err(Error::InvalidConfig("train.patience must be at least 1".into()));
        }
        if self.max_epochs == 0 {
            return Err(Error::InvalidConfig("train.max_epochs must be at least 1".into()));
        }
        if self.sampling == Some(0) {
            return Err(Error::InvalidConfig("train.sampling must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Validation accuracy or RMSE.
    pub val_metric: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were returned.
    pub best_epoch: usize,
    /// Last executed epoch.
    pub stopping_epoch: usize,
}

impl TrainHistory {
    pub const HEADER: &'static str = "epoch\ttrain_loss\tval_loss\tval_metric\tseconds";

    pub fn to_tsv(&self) -> String {
        let mut s = format!("{}\n", Self::HEADER);
        for r in &self.epochs {
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{}\t{:.6}",
                r.epoch, r.train_loss, r.val_loss, r.val_metric, r.seconds
            );
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }
}

/// Everything a training run produces.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the best validation epoch.
    pub params: ParamStore,
    /// Parameters after the last executed epoch.
    pub last_params: ParamStore,
    /// The attention cache as it stood at the best epoch, when caching.
    pub cache: Option<EdgeCaCache>,
    pub history: TrainHistory,
    pub task: Task,
}

fn check_split(cg: &ContentGraph, split: &DatasetSplit) -> Result<()> {
    let n = cg.graph.num_edges();
    let mut seen = vec![false; n];
    for &id in split.train.iter().chain(&split.val).chain(&split.test) {
        if id >= n {
            return Err(Error::IndexOutOfRange {
                what: "split edge",
                index: id,
                bound: n,
            });
        }
        if std::mem::replace(&mut seen[id], true) {
            return Err(Error::InvalidConfig(format!("edge {id} appears twice in the split")));
        }
    }
    if split.train.is_empty() || split.val.is_empty() {
        return Err(Error::InvalidConfig("train and validation splits must be non-empty".into()));
    }
    Ok(())
}

fn labels_of(cg: &ContentGraph, edges: &[usize]) -> Vec<f64> {
    edges.iter().map(|&id| cg.graph.edge(id).label as f64).collect()
}

/// Keeps each edge with probability `1 - rate`.
fn drop_edges(edges: &[usize], rate: f64, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if rate == 0.0 {
        return edges.to_vec();
    }
    edges.iter().copied().filter(|_| rng.random::<f64>() >= rate).collect()
}

/// Trains `model` on `split.train` and selects the epoch with the lowest
/// validation loss.
pub fn train(model: &Model, cg: &ContentGraph, cfg: &TrainConfig, split: &DatasetSplit) -> Result<TrainOutcome> {
    cfg.validate()?;
    model.config.validate()?;
    check_split(cg, split)?;
    let g = &cg.graph;
    let task = cfg.task.unwrap_or_else(|| Task::for_label_count(g.label_count()));
    let mut params = model.init_params(g.num_users(), g.num_items(), g.label_count(), cfg.seed)?;
    let mut adam = AdamState::new(&params, cfg.adam);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(DROPOUT_STREAM);
    let mut cache = cfg
        .caching
        .then(|| EdgeCaCache::new(g.num_edges(), model.config.edge_dim));
    let mut is_train = vec![false; g.num_edges()];
    split.train.iter().for_each(|&id| is_train[id] = true);
    let val_labels = labels_of(cg, &split.val);

    let mut history = TrainHistory::default();
    let mut best = (f64::INFINITY, params.clone(), cache.clone());
    let mut since_best = 0;
    let mut stamp = 0u64;
    for epoch in 1..=cfg.max_epochs {
        let start = Instant::now();
        let batches: Vec<Vec<usize>> = match cfg.sampling {
            None => vec![split.train.clone()],
            Some(size) => {
                let size = size.min(g.num_items()).max(1);
                let mut items: Vec<usize> = (0..g.num_items()).collect();
                items.shuffle(&mut rng);
                items
                    .chunks(size)
                    .map(|chunk| {
                        let sample = SubgraphSample::from_items(g, chunk.to_vec())?;
                        Ok(sample.edges.into_iter().filter(|&id| is_train[id]).collect())
                    })
                    .collect::<Result<_>>()?
            }
        };
        let (mut loss_sum, mut loss_n) = (0.0, 0usize);
        for targets in batches.iter().filter(|b| !b.is_empty()) {
            let visible = drop_edges(targets, model.config.dropout.edge, &mut rng);
            let ca = cache.as_ref().map_or(CaSource::Fresh, CaSource::Cached);
            let out = step(model, cg, &params, &visible, targets, task, Mode::Train(&mut rng), ca, true)?;
            loss_sum += out.loss * targets.len() as f64;
            loss_n += targets.len();
            adam_step(&mut params, &out.grads.expect("gradients requested"), &mut adam)?;
            if let (Some(c), Some(ca)) = (cache.as_mut(), &out.final_ca) {
                stamp += 1;
                write_back(c, &visible, ca, model.config.bidirectional_ca, stamp)?;
            }
        }
        let ca = cache.as_ref().map_or(CaSource::Fresh, CaSource::Cached);
        let val = step(model, cg, &params, &split.train, &split.val, task, Mode::Eval, ca, false)?;
        let val_metric = MetricBundle::compute(task, &val.predictions, &val_labels)?.primary();
        history.epochs.push(EpochRecord {
            epoch,
            train_loss: loss_sum / loss_n.max(1) as f64,
            val_loss: val.loss,
            val_metric,
            seconds: start.elapsed().as_secs_f64(),
        });
        history.stopping_epoch = epoch;
        if val.loss < best.0 {
            best = (val.loss, params.clone(), cache.clone());
            history.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    if history.best_epoch == 0 {
        // Every validation loss was NaN; fall back to the final parameters.
        best = (f64::NAN, params.clone(), cache.clone());
        history.best_epoch = history.stopping_epoch;
    }
    Ok(TrainOutcome {
        params: best.1,
        last_params: params,
        cache: best.2,
        history,
        task,
    })
}

/// Predictions and metrics for `targets`, with the training edges passing
/// messages.
pub fn evaluate(
    model: &Model,
    cg: &ContentGraph,
    params: &ParamStore,
    train_edges: &[usize],
    targets: &[usize],
    task: Task,
    cache: Option<&EdgeCaCache>,
) -> Result<(MetricBundle, Vec<f64>)> {
    let ca = cache.map_or(CaSource::Fresh, CaSource::Cached);
    let out = step(model, cg, params, train_edges, targets, task, Mode::Eval, ca, false)?;
    let bundle = MetricBundle::compute(task, &out.predictions, &labels_of(cg, targets))?;
    Ok((bundle, out.predictions))
}

/// Degree of every user counted over `train_edges`.
pub fn train_degrees(cg: &ContentGraph, train_edges: &[usize]) -> Vec<usize> {
    let mut deg = vec![0; cg.graph.num_users()];
    for &id in train_edges {
        deg[cg.graph.edge(id).user] += 1;
    }
    deg
}

/// Metrics of `predictions` for `targets`, bucketed by each user's degree in
/// the training graph.
pub fn bucketed_report(
    cg: &ContentGraph,
    train_edges: &[usize],
    targets: &[usize],
    predictions: &[f64],
    task: Task,
    buckets: &[DegreeBucket],
) -> Result<DegreeBucketReport> {
    let deg = train_degrees(cg, train_edges);
    let user_deg: Vec<usize> = targets
        .iter()
        .map(|&id| deg[cg.graph.edge(id).user])
        .collect();
    degree_bucket_eval(task, predictions, &labels_of(cg, targets), &user_deg, buckets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{attach_content, build_graph, split_edges, ContentStore};
    use crate::model::{DropoutConfig, ModelConfig, ModelKind};

    #[test]
    fn loss_trivial_cases() {
        assert!((loss(&[0.5], &[1.0], LossKind::Bce).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(loss(&[0.3, 2.0], &[0.3, 2.0], LossKind::Mse).unwrap(), 0.0);
        assert!(matches!(loss(&[1.0], &[1.0], LossKind::Bce), Err(Error::DomainError(_))));
        assert!(matches!(loss(&[0.2], &[1.0, 0.0], LossKind::Mse), Err(Error::ShapeMismatch { .. })));
    }

    fn toy() -> (Model, ContentGraph, DatasetSplit) {
        let triples: Vec<(usize, usize, usize)> = (0..6)
            .flat_map(|u| (0..5).filter(move |m| (u + m) % 2 == 0).map(move |m| (u, m, (u * m) % 2)))
            .collect();
        let g = build_graph(&triples, 6, 5, 2).unwrap();
        let mut content = ContentStore::new(3, 4);
        content.insert(0, crate::numeric::Tensor::identity(3)).unwrap();
        let cg = attach_content(g, content).unwrap();
        let split = split_edges(&cg.graph, (8, 1, 1), 3).unwrap();
        let cfg = ModelConfig {
            layers: 2,
            node_dim: 4,
            edge_dim: 4,
            content_dim: 3,
            readout_hidden: 8,
            ..ModelConfig::default()
        };
        (Model::new(ModelKind::Corgi, cfg), cg, split)
    }

    #[test]
    fn zero_learning_rate_keeps_eval_loss_constant() {
        let (mut model, cg, split) = toy();
        model.config.dropout = DropoutConfig::NONE;
        let cfg = TrainConfig {
            adam: AdamConfig { lr: 0.0, ..AdamConfig::default() },
            max_epochs: 4,
            patience: 10,
            ..TrainConfig::default()
        };
        let out = train(&model, &cg, &cfg, &split).unwrap();
        let first = &out.history.epochs[0];
        for r in &out.history.epochs {
            assert_eq!(r.val_loss.to_bits(), first.val_loss.to_bits());
            assert_eq!(r.train_loss.to_bits(), first.train_loss.to_bits());
        }
        assert!(out.params.bit_eq(&out.last_params));
    }

    #[test]
    fn early_stopping_returns_best_epoch() {
        let (model, cg, split) = toy();
        let cfg = TrainConfig {
            adam: AdamConfig { lr: 0.05, ..AdamConfig::default() },
            max_epochs: 60,
            patience: 3,
            ..TrainConfig::default()
        };
        let out = train(&model, &cg, &cfg, &split).unwrap();
        let h = &out.history;
        let min = h.epochs.iter().map(|r| r.val_loss).fold(f64::INFINITY, f64::min);
        assert_eq!(h.epochs[h.best_epoch - 1].val_loss, min);
        assert!(h.epochs.len() <= 60);
        assert!(h.stopping_epoch <= h.best_epoch + cfg.patience);
        let val = step(&model, &cg, &out.params, &split.train, &split.val, out.task, Mode::Eval, CaSource::Fresh, false)
            .unwrap();
        assert_eq!(val.loss, min);
    }

    #[test]
    fn history_tsv_layout() {
        let h = TrainHistory {
            epochs: vec![EpochRecord {
                epoch: 1,
                train_loss: 0.5,
                val_loss: 0.25,
                val_metric: 1.0,
                seconds: 0.125,
            }],
            best_epoch: 1,
            stopping_epoch: 1,
        };
        assert_eq!(h.to_tsv(), "epoch\ttrain_loss\tval_loss\tval_metric\tseconds\n1\t0.5\t0.25\t1\t0.125000\n");
    }

    #[test]
    fn invalid_train_configs() {
        let bad = TrainConfig { patience: 0, ..TrainConfig::default() };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            adam: AdamConfig { lr: -1.0, ..AdamConfig::default() },
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}

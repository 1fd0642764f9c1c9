//! Fixtures shared by the integration test targets.

#![allow(dead_code)]

use corgi::graph::{attach_content, build_graph, ContentGraph, ContentStore};
use corgi::model::{
    loss_and_grad, AttentionKind, Combination, DropoutConfig, Mode, Model, ModelConfig, ModelKind, Task,
};
use corgi::numeric::{finite_difference_grad, GradCheckReport, ParamStore, Tensor};

/// Three users, three items, five edges; item 2 has no content.
pub fn tiny_graph(content_dim: usize) -> ContentGraph {
    let g = build_graph(&[(0, 0, 1), (0, 1, 0), (1, 1, 1), (2, 0, 0), (2, 2, 1)], 3, 3, 2).unwrap();
    let mut content = ContentStore::new(content_dim, 8);
    let row = |k: usize| -> Vec<f64> { (0..content_dim).map(|c| ((k * 7 + c * 3) % 11) as f64 / 11.0 - 0.4).collect() };
    content.insert(0, Tensor::from_rows(&[row(0), row(1)]).unwrap()).unwrap();
    content.insert(1, Tensor::from_rows(&[row(2), row(3), row(4)]).unwrap()).unwrap();
    attach_content(g, content).unwrap()
}

pub fn tiny_config(attention: AttentionKind, combination: Combination) -> ModelConfig {
    ModelConfig {
        layers: 2,
        node_dim: 8,
        edge_dim: 8,
        content_dim: 4,
        readout_hidden: 6,
        attention,
        combination,
        dropout: DropoutConfig::NONE,
        trainable_node_init: true,
        ..ModelConfig::default()
    }
}

/// Worst relative error between analytic and central-difference gradients
/// over every parameter, with the per-parameter report.
pub fn gradient_check(attention: AttentionKind, combination: Combination, seed: u64) -> GradCheckReport {
    let cg = tiny_graph(4);
    let model = Model::new(ModelKind::Corgi, tiny_config(attention, combination));
    let params = model.init_params(3, 3, 2, seed).unwrap();
    let all: Vec<usize> = (0..5).collect();
    let (_, analytic) = loss_and_grad(&model, &cg, &params, &all, &all, Task::Binary, Mode::Eval).unwrap();
    let numeric = finite_difference_grad(
        |p: &ParamStore| Ok(loss_and_grad(&model, &cg, p, &all, &all, Task::Binary, Mode::Eval)?.0),
        &params,
        1e-6,
    )
    .unwrap();
    GradCheckReport::compare(&analytic, &numeric)
}

pub const ATTENTION_KINDS: [AttentionKind; 2] = [AttentionKind::DotProduct, AttentionKind::Concat];
pub const COMBINATIONS: [Combination; 2] = [Combination::Add, Combination::Concat];

/// O(n²) AUROC: the share of (positive, negative) pairs ranked correctly,
/// ties counted one half.
pub fn brute_auroc(scores: &[f64], labels: &[f64]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if labels[i] >= 0.5 && labels[j] < 0.5 {
                den += 1.0;
                if scores[i] > scores[j] {
                    num += 1.0;
                } else if scores[i] == scores[j] {
                    num += 0.5;
                }
            }
        }
    }
    num / den
}

/// Step-sum average precision over distinct thresholds: at each distinct
/// score, precision of everything scored at least that high times the recall
/// gained there.
pub fn brute_aupr(scores: &[f64], labels: &[f64]) -> f64 {
    let pos = labels.iter().filter(|&&y| y >= 0.5).count() as f64;
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let mut area = 0.0;
    let mut prev_recall = 0.0;
    for t in thresholds {
        let selected: Vec<usize> = (0..scores.len()).filter(|&i| scores[i] >= t).collect();
        let tp = selected.iter().filter(|&&i| labels[i] >= 0.5).count() as f64;
        let recall = tp / pos;
        area += (tp / selected.len() as f64) * (recall - prev_recall);
        prev_recall = recall;
    }
    area
}

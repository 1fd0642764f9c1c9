mod common;

use common::{tiny_config, tiny_graph, ATTENTION_KINDS, COMBINATIONS};
use corgi::cache::{cached_forward, EdgeCaCache};
use corgi::graph::{attach_content, ContentGraph, ContentStore};
use corgi::model::layers::{
    compute_message, content_attention_edge, readout, update_edge, update_node, AttentionWeights, ReadoutWeights,
};
use corgi::model::{forward, layer_param, predict, Mode, Model, ModelConfig, ModelKind, Task};
use corgi::numeric::{softmax, ParamStore};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Per-edge reference: every message, node, attention and edge vector is
/// computed one at a time from the single-vector layer functions.
struct Reference {
    h: Vec<Vec<Vec<f64>>>,
    predictions: Vec<f64>,
}

fn reference(model: &Model, cg: &ContentGraph, ps: &ParamStore, visible: &[usize]) -> Reference {
    let cfg = &model.config;
    let g = &cg.graph;
    let nu = g.num_users();
    let init = ps.get("node_init").unwrap();
    let mut h: Vec<Vec<Vec<f64>>> = vec![(0..g.num_nodes()).map(|r| init.row(r).to_vec()).collect()];
    let label_emb = ps.get("label_embedding").unwrap();
    // e[edge] = (item→user vector, user→item vector)
    let mut e: Vec<(Vec<f64>, Vec<f64>)> = (0..g.num_edges())
        .map(|id| {
            let row = label_emb.row(g.edge(id).label).to_vec();
            (row.clone(), row)
        })
        .collect();
    for l in 1..=cfg.layers {
        let p = ps.get(&layer_param(l, "P")).unwrap();
        let q = ps.get(&layer_param(l, "Q")).unwrap();
        let mut inbox: Vec<Vec<Vec<f64>>> = vec![Vec::new(); g.num_nodes()];
        for &id in visible {
            let edge = g.edge(id);
            let (u, m) = (edge.user, nu + edge.item);
            inbox[u].push(compute_message(&h[l - 1][m], &e[id].0, p).unwrap());
            inbox[m].push(compute_message(&h[l - 1][u], &e[id].1, p).unwrap());
        }
        let next: Vec<Vec<f64>> = (0..g.num_nodes())
            .map(|n| update_node(&h[l - 1][n], &inbox[n], q).unwrap())
            .collect();
        let w = ps.get(&layer_param(l, "W")).unwrap();
        let weights = AttentionWeights {
            w_u: ps.get(&layer_param(l, "W_U")).unwrap(),
            w_m: ps.get(&layer_param(l, "W_M")).unwrap(),
            p: ps.get(&layer_param(l, "p")),
            w_v: ps.get(&layer_param(l, "W_V")),
        };
        for &id in visible {
            let edge = g.edge(id);
            let (u, m) = (edge.user, nu + edge.item);
            let e0 = label_emb.row(edge.label);
            let (ca, _) =
                content_attention_edge(&h[l - 1][u], cg.content.get(edge.item), &weights, cfg.attention).unwrap();
            let back = if cfg.bidirectional_ca { ca.clone() } else { vec![0.0; ca.len()] };
            e[id] = (
                update_edge(&next[m], e0, &ca, w, cfg.combination).unwrap(),
                update_edge(&next[u], e0, &back, w, cfg.combination).unwrap(),
            );
        }
        h.push(next);
    }
    let rw = ReadoutWeights {
        hidden_w: ps.get("readout.hidden_w").unwrap(),
        hidden_b: ps.get("readout.hidden_b").unwrap(),
        w_out: ps.get("readout.w_out").unwrap(),
        b: ps.get("readout.b").unwrap().data()[0],
    };
    let last = &h[cfg.layers];
    let predictions = visible
        .iter()
        .map(|&id| {
            let edge = g.edge(id);
            readout(&last[edge.user], &last[nu + edge.item], &rw, Task::Binary).unwrap()
        })
        .collect();
    Reference { h, predictions }
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

#[test]
fn batched_pass_matches_per_edge_reference() {
    let cg = tiny_graph(4);
    for attention in ATTENTION_KINDS {
        for combination in COMBINATIONS {
            for bidirectional_ca in [true, false] {
                let cfg = ModelConfig {
                    layers: 3,
                    bidirectional_ca,
                    ..tiny_config(attention, combination)
                };
                let model = Model::new(ModelKind::Corgi, cfg);
                let ps = model.init_params(3, 3, 2, 4).unwrap();
                let visible = [0, 2, 3, 4];
                let want = reference(&model, &cg, &ps, &visible);
                let got = forward(&model, &cg, &ps, &visible, Mode::Eval).unwrap();
                for l in 0..=3 {
                    for n in 0..6 {
                        assert!(
                            close(got.h[l].row(n), &want.h[l][n], 1e-12),
                            "{attention:?} {combination:?} bidirectional={bidirectional_ca} layer {l} node {n}"
                        );
                    }
                }
                let preds = predict(&model, &cg, &ps, &visible, &visible, None).unwrap();
                assert!(close(&preds, &want.predictions, 1e-12));
            }
        }
    }
}

#[test]
fn attention_rows_sum_to_one() {
    let cg = tiny_graph(4);
    for attention in ATTENTION_KINDS {
        let model = Model::new(ModelKind::Corgi, tiny_config(attention, COMBINATIONS[0]));
        let ps = model.init_params(3, 3, 2, 8).unwrap();
        let state = forward(&model, &cg, &ps, &[0, 1, 2, 3, 4], Mode::Eval).unwrap();
        for l in 1..=2 {
            let records = state.attention_records(&cg, l);
            assert_eq!(records.len(), 4);
            for r in records {
                assert_eq!(r.alpha.len(), cg.content.num_rows(r.item));
                assert!((r.alpha.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            }
        }
    }
}

proptest! {
    #[test]
    fn softmax_is_normalized(scores in proptest::collection::vec(-700.0f64..700.0, 1..64)) {
        let a = softmax(&scores).unwrap();
        prop_assert!((a.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        prop_assert!(a.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}

#[test]
fn aggregation_is_bit_invariant_under_shuffles() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let q = corgi::numeric::Tensor::glorot(5, 10, &mut rng);
    let h_prev = [0.3, -0.1, 0.7, 0.0, 1.2];
    let mut messages: Vec<Vec<f64>> = (0..17)
        .map(|i| (0..5).map(|c| ((i * 13 + c * 7) % 19) as f64 / 3.0 - 2.9).collect())
        .collect();
    let base = update_node(&h_prev, &messages, &q).unwrap();

    let cg = tiny_graph(4);
    let model = Model::new(ModelKind::Corgi, tiny_config(ATTENTION_KINDS[0], COMBINATIONS[1]));
    let ps = model.init_params(3, 3, 2, 2).unwrap();
    let mut visible: Vec<usize> = (0..5).collect();
    let batched = forward(&model, &cg, &ps, &visible, Mode::Eval).unwrap();

    for _ in 0..100 {
        messages.shuffle(&mut rng);
        assert_eq!(update_node(&h_prev, &messages, &q).unwrap(), base);
        visible.shuffle(&mut rng);
        let s = forward(&model, &cg, &ps, &visible, Mode::Eval).unwrap();
        assert_eq!(s.h, batched.h);
        assert_eq!(s.e, batched.e);
    }
}

fn without_content(cg: &ContentGraph) -> ContentGraph {
    attach_content(cg.graph.clone(), ContentStore::new(cg.content.dim(), 8)).unwrap()
}

#[test]
fn empty_content_without_bidirectional_reduces_to_grape() {
    let cg = without_content(&tiny_graph(4));
    for attention in ATTENTION_KINDS {
        let cfg = ModelConfig {
            layers: 3,
            bidirectional_ca: false,
            ..tiny_config(attention, COMBINATIONS[0])
        };
        let corgi = Model::new(ModelKind::Corgi, cfg.clone());
        let grape = Model::new(ModelKind::GcnGrape, cfg);
        let ps = corgi.init_params(3, 3, 2, 5).unwrap();
        let visible = [0, 1, 2, 3, 4];
        let a = forward(&corgi, &cg, &ps, &visible, Mode::Eval).unwrap();
        let b = corgi::baselines::gcn_grape_forward(&grape, &cg, &ps, &visible).unwrap();
        assert_eq!(a.h, b.h);
        assert_eq!(a.e, b.e);
        assert_eq!(
            predict(&corgi, &cg, &ps, &visible, &visible, None).unwrap(),
            predict(&grape, &cg, &ps, &visible, &visible, None).unwrap()
        );
    }
}

#[test]
fn first_cached_pass_equals_content_free_pass() {
    let cg = tiny_graph(4);
    let bare = without_content(&cg);
    for combination in COMBINATIONS {
        let cfg = ModelConfig {
            layers: 3,
            ..tiny_config(ATTENTION_KINDS[0], combination)
        };
        let model = Model::new(ModelKind::Corgi, cfg);
        let ps = model.init_params(3, 3, 2, 6).unwrap();
        let visible = [0, 1, 2, 3, 4];
        let mut cache = EdgeCaCache::new(5, 8);
        let cached = cached_forward(&model, &cg, &ps, &mut cache, &visible, Mode::Eval, 1).unwrap();
        let free = forward(&model, &bare, &ps, &visible, Mode::Eval).unwrap();
        assert_eq!(cached.h, free.h);
        assert_eq!(cached.e[..3], free.e[..3]);
        assert_eq!(
            predict(&model, &cg, &ps, &visible, &visible, Some(&EdgeCaCache::new(5, 8))).unwrap(),
            predict(&model, &bare, &ps, &visible, &visible, None).unwrap()
        );
        // The pass wrote layer-3 attention for every visible edge.
        assert_eq!(cache.written_at(1).len(), 10);
    }
}

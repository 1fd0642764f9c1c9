//! The batched message-passing forward pass, recorded on a [`Tape`].
//!
//! Directed edge rows are laid out in two blocks over the `k` visible edges:
//! rows `0..k` carry item→user messages and rows `k..2k` user→item messages.
//! Nodes are indexed users first, then items (`num_users + item`).
//!
//! Linear maps over concatenations are split by column window so each part is
//! computed once per node or once per label rather than once per edge:
//! `P·[h_j, e_ij] = P_h·h_j + P_e·e_ij` and `W·[h_j, e_ij^(0)] = W_h·h_j +
//! W_e·e^(0)[label]`.

use std::borrow::Cow;
use std::rc::Rc;

use rand_chacha::ChaCha8Rng;

use crate::cache::{Direction, EdgeCaCache};
use crate::error::{Error, Result};
use crate::graph::{ContentGraph, NodeId, Partition};
use crate::numeric::activation::{sigmoid, ATTENTION_SLOPE};
use crate::numeric::{AttentionPlan, Binding, ParamGrads, ParamStore, Segments, Tape, Tensor, Var};

use super::config::{layer_param, AttentionKind, Combination, Model, ModelKind, Task};
use super::layers::{content_attention_edge, AttentionWeights};

/// Training mode draws dropout masks from the given generator; evaluation is
/// deterministic.
pub enum Mode<'r> {
    Eval,
    Train(&'r mut ChaCha8Rng),
}

impl Mode<'_> {
    fn rng(&mut self) -> Option<&mut ChaCha8Rng> {
        match self {
            Mode::Eval => None,
            Mode::Train(r) => Some(&mut **r),
        }
    }
}

/// Attention weights recorded for one layer, one row per visible edge in the
/// item→user block.
#[derive(Debug, Clone)]
pub struct LayerAttention {
    pub plan: Rc<AttentionPlan>,
    pub alpha: Vec<f64>,
}

/// One attention distribution over an item's content rows, queried by a
/// user's embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRecord {
    /// The edge carrying the attention, absent for a queried non-edge pair.
    pub edge: Option<usize>,
    pub user: usize,
    pub item: usize,
    pub layer: usize,
    pub alpha: Vec<f64>,
}

/// Everything a forward pass computed.
#[derive(Debug, Clone)]
pub struct LayerState {
    num_users: usize,
    /// Visible edge ids, ascending; row `r` and row `k + r` of each edge
    /// matrix belong to `visible[r]`.
    pub visible: Vec<usize>,
    /// Node embeddings `h^(0..=L)`.
    pub h: Vec<Tensor>,
    /// Directed edge embeddings `e^(0..=L)`; `e[L]` is empty when the final
    /// edge update was skipped.
    pub e: Vec<Tensor>,
    /// Attention per layer, index `0` unused.
    pub attention: Vec<Option<LayerAttention>>,
    /// Freshly computed final-layer attention vectors (item→user block).
    pub final_ca: Option<Tensor>,
}

impl LayerState {
    pub fn node_row(&self, n: NodeId) -> usize {
        match n.partition {
            Partition::User => n.index,
            Partition::Item => self.num_users + n.index,
        }
    }

    /// Embedding of `n` after `layer` layers.
    pub fn node(&self, layer: usize, n: NodeId) -> &[f64] {
        self.h[layer].row(self.node_row(n))
    }

    /// Attention records of `layer` for every visible edge whose item has
    /// content.
    pub fn attention_records(&self, cg: &ContentGraph, layer: usize) -> Vec<AttentionRecord> {
        let Some(Some(att)) = self.attention.get(layer) else {
            return Vec::new();
        };
        (0..att.plan.len())
            .filter(|&r| !att.plan.alpha_span(r).is_empty())
            .map(|r| {
                let edge = self.visible[r];
                let e = cg.graph.edge(edge);
                AttentionRecord {
                    edge: Some(edge),
                    user: e.user,
                    item: e.item,
                    layer,
                    alpha: att.alpha[att.plan.alpha_span(r)].to_vec(),
                }
            })
            .collect()
    }
}

/// Where the content-attention vectors of layers `1..L` come from.
#[derive(Clone, Copy)]
pub(crate) enum CaSource<'c> {
    Fresh,
    Cached(&'c EdgeCaCache),
}

pub(crate) struct Pass {
    pub h: Vec<Var>,
    pub e: Vec<Option<Var>>,
    pub attention: Vec<Option<Var>>,
    pub final_ca: Option<Var>,
}

/// Index vectors shared by every layer of one pass.
struct Layout {
    src: Rc<[usize]>,
    labels2: Rc<[usize]>,
    seg: Rc<Segments>,
    plan: Rc<AttentionPlan>,
}

fn layout(cg: &ContentGraph, visible: &[usize]) -> Result<Layout> {
    let g = &cg.graph;
    let nu = g.num_users();
    let mut users = Vec::with_capacity(visible.len());
    let mut items = Vec::with_capacity(visible.len());
    let mut labels = Vec::with_capacity(visible.len());
    let mut ranges = Vec::with_capacity(visible.len());
    for &id in visible {
        if id >= g.num_edges() {
            return Err(Error::IndexOutOfRange {
                what: "edge",
                index: id,
                bound: g.num_edges(),
            });
        }
        let e = g.edge(id);
        users.push(e.user);
        items.push(nu + e.item);
        labels.push(e.label);
        ranges.push(cg.content_range(e.item));
    }
    let src: Vec<usize> = items.iter().chain(&users).copied().collect();
    let dst: Vec<usize> = users.iter().chain(&items).copied().collect();
    let labels2: Vec<usize> = labels.iter().chain(&labels).copied().collect();
    Ok(Layout {
        plan: Rc::new(AttentionPlan::new(users, ranges)?),
        src: src.into(),
        labels2: labels2.into(),
        seg: Rc::new(Segments::new(dst, g.num_nodes())?),
    })
}

fn initial_nodes(
    tape: &mut Tape,
    bind: &mut Binding,
    model: &Model,
    cg: &ContentGraph,
    params: &ParamStore,
) -> Result<Var> {
    let g = &cg.graph;
    let init = bind.var(tape, params, "node_init")?;
    if model.kind != ModelKind::GcnContentInit {
        let shape = tape.value(init).shape();
        if shape != (g.num_nodes(), model.config.node_dim) {
            return Err(Error::shape("node_init", (g.num_nodes(), model.config.node_dim), shape));
        }
        return Ok(init);
    }
    let d = params.require("content_init.weight")?.cols();
    let mut mean = Tensor::zeros(g.num_items(), d);
    for m in 0..g.num_items() {
        if let Some(z) = cg.content.get(m) {
            if z.cols() != d {
                return Err(Error::shape("content_init", (z.rows(), d), z.shape()));
            }
            let inv = 1.0 / z.rows() as f64;
            let row = mean.row_mut(m);
            for r in 0..z.rows() {
                for (o, v) in row.iter_mut().zip(z.row(r)) {
                    *o += v;
                }
            }
            row.iter_mut().for_each(|v| *v *= inv);
        }
    }
    let mean = tape.constant(mean);
    let w = bind.var(tape, params, "content_init.weight")?;
    let b = bind.var(tape, params, "content_init.bias")?;
    let items = tape.linear(mean, w, 0)?;
    let items = tape.add_bias(items, b)?;
    tape.concat_rows(init, items)
}

fn cached_block(cache: &EdgeCaCache, visible: &[usize], dir: Direction) -> Result<Tensor> {
    let mut t = Tensor::zeros(visible.len(), cache.dim());
    for (r, &id) in visible.iter().enumerate() {
        t.row_mut(r).copy_from_slice(cache.get(id, dir)?);
    }
    Ok(t)
}

/// `visible` in ascending order. Aggregation sums in row order, so sorting
/// makes every pass independent of the order edges were listed in.
pub(crate) fn canonical_visible(visible: &[usize]) -> Cow<'_, [usize]> {
    if visible.is_sorted() {
        Cow::Borrowed(visible)
    } else {
        let mut v = visible.to_vec();
        v.sort_unstable();
        Cow::Owned(v)
    }
}

/// Records the message-passing layers on `tape`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn run_layers(
    tape: &mut Tape,
    bind: &mut Binding,
    model: &Model,
    cg: &ContentGraph,
    params: &ParamStore,
    visible: &[usize],
    mode: &mut Mode,
    ca: CaSource,
    final_edges: bool,
) -> Result<Pass> {
    let cfg = &model.config;
    let lay = layout(cg, visible)?;
    let attends = model.kind.uses_content_attention();
    let n_layers = cfg.layers;
    let ch = cfg.node_dim;

    if let CaSource::Cached(cache) = ca {
        let want = (cg.graph.num_edges(), cfg.edge_dim);
        if (cache.num_edges(), cache.dim()) != want {
            return Err(Error::CacheShapeMismatch {
                expected: want,
                found: (cache.num_edges(), cache.dim()),
            });
        }
    }

    let h0 = initial_nodes(tape, bind, model, cg, params)?;
    let label_emb = bind.var(tape, params, "label_embedding")?;
    let stacked = if cg.stacked().rows() == 0 {
        None
    } else {
        Some(tape.constant(cg.stacked().clone()))
    };

    let mut h = vec![h0];
    let mut e: Vec<Option<Var>> = vec![None];
    let mut attention = vec![None];
    let mut final_ca = None;

    for l in 1..=n_layers {
        let h_prev = h[l - 1];
        let p = bind.var(tape, params, &layer_param(l, "P"))?;
        let node_part = tape.linear(h_prev, p, 0)?;
        let msg = match e[l - 1] {
            None => {
                let label_part = tape.linear(label_emb, p, ch)?;
                tape.gather_add(node_part, Some(lay.src.clone()), label_part, Some(lay.labels2.clone()), true)?
            }
            Some(e_prev) => {
                let edge_part = tape.linear(e_prev, p, ch)?;
                tape.gather_add(node_part, Some(lay.src.clone()), edge_part, None, true)?
            }
        };
        let msg = match mode.rng() {
            Some(rng) => tape.dropout(msg, cfg.dropout.message, rng),
            None => msg,
        };
        let agg = tape.segment_mean(msg, lay.seg.clone())?;
        let q = bind.var(tape, params, &layer_param(l, "Q"))?;
        let self_part = tape.linear(h_prev, q, 0)?;
        let agg_part = tape.linear(agg, q, ch)?;
        let h_l = tape.gather_add(self_part, None, agg_part, None, true)?;
        h.push(h_l);

        let last = l == n_layers;
        let cached_here = matches!(ca, CaSource::Cached(_)) && !last;
        let need_fresh_ca = attends && !cached_here && (!last || final_edges || matches!(ca, CaSource::Cached(_)));
        let mut ca_rows = None;
        if need_fresh_ca {
            let wu = bind.var(tape, params, &layer_param(l, "W_U"))?;
            let wm = bind.var(tape, params, &layer_param(l, "W_M"))?;
            let z = match stacked {
                Some(z) => z,
                None => tape.constant(Tensor::zeros(0, tape.value(wm).cols())),
            };
            let query = tape.linear(h_prev, wu, 0)?;
            let keys = tape.linear(z, wm, 0)?;
            let values = if params.contains(&layer_param(l, "W_V")) {
                let wv = bind.var(tape, params, &layer_param(l, "W_V"))?;
                tape.linear(z, wv, 0)?
            } else {
                keys
            };
            let pvec = match cfg.attention {
                AttentionKind::Concat => Some(bind.var(tape, params, &layer_param(l, "p"))?),
                AttentionKind::DotProduct => None,
            };
            let out = tape.content_attention(query, keys, values, pvec, lay.plan.clone(), ATTENTION_SLOPE)?;
            attention.push(Some(out));
            if last {
                final_ca = Some(out);
            }
            ca_rows = Some((out, cfg.bidirectional_ca.then_some(out)));
        } else {
            attention.push(None);
            if attends && cached_here {
                let CaSource::Cached(cache) = ca else { unreachable!() };
                let first = tape.constant(cached_block(cache, visible, Direction::ToUser)?);
                let second = if cfg.bidirectional_ca {
                    Some(tape.constant(cached_block(cache, visible, Direction::ToItem)?))
                } else {
                    None
                };
                ca_rows = Some((first, second));
            }
        }

        if last && !final_edges {
            e.push(None);
            continue;
        }
        let w = bind.var(tape, params, &layer_param(l, "W"))?;
        let node_term = tape.linear(h_l, w, 0)?;
        let label_term = tape.linear(label_emb, w, ch)?;
        let e_prime = tape.gather_add(node_term, Some(lay.src.clone()), label_term, Some(lay.labels2.clone()), true)?;
        let e_l = match ca_rows {
            Some((first, second)) => {
                tape.combine_edges(e_prime, Some(first), second, cfg.combination == Combination::Concat)?
            }
            None => e_prime,
        };
        e.push(Some(e_l));
    }
    Ok(Pass {
        h,
        e,
        attention,
        final_ca,
    })
}

/// Readout logits for the `(user, item)` pairs of `targets`.
pub(crate) fn readout_logits(
    tape: &mut Tape,
    bind: &mut Binding,
    model: &Model,
    cg: &ContentGraph,
    params: &ParamStore,
    h_last: Var,
    targets: &[usize],
    mode: &mut Mode,
) -> Result<Var> {
    let g = &cg.graph;
    let ch = model.config.node_dim;
    let mut users = Vec::with_capacity(targets.len());
    let mut items = Vec::with_capacity(targets.len());
    for &id in targets {
        if id >= g.num_edges() {
            return Err(Error::IndexOutOfRange {
                what: "edge",
                index: id,
                bound: g.num_edges(),
            });
        }
        let e = g.edge(id);
        users.push(e.user);
        items.push(g.num_users() + e.item);
    }
    let hw = bind.var(tape, params, "readout.hidden_w")?;
    let hb = bind.var(tape, params, "readout.hidden_b")?;
    let wo = bind.var(tape, params, "readout.w_out")?;
    let b = bind.var(tape, params, "readout.b")?;
    let user_part = tape.linear(h_last, hw, 0)?;
    let user_part = tape.add_bias(user_part, hb)?;
    let item_part = tape.linear(h_last, hw, ch)?;
    let hidden = tape.gather_add(user_part, Some(users.into()), item_part, Some(items.into()), true)?;
    let hidden = match mode.rng() {
        Some(rng) => tape.dropout(hidden, model.config.dropout.mlp, rng),
        None => hidden,
    };
    let z = tape.linear(hidden, wo, 0)?;
    tape.add_bias(z, b)
}

/// Runs the model in evaluation mode with every layer's edges and attention
/// recorded.
pub fn forward(
    model: &Model,
    cg: &ContentGraph,
    params: &ParamStore,
    visible: &[usize],
    mut mode: Mode,
) -> Result<LayerState> {
    let visible = &*canonical_visible(visible);
    let mut tape = Tape::new();
    let mut bind = Binding::new(params);
    let pass = run_layers(&mut tape, &mut bind, model, cg, params, visible, &mut mode, CaSource::Fresh, true)?;
    Ok(collect_state(&tape, model, cg, params, visible, &pass))
}

pub(crate) fn collect_state(
    tape: &Tape,
    model: &Model,
    cg: &ContentGraph,
    params: &ParamStore,
    visible: &[usize],
    pass: &Pass,
) -> LayerState {
    let k = visible.len();
    let mut e0 = Tensor::zeros(2 * k, model.config.edge_dim);
    if let Some(table) = params.get("label_embedding") {
        for (r, &id) in visible.iter().enumerate() {
            let row = table.row(cg.graph.edge(id).label);
            e0.row_mut(r).copy_from_slice(row);
            e0.row_mut(k + r).copy_from_slice(row);
        }
    }
    let mut e = vec![e0];
    e.extend(pass.e[1..].iter().map(|v| match v {
        Some(v) => tape.value(*v).clone(),
        None => Tensor::zeros(0, 0),
    }));
    let attention = pass
        .attention
        .iter()
        .map(|a| {
            a.and_then(|v| tape.attention_weights(v)).map(|(plan, alpha)| LayerAttention {
                plan: Rc::new(plan.clone()),
                alpha: alpha.to_vec(),
            })
        })
        .collect();
    LayerState {
        num_users: cg.graph.num_users(),
        visible: visible.to_vec(),
        h: pass.h.iter().map(|v| tape.value(*v).clone()).collect(),
        e,
        attention,
        final_ca: pass.final_ca.map(|v| tape.value(v).clone()),
    }
}

/// Loss, optional gradients, predictions and fresh final-layer attention
/// vectors of one pass.
pub(crate) struct StepOutput {
    pub loss: f64,
    pub grads: Option<ParamGrads>,
    pub predictions: Vec<f64>,
    pub final_ca: Option<Tensor>,
}

/// Mean loss of `logits` against the labels of `targets`.
pub(crate) fn record_loss(tape: &mut Tape, cg: &ContentGraph, logits: Var, targets: &[usize], task: Task) -> Result<Var> {
    let y: Rc<[f64]> = targets.iter().map(|&id| cg.graph.edge(id).label as f64).collect();
    match task {
        Task::Binary => tape.sigmoid_bce(logits, y),
        Task::Ordinal => tape.mse(logits, y),
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn step(
    model: &Model,
    cg: &ContentGraph,
    params: &ParamStore,
    visible: &[usize],
    targets: &[usize],
    task: Task,
    mut mode: Mode,
    ca: CaSource,
    want_grads: bool,
) -> Result<StepOutput> {
    let visible = &*canonical_visible(visible);
    let mut tape = Tape::new();
    let mut bind = Binding::new(params);
    let pass = run_layers(&mut tape, &mut bind, model, cg, params, visible, &mut mode, ca, false)?;
    let h_last = *pass.h.last().expect("at least h0");
    let logits = readout_logits(&mut tape, &mut bind, model, cg, params, h_last, targets, &mut mode)?;
    let predictions = tape
        .value(logits)
        .data()
        .iter()
        .map(|&z| match task {
            Task::Binary => sigmoid(z),
            Task::Ordinal => z,
        })
        .collect();
    let (loss, grads) = if targets.is_empty() {
        (f64::NAN, None)
    } else {
        let loss = record_loss(&mut tape, cg, logits, targets, task)?;
        let grads = if want_grads {
            Some(bind.gradients(&tape, params, loss)?)
        } else {
            None
        };
        (tape.value(loss).data()[0], grads)
    };
    Ok(StepOutput {
        loss,
        grads,
        predictions,
        final_ca: pass.final_ca.map(|v| tape.value(v).clone()),
    })
}

/// Evaluation-mode predictions for `targets` with `visible` edges passing
/// messages. With a cache, earlier layers read their attention vectors from
/// it.
pub fn predict(
    model: &Model,
    cg: &ContentGraph,
    params: &ParamStore,
    visible: &[usize],
    targets: &[usize],
    cache: Option<&EdgeCaCache>,
) -> Result<Vec<f64>> {
    let task = Task::for_label_count(cg.graph.label_count());
    let ca = cache.map_or(CaSource::Fresh, CaSource::Cached);
    Ok(step(model, cg, params, visible, targets, task, Mode::Eval, ca, false)?.predictions)
}

/// Mean loss of `targets` with dropout off.
pub fn eval_loss(
    model: &Model,
    cg: &ContentGraph,
    params: &ParamStore,
    visible: &[usize],
    targets: &[usize],
    task: Task,
    cache: Option<&EdgeCaCache>,
) -> Result<f64> {
    let ca = cache.map_or(CaSource::Fresh, CaSource::Cached);
    Ok(step(model, cg, params, visible, targets, task, Mode::Eval, ca, false)?.loss)
}

/// Training loss and its gradient with respect to every parameter.
pub fn loss_and_grad(
    model: &Model,
    cg: &ContentGraph,
    params: &ParamStore,
    visible: &[usize],
    targets: &[usize],
    task: Task,
    mode: Mode,
) -> Result<(f64, ParamGrads)> {
    let out = step(model, cg, params, visible, targets, task, mode, CaSource::Fresh, true)?;
    Ok((out.loss, out.grads.expect("gradients requested")))
}

/// Attention of each `(user, item)` pair at `layer`, queried by the user's
/// embedding from `state` (which must come from the same parameters).
/// Content-less items are skipped.
pub fn attention_for_pairs(
    model: &Model,
    cg: &ContentGraph,
    params: &ParamStore,
    state: &LayerState,
    pairs: &[(usize, usize)],
    layer: usize,
) -> Result<Vec<AttentionRecord>> {
    if !model.kind.uses_content_attention() {
        return Ok(Vec::new());
    }
    if layer == 0 || layer > model.config.layers {
        return Err(Error::IndexOutOfRange {
            what: "layer",
            index: layer,
            bound: model.config.layers + 1,
        });
    }
    let w_u = params.require(&layer_param(layer, "W_U"))?;
    let w_m = params.require(&layer_param(layer, "W_M"))?;
    let weights = AttentionWeights {
        w_u,
        w_m,
        p: params.get(&layer_param(layer, "p")),
        w_v: params.get(&layer_param(layer, "W_V")),
    };
    let mut out = Vec::new();
    for &(user, item) in pairs {
        let query = state.node(layer - 1, NodeId::user(user));
        let (_, alpha) = content_attention_edge(query, cg.content.get(item), &weights, model.config.attention)?;
        if let Some(alpha) = alpha {
            out.push(AttentionRecord {
                edge: None,
                user,
                item,
                layer,
                alpha,
            });
        }
    }
    Ok(out)
}

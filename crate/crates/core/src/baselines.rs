//! Content-free and content-initialised GCN baselines.
//!
//! All baselines run the same message-passing layers as CoRGi with content
//! attention switched off. They differ only in where node vectors start:
//!
//! * `GcnContentInit`: items start from a linear map of their mean content
//!   row, users from random vectors.
//! * `GcnGrape` and `GcnLabelEdges`: every node starts from a random vector
//!   and no content is read.

use crate::error::{Error, Result};
use crate::graph::ContentGraph;
use crate::model::{forward, LayerState, Mode, Model, ModelKind};
use crate::numeric::ParamStore;

fn run(kind: ModelKind, model: &Model, cg: &ContentGraph, params: &ParamStore, visible: &[usize]) -> Result<LayerState> {
    if model.kind != kind {
        return Err(Error::InvalidConfig(format!(
            "expected a {} model, found {}",
            kind.name(),
            model.kind.name()
        )));
    }
    forward(model, cg, params, visible, Mode::Eval)
}

pub fn gcn_content_init_forward(
    model: &Model,
    cg: &ContentGraph,
    params: &ParamStore,
    visible: &[usize],
) -> Result<LayerState> {
    run(ModelKind::GcnContentInit, model, cg, params, visible)
}

pub fn gcn_grape_forward(model: &Model, cg: &ContentGraph, params: &ParamStore, visible: &[usize]) -> Result<LayerState> {
    run(ModelKind::GcnGrape, model, cg, params, visible)
}

/// The label-initialised edge baseline. Its forward pass is the GRAPE-style
/// pass; it is kept as a separate kind so runs are reported under its name.
pub fn gcn_label_edges_forward(
    model: &Model,
    cg: &ContentGraph,
    params: &ParamStore,
    visible: &[usize],
) -> Result<LayerState> {
    run(ModelKind::GcnLabelEdges, model, cg, params, visible)
}

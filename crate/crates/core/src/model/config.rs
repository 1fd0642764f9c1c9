//! Model hyperparameters and parameter initialisation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::numeric::{ParamStore, Tensor};

/// How attention coefficients are scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionKind {
    /// `leaky(pᵀ[W_U·h, W_M·z])`
    Concat,
    /// `leaky((W_U·h)ᵀ(W_M·z))`
    DotProduct,
}

/// How the content-attention vector joins the content-independent edge
/// embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Combination {
    Add,
    Concat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Aggregation {
    Mean,
}

/// Binary labels are scored with a sigmoid and cross-entropy; ordinal labels
/// with an unbounded score and squared error.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Binary,
    Ordinal,
}

impl Task {
    pub fn for_label_count(label_count: usize) -> Task {
        if label_count <= 2 {
            Task::Binary
        } else {
            Task::Ordinal
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Corgi,
    GcnContentInit,
    GcnGrape,
    GcnLabelEdges,
}

impl ModelKind {
    pub const ALL: [ModelKind; 4] = [
        ModelKind::Corgi,
        ModelKind::GcnContentInit,
        ModelKind::GcnGrape,
        ModelKind::GcnLabelEdges,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Corgi => "corgi",
            ModelKind::GcnContentInit => "gcn-content-init",
            ModelKind::GcnGrape => "gcn-grape",
            ModelKind::GcnLabelEdges => "gcn-label-edges",
        }
    }

    pub fn parse(s: &str) -> Option<ModelKind> {
        ModelKind::ALL.into_iter().find(|k| k.name() == s)
    }

    pub fn uses_content_attention(self) -> bool {
        self == ModelKind::Corgi
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DropoutConfig {
    /// Applied to every message vector.
    pub message: f64,
    /// Fraction of visible edges removed from message passing each epoch.
    pub edge: f64,
    /// Applied to the readout hidden layer.
    pub mlp: f64,
}

impl DropoutConfig {
    pub const NONE: DropoutConfig = DropoutConfig {
        message: 0.0,
        edge: 0.0,
        mlp: 0.0,
    };
}

impl Default for DropoutConfig {
    fn default() -> Self {
        DropoutConfig {
            message: 0.3,
            edge: 0.3,
            mlp: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub layers: usize,
    pub node_dim: usize,
    pub edge_dim: usize,
    pub content_dim: usize,
    pub readout_hidden: usize,
    pub attention: AttentionKind,
    pub combination: Combination,
    pub bidirectional_ca: bool,
    pub aggregation: Aggregation,
    pub dropout: DropoutConfig,
    /// Learn the initial node vectors instead of keeping them fixed.
    pub trainable_node_init: bool,
    /// Use a separate value projection `W_V` instead of reusing `W_M`.
    pub split_value_projection: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            layers: 3,
            node_dim: 64,
            edge_dim: 64,
            content_dim: 0,
            readout_hidden: 256,
            attention: AttentionKind::DotProduct,
            combination: Combination::Add,
            bidirectional_ca: true,
            aggregation: Aggregation::Mean,
            dropout: DropoutConfig::default(),
            trainable_node_init: false,
            split_value_projection: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.layers == 0 {
            return bad("model.layers must be at least 1");
        }
        if self.node_dim == 0 || self.edge_dim == 0 || self.readout_hidden == 0 {
            return bad("model dimensions must be positive");
        }
        for (name, r) in [
            ("message", self.dropout.message),
            ("edge", self.dropout.edge),
            ("mlp", self.dropout.mlp),
        ] {
            if !(0.0..1.0).contains(&r) {
                return Err(Error::InvalidConfig(format!("dropout.{name} = {r} is outside [0, 1)")));
            }
        }
        Ok(())
    }

    /// Width of `e^(l)` for `l ≥ 1` when content attention is present.
    pub fn edge_width(&self, kind: ModelKind, layer: usize) -> usize {
        if layer >= 1 && kind.uses_content_attention() && self.combination == Combination::Concat {
            2 * self.edge_dim
        } else {
            self.edge_dim
        }
    }
}

/// A model family together with its hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub kind: ModelKind,
    pub config: ModelConfig,
}

pub fn layer_param(layer: usize, name: &str) -> String {
    format!("layer{layer}.{name}")
}

impl Model {
    pub fn new(kind: ModelKind, config: ModelConfig) -> Self {
        Model { kind, config }
    }

    /// Seeded parameters for a graph with the given node and label counts.
    /// Matrices use Glorot initialisation, biases start at zero and the
    /// initial node vectors are standard normal.
    pub fn init_params(
        &self,
        num_users: usize,
        num_items: usize,
        label_count: usize,
        seed: u64,
    ) -> Result<ParamStore> {
        let c = &self.config;
        c.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (ch, ce, d) = (c.node_dim, c.edge_dim, c.content_dim);
        let mut ps = ParamStore::new();

        let init_rows = if self.kind == ModelKind::GcnContentInit {
            num_users
        } else {
            num_users + num_items
        };
        let normal: Vec<f64> = (0..init_rows * ch)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        ps.insert("node_init", Tensor::from_vec(init_rows, ch, normal)?, c.trainable_node_init);
        if self.kind == ModelKind::GcnContentInit {
            ps.insert("content_init.weight", Tensor::glorot(ch, d, &mut rng), true);
            ps.insert("content_init.bias", Tensor::zeros(1, ch), true);
        }
        ps.insert("label_embedding", Tensor::glorot(label_count, ce, &mut rng), true);

        let attends = self.kind.uses_content_attention();
        for l in 1..=c.layers {
            let ein = c.edge_width(self.kind, l - 1);
            ps.insert(layer_param(l, "P"), Tensor::glorot(ch, ch + ein, &mut rng), true);
            ps.insert(layer_param(l, "Q"), Tensor::glorot(ch, 2 * ch, &mut rng), true);
            ps.insert(layer_param(l, "W"), Tensor::glorot(ce, ch + ce, &mut rng), true);
            if attends {
                ps.insert(layer_param(l, "W_U"), Tensor::glorot(ce, ch, &mut rng), true);
                ps.insert(layer_param(l, "W_M"), Tensor::glorot(ce, d, &mut rng), true);
                if c.split_value_projection {
                    ps.insert(layer_param(l, "W_V"), Tensor::glorot(ce, d, &mut rng), true);
                }
                if c.attention == AttentionKind::Concat {
                    ps.insert(layer_param(l, "p"), Tensor::glorot(1, 2 * ce, &mut rng), true);
                }
            }
        }

        let h = c.readout_hidden;
        ps.insert("readout.hidden_w", Tensor::glorot(h, 2 * ch, &mut rng), true);
        ps.insert("readout.hidden_b", Tensor::zeros(1, h), true);
        ps.insert("readout.w_out", Tensor::glorot(1, h, &mut rng), true);
        ps.insert("readout.b", Tensor::zeros(1, 1), true);
        Ok(ps)
    }
}

//! Named parameters, their gradients, Adam, and the finite-difference oracle.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    /// Frozen parameters are part of the model (and of checkpoints) but never
    /// receive gradients or optimizer updates.
    pub trainable: bool,
}

/// Ordered collection of named model parameters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) {
        let name = name.into();
        assert!(self.index_of(&name).is_none(), "duplicate parameter {name}");
        self.params.push(Param {
            name,
            value,
            trainable,
        });
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index_of(name).is_some()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params
            .iter_mut()
            .find(|p| p.name == name)
            .map(|p| &mut p.value)
    }

    pub(crate) fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::MissingRequired(format!("parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }

    /// Number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> bool {
        match self.params.iter_mut().find(|p| p.name == name) {
            Some(p) => {
                p.trainable = trainable;
                true
            }
            None => false,
        }
    }

    /// Bit-level equality of every value, so `-0.0` and `0.0` differ and NaNs
    /// compare equal to themselves.
    pub fn bit_eq(&self, other: &ParamStore) -> bool {
        self.params.len() == other.params.len()
            && self.params.iter().zip(&other.params).all(|(a, b)| {
                a.name == b.name
                    && a.value.shape() == b.value.shape()
                    && a.value
                        .data()
                        .iter()
                        .zip(b.value.data())
                        .all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}

/// Gradients aligned with a [`ParamStore`]'s order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    names: Vec<String>,
    grads: Vec<Tensor>,
}

impl ParamGrads {
    pub fn zeros_like(store: &ParamStore) -> Self {
        ParamGrads {
            names: store.names().map(str::to_owned).collect(),
            grads: store
                .iter()
                .map(|p| Tensor::zeros(p.value.rows(), p.value.cols()))
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.grads[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.grads)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

/// Lazily places parameters on a tape for one forward pass.
pub struct Binding {
    vars: Vec<Option<Var>>,
}

impl Binding {
    pub fn new(store: &ParamStore) -> Self {
        Binding {
            vars: vec![None; store.len()],
        }
    }

    /// The tape variable for `name`, recording it on first use. Frozen
    /// parameters are recorded as constants.
    pub fn var(&mut self, tape: &mut Tape, store: &ParamStore, name: &str) -> Result<Var> {
        let idx = store
            .index_of(name)
            .ok_or_else(|| Error::MissingRequired(format!("parameter {name}")))?;
        if let Some(v) = self.vars[idx] {
            return Ok(v);
        }
        let p = &store.params[idx];
        let v = tape.leaf(p.value.clone(), p.trainable);
        self.vars[idx] = Some(v);
        Ok(v)
    }

    /// `∂loss/∂θ` for every parameter of `store`. Unused and frozen
    /// parameters get zeros; a loss that reaches no trainable parameter is an
    /// error.
    pub fn gradients(&self, tape: &Tape, store: &ParamStore, loss: Var) -> Result<ParamGrads> {
        let mut raw = tape.backward(loss)?;
        let mut out = ParamGrads::zeros_like(store);
        let mut connected = false;
        for (i, slot) in self.vars.iter().enumerate() {
            if let Some(v) = slot {
                if let Some(g) = raw.take(*v) {
                    out.grads[i] = g;
                    connected = true;
                }
            }
        }
        if !connected {
            return Err(Error::DisconnectedGraph);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros: Vec<Tensor> = store
            .iter()
            .map(|p| Tensor::zeros(p.value.rows(), p.value.cols()))
            .collect();
        AdamState {
            config,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One bias-corrected Adam update of every trainable parameter.
pub fn adam_step(params: &mut ParamStore, grads: &ParamGrads, state: &mut AdamState) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::shape(
            "adam_step",
            (params.len(), 1),
            (grads.len(), state.m.len()),
        ));
    }
    for ((p, g), name) in params.iter().zip(&grads.grads).zip(&grads.names) {
        if p.value.shape() != g.shape() || &p.name != name {
            return Err(Error::shape(format!("adam_step {}", p.name), p.value.shape(), g.shape()));
        }
    }
    state.t += 1;
    let AdamConfig {
        lr,
        beta1,
        beta2,
        eps,
    } = state.config;
    let c1 = 1.0 - beta1.powi(state.t as i32);
    let c2 = 1.0 - beta2.powi(state.t as i32);
    for (i, p) in params.params.iter_mut().enumerate() {
        if !p.trainable {
            continue;
        }
        let g = grads.grads[i].data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (j, w) in p.value.data_mut().iter_mut().enumerate() {
            m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
            v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            *w -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Central differences `(f(θ+ε) − f(θ−ε)) / 2ε` for every trainable scalar.
pub fn finite_difference_grad<F>(mut f: F, params: &ParamStore, eps: f64) -> Result<ParamGrads>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    let mut out = ParamGrads::zeros_like(params);
    let mut probe = params.clone();
    for i in 0..params.len() {
        if !params.params[i].trainable {
            continue;
        }
        for c in 0..params.params[i].value.len() {
            let orig = params.params[i].value.data()[c];
            probe.params[i].value.data_mut()[c] = orig + eps;
            let plus = f(&probe)?;
            probe.params[i].value.data_mut()[c] = orig - eps;
            let minus = f(&probe)?;
            probe.params[i].value.data_mut()[c] = orig;
            out.grads[i].data_mut()[c] = (plus - minus) / (2.0 * eps);
        }
    }
    Ok(out)
}

/// Denominator floor for relative errors, so that two gradients that are both
/// numerically zero compare as equal.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

/// Per-parameter worst relative error between two gradient sets.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub entries: Vec<(String, f64)>,
}

impl GradCheckReport {
    pub fn compare(analytic: &ParamGrads, numeric: &ParamGrads) -> Self {
        let entries = analytic
            .iter()
            .zip(numeric.iter())
            .map(|((name, a), (_, n))| {
                let worst = a
                    .data()
                    .iter()
                    .zip(n.data())
                    .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(REL_ERROR_FLOOR))
                    .fold(0.0, f64::max);
                (name.to_owned(), worst)
            })
            .collect();
        GradCheckReport { entries }
    }

    pub fn max_error(&self) -> f64 {
        self.entries.iter().map(|e| e.1).fold(0.0, f64::max)
    }
}

//! Single-vector forms of each model step.
//!
//! These operate on one node or one edge at a time and mirror the batched
//! forward pass. They are used for attention inspection of arbitrary
//! user–item pairs and as a readable statement of each step.

use crate::error::{Error, Result};
use crate::numeric::activation::{leaky_relu, relu, sigmoid, softmax, ATTENTION_SLOPE};
use crate::numeric::{dot, Tensor};

use super::config::{AttentionKind, Combination, Task};

fn concat(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut v = Vec::with_capacity(a.len() + b.len());
    v.extend_from_slice(a);
    v.extend_from_slice(b);
    v
}

fn relu_matvec(w: &Tensor, x: &[f64], ctx: &str) -> Result<Vec<f64>> {
    let mut y = w
        .matvec(x)
        .map_err(|_| Error::shape(ctx, (w.rows(), w.cols()), (w.rows(), x.len())))?;
    y.iter_mut().for_each(|v| *v = relu(*v));
    Ok(y)
}

/// `m = ReLU(P·[h_j, e_ij])`.
pub fn compute_message(h_j: &[f64], e_ij: &[f64], p: &Tensor) -> Result<Vec<f64>> {
    relu_matvec(p, &concat(h_j, e_ij), "compute_message")
}

/// `h_i = ReLU(Q·[h_i_prev, mean(messages)])`. The mean is accumulated in a
/// canonical order, so any permutation of `messages` gives identical bits. A
/// node without messages aggregates to zero.
pub fn update_node(h_prev: &[f64], messages: &[Vec<f64>], q: &Tensor) -> Result<Vec<f64>> {
    let width = messages.first().map_or(q.cols().saturating_sub(h_prev.len()), Vec::len);
    if let Some(m) = messages.iter().find(|m| m.len() != width) {
        return Err(Error::shape("update_node messages", (1, width), (1, m.len())));
    }
    let mut order: Vec<&Vec<f64>> = messages.iter().collect();
    order.sort_by(|a, b| {
        a.iter()
            .zip(b.iter())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut mean = vec![0.0; width];
    for m in order {
        for (s, v) in mean.iter_mut().zip(m) {
            *s += v;
        }
    }
    if !messages.is_empty() {
        let inv = 1.0 / messages.len() as f64;
        mean.iter_mut().for_each(|v| *v *= inv);
    }
    relu_matvec(q, &concat(h_prev, &mean), "update_node")
}

/// The weights of one layer's content attention.
#[derive(Debug, Clone, Copy)]
pub struct AttentionWeights<'a> {
    pub w_u: &'a Tensor,
    pub w_m: &'a Tensor,
    /// Scoring vector, required for [`AttentionKind::Concat`].
    pub p: Option<&'a Tensor>,
    /// Separate value projection; `W_M` is reused when absent.
    pub w_v: Option<&'a Tensor>,
}

fn attention_inputs(h_query: &[f64], z: &[f64], w: &AttentionWeights) -> Result<(Vec<f64>, Vec<f64>)> {
    let q = w
        .w_u
        .matvec(h_query)
        .map_err(|_| Error::shape("attention query", (1, w.w_u.cols()), (1, h_query.len())))?;
    let k = w
        .w_m
        .matvec(z)
        .map_err(|_| Error::shape("attention content", (1, w.w_m.cols()), (1, z.len())))?;
    Ok((q, k))
}

fn score(q: &[f64], k: &[f64], w: &AttentionWeights, kind: AttentionKind) -> Result<f64> {
    let raw = match kind {
        AttentionKind::DotProduct => {
            if q.len() != k.len() {
                return Err(Error::shape("dot-product attention", (1, q.len()), (1, k.len())));
            }
            dot(q, k)
        }
        AttentionKind::Concat => {
            let p = w
                .p
                .ok_or_else(|| Error::MissingRequired("attention vector p".into()))?;
            if p.len() != q.len() + k.len() {
                return Err(Error::shape("concat attention", (1, q.len() + k.len()), p.shape()));
            }
            dot(&p.data()[..q.len()], q) + dot(&p.data()[q.len()..], k)
        }
    };
    Ok(leaky_relu(raw, ATTENTION_SLOPE))
}

/// Attention coefficient `c_ik` of content row `z_k` for query `h`.
pub fn attention_coefficient(
    h_query: &[f64],
    z_k: &[f64],
    weights: &AttentionWeights,
    kind: AttentionKind,
) -> Result<f64> {
    let (q, k) = attention_inputs(h_query, z_k, weights)?;
    score(&q, &k, weights, kind)
}

/// Content-attention edge vector `Σ_k α_k · W_M·z_k` and the weights `α`.
/// Without content the vector is zero and `α` is absent.
pub fn content_attention_edge(
    h_query: &[f64],
    content: Option<&Tensor>,
    weights: &AttentionWeights,
    kind: AttentionKind,
) -> Result<(Vec<f64>, Option<Vec<f64>>)> {
    let out_dim = weights.w_v.unwrap_or(weights.w_m).rows();
    let Some(z) = content.filter(|z| z.rows() > 0) else {
        return Ok((vec![0.0; out_dim], None));
    };
    let mut scores = Vec::with_capacity(z.rows());
    let mut values = Vec::with_capacity(z.rows());
    for r in 0..z.rows() {
        let (q, k) = attention_inputs(h_query, z.row(r), weights)?;
        scores.push(score(&q, &k, weights, kind)?);
        values.push(match weights.w_v {
            Some(wv) => wv.matvec(z.row(r))?,
            None => k,
        });
    }
    let alpha = softmax(&scores)?;
    let mut e = vec![0.0; out_dim];
    for (a, v) in alpha.iter().zip(&values) {
        for (o, x) in e.iter_mut().zip(v) {
            *o += a * x;
        }
    }
    Ok((e, Some(alpha)))
}

/// `e′ = ReLU(W·[h_j, e_ij^(0)])`, joined with the attention vector by
/// addition or concatenation.
pub fn update_edge(
    h_j: &[f64],
    e0: &[f64],
    e_ca: &[f64],
    w: &Tensor,
    combination: Combination,
) -> Result<Vec<f64>> {
    let e_prime = relu_matvec(w, &concat(h_j, e0), "update_edge")?;
    match combination {
        Combination::Add => {
            if e_ca.len() != e_prime.len() {
                return Err(Error::shape("update_edge add", (1, e_prime.len()), (1, e_ca.len())));
            }
            Ok(e_prime.iter().zip(e_ca).map(|(a, b)| a + b).collect())
        }
        Combination::Concat => Ok(concat(&e_prime, e_ca)),
    }
}

/// Readout weights: a hidden layer over `[h_u, h_m]` and a scalar output.
#[derive(Debug, Clone, Copy)]
pub struct ReadoutWeights<'a> {
    pub hidden_w: &'a Tensor,
    pub hidden_b: &'a Tensor,
    pub w_out: &'a Tensor,
    pub b: f64,
}

/// Prediction for one (user, item) pair: a probability for binary tasks, an
/// unbounded score for ordinal ones.
pub fn readout(h_u: &[f64], h_m: &[f64], w: &ReadoutWeights, task: Task) -> Result<f64> {
    let mut hidden = w
        .hidden_w
        .matvec(&concat(h_u, h_m))
        .map_err(|_| Error::shape("readout", (1, w.hidden_w.cols()), (1, h_u.len() + h_m.len())))?;
    if w.hidden_b.len() != hidden.len() || w.w_out.len() != hidden.len() {
        return Err(Error::shape("readout bias", (1, hidden.len()), w.hidden_b.shape()));
    }
    for (h, b) in hidden.iter_mut().zip(w.hidden_b.data()) {
        *h = relu(*h + b);
    }
    let z = dot(w.w_out.data(), &hidden) + w.b;
    Ok(match task {
        Task::Binary => sigmoid(z),
        Task::Ordinal => z,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rnd(rows: usize, cols: usize, seed: u64) -> Tensor {
        Tensor::glorot(rows, cols, &mut ChaCha8Rng::seed_from_u64(seed)).map(|v| 3.0 * v)
    }

    #[test]
    fn zero_weights_give_zero_message() {
        let m = compute_message(&[1.0, -2.0], &[0.5], &Tensor::zeros(2, 3)).unwrap();
        assert_eq!(m, vec![0.0, 0.0]);
    }

    #[test]
    fn identity_block_message() {
        let m = compute_message(&[1.0, 2.0], &[3.0], &Tensor::identity(3)).unwrap();
        assert_eq!(m, vec![1.0, 2.0, 3.0]);
        assert!(compute_message(&[1.0], &[3.0], &Tensor::identity(3)).is_err());
    }

    #[test]
    fn message_matches_formula() {
        let p = rnd(3, 5, 1);
        let (h, e) = ([0.3, -1.2, 0.7], [2.0, -0.4]);
        let x = [h.as_slice(), e.as_slice()].concat();
        let want: Vec<f64> = (0..3)
            .map(|r| (0..5).map(|c| p.get(r, c) * x[c]).sum::<f64>().max(0.0))
            .collect();
        assert_eq!(compute_message(&h, &e, &p).unwrap(), want);
    }

    #[test]
    fn node_update_mean_of_identical_messages() {
        let q = rnd(2, 4, 2);
        let one = update_node(&[0.1, 0.2], &[vec![1.0, -1.0]], &q).unwrap();
        let many = update_node(&[0.1, 0.2], &vec![vec![1.0, -1.0]; 7], &q).unwrap();
        assert_eq!(one, many);
    }

    #[test]
    fn node_update_is_permutation_invariant() {
        let q = rnd(3, 6, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut msgs: Vec<Vec<f64>> = (0..9).map(|i| rnd(1, 3, 10 + i).into_data()).collect();
        let base = update_node(&[0.5, -0.1, 0.9], &msgs, &q).unwrap();
        for _ in 0..100 {
            msgs.shuffle(&mut rng);
            let got = update_node(&[0.5, -0.1, 0.9], &msgs, &q).unwrap();
            assert!(got.iter().zip(&base).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }

    #[test]
    fn attention_coefficient_cases() {
        let z = Tensor::zeros(3, 2);
        let p = rnd(1, 6, 5);
        for kind in [AttentionKind::DotProduct, AttentionKind::Concat] {
            let w = AttentionWeights {
                w_u: &z,
                w_m: &Tensor::zeros(3, 4),
                p: Some(&p),
                w_v: None,
            };
            assert_eq!(attention_coefficient(&[1.0, 2.0], &[1.0, 0.0, 0.0, 1.0], &w, kind).unwrap(), 0.0);
        }
        let eye = Tensor::identity(3);
        let w = AttentionWeights {
            w_u: &eye,
            w_m: &eye,
            p: None,
            w_v: None,
        };
        let c = attention_coefficient(&[1.0, 0.0, 0.0], &[1.0, 0.0, 0.0], &w, AttentionKind::DotProduct).unwrap();
        assert_eq!(c, 1.0);
        let c = attention_coefficient(&[-2.0, 0.0, 0.0], &[1.0, 0.0, 0.0], &w, AttentionKind::DotProduct).unwrap();
        assert_eq!(c, -0.4);
    }

    #[test]
    fn attention_coefficient_matches_formula() {
        let (wu, wm, p) = (rnd(3, 2, 6), rnd(3, 4, 7), rnd(1, 6, 8));
        let (h, z) = ([0.4, -1.1], [1.0, 0.0, 0.5, -0.5]);
        let q: Vec<f64> = (0..3).map(|r| wu.get(r, 0) * h[0] + wu.get(r, 1) * h[1]).collect();
        let k: Vec<f64> = (0..3).map(|r| (0..4).map(|c| wm.get(r, c) * z[c]).sum()).collect();
        let leaky = |x: f64| if x >= 0.0 { x } else { 0.2 * x };
        let dp = leaky(q.iter().zip(&k).map(|(a, b)| a * b).sum());
        let co = leaky((0..3).map(|i| p.data()[i] * q[i] + p.data()[3 + i] * k[i]).sum());
        let w = AttentionWeights {
            w_u: &wu,
            w_m: &wm,
            p: Some(&p),
            w_v: None,
        };
        let got_dp = attention_coefficient(&h, &z, &w, AttentionKind::DotProduct).unwrap();
        let got_co = attention_coefficient(&h, &z, &w, AttentionKind::Concat).unwrap();
        assert!((got_dp - dp).abs() < 1e-12);
        assert!((got_co - co).abs() < 1e-12);
    }

    #[test]
    fn content_attention_special_cases() {
        let (wu, wm) = (rnd(3, 2, 9), rnd(3, 2, 10));
        let w = AttentionWeights {
            w_u: &wu,
            w_m: &wm,
            p: None,
            w_v: None,
        };
        let one = Tensor::row_vector(&[0.3, 0.8]);
        let (e, a) = content_attention_edge(&[1.0, 2.0], Some(&one), &w, AttentionKind::DotProduct).unwrap();
        assert_eq!(a.unwrap(), vec![1.0]);
        assert_eq!(e, wm.matvec(&[0.3, 0.8]).unwrap());

        let same = Tensor::from_rows(&vec![vec![0.3, 0.8]; 4]).unwrap();
        let (_, a) = content_attention_edge(&[1.0, 2.0], Some(&same), &w, AttentionKind::DotProduct).unwrap();
        assert!(a.unwrap().iter().all(|&x| (x - 0.25).abs() < 1e-15));

        let (e, a) = content_attention_edge(&[1.0, 2.0], None, &w, AttentionKind::DotProduct).unwrap();
        assert_eq!(e, vec![0.0; 3]);
        assert!(a.is_none());
    }

    #[test]
    fn edge_update_combinations() {
        let w = rnd(2, 3, 11);
        let plain = update_edge(&[0.5, 1.0], &[2.0], &[0.0, 0.0], &w, Combination::Add).unwrap();
        let want: Vec<f64> = (0..2)
            .map(|r| (w.get(r, 0) * 0.5 + w.get(r, 1) * 1.0 + w.get(r, 2) * 2.0).max(0.0))
            .collect();
        assert_eq!(plain, want);
        let added = update_edge(&[0.5, 1.0], &[2.0], &[1.0, -1.0], &w, Combination::Add).unwrap();
        assert_eq!(added, vec![want[0] + 1.0, want[1] - 1.0]);
        let cat = update_edge(&[0.5, 1.0], &[2.0], &[7.0, 8.0, 9.0], &w, Combination::Concat).unwrap();
        assert_eq!(cat.len(), 5);
        assert!(update_edge(&[0.5, 1.0], &[2.0], &[1.0], &w, Combination::Add).is_err());
    }

    #[test]
    fn readout_cases() {
        let hw = rnd(4, 4, 12);
        let hb = rnd(1, 4, 13);
        let zero = Tensor::zeros(1, 4);
        let w = ReadoutWeights {
            hidden_w: &hw,
            hidden_b: &hb,
            w_out: &zero,
            b: 0.0,
        };
        assert_eq!(readout(&[1.0, 2.0], &[3.0, 4.0], &w, Task::Binary).unwrap(), 0.5);

        let wo = rnd(1, 4, 14);
        let w = ReadoutWeights { w_out: &wo, b: 0.1, ..w };
        let a = readout(&[1.0, 2.0], &[-3.0, 4.0], &w, Task::Ordinal).unwrap();
        let b = readout(&[-3.0, 4.0], &[1.0, 2.0], &w, Task::Ordinal).unwrap();
        assert_ne!(a, b);

        let x = [1.0, 2.0, -3.0, 4.0];
        let hidden: Vec<f64> = (0..4)
            .map(|r| ((0..4).map(|c| hw.get(r, c) * x[c]).sum::<f64>() + hb.data()[r]).max(0.0))
            .collect();
        let z: f64 = hidden.iter().zip(wo.data()).map(|(h, w)| h * w).sum::<f64>() + 0.1;
        assert!((a - z).abs() < 1e-12);
        let p = readout(&[1.0, 2.0], &[-3.0, 4.0], &w, Task::Binary).unwrap();
        assert!((p - 1.0 / (1.0 + (-z).exp())).abs() < 1e-12);
    }
}

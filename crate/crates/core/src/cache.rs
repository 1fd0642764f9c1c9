//! Cached content-attention edge vectors and item-sampled subgraphs.
//!
//! With caching, layers `1..L` read their content-attention vectors from an
//! [`EdgeCaCache`] instead of recomputing them. Only layer `L` evaluates the
//! attention, and its result is written back for the next pass. Entries start
//! at zero, so the first pass sees content-free edges in the earlier layers.
//!
//! The final layer's edge embeddings do not reach the readout, so in cached
//! mode the attention weights receive no gradient. The cached vectors act as
//! constant content features produced by the attention parameters at their
//! initial values.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{BipartiteGraph, ContentGraph};
use crate::model::forward::{canonical_visible, collect_state, run_layers, CaSource};
use crate::model::{LayerState, Mode, Model};
use crate::numeric::checkpoint::{read_records, write_records};
use crate::numeric::{Binding, ParamStore, Tape, Tensor};

/// Direction of a message along an edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Direction {
    /// Item to user; the user's embedding queries the item's content.
    ToUser,
    /// User to item.
    ToItem,
}

impl Direction {
    fn slot(self) -> usize {
        match self {
            Direction::ToUser => 0,
            Direction::ToItem => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Direction::ToUser => "to_user",
            Direction::ToItem => "to_item",
        }
    }
}

/// One content-attention vector per (edge, direction), with the stamp of the
/// pass that last wrote it.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeCaCache {
    dim: usize,
    num_edges: usize,
    data: Vec<f64>,
    stamps: Vec<Option<u64>>,
}

impl EdgeCaCache {
    pub fn new(num_edges: usize, dim: usize) -> Self {
        EdgeCaCache {
            dim,
            num_edges,
            data: vec![0.0; num_edges * 2 * dim],
            stamps: vec![None; num_edges * 2],
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_edges(&self) -> usize {
        self.num_edges
    }

    fn slot(&self, edge: usize, dir: Direction) -> Result<usize> {
        if edge >= self.num_edges {
            return Err(Error::IndexOutOfRange {
                what: "cache edge",
                index: edge,
                bound: self.num_edges,
            });
        }
        Ok(edge * 2 + dir.slot())
    }

    pub fn get(&self, edge: usize, dir: Direction) -> Result<&[f64]> {
        let s = self.slot(edge, dir)?;
        Ok(&self.data[s * self.dim..(s + 1) * self.dim])
    }

    /// Stamp of the last write, `None` if never written.
    pub fn stamp(&self, edge: usize, dir: Direction) -> Option<u64> {
        self.slot(edge, dir).ok().and_then(|s| self.stamps[s])
    }

    pub fn write(&mut self, edge: usize, dir: Direction, value: &[f64], stamp: u64) -> Result<()> {
        let s = self.slot(edge, dir)?;
        if value.len() != self.dim {
            return Err(Error::CacheShapeMismatch {
                expected: (self.num_edges, self.dim),
                found: (self.num_edges, value.len()),
            });
        }
        self.data[s * self.dim..(s + 1) * self.dim].copy_from_slice(value);
        self.stamps[s] = Some(stamp);
        Ok(())
    }

    /// Every (edge, direction) last written with exactly `stamp`.
    pub fn written_at(&self, stamp: u64) -> Vec<(usize, Direction)> {
        self.stamps
            .iter()
            .enumerate()
            .filter(|(_, s)| **s == Some(stamp))
            .map(|(i, _)| {
                let dir = if i % 2 == 0 { Direction::ToUser } else { Direction::ToItem };
                (i / 2, dir)
            })
            .collect()
    }

    /// Values compared bit for bit; stamps are ignored.
    pub fn values_bit_eq(&self, other: &EdgeCaCache) -> bool {
        self.dim == other.dim
            && self.num_edges == other.num_edges
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// Saves written entries as `cache/<edge>/<direction>` records in the
    /// checkpoint format.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut names = Vec::new();
        let mut rows = Vec::new();
        for (i, s) in self.stamps.iter().enumerate() {
            if s.is_some() {
                let dir = if i % 2 == 0 { Direction::ToUser } else { Direction::ToItem };
                names.push(format!("cache/{}/{}", i / 2, dir.name()));
                rows.push(Tensor::row_vector(&self.data[i * self.dim..(i + 1) * self.dim]));
            }
        }
        write_records(path, names.iter().map(String::as_str).zip(&rows))
    }

    /// Loads a saved cache; restored entries carry stamp `0`.
    pub fn load(path: &Path, num_edges: usize, dim: usize) -> Result<EdgeCaCache> {
        let mut cache = EdgeCaCache::new(num_edges, dim);
        for (name, value) in read_records(path)? {
            let parsed = name.strip_prefix("cache/").and_then(|rest| {
                let (edge, dir) = rest.split_once('/')?;
                let dir = match dir {
                    "to_user" => Direction::ToUser,
                    "to_item" => Direction::ToItem,
                    _ => return None,
                };
                Some((edge.parse::<usize>().ok()?, dir))
            });
            let Some((edge, dir)) = parsed else {
                return Err(Error::Parse {
                    file: path.display().to_string(),
                    line: 0,
                    message: format!("unexpected cache record `{name}`"),
                });
            };
            if value.len() != dim {
                return Err(Error::CacheShapeMismatch {
                    expected: (num_edges, dim),
                    found: (num_edges, value.len()),
                });
            }
            cache.write(edge, dir, value.data(), 0)?;
        }
        Ok(cache)
    }
}

/// Writes the item→user block `ca` (one row per visible edge) back to the
/// cache, and to the user→item slot as well when attention is bidirectional.
pub(crate) fn write_back(
    cache: &mut EdgeCaCache,
    visible: &[usize],
    ca: &Tensor,
    bidirectional: bool,
    stamp: u64,
) -> Result<()> {
    for (r, &edge) in visible.iter().enumerate() {
        cache.write(edge, Direction::ToUser, ca.row(r), stamp)?;
        if bidirectional {
            cache.write(edge, Direction::ToItem, ca.row(r), stamp)?;
        }
    }
    Ok(())
}

/// Forward pass whose earlier layers read attention vectors from `cache`;
/// the final layer's fresh vectors are written back with `stamp`.
pub fn cached_forward(
    model: &Model,
    cg: &ContentGraph,
    params: &ParamStore,
    cache: &mut EdgeCaCache,
    visible: &[usize],
    mut mode: Mode,
    stamp: u64,
) -> Result<LayerState> {
    let visible = &*canonical_visible(visible);
    let mut tape = Tape::new();
    let mut bind = Binding::new(params);
    let pass = run_layers(
        &mut tape,
        &mut bind,
        model,
        cg,
        params,
        visible,
        &mut mode,
        CaSource::Cached(cache),
        true,
    )?;
    let state = collect_state(&tape, model, cg, params, visible, &pass);
    if let Some(ca) = &state.final_ca {
        write_back(cache, visible, ca, model.config.bidirectional_ca, stamp)?;
    }
    Ok(state)
}

/// A uniform item sample `V′_M`, its neighbours `N(V′_M)` and the induced
/// edges `E′`, all ascending.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubgraphSample {
    pub items: Vec<usize>,
    pub users: Vec<usize>,
    pub edges: Vec<usize>,
}

impl SubgraphSample {
    /// The subgraph induced by a given item set.
    pub fn from_items(graph: &BipartiteGraph, mut items: Vec<usize>) -> Result<SubgraphSample> {
        items.sort_unstable();
        items.dedup();
        let mut edges = Vec::new();
        for &m in &items {
            if m >= graph.num_items() {
                return Err(Error::IndexOutOfRange {
                    what: "item",
                    index: m,
                    bound: graph.num_items(),
                });
            }
            edges.extend_from_slice(graph.item_edges(m));
        }
        edges.sort_unstable();
        let mut users: Vec<usize> = edges.iter().map(|&e| graph.edge(e).user).collect();
        users.sort_unstable();
        users.dedup();
        Ok(SubgraphSample { items, users, edges })
    }
}

/// Samples `item_sample_size` items uniformly without replacement.
pub fn sample_subgraph(graph: &BipartiteGraph, item_sample_size: usize, seed: u64) -> Result<SubgraphSample> {
    if item_sample_size == 0 || item_sample_size > graph.num_items() {
        return Err(Error::SampleTooLarge {
            requested: item_sample_size,
            available: graph.num_items(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let items = rand::seq::index::sample(&mut rng, graph.num_items(), item_sample_size).into_vec();
    SubgraphSample::from_items(graph, items)
}

/// Refreshes the cache entries of the sampled edges only, by an evaluation
/// pass over the sampled subgraph.
pub fn cached_epoch_with_sampling(
    model: &Model,
    cg: &ContentGraph,
    params: &ParamStore,
    cache: &mut EdgeCaCache,
    sample: &SubgraphSample,
    stamp: u64,
) -> Result<LayerState> {
    cached_forward(model, cg, params, cache, &sample.edges, Mode::Eval, stamp)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn write_read_and_stamps() {
        let mut c = EdgeCaCache::new(3, 2);
        assert_eq!(c.get(1, Direction::ToItem).unwrap(), &[0.0, 0.0]);
        c.write(1, Direction::ToItem, &[1.5, -2.0], 7).unwrap();
        assert_eq!(c.get(1, Direction::ToItem).unwrap(), &[1.5, -2.0]);
        assert_eq!(c.get(1, Direction::ToUser).unwrap(), &[0.0, 0.0]);
        assert_eq!(c.stamp(1, Direction::ToItem), Some(7));
        assert_eq!(c.written_at(7), vec![(1, Direction::ToItem)]);
        assert!(matches!(
            c.write(0, Direction::ToUser, &[1.0], 1),
            Err(Error::CacheShapeMismatch { .. })
        ));
        assert!(c.get(3, Direction::ToUser).is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cache.ckpt");
        let mut c = EdgeCaCache::new(4, 3);
        c.write(2, Direction::ToUser, &[0.1, f64::MIN_POSITIVE, -7.25], 3).unwrap();
        c.write(0, Direction::ToItem, &[1e300, -0.0, 2.0], 3).unwrap();
        c.save(&p).unwrap();
        let back = EdgeCaCache::load(&p, 4, 3).unwrap();
        assert!(back.values_bit_eq(&c));
        assert!(matches!(EdgeCaCache::load(&p, 4, 2), Err(Error::CacheShapeMismatch { .. })));
    }

    #[test]
    fn sampling_errors_and_full_sample() {
        let g = crate::graph::build_graph(&[(0, 0, 0), (1, 1, 1), (1, 2, 0)], 2, 3, 2).unwrap();
        assert!(matches!(sample_subgraph(&g, 4, 0), Err(Error::SampleTooLarge { .. })));
        let all = sample_subgraph(&g, 3, 9).unwrap();
        assert_eq!(all.edges, vec![0, 1, 2]);
        assert_eq!(all.users, vec![0, 1]);
        assert_eq!(sample_subgraph(&g, 2, 5).unwrap(), sample_subgraph(&g, 2, 5).unwrap());
    }
}

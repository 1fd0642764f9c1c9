//! Bipartite user–item graphs with labeled edges and per-item content rows.

use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numeric::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Partition {
    User,
    Item,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId {
    pub partition: Partition,
    pub index: usize,
}

impl NodeId {
    pub fn user(index: usize) -> Self {
        NodeId {
            partition: Partition::User,
            index,
        }
    }

    pub fn item(index: usize) -> Self {
        NodeId {
            partition: Partition::Item,
            index,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct LabeledEdge {
    pub user: usize,
    pub item: usize,
    /// Zero-based label in `0..label_count`.
    pub label: usize,
}

/// An immutable bipartite graph. Edge ids are positions in the input list;
/// adjacency lists hold edge ids in increasing order.
#[derive(Debug, Clone, PartialEq)]
pub struct BipartiteGraph {
    num_users: usize,
    num_items: usize,
    label_count: usize,
    edges: Vec<LabeledEdge>,
    adj_user: Vec<Vec<usize>>,
    adj_item: Vec<Vec<usize>>,
}

/// Builds a graph from `(user, item, label)` triples.
pub fn build_graph(
    edges: &[(usize, usize, usize)],
    num_users: usize,
    num_items: usize,
    label_count: usize,
) -> Result<BipartiteGraph> {
    let mut seen = HashSet::with_capacity(edges.len());
    let mut adj_user = vec![Vec::new(); num_users];
    let mut adj_item = vec![Vec::new(); num_items];
    let mut out = Vec::with_capacity(edges.len());
    for (id, &(user, item, label)) in edges.iter().enumerate() {
        if user >= num_users {
            return Err(Error::IndexOutOfRange {
                what: "user",
                index: user,
                bound: num_users,
            });
        }
        if item >= num_items {
            return Err(Error::IndexOutOfRange {
                what: "item",
                index: item,
                bound: num_items,
            });
        }
        if label >= label_count {
            return Err(Error::LabelOutOfRange {
                label: label as i64,
                label_count,
            });
        }
        if !seen.insert((user, item)) {
            return Err(Error::DuplicateEdge { user, item });
        }
        adj_user[user].push(id);
        adj_item[item].push(id);
        out.push(LabeledEdge { user, item, label });
    }
    Ok(BipartiteGraph {
        num_users,
        num_items,
        label_count,
        edges: out,
        adj_user,
        adj_item,
    })
}

impl BipartiteGraph {
    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn num_nodes(&self) -> usize {
        self.num_users + self.num_items
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn label_count(&self) -> usize {
        self.label_count
    }

    pub fn edges(&self) -> &[LabeledEdge] {
        &self.edges
    }

    pub fn edge(&self, id: usize) -> &LabeledEdge {
        &self.edges[id]
    }

    /// Incident edge ids of user `u`, ascending.
    pub fn user_edges(&self, u: usize) -> &[usize] {
        &self.adj_user[u]
    }

    /// Incident edge ids of item `m`, ascending.
    pub fn item_edges(&self, m: usize) -> &[usize] {
        &self.adj_item[m]
    }

    pub fn degree(&self, n: NodeId) -> Result<usize> {
        Ok(self.incident(n)?.len())
    }

    pub fn density(&self) -> f64 {
        self.edges.len() as f64 / (self.num_users as f64 * self.num_items as f64)
    }

    fn incident(&self, n: NodeId) -> Result<&[usize]> {
        let (adj, what) = match n.partition {
            Partition::User => (&self.adj_user, "user"),
            Partition::Item => (&self.adj_item, "item"),
        };
        adj.get(n.index)
            .map(Vec::as_slice)
            .ok_or(Error::IndexOutOfRange {
                what,
                index: n.index,
                bound: adj.len(),
            })
    }

    /// Opposite-partition endpoints of `n`'s edges, sorted by index.
    pub fn neighbors(&self, n: NodeId) -> Result<Vec<(NodeId, usize)>> {
        let mut out: Vec<(NodeId, usize)> = self
            .incident(n)?
            .iter()
            .map(|&id| {
                let e = &self.edges[id];
                match n.partition {
                    Partition::User => (NodeId::item(e.item), id),
                    Partition::Item => (NodeId::user(e.user), id),
                }
            })
            .collect();
        out.sort_unstable();
        Ok(out)
    }

    /// The same graph with every label replaced by `f(edge id, edge)`.
    pub fn relabeled(&self, mut f: impl FnMut(usize, &LabeledEdge) -> usize) -> Result<BipartiteGraph> {
        let triples: Vec<_> = self
            .edges
            .iter()
            .enumerate()
            .map(|(id, e)| (e.user, e.item, f(id, e)))
            .collect();
        build_graph(&triples, self.num_users, self.num_items, self.label_count)
    }
}

/// Per-item content matrices of a shared width `dim`, each truncated to at
/// most `truncation` rows.
#[derive(Debug, Clone, PartialEq)]
pub struct ContentStore {
    dim: usize,
    truncation: usize,
    vectors: BTreeMap<usize, Tensor>,
}

impl ContentStore {
    pub fn new(dim: usize, truncation: usize) -> Self {
        ContentStore {
            dim,
            truncation,
            vectors: BTreeMap::new(),
        }
    }

    /// Stores `rows` for `item`, keeping the first `truncation` rows. An
    /// empty matrix leaves the item content-less.
    pub fn insert(&mut self, item: usize, rows: Tensor) -> Result<()> {
        if rows.cols() != self.dim && !rows.is_empty() {
            return Err(Error::DimensionMismatch {
                item,
                expected: self.dim,
                found: rows.cols(),
            });
        }
        if rows.rows() == 0 {
            self.vectors.remove(&item);
            return Ok(());
        }
        let keep = rows.rows().min(self.truncation);
        let rows = if keep < rows.rows() {
            rows.slice_rows(0, keep)
        } else {
            rows
        };
        self.vectors.insert(item, rows);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn truncation(&self) -> usize {
        self.truncation
    }

    pub fn get(&self, item: usize) -> Option<&Tensor> {
        self.vectors.get(&item)
    }

    /// Number of content rows of `item`, zero when content-less.
    pub fn num_rows(&self, item: usize) -> usize {
        self.vectors.get(&item).map_or(0, Tensor::rows)
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &Tensor)> {
        self.vectors.iter().map(|(&k, v)| (k, v))
    }

    /// Number of items with content.
    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }
}

/// A graph together with its content, stacked into one matrix for batched
/// attention.
#[derive(Debug, Clone)]
pub struct ContentGraph {
    pub graph: BipartiteGraph,
    pub content: ContentStore,
    stacked: Tensor,
    ranges: Vec<(usize, usize)>,
}

pub fn attach_content(graph: BipartiteGraph, content: ContentStore) -> Result<ContentGraph> {
    if let Some((item, _)) = content.iter().find(|(i, _)| *i >= graph.num_items()) {
        return Err(Error::UnknownItem(item));
    }
    let total: usize = content.iter().map(|(_, t)| t.rows()).sum();
    let mut data = Vec::with_capacity(total * content.dim());
    let mut ranges = vec![(0, 0); graph.num_items()];
    let mut row = 0;
    for (item, t) in content.iter() {
        data.extend_from_slice(t.data());
        ranges[item] = (row, row + t.rows());
        row += t.rows();
    }
    let stacked = Tensor::from_vec(total, content.dim(), data)?;
    Ok(ContentGraph {
        graph,
        content,
        stacked,
        ranges,
    })
}

impl ContentGraph {
    /// All content rows, item by item in ascending item order.
    pub fn stacked(&self) -> &Tensor {
        &self.stacked
    }

    /// Rows of [`ContentGraph::stacked`] belonging to `item`; empty when
    /// content-less.
    pub fn content_range(&self, item: usize) -> (usize, usize) {
        self.ranges[item]
    }

    pub fn has_content(&self, item: usize) -> bool {
        let (s, e) = self.ranges[item];
        e > s
    }

    /// The same content attached to a different graph over the same nodes.
    pub fn with_graph(&self, graph: BipartiteGraph) -> Result<ContentGraph> {
        if graph.num_items() != self.graph.num_items() {
            return Err(Error::shape(
                "with_graph items",
                (self.graph.num_items(), 1),
                (graph.num_items(), 1),
            ));
        }
        Ok(ContentGraph {
            graph,
            content: self.content.clone(),
            stacked: self.stacked.clone(),
            ranges: self.ranges.clone(),
        })
    }
}

/// Disjoint train/validation/test edge-id sets, each sorted ascending.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

pub const MIN_SPLIT_EDGES: usize = 10;

/// Seeded random split by `ratio` (train, val, test). Validation and test
/// receive `round(n · share)` edges; training takes the remainder.
pub fn split_edges(graph: &BipartiteGraph, ratio: (u32, u32, u32), seed: u64) -> Result<DatasetSplit> {
    let n = graph.num_edges();
    if n < MIN_SPLIT_EDGES {
        return Err(Error::TooFewEdges {
            required: MIN_SPLIT_EDGES,
            found: n,
        });
    }
    let total = f64::from(ratio.0 + ratio.1 + ratio.2);
    if total == 0.0 {
        return Err(Error::InvalidConfig("split ratio sums to zero".into()));
    }
    let n_val = (n as f64 * f64::from(ratio.1) / total).round() as usize;
    let n_test = (n as f64 * f64::from(ratio.2) / total).round() as usize;
    let mut ids: Vec<usize> = (0..n).collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut val = ids[..n_val].to_vec();
    let mut test = ids[n_val..n_val + n_test].to_vec();
    let mut train = ids[n_val + n_test..].to_vec();
    val.sort_unstable();
    test.sort_unstable();
    train.sort_unstable();
    Ok(DatasetSplit { train, val, test })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn single_edge_graph() {
        let g = build_graph(&[(0, 0, 1)], 1, 1, 2).unwrap();
        assert_eq!(g.degree(NodeId::user(0)).unwrap(), 1);
        assert_eq!(g.degree(NodeId::item(0)).unwrap(), 1);
        assert_eq!(g.density(), 1.0);
    }

    #[test]
    fn construction_errors() {
        assert!(matches!(
            build_graph(&[(0, 0, 1), (0, 0, 0)], 1, 1, 2),
            Err(Error::DuplicateEdge { user: 0, item: 0 })
        ));
        assert!(matches!(
            build_graph(&[(1, 0, 0)], 1, 1, 2),
            Err(Error::IndexOutOfRange { what: "user", .. })
        ));
        assert!(matches!(
            build_graph(&[(0, 3, 0)], 1, 1, 2),
            Err(Error::IndexOutOfRange { what: "item", .. })
        ));
        assert!(matches!(
            build_graph(&[(0, 0, 2)], 1, 1, 2),
            Err(Error::LabelOutOfRange { label: 2, .. })
        ));
    }

    #[test]
    fn neighbors_are_sorted_by_index() {
        let g = build_graph(&[(0, 5, 0), (1, 2, 0), (0, 2, 1)], 2, 6, 2).unwrap();
        let n = g.neighbors(NodeId::user(0)).unwrap();
        assert_eq!(n, vec![(NodeId::item(2), 2), (NodeId::item(5), 0)]);
        assert!(g.neighbors(NodeId::item(0)).unwrap().is_empty());
        assert!(g.neighbors(NodeId::user(2)).is_err());
    }

    #[test]
    fn content_attachment() {
        let g = build_graph(&[(0, 0, 0), (0, 1, 1)], 1, 3, 2).unwrap();
        let mut cs = ContentStore::new(2, 2);
        cs.insert(1, Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]).unwrap())
            .unwrap();
        assert_eq!(cs.num_rows(1), 2);
        assert!(matches!(
            cs.insert(0, Tensor::row_vector(&[1.0, 2.0, 3.0])),
            Err(Error::DimensionMismatch { item: 0, expected: 2, found: 3 })
        ));
        let cg = attach_content(g.clone(), cs.clone()).unwrap();
        assert_eq!(cg.content_range(1), (0, 2));
        assert!(!cg.has_content(0));

        let mut bad = ContentStore::new(2, 2);
        bad.insert(7, Tensor::row_vector(&[1.0, 0.0])).unwrap();
        assert!(matches!(attach_content(g.clone(), bad), Err(Error::UnknownItem(7))));

        let empty = attach_content(g, ContentStore::new(2, 2)).unwrap();
        assert_eq!(empty.stacked().rows(), 0);
    }

    #[test]
    fn split_sizes() {
        let triples: Vec<_> = (0..10).map(|i| (i, 0, 0)).collect();
        let g = build_graph(&triples, 10, 1, 1).unwrap();
        let s = split_edges(&g, (8, 1, 1), 3).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (8, 1, 1));
        assert_eq!(s, split_edges(&g, (8, 1, 1), 3).unwrap());

        let small = build_graph(&triples[..9], 10, 1, 1).unwrap();
        assert!(matches!(
            split_edges(&small, (8, 1, 1), 0),
            Err(Error::TooFewEdges { required: 10, found: 9 })
        ));
    }

    fn arb_edges() -> impl Strategy<Value = (usize, usize, Vec<(usize, usize, usize)>)> {
        (1usize..12, 1usize..12).prop_flat_map(|(nu, nm)| {
            let pairs = prop::collection::btree_set((0..nu, 0..nm), 0..=(nu * nm).min(60));
            (Just(nu), Just(nm), pairs, any::<u64>()).prop_map(|(nu, nm, set, salt)| {
                let edges = set
                    .into_iter()
                    .enumerate()
                    .map(|(i, (u, m))| (u, m, ((i as u64 ^ salt) % 3) as usize))
                    .collect();
                (nu, nm, edges)
            })
        })
    }

    proptest! {
        #[test]
        fn handshake_and_adjacency_inverse((nu, nm, edges) in arb_edges()) {
            let g = build_graph(&edges, nu, nm, 3).unwrap();
            let su: usize = (0..nu).map(|u| g.user_edges(u).len()).sum();
            let sm: usize = (0..nm).map(|m| g.item_edges(m).len()).sum();
            prop_assert_eq!(su, edges.len());
            prop_assert_eq!(sm, edges.len());

            let mut rebuilt = Vec::new();
            for u in 0..nu {
                for (n, id) in g.neighbors(NodeId::user(u)).unwrap() {
                    rebuilt.push((id, (u, n.index, g.edge(id).label)));
                }
            }
            rebuilt.sort_unstable();
            let rebuilt: Vec<_> = rebuilt.into_iter().map(|x| x.1).collect();
            prop_assert_eq!(rebuilt, edges);
        }

        #[test]
        fn split_partitions_edge_ids(n in 10usize..400, seed in any::<u64>()) {
            let triples: Vec<_> = (0..n).map(|i| (i % 20, i / 20, 0)).collect();
            let g = build_graph(&triples, 20, n / 20 + 1, 1).unwrap();
            let s = split_edges(&g, (8, 1, 1), seed).unwrap();
            let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
            for (part, share) in [(&s.train, 0.8), (&s.val, 0.1), (&s.test, 0.1)] {
                prop_assert!((part.len() as f64 - n as f64 * share).abs() <= 1.0);
            }
        }
    }
}

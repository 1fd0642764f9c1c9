//! The focus-word benchmark.
//!
//! Every item holds a random subset of a small vocabulary and every user has
//! one hidden focus word. An edge is labeled 1 exactly when the item contains
//! its user's focus word, so a model must look inside item content, and do so
//! differently for each user, to predict well.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{attach_content, build_graph, BipartiteGraph, ContentGraph, ContentStore};
use crate::numeric::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub num_users: usize,
    pub num_items: usize,
    pub num_edges: usize,
    pub vocab_size: usize,
    pub word_prob: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            num_users: 1000,
            num_items: 1000,
            num_edges: 100_000,
            vocab_size: 5,
            word_prob: 0.5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub graph: BipartiteGraph,
    /// One one-hot row per item word, in ascending word order.
    pub content: ContentStore,
    pub focus: Vec<usize>,
    pub item_words: Vec<Vec<usize>>,
}

impl SyntheticDataset {
    pub fn content_graph(&self) -> Result<ContentGraph> {
        attach_content(self.graph.clone(), self.content.clone())
    }
}

/// `1` iff `focus` is among `item_words`.
pub fn ground_truth_label(item_words: &[usize], focus: usize) -> usize {
    usize::from(item_words.contains(&focus))
}

/// Generates the dataset. Random draws happen in a fixed order: item words,
/// then focus words, then the edge sample.
pub fn generate(cfg: &SyntheticConfig) -> Result<SyntheticDataset> {
    if cfg.vocab_size == 0 {
        return Err(Error::InvalidConfig("synthetic.vocab_size must be at least 1".into()));
    }
    if !(cfg.word_prob > 0.0 && cfg.word_prob < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "synthetic.word_prob = {} is outside (0, 1)",
            cfg.word_prob
        )));
    }
    let capacity = cfg.num_users.saturating_mul(cfg.num_items);
    if cfg.num_edges > capacity {
        return Err(Error::TooManyEdges {
            requested: cfg.num_edges,
            capacity,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let item_words: Vec<Vec<usize>> = (0..cfg.num_items)
        .map(|_| {
            (0..cfg.vocab_size)
                .filter(|_| rng.random::<f64>() < cfg.word_prob)
                .collect()
        })
        .collect();
    let focus: Vec<usize> = (0..cfg.num_users)
        .map(|_| rng.random_range(0..cfg.vocab_size))
        .collect();
    let mut picks = rand::seq::index::sample(&mut rng, capacity, cfg.num_edges).into_vec();
    picks.sort_unstable();
    let triples: Vec<(usize, usize, usize)> = picks
        .into_iter()
        .map(|p| {
            let (u, m) = (p / cfg.num_items, p % cfg.num_items);
            (u, m, ground_truth_label(&item_words[m], focus[u]))
        })
        .collect();
    let graph = build_graph(&triples, cfg.num_users, cfg.num_items, 2)?;

    let mut content = ContentStore::new(cfg.vocab_size, cfg.vocab_size);
    for (m, words) in item_words.iter().enumerate() {
        if words.is_empty() {
            continue;
        }
        let mut rows = Tensor::zeros(words.len(), cfg.vocab_size);
        for (r, &w) in words.iter().enumerate() {
            rows.set(r, w, 1.0);
        }
        content.insert(m, rows)?;
    }
    Ok(SyntheticDataset {
        graph,
        content,
        focus,
        item_words,
    })
}

/// Writes `user_id<TAB>focus_word` lines.
pub fn write_focus_file(path: &Path, focus: &[usize]) -> Result<()> {
    let mut s = String::new();
    for (u, f) in focus.iter().enumerate() {
        let _ = writeln!(s, "{u}\t{f}");
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Reads a focus file into a per-user vector; users must be listed as
/// `0..n` without gaps.
pub fn read_focus_file(path: &Path) -> Result<Vec<usize>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let err = |message: String| Error::Parse {
            file: path.display().to_string(),
            line: ln + 1,
            message,
        };
        let (u, f) = line
            .split_once('\t')
            .ok_or_else(|| err("expected `user_id<TAB>focus_word`".into()))?;
        let u: usize = u.trim().parse().map_err(|_| err(format!("bad user id `{u}`")))?;
        let f: usize = f.trim().parse().map_err(|_| err(format!("bad focus word `{f}`")))?;
        if u != out.len() {
            return Err(err(format!("expected user {}, found {u}", out.len())));
        }
        out.push(f);
    }
    Ok(out)
}

/// Recovers each item's word set from one-hot content rows.
pub fn item_words_from_content(content: &ContentStore, num_items: usize) -> Vec<Vec<usize>> {
    (0..num_items)
        .map(|m| match content.get(m) {
            Some(z) => (0..z.rows())
                .filter_map(|r| z.row(r).iter().position(|&v| v == 1.0))
                .collect(),
            None => Vec::new(),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticConfig {
        SyntheticConfig {
            num_users: 40,
            num_items: 30,
            num_edges: 300,
            seed: 11,
            ..SyntheticConfig::default()
        }
    }

    #[test]
    fn labels_rule() {
        assert_eq!(ground_truth_label(&[0, 2], 2), 1);
        assert_eq!(ground_truth_label(&[], 3), 0);
        assert_eq!(ground_truth_label(&[0, 1, 2, 3, 4], 4), 1);
    }

    #[test]
    fn generated_dataset_is_consistent() {
        let ds = generate(&small()).unwrap();
        assert_eq!(ds.graph.num_edges(), 300);
        for e in ds.graph.edges() {
            assert_eq!(e.label, ground_truth_label(&ds.item_words[e.item], ds.focus[e.user]));
        }
        for (m, words) in ds.item_words.iter().enumerate() {
            assert_eq!(ds.content.num_rows(m), words.len());
            if let Some(z) = ds.content.get(m) {
                for (r, &w) in words.iter().enumerate() {
                    let mut one_hot = vec![0.0; 5];
                    one_hot[w] = 1.0;
                    assert_eq!(z.row(r), one_hot.as_slice());
                }
            }
        }
        assert_eq!(item_words_from_content(&ds.content, 30), ds.item_words);
    }

    #[test]
    fn regeneration_is_bit_identical() {
        let a = generate(&small()).unwrap();
        let b = generate(&small()).unwrap();
        assert_eq!(a.graph, b.graph);
        assert_eq!(a.content, b.content);
        assert_eq!(a.focus, b.focus);
        let c = generate(&SyntheticConfig { seed: 12, ..small() }).unwrap();
        assert_ne!(a.graph, c.graph);
    }

    #[test]
    fn degenerate_and_invalid_configs() {
        let all_ones = generate(&SyntheticConfig {
            vocab_size: 1,
            word_prob: 1.0 - 1e-12,
            ..small()
        })
        .unwrap();
        assert!(all_ones.graph.edges().iter().all(|e| e.label == 1));
        assert!(matches!(
            generate(&SyntheticConfig { num_edges: 40 * 30 + 1, ..small() }),
            Err(Error::TooManyEdges { .. })
        ));
        assert!(generate(&SyntheticConfig { word_prob: 1.0, ..small() }).is_err());
    }

    #[test]
    fn focus_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("focus.tsv");
        write_focus_file(&p, &[3, 0, 4]).unwrap();
        assert_eq!(read_focus_file(&p).unwrap(), vec![3, 0, 4]);
    }
}

//! Text formats for edges and item content.
//!
//! Edge file, one edge per line:
//!
//! ```text
//! user_id<TAB>item_id<TAB>label
//! ```
//!
//! Content file, a `D=<int> T=<int>` header then one line per content row,
//! with each item's rows contiguous and numbered from zero:
//!
//! ```text
//! D=3 T=64
//! 4<TAB>0<TAB>0.5 0 1
//! 4<TAB>1<TAB>0 0 1
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::graph::{BipartiteGraph, ContentStore};
use crate::numeric::Tensor;

/// Raw `(user, item, label)` rows as written in the file.
pub fn read_edge_file(path: &Path) -> Result<Vec<(usize, usize, i64)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file = path.display().to_string();
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |message: String| Error::Parse {
            file: file.clone(),
            line: ln + 1,
            message,
        };
        let fields: Vec<&str> = line.split('\t').collect();
        let [u, m, l] = fields[..] else {
            return Err(err(format!("expected 3 tab-separated fields, found {}", fields.len())));
        };
        let u = u.trim().parse().map_err(|_| err(format!("bad user id `{u}`")))?;
        let m = m.trim().parse().map_err(|_| err(format!("bad item id `{m}`")))?;
        let l = l.trim().parse().map_err(|_| err(format!("bad label `{l}`")))?;
        out.push((u, m, l));
    }
    Ok(out)
}

/// Writes the graph's edges with `label_offset` added back to each label.
pub fn write_edge_file(path: &Path, graph: &BipartiteGraph, label_offset: i64) -> Result<()> {
    let mut s = String::with_capacity(graph.num_edges() * 12);
    for e in graph.edges() {
        let _ = writeln!(s, "{}\t{}\t{}", e.user, e.item, e.label as i64 + label_offset);
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn read_content_file(path: &Path) -> Result<ContentStore> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file = path.display().to_string();
    let err = |line: usize, message: String| Error::Parse {
        file: file.clone(),
        line,
        message,
    };
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or_else(|| err(1, "missing `D=<int> T=<int>` header".into()))?;
    let mut dim = None;
    let mut trunc = None;
    for tok in header.split_whitespace() {
        match tok.split_once('=') {
            Some(("D", v)) => dim = v.parse::<usize>().ok(),
            Some(("T", v)) => trunc = v.parse::<usize>().ok(),
            _ => return Err(err(1, format!("unexpected header token `{tok}`"))),
        }
    }
    let (Some(dim), Some(trunc)) = (dim, trunc) else {
        return Err(err(1, format!("header `{header}` must be `D=<int> T=<int>`")));
    };
    if trunc == 0 {
        return Err(err(1, "T must be at least 1".into()));
    }

    let mut store = ContentStore::new(dim, trunc);
    let mut current: Option<(usize, Vec<Vec<f64>>)> = None;
    let mut finished = std::collections::HashSet::new();
    let flush = |store: &mut ContentStore, cur: Option<(usize, Vec<Vec<f64>>)>| -> Result<()> {
        if let Some((item, rows)) = cur {
            store.insert(item, Tensor::from_rows(&rows)?)?;
        }
        Ok(())
    };
    for (ln, line) in lines {
        let ln = ln + 1;
        let fields: Vec<&str> = line.trim_end_matches('\r').split('\t').collect();
        let [item, row, values] = fields[..] else {
            return Err(err(ln, format!("expected 3 tab-separated fields, found {}", fields.len())));
        };
        let item: usize = item.trim().parse().map_err(|_| err(ln, format!("bad item id `{item}`")))?;
        let row: usize = row.trim().parse().map_err(|_| err(ln, format!("bad row index `{row}`")))?;
        let values = values
            .split_whitespace()
            .map(|v| v.parse::<f64>().map_err(|_| err(ln, format!("bad value `{v}`"))))
            .collect::<Result<Vec<f64>>>()?;
        if values.len() != dim {
            return Err(Error::DimensionMismatch {
                item,
                expected: dim,
                found: values.len(),
            });
        }
        if current.as_ref().map(|c| c.0) != Some(item) {
            if finished.contains(&item) {
                return Err(err(ln, format!("rows of item {item} are not contiguous")));
            }
            let prev = current.take();
            if let Some((p, _)) = &prev {
                finished.insert(*p);
            }
            flush(&mut store, prev)?;
            current = Some((item, Vec::new()));
        }
        let (_, rows) = current.as_mut().expect("set above");
        if row != rows.len() {
            return Err(err(ln, format!("item {item}: expected row {}, found {row}", rows.len())));
        }
        rows.push(values);
    }
    flush(&mut store, current)?;
    Ok(store)
}

pub fn write_content_file(path: &Path, content: &ContentStore) -> Result<()> {
    let mut s = format!("D={} T={}\n", content.dim(), content.truncation());
    for (item, rows) in content.iter() {
        for r in 0..rows.rows() {
            let vals: Vec<String> = rows.row(r).iter().map(|v| v.to_string()).collect();
            let _ = writeln!(s, "{item}\t{r}\t{}", vals.join(" "));
        }
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::build_graph;

    #[test]
    fn content_round_trip_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("content.tsv");
        fs::write(&p, "D=2 T=2\n3\t0\t0.1 1e-3\n3\t1\t-2 0\n3\t2\t5 5\n0\t0\t1 1\n").unwrap();
        let cs = read_content_file(&p).unwrap();
        assert_eq!(cs.num_rows(3), 2);
        assert_eq!(cs.get(3).unwrap().data(), &[0.1, 1e-3, -2.0, 0.0]);
        let q = dir.path().join("again.tsv");
        write_content_file(&q, &cs).unwrap();
        assert_eq!(read_content_file(&q).unwrap(), cs);
    }

    #[test]
    fn content_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.tsv");
        let cases = [
            ("D=2\n", "ParseError"),
            ("D=2 T=4\n0\t0\t1 2 3\n", "DimensionMismatch"),
            ("D=1 T=4\n0\t1\t1\n", "ParseError"),
            ("D=1 T=4\n0\t0\t1\n1\t0\t1\n0\t1\t1\n", "ParseError"),
        ];
        for (text, kind) in cases {
            fs::write(&p, text).unwrap();
            assert_eq!(read_content_file(&p).unwrap_err().kind(), kind, "{text:?}");
        }
    }

    #[test]
    fn edge_round_trip_with_offset() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("edges.tsv");
        let g = build_graph(&[(0, 1, 0), (1, 0, 4)], 2, 2, 5).unwrap();
        write_edge_file(&p, &g, 1).unwrap();
        assert_eq!(read_edge_file(&p).unwrap(), vec![(0, 1, 1), (1, 0, 5)]);
        fs::write(&p, "0\t1\n").unwrap();
        assert!(matches!(read_edge_file(&p), Err(Error::Parse { line: 1, .. })));
    }
}

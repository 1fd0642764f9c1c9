//! Scalar metrics, degree-bucketed evaluation and attention statistics.

use crate::error::{Error, Result};
use crate::model::{AttentionRecord, Task};

fn check_lengths(a: usize, b: usize, ctx: &str) -> Result<()> {
    if a != b {
        return Err(Error::shape(ctx, (a, 1), (b, 1)));
    }
    if a == 0 {
        return Err(Error::EmptyInput);
    }
    Ok(())
}

pub fn rmse(predictions: &[f64], labels: &[f64]) -> Result<f64> {
    check_lengths(predictions.len(), labels.len(), "rmse")?;
    let sq: f64 = predictions.iter().zip(labels).map(|(p, y)| (p - y) * (p - y)).sum();
    Ok((sq / predictions.len() as f64).sqrt())
}

/// Fraction of predictions on the same side of `0.5` as their label; a
/// score of exactly `0.5` counts as positive.
pub fn accuracy(scores: &[f64], labels: &[f64]) -> Result<f64> {
    check_lengths(scores.len(), labels.len(), "accuracy")?;
    let hits = scores
        .iter()
        .zip(labels)
        .filter(|(s, y)| (**s >= 0.5) == (**y >= 0.5))
        .count();
    Ok(hits as f64 / scores.len() as f64)
}

fn positives(labels: &[f64]) -> Result<usize> {
    let pos = labels.iter().filter(|&&y| y >= 0.5).count();
    if pos == 0 || pos == labels.len() {
        return Err(Error::SingleClass);
    }
    Ok(pos)
}

/// Indices sorted by descending score, grouped into runs of equal scores.
fn tie_groups(scores: &[f64]) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for i in order {
        match groups.last_mut() {
            Some(g) if scores[g[0]] == scores[i] => g.push(i),
            _ => groups.push(vec![i]),
        }
    }
    groups
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half.
pub fn auroc(scores: &[f64], labels: &[f64]) -> Result<f64> {
    check_lengths(scores.len(), labels.len(), "auroc")?;
    let pos = positives(labels)?;
    let neg = labels.len() - pos;
    // Negatives ranked strictly below, accumulated from the bottom up.
    let mut wins = 0.0;
    let mut neg_below = 0usize;
    for group in tie_groups(scores).iter().rev() {
        let p = group.iter().filter(|&&i| labels[i] >= 0.5).count();
        let n = group.len() - p;
        wins += p as f64 * (neg_below as f64 + 0.5 * n as f64);
        neg_below += n;
    }
    Ok(wins / (pos as f64 * neg as f64))
}

/// Area under the precision–recall step curve: the sum over thresholds of
/// precision times the recall gained there. Tied scores form one threshold.
pub fn aupr(scores: &[f64], labels: &[f64]) -> Result<f64> {
    check_lengths(scores.len(), labels.len(), "aupr")?;
    let pos = positives(labels)?;
    let (mut tp, mut seen, mut area) = (0usize, 0usize, 0.0);
    for group in tie_groups(scores) {
        let p = group.iter().filter(|&&i| labels[i] >= 0.5).count();
        tp += p;
        seen += group.len();
        area += (tp as f64 / seen as f64) * p as f64;
    }
    // Rounding in the running sum can push a perfect ranking past 1.
    Ok((area / pos as f64).min(1.0))
}

/// Metrics of one prediction set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MetricBundle {
    Binary {
        accuracy: f64,
        /// Absent when the labels hold a single class.
        auroc: Option<f64>,
        aupr: Option<f64>,
        n: usize,
    },
    Ordinal {
        rmse: f64,
        n: usize,
    },
}

impl MetricBundle {
    pub fn compute(task: Task, predictions: &[f64], labels: &[f64]) -> Result<MetricBundle> {
        let absent_if_single = |r: Result<f64>| match r {
            Err(Error::SingleClass) => Ok(None),
            other => other.map(Some),
        };
        Ok(match task {
            Task::Binary => MetricBundle::Binary {
                accuracy: accuracy(predictions, labels)?,
                auroc: absent_if_single(auroc(predictions, labels))?,
                aupr: absent_if_single(aupr(predictions, labels))?,
                n: predictions.len(),
            },
            Task::Ordinal => MetricBundle::Ordinal {
                rmse: rmse(predictions, labels)?,
                n: predictions.len(),
            },
        })
    }

    pub fn n(&self) -> usize {
        match *self {
            MetricBundle::Binary { n, .. } | MetricBundle::Ordinal { n, .. } => n,
        }
    }

    /// The headline number: accuracy or RMSE.
    pub fn primary(&self) -> f64 {
        match *self {
            MetricBundle::Binary { accuracy, .. } => accuracy,
            MetricBundle::Ordinal { rmse, .. } => rmse,
        }
    }

    /// `(name, value)` pairs; absent values are skipped.
    pub fn entries(&self) -> Vec<(&'static str, f64)> {
        match *self {
            MetricBundle::Binary {
                accuracy, auroc, aupr, ..
            } => {
                let mut v = vec![("accuracy", accuracy)];
                v.extend(auroc.map(|x| ("auroc", x)));
                v.extend(aupr.map(|x| ("aupr", x)));
                v
            }
            MetricBundle::Ordinal { rmse, .. } => vec![("rmse", rmse)],
        }
    }
}

/// A set of users selected by degree.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DegreeBucket {
    All,
    /// `lo < D ≤ hi`; `lo` is absent for the lowest bucket and `hi` for the
    /// highest.
    Range { lo: Option<usize>, hi: Option<usize> },
}

impl DegreeBucket {
    pub fn contains(&self, degree: usize) -> bool {
        match *self {
            DegreeBucket::All => true,
            DegreeBucket::Range { lo, hi } => lo.is_none_or(|l| degree > l) && hi.is_none_or(|h| degree <= h),
        }
    }

    pub fn label(&self) -> String {
        match *self {
            DegreeBucket::All => "all".into(),
            DegreeBucket::Range { lo: None, hi: None } => "all".into(),
            DegreeBucket::Range { lo: None, hi: Some(h) } => format!("D<={h}"),
            DegreeBucket::Range { lo: Some(l), hi: None } => format!("D>{l}"),
            DegreeBucket::Range { lo: Some(l), hi: Some(h) } => format!("{l}<D<={h}"),
        }
    }
}

/// `All` followed by the ranges cut at each of `edges` (ascending, deduped).
/// The default cut `[10]` gives `All`, `D≤10`, `D>10`.
pub fn degree_buckets(edges: &[usize]) -> Vec<DegreeBucket> {
    let mut cuts = edges.to_vec();
    cuts.sort_unstable();
    cuts.dedup();
    let mut out = vec![DegreeBucket::All];
    let mut lo = None;
    for &c in &cuts {
        out.push(DegreeBucket::Range { lo, hi: Some(c) });
        lo = Some(c);
    }
    out.push(DegreeBucket::Range { lo, hi: None });
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct BucketResult {
    pub bucket: DegreeBucket,
    pub count: usize,
    /// Absent for an empty bucket.
    pub metrics: Option<MetricBundle>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DegreeBucketReport {
    pub buckets: Vec<BucketResult>,
}

impl DegreeBucketReport {
    /// Whether the counts of the non-`All` buckets sum to the `All` count.
    pub fn partition_law_holds(&self) -> bool {
        let all: usize = self
            .buckets
            .iter()
            .filter(|b| b.bucket == DegreeBucket::All)
            .map(|b| b.count)
            .sum();
        let parts: usize = self
            .buckets
            .iter()
            .filter(|b| b.bucket != DegreeBucket::All)
            .map(|b| b.count)
            .sum();
        all == parts
    }
}

/// Splits predictions by the degree of their user and computes metrics per
/// bucket.
pub fn degree_bucket_eval(
    task: Task,
    predictions: &[f64],
    labels: &[f64],
    user_degrees: &[usize],
    buckets: &[DegreeBucket],
) -> Result<DegreeBucketReport> {
    check_lengths(predictions.len(), labels.len(), "degree_bucket_eval")?;
    check_lengths(predictions.len(), user_degrees.len(), "degree_bucket_eval degrees")?;
    let mut out = Vec::with_capacity(buckets.len());
    for &bucket in buckets {
        let idx: Vec<usize> = (0..predictions.len())
            .filter(|&i| bucket.contains(user_degrees[i]))
            .collect();
        let metrics = if idx.is_empty() {
            None
        } else {
            let p: Vec<f64> = idx.iter().map(|&i| predictions[i]).collect();
            let y: Vec<f64> = idx.iter().map(|&i| labels[i]).collect();
            Some(MetricBundle::compute(task, &p, &y)?)
        };
        out.push(BucketResult {
            bucket,
            count: idx.len(),
            metrics,
        });
    }
    Ok(DegreeBucketReport { buckets: out })
}

/// Summary of attention distributions on the focus-word benchmark.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionStats {
    /// Mean weight on the focus-word row where the item contains it.
    pub focus_mass: f64,
    /// `1 / n̄` over the same records, the mass a uniform distribution would
    /// give one row.
    pub uniform_share: f64,
    /// Mean `H(α) / ln n` over records whose item lacks the focus word and
    /// has at least two rows.
    pub absent_entropy: f64,
    pub present_count: usize,
    pub absent_count: usize,
}

/// `H(α) / ln n`; `1` for a single row.
pub fn normalized_entropy(alpha: &[f64]) -> f64 {
    if alpha.len() < 2 {
        return 1.0;
    }
    let h: f64 = alpha.iter().filter(|&&a| a > 0.0).map(|&a| -a * a.ln()).sum();
    h / (alpha.len() as f64).ln()
}

/// Attention statistics over `records`, whose `alpha` entries line up with
/// the ascending word sets in `item_words`.
pub fn attention_stats(
    records: &[AttentionRecord],
    focus: &[usize],
    item_words: &[Vec<usize>],
) -> Result<AttentionStats> {
    let (mut mass, mut rows, mut present) = (0.0, 0usize, 0usize);
    let (mut entropy, mut absent) = (0.0, 0usize);
    for r in records {
        let words = item_words.get(r.item).ok_or(Error::IndexOutOfRange {
            what: "item",
            index: r.item,
            bound: item_words.len(),
        })?;
        let f = *focus.get(r.user).ok_or(Error::IndexOutOfRange {
            what: "user",
            index: r.user,
            bound: focus.len(),
        })?;
        if words.len() != r.alpha.len() {
            return Err(Error::shape("attention record", (1, words.len()), (1, r.alpha.len())));
        }
        match words.iter().position(|&w| w == f) {
            Some(pos) => {
                mass += r.alpha[pos];
                rows += words.len();
                present += 1;
            }
            None if words.len() >= 2 => {
                entropy += normalized_entropy(&r.alpha);
                absent += 1;
            }
            None => {}
        }
    }
    if present == 0 || absent == 0 {
        return Err(Error::NoApplicableEdges);
    }
    Ok(AttentionStats {
        focus_mass: mass / present as f64,
        uniform_share: present as f64 / rows as f64,
        absent_entropy: entropy / absent as f64,
        present_count: present,
        absent_count: absent,
    })
}

//! Offline evaluation: AUC via rank statistics, relative improvement over a
//! base model, per-segment breakdowns, and an exact rank-sum significance
//! test for small repeated-run comparisons.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("scores and labels differ in length: {scores} vs {labels}")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("undefined metric: need at least one positive and one negative")]
    SingleClass,
    #[error("undefined metric: base AUC at chance level (0.5)")]
    BaseAtChance,
    #[error("{0}")]
    Invalid(String),
}

/// Probability that a uniformly random positive outscores a uniformly random
/// negative, ties credited 0.5. Computed from midranks in O(n log n).
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64, MetricsError> {
    if scores.len() != labels.len() {
        return Err(MetricsError::LengthMismatch {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    let n_pos = labels.iter().filter(|&&y| y).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(MetricsError::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Walk tie groups; every member gets the group's average 1-based rank.
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + 1 + j) as f64 / 2.0;
        for &k in &order[i..j] {
            if labels[k] {
                rank_sum_pos += midrank;
            }
        }
        i = j;
    }
    let np = n_pos as f64;
    let nn = n_neg as f64;
    Ok((rank_sum_pos - np * (np + 1.0) / 2.0) / (np * nn))
}

/// Relative improvement of (AUC - 0.5) over a base model, in percent.
pub fn relaimpr(auc_model: f64, auc_base: f64) -> Result<f64, MetricsError> {
    if auc_base == 0.5 {
        return Err(MetricsError::BaseAtChance);
    }
    Ok(((auc_model - 0.5) / (auc_base - 0.5) - 1.0) * 100.0)
}

/// AUC restricted to one segment of the evaluation samples.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentAuc {
    pub n_pos: usize,
    pub n_neg: usize,
    /// None when the segment lacks one of the classes.
    pub auc: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub auc: f64,
    pub n_pos: usize,
    pub n_neg: usize,
    /// Samples whose target shares the trigger's attribute.
    pub same_attr: SegmentAuc,
    /// Samples whose target does not.
    pub cross_attr: SegmentAuc,
    /// Positive/negative pairs spanning the two segments; together with the
    /// in-segment pairs these partition all n_pos * n_neg ranking pairs.
    pub cross_segment_pairs: u64,
    pub relaimpr_vs_base: Option<f64>,
}

fn segment(scores: &[f64], labels: &[bool], keep: impl Fn(usize) -> bool) -> SegmentAuc {
    let mut s = Vec::new();
    let mut y = Vec::new();
    for i in 0..scores.len() {
        if keep(i) {
            s.push(scores[i]);
            y.push(labels[i]);
        }
    }
    let n_pos = y.iter().filter(|&&v| v).count();
    let n_neg = y.len() - n_pos;
    SegmentAuc {
        n_pos,
        n_neg,
        auc: auc(&s, &y).ok(),
    }
}

/// Full report over one evaluation set. `same_attr[i]` flags whether sample
/// i's target attribute equals its trigger attribute. `base_auc` enables the
/// relative-improvement column.
pub fn evaluate(
    scores: &[f64],
    labels: &[bool],
    same_attr: &[bool],
    base_auc: Option<f64>,
) -> Result<EvalReport, MetricsError> {
    if scores.len() != same_attr.len() {
        return Err(MetricsError::Invalid(format!(
            "segment flags cover {} samples, scores cover {}",
            same_attr.len(),
            scores.len()
        )));
    }
    let overall = auc(scores, labels)?;
    let n_pos = labels.iter().filter(|&&y| y).count();
    let n_neg = labels.len() - n_pos;
    let same = segment(scores, labels, |i| same_attr[i]);
    let cross = segment(scores, labels, |i| !same_attr[i]);
    let cross_pairs = (same.n_pos * cross.n_neg + cross.n_pos * same.n_neg) as u64;
    let relaimpr_vs_base = match base_auc {
        Some(b) => Some(relaimpr(overall, b)?),
        None => None,
    };
    Ok(EvalReport {
        auc: overall,
        n_pos,
        n_neg,
        same_attr: same,
        cross_attr: cross,
        cross_segment_pairs: cross_pairs,
        relaimpr_vs_base,
    })
}

/// Exact one-sided rank-sum p-value for `a` stochastically greater than `b`.
///
/// Enumerates every assignment of the pooled midranks to group sizes
/// (|a|, |b|) and counts how often the group-a rank sum reaches the observed
/// one. Intended for small repeated-run comparisons (5 vs 5 gives 252
/// assignments); errors above 12 total observations.
pub fn rank_sum_p_value(a: &[f64], b: &[f64]) -> Result<f64, MetricsError> {
    if a.is_empty() || b.is_empty() {
        return Err(MetricsError::Invalid("both groups need observations".into()));
    }
    let n = a.len() + b.len();
    if n > 12 {
        return Err(MetricsError::Invalid(format!(
            "exact enumeration supports at most 12 observations, got {n}"
        )));
    }
    let mut pooled: Vec<(f64, bool)> = a
        .iter()
        .map(|&v| (v, true))
        .chain(b.iter().map(|&v| (v, false)))
        .collect();
    pooled.sort_by(|x, y| x.0.total_cmp(&y.0));

    let mut ranks = vec![0.0f64; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j < n && pooled[j].0 == pooled[i].0 {
            j += 1;
        }
        let midrank = (i + 1 + j) as f64 / 2.0;
        for r in ranks.iter_mut().take(j).skip(i) {
            *r = midrank;
        }
        i = j;
    }
    let observed: f64 = (0..n).filter(|&k| pooled[k].1).map(|k| ranks[k]).sum();

    // Count subsets of size |a| whose rank sum reaches the observed value.
    let k = a.len();
    let mut at_least = 0u64;
    let mut total = 0u64;
    let mut choose = vec![0usize; k];
    fn walk(
        ranks: &[f64],
        choose: &mut Vec<usize>,
        depth: usize,
        start: usize,
        partial: f64,
        observed: f64,
        at_least: &mut u64,
        total: &mut u64,
    ) {
        if depth == choose.len() {
            *total += 1;
            // Tolerance absorbs float noise in summed midranks.
            if partial >= observed - 1e-9 {
                *at_least += 1;
            }
            return;
        }
        for idx in start..ranks.len() {
            choose[depth] = idx;
            walk(
                ranks,
                choose,
                depth + 1,
                idx + 1,
                partial + ranks[idx],
                observed,
                at_least,
                total,
            );
        }
    }
    walk(&ranks, &mut choose, 0, 0, 0.0, observed, &mut at_least, &mut total);
    Ok(at_least as f64 / total as f64)
}

/// Mean and sample standard deviation (n-1); std is None for a single value.
pub fn mean_std(values: &[f64]) -> (f64, Option<f64>) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, None);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, Some(var.sqrt()))
}

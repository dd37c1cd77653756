use serde::{Deserialize, Serialize};

use crate::diffcore::{dot, Scalar, Tensor};

/// Median rank and recall at 1/5/10.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    #[serde(rename = "medR")]
    pub medr: f64,
    #[serde(rename = "R1")]
    pub r1: f64,
    #[serde(rename = "R5")]
    pub r5: f64,
    #[serde(rename = "R10")]
    pub r10: f64,
}

impl Metrics {
    /// Element-wise mean.
    pub fn mean(items: &[Metrics]) -> Metrics {
        let n = items.len() as f64;
        let avg = |f: fn(&Metrics) -> f64| items.iter().map(f).sum::<f64>() / n;
        Metrics {
            medr: avg(|m| m.medr),
            r1: avg(|m| m.r1),
            r5: avg(|m| m.r5),
            r10: avg(|m| m.r10),
        }
    }
}

/// 1-based rank of `candidates[true_index]` for `query` under dot-product
/// similarity. Only strictly more similar candidates push the rank down, so
/// ties resolve in favour of the true item.
pub fn rank_of_true<T: Scalar>(query: &[T], candidates: &Tensor<T>, true_index: usize) -> usize {
    assert!(true_index < candidates.rows(), "true index out of range");
    let target = dot(query, candidates.row(true_index));
    1 + (0..candidates.rows())
        .filter(|&j| j != true_index && dot(query, candidates.row(j)) > target)
        .count()
}

/// Median (mean of the middle pair for even counts) and recall at
/// 1, 5 and 10.
pub fn compute_metrics(ranks: &[usize]) -> Metrics {
    assert!(!ranks.is_empty(), "no ranks");
    let mut sorted = ranks.to_vec();
    sorted.sort_unstable();
    let n = sorted.len();
    let medr = if n % 2 == 1 {
        sorted[n / 2] as f64
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) as f64 / 2.0
    };
    let recall = |k: usize| sorted.iter().filter(|&&r| r <= k).count() as f64 / n as f64;
    Metrics {
        medr,
        r1: recall(1),
        r5: recall(5),
        r10: recall(10),
    }
}

/// The `k` most similar candidates as `(index, similarity)`, descending,
/// ties by index.
pub fn top_k<T: Scalar>(query: &[T], candidates: &Tensor<T>, k: usize) -> Vec<(usize, T)> {
    let mut scored: Vec<(usize, T)> = (0..candidates.rows())
        .map(|j| (j, dot(query, candidates.row(j))))
        .collect();
    scored.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.0.cmp(&b.0))
    });
    scored.truncate(k);
    scored
}

//! Reference implementations written with plain arithmetic and no calls
//! into the library.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use xmrr::diffcore::Tensor;
use xmrr::retrieval::Metrics;

pub const MARGIN: f64 = 0.3;

pub fn cos2(u: [f64; 2], v: [f64; 2]) -> f64 {
    (u[0] * v[0] + u[1] * v[1])
        / ((u[0] * u[0] + u[1] * u[1]).sqrt() * (v[0] * v[0] + v[1] * v[1]).sqrt())
}

pub fn hinge(a: [f64; 2], p: [f64; 2], n: [f64; 2]) -> f64 {
    let v = cos2(a, n) - cos2(a, p) + MARGIN;
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

pub fn batch_loss(a: &[[f64; 2]], b: &[[f64; 2]]) -> f64 {
    let n = a.len();
    let mut total = 0.0;
    for i in 0..n {
        let mut per = 0.0;
        for j in 0..n {
            if j != i {
                per += hinge(a[i], b[i], b[j]) + hinge(b[i], a[i], a[j]);
            }
        }
        total += per / (n - 1) as f64;
    }
    total / n as f64
}

pub fn unit_rows(r: &mut impl Rng, n: usize, d: usize) -> Tensor<f64> {
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(r)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / norm).collect()
        })
        .collect();
    Tensor::from_rows(&rows)
}

/// Full similarity row, sorted; rank = 1 + number of strictly larger
/// similarities among the other candidates.
pub fn rank(q: &[f64], cands: &Tensor<f64>, truth: usize) -> usize {
    let sims: Vec<f64> = (0..cands.rows())
        .map(|j| q.iter().zip(cands.row(j)).map(|(a, b)| a * b).sum())
        .collect();
    let target = sims[truth];
    let mut others: Vec<f64> = sims
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != truth)
        .map(|(_, &s)| s)
        .collect();
    others.sort_by(|a, b| b.partial_cmp(a).unwrap());
    1 + others.iter().take_while(|&&s| s > target).count()
}

pub fn metrics(ranks: &[usize]) -> Metrics {
    let mut s: Vec<f64> = ranks.iter().map(|&r| r as f64).collect();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = s.len();
    let medr = if n.is_multiple_of(2) {
        (s[n / 2 - 1] + s[n / 2]) / 2.0
    } else {
        s[n / 2]
    };
    let at = |k: f64| s.iter().filter(|&&r| r <= k).count() as f64 / n as f64;
    Metrics {
        medr,
        r1: at(1.0),
        r5: at(5.0),
        r10: at(10.0),
    }
}

pub fn rows_of(m: &Tensor<f64>, idx: &[usize]) -> Tensor<f64> {
    let rows: Vec<&[f64]> = idx.iter().map(|&i| m.row(i)).collect();
    Tensor::from_rows(&rows)
}

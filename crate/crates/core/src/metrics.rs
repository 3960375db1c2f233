//! Clustering scores against ground truth: NMI, ACC (optimal one-to-one
//! matching) and ARI.

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
pub enum MetricsError {
    #[error("label length mismatch: {pred} predicted vs {truth} true")]
    Length { pred: usize, truth: usize },
    #[error("need at least {min} samples, got {got}")]
    TooFew { min: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NmiNorm {
    #[default]
    Arithmetic,
    Geometric,
}

/// Count matrix, `pred x truth`, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Contingency {
    pub rows: usize,
    pub cols: usize,
    pub counts: Vec<u64>,
}

impl Contingency {
    pub fn at(&self, i: usize, j: usize) -> u64 {
        self.counts[i * self.cols + j]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn row_sums(&self) -> Vec<u64> {
        self.counts.chunks(self.cols).map(|r| r.iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<u64> {
        (0..self.cols).map(|j| (0..self.rows).map(|i| self.at(i, j)).sum()).collect()
    }
}

fn check(pred: &[usize], truth: &[usize], min: usize) -> Result<(), MetricsError> {
    if pred.len() != truth.len() {
        return Err(MetricsError::Length {
            pred: pred.len(),
            truth: truth.len(),
        });
    }
    if pred.len() < min {
        return Err(MetricsError::TooFew {
            min,
            got: pred.len(),
        });
    }
    Ok(())
}

/// Label ranges are taken as `max + 1` on each side.
pub fn contingency(pred: &[usize], truth: &[usize]) -> Result<Contingency, MetricsError> {
    check(pred, truth, 1)?;
    let rows = pred.iter().max().map_or(0, |m| m + 1);
    let cols = truth.iter().max().map_or(0, |m| m + 1);
    let mut counts = vec![0u64; rows * cols];
    for (&p, &t) in pred.iter().zip(truth) {
        counts[p * cols + t] += 1;
    }
    Ok(Contingency { rows, cols, counts })
}

fn entropy(counts: &[u64], n: f64) -> f64 {
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Mutual information normalized by the mean of the two entropies.
///
/// Two constant partitions are identical and score 1; a constant partition
/// against a non-constant one scores 0.
pub fn nmi(pred: &[usize], truth: &[usize], norm: NmiNorm) -> Result<f64, MetricsError> {
    let c = contingency(pred, truth)?;
    let n = c.total() as f64;
    let (rs, cs) = (c.row_sums(), c.col_sums());
    let (hu, hv) = (entropy(&rs, n), entropy(&cs, n));
    let mut mi = 0.0;
    for i in 0..c.rows {
        for j in 0..c.cols {
            let nij = c.at(i, j);
            if nij > 0 {
                let nij = nij as f64;
                mi += nij / n * (n * nij / (rs[i] as f64 * cs[j] as f64)).ln();
            }
        }
    }
    let denom = match norm {
        NmiNorm::Arithmetic => 0.5 * (hu + hv),
        NmiNorm::Geometric => (hu * hv).sqrt(),
    };
    if hu <= 0.0 && hv <= 0.0 {
        return Ok(1.0);
    }
    if denom <= 0.0 {
        return Ok(0.0);
    }
    Ok((mi / denom).clamp(0.0, 1.0))
}

/// Minimum-cost perfect matching on a square `n x n` cost matrix; returns
/// `assignment[row] = col`.
pub fn hungarian(cost: &[i64], n: usize) -> Vec<usize> {
    assert_eq!(cost.len(), n * n, "hungarian: cost must be n x n");
    // shortest augmenting path with potentials, 1-based with a sentinel column 0
    let inf = i64::MAX / 4;
    let mut u = vec![0i64; n + 1];
    let mut v = vec![0i64; n + 1];
    let mut matched = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        matched[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = matched[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[matched[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if matched[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            matched[j0] = matched[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        if matched[j] > 0 {
            assignment[matched[j] - 1] = j - 1;
        }
    }
    assignment
}

/// Best one-to-one matched fraction, via Hungarian matching on
/// `max - count` padded to a square matrix.
pub fn acc(pred: &[usize], truth: &[usize]) -> Result<f64, MetricsError> {
    let c = contingency(pred, truth)?;
    let n = c.rows.max(c.cols);
    let max = c.counts.iter().copied().max().unwrap_or(0) as i64;
    let mut cost = vec![max; n * n];
    for i in 0..c.rows {
        for j in 0..c.cols {
            cost[i * n + j] = max - c.at(i, j) as i64;
        }
    }
    let assignment = hungarian(&cost, n);
    let matched: u64 = assignment
        .iter()
        .enumerate()
        .filter(|&(i, &j)| i < c.rows && j < c.cols)
        .map(|(i, &j)| c.at(i, j))
        .sum();
    Ok(matched as f64 / c.total() as f64)
}

fn comb2(x: u64) -> f64 {
    let x = x as f64;
    x * (x - 1.0) / 2.0
}

/// Adjusted Rand index from pair counts.
pub fn ari(pred: &[usize], truth: &[usize]) -> Result<f64, MetricsError> {
    check(pred, truth, 2)?;
    let c = contingency(pred, truth)?;
    let index: f64 = c.counts.iter().map(|&x| comb2(x)).sum();
    let a: f64 = c.row_sums().into_iter().map(comb2).sum();
    let b: f64 = c.col_sums().into_iter().map(comb2).sum();
    let total = comb2(c.total());
    let expected = a * b / total;
    let max_index = 0.5 * (a + b);
    if max_index == expected {
        // both partitions all-singletons or both constant
        return Ok(1.0);
    }
    Ok((index - expected) / (max_index - expected))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub nmi: f64,
    pub acc: f64,
    pub ari: f64,
}

pub fn evaluate(pred: &[usize], truth: &[usize], norm: NmiNorm) -> Result<Scores, MetricsError> {
    Ok(Scores {
        nmi: nmi(pred, truth, norm)?,
        acc: acc(pred, truth)?,
        ari: ari(pred, truth)?,
    })
}

/// Share of samples in the most populated predicted cluster.
pub fn largest_cluster_share(pred: &[usize]) -> f64 {
    if pred.is_empty() {
        return 0.0;
    }
    let k = pred.iter().max().map_or(0, |m| m + 1);
    let mut counts = vec![0usize; k];
    for &p in pred {
        counts[p] += 1;
    }
    *counts.iter().max().unwrap_or(&0) as f64 / pred.len() as f64
}

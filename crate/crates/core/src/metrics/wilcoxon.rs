//! Two-sided Wilcoxon rank-sum test with average ranks for ties.

use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// Pooled sizes up to this use the exact permutation distribution.
pub const EXACT_MAX_POOLED: usize = 20;

/// Average 1-based ranks of the pooled sample, doubled so they stay integral.
fn doubled_ranks(pooled: &[f64]) -> (Vec<u64>, Vec<usize>) {
    let mut order: Vec<usize> = (0..pooled.len()).collect();
    order.sort_by(|&i, &j| pooled[i].total_cmp(&pooled[j]));
    let mut ranks = vec![0u64; pooled.len()];
    let mut ties = Vec::new();
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && pooled[order[end]] == pooled[order[start]] {
            end += 1;
        }
        // ranks start+1 ..= end, average doubled = start + 1 + end
        for &k in &order[start..end] {
            ranks[k] = (start + 1 + end) as u64;
        }
        if end - start > 1 {
            ties.push(end - start);
        }
        start = end;
    }
    (ranks, ties)
}

fn validate(a: &[f64], b: &[f64]) -> Result<()> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("samples", "both samples must be nonempty"));
    }
    if let Some(v) = a.iter().chain(b).find(|v| !v.is_finite()) {
        return Err(Error::invalid("samples", format!("non-finite value {v}")));
    }
    Ok(())
}

fn all_identical(a: &[f64], b: &[f64]) -> bool {
    let first = a[0];
    a.iter().chain(b).all(|&v| v == first)
}

/// Exact permutation p-value: the rank-sum of `a` against every equally
/// likely assignment of the pooled (tied) ranks, counted by dynamic programming.
pub fn wilcoxon_rank_sum_exact(a: &[f64], b: &[f64]) -> Result<f64> {
    validate(a, b)?;
    if all_identical(a, b) {
        return Ok(1.0);
    }
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let (ranks, _) = doubled_ranks(&pooled);
    let n1 = a.len();
    let observed: u64 = ranks[..n1].iter().sum();
    let max_sum: u64 = ranks.iter().sum();

    // ways[k][s]: subsets of size k with doubled rank-sum s
    let width = max_sum as usize + 1;
    let mut ways = vec![vec![0f64; width]; n1 + 1];
    ways[0][0] = 1.0;
    for &r in &ranks {
        let r = r as usize;
        for k in (1..=n1).rev() {
            let (lower, upper) = ways.split_at_mut(k);
            let prev = &lower[k - 1];
            let cur = &mut upper[0];
            for s in (r..width).rev() {
                cur[s] += prev[s - r];
            }
        }
    }
    let dist = &ways[n1];
    let total: f64 = dist.iter().sum();
    let le: f64 = dist[..=observed as usize].iter().sum();
    let ge: f64 = dist[observed as usize..].iter().sum();
    Ok((2.0 * le.min(ge) / total).min(1.0))
}

/// Normal approximation with tie-corrected variance and continuity correction.
pub fn wilcoxon_rank_sum_normal(a: &[f64], b: &[f64]) -> Result<f64> {
    validate(a, b)?;
    if all_identical(a, b) {
        return Ok(1.0);
    }
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let (ranks, ties) = doubled_ranks(&pooled);
    let (n1, n2) = (a.len() as f64, b.len() as f64);
    let n = n1 + n2;
    let w = ranks[..a.len()].iter().sum::<u64>() as f64 / 2.0;
    let mean = n1 * (n + 1.0) / 2.0;
    let tie_term: f64 = ties.iter().map(|&t| (t as f64).powi(3) - t as f64).sum();
    let var = n1 * n2 / 12.0 * ((n + 1.0) - tie_term / (n * (n - 1.0)));
    if var <= 0.0 {
        return Ok(1.0);
    }
    let z = ((w - mean).abs() - 0.5).max(0.0) / var.sqrt();
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    Ok((2.0 * normal.sf(z)).min(1.0))
}

/// Two-sided rank-sum p-value: exact for pooled size ≤ 20, normal beyond.
pub fn wilcoxon_rank_sum(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() + b.len() <= EXACT_MAX_POOLED {
        wilcoxon_rank_sum_exact(a, b)
    } else {
        wilcoxon_rank_sum_normal(a, b)
    }
}

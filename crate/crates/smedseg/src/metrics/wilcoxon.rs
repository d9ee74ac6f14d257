//! Wilcoxon rank-sum (Mann-Whitney U) test.
//!
//! Ranks use midranks for ties. For small tie-free samples
//! (`n1 + n2 <= 12`) the two-sided p-value is exact, computed from the
//! full null distribution of U (dynamic program over rank subsets);
//! otherwise the normal approximation with tie correction and continuity
//! correction is used.

use crate::stats::special::normal_cdf;

use super::MetricError;

/// Threshold on the combined sample size for exact enumeration.
pub const EXACT_LIMIT: usize = 12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PvalueMethod {
    Exact,
    NormalApprox,
}

/// Midranks of the pooled sample, returned aligned with `(x then y)`.
fn midranks(x: &[f64], y: &[f64]) -> Vec<f64> {
    let n = x.len() + y.len();
    let mut idx: Vec<usize> = (0..n).collect();
    let value = |i: usize| if i < x.len() { x[i] } else { y[i - x.len()] };
    idx.sort_by(|&a, &b| value(a).partial_cmp(&value(b)).expect("finite values"));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && value(idx[j + 1]) == value(idx[i]) {
            j += 1;
        }
        let shared = (i + j + 2) as f64 / 2.0; // ranks are 1-based
        for k in i..=j {
            ranks[idx[k]] = shared;
        }
        i = j + 1;
    }
    ranks
}

/// Number of subsets of `{1..n}` of size `k` with each possible rank sum,
/// indexed by sum. Counts fit comfortably in f64 for n <= 12.
fn rank_sum_distribution(n: usize, k: usize) -> Vec<f64> {
    let max_sum = n * (n + 1) / 2;
    // ways[c][s] over items 1..=n, built incrementally.
    let mut ways = vec![vec![0.0; max_sum + 1]; k + 1];
    ways[0][0] = 1.0;
    for item in 1..=n {
        for c in (1..=k.min(item)).rev() {
            for s in (item..=max_sum).rev() {
                let add = ways[c - 1][s - item];
                if add != 0.0 {
                    ways[c][s] += add;
                }
            }
        }
    }
    ways.pop().unwrap()
}

fn has_ties(x: &[f64], y: &[f64]) -> bool {
    let mut all: Vec<f64> = x.iter().chain(y).copied().collect();
    all.sort_by(|a, b| a.partial_cmp(b).unwrap());
    all.windows(2).any(|w| w[0] == w[1])
}

/// Exact two-sided p: probability mass of U values at least as far from the
/// null mean as the observed one.
fn exact_p(n1: usize, n2: usize, u_obs: f64) -> f64 {
    let n = n1 + n2;
    let dist = rank_sum_distribution(n, n1);
    let offset = n1 * (n1 + 1) / 2; // U = rank_sum - offset
    let mu = (n1 * n2) as f64 / 2.0;
    let dev = (u_obs - mu).abs();
    let mut extreme = 0.0;
    let mut total = 0.0;
    for (s, &count) in dist.iter().enumerate() {
        if count == 0.0 {
            continue;
        }
        total += count;
        let u = (s - offset.min(s)) as f64;
        if s >= offset && (u - mu).abs() >= dev - 1e-12 {
            extreme += count;
        }
    }
    extreme / total
}

fn approx_p(x: &[f64], y: &[f64], u_obs: f64) -> f64 {
    let (n1, n2) = (x.len() as f64, y.len() as f64);
    let n = n1 + n2;
    let mu = n1 * n2 / 2.0;
    // Tie correction over pooled tie groups.
    let mut all: Vec<f64> = x.iter().chain(y).copied().collect();
    all.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1] == all[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        i = j + 1;
    }
    let var = n1 * n2 / 12.0 * ((n + 1.0) - tie_term / (n * (n - 1.0)));
    if var <= 0.0 {
        return 1.0; // every observation tied
    }
    let z = ((u_obs - mu).abs() - 0.5).max(0.0) / var.sqrt();
    (2.0 * (1.0 - normal_cdf(z))).min(1.0)
}

/// Returns `(U_x, two-sided p)` together with which p-value route was used.
pub fn rank_sum_detailed(x: &[f64], y: &[f64]) -> Result<(f64, f64, PvalueMethod), MetricError> {
    if x.is_empty() || y.is_empty() {
        return Err(MetricError::EmptySample);
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(MetricError::NonFiniteScore);
    }
    let ranks = midranks(x, y);
    let r1: f64 = ranks[..x.len()].iter().sum();
    let u = r1 - (x.len() * (x.len() + 1)) as f64 / 2.0;
    let tie_free = !has_ties(x, y);
    if x.len() + y.len() <= EXACT_LIMIT && tie_free {
        Ok((u, exact_p(x.len(), y.len(), u), PvalueMethod::Exact))
    } else {
        Ok((u, approx_p(x, y, u), PvalueMethod::NormalApprox))
    }
}

/// Mann-Whitney U statistic of `x` with the two-sided p-value.
pub fn wilcoxon_rank_sum(x: &[f64], y: &[f64]) -> Result<(f64, f64), MetricError> {
    rank_sum_detailed(x, y).map(|(u, p, _)| (u, p))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_separated_samples_exact_third() {
        let (u, p) = wilcoxon_rank_sum(&[1.0, 2.0], &[3.0, 4.0]).unwrap();
        assert_eq!(u, 0.0);
        // 2 of the C(4,2) = 6 assignments are this extreme.
        assert!((p - 1.0 / 3.0).abs() < 1e-15, "p = {p}");
    }

    #[test]
    fn identical_samples_give_p_one() {
        let x = [0.4, 0.6, 0.9, 0.1];
        let (_, p) = wilcoxon_rank_sum(&x, &x).unwrap();
        assert!((p - 1.0).abs() < 1e-9, "p = {p}");
    }

    #[test]
    fn fully_separated_large_samples_are_significant() {
        let x: Vec<f64> = (1..=10).map(f64::from).collect();
        let y: Vec<f64> = (11..=20).map(f64::from).collect();
        let (u, p) = wilcoxon_rank_sum(&x, &y).unwrap();
        assert_eq!(u, 0.0);
        assert!(p < 0.001, "p = {p}");
    }

    #[test]
    fn u_statistics_are_complementary() {
        let x = [3.0, 1.0, 4.0, 1.5, 9.2];
        let y = [2.6, 5.3, 5.8, 9.7];
        let (ux, _) = wilcoxon_rank_sum(&x, &y).unwrap();
        let (uy, _) = wilcoxon_rank_sum(&y, &x).unwrap();
        assert_eq!(ux + uy, (x.len() * y.len()) as f64);
    }

    #[test]
    fn exact_route_used_only_when_small_and_tie_free() {
        let (_, _, m) = rank_sum_detailed(&[1.0, 2.0, 3.0], &[4.0, 5.0]).unwrap();
        assert_eq!(m, PvalueMethod::Exact);
        let (_, _, m) = rank_sum_detailed(&[1.0, 2.0, 2.0], &[4.0, 5.0]).unwrap();
        assert_eq!(m, PvalueMethod::NormalApprox);
        let x: Vec<f64> = (0..10).map(f64::from).collect();
        let y: Vec<f64> = (10..20).map(f64::from).collect();
        let (_, _, m) = rank_sum_detailed(&x, &y).unwrap();
        assert_eq!(m, PvalueMethod::NormalApprox);
    }

    #[test]
    fn midranks_average_over_tie_groups() {
        let ranks = midranks(&[1.0, 2.0, 2.0], &[2.0, 5.0]);
        assert_eq!(ranks, vec![1.0, 3.0, 3.0, 3.0, 5.0]);
    }

    #[test]
    fn empty_sample_is_rejected() {
        assert!(wilcoxon_rank_sum(&[], &[1.0]).is_err());
    }

    #[test]
    fn normal_approximation_tracks_exact_p_at_the_size_boundary() {
        // Tie-free samples with n1 + n2 = 12 take the exact route; the
        // normal approximation must stay within 0.03 absolute of it.
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        for _ in 0..25 {
            let pool: Vec<f64> = (0..12).map(|_| rng.random_range(-5.0..5.0)).collect();
            let mut sorted = pool.clone();
            sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
            sorted.dedup();
            if sorted.len() < 12 {
                continue;
            }
            let (x, y) = pool.split_at(6);
            let (u, p_exact, m) = rank_sum_detailed(x, y).unwrap();
            assert_eq!(m, PvalueMethod::Exact);
            let p_approx = approx_p(x, y, u);
            assert!(
                (p_exact - p_approx).abs() <= 0.03,
                "exact {p_exact} vs approx {p_approx}"
            );
        }
    }
}

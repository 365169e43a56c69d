//! Two-sided Wilcoxon signed-rank test for paired per-slice metrics.
//!
//! Zero differences are dropped, tied absolute differences receive average
//! ranks. For n ≤ 20 the p-value is exact (enumeration of all 2ⁿ sign
//! assignments); above that a normal approximation with tie and continuity
//! corrections is used.

use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{CbctError, Result};

/// Largest n for which the exact enumeration runs.
pub const EXACT_LIMIT: usize = 20;

/// Average ranks of `|d|`, doubled so ties stay integral.
fn doubled_ranks(abs_diffs: &[f64]) -> Vec<u64> {
    let n = abs_diffs.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| abs_diffs[a].total_cmp(&abs_diffs[b]));
    let mut ranks2 = vec![0u64; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && abs_diffs[order[j + 1]] == abs_diffs[order[i]] {
            j += 1;
        }
        // average of ranks i+1 ..= j+1, doubled: (i+1 + j+1)
        let avg2 = (i + 1 + j + 1) as u64;
        for &idx in &order[i..=j] {
            ranks2[idx] = avg2;
        }
        i = j + 1;
    }
    ranks2
}

struct Prepared {
    ranks2: Vec<u64>,
    w_plus2: u64,
    tie_sizes: Vec<usize>,
}

fn prepare(paired_a: &[f64], paired_b: &[f64]) -> Result<Prepared> {
    if paired_a.len() != paired_b.len() {
        return Err(CbctError::InvalidArgument(format!(
            "wilcoxon: {} vs {} samples",
            paired_a.len(),
            paired_b.len()
        )));
    }
    let diffs: Vec<f64> = paired_a
        .iter()
        .zip(paired_b.iter())
        .map(|(a, b)| a - b)
        .filter(|d| *d != 0.0)
        .collect();
    if diffs.is_empty() {
        return Err(CbctError::DegenerateInput(
            "wilcoxon: all paired differences are zero".into(),
        ));
    }
    if diffs.len() < 5 {
        return Err(CbctError::InvalidArgument(format!(
            "wilcoxon needs at least 5 nonzero differences, got {}",
            diffs.len()
        )));
    }
    let abs: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    let ranks2 = doubled_ranks(&abs);
    let w_plus2: u64 = diffs
        .iter()
        .zip(ranks2.iter())
        .filter(|(d, _)| **d > 0.0)
        .map(|(_, r)| *r)
        .sum();
    // tie group sizes for the variance correction
    let mut sorted = abs.clone();
    sorted.sort_by(f64::total_cmp);
    let mut tie_sizes = Vec::new();
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        tie_sizes.push(j - i + 1);
        i = j + 1;
    }
    Ok(Prepared {
        ranks2,
        w_plus2,
        tie_sizes,
    })
}

/// Exact two-sided p over all 2ⁿ sign assignments of the observed ranks:
/// the probability of a rank sum at least as far from its mean as observed.
fn exact_two_sided(ranks2: &[u64], w_plus2: u64) -> f64 {
    let n = ranks2.len();
    let total2: u64 = ranks2.iter().sum();
    // compare |2·W − total| in integer arithmetic
    let dev_obs = (2 * w_plus2).abs_diff(total2);
    let mut count = 0u64;
    for signs in 0u64..(1u64 << n) {
        let mut w2 = 0u64;
        for (k, r) in ranks2.iter().enumerate() {
            if signs >> k & 1 == 1 {
                w2 += r;
            }
        }
        if (2 * w2).abs_diff(total2) >= dev_obs {
            count += 1;
        }
    }
    count as f64 / (1u64 << n) as f64
}

/// Normal approximation with tie correction and continuity correction.
fn normal_two_sided(n: usize, w_plus: f64, tie_sizes: &[usize]) -> f64 {
    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let tie_term: f64 = tie_sizes
        .iter()
        .map(|&t| {
            let t = t as f64;
            t * t * t - t
        })
        .sum::<f64>()
        / 48.0;
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term;
    if var <= 0.0 {
        return 1.0;
    }
    let dev = w_plus - mean;
    // continuity correction pulls the statistic half a rank toward the mean
    let corrected = if dev > 0.5 {
        dev - 0.5
    } else if dev < -0.5 {
        dev + 0.5
    } else {
        0.0
    };
    let z = corrected / var.sqrt();
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let p = 2.0 * (1.0 - normal.cdf(z.abs()));
    p.clamp(0.0, 1.0)
}

/// Two-sided Wilcoxon signed-rank p-value for paired samples.
pub fn wilcoxon_signed_rank(paired_a: &[f64], paired_b: &[f64]) -> Result<f64> {
    let prep = prepare(paired_a, paired_b)?;
    let n = prep.ranks2.len();
    if n <= EXACT_LIMIT {
        Ok(exact_two_sided(&prep.ranks2, prep.w_plus2))
    } else {
        Ok(normal_two_sided(
            n,
            prep.w_plus2 as f64 / 2.0,
            &prep.tie_sizes,
        ))
    }
}

/// Exact branch regardless of n (n must stay small enough to enumerate).
pub fn wilcoxon_exact(paired_a: &[f64], paired_b: &[f64]) -> Result<f64> {
    let prep = prepare(paired_a, paired_b)?;
    if prep.ranks2.len() > 26 {
        return Err(CbctError::InvalidArgument(
            "exact enumeration limited to n <= 26".into(),
        ));
    }
    Ok(exact_two_sided(&prep.ranks2, prep.w_plus2))
}

/// Normal-approximation branch regardless of n.
pub fn wilcoxon_normal(paired_a: &[f64], paired_b: &[f64]) -> Result<f64> {
    let prep = prepare(paired_a, paired_b)?;
    Ok(normal_two_sided(
        prep.ranks2.len(),
        prep.w_plus2 as f64 / 2.0,
        &prep.tie_sizes,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn five_one_sided_differences_give_exact_p() {
        // diffs {1,2,3,4,5}: only the all-positive and all-negative
        // assignments are as extreme → p = 2/32
        let a = [1.0, 2.0, 3.0, 4.0, 5.0];
        let b = [0.0; 5];
        let p = wilcoxon_signed_rank(&a, &b).unwrap();
        assert_eq!(p, 0.0625);
    }

    #[test]
    fn symmetric_differences_give_p_one() {
        let a = [1.0, -1.0, 1.0, -1.0, 1.0, -1.0];
        let b = [0.0; 6];
        let p = wilcoxon_signed_rank(&a, &b).unwrap();
        assert_eq!(p, 1.0);
    }

    #[test]
    fn all_zero_differences_are_degenerate() {
        let a = [3.0; 8];
        let err = wilcoxon_signed_rank(&a, &a).unwrap_err();
        assert!(matches!(err, CbctError::DegenerateInput(_)));
    }

    #[test]
    fn too_few_nonzero_differences_are_rejected() {
        let a = [1.0, 2.0, 3.0, 0.0, 0.0];
        let b = [0.0, 0.0, 0.0, 0.0, 0.0];
        assert!(wilcoxon_signed_rank(&a, &b).is_err());
    }

    #[test]
    fn tied_ranks_average() {
        let r2 = doubled_ranks(&[2.0, 2.0, 5.0]);
        // ranks (1.5, 1.5, 3) doubled
        assert_eq!(r2, vec![3, 3, 6]);
    }

    #[test]
    fn exact_and_normal_agree_at_the_boundary() {
        let mut rng = ChaCha12Rng::seed_from_u64(17);
        for trial in 0..20 {
            let a: Vec<f64> = (0..20).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..20).map(|_| rng.gen_range(-1.0..1.5)).collect();
            let exact = wilcoxon_exact(&a, &b).unwrap();
            let normal = wilcoxon_normal(&a, &b).unwrap();
            assert!(
                (exact - normal).abs() <= 0.01,
                "trial {trial}: exact {exact} vs normal {normal}"
            );
        }
    }

    #[test]
    fn dispatch_switches_at_twenty() {
        let mut rng = ChaCha12Rng::seed_from_u64(23);
        let a: Vec<f64> = (0..21).map(|_| rng.gen_range(0.0..1.0)).collect();
        let b: Vec<f64> = (0..21).map(|_| rng.gen_range(0.2..1.2)).collect();
        // n = 21 must take the normal branch
        let p = wilcoxon_signed_rank(&a, &b).unwrap();
        let normal = wilcoxon_normal(&a, &b).unwrap();
        assert_eq!(p, normal);
    }

    #[test]
    fn strong_effects_are_significant() {
        let a: Vec<f64> = (0..30).map(|i| i as f64).collect();
        let b: Vec<f64> = (0..30).map(|i| i as f64 + 5.0).collect();
        let p = wilcoxon_signed_rank(&a, &b).unwrap();
        assert!(p < 0.005, "p = {p}");
    }
}

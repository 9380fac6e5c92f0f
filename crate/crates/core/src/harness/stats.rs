//! Small statistics toolkit: population variance, percentile bootstrap,
//! paired t-test, next-token entropy, and correlation coefficients.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::numcore::Rng;

/// Population (not sample) variance. Positions form the full finite
/// population of interest, so the positional-bias metric divides by n.
pub fn population_variance(values: &[f64]) -> f64 {
    assert!(!values.is_empty());
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n
}

pub fn mean(values: &[f64]) -> f64 {
    assert!(!values.is_empty());
    values.iter().sum::<f64>() / values.len() as f64
}

/// Sample standard deviation (n - 1 in the denominator); 0 for fewer than
/// two values.
pub fn sample_std(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let m = mean(values);
    (values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (values.len() - 1) as f64).sqrt()
}

/// Percentile bootstrap confidence interval for the mean, resampling the
/// per-query values. 1000 resamples, seeded.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapCi {
    pub lo: f64,
    pub hi: f64,
    pub level: f64,
    pub resamples: usize,
}

pub fn bootstrap_mean_ci(values: &[f64], level: f64, rng: &mut Rng) -> BootstrapCi {
    const RESAMPLES: usize = 1000;
    assert!(!values.is_empty());
    assert!(level > 0.0 && level < 1.0);
    let mut means = Vec::with_capacity(RESAMPLES);
    for _ in 0..RESAMPLES {
        let mut total = 0.0;
        for _ in 0..values.len() {
            total += values[rng.usize_below(values.len())];
        }
        means.push(total / values.len() as f64);
    }
    means.sort_by(|a, b| a.partial_cmp(b).expect("finite means"));
    let alpha = (1.0 - level) / 2.0;
    let lo_idx = ((RESAMPLES as f64) * alpha).floor() as usize;
    let hi_idx = (((RESAMPLES as f64) * (1.0 - alpha)).ceil() as usize).min(RESAMPLES) - 1;
    BootstrapCi {
        lo: means[lo_idx],
        hi: means[hi_idx],
        level,
        resamples: RESAMPLES,
    }
}

/// Two-sided paired t-test over per-pair differences.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairedTTest {
    pub n: usize,
    pub mean_diff: f64,
    pub t_stat: f64,
    pub p_value: f64,
}

pub fn paired_t_test(diffs: &[f64]) -> Option<PairedTTest> {
    let n = diffs.len();
    if n < 2 {
        return None;
    }
    let m = mean(diffs);
    let sd = sample_std(diffs);
    if sd == 0.0 {
        // all differences identical; t is undefined unless the mean is 0
        return Some(PairedTTest {
            n,
            mean_diff: m,
            t_stat: if m == 0.0 { 0.0 } else { f64::INFINITY },
            p_value: if m == 0.0 { 1.0 } else { 0.0 },
        });
    }
    let t = m / (sd / (n as f64).sqrt());
    let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64).expect("valid dof");
    let p = 2.0 * (1.0 - dist.cdf(t.abs()));
    Some(PairedTTest {
        n,
        mean_diff: m,
        t_stat: t,
        p_value: p,
    })
}

/// Shannon entropy of a probability vector, in nats. Zero-probability terms
/// contribute nothing.
pub fn entropy_nats(dist: &[f64]) -> Result<f64, String> {
    let total: f64 = dist.iter().sum();
    if (total - 1.0).abs() > 1e-5 {
        return Err(format!("distribution sums to {total}, not 1"));
    }
    if dist.iter().any(|&p| p < 0.0 || !p.is_finite()) {
        return Err("distribution has negative or non-finite entries".into());
    }
    Ok(dist
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.ln())
        .sum())
}

/// Pearson correlation; None when either side has zero variance.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    assert_eq!(xs.len(), ys.len());
    let n = xs.len() as f64;
    if xs.len() < 2 {
        return None;
    }
    let mx = mean(xs);
    let my = mean(ys);
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for (&x, &y) in xs.iter().zip(ys) {
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
        sxy += (x - mx) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    let _ = n;
    Some(sxy / (sxx.sqrt() * syy.sqrt()))
}

/// Ranks with ties assigned their average rank (1-based).
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).expect("finite values"));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        // positions i..=j share the same value; average their ranks
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation (Pearson on average ranks); None when either
/// side is constant.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let rx = average_ranks(xs);
    let ry = average_ranks(ys);
    pearson(&rx, &ry)
}

/// Two-sided z-band around a binomial proportion at the given confidence
/// level: p0 +/- z * sqrt(p0 (1 - p0) / n).
pub fn binomial_band(p0: f64, n: usize, z: f64) -> (f64, f64) {
    let half = z * (p0 * (1.0 - p0) / n as f64).sqrt();
    (p0 - half, p0 + half)
}

/// z for a two-sided 99% band.
pub const Z_99: f64 = 2.5758293035489004;

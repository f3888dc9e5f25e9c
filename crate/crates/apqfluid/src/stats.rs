//! Empirical-distribution test statistics: one- and two-sample
//! Kolmogorov-Smirnov and chi-square homogeneity / goodness-of-fit.

use statrs::distribution::{ChiSquared, ContinuousCDF};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StatsError {
    #[error("empty sample")]
    EmptySample,
}

/// Survival function of the Kolmogorov distribution,
/// `Q(x) = 2 * sum_{k>=1} (-1)^{k-1} exp(-2 k^2 x^2)`.
pub fn kolmogorov_sf(x: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    let mut sum = 0.0;
    let mut sign = 1.0;
    for k in 1..=100 {
        let term = (-2.0 * (k as f64) * (k as f64) * x * x).exp();
        if term < 1e-16 {
            break;
        }
        sum += sign * term;
        sign = -sign;
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

fn sort(mut xs: Vec<f64>) -> Vec<f64> {
    xs.sort_unstable_by(|a, b| a.total_cmp(b));
    xs
}

/// Two-sample KS: statistic `sup_x |ECDF_a(x) - ECDF_b(x)|` and the
/// asymptotic p-value with effective size `n_a n_b / (n_a + n_b)`.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> Result<(f64, f64), StatsError> {
    if a.is_empty() || b.is_empty() {
        return Err(StatsError::EmptySample);
    }
    let xs = sort(a.to_vec());
    let ys = sort(b.to_vec());
    let (na, nb) = (xs.len() as f64, ys.len() as f64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut d: f64 = 0.0;
    while i < xs.len() && j < ys.len() {
        let v = xs[i].min(ys[j]);
        while i < xs.len() && xs[i] <= v {
            i += 1;
        }
        while j < ys.len() && ys[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    let n_eff = na * nb / (na + nb);
    let p = kolmogorov_sf(n_eff.sqrt() * d);
    Ok((d, p))
}

/// One-sample KS of `xs` against a theoretical CDF, asymptotic p-value.
pub fn ks_one_sample<F: Fn(f64) -> f64>(xs: &[f64], cdf: F) -> (f64, f64) {
    assert!(!xs.is_empty(), "empty sample");
    let xs = sort(xs.to_vec());
    let n = xs.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &x) in xs.iter().enumerate() {
        let c = cdf(x);
        d = d.max(((i as f64 + 1.0) / n - c).abs());
        d = d.max((c - i as f64 / n).abs());
    }
    (d, kolmogorov_sf(n.sqrt() * d))
}

/// Upper-tail p-value of a chi-square statistic with `df` degrees of freedom.
pub fn chi2_sf(stat: f64, df: f64) -> f64 {
    if df <= 0.0 {
        return 1.0;
    }
    let dist = ChiSquared::new(df).expect("df > 0");
    (1.0 - dist.cdf(stat)).clamp(0.0, 1.0)
}

/// Chi-square test of homogeneity between two observed count vectors over
/// the same categories. Categories empty in both samples are dropped.
/// Returns `(statistic, p_value, df)`.
pub fn chi2_homogeneity(a: &[u64], b: &[u64]) -> Result<(f64, f64, f64), StatsError> {
    assert_eq!(a.len(), b.len(), "category count mismatch");
    let na: u64 = a.iter().sum();
    let nb: u64 = b.iter().sum();
    if na == 0 || nb == 0 {
        return Err(StatsError::EmptySample);
    }
    let total = (na + nb) as f64;
    let mut stat = 0.0;
    let mut cells = 0usize;
    for (&oa, &ob) in a.iter().zip(b) {
        let pooled = (oa + ob) as f64;
        if pooled == 0.0 {
            continue;
        }
        cells += 1;
        let ea = pooled * na as f64 / total;
        let eb = pooled * nb as f64 / total;
        stat += (oa as f64 - ea).powi(2) / ea + (ob as f64 - eb).powi(2) / eb;
    }
    let df = (cells.saturating_sub(1)) as f64;
    Ok((stat, chi2_sf(stat, df), df))
}

/// Chi-square goodness of fit of observed counts against expected
/// probabilities (which need not sum to 1; the remainder becomes a final
/// "other" cell). Returns `(statistic, p_value, df)`.
pub fn chi2_gof(observed: &[u64], probs: &[f64], n: u64) -> Result<(f64, f64, f64), StatsError> {
    assert_eq!(observed.len(), probs.len());
    if n == 0 {
        return Err(StatsError::EmptySample);
    }
    let tail_p = 1.0 - probs.iter().sum::<f64>();
    let tail_obs = n - observed.iter().sum::<u64>();
    let mut stat = 0.0;
    let mut cells = 0usize;
    for (&o, &p) in observed.iter().zip(probs) {
        let e = p * n as f64;
        if e > 0.0 {
            cells += 1;
            stat += (o as f64 - e).powi(2) / e;
        }
    }
    if tail_p > 0.0 {
        cells += 1;
        let e = tail_p * n as f64;
        stat += (tail_obs as f64 - e).powi(2) / e;
    }
    let df = (cells.saturating_sub(1)) as f64;
    Ok((stat, chi2_sf(stat, df), df))
}

//! Two-sample Kolmogorov–Smirnov test.

use serde::{Deserialize, Serialize};

use super::BiasError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KsResult {
    pub d_statistic: f64,
    pub p_value: f64,
    pub n1: usize,
    pub n2: usize,
}

impl KsResult {
    /// True when the two samples differ at significance level `alpha`.
    pub fn separated(&self, alpha: f64) -> bool {
        self.p_value < alpha
    }
}

/// `D = sup |F_a(x) - F_b(x)|` evaluated at every pooled sample point, with a
/// two-sided asymptotic p-value.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> Result<KsResult, BiasError> {
    if a.is_empty() || b.is_empty() {
        return Err(BiasError::EmptySample);
    }
    if a.iter().chain(b).any(|x| !x.is_finite()) {
        return Err(BiasError::NonFiniteSample);
    }
    let d = ks_statistic(a, b);
    Ok(KsResult {
        d_statistic: d,
        p_value: ks_p_value(d, a.len(), b.len()),
        n1: a.len(),
        n2: b.len(),
    })
}

/// Merge walk over both sorted samples; ties advance both sides together.
///
/// The ECDF gap `|i/n1 - j/n2|` is tracked as the integer `|i n2 - j n1|`
/// and divided once, so D is the correctly rounded rational value.
fn ks_statistic(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (n1, n2) = (a.len() as u128, b.len() as u128);
    let (mut i, mut j) = (0usize, 0usize);
    let mut best = 0u128;
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        best = best.max((i as u128 * n2).abs_diff(j as u128 * n1));
    }
    best as f64 / (n1 * n2) as f64
}

/// Asymptotic p-value with the effective sample size `n1 n2 / (n1 + n2)` and
/// the small-sample correction `λ = (√n + 0.12 + 0.11/√n) D`.
pub fn ks_p_value(d: f64, n1: usize, n2: usize) -> f64 {
    let n_eff = (n1 as f64 * n2 as f64) / (n1 + n2) as f64;
    let sqrt_n = n_eff.sqrt();
    kolmogorov_q((sqrt_n + 0.12 + 0.11 / sqrt_n) * d)
}

/// Survival function of the Kolmogorov distribution,
/// `Q(λ) = 2 Σ_{k≥1} (-1)^{k-1} exp(-2 k² λ²)`.
///
/// That alternating series converges slowly as λ → 0, so below λ = 1.18 the
/// equivalent theta-function form of the CDF is summed instead:
/// `1 - Q(λ) = √(2π)/λ Σ_{k≥1} exp(-(2k-1)² π² / (8 λ²))`.
pub fn kolmogorov_q(lambda: f64) -> f64 {
    const EPS: f64 = 1e-10;
    if lambda <= 0.0 {
        return 1.0;
    }
    if lambda < 1.18 {
        let y = (-std::f64::consts::PI.powi(2) / (8.0 * lambda * lambda)).exp();
        let mut sum = 0.0;
        for k in 1..=20 {
            let odd = (2 * k - 1) as f64;
            let term = y.powf(odd * odd);
            sum += term;
            if term < EPS * sum.max(f64::MIN_POSITIVE) {
                break;
            }
        }
        let cdf = (2.0 * std::f64::consts::PI).sqrt() / lambda * sum;
        return (1.0 - cdf).clamp(0.0, 1.0);
    }
    let mut sum = 0.0;
    let mut sign = 1.0;
    for k in 1..=100 {
        let kf = k as f64;
        let term = (-2.0 * kf * kf * lambda * lambda).exp();
        sum += sign * term;
        if term < EPS {
            break;
        }
        sign = -sign;
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

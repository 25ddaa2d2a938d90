//! Scalar statistics shared by every estimator: normal-distribution helpers,
//! order statistics, moments and the Welch two-sample test.

use statrs::distribution::{ContinuousCDF, StudentsT};
use statrs::function::erf::erfc_inv;

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;
const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// Below this argument the normal tail is evaluated through its asymptotic
/// series instead of `erfc`.
const TAIL_CUTOFF: f64 = -30.0;

pub fn norm_pdf(z: f64) -> f64 {
    FRAC_1_SQRT_2PI * (-0.5 * z * z).exp()
}

pub fn ln_norm_pdf(z: f64) -> f64 {
    -LN_SQRT_2PI - 0.5 * z * z
}

pub fn norm_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

/// Upper tail `1 - Φ(z)` without cancellation.
pub fn norm_sf(z: f64) -> f64 {
    norm_cdf(-z)
}

pub fn norm_ppf(p: f64) -> f64 {
    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    -std::f64::consts::SQRT_2 * erfc_inv(2.0 * p)
}

/// `ln Φ(z)`, finite for every finite `z`.
pub fn ln_norm_cdf(z: f64) -> f64 {
    if z < TAIL_CUTOFF {
        ln_norm_pdf(z) - (-z).ln() + tail_series(z).ln()
    } else if z > 5.0 {
        (-norm_sf(z)).ln_1p()
    } else {
        norm_cdf(z).ln()
    }
}

/// Inverse Mills ratio `φ(z) / Φ(z)`.
pub fn inv_mills(z: f64) -> f64 {
    if z < TAIL_CUTOFF {
        -z / tail_series(z)
    } else {
        norm_pdf(z) / norm_cdf(z)
    }
}

// 1 - 1/z² + 3/z⁴ - 15/z⁶ + 105/z⁸
fn tail_series(z: f64) -> f64 {
    let r = 1.0 / (z * z);
    1.0 - r * (1.0 - 3.0 * r * (1.0 - 5.0 * r * (1.0 - 7.0 * r)))
}

/// Two-sided normal-reference p-value for a z statistic.
pub fn two_sided_normal_p(z: f64) -> f64 {
    if !z.is_finite() {
        return if z.is_nan() { f64::NAN } else { 0.0 };
    }
    (2.0 * norm_sf(z.abs())).min(1.0)
}

pub fn mean(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        None
    } else {
        Some(xs.iter().sum::<f64>() / xs.len() as f64)
    }
}

/// Sample standard deviation (n - 1 denominator).
pub fn sample_sd(xs: &[f64]) -> Option<f64> {
    if xs.len() < 2 {
        return None;
    }
    let m = mean(xs)?;
    let ss: f64 = xs.iter().map(|x| (x - m) * (x - m)).sum();
    Some((ss / (xs.len() - 1) as f64).sqrt())
}

/// Moment skewness `m3 / m2^1.5` and kurtosis `m4 / m2²` (not excess), both
/// from population central moments. `None` for a degenerate sample.
pub fn skew_kurt(xs: &[f64]) -> (Option<f64>, Option<f64>) {
    let Some(m) = mean(xs) else { return (None, None) };
    let n = xs.len() as f64;
    let (mut m2, mut m3, mut m4) = (0.0, 0.0, 0.0);
    for &x in xs {
        let d = x - m;
        let d2 = d * d;
        m2 += d2;
        m3 += d2 * d;
        m4 += d2 * d2;
    }
    m2 /= n;
    m3 /= n;
    m4 /= n;
    if m2 <= f64::EPSILON * m.abs().max(1.0) * f64::EPSILON {
        return (None, None);
    }
    (Some(m3 / m2.powf(1.5)), Some(m4 / (m2 * m2)))
}

/// Quantile by linear interpolation between order statistics: position
/// `h = (n - 1) q` on the 0-based sorted sample.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> Option<f64> {
    if sorted.is_empty() || !(0.0..=1.0).contains(&q) {
        return None;
    }
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    Some(sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo]))
}

pub fn quantile(xs: &[f64], q: f64) -> Option<f64> {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    quantile_sorted(&v, q)
}

pub fn median(xs: &[f64]) -> Option<f64> {
    quantile(xs, 0.5)
}

/// Weighted sample summary used for the weighted-control arm of balance tests.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightedSample {
    pub mean: f64,
    /// Variance with the effective-sample-size correction; equals the usual
    /// (n - 1) sample variance when all weights are equal.
    pub var: f64,
    pub n_eff: f64,
}

pub fn weighted_sample(values: &[f64], weights: &[f64]) -> Option<WeightedSample> {
    assert_eq!(values.len(), weights.len());
    let sw: f64 = weights.iter().sum();
    if values.is_empty() || sw <= 0.0 {
        return None;
    }
    let sw2: f64 = weights.iter().map(|w| w * w).sum();
    let mean = values.iter().zip(weights).map(|(v, w)| v * w).sum::<f64>() / sw;
    let n_eff = sw * sw / sw2;
    let ss = values.iter().zip(weights).map(|(v, w)| w * (v - mean) * (v - mean)).sum::<f64>() / sw;
    let var = if n_eff > 1.0 { ss * n_eff / (n_eff - 1.0) } else { f64::NAN };
    Some(WeightedSample { mean, var, n_eff })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WelchTest {
    pub t: f64,
    pub df: f64,
    pub p_value: f64,
}

/// Welch unequal-variance t-test from two sample summaries.
pub fn welch(a: WeightedSample, b: WeightedSample) -> Option<WelchTest> {
    if a.n_eff < 2.0 - 1e-12 || b.n_eff < 2.0 - 1e-12 {
        return None;
    }
    let va = a.var / a.n_eff;
    let vb = b.var / b.n_eff;
    let diff = a.mean - b.mean;
    let se2 = va + vb;
    if se2 <= 0.0 || !se2.is_finite() {
        // both samples constant
        return if diff == 0.0 {
            Some(WelchTest { t: 0.0, df: f64::INFINITY, p_value: 1.0 })
        } else {
            Some(WelchTest { t: diff.signum() * f64::INFINITY, df: f64::INFINITY, p_value: 0.0 })
        };
    }
    let t = diff / se2.sqrt();
    let df = se2 * se2 / (va * va / (a.n_eff - 1.0) + vb * vb / (b.n_eff - 1.0));
    let p_value = if df.is_finite() && df > 0.0 {
        let dist = StudentsT::new(0.0, 1.0, df).ok()?;
        (2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0)
    } else {
        two_sided_normal_p(t)
    };
    Some(WelchTest { t, df, p_value })
}

pub fn welch_unweighted(a: &[f64], b: &[f64]) -> Option<WelchTest> {
    let wa = vec![1.0; a.len()];
    let wb = vec![1.0; b.len()];
    welch(weighted_sample(a, &wa)?, weighted_sample(b, &wb)?)
}

/// Spearman rank correlation (average ranks for ties).
pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let ra = ranks(a);
    let rb = ranks(b);
    pearson(&ra, &rb)
}

pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let ma = mean(a)?;
    let mb = mean(b)?;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some(sab / (saa * sbb).sqrt())
}

fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&i, &j| xs[i].total_cmp(&xs[j]));
    let mut out = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

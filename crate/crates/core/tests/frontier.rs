use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use ets_impact::frontier::{
    conditional_inefficiency, efficiency_scores, fit_frontier, frontier_data, frontier_loglik, indexed_median_series,
    median_distance_series, returns_to_scale, FrontierData, FrontierModel, FrontierOptions, Group, InefficiencyLaw,
};
use ets_impact::panel::{FirmYear, PanelConfig, PanelDataset, Variable};
use ets_impact::stats::spearman;
use ets_impact::synthgen::{generate, SynthConfig};
use ets_impact::Error;

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Cobb-Douglas sample with noise sd `su` and half-normal inefficiency
/// scale `sv`; returns the data and the true inefficiency draws.
fn sample(seed: u64, n: usize, c: f64, su: f64, sv: f64) -> (FrontierData, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut d = FrontierData::default();
    let mut ineff = Vec::with_capacity(n);
    for i in 0..n {
        let size = normal(&mut rng);
        let k = 7.0 + 0.8 * size + 0.6 * normal(&mut rng);
        let l = 4.0 + 0.7 * size + 0.5 * normal(&mut rng);
        let e = 6.0 + 0.8 * size + 0.7 * normal(&mut rng);
        let s = sv * normal(&mut rng).abs();
        let y = c + 0.2 * k + 0.6 * l + 0.2 * e + su * normal(&mut rng) - s;
        d.push(&format!("f{i}"), 2005, y, k, l, e);
        ineff.push(s);
    }
    (d, ineff)
}

#[test]
fn recovers_simulated_parameters() {
    let (data, _) = sample(4, 5000, 4.0, 0.4, 0.5);
    let m = fit_frontier(&data, 1, FrontierOptions::default()).unwrap();
    assert!(m.converged && !m.boundary);
    for (name, got, se, want) in [
        ("constant", m.constant, m.se.constant, 4.0),
        ("beta_k", m.beta_k, m.se.beta_k, 0.2),
        ("beta_l", m.beta_l, m.se.beta_l, 0.6),
        ("beta_e", m.beta_e, m.se.beta_e, 0.2),
        ("sigma_u", m.sigma_u, m.se.sigma_u, 0.4),
        ("sigma_v", m.sigma_v, m.se.sigma_v, 0.5),
    ] {
        assert!((got - want).abs() <= 3.0 * se, "{name}: {got} ± {se} vs {want}");
    }
}

#[test]
fn exact_surface_hits_boundary() {
    let (data, _) = sample(5, 300, 1.5, 0.0, 0.0);
    let m = fit_frontier(&data, 1, FrontierOptions::default()).unwrap();
    for (got, want) in [(m.beta_k, 0.2), (m.beta_l, 0.6), (m.beta_e, 0.2), (m.constant, 1.5)] {
        assert!((got - want).abs() < 1e-6, "{got} vs {want}");
    }
    assert!(m.boundary);
}

#[test]
fn iteration_budget_exhausted() {
    let (data, _) = sample(6, 500, 1.0, 0.4, 0.5);
    let opts = FrontierOptions { max_iter: 1, ..Default::default() };
    match fit_frontier(&data, 1, opts) {
        Err(Error::NoConvergence { trace, .. }) => assert!(!trace.is_empty()),
        other => panic!("expected non-convergence, got {other:?}"),
    }
}

#[test]
fn too_few_observations() {
    let (data, _) = sample(6, 5, 1.0, 0.4, 0.5);
    assert!(matches!(fit_frontier(&data, 1, FrontierOptions::default()), Err(Error::TooFewObservations { .. })));
}

#[test]
fn scale_elasticities() {
    let m23 = FrontierModel::from_coefficients(23, [0.206, 0.612, 0.111], 4.229, 0.501, 0.0, 1.0);
    let m11 = FrontierModel::from_coefficients(11, [0.223, 0.725, 0.257], 2.252, 0.549, 0.0, 1.0);
    let crs = FrontierModel::from_coefficients(1, [1.0, 0.0, 0.0], 0.0, 1.0, 0.0, 1.0);
    assert!((returns_to_scale(&m23) - 0.929).abs() < 1e-12);
    assert!((returns_to_scale(&m11) - 1.205).abs() < 1e-12);
    assert_eq!(returns_to_scale(&crs), 1.0);
}

/// `E[s | ε]` by trapezoid integration of `s f(s) φ((ε + s)/σ_u)` over s ≥ 0
/// with `f` the truncated-normal density of inefficiency.
fn integrated_mean(eps: f64, su: f64, mu: f64, sv: f64) -> f64 {
    let dens = |s: f64| (-0.5 * ((s - mu) / sv).powi(2)).exp() * (-0.5 * ((eps + s) / su).powi(2)).exp();
    let upper = mu.max(0.0) + 12.0 * sv;
    let steps = 200_000;
    let h = upper / steps as f64;
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..=steps {
        let s = i as f64 * h;
        let wt = if i == 0 || i == steps { 0.5 } else { 1.0 };
        num += wt * s * dens(s);
        den += wt * dens(s);
    }
    num / den
}

#[test]
fn conditional_mean_at_zero_residual() {
    for (su, mu, sv) in [(0.5, 0.0, 0.5), (0.3, 0.0, 0.8), (0.4, 0.2, 0.3)] {
        // closed form at ε = 0: μ* = μσu²/σ², σ* = σuσv/σ
        let s2: f64 = su * su + sv * sv;
        let mu_star = mu * su * su / s2;
        let sig_star = su * sv / s2.sqrt();
        let z = mu_star / sig_star;
        let phi = (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let cdf = 0.5 * libm::erfc(-z / std::f64::consts::SQRT_2);
        let closed = mu_star + sig_star * phi / cdf;

        let got = conditional_inefficiency(0.0, su, mu, sv);
        assert!((got - closed).abs() < 1e-12, "{got} vs {closed}");
        assert!((got - integrated_mean(0.0, su, mu, sv)).abs() < 1e-7);
    }
}

#[test]
fn more_negative_residual_is_farther() {
    assert!(conditional_inefficiency(-0.4, 0.3, 0.0, 0.5) > conditional_inefficiency(-0.1, 0.3, 0.0, 0.5));
}

#[test]
fn low_noise_distances_rank_true_inefficiency() {
    let (data, truth) = sample(8, 5000, 2.0, 0.05, 0.5);
    let m = fit_frontier(&data, 1, FrontierOptions::default()).unwrap();
    let dist: Vec<f64> = (0..data.len())
        .map(|i| {
            let eps = data.ln_y[i] - m.frontier(data.ln_k[i], data.ln_l[i], data.ln_e[i]);
            conditional_inefficiency(eps, m.sigma_u, m.mu_v, m.sigma_v)
        })
        .collect();
    let rho = spearman(&truth, &dist).unwrap();
    assert!(rho > 0.95, "{rho}");
}

#[test]
fn loglik_tends_to_ols_as_inefficiency_vanishes() {
    let (data, _) = sample(9, 400, 1.0, 0.3, 0.0);
    // OLS via the normal equations
    let n = data.len();
    let x = nalgebra::DMatrix::from_fn(n, 4, |i, j| match j {
        0 => 1.0,
        1 => data.ln_k[i],
        2 => data.ln_l[i],
        _ => data.ln_e[i],
    });
    let y = nalgebra::DVector::from_column_slice(&data.ln_y);
    let b = (x.transpose() * &x).try_inverse().unwrap() * x.transpose() * &y;
    let ssr = (&y - &x * &b).norm_squared();
    let s2 = ssr / n as f64;
    let ols = -0.5 * n as f64 * ((2.0 * std::f64::consts::PI * s2).ln() + 1.0);

    let gaps: Vec<f64> = [1e-2, 1e-3, 1e-4, 1e-6]
        .iter()
        .map(|sv: &f64| {
            let theta = [b[0], b[1], b[2], b[3], s2.sqrt().ln(), sv.ln()];
            (frontier_loglik(&theta, &data, InefficiencyLaw::HalfNormal).0 - ols).abs()
        })
        .collect();
    assert!(gaps.windows(2).all(|w| w[1] < w[0]), "{gaps:?}");
    assert!(gaps[3] < 1e-3, "{gaps:?}");
}

fn firm_rows(id: &str, ind: u16, d: bool, ys: &[(i32, f64)]) -> Vec<(FirmYear, bool)> {
    ys.iter()
        .map(|&(year, y)| {
            let mut o = FirmYear::new(id, year);
            o.industry = Some(ind);
            o.output = Some(y);
            o.capital = Some(100.0);
            o.employees = Some(10.0);
            o.energy_total = Some(50.0);
            (o, d)
        })
        .collect()
}

#[test]
fn missing_inputs_get_reason() {
    let mut rows = firm_rows("a", 20, false, &[(2005, 40.0), (2006, 41.0)]);
    rows[1].0.capital = Some(0.0);
    let ds = PanelDataset::from_flagged(rows, PanelConfig::default()).unwrap();
    let m = FrontierModel::from_coefficients(20, [0.2, 0.6, 0.2], 1.0, 0.3, 0.0, 0.5);
    let s = efficiency_scores(&m, &ds);
    assert!(s[0].distance.is_some());
    assert!(s[1].distance.is_none() && s[1].reason.is_some());
}

#[test]
fn constant_firm_flat_series() {
    let rows = firm_rows("a", 20, true, &[(2003, 40.0), (2004, 40.0), (2005, 40.0)]);
    let ds = PanelDataset::from_flagged(rows, PanelConfig::default()).unwrap();
    let m = FrontierModel::from_coefficients(20, [0.2, 0.6, 0.2], 1.0, 0.3, 0.0, 0.5);
    let series = median_distance_series(&efficiency_scores(&m, &ds), &ds);
    let all: Vec<f64> = series.iter().filter(|r| r.group == Group::All).map(|r| r.median).collect();
    assert_eq!(all.len(), 3);
    assert!(all.windows(2).all(|w| w[0] == w[1]));

    let idx = indexed_median_series(&ds, &[Variable::Output], 2003);
    assert!(idx.iter().all(|r| r.index == Some(1.0)));
}

#[test]
fn crisis_year_is_the_peak() {
    let mut cfg = SynthConfig { n_firms: 1500, treated_share: 0.05, crisis_energy_pass: 0.0, ..Default::default() };
    for ind in &mut cfg.industries {
        ind.crisis_dip = 0.2;
    }
    let (ds, _) = generate(&cfg).unwrap();
    for ind in ds.industries() {
        let (data, _) = frontier_data(&ds, ind, 2003..=2012);
        let m = fit_frontier(&data, ind, FrontierOptions::default()).unwrap();
        let series = median_distance_series(&efficiency_scores(&m, &ds), &ds);
        let all: Vec<_> = series.iter().filter(|r| r.group == Group::All).collect();
        let peak = all.iter().max_by(|a, b| a.median.total_cmp(&b.median)).unwrap();
        assert_eq!(peak.year, 2009, "industry {ind}");
    }
}

proptest! {
    #[test]
    fn conditional_mean_positive_and_decreasing(
        e1 in -2.0f64..2.0, gap in 0.001f64..1.0, su in 0.05f64..1.0, sv in 0.05f64..1.0, mu in -0.5f64..0.5,
    ) {
        let a = conditional_inefficiency(e1, su, mu, sv);
        let b = conditional_inefficiency(e1 + gap, su, mu, sv);
        prop_assert!(a > 0.0 && b > 0.0);
        prop_assert!(a > b);
    }
}

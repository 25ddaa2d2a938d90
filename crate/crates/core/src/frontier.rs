//! Cobb-Douglas stochastic production frontiers with a composed error, and
//! firm-year distance to the frontier.
//!
//! Naming follows the reporting convention used throughout this crate: `u`
//! is the symmetric noise (`σ_u`) and `v` the one-sided inefficiency
//! (`μ_v`, `σ_v`). Log output is `c + β'ln x + u - s` with
//! `u ~ N(0, σ_u²)` and inefficiency `s = -v >= 0` drawn from
//! `N(μ_v, σ_v²)` truncated at zero.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::{bfgs_maximize, newton_polish, numerical_hessian};
use crate::panel::{PanelDataset, Variable};
use crate::regression::wls;
use crate::stats::{inv_mills, ln_norm_cdf, ln_norm_pdf, median};

/// Industries left out of the default frontier run.
pub const EXCLUDED_INDUSTRIES: [u16; 7] = [12, 14, 21, 26, 30, 32, 33];
pub const DEFAULT_MIN_OBS: usize = 50;
pub const FRONTIER_GRAD_TOL: f64 = 1e-6;
pub const FRONTIER_MAX_ITER: usize = 500;
/// σ_v below this is reported as the no-inefficiency boundary.
pub const SIGMA_V_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InefficiencyLaw {
    /// `μ_v = 0`.
    #[default]
    HalfNormal,
    TruncatedNormal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct FrontierSe {
    pub beta_k: f64,
    pub beta_l: f64,
    pub beta_e: f64,
    pub constant: f64,
    pub sigma_u: f64,
    pub mu_v: f64,
    pub sigma_v: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrontierModel {
    pub industry: u16,
    pub law: InefficiencyLaw,
    pub beta_k: f64,
    pub beta_l: f64,
    pub beta_e: f64,
    pub constant: f64,
    pub sigma_u: f64,
    pub mu_v: f64,
    pub sigma_v: f64,
    pub se: FrontierSe,
    pub log_likelihood: f64,
    pub n_firms: usize,
    pub n_obs: usize,
    pub iterations: usize,
    pub converged: bool,
    /// Inefficiency variance collapsed to zero (OLS-like fit).
    pub boundary: bool,
}

impl FrontierModel {
    /// A model from known coefficients, for scoring or scale checks.
    pub fn from_coefficients(
        industry: u16,
        beta: [f64; 3],
        constant: f64,
        sigma_u: f64,
        mu_v: f64,
        sigma_v: f64,
    ) -> Self {
        FrontierModel {
            industry,
            law: if mu_v == 0.0 { InefficiencyLaw::HalfNormal } else { InefficiencyLaw::TruncatedNormal },
            beta_k: beta[0],
            beta_l: beta[1],
            beta_e: beta[2],
            constant,
            sigma_u,
            mu_v,
            sigma_v,
            se: FrontierSe::default(),
            log_likelihood: f64::NAN,
            n_firms: 0,
            n_obs: 0,
            iterations: 0,
            converged: true,
            boundary: false,
        }
    }

    pub fn frontier(&self, ln_k: f64, ln_l: f64, ln_e: f64) -> f64 {
        self.constant + self.beta_k * ln_k + self.beta_l * ln_l + self.beta_e * ln_e
    }

    /// Parameter vector in the optimizer's coordinates.
    pub fn theta(&self) -> Vec<f64> {
        let mut t = vec![self.constant, self.beta_k, self.beta_l, self.beta_e, self.sigma_u.ln(), self.sigma_v.ln()];
        if self.law == InefficiencyLaw::TruncatedNormal {
            t.push(self.mu_v);
        }
        t
    }
}

/// Sum of the input elasticities.
pub fn returns_to_scale(model: &FrontierModel) -> f64 {
    model.beta_k + model.beta_l + model.beta_e
}

/// Log output and log inputs for one industry.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FrontierData {
    pub firms: Vec<String>,
    pub years: Vec<i32>,
    pub ln_y: Vec<f64>,
    pub ln_k: Vec<f64>,
    pub ln_l: Vec<f64>,
    pub ln_e: Vec<f64>,
}

impl FrontierData {
    pub fn len(&self) -> usize {
        self.ln_y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ln_y.is_empty()
    }

    pub fn push(&mut self, firm: &str, year: i32, ln_y: f64, ln_k: f64, ln_l: f64, ln_e: f64) {
        self.firms.push(firm.to_string());
        self.years.push(year);
        self.ln_y.push(ln_y);
        self.ln_k.push(ln_k);
        self.ln_l.push(ln_l);
        self.ln_e.push(ln_e);
    }
}

/// Output = gross output; inputs = capital stock, employees, total energy.
fn logs(o: &crate::panel::FirmYear) -> Option<[f64; 4]> {
    Some([
        o.log_value(Variable::Output)?,
        o.log_value(Variable::Capital)?,
        o.log_value(Variable::Employees)?,
        o.log_value(Variable::EnergyTotal)?,
    ])
}

/// Observations of `industry` within `years` with strictly positive output
/// and inputs. Returns the data and the number of rows skipped.
pub fn frontier_data(ds: &PanelDataset, industry: u16, years: std::ops::RangeInclusive<i32>) -> (FrontierData, usize) {
    let mut data = FrontierData::default();
    let mut skipped = 0;
    for (f, obs) in ds.firms() {
        if ds.industry_of(f) != Some(industry) {
            continue;
        }
        for o in obs.iter().filter(|o| years.contains(&o.year)) {
            match logs(o) {
                Some([y, k, l, e]) => data.push(f, o.year, y, k, l, e),
                None => skipped += 1,
            }
        }
    }
    (data, skipped)
}

/// Composed-error log-likelihood and its analytic gradient at `theta`
/// (`[c, β_K, β_L, β_E, ln σ_u, ln σ_v]`, plus `μ_v` for the truncated law).
pub fn frontier_loglik(theta: &[f64], data: &FrontierData, law: InefficiencyLaw) -> (f64, Vec<f64>) {
    let (c, bk, bl, be) = (theta[0], theta[1], theta[2], theta[3]);
    let su = theta[4].exp();
    let sv = theta[5].exp();
    let mu = if law == InefficiencyLaw::TruncatedNormal { theta[6] } else { 0.0 };
    let s2 = su * su + sv * sv;
    let s = s2.sqrt();
    let s3 = s2 * s;
    let c0 = mu / sv;
    let ln_phi_c0 = ln_norm_cdf(c0);
    let lam_c0 = inv_mills(c0);

    let mut ll = 0.0;
    let mut g = vec![0.0; theta.len()];
    for i in 0..data.len() {
        let eps = data.ln_y[i] - c - bk * data.ln_k[i] - bl * data.ln_l[i] - be * data.ln_e[i];
        let a = (eps + mu) / s;
        let b = mu * su / (sv * s) - eps * sv / (su * s);
        ll += -s.ln() + ln_norm_pdf(a) + ln_norm_cdf(b) - ln_phi_c0;

        let lam = inv_mills(b);
        // dℓ/dε
        let d_eps = -a / s - lam * sv / (su * s);
        g[0] -= d_eps;
        g[1] -= d_eps * data.ln_k[i];
        g[2] -= d_eps * data.ln_l[i];
        g[3] -= d_eps * data.ln_e[i];

        let db_dsu = mu * sv / s3 + eps * sv * (s2 + su * su) / (su * su * s3);
        let db_dsv = -mu * su * (s2 + sv * sv) / (sv * sv * s3) - eps * su / s3;
        let d_su = (a * a - 1.0) * su / s2 + lam * db_dsu;
        let d_sv = (a * a - 1.0) * sv / s2 + lam * db_dsv + lam_c0 * mu / (sv * sv);
        g[4] += d_su * su;
        g[5] += d_sv * sv;
        if law == InefficiencyLaw::TruncatedNormal {
            g[6] += -a / s + lam * su / (sv * s) - lam_c0 / sv;
        }
    }
    (ll, g)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrontierOptions {
    pub law: InefficiencyLaw,
    pub min_obs: usize,
    pub max_iter: usize,
    pub grad_tol: f64,
}

impl Default for FrontierOptions {
    fn default() -> Self {
        FrontierOptions {
            law: InefficiencyLaw::HalfNormal,
            min_obs: DEFAULT_MIN_OBS,
            max_iter: FRONTIER_MAX_ITER,
            grad_tol: FRONTIER_GRAD_TOL,
        }
    }
}

struct OlsStart {
    coef: [f64; 4],
    m2: f64,
    m3: f64,
}

fn ols_start(data: &FrontierData) -> Result<OlsStart> {
    let n = data.len();
    let mut x = DMatrix::zeros(n, 4);
    for i in 0..n {
        x[(i, 0)] = 1.0;
        x[(i, 1)] = data.ln_k[i];
        x[(i, 2)] = data.ln_l[i];
        x[(i, 3)] = data.ln_e[i];
    }
    let names: Vec<String> = ["constant", "ln_capital", "ln_labor", "ln_energy"].map(String::from).to_vec();
    let fit = wls(&x, &DVector::from_column_slice(&data.ln_y), &DVector::from_element(n, 1.0), &names)?;
    let nf = n as f64;
    let m2 = fit.residuals.iter().map(|e| e * e).sum::<f64>() / nf;
    let m3 = fit.residuals.iter().map(|e| e * e * e).sum::<f64>() / nf;
    Ok(OlsStart { coef: [fit.coef[0], fit.coef[1], fit.coef[2], fit.coef[3]], m2, m3 })
}

/// Maximum-likelihood frontier for one industry. Starts from OLS with the
/// method-of-moments intercept shift, runs BFGS on the analytic gradient and
/// polishes with Newton steps; standard errors come from the inverse of the
/// observed information.
pub fn fit_frontier(data: &FrontierData, industry: u16, opts: FrontierOptions) -> Result<FrontierModel> {
    let n = data.len();
    if n < opts.min_obs.max(8) {
        return Err(Error::TooFewObservations { got: n, need: opts.min_obs.max(8) });
    }
    let n_firms = data.firms.iter().collect::<std::collections::BTreeSet<_>>().len();
    let start = ols_start(data)?;

    // half-normal moments: m3 = -sqrt(2/π)(4/π - 1) σ_v³
    let k3 = (2.0 / std::f64::consts::PI).sqrt() * (4.0 / std::f64::consts::PI - 1.0);
    let noise_free = start.m2 <= 1e-20 * (1.0 + data.ln_y.iter().map(|v| v * v).sum::<f64>() / n as f64);
    if start.m3 >= 0.0 || noise_free {
        // Wrong (or no) residual skew: the likelihood peaks at σ_v = 0.
        let su = start.m2.sqrt().max(f64::MIN_POSITIVE);
        return Ok(FrontierModel {
            n_firms,
            n_obs: n,
            converged: true,
            boundary: true,
            log_likelihood: if noise_free {
                f64::INFINITY
            } else {
                -0.5 * n as f64 * (1.0 + (2.0 * std::f64::consts::PI * start.m2).ln())
            },
            ..FrontierModel::from_coefficients(
                industry,
                [start.coef[1], start.coef[2], start.coef[3]],
                start.coef[0],
                su,
                0.0,
                SIGMA_V_FLOOR,
            )
        });
    }
    let sv0 = (-start.m3 / k3).cbrt();
    let su2 = start.m2 - (1.0 - 2.0 / std::f64::consts::PI) * sv0 * sv0;
    let su0 = if su2 > 0.0 { su2.sqrt() } else { 0.1 * start.m2.sqrt() };
    let shift = sv0 * (2.0 / std::f64::consts::PI).sqrt();
    let theta0 = vec![start.coef[0] + shift, start.coef[1], start.coef[2], start.coef[3], su0.ln(), sv0.ln()];

    let run = |law: InefficiencyLaw, theta0: Vec<f64>| {
        let f = |t: &DVector<f64>| {
            let (v, g) = frontier_loglik(t.as_slice(), data, law);
            (v, DVector::from_vec(g))
        };
        let r = bfgs_maximize(f, DVector::from_vec(theta0), opts.grad_tol, opts.max_iter);
        let left = opts.max_iter.saturating_sub(r.iterations);
        newton_polish(f, r, opts.grad_tol, left)
    };

    let mut res = run(InefficiencyLaw::HalfNormal, theta0);
    if opts.law == InefficiencyLaw::TruncatedNormal {
        let mut t: Vec<f64> = res.x.iter().copied().collect();
        t.push(0.0);
        res = run(InefficiencyLaw::TruncatedNormal, t);
    }
    let sv = res.x[5].exp();
    let boundary = sv < SIGMA_V_FLOOR;
    if !res.converged && !boundary {
        return Err(Error::NoConvergence { iterations: res.iterations, grad_norm: res.grad.amax(), trace: res.trace });
    }

    let hess = numerical_hessian(|t| DVector::from_vec(frontier_loglik(t.as_slice(), data, opts.law).1), &res.x);
    let cov = (-hess).try_inverse();
    let sd = |j: usize| cov.as_ref().map_or(f64::NAN, |c| c[(j, j)].max(0.0).sqrt());
    let su = res.x[4].exp();
    let mu = if opts.law == InefficiencyLaw::TruncatedNormal { res.x[6] } else { 0.0 };
    Ok(FrontierModel {
        industry,
        law: opts.law,
        beta_k: res.x[1],
        beta_l: res.x[2],
        beta_e: res.x[3],
        constant: res.x[0],
        sigma_u: su,
        mu_v: mu,
        sigma_v: sv,
        se: FrontierSe {
            constant: sd(0),
            beta_k: sd(1),
            beta_l: sd(2),
            beta_e: sd(3),
            sigma_u: su * sd(4),
            sigma_v: sv * sd(5),
            mu_v: if opts.law == InefficiencyLaw::TruncatedNormal { sd(6) } else { 0.0 },
        },
        log_likelihood: res.value,
        n_firms,
        n_obs: n,
        iterations: res.iterations,
        converged: res.converged,
        boundary,
    })
}

/// Conditional mean of inefficiency given the composed residual,
/// `E[s | ε] = μ* + σ* φ(μ*/σ*) / Φ(μ*/σ*)`.
pub fn conditional_inefficiency(eps: f64, sigma_u: f64, mu_v: f64, sigma_v: f64) -> f64 {
    let s2 = sigma_u * sigma_u + sigma_v * sigma_v;
    let mu_star = (mu_v * sigma_u * sigma_u - eps * sigma_v * sigma_v) / s2;
    let sigma_star = sigma_u * sigma_v / s2.sqrt();
    mu_star + sigma_star * inv_mills(mu_star / sigma_star)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EfficiencyScore {
    pub firm_id: String,
    pub year: i32,
    pub industry: u16,
    /// Distance to the frontier in log-output units; `None` with a reason
    /// when the observation cannot be scored.
    pub distance: Option<f64>,
    pub reason: Option<&'static str>,
}

/// Distance to the frontier for every observation of the model's industry.
pub fn efficiency_scores(model: &FrontierModel, ds: &PanelDataset) -> Vec<EfficiencyScore> {
    let mut out = Vec::new();
    for (f, obs) in ds.firms() {
        if ds.industry_of(f) != Some(model.industry) {
            continue;
        }
        for o in obs {
            let (distance, reason) = match logs(o) {
                Some([y, k, l, e]) => {
                    let eps = y - model.frontier(k, l, e);
                    (Some(conditional_inefficiency(eps, model.sigma_u, model.mu_v, model.sigma_v)), None)
                }
                None => (None, Some("nonpositive or missing output/input")),
            };
            out.push(EfficiencyScore {
                firm_id: f.to_string(),
                year: o.year,
                industry: model.industry,
                distance,
                reason,
            });
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    All,
    Treated,
    Control,
}

impl Group {
    pub fn name(self) -> &'static str {
        match self {
            Group::All => "all",
            Group::Treated => "treated",
            Group::Control => "control",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DistanceSeriesRow {
    pub industry: u16,
    pub group: Group,
    pub year: i32,
    pub median: f64,
    pub n: usize,
}

/// Median distance per (industry, group, year).
pub fn median_distance_series(scores: &[EfficiencyScore], ds: &PanelDataset) -> Vec<DistanceSeriesRow> {
    let mut cells: BTreeMap<(u16, Group, i32), Vec<f64>> = BTreeMap::new();
    for s in scores {
        let Some(d) = s.distance else { continue };
        let g = if ds.is_treated(&s.firm_id) == Some(true) { Group::Treated } else { Group::Control };
        cells.entry((s.industry, Group::All, s.year)).or_default().push(d);
        cells.entry((s.industry, g, s.year)).or_default().push(d);
    }
    cells
        .into_iter()
        .filter_map(|((industry, group, year), v)| {
            Some(DistanceSeriesRow { industry, group, year, median: median(&v)?, n: v.len() })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IndexedMedianRow {
    pub industry: u16,
    pub variable: Variable,
    pub year: i32,
    pub median: f64,
    /// Median relative to the base-year median.
    pub index: Option<f64>,
    pub n: usize,
}

/// Per-industry medians of raw variables, indexed to `base_year = 1`.
pub fn indexed_median_series(ds: &PanelDataset, vars: &[Variable], base_year: i32) -> Vec<IndexedMedianRow> {
    let mut cells: BTreeMap<(u16, Variable, i32), Vec<f64>> = BTreeMap::new();
    for o in ds.observations() {
        let Some(ind) = ds.industry_of(&o.firm_id) else { continue };
        for &v in vars {
            if let Some(x) = o.value(v) {
                cells.entry((ind, v, o.year)).or_default().push(x);
            }
        }
    }
    let medians: BTreeMap<(u16, Variable, i32), (f64, usize)> =
        cells.into_iter().filter_map(|(k, v)| Some((k, (median(&v)?, v.len())))).collect();
    medians
        .iter()
        .map(|(&(industry, variable, year), &(m, n))| {
            let base = medians.get(&(industry, variable, base_year)).map(|b| b.0);
            let index = base.filter(|b| *b != 0.0).map(|b| if year == base_year { 1.0 } else { m / b });
            IndexedMedianRow { industry, variable, year, median: m, index, n }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scale_elasticities_from_coefficients() {
        let m23 = FrontierModel::from_coefficients(23, [0.206, 0.612, 0.111], 4.229, 0.501, 0.0, 1.0);
        let m11 = FrontierModel::from_coefficients(11, [0.223, 0.725, 0.257], 2.252, 0.549, 0.0, 1.0);
        assert!((returns_to_scale(&m23) - 0.929).abs() < 1e-12);
        assert!((returns_to_scale(&m11) - 1.205).abs() < 1e-12);
        let crs = FrontierModel::from_coefficients(1, [1.0, 0.0, 0.0], 0.0, 1.0, 0.0, 1.0);
        assert_eq!(returns_to_scale(&crs), 1.0);
    }

    #[test]
    fn distance_decreases_in_residual() {
        let a = conditional_inefficiency(-0.5, 0.4, 0.0, 0.5);
        let b = conditional_inefficiency(0.3, 0.4, 0.0, 0.5);
        assert!(a > b && b > 0.0);
        // far tail stays positive and finite
        let c = conditional_inefficiency(40.0, 0.4, 0.0, 0.5);
        assert!(c > 0.0 && c.is_finite());
    }

    #[test]
    fn too_few_observations() {
        let mut d = FrontierData::default();
        for i in 0..10 {
            d.push("f", 2003 + i, 1.0, 1.0, 1.0, 1.0);
        }
        assert!(matches!(fit_frontier(&d, 17, FrontierOptions::default()), Err(Error::TooFewObservations { .. })));
    }
}

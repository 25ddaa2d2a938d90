//! Probit propensity model, scoring and common-support trimming.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panel::{PanelDataset, Variable};
use crate::regression::dependent_columns;
use crate::stats::{inv_mills, ln_norm_cdf, norm_cdf};

pub const INTERCEPT: &str = "const";

/// Gradient max-norm at which Newton iterations stop.
pub const PROBIT_GRAD_TOL: f64 = 1e-8;
pub const PROBIT_MAX_ITER: usize = 100;
/// Coefficient magnitude beyond which a fit is treated as separated.
pub const SEPARATION_COEF: f64 = 1e3;
const RIDGE: f64 = 1e-8;

/// A unit-level design matrix with named columns and row labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Design {
    pub names: Vec<String>,
    pub firms: Vec<String>,
    pub x: DMatrix<f64>,
}

impl Design {
    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn row_of(&self, firm: &str) -> Option<usize> {
        self.firms.iter().position(|f| f == firm)
    }

    /// Row lookup table for repeated access.
    pub fn row_index(&self) -> BTreeMap<&str, usize> {
        self.firms.iter().enumerate().map(|(i, f)| (f.as_str(), i)).collect()
    }

    /// Columns other than the intercept, for use as regression controls.
    pub fn without_intercept(&self) -> Design {
        let keep: Vec<usize> = (0..self.names.len()).filter(|&j| self.names[j] != INTERCEPT).collect();
        Design {
            names: keep.iter().map(|&j| self.names[j].clone()).collect(),
            firms: self.firms.clone(),
            x: self.x.select_columns(&keep),
        }
    }
}

/// One covariate of the treatment-assignment model, measured per firm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Covariate {
    /// `ln x` in one year.
    LogLevel { var: Variable, year: i32 },
    /// `ln x_to - ln x_from`.
    LogTrend { var: Variable, from: i32, to: i32 },
    /// One indicator per industry except the lowest code.
    IndustryDummies,
}

impl Covariate {
    pub fn label(&self) -> String {
        match self {
            Covariate::LogLevel { var, year } => format!("ln_{var}_{year}"),
            Covariate::LogTrend { var, from, to } => format!("dln_{var}_{from}_{to}"),
            Covariate::IndustryDummies => "industry".into(),
        }
    }

    /// Parses `ln_<var>_<year>`, `dln_<var>_<from>_<to>` or `industry`.
    pub fn parse(s: &str) -> Result<Self> {
        if s == "industry" {
            return Ok(Covariate::IndustryDummies);
        }
        let bad = || Error::Config(format!("cannot parse covariate `{s}`"));
        if let Some(rest) = s.strip_prefix("dln_") {
            let mut parts = rest.rsplitn(3, '_');
            let to = parts.next().and_then(|p| p.parse().ok()).ok_or_else(bad)?;
            let from = parts.next().and_then(|p| p.parse().ok()).ok_or_else(bad)?;
            let var = parts.next().ok_or_else(bad)?.parse()?;
            return Ok(Covariate::LogTrend { var, from, to });
        }
        if let Some(rest) = s.strip_prefix("ln_") {
            let (var, year) = rest.rsplit_once('_').ok_or_else(bad)?;
            return Ok(Covariate::LogLevel { var: var.parse()?, year: year.parse().map_err(|_| bad())? });
        }
        Err(bad())
    }
}

/// Default assignment covariates: pre-period log levels of the main outcomes,
/// their last pre-period log trends, and industry indicators. Exports are
/// left out (zero for non-exporters) as is emission intensity (collinear in
/// logs with emissions and output).
pub fn default_covariates(level_year: i32, trend_from: i32) -> Vec<Covariate> {
    let mut out: Vec<Covariate> = [Variable::Co2, Variable::Output, Variable::Employees, Variable::AvgWage]
        .into_iter()
        .map(|var| Covariate::LogLevel { var, year: level_year })
        .collect();
    out.extend(
        [Variable::Co2, Variable::Output, Variable::Employees, Variable::AvgWage]
            .into_iter()
            .map(|var| Covariate::LogTrend { var, from: trend_from, to: level_year }),
    );
    out.push(Covariate::IndustryDummies);
    out
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct DesignReport {
    /// Firms without every covariate defined.
    pub incomplete: Vec<String>,
    /// Firms in industries with no treated (or no control) unit, which
    /// cannot be matched.
    pub single_arm_industry: Vec<String>,
}

/// Builds the firm-level assignment design (with intercept) and the
/// treatment vector.
pub fn build_design(ds: &PanelDataset, covariates: &[Covariate]) -> (Design, Vec<bool>, DesignReport) {
    let mut report = DesignReport::default();
    let want_industry = covariates.iter().any(|c| matches!(c, Covariate::IndustryDummies));

    let mut arms: BTreeMap<u16, (bool, bool)> = BTreeMap::new();
    if want_industry {
        for f in ds.firm_ids() {
            if let Some(ind) = ds.industry_of(f) {
                let e = arms.entry(ind).or_default();
                if ds.is_treated(f) == Some(true) {
                    e.0 = true;
                } else {
                    e.1 = true;
                }
            }
        }
    }
    let usable: BTreeSet<u16> = arms.iter().filter(|(_, (t, c))| *t && *c).map(|(k, _)| *k).collect();
    let dummy_codes: Vec<u16> = usable.iter().skip(1).copied().collect();

    let mut names = vec![INTERCEPT.to_string()];
    for c in covariates {
        match c {
            Covariate::IndustryDummies => {
                names.extend(dummy_codes.iter().map(|k| format!("ind_{k}")));
            }
            other => names.push(other.label()),
        }
    }

    let mut data = Vec::new();
    let mut firms = Vec::new();
    let mut d = Vec::new();
    'firm: for (f, _) in ds.firms() {
        let industry = ds.industry_of(f);
        if want_industry && !industry.is_some_and(|k| usable.contains(&k)) {
            report.single_arm_industry.push(f.to_string());
            continue;
        }
        let mut row = vec![1.0];
        for c in covariates {
            match c {
                Covariate::LogLevel { var, year } => match ds.get(f, *year).and_then(|o| o.log_value(*var)) {
                    Some(v) => row.push(v),
                    None => {
                        report.incomplete.push(f.to_string());
                        continue 'firm;
                    }
                },
                Covariate::LogTrend { var, from, to } => {
                    let a = ds.get(f, *from).and_then(|o| o.log_value(*var));
                    let b = ds.get(f, *to).and_then(|o| o.log_value(*var));
                    match (a, b) {
                        (Some(a), Some(b)) => row.push(b - a),
                        _ => {
                            report.incomplete.push(f.to_string());
                            continue 'firm;
                        }
                    }
                }
                Covariate::IndustryDummies => {
                    let k = industry.expect("checked above");
                    row.extend(dummy_codes.iter().map(|c| if *c == k { 1.0 } else { 0.0 }));
                }
            }
        }
        data.extend(row);
        firms.push(f.to_string());
        d.push(ds.is_treated(f) == Some(true));
    }
    let x = DMatrix::from_row_slice(firms.len(), names.len(), &data);
    (Design { names, firms, x }, d, report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropensityModel {
    pub names: Vec<String>,
    pub coef: Vec<f64>,
    pub se: Vec<f64>,
    pub log_likelihood: f64,
    pub iterations: usize,
    pub converged: bool,
    pub n: usize,
    pub n_treated: usize,
    /// Log-likelihood after each accepted Newton step.
    pub trace: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ScoredUnit {
    pub firm_id: String,
    /// Probit index `x'b`.
    pub index: f64,
    /// `Φ(x'b)`, strictly inside (0, 1).
    pub p: f64,
    pub treated: bool,
    pub industry: Option<u16>,
}

struct ProbitEval {
    ll: f64,
    grad: DVector<f64>,
    /// Observed information (negative Hessian).
    info: DMatrix<f64>,
}

fn probit_eval(x: &DMatrix<f64>, d: &[bool], beta: &DVector<f64>, with_info: bool) -> ProbitEval {
    let k = x.ncols();
    let mut ll = 0.0;
    let mut grad = DVector::zeros(k);
    let mut info = DMatrix::zeros(if with_info { k } else { 0 }, if with_info { k } else { 0 });
    for (i, row) in x.row_iter().enumerate() {
        let xb = row.dot(&beta.transpose());
        let q = if d[i] { 1.0 } else { -1.0 };
        ll += ln_norm_cdf(q * xb);
        let lam = q * inv_mills(q * xb);
        grad.axpy(lam, &row.transpose(), 1.0);
        if with_info {
            let w = lam * (lam + xb);
            let r = row.transpose();
            info.ger(w, &r, &r, 1.0);
        }
    }
    ProbitEval { ll, grad, info }
}

/// Log-likelihood and score of the probit model; exposed for gradient checks.
pub fn probit_loglik(x: &DMatrix<f64>, d: &[bool], beta: &[f64]) -> (f64, Vec<f64>) {
    let e = probit_eval(x, d, &DVector::from_column_slice(beta), false);
    (e.ll, e.grad.iter().copied().collect())
}

fn newton_direction(info: &DMatrix<f64>, grad: &DVector<f64>) -> DVector<f64> {
    if let Some(ch) = info.clone().cholesky() {
        return ch.solve(grad);
    }
    let mut ridge = info.clone();
    let mut lambda = RIDGE;
    loop {
        for j in 0..ridge.ncols() {
            ridge[(j, j)] = info[(j, j)] + lambda * info[(j, j)].abs().max(1.0);
        }
        if let Some(ch) = ridge.clone().cholesky() {
            return ch.solve(grad);
        }
        lambda *= 10.0;
        if lambda > 1e6 {
            return grad.clone();
        }
    }
}

/// Maximum-likelihood probit by Newton-Raphson with step-halving.
pub fn fit_probit(x: &DMatrix<f64>, d: &[bool], names: &[String]) -> Result<PropensityModel> {
    let (n, k) = x.shape();
    assert_eq!(d.len(), n);
    if n <= k {
        return Err(Error::TooFewObservations { got: n, need: k + 1 });
    }
    let dep = dependent_columns(x, names);
    if !dep.is_empty() {
        return Err(Error::RankDeficient(dep));
    }
    let n_treated = d.iter().filter(|v| **v).count();
    if n_treated == 0 || n_treated == n {
        return Err(Error::Separation { max_coef: f64::INFINITY, iterations: 0 });
    }

    let mut beta = DVector::zeros(k);
    let mut cur = probit_eval(x, d, &beta, true);
    let mut trace = vec![cur.ll];
    let mut iterations = 0;
    let mut converged = false;
    while iterations < PROBIT_MAX_ITER {
        if cur.grad.amax() < PROBIT_GRAD_TOL {
            converged = true;
            break;
        }
        let step = newton_direction(&cur.info, &cur.grad);
        // the predicted gain is below what double precision can resolve
        if cur.grad.dot(&step) < 1e-14 * cur.ll.abs().max(1.0) {
            converged = true;
            break;
        }
        iterations += 1;
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let cand = &beta + &step * t;
            let e = probit_eval(x, d, &cand, true);
            if e.ll.is_finite() && e.ll >= cur.ll {
                accepted = Some((cand, e));
                break;
            }
            t *= 0.5;
        }
        let Some((b, e)) = accepted else {
            // no ascent possible at machine precision
            converged = cur.grad.amax() < PROBIT_GRAD_TOL.sqrt();
            break;
        };
        beta = b;
        cur = e;
        trace.push(cur.ll);
        if beta.amax() > SEPARATION_COEF {
            return Err(Error::Separation { max_coef: beta.amax(), iterations });
        }
    }
    if !converged && cur.grad.amax() < PROBIT_GRAD_TOL {
        converged = true;
    }
    // Complete separation can also stall with a tiny gradient; every unit
    // predicted with certainty is the tell.
    let margin = x
        .row_iter()
        .zip(d)
        .map(|(r, &di)| {
            let xb = r.dot(&beta.transpose());
            if di {
                xb
            } else {
                -xb
            }
        })
        .fold(f64::INFINITY, f64::min);
    if margin > 5.0 {
        return Err(Error::Separation { max_coef: beta.amax(), iterations });
    }
    if !converged {
        return Err(Error::NoConvergence { iterations, grad_norm: cur.grad.amax(), trace });
    }
    let cov = cur.info.clone().try_inverse().ok_or_else(|| Error::RankDeficient(names.to_vec()))?;
    Ok(PropensityModel {
        names: names.to_vec(),
        coef: beta.iter().copied().collect(),
        se: cov.diagonal().iter().map(|v| v.max(0.0).sqrt()).collect(),
        log_likelihood: cur.ll,
        iterations,
        converged,
        n,
        n_treated,
        trace,
    })
}

/// `Φ(z)` nudged inside the open unit interval.
pub fn probit_prob(z: f64) -> f64 {
    norm_cdf(z).clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

/// Scores every row of `design`. Column names must match the fitted model.
pub fn predict(
    model: &PropensityModel,
    design: &Design,
    treated: &[bool],
    industry: impl Fn(&str) -> Option<u16>,
) -> Result<Vec<ScoredUnit>> {
    if model.names != design.names {
        return Err(Error::ColumnMismatch { expected: model.names.clone(), got: design.names.clone() });
    }
    let beta = DVector::from_column_slice(&model.coef);
    Ok(design
        .x
        .row_iter()
        .zip(&design.firms)
        .zip(treated)
        .map(|((row, f), &t)| {
            let index = row.dot(&beta.transpose());
            ScoredUnit { firm_id: f.clone(), index, p: probit_prob(index), treated: t, industry: industry(f) }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum SupportRule {
    /// Drop treated units outside `[min, max]` of control scores.
    MinMax,
    /// Drop treated units with no control within `radius` on the probit index.
    Caliper {
        radius: f64,
    },
    None,
}

impl std::str::FromStr for SupportRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "minmax" => Ok(SupportRule::MinMax),
            "none" => Ok(SupportRule::None),
            _ => s
                .strip_prefix("caliper:")
                .and_then(|r| r.parse::<f64>().ok())
                .filter(|r| *r > 0.0)
                .map(|radius| SupportRule::Caliper { radius })
                .ok_or_else(|| Error::Config(format!("unknown support rule `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SupportResult {
    pub retained: Vec<ScoredUnit>,
    pub dropped: Vec<ScoredUnit>,
}

pub fn enforce_common_support(scored: &[ScoredUnit], rule: SupportRule) -> Result<SupportResult> {
    let controls: Vec<&ScoredUnit> = scored.iter().filter(|u| !u.treated).collect();
    let n_treated = scored.len() - controls.len();
    if n_treated == 0 {
        return Err(Error::EmptyTreated);
    }
    if controls.is_empty() {
        return Err(Error::EmptyControls);
    }
    let lo = controls.iter().map(|u| u.p).fold(f64::INFINITY, f64::min);
    let hi = controls.iter().map(|u| u.p).fold(f64::NEG_INFINITY, f64::max);
    let mut idx: Vec<f64> = controls.iter().map(|u| u.index).collect();
    idx.sort_by(f64::total_cmp);
    let within_caliper = |z: f64, r: f64| {
        let pos = idx.partition_point(|v| *v < z);
        let below = pos.checked_sub(1).map(|i| z - idx[i]);
        let above = idx.get(pos).map(|v| v - z);
        below.into_iter().chain(above).any(|dist| dist <= r)
    };
    let mut out = SupportResult { retained: Vec::new(), dropped: Vec::new() };
    for u in scored {
        let keep = !u.treated
            || match rule {
                SupportRule::MinMax => u.p >= lo && u.p <= hi,
                SupportRule::Caliper { radius } => within_caliper(u.index, radius),
                SupportRule::None => true,
            };
        if keep {
            out.retained.push(u.clone());
        } else {
            out.dropped.push(u.clone());
        }
    }
    if out.dropped.iter().filter(|u| u.treated).count() == n_treated {
        return Err(Error::NoOverlap);
    }
    Ok(out)
}

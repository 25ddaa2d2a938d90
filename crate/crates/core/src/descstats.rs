//! Summary tables and pre-treatment balance tests.

use std::collections::BTreeSet;
use std::fmt;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::matching::MatchWeights;
use crate::panel::{PanelDataset, Variable};
use crate::stats::{quantile_sorted, sample_sd, skew_kurt, weighted_sample, welch};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SummaryGroup {
    Full,
    Treated,
    Control,
    MatchedControl,
}

impl fmt::Display for SummaryGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SummaryGroup::Full => "full",
            SummaryGroup::Treated => "treated",
            SummaryGroup::Control => "control",
            SummaryGroup::MatchedControl => "matched_control",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub variable: Variable,
    pub group: SummaryGroup,
    pub year: i32,
    pub mean: Option<f64>,
    pub sd: Option<f64>,
    pub skewness: Option<f64>,
    pub kurtosis: Option<f64>,
    pub p10: Option<f64>,
    pub p50: Option<f64>,
    pub p90: Option<f64>,
    pub n: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SummaryOptions {
    /// Statistics are suppressed for cells with fewer observations.
    pub disclosure_floor: usize,
    /// Keep only the central fraction of each variable's distribution.
    pub trim: Option<f64>,
}

pub fn parse_variables<S: AsRef<str>>(names: &[S]) -> Result<Vec<Variable>> {
    names.iter().map(|s| s.as_ref().parse()).collect()
}

/// Bounds of the central `fraction` of a sorted sample.
fn central_bounds(sorted: &[f64], fraction: f64) -> Option<(f64, f64)> {
    let tail = (1.0 - fraction) / 2.0;
    Some((quantile_sorted(sorted, tail)?, quantile_sorted(sorted, 1.0 - tail)?))
}

pub fn summary_row(
    variable: Variable,
    group: SummaryGroup,
    year: i32,
    values: &[f64],
    opts: SummaryOptions,
) -> SummaryRow {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    if let Some(f) = opts.trim {
        if let Some((lo, hi)) = central_bounds(&v, f) {
            v.retain(|x| *x >= lo && *x <= hi);
        }
    }
    let n = v.len();
    if n == 0 || n < opts.disclosure_floor {
        return SummaryRow {
            variable,
            group,
            year,
            mean: None,
            sd: None,
            skewness: None,
            kurtosis: None,
            p10: None,
            p50: None,
            p90: None,
            n,
        };
    }
    let (skewness, kurtosis) = skew_kurt(&v);
    SummaryRow {
        variable,
        group,
        year,
        mean: Some(v.iter().sum::<f64>() / n as f64),
        sd: sample_sd(&v),
        skewness,
        kurtosis,
        p10: quantile_sorted(&v, 0.1),
        p50: quantile_sorted(&v, 0.5),
        p90: quantile_sorted(&v, 0.9),
        n,
    }
}

/// One row per (variable, group) for the cross-section of `year`. Groups:
/// full sample, treated, control, and (when given) the matched controls.
pub fn summarize(
    ds: &PanelDataset,
    variables: &[Variable],
    year: i32,
    matched_controls: Option<&BTreeSet<String>>,
    opts: SummaryOptions,
) -> Result<Vec<SummaryRow>> {
    if !ds.years().contains(&year) {
        return Err(Error::Config(format!("year {year} not present in panel")));
    }
    let mut rows = Vec::new();
    for &var in variables {
        let mut groups: Vec<(SummaryGroup, Vec<f64>)> =
            vec![(SummaryGroup::Full, vec![]), (SummaryGroup::Treated, vec![]), (SummaryGroup::Control, vec![])];
        if matched_controls.is_some() {
            groups.push((SummaryGroup::MatchedControl, vec![]));
        }
        for (f, _) in ds.firms() {
            let Some(v) = ds.get(f, year).and_then(|o| o.value(var)) else { continue };
            let treated = ds.is_treated(f) == Some(true);
            groups[0].1.push(v);
            groups[if treated { 1 } else { 2 }].1.push(v);
            if matched_controls.is_some_and(|m| m.contains(f)) {
                groups[3].1.push(v);
            }
        }
        rows.extend(groups.iter().map(|(g, v)| summary_row(var, *g, year, v, opts)));
    }
    Ok(rows)
}

/// Drops observations of `var` outside the central `fraction` of its
/// distribution (over all observations where it is present). Observations
/// with `var` missing are kept.
pub fn trim_mid_quantile(ds: &PanelDataset, var: Variable, fraction: f64) -> Result<(PanelDataset, usize)> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("trim fraction {fraction} outside (0, 1]")));
    }
    let mut v: Vec<f64> = ds.observations().iter().filter_map(|o| o.value(var)).collect();
    v.sort_by(f64::total_cmp);
    let Some((lo, hi)) = central_bounds(&v, fraction) else {
        return Ok((ds.clone(), 0));
    };
    let before = ds.n_obs();
    let out = ds.filter_observations(|o| o.value(var).is_none_or(|x| x >= lo && x <= hi));
    let dropped = before - out.n_obs();
    Ok((out, dropped))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EqualityTest {
    pub p_value: Option<f64>,
    pub t: Option<f64>,
    pub n_treated: usize,
    /// `None` when suppressed for disclosure.
    pub n_controls: Option<usize>,
    pub reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BalanceRow {
    pub outcome: Variable,
    /// Log levels in the level year.
    pub level: EqualityTest,
    /// Log differences between the two trend years.
    pub trend: EqualityTest,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BalanceReport {
    pub level_year: i32,
    pub trend_years: (i32, i32),
    pub rows: Vec<BalanceRow>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BalanceOptions {
    pub suppress_control_n: bool,
}

fn equality_test(treated: &[f64], controls: &[(f64, f64)], suppress: bool) -> EqualityTest {
    let n_controls = (!suppress).then_some(controls.len());
    let base = EqualityTest { p_value: None, t: None, n_treated: treated.len(), n_controls, reason: None };
    if treated.len() < 2 || controls.len() < 2 {
        return EqualityTest { reason: Some("fewer than 2 units in a group".into()), ..base };
    }
    let a = weighted_sample(treated, &vec![1.0; treated.len()]);
    let (cv, cw): (Vec<f64>, Vec<f64>) = controls.iter().copied().unzip();
    let b = weighted_sample(&cv, &cw);
    match a.zip(b).and_then(|(a, b)| welch(a, b)) {
        Some(w) => EqualityTest { p_value: Some(w.p_value), t: Some(w.t), ..base },
        None => EqualityTest { reason: Some("degenerate sample".into()), ..base },
    }
}

/// Welch tests of treated against weighted controls on log levels in
/// `level_year` and on log changes between `trend_years`. Control weights
/// are the total matching weight each control receives.
pub fn balance_tests(
    ds: &PanelDataset,
    weights: &MatchWeights,
    outcomes: &[Variable],
    level_year: i32,
    trend_years: (i32, i32),
    opts: BalanceOptions,
) -> Result<BalanceReport> {
    let start = ds.config.phases.treatment_start();
    if trend_years.0 >= start || trend_years.1 >= start || level_year >= start {
        return Err(Error::Config(format!("balance years must precede treatment start {start}")));
    }
    let treated: Vec<&str> = weights.treated_ids();
    let controls = weights.control_weights();
    for f in treated.iter().chain(controls.keys()) {
        if ds.is_treated(f).is_none() {
            return Err(Error::UnknownFirm(f.to_string()));
        }
    }
    let level = |f: &str, var: Variable| ds.get(f, level_year).and_then(|o| o.log_value(var));
    let trend = |f: &str, var: Variable| {
        let a = ds.get(f, trend_years.0)?.log_value(var)?;
        let b = ds.get(f, trend_years.1)?.log_value(var)?;
        Some(b - a)
    };
    let rows = outcomes
        .iter()
        .map(|&var| {
            let test = |get: &dyn Fn(&str, Variable) -> Option<f64>| {
                let t: Vec<f64> = treated.iter().filter_map(|f| get(f, var)).collect();
                let c: Vec<(f64, f64)> = controls
                    .iter()
                    .filter(|(_, w)| **w > 0.0)
                    .filter_map(|(f, w)| get(f, var).map(|v| (v, *w)))
                    .collect();
                equality_test(&t, &c, opts.suppress_control_n)
            };
            let (level, trend) = (test(&level), test(&trend));
            BalanceRow { outcome: var, level, trend }
        })
        .collect();
    Ok(BalanceReport { level_year, trend_years, rows })
}

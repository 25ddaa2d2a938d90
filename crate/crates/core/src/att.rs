//! Average treatment effect on the treated: the conditional
//! difference-in-differences matching estimator and the reweighted
//! regression estimator.

use std::collections::BTreeMap;
use std::fmt;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matching::{Counterfactual, MatchWeights, Scheme};
use crate::panel::{PanelDataset, PhaseWindow, Variable, WindowLabel};
use crate::propensity::Design;
use crate::regression::{wls, Covariance};
use crate::stats::{norm_ppf, two_sided_normal_p};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Estimator {
    Nn { m: usize },
    ReweightedOls,
}

impl fmt::Display for Estimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Estimator::Nn { m } => write!(f, "NN(1:{m})"),
            Estimator::ReweightedOls => f.write_str("OLS-w/R"),
        }
    }
}

impl std::str::FromStr for Estimator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "OLS-w/R" || s == "ols" || s == "reweight" {
            return Ok(Estimator::ReweightedOls);
        }
        let m = s
            .strip_prefix("NN(1:")
            .and_then(|r| r.strip_suffix(')'))
            .or_else(|| s.strip_prefix("nn"))
            .and_then(|m| m.parse::<usize>().ok())
            .filter(|m| *m > 0)
            .ok_or_else(|| Error::Config(format!("unknown estimator `{s}`")))?;
        Ok(Estimator::Nn { m })
    }
}

/// Significance legend.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StarPolicy {
    /// `***` p<0.01, `**` p<0.05, `*` p<0.1.
    #[default]
    ThreeLevel,
    /// `*` p<0.05 only.
    FivePercent,
}

impl StarPolicy {
    pub fn stars(self, p: f64) -> &'static str {
        if !p.is_finite() {
            return "";
        }
        match self {
            StarPolicy::ThreeLevel if p < 0.01 => "***",
            StarPolicy::ThreeLevel if p < 0.05 => "**",
            StarPolicy::ThreeLevel if p < 0.1 => "*",
            StarPolicy::FivePercent if p < 0.05 => "*",
            _ => "",
        }
    }
}

/// Standard-error method for the matching estimator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum SeMethod {
    /// Sandwich from the weighted regression of the change on a treatment
    /// dummy, treated weight one and control weight `Σ_i W(i, k)`.
    #[default]
    Sandwich,
    /// Resample treated firms with replacement.
    Bootstrap { reps: usize, seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttEstimate {
    pub outcome: String,
    pub window: WindowLabel,
    pub estimator: Estimator,
    /// Log points.
    pub estimate: f64,
    pub se: f64,
    pub p_value: f64,
    pub stars: &'static str,
    pub n_treated: usize,
    pub n_controls: usize,
    /// Treated units without a defined change (or without any control with
    /// one).
    pub dropped_treated: usize,
}

impl AttEstimate {
    /// Normal-reference confidence interval.
    pub fn ci(&self, level: f64) -> (f64, f64) {
        let z = norm_ppf(0.5 + level / 2.0);
        (self.estimate - z * self.se, self.estimate + z * self.se)
    }
}

/// Result of contrasting treated changes with their weighted counterfactuals.
#[derive(Debug, Clone, PartialEq)]
pub struct Contrast {
    pub estimate: f64,
    pub se: f64,
    pub n_treated: usize,
    pub n_controls: usize,
    pub dropped_treated: usize,
    /// Per contributing treated unit: `Δ_i - Σ_k W(i,k) Δ_k`.
    pub contributions: Vec<(String, f64)>,
}

/// The matching contrast
/// `(1/N1) Σ_i { Δ_i - Σ_k W(i,k) Δ_k }` over treated units with a defined
/// change. Row weights are renormalized over controls whose change is
/// defined; a treated unit with no such control is dropped.
pub fn matched_contrast(deltas: &BTreeMap<String, f64>, weights: &MatchWeights, se: SeMethod) -> Result<Contrast> {
    let mut contributions = Vec::new();
    let mut control_mass: BTreeMap<&str, f64> = BTreeMap::new();
    let mut dropped = 0;
    let mut treated_delta = Vec::new();

    match &weights.counterfactual {
        Counterfactual::PerTreated(rows) => {
            for r in rows {
                let Some(&di) = deltas.get(&r.treated_id) else {
                    dropped += 1;
                    continue;
                };
                let mut sw = 0.0;
                let mut acc = 0.0;
                for nb in &r.neighbours {
                    if let Some(&dk) = deltas.get(&nb.control_id) {
                        sw += nb.weight;
                        acc += nb.weight * dk;
                    }
                }
                if sw <= 0.0 {
                    dropped += 1;
                    continue;
                }
                for nb in &r.neighbours {
                    if deltas.contains_key(&nb.control_id) {
                        *control_mass.entry(nb.control_id.as_str()).or_insert(0.0) += nb.weight / sw;
                    }
                }
                contributions.push((r.treated_id.clone(), di - acc / sw));
                treated_delta.push(di);
            }
        }
        Counterfactual::Pooled { treated, controls } => {
            let mut sw = 0.0;
            let mut acc = 0.0;
            for (k, w) in controls {
                if *w < 0.0 {
                    return Err(Error::NegativeWeight { firm: k.clone(), weight: *w });
                }
                if let Some(&dk) = deltas.get(k) {
                    sw += w;
                    acc += w * dk;
                }
            }
            let cf = if sw > 0.0 { Some(acc / sw) } else { None };
            for t in treated {
                match (deltas.get(t), cf) {
                    (Some(&di), Some(c)) => {
                        contributions.push((t.clone(), di - c));
                        treated_delta.push(di);
                    }
                    _ => dropped += 1,
                }
            }
            if !contributions.is_empty() {
                let n1 = contributions.len() as f64;
                for (k, w) in controls {
                    if deltas.contains_key(k) && *w > 0.0 {
                        control_mass.insert(k.as_str(), w / sw * n1);
                    }
                }
            }
        }
    }

    let n1 = contributions.len();
    if n1 == 0 {
        return Err(Error::NoContributingTreated(format!("{} weights", weights.scheme)));
    }
    let n1f = n1 as f64;
    let estimate = contributions.iter().map(|(_, c)| c).sum::<f64>() / n1f;

    let se = match se {
        SeMethod::Sandwich => {
            let mean_t = treated_delta.iter().sum::<f64>() / n1f;
            let mean_c = control_mass.iter().map(|(k, w)| w * deltas[*k]).sum::<f64>() / n1f;
            let vt: f64 = treated_delta.iter().map(|d| (d - mean_t).powi(2)).sum();
            let vc: f64 = control_mass.iter().map(|(k, w)| (w * (deltas[*k] - mean_c)).powi(2)).sum();
            (vt + vc).sqrt() / n1f
        }
        SeMethod::Bootstrap { reps, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let vals: Vec<f64> = contributions.iter().map(|(_, c)| *c).collect();
            let mut draws = Vec::with_capacity(reps);
            for _ in 0..reps {
                let mut s = 0.0;
                for _ in 0..n1 {
                    s += vals[rng.gen_range(0..n1)];
                }
                draws.push(s / n1f);
            }
            crate::stats::sample_sd(&draws).unwrap_or(f64::NAN)
        }
    };

    Ok(Contrast {
        estimate,
        se,
        n_treated: n1,
        n_controls: control_mass.len(),
        dropped_treated: dropped,
        contributions,
    })
}

/// `phase-mean ln y over window - ln y at pre_year`, per firm.
pub fn outcome_changes(
    ds: &PanelDataset,
    outcome: Variable,
    pre_year: i32,
    window: &PhaseWindow,
) -> BTreeMap<String, f64> {
    ds.firms()
        .filter_map(|(f, _)| {
            let pre = ds.get(f, pre_year)?.log_value(outcome)?;
            let post = ds.phase_mean_by(f, window, |o| o.log_value(outcome))?;
            Some((f.to_string(), post - pre))
        })
        .collect()
}

fn check_known(ds: &PanelDataset, weights: &MatchWeights) -> Result<()> {
    for t in weights.treated_ids() {
        if ds.is_treated(t).is_none() {
            return Err(Error::UnknownFirm(t.to_string()));
        }
    }
    for k in weights.control_weights().keys() {
        if ds.is_treated(k).is_none() {
            return Err(Error::UnknownFirm(k.to_string()));
        }
    }
    Ok(())
}

fn estimator_of(scheme: Scheme) -> Estimator {
    match scheme {
        Scheme::Nearest { m } => Estimator::Nn { m },
        Scheme::Reweight { .. } | Scheme::Unmatched => Estimator::ReweightedOls,
    }
}

/// Matching difference-in-differences ATT of `outcome` (in logs) between
/// `pre_year` and the phase mean over `window`.
pub fn did_matching_att(
    ds: &PanelDataset,
    weights: &MatchWeights,
    outcome: Variable,
    pre_year: i32,
    window: &PhaseWindow,
    se: SeMethod,
    stars: StarPolicy,
) -> Result<AttEstimate> {
    check_known(ds, weights)?;
    let deltas = outcome_changes(ds, outcome, pre_year, window);
    let c = matched_contrast(&deltas, weights, se).map_err(|e| match e {
        Error::NoContributingTreated(_) => Error::NoContributingTreated(format!("{outcome} {}", window.label)),
        e => e,
    })?;
    let p = two_sided_normal_p(c.estimate / c.se);
    Ok(AttEstimate {
        outcome: outcome.to_string(),
        window: window.label,
        estimator: estimator_of(weights.scheme),
        estimate: c.estimate,
        se: c.se,
        p_value: p,
        stars: stars.stars(p),
        n_treated: c.n_treated,
        n_controls: c.n_controls,
        dropped_treated: c.dropped_treated,
    })
}

/// The estimation sample of the reweighted regression: one row per
/// (firm, post year) with `Δy = ln y_t - ln y_pre`.
#[derive(Debug, Clone)]
pub struct RegressionSample {
    pub firms: Vec<String>,
    pub years: Vec<i32>,
    pub dy: Vec<f64>,
    pub treated: Vec<bool>,
    pub weight: Vec<f64>,
}

fn regression_sample(
    ds: &PanelDataset,
    weights: &MatchWeights,
    outcome: Variable,
    pre_year: i32,
    window: &PhaseWindow,
    covariate_rows: Option<&BTreeMap<&str, usize>>,
) -> Result<(RegressionSample, usize)> {
    let Counterfactual::Pooled { treated, controls } = &weights.counterfactual else {
        return Err(Error::Config("reweighted regression needs reweight-scheme weights".into()));
    };
    let units = treated.iter().map(|t| (t, 1.0, true)).chain(controls.iter().map(|(k, w)| (k, *w, false)));
    let mut s = RegressionSample { firms: vec![], years: vec![], dy: vec![], treated: vec![], weight: vec![] };
    let mut dropped = 0;
    for (f, w, d) in units {
        if w < 0.0 || !w.is_finite() {
            return Err(Error::NegativeWeight { firm: f.clone(), weight: w });
        }
        if ds.is_treated(f).is_none() {
            return Err(Error::UnknownFirm(f.clone()));
        }
        let has_cov = covariate_rows.is_none_or(|r| r.contains_key(f.as_str()));
        let pre = ds.get(f, pre_year).and_then(|o| o.log_value(outcome));
        let mut any = false;
        if let (Some(pre), true) = (pre, has_cov) {
            for o in ds.firm(f).iter().filter(|o| window.contains(o.year)) {
                if let Some(v) = o.log_value(outcome) {
                    s.firms.push(f.clone());
                    s.years.push(o.year);
                    s.dy.push(v - pre);
                    s.treated.push(d);
                    s.weight.push(w);
                    any = true;
                }
            }
        }
        if d && !any {
            dropped += 1;
        }
    }
    Ok((s, dropped))
}

/// Weighted regression `Δy = const + α D + x'β + e` with treated weight one
/// and control weight `p/(1-p)`. Pooled windows contribute one row per
/// firm-year and use firm-clustered errors; single years use HC1.
pub fn reweighted_ols_att(
    ds: &PanelDataset,
    weights: &MatchWeights,
    outcome: Variable,
    covariates: Option<&Design>,
    pre_year: i32,
    window: &PhaseWindow,
    stars: StarPolicy,
) -> Result<AttEstimate> {
    let cov_rows = covariates.map(|d| d.row_index());
    let (s, dropped) = regression_sample(ds, weights, outcome, pre_year, window, cov_rows.as_ref())?;
    let n_treated = s
        .treated
        .iter()
        .zip(&s.firms)
        .filter(|(d, _)| **d)
        .map(|(_, f)| f)
        .collect::<std::collections::BTreeSet<_>>()
        .len();
    if n_treated == 0 {
        return Err(Error::NoContributingTreated(format!("{outcome} {}", window.label)));
    }
    let n_controls = s
        .treated
        .iter()
        .zip(&s.firms)
        .zip(&s.weight)
        .filter(|((d, _), w)| !**d && **w > 0.0)
        .map(|((_, f), _)| f)
        .collect::<std::collections::BTreeSet<_>>()
        .len();

    let mut names = vec!["const".to_string(), "treated".to_string()];
    let extra = covariates.map(|d| d.without_intercept());
    if let Some(e) = &extra {
        names.extend(e.names.iter().cloned());
    }
    let n = s.dy.len();
    let k = names.len();
    let mut x = DMatrix::zeros(n, k);
    for i in 0..n {
        x[(i, 0)] = 1.0;
        x[(i, 1)] = if s.treated[i] { 1.0 } else { 0.0 };
        if let (Some(e), Some(rows)) = (&extra, &cov_rows) {
            let r = rows[s.firms[i].as_str()];
            for j in 0..e.names.len() {
                x[(i, 2 + j)] = e.x[(r, j)];
            }
        }
    }
    let fit = wls(&x, &DVector::from_vec(s.dy.clone()), &DVector::from_vec(s.weight.clone()), &names)?;
    let se = if window.first == window.last {
        fit.std_errors(Covariance::Hc1)[1]
    } else {
        let mut ids: BTreeMap<&str, usize> = BTreeMap::new();
        let labels: Vec<usize> = s
            .firms
            .iter()
            .map(|f| {
                let next = ids.len();
                *ids.entry(f.as_str()).or_insert(next)
            })
            .collect();
        fit.std_errors(Covariance::Cluster(&labels))[1]
    };
    let estimate = fit.coef[1];
    let p = two_sided_normal_p(estimate / se);
    Ok(AttEstimate {
        outcome: outcome.to_string(),
        window: window.label,
        estimator: Estimator::ReweightedOls,
        estimate,
        se,
        p_value: p,
        stars: stars.stars(p),
        n_treated,
        n_controls,
        dropped_treated: dropped,
    })
}

/// Grid request: every outcome × estimator × window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttRequest {
    pub outcomes: Vec<Variable>,
    pub estimators: Vec<Estimator>,
    pub windows: Vec<PhaseWindow>,
    pub pre_year: i32,
    pub se: SeMethod,
    pub stars: StarPolicy,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttCell {
    pub outcome: Variable,
    pub window: WindowLabel,
    pub estimator: Estimator,
    pub result: std::result::Result<AttEstimate, String>,
}

/// Evaluates the full grid. Cells are independent; a failing cell carries
/// its error message instead of aborting the grid.
pub fn att_table(
    ds: &PanelDataset,
    req: &AttRequest,
    weights: &BTreeMap<Estimator, MatchWeights>,
    covariates: Option<&Design>,
) -> Vec<AttCell> {
    let mut cells = Vec::new();
    for &outcome in &req.outcomes {
        for w in &req.windows {
            for &est in &req.estimators {
                cells.push((outcome, *w, est));
            }
        }
    }
    cells
        .par_iter()
        .map(|&(outcome, window, estimator)| {
            let result = match weights.get(&estimator) {
                None => Err(format!("no weights for {estimator}")),
                Some(mw) => match estimator {
                    Estimator::Nn { .. } => did_matching_att(ds, mw, outcome, req.pre_year, &window, req.se, req.stars),
                    Estimator::ReweightedOls => {
                        reweighted_ols_att(ds, mw, outcome, covariates, req.pre_year, &window, req.stars)
                    }
                }
                .map_err(|e| e.to_string()),
            };
            AttCell { outcome, window: window.label, estimator, result }
        })
        .collect()
}

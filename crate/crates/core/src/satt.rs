//! Sample average treatment effect on the treated for distance-to-frontier
//! outcomes: year-by-year and phase-pooled matched contrasts.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::att::{matched_contrast, SeMethod};
use crate::error::{Error, Result};
use crate::frontier::EfficiencyScore;
use crate::matching::{MatchWeights, Scheme};
use crate::panel::{PanelDataset, PhaseWindow, WindowLabel};
use crate::stats::two_sided_normal_p;

/// Firm-year distances keyed by firm, then year.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DistanceTable {
    by_firm: BTreeMap<String, BTreeMap<i32, f64>>,
}

impl DistanceTable {
    pub fn from_scores<'a>(scores: impl IntoIterator<Item = &'a EfficiencyScore>) -> Self {
        let mut t = DistanceTable::default();
        for s in scores {
            if let Some(d) = s.distance {
                t.insert(&s.firm_id, s.year, d);
            }
        }
        t
    }

    pub fn insert(&mut self, firm: &str, year: i32, distance: f64) {
        self.by_firm.entry(firm.to_string()).or_default().insert(year, distance);
    }

    pub fn get(&self, firm: &str, year: i32) -> Option<f64> {
        self.by_firm.get(firm)?.get(&year).copied()
    }

    pub fn contains_firm(&self, firm: &str) -> bool {
        self.by_firm.contains_key(firm)
    }

    /// `d_t - d_base` per firm.
    pub fn changes(&self, year: i32, base_year: i32) -> BTreeMap<String, f64> {
        self.by_firm.iter().filter_map(|(f, m)| Some((f.clone(), m.get(&year)? - m.get(&base_year)?))).collect()
    }

    /// Firm mean over the window's years of `d_t - d_base`.
    pub fn phase_changes(&self, window: &PhaseWindow, base_year: i32) -> BTreeMap<String, f64> {
        self.by_firm
            .iter()
            .filter_map(|(f, m)| {
                let base = m.get(&base_year)?;
                let diffs: Vec<f64> = window.years().filter_map(|y| m.get(&y).map(|d| d - base)).collect();
                (!diffs.is_empty()).then(|| (f.clone(), diffs.iter().sum::<f64>() / diffs.len() as f64))
            })
            .collect()
    }
}

/// Two-sided 5% critical value of the standard normal.
pub const Z_CRIT_5: f64 = 1.959_963_984_540_054;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SattEstimate {
    pub window: WindowLabel,
    pub base_year: i32,
    pub neighbours: usize,
    pub industry: Option<u16>,
    /// Log-output units; negative means treated firms moved closer to the
    /// frontier.
    pub tau: f64,
    pub se: f64,
    pub p_value: f64,
    /// `|τ/SE| > 1.96`.
    pub significant: bool,
    pub n_treated: usize,
    pub n_controls: usize,
    pub dropped_treated: usize,
}

impl SattEstimate {
    pub fn tau_pct(&self) -> f64 {
        100.0 * self.tau
    }

    pub fn se_pct(&self) -> f64 {
        100.0 * self.se
    }
}

fn neighbours_of(weights: &MatchWeights) -> usize {
    match weights.scheme {
        Scheme::Nearest { m } => m,
        _ => 0,
    }
}

fn check_firms(scores: &DistanceTable, weights: &MatchWeights) -> Result<()> {
    for f in weights.treated_ids().into_iter().chain(weights.control_weights().into_keys()) {
        if !scores.contains_firm(f) {
            return Err(Error::UnknownFirm(f.to_string()));
        }
    }
    Ok(())
}

fn finish(
    deltas: BTreeMap<String, f64>,
    weights: &MatchWeights,
    window: WindowLabel,
    base_year: i32,
    industry: Option<u16>,
) -> Result<SattEstimate> {
    let c = matched_contrast(&deltas, weights, SeMethod::Sandwich).map_err(|e| match e {
        Error::NoContributingTreated(_) => Error::NoContributingTreated(format!("distance {window} vs {base_year}")),
        e => e,
    })?;
    let z = c.estimate / c.se;
    Ok(SattEstimate {
        window,
        base_year,
        neighbours: neighbours_of(weights),
        industry,
        tau: c.estimate,
        se: c.se,
        p_value: two_sided_normal_p(z),
        significant: z.abs() > Z_CRIT_5,
        n_treated: c.n_treated,
        n_controls: c.n_controls,
        dropped_treated: c.dropped_treated,
    })
}

/// Matched contrast of `d_year - d_base`.
pub fn satt_year(scores: &DistanceTable, weights: &MatchWeights, year: i32, base_year: i32) -> Result<SattEstimate> {
    check_firms(scores, weights)?;
    finish(scores.changes(year, base_year), weights, WindowLabel::Year(year), base_year, None)
}

/// Matched contrast of the firm-level mean of `d_t - d_base` over the phase.
pub fn satt_phase(
    scores: &DistanceTable,
    weights: &MatchWeights,
    phase: &PhaseWindow,
    base_year: i32,
) -> Result<SattEstimate> {
    check_firms(scores, weights)?;
    finish(scores.phase_changes(phase, base_year), weights, phase.label, base_year, None)
}

/// `satt_phase` restricted to treated firms of one industry. `None` is the
/// unfiltered estimate.
pub fn industry_subset_satt(
    scores: &DistanceTable,
    ds: &PanelDataset,
    weights: &MatchWeights,
    phase: &PhaseWindow,
    base_year: i32,
    industry: Option<u16>,
) -> Result<SattEstimate> {
    let Some(code) = industry else {
        return satt_phase(scores, weights, phase, base_year);
    };
    let sub = weights.restrict_treated(|t| ds.industry_of(t) == Some(code));
    if sub.n_treated() == 0 {
        return Err(Error::EmptyIndustry(code));
    }
    check_firms(scores, &sub)?;
    finish(scores.phase_changes(phase, base_year), &sub, phase.label, base_year, Some(code))
}

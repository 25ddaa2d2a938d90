//! Counterfactual weights: nearest-neighbour matching on the propensity score
//! (with replacement) and odds reweighting.

use std::collections::BTreeMap;
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::propensity::ScoredUnit;

/// Neighbour-count presets.
pub const NEIGHBOUR_PRESETS: [usize; 3] = [1, 5, 20];

/// Row sums of per-treated weights must equal one within this tolerance.
pub const ROW_SUM_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "snake_case")]
pub enum Scheme {
    Nearest {
        m: usize,
    },
    /// Controls weighted by `p / (1 - p)`; optionally rescaled so the control
    /// weights sum to the number of treated units.
    Reweight {
        normalized: bool,
    },
    /// Every control with weight one (the unmatched comparison).
    Unmatched,
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scheme::Nearest { m } => write!(f, "NN(1:{m})"),
            Scheme::Reweight { .. } => f.write_str("reweight"),
            Scheme::Unmatched => f.write_str("unmatched"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceScale {
    /// `|p_i - p_k|`
    #[default]
    Probability,
    /// `|x_i'b - x_k'b|`
    Index,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MatchOptions {
    pub distance: DistanceScale,
    /// Only match controls from the treated unit's own industry.
    pub exact_on_industry: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Neighbour {
    pub control_id: String,
    pub weight: f64,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MatchRow {
    pub treated_id: String,
    pub neighbours: Vec<Neighbour>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Counterfactual {
    /// Explicit `W(i, k)` rows, each summing to one.
    PerTreated(Vec<MatchRow>),
    /// One control weight vector shared by every treated unit; the implied
    /// `W(i, k)` is `w_k / Σ w`.
    Pooled { treated: Vec<String>, controls: Vec<(String, f64)> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchWeights {
    pub scheme: Scheme,
    pub counterfactual: Counterfactual,
    /// Treated units left without a candidate control (only possible with
    /// exact industry matching).
    pub unmatched: Vec<String>,
}

impl MatchWeights {
    pub fn treated_ids(&self) -> Vec<&str> {
        match &self.counterfactual {
            Counterfactual::PerTreated(rows) => rows.iter().map(|r| r.treated_id.as_str()).collect(),
            Counterfactual::Pooled { treated, .. } => treated.iter().map(String::as_str).collect(),
        }
    }

    pub fn n_treated(&self) -> usize {
        match &self.counterfactual {
            Counterfactual::PerTreated(rows) => rows.len(),
            Counterfactual::Pooled { treated, .. } => treated.len(),
        }
    }

    /// Total weight each control receives, `Σ_i W(i, k)` (or the pooled
    /// weight itself), sorted by firm id.
    pub fn control_weights(&self) -> BTreeMap<&str, f64> {
        let mut out = BTreeMap::new();
        match &self.counterfactual {
            Counterfactual::PerTreated(rows) => {
                for r in rows {
                    for nb in &r.neighbours {
                        *out.entry(nb.control_id.as_str()).or_insert(0.0) += nb.weight;
                    }
                }
            }
            Counterfactual::Pooled { controls, .. } => {
                for (k, w) in controls {
                    out.insert(k.as_str(), *w);
                }
            }
        }
        out
    }

    /// Keeps only treated units for which `keep` holds. Pooled control
    /// weights are left untouched.
    pub fn restrict_treated(&self, mut keep: impl FnMut(&str) -> bool) -> MatchWeights {
        let counterfactual = match &self.counterfactual {
            Counterfactual::PerTreated(rows) => {
                Counterfactual::PerTreated(rows.iter().filter(|r| keep(&r.treated_id)).cloned().collect())
            }
            Counterfactual::Pooled { treated, controls } => Counterfactual::Pooled {
                treated: treated.iter().filter(|t| keep(t)).cloned().collect(),
                controls: controls.clone(),
            },
        };
        MatchWeights { scheme: self.scheme, counterfactual, unmatched: self.unmatched.clone() }
    }

    /// Drops every unit, treated or control, for which `keep` fails.
    /// Neighbour weights are not renormalised; contrasts already rescale
    /// over the controls that remain.
    pub fn retain_units(&self, keep: impl Fn(&str) -> bool) -> MatchWeights {
        let counterfactual = match &self.counterfactual {
            Counterfactual::PerTreated(rows) => Counterfactual::PerTreated(
                rows.iter()
                    .filter(|r| keep(&r.treated_id))
                    .map(|r| MatchRow {
                        treated_id: r.treated_id.clone(),
                        neighbours: r.neighbours.iter().filter(|n| keep(&n.control_id)).cloned().collect(),
                    })
                    .collect(),
            ),
            Counterfactual::Pooled { treated, controls } => Counterfactual::Pooled {
                treated: treated.iter().filter(|t| keep(t)).cloned().collect(),
                controls: controls.iter().filter(|(k, _)| keep(k)).cloned().collect(),
            },
        };
        MatchWeights { scheme: self.scheme, counterfactual, unmatched: self.unmatched.clone() }
    }

    /// Flat `(treated_id, control_id, weight, distance)` rows for export.
    /// Pooled weights are listed once per control with an empty treated id.
    pub fn table(&self) -> Vec<(String, String, f64, Option<f64>)> {
        match &self.counterfactual {
            Counterfactual::PerTreated(rows) => rows
                .iter()
                .flat_map(|r| {
                    r.neighbours
                        .iter()
                        .map(|n| (r.treated_id.clone(), n.control_id.clone(), n.weight, Some(n.distance)))
                })
                .collect(),
            Counterfactual::Pooled { controls, .. } => {
                controls.iter().map(|(k, w)| (String::new(), k.clone(), *w, None)).collect()
            }
        }
    }
}

fn key(u: &ScoredUnit, scale: DistanceScale) -> f64 {
    match scale {
        DistanceScale::Probability => u.p,
        DistanceScale::Index => u.index,
    }
}

/// Controls sorted by (score, firm id).
struct Pool<'a> {
    units: Vec<(f64, &'a str)>,
}

impl<'a> Pool<'a> {
    fn new(controls: impl Iterator<Item = (f64, &'a str)>) -> Self {
        let mut units: Vec<_> = controls.collect();
        units.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(b.1)));
        Pool { units }
    }

    /// The `m` nearest controls to `s`, ordered by (distance, firm id).
    /// Expands outward from the insertion point until every candidate not
    /// yet visited is strictly farther than the m-th best.
    fn nearest(&self, s: f64, m: usize) -> Vec<(f64, &'a str)> {
        let n = self.units.len();
        let m = m.min(n);
        let pos = self.units.partition_point(|(v, _)| *v < s);
        let (mut lo, mut hi) = (pos, pos); // next left = lo - 1, next right = hi
        let mut cand: Vec<(f64, &'a str)> = Vec::with_capacity(m + 4);
        loop {
            let dl = (lo > 0).then(|| s - self.units[lo - 1].0);
            let dr = (hi < n).then(|| self.units[hi].0 - s);
            let next = match (dl, dr) {
                (None, None) => break,
                (Some(a), None) => a,
                (None, Some(b)) => b,
                (Some(a), Some(b)) => a.min(b),
            };
            if cand.len() >= m {
                let worst = cand[m - 1].0;
                if next > worst {
                    break;
                }
            }
            // take every unit at exactly this distance on both sides
            while lo > 0 && s - self.units[lo - 1].0 == next {
                lo -= 1;
                cand.push((next, self.units[lo].1));
            }
            while hi < n && self.units[hi].0 - s == next {
                cand.push((next, self.units[hi].1));
                hi += 1;
            }
            cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(b.1)));
        }
        cand.truncate(m);
        cand
    }
}

/// Matches every treated unit to its `m` nearest controls, with replacement.
/// Ties are broken by firm id.
pub fn nn_match(scored: &[ScoredUnit], m: usize, opts: MatchOptions) -> Result<MatchWeights> {
    if m == 0 {
        return Err(Error::Config("neighbour count must be at least 1".into()));
    }
    let controls: Vec<&ScoredUnit> = scored.iter().filter(|u| !u.treated).collect();
    if controls.is_empty() {
        return Err(Error::EmptyControls);
    }
    let mut pools: BTreeMap<Option<u16>, Pool<'_>> = BTreeMap::new();
    if opts.exact_on_industry {
        let mut by: BTreeMap<Option<u16>, Vec<(f64, &str)>> = BTreeMap::new();
        for c in &controls {
            by.entry(c.industry).or_default().push((key(c, opts.distance), c.firm_id.as_str()));
        }
        for (k, v) in by {
            pools.insert(k, Pool::new(v.into_iter()));
        }
    } else {
        pools.insert(None, Pool::new(controls.iter().map(|c| (key(c, opts.distance), c.firm_id.as_str()))));
    }

    let treated: Vec<&ScoredUnit> = scored.iter().filter(|u| u.treated).collect();
    let matched: Vec<Option<MatchRow>> = treated
        .par_iter()
        .map(|t| {
            let pool = if opts.exact_on_industry { pools.get(&t.industry)? } else { pools.get(&None)? };
            let found = pool.nearest(key(t, opts.distance), m);
            if found.is_empty() {
                return None;
            }
            let w = 1.0 / found.len() as f64;
            Some(MatchRow {
                treated_id: t.firm_id.clone(),
                neighbours: found
                    .into_iter()
                    .map(|(d, id)| Neighbour { control_id: id.to_string(), weight: w, distance: d })
                    .collect(),
            })
        })
        .collect();
    let mut rows = Vec::with_capacity(matched.len());
    let mut unmatched = Vec::new();
    for (t, r) in treated.iter().zip(matched) {
        match r {
            Some(r) => rows.push(r),
            None => unmatched.push(t.firm_id.clone()),
        }
    }
    Ok(MatchWeights { scheme: Scheme::Nearest { m }, counterfactual: Counterfactual::PerTreated(rows), unmatched })
}

/// Odds weights `p / (1 - p)` for every control.
pub fn reweight(scored: &[ScoredUnit], normalized: bool) -> Result<MatchWeights> {
    let mut treated = Vec::new();
    let mut controls = Vec::new();
    for u in scored {
        if !(u.p > 0.0 && u.p < 1.0) || 1.0 - u.p <= f64::EPSILON {
            return Err(Error::PropensityAtOne(u.firm_id.clone()));
        }
        if u.treated {
            treated.push(u.firm_id.clone());
        } else {
            controls.push((u.firm_id.clone(), u.p / (1.0 - u.p)));
        }
    }
    if controls.is_empty() {
        return Err(Error::EmptyControls);
    }
    if normalized {
        let total: f64 = controls.iter().map(|(_, w)| w).sum();
        let scale = treated.len() as f64 / total;
        for (_, w) in &mut controls {
            *w *= scale;
        }
    }
    Ok(MatchWeights {
        scheme: Scheme::Reweight { normalized },
        counterfactual: Counterfactual::Pooled { treated, controls },
        unmatched: Vec::new(),
    })
}

/// Every control with weight one; the pre-matching comparison.
pub fn unmatched(scored: &[ScoredUnit]) -> MatchWeights {
    let treated = scored.iter().filter(|u| u.treated).map(|u| u.firm_id.clone()).collect();
    let controls = scored.iter().filter(|u| !u.treated).map(|u| (u.firm_id.clone(), 1.0)).collect();
    MatchWeights {
        scheme: Scheme::Unmatched,
        counterfactual: Counterfactual::Pooled { treated, controls },
        unmatched: Vec::new(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MatchQuality {
    /// Mean over treated units of `Σ_k W(i,k) |p_i - p_k|`.
    pub mean_distance: Option<f64>,
    /// Largest `|p_i - p_k|` over matched pairs with positive weight.
    pub max_distance: Option<f64>,
    pub distinct_controls: usize,
    /// Number of treated units each control serves.
    pub reuse: BTreeMap<String, usize>,
}

/// Score distances and control reuse. Distances need per-treated rows and
/// are `None` for pooled weights; units missing from `scored` are skipped.
pub fn match_quality(weights: &MatchWeights, scored: &[ScoredUnit]) -> MatchQuality {
    let p: BTreeMap<&str, f64> = scored.iter().map(|u| (u.firm_id.as_str(), u.p)).collect();
    let mut reuse: BTreeMap<String, usize> = BTreeMap::new();
    let mut per_treated = Vec::new();
    let mut max_distance: Option<f64> = None;
    match &weights.counterfactual {
        Counterfactual::PerTreated(rows) => {
            for r in rows {
                let Some(&pt) = p.get(r.treated_id.as_str()) else { continue };
                let mut d = 0.0;
                for nb in r.neighbours.iter().filter(|nb| nb.weight > 0.0) {
                    *reuse.entry(nb.control_id.clone()).or_default() += 1;
                    let Some(&pc) = p.get(nb.control_id.as_str()) else { continue };
                    let gap = (pt - pc).abs();
                    d += nb.weight * gap;
                    max_distance = Some(max_distance.map_or(gap, |m| m.max(gap)));
                }
                per_treated.push(d);
            }
        }
        Counterfactual::Pooled { treated, controls } => {
            for (k, _) in controls.iter().filter(|(_, w)| *w > 0.0) {
                reuse.insert(k.clone(), treated.len());
            }
        }
    }
    let mean_distance = (!per_treated.is_empty()).then(|| per_treated.iter().sum::<f64>() / per_treated.len() as f64);
    MatchQuality { mean_distance, max_distance, distinct_controls: reuse.len(), reuse }
}

//! End-to-end run: ingest (or simulate), describe, propensity, match,
//! balance, ATT grid, and optionally frontier and SATT. Every output is a
//! CSV or JSON file in one directory; the same config produces the same
//! bytes regardless of thread count.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::att::{att_table, AttCell, AttRequest, Estimator, SeMethod, StarPolicy};
use crate::descstats::{
    balance_tests, summarize, trim_mid_quantile, BalanceOptions, BalanceReport, SummaryOptions, SummaryRow,
};
use crate::error::{Error, ErrorKind, Result};
use crate::frontier::{
    efficiency_scores, fit_frontier, frontier_data, indexed_median_series, median_distance_series, returns_to_scale,
    EfficiencyScore, FrontierModel, FrontierOptions, InefficiencyLaw, DEFAULT_MIN_OBS, EXCLUDED_INDUSTRIES,
    FRONTIER_GRAD_TOL, FRONTIER_MAX_ITER,
};
use crate::matching::{nn_match, reweight, unmatched, MatchOptions, MatchWeights};
use crate::panel::{
    fmt_f64, fmt_opt, ingest_csv, write_csv, ColumnMapping, PanelConfig, PanelDataset, PhaseWindow, PhaseWindows,
    Variable, WindowLabel,
};
use crate::propensity::{
    build_design, default_covariates, enforce_common_support, fit_probit, predict, Covariate, PropensityModel,
    SupportRule,
};
use crate::satt::{industry_subset_satt, satt_phase, satt_year, DistanceTable, SattEstimate};
use crate::synthgen::{generate, preset, GroundTruth};

pub const BUNDLE_FILES: [&str; 7] = [
    "table1.csv",
    "table2.csv",
    "att_grid.csv",
    "frontier_coeffs.csv",
    "distance_series.csv",
    "satt_table.csv",
    "run_manifest.json",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FrontierSettings {
    pub enabled: bool,
    pub first_year: i32,
    pub last_year: i32,
    pub law: InefficiencyLaw,
    pub min_obs: usize,
    pub base_year: i32,
    pub neighbours: Vec<usize>,
    pub windows: PhaseWindows,
    pub years: Vec<i32>,
}

impl Default for FrontierSettings {
    fn default() -> Self {
        FrontierSettings {
            enabled: true,
            first_year: 2003,
            last_year: 2012,
            law: InefficiencyLaw::HalfNormal,
            min_obs: DEFAULT_MIN_OBS,
            base_year: 2003,
            neighbours: vec![1, 5, 20],
            windows: PhaseWindows::efficiency(),
            years: (2005..=2012).collect(),
        }
    }
}

/// Full run configuration. Read from TOML; every key is optional.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Panel CSV. When absent, a synthetic panel is drawn from `preset`.
    pub input: Option<PathBuf>,
    pub columns: ColumnMapping,
    pub preset: String,
    /// Overrides the preset's firm count.
    pub n_firms: Option<usize>,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub first_year: i32,
    pub last_year: i32,
    pub outcomes: Vec<Variable>,
    /// Empty means the default covariate set.
    pub covariates: Vec<String>,
    pub support: String,
    pub neighbours: Vec<usize>,
    /// Nearest-neighbour matches only within the treated firm's industry.
    pub match_within_industry: bool,
    pub reweight: bool,
    /// Add the assignment covariates to the reweighted regression.
    pub ols_covariates: bool,
    pub windows: PhaseWindows,
    pub pre_year: i32,
    pub level_year: i32,
    pub trend_years: (i32, i32),
    pub se: SeMethod,
    pub stars: StarPolicy,
    pub trim: Option<f64>,
    pub disclosure_floor: usize,
    pub frontier: FrontierSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            input: None,
            columns: ColumnMapping::identity(),
            preset: "table3_phase2".into(),
            n_firms: None,
            seed: 20_050_101,
            output_dir: PathBuf::from("out"),
            first_year: 2002,
            last_year: 2012,
            outcomes: vec![
                Variable::Co2,
                Variable::Co2Intensity,
                Variable::Employees,
                Variable::Output,
                Variable::Exports,
                Variable::AvgWage,
            ],
            covariates: Vec::new(),
            support: "minmax".into(),
            neighbours: vec![1, 5, 20],
            match_within_industry: false,
            reweight: true,
            ols_covariates: false,
            windows: PhaseWindows::emissions(),
            pre_year: 2004,
            level_year: 2003,
            trend_years: (2002, 2003),
            se: SeMethod::Sandwich,
            stars: StarPolicy::ThreeLevel,
            trim: Some(0.98),
            disclosure_floor: 0,
            frontier: FrontierSettings::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn covariate_list(&self) -> Result<Vec<Covariate>> {
        if self.covariates.is_empty() {
            return Ok(default_covariates(self.level_year, self.trend_years.0));
        }
        self.covariates.iter().map(|c| Covariate::parse(c)).collect()
    }

    pub fn support_rule(&self) -> Result<SupportRule> {
        self.support.parse()
    }

    pub fn estimators(&self) -> Vec<Estimator> {
        let mut out: Vec<Estimator> = self.neighbours.iter().map(|&m| Estimator::Nn { m }).collect();
        if self.reweight {
            out.push(Estimator::ReweightedOls);
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.covariate_list()?;
        self.support_rule()?;
        if self.outcomes.is_empty() {
            return Err(Error::Config("no outcomes".into()));
        }
        if self.neighbours.iter().chain(&self.frontier.neighbours).any(|&m| m == 0) {
            return Err(Error::Config("neighbour counts must be positive".into()));
        }
        if self.estimators().is_empty() {
            return Err(Error::Config("no estimators selected".into()));
        }
        let start = self.windows.treatment_start();
        if self.pre_year >= start || self.level_year >= start {
            return Err(Error::Config(format!("base years must precede treatment start {start}")));
        }
        if let Some(t) = self.trim {
            if !(t > 0.0 && t <= 1.0) {
                return Err(Error::Config(format!("trim fraction {t} outside (0, 1]")));
            }
        }
        Ok(())
    }

    fn panel_config(&self) -> PanelConfig {
        PanelConfig { first_year: self.first_year, last_year: self.last_year, phases: self.windows.clone() }
    }
}

/// Loads the configured panel (or draws the synthetic one).
pub fn load_panel(cfg: &RunConfig) -> Result<(PanelDataset, Option<GroundTruth>)> {
    match &cfg.input {
        Some(path) => {
            let file = fs::File::open(path)?;
            let (ds, _) = ingest_csv(std::io::BufReader::new(file), &cfg.columns, cfg.panel_config())?;
            Ok((ds, None))
        }
        None => {
            let mut sc = preset(&cfg.preset)?;
            sc.seed = cfg.seed;
            if let Some(n) = cfg.n_firms {
                sc.n_firms = n;
            }
            let (ds, truth) = generate(&sc)?;
            Ok((ds, Some(truth)))
        }
    }
}

/// Fitted propensity model, scored units after common support, and the
/// matching weights per estimator.
#[derive(Debug, Clone)]
pub struct MatchedSample {
    pub model: PropensityModel,
    pub design: crate::propensity::Design,
    pub dropped_off_support: Vec<String>,
    pub weights: BTreeMap<Estimator, MatchWeights>,
    pub unmatched: MatchWeights,
}

pub fn match_sample(ds: &PanelDataset, cfg: &RunConfig) -> Result<MatchedSample> {
    let (design, d, _) = build_design(ds, &cfg.covariate_list()?);
    let model = fit_probit(&design.x, &d, &design.names)?;
    let scored = predict(&model, &design, &d, |f| ds.industry_of(f))?;
    let support = enforce_common_support(&scored, cfg.support_rule()?)?;
    let opts = MatchOptions { exact_on_industry: cfg.match_within_industry, ..Default::default() };
    let mut weights = BTreeMap::new();
    for &m in &cfg.neighbours {
        weights.insert(Estimator::Nn { m }, nn_match(&support.retained, m, opts)?);
    }
    if cfg.reweight {
        weights.insert(Estimator::ReweightedOls, reweight(&support.retained, false)?);
    }
    Ok(MatchedSample {
        model,
        design,
        dropped_off_support: support.dropped.into_iter().map(|u| u.firm_id).collect(),
        weights,
        unmatched: unmatched(&support.retained),
    })
}

/// The ATT grid: a placebo row for the pre-treatment window (base year one
/// before the window) and Phase I / Phase II rows against `pre_year`.
pub fn att_grid(ds: &PanelDataset, cfg: &RunConfig, sample: &MatchedSample) -> Vec<AttCell> {
    let covariates = cfg.ols_covariates.then_some(&sample.design);
    let req = |windows: Vec<PhaseWindow>, pre_year| AttRequest {
        outcomes: cfg.outcomes.clone(),
        estimators: cfg.estimators(),
        windows,
        pre_year,
        se: cfg.se,
        stars: cfg.stars,
    };
    let pre = cfg.windows.pretreatment;
    let mut cells = att_table(ds, &req(vec![pre], pre.first - 1), &sample.weights, covariates);
    cells.extend(att_table(
        ds,
        &req(vec![cfg.windows.phase1, cfg.windows.phase2], cfg.pre_year),
        &sample.weights,
        covariates,
    ));
    cells
}

#[derive(Debug)]
pub struct FrontierFit {
    pub industry: u16,
    pub n_obs: usize,
    pub result: std::result::Result<FrontierModel, Error>,
}

/// Fits every eligible industry in parallel.
pub fn fit_frontiers(ds: &PanelDataset, fs_cfg: &FrontierSettings) -> Vec<FrontierFit> {
    let industries: Vec<u16> = ds.industries().into_iter().filter(|i| !EXCLUDED_INDUSTRIES.contains(i)).collect();
    let opts = FrontierOptions {
        law: fs_cfg.law,
        min_obs: fs_cfg.min_obs,
        max_iter: FRONTIER_MAX_ITER,
        grad_tol: FRONTIER_GRAD_TOL,
    };
    industries
        .par_iter()
        .map(|&industry| {
            let (data, _) = frontier_data(ds, industry, fs_cfg.first_year..=fs_cfg.last_year);
            FrontierFit { industry, n_obs: data.len(), result: fit_frontier(&data, industry, opts) }
        })
        .collect()
}

/// Result of one pipeline stage that failed.
#[derive(Debug)]
pub struct StageError {
    pub stage: &'static str,
    pub error: Error,
}

impl StageError {
    pub fn kind(&self) -> ErrorKind {
        self.error.kind()
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "stage": self.stage,
            "kind": self.error.kind().as_str(),
            "exit_code": self.error.kind().exit_code(),
            "message": self.error.to_string(),
        })
    }
}

impl std::fmt::Display for StageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.stage, self.error)
    }
}

impl std::error::Error for StageError {}

#[derive(Debug, Clone, Serialize)]
pub struct StageRecord {
    pub stage: &'static str,
    pub status: String,
    pub files: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub version: &'static str,
    /// Resolved configuration without the output directory, so bundles
    /// written to different places compare equal.
    pub config: serde_json::Value,
    pub n_firms: usize,
    pub n_obs: usize,
    pub n_treated: usize,
    pub stages: Vec<StageRecord>,
}

pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Table { header: header.iter().map(|h| h.to_string()).collect(), rows: Vec::new() }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(&self.header)?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn table1(rows: &[SummaryRow]) -> Table {
    let mut t =
        Table::new(&["variable", "group", "year", "mean", "sd", "skewness", "kurtosis", "p10", "p50", "p90", "n"]);
    for r in rows {
        t.rows.push(vec![
            r.variable.to_string(),
            r.group.to_string(),
            r.year.to_string(),
            fmt_opt(r.mean),
            fmt_opt(r.sd),
            fmt_opt(r.skewness),
            fmt_opt(r.kurtosis),
            fmt_opt(r.p10),
            fmt_opt(r.p50),
            fmt_opt(r.p90),
            r.n.to_string(),
        ]);
    }
    t
}

pub fn table2(reports: &[(String, BalanceReport)]) -> Table {
    let mut t = Table::new(&["sample", "outcome", "test", "years", "t", "p_value", "n_treated", "n_controls", "note"]);
    for (sample, rep) in reports {
        for row in &rep.rows {
            let level_years = rep.level_year.to_string();
            let trend_years = format!("{}-{}", rep.trend_years.0, rep.trend_years.1);
            for (name, years, test) in [("level", &level_years, &row.level), ("trend", &trend_years, &row.trend)] {
                t.rows.push(vec![
                    sample.clone(),
                    row.outcome.to_string(),
                    name.into(),
                    years.clone(),
                    fmt_opt(test.t),
                    fmt_opt(test.p_value),
                    test.n_treated.to_string(),
                    test.n_controls.map(|n| n.to_string()).unwrap_or_default(),
                    test.reason.clone().unwrap_or_default(),
                ]);
            }
        }
    }
    t
}

pub fn att_csv(cells: &[AttCell]) -> Table {
    let mut t = Table::new(&[
        "outcome",
        "window",
        "estimator",
        "estimate",
        "se",
        "p_value",
        "stars",
        "n_treated",
        "n_controls",
        "dropped_treated",
        "error",
    ]);
    for c in cells {
        let mut row = vec![c.outcome.to_string(), c.window.to_string(), c.estimator.to_string()];
        match &c.result {
            Ok(e) => row.extend([
                fmt_f64(e.estimate),
                fmt_f64(e.se),
                fmt_f64(e.p_value),
                e.stars.to_string(),
                e.n_treated.to_string(),
                e.n_controls.to_string(),
                e.dropped_treated.to_string(),
                String::new(),
            ]),
            Err(msg) => {
                row.extend(std::iter::repeat_n(String::new(), 7));
                row.push(msg.clone());
            }
        }
        t.rows.push(row);
    }
    t
}

pub fn frontier_csv(fits: &[FrontierFit]) -> Table {
    let mut t = Table::new(&[
        "industry",
        "n_obs",
        "n_firms",
        "constant",
        "beta_k",
        "beta_l",
        "beta_e",
        "se_constant",
        "se_beta_k",
        "se_beta_l",
        "se_beta_e",
        "sigma_u",
        "sigma_v",
        "mu_v",
        "returns_to_scale",
        "log_likelihood",
        "iterations",
        "converged",
        "boundary",
        "error",
    ]);
    for f in fits {
        let mut row = vec![f.industry.to_string(), f.n_obs.to_string()];
        match &f.result {
            Ok(m) => row.extend([
                m.n_firms.to_string(),
                fmt_f64(m.constant),
                fmt_f64(m.beta_k),
                fmt_f64(m.beta_l),
                fmt_f64(m.beta_e),
                fmt_f64(m.se.constant),
                fmt_f64(m.se.beta_k),
                fmt_f64(m.se.beta_l),
                fmt_f64(m.se.beta_e),
                fmt_f64(m.sigma_u),
                fmt_f64(m.sigma_v),
                fmt_f64(m.mu_v),
                fmt_f64(returns_to_scale(m)),
                fmt_f64(m.log_likelihood),
                m.iterations.to_string(),
                m.converged.to_string(),
                m.boundary.to_string(),
                String::new(),
            ]),
            Err(e) => {
                row.extend(std::iter::repeat_n(String::new(), 17));
                row.push(e.to_string());
            }
        }
        t.rows.push(row);
    }
    t
}

pub fn distance_series_csv(scores: &[EfficiencyScore], ds: &PanelDataset) -> Table {
    let mut t = Table::new(&["industry", "group", "year", "median_distance", "n"]);
    for r in median_distance_series(scores, ds) {
        t.rows.push(vec![
            r.industry.to_string(),
            r.group.name().into(),
            r.year.to_string(),
            fmt_f64(r.median),
            r.n.to_string(),
        ]);
    }
    t
}

pub fn indexed_medians_csv(ds: &PanelDataset, base_year: i32) -> Table {
    let vars = [Variable::Output, Variable::Capital, Variable::Employees, Variable::EnergyTotal, Variable::Co2];
    let mut t = Table::new(&["industry", "variable", "year", "median", "index", "n"]);
    for r in indexed_median_series(ds, &vars, base_year) {
        t.rows.push(vec![
            r.industry.to_string(),
            r.variable.to_string(),
            r.year.to_string(),
            fmt_f64(r.median),
            fmt_opt(r.index),
            r.n.to_string(),
        ]);
    }
    t
}

pub fn scores_csv(scores: &[EfficiencyScore]) -> Table {
    let mut t = Table::new(&["firm_id", "year", "industry", "distance", "note"]);
    for s in scores {
        t.rows.push(vec![
            s.firm_id.clone(),
            s.year.to_string(),
            s.industry.to_string(),
            fmt_opt(s.distance),
            s.reason.unwrap_or_default().into(),
        ]);
    }
    t
}

/// One SATT row: a year or phase, optionally restricted to one industry,
/// with an estimate per neighbour count.
pub struct SattRow {
    pub window: WindowLabel,
    pub industry: Option<u16>,
    pub cells: Vec<(usize, std::result::Result<SattEstimate, String>)>,
}

pub fn satt_rows(
    scores: &DistanceTable,
    ds: &PanelDataset,
    weights: &BTreeMap<usize, MatchWeights>,
    fs_cfg: &FrontierSettings,
) -> Vec<SattRow> {
    let base = fs_cfg.base_year;
    let mut specs: Vec<(PhaseWindow, Option<u16>)> =
        fs_cfg.years.iter().map(|&y| (PhaseWindow::year(y), None)).collect();
    let phases = [fs_cfg.windows.phase1, fs_cfg.windows.phase2];
    specs.extend(phases.iter().map(|p| (*p, None)));
    let industries: BTreeSet<u16> = weights
        .values()
        .flat_map(|w| w.treated_ids().into_iter().filter_map(|t| ds.industry_of(t)).collect::<Vec<_>>())
        .filter(|i| !EXCLUDED_INDUSTRIES.contains(i))
        .collect();
    for ind in industries {
        specs.extend(phases.iter().map(|p| (*p, Some(ind))));
    }
    specs
        .into_par_iter()
        .map(|(window, industry)| {
            let cells = weights
                .iter()
                .map(|(&m, w)| {
                    let r = match (window.label, industry) {
                        (WindowLabel::Year(y), None) => satt_year(scores, w, y, base),
                        (_, None) => satt_phase(scores, w, &window, base),
                        (_, Some(_)) => industry_subset_satt(scores, ds, w, &window, base, industry),
                    };
                    (m, r.map_err(|e| e.to_string()))
                })
                .collect();
            SattRow { window: window.label, industry, cells }
        })
        .collect()
}

pub fn satt_csv(rows: &[SattRow], neighbours: &[usize]) -> Table {
    let mut t = Table::new(&["window", "industry"]);
    for m in neighbours {
        t.header.extend(
            ["tau", "se", "tau_pct", "se_pct", "p_value", "significant", "n_treated", "error"]
                .map(|c| format!("{c}_m{m}")),
        );
    }
    for r in rows {
        let mut row = vec![r.window.to_string(), r.industry.map(|i| i.to_string()).unwrap_or_else(|| "all".into())];
        for m in neighbours {
            match r.cells.iter().find(|(k, _)| k == m).map(|(_, c)| c) {
                Some(Ok(e)) => row.extend([
                    fmt_f64(e.tau),
                    fmt_f64(e.se),
                    fmt_f64(e.tau_pct()),
                    fmt_f64(e.se_pct()),
                    fmt_f64(e.p_value),
                    e.significant.to_string(),
                    e.n_treated.to_string(),
                    String::new(),
                ]),
                Some(Err(msg)) => {
                    row.extend(std::iter::repeat_n(String::new(), 7));
                    row.push(msg.clone());
                }
                None => row.extend(std::iter::repeat_n(String::new(), 8)),
            }
        }
        t.rows.push(row);
    }
    t
}

struct Bundle<'a> {
    dir: &'a Path,
    stages: Vec<StageRecord>,
}

impl Bundle<'_> {
    fn stage<T>(
        &mut self,
        stage: &'static str,
        f: impl FnOnce() -> Result<(T, Vec<(&'static str, Table)>)>,
    ) -> std::result::Result<T, StageError> {
        let run = || -> Result<(T, Vec<String>)> {
            let (value, tables) = f()?;
            let mut files = Vec::new();
            for (name, t) in tables {
                t.write(&self.dir.join(name))?;
                files.push(name.to_string());
            }
            Ok((value, files))
        };
        match run() {
            Ok((value, files)) => {
                self.stages.push(StageRecord { stage, status: "ok".into(), files });
                Ok(value)
            }
            Err(error) => {
                self.stages.push(StageRecord { stage, status: format!("failed: {error}"), files: vec![] });
                let err = StageError { stage, error };
                let _ = fs::write(self.dir.join("FAILED"), format!("{}\n", err.to_json()));
                Err(err)
            }
        }
    }
}

/// Runs every stage and writes the report bundle to `cfg.output_dir`.
pub fn run_pipeline(cfg: &RunConfig) -> std::result::Result<RunManifest, StageError> {
    let cfg_err = |error| StageError { stage: "config", error };
    cfg.validate().map_err(cfg_err)?;
    let dir = cfg.output_dir.as_path();
    fs::create_dir_all(dir).map_err(|e| cfg_err(e.into()))?;
    let _ = fs::remove_file(dir.join("FAILED"));
    let mut bundle = Bundle { dir, stages: Vec::new() };

    let (ds, truth) = bundle.stage("ingest", || {
        let (ds, truth) = load_panel(cfg)?;
        for &v in &cfg.outcomes {
            if !v.is_derived() && ds.observations().iter().all(|o| o.value(v).is_none()) {
                return Err(Error::MissingColumn(v.to_string()));
            }
        }
        Ok(((ds, truth), vec![]))
    })?;
    if let Some(truth) = &truth {
        let text = serde_json::to_string_pretty(truth).map_err(|e| StageError { stage: "ingest", error: e.into() })?;
        fs::write(dir.join("truth.json"), text).map_err(|e| StageError { stage: "ingest", error: e.into() })?;
    }

    bundle.stage("describe", || {
        let mut rows = Vec::new();
        let opts = SummaryOptions { disclosure_floor: cfg.disclosure_floor, trim: cfg.trim };
        for &v in &cfg.outcomes {
            let sub = match cfg.trim {
                Some(f) => trim_mid_quantile(&ds, v, f)?.0,
                None => ds.clone(),
            };
            rows.extend(summarize(&sub, &[v], cfg.level_year, None, opts)?);
        }
        Ok(((), vec![("table1.csv", table1(&rows))]))
    })?;

    let sample = bundle.stage("propensity", || {
        let s = match_sample(&ds, cfg)?;
        let model = serde_json::to_string_pretty(&s.model)?;
        fs::write(dir.join("propensity.json"), model)?;
        Ok((s, vec![]))
    })?;

    bundle.stage("balance", || {
        let opts = BalanceOptions::default();
        let mut reports = vec![(
            "unmatched".to_string(),
            balance_tests(&ds, &sample.unmatched, &cfg.outcomes, cfg.level_year, cfg.trend_years, opts)?,
        )];
        for (est, w) in &sample.weights {
            reports
                .push((est.to_string(), balance_tests(&ds, w, &cfg.outcomes, cfg.level_year, cfg.trend_years, opts)?));
        }
        Ok(((), vec![("table2.csv", table2(&reports))]))
    })?;

    bundle.stage("att", || Ok(((), vec![("att_grid.csv", att_csv(&att_grid(&ds, cfg, &sample)))])))?;

    let fs_cfg = &cfg.frontier;
    let scores = bundle.stage("frontier", || {
        if !fs_cfg.enabled {
            return Ok((
                None,
                vec![
                    ("frontier_coeffs.csv", frontier_csv(&[])),
                    ("distance_series.csv", distance_series_csv(&[], &ds)),
                ],
            ));
        }
        let fits = fit_frontiers(&ds, fs_cfg);
        let scores: Vec<EfficiencyScore> = fits
            .iter()
            .filter_map(|f| f.result.as_ref().ok())
            .flat_map(|m| efficiency_scores(m, &ds))
            .filter(|s| (fs_cfg.first_year..=fs_cfg.last_year).contains(&s.year))
            .collect();
        Ok((
            Some(scores.clone()),
            vec![
                ("frontier_coeffs.csv", frontier_csv(&fits)),
                ("distance_series.csv", distance_series_csv(&scores, &ds)),
                ("indexed_medians.csv", indexed_medians_csv(&ds, fs_cfg.first_year)),
                ("scores.csv", scores_csv(&scores)),
            ],
        ))
    })?;

    bundle.stage("satt", || {
        let Some(scores) = &scores else {
            return Ok(((), vec![("satt_table.csv", satt_csv(&[], &fs_cfg.neighbours))]));
        };
        let table = DistanceTable::from_scores(scores);
        let mut weights = BTreeMap::new();
        for &m in &fs_cfg.neighbours {
            let w = match sample.weights.get(&Estimator::Nn { m }) {
                Some(w) => w.clone(),
                None => {
                    let scored = predict(&sample.model, &sample.design, &treated_flags(&ds, &sample.design), |f| {
                        ds.industry_of(f)
                    })?;
                    let retained = enforce_common_support(&scored, cfg.support_rule()?)?.retained;
                    nn_match(
                        &retained,
                        m,
                        MatchOptions { exact_on_industry: cfg.match_within_industry, ..Default::default() },
                    )?
                }
            };
            // firms of industries whose frontier failed have no distances
            weights.insert(m, w.retain_units(|f| table.contains_firm(f)));
        }
        let rows = satt_rows(&table, &ds, &weights, fs_cfg);
        Ok(((), vec![("satt_table.csv", satt_csv(&rows, &fs_cfg.neighbours))]))
    })?;

    let manifest = RunManifest {
        version: crate::VERSION,
        config: manifest_config(cfg),
        n_firms: ds.n_firms(),
        n_obs: ds.n_obs(),
        n_treated: ds.n_treated(),
        stages: bundle.stages,
    };
    let text =
        serde_json::to_string_pretty(&manifest).map_err(|e| StageError { stage: "manifest", error: e.into() })?;
    fs::write(dir.join("run_manifest.json"), text + "\n")
        .map_err(|e| StageError { stage: "manifest", error: e.into() })?;
    Ok(manifest)
}

fn manifest_config(cfg: &RunConfig) -> serde_json::Value {
    let mut v = serde_json::to_value(cfg).unwrap_or_default();
    if let Some(map) = v.as_object_mut() {
        map.remove("output_dir");
    }
    v
}

fn treated_flags(ds: &PanelDataset, design: &crate::propensity::Design) -> Vec<bool> {
    design.firms.iter().map(|f| ds.is_treated(f) == Some(true)).collect()
}

/// Writes a panel to CSV at `path`.
pub fn write_panel(ds: &PanelDataset, path: &Path) -> Result<()> {
    write_csv(ds, std::io::BufWriter::new(fs::File::create(path)?))
}

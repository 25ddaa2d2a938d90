//! Long-format firm-year panel: data model, CSV ingestion and export, derived
//! variables and phase bookkeeping.
//!
//! Missing values are `None` and are never conflated with zero; zero exports
//! are a legitimate observation.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{Read, Write};
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Canonical column order of the panel CSV.
pub const CSV_COLUMNS: [&str; 15] = [
    "firm_id",
    "year",
    "industry",
    "treated",
    "output",
    "exports",
    "employees",
    "avg_wage",
    "capital",
    "energy_total",
    "electricity",
    "gas",
    "oil",
    "other_primary",
    "co2",
];

/// Absolute slack (MWh) allowed when energy carriers are checked against the
/// reported total.
pub const ENERGY_SUM_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variable {
    Co2,
    Co2Intensity,
    Output,
    Exports,
    ExportShare,
    Employees,
    AvgWage,
    Capital,
    EnergyTotal,
    Electricity,
    Gas,
    Oil,
    OtherPrimary,
}

impl Variable {
    pub const ALL: [Variable; 13] = [
        Variable::Co2,
        Variable::Co2Intensity,
        Variable::Output,
        Variable::Exports,
        Variable::ExportShare,
        Variable::Employees,
        Variable::AvgWage,
        Variable::Capital,
        Variable::EnergyTotal,
        Variable::Electricity,
        Variable::Gas,
        Variable::Oil,
        Variable::OtherPrimary,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variable::Co2 => "co2",
            Variable::Co2Intensity => "co2_intensity",
            Variable::Output => "output",
            Variable::Exports => "exports",
            Variable::ExportShare => "export_share",
            Variable::Employees => "employees",
            Variable::AvgWage => "avg_wage",
            Variable::Capital => "capital",
            Variable::EnergyTotal => "energy_total",
            Variable::Electricity => "electricity",
            Variable::Gas => "gas",
            Variable::Oil => "oil",
            Variable::OtherPrimary => "other_primary",
        }
    }

    fn index(self) -> usize {
        self as usize
    }

    /// Variables computed from other columns rather than read from input.
    pub fn is_derived(self) -> bool {
        matches!(self, Variable::Co2Intensity | Variable::ExportShare)
    }
}

impl fmt::Display for Variable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variable {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variable::ALL.into_iter().find(|v| v.name() == s).ok_or_else(|| Error::UnknownVariable(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FirmYear {
    pub firm_id: String,
    pub year: i32,
    /// Two-digit sector code.
    pub industry: Option<u16>,
    /// Gross output, kEUR.
    pub output: Option<f64>,
    /// kEUR.
    pub exports: Option<f64>,
    pub employees: Option<f64>,
    /// EUR per year.
    pub avg_wage: Option<f64>,
    /// kEUR.
    pub capital: Option<f64>,
    /// Energy carriers, MWh.
    pub energy_total: Option<f64>,
    pub electricity: Option<f64>,
    pub gas: Option<f64>,
    pub oil: Option<f64>,
    pub other_primary: Option<f64>,
    /// Tonnes CO2.
    pub co2: Option<f64>,
}

impl FirmYear {
    pub fn new(firm_id: impl Into<String>, year: i32) -> Self {
        FirmYear { firm_id: firm_id.into(), year, ..Default::default() }
    }

    /// Level of a variable. CO2 intensity is grams per kEUR of output.
    pub fn value(&self, var: Variable) -> Option<f64> {
        match var {
            Variable::Co2 => self.co2,
            Variable::Co2Intensity => match (self.co2, self.output) {
                (Some(c), Some(y)) if y > 0.0 => Some(c * 1e6 / y),
                _ => None,
            },
            Variable::Output => self.output,
            Variable::Exports => self.exports,
            Variable::ExportShare => match (self.exports, self.output) {
                (Some(x), Some(y)) if y > 0.0 => Some(x / y),
                _ => None,
            },
            Variable::Employees => self.employees,
            Variable::AvgWage => self.avg_wage,
            Variable::Capital => self.capital,
            Variable::EnergyTotal => self.energy_total,
            Variable::Electricity => self.electricity,
            Variable::Gas => self.gas,
            Variable::Oil => self.oil,
            Variable::OtherPrimary => self.other_primary,
        }
    }

    /// Value on the analysis scale: natural log of the level (`None` unless
    /// strictly positive). The export share is a fraction with many zeros and
    /// stays untransformed, so its changes are in share points.
    pub fn log_value(&self, var: Variable) -> Option<f64> {
        match var {
            Variable::ExportShare => self.value(var),
            _ => self.value(var).filter(|v| *v > 0.0).map(f64::ln),
        }
    }

    fn raw_slot(&mut self, column: &str) -> Option<&mut Option<f64>> {
        Some(match column {
            "output" => &mut self.output,
            "exports" => &mut self.exports,
            "employees" => &mut self.employees,
            "avg_wage" => &mut self.avg_wage,
            "capital" => &mut self.capital,
            "energy_total" => &mut self.energy_total,
            "electricity" => &mut self.electricity,
            "gas" => &mut self.gas,
            "oil" => &mut self.oil,
            "other_primary" => &mut self.other_primary,
            "co2" => &mut self.co2,
            _ => return None,
        })
    }

    fn raw(&self, column: &str) -> Option<f64> {
        match column {
            "output" => self.output,
            "exports" => self.exports,
            "employees" => self.employees,
            "avg_wage" => self.avg_wage,
            "capital" => self.capital,
            "energy_total" => self.energy_total,
            "electricity" => self.electricity,
            "gas" => self.gas,
            "oil" => self.oil,
            "other_primary" => self.other_primary,
            "co2" => self.co2,
            _ => None,
        }
    }

    /// `electricity + gas + oil + other_primary <= energy_total + tol`
    /// whenever all five are present.
    pub fn energy_consistent(&self) -> bool {
        match (self.electricity, self.gas, self.oil, self.other_primary, self.energy_total) {
            (Some(a), Some(b), Some(c), Some(d), Some(t)) => a + b + c + d <= t + ENERGY_SUM_TOL + 1e-12 * t.abs(),
            _ => true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum WindowLabel {
    Pretreatment,
    PhaseI,
    PhaseII,
    Year(i32),
}

impl fmt::Display for WindowLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            WindowLabel::Pretreatment => f.write_str("Pretreatment"),
            WindowLabel::PhaseI => f.write_str("PhaseI"),
            WindowLabel::PhaseII => f.write_str("PhaseII"),
            WindowLabel::Year(y) => write!(f, "{y}"),
        }
    }
}

impl FromStr for WindowLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "Pretreatment" | "pretreatment" => Ok(WindowLabel::Pretreatment),
            "PhaseI" | "phase1" | "phaseI" => Ok(WindowLabel::PhaseI),
            "PhaseII" | "phase2" | "phaseII" => Ok(WindowLabel::PhaseII),
            _ => s.parse::<i32>().map(WindowLabel::Year).map_err(|_| Error::Config(format!("unknown window `{s}`"))),
        }
    }
}

/// Inclusive year range with a label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseWindow {
    pub label: WindowLabel,
    pub first: i32,
    pub last: i32,
}

impl PhaseWindow {
    pub fn new(label: WindowLabel, first: i32, last: i32) -> Self {
        PhaseWindow { label, first, last }
    }

    pub fn year(y: i32) -> Self {
        PhaseWindow { label: WindowLabel::Year(y), first: y, last: y }
    }

    pub fn contains(&self, year: i32) -> bool {
        (self.first..=self.last).contains(&year)
    }

    pub fn years(&self) -> std::ops::RangeInclusive<i32> {
        self.first..=self.last
    }

    pub fn is_empty(&self) -> bool {
        self.first > self.last
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseWindows {
    pub pretreatment: PhaseWindow,
    pub phase1: PhaseWindow,
    pub phase2: PhaseWindow,
}

impl PhaseWindows {
    /// Emissions/outcome analysis: Phase II observed through 2010.
    pub fn emissions() -> Self {
        PhaseWindows {
            pretreatment: PhaseWindow::new(WindowLabel::Pretreatment, 2003, 2004),
            phase1: PhaseWindow::new(WindowLabel::PhaseI, 2005, 2007),
            phase2: PhaseWindow::new(WindowLabel::PhaseII, 2008, 2010),
        }
    }

    /// Efficiency analysis: Phase II observed through 2012.
    pub fn efficiency() -> Self {
        PhaseWindows { phase2: PhaseWindow::new(WindowLabel::PhaseII, 2008, 2012), ..Self::emissions() }
    }

    pub fn get(&self, label: WindowLabel) -> PhaseWindow {
        match label {
            WindowLabel::Pretreatment => self.pretreatment,
            WindowLabel::PhaseI => self.phase1,
            WindowLabel::PhaseII => self.phase2,
            WindowLabel::Year(y) => PhaseWindow::year(y),
        }
    }

    pub fn treatment_start(&self) -> i32 {
        self.phase1.first
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelConfig {
    pub first_year: i32,
    pub last_year: i32,
    pub phases: PhaseWindows,
}

impl Default for PanelConfig {
    fn default() -> Self {
        PanelConfig { first_year: 1995, last_year: 2020, phases: PhaseWindows::emissions() }
    }
}

/// Per-observation derived quantities relative to a base year.
#[derive(Debug, Clone, PartialEq)]
pub struct DerivedVars {
    /// g CO2 per kEUR output.
    pub co2_intensity: Option<f64>,
    pub export_share: Option<f64>,
    log_level: [Option<f64>; 13],
    log_diff: [Option<f64>; 13],
}

impl DerivedVars {
    pub fn log_level(&self, var: Variable) -> Option<f64> {
        self.log_level[var.index()]
    }

    /// `ln x_t - ln x_base`.
    pub fn log_diff(&self, var: Variable) -> Option<f64> {
        self.log_diff[var.index()]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Derived {
    pub base_year: i32,
    /// Aligned with `PanelDataset::observations`.
    pub rows: Vec<DerivedVars>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct DeriveReport {
    /// (firm, year, variable) cells whose level was present but not strictly
    /// positive, so no log is defined.
    pub nonpositive: Vec<(String, i32, Variable)>,
    /// Firms without an observation in the base year.
    pub missing_base: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PanelDataset {
    observations: Vec<FirmYear>,
    treatment: BTreeMap<String, bool>,
    firm_rows: BTreeMap<String, Range<usize>>,
    pub config: PanelConfig,
    derived: Option<Derived>,
}

impl PanelDataset {
    /// Validates uniqueness of (firm, year) and that every observed firm has a
    /// treatment flag. Observations are stored sorted by (firm_id, year).
    pub fn new(
        mut observations: Vec<FirmYear>,
        treatment: BTreeMap<String, bool>,
        config: PanelConfig,
    ) -> Result<Self> {
        observations.sort_by(|a, b| a.firm_id.cmp(&b.firm_id).then(a.year.cmp(&b.year)));
        let mut dups = Vec::new();
        for w in observations.windows(2) {
            if w[0].firm_id == w[1].firm_id && w[0].year == w[1].year {
                let key = (w[0].firm_id.clone(), w[0].year);
                if dups.last() != Some(&key) {
                    dups.push(key);
                }
            }
        }
        if !dups.is_empty() {
            return Err(Error::DuplicateKeys(dups));
        }
        let mut firm_rows = BTreeMap::new();
        let mut start = 0;
        for i in 1..=observations.len() {
            if i == observations.len() || observations[i].firm_id != observations[start].firm_id {
                firm_rows.insert(observations[start].firm_id.clone(), start..i);
                start = i;
            }
        }
        if let Some(f) = firm_rows.keys().find(|f| !treatment.contains_key(*f)) {
            return Err(Error::Config(format!("firm `{f}` has no treatment flag")));
        }
        let treatment = treatment.into_iter().filter(|(f, _)| firm_rows.contains_key(f)).collect();
        Ok(PanelDataset { observations, treatment, firm_rows, config, derived: None })
    }

    /// Builds a dataset from rows carrying their own flag, checking the flag is
    /// constant within each firm.
    pub fn from_flagged(rows: Vec<(FirmYear, bool)>, config: PanelConfig) -> Result<Self> {
        let mut treatment: BTreeMap<String, bool> = BTreeMap::new();
        let mut varying = BTreeSet::new();
        let mut obs = Vec::with_capacity(rows.len());
        for (fy, d) in rows {
            match treatment.get(&fy.firm_id) {
                Some(&prev) if prev != d => {
                    varying.insert(fy.firm_id.clone());
                }
                Some(_) => {}
                None => {
                    treatment.insert(fy.firm_id.clone(), d);
                }
            }
            obs.push(fy);
        }
        if !varying.is_empty() {
            return Err(Error::TreatmentVaries(varying.into_iter().collect()));
        }
        Self::new(obs, treatment, config)
    }

    pub fn observations(&self) -> &[FirmYear] {
        &self.observations
    }

    pub fn treatment(&self) -> &BTreeMap<String, bool> {
        &self.treatment
    }

    pub fn n_obs(&self) -> usize {
        self.observations.len()
    }

    pub fn n_firms(&self) -> usize {
        self.firm_rows.len()
    }

    pub fn n_treated(&self) -> usize {
        self.treatment.values().filter(|d| **d).count()
    }

    pub fn is_treated(&self, firm: &str) -> Option<bool> {
        self.treatment.get(firm).copied()
    }

    pub fn firm_ids(&self) -> impl Iterator<Item = &str> {
        self.firm_rows.keys().map(String::as_str)
    }

    pub fn firm(&self, firm: &str) -> &[FirmYear] {
        self.firm_rows.get(firm).map(|r| &self.observations[r.clone()]).unwrap_or(&[])
    }

    pub fn firms(&self) -> impl Iterator<Item = (&str, &[FirmYear])> {
        self.firm_rows.iter().map(|(f, r)| (f.as_str(), &self.observations[r.clone()]))
    }

    fn row_index(&self, firm: &str, year: i32) -> Option<usize> {
        let r = self.firm_rows.get(firm)?;
        self.observations[r.clone()].binary_search_by_key(&year, |o| o.year).ok().map(|i| r.start + i)
    }

    pub fn get(&self, firm: &str, year: i32) -> Option<&FirmYear> {
        self.row_index(firm, year).map(|i| &self.observations[i])
    }

    /// First non-missing industry code reported by the firm.
    pub fn industry_of(&self, firm: &str) -> Option<u16> {
        self.firm(firm).iter().find_map(|o| o.industry)
    }

    pub fn industries(&self) -> BTreeSet<u16> {
        self.observations.iter().filter_map(|o| o.industry).collect()
    }

    pub fn years(&self) -> BTreeSet<i32> {
        self.observations.iter().map(|o| o.year).collect()
    }

    /// Keeps only the firms for which `keep` returns true. Derived variables
    /// are carried over.
    pub fn filter_firms(&self, mut keep: impl FnMut(&str) -> bool) -> PanelDataset {
        let mut obs = Vec::new();
        let mut rows = Vec::new();
        for (f, r) in &self.firm_rows {
            if keep(f) {
                obs.extend_from_slice(&self.observations[r.clone()]);
                if let Some(d) = &self.derived {
                    rows.extend_from_slice(&d.rows[r.clone()]);
                }
            }
        }
        let treatment = self.treatment.clone();
        let mut out = PanelDataset::new(obs, treatment, self.config.clone()).expect("subset of a valid panel is valid");
        out.derived = self.derived.as_ref().map(|d| Derived { base_year: d.base_year, rows });
        out
    }

    /// Drops individual observations for which `keep` is false.
    pub fn filter_observations(&self, mut keep: impl FnMut(&FirmYear) -> bool) -> PanelDataset {
        let obs: Vec<FirmYear> = self.observations.iter().filter(|o| keep(o)).cloned().collect();
        let mut out = PanelDataset::new(obs, self.treatment.clone(), self.config.clone())
            .expect("subset of a valid panel is valid");
        if let Some(d) = &self.derived {
            out = out.derive_variables(d.base_year).0;
        }
        out
    }

    pub fn derived(&self) -> Option<&Derived> {
        self.derived.as_ref()
    }

    pub fn derived_at(&self, firm: &str, year: i32) -> Option<&DerivedVars> {
        let d = self.derived.as_ref()?;
        self.row_index(firm, year).map(|i| &d.rows[i])
    }

    /// Populates intensity, export share, log levels and log differences
    /// against `base_year`. Nonpositive levels yield missing logs and are
    /// listed in the report.
    pub fn derive_variables(&self, base_year: i32) -> (PanelDataset, DeriveReport) {
        let mut report = DeriveReport::default();
        let mut rows = Vec::with_capacity(self.observations.len());
        for (firm, range) in &self.firm_rows {
            let obs = &self.observations[range.clone()];
            let base = obs.iter().find(|o| o.year == base_year);
            if base.is_none() {
                report.missing_base.push(firm.clone());
            }
            for o in obs {
                let mut log_level = [None; 13];
                let mut log_diff = [None; 13];
                for var in Variable::ALL {
                    let lv = o.log_value(var);
                    if lv.is_none() && o.value(var).is_some() {
                        report.nonpositive.push((firm.clone(), o.year, var));
                    }
                    log_level[var.index()] = lv;
                    log_diff[var.index()] = match (lv, base.and_then(|b| b.log_value(var))) {
                        (Some(a), Some(b)) => Some(a - b),
                        _ => None,
                    };
                }
                rows.push(DerivedVars {
                    co2_intensity: o.value(Variable::Co2Intensity),
                    export_share: o.value(Variable::ExportShare),
                    log_level,
                    log_diff,
                });
            }
        }
        let mut out = self.clone();
        out.derived = Some(Derived { base_year, rows });
        (out, report)
    }

    /// Mean of `f` over the firm's observations inside `window`, skipping
    /// years where `f` is missing.
    pub fn phase_mean_by(&self, firm: &str, window: &PhaseWindow, f: impl Fn(&FirmYear) -> Option<f64>) -> Option<f64> {
        let mut sum = 0.0;
        let mut n = 0usize;
        for o in self.firm(firm).iter().filter(|o| window.contains(o.year)) {
            if let Some(v) = f(o) {
                sum += v;
                n += 1;
            }
        }
        (n > 0).then(|| sum / n as f64)
    }

    /// Phase mean of an outcome on the requested scale.
    pub fn phase_mean_outcome(&self, firm: &str, var: Variable, scale: Scale, window: &PhaseWindow) -> Option<f64> {
        self.phase_mean_by(firm, window, |o| scale.apply(o, var))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    Level,
    Log,
}

impl Scale {
    pub fn apply(self, o: &FirmYear, var: Variable) -> Option<f64> {
        match self {
            Scale::Level => o.value(var),
            Scale::Log => o.log_value(var),
        }
    }
}

/// Maps canonical column names to the header names found in a file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ColumnMapping {
    pub rename: BTreeMap<String, String>,
}

impl ColumnMapping {
    pub fn identity() -> Self {
        Self::default()
    }

    pub fn header_for<'a>(&'a self, canonical: &'a str) -> &'a str {
        self.rename.get(canonical).map(String::as_str).unwrap_or(canonical)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellIssue {
    pub line: usize,
    pub column: String,
    pub value: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct IngestReport {
    pub rows_read: usize,
    /// Cells that could not be used; the observation is kept with the cell
    /// missing.
    pub invalid_cells: Vec<CellIssue>,
    /// Rows outside the configured year window; not loaded.
    pub out_of_window: Vec<(String, i32)>,
    /// Observations whose energy carriers exceed the reported total.
    pub energy_mismatch: Vec<(String, i32)>,
}

fn parse_flag(s: &str) -> Option<bool> {
    match s.trim() {
        "1" | "true" | "TRUE" | "True" => Some(true),
        "0" | "false" | "FALSE" | "False" => Some(false),
        _ => None,
    }
}

/// Reads a long-format panel. Mandatory columns: firm_id, year, treated.
pub fn ingest_csv<R: Read>(
    source: R,
    schema: &ColumnMapping,
    config: PanelConfig,
) -> Result<(PanelDataset, IngestReport)> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(source);
    let headers = rdr.headers()?.clone();
    let position = |canonical: &str| {
        let h = schema.header_for(canonical);
        headers.iter().position(|c| c.trim() == h)
    };
    let mut mandatory = [0usize; 3];
    for (slot, name) in mandatory.iter_mut().zip(["firm_id", "year", "treated"]) {
        *slot = position(name).ok_or_else(|| Error::MissingColumn(name.to_string()))?;
    }
    let [firm_col, year_col, treat_col] = mandatory;
    let industry_col = position("industry");
    let numeric: Vec<(&str, usize)> = CSV_COLUMNS[4..].iter().filter_map(|c| position(c).map(|p| (*c, p))).collect();

    let mut report = IngestReport::default();
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        report.rows_read += 1;
        let firm = rec.get(firm_col).unwrap_or("").trim().to_string();
        let year_raw = rec.get(year_col).unwrap_or("");
        let year: i32 = year_raw.trim().parse().map_err(|_| Error::Parse {
            line,
            column: "year".into(),
            value: year_raw.into(),
        })?;
        let treat_raw = rec.get(treat_col).unwrap_or("");
        let treated = parse_flag(treat_raw).ok_or_else(|| Error::Parse {
            line,
            column: "treated".into(),
            value: treat_raw.into(),
        })?;
        if firm.is_empty() {
            return Err(Error::Parse { line, column: "firm_id".into(), value: String::new() });
        }
        if year < config.first_year || year > config.last_year {
            report.out_of_window.push((firm, year));
            continue;
        }
        let mut fy = FirmYear::new(firm, year);
        if let Some(c) = industry_col {
            let raw = rec.get(c).unwrap_or("").trim();
            if !raw.is_empty() {
                match raw.parse::<u16>() {
                    Ok(v) => fy.industry = Some(v),
                    Err(_) => report.invalid_cells.push(CellIssue {
                        line,
                        column: "industry".into(),
                        value: raw.into(),
                        reason: "not an integer sector code".into(),
                    }),
                }
            }
        }
        for &(name, c) in &numeric {
            let raw = rec.get(c).unwrap_or("").trim();
            if raw.is_empty() {
                continue;
            }
            match raw.parse::<f64>() {
                Ok(v) if v.is_finite() && v >= 0.0 => {
                    *fy.raw_slot(name).expect("numeric column") = Some(v);
                }
                Ok(_) => report.invalid_cells.push(CellIssue {
                    line,
                    column: name.into(),
                    value: raw.into(),
                    reason: "negative or non-finite".into(),
                }),
                Err(_) => report.invalid_cells.push(CellIssue {
                    line,
                    column: name.into(),
                    value: raw.into(),
                    reason: "not a number".into(),
                }),
            }
        }
        if !fy.energy_consistent() {
            report.energy_mismatch.push((fy.firm_id.clone(), fy.year));
        }
        rows.push((fy, treated));
    }
    let ds = PanelDataset::from_flagged(rows, config)?;
    Ok((ds, report))
}

/// Writes the panel in the canonical column order. Numbers use the shortest
/// decimal text that parses back to the identical `f64`.
pub fn write_csv<W: Write>(ds: &PanelDataset, sink: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(CSV_COLUMNS)?;
    for o in ds.observations() {
        let treated = ds.is_treated(&o.firm_id).unwrap_or(false);
        let mut rec: Vec<String> = vec![
            o.firm_id.clone(),
            o.year.to_string(),
            o.industry.map(|v| v.to_string()).unwrap_or_default(),
            if treated { "1" } else { "0" }.to_string(),
        ];
        for c in &CSV_COLUMNS[4..] {
            rec.push(fmt_opt(o.raw(c)));
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

/// Shortest round-trip representation; scientific notation for very small
/// or very large magnitudes.
pub fn fmt_f64(v: f64) -> String {
    if v.is_finite() {
        if v != 0.0 && (v.abs() < 1e-5 || v.abs() >= 1e16) {
            format!("{v:e}")
        } else {
            format!("{v}")
        }
    } else if v.is_nan() {
        "NaN".into()
    } else if v > 0.0 {
        "inf".into()
    } else {
        "-inf".into()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn load(text: &str) -> Result<(PanelDataset, IngestReport)> {
        ingest_csv(text.as_bytes(), &ColumnMapping::identity(), PanelConfig::default())
    }

    #[test]
    fn minimal_file() {
        let (ds, rep) = load("firm_id,year,treated,output\nf1,2003,1,10\nf1,2005,1,12\n").unwrap();
        assert_eq!(ds.n_obs(), 2);
        assert_eq!(ds.n_treated(), 1);
        assert!(rep.invalid_cells.is_empty());
    }

    #[test]
    fn duplicate_key_names_offender() {
        let err = load("firm_id,year,treated\nf1,2003,0\nf1,2003,0\n").unwrap_err();
        match &err {
            Error::DuplicateKeys(keys) => assert_eq!(keys, &vec![("f1".to_string(), 2003)]),
            e => panic!("{e:?}"),
        }
        assert!(err.to_string().contains("f1/2003"));
    }

    #[test]
    fn missing_column_is_named() {
        let err = load("firm_id,treated\nf1,1\n").unwrap_err();
        assert!(matches!(err, Error::MissingColumn(ref c) if c == "year"));
    }

    #[test]
    fn varying_treatment_rejected() {
        let err = load("firm_id,year,treated\nf1,2003,0\nf1,2004,1\n").unwrap_err();
        assert!(matches!(err, Error::TreatmentVaries(ref f) if f == &vec!["f1".to_string()]));
    }

    #[test]
    fn bad_numeric_is_reported_not_dropped() {
        let (ds, rep) = load("firm_id,year,treated,output,co2\nf1,2003,0,abc,5\n").unwrap();
        assert_eq!(ds.n_obs(), 1);
        assert_eq!(ds.get("f1", 2003).unwrap().output, None);
        assert_eq!(ds.get("f1", 2003).unwrap().co2, Some(5.0));
        assert_eq!(rep.invalid_cells.len(), 1);
        assert_eq!(rep.invalid_cells[0].column, "output");
        assert_eq!(rep.invalid_cells[0].line, 2);
    }

    #[test]
    fn renamed_columns() {
        let mut m = ColumnMapping::identity();
        m.rename.insert("firm_id".into(), "id".into());
        m.rename.insert("treated".into(), "ets".into());
        let (ds, _) = ingest_csv("id,year,ets\na,2003,1\n".as_bytes(), &m, PanelConfig::default()).unwrap();
        assert_eq!(ds.is_treated("a"), Some(true));
    }

    #[test]
    fn derived_units_and_log_domain() {
        let mut a = FirmYear::new("f", 2003);
        a.co2 = Some(1000.0);
        a.output = Some(1000.0);
        a.exports = Some(0.0);
        let mut b = a.clone();
        b.year = 2005;
        let ds = PanelDataset::new(vec![a, b], [("f".to_string(), false)].into(), PanelConfig::default()).unwrap();
        let (ds, rep) = ds.derive_variables(2003);
        let d = ds.derived_at("f", 2005).unwrap();
        assert_eq!(d.co2_intensity, Some(1_000_000.0));
        assert_eq!(d.export_share, Some(0.0));
        assert_eq!(d.log_diff(Variable::Output), Some(0.0));
        assert_eq!(d.log_diff(Variable::Exports), None);
        assert!(rep.nonpositive.iter().any(|(_, _, v)| *v == Variable::Exports));
    }

    #[test]
    fn phase_means() {
        let vals = [(2005, Some(0.1)), (2006, None), (2007, Some(0.3))];
        let obs = vals.iter().map(|(y, v)| FirmYear { output: *v, ..FirmYear::new("f", *y) }).collect();
        let ds = PanelDataset::new(obs, [("f".to_string(), true)].into(), PanelConfig::default()).unwrap();
        let w = PhaseWindows::emissions().phase1;
        let m = ds.phase_mean_outcome("f", Variable::Output, Scale::Level, &w).unwrap();
        assert!((m - 0.2).abs() < 1e-15);
        let single = PhaseWindow::year(2007);
        assert_eq!(ds.phase_mean_outcome("f", Variable::Output, Scale::Level, &single), Some(0.3));
        let none = PhaseWindow::year(2010);
        assert_eq!(ds.phase_mean_outcome("f", Variable::Output, Scale::Level, &none), None);
    }

    #[test]
    fn energy_invariant_flagged() {
        let (_, rep) =
            load("firm_id,year,treated,energy_total,electricity,gas,oil,other_primary\nf,2003,0,10,5,5,1,0\n").unwrap();
        assert_eq!(rep.energy_mismatch, vec![("f".to_string(), 2003)]);
    }
}

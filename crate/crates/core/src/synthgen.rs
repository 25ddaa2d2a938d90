//! Synthetic firm panel with known treatment effects.
//!
//! Each firm draws from its own ChaCha8 stream (`seed`, stream = firm
//! index plus one), so output is identical across platforms and thread counts. Firms
//! get a log-normal size, inputs scaled by size plus a firm-year activity
//! shock, output from their industry's Cobb-Douglas frontier with normal
//! noise and truncated-normal inefficiency, and emissions from energy use
//! times a fuel-mix emission factor. Treatment is a probit on size and
//! energy intensity. Configured effects are additive log shifts on treated
//! firms in the effect's phase.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panel::{FirmYear, PanelConfig, PanelDataset, PhaseWindows, WindowLabel};
use crate::stats::{norm_cdf, norm_ppf};

/// Outcomes an effect may be injected into.
pub const EFFECT_OUTCOMES: [&str; 8] =
    ["co2", "output", "employees", "exports", "energy_total", "capital", "avg_wage", "distance"];

pub const PRESETS: [&str; 4] = ["table3_phase2", "null", "paper_industry", "high_selection"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndustryTruth {
    pub code: u16,
    /// Relative frequency of the industry among firms.
    pub weight: f64,
    pub constant: f64,
    pub beta_k: f64,
    pub beta_l: f64,
    pub beta_e: f64,
    pub sigma_u: f64,
    pub ineff_mu: f64,
    pub ineff_sigma: f64,
    /// Log-output drop in the crisis year.
    pub crisis_dip: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    /// Probit coefficient on standardized log size.
    pub size: f64,
    /// Probit coefficient on standardized energy intensity.
    pub emissions: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectSpec {
    pub outcome: String,
    pub phase: WindowLabel,
    /// Restrict to one industry.
    #[serde(default)]
    pub industry: Option<u16>,
    /// Additive shift in logs. For `distance`, the shift in true
    /// inefficiency (negative = closer to the frontier); estimated distances
    /// respond less than one-for-one.
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_firms: usize,
    pub treated_share: f64,
    pub first_year: i32,
    pub last_year: i32,
    pub industries: Vec<IndustryTruth>,
    pub selection: Selection,
    pub effects: Vec<EffectSpec>,
    pub phases: PhaseWindows,
    pub crisis_year: i32,
    /// Fraction of the crisis output drop passed on to energy use.
    pub crisis_energy_pass: f64,
    /// Standard deviation of the firm-year activity shock on inputs.
    pub activity_sd: f64,
    /// Within-firm correlation of noise and inefficiency across years.
    pub persistence: f64,
    pub seed: u64,
}

fn industry(code: u16, weight: f64, beta: [f64; 3], constant: f64, sigma_u: f64, dip: f64) -> IndustryTruth {
    IndustryTruth {
        code,
        weight,
        constant,
        beta_k: beta[0],
        beta_l: beta[1],
        beta_e: beta[2],
        sigma_u,
        ineff_mu: 0.0,
        ineff_sigma: 0.5,
        crisis_dip: dip,
    }
}

impl Default for SynthConfig {
    /// Food (10), paper (17), chemicals (20) and non-metallic minerals (23)
    /// with reference frontier elasticities, half-normal inefficiency and a
    /// 2009 crisis that is mild in food.
    fn default() -> Self {
        SynthConfig {
            n_firms: 2000,
            treated_share: 0.01,
            first_year: 2002,
            last_year: 2012,
            industries: vec![
                industry(10, 0.35, [0.265, 0.323, 0.481], 2.047, 0.609, 0.15),
                industry(17, 0.15, [0.178, 0.677, 0.183], 3.720, 0.389, 0.20),
                industry(20, 0.25, [0.205, 0.596, 0.173], 4.372, 0.522, 0.25),
                industry(23, 0.25, [0.206, 0.612, 0.111], 4.229, 0.501, 0.20),
            ],
            selection: Selection { size: 0.8, emissions: 0.5 },
            effects: Vec::new(),
            phases: PhaseWindows::efficiency(),
            crisis_year: 2009,
            crisis_energy_pass: 0.5,
            activity_sd: 0.15,
            persistence: 0.7,
            seed: 20_050_101,
        }
    }
}

/// Named scenario configurations.
pub fn preset(name: &str) -> Result<SynthConfig> {
    let base = SynthConfig::default();
    let effect = |outcome: &str, phase, value| EffectSpec { outcome: outcome.into(), phase, industry: None, value };
    match name {
        "null" => Ok(SynthConfig { n_firms: 1000, treated_share: 0.05, ..base }),
        "table3_phase2" => Ok(SynthConfig {
            n_firms: 5000,
            treated_share: 0.05,
            effects: vec![effect("co2", WindowLabel::PhaseII, -0.25), effect("output", WindowLabel::PhaseII, 0.05)],
            ..base
        }),
        // Low noise, persistent inefficiency and a common crisis so that a
        // small distance effect in one industry is detectable.
        "paper_industry" => Ok(SynthConfig {
            n_firms: 10_000,
            treated_share: 0.20,
            persistence: 0.95,
            industries: base
                .industries
                .iter()
                .map(|i| IndustryTruth { sigma_u: 0.1, crisis_dip: 0.2, ..i.clone() })
                .collect(),
            effects: [WindowLabel::PhaseI, WindowLabel::PhaseII]
                .into_iter()
                .map(|phase| EffectSpec { outcome: "distance".into(), phase, industry: Some(17), value: -0.03 })
                .collect(),
            ..base
        }),
        "high_selection" => Ok(SynthConfig {
            n_firms: 5000,
            treated_share: 0.05,
            selection: Selection { size: 1.5, emissions: 1.0 },
            ..base
        }),
        _ => Err(Error::Config(format!("unknown preset `{name}`; available: {}", PRESETS.join(", ")))),
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.treated_share) {
            return Err(Error::Config(format!("treated_share {} outside [0, 1)", self.treated_share)));
        }
        if self.industries.is_empty() || self.industries.iter().any(|i| i.weight.is_nan() || i.weight <= 0.0) {
            return Err(Error::Config("industry mix needs positive weights".into()));
        }
        if self.first_year > self.last_year {
            return Err(Error::Config("first_year after last_year".into()));
        }
        if !(0.0..=1.0).contains(&self.persistence) {
            return Err(Error::Config("persistence outside [0, 1]".into()));
        }
        for e in &self.effects {
            if !EFFECT_OUTCOMES.contains(&e.outcome.as_str()) {
                return Err(Error::Config(format!(
                    "invalid effect key `{}`; known: {}",
                    e.outcome,
                    EFFECT_OUTCOMES.join(", ")
                )));
            }
            if !matches!(e.phase, WindowLabel::PhaseI | WindowLabel::PhaseII) || !e.value.is_finite() {
                return Err(Error::Config(format!("invalid effect {}:{}", e.outcome, e.phase)));
            }
        }
        Ok(())
    }

    fn phase_of(&self, year: i32) -> Option<WindowLabel> {
        [self.phases.phase1, self.phases.phase2].into_iter().find(|w| w.contains(year)).map(|w| w.label)
    }

    /// Selection intercept giving the configured expected treated share.
    fn selection_intercept(&self) -> f64 {
        let s = self.selection;
        norm_ppf(self.treated_share) * (1.0 + s.size * s.size + s.emissions * s.emissions).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FirmTruth {
    pub firm_id: String,
    pub industry: u16,
    /// `P(D = 1 | size, intensity)` under the selection probit.
    pub propensity: f64,
    pub treated: bool,
    /// Realized inefficiency `s_it >= 0` per year.
    pub inefficiency: Vec<(i32, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub seed: u64,
    pub effects: Vec<EffectSpec>,
    pub firms: Vec<FirmTruth>,
}

impl GroundTruth {
    /// Injected effect for an outcome and phase (all industries); zero when
    /// none was configured.
    pub fn effect(&self, outcome: &str, phase: WindowLabel) -> f64 {
        self.effects
            .iter()
            .filter(|e| e.outcome == outcome && e.phase == phase && e.industry.is_none())
            .map(|e| e.value)
            .sum()
    }
}

pub fn firm_id(index: usize) -> String {
    format!("f{index:06}")
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Quantile of `N(mu, sigma²)` truncated to `[0, ∞)` at probability `u`.
fn truncated_quantile(u: f64, mu: f64, sigma: f64) -> f64 {
    if sigma <= 0.0 {
        return mu.max(0.0);
    }
    let lo = norm_cdf(-mu / sigma);
    let p = (lo + u * (1.0 - lo)).min(1.0 - 1e-16);
    (mu + sigma * norm_ppf(p)).max(0.0)
}

// emission factors, t CO2 per MWh: electricity, gas, oil, other primary
const EMISSION_FACTORS: [f64; 4] = [0.55, 0.20, 0.27, 0.35];
const FUEL_LOG_MEANS: [f64; 4] = [0.3, 0.2, -0.8, -0.6];

fn generate_firm(
    cfg: &SynthConfig,
    index: usize,
    intercept: f64,
    total_weight: f64,
) -> (Vec<(FirmYear, bool)>, FirmTruth) {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64 + 1);
    let id = firm_id(index);

    let mut pick = rng.gen::<f64>() * total_weight;
    let mut ind = &cfg.industries[cfg.industries.len() - 1];
    for i in &cfg.industries {
        if pick < i.weight {
            ind = i;
            break;
        }
        pick -= i.weight;
    }

    let size = normal(&mut rng);
    let intensity = normal(&mut rng);
    let ln_k0 = 2500f64.ln() + 1.3 * size + 0.4 * normal(&mut rng);
    let ln_l0 = 50f64.ln() + 1.1 * size + 0.3 * normal(&mut rng);
    let ln_e0 = 1200f64.ln() + 1.2 * size + 0.8 * intensity;
    let ln_w0 = 28_000f64.ln() + 0.15 * size + 0.2 * normal(&mut rng);

    let mut shares = [0.0; 4];
    for (s, m) in shares.iter_mut().zip(FUEL_LOG_MEANS) {
        *s = (m + 0.5 * normal(&mut rng)).exp();
    }
    let total: f64 = shares.iter().sum();
    shares.iter_mut().for_each(|s| *s /= total);
    let ef: f64 = shares.iter().zip(EMISSION_FACTORS).map(|(s, f)| s * f).sum();

    let exporter = rng.gen::<f64>() < norm_cdf(0.5 + 0.5 * size);
    let export_share = 1.0 / (1.0 + (-(-1.0 + 0.5 * size + 0.8 * normal(&mut rng))).exp());

    let sel_index = intercept + cfg.selection.size * size + cfg.selection.emissions * intensity;
    let treated = cfg.treated_share > 0.0 && sel_index + normal(&mut rng) > 0.0;
    let propensity = if cfg.treated_share > 0.0 { norm_cdf(sel_index) } else { 0.0 };

    let rho = cfg.persistence;
    let u_firm = normal(&mut rng);
    let z_firm = normal(&mut rng);

    let mut rows = Vec::new();
    let mut path = Vec::new();
    for year in cfg.first_year..=cfg.last_year {
        let a = cfg.activity_sd * normal(&mut rng);
        let mut ln_k = ln_k0 + 0.2 * a + 0.05 * normal(&mut rng);
        let mut ln_l = ln_l0 + 0.5 * a + 0.05 * normal(&mut rng);
        let mut ln_e = ln_e0 + a + 0.08 * normal(&mut rng);
        let mut ln_w = ln_w0 + 0.03 * normal(&mut rng);
        let u = ind.sigma_u * (rho.sqrt() * u_firm + (1.0 - rho).sqrt() * normal(&mut rng));
        let z = rho.sqrt() * z_firm + (1.0 - rho).sqrt() * normal(&mut rng);
        let ineff = truncated_quantile(norm_cdf(z), ind.ineff_mu, ind.ineff_sigma);
        let export_noise = 0.05 * normal(&mut rng);
        path.push((year, ineff));

        if year == cfg.crisis_year {
            ln_e -= cfg.crisis_energy_pass * ind.crisis_dip;
        }

        let mut shift: BTreeMap<&str, f64> = BTreeMap::new();
        if treated {
            if let Some(phase) = cfg.phase_of(year) {
                for e in cfg.effects.iter().filter(|e| e.phase == phase) {
                    if e.industry.is_none_or(|c| c == ind.code) {
                        *shift.entry(e.outcome.as_str()).or_insert(0.0) += e.value;
                    }
                }
            }
        }
        let sh = |k: &str| shift.get(k).copied().unwrap_or(0.0);
        ln_k += sh("capital");
        ln_l += sh("employees");
        ln_e += sh("energy_total");
        ln_w += sh("avg_wage");

        let mut ln_y = ind.constant + ind.beta_k * ln_k + ind.beta_l * ln_l + ind.beta_e * ln_e + u - ineff;
        if year == cfg.crisis_year {
            ln_y -= ind.crisis_dip;
        }
        ln_y += sh("output") - sh("distance");

        let output = ln_y.exp();
        let energy = ln_e.exp();
        let mut fy = FirmYear::new(id.clone(), year);
        fy.industry = Some(ind.code);
        fy.output = Some(output);
        fy.capital = Some(ln_k.exp());
        fy.employees = Some(ln_l.exp());
        fy.avg_wage = Some(ln_w.exp());
        fy.energy_total = Some(energy);
        fy.electricity = Some(energy * shares[0]);
        fy.gas = Some(energy * shares[1]);
        fy.oil = Some(energy * shares[2]);
        fy.other_primary = Some(energy * shares[3]);
        fy.co2 = Some(energy * ef * sh("co2").exp());
        fy.exports = Some(if exporter { export_share * output * (export_noise + sh("exports")).exp() } else { 0.0 });
        rows.push((fy, treated));
    }
    let truth = FirmTruth { firm_id: id, industry: ind.code, propensity, treated, inefficiency: path };
    (rows, truth)
}

/// Draws a panel and its ground truth. Deterministic in `cfg`.
pub fn generate(cfg: &SynthConfig) -> Result<(PanelDataset, GroundTruth)> {
    cfg.validate()?;
    let intercept = cfg.selection_intercept();
    let total_weight: f64 = cfg.industries.iter().map(|i| i.weight).sum();
    let firms: Vec<_> =
        (0..cfg.n_firms).into_par_iter().map(|i| generate_firm(cfg, i, intercept, total_weight)).collect();
    let mut rows = Vec::with_capacity(cfg.n_firms * (cfg.last_year - cfg.first_year + 1) as usize);
    let mut truth = Vec::with_capacity(cfg.n_firms);
    for (r, t) in firms {
        rows.extend(r);
        truth.push(t);
    }
    let config = PanelConfig { first_year: cfg.first_year, last_year: cfg.last_year, phases: cfg.phases.clone() };
    let ds = PanelDataset::from_flagged(rows, config)?;
    Ok((ds, GroundTruth { seed: cfg.seed, effects: cfg.effects.clone(), firms: truth }))
}

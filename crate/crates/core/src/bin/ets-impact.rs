use std::collections::BTreeSet;
use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ets_impact::att::Estimator;
use ets_impact::descstats::{balance_tests, summarize, trim_mid_quantile, BalanceOptions, SummaryOptions};
use ets_impact::frontier::efficiency_scores;
use ets_impact::matching::{match_quality, nn_match, reweight, MatchOptions};
use ets_impact::panel::{fmt_f64, fmt_opt, Variable};
use ets_impact::pipeline::{
    att_csv, att_grid, distance_series_csv, fit_frontiers, frontier_csv, indexed_medians_csv, load_panel, match_sample,
    run_pipeline, satt_csv, satt_rows, scores_csv, table1, table2, write_panel, RunConfig, Table,
};
use ets_impact::propensity::{build_design, enforce_common_support, fit_probit, predict};
use ets_impact::satt::DistanceTable;
use ets_impact::synthgen::{generate, preset};
use ets_impact::{Error, Result};

#[derive(Parser)]
#[command(name = "ets-impact", version, about = "Treatment effects of emissions trading on firm panels")]
struct Cli {
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// TOML run configuration; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Panel CSV (long format). Without it a synthetic panel is drawn.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n_firms: Option<usize>,
    /// Comma-separated outcome variables.
    #[arg(long, value_delimiter = ',')]
    outcomes: Option<Vec<String>>,
    /// Comma-separated assignment covariates, e.g. ln_co2_2003,dln_output_2002_2003,industry.
    #[arg(long, value_delimiter = ',')]
    covariates: Option<Vec<String>>,
    /// minmax, caliper:<r> or none.
    #[arg(long)]
    support: Option<String>,
    /// Comma-separated neighbour counts.
    #[arg(long, value_delimiter = ',')]
    neighbors: Option<Vec<usize>>,
    /// Match only within strata of this variable (`industry`).
    #[arg(long)]
    exact_on: Option<String>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(v) = &self.input {
            cfg.input = Some(v.clone());
        }
        if let Some(v) = &self.preset {
            cfg.preset = v.clone();
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if self.n_firms.is_some() {
            cfg.n_firms = self.n_firms;
        }
        if let Some(v) = &self.outcomes {
            cfg.outcomes = v.iter().map(|s| s.parse::<Variable>()).collect::<Result<_>>()?;
        }
        if let Some(v) = &self.covariates {
            cfg.covariates = v.clone();
        }
        if let Some(v) = &self.support {
            cfg.support = v.clone();
        }
        if let Some(v) = &self.neighbors {
            cfg.neighbours = v.clone();
            cfg.frontier.neighbours = v.clone();
        }
        match self.exact_on.as_deref() {
            None => {}
            Some("industry") => cfg.match_within_industry = true,
            Some(v) => return Err(Error::Config(format!("--exact-on supports only `industry`, got `{v}`"))),
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Draw a synthetic panel and its ground truth.
    Simulate {
        #[arg(long, default_value = "table3_phase2")]
        preset: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        n_firms: Option<usize>,
        #[arg(long, default_value = "panel.csv")]
        out: PathBuf,
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Summary statistics per group (full, treated, control).
    Describe {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        year: Option<i32>,
        /// Central fraction kept per variable, e.g. 0.98.
        #[arg(long)]
        trim: Option<f64>,
        #[arg(long, default_value = "table1.csv")]
        out: PathBuf,
    },
    /// Pre-treatment equality tests before and after matching.
    Balance {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "table2.csv")]
        out: PathBuf,
    },
    /// Fit the assignment probit and score firms.
    Propensity {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "scores.csv")]
        out: PathBuf,
        #[arg(long, default_value = "propensity.json")]
        model: PathBuf,
    },
    /// Matching weights.
    Match {
        #[command(flatten)]
        common: Common,
        /// nn or reweight.
        #[arg(long, default_value = "nn")]
        scheme: String,
        #[arg(long, default_value_t = 1)]
        neighbours: usize,
        #[arg(long, default_value = "weights.csv")]
        out: PathBuf,
    },
    /// ATT grid over outcomes, windows and estimators.
    Att {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "att_grid.csv")]
        out: PathBuf,
    },
    /// Per-industry stochastic frontiers and distance series.
    Frontier {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
    /// Treatment effect on distance to the frontier.
    Satt {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "satt_table.csv")]
        out: PathBuf,
    },
    /// Full pipeline into one report directory.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

fn panel(cfg: &RunConfig) -> Result<ets_impact::panel::PanelDataset> {
    Ok(load_panel(cfg)?.0)
}

enum Failure {
    Plain(Error),
    /// JSON report already written.
    Reported(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Plain(e)
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Plain(e.into())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Plain(e.into())
    }
}

fn execute(command: Command) -> std::result::Result<(), Failure> {
    match command {
        Command::Simulate { preset: name, seed, n_firms, out, truth } => {
            let mut cfg = preset(&name)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(n) = n_firms {
                cfg.n_firms = n;
            }
            let (ds, gt) = generate(&cfg)?;
            write_panel(&ds, &out)?;
            if let Some(path) = truth {
                fs::write(path, serde_json::to_string_pretty(&gt)? + "\n")?;
            }
        }
        Command::Describe { common, year, trim, out } => {
            let cfg = common.resolve()?;
            let ds = panel(&cfg)?;
            let year = year.unwrap_or(cfg.level_year);
            let trim = trim.or(cfg.trim);
            let opts = SummaryOptions { disclosure_floor: cfg.disclosure_floor, trim };
            let mut rows = Vec::new();
            for &v in &cfg.outcomes {
                let sub = match trim {
                    Some(f) => trim_mid_quantile(&ds, v, f)?.0,
                    None => ds.clone(),
                };
                rows.extend(summarize(&sub, &[v], year, None, opts)?);
            }
            table1(&rows).write(&out)?;
        }
        Command::Balance { common, out } => {
            let cfg = common.resolve()?;
            let ds = panel(&cfg)?;
            let s = match_sample(&ds, &cfg)?;
            let opts = BalanceOptions::default();
            let mut reports = vec![(
                "unmatched".to_string(),
                balance_tests(&ds, &s.unmatched, &cfg.outcomes, cfg.level_year, cfg.trend_years, opts)?,
            )];
            for (est, w) in &s.weights {
                reports.push((
                    est.to_string(),
                    balance_tests(&ds, w, &cfg.outcomes, cfg.level_year, cfg.trend_years, opts)?,
                ));
            }
            table2(&reports).write(&out)?;
        }
        Command::Propensity { common, out, model } => {
            let cfg = common.resolve()?;
            let ds = panel(&cfg)?;
            let (design, d, _) = build_design(&ds, &cfg.covariate_list()?);
            let m = fit_probit(&design.x, &d, &design.names)?;
            let scored = predict(&m, &design, &d, |f| ds.industry_of(f))?;
            let support = enforce_common_support(&scored, cfg.support_rule()?)?;
            let off: BTreeSet<&str> = support.dropped.iter().map(|u| u.firm_id.as_str()).collect();
            let mut t = Table::new(&["firm_id", "treated", "industry", "index", "p", "on_support"]);
            for u in &scored {
                t.rows.push(vec![
                    u.firm_id.clone(),
                    u8::from(u.treated).to_string(),
                    u.industry.map(|i| i.to_string()).unwrap_or_default(),
                    fmt_f64(u.index),
                    fmt_f64(u.p),
                    (!off.contains(u.firm_id.as_str())).to_string(),
                ]);
            }
            t.write(&out)?;
            fs::write(model, serde_json::to_string_pretty(&m)? + "\n")?;
        }
        Command::Match { common, scheme, neighbours, out } => {
            let cfg = common.resolve()?;
            let ds = panel(&cfg)?;
            let (design, d, _) = build_design(&ds, &cfg.covariate_list()?);
            let m = fit_probit(&design.x, &d, &design.names)?;
            let scored = predict(&m, &design, &d, |f| ds.industry_of(f))?;
            let retained = enforce_common_support(&scored, cfg.support_rule()?)?.retained;
            let w = match scheme.as_str() {
                "nn" => {
                    let opts = MatchOptions { exact_on_industry: cfg.match_within_industry, ..Default::default() };
                    nn_match(&retained, neighbours, opts)?
                }
                "reweight" => reweight(&retained, false)?,
                _ => return Err(Error::Config(format!("unknown scheme `{scheme}`; use nn or reweight")).into()),
            };
            let mut t = Table::new(&["treated_id", "control_id", "weight", "distance"]);
            for (ti, ci, wt, dist) in w.table() {
                t.rows.push(vec![ti, ci, fmt_f64(wt), fmt_opt(dist)]);
            }
            t.write(&out)?;
            let q = match_quality(&w, &retained);
            let summary = serde_json::json!({
                "mean_distance": q.mean_distance,
                "max_distance": q.max_distance,
                "distinct_controls": q.distinct_controls,
                "max_reuse": q.reuse.values().max(),
            });
            println!("{summary}");
        }
        Command::Att { common, out } => {
            let cfg = common.resolve()?;
            let ds = panel(&cfg)?;
            let s = match_sample(&ds, &cfg)?;
            att_csv(&att_grid(&ds, &cfg, &s)).write(&out)?;
        }
        Command::Frontier { common, out_dir } => {
            let cfg = common.resolve()?;
            let ds = panel(&cfg)?;
            fs::create_dir_all(&out_dir)?;
            let fits = fit_frontiers(&ds, &cfg.frontier);
            let scores = scores_of(&fits, &ds, &cfg);
            frontier_csv(&fits).write(&out_dir.join("frontier_coeffs.csv"))?;
            scores_csv(&scores).write(&out_dir.join("scores.csv"))?;
            distance_series_csv(&scores, &ds).write(&out_dir.join("distance_series.csv"))?;
            indexed_medians_csv(&ds, cfg.frontier.first_year).write(&out_dir.join("indexed_medians.csv"))?;
        }
        Command::Satt { common, out } => {
            let cfg = common.resolve()?;
            let ds = panel(&cfg)?;
            let fits = fit_frontiers(&ds, &cfg.frontier);
            let scores = scores_of(&fits, &ds, &cfg);
            let mut nn_cfg = cfg.clone();
            nn_cfg.neighbours = cfg.frontier.neighbours.clone();
            nn_cfg.reweight = false;
            let s = match_sample(&ds, &nn_cfg)?;
            let weights = s
                .weights
                .into_iter()
                .filter_map(|(e, w)| match e {
                    Estimator::Nn { m } => Some((m, w)),
                    Estimator::ReweightedOls => None,
                })
                .collect::<Vec<_>>();
            let table = DistanceTable::from_scores(&scores);
            let weights = weights.into_iter().map(|(m, w)| (m, w.retain_units(|f| table.contains_firm(f)))).collect();
            let rows = satt_rows(&table, &ds, &weights, &cfg.frontier);
            satt_csv(&rows, &cfg.frontier.neighbours).write(&out)?;
        }
        Command::Run { common, out_dir } => {
            let mut cfg = common.resolve()?;
            if let Some(d) = out_dir {
                cfg.output_dir = d;
            }
            run_pipeline(&cfg).map_err(|e| {
                eprintln!("{}", e.to_json());
                Failure::Reported(e.error)
            })?;
        }
    }
    Ok(())
}

fn scores_of(
    fits: &[ets_impact::pipeline::FrontierFit],
    ds: &ets_impact::panel::PanelDataset,
    cfg: &RunConfig,
) -> Vec<ets_impact::frontier::EfficiencyScore> {
    let years = cfg.frontier.first_year..=cfg.frontier.last_year;
    fits.iter()
        .filter_map(|f| f.result.as_ref().ok())
        .flat_map(|m| efficiency_scores(m, ds))
        .filter(|s| years.contains(&s.year))
        .collect()
}

fn report(err: &Error) {
    let json = serde_json::json!({
        "kind": err.kind().as_str(),
        "exit_code": err.kind().exit_code(),
        "message": err.to_string(),
    });
    eprintln!("{json}");
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            report(&Error::Config(format!("thread pool: {e}")));
            return ExitCode::from(2);
        }
    }
    let err = match execute(cli.command) {
        Ok(()) => return ExitCode::SUCCESS,
        Err(Failure::Plain(e)) => {
            report(&e);
            e
        }
        Err(Failure::Reported(e)) => e,
    };
    ExitCode::from(err.kind().exit_code() as u8)
}

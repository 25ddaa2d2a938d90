//! C interface. Panels and fitted frontiers live behind opaque handles that
//! the caller frees. Every fallible call returns an [`EtsStatus`]; the
//! message of the last failure on the calling thread is available from
//! [`ets_last_error_message`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::fs::File;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use ets_impact::att::Estimator;
use ets_impact::frontier::{fit_frontier, frontier_data, returns_to_scale, FrontierModel, FrontierOptions};
use ets_impact::panel::{ingest_csv, write_csv, ColumnMapping, PanelConfig, PanelDataset, Variable, WindowLabel};
use ets_impact::pipeline::{att_grid, match_sample, run_pipeline, RunConfig};
use ets_impact::synthgen::{generate, preset};
use ets_impact::{Error, ErrorKind};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EtsStatus {
    Ok = 0,
    NullArgument = 1,
    Config = 2,
    Data = 3,
    Estimation = 4,
    Io = 5,
    Panic = 6,
}

/// Opaque firm-year panel.
pub struct EtsPanel(PanelDataset);

/// Opaque fitted frontier for one industry.
pub struct EtsFrontier(FrontierModel);

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct EtsPanelCounts {
    pub n_firms: usize,
    pub n_treated: usize,
    pub n_obs: usize,
}

/// One treatment-effect cell. `estimate` and `se` are in log points.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct EtsAtt {
    pub estimate: f64,
    pub se: f64,
    pub p_value: f64,
    pub n_treated: usize,
    pub n_controls: usize,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct EtsFrontierParams {
    pub industry: u16,
    pub constant: f64,
    pub beta_k: f64,
    pub beta_l: f64,
    pub beta_e: f64,
    /// Noise standard deviation.
    pub sigma_u: f64,
    pub mu_v: f64,
    /// Inefficiency scale.
    pub sigma_v: f64,
    pub log_likelihood: f64,
    pub n_obs: usize,
    pub converged: bool,
    pub boundary: bool,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

enum Fail {
    Null(&'static str),
    Core(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Core(e)
    }
}

fn status_of(e: &Error) -> EtsStatus {
    match e.kind() {
        ErrorKind::Config => EtsStatus::Config,
        ErrorKind::Data => EtsStatus::Data,
        ErrorKind::Estimation => EtsStatus::Estimation,
        ErrorKind::Io => EtsStatus::Io,
    }
}

/// Runs `f`, converting errors and panics into a status and the
/// thread-local message.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> EtsStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => EtsStatus::Ok,
        Ok(Err(Fail::Null(arg))) => {
            set_error(format!("null argument `{arg}`"));
            EtsStatus::NullArgument
        }
        Ok(Err(Fail::Core(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal panic: {msg}"));
            EtsStatus::Panic
        }
    }
}

unsafe fn text<'a>(p: *const c_char, name: &'static str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail::Null(name));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Fail::Core(Error::Config(format!("`{name}` is not UTF-8"))))
}

unsafe fn out<'a, T>(p: *mut T, name: &'static str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or(Fail::Null(name))
}

unsafe fn handle<'a, T>(p: *const T, name: &'static str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or(Fail::Null(name))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ets_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or NULL after a
/// success. Valid until the next call into the library on this thread.
#[no_mangle]
pub extern "C" fn ets_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Reads a long-format panel CSV.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out_panel` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ets_panel_read_csv(path: *const c_char, out_panel: *mut *mut EtsPanel) -> EtsStatus {
    guard(|| {
        let path = text(path, "path")?;
        let slot = out(out_panel, "out_panel")?;
        let file = File::open(path).map_err(Error::from)?;
        let (ds, _) = ingest_csv(file, &ColumnMapping::default(), PanelConfig::default())?;
        *slot = Box::into_raw(Box::new(EtsPanel(ds)));
        Ok(())
    })
}

/// Reads a panel from CSV bytes held in memory.
///
/// # Safety
/// `data` must point to `len` readable bytes and `out_panel` be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ets_panel_from_bytes(data: *const u8, len: usize, out_panel: *mut *mut EtsPanel) -> EtsStatus {
    guard(|| {
        if data.is_null() {
            return Err(Fail::Null("data"));
        }
        let slot = out(out_panel, "out_panel")?;
        let bytes = std::slice::from_raw_parts(data, len);
        let (ds, _) = ingest_csv(bytes, &ColumnMapping::default(), PanelConfig::default())?;
        *slot = Box::into_raw(Box::new(EtsPanel(ds)));
        Ok(())
    })
}

/// Draws a synthetic panel from a named preset. `n_firms` 0 keeps the
/// preset's size.
///
/// # Safety
/// `preset_name` must be a NUL-terminated string and `out_panel` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ets_panel_simulate(
    preset_name: *const c_char,
    seed: u64,
    n_firms: usize,
    out_panel: *mut *mut EtsPanel,
) -> EtsStatus {
    guard(|| {
        let mut cfg = preset(text(preset_name, "preset_name")?)?;
        let slot = out(out_panel, "out_panel")?;
        cfg.seed = seed;
        if n_firms > 0 {
            cfg.n_firms = n_firms;
        }
        let (ds, _) = generate(&cfg)?;
        *slot = Box::into_raw(Box::new(EtsPanel(ds)));
        Ok(())
    })
}

/// # Safety
/// `panel` must be a live handle and `counts` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ets_panel_counts(panel: *const EtsPanel, counts: *mut EtsPanelCounts) -> EtsStatus {
    guard(|| {
        let p = &handle(panel, "panel")?.0;
        *out(counts, "counts")? =
            EtsPanelCounts { n_firms: p.n_firms(), n_treated: p.n_treated(), n_obs: p.observations().len() };
        Ok(())
    })
}

/// # Safety
/// `panel` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn ets_panel_write_csv(panel: *const EtsPanel, path: *const c_char) -> EtsStatus {
    guard(|| {
        let p = &handle(panel, "panel")?.0;
        let path = text(path, "path")?;
        let file = File::create(path).map_err(Error::from)?;
        write_csv(p, file)?;
        Ok(())
    })
}

/// # Safety
/// `panel` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ets_panel_free(panel: *mut EtsPanel) {
    if !panel.is_null() {
        drop(Box::from_raw(panel));
    }
}

fn config(toml: Option<&str>) -> Result<RunConfig, Error> {
    let cfg = match toml {
        Some(t) => RunConfig::from_toml(t)?,
        None => RunConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

unsafe fn optional_text<'a>(p: *const c_char, name: &'static str) -> Result<Option<&'a str>, Fail> {
    if p.is_null() {
        Ok(None)
    } else {
        text(p, name).map(Some)
    }
}

/// Runs the whole pipeline and writes the report bundle to `out_dir`.
/// `config_toml` may be NULL for defaults.
///
/// # Safety
/// Both arguments must be NULL-or-NUL-terminated strings; `out_dir` is
/// required.
#[no_mangle]
pub unsafe extern "C" fn ets_run_pipeline(config_toml: *const c_char, out_dir: *const c_char) -> EtsStatus {
    guard(|| {
        let mut cfg = config(optional_text(config_toml, "config_toml")?)?;
        cfg.output_dir = PathBuf::from(text(out_dir, "out_dir")?);
        run_pipeline(&cfg).map_err(|e| Fail::Core(e.error))?;
        Ok(())
    })
}

/// One ATT cell on `panel`. `estimator` is e.g. "NN(1:5)" or "OLS-w/R";
/// `window` is "Pretreatment", "PhaseI" or "PhaseII". Other settings come
/// from `config_toml` (NULL for defaults).
///
/// # Safety
/// `panel` must be a live handle, strings NUL-terminated and `result` a
/// valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ets_att(
    panel: *const EtsPanel,
    outcome: *const c_char,
    window: *const c_char,
    estimator: *const c_char,
    config_toml: *const c_char,
    result: *mut EtsAtt,
) -> EtsStatus {
    guard(|| {
        let ds = &handle(panel, "panel")?.0;
        let outcome: Variable = text(outcome, "outcome")?.parse()?;
        let window: WindowLabel = text(window, "window")?.parse()?;
        let estimator: Estimator = text(estimator, "estimator")?.parse()?;
        let slot = out(result, "result")?;
        let mut cfg = config(optional_text(config_toml, "config_toml")?)?;
        cfg.outcomes = vec![outcome];
        match estimator {
            Estimator::Nn { m } => {
                cfg.neighbours = vec![m];
                cfg.reweight = false;
            }
            Estimator::ReweightedOls => {
                cfg.neighbours = vec![];
                cfg.reweight = true;
            }
        }
        let sample = match_sample(ds, &cfg)?;
        let cell = att_grid(ds, &cfg, &sample)
            .into_iter()
            .find(|c| c.window == window && c.estimator == estimator)
            .ok_or_else(|| Error::Config(format!("window `{window}` is not part of the grid")))?;
        let e = cell.result.map_err(Error::Estimation)?;
        *slot = EtsAtt {
            estimate: e.estimate,
            se: e.se,
            p_value: e.p_value,
            n_treated: e.n_treated,
            n_controls: e.n_controls,
        };
        Ok(())
    })
}

/// Fits the frontier of one industry over `first_year..=last_year` with
/// default options.
///
/// # Safety
/// `panel` must be a live handle and `out_frontier` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ets_frontier_fit(
    panel: *const EtsPanel,
    industry: u16,
    first_year: i32,
    last_year: i32,
    out_frontier: *mut *mut EtsFrontier,
) -> EtsStatus {
    guard(|| {
        let ds = &handle(panel, "panel")?.0;
        let slot = out(out_frontier, "out_frontier")?;
        let (data, _) = frontier_data(ds, industry, first_year..=last_year);
        let m = fit_frontier(&data, industry, FrontierOptions::default())?;
        *slot = Box::into_raw(Box::new(EtsFrontier(m)));
        Ok(())
    })
}

/// # Safety
/// `frontier` must be a live handle and `params` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ets_frontier_params(
    frontier: *const EtsFrontier,
    params: *mut EtsFrontierParams,
) -> EtsStatus {
    guard(|| {
        let m = &handle(frontier, "frontier")?.0;
        *out(params, "params")? = EtsFrontierParams {
            industry: m.industry,
            constant: m.constant,
            beta_k: m.beta_k,
            beta_l: m.beta_l,
            beta_e: m.beta_e,
            sigma_u: m.sigma_u,
            mu_v: m.mu_v,
            sigma_v: m.sigma_v,
            log_likelihood: m.log_likelihood,
            n_obs: m.n_obs,
            converged: m.converged,
            boundary: m.boundary,
        };
        Ok(())
    })
}

/// Sum of the input elasticities; NaN for a NULL handle.
///
/// # Safety
/// `frontier` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ets_frontier_returns_to_scale(frontier: *const EtsFrontier) -> f64 {
    frontier.as_ref().map_or(f64::NAN, |f| returns_to_scale(&f.0))
}

/// # Safety
/// `frontier` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ets_frontier_free(frontier: *mut EtsFrontier) {
    if !frontier.is_null() {
        drop(Box::from_raw(frontier));
    }
}

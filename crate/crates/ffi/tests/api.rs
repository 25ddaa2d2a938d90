use std::ffi::{CStr, CString};
use std::ptr;

use ets_impact_ffi::*;

fn c(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn last_error() -> String {
    let p = ets_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn simulate(name: &str, n: usize) -> *mut EtsPanel {
    let mut p = ptr::null_mut();
    assert_eq!(unsafe { ets_panel_simulate(c(name).as_ptr(), 20_050_101, n, &mut p) }, EtsStatus::Ok);
    p
}

#[test]
fn version_matches_crate() {
    let v = unsafe { CStr::from_ptr(ets_version()) };
    assert_eq!(v.to_str().unwrap(), ets_impact::VERSION);
}

#[test]
fn simulate_count_and_round_trip() {
    let p = simulate("null", 300);
    let mut counts = EtsPanelCounts::default();
    assert_eq!(unsafe { ets_panel_counts(p, &mut counts) }, EtsStatus::Ok);
    assert_eq!(counts.n_firms, 300);
    assert!(counts.n_treated > 0 && counts.n_obs >= 300);

    let dir = tempfile::tempdir().unwrap();
    let path = c(dir.path().join("p.csv").to_str().unwrap());
    assert_eq!(unsafe { ets_panel_write_csv(p, path.as_ptr()) }, EtsStatus::Ok);

    let mut q = ptr::null_mut();
    assert_eq!(unsafe { ets_panel_read_csv(path.as_ptr(), &mut q) }, EtsStatus::Ok);
    let mut again = EtsPanelCounts::default();
    unsafe { ets_panel_counts(q, &mut again) };
    assert_eq!((again.n_firms, again.n_treated, again.n_obs), (counts.n_firms, counts.n_treated, counts.n_obs));

    let bytes = std::fs::read(dir.path().join("p.csv")).unwrap();
    let mut r = ptr::null_mut();
    assert_eq!(unsafe { ets_panel_from_bytes(bytes.as_ptr(), bytes.len(), &mut r) }, EtsStatus::Ok);
    unsafe {
        ets_panel_free(p);
        ets_panel_free(q);
        ets_panel_free(r);
    }
}

#[test]
fn error_codes_and_messages() {
    let mut p = ptr::null_mut();
    let st = unsafe { ets_panel_simulate(c("nonsense").as_ptr(), 1, 0, &mut p) };
    assert_eq!(st, EtsStatus::Config);
    assert!(last_error().contains("nonsense"));
    assert!(p.is_null());

    assert_eq!(unsafe { ets_panel_simulate(ptr::null(), 1, 0, &mut p) }, EtsStatus::NullArgument);
    assert_eq!(unsafe { ets_panel_counts(ptr::null(), &mut EtsPanelCounts::default()) }, EtsStatus::NullArgument);

    let dup = b"firm_id,year,treated\na,2003,1\na,2003,1\n";
    assert_eq!(unsafe { ets_panel_from_bytes(dup.as_ptr(), dup.len(), &mut p) }, EtsStatus::Data);

    let st = unsafe { ets_panel_read_csv(c("/nonexistent/panel.csv").as_ptr(), &mut p) };
    assert_eq!(st, EtsStatus::Io);

    // a success clears the message
    let ok = simulate("null", 50);
    assert!(ets_last_error_message().is_null());
    unsafe { ets_panel_free(ok) };

    // freeing NULL is a no-op
    unsafe {
        ets_panel_free(ptr::null_mut());
        ets_frontier_free(ptr::null_mut());
    }
    assert!(unsafe { ets_frontier_returns_to_scale(ptr::null()) }.is_nan());
}

#[test]
fn att_matches_core() {
    let p = simulate("table3_phase2", 2000);
    let mut r = EtsAtt::default();
    let st =
        unsafe { ets_att(p, c("co2").as_ptr(), c("PhaseII").as_ptr(), c("NN(1:5)").as_ptr(), ptr::null(), &mut r) };
    assert_eq!(st, EtsStatus::Ok, "{}", last_error());

    let (ds, _) = ets_impact::synthgen::generate(&ets_impact::synthgen::SynthConfig {
        n_firms: 2000,
        ..ets_impact::synthgen::preset("table3_phase2").unwrap()
    })
    .unwrap();
    let cfg = ets_impact::pipeline::RunConfig {
        outcomes: vec!["co2".parse().unwrap()],
        neighbours: vec![5],
        reweight: false,
        ..Default::default()
    };
    let sample = ets_impact::pipeline::match_sample(&ds, &cfg).unwrap();
    let cell = ets_impact::pipeline::att_grid(&ds, &cfg, &sample)
        .into_iter()
        .find(|c| c.window.to_string() == "PhaseII")
        .unwrap();
    let want = cell.result.unwrap();
    assert_eq!(r.estimate, want.estimate);
    assert_eq!(r.se, want.se);
    assert_eq!(r.n_treated, want.n_treated);

    let st =
        unsafe { ets_att(p, c("co2").as_ptr(), c("PhaseII").as_ptr(), c("NN(1:0)").as_ptr(), ptr::null(), &mut r) };
    assert_eq!(st, EtsStatus::Config);
    unsafe { ets_panel_free(p) };
}

#[test]
fn frontier_fit_and_params() {
    let p = simulate("table3_phase2", 1500);
    let mut f = ptr::null_mut();
    let st = unsafe { ets_frontier_fit(p, 20, 2003, 2012, &mut f) };
    assert_eq!(st, EtsStatus::Ok, "{}", last_error());
    let mut params = EtsFrontierParams::default();
    assert_eq!(unsafe { ets_frontier_params(f, &mut params) }, EtsStatus::Ok);
    assert_eq!(params.industry, 20);
    assert!(params.converged && params.n_obs > 0);
    let rts = unsafe { ets_frontier_returns_to_scale(f) };
    assert!((rts - (params.beta_k + params.beta_l + params.beta_e)).abs() < 1e-12);

    // an industry with no firms has too few observations
    let mut g = ptr::null_mut();
    assert_eq!(unsafe { ets_frontier_fit(p, 99, 2003, 2012, &mut g) }, EtsStatus::Data);
    unsafe {
        ets_frontier_free(f);
        ets_panel_free(p);
    }
}

#[test]
fn pipeline_writes_bundle() {
    let dir = tempfile::tempdir().unwrap();
    let out = c(dir.path().to_str().unwrap());
    let cfg = c("preset = \"null\"\nn_firms = 400\n");
    assert_eq!(unsafe { ets_run_pipeline(cfg.as_ptr(), out.as_ptr()) }, EtsStatus::Ok, "{}", last_error());
    assert!(dir.path().join("att_grid.csv").exists());
    assert!(dir.path().join("run_manifest.json").exists());

    let bad = c("neighbours = []\nreweight = false\n");
    assert_eq!(unsafe { ets_run_pipeline(bad.as_ptr(), out.as_ptr()) }, EtsStatus::Config);
}

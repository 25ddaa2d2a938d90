use ets_impact::panel::{
    ingest_csv, write_csv, ColumnMapping, FirmYear, PanelConfig, PanelDataset, PhaseWindow, Scale, Variable,
    WindowLabel,
};
use ets_impact::synthgen::{generate, SynthConfig};
use ets_impact::Error;

fn ingest(text: &str) -> ets_impact::Result<PanelDataset> {
    ingest_csv(text.as_bytes(), &ColumnMapping::identity(), PanelConfig::default()).map(|(ds, _)| ds)
}

#[test]
fn two_rows_one_treated_firm() {
    let ds = ingest("firm_id,year,treated,output\nf1,2003,1,10\nf1,2005,1,12\n").unwrap();
    assert_eq!(ds.n_obs(), 2);
    assert_eq!(ds.n_firms(), 1);
    assert_eq!(ds.n_treated(), 1);
}

#[test]
fn duplicate_key_is_named() {
    let err = ingest("firm_id,year,treated\nf1,2003,0\nf1,2003,0\n").unwrap_err();
    assert!(matches!(&err, Error::DuplicateKeys(k) if k == &[("f1".to_string(), 2003)]));
    assert!(err.to_string().contains("f1/2003"));
}

#[test]
fn missing_mandatory_column() {
    let err = ingest("firm_id,year,output\nf1,2003,1\n").unwrap_err();
    assert!(matches!(err, Error::MissingColumn(ref c) if c == "treated"));
}

#[test]
fn treatment_varying_within_firm() {
    let err = ingest("firm_id,year,treated\nf1,2003,0\nf1,2004,1\n").unwrap_err();
    assert!(matches!(err, Error::TreatmentVaries(ref f) if f == &["f1".to_string()]));
}

#[test]
fn renamed_columns() {
    let mut schema = ColumnMapping::identity();
    schema.rename.insert("firm_id".into(), "id".into());
    schema.rename.insert("output".into(), "go".into());
    let (ds, _) = ingest_csv("id,year,treated,go\na,2004,0,7.5\n".as_bytes(), &schema, PanelConfig::default()).unwrap();
    assert_eq!(ds.get("a", 2004).unwrap().output, Some(7.5));
}

#[test]
fn bad_cells_are_reported_not_fatal() {
    let (ds, report) = ingest_csv(
        "firm_id,year,treated,output,co2\nf1,2003,0,abc,-4\n".as_bytes(),
        &ColumnMapping::identity(),
        PanelConfig::default(),
    )
    .unwrap();
    assert_eq!(ds.n_obs(), 1);
    assert_eq!(report.invalid_cells.len(), 2);
    assert_eq!(ds.get("f1", 2003).unwrap().output, None);
}

#[test]
fn synthetic_rows_round_trip() {
    let cfg = SynthConfig { n_firms: 2, first_year: 2003, last_year: 2005, treated_share: 0.4, ..Default::default() };
    let (ds, _) = generate(&cfg).unwrap();
    assert_eq!(ds.n_obs(), 6);
    let mut buf = Vec::new();
    write_csv(&ds, &mut buf).unwrap();
    let (back, report) = ingest_csv(buf.as_slice(), &ColumnMapping::identity(), ds.config.clone()).unwrap();
    assert!(report.invalid_cells.is_empty());
    assert_eq!(back.observations(), ds.observations());
    assert_eq!(back.treatment(), ds.treatment());
}

fn single(o: FirmYear) -> PanelDataset {
    PanelDataset::from_flagged(vec![(o, false)], PanelConfig::default()).unwrap()
}

#[test]
fn co2_intensity_units() {
    let mut o = FirmYear::new("f", 2003);
    o.co2 = Some(1000.0);
    o.output = Some(1000.0);
    let (ds, _) = single(o).derive_variables(2003);
    assert_eq!(ds.derived_at("f", 2003).unwrap().co2_intensity, Some(1_000_000.0));
}

#[test]
fn unchanged_output_has_zero_log_change() {
    let rows = [2003, 2006].map(|y| {
        let mut o = FirmYear::new("f", y);
        o.output = Some(321.5);
        (o, false)
    });
    let ds = PanelDataset::from_flagged(rows.to_vec(), PanelConfig::default()).unwrap();
    let (ds, _) = ds.derive_variables(2003);
    assert_eq!(ds.derived_at("f", 2006).unwrap().log_diff(Variable::Output), Some(0.0));
}

#[test]
fn zero_exports() {
    let rows = [2003, 2006].map(|y| {
        let mut o = FirmYear::new("f", y);
        o.output = Some(50.0);
        o.exports = Some(if y == 2003 { 5.0 } else { 0.0 });
        (o, false)
    });
    let ds = PanelDataset::from_flagged(rows.to_vec(), PanelConfig::default()).unwrap();
    let (ds, report) = ds.derive_variables(2003);
    let d = ds.derived_at("f", 2006).unwrap();
    assert_eq!(d.export_share, Some(0.0));
    assert_eq!(d.log_diff(Variable::Exports), None);
    assert_eq!(report.nonpositive, vec![("f".to_string(), 2006, Variable::Exports)]);
}

fn share_panel(values: &[(i32, Option<f64>)]) -> PanelDataset {
    let rows = values
        .iter()
        .map(|&(y, v)| {
            let mut o = FirmYear::new("f", y);
            o.output = Some(100.0);
            o.exports = v.map(|s| s * 100.0);
            (o, true)
        })
        .collect();
    PanelDataset::from_flagged(rows, PanelConfig::default()).unwrap()
}

#[test]
fn phase_means() {
    let phase1 = PhaseWindow::new(WindowLabel::PhaseI, 2005, 2007);
    let mean = |ds: &PanelDataset| ds.phase_mean_outcome("f", Variable::ExportShare, Scale::Level, &phase1).unwrap();

    let full = share_panel(&[(2005, Some(0.1)), (2006, Some(0.2)), (2007, Some(0.3))]);
    assert!((mean(&full) - 0.2).abs() < 1e-15);

    let one = share_panel(&[(2004, Some(0.9)), (2006, Some(0.25))]);
    assert_eq!(mean(&one), 0.25);

    // oracle: mean over the non-missing years
    let gap = share_panel(&[(2005, Some(0.1)), (2006, None), (2007, Some(0.3))]);
    assert!((mean(&gap) - (0.1 + 0.3) / 2.0).abs() < 1e-15);

    let none = share_panel(&[(2003, Some(0.1))]);
    assert_eq!(none.phase_mean_outcome("f", Variable::ExportShare, Scale::Level, &phase1), None);
}

#[test]
fn rows_outside_window_are_skipped() {
    let cfg = PanelConfig { first_year: 2002, last_year: 2012, ..Default::default() };
    let (ds, report) =
        ingest_csv("firm_id,year,treated\nf1,1999,0\nf1,2003,0\n".as_bytes(), &ColumnMapping::identity(), cfg).unwrap();
    assert_eq!(ds.n_obs(), 1);
    assert_eq!(report.out_of_window, vec![("f1".to_string(), 1999)]);
}

use proptest::prelude::*;

use ets_impact::panel::{fmt_f64, ingest_csv, write_csv, ColumnMapping, FirmYear, PanelConfig, PanelDataset};
use ets_impact::stats::{weighted_sample, welch_unweighted};

fn positive() -> impl Strategy<Value = Option<f64>> {
    prop_oneof![Just(None), (1e-3f64..1e9).prop_map(Some)]
}

prop_compose! {
    fn firm_year(id: usize, year: i32)(
        industry in prop::option::of(10u16..40),
        output in positive(),
        capital in positive(),
        co2 in positive(),
        avg_wage in positive(),
    ) -> FirmYear {
        FirmYear { industry, output, capital, co2, avg_wage, ..FirmYear::new(format!("f{id}"), year) }
    }
}

fn panel() -> impl Strategy<Value = Vec<(FirmYear, bool)>> {
    prop::collection::vec((any::<bool>(), 1usize..4), 1..6).prop_flat_map(|firms| {
        let mut rows = Vec::new();
        for (id, (treated, years)) in firms.into_iter().enumerate() {
            for y in 0..years {
                rows.push(firm_year(id, 2003 + y as i32).prop_map(move |o| (o, treated)).boxed());
            }
        }
        rows
    })
}

proptest! {
    #[test]
    fn number_format_round_trips(v in any::<f64>().prop_filter("finite", |v| v.is_finite())) {
        prop_assert_eq!(fmt_f64(v).parse::<f64>().unwrap(), v);
    }

    #[test]
    fn csv_round_trip(rows in panel()) {
        let ds = PanelDataset::from_flagged(rows, PanelConfig::default()).unwrap();
        let mut buf = Vec::new();
        write_csv(&ds, &mut buf).unwrap();
        let (back, rep) = ingest_csv(buf.as_slice(), &ColumnMapping::default(), PanelConfig::default()).unwrap();
        prop_assert!(rep.invalid_cells.is_empty() && rep.out_of_window.is_empty());
        prop_assert_eq!(back.observations(), ds.observations());
        prop_assert_eq!(back.n_treated(), ds.n_treated());
    }

    #[test]
    fn welch_is_antisymmetric(
        a in prop::collection::vec(-5.0f64..5.0, 3..30),
        b in prop::collection::vec(-5.0f64..5.0, 3..30),
    ) {
        let ab = welch_unweighted(&a, &b).unwrap();
        let ba = welch_unweighted(&b, &a).unwrap();
        prop_assert!((ab.t + ba.t).abs() < 1e-12);
        prop_assert!((ab.p_value - ba.p_value).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&ab.p_value));
    }

    #[test]
    fn weighted_mean_and_effective_size(a in prop::collection::vec((-5.0f64..5.0, 1u32..4), 3..15)) {
        let (va, wa): (Vec<f64>, Vec<f64>) = a.iter().map(|&(v, w)| (v, w as f64)).unzip();
        let s = weighted_sample(&va, &wa).unwrap();
        let total: f64 = wa.iter().sum();
        let mean = va.iter().zip(&wa).map(|(v, w)| v * w).sum::<f64>() / total;
        prop_assert!((s.mean - mean).abs() < 1e-12);
        // Kish size lies between the largest weight's share and the unit count
        prop_assert!(s.n_eff <= va.len() as f64 + 1e-9);
        prop_assert!(s.n_eff >= total / wa.iter().cloned().fold(0.0, f64::max) - 1e-9);
    }
}

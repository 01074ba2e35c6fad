use chrono::NaiveDate;
use diseasemap::dataprep::{
    build_panel, expected_cases, lag_covariates, polynomial_expand, read_panel_csv, standardize, write_panel_csv,
    ColumnKind, CovariateHistory, Panel, WeeksMode,
};
use diseasemap::gmrf::{constraint_set, interaction_structure, rw2_structure, InteractionKind};
use diseasemap::graph::{icar_structure, AdjacencyGraph};
use diseasemap::model::{build_model, ModelOptions};
use diseasemap::synth::{self, Lattice};
use proptest::prelude::*;

fn raw_panel(lat: &Lattice, n_days: usize, seed: u64) -> Panel {
    let start = NaiveDate::from_ymd_opt(2020, 3, 1).unwrap();
    let cases = synth::synthetic_cases(&lat.regions, start, n_days, 30.0, seed);
    let env = synth::environment_values(&lat.regions, -20, n_days as i32, seed + 1);
    let history = CovariateHistory::from_region_values(&lat.regions, &env).unwrap();
    let density = diseasemap::dataprep::population_density(&lat.regions, Some(&lat.shapes)).unwrap();
    build_panel(&lat.regions, &cases, history, &density, WeeksMode::Ceil7).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn expected_counts_preserve_daily_totals(
        n_regions in 1usize..8,
        n_days in 1usize..12,
        seed in any::<u64>(),
    ) {
        let mut rng = synth::rng(seed);
        use rand::Rng;
        let pops: Vec<f64> = (0..n_regions).map(|_| rng.random_range(100.0..1e6)).collect();
        let observed: Vec<u64> = (0..n_regions * n_days).map(|_| rng.random_range(0..500)).collect();
        let e = expected_cases(&observed, n_days, &pops);
        for d in 0..n_days {
            let o: f64 = (0..n_regions).map(|i| observed[i * n_days + d] as f64).sum();
            let s: f64 = (0..n_regions).map(|i| e[i * n_days + d]).sum();
            prop_assert!((o - s).abs() <= 1e-9 * o.max(1.0));
        }
    }

    #[test]
    fn panel_offsets_and_transforms(seed in 0u64..1000, rows in 1usize..3, cols in 2usize..4, n_days in 8usize..20) {
        let lat = Lattice::new(rows, cols);
        let panel = raw_panel(&lat, n_days, seed);
        prop_assert!(panel.offset_identity_error() <= 1e-9);
        prop_assert_eq!(&lag_covariates(&panel, 0, false).unwrap(), &panel);

        let lagged = lag_covariates(&panel, 7, false).unwrap();
        prop_assert!(lagged.offset_identity_error() <= 1e-9);

        let z = standardize(&lagged).unwrap();
        for (col, raw) in z.columns.iter().zip(&lagged.columns) {
            let tr = z.transforms.iter().find(|t| t.kind == col.kind).unwrap();
            for (a, b) in col.values.iter().zip(&raw.values) {
                prop_assert!((tr.invert(*a) - b).abs() <= 1e-9 * b.abs().max(1.0));
            }
        }

        let cubic = polynomial_expand(&z, 3).unwrap();
        prop_assert_eq!(cubic.columns.len(), z.columns.len() + 6);
        let mut dropped = cubic.clone();
        dropped.columns.retain(|c| !matches!(c.kind, ColumnKind::Power { .. }));
        dropped.poly_degree = 1;
        prop_assert_eq!(&dropped, &z);
        prop_assert_eq!(&polynomial_expand(&cubic, 1).unwrap(), &z);
    }

    #[test]
    fn projection_lands_in_constraint_space(
        n in 3usize..7,
        t in 3usize..7,
        kind in 0usize..4,
        seed in any::<u64>(),
    ) {
        use rand::Rng;
        let g = AdjacencyGraph::from_index_pairs(n, (0..n - 1).map(|i| (i, i + 1))).unwrap();
        let rs = icar_structure::<f64>(&g).unwrap();
        let rt = rw2_structure::<f64>(t).unwrap();
        let q = interaction_structure(InteractionKind::ALL[kind], &rs, &rt).unwrap();
        let a = constraint_set(&q);
        let mut rng = synth::rng(seed);
        let mut x: Vec<f64> = (0..n * t).map(|_| rng.random_range(-3.0..3.0)).collect();
        a.project(&mut x);
        prop_assert!(a.residual(&x) <= 1e-10);
        let before = x.clone();
        a.project(&mut x);
        for (p, q) in x.iter().zip(&before) {
            prop_assert!((p - q).abs() <= 1e-12);
        }
    }

    #[test]
    fn registry_is_a_partition(id in 1u8..=12, rows in 1usize..3, cols in 2usize..4, degree in 1u8..=3) {
        let lat = Lattice::new(rows, cols);
        let panel = polynomial_expand(&synth::covariate_panel(&lat.regions, 21, 5), degree).unwrap();
        let opts = ModelOptions { poly_degree: degree, ..ModelOptions::default() };
        let spec = build_model(id, &panel, &lat.graph, &opts).unwrap();
        prop_assert!(spec.registry.is_partition());
        let mut labels = spec.registry.labels().to_vec();
        labels.sort();
        labels.dedup();
        prop_assert_eq!(labels.len(), spec.registry.len());
        let n_cov = if id == 1 { 3 } else { 4 } + 3 * (degree as usize - 1);
        prop_assert_eq!(spec.n_fixed(), 1 + n_cov);
    }
}

#[test]
fn panel_csv_round_trip() {
    let lat = Lattice::new(2, 2);
    let panel = polynomial_expand(
        &standardize(&lag_covariates(&raw_panel(&lat, 14, 3), 7, false).unwrap()).unwrap(),
        2,
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("panel.csv");
    write_panel_csv(&path, &panel).unwrap();
    let back = read_panel_csv(&path).unwrap();
    assert_eq!(back.observed, panel.observed);
    assert_eq!(back.columns, panel.columns);
    assert_eq!(back.transforms, panel.transforms);
    for (a, b) in back.expected.iter().zip(&panel.expected) {
        assert!((a - b).abs() <= 1e-9 * b.abs());
    }
}

use proptest::prelude::*;
use subgroup_ate::data::{read_csv_from, write_csv, CsvSchema, DesignSpec, UnitInput};
use subgroup_ate::design_math::{phi_correction, se_ratio_actual_vs_expected};
use subgroup_ate::inference::subgroup_test;
use subgroup_ate::linear_fit::{fit, Centering, CovariateModel, ModelSpec, Sample};
use subgroup_ate::variance::{var_design_based, var_huber_white, Variant, VarianceOptions};
use subgroup_ate::Dataset;

/// A two-subgroup trial with every subgroup x arm cell of size >= 3.
fn trial(v: usize) -> impl Strategy<Value = (Vec<f64>, Vec<bool>, Vec<usize>, Vec<f64>)> {
    (12usize..40).prop_flat_map(move |n| {
        (
            prop::collection::vec(-50.0..50.0f64, n),
            prop::collection::vec(-3.0..3.0f64, n * v),
            Just(n),
        )
            .prop_map(|(y, x, n)| {
                // Deterministic layout: alternate arms within each subgroup half.
                let subgroup: Vec<usize> = (0..n).map(|i| usize::from(i >= n / 2)).collect();
                let treated: Vec<bool> = (0..n).map(|i| i % 2 == 0).collect();
                (y, treated, subgroup, x)
            })
    })
}

fn sample(y: Vec<f64>, t: Vec<bool>, g: Vec<usize>, x: Vec<f64>, v: usize) -> Sample<f64> {
    Sample::simple(y, t, g, x, v, 0.5, 2)
}

fn close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()).max(1e-8)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn location_scale_equivariance((y, t, g, x) in trial(2), a in -10.0..10.0f64, b in 0.1..10.0f64) {
        let spec = ModelSpec::new(CovariateModel::Pooled);
        let base = fit(sample(y.clone(), t.clone(), g.clone(), x.clone(), 2), spec);
        prop_assume!(base.is_ok());
        let base = base.unwrap();
        let moved = fit(sample(y.iter().map(|v| a + b * v).collect(), t, g, x, 2), spec).unwrap();
        for k in 0..2 {
            prop_assert!(close(moved.subgroup_tau(k), b * base.subgroup_tau(k), 1e-8));
            let opts = VarianceOptions::default();
            let v0 = var_design_based(&base, k, &opts).unwrap().variance;
            let v1 = var_design_based(&moved, k, &opts).unwrap().variance;
            prop_assert!(close(v1, b * b * v0, 1e-8));
            let h0 = var_huber_white(&base, k).unwrap().variance;
            let h1 = var_huber_white(&moved, k).unwrap().variance;
            prop_assert!(close(h1, b * b * h0, 1e-8));
        }
    }

    #[test]
    fn covariate_shift_invariance((y, t, g, x) in trial(2), c0 in -5.0..5.0f64, c1 in -5.0..5.0f64) {
        for model in [CovariateModel::Pooled, CovariateModel::Interacted] {
            for centering in [Centering::Centered, Centering::Raw] {
                let spec = ModelSpec::new(model).centering(centering);
                let base = fit(sample(y.clone(), t.clone(), g.clone(), x.clone(), 2), spec);
                prop_assume!(base.is_ok());
                let base = base.unwrap();
                let shifted: Vec<f64> = x.iter().enumerate().map(|(i, v)| v + if i % 2 == 0 { c0 } else { c1 }).collect();
                let moved = fit(sample(y.clone(), t.clone(), g.clone(), shifted, 2), spec).unwrap();
                for k in 0..2 {
                    prop_assert!((moved.subgroup_tau(k) - base.subgroup_tau(k)).abs() < 1e-8);
                    let opts = VarianceOptions::default();
                    let v0 = var_design_based(&base, k, &opts).unwrap().variance;
                    let v1 = var_design_based(&moved, k, &opts).unwrap().variance;
                    prop_assert!(close(v0, v1, 1e-8));
                }
            }
        }
    }

    #[test]
    fn constant_effect_shifts_estimate((y, t, g, _x) in trial(0), d in -20.0..20.0f64) {
        let spec = ModelSpec::new(CovariateModel::None);
        let base = fit(sample(y.clone(), t.clone(), g.clone(), Vec::new(), 0), spec).unwrap();
        let y1: Vec<f64> = y.iter().zip(&t).map(|(v, &tr)| if tr { v + d } else { *v }).collect();
        let moved = fit(sample(y1, t, g, Vec::new(), 0), spec).unwrap();
        for k in 0..2 {
            prop_assert!((moved.subgroup_tau(k) - base.subgroup_tau(k) - d).abs() < 1e-9);
            let opts = VarianceOptions::default();
            prop_assert!(close(
                var_design_based(&moved, k, &opts).unwrap().variance,
                var_design_based(&base, k, &opts).unwrap().variance,
                1e-9
            ));
        }
    }

    #[test]
    fn swapping_arms_negates_estimate((y, t, g, _x) in trial(0)) {
        let spec = ModelSpec::new(CovariateModel::None);
        let base = fit(sample(y.clone(), t.clone(), g.clone(), Vec::new(), 0), spec).unwrap();
        let flipped = fit(sample(y, t.iter().map(|b| !b).collect(), g, Vec::new(), 0), spec).unwrap();
        for k in 0..2 {
            prop_assert!((flipped.subgroup_tau(k) + base.subgroup_tau(k)).abs() < 1e-9);
            let opts = VarianceOptions::default();
            prop_assert!(close(
                var_design_based(&flipped, k, &opts).unwrap().variance,
                var_design_based(&base, k, &opts).unwrap().variance,
                1e-12
            ));
        }
    }

    #[test]
    fn phi_adjusted_variance_is_smaller((y, t, g, x) in trial(2)) {
        let f = fit(sample(y, t, g, x, 2), ModelSpec::new(CovariateModel::Pooled));
        prop_assume!(f.is_ok());
        let f = f.unwrap();
        for k in 0..2 {
            let plain = var_design_based(&f, k, &Variant::DbActualPhi1.options().unwrap()).unwrap();
            let adj = var_design_based(&f, k, &Variant::DbActualPhiadj.options().unwrap()).unwrap();
            let lb = var_design_based(&f, k, &Variant::DbHeteroLb.options().unwrap()).unwrap();
            prop_assert!(adj.variance <= plain.variance);
            prop_assert!(lb.variance <= plain.variance);
            prop_assert_eq!(plain.df, adj.df);
        }
    }

    #[test]
    fn interval_contains_null_iff_not_rejected(est in -5.0..5.0f64, se in 0.01..3.0f64, df in 1.0..2000.0f64, alpha in 0.01..0.3f64) {
        let (t, ci) = subgroup_test(est, se, df, 0.0, alpha).unwrap();
        let inside = ci[0] <= 0.0 && 0.0 <= ci[1];
        // Ignore points within rounding of the boundary.
        prop_assume!((t.p_value - alpha).abs() > 1e-9);
        prop_assert_eq!(inside, t.p_value >= alpha);
    }

    #[test]
    fn se_ratio_symmetric_at_half(n_k in 4u32..400, frac in 0.0..0.45f64, theta in 0.0..0.5f64) {
        let n_k = f64::from(n_k);
        let delta = (frac * n_k * 0.5).floor();
        let up = se_ratio_actual_vs_expected(n_k, 0.5, delta, 1.0, theta).unwrap();
        let down = se_ratio_actual_vs_expected(n_k, 0.5, -delta, 1.0, theta).unwrap();
        prop_assert!((up - down).abs() < 1e-12);
        prop_assert!(up >= 1.0 - 1e-12);
    }

    #[test]
    fn phi_correction_bounds(n_k in 2u32..10_000, pi in 0.001..1.0f64) {
        let n_k = f64::from(n_k);
        let phi = phi_correction(n_k, pi);
        prop_assert!(phi <= 1.0);
        prop_assert!(phi > (n_k - 1.0) / n_k);
    }

    #[test]
    fn csv_round_trip(
        rows in prop::collection::vec(
            (-1e6..1e6f64, any::<bool>(), 0usize..3, 0usize..4, prop::option::of(0.1..5.0f64), -10.0..10.0f64),
            1..30,
        )
    ) {
        let design = DesignSpec::simple(0.5);
        let mut ds: Dataset = Dataset::new(design.clone(), vec!["age".into()]);
        let groups = ["a", "b", "c"];
        let blocks = ["b1", "b2", "b3", "b4"];
        for &(y, t, g, b, w, x) in &rows {
            ds.push(
                UnitInput::new(y, t, groups[g])
                    .block(blocks[b])
                    .covariates(vec![x])
                    .response(w.is_some(), w),
            );
        }
        let mut buf = Vec::new();
        write_csv(&ds, &mut buf).unwrap();
        let schema = CsvSchema::for_dataset(&ds);
        let back: Dataset = read_csv_from(buf.as_slice(), &schema, design).unwrap();
        prop_assert_eq!(back.records.len(), ds.records.len());
        for (a, b) in ds.records.iter().zip(&back.records) {
            prop_assert_eq!(a.y.to_bits(), b.y.to_bits());
            prop_assert_eq!(a.treated, b.treated);
            prop_assert_eq!(&ds.subgroup_levels[a.subgroup], &back.subgroup_levels[b.subgroup]);
            prop_assert_eq!(ds.block_label(a), back.block_label(b));
            prop_assert_eq!(&a.x, &b.x);
            prop_assert_eq!(a.responded, b.responded);
            prop_assert_eq!(a.w_r, b.w_r);
        }
    }
}

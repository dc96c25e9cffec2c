use meanfield::dynamics::{coupling_distance, lhp_norm, simulate_interacting, SdeConfig};
use meanfield::experiments::{estimate_separation, ExperimentConfig};
use meanfield::fields::{
    deposit_weighted, l1_norm, l2_norm_sq, sobolev_error, DepositMode, GridField, GridSpec,
};
use meanfield::io::{
    decode_fields, decode_trajectory, encode_fields, encode_trajectory, TrajectoryFrames,
};
use meanfield::kernels::{BlobSpec, KernelSpec};
use meanfield::sampling::{build_lattice_sample, BoxDomain, InitialDensity};
use proptest::prelude::*;

fn grid2() -> GridSpec {
    GridSpec::new(vec![-2.0, -2.0], vec![2.0, 2.0], vec![64, 64]).unwrap()
}

fn cloud() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    prop::collection::vec((-1.2f64..1.2, -1.2f64..1.2, 0.0f64..2.0), 1..40).prop_map(|pts| {
        let pos = pts.iter().flat_map(|p| [p.0, p.1]).collect();
        let w = pts.iter().map(|p| p.2).collect();
        (pos, w)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn deposit_is_linear_in_weights((pos, w) in cloud(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let blob = BlobSpec::new(2, 0.4).unwrap();
        let g = grid2();
        let w2: Vec<f64> = w.iter().rev().copied().collect();
        let combo: Vec<f64> = w.iter().zip(&w2).map(|(x, y)| a * x + b * y).collect();
        let f1 = deposit_weighted(&pos, &w, &blob, &g, DepositMode::Normalized).unwrap();
        let f2 = deposit_weighted(&pos, &w2, &blob, &g, DepositMode::Normalized).unwrap();
        let fc = deposit_weighted(&pos, &combo, &blob, &g, DepositMode::Normalized).unwrap();
        for k in 0..g.len() {
            let expect = a * f1.values[k] + b * f2.values[k];
            prop_assert!((fc.values[k] - expect).abs() <= 1e-10 * (1.0 + expect.abs()));
        }
    }

    #[test]
    fn deposit_conserves_mass((pos, w) in cloud()) {
        let blob = BlobSpec::new(2, 0.4).unwrap();
        let f = deposit_weighted(&pos, &w, &blob, &grid2(), DepositMode::Normalized).unwrap();
        let total: f64 = w.iter().sum();
        prop_assert!((f.mass() - total).abs() <= 1e-10 * (1.0 + total));
        prop_assert!(f.min() >= 0.0);
    }

    #[test]
    fn deposit_is_permutation_invariant((pos, w) in cloud(), shift in 0usize..40) {
        let blob = BlobSpec::new(2, 0.4).unwrap();
        let n = w.len();
        let s = shift % n;
        let mut pos2 = Vec::with_capacity(pos.len());
        let mut w2 = Vec::with_capacity(n);
        for i in 0..n {
            let j = (i + s) % n;
            pos2.extend_from_slice(&pos[2 * j..2 * j + 2]);
            w2.push(w[j]);
        }
        let g = grid2();
        let f1 = deposit_weighted(&pos, &w, &blob, &g, DepositMode::Normalized).unwrap();
        let f2 = deposit_weighted(&pos2, &w2, &blob, &g, DepositMode::Normalized).unwrap();
        for k in 0..g.len() {
            prop_assert!((f1.values[k] - f2.values[k]).abs() <= 1e-12);
        }
    }

    #[test]
    fn norms_scale(c in -5.0f64..5.0, seed in 0u64..1000) {
        let g = GridSpec::new(vec![0.0], vec![1.0], vec![50]).unwrap();
        let f = GridField::from_fn(&g, 0.0, |x| ((seed as f64 + 1.0) * x[0]).sin());
        let s = f.scaled(c);
        prop_assert!((l2_norm_sq(&s) - c * c * l2_norm_sq(&f)).abs() <= 1e-10 * (1.0 + l2_norm_sq(&s)));
        prop_assert!((l1_norm(&s) - c.abs() * l1_norm(&f)).abs() <= 1e-10 * (1.0 + l1_norm(&s)));
    }

    #[test]
    fn sobolev_error_is_monotone_in_the_horizon(amps in prop::collection::vec(-1.0f64..1.0, 2..8)) {
        let g = GridSpec::new(vec![0.0], vec![1.0], vec![40]).unwrap();
        let rho: Vec<GridField> = (0..amps.len()).map(|k| GridField::zeros(&g, 1, 0.1 * k as f64)).collect();
        let rho_h: Vec<GridField> = amps
            .iter()
            .enumerate()
            .map(|(k, a)| GridField::from_fn(&g, 0.1 * k as f64, |x| a * (3.0 * x[0]).sin()))
            .collect();
        let full = sobolev_error(&rho, &rho_h).unwrap();
        let mut prev = 0.0;
        for k in 1..=rho.len() {
            let part = sobolev_error(&rho[..k], &rho_h[..k]).unwrap();
            prop_assert!(part.headline >= prev);
            prev = part.headline;
        }
        prop_assert_eq!(prev, full.headline);
        prop_assert!(full.cumulative.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn lhp_norm_axioms(
        xs in prop::collection::vec(-10.0f64..10.0, 6),
        ys in prop::collection::vec(-10.0f64..10.0, 6),
        c in -4.0f64..4.0,
        p in 1.0f64..4.0,
    ) {
        let h = 0.1;
        let nx = lhp_norm(&xs, 2, h, p).unwrap();
        let ny = lhp_norm(&ys, 2, h, p).unwrap();
        let sum: Vec<f64> = xs.iter().zip(&ys).map(|(a, b)| a + b).collect();
        let scaled: Vec<f64> = xs.iter().map(|a| c * a).collect();
        prop_assert!(lhp_norm(&sum, 2, h, p).unwrap() <= nx + ny + 1e-9);
        prop_assert!((lhp_norm(&scaled, 2, h, p).unwrap() - c.abs() * nx).abs() <= 1e-9 * (1.0 + nx));
        prop_assert!(nx >= 0.0);
    }

    #[test]
    fn field_codec_round_trip(vals in prop::collection::vec(-1e6f64..1e6, 12), t in 0.0f64..10.0) {
        let g = GridSpec::new(vec![-1.0, 0.0], vec![1.0, 3.0], vec![3, 4]).unwrap();
        let a = GridField::from_values(&g, 1, vals.clone(), t).unwrap();
        let b = GridField::from_values(&g, 1, vals.iter().map(|v| -v).collect(), t + 1.0).unwrap();
        let bytes = encode_fields(&[a.clone(), b.clone()]).unwrap();
        let back = decode_fields(&bytes).unwrap();
        prop_assert_eq!(back, vec![a, b]);
    }

    #[test]
    fn trajectory_codec_round_trip(seed in any::<u64>(), steps in 1usize..6) {
        let density = InitialDensity::uniform(BoxDomain::cube(1, 0.0, 1.0).unwrap());
        let sample = build_lattice_sample(&density, 0.25).unwrap();
        let cfg = SdeConfig::new(0.1 * steps as f64, 0.1, seed);
        let traj = simulate_interacting(&sample, &KernelSpec::tanh_gauss(1), &cfg).unwrap();
        let back = decode_trajectory(&encode_trajectory(&traj)).unwrap();
        prop_assert_eq!(back, TrajectoryFrames::from(&traj));
    }

    #[test]
    fn decoders_never_panic(bytes in prop::collection::vec(any::<u8>(), 0..200)) {
        let _ = decode_trajectory(&bytes);
        let _ = decode_fields(&bytes);
    }
}

#[test]
fn coupling_distance_is_zero_on_self_and_symmetric() {
    let density = InitialDensity::bump(BoxDomain::cube(1, -1.0, 1.0).unwrap());
    let sample = build_lattice_sample(&density, 0.1).unwrap();
    let cfg = SdeConfig::new(0.2, 0.02, 3);
    let a = simulate_interacting(&sample, &KernelSpec::tanh_gauss(1), &cfg).unwrap();
    let b = simulate_interacting(&sample, &KernelSpec::zero(1), &cfg).unwrap();
    assert_eq!(coupling_distance(&a, &a, 2.0).unwrap(), 0.0);
    let ab = coupling_distance(&a, &b, 2.0).unwrap();
    assert!(ab > 0.0);
    assert_eq!(ab, coupling_distance(&b, &a, 2.0).unwrap());
    let other =
        simulate_interacting(&sample, &KernelSpec::zero(1), &SdeConfig::new(0.2, 0.02, 4)).unwrap();
    assert!(coupling_distance(&a, &other, 2.0).is_err());
}

#[test]
fn separation_estimate_lies_in_unit_time_range() {
    let cfg: ExperimentConfig = serde_json::from_str(
        r#"{"dim": 1, "support_lo": [-1.0], "support_hi": [1.0], "kernel": "tanh-gauss",
            "horizon": 0.2, "h": [0.2, 0.1], "realizations": 8, "seed": 9, "dt": 0.02,
            "separation": {"all_j": true}}"#,
    )
    .unwrap();
    let report = estimate_separation(&cfg, None).unwrap();
    for row in &report.rows {
        assert!((0.0..=cfg.horizon).contains(&row.estimate), "{row:?}");
        assert!(row.per_other_particle >= row.estimate);
        let all = row.all_j_average.unwrap();
        assert!((0.0..=cfg.horizon).contains(&all));
    }
}

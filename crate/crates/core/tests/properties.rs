//! Randomized invariants across modules.

use kanode::experiments::{log_log_slope, ExperimentConfig, ExperimentId};
use kanode::io::{
    config_to_json, loss_csv, parse_config, parse_loss_csv, parse_trajectory_csv,
    trajectory_csv, Checkpoint,
};
use kanode::kan::{NetSpec, Network, Normalization};
use kanode::odeint::{SolveStats, Trajectory};
use kanode::symbolic::{fit_activation, linspace, BasisGrammar, BasisKind};
use kanode::training::LossReport;
use proptest::prelude::*;

fn finite() -> impl Strategy<Value = f64> {
    prop_oneof![
        -1e6..1e6f64,
        (-300i32..300).prop_map(|e| 10f64.powi(e)),
        Just(0.0),
        Just(-0.0),
        Just(f64::MIN_POSITIVE),
    ]
}

fn report() -> impl Strategy<Value = LossReport> {
    (
        0usize..1_000_000,
        finite(),
        proptest::option::of(finite()),
        finite(),
        finite(),
        finite(),
        any::<u64>(),
    )
        .prop_map(|(epoch, train_mse, test_mse, l1, total, lr, wall_ms)| LossReport {
            epoch,
            train_mse,
            test_mse,
            l1,
            total,
            lr,
            wall_ms,
        })
}

fn kan_spec() -> impl Strategy<Value = NetSpec> {
    (1usize..4, 1usize..4, 1usize..4, 1usize..6, any::<bool>()).prop_map(|(a, b, c, g, norm)| {
        NetSpec::Kan {
            layers: vec![[a, b, g], [b, c, g]],
            normalization: if norm {
                Normalization::Tanh
            } else {
                Normalization::None
            },
        }
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn config_parser_never_panics_on_bytes(bytes in proptest::collection::vec(any::<u8>(), 0..256)) {
        let _ = parse_config(&String::from_utf8_lossy(&bytes));
    }

    #[test]
    fn config_parser_never_panics_on_json_objects(
        entries in proptest::collection::vec(
            (
                prop_oneof![
                    Just("id".to_string()), Just("lr".to_string()), Just("epochs".to_string()),
                    Just("architecture".to_string()), Just("seed".to_string()),
                    Just("landscape".to_string()), Just("symbolic".to_string()),
                    Just("scaling".to_string()), "[a-z_]{1,8}",
                ],
                prop_oneof![
                    Just(serde_json::json!(null)), Just(serde_json::json!(-1)),
                    Just(serde_json::json!(1e308)), Just(serde_json::json!("lv")),
                    Just(serde_json::json!([])), Just(serde_json::json!({"kind": "kan"})),
                    Just(serde_json::json!({"kind": "mlp", "dims": [2, 0, 2]})),
                    any::<f64>().prop_map(|v| serde_json::json!(v)),
                ],
            ),
            0..8,
        )
    ) {
        let obj: serde_json::Map<String, serde_json::Value> = entries.into_iter().collect();
        let _ = parse_config(&serde_json::Value::Object(obj).to_string());
    }

    #[test]
    fn config_round_trips_with_any_seed(seed in any::<u64>(), index in 0usize..8) {
        let cfg = ExperimentConfig::defaults(ExperimentId::ALL[index]).with_seed(seed);
        let back = parse_config(&config_to_json(&cfg).to_string()).unwrap();
        prop_assert_eq!(back, cfg);
    }

    #[test]
    fn loss_csv_round_trips(history in proptest::collection::vec(report(), 0..20)) {
        let back = parse_loss_csv(&loss_csv(&history)).unwrap();
        prop_assert_eq!(back, history);
    }

    #[test]
    fn trajectory_csv_round_trips(
        dim in 1usize..5,
        rows in proptest::collection::vec(proptest::collection::vec(finite(), 5), 0..10),
    ) {
        let traj = Trajectory {
            times: (0..rows.len()).map(|i| i as f64 * 0.1).collect(),
            states: rows.iter().flat_map(|r| r[..dim].to_vec()).collect(),
            dim,
            stats: SolveStats::default(),
        };
        let back = parse_trajectory_csv(&trajectory_csv(&traj)).unwrap();
        prop_assert_eq!(back.times, traj.times);
        prop_assert_eq!(back.states, traj.states);
        prop_assert_eq!(back.dim, dim);
    }

    #[test]
    fn checkpoints_round_trip_in_both_formats(spec in kan_spec(), seed in any::<u64>()) {
        let net = Network::init(&spec, seed).unwrap();
        let ckpt = Checkpoint::new(&net, None);
        let from_json = Checkpoint::decode(ckpt.to_json().unwrap().as_bytes()).unwrap();
        let from_bin = Checkpoint::decode(&ckpt.to_binary()).unwrap();
        prop_assert_eq!(from_json.network().unwrap(), net.clone());
        prop_assert_eq!(from_bin.network().unwrap(), net);
    }

    #[test]
    fn checkpoint_decoder_never_panics(bytes in proptest::collection::vec(any::<u8>(), 0..128)) {
        let _ = Checkpoint::decode(&bytes);
        let mut framed = b"KANODEB\0".to_vec();
        framed.extend_from_slice(&bytes);
        let _ = Checkpoint::decode(&framed);
    }

    #[test]
    fn single_kan_layer_is_linear_in_parameters(
        seed in any::<u64>(),
        a in -2.0..2.0f64,
        b in -2.0..2.0f64,
        x in proptest::collection::vec(-3.0..3.0f64, 3),
    ) {
        let spec = NetSpec::kan(&[[3, 2, 4]]);
        let n1 = Network::init(&spec, seed).unwrap();
        let n2 = Network::init(&spec, seed.wrapping_add(1)).unwrap();
        let (p1, p2) = (n1.params(), n2.params());
        let mix: Vec<f64> = p1.iter().zip(&p2).map(|(u, v)| a * u + b * v).collect();
        let y = n1.eval_with(&mix, &x).unwrap();
        let (y1, y2) = (n1.eval(&x).unwrap(), n2.eval(&x).unwrap());
        for k in 0..2 {
            let expect = a * y1[k] + b * y2[k];
            prop_assert!((y[k] - expect).abs() <= 1e-12 * (1.0 + expect.abs()));
        }
    }

    #[test]
    fn polynomial_fits_recover_coefficients(c1 in -5.0..5.0f64, c3 in -5.0..5.0f64) {
        prop_assume!(c1.abs() > 0.1 && c3.abs() > 0.1);
        let xs = linspace(-1.0, 1.0, 50);
        let ys: Vec<f64> = xs.iter().map(|x| c1 * x + c3 * x * x * x).collect();
        let front = fit_activation(&xs, &ys, &BasisGrammar::polynomial(), 2).unwrap();
        let exact = front
            .iter()
            .find(|f| f.kinds() == vec![BasisKind::X, BasisKind::X3])
            .expect("two-term polynomial on the front");
        prop_assert!((exact.coef(BasisKind::X).unwrap() - c1).abs() < 1e-9);
        prop_assert!((exact.coef(BasisKind::X3).unwrap() - c3).abs() < 1e-9);
    }

    #[test]
    fn log_log_slope_recovers_power_laws(p in -5.0..5.0f64, c in 0.01..100.0f64) {
        let pts: Vec<(f64, f64)> = [10.0, 30.0, 100.0, 300.0].iter().map(|&n: &f64| (n, c * n.powf(p))).collect();
        prop_assert!((log_log_slope(&pts).unwrap() - p).abs() < 1e-9);
    }
}

mod support;

use pinn_core::numerics::{layer_norm, softmax_rows, RealMat, SeededRng, Tape};
use proptest::prelude::*;
use support::{gradcheck, primitives};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn every_primitive_matches_finite_differences(seed in any::<u64>()) {
        for case in primitives::cases(seed) {
            let err = gradcheck::max_rel_error(&case.params, &*case.build, 64);
            prop_assert!(err <= 1e-4, "{}: rel err {err:e}", case.name);
        }
    }

    #[test]
    fn softmax_shift_invariance(seed in any::<u64>(), shift in -50.0f64..50.0) {
        let mut rng = SeededRng::new(seed);
        let x = primitives::rand_mat(&mut rng, 4, 7, 5.0);
        let shifted = x.map(|v| v + shift);
        let (a, b) = (softmax_rows(&x), softmax_rows(&shifted));
        prop_assert!(a.max_abs_diff(&b) <= 1e-12);
        for r in 0..a.rows() {
            let s: f64 = a.row(r).iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-12);
            prop_assert!(a.row(r).iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn layer_norm_moments(values in prop::collection::vec(-10.0f64..10.0, 2..64)) {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        prop_assume!(var >= 1e-2);
        let out = layer_norm(&values, 1e-5);
        let m = out.iter().sum::<f64>() / n;
        let sd = (out.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt();
        prop_assert!(m.abs() <= 1e-10);
        prop_assert!((sd - 1.0).abs() <= 1e-3);
    }
}

#[test]
fn forward_is_deterministic() {
    let run = || {
        let mut tape = Tape::new();
        let mut rng = SeededRng::new(3);
        let w = tape.param(primitives::rand_mat(&mut rng, 6, 16, 0.5));
        let b = tape.param(primitives::rand_mat(&mut rng, 1, 16, 0.5));
        let x = tape.constant(primitives::rand_mat(&mut rng, 5, 2, 1.0));
        let h = tape.constant(RealMat::zeros(5, 4));
        let out = tape.lstm_cell(x, h, h, w, b);
        tape.value(out).clone()
    };
    let (a, b) = (run(), run());
    assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn random_instances_replay_bit_exact() {
    for seed in 0..10 {
        for case in primitives::cases(seed) {
            let mut tape = Tape::new();
            let vars: Vec<_> = case.params.iter().map(|p| tape.param(p.clone())).collect();
            let _ = (case.build)(&mut tape, &vars);
            assert_eq!(tape.replay(), Ok(()), "{}", case.name);
        }
    }
}

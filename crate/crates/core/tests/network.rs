//! Network numerics against independent oracles: a nested-loop forward pass,
//! central finite differences and a closed-form parameter count.

mod common;

use common::{gradient_check, oracle_forward, random_frame, random_params};
use psog_core::array::N_SENSORS;
use psog_core::nn::{self, backward, forward, forward_batch, init_params, AdamConfig, AdamState, NetworkParams};
use psog_core::seed;
use psog_core::synth_eye::GazeSample;
use rand::Rng;

#[test]
fn parameter_count_is_2710() {
    let conv1 = 4 * 1 * 9 + 4;
    let conv2 = 4 * 4 * 9 + 4;
    let fc1 = 60 * 20 + 20;
    let fc = 20 * 20 + 20;
    let head = 20 * 2 + 2;
    assert_eq!((conv1, conv2, fc1, head), (40, 148, 1220, 42));
    assert_eq!(conv1 + conv2 + fc1 + 3 * fc + head, 2710);
    assert_eq!(nn::N_PARAMS, 2710);
    assert_eq!(init_params(0).len(), 2710);
    assert!(nn::N_PARAMS <= nn::MAX_PARAMS);
}

#[test]
fn forward_matches_nested_loop_oracle() {
    let mut rng = seed::rng(11);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let p = random_params(&mut rng);
        let x = random_frame(&mut rng);
        let got = forward(&p, &x).unwrap();
        let (ox, oy) = oracle_forward(p.as_slice(), &x);
        worst = worst.max((got.x_deg - ox).abs()).max((got.y_deg - oy).abs());
    }
    assert!(worst <= 1e-10, "max abs difference {worst:e}");
}

#[test]
fn zero_network_outputs_origin_and_batch_equals_singles() {
    let z = NetworkParams::zeros();
    let g = forward(&z, &[0.3; N_SENSORS]).unwrap();
    assert_eq!((g.x_deg, g.y_deg), (0.0, 0.0));

    let mut rng = seed::rng(5);
    let p = random_params(&mut rng);
    let frames: Vec<[f64; N_SENSORS]> = (0..16).map(|_| random_frame(&mut rng)).collect();
    let batch = forward_batch(&p, &frames).unwrap();
    for (f, b) in frames.iter().zip(&batch) {
        assert_eq!(forward(&p, f).unwrap(), *b);
    }
}

#[test]
fn non_finite_input_rejected() {
    let mut x = [0.0; N_SENSORS];
    x[3] = f64::NAN;
    assert!(forward(&init_params(1), &x).is_err());
}

#[test]
fn gradients_match_central_differences() {
    let check = gradient_check(2024, 20, 1e-5);
    assert_eq!(check.entries, 20 * 2710);
    assert_eq!(check.failures, 0, "{check:?}");
}

#[test]
fn zero_residual_and_duplicated_batch() {
    let mut rng = seed::rng(9);
    let p = random_params(&mut rng);
    let xs: Vec<[f64; N_SENSORS]> = (0..4).map(|_| random_frame(&mut rng)).collect();
    let exact = forward_batch(&p, &xs).unwrap();
    let (l, g) = backward(&p, &xs, &exact).unwrap();
    assert_eq!(l, 0.0);
    assert!(g.as_slice().iter().all(|v| *v == 0.0));

    let ys: Vec<GazeSample> = (0..4).map(|i| GazeSample::new(i as f64, -(i as f64))).collect();
    let (_, g1) = backward(&p, &xs, &ys).unwrap();
    let xs2: Vec<_> = xs.iter().chain(&xs).copied().collect();
    let ys2: Vec<_> = ys.iter().chain(&ys).copied().collect();
    let (_, g2) = backward(&p, &xs2, &ys2).unwrap();
    for (a, b) in g1.as_slice().iter().zip(g2.as_slice()) {
        assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
    }
}

#[test]
fn fifty_noiseless_records_are_memorised() {
    let mut rng = seed::rng(77);
    let xs: Vec<[f64; N_SENSORS]> = (0..50).map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0))).collect();
    // Smooth target map in the operating range.
    let ys: Vec<GazeSample> = xs
        .iter()
        .map(|x| GazeSample::new(8.0 * (x[0] - x[4]) + 3.0 * x[7] * x[2], 6.0 * (x[10] - x[1]) + 2.0 * x[12]))
        .collect();
    let mut p = init_params(3);
    let mut adam = AdamState::new(AdamConfig::default());
    let mut last = f64::INFINITY;
    for _ in 0..2000 {
        let (l, g) = backward(&p, &xs, &ys).unwrap();
        last = l;
        if l < 1e-3 {
            break;
        }
        adam.step(&mut p, &g);
    }
    assert!(last < 1e-3, "train loss {last}");
}

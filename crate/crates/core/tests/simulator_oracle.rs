//! Simulator against the fine-step reference and the closed-form membrane
//! solution.

mod common;

use common::oracle::fine_step_counts;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use snnbench::snn_sim::{regular_train, run, InputSchedule, LifParams, SnnNetwork, Simulator};

const RATE_TOL: f64 = 0.05;

fn compare(net: &SnnNetwork, inputs: &[Vec<f64>], duration: f64) -> Vec<(u32, u32)> {
    let rec = run(net, inputs, duration, &[]).unwrap();
    let fine = fine_step_counts(net.projections(), net.lif(1), inputs, duration, 0.01);
    rec.counts[1..].iter().flatten().copied().zip(fine.into_iter().flatten()).collect()
}

fn assert_close(pairs: &[(u32, u32)]) {
    for &(c, f) in pairs {
        assert!(f > 0, "reference neuron silent");
        let rel = (c as f64 - f as f64).abs() / f as f64;
        assert!(rel <= RATE_TOL, "coarse {c} vs fine {f} ({rel:.3})");
    }
}

#[test]
fn sustained_drive_matches_fine_step() {
    let lif = LifParams::default();
    for (rate, w) in [(200.0, 0.01), (100.0, 0.03), (60.0, 0.05), (400.0, 0.004)] {
        let net = SnnNetwork::new(vec![Array2::from_elem((1, 1), w)], vec![lif], 1.0).unwrap();
        assert_close(&compare(&net, &[regular_train(rate, 2000.0)], 2000.0));
    }
}

#[test]
fn random_twenty_neuron_layer_matches_fine_step() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let w = Array2::from_shape_fn((30, 20), |_| rng.random_range(0.0..0.0016));
    let net = SnnNetwork::new(vec![w], vec![LifParams::default()], 1.0).unwrap();
    let inputs: Vec<Vec<f64>> = (0..30).map(|_| regular_train(rng.random_range(20.0..80.0), 1000.0)).collect();
    assert_close(&compare(&net, &inputs, 1000.0));
}

#[test]
fn two_layer_toy_net_at_50hz() {
    let w1 = Array2::from_shape_fn((10, 4), |(i, j)| 0.002 + 0.0004 * ((i + 2 * j) % 5) as f64);
    let w2 = Array2::from_shape_fn((4, 2), |(i, j)| 0.006 + 0.002 * ((i + j) % 3) as f64);
    let net = SnnNetwork::new(vec![w1, w2], vec![LifParams::default(); 2], 1.0).unwrap();
    let inputs: Vec<Vec<f64>> = (0..10).map(|_| regular_train(50.0, 2000.0)).collect();
    let pairs = compare(&net, &inputs, 2000.0);
    assert_close(&pairs[4..]);
}

#[test]
fn membrane_relaxes_like_the_closed_form() {
    let lif = LifParams::default();
    let net = SnnNetwork::new(vec![Array2::zeros((1, 1))], vec![lif], 1.0).unwrap();
    let mut sim = Simulator::new(&net, None, 0.0, 0).unwrap();
    sim.state_mut(1).v[0] = lif.v_rest + 10.0;
    let steps = lif.tau_m as usize;
    sim.run(&InputSchedule::default(), steps, steps, &[]).unwrap();
    let displaced = sim.state(1).v[0] - lif.v_rest;
    let expected = 10.0 * (-1.0f64).exp();
    assert!((displaced - expected).abs() <= 0.02 * expected, "{displaced} vs {expected}");
}

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vid_core::nn::{build_cnn, build_mlp, Checkpoint, Dtype, LayerSpec, Mode, Network};
use vid_core::{Error, Tape, Tensor};

fn random_batch(seed: u64, shape: &[usize]) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn count_stages(net: &Network) -> usize {
    net.specs()
        .iter()
        .filter(|s| matches!(s, LayerSpec::Linear { .. } | LayerSpec::BottleneckLinear { .. }))
        .count()
}

#[test]
fn mlp_has_five_stages_and_five_taps() {
    let net = build_mlp(&[64], 16, 10).unwrap();
    assert_eq!(count_stages(&net), 5);
    let taps: Vec<_> = net.tap_names().collect();
    assert_eq!(taps, ["hidden1", "hidden2", "hidden3", "hidden4", "penultimate"]);
    assert_eq!(net.output_shape(), &[10]);
}

#[test]
fn mlp_parameter_count_matches_closed_form() {
    for &(d, h, c) in &[(64usize, 16usize, 10usize), (256, 32, 10), (7, 4, 3), (100, 64, 5)] {
        let net = build_mlp(&[d], h, c).unwrap();
        let expected = d * h + h + 3 * (2 * h * h / 4 + h / 4 + h) + h * c + c;
        assert_eq!(net.weight_bias_count(), expected, "d={d} h={h} c={c}");
    }
}

#[test]
fn mlp_width_four_has_unit_bottleneck() {
    let net = build_mlp(&[8], 4, 2).unwrap();
    let (_, down) = net.params().into_iter().find(|(n, _)| n.ends_with("down.weight")).unwrap();
    assert_eq!(down.shape(), &[4, 1]);
}

#[test]
fn mlp_width_must_be_divisible_by_four() {
    assert!(matches!(build_mlp(&[8], 6, 2), Err(Error::InvalidArgument(_))));
}

#[test]
fn cnn_tap_shapes() {
    let net = build_cnn(&[8, 16], 10, &[1, 16, 16]).unwrap();
    assert_eq!(net.tap_shape("group1").unwrap(), &[8, 16, 16]);
    assert_eq!(net.tap_shape("group2").unwrap(), &[16, 8, 8]);
    assert_eq!(net.tap_shape("penultimate").unwrap(), &[16]);

    let net = build_cnn(&[4], 3, &[1, 8, 8]).unwrap();
    assert_eq!(net.tap_shape("logits").unwrap(), &[3]);
}

#[test]
fn cnn_pooling_underflow_is_rejected() {
    assert!(build_cnn(&[2, 2, 2], 2, &[1, 2, 2]).is_err());
}

#[test]
fn cnn_rejects_wrong_input_channels() {
    let mut net = build_cnn(&[4, 4], 3, &[1, 8, 8]).unwrap();
    net.init_params(0);
    let x = random_batch(1, &[2, 3, 8, 8]);
    let err = net.eval(&x).unwrap_err();
    assert!(matches!(err, Error::Shape { .. }), "{err}");
}

#[test]
fn zero_weights_give_zero_logits() {
    let net = build_mlp(&[12], 8, 4).unwrap();
    let (logits, _) = net.eval(&random_batch(2, &[3, 12])).unwrap();
    assert!(logits.data().iter().all(|v| *v == 0.0));
}

#[test]
fn eval_forward_is_idempotent() {
    let mut net = build_cnn(&[4, 8], 3, &[1, 8, 8]).unwrap();
    net.init_params(7);
    let x = random_batch(3, &[2, 1, 8, 8]);
    let (a, ta) = net.eval(&x).unwrap();
    let (b, tb) = net.eval(&x).unwrap();
    assert_eq!(a, b);
    assert_eq!(ta, tb);
    assert_eq!(ta.len(), 4);
}

#[test]
fn train_dropout_replays_with_fixed_seed() {
    let mut net = build_mlp(&[10], 8, 3).unwrap();
    net.init_params(1);
    let x = random_batch(4, &[5, 10]);
    let run = |net: &mut Network| {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut tape = Tape::new();
        let xv = tape.constant(&x).unwrap();
        let f = net.forward_with_taps(&mut tape, xv, Mode::Train, &mut rng).unwrap();
        tape.tensor(f.output)
    };
    let (mut n1, mut n2) = (net.clone(), net.clone());
    assert_eq!(run(&mut n1), run(&mut n2));
}

#[test]
fn init_is_deterministic_per_seed() {
    let mut a = build_mlp(&[20], 8, 3).unwrap();
    let mut b = a.clone();
    a.init_params(5);
    b.init_params(5);
    assert_eq!(a.state(), b.state());
    for (name, t) in a.params() {
        if name.ends_with("bias") {
            assert!(t.data().iter().all(|v| *v == 0.0), "{name}");
        }
    }
    let mut seen = Vec::new();
    for seed in 0..20 {
        let mut c = build_mlp(&[20], 8, 3).unwrap();
        c.init_params(seed);
        let w = c.params()[0].1.data().to_vec();
        assert!(!seen.contains(&w), "seed {seed} collided");
        seen.push(w);
    }
}

#[test]
fn every_tap_depends_on_upstream_weights() {
    let mut net = build_cnn(&[4, 4], 3, &[1, 8, 8]).unwrap();
    net.init_params(9);
    let x = random_batch(5, &[2, 1, 8, 8]);
    let (_, base) = net.eval(&x).unwrap();
    // nudge the first conv kernel
    let mut nudged = net.clone();
    nudged.params_mut()[0].data_mut()[0] += 1e-3;
    let (_, after) = nudged.eval(&x).unwrap();
    for (name, t) in &base {
        assert_ne!(t, &after[name], "tap {name} did not move");
    }
}

#[test]
fn frozen_network_receives_no_gradients() {
    let mut net = build_mlp(&[6], 4, 2).unwrap();
    net.init_params(3);
    net.set_frozen(true);
    let mut tape = Tape::new();
    let x = tape.constant(&random_batch(6, &[3, 6])).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let f = net.forward(&mut tape, x, Mode::Train, &mut rng).unwrap();
    let loss = tape.sum(f.output).unwrap();
    assert!(!tape.requires_grad(loss));
}

#[test]
fn network_state_survives_checkpoint() {
    let mut net = build_cnn(&[4, 8], 3, &[1, 8, 8]).unwrap();
    net.init_params(11);
    let mut ckpt = Checkpoint::new();
    ckpt.extend_prefixed("teacher.", net.state());
    let bytes = ckpt.to_bytes(Dtype::F64);
    let loaded = Checkpoint::from_bytes(&bytes).unwrap();
    let mut fresh = build_cnn(&[4, 8], 3, &[1, 8, 8]).unwrap();
    fresh.load_state(loaded.entries(), "teacher.").unwrap();
    assert_eq!(fresh.state(), net.state());

    let empty: BTreeMap<String, Tensor> = BTreeMap::new();
    assert!(fresh.load_state(&empty, "").is_err());
}

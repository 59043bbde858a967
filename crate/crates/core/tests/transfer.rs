use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use vid_core::nn::{build_cnn, LayerSpec, Mode, Network, TapActivations};
use vid_core::transfer::{
    build_regressor, gaussian_nll, kd_loss, vid_loss, KdTerm, Layout, MsePair, RegressorKind, TransferObjective,
    TransferPair, VariationalGaussian, DEFAULT_EPSILON,
};
use vid_core::{Error, Tape, Tensor, Var};

fn normal(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()).unwrap()
}

fn detached_taps(tape: &mut Tape, taps: &[(&str, &Tensor)]) -> TapActivations {
    let mut out = TapActivations::new();
    for (name, t) in taps {
        let v = tape.constant(t).unwrap();
        out.insert(*name, v);
    }
    out
}

fn student_grads(net: &Network) -> Vec<f64> {
    net.params().iter().flat_map(|(_, p)| p.grad().unwrap().to_vec()).collect()
}

/// Student: conv -> relu -> tap "feat". Teacher target: [B, 3, 4, 4].
fn tiny_student() -> Network {
    Network::new(
        &[2, 4, 4],
        vec![
            LayerSpec::Conv { out_channels: 3, kernel: 3, stride: 1, padding: 1 },
            LayerSpec::Relu,
            LayerSpec::Tap { name: "feat".into() },
        ],
    )
    .unwrap()
}

fn one_by_one_mean(channels: usize) -> Network {
    Network::new(&[3, 4, 4], vec![LayerSpec::Conv { out_channels: channels, kernel: 1, stride: 1, padding: 0 }])
        .unwrap()
}

#[test]
fn unit_variance_reduces_to_feature_matching() {
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = normal(&mut rng, &[3, 2, 4, 4]);
        let t = normal(&mut rng, &[3, 5, 4, 4]);
        let mut student = tiny_student();
        student.init_params(seed);
        let mut mean = one_by_one_mean(5);
        mean.init_params(seed + 100);
        let lambda2 = 7.5;

        // Variational path with sigma^2 frozen at 1.
        let mut q = VariationalGaussian::new(mean.clone(), Layout::Conv, DEFAULT_EPSILON).unwrap();
        q.set_variance(1.0).unwrap();
        q.learn_variance = false;
        let mut vid = TransferObjective {
            lambda1: 1.0,
            lambda2,
            pairs: vec![TransferPair::new("t", "feat", q)],
            kd: None,
            mse_pairs: vec![],
        };
        let mut s_vid = student.clone();
        let mut tape = Tape::new();
        let xv = tape.constant(&x).unwrap();
        let fwd = s_vid.forward_with_taps(&mut tape, xv, Mode::Train, &mut rng).unwrap();
        let teacher = detached_taps(&mut tape, &[("t", &t)]);
        let zero = tape.constant(&Tensor::scalar(0.0)).unwrap();
        let loss = vid_loss(&mut tape, zero, fwd.output, &mut vid, &teacher, &fwd.taps, Mode::Train, &mut rng).unwrap();
        let vid_transfer = loss.report.total;
        let grads = tape.backward(loss.total).unwrap();
        s_vid.collect_grads(&fwd, &grads).unwrap();

        // Unit-variance matching path with the same adaptor.
        let mut mse = TransferObjective {
            lambda1: 1.0,
            lambda2,
            pairs: vec![],
            kd: None,
            mse_pairs: vec![MsePair { teacher_tap: "t".into(), student_tap: "feat".into(), adaptor: Some(mean) }],
        };
        let mut s_mse = student.clone();
        let mut tape = Tape::new();
        let xv = tape.constant(&x).unwrap();
        let fwd = s_mse.forward_with_taps(&mut tape, xv, Mode::Train, &mut rng).unwrap();
        let teacher = detached_taps(&mut tape, &[("t", &t)]);
        let zero = tape.constant(&Tensor::scalar(0.0)).unwrap();
        let loss = vid_loss(&mut tape, zero, fwd.output, &mut mse, &teacher, &fwd.taps, Mode::Train, &mut rng).unwrap();
        let mse_transfer = loss.report.total;
        let grads = tape.backward(loss.total).unwrap();
        s_mse.collect_grads(&fwd, &grads).unwrap();

        assert!((vid_transfer - mse_transfer).abs() < 1e-10, "seed {seed}: {vid_transfer} vs {mse_transfer}");
        let (a, b) = (student_grads(&s_vid), student_grads(&s_mse));
        assert_eq!(a.len(), b.len());
        for (i, (ga, gb)) in a.iter().zip(&b).enumerate() {
            assert!((ga - gb).abs() < 1e-10, "seed {seed} coord {i}: {ga} vs {gb}");
        }
    }
}

#[test]
fn variance_converges_to_mean_squared_residual() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (b, c, h, w) = (4usize, 3usize, 3usize, 3usize);
    let shape = [b, c, h, w];
    let mut t = normal(&mut rng, &shape);
    // Give each channel a different residual scale.
    for (i, v) in t.data_mut().iter_mut().enumerate() {
        *v *= 1.0 + ((i / (h * w)) % c) as f64;
    }
    let mu = normal(&mut rng, &shape);
    let mut expected = vec![0.0; c];
    for (i, (tv, mv)) in t.data().iter().zip(mu.data()).enumerate() {
        expected[(i / (h * w)) % c] += (tv - mv).powi(2);
    }
    for e in &mut expected {
        *e /= (b * h * w) as f64;
    }

    let mut alpha = vec![vid_core::tensor::softplus_inverse(5.0 - DEFAULT_EPSILON); c];
    for _ in 0..20000 {
        let mut tape = Tape::new();
        let tv = tape.constant(&t).unwrap();
        let mv = tape.constant(&mu).unwrap();
        let av = tape.param(&Tensor::from_vec(alpha.clone())).unwrap();
        let nll = gaussian_nll(&mut tape, tv, mv, av, DEFAULT_EPSILON, Layout::Conv, false).unwrap();
        let g = tape.backward(nll).unwrap();
        for (a, ga) in alpha.iter_mut().zip(g.get(av).unwrap()) {
            *a -= 0.05 * ga;
        }
    }
    for (k, (a, e)) in alpha.iter().zip(&expected).enumerate() {
        let var = vid_core::tensor::softplus(*a);
        assert!((var - (e - DEFAULT_EPSILON)).abs() / e < 1e-3, "channel {k}: {var} vs {e}");
    }
}

#[test]
fn bound_never_worsens_under_small_steps() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let s = normal(&mut rng, &[6, 4, 4, 4]);
    let t = normal(&mut rng, &[6, 8, 4, 4]);
    let mut q = build_regressor(RegressorKind::Conv2Narrow, &[4, 4, 4], &[8, 4, 4], 5).unwrap();
    let mut prev = f64::INFINITY;
    for step in 0..200 {
        let mut tape = Tape::new();
        let sv = tape.constant(&s).unwrap();
        let tv = tape.constant(&t).unwrap();
        let pass = q.nll(&mut tape, tv, sv, Mode::Train, &mut rng, false).unwrap();
        let value = tape.item(pass.nll).unwrap();
        assert!(value <= prev + 1e-8, "step {step}: {prev} -> {value}");
        prev = value;
        let g = tape.backward(pass.nll).unwrap();
        q.collect_grads(&pass, &g).unwrap();
        for p in q.params_mut() {
            let grad = p.grad().unwrap().to_vec();
            for (w, gw) in p.data_mut().iter_mut().zip(grad) {
                *w -= 1e-3 * gw;
            }
        }
    }
}

#[test]
fn teacher_parameters_receive_no_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = normal(&mut rng, &[4, 1, 8, 8]);
    let mut teacher = build_cnn(&[4, 6], 3, &[1, 8, 8]).unwrap();
    teacher.init_params(1);
    let mut student = build_cnn(&[2, 3], 3, &[1, 8, 8]).unwrap();
    student.init_params(2);
    let q = build_regressor(RegressorKind::Conv3Wide, &[3, 4, 4], &[6, 4, 4], 3).unwrap();
    let mut obj = TransferObjective {
        lambda1: 1.0,
        lambda2: 10.0,
        pairs: vec![TransferPair::new("group2", "group2", q)],
        kd: Some(KdTerm { temperature: 4.0, weight: 1.6 }),
        mse_pairs: vec![],
    };

    let mut tape = Tape::new();
    let xv = tape.constant(&x).unwrap();
    let tf = teacher.forward_with_taps(&mut tape, xv, Mode::Train, &mut rng).unwrap();
    let sf = student.forward_with_taps(&mut tape, xv, Mode::Train, &mut rng).unwrap();
    let task = kd_loss(&mut tape, tf.output, sf.output, 1.0).unwrap();

    // Attached teacher activations are rejected.
    let err = vid_loss(&mut tape, task, sf.output, &mut obj, &tf.taps, &sf.taps, Mode::Train, &mut rng).unwrap_err();
    assert!(matches!(err, Error::InvalidArgument(_)), "{err}");

    let mut detached = TapActivations::new();
    for (name, v) in tf.taps.iter() {
        let t = tape.tensor(v);
        detached.insert(name, tape.constant(&t).unwrap());
    }
    let zero = tape.constant(&Tensor::scalar(0.0)).unwrap();
    let task = tape.add(zero, zero).unwrap();
    let loss = vid_loss(&mut tape, task, sf.output, &mut obj, &detached, &sf.taps, Mode::Train, &mut rng).unwrap();
    let grads = tape.backward(loss.total).unwrap();
    teacher.collect_grads(&tf, &grads).unwrap();
    for (name, p) in teacher.params() {
        assert!(p.grad().unwrap().iter().all(|g| *g == 0.0), "teacher {name} received gradient");
    }
    student.collect_grads(&sf, &grads).unwrap();
    let moved = student.params().iter().any(|(_, p)| p.grad().unwrap().iter().any(|g| *g != 0.0));
    assert!(moved, "student received no gradient");
    obj.collect_grads(&loss, &grads).unwrap();
    assert!(obj.pairs[0].q.alpha.grad().unwrap().iter().any(|g| *g != 0.0));
}

fn report_for(x: &Tensor, t: &Tensor, logits_t: &Tensor, obj: &mut TransferObjective, student: &Network) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut tape = Tape::new();
    let xv = tape.constant(x).unwrap();
    let sf = student.forward(&mut tape, xv, Mode::Train, &mut rng).unwrap();
    let teacher = detached_taps(&mut tape, &[("g", t), ("logits", logits_t)]);
    let labels: Vec<usize> = (0..x.shape()[0]).map(|i| (x.data()[i * x.numel() / x.shape()[0]] > 0.0) as usize).collect();
    let task = vid_core::transfer::cross_entropy(&mut tape, sf.output, &labels).unwrap();
    let loss = vid_loss(&mut tape, task, sf.output, obj, &teacher, &sf.taps, Mode::Train, &mut rng).unwrap();
    let r = loss.report;
    let mut v = vec![r.total, r.task, r.kd_term.unwrap()];
    v.extend(r.per_pair_nll);
    v
}

fn duplicate_rows(t: &Tensor) -> Tensor {
    let b = t.shape()[0];
    let rows: Vec<usize> = (0..b).flat_map(|i| [i, i]).collect();
    t.select_rows(&rows).unwrap()
}

#[test]
fn duplicating_the_batch_leaves_losses_unchanged() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = normal(&mut rng, &[5, 1, 8, 8]);
    let t = normal(&mut rng, &[5, 4, 4, 4]);
    let logits = normal(&mut rng, &[5, 3]);
    let mut student = build_cnn(&[2, 3], 3, &[1, 8, 8]).unwrap();
    student.init_params(4);
    let q = build_regressor(RegressorKind::Conv3Wide, &[3, 4, 4], &[4, 4, 4], 5).unwrap();
    let make = |q: VariationalGaussian| TransferObjective {
        lambda1: 0.7,
        lambda2: 10.0,
        pairs: vec![TransferPair::new("g", "group2", q)],
        kd: Some(KdTerm { temperature: 4.0, weight: 1.0 }),
        mse_pairs: vec![],
    };
    let a = report_for(&x, &t, &logits, &mut make(q.clone()), &student);
    let b = report_for(&duplicate_rows(&x), &duplicate_rows(&t), &duplicate_rows(&logits), &mut make(q), &student);
    for (u, v) in a.iter().zip(&b) {
        assert!((u - v).abs() <= 1e-12 * u.abs().max(1.0), "{u} vs {v}");
    }
}

#[test]
fn report_total_matches_its_parts() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let x = normal(&mut rng, &[4, 1, 8, 8]);
    let t = normal(&mut rng, &[4, 4, 4, 4]);
    let logits = normal(&mut rng, &[4, 3]);
    let mut student = build_cnn(&[2, 3], 3, &[1, 8, 8]).unwrap();
    student.init_params(6);
    let mut obj = TransferObjective {
        lambda1: 0.1,
        lambda2: 100.0,
        pairs: vec![
            TransferPair::new("g", "group2", build_regressor(RegressorKind::Conv2Narrow, &[3, 4, 4], &[4, 4, 4], 1).unwrap()),
            TransferPair::new("logits", "penultimate", build_regressor(RegressorKind::LinearLogit, &[3], &[3], 2).unwrap()),
        ],
        kd: Some(KdTerm { temperature: 4.0, weight: 16.0 }),
        mse_pairs: vec![],
    };
    let v = report_for(&x, &t, &logits, &mut obj, &student);
    let (total, task, kd) = (v[0], v[1], v[2]);
    let expected = 0.1 * task + 100.0 * (v[3] + v[4]) + 16.0 * kd;
    assert!((total - expected).abs() <= 1e-12 * total.abs().max(1.0), "{total} vs {expected}");
}

fn scalar_case(lambda1: f64, lambda2: f64) -> (f64, Var, Tape, TransferObjective) {
    let mut mean = Network::new(&[1], vec![LayerSpec::Linear { out_features: 1 }]).unwrap();
    for p in mean.params_mut() {
        p.data_mut().fill(0.0);
    }
    let mut q = VariationalGaussian::new(mean, Layout::Vector, DEFAULT_EPSILON).unwrap();
    q.alpha.data_mut().fill(0.0);
    q.epsilon = 0.0;
    let obj = TransferObjective { lambda1, lambda2, pairs: vec![TransferPair::new("t", "s", q)], kd: None, mse_pairs: vec![] };
    let mut tape = Tape::new();
    let task = tape.constant(&Tensor::scalar(2.0)).unwrap();
    (2.0, task, tape, obj)
}

fn run_scalar_case(lambda1: f64, lambda2: f64) -> vid_core::transfer::LossReport {
    let (_, task, mut tape, mut obj) = scalar_case(lambda1, lambda2);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let t = detached_taps(&mut tape, &[("t", &Tensor::new(vec![1, 1], vec![1.0]).unwrap())]);
    let mut s = TapActivations::new();
    s.insert("s", tape.param(&Tensor::new(vec![1, 1], vec![0.3]).unwrap()).unwrap());
    let logits = s.get("s").unwrap();
    vid_loss(&mut tape, task, logits, &mut obj, &t, &s, Mode::Train, &mut rng).unwrap().report
}

#[test]
fn single_pair_composition_example() {
    let ln2 = std::f64::consts::LN_2;
    let nll = 0.5 * ln2.ln() + 1.0 / (2.0 * ln2);
    assert!((nll - 0.538091).abs() < 1e-6);
    let r = run_scalar_case(1.0, 10.0);
    assert!((r.per_pair_nll[0] - nll).abs() < 1e-12);
    assert!((r.total - (2.0 + 10.0 * nll)).abs() < 1e-12);
    assert!((r.total - 7.38091).abs() < 1e-5);
}

#[test]
fn zero_transfer_weight_leaves_only_task() {
    let r = run_scalar_case(0.5, 0.0);
    assert_eq!(r.total, 0.5 * 2.0);
}

#[test]
fn objective_validation() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (_, task, mut tape, mut obj) = scalar_case(0.0, 1.0);
    let t = TapActivations::new();
    let err = vid_loss(&mut tape, task, task, &mut obj, &t, &t, Mode::Train, &mut rng).unwrap_err();
    assert!(matches!(err, Error::Config(_)));

    let (_, task, mut tape, mut obj) = scalar_case(1.0, 1.0);
    let err = vid_loss(&mut tape, task, task, &mut obj, &t, &t, Mode::Train, &mut rng).unwrap_err();
    assert!(matches!(err, Error::MissingTap(ref n) if n == "t"), "{err}");

    let (_, _, _, mut obj) = scalar_case(1.0, -1.0);
    assert!(obj.validate().is_err());
    obj.lambda2 = 1.0;
    obj.mse_pairs.push(MsePair { teacher_tap: "t".into(), student_tap: "s".into(), adaptor: None });
    assert!(matches!(obj.validate(), Err(Error::Config(_))));
}

#[test]
fn teacher_shape_must_match_regressor() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (_, task, mut tape, mut obj) = scalar_case(1.0, 1.0);
    let t = detached_taps(&mut tape, &[("t", &Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap())]);
    let mut s = TapActivations::new();
    s.insert("s", tape.constant(&Tensor::new(vec![1, 1], vec![0.0]).unwrap()).unwrap());
    let err = vid_loss(&mut tape, task, task, &mut obj, &t, &s, Mode::Train, &mut rng).unwrap_err();
    assert!(matches!(err, Error::Shape { .. }), "{err}");
}

#[test]
fn identity_matching_of_equal_activations_is_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let a = normal(&mut rng, &[3, 5]);
    let mut tape = Tape::new();
    let t = detached_taps(&mut tape, &[("t", &a)]);
    let s = detached_taps(&mut tape, &[("s", &a)]);
    let task = tape.constant(&Tensor::scalar(1.0)).unwrap();
    let mut obj = TransferObjective {
        lambda1: 1.0,
        lambda2: 3.0,
        pairs: vec![],
        kd: None,
        mse_pairs: vec![MsePair { teacher_tap: "t".into(), student_tap: "s".into(), adaptor: None }],
    };
    let r = vid_loss(&mut tape, task, task, &mut obj, &t, &s, Mode::Train, &mut rng).unwrap().report;
    assert_eq!(r.per_pair_nll, vec![0.0]);
    assert_eq!(r.total, 1.0);
}

#[test]
fn kd_is_non_negative() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..1000 {
        let n = rng.random_range(2..6);
        let scale = rng.random_range(0.1..10.0);
        let mut tape = Tape::new();
        let draw = |rng: &mut ChaCha8Rng| {
            let t = normal(rng, &[1, n]);
            Tensor::new(vec![1, n], t.data().iter().map(|v| v * scale).collect()).unwrap()
        };
        let a = draw(&mut rng);
        let b = draw(&mut rng);
        let av = tape.constant(&a).unwrap();
        let bv = tape.constant(&b).unwrap();
        let v = kd_loss(&mut tape, av, bv, rng.random_range(0.5..8.0)).unwrap();
        assert!(tape.item(v).unwrap() >= 0.0);
    }
}

#[test]
fn variance_floor_holds_for_extreme_alpha() {
    let net = Network::new(&[2], vec![LayerSpec::Linear { out_features: 2 }]).unwrap();
    let mut q = VariationalGaussian::new(net, Layout::Vector, DEFAULT_EPSILON).unwrap();
    q.alpha.data_mut().copy_from_slice(&[-1e6, -745.0]);
    assert!(q.variance().iter().all(|v| *v >= DEFAULT_EPSILON));
}

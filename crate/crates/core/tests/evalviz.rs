use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vid_core::data::{generate_sprites, Normalizer, SampleBatch, SpriteParams};
use vid_core::evalviz::{
    activation_magnitude_map, argmax_rows, evaluate_accuracy, loglik_map, mi_bound_bench, render_heatmap, Interpolation,
    MiBenchConfig,
};
use vid_core::nn::{build_cnn, LayerSpec, Network};
use vid_core::transfer::{build_regressor, RegressorKind};
use vid_core::Tensor;

#[test]
fn argmax_prefers_lowest_index_on_ties() {
    let logits = Tensor::new(vec![3, 3], vec![0.0, 0.0, 0.0, 1.0, 5.0, 5.0, -1.0, -2.0, -1.0]).unwrap();
    assert_eq!(argmax_rows(&logits).unwrap(), vec![0, 1, 0]);
}

/// Network whose logits are the one-hot input itself.
fn identity_classifier(classes: usize) -> Network {
    let mut net = Network::new(&[classes], vec![LayerSpec::Linear { out_features: classes }]).unwrap();
    for p in net.params_mut() {
        p.data_mut().fill(0.0);
    }
    let weight = net.params_mut().into_iter().next().unwrap();
    for i in 0..classes {
        weight.data_mut()[i * classes + i] = 1.0;
    }
    net
}

#[test]
fn perfect_and_constant_classifiers() {
    let classes = 10;
    let labels: Vec<usize> = (0..50).map(|i| i % classes).collect();
    let mut onehot = vec![0.0; 50 * classes];
    for (i, &l) in labels.iter().enumerate() {
        onehot[i * classes + l] = 1.0;
    }
    let data = SampleBatch { images: Tensor::new(vec![50, classes], onehot).unwrap(), labels: labels.clone() };
    assert_eq!(evaluate_accuracy(&identity_classifier(classes), &data).unwrap(), 1.0);
    let zeros = SampleBatch { images: Tensor::zeros(vec![50, classes]), labels };
    assert!((evaluate_accuracy(&identity_classifier(classes), &zeros).unwrap() - 0.1).abs() < 1e-12);
}

#[test]
fn random_network_is_near_chance() {
    let (ds, _) = generate_sprites(&SpriteParams::new(10, 100, 16, 4)).unwrap();
    let batch = Normalizer::fit(&ds).unwrap().apply(&ds).unwrap();
    let n = batch.len() as f64;
    let p = 0.1;
    let band = 3.0 * (p * (1.0 - p) / n).sqrt();
    // Average over several random nets: a single net may favor one class.
    let mut total = 0.0;
    for seed in 0..5 {
        let mut net = build_cnn(&[4, 4], 10, &[1, 16, 16]).unwrap();
        net.init_params(seed);
        total += evaluate_accuracy(&net, &batch).unwrap();
    }
    let mean = total / 5.0;
    assert!((mean - p).abs() <= band + 0.05, "mean accuracy {mean}");
}

#[test]
fn heatmaps_are_deterministic_and_sized() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let q = build_regressor(RegressorKind::Conv2Narrow, &[4, 8, 8], &[6, 8, 8], 3).unwrap();
    let t = Tensor::new(vec![1, 6, 8, 8], (0..384).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let s = Tensor::new(vec![1, 4, 8, 8], (0..256).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let a = render_heatmap(&loglik_map(&q, &t, &s).unwrap(), 16, 16, Interpolation::Bilinear).to_pgm();
    let b = render_heatmap(&loglik_map(&q, &t, &s).unwrap(), 16, 16, Interpolation::Bilinear).to_pgm();
    assert_eq!(a, b);
    assert!(a.starts_with(b"P5\n16 16\n255\n"));
    assert_eq!(a.len(), 13 + 256);
    let m = activation_magnitude_map(&t).unwrap();
    assert_eq!((m.height, m.width), (8, 8));
}

#[test]
fn unit_variance_exact_fit_is_flat() {
    let mut q = build_regressor(RegressorKind::Conv2Narrow, &[2, 4, 4], &[2, 4, 4], 0).unwrap();
    q.set_variance(1.0 + q.epsilon).unwrap();
    let s = Tensor::full(vec![1, 2, 4, 4], 0.5);
    let (mu, _) = q.mean_net.eval(&s).unwrap();
    let map = loglik_map(&q, &mu, &s).unwrap();
    let img = render_heatmap(&map, 16, 16, Interpolation::Bilinear);
    assert!(img.pixels.iter().all(|&p| p == 128));
}

#[test]
fn vector_layout_rejected() {
    let q = build_regressor(RegressorKind::LinearLogit, &[4], &[3], 0).unwrap();
    let err = loglik_map(&q, &Tensor::zeros(vec![1, 3]), &Tensor::zeros(vec![1, 4])).unwrap_err();
    assert!(matches!(err, vid_core::Error::InvalidArgument(_)));
}

#[test]
fn mi_bound_respects_oracle() {
    let cfg = MiBenchConfig::default();
    for &rho in &[0.0, 0.5, 0.9] {
        let est = mi_bound_bench(rho, &cfg).unwrap();
        let i_true = est.i_true.unwrap();
        assert!(est.standard_error > 0.0);
        assert!(est.bound <= i_true + 3.0 * est.standard_error, "{est:?}");
        if rho == 0.0 {
            assert!(est.bound >= -0.02, "{est:?}");
        } else {
            assert!(est.bound >= 0.9 * i_true, "{est:?}");
        }
    }
}

use proptest::prelude::*;
use vid_core::data::{
    generate_sprites, load_vidd, save_vidd, split_train_val, vidd_from_bytes, vidd_to_bytes, write_sidecar, Dataset,
    Normalizer, SpriteParams,
};
use vid_core::evalviz::evaluate_accuracy;
use vid_core::nn::{build_cnn, LayerSpec, Network};
use vid_core::train::{train_student, TrainConfig, TransferData};
use vid_core::transfer::TransferObjective;
use vid_core::Error;

#[test]
fn vidd_file_round_trip() {
    let (ds, _) = generate_sprites(&SpriteParams::new(3, 4, 12, 7)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("tiny.vidd");
    save_vidd(&ds, &path).unwrap();
    let back = load_vidd(&path).unwrap();
    assert_eq!(back.name, "tiny");
    assert_eq!(back.images, ds.images);
    assert_eq!(back.labels, ds.labels);
    assert_eq!(back.shape, ds.shape);
    assert_eq!(back.num_classes, 3);
}

#[test]
fn corrupt_vidd_payloads_are_rejected() {
    let ds = Dataset::new("x", 2, [1, 2, 2], vec![0.5; 8], vec![0, 1]).unwrap();
    let bytes = vidd_to_bytes(&ds);
    let err = vidd_from_bytes("x", &bytes[..bytes.len() - 3]).unwrap_err();
    assert!(matches!(err, Error::Truncated { .. }), "{err}");

    let mut bad_label = bytes.clone();
    *bad_label.last_mut().unwrap() = 9;
    assert!(matches!(vidd_from_bytes("x", &bad_label).unwrap_err(), Error::LabelOutOfRange { index: 1, label: 9, .. }));

    let mut bad_magic = bytes.clone();
    bad_magic[0] ^= 0xff;
    assert!(matches!(vidd_from_bytes("x", &bad_magic).unwrap_err(), Error::Format(_)));

    let mut trailing = bytes;
    trailing.push(0);
    assert!(matches!(vidd_from_bytes("x", &trailing).unwrap_err(), Error::Format(_)));
}

#[test]
fn sidecar_regenerates_the_same_dataset() {
    let params = SpriteParams::new(5, 6, 12, 41);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("sprites.json");
    write_sidecar(&params, &path).unwrap();
    let read: SpriteParams = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    assert_eq!(read, params);
    assert_eq!(generate_sprites(&read).unwrap().0, generate_sprites(&params).unwrap().0);
    assert!(serde_json::from_str::<SpriteParams>(r#"{"num_classes":2,"per_class":1,"image_size":12,"seed":0,"bogus":1}"#).is_err());
}

#[test]
fn normalizer_uses_training_statistics_only() {
    let (ds, _) = generate_sprites(&SpriteParams::new(4, 20, 12, 3)).unwrap();
    let split = split_train_val(&ds, 0.2, 3).unwrap();
    let train = ds.subset(&split.train).unwrap();
    let mut val = ds.subset(&split.val).unwrap();
    let norm = Normalizer::fit(&train).unwrap();
    val.images.iter_mut().for_each(|v| *v += 100.0);
    assert_eq!(Normalizer::fit(&train).unwrap(), norm);
    let applied = norm.apply(&train).unwrap();
    let n = applied.images.data().len() as f64;
    let mean: f64 = applied.images.data().iter().sum::<f64>() / n;
    assert!(mean.abs() < 1e-6);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn split_is_a_stratified_partition(classes in 2usize..6, per_class in 5usize..30, frac in 0.05f64..0.6, seed in 0u64..1000) {
        let (ds, _) = generate_sprites(&SpriteParams::new(classes, per_class, 12, seed)).unwrap();
        let split = split_train_val(&ds, frac, seed).unwrap();
        let mut all: Vec<usize> = split.train.iter().chain(&split.val).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..ds.len()).collect::<Vec<_>>());
        let val = ds.subset(&split.val).unwrap();
        let expected = ((frac * per_class as f64).floor() as usize).max(1);
        prop_assert!(val.class_counts().iter().all(|&c| c == expected));
        prop_assert_eq!(split_train_val(&ds, frac, seed).unwrap(), split);
    }
}

fn fit(net: &mut Network, train: &vid_core::data::SampleBatch, val: &vid_core::data::SampleBatch, epochs: usize) -> f64 {
    net.init_params(0);
    let cfg = TrainConfig { epochs, batch_size: 32, base_lr: 0.05, momentum: 0.9, ..TrainConfig::default() };
    let mut obj = TransferObjective::task_only(1.0);
    train_student(net, &mut obj, None, TransferData { train, val, test: None }, &cfg, &mut |_| {}).unwrap();
    evaluate_accuracy(net, val).unwrap()
}

#[test]
fn sprites_need_more_than_a_linear_probe() {
    let (ds, _) = generate_sprites(&SpriteParams::new(10, 60, 16, 5)).unwrap();
    let split = split_train_val(&ds, 0.25, 5).unwrap();
    let (tr, va) = (ds.subset(&split.train).unwrap(), ds.subset(&split.val).unwrap());
    let norm = Normalizer::fit(&tr).unwrap();
    let (train, val) = (norm.apply(&tr).unwrap(), norm.apply(&va).unwrap());

    let mut probe = Network::new(&[1, 16, 16], vec![LayerSpec::Flatten, LayerSpec::Linear { out_features: 10 }]).unwrap();
    let probe_acc = fit(&mut probe, &train, &val, 15);
    let mut cnn = build_cnn(&[8, 16], 10, &[1, 16, 16]).unwrap();
    let cnn_acc = fit(&mut cnn, &train, &val, 15);
    assert!(probe_acc + 0.15 < cnn_acc, "probe {probe_acc} vs cnn {cnn_acc}");
}

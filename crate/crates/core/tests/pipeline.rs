//! Datasets, IDX files, checkpoints and the training loop.

use std::fs;

use whitebox_core::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
use whitebox_core::data::{gen_synthetic, load_idx, patchify, write_idx, Dataset, ImageSet, PatchSpec, SyntheticSpec};
use whitebox_core::layers::{CrateParams, ModelConfig};
use whitebox_core::train::{checkpoint_path, train, write_metrics, TrainConfig, TrainOutputs};
use whitebox_core::{Error, Rng};

fn tiny_spec() -> SyntheticSpec {
    SyntheticSpec {
        classes: 2,
        tokens: 4,
        input_dim: 8,
        subspaces_per_class: 1,
        subspace_dim: 2,
        sigma: 0.05,
        samples_per_class: 40,
        seed: 3,
        orthogonal_classes: true,
    }
}

#[test]
fn nearest_subspace_classifies_clean_data_perfectly() {
    let spec = SyntheticSpec {
        sigma: 0.0,
        ..tiny_spec()
    };
    let ds = gen_synthetic(&spec).unwrap();
    for (x, &label) in ds.samples.iter().zip(&ds.labels) {
        let energy: Vec<f64> = ds
            .bases
            .iter()
            .map(|class| class.iter().map(|u| u.t_matmul(x).unwrap().frobenius_norm()).sum())
            .collect();
        let best = if energy[0] >= energy[1] { 0 } else { 1 };
        assert_eq!(best, label);
    }
}

#[test]
fn dataset_files_are_reproducible_and_self_describing() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a/ds.json"), dir.path().join("b/ds.json"));
    gen_synthetic(&tiny_spec()).unwrap().save(&a).unwrap();
    let ds = gen_synthetic(&tiny_spec()).unwrap();
    ds.save(&b).unwrap();
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_eq!(fs::read(a.with_extension("bin")).unwrap(), fs::read(b.with_extension("bin")).unwrap());
    let back = Dataset::load(&b).unwrap();
    assert_eq!(back, ds);
}

#[test]
fn idx_header_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let images = dir.path().join("img.idx");
    let labels = dir.path().join("lab.idx");
    let mut bytes = vec![0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 2];
    bytes.extend([1, 2, 3, 4, 5, 6, 7, 8]);
    fs::write(&images, &bytes).unwrap();
    fs::write(&labels, [0, 0, 8, 1, 0, 0, 0, 2, 7, 9]).unwrap();
    let set = load_idx(&images, &labels).unwrap();
    assert_eq!((set.len(), set.height, set.width), (2, 2, 2));
    assert_eq!(set.image(1), &[5, 6, 7, 8]);
    assert_eq!(set.labels, vec![7, 9]);

    fs::write(&labels, [0, 0, 8, 1, 0, 0, 0, 3, 7, 9, 1]).unwrap();
    assert!(matches!(load_idx(&images, &labels), Err(Error::CountMismatch { images: 2, labels: 3 })));

    fs::write(&labels, [0, 0, 8, 3, 0, 0, 0, 2, 7, 9]).unwrap();
    assert!(matches!(load_idx(&images, &labels), Err(Error::BadMagic { found: 0x803, .. })));

    fs::write(&images, &bytes[..20]).unwrap();
    fs::write(&labels, [0, 0, 8, 1, 0, 0, 0, 2, 7, 9]).unwrap();
    assert!(matches!(load_idx(&images, &labels), Err(Error::Truncated { expected: 24, found: 20, .. })));

    assert!(matches!(load_idx(&dir.path().join("missing"), &labels), Err(Error::Io { .. })));
}

#[test]
fn idx_round_trip_and_patch_tokens() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = Rng::new(4);
    let set = ImageSet {
        height: 4,
        width: 6,
        pixels: (0..3 * 24).map(|_| rng.below(256) as u8).collect(),
        labels: vec![0, 1, 2],
    };
    let (i, l) = (dir.path().join("i"), dir.path().join("l"));
    write_idx(&set, &i, &l).unwrap();
    let back = load_idx(&i, &l).unwrap();
    assert_eq!(back, set);

    let spec = PatchSpec {
        height: 4,
        width: 6,
        channels: 1,
        patch_height: 2,
        patch_width: 3,
    };
    let batch = patchify(&back, &spec).unwrap();
    assert_eq!(batch.len(), 3);
    assert_eq!(batch.samples[0].shape(), (6, 4));
    let constant = ImageSet {
        pixels: vec![200; 24],
        labels: vec![0],
        ..set.clone()
    };
    let tokens = &patchify(&constant, &spec).unwrap().samples[0];
    for c in 1..tokens.cols() {
        assert_eq!(tokens.column(c), tokens.column(0));
    }
    let ds = Dataset::from_images(&back, &spec).unwrap();
    assert_eq!(ds.classes, 3);
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ModelConfig::micro(8, 4, 2);
    let params = CrateParams::init(&cfg, &mut Rng::new(5)).unwrap();
    let meta = CheckpointMeta {
        model: cfg.clone(),
        epoch: 3,
    };
    let path = dir.path().join("ck.json");
    save_checkpoint(&path, &params, &meta).unwrap();
    let (back, back_meta) = load_checkpoint(&path).unwrap();
    assert_eq!(back_meta, meta);
    for ((_, a), (_, b)) in params.tensors().iter().zip(back.tensors()) {
        let bits_a: Vec<u64> = a.as_slice().iter().map(|v| v.to_bits()).collect();
        let bits_b: Vec<u64> = b.as_slice().iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits_a, bits_b);
    }
    let again = dir.path().join("again.json");
    save_checkpoint(&again, &back, &back_meta).unwrap();
    assert_eq!(fs::read(path.with_extension("bin")).unwrap(), fs::read(again.with_extension("bin")).unwrap());
}

#[test]
fn zero_epochs_leave_parameters_untouched() {
    let ds = gen_synthetic(&tiny_spec()).unwrap();
    let cfg = ModelConfig::micro(8, 4, 2);
    let params = CrateParams::init(&cfg, &mut Rng::new(6)).unwrap();
    let tc = TrainConfig {
        epochs: 0,
        ..Default::default()
    };
    let (out, metrics) = train(params.clone(), &ds, &tc, &cfg, &TrainOutputs::default()).unwrap();
    assert_eq!(out, params);
    assert!(metrics.is_empty());
}

#[test]
fn fixed_seed_training_is_bit_identical() {
    let spec = SyntheticSpec {
        samples_per_class: 32,
        ..tiny_spec()
    };
    let ds = gen_synthetic(&spec).unwrap();
    let mut cfg = ModelConfig::micro(8, 4, 2);
    cfg.dim = 8;
    cfg.heads = 2;
    cfg.head_dim = 2;
    cfg.layers = 2;
    let tc = TrainConfig {
        epochs: 2,
        batch_size: 16,
        warmup_epochs: 1,
        seed: 11,
        checkpoint_every: 1,
        ..Default::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let mut logs = Vec::new();
    for run in 0..2 {
        let ck = dir.path().join(format!("run{run}"));
        let params = CrateParams::init(&cfg, &mut Rng::new(1)).unwrap();
        let outputs = TrainOutputs {
            checkpoint_dir: Some(ck.clone()),
        };
        let (_, metrics) = train(params, &ds, &tc, &cfg, &outputs).unwrap();
        assert_eq!(metrics.len(), 4);
        let log = ck.join("metrics.csv");
        write_metrics(&log, &metrics).unwrap();
        logs.push((fs::read(log).unwrap(), fs::read(checkpoint_path(&ck, 2).with_extension("bin")).unwrap()));
        assert!(checkpoint_path(&ck, 1).exists());
    }
    assert_eq!(logs[0], logs[1]);
    let header = String::from_utf8(logs[0].0.clone()).unwrap();
    assert!(header.starts_with("epoch,split,loss,accuracy,lr\n"));
}

#[test]
fn training_rejects_bad_inputs() {
    let ds = gen_synthetic(&tiny_spec()).unwrap();
    let cfg = ModelConfig::micro(8, 4, 2);
    let params = CrateParams::init(&cfg, &mut Rng::new(6)).unwrap();
    let bad = TrainConfig {
        batch_size: 0,
        ..Default::default()
    };
    assert!(train(params.clone(), &ds, &bad, &cfg, &TrainOutputs::default()).is_err());
    let empty = Dataset {
        samples: Vec::new(),
        labels: Vec::new(),
        ..ds.clone()
    };
    assert!(train(params.clone(), &empty, &TrainConfig::default(), &cfg, &TrainOutputs::default()).is_err());
    let narrow = ModelConfig::micro(8, 4, 1);
    let narrow_params = CrateParams::init(&narrow, &mut Rng::new(6)).unwrap();
    assert!(train(narrow_params, &ds, &TrainConfig::default(), &narrow, &TrainOutputs::default()).is_err());
}

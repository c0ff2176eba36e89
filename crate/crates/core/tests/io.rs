use plainseg::io::{
    dump_feature, generate_dataset, generate_sample, images_to_tensor, load_dataset, to_gray, Checkpoint, DumpStage,
    Image8, LoadMode, SyntheticSpec,
};
use plainseg::model::{ModelConfig, Segmenter, ViTConfig};
use plainseg::train::{AdamW, AdamWConfig};
use plainseg::{Error, Segmenter32, Segmenter64, Tensor};

fn tiny() -> Segmenter32 {
    Segmenter32::new(&ModelConfig::plainseg_tiny(3), 7).unwrap()
}

#[test]
fn checkpoint_round_trip_is_bit_identical() {
    let m = tiny();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.pseg");
    Checkpoint::from_store(&m.store).save(&path).unwrap();
    let mut other = Segmenter32::new(&ModelConfig::plainseg_tiny(3), 99).unwrap();
    let report = Checkpoint::load(&path).unwrap().load_into(&mut other.store, LoadMode::Strict).unwrap();
    assert_eq!(report.loaded.len(), m.store.len());
    for ((_, a), (_, b)) in m.store.iter().zip(other.store.iter()) {
        assert_eq!(a.name, b.name);
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.value), bits(&b.value), "{}", a.name);
    }
    // saving the reloaded store reproduces the file byte for byte
    assert_eq!(Checkpoint::from_store(&other.store).to_bytes(), std::fs::read(&path).unwrap());
}

#[test]
fn checkpoint_converts_between_precisions() {
    let m = tiny();
    let bytes = Checkpoint::from_store(&m.store).to_bytes();
    let mut wide = Segmenter64::new(&ModelConfig::plainseg_tiny(3), 1).unwrap();
    Checkpoint::from_bytes(&bytes).unwrap().load_into(&mut wide.store, LoadMode::Strict).unwrap();
    let (_, a) = m.store.iter().next().unwrap();
    let (_, b) = wide.store.iter().next().unwrap();
    assert_eq!(a.value.cast::<f64>().data(), b.value.data());
}

#[test]
fn training_state_survives_round_trip() {
    let m = tiny();
    let mut opt = AdamW::<f32>::new(AdamWConfig::default());
    let (id, e) = m.store.iter().next().unwrap();
    let n = e.value.numel();
    opt.set_moments(id, vec![0.5; n], vec![0.25; n]);
    opt.step = 17;
    let mut ck = Checkpoint::from_store(&m.store);
    ck.add_training_state(&m.store, &opt, 42);
    let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
    let mut opt2 = AdamW::<f32>::new(AdamWConfig::default());
    assert_eq!(back.load_training_state(&m.store, &mut opt2).unwrap(), 42);
    assert_eq!(opt2.step, 17);
    let (mm, vv) = opt2.moments(id).unwrap();
    assert_eq!((mm[0], vv[n - 1]), (0.5, 0.25));
    // optimizer records do not upset a strict weight load
    let mut other = tiny();
    back.load_into(&mut other.store, LoadMode::Strict).unwrap();
}

#[test]
fn nonstrict_load_skips_mismatches() {
    let src = Segmenter32::new(&ModelConfig::plainseg_tiny(5), 3).unwrap();
    let mut dst = tiny();
    let before = Checkpoint::from_store(&dst.store);
    let ck = Checkpoint::from_store(&src.store);
    assert!(matches!(ck.load_into(&mut dst.store, LoadMode::Strict), Err(Error::Checkpoint(_))));
    assert_eq!(Checkpoint::from_store(&dst.store), before, "failed strict load must not write");
    let r = ck.load_into(&mut dst.store, LoadMode::NonStrict).unwrap();
    assert!(!r.skipped.is_empty());
    assert!(r.skipped.iter().all(|n| n.contains("class")), "{:?}", r.skipped);
    assert_eq!(r.loaded.len() + r.skipped.len(), dst.store.len());
}

#[test]
fn corrupted_checkpoint_is_rejected_without_partial_load() {
    let mut m = tiny();
    let before = Checkpoint::from_store(&m.store);
    let mut bytes = before.to_bytes();
    bytes[0] = b'X';
    assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Checkpoint(_))));

    // a damaged last record leaves the earlier ones unused
    let mut ck = Checkpoint::from_store(&m.store);
    for r in &mut ck.records {
        for b in &mut r.bytes {
            *b = 0;
        }
    }
    let n = ck.records.len();
    ck.records[n - 1].shape.push(2);
    assert!(ck.load_into(&mut m.store, LoadMode::Strict).is_err());
    assert_eq!(Checkpoint::from_store(&m.store), before);

    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("cut.pseg");
    let full = before.to_bytes();
    std::fs::write(&p, &full[..full.len() - 3]).unwrap();
    assert!(matches!(Checkpoint::load(&p), Err(Error::Checkpoint(_))));
}

fn spec(classes: usize, count: usize, shapes: (usize, usize)) -> SyntheticSpec {
    SyntheticSpec {
        num_classes: classes,
        count,
        min_shapes: shapes.0,
        max_shapes: shapes.1,
        size: 32,
        seed: 5,
        ..Default::default()
    }
}

#[test]
fn synthetic_labels_are_in_range() {
    let s = spec(3, 100, (1, 5));
    for i in 0..s.count {
        let x = generate_sample(&s, i).unwrap();
        assert_eq!((x.image.channels, x.labels.channels), (3, 1));
        assert!(x.labels.data.iter().all(|&l| l < 3));
    }
}

#[test]
fn synthetic_classes_appear_often() {
    let s = spec(3, 100, (3, 5));
    let mut seen = [0usize; 3];
    for i in 0..s.count {
        let x = generate_sample(&s, i).unwrap();
        for (c, n) in seen.iter_mut().enumerate() {
            *n += x.labels.data.contains(&(c as u8)) as usize;
        }
    }
    for (c, n) in seen.iter().enumerate() {
        assert!(*n >= 80, "class {c} in {n} of 100 images");
    }
}

#[test]
fn zero_shapes_is_all_background() {
    let x = generate_sample(&spec(4, 1, (0, 0)), 0).unwrap();
    assert!(x.labels.data.iter().all(|&l| l == 0));
}

#[test]
fn dataset_on_disk_matches_memory_and_is_deterministic() {
    let s = spec(3, 6, (1, 3));
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    generate_dataset(&s, a.path()).unwrap();
    generate_dataset(&s, b.path()).unwrap();
    for f in ["manifest.txt", "images/00003.ppm", "labels/00005.pgm"] {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap(), "{f}");
    }
    let loaded = load_dataset(a.path()).unwrap();
    assert_eq!(loaded.len(), 6);
    for (i, x) in loaded.iter().enumerate() {
        assert_eq!(x, &generate_sample(&s, i).unwrap());
    }
    let other = SyntheticSpec { seed: 6, ..s.clone() };
    assert_ne!(generate_sample(&other, 0).unwrap(), generate_sample(&s, 0).unwrap());
}

#[test]
fn pnm_round_trip_and_rejects_garbage() {
    let img = Image8::new(3, 2, 3, (0..18).collect()).unwrap();
    assert_eq!(Image8::decode(&img.encode()).unwrap(), img);
    let with_comment = b"P5\n# note\n2 1\n255\n\x07\x09";
    assert_eq!(Image8::decode(with_comment).unwrap().data, vec![7, 9]);
    assert!(matches!(Image8::decode(b"P5\n2 1\n65535\n\0\0\0\0"), Err(Error::Image(_))));
    assert!(matches!(Image8::decode(b"P6\n2 2\n255\n\0"), Err(Error::Image(_))));
}

#[test]
fn constant_dump_is_mid_gray() {
    assert_eq!(to_gray(&[3.0; 5]), vec![128; 5]);
    assert_eq!(to_gray(&[0.0, 1.0, 0.5]), vec![0, 255, 128]);
}

fn image(size: usize) -> Tensor<f32> {
    let s = generate_sample(&SyntheticSpec { size, ..Default::default() }, 0).unwrap();
    images_to_tensor(&[&s.image]).unwrap()
}

#[test]
fn dump_covers_each_group() {
    let m = tiny();
    let x = image(64);
    for i in 1..=m.config.groups {
        let d = dump_feature(&m, &x, DumpStage::Group(i)).unwrap();
        assert_eq!((d.width, d.height, d.channels), (16, 16, 1));
    }
    assert!(dump_feature(&m, &x, DumpStage::Group(m.config.groups + 1)).is_err());
    assert!("group-0".parse::<DumpStage>().is_err());
    assert_eq!("group-2".parse::<DumpStage>().unwrap(), DumpStage::Group(2));
}

#[test]
fn refined_map_is_one_eighth_for_patch_16() {
    let mut cfg = ModelConfig::plainseg_tiny(3);
    cfg.encoder = ViTConfig { patch_size: 16, ..ViTConfig::tiny() };
    let m = Segmenter::<f32>::new(&cfg, 0).unwrap();
    for st in [DumpStage::PreRefine, DumpStage::PostRefine] {
        let d = dump_feature(&m, &image(64), st).unwrap();
        assert_eq!((d.width, d.height), (8, 8), "{st}");
    }
}

#[test]
fn dump_needs_a_refiner() {
    let m = Segmenter32::new(
        &ModelConfig { variant: plainseg::model::Variant::Linear, ..ModelConfig::plainseg_tiny(3) },
        0,
    )
    .unwrap();
    assert!(dump_feature(&m, &image(64), DumpStage::PreRefine).is_err());
}

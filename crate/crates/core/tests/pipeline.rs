use std::path::Path;

use image::{ImageBuffer, Luma};

use lvgraph::checkpoint::Checkpoint;
use lvgraph::data::{generate_phantom, load_manifest, resize_sample, write_dataset, GrayImage, Split};
use lvgraph::error::Error;
use lvgraph::labels::{measurements_from_landmarks, LandmarkSet};
use lvgraph::model::ModelConfig;
use lvgraph::train::{evaluate, prepare, prepare_all, Prepared, TrainConfig, Trainer};
use lvgraph::Exec;

const HEADER: &str = "id,image_path,h1,w1,h2,w2,h3,w3,h4,w4,spacing_mm,split\n";

fn write_png8(path: &Path, h: u32, w: u32, fill: u8) {
    ImageBuffer::<Luma<u8>, Vec<u8>>::from_pixel(w, h, Luma([fill])).save(path).unwrap();
}

fn write_png16(path: &Path, h: u32, w: u32, fill: u16) {
    ImageBuffer::<Luma<u16>, Vec<u16>>::from_pixel(w, h, Luma([fill])).save(path).unwrap();
}

fn tiny_config(levels: u32, size: usize) -> TrainConfig {
    let mut m = ModelConfig::new(levels, size);
    m.gnn.width = 12;
    m.gnn.mlp_hidden = 8;
    m.gnn.layers = 2;
    m.gnn.temperature = 0.1;
    m.features.encoder_channels = (0..levels).map(|i| 4 << i).collect();
    let mut c = TrainConfig::new(m);
    c.train.batch_size = 2;
    c.train.epochs = 1;
    c
}

fn phantoms(n: u64, size: usize, model_size: usize) -> Vec<Prepared> {
    (0..n).map(|i| prepare(&generate_phantom(i, size).unwrap(), model_size).unwrap()).collect()
}

#[test]
fn three_record_fixture_loads_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir(dir.path().join("img")).unwrap();
    write_png8(&dir.path().join("img/a.png"), 20, 30, 255);
    write_png16(&dir.path().join("img/b.png"), 16, 16, 65535);
    write_png8(&dir.path().join("img/c.png"), 16, 16, 51);
    let rows = "\
a,img/a.png,1.25,2.5,3.125,4.0625,10.1,11.2,19.999,29.5,0.3125,train
b,img/b.png,0,0,5.333333333333333,7.1,8.2,9.3,15.75,15.875,0.5,val
c,img/c.png,1,1,2,2,3,3,4,4,1.0,test
";
    let m = dir.path().join("manifest.csv");
    std::fs::write(&m, format!("{HEADER}{rows}")).unwrap();
    let s = load_manifest(&m).unwrap();
    assert_eq!(s.len(), 3);
    assert_eq!(s[0].landmarks.points, [[1.25, 2.5], [3.125, 4.0625], [10.1, 11.2], [19.999, 29.5]]);
    assert_eq!(s[1].landmarks.points[1], [5.333333333333333, 7.1]);
    assert_eq!(s[1].landmarks.points[3], [15.75, 15.875]);
    assert_eq!(s[0].landmarks.spacing_mm, 0.3125);
    assert_eq!((s[0].image.height, s[0].image.width), (20, 30));
    assert_eq!([s[0].split, s[1].split, s[2].split], [Split::Train, Split::Val, Split::Test]);
    assert_eq!(s[0].image.data[0], 1.0);
    assert_eq!(s[1].image.data[0], 1.0);
    assert_eq!(s[2].image.data[0], 51.0 / 255.0);
}

#[test]
fn empty_manifests_give_no_samples() {
    let dir = tempfile::tempdir().unwrap();
    let m = dir.path().join("m.csv");
    std::fs::write(&m, HEADER).unwrap();
    assert!(load_manifest(&m).unwrap().is_empty());
    std::fs::write(&m, "").unwrap();
    assert!(load_manifest(&m).unwrap().is_empty());
}

#[test]
fn landmark_on_the_frame_edge_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    write_png8(&dir.path().join("a.png"), 16, 16, 0);
    let m = dir.path().join("m.csv");
    std::fs::write(&m, format!("{HEADER}a,a.png,16,1,2,2,3,3,4,4,1,train\n")).unwrap();
    match load_manifest(&m) {
        Err(Error::Record { id, .. }) => assert_eq!(id, "a"),
        other => panic!("expected record error, got {other:?}"),
    }
}

#[test]
fn malformed_row_reports_its_line() {
    let dir = tempfile::tempdir().unwrap();
    write_png8(&dir.path().join("a.png"), 16, 16, 0);
    let m = dir.path().join("m.csv");
    let good = "a,a.png,1,1,2,2,3,3,4,4,1,train\n";
    std::fs::write(&m, format!("{HEADER}{good}b,a.png,1,one,2,2,3,3,4,4,1,train\n")).unwrap();
    match load_manifest(&m) {
        Err(Error::ManifestParse { line, .. }) => assert_eq!(line, 3),
        other => panic!("expected parse error, got {other:?}"),
    }
    std::fs::write(&m, format!("{HEADER}{good}c,a.png,1,1,2,2,3,3,4,4,1,holdout\n")).unwrap();
    assert!(matches!(load_manifest(&m), Err(Error::ManifestParse { line: 3, .. })));
    std::fs::write(&m, format!("{HEADER}{good}{good}")).unwrap();
    assert!(matches!(load_manifest(&m), Err(Error::Record { .. })));
}

#[test]
fn missing_image_names_the_record() {
    let dir = tempfile::tempdir().unwrap();
    let m = dir.path().join("m.csv");
    std::fs::write(&m, format!("{HEADER}ghost,nope.png,1,1,2,2,3,3,4,4,1,train\n")).unwrap();
    let e = load_manifest(&m).unwrap_err();
    assert!(matches!(&e, Error::Record { id, .. } if id == "ghost"), "{e}");
}

#[test]
fn dataset_round_trip_preserves_coordinates() {
    let dir = tempfile::tempdir().unwrap();
    let samples: Vec<_> = (0..3).map(|i| generate_phantom(i, 32).unwrap()).collect();
    write_dataset(dir.path(), &samples).unwrap();
    let back = load_manifest(&dir.path().join("manifest.csv")).unwrap();
    for (a, b) in samples.iter().zip(&back) {
        assert_eq!(a.landmarks, b.landmarks);
        for (x, y) in a.image.data.iter().zip(&b.image.data) {
            assert!((x - y).abs() <= 0.5 / 65535.0 + 1e-7);
        }
    }
}

#[test]
fn resize_keeps_physical_measurements() {
    let s = generate_phantom(3, 448).unwrap();
    let r = resize_sample(&s, (224, 224)).unwrap();
    assert_eq!(r.landmarks.spacing_mm, 2.0 * s.landmarks.spacing_mm);
    for (a, b) in s.landmarks.points.iter().zip(&r.landmarks.points) {
        assert_eq!([a[0] / 2.0, a[1] / 2.0], *b);
    }
    let (m0, m1) = (measurements_from_landmarks(&s.landmarks), measurements_from_landmarks(&r.landmarks));
    for (x, y) in m0.as_array().iter().zip(&m1.as_array()) {
        assert!((x - y).abs() < 1e-9);
    }
}

#[test]
fn twenty_pixel_gap_at_half_mm_is_ten_mm() {
    let lm = LandmarkSet::new([[10.0, 5.0], [30.0, 5.0], [31.0, 5.0], [40.0, 5.0]], 0.5, 64, 64).unwrap();
    assert_eq!(measurements_from_landmarks(&lm).ivs_mm, 10.0);
}

#[test]
fn phantom_samples_are_valid() {
    for seed in 0..50 {
        let s = generate_phantom(seed, 64).unwrap();
        s.landmarks.validate().unwrap();
        assert_eq!((s.landmarks.height, s.landmarks.width), (s.image.height, s.image.width));
    }
}

#[test]
fn zero_epochs_checkpoint_is_the_initialization() {
    let mut cfg = tiny_config(2, 16);
    cfg.train.epochs = 0;
    let train = phantoms(2, 16, 16);
    let mut t = Trainer::new(cfg.clone(), Exec::default()).unwrap();
    t.fit(&train, &[], |_, _| Ok(())).unwrap();
    let fresh = Trainer::new(cfg, Exec::default()).unwrap();
    assert_eq!(t.best_checkpoint().params, fresh.model.params);
    assert_eq!(t.step_count(), 0);
}

#[test]
fn single_sample_training_lowers_the_loss() {
    let mut cfg = tiny_config(2, 16);
    cfg.train.batch_size = 1;
    let sample = &phantoms(1, 16, 16)[0];
    let mut t = Trainer::new(cfg.clone(), Exec::default()).unwrap();
    let initial = t
        .model
        .loss(Exec::default(), &sample.image, &sample.landmarks, &cfg.loss)
        .unwrap()
        .total;
    for _ in 0..500 {
        t.step(&[sample]).unwrap();
    }
    let after = t
        .model
        .loss(Exec::default(), &sample.image, &sample.landmarks, &cfg.loss)
        .unwrap()
        .total;
    assert!(after < initial, "{after} >= {initial}");
}

#[test]
fn resume_continues_the_step_counter() {
    let cfg = tiny_config(2, 16);
    let train = phantoms(4, 16, 16);
    let mut t = Trainer::new(cfg, Exec::default()).unwrap();
    t.run_epoch(&train).unwrap();
    assert_eq!(t.step_count(), 2);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("last.ckpt");
    t.checkpoint().save(&p).unwrap();
    let mut r = Trainer::resume(Checkpoint::load(&p).unwrap(), Exec::default()).unwrap();
    assert_eq!((r.step_count(), r.epoch), (2, 1));
    r.run_epoch(&train).unwrap();
    t.run_epoch(&train).unwrap();
    assert_eq!(r.step_count(), 4);
    assert_eq!(r.model.params, t.model.params);
}

#[test]
fn step_budget_stops_training() {
    let mut cfg = tiny_config(2, 16);
    cfg.train.epochs = 5;
    cfg.train.max_steps = Some(3);
    let train = phantoms(4, 16, 16);
    let mut t = Trainer::new(cfg, Exec::default()).unwrap();
    t.fit(&train, &[], |_, _| Ok(())).unwrap();
    assert_eq!(t.step_count(), 3);
}

#[test]
fn training_is_deterministic_across_policies() {
    let cfg = tiny_config(2, 16);
    let train = phantoms(4, 16, 16);
    let run = |exec| {
        let mut t = Trainer::new(cfg.clone(), exec).unwrap();
        t.run_epoch(&train).unwrap();
        t.model.params
    };
    let a = run(Exec::Sequential);
    assert_eq!(a, run(Exec::Sequential));
    assert_eq!(a, run(Exec::default()));
}

#[test]
fn non_finite_parameters_abort_as_divergence() {
    let cfg = tiny_config(2, 16);
    let train = phantoms(1, 16, 16);
    let mut t = Trainer::new(cfg, Exec::default()).unwrap();
    t.model.params.tensors[0].data[0] = f32::NAN;
    assert!(matches!(t.step(&[&train[0]]), Err(Error::Diverged { .. })));
}

#[test]
fn best_validation_checkpoint_is_tracked() {
    let mut cfg = tiny_config(2, 16);
    cfg.train.epochs = 3;
    let train = phantoms(4, 16, 16);
    let val: Vec<_> = (100..102).map(|i| prepare(&generate_phantom(i, 16).unwrap(), 16).unwrap()).collect();
    let mut t = Trainer::new(cfg, Exec::default()).unwrap();
    let mut records = Vec::new();
    t.fit(&train, &val, |r, _| {
        records.push(r.clone());
        Ok(())
    })
    .unwrap();
    assert_eq!(records.len(), 3);
    assert!(records[0].best);
    let best = records
        .iter()
        .filter_map(|r| r.val.as_ref().and_then(|m| m.mean_mpe_percent))
        .fold(f64::INFINITY, f64::min);
    assert_eq!(t.best_mpe, Some(best));
}

#[test]
fn checkpoint_reload_reproduces_metrics() {
    let cfg = tiny_config(2, 16);
    let train = phantoms(4, 16, 16);
    let mut t = Trainer::new(cfg, Exec::default()).unwrap();
    t.run_epoch(&train).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.ckpt");
    t.checkpoint().save(&p).unwrap();
    let reloaded = Checkpoint::load(&p).unwrap().model().unwrap();
    let test = phantoms(3, 32, 16);
    let a = evaluate(&t.model, Exec::default(), &test, false).unwrap();
    let b = evaluate(&reloaded, Exec::default(), &test, false).unwrap();
    assert_eq!(a, b);
}

#[test]
fn evaluation_reports_in_the_original_frame() {
    let cfg = tiny_config(2, 16);
    let model = Trainer::new(cfg, Exec::default()).unwrap().model;
    let samples: Vec<_> = (0..3).map(|i| generate_phantom(i, 48).unwrap()).collect();
    let prepared = prepare_all(Exec::default(), &samples, 16).unwrap();
    let (_, rows) = evaluate(&model, Exec::default(), &prepared, false).unwrap();
    for r in rows {
        assert!(r.points.iter().flatten().all(|c| (0.0..48.0).contains(c)));
    }
    assert!(evaluate(&model, Exec::default(), &[], true).is_err());
}

#[test]
fn gray_image_rejects_colour_input() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("rgb.png");
    ImageBuffer::<image::Rgb<u8>, Vec<u8>>::new(4, 4).save(&p).unwrap();
    assert!(GrayImage::load(&p).is_err());
}

use lvgraph::graph::Level;
use lvgraph::model::{Model, ModelConfig};
use lvgraph::objective::LossConfig;
use lvgraph::train::{OptimizerConfig, Schedule};
use lvgraph::Exec;

#[test]
fn optimizer_and_loss_defaults() {
    let o = OptimizerConfig::default();
    assert_eq!(o.lr, 0.001);
    assert_eq!(o.betas, [0.9, 0.999]);
    assert_eq!(o.weight_decay, 1e-4);
    assert_eq!(LossConfig::default().pos_weight, 9000.0);
    let s = Schedule::default();
    assert!(s.epochs > 0 && s.batch_size > 0);
}

#[test]
fn model_defaults_at_224() {
    let m = ModelConfig::new(7, 224);
    m.validate().unwrap();
    assert_eq!(m.gnn.layers, 3);
    assert_eq!(m.gnn.width, 128);
    assert_eq!(m.features.expand_channels, 4);
    assert_eq!(
        m.features.encoder_dims(7),
        vec![(128, 8), (64, 16), (32, 32), (16, 64), (8, 128), (4, 256), (2, 512)]
    );
}

#[test]
fn backbone_shapes_at_224() {
    let model = Model::<f32>::new(ModelConfig::new(7, 224), 0).unwrap();
    let image: Vec<f32> = (0..224 * 224).map(|i| (i % 97) as f32 / 97.0).collect();
    let x = model.image_map(&image, 224, 224).unwrap();
    let cache = model.backbone().forward(Exec::default(), &model.params, &x).unwrap();
    let e = cache.expanded();
    assert_eq!((e.channels, e.height, e.width), (4, 224, 224));
    let sides: Vec<usize> = cache.level_maps().iter().map(|m| m.height).collect();
    assert_eq!(sides, vec![2, 4, 8, 16, 32, 64, 128, 224]);
    assert!(cache.level_maps().iter().all(|m| m.height == m.width));

    let nodes = model.backbone().project_features(&model.params, &cache.level_maps()).unwrap();
    let levels: Vec<Level> = nodes.per_level.iter().map(|(l, _)| *l).collect();
    let mut expect: Vec<Level> = (1..=7).map(Level::Aux).collect();
    expect.push(Level::Main);
    assert_eq!(levels, expect);
    for ((_, m), n) in nodes.per_level.iter().zip([4, 16, 64, 256, 1024, 4096, 16384, 224 * 224]) {
        assert_eq!(m.rows, n);
    }
    assert_eq!(nodes.stacked().rows, model.graph().node_count());
}

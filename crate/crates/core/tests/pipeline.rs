use msvlad_core::io::load_manifest;
use msvlad_core::netvlad::{kmeans::DEFAULT_MAX_ITERS, sample_columns};
use msvlad_core::synthetic::{SceneDataset, SceneSpec, SplitPlan};
use msvlad_core::{
    build_index, evaluate, kmeans_init, train, Checkpoint, PoolingMode, TrainConfig, TrainingSet,
};

fn dataset() -> SceneDataset {
    let spec = SceneSpec {
        classes: 6,
        images_per_class: 8,
        height: 7,
        width: 7,
        channels: 4,
        seed: 11,
        ..SceneSpec::default()
    };
    SceneDataset::generate(
        &spec,
        SplitPlan {
            query: 1,
            gallery: 3,
        },
    )
    .unwrap()
}

#[test]
fn files_and_memory_agree() {
    let ds = dataset();
    let dir = tempfile::tempdir().unwrap();
    let manifest = load_manifest(ds.write(dir.path(), 336).unwrap()).unwrap();
    let from_files = TrainingSet::from_manifest(&manifest, 336, PoolingMode::Both).unwrap();
    let in_memory = ds.training_set(PoolingMode::Both).unwrap();
    assert_eq!(from_files.ids, in_memory.ids);
    assert_eq!(from_files.labels, in_memory.labels);
    assert_eq!(from_files.columns, in_memory.columns);

    let params = kmeans_init(
        &sample_columns(&in_memory.columns, 1000, 0).unwrap(),
        4,
        0,
        DEFAULT_MAX_ITERS,
    )
    .unwrap();
    let index = build_index(&manifest, &params, PoolingMode::Both, &[336], false).unwrap();
    let report = evaluate(&manifest, &index, &params, PoolingMode::Both, &[336], false).unwrap();
    assert_eq!(report, ds.evaluate(&params, PoolingMode::Both).unwrap());
    assert_eq!(report.query_count(), 6);
}

#[test]
fn trained_checkpoint_round_trips() {
    let ds = dataset();
    let data = ds.training_set(PoolingMode::Two).unwrap();
    let params = kmeans_init(
        &sample_columns(&data.columns, 1000, 1).unwrap(),
        3,
        1,
        DEFAULT_MAX_ITERS,
    )
    .unwrap();
    let mut config = TrainConfig {
        lr_initial: 1e-2,
        lr_final: 1e-3,
        iterations: 12,
        pooling: PoolingMode::Two,
        ..TrainConfig::default()
    };
    config.mining.mining_batch_size = data.len();
    config.mining.num_classes = 6;
    config.mining.mini_batch_size = 4;
    let mut saved = 0;
    let (logs, checkpoint) = train(&data, config, params, |_| {
        saved += 1;
        Ok(())
    })
    .unwrap();
    assert_eq!(saved, 1);
    assert_eq!(logs.len(), 12);
    assert!(logs.iter().all(|l| l.loss >= 0.0));

    let dir = tempfile::tempdir().unwrap();
    checkpoint.save(dir.path()).unwrap();
    assert_eq!(Checkpoint::load(dir.path()).unwrap(), checkpoint);
    assert_eq!(checkpoint.meta.iteration, 12);
}

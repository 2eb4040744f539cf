use tilevote::datasets::{generate_synthetic, SynthConfig, TileSet};
use tilevote::model::{ModelConfig, Network};
use tilevote::tiling::tile_image;
use tilevote::trainer::{train, TrainConfig};
use tilevote::GridSpec;

fn two_class_tiles(cfg: &SynthConfig, indices: std::ops::Range<usize>, size: usize) -> TileSet {
    let tiles = generate_synthetic(cfg)
        .unwrap()
        .into_iter()
        .filter(|im| im.class == 0 || im.class == 3)
        .filter(|im| indices.contains(&im.source_id.rsplit('_').next().unwrap().parse::<usize>().unwrap()))
        .flat_map(|im| tile_image(&im.image, GridSpec::new(2, 2).unwrap(), &im.source_id, im.class).unwrap())
        .collect();
    TileSet::from_tiles(tiles, size).unwrap()
}

#[test]
fn train_loss_strictly_decreases_on_separable_classes() {
    // Default class textures: amplitudes 0.05 and 0.20 for classes 0 and 3.
    let synth = SynthConfig {
        height: 64,
        width: 64,
        images_per_class: 14,
        seed: 5,
        ..SynthConfig::default()
    };
    let train_set = two_class_tiles(&synth, 0..10, 16);
    let val_set = two_class_tiles(&synth, 10..14, 16);
    assert_eq!((train_set.len(), val_set.len()), (80, 32));

    let model = ModelConfig {
        input_size: 16,
        stem_kernel: 3,
        stem_stride: 1,
        widths: vec![4, 8],
        blocks_per_stage: 1,
        embedding_dim: 16,
        num_classes: 4,
    };
    let cfg = TrainConfig {
        max_epochs: 5,
        early_stopping: 10,
        seed: 9,
        ..TrainConfig::default()
    };
    let out = train(Network::new(model, 1).unwrap(), &train_set, &val_set, &cfg, None).unwrap();
    let losses: Vec<f64> = out.logs.iter().map(|l| l.train_loss).collect();
    assert_eq!(losses.len(), 5);
    assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");

    let best = out.logs.iter().map(|l| l.val_accuracy).fold(0.0, f64::max);
    assert_eq!(out.best_meta.val_accuracy, best);
}

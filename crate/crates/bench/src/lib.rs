//! Fixtures shared by the benchmarks.

use pumkit::data::{generate_split, GroupSpec};
use pumkit::train::{ModelDims, RelationModel};
use pumkit::{DataConfig, DatasetSplit, RngState};

/// A small dataset on the default benchmark with features of width `d`.
pub fn dataset(d: usize, train_scenes: usize, seed: u64) -> DatasetSplit {
    let mut cfg = DataConfig {
        train_scenes,
        val_scenes: 0,
        test_scenes: train_scenes,
        groups: GroupSpec {
            synonymy: 3,
            hyponymy: 2,
            multiview: 2,
        },
        ..DataConfig::default()
    };
    cfg.scene.feature_dim = d;
    generate_split(&cfg, seed).expect("valid fixture config")
}

/// Freshly initialized model matching [`dataset`].
pub fn model(d: usize, with_pum: bool, seed: u64) -> RelationModel {
    let dims = ModelDims::for_features(d, DataConfig::default().num_classes);
    RelationModel::init(&dims, with_pum, pumkit::pum::DEFAULT_VARIANCE_FLOOR, &mut RngState::seed(seed))
}

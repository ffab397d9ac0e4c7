//! Shared inputs for the hot-path benchmarks.

use jointdrive::model::{CaadModel, ModelConfig};
use jointdrive::numerics::ParamStore;
use jointdrive::scene::{generate_set, GeneratorConfig, ScenarioTag};
use jointdrive::trainer::{prepare_scenes, PreparedScene, TrainConfig};
use jointdrive::Scene;

/// A handful of scenes covering every scenario template.
pub fn scenes(count: usize) -> Vec<Scene> {
    generate_set(&GeneratorConfig {
        seed: 99,
        count,
        tags: ScenarioTag::ALL.to_vec(),
    })
    .expect("generator")
}

pub fn prepared(count: usize) -> Vec<PreparedScene> {
    let cfg = TrainConfig::default();
    prepare_scenes(&scenes(count), cfg.ego_cue).expect("prepare")
}

/// Freshly initialised default-size model.
pub fn model(joint: bool) -> (CaadModel, ParamStore) {
    CaadModel::init(ModelConfig { joint, ..ModelConfig::default() }, 0).expect("init")
}

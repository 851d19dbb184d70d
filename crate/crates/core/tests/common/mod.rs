#![allow(dead_code)]

use lain_core::config::RunConfig;
use lain_core::dataset::{generate_records, Record};
use lain_core::model::Lain;
use lain_core::Exec;

pub fn config(overrides: &[&str]) -> RunConfig {
    let owned: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
    RunConfig::resolve("", &owned).expect("valid overrides")
}

/// Two-layer model on the default toy space; fast enough for property tests.
pub fn small_config() -> RunConfig {
    config(&["layers=2"])
}

pub fn model(cfg: &RunConfig) -> Lain {
    Lain::new(cfg.model(), cfg.space().unwrap()).unwrap()
}

pub fn records(cfg: &RunConfig, n: usize, seed: u64) -> Vec<Record> {
    generate_records(&cfg.scene_spec().unwrap(), &cfg.detector(), n, seed, Exec::Sequential).unwrap()
}

/// First record with at least one human-object pair and one interaction.
pub fn interacting_record(cfg: &RunConfig, seed: u64) -> Record {
    let human = cfg.space().unwrap().human();
    records(cfg, 50, seed)
        .into_iter()
        .find(|r| !r.scene.instances.is_empty() && r.detections.iter().filter(|d| d.class == human).count() >= 1 && r.detections.len() >= 3)
        .expect("some scene interacts")
}

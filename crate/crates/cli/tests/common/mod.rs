#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use vade_cli::config::AppConfig;
use vade_core::diffusion::ModelConfig;
use vade_core::phantom::PhantomClass;

pub const SIZE: usize = 64;

/// A configuration small enough to train and sample in well under a second.
pub fn tiny_config() -> AppConfig {
    let mut c = AppConfig::default();
    c.data.spec.image_size = SIZE;
    c.data.train_mix = BTreeMap::from([
        (PhantomClass::Healthy, 3),
        (PhantomClass::Opacity, 1),
        (PhantomClass::Haze, 1),
        (PhantomClass::Pneumonia, 1),
    ]);
    c.data.test_per_class = 2;
    c.model = ModelConfig::tiny();
    c.model.unet.control_channels = 0;
    c.train.normal_steps = 3;
    c.train.disease_steps = 1;
    c.train.lr = 1e-3;
    c.generation.steps = 8;
    c.induce.steps = 8;
    c.eval.generation.steps = 8;
    c.sweep.strengths = vec![0.3, 0.6];
    c.sweep.guidances = vec![1.0, 2.0, 3.0];
    c
}

pub fn write_config(dir: &Path, cfg: &AppConfig) -> PathBuf {
    let p = dir.join("config.json");
    std::fs::write(&p, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    p
}

pub fn run(args: &[&str]) -> i32 {
    vade_cli::main_with_args(
        std::iter::once("vade")
            .chain(args.iter().copied())
            .map(String::from),
    )
}

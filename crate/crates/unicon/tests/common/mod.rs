#![allow(dead_code)]

use std::path::Path;

use unicon::config::RunConfig;
use unicon_core::backbone::BackboneConfig;
use unicon_core::dit::DitConfig;

/// A DiT small enough that a handful of steps take well under a second.
pub fn tiny_dit() -> BackboneConfig {
    BackboneConfig::Dit(DitConfig {
        patch: 8,
        hidden: 16,
        heads: 2,
        blocks: 2,
        time_dim: 16,
        label_tokens: 2,
        mlp_ratio: 2,
        ..DitConfig::default()
    })
}

pub fn tiny_config(out: &Path) -> RunConfig {
    let mut cfg = RunConfig {
        backbone: tiny_dit(),
        ..RunConfig::default()
    };
    cfg.steps = 6;
    cfg.batch = 2;
    cfg.base_steps = 3;
    cfg.sampler_steps = 3;
    cfg.log_every = 2;
    cfg.eval_count = 2;
    cfg.seed = 5;
    cfg.out_dir = out.to_path_buf();
    cfg
}

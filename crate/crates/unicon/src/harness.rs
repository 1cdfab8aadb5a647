//! Training, base pre-training, sampling and evaluation on top of the core
//! crate, with the file artifacts each command leaves behind.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, ensure, Context, Result};
use unicon_core::adapter::{build_adapter, AdaptedModel};
use unicon_core::backbone::{BackboneConfig, ConditioningInputs, DiffusionModel, EpsModel};
use unicon_core::data::{make_batch, make_pair, sample_train_seeds, test_seeds, ConditionKind, Image, SamplePair};
use unicon_core::metrics::{condition_consistency, mean_std, psnr, ssim, MeanStd};
use unicon_core::optim::{AdamW, AdamWConfig};
use unicon_core::schedule::{build_schedule, NoiseSchedule, ScheduleKind};
use unicon_core::train::{sample_loop, to_unit, train_step};
use unicon_core::{ParamStore, Rng, Tape, Tensor};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::RunConfig;
use crate::logs::{EvalSummary, MetricsLog, MetricsRecord};

pub const DIFFUSION_STEPS: usize = 1000;
/// Every run shares one base, so its seed does not follow the run seed.
pub const BASE_SEED: u64 = 0;
pub const BASE_LR: f32 = 1e-3;
const ADAPTER_STREAM: u64 = 0xADA7;
const DATA_STREAM: u64 = 0xDA7A;
const NOISE_STREAM: u64 = 0x9015E;
const SAMPLE_STREAM: u64 = 0x5A3B1E;

pub const CHECKPOINT_FILE: &str = "checkpoint.uckp";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CONFIG_FILE: &str = "run.cfg";
pub const BASE_FILE: &str = "base.uckp";

pub fn schedule() -> NoiseSchedule {
    build_schedule(DIFFUSION_STEPS, ScheduleKind::Linear).expect("positive step count")
}

/// A bare backbone or an adapter around a frozen one.
#[derive(Clone, Debug)]
pub enum Model {
    Bare(DiffusionModel),
    Adapted(AdaptedModel),
}

impl EpsModel for Model {
    fn params(&self) -> &ParamStore {
        match self {
            Model::Bare(m) => m.params(),
            Model::Adapted(m) => m.params(),
        }
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        match self {
            Model::Bare(m) => m.params_mut(),
            Model::Adapted(m) => m.params_mut(),
        }
    }

    fn predict(&self, tape: &mut Tape, x_t: &Tensor, cond: &ConditioningInputs) -> unicon_core::Result<Tensor> {
        match self {
            Model::Bare(m) => m.predict(tape, x_t, cond),
            Model::Adapted(m) => m.predict(tape, x_t, cond),
        }
    }
}

/// The knobs of one optimization loop.
#[derive(Clone, Copy, Debug)]
pub struct LoopSpec {
    pub steps: usize,
    pub batch: usize,
    pub optimizer: AdamWConfig,
    pub seed: u64,
    pub log_every: usize,
    /// Condition images fed with each batch; `None` trains without them.
    pub task: Option<ConditionKind>,
}

/// Runs `spec.steps` AdamW steps and returns the loss of every step. Step
/// `s` draws its data and noise from streams keyed by `(seed, s)` only.
pub fn run_training<M: EpsModel>(
    model: &mut M,
    spec: &LoopSpec,
    mut log: Option<&mut MetricsLog>,
    mut progress: Option<&mut (dyn FnMut(&MetricsRecord) + '_)>,
) -> Result<Vec<f32>> {
    ensure!(spec.batch > 0 && spec.log_every > 0, "batch and log interval must be positive");
    let sched = schedule();
    let mut opt = AdamW::new(spec.optimizer, model.params());
    let root = Rng::new(spec.seed);
    let start = Instant::now();
    let mut losses = Vec::with_capacity(spec.steps);
    for step in 1..=spec.steps {
        let step_rng = root.split(step as u64);
        let seeds = sample_train_seeds(&mut step_rng.split(DATA_STREAM), spec.batch);
        let batch = make_batch(&seeds, spec.task)?;
        let stats = train_step(model, &mut opt, &batch, &sched, &step_rng.split(NOISE_STREAM))?;
        if !stats.loss.is_finite() {
            bail!("loss became {} at step {step}", stats.loss);
        }
        losses.push(stats.loss);
        if step % spec.log_every == 0 || step == spec.steps {
            let rec = MetricsRecord {
                step,
                loss: stats.loss,
                grad_norm: stats.grad_norm,
                elapsed_ms: start.elapsed().as_secs_f64() * 1e3,
            };
            if let Some(log) = log.as_deref_mut() {
                log.append(&rec)?;
            }
            if let Some(f) = progress.as_deref_mut() {
                f(&rec);
            }
        }
    }
    Ok(losses)
}

/// A freshly initialized base with the shared base seed.
pub fn fresh_base(backbone: BackboneConfig) -> Result<DiffusionModel> {
    Ok(DiffusionModel::new(backbone, BASE_SEED)?)
}

/// Trains the bare backbone on unconditioned (label-only) batches.
pub fn pretrain_base(
    backbone: BackboneConfig,
    steps: usize,
    batch: usize,
    log: Option<&mut MetricsLog>,
    progress: Option<&mut (dyn FnMut(&MetricsRecord) + '_)>,
) -> Result<DiffusionModel> {
    let mut base = fresh_base(backbone)?;
    let spec = LoopSpec {
        steps,
        batch,
        optimizer: AdamWConfig {
            lr: BASE_LR,
            ..AdamWConfig::default()
        },
        seed: BASE_SEED,
        log_every: crate::config::DEFAULT_LOG_EVERY,
        task: None,
    };
    run_training(&mut base, &spec, log, progress)?;
    Ok(base)
}

/// Where `cfg` expects its base checkpoint.
pub fn base_path(cfg: &RunConfig) -> PathBuf {
    cfg.base_checkpoint.clone().unwrap_or_else(|| cfg.out_dir.join(BASE_FILE))
}

pub fn load_base(backbone: BackboneConfig, path: &Path) -> Result<DiffusionModel> {
    let mut base = fresh_base(backbone)?;
    load_checkpoint(path, &mut base.store).with_context(|| format!("loading base {}", path.display()))?;
    Ok(base)
}

/// Loads the cached base, pre-training and caching it first when absent.
pub fn load_or_pretrain_base(
    cfg: &RunConfig,
    progress: Option<&mut (dyn FnMut(&MetricsRecord) + '_)>,
) -> Result<DiffusionModel> {
    let path = base_path(cfg);
    if path.exists() {
        return load_base(cfg.backbone, &path);
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let mut log = MetricsLog::create(path.with_extension("metrics.jsonl"))?;
    let base = pretrain_base(cfg.backbone, cfg.base_steps, cfg.batch, Some(&mut log), progress)?;
    log.finish()?;
    // Write then rename so an interrupted run never leaves a partial cache.
    let tmp = path.with_extension("uckp.tmp");
    save_checkpoint(&tmp, &base.store)?;
    fs::rename(&tmp, &path)?;
    Ok(base)
}

/// Wraps `base` as `cfg` asks: the bare model, or a fresh adapter whose
/// initialization depends on the run seed.
pub fn build_model(cfg: &RunConfig, base: DiffusionModel) -> Result<Model> {
    Ok(match cfg.adapter {
        None => Model::Bare(base),
        Some(a) => {
            let mut rng = Rng::new(cfg.seed).split(ADAPTER_STREAM);
            Model::Adapted(build_adapter(&base, a, &mut rng)?)
        }
    })
}

/// Rebuilds the structure `cfg` describes and fills it from `checkpoint`.
pub fn load_model(cfg: &RunConfig, checkpoint: &Path) -> Result<Model> {
    let mut model = build_model(cfg, fresh_base(cfg.backbone)?)?;
    load_checkpoint(checkpoint, model.params_mut()).with_context(|| format!("loading {}", checkpoint.display()))?;
    Ok(model)
}

pub struct TrainOutcome {
    pub model: Model,
    pub losses: Vec<f32>,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
}

/// The `train` command: base, model, loop, checkpoint. Writes the config,
/// metrics log and checkpoint into `cfg.out_dir`.
pub fn train(cfg: &RunConfig, mut progress: Option<&mut (dyn FnMut(&MetricsRecord) + '_)>) -> Result<TrainOutcome> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.out_dir).with_context(|| format!("creating {}", cfg.out_dir.display()))?;
    cfg.save(cfg.out_dir.join(CONFIG_FILE))?;
    let base = match cfg.adapter {
        Some(_) => load_or_pretrain_base(cfg, progress.as_deref_mut())?,
        None => fresh_base(cfg.backbone)?,
    };
    let mut model = build_model(cfg, base)?;
    let metrics = cfg.out_dir.join(METRICS_FILE);
    let mut log = MetricsLog::create(&metrics)?;
    let spec = LoopSpec {
        steps: cfg.steps,
        batch: cfg.batch,
        optimizer: cfg.optimizer,
        seed: cfg.seed,
        log_every: cfg.log_every,
        task: cfg.adapter.map(|_| cfg.task),
    };
    let losses = run_training(&mut model, &spec, Some(&mut log), progress)?;
    log.finish()?;
    let checkpoint = cfg.out_dir.join(CHECKPOINT_FILE);
    save_checkpoint(&checkpoint, model.params())?;
    Ok(TrainOutcome {
        model,
        losses,
        checkpoint,
        metrics,
    })
}

/// One sample in `[0, 1]` for a single condition image.
pub fn sample_image(
    model: &dyn EpsModel,
    cond: Option<&Image>,
    label: usize,
    image: usize,
    steps: usize,
    rng: &mut Rng,
) -> Result<Image> {
    let mut inputs = ConditioningInputs::new(vec![0], vec![label]);
    if let Some(c) = cond {
        ensure!(c.width == image && c.height == image, "condition is {}x{}, model expects {image}x{image}", c.width, c.height);
        inputs.cond_image = Some(c.to_tensor());
    }
    let x = sample_loop(model, &inputs, &[1, 1, image, image], &schedule(), steps, rng)?;
    Ok(Image::from_batch(&to_unit(&x))?.remove(0))
}

/// The noise stream for one item; keyed by the item, not its position.
pub fn item_rng(seed: u64, item: u64) -> Rng {
    Rng::new(seed).split(SAMPLE_STREAM).split(item)
}

/// Samples conditioned on the test pair of `pair_seed`.
pub fn sample_pair(model: &Model, cfg: &RunConfig, pair: &SamplePair, seed: u64) -> Result<Image> {
    let cond = matches!(model, Model::Adapted(_)).then_some(&pair.cond);
    sample_image(
        model,
        cond,
        pair.label,
        cfg.backbone.image(),
        cfg.sampler_steps,
        &mut item_rng(seed, pair.seed),
    )
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalScores {
    pub samples: usize,
    pub consistency: MeanStd,
    pub psnr: MeanStd,
    pub ssim: MeanStd,
}

/// Scores `generate` over `pairs`: condition consistency, and PSNR/SSIM
/// against ground truth.
pub fn evaluate_with(
    pairs: &[SamplePair],
    kind: ConditionKind,
    mut generate: impl FnMut(&SamplePair) -> Result<Image>,
) -> Result<EvalScores> {
    ensure!(!pairs.is_empty(), "evaluation needs at least one test sample");
    let (mut cc, mut ps, mut ss) = (Vec::new(), Vec::new(), Vec::new());
    for p in pairs {
        let g = generate(p)?;
        cc.push(condition_consistency(&g, &p.cond, kind)?);
        ps.push(psnr(&g, &p.x0, 1.0)?);
        ss.push(ssim(&g, &p.x0)?);
    }
    Ok(EvalScores {
        samples: pairs.len(),
        consistency: mean_std(&cc),
        psnr: mean_std(&ps),
        ssim: mean_std(&ss),
    })
}

pub fn test_pairs(count: usize, kind: ConditionKind) -> Vec<SamplePair> {
    test_seeds(count).into_iter().map(|s| make_pair(s, kind)).collect()
}

/// Samples the first `count` test conditions with the run seed.
pub fn evaluate(model: &Model, cfg: &RunConfig, count: usize) -> Result<EvalScores> {
    let pairs = test_pairs(count, cfg.task);
    evaluate_with(&pairs, cfg.task, |p| sample_pair(model, cfg, p, cfg.seed))
}

pub fn summary(cfg: &RunConfig, scores: &EvalScores) -> EvalSummary {
    EvalSummary {
        config_hash: cfg.hash(),
        task: cfg.task.name().to_string(),
        samples: scores.samples,
        sampler_steps: cfg.sampler_steps,
        condition_consistency: scores.consistency.into(),
        psnr: scores.psnr.into(),
        ssim: scores.ssim.into(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracle_generator_scores_perfectly() {
        for kind in ConditionKind::ALL {
            let pairs = test_pairs(4, kind);
            let s = evaluate_with(&pairs, kind, |p| Ok(p.x0.clone())).unwrap();
            assert_eq!(s.psnr.mean, 99.0);
            assert_eq!(s.ssim.mean, 1.0);
            let expect = if kind == ConditionKind::Edge { 1.0 } else { 99.0 };
            assert_eq!(s.consistency.mean, expect, "{}", kind.name());
        }
    }

    #[test]
    fn empty_test_set_rejected() {
        assert!(evaluate_with(&[], ConditionKind::Sr4x, |p| Ok(p.x0.clone())).is_err());
    }
}

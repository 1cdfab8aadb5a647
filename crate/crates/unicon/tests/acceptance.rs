//! Acceptance suite. Runs the eight criteria in order and prints one
//! `PASS`, `FAIL` or `WARN` line for each, followed by indented details.
//! The process exits nonzero when a hard criterion fails; criterion 6 is
//! soft and only warns.
//!
//! `ACCEPTANCE_ONLY=1,4,8` restricts a run to the listed criteria.

mod common;

use std::collections::BTreeSet;
use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use anyhow::Result;
use unicon::checkpoint::{self, CheckpointError};
use unicon::config::RunConfig;
use unicon::harness;
use unicon::pgm;
use unicon_core::adapter::{build_adapter, AdaptedModel, AdapterConfig, AdapterTopology, FlowMode};
use unicon_core::backbone::{BackboneConfig, BackboneKind, ConditioningInputs, DiffusionModel, EpsModel};
use unicon_core::connector::ConnectorKind;
use unicon_core::data::{make_batch, sample_train_seeds, ConditionKind};
use unicon_core::dit::DitConfig;
use unicon_core::gradcheck::finite_difference_check;
use unicon_core::optim::{AdamW, AdamWConfig};
use unicon_core::profiler::{measure_round, CostReport, ProfileSpec, ProfileTarget};
use unicon_core::train::{diffusion_loss_with, draw_noise, sample_loop, train_step, Batch};
use unicon_core::unet::UnetConfig;
use unicon_core::{ComponentTag, ParamId, ParamStore, Primitive, Rng, Tape, Tensor};

struct Verdict {
    pass: bool,
    summary: String,
    notes: Vec<String>,
    /// Time spent building shared fixtures, not counted against the budget.
    fixture: Duration,
}

impl Verdict {
    fn new(pass: bool, summary: String, notes: Vec<String>) -> Self {
        Verdict {
            pass,
            summary,
            notes,
            fixture: Duration::ZERO,
        }
    }
}

struct Criterion {
    id: u32,
    name: &'static str,
    budget: Option<Duration>,
    soft: bool,
    run: fn() -> Result<Verdict>,
}

const fn minutes(m: u64) -> Option<Duration> {
    Some(Duration::from_secs(m * 60))
}

const CRITERIA: [Criterion; 8] = [
    Criterion {
        id: 1,
        name: "zero-init identity",
        budget: Some(Duration::from_secs(60)),
        soft: false,
        run: zero_init_identity,
    },
    Criterion {
        id: 2,
        name: "unidirectionality",
        budget: minutes(5),
        soft: false,
        run: unidirectionality,
    },
    Criterion {
        id: 3,
        name: "gradient correctness",
        budget: minutes(5),
        soft: false,
        run: gradient_correctness,
    },
    Criterion {
        id: 4,
        name: "cost ratios",
        budget: minutes(2),
        soft: false,
        run: cost_ratios,
    },
    Criterion {
        id: 5,
        name: "training effectiveness",
        budget: minutes(60),
        soft: false,
        run: training_effectiveness,
    },
    Criterion {
        id: 6,
        name: "ablation direction",
        budget: None,
        soft: true,
        run: ablation_direction,
    },
    Criterion {
        id: 7,
        name: "determinism and serialization",
        budget: minutes(5),
        soft: false,
        run: determinism,
    },
    Criterion {
        id: 8,
        name: "schedule and sampler",
        budget: minutes(1),
        soft: false,
        run: schedule_and_sampler,
    },
];

fn selected() -> Option<BTreeSet<u32>> {
    let raw = std::env::var("ACCEPTANCE_ONLY").ok()?;
    Some(raw.split(',').filter_map(|s| s.trim().parse().ok()).collect())
}

fn main() -> ExitCode {
    let only = selected();
    let mut hard_failures = 0;
    let mut warnings = 0;
    for c in &CRITERIA {
        if only.as_ref().is_some_and(|s| !s.contains(&c.id)) {
            continue;
        }
        eprintln!("running #{} {} ...", c.id, c.name);
        let start = Instant::now();
        let verdict = (c.run)().unwrap_or_else(|e| Verdict::new(false, format!("error: {e:#}"), Vec::new()));
        let elapsed = start.elapsed();
        let timed = elapsed.saturating_sub(verdict.fixture);
        let mut pass = verdict.pass;
        let mut summary = verdict.summary;
        if let Some(budget) = c.budget {
            if timed > budget {
                pass = false;
                summary.push_str(&format!("; took {:.0} s, over the {} s budget", timed.as_secs_f64(), budget.as_secs()));
            }
        }
        let status = match (pass, c.soft) {
            (true, _) => "PASS",
            (false, true) => "WARN",
            (false, false) => "FAIL",
        };
        let fixture = if verdict.fixture.is_zero() {
            String::new()
        } else {
            format!(" + {:.1} s fixture", verdict.fixture.as_secs_f64())
        };
        println!("{status} #{} {}: {summary} [{:.1} s{fixture}]", c.id, c.name, timed.as_secs_f64());
        for n in &verdict.notes {
            println!("    {n}");
        }
        match (pass, c.soft) {
            (false, false) => hard_failures += 1,
            (false, true) => warnings += 1,
            _ => {}
        }
    }
    println!("acceptance: {hard_failures} hard failure(s), {warnings} warning(s)");
    if hard_failures > 0 {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}

// ---------------------------------------------------------------------------
// Shared helpers

fn small_dit() -> BackboneConfig {
    BackboneConfig::Dit(DitConfig {
        image: 8,
        hidden: 16,
        blocks: 4,
        ..DitConfig::default()
    })
}

fn small_unet() -> BackboneConfig {
    BackboneConfig::Unet(UnetConfig {
        image: 8,
        channels: 1,
        widths: [4, 8, 8],
        groups: 2,
        time_dim: 16,
        emb_dim: 16,
        classes: 8,
    })
}

/// Fills every all-zero parameter selected by `pick` with `U[-scale, scale]`.
/// Zero-initialized output layers would otherwise make many comparisons
/// trivially exact.
fn randomize_zeros(store: &mut ParamStore, rng: &mut Rng, scale: f32, pick: impl Fn(&unicon_core::Parameter) -> bool) {
    let ids: Vec<ParamId> = store
        .iter()
        .filter(|(_, p)| pick(p) && p.value.iter().all(|v| *v == 0.0))
        .map(|(id, _)| id)
        .collect();
    for id in ids {
        let n = store.get(id).len();
        let v = (0..n).map(|_| rng.uniform_in(-scale, scale)).collect();
        store.set_value(id, v).expect("same length");
    }
}

fn random_base(config: BackboneConfig, seed: u64) -> Result<DiffusionModel> {
    let mut base = DiffusionModel::new(config, seed)?;
    randomize_zeros(&mut base.store, &mut Rng::new(seed).split(1), 0.05, |_| true);
    Ok(base)
}

/// Random noisy input, condition image, timesteps and labels.
fn probe_inputs(config: &BackboneConfig, batch: usize, seed: u64) -> Result<(Tensor, ConditioningInputs)> {
    let mut rng = Rng::new(seed);
    let (s, c) = (config.image(), config.channels());
    let x = Tensor::new(&[batch, c, s, s], rng.normal_vec(batch * c * s * s))?;
    let cond = (0..batch * s * s).map(|_| rng.uniform()).collect();
    let cond = Tensor::new(&[batch, 1, s, s], cond)?;
    let ts = (0..batch).map(|_| rng.below(harness::DIFFUSION_STEPS as u64) as usize).collect();
    let labels = (0..batch).map(|_| rng.below(config.classes() as u64) as usize).collect();
    Ok((x, ConditioningInputs::new(ts, labels).with_cond(cond)))
}

fn mean(v: &[f32]) -> f64 {
    v.iter().map(|&x| x as f64).sum::<f64>() / v.len() as f64
}

fn target_tmp() -> PathBuf {
    PathBuf::from(env!("CARGO_TARGET_TMPDIR"))
}

// ---------------------------------------------------------------------------
// 1. Zero-init identity

/// Variants outside the four criterion axes, reported for information: DiT
/// controllers without cross-attention, and the unidirectional decoder that
/// drops the base decoder.
fn extra_variants(kind: BackboneKind) -> Vec<AdapterConfig> {
    let mut out = Vec::new();
    if kind == BackboneKind::Dit {
        for cfg in AdapterConfig::all_valid(kind) {
            out.push(AdapterConfig {
                keep_cross_attention: false,
                ..cfg
            });
            let dropped = AdapterConfig {
                drop_base_decoder: true,
                ..cfg
            };
            if dropped.validate().is_ok() {
                out.push(dropped);
            }
        }
    }
    out
}

fn describe(cfg: &AdapterConfig) -> String {
    let mut s = format!("{} {} {}", cfg.backbone.name(), cfg.label(), cfg.connector.name());
    if !cfg.keep_cross_attention {
        s.push_str(" no-xattn");
    }
    if cfg.drop_base_decoder {
        s.push_str(" drop-decoder");
    }
    s
}

fn identity_holds(cfg: &AdapterConfig, got: &Tensor, want: &Tensor) -> bool {
    match cfg.flow {
        FlowMode::Bidirectional => got.bit_eq(want),
        FlowMode::Unidirectional => got.max_abs_diff(want) <= 1e-5,
    }
}

fn zero_init_identity() -> Result<Verdict> {
    let mut checked = 0;
    let mut failures = Vec::new();
    let mut info = Vec::new();
    let mut excluded = 0;
    let mut worst_uni = 0.0f32;
    for kind in [BackboneKind::Dit, BackboneKind::Unet] {
        let config = BackboneConfig::default_for(kind);
        let base = random_base(config, 3)?;
        let (x, cond) = probe_inputs(&config, 2, 4)?;
        let want = base.predict(&mut Tape::inference(), &x, &cond)?;
        let run = |cfg: AdapterConfig| -> Result<Tensor> {
            let model = build_adapter(&base, cfg, &mut Rng::new(5))?;
            Ok(model.forward(&mut Tape::inference(), &x, &cond)?)
        };
        for cfg in AdapterConfig::all_valid(kind) {
            let got = run(cfg)?;
            let diff = got.max_abs_diff(&want);
            if cfg.known_unstable() {
                excluded += 1;
                info.push(format!("excluded as known-unstable: {} (max diff {diff:.3e})", describe(&cfg)));
                continue;
            }
            checked += 1;
            if cfg.flow == FlowMode::Unidirectional {
                worst_uni = worst_uni.max(diff);
            }
            if !identity_holds(&cfg, &got, &want) {
                failures.push(format!("{} differs by {diff:.3e}", describe(&cfg)));
            }
        }
        for cfg in extra_variants(kind) {
            let got = run(cfg)?;
            let verdict = if identity_holds(&cfg, &got, &want) { "identity" } else { "not an identity" };
            info.push(format!("extra {}: {verdict} (max diff {:.3e})", describe(&cfg), got.max_abs_diff(&want)));
        }
    }
    let mut notes = failures.clone();
    notes.push(format!("largest unidirectional difference {worst_uni:.3e}"));
    notes.extend(info);
    Ok(Verdict::new(
        failures.is_empty(),
        format!(
            "{}/{checked} valid configurations reproduce the base at init (bidirectional bit-exact, unidirectional within 1e-5); {excluded} known-unstable skip-layer unidirectional configurations excluded",
            checked - failures.len()
        ),
        notes,
    ))
}

// ---------------------------------------------------------------------------
// 2. Unidirectionality

#[derive(Debug, Default)]
struct FlowStats {
    base_unchanged: bool,
    adapter_moved: bool,
    base_grad_entries: usize,
    base_saved: (u64, u64),
    base_bp_flops: (u64, u64),
}

fn train_flow(preset: &str, base: &DiffusionModel, steps: usize, batch: usize) -> Result<FlowStats> {
    let cfg = AdapterConfig::preset(preset, BackboneKind::Dit)?;
    let mut model = build_adapter(base, cfg, &mut Rng::new(7))?;
    let before: Vec<(ComponentTag, Vec<u32>)> = model
        .store
        .iter()
        .map(|(_, p)| (p.tag, p.value.iter().map(|v| v.to_bits()).collect()))
        .collect();
    let mut opt = AdamW::new(
        AdamWConfig {
            lr: 1e-3,
            ..AdamWConfig::default()
        },
        &model.store,
    );
    let sched = harness::schedule();
    let mut data = Rng::new(8);
    let mut stats = FlowStats {
        base_saved: (u64::MAX, 0),
        base_bp_flops: (u64::MAX, 0),
        ..FlowStats::default()
    };
    for step in 0..steps {
        let seeds = sample_train_seeds(&mut data, batch);
        let b = make_batch(&seeds, Some(ConditionKind::Sr4x))?;
        let s = train_step(&mut model, &mut opt, &b, &sched, &Rng::new(9).split(step as u64))?;
        stats.base_grad_entries += s.grads.iter().filter(|(_, _, tag, _)| *tag == ComponentTag::Base).count();
        let t = s.tape.get(ComponentTag::Base);
        stats.base_saved = (stats.base_saved.0.min(t.saved_bytes), stats.base_saved.1.max(t.saved_bytes));
        stats.base_bp_flops = (stats.base_bp_flops.0.min(t.bp_flops), stats.base_bp_flops.1.max(t.bp_flops));
    }
    stats.base_unchanged = true;
    for ((_, p), (tag, bits)) in model.store.iter().zip(&before) {
        let same = p.value.iter().map(|v| v.to_bits()).eq(bits.iter().copied());
        if *tag == ComponentTag::Base {
            stats.base_unchanged &= same;
        } else if !same {
            stats.adapter_moved = true;
        }
    }
    Ok(stats)
}

fn unidirectionality() -> Result<Verdict> {
    let base = DiffusionModel::new(BackboneConfig::default_for(BackboneKind::Dit), 2)?;
    let (steps, batch) = (50, 4);
    let uc = train_flow("unicon-full", &base, steps, batch)?;
    let cn = train_flow("controlnet-full", &base, steps, batch)?;

    let uc_ok = uc.base_unchanged
        && uc.adapter_moved
        && uc.base_grad_entries == 0
        && uc.base_saved.1 == 0
        && uc.base_bp_flops.1 == 0;
    let cn_ok = cn.base_unchanged && cn.adapter_moved && cn.base_saved.0 > 0 && cn.base_bp_flops.0 > 0;
    let notes = vec![
        format!(
            "unicon-full: base bit-identical {}, adapter trained {}, base gradient entries {}, base saved bytes per step {}..{}, base bp flops {}..{}",
            uc.base_unchanged, uc.adapter_moved, uc.base_grad_entries, uc.base_saved.0, uc.base_saved.1, uc.base_bp_flops.0, uc.base_bp_flops.1
        ),
        format!(
            "controlnet-full: base bit-identical {}, adapter trained {}, base gradient entries {}, base saved bytes per step {}..{}, base bp flops {}..{}",
            cn.base_unchanged, cn.adapter_moved, cn.base_grad_entries, cn.base_saved.0, cn.base_saved.1, cn.base_bp_flops.0, cn.base_bp_flops.1
        ),
        "controlnet back-propagates through frozen base operations; frozen parameters themselves never enter the gradient map".to_string(),
    ];
    Ok(Verdict::new(
        uc_ok && cn_ok,
        format!(
            "{steps} steps each: unicon-full keeps the base off the tape ({}), controlnet-full saves and back-propagates base activations ({})",
            if uc_ok { "ok" } else { "violated" },
            if cn_ok { "ok" } else { "not observed" }
        ),
        notes,
    ))
}

// ---------------------------------------------------------------------------
// 3. Gradient correctness

const FD_EPS: f32 = 1e-3;
const FD_TOL: f64 = 1e-3;
const ENTRIES_PER_MODEL: usize = 12;

struct FdModel {
    name: String,
    model: AdaptedModel,
    x: Tensor,
    cond: ConditioningInputs,
    batch: Batch,
    noise: Vec<unicon_core::train::ItemNoise>,
}

fn fd_models() -> Result<Vec<FdModel>> {
    let sched = harness::schedule();
    let mut out = Vec::new();
    for (kind, config) in [(BackboneKind::Dit, small_dit()), (BackboneKind::Unet, small_unet())] {
        let base = random_base(config, 21)?;
        for preset in ["unicon-full", "controlnet-full"] {
            let mut model = build_adapter(&base, AdapterConfig::preset(preset, kind)?, &mut Rng::new(22))?;
            randomize_zeros(&mut model.store, &mut Rng::new(23), 0.3, |p| p.trainable);
            let (x, cond) = probe_inputs(&config, 2, 24)?;
            let mut rng = Rng::new(25);
            let x0 = Tensor::new(x.shape(), (0..x.len()).map(|_| rng.uniform_in(-1.0, 1.0)).collect())?;
            let batch = Batch {
                x0,
                labels: cond.labels.clone(),
                cond: cond.cond_image.clone(),
            };
            let noise = draw_noise(&Rng::new(26), 2, x.len() / 2, &sched);
            out.push(FdModel {
                name: format!("{} {preset}", kind.name()),
                model,
                x,
                cond,
                batch,
                noise,
            });
        }
    }
    Ok(out)
}

impl FdModel {
    fn with_store(&self, store: &ParamStore) -> AdaptedModel {
        let mut m = self.model.clone();
        m.store = store.clone();
        m
    }

    fn output(&self, store: &ParamStore, tape: &mut Tape) -> unicon_core::Result<Tensor> {
        self.with_store(store).forward(tape, &self.x, &self.cond)
    }

    /// `n · mean((y - y0) ⊙ r) + mse(y, y0)`: the output change projected on
    /// `r`. The squared term has zero gradient at `y0` and only adds the
    /// loss primitive to the graph; the loss value stays near zero, which
    /// keeps its rounding small.
    fn projected(&self, store: &ParamStore, tape: &mut Tape, y0: &Tensor, r: &Tensor) -> unicon_core::Result<Tensor> {
        let y = self.output(store, tape)?;
        let neg = Tensor::new(y0.shape(), y0.data().iter().map(|v| -v).collect())?;
        let d = tape.add(&y, &neg)?;
        let p = tape.mul(&d, r)?;
        let m = tape.mean(&p)?;
        let proj = tape.scale(&m, y.len() as f32)?;
        let sq = tape.mse(&y, y0)?;
        tape.add(&proj, &sq)
    }

    fn training_loss(&self, store: &ParamStore, tape: &mut Tape) -> unicon_core::Result<Tensor> {
        let m = self.with_store(store);
        diffusion_loss_with(&m, tape, &self.batch, &harness::schedule(), &self.noise)
    }

    /// Direction of the output's response to entry `i` of `id`, from a
    /// coarse central difference, scaled to unit max-abs.
    fn pilot_direction(&self, store: &mut ParamStore, id: ParamId, i: usize, rng: &mut Rng) -> Result<Tensor> {
        const DELTA: f32 = 1e-2;
        let orig = store.get(id).value[i];
        store.value_mut(id)[i] = orig + DELTA;
        let up = self.output(store, &mut Tape::inference())?;
        store.value_mut(id)[i] = orig - DELTA;
        let down = self.output(store, &mut Tape::inference())?;
        store.value_mut(id)[i] = orig;
        let mut r: Vec<f32> = up.data().iter().zip(down.data()).map(|(a, b)| a - b).collect();
        let peak = r.iter().fold(0.0f32, |m, v| m.max(v.abs()));
        if peak > 0.0 {
            r.iter_mut().for_each(|v| *v /= peak);
        } else {
            r = rng.normal_vec(r.len());
        }
        Ok(Tensor::new(up.shape(), r)?)
    }
}

struct FdOutcome {
    label: String,
    rel_error: f64,
    coarse_rel_error: f64,
    loss_rel_error: f64,
}

fn gradient_correctness() -> Result<Verdict> {
    let models = fd_models()?;
    let mut covered: Vec<Primitive> = Vec::new();
    let mut flows = BTreeSet::new();
    let mut outcomes = Vec::new();
    let mut rng = Rng::new(31);
    for fm in &models {
        flows.insert(fm.model.config.flow.name());
        let mut store = fm.model.store.clone();
        let y0 = fm.output(&store, &mut Tape::inference())?;
        let r = Tensor::new(y0.shape(), rng.normal_vec(y0.len()))?;
        let mut tape = Tape::new();
        fm.projected(&store, &mut tape, &y0, &r)?;
        covered.extend(tape.primitives_recorded());

        let trainable: Vec<ParamId> = store.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();
        for _ in 0..ENTRIES_PER_MODEL {
            let id = trainable[rng.below(trainable.len() as u64) as usize];
            let i = rng.below(store.get(id).len() as u64) as usize;
            let name = store.get(id).name.clone();
            let r = fm.pilot_direction(&mut store, id, i, &mut rng)?;
            let mut projected = |eps: f32| {
                finite_difference_check(&mut store, id, &[i], eps, |s, t| fm.projected(s, t, &y0, &r)).map(|rep| rep.max_rel_error())
            };
            let (fine, coarse) = (projected(FD_EPS)?, projected(3e-2)?);
            let loss = finite_difference_check(&mut store, id, &[i], FD_EPS, |s, t| fm.training_loss(s, t))?.max_rel_error();
            outcomes.push(FdOutcome {
                label: format!("{} {name}[{i}]", fm.name),
                rel_error: fine,
                coarse_rel_error: coarse,
                loss_rel_error: loss,
            });
        }
    }

    let total = outcomes.len();
    let within = |f: fn(&FdOutcome) -> f64| outcomes.iter().filter(|o| f(o) <= FD_TOL).count();
    let fine_within = within(|o| o.rel_error);
    let worst = outcomes.iter().fold(0.0f64, |m, o| m.max(o.rel_error));
    let missing: Vec<&str> = Primitive::ALL.iter().filter(|p| !covered.contains(*p)).map(|p| p.name()).collect();
    let both_flows = flows.len() == 2;

    let mut notes = vec![
        format!(
            "{}/{} primitive kinds recorded{}",
            Primitive::ALL.len() - missing.len(),
            Primitive::ALL.len(),
            if missing.is_empty() { String::new() } else { format!(", missing {}", missing.join(", ")) }
        ),
        format!("flows exercised: {}", flows.into_iter().collect::<Vec<_>>().join(", ")),
        format!("same entries with step 3e-2: {}/{total} within {FD_TOL:.0e}", within(|o| o.coarse_rel_error)),
        format!("same entries on the training loss at step {FD_EPS:.0e}: {}/{total} within {FD_TOL:.0e}", within(|o| o.loss_rel_error)),
    ];
    let mut failing: Vec<&FdOutcome> = outcomes.iter().filter(|o| o.rel_error > FD_TOL).collect();
    failing.sort_by(|a, b| b.rel_error.total_cmp(&a.rel_error));
    for o in failing.iter().take(10) {
        notes.push(format!("rel error {:.3e} (step 3e-2: {:.3e}) at {}", o.rel_error, o.coarse_rel_error, o.label));
    }
    if failing.len() > 10 {
        notes.push(format!("... {} more above tolerance", failing.len() - 10));
    }
    Ok(Verdict::new(
        fine_within == total && total >= 32 && missing.is_empty() && both_flows,
        format!("{fine_within}/{total} sampled entries within {FD_TOL:.0e} at step {FD_EPS:.0e} (worst {worst:.3e})"),
        notes,
    ))
}

// ---------------------------------------------------------------------------
// 4. Cost ratios, against closed-form FLOP and byte counts

struct Dims {
    b: u64,
    d: u64,
    t: u64,
    n: u64,
    p: u64,
    h: u64,
    l: u64,
    c: u64,
    r: u64,
    blocks: u64,
    pixels: u64,
}

fn dims(cfg: &DitConfig, batch: usize) -> Dims {
    Dims {
        b: batch as u64,
        d: cfg.hidden as u64,
        t: cfg.time_dim as u64,
        n: cfg.tokens() as u64,
        p: cfg.patch_dim() as u64,
        h: cfg.heads as u64,
        l: cfg.label_tokens as u64,
        c: cfg.classes as u64,
        r: cfg.mlp_ratio as u64,
        blocks: cfg.blocks as u64,
        pixels: (cfg.image * cfg.image * cfg.channels) as u64,
    }
}

fn linear(rows: u64, fan_in: u64, fan_out: u64) -> u64 {
    2 * rows * fan_in * fan_out + rows * fan_out
}

fn attention(b: u64, nq: u64, nk: u64, d: u64, h: u64) -> u64 {
    let proj = linear(b * nq, d, d) + 2 * linear(b * nk, d, d) + linear(b * nq, d, d);
    let scores = 2 * b * nq * nk * d;
    let scale = b * h * nq * nk;
    let softmax = 5 * b * h * nq * nk;
    let mix = 2 * b * nq * nk * d;
    proj + scores + scale + softmax + mix
}

fn dit_forward_flops(x: &Dims) -> u64 {
    let Dims { b, d, t, n, p, h, l, c, r, .. } = *x;
    let time = linear(b, t, d) + 4 * b * d + linear(b, d, d) + (2 * b * c * d + b * d) + 2 * b * c * l * d;
    let embed = linear(b * n, p, d) + b * n * d;
    let block = 4 * b * d
        + linear(b, d, 2 * d)
        + 5 * b * n * d
        + b * n * d
        + attention(b, n, n, d, h)
        + b * n * d
        + 5 * b * n * d
        + attention(b, n, l, d, h)
        + b * n * d
        + 5 * b * n * d
        + b * n * d
        + linear(b * n, d, r * d)
        + 8 * b * n * r * d
        + linear(b * n, r * d, d)
        + b * n * d;
    let head = 4 * b * d + linear(b, d, d) + 5 * b * n * d + b * n * d + linear(b * n, d, p);
    let loss = 3 * b * x.pixels;
    time + embed + x.blocks * block + head + loss
}

fn dit_saved_elements(x: &Dims) -> u64 {
    let Dims { b, d, t, n, p, h, l, c, r, .. } = *x;
    let norm = b * n * d + b * n;
    let time = b * t + b * d + b * d + b * c + b * c;
    let embed = b * n * p;
    let self_attn = 3 * b * n * d + 2 * b * n * d + b * h * n * n + b * h * n * n + b * n * d + b * n * d;
    let cross_attn = b * n * d + 2 * b * l * d + b * n * d + b * l * d + b * h * n * l + b * h * n * l + b * l * d + b * n * d;
    let mlp = b * n * d + r * b * n * d + r * b * n * d;
    let block = b * d + b * d + norm + self_attn + norm + cross_attn + norm + mlp;
    let head = b * d + b * d + norm + b * n * d;
    let loss = b * x.pixels;
    time + embed + x.blocks * block + head + loss
}

fn dit_param_count(cfg: &DitConfig) -> u64 {
    let x = dims(cfg, 1);
    let Dims { d, t, n, p, l, c, r, .. } = x;
    let lin = |i: u64, o: u64| i * o + o;
    let embed = lin(p, d) + n * d;
    let time = lin(t, d) + lin(d, d) + c * d + c * l * d;
    let attn = 4 * lin(d, d);
    let block = lin(d, 2 * d) + 2 * attn + lin(d, r * d) + lin(r * d, d);
    let head = lin(d, d) + lin(d, p);
    embed + time + x.blocks * block + head
}

/// Elements saved by the unidirectional controller head.
fn head_saved_elements(x: &Dims) -> u64 {
    x.b * x.d + x.b * x.d + (x.b * x.n * x.d + x.b * x.n) + x.b * x.n * x.d
}

fn profile(target: ProfileTarget, kind: BackboneKind, batch: usize) -> Result<CostReport> {
    let spec = ProfileSpec {
        batch,
        repeat: 1,
        ..ProfileSpec::new(target, kind)
    };
    Ok(measure_round(&spec, None)?)
}

fn preset_report(name: &str, kind: BackboneKind) -> Result<CostReport> {
    profile(ProfileTarget::Adapter(AdapterConfig::preset(name, kind)?), kind, 16)
}

fn ratios(uc: &CostReport, cn: &CostReport) -> (f64, f64) {
    let bp = uc.totals.bp_flops as f64 / cn.totals.bp_flops as f64;
    let b = cn.component(ComponentTag::Base);
    let share = (b.gradient_bytes + b.activation_bytes) as f64 / (cn.totals.gradient_bytes + cn.totals.activation_bytes) as f64;
    (bp, share)
}

fn cost_ratios() -> Result<Verdict> {
    let batch = 16;
    let tiny = DitConfig::default();
    let x = dims(&tiny, batch);
    let params = dit_param_count(&tiny);
    let mut mismatches = Vec::new();
    let mut expect = |what: &str, got: u64, want: u64| {
        if got != want {
            mismatches.push(format!("{what}: report {got}, oracle {want}"));
        }
    };

    let bare = profile(ProfileTarget::Bare, BackboneKind::Dit, batch)?;
    expect("bare fp_flops", bare.totals.fp_flops, dit_forward_flops(&x));
    expect("bare bp_flops", bare.totals.bp_flops, 2 * dit_forward_flops(&x));
    expect("bare weight_bytes", bare.totals.weight_bytes, 4 * params);
    expect("bare gradient_bytes", bare.totals.gradient_bytes, 4 * params);
    expect("bare optimizer_bytes", bare.totals.optimizer_bytes, 8 * params);
    expect("bare activation_bytes", bare.totals.activation_bytes, 4 * dit_saved_elements(&x));

    let uc = preset_report("unicon-full", BackboneKind::Dit)?;
    let cn = preset_report("controlnet-full", BackboneKind::Dit)?;
    for (name, r) in [("unicon-full", &uc), ("controlnet-full", &cn)] {
        expect(&format!("{name} base weight_bytes"), r.component(ComponentTag::Base).weight_bytes, 4 * params);
        expect(&format!("{name} additive"), r.is_additive() as u64, 1);
    }
    let ub = uc.component(ComponentTag::Base);
    expect("unicon-full base gradient_bytes", ub.gradient_bytes, 0);
    expect("unicon-full base activation_bytes", ub.activation_bytes, 0);
    expect("unicon-full base bp_flops", ub.bp_flops, 0);

    for connector in [ConnectorKind::ZeroMlp, ConnectorKind::ZeroFt] {
        let report = |flow| {
            profile(
                ProfileTarget::Adapter(AdapterConfig::new(flow, AdapterTopology::Full, connector, BackboneKind::Dit)),
                BackboneKind::Dit,
                batch,
            )
        };
        let (c, u) = (report(FlowMode::Bidirectional)?, report(FlowMode::Unidirectional)?);
        let cn_base = c.component(ComponentTag::Base).activation_bytes;
        let head = 4 * head_saved_elements(&x);
        expect(
            &format!("{} activation gap (controlnet - unicon) + head", connector.name()),
            c.totals.activation_bytes + head - u.totals.activation_bytes,
            cn_base,
        );
    }

    let (bp, share) = ratios(&uc, &cn);
    let ratios_ok = (0.45..=0.60).contains(&bp) && share >= 0.30;
    let (ubp, ushare) = ratios(&preset_report("unicon-full", BackboneKind::Unet)?, &preset_report("controlnet-full", BackboneKind::Unet)?);

    let mut notes = mismatches.clone();
    notes.push(format!("{} oracle comparisons exact", if mismatches.is_empty() { "all" } else { "not all" }));
    notes.push(format!("u-net for reference: bp ratio {ubp:.3}, base share {ushare:.3}"));
    Ok(Verdict::new(
        ratios_ok && mismatches.is_empty(),
        format!("TinyDiT batch {batch}: bp_flops ratio {bp:.3} (want 0.45..0.60), base memory share {share:.3} (want >= 0.30)"),
        notes,
    ))
}

// ---------------------------------------------------------------------------
// 5. Training effectiveness

fn reference_config(preset: &str, task: ConditionKind, seed: u64, steps: usize, out: &str) -> Result<RunConfig> {
    let tmp = target_tmp();
    Ok(RunConfig {
        adapter: Some(AdapterConfig::preset(preset, BackboneKind::Dit)?),
        task,
        seed,
        steps,
        batch: 16,
        base_checkpoint: Some(tmp.join("unicon-base").join(harness::BASE_FILE)),
        out_dir: tmp.join(out),
        ..RunConfig::default()
    })
}

/// Loads the shared pre-trained base, training it first if it is not cached.
fn shared_base(cfg: &RunConfig) -> Result<(DiffusionModel, Duration)> {
    let start = Instant::now();
    let cached = harness::base_path(cfg).exists();
    let base = harness::load_or_pretrain_base(cfg, None)?;
    let took = if cached { Duration::ZERO } else { start.elapsed() };
    Ok((base, took))
}

fn training_effectiveness() -> Result<Verdict> {
    let cfg = reference_config("unicon-full", ConditionKind::Sr4x, 42, 3000, "acceptance-train")?;
    let count = 64;
    let (base, fixture) = shared_base(&cfg)?;
    let init = harness::evaluate(&harness::build_model(&cfg, base)?, &cfg, count)?;
    let run = harness::train(&cfg, None)?;
    let trained = harness::evaluate(&run.model, &cfg, count)?;

    let first = mean(&run.losses[..10]);
    let last = mean(&run.losses[run.losses.len() - 100..]);
    let gain = trained.consistency.mean - init.consistency.mean;
    let loss_ok = last < 0.5 * first;
    let gain_ok = gain >= 3.0;
    Ok(Verdict {
        pass: loss_ok && gain_ok,
        summary: format!(
            "loss {first:.4} -> {last:.4} (ratio {:.3}, want < 0.5); consistency PSNR {:.2} -> {:.2} dB (+{gain:.2}, want >= 3)",
            last / first,
            init.consistency.mean,
            trained.consistency.mean
        ),
        notes: vec![
            format!("{} steps, batch {}, seed {}, {} test samples at {} sampler steps", cfg.steps, cfg.batch, cfg.seed, count, cfg.sampler_steps),
            format!(
                "ground-truth PSNR {:.2} -> {:.2} dB, SSIM {:.3} -> {:.3}",
                init.psnr.mean, trained.psnr.mean, init.ssim.mean, trained.ssim.mean
            ),
        ],
        fixture,
    })
}

// ---------------------------------------------------------------------------
// 6. Ablation direction (soft)

const ABLATION_STEPS: usize = 500;
const ABLATION_SAMPLES: usize = 32;

fn ablation_direction() -> Result<Verdict> {
    let mut wins = 0;
    let mut notes = Vec::new();
    let mut fixture = Duration::ZERO;
    for seed in [1, 2, 3] {
        let mut score = |preset: &str| -> Result<f64> {
            let cfg = reference_config(preset, ConditionKind::Edge, seed, ABLATION_STEPS, &format!("acceptance-ablation/{preset}-{seed}"))?;
            fixture += shared_base(&cfg)?.1;
            let run = harness::train(&cfg, None)?;
            Ok(harness::evaluate(&run.model, &cfg, ABLATION_SAMPLES)?.consistency.mean)
        };
        let decoder = score("controlnet-decoder")?;
        let encoder = score("controlnet-encoder")?;
        if decoder > encoder {
            wins += 1;
        }
        notes.push(format!("seed {seed}: decoder SSIM {decoder:.4}, encoder SSIM {encoder:.4}"));
    }
    Ok(Verdict {
        pass: wins >= 2,
        summary: format!(
            "decoder beats encoder on edge consistency in {wins}/3 seeds ({ABLATION_STEPS} steps, {ABLATION_SAMPLES} samples each)"
        ),
        notes,
        fixture,
    })
}

// ---------------------------------------------------------------------------
// 7. Determinism and serialization

fn sampled_pgms(cfg: &RunConfig, checkpoint: &std::path::Path) -> Result<Vec<Vec<u8>>> {
    let model = harness::load_model(cfg, checkpoint)?;
    harness::test_pairs(2, cfg.task)
        .iter()
        .map(|p| Ok(pgm::encode(&harness::sample_pair(&model, cfg, p, cfg.seed)?)))
        .collect()
}

fn determinism() -> Result<Verdict> {
    let mut failures = Vec::new();

    let dirs = [tempfile::tempdir()?, tempfile::tempdir()?];
    let mut checkpoints = Vec::new();
    let mut samples = Vec::new();
    for d in &dirs {
        let cfg = common::tiny_config(d.path());
        let run = harness::train(&cfg, None)?;
        checkpoints.push(fs::read(&run.checkpoint)?);
        samples.push(sampled_pgms(&cfg, &run.checkpoint)?);
    }
    if checkpoints[0] != checkpoints[1] {
        failures.push("repeated runs wrote different checkpoints".to_string());
    }
    if samples[0] != samples[1] {
        failures.push("repeated runs sampled different PGMs".to_string());
    }

    let tiny = BackboneConfig::default_for(BackboneKind::Dit);
    let source = random_base(tiny, 40)?;
    let bytes = checkpoint::encode(&source.store);
    let mut restored = DiffusionModel::new(tiny, 41)?;
    checkpoint::apply_records(&mut restored.store, checkpoint::decode(&bytes)?)?;
    let exact = source
        .store
        .iter()
        .zip(restored.store.iter())
        .all(|((_, a), (_, b))| a.name == b.name && a.value.iter().map(|v| v.to_bits()).eq(b.value.iter().map(|v| v.to_bits())));
    if !exact || checkpoint::encode(&restored.store) != bytes {
        failures.push("TinyDiT checkpoint round trip is not bit-exact".to_string());
    }

    let mut flipped = bytes.clone();
    flipped[bytes.len() / 2] ^= 0x10;
    if !matches!(checkpoint::decode(&flipped), Err(CheckpointError::Crc { .. })) {
        failures.push("a flipped byte was not rejected by the CRC".to_string());
    }
    let truncated = &bytes[..bytes.len() - 7];
    if !matches!(checkpoint::decode(truncated), Err(CheckpointError::Crc { .. } | CheckpointError::Malformed(_))) {
        failures.push("a truncated checkpoint was accepted".to_string());
    }

    let summary = if failures.is_empty() {
        format!(
            "repeated runs match bit for bit ({} checkpoint bytes, {} PGMs); round trip exact over {} KiB; corruption rejected",
            checkpoints[0].len(),
            samples[0].len(),
            bytes.len() / 1024
        )
    } else {
        failures.join("; ")
    };
    Ok(Verdict::new(failures.is_empty(), summary, Vec::new()))
}

// ---------------------------------------------------------------------------
// 8. Schedule and sampler

/// Predicts the same constant noise everywhere.
struct ConstantEps {
    store: ParamStore,
    value: f32,
}

impl EpsModel for ConstantEps {
    fn params(&self) -> &ParamStore {
        &self.store
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn predict(&self, _tape: &mut Tape, x_t: &Tensor, _cond: &ConditioningInputs) -> unicon_core::Result<Tensor> {
        Tensor::new(x_t.shape(), vec![self.value; x_t.len()])
    }
}

fn schedule_and_sampler() -> Result<Verdict> {
    let sched = harness::schedule();
    let mut notes = Vec::new();
    let ab = &sched.alpha_bars;
    let decreasing = ab.windows(2).all(|w| w[1] < w[0]);

    let x0: Vec<f32> = harness::test_pairs(1, ConditionKind::Sr4x)[0].x0.pixels.iter().map(|v| 2.0 * v - 1.0).collect();
    let draws = 2000;
    let mut variance_ok = true;
    for t in [10, 500, 990] {
        let mut rng = Rng::new(t as u64);
        let (mut sum, mut sq) = (vec![0.0f64; x0.len()], vec![0.0f64; x0.len()]);
        for _ in 0..draws {
            let eps = rng.normal_vec(x0.len());
            for (k, v) in sched.q_sample_item(&x0, t, &eps)?.into_iter().enumerate() {
                sum[k] += v as f64;
                sq[k] += (v as f64) * (v as f64);
            }
        }
        let n = draws as f64;
        let var = sum.iter().zip(&sq).map(|(s, q)| (q - s * s / n) / (n - 1.0)).sum::<f64>() / x0.len() as f64;
        let want = 1.0 - ab[t];
        let rel = (var - want).abs() / want;
        variance_ok &= rel <= 0.05;
        notes.push(format!("t={t}: sample variance {var:.5}, 1 - alpha_bar {want:.5}, relative error {rel:.4}"));
    }

    // With one step at tau = T-1, x = (z - sqrt(1 - ab) * eps) / sqrt(ab).
    let last = ab[ab.len() - 1];
    let shape = [1, 1, 4, 4];
    let cond = ConditioningInputs::new(vec![0], vec![0]);
    let mut sampler_ok = sched.strided_timesteps(1)? == vec![sched.steps() - 1];
    // Deviation measured against f32 rounding of the operands.
    let mut worst = 0.0f64;
    for (value, seed) in [(0.0f32, 50u64), (0.5, 51)] {
        let stub = ConstantEps {
            store: ParamStore::new(),
            value,
        };
        let x = sample_loop(&stub, &cond, &shape, &sched, 1, &mut Rng::new(seed))?;
        let z = Rng::new(seed).normal_vec(16);
        for (got, z) in x.data().iter().zip(&z) {
            let want = (*z as f64 - (1.0 - last).sqrt() * value as f64) / last.sqrt();
            let bound = 8.0 * f32::EPSILON as f64 * (z.abs() as f64 + value.abs() as f64) / last.sqrt();
            worst = worst.max((*got as f64 - want).abs() / bound);
        }
    }
    sampler_ok &= worst <= 1.0;
    notes.push(format!("single-step sampler: worst deviation from the closed form is {worst:.3} of the f32 rounding bound"));

    Ok(Verdict::new(
        decreasing && variance_ok && sampler_ok,
        format!(
            "alpha_bars strictly decreasing: {decreasing}; q_sample variance within 5%: {variance_ok}; single-step closed form: {sampler_ok}"
        ),
        notes,
    ))
}

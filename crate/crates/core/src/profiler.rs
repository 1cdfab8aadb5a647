//! One-round training-cost evaluation.
//!
//! A round builds the model, records one forward pass plus loss, runs
//! backward and takes one optimizer step, reading four byte ledgers along
//! the way:
//!
//! * weight: parameter bytes, frozen or not;
//! * activation: bytes the recorded forward keeps alive for backward;
//! * gradient: bytes of the gradient tensors backward produces;
//! * optimizer: AdamW moment buffers after the first step.
//!
//! FLOPs come from the tape's per-primitive closed forms. Backward FLOPs
//! are twice the forward FLOPs of every primitive that was recorded, and
//! zero for primitives run without recording. All byte and FLOP figures are
//! exact integers; wall-clock times are optional and only filled in when a
//! [`Clock`] is supplied.

use alloc::boxed::Box;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt::Write;

use crate::adapter::{build_adapter, AdapterConfig};
use crate::backbone::{BackboneConfig, BackboneKind, DiffusionModel, EpsModel};
use crate::error::{invalid, Error, Result};
use crate::optim::{AdamW, AdamWConfig};
use crate::param::{ComponentTag, ParamStore};
use crate::rng::Rng;
use crate::schedule::{build_schedule, NoiseSchedule, ScheduleKind};
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::train::{diffusion_loss, Batch};

pub const DEFAULT_BATCH: usize = 16;
pub const DEFAULT_REPEAT: usize = 20;
pub const DIFFUSION_STEPS: usize = 1000;

/// Monotonic milliseconds, supplied by the caller.
pub trait Clock {
    fn now_ms(&mut self) -> f64;
}

/// The six integer cost fields.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CostFields {
    pub weight_bytes: u64,
    pub activation_bytes: u64,
    pub gradient_bytes: u64,
    pub optimizer_bytes: u64,
    pub fp_flops: u64,
    pub bp_flops: u64,
}

impl CostFields {
    pub const NAMES: [&'static str; 6] = [
        "weight_bytes",
        "activation_bytes",
        "gradient_bytes",
        "optimizer_bytes",
        "fp_flops",
        "bp_flops",
    ];

    pub fn values(&self) -> [u64; 6] {
        [
            self.weight_bytes,
            self.activation_bytes,
            self.gradient_bytes,
            self.optimizer_bytes,
            self.fp_flops,
            self.bp_flops,
        ]
    }

    pub fn from_values(v: [u64; 6]) -> Self {
        CostFields {
            weight_bytes: v[0],
            activation_bytes: v[1],
            gradient_bytes: v[2],
            optimizer_bytes: v[3],
            fp_flops: v[4],
            bp_flops: v[5],
        }
    }

    fn accumulate(&mut self, o: &CostFields) {
        let mut v = self.values();
        for (a, b) in v.iter_mut().zip(o.values()) {
            *a += b;
        }
        *self = Self::from_values(v);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CostReport {
    pub totals: CostFields,
    pub per_component: [CostFields; 5],
    pub fp_time_ms: Option<f64>,
    pub bp_time_ms: Option<f64>,
}

impl CostReport {
    /// Totals are always derived from the components.
    pub fn from_components(per_component: [CostFields; 5]) -> Self {
        let mut totals = CostFields::default();
        for c in &per_component {
            totals.accumulate(c);
        }
        CostReport {
            totals,
            per_component,
            fp_time_ms: None,
            bp_time_ms: None,
        }
    }

    pub fn component(&self, tag: ComponentTag) -> &CostFields {
        &self.per_component[tag.index()]
    }

    pub fn is_additive(&self) -> bool {
        let mut sum = CostFields::default();
        for c in &self.per_component {
            sum.accumulate(c);
        }
        sum == self.totals
    }

    /// Equal apart from wall-clock fields.
    pub fn same_costs(&self, other: &CostReport) -> bool {
        self.totals == other.totals && self.per_component == other.per_component
    }
}

/// What to profile: a bare, fully trainable backbone or an adapter on a
/// frozen copy of it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ProfileTarget {
    Bare,
    Adapter(AdapterConfig),
}

impl ProfileTarget {
    pub fn label(&self) -> String {
        match self {
            ProfileTarget::Bare => "base".to_string(),
            ProfileTarget::Adapter(c) => c.label(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProfileSpec {
    pub backbone: BackboneConfig,
    pub target: ProfileTarget,
    pub batch: usize,
    pub repeat: usize,
    pub seed: u64,
}

impl ProfileSpec {
    pub fn new(target: ProfileTarget, backbone: BackboneKind) -> Self {
        ProfileSpec {
            backbone: BackboneConfig::default_for(backbone),
            target,
            batch: DEFAULT_BATCH,
            repeat: DEFAULT_REPEAT,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.repeat == 0 {
            return invalid("repeat must be at least 1");
        }
        if self.batch == 0 {
            return invalid("batch must be at least 1");
        }
        if let ProfileTarget::Adapter(c) = &self.target {
            if c.backbone != self.backbone.kind() {
                return invalid("adapter backbone differs from the profiled backbone");
            }
            c.validate()?;
        }
        Ok(())
    }
}

fn stage<T>(stage: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Stage { .. } => e,
        other => Error::Stage {
            stage,
            message: other.to_string(),
        },
    })
}

/// Builds the model named by `spec`, deterministically from its seed.
pub fn build_model(spec: &ProfileSpec) -> Result<Box<dyn EpsModel>> {
    let base = DiffusionModel::new(spec.backbone, spec.seed)?;
    Ok(match spec.target {
        ProfileTarget::Bare => Box::new(base),
        ProfileTarget::Adapter(cfg) => {
            let mut rng = Rng::new(spec.seed).split(0xADA9);
            Box::new(build_adapter(&base, cfg, &mut rng)?)
        }
    })
}

/// Random inputs shaped for `config`: images in `[-1, 1]`, labels in range
/// and, if requested, a condition image in `[0, 1]`.
pub fn synthetic_batch(config: &BackboneConfig, batch: usize, with_cond: bool, seed: u64) -> Result<Batch> {
    let shape = [batch, config.channels(), config.image(), config.image()];
    let n: usize = shape.iter().product();
    let mut r = Rng::new(seed).split(0xBA7C);
    let x0 = Tensor::new(&shape, (0..n).map(|_| r.uniform_in(-1.0, 1.0)).collect())?;
    let labels = (0..batch).map(|_| r.below(config.classes() as u64) as usize).collect();
    let cond = if with_cond {
        Some(Tensor::new(&shape, (0..n).map(|_| r.uniform()).collect())?)
    } else {
        None
    };
    Ok(Batch { x0, labels, cond })
}

fn default_schedule() -> NoiseSchedule {
    build_schedule(DIFFUSION_STEPS, ScheduleKind::Linear).expect("default schedule")
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FlopCount {
    pub fp_flops: u64,
    pub bp_flops: u64,
    /// `(fp, bp)` per component.
    pub per_component: [(u64, u64); 5],
}

/// FLOPs of one recorded forward pass plus loss on `batch`. Pass an
/// inference tape's outcome by setting `record = false`.
pub fn count_flops(model: &dyn EpsModel, batch: &Batch, record: bool) -> Result<FlopCount> {
    let sched = default_schedule();
    let mut tape = if record { Tape::new() } else { Tape::inference() };
    diffusion_loss(model, &mut tape, batch, &sched, &Rng::new(0))?;
    let rep = tape.report();
    let mut out = FlopCount::default();
    for tag in ComponentTag::ALL {
        let s = rep.get(tag);
        out.per_component[tag.index()] = (s.fp_flops, s.bp_flops);
        out.fp_flops += s.fp_flops;
        out.bp_flops += s.bp_flops;
    }
    Ok(out)
}

fn weight_bytes(store: &ParamStore) -> [u64; 5] {
    let mut out = [0u64; 5];
    for (_, p) in store.iter() {
        out[p.tag.index()] += 4 * p.len() as u64;
    }
    out
}

/// One training-cost round. Times are averaged over `spec.repeat` extra
/// rounds when a clock is given.
pub fn measure_round(spec: &ProfileSpec, clock: Option<&mut dyn Clock>) -> Result<CostReport> {
    spec.validate()?;
    let mut model = stage("weight", build_model(spec))?;
    let weight = weight_bytes(model.params());

    let with_cond = matches!(spec.target, ProfileTarget::Adapter(_));
    let batch = stage("activation", synthetic_batch(&spec.backbone, spec.batch, with_cond, spec.seed))?;
    let sched = default_schedule();
    let noise_rng = Rng::new(spec.seed).split(0x701E);

    let mut tape = Tape::new();
    let loss = stage("activation", diffusion_loss(model.as_ref(), &mut tape, &batch, &sched, &noise_rng))?;
    let rep = tape.report();
    let grads = stage("gradient", tape.backward(&loss, model.params()))?;
    drop(tape);
    let gradient = grads.bytes_by_tag();

    let mut opt = AdamW::new(AdamWConfig::default(), model.params());
    opt.step(model.params_mut(), &grads);
    let optimizer = opt.state_bytes(model.params());

    let mut per = [CostFields::default(); 5];
    for tag in ComponentTag::ALL {
        let i = tag.index();
        let s = rep.get(tag);
        per[i] = CostFields {
            weight_bytes: weight[i],
            activation_bytes: s.saved_bytes,
            gradient_bytes: gradient[i],
            optimizer_bytes: optimizer[i],
            fp_flops: s.fp_flops,
            bp_flops: s.bp_flops,
        };
    }
    let mut report = CostReport::from_components(per);

    if let Some(clock) = clock {
        let (mut fp, mut bp) = (0.0, 0.0);
        for _ in 0..spec.repeat {
            let mut tape = Tape::new();
            let t0 = clock.now_ms();
            let loss = stage("fp-time", diffusion_loss(model.as_ref(), &mut tape, &batch, &sched, &noise_rng))?;
            let t1 = clock.now_ms();
            stage("bp-time", tape.backward(&loss, model.params()))?;
            let t2 = clock.now_ms();
            fp += t1 - t0;
            bp += t2 - t1;
        }
        report.fp_time_ms = Some(fp / spec.repeat as f64);
        report.bp_time_ms = Some(bp / spec.repeat as f64);
    }
    Ok(report)
}

/// One comparison cell. `scope` is `None` for totals.
#[derive(Clone, Debug, PartialEq)]
pub struct CompareRow {
    pub name: String,
    pub scope: Option<ComponentTag>,
    pub field: &'static str,
    pub value: f64,
    /// Value over the first report's value; `None` when that is zero and
    /// this is not.
    pub ratio: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub names: Vec<String>,
    pub rows: Vec<CompareRow>,
}

fn ratio(v: f64, reference: f64) -> Option<f64> {
    if reference == 0.0 {
        (v == 0.0).then_some(1.0)
    } else {
        Some(v / reference)
    }
}

/// Absolute values and ratios against the first report, per field and per
/// component, rows in input order.
pub fn compare_reports(reports: &[(&str, &CostReport)]) -> Result<Comparison> {
    if reports.len() < 2 {
        return invalid("comparison needs at least two reports");
    }
    let (_, first) = reports[0];
    let mut rows = Vec::new();
    let scopes = core::iter::once(None).chain(ComponentTag::ALL.into_iter().map(Some));
    for scope in scopes {
        let pick = |r: &CostReport| match scope {
            None => r.totals.values(),
            Some(t) => r.component(t).values(),
        };
        let reference = pick(first);
        for (name, rep) in reports {
            for (k, v) in pick(rep).iter().enumerate() {
                rows.push(CompareRow {
                    name: name.to_string(),
                    scope,
                    field: CostFields::NAMES[k],
                    value: *v as f64,
                    ratio: ratio(*v as f64, reference[k] as f64),
                });
            }
            if scope.is_none() {
                let times = [("fp_time_ms", rep.fp_time_ms, first.fp_time_ms), ("bp_time_ms", rep.bp_time_ms, first.bp_time_ms)];
                for (field, v, r) in times {
                    if let (Some(v), Some(r)) = (v, r) {
                        rows.push(CompareRow {
                            name: name.to_string(),
                            scope,
                            field,
                            value: v,
                            ratio: ratio(v, r),
                        });
                    }
                }
            }
        }
    }
    Ok(Comparison {
        names: reports.iter().map(|(n, _)| n.to_string()).collect(),
        rows,
    })
}

impl Comparison {
    pub fn ratio(&self, name: &str, scope: Option<ComponentTag>, field: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.name == name && r.scope == scope && r.field == field)
            .and_then(|r| r.ratio)
    }

    /// Fixed-width text: one block per scope, one line per report, each
    /// cell `value (ratio)`.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let name_w = self.names.iter().map(|n| n.len()).max().unwrap_or(4).max(6);
        let mut scopes: Vec<Option<ComponentTag>> = Vec::new();
        for r in &self.rows {
            if !scopes.contains(&r.scope) {
                scopes.push(r.scope);
            }
        }
        for scope in scopes {
            let label = scope.map_or("total", |t| t.name());
            let fields: Vec<&str> = {
                let mut f: Vec<&str> = Vec::new();
                for r in self.rows.iter().filter(|r| r.scope == scope) {
                    if !f.contains(&r.field) {
                        f.push(r.field);
                    }
                }
                f
            };
            let _ = writeln!(out, "[{label}]");
            let _ = write!(out, "{:<name_w$}", "config");
            for f in &fields {
                let _ = write!(out, " {f:>26}");
            }
            out.push('\n');
            for name in &self.names {
                let _ = write!(out, "{name:<name_w$}");
                for f in &fields {
                    let cell = self
                        .rows
                        .iter()
                        .find(|r| &r.name == name && r.scope == scope && r.field == *f)
                        .map(|r| {
                            let ratio = r.ratio.map_or("n/a".to_string(), |x| format!("{x:.3}"));
                            if r.field.ends_with("_ms") {
                                format!("{:.2} ({ratio})", r.value)
                            } else {
                                format!("{} ({ratio})", r.value as u64)
                            }
                        })
                        .unwrap_or_default();
                    let _ = write!(out, " {cell:>26}");
                }
                out.push('\n');
            }
        }
        out
    }
}

//! Command-line front end. Flags mirror the run configuration keys.

use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use unicon_core::adapter::{AdapterConfig, AdapterTopology, FlowMode};
use unicon_core::backbone::{BackboneConfig, BackboneKind};
use unicon_core::connector::ConnectorKind;
use unicon_core::data::{make_pair, ConditionKind};
use unicon_core::profiler::{compare_reports, measure_round, CostReport, ProfileSpec, ProfileTarget, DEFAULT_BATCH, DEFAULT_REPEAT};

use crate::clock::WallClock;
use crate::config::RunConfig;
use crate::harness::{self, item_rng, Model};
use crate::logs::MetricsRecord;
use crate::{pgm, report};

#[derive(Parser, Debug)]
#[command(name = "unicon", version, about = "Train, profile and sample unidirectional and ControlNet-style adapters")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train an adapter (or a bare backbone) and write checkpoint and metrics.
    Train(RunArgs),
    /// Measure one training round of an adapter or the bare backbone.
    Profile(ProfileArgs),
    /// Profile several adapter specs and tabulate them against the first.
    Compare(CompareArgs),
    /// Draw samples from a checkpoint.
    Sample(SampleArgs),
    /// Score a checkpoint on the test set.
    Eval(EvalArgs),
    /// Pre-train the shared base and cache it.
    PretrainBase(RunArgs),
}

/// Run configuration: an optional file, then per-key overrides.
#[derive(Args, Debug, Default, Clone)]
pub struct RunArgs {
    /// Run configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// `dit` or `unet`.
    #[arg(long)]
    pub backbone: Option<String>,
    /// Adapter preset such as `unicon-full`, or `none` for the bare backbone.
    #[arg(long)]
    pub adapter: Option<String>,
    #[arg(long)]
    pub flow: Option<String>,
    #[arg(long)]
    pub topology: Option<String>,
    #[arg(long)]
    pub connector: Option<String>,
    #[arg(long)]
    pub keep_cross_attention: Option<bool>,
    #[arg(long)]
    pub controller_sees_input: Option<bool>,
    #[arg(long)]
    pub drop_base_decoder: Option<bool>,
    /// `edge`, `sr4x` or `blur-sr4x`.
    #[arg(long)]
    pub task: Option<String>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f32>,
    #[arg(long)]
    pub beta1: Option<f32>,
    #[arg(long)]
    pub beta2: Option<f32>,
    #[arg(long)]
    pub eps: Option<f32>,
    #[arg(long)]
    pub weight_decay: Option<f32>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub log_every: Option<usize>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub base_checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub base_steps: Option<usize>,
    #[arg(long)]
    pub sampler_steps: Option<usize>,
    #[arg(long)]
    pub eval_count: Option<usize>,
    /// Only print the final result.
    #[arg(long)]
    pub quiet: bool,
}

fn parse_with<T>(what: &str, value: &str, f: impl Fn(&str) -> Option<T>) -> Result<T> {
    f(value).with_context(|| format!("unknown {what} `{value}`"))
}

impl RunArgs {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
            None => RunConfig::default(),
        };
        if let Some(b) = &self.backbone {
            let kind = parse_with("backbone", b, BackboneKind::parse)?;
            if kind != cfg.backbone.kind() {
                cfg.backbone = BackboneConfig::default_for(kind);
                if let Some(a) = cfg.adapter.as_mut() {
                    a.backbone = kind;
                }
            }
        }
        let kind = cfg.backbone.kind();
        if let Some(name) = &self.adapter {
            cfg.adapter = match name.as_str() {
                "none" | "base" => None,
                _ => Some(AdapterConfig::preset(name, kind)?),
            };
        }
        let adapter_flags = self.flow.is_some()
            || self.topology.is_some()
            || self.connector.is_some()
            || self.keep_cross_attention.is_some()
            || self.controller_sees_input.is_some()
            || self.drop_base_decoder.is_some();
        if adapter_flags {
            let a = cfg
                .adapter
                .as_mut()
                .context("adapter flags given but the run has no adapter")?;
            if let Some(v) = &self.flow {
                a.flow = parse_with("flow", v, FlowMode::parse)?;
            }
            if let Some(v) = &self.topology {
                a.topology = parse_with("topology", v, AdapterTopology::parse)?;
            }
            if let Some(v) = &self.connector {
                a.connector = parse_with("connector", v, ConnectorKind::parse)?;
            }
            if let Some(v) = self.keep_cross_attention {
                a.keep_cross_attention = v;
            }
            if let Some(v) = self.controller_sees_input {
                a.controller_sees_input = v;
            }
            if let Some(v) = self.drop_base_decoder {
                a.drop_base_decoder = v;
            }
        }
        if let Some(v) = &self.task {
            cfg.task = parse_with("task", v, ConditionKind::parse)?;
        }
        let o = &mut cfg.optimizer;
        macro_rules! set {
            ($($flag:ident => $slot:expr),* $(,)?) => {
                $(if let Some(v) = self.$flag.clone() { $slot = v; })*
            };
        }
        set! {
            lr => o.lr, beta1 => o.beta1, beta2 => o.beta2, eps => o.eps, weight_decay => o.weight_decay,
        }
        set! {
            steps => cfg.steps, batch => cfg.batch, seed => cfg.seed, log_every => cfg.log_every,
            out_dir => cfg.out_dir, base_steps => cfg.base_steps, sampler_steps => cfg.sampler_steps,
            eval_count => cfg.eval_count,
        }
        if let Some(p) = &self.base_checkpoint {
            cfg.base_checkpoint = Some(p.clone());
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Format {
    Json,
    Table,
    Csv,
}

#[derive(Args, Debug)]
pub struct ProfileArgs {
    #[arg(long, default_value = "dit")]
    pub backbone: String,
    /// Adapter preset, optionally `preset:connector`; `base` profiles the bare backbone.
    #[arg(long, default_value = "unicon-full")]
    pub adapter: String,
    #[arg(long, default_value_t = DEFAULT_BATCH)]
    pub batch: usize,
    /// Timed rounds averaged for the wall-clock fields.
    #[arg(long, default_value_t = DEFAULT_REPEAT)]
    pub repeat: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also time forward and backward passes.
    #[arg(long)]
    pub wall_clock: bool,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    pub format: Format,
    /// Also write the JSON report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct CompareArgs {
    /// Two or more specs as in `profile --adapter`; the first is the reference.
    #[arg(required = true, num_args = 2..)]
    pub specs: Vec<String>,
    #[arg(long, default_value = "dit")]
    pub backbone: String,
    #[arg(long, default_value_t = DEFAULT_BATCH)]
    pub batch: usize,
    #[arg(long, default_value_t = DEFAULT_REPEAT)]
    pub repeat: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub wall_clock: bool,
    #[arg(long, value_enum, default_value_t = Format::Table)]
    pub format: Format,
}

#[derive(Args, Debug)]
pub struct SampleArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Condition image (binary PGM).
    #[arg(long, conflicts_with = "test_seed")]
    pub cond: Option<PathBuf>,
    /// Use the condition of this dataset seed.
    #[arg(long)]
    pub test_seed: Option<u64>,
    /// Class label when sampling from a condition file.
    #[arg(long, default_value_t = 0)]
    pub label: usize,
    #[arg(long, default_value_t = 1)]
    pub count: usize,
    /// Directory for the images and manifest.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Number of test samples; defaults to the config's eval count.
    #[arg(long)]
    pub count: Option<usize>,
    /// Summary path; defaults to `summary.json` in the output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// `base`, `preset` or `preset:connector`.
pub fn parse_target(spec: &str, kind: BackboneKind) -> Result<ProfileTarget> {
    if spec == "base" {
        return Ok(ProfileTarget::Bare);
    }
    let (preset, connector) = match spec.split_once(':') {
        Some((p, c)) => (p, Some(c)),
        None => (spec, None),
    };
    let mut cfg = AdapterConfig::preset(preset, kind)?;
    if let Some(c) = connector {
        cfg.connector = parse_with("connector", c, ConnectorKind::parse)?;
        cfg.validate()?;
    }
    Ok(ProfileTarget::Adapter(cfg))
}

fn profile_one(spec: &str, kind: BackboneKind, batch: usize, repeat: usize, seed: u64, wall: bool) -> Result<CostReport> {
    let target = parse_target(spec, kind)?;
    let ps = ProfileSpec {
        batch,
        repeat,
        seed,
        ..ProfileSpec::new(target, kind)
    };
    let mut clock = WallClock::new();
    let clock: Option<&mut dyn unicon_core::profiler::Clock> = if wall { Some(&mut clock) } else { None };
    measure_round(&ps, clock).with_context(|| format!("profiling `{spec}`"))
}

fn printer(quiet: bool) -> impl FnMut(&MetricsRecord) {
    move |r: &MetricsRecord| {
        if !quiet {
            eprintln!("step {:>6}  loss {:.5}  grad_norm {:.4}  {:.0} ms", r.step, r.loss, r.grad_norm, r.elapsed_ms);
        }
    }
}

#[derive(Serialize)]
struct SampleEntry {
    index: usize,
    file: String,
    label: usize,
    test_seed: Option<u64>,
    cond: String,
    seed: u64,
    sampler_steps: usize,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(args) => {
            let cfg = args.resolve()?;
            let mut p = printer(args.quiet);
            let out = harness::train(&cfg, Some(&mut p))?;
            println!("checkpoint {}", out.checkpoint.display());
            println!("metrics {}", out.metrics.display());
        }
        Command::PretrainBase(args) => {
            let cfg = args.resolve()?;
            let path = harness::base_path(&cfg);
            if path.exists() {
                bail!("{} already exists; remove it to pre-train again", path.display());
            }
            let mut p = printer(args.quiet);
            harness::load_or_pretrain_base(&cfg, Some(&mut p))?;
            println!("base {}", path.display());
        }
        Command::Profile(a) => {
            let kind = parse_with("backbone", &a.backbone, BackboneKind::parse)?;
            let rep = profile_one(&a.adapter, kind, a.batch, a.repeat, a.seed, a.wall_clock)?;
            let json = report::report_to_json(&a.adapter, &rep);
            if let Some(path) = &a.out {
                fs::write(path, format!("{json}\n")).with_context(|| format!("writing {}", path.display()))?;
            }
            match a.format {
                Format::Json => println!("{json}"),
                Format::Table => print!("{}", report::report_to_table(&a.adapter, &rep)),
                Format::Csv => print!("{}", report::report_to_csv(&a.adapter, &rep)),
            }
        }
        Command::Compare(a) => {
            let kind = parse_with("backbone", &a.backbone, BackboneKind::parse)?;
            let reports = a
                .specs
                .iter()
                .map(|s| profile_one(s, kind, a.batch, a.repeat, a.seed, a.wall_clock))
                .collect::<Result<Vec<_>>>()?;
            let named: Vec<(&str, &CostReport)> = a.specs.iter().map(String::as_str).zip(&reports).collect();
            let cmp = compare_reports(&named)?;
            match a.format {
                Format::Table => print!("{}", cmp.to_table()),
                Format::Csv => print!("{}", report::comparison_to_csv(&cmp)),
                Format::Json => {
                    let docs: Vec<serde_json::Value> = named
                        .iter()
                        .map(|(n, r)| serde_json::from_str(&report::report_to_json(n, r)).expect("valid json"))
                        .collect();
                    println!("{}", serde_json::to_string_pretty(&docs)?);
                }
            }
        }
        Command::Sample(a) => {
            let cfg = a.run.resolve()?;
            let model = harness::load_model(&cfg, &a.checkpoint)?;
            let (cond, label, test_seed, cond_name) = match (&a.cond, a.test_seed) {
                (Some(path), _) => (pgm::read(path)?, a.label, None, path.display().to_string()),
                (None, Some(seed)) => {
                    let p = make_pair(seed, cfg.task);
                    (p.cond, p.label, Some(seed), format!("test seed {seed} ({})", cfg.task.name()))
                }
                (None, None) => bail!("give either --cond or --test-seed"),
            };
            if a.count == 0 {
                bail!("count must be positive");
            }
            fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
            let cond_arg = matches!(model, Model::Adapted(_)).then_some(&cond);
            let mut entries = Vec::with_capacity(a.count);
            for i in 0..a.count {
                let mut rng = item_rng(cfg.seed, i as u64);
                let img = harness::sample_image(&model, cond_arg, label, cfg.backbone.image(), cfg.sampler_steps, &mut rng)?;
                let file = format!("sample_{i:04}.pgm");
                pgm::write(a.out.join(&file), &img)?;
                entries.push(SampleEntry {
                    index: i,
                    file,
                    label,
                    test_seed,
                    cond: cond_name.clone(),
                    seed: cfg.seed,
                    sampler_steps: cfg.sampler_steps,
                });
            }
            let manifest = a.out.join("manifest.json");
            fs::write(&manifest, serde_json::to_string_pretty(&entries)? + "\n")?;
            println!("manifest {}", manifest.display());
        }
        Command::Eval(a) => {
            let cfg = a.run.resolve()?;
            let count = a.count.unwrap_or(cfg.eval_count);
            let model = harness::load_model(&cfg, &a.checkpoint)?;
            let scores = harness::evaluate(&model, &cfg, count)?;
            let summary = harness::summary(&cfg, &scores);
            let path = a.out.unwrap_or_else(|| cfg.out_dir.join("summary.json"));
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            summary.write(&path)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
    }
    Ok(())
}

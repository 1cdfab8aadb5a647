//! Run configuration files: `key = value` lines under `[section]` headers,
//! `#` comments. Unknown sections and keys are errors.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use thiserror::Error;
use unicon_core::adapter::{AdapterConfig, AdapterTopology, FlowMode};
use unicon_core::backbone::{BackboneConfig, BackboneKind};
use unicon_core::connector::ConnectorKind;
use unicon_core::data::ConditionKind;
use unicon_core::dit::DitConfig;
use unicon_core::optim::AdamWConfig;
use unicon_core::unet::UnetConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config io: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("line {line}: unknown section [{name}]")]
    UnknownSection { line: usize, name: String },
    #[error("line {line}: unknown key `{key}` in [{section}]")]
    UnknownKey { line: usize, section: String, key: String },
    #[error("line {line}: bad value `{value}` for `{key}`: {message}")]
    BadValue { line: usize, key: String, value: String, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

pub const DEFAULT_STEPS: usize = 3000;
pub const DEFAULT_BATCH: usize = 16;
pub const DEFAULT_LR: f32 = 2e-4;
pub const DEFAULT_LOG_EVERY: usize = 10;
pub const DEFAULT_SAMPLER_STEPS: usize = 24;
pub const DEFAULT_EVAL_COUNT: usize = 64;
pub const DEFAULT_BASE_STEPS: usize = 5000;

/// Everything needed to reproduce one run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub backbone: BackboneConfig,
    /// `None` trains the bare backbone.
    pub adapter: Option<AdapterConfig>,
    pub task: ConditionKind,
    pub steps: usize,
    pub batch: usize,
    pub optimizer: AdamWConfig,
    pub seed: u64,
    pub log_every: usize,
    pub out_dir: PathBuf,
    /// Pre-trained base to load; pre-trained and cached here when missing.
    pub base_checkpoint: Option<PathBuf>,
    pub base_steps: usize,
    pub sampler_steps: usize,
    pub eval_count: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            backbone: BackboneConfig::default_for(BackboneKind::Dit),
            adapter: Some(AdapterConfig::default()),
            task: ConditionKind::Sr4x,
            steps: DEFAULT_STEPS,
            batch: DEFAULT_BATCH,
            optimizer: AdamWConfig {
                lr: DEFAULT_LR,
                ..AdamWConfig::default()
            },
            seed: 0,
            log_every: DEFAULT_LOG_EVERY,
            out_dir: PathBuf::from("runs/default"),
            base_checkpoint: None,
            base_steps: DEFAULT_BASE_STEPS,
            sampler_steps: DEFAULT_SAMPLER_STEPS,
            eval_count: DEFAULT_EVAL_COUNT,
        }
    }
}

fn list(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", ")
}

impl RunConfig {
    pub fn with_backbone(kind: BackboneKind) -> Self {
        let mut cfg = RunConfig {
            backbone: BackboneConfig::default_for(kind),
            ..RunConfig::default()
        };
        if let Some(a) = cfg.adapter.as_mut() {
            a.backbone = kind;
        }
        cfg
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.batch == 0 {
            return bad("batch must be positive".into());
        }
        if self.log_every == 0 {
            return bad("log_every must be positive".into());
        }
        if self.sampler_steps == 0 {
            return bad("sampler steps must be positive".into());
        }
        if !(self.optimizer.lr >= 0.0) {
            return bad(format!("learning rate {} is not a non-negative number", self.optimizer.lr));
        }
        if let Some(a) = &self.adapter {
            if a.backbone != self.backbone.kind() {
                return bad(format!(
                    "adapter targets {} but the backbone is {}",
                    a.backbone.name(),
                    self.backbone.kind().name()
                ));
            }
            a.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        }
        self.backbone.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }

    /// Canonical text form; `parse(to_text())` reproduces `self`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let w = &mut s;
        writeln!(w, "[backbone]").unwrap();
        writeln!(w, "kind = {}", self.backbone.kind().name()).unwrap();
        match &self.backbone {
            BackboneConfig::Dit(c) => {
                for (k, v) in [
                    ("image", c.image),
                    ("channels", c.channels),
                    ("patch", c.patch),
                    ("hidden", c.hidden),
                    ("heads", c.heads),
                    ("blocks", c.blocks),
                    ("time_dim", c.time_dim),
                    ("classes", c.classes),
                    ("label_tokens", c.label_tokens),
                    ("mlp_ratio", c.mlp_ratio),
                ] {
                    writeln!(w, "{k} = {v}").unwrap();
                }
            }
            BackboneConfig::Unet(c) => {
                writeln!(w, "image = {}", c.image).unwrap();
                writeln!(w, "channels = {}", c.channels).unwrap();
                writeln!(w, "widths = {}", list(&c.widths)).unwrap();
                writeln!(w, "groups = {}", c.groups).unwrap();
                writeln!(w, "time_dim = {}", c.time_dim).unwrap();
                writeln!(w, "emb_dim = {}", c.emb_dim).unwrap();
                writeln!(w, "classes = {}", c.classes).unwrap();
            }
        }
        writeln!(w, "\n[adapter]").unwrap();
        match &self.adapter {
            None => writeln!(w, "enabled = false").unwrap(),
            Some(a) => {
                writeln!(w, "enabled = true").unwrap();
                writeln!(w, "flow = {}", a.flow.name()).unwrap();
                writeln!(w, "topology = {}", a.topology.name()).unwrap();
                writeln!(w, "connector = {}", a.connector.name()).unwrap();
                writeln!(w, "keep_cross_attention = {}", a.keep_cross_attention).unwrap();
                writeln!(w, "controller_sees_input = {}", a.controller_sees_input).unwrap();
                writeln!(w, "drop_base_decoder = {}", a.drop_base_decoder).unwrap();
            }
        }
        writeln!(w, "\n[task]\nkind = {}", self.task.name()).unwrap();
        let o = &self.optimizer;
        writeln!(w, "\n[train]").unwrap();
        writeln!(w, "steps = {}", self.steps).unwrap();
        writeln!(w, "batch = {}", self.batch).unwrap();
        writeln!(w, "lr = {:?}", o.lr).unwrap();
        writeln!(w, "beta1 = {:?}", o.beta1).unwrap();
        writeln!(w, "beta2 = {:?}", o.beta2).unwrap();
        writeln!(w, "eps = {:?}", o.eps).unwrap();
        writeln!(w, "weight_decay = {:?}", o.weight_decay).unwrap();
        writeln!(w, "seed = {}", self.seed).unwrap();
        writeln!(w, "log_every = {}", self.log_every).unwrap();
        writeln!(w, "\n[run]").unwrap();
        writeln!(w, "out_dir = {}", self.out_dir.display()).unwrap();
        if let Some(p) = &self.base_checkpoint {
            writeln!(w, "base_checkpoint = {}", p.display()).unwrap();
        }
        writeln!(w, "base_steps = {}", self.base_steps).unwrap();
        writeln!(w, "\n[sample]").unwrap();
        writeln!(w, "steps = {}", self.sampler_steps).unwrap();
        writeln!(w, "eval_count = {}", self.eval_count).unwrap();
        s
    }

    /// Eight hex digits identifying the canonical text.
    pub fn hash(&self) -> String {
        format!("{:08x}", crc32fast::hash(self.to_text().as_bytes()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        parse(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ConfigError> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }
}

struct Entry<'a> {
    line: usize,
    section: &'a str,
    key: &'a str,
    value: &'a str,
}

impl Entry<'_> {
    fn bad<T>(&self, message: impl Into<String>) -> Result<T, ConfigError> {
        Err(ConfigError::BadValue {
            line: self.line,
            key: self.key.into(),
            value: self.value.into(),
            message: message.into(),
        })
    }

    fn num<T: std::str::FromStr>(&self) -> Result<T, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        self.value.parse().or_else(|e: T::Err| self.bad(e.to_string()))
    }

    fn flag(&self) -> Result<bool, ConfigError> {
        match self.value {
            "true" => Ok(true),
            "false" => Ok(false),
            _ => self.bad("expected true or false"),
        }
    }

    fn unknown<T>(&self) -> Result<T, ConfigError> {
        Err(ConfigError::UnknownKey {
            line: self.line,
            section: self.section.into(),
            key: self.key.into(),
        })
    }
}

const SECTIONS: [&str; 6] = ["backbone", "adapter", "task", "train", "run", "sample"];

fn lex(text: &str) -> Result<Vec<Entry<'_>>, ConfigError> {
    let mut section: Option<&str> = None;
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        if let Some(rest) = content.strip_prefix('[') {
            let name = rest.strip_suffix(']').ok_or_else(|| ConfigError::Syntax {
                line,
                message: "unterminated section header".into(),
            })?;
            let name = name.trim();
            if !SECTIONS.contains(&name) {
                return Err(ConfigError::UnknownSection { line, name: name.into() });
            }
            section = Some(name);
            continue;
        }
        let (key, value) = content.split_once('=').ok_or_else(|| ConfigError::Syntax {
            line,
            message: format!("expected `key = value`, got `{content}`"),
        })?;
        let section = section.ok_or_else(|| ConfigError::Syntax {
            line,
            message: "key outside of any section".into(),
        })?;
        let key = key.trim();
        if !seen.insert((section, key)) {
            return Err(ConfigError::Syntax {
                line,
                message: format!("duplicate key `{key}` in [{section}]"),
            });
        }
        out.push(Entry {
            line,
            section,
            key,
            value: value.trim(),
        });
    }
    Ok(out)
}

/// Parses a config file; missing keys keep their defaults.
pub fn parse(text: &str) -> Result<RunConfig, ConfigError> {
    let entries = lex(text)?;
    let kind = match entries.iter().find(|e| e.section == "backbone" && e.key == "kind") {
        Some(e) => BackboneKind::parse(e.value).map_or_else(|| e.bad("expected dit or unet"), Ok)?,
        None => BackboneKind::Dit,
    };
    let mut cfg = RunConfig::with_backbone(kind);
    let mut adapter = cfg.adapter.expect("default has an adapter");
    let mut adapter_enabled = true;

    for e in &entries {
        match (e.section, e.key) {
            ("backbone", "kind") => {}
            ("backbone", _) => set_backbone(&mut cfg.backbone, e)?,
            ("adapter", "enabled") => adapter_enabled = e.flag()?,
            ("adapter", "preset") => {
                let keep = adapter;
                adapter = AdapterConfig::preset(e.value, kind).or_else(|err| e.bad(err.to_string()))?;
                adapter.keep_cross_attention = keep.keep_cross_attention;
            }
            ("adapter", "flow") => {
                adapter.flow = FlowMode::parse(e.value).map_or_else(|| e.bad("expected unidirectional or bidirectional"), Ok)?
            }
            ("adapter", "topology") => {
                adapter.topology = AdapterTopology::parse(e.value)
                    .map_or_else(|| e.bad("expected encoder, decoder, skip-layer or full"), Ok)?
            }
            ("adapter", "connector") => {
                adapter.connector = ConnectorKind::parse(e.value)
                    .map_or_else(|| e.bad("expected zero-mlp, zero-ft or share-attn"), Ok)?
            }
            ("adapter", "keep_cross_attention") => adapter.keep_cross_attention = e.flag()?,
            ("adapter", "controller_sees_input") => adapter.controller_sees_input = e.flag()?,
            ("adapter", "drop_base_decoder") => adapter.drop_base_decoder = e.flag()?,
            ("task", "kind") => {
                cfg.task = ConditionKind::parse(e.value).map_or_else(|| e.bad("expected edge, sr4x or blur-sr4x"), Ok)?
            }
            ("train", "steps") => cfg.steps = e.num()?,
            ("train", "batch") => cfg.batch = e.num()?,
            ("train", "lr") => cfg.optimizer.lr = e.num()?,
            ("train", "beta1") => cfg.optimizer.beta1 = e.num()?,
            ("train", "beta2") => cfg.optimizer.beta2 = e.num()?,
            ("train", "eps") => cfg.optimizer.eps = e.num()?,
            ("train", "weight_decay") => cfg.optimizer.weight_decay = e.num()?,
            ("train", "seed") => cfg.seed = e.num()?,
            ("train", "log_every") => cfg.log_every = e.num()?,
            ("run", "out_dir") => cfg.out_dir = PathBuf::from(e.value),
            ("run", "base_checkpoint") => cfg.base_checkpoint = Some(PathBuf::from(e.value)),
            ("run", "base_steps") => cfg.base_steps = e.num()?,
            ("sample", "steps") => cfg.sampler_steps = e.num()?,
            ("sample", "eval_count") => cfg.eval_count = e.num()?,
            _ => return e.unknown(),
        }
    }
    cfg.adapter = adapter_enabled.then_some(adapter);
    cfg.validate()?;
    Ok(cfg)
}

fn set_backbone(backbone: &mut BackboneConfig, e: &Entry) -> Result<(), ConfigError> {
    match backbone {
        BackboneConfig::Dit(c) => set_dit(c, e),
        BackboneConfig::Unet(c) => set_unet(c, e),
    }
}

fn set_dit(c: &mut DitConfig, e: &Entry) -> Result<(), ConfigError> {
    let slot = match e.key {
        "image" => &mut c.image,
        "channels" => &mut c.channels,
        "patch" => &mut c.patch,
        "hidden" => &mut c.hidden,
        "heads" => &mut c.heads,
        "blocks" => &mut c.blocks,
        "time_dim" => &mut c.time_dim,
        "classes" => &mut c.classes,
        "label_tokens" => &mut c.label_tokens,
        "mlp_ratio" => &mut c.mlp_ratio,
        _ => return e.unknown(),
    };
    *slot = e.num()?;
    Ok(())
}

fn set_unet(c: &mut UnetConfig, e: &Entry) -> Result<(), ConfigError> {
    let slot = match e.key {
        "widths" => {
            let parts: Vec<usize> = e
                .value
                .split(',')
                .map(|p| p.trim().parse::<usize>())
                .collect::<Result<_, _>>()
                .or_else(|err| e.bad(err.to_string()))?;
            c.widths = parts.try_into().or_else(|_| e.bad("expected three widths"))?;
            return Ok(());
        }
        "image" => &mut c.image,
        "channels" => &mut c.channels,
        "groups" => &mut c.groups,
        "time_dim" => &mut c.time_dim,
        "emb_dim" => &mut c.emb_dim,
        "classes" => &mut c.classes,
        _ => return e.unknown(),
    };
    *slot = e.num()?;
    Ok(())
}

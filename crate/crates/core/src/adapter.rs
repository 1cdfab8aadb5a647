//! Controllers attached to a frozen backbone.
//!
//! Bidirectional flow (ControlNet-style) feeds controller features back into
//! the base stream, so the loss reaches the controller through recorded base
//! ops. Unidirectional flow (UniCon) runs the base with recording disabled,
//! feeds its detached features into the controller stream and takes the
//! prediction from the controller's own head.
//!
//! The controller stream is seeded at the entry of the first selected block
//! σ₀ with the condition embedding plus the base stream's input to σ₀ (the
//! image embedding when σ₀ = 0).

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::backbone::{
    Backbone, BackboneConfig, BackboneKind, Block, ConditioningInputs, DiffusionModel, EpsModel, ForwardOptions, Head,
    Stream, TimeCond, TimeEmbedder,
};
use crate::connector::{Connector, ConnectorKind};
use crate::error::{invalid, shape_err, Error, Result};
use crate::nn::{self, Conv, CopySpec, Linear};
use crate::param::{ComponentTag, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AdapterTopology {
    Encoder,
    Decoder,
    SkipLayer,
    Full,
}

impl AdapterTopology {
    pub const ALL: [AdapterTopology; 4] = [
        AdapterTopology::Encoder,
        AdapterTopology::Decoder,
        AdapterTopology::SkipLayer,
        AdapterTopology::Full,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AdapterTopology::Encoder => "encoder",
            AdapterTopology::Decoder => "decoder",
            AdapterTopology::SkipLayer => "skip-layer",
            AdapterTopology::Full => "full",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.name() == s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FlowMode {
    Bidirectional,
    Unidirectional,
}

impl FlowMode {
    pub const ALL: [FlowMode; 2] = [FlowMode::Bidirectional, FlowMode::Unidirectional];

    pub fn name(self) -> &'static str {
        match self {
            FlowMode::Bidirectional => "bidirectional",
            FlowMode::Unidirectional => "unidirectional",
        }
    }

    /// Accepts the mode names and the `controlnet` / `unicon` aliases.
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "bidirectional" | "controlnet" => Some(FlowMode::Bidirectional),
            "unidirectional" | "unicon" => Some(FlowMode::Unidirectional),
            _ => None,
        }
    }

    pub fn family(self) -> &'static str {
        match self {
            FlowMode::Bidirectional => "controlnet",
            FlowMode::Unidirectional => "unicon",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct AdapterConfig {
    pub topology: AdapterTopology,
    pub flow: FlowMode,
    pub connector: ConnectorKind,
    pub keep_cross_attention: bool,
    pub backbone: BackboneKind,
    /// Bidirectional only: also add the base stream's entry features to the
    /// controller input (standard ControlNet). Off reproduces the bare
    /// condition-only controller input.
    pub controller_sees_input: bool,
    /// Decoder + unidirectional only: skip base blocks in the second half.
    pub drop_base_decoder: bool,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        AdapterConfig {
            topology: AdapterTopology::Full,
            flow: FlowMode::Unidirectional,
            connector: ConnectorKind::ZeroFt,
            keep_cross_attention: true,
            backbone: BackboneKind::Dit,
            controller_sees_input: true,
            drop_base_decoder: false,
        }
    }
}

impl AdapterConfig {
    pub fn new(flow: FlowMode, topology: AdapterTopology, connector: ConnectorKind, backbone: BackboneKind) -> Self {
        AdapterConfig {
            topology,
            flow,
            connector,
            backbone,
            ..AdapterConfig::default()
        }
    }

    /// Parses presets such as `unicon-full` or `controlnet-skip-layer`.
    /// Bidirectional presets default to the zero-mlp connector.
    pub fn preset(name: &str, backbone: BackboneKind) -> Result<Self> {
        let (family, topo) = name
            .split_once('-')
            .ok_or_else(|| Error::InvalidConfig(format!("unknown adapter preset '{name}'")))?;
        let flow = match family {
            "unicon" => FlowMode::Unidirectional,
            "controlnet" => FlowMode::Bidirectional,
            _ => return Err(Error::InvalidConfig(format!("unknown adapter preset '{name}'"))),
        };
        let topology = AdapterTopology::parse(topo)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown topology in preset '{name}'")))?;
        let connector = match flow {
            FlowMode::Unidirectional => ConnectorKind::ZeroFt,
            FlowMode::Bidirectional => ConnectorKind::ZeroMlp,
        };
        let cfg = AdapterConfig::new(flow, topology, connector, backbone);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn label(&self) -> String {
        format!("{}-{}", self.flow.family(), self.topology.name())
    }

    /// Skip-layer unidirectional controllers are buildable but cannot start
    /// as an identity of the base, and train unstably.
    pub fn known_unstable(&self) -> bool {
        self.topology == AdapterTopology::SkipLayer && self.flow == FlowMode::Unidirectional
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("{}: {m}", self.label())));
        if self.flow == FlowMode::Unidirectional && self.topology == AdapterTopology::Encoder {
            return bad("a unidirectional encoder leaves the controller without the output half");
        }
        if self.drop_base_decoder
            && (self.flow != FlowMode::Unidirectional || self.topology != AdapterTopology::Decoder)
        {
            return bad("drop_base_decoder needs the decoder topology with unidirectional flow");
        }
        if self.backbone == BackboneKind::Unet {
            if !matches!(self.topology, AdapterTopology::Encoder | AdapterTopology::Full) {
                return bad("U-Net controllers must start at the first block (encoder or full)");
            }
            if self.connector == ConnectorKind::ShareAttn {
                return bad("share-attn connectors need attention layers (DiT only)");
            }
            if !self.keep_cross_attention {
                return bad("the U-Net has no cross-attention to drop");
            }
        }
        Ok(())
    }

    /// Every (topology, flow, connector) combination for `backbone` that
    /// passes validation.
    pub fn all_valid(backbone: BackboneKind) -> Vec<AdapterConfig> {
        let mut out = Vec::new();
        for topology in AdapterTopology::ALL {
            for flow in FlowMode::ALL {
                for connector in ConnectorKind::ALL {
                    let cfg = AdapterConfig::new(flow, topology, connector, backbone);
                    if cfg.validate().is_ok() {
                        out.push(cfg);
                    }
                }
            }
        }
        out
    }
}

/// Block indices σ bridged by a topology over `n_blocks` base blocks.
pub fn select_blocks(topology: AdapterTopology, n_blocks: usize) -> Result<Vec<usize>> {
    if n_blocks == 0 || n_blocks % 2 != 0 {
        return invalid(format!("block count must be even and positive, got {n_blocks}"));
    }
    let half = n_blocks / 2;
    Ok(match topology {
        AdapterTopology::Encoder => (0..half).collect(),
        AdapterTopology::Decoder => (half..n_blocks).collect(),
        AdapterTopology::SkipLayer => (0..n_blocks).step_by(2).collect(),
        AdapterTopology::Full => (0..n_blocks).collect(),
    })
}

/// Condition-image embedder: two 3×3 conv + SiLU stages and a zero-init
/// projection to the stream width (after patchify for DiT).
#[derive(Clone, Debug)]
pub struct CondEmbedder {
    pub conv1: Conv,
    pub conv2: Conv,
    pub tail: CondTail,
}

#[derive(Clone, Debug)]
pub enum CondTail {
    Tokens { proj: Linear, patch: usize },
    Map(Conv),
}

pub const COND_HIDDEN: usize = 16;

impl CondEmbedder {
    pub fn new(store: &mut ParamStore, config: &BackboneConfig, rng: &mut Rng) -> Self {
        let tag = ComponentTag::CondEmbedder;
        let ch = config.channels();
        let conv1 = Conv::new(store, "cond.conv1", ch, COND_HIDDEN, 3, 1, tag, rng);
        let conv2 = Conv::new(store, "cond.conv2", COND_HIDDEN, COND_HIDDEN, 3, 1, tag, rng);
        let tail = match config {
            BackboneConfig::Dit(c) => CondTail::Tokens {
                proj: Linear::zeros(store, "cond.proj", c.patch * c.patch * COND_HIDDEN, c.hidden, tag, rng),
                patch: c.patch,
            },
            BackboneConfig::Unet(c) => CondTail::Map(Conv::zeros(store, "cond.proj", COND_HIDDEN, c.widths[0], 1, tag, rng)),
        };
        CondEmbedder { conv1, conv2, tail }
    }

    /// Embeds a condition image given in `[0, 1]` (rescaled to `[-1, 1]`).
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, cond: &Tensor) -> Result<Tensor> {
        tape.scoped(ComponentTag::CondEmbedder, |tape| {
            let x = tape.scale(cond, 2.0)?;
            let x = tape.add(&x, &Tensor::scalar(-1.0))?;
            let h = self.conv1.forward(tape, store, &x)?;
            let h = tape.silu(&h)?;
            let h = self.conv2.forward(tape, store, &h)?;
            let h = tape.silu(&h)?;
            match &self.tail {
                CondTail::Tokens { proj, patch } => {
                    let t = nn::patchify(tape, &h, *patch)?;
                    proj.forward(tape, store, &t)
                }
                CondTail::Map(c) => c.forward(tape, store, &h),
            }
        })
    }

    pub fn tail_params(&self) -> [ParamId; 2] {
        match &self.tail {
            CondTail::Tokens { proj, .. } => proj.params(),
            CondTail::Map(c) => c.params(),
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.conv1.params().to_vec();
        p.extend(self.conv2.params());
        p.extend(self.tail_params());
        p
    }
}

/// Trainable copies of the selected base blocks plus their own embedders.
#[derive(Clone, Debug)]
pub struct Controller {
    pub blocks: Vec<Block>,
    pub time: TimeEmbedder,
    /// Output projection; present for unidirectional flow only.
    pub head: Option<Head>,
}

impl Controller {
    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.time.params();
        for b in &self.blocks {
            p.extend(b.params());
        }
        if let Some(h) = &self.head {
            p.extend(h.params());
        }
        p
    }
}

/// A frozen base wired to a trainable controller.
#[derive(Clone, Debug)]
pub struct AdaptedModel {
    pub config: AdapterConfig,
    pub store: ParamStore,
    pub base: Backbone,
    pub sigma: Vec<usize>,
    pub controller: Controller,
    pub connectors: Vec<Connector>,
    pub cond_embedder: CondEmbedder,
}

/// Builds an adapter around a copy of `base`, freezing every base parameter.
pub fn build_adapter(base: &DiffusionModel, cfg: AdapterConfig, rng: &mut Rng) -> Result<AdaptedModel> {
    cfg.validate()?;
    if cfg.backbone != base.net.kind() {
        return invalid(format!(
            "adapter expects a {} backbone, got {}",
            cfg.backbone.name(),
            base.net.kind().name()
        ));
    }
    let n = base.net.n_blocks();
    let sigma = select_blocks(cfg.topology, n)?;
    let mut store = base.store.clone();
    store.freeze_all();
    let net = base.net.clone();

    let tag = ComponentTag::Adapter;
    let blocks = sigma
        .iter()
        .enumerate()
        .map(|(j, &i)| {
            let prefix = format!("adapter.blocks.{j}");
            net.blocks[i].copy(&mut store, CopySpec { prefix: &prefix, tag }, cfg.keep_cross_attention)
        })
        .collect();
    let time = net
        .time
        .copy(&mut store, CopySpec { prefix: "adapter.time", tag }, cfg.keep_cross_attention);
    let head = (cfg.flow == FlowMode::Unidirectional)
        .then(|| net.head.copy(&mut store, CopySpec { prefix: "adapter.head", tag }));

    let mut crng = rng.split(0xC0);
    let mut connectors = Vec::with_capacity(sigma.len());
    for (j, &i) in sigma.iter().enumerate() {
        let width = match net.config {
            BackboneConfig::Dit(c) => c.hidden,
            BackboneConfig::Unet(c) => c.block_shape(i)[0],
        };
        connectors.push(Connector::new(
            &mut store,
            &format!("connector.{j}"),
            cfg.connector,
            cfg.backbone,
            width,
            &mut crng,
        )?);
    }
    let cond_embedder = CondEmbedder::new(&mut store, &net.config, &mut rng.split(0xE0));
    Ok(AdaptedModel {
        config: cfg,
        store,
        base: net,
        sigma,
        controller: Controller { blocks, time, head },
        connectors,
        cond_embedder,
    })
}

impl AdaptedModel {
    /// Parameter names per component, in registration order.
    pub fn param_names(&self, tag: ComponentTag) -> Vec<&str> {
        self.store
            .iter()
            .filter(|(_, p)| p.tag == tag)
            .map(|(_, p)| p.name.as_str())
            .collect()
    }

    pub fn controller_param_count(&self) -> usize {
        self.controller.params().iter().map(|&p| self.store.get(p).len()).sum()
    }

    pub fn base_param_count(&self) -> usize {
        self.base.params().iter().map(|&p| self.store.get(p).len()).sum()
    }

    /// The frozen base on its own, for comparisons.
    pub fn base_forward(&self, tape: &mut Tape, x_t: &Tensor, cond: &ConditioningInputs) -> Result<Tensor> {
        Ok(self.base.forward(tape, &self.store, x_t, cond, ForwardOptions::default())?.0)
    }

    pub fn forward(&self, tape: &mut Tape, x_t: &Tensor, cond: &ConditioningInputs) -> Result<Tensor> {
        match self.config.flow {
            FlowMode::Bidirectional => controlnet_forward(self, tape, x_t, cond),
            FlowMode::Unidirectional => unicon_forward(self, tape, x_t, cond),
        }
    }

    fn embed_condition(&self, tape: &mut Tape, x_t: &Tensor, cond: &ConditioningInputs) -> Result<Tensor> {
        let img = cond
            .cond_image
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("adapter forward needs a condition image".into()))?;
        if img.shape() != x_t.shape() {
            return shape_err("condition image", img.shape(), x_t.shape());
        }
        self.cond_embedder.forward(tape, &self.store, img)
    }

    fn controller_time(&self, tape: &mut Tape, cond: &ConditioningInputs) -> Result<TimeCond> {
        tape.scoped(ComponentTag::Adapter, |tape| {
            self.controller.time.forward(tape, &self.store, &cond.timesteps, &cond.labels)
        })
    }

    /// Runs controller block `j` and pushes its skip when it is an encoder block.
    fn controller_block(&self, tape: &mut Tape, j: usize, c: Stream, tc: &TimeCond) -> Result<Stream> {
        let block = &self.controller.blocks[j];
        tape.scoped(ComponentTag::Adapter, |tape| block.forward(tape, &self.store, c, tc))
    }
}

/// Starting controller stream: condition embedding plus entry features.
fn seed_controller(tape: &mut Tape, cond_emb: &Tensor, entry: Option<&Tensor>) -> Result<Stream> {
    match entry {
        Some(x) => tape.scoped(ComponentTag::CondEmbedder, |tape| Ok(Stream::new(tape.add(cond_emb, x)?))),
        None => Ok(Stream::new(cond_emb.clone())),
    }
}

fn check_flow(m: &AdaptedModel, flow: FlowMode) -> Result<()> {
    if m.config.flow != flow {
        return invalid(format!("{} forward called on a {} adapter", flow.name(), m.config.flow.name()));
    }
    Ok(())
}

/// Bidirectional forward: controller outputs are added back into the base
/// stream, and the base head makes the prediction.
pub fn controlnet_forward(m: &AdaptedModel, tape: &mut Tape, x_t: &Tensor, cond: &ConditioningInputs) -> Result<Tensor> {
    check_flow(m, FlowMode::Bidirectional)?;
    let store = &m.store;
    let base = &m.base;
    let prev = tape.set_tag(ComponentTag::Base);
    let out = (|| {
        let tc = base.embed_time(tape, store, cond)?;
        let mut x = base.embed_image(tape, store, x_t)?;
        let tcc = m.controller_time(tape, cond)?;
        let cond_emb = m.embed_condition(tape, x_t, cond)?;
        let x_embed = x.h.clone();
        x.h = tape.scoped(ComponentTag::CondEmbedder, |tape| tape.add(&x.h, &cond_emb))?;

        let mut c: Option<Stream> = None;
        let mut j = 0;
        for (i, block) in base.blocks.iter().enumerate() {
            if i == m.sigma[0] {
                let entry = if i == 0 { &x_embed } else { &x.h };
                c = Some(seed_controller(tape, &cond_emb, m.config.controller_sees_input.then_some(entry))?);
            }
            x = block.forward(tape, store, x, &tc)?;
            if m.sigma.get(j) == Some(&i) {
                let mut cs = m.controller_block(tape, j, c.take().expect("controller stream seeded"), &tcc)?;
                if m.controller.blocks[j].pushes_skip() {
                    cs.skips.push(cs.h.clone());
                }
                x.h = m.connectors[j].forward(tape, store, &cs.h, &x.h, block.self_attention())?;
                c = Some(cs);
                j += 1;
            }
            if block.pushes_skip() {
                x.skips.push(x.h.clone());
            }
        }
        base.head.forward(tape, store, &x, &tc)
    })();
    tape.set_tag(prev);
    out
}

/// Unidirectional forward: the base runs with recording disabled and its
/// detached features flow into the controller, whose head predicts.
pub fn unicon_forward(m: &AdaptedModel, tape: &mut Tape, x_t: &Tensor, cond: &ConditioningInputs) -> Result<Tensor> {
    check_flow(m, FlowMode::Unidirectional)?;
    if m.config.topology == AdapterTopology::Encoder {
        return invalid("unidirectional encoder adapters are not supported");
    }
    let store = &m.store;
    let base = &m.base;
    let n = base.n_blocks();
    let head = m
        .controller
        .head
        .as_ref()
        .ok_or_else(|| Error::InvalidConfig("unidirectional adapter without a controller head".into()))?;
    let prev = tape.set_tag(ComponentTag::Base);
    let out = (|| {
        let (tc, mut x) = tape.no_grad(|tape| -> Result<_> {
            let tc = base.embed_time(tape, store, cond)?;
            let x = base.embed_image(tape, store, x_t)?;
            Ok((tc.detach(), x.detach()))
        })?;
        let tcc = m.controller_time(tape, cond)?;
        let cond_emb = m.embed_condition(tape, x_t, cond)?;

        let mut c: Option<Stream> = None;
        let mut j = 0;
        for (i, block) in base.blocks.iter().enumerate() {
            if i == m.sigma[0] {
                c = Some(seed_controller(tape, &cond_emb, Some(&x.h))?);
            }
            let skip_base = m.config.drop_base_decoder && i >= n / 2;
            if !skip_base {
                x = tape.no_grad(|tape| block.forward(tape, store, x, &tc))?.detach();
                if block.pushes_skip() {
                    x.skips.push(x.h.clone());
                }
            }
            if m.sigma.get(j) == Some(&i) {
                let mut cs = m.controller_block(tape, j, c.take().expect("controller stream seeded"), &tcc)?;
                let ctrl_block = &m.controller.blocks[j];
                cs.h = m.connectors[j].forward(tape, store, &x.h, &cs.h, ctrl_block.self_attention())?;
                if ctrl_block.pushes_skip() {
                    cs.skips.push(cs.h.clone());
                }
                c = Some(cs);
                j += 1;
            }
        }
        let c = c.expect("controller stream seeded");
        tape.scoped(ComponentTag::Adapter, |tape| head.forward(tape, store, &c, &tcc))
    })();
    tape.set_tag(prev);
    out
}

impl EpsModel for AdaptedModel {
    fn params(&self) -> &ParamStore {
        &self.store
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn predict(&self, tape: &mut Tape, x_t: &Tensor, cond: &ConditioningInputs) -> Result<Tensor> {
        self.forward(tape, x_t, cond)
    }
}

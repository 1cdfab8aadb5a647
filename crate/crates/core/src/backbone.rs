//! Common surface of the two backbones: image/time embedding, an indexable
//! block list and an output head. Adapters drive these pieces block by block.

use alloc::format;
use alloc::vec::Vec;

use crate::dit::{Dit, DitBlock, DitConfig, FinalLayer};
use crate::error::{invalid, Result};
use crate::nn::{self, CopySpec, Linear};
use crate::param::{ComponentTag, Init, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::unet::{Unet, UnetBlock, UnetConfig, UnetHead};

/// Hidden state flowing through a stack of blocks. `skips` is only used by
/// the U-Net (encoder outputs awaiting their decoder level).
#[derive(Clone, Debug)]
pub struct Stream {
    pub h: Tensor,
    pub skips: Vec<Tensor>,
}

impl Stream {
    pub fn new(h: Tensor) -> Self {
        Stream { h, skips: Vec::new() }
    }

    pub fn detach(&self) -> Stream {
        Stream {
            h: self.h.detach(),
            skips: self.skips.iter().map(Tensor::detach).collect(),
        }
    }
}

/// Timestep/label conditioning consumed by every block.
#[derive(Clone, Debug)]
pub struct TimeCond {
    pub t_emb: Tensor,
    /// Label context tokens `[B, L, D]` for cross-attention (DiT only).
    pub ctx: Option<Tensor>,
}

impl TimeCond {
    pub fn detach(&self) -> TimeCond {
        TimeCond {
            t_emb: self.t_emb.detach(),
            ctx: self.ctx.as_ref().map(Tensor::detach),
        }
    }
}

/// Batched `(t, label, condition image)` for one forward pass.
#[derive(Clone, Debug)]
pub struct ConditioningInputs {
    pub timesteps: Vec<usize>,
    pub labels: Vec<usize>,
    pub cond_image: Option<Tensor>,
}

impl ConditioningInputs {
    pub fn new(timesteps: Vec<usize>, labels: Vec<usize>) -> Self {
        ConditioningInputs {
            timesteps,
            labels,
            cond_image: None,
        }
    }

    pub fn with_cond(mut self, cond_image: Tensor) -> Self {
        self.cond_image = Some(cond_image);
        self
    }

    pub fn batch(&self) -> usize {
        self.timesteps.len()
    }
}

/// Sinusoidal timestep features → 2-layer MLP, plus a learned label
/// embedding and (optionally) label context tokens.
#[derive(Clone, Debug)]
pub struct TimeEmbedder {
    pub lin1: Linear,
    pub lin2: Linear,
    pub label: Option<ParamId>,
    pub ctx: Option<ParamId>,
    pub time_dim: usize,
    pub dim: usize,
    pub classes: usize,
    pub label_tokens: usize,
}

impl TimeEmbedder {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        time_dim: usize,
        dim: usize,
        classes: usize,
        label_tokens: usize,
        rng: &mut Rng,
    ) -> Self {
        let tag = ComponentTag::Base;
        TimeEmbedder {
            lin1: Linear::new(store, &format!("{name}.lin1"), time_dim, dim, tag, rng),
            lin2: Linear::new(store, &format!("{name}.lin2"), dim, dim, tag, rng),
            label: Some(store.add(format!("{name}.label"), &[classes, dim], Init::Normal(0.1), tag, rng)),
            ctx: (label_tokens > 0).then(|| {
                store.add(format!("{name}.ctx"), &[classes, label_tokens * dim], Init::Normal(0.5), tag, rng)
            }),
            time_dim,
            dim,
            classes,
            label_tokens,
        }
    }

    /// Copy for a controller; without labels the copy has no label path at all.
    pub fn copy(&self, store: &mut ParamStore, spec: CopySpec, with_labels: bool) -> Self {
        let copy_opt = |store: &mut ParamStore, p: Option<ParamId>, n: &str| {
            p.filter(|_| with_labels).map(|p| store.copy_param(p, spec.name(n), spec.tag))
        };
        TimeEmbedder {
            lin1: self.lin1.copy(store, spec, "lin1"),
            lin2: self.lin2.copy(store, spec, "lin2"),
            label: copy_opt(store, self.label, "label"),
            ctx: copy_opt(store, self.ctx, "ctx"),
            ..*self
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, timesteps: &[usize], labels: &[usize]) -> Result<TimeCond> {
        if timesteps.len() != labels.len() {
            return invalid("timestep and label batch sizes differ");
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= self.classes) {
            return invalid(format!("label {l} out of range for {} classes", self.classes));
        }
        let feat = nn::timestep_features(timesteps, self.time_dim);
        let h = self.lin1.forward(tape, store, &feat)?;
        let h = tape.silu(&h)?;
        let mut t_emb = self.lin2.forward(tape, store, &h)?;
        let onehot = nn::one_hot(labels, self.classes);
        if let Some(label) = self.label {
            let table = tape.param(store, label);
            let e = tape.matmul(&onehot, &table)?;
            t_emb = tape.add(&t_emb, &e)?;
        }
        let ctx = match self.ctx {
            Some(ctx) => {
                let table = tape.param(store, ctx);
                let c = tape.matmul(&onehot, &table)?;
                Some(tape.reshape(&c, &[labels.len(), self.label_tokens, self.dim])?)
            }
            None => None,
        };
        Ok(TimeCond { t_emb, ctx })
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.lin1.params().to_vec();
        p.extend(self.lin2.params());
        p.extend(self.label);
        p.extend(self.ctx);
        p
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BackboneKind {
    Dit,
    Unet,
}

impl BackboneKind {
    pub fn name(self) -> &'static str {
        match self {
            BackboneKind::Dit => "dit",
            BackboneKind::Unet => "unet",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "dit" => Some(BackboneKind::Dit),
            "unet" => Some(BackboneKind::Unet),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BackboneConfig {
    Dit(DitConfig),
    Unet(UnetConfig),
}

impl BackboneConfig {
    pub fn default_for(kind: BackboneKind) -> Self {
        match kind {
            BackboneKind::Dit => BackboneConfig::Dit(DitConfig::default()),
            BackboneKind::Unet => BackboneConfig::Unet(UnetConfig::default()),
        }
    }

    pub fn kind(&self) -> BackboneKind {
        match self {
            BackboneConfig::Dit(_) => BackboneKind::Dit,
            BackboneConfig::Unet(_) => BackboneKind::Unet,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            BackboneConfig::Dit(c) => c.validate(),
            BackboneConfig::Unet(c) => c.validate(),
        }
    }

    pub fn image(&self) -> usize {
        match self {
            BackboneConfig::Dit(c) => c.image,
            BackboneConfig::Unet(c) => c.image,
        }
    }

    pub fn channels(&self) -> usize {
        match self {
            BackboneConfig::Dit(c) => c.channels,
            BackboneConfig::Unet(c) => c.channels,
        }
    }

    pub fn classes(&self) -> usize {
        match self {
            BackboneConfig::Dit(c) => c.classes,
            BackboneConfig::Unet(c) => c.classes,
        }
    }
}

#[derive(Clone, Debug)]
pub enum Block {
    Dit(DitBlock),
    Unet(UnetBlock),
}

impl Block {
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, stream: Stream, cond: &TimeCond) -> Result<Stream> {
        self.forward_with(tape, store, stream, cond, false)
    }

    pub fn forward_with(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        stream: Stream,
        cond: &TimeCond,
        drop_skip: bool,
    ) -> Result<Stream> {
        match self {
            Block::Dit(b) => {
                let h = b.forward(tape, store, &stream.h, cond)?;
                Ok(Stream { h, skips: stream.skips })
            }
            Block::Unet(b) => b.forward(tape, store, stream, cond, drop_skip),
        }
    }

    /// Encoder blocks hand their (post-connector) output to the decoder.
    pub fn pushes_skip(&self) -> bool {
        matches!(self, Block::Unet(b) if b.pushes_skip)
    }

    pub fn pops_skip(&self) -> bool {
        matches!(self, Block::Unet(b) if b.pops_skip)
    }

    pub fn copy(&self, store: &mut ParamStore, spec: CopySpec, keep_cross_attention: bool) -> Block {
        match self {
            Block::Dit(b) => Block::Dit(b.copy(store, spec, keep_cross_attention)),
            Block::Unet(b) => Block::Unet(b.copy(store, spec)),
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        match self {
            Block::Dit(b) => b.params(),
            Block::Unet(b) => b.params(),
        }
    }

    /// Self-attention of a DiT block (shared by the attention connector).
    pub fn self_attention(&self) -> Option<&nn::Attention> {
        match self {
            Block::Dit(b) => Some(&b.attn),
            Block::Unet(_) => None,
        }
    }
}

#[derive(Clone, Debug)]
pub enum Head {
    Dit(FinalLayer),
    Unet(UnetHead),
}

impl Head {
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, stream: &Stream, cond: &TimeCond) -> Result<Tensor> {
        match self {
            Head::Dit(h) => h.forward(tape, store, &stream.h, cond),
            Head::Unet(h) => h.forward(tape, store, &stream.h),
        }
    }

    pub fn copy(&self, store: &mut ParamStore, spec: CopySpec) -> Head {
        match self {
            Head::Dit(h) => Head::Dit(h.copy(store, spec)),
            Head::Unet(h) => Head::Unet(h.copy(store, spec)),
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        match self {
            Head::Dit(h) => h.params(),
            Head::Unet(h) => h.params(),
        }
    }
}

/// A frozen-or-trainable backbone, addressed block by block.
#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub blocks: Vec<Block>,
    pub head: Head,
    pub time: TimeEmbedder,
    embed: ImageEmbed,
}

#[derive(Clone, Debug)]
enum ImageEmbed {
    Dit(Dit),
    Unet(Unet),
}

/// Options for [`Backbone::forward`].
#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions {
    /// Return every block output.
    pub trace: bool,
    /// Run with recording disabled; trace tensors carry no tape node.
    pub inference_only: bool,
    /// Replace the skip input of this decoder block with zeros (U-Net).
    pub drop_skip_block: Option<usize>,
}

/// Ordered per-block outputs of one forward pass.
pub type BlockTrace = Vec<Tensor>;

impl Backbone {
    /// Builds a backbone whose parameters are tagged `base` and trainable.
    pub fn build(store: &mut ParamStore, config: BackboneConfig, rng: &mut Rng) -> Result<Self> {
        Ok(match config {
            BackboneConfig::Dit(cfg) => {
                let dit = Dit::build(store, cfg, rng)?;
                Backbone {
                    config,
                    blocks: dit.blocks.iter().cloned().map(Block::Dit).collect(),
                    head: Head::Dit(dit.head.clone()),
                    time: dit.time.clone(),
                    embed: ImageEmbed::Dit(dit),
                }
            }
            BackboneConfig::Unet(cfg) => {
                let unet = Unet::build(store, cfg, rng)?;
                Backbone {
                    config,
                    blocks: unet.blocks.iter().cloned().map(Block::Unet).collect(),
                    head: Head::Unet(unet.head.clone()),
                    time: unet.time.clone(),
                    embed: ImageEmbed::Unet(unet),
                }
            }
        })
    }

    pub fn kind(&self) -> BackboneKind {
        self.config.kind()
    }

    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn embed_image(&self, tape: &mut Tape, store: &ParamStore, x: &Tensor) -> Result<Stream> {
        match &self.embed {
            ImageEmbed::Dit(d) => d.embed_image(tape, store, x),
            ImageEmbed::Unet(u) => u.embed_image(tape, store, x),
        }
    }

    pub fn image_embed_params(&self) -> Vec<ParamId> {
        match &self.embed {
            ImageEmbed::Dit(d) => d.embed.params(),
            ImageEmbed::Unet(u) => u.stem.params().to_vec(),
        }
    }

    pub fn embed_time(&self, tape: &mut Tape, store: &ParamStore, cond: &ConditioningInputs) -> Result<TimeCond> {
        self.time.forward(tape, store, &cond.timesteps, &cond.labels)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.image_embed_params();
        p.extend(self.time.params());
        for b in &self.blocks {
            p.extend(b.params());
        }
        p.extend(self.head.params());
        p
    }

    /// Full forward pass, attributed to the `base` component.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x_t: &Tensor,
        cond: &ConditioningInputs,
        opts: ForwardOptions,
    ) -> Result<(Tensor, Option<BlockTrace>)> {
        let prev_enabled = tape.is_enabled();
        if opts.inference_only {
            tape.set_enabled(false);
        }
        let prev_tag = tape.set_tag(ComponentTag::Base);
        let out = self.forward_inner(tape, store, x_t, cond, opts);
        tape.set_tag(prev_tag);
        tape.set_enabled(prev_enabled);
        out
    }

    fn forward_inner(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x_t: &Tensor,
        cond: &ConditioningInputs,
        opts: ForwardOptions,
    ) -> Result<(Tensor, Option<BlockTrace>)> {
        if cond.batch() != x_t.shape().first().copied().unwrap_or(0) {
            return invalid("conditioning batch differs from input batch");
        }
        let tc = self.embed_time(tape, store, cond)?;
        let mut stream = self.embed_image(tape, store, x_t)?;
        let mut trace = opts.trace.then(Vec::new);
        for (i, block) in self.blocks.iter().enumerate() {
            stream = block.forward_with(tape, store, stream, &tc, opts.drop_skip_block == Some(i))?;
            if block.pushes_skip() {
                stream.skips.push(stream.h.clone());
            }
            if let Some(t) = trace.as_mut() {
                t.push(stream.h.clone());
            }
        }
        let eps = self.head.forward(tape, store, &stream, &tc)?;
        Ok((eps, trace))
    }
}

/// Anything that predicts the noise of `x_t`.
pub trait EpsModel {
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
    fn predict(&self, tape: &mut Tape, x_t: &Tensor, cond: &ConditioningInputs) -> Result<Tensor>;
}

/// A bare backbone with its own parameter store.
#[derive(Clone, Debug)]
pub struct DiffusionModel {
    pub store: ParamStore,
    pub net: Backbone,
}

impl DiffusionModel {
    pub fn new(config: BackboneConfig, seed: u64) -> Result<Self> {
        let mut rng = Rng::new(seed).split(0xBA5E);
        let mut store = ParamStore::new();
        let net = Backbone::build(&mut store, config, &mut rng)?;
        Ok(DiffusionModel { store, net })
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        x_t: &Tensor,
        cond: &ConditioningInputs,
        opts: ForwardOptions,
    ) -> Result<(Tensor, Option<BlockTrace>)> {
        self.net.forward(tape, &self.store, x_t, cond, opts)
    }
}

impl EpsModel for DiffusionModel {
    fn params(&self) -> &ParamStore {
        &self.store
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn predict(&self, tape: &mut Tape, x_t: &Tensor, cond: &ConditioningInputs) -> Result<Tensor> {
        Ok(self.net.forward(tape, &self.store, x_t, cond, ForwardOptions::default())?.0)
    }
}

/// `backbone_forward`: prediction plus optional per-block trace.
pub fn backbone_forward(
    model: &DiffusionModel,
    tape: &mut Tape,
    x_t: &Tensor,
    cond: &ConditioningInputs,
    trace: bool,
    inference_only: bool,
) -> Result<(Tensor, Option<BlockTrace>)> {
    model.forward(
        tape,
        x_t,
        cond,
        ForwardOptions {
            trace,
            inference_only,
            drop_skip_block: None,
        },
    )
}

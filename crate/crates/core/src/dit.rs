//! TinyDiT: patch tokens, simplified adaLN (per-block additive shifts from the
//! timestep/label embedding) and a cross-attention sublayer over label tokens.

use alloc::format;
use alloc::vec::Vec;

use crate::backbone::{Stream, TimeCond, TimeEmbedder};
use crate::error::{invalid, Result};
use crate::nn::{self, Attention, CopySpec, Linear};
use crate::param::{ComponentTag, Init, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DitConfig {
    pub image: usize,
    pub channels: usize,
    pub patch: usize,
    pub hidden: usize,
    pub heads: usize,
    pub blocks: usize,
    pub time_dim: usize,
    pub classes: usize,
    /// Context tokens per label for cross-attention.
    pub label_tokens: usize,
    pub mlp_ratio: usize,
}

impl Default for DitConfig {
    fn default() -> Self {
        DitConfig {
            image: 32,
            channels: 1,
            patch: 4,
            hidden: 64,
            heads: 4,
            blocks: 8,
            time_dim: 64,
            classes: 8,
            label_tokens: 4,
            mlp_ratio: 4,
        }
    }
}

impl DitConfig {
    pub fn tokens(&self) -> usize {
        (self.image / self.patch) * (self.image / self.patch)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 || self.blocks % 2 != 0 {
            return invalid(format!("DiT block count must be even, got {}", self.blocks));
        }
        if self.patch == 0 || self.heads == 0 || self.image == 0 || self.hidden == 0 {
            return invalid("DiT sizes must be positive");
        }
        if self.image % self.patch != 0 || self.hidden % self.heads != 0 {
            return invalid("DiT patch must divide image and heads must divide hidden");
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct PatchEmbed {
    pub proj: Linear,
    pub pos: ParamId,
    pub patch: usize,
}

impl PatchEmbed {
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let tokens = nn::patchify(tape, x, self.patch)?;
        let h = self.proj.forward(tape, store, &tokens)?;
        let pos = tape.param(store, self.pos);
        tape.add(&h, &pos)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.proj.params().to_vec();
        p.push(self.pos);
        p
    }
}

#[derive(Clone, Debug)]
pub struct DitBlock {
    pub ada: Linear,
    pub attn: Attention,
    pub xattn: Option<Attention>,
    pub mlp1: Linear,
    pub mlp2: Linear,
    pub dim: usize,
}

impl DitBlock {
    fn new(store: &mut ParamStore, name: &str, cfg: &DitConfig, rng: &mut Rng) -> Self {
        let (d, tag) = (cfg.hidden, ComponentTag::Base);
        DitBlock {
            ada: Linear::new(store, &format!("{name}.ada"), d, 2 * d, tag, rng),
            attn: Attention::new(store, &format!("{name}.attn"), d, cfg.heads, tag, rng),
            xattn: Some(Attention::new(store, &format!("{name}.xattn"), d, cfg.heads, tag, rng)),
            mlp1: Linear::new(store, &format!("{name}.mlp1"), d, cfg.mlp_ratio * d, tag, rng),
            mlp2: Linear::new(store, &format!("{name}.mlp2"), cfg.mlp_ratio * d, d, tag, rng),
            dim: d,
        }
    }

    pub fn copy(&self, store: &mut ParamStore, spec: CopySpec, keep_cross_attention: bool) -> Self {
        DitBlock {
            ada: self.ada.copy(store, spec, "ada"),
            attn: self.attn.copy(store, spec, "attn"),
            xattn: if keep_cross_attention {
                self.xattn.as_ref().map(|a| a.copy(store, spec, "xattn"))
            } else {
                None
            },
            mlp1: self.mlp1.copy(store, spec, "mlp1"),
            mlp2: self.mlp2.copy(store, spec, "mlp2"),
            dim: self.dim,
        }
    }

    /// `x [B, N, D]`, conditioned on `cond.t_emb [B, D]` and label tokens.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: &Tensor, cond: &TimeCond) -> Result<Tensor> {
        let d = self.dim;
        let b = x.shape()[0];
        let s = tape.silu(&cond.t_emb)?;
        let shifts = self.ada.forward(tape, store, &s)?;
        let shift_attn = tape.slice(&shifts, 1, 0, d)?;
        let shift_attn = tape.reshape(&shift_attn, &[b, 1, d])?;
        let shift_mlp = tape.slice(&shifts, 1, d, d)?;
        let shift_mlp = tape.reshape(&shift_mlp, &[b, 1, d])?;

        let h = tape.layer_norm(x)?;
        let h = tape.add(&h, &shift_attn)?;
        let a = self.attn.forward(tape, store, &h, &h)?;
        let mut x = tape.add(x, &a)?;

        if let (Some(xattn), Some(ctx)) = (&self.xattn, &cond.ctx) {
            let h = tape.layer_norm(&x)?;
            let a = xattn.forward(tape, store, &h, ctx)?;
            x = tape.add(&x, &a)?;
        }

        let h = tape.layer_norm(&x)?;
        let h = tape.add(&h, &shift_mlp)?;
        let h = self.mlp1.forward(tape, store, &h)?;
        let h = tape.gelu(&h)?;
        let h = self.mlp2.forward(tape, store, &h)?;
        tape.add(&x, &h)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.ada.params().to_vec();
        p.extend(self.attn.params());
        if let Some(x) = &self.xattn {
            p.extend(x.params());
        }
        p.extend(self.mlp1.params());
        p.extend(self.mlp2.params());
        p
    }
}

#[derive(Clone, Debug)]
pub struct FinalLayer {
    pub ada: Linear,
    pub proj: Linear,
    pub cfg: DitConfig,
}

impl FinalLayer {
    pub fn copy(&self, store: &mut ParamStore, spec: CopySpec) -> Self {
        FinalLayer {
            ada: self.ada.copy(store, spec, "ada"),
            proj: self.proj.copy(store, spec, "proj"),
            cfg: self.cfg,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: &Tensor, cond: &TimeCond) -> Result<Tensor> {
        let (b, d) = (x.shape()[0], self.cfg.hidden);
        let s = tape.silu(&cond.t_emb)?;
        let shift = self.ada.forward(tape, store, &s)?;
        let shift = tape.reshape(&shift, &[b, 1, d])?;
        let h = tape.layer_norm(x)?;
        let h = tape.add(&h, &shift)?;
        let y = self.proj.forward(tape, store, &h)?;
        let c = &self.cfg;
        nn::unpatchify(tape, &y, c.patch, c.channels, c.image, c.image)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.ada.params().to_vec();
        p.extend(self.proj.params());
        p
    }
}

#[derive(Clone, Debug)]
pub struct Dit {
    pub cfg: DitConfig,
    pub embed: PatchEmbed,
    pub time: TimeEmbedder,
    pub blocks: Vec<DitBlock>,
    pub head: FinalLayer,
}

impl Dit {
    pub fn build(store: &mut ParamStore, cfg: DitConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let tag = ComponentTag::Base;
        let d = cfg.hidden;
        let embed = PatchEmbed {
            proj: Linear::new(store, "base.embed.proj", cfg.patch_dim(), d, tag, rng),
            pos: store.add("base.embed.pos", &[cfg.tokens(), d], Init::Normal(0.02), tag, rng),
            patch: cfg.patch,
        };
        let time = TimeEmbedder::new(store, "base.time", cfg.time_dim, d, cfg.classes, cfg.label_tokens, rng);
        let blocks = (0..cfg.blocks)
            .map(|i| DitBlock::new(store, &format!("base.blocks.{i}"), &cfg, rng))
            .collect();
        let head = FinalLayer {
            ada: Linear::new(store, "base.head.ada", d, d, tag, rng),
            proj: Linear::new(store, "base.head.proj", d, cfg.patch_dim(), tag, rng),
            cfg,
        };
        Ok(Dit {
            cfg,
            embed,
            time,
            blocks,
            head,
        })
    }

    pub fn embed_image(&self, tape: &mut Tape, store: &ParamStore, x: &Tensor) -> Result<Stream> {
        let c = &self.cfg;
        let expect = [x.shape().first().copied().unwrap_or(0), c.channels, c.image, c.image];
        if x.rank() != 4 || x.shape() != expect {
            return crate::error::shape_err("dit input", x.shape(), &expect);
        }
        Ok(Stream::new(self.embed.forward(tape, store, x)?))
    }
}

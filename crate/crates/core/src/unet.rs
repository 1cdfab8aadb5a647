//! TinyUNet: three resolutions, one residual block per level per side, with
//! encoder-to-decoder skip concatenation. Blocks are numbered encoder first
//! (0..levels) then decoder (levels..2·levels).

use alloc::format;
use alloc::vec::Vec;

use crate::backbone::{Stream, TimeCond, TimeEmbedder};
use crate::error::{invalid, Result};
use crate::nn::{Conv, CopySpec, Linear};
use crate::param::{ComponentTag, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct UnetConfig {
    pub image: usize,
    pub channels: usize,
    pub widths: [usize; 3],
    pub groups: usize,
    pub time_dim: usize,
    pub emb_dim: usize,
    pub classes: usize,
}

impl Default for UnetConfig {
    fn default() -> Self {
        UnetConfig {
            image: 32,
            channels: 1,
            widths: [16, 32, 64],
            groups: 4,
            time_dim: 64,
            emb_dim: 64,
            classes: 8,
        }
    }
}

impl UnetConfig {
    pub fn levels(&self) -> usize {
        self.widths.len()
    }

    pub fn blocks(&self) -> usize {
        2 * self.levels()
    }

    /// `[C, H, W]` produced by block `i`.
    pub fn block_shape(&self, i: usize) -> [usize; 3] {
        let n = self.levels();
        let level = if i < n { i } else { 2 * n - 1 - i };
        let res = self.image >> level;
        [self.widths[level], res, res]
    }

    pub fn validate(&self) -> Result<()> {
        if self.groups == 0 || self.widths.iter().any(|w| *w == 0 || w % self.groups != 0) {
            return invalid("U-Net widths must be positive multiples of the group count");
        }
        if self.image == 0 || self.image % (1 << (self.levels() - 1)) != 0 {
            return invalid("U-Net image size must be divisible by 2^(levels-1)");
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct ResBlock {
    pub conv1: Conv,
    pub temb: Linear,
    pub conv2: Conv,
    pub skip: Option<Conv>,
    pub groups: usize,
    pub cout: usize,
}

impl ResBlock {
    fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, cfg: &UnetConfig, rng: &mut Rng) -> Self {
        let tag = ComponentTag::Base;
        ResBlock {
            conv1: Conv::new(store, &format!("{name}.conv1"), cin, cout, 3, 1, tag, rng),
            temb: Linear::new(store, &format!("{name}.temb"), cfg.emb_dim, cout, tag, rng),
            conv2: Conv::new(store, &format!("{name}.conv2"), cout, cout, 3, 1, tag, rng),
            skip: (cin != cout).then(|| Conv::new(store, &format!("{name}.skip"), cin, cout, 1, 1, tag, rng)),
            groups: cfg.groups,
            cout,
        }
    }

    fn copy(&self, store: &mut ParamStore, spec: CopySpec, name: &str) -> Self {
        ResBlock {
            conv1: self.conv1.copy(store, spec, &format!("{name}.conv1")),
            temb: self.temb.copy(store, spec, &format!("{name}.temb")),
            conv2: self.conv2.copy(store, spec, &format!("{name}.conv2")),
            skip: self.skip.as_ref().map(|s| s.copy(store, spec, &format!("{name}.skip"))),
            groups: self.groups,
            cout: self.cout,
        }
    }

    fn forward(&self, tape: &mut Tape, store: &ParamStore, x: &Tensor, t_emb: &Tensor) -> Result<Tensor> {
        let b = x.shape()[0];
        let h = tape.group_norm(x, self.groups)?;
        let h = tape.silu(&h)?;
        let h = self.conv1.forward(tape, store, &h)?;
        let s = tape.silu(t_emb)?;
        let s = self.temb.forward(tape, store, &s)?;
        let s = tape.reshape(&s, &[b, self.cout, 1, 1])?;
        let h = tape.add(&h, &s)?;
        let h = tape.group_norm(&h, self.groups)?;
        let h = tape.silu(&h)?;
        let h = self.conv2.forward(tape, store, &h)?;
        match &self.skip {
            Some(skip) => {
                let r = skip.forward(tape, store, x)?;
                tape.add(&h, &r)
            }
            None => tape.add(&h, x),
        }
    }

    fn params(&self) -> Vec<ParamId> {
        let mut p = self.conv1.params().to_vec();
        p.extend(self.temb.params());
        p.extend(self.conv2.params());
        if let Some(s) = &self.skip {
            p.extend(s.params());
        }
        p
    }
}

#[derive(Clone, Debug)]
pub enum Resample {
    None,
    /// Stride-2 3×3 convolution.
    Down(Conv),
    /// Nearest 2× upsample followed by a 3×3 convolution.
    Up(Conv),
}

#[derive(Clone, Debug)]
pub struct UnetBlock {
    pub resample: Resample,
    pub res: ResBlock,
    pub pushes_skip: bool,
    pub pops_skip: bool,
}

impl UnetBlock {
    pub fn copy(&self, store: &mut ParamStore, spec: CopySpec) -> Self {
        let resample = match &self.resample {
            Resample::None => Resample::None,
            Resample::Down(c) => Resample::Down(c.copy(store, spec, "down")),
            Resample::Up(c) => Resample::Up(c.copy(store, spec, "up")),
        };
        UnetBlock {
            resample,
            res: self.res.copy(store, spec, "res"),
            pushes_skip: self.pushes_skip,
            pops_skip: self.pops_skip,
        }
    }

    /// Runs the block; decoder blocks consume the top of the skip stack
    /// (replaced by zeros when `drop_skip` is set).
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        mut stream: Stream,
        cond: &TimeCond,
        drop_skip: bool,
    ) -> Result<Stream> {
        let mut h = match &self.resample {
            Resample::None => stream.h.clone(),
            Resample::Down(c) => c.forward(tape, store, &stream.h)?,
            Resample::Up(c) => {
                let u = tape.upsample2(&stream.h)?;
                c.forward(tape, store, &u)?
            }
        };
        if self.pops_skip {
            let skip = match stream.skips.pop() {
                Some(s) => s,
                None => return invalid("decoder block with an empty skip stack"),
            };
            let skip = if drop_skip { Tensor::zeros(skip.shape()) } else { skip };
            h = tape.concat(&[&h, &skip], 1)?;
        }
        stream.h = self.res.forward(tape, store, &h, &cond.t_emb)?;
        Ok(stream)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = match &self.resample {
            Resample::None => Vec::new(),
            Resample::Down(c) | Resample::Up(c) => c.params().to_vec(),
        };
        p.extend(self.res.params());
        p
    }
}

#[derive(Clone, Debug)]
pub struct UnetHead {
    pub conv: Conv,
    pub groups: usize,
}

impl UnetHead {
    pub fn copy(&self, store: &mut ParamStore, spec: CopySpec) -> Self {
        UnetHead {
            conv: self.conv.copy(store, spec, "conv"),
            groups: self.groups,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, h: &Tensor) -> Result<Tensor> {
        let h = tape.group_norm(h, self.groups)?;
        let h = tape.silu(&h)?;
        self.conv.forward(tape, store, &h)
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.conv.params().to_vec()
    }
}

#[derive(Clone, Debug)]
pub struct Unet {
    pub cfg: UnetConfig,
    pub stem: Conv,
    pub time: TimeEmbedder,
    pub blocks: Vec<UnetBlock>,
    pub head: UnetHead,
}

impl Unet {
    pub fn build(store: &mut ParamStore, cfg: UnetConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let tag = ComponentTag::Base;
        let w = cfg.widths;
        let n = cfg.levels();
        let stem = Conv::new(store, "base.stem", cfg.channels, w[0], 3, 1, tag, rng);
        let time = TimeEmbedder::new(store, "base.time", cfg.time_dim, cfg.emb_dim, cfg.classes, 0, rng);
        let mut blocks = Vec::with_capacity(2 * n);
        for level in 0..n {
            let name = format!("base.blocks.{level}");
            let (resample, cin) = if level == 0 {
                (Resample::None, w[0])
            } else {
                let down = Conv::new(store, &format!("{name}.down"), w[level - 1], w[level - 1], 3, 2, tag, rng);
                (Resample::Down(down), w[level - 1])
            };
            blocks.push(UnetBlock {
                resample,
                res: ResBlock::new(store, &format!("{name}.res"), cin, w[level], &cfg, rng),
                pushes_skip: true,
                pops_skip: false,
            });
        }
        for j in 0..n {
            let level = n - 1 - j;
            let name = format!("base.blocks.{}", n + j);
            let (resample, cin) = if j == 0 {
                (Resample::None, w[n - 1])
            } else {
                let up = Conv::new(store, &format!("{name}.up"), w[level + 1], w[level + 1], 3, 1, tag, rng);
                (Resample::Up(up), w[level + 1])
            };
            blocks.push(UnetBlock {
                resample,
                res: ResBlock::new(store, &format!("{name}.res"), cin + w[level], w[level], &cfg, rng),
                pushes_skip: false,
                pops_skip: true,
            });
        }
        let head = UnetHead {
            conv: Conv::new(store, "base.head.conv", w[0], cfg.channels, 3, 1, tag, rng),
            groups: cfg.groups,
        };
        Ok(Unet {
            cfg,
            stem,
            time,
            blocks,
            head,
        })
    }

    pub fn embed_image(&self, tape: &mut Tape, store: &ParamStore, x: &Tensor) -> Result<Stream> {
        let c = &self.cfg;
        let expect = [x.shape().first().copied().unwrap_or(0), c.channels, c.image, c.image];
        if x.rank() != 4 || x.shape() != expect {
            return crate::error::shape_err("unet input", x.shape(), &expect);
        }
        Ok(Stream::new(self.stem.forward(tape, store, x)?))
    }
}

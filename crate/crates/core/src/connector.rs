//! Zero-initialized bridges between the base stream and the controller stream.

use alloc::format;
use alloc::vec::Vec;

use crate::backbone::BackboneKind;
use crate::error::{invalid, shape_err, Result};
use crate::nn::{Attention, Conv, Linear};
use crate::param::{ComponentTag, Init, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ConnectorKind {
    ZeroMlp,
    ZeroFt,
    ShareAttn,
}

impl ConnectorKind {
    pub const ALL: [ConnectorKind; 3] = [ConnectorKind::ZeroMlp, ConnectorKind::ZeroFt, ConnectorKind::ShareAttn];

    pub fn name(self) -> &'static str {
        match self {
            ConnectorKind::ZeroMlp => "zero-mlp",
            ConnectorKind::ZeroFt => "zero-ft",
            ConnectorKind::ShareAttn => "share-attn",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

/// A feature projection that is all-zero at init: a linear layer over the
/// last axis for token streams, a 1×1 convolution for feature maps.
#[derive(Clone, Debug)]
pub enum ZeroProj {
    Linear(Linear),
    Conv(Conv),
}

impl ZeroProj {
    pub fn new(store: &mut ParamStore, name: &str, kind: BackboneKind, width: usize, tag: ComponentTag, rng: &mut Rng) -> Self {
        match kind {
            BackboneKind::Dit => ZeroProj::Linear(Linear::zeros(store, name, width, width, tag, rng)),
            BackboneKind::Unet => ZeroProj::Conv(Conv::zeros(store, name, width, width, 1, tag, rng)),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        match self {
            ZeroProj::Linear(l) => l.forward(tape, store, x),
            ZeroProj::Conv(c) => c.forward(tape, store, x),
        }
    }

    pub fn params(&self) -> [ParamId; 2] {
        match self {
            ZeroProj::Linear(l) => l.params(),
            ZeroProj::Conv(c) => c.params(),
        }
    }
}

#[derive(Clone, Debug)]
pub enum Connector {
    /// `target + Z(source)`
    ZeroMlp(ZeroProj),
    /// `target·(1 + Z₁(source)) + Z₂(source)`
    ZeroFt { mul: ZeroProj, add: ZeroProj },
    /// `target + gate·MHA(LN(target), LN(source))`, using the attention
    /// weights of the target-side block; only the scalar gate is owned.
    ShareAttn { gate: ParamId },
}

impl Connector {
    /// Builds connector `name` for a stream of feature width `width`, tagged `connector`.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        kind: ConnectorKind,
        backbone: BackboneKind,
        width: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let tag = ComponentTag::Connector;
        Ok(match kind {
            ConnectorKind::ZeroMlp => Connector::ZeroMlp(ZeroProj::new(store, &format!("{name}.z"), backbone, width, tag, rng)),
            ConnectorKind::ZeroFt => Connector::ZeroFt {
                mul: ZeroProj::new(store, &format!("{name}.z1"), backbone, width, tag, rng),
                add: ZeroProj::new(store, &format!("{name}.z2"), backbone, width, tag, rng),
            },
            ConnectorKind::ShareAttn => {
                if backbone != BackboneKind::Dit {
                    return invalid("share-attn connectors need attention layers (DiT only)");
                }
                Connector::ShareAttn {
                    gate: store.add(format!("{name}.gate"), &[1], Init::Zeros, tag, rng),
                }
            }
        })
    }

    pub fn kind(&self) -> ConnectorKind {
        match self {
            Connector::ZeroMlp(_) => ConnectorKind::ZeroMlp,
            Connector::ZeroFt { .. } => ConnectorKind::ZeroFt,
            Connector::ShareAttn { .. } => ConnectorKind::ShareAttn,
        }
    }

    /// Transfers `source` into `target`. `attn` is the target-side block's
    /// self-attention and is required for share-attn only.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        source: &Tensor,
        target: &Tensor,
        attn: Option<&Attention>,
    ) -> Result<Tensor> {
        if source.shape() != target.shape() {
            return shape_err("connector", source.shape(), target.shape());
        }
        tape.scoped(ComponentTag::Connector, |tape| match self {
            Connector::ZeroMlp(z) => {
                let d = z.forward(tape, store, source)?;
                tape.add(target, &d)
            }
            Connector::ZeroFt { mul, add } => {
                let m = mul.forward(tape, store, source)?;
                let a = add.forward(tape, store, source)?;
                let tm = tape.mul(target, &m)?;
                let t = tape.add(target, &tm)?;
                tape.add(&t, &a)
            }
            Connector::ShareAttn { gate } => {
                let attn = match attn {
                    Some(a) if target.rank() == 3 => a,
                    _ => return invalid("share-attn connector needs token streams and an attention layer"),
                };
                let q = tape.layer_norm(target)?;
                let kv = tape.layer_norm(source)?;
                let a = attn.forward(tape, store, &q, &kv)?;
                let g = tape.param(store, *gate);
                let ga = tape.mul(&a, &g)?;
                tape.add(target, &ga)
            }
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        match self {
            Connector::ZeroMlp(z) => z.params().to_vec(),
            Connector::ZeroFt { mul, add } => {
                let mut p = mul.params().to_vec();
                p.extend(add.params());
                p
            }
            Connector::ShareAttn { gate } => alloc::vec![*gate],
        }
    }
}

/// Stand-alone `connector_forward` on a fresh connector of `kind` with the
/// stream width taken from the last axis (tokens) or channel axis (maps).
pub fn connector_forward(kind: ConnectorKind, source: &Tensor, target: &Tensor) -> Result<Tensor> {
    let mut store = ParamStore::new();
    let mut rng = Rng::new(0);
    let (backbone, width) = match target.rank() {
        3 => (BackboneKind::Dit, target.shape()[2]),
        4 => (BackboneKind::Unet, target.shape()[1]),
        _ => return shape_err("connector", source.shape(), target.shape()),
    };
    let conn = Connector::new(&mut store, "connector", kind, backbone, width, &mut rng)?;
    let attn = match kind {
        ConnectorKind::ShareAttn => {
            let heads = if width % 4 == 0 { 4 } else { 1 };
            Some(Attention::new(&mut store, "attn", width, heads, ComponentTag::Base, &mut rng))
        }
        _ => None,
    };
    let mut tape = Tape::inference();
    conn.forward(&mut tape, &store, source, target, attn.as_ref())
}

//! Layers shared by the backbones, connectors and embedders.

use alloc::format;
use alloc::vec::Vec;

use crate::error::Result;
use crate::param::{ComponentTag, Init, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// How a copied layer is named and owned.
#[derive(Clone, Copy, Debug)]
pub struct CopySpec<'a> {
    pub prefix: &'a str,
    pub tag: ComponentTag,
}

impl CopySpec<'_> {
    pub fn name(&self, suffix: &str) -> alloc::string::String {
        format!("{}.{suffix}", self.prefix)
    }
}

/// `y = x · W + b` over the last axis; `W` is `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, tag: ComponentTag, rng: &mut Rng) -> Self {
        let bound = 1.0 / libm::sqrtf(fan_in as f32);
        Linear {
            w: store.add(format!("{name}.w"), &[fan_in, fan_out], Init::Uniform(bound), tag, rng),
            b: store.add(format!("{name}.b"), &[fan_out], Init::Zeros, tag, rng),
        }
    }

    pub fn zeros(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, tag: ComponentTag, rng: &mut Rng) -> Self {
        Linear {
            w: store.add(format!("{name}.w"), &[fan_in, fan_out], Init::Zeros, tag, rng),
            b: store.add(format!("{name}.b"), &[fan_out], Init::Zeros, tag, rng),
        }
    }

    pub fn copy(&self, store: &mut ParamStore, spec: CopySpec, name: &str) -> Self {
        Linear {
            w: store.copy_param(self.w, spec.name(&format!("{name}.w")), spec.tag),
            b: store.copy_param(self.b, spec.name(&format!("{name}.b")), spec.tag),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        let y = tape.matmul(x, &w)?;
        tape.add(&y, &b)
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.w, self.b]
    }
}

/// 2-D convolution with per-channel bias; weight `[out, in, k, k]`.
#[derive(Clone, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
}

impl Conv {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        tag: ComponentTag,
        rng: &mut Rng,
    ) -> Self {
        let bound = 1.0 / libm::sqrtf((cin * k * k) as f32);
        Conv {
            w: store.add(format!("{name}.w"), &[cout, cin, k, k], Init::Uniform(bound), tag, rng),
            b: store.add(format!("{name}.b"), &[cout, 1, 1], Init::Zeros, tag, rng),
            stride,
        }
    }

    pub fn zeros(store: &mut ParamStore, name: &str, cin: usize, cout: usize, k: usize, tag: ComponentTag, rng: &mut Rng) -> Self {
        Conv {
            w: store.add(format!("{name}.w"), &[cout, cin, k, k], Init::Zeros, tag, rng),
            b: store.add(format!("{name}.b"), &[cout, 1, 1], Init::Zeros, tag, rng),
            stride: 1,
        }
    }

    pub fn copy(&self, store: &mut ParamStore, spec: CopySpec, name: &str) -> Self {
        Conv {
            w: store.copy_param(self.w, spec.name(&format!("{name}.w")), spec.tag),
            b: store.copy_param(self.b, spec.name(&format!("{name}.b")), spec.tag),
            stride: self.stride,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        let y = tape.conv2d(x, &w, self.stride)?;
        tape.add(&y, &b)
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.w, self.b]
    }
}

/// Multi-head attention composed from matmul / scale / softmax primitives.
#[derive(Clone, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, tag: ComponentTag, rng: &mut Rng) -> Self {
        Attention {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, tag, rng),
            k: Linear::new(store, &format!("{name}.k"), dim, dim, tag, rng),
            v: Linear::new(store, &format!("{name}.v"), dim, dim, tag, rng),
            o: Linear::new(store, &format!("{name}.o"), dim, dim, tag, rng),
            heads,
        }
    }

    pub fn copy(&self, store: &mut ParamStore, spec: CopySpec, name: &str) -> Self {
        Attention {
            q: self.q.copy(store, spec, &format!("{name}.q")),
            k: self.k.copy(store, spec, &format!("{name}.k")),
            v: self.v.copy(store, spec, &format!("{name}.v")),
            o: self.o.copy(store, spec, &format!("{name}.o")),
            heads: self.heads,
        }
    }

    /// Splits `[B, N, D]` into heads `[B, H, N, D/H]`.
    fn split(&self, tape: &mut Tape, x: &Tensor) -> Result<Tensor> {
        let s = x.shape();
        let (b, n, d) = (s[0], s[1], s[2]);
        let x = tape.reshape(x, &[b, n, self.heads, d / self.heads])?;
        tape.transpose(&x, &[0, 2, 1, 3])
    }

    /// `queries [B, Nq, D]` attend over `context [B, Nk, D]`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, queries: &Tensor, context: &Tensor) -> Result<Tensor> {
        let s = queries.shape();
        let (b, nq, d) = (s[0], s[1], s[2]);
        let q = self.q.forward(tape, store, queries)?;
        let k = self.k.forward(tape, store, context)?;
        let v = self.v.forward(tape, store, context)?;
        let q = self.split(tape, &q)?;
        let k = self.split(tape, &k)?;
        let v = self.split(tape, &v)?;
        let kt = tape.transpose_last(&k)?;
        let scores = tape.matmul(&q, &kt)?;
        let scores = tape.scale(&scores, 1.0 / libm::sqrtf((d / self.heads) as f32))?;
        let p = tape.softmax(&scores)?;
        let out = tape.matmul(&p, &v)?;
        let out = tape.transpose(&out, &[0, 2, 1, 3])?;
        let out = tape.reshape(&out, &[b, nq, d])?;
        self.o.forward(tape, store, &out)
    }

    pub fn params(&self) -> Vec<ParamId> {
        [&self.q, &self.k, &self.v, &self.o].iter().flat_map(|l| l.params()).collect()
    }
}

/// Sinusoidal features of integer timesteps, `[B, dim]` (constant, no parameters).
pub fn timestep_features(timesteps: &[usize], dim: usize) -> Tensor {
    let half = dim / 2;
    let mut out = Vec::with_capacity(timesteps.len() * dim);
    for &t in timesteps {
        for i in 0..half {
            let freq = libm::expf(-libm::logf(10_000.0) * i as f32 / half as f32);
            out.push(libm::cosf(t as f32 * freq));
        }
        for i in 0..half {
            let freq = libm::expf(-libm::logf(10_000.0) * i as f32 / half as f32);
            out.push(libm::sinf(t as f32 * freq));
        }
        out.resize(out.len() + (dim - 2 * half), 0.0);
    }
    Tensor::new(&[timesteps.len(), dim], out).expect("timestep feature shape")
}

/// One-hot rows `[B, classes]`.
pub fn one_hot(labels: &[usize], classes: usize) -> Tensor {
    let mut out = alloc::vec![0.0; labels.len() * classes];
    for (i, &l) in labels.iter().enumerate() {
        out[i * classes + l] = 1.0;
    }
    Tensor::new(&[labels.len(), classes], out).expect("one-hot shape")
}

/// `[B, C, H, W] -> [B, (H/p)·(W/p), p·p·C]`
pub fn patchify(tape: &mut Tape, x: &Tensor, p: usize) -> Result<Tensor> {
    let s = x.shape();
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let x = tape.reshape(x, &[b, c, h / p, p, w / p, p])?;
    let x = tape.transpose(&x, &[0, 2, 4, 3, 5, 1])?;
    tape.reshape(&x, &[b, (h / p) * (w / p), p * p * c])
}

/// Inverse of [`patchify`].
pub fn unpatchify(tape: &mut Tape, x: &Tensor, p: usize, c: usize, h: usize, w: usize) -> Result<Tensor> {
    let b = x.shape()[0];
    let x = tape.reshape(x, &[b, h / p, w / p, p, p, c])?;
    let x = tape.transpose(&x, &[0, 5, 1, 3, 2, 4])?;
    tape.reshape(&x, &[b, c, h, w])
}

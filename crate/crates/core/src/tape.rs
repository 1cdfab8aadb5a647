//! Reverse-mode tape.
//!
//! Every primitive runs through a [`Tape`]. An op is recorded only when
//! recording is enabled and at least one operand carries a node; otherwise
//! its output is a constant. Recorded ops register the tensors their backward
//! rule keeps alive in the saved registry, attributed to the tape's current
//! [`ComponentTag`]. Parameter values referenced by a backward rule are
//! weights, not activations, and are never registered.
//!
//! Saved set per primitive (elements; each costs 4 bytes):
//!
//! | primitive   | saved                                                  |
//! |-------------|--------------------------------------------------------|
//! | matmul      | lhs if rhs needs grad, rhs if lhs needs grad           |
//! | conv2d      | input if weight needs grad, weight if input needs grad |
//! | mul         | lhs if rhs needs grad, rhs if lhs needs grad           |
//! | layer_norm  | normalized output + one inverse std per row            |
//! | group_norm  | normalized output + one inverse std per (sample, group)|
//! | softmax     | output                                                 |
//! | gelu, silu  | input                                                  |
//! | mse         | difference `a - b`                                     |
//! | others      | nothing                                                |
//!
//! Forward FLOPs per primitive (backward is counted as twice the forward
//! FLOPs of every recorded op):
//!
//! | primitive          | forward FLOPs               |
//! |--------------------|-----------------------------|
//! | matmul             | 2·m·k·n per batch entry     |
//! | conv2d             | 2·k²·C_in·C_out·H_out·W_out per sample |
//! | add, mul, scale    | 1 per output element        |
//! | silu               | 4 per element               |
//! | gelu               | 8 per element               |
//! | softmax            | 5 per element               |
//! | layer_norm, group_norm | 5 per element           |
//! | mean               | 1 per input element         |
//! | mse                | 3 per input element         |
//! | reshape, transpose, concat, slice, upsample | 0  |

use alloc::format;
use alloc::rc::Rc;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::str::FromStr;

use crate::error::{invalid, shape_err, Error, Result};
use crate::kernels;
use crate::param::{ComponentTag, ParamId, ParamStore};
use crate::tensor::{numel, Tensor};

pub const NORM_EPS: f32 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Primitive {
    MatMul,
    Conv2d,
    Upsample,
    Add,
    Mul,
    Scale,
    LayerNorm,
    GroupNorm,
    Softmax,
    Gelu,
    Silu,
    Reshape,
    Transpose,
    Concat,
    Slice,
    Mean,
    Mse,
}

impl Primitive {
    pub const ALL: [Primitive; 17] = [
        Primitive::MatMul,
        Primitive::Conv2d,
        Primitive::Upsample,
        Primitive::Add,
        Primitive::Mul,
        Primitive::Scale,
        Primitive::LayerNorm,
        Primitive::GroupNorm,
        Primitive::Softmax,
        Primitive::Gelu,
        Primitive::Silu,
        Primitive::Reshape,
        Primitive::Transpose,
        Primitive::Concat,
        Primitive::Slice,
        Primitive::Mean,
        Primitive::Mse,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Primitive::MatMul => "matmul",
            Primitive::Conv2d => "conv2d",
            Primitive::Upsample => "upsample",
            Primitive::Add => "add",
            Primitive::Mul => "mul",
            Primitive::Scale => "scale",
            Primitive::LayerNorm => "layer_norm",
            Primitive::GroupNorm => "group_norm",
            Primitive::Softmax => "softmax",
            Primitive::Gelu => "gelu",
            Primitive::Silu => "silu",
            Primitive::Reshape => "reshape",
            Primitive::Transpose => "transpose",
            Primitive::Concat => "concat",
            Primitive::Slice => "slice",
            Primitive::Mean => "mean",
            Primitive::Mse => "mse",
        }
    }
}

impl FromStr for Primitive {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Primitive::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::UnknownPrimitive(s.into()))
    }
}

/// Attributes for [`Tape::apply`].
#[derive(Clone, Debug, PartialEq)]
pub enum Attrs {
    None,
    Stride(usize),
    Groups(usize),
    Factor(f32),
    Shape(Vec<usize>),
    Perm(Vec<usize>),
    Axis(usize),
    Slice { axis: usize, start: usize, len: usize },
}

/// One operand as seen by a backward rule.
#[derive(Debug)]
struct Operand {
    node: Option<NodeId>,
    value: Option<Rc<Vec<f32>>>,
}

#[derive(Debug)]
enum Op {
    Leaf(ParamId),
    MatMul {
        a: Operand,
        b: Operand,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        b_shared: bool,
    },
    Conv2d {
        x: Operand,
        w: Operand,
        batch: usize,
        cin: usize,
        h: usize,
        w_in: usize,
        cout: usize,
        k: usize,
        stride: usize,
    },
    Upsample {
        x: NodeId,
        planes: usize,
        h: usize,
        w: usize,
    },
    Add {
        a: Option<NodeId>,
        b: Option<NodeId>,
        b_len: usize,
        bcast: Option<kernels::Bcast>,
    },
    Mul {
        a: Operand,
        b: Operand,
        b_len: usize,
        bcast: Option<kernels::Bcast>,
    },
    Scale {
        x: NodeId,
        factor: f32,
    },
    Norm {
        x: NodeId,
        xhat: Rc<Vec<f32>>,
        rstd: Vec<f32>,
        group: usize,
        layer: bool,
    },
    Softmax {
        x: NodeId,
        y: Rc<Vec<f32>>,
        d: usize,
    },
    Gelu {
        x: NodeId,
        input: Rc<Vec<f32>>,
    },
    Silu {
        x: NodeId,
        input: Rc<Vec<f32>>,
    },
    Reshape {
        x: NodeId,
    },
    Transpose {
        x: NodeId,
        out_shape: Vec<usize>,
        perm: Vec<usize>,
    },
    Concat {
        parts: Vec<(Option<NodeId>, usize)>,
        outer: usize,
        inner: usize,
        total: usize,
    },
    Slice {
        x: NodeId,
        in_len: usize,
        outer: usize,
        inner: usize,
        axis_len: usize,
        start: usize,
        len: usize,
    },
    Mean {
        x: NodeId,
        n: usize,
    },
    Mse {
        a: Option<NodeId>,
        b: Option<NodeId>,
        diff: Rc<Vec<f32>>,
    },
}

impl Op {
    fn primitive(&self) -> Option<Primitive> {
        Some(match self {
            Op::Leaf(_) => return None,
            Op::MatMul { .. } => Primitive::MatMul,
            Op::Conv2d { .. } => Primitive::Conv2d,
            Op::Upsample { .. } => Primitive::Upsample,
            Op::Add { .. } => Primitive::Add,
            Op::Mul { .. } => Primitive::Mul,
            Op::Scale { .. } => Primitive::Scale,
            Op::Norm { layer: true, .. } => Primitive::LayerNorm,
            Op::Norm { layer: false, .. } => Primitive::GroupNorm,
            Op::Softmax { .. } => Primitive::Softmax,
            Op::Gelu { .. } => Primitive::Gelu,
            Op::Silu { .. } => Primitive::Silu,
            Op::Reshape { .. } => Primitive::Reshape,
            Op::Transpose { .. } => Primitive::Transpose,
            Op::Concat { .. } => Primitive::Concat,
            Op::Slice { .. } => Primitive::Slice,
            Op::Mean { .. } => Primitive::Mean,
            Op::Mse { .. } => Primitive::Mse,
        })
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    tag: ComponentTag,
    len: usize,
}

/// One registry entry: bytes a recorded op keeps alive for backward.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SavedEntry {
    pub node: NodeId,
    pub tag: ComponentTag,
    pub bytes: u64,
}

/// Per-component totals accumulated by a tape.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TagStats {
    pub saved_bytes: u64,
    pub saved_tensors: u64,
    pub nodes: u64,
    pub fp_flops: u64,
    pub bp_flops: u64,
}

impl TagStats {
    fn add(&mut self, o: &TagStats) {
        self.saved_bytes += o.saved_bytes;
        self.saved_tensors += o.saved_tensors;
        self.nodes += o.nodes;
        self.fp_flops += o.fp_flops;
        self.bp_flops += o.bp_flops;
    }
}

/// Saved-activation bytes, node counts and FLOPs keyed by component.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TapeReport {
    pub per_tag: [TagStats; 5],
}

impl TapeReport {
    pub fn get(&self, tag: ComponentTag) -> &TagStats {
        &self.per_tag[tag.index()]
    }

    pub fn total(&self) -> TagStats {
        let mut t = TagStats::default();
        for s in &self.per_tag {
            t.add(s);
        }
        t
    }
}

#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    saved: Vec<SavedEntry>,
    stats: [TagStats; 5],
    enabled: bool,
    tag: ComponentTag,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of trainable parameters, in parameter-id order.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    entries: Vec<(ParamId, String, ComponentTag, Tensor)>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|e| e.1 == name).map(|e| &e.3)
    }

    pub fn get_id(&self, id: ParamId) -> Option<&Tensor> {
        self.entries
            .binary_search_by_key(&id, |e| e.0)
            .ok()
            .map(|i| &self.entries[i].3)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.get(name).is_some()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, ComponentTag, &Tensor)> {
        self.entries.iter().map(|(id, n, tag, t)| (*id, n.as_str(), *tag, t))
    }

    pub fn bytes_by_tag(&self) -> [u64; 5] {
        let mut out = [0u64; 5];
        for (_, _, tag, t) in &self.entries {
            out[tag.index()] += t.bytes();
        }
        out
    }

    pub fn global_norm(&self) -> f32 {
        let mut s = 0.0f64;
        for (_, _, _, t) in &self.entries {
            for &g in t.data() {
                s += (g as f64) * (g as f64);
            }
        }
        libm::sqrt(s) as f32
    }
}

fn accumulate(slot: &mut Option<Vec<f32>>, contribution: Vec<f32>) {
    match slot {
        Some(acc) => {
            for (a, c) in acc.iter_mut().zip(contribution) {
                *a += c;
            }
        }
        None => *slot = Some(contribution),
    }
}

fn rows_of(shape: &[usize]) -> Result<(usize, usize)> {
    match shape.last() {
        Some(&d) if d > 0 => Ok((numel(shape) / d, d)),
        _ => invalid(format!("last-axis op on shape {shape:?}")),
    }
}

/// Shape rule for `add`/`mul`: `b` right-aligned against `a`, each dim 1 or equal.
fn broadcast_ok(a: &[usize], b: &[usize]) -> bool {
    b.len() <= a.len()
        && b
            .iter()
            .zip(&a[a.len() - b.len()..])
            .all(|(&bd, &ad)| bd == 1 || bd == ad)
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            saved: Vec::new(),
            stats: [TagStats::default(); 5],
            enabled: true,
            tag: ComponentTag::Other,
        }
    }

    /// A tape that never records; used for inference.
    pub fn inference() -> Self {
        let mut t = Self::new();
        t.enabled = false;
        t
    }

    pub fn is_enabled(&self) -> bool {
        self.enabled
    }

    pub fn set_enabled(&mut self, enabled: bool) -> bool {
        core::mem::replace(&mut self.enabled, enabled)
    }

    pub fn tag(&self) -> ComponentTag {
        self.tag
    }

    pub fn set_tag(&mut self, tag: ComponentTag) -> ComponentTag {
        core::mem::replace(&mut self.tag, tag)
    }

    /// Runs `f` with recording disabled.
    pub fn no_grad<T>(&mut self, f: impl FnOnce(&mut Tape) -> T) -> T {
        let prev = self.set_enabled(false);
        let out = f(self);
        self.enabled = prev;
        out
    }

    /// Runs `f` with ops attributed to `tag`.
    pub fn scoped<T>(&mut self, tag: ComponentTag, f: impl FnOnce(&mut Tape) -> T) -> T {
        let prev = self.set_tag(tag);
        let out = f(self);
        self.tag = prev;
        out
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Recorded nodes per component, recounted from the node list.
    pub fn nodes_by_tag(&self) -> [u64; 5] {
        let mut out = [0u64; 5];
        for n in &self.nodes {
            out[n.tag.index()] += 1;
        }
        out
    }

    /// Distinct primitive kinds among the recorded nodes, in declaration order.
    pub fn primitives_recorded(&self) -> Vec<Primitive> {
        let mut seen = [false; Primitive::ALL.len()];
        for n in &self.nodes {
            if let Some(p) = n.op.primitive() {
                seen[p as usize] = true;
            }
        }
        Primitive::ALL.into_iter().filter(|&p| seen[p as usize]).collect()
    }

    pub fn saved(&self) -> &[SavedEntry] {
        &self.saved
    }

    pub fn report(&self) -> TapeReport {
        TapeReport { per_tag: self.stats }
    }

    /// Parameter value as a tensor. Trainable parameters become leaves when
    /// recording; frozen ones are constants.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Tensor {
        let p = store.get(id);
        let mut t = p.tensor();
        if self.enabled && p.trainable {
            let tag = p.tag;
            t.node = Some(self.push(Op::Leaf(id), tag, t.len()));
        }
        t
    }

    fn push(&mut self, op: Op, tag: ComponentTag, len: usize) -> NodeId {
        self.nodes.push(Node { op, tag, len });
        self.stats[tag.index()].nodes += 1;
        NodeId(self.nodes.len() - 1)
    }

    fn recording(&self, inputs: &[&Tensor]) -> bool {
        self.enabled && inputs.iter().any(|t| t.node.is_some())
    }

    fn flops(&mut self, fp: u64, recorded: bool) {
        let s = &mut self.stats[self.tag.index()];
        s.fp_flops += fp;
        if recorded {
            s.bp_flops += 2 * fp;
        }
    }

    fn save(&mut self, node: NodeId, elems: usize) {
        let bytes = 4 * elems as u64;
        self.saved.push(SavedEntry {
            node,
            tag: self.tag,
            bytes,
        });
        let s = &mut self.stats[self.tag.index()];
        s.saved_bytes += bytes;
        s.saved_tensors += 1;
    }

    /// Keeps `t` for backward; counted as an activation unless it is a weight.
    fn keep(t: &Tensor, needed: bool, counted: &mut Vec<usize>) -> Option<Rc<Vec<f32>>> {
        if !needed {
            return None;
        }
        if !t.weight {
            counted.push(t.len());
        }
        Some(Rc::clone(t.data_rc()))
    }

    fn finish(&mut self, op: Op, shape: Vec<usize>, data: Vec<f32>, saves: &[usize]) -> Tensor {
        let len = data.len();
        let tag = self.tag;
        let id = self.push(op, tag, len);
        for &e in saves {
            self.save(id, e);
        }
        let mut t = Tensor::from_parts(shape, Rc::new(data));
        t.node = Some(id);
        t
    }

    fn constant(shape: Vec<usize>, data: Vec<f32>) -> Tensor {
        Tensor::from_parts(shape, Rc::new(data))
    }

    /// Name-based dispatch over every primitive.
    pub fn apply(&mut self, kind: Primitive, inputs: &[&Tensor], attrs: &Attrs) -> Result<Tensor> {
        let arity = |n: usize| -> Result<()> {
            if inputs.len() != n {
                return invalid(format!("{} takes {n} inputs, got {}", kind.name(), inputs.len()));
            }
            Ok(())
        };
        let bad_attrs = || invalid(format!("{}: unexpected attributes {attrs:?}", kind.name()));
        match kind {
            Primitive::Concat => match attrs {
                Attrs::Axis(axis) => self.concat(inputs, *axis),
                _ => bad_attrs(),
            },
            Primitive::MatMul | Primitive::Add | Primitive::Mul | Primitive::Mse => {
                arity(2)?;
                let (a, b) = (inputs[0], inputs[1]);
                match kind {
                    Primitive::MatMul => self.matmul(a, b),
                    Primitive::Add => self.add(a, b),
                    Primitive::Mul => self.mul(a, b),
                    _ => self.mse(a, b),
                }
            }
            Primitive::Conv2d => {
                arity(2)?;
                match attrs {
                    Attrs::Stride(s) => self.conv2d(inputs[0], inputs[1], *s),
                    Attrs::None => self.conv2d(inputs[0], inputs[1], 1),
                    _ => bad_attrs(),
                }
            }
            _ => {
                arity(1)?;
                let x = inputs[0];
                match (kind, attrs) {
                    (Primitive::Upsample, _) => self.upsample2(x),
                    (Primitive::Scale, Attrs::Factor(f)) => self.scale(x, *f),
                    (Primitive::LayerNorm, _) => self.layer_norm(x),
                    (Primitive::GroupNorm, Attrs::Groups(g)) => self.group_norm(x, *g),
                    (Primitive::Softmax, _) => self.softmax(x),
                    (Primitive::Gelu, _) => self.gelu(x),
                    (Primitive::Silu, _) => self.silu(x),
                    (Primitive::Reshape, Attrs::Shape(s)) => self.reshape(x, s),
                    (Primitive::Transpose, Attrs::Perm(p)) => self.transpose(x, p),
                    (Primitive::Slice, Attrs::Slice { axis, start, len }) => {
                        self.slice(x, *axis, *start, *len)
                    }
                    (Primitive::Mean, _) => self.mean(x),
                    _ => bad_attrs(),
                }
            }
        }
    }

    /// `a[..., m, k] · b[k, n]` (shared rhs) or `a[..., m, k] · b[..., k, n]`.
    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() < 2 || sb.len() < 2 {
            return shape_err("matmul", sa, sb);
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let lead_a = &sa[..sa.len() - 2];
        let lead_b = &sb[..sb.len() - 2];
        let b_shared = lead_b.is_empty();
        if k != kb || (!b_shared && lead_a != lead_b) {
            return shape_err("matmul", sa, sb);
        }
        let batch: usize = lead_a.iter().product();
        let mut out = vec![0.0; batch * m * n];
        if b_shared {
            kernels::matmul_acc(a.data(), b.data(), &mut out, batch * m, k, n);
        } else {
            for i in 0..batch {
                kernels::matmul_acc(
                    &a.data()[i * m * k..(i + 1) * m * k],
                    &b.data()[i * k * n..(i + 1) * k * n],
                    &mut out[i * m * n..(i + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        let mut shape = lead_a.to_vec();
        shape.extend_from_slice(&[m, n]);
        let rec = self.recording(&[a, b]);
        self.flops(2 * (batch * m * k * n) as u64, rec);
        if !rec {
            return Ok(Self::constant(shape, out));
        }
        let mut saves = Vec::new();
        let op = Op::MatMul {
            a: Operand {
                node: a.node,
                value: Self::keep(a, b.node.is_some(), &mut saves),
            },
            b: Operand {
                node: b.node,
                value: Self::keep(b, a.node.is_some(), &mut saves),
            },
            batch,
            m,
            k,
            n,
            b_shared,
        };
        Ok(self.finish(op, shape, out, &saves))
    }

    /// 2-D convolution, `x[B, C_in, H, W]`, `w[C_out, C_in, k, k]`, zero padding `k/2`.
    pub fn conv2d(&mut self, x: &Tensor, w: &Tensor, stride: usize) -> Result<Tensor> {
        let (sx, sw) = (x.shape(), w.shape());
        if sx.len() != 4 || sw.len() != 4 || sw[1] != sx[1] || sw[2] != sw[3] {
            return shape_err("conv2d", sx, sw);
        }
        let k = sw[2];
        if !(k == 1 || k == 3) || !(stride == 1 || stride == 2) {
            return invalid(format!("conv2d supports k ∈ {{1,3}}, stride ∈ {{1,2}}; got k={k}, stride={stride}"));
        }
        let (batch, cin, h, wi) = (sx[0], sx[1], sx[2], sx[3]);
        let cout = sw[0];
        let ho = kernels::conv_out_size(h, k, stride);
        let wo = kernels::conv_out_size(wi, k, stride);
        let ckk = cin * k * k;
        let mut out = vec![0.0; batch * cout * ho * wo];
        for bi in 0..batch {
            let xb = &x.data()[bi * cin * h * wi..(bi + 1) * cin * h * wi];
            let ob = &mut out[bi * cout * ho * wo..(bi + 1) * cout * ho * wo];
            if k == 1 && stride == 1 {
                kernels::matmul_acc(w.data(), xb, ob, cout, ckk, ho * wo);
            } else {
                let col = kernels::im2col(xb, cin, h, wi, k, stride);
                kernels::matmul_acc(w.data(), &col, ob, cout, ckk, ho * wo);
            }
        }
        let shape = vec![batch, cout, ho, wo];
        let rec = self.recording(&[x, w]);
        self.flops(2 * (k * k * cin * cout * ho * wo * batch) as u64, rec);
        if !rec {
            return Ok(Self::constant(shape, out));
        }
        let mut saves = Vec::new();
        let op = Op::Conv2d {
            x: Operand {
                node: x.node,
                value: Self::keep(x, w.node.is_some(), &mut saves),
            },
            w: Operand {
                node: w.node,
                value: Self::keep(w, x.node.is_some(), &mut saves),
            },
            batch,
            cin,
            h,
            w_in: wi,
            cout,
            k,
            stride,
        };
        Ok(self.finish(op, shape, out, &saves))
    }

    /// Nearest-neighbour 2× upsampling of `[B, C, H, W]`.
    pub fn upsample2(&mut self, x: &Tensor) -> Result<Tensor> {
        let s = x.shape();
        if s.len() != 4 {
            return shape_err("upsample", s, &[]);
        }
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let mut out = vec![0.0; planes * 4 * h * w];
        for p in 0..planes {
            let src = &x.data()[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * 4 * h * w..(p + 1) * 4 * h * w];
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    dst[y * 2 * w + xx] = src[(y / 2) * w + xx / 2];
                }
            }
        }
        let shape = vec![s[0], s[1], 2 * h, 2 * w];
        let rec = self.recording(&[x]);
        self.flops(0, rec);
        if !rec {
            return Ok(Self::constant(shape, out));
        }
        let op = Op::Upsample {
            x: x.node.unwrap(),
            planes,
            h,
            w,
        };
        Ok(self.finish(op, shape, out, &[]))
    }

    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if !broadcast_ok(a.shape(), b.shape()) {
            return shape_err("add", a.shape(), b.shape());
        }
        let bcast = (a.shape() != b.shape()).then(|| kernels::Bcast::new(a.shape(), b.shape()));
        let out: Vec<f32> = match &bcast {
            None => a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect(),
            Some(bc) => bc.map2(a.data(), b.data(), |x, y| x + y),
        };
        let shape = a.shape().to_vec();
        let rec = self.recording(&[a, b]);
        self.flops(out.len() as u64, rec);
        if !rec {
            return Ok(Self::constant(shape, out));
        }
        let op = Op::Add {
            a: a.node,
            b: b.node,
            b_len: b.len(),
            bcast: if b.node.is_some() { bcast } else { None },
        };
        Ok(self.finish(op, shape, out, &[]))
    }

    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if !broadcast_ok(a.shape(), b.shape()) {
            return shape_err("mul", a.shape(), b.shape());
        }
        let bcast = (a.shape() != b.shape()).then(|| kernels::Bcast::new(a.shape(), b.shape()));
        let out: Vec<f32> = match &bcast {
            None => a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect(),
            Some(bc) => bc.map2(a.data(), b.data(), |x, y| x * y),
        };
        let shape = a.shape().to_vec();
        let rec = self.recording(&[a, b]);
        self.flops(out.len() as u64, rec);
        if !rec {
            return Ok(Self::constant(shape, out));
        }
        let mut saves = Vec::new();
        let op = Op::Mul {
            a: Operand {
                node: a.node,
                value: Self::keep(a, b.node.is_some(), &mut saves),
            },
            b: Operand {
                node: b.node,
                value: Self::keep(b, a.node.is_some(), &mut saves),
            },
            b_len: b.len(),
            bcast,
        };
        Ok(self.finish(op, shape, out, &saves))
    }

    pub fn scale(&mut self, x: &Tensor, factor: f32) -> Result<Tensor> {
        let out: Vec<f32> = x.data().iter().map(|v| v * factor).collect();
        let shape = x.shape().to_vec();
        let rec = self.recording(&[x]);
        self.flops(out.len() as u64, rec);
        if !rec {
            return Ok(Self::constant(shape, out));
        }
        let op = Op::Scale {
            x: x.node.unwrap(),
            factor,
        };
        Ok(self.finish(op, shape, out, &[]))
    }

    fn normalize(&mut self, x: &Tensor, group: usize, name: &'static str) -> Result<Tensor> {
        let n = x.len();
        if group == 0 || n % group != 0 {
            return shape_err(name, x.shape(), &[group]);
        }
        let rows = n / group;
        let mut out = vec![0.0; n];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let src = &x.data()[r * group..(r + 1) * group];
            let mean = src.iter().sum::<f32>() / group as f32;
            let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / group as f32;
            let rs = 1.0 / libm::sqrtf(var + NORM_EPS);
            rstd[r] = rs;
            for (o, v) in out[r * group..(r + 1) * group].iter_mut().zip(src) {
                *o = (v - mean) * rs;
            }
        }
        let shape = x.shape().to_vec();
        let rec = self.recording(&[x]);
        self.flops(5 * n as u64, rec);
        if !rec {
            return Ok(Self::constant(shape, out));
        }
        let xhat = Rc::new(out);
        let op = Op::Norm {
            x: x.node.unwrap(),
            xhat: Rc::clone(&xhat),
            rstd,
            group,
            layer: name == "layer_norm",
        };
        let id = self.push(op, self.tag, n);
        self.save(id, n);
        self.save(id, rows);
        let mut t = Tensor::from_parts(shape, xhat);
        t.node = Some(id);
        Ok(t)
    }

    /// Normalizes over the last axis (no affine).
    pub fn layer_norm(&mut self, x: &Tensor) -> Result<Tensor> {
        let (_, d) = rows_of(x.shape())?;
        self.normalize(x, d, "layer_norm")
    }

    /// Normalizes `[B, C, H, W]` over `groups` contiguous channel groups (no affine).
    pub fn group_norm(&mut self, x: &Tensor, groups: usize) -> Result<Tensor> {
        let s = x.shape();
        if s.len() != 4 || groups == 0 || s[1] % groups != 0 {
            return shape_err("group_norm", s, &[groups]);
        }
        self.normalize(x, s[1] / groups * s[2] * s[3], "group_norm")
    }

    pub fn softmax(&mut self, x: &Tensor) -> Result<Tensor> {
        let (rows, d) = rows_of(x.shape())?;
        let mut out = vec![0.0; x.len()];
        for r in 0..rows {
            let src = &x.data()[r * d..(r + 1) * d];
            let dst = &mut out[r * d..(r + 1) * d];
            let max = src.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v));
            for (o, &v) in dst.iter_mut().zip(src) {
                *o = kernels::exp(v - max);
            }
            let sum: f32 = dst.iter().sum();
            let inv = 1.0 / sum;
            for o in dst.iter_mut() {
                *o *= inv;
            }
        }
        let shape = x.shape().to_vec();
        let rec = self.recording(&[x]);
        self.flops(5 * out.len() as u64, rec);
        if !rec {
            return Ok(Self::constant(shape, out));
        }
        let y = Rc::new(out);
        let op = Op::Softmax {
            x: x.node.unwrap(),
            y: Rc::clone(&y),
            d,
        };
        let n = y.len();
        let id = self.push(op, self.tag, n);
        self.save(id, n);
        let mut t = Tensor::from_parts(shape, y);
        t.node = Some(id);
        Ok(t)
    }

    pub fn gelu(&mut self, x: &Tensor) -> Result<Tensor> {
        let out: Vec<f32> = x.data().iter().map(|&v| kernels::gelu(v)).collect();
        let shape = x.shape().to_vec();
        let rec = self.recording(&[x]);
        self.flops(8 * out.len() as u64, rec);
        if !rec {
            return Ok(Self::constant(shape, out));
        }
        let op = Op::Gelu {
            x: x.node.unwrap(),
            input: Rc::clone(x.data_rc()),
        };
        let n = out.len();
        Ok(self.finish(op, shape, out, &[n]))
    }

    pub fn silu(&mut self, x: &Tensor) -> Result<Tensor> {
        let out: Vec<f32> = x.data().iter().map(|&v| v * kernels::sigmoid(v)).collect();
        let shape = x.shape().to_vec();
        let rec = self.recording(&[x]);
        self.flops(4 * out.len() as u64, rec);
        if !rec {
            return Ok(Self::constant(shape, out));
        }
        let op = Op::Silu {
            x: x.node.unwrap(),
            input: Rc::clone(x.data_rc()),
        };
        let n = out.len();
        Ok(self.finish(op, shape, out, &[n]))
    }

    pub fn reshape(&mut self, x: &Tensor, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != x.len() {
            return shape_err("reshape", x.shape(), shape);
        }
        let rec = self.recording(&[x]);
        let mut t = Tensor::from_parts(shape.to_vec(), Rc::clone(x.data_rc()));
        if rec {
            let id = self.push(Op::Reshape { x: x.node.unwrap() }, self.tag, x.len());
            t.node = Some(id);
        }
        Ok(t)
    }

    /// Generalized transpose: output axis `i` is input axis `perm[i]`.
    pub fn transpose(&mut self, x: &Tensor, perm: &[usize]) -> Result<Tensor> {
        let s = x.shape();
        let mut seen = vec![false; s.len()];
        if perm.len() != s.len() || perm.iter().any(|&p| p >= s.len() || core::mem::replace(&mut seen[p], true)) {
            return shape_err("transpose", s, perm);
        }
        let out = kernels::permute(x.data(), s, perm);
        let shape: Vec<usize> = perm.iter().map(|&p| s[p]).collect();
        let rec = self.recording(&[x]);
        if !rec {
            return Ok(Self::constant(shape, out));
        }
        let op = Op::Transpose {
            x: x.node.unwrap(),
            out_shape: shape.clone(),
            perm: perm.to_vec(),
        };
        Ok(self.finish(op, shape, out, &[]))
    }

    /// Swaps the last two axes.
    pub fn transpose_last(&mut self, x: &Tensor) -> Result<Tensor> {
        let r = x.rank();
        if r < 2 {
            return shape_err("transpose", x.shape(), &[]);
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 1, r - 2);
        self.transpose(x, &perm)
    }

    pub fn concat(&mut self, parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        let first = match parts.first() {
            Some(t) => t.shape(),
            None => return invalid("concat of zero tensors"),
        };
        if axis >= first.len() {
            return shape_err("concat", first, &[axis]);
        }
        for p in parts {
            let s = p.shape();
            if s.len() != first.len()
                || s.iter().zip(first).enumerate().any(|(d, (a, b))| d != axis && a != b)
            {
                return shape_err("concat", first, s);
            }
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let total: usize = parts.iter().map(|p| p.shape()[axis]).sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let chunk = p.shape()[axis] * inner;
                out.extend_from_slice(&p.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first.to_vec();
        shape[axis] = total;
        let rec = self.recording(parts);
        if !rec {
            return Ok(Self::constant(shape, out));
        }
        let op = Op::Concat {
            parts: parts.iter().map(|p| (p.node, p.shape()[axis])).collect(),
            outer,
            inner,
            total,
        };
        Ok(self.finish(op, shape, out, &[]))
    }

    pub fn slice(&mut self, x: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        let s = x.shape();
        if axis >= s.len() || start + len > s[axis] || len == 0 {
            return shape_err("slice", s, &[axis, start, len]);
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let axis_len = s[axis];
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * axis_len + start) * inner;
            out.extend_from_slice(&x.data()[base..base + len * inner]);
        }
        let mut shape = s.to_vec();
        shape[axis] = len;
        let rec = self.recording(&[x]);
        if !rec {
            return Ok(Self::constant(shape, out));
        }
        let op = Op::Slice {
            x: x.node.unwrap(),
            in_len: x.len(),
            outer,
            inner,
            axis_len,
            start,
            len,
        };
        Ok(self.finish(op, shape, out, &[]))
    }

    /// Mean of all elements (scalar output).
    pub fn mean(&mut self, x: &Tensor) -> Result<Tensor> {
        if x.is_empty() {
            return invalid("mean of empty tensor");
        }
        let n = x.len();
        let v = x.data().iter().sum::<f32>() / n as f32;
        let rec = self.recording(&[x]);
        self.flops(n as u64, rec);
        if !rec {
            return Ok(Self::constant(Vec::new(), vec![v]));
        }
        let op = Op::Mean { x: x.node.unwrap(), n };
        Ok(self.finish(op, Vec::new(), vec![v], &[]))
    }

    /// Mean squared error over all elements (scalar output).
    pub fn mse(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.shape() != b.shape() || a.is_empty() {
            return shape_err("mse", a.shape(), b.shape());
        }
        let diff: Vec<f32> = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
        let n = diff.len();
        let v = diff.iter().map(|d| d * d).sum::<f32>() / n as f32;
        let rec = self.recording(&[a, b]);
        self.flops(3 * n as u64, rec);
        if !rec {
            return Ok(Self::constant(Vec::new(), vec![v]));
        }
        let op = Op::Mse {
            a: a.node,
            b: b.node,
            diff: Rc::new(diff),
        };
        Ok(self.finish(op, Vec::new(), vec![v], &[n]))
    }

    /// Reverse pass from a scalar, tape-recorded loss.
    ///
    /// Returns gradients for exactly the trainable parameters reachable from
    /// `loss` through recorded edges. The tape is left untouched.
    pub fn backward(&self, loss: &Tensor, store: &ParamStore) -> Result<Gradients> {
        if loss.len() != 1 || !loss.shape().iter().all(|&d| d == 1) {
            return Err(Error::NonScalarLoss(loss.shape().to_vec()));
        }
        let root = match loss.node {
            Some(id) => id,
            None => return invalid("loss is not recorded on the tape"),
        };
        let mut grads: Vec<Option<Vec<f32>>> = Vec::new();
        grads.resize_with(root.0 + 1, || None);
        grads[root.0] = Some(vec![1.0]);
        let mut by_param: Vec<(ParamId, Vec<f32>)> = Vec::new();

        for idx in (0..=root.0).rev() {
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf(pid) => match by_param.iter_mut().find(|(p, _)| p == pid) {
                    Some((_, acc)) => {
                        for (a, v) in acc.iter_mut().zip(&g) {
                            *a += v;
                        }
                    }
                    None => by_param.push((*pid, g)),
                },
                Op::MatMul {
                    a,
                    b,
                    batch,
                    m,
                    k,
                    n,
                    b_shared,
                } => {
                    let (batch, m, k, n) = (*batch, *m, *k, *n);
                    if let Some(an) = a.node {
                        let bv = b.value.as_ref().unwrap();
                        let mut da = vec![0.0; batch * m * k];
                        if *b_shared {
                            kernels::matmul_nt_acc(&g, bv, &mut da, batch * m, k, n);
                        } else {
                            for i in 0..batch {
                                kernels::matmul_nt_acc(
                                    &g[i * m * n..(i + 1) * m * n],
                                    &bv[i * k * n..(i + 1) * k * n],
                                    &mut da[i * m * k..(i + 1) * m * k],
                                    m,
                                    k,
                                    n,
                                );
                            }
                        }
                        accumulate(&mut grads[an.0], da);
                    }
                    if let Some(bn) = b.node {
                        let av = a.value.as_ref().unwrap();
                        let db = if *b_shared {
                            let mut db = vec![0.0; k * n];
                            kernels::matmul_tn_acc(av, &g, &mut db, batch * m, k, n);
                            db
                        } else {
                            let mut db = vec![0.0; batch * k * n];
                            for i in 0..batch {
                                kernels::matmul_tn_acc(
                                    &av[i * m * k..(i + 1) * m * k],
                                    &g[i * m * n..(i + 1) * m * n],
                                    &mut db[i * k * n..(i + 1) * k * n],
                                    m,
                                    k,
                                    n,
                                );
                            }
                            db
                        };
                        accumulate(&mut grads[bn.0], db);
                    }
                }
                Op::Conv2d {
                    x,
                    w,
                    batch,
                    cin,
                    h,
                    w_in,
                    cout,
                    k,
                    stride,
                } => {
                    let (batch, cin, h, wi, cout, k, stride) = (*batch, *cin, *h, *w_in, *cout, *k, *stride);
                    let ho = kernels::conv_out_size(h, k, stride);
                    let wo = kernels::conv_out_size(wi, k, stride);
                    let ckk = cin * k * k;
                    let plane = cin * h * wi;
                    let oplane = cout * ho * wo;
                    let direct = k == 1 && stride == 1;
                    let mut dx = x.node.map(|_| vec![0.0; batch * plane]);
                    let mut dw = w.node.map(|_| vec![0.0; cout * ckk]);
                    for bi in 0..batch {
                        let gb = &g[bi * oplane..(bi + 1) * oplane];
                        if let Some(dw) = dw.as_mut() {
                            let xb = &x.value.as_ref().unwrap()[bi * plane..(bi + 1) * plane];
                            if direct {
                                kernels::matmul_nt_acc(gb, xb, dw, cout, ckk, ho * wo);
                            } else {
                                let col = kernels::im2col(xb, cin, h, wi, k, stride);
                                kernels::matmul_nt_acc(gb, &col, dw, cout, ckk, ho * wo);
                            }
                        }
                        if let Some(dx) = dx.as_mut() {
                            let wv = w.value.as_ref().unwrap();
                            let dxb = &mut dx[bi * plane..(bi + 1) * plane];
                            if direct {
                                kernels::matmul_tn_acc(wv, gb, dxb, cout, ckk, ho * wo);
                            } else {
                                let mut dcol = vec![0.0; ckk * ho * wo];
                                kernels::matmul_tn_acc(wv, gb, &mut dcol, cout, ckk, ho * wo);
                                kernels::col2im_acc(&dcol, dxb, cin, h, wi, k, stride);
                            }
                        }
                    }
                    if let (Some(xn), Some(dx)) = (x.node, dx) {
                        accumulate(&mut grads[xn.0], dx);
                    }
                    if let (Some(wn), Some(dw)) = (w.node, dw) {
                        accumulate(&mut grads[wn.0], dw);
                    }
                }
                Op::Upsample { x, planes, h, w } => {
                    let (h, w) = (*h, *w);
                    let mut dx = vec![0.0; planes * h * w];
                    for p in 0..*planes {
                        let src = &g[p * 4 * h * w..(p + 1) * 4 * h * w];
                        let dst = &mut dx[p * h * w..(p + 1) * h * w];
                        for y in 0..2 * h {
                            for xx in 0..2 * w {
                                dst[(y / 2) * w + xx / 2] += src[y * 2 * w + xx];
                            }
                        }
                    }
                    accumulate(&mut grads[x.0], dx);
                }
                Op::Add { a, b, b_len, bcast } => {
                    if let Some(bn) = b {
                        let db = match bcast {
                            None => g.clone(),
                            Some(bc) => {
                                let mut db = vec![0.0; *b_len];
                                bc.reduce(&g, None, &mut db);
                                db
                            }
                        };
                        accumulate(&mut grads[bn.0], db);
                    }
                    if let Some(an) = a {
                        accumulate(&mut grads[an.0], g);
                    }
                }
                Op::Mul { a, b, b_len, bcast } => {
                    if let Some(an) = a.node {
                        let bv = b.value.as_ref().unwrap();
                        let da: Vec<f32> = match bcast {
                            None => g.iter().zip(bv.iter()).map(|(x, y)| x * y).collect(),
                            Some(bc) => bc.map2(&g, bv, |x, y| x * y),
                        };
                        accumulate(&mut grads[an.0], da);
                    }
                    if let Some(bn) = b.node {
                        let av = a.value.as_ref().unwrap();
                        let db = match bcast {
                            None => g.iter().zip(av.iter()).map(|(x, y)| x * y).collect(),
                            Some(bc) => {
                                let mut db = vec![0.0; *b_len];
                                bc.reduce(&g, Some(av), &mut db);
                                db
                            }
                        };
                        accumulate(&mut grads[bn.0], db);
                    }
                }
                Op::Scale { x, factor } => {
                    let dx = g.iter().map(|v| v * factor).collect();
                    accumulate(&mut grads[x.0], dx);
                }
                Op::Norm { x, xhat, rstd, group, .. } => {
                    let group = *group;
                    let mut dx = vec![0.0; g.len()];
                    for (r, rs) in rstd.iter().enumerate() {
                        let gr = &g[r * group..(r + 1) * group];
                        let xr = &xhat[r * group..(r + 1) * group];
                        let mg = gr.iter().sum::<f32>() / group as f32;
                        let mgx = gr.iter().zip(xr).map(|(a, b)| a * b).sum::<f32>() / group as f32;
                        for ((d, gv), xv) in dx[r * group..(r + 1) * group].iter_mut().zip(gr).zip(xr) {
                            *d = rs * (gv - mg - xv * mgx);
                        }
                    }
                    accumulate(&mut grads[x.0], dx);
                }
                Op::Softmax { x, y, d } => {
                    let d = *d;
                    let mut dx = vec![0.0; g.len()];
                    for r in 0..g.len() / d {
                        let gr = &g[r * d..(r + 1) * d];
                        let yr = &y[r * d..(r + 1) * d];
                        let dot: f32 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for ((o, gv), yv) in dx[r * d..(r + 1) * d].iter_mut().zip(gr).zip(yr) {
                            *o = yv * (gv - dot);
                        }
                    }
                    accumulate(&mut grads[x.0], dx);
                }
                Op::Gelu { x, input } => {
                    let dx = g
                        .iter()
                        .zip(input.iter())
                        .map(|(gv, &v)| gv * kernels::gelu_grad(v))
                        .collect();
                    accumulate(&mut grads[x.0], dx);
                }
                Op::Silu { x, input } => {
                    let dx = g
                        .iter()
                        .zip(input.iter())
                        .map(|(gv, &v)| {
                            let s = kernels::sigmoid(v);
                            gv * s * (1.0 + v * (1.0 - s))
                        })
                        .collect();
                    accumulate(&mut grads[x.0], dx);
                }
                Op::Reshape { x } => accumulate(&mut grads[x.0], g),
                Op::Transpose { x, out_shape, perm } => {
                    let dx = kernels::permute(&g, out_shape, &kernels::inverse_perm(perm));
                    accumulate(&mut grads[x.0], dx);
                }
                Op::Concat {
                    parts,
                    outer,
                    inner,
                    total,
                } => {
                    let mut offset = 0;
                    for (pn, plen) in parts {
                        if let Some(pn) = pn {
                            let chunk = plen * inner;
                            let mut dp = Vec::with_capacity(outer * chunk);
                            for o in 0..*outer {
                                let base = (o * total + offset) * inner;
                                dp.extend_from_slice(&g[base..base + chunk]);
                            }
                            accumulate(&mut grads[pn.0], dp);
                        }
                        offset += plen;
                    }
                }
                Op::Slice {
                    x,
                    in_len,
                    outer,
                    inner,
                    axis_len,
                    start,
                    len,
                } => {
                    let mut dx = vec![0.0; *in_len];
                    for o in 0..*outer {
                        let base = (o * axis_len + start) * inner;
                        let chunk = len * inner;
                        dx[base..base + chunk].copy_from_slice(&g[o * chunk..(o + 1) * chunk]);
                    }
                    accumulate(&mut grads[x.0], dx);
                }
                Op::Mean { x, n } => {
                    let v = g[0] / *n as f32;
                    accumulate(&mut grads[x.0], vec![v; *n]);
                }
                Op::Mse { a, b, diff } => {
                    let c = 2.0 * g[0] / diff.len() as f32;
                    if let Some(an) = a {
                        accumulate(&mut grads[an.0], diff.iter().map(|d| c * d).collect());
                    }
                    if let Some(bn) = b {
                        accumulate(&mut grads[bn.0], diff.iter().map(|d| -c * d).collect());
                    }
                }
            }
            debug_assert!(node.len > 0);
        }

        by_param.sort_by_key(|(p, _)| *p);
        let entries = by_param
            .into_iter()
            .map(|(pid, g)| {
                let p = store.get(pid);
                (pid, p.name.clone(), p.tag, Tensor::from_parts(p.shape.clone(), Rc::new(g)))
            })
            .collect();
        Ok(Gradients { entries })
    }
}

/// Forward + backward cost report of everything recorded on `tape` so far.
pub fn tape_report(tape: &Tape) -> TapeReport {
    tape.report()
}

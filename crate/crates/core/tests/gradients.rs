//! Central-difference checks of every primitive's backward rule.

use unicon_core::gradcheck::{finite_difference_check, FdReport};
use unicon_core::tape::{Attrs, Primitive};
use unicon_core::{ComponentTag, ParamId, ParamStore, Result, Rng, Tape, Tensor};

const EPS: f32 = 1e-3;
/// 2⁻¹⁰, the power of two nearest 1e-3.
const DYADIC_EPS: f32 = 1.0 / 1024.0;
const TOL: f64 = 1e-3;

/// Multiples of 1/8 with magnitude 1/2..3/2 and random sign. Products and
/// short sums of such values are exact in f32.
fn dyadic(rng: &mut Rng) -> f32 {
    let m = (4 + rng.below(9)) as f32 / 8.0;
    if rng.below(2) == 0 {
        m
    } else {
        -m
    }
}

/// `Σ y·r` for a fixed projection `r`, as a `[1, n]·[n, 1]` product.
fn project(tape: &mut Tape, y: &Tensor, r: &Tensor) -> Result<Tensor> {
    let row = tape.reshape(y, &[1, y.len()])?;
    let p = tape.matmul(&row, r)?;
    tape.reshape(&p, &[])
}

#[derive(Clone, Copy)]
enum Inputs {
    /// Dyadic values and a dyadic step: every operation is exact.
    Exact,
    Uniform(f32, f32),
}

struct Case {
    store: ParamStore,
    inputs: Vec<ParamId>,
}

impl Case {
    fn new(seed: u64, shapes: &[&[usize]], inputs: Inputs) -> Self {
        let mut rng = Rng::new(seed);
        let mut store = ParamStore::new();
        let inputs = shapes
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let n: usize = s.iter().product();
                let v = (0..n)
                    .map(|_| match inputs {
                        Inputs::Exact => dyadic(&mut rng),
                        Inputs::Uniform(lo, hi) => rng.uniform_in(lo, hi),
                    })
                    .collect();
                store.add_value(format!("in{i}"), s, v, ComponentTag::Other, true)
            })
            .collect();
        Case { store, inputs }
    }

    /// Checks every element of every input.
    fn check(&mut self, prim: Primitive, attrs: Attrs, seed: u64, eps: f32) -> Vec<FdReport> {
        let ids = self.inputs.clone();
        let mut reports = Vec::new();
        // Output size from a dry run.
        let out_len = {
            let mut t = Tape::inference();
            let xs: Vec<Tensor> = ids.iter().map(|&i| t.param(&self.store, i)).collect();
            let refs: Vec<&Tensor> = xs.iter().collect();
            t.apply(prim, &refs, &attrs).unwrap().len()
        };
        let mut rng = Rng::new(seed);
        let r = Tensor::new(&[out_len, 1], (0..out_len).map(|_| dyadic(&mut rng)).collect()).unwrap();
        for &target in &ids {
            let n = self.store.get(target).len();
            let idx: Vec<usize> = (0..n).collect();
            let rep = finite_difference_check(&mut self.store, target, &idx, eps, |s, t| {
                let xs: Vec<Tensor> = ids.iter().map(|&i| t.param(s, i)).collect();
                let refs: Vec<&Tensor> = xs.iter().collect();
                let y = t.apply(prim, &refs, &attrs)?;
                if prim == Primitive::Mse || prim == Primitive::Mean {
                    return Ok(y);
                }
                let flat = t.reshape(&y, &[y.len()])?;
                project(t, &flat, &r)
            })
            .unwrap();
            reports.push(rep);
        }
        reports
    }
}

fn assert_close(name: &str, reports: &[FdReport]) {
    for rep in reports {
        let worst = rep
            .entries
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
            .unwrap();
        assert!(worst.rel_error <= TOL, "{name}: {worst:?}");
    }
}

fn run_with(prim: Primitive, shapes: &[&[usize]], attrs: Attrs, inputs: Inputs) {
    let eps = match inputs {
        Inputs::Exact => DYADIC_EPS,
        Inputs::Uniform(..) => EPS,
    };
    let mut c = Case::new(prim as u64 + 100, shapes, inputs);
    let reps = c.check(prim, attrs, prim as u64, eps);
    assert_close(prim.name(), &reps);
}

fn run(prim: Primitive, shapes: &[&[usize]], attrs: Attrs) {
    run_with(prim, shapes, attrs, Inputs::Exact);
}

fn run_smooth(prim: Primitive, shapes: &[&[usize]], attrs: Attrs, lo: f32, hi: f32) {
    run_with(prim, shapes, attrs, Inputs::Uniform(lo, hi));
}

#[test]
fn matmul_plain_and_batched() {
    run(Primitive::MatMul, &[&[2, 3], &[3, 2]], Attrs::None);
    run(Primitive::MatMul, &[&[2, 2, 3], &[2, 3, 2]], Attrs::None);
    run(Primitive::MatMul, &[&[2, 2, 3], &[3, 2]], Attrs::None);
}

#[test]
fn conv2d_strides() {
    run(Primitive::Conv2d, &[&[1, 2, 4, 4], &[2, 2, 3, 3]], Attrs::Stride(1));
    run(Primitive::Conv2d, &[&[1, 2, 4, 4], &[2, 2, 3, 3]], Attrs::Stride(2));
    run(Primitive::Conv2d, &[&[2, 1, 3, 3], &[2, 1, 1, 1]], Attrs::Stride(1));
}

#[test]
fn upsample() {
    run(Primitive::Upsample, &[&[1, 2, 2, 2]], Attrs::None);
}

#[test]
fn add_and_mul_broadcast() {
    for p in [Primitive::Add, Primitive::Mul] {
        run(p, &[&[2, 3], &[2, 3]], Attrs::None);
        run(p, &[&[2, 3], &[3]], Attrs::None);
        run(p, &[&[2, 3, 2], &[3, 1]], Attrs::None);
    }
}

#[test]
fn scale() {
    run(Primitive::Scale, &[&[5]], Attrs::Factor(-1.75));
}

#[test]
fn normalizations() {
    // A narrow input spread gives a small variance and large gradients.
    run_smooth(Primitive::LayerNorm, &[&[2, 4]], Attrs::None, -0.25, 0.25);
    run_smooth(Primitive::GroupNorm, &[&[1, 4, 2, 2]], Attrs::Groups(2), -0.25, 0.25);
}

#[test]
fn softmax() {
    run_smooth(Primitive::Softmax, &[&[2, 4]], Attrs::None, -2.0, 2.0);
}

#[test]
fn activations() {
    // Inputs kept well above the derivative zeros of gelu (about −0.75)
    // and silu (about −1.28), where a relative error is undefined.
    run_smooth(Primitive::Gelu, &[&[8]], Attrs::None, -0.5, 2.0);
    run_smooth(Primitive::Silu, &[&[8]], Attrs::None, -0.5, 2.0);
}

#[test]
fn data_movement() {
    run(Primitive::Reshape, &[&[2, 3]], Attrs::Shape(vec![3, 2]));
    run(Primitive::Transpose, &[&[2, 3, 2]], Attrs::Perm(vec![2, 0, 1]));
    run(Primitive::Concat, &[&[2, 2], &[2, 3]], Attrs::Axis(1));
    run(Primitive::Slice, &[&[3, 4]], Attrs::Slice { axis: 1, start: 1, len: 2 });
}

#[test]
fn reductions() {
    run(Primitive::Mean, &[&[8]], Attrs::None);
    run(Primitive::Mse, &[&[8], &[8]], Attrs::None);
}

#[test]
fn every_primitive_covered() {
    // The tests above touch each primitive through the name-based dispatcher.
    for p in Primitive::ALL {
        assert_eq!(p.name().parse::<Primitive>().unwrap(), p);
    }
    assert!("softplus".parse::<Primitive>().is_err());
}

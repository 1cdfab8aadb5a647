//! Procedural scenes, the degradation operators that turn them into
//! conditions, and batching.
//!
//! Every sample derives from one integer seed through the counter-based
//! generator, so a corpus is reproducible without storing it.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, shape_err, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::train::Batch;

pub const IMAGE_SIZE: usize = 32;
pub const NUM_CLASSES: usize = 8;
pub const TRAIN_SEEDS: core::ops::Range<u64> = 0..50_000;
pub const TEST_SEEDS: core::ops::Range<u64> = 50_000..51_000;

const SUPERSAMPLE: usize = 4;
const SCENE_STREAM: u64 = 0x5CE7E;

/// Single-channel image, row-major, values nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != width * height {
            return shape_err("image", &[pixels.len()], &[height, width]);
        }
        Ok(Image { width, height, pixels })
    }

    pub fn constant(width: usize, height: usize, value: f32) -> Self {
        Image {
            width,
            height,
            pixels: vec![value; width * height],
        }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> f32 {
        self.pixels[y * self.width + x]
    }

    /// `[1, 1, H, W]` tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[1, 1, self.height, self.width], self.pixels.clone()).expect("image shape")
    }

    /// Splits a `[B, 1, H, W]` tensor into images.
    pub fn from_batch(t: &Tensor) -> Result<Vec<Image>> {
        let s = t.shape();
        if s.len() != 4 || s[1] != 1 {
            return shape_err("image batch", s, &[s.first().copied().unwrap_or(0), 1, IMAGE_SIZE, IMAGE_SIZE]);
        }
        let per = s[2] * s[3];
        Ok(t.data().chunks(per).map(|c| Image::new(s[3], s[2], c.to_vec()).expect("chunk")).collect())
    }

    pub fn same_shape(&self, other: &Image) -> Result<()> {
        if self.width != other.width || self.height != other.height {
            return shape_err("image", &[self.height, self.width], &[other.height, other.width]);
        }
        Ok(())
    }
}

/// Stacks equally sized images into `[B, 1, H, W]`.
pub fn stack(images: &[Image]) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| crate::Error::InvalidArgument("no images to stack".into()))?;
    let mut data = Vec::with_capacity(images.len() * first.pixels.len());
    for im in images {
        im.same_shape(first)?;
        data.extend_from_slice(&im.pixels);
    }
    Tensor::new(&[images.len(), 1, first.height, first.width], data)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Circle,
    Rectangle,
    Line,
}

/// One primitive. `size` is the radius, the rectangle half-width, or the
/// line half-length. `aspect` scales the rectangle half-height; `angle`
/// orients the line.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Shape {
    pub kind: ShapeKind,
    pub x: f32,
    pub y: f32,
    pub size: f32,
    pub aspect: f32,
    pub angle: f32,
    pub intensity: f32,
}

pub const LINE_HALF_WIDTH: f32 = 1.0;

impl Shape {
    fn covers(&self, px: f32, py: f32) -> bool {
        let (dx, dy) = (px - self.x, py - self.y);
        match self.kind {
            ShapeKind::Circle => dx * dx + dy * dy <= self.size * self.size,
            ShapeKind::Rectangle => dx.abs() <= self.size && dy.abs() <= self.size * self.aspect,
            ShapeKind::Line => {
                let (c, s) = (libm::cosf(self.angle), libm::sinf(self.angle));
                let along = dx * c + dy * s;
                let across = -dx * s + dy * c;
                along.abs() <= self.size && across.abs() <= LINE_HALF_WIDTH
            }
        }
    }
}

/// A scene: background plus shapes painted in order.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    pub background: f32,
    pub shapes: Vec<Shape>,
}

impl SceneSpec {
    /// Draws 1–4 shapes and a background from `seed`.
    pub fn from_seed(seed: u64) -> Self {
        let mut r = Rng::new(seed).split(SCENE_STREAM);
        let background = r.uniform_in(0.0, 0.15);
        let count = 1 + r.below(4) as usize;
        let shapes = (0..count)
            .map(|_| {
                let kind = match r.below(3) {
                    0 => ShapeKind::Circle,
                    1 => ShapeKind::Rectangle,
                    _ => ShapeKind::Line,
                };
                Shape {
                    kind,
                    x: r.uniform_in(6.0, 26.0),
                    y: r.uniform_in(6.0, 26.0),
                    size: r.uniform_in(3.0, 9.0),
                    aspect: r.uniform_in(0.5, 1.5),
                    angle: r.uniform_in(0.0, core::f32::consts::PI),
                    intensity: r.uniform_in(0.2, 1.0),
                }
            })
            .collect();
        SceneSpec {
            seed,
            background,
            shapes,
        }
    }

    /// Class bucket `(count − 1)·2 + has_circle` for 1–4 shapes; an empty
    /// scene falls in class 0.
    pub fn label(&self) -> usize {
        let count = self.shapes.len().clamp(1, 4);
        let has_circle = self.shapes.iter().any(|s| s.kind == ShapeKind::Circle);
        (count - 1) * 2 + has_circle as usize
    }
}

/// Rasterizes with 4×4 supersampling and box filtering.
pub fn render_scene(spec: &SceneSpec) -> Image {
    let n = IMAGE_SIZE;
    let mut pixels = vec![0.0; n * n];
    let inv = 1.0 / (SUPERSAMPLE * SUPERSAMPLE) as f32;
    for py in 0..n {
        for px in 0..n {
            let mut acc = 0.0;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let x = px as f32 + (sx as f32 + 0.5) / SUPERSAMPLE as f32;
                    let y = py as f32 + (sy as f32 + 0.5) / SUPERSAMPLE as f32;
                    let v = spec
                        .shapes
                        .iter()
                        .rev()
                        .find(|s| s.covers(x, y))
                        .map_or(spec.background, |s| s.intensity);
                    acc += v;
                }
            }
            pixels[py * n + px] = (acc * inv).clamp(0.0, 1.0);
        }
    }
    Image {
        width: n,
        height: n,
        pixels,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ConditionKind {
    Edge,
    Sr4x,
    BlurSr4x,
}

impl ConditionKind {
    pub const ALL: [ConditionKind; 3] = [ConditionKind::Edge, ConditionKind::Sr4x, ConditionKind::BlurSr4x];

    pub fn name(self) -> &'static str {
        match self {
            ConditionKind::Edge => "edge",
            ConditionKind::Sr4x => "sr4x",
            ConditionKind::BlurSr4x => "blur-sr4x",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

pub const EDGE_THRESHOLD: f32 = 0.2;
pub const BLUR_SIGMA: f32 = 2.0;
pub const BLUR_TAPS: usize = 9;

/// Whole-sample mirror (`d c b | a b c d | c b a`).
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    if n == 1 {
        return 0;
    }
    while i < 0 || i >= n {
        i = if i < 0 { -i } else { 2 * (n - 1) - i };
    }
    i as usize
}

/// 4×4 box average then nearest-neighbour upsample back to full size.
pub fn sr4x(img: &Image) -> Image {
    let (w, h) = (img.width, img.height);
    let (lw, lh) = (w / 4, h / 4);
    let mut low = vec![0.0f32; lw * lh];
    for by in 0..lh {
        for bx in 0..lw {
            // f64 keeps the average of a constant tile exact.
            let mut s = 0.0f64;
            for y in 0..4 {
                for x in 0..4 {
                    s += img.at(bx * 4 + x, by * 4 + y) as f64;
                }
            }
            low[by * lw + bx] = (s / 16.0) as f32;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = low[(y / 4).min(lh - 1) * lw + (x / 4).min(lw - 1)];
        }
    }
    Image {
        width: w,
        height: h,
        pixels: out,
    }
}

/// Normalized 1-D Gaussian taps.
pub fn gaussian_kernel(sigma: f32, taps: usize) -> Vec<f32> {
    let r = (taps / 2) as isize;
    let k: Vec<f32> = (-r..=r)
        .map(|i| libm::expf(-((i * i) as f32) / (2.0 * sigma * sigma)))
        .collect();
    let s: f32 = k.iter().sum();
    k.iter().map(|v| v / s).collect()
}

/// Separable Gaussian blur with mirror padding.
pub fn gaussian_blur(img: &Image, sigma: f32, taps: usize) -> Image {
    let k = gaussian_kernel(sigma, taps);
    let r = (taps / 2) as isize;
    let (w, h) = (img.width, img.height);
    let mut tmp = vec![0.0f32; w * h];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(i, kv)| kv * img.at(reflect(x as isize + i as isize - r, w), y))
                .sum();
        }
    }
    let mut out = vec![0.0f32; w * h];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(i, kv)| kv * tmp[reflect(y as isize + i as isize - r, h) * w + x])
                .sum();
        }
    }
    Image {
        width: w,
        height: h,
        pixels: out,
    }
}

/// Sobel gradient magnitude with mirror padding (unnormalized).
pub fn sobel_magnitude(img: &Image) -> Image {
    let (w, h) = (img.width, img.height);
    let p = |x: isize, y: isize| img.at(reflect(x, w), reflect(y, h));
    let mut out = vec![0.0f32; w * h];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let gx = (p(x + 1, y - 1) + 2.0 * p(x + 1, y) + p(x + 1, y + 1))
                - (p(x - 1, y - 1) + 2.0 * p(x - 1, y) + p(x - 1, y + 1));
            let gy = (p(x - 1, y + 1) + 2.0 * p(x, y + 1) + p(x + 1, y + 1))
                - (p(x - 1, y - 1) + 2.0 * p(x, y - 1) + p(x + 1, y - 1));
            out[y as usize * w + x as usize] = libm::sqrtf(gx * gx + gy * gy);
        }
    }
    Image {
        width: w,
        height: h,
        pixels: out,
    }
}

/// Binary edge map: Sobel magnitude over its maximum, `>= 0.2` → 1.
pub fn edge_map(img: &Image) -> Image {
    let mut m = sobel_magnitude(img);
    let max = m.pixels.iter().fold(0.0f32, |a, &b| a.max(b));
    for v in m.pixels.iter_mut() {
        *v = if max > 0.0 && *v / max >= EDGE_THRESHOLD { 1.0 } else { 0.0 };
    }
    m
}

/// Condition image for `x0` (in `[0, 1]`).
pub fn make_condition(x0: &Image, kind: ConditionKind) -> Result<Image> {
    if x0.width % 4 != 0 || x0.height % 4 != 0 || x0.width == 0 || x0.height == 0 {
        return invalid("condition operators need image sides divisible by 4");
    }
    Ok(match kind {
        ConditionKind::Sr4x => sr4x(x0),
        ConditionKind::BlurSr4x => sr4x(&gaussian_blur(x0, BLUR_SIGMA, BLUR_TAPS)),
        ConditionKind::Edge => edge_map(x0),
    })
}

/// Ground-truth image, its condition and the class label.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplePair {
    pub seed: u64,
    pub x0: Image,
    pub cond: Image,
    pub label: usize,
}

pub fn make_pair(seed: u64, kind: ConditionKind) -> SamplePair {
    let spec = SceneSpec::from_seed(seed);
    let x0 = render_scene(&spec);
    let cond = make_condition(&x0, kind).expect("32x32 scenes are valid");
    SamplePair {
        seed,
        x0,
        cond,
        label: spec.label(),
    }
}

/// A training batch for `seeds`; `x0` is rescaled to `[-1, 1]`. Without a
/// condition kind the batch carries no condition image.
pub fn make_batch(seeds: &[u64], kind: Option<ConditionKind>) -> Result<Batch> {
    if seeds.is_empty() {
        return invalid("empty seed list");
    }
    let pairs: Vec<SamplePair> = seeds
        .iter()
        .map(|&s| make_pair(s, kind.unwrap_or(ConditionKind::Sr4x)))
        .collect();
    let x0: Vec<Image> = pairs.iter().map(|p| p.x0.clone()).collect();
    let x0 = stack(&x0)?;
    let x0 = Tensor::new(x0.shape(), x0.data().iter().map(|v| 2.0 * v - 1.0).collect())?;
    let cond = match kind {
        Some(_) => Some(stack(&pairs.iter().map(|p| p.cond.clone()).collect::<Vec<_>>())?),
        None => None,
    };
    Ok(Batch {
        x0,
        labels: pairs.iter().map(|p| p.label).collect(),
        cond,
    })
}

/// `count` training seeds drawn uniformly with replacement.
pub fn sample_train_seeds(rng: &mut Rng, count: usize) -> Vec<u64> {
    let n = TRAIN_SEEDS.end - TRAIN_SEEDS.start;
    (0..count).map(|_| TRAIN_SEEDS.start + rng.below(n)).collect()
}

/// The first `count` test seeds.
pub fn test_seeds(count: usize) -> Vec<u64> {
    TEST_SEEDS.take(count).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_scene_is_background() {
        let spec = SceneSpec {
            seed: 0,
            background: 0.1,
            shapes: Vec::new(),
        };
        let img = render_scene(&spec);
        assert!(img.pixels.iter().all(|&v| (v - 0.1).abs() < 1e-6));
    }

    #[test]
    fn scenes_deterministic_and_bounded() {
        for seed in [0, 1, 49_999, 50_000] {
            let a = render_scene(&SceneSpec::from_seed(seed));
            let b = render_scene(&SceneSpec::from_seed(seed));
            assert_eq!(a, b);
            assert!(a.pixels.iter().all(|&v| (0.0..=1.0).contains(&v)));
            let spec = SceneSpec::from_seed(seed);
            assert!((1..=4).contains(&spec.shapes.len()));
            assert!(spec.label() < NUM_CLASSES);
        }
    }

    #[test]
    fn circle_area_matches() {
        let spec = SceneSpec {
            seed: 0,
            background: 0.0,
            shapes: vec![Shape {
                kind: ShapeKind::Circle,
                x: 16.0,
                y: 16.0,
                size: 8.0,
                aspect: 1.0,
                angle: 0.0,
                intensity: 1.0,
            }],
        };
        let img = render_scene(&spec);
        let area = img.pixels.iter().filter(|&&v| v > 0.5).count() as f32;
        let expect = core::f32::consts::PI * 64.0;
        assert!((area - expect).abs() / expect < 0.1, "{area}");
    }

    #[test]
    fn labels_follow_bucket_rule() {
        let mut spec = SceneSpec::from_seed(3);
        let c = Shape {
            kind: ShapeKind::Circle,
            ..spec.shapes[0]
        };
        let r = Shape {
            kind: ShapeKind::Rectangle,
            ..spec.shapes[0]
        };
        spec.shapes = vec![r, r, c];
        assert_eq!(spec.label(), 5);
        spec.shapes = vec![r];
        assert_eq!(spec.label(), 0);
        spec.shapes = vec![c, c, c, c];
        assert_eq!(spec.label(), 7);
    }

    #[test]
    fn constant_image_conditions() {
        let img = Image::constant(32, 32, 0.3);
        for kind in [ConditionKind::Sr4x, ConditionKind::BlurSr4x] {
            let c = make_condition(&img, kind).unwrap();
            assert!(c.pixels.iter().all(|&v| (v - 0.3).abs() < 1e-6), "{}", kind.name());
        }
        let e = make_condition(&img, ConditionKind::Edge).unwrap();
        assert!(e.pixels.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sr4x_idempotent_on_tiles() {
        let mut r = Rng::new(4);
        let tiles: Vec<f32> = (0..64).map(|_| r.uniform()).collect();
        let px: Vec<f32> = (0..1024).map(|i| tiles[(i / 32 / 4) * 8 + (i % 32) / 4]).collect();
        let img = Image::new(32, 32, px).unwrap();
        assert_eq!(sr4x(&img).pixels, img.pixels);
        assert_eq!(sr4x(&sr4x(&img)).pixels, sr4x(&img).pixels);
    }

    #[test]
    fn sobel_step_matches_hand_convolution() {
        // Columns 0..16 are 0, columns 16.. are 1. At x = 15 the kernel sees
        // right column 1s: gx = 1 + 2 + 1 = 4; at x = 16 the left column is 0: gx = 4.
        let px: Vec<f32> = (0..1024).map(|i| if i % 32 >= 16 { 1.0 } else { 0.0 }).collect();
        let img = Image::new(32, 32, px).unwrap();
        let m = sobel_magnitude(&img);
        for y in 0..32 {
            for x in 0..32 {
                let expect = if x == 15 || x == 16 { 4.0 } else { 0.0 };
                assert_eq!(m.at(x, y), expect, "({x},{y})");
            }
        }
        let e = edge_map(&img);
        assert_eq!(e.pixels.iter().filter(|&&v| v == 1.0).count(), 64);
    }

    #[test]
    fn conditions_in_unit_range_and_edges_binary() {
        for seed in 0..20 {
            let p = make_pair(seed, ConditionKind::Edge);
            assert!(p.cond.pixels.iter().all(|&v| v == 0.0 || v == 1.0));
            for kind in [ConditionKind::Sr4x, ConditionKind::BlurSr4x] {
                let c = make_condition(&p.x0, kind).unwrap();
                assert!(c.pixels.iter().all(|&v| (-1e-6..=1.0 + 1e-6).contains(&v)));
            }
        }
    }

    #[test]
    fn blur_kernel_normalized() {
        let k = gaussian_kernel(BLUR_SIGMA, BLUR_TAPS);
        assert_eq!(k.len(), 9);
        assert!((k.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        assert_eq!(k[0], k[8]);
    }

    #[test]
    fn batch_rescales_images() {
        let b = make_batch(&[1, 2], Some(ConditionKind::Sr4x)).unwrap();
        assert_eq!(b.x0.shape(), &[2, 1, 32, 32]);
        let p = make_pair(1, ConditionKind::Sr4x);
        assert_eq!(b.x0.data()[5], 2.0 * p.x0.pixels[5] - 1.0);
        assert_eq!(b.cond.as_ref().unwrap().data()[..1024], p.cond.pixels[..]);
        assert!(make_batch(&[], None).is_err());
    }

    #[test]
    fn splits_disjoint() {
        assert!(TRAIN_SEEDS.end <= TEST_SEEDS.start);
        let mut r = Rng::new(1);
        assert!(sample_train_seeds(&mut r, 100).iter().all(|s| TRAIN_SEEDS.contains(s)));
        assert_eq!(test_seeds(3), [50_000, 50_001, 50_002]);
    }
}

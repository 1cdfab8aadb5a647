//! Raw numeric loops shared by forward and backward rules.
//!
//! Matrix products go through `matrixmultiply`'s single-threaded sgemm;
//! everything else is plain loops over contiguous rows. For a fixed CPU and
//! fixed operands every kernel is bit-reproducible.

use alloc::vec;
use alloc::vec::Vec;

/// `c[m,n] += a[m,k] · b[k,n]`
pub fn matmul_acc(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the slices cover every index addressed by the given dims and strides.
    unsafe {
        matrixmultiply::sgemm(
            m, k, n, 1.0, a.as_ptr(), k as isize, 1, b.as_ptr(), n as isize, 1, 1.0, c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// `out[k,n] += a[m,k]ᵀ · g[m,n]`
pub fn matmul_tn_acc(a: &[f32], g: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    assert!(a.len() >= m * k && g.len() >= m * n && out.len() >= k * n);
    // SAFETY: as above; aᵀ is read through swapped strides.
    unsafe {
        matrixmultiply::sgemm(
            k, m, n, 1.0, a.as_ptr(), 1, k as isize, g.as_ptr(), n as isize, 1, 1.0, out.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// `out[m,k] += g[m,n] · b[k,n]ᵀ`
pub fn matmul_nt_acc(g: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    assert!(g.len() >= m * n && b.len() >= k * n && out.len() >= m * k);
    // SAFETY: as above; bᵀ is read through swapped strides.
    unsafe {
        matrixmultiply::sgemm(
            m, n, k, 1.0, g.as_ptr(), n as isize, 1, b.as_ptr(), 1, n as isize, 1.0, out.as_mut_ptr(), k as isize, 1,
        );
    }
}

pub fn conv_out_size(size: usize, kernel: usize, stride: usize) -> usize {
    let pad = kernel / 2;
    (size + 2 * pad - kernel) / stride + 1
}

/// Unfolds one `[c,h,w]` image into `[c·k·k, ho·wo]` columns (zero padding `k/2`).
pub fn im2col(x: &[f32], c: usize, h: usize, w: usize, k: usize, stride: usize) -> Vec<f32> {
    let pad = (k / 2) as isize;
    let (ho, wo) = (conv_out_size(h, k, stride), conv_out_size(w, k, stride));
    let mut col = vec![0.0; c * k * k * ho * wo];
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut col[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * stride) as isize + ky as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * stride) as isize + kx as isize - pad;
                        if ix >= 0 && ix < w as isize {
                            dst[oy * wo + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatters column gradients back onto `dx`.
pub fn col2im_acc(col: &[f32], dx: &mut [f32], c: usize, h: usize, w: usize, k: usize, stride: usize) {
    let pad = (k / 2) as isize;
    let (ho, wo) = (conv_out_size(h, k, stride), conv_out_size(w, k, stride));
    for ci in 0..c {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &col[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * stride) as isize + ky as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride) as isize + kx as isize - pad;
                        if ix >= 0 && ix < w as isize {
                            plane[iy as usize * w + ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Gathers `src` (of `shape`) into the axis order `perm`.
pub fn permute(src: &[f32], shape: &[usize], perm: &[usize]) -> Vec<f32> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(src.len());
    let rank = out_shape.len();
    if rank == 0 {
        out.extend_from_slice(src);
        return out;
    }
    let inner = out_shape[rank - 1];
    let inner_stride = src_strides[rank - 1];
    let outer: usize = out_shape[..rank - 1].iter().product();
    let mut idx = vec![0usize; rank - 1];
    for _ in 0..outer {
        let base: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
        for j in 0..inner {
            out.push(src[base + j * inner_stride]);
        }
        for d in (0..rank - 1).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}

pub fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Flat index into `small` for every flat index of `big`, where `small`
/// broadcasts against `big` (right-aligned, size-1 or equal dims).
#[cfg(test)]
pub fn broadcast_index(big: &[usize], small: &[usize]) -> Vec<u32> {
    let offset = big.len() - small.len();
    let sstr = strides(small);
    let mut bstr = vec![0usize; big.len()];
    for (d, &s) in small.iter().enumerate() {
        if s != 1 {
            bstr[d + offset] = sstr[d];
        }
    }
    let n: usize = big.iter().product();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; big.len()];
    let mut flat = 0usize;
    for _ in 0..n {
        out.push(flat as u32);
        for d in (0..big.len()).rev() {
            idx[d] += 1;
            flat += bstr[d];
            if idx[d] < big[d] {
                break;
            }
            flat -= bstr[d] * idx[d];
            idx[d] = 0;
        }
    }
    out
}

/// How a right-aligned broadcast operand is read while walking the full-size
/// operand. Adjacent dims with compatible layout are merged, so the walk is a
/// loop over rows of the last merged dim, each either a contiguous slice of
/// the small operand or one repeated element.
#[derive(Clone, Debug)]
pub struct Bcast {
    /// Outer dims as `(size, stride in the small operand)`.
    outer: Vec<(usize, usize)>,
    /// Length of the innermost merged dim.
    row: usize,
    /// Whether the small operand varies along the innermost dim.
    row_varies: bool,
}

impl Bcast {
    pub fn new(big: &[usize], small: &[usize]) -> Bcast {
        let offset = big.len() - small.len();
        let sstr = strides(small);
        let mut dims: Vec<(usize, usize)> = Vec::new();
        for (d, &size) in big.iter().enumerate() {
            if size == 1 {
                continue;
            }
            let stride = match d.checked_sub(offset) {
                Some(sd) if small[sd] != 1 => sstr[sd],
                _ => 0,
            };
            match dims.last_mut() {
                Some(last) if (last.1 == 0 && stride == 0) || (stride != 0 && last.1 == stride * size) => {
                    last.0 *= size;
                    last.1 = stride;
                }
                _ => dims.push((size, stride)),
            }
        }
        let (row, row_stride) = dims.pop().unwrap_or((1, 0));
        Bcast {
            outer: dims,
            row,
            row_varies: row_stride != 0,
        }
    }

    /// Visits rows as `(start in big, start in small)`.
    #[inline]
    fn rows(&self, n: usize, mut f: impl FnMut(usize, usize)) {
        let mut idx = vec![0usize; self.outer.len()];
        let mut soff = 0;
        let mut start = 0;
        while start < n {
            f(start, soff);
            start += self.row;
            for d in (0..self.outer.len()).rev() {
                let (size, stride) = self.outer[d];
                idx[d] += 1;
                soff += stride;
                if idx[d] < size {
                    break;
                }
                soff -= stride * size;
                idx[d] = 0;
            }
        }
    }

    /// `out[i] = f(a[i], b[j(i)])`
    pub fn map2(&self, a: &[f32], b: &[f32], f: impl Fn(f32, f32) -> f32) -> Vec<f32> {
        let mut out = vec![0.0; a.len()];
        let row = self.row;
        self.rows(a.len(), |i, j| {
            let (o, x) = (&mut out[i..i + row], &a[i..i + row]);
            if self.row_varies {
                for ((o, &x), &y) in o.iter_mut().zip(x).zip(&b[j..j + row]) {
                    *o = f(x, y);
                }
            } else {
                let y = b[j];
                for (o, &x) in o.iter_mut().zip(x) {
                    *o = f(x, y);
                }
            }
        });
        out
    }

    /// `acc[j(i)] += g[i] · w[i]` (or `g[i]` without weights), in index order.
    pub fn reduce(&self, g: &[f32], w: Option<&[f32]>, acc: &mut [f32]) {
        let row = self.row;
        self.rows(g.len(), |i, j| {
            let gr = &g[i..i + row];
            if self.row_varies {
                let dst = &mut acc[j..j + row];
                match w {
                    Some(w) => {
                        for ((d, &gv), &wv) in dst.iter_mut().zip(gr).zip(&w[i..i + row]) {
                            *d += gv * wv;
                        }
                    }
                    None => {
                        for (d, &gv) in dst.iter_mut().zip(gr) {
                            *d += gv;
                        }
                    }
                }
            } else {
                let mut s = acc[j];
                match w {
                    Some(w) => {
                        for (&gv, &wv) in gr.iter().zip(&w[i..i + row]) {
                            s += gv * wv;
                        }
                    }
                    None => {
                        for &gv in gr {
                            s += gv;
                        }
                    }
                }
                acc[j] = s;
            }
        });
    }

    /// Calls `f(i, j)` for every big index `i` with its small index `j`, in order.
    #[cfg(test)]
    pub fn for_each(&self, n: usize, mut f: impl FnMut(usize, usize)) {
        let row = self.row;
        let varies = self.row_varies;
        self.rows(n, |i, j| {
            for k in 0..row {
                f(i + k, if varies { j + k } else { j });
            }
        });
    }
}

/// Branch-free `exp` (Cephes range reduction and degree-6 polynomial) that
/// auto-vectorizes. Within 2 ulp of the correctly rounded result on
/// `[-87, 88]`; inputs outside are clamped, so it never returns 0 or inf.
#[inline]
pub fn exp(x: f32) -> f32 {
    const LOG2E: f32 = 1.442_695;
    const LN2_HI: f32 = 0.693_359_4;
    const LN2_LO: f32 = -2.121_944_4e-4;
    const ROUND: f32 = 12_582_912.0; // 1.5·2^23 rounds to nearest integer
    let x = x.clamp(-87.0, 88.0);
    let t = x * LOG2E + ROUND;
    // The rounded integer sits in the low mantissa bits of `t`.
    let ni = t.to_bits().wrapping_sub(ROUND.to_bits()) as i32;
    let n = t - ROUND;
    let r = x - n * LN2_HI - n * LN2_LO;
    let p = 1.987_569_1e-4;
    let p = p * r + 1.398_199_9e-3;
    let p = p * r + 8.333_452e-3;
    let p = p * r + 4.166_579_6e-2;
    let p = p * r + 1.666_666_5e-1;
    let p = p * r + 5.000_000_1e-1;
    let y = p * r * r + r + 1.0;
    y * f32::from_bits(((ni + 127) as u32) << 23)
}

/// `tanh` through a single `exp`, accurate to a few ulp for all inputs.
pub fn tanh(u: f32) -> f32 {
    let e = exp(-2.0 * u.abs());
    let t = (1.0 - e) / (1.0 + e);
    t.copysign(u)
}

pub fn gelu(x: f32) -> f32 {
    const K: f32 = 0.797_884_6; // sqrt(2/pi)
    0.5 * x * (1.0 + tanh(K * (x + 0.044_715 * x * x * x)))
}

pub fn gelu_grad(x: f32) -> f32 {
    const K: f32 = 0.797_884_6;
    let u = K * (x + 0.044_715 * x * x * x);
    let t = tanh(u);
    let du = K * (1.0 + 3.0 * 0.044_715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + exp(-x))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permute_matches_index_formula() {
        let shape = [2, 3, 4];
        let src: Vec<f32> = (0..24).map(|v| v as f32).collect();
        let out = permute(&src, &shape, &[2, 0, 1]);
        // out[c][a][b] == src[a][b][c]
        for a in 0..2 {
            for b in 0..3 {
                for c in 0..4 {
                    assert_eq!(out[(c * 2 + a) * 3 + b], src[(a * 3 + b) * 4 + c]);
                }
            }
        }
        let back = permute(&out, &[4, 2, 3], &inverse_perm(&[2, 0, 1]));
        assert_eq!(back, src);
    }

    #[test]
    fn bcast_matches_index_table() {
        let cases: [(&[usize], &[usize]); 8] = [
            (&[2, 3], &[3]),
            (&[2, 2, 2], &[1, 2, 1]),
            (&[2, 3, 4, 5], &[3, 1, 1]),
            (&[2, 3, 4], &[2, 1, 4]),
            (&[2, 3, 4], &[1]),
            (&[2, 3, 4, 5], &[2, 3, 1, 1]),
            (&[1, 3, 1, 5], &[3, 1, 5]),
            (&[4, 1, 3], &[4, 1, 1]),
        ];
        for (big, small) in cases {
            let n: usize = big.iter().product();
            let table = broadcast_index(big, small);
            let mut got = Vec::new();
            Bcast::new(big, small).for_each(n, |i, j| {
                assert_eq!(i, got.len());
                got.push(j as u32);
            });
            assert_eq!(got, table, "{big:?} {small:?}");
            let a: Vec<f32> = (0..n).map(|v| v as f32).collect();
            let bl: usize = small.iter().product();
            let b: Vec<f32> = (0..bl).map(|v| 100.0 * v as f32).collect();
            let sum = Bcast::new(big, small).map2(&a, &b, |x, y| x + y);
            let expect: Vec<f32> = table.iter().enumerate().map(|(i, &j)| a[i] + b[j as usize]).collect();
            assert_eq!(sum, expect);
            let mut acc = vec![0.0; bl];
            Bcast::new(big, small).reduce(&a, Some(&a), &mut acc);
            let mut expect = vec![0.0; bl];
            for (i, &j) in table.iter().enumerate() {
                expect[j as usize] += a[i] * a[i];
            }
            assert_eq!(acc, expect);
        }
    }

    #[test]
    fn exp_close_to_libm() {
        let mut worst = 0.0f32;
        for i in -86_990..=87_990 {
            let x = i as f32 * 1e-3;
            let (a, b) = (exp(x), libm::expf(x));
            worst = worst.max((a - b).abs() / b);
        }
        assert!(worst <= 2.0 * f32::EPSILON, "{worst}");
        assert_eq!(exp(0.0), 1.0);
        assert!(exp(-1000.0) > 0.0 && exp(1000.0).is_finite());
    }

    #[test]
    fn tanh_close_to_libm() {
        for i in -400..=400 {
            let u = i as f32 * 0.05;
            assert!((tanh(u) - libm::tanhf(u)).abs() <= 4.0 * f32::EPSILON, "{u}");
        }
        assert_eq!(tanh(0.0), 0.0);
        assert_eq!(tanh(100.0), 1.0);
    }

    #[test]
    fn broadcast_index_bias_and_channel() {
        assert_eq!(broadcast_index(&[2, 3], &[3]), [0, 1, 2, 0, 1, 2]);
        assert_eq!(broadcast_index(&[2, 2, 2], &[1, 2, 1]), [0, 0, 1, 1, 0, 0, 1, 1]);
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)>
        let (c, h, w) = (2, 5, 4);
        for &(k, s) in &[(3, 1), (3, 2), (1, 1)] {
            let x: Vec<f32> = (0..c * h * w).map(|i| ((i * 7) % 11) as f32 - 5.0).collect();
            let col = im2col(&x, c, h, w, k, s);
            let y: Vec<f32> = (0..col.len()).map(|i| ((i * 3) % 5) as f32 - 2.0).collect();
            let lhs: f32 = col.iter().zip(&y).map(|(a, b)| a * b).sum();
            let mut dx = vec![0.0; x.len()];
            col2im_acc(&y, &mut dx, c, h, w, k, s);
            let rhs: f32 = x.iter().zip(&dx).map(|(a, b)| a * b).sum();
            assert_eq!(lhs, rhs);
        }
    }
}

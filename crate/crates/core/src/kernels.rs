//! Dense kernels behind the tape primitives.
//!
//! Parallel kernels split work over disjoint output rows only, so every
//! output element is reduced in the same order regardless of thread count.

use std::borrow::Cow;

use rayon::prelude::*;

use crate::tensor::{strides, Scalar};

const MR: usize = 6;
/// Depth of one packed panel.
const KC: usize = 256;
/// Output rows handed to one worker.
const ROWS_PER_TASK: usize = 16 * MR;
/// Multiply-adds below which a product runs on the calling thread.
const PAR_WORK: usize = 1 << 18;

/// Strided read-only matrix view: element `(i, j)` is `data[i * rs + j * cs]`.
#[derive(Clone, Copy)]
struct View<'a, T> {
    data: &'a [T],
    rs: usize,
    cs: usize,
}

impl<T: Scalar> View<'_, T> {
    #[inline(always)]
    fn at(&self, i: usize, j: usize) -> T {
        self.data[i * self.rs + j * self.cs]
    }
}

/// `c += a · b` for row-major `a: m×k`, `b: k×n`, `c: m×n`.
pub fn gemm<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    gemm_t(m, k, n, a, false, b, false, c);
}

/// `c += op(a) · op(b)` where `op` optionally transposes its operand.
/// `m, k, n` describe the product after transposition, so a transposed
/// `a` is stored `k×m` and a transposed `b` is stored `n×k`.
#[allow(clippy::too_many_arguments)]
pub fn gemm_t<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    trans_a: bool,
    b: &[T],
    trans_b: bool,
    c: &mut [T],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    if trans_a && !trans_b && n < m {
        // Compute cᵀ = bᵀ·a instead so the strided gather touches the
        // narrow operand.
        let mut ct = vec![T::zero(); n * m];
        let bt = View { data: b, rs: 1, cs: n };
        let av = View { data: a, rs: m, cs: 1 };
        dispatch(n, k, m, bt, av, &mut ct);
        for (i, row) in c.chunks_exact_mut(n).enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v += ct[j * m + i];
            }
        }
        return;
    }
    let a = if trans_a {
        View { data: a, rs: 1, cs: m }
    } else {
        View { data: a, rs: k, cs: 1 }
    };
    let b = if trans_b {
        View { data: b, rs: 1, cs: k }
    } else {
        View { data: b, rs: n, cs: 1 }
    };
    dispatch(m, k, n, a, b, c);
}

fn dispatch<T: Scalar>(m: usize, k: usize, n: usize, a: View<T>, b: View<T>, c: &mut [T]) {
    // Tile rows span 128 bytes: 32 f32 or 16 f64 lanes.
    if std::mem::size_of::<T>() <= 4 {
        packed::<T, 32>(m, k, n, a, b, c);
    } else {
        packed::<T, 16>(m, k, n, a, b, c);
    }
}

fn packed<T: Scalar, const NR: usize>(m: usize, k: usize, n: usize, a: View<T>, b: View<T>, c: &mut [T]) {
    let strips = n.div_ceil(NR);
    let parallel = rayon::current_num_threads() > 1 && m * k * n >= PAR_WORK && m > ROWS_PER_TASK;
    let mut bpack = vec![T::zero(); KC.min(k) * strips * NR];
    for p0 in (0..k).step_by(KC) {
        let kc = KC.min(k - p0);
        pack_b::<T, NR>(b, p0, kc, n, &mut bpack[..kc * strips * NR]);
        let bp = &bpack[..kc * strips * NR];
        let run = |(t, rows): (usize, &mut [T])| {
            let mut apack = vec![T::zero(); MR * kc];
            let base = t * ROWS_PER_TASK;
            let count = rows.len() / n;
            for i0 in (0..count).step_by(MR) {
                let mr = MR.min(count - i0);
                // Full row-major blocks are read in place.
                let direct = a.cs == 1 && mr == MR;
                let rows_of_a: [&[T]; MR] = if direct {
                    std::array::from_fn(|r| {
                        let start = (base + i0 + r) * a.rs + p0;
                        &a.data[start..start + kc]
                    })
                } else {
                    pack_a(a, base + i0, mr, p0, kc, &mut apack);
                    [&[]; MR]
                };
                for s in 0..strips {
                    let panel = &bp[s * kc * NR..(s + 1) * kc * NR];
                    let acc = if direct {
                        micro_rows::<T, NR>(rows_of_a, panel)
                    } else {
                        micro::<T, NR>(&apack, panel)
                    };
                    let j0 = s * NR;
                    let w = NR.min(n - j0);
                    for (r, row) in acc.iter().enumerate().take(mr) {
                        let dst = &mut rows[(i0 + r) * n + j0..(i0 + r) * n + j0 + w];
                        for (d, &v) in dst.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                }
            }
        };
        if parallel {
            c.par_chunks_mut(ROWS_PER_TASK * n).enumerate().for_each(run);
        } else {
            run((0, &mut *c));
        }
    }
}

/// Layout `[strip][p][NR]`, zero beyond column `n`.
fn pack_b<T: Scalar, const NR: usize>(b: View<T>, p0: usize, kc: usize, n: usize, out: &mut [T]) {
    for (s, strip) in out.chunks_exact_mut(kc * NR).enumerate() {
        let j0 = s * NR;
        let w = NR.min(n - j0);
        if b.cs == 1 {
            for p in 0..kc {
                let src = &b.data[(p0 + p) * b.rs + j0..(p0 + p) * b.rs + j0 + w];
                strip[p * NR..p * NR + w].copy_from_slice(src);
                strip[p * NR + w..(p + 1) * NR].fill(T::zero());
            }
        } else {
            strip.fill(T::zero());
            for q in 0..w {
                for p in 0..kc {
                    strip[p * NR + q] = b.at(p0 + p, j0 + q);
                }
            }
        }
    }
}

/// Layout `[p][MR]`, zero beyond row `mr`.
fn pack_a<T: Scalar>(a: View<T>, i0: usize, mr: usize, p0: usize, kc: usize, out: &mut [T]) {
    if mr < MR {
        out.fill(T::zero());
    }
    if a.cs == 1 {
        for r in 0..mr {
            let src = &a.data[(i0 + r) * a.rs + p0..(i0 + r) * a.rs + p0 + kc];
            for (p, &v) in src.iter().enumerate() {
                out[p * MR + r] = v;
            }
        }
    } else {
        for p in 0..kc {
            for r in 0..mr {
                out[p * MR + r] = a.at(i0 + r, p0 + p);
            }
        }
    }
}

#[inline(always)]
fn fmadd<T: Scalar>(a: T, b: T, c: T) -> T {
    if cfg!(target_feature = "fma") {
        a.mul_add(b, c)
    } else {
        a * b + c
    }
}

#[inline(always)]
fn micro_rows<T: Scalar, const NR: usize>(a: [&[T]; MR], bp: &[T]) -> [[T; NR]; MR] {
    let kc = a[0].len();
    assert!(a.iter().all(|r| r.len() == kc) && bp.len() >= kc * NR);
    let mut acc = [[T::zero(); NR]; MR];
    for p in 0..kc {
        // SAFETY: p < kc = len of every row and bp holds kc panels of NR.
        let (av, bv): ([T; MR], &[T; NR]) = unsafe {
            (
                std::array::from_fn(|r| *a[r].get_unchecked(p)),
                &*(bp.as_ptr().add(p * NR) as *const [T; NR]),
            )
        };
        step(&mut acc, &av, bv);
    }
    acc
}

#[inline(always)]
fn micro<T: Scalar, const NR: usize>(ap: &[T], bp: &[T]) -> [[T; NR]; MR] {
    let kc = ap.len() / MR;
    assert!(bp.len() >= kc * NR);
    let mut acc = [[T::zero(); NR]; MR];
    for p in 0..kc {
        // SAFETY: both packed panels hold at least kc steps.
        let (av, bv) = unsafe {
            (
                &*(ap.as_ptr().add(p * MR) as *const [T; MR]),
                &*(bp.as_ptr().add(p * NR) as *const [T; NR]),
            )
        };
        step(&mut acc, av, bv);
    }
    acc
}

#[inline(always)]
fn step<T: Scalar, const NR: usize>(acc: &mut [[T; NR]; MR], av: &[T; MR], bv: &[T; NR]) {
    for r in 0..MR {
        for q in 0..NR {
            acc[r][q] = fmadd(av[r], bv[q], acc[r][q]);
        }
    }
}

/// Transpose of a row-major `rows×cols` matrix.
pub fn transpose<T: Scalar>(rows: usize, cols: usize, a: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    const B: usize = 32;
    for r0 in (0..rows).step_by(B) {
        for c0 in (0..cols).step_by(B) {
            for r in r0..(r0 + B).min(rows) {
                for c in c0..(c0 + B).min(cols) {
                    out[c * rows + r] = a[r * cols + c];
                }
            }
        }
    }
    out
}

/// Geometry of a 2-D convolution over NHWC data.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub cin: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn rows(&self) -> usize {
        self.batch * self.out_h * self.out_w
    }

    pub fn patch_len(&self) -> usize {
        self.kh * self.kw * self.cin
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.padding == 0
    }
}

/// Unfolds every receptive field into one row of `kh·kw·cin` values.
pub fn im2col<'a, T: Scalar>(g: &ConvGeometry, x: &'a [T]) -> Cow<'a, [T]> {
    if g.is_pointwise() {
        return Cow::Borrowed(x);
    }
    let plen = g.patch_len();
    let mut cols = vec![T::zero(); g.rows() * plen];
    let per_image = g.out_h * g.out_w * plen;
    let fill = |(b, chunk): (usize, &mut [T])| {
        let img = &x[b * g.height * g.width * g.cin..(b + 1) * g.height * g.width * g.cin];
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let row = &mut chunk[(oy * g.out_w + ox) * plen..(oy * g.out_w + ox + 1) * plen];
                for ky in 0..g.kh {
                    let iy = (oy * g.stride + ky * g.dilation) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    for kx in 0..g.kw {
                        let ix = (ox * g.stride + kx * g.dilation) as isize - g.padding as isize;
                        if ix < 0 || ix >= g.width as isize {
                            continue;
                        }
                        let src = (iy as usize * g.width + ix as usize) * g.cin;
                        let dst = (ky * g.kw + kx) * g.cin;
                        row[dst..dst + g.cin].copy_from_slice(&img[src..src + g.cin]);
                    }
                }
            }
        }
    };
    if rayon::current_num_threads() > 1 && g.batch > 1 {
        cols.par_chunks_mut(per_image).enumerate().for_each(fill);
    } else {
        cols.chunks_mut(per_image).enumerate().for_each(fill);
    }
    Cow::Owned(cols)
}

/// Adjoint of [`im2col`]: scatters row gradients back onto the input.
pub fn col2im<T: Scalar>(g: &ConvGeometry, cols: Vec<T>) -> Vec<T> {
    if g.is_pointwise() {
        return cols;
    }
    let plen = g.patch_len();
    let img_len = g.height * g.width * g.cin;
    let mut dx = vec![T::zero(); g.batch * img_len];
    let per_image = g.out_h * g.out_w * plen;
    let scatter = |(b, img): (usize, &mut [T])| {
        let chunk = &cols[b * per_image..(b + 1) * per_image];
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let row = &chunk[(oy * g.out_w + ox) * plen..(oy * g.out_w + ox + 1) * plen];
                for ky in 0..g.kh {
                    let iy = (oy * g.stride + ky * g.dilation) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    for kx in 0..g.kw {
                        let ix = (ox * g.stride + kx * g.dilation) as isize - g.padding as isize;
                        if ix < 0 || ix >= g.width as isize {
                            continue;
                        }
                        let dst = (iy as usize * g.width + ix as usize) * g.cin;
                        let src = (ky * g.kw + kx) * g.cin;
                        for (d, &s) in img[dst..dst + g.cin].iter_mut().zip(&row[src..src + g.cin]) {
                            *d += s;
                        }
                    }
                }
            }
        }
    };
    if rayon::current_num_threads() > 1 && g.batch > 1 {
        dx.par_chunks_mut(img_len).enumerate().for_each(scatter);
    } else {
        dx.chunks_mut(img_len).enumerate().for_each(scatter);
    }
    dx
}

/// Axis permutation: output axis `i` is input axis `perm[i]`.
pub fn permute<T: Scalar>(shape: &[usize], data: &[T], perm: &[usize]) -> Vec<T> {
    let rank = shape.len();
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    if data.is_empty() {
        return out;
    }
    // Copy contiguous runs when the trailing axes stay in place.
    let mut keep = 0;
    while keep < rank && perm[rank - 1 - keep] == rank - 1 - keep {
        keep += 1;
    }
    let run: usize = shape[rank - keep..].iter().product();
    let outer_rank = rank - keep;
    let mut idx = vec![0usize; outer_rank];
    let mut off = 0usize;
    let outer: usize = out_shape[..outer_rank].iter().product();
    for _ in 0..outer {
        out.extend_from_slice(&data[off..off + run]);
        for d in (0..outer_rank).rev() {
            idx[d] += 1;
            off += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    out
}

pub fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Visits every element of a broadcast `out` shape together with the flat
/// offsets of the two operands (given by their broadcast strides).
pub fn broadcast_walk(
    out: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let rank = out.len();
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let inner = out[rank - 1];
    let (step_a, step_b) = (sa[rank - 1], sb[rank - 1]);
    let outer: usize = out[..rank - 1].iter().product();
    let mut idx = vec![0usize; rank - 1];
    let (mut base_a, mut base_b) = (0usize, 0usize);
    let mut o = 0;
    for _ in 0..outer {
        let (mut ia, mut ib) = (base_a, base_b);
        for _ in 0..inner {
            f(o, ia, ib);
            o += 1;
            ia += step_a;
            ib += step_b;
        }
        for d in (0..rank - 1).rev() {
            idx[d] += 1;
            base_a += sa[d];
            base_b += sb[d];
            if idx[d] < out[d] {
                break;
            }
            base_a -= sa[d] * out[d];
            base_b -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

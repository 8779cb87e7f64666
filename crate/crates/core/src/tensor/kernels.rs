//! Raw numeric kernels over flat row-major buffers.

use super::Real;
use crate::par::{self, Exec};

/// `[m, k] x [k, n] -> [m, n]` using the default execution mode.
pub fn matmul<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    matmul_with(Exec::for_work(m * k * n), a, b, m, k, n)
}

/// `[m, k] x [k, n] -> [m, n]` with an explicit execution mode.
///
/// Every output row is accumulated in the same `p`-ascending order whatever
/// the mode, so the parallel and sequential paths agree bit for bit.
pub fn matmul_with<T: Real>(exec: Exec, a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![T::zero(); m * n];
    if n == 0 {
        return out;
    }
    par::chunks_mut(exec, &mut out, n, |i, row| {
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    });
    out
}

pub fn transpose<T: Real>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// Numpy-style broadcast of two shapes (trailing dimensions aligned).
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let nd = a.len().max(b.len());
    let mut out = vec![0; nd];
    for i in 0..nd {
        let da = if i + a.len() >= nd { a[i + a.len() - nd] } else { 1 };
        let db = if i + b.len() >= nd { b[i + b.len() - nd] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` laid out against `out` (zero on broadcast axes).
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let nd = out.len();
    let mut strides = vec![0; nd];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        let oi = i + nd - shape.len();
        strides[oi] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Source offsets of every element of `out` when `shape` is broadcast to it.
fn broadcast_offsets(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let strides = broadcast_strides(shape, out);
    let n: usize = out.iter().product();
    let mut offsets = Vec::with_capacity(n);
    let mut idx = vec![0usize; out.len()];
    let mut off = 0usize;
    for _ in 0..n {
        offsets.push(off);
        for d in (0..out.len()).rev() {
            idx[d] += 1;
            off += strides[d];
            if idx[d] < out[d] {
                break;
            }
            off -= strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    offsets
}

/// Elementwise `f(a, b)` under broadcasting; `out` must be the broadcast shape.
pub fn broadcast_zip<T: Real>(
    a: &[T],
    ashape: &[usize],
    b: &[T],
    bshape: &[usize],
    out: &[usize],
    f: impl Fn(T, T) -> T,
) -> Vec<T> {
    if ashape == bshape {
        return a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect();
    }
    let n: usize = out.iter().product();
    if bshape.iter().product::<usize>() == 1 && ashape == out {
        let y = b[0];
        return a.iter().map(|&x| f(x, y)).collect();
    }
    let oa = broadcast_offsets(ashape, out);
    let ob = broadcast_offsets(bshape, out);
    (0..n).map(|i| f(a[oa[i]], b[ob[i]])).collect()
}

/// Sums a gradient of shape `out` down to the broadcast source `shape`.
pub fn reduce_to_shape<T: Real>(g: &[T], out: &[usize], shape: &[usize]) -> Vec<T> {
    if out == shape {
        return g.to_vec();
    }
    let n: usize = shape.iter().product();
    let mut acc = vec![T::zero(); n];
    let offs = broadcast_offsets(shape, out);
    for (gv, o) in g.iter().zip(offs) {
        acc[o] += *gv;
    }
    acc
}

/// Splits `shape` around `axis` into `(outer, len, inner)`.
pub fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub fn softmax<T: Real>(x: &[T], shape: &[usize], axis: usize) -> Vec<T> {
    let (outer, len, inner) = axis_split(shape, axis);
    let mut out = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * len * inner + j * inner + i;
            let mut max = T::neg_infinity();
            for j in 0..len {
                max = max.max(x[at(j)]);
            }
            let mut total = T::zero();
            for j in 0..len {
                let e = (x[at(j)] - max).exp();
                out[at(j)] = e;
                total += e;
            }
            for j in 0..len {
                out[at(j)] /= total;
            }
        }
    }
    out
}

/// Base-2 log-softmax: `(x - max - ln(sum(exp(x - max)))) / ln 2`.
pub fn log2_softmax<T: Real>(x: &[T], shape: &[usize], axis: usize) -> Vec<T> {
    let (outer, len, inner) = axis_split(shape, axis);
    let inv_ln2 = T::one() / T::of(std::f64::consts::LN_2);
    let mut out = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * len * inner + j * inner + i;
            let mut max = T::neg_infinity();
            for j in 0..len {
                max = max.max(x[at(j)]);
            }
            let mut total = T::zero();
            for j in 0..len {
                total += (x[at(j)] - max).exp();
            }
            let lse = max + total.ln();
            for j in 0..len {
                out[at(j)] = (x[at(j)] - lse) * inv_ln2;
            }
        }
    }
    out
}

pub fn sum_axis<T: Real>(x: &[T], shape: &[usize], axis: usize) -> Vec<T> {
    let (outer, len, inner) = axis_split(shape, axis);
    let mut out = vec![T::zero(); outer * inner];
    for o in 0..outer {
        for j in 0..len {
            let src = &x[(o * len + j) * inner..(o * len + j + 1) * inner];
            for (d, &s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                *d += s;
            }
        }
    }
    out
}

/// Repeats a reduced tensor `[outer, inner]` back along `axis` of `shape`.
pub fn expand_axis<T: Real>(g: &[T], shape: &[usize], axis: usize, scale: T) -> Vec<T> {
    let (outer, len, inner) = axis_split(shape, axis);
    let mut out = vec![T::zero(); outer * len * inner];
    for o in 0..outer {
        for j in 0..len {
            let dst = &mut out[(o * len + j) * inner..(o * len + j + 1) * inner];
            for (d, &s) in dst.iter_mut().zip(&g[o * inner..(o + 1) * inner]) {
                *d = s * scale;
            }
        }
    }
    out
}

/// Geometry of a 2-D convolution over `[n, c, h, w]` with a square kernel.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.kw) / self.stride + 1
    }

    pub fn patch_len(&self) -> usize {
        self.c * self.kh * self.kw
    }

    pub fn positions(&self) -> usize {
        self.n * self.out_h() * self.out_w()
    }
}

/// Unfolds `[n, c, h, w]` into patches `[n * oh * ow, c * kh * kw]`.
pub fn im2col<T: Real>(exec: Exec, x: &[T], g: &ConvGeom) -> Vec<T> {
    let (oh, ow, plen) = (g.out_h(), g.out_w(), g.patch_len());
    let mut cols = vec![T::zero(); g.positions() * plen];
    par::chunks_mut(exec, &mut cols, oh * ow * plen, |b, chunk| {
        let img = &x[b * g.c * g.h * g.w..(b + 1) * g.c * g.h * g.w];
        for oy in 0..oh {
            for ox in 0..ow {
                let row = &mut chunk[(oy * ow + ox) * plen..(oy * ow + ox + 1) * plen];
                let mut p = 0;
                for ch in 0..g.c {
                    for ky in 0..g.kh {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        for kx in 0..g.kw {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if iy >= 0 && ix >= 0 && (iy as usize) < g.h && (ix as usize) < g.w {
                                row[p] = img[(ch * g.h + iy as usize) * g.w + ix as usize];
                            }
                            p += 1;
                        }
                    }
                }
            }
        }
    });
    cols
}

/// Folds patch gradients back onto the input, the adjoint of [`im2col`].
pub fn col2im<T: Real>(exec: Exec, cols: &[T], g: &ConvGeom) -> Vec<T> {
    let (oh, ow, plen) = (g.out_h(), g.out_w(), g.patch_len());
    let img_len = g.c * g.h * g.w;
    let mut x = vec![T::zero(); g.n * img_len];
    par::chunks_mut(exec, &mut x, img_len, |b, img| {
        let chunk = &cols[b * oh * ow * plen..(b + 1) * oh * ow * plen];
        for oy in 0..oh {
            for ox in 0..ow {
                let row = &chunk[(oy * ow + ox) * plen..(oy * ow + ox + 1) * plen];
                let mut p = 0;
                for ch in 0..g.c {
                    for ky in 0..g.kh {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        for kx in 0..g.kw {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if iy >= 0 && ix >= 0 && (iy as usize) < g.h && (ix as usize) < g.w {
                                img[(ch * g.h + iy as usize) * g.w + ix as usize] += row[p];
                            }
                            p += 1;
                        }
                    }
                }
            }
        }
    });
    x
}

/// `[n * oh * ow, o]` (position-major) to `[n, o, oh, ow]`.
pub fn positions_to_nchw<T: Real>(y: &[T], n: usize, o: usize, hw: usize) -> Vec<T> {
    let mut out = vec![T::zero(); y.len()];
    for b in 0..n {
        for p in 0..hw {
            for ch in 0..o {
                out[(b * o + ch) * hw + p] = y[(b * hw + p) * o + ch];
            }
        }
    }
    out
}

/// `[n, o, oh, ow]` to `[n * oh * ow, o]`, the inverse of [`positions_to_nchw`].
pub fn nchw_to_positions<T: Real>(y: &[T], n: usize, o: usize, hw: usize) -> Vec<T> {
    let mut out = vec![T::zero(); y.len()];
    for b in 0..n {
        for ch in 0..o {
            for p in 0..hw {
                out[(b * hw + p) * o + ch] = y[(b * o + ch) * hw + p];
            }
        }
    }
    out
}

/// Full forward convolution: `x [n,c,h,w]`, `kernel [o,c,kh,kw]` -> `[n,o,oh,ow]`.
/// Returns the output together with the unfolded patches.
pub fn conv2d_forward<T: Real>(exec: Exec, x: &[T], kernel: &[T], o: usize, g: &ConvGeom) -> (Vec<T>, Vec<T>) {
    let cols = im2col(exec, x, g);
    let wt = transpose(kernel, o, g.patch_len());
    let y = matmul_with(exec, &cols, &wt, g.positions(), g.patch_len(), o);
    let hw = g.out_h() * g.out_w();
    (positions_to_nchw(&y, g.n, o, hw), cols)
}

//! Raw numeric kernels on slices. Shapes are validated by the tape.

use crate::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let n_out = g.ho * g.wo;
    for c in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * n_out..(row + 1) * n_out];
                for oi in 0..g.ho {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oi * g.wo..(oi + 1) * g.wo];
                    if ii < 0 || ii >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &x[(c * g.h + ii as usize) * g.w..][..g.w];
                    for (oj, d) in line.iter_mut().enumerate() {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        *d = if jj < 0 || jj >= g.w as isize { T::zero() } else { src[jj as usize] };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let n_out = g.ho * g.wo;
    for c in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * n_out..(row + 1) * n_out];
                for oi in 0..g.ho {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    if ii < 0 || ii >= g.h as isize {
                        continue;
                    }
                    let dst = &mut dx[(c * g.h + ii as usize) * g.w..][..g.w];
                    for oj in 0..g.wo {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        if jj >= 0 && jj < g.w as isize {
                            dst[jj as usize] = dst[jj as usize] + src[oi * g.wo + oj];
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution of a batch; `x` is `(n, c, h, w)`, weights `(o, c, kh, kw)`.
pub(crate) fn conv_forward<T: Scalar>(x: &[T], w: &[T], b: Option<&[T]>, n: usize, g: &ConvGeom) -> Vec<T> {
    let n_out = g.ho * g.wo;
    let in_sz = g.c * g.h * g.w;
    let mut out = vec![T::zero(); n * g.o * n_out];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); g.patch() * n_out] };
    for i in 0..n {
        let xi = &x[i * in_sz..(i + 1) * in_sz];
        let yi = &mut out[i * g.o * n_out..(i + 1) * g.o * n_out];
        if let Some(b) = b {
            for (o, row) in yi.chunks_mut(n_out).enumerate() {
                row.fill(b[o]);
            }
        }
        let src: &[T] = if g.is_pointwise() {
            xi
        } else {
            im2col(xi, g, &mut cols);
            &cols
        };
        let k = g.patch();
        T::gemm(g.o, k, n_out, w, k as isize, 1, src, n_out as isize, 1, T::one(), yi);
    }
    out
}

/// Gradients of a batch convolution: `(dx, dw, db)`; `dx` only when requested.
pub(crate) fn conv_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    dy: &[T],
    n: usize,
    g: &ConvGeom,
    want_dx: bool,
    want_dw: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>, Vec<T>) {
    let n_out = g.ho * g.wo;
    let in_sz = g.c * g.h * g.w;
    let k = g.patch();
    let mut dx = want_dx.then(|| vec![T::zero(); x.len()]);
    let mut dw = want_dw.then(|| vec![T::zero(); w.len()]);
    let mut db = vec![T::zero(); g.o];
    let mut cols = vec![T::zero(); k * n_out];
    for i in 0..n {
        let xi = &x[i * in_sz..(i + 1) * in_sz];
        let dyi = &dy[i * g.o * n_out..(i + 1) * g.o * n_out];
        for (o, row) in dyi.chunks(n_out).enumerate() {
            db[o] = row.iter().fold(db[o], |a, &v| a + v);
        }
        if let Some(dw) = dw.as_mut() {
            let src: &[T] = if g.is_pointwise() {
                xi
            } else {
                im2col(xi, g, &mut cols);
                &cols
            };
            // dw (o x k) += dy (o x n_out) * src^T (n_out x k)
            T::gemm(g.o, n_out, k, dyi, n_out as isize, 1, src, 1, n_out as isize, T::one(), dw);
        }
        if let Some(dx) = dx.as_mut() {
            let dxi = &mut dx[i * in_sz..(i + 1) * in_sz];
            if g.is_pointwise() {
                T::gemm(k, g.o, n_out, w, 1, k as isize, dyi, n_out as isize, 1, T::one(), dxi);
            } else {
                T::gemm(k, g.o, n_out, w, 1, k as isize, dyi, n_out as isize, 1, T::zero(), &mut cols);
                col2im(&cols, g, dxi);
            }
        }
    }
    (dx, dw, db)
}

/// Output size and flat source index of the max element for each output of a
/// windowed max. Windows are given per axis as half-open `[start, end)` ranges.
pub(crate) fn window_max<T: Scalar>(
    x: &[T],
    planes: usize,
    h: usize,
    w: usize,
    rows: &[(usize, usize)],
    cols: &[(usize, usize)],
) -> (Vec<T>, Vec<u32>) {
    let mut out = Vec::with_capacity(planes * rows.len() * cols.len());
    let mut idx = Vec::with_capacity(out.capacity());
    for p in 0..planes {
        let base = p * h * w;
        for &(r0, r1) in rows {
            for &(c0, c1) in cols {
                let mut best = base + r0 * w + c0;
                for r in r0..r1 {
                    for c in c0..c1 {
                        let j = base + r * w + c;
                        if x[j] > x[best] {
                            best = j;
                        }
                    }
                }
                out.push(x[best]);
                idx.push(best as u32);
            }
        }
    }
    (out, idx)
}

pub(crate) fn strided_windows(len: usize, k: usize, stride: usize) -> Vec<(usize, usize)> {
    (0..(len - k) / stride + 1).map(|i| (i * stride, i * stride + k)).collect()
}

/// Adaptive pooling bins: `[floor(i*len/out), ceil((i+1)*len/out))`, shifted by `offset`.
pub(crate) fn adaptive_windows(offset: usize, len: usize, out: usize) -> Vec<(usize, usize)> {
    (0..out)
        .map(|i| (offset + i * len / out, offset + ((i + 1) * len).div_ceil(out)))
        .collect()
}

pub(crate) fn softmax_rows<T: Scalar>(x: &[T], k: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for (src, dst) in x.chunks(k).zip(out.chunks_mut(k)) {
        let m = src.iter().fold(T::neg_infinity(), |a, &v| a.max(v));
        let mut s = T::zero();
        for (d, &v) in dst.iter_mut().zip(src) {
            *d = (v - m).exp();
            s = s + *d;
        }
        for d in dst.iter_mut() {
            *d = *d / s;
        }
    }
    out
}

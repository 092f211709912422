//! Matrix products and im2col, all row-major.
//!
//! Every output element is accumulated over the shared dimension in index
//! order by a single task, so results are identical for any thread count.

use crate::par;
use crate::tensor::Float;

const COL_BLOCK: usize = 256;

fn gemm_block<T: Float>(a: &[T], b: &[T], out: &mut [T], rows: std::ops::Range<usize>, k: usize, n: usize, cols: std::ops::Range<usize>) {
    let width = cols.len();
    for (r, i) in rows.enumerate() {
        let crow = &mut out[r * width..(r + 1) * width];
        for kk in 0..k {
            let aik = a[i * k + kk];
            let brow = &b[kk * n + cols.start..kk * n + cols.end];
            for (c, &bv) in crow.iter_mut().zip(brow) {
                *c += aik * bv;
            }
        }
    }
}

/// `c = a · b` (or `c += a · b` when `accumulate`), `a: [m, k]`, `b: [k, n]`.
pub fn gemm<T: Float>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize, accumulate: bool) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if !accumulate {
        c.iter_mut().for_each(|v| *v = T::zero());
    }
    if m == 0 || n == 0 {
        return;
    }
    let threads = par::threads();
    if m >= 4 * threads || n <= COL_BLOCK {
        let rows_per = m.div_ceil(threads * 4).max(1);
        par::for_each_chunk_mut(c, rows_per * n, |chunk_idx, chunk| {
            let start = chunk_idx * rows_per;
            let rows = start..start + chunk.len() / n;
            // chunk doubles as the accumulator for its rows
            gemm_block(a, b, chunk, rows, k, n, 0..n);
        });
    } else {
        let blocks = n.div_ceil(COL_BLOCK);
        let parts = par::map_range(blocks, |bi| {
            let cols = bi * COL_BLOCK..((bi + 1) * COL_BLOCK).min(n);
            let w = cols.len();
            let mut buf = vec![T::zero(); m * w];
            for i in 0..m {
                buf[i * w..(i + 1) * w].copy_from_slice(&c[i * n + cols.start..i * n + cols.end]);
            }
            gemm_block(a, b, &mut buf, 0..m, k, n, cols);
            buf
        });
        for (bi, buf) in parts.into_iter().enumerate() {
            let start = bi * COL_BLOCK;
            let w = buf.len() / m;
            for i in 0..m {
                c[i * n + start..i * n + start + w].copy_from_slice(&buf[i * w..(i + 1) * w]);
            }
        }
    }
}

/// `c (+)= a · bᵀ`, `a: [m, k]`, `b: [n, k]`: row dot products.
pub fn gemm_nt<T: Float>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize, accumulate: bool) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    par::for_each_chunk_mut(c, n, |i, crow| {
        let arow = &a[i * k..(i + 1) * k];
        for (j, cv) in crow.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                s += x * y;
            }
            if accumulate {
                *cv += s;
            } else {
                *cv = s;
            }
        }
    });
}

/// `[rows, cols]` to `[cols, rows]`.
pub fn transpose<T: Float>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); a.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// `c (+)= aᵀ · b`, `a: [k, m]`, `b: [k, n]`.
pub fn gemm_tn<T: Float>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize, accumulate: bool) {
    let at = transpose(a, k, m);
    gemm(&at, b, c, m, k, n, accumulate);
}

/// 2-D convolution geometry for one image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub pad: (usize, usize),
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        let (kh, kw) = self.kernel;
        let (sh, sw) = self.stride;
        let (ph, pw) = self.pad;
        ((self.height + 2 * ph - kh) / sh + 1, (self.width + 2 * pw - kw) / sw + 1)
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel.0 * self.kernel.1
    }
}

/// `[C, H, W]` to `[C·kh·kw, Ho·Wo]`, zero outside the image.
pub fn im2col<T: Float>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let (ho, wo) = g.out_hw();
    let (kh, kw) = g.kernel;
    let p = ho * wo;
    let mut cols = vec![T::zero(); g.col_rows() * p];
    par::for_each_chunk_mut(&mut cols, p, |row, out| {
        let c = row / (kh * kw);
        let ki = (row / kw) % kh;
        let kj = row % kw;
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for oi in 0..ho {
            let ii = (oi * g.stride.0 + ki) as isize - g.pad.0 as isize;
            if ii < 0 || ii >= g.height as isize {
                continue;
            }
            let src = &plane[ii as usize * g.width..(ii as usize + 1) * g.width];
            for oj in 0..wo {
                let jj = (oj * g.stride.1 + kj) as isize - g.pad.1 as isize;
                if jj >= 0 && jj < g.width as isize {
                    out[oi * wo + oj] = src[jj as usize];
                }
            }
        }
    });
    cols
}

/// Adjoint of [`im2col`]: scatter-adds columns back onto `[C, H, W]`.
pub fn col2im<T: Float>(cols: &[T], g: &ConvGeom, x: &mut [T]) {
    let (ho, wo) = g.out_hw();
    let (kh, kw) = g.kernel;
    let p = ho * wo;
    let hw = g.height * g.width;
    par::for_each_chunk_mut(x, hw, |c, plane| {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (c * kh + ki) * kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oi in 0..ho {
                    let ii = (oi * g.stride.0 + ki) as isize - g.pad.0 as isize;
                    if ii < 0 || ii >= g.height as isize {
                        continue;
                    }
                    for oj in 0..wo {
                        let jj = (oj * g.stride.1 + kj) as isize - g.pad.1 as isize;
                        if jj >= 0 && jj < g.width as isize {
                            plane[ii as usize * g.width + jj as usize] += src[oi * wo + oj];
                        }
                    }
                }
            }
        }
    });
}

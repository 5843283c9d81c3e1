//! Hot loops shared by the autodiff ops.
//!
//! Every kernel writes disjoint output chunks and accumulates each output
//! element in a fixed order, so the sequential and parallel drivers produce
//! bit-identical results regardless of thread count.

use super::Scalar;

/// Execution policy for the data-parallel kernels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Exec {
    Sequential,
    #[cfg(feature = "parallel")]
    Parallel,
}

impl Exec {
    /// Policy used by the autodiff graph: parallel when the `parallel`
    /// feature is enabled, sequential otherwise.
    pub const DEFAULT: Exec = {
        #[cfg(feature = "parallel")]
        {
            Exec::Parallel
        }
        #[cfg(not(feature = "parallel"))]
        {
            Exec::Sequential
        }
    };
}

/// Below this many multiply-adds the parallel driver falls back to a plain loop.
#[cfg(feature = "parallel")]
const PAR_THRESHOLD: usize = 1 << 15;

fn for_each_chunk<S, F>(exec: Exec, out: &mut [S], chunk: usize, work: usize, f: F)
where
    S: Scalar,
    F: Fn(usize, &mut [S]) + Sync + Send,
{
    match exec {
        #[cfg(feature = "parallel")]
        Exec::Parallel if work >= PAR_THRESHOLD => {
            use rayon::prelude::*;
            out.par_chunks_mut(chunk)
                .enumerate()
                .for_each(|(i, c)| f(i, c));
        }
        _ => {
            let _ = work;
            out.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
        }
    }
}

/// `out[m×p] = a[m×k] · b[k×p]`.
pub fn matmul<S: Scalar>(exec: Exec, a: &[S], b: &[S], m: usize, k: usize, p: usize, out: &mut [S]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * p);
    debug_assert_eq!(out.len(), m * p);
    for_each_chunk(exec, out, p, m * k * p, |i, row| {
        row.fill(S::ZERO);
        let a_row = &a[i * k..(i + 1) * k];
        for (kk, &av) in a_row.iter().enumerate() {
            let b_row = &b[kk * p..(kk + 1) * p];
            for (o, &bv) in row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    });
}

/// Transposes a row-major `rows×cols` matrix.
pub fn transpose<S: Scalar>(src: &[S], rows: usize, cols: usize) -> Vec<S> {
    let mut out = vec![S::ZERO; src.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = src[r * cols + c];
        }
    }
    out
}

/// Geometry of a 3×3, pad-1 convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvShape {
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub stride: usize,
}

impl ConvShape {
    pub fn out_h(&self) -> usize {
        (self.h - 1) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w - 1) / self.stride + 1
    }

    fn macs(&self) -> usize {
        self.c_in * self.c_out * 9 * self.out_h() * self.out_w()
    }
}

/// Range of output coordinates `o` whose tap `o*stride + d - 1` lands inside `[0, len)`.
#[inline]
fn valid_range(out_len: usize, len: usize, stride: usize, d: usize) -> (usize, usize) {
    let mut lo = 0;
    while lo < out_len && (lo * stride + d) < 1 {
        lo += 1;
    }
    let mut hi = out_len;
    while hi > lo && (hi - 1) * stride + d > len {
        hi -= 1;
    }
    (lo, hi)
}

/// Cross-correlation with zero padding 1. `x: [c_in,h,w]`, `k: [c_out,c_in,3,3]`.
pub fn conv3x3_forward<S: Scalar>(exec: Exec, s: ConvShape, x: &[S], k: &[S], bias: &[S], out: &mut [S]) {
    let (ho, wo) = (s.out_h(), s.out_w());
    for_each_chunk(exec, out, ho * wo, s.macs(), |co, plane| {
        plane.fill(bias[co]);
        for ci in 0..s.c_in {
            let xin = &x[ci * s.h * s.w..(ci + 1) * s.h * s.w];
            for ky in 0..3 {
                let (y0, y1) = valid_range(ho, s.h, s.stride, ky);
                for kx in 0..3 {
                    let wv = k[((co * s.c_in + ci) * 3 + ky) * 3 + kx];
                    let (x0, x1) = valid_range(wo, s.w, s.stride, kx);
                    for y in y0..y1 {
                        let iy = y * s.stride + ky - 1;
                        let in_row = &xin[iy * s.w..(iy + 1) * s.w];
                        let out_row = &mut plane[y * wo..(y + 1) * wo];
                        if s.stride == 1 {
                            let src = &in_row[x0 + kx - 1..x1 + kx - 1];
                            for (o, &v) in out_row[x0..x1].iter_mut().zip(src) {
                                *o += wv * v;
                            }
                        } else {
                            for xo in x0..x1 {
                                out_row[xo] += wv * in_row[xo * s.stride + kx - 1];
                            }
                        }
                    }
                }
            }
        }
    });
}

/// Gradient of the convolution with respect to its input.
pub fn conv3x3_grad_input<S: Scalar>(exec: Exec, s: ConvShape, g: &[S], k: &[S], dx: &mut [S]) {
    let (ho, wo) = (s.out_h(), s.out_w());
    for_each_chunk(exec, dx, s.h * s.w, s.macs(), |ci, plane| {
        plane.fill(S::ZERO);
        for co in 0..s.c_out {
            let gp = &g[co * ho * wo..(co + 1) * ho * wo];
            for ky in 0..3 {
                let (y0, y1) = valid_range(ho, s.h, s.stride, ky);
                for kx in 0..3 {
                    let wv = k[((co * s.c_in + ci) * 3 + ky) * 3 + kx];
                    let (x0, x1) = valid_range(wo, s.w, s.stride, kx);
                    for y in y0..y1 {
                        let iy = y * s.stride + ky - 1;
                        let g_row = &gp[y * wo..(y + 1) * wo];
                        let d_row = &mut plane[iy * s.w..(iy + 1) * s.w];
                        if s.stride == 1 {
                            let dst = &mut d_row[x0 + kx - 1..x1 + kx - 1];
                            for (d, &gv) in dst.iter_mut().zip(&g_row[x0..x1]) {
                                *d += wv * gv;
                            }
                        } else {
                            for xo in x0..x1 {
                                d_row[xo * s.stride + kx - 1] += wv * g_row[xo];
                            }
                        }
                    }
                }
            }
        }
    });
}

/// Gradient of the convolution with respect to kernel and bias.
pub fn conv3x3_grad_kernel<S: Scalar>(
    exec: Exec,
    s: ConvShape,
    g: &[S],
    x: &[S],
    dk: &mut [S],
    dbias: &mut [S],
) {
    let (ho, wo) = (s.out_h(), s.out_w());
    for_each_chunk(exec, dk, s.c_in * 9, s.macs(), |co, kern| {
        let gp = &g[co * ho * wo..(co + 1) * ho * wo];
        for ci in 0..s.c_in {
            let xin = &x[ci * s.h * s.w..(ci + 1) * s.h * s.w];
            for ky in 0..3 {
                let (y0, y1) = valid_range(ho, s.h, s.stride, ky);
                for kx in 0..3 {
                    let (x0, x1) = valid_range(wo, s.w, s.stride, kx);
                    let mut acc = S::ZERO;
                    for y in y0..y1 {
                        let iy = y * s.stride + ky - 1;
                        let in_row = &xin[iy * s.w..(iy + 1) * s.w];
                        let g_row = &gp[y * wo..(y + 1) * wo];
                        for xo in x0..x1 {
                            acc += g_row[xo] * in_row[xo * s.stride + kx - 1];
                        }
                    }
                    kern[(ci * 3 + ky) * 3 + kx] = acc;
                }
            }
        }
    });
    for (co, db) in dbias.iter_mut().enumerate() {
        *db = g[co * ho * wo..(co + 1) * ho * wo].iter().copied().sum();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn valid_range_covers_padding() {
        // stride 1, width 4: tap 0 skips x=0, tap 2 skips x=3
        assert_eq!(valid_range(4, 4, 1, 0), (1, 4));
        assert_eq!(valid_range(4, 4, 1, 1), (0, 4));
        assert_eq!(valid_range(4, 4, 1, 2), (0, 3));
        // stride 2, width 4 -> 2 outputs reading 2o-1, 2o, 2o+1
        assert_eq!(valid_range(2, 4, 2, 0), (1, 2));
        assert_eq!(valid_range(2, 4, 2, 2), (0, 2));
    }

    #[test]
    fn matmul_by_hand() {
        let mut out = [0.0f64];
        matmul(Exec::Sequential, &[1.0, 2.0], &[3.0, 4.0], 1, 2, 1, &mut out);
        assert_eq!(out, [11.0]);
    }
}

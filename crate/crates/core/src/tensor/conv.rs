//! 3x3 convolution lowered to im2col + GEMM.

use crate::scalar::Scalar;

pub(crate) const KERNEL: usize = 3;

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - KERNEL) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - KERNEL) / self.stride + 1
    }

    fn k(&self) -> usize {
        self.cin * KERNEL * KERNEL
    }

    fn p(&self) -> usize {
        self.out_h() * self.out_w()
    }

    /// Input coordinate read by output `o` at kernel offset `kk`, if inside the image.
    #[inline]
    fn src(&self, o: usize, kk: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + kk) as isize - self.pad as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let (ho, wo) = (g.out_h(), g.out_w());
    let p = ho * wo;
    for ci in 0..g.cin {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = (ci * KERNEL + ky) * KERNEL + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..ho {
                    let Some(iy) = g.src(oy, ky, g.h) else {
                        dst[oy * wo..(oy + 1) * wo].fill(T::zero());
                        continue;
                    };
                    for ox in 0..wo {
                        dst[oy * wo + ox] = match g.src(ox, kx, g.w) {
                            Some(ix) => plane[iy * g.w + ix],
                            None => T::zero(),
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let (ho, wo) = (g.out_h(), g.out_w());
    let p = ho * wo;
    for ci in 0..g.cin {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = (ci * KERNEL + ky) * KERNEL + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..ho {
                    let Some(iy) = g.src(oy, ky, g.h) else { continue };
                    for ox in 0..wo {
                        if let Some(ix) = g.src(ox, kx, g.w) {
                            plane[iy * g.w + ix] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Returns the output `[N, Cout, Ho, Wo]` and the im2col buffers kept for backward.
pub(crate) fn forward<T: Scalar>(x: &[T], weight: &[T], bias: &[T], g: &ConvGeom) -> (Vec<T>, Vec<T>) {
    let (k, p) = (g.k(), g.p());
    let mut cols = vec![T::zero(); g.n * k * p];
    let mut out = vec![T::zero(); g.n * g.cout * p];
    for n in 0..g.n {
        let xin = &x[n * g.cin * g.h * g.w..(n + 1) * g.cin * g.h * g.w];
        let c = &mut cols[n * k * p..(n + 1) * k * p];
        im2col(xin, g, c);
        let o = &mut out[n * g.cout * p..(n + 1) * g.cout * p];
        for (co, row) in o.chunks_mut(p).enumerate() {
            row.fill(bias[co]);
        }
        T::gemm(g.cout, k, p, T::one(), weight, (k, 1), c, (p, 1), T::one(), o, (p, 1));
    }
    (out, cols)
}

pub(crate) struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dweight: Vec<T>,
    pub dbias: Vec<T>,
}

pub(crate) fn backward<T: Scalar>(dout: &[T], cols: &[T], weight: &[T], g: &ConvGeom, need_dx: bool) -> ConvGrads<T> {
    let (k, p) = (g.k(), g.p());
    let mut dweight = vec![T::zero(); g.cout * k];
    let mut dbias = vec![T::zero(); g.cout];
    let mut dx = need_dx.then(|| vec![T::zero(); g.n * g.cin * g.h * g.w]);
    let mut dcols = vec![T::zero(); if need_dx { k * p } else { 0 }];
    for n in 0..g.n {
        let d = &dout[n * g.cout * p..(n + 1) * g.cout * p];
        let c = &cols[n * k * p..(n + 1) * k * p];
        for (co, row) in d.chunks(p).enumerate() {
            dbias[co] += row.iter().copied().sum::<T>();
        }
        // dW[co, kk] += sum_p dout[co, p] * cols[kk, p]
        T::gemm(g.cout, p, k, T::one(), d, (p, 1), c, (1, p), T::one(), &mut dweight, (k, 1));
        if let Some(dx) = dx.as_mut() {
            // dcols[kk, p] = sum_co W[co, kk] * dout[co, p]
            T::gemm(k, g.cout, p, T::one(), weight, (1, k), d, (p, 1), T::zero(), &mut dcols, (p, 1));
            col2im(&dcols, g, &mut dx[n * g.cin * g.h * g.w..(n + 1) * g.cin * g.h * g.w]);
        }
    }
    ConvGrads { dx, dweight, dbias }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(x: &[f64], w: &[f64], b: &[f64], g: &ConvGeom) -> Vec<f64> {
        let (ho, wo) = (g.out_h(), g.out_w());
        let mut out = vec![0.0; g.n * g.cout * ho * wo];
        for n in 0..g.n {
            for co in 0..g.cout {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = b[co];
                        for ci in 0..g.cin {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                    if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                                        continue;
                                    }
                                    acc += w[((co * g.cin + ci) * 3 + ky) * 3 + kx]
                                        * x[((n * g.cin + ci) * g.h + iy as usize) * g.w + ix as usize];
                                }
                            }
                        }
                        out[((n * g.cout + co) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn gemm_lowering_matches_direct_loops() {
        for &(stride, h, w) in &[(1, 5, 4), (2, 7, 6), (2, 2, 2)] {
            let g = ConvGeom { n: 2, cin: 3, h, w, cout: 2, stride, pad: 1 };
            let x: Vec<f64> = (0..g.n * g.cin * h * w).map(|i| ((i * 37 % 11) as f64) - 5.0).collect();
            let wt: Vec<f64> = (0..g.cout * g.cin * 9).map(|i| ((i * 13 % 7) as f64) * 0.25 - 0.5).collect();
            let b = vec![0.5, -1.0];
            let (out, _) = forward(&x, &wt, &b, &g);
            assert_eq!(out, naive(&x, &wt, &b, &g));
        }
    }
}

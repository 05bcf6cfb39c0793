//! Single-scale structural similarity with an edge-clipped square window.

use crate::error::{GmmtError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const SSIM_WINDOW: usize = 7;
const RANGE_FLOOR: f64 = 1e-6;

/// SSIM of two `h x w` planes (row-major). The dynamic range is taken over
/// both planes jointly.
pub fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize) -> Result<f64> {
    if a.len() != h * w || b.len() != h * w {
        return Err(GmmtError::shape(format!("ssim planes must hold {h}x{w} values")));
    }
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(GmmtError::shape(format!("ssim needs extents >= {SSIM_WINDOW}, got {h}x{w}")));
    }
    let (lo, hi) = a.iter().chain(b).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let l = (hi - lo).max(RANGE_FLOOR);
    let c1 = (0.01 * l).powi(2);
    let c2 = (0.03 * l).powi(2);
    let r = SSIM_WINDOW / 2;
    let mut total = 0.0;
    for i in 0..h {
        for j in 0..w {
            let (r0, r1) = (i.saturating_sub(r), (i + r + 1).min(h));
            let (q0, q1) = (j.saturating_sub(r), (j + r + 1).min(w));
            let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for y in r0..r1 {
                for x in q0..q1 {
                    let (u, v) = (a[y * w + x], b[y * w + x]);
                    sa += u;
                    sb += v;
                    saa += u * u;
                    sbb += v * v;
                    sab += u * v;
                }
            }
            let n = ((r1 - r0) * (q1 - q0)) as f64;
            let (ma, mb) = (sa / n, sb / n);
            let va = saa / n - ma * ma;
            let vb = sbb / n - mb * mb;
            let cov = sab / n - ma * mb;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
    }
    Ok(total / (h * w) as f64)
}

/// Mean over channels of [`ssim_plane`] for `[C,H,W]` maps (or `[H,W]` planes).
pub fn ssim<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    a.expect_same_shape(b, "ssim")?;
    let (c, h, w) = match a.shape() {
        &[h, w] => (1, h, w),
        &[c, h, w] => (c, h, w),
        s => return Err(GmmtError::shape(format!("ssim expects [H,W] or [C,H,W], got {s:?}"))),
    };
    let to64 = |t: &Tensor<T>| t.data().iter().map(|v| v.to_f64_lossy()).collect::<Vec<_>>();
    let (a, b) = (to64(a), to64(b));
    let plane = h * w;
    let mut sum = 0.0;
    for k in 0..c {
        sum += ssim_plane(&a[k * plane..(k + 1) * plane], &b[k * plane..(k + 1) * plane], h, w)?;
    }
    Ok(sum / c as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn self_similarity_is_one() {
        let a: Vec<f64> = (0..64).map(|i| (f64::from(i) * 0.37).sin()).collect();
        assert_eq!(ssim_plane(&a, &a, 8, 8).unwrap(), 1.0);
        let c = vec![2.5; 64];
        assert_eq!(ssim_plane(&c, &c, 8, 8).unwrap(), 1.0);
    }

    #[test]
    fn rejects_small_extent() {
        assert!(ssim_plane(&[0.0; 36], &[0.0; 36], 6, 6).is_err());
    }
}

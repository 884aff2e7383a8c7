//! L1 + D-SSIM photometric loss with its image-space gradient.

use crate::imaging::{Image, ImageError};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// Relative weights of the L1 and D-SSIM terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub l1: f64,
    pub dssim: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { l1: 0.8, dssim: 0.2 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValue {
    pub total: f64,
    pub l1: f64,
    pub ssim: f64,
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let half = (SSIM_WINDOW / 2) as f64;
    let mut k = [0.0; SSIM_WINDOW];
    for (i, v) in k.iter_mut().enumerate() {
        let x = i as f64 - half;
        *v = (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let sum: f64 = k.iter().sum();
    k.map(|v| v / sum)
}

/// Separable "same"-size convolution with zero padding. The kernel is
/// symmetric, so this operator is its own adjoint.
fn blur(plane: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as isize;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        let row = &plane[y * w..(y + 1) * w];
        for x in 0..w {
            let mut acc = 0.0;
            for (t, kv) in k.iter().enumerate() {
                let xx = x as isize + t as isize - r;
                if xx >= 0 && (xx as usize) < w {
                    acc += kv * row[xx as usize];
                }
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (t, kv) in k.iter().enumerate() {
                let yy = y as isize + t as isize - r;
                if yy >= 0 && (yy as usize) < h {
                    acc += kv * tmp[yy as usize * w + x];
                }
            }
            out[y * w + x] = acc;
        }
    }
    out
}

fn channel(img: &Image, c: usize) -> Vec<f64> {
    img.pixels().iter().map(|p| p[c]).collect()
}

/// Mean SSIM over pixels and channels, and optionally its gradient with
/// respect to `x`.
pub fn ssim(x: &Image, y: &Image, want_grad: bool) -> (f64, Option<Vec<[f64; 3]>>) {
    let (w, h) = (x.width() as usize, x.height() as usize);
    let n = w * h;
    let k = gaussian_kernel();
    let mut total = 0.0;
    let mut grad = want_grad.then(|| vec![[0.0; 3]; n]);
    let norm = 1.0 / (3 * n) as f64;
    for c in 0..3 {
        let xs = channel(x, c);
        let ys = channel(y, c);
        let xx: Vec<f64> = xs.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = ys.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = xs.iter().zip(&ys).map(|(a, b)| a * b).collect();
        let mu_x = blur(&xs, w, h, &k);
        let mu_y = blur(&ys, w, h, &k);
        let e_xx = blur(&xx, w, h, &k);
        let e_yy = blur(&yy, w, h, &k);
        let e_xy = blur(&xy, w, h, &k);
        let mut d_mu = vec![0.0; n];
        let mut d_var = vec![0.0; n];
        let mut d_cov = vec![0.0; n];
        for p in 0..n {
            let (mx, my) = (mu_x[p], mu_y[p]);
            let vx = e_xx[p] - mx * mx;
            let vy = e_yy[p] - my * my;
            let cxy = e_xy[p] - mx * my;
            let n1 = 2.0 * mx * my + SSIM_C1;
            let n2 = 2.0 * cxy + SSIM_C2;
            let d1 = mx * mx + my * my + SSIM_C1;
            let d2 = vx + vy + SSIM_C2;
            let s = n1 * n2 / (d1 * d2);
            total += s;
            if want_grad {
                let ds_dmx = 2.0 * my * n2 / (d1 * d2) - s * 2.0 * mx / d1;
                let ds_dvx = -s / d2;
                let ds_dcov = 2.0 * n1 / (d1 * d2);
                // fold the mean-subtraction terms of the variance and covariance
                d_mu[p] = norm * (ds_dmx - 2.0 * ds_dvx * mx - ds_dcov * my);
                d_var[p] = norm * ds_dvx;
                d_cov[p] = norm * ds_dcov;
            }
        }
        if let Some(g) = grad.as_mut() {
            let a = blur(&d_mu, w, h, &k);
            let b = blur(&d_var, w, h, &k);
            let cc = blur(&d_cov, w, h, &k);
            for p in 0..n {
                g[p][c] = a[p] + 2.0 * xs[p] * b[p] + ys[p] * cc[p];
            }
        }
    }
    (total * norm, grad)
}

/// `w_l1 * mean|render - target| + w_dssim * (1 - SSIM) / 2`.
pub fn photometric_loss(render: &Image, target: &Image, weights: LossWeights) -> Result<LossValue, ImageError> {
    render.same_size(target)?;
    Ok(loss_and_grad(render, target, weights, false).0)
}

pub(crate) fn loss_and_grad(
    render: &Image,
    target: &Image,
    weights: LossWeights,
    want_grad: bool,
) -> (LossValue, Option<Vec<[f64; 3]>>) {
    let l1 = render.mean_abs_diff(target);
    let (s, sgrad) = ssim(render, target, want_grad);
    let value = LossValue {
        total: weights.l1 * l1 + weights.dssim * (1.0 - s) / 2.0,
        l1,
        ssim: s,
    };
    let grad = sgrad.map(|sg| {
        let inv = 1.0 / (3 * render.len()) as f64;
        render
            .pixels()
            .iter()
            .zip(target.pixels())
            .zip(sg)
            .map(|((r, t), g)| {
                let mut out = [0.0; 3];
                for c in 0..3 {
                    let d = r[c] - t[c];
                    let sign = if d > 0.0 {
                        1.0
                    } else if d < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                    out[c] = weights.l1 * sign * inv - 0.5 * weights.dssim * g[c];
                }
                out
            })
            .collect()
    });
    (value, grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn textured(w: u32, h: u32, phase: f64) -> Image {
        Image::from_fn(w, h, |i, j| {
            let (x, y) = (f64::from(i), f64::from(j));
            [
                0.5 + 0.3 * (0.3 * x + phase).sin(),
                0.5 + 0.2 * (0.2 * y - phase).cos(),
                0.4 + 0.1 * (0.1 * (x + y)).sin(),
            ]
        })
    }

    #[test]
    fn identical_images_have_zero_loss() {
        let a = textured(20, 16, 0.0);
        let l = photometric_loss(&a, &a, LossWeights::default()).unwrap();
        assert!(l.total.abs() < 1e-12);
        assert!((l.ssim - 1.0).abs() < 1e-12);
    }

    #[test]
    fn black_vs_white_l1_term() {
        let l = photometric_loss(&Image::filled(8, 8, [0.0; 3]), &Image::filled(8, 8, [1.0; 3]), LossWeights::default()).unwrap();
        assert!((0.8 * l.l1 - 0.8).abs() < 1e-12);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        assert!(photometric_loss(&Image::filled(4, 4, [0.0; 3]), &Image::filled(4, 5, [0.0; 3]), LossWeights::default()).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let x = textured(14, 12, 0.4);
        let y = textured(14, 12, 0.0);
        let wts = LossWeights::default();
        let (_, g) = loss_and_grad(&x, &y, wts, true);
        let g = g.unwrap();
        let h = 1e-6;
        for &(i, j, c) in &[(0u32, 0u32, 0usize), (5, 7, 1), (13, 11, 2), (7, 3, 0)] {
            let mut xp = x.clone();
            let mut xm = x.clone();
            let mut p = xp.get(i, j);
            p[c] += h;
            xp.set(i, j, p);
            let mut m = xm.get(i, j);
            m[c] -= h;
            xm.set(i, j, m);
            let fd = (photometric_loss(&xp, &y, wts).unwrap().total - photometric_loss(&xm, &y, wts).unwrap().total) / (2.0 * h);
            let an = g[(j * 14 + i) as usize][c];
            assert!((fd - an).abs() < 1e-6 * an.abs().max(1e-3), "{fd} vs {an}");
        }
    }
}

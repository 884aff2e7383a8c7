//! Analytic gradients of the photometric loss with respect to the rotation,
//! scales and opacity of one layer's surfels.

use nalgebra::{Matrix2, Matrix3, Vector3};
use rayon::prelude::*;

use super::loss::{loss_and_grad, LossValue, LossWeights};
use super::OptimError;
use crate::geometry::Camera;
use crate::imaging::{Image, Rgb};
use crate::raster::{cull, render_splats, splat_alpha, Frame, RenderConfig, Splat, TileIndex};
use crate::scene::{MultiScaleScene, Surfel, THICKNESS_RATIO};

/// Per-surfel gradients for one layer, indexed like the layer's surfels.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerGradients {
    /// With respect to the raw (unnormalized) quaternion components.
    pub rotation: Vec<[f64; 4]>,
    pub scale: Vec<[f64; 2]>,
    pub opacity: Vec<f64>,
}

impl LayerGradients {
    fn zeros(n: usize) -> Self {
        Self {
            rotation: vec![[0.0; 4]; n],
            scale: vec![[0.0; 2]; n],
            opacity: vec![0.0; n],
        }
    }

    pub fn max_abs(&self) -> f64 {
        let r = self.rotation.iter().flatten();
        let s = self.scale.iter().flatten();
        r.chain(s).chain(&self.opacity).fold(0.0, |m, v| m.max(v.abs()))
    }
}

#[derive(Clone, Debug)]
pub struct BackwardOutput {
    pub loss: LossValue,
    pub gradients: LayerGradients,
    pub frame: Frame,
}

/// Accumulated per-splat quantities: dL/d(modulated opacity) and the
/// full-matrix gradient of the conic `[a, b, c]`.
#[derive(Clone, Copy, Default)]
struct SplatGrad {
    opacity: f64,
    conic: [f64; 3],
}

struct Fragment {
    pos: usize,
    alpha: f64,
    g: f64,
    delta: [f64; 2],
    clamped: bool,
    /// Transmittance in front of this fragment.
    t: f64,
}

/// Renders `camera`, evaluates the loss against `target` and back-propagates
/// into the surfels of `layer`, which must be the newest layer.
pub fn render_backward(
    scene: &MultiScaleScene,
    layer: usize,
    camera: &Camera,
    target: &Image,
    render: &RenderConfig,
    weights: LossWeights,
) -> Result<BackwardOutput, OptimError> {
    if layer + 1 != scene.layer_count() {
        return Err(OptimError::NotNewestLayer(layer));
    }
    if target.width() != camera.width() || target.height() != camera.height() {
        return Err(OptimError::TargetSize {
            got: (target.width(), target.height()),
            want: (camera.width(), camera.height()),
        });
    }
    let splats = cull(scene, camera, render);
    let (frame, _) = render_splats(&splats, camera, render);
    let (loss, dl_dc) = loss_and_grad(&frame.color, target, weights, true);
    let dl_dc = dl_dc.expect("gradient requested");

    let (w, h) = (camera.width(), camera.height());
    let index = TileIndex::build(&splats, w, h);
    let per_tile: Vec<Vec<(u32, SplatGrad)>> = (0..index.lists.len())
        .into_par_iter()
        .map(|tile| {
            let list = &index.lists[tile];
            if list.is_empty() {
                return Vec::new();
            }
            let mut acc = vec![SplatGrad::default(); list.len()];
            let mut frags = Vec::new();
            for (x, y) in index.tile_pixels(tile, w, h) {
                let px = [f64::from(x) + 0.5, f64::from(y) + 0.5];
                let upstream = dl_dc[(y * w + x) as usize];
                backward_pixel(&splats, list, px, render, upstream, &mut frags, &mut acc);
            }
            list.iter()
                .zip(acc)
                .filter(|(k, _)| splats[**k as usize].layer as usize == layer)
                .map(|(k, g)| (*k, g))
                .collect()
        })
        .collect();

    let mut merged = vec![SplatGrad::default(); splats.len()];
    for (k, g) in per_tile.into_iter().flatten() {
        let m = &mut merged[k as usize];
        m.opacity += g.opacity;
        for i in 0..3 {
            m.conic[i] += g.conic[i];
        }
    }

    let surfels = scene.layer(layer).expect("checked above").surfels();
    let mut grads = LayerGradients::zeros(surfels.len());
    let per_splat: Vec<(usize, [f64; 4], [f64; 2], f64)> = splats
        .par_iter()
        .zip(merged.par_iter())
        .filter(|(s, _)| s.layer as usize == layer)
        .map(|(s, g)| {
            let surfel = &surfels[s.index as usize];
            let (dq, ds) = covariance_backward(surfel, s, g);
            (s.index as usize, dq, ds, g.opacity * s.weight)
        })
        .collect();
    for (k, dq, ds, dop) in per_splat {
        grads.rotation[k] = dq;
        grads.scale[k] = ds;
        grads.opacity[k] = dop;
    }
    Ok(BackwardOutput {
        loss,
        gradients: grads,
        frame,
    })
}

fn backward_pixel(
    splats: &[Splat],
    list: &[u32],
    px: [f64; 2],
    config: &RenderConfig,
    upstream: Rgb,
    frags: &mut Vec<Fragment>,
    acc: &mut [SplatGrad],
) {
    let cutoff_sq = config.cutoff * config.cutoff;
    frags.clear();
    let mut t = 1.0;
    for (pos, &k) in list.iter().enumerate() {
        let s = &splats[k as usize];
        let Some((alpha, g, delta)) = splat_alpha(s, px, cutoff_sq, config.alpha_clamp) else {
            continue;
        };
        frags.push(Fragment {
            pos,
            alpha,
            g,
            delta,
            clamped: s.opacity * g >= config.alpha_clamp,
            t,
        });
        t *= 1.0 - alpha;
        if t < config.transmittance_floor {
            break;
        }
    }
    // walk back to front; `behind` is the color composited behind fragment i
    let mut behind = config.background;
    for f in frags.iter().rev() {
        let s = &splats[list[f.pos] as usize];
        let mut dl_da = 0.0;
        for c in 0..3 {
            dl_da += upstream[c] * f.t * (s.color[c] - behind[c]);
            behind[c] = f.alpha * s.color[c] + (1.0 - f.alpha) * behind[c];
        }
        if f.clamped {
            continue;
        }
        let a = &mut acc[f.pos];
        a.opacity += dl_da * f.g;
        let dl_dq = dl_da * s.opacity * f.g * -0.5;
        let [dx, dy] = f.delta;
        a.conic[0] += dl_dq * dx * dx;
        a.conic[1] += dl_dq * dx * dy;
        a.conic[2] += dl_dq * dy * dy;
    }
}

/// Chains the conic gradient through the 2D inverse, the projection and the
/// 3D covariance into raw quaternion and scale gradients.
fn covariance_backward(surfel: &Surfel, splat: &Splat, g: &SplatGrad) -> ([f64; 4], [f64; 2]) {
    let [a, b, c] = splat.conic;
    let conic = Matrix2::new(a, b, b, c);
    let g_conic = Matrix2::new(g.conic[0], g.conic[1], g.conic[1], g.conic[2]);
    let g_cov2 = -(conic * g_conic * conic);
    let t = splat.footprint.jacobian;
    let g_sigma: Matrix3<f64> = t.transpose() * g_cov2 * t;

    let r = surfel.rotation_matrix();
    let [sx, sy] = surfel.scale;
    let eps = surfel.thickness();
    let d = Matrix3::from_diagonal(&Vector3::new(sx * sx, sy * sy, eps * eps));

    let g_d = r.transpose() * g_sigma * r;
    let mut ds = [2.0 * sx * g_d[(0, 0)], 2.0 * sy * g_d[(1, 1)]];
    let g_eps = 2.0 * eps * g_d[(2, 2)] * THICKNESS_RATIO;
    if sx <= sy {
        ds[0] += g_eps;
    } else {
        ds[1] += g_eps;
    }

    let g_r = 2.0 * g_sigma * r * d;
    (quaternion_backward(&surfel.rotation, &g_r), ds)
}

fn quaternion_backward(q: &[f64; 4], g: &Matrix3<f64>) -> [f64; 4] {
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    let [w, x, y, z] = q.map(|v| v / n);
    let gw = 2.0 * (-z * g[(0, 1)] + y * g[(0, 2)] + z * g[(1, 0)] - x * g[(1, 2)] - y * g[(2, 0)] + x * g[(2, 1)]);
    let gx = 2.0
        * (y * g[(0, 1)] + z * g[(0, 2)] + y * g[(1, 0)] - 2.0 * x * g[(1, 1)] - w * g[(1, 2)] + z * g[(2, 0)]
            + w * g[(2, 1)]
            - 2.0 * x * g[(2, 2)]);
    let gy = 2.0
        * (-2.0 * y * g[(0, 0)] + x * g[(0, 1)] + w * g[(0, 2)] + x * g[(1, 0)] + z * g[(1, 2)] - w * g[(2, 0)]
            + z * g[(2, 1)]
            - 2.0 * y * g[(2, 2)]);
    let gz = 2.0
        * (-2.0 * z * g[(0, 0)] - w * g[(0, 1)] + x * g[(0, 2)] + w * g[(1, 0)] - 2.0 * z * g[(1, 1)]
            + y * g[(1, 2)]
            + x * g[(2, 0)]
            + y * g[(2, 1)]);
    let gh = [gw, gx, gy, gz];
    let unit = [w, x, y, z];
    let dot: f64 = gh.iter().zip(&unit).map(|(a, b)| a * b).sum();
    [0, 1, 2, 3].map(|k| (gh[k] - unit[k] * dot) / n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::quat_to_rotation;

    #[test]
    fn quaternion_gradient_matches_finite_differences() {
        // L(R) = sum(W .* R) for a fixed weight matrix W
        let wm = Matrix3::new(0.3, -1.2, 0.5, 0.7, 0.1, -0.4, 1.1, 0.2, -0.9);
        let loss = |q: &[f64; 4]| quat_to_rotation(q).component_mul(&wm).sum();
        let q = [0.8, -0.3, 0.4, 0.2];
        let an = quaternion_backward(&q, &wm);
        let h = 1e-6;
        for k in 0..4 {
            let mut qp = q;
            let mut qm = q;
            qp[k] += h;
            qm[k] -= h;
            let fd = (loss(&qp) - loss(&qm)) / (2.0 * h);
            assert!((fd - an[k]).abs() < 1e-7, "component {k}: {fd} vs {}", an[k]);
        }
    }
}

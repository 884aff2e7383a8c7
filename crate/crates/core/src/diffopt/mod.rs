//! Per-layer fitting: rotation, scale and opacity of the newest layer are
//! optimized with Adam against one or more posed images while every other
//! surfel parameter stays fixed.

mod backward;
mod loss;

use std::io::Write;
use std::path::Path;

use thiserror::Error;

pub use backward::{render_backward, BackwardOutput, LayerGradients};
pub use loss::{photometric_loss, ssim, LossValue, LossWeights};

use crate::geometry::Camera;
use crate::imaging::{psnr, Image};
use crate::raster::RenderConfig;
use crate::scene::{MultiScaleScene, SceneError};

/// Opacity of freshly created surfels.
pub const INITIAL_OPACITY: f64 = 0.1;

/// Scales never shrink below this fraction of the surfel's native scale.
pub const SCALE_FLOOR_RATIO: f64 = 1e-6;

// keeps sigmoid(logit) strictly inside (0, 1) in f64
const LOGIT_LIMIT: f64 = 30.0;

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("layer {0} is not the newest layer; only the newest layer can be optimized")]
    NotNewestLayer(usize),
    #[error("no training views")]
    NoViews,
    #[error("target image is {}x{}, camera is {}x{}", got.0, got.1, want.0, want.1)]
    TargetSize { got: (u32, u32), want: (u32, u32) },
    #[error("invalid optimizer config: {0}")]
    Config(String),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error("writing loss trace: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimConfig {
    pub steps: usize,
    pub lr_rotation: f64,
    /// Applied to log-scales.
    pub lr_scale: f64,
    /// Applied to opacity logits.
    pub lr_opacity: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weights: LossWeights,
    pub render: RenderConfig,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            lr_rotation: 1e-3,
            lr_scale: 5e-3,
            lr_opacity: 5e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-15,
            weights: LossWeights::default(),
            render: RenderConfig::default(),
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<(), OptimError> {
        let w = self.weights;
        if (w.l1 + w.dssim - 1.0).abs() > 1e-12 || w.l1 < 0.0 || w.dssim < 0.0 {
            return Err(OptimError::Config(format!(
                "loss weights must be non-negative and sum to 1, got {} + {}",
                w.l1, w.dssim
            )));
        }
        for (name, lr) in [
            ("rotation", self.lr_rotation),
            ("scale", self.lr_scale),
            ("opacity", self.lr_opacity),
        ] {
            if !(lr >= 0.0 && lr.is_finite()) {
                return Err(OptimError::Config(format!("{name} learning rate {lr}")));
            }
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(OptimError::Config("Adam betas must be in [0, 1) and eps > 0".into()));
        }
        self.render.validate().map_err(OptimError::Config)
    }
}

/// One posed training image.
#[derive(Clone, Debug)]
pub struct TrainingView {
    pub image: Image,
    pub camera: Camera,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceEntry {
    pub step: usize,
    pub view: usize,
    pub loss: f64,
    pub psnr: f64,
}

/// Loss per step, measured before that step's update. When at least one step
/// ran, a closing entry with `step == steps` evaluates the fitted layer on
/// view 0.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossTrace {
    pub entries: Vec<TraceEntry>,
}

impl LossTrace {
    pub fn initial(&self) -> Option<&TraceEntry> {
        self.entries.first()
    }

    pub fn last(&self) -> Option<&TraceEntry> {
        self.entries.last()
    }

    pub fn write_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "step,loss,psnr")?;
        for e in &self.entries {
            writeln!(out, "{},{},{}", e.step, e.loss, e.psnr)?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<(), OptimError> {
        let f = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(f))?;
        Ok(())
    }
}

/// Adam over a flat parameter vector.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(len: usize, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for k in 0..params.len() {
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * grads[k];
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * grads[k] * grads[k];
            let mh = self.m[k] / bc1;
            let vh = self.v[k] / bc2;
            params[k] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

fn logit(o: f64) -> f64 {
    let o = o.clamp(1e-12, 1.0 - 1e-12);
    (o / (1.0 - o)).ln().clamp(-LOGIT_LIMIT, LOGIT_LIMIT)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Fits the newest layer's rotations, scales and opacities to `views`,
/// cycling through them one per step.
pub fn optimize_layer(
    scene: &mut MultiScaleScene,
    layer: usize,
    views: &[TrainingView],
    config: &OptimConfig,
) -> Result<LossTrace, OptimError> {
    config.validate()?;
    if views.is_empty() {
        return Err(OptimError::NoViews);
    }
    if layer + 1 != scene.layer_count() {
        return Err(OptimError::NotNewestLayer(layer));
    }
    for v in views {
        if v.image.width() != v.camera.width() || v.image.height() != v.camera.height() {
            return Err(OptimError::TargetSize {
                got: (v.image.width(), v.image.height()),
                want: (v.camera.width(), v.camera.height()),
            });
        }
    }
    let mut trace = LossTrace::default();
    if config.steps == 0 {
        return Ok(trace);
    }

    let surfels = scene.layer(layer).expect("checked").surfels();
    let n = surfels.len();
    let mut q: Vec<f64> = surfels.iter().flat_map(|s| s.rotation).collect();
    let mut log_s: Vec<f64> = surfels.iter().flat_map(|s| s.scale.map(f64::ln)).collect();
    let mut logit_o: Vec<f64> = surfels.iter().map(|s| logit(s.opacity)).collect();
    let floors: Vec<f64> = surfels
        .iter()
        .map(|s| (s.bounds().native() * SCALE_FLOOR_RATIO).ln())
        .collect();

    let adam = |len, lr| Adam::new(len, lr, config.beta1, config.beta2, config.eps);
    let mut opt_q = adam(4 * n, config.lr_rotation);
    let mut opt_s = adam(2 * n, config.lr_scale);
    let mut opt_o = adam(n, config.lr_opacity);
    let (mut gq, mut gs, mut go) = (vec![0.0; 4 * n], vec![0.0; 2 * n], vec![0.0; n]);

    for step in 0..config.steps {
        let vi = step % views.len();
        let view = &views[vi];
        let out = render_backward(scene, layer, &view.camera, &view.image, &config.render, config.weights)?;
        trace.entries.push(TraceEntry {
            step,
            view: vi,
            loss: out.loss.total,
            psnr: psnr(&out.frame.color, &view.image),
        });
        let g = &out.gradients;
        let current = scene.layer(layer).expect("checked").surfels();
        for k in 0..n {
            gq[4 * k..4 * k + 4].copy_from_slice(&g.rotation[k]);
            for a in 0..2 {
                gs[2 * k + a] = g.scale[k][a] * current[k].scale[a];
            }
            let o = current[k].opacity;
            go[k] = g.opacity[k] * o * (1.0 - o);
        }
        opt_q.step(&mut q, &gq);
        opt_s.step(&mut log_s, &gs);
        opt_o.step(&mut logit_o, &go);

        let target = scene.newest_layer_mut(layer)?.surfels_mut();
        for (k, s) in target.iter_mut().enumerate() {
            let qk = &mut q[4 * k..4 * k + 4];
            let norm = qk.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 && norm.is_finite() {
                qk.iter_mut().for_each(|v| *v /= norm);
            } else {
                qk.copy_from_slice(&s.rotation);
            }
            s.rotation = [qk[0], qk[1], qk[2], qk[3]];
            for a in 0..2 {
                log_s[2 * k + a] = log_s[2 * k + a].max(floors[k]);
                s.scale[a] = log_s[2 * k + a].exp();
            }
            logit_o[k] = logit_o[k].clamp(-LOGIT_LIMIT, LOGIT_LIMIT);
            s.opacity = sigmoid(logit_o[k]);
        }
    }

    let view = &views[0];
    let frame = crate::raster::render_color(scene, &view.camera, &config.render);
    trace.entries.push(TraceEntry {
        step: config.steps,
        view: 0,
        loss: photometric_loss(&frame.color, &view.image, config.weights)
            .expect("sizes checked")
            .total,
        psnr: psnr(&frame.color, &view.image),
    });
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut x = vec![3.0, -2.0];
        let mut opt = Adam::new(2, 0.1, 0.9, 0.999, 1e-15);
        for _ in 0..500 {
            let g: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
            opt.step(&mut x, &g);
        }
        assert!(x.iter().all(|v| v.abs() < 1e-2), "{x:?}");
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut x = vec![1.0];
        Adam::new(1, 0.05, 0.9, 0.999, 1e-15).step(&mut x, &[123.0]);
        assert!((x[0] - 0.95).abs() < 1e-12);
    }

    #[test]
    fn logit_round_trip() {
        for o in [0.1, 0.5, 0.9] {
            assert!((sigmoid(logit(o)) - o).abs() < 1e-12);
        }
    }

    #[test]
    fn config_validation() {
        assert!(OptimConfig::default().validate().is_ok());
        let mut c = OptimConfig::default();
        c.weights.l1 = 0.5;
        assert!(c.validate().is_err());
    }
}

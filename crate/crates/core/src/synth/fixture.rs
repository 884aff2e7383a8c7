//! Synthetic desk scene used by tests, benchmarks and the `fixture` command.

use nalgebra::{Vector2, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{
    create_root, derive_seed, octave_noise, synthesize_scale, DetailRequest, ProceduralProvider, RootOptions,
    SynthError, SynthOptions,
};
use crate::diffopt::OptimConfig;
use crate::geometry::{Camera, DepthMap};
use crate::imaging::Image;
use crate::scene::MultiScaleScene;

#[derive(Clone, Debug, PartialEq)]
pub struct FixtureSpec {
    pub width: u32,
    pub height: u32,
    /// Root focal length; zoom layers multiply it by `zoom_factor`.
    pub focal: f64,
    /// Total layer count including the root.
    pub layers: usize,
    pub zoom_factor: f64,
    pub root_steps: usize,
    pub layer_steps: usize,
    pub aux_views: usize,
    pub seed: u64,
}

impl Default for FixtureSpec {
    fn default() -> Self {
        Self {
            width: 272,
            height: 180,
            focal: 256.0,
            layers: 3,
            zoom_factor: 8.0,
            root_steps: 150,
            layer_steps: 150,
            aux_views: 2,
            seed: 7,
        }
    }
}

const WALL_DEPTH: f64 = 4.0;
// the desk top lies in the plane y = DESK_Y (camera y points down)
const DESK_Y: f64 = 0.6;
const BALL_CENTER: [f64; 3] = [0.35, 0.25, 2.6];
const BALL_RADIUS: f64 = 0.35;

/// Which surface a pixel ray meets first and at what depth.
fn hit(camera: &Camera, i: u32, j: u32) -> (u8, f64) {
    let px = Vector2::new(f64::from(i) + 0.5, f64::from(j) + 0.5);
    let ray = Vector3::new((px.x - camera.cx()) / camera.fx(), (px.y - camera.cy()) / camera.fy(), 1.0);
    let c = Vector3::from(BALL_CENTER);
    // |t ray - c|^2 = r^2 with depth = t since ray.z = 1
    let a = ray.norm_squared();
    let b = -2.0 * ray.dot(&c);
    let cc = c.norm_squared() - BALL_RADIUS * BALL_RADIUS;
    let disc = b * b - 4.0 * a * cc;
    let ball = (disc >= 0.0).then(|| (-b - disc.sqrt()) / (2.0 * a)).filter(|t| *t > 0.0);
    let desk = (ray.y > 0.0).then(|| DESK_Y / ray.y).filter(|t| *t < WALL_DEPTH);
    match (ball, desk) {
        (Some(t), Some(d)) if t < d => (2, t),
        (Some(t), None) => (2, t),
        (_, Some(d)) => (1, d),
        _ => (0, WALL_DEPTH),
    }
}

/// Root view of the desk: a textured wall, a receding desk top and a ball.
pub fn root_view(spec: &FixtureSpec) -> Result<(Image, DepthMap, Camera), SynthError> {
    let camera = Camera::looking_down_z(spec.focal, spec.focal, spec.width, spec.height)?;
    let (w, h) = (spec.width, spec.height);
    let mut rng = ChaCha8Rng::from_seed(derive_seed("fixture-root", spec.seed, ""));
    // texture features from a quarter of the image down to single pixels
    let base = f64::from(w.min(h)) / 4.0;
    let octaves = (base.log2().floor() as u32).max(1) + 1;
    let fields: Vec<Vec<f64>> = (0..3).map(|_| octave_noise(&mut rng, w, h, base, octaves)).collect();
    let palette = [[0.55, 0.6, 0.68], [0.6, 0.42, 0.25], [0.75, 0.3, 0.25]];
    let mut pixels = Vec::with_capacity(camera.pixel_count());
    let mut depth = DepthMap::empty(w, h);
    for j in 0..h {
        for i in 0..w {
            let (surface, d) = hit(&camera, i, j);
            depth.set(i, j, d);
            let k = depth.index(i, j);
            let base = palette[usize::from(surface)];
            let lum = 0.12 * fields[0][k];
            pixels.push([0, 1, 2].map(|c| (base[c] + lum + 0.04 * fields[c][k]).clamp(0.0, 1.0)));
        }
    }
    Ok((Image::from_pixels(w, h, pixels), depth, camera))
}

/// Zoom centers of the fixture's detail layers, in each parent's view: a
/// little off center so successive windows do not nest concentrically.
pub fn zoom_centers(spec: &FixtureSpec) -> Vec<[f64; 2]> {
    let (w, h) = (f64::from(spec.width), f64::from(spec.height));
    (1..spec.layers)
        .map(|k| if k % 2 == 1 { [0.56 * w, 0.44 * h] } else { [0.45 * w, 0.53 * h] })
        .collect()
}

fn optim(steps: usize) -> OptimConfig {
    OptimConfig {
        steps,
        ..OptimConfig::default()
    }
}

/// One-layer scene fitted to [`root_view`].
pub fn root_scene(spec: &FixtureSpec) -> Result<MultiScaleScene, SynthError> {
    let (image, depth, camera) = root_view(spec)?;
    let options = RootOptions {
        optim: optim(spec.root_steps),
        seed: spec.seed,
        ..RootOptions::default()
    };
    Ok(create_root(&image, &depth, &camera, &options)?.0)
}

/// Root scene plus `spec.layers - 1` procedural zoom layers.
pub fn build_fixture(spec: &FixtureSpec) -> Result<MultiScaleScene, SynthError> {
    let mut scene = root_scene(spec)?;
    let provider = ProceduralProvider::default();
    let options = SynthOptions {
        aux_views: spec.aux_views,
        optim: optim(spec.layer_steps),
        ..SynthOptions::default()
    };
    for (k, center) in zoom_centers(spec).into_iter().enumerate() {
        let request = DetailRequest {
            zoom_factor: spec.zoom_factor,
            prompt: format!("detail level {}", k + 1),
            seed: spec.seed + k as u64 + 1,
            ..DetailRequest::new(k, center)
        };
        synthesize_scale(&mut scene, &request, &provider, &options)?;
    }
    Ok(scene)
}

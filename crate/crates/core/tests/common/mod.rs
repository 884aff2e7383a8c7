//! Fixtures and independent reference implementations shared by the
//! integration tests.

#![allow(dead_code)]

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use scalesplat::geometry::{back_project, pixel_center, Camera};
use scalesplat::imaging::{Image, Rgb};
use scalesplat::modulation::{opacity_weight, ScaleBounds};
use scalesplat::raster::RenderConfig;
use scalesplat::scene::{MultiScaleScene, ScaleLayer, Surfel};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_unit_quat(rng: &mut impl Rng, max_tilt: f64) -> [f64; 4] {
    // axis in the image plane tilts the disk normal away from the view ray,
    // then a random spin about z
    let tilt = rng.gen_range(0.0..max_tilt);
    let phi = rng.gen_range(0.0..std::f64::consts::TAU);
    let spin = rng.gen_range(0.0..std::f64::consts::TAU);
    let tilt_q = [(tilt / 2.0).cos(), phi.cos() * (tilt / 2.0).sin(), phi.sin() * (tilt / 2.0).sin(), 0.0];
    let spin_q = [(spin / 2.0).cos(), 0.0, 0.0, (spin / 2.0).sin()];
    let q = quat_mul(tilt_q, spin_q);
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    q.map(|v| v / n)
}

fn quat_mul(a: [f64; 4], b: [f64; 4]) -> [f64; 4] {
    [
        a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
        a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
        a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
        a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0],
    ]
}

pub struct RandomSceneSpec {
    pub surfels: usize,
    pub width: u32,
    pub height: u32,
    pub focal: f64,
    /// Footprint standard deviation range in pixels.
    pub sigma_px: (f64, f64),
    pub opacity: (f64, f64),
    /// Require clearly different tangential scales.
    pub anisotropic: bool,
}

/// Random single-layer scene in front of a camera looking down +z.
pub fn random_scene(rng: &mut impl Rng, spec: &RandomSceneSpec) -> (MultiScaleScene, Camera) {
    let cam = Camera::looking_down_z(spec.focal, spec.focal, spec.width, spec.height).unwrap();
    let surfels = (0..spec.surfels).map(|_| random_surfel(rng, &cam, spec)).collect();
    let mut scene = MultiScaleScene::new();
    scene.add_layer(ScaleLayer::new(cam.clone(), None, 0, "", surfels)).unwrap();
    (scene, cam)
}

pub fn random_surfel(rng: &mut impl Rng, cam: &Camera, spec: &RandomSceneSpec) -> Surfel {
    let u = rng.gen_range(-4.0..f64::from(cam.width()) + 4.0);
    let v = rng.gen_range(-4.0..f64::from(cam.height()) + 4.0);
    let depth = rng.gen_range(2.0..5.0);
    let p = back_project(&Vector2::new(u, v), depth, cam).unwrap();
    let px_to_world = depth / cam.fx();
    let sx = rng.gen_range(spec.sigma_px.0..spec.sigma_px.1) * px_to_world;
    let mut sy = rng.gen_range(spec.sigma_px.0..spec.sigma_px.1) * px_to_world;
    if spec.anisotropic && (sx - sy).abs() < 0.2 * sx {
        sy = sx * rng.gen_range(1.3..1.8);
    }
    let native = depth / cam.mean_focal();
    Surfel::new(
        p,
        random_unit_quat(rng, 1.0),
        [sx, sy],
        rng.gen_range(spec.opacity.0..spec.opacity.1),
        [rng.gen(), rng.gen(), rng.gen()],
        ScaleBounds::new(native, None, None).unwrap(),
    )
}

/// Rebuilds a single-layer scene from surfels (re-validating everything).
pub fn scene_from(cam: &Camera, surfels: Vec<Surfel>) -> MultiScaleScene {
    let mut scene = MultiScaleScene::new();
    scene.add_layer(ScaleLayer::new(cam.clone(), None, 0, "", surfels)).unwrap();
    scene
}

fn quat_matrix(q: &[f64; 4]) -> Matrix3<f64> {
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
    // columns are the images of the basis vectors under the rotation
    let rot = |v: Vector3<f64>| {
        let u = Vector3::new(x, y, z);
        v + 2.0 * w * u.cross(&v) + 2.0 * u.cross(&u.cross(&v))
    };
    Matrix3::from_columns(&[rot(Vector3::x()), rot(Vector3::y()), rot(Vector3::z())])
}

/// Brute-force renderer: projects every surfel on its own, sorts all of them
/// globally and composites every pixel against the full list.
pub fn naive_render(scene: &MultiScaleScene, cam: &Camera, cfg: &RenderConfig) -> Image {
    struct Item {
        depth: f64,
        layer: usize,
        index: usize,
        mean: Vector2<f64>,
        inv: Matrix2<f64>,
        opacity: f64,
        color: Rgb,
    }
    let w = cam.rotation();
    let t = cam.translation();
    let mut items = Vec::new();
    for (li, layer) in scene.layers().enumerate() {
        for (si, s) in layer.surfels().iter().enumerate() {
            let pc = w * s.position + t;
            if pc.z <= 1e-9 {
                continue;
            }
            let weight = if cfg.modulation {
                opacity_weight(pc.z / (cam.fx() * cam.fy()).sqrt(), s.bounds())
            } else {
                1.0
            };
            if weight <= 0.0 {
                continue;
            }
            let r = quat_matrix(&s.rotation);
            let eps = 0.01 * s.scale[0].min(s.scale[1]);
            let sigma = r * Matrix3::from_diagonal(&Vector3::new(s.scale[0].powi(2), s.scale[1].powi(2), eps * eps)) * r.transpose();
            let z = pc.z;
            let j = nalgebra::Matrix2x3::new(
                cam.fx() / z,
                0.0,
                -cam.fx() * pc.x / (z * z),
                0.0,
                cam.fy() / z,
                -cam.fy() * pc.y / (z * z),
            );
            let m = j * w * sigma * w.transpose() * j.transpose() + Matrix2::identity() * 0.3;
            items.push(Item {
                depth: z,
                layer: li,
                index: si,
                mean: Vector2::new(cam.fx() * pc.x / z + cam.cx(), cam.fy() * pc.y / z + cam.cy()),
                inv: m.try_inverse().unwrap(),
                opacity: s.opacity * weight,
                color: s.color,
            });
        }
    }
    items.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.layer.cmp(&b.layer)).then(a.index.cmp(&b.index)));
    Image::from_fn(cam.width(), cam.height(), |i, jj| {
        let px = pixel_center(i, jj);
        let mut tr = 1.0;
        let mut c = [0.0; 3];
        for it in &items {
            let d = px - it.mean;
            let q = (d.transpose() * it.inv * d)[(0, 0)];
            if q > cfg.cutoff * cfg.cutoff {
                continue;
            }
            let a = (it.opacity * (-0.5 * q).exp()).min(cfg.alpha_clamp);
            for k in 0..3 {
                c[k] += it.color[k] * a * tr;
            }
            tr *= 1.0 - a;
            if tr < cfg.transmittance_floor {
                break;
            }
        }
        for k in 0..3 {
            c[k] += tr * cfg.background[k];
        }
        c
    })
}

/// Smooth color texture with periods of at least 32 pixels.
pub fn smooth_texture(i: u32, j: u32) -> Rgb {
    let (x, y) = (f64::from(i), f64::from(j));
    let tau = std::f64::consts::TAU;
    [
        0.5 + 0.2 * (tau * x / 48.0).sin() + 0.1 * (tau * y / 40.0).cos(),
        0.45 + 0.2 * (tau * (x + y) / 64.0).cos(),
        0.5 + 0.15 * (tau * y / 32.0).sin() * (tau * x / 96.0).cos(),
    ]
}

/// Camera at the origin looking at a fronto-parallel plane at `depth`, and
/// pixel-aligned surfels on that plane.
pub fn plane_pixels(cam: &Camera, depth: f64) -> Vec<Vector3<f64>> {
    let mut out = Vec::new();
    for j in 0..cam.height() {
        for i in 0..cam.width() {
            out.push(back_project(&pixel_center(i, j), depth, cam).unwrap());
        }
    }
    out
}

/// Smooth base plus detail with periods down to 10 pixels.
pub fn detail_texture(i: u32, j: u32) -> Rgb {
    let (x, y) = (f64::from(i), f64::from(j));
    let tau = std::f64::consts::TAU;
    let base = smooth_texture(i, j);
    let d = 0.08 * (tau * x / 10.0).sin() * (tau * y / 14.0).cos() + 0.05 * (tau * (x - y) / 12.0).sin();
    [base[0] + d, base[1] - d, base[2] + 0.5 * d]
}

/// The five-case opacity schedule written out case by case.
pub fn reference_weight(s: f64, native: f64, parent: Option<f64>, child: Option<f64>) -> f64 {
    if parent.is_none() && s >= native {
        return 1.0;
    }
    if let Some(p) = parent {
        if s >= native && s <= p {
            return (p.ln() - s.ln()) / (p.ln() - native.ln());
        }
    }
    if let Some(c) = child {
        if s <= native && s >= c {
            return (s.ln() - c.ln()) / (native.ln() - c.ln());
        }
    }
    if child.is_none() && s <= native {
        return 1.0;
    }
    0.0
}

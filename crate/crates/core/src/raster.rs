//! Forward splatting renderer.
//!
//! Visible surfels are sorted once by center depth (ties broken by layer and
//! in-layer index), binned into 16x16 screen tiles, and composited front to
//! back per pixel. Each pixel's result depends only on the sorted order, so
//! frames are bitwise identical regardless of how tiles are scheduled.

use nalgebra::{Matrix2, Matrix2x3, Vector2};
use rayon::prelude::*;

use crate::geometry::{Camera, DepthMap, NEAR_EPS};
use crate::imaging::{Image, Rgb};
use crate::modulation::render_scale;
use crate::scene::{MultiScaleScene, Surfel};

pub const TILE_SIZE: u32 = 16;

/// Added to the projected covariance diagonal, in px^2.
pub const COV2D_REGULARIZATION: f64 = 0.3;

/// Accumulated alpha above which a rendered depth is considered defined.
pub const DEPTH_VALID_ALPHA: f64 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct RenderConfig {
    pub background: Rgb,
    /// Footprint support in standard deviations.
    pub cutoff: f64,
    /// Upper bound on a single surfel's per-pixel alpha.
    pub alpha_clamp: f64,
    /// Compositing stops once transmittance drops below this. Zero disables
    /// early termination.
    pub transmittance_floor: f64,
    /// Scale-aware opacity modulation on/off.
    pub modulation: bool,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            background: [0.0; 3],
            cutoff: 3.0,
            alpha_clamp: 0.99,
            transmittance_floor: 1e-4,
            modulation: true,
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.cutoff > 0.0) {
            return Err(format!("cutoff must be positive, got {}", self.cutoff));
        }
        if !(self.alpha_clamp > 0.0 && self.alpha_clamp <= 1.0) {
            return Err(format!("alpha clamp must be in (0, 1], got {}", self.alpha_clamp));
        }
        if !(self.transmittance_floor >= 0.0 && self.transmittance_floor < 1.0) {
            return Err(format!(
                "transmittance floor must be in [0, 1), got {}",
                self.transmittance_floor
            ));
        }
        Ok(())
    }
}

/// A rendered view: color, expected depth and accumulated alpha.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub color: Image,
    pub depth: DepthMap,
    pub alpha: Vec<f64>,
}

impl Frame {
    pub fn width(&self) -> u32 {
        self.color.width()
    }
    pub fn height(&self) -> u32 {
        self.color.height()
    }
}

/// Screen-space Gaussian of a surfel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Footprint {
    pub mean: Vector2<f64>,
    pub cov: Matrix2<f64>,
    pub radius: f64,
    pub depth: f64,
    /// Local affine map from world offsets to pixel offsets, `J * W`.
    pub jacobian: Matrix2x3<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("surfel is behind the camera")]
pub struct BehindCamera;

/// Projects a surfel's covariance with the local affine approximation of the
/// perspective map at its center. `cutoff` sets the radius in standard
/// deviations.
pub fn splat_footprint_with_cutoff(
    surfel: &Surfel,
    camera: &Camera,
    cutoff: f64,
) -> Result<Footprint, BehindCamera> {
    let w = camera.rotation();
    let pc = w * surfel.position + camera.translation();
    let z = pc.z;
    if z <= NEAR_EPS {
        return Err(BehindCamera);
    }
    let (fx, fy) = (camera.fx(), camera.fy());
    let j = Matrix2x3::new(
        fx / z,
        0.0,
        -fx * pc.x / (z * z),
        0.0,
        fy / z,
        -fy * pc.y / (z * z),
    );
    let t = j * w;
    let mut cov = t * surfel.covariance() * t.transpose();
    // symmetrize away rounding
    let off = 0.5 * (cov[(0, 1)] + cov[(1, 0)]);
    cov[(0, 1)] = off;
    cov[(1, 0)] = off;
    cov[(0, 0)] += COV2D_REGULARIZATION;
    cov[(1, 1)] += COV2D_REGULARIZATION;
    let mean = Vector2::new(fx * pc.x / z + camera.cx(), fy * pc.y / z + camera.cy());
    Ok(Footprint {
        mean,
        cov,
        radius: cutoff * max_eigenvalue(&cov).sqrt(),
        depth: z,
        jacobian: t,
    })
}

pub fn splat_footprint(surfel: &Surfel, camera: &Camera) -> Result<Footprint, BehindCamera> {
    splat_footprint_with_cutoff(surfel, camera, RenderConfig::default().cutoff)
}

fn max_eigenvalue(m: &Matrix2<f64>) -> f64 {
    let mid = 0.5 * (m[(0, 0)] + m[(1, 1)]);
    let det = m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)];
    mid + (mid * mid - det).max(0.0).sqrt()
}

/// A surfel that survived culling, ready for compositing.
#[derive(Clone, Debug)]
pub struct Splat {
    pub layer: u32,
    pub index: u32,
    pub depth: f64,
    /// Opacity weight from scale modulation (1 when modulation is off).
    pub weight: f64,
    /// Modulated opacity `o * weight`.
    pub opacity: f64,
    pub color: Rgb,
    pub mean: [f64; 2],
    /// Inverse covariance `[a, b, c]` for `a dx^2 + 2 b dx dy + c dy^2`.
    pub conic: [f64; 3],
    pub radius: f64,
    pub footprint: Footprint,
}

/// Surfels in front of the camera whose footprint meets the image and, with
/// modulation on, whose opacity weight is positive. Sorted front to back.
pub fn cull(scene: &MultiScaleScene, camera: &Camera, config: &RenderConfig) -> Vec<Splat> {
    let items: Vec<(u32, u32, &Surfel)> = scene
        .layers()
        .enumerate()
        .flat_map(|(li, layer)| layer.surfels().iter().enumerate().map(move |(si, s)| (li as u32, si as u32, s)))
        .collect();
    cull_items(&items, camera, config)
}

fn cull_items(items: &[(u32, u32, &Surfel)], camera: &Camera, config: &RenderConfig) -> Vec<Splat> {
    let (w, h) = (f64::from(camera.width()), f64::from(camera.height()));
    let mut splats: Vec<Splat> = items
        .par_iter()
        .filter_map(|&(layer, index, s)| {
            let weight = if config.modulation {
                let sr = render_scale(&s.position, camera)?;
                let wgt = s.bounds().weight(sr);
                if wgt <= 0.0 {
                    return None;
                }
                wgt
            } else {
                1.0
            };
            let fp = splat_footprint_with_cutoff(s, camera, config.cutoff).ok()?;
            let r = fp.radius;
            if fp.mean.x + r < 0.0 || fp.mean.x - r > w || fp.mean.y + r < 0.0 || fp.mean.y - r > h {
                return None;
            }
            let inv = fp.cov.try_inverse()?;
            Some(Splat {
                layer,
                index,
                depth: fp.depth,
                weight,
                opacity: s.opacity * weight,
                color: s.color,
                mean: [fp.mean.x, fp.mean.y],
                conic: [inv[(0, 0)], 0.5 * (inv[(0, 1)] + inv[(1, 0)]), inv[(1, 1)]],
                radius: r,
                footprint: fp,
            })
        })
        .collect();
    splats.par_sort_unstable_by(|a, b| {
        a.depth
            .total_cmp(&b.depth)
            .then(a.layer.cmp(&b.layer))
            .then(a.index.cmp(&b.index))
    });
    splats
}

/// Renders a bare list of surfels, ignoring scale modulation.
pub fn render_surfels(surfels: &[Surfel], camera: &Camera, config: &RenderConfig) -> Frame {
    let items: Vec<(u32, u32, &Surfel)> = surfels.iter().enumerate().map(|(k, s)| (0, k as u32, s)).collect();
    let config = RenderConfig {
        modulation: false,
        ..config.clone()
    };
    let splats = cull_items(&items, camera, &config);
    render_splats(&splats, camera, &config).0
}

/// Per-tile lists of splat indices, each in front-to-back order.
pub(crate) struct TileIndex {
    pub tiles_x: u32,
    pub lists: Vec<Vec<u32>>,
}

impl TileIndex {
    pub fn build(splats: &[Splat], width: u32, height: u32) -> Self {
        let tiles_x = width.div_ceil(TILE_SIZE);
        let tiles_y = height.div_ceil(TILE_SIZE);
        let mut lists = vec![Vec::new(); (tiles_x * tiles_y) as usize];
        let ts = f64::from(TILE_SIZE);
        for (k, s) in splats.iter().enumerate() {
            let clamp_x = |v: f64| (v / ts).floor().clamp(0.0, f64::from(tiles_x - 1)) as u32;
            let clamp_y = |v: f64| (v / ts).floor().clamp(0.0, f64::from(tiles_y - 1)) as u32;
            let (x0, x1) = (clamp_x(s.mean[0] - s.radius), clamp_x(s.mean[0] + s.radius));
            let (y0, y1) = (clamp_y(s.mean[1] - s.radius), clamp_y(s.mean[1] + s.radius));
            for ty in y0..=y1 {
                for tx in x0..=x1 {
                    lists[(ty * tiles_x + tx) as usize].push(k as u32);
                }
            }
        }
        Self {
            tiles_x,
            lists,
        }
    }

    pub fn tile_pixels(&self, tile: usize, width: u32, height: u32) -> impl Iterator<Item = (u32, u32)> {
        let tx = tile as u32 % self.tiles_x;
        let ty = tile as u32 / self.tiles_x;
        let (x0, y0) = (tx * TILE_SIZE, ty * TILE_SIZE);
        let (x1, y1) = ((x0 + TILE_SIZE).min(width), (y0 + TILE_SIZE).min(height));
        (y0..y1).flat_map(move |y| (x0..x1).map(move |x| (x, y)))
    }
}

/// Evaluates a splat's per-pixel alpha at `px`, or `None` outside its support.
#[inline]
pub(crate) fn splat_alpha(s: &Splat, px: [f64; 2], cutoff_sq: f64, clamp: f64) -> Option<(f64, f64, [f64; 2])> {
    let dx = px[0] - s.mean[0];
    let dy = px[1] - s.mean[1];
    let q = s.conic[0] * dx * dx + 2.0 * s.conic[1] * dx * dy + s.conic[2] * dy * dy;
    if !(q <= cutoff_sq) {
        return None;
    }
    let g = (-0.5 * q).exp();
    Some(((s.opacity * g).min(clamp), g, [dx, dy]))
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
struct PixelOut {
    color: Rgb,
    depth_sum: f64,
    transmittance: f64,
    fragments: u32,
}

fn composite_pixel(splats: &[Splat], list: &[u32], px: [f64; 2], config: &RenderConfig) -> PixelOut {
    let cutoff_sq = config.cutoff * config.cutoff;
    let mut t = 1.0;
    let mut color = [0.0; 3];
    let mut depth_sum = 0.0;
    let mut fragments = 0;
    for &k in list {
        let s = &splats[k as usize];
        let Some((alpha, _, _)) = splat_alpha(s, px, cutoff_sq, config.alpha_clamp) else {
            continue;
        };
        fragments += 1;
        let w = alpha * t;
        for (acc, c) in color.iter_mut().zip(s.color) {
            *acc += c * w;
        }
        depth_sum += s.depth * w;
        t *= 1.0 - alpha;
        if t < config.transmittance_floor {
            break;
        }
    }
    for (acc, b) in color.iter_mut().zip(config.background) {
        *acc += t * b;
    }
    PixelOut {
        color,
        depth_sum,
        transmittance: t,
        fragments,
    }
}

/// Work counters for one rendered frame.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RenderStats {
    /// Surfels that survived culling and entered compositing.
    pub visible_surfels: usize,
    /// Surfel-pixel pairs blended into the image.
    pub fragments: u64,
    /// Surfel-tile entries in the screen-space index.
    pub tile_entries: u64,
}

/// Renders color, expected depth and alpha.
pub fn render_color(scene: &MultiScaleScene, camera: &Camera, config: &RenderConfig) -> Frame {
    render_with_stats(scene, camera, config).0
}

pub fn render_with_stats(scene: &MultiScaleScene, camera: &Camera, config: &RenderConfig) -> (Frame, RenderStats) {
    let splats = cull(scene, camera, config);
    render_splats(&splats, camera, config)
}

pub(crate) fn render_splats(splats: &[Splat], camera: &Camera, config: &RenderConfig) -> (Frame, RenderStats) {
    let (w, h) = (camera.width(), camera.height());
    let index = TileIndex::build(splats, w, h);
    let tiles: Vec<Vec<((u32, u32), PixelOut)>> = (0..index.lists.len())
        .into_par_iter()
        .map(|tile| {
            let list = &index.lists[tile];
            index
                .tile_pixels(tile, w, h)
                .map(|(x, y)| {
                    let px = [f64::from(x) + 0.5, f64::from(y) + 0.5];
                    ((x, y), composite_pixel(splats, list, px, config))
                })
                .collect()
        })
        .collect();

    let mut color = Image::filled(w, h, config.background);
    let mut depth = DepthMap::empty(w, h);
    let mut alpha = vec![0.0; camera.pixel_count()];
    let mut fragments = 0u64;
    for ((x, y), out) in tiles.into_iter().flatten() {
        color.set(x, y, out.color);
        let k = depth.index(x, y);
        let a = 1.0 - out.transmittance;
        alpha[k] = a;
        if a > DEPTH_VALID_ALPHA {
            depth.set_index(k, out.depth_sum / a);
        }
        fragments += u64::from(out.fragments);
    }
    let stats = RenderStats {
        visible_surfels: splats.len(),
        fragments,
        tile_entries: index.lists.iter().map(|l| l.len() as u64).sum(),
    };
    (Frame { color, depth, alpha }, stats)
}

/// Alpha-weighted expected depth, valid where accumulated alpha exceeds 0.5.
pub fn render_depth(scene: &MultiScaleScene, camera: &Camera) -> DepthMap {
    render_color(scene, camera, &RenderConfig::default()).depth
}

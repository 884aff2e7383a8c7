//! Progressive detail synthesis: zoom a parent view, ask a provider for fine
//! detail, register its depth to the scene, turn it into a surfel layer, fit
//! the layer and commit it as one unit.

mod aux;
pub mod fixture;
mod provider;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use aux::{aux_cameras, auxiliary_views, median_depth, AuxView, AUX_MAX_ROTATION_DEG, AUX_ORBIT_RADIUS_RATIO};
pub use provider::{
    derive_seed, octave_noise, procedural_fill, AuxInput, CommandProvider, DetailInput, DetailOutput, DetailProvider,
    ProceduralProvider, ProviderError, WORKDIR_ENV,
};

use crate::depthreg::{register_to_target, DepthRegError, Registration, SegmentSet};
use crate::diffopt::{optimize_layer, LossTrace, OptimConfig, OptimError, TrainingView};
use crate::geometry::{Camera, DepthMap, GeometryError};
use crate::imaging::{Image, Mask};
use crate::raster::{render_color, render_depth};
use crate::scene::{MultiScaleScene, SceneError, SharedScene, Surfel};
use crate::surfelize::{pixel_aligned_surfels, surfels_from_view, LayerMeta, SurfelSource, SurfelizeError};

pub const DEFAULT_ZOOM_FACTOR: f64 = 8.0;
pub const DEFAULT_AUX_VIEWS: usize = 4;

/// Amplitude of the noise added to procedurally filled auxiliary pixels.
const AUX_FILL_NOISE: f64 = 0.03;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("zoom factor must be finite and > 1, got {0}")]
    ZoomFactor(f64),
    #[error("zoom center ({u}, {v}) is outside the {width}x{height} parent view")]
    CenterOutside { u: f64, v: f64, width: u32, height: u32 },
    #[error("zoom window [{u0:.2}, {u1:.2}] x [{v0:.2}, {v1:.2}] extends beyond the {width}x{height} parent view")]
    RegionOutside {
        u0: f64,
        u1: f64,
        v0: f64,
        v1: f64,
        width: u32,
        height: u32,
    },
    #[error("provider returned a {got_w}x{got_h} {what} for a {want_w}x{want_h} view")]
    ProviderSize {
        what: &'static str,
        got_w: u32,
        got_h: u32,
        want_w: u32,
        want_h: u32,
    },
    #[error("no depth: the scene renders nothing at the zoom camera and the provider gave no hint")]
    NoDepth,
    #[error("focal sweep endpoints must share pose and image size")]
    SweepMismatch,
    #[error("provider: {0}")]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Depth(#[from] DepthRegError),
    #[error(transparent)]
    Surfelize(#[from] SurfelizeError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// A user's request to add detail under part of a layer's creation view.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetailRequest {
    pub parent_layer: usize,
    /// Pixel in the parent layer's creation view.
    pub zoom_center: [f64; 2],
    #[serde(default = "default_factor")]
    pub zoom_factor: f64,
    #[serde(default)]
    pub prompt: String,
    #[serde(default)]
    pub seed: u64,
}

fn default_factor() -> f64 {
    DEFAULT_ZOOM_FACTOR
}

impl DetailRequest {
    pub fn new(parent_layer: usize, zoom_center: [f64; 2]) -> Self {
        Self {
            parent_layer,
            zoom_center,
            zoom_factor: DEFAULT_ZOOM_FACTOR,
            prompt: String::new(),
            seed: 0,
        }
    }
}

/// Parent pose with focal lengths scaled by the zoom factor and the principal
/// point moved so that the zoom center lands at the new image center.
pub fn zoom_camera(parent: &Camera, request: &DetailRequest) -> Result<Camera, SynthError> {
    let f = request.zoom_factor;
    if !(f.is_finite() && f > 1.0) {
        return Err(SynthError::ZoomFactor(f));
    }
    let [u, v] = request.zoom_center;
    let (w, h) = (f64::from(parent.width()), f64::from(parent.height()));
    if !(u >= 0.0 && u < w && v >= 0.0 && v < h) {
        return Err(SynthError::CenterOutside {
            u,
            v,
            width: parent.width(),
            height: parent.height(),
        });
    }
    let (hw, hh) = (w / (2.0 * f), h / (2.0 * f));
    let slack = 1e-9;
    if u - hw < -slack || u + hw > w + slack || v - hh < -slack || v + hh > h + slack {
        return Err(SynthError::RegionOutside {
            u0: u - hw,
            u1: u + hw,
            v0: v - hh,
            v1: v + hh,
            width: parent.width(),
            height: parent.height(),
        });
    }
    let cx = w / 2.0 - f * (u - parent.cx());
    let cy = h / 2.0 - f * (v - parent.cy());
    Ok(parent.with_intrinsics(parent.fx() * f, parent.fy() * f, cx, cy)?)
}

/// Knobs of one synthesis run.
#[derive(Clone, Debug)]
pub struct SynthOptions {
    pub aux_views: usize,
    pub optim: OptimConfig,
    pub segments: Option<SegmentSet>,
    /// Masks of newly introduced objects to anchor to their surroundings.
    pub novel_masks: Vec<Mask>,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self {
            aux_views: DEFAULT_AUX_VIEWS,
            optim: OptimConfig::default(),
            segments: None,
            novel_masks: Vec::new(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SynthReport {
    pub layer: usize,
    pub camera: Camera,
    pub registration: Registration,
    pub trace: LossTrace,
    pub main_surfels: usize,
    pub aux_surfels: usize,
    /// Parent surfels that received their child bound.
    pub child_bounds: usize,
}

fn check_size(what: &'static str, w: u32, h: u32, cam: &Camera) -> Result<(), SynthError> {
    if (w, h) != (cam.width(), cam.height()) {
        return Err(SynthError::ProviderSize {
            what,
            got_w: w,
            got_h: h,
            want_w: cam.width(),
            want_h: cam.height(),
        });
    }
    Ok(())
}

/// Completes the auxiliary views of a partial layer and returns the extra
/// surfels plus the training views they contribute.
fn complete_aux_views(
    views: Vec<AuxView>,
    coarse_scene: Option<&MultiScaleScene>,
    creation: &Camera,
    parent: Option<&Camera>,
    provider: Option<&dyn DetailProvider>,
    prompt: &str,
    seed: u64,
) -> Result<(Vec<Surfel>, Vec<TrainingView>), SynthError> {
    let mut surfels = Vec::new();
    let mut training = Vec::new();
    for (k, view) in views.into_iter().enumerate() {
        let filled = match provider.filter(|p| p.supplies_aux_views()) {
            Some(p) => {
                let img = p.fill_aux(&AuxInput {
                    index: k,
                    conditioning: &view.conditioning,
                    mask: &view.mask,
                    prompt,
                    seed,
                    camera: &view.camera,
                })?;
                check_size("auxiliary fill", img.width(), img.height(), &view.camera)?;
                img
            }
            None => procedural_fill(
                &view.conditioning.color,
                &view.mask,
                derive_seed(&format!("aux-fill-{k}"), seed, prompt),
                AUX_FILL_NOISE,
            ),
        };
        if view.mask.count() > 0 {
            if let Some(depth) = view.conditioning.depth.fill_nearest() {
                let depth = match coarse_scene {
                    Some(scene) => register_to_target(&depth, &render_depth(scene, &view.camera), None, &[])?.depth,
                    None => depth,
                };
                let src = SurfelSource {
                    native_camera: Some(creation),
                    parent_camera: parent,
                    mask: Some(&view.mask),
                    ..SurfelSource::new(&filled, &depth, &view.camera)
                };
                surfels.extend(surfels_from_view(&src)?);
            }
        }
        training.push(TrainingView {
            image: filled,
            camera: view.camera,
        });
    }
    Ok((surfels, training))
}

/// Runs the full pipeline against `scene` and returns the extended copy.
/// `scene` itself is never touched.
pub fn synthesize_layer(
    scene: &MultiScaleScene,
    request: &DetailRequest,
    provider: &dyn DetailProvider,
    options: &SynthOptions,
) -> Result<(MultiScaleScene, SynthReport), SynthError> {
    options.optim.validate()?;
    let parent = scene
        .layer(request.parent_layer)
        .ok_or(SceneError::UnknownLayer(request.parent_layer))?;
    let parent_cam = &parent.creation_camera;
    let camera = zoom_camera(parent_cam, request)?;
    let render_cfg = &options.optim.render;

    // coarse observation and provider call
    let coarse = render_color(scene, &camera, render_cfg);
    let context = if provider.supplies_context() {
        provider.context(&render_color(scene, parent_cam, render_cfg))?
    } else {
        String::new()
    };
    let fine = provider.detail(&DetailInput {
        coarse: &coarse,
        context: &context,
        prompt: &request.prompt,
        seed: request.seed,
        camera: &camera,
        zoom_factor: request.zoom_factor,
    })?;
    check_size("image", fine.image.width(), fine.image.height(), &camera)?;

    // depth, registered to what the scene already shows
    let hint: Option<DepthMap> = match fine.depth {
        Some(d) if provider.supplies_depth() => {
            check_size("depth", d.width(), d.height(), &camera)?;
            Some(d)
        }
        _ => None,
    };
    let depth = hint.or_else(|| coarse.depth.fill_nearest()).ok_or(SynthError::NoDepth)?;
    let registration = register_to_target(&depth, &coarse.depth, options.segments.as_ref(), &options.novel_masks)?;

    // partial layer from the fine view alone
    let mut layer = pixel_aligned_surfels(
        &fine.image,
        &registration.depth,
        &camera,
        Some(parent_cam),
        LayerMeta {
            parent_layer: Some(request.parent_layer),
            scale_index: parent.scale_index + 1,
            prompt: request.prompt.clone(),
        },
    )?;
    let main_surfels = layer.len();

    let mut views = vec![TrainingView {
        image: fine.image,
        camera: camera.clone(),
    }];
    let aux = auxiliary_views(layer.surfels(), &camera, options.aux_views, render_cfg)?;
    let (extra, aux_training) = complete_aux_views(
        aux,
        Some(scene),
        &camera,
        Some(parent_cam),
        Some(provider),
        &request.prompt,
        request.seed,
    )?;
    let aux_surfels = extra.len();
    layer.surfels_mut().extend(extra);
    views.extend(aux_training);

    // parent fades out under the new camera before the new layer is fitted,
    // so the fit sees the composite that will actually be rendered
    let mut working = scene.clone();
    let child_bounds = working.assign_child_bounds(request.parent_layer, &camera)?;
    let index = working.add_layer(layer)?;
    let trace = optimize_layer(&mut working, index, &views, &options.optim)?;
    log::info!(
        "layer {index}: {main_surfels} + {aux_surfels} aux surfels, {child_bounds} child bounds, loss {:?} -> {:?}",
        trace.initial().map(|e| e.loss),
        trace.last().map(|e| e.loss)
    );
    Ok((
        working,
        SynthReport {
            layer: index,
            camera,
            registration,
            trace,
            main_surfels,
            aux_surfels,
            child_bounds,
        },
    ))
}

/// Adds one detail layer to `scene`. On any error `scene` is unchanged.
pub fn synthesize_scale(
    scene: &mut MultiScaleScene,
    request: &DetailRequest,
    provider: &dyn DetailProvider,
    options: &SynthOptions,
) -> Result<SynthReport, SynthError> {
    let (next, report) = synthesize_layer(scene, request, provider, options)?;
    *scene = next;
    Ok(report)
}

/// Synthesizes against the current snapshot of `shared` and publishes the
/// result only if no other commit happened meanwhile.
pub fn synthesize_into(
    shared: &SharedScene,
    request: &DetailRequest,
    provider: &dyn DetailProvider,
    options: &SynthOptions,
) -> Result<(SynthReport, u64), SynthError> {
    let snapshot = shared.snapshot();
    let (next, report) = synthesize_layer(&snapshot, request, provider, options)?;
    let version = shared.commit(next, snapshot.version())?;
    Ok((report, version))
}

/// Options for building a root layer from one posed RGB-D view.
#[derive(Clone, Debug, Default)]
pub struct RootOptions {
    pub aux_views: usize,
    pub optim: OptimConfig,
    pub seed: u64,
    pub prompt: String,
}

/// Builds a one-layer scene: pixel-aligned surfels, optional auxiliary views
/// completed procedurally, then a fit of the layer to all views.
pub fn create_root(
    image: &Image,
    depth: &DepthMap,
    camera: &Camera,
    options: &RootOptions,
) -> Result<(MultiScaleScene, LossTrace), SynthError> {
    options.optim.validate()?;
    let mut layer = pixel_aligned_surfels(
        image,
        depth,
        camera,
        None,
        LayerMeta {
            parent_layer: None,
            scale_index: 0,
            prompt: options.prompt.clone(),
        },
    )?;
    let mut views = vec![TrainingView {
        image: image.clone(),
        camera: camera.clone(),
    }];
    let aux = auxiliary_views(layer.surfels(), camera, options.aux_views, &options.optim.render)?;
    let (extra, aux_training) = complete_aux_views(aux, None, camera, None, None, &options.prompt, options.seed)?;
    layer.surfels_mut().extend(extra);
    views.extend(aux_training);
    let mut scene = MultiScaleScene::new();
    let index = scene.add_layer(layer)?;
    let trace = optimize_layer(&mut scene, index, &views, &options.optim)?;
    Ok((scene, trace))
}

/// Camera a fraction `t` of the way from `from` to `to` (same pose and size):
/// focal lengths interpolate geometrically, and the viewed window's center
/// linearly in its half-width, so the zoom converges on the target window
/// without drifting.
pub fn sweep_camera(from: &Camera, to: &Camera, t: f64) -> Result<Camera, SynthError> {
    if (from.pose() - to.pose()).abs().max() > 1e-12 || (from.width(), from.height()) != (to.width(), to.height()) {
        return Err(SynthError::SweepMismatch);
    }
    let axis = |f0: f64, f1: f64, c0: f64, c1: f64, size: f64| {
        let f = f0 * (f1 / f0).powf(t);
        let half = size / 2.0;
        // window center and half-width, in `from` pixels
        let m0 = half;
        let m1 = c0 + (half - c1) * f0 / f1;
        let (h0, h1, ht) = (half, half * f0 / f1, half * f0 / f);
        let s = if (h0 - h1).abs() > 1e-15 { (h0 - ht) / (h0 - h1) } else { t };
        let m = m0 + (m1 - m0) * s;
        (f, half - (m - c0) * f / f0)
    };
    let (fx, cx) = axis(from.fx(), to.fx(), from.cx(), to.cx(), f64::from(from.width()));
    let (fy, cy) = axis(from.fy(), to.fy(), from.cy(), to.cy(), f64::from(from.height()));
    Ok(from.with_intrinsics(fx, fy, cx, cy)?)
}

/// `frames` cameras from `from` to `to` inclusive, see [`sweep_camera`].
pub fn focal_sweep(from: &Camera, to: &Camera, frames: usize) -> Result<Vec<Camera>, SynthError> {
    (0..frames)
        .map(|n| {
            let t = if frames > 1 { n as f64 / (frames - 1) as f64 } else { 0.0 };
            sweep_camera(from, to, t)
        })
        .collect()
}

/// Layer indices from `from` down to `to` along the parent chain, or `None`
/// if `to` does not descend from `from`.
pub fn layer_chain(scene: &MultiScaleScene, from: usize, to: usize) -> Option<Vec<usize>> {
    let mut chain = vec![to];
    let mut at = to;
    while at != from {
        at = scene.layer(at)?.parent_layer?;
        chain.push(at);
    }
    chain.reverse();
    Some(chain)
}

/// Focal sweep through consecutive creation cameras from layer `from` to
/// layer `to`, `frames` in total, spaced evenly in log focal length.
pub fn layer_sweep(scene: &MultiScaleScene, from: usize, to: usize, frames: usize) -> Result<Vec<Camera>, SynthError> {
    let chain = layer_chain(scene, from, to).ok_or(SceneError::UnknownLayer(to))?;
    let cams: Vec<&Camera> = chain.iter().map(|i| &scene.layer(*i).expect("chain").creation_camera).collect();
    if cams.len() == 1 || frames < 2 {
        return Ok(vec![cams[0].clone(); frames]);
    }
    let logf: Vec<f64> = cams.iter().map(|c| c.mean_focal().ln()).collect();
    let total = logf[cams.len() - 1] - logf[0];
    (0..frames)
        .map(|n| {
            let target = logf[0] + total * n as f64 / (frames - 1) as f64;
            let seg = (0..cams.len() - 1).find(|&k| target <= logf[k + 1]).unwrap_or(cams.len() - 2);
            let span = logf[seg + 1] - logf[seg];
            let t = if span > 0.0 { ((target - logf[seg]) / span).clamp(0.0, 1.0) } else { 0.0 };
            sweep_camera(cams[seg], cams[seg + 1], t)
        })
        .collect()
}

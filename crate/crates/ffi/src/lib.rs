//! C ABI over `scalesplat`.
//!
//! Scenes are opaque handles created by `scalesplat_scene_new` or
//! `scalesplat_scene_load` and released with `scalesplat_scene_free`. Every
//! fallible call returns a [`ScalesplatStatus`]; the message of the most recent
//! failure on the calling thread is available from `scalesplat_last_error`.
//! Handles are not synchronized: callers must not use one handle from several
//! threads at once.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use scalesplat::diffopt::OptimConfig;
use scalesplat::geometry::{Camera, CameraSpec, DepthMap};
use scalesplat::imaging::Image;
use scalesplat::modulation::{native_scale, opacity_weight, ScaleBounds};
use scalesplat::raster::{render_color, RenderConfig};
use scalesplat::scene::MultiScaleScene;
use scalesplat::sceneio::{load_scene, save_scene, SceneIoError};
use scalesplat::synth::{
    create_root, synthesize_scale, DetailRequest, ProceduralProvider, RootOptions, SynthOptions,
};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScalesplatStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Synthesis = 5,
    BufferTooSmall = 6,
    Panic = 7,
}

/// Opaque scene handle.
pub struct ScalesplatScene {
    scene: MultiScaleScene,
}

/// Pinhole camera: row-major world-to-camera pose and intrinsics in pixels.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct ScalesplatCamera {
    pub pose: [f64; 16],
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn fail(status: ScalesplatStatus, msg: impl Into<String>) -> ScalesplatStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
    status
}

fn guarded(f: impl FnOnce() -> ScalesplatStatus) -> ScalesplatStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            fail(ScalesplatStatus::Panic, format!("panic: {msg}"))
        }
    }
}

unsafe fn path_arg(path: *const c_char) -> Result<PathBuf, ScalesplatStatus> {
    if path.is_null() {
        return Err(fail(ScalesplatStatus::NullArgument, "path is null"));
    }
    CStr::from_ptr(path)
        .to_str()
        .map(PathBuf::from)
        .map_err(|_| fail(ScalesplatStatus::InvalidArgument, "path is not UTF-8"))
}

fn io_status(e: &SceneIoError) -> ScalesplatStatus {
    match e {
        SceneIoError::Io { .. } => ScalesplatStatus::Io,
        _ => ScalesplatStatus::Format,
    }
}

fn camera_from(c: &ScalesplatCamera) -> Result<Camera, ScalesplatStatus> {
    CameraSpec {
        pose: c.pose.to_vec(),
        fx: c.fx,
        fy: c.fy,
        cx: Some(c.cx),
        cy: Some(c.cy),
        w: c.width,
        h: c.height,
    }
    .to_camera()
    .map_err(|e| fail(ScalesplatStatus::InvalidArgument, e.to_string()))
}

fn camera_to(c: &Camera) -> ScalesplatCamera {
    ScalesplatCamera {
        pose: c.pose_row_major(),
        fx: c.fx(),
        fy: c.fy(),
        cx: c.cx(),
        cy: c.cy(),
        width: c.width(),
        height: c.height(),
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn scalesplat_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the last error message of this thread into `buf` (NUL-terminated,
/// truncated to `len`). Returns the full message length plus one, so a
/// caller can size a buffer by passing `len = 0`.
#[no_mangle]
pub unsafe extern "C" fn scalesplat_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            std::ptr::copy_nonoverlapping(msg.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        msg.len() + 1
    })
}

/// Creates an empty scene.
#[no_mangle]
pub unsafe extern "C" fn scalesplat_scene_new(out: *mut *mut ScalesplatScene) -> ScalesplatStatus {
    guarded(|| {
        if out.is_null() {
            return fail(ScalesplatStatus::NullArgument, "out is null");
        }
        *out = Box::into_raw(Box::new(ScalesplatScene {
            scene: MultiScaleScene::new(),
        }));
        ScalesplatStatus::Ok
    })
}

/// Builds a one-layer scene from an image and a depth map seen by `camera`.
/// `rgb` holds `3 * width * height` row-major floats in [0, 1]; `depth` holds
/// `width * height` floats where values that are not positive and finite
/// mark missing depth.
#[no_mangle]
pub unsafe extern "C" fn scalesplat_scene_create_root(
    rgb: *const f32,
    depth: *const f32,
    camera: *const ScalesplatCamera,
    steps: u32,
    seed: u64,
    out: *mut *mut ScalesplatScene,
) -> ScalesplatStatus {
    guarded(|| {
        let Some(c) = camera.as_ref() else {
            return fail(ScalesplatStatus::NullArgument, "camera is null");
        };
        if rgb.is_null() || depth.is_null() || out.is_null() {
            return fail(ScalesplatStatus::NullArgument, "rgb, depth or out is null");
        }
        let cam = match camera_from(c) {
            Ok(cam) => cam,
            Err(s) => return s,
        };
        let n = cam.pixel_count();
        let rgb = std::slice::from_raw_parts(rgb, 3 * n);
        let depth = std::slice::from_raw_parts(depth, n);
        let image = Image::from_pixels(
            cam.width(),
            cam.height(),
            rgb.chunks_exact(3)
                .map(|p| [f64::from(p[0]), f64::from(p[1]), f64::from(p[2])])
                .collect(),
        );
        let w = cam.width();
        let depth = DepthMap::from_fn(w, cam.height(), |i, j| {
            let d = f64::from(depth[(j * w + i) as usize]);
            (d > 0.0 && d.is_finite()).then_some(d)
        });
        let options = RootOptions {
            seed,
            optim: OptimConfig {
                steps: steps as usize,
                ..OptimConfig::default()
            },
            ..RootOptions::default()
        };
        match create_root(&image, &depth, &cam, &options) {
            Ok((scene, _)) => {
                *out = Box::into_raw(Box::new(ScalesplatScene { scene }));
                ScalesplatStatus::Ok
            }
            Err(e) => fail(ScalesplatStatus::Synthesis, e.to_string()),
        }
    })
}

#[no_mangle]
pub unsafe extern "C" fn scalesplat_scene_load(path: *const c_char, out: *mut *mut ScalesplatScene) -> ScalesplatStatus {
    guarded(|| {
        if out.is_null() {
            return fail(ScalesplatStatus::NullArgument, "out is null");
        }
        let path = match path_arg(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        match load_scene(&path) {
            Ok(scene) => {
                *out = Box::into_raw(Box::new(ScalesplatScene { scene }));
                ScalesplatStatus::Ok
            }
            Err(e) => fail(io_status(&e), e.to_string()),
        }
    })
}

/// Saves atomically; writes the byte count to `bytes_out` when non-null.
#[no_mangle]
pub unsafe extern "C" fn scalesplat_scene_save(
    scene: *const ScalesplatScene,
    path: *const c_char,
    bytes_out: *mut u64,
) -> ScalesplatStatus {
    guarded(|| {
        let Some(h) = scene.as_ref() else {
            return fail(ScalesplatStatus::NullArgument, "scene is null");
        };
        let path = match path_arg(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        match save_scene(&h.scene, &path) {
            Ok(n) => {
                if !bytes_out.is_null() {
                    *bytes_out = n;
                }
                ScalesplatStatus::Ok
            }
            Err(e) => fail(io_status(&e), e.to_string()),
        }
    })
}

/// Releases a handle. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn scalesplat_scene_free(scene: *mut ScalesplatScene) {
    if !scene.is_null() {
        drop(Box::from_raw(scene));
    }
}

#[no_mangle]
pub unsafe extern "C" fn scalesplat_scene_layer_count(scene: *const ScalesplatScene, out: *mut u32) -> ScalesplatStatus {
    guarded(|| match (scene.as_ref(), out.as_mut()) {
        (Some(h), Some(o)) => {
            *o = h.scene.layer_count() as u32;
            ScalesplatStatus::Ok
        }
        _ => fail(ScalesplatStatus::NullArgument, "scene or out is null"),
    })
}

#[no_mangle]
pub unsafe extern "C" fn scalesplat_scene_surfel_count(scene: *const ScalesplatScene, out: *mut u64) -> ScalesplatStatus {
    guarded(|| match (scene.as_ref(), out.as_mut()) {
        (Some(h), Some(o)) => {
            *o = h.scene.surfel_count() as u64;
            ScalesplatStatus::Ok
        }
        _ => fail(ScalesplatStatus::NullArgument, "scene or out is null"),
    })
}

/// Number of committed layer additions since the scene was created or loaded.
#[no_mangle]
pub unsafe extern "C" fn scalesplat_scene_version(scene: *const ScalesplatScene, out: *mut u64) -> ScalesplatStatus {
    guarded(|| match (scene.as_ref(), out.as_mut()) {
        (Some(h), Some(o)) => {
            *o = h.scene.version();
            ScalesplatStatus::Ok
        }
        _ => fail(ScalesplatStatus::NullArgument, "scene or out is null"),
    })
}

/// Creation camera of `layer`.
#[no_mangle]
pub unsafe extern "C" fn scalesplat_scene_layer_camera(
    scene: *const ScalesplatScene,
    layer: u32,
    out: *mut ScalesplatCamera,
) -> ScalesplatStatus {
    guarded(|| {
        let (Some(h), Some(o)) = (scene.as_ref(), out.as_mut()) else {
            return fail(ScalesplatStatus::NullArgument, "scene or out is null");
        };
        match h.scene.layer(layer as usize) {
            Some(l) => {
                *o = camera_to(&l.creation_camera);
                ScalesplatStatus::Ok
            }
            None => fail(ScalesplatStatus::InvalidArgument, format!("no layer {layer}")),
        }
    })
}

/// Renders into caller buffers: `rgb` receives `3 * width * height`
/// row-major floats in [0, 1]; `depth` (optional) receives `width * height`
/// floats with 0 where no surface was hit.
#[no_mangle]
pub unsafe extern "C" fn scalesplat_render(
    scene: *const ScalesplatScene,
    camera: *const ScalesplatCamera,
    modulation: bool,
    rgb: *mut f32,
    rgb_len: usize,
    depth: *mut f32,
    depth_len: usize,
) -> ScalesplatStatus {
    guarded(|| {
        let (Some(h), Some(c)) = (scene.as_ref(), camera.as_ref()) else {
            return fail(ScalesplatStatus::NullArgument, "scene or camera is null");
        };
        if rgb.is_null() {
            return fail(ScalesplatStatus::NullArgument, "rgb buffer is null");
        }
        let cam = match camera_from(c) {
            Ok(cam) => cam,
            Err(s) => return s,
        };
        let n = cam.pixel_count();
        if rgb_len < 3 * n || (!depth.is_null() && depth_len < n) {
            return fail(
                ScalesplatStatus::BufferTooSmall,
                format!("need {} color and {n} depth floats", 3 * n),
            );
        }
        let cfg = RenderConfig {
            modulation,
            ..RenderConfig::default()
        };
        let frame = render_color(&h.scene, &cam, &cfg);
        let out = std::slice::from_raw_parts_mut(rgb, 3 * n);
        for (k, p) in frame.color.pixels().iter().enumerate() {
            for c in 0..3 {
                out[3 * k + c] = p[c] as f32;
            }
        }
        if !depth.is_null() {
            let d = std::slice::from_raw_parts_mut(depth, n);
            for (k, v) in d.iter_mut().enumerate() {
                *v = frame.depth.get_index(k).unwrap_or(0.0) as f32;
            }
        }
        ScalesplatStatus::Ok
    })
}

/// Adds a detail layer under `layer` using the built-in procedural provider.
/// `prompt` may be null (empty prompt). The handle is unchanged on failure.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn scalesplat_scene_zoom_procedural(
    scene: *mut ScalesplatScene,
    layer: u32,
    center_u: f64,
    center_v: f64,
    factor: f64,
    prompt: *const c_char,
    seed: u64,
    steps: u32,
    aux_views: u32,
    new_layer: *mut u32,
) -> ScalesplatStatus {
    guarded(|| {
        let Some(h) = scene.as_mut() else {
            return fail(ScalesplatStatus::NullArgument, "scene is null");
        };
        let prompt = if prompt.is_null() {
            String::new()
        } else {
            match CStr::from_ptr(prompt).to_str() {
                Ok(s) => s.to_string(),
                Err(_) => return fail(ScalesplatStatus::InvalidArgument, "prompt is not UTF-8"),
            }
        };
        let request = DetailRequest {
            parent_layer: layer as usize,
            zoom_center: [center_u, center_v],
            zoom_factor: factor,
            prompt,
            seed,
        };
        let options = SynthOptions {
            aux_views: aux_views as usize,
            optim: OptimConfig {
                steps: steps as usize,
                ..OptimConfig::default()
            },
            ..SynthOptions::default()
        };
        match synthesize_scale(&mut h.scene, &request, &ProceduralProvider::default(), &options) {
            Ok(report) => {
                if !new_layer.is_null() {
                    *new_layer = report.layer as u32;
                }
                ScalesplatStatus::Ok
            }
            Err(e) => fail(ScalesplatStatus::Synthesis, e.to_string()),
        }
    })
}

/// Depth over the geometric-mean focal length.
#[no_mangle]
pub unsafe extern "C" fn scalesplat_native_scale(depth: f64, fx: f64, fy: f64, out: *mut f64) -> ScalesplatStatus {
    guarded(|| {
        let Some(o) = out.as_mut() else {
            return fail(ScalesplatStatus::NullArgument, "out is null");
        };
        match native_scale(depth, fx, fy) {
            Ok(s) => {
                *o = s;
                ScalesplatStatus::Ok
            }
            Err(e) => fail(ScalesplatStatus::InvalidArgument, e.to_string()),
        }
    })
}

/// Opacity weight at `s_render` for the given bounds; pass NaN for an absent
/// parent or child bound.
#[no_mangle]
pub unsafe extern "C" fn scalesplat_opacity_weight(
    s_render: f64,
    native: f64,
    parent: f64,
    child: f64,
    out: *mut f64,
) -> ScalesplatStatus {
    guarded(|| {
        let Some(o) = out.as_mut() else {
            return fail(ScalesplatStatus::NullArgument, "out is null");
        };
        if !(s_render > 0.0 && s_render.is_finite()) {
            return fail(ScalesplatStatus::InvalidArgument, format!("render scale {s_render}"));
        }
        let opt = |v: f64| (!v.is_nan()).then_some(v);
        match ScaleBounds::new(native, opt(parent), opt(child)) {
            Ok(b) => {
                *o = opacity_weight(s_render, &b);
                ScalesplatStatus::Ok
            }
            Err(e) => fail(ScalesplatStatus::InvalidArgument, e.to_string()),
        }
    })
}

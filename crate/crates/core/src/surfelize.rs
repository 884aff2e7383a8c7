//! Pixel-aligned layer initialization from an image and a depth map.

use nalgebra::Vector3;
use thiserror::Error;

use crate::diffopt::INITIAL_OPACITY;
use crate::geometry::{back_project, normals_from_depth, pixel_center, quat_z_to, Camera};
use crate::imaging::{Image, Mask};
use crate::modulation::{native_scale, render_scale, ScaleBounds, ScaleError};
use crate::scene::{ScaleLayer, Surfel};

/// Normals further than this from facing the camera are replaced by the
/// camera-facing direction.
pub const MAX_NORMAL_ANGLE_DEG: f64 = 85.0;

#[derive(Debug, Error)]
pub enum SurfelizeError {
    #[error("no pixel has a valid depth; the layer would be empty")]
    EmptyLayer,
    #[error("{what} is {got_w}x{got_h}, camera is {want_w}x{want_h}")]
    Dimensions {
        what: &'static str,
        got_w: u32,
        got_h: u32,
        want_w: u32,
        want_h: u32,
    },
    #[error("pixel ({i}, {j}) back-projects behind the parent camera")]
    BehindParent { i: u32, j: u32 },
    #[error("pixel ({i}, {j}): {source}")]
    Bounds {
        i: u32,
        j: u32,
        #[source]
        source: ScaleError,
    },
}

/// Lineage fields for the layer being built.
#[derive(Clone, Debug, Default)]
pub struct LayerMeta {
    pub parent_layer: Option<usize>,
    pub scale_index: u32,
    pub prompt: String,
}

/// Where surfels come from and how their scale bounds are measured.
#[derive(Clone, Copy, Debug)]
pub struct SurfelSource<'a> {
    pub image: &'a Image,
    pub depth: &'a crate::geometry::DepthMap,
    pub camera: &'a Camera,
    /// Camera the native scale is measured against; defaults to `camera`.
    pub native_camera: Option<&'a Camera>,
    pub parent_camera: Option<&'a Camera>,
    /// Only pixels set in the mask emit surfels.
    pub mask: Option<&'a Mask>,
}

impl<'a> SurfelSource<'a> {
    pub fn new(image: &'a Image, depth: &'a crate::geometry::DepthMap, camera: &'a Camera) -> Self {
        Self {
            image,
            depth,
            camera,
            native_camera: None,
            parent_camera: None,
            mask: None,
        }
    }
}

fn check(what: &'static str, w: u32, h: u32, cam: &Camera) -> Result<(), SurfelizeError> {
    if (w, h) != (cam.width(), cam.height()) {
        return Err(SurfelizeError::Dimensions {
            what,
            got_w: w,
            got_h: h,
            want_w: cam.width(),
            want_h: cam.height(),
        });
    }
    Ok(())
}

/// One surfel per valid (and, if masked, selected) pixel, in row-major order.
/// May return an empty list.
pub fn surfels_from_view(src: &SurfelSource<'_>) -> Result<Vec<Surfel>, SurfelizeError> {
    let cam = src.camera;
    check("image", src.image.width(), src.image.height(), cam)?;
    check("depth", src.depth.width(), src.depth.height(), cam)?;
    if let Some(m) = src.mask {
        check("mask", m.width, m.height, cam)?;
    }
    let normals = normals_from_depth(src.depth, cam);
    let cos_limit = MAX_NORMAL_ANGLE_DEG.to_radians().cos();
    let center = cam.center();
    let mut out = Vec::new();
    for j in 0..cam.height() {
        for i in 0..cam.width() {
            if src.mask.is_some_and(|m| !m.get(i, j)) {
                continue;
            }
            let Some(d) = src.depth.get(i, j) else {
                continue;
            };
            let p = back_project(&pixel_center(i, j), d, cam).expect("valid depth is positive");
            let view: Vector3<f64> = (center - p).normalize();
            let mut n = normals.get(i, j);
            if n.dot(&view) < cos_limit {
                n = view;
            }
            let bounds_err = |source| SurfelizeError::Bounds { i, j, source };
            let native = match src.native_camera {
                Some(nc) => render_scale(&p, nc).ok_or_else(|| {
                    bounds_err(ScaleError::NonPositive {
                        depth: nc.world_to_camera(&p).z,
                        fx: nc.fx(),
                        fy: nc.fy(),
                    })
                })?,
                None => native_scale(d, cam.fx(), cam.fy()).map_err(bounds_err)?,
            };
            let parent = match src.parent_camera {
                Some(pc) => Some(render_scale(&p, pc).ok_or(SurfelizeError::BehindParent { i, j })?),
                None => None,
            };
            let bounds = ScaleBounds::new(native, parent, None).map_err(bounds_err)?;
            let size = d / (cam.fx() * cam.fy()).sqrt() / std::f64::consts::SQRT_2;
            out.push(Surfel::new(p, quat_z_to(&n), [size, size], INITIAL_OPACITY, src.image.get(i, j), bounds));
        }
    }
    Ok(out)
}

/// Builds a layer with one surfel per valid-depth pixel, sized to a one-pixel
/// footprint and bounded above by the parent camera's scale when given.
pub fn pixel_aligned_surfels(
    image: &Image,
    depth: &crate::geometry::DepthMap,
    camera: &Camera,
    parent_camera: Option<&Camera>,
    meta: LayerMeta,
) -> Result<ScaleLayer, SurfelizeError> {
    let src = SurfelSource {
        parent_camera,
        ..SurfelSource::new(image, depth, camera)
    };
    let surfels = surfels_from_view(&src)?;
    if surfels.is_empty() {
        return Err(SurfelizeError::EmptyLayer);
    }
    Ok(ScaleLayer::new(camera.clone(), meta.parent_layer, meta.scale_index, meta.prompt, surfels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::DepthMap;
    use crate::raster::{render_color, RenderConfig};
    use crate::scene::MultiScaleScene;

    #[test]
    fn two_by_two_constant_depth() {
        let cam = Camera::looking_down_z(1024.0, 1024.0, 2, 2).unwrap();
        let img = Image::filled(2, 2, [0.2, 0.4, 0.6]);
        let layer = pixel_aligned_surfels(&img, &DepthMap::constant(2, 2, 1024.0), &cam, None, LayerMeta::default()).unwrap();
        assert_eq!(layer.len(), 4);
        for s in layer.surfels() {
            assert!((s.bounds().native() - 1.0).abs() < 1e-15);
            assert_eq!(s.opacity, 0.1);
            assert!((s.scale[0] - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
            assert_eq!(s.scale[0], s.scale[1]);
            assert!(s.bounds().parent().is_none() && s.bounds().child().is_none());
            assert_eq!(s.color, [0.2, 0.4, 0.6]);
            // disk faces the camera
            assert!((s.normal() - Vector3::new(0.0, 0.0, -1.0)).norm() < 1e-9);
        }
    }

    #[test]
    fn invalid_depth_pixels_emit_nothing() {
        let cam = Camera::looking_down_z(100.0, 100.0, 3, 3).unwrap();
        let mut depth = DepthMap::constant(3, 3, 5.0);
        depth.invalidate(4);
        let layer = pixel_aligned_surfels(&Image::filled(3, 3, [0.5; 3]), &depth, &cam, None, LayerMeta::default()).unwrap();
        assert_eq!(layer.len(), 8);
        let empty = DepthMap::empty(3, 3);
        assert!(matches!(
            pixel_aligned_surfels(&Image::filled(3, 3, [0.5; 3]), &empty, &cam, None, LayerMeta::default()),
            Err(SurfelizeError::EmptyLayer)
        ));
    }

    #[test]
    fn parent_bound_is_focal_ratio() {
        let parent = Camera::looking_down_z(1024.0, 1024.0, 16, 16).unwrap();
        let child = parent.with_intrinsics(8192.0, 8192.0, 8.0, 8.0).unwrap();
        let layer = pixel_aligned_surfels(
            &Image::filled(16, 16, [0.5; 3]),
            &DepthMap::constant(16, 16, 3.0),
            &child,
            Some(&parent),
            LayerMeta::default(),
        )
        .unwrap();
        for s in layer.surfels() {
            let ratio = s.bounds().parent().unwrap() / s.bounds().native();
            assert!((ratio - 8.0).abs() < 1e-9, "{ratio}");
        }
    }

    // Footprint sizing check: opacities are raised to 1 so that alpha measures
    // how well the initial disks tile the image rather than the 0.1 start value.
    #[test]
    fn fresh_layer_footprints_cover_its_view() {
        let cam = Camera::looking_down_z(64.0, 64.0, 48, 40).unwrap();
        let img = Image::from_fn(48, 40, |i, j| [f64::from(i) / 48.0, f64::from(j) / 40.0, 0.3]);
        let depth = DepthMap::from_fn(48, 40, |i, _| Some(2.0 + 0.01 * f64::from(i)));
        let mut layer = pixel_aligned_surfels(&img, &depth, &cam, None, LayerMeta::default()).unwrap();
        layer.surfels_mut().iter_mut().for_each(|s| s.opacity = 1.0);
        let mut scene = MultiScaleScene::new();
        scene.add_layer(layer).unwrap();
        let f = render_color(&scene, &cam, &RenderConfig::default());
        let covered = f.alpha.iter().filter(|a| **a > 0.5).count();
        assert!(covered as f64 >= 0.95 * f.alpha.len() as f64, "{covered}");
    }

    #[test]
    fn grazing_normals_fall_back_to_camera_facing() {
        let cam = Camera::looking_down_z(50.0, 50.0, 8, 8).unwrap();
        // steep depth ramp along x makes the surface nearly edge-on
        let depth = DepthMap::from_fn(8, 8, |i, _| Some(1.0 + 50.0 * f64::from(i)));
        let layer = pixel_aligned_surfels(&Image::filled(8, 8, [0.5; 3]), &depth, &cam, None, LayerMeta::default()).unwrap();
        let limit = MAX_NORMAL_ANGLE_DEG.to_radians().cos();
        for s in layer.surfels() {
            let view = (cam.center() - s.position).normalize();
            assert!(s.normal().dot(&view) >= limit - 1e-9);
        }
    }
}

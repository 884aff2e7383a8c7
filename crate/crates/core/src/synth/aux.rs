//! Near-orbit views around a creation camera, used to complete a layer
//! beyond what its single input image shows.

use nalgebra::{Rotation3, Unit, Vector2, Vector3};

use crate::geometry::{back_project, pose_from_center, Camera, GeometryError};
use crate::imaging::Mask;
use crate::raster::{render_surfels, Frame, RenderConfig, DEPTH_VALID_ALPHA};
use crate::scene::Surfel;

/// Orbit radius as a fraction of the median layer depth.
pub const AUX_ORBIT_RADIUS_RATIO: f64 = 0.02;

/// Largest rotation between an auxiliary camera and its input camera.
pub const AUX_MAX_ROTATION_DEG: f64 = 5.0;

#[derive(Clone, Debug)]
pub struct AuxView {
    pub camera: Camera,
    /// The partial layer rendered at `camera` with every opacity set to 1.
    pub conditioning: Frame,
    /// Pixels the partial layer leaves uncovered.
    pub mask: Mask,
}

/// `k` cameras whose centers lie on a circle of radius
/// `AUX_ORBIT_RADIUS_RATIO * median_depth` around `camera`'s center, each
/// rotated about the point seen at the image center at `median_depth`, so that
/// point keeps its pixel.
pub fn aux_cameras(camera: &Camera, median_depth: f64, k: usize) -> Result<Vec<Camera>, GeometryError> {
    if k == 0 {
        return Ok(Vec::new());
    }
    let center_px = Vector2::new(f64::from(camera.width()) / 2.0, f64::from(camera.height()) / 2.0);
    let target = back_project(&center_px, median_depth, camera)?;
    let c = camera.center();
    let dist = (c - target).norm();
    let radius = AUX_ORBIT_RADIUS_RATIO * median_depth;
    let angle = 2.0 * (radius / (2.0 * dist)).min(1.0).asin();
    let angle = angle.min(AUX_MAX_ROTATION_DEG.to_radians());
    let cam_to_world = camera.rotation().transpose();
    // rotation axes perpendicular to the line of sight to the target
    let r = (target - c) / dist;
    let x = cam_to_world * Vector3::x();
    let e1 = (x - r * x.dot(&r)).normalize();
    let e2 = r.cross(&e1);
    (0..k)
        .map(|n| {
            let phi = std::f64::consts::TAU * n as f64 / k as f64;
            let axis = e1 * phi.cos() + e2 * phi.sin();
            let g = Rotation3::from_axis_angle(&Unit::new_normalize(axis), angle);
            let center = target + g * (c - target);
            let rot = Rotation3::from_matrix_unchecked(g.matrix() * cam_to_world);
            Camera::with_principal_point(
                pose_from_center(&rot, &center),
                camera.fx(),
                camera.fy(),
                camera.cx(),
                camera.cy(),
                camera.width(),
                camera.height(),
            )
        })
        .collect()
}

/// Median camera-frame depth of surfels in front of `camera`.
pub fn median_depth(surfels: &[Surfel], camera: &Camera) -> Option<f64> {
    let mut z: Vec<f64> = surfels
        .iter()
        .map(|s| camera.world_to_camera(&s.position).z)
        .filter(|z| *z > 0.0)
        .collect();
    if z.is_empty() {
        return None;
    }
    let mid = z.len() / 2;
    z.select_nth_unstable_by(mid, f64::total_cmp);
    Some(z[mid])
}

/// Renders the partial layer at `k` orbit cameras and marks what it misses.
/// Empty when `k == 0` or no surfel lies in front of `camera`.
pub fn auxiliary_views(
    partial: &[Surfel],
    camera: &Camera,
    k: usize,
    config: &RenderConfig,
) -> Result<Vec<AuxView>, GeometryError> {
    let Some(depth) = median_depth(partial, camera).filter(|_| k > 0) else {
        return Ok(Vec::new());
    };
    let opaque: Vec<Surfel> = partial
        .iter()
        .map(|s| {
            let mut s = s.clone();
            s.opacity = 1.0;
            s
        })
        .collect();
    aux_cameras(camera, depth, k)?
        .into_iter()
        .map(|cam| {
            let conditioning = render_surfels(&opaque, &cam, config);
            let mask = Mask {
                width: cam.width(),
                height: cam.height(),
                bits: conditioning.alpha.iter().map(|a| *a < DEPTH_VALID_ALPHA).collect(),
            };
            Ok(AuxView {
                camera: cam,
                conditioning,
                mask,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{project, DepthMap};
    use crate::imaging::Image;
    use crate::surfelize::{pixel_aligned_surfels, LayerMeta};

    fn rotation_angle_deg(a: &Camera, b: &Camera) -> f64 {
        let r = a.rotation() * b.rotation().transpose();
        (((r.trace() - 1.0) / 2.0).clamp(-1.0, 1.0)).acos().to_degrees()
    }

    #[test]
    fn zero_views() {
        let cam = Camera::looking_down_z(50.0, 50.0, 8, 8).unwrap();
        let layer = pixel_aligned_surfels(&Image::filled(8, 8, [0.5; 3]), &DepthMap::constant(8, 8, 2.0), &cam, None, LayerMeta::default()).unwrap();
        assert!(auxiliary_views(layer.surfels(), &cam, 0, &RenderConfig::default()).unwrap().is_empty());
    }

    #[test]
    fn orbit_contract() {
        let base = Camera::looking_down_z(400.0, 400.0, 64, 48).unwrap();
        let cam = base.with_intrinsics(400.0, 400.0, 20.0, 30.0).unwrap();
        let cams = aux_cameras(&cam, 3.0, 6).unwrap();
        assert_eq!(cams.len(), 6);
        let target = back_project(&Vector2::new(32.0, 24.0), 3.0, &cam).unwrap();
        for c in &cams {
            let deg = rotation_angle_deg(c, &cam);
            assert!(deg > 0.0 && deg <= AUX_MAX_ROTATION_DEG, "{deg}");
            let moved = (c.center() - cam.center()).norm();
            assert!((moved - AUX_ORBIT_RADIUS_RATIO * 3.0).abs() < 1e-9, "{moved}");
            let p = project(&target, c);
            assert!((p.pixel - Vector2::new(32.0, 24.0)).norm() < 1e-9);
        }
    }

    #[test]
    fn plane_masks_touch_only_the_border() {
        let (w, h) = (96, 64);
        let cam = Camera::looking_down_z(90.0, 90.0, w, h).unwrap();
        let layer = pixel_aligned_surfels(&Image::filled(w, h, [0.4; 3]), &DepthMap::constant(w, h, 3.0), &cam, None, LayerMeta::default()).unwrap();
        let views = auxiliary_views(layer.surfels(), &cam, 4, &RenderConfig::default()).unwrap();
        assert_eq!(views.len(), 4);
        for v in &views {
            let n = v.mask.count();
            assert!(n as f64 <= 0.02 * f64::from(w * h), "{n}");
            // anything masked lies within two pixels of the image border
            for j in 0..h {
                for i in 0..w {
                    if v.mask.get(i, j) {
                        assert!(i < 2 || j < 2 || i >= w - 2 || j >= h - 2, "({i}, {j})");
                    }
                }
            }
        }
    }
}

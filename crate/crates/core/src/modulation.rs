//! Scale computation and scale-aware opacity modulation.
//!
//! A surfel's scale at a camera is its camera-frame depth divided by the
//! geometric-mean focal length. Every surfel remembers the scale at which it
//! was created (`native`) and, optionally, the scale it has at the creation
//! camera of the previous (`parent`) and next (`child`) layer. The opacity
//! weight is `1` at the native scale and falls off linearly in `log(scale)`
//! toward those bounds, so a parent/child pair always sums to one while the
//! observation scale moves between their native scales.

use nalgebra::Vector3;
use thiserror::Error;

use crate::geometry::{Camera, NEAR_EPS};

/// Bounds closer than this (in absolute scale) are treated as a step at the
/// native scale.
pub const DEGENERATE_GAP: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum ScaleError {
    #[error("scale inputs must be positive and finite (depth={depth}, fx={fx}, fy={fy})")]
    NonPositive { depth: f64, fx: f64, fy: f64 },
    #[error("native scale must be positive, got {0}")]
    Native(f64),
    #[error("parent bound {parent} must exceed native scale {native}")]
    Parent { parent: f64, native: f64 },
    #[error("child bound {child} must be below native scale {native}")]
    Child { child: f64, native: f64 },
}

/// `depth / sqrt(fx * fy)`.
pub fn native_scale(depth: f64, fx: f64, fy: f64) -> Result<f64, ScaleError> {
    let ok = |v: f64| v > 0.0 && v.is_finite();
    if !(ok(depth) && ok(fx) && ok(fy)) {
        return Err(ScaleError::NonPositive { depth, fx, fy });
    }
    Ok(depth / (fx * fy).sqrt())
}

/// Scale of a world point at `camera`, or `None` when it is behind the camera.
pub fn render_scale(position: &Vector3<f64>, camera: &Camera) -> Option<f64> {
    let z = camera.world_to_camera(position).z;
    (z > NEAR_EPS).then(|| z / camera.mean_focal())
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Bound {
    value: f64,
    log: f64,
    /// `1 / |log(bound) - log(native)|`, or `None` for a degenerate gap.
    inv_gap: Option<f64>,
}

impl Bound {
    fn new(value: f64, native: f64, log_native: f64) -> Self {
        let log = value.ln();
        let inv_gap = ((value - native).abs() > DEGENERATE_GAP).then(|| 1.0 / (log - log_native).abs());
        Self { value, log, inv_gap }
    }
}

/// Native scale plus optional parent/child bounds, with the log-space
/// constants precomputed for the per-surfel render path.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScaleBounds {
    native: f64,
    log_native: f64,
    parent: Option<Bound>,
    child: Option<Bound>,
}

impl ScaleBounds {
    pub fn new(native: f64, parent: Option<f64>, child: Option<f64>) -> Result<Self, ScaleError> {
        if !(native > 0.0 && native.is_finite()) {
            return Err(ScaleError::Native(native));
        }
        let log_native = native.ln();
        let parent = match parent {
            Some(p) if !(p > native && p.is_finite()) => {
                return Err(ScaleError::Parent { parent: p, native })
            }
            Some(p) => Some(Bound::new(p, native, log_native)),
            None => None,
        };
        let mut bounds = Self {
            native,
            log_native,
            parent,
            child: None,
        };
        if let Some(c) = child {
            bounds.set_child(c)?;
        }
        Ok(bounds)
    }

    pub fn native(&self) -> f64 {
        self.native
    }
    pub fn parent(&self) -> Option<f64> {
        self.parent.map(|b| b.value)
    }
    pub fn child(&self) -> Option<f64> {
        self.child.map(|b| b.value)
    }

    pub(crate) fn set_child(&mut self, child: f64) -> Result<(), ScaleError> {
        if !(child < self.native && child > 0.0 && child.is_finite()) {
            return Err(ScaleError::Child {
                child,
                native: self.native,
            });
        }
        self.child = Some(Bound::new(child, self.native, self.log_native));
        Ok(())
    }

    /// Opacity weight at observation scale `s_render` (must be positive).
    #[inline]
    pub fn weight(&self, s_render: f64) -> f64 {
        self.weight_log(s_render, s_render.ln())
    }

    #[inline]
    fn weight_log(&self, s: f64, log_s: f64) -> f64 {
        let native = self.native;
        match self.parent {
            None if s >= native => return 1.0,
            Some(p) if p.value >= s && s >= native => {
                return match p.inv_gap {
                    Some(inv) => (p.log - log_s) * inv,
                    None if s <= native => 1.0,
                    None => 0.0,
                };
            }
            _ => {}
        }
        match self.child {
            Some(c) if native >= s && s >= c.value => match c.inv_gap {
                Some(inv) => (log_s - c.log) * inv,
                None if s >= native => 1.0,
                None => 0.0,
            },
            None if s <= native => 1.0,
            _ => 0.0,
        }
    }
}

/// Opacity weight of a surfel with `bounds` observed at scale `s_render`.
///
/// Written case by case against the log-space schedule, without the
/// precomputed constants, so that it can serve as the reference for
/// [`ScaleBounds::weight`].
pub fn opacity_weight(s_render: f64, bounds: &ScaleBounds) -> f64 {
    let s = s_render;
    let native = bounds.native();
    let (parent, child) = (bounds.parent(), bounds.child());
    if parent.is_none() && s >= native {
        return 1.0;
    }
    if let Some(p) = parent {
        if p >= s && s >= native {
            if (p - native).abs() <= DEGENERATE_GAP {
                return if s <= native { 1.0 } else { 0.0 };
            }
            return (p.ln() - s.ln()) / (p.ln() - native.ln());
        }
    }
    if let Some(c) = child {
        if native >= s && s >= c {
            if (native - c).abs() <= DEGENERATE_GAP {
                return if s >= native { 1.0 } else { 0.0 };
            }
            return (s.ln() - c.ln()) / (native.ln() - c.ln());
        }
    }
    if child.is_none() && s <= native {
        return 1.0;
    }
    0.0
}

/// Modulated opacity `o * alpha`.
pub fn modulated_opacity(opacity: f64, s_render: f64, bounds: &ScaleBounds) -> f64 {
    opacity * bounds.weight(s_render)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn b(native: f64, parent: Option<f64>, child: Option<f64>) -> ScaleBounds {
        ScaleBounds::new(native, parent, child).unwrap()
    }

    #[test]
    fn native_scale_examples() {
        assert_eq!(native_scale(1024.0, 1024.0, 1024.0).unwrap(), 1.0);
        assert_eq!(native_scale(8.0, 1024.0, 1024.0).unwrap(), 0.0078125);
        assert!((native_scale(10.0, 512.0, 2048.0).unwrap() - 10.0 / 1024.0).abs() < 1e-15);
        assert!(native_scale(0.0, 1.0, 1.0).is_err());
        assert!(native_scale(1.0, -1.0, 1.0).is_err());
        assert!(native_scale(1.0, 1.0, f64::NAN).is_err());
    }

    #[test]
    fn render_scale_zoom_and_dolly() {
        let cam = Camera::looking_down_z(1024.0, 1024.0, 64, 64).unwrap();
        let p = Vector3::new(0.0, 0.0, 16.0);
        assert_eq!(render_scale(&p, &cam).unwrap(), 16.0 / 1024.0);
        let zoomed = cam.with_intrinsics(8192.0, 8192.0, 32.0, 32.0).unwrap();
        assert_eq!(render_scale(&p, &cam).unwrap() / render_scale(&p, &zoomed).unwrap(), 8.0);
        let half = Vector3::new(0.0, 0.0, 8.0);
        assert_eq!(render_scale(&half, &cam).unwrap() * 2.0, render_scale(&p, &cam).unwrap());
        assert!(render_scale(&Vector3::new(0.0, 0.0, -1.0), &cam).is_none());
    }

    #[test]
    fn schedule_fixtures() {
        assert_eq!(b(1.0, Some(4.0), Some(0.25)).weight(1.0), 1.0);
        assert_eq!(b(1.0, None, None).weight(1.0), 1.0);
        assert!((b(1.0, Some(4.0), None).weight(2.0) - 0.5).abs() < 1e-12);
        assert!((b(1.0, None, Some(0.25)).weight(0.5) - 0.5).abs() < 1e-12);
        assert_eq!(b(1.0, Some(4.0), None).weight(8.0), 0.0);
        assert_eq!(b(1.0, None, None).weight(100.0), 1.0);
        assert_eq!(b(1.0, Some(4.0), None).weight(1e-6), 1.0);
        assert_eq!(b(1.0, None, Some(0.25)).weight(0.1), 0.0);
        assert_eq!(b(1.0, None, Some(0.25)).weight(50.0), 1.0);
    }

    #[test]
    fn precomputed_matches_reference() {
        let cases = [
            b(1.0, Some(4.0), Some(0.25)),
            b(0.3, None, Some(0.01)),
            b(0.3, Some(2.4), None),
            b(2.0, None, None),
        ];
        for bounds in cases {
            for k in 0..400 {
                let s = 10f64.powf(-3.0 + 6.0 * f64::from(k) / 399.0);
                let a = bounds.weight(s);
                let r = opacity_weight(s, &bounds);
                assert!((a - r).abs() < 1e-14, "{s}: {a} vs {r}");
            }
        }
    }

    #[test]
    fn degenerate_parent_is_step() {
        let bounds = b(1.0, Some(1.0 + 1e-13), None);
        assert_eq!(bounds.weight(1.0), 1.0);
        assert_eq!(bounds.weight(1.0 + 5e-14), 0.0);
        assert_eq!(bounds.weight(0.5), 1.0);
        assert_eq!(opacity_weight(1.0 + 5e-14, &bounds), 0.0);
    }

    #[test]
    fn bound_ordering_is_enforced() {
        assert!(ScaleBounds::new(1.0, Some(0.5), None).is_err());
        assert!(ScaleBounds::new(1.0, None, Some(1.5)).is_err());
        assert!(ScaleBounds::new(0.0, None, None).is_err());
        let mut ok = b(1.0, None, None);
        assert!(ok.set_child(1.0).is_err());
        ok.set_child(0.125).unwrap();
        assert_eq!(ok.child(), Some(0.125));
    }

    #[test]
    fn modulated_opacity_range() {
        let bounds = b(1.0, Some(8.0), Some(0.125));
        for k in 0..100 {
            let s = 0.01 * 1.07f64.powi(k);
            let o = modulated_opacity(0.7, s, &bounds);
            assert!((0.0..=0.7).contains(&o));
        }
    }

    proptest! {
        #[test]
        fn partition_of_unity(
            log_child_native in -8.0f64..4.0,
            log_ratio in 0.01f64..5.0,
            t in 0.0f64..=1.0,
        ) {
            let child_native = log_child_native.exp();
            let parent_native = (log_child_native + log_ratio).exp();
            let parent = b(parent_native, None, Some(child_native));
            let child = b(child_native, Some(parent_native), None);
            let s = (log_child_native + t * log_ratio).exp().clamp(child_native, parent_native);
            prop_assert!((parent.weight(s) + child.weight(s) - 1.0).abs() < 1e-12);
        }

        #[test]
        fn weight_in_unit_interval_and_monotone(
            native in 0.001f64..10.0,
            up in 1.01f64..64.0,
            down in 1.01f64..64.0,
            s1 in -10.0f64..10.0,
            s2 in -10.0f64..10.0,
        ) {
            let bounds = b(native, Some(native * up), Some(native / down));
            let (lo, hi) = if s1 < s2 { (s1, s2) } else { (s2, s1) };
            let (w_lo, w_hi) = (bounds.weight(native * lo.exp()), bounds.weight(native * hi.exp()));
            prop_assert!((0.0..=1.0).contains(&w_lo) && (0.0..=1.0).contains(&w_hi));
            // moving away from native never increases the weight
            if lo >= 0.0 { prop_assert!(w_hi <= w_lo); }
            if hi <= 0.0 { prop_assert!(w_lo <= w_hi); }
        }
    }

    #[test]
    fn continuity_across_case_boundaries() {
        let bounds = b(1.0, Some(8.0), Some(0.125));
        for edge in [0.125f64, 1.0, 8.0] {
            let (mut prev, mut max_jump) = (None::<f64>, 0.0f64);
            for k in -1000..=1000 {
                let s = edge * (1e-7 * f64::from(k)).exp();
                let w = bounds.weight(s);
                if let Some(p) = prev {
                    max_jump = max_jump.max((w - p).abs());
                }
                prev = Some(w);
            }
            assert!(max_jump < 1e-6, "jump {max_jump} at {edge}");
        }
    }
}

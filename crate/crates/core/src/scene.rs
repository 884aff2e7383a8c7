//! Surfels, scale layers and the append-only multi-scale scene.
//!
//! Layers are reference counted so that a [`Snapshot`] is a cheap clone of
//! the layer list. The only in-place change a committed layer ever sees is
//! the one-time assignment of child scale bounds, which goes through
//! copy-on-write and therefore never touches an outstanding snapshot.

use std::sync::{Arc, Mutex, RwLock};

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

use crate::geometry::{quat_to_rotation, Camera};
use crate::imaging::Rgb;
use crate::modulation::{render_scale, ScaleBounds, ScaleError};

/// Surfel thickness as a fraction of its smaller tangential scale.
pub const THICKNESS_RATIO: f64 = 0.01;

const QUAT_NORM_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("layer {0} does not exist")]
    UnknownLayer(usize),
    #[error("the root layer must not have a parent")]
    RootWithParent,
    #[error("non-root layer needs a committed parent layer")]
    MissingParent,
    #[error("layer scale index {got} must be parent's + 1 = {want}")]
    ScaleIndex { got: u32, want: u32 },
    #[error("layer focal {child} must exceed parent focal {parent}")]
    NotZoomIn { child: f64, parent: f64 },
    #[error("surfel {index} of layer {layer}: {msg}")]
    InvalidSurfel {
        layer: usize,
        index: usize,
        msg: String,
    },
    #[error("scene changed underneath the writer (expected version {expected}, found {found})")]
    VersionConflict { expected: u64, found: u64 },
    #[error(transparent)]
    Scale(#[from] ScaleError),
}

/// A flat Gaussian disk with scale-aware visibility bounds.
#[derive(Clone, Debug, PartialEq)]
pub struct Surfel {
    pub position: Vector3<f64>,
    /// Orientation `[w, x, y, z]`; the disk normal is the rotated `+z` axis.
    pub rotation: [f64; 4],
    /// Tangential standard deviations along the rotated `x` and `y` axes.
    pub scale: [f64; 2],
    pub opacity: f64,
    pub color: Rgb,
    bounds: ScaleBounds,
    layer: u32,
}

impl Surfel {
    pub fn new(
        position: Vector3<f64>,
        rotation: [f64; 4],
        scale: [f64; 2],
        opacity: f64,
        color: Rgb,
        bounds: ScaleBounds,
    ) -> Self {
        Self {
            position,
            rotation,
            scale,
            opacity,
            color,
            bounds,
            layer: 0,
        }
    }

    pub fn bounds(&self) -> &ScaleBounds {
        &self.bounds
    }

    pub fn layer(&self) -> usize {
        self.layer as usize
    }

    pub(crate) fn set_layer(&mut self, layer: usize) {
        self.layer = layer as u32;
    }

    pub fn thickness(&self) -> f64 {
        THICKNESS_RATIO * self.scale[0].min(self.scale[1])
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        quat_to_rotation(&self.rotation)
    }

    pub fn normal(&self) -> Vector3<f64> {
        self.rotation_matrix().column(2).into_owned()
    }

    /// World-space covariance `R diag(sx^2, sy^2, eps^2) R^T`.
    pub fn covariance(&self) -> Matrix3<f64> {
        let r = self.rotation_matrix();
        let eps = self.thickness();
        let d = Matrix3::from_diagonal(&Vector3::new(
            self.scale[0] * self.scale[0],
            self.scale[1] * self.scale[1],
            eps * eps,
        ));
        r * d * r.transpose()
    }

    pub fn validate(&self) -> Result<(), String> {
        let qn = self.rotation.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !((qn - 1.0).abs() <= QUAT_NORM_TOL) {
            return Err(format!("quaternion norm {qn} is not 1"));
        }
        if !(self.scale[0] > 0.0 && self.scale[1] > 0.0)
            || !self.scale.iter().all(|s| s.is_finite())
        {
            return Err(format!("scales must be positive, got {:?}", self.scale));
        }
        if !(0.0..=1.0).contains(&self.opacity) {
            return Err(format!("opacity {} outside [0, 1]", self.opacity));
        }
        if self.position.iter().any(|v| !v.is_finite()) || self.color.iter().any(|v| !v.is_finite()) {
            return Err("non-finite position or color".into());
        }
        Ok(())
    }
}

/// All surfels created from one image at one creation camera.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaleLayer {
    pub creation_camera: Camera,
    pub parent_layer: Option<usize>,
    pub scale_index: u32,
    pub prompt: String,
    surfels: Vec<Surfel>,
}

impl ScaleLayer {
    pub fn new(
        creation_camera: Camera,
        parent_layer: Option<usize>,
        scale_index: u32,
        prompt: impl Into<String>,
        surfels: Vec<Surfel>,
    ) -> Self {
        Self {
            creation_camera,
            parent_layer,
            scale_index,
            prompt: prompt.into(),
            surfels,
        }
    }

    pub fn surfels(&self) -> &[Surfel] {
        &self.surfels
    }

    /// Mutable access for building or optimizing an uncommitted layer.
    pub fn surfels_mut(&mut self) -> &mut Vec<Surfel> {
        &mut self.surfels
    }

    pub fn len(&self) -> usize {
        self.surfels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.surfels.is_empty()
    }
}

/// Ordered, append-only collection of scale layers.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MultiScaleScene {
    layers: Vec<Arc<ScaleLayer>>,
    version: u64,
}

/// Immutable view of a scene at one version.
pub type Snapshot = Arc<MultiScaleScene>;

impl MultiScaleScene {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn layers(&self) -> impl ExactSizeIterator<Item = &ScaleLayer> {
        self.layers.iter().map(|l| l.as_ref())
    }

    pub fn layer(&self, index: usize) -> Option<&ScaleLayer> {
        self.layers.get(index).map(|l| l.as_ref())
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn surfel_count(&self) -> usize {
        self.layers.iter().map(|l| l.len()).sum()
    }

    /// Children of `index` in lineage order.
    pub fn children(&self, index: usize) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.parent_layer == Some(index))
            .map(|(k, _)| k)
            .collect()
    }

    /// Appends a layer, assigning its surfels to the new index.
    pub fn add_layer(&mut self, mut layer: ScaleLayer) -> Result<usize, SceneError> {
        let index = self.layers.len();
        match (index, layer.parent_layer) {
            (0, Some(_)) => return Err(SceneError::RootWithParent),
            (0, None) => {
                if layer.scale_index != 0 {
                    return Err(SceneError::ScaleIndex {
                        got: layer.scale_index,
                        want: 0,
                    });
                }
            }
            (_, None) => return Err(SceneError::MissingParent),
            (_, Some(p)) => {
                let parent = self.layers.get(p).ok_or(SceneError::UnknownLayer(p))?;
                if layer.scale_index != parent.scale_index + 1 {
                    return Err(SceneError::ScaleIndex {
                        got: layer.scale_index,
                        want: parent.scale_index + 1,
                    });
                }
                let (cf, pf) = (
                    layer.creation_camera.mean_focal(),
                    parent.creation_camera.mean_focal(),
                );
                if !(cf > pf) {
                    return Err(SceneError::NotZoomIn { child: cf, parent: pf });
                }
            }
        }
        let root = layer.parent_layer.is_none();
        for (k, s) in layer.surfels.iter_mut().enumerate() {
            let bad = |msg: String| SceneError::InvalidSurfel {
                layer: index,
                index: k,
                msg,
            };
            s.validate().map_err(bad)?;
            if root && s.bounds.parent().is_some() {
                return Err(bad("root-layer surfel has a parent bound".into()));
            }
            if !root && s.bounds.parent().is_none() {
                return Err(bad("non-root surfel is missing its parent bound".into()));
            }
            s.set_layer(index);
        }
        self.layers.push(Arc::new(layer));
        self.version += 1;
        Ok(index)
    }

    /// Assigns the child bound of every surfel in `parent_layer` that projects
    /// inside `child_camera` and has none yet. Returns how many were assigned.
    pub fn assign_child_bounds(
        &mut self,
        parent_layer: usize,
        child_camera: &Camera,
    ) -> Result<usize, SceneError> {
        let layer = self
            .layers
            .get(parent_layer)
            .ok_or(SceneError::UnknownLayer(parent_layer))?;
        let targets: Vec<(usize, f64)> = layer
            .surfels
            .iter()
            .enumerate()
            .filter(|(_, s)| s.bounds.child().is_none())
            .filter_map(|(k, s)| {
                let p = crate::geometry::project(&s.position, child_camera);
                let inside = !p.behind
                    && p.pixel.x >= 0.0
                    && p.pixel.y >= 0.0
                    && p.pixel.x < f64::from(child_camera.width())
                    && p.pixel.y < f64::from(child_camera.height());
                if !inside {
                    return None;
                }
                render_scale(&s.position, child_camera).map(|sc| (k, sc))
            })
            .collect();
        if targets.is_empty() {
            return Ok(0);
        }
        let layer = Arc::make_mut(&mut self.layers[parent_layer]);
        let mut assigned = 0;
        for (k, child_scale) in targets {
            // a child camera that does not zoom past this surfel leaves it alone
            if layer.surfels[k].bounds.set_child(child_scale).is_ok() {
                assigned += 1;
            }
        }
        Ok(assigned)
    }

    /// Mutable access to a layer's surfels for the optimizer. Only the newest
    /// layer may be edited this way.
    pub(crate) fn newest_layer_mut(&mut self, index: usize) -> Result<&mut ScaleLayer, SceneError> {
        if index + 1 != self.layers.len() {
            return Err(SceneError::UnknownLayer(index));
        }
        Ok(Arc::make_mut(&mut self.layers[index]))
    }

    /// Reassembles a scene from stored layers (used by the loader).
    pub(crate) fn from_parts(layers: Vec<ScaleLayer>) -> Result<Self, SceneError> {
        let mut scene = Self::new();
        let mut children = Vec::with_capacity(layers.len());
        for layer in layers {
            // child bounds are checked separately since add_layer accepts them
            // only through assign_child_bounds in normal operation
            children.push(layer.surfels.iter().map(|s| s.bounds.child()).collect::<Vec<_>>());
            let mut stripped = layer;
            for s in &mut stripped.surfels {
                s.bounds = ScaleBounds::new(s.bounds.native(), s.bounds.parent(), None)?;
            }
            scene.add_layer(stripped)?;
        }
        for (index, bounds) in children.into_iter().enumerate() {
            if bounds.iter().all(Option::is_none) {
                continue;
            }
            let layer = Arc::make_mut(&mut scene.layers[index]);
            for (k, child) in bounds.into_iter().enumerate() {
                if let Some(c) = child {
                    layer.surfels[k].bounds.set_child(c).map_err(|e| SceneError::InvalidSurfel {
                        layer: index,
                        index: k,
                        msg: e.to_string(),
                    })?;
                }
            }
        }
        Ok(scene)
    }
}

/// A scene shared between one writer and many readers.
#[derive(Debug, Default)]
pub struct SharedScene {
    current: RwLock<Snapshot>,
    writer: Mutex<()>,
}

impl SharedScene {
    pub fn new(scene: MultiScaleScene) -> Self {
        Self {
            current: RwLock::new(Arc::new(scene)),
            writer: Mutex::new(()),
        }
    }

    /// Current scene; unaffected by later commits.
    pub fn snapshot(&self) -> Snapshot {
        self.current.read().expect("scene lock poisoned").clone()
    }

    pub fn version(&self) -> u64 {
        self.snapshot().version()
    }

    /// Runs `edit` on a private copy of the current scene and publishes the
    /// result atomically. On error nothing is published.
    pub fn update<T, E>(
        &self,
        edit: impl FnOnce(&mut MultiScaleScene) -> Result<T, E>,
    ) -> Result<T, E> {
        let _guard = self.writer.lock().expect("writer lock poisoned");
        let mut working = (*self.snapshot()).clone();
        let out = edit(&mut working)?;
        *self.current.write().expect("scene lock poisoned") = Arc::new(working);
        Ok(out)
    }

    /// Publishes `scene` if the current version still equals `expected`.
    pub fn commit(&self, scene: MultiScaleScene, expected: u64) -> Result<u64, SceneError> {
        let _guard = self.writer.lock().expect("writer lock poisoned");
        let found = self.version();
        if found != expected {
            return Err(SceneError::VersionConflict { expected, found });
        }
        let version = scene.version();
        *self.current.write().expect("scene lock poisoned") = Arc::new(scene);
        Ok(version)
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::modulation::native_scale;
    use nalgebra::Vector2;

    pub(crate) fn plane_layer(camera: &Camera, parent: Option<(&Camera, usize, u32)>, depth: f64) -> ScaleLayer {
        let mut surfels = Vec::new();
        for j in 0..camera.height() {
            for i in 0..camera.width() {
                let px = Vector2::new(f64::from(i) + 0.5, f64::from(j) + 0.5);
                let p = crate::geometry::back_project(&px, depth, camera).unwrap();
                let native = native_scale(depth, camera.fx(), camera.fy()).unwrap();
                let parent_bound = parent.map(|(pc, _, _)| render_scale(&p, pc).unwrap());
                surfels.push(Surfel::new(
                    p,
                    [0.0, 1.0, 0.0, 0.0],
                    [native / 2f64.sqrt(); 2],
                    0.5,
                    [0.5; 3],
                    ScaleBounds::new(native, parent_bound, None).unwrap(),
                ));
            }
        }
        ScaleLayer::new(
            camera.clone(),
            parent.map(|(_, idx, _)| idx),
            parent.map_or(0, |(_, _, si)| si + 1),
            "",
            surfels,
        )
    }

    fn root_cam() -> Camera {
        Camera::looking_down_z(16.0, 16.0, 8, 8).unwrap()
    }

    fn zoomed(c: &Camera, factor: f64, cx: f64, cy: f64) -> Camera {
        c.with_intrinsics(c.fx() * factor, c.fy() * factor, cx, cy).unwrap()
    }

    #[test]
    fn append_counts_and_indices() {
        let mut scene = MultiScaleScene::new();
        let c0 = root_cam();
        assert_eq!(scene.add_layer(plane_layer(&c0, None, 4.0)).unwrap(), 0);
        assert_eq!(scene.surfel_count(), 64);
        let c1 = zoomed(&c0, 8.0, 4.0, 4.0);
        assert_eq!(scene.add_layer(plane_layer(&c1, Some((&c0, 0, 0)), 4.0)).unwrap(), 1);
        let c2 = zoomed(&c1, 8.0, 4.0, 4.0);
        assert_eq!(scene.add_layer(plane_layer(&c2, Some((&c1, 1, 1)), 4.0)).unwrap(), 2);
        assert_eq!(scene.surfel_count(), 64 * 3);
        assert_eq!(scene.version(), 3);
        assert!(scene.layer(2).unwrap().surfels().iter().all(|s| s.layer() == 2));
        assert_eq!(scene.children(0), vec![1]);
    }

    #[test]
    fn rejects_malformed_lineage() {
        let mut scene = MultiScaleScene::new();
        let c0 = root_cam();
        let mut bad_root = plane_layer(&c0, None, 4.0);
        bad_root.parent_layer = Some(0);
        assert!(matches!(scene.add_layer(bad_root), Err(SceneError::RootWithParent)));
        scene.add_layer(plane_layer(&c0, None, 4.0)).unwrap();
        let c1 = zoomed(&c0, 8.0, 4.0, 4.0);
        let mut self_parent = plane_layer(&c1, Some((&c0, 0, 0)), 4.0);
        self_parent.parent_layer = Some(1);
        assert!(matches!(scene.add_layer(self_parent), Err(SceneError::UnknownLayer(1))));
        let mut skip = plane_layer(&c1, Some((&c0, 0, 0)), 4.0);
        skip.scale_index = 2;
        assert!(matches!(scene.add_layer(skip), Err(SceneError::ScaleIndex { .. })));
        let widen = zoomed(&c0, 0.5, 4.0, 4.0);
        let mut wide = plane_layer(&widen, None, 4.0);
        wide.parent_layer = Some(0);
        wide.scale_index = 1;
        assert!(matches!(scene.add_layer(wide), Err(SceneError::NotZoomIn { .. })));
        assert_eq!(scene.layer_count(), 1);
    }

    #[test]
    fn child_bound_formula_and_frustum() {
        let c0 = Camera::looking_down_z(1024.0, 1024.0, 16, 16).unwrap();
        let mut scene = MultiScaleScene::new();
        scene.add_layer(plane_layer(&c0, None, 8.0)).unwrap();
        let c1 = zoomed(&c0, 8.0, 8.0, 8.0);
        let n = scene.assign_child_bounds(0, &c1).unwrap();
        // the child sees the central 2x2 block of parent pixels
        assert_eq!(n, 4);
        let assigned: Vec<_> = scene.layer(0).unwrap().surfels().iter().filter_map(|s| s.bounds().child()).collect();
        for c in assigned {
            assert!((c - 8.0 / 8192.0).abs() < 1e-15);
            assert!((c - 9.765625e-4).abs() < 1e-10);
        }
        assert!(matches!(scene.assign_child_bounds(3, &c1), Err(SceneError::UnknownLayer(3))));
    }

    #[test]
    fn child_bounds_are_write_once() {
        let c0 = Camera::looking_down_z(1024.0, 1024.0, 16, 16).unwrap();
        let mut scene = MultiScaleScene::new();
        scene.add_layer(plane_layer(&c0, None, 8.0)).unwrap();
        let first = zoomed(&c0, 8.0, 8.0, 8.0);
        assert_eq!(scene.assign_child_bounds(0, &first).unwrap(), 4);
        let before: Vec<_> = scene.layer(0).unwrap().surfels().iter().map(|s| s.bounds().child()).collect();
        // overlapping sibling at a different zoom
        let second = zoomed(&c0, 4.0, 8.0, 8.0);
        let n = scene.assign_child_bounds(0, &second).unwrap();
        assert_eq!(n, 16 - 4);
        let after: Vec<_> = scene.layer(0).unwrap().surfels().iter().map(|s| s.bounds().child()).collect();
        for (b, a) in before.iter().zip(&after) {
            if b.is_some() {
                assert_eq!(b, a);
            }
        }
    }

    #[test]
    fn snapshots_are_isolated() {
        let shared = SharedScene::new(MultiScaleScene::new());
        let c0 = root_cam();
        shared.update(|s| s.add_layer(plane_layer(&c0, None, 4.0))).unwrap();
        let a = shared.snapshot();
        let b = shared.snapshot();
        assert_eq!(a.version(), b.version());
        let c1 = zoomed(&c0, 8.0, 4.0, 4.0);
        shared
            .update(|s| {
                s.assign_child_bounds(0, &c1)?;
                s.add_layer(plane_layer(&c1, Some((&c0, 0, 0)), 4.0))
            })
            .unwrap();
        assert_eq!(a.layer_count(), 1);
        assert!(a.layer(0).unwrap().surfels().iter().all(|s| s.bounds().child().is_none()));
        assert_eq!(shared.snapshot().layer_count(), 2);
        assert!(shared.snapshot().version() > a.version());
    }

    #[test]
    fn failed_update_publishes_nothing() {
        let shared = SharedScene::new(MultiScaleScene::new());
        let before = shared.version();
        let r: Result<(), SceneError> = shared.update(|s| {
            s.add_layer(plane_layer(&root_cam(), None, 4.0))?;
            Err(SceneError::MissingParent)
        });
        assert!(r.is_err());
        assert_eq!(shared.version(), before);
        assert_eq!(shared.snapshot().layer_count(), 0);
    }

    #[test]
    fn covariance_of_fronto_parallel_disk() {
        let s = Surfel::new(
            Vector3::zeros(),
            [1.0, 0.0, 0.0, 0.0],
            [0.2, 0.1],
            1.0,
            [0.0; 3],
            ScaleBounds::new(1.0, None, None).unwrap(),
        );
        let cov = s.covariance();
        assert!((cov[(0, 0)] - 0.04).abs() < 1e-15);
        assert!((cov[(1, 1)] - 0.01).abs() < 1e-15);
        assert!((cov[(2, 2)] - 1e-6).abs() < 1e-18);
    }
}

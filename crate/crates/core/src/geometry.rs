//! Pinhole cameras, rigid transforms, depth maps and normal estimation.
//!
//! Conventions used throughout the crate:
//! - the camera pose is the world-to-camera transform, `x_cam = R * x_world + t`;
//! - the camera looks down `+z`, image `u` grows along `+x` and `v` along `+y`;
//! - depth is the camera-frame `z` coordinate, not the ray length;
//! - pixel `(i, j)` covers `[i, i+1) x [j, j+1)`, so its center is `(i + 0.5, j + 0.5)`.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::{Matrix3, Matrix4, Rotation3, UnitQuaternion, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Depths at or below this are treated as behind the camera.
pub const NEAR_EPS: f64 = 1e-9;

const ORTHONORMAL_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("camera rotation is not orthonormal with determinant +1")]
    NotRigid,
    #[error("bottom row of the pose must be [0, 0, 0, 1]")]
    NotAffine,
    #[error("invalid intrinsics: {0}")]
    Intrinsics(String),
    #[error("depth must be positive and finite, got {0}")]
    NonPositiveDepth(f64),
    #[error("depth map is {got_w}x{got_h}, expected {want_w}x{want_h}")]
    DimensionMismatch {
        got_w: u32,
        got_h: u32,
        want_w: u32,
        want_h: u32,
    },
    #[error("depth file: {0}")]
    Format(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> GeometryError + '_ {
    move |source| GeometryError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// A pinhole camera with a rigid world-to-camera pose.
#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pose: Matrix4<f64>,
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: u32,
    height: u32,
}

impl Camera {
    /// Builds a camera with the principal point at the image center.
    pub fn new(
        pose: Matrix4<f64>,
        fx: f64,
        fy: f64,
        width: u32,
        height: u32,
    ) -> Result<Self, GeometryError> {
        Self::with_principal_point(
            pose,
            fx,
            fy,
            f64::from(width) / 2.0,
            f64::from(height) / 2.0,
            width,
            height,
        )
    }

    pub fn with_principal_point(
        pose: Matrix4<f64>,
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: u32,
        height: u32,
    ) -> Result<Self, GeometryError> {
        if !(fx > 0.0 && fx.is_finite() && fy > 0.0 && fy.is_finite()) {
            return Err(GeometryError::Intrinsics(format!(
                "focal lengths must be positive, got fx={fx} fy={fy}"
            )));
        }
        if width == 0 || height == 0 {
            return Err(GeometryError::Intrinsics(format!(
                "image size must be at least 1x1, got {width}x{height}"
            )));
        }
        if !(cx.is_finite() && cy.is_finite()) {
            return Err(GeometryError::Intrinsics("non-finite principal point".into()));
        }
        validate_pose(&pose)?;
        Ok(Self {
            pose,
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        })
    }

    /// Identity pose looking down world `+z`.
    pub fn looking_down_z(fx: f64, fy: f64, width: u32, height: u32) -> Result<Self, GeometryError> {
        Self::new(Matrix4::identity(), fx, fy, width, height)
    }

    pub fn pose(&self) -> &Matrix4<f64> {
        &self.pose
    }

    /// Pose as 16 numbers in row-major order.
    pub fn pose_row_major(&self) -> [f64; 16] {
        let mut out = [0.0; 16];
        for r in 0..4 {
            for c in 0..4 {
                out[r * 4 + c] = self.pose[(r, c)];
            }
        }
        out
    }

    pub fn fx(&self) -> f64 {
        self.fx
    }
    pub fn fy(&self) -> f64 {
        self.fy
    }
    pub fn cx(&self) -> f64 {
        self.cx
    }
    pub fn cy(&self) -> f64 {
        self.cy
    }
    pub fn width(&self) -> u32 {
        self.width
    }
    pub fn height(&self) -> u32 {
        self.height
    }

    /// Geometric-mean focal length `sqrt(fx * fy)`.
    pub fn mean_focal(&self) -> f64 {
        (self.fx * self.fy).sqrt()
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.pose.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.pose.fixed_view::<3, 1>(0, 3).into_owned()
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation().transpose() * self.translation())
    }

    pub fn world_to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation() * p + self.translation()
    }

    pub fn camera_to_world(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation().transpose() * (p - self.translation())
    }

    /// Same camera with different intrinsics.
    pub fn with_intrinsics(&self, fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self, GeometryError> {
        Self::with_principal_point(self.pose, fx, fy, cx, cy, self.width, self.height)
    }

    /// Same camera with a different image size; intrinsics are kept as-is.
    pub fn with_size(&self, width: u32, height: u32) -> Result<Self, GeometryError> {
        Self::with_principal_point(self.pose, self.fx, self.fy, self.cx, self.cy, width, height)
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }
}

fn validate_pose(pose: &Matrix4<f64>) -> Result<(), GeometryError> {
    if pose.iter().any(|v| !v.is_finite()) {
        return Err(GeometryError::NotRigid);
    }
    let bottom = [pose[(3, 0)], pose[(3, 1)], pose[(3, 2)], pose[(3, 3)]];
    if bottom != [0.0, 0.0, 0.0, 1.0] {
        return Err(GeometryError::NotAffine);
    }
    let r: Matrix3<f64> = pose.fixed_view::<3, 3>(0, 0).into_owned();
    let gram = r.transpose() * r;
    if (gram - Matrix3::identity()).amax() > ORTHONORMAL_TOL
        || (r.determinant() - 1.0).abs() > ORTHONORMAL_TOL
    {
        return Err(GeometryError::NotRigid);
    }
    Ok(())
}

/// Builds a world-to-camera pose from a camera-to-world rotation and camera center.
pub fn pose_from_center(cam_to_world: &Rotation3<f64>, center: &Vector3<f64>) -> Matrix4<f64> {
    let r = cam_to_world.matrix().transpose();
    let t = -(r * center);
    let mut pose = Matrix4::identity();
    pose.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
    pose.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
    pose
}

/// JSON camera schema shared by pose files and the wire protocol.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct CameraSpec {
    pub pose: Vec<f64>,
    pub fx: f64,
    pub fy: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cx: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cy: Option<f64>,
    pub w: u32,
    pub h: u32,
}

impl CameraSpec {
    pub fn to_camera(&self) -> Result<Camera, GeometryError> {
        if self.pose.len() != 16 {
            return Err(GeometryError::Intrinsics(format!(
                "pose must have 16 entries, got {}",
                self.pose.len()
            )));
        }
        let pose = Matrix4::from_row_slice(&self.pose);
        Camera::with_principal_point(
            pose,
            self.fx,
            self.fy,
            self.cx.unwrap_or(f64::from(self.w) / 2.0),
            self.cy.unwrap_or(f64::from(self.h) / 2.0),
            self.w,
            self.h,
        )
    }
}

impl From<&Camera> for CameraSpec {
    fn from(c: &Camera) -> Self {
        Self {
            pose: c.pose_row_major().to_vec(),
            fx: c.fx,
            fy: c.fy,
            cx: Some(c.cx),
            cy: Some(c.cy),
            w: c.width,
            h: c.height,
        }
    }
}

/// Result of projecting a world point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub pixel: Vector2<f64>,
    pub depth: f64,
    pub behind: bool,
}

pub fn project(point: &Vector3<f64>, camera: &Camera) -> Projection {
    let pc = camera.world_to_camera(point);
    project_camera_frame(&pc, camera)
}

pub(crate) fn project_camera_frame(pc: &Vector3<f64>, camera: &Camera) -> Projection {
    let z = pc.z;
    if z <= NEAR_EPS {
        return Projection {
            pixel: Vector2::new(f64::NAN, f64::NAN),
            depth: z,
            behind: true,
        };
    }
    Projection {
        pixel: Vector2::new(
            camera.fx * pc.x / z + camera.cx,
            camera.fy * pc.y / z + camera.cy,
        ),
        depth: z,
        behind: false,
    }
}

pub fn back_project(
    pixel: &Vector2<f64>,
    depth: f64,
    camera: &Camera,
) -> Result<Vector3<f64>, GeometryError> {
    if !(depth > 0.0 && depth.is_finite()) {
        return Err(GeometryError::NonPositiveDepth(depth));
    }
    Ok(camera.camera_to_world(&back_project_camera_frame(pixel, depth, camera)))
}

pub(crate) fn back_project_camera_frame(pixel: &Vector2<f64>, depth: f64, camera: &Camera) -> Vector3<f64> {
    Vector3::new(
        (pixel.x - camera.cx) / camera.fx * depth,
        (pixel.y - camera.cy) / camera.fy * depth,
        depth,
    )
}

/// Center of pixel `(i, j)` in continuous pixel coordinates.
pub fn pixel_center(i: u32, j: u32) -> Vector2<f64> {
    Vector2::new(f64::from(i) + 0.5, f64::from(j) + 0.5)
}

/// Rotation matrix of a (not necessarily normalized) quaternion `[w, x, y, z]`.
pub fn quat_to_rotation(q: &[f64; 4]) -> Matrix3<f64> {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Unit quaternion `[w, x, y, z]` of a rotation matrix, with `w >= 0`.
pub fn rotation_to_quat(r: &Matrix3<f64>) -> [f64; 4] {
    let uq = UnitQuaternion::from_matrix(r);
    let q = uq.quaternion();
    let mut out = [q.w, q.i, q.j, q.k];
    if out[0] < 0.0 {
        out.iter_mut().for_each(|v| *v = -*v);
    }
    out
}

/// Quaternion rotating `+z` onto the unit vector `n`.
pub fn quat_z_to(n: &Vector3<f64>) -> [f64; 4] {
    let z = Vector3::z();
    match UnitQuaternion::rotation_between(&z, n) {
        Some(uq) => {
            let q = uq.quaternion();
            [q.w, q.i, q.j, q.k]
        }
        // antiparallel: half turn about x
        None => [0.0, 1.0, 0.0, 0.0],
    }
}

/// Per-pixel depth along the optical axis with a validity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    width: u32,
    height: u32,
    values: Vec<f64>,
    valid: Vec<bool>,
}

impl DepthMap {
    /// All-invalid map.
    pub fn empty(width: u32, height: u32) -> Self {
        let n = width as usize * height as usize;
        Self {
            width,
            height,
            values: vec![0.0; n],
            valid: vec![false; n],
        }
    }

    /// Builds a map from raw values; non-finite or non-positive values are invalid.
    pub fn from_values(width: u32, height: u32, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), width as usize * height as usize);
        let valid = values.iter().map(|d| d.is_finite() && *d > 0.0).collect();
        Self {
            width,
            height,
            values,
            valid,
        }
    }

    pub fn constant(width: u32, height: u32, depth: f64) -> Self {
        Self::from_values(width, height, vec![depth; width as usize * height as usize])
    }

    pub fn from_fn(width: u32, height: u32, f: impl Fn(u32, u32) -> Option<f64>) -> Self {
        let mut map = Self::empty(width, height);
        for j in 0..height {
            for i in 0..width {
                if let Some(d) = f(i, j) {
                    map.set(i, j, d);
                }
            }
        }
        map
    }

    pub fn width(&self) -> u32 {
        self.width
    }
    pub fn height(&self) -> u32 {
        self.height
    }
    pub fn len(&self) -> usize {
        self.values.len()
    }
    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    #[inline]
    pub fn index(&self, i: u32, j: u32) -> usize {
        j as usize * self.width as usize + i as usize
    }

    pub fn get(&self, i: u32, j: u32) -> Option<f64> {
        let k = self.index(i, j);
        self.valid[k].then_some(self.values[k])
    }

    pub fn get_index(&self, k: usize) -> Option<f64> {
        self.valid[k].then_some(self.values[k])
    }

    /// Sets a depth; invalid values clear the pixel.
    pub fn set(&mut self, i: u32, j: u32, depth: f64) {
        let k = self.index(i, j);
        self.set_index(k, depth);
    }

    pub fn set_index(&mut self, k: usize, depth: f64) {
        if depth.is_finite() && depth > 0.0 {
            self.values[k] = depth;
            self.valid[k] = true;
        } else {
            self.values[k] = 0.0;
            self.valid[k] = false;
        }
    }

    pub fn invalidate(&mut self, k: usize) {
        self.values[k] = 0.0;
        self.valid[k] = false;
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
    pub fn validity(&self) -> &[bool] {
        &self.valid
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    pub fn check_dims(&self, camera: &Camera) -> Result<(), GeometryError> {
        if self.width != camera.width() || self.height != camera.height() {
            return Err(GeometryError::DimensionMismatch {
                got_w: self.width,
                got_h: self.height,
                want_w: camera.width(),
                want_h: camera.height(),
            });
        }
        Ok(())
    }

    /// Fills invalid pixels with the nearest valid depth (multi-source BFS,
    /// 4-connected). Returns `None` when no pixel is valid.
    pub fn fill_nearest(&self) -> Option<DepthMap> {
        let source = nearest_valid_source(self.width, self.height, &self.valid)?;
        let mut out = self.clone();
        for (k, s) in source.into_iter().enumerate() {
            if !out.valid[k] {
                out.values[k] = self.values[s];
                out.valid[k] = true;
            }
        }
        Some(out)
    }

    /// Writes the little-endian binary format: `u32 width, u32 height`, then
    /// row-major `f32` depths with 0 for invalid pixels.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 4 * self.values.len());
        out.extend_from_slice(&self.width.to_le_bytes());
        out.extend_from_slice(&self.height.to_le_bytes());
        for (v, ok) in self.values.iter().zip(&self.valid) {
            let d = if *ok { *v as f32 } else { 0.0 };
            out.extend_from_slice(&d.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, GeometryError> {
        if bytes.len() < 8 {
            return Err(GeometryError::Format("missing 8-byte header".into()));
        }
        let width = u32::from_le_bytes(bytes[0..4].try_into().unwrap());
        let height = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        let n = width as usize * height as usize;
        if bytes.len() != 8 + 4 * n {
            return Err(GeometryError::Format(format!(
                "expected {} bytes for {width}x{height}, got {}",
                8 + 4 * n,
                bytes.len()
            )));
        }
        let values = bytes[8..]
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
            .collect();
        Ok(Self::from_values(width, height, values))
    }

    pub fn save(&self, path: &Path) -> Result<(), GeometryError> {
        let mut f = fs::File::create(path).map_err(io_err(path))?;
        f.write_all(&self.to_bytes()).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self, GeometryError> {
        let bytes = fs::read(path).map_err(io_err(path))?;
        Self::from_bytes(&bytes)
    }

    /// Imports a lossless 16-bit grayscale PNG where `value = depth * scale`;
    /// zero marks invalid pixels.
    pub fn load_png16(path: &Path, scale: f64) -> Result<Self, GeometryError> {
        let img = image::open(path)
            .map_err(|e| GeometryError::Format(format!("{}: {e}", path.display())))?
            .into_luma16();
        let (w, h) = img.dimensions();
        let values = img
            .into_raw()
            .into_iter()
            .map(|v| if v == 0 { 0.0 } else { f64::from(v) / scale })
            .collect();
        Ok(Self::from_values(w, h, values))
    }

    pub fn save_png16(&self, path: &Path, scale: f64) -> Result<(), GeometryError> {
        let raw: Vec<u16> = self
            .values
            .iter()
            .zip(&self.valid)
            .map(|(d, ok)| if *ok { (d * scale).round().clamp(0.0, 65535.0) as u16 } else { 0 })
            .collect();
        let img = image::ImageBuffer::<image::Luma<u16>, _>::from_raw(self.width, self.height, raw)
            .expect("buffer size matches dimensions");
        img.save(path)
            .map_err(|e| GeometryError::Format(format!("{}: {e}", path.display())))
    }

    /// Loads `.png` as 16-bit depth, anything else as the binary format.
    pub fn load_any(path: &Path, png_scale: f64) -> Result<Self, GeometryError> {
        let is_png = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if is_png {
            Self::load_png16(path, png_scale)
        } else {
            Self::load(path)
        }
    }
}

/// For each pixel, the index of the nearest valid pixel in BFS order.
pub(crate) fn nearest_valid_source(width: u32, height: u32, valid: &[bool]) -> Option<Vec<usize>> {
    use std::collections::VecDeque;
    let (w, h) = (width as usize, height as usize);
    let mut src = vec![usize::MAX; w * h];
    let mut queue = VecDeque::new();
    for (k, ok) in valid.iter().enumerate() {
        if *ok {
            src[k] = k;
            queue.push_back(k);
        }
    }
    if queue.is_empty() {
        return None;
    }
    while let Some(k) = queue.pop_front() {
        let (i, j) = (k % w, k / w);
        let mut visit = |n: usize| {
            if src[n] == usize::MAX {
                src[n] = src[k];
                queue.push_back(n);
            }
        };
        if i > 0 {
            visit(k - 1);
        }
        if i + 1 < w {
            visit(k + 1);
        }
        if j > 0 {
            visit(k - w);
        }
        if j + 1 < h {
            visit(k + w);
        }
    }
    Some(src)
}

/// World-space unit normals, one per pixel.
#[derive(Clone, Debug)]
pub struct NormalMap {
    pub width: u32,
    pub height: u32,
    pub normals: Vec<Vector3<f64>>,
}

impl NormalMap {
    pub fn get(&self, i: u32, j: u32) -> Vector3<f64> {
        self.normals[j as usize * self.width as usize + i as usize]
    }
}

/// Estimates per-pixel normals from central differences of back-projected
/// neighbors (one-sided at borders and next to invalid pixels). Normals face
/// the camera; pixels without a usable neighbor in both image directions get
/// the camera-facing fallback `-ray`.
pub fn normals_from_depth(depth: &DepthMap, camera: &Camera) -> NormalMap {
    let (w, h) = (depth.width, depth.height);
    let r_t = camera.rotation().transpose();
    let points: Vec<Option<Vector3<f64>>> = (0..h)
        .flat_map(|j| (0..w).map(move |i| (i, j)))
        .map(|(i, j)| {
            depth
                .get(i, j)
                .map(|d| back_project_camera_frame(&pixel_center(i, j), d, camera))
        })
        .collect();
    let at = |i: i64, j: i64| -> Option<Vector3<f64>> {
        if i < 0 || j < 0 || i >= i64::from(w) || j >= i64::from(h) {
            None
        } else {
            points[j as usize * w as usize + i as usize]
        }
    };
    let diff = |i: i64, j: i64, di: i64, dj: i64| -> Option<Vector3<f64>> {
        let c = at(i, j)?;
        match (at(i + di, j + dj), at(i - di, j - dj)) {
            (Some(a), Some(b)) => Some(a - b),
            (Some(a), None) => Some(a - c),
            (None, Some(b)) => Some(c - b),
            (None, None) => None,
        }
    };

    let mut normals = Vec::with_capacity(points.len());
    for j in 0..h {
        for i in 0..w {
            let ray = back_project_camera_frame(&pixel_center(i, j), 1.0, camera).normalize();
            let fallback = -ray;
            let (ii, jj) = (i64::from(i), i64::from(j));
            let n = match (diff(ii, jj, 1, 0), diff(ii, jj, 0, 1)) {
                (Some(du), Some(dv)) => {
                    let n = du.cross(&dv);
                    let len = n.norm();
                    if len > 0.0 && len.is_finite() {
                        let n = n / len;
                        if n.dot(&ray) > 0.0 {
                            -n
                        } else {
                            n
                        }
                    } else {
                        fallback
                    }
                }
                _ => fallback,
            };
            normals.push(r_t * n);
        }
    }
    NormalMap {
        width: w,
        height: h,
        normals,
    }
}

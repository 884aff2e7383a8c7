//! Binary scene files and JSON layer manifests.
//!
//! Layout, all little-endian without padding:
//!
//! ```text
//! "WZSC" | version u32 = 1 | layer count u32
//! per layer:
//!   scale_index u32 | parent i32 (-1 = none) | prompt length u32 | prompt UTF-8
//!   pose 16 x f64 (row-major world-to-camera) | fx f64 | fy f64 | cx f64 | cy f64
//!   width u32 | height u32 | surfel count u64
//!   per surfel, 16 x f32:
//!     position 3 | rotation 4 (w, x, y, z) | scale 2 | opacity | color 3
//!     native | parent (NaN = none) | child (NaN = none)
//! ```

use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix4, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Camera, CameraSpec, GeometryError};
use crate::modulation::ScaleBounds;
use crate::scene::{MultiScaleScene, ScaleLayer, SceneError, Surfel};

pub const MAGIC: [u8; 4] = *b"WZSC";
pub const FORMAT_VERSION: u32 = 1;
pub const FILE_HEADER_BYTES: usize = 12;
/// Layer header size without the prompt bytes.
pub const LAYER_HEADER_BYTES: usize = 4 + 4 + 4 + 16 * 8 + 4 * 8 + 4 + 4 + 8;
pub const SURFEL_BYTES: usize = 16 * 4;

#[derive(Debug, Error)]
pub enum SceneIoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("not a scene file (magic {0:02x?})")]
    BadMagic([u8; 4]),
    #[error("unsupported scene format version {0}")]
    UnsupportedVersion(u32),
    #[error("file ends inside {}", match .layer { Some(l) => format!("{} of layer {l}", .what), None => .what.to_string() })]
    Truncated { layer: Option<usize>, what: &'static str },
    #[error("{0} unexpected bytes after the last layer")]
    TrailingBytes(usize),
    #[error("layer {layer}: {msg}")]
    Malformed { layer: usize, msg: String },
    #[error("scene invariant violated: {0}")]
    Invariant(#[from] SceneError),
}

/// Serializes `scene` to the binary layout.
pub fn encode_scene(scene: &MultiScaleScene) -> Vec<u8> {
    let surfels: usize = scene.surfel_count();
    let prompts: usize = scene.layers().map(|l| l.prompt.len()).sum();
    let mut out = Vec::with_capacity(
        FILE_HEADER_BYTES + scene.layer_count() * LAYER_HEADER_BYTES + prompts + surfels * SURFEL_BYTES,
    );
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(scene.layer_count() as u32).to_le_bytes());
    for layer in scene.layers() {
        out.extend_from_slice(&layer.scale_index.to_le_bytes());
        let parent = layer.parent_layer.map_or(-1, |p| p as i32);
        out.extend_from_slice(&parent.to_le_bytes());
        out.extend_from_slice(&(layer.prompt.len() as u32).to_le_bytes());
        out.extend_from_slice(layer.prompt.as_bytes());
        let cam = &layer.creation_camera;
        for v in cam.pose_row_major().into_iter().chain([cam.fx(), cam.fy(), cam.cx(), cam.cy()]) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&cam.width().to_le_bytes());
        out.extend_from_slice(&cam.height().to_le_bytes());
        out.extend_from_slice(&(layer.len() as u64).to_le_bytes());
        for s in layer.surfels() {
            let b = s.bounds();
            let fields = [
                s.position.x,
                s.position.y,
                s.position.z,
                s.rotation[0],
                s.rotation[1],
                s.rotation[2],
                s.rotation[3],
                s.scale[0],
                s.scale[1],
                s.opacity,
                s.color[0],
                s.color[1],
                s.color[2],
                b.native(),
                b.parent().unwrap_or(f64::NAN),
                b.child().unwrap_or(f64::NAN),
            ];
            for v in fields {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, layer: Option<usize>, what: &'static str) -> Result<&'a [u8], SceneIoError> {
        if self.bytes.len() - self.pos < n {
            return Err(SceneIoError::Truncated { layer, what });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self, layer: Option<usize>, what: &'static str) -> Result<[u8; N], SceneIoError> {
        Ok(self.take(N, layer, what)?.try_into().expect("length checked"))
    }

    fn u32(&mut self, layer: Option<usize>, what: &'static str) -> Result<u32, SceneIoError> {
        self.array(layer, what).map(u32::from_le_bytes)
    }

    fn f64(&mut self, layer: Option<usize>, what: &'static str) -> Result<f64, SceneIoError> {
        self.array(layer, what).map(f64::from_le_bytes)
    }
}

fn optional(v: f32) -> Option<f64> {
    (!v.is_nan()).then_some(f64::from(v))
}

/// Parses and validates a scene produced by [`encode_scene`].
pub fn decode_scene(bytes: &[u8]) -> Result<MultiScaleScene, SceneIoError> {
    let mut r = Reader { bytes, pos: 0 };
    let magic: [u8; 4] = r.array(None, "file header")?;
    if magic != MAGIC {
        return Err(SceneIoError::BadMagic(magic));
    }
    let version = r.u32(None, "file header")?;
    if version != FORMAT_VERSION {
        return Err(SceneIoError::UnsupportedVersion(version));
    }
    let count = r.u32(None, "file header")? as usize;
    let mut layers = Vec::with_capacity(count.min(1024));
    for li in 0..count {
        let at = Some(li);
        let malformed = |msg: String| SceneIoError::Malformed { layer: li, msg };
        let scale_index = r.u32(at, "layer header")?;
        let parent = i32::from_le_bytes(r.array(at, "layer header")?);
        let parent_layer = match parent {
            -1 => None,
            p if p >= 0 => Some(p as usize),
            p => return Err(malformed(format!("parent index {p}"))),
        };
        let prompt_len = r.u32(at, "layer header")? as usize;
        let prompt = std::str::from_utf8(r.take(prompt_len, at, "layer prompt")?)
            .map_err(|e| malformed(format!("prompt is not UTF-8: {e}")))?
            .to_string();
        let mut pose = [0.0; 16];
        for v in &mut pose {
            *v = r.f64(at, "layer camera")?;
        }
        let (fx, fy, cx, cy) = (
            r.f64(at, "layer camera")?,
            r.f64(at, "layer camera")?,
            r.f64(at, "layer camera")?,
            r.f64(at, "layer camera")?,
        );
        let (w, h) = (r.u32(at, "layer camera")?, r.u32(at, "layer camera")?);
        let camera = Camera::with_principal_point(Matrix4::from_row_slice(&pose), fx, fy, cx, cy, w, h)
            .map_err(|e: GeometryError| malformed(e.to_string()))?;
        let n = u64::from_le_bytes(r.array(at, "layer header")?);
        let block_len = usize::try_from(n)
            .ok()
            .and_then(|n| n.checked_mul(SURFEL_BYTES))
            .ok_or_else(|| malformed(format!("surfel count {n}")))?;
        let block = r.take(block_len, at, "surfel block")?;
        let surfels = block
            .chunks_exact(SURFEL_BYTES)
            .enumerate()
            .map(|(si, rec)| {
                let f: Vec<f32> = rec.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect();
                let d = |k: usize| f64::from(f[k]);
                let bounds = ScaleBounds::new(d(13), optional(f[14]), optional(f[15]))
                    .map_err(|e| malformed(format!("surfel {si}: {e}")))?;
                Ok(Surfel::new(
                    Vector3::new(d(0), d(1), d(2)),
                    [d(3), d(4), d(5), d(6)],
                    [d(7), d(8)],
                    d(9),
                    [d(10), d(11), d(12)],
                    bounds,
                ))
            })
            .collect::<Result<Vec<_>, SceneIoError>>()?;
        layers.push(ScaleLayer::new(camera, parent_layer, scale_index, prompt, surfels));
    }
    if r.pos != bytes.len() {
        return Err(SceneIoError::TrailingBytes(bytes.len() - r.pos));
    }
    Ok(MultiScaleScene::from_parts(layers)?)
}

/// Writes `scene` atomically (temporary file, then rename). Returns the byte
/// count.
pub fn save_scene(scene: &MultiScaleScene, path: &Path) -> Result<u64, SceneIoError> {
    let bytes = encode_scene(scene);
    let io = |source| SceneIoError::Io {
        path: path.to_path_buf(),
        source,
    };
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io)?;
    tmp.write_all(&bytes).map_err(io)?;
    tmp.as_file().sync_all().map_err(io)?;
    tmp.persist(path).map_err(|e| io(e.error))?;
    Ok(bytes.len() as u64)
}

pub fn load_scene(path: &Path) -> Result<MultiScaleScene, SceneIoError> {
    let bytes = std::fs::read(path).map_err(|source| SceneIoError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_scene(&bytes)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerManifest {
    pub index: usize,
    pub parent: Option<usize>,
    pub scale_index: u32,
    pub prompt: String,
    pub surfels: usize,
    pub children: Vec<usize>,
    pub camera: CameraSpec,
}

/// Layer list for viewers and tooling.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneManifest {
    pub version: u64,
    pub surfels: usize,
    pub layers: Vec<LayerManifest>,
}

pub fn manifest(scene: &MultiScaleScene) -> SceneManifest {
    SceneManifest {
        version: scene.version(),
        surfels: scene.surfel_count(),
        layers: scene
            .layers()
            .enumerate()
            .map(|(index, l)| LayerManifest {
                index,
                parent: l.parent_layer,
                scale_index: l.scale_index,
                prompt: l.prompt.clone(),
                surfels: l.len(),
                children: scene.children(index),
                camera: CameraSpec::from(&l.creation_camera),
            })
            .collect(),
    }
}

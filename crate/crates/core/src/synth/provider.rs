//! The detail-provider boundary and its two stock implementations.

use std::path::{Path, PathBuf};
use std::process::Command;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::geometry::{nearest_valid_source, CameraSpec, DepthMap, GeometryError};
use crate::geometry::Camera;
use crate::imaging::{Image, ImageError, Mask};
use crate::raster::Frame;

/// Environment variable naming the provider work directory for subprocesses.
pub const WORKDIR_ENV: &str = "SCALESPLAT_WORKDIR";

#[derive(Debug, Error)]
pub enum ProviderError {
    #[error("provider does not implement {0}")]
    Unsupported(&'static str),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("provider command `{command}` failed ({status}): {stderr}")]
    Command {
        command: String,
        status: String,
        stderr: String,
    },
    #[error("provider output: {0}")]
    Output(String),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Depth(#[from] GeometryError),
}

/// Everything a provider sees when asked for a fine view.
#[derive(Clone, Copy, Debug)]
pub struct DetailInput<'a> {
    pub coarse: &'a Frame,
    pub context: &'a str,
    pub prompt: &'a str,
    pub seed: u64,
    pub camera: &'a Camera,
    pub zoom_factor: f64,
}

#[derive(Clone, Debug)]
pub struct DetailOutput {
    pub image: Image,
    pub depth: Option<DepthMap>,
}

/// A partially covered auxiliary view to be completed.
#[derive(Clone, Copy, Debug)]
pub struct AuxInput<'a> {
    pub index: usize,
    pub conditioning: &'a Frame,
    /// Pixels that need content.
    pub mask: &'a Mask,
    pub prompt: &'a str,
    pub seed: u64,
    pub camera: &'a Camera,
}

/// Source of fine detail for a zoomed view: super-resolution, editing,
/// semantic context and view completion behind one interface.
pub trait DetailProvider: Send + Sync {
    fn name(&self) -> &str;

    /// Whether [`DetailOutput::depth`] may be filled.
    fn supplies_depth(&self) -> bool;

    /// Whether [`DetailProvider::fill_aux`] is implemented.
    fn supplies_aux_views(&self) -> bool {
        false
    }

    /// Whether [`DetailProvider::context`] wants the parent-scale render.
    fn supplies_context(&self) -> bool {
        false
    }

    fn context(&self, _parent_view: &Frame) -> Result<String, ProviderError> {
        Ok(String::new())
    }

    fn detail(&self, input: &DetailInput<'_>) -> Result<DetailOutput, ProviderError>;

    fn fill_aux(&self, _input: &AuxInput<'_>) -> Result<Image, ProviderError> {
        Err(ProviderError::Unsupported("auxiliary view fills"))
    }
}

/// Seed for all procedural randomness of one request.
pub fn derive_seed(domain: &str, seed: u64, prompt: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(domain.as_bytes());
    h.update([0]);
    h.update(seed.to_le_bytes());
    h.update(prompt.as_bytes());
    h.finalize().into()
}

/// Bilinear value noise with smoothstep easing on a square lattice.
struct ValueNoise {
    cell: f64,
    gw: usize,
    values: Vec<f64>,
}

impl ValueNoise {
    fn new(rng: &mut impl Rng, width: u32, height: u32, cell: f64) -> Self {
        let gw = (f64::from(width) / cell).ceil() as usize + 2;
        let gh = (f64::from(height) / cell).ceil() as usize + 2;
        let values = (0..gw * gh).map(|_| rng.gen_range(-1.0..=1.0)).collect();
        Self { cell, gw, values }
    }

    fn sample(&self, x: f64, y: f64) -> f64 {
        let (gx, gy) = (x / self.cell, y / self.cell);
        let (i0, j0) = (gx.floor(), gy.floor());
        let ease = |t: f64| t * t * (3.0 - 2.0 * t);
        let (tx, ty) = (ease(gx - i0), ease(gy - j0));
        let (i0, j0) = (i0 as usize, j0 as usize);
        let v = |i: usize, j: usize| self.values[j * self.gw + i];
        let top = v(i0, j0) * (1.0 - tx) + v(i0 + 1, j0) * tx;
        let bottom = v(i0, j0 + 1) * (1.0 - tx) + v(i0 + 1, j0 + 1) * tx;
        top * (1.0 - ty) + bottom * ty
    }
}

/// Sum of `octaves` value-noise layers sampled at pixel centers; octave `k`
/// has cell size `base_cell / 2^k` (at least one pixel) and amplitude `2^-k`.
pub fn octave_noise(rng: &mut impl Rng, width: u32, height: u32, base_cell: f64, octaves: u32) -> Vec<f64> {
    let layers: Vec<ValueNoise> = (0..octaves)
        .map(|k| ValueNoise::new(rng, width, height, (base_cell / f64::from(1u32 << k)).max(1.0)))
        .collect();
    let mut out = Vec::with_capacity(width as usize * height as usize);
    for j in 0..height {
        for i in 0..width {
            let (x, y) = (f64::from(i) + 0.5, f64::from(j) + 0.5);
            let mut amp = 1.0;
            let mut v = 0.0;
            for layer in &layers {
                v += amp * layer.sample(x, y);
                amp *= 0.5;
            }
            out.push(v);
        }
    }
    out
}

/// Removes the mean of every `block`x`block` tile (aligned to the origin,
/// partial tiles at the edges), so box-downsampling by `block` yields zero.
fn subtract_block_means(field: &mut [f64], width: u32, height: u32, block: u32) {
    let (w, b) = (width as usize, block as usize);
    for bj in (0..height as usize).step_by(b) {
        for bi in (0..w).step_by(b) {
            let (j1, i1) = ((bj + b).min(height as usize), (bi + b).min(w));
            let n = ((j1 - bj) * (i1 - bi)) as f64;
            let mean: f64 = (bj..j1).flat_map(|j| (bi..i1).map(move |i| j * w + i)).map(|k| field[k]).sum::<f64>() / n;
            for j in bj..j1 {
                for i in bi..i1 {
                    field[j * w + i] -= mean;
                }
            }
        }
    }
}

/// Deterministic stand-in provider: adds seeded multi-octave noise above the
/// coarse image's resolution, and mild height noise to the coarse depth.
#[derive(Clone, Debug)]
pub struct ProceduralProvider {
    /// Amplitude of the coarsest noise octave.
    pub amplitude: f64,
    pub octaves: u32,
    /// Height-noise amplitude relative to local depth.
    pub depth_noise: f64,
    /// Weight of per-channel noise on top of the shared luminance noise.
    pub chroma: f64,
}

impl Default for ProceduralProvider {
    fn default() -> Self {
        Self {
            amplitude: 0.06,
            octaves: 4,
            depth_noise: 0.005,
            chroma: 0.25,
        }
    }
}

impl ProceduralProvider {
    /// Zero-mean detail at block size `zoom_factor`, one field per channel.
    pub fn detail_field(&self, rng: &mut impl Rng, width: u32, height: u32, zoom_factor: f64) -> Vec<[f64; 3]> {
        let block = (zoom_factor.round() as u32).max(1);
        let lum = octave_noise(rng, width, height, zoom_factor, self.octaves);
        let mut chans: Vec<Vec<f64>> = (0..3)
            .map(|_| {
                let c = octave_noise(rng, width, height, zoom_factor, self.octaves);
                lum.iter().zip(c).map(|(l, c)| self.amplitude * (l + self.chroma * c)).collect()
            })
            .collect();
        for ch in &mut chans {
            subtract_block_means(ch, width, height, block);
        }
        (0..lum.len()).map(|k| [chans[0][k], chans[1][k], chans[2][k]]).collect()
    }
}

impl DetailProvider for ProceduralProvider {
    fn name(&self) -> &str {
        "procedural"
    }

    fn supplies_depth(&self) -> bool {
        true
    }

    fn detail(&self, input: &DetailInput<'_>) -> Result<DetailOutput, ProviderError> {
        let coarse = &input.coarse.color;
        let (w, h) = (coarse.width(), coarse.height());
        let mut rng = ChaCha8Rng::from_seed(derive_seed("procedural-detail", input.seed, input.prompt));
        let field = self.detail_field(&mut rng, w, h, input.zoom_factor);
        let pixels = coarse
            .pixels()
            .iter()
            .zip(&field)
            .map(|(c, n)| [0, 1, 2].map(|k| (c[k] + n[k]).clamp(0.0, 1.0)))
            .collect();
        let image = Image::from_pixels(w, h, pixels);

        let depth = input.coarse.depth.fill_nearest().map(|filled| {
            let bumps = octave_noise(&mut rng, w, h, 2.0 * input.zoom_factor, 1);
            let values = filled
                .values()
                .iter()
                .zip(&bumps)
                .map(|(d, n)| d * (1.0 + self.depth_noise * n))
                .collect();
            DepthMap::from_values(w, h, values)
        });
        Ok(DetailOutput { image, depth })
    }
}

/// Completes masked pixels with the nearest unmasked color plus seeded noise.
pub fn procedural_fill(conditioning: &Image, mask: &Mask, seed: [u8; 32], amplitude: f64) -> Image {
    let (w, h) = (conditioning.width(), conditioning.height());
    let valid: Vec<bool> = mask.bits.iter().map(|m| !m).collect();
    let Some(src) = nearest_valid_source(w, h, &valid) else {
        return conditioning.clone();
    };
    let mut rng = ChaCha8Rng::from_seed(seed);
    let noise = octave_noise(&mut rng, w, h, 8.0, 4);
    let px = conditioning.pixels();
    let pixels = (0..px.len())
        .map(|k| {
            if valid[k] {
                px[k]
            } else {
                px[src[k]].map(|c| (c + amplitude * noise[k]).clamp(0.0, 1.0))
            }
        })
        .collect();
    Image::from_pixels(w, h, pixels)
}

/// Runs an external command that reads and writes files in a work directory.
///
/// Detail requests receive `request.json`, `coarse.png` and, when the coarse
/// render has depth, `coarse_depth.bin`; the command must write `fine.png`
/// and may write `fine_depth.bin`. Auxiliary requests receive
/// `aux_<k>_conditioning.png` and `aux_<k>_mask.png` and must write
/// `aux_<k>.png`. The command runs through `sh -c` with the work directory as
/// current directory and in [`WORKDIR_ENV`].
#[derive(Clone, Debug)]
pub struct CommandProvider {
    pub command: String,
    pub aux_views: bool,
    /// Keep work directories under this path instead of deleting them.
    pub keep_dir: Option<PathBuf>,
}

#[derive(Serialize)]
struct CommandRequest<'a> {
    task: &'a str,
    prompt: &'a str,
    seed: u64,
    context: &'a str,
    zoom_factor: f64,
    camera: CameraSpec,
    index: Option<usize>,
}

impl CommandProvider {
    pub fn new(command: impl Into<String>) -> Self {
        Self {
            command: command.into(),
            aux_views: false,
            keep_dir: None,
        }
    }

    fn workdir(&self) -> Result<tempfile::TempDir, ProviderError> {
        let dir = match &self.keep_dir {
            Some(base) => {
                std::fs::create_dir_all(base).map_err(|source| ProviderError::Io {
                    path: base.clone(),
                    source,
                })?;
                tempfile::Builder::new().prefix("provider-").tempdir_in(base)
            }
            None => tempfile::Builder::new().prefix("scalesplat-provider-").tempdir(),
        };
        let dir = dir.map_err(|source| ProviderError::Io {
            path: std::env::temp_dir(),
            source,
        })?;
        Ok(dir)
    }

    fn finish(&self, dir: tempfile::TempDir) {
        if self.keep_dir.is_some() {
            let _ = dir.keep();
        }
    }

    fn run(&self, dir: &Path, request: &CommandRequest<'_>) -> Result<(), ProviderError> {
        let json = serde_json::to_vec_pretty(request).map_err(|e| ProviderError::Output(e.to_string()))?;
        write(&dir.join("request.json"), &json)?;
        let out = Command::new("sh")
            .arg("-c")
            .arg(&self.command)
            .current_dir(dir)
            .env(WORKDIR_ENV, dir)
            .output()
            .map_err(|source| ProviderError::Io {
                path: PathBuf::from("sh"),
                source,
            })?;
        if !out.status.success() {
            return Err(ProviderError::Command {
                command: self.command.clone(),
                status: out.status.to_string(),
                stderr: String::from_utf8_lossy(&out.stderr).trim().to_string(),
            });
        }
        Ok(())
    }
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), ProviderError> {
    std::fs::write(path, bytes).map_err(|source| ProviderError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn read_image(path: &Path, w: u32, h: u32) -> Result<Image, ProviderError> {
    if !path.exists() {
        return Err(ProviderError::Output(format!("{} was not written", path.display())));
    }
    let img = Image::load(path)?;
    if (img.width(), img.height()) != (w, h) {
        return Err(ProviderError::Output(format!(
            "{} is {}x{}, expected {w}x{h}",
            path.display(),
            img.width(),
            img.height()
        )));
    }
    Ok(img)
}

impl DetailProvider for CommandProvider {
    fn name(&self) -> &str {
        "command"
    }

    fn supplies_depth(&self) -> bool {
        true
    }

    fn supplies_aux_views(&self) -> bool {
        self.aux_views
    }

    fn detail(&self, input: &DetailInput<'_>) -> Result<DetailOutput, ProviderError> {
        let dir = self.workdir()?;
        let path = dir.path();
        write(&path.join("coarse.png"), &input.coarse.color.to_png_bytes())?;
        if input.coarse.depth.valid_count() > 0 {
            write(&path.join("coarse_depth.bin"), &input.coarse.depth.to_bytes())?;
        }
        self.run(
            path,
            &CommandRequest {
                task: "detail",
                prompt: input.prompt,
                seed: input.seed,
                context: input.context,
                zoom_factor: input.zoom_factor,
                camera: CameraSpec::from(input.camera),
                index: None,
            },
        )?;
        let (w, h) = (input.camera.width(), input.camera.height());
        let image = read_image(&path.join("fine.png"), w, h)?;
        let depth_path = path.join("fine_depth.bin");
        let depth = if depth_path.exists() {
            let d = DepthMap::load(&depth_path)?;
            d.check_dims(input.camera)?;
            Some(d)
        } else {
            None
        };
        self.finish(dir);
        Ok(DetailOutput { image, depth })
    }

    fn fill_aux(&self, input: &AuxInput<'_>) -> Result<Image, ProviderError> {
        if !self.aux_views {
            return Err(ProviderError::Unsupported("auxiliary view fills"));
        }
        let dir = self.workdir()?;
        let path = dir.path();
        let k = input.index;
        write(&path.join(format!("aux_{k}_conditioning.png")), &input.conditioning.color.to_png_bytes())?;
        write(&path.join(format!("aux_{k}_mask.png")), &input.mask.to_png_bytes())?;
        self.run(
            path,
            &CommandRequest {
                task: "aux",
                prompt: input.prompt,
                seed: input.seed,
                context: "",
                zoom_factor: 1.0,
                camera: CameraSpec::from(input.camera),
                index: Some(k),
            },
        )?;
        let img = read_image(&path.join(format!("aux_{k}.png")), input.camera.width(), input.camera.height())?;
        self.finish(dir);
        Ok(img)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn coarse(w: u32, h: u32) -> Frame {
        let color = Image::from_fn(w, h, |i, j| [0.3 + 0.002 * f64::from(i), 0.5, 0.6 - 0.002 * f64::from(j)]);
        Frame {
            color,
            depth: DepthMap::constant(w, h, 2.0),
            alpha: vec![1.0; (w * h) as usize],
        }
    }

    fn input<'a>(frame: &'a Frame, cam: &'a Camera, prompt: &'a str, seed: u64) -> DetailInput<'a> {
        DetailInput {
            coarse: frame,
            context: "",
            prompt,
            seed,
            camera: cam,
            zoom_factor: 8.0,
        }
    }

    #[test]
    fn block_means_vanish() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut f = octave_noise(&mut rng, 19, 13, 8.0, 4);
        subtract_block_means(&mut f, 19, 13, 8);
        let img = Image::from_pixels(19, 13, f.iter().map(|v| [*v; 3]).collect());
        assert!(img.downsample(8).pixels().iter().all(|p| p[0].abs() < 1e-12));
    }

    #[test]
    fn procedural_is_deterministic_and_prompt_sensitive() {
        let cam = Camera::looking_down_z(64.0, 64.0, 48, 32).unwrap();
        let f = coarse(48, 32);
        let p = ProceduralProvider::default();
        let a = p.detail(&input(&f, &cam, "moss", 3)).unwrap();
        let b = p.detail(&input(&f, &cam, "moss", 3)).unwrap();
        assert_eq!(a.image, b.image);
        assert_eq!(a.depth, b.depth);
        let c = p.detail(&input(&f, &cam, "rust", 3)).unwrap();
        assert!(a.image.mean_abs_diff(&c.image) > 0.0);
        let d = a.depth.unwrap();
        assert!(d.values().iter().all(|v| (v - 2.0).abs() <= 2.0 * 0.005 + 1e-12));
    }

    #[test]
    fn noise_stays_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = octave_noise(&mut rng, 40, 40, 8.0, 4);
        assert!(f.iter().all(|v| v.abs() <= 1.875 + 1e-12));
        assert!(f.iter().any(|v| v.abs() > 0.1));
    }

    #[test]
    fn fill_keeps_unmasked_pixels() {
        let img = Image::from_fn(10, 6, |i, _| [f64::from(i) / 10.0, 0.5, 0.5]);
        let mask = Mask::from_fn(10, 6, |i, _| i >= 8);
        let out = procedural_fill(&img, &mask, [7; 32], 0.05);
        for j in 0..6 {
            for i in 0..8 {
                assert_eq!(out.get(i, j), img.get(i, j));
            }
            assert!((out.get(9, j)[1] - 0.5).abs() <= 0.05 * 1.875 + 1e-12);
        }
    }

    #[test]
    fn command_provider_round_trip() {
        let cam = Camera::looking_down_z(64.0, 64.0, 16, 12).unwrap();
        let f = coarse(16, 12);
        // the "model" copies the coarse image and leaves depth to the engine
        let p = CommandProvider::new("test -f request.json && cp coarse.png fine.png");
        let out = p.detail(&input(&f, &cam, "", 0)).unwrap();
        assert!(out.depth.is_none());
        assert!(out.image.mean_abs_diff(&f.color) < 1.0 / 255.0);

        let failing = CommandProvider::new("echo nope >&2; exit 3");
        match failing.detail(&input(&f, &cam, "", 0)) {
            Err(ProviderError::Command { stderr, .. }) => assert_eq!(stderr, "nope"),
            other => panic!("{other:?}"),
        }
        let silent = CommandProvider::new("true");
        assert!(matches!(silent.detail(&input(&f, &cam, "", 0)), Err(ProviderError::Output(_))));
    }
}

//! Linear RGB images in `[0, 1]` and PNG conversion.

use std::path::Path;

use thiserror::Error;

pub type Rgb = [f64; 3];

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("{path}: {msg}")]
    Codec { path: String, msg: String },
    #[error("image is {got_w}x{got_h}, expected {want_w}x{want_h}")]
    DimensionMismatch {
        got_w: u32,
        got_h: u32,
        want_w: u32,
        want_h: u32,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: u32,
    height: u32,
    pixels: Vec<Rgb>,
}

impl Image {
    pub fn filled(width: u32, height: u32, color: Rgb) -> Self {
        Self {
            width,
            height,
            pixels: vec![color; width as usize * height as usize],
        }
    }

    pub fn from_pixels(width: u32, height: u32, pixels: Vec<Rgb>) -> Self {
        assert_eq!(pixels.len(), width as usize * height as usize);
        Self {
            width,
            height,
            pixels,
        }
    }

    pub fn from_fn(width: u32, height: u32, f: impl Fn(u32, u32) -> Rgb) -> Self {
        let pixels = (0..height)
            .flat_map(|j| (0..width).map(move |i| (i, j)))
            .map(|(i, j)| f(i, j))
            .collect();
        Self {
            width,
            height,
            pixels,
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }
    pub fn height(&self) -> u32 {
        self.height
    }
    pub fn pixels(&self) -> &[Rgb] {
        &self.pixels
    }
    pub fn pixels_mut(&mut self) -> &mut [Rgb] {
        &mut self.pixels
    }
    pub fn len(&self) -> usize {
        self.pixels.len()
    }
    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    #[inline]
    pub fn get(&self, i: u32, j: u32) -> Rgb {
        self.pixels[j as usize * self.width as usize + i as usize]
    }

    #[inline]
    pub fn set(&mut self, i: u32, j: u32, c: Rgb) {
        let k = j as usize * self.width as usize + i as usize;
        self.pixels[k] = c;
    }

    pub fn same_size(&self, other: &Image) -> Result<(), ImageError> {
        if self.width != other.width || self.height != other.height {
            return Err(ImageError::DimensionMismatch {
                got_w: other.width,
                got_h: other.height,
                want_w: self.width,
                want_h: self.height,
            });
        }
        Ok(())
    }

    /// Mean absolute difference over all channels.
    pub fn mean_abs_diff(&self, other: &Image) -> f64 {
        assert_eq!((self.width, self.height), (other.width, other.height));
        let sum: f64 = self
            .pixels
            .iter()
            .zip(&other.pixels)
            .map(|(a, b)| (0..3).map(|c| (a[c] - b[c]).abs()).sum::<f64>())
            .sum();
        sum / (3 * self.pixels.len()) as f64
    }

    pub fn max_abs_diff(&self, other: &Image) -> f64 {
        self.pixels
            .iter()
            .zip(&other.pixels)
            .flat_map(|(a, b)| (0..3).map(move |c| (a[c] - b[c]).abs()))
            .fold(0.0, f64::max)
    }

    pub fn mse(&self, other: &Image) -> f64 {
        let sum: f64 = self
            .pixels
            .iter()
            .zip(&other.pixels)
            .map(|(a, b)| (0..3).map(|c| (a[c] - b[c]).powi(2)).sum::<f64>())
            .sum();
        sum / (3 * self.pixels.len()) as f64
    }

    /// Box-filter downsample by an integer factor; partial edge blocks average
    /// over the pixels they contain.
    pub fn downsample(&self, factor: u32) -> Image {
        let w = self.width.div_ceil(factor);
        let h = self.height.div_ceil(factor);
        Image::from_fn(w, h, |bi, bj| {
            let mut acc = [0.0; 3];
            let mut n = 0.0;
            for j in bj * factor..((bj + 1) * factor).min(self.height) {
                for i in bi * factor..((bi + 1) * factor).min(self.width) {
                    let p = self.get(i, j);
                    for c in 0..3 {
                        acc[c] += p[c];
                    }
                    n += 1.0;
                }
            }
            acc.map(|v| v / n)
        })
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        let raw: Vec<u8> = self
            .pixels
            .iter()
            .flat_map(|p| p.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8))
            .collect();
        image::RgbImage::from_raw(self.width, self.height, raw).expect("buffer matches dimensions")
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Self {
        let (w, h) = img.dimensions();
        let pixels = img
            .pixels()
            .map(|p| [0, 1, 2].map(|c| f64::from(p.0[c]) / 255.0))
            .collect();
        Self::from_pixels(w, h, pixels)
    }

    /// Encodes as an 8-bit RGB PNG.
    pub fn to_png_bytes(&self) -> Vec<u8> {
        let mut out = std::io::Cursor::new(Vec::new());
        self.to_rgb8()
            .write_to(&mut out, image::ImageFormat::Png)
            .expect("in-memory PNG encoding");
        out.into_inner()
    }

    pub fn to_jpeg_bytes(&self, quality: u8) -> Vec<u8> {
        let mut out = Vec::new();
        let enc = image::codecs::jpeg::JpegEncoder::new_with_quality(&mut out, quality);
        self.to_rgb8()
            .write_with_encoder(enc)
            .expect("in-memory JPEG encoding");
        out
    }

    pub fn from_png_bytes(bytes: &[u8]) -> Result<Self, ImageError> {
        let img = image::load_from_memory(bytes).map_err(|e| ImageError::Codec {
            path: "<memory>".into(),
            msg: e.to_string(),
        })?;
        Ok(Self::from_rgb8(&img.into_rgb8()))
    }

    pub fn save_png(&self, path: &Path) -> Result<(), ImageError> {
        self.to_rgb8().save(path).map_err(|e| ImageError::Codec {
            path: path.display().to_string(),
            msg: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, ImageError> {
        let img = image::open(path).map_err(|e| ImageError::Codec {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?;
        Ok(Self::from_rgb8(&img.into_rgb8()))
    }
}

/// Peak signal-to-noise ratio in dB for images in `[0, 1]`.
pub fn psnr(a: &Image, b: &Image) -> f64 {
    let mse = a.mse(b);
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

/// Boolean per-pixel mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub width: u32,
    pub height: u32,
    pub bits: Vec<bool>,
}

impl Mask {
    pub fn new(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            bits: vec![false; width as usize * height as usize],
        }
    }

    pub fn from_fn(width: u32, height: u32, f: impl Fn(u32, u32) -> bool) -> Self {
        let bits = (0..height)
            .flat_map(|j| (0..width).map(move |i| (i, j)))
            .map(|(i, j)| f(i, j))
            .collect();
        Self {
            width,
            height,
            bits,
        }
    }

    #[inline]
    pub fn get(&self, i: u32, j: u32) -> bool {
        self.bits[j as usize * self.width as usize + i as usize]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    /// Square (chessboard) dilation by `r` pixels.
    pub fn dilate(&self, r: u32) -> Mask {
        let (w, h) = (self.width as i64, self.height as i64);
        let r = i64::from(r);
        Mask::from_fn(self.width, self.height, |i, j| {
            let (i, j) = (i64::from(i), i64::from(j));
            (j - r..=j + r).any(|y| {
                (i - r..=i + r).any(|x| {
                    x >= 0 && y >= 0 && x < w && y < h && self.bits[(y * w + x) as usize]
                })
            })
        })
    }

    pub fn to_png_bytes(&self) -> Vec<u8> {
        let raw: Vec<u8> = self.bits.iter().map(|b| if *b { 255 } else { 0 }).collect();
        let img = image::GrayImage::from_raw(self.width, self.height, raw).expect("mask buffer");
        let mut out = std::io::Cursor::new(Vec::new());
        img.write_to(&mut out, image::ImageFormat::Png)
            .expect("in-memory PNG encoding");
        out.into_inner()
    }
}

//! Images and the exact pixel↔latent codec.
//!
//! The codec is a space-to-depth rearrangement with the affine map
//! `value / 127.5 - 1`, so `decode(encode(img)) == img` bit-exactly. It
//! stands in for a learned autoencoder while keeping the latent-sequence
//! interface identical.

use ndarray::Array3;
use std::path::Path;
use thiserror::Error;

/// Pixel normalization constant; latents are zero-centered in `[-1, 1]`.
pub const PIXEL_SCALE: f64 = 127.5;

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("image {axis} {size} is not a multiple of patch size {patch}")]
    DimensionNotMultiple {
        axis: &'static str,
        size: usize,
        patch: usize,
    },
    #[error("latent has {got} channels, expected {expected} (= 3 * patch^2)")]
    ChannelMismatch { got: usize, expected: usize },
    #[error("image dimensions {height}x{width} are invalid: {reason}")]
    BadDimensions {
        height: usize,
        width: usize,
        reason: &'static str,
    },
    #[error("unsupported PNG color type {0}: only 8-bit RGB without alpha is accepted")]
    UnsupportedColorType(String),
    #[error("png error: {0}")]
    Png(#[from] image::ImageError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// An H×W×3 grid of 8-bit pixels, row-major, channels interleaved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RasterImage {
    height: usize,
    width: usize,
    pixels: Vec<u8>,
}

impl RasterImage {
    /// Solid-color image.
    pub fn filled(height: usize, width: usize, rgb: [u8; 3]) -> Self {
        let mut pixels = Vec::with_capacity(height * width * 3);
        for _ in 0..height * width {
            pixels.extend_from_slice(&rgb);
        }
        Self {
            height,
            width,
            pixels,
        }
    }

    /// Build from a raw interleaved RGB buffer of length `height*width*3`.
    pub fn from_raw(height: usize, width: usize, pixels: Vec<u8>) -> Result<Self, RasterError> {
        if height == 0 || width == 0 {
            return Err(RasterError::BadDimensions {
                height,
                width,
                reason: "zero-sized axis",
            });
        }
        if pixels.len() != height * width * 3 {
            return Err(RasterError::BadDimensions {
                height,
                width,
                reason: "buffer length does not match H*W*3",
            });
        }
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, row: usize, col: usize) -> [u8; 3] {
        let base = (row * self.width + col) * 3;
        [
            self.pixels[base],
            self.pixels[base + 1],
            self.pixels[base + 2],
        ]
    }

    pub fn set(&mut self, row: usize, col: usize, rgb: [u8; 3]) {
        let base = (row * self.width + col) * 3;
        self.pixels[base..base + 3].copy_from_slice(&rgb);
    }

    pub fn raw(&self) -> &[u8] {
        &self.pixels
    }

    /// Mean squared error against another image of the same shape, over all
    /// channel values in pixel units.
    pub fn pixel_mse(&self, other: &RasterImage) -> f64 {
        assert_eq!(self.height, other.height);
        assert_eq!(self.width, other.width);
        let n = self.pixels.len() as f64;
        self.pixels
            .iter()
            .zip(&other.pixels)
            .map(|(&a, &b)| {
                let d = a as f64 - b as f64;
                d * d
            })
            .sum::<f64>()
            / n
    }
}

/// A rows×cols×channels grid of real-valued latent cells.
#[derive(Debug, Clone, PartialEq)]
pub struct Latent {
    pub values: Array3<f64>,
}

impl Latent {
    pub fn zeros(rows: usize, cols: usize, channels: usize) -> Self {
        Self {
            values: Array3::zeros((rows, cols, channels)),
        }
    }

    pub fn rows(&self) -> usize {
        self.values.dim().0
    }

    pub fn cols(&self) -> usize {
        self.values.dim().1
    }

    pub fn channels(&self) -> usize {
        self.values.dim().2
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Mean of squared element-wise differences.
    pub fn mean_sq_diff(&self, other: &Latent) -> f64 {
        assert_eq!(self.values.dim(), other.values.dim());
        let n = self.values.len() as f64;
        self.values
            .iter()
            .zip(other.values.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n
    }
}

/// Space-to-depth encode: cell (r, c) holds the p×p pixel block starting at
/// (r*p, c*p), scanned row-major with RGB interleaved, mapped through
/// `v/127.5 - 1`.
pub fn encode(image: &RasterImage, patch_pixels: usize) -> Result<Latent, RasterError> {
    assert!(patch_pixels > 0, "patch_pixels must be positive");
    if image.height % patch_pixels != 0 {
        return Err(RasterError::DimensionNotMultiple {
            axis: "height",
            size: image.height,
            patch: patch_pixels,
        });
    }
    if image.width % patch_pixels != 0 {
        return Err(RasterError::DimensionNotMultiple {
            axis: "width",
            size: image.width,
            patch: patch_pixels,
        });
    }
    let rows = image.height / patch_pixels;
    let cols = image.width / patch_pixels;
    let channels = 3 * patch_pixels * patch_pixels;
    let mut latent = Latent::zeros(rows, cols, channels);
    for r in 0..rows {
        for c in 0..cols {
            for dy in 0..patch_pixels {
                for dx in 0..patch_pixels {
                    let rgb = image.get(r * patch_pixels + dy, c * patch_pixels + dx);
                    let base = (dy * patch_pixels + dx) * 3;
                    for ch in 0..3 {
                        latent.values[(r, c, base + ch)] = rgb[ch] as f64 / PIXEL_SCALE - 1.0;
                    }
                }
            }
        }
    }
    Ok(latent)
}

/// Inverse of [`encode`]: inverse affine map, round half-up, clamp to
/// `[0, 255]`, then depth-to-space.
pub fn decode(latent: &Latent, patch_pixels: usize) -> Result<RasterImage, RasterError> {
    let expected = 3 * patch_pixels * patch_pixels;
    if latent.channels() != expected {
        return Err(RasterError::ChannelMismatch {
            got: latent.channels(),
            expected,
        });
    }
    let height = latent.rows() * patch_pixels;
    let width = latent.cols() * patch_pixels;
    let mut image = RasterImage::filled(height, width, [0, 0, 0]);
    for r in 0..latent.rows() {
        for c in 0..latent.cols() {
            for dy in 0..patch_pixels {
                for dx in 0..patch_pixels {
                    let base = (dy * patch_pixels + dx) * 3;
                    let mut rgb = [0u8; 3];
                    for ch in 0..3 {
                        let v = (latent.values[(r, c, base + ch)] + 1.0) * PIXEL_SCALE;
                        rgb[ch] = round_half_up_clamped(v);
                    }
                    image.set(r * patch_pixels + dy, c * patch_pixels + dx, rgb);
                }
            }
        }
    }
    Ok(image)
}

fn round_half_up_clamped(v: f64) -> u8 {
    let rounded = (v + 0.5).floor();
    rounded.clamp(0.0, 255.0) as u8
}

/// Bilinear resize on pixels, used before encoding when a pixel budget
/// rescales references. Half-pixel centers, edge clamped.
pub fn resize_bilinear(image: &RasterImage, new_height: usize, new_width: usize) -> RasterImage {
    assert!(new_height > 0 && new_width > 0);
    if new_height == image.height() && new_width == image.width() {
        return image.clone();
    }
    let mut out = RasterImage::filled(new_height, new_width, [0, 0, 0]);
    let scale_y = image.height() as f64 / new_height as f64;
    let scale_x = image.width() as f64 / new_width as f64;
    for y in 0..new_height {
        let src_y = ((y as f64 + 0.5) * scale_y - 0.5).max(0.0);
        let y0 = (src_y.floor() as usize).min(image.height() - 1);
        let y1 = (y0 + 1).min(image.height() - 1);
        let fy = src_y - y0 as f64;
        for x in 0..new_width {
            let src_x = ((x as f64 + 0.5) * scale_x - 0.5).max(0.0);
            let x0 = (src_x.floor() as usize).min(image.width() - 1);
            let x1 = (x0 + 1).min(image.width() - 1);
            let fx = src_x - x0 as f64;
            let mut rgb = [0u8; 3];
            for ch in 0..3 {
                let p00 = image.get(y0, x0)[ch] as f64;
                let p01 = image.get(y0, x1)[ch] as f64;
                let p10 = image.get(y1, x0)[ch] as f64;
                let p11 = image.get(y1, x1)[ch] as f64;
                let top = p00 + (p01 - p00) * fx;
                let bot = p10 + (p11 - p10) * fx;
                rgb[ch] = round_half_up_clamped(top + (bot - top) * fy);
            }
            out.set(y, x, rgb);
        }
    }
    out
}

/// Read an 8-bit RGB PNG. Any other color type is rejected.
pub fn read_png(path: &Path) -> Result<RasterImage, RasterError> {
    let reader = image::ImageReader::open(path)?;
    let decoded = reader.decode()?;
    match decoded {
        image::DynamicImage::ImageRgb8(rgb) => {
            let (w, h) = rgb.dimensions();
            RasterImage::from_raw(h as usize, w as usize, rgb.into_raw())
        }
        other => Err(RasterError::UnsupportedColorType(format!(
            "{:?}",
            other.color()
        ))),
    }
}

/// Write an image as an 8-bit RGB PNG.
pub fn write_png(image: &RasterImage, path: &Path) -> Result<(), RasterError> {
    let buf = image::RgbImage::from_raw(
        image.width() as u32,
        image.height() as u32,
        image.raw().to_vec(),
    )
    .expect("raster buffer length is H*W*3 by construction");
    buf.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

/// Encode an image to PNG bytes in memory (wire transport).
pub fn png_bytes(image: &RasterImage) -> Result<Vec<u8>, RasterError> {
    let buf = image::RgbImage::from_raw(
        image.width() as u32,
        image.height() as u32,
        image.raw().to_vec(),
    )
    .expect("raster buffer length is H*W*3 by construction");
    let mut out = std::io::Cursor::new(Vec::new());
    buf.write_to(&mut out, image::ImageFormat::Png)?;
    Ok(out.into_inner())
}

/// Decode PNG bytes; same color-type restriction as [`read_png`].
pub fn png_from_bytes(bytes: &[u8]) -> Result<RasterImage, RasterError> {
    let decoded = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)?;
    match decoded {
        image::DynamicImage::ImageRgb8(rgb) => {
            let (w, h) = rgb.dimensions();
            RasterImage::from_raw(h as usize, w as usize, rgb.into_raw())
        }
        other => Err(RasterError::UnsupportedColorType(format!(
            "{:?}",
            other.color()
        ))),
    }
}

//! Single-channel luminance rasters and image file I/O.
//!
//! All rasters are row-major with origin at the top-left corner and y
//! increasing downward, matching the PNG convention. Pixel values live in
//! `[0, 1]`.

use std::path::Path;

use image::{DynamicImage, ImageReader};

use crate::error::{Error, Result};

/// Luminance weights for RGB input (ITU-R BT.601).
const LUMA_R: f32 = 0.299;
const LUMA_G: f32 = 0.587;
const LUMA_B: f32 = 0.114;

/// Single-channel luminance raster, the substrate for both dense kernels.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl ImageBuffer {
    /// Wraps raw luminance data, validating dimensions and value range.
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Input(format!(
                "image dimensions must be positive, got {width}x{height}"
            )));
        }
        if data.len() != width * height {
            return Err(Error::Input(format!(
                "image data length {} does not match {width}x{height}",
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(Error::Input(format!(
                "image values must be finite and in [0,1], found {bad}"
            )));
        }
        Ok(ImageBuffer {
            width,
            height,
            data,
        })
    }

    /// Builds an image by evaluating `f(x, y)` at every pixel. The result is
    /// clamped to `[0, 1]`.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y).clamp(0.0, 1.0));
            }
        }
        ImageBuffer {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        debug_assert!(x < self.width && y < self.height);
        self.data[y * self.width + x]
    }

    /// Value at the clamped coordinate; the edge row/column is replicated
    /// outward.
    #[inline]
    pub fn get_clamped(&self, x: isize, y: isize) -> f32 {
        let xc = x.clamp(0, self.width as isize - 1) as usize;
        let yc = y.clamp(0, self.height as isize - 1) as usize;
        self.data[yc * self.width + xc]
    }

    /// Bilinear sample at a real-valued coordinate with edge replication.
    pub fn sample_bilinear(&self, x: f32, y: f32) -> f32 {
        let x0 = x.floor();
        let y0 = y.floor();
        let fx = x - x0;
        let fy = y - y0;
        let x0 = x0 as isize;
        let y0 = y0 as isize;
        let v00 = self.get_clamped(x0, y0);
        let v10 = self.get_clamped(x0 + 1, y0);
        let v01 = self.get_clamped(x0, y0 + 1);
        let v11 = self.get_clamped(x0 + 1, y0 + 1);
        let top = v00 + fx * (v10 - v00);
        let bottom = v01 + fx * (v11 - v01);
        top + fy * (bottom - top)
    }

    pub fn same_dimensions(&self, other: &ImageBuffer) -> bool {
        self.width == other.width && self.height == other.height
    }
}

/// A rectified stereo frame; left and right share dimensions.
#[derive(Debug, Clone)]
pub struct StereoPair {
    pub left: ImageBuffer,
    pub right: ImageBuffer,
    pub frame_index: usize,
}

impl StereoPair {
    pub fn new(left: ImageBuffer, right: ImageBuffer, frame_index: usize) -> Result<Self> {
        if !left.same_dimensions(&right) {
            return Err(Error::Dimension(format!(
                "stereo pair {}x{} vs {}x{}",
                left.width(),
                left.height(),
                right.width(),
                right.height()
            )));
        }
        Ok(StereoPair {
            left,
            right,
            frame_index,
        })
    }
}

/// Loads an 8- or 16-bit grayscale or RGB image (PNG or PGM) as luminance.
///
/// RGB input is converted with BT.601 weights; everything is scaled to
/// `[0, 1]`.
pub fn load_image(path: impl AsRef<Path>) -> Result<ImageBuffer> {
    let path = path.as_ref();
    let reader = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    let decoded = reader
        .decode()
        .map_err(|e| Error::decode(path, e.to_string()))?;
    let (width, height) = (decoded.width() as usize, decoded.height() as usize);
    let data = match decoded {
        DynamicImage::ImageLuma8(img) => {
            img.into_raw().iter().map(|&v| v as f32 / 255.0).collect()
        }
        DynamicImage::ImageLuma16(img) => img
            .into_raw()
            .iter()
            .map(|&v| v as f32 / 65535.0)
            .collect(),
        DynamicImage::ImageRgb8(img) => img
            .into_raw()
            .chunks_exact(3)
            .map(|px| {
                (LUMA_R * px[0] as f32 + LUMA_G * px[1] as f32 + LUMA_B * px[2] as f32) / 255.0
            })
            .collect(),
        DynamicImage::ImageRgb16(img) => img
            .into_raw()
            .chunks_exact(3)
            .map(|px| {
                (LUMA_R * px[0] as f32 + LUMA_G * px[1] as f32 + LUMA_B * px[2] as f32) / 65535.0
            })
            .collect(),
        other => {
            return Err(Error::decode(
                path,
                format!(
                    "unsupported pixel layout {:?}; expected 8/16-bit grayscale or RGB",
                    other.color()
                ),
            ));
        }
    };
    // Conversion can leave values a hair above 1.0 through rounding.
    let data = clamp_unit(data);
    ImageBuffer::new(width, height, data)
}

fn clamp_unit(mut data: Vec<f32>) -> Vec<f32> {
    for v in &mut data {
        *v = v.clamp(0.0, 1.0);
    }
    data
}

/// Saves the image as a 16-bit grayscale PNG (`value = round(v * 65535)`).
///
/// Loading it back reproduces every pixel within 1/65535.
pub fn save_image(img: &ImageBuffer, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let raw: Vec<u16> = img
        .data()
        .iter()
        .map(|&v| (v * 65535.0).round() as u16)
        .collect();
    let out: image::ImageBuffer<image::Luma<u16>, Vec<u16>> =
        image::ImageBuffer::from_raw(img.width() as u32, img.height() as u32, raw)
            .ok_or_else(|| Error::Internal("image buffer size mismatch".into()))?;
    out.save(path)
        .map_err(|e| Error::decode(path, format!("cannot encode png: {e}")))
}

/// Saves the image as an 8-bit grayscale PNG (`value = round(v * 255)`).
pub fn save_image_8bit(img: &ImageBuffer, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let raw: Vec<u8> = img
        .data()
        .iter()
        .map(|&v| (v * 255.0).round() as u8)
        .collect();
    let out: image::ImageBuffer<image::Luma<u8>, Vec<u8>> =
        image::ImageBuffer::from_raw(img.width() as u32, img.height() as u32, raw)
            .ok_or_else(|| Error::Internal("image buffer size mismatch".into()))?;
    out.save(path)
        .map_err(|e| Error::decode(path, format!("cannot encode png: {e}")))
}

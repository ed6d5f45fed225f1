//! Float RGB images: textures, renders and image-space gradients.

use std::path::Path;

use crate::error::{Error, Result};

/// Row-major H×W×3 image. Values are nominally in `[0, 1]` for textures and
/// renders; gradient images may hold any finite value.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::mismatch("image size", "positive", format!("{width}x{height}")));
        }
        if data.len() != width * height * 3 {
            return Err(Error::mismatch(
                "image data length",
                width * height * 3,
                data.len(),
            ));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        assert!(width > 0 && height > 0);
        let data = (0..width * height).flat_map(|_| rgb).collect();
        Self { width, height, data }
    }

    pub fn zeros_like(other: &RgbImage) -> Self {
        Self::filled(other.width, other.height, [0.0; 3])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let k = (y * self.width + x) * 3;
        [self.data[k], self.data[k + 1], self.data[k + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let k = (y * self.width + x) * 3;
        self.data[k..k + 3].copy_from_slice(&rgb);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// `½‖self − other‖²`
    pub fn half_squared_distance(&self, other: &RgbImage) -> f64 {
        assert_eq!(self.dims(), other.dims());
        0.5 * self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let img = image::open(path)
            .map_err(|e| match e {
                image::ImageError::IoError(io) => Error::io(path, io),
                other => Error::Image {
                    path: path.to_path_buf(),
                    msg: other.to_string(),
                },
            })?
            .to_rgb8();
        let (w, h) = img.dimensions();
        let data = img.as_raw().iter().map(|&b| f64::from(b) / 255.0).collect();
        Self::new(w as usize, h as usize, data)
    }

    /// Writes an 8-bit PNG; values are clamped to `[0, 1]`.
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes: Vec<u8> = self
            .data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        let buf = image::RgbImage::from_raw(self.width as u32, self.height as u32, bytes)
            .expect("buffer length matches dimensions");
        buf.save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| match e {
                image::ImageError::IoError(io) => Error::io(path, io),
                other => Error::Image {
                    path: path.to_path_buf(),
                    msg: other.to_string(),
                },
            })
    }

    /// float32 little-endian HWC encoding used on the guidance wire.
    pub fn to_f32_le_bytes(&self) -> Vec<u8> {
        self.data
            .iter()
            .flat_map(|&v| (v as f32).to_le_bytes())
            .collect()
    }

    pub fn from_f32_le_bytes(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        let expected = width * height * 3 * 4;
        if bytes.len() != expected {
            return Err(Error::mismatch("float32 image blob bytes", expected, bytes.len()));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
            .collect();
        Self::new(width, height, data)
    }

    /// Bilinear lookup at texture coordinates (u right, v up). Coordinates
    /// are clamped to `[0, 1]`; texel centers sit at half-integer positions.
    pub fn sample_bilinear(&self, u: f64, v: f64) -> [f64; 3] {
        self.sample_bilinear_with_grad(u, v).0
    }

    /// Bilinear lookup plus the derivative of each channel with respect to
    /// `u` and `v`. The derivative is zero along a clamped axis.
    pub fn sample_bilinear_with_grad(&self, u: f64, v: f64) -> ([f64; 3], [[f64; 3]; 2]) {
        let (w, h) = (self.width as f64, self.height as f64);
        let uc = u.clamp(0.0, 1.0);
        let vc = v.clamp(0.0, 1.0);
        let x = uc * w - 0.5;
        let y = (1.0 - vc) * h - 0.5;
        let (xc, dx_free) = clamp_axis(x, w - 1.0);
        let (yc, dy_free) = clamp_axis(y, h - 1.0);
        let dx_du = if u > 0.0 && u < 1.0 && dx_free { w } else { 0.0 };
        let dy_dv = if v > 0.0 && v < 1.0 && dy_free { -h } else { 0.0 };

        let x0 = (xc.floor() as usize).min(self.width - 1);
        let y0 = (yc.floor() as usize).min(self.height - 1);
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = xc - x0 as f64;
        let fy = yc - y0 as f64;

        let p00 = self.pixel(x0, y0);
        let p10 = self.pixel(x1, y0);
        let p01 = self.pixel(x0, y1);
        let p11 = self.pixel(x1, y1);
        let mut value = [0.0; 3];
        let mut grad = [[0.0; 3]; 2];
        for c in 0..3 {
            let top = p00[c] + fx * (p10[c] - p00[c]);
            let bottom = p01[c] + fx * (p11[c] - p01[c]);
            value[c] = top + fy * (bottom - top);
            let d_dx = (1.0 - fy) * (p10[c] - p00[c]) + fy * (p11[c] - p01[c]);
            let d_dy = bottom - top;
            grad[0][c] = d_dx * dx_du;
            grad[1][c] = d_dy * dy_dv;
        }
        (value, grad)
    }
}

fn clamp_axis(x: f64, max: f64) -> (f64, bool) {
    if x <= 0.0 {
        (0.0, false)
    } else if x >= max {
        (max.max(0.0), false)
    } else {
        (x, true)
    }
}

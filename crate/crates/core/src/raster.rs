//! Image container used by every pipeline stage.
//!
//! Pixels are stored as `f64` intensities in `[0, 255]` so that resampling and
//! seam optimization keep sub-intensity precision. Quantization to 8 bits only
//! happens in [`save_image`].

use std::path::Path;

use image::{DynamicImage, ImageFormat};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("failed to decode image {path}: {reason}")]
    Decode { path: String, reason: String },
    #[error("failed to encode image {path}: {reason}")]
    Encode { path: String, reason: String },
    #[error("unsupported channel count {0} (expected 1 or 3)")]
    UnsupportedChannels(usize),
    #[error("raster dimensions {width}x{height}x{channels} do not match data length {len}")]
    ShapeMismatch {
        width: usize,
        height: usize,
        channels: usize,
        len: usize,
    },
}

/// Sub-pixel image coordinate: `x` is the column, `y` the row.
#[derive(Debug, Clone, Copy, PartialEq, Default, serde::Serialize, serde::Deserialize)]
pub struct PixelCoord {
    pub x: f64,
    pub y: f64,
}

impl PixelCoord {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    pub fn dist(&self, other: PixelCoord) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Interpolated value of up to three channels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Texel {
    values: [f64; 3],
    channels: usize,
}

impl Texel {
    pub fn as_slice(&self) -> &[f64] {
        &self.values[..self.channels]
    }

    /// First channel; the intensity of a gray raster.
    pub fn gray(&self) -> f64 {
        self.values[0]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Raster {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Self::filled(width, height, channels, 0.0)
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        assert!(width >= 1 && height >= 1, "raster must be at least 1x1");
        assert!(channels == 1 || channels == 3, "raster must have 1 or 3 channels");
        Self {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn from_data(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self, RasterError> {
        if channels != 1 && channels != 3 {
            return Err(RasterError::UnsupportedChannels(channels));
        }
        if width == 0 || height == 0 || data.len() != width * height * channels {
            return Err(RasterError::ShapeMismatch {
                width,
                height,
                channels,
                len: data.len(),
            });
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    /// Builds a gray raster by evaluating `f(x, y)` at every pixel center.
    pub fn from_fn_gray(width: usize, height: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut img = Self::new(width, height, 1);
        for y in 0..height {
            for x in 0..width {
                img.data[y * width + x] = f(x, y);
            }
        }
        img
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    /// Clamp-to-edge pixel access with signed coordinates.
    #[inline]
    pub fn get_clamped(&self, x: isize, y: isize, c: usize) -> f64 {
        let xc = x.clamp(0, self.width as isize - 1) as usize;
        let yc = y.clamp(0, self.height as isize - 1) as usize;
        self.get(xc, yc, c)
    }

    pub fn contains(&self, p: PixelCoord) -> bool {
        p.x >= 0.0 && p.y >= 0.0 && p.x <= (self.width - 1) as f64 && p.y <= (self.height - 1) as f64
    }

    /// Cell origin and fractional offsets for bilinear interpolation, or `None`
    /// outside `[0, w-1] x [0, h-1]`.
    #[inline]
    fn cell(&self, p: PixelCoord) -> Option<(usize, usize, f64, f64)> {
        if !p.is_finite() || !self.contains(p) {
            return None;
        }
        let x0 = (p.x.floor() as usize).min(self.width.saturating_sub(2));
        let y0 = (p.y.floor() as usize).min(self.height.saturating_sub(2));
        Some((x0, y0, p.x - x0 as f64, p.y - y0 as f64))
    }

    #[inline]
    fn corners(&self, x0: usize, y0: usize, c: usize) -> (f64, f64, f64, f64) {
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        (
            self.get(x0, y0, c),
            self.get(x1, y0, c),
            self.get(x0, y1, c),
            self.get(x1, y1, c),
        )
    }

    /// Bilinear interpolation of one channel.
    #[inline]
    pub fn sample_channel(&self, p: PixelCoord, c: usize) -> Option<f64> {
        let (x0, y0, fx, fy) = self.cell(p)?;
        let (v00, v10, v01, v11) = self.corners(x0, y0, c);
        let top = (1.0 - fx) * v00 + fx * v10;
        let bottom = (1.0 - fx) * v01 + fx * v11;
        Some((1.0 - fy) * top + fy * bottom)
    }

    /// Bilinear interpolation of one channel together with the exact partial
    /// derivatives of the interpolant, `(value, d/dx, d/dy)`.
    #[inline]
    pub fn sample_with_gradient(&self, p: PixelCoord, c: usize) -> Option<(f64, f64, f64)> {
        let (x0, y0, fx, fy) = self.cell(p)?;
        let (v00, v10, v01, v11) = self.corners(x0, y0, c);
        let top = (1.0 - fx) * v00 + fx * v10;
        let bottom = (1.0 - fx) * v01 + fx * v11;
        let value = (1.0 - fy) * top + fy * bottom;
        let dx = (1.0 - fy) * (v10 - v00) + fy * (v11 - v01);
        let dy = bottom - top;
        Some((value, dx, dy))
    }

    /// Bilinear sample of every channel; `None` is the out-of-bounds marker.
    pub fn sample_bilinear(&self, p: PixelCoord) -> Option<Texel> {
        let mut values = [0.0; 3];
        for (c, v) in values.iter_mut().enumerate().take(self.channels) {
            *v = self.sample_channel(p, c)?;
        }
        Some(Texel {
            values,
            channels: self.channels,
        })
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Crops `[x0, x0+w) x [y0, y0+h)`; the rectangle must lie inside the raster.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Raster {
        assert!(x0 + w <= self.width && y0 + h <= self.height, "crop out of bounds");
        let mut out = Raster::new(w, h, self.channels);
        for y in 0..h {
            let src = ((y0 + y) * self.width + x0) * self.channels;
            let dst = y * w * self.channels;
            out.data[dst..dst + w * self.channels].copy_from_slice(&self.data[src..src + w * self.channels]);
        }
        out
    }

    /// Rounds and clamps every value to the 8-bit grid.
    pub fn quantized(&self) -> Raster {
        Raster {
            data: self.data.iter().map(|&v| quantize(v) as f64).collect(),
            ..self.clone()
        }
    }
}

#[inline]
pub fn quantize(v: f64) -> u8 {
    if v.is_nan() {
        0
    } else {
        v.round().clamp(0.0, 255.0) as u8
    }
}

/// Converts to one channel using ITU-601 luma weights, rounded to nearest.
pub fn to_gray(img: &Raster) -> Raster {
    if img.channels == 1 {
        return img.clone();
    }
    let data = img
        .data
        .chunks_exact(3)
        .map(|px| (0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2]).round())
        .collect();
    Raster {
        width: img.width,
        height: img.height,
        channels: 1,
        data,
    }
}

/// Normalized 1-D Gaussian taps with radius `ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut taps: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= sum);
    taps
}

/// Separable Gaussian blur with clamp-to-edge borders. `sigma == 0` is the identity.
pub fn gaussian_smooth(img: &Raster, sigma: f64) -> Raster {
    assert!(sigma >= 0.0, "sigma must be non-negative");
    if sigma == 0.0 {
        return img.clone();
    }
    let taps = gaussian_kernel(sigma);
    let radius = (taps.len() / 2) as isize;
    let (w, h, ch) = (img.width, img.height, img.channels);

    let mut horiz = Raster::new(w, h, ch);
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                let acc: f64 = taps
                    .iter()
                    .enumerate()
                    .map(|(k, t)| t * img.get_clamped(x as isize + k as isize - radius, y as isize, c))
                    .sum();
                horiz.set(x, y, c, acc);
            }
        }
    }
    let mut out = Raster::new(w, h, ch);
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                let acc: f64 = taps
                    .iter()
                    .enumerate()
                    .map(|(k, t)| t * horiz.get_clamped(x as isize, y as isize + k as isize - radius, c))
                    .sum();
                out.set(x, y, c, acc);
            }
        }
    }
    out
}

/// Loads a PNG or binary PNM (PGM/PPM) file.
pub fn load_image(path: impl AsRef<Path>) -> Result<Raster, RasterError> {
    let path = path.as_ref();
    let decode_err = |reason: String| RasterError::Decode {
        path: path.display().to_string(),
        reason,
    };
    let reader = image::ImageReader::open(path)
        .map_err(|e| decode_err(e.to_string()))?
        .with_guessed_format()
        .map_err(|e| decode_err(e.to_string()))?;
    match reader.format() {
        Some(ImageFormat::Png) | Some(ImageFormat::Pnm) => {}
        other => return Err(decode_err(format!("unsupported format {other:?}"))),
    }
    let decoded = reader.decode().map_err(|e| decode_err(e.to_string()))?;
    match decoded {
        DynamicImage::ImageLuma8(buf) => {
            let (w, h) = buf.dimensions();
            let data = buf.into_raw().into_iter().map(f64::from).collect();
            Raster::from_data(w as usize, h as usize, 1, data)
        }
        DynamicImage::ImageRgb8(buf) => {
            let (w, h) = buf.dimensions();
            let data = buf.into_raw().into_iter().map(f64::from).collect();
            Raster::from_data(w as usize, h as usize, 3, data)
        }
        other => Err(RasterError::UnsupportedChannels(other.color().channel_count() as usize)),
    }
}

/// Saves as PNG, or as binary PGM/PPM when the extension is `pgm`, `ppm` or `pnm`.
pub fn save_image(img: &Raster, path: impl AsRef<Path>) -> Result<(), RasterError> {
    let path = path.as_ref();
    let bytes: Vec<u8> = img.data.iter().map(|&v| quantize(v)).collect();
    let (w, h) = (img.width as u32, img.height as u32);
    let dynamic = match img.channels {
        1 => DynamicImage::ImageLuma8(image::GrayImage::from_raw(w, h, bytes).expect("sized")),
        3 => DynamicImage::ImageRgb8(image::RgbImage::from_raw(w, h, bytes).expect("sized")),
        c => return Err(RasterError::UnsupportedChannels(c)),
    };
    let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
    let format = match ext.as_deref() {
        Some("pgm" | "ppm" | "pnm") => ImageFormat::Pnm,
        _ => ImageFormat::Png,
    };
    dynamic.save_with_format(path, format).map_err(|e| RasterError::Encode {
        path: path.display().to_string(),
        reason: e.to_string(),
    })
}

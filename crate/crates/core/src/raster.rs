//! RGB images and binary object masks, with 8-bit PNG I/O.

use std::path::Path;

use image::{ColorType, DynamicImage, GrayImage, ImageFormat};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// RGB image with channel values in `[0, 1]`, stored row-major HWC.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width * 3 {
            return Err(Error::Dimension(format!(
                "{height}x{width} RGB image needs {} values, got {}",
                height * width * 3,
                data.len()
            )));
        }
        Ok(RgbImage {
            height,
            width,
            data,
        })
    }

    pub fn black(height: usize, width: usize) -> Self {
        RgbImage {
            height,
            width,
            data: vec![0.0; height * width * 3],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// `[H, W, 3]` tensor.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::from_fn([self.height, self.width, 3], |i| {
            T::lit(f64::from(self.data[i]))
        })
    }

    /// From an `[H, W, 3]` tensor, clamping into `[0, 1]`.
    pub fn from_tensor<T: Real>(t: &Tensor<T>) -> Result<Self> {
        let s = t.shape();
        if s.len() != 3 || s[2] != 3 {
            return Err(Error::Dimension(format!("expected [H, W, 3], got {s:?}")));
        }
        let data = t
            .data()
            .iter()
            .map(|v| v.as_f64().clamp(0.0, 1.0) as f32)
            .collect();
        RgbImage::new(s[0], s[1], data)
    }

    /// Pixels outside the foreground set to zero.
    pub fn masked(&self, mask: &Mask) -> Result<Self> {
        mask.check_dims(self.height, self.width)?;
        let mut out = self.clone();
        for (i, &fg) in mask.data.iter().enumerate() {
            if !fg {
                out.data[i * 3..i * 3 + 3].fill(0.0);
            }
        }
        Ok(out)
    }

    /// Bilinear resampling with half-pixel centres.
    pub fn resize(&self, height: usize, width: usize) -> RgbImage {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let mut out = RgbImage::black(height, width);
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        for y in 0..height {
            let (y0, y1, fy) = bilinear_taps((y as f64 + 0.5) * sy - 0.5, self.height);
            for x in 0..width {
                let (x0, x1, fx) = bilinear_taps((x as f64 + 0.5) * sx - 0.5, self.width);
                let mut rgb = [0f32; 3];
                for (c, v) in rgb.iter_mut().enumerate() {
                    let p =
                        |yy: usize, xx: usize| f64::from(self.data[(yy * self.width + xx) * 3 + c]);
                    let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
                    let bottom = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
                    *v = (top * (1.0 - fy) + bottom * fy) as f32;
                }
                out.set_pixel(y, x, rgb);
            }
        }
        out
    }

    pub fn to_u8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| quantize_u8(v)).collect()
    }

    pub fn from_u8(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        RgbImage::new(
            height,
            width,
            bytes.iter().map(|&b| f32::from(b) / 255.0).collect(),
        )
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = open_8bit(path)?;
        let rgb = img.to_rgb8();
        RgbImage::from_u8(rgb.height() as usize, rgb.width() as usize, rgb.as_raw())
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let buf = image::RgbImage::from_raw(self.width as u32, self.height as u32, self.to_u8())
            .expect("buffer sized from dims");
        buf.save_with_format(path, ImageFormat::Png)
            .map_err(|e| image_error(path, e))
    }
}

pub(crate) fn quantize_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn bilinear_taps(pos: f64, len: usize) -> (usize, usize, f64) {
    let pos = pos.clamp(0.0, (len - 1) as f64);
    let i0 = pos.floor() as usize;
    let i1 = (i0 + 1).min(len - 1);
    (i0, i1, pos - i0 as f64)
}

fn image_error(path: &Path, e: image::ImageError) -> Error {
    match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Input(format!("{}: {other}", path.display())),
    }
}

fn open_8bit(path: &Path) -> Result<DynamicImage> {
    let img = image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| image_error(path, e))?;
    match img.color() {
        ColorType::L8 | ColorType::La8 | ColorType::Rgb8 | ColorType::Rgba8 => Ok(img),
        other => Err(Error::Input(format!(
            "{}: expected an 8-bit PNG, found {other:?}",
            path.display()
        ))),
    }
}

/// Binary object mask; `true` marks foreground (object) pixels.
///
/// The editable-region convention used by the conditioning code is the
/// complement: `m = 1` on background, `m = 0` on the object.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(Error::Dimension(format!(
                "{height}x{width} mask needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Mask {
            height,
            width,
            data,
        })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Mask {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    pub fn full(height: usize, width: usize) -> Self {
        Mask {
            height,
            width,
            data: vec![true; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, fg: bool) {
        self.data[y * self.width + x] = fg;
    }

    pub fn foreground_count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    /// Foreground area over frame area.
    pub fn foreground_ratio(&self) -> f64 {
        self.foreground_count() as f64 / self.data.len() as f64
    }

    pub(crate) fn check_dims(&self, height: usize, width: usize) -> Result<()> {
        if self.height != height || self.width != width {
            return Err(Error::Dimension(format!(
                "mask is {}x{}, image is {height}x{width}",
                self.height, self.width
            )));
        }
        Ok(())
    }

    /// Tight bounding box of the foreground.
    pub fn bbox(&self) -> Option<BBox> {
        let mut b: Option<BBox> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(y, x) {
                    b = Some(match b {
                        None => BBox {
                            y0: y,
                            x0: x,
                            y1: y,
                            x1: x,
                        },
                        Some(b) => BBox {
                            y0: b.y0.min(y),
                            x0: b.x0.min(x),
                            y1: b.y1.max(y),
                            x1: b.x1.max(x),
                        },
                    });
                }
            }
        }
        b
    }

    /// Nearest-neighbour resampling.
    pub fn resize(&self, height: usize, width: usize) -> Mask {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let mut out = Mask::empty(height, width);
        for y in 0..height {
            let sy = ((y as f64 + 0.5) * self.height as f64 / height as f64) as usize;
            for x in 0..width {
                let sx = ((x as f64 + 0.5) * self.width as f64 / width as f64) as usize;
                out.set(
                    y,
                    x,
                    self.get(sy.min(self.height - 1), sx.min(self.width - 1)),
                );
            }
        }
        out
    }

    /// Downsample by `factor`: a cell is foreground iff any covered pixel is.
    pub fn downsample_any(&self, factor: usize) -> Result<Mask> {
        if factor == 0 || self.height % factor != 0 || self.width % factor != 0 {
            return Err(Error::Dimension(format!(
                "{}x{} mask is not divisible by factor {factor}",
                self.height, self.width
            )));
        }
        let (h, w) = (self.height / factor, self.width / factor);
        let mut out = Mask::empty(h, w);
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(y, x) {
                    out.set(y / factor, x / factor, true);
                }
            }
        }
        Ok(out)
    }

    /// Foreground indicator `m̄` as an `[H, W]` tensor of 0/1.
    pub fn foreground_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::from_fn([self.height, self.width], |i| {
            if self.data[i] {
                T::one()
            } else {
                T::zero()
            }
        })
    }

    /// Editable-region indicator `m = 1 − m̄` as an `[H, W]` tensor.
    pub fn background_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::from_fn([self.height, self.width], |i| {
            if self.data[i] {
                T::zero()
            } else {
                T::one()
            }
        })
    }

    /// Binarizes 8-bit values: strictly above 127 is foreground.
    pub fn from_u8(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        Mask::new(height, width, bytes.iter().map(|&b| b > 127).collect())
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = open_8bit(path)?;
        let gray = img.to_luma8();
        Mask::from_u8(gray.height() as usize, gray.width() as usize, gray.as_raw())
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes = self.data.iter().map(|&v| if v { 255 } else { 0 }).collect();
        let buf = GrayImage::from_raw(self.width as u32, self.height as u32, bytes)
            .expect("buffer sized from dims");
        buf.save_with_format(path, ImageFormat::Png)
            .map_err(|e| image_error(path, e))
    }
}

/// Inclusive pixel bounding box.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BBox {
    pub y0: usize,
    pub x0: usize,
    pub y1: usize,
    pub x1: usize,
}

impl BBox {
    pub fn height(&self) -> usize {
        self.y1 - self.y0 + 1
    }

    pub fn width(&self) -> usize {
        self.x1 - self.x0 + 1
    }
}

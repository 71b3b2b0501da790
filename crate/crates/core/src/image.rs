//! Planar floating-point images with intensities in `[0, 1]`.
//!
//! Every image symbol of the method (rainy inputs, clean backgrounds, derained
//! outputs, re-rained reconstructions) is an [`ImageTensor`]. Files are decoded
//! as 8-bit RGB and mapped through `v / 255`.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use image::{imageops, ImageBuffer, Rgb, Rgb32FImage, RgbImage};

use crate::error::{Error, Result};

/// File extensions recognised as images when scanning dataset directories.
pub const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg"];

/// A `[channels, height, width]` image, channel-planar, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ImageTensor {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidImage(format!("expected 1 or 3 channels, got {channels}")));
        }
        if height == 0 || width == 0 {
            return Err(Error::InvalidImage(format!("empty image {height}x{width}")));
        }
        if data.len() != channels * height * width {
            return Err(Error::InvalidImage(format!(
                "{} values for a {channels}x{height}x{width} image",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidImage(format!("intensity {v} outside [0, 1]")));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    /// Builds an image from a function of `(channel, row, col)`; results are clamped to `[0, 1]`.
    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x).clamp(0.0, 1.0));
                }
            }
        }
        Self::new(channels, height, width, data)
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Result<Self> {
        Self::new(channels, height, width, vec![value; channels * height * width])
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn same_shape(&self, other: &ImageTensor) -> bool {
        self.shape() == other.shape()
    }

    pub(crate) fn ensure_same_shape(&self, other: &ImageTensor, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::ShapeMismatch(format!(
                "{what}: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )))
        }
    }

    /// Copies the `[top..top+h, left..left+w]` window.
    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Result<Self> {
        if top + h > self.height || left + w > self.width || h == 0 || w == 0 {
            return Err(Error::InvalidImage(format!(
                "crop {h}x{w}+{top}+{left} outside {}x{}",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(self.channels * h * w);
        for c in 0..self.channels {
            for y in top..top + h {
                let row = (c * self.height + y) * self.width;
                data.extend_from_slice(&self.data[row + left..row + left + w]);
            }
        }
        Self::new(self.channels, h, w, data)
    }

    /// Reflect-pads the bottom and right edges so both sides become multiples of `multiple`.
    ///
    /// Returns the padded image; crop back with `crop(0, 0, h, w)`.
    pub fn reflect_pad_to_multiple(&self, multiple: usize) -> Result<Self> {
        let target_h = self.height.div_ceil(multiple) * multiple;
        let target_w = self.width.div_ceil(multiple) * multiple;
        if target_h == self.height && target_w == self.width {
            return Ok(self.clone());
        }
        let (h, w) = (self.height, self.width);
        Self::from_fn(self.channels, target_h, target_w, |c, y, x| {
            self.get(c, reflect_index(y, h), reflect_index(x, w))
        })
    }

    /// Center-crops to the target aspect ratio, then resizes to `height x width`.
    pub fn fit_to(&self, height: usize, width: usize) -> Result<Self> {
        if self.height == height && self.width == width {
            return Ok(self.clone());
        }
        let target_ratio = width as f64 / height as f64;
        let src_ratio = self.width as f64 / self.height as f64;
        let (crop_h, crop_w) = if src_ratio > target_ratio {
            let w = ((self.height as f64 * target_ratio).round() as usize).clamp(1, self.width);
            (self.height, w)
        } else {
            let h = ((self.width as f64 / target_ratio).round() as usize).clamp(1, self.height);
            (h, self.width)
        };
        let cropped = self.crop((self.height - crop_h) / 2, (self.width - crop_w) / 2, crop_h, crop_w)?;
        if crop_h == height && crop_w == width {
            return Ok(cropped);
        }
        let channels = cropped.channels;
        let buf: Rgb32FImage = cropped.to_rgb32f();
        let resized = imageops::resize(&buf, width as u32, height as u32, imageops::FilterType::Triangle);
        let full = Self::from_rgb32f(&resized)?;
        if channels == 1 {
            full.channel(0)
        } else {
            Ok(full)
        }
    }

    /// Extracts a single channel as a one-channel image.
    pub fn channel(&self, c: usize) -> Result<Self> {
        let plane = self.height * self.width;
        Self::new(
            1,
            self.height,
            self.width,
            self.data[c * plane..(c + 1) * plane].to_vec(),
        )
    }

    fn to_rgb32f(&self) -> Rgb32FImage {
        ImageBuffer::from_fn(self.width as u32, self.height as u32, |x, y| {
            let (x, y) = (x as usize, y as usize);
            let px = |c: usize| self.get(c.min(self.channels - 1), y, x);
            Rgb([px(0), px(1), px(2)])
        })
    }

    fn from_rgb32f(buf: &Rgb32FImage) -> Result<Self> {
        let (w, h) = (buf.width() as usize, buf.height() as usize);
        Self::from_fn(3, h, w, |c, y, x| buf.get_pixel(x as u32, y as u32)[c])
    }

    pub fn from_rgb8(buf: &RgbImage) -> Result<Self> {
        let (w, h) = (buf.width() as usize, buf.height() as usize);
        Self::from_fn(3, h, w, |c, y, x| {
            f32::from(buf.get_pixel(x as u32, y as u32)[c]) / 255.0
        })
    }

    /// Quantizes to 8-bit RGB (`round(v * 255)`); single-channel images are replicated.
    pub fn to_rgb8(&self) -> RgbImage {
        ImageBuffer::from_fn(self.width as u32, self.height as u32, |x, y| {
            let (x, y) = (x as usize, y as usize);
            let px = |c: usize| quantize(self.get(c.min(self.channels - 1), y, x));
            Rgb([px(0), px(1), px(2)])
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let img = image::open(path).map_err(|source| Error::Decode {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_rgb8(&img.to_rgb8())
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        self.to_rgb8()
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|source| Error::Encode {
                path: path.to_path_buf(),
                source,
            })
    }

    /// `[1, C, H, W]` tensor.
    pub fn to_tensor(&self, device: &Device, dtype: DType) -> Result<Tensor> {
        let t = Tensor::from_slice(&self.data, (1, self.channels, self.height, self.width), device)?;
        Ok(t.to_dtype(dtype)?)
    }

    /// Reads a `[C, H, W]` or `[1, C, H, W]` tensor, clamping to `[0, 1]`.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let t = match t.rank() {
            4 => t.squeeze(0)?,
            3 => t.clone(),
            r => {
                return Err(Error::ShapeMismatch(format!(
                    "expected a 3- or 4-d image tensor, got rank {r}"
                )))
            }
        };
        let (c, h, w) = t.dims3()?;
        let data: Vec<f32> = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                term: "image tensor".into(),
            });
        }
        Self::new(c, h, w, data.into_iter().map(|v| v.clamp(0.0, 1.0)).collect())
    }
}

/// Stacks same-shaped images into a `[B, C, H, W]` tensor.
pub fn stack_images(images: &[&ImageTensor], device: &Device, dtype: DType) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::EmptyDataset("cannot stack an empty batch".into()))?;
    let (c, h, w) = first.shape();
    let mut data = Vec::with_capacity(images.len() * c * h * w);
    for img in images {
        first.ensure_same_shape(img, "batch stacking")?;
        data.extend_from_slice(img.data());
    }
    let t = Tensor::from_vec(data, (images.len(), c, h, w), device)?;
    Ok(t.to_dtype(dtype)?)
}

/// Splits a `[B, C, H, W]` tensor back into images.
pub fn unstack_images(t: &Tensor) -> Result<Vec<ImageTensor>> {
    let b = t.dim(0)?;
    (0..b).map(|i| ImageTensor::from_tensor(&t.get(i)?)).collect()
}

#[inline]
pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Mirror index without repeating the edge sample (`... 2 1 | 0 1 2 ... n-1 | n-2 ...`).
pub(crate) fn reflect_index(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i % period;
    if m < n {
        m
    } else {
        period - m
    }
}

pub(crate) fn is_image_file(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        .unwrap_or(false)
}

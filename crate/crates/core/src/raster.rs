//! Dense row-major image buffers and their PNG encodings.

use std::path::Path;

use image::{GrayImage, ImageBuffer, Luma, Rgb};

use crate::error::{Result, SlamError};

/// Row-major image; pixel `(u, v)` lives at `v * width + u`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image<T> {
    pub width: usize,
    pub height: usize,
    pub data: Vec<T>,
}

pub type RgbImage = Image<[f64; 3]>;
pub type ScalarImage = Image<f64>;

impl<T: Clone> Image<T> {
    pub fn filled(width: usize, height: usize, value: T) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != width * height {
            return Err(SlamError::DimensionMismatch(
                width,
                height,
                data.len(),
                1,
            ));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> &T {
        &self.data[v * self.width + u]
    }

    #[inline]
    pub fn get_mut(&mut self, u: usize, v: usize) -> &mut T {
        &mut self.data[v * self.width + u]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn same_shape<U>(&self, other: &Image<U>) -> Result<()> {
        if self.width != other.width || self.height != other.height {
            return Err(SlamError::DimensionMismatch(
                self.width,
                self.height,
                other.width,
                other.height,
            ));
        }
        Ok(())
    }

    /// Swaps the roles of rows and columns.
    pub fn transposed(&self) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        for u in 0..self.width {
            for v in 0..self.height {
                data.push(self.get(u, v).clone());
            }
        }
        Self {
            width: self.height,
            height: self.width,
            data,
        }
    }
}

impl RgbImage {
    /// ITU-R BT.601 luma.
    pub fn to_gray(&self) -> ScalarImage {
        Image {
            width: self.width,
            height: self.height,
            data: self
                .data
                .iter()
                .map(|c| 0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2])
                .collect(),
        }
    }

    pub fn write_png(&self, path: &Path) -> Result<()> {
        let mut buf = ImageBuffer::<Rgb<u8>, Vec<u8>>::new(self.width as u32, self.height as u32);
        for (i, px) in buf.pixels_mut().enumerate() {
            let c = self.data[i];
            *px = Rgb([to_u8(c[0]), to_u8(c[1]), to_u8(c[2])]);
        }
        buf.save(path).map_err(|source| SlamError::Image {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn read_png(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|source| SlamError::Image {
                path: path.to_path_buf(),
                source,
            })?
            .to_rgb8();
        let (w, h) = img.dimensions();
        let data = img
            .pixels()
            .map(|p| {
                [
                    p[0] as f64 / 255.0,
                    p[1] as f64 / 255.0,
                    p[2] as f64 / 255.0,
                ]
            })
            .collect();
        Ok(Image {
            width: w as usize,
            height: h as usize,
            data,
        })
    }
}

impl ScalarImage {
    /// 8-bit grayscale of values in [0, 1].
    pub fn write_png_unit(&self, path: &Path) -> Result<()> {
        let mut buf = GrayImage::new(self.width as u32, self.height as u32);
        for (i, px) in buf.pixels_mut().enumerate() {
            *px = Luma([to_u8(self.data[i])]);
        }
        buf.save(path).map_err(|source| SlamError::Image {
            path: path.to_path_buf(),
            source,
        })
    }

    /// 16-bit depth PNG: raw = round(meters * depth_scale), 0 stays invalid.
    pub fn write_depth_png(&self, path: &Path, depth_scale: f64) -> Result<()> {
        let mut buf =
            ImageBuffer::<Luma<u16>, Vec<u16>>::new(self.width as u32, self.height as u32);
        for (i, px) in buf.pixels_mut().enumerate() {
            let raw = (self.data[i] * depth_scale).round();
            *px = Luma([raw.clamp(0.0, u16::MAX as f64) as u16]);
        }
        buf.save(path).map_err(|source| SlamError::Image {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Decodes a 16-bit depth PNG into meters (raw / depth_scale).
    pub fn read_depth_png(path: &Path, depth_scale: f64) -> Result<Self> {
        let img = image::open(path)
            .map_err(|source| SlamError::Image {
                path: path.to_path_buf(),
                source,
            })?
            .to_luma16();
        let (w, h) = img.dimensions();
        let data = img.pixels().map(|p| p[0] as f64 / depth_scale).collect();
        Ok(Image {
            width: w as usize,
            height: h as usize,
            data,
        })
    }
}

fn to_u8(x: f64) -> u8 {
    (x.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Box-filter downsampling by an integer factor. Color is averaged over the block;
/// depth averages only its valid (positive) samples and is invalid unless at least
/// half of the block is valid.
pub fn downsample_rgb(img: &RgbImage, factor: usize) -> RgbImage {
    if factor <= 1 {
        return img.clone();
    }
    let (w, h) = (img.width / factor, img.height / factor);
    let norm = (factor * factor) as f64;
    let mut out = Image::filled(w, h, [0.0; 3]);
    for v in 0..h {
        for u in 0..w {
            let mut acc = [0.0; 3];
            for dv in 0..factor {
                for du in 0..factor {
                    let c = img.get(u * factor + du, v * factor + dv);
                    acc[0] += c[0];
                    acc[1] += c[1];
                    acc[2] += c[2];
                }
            }
            *out.get_mut(u, v) = [acc[0] / norm, acc[1] / norm, acc[2] / norm];
        }
    }
    out
}

pub fn downsample_depth(img: &ScalarImage, factor: usize) -> ScalarImage {
    if factor <= 1 {
        return img.clone();
    }
    let (w, h) = (img.width / factor, img.height / factor);
    let mut out = Image::filled(w, h, 0.0);
    for v in 0..h {
        for u in 0..w {
            let mut sum = 0.0;
            let mut n = 0usize;
            for dv in 0..factor {
                for du in 0..factor {
                    let d = *img.get(u * factor + du, v * factor + dv);
                    if d > 0.0 {
                        sum += d;
                        n += 1;
                    }
                }
            }
            if 2 * n >= factor * factor {
                *out.get_mut(u, v) = sum / n as f64;
            }
        }
    }
    out
}

//! Invertible pixel <-> latent mapping used in place of a pretrained
//! autoencoder: grayscale images of side `h * p` are folded into `p * p`
//! latent channels (space-to-depth), values scaled to `[-1, 1]`.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use image::{imageops::FilterType, GrayImage, Luma};

use crate::config::ModelConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchCodec {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub patch: usize,
}

impl PatchCodec {
    pub fn new(channels: usize, height: usize, width: usize) -> Result<Self> {
        let patch = (channels as f64).sqrt().round() as usize;
        if patch == 0 || patch * patch != channels {
            return Err(Error::Format(format!(
                "patch codec needs a square channel count, got {channels}"
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            patch,
        })
    }

    pub fn for_config(cfg: &ModelConfig) -> Result<Self> {
        Self::new(cfg.latent_channels, cfg.latent_height, cfg.latent_width)
    }

    /// Image size `(width, height)` in pixels.
    pub fn image_size(&self) -> (u32, u32) {
        ((self.width * self.patch) as u32, (self.height * self.patch) as u32)
    }

    /// Pixel intensities in `[0, 1]`, row-major `[H, W]`, to `[C, h, w]`.
    pub fn encode_pixels(&self, pixels: &[f64], device: &Device) -> Result<Tensor> {
        let p = self.patch;
        let (iw, ih) = self.image_size();
        let (iw, ih) = (iw as usize, ih as usize);
        if pixels.len() != iw * ih {
            return Err(Error::shape("image pixels", &[ih, iw], &[pixels.len()]));
        }
        let mut out = vec![0.0; self.channels * self.height * self.width];
        for y in 0..ih {
            for x in 0..iw {
                let c = (y % p) * p + x % p;
                let idx = (c * self.height + y / p) * self.width + x / p;
                out[idx] = pixels[y * iw + x] * 2.0 - 1.0;
            }
        }
        Ok(Tensor::from_vec(out, (self.channels, self.height, self.width), device)?)
    }

    /// Inverse of [`encode_pixels`](Self::encode_pixels), clamped to `[0, 1]`.
    pub fn decode_pixels(&self, latent: &Tensor) -> Result<Vec<f64>> {
        let dims = [self.channels, self.height, self.width];
        if latent.dims() != dims {
            return Err(Error::shape("latent frame", &dims, latent.dims()));
        }
        let p = self.patch;
        let (iw, ih) = self.image_size();
        let (iw, ih) = (iw as usize, ih as usize);
        let data = latent.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        let mut out = vec![0.0; iw * ih];
        for y in 0..ih {
            for x in 0..iw {
                let c = (y % p) * p + x % p;
                let v = data[(c * self.height + y / p) * self.width + x / p];
                out[y * iw + x] = ((v + 1.0) / 2.0).clamp(0.0, 1.0);
            }
        }
        Ok(out)
    }

    pub fn encode_image(&self, img: &GrayImage, device: &Device) -> Result<Tensor> {
        let (w, h) = self.image_size();
        let img = if img.dimensions() == (w, h) {
            img.clone()
        } else {
            image::imageops::resize(img, w, h, FilterType::Triangle)
        };
        let pixels: Vec<f64> = img.pixels().map(|p| p.0[0] as f64 / 255.0).collect();
        self.encode_pixels(&pixels, device)
    }

    pub fn decode_image(&self, latent: &Tensor) -> Result<GrayImage> {
        let (w, h) = self.image_size();
        let pixels = self.decode_pixels(latent)?;
        Ok(GrayImage::from_fn(w, h, |x, y| {
            Luma([(pixels[(y * w + x) as usize] * 255.0).round() as u8])
        }))
    }

    /// Loads any image file, converting to grayscale and resizing.
    pub fn load_png(&self, path: impl AsRef<Path>, device: &Device) -> Result<Tensor> {
        let img = image::open(path)?.to_luma8();
        self.encode_image(&img, device)
    }

    pub fn save_png(&self, latent: &Tensor, path: impl AsRef<Path>) -> Result<()> {
        self.decode_image(latent)?.save(path)?;
        Ok(())
    }
}

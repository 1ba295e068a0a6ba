//! 8-bit `H × W × C` images and the PNG container.

use std::io::Cursor;
use std::path::Path;

use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("image buffer of {got} bytes does not match {height}x{width}x{channels}")]
    BadBuffer { height: usize, width: usize, channels: usize, got: usize },
    #[error("unsupported channel count {0} (expected 1 or 3)")]
    Channels(usize),
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize, usize), (usize, usize, usize)),
    #[error("png: {0}")]
    Png(#[from] image::ImageError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Image8 {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<u8>,
}

impl std::fmt::Debug for Image8 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Image8({}x{}x{})", self.height, self.width, self.channels)
    }
}

impl Image8 {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<u8>) -> Result<Self, ImageError> {
        if height * width * channels != data.len() || data.is_empty() {
            return Err(ImageError::BadBuffer { height, width, channels, got: data.len() });
        }
        Ok(Self { height, width, channels, data })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: u8) -> Self {
        Self { height, width, channels, data: vec![value; height * width * channels] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    pub fn get(&self, row: usize, col: usize, ch: usize) -> u8 {
        self.data[(row * self.width + col) * self.channels + ch]
    }

    pub fn same_shape(&self, other: &Image8) -> Result<(), ImageError> {
        if self.dims() != other.dims() {
            return Err(ImageError::ShapeMismatch(self.dims(), other.dims()));
        }
        Ok(())
    }

    /// Pixel values scaled to `[0, 1]` as an `[H, W, C]` tensor.
    pub fn to_tensor(&self) -> Tensor {
        let data = self.data.iter().map(|&v| v as f32 / 255.0).collect();
        Tensor::new(vec![self.height, self.width, self.channels], data)
            .expect("image dims are nonzero")
    }

    /// Inverse of [`Image8::to_tensor`]; values are rounded and clamped.
    pub fn from_tensor(t: &Tensor) -> Result<Self, ImageError> {
        let (h, w, c) = match t.shape() {
            [h, w, c] => (*h, *w, *c),
            s => return Err(ImageError::BadBuffer { height: s.len(), width: 0, channels: 0, got: t.numel() }),
        };
        let data = t.data().iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8).collect();
        Self::new(h, w, c, data)
    }

    pub fn encode_png(&self) -> Result<Vec<u8>, ImageError> {
        let color = match self.channels {
            1 => image::ExtendedColorType::L8,
            3 => image::ExtendedColorType::Rgb8,
            c => return Err(ImageError::Channels(c)),
        };
        let mut out = Vec::new();
        image::write_buffer_with_format(
            &mut Cursor::new(&mut out),
            &self.data,
            self.width as u32,
            self.height as u32,
            color,
            image::ImageFormat::Png,
        )?;
        Ok(out)
    }

    pub fn decode_png(bytes: &[u8]) -> Result<Self, ImageError> {
        let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)?;
        Ok(Self::from_dynamic(img))
    }

    fn from_dynamic(img: image::DynamicImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        match img {
            image::DynamicImage::ImageLuma8(buf) => Self { height: h, width: w, channels: 1, data: buf.into_raw() },
            other => Self { height: h, width: w, channels: 3, data: other.to_rgb8().into_raw() },
        }
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<(), ImageError> {
        std::fs::write(path, self.encode_png()?)?;
        Ok(())
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self, ImageError> {
        Self::decode_png(&std::fs::read(path)?)
    }
}

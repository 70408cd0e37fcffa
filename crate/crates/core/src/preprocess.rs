//! Image decoding and the classifier input pipeline:
//! decode -> RGB -> 224x224 bilinear resize -> (optional flip) -> ImageNet normalization.

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::tensor::Tensor;

pub const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];
pub const TARGET_SIZE: usize = 224;

#[derive(Debug, Error)]
pub enum PreprocessError {
    #[error("cannot read {path}: {source}")]
    Unreadable {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("unsupported image {path}: {reason}")]
    Unsupported { path: PathBuf, reason: String },
    #[error("expected 1 or 3 channels, got {0}")]
    InvalidChannels(u8),
    #[error("image dimensions must be non-zero")]
    ZeroSize,
    #[error("expected a {expected} image, got {found}")]
    WrongShape { expected: String, found: String },
    #[error("buffer length {len} does not match {width}x{height}x{channels}")]
    BadBuffer {
        len: usize,
        width: usize,
        height: usize,
        channels: u8,
    },
}

/// 8-bit raster, row-major, channels interleaved.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageBuffer {
    width: usize,
    height: usize,
    channels: u8,
    data: Vec<u8>,
}

impl ImageBuffer {
    pub fn new(
        width: usize,
        height: usize,
        channels: u8,
        data: Vec<u8>,
    ) -> Result<Self, PreprocessError> {
        if !matches!(channels, 1 | 3) {
            return Err(PreprocessError::InvalidChannels(channels));
        }
        if width == 0 || height == 0 {
            return Err(PreprocessError::ZeroSize);
        }
        if data.len() != width * height * channels as usize {
            return Err(PreprocessError::BadBuffer {
                len: data.len(),
                width,
                height,
                channels,
            });
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled(
        width: usize,
        height: usize,
        channels: u8,
        value: u8,
    ) -> Result<Self, PreprocessError> {
        Self::new(
            width,
            height,
            channels,
            vec![value; width * height * channels as usize],
        )
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> u8 {
        self.channels
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[u8] {
        let c = self.channels as usize;
        let i = (y * self.width + x) * c;
        &self.data[i..i + c]
    }

    fn describe(&self) -> String {
        format!("{}x{}x{}", self.width, self.height, self.channels)
    }

    /// Encodes as PNG (grayscale or RGB).
    pub fn save_png(&self, path: &Path) -> Result<(), PreprocessError> {
        let color = if self.channels == 1 {
            image::ExtendedColorType::L8
        } else {
            image::ExtendedColorType::Rgb8
        };
        image::save_buffer_with_format(
            path,
            &self.data,
            self.width as u32,
            self.height as u32,
            color,
            image::ImageFormat::Png,
        )
        .map_err(|e| PreprocessError::Unsupported {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }

    /// Encodes as baseline JPEG at the given quality.
    pub fn save_jpeg(&self, path: &Path, quality: u8) -> Result<(), PreprocessError> {
        let color = if self.channels == 1 {
            image::ExtendedColorType::L8
        } else {
            image::ExtendedColorType::Rgb8
        };
        let io_err = |e: std::io::Error| PreprocessError::Unreadable {
            path: path.to_path_buf(),
            source: e,
        };
        let file = std::fs::File::create(path).map_err(io_err)?;
        let mut enc = image::codecs::jpeg::JpegEncoder::new_with_quality(
            std::io::BufWriter::new(file),
            quality,
        );
        enc.encode(&self.data, self.width as u32, self.height as u32, color)
            .map_err(|e| PreprocessError::Unsupported {
                path: path.to_path_buf(),
                reason: e.to_string(),
            })
    }
}

/// Decodes a PNG or JPEG file. Grayscale sources stay single-channel; colour
/// sources become RGB. Alpha is dropped.
pub fn load_image(path: &Path) -> Result<ImageBuffer, PreprocessError> {
    let bytes = std::fs::read(path).map_err(|e| PreprocessError::Unreadable {
        path: path.to_path_buf(),
        source: e,
    })?;
    let unsupported = |reason: String| PreprocessError::Unsupported {
        path: path.to_path_buf(),
        reason,
    };
    let format = image::guess_format(&bytes).map_err(|e| unsupported(e.to_string()))?;
    if !matches!(format, image::ImageFormat::Png | image::ImageFormat::Jpeg) {
        return Err(unsupported(format!("{format:?} is not PNG or JPEG")));
    }
    let img = image::load_from_memory_with_format(&bytes, format)
        .map_err(|e| unsupported(e.to_string()))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    if img.color().has_color() {
        ImageBuffer::new(w, h, 3, img.to_rgb8().into_raw())
    } else {
        ImageBuffer::new(w, h, 1, img.to_luma8().into_raw())
    }
}

/// Replicates a grayscale plane across three channels; RGB passes through.
pub fn to_rgb(img: &ImageBuffer) -> Result<ImageBuffer, PreprocessError> {
    match img.channels {
        3 => Ok(img.clone()),
        1 => {
            let data = img.data.iter().flat_map(|&v| [v, v, v]).collect();
            ImageBuffer::new(img.width, img.height, 3, data)
        }
        c => Err(PreprocessError::InvalidChannels(c)),
    }
}

/// Bilinear resize with half-pixel-centre sampling and edge clamping.
pub fn resize_bilinear(
    img: &ImageBuffer,
    width: usize,
    height: usize,
) -> Result<ImageBuffer, PreprocessError> {
    if width == 0 || height == 0 {
        return Err(PreprocessError::ZeroSize);
    }
    if width == img.width && height == img.height {
        return Ok(img.clone());
    }
    let c = img.channels as usize;
    let taps = |dst: usize, src: usize| -> Vec<(usize, usize, f32)> {
        let ratio = src as f32 / dst as f32;
        (0..dst)
            .map(|i| {
                let s = ((i as f32 + 0.5) * ratio - 0.5).clamp(0.0, (src - 1) as f32);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(src - 1);
                (i0, i1, s - i0 as f32)
            })
            .collect()
    };
    let xs = taps(width, img.width);
    let ys = taps(height, img.height);
    let mut out = Vec::with_capacity(width * height * c);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            for ch in 0..c {
                let at = |x: usize, y: usize| img.data[(y * img.width + x) * c + ch] as f32;
                let top = at(x0, y0) * (1.0 - fx) + at(x1, y0) * fx;
                let bot = at(x0, y1) * (1.0 - fx) + at(x1, y1) * fx;
                let v = top * (1.0 - fy) + bot * fy;
                out.push(v.round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    ImageBuffer::new(width, height, img.channels, out)
}

/// Mirrors every row.
pub fn hflip(img: &ImageBuffer) -> ImageBuffer {
    let c = img.channels as usize;
    let mut data = Vec::with_capacity(img.data.len());
    for row in img.data.chunks(img.width * c) {
        for px in row.chunks(c).rev() {
            data.extend_from_slice(px);
        }
    }
    ImageBuffer {
        data,
        ..img.clone()
    }
}

/// `(pixel / 255 - mean_c) / std_c` into a `[1, 3, 224, 224]` tensor.
pub fn normalize_imagenet(img: &ImageBuffer) -> Result<Tensor, PreprocessError> {
    if img.channels != 3 || img.width != TARGET_SIZE || img.height != TARGET_SIZE {
        return Err(PreprocessError::WrongShape {
            expected: format!("{TARGET_SIZE}x{TARGET_SIZE}x3"),
            found: img.describe(),
        });
    }
    let plane = TARGET_SIZE * TARGET_SIZE;
    let mut out = vec![0f32; 3 * plane];
    for (p, px) in img.data.chunks(3).enumerate() {
        for ch in 0..3 {
            out[ch * plane + p] = (px[ch] as f32 / 255.0 - IMAGENET_MEAN[ch]) / IMAGENET_STD[ch];
        }
    }
    Ok(Tensor::from_f32(&[1, 3, TARGET_SIZE, TARGET_SIZE], out).expect("shape is consistent"))
}

/// Inverse of [`normalize_imagenet`], rounding back to 8-bit samples.
pub fn denormalize_imagenet(t: &Tensor) -> Result<ImageBuffer, PreprocessError> {
    let wrong = || PreprocessError::WrongShape {
        expected: format!("[1,3,{TARGET_SIZE},{TARGET_SIZE}] tensor"),
        found: format!("{:?}", t.dims()),
    };
    if t.dims() != [1, 3, TARGET_SIZE, TARGET_SIZE] {
        return Err(wrong());
    }
    let v = t.as_f32().map_err(|_| wrong())?;
    let plane = TARGET_SIZE * TARGET_SIZE;
    let mut data = Vec::with_capacity(3 * plane);
    for p in 0..plane {
        for ch in 0..3 {
            let x = (v[ch * plane + p] * IMAGENET_STD[ch] + IMAGENET_MEAN[ch]) * 255.0;
            data.push(x.round().clamp(0.0, 255.0) as u8);
        }
    }
    ImageBuffer::new(TARGET_SIZE, TARGET_SIZE, 3, data)
}

/// Full inference pipeline for one decoded image.
pub fn prepare(img: &ImageBuffer, flip: bool) -> Result<Tensor, PreprocessError> {
    let rgb = to_rgb(img)?;
    let mut sized = resize_bilinear(&rgb, TARGET_SIZE, TARGET_SIZE)?;
    if flip {
        sized = hflip(&sized);
    }
    normalize_imagenet(&sized)
}

pub fn load_and_prepare(path: &Path, flip: bool) -> Result<Tensor, PreprocessError> {
    prepare(&load_image(path)?, flip)
}

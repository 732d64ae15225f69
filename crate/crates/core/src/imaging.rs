//! Image loading, ImageNet-style preprocessing and heatmap overlays.

use std::path::Path;

use image::imageops::FilterType;
use image::{DynamicImage, Rgb, RgbImage};

use crate::config::IN_CHANNELS;
use crate::error::{Error, Result};
use crate::recipro_cam::SaliencyMap;

pub const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

/// Three-channel CHW image in `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    data: Vec<f32>,
    /// Whether per-channel mean/std normalization has been applied.
    normalized: bool,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, data: Vec<f32>, normalized: bool) -> Result<Self> {
        if data.len() != IN_CHANNELS * height * width {
            return Err(Error::shape(
                "image tensor",
                format!("{}", IN_CHANNELS * height * width),
                data.len(),
            ));
        }
        Ok(Self {
            height,
            width,
            data,
            normalized,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; IN_CHANNELS * height * width],
            normalized: true,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let plane = self.height * self.width;
        &self.data[c * plane..(c + 1) * plane]
    }

    pub fn row(&self, c: usize, y: usize) -> &[f32] {
        let start = (c * self.height + y) * self.width;
        &self.data[start..start + self.width]
    }

    /// Multiplies every channel by a `height × width` weight plane.
    pub fn weighted(&self, plane: &[f32]) -> Result<ImageTensor> {
        let hw = self.height * self.width;
        if plane.len() != hw {
            return Err(Error::shape("weight plane", hw, plane.len()));
        }
        let data = self
            .data
            .chunks_exact(hw)
            .flat_map(|ch| ch.iter().zip(plane).map(|(v, w)| v * w))
            .collect();
        Ok(ImageTensor {
            height: self.height,
            width: self.width,
            data,
            normalized: self.normalized,
        })
    }
}

/// Resize → center crop → scale to `[0, 1]` → per-channel normalization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Preprocess {
    pub resize: u32,
    pub crop: u32,
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for Preprocess {
    fn default() -> Self {
        Self {
            resize: 256,
            crop: 224,
            mean: IMAGENET_MEAN,
            std: IMAGENET_STD,
        }
    }
}

impl Preprocess {
    /// Keeps the 256/224 resize-to-crop ratio for other input resolutions.
    pub fn for_size(crop: usize) -> Self {
        Self {
            resize: ((crop * 256) as f64 / 224.0).round() as u32,
            crop: crop as u32,
            ..Self::default()
        }
    }

    /// Direct (aspect-distorting) bilinear resize to `resize × resize`, then
    /// the central `crop × crop` window.
    pub fn crop_rgb(&self, image: &DynamicImage) -> RgbImage {
        let resized = image
            .resize_exact(self.resize, self.resize, FilterType::Triangle)
            .to_rgb8();
        let off = (self.resize - self.crop) / 2;
        image::imageops::crop_imm(&resized, off, off, self.crop, self.crop).to_image()
    }

    pub fn normalize(&self, value: f32, channel: usize) -> f32 {
        (value - self.mean[channel]) / self.std[channel]
    }

    pub fn tensor_from_rgb(&self, rgb: &RgbImage) -> ImageTensor {
        let (w, h) = (rgb.width() as usize, rgb.height() as usize);
        let mut data = vec![0.0f32; IN_CHANNELS * h * w];
        for (i, px) in rgb.as_raw().chunks_exact(3).enumerate() {
            for c in 0..IN_CHANNELS {
                data[c * h * w + i] = self.normalize(px[c] as f32 / 255.0, c);
            }
        }
        ImageTensor {
            height: h,
            width: w,
            data,
            normalized: true,
        }
    }

    pub fn apply(&self, image: &DynamicImage) -> ImageTensor {
        self.tensor_from_rgb(&self.crop_rgb(image))
    }

    pub fn load(&self, path: impl AsRef<Path>) -> Result<ImageTensor> {
        Ok(self.apply(&open_image(path)?))
    }

    /// Undoes the normalization, returning `[0, 1]` pixel values.
    pub fn denormalize(&self, tensor: &ImageTensor) -> ImageTensor {
        if !tensor.normalized {
            return tensor.clone();
        }
        let plane = tensor.height * tensor.width;
        let data = tensor
            .data
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let c = i / plane;
                v * self.std[c] + self.mean[c]
            })
            .collect();
        ImageTensor {
            height: tensor.height,
            width: tensor.width,
            data,
            normalized: false,
        }
    }
}

pub fn open_image(path: impl AsRef<Path>) -> Result<DynamicImage> {
    let path = path.as_ref();
    image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Default 256 → 224 preprocessing of an image file.
pub fn preprocess(path: impl AsRef<Path>) -> Result<ImageTensor> {
    Preprocess::default().load(path)
}

/// Bilinear upsampling of a row-major `grid × grid` map to `height × width`
/// with half-pixel centers (align-corners off) and edge clamping.
pub fn upsample_bilinear(values: &[f32], grid: usize, height: usize, width: usize) -> Vec<f32> {
    debug_assert_eq!(values.len(), grid * grid);
    let axis = |dst: usize, size: usize| -> (usize, usize, f32) {
        let scale = grid as f32 / size as f32;
        let src = ((dst as f32 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(grid - 1);
        let i1 = (i0 + 1).min(grid - 1);
        (i0, i1, src - i0 as f32)
    };
    let cols: Vec<_> = (0..width).map(|x| axis(x, width)).collect();
    let mut out = Vec::with_capacity(height * width);
    for y in 0..height {
        let (y0, y1, ly) = axis(y, height);
        for &(x0, x1, lx) in &cols {
            let top = values[y0 * grid + x0] * (1.0 - lx) + values[y0 * grid + x1] * lx;
            let bottom = values[y1 * grid + x0] * (1.0 - lx) + values[y1 * grid + x1] * lx;
            out.push(top * (1.0 - ly) + bottom * ly);
        }
    }
    out
}

/// Classic "jet" colormap on `[0, 1]`: dark blue → cyan → yellow → dark red.
pub fn jet(value: f32) -> [u8; 3] {
    let v = value.clamp(0.0, 1.0);
    let channel = |center: f32| (1.5 - (4.0 * v - center).abs()).clamp(0.0, 1.0);
    [channel(3.0), channel(2.0), channel(1.0)].map(|c| (c * 255.0).round() as u8)
}

/// Alpha-blends the jet-colored, upsampled map over `base` at 50 %.
pub fn overlay_heatmap(base: &RgbImage, saliency: &SaliencyMap) -> RgbImage {
    let (w, h) = (base.width() as usize, base.height() as usize);
    let up = upsample_bilinear(saliency.values(), saliency.grid(), h, w);
    RgbImage::from_fn(base.width(), base.height(), |x, y| {
        let heat = jet(up[y as usize * w + x as usize]);
        let px = base.get_pixel(x, y);
        Rgb(std::array::from_fn(|c| {
            (0.5 * px[c] as f32 + 0.5 * heat[c] as f32).round() as u8
        }))
    })
}

pub fn render_heatmap(
    image_path: impl AsRef<Path>,
    saliency: &SaliencyMap,
    out_path: impl AsRef<Path>,
    preprocess: &Preprocess,
) -> Result<()> {
    let base = preprocess.crop_rgb(&open_image(image_path)?);
    let out_path = out_path.as_ref();
    overlay_heatmap(&base, saliency)
        .save(out_path)
        .map_err(|source| Error::Image {
            path: out_path.to_path_buf(),
            source,
        })
}

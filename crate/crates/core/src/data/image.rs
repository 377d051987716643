use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Batch, ClassId, SampleRecord, TaskMode};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Writes a 3×H×W tensor with values in [0, 1] as an 8-bit RGB PNG.
/// Values outside [0, 1] are clamped.
pub fn save_png(image: &Tensor<f32>, path: &Path) -> Result<()> {
    let (c, h, w) = match image.shape() {
        &[c, h, w] => (c, h, w),
        other => {
            return Err(Error::ShapeMismatch {
                op: "save_png",
                lhs: vec![3, 0, 0],
                rhs: other.to_vec(),
            })
        }
    };
    if c != 3 {
        return Err(Error::ShapeMismatch {
            op: "save_png",
            lhs: vec![3, h, w],
            rhs: vec![c, h, w],
        });
    }
    let d = image.data();
    let at = |ch: usize, x: u32, y: u32| {
        (d[(ch * h + y as usize) * w + x as usize].clamp(0.0, 1.0) * 255.0).round() as u8
    };
    image::RgbImage::from_fn(w as u32, h as u32, |x, y| image::Rgb([at(0, x, y), at(1, x, y), at(2, x, y)]))
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

/// Decodes an image file to a 3×H×W tensor with values in [0, 1].
pub fn decode_image(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0f32; 3 * h * w];
    for (x, y, pixel) in img.enumerate_pixels() {
        for ch in 0..3 {
            data[(ch * h + y as usize) * w + x as usize] = pixel.0[ch] as f32 / 255.0;
        }
    }
    Tensor::new([3, h, w], data)
}

/// Bilinear resize of a C×H×W tensor with half-pixel sample centres and
/// edge clamping.
pub fn resize_bilinear<T: Real>(image: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let (c, h, w) = match image.shape() {
        &[c, h, w] if h > 0 && w > 0 => (c, h, w),
        other => {
            return Err(Error::invalid(
                "resize_bilinear",
                format!("expected a non-empty C×H×W image, got {other:?}"),
            ))
        }
    };
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid("resize_bilinear", "target size must be positive"));
    }
    if (h, w) == (out_h, out_w) {
        return Ok(image.clone());
    }
    let axis = |out: usize, size: usize| -> Vec<(usize, usize, T)> {
        (0..out)
            .map(|i| {
                let s = ((i as f64 + 0.5) * size as f64 / out as f64 - 0.5).clamp(0.0, (size - 1) as f64);
                let i0 = s.floor() as usize;
                (i0, (i0 + 1).min(size - 1), T::from(s - i0 as f64).expect("fraction in [0, 1)"))
            })
            .collect()
    };
    let (ys, xs) = (axis(out_h, h), axis(out_w, w));
    let src = image.data();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for &(y0, y1, ty) in &ys {
            for &(x0, x1, tx) in &xs {
                let top = lerp(plane[y0 * w + x0], plane[y0 * w + x1], tx);
                let bottom = lerp(plane[y1 * w + x0], plane[y1 * w + x1], tx);
                out.push(lerp(top, bottom, ty));
            }
        }
    }
    Tensor::new([c, out_h, out_w], out)
}

/// `a + (b − a)·t`; exact when `a == b`.
fn lerp<T: Real>(a: T, b: T, t: T) -> T {
    a + (b - a) * t
}

/// Pixel normalization applied after scaling to [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub enum Normalization {
    #[default]
    None,
    Standardize { mean: [f32; 3], std: [f32; 3] },
}

impl Normalization {
    pub fn apply(&self, image: &mut Tensor<f32>) {
        if let Normalization::Standardize { mean, std } = self {
            let plane = image.numel() / 3;
            for (ch, chunk) in image.data_mut().chunks_mut(plane).enumerate() {
                chunk.iter_mut().for_each(|v| *v = (*v - mean[ch]) / std[ch]);
            }
        }
    }

    /// Applies to every image of an N×3×H×W batch.
    pub fn apply_batch(&self, images: &mut Tensor<f32>) -> Result<()> {
        let (_, c, h, w) = images.dims4("normalize")?;
        if c != 3 {
            return Err(Error::invalid("normalize", format!("expected 3 channels, got {c}")));
        }
        if let Normalization::Standardize { mean, std } = self {
            for (i, chunk) in images.data_mut().chunks_mut(h * w).enumerate() {
                let ch = i % 3;
                chunk.iter_mut().for_each(|v| *v = (*v - mean[ch]) / std[ch]);
            }
        }
        Ok(())
    }
}

/// Decoded samples addressable by index.
pub trait SampleSource: Sync {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn class(&self, index: usize) -> ClassId;

    /// 3×H×W pixels in [0, 1] at the source resolution.
    fn image(&self, index: usize) -> Result<Tensor<f32>>;

    fn path(&self, index: usize) -> Option<&Path>;
}

/// Every sample decoded and resized up front.
#[derive(Debug, Clone)]
pub struct MemorySource {
    images: Vec<Tensor<f32>>,
    classes: Vec<ClassId>,
    paths: Vec<PathBuf>,
}

impl MemorySource {
    pub fn load(records: &[SampleRecord], height: usize, width: usize) -> Result<Self> {
        let images = records
            .par_iter()
            .map(|r| resize_bilinear(&decode_image(&r.path)?, height, width))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            images,
            classes: records.iter().map(|r| r.class).collect(),
            paths: records.iter().map(|r| r.path.clone()).collect(),
        })
    }

    pub fn from_tensors(images: Vec<Tensor<f32>>, classes: Vec<ClassId>) -> Result<Self> {
        if images.len() != classes.len() {
            return Err(Error::invalid("MemorySource", "one class per image required"));
        }
        Ok(Self {
            paths: Vec::new(),
            images,
            classes,
        })
    }

    /// The subset at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            classes: indices.iter().map(|&i| self.classes[i]).collect(),
            paths: if self.paths.is_empty() {
                Vec::new()
            } else {
                indices.iter().map(|&i| self.paths[i].clone()).collect()
            },
        }
    }
}

impl SampleSource for MemorySource {
    fn len(&self) -> usize {
        self.images.len()
    }

    fn class(&self, index: usize) -> ClassId {
        self.classes[index]
    }

    fn image(&self, index: usize) -> Result<Tensor<f32>> {
        Ok(self.images[index].clone())
    }

    fn path(&self, index: usize) -> Option<&Path> {
        self.paths.get(index).map(PathBuf::as_path)
    }
}

/// Decodes each sample on access.
#[derive(Debug, Clone)]
pub struct DiskSource {
    records: Vec<SampleRecord>,
    height: usize,
    width: usize,
}

impl DiskSource {
    pub fn new(records: Vec<SampleRecord>, height: usize, width: usize) -> Self {
        Self {
            records,
            height,
            width,
        }
    }
}

impl SampleSource for DiskSource {
    fn len(&self) -> usize {
        self.records.len()
    }

    fn class(&self, index: usize) -> ClassId {
        self.records[index].class
    }

    fn image(&self, index: usize) -> Result<Tensor<f32>> {
        resize_bilinear(&decode_image(&self.records[index].path)?, self.height, self.width)
    }

    fn path(&self, index: usize) -> Option<&Path> {
        Some(&self.records[index].path)
    }
}

/// Per-channel mean and standard deviation over every pixel of `source`.
pub fn channel_stats(source: &dyn SampleSource) -> Result<Normalization> {
    let mut sum = [0f64; 3];
    let mut sum_sq = [0f64; 3];
    let mut count = 0usize;
    for i in 0..source.len() {
        let image = source.image(i)?;
        let plane = image.numel() / 3;
        for (ch, chunk) in image.data().chunks(plane).enumerate() {
            for &v in chunk {
                sum[ch] += v as f64;
                sum_sq[ch] += (v as f64) * (v as f64);
            }
        }
        count += plane;
    }
    if count == 0 {
        return Err(Error::Dataset("cannot compute statistics of an empty split".into()));
    }
    let mut mean = [0f32; 3];
    let mut std = [0f32; 3];
    for ch in 0..3 {
        let m = sum[ch] / count as f64;
        mean[ch] = m as f32;
        std[ch] = ((sum_sq[ch] / count as f64 - m * m).max(0.0).sqrt()).max(1e-6) as f32;
    }
    Ok(Normalization::Standardize { mean, std })
}

/// Assembles the samples at `indices` (in order) into a batch.
pub fn load_batch(
    source: &dyn SampleSource,
    indices: &[usize],
    normalization: &Normalization,
    task: TaskMode,
) -> Result<Batch> {
    if indices.is_empty() {
        return Err(Error::invalid("load_batch", "no samples requested"));
    }
    let images = indices
        .par_iter()
        .map(|&i| {
            let mut image = source.image(i)?;
            normalization.apply(&mut image);
            Ok(image)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Batch {
        images: Tensor::stack(&images)?,
        labels: indices.iter().map(|&i| task.label(source.class(i))).collect(),
        indices: indices.to_vec(),
    })
}

//! Per-sample random geometric augmentation.
//!
//! A transform maps input pixel coordinates (x right, y down, pixel centres
//! at integers) to output coordinates in the order flip → rotate → shear →
//! shift, with rotation and shear taken about the image centre. Warping is by
//! inverse mapping: each output pixel samples the input at the preimage of its
//! centre with bilinear interpolation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FillMode {
    /// Out-of-range samples take the nearest edge pixel.
    #[default]
    Nearest,
    Constant(f32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    #[default]
    Bilinear,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentationPolicy {
    pub rotation_max_deg: f64,
    pub width_shift_frac: f64,
    pub height_shift_frac: f64,
    pub shear_max_deg: f64,
    pub hflip_prob: f64,
    pub vflip_prob: f64,
    pub fill_mode: FillMode,
    pub interpolation: Interpolation,
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        Self {
            rotation_max_deg: 30.0,
            width_shift_frac: 0.1,
            height_shift_frac: 0.1,
            shear_max_deg: 15.0,
            hflip_prob: 0.5,
            vflip_prob: 0.5,
            fill_mode: FillMode::Nearest,
            interpolation: Interpolation::Bilinear,
        }
    }
}

impl AugmentationPolicy {
    /// Policy that leaves every image unchanged.
    pub fn none() -> Self {
        Self {
            rotation_max_deg: 0.0,
            width_shift_frac: 0.0,
            height_shift_frac: 0.0,
            shear_max_deg: 0.0,
            hflip_prob: 0.0,
            vflip_prob: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str, v: f64| {
            Err(Error::Config(format!("augmentation {what} out of range: {v}")))
        };
        if !(self.rotation_max_deg >= 0.0 && self.rotation_max_deg.is_finite()) {
            return bad("rotation_max_deg", self.rotation_max_deg);
        }
        if !(0.0..90.0).contains(&self.shear_max_deg) {
            return bad("shear_max_deg", self.shear_max_deg);
        }
        for (what, v) in [
            ("width_shift_frac", self.width_shift_frac),
            ("height_shift_frac", self.height_shift_frac),
        ] {
            if !(0.0..1.0).contains(&v) {
                return bad(what, v);
            }
        }
        for (what, v) in [("hflip_prob", self.hflip_prob), ("vflip_prob", self.vflip_prob)] {
            if !(0.0..=1.0).contains(&v) {
                return bad(what, v);
            }
        }
        Ok(())
    }
}

/// One drawn augmentation. `matrix` is the forward affine map in pixel
/// coordinates, applied after the flips.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampledTransform {
    pub matrix: [[f64; 3]; 2],
    pub hflip: bool,
    pub vflip: bool,
    pub angle_deg: f64,
    pub shear_deg: f64,
    pub shift: (f64, f64),
}

impl SampledTransform {
    pub fn identity() -> Self {
        Self {
            matrix: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
            hflip: false,
            vflip: false,
            angle_deg: 0.0,
            shear_deg: 0.0,
            shift: (0.0, 0.0),
        }
    }

    /// Rotation by `angle_deg` (clockwise on screen, since y points down),
    /// then x-shear by `shear_deg`, then translation by `shift`, about the
    /// centre of an `height`×`width` image.
    pub fn from_parts(
        angle_deg: f64,
        shear_deg: f64,
        shift: (f64, f64),
        hflip: bool,
        vflip: bool,
        height: usize,
        width: usize,
    ) -> Self {
        let (s, c) = angle_deg.to_radians().sin_cos();
        let k = shear_deg.to_radians().tan();
        // L = shear · rotation
        let l = [[c + k * s, -s + k * c], [s, c]];
        let (cx, cy) = ((width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0);
        let ox = cx + shift.0 - (l[0][0] * cx + l[0][1] * cy);
        let oy = cy + shift.1 - (l[1][0] * cx + l[1][1] * cy);
        Self {
            matrix: [[l[0][0], l[0][1], ox], [l[1][0], l[1][1], oy]],
            hflip,
            vflip,
            angle_deg,
            shear_deg,
            shift,
        }
    }

    pub fn is_identity_warp(&self) -> bool {
        self.matrix == Self::identity().matrix
    }

    pub fn determinant(&self) -> f64 {
        self.matrix[0][0] * self.matrix[1][1] - self.matrix[0][1] * self.matrix[1][0]
    }

    /// Maps an output coordinate back to the (post-flip) input coordinate.
    pub fn inverse_map(&self, x: f64, y: f64) -> Result<(f64, f64)> {
        let det = self.determinant();
        if det.abs() < 1e-12 || !det.is_finite() {
            return Err(Error::invalid("apply_transform", "transform is not invertible"));
        }
        let [[a, b, tx], [c, d, ty]] = self.matrix;
        let (u, v) = (x - tx, y - ty);
        Ok(((d * u - b * v) / det, (a * v - c * u) / det))
    }
}

/// Draws a transform for an `height`×`width` image.
pub fn sample_transform(
    policy: &AugmentationPolicy,
    rng: &mut impl Rng,
    height: usize,
    width: usize,
) -> SampledTransform {
    let hflip = rng.random_bool(policy.hflip_prob);
    let vflip = rng.random_bool(policy.vflip_prob);
    let mut symmetric = |max: f64| (2.0 * rng.random::<f64>() - 1.0) * max;
    let angle = symmetric(policy.rotation_max_deg);
    let shear = symmetric(policy.shear_max_deg);
    let tx = symmetric(policy.width_shift_frac) * width as f64;
    let ty = symmetric(policy.height_shift_frac) * height as f64;
    SampledTransform::from_parts(angle, shear, (tx, ty), hflip, vflip, height, width)
}

const AUGMENT_STREAM: u64 = 0x6175_676d;

/// RNG stream for one sample of one epoch. Independent of batch layout and
/// thread scheduling.
pub fn sample_stream(seed: u64, epoch: u64, index: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    for (chunk, v) in key.chunks_mut(8).zip([seed, epoch, index, AUGMENT_STREAM]) {
        chunk.copy_from_slice(&v.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

/// Warps a C×H×W image.
pub fn apply_transform(
    image: &Tensor<f32>,
    t: &SampledTransform,
    policy: &AugmentationPolicy,
) -> Result<Tensor<f32>> {
    let (c, h, w) = match image.shape() {
        &[c, h, w] => (c, h, w),
        other => {
            return Err(Error::invalid(
                "apply_transform",
                format!("expected a C×H×W image, got {other:?}"),
            ))
        }
    };
    if h < 2 || w < 2 {
        return Err(Error::invalid("apply_transform", "image must be at least 2×2"));
    }
    let src = flipped(image.data(), c, h, w, t.hflip, t.vflip);
    if t.is_identity_warp() {
        return Tensor::new([c, h, w], src);
    }
    let mut out = vec![0f32; src.len()];
    let plane = h * w;
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = t.inverse_map(x as f64, y as f64)?;
            for ch in 0..c {
                out[ch * plane + y * w + x] =
                    bilinear(&src[ch * plane..(ch + 1) * plane], h, w, sx, sy, policy.fill_mode);
            }
        }
    }
    Tensor::new([c, h, w], out)
}

fn flipped(data: &[f32], c: usize, h: usize, w: usize, hflip: bool, vflip: bool) -> Vec<f32> {
    if !hflip && !vflip {
        return data.to_vec();
    }
    let mut out = vec![0f32; data.len()];
    for ch in 0..c {
        for y in 0..h {
            let sy = if vflip { h - 1 - y } else { y };
            for x in 0..w {
                let sx = if hflip { w - 1 - x } else { x };
                out[(ch * h + y) * w + x] = data[(ch * h + sy) * w + sx];
            }
        }
    }
    out
}

fn bilinear(plane: &[f32], h: usize, w: usize, x: f64, y: f64, fill: FillMode) -> f32 {
    let (x, y) = match fill {
        FillMode::Nearest => (x.clamp(0.0, (w - 1) as f64), y.clamp(0.0, (h - 1) as f64)),
        FillMode::Constant(_) => (x, y),
    };
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let pixel = |yy: f64, xx: f64| -> f64 {
        if yy < 0.0 || xx < 0.0 || yy > (h - 1) as f64 || xx > (w - 1) as f64 {
            match fill {
                FillMode::Constant(v) => v as f64,
                // Unreachable after clamping, except for the zero-weight
                // neighbour on the far edge.
                FillMode::Nearest => {
                    plane[(yy.clamp(0.0, (h - 1) as f64) as usize) * w
                        + xx.clamp(0.0, (w - 1) as f64) as usize] as f64
                }
            }
        } else {
            plane[yy as usize * w + xx as usize] as f64
        }
    };
    let top = pixel(y0, x0) * (1.0 - fx) + pixel(y0, x0 + 1.0) * fx;
    let bottom = pixel(y0 + 1.0, x0) * (1.0 - fx) + pixel(y0 + 1.0, x0 + 1.0) * fx;
    (top * (1.0 - fy) + bottom * fy) as f32
}

/// Augments every sample of `batch` with a transform drawn from the stream
/// keyed by (`seed`, `epoch`, sample index). Labels and order are unchanged.
pub fn augment_batch(
    batch: &Batch,
    policy: &AugmentationPolicy,
    seed: u64,
    epoch: u64,
) -> Result<Batch> {
    policy.validate()?;
    let (n, c, h, w) = batch.images.dims4("augment_batch")?;
    if n == 0 {
        return Err(Error::invalid("augment_batch", "batch is empty"));
    }
    let per_sample = c * h * w;
    let warped: Vec<Vec<f32>> = batch
        .images
        .data()
        .par_chunks(per_sample)
        .zip(batch.indices.par_iter())
        .map(|(pixels, &index)| {
            let mut rng = sample_stream(seed, epoch, index as u64);
            let t = sample_transform(policy, &mut rng, h, w);
            let image = Tensor::new([c, h, w], pixels.to_vec())?;
            Ok(apply_transform(&image, &t, policy)?.into_data())
        })
        .collect::<Result<_>>()?;
    Ok(Batch {
        images: Tensor::new([n, c, h, w], warped.concat())?,
        labels: batch.labels.clone(),
        indices: batch.indices.clone(),
    })
}

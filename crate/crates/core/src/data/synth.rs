use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{save_png, ClassId, Fruit, Quality};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const SYNTH_STREAM: u64 = 0x7379_6e74;
const SUPERSAMPLE: usize = 3;

/// Where the shape sits in the frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Placement {
    /// Near the image centre, filling most of the frame.
    #[default]
    Centered,
    /// Centred in one randomly chosen quadrant at half scale.
    Quadrant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthOptions {
    pub per_class: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    pub placement: Placement,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self {
            per_class: 50,
            height: 32,
            width: 32,
            seed: 0,
            placement: Placement::Centered,
        }
    }
}

/// Ground truth for one generated image. `bbox` is `[x0, y0, x1, y1]`
/// inclusive over pixels at least half covered by the shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeAnnotation {
    /// Relative to the dataset root.
    pub path: PathBuf,
    pub fruit: Fruit,
    pub quality: Quality,
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
    pub center_x: f64,
    pub center_y: f64,
}

impl ShapeAnnotation {
    pub fn class(&self) -> ClassId {
        ClassId {
            fruit: self.fruit,
            quality: self.quality,
        }
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        (self.x0..=self.x1).contains(&x) && (self.y0..=self.y1).contains(&y)
    }

    /// Reads `annotations.csv` from a generated dataset root.
    pub fn read_all(root: impl AsRef<Path>) -> Result<Vec<ShapeAnnotation>> {
        let path = root.as_ref().join(ANNOTATIONS_FILE);
        let mut reader =
            csv::Reader::from_path(&path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        reader
            .deserialize()
            .map(|row| row.map_err(|e| Error::Format(format!("{}: {e}", path.display()))))
            .collect()
    }
}

pub(crate) const ANNOTATIONS_FILE: &str = "annotations.csv";

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSummary {
    pub root: PathBuf,
    pub counts: Vec<(ClassId, usize)>,
    pub annotations: Vec<ShapeAnnotation>,
}

impl SynthSummary {
    pub fn total(&self) -> usize {
        self.counts.iter().map(|(_, n)| n).sum()
    }
}

impl fmt::Display for SynthSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<20} {:>6}", "class", "images")?;
        for (class, n) in &self.counts {
            writeln!(f, "{:<20} {:>6}", class.folder_name(), n)?;
        }
        write!(f, "{:<20} {:>6}", "total", self.total())
    }
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    Circle,
    Crescent,
    Ellipse,
    SmallCircle,
    Ring,
    Pentagon,
}

impl Shape {
    fn of(fruit: Fruit) -> Self {
        match fruit {
            Fruit::Apple => Shape::Circle,
            Fruit::Banana => Shape::Crescent,
            Fruit::Guava => Shape::Ellipse,
            Fruit::Lime => Shape::SmallCircle,
            Fruit::Orange => Shape::Ring,
            Fruit::Pomegranate => Shape::Pentagon,
        }
    }

    /// Radius range as a fraction of half the shorter side.
    fn scale(self) -> (f64, f64) {
        match self {
            Shape::SmallCircle => (0.32, 0.42),
            _ => (0.62, 0.8),
        }
    }

    /// Membership in unit local coordinates.
    fn contains(self, u: f64, v: f64) -> bool {
        let r2 = u * u + v * v;
        match self {
            Shape::Circle | Shape::SmallCircle => r2 <= 1.0,
            Shape::Crescent => r2 <= 1.0 && (u - 0.45).powi(2) + v * v > 0.85 * 0.85,
            Shape::Ellipse => u * u + (v / 0.55).powi(2) <= 1.0,
            Shape::Ring => (0.55 * 0.55..=1.0).contains(&r2),
            Shape::Pentagon => {
                let apothem = (PI / 5.0).cos();
                (0..5).all(|k| {
                    let a = 2.0 * PI * k as f64 / 5.0;
                    u * a.cos() + v * a.sin() <= apothem
                })
            }
        }
    }
}

fn base_color(fruit: Fruit) -> [f64; 3] {
    match fruit {
        Fruit::Apple => [0.80, 0.12, 0.12],
        Fruit::Banana => [0.95, 0.85, 0.20],
        Fruit::Guava => [0.55, 0.78, 0.30],
        Fruit::Lime => [0.35, 0.75, 0.20],
        Fruit::Orange => [0.98, 0.55, 0.10],
        Fruit::Pomegranate => [0.62, 0.08, 0.22],
    }
}

struct Scene {
    shape: Shape,
    center: (f64, f64),
    radius: f64,
    cos: f64,
    sin: f64,
    color: [f64; 3],
    blotch_color: [f64; 3],
    /// `(u, v, radius)` in local coordinates.
    blotches: Vec<(f64, f64, f64)>,
    background: [f64; 3],
}

impl Scene {
    fn draw(class: ClassId, placement: Placement, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Self {
        let shape = Shape::of(class.fruit);
        let half = h.min(w) as f64 / 2.0;
        let (lo, hi) = shape.scale();
        let mut radius = rng.random_range(lo..hi) * half;
        let jitter = 0.08 * half;
        let (mut cx, mut cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
        if placement == Placement::Quadrant {
            radius /= 2.0;
            let q = rng.random_range(0..4u8);
            cx = if q % 2 == 0 { w as f64 / 4.0 } else { 3.0 * w as f64 / 4.0 } - 0.5;
            cy = if q / 2 == 0 { h as f64 / 4.0 } else { 3.0 * h as f64 / 4.0 } - 0.5;
        }
        let scale = if placement == Placement::Quadrant { 0.5 } else { 1.0 };
        cx += rng.random_range(-jitter..=jitter) * scale;
        cy += rng.random_range(-jitter..=jitter) * scale;
        let theta = rng.random_range(0.0..2.0 * PI);
        let base = base_color(class.fruit);
        let color = base.map(|c| (c + rng.random_range(-0.08..=0.08)).clamp(0.0, 1.0));
        let blotch_color = [0.30, 0.20, 0.10].map(|c: f64| c + rng.random_range(-0.05..=0.05));
        // Bad spreads one blotch per angular sector over the whole shape;
        // Mixed confines its blotches to the half with v > 0.
        let (count, arc) = match class.quality {
            Quality::Good => (0, 0.0),
            Quality::Bad => (8, 2.0 * PI),
            Quality::Mixed => (4, PI),
        };
        let mut blotches = Vec::with_capacity(count);
        for j in 0..count {
            let sector = (arc * j as f64 / count as f64, arc * (j + 1) as f64 / count as f64);
            let r = rng.random_range(0.2..0.3);
            let mut spot = None;
            for attempt in 0..256 {
                let (lo, hi) = if attempt < 64 { sector } else { (0.0, arc) };
                let phi = rng.random_range(lo..hi);
                let rho = rng.random_range(0.0f64..1.0).sqrt() * 0.9;
                let (u, v) = (rho * phi.cos(), rho * phi.sin());
                if shape.contains(u, v) && (arc > PI || v > 0.1) {
                    spot = Some((u, v, r));
                    break;
                }
            }
            blotches.extend(spot);
        }
        let gray: f64 = rng.random_range(0.72..0.92);
        let background = [0; 3].map(|_| (gray + rng.random_range(-0.04..=0.04)).clamp(0.0, 1.0));
        Scene {
            shape,
            center: (cx, cy),
            radius,
            cos: theta.cos(),
            sin: theta.sin(),
            color,
            blotch_color,
            blotches,
            background,
        }
    }

    fn local(&self, x: f64, y: f64) -> (f64, f64) {
        let (dx, dy) = ((x - self.center.0) / self.radius, (y - self.center.1) / self.radius);
        (self.cos * dx + self.sin * dy, -self.sin * dx + self.cos * dy)
    }

    /// Colour at a point, or `None` on the background.
    fn sample(&self, x: f64, y: f64) -> Option<[f64; 3]> {
        let (u, v) = self.local(x, y);
        if !self.shape.contains(u, v) {
            return None;
        }
        let in_blotch = self
            .blotches
            .iter()
            .any(|&(bu, bv, r)| (u - bu).powi(2) + (v - bv).powi(2) <= r * r);
        let shade = 1.05 - 0.12 * (u * u + v * v).min(1.0);
        let c = if in_blotch { self.blotch_color } else { self.color };
        Some(c.map(|c| (c * shade).clamp(0.0, 1.0)))
    }
}

/// Renders sample `index` of `class` as a 3×H×W tensor in [0, 1] plus its
/// bounding box `[x0, y0, x1, y1]` and shape centre.
pub(crate) fn render(
    options: &SynthOptions,
    class: ClassId,
    index: usize,
) -> (Tensor<f32>, [usize; 4], (f64, f64)) {
    let (h, w) = (options.height, options.width);
    let mut key = [0u8; 32];
    for (chunk, v) in key
        .chunks_mut(8)
        .zip([options.seed, class.fine_label() as u64, index as u64, SYNTH_STREAM])
    {
        chunk.copy_from_slice(&v.to_le_bytes());
    }
    let mut rng = ChaCha8Rng::from_seed(key);
    let scene = Scene::draw(class, options.placement, h, w, &mut rng);
    let mut data = vec![0f32; 3 * h * w];
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    let step = 1.0 / SUPERSAMPLE as f64;
    for y in 0..h {
        for x in 0..w {
            let noise: f64 = rng.random_range(-0.03..=0.03);
            let mut acc = [0f64; 3];
            let mut covered = 0;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let px = x as f64 - 0.5 + (sx as f64 + 0.5) * step;
                    let py = y as f64 - 0.5 + (sy as f64 + 0.5) * step;
                    let c = match scene.sample(px, py) {
                        Some(c) => {
                            covered += 1;
                            c
                        }
                        None => scene.background.map(|b| b + noise),
                    };
                    acc.iter_mut().zip(c).for_each(|(a, c)| *a += c);
                }
            }
            let n = (SUPERSAMPLE * SUPERSAMPLE) as f64;
            for ch in 0..3 {
                data[(ch * h + y) * w + x] = (acc[ch] / n).clamp(0.0, 1.0) as f32;
            }
            if 2 * covered >= SUPERSAMPLE * SUPERSAMPLE {
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x);
                y1 = y1.max(y);
            }
        }
    }
    if x0 == usize::MAX {
        let (cx, cy) = (
            scene.center.0.round().clamp(0.0, (w - 1) as f64) as usize,
            scene.center.1.round().clamp(0.0, (h - 1) as f64) as usize,
        );
        (x0, y0, x1, y1) = (cx, cy, cx, cy);
    }
    let image = Tensor::new([3, h, w], data).expect("buffer matches shape");
    (image, [x0, y0, x1, y1], scene.center)
}

/// Writes `per_class` PNGs into each `<root>/<Fruit>_<Quality>/` folder plus
/// `annotations.csv`. Output depends only on `options`.
pub fn generate_synthetic(root: impl AsRef<Path>, options: &SynthOptions) -> Result<SynthSummary> {
    let root = root.as_ref();
    if options.per_class == 0 || options.height < 8 || options.width < 8 {
        return Err(Error::Config(format!(
            "synthetic data needs per_class ≥ 1 and resolution ≥ 8×8, got {} and {}×{}",
            options.per_class, options.height, options.width
        )));
    }
    let classes: Vec<ClassId> = ClassId::all().collect();
    for class in &classes {
        let dir = root.join(class.folder_name());
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let jobs: Vec<(ClassId, usize)> = classes
        .iter()
        .flat_map(|&c| (0..options.per_class).map(move |i| (c, i)))
        .collect();
    let annotations = jobs
        .par_iter()
        .map(|&(class, index)| {
            let (image, [x0, y0, x1, y1], (center_x, center_y)) = render(options, class, index);
            let rel = PathBuf::from(class.folder_name())
                .join(format!("{}_{index:04}.png", class.folder_name()));
            let path = root.join(&rel);
            save_png(&image, &path)?;
            Ok(ShapeAnnotation {
                path: rel,
                fruit: class.fruit,
                quality: class.quality,
                x0,
                y0,
                x1,
                y1,
                center_x,
                center_y,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let csv_path = root.join(ANNOTATIONS_FILE);
    let mut writer =
        csv::Writer::from_path(&csv_path).map_err(|e| Error::Format(format!("{}: {e}", csv_path.display())))?;
    for a in &annotations {
        writer
            .serialize(a)
            .map_err(|e| Error::Format(format!("{}: {e}", csv_path.display())))?;
    }
    writer.flush().map_err(|e| Error::io(&csv_path, e))?;
    Ok(SynthSummary {
        root: root.to_path_buf(),
        counts: classes.iter().map(|&c| (c, options.per_class)).collect(),
        annotations,
    })
}

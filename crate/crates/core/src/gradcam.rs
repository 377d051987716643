//! Gradient-weighted class activation maps over a convolutional layer.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::data::{resize_bilinear, save_png};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::{Real, Tensor};

/// Class whose evidence the map shows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Target {
    #[default]
    Predicted,
    Class(usize),
}

/// Scalar differentiated with respect to the captured activations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Signal {
    /// Pre-softmax score of the target class.
    #[default]
    Logit,
    /// Negated cross-entropy against the target class, so that positive
    /// weights still mark evidence for the target.
    Loss,
}

impl std::str::FromStr for Signal {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "logit" => Ok(Signal::Logit),
            "loss" => Ok(Signal::Loss),
            other => Err(Error::Config(format!("unknown signal `{other}` (expected logit or loss)"))),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct GradCamOptions {
    /// Convolution to explain; the model's last convolution when `None`.
    pub layer: Option<String>,
    pub signal: Signal,
}

/// A forward pass that kept one convolution's output and the graph needed
/// to differentiate with respect to it.
pub struct Capture<T: Real = f32> {
    tape: Tape<T>,
    layer: String,
    activations: Var,
    logits: Var,
}

/// Runs `input` (3×H×W) through `model` in eval mode, keeping the output of
/// `layer` or of the last convolution.
pub fn capture<T: Real>(model: &Model<T>, input: &Tensor<T>, layer: Option<&str>) -> Result<Capture<T>> {
    let batch = single_batch(input)?;
    model.check_input(&batch)?;
    let layer = layer.map_or_else(|| model.last_conv_name(), str::to_string);
    let mut tape = Tape::new();
    // The input requires a gradient so every intermediate activation does.
    let x = tape.param(batch);
    let pass = model.forward_eval(&mut tape, x, false)?;
    let activations = *pass.conv_outputs.get(&layer).ok_or_else(|| {
        Error::Config(format!("model has no convolutional layer named `{layer}`"))
    })?;
    Ok(Capture {
        tape,
        layer,
        activations,
        logits: pass.logits,
    })
}

impl<T: Real> Capture<T> {
    pub fn layer(&self) -> &str {
        &self.layer
    }

    /// C×h×w activations of the captured layer.
    pub fn activations(&self) -> Tensor<T> {
        drop_batch_axis(self.tape.value(self.activations))
    }

    pub fn logits(&self) -> &[T] {
        self.tape.value(self.logits).data()
    }

    pub fn predicted(&self) -> usize {
        let logits = self.logits();
        (0..logits.len()).fold(0, |best, i| if logits[i] > logits[best] { i } else { best })
    }

    /// C×h×w gradient of `signal` for `class` with respect to the captured
    /// activations.
    pub fn gradients(&mut self, class: usize, signal: Signal) -> Result<Tensor<T>> {
        let classes = self.logits().len();
        if class >= classes {
            return Err(Error::LabelOutOfRange { label: class, classes });
        }
        self.tape.zero_grad();
        match signal {
            Signal::Logit => {
                let seed = Tensor::from_fn([1, classes], |i| if i == class { T::one() } else { T::zero() });
                self.tape.backward_with_seed(self.logits, seed)?;
            }
            Signal::Loss => {
                let (loss, _) = self.tape.softmax_cross_entropy(self.logits, &[class])?;
                let seed = Tensor::full(self.tape.value(loss).shape().to_vec(), -T::one());
                self.tape.backward_with_seed(loss, seed)?;
            }
        }
        Ok(match self.tape.grad(self.activations) {
            Some(g) => drop_batch_axis(g),
            None => drop_batch_axis(&Tensor::zeros(self.tape.value(self.activations).shape().to_vec())),
        })
    }
}

fn single_batch<T: Real>(input: &Tensor<T>) -> Result<Tensor<T>> {
    match input.shape() {
        &[c, h, w] => input.clone().reshape([1, c, h, w]),
        &[1, _, _, _] => Ok(input.clone()),
        other => Err(Error::invalid(
            "gradcam",
            format!("expected one C×H×W image, got shape {other:?}"),
        )),
    }
}

fn drop_batch_axis<T: Real>(t: &Tensor<T>) -> Tensor<T> {
    t.clone()
        .reshape(t.shape()[1..].to_vec())
        .expect("leading axis has size 1")
}

fn chw<T: Real>(t: &Tensor<T>, op: &'static str) -> Result<(usize, usize, usize)> {
    match t.shape() {
        &[c, h, w] => Ok((c, h, w)),
        other => Err(Error::invalid(op, format!("expected C×h×w, got {other:?}"))),
    }
}

/// Per-channel weights: the spatial mean of each gradient channel.
pub fn channel_weights<T: Real>(gradients: &Tensor<T>) -> Result<Vec<f64>> {
    let (_, h, w) = chw(gradients, "channel_weights")?;
    Ok(gradients
        .data()
        .chunks(h * w)
        .map(|plane| plane.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).sum::<f64>() / (h * w) as f64)
        .collect())
}

/// h×w map `Σ_c weights[c]·A_c`, before the ReLU.
pub fn weighted_activations<T: Real>(activations: &Tensor<T>, weights: &[f64]) -> Result<Tensor<f64>> {
    let (c, h, w) = chw(activations, "weighted_activations")?;
    if weights.len() != c {
        return Err(Error::ShapeMismatch {
            op: "weighted_activations",
            lhs: vec![c],
            rhs: vec![weights.len()],
        });
    }
    let mut map = vec![0.0; h * w];
    for (plane, &alpha) in activations.data().chunks(h * w).zip(weights) {
        for (m, v) in map.iter_mut().zip(plane) {
            *m += alpha * v.to_f64().unwrap_or(f64::NAN);
        }
    }
    Tensor::new([h, w], map)
}

/// Raw h×w class-activation map `ReLU(Σ_c α_c·A_c)` with α the spatial
/// gradient means.
pub fn cam<T: Real>(activations: &Tensor<T>, gradients: &Tensor<T>) -> Result<Tensor<f64>> {
    if activations.shape() != gradients.shape() {
        return Err(Error::ShapeMismatch {
            op: "cam",
            lhs: activations.shape().to_vec(),
            rhs: gradients.shape().to_vec(),
        });
    }
    let weights = channel_weights(gradients)?;
    Ok(weighted_activations(activations, &weights)?.map(|v| v.max(0.0)))
}

/// Row and column of a map maximum.
pub type Peak = Option<(usize, usize)>;

/// A class-activation map at input resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    /// H×W, in [0, 1]; the maximum is exactly 1 unless `is_zero`.
    pub values: Tensor<f64>,
    /// h×w map at the captured layer's resolution, before upsampling and
    /// normalization.
    pub raw: Tensor<f64>,
    pub target_class: usize,
    pub predicted_class: usize,
    pub source_layer: String,
    /// Row and column of the first maximum; `None` for a zero map.
    pub peak: Peak,
    pub is_zero: bool,
}

impl Heatmap {
    pub fn height(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.values.data()[row * self.width() + col]
    }
}

/// Upsamples a raw map to `height`×`width` and divides by its maximum.
pub fn normalize_map(raw: &Tensor<f64>, height: usize, width: usize) -> Result<(Tensor<f64>, Peak)> {
    let (h, w) = raw.dims2("normalize_map")?;
    let up = resize_bilinear(&raw.clone().reshape([1, h, w])?, height, width)?.reshape([height, width])?;
    let (mut peak, mut max) = (0, 0.0);
    for (i, &v) in up.data().iter().enumerate() {
        if v > max {
            (peak, max) = (i, v);
        }
    }
    if max <= 0.0 {
        return Ok((Tensor::zeros([height, width]), None));
    }
    Ok((up.map(|v| v / max), Some((peak / width, peak % width))))
}

/// Grad-CAM heatmap of one 3×H×W model input.
pub fn explain<T: Real>(model: &Model<T>, input: &Tensor<T>, target: Target, options: &GradCamOptions) -> Result<Heatmap> {
    let mut captured = capture(model, input, options.layer.as_deref())?;
    let predicted = captured.predicted();
    let class = match target {
        Target::Predicted => predicted,
        Target::Class(k) => k,
    };
    let gradients = captured.gradients(class, options.signal)?;
    let raw = cam(&captured.activations(), &gradients)?;
    let shape = input.shape();
    let (height, width) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    let (values, peak) = normalize_map(&raw, height, width)?;
    Ok(Heatmap {
        values,
        raw,
        target_class: class,
        predicted_class: predicted,
        source_layer: captured.layer,
        peak,
        is_zero: peak.is_none(),
    })
}

/// [`explain`] over many inputs in parallel; `targets` pairs with `inputs`.
pub fn explain_many<T: Real>(
    model: &Model<T>,
    inputs: &[Tensor<T>],
    targets: &[Target],
    options: &GradCamOptions,
) -> Result<Vec<Heatmap>> {
    if inputs.len() != targets.len() {
        return Err(Error::ShapeMismatch {
            op: "explain_many",
            lhs: vec![inputs.len()],
            rhs: vec![targets.len()],
        });
    }
    inputs
        .par_iter()
        .zip(targets.par_iter())
        .map(|(x, &t)| explain(model, x, t, options))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Colormap {
    #[default]
    Jet,
    Gray,
}

impl Colormap {
    /// RGB colour of a value in [0, 1].
    pub fn color(self, v: f64) -> [f32; 3] {
        let v = v.clamp(0.0, 1.0);
        match self {
            Colormap::Jet => {
                let ramp = |offset: f64| (1.5 - (4.0 * v - offset).abs()).clamp(0.0, 1.0) as f32;
                [ramp(3.0), ramp(2.0), ramp(1.0)]
            }
            Colormap::Gray => [v as f32; 3],
        }
    }
}

pub const DEFAULT_ALPHA: f32 = 0.5;

/// 3×H×W colourized heatmap.
pub fn colorize(heatmap: &Heatmap, colormap: Colormap) -> Tensor<f32> {
    let (h, w) = (heatmap.height(), heatmap.width());
    let plane = h * w;
    let mut out = vec![0.0; 3 * plane];
    for (i, &v) in heatmap.values.data().iter().enumerate() {
        let rgb = colormap.color(v);
        for ch in 0..3 {
            out[ch * plane + i] = rgb[ch];
        }
    }
    Tensor::new([3, h, w], out).expect("buffer matches shape")
}

/// `(1 − alpha)·image + alpha·colour(heatmap)` for a 3×H×W image in [0, 1].
pub fn overlay(image: &Tensor<f32>, heatmap: &Heatmap, colormap: Colormap, alpha: f32) -> Result<Tensor<f32>> {
    let expected = [3, heatmap.height(), heatmap.width()];
    if image.shape() != expected {
        return Err(Error::ShapeMismatch {
            op: "overlay",
            lhs: expected.to_vec(),
            rhs: image.shape().to_vec(),
        });
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("overlay alpha must be in [0, 1], got {alpha}")));
    }
    let color = colorize(heatmap, colormap);
    let data = image
        .data()
        .iter()
        .zip(color.data())
        .map(|(&p, &c)| (1.0 - alpha) * p + alpha * c)
        .collect();
    Tensor::new(expected, data)
}

/// Writes [`overlay`] as a PNG.
pub fn render_overlay(
    image: &Tensor<f32>,
    heatmap: &Heatmap,
    colormap: Colormap,
    alpha: f32,
    path: impl AsRef<Path>,
) -> Result<()> {
    save_png(&overlay(image, heatmap, colormap, alpha)?, path.as_ref())
}

/// Writes the colourized heatmap alone as a PNG.
pub fn render_heatmap(heatmap: &Heatmap, colormap: Colormap, path: impl AsRef<Path>) -> Result<()> {
    save_png(&colorize(heatmap, colormap), path.as_ref())
}

/// One row of the explanation index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplainRecord {
    pub input: PathBuf,
    pub predicted: String,
    pub target: String,
    pub peak_row: Option<usize>,
    pub peak_col: Option<usize>,
    pub heatmap: PathBuf,
    pub overlay: PathBuf,
}

pub fn write_explain_index(path: impl AsRef<Path>, records: &[ExplainRecord]) -> Result<()> {
    let path = path.as_ref();
    let fail = |e: csv::Error| Error::Format(format!("{}: {e}", path.display()));
    let mut writer = csv::Writer::from_path(path).map_err(fail)?;
    for record in records {
        writer.serialize(record).map_err(fail)?;
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

pub fn read_explain_index(path: impl AsRef<Path>) -> Result<Vec<ExplainRecord>> {
    let path = path.as_ref();
    let fail = |e: csv::Error| Error::Format(format!("{}: {e}", path.display()));
    csv::Reader::from_path(path)
        .map_err(fail)?
        .deserialize()
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(fail)
}

//! Densely connected convolutional networks: construction, forward pass,
//! parameter accounting and checkpoint persistence.

mod checkpoint;
mod config;
mod layers;

pub use checkpoint::{load_checkpoint, load_checkpoint_as, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{BlockPlan, DenseNetConfig};
pub use layers::{dense_block_forward, dense_layer_forward, transition_forward, ForwardContext};

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autograd::{RunningStats, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Batch-norm behaviour during a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Handles produced by one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub logits: Var,
    /// Pooled N×F features entering the head.
    pub features: Var,
    /// Output of every convolution, keyed by layer name.
    pub conv_outputs: IndexMap<String, Var>,
    /// Tape handle of every parameter, keyed by parameter name.
    pub params: IndexMap<String, Var>,
}

/// A realized network: configuration, trainable parameters and batch-norm
/// running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T: Real = f32> {
    config: DenseNetConfig,
    params: IndexMap<String, Tensor<T>>,
    norms: IndexMap<String, RunningStats<T>>,
}

/// Name and shape of every tensor a configuration needs, in forward order.
pub(crate) struct ParamLayout {
    pub params: Vec<(String, Vec<usize>)>,
    pub norms: Vec<(String, usize)>,
}

impl ParamLayout {
    fn of(config: &DenseNetConfig) -> Self {
        let mut params = Vec::new();
        let mut norms = Vec::new();
        let mut norm = |params: &mut Vec<(String, Vec<usize>)>, name: String, c: usize| {
            params.push((format!("{name}.gamma"), vec![c]));
            params.push((format!("{name}.beta"), vec![c]));
            norms.push((name, c));
        };
        let in_c = config.input_resolution.2;
        let k = config.growth_rate;
        params.push((
            "stem.conv.weight".into(),
            vec![config.stem_channels, in_c, 7, 7],
        ));
        norm(&mut params, "stem.norm".into(), config.stem_channels);
        for (b, plan) in config.plan().iter().enumerate() {
            let block = format!("block{}", b + 1);
            for i in 0..plan.layers {
                let prefix = format!("{block}.layer{}", i + 1);
                let width = plan.in_channels + i * k;
                norm(&mut params, format!("{prefix}.norm1"), width);
                let conv2_in = if config.bottleneck {
                    let wide = config.bottleneck_width();
                    params.push((format!("{prefix}.conv1.weight"), vec![wide, width, 1, 1]));
                    norm(&mut params, format!("{prefix}.norm2"), wide);
                    wide
                } else {
                    width
                };
                params.push((format!("{prefix}.conv2.weight"), vec![k, conv2_in, 3, 3]));
            }
            if let Some(out) = plan.transition_out {
                let prefix = format!("transition{}", b + 1);
                norm(&mut params, format!("{prefix}.norm"), plan.out_channels);
                params.push((
                    format!("{prefix}.conv.weight"),
                    vec![out, plan.out_channels, 1, 1],
                ));
            }
        }
        let features = config.feature_width();
        norm(&mut params, "final_norm".into(), features);
        params.push(("head.weight".into(), vec![features, config.num_classes]));
        params.push(("head.bias".into(), vec![config.num_classes]));
        Self { params, norms }
    }
}

impl<T: Real> Model<T> {
    /// Builds a model with He-normal convolution and head weights, unit BN
    /// scale, and zero BN shift and head bias. Initialization depends only on
    /// `seed`.
    pub fn build(config: DenseNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::of(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = IndexMap::with_capacity(layout.params.len());
        for (name, shape) in layout.params {
            let tensor = if name.ends_with(".gamma") {
                Tensor::full(shape, T::one())
            } else if name.ends_with(".beta") || name.ends_with(".bias") {
                Tensor::zeros(shape)
            } else {
                let fan_in: usize = if shape.len() == 4 {
                    shape[1..].iter().product()
                } else {
                    shape[0]
                };
                let std = (2.0 / fan_in as f64).sqrt();
                Tensor::from_fn(shape, |_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    T::from_f64(z * std)
                })
            };
            params.insert(name, tensor);
        }
        let norms = layout
            .norms
            .into_iter()
            .map(|(name, c)| (name, RunningStats::new(c)))
            .collect();
        Ok(Self {
            config,
            params,
            norms,
        })
    }

    /// Assembles a model from stored tensors, checking that the name set and
    /// shapes match what `config` requires.
    pub fn from_parts(
        config: DenseNetConfig,
        mut params: IndexMap<String, Tensor<T>>,
        mut norms: IndexMap<String, RunningStats<T>>,
    ) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::of(&config);
        let expected: Vec<&str> = layout.params.iter().map(|(n, _)| n.as_str()).collect();
        let mismatch = |what: &str, missing: Vec<&str>, extra: Vec<String>| {
            Error::Format(format!(
                "{what} name set does not match config: missing {missing:?}, unexpected {extra:?}",
                missing = missing.into_iter().take(4).collect::<Vec<_>>(),
                extra = extra.into_iter().take(4).collect::<Vec<_>>()
            ))
        };
        let missing: Vec<&str> = expected
            .iter()
            .copied()
            .filter(|n| !params.contains_key(*n))
            .collect();
        let extra: Vec<String> = params
            .keys()
            .filter(|k| !expected.contains(&k.as_str()))
            .cloned()
            .collect();
        if !missing.is_empty() || !extra.is_empty() {
            return Err(mismatch("parameter", missing, extra));
        }
        let mut ordered = IndexMap::with_capacity(params.len());
        for (name, shape) in &layout.params {
            let t = params.swap_remove(name).expect("checked above");
            if t.shape() != shape.as_slice() {
                return Err(Error::Format(format!(
                    "parameter `{name}` has shape {:?}, config requires {shape:?}",
                    t.shape()
                )));
            }
            ordered.insert(name.clone(), t);
        }
        let norm_names: Vec<&str> = layout.norms.iter().map(|(n, _)| n.as_str()).collect();
        let missing: Vec<&str> = norm_names
            .iter()
            .copied()
            .filter(|n| !norms.contains_key(*n))
            .collect();
        let extra: Vec<String> = norms
            .keys()
            .filter(|k| !norm_names.contains(&k.as_str()))
            .cloned()
            .collect();
        if !missing.is_empty() || !extra.is_empty() {
            return Err(mismatch("running-statistics", missing, extra));
        }
        let mut ordered_norms = IndexMap::with_capacity(norms.len());
        for (name, c) in &layout.norms {
            let s = norms.swap_remove(name).expect("checked above");
            if s.mean.shape() != [*c] || s.var.shape() != [*c] {
                return Err(Error::Format(format!(
                    "running statistics `{name}` do not have {c} channels"
                )));
            }
            ordered_norms.insert(name.clone(), s);
        }
        Ok(Self {
            config,
            params: ordered,
            norms: ordered_norms,
        })
    }

    pub fn config(&self) -> &DenseNetConfig {
        &self.config
    }

    pub fn params(&self) -> &IndexMap<String, Tensor<T>> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut IndexMap<String, Tensor<T>> {
        &mut self.params
    }

    pub fn norms(&self) -> &IndexMap<String, RunningStats<T>> {
        &self.norms
    }

    pub fn norms_mut(&mut self) -> &mut IndexMap<String, RunningStats<T>> {
        &mut self.norms
    }

    /// Number of trainable scalars: convolution kernels, BN scale/shift and
    /// the head. Running statistics are not counted.
    pub fn count_trainable_params(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Name of the 3×3 convolution in the last dense layer of the last block.
    pub fn last_conv_name(&self) -> String {
        let blocks = self.config.block_layout.len();
        let layers = self.config.block_layout[blocks - 1];
        format!("block{blocks}.layer{layers}.conv2")
    }

    /// Forward context over this model's tensors, for running individual
    /// layers.
    pub fn context<'m, 't>(
        &'m mut self,
        tape: &'t mut Tape<T>,
        mode: Mode,
        track_param_grads: bool,
    ) -> ForwardContext<'m, 't, T> {
        match mode {
            Mode::Train => {
                ForwardContext::train(tape, &self.params, &mut self.norms, track_param_grads)
            }
            Mode::Eval => ForwardContext::eval(tape, &self.params, &self.norms, track_param_grads),
        }
    }

    /// Training-mode forward pass; batch statistics update the running stats.
    pub fn forward_train(&mut self, tape: &mut Tape<T>, input: Var) -> Result<ForwardPass> {
        let mut ctx = ForwardContext::train(tape, &self.params, &mut self.norms, true);
        network_forward(&mut ctx, &self.config, input)?;
        Ok(ctx.finish())
    }

    /// Inference-mode forward pass. With `track_param_grads` false the
    /// parameters are recorded as constants.
    pub fn forward_eval(
        &self,
        tape: &mut Tape<T>,
        input: Var,
        track_param_grads: bool,
    ) -> Result<ForwardPass> {
        let mut ctx = ForwardContext::eval(tape, &self.params, &self.norms, track_param_grads);
        network_forward(&mut ctx, &self.config, input)?;
        Ok(ctx.finish())
    }

    pub fn forward(&mut self, tape: &mut Tape<T>, input: Var, mode: Mode) -> Result<ForwardPass> {
        match mode {
            Mode::Train => self.forward_train(tape, input),
            Mode::Eval => self.forward_eval(tape, input, true),
        }
    }

    /// Eval-mode logits for an N×C×H×W batch.
    pub fn predict(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(images)?;
        let mut tape = Tape::new();
        let x = tape.leaf(images.clone());
        let pass = self.forward_eval(&mut tape, x, false)?;
        Ok(tape.value(pass.logits).clone())
    }

    pub fn check_input(&self, images: &Tensor<T>) -> Result<()> {
        let (_, c, h, w) = images.dims4("model input")?;
        let (eh, ew, ec) = self.config.input_resolution;
        if (c, h, w) != (ec, eh, ew) {
            return Err(Error::ShapeMismatch {
                op: "model input",
                lhs: vec![ec, eh, ew],
                rhs: vec![c, h, w],
            });
        }
        Ok(())
    }
}

/// Trainable parameter count of `config`, without allocating the network.
pub fn trainable_param_count(config: &DenseNetConfig) -> Result<usize> {
    config.validate()?;
    Ok(ParamLayout::of(config)
        .params
        .iter()
        .map(|(_, shape)| shape.iter().product::<usize>())
        .sum())
}

/// Stem → dense blocks and transitions → BN → ReLU → global pool → head.
fn network_forward<T: Real>(
    ctx: &mut ForwardContext<'_, '_, T>,
    config: &DenseNetConfig,
    input: Var,
) -> Result<()> {
    let x = ctx.conv("stem.conv", input, (2, 2), (3, 3))?;
    let x = ctx.norm("stem.norm", x)?;
    let x = ctx.tape().relu(x);
    let mut x = ctx.tape().max_pool2d(x, (3, 3), (2, 2), (1, 1))?;
    let blocks = config.block_layout.len();
    for (b, &layers) in config.block_layout.iter().enumerate() {
        x = dense_block_forward(ctx, &format!("block{}", b + 1), x, layers)?;
        if b + 1 < blocks {
            x = transition_forward(ctx, &format!("transition{}", b + 1), x)?;
        }
    }
    let x = ctx.norm("final_norm", x)?;
    let x = ctx.tape().relu(x);
    let features = ctx.tape().global_avg_pool(x)?;
    let w = ctx.param("head.weight")?;
    let b = ctx.param("head.bias")?;
    let logits = ctx.tape().linear(features, w, Some(b))?;
    ctx.set_outputs(logits, features);
    Ok(())
}

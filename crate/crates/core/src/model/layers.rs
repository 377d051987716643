use indexmap::IndexMap;

use super::ForwardPass;
use crate::autograd::{NormMode, RunningStats, Tape, Var, BN_EPSILON, BN_MOMENTUM};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

enum NormStore<'m, T: Real> {
    Train(&'m mut IndexMap<String, RunningStats<T>>),
    Eval(&'m IndexMap<String, RunningStats<T>>),
}

/// Binds named model tensors onto a tape while a forward pass runs.
pub struct ForwardContext<'m, 't, T: Real> {
    tape: &'t mut Tape<T>,
    params: &'m IndexMap<String, Tensor<T>>,
    norms: NormStore<'m, T>,
    track_param_grads: bool,
    bound: IndexMap<String, Var>,
    conv_outputs: IndexMap<String, Var>,
    outputs: Option<(Var, Var)>,
}

impl<'m, 't, T: Real> ForwardContext<'m, 't, T> {
    pub fn train(
        tape: &'t mut Tape<T>,
        params: &'m IndexMap<String, Tensor<T>>,
        norms: &'m mut IndexMap<String, RunningStats<T>>,
        track_param_grads: bool,
    ) -> Self {
        Self::with_store(tape, params, NormStore::Train(norms), track_param_grads)
    }

    pub fn eval(
        tape: &'t mut Tape<T>,
        params: &'m IndexMap<String, Tensor<T>>,
        norms: &'m IndexMap<String, RunningStats<T>>,
        track_param_grads: bool,
    ) -> Self {
        Self::with_store(tape, params, NormStore::Eval(norms), track_param_grads)
    }

    fn with_store(
        tape: &'t mut Tape<T>,
        params: &'m IndexMap<String, Tensor<T>>,
        norms: NormStore<'m, T>,
        track_param_grads: bool,
    ) -> Self {
        Self {
            tape,
            params,
            norms,
            track_param_grads,
            bound: IndexMap::new(),
            conv_outputs: IndexMap::new(),
            outputs: None,
        }
    }

    pub fn tape(&mut self) -> &mut Tape<T> {
        self.tape
    }

    /// Tape handle for parameter `name`, recording it on first use.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let tensor = self
            .params
            .get(name)
            .ok_or_else(|| Error::invalid("forward", format!("missing parameter `{name}`")))?
            .clone();
        let var = if self.track_param_grads {
            self.tape.param(tensor)
        } else {
            self.tape.leaf(tensor)
        };
        self.bound.insert(name.to_string(), var);
        Ok(var)
    }

    /// Width expected by the batch-norm layer `name`.
    pub fn norm_width(&self, name: &str) -> Result<usize> {
        self.params
            .get(&format!("{name}.gamma"))
            .map(Tensor::numel)
            .ok_or_else(|| Error::invalid("forward", format!("missing batch norm `{name}`")))
    }

    pub fn norm(&mut self, name: &str, x: Var) -> Result<Var> {
        let gamma = self.param(&format!("{name}.gamma"))?;
        let beta = self.param(&format!("{name}.beta"))?;
        let missing = || Error::invalid("forward", format!("missing running stats `{name}`"));
        let mode = match &mut self.norms {
            NormStore::Train(store) => NormMode::Train {
                running: store.get_mut(name).ok_or_else(missing)?,
                momentum: BN_MOMENTUM,
            },
            NormStore::Eval(store) => NormMode::Eval {
                running: store.get(name).ok_or_else(missing)?,
            },
        };
        self.tape.batch_norm(x, gamma, beta, mode, BN_EPSILON)
    }

    /// Bias-free convolution with weight `{name}.weight`.
    pub fn conv(
        &mut self,
        name: &str,
        x: Var,
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Result<Var> {
        let w = self.param(&format!("{name}.weight"))?;
        let y = self.tape.conv2d(x, w, None, stride, padding)?;
        self.conv_outputs.insert(name.to_string(), y);
        Ok(y)
    }

    pub(super) fn set_outputs(&mut self, logits: Var, features: Var) {
        self.outputs = Some((logits, features));
    }

    pub(super) fn finish(self) -> ForwardPass {
        let (logits, features) = self.outputs.expect("network forward sets outputs");
        ForwardPass {
            logits,
            features,
            conv_outputs: self.conv_outputs,
            params: self.bound,
        }
    }
}

/// One dense layer: BN → ReLU → [1×1 conv → BN → ReLU] → 3×3 conv. Produces
/// `growth_rate` channels at the input's spatial size.
pub fn dense_layer_forward<T: Real>(
    ctx: &mut ForwardContext<'_, '_, T>,
    prefix: &str,
    state: Var,
) -> Result<Var> {
    let width = ctx.tape().value(state).shape().get(1).copied().unwrap_or(0);
    let expected = ctx.norm_width(&format!("{prefix}.norm1"))?;
    if width != expected {
        return Err(Error::invalid(
            "dense_layer",
            format!("`{prefix}` expects {expected} input channels, got {width}"),
        ));
    }
    let x = ctx.norm(&format!("{prefix}.norm1"), state)?;
    let mut x = ctx.tape().relu(x);
    if ctx.params.contains_key(&format!("{prefix}.conv1.weight")) {
        x = ctx.conv(&format!("{prefix}.conv1"), x, (1, 1), (0, 0))?;
        x = ctx.norm(&format!("{prefix}.norm2"), x)?;
        x = ctx.tape().relu(x);
    }
    ctx.conv(&format!("{prefix}.conv2"), x, (1, 1), (1, 1))
}

/// Dense block of `layers` layers: each layer sees the concatenation of the
/// block input and every earlier layer output; the block returns the
/// concatenation of all of them.
pub fn dense_block_forward<T: Real>(
    ctx: &mut ForwardContext<'_, '_, T>,
    prefix: &str,
    input: Var,
    layers: usize,
) -> Result<Var> {
    let mut features = vec![input];
    let mut state = input;
    for i in 0..layers {
        let out = dense_layer_forward(ctx, &format!("{prefix}.layer{}", i + 1), state)?;
        features.push(out);
        state = ctx.tape().concat_channels(&features)?;
    }
    Ok(state)
}

/// BN → ReLU → 1×1 compression conv → 2×2 average pool.
pub fn transition_forward<T: Real>(
    ctx: &mut ForwardContext<'_, '_, T>,
    prefix: &str,
    input: Var,
) -> Result<Var> {
    let (_, _, h, w) = ctx.tape().value(input).dims4("transition")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::invalid(
            "transition",
            format!("`{prefix}` needs even spatial size, got {h}×{w}"),
        ));
    }
    let x = ctx.norm(&format!("{prefix}.norm"), input)?;
    let x = ctx.tape().relu(x);
    let x = ctx.conv(&format!("{prefix}.conv"), x, (1, 1), (0, 0))?;
    ctx.tape().avg_pool2d(x, (2, 2), (2, 2))
}

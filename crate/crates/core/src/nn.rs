//! Parameterised layers over the autograd graph.

use pfiqa_autograd::{Conv2dSpec, Graph, ParamId, ParamStore, Tensor, Var};
use rand::Rng;

use crate::error::{PfiqaError, Result};

/// Fan-in scaled uniform init, `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
fn fan_in_uniform(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f32).sqrt();
    Tensor::uniform(shape, bound, rng)
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub spec: Conv2dSpec,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl Conv2d {
    /// Square kernel; `pad = kernel / 2` keeps the spatial size at stride 1.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        trainable: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let w = fan_in_uniform(&[out_channels, in_channels, kernel, kernel], fan_in, rng);
        let weight = store.add(format!("{name}.weight"), w, trainable);
        let bias = bias.then(|| {
            let b = fan_in_uniform(&[out_channels], fan_in, rng);
            store.add(format!("{name}.bias"), b, trainable)
        });
        Conv2d {
            weight,
            bias,
            spec: Conv2dSpec::new(stride, pad),
            in_channels,
            out_channels,
            kernel,
        }
    }

    /// Stride 1 with "same" padding.
    pub fn same(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        trainable: bool,
        rng: &mut impl Rng,
    ) -> Self {
        Self::new(store, name, in_channels, out_channels, kernel, 1, kernel / 2, true, trainable, rng)
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        Ok(g.conv2d(x, w, b, self.spec)?)
    }

    /// Slice the weight by input-channel groups so the convolution can be
    /// applied to a channel concatenation without materialising it.
    pub fn split(&self, g: &mut Graph<'_>, groups: &[usize]) -> Result<SplitConv> {
        let total: usize = groups.iter().sum();
        if total != self.in_channels {
            return Err(PfiqaError::ShapeMismatch(format!(
                "channel groups {groups:?} sum to {total}, conv expects {}",
                self.in_channels
            )));
        }
        let w = g.param(self.weight);
        let mut weights = Vec::with_capacity(groups.len());
        let mut start = 0;
        for &c in groups {
            weights.push(if groups.len() == 1 { w } else { g.narrow(w, 1, start, c)? });
            start += c;
        }
        Ok(SplitConv {
            weights,
            groups: groups.to_vec(),
            bias: self.bias.map(|b| g.param(b)),
            spec: self.spec,
        })
    }
}

/// A [`Conv2d`] prepared by [`Conv2d::split`].
#[derive(Clone, Debug)]
pub struct SplitConv {
    weights: Vec<Var>,
    groups: Vec<usize>,
    bias: Option<Var>,
    spec: Conv2dSpec,
}

impl SplitConv {
    pub fn groups(&self) -> &[usize] {
        &self.groups
    }

    /// `conv(concat(parts, channels))` computed as a sum of per-group convolutions.
    pub fn forward(&self, g: &mut Graph<'_>, parts: &[Var]) -> Result<Var> {
        if parts.len() != self.weights.len() {
            return Err(PfiqaError::ShapeMismatch(format!(
                "{} channel groups, got {} inputs",
                self.weights.len(),
                parts.len()
            )));
        }
        let mut acc: Option<Var> = None;
        for (i, (&x, &w)) in parts.iter().zip(&self.weights).enumerate() {
            let b = if i == 0 { self.bias } else { None };
            let y = g.conv2d(x, w, b, self.spec)?;
            acc = Some(match acc {
                Some(a) => g.add(a, y)?,
                None => y,
            });
        }
        acc.ok_or_else(|| PfiqaError::ShapeMismatch("no inputs".into()))
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_features: usize,
        out_features: usize,
        bias: bool,
        trainable: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let w = fan_in_uniform(&[out_features, in_features], in_features, rng);
        let weight = store.add(format!("{name}.weight"), w, trainable);
        let bias = bias.then(|| {
            let b = fan_in_uniform(&[out_features], in_features, rng);
            store.add(format!("{name}.bias"), b, trainable)
        });
        Linear { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        Ok(g.linear(x, w, b)?)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f32,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, eps: f32, trainable: bool) -> Self {
        LayerNorm {
            gamma: store.add(format!("{name}.weight"), Tensor::full(&[dim], 1.0), trainable),
            beta: store.add(format!("{name}.bias"), Tensor::zeros(&[dim]), trainable),
            eps,
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        Ok(g.layer_norm(x, gamma, beta, self.eps)?)
    }
}

/// Suffixes of statistics buffers that are never optimised.
pub const BUFFER_SUFFIXES: [&str; 2] = ["running_mean", "running_var"];

pub fn is_buffer(name: &str) -> bool {
    BUFFER_SUFFIXES.iter().any(|s| name.ends_with(s))
}

/// Batch norm in inference mode (running statistics).
#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub eps: f32,
}

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, trainable: bool) -> Self {
        BatchNorm2d {
            gamma: store.add(format!("{name}.weight"), Tensor::full(&[channels], 1.0), trainable),
            beta: store.add(format!("{name}.bias"), Tensor::zeros(&[channels]), trainable),
            running_mean: store.add(format!("{name}.running_mean"), Tensor::zeros(&[channels]), false),
            running_var: store.add(format!("{name}.running_var"), Tensor::full(&[channels], 1.0), false),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        let mean = g.param(self.running_mean);
        let var = g.param(self.running_var);
        Ok(g.batch_norm(x, gamma, beta, mean, var, self.eps)?)
    }
}

/// Mark every parameter under `prefix` trainable or frozen, leaving buffers frozen.
pub fn set_trainable_prefix(store: &mut ParamStore, prefix: &str, trainable: bool) {
    let ids: Vec<ParamId> = store
        .iter()
        .filter(|(_, p)| p.name.starts_with(prefix) && !is_buffer(&p.name))
        .map(|(id, _)| id)
        .collect();
    for id in ids {
        store.set_trainable(id, trainable);
    }
}

/// Number of trainable scalars under `prefix`.
pub fn trainable_count_prefix(store: &ParamStore, prefix: &str) -> usize {
    store
        .iter()
        .filter(|(_, p)| p.trainable && p.name.starts_with(prefix))
        .map(|(_, p)| p.value.numel())
        .sum()
}

//! Bottleneck ResNet returning the output of each of its four stages.
//!
//! Parameter names follow torchvision (`conv1`, `bn1`, `layer{1..4}.{b}.conv2`,
//! `layer{1..4}.0.downsample.{0,1}`) under a `resnet.` prefix.

use pfiqa_autograd::{Graph, ParamStore, Tensor, Var};
use rand::Rng;

use crate::error::{PfiqaError, Result};
use crate::nn::{BatchNorm2d, Conv2d};

pub const PREFIX: &str = "resnet.";
const EXPANSION: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct ResNetConfig {
    pub stem: usize,
    /// Bottleneck widths; stage outputs are `4 * width`.
    pub widths: [usize; 4],
    pub layers: [usize; 4],
    /// Channel counts the stage maps are lifted to by frozen 1x1 convolutions,
    /// or `None` to return native channels.
    pub lift_to: Option<[usize; 4]>,
}

impl ResNetConfig {
    pub fn resnet50() -> Self {
        ResNetConfig {
            stem: 64,
            widths: [64, 128, 256, 512],
            layers: [3, 4, 6, 3],
            lift_to: None,
        }
    }

    pub fn fixture(lift_to: [usize; 4]) -> Self {
        ResNetConfig {
            stem: 8,
            widths: [8, 16, 32, 64],
            layers: [1, 1, 1, 1],
            lift_to: Some(lift_to),
        }
    }

    pub fn out_channels(&self) -> [usize; 4] {
        self.lift_to.unwrap_or(self.widths.map(|w| w * EXPANSION))
    }
}

#[derive(Clone, Debug)]
struct Bottleneck {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    conv3: Conv2d,
    bn3: BatchNorm2d,
    downsample: Option<(Conv2d, BatchNorm2d)>,
}

impl Bottleneck {
    fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let h = self.conv1.forward(g, x)?;
        let h = self.bn1.forward(g, h)?;
        let h = g.relu(h);
        let h = self.conv2.forward(g, h)?;
        let h = self.bn2.forward(g, h)?;
        let h = g.relu(h);
        let h = self.conv3.forward(g, h)?;
        let h = self.bn3.forward(g, h)?;
        let skip = match &self.downsample {
            Some((conv, bn)) => {
                let s = conv.forward(g, x)?;
                bn.forward(g, s)?
            }
            None => x,
        };
        let out = g.add(h, skip)?;
        Ok(g.relu(out))
    }
}

#[derive(Clone, Debug)]
pub struct ResNet {
    pub config: ResNetConfig,
    conv1: Conv2d,
    bn1: BatchNorm2d,
    stages: Vec<Vec<Bottleneck>>,
    lifts: Vec<Conv2d>,
}

impl ResNet {
    pub fn new(store: &mut ParamStore, config: ResNetConfig, rng: &mut impl Rng) -> Self {
        let conv1 = Conv2d::new(store, &format!("{PREFIX}conv1"), 3, config.stem, 7, 2, 3, false, false, rng);
        let bn1 = BatchNorm2d::new(store, &format!("{PREFIX}bn1"), config.stem, false);
        let mut in_c = config.stem;
        let mut stages = Vec::with_capacity(4);
        for (s, (&width, &count)) in config.widths.iter().zip(&config.layers).enumerate() {
            let stride = if s == 0 { 1 } else { 2 };
            let out_c = width * EXPANSION;
            let blocks = (0..count)
                .map(|b| {
                    let n = format!("{PREFIX}layer{}.{b}", s + 1);
                    let st = if b == 0 { stride } else { 1 };
                    let block_in = if b == 0 { in_c } else { out_c };
                    let downsample = (b == 0 && (st != 1 || in_c != out_c)).then(|| {
                        (
                            Conv2d::new(store, &format!("{n}.downsample.0"), block_in, out_c, 1, st, 0, false, false, rng),
                            BatchNorm2d::new(store, &format!("{n}.downsample.1"), out_c, false),
                        )
                    });
                    Bottleneck {
                        conv1: Conv2d::new(store, &format!("{n}.conv1"), block_in, width, 1, 1, 0, false, false, rng),
                        bn1: BatchNorm2d::new(store, &format!("{n}.bn1"), width, false),
                        conv2: Conv2d::new(store, &format!("{n}.conv2"), width, width, 3, st, 1, false, false, rng),
                        bn2: BatchNorm2d::new(store, &format!("{n}.bn2"), width, false),
                        conv3: Conv2d::new(store, &format!("{n}.conv3"), width, out_c, 1, 1, 0, false, false, rng),
                        bn3: BatchNorm2d::new(store, &format!("{n}.bn3"), out_c, false),
                        downsample,
                    }
                })
                .collect();
            stages.push(blocks);
            in_c = out_c;
        }
        let lifts = match config.lift_to {
            Some(targets) => targets
                .iter()
                .zip(config.widths)
                .enumerate()
                .map(|(k, (&t, w))| Conv2d::same(store, &format!("{PREFIX}lift.{k}"), w * EXPANSION, t, 1, false, rng))
                .collect(),
            None => Vec::new(),
        };
        ResNet {
            config,
            conv1,
            bn1,
            stages,
            lifts,
        }
    }

    fn check_input(shape: &[usize]) -> Result<()> {
        if shape.len() != 4 || shape[1] != 3 {
            return Err(PfiqaError::ShapeMismatch(format!("expected [N, 3, H, W], got {shape:?}")));
        }
        if !shape[2].is_multiple_of(32) || !shape[3].is_multiple_of(32) {
            return Err(PfiqaError::InputResolution {
                height: shape[2],
                width: shape[3],
                expected: shape[2].div_ceil(32) * 32,
            });
        }
        Ok(())
    }

    fn stem(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let h = self.conv1.forward(g, x)?;
        let h = self.bn1.forward(g, h)?;
        let h = g.relu(h);
        Ok(g.max_pool2d(h, 3, 2, 1)?)
    }

    /// Runs stage `k`; returns its raw output and the (possibly lifted) map.
    fn stage(&self, g: &mut Graph<'_>, k: usize, mut h: Var) -> Result<(Var, Var)> {
        for b in &self.stages[k] {
            h = b.forward(g, h)?;
        }
        let map = match self.lifts.get(k) {
            Some(lift) => lift.forward(g, h)?,
            None => h,
        };
        Ok((h, map))
    }

    /// Four stage maps at strides 4, 8, 16 and 32.
    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Vec<Var>> {
        Self::check_input(g.shape(x))?;
        let mut h = self.stem(g, x)?;
        let mut out = Vec::with_capacity(4);
        for k in 0..self.stages.len() {
            let (next, map) = self.stage(g, k, h)?;
            out.push(map);
            h = next;
        }
        Ok(out)
    }

    /// Inference-only variant of [`ResNet::forward`] run one stage at a time.
    pub fn forward_frozen(&self, store: &ParamStore, x: &Tensor) -> Result<Vec<Tensor>> {
        Self::check_input(x.shape())?;
        let mut g = Graph::inference(store);
        let xv = g.constant(x.clone());
        let h = self.stem(&mut g, xv)?;
        let mut cur = g.value(h).clone();
        let mut out = Vec::with_capacity(4);
        for k in 0..self.stages.len() {
            let mut g = Graph::inference(store);
            let xv = g.constant(cur);
            let (next, map) = self.stage(&mut g, k, xv)?;
            out.push(g.value(map).clone());
            cur = g.value(next).clone();
        }
        Ok(out)
    }
}

//! Per-branch fusion of global and local features with scale conditioning.

use pfiqa_autograd::{Graph, ParamId, ParamStore, Tensor, Var};
use rand::Rng;

use crate::config::{FusionMode, ModelConfig};
use crate::datamodel::BranchTag;
use crate::error::{PfiqaError, Result};
use crate::nn::{Conv2d, Linear};

/// How the reduced global and local maps become one map.
#[derive(Clone, Debug)]
pub enum GlobalLocalFusion {
    /// `ReLU(a * global + b * local + bias)` with learned `(a, b, bias)`,
    /// shared across channels or one triple per channel.
    Adaptive { weight: ParamId, bias: ParamId },
    /// Channel concatenation followed by a 1x1 convolution and ReLU.
    Concat(Conv2d),
    GlobalOnly,
    LocalOnly,
}

/// Scalar scale factor to a one-channel `grid x grid` map.
#[derive(Clone, Debug)]
pub struct ScaleEmbedding {
    pub fc1: Linear,
    pub fc2: Linear,
    pub grid: usize,
}

impl ScaleEmbedding {
    pub fn new(store: &mut ParamStore, name: &str, hidden: usize, grid: usize, rng: &mut impl Rng) -> Self {
        ScaleEmbedding {
            fc1: Linear::new(store, &format!("{name}.fc1"), 1, hidden, true, true, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, grid * grid, true, true, rng),
            grid,
        }
    }

    /// `[N, 1, grid, grid]` embeddings of raw scale factors.
    pub fn forward(&self, g: &mut Graph<'_>, scales: &[f32]) -> Result<Var> {
        if let Some(s) = scales.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
            return Err(PfiqaError::Range(format!("scale factor {s} must be positive")));
        }
        let n = scales.len();
        let x = g.constant(Tensor::new(&[n, 1], scales.to_vec())?);
        let h = self.fc1.forward(g, x)?;
        let h = g.relu(h);
        let h = self.fc2.forward(g, h)?;
        Ok(g.reshape(h, &[n, 1, self.grid, self.grid])?)
    }
}

/// One branch's fusion module.
#[derive(Clone, Debug)]
pub struct Afm {
    pub tag: BranchTag,
    pub fusion: GlobalLocalFusion,
    pub scale: Option<ScaleEmbedding>,
    pub conv1: Conv2d,
    pub conv2: Conv2d,
}

impl Afm {
    pub fn new(
        store: &mut ParamStore,
        tag: BranchTag,
        mode: FusionMode,
        use_scale: bool,
        model: &ModelConfig,
        grid: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let name = format!("afm.{}", tag.name());
        let c = model.feature_channels;
        let fusion = match mode {
            FusionMode::Adaptive => {
                let rows = if model.per_channel_fusion { c } else { 1 };
                GlobalLocalFusion::Adaptive {
                    weight: store.add(format!("{name}.fuse.weight"), Tensor::full(&[rows, 2], 0.5), true),
                    bias: store.add(format!("{name}.fuse.bias"), Tensor::zeros(&[rows]), true),
                }
            }
            FusionMode::Concat => GlobalLocalFusion::Concat(Conv2d::same(store, &format!("{name}.fuse"), 2 * c, c, 1, true, rng)),
            FusionMode::VitOnly => GlobalLocalFusion::GlobalOnly,
            FusionMode::ResnetOnly => GlobalLocalFusion::LocalOnly,
        };
        let scale = use_scale.then(|| ScaleEmbedding::new(store, &format!("{name}.scale"), model.scale_hidden, grid, rng));
        let in1 = c + usize::from(use_scale);
        let cb = model.branch_channels;
        Afm {
            tag,
            fusion,
            scale,
            conv1: Conv2d::same(store, &format!("{name}.conv1"), in1, cb, 3, true, rng),
            conv2: Conv2d::same(store, &format!("{name}.conv2"), cb, cb, 3, true, rng),
        }
    }

    /// Merge global and local maps into one nonnegative `[N, C, p, p]` map.
    pub fn fuse_global_local(&self, g: &mut Graph<'_>, global: Option<Var>, local: Option<Var>) -> Result<Var> {
        let missing = |what: &str| PfiqaError::ShapeMismatch(format!("{what} features required by the fusion mode"));
        let out = match &self.fusion {
            GlobalLocalFusion::Adaptive { weight, bias } => {
                let (gv, lv) = (global.ok_or_else(|| missing("global"))?, local.ok_or_else(|| missing("local"))?);
                let w = g.param(*weight);
                let b = g.param(*bias);
                g.pair_fuse(gv, lv, w, b)?
            }
            GlobalLocalFusion::Concat(conv) => {
                let (gv, lv) = (global.ok_or_else(|| missing("global"))?, local.ok_or_else(|| missing("local"))?);
                let stacked = g.concat(&[gv, lv], 1)?;
                conv.forward(g, stacked)?
            }
            GlobalLocalFusion::GlobalOnly => global.ok_or_else(|| missing("global"))?,
            GlobalLocalFusion::LocalOnly => local.ok_or_else(|| missing("local"))?,
        };
        Ok(g.relu(out))
    }

    pub fn embed_scale(&self, g: &mut Graph<'_>, scales: &[f32]) -> Result<Option<Var>> {
        match &self.scale {
            Some(e) => Ok(Some(e.forward(g, scales)?)),
            None => Ok(None),
        }
    }

    /// Append the scale map as an extra channel, then conv3x3, ReLU, conv3x3.
    pub fn condition_on_scale(&self, g: &mut Graph<'_>, fused: Var, embedding: Option<Var>) -> Result<Var> {
        let x = match embedding {
            Some(e) => {
                let (fs, es) = (g.shape(fused), g.shape(e));
                if fs.len() != 4 || es.len() != 4 || fs[0] != es[0] || fs[2..] != es[2..] {
                    return Err(PfiqaError::ShapeMismatch(format!(
                        "features {fs:?} and scale map {es:?} are not aligned"
                    )));
                }
                g.concat(&[fused, e], 1)?
            }
            None => fused,
        };
        let h = self.conv1.forward(g, x)?;
        let h = g.relu(h);
        self.conv2.forward(g, h)
    }

    pub fn forward(&self, g: &mut Graph<'_>, global: Option<Var>, local: Option<Var>, scales: &[f32]) -> Result<Var> {
        let fused = self.fuse_global_local(g, global, local)?;
        let emb = self.embed_scale(g, scales)?;
        self.condition_on_scale(g, fused, emb)
    }
}

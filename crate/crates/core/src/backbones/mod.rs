//! Frozen feature extractors and the reductions that turn their stage
//! outputs into global and local feature maps.

pub mod resnet;
pub mod vit;

use std::path::Path;

use pfiqa_autograd::{io, Graph, ParamStore, Tensor, Var};
use rand::Rng;

use crate::config::{BackboneConfig, BackboneKind};
use crate::datamodel::FeatureBundle;
use crate::error::{PfiqaError, Result};
use crate::nn::{self, Conv2d, SplitConv};

pub use resnet::{ResNet, ResNetConfig};
pub use vit::{Vit, VitConfig};

pub const VIT_STAGES: usize = 5;
pub const VIT_CHANNELS: usize = 768;
pub const RESNET_CHANNELS: [usize; 4] = [256, 512, 1024, 2048];
/// Channels of either concatenated stage stack.
pub const STACKED_CHANNELS: usize = 3840;

const _: () = assert!(VIT_STAGES * VIT_CHANNELS == STACKED_CHANNELS);
const _: () = assert!(RESNET_CHANNELS[0] + RESNET_CHANNELS[1] + RESNET_CHANNELS[2] + RESNET_CHANNELS[3] == STACKED_CHANNELS);

/// ImageNet channel statistics applied before either backbone.
pub const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

/// Raw stage outputs for one batch: five ViT maps and four ResNet maps.
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneOutputs {
    pub vit_stages: Vec<Tensor>,
    pub resnet_stages: Vec<Tensor>,
}

/// Graph handles to the stage outputs.
#[derive(Clone, Debug, Default)]
pub struct StageVars {
    pub vit: Vec<Var>,
    pub resnet: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct Backbones {
    pub vit: Option<Vit>,
    pub resnet: Option<ResNet>,
    pub input_size: usize,
}

impl Backbones {
    /// Build the requested extractors with frozen parameters.
    ///
    /// Fixture backbones are random and small but emit the same stage shapes
    /// as ViT-B/8 and ResNet-50; pretrained ones are allocated and then filled
    /// from the configured checkpoints.
    pub fn new(
        store: &mut ParamStore,
        cfg: &BackboneConfig,
        input_size: usize,
        use_vit: bool,
        use_resnet: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        assert_eq!(VIT_STAGES * VIT_CHANNELS, STACKED_CHANNELS);
        assert_eq!(RESNET_CHANNELS.iter().sum::<usize>(), STACKED_CHANNELS);
        if !input_size.is_multiple_of(32) {
            return Err(PfiqaError::Config(format!("input size {input_size} is not a multiple of 32")));
        }
        if cfg.vit_stage_blocks.len() != VIT_STAGES {
            return Err(PfiqaError::Config(format!(
                "need {VIT_STAGES} ViT stage blocks, got {}",
                cfg.vit_stage_blocks.len()
            )));
        }
        let grid = input_size / 8;
        let (vit_cfg, resnet_cfg) = match cfg.kind {
            BackboneKind::Pretrained => (
                VitConfig::base_patch8(grid, cfg.vit_stage_blocks.clone()),
                ResNetConfig::resnet50(),
            ),
            BackboneKind::Fixture => (
                VitConfig::fixture(grid, VIT_STAGES, VIT_CHANNELS),
                ResNetConfig::fixture(RESNET_CHANNELS),
            ),
        };
        let vit = if use_vit { Some(Vit::new(store, vit_cfg, rng)?) } else { None };
        let resnet = use_resnet.then(|| ResNet::new(store, resnet_cfg, rng));
        let backbones = Backbones {
            vit,
            resnet,
            input_size,
        };
        if cfg.kind == BackboneKind::Pretrained {
            if backbones.vit.is_some() {
                let path = cfg
                    .vit_checkpoint
                    .as_deref()
                    .ok_or_else(|| PfiqaError::Config("backbone.vit_checkpoint is required".into()))?;
                load_prefixed(store, vit::PREFIX, path)?;
            }
            if backbones.resnet.is_some() {
                let path = cfg
                    .resnet_checkpoint
                    .as_deref()
                    .ok_or_else(|| PfiqaError::Config("backbone.resnet_checkpoint is required".into()))?;
                load_prefixed(store, resnet::PREFIX, path)?;
            }
        }
        Ok(backbones)
    }

    pub fn grid(&self) -> usize {
        self.input_size / 8
    }

    /// Stage outputs of a normalized `[N, 3, H, W]` batch, recorded on `g`.
    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<StageVars> {
        self.check_input(g.shape(x))?;
        let vit = match &self.vit {
            Some(v) => v.forward(g, x)?,
            None => Vec::new(),
        };
        let resnet = match &self.resnet {
            Some(r) => r.forward(g, x)?,
            None => Vec::new(),
        };
        Ok(StageVars { vit, resnet })
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() == 4 && (shape[2] != self.input_size || shape[3] != self.input_size) {
            return Err(PfiqaError::InputResolution {
                height: shape[2],
                width: shape[3],
                expected: self.input_size,
            });
        }
        Ok(())
    }

    /// Inference-only stage outputs of a `[N, 3, H, W]` batch, one image at a time.
    pub fn forward_frozen(&self, store: &ParamStore, x: &Tensor) -> Result<BackboneOutputs> {
        self.check_input(x.shape())?;
        let n = x.dim(0);
        let mut vit_parts: Vec<Vec<Tensor>> = Vec::new();
        let mut resnet_parts: Vec<Vec<Tensor>> = Vec::new();
        for i in 0..n {
            let img = x.index0(i);
            let s = img.shape().to_vec();
            let img = img.reshape(&[1, s[0], s[1], s[2]])?;
            if let Some(v) = &self.vit {
                vit_parts.push(v.forward_frozen(store, &img)?);
            }
            if let Some(r) = &self.resnet {
                resnet_parts.push(r.forward_frozen(store, &img)?);
            }
        }
        Ok(BackboneOutputs {
            vit_stages: concat_batches(&vit_parts)?,
            resnet_stages: concat_batches(&resnet_parts)?,
        })
    }

    /// Inference-only extraction for a `[3, H, W]` image or `[N, 3, H, W]` batch.
    pub fn extract_stages(&self, store: &ParamStore, image: &Tensor) -> Result<BackboneOutputs> {
        match image.dims() {
            4 => self.forward_frozen(store, image),
            3 => {
                let s = image.shape();
                let batch = image.clone().reshape(&[1, s[0], s[1], s[2]])?;
                let out = self.forward_frozen(store, &batch)?;
                let strip = |ts: Vec<Tensor>| -> Result<Vec<Tensor>> {
                    ts.into_iter().map(|t| Ok(t.index0(0))).collect()
                };
                Ok(BackboneOutputs {
                    vit_stages: strip(out.vit_stages)?,
                    resnet_stages: strip(out.resnet_stages)?,
                })
            }
            _ => Err(PfiqaError::ShapeMismatch(format!(
                "expected an image tensor, got {:?}",
                image.shape()
            ))),
        }
    }

    /// Whether any backbone parameter is being optimised.
    pub fn any_trainable(&self, store: &ParamStore) -> bool {
        nn::trainable_count_prefix(store, vit::PREFIX) + nn::trainable_count_prefix(store, resnet::PREFIX) > 0
    }
}

/// Join per-image stage lists along the batch axis.
fn concat_batches(parts: &[Vec<Tensor>]) -> Result<Vec<Tensor>> {
    let Some(first) = parts.first() else {
        return Ok(Vec::new());
    };
    (0..first.len())
        .map(|k| {
            let items: Vec<&Tensor> = parts.iter().map(|p| &p[k]).collect();
            concat0(&items)
        })
        .collect()
}

/// Concatenate tensors along axis 0.
pub fn concat0(items: &[&Tensor]) -> Result<Tensor> {
    let first = items
        .first()
        .ok_or_else(|| PfiqaError::ShapeMismatch("nothing to concatenate".into()))?;
    let tail = &first.shape()[1..];
    let mut data = Vec::with_capacity(items.iter().map(|t| t.numel()).sum());
    let mut lead = 0;
    for t in items {
        if &t.shape()[1..] != tail {
            return Err(PfiqaError::ShapeMismatch(format!(
                "cannot stack {:?} with {:?}",
                first.shape(),
                t.shape()
            )));
        }
        lead += t.dim(0);
        data.extend_from_slice(t.data());
    }
    let mut shape = vec![lead];
    shape.extend_from_slice(tail);
    Ok(Tensor::new(&shape, data)?)
}

/// Copy every non-lift parameter under `prefix` from a safetensors file whose
/// names omit the prefix.
pub fn load_prefixed(store: &mut ParamStore, prefix: &str, path: &Path) -> Result<()> {
    if !path.exists() {
        return Err(PfiqaError::MissingFile(path.to_path_buf()));
    }
    let file = io::load_tensors(path)?;
    let names: Vec<String> = store
        .iter()
        .filter(|(_, p)| p.name.starts_with(prefix))
        .map(|(_, p)| p.name.clone())
        .filter(|n| !n[prefix.len()..].starts_with("lift."))
        .collect();
    for name in names {
        let key = &name[prefix.len()..];
        let t = file.get(key).ok_or_else(|| {
            PfiqaError::Checkpoint(format!("{} lacks tensor {key}", path.display()))
        })?;
        store.assign(&name, t.clone())?;
    }
    Ok(())
}

/// Learned reductions of the stacked stage maps to `C` channels.
#[derive(Clone, Debug)]
pub struct Reductions {
    pub global: Option<Conv2d>,
    pub local: Option<Conv2d>,
    pub grid: usize,
}

impl Reductions {
    pub fn new(
        store: &mut ParamStore,
        out_channels: usize,
        kernel: usize,
        grid: usize,
        use_global: bool,
        use_local: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let global = use_global.then(|| Conv2d::same(store, "reduce.global", STACKED_CHANNELS, out_channels, kernel, true, rng));
        let local = use_local.then(|| Conv2d::same(store, "reduce.local", STACKED_CHANNELS, out_channels, kernel, true, rng));
        Reductions { global, local, grid }
    }
}

fn check_stage(g: &Graph<'_>, v: Var, channels: usize, what: &str) -> Result<[usize; 4]> {
    let s = g.shape(v);
    if s.len() != 4 || s[1] != channels {
        return Err(PfiqaError::ShapeMismatch(format!(
            "{what} stage must be [N, {channels}, H, W], got {s:?}"
        )));
    }
    Ok([s[0], s[1], s[2], s[3]])
}

/// Concatenate the five ViT maps on channels and reduce them.
pub fn reduce_global(g: &mut Graph<'_>, conv: &Conv2d, stages: &[Var]) -> Result<Var> {
    let split = conv.split(g, &[VIT_CHANNELS; VIT_STAGES])?;
    reduce_global_with(g, &split, stages)
}

/// [`reduce_global`] with the reduction weights already sliced per stage.
pub fn reduce_global_with(g: &mut Graph<'_>, conv: &SplitConv, stages: &[Var]) -> Result<Var> {
    if stages.len() != VIT_STAGES {
        return Err(PfiqaError::ShapeMismatch(format!(
            "expected {VIT_STAGES} ViT stages, got {}",
            stages.len()
        )));
    }
    let first = check_stage(g, stages[0], VIT_CHANNELS, "ViT")?;
    for s in stages {
        let shape = check_stage(g, *s, VIT_CHANNELS, "ViT")?;
        if shape != first {
            return Err(PfiqaError::ShapeMismatch(format!("ViT stages differ: {first:?} vs {shape:?}")));
        }
    }
    conv.forward(g, stages)
}

/// Resize the four ResNet maps to `grid`, concatenate and reduce.
pub fn reduce_local(g: &mut Graph<'_>, conv: &Conv2d, stages: &[Var], grid: usize) -> Result<Var> {
    let split = conv.split(g, &RESNET_CHANNELS)?;
    reduce_local_with(g, &split, stages, grid)
}

/// [`reduce_local`] with the reduction weights already sliced per stage.
pub fn reduce_local_with(g: &mut Graph<'_>, conv: &SplitConv, stages: &[Var], grid: usize) -> Result<Var> {
    if stages.len() != RESNET_CHANNELS.len() {
        return Err(PfiqaError::ShapeMismatch(format!(
            "expected {} ResNet stages, got {}",
            RESNET_CHANNELS.len(),
            stages.len()
        )));
    }
    let mut resized = Vec::with_capacity(stages.len());
    for (s, c) in stages.iter().zip(RESNET_CHANNELS) {
        let [_, _, h, w] = check_stage(g, *s, c, "ResNet")?;
        resized.push(if h == grid && w == grid {
            *s
        } else {
            g.resize_bilinear(*s, grid, grid)?
        });
    }
    conv.forward(g, &resized)
}

/// Elementwise `sr - lr` on both maps.
pub fn difference_bundle(sr: &FeatureBundle, lr: &FeatureBundle) -> Result<FeatureBundle> {
    Ok(FeatureBundle {
        global_feat: sr.global_feat.sub(&lr.global_feat)?,
        local_feat: sr.local_feat.sub(&lr.local_feat)?,
    })
}

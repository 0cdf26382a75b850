//! Plain ViT encoder exposing intermediate block outputs as spatial maps.
//!
//! Parameter names follow the timm layout (`patch_embed.proj.weight`,
//! `blocks.{i}.attn.qkv.weight`, ...) under a `vit.` prefix so pretrained
//! checkpoints load by name.

use pfiqa_autograd::{Conv2dSpec, Graph, ParamId, ParamStore, Tensor, Var};
use rand::Rng;

use crate::error::{PfiqaError, Result};
use crate::nn::{LayerNorm, Linear};

pub const PREFIX: &str = "vit.";

#[derive(Clone, Debug, PartialEq)]
pub struct VitConfig {
    pub patch: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    /// Token grid side (`input / patch`).
    pub grid: usize,
    /// Zero-based blocks whose outputs are returned, ascending.
    pub stage_blocks: Vec<usize>,
    /// Channel count of every returned map; a frozen linear lift is added
    /// when this differs from `embed_dim`.
    pub out_channels: usize,
    pub ln_eps: f32,
}

impl VitConfig {
    /// ViT-B with 8x8 patches.
    pub fn base_patch8(grid: usize, stage_blocks: Vec<usize>) -> Self {
        VitConfig {
            patch: 8,
            embed_dim: 768,
            heads: 12,
            mlp_hidden: 3072,
            grid,
            stage_blocks,
            out_channels: 768,
            ln_eps: 1e-6,
        }
    }

    /// A narrow stand-in with the same output shapes.
    pub fn fixture(grid: usize, n_stages: usize, out_channels: usize) -> Self {
        VitConfig {
            patch: 8,
            embed_dim: 32,
            heads: 2,
            mlp_hidden: 64,
            grid,
            stage_blocks: (0..n_stages).collect(),
            out_channels,
            ln_eps: 1e-6,
        }
    }

    pub fn depth(&self) -> usize {
        self.stage_blocks.iter().max().map_or(0, |m| m + 1)
    }

    pub fn input_size(&self) -> usize {
        self.grid * self.patch
    }
}

#[derive(Clone, Debug)]
struct Block {
    norm1: LayerNorm,
    qkv: Linear,
    proj: Linear,
    norm2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

#[derive(Clone, Debug)]
pub struct Vit {
    pub config: VitConfig,
    patch_w: ParamId,
    patch_b: ParamId,
    cls_token: ParamId,
    pos_embed: ParamId,
    blocks: Vec<Block>,
    lifts: Vec<Linear>,
}

impl Vit {
    pub fn new(store: &mut ParamStore, config: VitConfig, rng: &mut impl Rng) -> Result<Self> {
        if !config.embed_dim.is_multiple_of(config.heads) {
            return Err(PfiqaError::Config(format!(
                "embed dim {} not divisible by {} heads",
                config.embed_dim, config.heads
            )));
        }
        if config.stage_blocks.windows(2).any(|w| w[0] >= w[1]) {
            return Err(PfiqaError::Config("stage blocks must be strictly ascending".into()));
        }
        let d = config.embed_dim;
        let p = config.patch;
        let fan = 3 * p * p;
        let bound = 1.0 / (fan as f32).sqrt();
        let patch_w = store.add(
            format!("{PREFIX}patch_embed.proj.weight"),
            Tensor::uniform(&[d, 3, p, p], bound, rng),
            false,
        );
        let patch_b = store.add(
            format!("{PREFIX}patch_embed.proj.bias"),
            Tensor::uniform(&[d], bound, rng),
            false,
        );
        let cls_token = store.add(format!("{PREFIX}cls_token"), Tensor::randn(&[1, 1, d], 0.02, rng), false);
        let tokens = config.grid * config.grid + 1;
        let pos_embed = store.add(
            format!("{PREFIX}pos_embed"),
            Tensor::randn(&[1, tokens, d], 0.02, rng),
            false,
        );
        let blocks = (0..config.depth())
            .map(|i| {
                let n = format!("{PREFIX}blocks.{i}");
                Block {
                    norm1: LayerNorm::new(store, &format!("{n}.norm1"), d, config.ln_eps, false),
                    qkv: Linear::new(store, &format!("{n}.attn.qkv"), d, 3 * d, true, false, rng),
                    proj: Linear::new(store, &format!("{n}.attn.proj"), d, d, true, false, rng),
                    norm2: LayerNorm::new(store, &format!("{n}.norm2"), d, config.ln_eps, false),
                    fc1: Linear::new(store, &format!("{n}.mlp.fc1"), d, config.mlp_hidden, true, false, rng),
                    fc2: Linear::new(store, &format!("{n}.mlp.fc2"), config.mlp_hidden, d, true, false, rng),
                }
            })
            .collect();
        let lifts = if config.out_channels != d {
            (0..config.stage_blocks.len())
                .map(|k| Linear::new(store, &format!("{PREFIX}lift.{k}"), d, config.out_channels, true, false, rng))
                .collect()
        } else {
            Vec::new()
        };
        Ok(Vit {
            config,
            patch_w,
            patch_b,
            cls_token,
            pos_embed,
            blocks,
            lifts,
        })
    }

    fn attention(&self, g: &mut Graph<'_>, block: &Block, x: Var) -> Result<Var> {
        let (n, t, d) = {
            let s = g.shape(x);
            (s[0], s[1], s[2])
        };
        let h = self.config.heads;
        let dh = d / h;
        let qkv = block.qkv.forward(g, x)?;
        let qkv = g.reshape(qkv, &[n, t, 3, h, dh])?;
        let qkv = g.permute(qkv, &[2, 0, 3, 1, 4])?;
        let qkv = g.reshape(qkv, &[3 * n * h, t, dh])?;
        let q = g.narrow(qkv, 0, 0, n * h)?;
        let k = g.narrow(qkv, 0, n * h, n * h)?;
        let v = g.narrow(qkv, 0, 2 * n * h, n * h)?;
        let scores = g.bmm(q, k, false, true)?;
        let scores = g.scale(scores, 1.0 / (dh as f32).sqrt());
        let attn = g.softmax(scores)?;
        let out = g.bmm(attn, v, false, false)?;
        let out = g.reshape(out, &[n, h, t, dh])?;
        let out = g.permute(out, &[0, 2, 1, 3])?;
        let out = g.reshape(out, &[n, t, d])?;
        block.proj.forward(g, out)
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let size = self.config.input_size();
        if shape.len() != 4 || shape[1] != 3 {
            return Err(PfiqaError::ShapeMismatch(format!("expected [N, 3, H, W], got {shape:?}")));
        }
        if shape[2] != size || shape[3] != size {
            return Err(PfiqaError::InputResolution {
                height: shape[2],
                width: shape[3],
                expected: size,
            });
        }
        Ok(())
    }

    /// Patch embedding plus class token and position embedding: `[N, T + 1, D]`.
    fn embed(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let n = g.shape(x)[0];
        let d = self.config.embed_dim;
        let tokens = self.config.grid * self.config.grid;
        let w = g.param(self.patch_w);
        let b = g.param(self.patch_b);
        let x = g.conv2d(x, w, Some(b), Conv2dSpec::new(self.config.patch, 0))?;
        let x = g.reshape(x, &[n, d, tokens])?;
        let x = g.transpose_last(x)?;
        let cls = g.param(self.cls_token);
        let cls = g.repeat_leading(cls, n)?;
        let x = g.concat(&[cls, x], 1)?;
        let pos = g.param(self.pos_embed);
        Ok(g.add_tiled(x, pos)?)
    }

    fn block(&self, g: &mut Graph<'_>, i: usize, x: Var) -> Result<Var> {
        let block = &self.blocks[i];
        let h = block.norm1.forward(g, x)?;
        let h = self.attention(g, block, h)?;
        let x = g.add(x, h)?;
        let h = block.norm2.forward(g, x)?;
        let h = block.fc1.forward(g, h)?;
        let h = g.gelu(h);
        let h = block.fc2.forward(g, h)?;
        Ok(g.add(x, h)?)
    }

    /// Token sequence of stage `k` as a `[N, C, grid, grid]` map.
    fn stage_map(&self, g: &mut Graph<'_>, k: usize, x: Var) -> Result<Var> {
        let n = g.shape(x)[0];
        let grid = self.config.grid;
        // drop the class token; it has no grid position
        let mut t = g.narrow(x, 1, 1, grid * grid)?;
        if let Some(lift) = self.lifts.get(k) {
            t = lift.forward(g, t)?;
        }
        let c = g.shape(t)[2];
        let t = g.transpose_last(t)?;
        Ok(g.reshape(t, &[n, c, grid, grid])?)
    }

    /// Stage maps `[N, out_channels, grid, grid]` for a normalized `[N, 3, H, W]` batch.
    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Vec<Var>> {
        self.check_input(g.shape(x))?;
        let mut x = self.embed(g, x)?;
        let mut stages = Vec::with_capacity(self.config.stage_blocks.len());
        for i in 0..self.blocks.len() {
            x = self.block(g, i, x)?;
            if let Some(k) = self.config.stage_blocks.iter().position(|b| *b == i) {
                stages.push(self.stage_map(g, k, x)?);
            }
        }
        Ok(stages)
    }

    /// Inference-only variant of [`Vit::forward`] that keeps at most one
    /// block's intermediates alive.
    pub fn forward_frozen(&self, store: &ParamStore, x: &Tensor) -> Result<Vec<Tensor>> {
        self.check_input(x.shape())?;
        let mut g = Graph::inference(store);
        let xv = g.constant(x.clone());
        let e = self.embed(&mut g, xv)?;
        let mut cur = g.value(e).clone();
        let mut stages = Vec::with_capacity(self.config.stage_blocks.len());
        for i in 0..self.blocks.len() {
            let mut g = Graph::inference(store);
            let xv = g.constant(cur);
            let y = self.block(&mut g, i, xv)?;
            if let Some(k) = self.config.stage_blocks.iter().position(|b| *b == i) {
                let m = self.stage_map(&mut g, k, y)?;
                stages.push(g.value(m).clone());
            }
            cur = g.value(y).clone();
        }
        Ok(stages)
    }
}

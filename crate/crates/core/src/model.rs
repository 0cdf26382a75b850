//! The full two-branch quality model.

use std::collections::HashMap;
use std::hash::{DefaultHasher, Hasher};
use std::sync::{Arc, Mutex};

use pfiqa_autograd::{Graph, ParamStore, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbones::{self, concat0, resnet, vit, Backbones, Reductions, StageVars, RESNET_CHANNELS, VIT_CHANNELS, VIT_STAGES};
use crate::config::ExperimentConfig;
use crate::datamodel::{BranchTag, FeatureBundle, Map2d, QualityPrediction};
use crate::error::{PfiqaError, Result};
use crate::fusion::Afm;
use crate::nn;
use crate::regression::{ScoringHead, WeightingHead};

/// Stream offset separating head initialisation from other seeded draws.
const INIT_STREAM: u64 = 0x5eed_0001;

/// Reduced global/local maps of one batch; `None` where a fusion mode skips a path.
#[derive(Clone, Copy, Debug, Default)]
pub struct FeatureVars {
    pub global: Option<Var>,
    pub local: Option<Var>,
}

/// Handles to everything one forward pass produced.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub sr: FeatureVars,
    pub lr: Option<FeatureVars>,
    pub diff: Option<FeatureVars>,
    pub perception: Option<Var>,
    pub fidelity: Option<Var>,
    pub s_p: Option<Var>,
    pub w_p: Option<Var>,
    pub s_f: Option<Var>,
    pub w_f: Option<Var>,
    /// `[N]` pooled scores.
    pub score: Var,
}

/// Maps of one image, as plain tensors.
#[derive(Clone, Debug)]
pub struct MapDump {
    pub prediction: QualityPrediction,
    pub diff: Option<FeatureBundle>,
}

/// Frozen stage outputs of one `[1, 3, H, W]` input, ResNet maps already at grid size.
#[derive(Debug)]
struct CachedStages {
    input: Tensor,
    vit: Vec<Tensor>,
    resnet: Vec<Tensor>,
}

impl CachedStages {
    fn bytes(&self) -> usize {
        4 * [&self.input].into_iter().chain(&self.vit).chain(&self.resnet).map(Tensor::numel).sum::<usize>()
    }
}

#[derive(Default)]
struct CacheState {
    by_hash: HashMap<u64, Vec<Arc<CachedStages>>>,
    bytes: usize,
}

/// Memo of frozen backbone outputs. Entries are never evicted; once the budget
/// is spent new inputs are computed without being stored. Clones start empty.
#[derive(Default)]
pub struct FeatureCache {
    state: Mutex<CacheState>,
}

impl FeatureCache {
    fn key(input: &Tensor) -> u64 {
        let mut h = DefaultHasher::new();
        for v in input.data() {
            h.write_u32(v.to_bits());
        }
        h.finish()
    }

    fn get(&self, key: u64, input: &Tensor) -> Option<Arc<CachedStages>> {
        let state = self.state.lock().expect("feature cache poisoned");
        state.by_hash.get(&key)?.iter().find(|e| &e.input == input).cloned()
    }

    fn insert(&self, key: u64, entry: Arc<CachedStages>, budget: usize) {
        let mut state = self.state.lock().expect("feature cache poisoned");
        let size = entry.bytes();
        if state.bytes + size <= budget {
            state.bytes += size;
            state.by_hash.entry(key).or_default().push(entry);
        }
    }

    pub fn bytes(&self) -> usize {
        self.state.lock().expect("feature cache poisoned").bytes
    }

    pub fn clear(&self) {
        *self.state.lock().expect("feature cache poisoned") = CacheState::default();
    }
}

impl Clone for FeatureCache {
    fn clone(&self) -> Self {
        FeatureCache::default()
    }
}

impl std::fmt::Debug for FeatureCache {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FeatureCache").field("bytes", &self.bytes()).finish()
    }
}

#[derive(Clone, Debug)]
pub struct Pfiqa {
    pub config: ExperimentConfig,
    pub store: ParamStore,
    pub backbones: Backbones,
    pub reductions: Reductions,
    pub afm_perception: Option<Afm>,
    pub afm_fidelity: Option<Afm>,
    pub head_perception: Option<ScoringHead>,
    pub head_fidelity: Option<ScoringHead>,
    pub weighting: WeightingHead,
    /// Only consulted while every backbone is frozen; clear it after
    /// assigning backbone parameters by hand.
    pub feature_cache: FeatureCache,
}

impl Pfiqa {
    /// Build and initialise a model; head initialisation depends only on `config.seed`.
    pub fn new(config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let ab = &config.ablation;
        let m = &config.model;
        let mode = ab.fusion_mode;
        let mut store = ParamStore::new();

        let mut backbone_rng = ChaCha8Rng::seed_from_u64(config.backbone.fixture_seed);
        let backbones = Backbones::new(
            &mut store,
            &config.backbone,
            config.crop_size,
            mode.uses_vit(),
            mode.uses_resnet(),
            &mut backbone_rng,
        )?;
        if ab.backbone_trainable.vit() && backbones.vit.is_some() {
            nn::set_trainable_prefix(&mut store, vit::PREFIX, true);
        }
        if ab.backbone_trainable.resnet() && backbones.resnet.is_some() {
            nn::set_trainable_prefix(&mut store, resnet::PREFIX, true);
        }

        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(INIT_STREAM);
        let grid = backbones.grid();
        let reductions = Reductions::new(
            &mut store,
            m.feature_channels,
            m.reduction_kernel,
            grid,
            mode.uses_vit(),
            mode.uses_resnet(),
            &mut rng,
        );
        let branches = usize::from(ab.enable_perception_branch) + usize::from(ab.enable_fidelity_branch);
        let bias = 0.5 / branches as f32;
        let afm = |store: &mut ParamStore, tag, on: bool, rng: &mut ChaCha8Rng| {
            on.then(|| Afm::new(store, tag, mode, ab.enable_scale_factor, m, grid, rng))
        };
        let afm_perception = afm(&mut store, BranchTag::Perception, ab.enable_perception_branch, &mut rng);
        let afm_fidelity = afm(&mut store, BranchTag::Fidelity, ab.enable_fidelity_branch, &mut rng);
        let head_perception = ab
            .enable_perception_branch
            .then(|| ScoringHead::new(&mut store, BranchTag::Perception, m.branch_channels, m.score_hidden, bias, &mut rng));
        let head_fidelity = ab
            .enable_fidelity_branch
            .then(|| ScoringHead::new(&mut store, BranchTag::Fidelity, m.branch_channels, m.score_hidden, bias, &mut rng));
        let weighting = WeightingHead::new(&mut store, m.branch_channels, branches, m.weight_hidden, &mut rng);

        Ok(Pfiqa {
            config: config.clone(),
            store,
            backbones,
            reductions,
            afm_perception,
            afm_fidelity,
            head_perception,
            head_fidelity,
            weighting,
            feature_cache: FeatureCache::default(),
        })
    }

    pub fn input_size(&self) -> usize {
        self.config.crop_size
    }

    pub fn grid(&self) -> usize {
        self.backbones.grid()
    }

    pub fn trainable_params(&self) -> usize {
        self.store.trainable_count()
    }

    /// Names of backbone parameters, including statistics buffers.
    pub fn is_backbone_param(name: &str) -> bool {
        name.starts_with(vit::PREFIX) || name.starts_with(resnet::PREFIX)
    }

    fn stage_vars(&self, g: &mut Graph<'_>, x: &Tensor) -> Result<StageVars> {
        let vit_live = nn::trainable_count_prefix(&self.store, vit::PREFIX) > 0;
        let resnet_live = nn::trainable_count_prefix(&self.store, resnet::PREFIX) > 0;
        if vit_live || resnet_live {
            // trainable backbones run on the main graph; frozen ones still
            // contribute constants
            let xv = g.constant(x.clone());
            let mut out = StageVars::default();
            if let Some(v) = &self.backbones.vit {
                out.vit = if vit_live {
                    v.forward(g, xv)?
                } else {
                    frozen_vars(g, self.backbone_frozen_vit(x)?)
                };
            }
            if let Some(r) = &self.backbones.resnet {
                out.resnet = if resnet_live {
                    r.forward(g, xv)?
                } else {
                    frozen_vars(g, self.backbone_frozen_resnet(x)?)
                };
            }
            return Ok(out);
        }
        let out = self.backbones.forward_frozen(&self.store, x)?;
        Ok(StageVars {
            vit: frozen_vars(g, out.vit_stages),
            resnet: frozen_vars(g, out.resnet_stages),
        })
    }

    fn backbones_live(&self) -> bool {
        self.backbones.any_trainable(&self.store)
    }

    /// Frozen stage outputs of one `[1, 3, H, W]` image, from the cache when possible.
    fn frozen_stages(&self, image: Tensor) -> Result<Arc<CachedStages>> {
        let budget = self.config.backbone.feature_cache_mb << 20;
        let key = FeatureCache::key(&image);
        if budget > 0 {
            if let Some(hit) = self.feature_cache.get(key, &image) {
                return Ok(hit);
            }
        }
        let out = self.backbones.forward_frozen(&self.store, &image)?;
        let grid = self.grid();
        let mut g = Graph::inference(&self.store);
        let mut resnet = Vec::with_capacity(out.resnet_stages.len());
        for t in out.resnet_stages {
            if t.dim(2) == grid && t.dim(3) == grid {
                resnet.push(t);
            } else {
                let v = g.constant(t);
                let r = g.resize_bilinear(v, grid, grid)?;
                resnet.push(g.value(r).clone());
            }
        }
        let entry = Arc::new(CachedStages {
            input: image,
            vit: out.vit_stages,
            resnet,
        });
        if budget > 0 {
            self.feature_cache.insert(key, entry.clone(), budget);
        }
        Ok(entry)
    }

    /// Reduced features of a stacked batch with frozen backbones, reducing
    /// image by image so the stacked stage channels are never materialised.
    fn frozen_features(&self, g: &mut Graph<'_>, x: &Tensor) -> Result<FeatureVars> {
        self.backbones.check_input(x.shape())?;
        let global = match &self.reductions.global {
            Some(c) => Some(c.split(g, &[VIT_CHANNELS; VIT_STAGES])?),
            None => None,
        };
        let local = match &self.reductions.local {
            Some(c) => Some(c.split(g, &RESNET_CHANNELS)?),
            None => None,
        };
        let (mut globals, mut locals) = (Vec::new(), Vec::new());
        // identical images in one batch (an LR crop shared by several SR
        // methods) are reduced once and the result reused
        let mut seen: Vec<(Tensor, Option<Var>, Option<Var>)> = Vec::new();
        for i in 0..x.dim(0) {
            let img = x.index0(i);
            let (gv, lv) = match seen.iter().find(|(t, _, _)| *t == img) {
                Some(&(_, gv, lv)) => (gv, lv),
                None => {
                    let s = img.shape().to_vec();
                    let stages = self.frozen_stages(img.clone().reshape(&[1, s[0], s[1], s[2]])?)?;
                    let gv = match &global {
                        Some(conv) => {
                            let vars = frozen_vars(g, stages.vit.clone());
                            Some(backbones::reduce_global_with(g, conv, &vars)?)
                        }
                        None => None,
                    };
                    let lv = match &local {
                        Some(conv) => {
                            let vars = frozen_vars(g, stages.resnet.clone());
                            Some(backbones::reduce_local_with(g, conv, &vars, self.reductions.grid)?)
                        }
                        None => None,
                    };
                    seen.push((img, gv, lv));
                    (gv, lv)
                }
            };
            globals.extend(gv);
            locals.extend(lv);
        }
        let join = |g: &mut Graph<'_>, parts: Vec<Var>| -> Result<Option<Var>> {
            match parts.len() {
                0 => Ok(None),
                1 => Ok(Some(parts[0])),
                _ => Ok(Some(g.concat(&parts, 0)?)),
            }
        };
        Ok(FeatureVars {
            global: join(g, globals)?,
            local: join(g, locals)?,
        })
    }

    fn features(&self, g: &mut Graph<'_>, x: &Tensor) -> Result<FeatureVars> {
        if self.backbones_live() {
            let stages = self.stage_vars(g, x)?;
            self.reduce(g, &stages)
        } else {
            self.frozen_features(g, x)
        }
    }

    fn backbone_frozen_vit(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let only = Backbones {
            vit: self.backbones.vit.clone(),
            resnet: None,
            input_size: self.backbones.input_size,
        };
        Ok(only.forward_frozen(&self.store, x)?.vit_stages)
    }

    fn backbone_frozen_resnet(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let only = Backbones {
            vit: None,
            resnet: self.backbones.resnet.clone(),
            input_size: self.backbones.input_size,
        };
        Ok(only.forward_frozen(&self.store, x)?.resnet_stages)
    }

    /// Reduced features of a stacked batch.
    fn reduce(&self, g: &mut Graph<'_>, stages: &StageVars) -> Result<FeatureVars> {
        let global = match &self.reductions.global {
            Some(conv) => Some(backbones::reduce_global(g, conv, &stages.vit)?),
            None => None,
        };
        let local = match &self.reductions.local {
            Some(conv) => Some(backbones::reduce_local(g, conv, &stages.resnet, self.reductions.grid)?),
            None => None,
        };
        Ok(FeatureVars { global, local })
    }

    /// Forward pass on normalized `[N, 3, H, W]` SR and upsampled-LR crops.
    pub fn forward(&self, g: &mut Graph<'_>, sr: &Tensor, lr: &Tensor, scales: &[f32]) -> Result<ForwardOutput> {
        if sr.shape() != lr.shape() {
            return Err(PfiqaError::ShapeMismatch(format!(
                "SR batch {:?} vs LR batch {:?}",
                sr.shape(),
                lr.shape()
            )));
        }
        if sr.dims() != 4 || sr.dim(0) != scales.len() {
            return Err(PfiqaError::ShapeMismatch(format!(
                "batch {:?} with {} scale factors",
                sr.shape(),
                scales.len()
            )));
        }
        let n = scales.len();
        let ab = &self.config.ablation;
        let need_lr = ab.enable_fidelity_branch;

        let (sr_feats, lr_feats) = if need_lr {
            let both = concat0(&[sr, lr])?;
            let f = self.features(g, &both)?;
            let split = |g: &mut Graph<'_>, v: Option<Var>, start: usize| -> Result<Option<Var>> {
                v.map(|v| g.narrow(v, 0, start, n)).transpose().map_err(Into::into)
            };
            let sr_f = FeatureVars {
                global: split(g, f.global, 0)?,
                local: split(g, f.local, 0)?,
            };
            let lr_f = FeatureVars {
                global: split(g, f.global, n)?,
                local: split(g, f.local, n)?,
            };
            (sr_f, Some(lr_f))
        } else {
            (self.features(g, sr)?, None)
        };

        let diff = match lr_feats {
            Some(lr_f) => {
                let sub = |g: &mut Graph<'_>, a: Option<Var>, b: Option<Var>| -> Result<Option<Var>> {
                    match (a, b) {
                        (Some(a), Some(b)) => Ok(Some(g.sub(a, b)?)),
                        _ => Ok(None),
                    }
                };
                Some(FeatureVars {
                    global: sub(g, sr_feats.global, lr_f.global)?,
                    local: sub(g, sr_feats.local, lr_f.local)?,
                })
            }
            None => None,
        };

        let perception = match &self.afm_perception {
            Some(afm) => Some(afm.forward(g, sr_feats.global, sr_feats.local, scales)?),
            None => None,
        };
        let fidelity = match (&self.afm_fidelity, &diff) {
            (Some(afm), Some(d)) => Some(afm.forward(g, d.global, d.local, scales)?),
            _ => None,
        };

        let s_p = match (&self.head_perception, perception) {
            (Some(h), Some(f)) => Some(h.score_map(g, f)?),
            _ => None,
        };
        let s_f = match (&self.head_fidelity, fidelity) {
            (Some(h), Some(f)) => Some(h.score_map(g, f)?),
            _ => None,
        };
        let feats: Vec<Var> = perception.into_iter().chain(fidelity).collect();
        let mut weights = self.weighting.weight_maps(g, &feats)?.into_iter();
        let w_p = perception.and_then(|_| weights.next());
        let w_f = fidelity.and_then(|_| weights.next());

        let mut score: Option<Var> = None;
        for (s, w) in [(s_p, w_p), (s_f, w_f)] {
            if let (Some(s), Some(w)) = (s, w) {
                let term = g.weighted_mean(s, w)?;
                score = Some(match score {
                    Some(acc) => g.add(acc, term)?,
                    None => term,
                });
            }
        }
        let score = score.ok_or_else(|| PfiqaError::Config("no branch enabled".into()))?;

        Ok(ForwardOutput {
            sr: sr_feats,
            lr: lr_feats,
            diff,
            perception,
            fidelity,
            s_p,
            w_p,
            s_f,
            w_f,
            score,
        })
    }

    /// Inference on a batch, returning one record (with maps) per image.
    pub fn predict(&self, sr: &Tensor, lr: &Tensor, scales: &[f32]) -> Result<Vec<MapDump>> {
        let mut g = Graph::inference(&self.store);
        let out = self.forward(&mut g, sr, lr, scales)?;
        let grid = self.grid();
        let map = |g: &Graph<'_>, v: Option<Var>, i: usize| -> Result<Option<Map2d>> {
            v.map(|v| Map2d::new(grid, g.value(v).index0(i).into_data())).transpose()
        };
        let scores = g.value(out.score).data().to_vec();
        (0..scales.len())
            .map(|i| {
                let perception = map(&g, out.s_p, i)?.zip(map(&g, out.w_p, i)?);
                let fidelity = map(&g, out.s_f, i)?.zip(map(&g, out.w_f, i)?);
                let mut prediction = QualityPrediction::from_maps(perception, fidelity)?;
                // keep the value the graph produced so training and inference agree
                debug_assert!((prediction.final_score - scores[i] as f64).abs() < 1e-4);
                prediction.final_score = scores[i] as f64;
                let diff = match out.diff {
                    Some(d) => {
                        let pick = |v: Option<Var>| v.map(|v| g.value(v).index0(i));
                        let zeros = || Tensor::zeros(&[0, 0, 0]);
                        Some(FeatureBundle {
                            global_feat: pick(d.global).unwrap_or_else(zeros),
                            local_feat: pick(d.local).unwrap_or_else(zeros),
                        })
                    }
                    None => None,
                };
                Ok(MapDump { prediction, diff })
            })
            .collect()
    }

    /// Pooled scores only.
    pub fn score_batch(&self, sr: &Tensor, lr: &Tensor, scales: &[f32]) -> Result<Vec<f64>> {
        let mut g = Graph::inference(&self.store);
        let out = self.forward(&mut g, sr, lr, scales)?;
        Ok(g.value(out.score).data().iter().map(|v| *v as f64).collect())
    }
}

fn frozen_vars(g: &mut Graph<'_>, tensors: Vec<Tensor>) -> Vec<Var> {
    tensors.into_iter().map(|t| g.constant(t)).collect()
}

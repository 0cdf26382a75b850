//! Patch score maps, patch weight maps, and their pooling into one score.

use pfiqa_autograd::{Graph, ParamStore, Tensor, Var, WEIGHT_SUM_EPS};
use rand::Rng;

use crate::datamodel::BranchTag;
use crate::error::{PfiqaError, Result};
use crate::nn::Conv2d;

/// conv3x3, ReLU, conv3x3 down to one channel.
#[derive(Clone, Debug)]
pub struct ScoringHead {
    pub tag: BranchTag,
    pub conv1: Conv2d,
    pub conv2: Conv2d,
}

impl ScoringHead {
    pub fn new(
        store: &mut ParamStore,
        tag: BranchTag,
        in_channels: usize,
        hidden: usize,
        initial_bias: f32,
        rng: &mut impl Rng,
    ) -> Self {
        let name = format!("head.score_{}", tag.name());
        let conv1 = Conv2d::same(store, &format!("{name}.conv1"), in_channels, hidden, 3, true, rng);
        let conv2 = Conv2d::same(store, &format!("{name}.conv2"), hidden, 1, 3, true, rng);
        if let Some(b) = conv2.bias {
            *store.value_mut(b) = Tensor::full(&[1], initial_bias);
        }
        ScoringHead { tag, conv1, conv2 }
    }

    /// `[N, 1, p, p]` unbounded patch scores.
    pub fn score_map(&self, g: &mut Graph<'_>, feat: Var) -> Result<Var> {
        let h = self.conv1.forward(g, feat)?;
        let h = g.relu(h);
        self.conv2.forward(g, h)
    }
}

/// conv3x3 over the concatenated branch features, ReLU, conv1x1, sigmoid;
/// one output channel per enabled branch.
#[derive(Clone, Debug)]
pub struct WeightingHead {
    pub conv3: Conv2d,
    pub conv1: Conv2d,
    pub branches: usize,
}

impl WeightingHead {
    pub fn new(store: &mut ParamStore, branch_channels: usize, branches: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        WeightingHead {
            conv3: Conv2d::same(store, "head.weight.conv3", branches * branch_channels, hidden, 3, true, rng),
            conv1: Conv2d::same(store, "head.weight.conv1", hidden, branches, 1, true, rng),
            branches,
        }
    }

    /// One `[N, 1, p, p]` map in `(0, 1)` per input, in input order.
    pub fn weight_maps(&self, g: &mut Graph<'_>, feats: &[Var]) -> Result<Vec<Var>> {
        if feats.len() != self.branches {
            return Err(PfiqaError::ShapeMismatch(format!(
                "weighting head expects {} branches, got {}",
                self.branches,
                feats.len()
            )));
        }
        let x = if feats.len() == 1 { feats[0] } else { g.concat(feats, 1)? };
        let h = self.conv3.forward(g, x)?;
        let h = g.relu(h);
        let h = self.conv1.forward(g, h)?;
        let w = g.sigmoid(h);
        if self.branches == 1 {
            return Ok(vec![w]);
        }
        (0..self.branches).map(|k| Ok(g.narrow(w, 1, k, 1)?)).collect()
    }
}

/// `sum(s * w) / sum(w)`, rejecting weight mass at or below the guard.
pub fn weighted_mean(s: &[f64], w: &[f64]) -> Result<f64> {
    if s.len() != w.len() {
        return Err(PfiqaError::LengthMismatch(s.len(), w.len()));
    }
    let mass: f64 = w.iter().sum();
    if mass.is_nan() || mass <= WEIGHT_SUM_EPS {
        return Err(PfiqaError::DegenerateWeights(mass));
    }
    let num: f64 = s.iter().zip(w).map(|(a, b)| a * b).sum();
    Ok(num / mass)
}

/// Sum of the two weighted means.
pub fn final_score(s_p: &[f64], s_f: &[f64], w_p: &[f64], w_f: &[f64]) -> Result<f64> {
    Ok(weighted_mean(s_p, w_p)? + weighted_mean(s_f, w_f)?)
}

/// Partial derivatives of [`final_score`] with respect to each map.
#[derive(Clone, Debug, PartialEq)]
pub struct FinalScoreGrad {
    pub s_p: Vec<f64>,
    pub s_f: Vec<f64>,
    pub w_p: Vec<f64>,
    pub w_f: Vec<f64>,
}

fn weighted_mean_grad(s: &[f64], w: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let m = weighted_mean(s, w)?;
    let mass: f64 = w.iter().sum();
    let ds = w.iter().map(|wi| wi / mass).collect();
    let dw = s.iter().map(|si| (si - m) / mass).collect();
    Ok((ds, dw))
}

pub fn final_score_grad(s_p: &[f64], s_f: &[f64], w_p: &[f64], w_f: &[f64]) -> Result<FinalScoreGrad> {
    let (ds_p, dw_p) = weighted_mean_grad(s_p, w_p)?;
    let (ds_f, dw_f) = weighted_mean_grad(s_f, w_f)?;
    Ok(FinalScoreGrad {
        s_p: ds_p,
        s_f: ds_f,
        w_p: dw_p,
        w_f: dw_f,
    })
}

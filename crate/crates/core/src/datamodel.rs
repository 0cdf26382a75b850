//! Domain types shared by every stage of the pipeline.

use pfiqa_autograd::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{PfiqaError, Result};
use crate::regression;

/// An interleaved `height x width x 3` RGB image with samples in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(PfiqaError::ShapeMismatch(format!(
                "{height}x{width}x3 image needs {} values, got {}",
                height * width * 3,
                data.len()
            )));
        }
        Ok(RgbImage {
            height,
            width,
            data,
        })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                for c in 0..3 {
                    data.push(f(y, x, c));
                }
            }
        }
        RgbImage {
            height,
            width,
            data,
        }
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        RgbImage {
            height,
            width,
            data: vec![value; height * width * 3],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * 3 + c]
    }

    pub fn in_unit_range(&self) -> bool {
        self.data.iter().all(|v| (0.0..=1.0).contains(v))
    }

    /// Bilinear resize with half-pixel centres.
    pub fn resize_bilinear(&self, height: usize, width: usize) -> RgbImage {
        let data = pfiqa_autograd::kernels::resize_bilinear_interleaved(
            &self.data,
            self.height,
            self.width,
            3,
            height,
            width,
        );
        RgbImage {
            height,
            width,
            data,
        }
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<RgbImage> {
        if top + height > self.height || left + width > self.width {
            return Err(PfiqaError::ShapeMismatch(format!(
                "crop {height}x{width} at ({top}, {left}) exceeds {}x{}",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(height * width * 3);
        for y in top..top + height {
            let row = (y * self.width + left) * 3;
            data.extend_from_slice(&self.data[row..row + width * 3]);
        }
        Ok(RgbImage {
            height,
            width,
            data,
        })
    }

    pub fn flip_horizontal(&self) -> RgbImage {
        RgbImage::from_fn(self.height, self.width, |y, x, c| self.get(y, self.width - 1 - x, c))
    }

    /// ITU-R BT.601 luma.
    pub fn luma(&self) -> Vec<f64> {
        self.data
            .chunks_exact(3)
            .map(|p| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64)
            .collect()
    }

    /// Planar `[3, H, W]` tensor with per-channel `(v - mean) / std`.
    pub fn to_normalized_tensor(&self, mean: [f32; 3], std: [f32; 3]) -> Tensor {
        let plane = self.height * self.width;
        let mut out = vec![0.0; 3 * plane];
        for (i, px) in self.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * plane + i] = (px[c] - mean[c]) / std[c];
            }
        }
        Tensor::new(&[3, self.height, self.width], out).expect("planar size matches")
    }
}

/// One SR image with its bilinearly upsampled LR source.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub sr_image: RgbImage,
    pub lr_image_upsampled: RgbImage,
    pub scale_factor: f64,
    /// Normalized opinion score in `[0, 1]`.
    pub mos: Option<f64>,
    pub dataset_id: String,
    pub content_id: String,
    pub method_id: String,
}

/// Check every [`Sample`] invariant and hand the sample back unchanged.
pub fn validate_sample(s: Sample) -> Result<Sample> {
    if s.sr_image.dims() != s.lr_image_upsampled.dims() {
        return Err(PfiqaError::ShapeMismatch(format!(
            "SR is {}x{} but upsampled LR is {}x{}",
            s.sr_image.height(),
            s.sr_image.width(),
            s.lr_image_upsampled.height(),
            s.lr_image_upsampled.width()
        )));
    }
    if !(s.scale_factor.is_finite() && s.scale_factor > 1.0) {
        return Err(PfiqaError::Range(format!(
            "scale factor {} must exceed 1",
            s.scale_factor
        )));
    }
    if !s.sr_image.in_unit_range() || !s.lr_image_upsampled.in_unit_range() {
        return Err(PfiqaError::Range("pixel values outside [0, 1]".into()));
    }
    if let Some(m) = s.mos {
        if !(0.0..=1.0).contains(&m) {
            return Err(PfiqaError::Range(format!("mos {m} outside [0, 1]")));
        }
    }
    Ok(s)
}

/// Reduced global (ViT) and local (ResNet) maps, each `[C, p, p]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBundle {
    pub global_feat: Tensor,
    pub local_feat: Tensor,
}

impl FeatureBundle {
    pub fn new(global_feat: Tensor, local_feat: Tensor) -> Result<Self> {
        let b = FeatureBundle {
            global_feat,
            local_feat,
        };
        b.check()?;
        Ok(b)
    }

    pub fn check(&self) -> Result<()> {
        for (name, t) in [("global", &self.global_feat), ("local", &self.local_feat)] {
            if t.dims() != 3 || t.dim(1) != t.dim(2) {
                return Err(PfiqaError::ShapeMismatch(format!(
                    "{name} features must be [C, p, p], got {:?}",
                    t.shape()
                )));
            }
            if !t.is_finite() {
                return Err(PfiqaError::Range(format!("{name} features are not finite")));
            }
        }
        if self.global_feat.shape() != self.local_feat.shape() {
            return Err(PfiqaError::ShapeMismatch(format!(
                "global {:?} vs local {:?}",
                self.global_feat.shape(),
                self.local_feat.shape()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BranchTag {
    Perception,
    Fidelity,
}

impl BranchTag {
    pub fn name(self) -> &'static str {
        match self {
            BranchTag::Perception => "perception",
            BranchTag::Fidelity => "fidelity",
        }
    }
}

/// Scale-conditioned features of one branch, `[C_b, p, p]`.
#[derive(Clone, Debug, PartialEq)]
pub struct BranchFeatures {
    pub feat: Tensor,
    pub branch_tag: BranchTag,
}

/// A `p x p` map stored row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Map2d {
    pub size: usize,
    pub values: Vec<f32>,
}

impl Map2d {
    pub fn new(size: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != size * size {
            return Err(PfiqaError::ShapeMismatch(format!(
                "{size}x{size} map needs {} values, got {}",
                size * size,
                values.len()
            )));
        }
        Ok(Map2d { size, values })
    }

    pub fn constant(size: usize, v: f32) -> Self {
        Map2d {
            size,
            values: vec![v; size * size],
        }
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.values.iter().map(|v| *v as f64).collect()
    }
}

/// Per-branch score and weight maps plus the pooled score.
///
/// A branch disabled by an ablation has no maps and contributes nothing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QualityPrediction {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub s_p: Option<Map2d>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub s_f: Option<Map2d>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub w_p: Option<Map2d>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub w_f: Option<Map2d>,
    pub final_score: f64,
}

impl QualityPrediction {
    /// Build from maps, computing the pooled score in double precision.
    pub fn from_maps(perception: Option<(Map2d, Map2d)>, fidelity: Option<(Map2d, Map2d)>) -> Result<Self> {
        let mut score = 0.0;
        for (s, w) in [&perception, &fidelity].into_iter().flatten() {
            if s.size != w.size {
                return Err(PfiqaError::ShapeMismatch("score and weight maps differ in size".into()));
            }
            score += regression::weighted_mean(&s.as_f64(), &w.as_f64())?;
        }
        let (s_p, w_p) = perception.unzip();
        let (s_f, w_f) = fidelity.unzip();
        Ok(QualityPrediction {
            s_p,
            s_f,
            w_p,
            w_f,
            final_score: score,
        })
    }

    /// Same record with only the scalar kept.
    pub fn without_maps(&self) -> QualityPrediction {
        QualityPrediction {
            s_p: None,
            s_f: None,
            w_p: None,
            w_f: None,
            final_score: self.final_score,
        }
    }

    pub fn weights_in_open_unit_interval(&self) -> bool {
        [&self.w_p, &self.w_f]
            .into_iter()
            .flatten()
            .all(|m| m.values.iter().all(|v| *v > 0.0 && *v < 1.0))
    }
}

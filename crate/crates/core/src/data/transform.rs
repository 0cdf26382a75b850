//! Cropping, flipping and normalization into model-ready tensors.

use pfiqa_autograd::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbones::{IMAGENET_MEAN, IMAGENET_STD};
use crate::datamodel::{RgbImage, Sample};
use crate::error::{PfiqaError, Result};

/// One aligned SR/LR crop pair, each `[3, crop, crop]` and normalized.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelInput {
    pub sr: Tensor,
    pub lr: Tensor,
    pub scale: f64,
    pub mos: Option<f64>,
}

/// Stacked inputs: `[N, 3, crop, crop]` tensors plus per-item scalars.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub sr: Tensor,
    pub lr: Tensor,
    pub scales: Vec<f32>,
    pub mos: Vec<f32>,
}

/// Independent generator for sample `index` in `epoch`.
pub fn sample_rng(seed: u64, epoch: usize, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa5a5_5a5a_0f0f_f0f0);
    rng.set_stream(((epoch as u64) << 32) | index as u64);
    rng
}

fn check_size(s: &Sample, crop: usize) -> Result<()> {
    let (h, w) = s.sr_image.dims();
    if h < crop || w < crop {
        return Err(PfiqaError::Resolution {
            source_id: format!("sample {}/{}", s.content_id, s.method_id),
            height: h,
            width: w,
            min: crop,
        });
    }
    Ok(())
}

fn to_input(s: &Sample, sr: &RgbImage, lr: &RgbImage) -> ModelInput {
    ModelInput {
        sr: sr.to_normalized_tensor(IMAGENET_MEAN, IMAGENET_STD),
        lr: lr.to_normalized_tensor(IMAGENET_MEAN, IMAGENET_STD),
        scale: s.scale_factor,
        mos: s.mos,
    }
}

/// Crop SR and LR at the same window, optionally flipping both.
pub fn crop_pair(s: &Sample, top: usize, left: usize, crop: usize, flip: bool) -> Result<ModelInput> {
    check_size(s, crop)?;
    let mut sr = s.sr_image.crop(top, left, crop, crop)?;
    let mut lr = s.lr_image_upsampled.crop(top, left, crop, crop)?;
    if flip {
        sr = sr.flip_horizontal();
        lr = lr.flip_horizontal();
    }
    Ok(to_input(s, &sr, &lr))
}

/// Random crop and horizontal flip shared by SR and LR.
pub fn train_transform(s: &Sample, crop: usize, rng: &mut impl Rng) -> Result<ModelInput> {
    check_size(s, crop)?;
    let (h, w) = s.sr_image.dims();
    let top = rng.random_range(0..=h - crop);
    let left = rng.random_range(0..=w - crop);
    let flip = rng.random_bool(0.5);
    crop_pair(s, top, left, crop, flip)
}

/// `(top, left)` of the four corner crops followed by the centre crop.
pub fn eval_crop_offsets(height: usize, width: usize, crop: usize) -> Result<[(usize, usize); 5]> {
    if height < crop || width < crop {
        return Err(PfiqaError::Resolution {
            source_id: "image".into(),
            height,
            width,
            min: crop,
        });
    }
    let (dy, dx) = (height - crop, width - crop);
    Ok([(0, 0), (0, dx), (dy, 0), (dy, dx), (dy / 2, dx / 2)])
}

pub fn eval_crops(s: &Sample, crop: usize) -> Result<Vec<ModelInput>> {
    check_size(s, crop)?;
    let (h, w) = s.sr_image.dims();
    eval_crop_offsets(h, w, crop)?
        .iter()
        .map(|&(top, left)| crop_pair(s, top, left, crop, false))
        .collect()
}

pub fn collate(items: &[ModelInput]) -> Result<Batch> {
    if items.is_empty() {
        return Err(PfiqaError::TooFew {
            what: "batch items",
            needed: 1,
            got: 0,
        });
    }
    let sr: Vec<Tensor> = items.iter().map(|i| i.sr.clone()).collect();
    let lr: Vec<Tensor> = items.iter().map(|i| i.lr.clone()).collect();
    Ok(Batch {
        sr: Tensor::stack(&sr)?,
        lr: Tensor::stack(&lr)?,
        scales: items.iter().map(|i| i.scale as f32).collect(),
        mos: items.iter().map(|i| i.mos.unwrap_or(f64::NAN) as f32).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn coords(h: usize, w: usize) -> RgbImage {
        // channel 0 encodes the row, channel 1 the column
        RgbImage::from_fn(h, w, |y, x, c| match c {
            0 => y as f32 / h as f32,
            1 => x as f32 / w as f32,
            _ => 0.5,
        })
    }

    fn sample(h: usize, w: usize) -> Sample {
        Sample {
            sr_image: coords(h, w),
            lr_image_upsampled: coords(h, w),
            scale_factor: 4.0,
            mos: Some(0.25),
            dataset_id: "t".into(),
            content_id: "c".into(),
            method_id: "m".into(),
        }
    }

    #[test]
    fn geometry_of_eval_crops() {
        assert_eq!(eval_crop_offsets(224, 224, 224).unwrap(), [(0, 0); 5]);
        assert_eq!(
            eval_crop_offsets(448, 448, 224).unwrap(),
            [(0, 0), (0, 224), (224, 0), (224, 224), (112, 112)]
        );
        assert_eq!(eval_crop_offsets(300, 400, 224).unwrap()[4], (38, 88));
        assert!(eval_crop_offsets(200, 200, 224).is_err());
    }

    #[test]
    fn shared_window_and_flip() {
        let s = sample(40, 50);
        let mut rng = sample_rng(3, 0, 0);
        let out = train_transform(&s, 32, &mut rng).unwrap();
        assert_eq!(out.sr.shape(), &[3, 32, 32]);
        assert_eq!(out.sr, out.lr);
        let mut again = sample_rng(3, 0, 0);
        assert_eq!(train_transform(&s, 32, &mut again).unwrap(), out);
    }

    #[test]
    fn crop_error() {
        let mut rng = sample_rng(0, 0, 0);
        assert!(matches!(
            train_transform(&sample(20, 20), 32, &mut rng),
            Err(PfiqaError::Resolution { height: 20, .. })
        ));
    }

    #[test]
    fn collate_stacks() {
        let s = sample(16, 16);
        let crops = eval_crops(&s, 8).unwrap();
        let b = collate(&crops).unwrap();
        assert_eq!(b.sr.shape(), &[5, 3, 8, 8]);
        assert_eq!(b.scales, vec![4.0; 5]);
        assert_eq!(b.mos, vec![0.25; 5]);
    }
}

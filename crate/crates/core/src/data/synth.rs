//! Procedural corpus with a known quality ordering.
//!
//! Each content is a random texture used as the HR image. Its LR version is a
//! bilinear downsample; SR surrogates blend HR toward the upsampled LR,
//! blur and add noise with strength `d`, and the pseudo-opinion score is
//! `1 - d / d_max`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::SynthConfig;
use crate::datamodel::{validate_sample, RgbImage, Sample};
use crate::error::{PfiqaError, Result};

const MAX_BLUR_SIGMA: f64 = 1.5;
const MAX_NOISE_STD: f64 = 0.03;
const GRATINGS: usize = 6;
const SHAPES: usize = 5;

pub fn texture(size: usize, rng: &mut impl Rng) -> RgbImage {
    struct Grating {
        fx: f64,
        fy: f64,
        phase: f64,
        amp: [f64; 3],
    }
    let gratings: Vec<Grating> = (0..GRATINGS)
        .map(|_| {
            let freq = rng.random_range(0.01..0.25);
            let theta = rng.random_range(0.0..std::f64::consts::PI);
            Grating {
                fx: freq * theta.cos(),
                fy: freq * theta.sin(),
                phase: rng.random_range(0.0..std::f64::consts::TAU),
                amp: [rng.random_range(0.2..1.0), rng.random_range(0.2..1.0), rng.random_range(0.2..1.0)],
            }
        })
        .collect();
    // Hard-edged disks give the textures some step edges.
    let shapes: Vec<(f64, f64, f64, [f64; 3])> = (0..SHAPES)
        .map(|_| {
            let s = size as f64;
            (
                rng.random_range(0.0..s),
                rng.random_range(0.0..s),
                rng.random_range(0.05..0.25) * s,
                [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)],
            )
        })
        .collect();
    let mut raw = vec![0.0f64; size * size * 3];
    for y in 0..size {
        for x in 0..size {
            for c in 0..3 {
                let mut v = 0.0;
                for g in &gratings {
                    v += g.amp[c] * (std::f64::consts::TAU * (g.fx * x as f64 + g.fy * y as f64) + g.phase).sin();
                }
                for (cy, cx, r, col) in &shapes {
                    let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                    if dy * dy + dx * dx < r * r {
                        v += 1.5 * col[c];
                    }
                }
                raw[(y * size + x) * 3 + c] = v;
            }
        }
    }
    let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(1e-12);
    let data = raw.iter().map(|v| (0.05 + 0.9 * (v - lo) / span) as f32).collect();
    RgbImage::new(size, size, data).expect("size matches")
}

/// Separable Gaussian blur with edge clamping.
pub fn gaussian_blur(img: &RgbImage, sigma: f64) -> RgbImage {
    if sigma <= 0.0 {
        return img.clone();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    let (h, w) = img.dims();
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let tmp = RgbImage::from_fn(h, w, |y, x, c| {
        let mut acc = 0.0;
        for (j, kv) in k.iter().enumerate() {
            acc += kv * img.get(y, clamp(x as isize + j as isize - radius, w), c) as f64;
        }
        acc as f32
    });
    RgbImage::from_fn(h, w, |y, x, c| {
        let mut acc = 0.0;
        for (j, kv) in k.iter().enumerate() {
            acc += kv * tmp.get(clamp(y as isize + j as isize - radius, h), x, c) as f64;
        }
        acc as f32
    })
}

fn degrade(hr: &RgbImage, lr_up: &RgbImage, d: f64, rng: &mut impl Rng) -> RgbImage {
    let (h, w) = hr.dims();
    let blend = RgbImage::from_fn(h, w, |y, x, c| {
        ((1.0 - d) * hr.get(y, x, c) as f64 + d * lr_up.get(y, x, c) as f64) as f32
    });
    let mut out = gaussian_blur(&blend, MAX_BLUR_SIGMA * d);
    if d > 0.0 {
        let noise = Normal::new(0.0, MAX_NOISE_STD * d).expect("positive std");
        for v in out.data_mut() {
            *v += noise.sample(rng) as f32;
        }
    }
    for v in out.data_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    out
}

/// One sample per (content, scale, degradation level), in that nesting order.
pub fn synthesize_corpus(cfg: &SynthConfig) -> Result<Vec<Sample>> {
    if cfg.n_contents == 0 {
        return Err(PfiqaError::Config("synthetic corpus needs at least one content".into()));
    }
    if cfg.scales.iter().any(|s| s.is_nan() || *s <= 1.0) {
        return Err(PfiqaError::Config("synthetic scale factors must exceed 1".into()));
    }
    if cfg.degradations.iter().any(|d| !(0.0..=1.0).contains(d)) {
        return Err(PfiqaError::Config("synthetic degradations must lie in [0, 1]".into()));
    }
    let d_max = cfg.degradations.iter().copied().fold(0.0, f64::max);
    let size = cfg.image_size;
    let mut out = Vec::new();
    for c in 0..cfg.n_contents {
        let mut tex_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        tex_rng.set_stream(c as u64);
        let hr = texture(size, &mut tex_rng);
        for (si, &scale) in cfg.scales.iter().enumerate() {
            let lr_size = ((size as f64 / scale).round() as usize).max(1);
            let lr_up = hr.resize_bilinear(lr_size, lr_size).resize_bilinear(size, size);
            for (j, &d) in cfg.degradations.iter().enumerate() {
                let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                noise_rng.set_stream((1 << 48) | ((c as u64) << 24) | ((si as u64) << 12) | j as u64);
                let sr = degrade(&hr, &lr_up, d, &mut noise_rng);
                let mos = if d_max > 0.0 { 1.0 - d / d_max } else { 1.0 };
                out.push(validate_sample(Sample {
                    sr_image: sr,
                    lr_image_upsampled: lr_up.clone(),
                    scale_factor: scale,
                    mos: Some(mos),
                    dataset_id: "synthetic".into(),
                    content_id: format!("c{c:03}"),
                    method_id: format!("d{j}"),
                })?);
            }
        }
    }
    Ok(out)
}

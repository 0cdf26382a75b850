//! Independent reference implementations shared by the integration tests.
//!
//! Everything here is written with plain loops in `f64` and deliberately
//! avoids the crate's own kernels.

#![allow(dead_code)]

pub mod checks;

use pfiqa_core::config::{DatasetFormat, ExperimentConfig, SynthConfig};
use rand::Rng;

/// Direct sliding-window convolution of `[n, c, h, w]` with `[oc, c, k, k]`
/// weights, stride 1 and zero padding `pad`.
#[allow(clippy::too_many_arguments)]
pub fn conv2d(
    x: &[f64],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    weight: &[f64],
    oc: usize,
    k: usize,
    pad: usize,
    bias: Option<&[f64]>,
) -> Vec<f64> {
    let oh = h + 2 * pad + 1 - k;
    let ow = w + 2 * pad + 1 - k;
    let mut out = vec![0.0; n * oc * oh * ow];
    for b in 0..n {
        for o in 0..oc {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = bias.map_or(0.0, |bv| bv[o]);
                    for ci in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (y + ky) as isize - pad as isize;
                                let ix = (xx + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let xv = x[((b * c + ci) * h + iy as usize) * w + ix as usize];
                                let wv = weight[((o * c + ci) * k + ky) * k + kx];
                                acc += xv * wv;
                            }
                        }
                    }
                    out[((b * oc + o) * oh + y) * ow + xx] = acc;
                }
            }
        }
    }
    out
}

pub fn relu(v: &[f64]) -> Vec<f64> {
    v.iter().map(|x| x.max(0.0)).collect()
}

pub fn sigmoid(v: &[f64]) -> Vec<f64> {
    v.iter().map(|x| 1.0 / (1.0 + (-x).exp())).collect()
}

pub fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|x| *x as f64).collect()
}

/// Channel concatenation of `[n, c_i, s]` blocks (`s` = spatial size).
pub fn concat_channels(parts: &[(&[f64], usize)], n: usize, spatial: usize) -> Vec<f64> {
    let mut out = Vec::new();
    for b in 0..n {
        for (data, c) in parts {
            out.extend_from_slice(&data[b * c * spatial..(b + 1) * c * spatial]);
        }
    }
    out
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Weighted mean of a `p x p` map written as a row/column double loop.
pub fn weighted_mean_2d(s: &[f64], w: &[f64], p: usize) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..p {
        for j in 0..p {
            num += s[i * p + j] * w[i * p + j];
            den += w[i * p + j];
        }
    }
    num / den
}

/// Pearson correlation by its textbook two-pass definition.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    sab / (saa * sbb).sqrt()
}

/// Fractional ranks by counting: `1 + #smaller + (#equal - 1) / 2`.
pub fn ranks_by_counting(v: &[f64]) -> Vec<f64> {
    v.iter()
        .map(|x| {
            let smaller = v.iter().filter(|y| *y < x).count() as f64;
            let equal = v.iter().filter(|y| *y == x).count() as f64;
            1.0 + smaller + (equal - 1.0) / 2.0
        })
        .collect()
}

pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    pearson(&ranks_by_counting(a), &ranks_by_counting(b))
}

/// Random values drawn from a small grid so ties are common.
pub fn tied_vec(n: usize, levels: u32, rng: &mut impl Rng) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(0..levels) as f64 * 0.25 - 1.0).collect()
}

/// A small but complete model configuration for fast tests.
pub fn small_config() -> ExperimentConfig {
    let mut c = ExperimentConfig {
        crop_size: 32,
        n_repeats: 5,
        ..Default::default()
    };
    c.model.feature_channels = 8;
    c.model.branch_channels = 8;
    c.model.scale_hidden = 8;
    c.model.score_hidden = 4;
    c.model.weight_hidden = 4;
    c.optimizer.max_epochs = 2;
    c.dataset.format = DatasetFormat::Synthetic;
    c.dataset.synthetic = SynthConfig {
        n_contents: 10,
        scales: vec![2.0, 4.0],
        degradations: vec![0.0, 0.5, 1.0],
        image_size: 40,
        seed: 0,
    };
    c
}

/// Eight samples of one content spanning the degradation range.
pub fn overfit_synth(image_size: usize) -> SynthConfig {
    SynthConfig {
        n_contents: 1,
        scales: vec![4.0],
        degradations: (0..8).map(|i| i as f64 / 7.0).collect(),
        image_size,
        seed: 0,
    }
}

/// Half-pixel bilinear resize of `planes` stacked `h x w` planes.
pub fn resize_bilinear(x: &[f64], planes: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let taps = |n_in: usize, n_out: usize, o: usize| -> (usize, usize, f64) {
        let src = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(n_in - 1);
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, src - i0 as f64)
    };
    let mut out = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let plane = &x[p * h * w..(p + 1) * h * w];
        for y in 0..oh {
            let (y0, y1, fy) = taps(h, oh, y);
            for xx in 0..ow {
                let (x0, x1, fx) = taps(w, ow, xx);
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                out.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    out
}

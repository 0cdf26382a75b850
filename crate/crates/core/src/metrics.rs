//! Correlation and fidelity metrics plus report aggregation.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::datamodel::RgbImage;
use crate::error::{PfiqaError, Result};

/// Correlations need at least this many points.
pub const MIN_SAMPLES: usize = 3;

fn check_pair(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(PfiqaError::LengthMismatch(a.len(), b.len()));
    }
    if a.len() < MIN_SAMPLES {
        return Err(PfiqaError::TooFew {
            what: "samples",
            needed: MIN_SAMPLES,
            got: a.len(),
        });
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(PfiqaError::Range("non-finite value in correlation input".into()));
    }
    Ok(())
}

fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(PfiqaError::ConstantInput);
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// Pearson linear correlation.
pub fn plcc(pred: &[f64], mos: &[f64]) -> Result<f64> {
    check_pair(pred, mos)?;
    pearson(pred, mos)
}

/// 1-based fractional ranks; tied values share the mean of their positions.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
    let mut ranks = vec![0.0; v.len()];
    let mut start = 0;
    while start < idx.len() {
        let mut end = start + 1;
        while end < idx.len() && v[idx[end]] == v[idx[start]] {
            end += 1;
        }
        let r = (start + end + 1) as f64 / 2.0;
        for &i in &idx[start..end] {
            ranks[i] = r;
        }
        start = end;
    }
    ranks
}

/// Spearman rank correlation with average ranks for ties.
pub fn srcc(pred: &[f64], mos: &[f64]) -> Result<f64> {
    check_pair(pred, mos)?;
    pearson(&average_ranks(pred), &average_ranks(mos))
}

/// Peak signal-to-noise ratio in dB for `[0, 1]` images; `+inf` when identical.
pub fn psnr(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(PfiqaError::ShapeMismatch(format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    let n = a.data().len() as f64;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| {
            let d = *x as f64 - *y as f64;
            d * d
        })
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable "valid" Gaussian filtering of a `h x w` plane.
fn filter_valid(src: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let ow = w - SSIM_WINDOW + 1;
    let oh = h - SSIM_WINDOW + 1;
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * src[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM of two single-channel `[0, 1]` planes.
pub fn ssim_plane(a: &[f64], b: &[f64], height: usize, width: usize) -> Result<f64> {
    if a.len() != height * width || b.len() != height * width {
        return Err(PfiqaError::ShapeMismatch("plane size does not match dimensions".into()));
    }
    if height < SSIM_WINDOW || width < SSIM_WINDOW {
        return Err(PfiqaError::ShapeMismatch(format!(
            "{height}x{width} image is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
        )));
    }
    let k = gaussian_kernel();
    let c1 = (SSIM_K1 * 1.0).powi(2);
    let c2 = (SSIM_K2 * 1.0).powi(2);
    let prod = |x: &[f64], y: &[f64]| -> Vec<f64> { x.iter().zip(y).map(|(p, q)| p * q).collect() };
    let mu_a = filter_valid(a, height, width, &k);
    let mu_b = filter_valid(b, height, width, &k);
    let e_aa = filter_valid(&prod(a, a), height, width, &k);
    let e_bb = filter_valid(&prod(b, b), height, width, &k);
    let e_ab = filter_valid(&prod(a, b), height, width, &k);
    let n = mu_a.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum();
    Ok(total / n as f64)
}

/// Single-scale SSIM on BT.601 luma.
pub fn ssim(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(PfiqaError::ShapeMismatch(format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    ssim_plane(&a.luma(), &b.luma(), a.height(), a.width())
}

/// Four-parameter logistic `b2 + (b1 - b2) / (1 + exp(-(x - b3) / |b4|))`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Logistic4 {
    pub beta: [f64; 4],
}

impl Logistic4 {
    pub fn eval(&self, x: f64) -> f64 {
        let [b1, b2, b3, b4] = self.beta;
        b2 + (b1 - b2) / (1.0 + (-(x - b3) / b4.abs().max(1e-12)).exp())
    }

    fn jacobian_row(&self, x: f64) -> [f64; 4] {
        let [b1, b2, b3, b4] = self.beta;
        let s = b4.abs().max(1e-12);
        let e = (-(x - b3) / s).exp();
        let d = 1.0 + e;
        let sig = 1.0 / d;
        let dsig = e / (d * d); // d sigma / d z with z = (x - b3) / s
        let sign = if b4 < 0.0 { -1.0 } else { 1.0 };
        [
            sig,
            1.0 - sig,
            (b1 - b2) * dsig * (-1.0 / s),
            (b1 - b2) * dsig * (-(x - b3) / (s * s)) * sign,
        ]
    }

    /// Levenberg-Marquardt least-squares fit of `y` against `x`.
    pub fn fit(x: &[f64], y: &[f64]) -> Result<Logistic4> {
        check_pair(x, y)?;
        let (ymax, ymin) = y.iter().fold((f64::MIN, f64::MAX), |(hi, lo), v| (hi.max(*v), lo.min(*v)));
        let n = x.len() as f64;
        let mx = x.iter().sum::<f64>() / n;
        let sx = (x.iter().map(|v| (v - mx).powi(2)).sum::<f64>() / n).sqrt();
        if sx == 0.0 {
            return Err(PfiqaError::ConstantInput);
        }
        let mut model = Logistic4 {
            beta: [ymax, ymin, mx, sx],
        };
        let sse = |m: &Logistic4| -> f64 { x.iter().zip(y).map(|(a, b)| (b - m.eval(*a)).powi(2)).sum() };
        let mut cost = sse(&model);
        let mut lambda = 1e-3;
        for _ in 0..200 {
            let mut j = DMatrix::<f64>::zeros(x.len(), 4);
            let mut r = DVector::<f64>::zeros(x.len());
            for (i, (a, b)) in x.iter().zip(y).enumerate() {
                let row = model.jacobian_row(*a);
                for k in 0..4 {
                    j[(i, k)] = row[k];
                }
                r[i] = b - model.eval(*a);
            }
            let jt = j.transpose();
            let jtj = &jt * &j;
            let jtr = &jt * &r;
            let mut improved = false;
            for _ in 0..10 {
                let mut a = jtj.clone();
                for k in 0..4 {
                    a[(k, k)] += lambda * jtj[(k, k)].max(1e-12);
                }
                let Some(step) = a.lu().solve(&jtr) else {
                    lambda *= 10.0;
                    continue;
                };
                let mut cand = model;
                for k in 0..4 {
                    cand.beta[k] += step[k];
                }
                let c = sse(&cand);
                if c.is_finite() && c < cost {
                    let rel = (cost - c) / cost.max(1e-300);
                    model = cand;
                    cost = c;
                    lambda = (lambda * 0.3).max(1e-12);
                    improved = rel > 1e-12;
                    break;
                }
                lambda *= 10.0;
            }
            if !improved {
                break;
            }
        }
        Ok(model)
    }
}

/// PLCC after mapping predictions through a fitted logistic.
pub fn plcc_logistic(pred: &[f64], mos: &[f64]) -> Result<f64> {
    let f = Logistic4::fit(pred, mos)?;
    let mapped: Vec<f64> = pred.iter().map(|p| f.eval(*p)).collect();
    plcc(&mapped, mos)
}

/// Correlations of one evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub plcc: f64,
    pub srcc: f64,
    pub n_samples: usize,
}

impl EvalReport {
    pub fn compute(pred: &[f64], mos: &[f64], logistic: bool) -> Result<Self> {
        let p = if logistic { plcc_logistic(pred, mos)? } else { plcc(pred, mos)? };
        Ok(EvalReport {
            plcc: p,
            srcc: srcc(pred, mos)?,
            n_samples: pred.len(),
        })
    }
}

/// Per-repeat reports and their mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolReport {
    pub repeats: Vec<EvalReport>,
    pub mean_plcc: f64,
    pub mean_srcc: f64,
}

impl ProtocolReport {
    pub fn from_repeats(repeats: Vec<EvalReport>) -> Result<Self> {
        if repeats.is_empty() {
            return Err(PfiqaError::TooFew {
                what: "repeats",
                needed: 1,
                got: 0,
            });
        }
        let n = repeats.len() as f64;
        let mean_plcc = repeats.iter().map(|r| r.plcc).sum::<f64>() / n;
        let mean_srcc = repeats.iter().map(|r| r.srcc).sum::<f64>() / n;
        Ok(ProtocolReport {
            repeats,
            mean_plcc,
            mean_srcc,
        })
    }

    /// Tab-separated table: one row per repeat and a final `mean` row.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("repeat\tplcc\tsrcc\tn_samples\n");
        for (i, r) in self.repeats.iter().enumerate() {
            let _ = writeln!(out, "{}\t{:.6}\t{:.6}\t{}", i + 1, r.plcc, r.srcc, r.n_samples);
        }
        let total: usize = self.repeats.iter().map(|r| r.n_samples).sum();
        let _ = writeln!(out, "mean\t{:.6}\t{:.6}\t{}", self.mean_plcc, self.mean_srcc, total);
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// `pred\tmos` lines for external plotting.
pub fn scatter_tsv(pred: &[f64], mos: &[f64]) -> Result<String> {
    if pred.len() != mos.len() {
        return Err(PfiqaError::LengthMismatch(pred.len(), mos.len()));
    }
    let mut out = String::from("pred\tmos\n");
    for (p, m) in pred.iter().zip(mos) {
        let _ = writeln!(out, "{p:.6}\t{m:.6}");
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn perfect_and_inverse_correlation() {
        let mos = [0.1, 0.4, 0.35, 0.9, 0.6];
        assert!((plcc(&mos, &mos).unwrap() - 1.0).abs() < 1e-12);
        let neg: Vec<f64> = mos.iter().map(|m| 3.0 - m).collect();
        assert!((plcc(&neg, &mos).unwrap() + 1.0).abs() < 1e-12);
        assert!((srcc(&neg, &mos).unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn correlation_errors() {
        assert!(matches!(plcc(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]), Err(PfiqaError::ConstantInput)));
        assert!(matches!(srcc(&[1.0, 2.0], &[1.0, 2.0]), Err(PfiqaError::TooFew { .. })));
        assert!(matches!(plcc(&[1.0, 2.0, 3.0], &[1.0, 2.0]), Err(PfiqaError::LengthMismatch(3, 2))));
    }

    #[test]
    fn average_ranks_share_ties() {
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn psnr_closed_forms() {
        let a = RgbImage::filled(4, 4, 0.0);
        let b = RgbImage::filled(4, 4, 1.0);
        assert_eq!(psnr(&a, &b).unwrap(), 0.0);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        assert!(psnr(&a, &RgbImage::filled(4, 5, 0.0)).is_err());
    }

    #[test]
    fn ssim_identity_and_constants() {
        let img = RgbImage::from_fn(16, 20, |y, x, c| ((y * 7 + x * 3 + c) % 11) as f32 / 10.0);
        assert!((ssim(&img, &img).unwrap() - 1.0).abs() < 1e-9);
        let k = RgbImage::filled(12, 12, 0.3);
        assert!((ssim(&k, &k).unwrap() - 1.0).abs() < 1e-9);
        assert!(ssim(&RgbImage::filled(10, 12, 0.3), &RgbImage::filled(10, 12, 0.3)).is_err());
    }

    #[test]
    fn logistic_fit_recovers_curve() {
        let truth = Logistic4 {
            beta: [0.9, 0.1, 0.5, 0.15],
        };
        let x: Vec<f64> = (0..40).map(|i| i as f64 / 39.0).collect();
        let y: Vec<f64> = x.iter().map(|v| truth.eval(*v)).collect();
        let fit = Logistic4::fit(&x, &y).unwrap();
        for v in &x {
            assert!((fit.eval(*v) - truth.eval(*v)).abs() < 1e-4);
        }
        assert!(plcc_logistic(&x, &y).unwrap() > 0.9999);
    }

    #[test]
    fn report_tables() {
        let r = ProtocolReport::from_repeats(vec![
            EvalReport { plcc: 0.5, srcc: 0.25, n_samples: 4 },
            EvalReport { plcc: 1.0, srcc: 0.75, n_samples: 4 },
        ])
        .unwrap();
        assert_eq!(r.mean_plcc, 0.75);
        let tsv = r.to_tsv();
        assert_eq!(tsv.lines().count(), 4);
        assert!(tsv.ends_with("mean\t0.750000\t0.500000\t8\n"));
        let back: ProtocolReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back, r);
    }

    proptest! {
        #[test]
        fn plcc_is_affine_invariant(
            v in proptest::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 3..40),
            a in 0.01f64..50.0,
            b in -10.0f64..10.0,
        ) {
            let (pred, mos): (Vec<f64>, Vec<f64>) = v.into_iter().unzip();
            prop_assume!(plcc(&pred, &mos).is_ok());
            let moved: Vec<f64> = pred.iter().map(|p| a * p + b).collect();
            prop_assert!((plcc(&moved, &mos).unwrap() - plcc(&pred, &mos).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn srcc_is_monotone_invariant(
            v in proptest::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 3..40),
        ) {
            let (pred, mos): (Vec<f64>, Vec<f64>) = v.into_iter().unzip();
            prop_assume!(srcc(&pred, &mos).is_ok());
            let moved: Vec<f64> = pred.iter().map(|p| p.exp() * 2.0 + p).collect();
            prop_assert!((srcc(&moved, &mos).unwrap() - srcc(&pred, &mos).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn psnr_is_symmetric(seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let a = RgbImage::from_fn(5, 6, |_, _, _| rng.random::<f32>());
            let b = RgbImage::from_fn(5, 6, |_, _, _| rng.random::<f32>());
            prop_assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        }
    }
}

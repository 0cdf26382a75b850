//! Criterion checks shared by the oracle tests and the acceptance runner.
//! Each check panics with a diagnostic on failure.

use super::*;
use pfiqa_autograd::{Graph, ParamId, ParamStore, Tensor};
use pfiqa_core::backbones::{self, Reductions, RESNET_CHANNELS, VIT_CHANNELS, VIT_STAGES};
use pfiqa_core::config::{FusionMode, ModelConfig};
use pfiqa_core::fusion::Afm;
use pfiqa_core::metrics::{plcc, srcc};
use pfiqa_core::nn::Conv2d;
use pfiqa_core::regression::{final_score, ScoringHead, WeightingHead};
use pfiqa_core::{BranchTag, Map2d, QualityPrediction};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const CONV_TOL: f64 = 1e-4;

fn values(store: &ParamStore, id: ParamId) -> Vec<f64> {
    to_f64(store.value(id).data())
}

/// Oracle output of `conv` applied to `x` of shape `[n, c, s, s]`.
fn conv_oracle(store: &ParamStore, conv: &Conv2d, x: &[f64], n: usize, s: usize) -> Vec<f64> {
    let bias = conv.bias.map(|b| values(store, b));
    conv2d(
        x,
        n,
        conv.in_channels,
        s,
        s,
        &values(store, conv.weight),
        conv.out_channels,
        conv.kernel,
        conv.spec.pad,
        bias.as_deref(),
    )
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

pub fn global_reduction_matches_sliding_window() {
    for kernel in [1, 3] {
        let mut rng = ChaCha8Rng::seed_from_u64(kernel as u64);
        let mut store = ParamStore::new();
        let red = Reductions::new(&mut store, 4, kernel, 8, true, false, &mut rng);
        let stages: Vec<Tensor> = (0..VIT_STAGES).map(|_| randn(&[2, VIT_CHANNELS, 8, 8], &mut rng)).collect();
        let mut g = Graph::inference(&store);
        let vars: Vec<_> = stages.iter().map(|t| g.constant(t.clone())).collect();
        let out = backbones::reduce_global(&mut g, red.global.as_ref().unwrap(), &vars).unwrap();
        assert_eq!(g.shape(out), &[2, 4, 8, 8]);

        let flat: Vec<Vec<f64>> = stages.iter().map(|t| to_f64(t.data())).collect();
        let parts: Vec<(&[f64], usize)> = flat.iter().map(|v| (v.as_slice(), VIT_CHANNELS)).collect();
        let stacked = concat_channels(&parts, 2, 64);
        let want = conv_oracle(&store, red.global.as_ref().unwrap(), &stacked, 2, 8);
        let err = max_abs_diff(&to_f64(g.value(out).data()), &want);
        assert!(err < CONV_TOL, "kernel {kernel}: {err}");
    }
}

pub fn local_reduction_resizes_then_matches_sliding_window() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut store = ParamStore::new();
    let red = Reductions::new(&mut store, 3, 1, 8, false, true, &mut rng);
    let sizes = [16, 8, 4, 2];
    let stages: Vec<Tensor> = RESNET_CHANNELS
        .iter()
        .zip(sizes)
        .map(|(&c, s)| randn(&[1, c, s, s], &mut rng))
        .collect();
    let mut g = Graph::inference(&store);
    let vars: Vec<_> = stages.iter().map(|t| g.constant(t.clone())).collect();
    let out = backbones::reduce_local(&mut g, red.local.as_ref().unwrap(), &vars, 8).unwrap();

    let resized: Vec<Vec<f64>> = stages
        .iter()
        .zip(sizes)
        .map(|(t, s)| resize_bilinear(&to_f64(t.data()), t.dim(1), s, s, 8, 8))
        .collect();
    let parts: Vec<(&[f64], usize)> = resized.iter().zip(RESNET_CHANNELS).map(|(v, c)| (v.as_slice(), c)).collect();
    let stacked = concat_channels(&parts, 1, 64);
    let want = conv_oracle(&store, red.local.as_ref().unwrap(), &stacked, 1, 8);
    let err = max_abs_diff(&to_f64(g.value(out).data()), &want);
    assert!(err < CONV_TOL, "{err}");
}

pub fn constant_stages_reduce_to_constant_channels() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut store = ParamStore::new();
    let red = Reductions::new(&mut store, 2, 1, 8, false, true, &mut rng);
    let mut g = Graph::inference(&store);
    let vars: Vec<_> = RESNET_CHANNELS
        .iter()
        .zip([16, 8, 4, 2])
        .map(|(&c, s)| g.constant(Tensor::full(&[1, c, s, s], 0.7)))
        .collect();
    let out = backbones::reduce_local(&mut g, red.local.as_ref().unwrap(), &vars, 8).unwrap();
    let t = g.value(out);
    for plane in t.data().chunks(64) {
        assert!(plane.iter().all(|v| (v - plane[0]).abs() < 1e-5));
    }
}

fn small_model() -> ModelConfig {
    ModelConfig {
        feature_channels: 4,
        branch_channels: 5,
        scale_hidden: 6,
        score_hidden: 3,
        weight_hidden: 3,
        ..ModelConfig::default()
    }
}

pub fn fusion_module_convolutions_match_sliding_window() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let mut store = ParamStore::new();
    let m = small_model();
    let afm = Afm::new(&mut store, BranchTag::Perception, FusionMode::Adaptive, true, &m, 8, &mut rng);
    let fused = randn(&[2, 4, 8, 8], &mut rng).data().iter().map(|v| v.max(0.0)).collect::<Vec<f32>>();
    let fused = Tensor::new(&[2, 4, 8, 8], fused).unwrap();
    let mut g = Graph::inference(&store);
    let fv = g.constant(fused.clone());
    let emb = afm.embed_scale(&mut g, &[2.0, 3.0]).unwrap().unwrap();
    let out = afm.condition_on_scale(&mut g, fv, Some(emb)).unwrap();
    assert_eq!(g.shape(out), &[2, 5, 8, 8]);

    let emb_v = to_f64(g.value(emb).data());
    let x = concat_channels(&[(&to_f64(fused.data()), 4), (&emb_v, 1)], 2, 64);
    let h = relu(&conv_oracle(&store, &afm.conv1, &x, 2, 8));
    let want = conv_oracle(&store, &afm.conv2, &h, 2, 8);
    let err = max_abs_diff(&to_f64(g.value(out).data()), &want);
    assert!(err < CONV_TOL, "{err}");
}

pub fn concat_fusion_matches_sliding_window() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut store = ParamStore::new();
    let afm = Afm::new(&mut store, BranchTag::Fidelity, FusionMode::Concat, false, &small_model(), 8, &mut rng);
    let (a, b) = (randn(&[1, 4, 8, 8], &mut rng), randn(&[1, 4, 8, 8], &mut rng));
    let mut g = Graph::inference(&store);
    let (av, bv) = (g.constant(a.clone()), g.constant(b.clone()));
    let out = afm.fuse_global_local(&mut g, Some(av), Some(bv)).unwrap();
    let conv = match &afm.fusion {
        pfiqa_core::fusion::GlobalLocalFusion::Concat(c) => c,
        _ => unreachable!(),
    };
    let x = concat_channels(&[(&to_f64(a.data()), 4), (&to_f64(b.data()), 4)], 1, 64);
    let want = relu(&conv_oracle(&store, conv, &x, 1, 8));
    assert!(max_abs_diff(&to_f64(g.value(out).data()), &want) < CONV_TOL);
}

pub fn scoring_head_matches_sliding_window() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let mut store = ParamStore::new();
    let head = ScoringHead::new(&mut store, BranchTag::Fidelity, 5, 3, 0.5, &mut rng);
    let x = randn(&[3, 5, 8, 8], &mut rng);
    let mut g = Graph::inference(&store);
    let xv = g.constant(x.clone());
    let out = head.score_map(&mut g, xv).unwrap();
    let h = relu(&conv_oracle(&store, &head.conv1, &to_f64(x.data()), 3, 8));
    let want = conv_oracle(&store, &head.conv2, &h, 3, 8);
    assert!(max_abs_diff(&to_f64(g.value(out).data()), &want) < CONV_TOL);
}

pub fn weight_maps_match_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut store = ParamStore::new();
    let head = WeightingHead::new(&mut store, 5, 2, 3, &mut rng);
    let (p, f) = (randn(&[2, 5, 8, 8], &mut rng), randn(&[2, 5, 8, 8], &mut rng));
    let mut g = Graph::inference(&store);
    let (pv, fv) = (g.constant(p.clone()), g.constant(f.clone()));
    let maps = head.weight_maps(&mut g, &[pv, fv]).unwrap();

    let x = concat_channels(&[(&to_f64(p.data()), 5), (&to_f64(f.data()), 5)], 2, 64);
    let h = relu(&conv_oracle(&store, &head.conv3, &x, 2, 8));
    let w = sigmoid(&conv_oracle(&store, &head.conv1, &h, 2, 8));
    for (k, m) in maps.iter().enumerate() {
        let got = to_f64(g.value(*m).data());
        let want: Vec<f64> = (0..2).flat_map(|n| w[(n * 2 + k) * 64..(n * 2 + k + 1) * 64].to_vec()).collect();
        let err = max_abs_diff(&got, &want);
        assert!(err < CONV_TOL, "branch {k}: {err}");
        assert!(got.iter().all(|v| *v > 0.0 && *v < 1.0));
    }
}

pub fn final_score_matches_double_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let p = 28;
    for _ in 0..1000 {
        let mut map = |lo: f64, hi: f64| (0..p * p).map(|_| rng.random_range(lo..hi)).collect::<Vec<f64>>();
        let (s_p, s_f) = (map(-1.0, 2.0), map(-1.0, 2.0));
        let (w_p, w_f) = (map(1e-3, 1.0), map(1e-3, 1.0));
        let want = weighted_mean_2d(&s_p, &w_p, p) + weighted_mean_2d(&s_f, &w_f, p);
        let got = final_score(&s_p, &s_f, &w_p, &w_f).unwrap();
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");
    }
}

pub fn graph_pooling_agrees_with_double_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let store = ParamStore::new();
    for _ in 0..20 {
        let s = Tensor::randn(&[2, 1, 6, 6], 1.0, &mut rng);
        let w = Tensor::from_fn(&[2, 1, 6, 6], |_| rng.random_range(0.01..1.0));
        let mut g = Graph::inference(&store);
        let (sv, wv) = (g.constant(s.clone()), g.constant(w.clone()));
        let out = g.weighted_mean(sv, wv).unwrap();
        for n in 0..2 {
            let want = weighted_mean_2d(&to_f64(s.index0(n).data()), &to_f64(w.index0(n).data()), 6);
            assert!((g.value(out).data()[n] as f64 - want).abs() < 1e-5);
        }
    }
}

pub fn prediction_record_pools_in_double_precision() {
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let map = |rng: &mut ChaCha8Rng, lo: f32, hi: f32| Map2d::new(4, (0..16).map(|_| rng.random_range(lo..hi)).collect()).unwrap();
    let (s_p, w_p, s_f, w_f) = (map(&mut rng, -1.0, 1.0), map(&mut rng, 0.1, 0.9), map(&mut rng, -1.0, 1.0), map(&mut rng, 0.1, 0.9));
    let want = weighted_mean_2d(&s_p.as_f64(), &w_p.as_f64(), 4) + weighted_mean_2d(&s_f.as_f64(), &w_f.as_f64(), 4);
    let pred = QualityPrediction::from_maps(Some((s_p, w_p)), Some((s_f, w_f))).unwrap();
    assert!((pred.final_score - want).abs() < 1e-12);
}

pub fn metrics_match_definitional_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    for i in 0..1000 {
        let n = rng.random_range(3..60);
        let (a, b) = if i % 2 == 0 {
            (tied_vec(n, 6, &mut rng), tied_vec(n, 6, &mut rng))
        } else {
            let a: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
            let b: Vec<f64> = a.iter().map(|x| x + rng.random_range(-3.0..3.0)).collect();
            (a, b)
        };
        if a.iter().all(|v| *v == a[0]) || b.iter().all(|v| *v == b[0]) {
            continue;
        }
        assert!((plcc(&a, &b).unwrap() - pearson(&a, &b)).abs() < 1e-12);
        assert!((srcc(&a, &b).unwrap() - spearman(&a, &b)).abs() < 1e-12);
    }
}


/// `s_p = a` and `s_f = b` everywhere pool to `a + b` whatever the weights.
pub fn constant_maps_pool_to_their_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let p = 28;
    for _ in 0..1000 {
        let (a, b) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
        let mut weights = || (0..p * p).map(|_| rng.random_range(1e-3..1.0)).collect::<Vec<f64>>();
        let (w_p, w_f) = (weights(), weights());
        let got = final_score(&vec![a; p * p], &vec![b; p * p], &w_p, &w_f).unwrap();
        assert!((got - (a + b)).abs() < 1e-9, "{got} vs {}", a + b);
    }
}

/// With zero features and zero biases every weight is exactly sigmoid(0).
pub fn zero_inputs_and_biases_give_half() {
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let m = ModelConfig::default();
    let mut store = ParamStore::new();
    let head = WeightingHead::new(&mut store, m.branch_channels, 2, m.weight_hidden, &mut rng);
    for conv in [&head.conv3, &head.conv1] {
        let b = conv.bias.expect("weighting convs carry a bias");
        store.value_mut(b).data_mut().fill(0.0);
    }
    let mut g = Graph::inference(&store);
    let zeros = || Tensor::zeros(&[2, m.branch_channels, 28, 28]);
    let feats = [g.constant(zeros()), g.constant(zeros())];
    for w in head.weight_maps(&mut g, &feats).unwrap() {
        assert_eq!(g.shape(w), &[2, 1, 28, 28]);
        assert!(g.value(w).data().iter().all(|v| *v == 0.5));
    }
}

/// SRCC is unchanged by random strictly increasing transforms of either argument.
pub fn srcc_invariant_under_monotone_transforms() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    for i in 0..1000 {
        let n = rng.random_range(3..60);
        let a = if i % 2 == 0 {
            tied_vec(n, 7, &mut rng)
        } else {
            (0..n).map(|_| rng.random_range(-3.0..3.0)).collect()
        };
        let b: Vec<f64> = a.iter().map(|x| x + rng.random_range(-2.0..2.0)).collect();
        if a.iter().all(|v| *v == a[0]) || b.iter().all(|v| *v == b[0]) {
            continue;
        }
        let (k, c, shift) = (rng.random_range(0.1..2.0), rng.random_range(0.0..1.0), rng.random_range(-5.0..5.0));
        let warp = |v: &[f64]| -> Vec<f64> { v.iter().map(|x| (k * x).exp() + c * x.powi(3) + shift).collect() };
        let base = srcc(&a, &b).unwrap();
        for (wa, wb) in [(warp(&a), b.clone()), (a.clone(), warp(&b)), (warp(&a), warp(&b))] {
            let got = srcc(&wa, &wb).unwrap();
            assert!((got - base).abs() < 1e-12, "{got} vs {base}");
        }
    }
}

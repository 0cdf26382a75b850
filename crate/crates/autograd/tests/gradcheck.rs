//! Central-difference checks of every differentiable op.

use pfiqa_autograd::{Conv2dSpec, Graph, ParamStore, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f32 = 1e-2;

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Values bounded away from zero so ReLU/max kinks are not crossed by the step.
fn kink_free(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let v: f32 = rng.random_range(0.1..1.0);
        if rng.random_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

fn check<F>(name: &str, inputs: Vec<Tensor>, build: F)
where
    F: Fn(&mut Graph<'_>, &[Var]) -> Var,
{
    let store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let probe = {
        let mut g = Graph::inference(&store);
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let y = build(&mut g, &vars);
        rand_tensor(g.shape(y), &mut rng)
    };
    let objective = |inputs: &[Tensor]| -> f64 {
        let mut g = Graph::inference(&store);
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let y = build(&mut g, &vars);
        g.value(y)
            .data()
            .iter()
            .zip(probe.data())
            .map(|(a, b)| *a as f64 * *b as f64)
            .sum()
    };

    let mut g = Graph::new(&store);
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let y = build(&mut g, &vars);
    let r = g.constant(probe.clone());
    let prod = g.mul(y, r).unwrap();
    let loss = g.sum_all(prod);
    let grads = g.backward(loss).unwrap();

    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.var(*v).unwrap_or_else(|| panic!("{name}: no grad for input {k}"));
        for i in 0..inputs[k].numel() {
            let mut plus = inputs.clone();
            plus[k].data_mut()[i] += STEP;
            let mut minus = inputs.clone();
            minus[k].data_mut()[i] -= STEP;
            let numeric = (objective(&plus) - objective(&minus)) / (2.0 * STEP as f64);
            let a = analytic.data()[i] as f64;
            let tol = 2e-2 * a.abs().max(1.0);
            assert!(
                (numeric - a).abs() < tol,
                "{name}: input {k} elem {i}: analytic {a} numeric {numeric}"
            );
        }
    }
}

#[test]
fn elementwise_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = rand_tensor(&[2, 3, 4], &mut rng);
    let b = rand_tensor(&[2, 3, 4], &mut rng);
    check("add", vec![a.clone(), b.clone()], |g, v| g.add(v[0], v[1]).unwrap());
    check("sub", vec![a.clone(), b.clone()], |g, v| g.sub(v[0], v[1]).unwrap());
    check("mul", vec![a.clone(), b.clone()], |g, v| g.mul(v[0], v[1]).unwrap());
    check("scale", vec![a.clone()], |g, v| g.scale(v[0], -1.7));
    check("sigmoid", vec![a.clone()], |g, v| g.sigmoid(v[0]));
    check("gelu", vec![a.clone()], |g, v| g.gelu(v[0]));
    check("relu", vec![kink_free(&[2, 3, 4], &mut rng)], |g, v| g.relu(v[0]));
    let tile = rand_tensor(&[1, 3, 4], &mut rng);
    check("add_tiled", vec![a, tile], |g, v| g.add_tiled(v[0], v[1]).unwrap());
}

#[test]
fn matrix_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = rand_tensor(&[2, 3, 5], &mut rng);
    let w = rand_tensor(&[4, 5], &mut rng);
    let b = rand_tensor(&[4], &mut rng);
    check("linear", vec![x, w, b], |g, v| g.linear(v[0], v[1], Some(v[2])).unwrap());

    for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
        let a = if ta { rand_tensor(&[2, 4, 3], &mut rng) } else { rand_tensor(&[2, 3, 4], &mut rng) };
        let b = if tb { rand_tensor(&[2, 5, 4], &mut rng) } else { rand_tensor(&[2, 4, 5], &mut rng) };
        check("bmm", vec![a, b], move |g, v| g.bmm(v[0], v[1], ta, tb).unwrap());
    }
}

#[test]
fn convolution_and_pooling() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for (k, stride, pad) in [(3, 1, 1), (1, 1, 0), (3, 2, 1), (1, 2, 0), (2, 2, 0)] {
        let x = rand_tensor(&[2, 3, 6, 5], &mut rng);
        let w = rand_tensor(&[4, 3, k, k], &mut rng);
        let b = rand_tensor(&[4], &mut rng);
        check("conv2d", vec![x, w, b], move |g, v| {
            g.conv2d(v[0], v[1], Some(v[2]), Conv2dSpec::new(stride, pad)).unwrap()
        });
    }
    // distinct values so the argmax is stable under the step
    let x = Tensor::from_fn(&[1, 2, 5, 5], |i| ((i * 37) % 50) as f32 * 0.1);
    check("max_pool2d", vec![x], |g, v| g.max_pool2d(v[0], 3, 2, 1).unwrap());
}

#[test]
fn normalization_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = rand_tensor(&[3, 6], &mut rng);
    let gamma = rand_tensor(&[6], &mut rng);
    let beta = rand_tensor(&[6], &mut rng);
    check("layer_norm", vec![x, gamma, beta], |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5).unwrap());

    let x = rand_tensor(&[2, 3, 2, 2], &mut rng);
    let gamma = rand_tensor(&[3], &mut rng);
    let beta = rand_tensor(&[3], &mut rng);
    let mean = rand_tensor(&[3], &mut rng);
    let var = Tensor::from_fn(&[3], |i| 0.5 + i as f32);
    check("batch_norm", vec![x, gamma, beta], move |g, v| {
        let m = g.constant(mean.clone());
        let s = g.constant(var.clone());
        g.batch_norm(v[0], v[1], v[2], m, s, 1e-5).unwrap()
    });

    check("softmax", vec![rand_tensor(&[2, 3, 5], &mut rng)], |g, v| g.softmax(v[0]).unwrap());
}

#[test]
fn shape_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = rand_tensor(&[2, 3, 4], &mut rng);
    check("reshape", vec![x.clone()], |g, v| g.reshape(v[0], &[6, 4]).unwrap());
    check("permute", vec![x.clone()], |g, v| g.permute(v[0], &[2, 0, 1]).unwrap());
    check("transpose_last", vec![x.clone()], |g, v| g.transpose_last(v[0]).unwrap());
    check("narrow", vec![x.clone()], |g, v| g.narrow(v[0], 1, 1, 2).unwrap());
    check("repeat_leading", vec![rand_tensor(&[1, 2, 3], &mut rng)], |g, v| {
        g.repeat_leading(v[0], 3).unwrap()
    });
    let y = rand_tensor(&[2, 2, 4], &mut rng);
    check("concat", vec![x, y], |g, v| g.concat(&[v[0], v[1]], 1).unwrap());
    check("resize_bilinear", vec![rand_tensor(&[1, 2, 5, 3], &mut rng)], |g, v| {
        g.resize_bilinear(v[0], 4, 7).unwrap()
    });
}

#[test]
fn fusion_and_pooling_heads() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let gl = rand_tensor(&[2, 3, 2, 2], &mut rng);
    let lo = rand_tensor(&[2, 3, 2, 2], &mut rng);
    for rows in [1, 3] {
        let w = rand_tensor(&[rows, 2], &mut rng);
        let b = rand_tensor(&[rows], &mut rng);
        check("pair_fuse", vec![gl.clone(), lo.clone(), w, b], |g, v| {
            g.pair_fuse(v[0], v[1], v[2], v[3]).unwrap()
        });
    }
    let s = rand_tensor(&[2, 1, 3, 3], &mut rng);
    let w = Tensor::from_fn(&[2, 1, 3, 3], |_| rng.random_range(0.2..1.0));
    check("weighted_mean", vec![s, w], |g, v| g.weighted_mean(v[0], v[1]).unwrap());
}

#[test]
fn mse_loss_gradient() {
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let p = g.input(Tensor::new(&[3], vec![0.5, 1.0, -1.0]).unwrap());
    let loss = g.mse_loss(p, &[0.0, 1.0, 1.0]).unwrap();
    assert!((g.value(loss).data()[0] - (0.25 + 4.0) / 3.0).abs() < 1e-6);
    let grads = g.backward(loss).unwrap();
    let d = grads.var(p).unwrap().data();
    let expect = [2.0 * 0.5 / 3.0, 0.0, 2.0 * -2.0 / 3.0];
    for (a, b) in d.iter().zip(expect) {
        assert!((a - b).abs() < 1e-6);
    }
}

#[test]
fn frozen_params_get_no_gradient() {
    let mut store = ParamStore::new();
    let frozen = store.add("frozen", Tensor::full(&[2], 1.0), false);
    let live = store.add("live", Tensor::full(&[2], 2.0), true);
    let mut g = Graph::new(&store);
    let a = g.param(frozen);
    let b = g.param(live);
    let m = g.mul(a, b).unwrap();
    let loss = g.sum_all(m);
    let grads = g.backward(loss).unwrap();
    assert!(grads.param(frozen).is_none());
    assert_eq!(grads.param(live).unwrap().data(), &[1.0, 1.0]);
}

#[test]
fn degenerate_weights_are_rejected() {
    let store = ParamStore::new();
    let mut g = Graph::inference(&store);
    let s = g.constant(Tensor::full(&[1, 4], 1.0));
    let w = g.constant(Tensor::zeros(&[1, 4]));
    assert!(g.weighted_mean(s, w).is_err());
}

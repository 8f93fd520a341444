use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::cwt::{CwtConfig, CwtMethod, MorletBank};

type Build = dyn Fn(&mut Graph<f64>, &[Var], &[ParamId]) -> Var;

const H: f64 = 1e-5;

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-4)
}

fn eval(store: &ParamStore<f64>, inputs: &[Tensor<f64>], ids: &[ParamId], f: &Build) -> f64 {
    let mut s = store.clone();
    let mut g = Graph::new(&mut s, Mode::Train, 11);
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let loss = f(&mut g, &vars, ids);
    g.value(loss).item()
}

/// Largest relative error between backward gradients and central differences,
/// over every input element and every trainable parameter element.
fn grad_check(store: &ParamStore<f64>, inputs: &[Tensor<f64>], ids: &[ParamId], f: &Build) -> f64 {
    let mut s = store.clone();
    s.zero_grad();
    let input_grads: Vec<Vec<f64>> = {
        let mut g = Graph::new(&mut s, Mode::Train, 11);
        let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
        let loss = f(&mut g, &vars, ids);
        g.backward(loss).unwrap();
        vars.iter()
            .map(|&v| g.grad(v).map(|x| x.to_vec()).unwrap_or_else(|| vec![0.0; g.value(v).len()]))
            .collect()
    };
    let mut worst: f64 = 0.0;
    for (k, t) in inputs.iter().enumerate() {
        for j in 0..t.len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[j] += H;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[j] -= H;
            let num = (eval(store, &plus, ids, f) - eval(store, &minus, ids, f)) / (2.0 * H);
            worst = worst.max(rel_err(input_grads[k][j], num));
        }
    }
    for id in store.trainable_ids() {
        for j in 0..store.value(id).len() {
            let mut plus = store.clone();
            plus.get_mut(id).value.data_mut()[j] += H;
            let mut minus = store.clone();
            minus.get_mut(id).value.data_mut()[j] -= H;
            let num = (eval(&plus, inputs, ids, f) - eval(&minus, inputs, ids, f)) / (2.0 * H);
            worst = worst.max(rel_err(s.grad(id)[j], num));
        }
    }
    worst
}

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::uniform(shape, 1.0, rng)
}

/// Random projection of the output so every element contributes.
fn project(g: &mut Graph<f64>, v: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
    let w: Vec<f64> = (0..g.value(v).len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    g.dot(v, w).unwrap()
}

fn check_seeds(mut case: impl FnMut(u64) -> f64) {
    for seed in 0..20 {
        let err = case(seed);
        assert!(err < 1e-3, "seed {seed}: max relative error {err:e}");
    }
}

#[test]
fn conv1d_gradients() {
    check_seeds(|seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let w = store.add("w", rand_tensor(&[3, 2, 3], &mut rng), true);
        let b = store.add("b", rand_tensor(&[3], &mut rng), true);
        let x = rand_tensor(&[2, 6, 2], &mut rng);
        let f: Box<Build> = Box::new(move |g, v, ids| {
            let (w, b) = (g.param(ids[0]), g.param(ids[1]));
            let y = g.conv1d(v[0], w, Some(b)).unwrap();
            project(g, y, seed)
        });
        grad_check(&store, &[x], &[w, b], &*f)
    });
}

#[test]
fn conv2d_gradients() {
    check_seeds(|seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let w = store.add("w", rand_tensor(&[3, 3, 2, 2], &mut rng), true);
        let b = store.add("b", rand_tensor(&[2], &mut rng), true);
        let x = rand_tensor(&[2, 3, 4, 2], &mut rng);
        let f: Box<Build> = Box::new(move |g, v, ids| {
            let (w, b) = (g.param(ids[0]), g.param(ids[1]));
            let y = g.conv2d(v[0], w, Some(b)).unwrap();
            project(g, y, seed)
        });
        grad_check(&store, &[x], &[w, b], &*f)
    });
}

#[test]
fn batchnorm_gradients_in_training_mode() {
    check_seeds(|seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let gamma = store.add("gamma", rand_tensor(&[3, 2], &mut rng), true);
        let beta = store.add("beta", rand_tensor(&[3, 2], &mut rng), true);
        let mean = store.add("mean", Tensor::zeros(&[3, 2]), false);
        let var = store.add("var", Tensor::full(&[3, 2], 1.0), false);
        let x = rand_tensor(&[2, 3, 4, 2], &mut rng);
        let layout = BnLayout {
            outer: 2,
            g1: 3,
            span: 4,
            g2: 2,
        };
        let f: Box<Build> = Box::new(move |g, v, ids| {
            let (ga, be) = (g.param(ids[0]), g.param(ids[1]));
            let y = g.batchnorm(v[0], ga, be, Some((ids[2], ids[3])), layout).unwrap();
            project(g, y, seed)
        });
        grad_check(&store, &[x], &[gamma, beta, mean, var], &*f)
    });
}

#[test]
fn batchnorm_gradients_in_inference_mode() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let gamma = store.add("gamma", rand_tensor(&[2], &mut rng), true);
        let beta = store.add("beta", rand_tensor(&[2], &mut rng), true);
        let mean = store.add("mean", rand_tensor(&[2], &mut rng), false);
        let var = store.add("var", Tensor::full(&[2], 0.7), false);
        let x = rand_tensor(&[3, 5, 2], &mut rng);
        let layout = BnLayout {
            outer: 3,
            g1: 1,
            span: 5,
            g2: 2,
        };
        let run = |store: &ParamStore<f64>, x: &Tensor<f64>| {
            let mut s = store.clone();
            let mut g = Graph::new(&mut s, Mode::Infer, 0);
            let xv = g.variable(x.clone());
            let (ga, be) = (g.param(gamma), g.param(beta));
            let y = g.batchnorm(xv, ga, be, Some((mean, var)), layout).unwrap();
            let l = project(&mut g, y, seed);
            let val = g.value(l).item();
            g.backward(l).unwrap();
            (val, g.grad(xv).unwrap().to_vec())
        };
        let (_, gx) = run(&store, &x);
        for j in 0..x.len() {
            let (mut p, mut m) = (x.clone(), x.clone());
            p.data_mut()[j] += H;
            m.data_mut()[j] -= H;
            let num = (run(&store, &p).0 - run(&store, &m).0) / (2.0 * H);
            assert!(rel_err(gx[j], num) < 1e-3);
        }
    }
}

#[test]
fn pooling_gradients() {
    for kind in [PoolKind::Avg, PoolKind::Max] {
        check_seeds(|seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let store = ParamStore::new();
            let x = rand_tensor(&[2, 3, 7, 2], &mut rng);
            let f: Box<Build> = Box::new(move |g, v, _| {
                let y = g.pool(v[0], 2, kind).unwrap();
                let z = g.pool(y, 1, kind).unwrap();
                project(g, z, seed)
            });
            grad_check(&store, &[x], &[], &*f)
        });
    }
}

fn lstm_params(store: &mut ParamStore<f64>, prefix: &str, d: usize, h: usize, rng: &mut ChaCha8Rng) -> [ParamId; 3] {
    [
        store.add(format!("{prefix}/w_ih"), Tensor::uniform(&[d, 4 * h], 0.8, rng), true),
        store.add(format!("{prefix}/w_hh"), Tensor::uniform(&[h, 4 * h], 0.8, rng), true),
        store.add(format!("{prefix}/b"), Tensor::uniform(&[4 * h], 0.8, rng), true),
    ]
}

#[test]
fn lstm_gradients_both_directions() {
    for reverse in [false, true] {
        check_seeds(|seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut store = ParamStore::new();
            let ids = lstm_params(&mut store, "l", 3, 2, &mut rng);
            let x = rand_tensor(&[2, 5, 3], &mut rng);
            let f: Box<Build> = Box::new(move |g, v, ids| {
                let (a, b, c) = (g.param(ids[0]), g.param(ids[1]), g.param(ids[2]));
                let y = g.lstm(v[0], a, b, c, reverse).unwrap();
                project(g, y, seed)
            });
            grad_check(&store, &[x], &ids, &*f)
        });
    }
}

#[test]
fn blstm_composition_gradients() {
    check_seeds(|seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut ids = lstm_params(&mut store, "f", 2, 2, &mut rng).to_vec();
        ids.extend(lstm_params(&mut store, "b", 2, 2, &mut rng));
        ids.extend(lstm_params(&mut store, "f2", 4, 2, &mut rng));
        ids.extend(lstm_params(&mut store, "b2", 4, 2, &mut rng));
        let x = rand_tensor(&[2, 4, 2], &mut rng);
        let f: Box<Build> = Box::new(move |g, v, ids| {
            let mut h = v[0];
            for layer in 0..2 {
                let p: Vec<Var> = ids[6 * layer..6 * layer + 6].iter().map(|&id| g.param(id)).collect();
                let fw = g.lstm(h, p[0], p[1], p[2], false).unwrap();
                let bw = g.lstm(h, p[3], p[4], p[5], true).unwrap();
                h = g.concat_last(fw, bw).unwrap();
            }
            project(g, h, seed)
        });
        grad_check(&store, &[x], &ids, &*f)
    });
}

#[test]
fn dense_relu_gradients() {
    check_seeds(|seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let w1 = store.add("w1", rand_tensor(&[3, 4], &mut rng), true);
        let b1 = store.add("b1", rand_tensor(&[4], &mut rng), true);
        let w2 = store.add("w2", rand_tensor(&[4, 2], &mut rng), true);
        let x = rand_tensor(&[2, 5, 3], &mut rng);
        let f: Box<Build> = Box::new(move |g, v, ids| {
            let (w1, b1, w2) = (g.param(ids[0]), g.param(ids[1]), g.param(ids[2]));
            let h = g.dense(v[0], w1, Some(b1)).unwrap();
            let h = g.relu(h);
            let y = g.dense(h, w2, None).unwrap();
            project(g, y, seed)
        });
        grad_check(&store, &[x], &[w1, b1, w2], &*f)
    });
}

#[test]
fn softmax_cross_entropy_gradients() {
    check_seeds(|seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let store = ParamStore::new();
        let x = Tensor::uniform(&[2, 6, 2], 3.0, &mut rng);
        let labels: Vec<usize> = (0..12).map(|_| rng.gen_range(0..2)).collect();
        let f: Box<Build> = Box::new(move |g, v, _| {
            let p = g.softmax(v[0]).unwrap();
            g.cross_entropy(p, &labels).unwrap()
        });
        grad_check(&store, &[x], &[], &*f)
    });
}

#[test]
fn dropout_and_reshape_gradients() {
    check_seeds(|seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let store = ParamStore::new();
        let x = rand_tensor(&[2, 3, 4, 2], &mut rng);
        let f: Box<Build> = Box::new(move |g, v, _| {
            let y = g.dropout(v[0], 0.4).unwrap();
            let y = g.freq_to_channels(y).unwrap();
            let y = g.reshape(y, &[8, 6]).unwrap();
            let sq = g.mul(y, y).unwrap();
            let s = g.add(sq, y).unwrap();
            g.mean(s)
        });
        grad_check(&store, &[x], &[], &*f)
    });
}

#[test]
fn cwt_front_end_width_gradient() {
    let cfg = CwtConfig {
        f_min: 2.0,
        f_max: 15.0,
        n_scales: 4,
        beta: 0.5,
        eta: 1.5,
        border: 60,
    };
    let bank = MorletBank::new(&cfg, 50.0).unwrap();
    for method in [CwtMethod::Direct, CwtMethod::Fft] {
        check_seeds(|seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut store = ParamStore::new();
            let lb = store.add("log_beta", Tensor::new(&[1], vec![(0.3 + 0.5 * rng.gen::<f64>()).ln()]), true);
            let x = rand_tensor(&[2, 2 * 60 + 30], &mut rng);
            let bank = bank.clone();
            // the signal is a constant: no gradient flows back into it
            let f: Box<Build> = Box::new(move |g, _, ids| {
                let lb = g.param(ids[0]);
                let xv = g.input(x.clone());
                let y = g.cwt(xv, lb, &bank, 60, method).unwrap();
                project(g, y, seed)
            });
            grad_check(&store, &[], &[lb], &*f)
        });
    }
}

// ---------------------------------------------------------------- examples

fn approx(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

#[test]
fn identity_kernel_preserves_input() {
    let mut store = ParamStore::<f64>::new();
    let mut w = Tensor::zeros(&[3, 2, 2]);
    // w[k=1][c][c] = 1
    w.data_mut()[2 * 2] = 1.0;
    w.data_mut()[2 * 2 + 3] = 1.0;
    let w = store.add("w", w, true);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = rand_tensor(&[2, 7, 2], &mut rng);
    let mut g = Graph::new(&mut store, Mode::Infer, 0);
    let xv = g.input(x.clone());
    let wv = g.param(w);
    let y = g.conv1d(xv, wv, None).unwrap();
    assert!(approx(g.value(y).data(), x.data(), 0.0));
}

#[test]
fn avgpool_takes_pairwise_means() {
    let mut store = ParamStore::<f64>::new();
    let mut g = Graph::new(&mut store, Mode::Infer, 0);
    let x = g.input(Tensor::new(&[4], vec![1.0, 3.0, 5.0, 7.0]));
    let y = g.pool(x, 0, PoolKind::Avg).unwrap();
    assert_eq!(g.value(y).data(), &[2.0, 6.0]);
    let z = g.pool(x, 0, PoolKind::Max).unwrap();
    assert_eq!(g.value(z).data(), &[3.0, 7.0]);
}

#[test]
fn zero_lstm_emits_zero_states() {
    let mut store = ParamStore::<f64>::new();
    let a = store.add("a", Tensor::zeros(&[3, 8]), true);
    let b = store.add("b", Tensor::zeros(&[2, 8]), true);
    let c = store.add("c", Tensor::zeros(&[8]), true);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut g = Graph::new(&mut store, Mode::Infer, 0);
    let x = g.input(rand_tensor(&[2, 6, 3], &mut rng));
    let (a, b, c) = (g.param(a), g.param(b), g.param(c));
    let y = g.lstm(x, a, b, c, false).unwrap();
    assert_eq!(g.shape(y), &[2, 6, 2]);
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn sum_gradient_is_all_ones() {
    let mut store = ParamStore::<f64>::new();
    let t = store.add("t", Tensor::full(&[2, 3], 4.0), true);
    let mut g = Graph::new(&mut store, Mode::Train, 0);
    let v = g.param(t);
    let l = g.sum(v);
    g.backward(l).unwrap();
    drop(g);
    assert_eq!(store.grad(t), &[1.0; 6]);
}

#[test]
fn square_sum_gradient() {
    let mut store = ParamStore::<f64>::new();
    let t = store.add("t", Tensor::new(&[2], vec![1.0, -2.0]), true);
    let mut g = Graph::new(&mut store, Mode::Train, 0);
    let v = g.param(t);
    let sq = g.mul(v, v).unwrap();
    let l = g.sum(sq);
    g.backward(l).unwrap();
    drop(g);
    assert_eq!(store.grad(t), &[2.0, -4.0]);
}

#[test]
fn backward_rejects_non_scalar() {
    let mut store = ParamStore::<f64>::new();
    let mut g = Graph::new(&mut store, Mode::Train, 0);
    let v = g.variable(Tensor::zeros(&[2]));
    assert!(matches!(g.backward(v), Err(crate::Error::NonScalarLoss(s)) if s == vec![2]));
}

#[test]
fn shape_errors_name_the_layer() {
    let mut store = ParamStore::<f64>::new();
    let mut g = Graph::new(&mut store, Mode::Train, 0);
    let x = g.input(Tensor::zeros(&[1, 5, 2]));
    let w = g.input(Tensor::zeros(&[3, 4, 1]));
    let err = g.conv1d(x, w, None).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("conv1d") && msg.contains("[3, 4, 1]"), "{msg}");
}

fn ce(probs: Vec<f64>, labels: &[usize]) -> f64 {
    let mut store = ParamStore::<f64>::new();
    let mut g = Graph::new(&mut store, Mode::Train, 0);
    let n = probs.len() / 2;
    let p = g.input(Tensor::new(&[n, 2], probs));
    let l = g.cross_entropy(p, labels).unwrap();
    g.value(l).item()
}

#[test]
fn cross_entropy_examples() {
    assert_eq!(ce(vec![1.0, 0.0, 0.0, 1.0], &[0, 1]), 0.0);
    assert!((ce(vec![0.5; 8], &[0, 1, 1, 0]) - std::f64::consts::LN_2).abs() < 1e-15);
    let clamped = ce(vec![1.0, 0.0], &[1]);
    assert!(clamped.is_finite() && (clamped + CE_CLAMP.ln()).abs() < 1e-12);
}

#[test]
fn cross_entropy_matches_scalar_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..20 {
        let n = rng.gen_range(1..40);
        let mut probs = Vec::new();
        let mut labels = Vec::new();
        for _ in 0..n {
            let p: f64 = rng.gen();
            probs.extend([p, 1.0 - p]);
            labels.push(rng.gen_range(0..2));
        }
        let mut oracle = 0.0;
        for i in 0..n {
            oracle -= probs[2 * i + labels[i]].max(1e-12).ln();
        }
        oracle /= n as f64;
        assert!((ce(probs, &labels) - oracle).abs() < 1e-12);
    }
}

#[test]
fn dropout_rate_matches_binomial() {
    use statrs::distribution::{Binomial, DiscreteCDF};
    let rate = 0.3;
    let n = 100_000u64;
    let mut store = ParamStore::<f64>::new();
    let mut g = Graph::new(&mut store, Mode::Train, 2024);
    let x = g.input(Tensor::full(&[n as usize], 1.0));
    let y = g.dropout(x, rate).unwrap();
    let zeros = g.value(y).data().iter().filter(|&&v| v == 0.0).count() as u64;
    assert!(g
        .value(y)
        .data()
        .iter()
        .all(|&v| v == 0.0 || (v - 1.0 / 0.7).abs() < 1e-15));
    let bin = Binomial::new(rate, n).unwrap();
    let lower = bin.cdf(zeros);
    let upper = 1.0 - if zeros == 0 { 0.0 } else { bin.cdf(zeros - 1) };
    let p = (2.0 * lower.min(upper)).min(1.0);
    assert!(p > 0.01, "zeros {zeros}, p {p}");
}

#[test]
fn dropout_is_identity_at_inference() {
    let mut store = ParamStore::<f64>::new();
    let mut g = Graph::new(&mut store, Mode::Infer, 0);
    let x = g.input(Tensor::full(&[100], 2.0));
    let y = g.dropout(x, 0.5).unwrap();
    assert_eq!(g.value(y).data(), g.value(x).data());
}

#[test]
fn batchnorm_standardizes_each_group() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::<f64>::new();
    let gamma = store.add("g", Tensor::full(&[3], 1.0), true);
    let beta = store.add("b", Tensor::zeros(&[3]), true);
    let layout = BnLayout {
        outer: 4,
        g1: 1,
        span: 50,
        g2: 3,
    };
    let x = Tensor::from_fn(&[4, 50, 3], |i| 5.0 * rng.gen::<f64>() + (i % 3) as f64 * 10.0);
    let mut g = Graph::new(&mut store, Mode::Train, 0);
    let xv = g.input(x);
    let (ga, be) = (g.param(gamma), g.param(beta));
    let y = g.batchnorm(xv, ga, be, None, layout).unwrap();
    let d = g.value(y).data();
    for c in 0..3 {
        let vals: Vec<f64> = d.iter().skip(c).step_by(3).copied().collect();
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-6 && (var - 1.0).abs() < 1e-6, "{mean} {var}");
    }
}

#[test]
fn running_statistics_follow_momentum() {
    let mut store = ParamStore::<f64>::new();
    let gamma = store.add("g", Tensor::full(&[1], 1.0), true);
    let beta = store.add("b", Tensor::zeros(&[1]), true);
    let mean = store.add("m", Tensor::zeros(&[1]), false);
    let var = store.add("v", Tensor::full(&[1], 1.0), false);
    let layout = BnLayout {
        outer: 1,
        g1: 1,
        span: 4,
        g2: 1,
    };
    {
        let mut g = Graph::new(&mut store, Mode::Train, 0);
        let x = g.input(Tensor::new(&[4], vec![1.0, 2.0, 3.0, 6.0]));
        let (ga, be) = (g.param(gamma), g.param(beta));
        g.batchnorm(x, ga, be, Some((mean, var)), layout).unwrap();
    }
    assert!((store.value(mean).data()[0] - 0.01 * 3.0).abs() < 1e-15);
    assert!((store.value(var).data()[0] - (0.99 + 0.01 * 3.5)).abs() < 1e-15);
}

#[test]
fn softmax_rows_sum_to_one_and_ignore_shifts() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut store = ParamStore::<f64>::new();
    let mut g = Graph::new(&mut store, Mode::Infer, 0);
    let x = Tensor::uniform(&[30, 4], 20.0, &mut rng);
    let shifted = Tensor::from_fn(&[30, 4], |i| x.data()[i] + 7.5 * (i / 4) as f64);
    let a = g.input(x);
    let b = g.input(shifted);
    let pa = g.softmax(a).unwrap();
    let pb = g.softmax(b).unwrap();
    for row in g.value(pa).data().chunks(4) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    assert!(approx(g.value(pa).data(), g.value(pb).data(), 1e-12));
}

/// Plain scalar Adam recurrence used as the reference trajectory.
fn scalar_adam(steps: usize, lr: f64) -> Vec<f64> {
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let (mut theta, mut m, mut v) = (0.0f64, 0.0f64, 0.0f64);
    let mut out = Vec::new();
    for t in 1..=steps {
        let grad = 2.0 * (theta - 3.0);
        m = b1 * m + (1.0 - b1) * grad;
        v = b2 * v + (1.0 - b2) * grad * grad;
        let mh = m / (1.0 - b1.powi(t as i32));
        let vh = v / (1.0 - b2.powi(t as i32));
        theta -= lr * mh / (vh.sqrt() + eps);
        out.push(theta);
    }
    out
}

#[test]
fn adam_converges_on_quadratic() {
    let mut store = ParamStore::<f64>::new();
    let th = store.add("theta", Tensor::zeros(&[1]), true);
    let target = 3.0;
    let mut adam = AdamState::new(&store, 0.1);
    let oracle = scalar_adam(200, 0.1);
    for expected in &oracle {
        store.zero_grad();
        {
            let mut g = Graph::new(&mut store, Mode::Train, 0);
            let t = g.param(th);
            let c = g.input(Tensor::new(&[1], vec![-target]));
            let d = g.add(t, c).unwrap();
            let sq = g.mul(d, d).unwrap();
            let l = g.sum(sq);
            g.backward(l).unwrap();
        }
        adam.step(&mut store);
        assert!((store.value(th).data()[0] - expected).abs() < 1e-12);
    }
    assert!((store.value(th).data()[0] - target).abs() < 0.1);
}

#[test]
fn f32_graph_runs() {
    let mut store = ParamStore::<f32>::new();
    let w = store.add("w", Tensor::full(&[2, 2], 0.5f32), true);
    let mut g = Graph::new(&mut store, Mode::Train, 0);
    let x = g.input(Tensor::new(&[3, 2], vec![1.0f32, 2.0, 3.0, 4.0, 5.0, 6.0]));
    let wv = g.param(w);
    let y = g.dense(x, wv, None).unwrap();
    let l = g.sum(y);
    g.backward(l).unwrap();
    drop(g);
    assert_eq!(store.grad(w), &[9.0f32, 9.0, 12.0, 12.0]);
}

use super::*;
use crate::rng::seeded;
use rand::Rng;

type R = crate::rng::SeededRng;

fn rand_tensor(shape: &[usize], rng: &mut R) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn int_tensor(shape: &[usize], rng: &mut R) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-4i32..=4) as f64).collect()).unwrap()
}

/// Fixed pseudo-target so that a tensor output reduces to a scalar loss.
fn pattern(shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|i| (i as f64 * 0.37).sin() * 0.5).collect()).unwrap()
}

fn reduce(g: &mut Graph<f64>, out: Var) -> Var {
    let target = pattern(g.value(out).shape());
    g.mse_loss(out, &target, None).unwrap()
}

/// Max elementwise relative error between analytic gradients and central
/// differences with step `eps`.
fn gradcheck<F>(inputs: &[Tensor<f64>], eps: f64, build: F) -> f64
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    let eval = |ins: &[Tensor<f64>]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.param(t.clone())).collect();
        let loss = build(&mut g, &vars);
        g.value(loss).data()[0]
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = build(&mut g, &vars);
    g.backward(loss).unwrap();
    let mut worst = 0.0f64;
    for (k, v) in vars.iter().enumerate() {
        let analytic = g.grad(*v).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; inputs[k].len()]);
        for j in 0..inputs[k].len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[j] += eps;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[j] -= eps;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * eps);
            let a = analytic[j];
            let denom = a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    worst
}

const EPS: f64 = 1e-4;
const TOL: f64 = 1e-4;

fn naive_conv(x: &Tensor<f64>, k: &Tensor<f64>, b: &Tensor<f64>, pad: [usize; 3]) -> Vec<f64> {
    let [n, ci, d, h, w] = x.shape()[..] else { panic!() };
    let [co, _, kd, kh, kw] = k.shape()[..] else { panic!() };
    let (od, oh, ow) = (d + 2 * pad[0] - kd + 1, h + 2 * pad[1] - kh + 1, w + 2 * pad[2] - kw + 1);
    let mut out = vec![0.0; n * co * od * oh * ow];
    for s in 0..n {
        for o in 0..co {
            for z in 0..od {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut acc = b.data()[o];
                        for c in 0..ci {
                            for a in 0..kd {
                                for bb in 0..kh {
                                    for e in 0..kw {
                                        let (iz, iy, ix) = (
                                            (z + a) as isize - pad[0] as isize,
                                            (y + bb) as isize - pad[1] as isize,
                                            (xx + e) as isize - pad[2] as isize,
                                        );
                                        if iz < 0 || iy < 0 || ix < 0 || iz >= d as isize || iy >= h as isize || ix >= w as isize {
                                            continue;
                                        }
                                        let xi = (((s * ci + c) * d + iz as usize) * h + iy as usize) * w + ix as usize;
                                        let ki = (((o * ci + c) * kd + a) * kh + bb) * kw + e;
                                        acc += x.data()[xi] * k.data()[ki];
                                    }
                                }
                            }
                        }
                        out[(((s * co + o) * od + z) * oh + y) * ow + xx] = acc;
                    }
                }
            }
        }
    }
    out
}

fn random_conv_case(rng: &mut R, int_valued: bool) -> (Tensor<f64>, Tensor<f64>, Tensor<f64>, [usize; 3]) {
    let n = rng.random_range(1..=2);
    let ci = rng.random_range(1..=3);
    let co = rng.random_range(1..=3);
    let dims = [rng.random_range(1..=5), rng.random_range(1..=5), rng.random_range(1..=5)];
    let kd: [usize; 3] = std::array::from_fn(|a| rng.random_range(1..=dims[a].min(3)));
    let pad: [usize; 3] = std::array::from_fn(|a| rng.random_range(0..kd[a]));
    let make = if int_valued { int_tensor } else { rand_tensor };
    let x = make(&[n, ci, dims[0], dims[1], dims[2]], rng);
    let k = make(&[co, ci, kd[0], kd[1], kd[2]], rng);
    let b = make(&[co], rng);
    (x, k, b, pad)
}

#[test]
fn conv_identity_kernel() {
    let mut rng = seeded(1);
    let x = rand_tensor(&[1, 1, 3, 4, 5], &mut rng);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let k = g.constant(Tensor::full([1, 1, 1, 1, 1], 1.0));
    let b = g.constant(Tensor::zeros([1]));
    let y = g.conv3d(xv, k, b, [0; 3]).unwrap();
    assert_eq!(g.value(y), &x);
}

#[test]
fn conv_sums_a_cube() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::full([1, 1, 2, 2, 2], 1.0));
    let k = g.constant(Tensor::full([1, 1, 2, 2, 2], 1.0));
    let b = g.constant(Tensor::zeros([1]));
    let y = g.conv3d(x, k, b, [0; 3]).unwrap();
    assert_eq!(g.value(y).shape(), &[1, 1, 1, 1, 1]);
    assert_eq!(g.value(y).data(), &[8.0]);
}

#[test]
fn conv_rejects_channel_mismatch() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::zeros([1, 2, 3, 3, 3]));
    let k = g.constant(Tensor::zeros([1, 3, 3, 3, 3]));
    let b = g.constant(Tensor::zeros([1]));
    assert!(g.conv3d(x, k, b, [1; 3]).is_err());
}

#[test]
fn conv_matches_naive_loops_exactly_on_integer_data() {
    let mut rng = seeded(11);
    for _ in 0..50 {
        let (x, k, b, pad) = random_conv_case(&mut rng, true);
        let mut g = Graph::new();
        let (xv, kv, bv) = (g.constant(x.clone()), g.constant(k.clone()), g.constant(b.clone()));
        let y = g.conv3d(xv, kv, bv, pad).unwrap();
        assert_eq!(g.value(y).data(), &naive_conv(&x, &k, &b, pad)[..]);
    }
}

#[test]
fn conv_matches_naive_loops_on_real_data() {
    let mut rng = seeded(12);
    for _ in 0..30 {
        let (x, k, b, pad) = random_conv_case(&mut rng, false);
        let mut g = Graph::new();
        let (xv, kv, bv) = (g.constant(x.clone()), g.constant(k.clone()), g.constant(b.clone()));
        let y = g.conv3d(xv, kv, bv, pad).unwrap();
        for (a, e) in g.value(y).data().iter().zip(naive_conv(&x, &k, &b, pad)) {
            assert!((a - e).abs() < 1e-12);
        }
    }
}

#[test]
fn conv_gradients() {
    let mut rng = seeded(2);
    for _ in 0..20 {
        let (x, k, b, pad) = random_conv_case(&mut rng, false);
        let err = gradcheck(&[x, k, b], EPS, |g, v| {
            let y = g.conv3d(v[0], v[1], v[2], pad).unwrap();
            reduce(g, y)
        });
        assert!(err < TOL, "conv3d gradient error {err}");
    }
}

#[test]
fn batchnorm_train_statistics() {
    let mut rng = seeded(3);
    let x = rand_tensor(&[2, 3, 2, 3, 4], &mut rng);
    let mut g = Graph::new();
    let xv = g.constant(x);
    let gamma = g.constant(Tensor::full([3], 1.0));
    let beta = g.constant(Tensor::zeros([3]));
    let mut stats = BatchNormStats::new(3);
    let y = g.batchnorm3d(xv, gamma, beta, &mut stats, BatchNormMode::Train).unwrap();
    let out = g.value(y).data();
    let s = 24;
    for c in 0..3 {
        let vals: Vec<f64> = (0..2).flat_map(|n| out[(n * 3 + c) * s..(n * 3 + c + 1) * s].to_vec()).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!(mean.abs() < 1e-5);
        assert!((var - 1.0).abs() < 1e-4);
    }
    assert!(stats.mean.iter().any(|&m| m != 0.0));
}

#[test]
fn batchnorm_zero_variance_gives_beta() {
    let mut g = Graph::<f64>::new();
    let xv = g.constant(Tensor::full([1, 2, 2, 2, 2], 3.0));
    let gamma = g.constant(Tensor::new([2], vec![2.0, -1.0]).unwrap());
    let beta = g.constant(Tensor::new([2], vec![0.25, -0.5]).unwrap());
    let mut stats = BatchNormStats::new(2);
    let y = g.batchnorm3d(xv, gamma, beta, &mut stats, BatchNormMode::Train).unwrap();
    let out = g.value(y).data();
    assert!(out[..8].iter().all(|&v| v == 0.25));
    assert!(out[8..].iter().all(|&v| v == -0.5));
}

#[test]
fn batchnorm_channel_mismatch() {
    let mut g = Graph::<f64>::new();
    let xv = g.constant(Tensor::zeros([1, 2, 2, 2, 2]));
    let gamma = g.constant(Tensor::zeros([3]));
    let beta = g.constant(Tensor::zeros([3]));
    let mut stats = BatchNormStats::new(3);
    assert!(g.batchnorm3d(xv, gamma, beta, &mut stats, BatchNormMode::Eval).is_err());
}

#[test]
fn batchnorm_gradients() {
    let mut rng = seeded(4);
    for i in 0..20 {
        let n = 1 + i % 2;
        let c = 1 + i % 3;
        let x = rand_tensor(&[n, c, 2, 2, 3], &mut rng);
        let gamma = rand_tensor(&[c], &mut rng);
        let beta = rand_tensor(&[c], &mut rng);
        let mode = if i % 4 == 3 { BatchNormMode::Eval } else { BatchNormMode::Train };
        let mut running = BatchNormStats::<f64>::new(c);
        running.mean = (0..c).map(|_| rng.random_range(-0.5..0.5)).collect();
        running.var = (0..c).map(|_| rng.random_range(0.5..2.0)).collect();
        let err = gradcheck(&[x, gamma, beta], EPS, |g, v| {
            let mut stats = running.clone();
            let y = g.batchnorm3d(v[0], v[1], v[2], &mut stats, mode).unwrap();
            reduce(g, y)
        });
        assert!(err < TOL, "batchnorm gradient error {err} ({mode:?})");
    }
}

/// Values spaced at least 0.01 apart so that no finite-difference step can
/// change a pooling argmax.
fn tie_free(shape: &[usize], rng: &mut R) -> Tensor<f64> {
    use rand::seq::SliceRandom;
    let n: usize = shape.iter().product();
    let mut ranks: Vec<usize> = (0..n).collect();
    ranks.shuffle(rng);
    Tensor::new(shape.to_vec(), ranks.into_iter().map(|r| r as f64 * 0.01 - 0.3).collect()).unwrap()
}

#[test]
fn maxpool_basics() {
    let mut g = Graph::<f64>::new();
    let c = g.constant(Tensor::full([1, 2, 4, 4, 2], 0.7));
    let y = g.maxpool3d(c, [2, 2, 2]).unwrap();
    assert_eq!(g.value(y).shape(), &[1, 2, 2, 2, 1]);
    assert!(g.value(y).data().iter().all(|&v| v == 0.7));

    let mut rng = seeded(5);
    let x = rand_tensor(&[1, 2, 3, 3, 3], &mut rng);
    let xv = g.constant(x.clone());
    let y = g.maxpool3d(xv, [1, 1, 1]).unwrap();
    assert_eq!(g.value(y), &x);
    assert!(g.maxpool3d(xv, [2, 1, 1]).is_err());
}

#[test]
fn maxpool_tie_routes_to_first() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::full([1, 1, 1, 1, 2], 1.0));
    let y = g.maxpool3d(x, [1, 1, 2]).unwrap();
    let l = reduce(&mut g, y);
    g.backward(l).unwrap();
    let gx = g.grad(x).unwrap().data();
    assert!(gx[0] != 0.0 && gx[1] == 0.0);
}

#[test]
fn maxpool_gradients() {
    let mut rng = seeded(6);
    for i in 0..20 {
        let win = [1 + i % 2, 2, 1 + (i / 2) % 2];
        let shape = [1 + i % 2, 2, 2 * win[0], 2 * win[1], 2 * win[2]];
        let x = tie_free(&shape, &mut rng);
        let err = gradcheck(&[x], EPS, |g, v| {
            let y = g.maxpool3d(v[0], win).unwrap();
            reduce(g, y)
        });
        assert!(err < TOL, "maxpool gradient error {err}");
    }
}

#[test]
fn upsample_basics_and_gradients() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::full([1, 1, 1, 1, 1], 0.3));
    let y = g.upsample_nearest3d(x, [2, 2, 2]).unwrap();
    assert_eq!(g.value(y).data(), &[0.3; 8]);
    let mut rng = seeded(7);
    let t = rand_tensor(&[2, 2, 2, 3, 2], &mut rng);
    let tv = g.constant(t.clone());
    let same = g.upsample_nearest3d(tv, [1, 1, 1]).unwrap();
    assert_eq!(g.value(same), &t);

    for i in 0..20 {
        let f = [1 + i % 2, 1 + (i / 2) % 3, 2];
        let x = rand_tensor(&[1, 2, 2, 2, 3], &mut rng);
        let err = gradcheck(&[x], EPS, |g, v| {
            let y = g.upsample_nearest3d(v[0], f).unwrap();
            reduce(g, y)
        });
        assert!(err < TOL, "upsample gradient error {err}");
    }
}

#[test]
fn activations() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::new([3], vec![-1.0, 2.0, 0.0]).unwrap());
    let r = g.relu(x);
    assert_eq!(g.value(r).data(), &[0.0, 2.0, 0.0]);
    let s = g.sigmoid(x);
    assert_eq!(g.value(s).data()[2], 0.5);

    let mut rng = seeded(8);
    for i in 0..20 {
        // keep away from the ReLU kink
        let mut x = rand_tensor(&[2, 3, 2, 2, 2], &mut rng);
        x.data_mut().iter_mut().for_each(|v| {
            if v.abs() < 1e-2 {
                *v += 0.05;
            }
        });
        let kind = if i % 2 == 0 { Activation::Relu } else { Activation::Sigmoid };
        let err = gradcheck(&[x], EPS, |g, v| {
            let y = g.activation(v[0], kind);
            reduce(g, y)
        });
        assert!(err < TOL, "{kind:?} gradient error {err}");
    }
}

#[test]
fn relu_derivative_at_zero_is_zero() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::zeros([1]));
    let y = g.relu(x);
    let l = g.mse_loss(y, &Tensor::scalar(1.0), None).unwrap();
    g.backward(l).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[0.0]);
}

#[test]
fn linear_cases() {
    let mut rng = seeded(9);
    let x = rand_tensor(&[2, 3], &mut rng);
    let mut g = Graph::<f64>::new();
    let xv = g.constant(x.clone());
    let eye = g.constant(Tensor::new([3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap());
    let zb = g.constant(Tensor::zeros([3]));
    let y = g.linear(xv, eye, zb).unwrap();
    assert_eq!(g.value(y).data(), x.data());

    let zw = g.constant(Tensor::zeros([2, 3]));
    let b = g.constant(Tensor::new([2], vec![0.5, -1.5]).unwrap());
    let y = g.linear(xv, zw, b).unwrap();
    assert_eq!(g.value(y).data(), &[0.5, -1.5, 0.5, -1.5]);

    for i in 0..20 {
        let (n, fi, fo) = (1 + i % 3, 2 + i % 4, 1 + i % 2);
        let x = rand_tensor(&[n, fi, 1, 1, 1], &mut rng);
        let w = rand_tensor(&[fo, fi], &mut rng);
        let b = rand_tensor(&[fo], &mut rng);
        let err = gradcheck(&[x, w, b], EPS, |g, v| {
            let y = g.linear(v[0], v[1], v[2]).unwrap();
            reduce(g, y)
        });
        assert!(err < TOL, "linear gradient error {err}");
    }
}

#[test]
fn pooling_and_concat_gradients() {
    let mut rng = seeded(10);
    for _ in 0..20 {
        let a = rand_tensor(&[2, 2, 2, 2, 2], &mut rng);
        let b = rand_tensor(&[2, 1, 2, 2, 2], &mut rng);
        let err = gradcheck(&[a, b], EPS, |g, v| {
            let c = g.concat_channels(v[0], v[1]).unwrap();
            let p = g.global_avg_pool(c).unwrap();
            reduce(g, p)
        });
        assert!(err < TOL, "concat/gap gradient error {err}");
    }
}

#[test]
fn mse_cases() {
    let mut rng = seeded(13);
    let t = rand_tensor(&[4, 5], &mut rng);
    let mut g = Graph::<f64>::new();
    let same = g.param(t.clone());
    let l = g.mse_loss(same, &t, None).unwrap();
    assert_eq!(g.value(l).data(), &[0.0]);
    let shifted = Tensor::new([4, 5], t.data().iter().map(|v| v + 1.0).collect()).unwrap();
    let sv = g.param(shifted.clone());
    let l = g.mse_loss(sv, &t, None).unwrap();
    assert!((g.value(l).data()[0] - 1.0).abs() < 1e-12);

    // closed form 2 (p - t) / n, full and masked
    let p = rand_tensor(&[4, 5], &mut rng);
    let mask: Vec<bool> = (0..20).map(|i| i % 3 == 0).collect();
    for m in [None, Some(&mask[..])] {
        let mut g = Graph::<f64>::new();
        let pv = g.param(p.clone());
        let l = g.mse_loss(pv, &t, m).unwrap();
        g.backward(l).unwrap();
        let count = m.map_or(20, |m| m.iter().filter(|&&b| b).count()) as f64;
        for (j, &gj) in g.grad(pv).unwrap().data().iter().enumerate() {
            let want = if m.is_none_or(|m| m[j]) { 2.0 * (p.data()[j] - t.data()[j]) / count } else { 0.0 };
            assert!((gj - want).abs() < 1e-15);
        }
        let err = gradcheck(&[p.clone()], EPS, |g, v| g.mse_loss(v[0], &t, m).unwrap());
        assert!(err < 1e-6, "mse gradient error {err}");
    }
}

#[test]
fn bce_cases() {
    let mut g = Graph::<f64>::new();
    let p = g.param(Tensor::new([2], vec![0.5, 0.5]).unwrap());
    let l = g.bce_loss(p, &[0.0, 1.0]).unwrap();
    assert!((g.value(l).data()[0] - std::f64::consts::LN_2).abs() < 1e-12);
    let near = g.param(Tensor::new([2], vec![1.0, 0.0]).unwrap());
    let l = g.bce_loss(near, &[1.0, 0.0]).unwrap();
    assert!(g.value(l).data()[0] < 1e-6);

    let mut rng = seeded(14);
    for _ in 0..20 {
        let probs: Vec<f64> = (0..4).map(|_| rng.random_range(0.05..0.95)).collect();
        let labels: Vec<f64> = (0..4).map(|_| f64::from(rng.random_range(0..2u8))).collect();
        let t = Tensor::new([4], probs.clone()).unwrap();
        let mut g = Graph::<f64>::new();
        let pv = g.param(t.clone());
        let l = g.bce_loss(pv, &labels).unwrap();
        g.backward(l).unwrap();
        for (j, &gj) in g.grad(pv).unwrap().data().iter().enumerate() {
            let (p, y) = (probs[j], labels[j]);
            let want = (-y / p + (1.0 - y) / (1.0 - p)) / 4.0;
            assert!((gj - want).abs() <= 1e-12 * want.abs().max(1.0));
        }
        let err = gradcheck(&[t], EPS, |g, v| g.bce_loss(v[0], &labels).unwrap());
        assert!(err < 1e-6, "bce gradient error {err}");
    }
}

#[test]
fn backward_through_identity_chain() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::full([1, 1, 1, 1, 1], 0.25));
    let one = g.constant(Tensor::full([1, 1, 1, 1, 1], 1.0));
    let zero = g.constant(Tensor::zeros([1]));
    let a = g.conv3d(x, one, zero, [0; 3]).unwrap();
    let b = g.upsample_nearest3d(a, [1, 1, 1]).unwrap();
    let c = g.maxpool3d(b, [1, 1, 1]).unwrap();
    // loss = (c - (c0 - 0.5))^2 with one element => dloss/dc = 1
    let target = Tensor::full([1, 1, 1, 1, 1], 0.25 - 0.5);
    let l = g.mse_loss(c, &target, None).unwrap();
    g.backward(l).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[1.0]);
}

#[test]
fn fan_out_accumulates() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::full([1, 1, 1, 1, 1], 2.0));
    let c = g.concat_channels(x, x).unwrap();
    let l = g.mse_loss(c, &Tensor::zeros([1, 2, 1, 1, 1]), None).unwrap();
    g.backward(l).unwrap();
    // loss = (x^2 + x^2) / 2, derivative 2x
    assert_eq!(g.grad(x).unwrap().data(), &[4.0]);
}

#[test]
fn second_backward_is_an_error() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::scalar(1.0));
    let l = g.mse_loss(x, &Tensor::scalar(0.0), None).unwrap();
    g.backward(l).unwrap();
    assert!(matches!(g.backward(l), Err(crate::Error::BackwardAlreadyRun)));
    g.zero_grad();
    g.backward(l).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[2.0]);
}

#[test]
fn ops_are_deterministic_and_do_not_mutate_inputs() {
    let run = || {
        let mut rng = seeded(15);
        let (x, k, b, pad) = random_conv_case(&mut rng, false);
        let mut g = Graph::new();
        let (xv, kv, bv) = (g.param(x.clone()), g.param(k.clone()), g.param(b.clone()));
        let y = g.conv3d(xv, kv, bv, pad).unwrap();
        let l = reduce(&mut g, y);
        g.backward(l).unwrap();
        assert_eq!(g.value(xv), &x);
        assert_eq!(g.value(kv), &k);
        (g.value(y).clone(), g.grad(kv).unwrap().clone())
    };
    assert_eq!(run(), run());
}

#[test]
fn kaiming_bounds() {
    let mut rng = seeded(16);
    let t: Tensor<f32> = kaiming_uniform(&[8, 4, 3, 3, 3], 108, &mut rng);
    let bound = (6.0f32 / 108.0).sqrt();
    assert!(t.data().iter().all(|v| v.abs() <= bound));
}

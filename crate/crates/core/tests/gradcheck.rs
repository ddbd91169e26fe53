//! Backward pass of every graph op against central finite differences.

use mtlab::{finite_diff_grad, Activation, Graph, ParamId, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;
const SEEDS: u64 = 20;

type Build = dyn Fn(&mut Graph, &[Var]) -> Var;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Contracts a tensor-valued output with fixed random weights so every
/// output element contributes to the scalar loss.
fn project(g: &mut Graph, out: Var, seed: u64) -> Var {
    let shape = g.value(out).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
    let w = g.input(random(&shape, &mut rng));
    let prod = g.mul(out, w).unwrap();
    g.sum(prod).unwrap()
}

fn loss_value(params: &[Tensor], build: &Build) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().enumerate().map(|(i, p)| g.param(ParamId(i as u32), p.clone())).collect();
    let loss = build(&mut g, &vars);
    g.value(loss).item()
}

fn rel_error(a: &Tensor, b: &Tensor) -> f64 {
    let diff: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.data().iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.data().iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-8)
}

fn check(name: &str, params: Vec<Tensor>, build: &Build) {
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().enumerate().map(|(i, p)| g.param(ParamId(i as u32), p.clone())).collect();
    let loss = build(&mut g, &vars);
    let grads = g.backward(loss).unwrap();
    for (i, p) in params.iter().enumerate() {
        let numeric = finite_diff_grad(
            |q| {
                let mut ps = params.clone();
                ps[i] = q.clone();
                loss_value(&ps, build)
            },
            p,
            H,
        );
        let analytic = grads.get(&ParamId(i as u32)).cloned().unwrap_or_else(|| Tensor::zeros(p.shape()));
        let err = rel_error(&analytic, &numeric);
        assert!(err <= TOL, "{name}: param {i} relative error {err:e}");
    }
}

fn each_seed(mut f: impl FnMut(u64, &mut ChaCha8Rng)) {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        f(seed, &mut rng);
    }
}

#[test]
fn matmul() {
    each_seed(|seed, rng| {
        let (m, n, p) = (rng.random_range(1..5), rng.random_range(1..5), rng.random_range(1..5));
        check("matmul", vec![random(&[m, n], rng), random(&[n, p], rng)], &move |g, v| {
            let y = g.matmul(v[0], v[1]).unwrap();
            project(g, y, seed)
        });
    });
}

#[test]
fn add_mul_scale() {
    each_seed(|seed, rng| {
        let shape = [rng.random_range(1..4), rng.random_range(1..4)];
        check("add", vec![random(&shape, rng), random(&shape, rng)], &move |g, v| {
            let y = g.add(v[0], v[1]).unwrap();
            project(g, y, seed)
        });
        check("mul", vec![random(&shape, rng), random(&shape, rng)], &move |g, v| {
            let y = g.mul(v[0], v[1]).unwrap();
            project(g, y, seed)
        });
        let factor = rng.random_range(-2.0..2.0);
        check("scale", vec![random(&shape, rng)], &move |g, v| {
            let y = g.scale(v[0], factor).unwrap();
            project(g, y, seed)
        });
    });
}

#[test]
fn bias_add() {
    each_seed(|seed, rng| {
        let shape = [rng.random_range(1..4), rng.random_range(1..4), rng.random_range(1..4)];
        let axis = rng.random_range(0..3);
        check("bias_add", vec![random(&shape, rng), random(&[shape[axis]], rng)], &move |g, v| {
            let y = g.bias_add(v[0], v[1], axis).unwrap();
            project(g, y, seed)
        });
    });
}

#[test]
fn conv2d() {
    each_seed(|seed, rng| {
        let (n, c, f) = (rng.random_range(1..3), rng.random_range(1..3), rng.random_range(1..3));
        let (h, w) = (rng.random_range(3..7), rng.random_range(3..7));
        let k = rng.random_range(1..4);
        let stride = rng.random_range(1..3);
        let padding = rng.random_range(0..2);
        let x = random(&[n, c, h, w], rng);
        let kern = random(&[f, c, k, k], rng);
        check("conv2d", vec![x, kern], &move |g, v| {
            let y = g.conv2d(v[0], v[1], stride, padding).unwrap();
            project(g, y, seed)
        });
    });
}

#[test]
fn activations() {
    each_seed(|seed, rng| {
        let shape = [rng.random_range(1..4), rng.random_range(2..5)];
        for kind in [Activation::Relu, Activation::Sigmoid, Activation::Softmax] {
            // Keep ReLU inputs away from the kink.
            let x = Tensor::from_fn(&shape, |_| {
                let v: f64 = rng.random_range(0.05..1.0);
                if rng.random_bool(0.5) { v } else { -v }
            });
            check(&format!("{kind:?}"), vec![x], &move |g, v| {
                let y = g.activation(v[0], kind).unwrap();
                project(g, y, seed)
            });
        }
    });
}

#[test]
fn softmax_inner_axis() {
    each_seed(|seed, rng| {
        let shape = [rng.random_range(1..3), rng.random_range(2..4), rng.random_range(1..4), rng.random_range(1..4)];
        check("softmax_axis", vec![random(&shape, rng)], &move |g, v| {
            let y = g.softmax_axis(v[0], 1).unwrap();
            project(g, y, seed)
        });
    });
}

#[test]
fn reductions_and_reshape() {
    each_seed(|seed, rng| {
        let shape = [rng.random_range(1..4), rng.random_range(1..4)];
        check("sum", vec![random(&shape, rng)], &|g, v| {
            let sq = g.mul(v[0], v[0]).unwrap();
            g.sum(sq).unwrap()
        });
        check("mean", vec![random(&shape, rng)], &|g, v| {
            let sq = g.mul(v[0], v[0]).unwrap();
            g.mean(sq).unwrap()
        });
        let flat = [shape[0] * shape[1]];
        check("reshape", vec![random(&shape, rng)], &move |g, v| {
            let y = g.reshape(v[0], &flat).unwrap();
            project(g, y, seed)
        });
    });
}

#[test]
fn pooling_and_upsampling() {
    each_seed(|seed, rng| {
        let shape = [rng.random_range(1..3), rng.random_range(1..3), rng.random_range(1..4), rng.random_range(1..4)];
        check("global_avg_pool", vec![random(&shape, rng)], &move |g, v| {
            let y = g.global_avg_pool(v[0]).unwrap();
            project(g, y, seed)
        });
        let factor = rng.random_range(1..4);
        check("upsample", vec![random(&shape, rng)], &move |g, v| {
            let y = g.upsample_nearest(v[0], factor).unwrap();
            project(g, y, seed)
        });
    });
}

#[test]
fn losses() {
    each_seed(|_, rng| {
        let (n, k) = (rng.random_range(1..5), rng.random_range(2..5));
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        check("cross_entropy", vec![random(&[n, k], rng)], &move |g, v| g.cross_entropy(v[0], &labels).unwrap());

        let (hw, k) = (rng.random_range(1..4), rng.random_range(2..4));
        let labels: Vec<usize> = (0..n * hw * hw).map(|_| rng.random_range(0..k)).collect();
        check("pixel_cross_entropy", vec![random(&[n, k, hw, hw], rng)], &move |g, v| {
            g.cross_entropy(v[0], &labels).unwrap()
        });

        let targets = Tensor::from_fn(&[n, k], |_| f64::from(rng.random_bool(0.5)));
        check("bce_with_logits", vec![random(&[n, k], rng)], &move |g, v| {
            g.bce_with_logits(v[0], &targets).unwrap()
        });
    });
}

#[test]
fn composed_network() {
    // conv → relu → pool → dense → softmax CE, all parameters at once.
    each_seed(|_, rng| {
        let x = random(&[2, 2, 5, 5], rng);
        let labels = vec![rng.random_range(0..3), rng.random_range(0..3)];
        let params = vec![random(&[3, 2, 3, 3], rng), random(&[3], rng), random(&[3, 3], rng), random(&[3], rng)];
        check("network", params, &move |g, v| {
            let input = g.input(x.clone());
            let c = g.conv2d(input, v[0], 1, 1).unwrap();
            let c = g.bias_add(c, v[1], 1).unwrap();
            let c = g.activation(c, Activation::Sigmoid).unwrap();
            let p = g.global_avg_pool(c).unwrap();
            let d = g.matmul(p, v[2]).unwrap();
            let d = g.bias_add(d, v[3], 1).unwrap();
            g.cross_entropy(d, &labels).unwrap()
        });
    });
}

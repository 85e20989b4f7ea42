//! Central finite-difference checks for every differentiable op.

use std::rc::Rc;

use activedt_autodiff::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-4;
const TOL: f64 = 1e-4;

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect()).unwrap()
}

/// Relative error with a small floor so exact zeros compare cleanly.
fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Builds `sum(f(inputs) ⊙ probe)` and compares reverse-mode gradients of
/// every input against central differences. Returns the max relative error.
fn check<F>(inputs: &[Tensor], probe_seed: u64, f: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let eval = |vals: &[Tensor]| -> (f64, Vec<Tensor>) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &vars);
        let shape = tape.value(out).shape().to_vec();
        let mut prng = ChaCha8Rng::seed_from_u64(probe_seed);
        let probe = random_tensor(&mut prng, &shape);
        let p = tape.constant(probe);
        let loss = if shape.is_empty() {
            out
        } else {
            let prod = tape.mul(out, p).unwrap();
            tape.sum(prod)
        };
        let value = tape.value(loss).item();
        let grads = tape.backward(loss).unwrap();
        (value, vars.iter().map(|&v| grads.wrt(&tape, v)).collect())
    };
    let (_, analytic) = eval(inputs);
    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += H;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= H;
            let numeric = (eval(&plus).0 - eval(&minus).0) / (2.0 * H);
            worst = worst.max(rel_err(analytic[i].data()[j], numeric));
        }
    }
    worst
}

fn for_seeds(name: &str, build: impl Fn(&mut ChaCha8Rng, u64) -> f64) {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let err = build(&mut rng, seed + 100);
        assert!(err < TOL, "{name}: seed {seed} max relative error {err:e}");
    }
}

#[test]
fn matmul_shared_rhs() {
    for_seeds("matmul", |rng, s| {
        let a = random_tensor(rng, &[2, 3, 4]);
        let b = random_tensor(rng, &[4, 5]);
        check(&[a, b], s, |t, v| t.matmul(v[0], v[1]).unwrap())
    });
}

#[test]
fn matmul_batched_and_transpose() {
    for_seeds("batched matmul", |rng, s| {
        let a = random_tensor(rng, &[2, 3, 4]);
        let b = random_tensor(rng, &[2, 5, 4]);
        check(&[a, b], s, |t, v| {
            let bt = t.transpose(v[1]).unwrap();
            t.matmul(v[0], bt).unwrap()
        })
    });
}

#[test]
fn add_with_broadcast() {
    for_seeds("add", |rng, s| {
        let a = random_tensor(rng, &[3, 2, 4]);
        let b = random_tensor(rng, &[2, 4]);
        check(&[a, b], s, |t, v| t.add(v[0], v[1]).unwrap())
    });
}

#[test]
fn elementwise_ops() {
    for_seeds("tanh/gelu/mul/scale", |rng, s| {
        let a = random_tensor(rng, &[3, 4]);
        let b = random_tensor(rng, &[3, 4]);
        check(&[a, b], s, |t, v| {
            let x = t.tanh(v[0]);
            let y = t.gelu(v[1]);
            let z = t.mul(x, y).unwrap();
            t.scale(z, -0.7)
        })
    });
}

#[test]
fn softmax_last_axis() {
    for_seeds("softmax", |rng, s| {
        let a = random_tensor(rng, &[3, 5]);
        check(&[a], s, |t, v| t.softmax(v[0]))
    });
}

#[test]
fn layer_norm_with_gain_and_bias() {
    for_seeds("layer_norm", |rng, s| {
        let x = random_tensor(rng, &[4, 6]);
        let g = random_tensor(rng, &[6]);
        let b = random_tensor(rng, &[6]);
        check(&[x, g, b], s, |t, v| t.layer_norm(v[0], v[1], v[2]).unwrap())
    });
}

#[test]
fn gather_slice_concat_reshape() {
    for_seeds("gather/slice/concat", |rng, s| {
        let table = random_tensor(rng, &[5, 3]);
        let other = random_tensor(rng, &[2, 3]);
        check(&[table, other], s, |t, v| {
            let e = t.embedding(v[0], &[4, 0, 4, 2]).unwrap();
            let rows = t.concat_rows(&[e, v[1]]).unwrap();
            let picked = t.gather_rows(rows, &[5, 1, 3, 0]).unwrap();
            let left = t.slice_last(picked, 0, 2).unwrap();
            let right = t.slice_last(picked, 1, 2).unwrap();
            let cat = t.concat_last(&[right, left]).unwrap();
            t.reshape(cat, &[2, 2, 4]).unwrap()
        })
    });
}

#[test]
fn masked_softmax_attention_pattern() {
    for_seeds("masked_fill", |rng, s| {
        let scores = random_tensor(rng, &[2, 4, 4]);
        let mask: Vec<bool> = (0..16).map(|i| (i % 4) > (i / 4)).collect();
        check(&[scores], s, move |t, v| {
            let m = t.masked_fill(v[0], Rc::new(mask.clone()), -1e9).unwrap();
            t.softmax(m)
        })
    });
}

#[test]
fn cross_entropy_and_entropy() {
    for_seeds("ce/entropy", |rng, s| {
        let logits = random_tensor(rng, &[4, 7]);
        let targets: Vec<usize> = (0..4).map(|_| rng.gen_range(0..7)).collect();
        let weights: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        check(&[logits], s, move |t, v| {
            let ce = t.cross_entropy_from_logits(v[0], &targets, &weights).unwrap();
            let h = t.entropy_from_logits(v[0], &weights).unwrap();
            let nh = t.scale(h, -0.1);
            t.add(ce, nh).unwrap()
        })
    });
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut tape = Tape::new();
    let x = tape.constant(random_tensor(&mut rng, &[16, 9]));
    let y = tape.scale(x, 20.0);
    let p = tape.softmax(y);
    for row in tape.value(p).data().chunks(9) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn layer_norm_rows_are_standardized() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut tape = Tape::new();
    let x = tape.constant(random_tensor(&mut rng, &[16, 32]));
    let g = tape.constant(Tensor::filled(&[32], 1.0));
    let b = tape.constant(Tensor::zeros(&[32]));
    let y = tape.layer_norm(x, g, b).unwrap();
    for row in tape.value(y).data().chunks(32) {
        let mean = row.iter().sum::<f64>() / 32.0;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 32.0;
        assert!(mean.abs() < 1e-7);
        assert!((var - 1.0).abs() < 1e-5, "variance {var}");
    }
}

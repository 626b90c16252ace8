//! Finite-difference checks for every autodiff op.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use securegate_core::{NodeId, Tape, Tensor};

const EPS: f64 = 1e-5;
const SEEDS: u64 = 20;

/// Projects `y` onto a fixed random direction so the loss is a scalar with
/// gradients of order one.
fn project(tape: &mut Tape, y: NodeId, rng: &mut ChaCha8Rng) -> NodeId {
    let shape = tape.value(y).shape().to_vec();
    let u = tape.constant(Tensor::randn(&shape, 1.0, rng));
    let prod = tape.mul(y, u).unwrap();
    tape.sum(prod).unwrap()
}

fn check(build: impl Fn(&mut Tape, &mut ChaCha8Rng) -> NodeId) -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tape = Tape::new(seed);
        let loss = build(&mut tape, &mut rng);
        let err = tape.check_gradients(&HashMap::new(), loss, EPS).unwrap();
        worst = worst.max(err);
    }
    worst
}

#[test]
fn matmul_gradients() {
    for transpose in [false, true] {
        let err = check(|tape, rng| {
            let a = tape
                .input("a", Tensor::randn(&[3, 4], 1.0, rng), true)
                .unwrap();
            let shape = if transpose { [5, 4] } else { [4, 5] };
            let b = tape
                .input("b", Tensor::randn(&shape, 1.0, rng), true)
                .unwrap();
            let c = tape.matmul(a, b, transpose).unwrap();
            project(tape, c, rng)
        });
        assert!(err < 1e-6, "matmul (transpose={transpose}): {err:e}");
    }
}

#[test]
fn linear_layer_gradients() {
    let err = check(|tape, rng| {
        let x = tape.constant(Tensor::randn(&[6, 4], 1.0, rng));
        let w = tape
            .input("w", Tensor::randn(&[3, 4], 0.5, rng), true)
            .unwrap();
        let y = tape.matmul(x, w, true).unwrap();
        project(tape, y, rng)
    });
    assert!(err < 1e-6, "linear: {err:e}");
}

#[test]
fn add_and_multiply_gradients() {
    let err = check(|tape, rng| {
        let a = tape
            .input("a", Tensor::randn(&[3, 3], 1.0, rng), true)
            .unwrap();
        let b = tape
            .input("b", Tensor::randn(&[3, 3], 1.0, rng), true)
            .unwrap();
        let s = tape.add(a, b).unwrap();
        let p = tape.mul(s, a).unwrap();
        project(tape, p, rng)
    });
    assert!(err < 1e-5, "add/mul: {err:e}");
}

#[test]
fn embedding_gradients() {
    let err = check(|tape, rng| {
        let table = tape
            .input("table", Tensor::randn(&[7, 3], 1.0, rng), true)
            .unwrap();
        let e = tape.embedding(table, &[0, 3, 3, 6, 1]).unwrap();
        project(tape, e, rng)
    });
    assert!(err < 1e-5, "embedding: {err:e}");
}

#[test]
fn softmax_gradients() {
    let err = check(|tape, rng| {
        let x = tape
            .input("x", Tensor::randn(&[4, 5], 1.0, rng), true)
            .unwrap();
        let y = tape.softmax(x).unwrap();
        project(tape, y, rng)
    });
    assert!(err < 1e-5, "softmax: {err:e}");
}

#[test]
fn layer_norm_gradients() {
    let err = check(|tape, rng| {
        let x = tape
            .input("x", Tensor::randn(&[4, 6], 1.0, rng), true)
            .unwrap();
        let g = tape
            .input("gamma", Tensor::randn(&[6], 1.0, rng), true)
            .unwrap();
        let b = tape
            .input("beta", Tensor::randn(&[6], 1.0, rng), true)
            .unwrap();
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        project(tape, y, rng)
    });
    assert!(err < 1e-5, "layer norm: {err:e}");
}

#[test]
fn gelu_gradients() {
    let err = check(|tape, rng| {
        let x = tape
            .input("x", Tensor::randn(&[3, 5], 1.5, rng), true)
            .unwrap();
        let y = tape.gelu(x).unwrap();
        project(tape, y, rng)
    });
    assert!(err < 1e-5, "gelu: {err:e}");
}

#[test]
fn glu_gradients() {
    let err = check(|tape, rng| {
        let x = tape
            .input("x", Tensor::randn(&[3, 8], 1.0, rng), true)
            .unwrap();
        let y = tape.glu(x).unwrap();
        project(tape, y, rng)
    });
    assert!(err < 1e-5, "glu: {err:e}");
}

#[test]
fn dropout_gradients() {
    let err = check(|tape, rng| {
        let x = tape
            .input("x", Tensor::randn(&[4, 4], 1.0, rng), true)
            .unwrap();
        let y = tape.dropout(x, 0.3).unwrap();
        project(tape, y, rng)
    });
    assert!(err < 1e-5, "dropout: {err:e}");
}

#[test]
fn cross_entropy_gradients() {
    let err = check(|tape, rng| {
        let z = tape
            .input("z", Tensor::randn(&[5, 6], 1.0, rng), true)
            .unwrap();
        tape.cross_entropy(z, &[0, 5, 2, 2, 1]).unwrap()
    });
    assert!(err < 1e-5, "cross entropy: {err:e}");
}

#[test]
fn low_rank_product_gradient_matches_finite_differences() {
    // B · A · x with the gradient taken with respect to A only.
    let err = check(|tape, rng| {
        let a = tape
            .input("A", Tensor::randn(&[2, 5], 1.0, rng), true)
            .unwrap();
        let b = tape.constant(Tensor::randn(&[4, 2], 1.0, rng));
        let x = tape.constant(Tensor::randn(&[5, 3], 1.0, rng));
        let ax = tape.matmul(a, x, false).unwrap();
        let bax = tape.matmul(b, ax, false).unwrap();
        project(tape, bax, rng)
    });
    assert!(err < 1e-6, "B·A·x: {err:e}");
}

#[test]
fn layer_norm_block_gradients() {
    // linear -> layer norm -> gelu -> linear -> cross entropy
    let err = check(|tape, rng| {
        let x = tape.constant(Tensor::randn(&[4, 6], 1.0, rng));
        let w1 = tape
            .input("w1", Tensor::randn(&[8, 6], 0.4, rng), true)
            .unwrap();
        let g = tape
            .input("g", Tensor::randn(&[8], 1.0, rng), true)
            .unwrap();
        let b = tape
            .input("b", Tensor::randn(&[8], 0.1, rng), true)
            .unwrap();
        let w2 = tape
            .input("w2", Tensor::randn(&[5, 8], 0.4, rng), true)
            .unwrap();
        let h = tape.matmul(x, w1, true).unwrap();
        let h = tape.layer_norm(h, g, b, 1e-5).unwrap();
        let h = tape.gelu(h).unwrap();
        let z = tape.matmul(h, w2, true).unwrap();
        tape.cross_entropy(z, &[0, 4, 1, 3]).unwrap()
    });
    assert!(err < 1e-5, "layer-norm block: {err:e}");
}

//! Finite-difference checks for every differentiable primitive.

use clsnav_core::tensor::gradcheck::check_inputs;
use clsnav_core::tensor::{Tape, Tensor, Var};
use clsnav_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: u64 = 20;
const EPS: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0) * scale).unwrap()
}

/// Reduces any output to a scalar with fixed pseudo-random weights so that
/// every output element carries a distinct upstream gradient.
fn weighted_sum(t: &mut Tape<'_>, y: Var) -> Result<Var> {
    let shape = t.shape(y).to_vec();
    let n = t.value(y).len();
    let w: Vec<f64> = (0..n).map(|i| ((i * 37 % 17) as f64 - 8.0) / 8.0).collect();
    let w = t.constant(shape, w)?;
    let p = t.mul(y, w)?;
    Ok(t.sum(p))
}

fn run<F>(name: &str, shapes: &[&[usize]], scale: f64, f: F)
where
    F: Fn(&mut Tape<'_>, &[Var]) -> Result<Var>,
{
    let mut worst: f64 = 0.0;
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed * 7919 + name.len() as u64);
        let inputs: Vec<Tensor> = shapes.iter().map(|s| rand_tensor(&mut rng, s, scale)).collect();
        let report = check_inputs(&inputs, EPS, |t, v| {
            let y = f(t, v)?;
            weighted_sum(t, y)
        })
        .unwrap();
        assert!(report.checked > 0);
        worst = worst.max(report.max_rel_error);
        assert!(
            report.max_rel_error <= TOL,
            "{name} seed {seed}: rel error {} at {:?}",
            report.max_rel_error,
            report.worst
        );
    }
    println!("{name}: max rel error {worst:.2e} over {SEEDS} seeds");
}

#[test]
fn matmul_sum_gradient() {
    // gradient of sum(a·b) w.r.t. a, 4×5 · 5×3
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = rand_tensor(&mut rng, &[4, 5], 1.0);
        let b = rand_tensor(&mut rng, &[5, 3], 1.0);
        let r = check_inputs(&[a, b], EPS, |t, v| {
            let c = t.matmul(v[0], v[1])?;
            Ok(t.sum(c))
        })
        .unwrap();
        assert!(r.max_rel_error <= TOL, "{r:?}");
    }
}

#[test]
fn matmul() {
    run("matmul", &[&[4, 5], &[5, 3]], 1.0, |t, v| t.matmul(v[0], v[1]));
}

#[test]
fn linear_with_bias() {
    run("linear", &[&[3, 4], &[4, 5], &[5]], 1.0, |t, v| {
        t.linear(v[0], v[1], Some(v[2]))
    });
}

#[test]
fn elementwise_add_sub_mul() {
    run("add", &[&[3, 4], &[3, 4]], 1.0, |t, v| t.add(v[0], v[1]));
    run("sub", &[&[3, 4], &[3, 4]], 1.0, |t, v| t.sub(v[0], v[1]));
    run("mul", &[&[3, 4], &[3, 4]], 1.0, |t, v| t.mul(v[0], v[1]));
    run("mul_self", &[&[6]], 1.0, |t, v| t.mul(v[0], v[0]));
    run("scale", &[&[5]], 1.0, |t, v| Ok(t.scale(v[0], -2.5)));
}

#[test]
fn broadcast_over_last_axis() {
    run("add_bias", &[&[3, 4], &[4]], 1.0, |t, v| t.add_bias(v[0], v[1]));
    run("scale_cols", &[&[3, 4], &[4]], 1.0, |t, v| t.scale_cols(v[0], v[1]));
    run("scale_rows", &[&[3, 4], &[3]], 1.0, |t, v| t.scale_rows(v[0], v[1]));
}

#[test]
fn activations() {
    run("gelu", &[&[4, 3]], 2.0, |t, v| Ok(t.gelu(v[0])));
    run("sigmoid", &[&[4, 3]], 3.0, |t, v| Ok(t.sigmoid(v[0])));
}

#[test]
fn softmax_each_axis() {
    run("softmax_last", &[&[3, 5]], 2.0, |t, v| t.softmax(v[0], 1));
    run("softmax_first", &[&[3, 5]], 2.0, |t, v| t.softmax(v[0], 0));
    run("softmax_mid", &[&[2, 3, 4]], 2.0, |t, v| t.softmax(v[0], 1));
}

#[test]
fn layer_norm() {
    run("layer_norm", &[&[3, 6], &[6], &[6]], 1.0, |t, v| {
        t.layer_norm(v[0], v[1], v[2], 1e-5)
    });
}

#[test]
fn scaled_dot_product_attention() {
    run("attention", &[&[5, 12]], 1.0, |t, v| t.attention(v[0], 2));
    run("attention_1head", &[&[4, 6]], 1.5, |t, v| t.attention(v[0], 1));
}

#[test]
fn embedding_lookup() {
    run("embedding", &[&[5, 3]], 1.0, |t, v| t.embedding(v[0], &[4, 0, 4, 2]));
}

#[test]
fn losses() {
    run("cross_entropy_soft", &[&[3, 4]], 2.0, |t, v| {
        let targets = [
            0.25, 0.25, 0.5, 0.0, //
            1.0, 0.0, 0.0, 0.0, //
            0.0, 0.1, 0.2, 0.7,
        ];
        t.cross_entropy(v[0], &targets)
    });
    run("bce", &[&[2, 5]], 3.0, |t, v| {
        let targets = [0.0, 1.0, 1.0, 0.0, 0.5, 1.0, 0.0, 0.0, 1.0, 1.0];
        t.bce_with_logits(v[0], &targets)
    });
}

#[test]
fn token_axis_concat_and_slice() {
    run("concat_rows", &[&[1, 4], &[3, 4]], 1.0, |t, v| {
        t.concat_rows(&[v[0], v[1]])
    });
    run("slice_rows", &[&[5, 3]], 1.0, |t, v| t.slice_rows(v[0], 1, 3));
}

#[test]
fn layout_ops() {
    run("transpose", &[&[3, 4]], 1.0, |t, v| t.transpose(v[0]));
    run("reshape", &[&[3, 4]], 1.0, |t, v| t.reshape(v[0], vec![2, 6]));
    run("gather", &[&[6]], 1.0, |t, v| {
        t.gather(v[0], vec![5, 0, 0, 3, 2, 1, 4, 5], vec![2, 4])
    });
    run("mean", &[&[3, 4]], 1.0, |t, v| Ok(t.mean(v[0])));
}

#[test]
fn l2_normalize() {
    run("l2_normalize_rows", &[&[3, 4]], 1.0, |t, v| t.l2_normalize_rows(v[0]));
}

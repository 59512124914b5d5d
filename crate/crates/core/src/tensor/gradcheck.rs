//! Central finite-difference checks for tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::Result;

/// Worst disagreement found by a check.
#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    pub worst: Option<(String, usize, f64, f64)>,
}

impl GradCheckReport {
    fn record(&mut self, name: &str, idx: usize, analytic: f64, numeric: f64, floor: f64) {
        let rel = relative_error(analytic, numeric, floor);
        self.checked += 1;
        if rel > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = self.max_rel_error.max(rel);
            self.worst = Some((name.to_string(), idx, analytic, numeric));
        }
    }
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Default denominator floor: gradients smaller than this are compared on
/// an absolute scale.
pub const REL_FLOOR: f64 = 1e-3;

fn pick(len: usize, max: usize, seed: u64) -> Vec<usize> {
    if len <= max {
        (0..len).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v = sample(&mut rng, len, max).into_vec();
        v.sort_unstable();
        v
    }
}

/// Checks gradients of a scalar function of free input tensors.
pub fn check_inputs<F>(inputs: &[Tensor], eps: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'_>, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor], grad: bool| -> Result<(f64, Vec<Vec<f64>>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals
            .iter()
            .map(|t| tape.leaf(t.shape().to_vec(), t.data().to_vec(), grad))
            .collect::<Result<_>>()?;
        let loss = f(&mut tape, &vars)?;
        let value = tape.value(loss)[0];
        let mut out = Vec::new();
        if grad {
            let g = tape.backward(loss)?;
            for (v, t) in vars.iter().zip(vals) {
                out.push(g.get_or_zeros(*v, t.numel()));
            }
        }
        Ok((value, out))
    };
    let (_, analytic) = eval(inputs, true)?;
    let mut report = GradCheckReport::default();
    let mut work = inputs.to_vec();
    for (ti, t) in inputs.iter().enumerate() {
        for k in 0..t.numel() {
            let orig = t.data()[k];
            work[ti].data_mut()[k] = orig + eps;
            let (fp, _) = eval(&work, false)?;
            work[ti].data_mut()[k] = orig - eps;
            let (fm, _) = eval(&work, false)?;
            work[ti].data_mut()[k] = orig;
            let numeric = (fp - fm) / (2.0 * eps);
            report.record(&format!("input{ti}"), k, analytic[ti][k], numeric, REL_FLOOR);
        }
    }
    Ok(report)
}

/// Checks gradients with respect to parameters of a store.
///
/// At most `max_per_param` entries of each parameter are probed, chosen
/// deterministically from `seed`.
pub fn check_params<F>(
    store: &ParamStore,
    ids: &[ParamId],
    eps: f64,
    max_per_param: usize,
    seed: u64,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'_>) -> Result<Var>,
{
    let analytic: Vec<Vec<f64>> = {
        let mut tape = Tape::with_params(store);
        let loss = f(&mut tape)?;
        let g = tape.backward(loss)?;
        ids.iter()
            .map(|&id| {
                let n = store.get(id).numel();
                tape.bound_param(id)
                    .map_or_else(|| vec![0.0; n], |v| g.get_or_zeros(v, n))
            })
            .collect()
    };
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut tape = Tape::with_params(s);
        let loss = f(&mut tape)?;
        Ok(tape.value(loss)[0])
    };
    let mut report = GradCheckReport::default();
    let mut work = store.clone();
    for (pi, &id) in ids.iter().enumerate() {
        let n = store.get(id).numel();
        for k in pick(n, max_per_param, seed ^ (pi as u64).wrapping_mul(0x9E37_79B9)) {
            let orig = store.get(id).data()[k];
            work.get_mut(id).data_mut()[k] = orig + eps;
            let fp = eval(&work)?;
            work.get_mut(id).data_mut()[k] = orig - eps;
            let fm = eval(&work)?;
            work.get_mut(id).data_mut()[k] = orig;
            let numeric = (fp - fm) / (2.0 * eps);
            report.record(store.name(id), k, analytic[pi][k], numeric, REL_FLOOR);
        }
    }
    Ok(report)
}

/// One primitive under test: random inputs of `shapes` scaled by `scale`.
pub struct PrimitiveCase {
    pub name: &'static str,
    pub shapes: &'static [&'static [usize]],
    pub scale: f64,
    pub f: fn(&mut Tape<'_>, &[Var]) -> Result<Var>,
}

const SOFT_TARGETS: [f64; 12] = [0.25, 0.25, 0.5, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.1, 0.2, 0.7];
const BCE_TARGETS: [f64; 10] = [0.0, 1.0, 1.0, 0.0, 0.5, 1.0, 0.0, 0.0, 1.0, 1.0];

/// Every differentiable primitive of the tape.
#[rustfmt::skip]
pub const PRIMITIVES: &[PrimitiveCase] = &[
    PrimitiveCase { name: "matmul", shapes: &[&[4, 5], &[5, 3]], scale: 1.0, f: |t, v| t.matmul(v[0], v[1]) },
    PrimitiveCase { name: "linear", shapes: &[&[3, 4], &[4, 5], &[5]], scale: 1.0, f: |t, v| t.linear(v[0], v[1], Some(v[2])) },
    PrimitiveCase { name: "add", shapes: &[&[3, 4], &[3, 4]], scale: 1.0, f: |t, v| t.add(v[0], v[1]) },
    PrimitiveCase { name: "sub", shapes: &[&[3, 4], &[3, 4]], scale: 1.0, f: |t, v| t.sub(v[0], v[1]) },
    PrimitiveCase { name: "mul", shapes: &[&[3, 4], &[3, 4]], scale: 1.0, f: |t, v| t.mul(v[0], v[1]) },
    PrimitiveCase { name: "scale", shapes: &[&[5]], scale: 1.0, f: |t, v| Ok(t.scale(v[0], -2.5)) },
    PrimitiveCase { name: "add_bias", shapes: &[&[3, 4], &[4]], scale: 1.0, f: |t, v| t.add_bias(v[0], v[1]) },
    PrimitiveCase { name: "scale_cols", shapes: &[&[3, 4], &[4]], scale: 1.0, f: |t, v| t.scale_cols(v[0], v[1]) },
    PrimitiveCase { name: "scale_rows", shapes: &[&[3, 4], &[3]], scale: 1.0, f: |t, v| t.scale_rows(v[0], v[1]) },
    PrimitiveCase { name: "gelu", shapes: &[&[4, 3]], scale: 2.0, f: |t, v| Ok(t.gelu(v[0])) },
    PrimitiveCase { name: "sigmoid", shapes: &[&[4, 3]], scale: 3.0, f: |t, v| Ok(t.sigmoid(v[0])) },
    PrimitiveCase { name: "softmax", shapes: &[&[2, 3, 4]], scale: 2.0, f: |t, v| t.softmax(v[0], 1) },
    PrimitiveCase { name: "layer_norm", shapes: &[&[3, 6], &[6], &[6]], scale: 1.0, f: |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5) },
    PrimitiveCase { name: "attention", shapes: &[&[5, 12]], scale: 1.0, f: |t, v| t.attention(v[0], 2) },
    PrimitiveCase { name: "embedding", shapes: &[&[5, 3]], scale: 1.0, f: |t, v| t.embedding(v[0], &[4, 0, 4, 2]) },
    PrimitiveCase { name: "cross_entropy", shapes: &[&[3, 4]], scale: 2.0, f: |t, v| t.cross_entropy(v[0], &SOFT_TARGETS) },
    PrimitiveCase { name: "cross_entropy_hard", shapes: &[&[3, 4]], scale: 2.0, f: |t, v| t.cross_entropy_hard(v[0], &[2, 0, 3]) },
    PrimitiveCase { name: "bce_with_logits", shapes: &[&[2, 5]], scale: 3.0, f: |t, v| t.bce_with_logits(v[0], &BCE_TARGETS) },
    PrimitiveCase { name: "concat_rows", shapes: &[&[1, 4], &[3, 4]], scale: 1.0, f: |t, v| t.concat_rows(&[v[0], v[1]]) },
    PrimitiveCase { name: "slice_rows", shapes: &[&[5, 3]], scale: 1.0, f: |t, v| t.slice_rows(v[0], 1, 3) },
    PrimitiveCase { name: "transpose", shapes: &[&[3, 4]], scale: 1.0, f: |t, v| t.transpose(v[0]) },
    PrimitiveCase { name: "reshape", shapes: &[&[3, 4]], scale: 1.0, f: |t, v| t.reshape(v[0], vec![2, 6]) },
    PrimitiveCase { name: "gather", shapes: &[&[6]], scale: 1.0, f: |t, v| t.gather(v[0], vec![5, 0, 0, 3, 2, 1, 4, 5], vec![2, 4]) },
    PrimitiveCase { name: "sum", shapes: &[&[3, 4]], scale: 1.0, f: |t, v| Ok(t.sum(v[0])) },
    PrimitiveCase { name: "mean", shapes: &[&[3, 4]], scale: 1.0, f: |t, v| Ok(t.mean(v[0])) },
    PrimitiveCase { name: "l2_normalize_rows", shapes: &[&[3, 4]], scale: 1.0, f: |t, v| t.l2_normalize_rows(v[0]) },
];

/// Checks one primitive on seeded uniform inputs, reducing its output with
/// fixed distinct weights so every element carries its own upstream
/// gradient.
pub fn check_primitive(case: &PrimitiveCase, seed: u64, eps: f64) -> Result<GradCheckReport> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(7919) ^ case.name.len() as u64);
    let inputs: Vec<Tensor> = case
        .shapes
        .iter()
        .map(|s| Tensor::from_fn(s.to_vec(), |_| rng.random_range(-1.0..1.0) * case.scale))
        .collect::<Result<_>>()?;
    check_inputs(&inputs, eps, |t, v| {
        let y = (case.f)(t, v)?;
        let shape = t.shape(y).to_vec();
        let n = t.value(y).len();
        let w: Vec<f64> = (0..n).map(|i| ((i * 37 % 17) as f64 - 8.0) / 8.0).collect();
        let w = t.constant(shape, w)?;
        let p = t.mul(y, w)?;
        Ok(t.sum(p))
    })
}

//! Parameterized layers shared by the encoders and the decoder.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

pub(crate) const LN_EPS: f64 = 1e-5;

pub(crate) fn normal_tensor(rng: &mut impl Rng, shape: Vec<usize>, std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("std is finite and positive");
    Tensor::from_fn(shape, |_| dist.sample(rng)).expect("shape is valid")
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
        let w = store.add(format!("{name}.w"), normal_tensor(rng, vec![fan_in, fan_out], std));
        let b = store.add(format!("{name}.b"), Tensor::zeros(vec![fan_out]).unwrap());
        Self { w, b, fan_in, fan_out }
    }

    /// Square projection initialized to `scale · I + noise`.
    pub fn near_identity(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        scale: f64,
        noise: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let mut w = normal_tensor(rng, vec![dim, dim], noise);
        for i in 0..dim {
            w.data_mut()[i * dim + i] += scale;
        }
        let w = store.add(format!("{name}.w"), w);
        let b = store.add(format!("{name}.b"), Tensor::zeros(vec![dim]).unwrap());
        Self {
            w,
            b,
            fan_in: dim,
            fan_out: dim,
        }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let w = tape.param(self.w);
        let b = tape.param(self.b);
        tape.linear(x, w, Some(b))
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gamma = store.add(format!("{name}.g"), Tensor::new(vec![dim], vec![1.0; dim]).unwrap());
        let beta = store.add(format!("{name}.b"), Tensor::zeros(vec![dim]).unwrap());
        Self { gamma, beta }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let g = tape.param(self.gamma);
        let b = tape.param(self.beta);
        tape.layer_norm(x, g, b, LN_EPS)
    }
}

/// Pre-norm transformer block: `x + Attn(LN(x))`, then `x + MLP(LN(x))`
/// with a GELU MLP.
#[derive(Clone, Debug)]
pub struct Block {
    pub ln1: LayerNorm,
    pub qkv: Linear,
    pub proj: Linear,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub heads: usize,
}

/// Output of one block plus the attention node holding its probabilities.
#[derive(Clone, Copy, Debug)]
pub struct BlockOutput {
    pub out: Var,
    pub attention: Var,
}

impl Block {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        heads: usize,
        mlp_ratio: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), width),
            qkv: Linear::new(store, &format!("{name}.qkv"), width, 3 * width, rng),
            proj: Linear::new(store, &format!("{name}.proj"), width, width, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), width),
            fc1: Linear::new(store, &format!("{name}.fc1"), width, mlp_ratio * width, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), mlp_ratio * width, width, rng),
            heads,
        }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<BlockOutput> {
        let h = self.ln1.forward(tape, x)?;
        let qkv = self.qkv.forward(tape, h)?;
        let attention = tape.attention(qkv, self.heads)?;
        let a = self.proj.forward(tape, attention)?;
        let x = tape.add(x, a)?;
        let h = self.ln2.forward(tape, x)?;
        let h = self.fc1.forward(tape, h)?;
        let h = tape.gelu(h);
        let h = self.fc2.forward(tape, h)?;
        let out = tape.add(x, h)?;
        Ok(BlockOutput { out, attention })
    }
}

//! Lightweight transformer decoder from patch tokens to a pixel logit map.

use rand::Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::nn::{Block, LayerNorm, Linear};
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

/// Per-pixel logits for one (image, category) query.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskLogits {
    /// `[H × W]`
    pub logits: Tensor,
    pub threshold: f64,
}

impl MaskLogits {
    pub fn binarize(&self) -> Mask {
        let (h, w) = (self.logits.shape()[0], self.logits.shape()[1]);
        let bits = self.logits.data().iter().map(|&l| l > self.threshold).collect();
        Mask::from_bits(w, h, bits).expect("logit map is H×W")
    }
}

pub fn binarize(logits: &MaskLogits) -> Mask {
    logits.binarize()
}

/// Flat source index into a `[m × p²]` head output for each pixel of the
/// `S × S` map.
pub fn pixel_shuffle_index(grid: usize, patch: usize) -> Vec<usize> {
    let s = grid * patch;
    (0..s * s)
        .map(|i| {
            let (y, x) = (i / s, i % s);
            let token = (y / patch) * grid + x / patch;
            token * patch * patch + (y % patch) * patch + x % patch
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub layers: Vec<Block>,
    pub ln: LayerNorm,
    pub head: Linear,
    /// Positional table shared with the visual encoder.
    pub position: ParamId,
    tokens: usize,
    width: usize,
    grid: usize,
    patch: usize,
    shuffle: Vec<usize>,
}

impl Decoder {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, position: ParamId, rng: &mut impl Rng) -> Self {
        let v = &cfg.visual;
        let d = v.width;
        let layers = (0..cfg.decoder.n_layers)
            .map(|i| {
                Block::new(
                    store,
                    &format!("decoder.layers.{i}"),
                    d,
                    cfg.decoder.n_heads,
                    v.mlp_ratio,
                    rng,
                )
            })
            .collect();
        let ln = LayerNorm::new(store, "decoder.ln", d);
        let head = Linear::new(store, "decoder.head", d, v.patch_size * v.patch_size, rng);
        Self {
            layers,
            ln,
            head,
            position,
            tokens: v.tokens(),
            width: d,
            grid: v.grid(),
            patch: v.patch_size,
            shuffle: pixel_shuffle_index(v.grid(), v.patch_size),
        }
    }

    /// `[S × S]` logit map from `E_N`.
    pub fn decode(&self, tape: &mut Tape<'_>, e_n: Var) -> Result<Var> {
        let pos = tape.param(self.position);
        self.decode_with_positions(tape, e_n, pos)
    }

    pub fn decode_with_positions(&self, tape: &mut Tape<'_>, e_n: Var, pos: Var) -> Result<Var> {
        if tape.shape(e_n) != [self.tokens, self.width] {
            return Err(Error::ShapeMismatch {
                op: "decode_mask",
                lhs: tape.shape(e_n).to_vec(),
                rhs: vec![self.tokens, self.width],
            });
        }
        let mut x = tape.add(e_n, pos)?;
        for layer in &self.layers {
            x = layer.forward(tape, x)?.out;
        }
        let x = self.ln.forward(tape, x)?;
        let h = self.head.forward(tape, x)?;
        let s = self.grid * self.patch;
        tape.gather(h, self.shuffle.clone(), vec![s, s])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shuffle_index_is_a_permutation() {
        let mut idx = pixel_shuffle_index(4, 8);
        assert_eq!(idx.len(), 32 * 32);
        idx.sort_unstable();
        assert!(idx.iter().enumerate().all(|(i, &v)| i == v));
        // pixel (x=9, y=1) is token 1, in-patch offset (1, 1)
        assert_eq!(pixel_shuffle_index(4, 8)[32 + 9], 64 + 8 + 1);
    }

    #[test]
    fn binarize_threshold() {
        let t = |v: f64, th: f64| MaskLogits {
            logits: Tensor::new(vec![2, 2], vec![v; 4]).unwrap(),
            threshold: th,
        };
        assert!(t(-1.0, 0.0).binarize().is_empty());
        assert_eq!(t(1.0, 0.0).binarize().count(), 4);
        let l = MaskLogits {
            logits: Tensor::new(vec![1, 4], vec![-0.5, 0.05, 0.1, 0.3]).unwrap(),
            threshold: 0.0,
        };
        let shifted = MaskLogits {
            threshold: 0.1,
            ..l.clone()
        };
        // exactly the logits in (0, 0.1] flip
        assert_eq!(l.binarize().count() - shifted.binarize().count(), 2);
    }
}

//! Vision transformer with one-way text [CLS] navigation and the baseline
//! conditioning mechanisms.

use std::collections::BTreeMap;

use rand::Rng;

use crate::config::{Mechanism, ModelConfig, VisualConfig};
use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::nn::{normal_tensor, Block, LayerNorm, Linear};
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

/// Rearranges a `[3 × S × S]` image into a `[m × 3p²]` patch matrix.
///
/// Patches are row-major over the grid; features within a patch are ordered
/// channel, row, column.
pub fn patch_matrix(image: &Tensor, cfg: &VisualConfig) -> Result<Vec<f64>> {
    let s = cfg.image_size;
    if image.shape() != [3, s, s] {
        return Err(Error::InvalidShape(format!(
            "expected a [3, {s}, {s}] image, got {:?}",
            image.shape()
        )));
    }
    let p = cfg.patch_size;
    let g = cfg.grid();
    let px = image.data();
    let mut out = Vec::with_capacity(s * s * 3);
    for gy in 0..g {
        for gx in 0..g {
            for c in 0..3 {
                for y in 0..p {
                    let row = (c * s + gy * p + y) * s + gx * p;
                    out.extend_from_slice(&px[row..row + p]);
                }
            }
        }
    }
    Ok(out)
}

/// Token state between layers.
#[derive(Clone, Copy, Debug)]
pub struct VisualState {
    /// `[1 × d]`
    pub cls: Var,
    /// `[m × d]`
    pub patches: Var,
}

/// Encoder activations kept for detached replay of the frozen prefix.
#[derive(Clone, Debug, PartialEq)]
pub struct PrefixCache {
    /// Index of the first layer still to run.
    pub layer: usize,
    pub cls: Vec<f64>,
    pub patches: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct EncoderOutput {
    /// `E_N`, `[m × d]`.
    pub patches: Var,
    /// Final [CLS] state, `[1 × d]`.
    pub cls: Var,
    /// Index of the first layer run on this tape.
    pub first_layer: usize,
    /// Attention node of each layer run, in order.
    pub attention: Vec<Var>,
    /// [CLS] slot input of each layer run, `[1 × d]`.
    pub cls_inputs: Vec<Var>,
    /// Full token output of each layer run, `[(1 + P + m) × d]`.
    pub layer_outputs: Vec<Var>,
    /// Prompt tokens per layer (deep VPT), zero otherwise.
    pub prompt_count: usize,
}

impl EncoderOutput {
    /// Attention probabilities `(probs, heads, tokens)` of absolute layer `layer`.
    pub fn attention_at<'t>(&self, tape: &'t Tape<'_>, layer: usize) -> Option<(&'t [f64], usize, usize)> {
        let i = layer.checked_sub(self.first_layer)?;
        tape.attention_probs(*self.attention.get(i)?)
    }
}

#[derive(Clone, Debug)]
pub struct VisualEncoder {
    pub cfg: VisualConfig,
    pub patch: Linear,
    pub position: ParamId,
    pub cls: ParamId,
    pub layers: Vec<Block>,
    pub ln_post: LayerNorm,
    pub head: Linear,
}

impl VisualEncoder {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let v = &cfg.visual;
        let d = v.width;
        let patch = Linear::new(store, "visual.patch", v.patch_dim(), d, rng);
        let position = store.add("visual.pos", normal_tensor(rng, vec![v.tokens(), d], 0.1));
        let cls = store.add("visual.cls", normal_tensor(rng, vec![1, d], 0.1));
        let layers = (0..v.n_layers)
            .map(|i| Block::new(store, &format!("visual.layers.{i}"), d, v.n_heads, v.mlp_ratio, rng))
            .collect();
        let ln_post = LayerNorm::new(store, "visual.ln_post", d);
        let head = Linear::new(store, "visual.head", d, cfg.embed_dim(), rng);
        Self {
            cfg: v.clone(),
            patch,
            position,
            cls,
            layers,
            ln_post,
            head,
        }
    }

    /// Linear patch embedding plus learned positions, `[m × d]`.
    pub fn patchify(&self, tape: &mut Tape<'_>, image: &Tensor) -> Result<Var> {
        let x = self.embed_patches(tape, image)?;
        let pos = tape.param(self.position);
        tape.add(x, pos)
    }

    /// Patch embedding without the positional term.
    pub fn embed_patches(&self, tape: &mut Tape<'_>, image: &Tensor) -> Result<Var> {
        let rows = patch_matrix(image, &self.cfg)?;
        let x = tape.constant(vec![self.cfg.tokens(), self.cfg.patch_dim()], rows)?;
        self.patch.forward(tape, x)
    }

    /// Layer-0 input state.
    pub fn initial_state(&self, tape: &mut Tape<'_>, image: &Tensor) -> Result<VisualState> {
        let patches = self.patchify(tape, image)?;
        let cls = tape.param(self.cls);
        Ok(VisualState { cls, patches })
    }

    pub fn encode(
        &self,
        tape: &mut Tape<'_>,
        image: &Tensor,
        mech: &MechanismParams,
        text_cls: Option<Var>,
    ) -> Result<EncoderOutput> {
        let state = self.initial_state(tape, image)?;
        self.encode_from(tape, state, 0, mech, text_cls)
    }

    /// Runs layers `start..N` from `state`.
    pub fn encode_from(
        &self,
        tape: &mut Tape<'_>,
        mut state: VisualState,
        start: usize,
        mech: &MechanismParams,
        text_cls: Option<Var>,
    ) -> Result<EncoderOutput> {
        if start > self.layers.len() {
            return Err(Error::Config(format!(
                "start layer {start} beyond {} layers",
                self.layers.len()
            )));
        }
        let projections = mech.projections();
        if let Some((&first, _)) = projections.range(start..).next() {
            if text_cls.is_none() {
                return Err(Error::MissingTextCls(mech.kind().as_str()));
            }
            if first >= self.layers.len() {
                return Err(Error::Config(format!("replace layer {first} out of range")));
            }
        }
        let prompt_count = mech.prompt_count();
        let m = self.cfg.tokens();
        let mut out = EncoderOutput {
            patches: state.patches,
            cls: state.cls,
            first_layer: start,
            attention: Vec::new(),
            cls_inputs: Vec::new(),
            layer_outputs: Vec::new(),
            prompt_count,
        };
        for (i, layer) in self.layers.iter().enumerate().skip(start) {
            let cls_in = match (projections.get(&i), text_cls) {
                (Some(proj), Some(t)) => proj.forward(tape, t)?,
                _ => state.cls,
            };
            let x = match mech.prompts(i) {
                Some(id) => {
                    let p = tape.param(id);
                    tape.concat_rows(&[cls_in, p, state.patches])?
                }
                None => tape.concat_rows(&[cls_in, state.patches])?,
            };
            let b = layer.forward(tape, x)?;
            out.cls_inputs.push(cls_in);
            out.attention.push(b.attention);
            out.layer_outputs.push(b.out);
            state = VisualState {
                cls: tape.slice_rows(b.out, 0, 1)?,
                patches: tape.slice_rows(b.out, 1 + prompt_count, m)?,
            };
        }
        out.patches = state.patches;
        out.cls = state.cls;
        Ok(out)
    }

    /// Runs the mechanism-free prefix `0..upto` outside any training tape.
    pub fn prefix_cache(&self, store: &ParamStore, image: &Tensor, upto: usize) -> Result<PrefixCache> {
        let mut tape = Tape::with_params(store);
        let mut state = self.initial_state(&mut tape, image)?;
        for layer in self.layers.iter().take(upto) {
            let x = tape.concat_rows(&[state.cls, state.patches])?;
            let o = layer.forward(&mut tape, x)?.out;
            state = VisualState {
                cls: tape.slice_rows(o, 0, 1)?,
                patches: tape.slice_rows(o, 1, self.cfg.tokens())?,
            };
        }
        Ok(PrefixCache {
            layer: upto.min(self.layers.len()),
            cls: tape.value(state.cls).to_vec(),
            patches: tape.value(state.patches).to_vec(),
        })
    }

    /// Rebinds a cached prefix as constants on `tape`.
    pub fn restore(&self, tape: &mut Tape<'_>, cache: &PrefixCache) -> Result<VisualState> {
        let d = self.cfg.width;
        Ok(VisualState {
            cls: tape.constant(vec![1, d], cache.cls.clone())?,
            patches: tape.constant(vec![self.cfg.tokens(), d], cache.patches.clone())?,
        })
    }

    /// Unit-norm contrastive embedding of the final [CLS] state.
    pub fn embed_head(&self, tape: &mut Tape<'_>, cls_out: Var) -> Result<Var> {
        let h = self.ln_post.forward(tape, cls_out)?;
        let y = self.head.forward(tape, h)?;
        tape.l2_normalize_rows(y)
    }
}

/// Parameters specific to the configured conditioning mechanism.
#[derive(Clone, Debug)]
pub enum MechanismParams {
    /// One projection `L^i` per replaced layer.
    ReplaceCls(BTreeMap<usize, Linear>),
    ChannelAttention(Linear),
    SpatialAttention(Linear),
    /// Deep prompts, one `[count × d]` block per layer.
    Vpt {
        prompts: Vec<ParamId>,
        count: usize,
    },
    None,
}

static NO_PROJECTIONS: BTreeMap<usize, Linear> = BTreeMap::new();

impl MechanismParams {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let v = &cfg.visual;
        let d = v.width;
        match v.mechanism {
            Mechanism::ReplaceCls => MechanismParams::ReplaceCls(
                v.replace_layers
                    .iter()
                    .map(|&i| {
                        let l = Linear::near_identity(store, &format!("nav.proj.{i}"), d, 1.0, 0.02, rng);
                        (i, l)
                    })
                    .collect(),
            ),
            Mechanism::ChannelAttention => {
                MechanismParams::ChannelAttention(Linear::new(store, "mech.channel", d, d, rng))
            }
            Mechanism::SpatialAttention => {
                MechanismParams::SpatialAttention(Linear::new(store, "mech.spatial", d, d, rng))
            }
            Mechanism::Vpt => MechanismParams::Vpt {
                prompts: (0..v.n_layers)
                    .filter(|_| v.vpt_prompt_count > 0)
                    .map(|i| {
                        store.add(
                            format!("mech.vpt.{i}"),
                            normal_tensor(rng, vec![v.vpt_prompt_count, d], 0.1),
                        )
                    })
                    .collect(),
                count: v.vpt_prompt_count,
            },
            Mechanism::None => MechanismParams::None,
        }
    }

    pub fn kind(&self) -> Mechanism {
        match self {
            MechanismParams::ReplaceCls(_) => Mechanism::ReplaceCls,
            MechanismParams::ChannelAttention(_) => Mechanism::ChannelAttention,
            MechanismParams::SpatialAttention(_) => Mechanism::SpatialAttention,
            MechanismParams::Vpt { .. } => Mechanism::Vpt,
            MechanismParams::None => Mechanism::None,
        }
    }

    pub fn projections(&self) -> &BTreeMap<usize, Linear> {
        match self {
            MechanismParams::ReplaceCls(p) => p,
            _ => &NO_PROJECTIONS,
        }
    }

    fn prompts(&self, layer: usize) -> Option<ParamId> {
        match self {
            MechanismParams::Vpt { prompts, .. } => prompts.get(layer).copied(),
            _ => None,
        }
    }

    /// Prompt tokens inserted at every layer.
    pub fn prompt_count(&self) -> usize {
        match self {
            MechanismParams::Vpt { count, .. } => *count,
            _ => 0,
        }
    }

    /// Number of leading encoder layers that do not depend on any
    /// mechanism parameter or text input.
    pub fn frozen_prefix(&self, n_layers: usize) -> usize {
        match self {
            MechanismParams::ReplaceCls(p) => p.keys().next().copied().unwrap_or(n_layers),
            MechanismParams::Vpt { .. } => 0,
            _ => n_layers,
        }
    }

    /// Post-encoder conditioning of `E_N` (channel and spatial baselines).
    pub fn apply_post(&self, tape: &mut Tape<'_>, e_n: Var, text_cls: Option<Var>) -> Result<Var> {
        match self {
            MechanismParams::ChannelAttention(l) => {
                let t = text_cls.ok_or(Error::MissingTextCls("channel_attention"))?;
                channel_attention(tape, e_n, t, l)
            }
            MechanismParams::SpatialAttention(l) => {
                let t = text_cls.ok_or(Error::MissingTextCls("spatial_attention"))?;
                spatial_attention(tape, e_n, t, l)
            }
            _ => Ok(e_n),
        }
    }
}

/// `E_N ⊙ sigmoid(linear(T))`, gate broadcast over tokens.
pub fn channel_attention(tape: &mut Tape<'_>, e_n: Var, text_cls: Var, gate: &Linear) -> Result<Var> {
    let g = gate.forward(tape, text_cls)?;
    let g = tape.sigmoid(g);
    let d = gate.fan_out;
    let g = tape.reshape(g, vec![d])?;
    tape.scale_cols(e_n, g)
}

/// Each token scaled by `m · softmax_m(E_N · linear(T) / √d)`.
pub fn spatial_attention(tape: &mut Tape<'_>, e_n: Var, text_cls: Var, query: &Linear) -> Result<Var> {
    let d = query.fan_out;
    let m = tape.shape(e_n)[0];
    let q = query.forward(tape, text_cls)?;
    let q = tape.reshape(q, vec![d, 1])?;
    let s = tape.matmul(e_n, q)?;
    let s = tape.scale(s, 1.0 / (d as f64).sqrt());
    let s = tape.reshape(s, vec![m])?;
    let w = tape.softmax(s, 0)?;
    let w = tape.scale(w, m as f64);
    tape.scale_rows(e_n, w)
}

/// Patches whose mask coverage exceeds one half.
pub fn mask_patches(mask: &Mask, cfg: &VisualConfig) -> Result<Vec<bool>> {
    let s = cfg.image_size;
    if mask.width() != s || mask.height() != s {
        return Err(Error::InvalidShape(format!(
            "mask {}x{} does not match image size {s}",
            mask.width(),
            mask.height()
        )));
    }
    let p = cfg.patch_size;
    let g = cfg.grid();
    Ok((0..g * g)
        .map(|j| {
            let (gy, gx) = (j / g, j % g);
            let mut c = 0;
            for y in gy * p..(gy + 1) * p {
                for x in gx * p..(gx + 1) * p {
                    c += usize::from(mask.get(x, y));
                }
            }
            2 * c > p * p
        })
        .collect())
}

/// Head-averaged share of the [CLS] row's patch attention that lands on
/// patches covered by `mask`. Prompt columns are excluded and the row is
/// renormalized over patch columns.
pub fn attention_mass_in_mask(
    probs: &[f64],
    heads: usize,
    tokens: usize,
    prompt_count: usize,
    mask: &Mask,
    cfg: &VisualConfig,
) -> Result<f64> {
    let m = cfg.tokens();
    if probs.len() != heads * tokens * tokens || tokens != 1 + prompt_count + m {
        return Err(Error::InvalidShape(format!(
            "attention of {} values for {heads} heads, {tokens} tokens, {m} patches",
            probs.len()
        )));
    }
    let inside = mask_patches(mask, cfg)?;
    if !inside.iter().any(|&b| b) {
        return Err(Error::EmptyMask);
    }
    let off = 1 + prompt_count;
    let mut total = 0.0;
    for h in 0..heads {
        let row = &probs[h * tokens * tokens..h * tokens * tokens + tokens];
        let patches = &row[off..];
        let all: f64 = patches.iter().sum();
        let hit: f64 = patches.iter().zip(&inside).filter(|(_, &b)| b).map(|(p, _)| p).sum();
        total += if all > 0.0 { hit / all } else { 0.0 };
    }
    Ok(total / heads as f64)
}

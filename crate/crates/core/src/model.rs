//! The full dual-encoder segmentation model.

use crate::checkpoint::Checkpoint;
use crate::config::ModelConfig;
use crate::decoder::{Decoder, MaskLogits};
use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::rng::rng_for;
use crate::tensor::{ParamStore, Tape, Tensor, Var};
use crate::text::{TextCls, TextEncoder, Vocabulary};
use crate::visual::{EncoderOutput, MechanismParams, PrefixCache, VisualEncoder};

/// Parameter-name prefixes trained in the contrastive stage.
pub const PRETRAIN_PREFIXES: [&str; 2] = ["text.", "visual."];
/// Parameter-name prefixes trained in the segmentation stage.
pub const SEGMENT_PREFIXES: [&str; 3] = ["nav.", "mech.", "decoder."];

pub fn is_pretrain_param(name: &str) -> bool {
    PRETRAIN_PREFIXES.iter().any(|p| name.starts_with(p))
}

pub fn is_segment_param(name: &str) -> bool {
    SEGMENT_PREFIXES.iter().any(|p| name.starts_with(p))
}

#[derive(Clone, Debug)]
pub struct ClsClip {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub store: ParamStore,
    pub text: TextEncoder,
    pub visual: VisualEncoder,
    pub mechanism: MechanismParams,
    pub decoder: Decoder,
}

/// Segmentation forward on a tape.
#[derive(Clone, Debug)]
pub struct SegForward {
    /// `[S × S]` pixel logits.
    pub logits: Var,
    /// Decoder input after any post-encoder mechanism.
    pub features: Var,
    pub encoder: EncoderOutput,
}

impl ClsClip {
    /// Builds a freshly initialized model. Each component draws from its own
    /// seed stream, so e.g. decoder init does not depend on the mechanism.
    pub fn new(config: ModelConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let text = TextEncoder::new(&mut store, &config, vocab.len(), &mut rng_for(seed, "init.text", 0));
        let visual = VisualEncoder::new(&mut store, &config, &mut rng_for(seed, "init.visual", 0));
        let decoder = Decoder::new(
            &mut store,
            &config,
            visual.position,
            &mut rng_for(seed, "init.decoder", 0),
        );
        let mechanism = MechanismParams::new(&mut store, &config, &mut rng_for(seed, "init.mechanism", 0));
        Ok(Self {
            config,
            vocab,
            store,
            text,
            visual,
            mechanism,
            decoder,
        })
    }

    /// Rebuilds a model from a checkpoint holding every parameter.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let vocab = Vocabulary::new(&ck.manifest.vocabulary)?;
        let mut model = Self::new(ck.manifest.model.clone(), vocab, 0)?;
        if ck.tensors.len() != model.store.len() {
            return Err(Error::Config(format!(
                "checkpoint holds {} of {} model tensors",
                ck.tensors.len(),
                model.store.len()
            )));
        }
        ck.apply(&mut model.store)?;
        Ok(model)
    }

    pub fn text_ids(&self, category: usize) -> Result<Vec<usize>> {
        self.vocab.tokens(category, self.config.text.prompt_template)
    }

    /// Category [CLS] token evaluated outside any training tape.
    pub fn text_cls(&self, category: usize) -> Result<TextCls> {
        let ids = self.text_ids(category)?;
        self.text.encode_text(&self.store, &ids, category)
    }

    /// Binds a precomputed text token as a tape constant.
    pub fn bind_text(&self, tape: &mut Tape<'_>, text: &TextCls) -> Result<Var> {
        tape.constant(vec![1, text.vector.len()], text.vector.clone())
    }

    pub fn forward(&self, tape: &mut Tape<'_>, image: &Tensor, text_cls: Option<Var>) -> Result<SegForward> {
        let encoder = self.visual.encode(tape, image, &self.mechanism, text_cls)?;
        self.finish(tape, encoder, text_cls)
    }

    /// Forward resuming from a cached frozen prefix.
    pub fn forward_cached(
        &self,
        tape: &mut Tape<'_>,
        cache: &PrefixCache,
        text_cls: Option<Var>,
    ) -> Result<SegForward> {
        let state = self.visual.restore(tape, cache)?;
        let encoder = self
            .visual
            .encode_from(tape, state, cache.layer, &self.mechanism, text_cls)?;
        self.finish(tape, encoder, text_cls)
    }

    fn finish(&self, tape: &mut Tape<'_>, encoder: EncoderOutput, text_cls: Option<Var>) -> Result<SegForward> {
        let features = self.mechanism.apply_post(tape, encoder.patches, text_cls)?;
        let logits = self.decoder.decode(tape, features)?;
        Ok(SegForward {
            logits,
            features,
            encoder,
        })
    }

    /// Layers that can be precomputed once per image for segmentation training.
    pub fn frozen_prefix(&self) -> usize {
        self.mechanism.frozen_prefix(self.config.visual.n_layers)
    }

    pub fn prefix_cache(&self, image: &Tensor) -> Result<PrefixCache> {
        self.visual.prefix_cache(&self.store, image, self.frozen_prefix())
    }

    /// Pixel logits for `image` conditioned on `text`, if any.
    pub fn predict_with(&self, image: &Tensor, text: Option<&TextCls>) -> Result<MaskLogits> {
        let mut tape = Tape::with_params(&self.store);
        let t = text.map(|t| self.bind_text(&mut tape, t)).transpose()?;
        let f = self.forward(&mut tape, image, t)?;
        Ok(MaskLogits {
            logits: tape.to_tensor(f.logits),
            threshold: self.config.decoder.threshold,
        })
    }

    pub fn predict(&self, image: &Tensor, category: usize) -> Result<MaskLogits> {
        let t = self.text_cls(category)?;
        self.predict_with(image, Some(&t))
    }

    pub fn predict_mask(&self, image: &Tensor, category: usize) -> Result<Mask> {
        Ok(self.predict(image, category)?.binarize())
    }

    pub fn freeze_for_pretraining(&mut self) {
        self.store.set_trainable(is_pretrain_param);
    }

    pub fn freeze_for_segmentation(&mut self) {
        self.store.set_trainable(is_segment_param);
    }
}

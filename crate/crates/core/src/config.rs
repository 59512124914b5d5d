//! Architecture hyperparameters. Defaults are the desk-scale model.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How the text [CLS] token conditions the visual pathway.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(rename_all = "snake_case")]
pub enum Mechanism {
    /// Overwrite the visual [CLS] slot with a projected text [CLS] token at
    /// each layer of the replacement window.
    ReplaceCls,
    /// Per-channel sigmoid gate on the encoder output.
    ChannelAttention,
    /// Per-token softmax weighting of the encoder output.
    SpatialAttention,
    /// Deep visual prompt tuning; no text conditioning.
    Vpt,
    None,
}

impl Mechanism {
    pub const ALL: [Mechanism; 5] = [
        Mechanism::ReplaceCls,
        Mechanism::ChannelAttention,
        Mechanism::SpatialAttention,
        Mechanism::Vpt,
        Mechanism::None,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Mechanism::ReplaceCls => "replace_cls",
            Mechanism::ChannelAttention => "channel_attention",
            Mechanism::SpatialAttention => "spatial_attention",
            Mechanism::Vpt => "vpt",
            Mechanism::None => "none",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.as_str() == s)
    }

    /// Whether the mechanism consumes a text [CLS] token.
    pub fn uses_text(self) -> bool {
        matches!(
            self,
            Mechanism::ReplaceCls | Mechanism::ChannelAttention | Mechanism::SpatialAttention
        )
    }
}

impl fmt::Display for Mechanism {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Which text-encoder state is used as the category [CLS] token.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(rename_all = "snake_case")]
pub enum TextClsSource {
    /// Final-layer [CLS] state after the closing layer norm.
    PreProjection,
    /// Output of the contrastive projection head (before normalization).
    PostProjection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(deny_unknown_fields, default)]
pub struct VisualConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub n_layers: usize,
    pub width: usize,
    pub n_heads: usize,
    pub mlp_ratio: usize,
    /// Layers whose input [CLS] slot receives the projected text token.
    /// The contiguous window `[N1, N2)` is the usual case.
    pub replace_layers: Vec<usize>,
    pub mechanism: Mechanism,
    pub vpt_prompt_count: usize,
}

impl Default for VisualConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            patch_size: 8,
            n_layers: 12,
            width: 64,
            n_heads: 4,
            mlp_ratio: 4,
            replace_layers: vec![2, 3, 4],
            mechanism: Mechanism::ReplaceCls,
            vpt_prompt_count: 8,
        }
    }
}

impl VisualConfig {
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Patch token count `m`.
    pub fn tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }

    /// Replacement window from half-open layer bounds.
    pub fn window(n1: usize, n2: usize) -> Vec<usize> {
        (n1..n2).collect()
    }

    /// Layers that actually receive the text token under the configured
    /// mechanism.
    pub fn active_replace_layers(&self) -> &[usize] {
        if self.mechanism == Mechanism::ReplaceCls {
            &self.replace_layers
        } else {
            &[]
        }
    }

    /// Layer whose attention best shows the injected token's effect: the
    /// last replaced layer, or the last layer without a window.
    pub fn probe_layer(&self) -> usize {
        self.replace_layers.last().copied().unwrap_or(self.n_layers - 1)
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || self.image_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return err(format!(
                "image_size {} must be a positive multiple of patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.n_layers == 0 || self.n_heads == 0 || !self.width.is_multiple_of(self.n_heads) {
            return err(format!(
                "need n_layers > 0 and width {} divisible by n_heads {}",
                self.width, self.n_heads
            ));
        }
        if self.mlp_ratio == 0 {
            return err("mlp_ratio must be positive".into());
        }
        if self.replace_layers.windows(2).any(|w| w[0] >= w[1]) {
            return err(format!(
                "replace_layers must be strictly increasing, got {:?}",
                self.replace_layers
            ));
        }
        if let Some(&l) = self.replace_layers.iter().find(|&&l| l >= self.n_layers) {
            return err(format!("replace layer {l} out of range for {} layers", self.n_layers));
        }
        if self.mechanism == Mechanism::Vpt && self.vpt_prompt_count == 0 {
            return err("vpt requires vpt_prompt_count > 0".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(deny_unknown_fields, default)]
pub struct TextConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    /// Wrap each category word in the fixed "a photo of" template.
    pub prompt_template: bool,
    pub cls_source: TextClsSource,
}

impl Default for TextConfig {
    fn default() -> Self {
        Self {
            n_layers: 4,
            n_heads: 4,
            prompt_template: true,
            cls_source: TextClsSource::PreProjection,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub threshold: f64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            n_layers: 2,
            n_heads: 4,
            threshold: 0.0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub visual: VisualConfig,
    pub text: TextConfig,
    pub decoder: DecoderConfig,
}

impl ModelConfig {
    /// Width of the contrastive embedding space. Equal to the latent width
    /// so a post-projection text token can be injected directly.
    pub fn embed_dim(&self) -> usize {
        self.visual.width
    }

    /// Whether pretrained encoder weights of `self` fit `other`.
    pub fn backbone_matches(&self, other: &ModelConfig) -> bool {
        let (a, b) = (&self.visual, &other.visual);
        (a.image_size, a.patch_size, a.n_layers, a.width, a.n_heads, a.mlp_ratio)
            == (b.image_size, b.patch_size, b.n_layers, b.width, b.n_heads, b.mlp_ratio)
            && (self.text.n_layers, self.text.n_heads) == (other.text.n_layers, other.text.n_heads)
    }

    pub fn validate(&self) -> Result<()> {
        self.visual.validate()?;
        let w = self.visual.width;
        if self.text.n_layers == 0 || self.text.n_heads == 0 || !w.is_multiple_of(self.text.n_heads) {
            return Err(Error::Config(format!(
                "text encoder needs layers > 0 and width {w} divisible by {} heads",
                self.text.n_heads
            )));
        }
        if self.decoder.n_heads == 0 || !w.is_multiple_of(self.decoder.n_heads) {
            return Err(Error::Config(format!(
                "decoder width {w} not divisible by {} heads",
                self.decoder.n_heads
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_desk_model() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        assert_eq!(c.visual.tokens(), 16);
        assert_eq!(c.visual.replace_layers, VisualConfig::window(2, 5));
        assert_eq!(c.visual.probe_layer(), 4);
    }

    #[test]
    fn rejects_bad_geometry_and_window() {
        let mut v = VisualConfig {
            image_size: 30,
            ..Default::default()
        };
        assert!(v.validate().is_err());
        v.image_size = 32;
        v.replace_layers = vec![10, 12];
        assert!(v.validate().is_err());
        v.replace_layers = vec![4, 3];
        assert!(v.validate().is_err());
        v.replace_layers = vec![];
        v.mechanism = Mechanism::Vpt;
        v.vpt_prompt_count = 0;
        assert!(v.validate().is_err());
    }

    #[test]
    fn unknown_keys_rejected() {
        let r: std::result::Result<VisualConfig, _> = serde_json::from_str(r#"{"image_size": 32, "bogus": 1}"#);
        assert!(r.is_err());
        let m: Mechanism = serde_json::from_str(r#""channel_attention""#).unwrap();
        assert_eq!(m, Mechanism::ChannelAttention);
    }
}

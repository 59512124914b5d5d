//! Text encoder: category word to text [CLS] token.

use std::collections::HashMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::{ModelConfig, TextClsSource};
use crate::error::{Error, Result};
use crate::nn::{normal_tensor, Block, LayerNorm, Linear};
use crate::tensor::{ParamId, ParamStore, Tape, Var};

/// Fixed prompt words placed before the category word.
pub const TEMPLATE: [&str; 3] = ["a", "photo", "of"];

/// Closed vocabulary: category words first (ids `0..C`), then the template.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    words: Vec<String>,
    categories: usize,
    index: HashMap<String, usize>,
}

impl TryFrom<Vec<String>> for Vocabulary {
    type Error = Error;

    fn try_from(categories: Vec<String>) -> Result<Self> {
        Self::new(&categories)
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.words[..v.categories].to_vec()
    }
}

impl Vocabulary {
    pub fn new(categories: &[String]) -> Result<Self> {
        let words: Vec<String> = categories
            .iter()
            .cloned()
            .chain(TEMPLATE.iter().map(|s| s.to_string()))
            .collect();
        let mut index = HashMap::new();
        for (i, w) in words.iter().enumerate() {
            if index.insert(w.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary word {w:?}")));
            }
        }
        Ok(Self {
            words,
            categories: categories.len(),
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn category_count(&self) -> usize {
        self.categories
    }

    pub fn categories(&self) -> &[String] {
        &self.words[..self.categories]
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    pub fn lookup(&self, word: &str) -> Result<usize> {
        self.index
            .get(word)
            .copied()
            .ok_or_else(|| Error::UnknownWord(word.to_string()))
    }

    /// Token ids for a category, optionally wrapped in the prompt template.
    pub fn tokens(&self, category: usize, template: bool) -> Result<Vec<usize>> {
        if category >= self.categories {
            return Err(Error::OutOfVocabulary {
                id: category,
                size: self.categories,
            });
        }
        let mut ids = Vec::with_capacity(4);
        if template {
            for w in TEMPLATE {
                ids.push(self.index[w]);
            }
        }
        ids.push(category);
        Ok(ids)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self.categories()).map_err(|e| Error::Json {
            path: path.into(),
            source: e,
        })?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let words: Vec<String> = serde_json::from_str(&text).map_err(|e| Error::Json {
            path: path.into(),
            source: e,
        })?;
        Self::new(&words)
    }
}

/// A category [CLS] token in the shared latent width.
#[derive(Clone, Debug, PartialEq)]
pub struct TextCls {
    pub vector: Vec<f64>,
    pub category_id: usize,
}

/// Longest input: [CLS] + template + word.
pub const MAX_TEXT_LEN: usize = 1 + TEMPLATE.len() + 1;

#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub token_embedding: ParamId,
    pub cls: ParamId,
    pub position: ParamId,
    pub layers: Vec<Block>,
    pub ln_final: LayerNorm,
    pub head: Linear,
    pub source: TextClsSource,
    vocab_size: usize,
    width: usize,
}

/// Both views of the encoded [CLS] position.
#[derive(Clone, Copy, Debug)]
pub struct TextForward {
    /// `[1 × d]` final-layer state after the closing layer norm.
    pub state: Var,
    /// `[1 × d']` projection-head output, before normalization.
    pub projected: Var,
}

impl TextEncoder {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, vocab_size: usize, rng: &mut impl Rng) -> Self {
        let d = cfg.visual.width;
        let token_embedding = store.add("text.tok", normal_tensor(rng, vec![vocab_size, d], 0.1));
        let cls = store.add("text.cls", normal_tensor(rng, vec![1, d], 0.1));
        let position = store.add("text.pos", normal_tensor(rng, vec![MAX_TEXT_LEN, d], 0.05));
        let layers = (0..cfg.text.n_layers)
            .map(|i| {
                Block::new(
                    store,
                    &format!("text.layers.{i}"),
                    d,
                    cfg.text.n_heads,
                    cfg.visual.mlp_ratio,
                    rng,
                )
            })
            .collect();
        let ln_final = LayerNorm::new(store, "text.ln_final", d);
        let head = Linear::new(store, "text.head", d, cfg.embed_dim(), rng);
        Self {
            token_embedding,
            cls,
            position,
            layers,
            ln_final,
            head,
            source: cfg.text.cls_source,
            vocab_size,
            width: d,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn forward(&self, tape: &mut Tape<'_>, ids: &[usize]) -> Result<TextForward> {
        if ids.is_empty() || ids.len() + 1 > MAX_TEXT_LEN {
            return Err(Error::InvalidShape(format!(
                "text input of {} tokens (max {})",
                ids.len(),
                MAX_TEXT_LEN - 1
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.vocab_size) {
            return Err(Error::OutOfVocabulary {
                id: bad,
                size: self.vocab_size,
            });
        }
        let table = tape.param(self.token_embedding);
        let words = tape.embedding(table, ids)?;
        let cls = tape.param(self.cls);
        let x = tape.concat_rows(&[cls, words])?;
        let pos = tape.param(self.position);
        let pos = tape.slice_rows(pos, 0, ids.len() + 1)?;
        let mut x = tape.add(x, pos)?;
        for layer in &self.layers {
            x = layer.forward(tape, x)?.out;
        }
        let first = tape.slice_rows(x, 0, 1)?;
        let state = self.ln_final.forward(tape, first)?;
        let projected = self.head.forward(tape, state)?;
        Ok(TextForward { state, projected })
    }

    /// The token injected into the visual encoder, per the configured source.
    pub fn cls_token(&self, tape: &mut Tape<'_>, ids: &[usize]) -> Result<Var> {
        let f = self.forward(tape, ids)?;
        Ok(match self.source {
            TextClsSource::PreProjection => f.state,
            TextClsSource::PostProjection => f.projected,
        })
    }

    /// Unit-norm contrastive embedding `[1 × d']`.
    pub fn embed(&self, tape: &mut Tape<'_>, ids: &[usize]) -> Result<Var> {
        let f = self.forward(tape, ids)?;
        tape.l2_normalize_rows(f.projected)
    }

    /// Evaluates the [CLS] token outside any training tape.
    pub fn encode_text(&self, store: &ParamStore, ids: &[usize], category_id: usize) -> Result<TextCls> {
        let mut tape = Tape::with_params(store);
        let v = self.cls_token(&mut tape, ids)?;
        Ok(TextCls {
            vector: tape.value(v).to_vec(),
            category_id,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;

    fn words() -> Vec<String> {
        ["circle", "square", "ring"].iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn vocabulary_ids_are_dense_and_injective() {
        let v = Vocabulary::new(&words()).unwrap();
        assert_eq!(v.len(), 6);
        for i in 0..v.len() {
            assert_eq!(v.lookup(v.word(i).unwrap()).unwrap(), i);
        }
        assert_eq!(v.tokens(1, true).unwrap(), vec![3, 4, 5, 1]);
        assert_eq!(v.tokens(1, false).unwrap(), vec![1]);
        assert!(v.tokens(3, false).is_err());
        assert!(Vocabulary::new(&["a".to_string()]).is_err());
    }

    #[test]
    fn vocabulary_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vocab.json");
        let v = Vocabulary::new(&words()).unwrap();
        v.save(&p).unwrap();
        assert_eq!(Vocabulary::load(&p).unwrap(), v);
    }

    fn encoder() -> (ParamStore, TextEncoder, Vocabulary) {
        let cfg = ModelConfig::default();
        let vocab = Vocabulary::new(&words()).unwrap();
        let mut store = ParamStore::new();
        let enc = TextEncoder::new(&mut store, &cfg, vocab.len(), &mut rng_for(3, "text", 0));
        (store, enc, vocab)
    }

    #[test]
    fn encode_is_deterministic_and_word_sensitive() {
        let (store, enc, vocab) = encoder();
        let ids = vocab.tokens(0, true).unwrap();
        let a = enc.encode_text(&store, &ids, 0).unwrap();
        let b = enc.encode_text(&store, &ids, 0).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.vector.len(), 64);
        let c = enc.encode_text(&store, &vocab.tokens(1, true).unwrap(), 1).unwrap();
        assert_ne!(a.vector, c.vector);
    }

    #[test]
    fn out_of_vocabulary_id_rejected() {
        let (store, enc, _) = encoder();
        assert!(matches!(
            enc.encode_text(&store, &[99], 0),
            Err(Error::OutOfVocabulary { id: 99, .. })
        ));
    }
}

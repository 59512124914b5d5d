//! Experiment configuration: one JSON document drives every subcommand.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use clsnav_core::config::{Mechanism, ModelConfig};
use clsnav_core::data::SynthSpec;
use clsnav_core::par::Exec;
use clsnav_core::train::{PretrainConfig, SegmentConfig};
use clsnav_core::zoomin::ProposalSource;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct ZoominConfig {
    /// Crop side as a multiple of the box's longer side.
    pub context: f64,
    pub sources: Vec<ProposalSource>,
}

impl Default for ZoominConfig {
    fn default() -> Self {
        Self {
            context: 3.0,
            sources: ProposalSource::ALL.to_vec(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct AttentionConfig {
    /// Number of evaluation images to dump.
    pub images: usize,
    /// Layer to dump; defaults to the last replacement layer.
    pub layer: Option<usize>,
    /// Images scored for the mean in-mask attention summary.
    pub summary_images: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Root seed. Every random stream, including corpus generation, is
    /// derived from it; `data.seed` is overwritten with this value.
    pub seed: u64,
    pub data: SynthSpec,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub segment: SegmentConfig,
    pub fold: usize,
    pub zoomin: ZoominConfig,
    pub attention: AttentionConfig,
    pub exec: Exec,
    /// Root directory for all artifacts.
    pub out: PathBuf,
    /// Corpus directory; defaults to `<out>/data`.
    pub data_dir: Option<PathBuf>,
    /// Pretrained checkpoint; defaults to `<out>/pretrain`.
    pub pretrained: Option<PathBuf>,
    /// Segmentation checkpoint; defaults to `<out>/segment/<run name>`.
    pub checkpoint: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: SynthSpec::default(),
            model: ModelConfig::default(),
            pretrain: PretrainConfig::default(),
            segment: SegmentConfig::default(),
            fold: 0,
            zoomin: ZoominConfig::default(),
            attention: AttentionConfig {
                images: 4,
                layer: None,
                summary_images: 100,
            },
            exec: Exec::default(),
            out: PathBuf::from("runs/default"),
            data_dir: None,
            pretrained: None,
            checkpoint: None,
        }
    }
}

impl ExperimentConfig {
    /// Parses a config document; errors carry the JSON pointer of the
    /// offending value.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let pointer = json_pointer(&e.path().to_string());
            anyhow::anyhow!("config error at {pointer}: {}", e.inner())
        })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::from_json(&text).with_context(|| format!("in {}", path.display()))
    }

    /// Applies command-line overrides, propagates the root seed and checks
    /// semantic constraints.
    pub fn resolve(mut self, seed: Option<u64>, out: Option<PathBuf>) -> Result<Self> {
        if let Some(s) = seed {
            self.seed = s;
        }
        if let Some(o) = out {
            self.out = o;
        }
        self.data.seed = self.seed;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model.validate()?;
        self.pretrain.validate()?;
        self.segment.validate()?;
        if self.fold >= self.data.n_folds {
            bail!(
                "config error at /fold: fold {} out of range for {} folds",
                self.fold,
                self.data.n_folds
            );
        }
        if self.model.visual.image_size != self.data.image_size {
            bail!(
                "config error at /model/visual/image_size: {} differs from /data/image_size {}",
                self.model.visual.image_size,
                self.data.image_size
            );
        }
        if !(self.zoomin.context >= 1.0) {
            bail!("config error at /zoomin/context: must be at least 1");
        }
        Ok(())
    }

    pub fn data_dir(&self) -> PathBuf {
        self.data_dir.clone().unwrap_or_else(|| self.out.join("data"))
    }

    pub fn pretrained_dir(&self) -> PathBuf {
        self.pretrained.clone().unwrap_or_else(|| self.out.join("pretrain"))
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.checkpoint
            .clone()
            .unwrap_or_else(|| self.out.join("segment").join(run_name(self.fold, &self.model)))
    }

    /// The config with every filesystem location removed: two runs that
    /// differ only in where they write hash the same.
    pub fn content(&self) -> serde_json::Value {
        let mut c = self.clone();
        c.out = PathBuf::new();
        c.data_dir = None;
        c.pretrained = None;
        c.checkpoint = None;
        serde_json::to_value(c).expect("config serializes")
    }
}

/// Directory name of a segmentation run.
pub fn run_name(fold: usize, model: &ModelConfig) -> String {
    let mech = model.visual.mechanism;
    if mech == Mechanism::ReplaceCls {
        let w: Vec<String> = model.visual.replace_layers.iter().map(|l| l.to_string()).collect();
        format!(
            "fold{fold}-{mech}-{}",
            if w.is_empty() { "none".to_string() } else { w.join("-") }
        )
    } else {
        format!("fold{fold}-{mech}")
    }
}

/// `serde_path_to_error` renders paths as `a.b[3].c`; convert to RFC 6901.
fn json_pointer(path: &str) -> String {
    if path == "." {
        return "/".into();
    }
    let mut out = String::new();
    for part in path.split('.') {
        let mut rest = part;
        if let Some(i) = rest.find('[') {
            out.push('/');
            out.push_str(&rest[..i].replace('~', "~0").replace('/', "~1"));
            rest = &rest[i..];
            for idx in rest.split('[').filter(|s| !s.is_empty()) {
                out.push('/');
                out.push_str(idx.trim_end_matches(']'));
            }
        } else {
            out.push('/');
            out.push_str(&rest.replace('~', "~0").replace('/', "~1"));
        }
    }
    out
}

/// SHA-256 of `bytes` in git blob framing (`blob <len>\0` prefix).
pub fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

pub fn schema() -> schemars::schema::RootSchema {
    schemars::schema_for!(ExperimentConfig)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_key_reports_pointer() {
        let err = ExperimentConfig::from_json(r#"{"model": {"visual": {"widht": 8}}}"#).unwrap_err();
        let msg = format!("{err:#}");
        assert!(msg.contains("/model/visual"), "{msg}");
        assert!(msg.contains("widht"), "{msg}");
    }

    #[test]
    fn wrong_type_reports_pointer() {
        let err = ExperimentConfig::from_json(r#"{"zoomin": {"sources": ["oracle", 3]}}"#).unwrap_err();
        assert!(format!("{err:#}").contains("/zoomin/sources/1"), "{err:#}");
    }

    #[test]
    fn empty_document_is_the_default() {
        assert_eq!(ExperimentConfig::from_json("{}").unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn blob_hash_matches_git() {
        // `printf 'hello\n' | git hash-object --stdin` under sha256 object format.
        assert_eq!(
            blob_hash(b"hello\n"),
            "2cf8d83d9ee29543b34a87727421fdecb7e3f3a183d337639025de576db9ebb4"
        );
    }

    #[test]
    fn content_hash_ignores_paths() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.out = PathBuf::from("/elsewhere");
        b.pretrained = Some(PathBuf::from("/x"));
        assert_eq!(a.content(), b.content());
        b.seed = 1;
        assert_ne!(a.content(), b.content());
    }

    #[test]
    fn semantic_errors_name_the_field() {
        let cfg = ExperimentConfig {
            fold: 9,
            ..ExperimentConfig::default()
        };
        assert!(format!("{:#}", cfg.validate().unwrap_err()).contains("/fold"));
    }
}

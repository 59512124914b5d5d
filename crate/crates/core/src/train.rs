//! Contrastive dual-encoder pretraining and frozen-backbone segmentation
//! training.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::{Mechanism, ModelConfig};
use crate::data::{Corpus, FoldSplit};
use crate::error::{Error, Result};
use crate::eval::{evaluate_model, text_table, Query};
use crate::model::{is_pretrain_param, ClsClip};
use crate::optim::{AdamW, CosineRestarts, OptimConfig};
use crate::par::Exec;
use crate::rng::{derive_seed, rng_for};
use crate::tensor::{ParamGrads, Tape, Var};
use crate::text::Vocabulary;
use crate::visual::MechanismParams;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub temperature: f64,
    /// Stop once held-out retrieval reaches this accuracy.
    pub target_retrieval: Option<f64>,
    pub optim: OptimConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 64,
            temperature: 0.07,
            target_retrieval: Some(0.95),
            optim: OptimConfig::default(),
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.optim.validate()?;
        if self.epochs == 0 || self.batch_size < 2 || !(self.temperature > 0.0) {
            return Err(Error::Config(
                "pretraining needs epochs >= 1, batch_size >= 2 and temperature > 0".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(deny_unknown_fields, default)]
pub struct SegmentConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optim: OptimConfig,
    /// Evaluate seen-class mIoU on the monitor corpus every this many
    /// epochs; 0 disables monitoring.
    pub monitor_every: usize,
}

impl Default for SegmentConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 64,
            optim: OptimConfig::default(),
            monitor_every: 0,
        }
    }
}

impl SegmentConfig {
    pub fn validate(&self) -> Result<()> {
        self.optim.validate()?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "segmentation needs epochs >= 1 and batch_size >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// One line of the JSON-lines training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub stage: String,
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metrics: BTreeMap<String, f64>,
}

pub fn write_log(path: &Path, records: &[LogRecord]) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r).expect("log record serializes");
        out.push(b'\n');
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(&out))
        .map_err(|e| Error::io(path, e))
}

fn check_finite(v: f64, what: impl FnOnce() -> String) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(what()))
    }
}

fn apply_grads(model: &mut ClsClip, opt: &mut AdamW, grads: &[ParamGrads], lr: f64) -> Result<()> {
    model.store.zero_grads();
    for g in grads {
        g.accumulate_into(&mut model.store);
    }
    opt.step(&mut model.store, lr)
}

/// Symmetric in-batch contrastive loss.
///
/// `labels[i]` indexes the row of `txt` describing image `i`. Image-to-text
/// is cross-entropy over the distinct texts in the batch; text-to-image uses
/// a uniform target over every image of that text. With all labels distinct
/// this is the usual symmetric InfoNCE.
pub fn contrastive_loss(tape: &mut Tape<'_>, img: Var, txt: Var, labels: &[usize], temperature: f64) -> Result<Var> {
    let b = tape.shape(img)[0];
    let u = tape.shape(txt)[0];
    if b < 2 {
        return Err(Error::Config("contrastive loss needs a batch of at least 2".into()));
    }
    if labels.len() != b || labels.iter().any(|&l| l >= u) {
        return Err(Error::InvalidShape(format!(
            "{} labels for {b} images and {u} texts",
            labels.len()
        )));
    }
    let tt = tape.transpose(txt)?;
    let sim = tape.matmul(img, tt)?;
    let logits = tape.scale(sim, 1.0 / temperature);
    let i2t = tape.cross_entropy_hard(logits, labels)?;
    let lt = tape.transpose(logits)?;
    let mut counts = vec![0.0; u];
    labels.iter().for_each(|&l| counts[l] += 1.0);
    let mut targets = vec![0.0; u * b];
    for (i, &l) in labels.iter().enumerate() {
        targets[l * b + i] = 1.0 / counts[l];
    }
    let t2i = tape.cross_entropy(lt, &targets)?;
    let sum = tape.add(i2t, t2i)?;
    Ok(tape.scale(sum, 0.5))
}

/// Unit-norm image embedding outside any training tape.
pub fn image_embedding(model: &ClsClip, image: &crate::tensor::Tensor) -> Result<Vec<f64>> {
    let mut tape = Tape::with_params(&model.store);
    let e = model.visual.encode(&mut tape, image, &MechanismParams::None, None)?;
    let y = model.visual.embed_head(&mut tape, e.cls)?;
    Ok(tape.value(y).to_vec())
}

/// Unit-norm text embedding of every category.
pub fn text_embeddings(model: &ClsClip) -> Result<Vec<Vec<f64>>> {
    (0..model.vocab.category_count())
        .map(|c| {
            let ids = model.text_ids(c)?;
            let mut tape = Tape::with_params(&model.store);
            let y = model.text.embed(&mut tape, &ids)?;
            Ok(tape.value(y).to_vec())
        })
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Top-1 image-to-text retrieval over the single-object images of `corpus`.
pub fn retrieval_accuracy(model: &ClsClip, corpus: &Corpus, exec: Exec) -> Result<f64> {
    let texts = text_embeddings(model)?;
    let pairs: Vec<_> = corpus.single_object().collect();
    if pairs.is_empty() {
        return Err(Error::Config("no single-object images for retrieval".into()));
    }
    let hits = exec.map(&pairs, |(s, c)| -> Result<bool> {
        let e = image_embedding(model, &s.image)?;
        let best = texts
            .iter()
            .enumerate()
            .max_by(|a, b| dot(&e, a.1).total_cmp(&dot(&e, b.1)))
            .map(|(i, _)| i);
        Ok(best == Some(*c))
    });
    let mut n = 0usize;
    for h in hits {
        n += usize::from(h?);
    }
    Ok(n as f64 / pairs.len() as f64)
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub model: ClsClip,
    pub checkpoint: Checkpoint,
    pub log: Vec<LogRecord>,
    pub retrieval: f64,
    pub epochs_run: usize,
}

/// Backbone configuration used for pretraining: no conditioning mechanism.
pub fn pretrain_model_config(cfg: &ModelConfig) -> ModelConfig {
    let mut c = cfg.clone();
    c.visual.mechanism = Mechanism::None;
    c.visual.replace_layers.clear();
    c
}

pub fn contrastive_pretrain(
    train: &Corpus,
    heldout: &Corpus,
    model_cfg: &ModelConfig,
    cfg: &PretrainConfig,
    seed: u64,
    exec: Exec,
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    let vocab = Vocabulary::new(&train.spec.categories)?;
    let mcfg = pretrain_model_config(model_cfg);
    let mut model = ClsClip::new(mcfg, vocab, derive_seed(seed, "pretrain.model", 0))?;
    model.freeze_for_pretraining();
    let pairs: Vec<(usize, usize)> = train
        .samples
        .iter()
        .enumerate()
        .filter(|(_, s)| s.objects.len() == 1)
        .map(|(i, s)| (i, s.objects[0].category))
        .collect();
    if pairs.len() < 2 {
        return Err(Error::Config(
            "pretraining needs at least two single-object images".into(),
        ));
    }
    let steps_per_epoch = pairs.len().div_ceil(cfg.batch_size);
    let sched = CosineRestarts {
        base_lr: cfg.optim.lr,
        eta_min: cfg.optim.eta_min,
        period: cfg.optim.restart_epochs * steps_per_epoch,
    };
    let mut opt = AdamW::new(cfg.optim.clone(), &model.store);
    let mut log = Vec::new();
    let mut step = 0;
    let mut retrieval = 0.0;
    let mut epochs_run = 0;
    for epoch in 0..cfg.epochs {
        let mut order = pairs.clone();
        order.shuffle(&mut rng_for(seed, "pretrain.shuffle", epoch as u64));
        for batch in order.chunks(cfg.batch_size) {
            if batch.len() < 2 {
                continue;
            }
            let lr = sched.lr(step);
            let (loss, grads) = pretrain_batch(&model, train, batch, cfg.temperature, exec)?;
            check_finite(loss, || format!("pretraining loss at step {step}"))?;
            apply_grads(&mut model, &mut opt, &grads, lr)?;
            log.push(LogRecord {
                stage: "pretrain".into(),
                epoch,
                step,
                lr,
                loss,
                metrics: BTreeMap::new(),
            });
            step += 1;
        }
        retrieval = retrieval_accuracy(&model, heldout, exec)?;
        epochs_run = epoch + 1;
        if let Some(last) = log.last_mut() {
            last.metrics.insert("heldout_retrieval".into(), retrieval);
        }
        if cfg.target_retrieval.is_some_and(|t| retrieval >= t) {
            break;
        }
    }
    let mut checkpoint = Checkpoint::from_store(
        &model.store,
        is_pretrain_param,
        "pretrain",
        &model.config,
        model.vocab.categories(),
    );
    checkpoint
        .manifest
        .metrics
        .insert("heldout_retrieval".into(), retrieval);
    checkpoint
        .manifest
        .metrics
        .insert("epochs_run".into(), epochs_run as f64);
    checkpoint.manifest.run = serde_json::to_value(cfg).expect("config serializes");
    Ok(PretrainOutcome {
        model,
        checkpoint,
        log,
        retrieval,
        epochs_run,
    })
}

/// Loss and per-sample parameter gradients for one contrastive batch.
pub fn pretrain_batch(
    model: &ClsClip,
    corpus: &Corpus,
    batch: &[(usize, usize)],
    temperature: f64,
    exec: Exec,
) -> Result<(f64, Vec<ParamGrads>)> {
    let store = &model.store;
    let images = exec
        .map(batch, |&(i, _)| -> Result<(Tape<'_>, Var)> {
            let mut tape = Tape::with_params(store);
            let e = model
                .visual
                .encode(&mut tape, &corpus.samples[i].image, &MechanismParams::None, None)?;
            let y = model.visual.embed_head(&mut tape, e.cls)?;
            Ok((tape, y))
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let mut classes: Vec<usize> = batch.iter().map(|&(_, c)| c).collect();
    classes.sort_unstable();
    classes.dedup();
    let labels: Vec<usize> = batch
        .iter()
        .map(|&(_, c)| classes.binary_search(&c).expect("class listed"))
        .collect();
    let texts = exec
        .map(&classes, |&c| -> Result<(Tape<'_>, Var)> {
            let mut tape = Tape::with_params(store);
            let y = model.text.embed(&mut tape, &model.text_ids(c)?)?;
            Ok((tape, y))
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;

    let d = model.config.embed_dim();
    let mut lt = Tape::new();
    let iv: Vec<f64> = images.iter().flat_map(|(t, y)| t.value(*y).to_vec()).collect();
    let tv: Vec<f64> = texts.iter().flat_map(|(t, y)| t.value(*y).to_vec()).collect();
    let img = lt.variable(vec![images.len(), d], iv)?;
    let txt = lt.variable(vec![texts.len(), d], tv)?;
    let loss = contrastive_loss(&mut lt, img, txt, &labels, temperature)?;
    let loss_value = lt.value(loss)[0];
    let g = lt.backward(loss)?;
    let gi = g.get_or_zeros(img, images.len() * d);
    let gt = g.get_or_zeros(txt, texts.len() * d);

    let runs: Vec<(&(Tape<'_>, Var), &[f64])> = images
        .iter()
        .zip(gi.chunks(d))
        .chain(texts.iter().zip(gt.chunks(d)))
        .collect();
    let grads = exec
        .map(&runs, |((tape, y), seed)| -> Result<ParamGrads> {
            Ok(tape.backward_with_seed(*y, seed.to_vec())?.into_param_grads())
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok((loss_value, grads))
}

/// Counts of an audited query stream.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerAudit {
    pub queries: usize,
    pub unseen: usize,
}

impl SamplerAudit {
    pub fn record(&mut self, queries: &[Query], fold: &FoldSplit) {
        self.queries += queries.len();
        self.unseen += queries.iter().filter(|q| !fold.is_seen(q.category)).count();
    }
}

/// Training queries of one epoch. Images showing any unseen category are
/// withheld entirely; every other image contributes one query for a
/// uniformly chosen present category. Order is shuffled.
pub fn epoch_queries(corpus: &Corpus, fold: &FoldSplit, seed: u64, epoch: usize) -> Vec<Query> {
    let mut rng = rng_for(seed, "segment.queries", epoch as u64);
    let mut out = Vec::new();
    for (i, s) in corpus.samples.iter().enumerate() {
        if s.masks.keys().any(|&c| !fold.is_seen(c)) {
            continue;
        }
        let seen: Vec<usize> = s.masks.keys().copied().filter(|&c| fold.is_seen(c)).collect();
        if !seen.is_empty() {
            let category = seen[rng.random_range(0..seen.len())];
            out.push(Query { sample: i, category });
        }
    }
    out.shuffle(&mut rng);
    out
}

#[derive(Clone, Debug)]
pub struct SegmentOutcome {
    pub model: ClsClip,
    pub checkpoint: Checkpoint,
    pub log: Vec<LogRecord>,
    pub audit: SamplerAudit,
    /// Seen-class mIoU on the monitor corpus at each monitoring point.
    pub monitor: Vec<f64>,
}

/// Checks that a pretrained checkpoint can seed a segmentation model.
pub fn check_pretrained(pretrained: &Checkpoint, model_cfg: &ModelConfig, categories: &[String]) -> Result<()> {
    let m = &pretrained.manifest;
    if m.stage != "pretrain" {
        return Err(Error::Config(format!(
            "expected a pretrain checkpoint, got stage {:?}",
            m.stage
        )));
    }
    if !m.model.backbone_matches(model_cfg) {
        return Err(Error::Config(
            "pretrained backbone architecture differs from the segmentation config".into(),
        ));
    }
    if m.vocabulary != categories {
        return Err(Error::Config(
            "pretrained vocabulary differs from the corpus categories".into(),
        ));
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn train_segmentation(
    train: &Corpus,
    fold: &FoldSplit,
    pretrained: &Checkpoint,
    model_cfg: &ModelConfig,
    cfg: &SegmentConfig,
    seed: u64,
    exec: Exec,
    monitor: Option<&Corpus>,
) -> Result<SegmentOutcome> {
    cfg.validate()?;
    model_cfg.validate()?;
    check_pretrained(pretrained, model_cfg, &train.spec.categories)?;
    let vocab = Vocabulary::new(&train.spec.categories)?;
    let mut model = ClsClip::new(model_cfg.clone(), vocab, derive_seed(seed, "segment.model", 0))?;
    pretrained.apply(&mut model.store)?;
    model.freeze_for_segmentation();

    let texts = text_table(&model, &fold.seen)?;
    let caches = exec
        .map(&train.samples, |s| model.prefix_cache(&s.image))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let per_epoch = epoch_queries(train, fold, seed, 0).len();
    if per_epoch == 0 {
        return Err(Error::Config(format!("fold {} has no training queries", fold.fold_id)));
    }
    let steps_per_epoch = per_epoch.div_ceil(cfg.batch_size);
    let sched = CosineRestarts {
        base_lr: cfg.optim.lr,
        eta_min: cfg.optim.eta_min,
        period: cfg.optim.restart_epochs * steps_per_epoch,
    };
    let mut opt = AdamW::new(cfg.optim.clone(), &model.store);
    let mut audit = SamplerAudit::default();
    let mut log = Vec::new();
    let mut history = Vec::new();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let queries = epoch_queries(train, fold, seed, epoch);
        audit.record(&queries, fold);
        for batch in queries.chunks(cfg.batch_size) {
            let lr = sched.lr(step);
            let inv = 1.0 / batch.len() as f64;
            let m = &model;
            let results = exec.map(batch, |q| -> Result<(f64, ParamGrads)> {
                let mut tape = Tape::with_params(&m.store);
                let t = m.bind_text(&mut tape, &texts[&q.category])?;
                let f = m.forward_cached(&mut tape, &caches[q.sample], Some(t))?;
                let y: Vec<f64> = train.samples[q.sample].masks[&q.category]
                    .bits()
                    .iter()
                    .map(|&b| f64::from(u8::from(b)))
                    .collect();
                let l = tape.bce_with_logits(f.logits, &y)?;
                let value = tape.value(l)[0];
                let l = tape.scale(l, inv);
                Ok((value, tape.backward(l)?.into_param_grads()))
            });
            let mut loss = 0.0;
            let mut grads = Vec::with_capacity(results.len());
            for r in results {
                let (v, g) = r?;
                loss += v * inv;
                grads.push(g);
            }
            check_finite(loss, || format!("segmentation loss at step {step}"))?;
            apply_grads(&mut model, &mut opt, &grads, lr)?;
            log.push(LogRecord {
                stage: "segment".into(),
                epoch,
                step,
                lr,
                loss,
                metrics: BTreeMap::new(),
            });
            step += 1;
        }
        if let Some(mon) = monitor.filter(|_| cfg.monitor_every > 0 && (epoch + 1) % cfg.monitor_every == 0) {
            let miou = evaluate_model(&model, mon, &fold.seen, exec)?.miou(&fold.seen)?;
            history.push(miou);
            if let Some(last) = log.last_mut() {
                last.metrics.insert("monitor_seen_miou".into(), miou);
            }
        }
    }
    let mut checkpoint = Checkpoint::from_store(
        &model.store,
        |_| true,
        "segment",
        &model.config,
        model.vocab.categories(),
    );
    if let Some(last) = log.last() {
        checkpoint.manifest.metrics.insert("final_loss".into(), last.loss);
    }
    checkpoint.manifest.metrics.insert("fold".into(), fold.fold_id as f64);
    checkpoint.manifest.run = serde_json::to_value(cfg).expect("config serializes");
    Ok(SegmentOutcome {
        model,
        checkpoint,
        log,
        audit,
        monitor: history,
    })
}

//! Query enumeration and batch evaluation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{Corpus, SynthSample};
use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::metrics::IouAccumulator;
use crate::model::ClsClip;
use crate::par::Exec;
use crate::rng::rng_for;
use crate::tensor::{Tape, Tensor};
use crate::text::TextCls;
use crate::visual::{attention_mass_in_mask, MechanismParams};
use crate::zoomin::{boxes_as_mask, propose_regions, zoom_in_predict, ProposalSource};

/// One (image, category) segmentation query.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Query {
    pub sample: usize,
    pub category: usize,
}

/// Every (sample, present category) pair with the category in `classes`.
pub fn eval_queries(corpus: &Corpus, classes: &[usize]) -> Vec<Query> {
    corpus
        .samples
        .iter()
        .enumerate()
        .flat_map(|(i, s)| {
            s.masks
                .keys()
                .filter(|c| classes.contains(c))
                .map(move |&category| Query { sample: i, category })
        })
        .collect()
}

/// Scores `predict` on every query over `classes`.
pub fn evaluate_with<F>(corpus: &Corpus, classes: &[usize], exec: Exec, predict: F) -> Result<IouAccumulator>
where
    F: Fn(&SynthSample, usize) -> Result<Mask> + Sync + Send,
{
    let queries = eval_queries(corpus, classes);
    let preds = exec.map(&queries, |q| predict(&corpus.samples[q.sample], q.category));
    let mut acc = IouAccumulator::new();
    for (q, p) in queries.iter().zip(preds) {
        acc.add(q.category, &p?, &corpus.samples[q.sample].masks[&q.category])?;
    }
    Ok(acc)
}

/// Text tokens for `classes`, computed once.
pub fn text_table(model: &ClsClip, classes: &[usize]) -> Result<BTreeMap<usize, TextCls>> {
    classes.iter().map(|&c| Ok((c, model.text_cls(c)?))).collect()
}

pub fn evaluate_model(model: &ClsClip, corpus: &Corpus, classes: &[usize], exec: Exec) -> Result<IouAccumulator> {
    let texts = text_table(model, classes)?;
    evaluate_with(corpus, classes, exec, |s, c| {
        Ok(model.predict_with(&s.image, Some(&texts[&c]))?.binarize())
    })
}

/// Zoom-in evaluation with proposals drawn per sample from `source`.
/// Jittered proposals use a per-sample stream of `seed`.
pub fn evaluate_zoom_in(
    model: &ClsClip,
    corpus: &Corpus,
    classes: &[usize],
    source: ProposalSource,
    context: f64,
    seed: u64,
    exec: Exec,
) -> Result<IouAccumulator> {
    let texts = text_table(model, classes)?;
    evaluate_with(corpus, classes, exec, |s, c| {
        let mut rng = rng_for(seed, "zoomin.proposals", s.index as u64);
        let regions = propose_regions(s, &corpus.spec, source, &mut rng);
        zoom_in_predict(model, &s.image, &regions, c, &texts[&c], context)
    })
}

/// Scores the proposal boxes themselves, filled in, as masks.
pub fn evaluate_boxes(
    corpus: &Corpus,
    classes: &[usize],
    source: ProposalSource,
    seed: u64,
    exec: Exec,
) -> Result<IouAccumulator> {
    evaluate_with(corpus, classes, exec, |s, c| {
        let mut rng = rng_for(seed, "zoomin.proposals", s.index as u64);
        let regions = propose_regions(s, &corpus.spec, source, &mut rng);
        Ok(boxes_as_mask(&regions, c, s.image_size()))
    })
}

/// Share of [CLS]-row attention that lands on patches under `mask` at
/// `layer`, averaged over heads. `text` of `None` runs the plain visual
/// encoder with its own [CLS] token.
pub fn cls_attention_mass(
    model: &ClsClip,
    image: &Tensor,
    mask: &Mask,
    text: Option<&TextCls>,
    layer: usize,
) -> Result<f64> {
    let mut tape = Tape::with_params(&model.store);
    let out = match text {
        Some(t) => {
            let t = model.bind_text(&mut tape, t)?;
            model.visual.encode(&mut tape, image, &model.mechanism, Some(t))?
        }
        None => model.visual.encode(&mut tape, image, &MechanismParams::None, None)?,
    };
    let (probs, heads, tokens) = out
        .attention_at(&tape, layer)
        .ok_or_else(|| Error::Config(format!("no attention recorded at layer {layer}")))?;
    attention_mass_in_mask(probs, heads, tokens, out.prompt_count, mask, &model.config.visual)
}

/// Mean in-mask [CLS] attention with and without text replacement.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionShift {
    pub layer: usize,
    pub queries: usize,
    pub with_text: f64,
    pub without_text: f64,
}

/// Attention shift over every present category of the first `max_images`
/// samples of `corpus`. Masks too small to cover half of any patch are
/// skipped.
pub fn attention_shift(
    model: &ClsClip,
    corpus: &Corpus,
    layer: usize,
    max_images: usize,
    exec: Exec,
) -> Result<AttentionShift> {
    let n = corpus.samples.len().min(max_images);
    let texts = text_table(model, &(0..model.vocab.category_count()).collect::<Vec<_>>())?;
    let pairs = exec.map(&corpus.samples[..n], |s| -> Result<(f64, f64, usize)> {
        let (mut with, mut without) = (0.0, 0.0);
        let mut k = 0;
        for (c, m) in &s.masks {
            let a = match cls_attention_mass(model, &s.image, m, Some(&texts[c]), layer) {
                Err(Error::EmptyMask) => continue,
                r => r?,
            };
            with += a;
            without += cls_attention_mass(model, &s.image, m, None, layer)?;
            k += 1;
        }
        Ok((with, without, k))
    });
    let (mut with, mut without, mut queries) = (0.0, 0.0, 0);
    for p in pairs {
        let (a, b, k) = p?;
        with += a;
        without += b;
        queries += k;
    }
    if queries == 0 {
        return Err(Error::Config(
            "attention shift needs at least one annotated image".into(),
        ));
    }
    Ok(AttentionShift {
        layer,
        queries,
        with_text: with / queries as f64,
        without_text: without / queries as f64,
    })
}

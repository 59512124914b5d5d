//! Training loops: contrastive loss, determinism and the freeze contract.

use clsnav_core::checkpoint::Checkpoint;
use clsnav_core::config::{Mechanism, ModelConfig};
use clsnav_core::data::{build_folds, Corpus, Split, SynthSpec};
use clsnav_core::model::{is_pretrain_param, ClsClip};
use clsnav_core::par::Exec;
use clsnav_core::tensor::gradcheck::check_inputs;
use clsnav_core::tensor::{Tape, Tensor};
use clsnav_core::train::{
    contrastive_loss, contrastive_pretrain, epoch_queries, train_segmentation, PretrainConfig, SamplerAudit,
    SegmentConfig,
};
use clsnav_core::Error;

fn spec() -> SynthSpec {
    SynthSpec {
        train_samples: 24,
        eval_samples: 12,
        tiny_samples: 8,
        ..SynthSpec::default()
    }
}

fn small(mechanism: Mechanism) -> ModelConfig {
    let mut c = ModelConfig::default();
    c.visual.n_layers = 5;
    c.visual.width = 16;
    c.visual.mechanism = mechanism;
    c.text.n_layers = 1;
    c.decoder.n_layers = 1;
    c
}

fn pretrain_cfg() -> PretrainConfig {
    PretrainConfig {
        epochs: 2,
        batch_size: 8,
        target_retrieval: None,
        ..PretrainConfig::default()
    }
}

fn pretrained(exec: Exec) -> Checkpoint {
    let s = spec();
    let train = Corpus::generate_split(&s, Split::Train, exec).unwrap();
    let held = Corpus::generate_split(&s, Split::Eval, exec).unwrap();
    contrastive_pretrain(&train, &held, &small(Mechanism::ReplaceCls), &pretrain_cfg(), 3, exec)
        .unwrap()
        .checkpoint
}

#[test]
fn contrastive_loss_of_uninformative_embeddings_is_ln_batch() {
    for b in [2usize, 5, 9] {
        let mut tape = Tape::new();
        let img = tape.constant(vec![b, 4], vec![0.0; b * 4]).unwrap();
        let txt = tape.constant(vec![b, 4], vec![0.0; b * 4]).unwrap();
        let labels: Vec<usize> = (0..b).collect();
        let l = contrastive_loss(&mut tape, img, txt, &labels, 0.07).unwrap();
        assert!((tape.value(l)[0] - (b as f64).ln()).abs() < 1e-12);
    }
}

#[test]
fn contrastive_loss_with_shared_labels_has_exact_gradients() {
    let img = Tensor::from_fn(vec![5, 3], |i| ((i * 7 % 11) as f64 - 5.0) * 0.1).unwrap();
    let txt = Tensor::from_fn(vec![3, 3], |i| ((i * 5 % 7) as f64 - 3.0) * 0.15).unwrap();
    let labels = [0, 2, 0, 1, 2];
    let r = check_inputs(&[img, txt], 1e-5, |t, v| contrastive_loss(t, v[0], v[1], &labels, 0.5)).unwrap();
    assert!(r.max_rel_error < 1e-6, "{r:?}");
}

#[test]
fn contrastive_loss_rejects_single_pair_batch() {
    let mut tape = Tape::new();
    let img = tape.constant(vec![1, 2], vec![1.0, 0.0]).unwrap();
    let txt = tape.constant(vec![1, 2], vec![1.0, 0.0]).unwrap();
    assert!(matches!(
        contrastive_loss(&mut tape, img, txt, &[0], 0.07),
        Err(Error::Config(_))
    ));
}

#[test]
fn pretraining_is_deterministic_across_executors() {
    let a = pretrained(Exec::Sequential);
    let b = pretrained(Exec::default());
    assert_eq!(a.blob(), b.blob());
    assert!(a.manifest.tensors.iter().all(|t| is_pretrain_param(&t.name)));
}

#[test]
fn sampler_draws_only_seen_present_categories() {
    let s = spec();
    let train = Corpus::generate_split(&s, Split::Train, Exec::default()).unwrap();
    let folds = build_folds(s.categories.len(), s.n_folds).unwrap();
    for fold in &folds {
        let mut audit = SamplerAudit::default();
        for epoch in 0..5 {
            let q = epoch_queries(&train, fold, 9, epoch);
            for query in &q {
                assert!(train.samples[query.sample].masks.contains_key(&query.category));
            }
            audit.record(&q, fold);
        }
        assert!(audit.queries > 0);
        assert_eq!(audit.unseen, 0);
    }
}

#[test]
fn segmentation_keeps_backbone_frozen_and_is_reproducible() {
    let ck = pretrained(Exec::default());
    let s = spec();
    let train = Corpus::generate_split(&s, Split::Train, Exec::default()).unwrap();
    let fold = &build_folds(s.categories.len(), s.n_folds).unwrap()[1];
    let cfg = SegmentConfig {
        epochs: 2,
        batch_size: 6,
        ..SegmentConfig::default()
    };
    let mc = small(Mechanism::ReplaceCls);
    let run = |exec| train_segmentation(&train, fold, &ck, &mc, &cfg, 5, exec, None).unwrap();
    let a = run(Exec::Sequential);
    let b = run(Exec::default());
    assert_eq!(a.checkpoint.blob(), b.checkpoint.blob());
    assert_eq!(a.audit.unseen, 0);
    assert!(a.log.iter().all(|r| r.loss.is_finite()));
    for entry in &ck.manifest.tensors {
        assert_eq!(
            a.model.store.by_name(&entry.name).unwrap().data(),
            ck.get(&entry.name).unwrap().data(),
            "{} moved during segmentation training",
            entry.name
        );
    }
    let moved = a
        .model
        .store
        .iter()
        .filter(|(_, n, _)| n.starts_with("decoder."))
        .any(|(_, n, t)| {
            ClsClip::new(mc.clone(), a.model.vocab.clone(), 0)
                .unwrap()
                .store
                .by_name(n)
                .unwrap()
                != t
        });
    assert!(moved, "decoder never updated");

    let restored = ClsClip::from_checkpoint(&a.checkpoint).unwrap();
    let img = &train.samples[0].image;
    let t = a.model.text_cls(fold.seen[0]).unwrap();
    assert_eq!(
        a.model.predict_with(img, Some(&t)).unwrap().logits,
        restored.predict_with(img, Some(&t)).unwrap().logits
    );
}

#[test]
fn segmentation_rejects_incompatible_pretrained_checkpoint() {
    let ck = pretrained(Exec::default());
    let s = spec();
    let train = Corpus::generate_split(&s, Split::Train, Exec::default()).unwrap();
    let fold = &build_folds(s.categories.len(), s.n_folds).unwrap()[0];
    let mut wide = small(Mechanism::ReplaceCls);
    wide.visual.width = 32;
    let r = train_segmentation(
        &train,
        fold,
        &ck,
        &wide,
        &SegmentConfig::default(),
        0,
        Exec::default(),
        None,
    );
    assert!(matches!(r, Err(Error::Config(_))));
}

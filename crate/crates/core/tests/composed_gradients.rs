//! Finite-difference checks through composed model pieces.

use clsnav_core::config::{Mechanism, ModelConfig};
use clsnav_core::model::ClsClip;
use clsnav_core::nn::{Block, LayerNorm, Linear};
use clsnav_core::rng::rng_for;
use clsnav_core::tensor::gradcheck::check_params;
use clsnav_core::tensor::{ParamId, ParamStore, Tape, Tensor, Var};
use clsnav_core::text::Vocabulary;
use clsnav_core::Result;
use rand::Rng;

const SEEDS: u64 = 20;
const EPS: f64 = 1e-5;

fn rand_data(seed: u64, n: usize, scale: f64) -> Vec<f64> {
    let mut rng = rng_for(seed, "data", 0);
    (0..n).map(|_| rng.random_range(-1.0..1.0) * scale).collect()
}

fn weighted_sum(t: &mut Tape<'_>, y: Var) -> Result<Var> {
    let shape = t.shape(y).to_vec();
    let n = t.value(y).len();
    let w: Vec<f64> = (0..n).map(|i| ((i * 37 % 17) as f64 - 8.0) / 8.0).collect();
    let w = t.constant(shape, w)?;
    let p = t.mul(y, w)?;
    Ok(t.sum(p))
}

fn all_ids(store: &ParamStore) -> Vec<ParamId> {
    store.ids().collect()
}

#[test]
fn two_layer_transformer_block() {
    let mut worst: f64 = 0.0;
    for seed in 0..SEEDS {
        let mut store = ParamStore::new();
        let mut rng = rng_for(seed, "block", 0);
        let blocks: Vec<Block> = (0..2)
            .map(|i| Block::new(&mut store, &format!("b{i}"), 8, 2, 4, &mut rng))
            .collect();
        let x = rand_data(seed, 5 * 8, 1.0);
        let ids = all_ids(&store);
        let r = check_params(&store, &ids, EPS, 6, seed, |t| {
            let mut h = t.constant(vec![5, 8], x.clone())?;
            for b in &blocks {
                h = b.forward(t, h)?.out;
            }
            weighted_sum(t, h)
        })
        .unwrap();
        worst = worst.max(r.max_rel_error);
        assert!(r.max_rel_error <= 1e-3, "seed {seed}: {r:?}");
    }
    println!("two blocks: max rel error {worst:.2e}");
}

#[test]
fn embed_head_gradient() {
    for seed in 0..SEEDS {
        let mut store = ParamStore::new();
        let mut rng = rng_for(seed, "head", 0);
        let ln = LayerNorm::new(&mut store, "ln", 6);
        let head = Linear::new(&mut store, "head", 6, 5, &mut rng);
        let cls = store.add("cls", Tensor::new(vec![1, 6], rand_data(seed, 6, 1.0)).unwrap());
        let ids = all_ids(&store);
        let r = check_params(&store, &ids, EPS, 30, seed, |t| {
            let c = t.param(cls);
            let h = ln.forward(t, c)?;
            let y = head.forward(t, h)?;
            let y = t.l2_normalize_rows(y)?;
            weighted_sum(t, y)
        })
        .unwrap();
        assert!(r.max_rel_error <= 1e-4, "seed {seed}: {r:?}");
    }
}

fn tiny_config(mechanism: Mechanism) -> ModelConfig {
    let mut c = ModelConfig::default();
    c.visual.image_size = 8;
    c.visual.patch_size = 4;
    c.visual.n_layers = 3;
    c.visual.width = 8;
    c.visual.n_heads = 2;
    c.visual.mlp_ratio = 2;
    c.visual.replace_layers = vec![1, 2];
    c.visual.mechanism = mechanism;
    c.visual.vpt_prompt_count = 2;
    c.text.n_layers = 1;
    c.text.n_heads = 2;
    c.decoder.n_layers = 2;
    c.decoder.n_heads = 2;
    c
}

fn tiny_model(mechanism: Mechanism, seed: u64) -> ClsClip {
    let words: Vec<String> = ["p", "q"].iter().map(|s| s.to_string()).collect();
    ClsClip::new(tiny_config(mechanism), Vocabulary::new(&words).unwrap(), seed).unwrap()
}

fn image(seed: u64, s: usize) -> Tensor {
    Tensor::new(
        vec![3, s, s],
        rand_data(seed ^ 0xABCD, 3 * s * s, 0.5)
            .iter()
            .map(|v| v + 0.5)
            .collect(),
    )
    .unwrap()
}

fn targets(seed: u64, n: usize) -> Vec<f64> {
    rand_data(seed ^ 0x55, n, 1.0)
        .iter()
        .map(|&v| f64::from(u8::from(v > 0.0)))
        .collect()
}

/// Text encoder, visual encoder with navigation, decoder and pixel BCE,
/// differentiated with respect to every parameter.
#[test]
fn full_forward_through_bce() {
    for mech in Mechanism::ALL {
        let mut worst: f64 = 0.0;
        for seed in 0..SEEDS {
            let m = tiny_model(mech, seed);
            let img = image(seed, 8);
            let y = targets(seed, 64);
            let ids = all_ids(&m.store);
            let text_ids = m.text_ids(1).unwrap();
            let r = check_params(&m.store, &ids, EPS, 3, seed, |t| {
                let tc = m.text.cls_token(t, &text_ids)?;
                let f = m.forward(t, &img, Some(tc))?;
                t.bce_with_logits(f.logits, &y)
            })
            .unwrap();
            worst = worst.max(r.max_rel_error);
            assert!(r.max_rel_error <= 1e-3, "{mech} seed {seed}: {r:?}");
        }
        println!("{mech}: composed max rel error {worst:.2e}");
    }
}

#[test]
fn decoder_with_bce() {
    for seed in 0..SEEDS {
        let m = tiny_model(Mechanism::None, seed);
        let e = rand_data(seed, 4 * 8, 1.0);
        let y = targets(seed, 64);
        let ids: Vec<ParamId> = m
            .store
            .iter()
            .filter(|(_, n, _)| n.starts_with("decoder.") || *n == "visual.pos")
            .map(|(id, _, _)| id)
            .collect();
        let r = check_params(&m.store, &ids, EPS, 8, seed, |t| {
            let x = t.constant(vec![4, 8], e.clone())?;
            let l = m.decoder.decode(t, x)?;
            t.bce_with_logits(l, &y)
        })
        .unwrap();
        assert!(r.max_rel_error <= 1e-3, "seed {seed}: {r:?}");
    }
}

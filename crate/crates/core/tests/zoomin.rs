//! Proposal generators, crop/resize plumbing and union aggregation.

use clsnav_core::config::ModelConfig;
use clsnav_core::data::{generate_sample, Corpus, ObjectParams, Split, SynthSample, SynthSpec};
use clsnav_core::mask::Mask;
use clsnav_core::model::ClsClip;
use clsnav_core::par::Exec;
use clsnav_core::rng::rng_for;
use clsnav_core::text::Vocabulary;
use clsnav_core::zoomin::*;
use clsnav_core::Error;
use proptest::prelude::*;

fn spec() -> SynthSpec {
    SynthSpec {
        seed: 5,
        ..SynthSpec::default()
    }
}

fn one_square() -> SynthSample {
    let spec = SynthSpec {
        min_objects: 1,
        max_objects: 1,
        ..spec()
    };
    let mut s = generate_sample(&spec, false, 0, &mut rng_for(1, "sq", 0)).unwrap();
    let o = ObjectParams {
        category: 1,
        x0: 10,
        y0: 10,
        size: 6,
        phase: 0,
    };
    s.objects = vec![o];
    s.masks = [(1, o.mask(32))].into();
    s
}

#[test]
fn oracle_box_of_a_square() {
    let set = propose_regions(&one_square(), &spec(), ProposalSource::Oracle, &mut rng_for(0, "r", 0));
    assert_eq!(
        set.proposals,
        vec![RegionProposal {
            bbox: [10, 10, 16, 16],
            category_id: 1,
            score: 1.0
        }]
    );
}

#[test]
fn blank_image_has_no_proposals() {
    let mut s = one_square();
    s.objects.clear();
    s.masks.clear();
    s.image.data_mut().iter_mut().for_each(|v| *v = 0.4);
    for src in ProposalSource::ALL {
        assert!(propose_regions(&s, &spec(), src, &mut rng_for(0, "r", 0))
            .proposals
            .is_empty());
    }
}

#[test]
fn jitter_is_reproducible_and_bounded() {
    let c = Corpus::generate(&spec(), Split::Eval, 30, Exec::default()).unwrap();
    for s in &c.samples {
        let a = propose_regions(
            s,
            &spec(),
            ProposalSource::OracleJittered,
            &mut rng_for(3, "j", s.index as u64),
        );
        let b = propose_regions(
            s,
            &spec(),
            ProposalSource::OracleJittered,
            &mut rng_for(3, "j", s.index as u64),
        );
        assert_eq!(a, b);
        let o = propose_regions(s, &spec(), ProposalSource::Oracle, &mut rng_for(0, "r", 0));
        for (j, t) in a.proposals.iter().zip(&o.proposals) {
            assert!(bbox_valid(j.bbox, 32, 32));
            let w = (t.bbox[2] - t.bbox[0]) as f64;
            for k in [0, 2] {
                assert!((j.bbox[k] as f64 - t.bbox[k] as f64).abs() <= 0.2 * w + 0.5 + 1.0);
            }
        }
    }
}

#[test]
fn oracle_boxes_cover_every_gt_pixel() {
    let c = Corpus::generate(&spec(), Split::Tiny, 50, Exec::default()).unwrap();
    for s in &c.samples {
        let set = propose_regions(s, &spec(), ProposalSource::Oracle, &mut rng_for(0, "r", 0));
        for (&cat, m) in &s.masks {
            let boxes = boxes_as_mask(&set, cat, 32);
            for y in 0..32 {
                for x in 0..32 {
                    assert!(!m.get(x, y) || boxes.get(x, y));
                }
            }
        }
    }
}

#[test]
fn blob_detector_finds_objects_with_right_category() {
    let c = Corpus::generate(&spec(), Split::Eval, 60, Exec::default()).unwrap();
    let (mut hit, mut total) = (0, 0);
    for s in &c.samples {
        let set = propose_regions(s, &spec(), ProposalSource::Blob, &mut rng_for(0, "r", 0));
        for o in &s.objects {
            total += 1;
            let b = o.mask(32).bbox().unwrap();
            if set.proposals.iter().any(|p| p.category_id == o.category && p.bbox == b) {
                hit += 1;
            }
        }
    }
    // dot clusters split into several blobs; everything else is exact
    assert!(hit as f64 >= 0.8 * total as f64, "{hit}/{total}");
}

#[test]
fn filter_keeps_matching_in_order() {
    let p = |b: usize, c: usize| RegionProposal {
        bbox: [b, b, b + 2, b + 2],
        category_id: c,
        score: 1.0,
    };
    let set = RegionSet {
        proposals: vec![p(1, 0), p(4, 1), p(8, 0)],
        source: ProposalSource::Oracle,
    };
    assert_eq!(filter_regions(&set, 0), vec![[1, 1, 3, 3], [8, 8, 10, 10]]);
    assert!(filter_regions(&set, 5).is_empty());
    let same = RegionSet {
        proposals: vec![p(1, 0), p(8, 0)],
        ..set.clone()
    };
    assert_eq!(filter_regions(&same, 0).len(), 2);
    let names: Vec<String> = ["a", "b"].iter().map(|s| s.to_string()).collect();
    let rec = set.to_record(&names);
    let json = serde_json::to_string(&rec).unwrap();
    assert!(json.contains("\"category\":\"b\""));
    assert_eq!(RegionSet::from_record(&rec, &names).unwrap(), set);
}

#[test]
fn crop_windows_stay_inside() {
    assert_eq!(crop_window([0, 0, 32, 32], 32, 3.0), (0, 0, 32));
    assert_eq!(crop_window([10, 10, 14, 14], 32, 3.0), (6, 6, 12));
    assert_eq!(crop_window([0, 0, 4, 4], 32, 3.0), (0, 0, 12));
    assert_eq!(crop_window([29, 28, 32, 32], 32, 3.0), (20, 20, 12));
    assert_eq!(crop_window([2, 2, 6, 12], 32, 1.0), (0, 2, 10));
}

#[test]
fn resize_round_trips() {
    let ones = Mask::full(32, 32);
    for side in [2, 5, 12, 32, 40] {
        assert_eq!(resize_nearest(&resize_nearest(&ones, side), 32), ones);
    }
    let s = &Corpus::generate(&spec(), Split::Eval, 1, Exec::default())
        .unwrap()
        .samples[0];
    assert_eq!(resize_bilinear(&s.image, 0, 0, 32, 32), s.image);
    let m = s.masks.values().next().unwrap();
    assert_eq!(resize_nearest(m, 32), *m);
}

#[test]
fn full_image_box_equals_plain_prediction() {
    let words: Vec<String> = spec().categories;
    let mut cfg = ModelConfig::default();
    cfg.visual.n_layers = 5;
    cfg.text.n_layers = 1;
    let model = ClsClip::new(cfg, Vocabulary::new(&words).unwrap(), 3).unwrap();
    let s = &Corpus::generate(&spec(), Split::Eval, 1, Exec::default())
        .unwrap()
        .samples[0];
    let t = model.text_cls(2).unwrap();
    let plain = model.predict_with(&s.image, Some(&t)).unwrap().binarize();
    let zoom = segment_region(&model, &s.image, [0, 0, 32, 32], &t, 3.0).unwrap();
    assert_eq!(zoom, plain);
    assert!(matches!(
        segment_region(&model, &s.image, [3, 3, 4, 10], &t, 3.0),
        Err(Error::DegenerateBox(_))
    ));
    let local = segment_region(&model, &s.image, [5, 6, 11, 9], &t, 3.0).unwrap();
    assert_eq!((local.width(), local.height()), (6, 3));
}

#[test]
fn aggregate_examples() {
    assert!(aggregate_masks(&[], 16).is_empty());
    let a = ([0, 0, 4, 4], Mask::from_fn(4, 4, |x, _| x == 3));
    let b = ([2, 0, 6, 4], Mask::empty(4, 4));
    let u = aggregate_masks(&[a.clone(), b.clone()], 8);
    assert!(u.get(3, 0));
    assert_eq!(u.count(), 4);
}

fn region() -> impl Strategy<Value = (BBox, Mask)> {
    (0usize..12, 0usize..12, 1usize..6, 1usize..6).prop_flat_map(|(x0, y0, w, h)| {
        proptest::collection::vec(any::<bool>(), w * h)
            .prop_map(move |bits| ([x0, y0, x0 + w, y0 + h], Mask::from_bits(w, h, bits).unwrap()))
    })
}

/// A union result re-expressed as a single full-canvas region.
fn as_region(m: Mask) -> (BBox, Mask) {
    ([0, 0, m.width(), m.height()], m)
}

const S: usize = 16;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn union_is_idempotent(rs in proptest::collection::vec(region(), 0..5)) {
        let once = aggregate_masks(&rs, S);
        let mut twice = rs.clone();
        twice.extend(rs.iter().cloned());
        prop_assert_eq!(&aggregate_masks(&twice, S), &once);
        prop_assert_eq!(aggregate_masks(&[as_region(once.clone())], S), once);
    }

    #[test]
    fn union_is_commutative(rs in proptest::collection::vec(region(), 0..6), seed in any::<u64>()) {
        let mut shuffled = rs.clone();
        use rand::seq::SliceRandom;
        shuffled.shuffle(&mut rng_for(seed, "shuffle", 0));
        prop_assert_eq!(aggregate_masks(&rs, S), aggregate_masks(&shuffled, S));
    }

    #[test]
    fn union_is_associative(a in region(), b in region(), c in region()) {
        let ab = aggregate_masks(&[a.clone(), b.clone()], S);
        let bc = aggregate_masks(&[b.clone(), c.clone()], S);
        let left = aggregate_masks(&[as_region(ab), c.clone()], S);
        let right = aggregate_masks(&[a.clone(), as_region(bc)], S);
        let flat = aggregate_masks(&[a, b, c], S);
        prop_assert_eq!(&left, &flat);
        prop_assert_eq!(&right, &flat);
    }

    #[test]
    fn union_is_monotone_and_inside_boxes(rs in proptest::collection::vec(region(), 0..5), extra in region()) {
        let before = aggregate_masks(&rs, S);
        let mut more = rs.clone();
        more.push(extra);
        let after = aggregate_masks(&more, S);
        let mut boxes = Mask::empty(S, S);
        for (b, _) in &more {
            for y in b[1]..b[3] {
                for x in b[0]..b[2] {
                    boxes.set(x, y, true);
                }
            }
        }
        for y in 0..S {
            for x in 0..S {
                prop_assert!(!before.get(x, y) || after.get(x, y));
                prop_assert!(!after.get(x, y) || boxes.get(x, y));
            }
        }
    }
}

//! Metrics against a brute-force pixel-counting oracle.

use std::collections::BTreeMap;

use clsnav_core::mask::Mask;
use clsnav_core::metrics::{fb_iou, iou, miou, IouAccumulator};
use clsnav_core::rng::rng_for;
use proptest::prelude::*;
use rand::Rng;

/// Counts by walking coordinates, independent of the bit-vector layout.
fn oracle_counts(p: &Mask, g: &Mask, fg: bool) -> (usize, usize) {
    let (mut i, mut u) = (0, 0);
    for y in 0..p.height() {
        for x in 0..p.width() {
            let (a, b) = (p.get(x, y) == fg, g.get(x, y) == fg);
            if a && b {
                i += 1;
            }
            if a || b {
                u += 1;
            }
        }
    }
    (i, u)
}

fn oracle_ratio((i, u): (usize, usize)) -> f64 {
    if u == 0 {
        1.0
    } else {
        i as f64 / u as f64
    }
}

fn random_mask(rng: &mut impl Rng, w: usize, h: usize) -> Mask {
    let density: f64 = rng.random_range(0.0..1.0);
    let mode = rng.random_range(0..4);
    match mode {
        0 => Mask::empty(w, h),
        1 => {
            let (x0, y0) = (rng.random_range(0..w), rng.random_range(0..h));
            let (x1, y1) = (rng.random_range(x0..=w), rng.random_range(y0..=h));
            Mask::from_fn(w, h, |x, y| x >= x0 && x < x1 && y >= y0 && y < y1)
        }
        _ => {
            let bits = (0..w * h).map(|_| rng.random_bool(density)).collect();
            Mask::from_bits(w, h, bits).unwrap()
        }
    }
}

#[test]
fn hundred_random_pairs_match_oracle_exactly() {
    let mut rng = rng_for(7, "metrics", 0);
    for _ in 0..100 {
        let (w, h) = (rng.random_range(1..=64), rng.random_range(1..=64));
        let p = random_mask(&mut rng, w, h);
        let g = random_mask(&mut rng, w, h);
        assert_eq!(iou(&p, &g).unwrap(), oracle_ratio(oracle_counts(&p, &g, true)));
        let fb = 0.5 * (oracle_ratio(oracle_counts(&p, &g, true)) + oracle_ratio(oracle_counts(&p, &g, false)));
        assert_eq!(fb_iou(&p, &g).unwrap(), fb);
    }
}

#[test]
fn miou_matches_independent_mean() {
    let mut rng = rng_for(8, "miou", 0);
    for _ in 0..100 {
        let n = rng.random_range(1..10);
        let map: BTreeMap<usize, f64> = (0..n).map(|c| (c * 3, rng.random_range(0.0..1.0))).collect();
        let classes: Vec<usize> = map.keys().copied().collect();
        let mut s = 0.0;
        for c in &classes {
            s += map[c];
        }
        assert_eq!(miou(&map, &classes).unwrap(), s / n as f64);
    }
    let all_one: BTreeMap<usize, f64> = (0..4).map(|c| (c, 1.0)).collect();
    assert_eq!(miou(&all_one, &[0, 1, 2, 3]).unwrap(), 1.0);
}

#[test]
fn full_prediction_on_half_gt() {
    let gt = Mask::from_fn(64, 64, |_, y| y < 32);
    assert_eq!(iou(&Mask::full(64, 64), &gt).unwrap(), 0.5);
    assert_eq!(fb_iou(&gt.complement(), &gt).unwrap(), 0.0);
}

#[test]
fn accumulator_sums_counts_per_class() {
    let mut rng = rng_for(9, "acc", 0);
    let mut acc = IouAccumulator::new();
    let mut totals: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for k in 0..60 {
        let p = random_mask(&mut rng, 16, 16);
        let g = random_mask(&mut rng, 16, 16);
        let c = k % 3;
        acc.add(c, &p, &g).unwrap();
        let (i, u) = oracle_counts(&p, &g, true);
        let e = totals.entry(c).or_default();
        e.0 += i;
        e.1 += u;
    }
    for (c, v) in acc.per_class() {
        assert_eq!(v, oracle_ratio(totals[&c]));
    }
    let mut halves = (IouAccumulator::new(), IouAccumulator::new());
    let mut rng = rng_for(10, "acc", 0);
    let mut whole = IouAccumulator::new();
    for k in 0..20 {
        let p = random_mask(&mut rng, 8, 8);
        let g = random_mask(&mut rng, 8, 8);
        whole.add(k % 2, &p, &g).unwrap();
        if k < 10 { &mut halves.0 } else { &mut halves.1 }
            .add(k % 2, &p, &g)
            .unwrap();
    }
    halves.0.merge(&halves.1);
    assert_eq!(halves.0, whole);
}

fn mask_strategy() -> impl Strategy<Value = (Mask, Mask)> {
    (1usize..24, 1usize..24).prop_flat_map(|(w, h)| {
        (
            proptest::collection::vec(any::<bool>(), w * h),
            proptest::collection::vec(any::<bool>(), w * h),
        )
            .prop_map(move |(a, b)| (Mask::from_bits(w, h, a).unwrap(), Mask::from_bits(w, h, b).unwrap()))
    })
}

proptest! {
    #[test]
    fn iou_is_symmetric_and_bounded((a, b) in mask_strategy()) {
        let x = iou(&a, &b).unwrap();
        prop_assert_eq!(x, iou(&b, &a).unwrap());
        prop_assert!((0.0..=1.0).contains(&x));
        if !a.is_empty() {
            prop_assert_eq!(iou(&a, &a).unwrap(), 1.0);
        }
    }

    #[test]
    fn fb_iou_complement_invariant((a, b) in mask_strategy()) {
        prop_assert_eq!(fb_iou(&a, &b).unwrap(), fb_iou(&a.complement(), &b.complement()).unwrap());
    }

    #[test]
    fn miou_invariant_under_relabeling(vals in proptest::collection::vec(0.0f64..1.0, 1..10), rot in 0usize..10) {
        let n = vals.len();
        let map: BTreeMap<usize, f64> = vals.iter().copied().enumerate().collect();
        let relabeled: BTreeMap<usize, f64> = vals.iter().enumerate().map(|(i, &v)| ((i + rot) % n + 100, v)).collect();
        let a = miou(&map, &(0..n).collect::<Vec<_>>()).unwrap();
        let b = miou(&relabeled, &(100..100 + n).collect::<Vec<_>>()).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
    }
}

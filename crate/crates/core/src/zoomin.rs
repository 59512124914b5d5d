//! Region proposals, per-region segmentation and union aggregation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{rgb_to_hsv, SynthSample, SynthSpec};
use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::model::ClsClip;
use crate::tensor::Tensor;
use crate::text::TextCls;

/// Saturation above which a pixel counts as object colour.
pub const BLOB_SATURATION: f64 = 0.6;
/// Components smaller than this are treated as noise.
pub const BLOB_MIN_PIXELS: usize = 3;
/// Maximum jitter of each box edge, as a fraction of the box extent.
pub const JITTER_FRACTION: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(rename_all = "snake_case")]
pub enum ProposalSource {
    Oracle,
    OracleJittered,
    Blob,
}

impl ProposalSource {
    pub const ALL: [ProposalSource; 3] = [
        ProposalSource::Oracle,
        ProposalSource::OracleJittered,
        ProposalSource::Blob,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ProposalSource::Oracle => "oracle",
            ProposalSource::OracleJittered => "oracle_jittered",
            ProposalSource::Blob => "blob",
        }
    }
}

/// Half-open pixel box `(x0, y0, x1, y1)`.
pub type BBox = [usize; 4];

pub fn bbox_valid(b: BBox, width: usize, height: usize) -> bool {
    b[0] < b[2] && b[1] < b[3] && b[2] <= width && b[3] <= height
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionProposal {
    pub bbox: BBox,
    pub category_id: usize,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionSet {
    pub proposals: Vec<RegionProposal>,
    pub source: ProposalSource,
}

/// On-disk form of a region set, with category words.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionSetRecord {
    pub source: ProposalSource,
    pub proposals: Vec<ProposalRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProposalRecord {
    pub bbox: BBox,
    pub category: String,
    pub score: f64,
}

impl RegionSet {
    pub fn to_record(&self, names: &[String]) -> RegionSetRecord {
        RegionSetRecord {
            source: self.source,
            proposals: self
                .proposals
                .iter()
                .map(|p| ProposalRecord {
                    bbox: p.bbox,
                    category: names[p.category_id].clone(),
                    score: p.score,
                })
                .collect(),
        }
    }

    pub fn from_record(rec: &RegionSetRecord, names: &[String]) -> Result<Self> {
        let proposals = rec
            .proposals
            .iter()
            .map(|p| {
                let category_id = names
                    .iter()
                    .position(|n| *n == p.category)
                    .ok_or_else(|| Error::UnknownWord(p.category.clone()))?;
                Ok(RegionProposal {
                    bbox: p.bbox,
                    category_id,
                    score: p.score,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            proposals,
            source: rec.source,
        })
    }
}

/// Proposes regions for `sample` with the given generator.
pub fn propose_regions(
    sample: &SynthSample,
    spec: &SynthSpec,
    source: ProposalSource,
    rng: &mut impl Rng,
) -> RegionSet {
    let s = sample.image_size();
    let proposals = match source {
        ProposalSource::Oracle => oracle_boxes(sample),
        ProposalSource::OracleJittered => oracle_boxes(sample)
            .into_iter()
            .map(|p| RegionProposal {
                bbox: jitter(p.bbox, s, rng),
                ..p
            })
            .collect(),
        ProposalSource::Blob => blob_boxes(&sample.image, spec),
    };
    RegionSet { proposals, source }
}

fn oracle_boxes(sample: &SynthSample) -> Vec<RegionProposal> {
    let s = sample.image_size();
    sample
        .objects
        .iter()
        .filter_map(|o| {
            o.mask(s).bbox().map(|bbox| RegionProposal {
                bbox,
                category_id: o.category,
                score: 1.0,
            })
        })
        .collect()
}

/// Moves each edge independently by up to [`JITTER_FRACTION`] of the box
/// extent, clamped to the image and kept non-empty.
pub fn jitter(b: BBox, size: usize, rng: &mut impl Rng) -> BBox {
    let w = (b[2] - b[0]) as f64;
    let h = (b[3] - b[1]) as f64;
    let mut d = |extent: f64| -> f64 {
        let m = JITTER_FRACTION * extent;
        rng.random_range(-m..=m)
    };
    let (dx0, dy0, dx1, dy1) = (d(w), d(h), d(w), d(h));
    let clamp = |v: f64| v.round().clamp(0.0, size as f64) as usize;
    let mut x0 = clamp(b[0] as f64 + dx0);
    let mut y0 = clamp(b[1] as f64 + dy0);
    let mut x1 = clamp(b[2] as f64 + dx1);
    let mut y1 = clamp(b[3] as f64 + dy1);
    if x1 <= x0 {
        x1 = (x0 + 1).min(size);
        x0 = x1 - 1;
    }
    if y1 <= y0 {
        y1 = (y0 + 1).min(size);
        y0 = y1 - 1;
    }
    [x0, y0, x1, y1]
}

fn hue_distance(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(1.0);
    d.min(1.0 - d)
}

/// Connected components of saturated pixels, labelled by majority
/// nearest category hue. Score is the share of pixels voting for the label.
pub fn blob_boxes(image: &Tensor, spec: &SynthSpec) -> Vec<RegionProposal> {
    let s = image.shape()[1];
    let px = image.data();
    let n_cat = spec.categories.len();
    let label: Vec<Option<usize>> = (0..s * s)
        .map(|p| {
            let (h, sat, v) = rgb_to_hsv([px[p], px[s * s + p], px[2 * s * s + p]]);
            (sat > BLOB_SATURATION && v > 0.2).then(|| {
                (0..n_cat)
                    .min_by(|&a, &b| hue_distance(h, spec.hue(a)).total_cmp(&hue_distance(h, spec.hue(b))))
                    .expect("at least one category")
            })
        })
        .collect();
    let mut seen = vec![false; s * s];
    let mut out = Vec::new();
    for start in 0..s * s {
        if seen[start] || label[start].is_none() {
            continue;
        }
        let mut stack = vec![start];
        seen[start] = true;
        let mut votes = vec![0usize; n_cat];
        let mut bbox = [usize::MAX, usize::MAX, 0, 0];
        let mut count = 0;
        while let Some(p) = stack.pop() {
            let (x, y) = (p % s, p / s);
            count += 1;
            votes[label[p].expect("component pixels are labelled")] += 1;
            bbox = [bbox[0].min(x), bbox[1].min(y), bbox[2].max(x + 1), bbox[3].max(y + 1)];
            let mut push = |q: usize| {
                if !seen[q] && label[q].is_some() {
                    seen[q] = true;
                    stack.push(q);
                }
            };
            if x > 0 {
                push(p - 1);
            }
            if x + 1 < s {
                push(p + 1);
            }
            if y > 0 {
                push(p - s);
            }
            if y + 1 < s {
                push(p + s);
            }
        }
        if count < BLOB_MIN_PIXELS {
            continue;
        }
        let (cat, &best) = votes
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
            .expect("non-empty votes");
        out.push(RegionProposal {
            bbox,
            category_id: cat,
            score: best as f64 / count as f64,
        });
    }
    out
}

/// Boxes of the proposals labelled `category`, in proposal order.
pub fn filter_regions(regions: &RegionSet, category: usize) -> Vec<BBox> {
    regions
        .proposals
        .iter()
        .filter(|p| p.category_id == category)
        .map(|p| p.bbox)
        .collect()
}

/// Square crop window around a box: side `clamp(context · max(w, h),
/// max(w, h), S)`, centred on the box and shifted to lie inside the image.
pub fn crop_window(b: BBox, image_size: usize, context: f64) -> (usize, usize, usize) {
    let w = b[2] - b[0];
    let h = b[3] - b[1];
    let long = w.max(h);
    let side = ((context * long as f64).round() as usize).clamp(long, image_size);
    let place = |lo: usize, hi: usize| -> usize {
        let centre2 = lo + hi; // twice the centre
        let start = (centre2 as isize - side as isize).div_euclid(2);
        start.clamp(0, (image_size - side) as isize) as usize
    };
    (place(b[0], b[2]), place(b[1], b[3]), side)
}

/// Bilinear resize of a `[3 × h × w]` image region to `[3 × out × out]`,
/// sampling at pixel centres.
pub fn resize_bilinear(image: &Tensor, x0: usize, y0: usize, side: usize, out: usize) -> Tensor {
    let s = image.shape()[1];
    let px = image.data();
    let scale = side as f64 / out as f64;
    let mut data = vec![0.0; 3 * out * out];
    let coord = |o: usize| -> (usize, usize, f64) {
        let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (side - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(side - 1);
        (i0, i1, src - i0 as f64)
    };
    for oy in 0..out {
        let (ya, yb, fy) = coord(oy);
        for ox in 0..out {
            let (xa, xb, fx) = coord(ox);
            for c in 0..3 {
                let at = |y: usize, x: usize| px[(c * s + y0 + y) * s + x0 + x];
                let top = at(ya, xa) * (1.0 - fx) + at(ya, xb) * fx;
                let bot = at(yb, xa) * (1.0 - fx) + at(yb, xb) * fx;
                data[(c * out + oy) * out + ox] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    Tensor::new(vec![3, out, out], data).expect("valid shape")
}

/// Nearest-neighbour resize of a square mask to `side × side`.
pub fn resize_nearest(mask: &Mask, side: usize) -> Mask {
    let n = mask.width();
    Mask::from_fn(side, side, |x, y| {
        let sx = ((x as f64 + 0.5) * n as f64 / side as f64).floor() as usize;
        let sy = ((y as f64 + 0.5) * n as f64 / side as f64).floor() as usize;
        mask.get(sx.min(n - 1), sy.min(n - 1))
    })
}

/// Segments one region: crop a context window, resize to model input,
/// segment, resize back and keep the part inside `bbox`. The result is in
/// bbox-local coordinates.
pub fn segment_region(model: &ClsClip, image: &Tensor, bbox: BBox, text: &TextCls, context: f64) -> Result<Mask> {
    let s = model.config.visual.image_size;
    if image.shape() != [3, s, s] || !bbox_valid(bbox, s, s) {
        return Err(Error::DegenerateBox(bbox));
    }
    let (w, h) = (bbox[2] - bbox[0], bbox[3] - bbox[1]);
    if w < 2 || h < 2 {
        return Err(Error::DegenerateBox(bbox));
    }
    let (wx, wy, side) = crop_window(bbox, s, context);
    let crop = resize_bilinear(image, wx, wy, side, s);
    let pred = model.predict_with(&crop, Some(text))?.binarize();
    let back = resize_nearest(&pred, side);
    Ok(Mask::from_fn(w, h, |x, y| back.get(bbox[0] - wx + x, bbox[1] - wy + y)))
}

/// Hard union of region masks placed at their boxes.
pub fn aggregate_masks(regions: &[(BBox, Mask)], image_size: usize) -> Mask {
    let mut out = Mask::empty(image_size, image_size);
    for (b, m) in regions {
        for y in 0..m.height() {
            for x in 0..m.width() {
                let (gx, gy) = (b[0] + x, b[1] + y);
                if m.get(x, y) && gx < image_size && gy < image_size && gx < b[2] && gy < b[3] {
                    out.set(gx, gy, true);
                }
            }
        }
    }
    out
}

/// Zoom-in prediction for one query: segment every box of the category
/// and take the union. Boxes too small to segment are skipped.
pub fn zoom_in_predict(
    model: &ClsClip,
    image: &Tensor,
    regions: &RegionSet,
    category: usize,
    text: &TextCls,
    context: f64,
) -> Result<Mask> {
    let s = model.config.visual.image_size;
    let mut parts = Vec::new();
    for b in filter_regions(regions, category) {
        match segment_region(model, image, b, text, context) {
            Ok(m) => parts.push((b, m)),
            Err(Error::DegenerateBox(_)) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(aggregate_masks(&parts, s))
}

/// The boxes of a category filled in, used as a mask directly.
pub fn boxes_as_mask(regions: &RegionSet, category: usize, image_size: usize) -> Mask {
    let parts: Vec<(BBox, Mask)> = filter_regions(regions, category)
        .into_iter()
        .map(|b| (b, Mask::full(b[2] - b[0], b[3] - b[1])))
        .collect();
    aggregate_masks(&parts, image_size)
}

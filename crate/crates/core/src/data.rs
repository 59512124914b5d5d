//! Synthetic shapes corpus with category folds.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::par::Exec;
use crate::pnm;
use crate::rng::rng_for;
use crate::tensor::Tensor;

pub const DEFAULT_CATEGORIES: [&str; 8] = [
    "circle",
    "square",
    "triangle",
    "ring",
    "cross",
    "bar",
    "diamond",
    "dot-cluster",
];

pub const MAX_PLACEMENT_ATTEMPTS: usize = 1000;

/// Saturation of object pixels; the background stays well below it.
pub const OBJECT_SATURATION: f64 = 0.85;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub image_size: usize,
    pub categories: Vec<String>,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Object side range for ordinary samples.
    pub min_size: usize,
    pub max_size: usize,
    /// Standard deviation of background luminance noise.
    pub noise: f64,
    pub n_folds: usize,
    pub train_samples: usize,
    pub eval_samples: usize,
    pub tiny_samples: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            image_size: 32,
            categories: DEFAULT_CATEGORIES.iter().map(|s| s.to_string()).collect(),
            min_objects: 1,
            max_objects: 3,
            min_size: 8,
            max_size: 16,
            noise: 0.04,
            n_folds: 4,
            train_samples: 2000,
            eval_samples: 400,
            tiny_samples: 200,
            seed: 0,
        }
    }
}

/// Which population a corpus split draws from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Eval,
    /// Evaluation images whose objects are all tiny.
    Tiny,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Eval, Split::Tiny];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Eval => "eval",
            Split::Tiny => "tiny",
        }
    }

    pub fn is_tiny(self) -> bool {
        self == Split::Tiny
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.n_folds == 0 || self.categories.len() < 2 * self.n_folds {
            return err(format!(
                "{} categories cannot form {} folds of at least 2",
                self.categories.len(),
                self.n_folds
            ));
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return err("need 1 <= min_objects <= max_objects".into());
        }
        if self.min_size < 2 || self.min_size > self.max_size || self.max_size + 2 > self.image_size {
            return err(format!(
                "object sizes {}..={} do not fit a {} px image",
                self.min_size, self.max_size, self.image_size
            ));
        }
        if self.image_size / 8 < 3 {
            return err("image too small for tiny objects".into());
        }
        if !(0.0..=0.5).contains(&self.noise) {
            return err(format!("noise {} outside [0, 0.5]", self.noise));
        }
        Ok(())
    }

    pub fn count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train_samples,
            Split::Eval => self.eval_samples,
            Split::Tiny => self.tiny_samples,
        }
    }

    /// Inclusive object side range for a split.
    pub fn size_range(&self, tiny: bool) -> (usize, usize) {
        if tiny {
            (3, self.image_size / 8)
        } else {
            (self.min_size, self.max_size)
        }
    }

    /// Hue in `[0, 1)` assigned to each category.
    pub fn hue(&self, category: usize) -> f64 {
        category as f64 / self.categories.len() as f64
    }
}

/// Generative parameters of one object, sufficient to redraw its mask.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectParams {
    pub category: usize,
    pub x0: usize,
    pub y0: usize,
    pub size: usize,
    /// Texture offset.
    pub phase: usize,
}

impl ObjectParams {
    /// Half-open box `(x0, y0, x1, y1)`.
    pub fn bbox(&self) -> [usize; 4] {
        [self.x0, self.y0, self.x0 + self.size, self.y0 + self.size]
    }

    fn contains_local(&self, shape: usize, lx: usize, ly: usize) -> bool {
        let s = self.size as f64;
        let (x, y) = (lx as f64 + 0.5, ly as f64 + 0.5);
        let (cx, cy) = (s / 2.0, s / 2.0);
        let r = ((x - cx).powi(2) + (y - cy).powi(2)).sqrt();
        match shape % 8 {
            0 => r <= s / 2.0,
            1 => true,
            2 => (x - cx).abs() <= 0.5 * y,
            3 => r <= s / 2.0 && r >= s / 4.0,
            4 => (x - cx).abs() <= s / 6.0 || (y - cy).abs() <= s / 6.0,
            5 => (y - cy).abs() <= (s / 6.0).max(0.5),
            6 => (x - cx).abs() + (y - cy).abs() <= s / 2.0,
            _ => {
                let q = s / 4.0;
                let dr = (s / 5.0).max(0.6);
                [(q, q), (3.0 * q, q), (q, 3.0 * q), (3.0 * q, 3.0 * q)]
                    .iter()
                    .any(|&(dx, dy)| ((x - dx).powi(2) + (y - dy).powi(2)).sqrt() <= dr)
            }
        }
    }

    /// Object mask on a `size × size` canvas; never empty.
    pub fn mask(&self, image_size: usize) -> Mask {
        let shape = self.category;
        let [x0, y0, x1, y1] = self.bbox();
        let mut m = Mask::from_fn(image_size, image_size, |x, y| {
            x >= x0 && x < x1 && y >= y0 && y < y1 && self.contains_local(shape, x - x0, y - y0)
        });
        if m.is_empty() {
            m.set(x0 + self.size / 2, y0 + self.size / 2, true);
        }
        m
    }

    /// Multiplicative brightness texture at absolute pixel `(x, y)`.
    fn texture(&self, x: usize, y: usize) -> f64 {
        let (x, y) = (x + self.phase, y + self.phase);
        let dark = match self.category % 4 {
            0 => false,
            1 => y % 2 == 0,
            2 => x % 2 == 0,
            _ => (x + y) % 2 == 0,
        };
        if dark {
            0.7
        } else {
            1.0
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSample {
    pub index: usize,
    /// `[3 × S × S]`, every value a multiple of 1/255.
    pub image: Tensor,
    /// Semantic mask per present category.
    pub masks: BTreeMap<usize, Mask>,
    pub objects: Vec<ObjectParams>,
}

impl SynthSample {
    pub fn categories(&self) -> Vec<usize> {
        self.masks.keys().copied().collect()
    }

    pub fn image_size(&self) -> usize {
        self.image.shape()[1]
    }
}

pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn dequantize(b: u8) -> f64 {
    f64::from(b) / 255.0
}

pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let i = h6.floor() as usize % 6;
    let f = h6 - h6.floor();
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// `(hue, saturation, value)` of an RGB triple.
pub fn rgb_to_hsv(rgb: [f64; 3]) -> (f64, f64, f64) {
    let [r, g, b] = rgb;
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let c = max - min;
    let s = if max > 0.0 { c / max } else { 0.0 };
    if c == 0.0 {
        return (0.0, s, max);
    }
    let h = if max == r {
        ((g - b) / c).rem_euclid(6.0)
    } else if max == g {
        (b - r) / c + 2.0
    } else {
        (r - g) / c + 4.0
    };
    (h / 6.0, s, max)
}

fn overlaps(a: [usize; 4], b: [usize; 4], margin: usize) -> bool {
    a[0] < b[2] + margin && b[0] < a[2] + margin && a[1] < b[3] + margin && b[1] < a[3] + margin
}

/// Draws one sample. Placement is rejection-sampled so that object boxes
/// keep a one-pixel gap.
pub fn generate_sample(spec: &SynthSpec, tiny: bool, index: usize, rng: &mut impl Rng) -> Result<SynthSample> {
    let s = spec.image_size;
    let (lo, hi) = spec.size_range(tiny);
    let count = rng.random_range(spec.min_objects..=spec.max_objects);
    let mut objects: Vec<ObjectParams> = Vec::with_capacity(count);
    let mut attempts = 0;
    while objects.len() < count {
        attempts += 1;
        if attempts > MAX_PLACEMENT_ATTEMPTS {
            return Err(Error::Placement(MAX_PLACEMENT_ATTEMPTS));
        }
        let size = rng.random_range(lo..=hi);
        let o = ObjectParams {
            category: rng.random_range(0..spec.categories.len()),
            x0: rng.random_range(0..=s - size),
            y0: rng.random_range(0..=s - size),
            size,
            phase: rng.random_range(0..2),
        };
        if objects.iter().all(|p| !overlaps(p.bbox(), o.bbox(), 1)) {
            objects.push(o);
        }
    }

    let noise = Normal::new(0.0, spec.noise.max(1e-12)).expect("finite noise");
    let chroma = Normal::new(0.0, spec.noise.max(1e-12) / 4.0).expect("finite noise");
    let base = rng.random_range(0.3..0.55);
    let tint: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.02..0.02));
    let mut px = vec![0u8; 3 * s * s];
    for y in 0..s {
        for x in 0..s {
            // mostly luminance noise so the background stays desaturated
            let lum = base + noise.sample(rng);
            for (c, t) in tint.iter().enumerate() {
                px[(c * s + y) * s + x] = quantize(lum + t + chroma.sample(rng));
            }
        }
    }
    let mut masks: BTreeMap<usize, Mask> = BTreeMap::new();
    for o in &objects {
        let m = o.mask(s);
        for y in 0..s {
            for x in 0..s {
                if m.get(x, y) {
                    let rgb = hsv_to_rgb(spec.hue(o.category), OBJECT_SATURATION, 0.95 * o.texture(x, y));
                    for (c, v) in rgb.iter().enumerate() {
                        px[(c * s + y) * s + x] = quantize(*v);
                    }
                }
            }
        }
        masks
            .entry(o.category)
            .and_modify(|acc| acc.or_assign(&m).expect("same canvas"))
            .or_insert(m);
    }
    let image = Tensor::new(vec![3, s, s], px.into_iter().map(dequantize).collect())?;
    Ok(SynthSample {
        index,
        image,
        masks,
        objects,
    })
}

/// Semantic masks rebuilt from stored object parameters.
pub fn masks_from_objects(objects: &[ObjectParams], image_size: usize) -> BTreeMap<usize, Mask> {
    let mut masks: BTreeMap<usize, Mask> = BTreeMap::new();
    for o in objects {
        let m = o.mask(image_size);
        masks
            .entry(o.category)
            .and_modify(|acc| acc.or_assign(&m).expect("same canvas"))
            .or_insert(m);
    }
    masks
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub spec: SynthSpec,
    pub split: Split,
    pub samples: Vec<SynthSample>,
}

impl Corpus {
    /// Generates `count` samples of `split`; sample `i` draws from its own
    /// seed stream, so generation order does not matter.
    pub fn generate(spec: &SynthSpec, split: Split, count: usize, exec: Exec) -> Result<Self> {
        spec.validate()?;
        let samples = exec
            .map_range(count, |i| {
                let mut rng = rng_for(spec.seed, split.as_str(), i as u64);
                generate_sample(spec, split.is_tiny(), i, &mut rng)
            })
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            spec: spec.clone(),
            split,
            samples,
        })
    }

    pub fn generate_split(spec: &SynthSpec, split: Split, exec: Exec) -> Result<Self> {
        Self::generate(spec, split, spec.count(split), exec)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Samples with exactly one object, the image-caption pairs for
    /// contrastive pretraining.
    pub fn single_object(&self) -> impl Iterator<Item = (&SynthSample, usize)> {
        self.samples
            .iter()
            .filter(|s| s.objects.len() == 1)
            .map(|s| (s, s.objects[0].category))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub fold_id: usize,
    pub seen: Vec<usize>,
    pub unseen: Vec<usize>,
}

impl FoldSplit {
    pub fn is_seen(&self, category: usize) -> bool {
        self.seen.contains(&category)
    }
}

/// Fold `i` holds out the `i`-th contiguous block of categories.
pub fn build_folds(n_categories: usize, n_folds: usize) -> Result<Vec<FoldSplit>> {
    if n_folds == 0 || !n_categories.is_multiple_of(n_folds) || n_categories == 0 {
        return Err(Error::Config(format!(
            "{n_categories} categories are not divisible into {n_folds} folds"
        )));
    }
    let k = n_categories / n_folds;
    Ok((0..n_folds)
        .map(|i| FoldSplit {
            fold_id: i,
            seen: (0..n_categories).filter(|c| c / k != i).collect(),
            unseen: (i * k..(i + 1) * k).collect(),
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub index: usize,
    pub image: String,
    pub categories: Vec<usize>,
    pub objects: Vec<ObjectParams>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub spec: SynthSpec,
    pub split: Split,
    pub folds: Vec<FoldSplit>,
    pub hue_map: BTreeMap<String, f64>,
    pub samples: Vec<SampleRecord>,
}

fn file_name(index: usize, ext: &str) -> String {
    format!("{index:05}.{ext}")
}

/// Writes `images/*.ppm`, `masks/<category>/*.pgm` and `manifest.json`.
pub fn write_dataset(corpus: &Corpus, dir: &Path) -> Result<()> {
    let spec = &corpus.spec;
    let s = spec.image_size;
    let img_dir = dir.join("images");
    fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    for name in &spec.categories {
        let d = dir.join("masks").join(name);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let mut records = Vec::with_capacity(corpus.len());
    for sample in &corpus.samples {
        let data = sample.image.data();
        let rgb: Vec<u8> = (0..s * s)
            .flat_map(|p| (0..3).map(move |c| quantize(data[c * s * s + p])))
            .collect();
        let name = file_name(sample.index, "ppm");
        pnm::write_ppm(&img_dir.join(&name), s, s, &rgb)?;
        for (&c, m) in &sample.masks {
            let gray: Vec<u8> = m.bits().iter().map(|&b| if b { 255 } else { 0 }).collect();
            let p = dir
                .join("masks")
                .join(&spec.categories[c])
                .join(file_name(sample.index, "pgm"));
            pnm::write_pgm(&p, s, s, &gray)?;
        }
        records.push(SampleRecord {
            index: sample.index,
            image: format!("images/{name}"),
            categories: sample.categories(),
            objects: sample.objects.clone(),
        });
    }
    let manifest = DatasetManifest {
        spec: spec.clone(),
        split: corpus.split,
        folds: build_folds(spec.categories.len(), spec.n_folds)?,
        hue_map: spec
            .categories
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), spec.hue(i)))
            .collect(),
        samples: records,
    };
    let path = dir.join("manifest.json");
    let mut json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    json.push('\n');
    fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

pub fn read_dataset(dir: &Path) -> Result<Corpus> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.clone(),
        source: e,
    })?;
    let spec = manifest.spec;
    let s = spec.image_size;
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for rec in &manifest.samples {
        let ip = dir.join(&rec.image);
        let r = pnm::read_ppm(&ip)?;
        if (r.width, r.height) != (s, s) {
            return Err(Error::format(
                &ip,
                format!("expected {s}x{s}, found {}x{}", r.width, r.height),
            ));
        }
        let mut data = vec![0.0; 3 * s * s];
        for p in 0..s * s {
            for c in 0..3 {
                data[c * s * s + p] = dequantize(r.samples[3 * p + c]);
            }
        }
        let mut masks = BTreeMap::new();
        for &c in &rec.categories {
            let name = spec
                .categories
                .get(c)
                .ok_or_else(|| Error::format(&path, format!("sample {} has unknown category {c}", rec.index)))?;
            let mp = dir.join("masks").join(name).join(file_name(rec.index, "pgm"));
            let g = pnm::read_pgm(&mp)?;
            if (g.width, g.height) != (s, s) {
                return Err(Error::format(
                    &mp,
                    format!("expected {s}x{s}, found {}x{}", g.width, g.height),
                ));
            }
            masks.insert(c, Mask::from_bits(s, s, g.samples.iter().map(|&v| v > 127).collect())?);
        }
        samples.push(SynthSample {
            index: rec.index,
            image: Tensor::new(vec![3, s, s], data)?,
            masks,
            objects: rec.objects.clone(),
        });
    }
    Ok(Corpus {
        spec,
        split: manifest.split,
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hsv_round_trip() {
        for c in 0..8 {
            let rgb = hsv_to_rgb(c as f64 / 8.0, 0.85, 0.9);
            let (h, s, v) = rgb_to_hsv(rgb);
            assert!((h - c as f64 / 8.0).abs() < 1e-12);
            assert!((s - 0.85).abs() < 1e-12 && (v - 0.9).abs() < 1e-12);
        }
    }

    #[test]
    fn six_pixel_square_fills_its_box() {
        let o = ObjectParams {
            category: 1,
            x0: 10,
            y0: 10,
            size: 6,
            phase: 0,
        };
        let m = o.mask(32);
        assert_eq!(m.count(), 36);
        assert_eq!(m.bbox(), Some([10, 10, 16, 16]));
    }
}

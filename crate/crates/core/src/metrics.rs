//! IoU, mIoU and FB-IoU.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::Mask;

/// `(|pred ∧ gt|, |pred ∨ gt|)`.
pub fn intersection_union(pred: &Mask, gt: &Mask) -> Result<(u64, u64)> {
    pred.same_shape(gt)?;
    let (mut i, mut u) = (0u64, 0u64);
    for (&p, &g) in pred.bits().iter().zip(gt.bits()) {
        i += u64::from(p && g);
        u += u64::from(p || g);
    }
    Ok((i, u))
}

fn ratio(i: u64, u: u64) -> f64 {
    if u == 0 {
        1.0
    } else {
        i as f64 / u as f64
    }
}

/// Intersection over union; two empty masks score 1.
pub fn iou(pred: &Mask, gt: &Mask) -> Result<f64> {
    let (i, u) = intersection_union(pred, gt)?;
    Ok(ratio(i, u))
}

/// Mean of foreground and background IoU.
pub fn fb_iou(pred: &Mask, gt: &Mask) -> Result<f64> {
    let (fi, fu) = intersection_union(pred, gt)?;
    let n = pred.bits().len() as u64;
    // background: complement of both masks
    let (bi, bu) = (n - fu, n - fi);
    Ok(0.5 * (ratio(fi, fu) + ratio(bi, bu)))
}

/// Unweighted mean of `per_class` over `classes`.
pub fn miou(per_class: &BTreeMap<usize, f64>, classes: &[usize]) -> Result<f64> {
    if classes.is_empty() {
        return Err(Error::Config("mIoU over an empty class set".into()));
    }
    let mut sum = 0.0;
    for c in classes {
        sum += per_class.get(c).ok_or_else(|| Error::MissingClass(c.to_string()))?;
    }
    Ok(sum / classes.len() as f64)
}

/// Running intersection and union counts over a set of queries.
///
/// Per-class IoU is the ratio of totals accumulated over all queries of the
/// class; FB-IoU accumulates foreground and background totals likewise.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct IouAccumulator {
    per_class: BTreeMap<usize, (u64, u64)>,
    fg: (u64, u64),
    bg: (u64, u64),
    queries: usize,
}

impl IouAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, class: usize, pred: &Mask, gt: &Mask) -> Result<()> {
        let (i, u) = intersection_union(pred, gt)?;
        let n = pred.bits().len() as u64;
        let e = self.per_class.entry(class).or_default();
        e.0 += i;
        e.1 += u;
        self.fg.0 += i;
        self.fg.1 += u;
        self.bg.0 += n - u;
        self.bg.1 += n - i;
        self.queries += 1;
        Ok(())
    }

    pub fn merge(&mut self, other: &IouAccumulator) {
        for (&c, &(i, u)) in &other.per_class {
            let e = self.per_class.entry(c).or_default();
            e.0 += i;
            e.1 += u;
        }
        self.fg.0 += other.fg.0;
        self.fg.1 += other.fg.1;
        self.bg.0 += other.bg.0;
        self.bg.1 += other.bg.1;
        self.queries += other.queries;
    }

    pub fn queries(&self) -> usize {
        self.queries
    }

    pub fn per_class(&self) -> BTreeMap<usize, f64> {
        self.per_class.iter().map(|(&c, &(i, u))| (c, ratio(i, u))).collect()
    }

    pub fn miou(&self, classes: &[usize]) -> Result<f64> {
        miou(&self.per_class(), classes)
    }

    pub fn fb_iou(&self) -> f64 {
        0.5 * (ratio(self.fg.0, self.fg.1) + ratio(self.bg.0, self.bg.1))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Category word to IoU, over the evaluated classes.
    pub per_class: BTreeMap<String, f64>,
    pub miou: f64,
    pub fb_iou: f64,
    pub samples: usize,
    pub fold_id: usize,
    pub mechanism: String,
}

impl EvalReport {
    pub fn from_accumulator(
        acc: &IouAccumulator,
        classes: &[usize],
        names: &[String],
        fold_id: usize,
        mechanism: &str,
    ) -> Result<Self> {
        let per = acc.per_class();
        let mut per_class = BTreeMap::new();
        for &c in classes {
            let v = *per
                .get(&c)
                .ok_or_else(|| Error::MissingClass(names.get(c).cloned().unwrap_or_else(|| c.to_string())))?;
            per_class.insert(names.get(c).cloned().unwrap_or_else(|| c.to_string()), v);
        }
        Ok(Self {
            per_class,
            miou: acc.miou(classes)?,
            fb_iou: acc.fb_iou(),
            samples: acc.queries(),
            fold_id,
            mechanism: mechanism.to_string(),
        })
    }
}

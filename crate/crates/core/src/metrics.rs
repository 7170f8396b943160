//! Intersection-over-union evaluation and pixel-count statistics.
//!
//! A class whose predicted and true regions are both empty has no IoU
//! (`None`) and is left out of every mean.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::{LabelMask, WearClass, NUM_CLASSES};
use crate::error::{Error, Result};

fn check_aligned(pred: &LabelMask, truth: &LabelMask) -> Result<()> {
    if (pred.width(), pred.height()) != (truth.width(), truth.height()) {
        return Err(Error::data(format!(
            "prediction is {} x {} but ground truth is {} x {}",
            pred.width(),
            pred.height(),
            truth.width(),
            truth.height()
        )));
    }
    Ok(())
}

fn ratio(intersection: u64, union: u64) -> Option<f64> {
    (union > 0).then(|| intersection as f64 / union as f64)
}

/// Pixel counts indexed `[truth][prediction]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    counts: [[u64; NUM_CLASSES]; NUM_CLASSES],
}

impl ConfusionMatrix {
    pub fn from_masks(pred: &LabelMask, truth: &LabelMask) -> Result<Self> {
        check_aligned(pred, truth)?;
        let mut counts = [[0u64; NUM_CLASSES]; NUM_CLASSES];
        for (&p, &t) in pred.classes().iter().zip(truth.classes()) {
            counts[t as usize][p as usize] += 1;
        }
        Ok(ConfusionMatrix { counts })
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth][pred]
    }

    pub fn rows(&self) -> &[[u64; NUM_CLASSES]; NUM_CLASSES] {
        &self.counts
    }

    pub fn add(&mut self, other: &ConfusionMatrix) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn truth_count(&self, k: usize) -> u64 {
        self.counts[k].iter().sum()
    }

    pub fn pred_count(&self, k: usize) -> u64 {
        self.counts.iter().map(|row| row[k]).sum()
    }

    pub fn intersection(&self, k: usize) -> u64 {
        self.counts[k][k]
    }

    pub fn union(&self, k: usize) -> u64 {
        self.truth_count(k) + self.pred_count(k) - self.counts[k][k]
    }

    pub fn iou(&self, k: usize) -> Option<f64> {
        ratio(self.intersection(k), self.union(k))
    }
}

/// IoU of one class, `None` if neither mask contains it.
pub fn iou(pred: &LabelMask, truth: &LabelMask, class: WearClass) -> Result<Option<f64>> {
    check_aligned(pred, truth)?;
    let k = class.index();
    let (mut inter, mut union) = (0u64, 0u64);
    for (&p, &t) in pred.classes().iter().zip(truth.classes()) {
        let (a, b) = (p == k, t == k);
        inter += (a && b) as u64;
        union += (a || b) as u64;
    }
    Ok(ratio(inter, union))
}

fn mean_present(values: &[Option<f64>]) -> f64 {
    let present: Vec<f64> = values.iter().flatten().copied().collect();
    if present.is_empty() {
        f64::NAN
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_class_iou: [Option<f64>; NUM_CLASSES],
    /// Mean over the classes whose IoU is present.
    pub mean_iou: f64,
    pub pred_counts: [u64; NUM_CLASSES],
    pub truth_counts: [u64; NUM_CLASSES],
    pub confusion: ConfusionMatrix,
}

impl MetricsReport {
    pub fn from_confusion(confusion: ConfusionMatrix) -> Self {
        let per_class_iou = std::array::from_fn(|k| confusion.iou(k));
        MetricsReport {
            mean_iou: mean_present(&per_class_iou),
            per_class_iou,
            pred_counts: std::array::from_fn(|k| confusion.pred_count(k)),
            truth_counts: std::array::from_fn(|k| confusion.truth_count(k)),
            confusion,
        }
    }

    pub fn class_iou(&self, class: WearClass) -> Option<f64> {
        self.per_class_iou[class.index() as usize]
    }
}

pub fn evaluate(pred: &LabelMask, truth: &LabelMask) -> Result<MetricsReport> {
    Ok(MetricsReport::from_confusion(ConfusionMatrix::from_masks(
        pred, truth,
    )?))
}

/// Evaluation of a whole dataset.
///
/// `micro` pools intersections and unions over all pixels of all images.
/// `macro_iou` averages the per-image IoU of each class over the images in
/// which that class is present, and `macro_mean` averages those.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetReport {
    pub per_image: Vec<(String, MetricsReport)>,
    pub micro: MetricsReport,
    pub macro_iou: [Option<f64>; NUM_CLASSES],
    pub macro_mean: f64,
}

pub fn evaluate_dataset(pairs: &[(String, LabelMask, LabelMask)]) -> Result<DatasetReport> {
    if pairs.is_empty() {
        return Err(Error::data("cannot evaluate an empty dataset"));
    }
    let per_image = pairs
        .par_iter()
        .map(|(id, pred, truth)| Ok((id.clone(), evaluate(pred, truth)?)))
        .collect::<Result<Vec<_>>>()?;
    let mut pooled = ConfusionMatrix::default();
    for (_, r) in &per_image {
        pooled.add(&r.confusion);
    }
    let macro_iou: [Option<f64>; NUM_CLASSES] = std::array::from_fn(|k| {
        let vals: Vec<f64> = per_image
            .iter()
            .filter_map(|(_, r)| r.per_class_iou[k])
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    });
    Ok(DatasetReport {
        micro: MetricsReport::from_confusion(pooled),
        macro_mean: mean_present(&macro_iou),
        macro_iou,
        per_image,
    })
}

impl DatasetReport {
    /// Column names of [`DatasetReport::write_csv`].
    pub fn csv_header() -> Vec<String> {
        let mut h = vec!["id".to_string()];
        for c in WearClass::ALL {
            h.push(format!("iou_{}", c.name()));
        }
        h.push("mean_iou".into());
        for c in WearClass::ALL {
            h.push(format!("pred_px_{}", c.name()));
        }
        for c in WearClass::ALL {
            h.push(format!("truth_px_{}", c.name()));
        }
        h
    }

    /// One row per image, then a `micro` and a `macro` row. Absent IoUs are
    /// empty cells; the macro row leaves pixel counts empty.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(Self::csv_header())?;
        let fmt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        let row = |id: &str, r: &MetricsReport| {
            let mut rec = vec![id.to_string()];
            rec.extend(r.per_class_iou.iter().map(|&v| fmt(v)));
            rec.push(fmt(Some(r.mean_iou)));
            rec.extend(r.pred_counts.iter().map(u64::to_string));
            rec.extend(r.truth_counts.iter().map(u64::to_string));
            rec
        };
        for (id, r) in &self.per_image {
            w.write_record(row(id, r))?;
        }
        w.write_record(row("micro", &self.micro))?;
        let mut rec = vec!["macro".to_string()];
        rec.extend(self.macro_iou.iter().map(|&v| fmt(v)));
        rec.push(fmt(Some(self.macro_mean)));
        rec.extend(std::iter::repeat_n(String::new(), 2 * NUM_CLASSES));
        w.write_record(rec)?;
        w.flush()
            .map_err(|e| Error::io("<metrics csv>", e))?;
        Ok(())
    }
}

/// `(stroke, count)` of one class for each mask of an ordered stream.
pub fn pixel_count_series<'a, I>(masks: I, class: WearClass) -> Vec<(u64, u64)>
where
    I: IntoIterator<Item = (u64, &'a LabelMask)>,
{
    masks
        .into_iter()
        .map(|(stroke, m)| (stroke, m.count(class)))
        .collect()
}

/// Trailing moving average; the first `window - 1` points average over what
/// is available. A window of 0 or 1 returns the counts unchanged.
pub fn moving_average(series: &[(u64, u64)], window: usize) -> Vec<(u64, f64)> {
    let w = window.max(1);
    let mut sum = 0u64;
    series
        .iter()
        .enumerate()
        .map(|(i, &(stroke, c))| {
            sum += c;
            if i >= w {
                sum -= series[i - w].1;
            }
            (stroke, sum as f64 / (i + 1).min(w) as f64)
        })
        .collect()
}

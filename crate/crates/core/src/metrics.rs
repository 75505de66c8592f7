//! Overlap metrics for binary masks: per-slice confusion counts, IoU,
//! Dice, sensitivity, and dataset-level aggregation with explicit
//! handling of slices where a metric is undefined.

use ndarray::Zip;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::BinaryMask;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("prediction shape {pred:?} does not match ground truth shape {gt:?}")]
    ShapeMismatch {
        pred: (usize, usize),
        gt: (usize, usize),
    },
    #[error("no slice qualifies for any metric")]
    EmptyEvaluation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn add(&mut self, other: &ConfusionCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.tn += other.tn;
    }
}

pub fn confusion(pred: &BinaryMask, gt: &BinaryMask) -> Result<ConfusionCounts, MetricsError> {
    if pred.dim() != gt.dim() {
        return Err(MetricsError::ShapeMismatch {
            pred: pred.dim(),
            gt: gt.dim(),
        });
    }
    let mut c = ConfusionCounts::default();
    Zip::from(pred).and(gt).for_each(|&p, &g| match (p != 0, g != 0) {
        (true, true) => c.tp += 1,
        (true, false) => c.fp += 1,
        (false, true) => c.fn_ += 1,
        (false, false) => c.tn += 1,
    });
    Ok(c)
}

/// Per-slice metric values; `None` marks a metric whose denominator is
/// zero (no foreground in the operands that define it).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SliceMetrics {
    pub iou: Option<f64>,
    pub dice: Option<f64>,
    pub sensitivity: Option<f64>,
}

pub fn slice_metrics(c: &ConfusionCounts) -> SliceMetrics {
    let union = c.tp + c.fp + c.fn_;
    let dice_denom = 2 * c.tp + c.fp + c.fn_;
    let gt_pos = c.tp + c.fn_;
    SliceMetrics {
        iou: (union > 0).then(|| c.tp as f64 / union as f64),
        dice: (dice_denom > 0).then(|| 2.0 * c.tp as f64 / dice_denom as f64),
        sensitivity: (gt_pos > 0).then(|| c.tp as f64 / gt_pos as f64),
    }
}

/// How per-slice confusion counts are pooled into the headline numbers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Mean over slices where the metric is defined.
    #[default]
    Slice,
    /// Counts pooled per patient, then averaged over patients.
    Patient,
    /// Counts pooled over the whole dataset.
    Global,
}

#[derive(Debug, Clone)]
pub struct EvalPair {
    pub slice_id: String,
    pub patient_id: String,
    pub pred: BinaryMask,
    pub gt: BinaryMask,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceReport {
    pub slice_id: String,
    pub iou: Option<f64>,
    pub dice: Option<f64>,
    pub sensitivity: Option<f64>,
    /// True when the slice counts toward the overlap aggregates, i.e.
    /// prediction or ground truth contains foreground.
    pub included: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub miou: f64,
    pub dice: f64,
    pub sensitivity: Option<f64>,
    pub n_slices_included: usize,
    pub n_slices_sensitivity: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub aggregation: Aggregation,
    pub per_slice: Vec<SliceReport>,
    pub aggregate: AggregateReport,
}

fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

pub fn evaluate_dataset(
    pairs: &[EvalPair],
    aggregation: Aggregation,
) -> Result<MetricsReport, MetricsError> {
    let mut per_slice = Vec::with_capacity(pairs.len());
    let mut counts = Vec::with_capacity(pairs.len());
    for pair in pairs {
        let c = confusion(&pair.pred, &pair.gt)?;
        let m = slice_metrics(&c);
        per_slice.push(SliceReport {
            slice_id: pair.slice_id.clone(),
            iou: m.iou,
            dice: m.dice,
            sensitivity: m.sensitivity,
            included: m.iou.is_some(),
        });
        counts.push(c);
    }

    let n_included = per_slice.iter().filter(|s| s.included).count();
    let n_sens = per_slice.iter().filter(|s| s.sensitivity.is_some()).count();
    if n_included == 0 {
        return Err(MetricsError::EmptyEvaluation);
    }

    let aggregate = match aggregation {
        Aggregation::Slice => {
            let ious: Vec<f64> = per_slice.iter().filter_map(|s| s.iou).collect();
            let dices: Vec<f64> = per_slice.iter().filter_map(|s| s.dice).collect();
            let sens: Vec<f64> = per_slice.iter().filter_map(|s| s.sensitivity).collect();
            AggregateReport {
                miou: mean(&ious).unwrap(),
                dice: mean(&dices).unwrap(),
                sensitivity: mean(&sens),
                n_slices_included: n_included,
                n_slices_sensitivity: n_sens,
            }
        }
        Aggregation::Patient => {
            let mut by_patient: Vec<(String, ConfusionCounts)> = Vec::new();
            for (pair, c) in pairs.iter().zip(&counts) {
                match by_patient.iter_mut().find(|(id, _)| *id == pair.patient_id) {
                    Some((_, acc)) => acc.add(c),
                    None => by_patient.push((pair.patient_id.clone(), *c)),
                }
            }
            let metrics: Vec<SliceMetrics> =
                by_patient.iter().map(|(_, c)| slice_metrics(c)).collect();
            let ious: Vec<f64> = metrics.iter().filter_map(|m| m.iou).collect();
            let dices: Vec<f64> = metrics.iter().filter_map(|m| m.dice).collect();
            let sens: Vec<f64> = metrics.iter().filter_map(|m| m.sensitivity).collect();
            AggregateReport {
                miou: mean(&ious).ok_or(MetricsError::EmptyEvaluation)?,
                dice: mean(&dices).ok_or(MetricsError::EmptyEvaluation)?,
                sensitivity: mean(&sens),
                n_slices_included: n_included,
                n_slices_sensitivity: n_sens,
            }
        }
        Aggregation::Global => {
            let mut total = ConfusionCounts::default();
            for c in &counts {
                total.add(c);
            }
            let m = slice_metrics(&total);
            AggregateReport {
                miou: m.iou.ok_or(MetricsError::EmptyEvaluation)?,
                dice: m.dice.ok_or(MetricsError::EmptyEvaluation)?,
                sensitivity: m.sensitivity,
                n_slices_included: n_included,
                n_slices_sensitivity: n_sens,
            }
        }
    };

    Ok(MetricsReport {
        aggregation,
        per_slice,
        aggregate,
    })
}

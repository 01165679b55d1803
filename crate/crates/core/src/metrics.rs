//! Semantic and geometric completion metrics.

use crate::error::{Error, Result};
use crate::grid::{LabelGrid, SemanticVolume};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// IoU per class id, class 0 (empty) included.
    pub per_class_iou: Vec<f64>,
    /// Mean IoU over semantic classes `1..N` whose union is non-empty.
    pub miou: f64,
    /// IoU of occupied (non-zero label) versus empty.
    pub occupancy_iou: f64,
    /// Number of non-ignored voxels scored.
    pub scored_voxels: usize,
}

/// Scores the argmax of `pred` against `gt`, skipping `ignore` voxels.
pub fn compute_metrics(pred: &SemanticVolume, gt: &LabelGrid, ignore: u8) -> Result<MetricsReport> {
    pred.check_dims(gt, "compute_metrics")?;
    let labels = pred.argmax();
    score_labels(&labels, gt, pred.channels(), ignore)
}

/// Scores hard labels against `gt` for a `num_classes`-class problem.
pub fn score_labels(pred: &LabelGrid, gt: &LabelGrid, num_classes: usize, ignore: u8) -> Result<MetricsReport> {
    pred.check_dims(gt, "score_labels")?;
    if num_classes == 0 {
        return Err(Error::invalid("score_labels: zero classes"));
    }
    let mut tp = vec![0usize; num_classes];
    let mut fp = vec![0usize; num_classes];
    let mut fn_ = vec![0usize; num_classes];
    let (mut occ_tp, mut occ_fp, mut occ_fn) = (0usize, 0usize, 0usize);
    let mut scored = 0;
    for (&p, &t) in pred.as_slice().iter().zip(gt.as_slice()) {
        if t == ignore {
            continue;
        }
        let (pu, tu) = (p as usize, t as usize);
        if pu >= num_classes || tu >= num_classes {
            return Err(Error::invalid(format!(
                "score_labels: label {} out of range for {num_classes} classes",
                pu.max(tu)
            )));
        }
        scored += 1;
        if pu == tu {
            tp[pu] += 1;
        } else {
            fp[pu] += 1;
            fn_[tu] += 1;
        }
        match (p != 0, t != 0) {
            (true, true) => occ_tp += 1,
            (true, false) => occ_fp += 1,
            (false, true) => occ_fn += 1,
            (false, false) => {}
        }
    }
    let iou = |tp: usize, fp: usize, fn_: usize| {
        let denom = tp + fp + fn_;
        (denom > 0).then(|| tp as f64 / denom as f64)
    };
    let per_class: Vec<Option<f64>> = (0..num_classes).map(|c| iou(tp[c], fp[c], fn_[c])).collect();
    let semantic: Vec<f64> = per_class.iter().skip(1).flatten().copied().collect();
    let miou = if semantic.is_empty() {
        0.0
    } else {
        semantic.iter().sum::<f64>() / semantic.len() as f64
    };
    Ok(MetricsReport {
        per_class_iou: per_class.into_iter().map(|v| v.unwrap_or(0.0)).collect(),
        miou,
        occupancy_iou: iou(occ_tp, occ_fp, occ_fn).unwrap_or(0.0),
        scored_voxels: scored,
    })
}

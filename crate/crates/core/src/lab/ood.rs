//! Accuracy on rare answers and detection recall of the objects a question
//! needs.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data::{iou, Sample};
use crate::error::{LensError, Result};
use crate::train::Accuracy;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OodPoint {
    pub alpha: f64,
    pub accuracy: Accuracy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OodCurve {
    /// Grid points with a non-empty tail.
    pub points: Vec<OodPoint>,
    /// Grid points dropped because no sample falls in their tail.
    pub omitted: Vec<f64>,
}

/// Accuracy restricted to `tail(alpha)` for each `alpha` of an ascending
/// grid in `(0, 1]`.
pub fn ood_curve(samples: &[Sample], preds: &[usize], alphas: &[f64]) -> Result<OodCurve> {
    if samples.len() != preds.len() {
        return Err(LensError::Contract(format!("{} samples but {} predictions", samples.len(), preds.len())));
    }
    if alphas.iter().any(|a| !(*a > 0.0 && *a <= 1.0)) || alphas.windows(2).any(|w| w[0] >= w[1]) {
        return Err(LensError::Contract("alpha grid must be strictly ascending within (0, 1]".into()));
    }
    let mut curve = OodCurve { points: Vec::new(), omitted: Vec::new() };
    for &alpha in alphas {
        let (mut n, mut correct) = (0, 0);
        for (s, &p) in samples.iter().zip(preds) {
            if s.is_tail(alpha) {
                n += 1;
                correct += usize::from(p == s.answer());
            }
        }
        if n == 0 {
            curve.omitted.push(alpha);
        } else {
            curve.points.push(OodPoint { alpha, accuracy: Accuracy::of(correct, n) });
        }
    }
    Ok(curve)
}

pub const RECALL_IOUS: [f64; 3] = [0.2, 0.5, 0.8];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecallRow {
    pub iou: f64,
    /// Needed objects of tail samples matched by some detection.
    pub tail: Accuracy,
    pub head: Accuracy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecallTable {
    pub alpha: f64,
    pub rows: Vec<RecallRow>,
}

/// Recall of the objects each question needs: an object counts as found if
/// any detection of its scene overlaps it with IoU at least the threshold.
pub fn recall_confounder_check(samples: &[Sample], alpha: f64, ious: &[f64]) -> RecallTable {
    let mut rows = Vec::new();
    for &t in ious {
        let (mut tail, mut head) = ((0, 0), (0, 0));
        for s in samples {
            let slot = if s.is_tail(alpha) { &mut tail } else { &mut head };
            for &i in &s.question.needed {
                let gt = &s.scene.objects[i].bbox;
                let found = s.detections.detections.iter().any(|d| iou(&d.bbox, gt) >= t);
                slot.0 += usize::from(found);
                slot.1 += 1;
            }
        }
        rows.push(RecallRow { iou: t, tail: Accuracy::of(tail.0, tail.1), head: Accuracy::of(head.0, head.1) });
    }
    RecallTable { alpha, rows }
}

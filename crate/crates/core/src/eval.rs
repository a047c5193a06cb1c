//! Overall and mean IoU over a set of references.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize, Serializer};

use crate::dataset::RefId;
use crate::error::{Error, Result};
use crate::mask::check_shape;
use crate::prediction::{GroundTruth, PredictionSet};
use crate::round2;

pub const DEFAULT_THRESHOLD: f64 = 0.5;

fn two_decimals<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_f64(round2(*v))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefIou {
    pub ref_id: RefId,
    pub intersection: u64,
    pub union: u64,
    pub iou: f64,
}

/// oIoU pools pixel counts over all references; mIoU averages per-reference
/// IoU. Both are percentages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(serialize_with = "two_decimals")]
    pub oiou: f64,
    #[serde(serialize_with = "two_decimals")]
    pub miou: f64,
    pub references: usize,
    pub intersection: u64,
    pub union: u64,
    pub per_reference: Vec<RefIou>,
}

impl MetricsReport {
    pub fn from_counts(per_reference: Vec<RefIou>) -> Self {
        let intersection: u64 = per_reference.iter().map(|r| r.intersection).sum();
        let union: u64 = per_reference.iter().map(|r| r.union).sum();
        let oiou = if union == 0 {
            100.0
        } else {
            100.0 * intersection as f64 / union as f64
        };
        let miou = if per_reference.is_empty() {
            0.0
        } else {
            100.0 * per_reference.iter().map(|r| r.iou).sum::<f64>() / per_reference.len() as f64
        };
        Self {
            oiou,
            miou,
            references: per_reference.len(),
            intersection,
            union,
            per_reference,
        }
    }

    pub fn ref_ids(&self) -> BTreeSet<&RefId> {
        self.per_reference.iter().map(|r| &r.ref_id).collect()
    }

    /// Two-decimal CSV with one row per reference and a trailing summary row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("ref_id,intersection,union,iou\n");
        for r in &self.per_reference {
            out.push_str(&format!(
                "{},{},{},{:.2}\n",
                r.ref_id,
                r.intersection,
                r.union,
                100.0 * r.iou
            ));
        }
        out.push_str(&format!("mIoU,,,{:.2}\n", self.miou));
        out.push_str(&format!(
            "oIoU,{},{},{:.2}\n",
            self.intersection, self.union, self.oiou
        ));
        out
    }
}

/// Binarises every prediction at `threshold` and scores it against ground truth.
pub fn evaluate(predictions: &PredictionSet, gt: &GroundTruth, threshold: f64) -> Result<MetricsReport> {
    let pred_ids: BTreeSet<&RefId> = predictions.keys().collect();
    let gt_ids: BTreeSet<&RefId> = gt.keys().collect();
    if pred_ids != gt_ids {
        let missing: Vec<_> = gt_ids.difference(&pred_ids).take(5).collect();
        let extra: Vec<_> = pred_ids.difference(&gt_ids).take(5).collect();
        return Err(Error::Mismatch(format!(
            "prediction and ground-truth references differ (missing predictions: {missing:?}, unknown: {extra:?})"
        )));
    }
    let mut per_reference = Vec::with_capacity(gt.len());
    for (ref_id, target) in gt {
        let pred = &predictions[ref_id];
        check_shape(target.shape(), pred.shape())?;
        let p = pred.binarize(threshold);
        let t = target.decode();
        let (mut inter, mut union) = (0u64, 0u64);
        for (&a, &b) in p.as_slice().iter().zip(t.as_slice()) {
            inter += (a & b) as u64;
            union += (a | b) as u64;
        }
        let iou = if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        };
        per_reference.push(RefIou {
            ref_id: ref_id.clone(),
            intersection: inter,
            union,
            iou,
        });
    }
    Ok(MetricsReport::from_counts(per_reference))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Winner {
    First,
    Second,
    Tie,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricDelta {
    pub first: f64,
    pub second: f64,
    /// `first − second`, on two-decimal values.
    pub delta: f64,
    pub winner: Winner,
}

impl MetricDelta {
    fn new(a: f64, b: f64) -> Self {
        let (first, second) = (round2(a), round2(b));
        let delta = round2(first - second);
        let winner = if delta > 0.0 {
            Winner::First
        } else if delta < 0.0 {
            Winner::Second
        } else {
            Winner::Tie
        };
        Self {
            first,
            second,
            delta,
            winner,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportComparison {
    pub oiou: MetricDelta,
    pub miou: MetricDelta,
}

pub fn compare_reports(a: &MetricsReport, b: &MetricsReport) -> Result<ReportComparison> {
    if a.ref_ids() != b.ref_ids() {
        return Err(Error::Mismatch(
            "reports cover different reference sets".into(),
        ));
    }
    Ok(ReportComparison {
        oiou: MetricDelta::new(a.oiou, b.oiou),
        miou: MetricDelta::new(a.miou, b.miou),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::{Grid, RleMask};
    use crate::prediction::Prediction;

    fn rle(h: usize, w: usize, cells: &[u8]) -> RleMask {
        RleMask::encode(&Grid::from_column_major(h, w, cells.to_vec()).unwrap()).unwrap()
    }

    #[test]
    fn identical_predictions_score_100() {
        let m = rle(2, 2, &[1, 0, 1, 1]);
        let gt = GroundTruth::from([("r".to_string(), m.clone())]);
        let preds = PredictionSet::from([("r".to_string(), Prediction::Binary(m))]);
        let r = evaluate(&preds, &gt, DEFAULT_THRESHOLD).unwrap();
        assert_eq!((r.oiou, r.miou), (100.0, 100.0));
    }

    #[test]
    fn oiou_differs_from_miou() {
        // ref a: exact (I=2, U=2); ref b: disjoint, equal area (I=0, U=4)
        let gt = GroundTruth::from([
            ("a".to_string(), rle(2, 2, &[1, 1, 0, 0])),
            ("b".to_string(), rle(2, 2, &[1, 1, 0, 0])),
        ]);
        let preds = PredictionSet::from([
            ("a".to_string(), Prediction::Binary(rle(2, 2, &[1, 1, 0, 0]))),
            ("b".to_string(), Prediction::Binary(rle(2, 2, &[0, 0, 1, 1]))),
        ]);
        let r = evaluate(&preds, &gt, DEFAULT_THRESHOLD).unwrap();
        assert_eq!(round2(r.miou), 50.0);
        assert_eq!(round2(r.oiou), 33.33);
        let json = serde_json::to_value(&r).unwrap();
        assert_eq!(json["oiou"], 33.33);
    }

    #[test]
    fn mismatched_reference_sets() {
        let gt = GroundTruth::from([("a".to_string(), rle(1, 1, &[1]))]);
        let preds = PredictionSet::from([("b".to_string(), Prediction::Binary(rle(1, 1, &[1])))]);
        assert!(matches!(evaluate(&preds, &gt, 0.5), Err(Error::Mismatch(_))));
    }

    #[test]
    fn comparison_deltas() {
        let mk = |ids: &[&str], miou: f64| MetricsReport {
            oiou: miou,
            miou,
            references: ids.len(),
            intersection: 0,
            union: 0,
            per_reference: ids
                .iter()
                .map(|r| RefIou {
                    ref_id: r.to_string(),
                    intersection: 0,
                    union: 0,
                    iou: 0.0,
                })
                .collect(),
        };
        let a = mk(&["x", "y"], 56.03);
        let b = mk(&["x", "y"], 37.29);
        let c = compare_reports(&a, &b).unwrap();
        assert_eq!(c.miou.delta, 18.74);
        assert_eq!(c.miou.winner, Winner::First);
        let same = compare_reports(&a, &a).unwrap();
        assert_eq!(same.miou.delta, 0.0);
        assert_eq!(same.oiou.winner, Winner::Tie);
        assert!(compare_reports(&a, &mk(&["z"], 1.0)).is_err());
    }
}

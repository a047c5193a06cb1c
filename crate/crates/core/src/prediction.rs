//! Per-reference predictions and ground-truth masks.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::RefId;
use crate::embedding::{decode_f32s, encode_f32s};
use crate::error::{Error, Result};
use crate::jsonl;
use crate::mask::{BinaryGrid, RleMask, SoftMask};

#[derive(Debug, Clone, PartialEq)]
pub enum Prediction {
    Soft(SoftMask),
    Binary(RleMask),
}

impl Prediction {
    pub fn shape(&self) -> (usize, usize) {
        match self {
            Prediction::Soft(s) => s.shape(),
            Prediction::Binary(b) => b.shape(),
        }
    }

    pub fn to_soft(&self) -> SoftMask {
        match self {
            Prediction::Soft(s) => s.clone(),
            Prediction::Binary(b) => SoftMask::from_rle(b),
        }
    }

    /// Binary predictions pass through unchanged; soft ones are cut at `threshold`.
    pub fn binarize(&self, threshold: f64) -> BinaryGrid {
        match self {
            Prediction::Soft(s) => s.binarize(threshold),
            Prediction::Binary(b) => b.decode(),
        }
    }
}

pub type PredictionSet = BTreeMap<RefId, Prediction>;
pub type GroundTruth = BTreeMap<RefId, RleMask>;

#[derive(Serialize, Deserialize)]
struct MaskRecord {
    size: [u32; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    counts: Option<Vec<u32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    data: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct PredictionRecord {
    ref_id: RefId,
    mask: MaskRecord,
}

#[derive(Serialize, Deserialize)]
struct GroundTruthRecord {
    ref_id: RefId,
    mask: RleMask,
}

impl MaskRecord {
    fn into_prediction(self) -> Result<Prediction> {
        let (h, w) = (self.size[0] as usize, self.size[1] as usize);
        match (self.counts, self.data) {
            (Some(counts), None) => Ok(Prediction::Binary(RleMask::new(h, w, counts)?)),
            (None, Some(data)) => {
                let values = decode_f32s(&data)?.into_iter().map(f64::from).collect();
                Ok(Prediction::Soft(SoftMask::from_column_major(h, w, values)?))
            }
            _ => Err(Error::InvalidValue(
                "mask needs exactly one of \"counts\" (binary) or \"data\" (soft)".into(),
            )),
        }
    }

    fn from_prediction(p: &Prediction) -> Self {
        let (h, w) = p.shape();
        let size = [h as u32, w as u32];
        match p {
            Prediction::Binary(b) => MaskRecord {
                size,
                counts: Some(b.counts().to_vec()),
                data: None,
            },
            Prediction::Soft(s) => MaskRecord {
                size,
                counts: None,
                data: Some(encode_f32s(s.values().iter().map(|&v| v as f32))),
            },
        }
    }
}

pub fn load_predictions(path: &Path) -> Result<PredictionSet> {
    let mut set = PredictionSet::new();
    for l in jsonl::read_path::<PredictionRecord>(path, jsonl::PREDICTIONS)? {
        let fail = |message: String| Error::Validation {
            path: path.display().to_string(),
            line: l.line,
            message,
        };
        let ref_id = l.record.ref_id;
        let prediction = l.record.mask.into_prediction().map_err(|e| fail(e.to_string()))?;
        if set.insert(ref_id.clone(), prediction).is_some() {
            return Err(fail(format!("duplicate prediction for {ref_id:?}")));
        }
    }
    Ok(set)
}

pub fn write_predictions<W: Write>(out: W, set: &PredictionSet) -> Result<()> {
    jsonl::write(
        out,
        jsonl::PREDICTIONS,
        set.iter().map(|(r, p)| PredictionRecord {
            ref_id: r.clone(),
            mask: MaskRecord::from_prediction(p),
        }),
    )
}

pub fn load_ground_truth(path: &Path) -> Result<GroundTruth> {
    let mut gt = GroundTruth::new();
    for l in jsonl::read_path::<GroundTruthRecord>(path, jsonl::GROUND_TRUTH)? {
        if gt.insert(l.record.ref_id.clone(), l.record.mask).is_some() {
            return Err(Error::Validation {
                path: path.display().to_string(),
                line: l.line,
                message: format!("duplicate ground truth for {:?}", l.record.ref_id),
            });
        }
    }
    Ok(gt)
}

pub fn write_ground_truth<W: Write>(out: W, gt: &GroundTruth) -> Result<()> {
    jsonl::write(
        out,
        jsonl::GROUND_TRUTH,
        gt.iter().map(|(r, m)| GroundTruthRecord {
            ref_id: r.clone(),
            mask: m.clone(),
        }),
    )
}

//! Class projection and candidate selection from precomputed similarities.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{CandidateId, CandidateIndex, RefId, ReferringDataset};
use crate::embedding::{EmbeddingKey, EmbeddingTable};
use crate::error::{Error, Result};
use crate::jsonl;
use crate::mask::iou;
use crate::matcher::{greedy_match, MatchScores, ScoreEntry};
use crate::prediction::GroundTruth;

/// Reference → chosen candidate.
pub type Selections = BTreeMap<RefId, CandidateId>;

/// Reference → ordered candidate list.
pub type CandidateLists = BTreeMap<RefId, Vec<CandidateId>>;

/// Flattens every image's per-reference candidate lists.
pub fn candidate_lists(index: &CandidateIndex) -> CandidateLists {
    index
        .values()
        .flat_map(|s| s.per_reference.iter().map(|(r, c)| (r.clone(), c.clone())))
        .collect()
}

/// `u·v / (‖u‖‖v‖)`, accumulated in `f64`.
pub fn cosine_similarity(u: &[f32], v: &[f32]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::DegenerateVector(format!(
            "dimension mismatch: {} vs {}",
            u.len(),
            v.len()
        )));
    }
    let (mut dot, mut nu, mut nv) = (0f64, 0f64, 0f64);
    for (&a, &b) in u.iter().zip(v) {
        let (a, b) = (a as f64, b as f64);
        dot += a * b;
        nu += a * a;
        nv += b * b;
    }
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::DegenerateVector("zero-norm vector".into()));
    }
    Ok((dot / (nu.sqrt() * nv.sqrt())).clamp(-1.0, 1.0))
}

/// Label whose embedding is most similar to the phrase. Ties go to the
/// lexicographically smallest label.
pub fn project_class(phrase: &[f32], labels: &BTreeMap<&str, &[f32]>) -> Result<String> {
    let mut best: Option<(&str, f64)> = None;
    for (&label, &v) in labels {
        let s = cosine_similarity(phrase, v)?;
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((label, s));
        }
    }
    best.map(|(l, _)| l.to_string())
        .ok_or_else(|| Error::EmptyInput("no labels to project onto".into()))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ScoreRecord {
    ref_id: RefId,
    candidate_id: CandidateId,
    score: f32,
}

/// Cosine similarity for (reference, candidate) pairs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SimilarityScores(BTreeMap<(RefId, CandidateId), f64>);

impl SimilarityScores {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, ref_id: &str, candidate_id: &str, score: f64) -> Result<()> {
        if !score.is_finite() {
            return Err(Error::InvalidValue(format!(
                "non-finite score for ({ref_id}, {candidate_id})"
            )));
        }
        self.0.insert((ref_id.into(), candidate_id.into()), score);
        Ok(())
    }

    pub fn get(&self, ref_id: &str, candidate_id: &str) -> Option<f64> {
        self.0.get(&(ref_id.to_string(), candidate_id.to_string())).copied()
    }

    fn require(&self, ref_id: &str, candidate_id: &str) -> Result<f64> {
        self.get(ref_id, candidate_id)
            .ok_or_else(|| Error::IncompleteScores {
                ref_id: ref_id.into(),
                candidate_id: candidate_id.into(),
            })
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&RefId, &CandidateId, f64)> {
        self.0.iter().map(|((r, c), s)| (r, c, *s))
    }

    /// Scores every listed (reference, candidate) pair as the cosine between
    /// the reference's text embedding and the candidate's prompted-image
    /// embedding.
    pub fn from_embeddings(
        table: &EmbeddingTable,
        ds: &ReferringDataset,
        index: &CandidateIndex,
    ) -> Result<Self> {
        let mut scores = Self::new();
        for (image_id, set) in index {
            for (ref_id, cands) in &set.per_reference {
                if ds.locate(ref_id).is_none() {
                    continue;
                }
                let text = table
                    .get(&EmbeddingKey::Text(ref_id.clone()))
                    .ok_or_else(|| Error::UnknownId(format!("text embedding for {ref_id:?}")))?;
                for c in cands {
                    let key = EmbeddingKey::PromptedImage {
                        image_id: image_id.clone(),
                        candidate_id: c.clone(),
                    };
                    let img = table.get(&key).ok_or_else(|| {
                        Error::UnknownId(format!("prompted-image embedding for {image_id:?}/{c:?}"))
                    })?;
                    scores.insert(ref_id, c, cosine_similarity(img, text)?)?;
                }
            }
        }
        Ok(scores)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut scores = Self::new();
        for l in jsonl::read_path::<ScoreRecord>(path, jsonl::SCORES)? {
            let r = l.record;
            scores
                .insert(&r.ref_id, &r.candidate_id, r.score as f64)
                .map_err(|e| Error::Validation {
                    path: path.display().to_string(),
                    line: l.line,
                    message: e.to_string(),
                })?;
        }
        Ok(scores)
    }

    pub fn write<W: Write>(&self, out: W) -> Result<()> {
        jsonl::write(
            out,
            jsonl::SCORES,
            self.iter().map(|(r, c, s)| ScoreRecord {
                ref_id: r.clone(),
                candidate_id: c.clone(),
                score: s as f32,
            }),
        )
    }
}

fn non_empty<'a>(ref_id: &str, cands: &'a [CandidateId]) -> Result<&'a [CandidateId]> {
    if cands.is_empty() {
        return Err(Error::EmptyInput(format!("reference {ref_id:?} has no candidates")));
    }
    Ok(cands)
}

/// Highest-scoring candidate per reference; ties go to the smallest candidate id.
pub fn zero_shot_select(scores: &SimilarityScores, lists: &CandidateLists) -> Result<Selections> {
    let mut out = Selections::new();
    for (ref_id, cands) in lists {
        let mut best: Option<(&CandidateId, f64)> = None;
        for c in non_empty(ref_id, cands)? {
            let s = scores.require(ref_id, c)?;
            let better = match best {
                None => true,
                Some((bc, bs)) => s > bs || (s == bs && c < bc),
            };
            if better {
                best = Some((c, s));
            }
        }
        let (c, _) = best.expect("non-empty");
        out.insert(ref_id.clone(), c.clone());
    }
    Ok(out)
}

/// Uniform choice per reference, deterministic under `seed`.
pub fn random_select(lists: &CandidateLists, seed: u64) -> Result<Selections> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Selections::new();
    for (ref_id, cands) in lists {
        let cands = non_empty(ref_id, cands)?;
        let pick = rng.random_range(0..cands.len());
        out.insert(ref_id.clone(), cands[pick].clone());
    }
    Ok(out)
}

/// Candidate with the highest IoU against each reference's ground-truth mask.
/// Ties go to the smallest candidate id.
pub fn oracle_select(index: &CandidateIndex, ground_truth: &GroundTruth) -> Result<Selections> {
    let mut out = Selections::new();
    for set in index.values() {
        for (ref_id, cands) in &set.per_reference {
            let gt = ground_truth
                .get(ref_id)
                .ok_or_else(|| Error::MissingGroundTruth(ref_id.clone()))?;
            let mut best: Option<(&CandidateId, f64)> = None;
            for c in non_empty(ref_id, cands)? {
                let v = iou(set.mask(c)?, gt)?;
                let better = match best {
                    None => true,
                    Some((bc, bv)) => v > bv || (v == bv && c < bc),
                };
                if better {
                    best = Some((c, v));
                }
            }
            out.insert(ref_id.clone(), best.expect("non-empty").0.clone());
        }
    }
    Ok(out)
}

/// Runs the constrained greedy matcher with similarity as the score.
/// References of objects left unmatched map to `None`.
pub fn greedy_select_by_similarity(
    scores: &SimilarityScores,
    ds: &ReferringDataset,
    index: &CandidateIndex,
) -> Result<BTreeMap<RefId, Option<CandidateId>>> {
    let mut out = BTreeMap::new();
    for image in ds.images() {
        let objects = image.object_refs();
        let mut entries = Vec::new();
        if let Some(set) = index.get(&image.image_id) {
            for (object_id, refs) in &objects {
                for ref_id in refs {
                    for c in set.per_reference.get(ref_id).into_iter().flatten() {
                        entries.push(ScoreEntry {
                            object_id: object_id.clone(),
                            ref_id: ref_id.clone(),
                            candidate_id: c.clone(),
                            score: scores.require(ref_id, c)?,
                        });
                    }
                }
            }
        }
        let assignment = greedy_match(&MatchScores::new(
            image.image_id.clone(),
            objects.clone(),
            entries,
        )?);
        let targets = assignment.ref_targets(&objects);
        for ref_id in image.ref_ids() {
            out.insert(ref_id.clone(), targets.get(ref_id).cloned());
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionRecord {
    pub ref_id: RefId,
    pub candidate_id: Option<CandidateId>,
}

pub fn write_selections<W: Write>(
    out: W,
    selections: impl IntoIterator<Item = (RefId, Option<CandidateId>)>,
) -> Result<()> {
    jsonl::write(
        out,
        jsonl::SELECTIONS,
        selections
            .into_iter()
            .map(|(ref_id, candidate_id)| SelectionRecord {
                ref_id,
                candidate_id,
            }),
    )
}

/// Reads a selections file; references selected as `null` are dropped.
pub fn load_selections(path: &Path) -> Result<Selections> {
    Ok(jsonl::read_path::<SelectionRecord>(path, jsonl::SELECTIONS)?
        .into_iter()
        .filter_map(|l| l.record.candidate_id.map(|c| (l.record.ref_id, c)))
        .collect())
}

//! Synthetic correction benchmarks with known ground truth.
//!
//! Objects are axis-aligned rectangles placed in distinct cells of a 4×4
//! layout, so instances never overlap. Every reference starts from a faint,
//! noisy copy of its ground-truth mask in logit space: the toy stand-in for
//! the referring knowledge a grounded model carries. On its own that prior
//! binarises poorly; it only tilts which predictions fit which candidates.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{
    Candidate, CandidateIndex, CandidateSet, ImageRecord, ObjectRecord, Reference, ReferringDataset,
};
use crate::error::{Error, Result};
use crate::mask::{BinaryGrid, Grid, RleMask};
use crate::prediction::GroundTruth;
use crate::select::Selections;
use crate::trainer::{Experiment, ToyModel};

const LAYOUT_CELLS: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub images: usize,
    pub objects: usize,
    pub candidates: usize,
    pub refs_per_object: usize,
    pub grid: usize,
    /// Probability that a reference's zero-shot choice is its true mask.
    pub zero_shot_accuracy: f64,
    /// Logit offset of the initial prior toward the true mask.
    pub prior_strength: f64,
    /// Standard deviation of per-pixel Gaussian noise on the prior.
    pub prior_noise: f64,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            images: 16,
            objects: 3,
            candidates: 3,
            refs_per_object: 3,
            grid: 16,
            zero_shot_accuracy: 0.5,
            prior_strength: 0.5,
            prior_noise: 1.0,
            seed: 0,
        }
    }
}

impl ScenarioConfig {
    fn validate(&self) -> Result<()> {
        let slots = LAYOUT_CELLS * LAYOUT_CELLS;
        if self.images == 0 || self.objects == 0 || self.candidates == 0 || self.refs_per_object == 0 {
            return Err(Error::Parameter(
                "images, objects, candidates and refs per object must be positive".into(),
            ));
        }
        if self.objects.max(self.candidates) > slots {
            return Err(Error::Parameter(format!(
                "at most {slots} objects or candidates per image"
            )));
        }
        if self.grid < 2 * LAYOUT_CELLS {
            return Err(Error::Parameter(format!(
                "grid must be at least {}",
                2 * LAYOUT_CELLS
            )));
        }
        if !(0.0..=1.0).contains(&self.zero_shot_accuracy) {
            return Err(Error::Parameter("zero-shot accuracy must lie in [0, 1]".into()));
        }
        if !(self.prior_strength.is_finite() && self.prior_noise >= 0.0 && self.prior_noise.is_finite()) {
            return Err(Error::Parameter("prior parameters must be finite, noise non-negative".into()));
        }
        Ok(())
    }
}

fn rectangle(grid: usize, top: usize, left: usize, h: usize, w: usize) -> BinaryGrid {
    Grid::from_fn(grid, grid, |r, c| {
        u8::from(r >= top && r < top + h && c >= left && c < left + w)
    })
}

fn random_shapes(grid: usize, count: usize, rng: &mut ChaCha8Rng) -> Vec<BinaryGrid> {
    let cell = grid / LAYOUT_CELLS;
    let mut slots: Vec<usize> = (0..LAYOUT_CELLS * LAYOUT_CELLS).collect();
    slots.shuffle(rng);
    slots
        .into_iter()
        .take(count)
        .map(|slot| {
            let (cy, cx) = (slot / LAYOUT_CELLS, slot % LAYOUT_CELLS);
            let h = rng.random_range(2..=cell);
            let w = rng.random_range(2..=cell);
            let top = cy * cell + rng.random_range(0..=cell - h);
            let left = cx * cell + rng.random_range(0..=cell - w);
            rectangle(grid, top, left, h, w)
        })
        .collect()
}

fn prior_logits(gt: &BinaryGrid, strength: f64, noise: f64, rng: &mut ChaCha8Rng) -> Grid<f64> {
    gt.map(|&t| {
        let z: f64 = StandardNormal.sample(rng);
        strength * (2.0 * t as f64 - 1.0) + noise * z
    })
}

struct Builder {
    images: Vec<ImageRecord>,
    index: CandidateIndex,
    selections: Selections,
    ground_truth: GroundTruth,
    logits: BTreeMap<String, Grid<f64>>,
}

impl Builder {
    fn new() -> Self {
        Self {
            images: Vec::new(),
            index: CandidateIndex::new(),
            selections: Selections::new(),
            ground_truth: GroundTruth::new(),
            logits: BTreeMap::new(),
        }
    }

    fn finish(self) -> Result<Experiment> {
        Ok(Experiment {
            dataset: ReferringDataset::new(self.images)?,
            candidates: self.index,
            selections: self.selections,
            ground_truth: self.ground_truth,
            initial: ToyModel::new(self.logits)?,
        })
    }
}

/// Randomised benchmark: per image, `objects` instances of one class, with
/// `candidates` masks (true masks first, then distractors; when there are
/// fewer candidates than objects, some objects have no true mask available).
pub fn random_scenario(cfg: &ScenarioConfig) -> Result<Experiment> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut b = Builder::new();
    let g = cfg.grid;
    for i in 0..cfg.images {
        let image_id = format!("img{i:03}");
        let shapes = random_shapes(g, cfg.objects.max(cfg.candidates), &mut rng);
        let (gt_shapes, distractors) = shapes.split_at(cfg.objects);

        // Which objects have their true mask among the candidates.
        let mut covered: Vec<usize> = (0..cfg.objects).collect();
        covered.shuffle(&mut rng);
        covered.truncate(cfg.candidates.min(cfg.objects));

        let mut masks: Vec<(Option<usize>, &BinaryGrid)> =
            covered.iter().map(|&j| (Some(j), &gt_shapes[j])).collect();
        masks.extend(distractors.iter().map(|d| (None, d)));
        masks.shuffle(&mut rng);

        let mut candidates = Vec::new();
        let mut true_candidate = BTreeMap::new();
        for (c, (owner, grid)) in masks.iter().enumerate() {
            let id = format!("c{c}");
            if let Some(j) = owner {
                true_candidate.insert(*j, id.clone());
            }
            candidates.push(Candidate {
                candidate_id: id,
                class: "thing".into(),
                mask: RleMask::encode(grid)?,
            });
        }
        let all_ids: Vec<String> = candidates.iter().map(|c| c.candidate_id.clone()).collect();

        let mut objects = Vec::new();
        let mut per_reference = BTreeMap::new();
        for (j, gt) in gt_shapes.iter().enumerate() {
            let object_id = format!("o{j}");
            let gt_rle = RleMask::encode(gt)?;
            let mut references = Vec::new();
            for k in 0..cfg.refs_per_object {
                let ref_id = format!("{image_id}/o{j}/r{k}");
                let truth = true_candidate.get(&j);
                let choice = match truth {
                    Some(t) if rng.random_bool(cfg.zero_shot_accuracy) || all_ids.len() == 1 => {
                        t.clone()
                    }
                    _ => {
                        let wrong: Vec<&String> =
                            all_ids.iter().filter(|c| Some(*c) != truth).collect();
                        wrong[rng.random_range(0..wrong.len())].clone()
                    }
                };
                b.selections.insert(ref_id.clone(), choice);
                b.ground_truth.insert(ref_id.clone(), gt_rle.clone());
                b.logits.insert(
                    ref_id.clone(),
                    prior_logits(gt, cfg.prior_strength, cfg.prior_noise, &mut rng),
                );
                per_reference.insert(ref_id.clone(), all_ids.clone());
                references.push(Reference {
                    ref_id,
                    text: format!("thing {k} of object {j}"),
                    phrase: Some("thing".into()),
                });
            }
            objects.push(ObjectRecord {
                object_id,
                references,
            });
        }
        b.images.push(ImageRecord {
            image_id: image_id.clone(),
            file: None,
            height: Some(g as u32),
            width: Some(g as u32),
            objects,
        });
        b.index.insert(
            image_id.clone(),
            CandidateSet {
                image_id,
                candidates,
                per_reference,
            },
        );
    }
    b.finish()
}

/// Two objects of one class, one reference each, and exactly their two
/// masks as candidates: `A` (true mask of `o1`) and `B` (true mask of `o0`).
///
/// With `mistaken` set, zero-shot selection picks `A` for both references, so
/// `o0` starts wrong. Object `o0` sorts first, so a pure tie-break would keep
/// the mistake; only the predictions can fix it.
pub fn fig5_scenario(grid: usize, seed: u64, mistaken: bool) -> Result<Experiment> {
    if grid < 2 * LAYOUT_CELLS {
        return Err(Error::Parameter(format!("grid must be at least {}", 2 * LAYOUT_CELLS)));
    }
    let defaults = ScenarioConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let half = grid / 2;
    let side = half - 2;
    let o0_mask = rectangle(grid, 1, 1, side, side);
    let o1_mask = rectangle(grid, half + 1, half + 1, side, side);

    let mut b = Builder::new();
    let image_id = "fig5".to_string();
    let candidates = vec![
        Candidate {
            candidate_id: "A".into(),
            class: "thing".into(),
            mask: RleMask::encode(&o1_mask)?,
        },
        Candidate {
            candidate_id: "B".into(),
            class: "thing".into(),
            mask: RleMask::encode(&o0_mask)?,
        },
    ];
    let both = vec!["A".to_string(), "B".to_string()];
    let mut per_reference = BTreeMap::new();
    let mut objects = Vec::new();
    for (object, gt, choice) in [
        ("o0", &o0_mask, if mistaken { "A" } else { "B" }),
        ("o1", &o1_mask, "A"),
    ] {
        let ref_id = format!("{object}r0");
        b.selections.insert(ref_id.clone(), choice.into());
        b.ground_truth.insert(ref_id.clone(), RleMask::encode(gt)?);
        b.logits.insert(
            ref_id.clone(),
            prior_logits(gt, defaults.prior_strength, defaults.prior_noise, &mut rng),
        );
        per_reference.insert(ref_id.clone(), both.clone());
        objects.push(ObjectRecord {
            object_id: object.into(),
            references: vec![Reference {
                ref_id,
                text: format!("the thing {object}"),
                phrase: Some("thing".into()),
            }],
        });
    }
    b.images.push(ImageRecord {
        image_id: image_id.clone(),
        file: None,
        height: Some(grid as u32),
        width: Some(grid as u32),
        objects,
    });
    b.index.insert(
        image_id.clone(),
        CandidateSet {
            image_id,
            candidates,
            per_reference,
        },
    );
    b.finish()
}

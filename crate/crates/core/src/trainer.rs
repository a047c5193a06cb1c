//! Desk-scale correction dynamics.
//!
//! [`ToyModel`] keeps one free logit grid per reference, so there is no
//! shared network: whatever the model "knows" about a reference lives in its
//! initial logits. Training first fits the zero-shot selections
//! ([`pretrain`]) and then switches to constrained greedy matching against
//! all candidates ([`correct_train`]).
//!
//! The update treats the per-reference cross-entropy as a per-pixel sum, so
//! the learning rate acts on each logit independently of the grid size.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dataset::{CandidateIndex, RefId, ReferringDataset};
use crate::error::{Error, Result};
use crate::eval::{evaluate, MetricsReport, DEFAULT_THRESHOLD};
use crate::loss::{bce, contrastive_loss, matched_ce_loss};
use crate::mask::{BinaryGrid, Grid, SoftMask};
use crate::matcher::{compute_match_scores, greedy_match, Assignment};
use crate::prediction::{GroundTruth, Prediction, PredictionSet};
use crate::select::Selections;

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Per-reference logits; predictions are their elementwise sigmoid.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    logits: BTreeMap<RefId, Grid<f64>>,
}

impl ToyModel {
    pub fn new(logits: BTreeMap<RefId, Grid<f64>>) -> Result<Self> {
        for (r, g) in &logits {
            if g.as_slice().iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidValue(format!("non-finite logit for {r:?}")));
            }
        }
        Ok(Self { logits })
    }

    /// All-zero logits (every prediction 0.5) for each reference of `ds`.
    /// Images must declare their size.
    pub fn zeros(ds: &ReferringDataset) -> Result<Self> {
        let mut logits = BTreeMap::new();
        for image in ds.images() {
            let (h, w) = image.shape().ok_or_else(|| {
                Error::InvalidValue(format!("image {:?} has no declared size", image.image_id))
            })?;
            for r in image.ref_ids() {
                logits.insert(r.clone(), Grid::filled(h, w, 0.0));
            }
        }
        Ok(Self { logits })
    }

    pub fn logits(&self) -> &BTreeMap<RefId, Grid<f64>> {
        &self.logits
    }

    pub fn predict(&self, ref_id: &str) -> Option<SoftMask> {
        self.logits
            .get(ref_id)
            .map(|g| SoftMask::new(g.map(|&x| sigmoid(x))).expect("sigmoid lies in [0, 1]"))
    }

    pub fn predictions(&self) -> BTreeMap<RefId, SoftMask> {
        self.logits
            .keys()
            .map(|r| (r.clone(), self.predict(r).expect("own key")))
            .collect()
    }

    pub fn prediction_set(&self) -> PredictionSet {
        self.predictions()
            .into_iter()
            .map(|(r, p)| (r, Prediction::Soft(p)))
            .collect()
    }

    /// One gradient step given `∂L/∂p` for some references.
    fn step(&mut self, grads: &BTreeMap<RefId, Grid<f64>>, lr: f64) {
        for (r, g) in grads {
            let logits = self.logits.get_mut(r).expect("gradient for a known reference");
            for (x, &dp) in logits.as_mut_slice().iter_mut().zip(g.as_slice()) {
                let p = sigmoid(*x);
                *x -= lr * dp * p * (1.0 - p);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub pretrain_steps: usize,
    pub correct_steps: usize,
    pub learning_rate: f64,
    /// Weight of the contrastive regulariser; `None` disables it.
    pub gamma: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            pretrain_steps: 200,
            correct_steps: 200,
            learning_rate: 0.5,
            gamma: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Parameter(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if let Some(g) = self.gamma {
            if !(g > 0.0 && g.is_finite()) {
                return Err(Error::Parameter(format!("gamma must be positive, got {g}")));
            }
        }
        Ok(())
    }
}

fn fixed_targets(
    model: &ToyModel,
    selections: &Selections,
    ds: &ReferringDataset,
    index: &CandidateIndex,
) -> Result<BTreeMap<RefId, BinaryGrid>> {
    let mut targets = BTreeMap::new();
    for ref_id in model.logits.keys() {
        let cand = selections
            .get(ref_id)
            .ok_or_else(|| Error::MissingSelection(ref_id.clone()))?;
        let loc = ds
            .locate(ref_id)
            .ok_or_else(|| Error::UnknownId(format!("reference {ref_id:?}")))?;
        let set = index
            .get(&loc.image_id)
            .ok_or_else(|| Error::UnknownId(format!("candidates for image {:?}", loc.image_id)))?;
        targets.insert(ref_id.clone(), set.mask(cand)?.decode());
    }
    Ok(targets)
}

fn fixed_loss(
    model: &ToyModel,
    targets: &BTreeMap<RefId, BinaryGrid>,
) -> Result<(f64, BTreeMap<RefId, Grid<f64>>)> {
    let mut total = 0.0;
    let mut grads = BTreeMap::new();
    for (r, t) in targets {
        let (loss, grad) = bce(&model.predict(r).expect("target keys come from model"), t)?;
        total += loss;
        let n = grad.len() as f64;
        grads.insert(r.clone(), grad.map(|g| g * n));
    }
    Ok((total, grads))
}

/// Gradient descent on cross-entropy toward fixed per-reference masks.
/// Returns the summed loss before every step and after the last one.
pub fn train_on_selections(
    model: &mut ToyModel,
    selections: &Selections,
    ds: &ReferringDataset,
    index: &CandidateIndex,
    steps: usize,
    learning_rate: f64,
) -> Result<Vec<f64>> {
    let targets = fixed_targets(model, selections, ds, index)?;
    let mut losses = Vec::with_capacity(steps + 1);
    for _ in 0..steps {
        let (loss, grads) = fixed_loss(model, &targets)?;
        losses.push(loss);
        model.step(&grads, learning_rate);
    }
    losses.push(fixed_loss(model, &targets)?.0);
    Ok(losses)
}

/// Fits the zero-shot selections for `cfg.pretrain_steps` steps.
pub fn pretrain(
    model: &mut ToyModel,
    selections: &Selections,
    ds: &ReferringDataset,
    index: &CandidateIndex,
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    train_on_selections(model, selections, ds, index, cfg.pretrain_steps, cfg.learning_rate)
}

/// State of one correction step, recorded before the update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub step: usize,
    pub ce_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub contrastive_loss: Option<f64>,
    pub assignments: Vec<Assignment>,
}

/// Each step: predict, score against every listed candidate, match greedily,
/// then descend on the matched cross-entropy (plus the contrastive term when
/// `cfg.gamma` is set). Images without candidate sets are skipped.
pub fn correct_train(
    model: &mut ToyModel,
    ds: &ReferringDataset,
    index: &CandidateIndex,
    cfg: &TrainConfig,
) -> Result<Vec<TraceStep>> {
    cfg.validate()?;
    let mut trace = Vec::with_capacity(cfg.correct_steps);
    for step in 0..cfg.correct_steps {
        let preds = model.predictions();
        let mut grads: BTreeMap<RefId, Grid<f64>> = BTreeMap::new();
        let mut ce_total = 0.0;
        let mut con_total = cfg.gamma.map(|_| 0.0);
        let mut assignments = Vec::new();
        for image in ds.images() {
            let Some(set) = index.get(&image.image_id) else {
                continue;
            };
            let objects = image.object_refs();
            let scores = compute_match_scores(&preds, set, &objects)?;
            let assignment = greedy_match(&scores);
            let ce = matched_ce_loss(&preds, set, &assignment, &objects)?;
            ce_total += ce.value;
            for (r, g) in ce.grads {
                let n = g.len() as f64;
                accumulate(&mut grads, r, g.map(|v| v * n));
            }
            if let Some(gamma) = cfg.gamma {
                let con = contrastive_loss(&preds, set, &assignment, &objects, gamma)?;
                *con_total.as_mut().expect("gamma set") += con.value;
                for (r, g) in con.grads {
                    accumulate(&mut grads, r, g);
                }
            }
            assignments.push(assignment);
        }
        trace.push(TraceStep {
            step,
            ce_loss: ce_total,
            contrastive_loss: con_total,
            assignments,
        });
        model.step(&grads, cfg.learning_rate);
    }
    Ok(trace)
}

fn accumulate(into: &mut BTreeMap<RefId, Grid<f64>>, ref_id: RefId, g: Grid<f64>) {
    match into.get_mut(&ref_id) {
        Some(acc) => acc
            .as_mut_slice()
            .iter_mut()
            .zip(g.as_slice())
            .for_each(|(a, b)| *a += b),
        None => {
            into.insert(ref_id, g);
        }
    }
}

/// Everything needed to run one correction experiment end to end.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub dataset: ReferringDataset,
    pub candidates: CandidateIndex,
    pub selections: Selections,
    pub ground_truth: GroundTruth,
    pub initial: ToyModel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: TrainConfig,
    /// Initial model, before any training.
    pub untrained: MetricsReport,
    /// Selected candidate masks used directly as predictions.
    pub zero_shot: MetricsReport,
    /// After pre-training on the selections.
    pub zs_bootstrap: MetricsReport,
    /// Pre-training continued on the same selections for the correction budget.
    pub ablation: MetricsReport,
    /// Pre-training followed by constrained greedy matching.
    pub corrected: MetricsReport,
    pub pretrain_loss: (f64, f64),
    /// Steps at which any image's assignment differed from the previous step.
    pub assignment_changes: usize,
    pub final_assignments: Vec<Assignment>,
}

pub fn run_experiment(exp: &Experiment, cfg: &TrainConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let gt = &exp.ground_truth;
    let untrained = evaluate(&exp.initial.prediction_set(), gt, DEFAULT_THRESHOLD)?;

    let mut zs_preds = PredictionSet::new();
    for ref_id in gt.keys() {
        let cand = exp
            .selections
            .get(ref_id)
            .ok_or_else(|| Error::MissingSelection(ref_id.clone()))?;
        let loc = exp
            .dataset
            .locate(ref_id)
            .ok_or_else(|| Error::UnknownId(ref_id.clone()))?;
        let mask = exp.candidates[&loc.image_id].mask(cand)?;
        zs_preds.insert(ref_id.clone(), Prediction::Binary(mask.clone()));
    }
    let zero_shot = evaluate(&zs_preds, gt, DEFAULT_THRESHOLD)?;

    let mut bootstrap = exp.initial.clone();
    let losses = pretrain(&mut bootstrap, &exp.selections, &exp.dataset, &exp.candidates, cfg)?;
    let zs_bootstrap = evaluate(&bootstrap.prediction_set(), gt, DEFAULT_THRESHOLD)?;

    let mut ablation_model = bootstrap.clone();
    train_on_selections(
        &mut ablation_model,
        &exp.selections,
        &exp.dataset,
        &exp.candidates,
        cfg.correct_steps,
        cfg.learning_rate,
    )?;
    let ablation = evaluate(&ablation_model.prediction_set(), gt, DEFAULT_THRESHOLD)?;

    let mut corrected_model = bootstrap;
    let trace = correct_train(&mut corrected_model, &exp.dataset, &exp.candidates, cfg)?;
    let corrected = evaluate(&corrected_model.prediction_set(), gt, DEFAULT_THRESHOLD)?;

    let assignment_changes = trace
        .windows(2)
        .filter(|w| w[0].assignments != w[1].assignments)
        .count();
    let final_assignments = trace
        .last()
        .map(|t| t.assignments.clone())
        .unwrap_or_default();

    Ok(ExperimentReport {
        config: cfg.clone(),
        untrained,
        zero_shot,
        zs_bootstrap,
        ablation,
        corrected,
        pretrain_loss: (losses[0], *losses.last().expect("non-empty")),
        assignment_changes,
        final_assignments,
    })
}

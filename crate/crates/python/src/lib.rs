//! Python bindings for the refmatch core.
//!
//! Masks cross the boundary as row-major nested lists. Larger results
//! (metric reports, simulation reports) are returned as JSON strings.

use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use refmatch_core::dataset::ObjectRefs;
use refmatch_core::eval::evaluate;
use refmatch_core::matcher::ScoreEntry;
use refmatch_core::prediction::{load_ground_truth, load_predictions};
use refmatch_core::scenario::{fig5_scenario, random_scenario, ScenarioConfig};
use refmatch_core::trainer::{run_experiment, TrainConfig};
use refmatch_core::{select, Grid, MatchScores, SoftMask};

fn err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn grid_from_rows<T: Copy>(rows: &[Vec<T>]) -> PyResult<Grid<T>> {
    let h = rows.len();
    let w = rows.first().map_or(0, Vec::len);
    if h == 0 || w == 0 || rows.iter().any(|r| r.len() != w) {
        return Err(err("expected a non-empty rectangular list of rows"));
    }
    Ok(Grid::from_fn(h, w, |r, c| rows[r][c]))
}

fn rows_from_grid<T: Copy>(g: &Grid<T>) -> Vec<Vec<T>> {
    (0..g.height())
        .map(|r| (0..g.width()).map(|c| *g.get(r, c)).collect())
        .collect()
}

/// Column-major uncompressed run-length mask.
#[pyclass(frozen, eq, skip_from_py_object)]
#[derive(Clone, PartialEq)]
struct RleMask(refmatch_core::RleMask);

#[pymethods]
impl RleMask {
    #[new]
    fn new(height: usize, width: usize, counts: Vec<u32>) -> PyResult<Self> {
        refmatch_core::RleMask::new(height, width, counts).map(Self).map_err(err)
    }

    #[staticmethod]
    fn encode(rows: Vec<Vec<u8>>) -> PyResult<Self> {
        let g = grid_from_rows(&rows)?;
        refmatch_core::RleMask::encode(&g).map(Self).map_err(err)
    }

    fn decode(&self) -> Vec<Vec<u32>> {
        rows_from_grid(&self.0.decode().map(|&v| u32::from(v)))
    }

    #[getter]
    fn counts(&self) -> Vec<u32> {
        self.0.counts().to_vec()
    }

    #[getter]
    fn shape(&self) -> (usize, usize) {
        self.0.shape()
    }

    fn area(&self) -> u64 {
        self.0.area()
    }

    fn __repr__(&self) -> String {
        let (h, w) = self.0.shape();
        format!("RleMask({h}, {w}, {:?})", self.0.counts())
    }
}

fn soft(rows: &[Vec<f64>]) -> PyResult<SoftMask> {
    SoftMask::new(grid_from_rows(rows)?).map_err(err)
}

#[pyfunction]
fn iou(a: &RleMask, b: &RleMask) -> PyResult<f64> {
    refmatch_core::iou(&a.0, &b.0).map_err(err)
}

#[pyfunction]
fn soft_iou(pred: Vec<Vec<f64>>, target: &RleMask) -> PyResult<f64> {
    refmatch_core::soft_iou(&soft(&pred)?, &target.0).map_err(err)
}

#[pyfunction]
fn soft_iou_grad(pred: Vec<Vec<f64>>, target: &RleMask) -> PyResult<Vec<Vec<f64>>> {
    let g = refmatch_core::soft_iou_grad(&soft(&pred)?, &target.0).map_err(err)?;
    Ok(rows_from_grid(&g))
}

#[pyfunction]
fn cosine_similarity(u: Vec<f32>, v: Vec<f32>) -> PyResult<f64> {
    select::cosine_similarity(&u, &v).map_err(err)
}

#[pyfunction]
fn project_class(phrase: Vec<f32>, labels: BTreeMap<String, Vec<f32>>) -> PyResult<String> {
    let labels = labels.iter().map(|(k, v)| (k.as_str(), v.as_slice())).collect();
    select::project_class(&phrase, &labels).map_err(err)
}

type Entry = (String, String, String, f64);

fn match_scores(objects: ObjectRefs, entries: Vec<Entry>) -> PyResult<MatchScores> {
    let entries = entries
        .iter()
        .map(|(o, r, c, s)| ScoreEntry::new(o, r, c, *s))
        .collect();
    MatchScores::new("image", objects, entries).map_err(err)
}

/// `objects` maps object id to its reference ids; `entries` holds
/// `(object, ref, candidate, score)` tuples. Returns object -> candidate.
#[pyfunction]
fn greedy_match(objects: ObjectRefs, entries: Vec<Entry>) -> PyResult<BTreeMap<String, String>> {
    let s = match_scores(objects, entries)?;
    Ok(refmatch_core::greedy_match(&s).matched)
}

/// Exhaustive optimum as `(assignment, objective)`.
#[pyfunction]
fn brute_force_match(objects: ObjectRefs, entries: Vec<Entry>) -> PyResult<(BTreeMap<String, String>, f64)> {
    let s = match_scores(objects, entries)?;
    let opt = refmatch_core::brute_force_match(&s).map_err(err)?;
    Ok((opt.assignment.matched, opt.objective))
}

#[pyfunction]
#[pyo3(signature = (predictions, groundtruth, threshold = 0.5))]
fn evaluate_files(predictions: PathBuf, groundtruth: PathBuf, threshold: f64) -> PyResult<String> {
    let preds = load_predictions(&predictions).map_err(err)?;
    let gt = load_ground_truth(&groundtruth).map_err(err)?;
    let report = evaluate(&preds, &gt, threshold).map_err(err)?;
    serde_json::to_string(&report).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (scenario, seed, steps = 200, lr = 0.5, gamma = None))]
fn simulate(scenario: &str, seed: u64, steps: usize, lr: f64, gamma: Option<f64>) -> PyResult<String> {
    let experiment = match scenario {
        "fig5" => fig5_scenario(16, seed, true),
        "random" => random_scenario(&ScenarioConfig {
            seed,
            ..Default::default()
        }),
        other => return Err(err(format!("unknown scenario {other:?}"))),
    }
    .map_err(err)?;
    let cfg = TrainConfig {
        pretrain_steps: steps,
        correct_steps: steps,
        learning_rate: lr,
        gamma,
        seed,
    };
    let report = run_experiment(&experiment, &cfg).map_err(err)?;
    serde_json::to_string(&report).map_err(err)
}

#[pymodule]
fn refmatch(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<RleMask>()?;
    m.add_function(wrap_pyfunction!(iou, m)?)?;
    m.add_function(wrap_pyfunction!(soft_iou, m)?)?;
    m.add_function(wrap_pyfunction!(soft_iou_grad, m)?)?;
    m.add_function(wrap_pyfunction!(cosine_similarity, m)?)?;
    m.add_function(wrap_pyfunction!(project_class, m)?)?;
    m.add_function(wrap_pyfunction!(greedy_match, m)?)?;
    m.add_function(wrap_pyfunction!(brute_force_match, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_files, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    Ok(())
}

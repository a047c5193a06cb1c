#![allow(dead_code)]

use std::path::PathBuf;

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use refmatch_core::dataset::ObjectRefs;
use refmatch_core::matcher::{MatchScores, ScoreEntry};
use refmatch_core::{BinaryGrid, Grid, SoftMask};

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../fixtures/mini")
        .join(name)
}

pub fn random_grid(rng: &mut ChaCha8Rng, h: usize, w: usize, density: f64) -> BinaryGrid {
    Grid::from_fn(h, w, |_, _| u8::from(rng.random_bool(density)))
}

pub fn random_soft(rng: &mut ChaCha8Rng, h: usize, w: usize, lo: f64, hi: f64) -> SoftMask {
    SoftMask::new(Grid::from_fn(h, w, |_, _| rng.random_range(lo..hi))).unwrap()
}

/// Image with `objects` objects of `refs` references each; every reference
/// lists a random non-empty subset of `candidates` shared candidate ids.
pub fn random_scores(rng: &mut ChaCha8Rng, objects: usize, refs: usize, candidates: usize) -> MatchScores {
    let ids: Vec<String> = (0..candidates).map(|c| format!("c{c}")).collect();
    let mut object_refs = ObjectRefs::new();
    let mut entries = Vec::new();
    for j in 0..objects {
        let o = format!("o{j}");
        let rs: Vec<String> = (0..refs).map(|k| format!("o{j}r{k}")).collect();
        for r in &rs {
            let n = rng.random_range(1..=candidates);
            for c in ids.choose_multiple(rng, n) {
                entries.push(ScoreEntry::new(&o, r, c, rng.random_range(0.0..1.0)));
            }
        }
        object_refs.insert(o, rs);
    }
    MatchScores::new("img", object_refs, entries).unwrap()
}

/// Largest relative error between an analytic and a numeric gradient, with
/// `floor` guarding against near-zero denominators.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Central differences of `f` with respect to each value of `values`.
pub fn central_diff(values: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut x = values.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + h;
            let up = f(&x);
            x[i] = orig - h;
            let down = f(&x);
            x[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

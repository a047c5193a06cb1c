//! Matched cross-entropy and the pixel-dense contrastive regulariser, with
//! analytic gradients with respect to the predicted probabilities.

use std::collections::{BTreeMap, BTreeSet};

use crate::dataset::{CandidateId, CandidateSet, ObjectRefs, RefId};
use crate::error::{Error, Result};
use crate::mask::{check_shape, BinaryGrid, Grid, RleMask, SoftMask};
use crate::matcher::{check_feasible, Assignment};

/// Probability clamp for logarithms and KL denominators.
pub const PROB_EPS: f64 = 1e-7;

/// A scalar loss and its gradient for every prediction it touched. References
/// absent from `grads` have zero gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub value: f64,
    pub grads: BTreeMap<RefId, Grid<f64>>,
}

#[inline]
fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

#[inline]
fn inside_clamp(p: f64) -> bool {
    (PROB_EPS..=1.0 - PROB_EPS).contains(&p)
}

/// Mean per-pixel binary cross-entropy and its gradient.
pub fn bce(pred: &SoftMask, target: &BinaryGrid) -> Result<(f64, Grid<f64>)> {
    check_shape(target.shape(), pred.shape())?;
    let n = pred.values().len() as f64;
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(pred.values().len());
    for (&p, &t) in pred.values().iter().zip(target.as_slice()) {
        let q = clamp_prob(p);
        let t = t as f64;
        total -= t * q.ln() + (1.0 - t) * (1.0 - q).ln();
        grad.push(if inside_clamp(p) {
            (-t / q + (1.0 - t) / (1.0 - q)) / n
        } else {
            0.0
        });
    }
    let (h, w) = pred.shape();
    Ok((total / n, Grid::from_column_major(h, w, grad)?))
}

fn ensure_feasible(
    assignment: &Assignment,
    candidates: &CandidateSet,
    objects: &ObjectRefs,
) -> Result<()> {
    let ids: BTreeSet<CandidateId> = candidates.candidate_ids().into_iter().cloned().collect();
    let violations = check_feasible(&assignment.delta(objects), objects, &ids);
    if !violations.is_empty() {
        return Err(Error::Infeasible(format!("{violations:?}")));
    }
    Ok(())
}

fn decode_cached<'a>(
    cache: &mut BTreeMap<&'a str, BinaryGrid>,
    candidates: &'a CandidateSet,
    id: &'a str,
) -> Result<()> {
    if !cache.contains_key(id) {
        cache.insert(id, candidates.mask(id)?.decode());
    }
    Ok(())
}

/// Σ over matched references of BCE(prediction, assigned candidate mask).
/// Unmatched objects contribute nothing.
pub fn matched_ce_loss(
    predictions: &BTreeMap<RefId, SoftMask>,
    candidates: &CandidateSet,
    assignment: &Assignment,
    objects: &ObjectRefs,
) -> Result<LossGrad> {
    ensure_feasible(assignment, candidates, objects)?;
    let mut cache = BTreeMap::new();
    let mut value = 0.0;
    let mut grads = BTreeMap::new();
    for d in assignment.delta(objects) {
        let pred = predictions
            .get(&d.ref_id)
            .ok_or_else(|| Error::MissingPrediction(d.ref_id.clone()))?;
        let cand = candidates
            .get(&d.candidate_id)
            .map(|c| c.candidate_id.as_str())
            .expect("feasibility checked candidate ids");
        decode_cached(&mut cache, candidates, cand)?;
        let (loss, grad) = bce(pred, &cache[cand])?;
        value += loss;
        grads.insert(d.ref_id, grad);
    }
    Ok(LossGrad { value, grads })
}

/// Pixels active in either mask.
pub fn active_pixels(a: &RleMask, b: &RleMask) -> Result<RleMask> {
    a.union(b)
}

/// Per-pixel Bernoulli KL(a ∥ b) and its partial derivatives, all on
/// clamped probabilities.
#[inline]
fn bernoulli_kl(x: f64, y: f64) -> (f64, f64, f64) {
    let a = clamp_prob(x);
    let b = clamp_prob(y);
    let kl = a * (a / b).ln() + (1.0 - a) * ((1.0 - a) / (1.0 - b)).ln();
    let da = if inside_clamp(x) {
        (a / b).ln() - ((1.0 - a) / (1.0 - b)).ln()
    } else {
        0.0
    };
    let db = if inside_clamp(y) {
        -a / b + (1.0 - a) / (1.0 - b)
    } else {
        0.0
    };
    (kl, da, db)
}

/// Summed Bernoulli KL between two probability grids, optionally restricted to `region`.
fn grid_kl(
    p: &SoftMask,
    q: &SoftMask,
    region: Option<&BinaryGrid>,
    gp: &mut [f64],
    gq: &mut [f64],
    scale: f64,
) -> f64 {
    let mut total = 0.0;
    for i in 0..p.values().len() {
        if region.is_some_and(|r| r.as_slice()[i] == 0) {
            continue;
        }
        let (kl, da, db) = bernoulli_kl(p.values()[i], q.values()[i]);
        total += kl;
        gp[i] += scale * da;
        gq[i] += scale * db;
    }
    total
}

/// Pixel-dense contrastive loss over one image.
///
/// For every matched reference `(j, k)`:
/// * positive part: `Σ_{k' ≠ k} KL(p_{j,k} ∥ p_{j,k'})`, summed over pixels;
/// * negative part: `Σ_{j' ≠ j, k'} 1 / (γ · KL(p_{j,k} ∥ p_{j',k'}))`, with the
///   KL summed over the pixels active in either assigned mask and clamped
///   below by [`PROB_EPS`].
///
/// Unmatched objects take no part.
pub fn contrastive_loss(
    predictions: &BTreeMap<RefId, SoftMask>,
    candidates: &CandidateSet,
    assignment: &Assignment,
    objects: &ObjectRefs,
    gamma: f64,
) -> Result<LossGrad> {
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(Error::Parameter(format!("gamma must be positive, got {gamma}")));
    }
    ensure_feasible(assignment, candidates, objects)?;

    // (object, reference, candidate) for every matched reference
    let members: Vec<(&str, &str, &str)> = assignment
        .matched
        .iter()
        .flat_map(|(o, c)| {
            objects[o]
                .iter()
                .map(move |r| (o.as_str(), r.as_str(), c.as_str()))
        })
        .collect();

    let mut grads: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    let mut shape = None;
    for &(_, r, _) in &members {
        let p = predictions
            .get(r)
            .ok_or_else(|| Error::MissingPrediction(r.to_string()))?;
        match shape {
            None => shape = Some(p.shape()),
            Some(s) => check_shape(s, p.shape())?,
        }
        grads.insert(r, vec![0.0; p.values().len()]);
    }

    let mut masks = BTreeMap::new();
    for &(_, _, c) in &members {
        decode_cached(&mut masks, candidates, c)?;
    }
    let mut regions: BTreeMap<(&str, &str), BinaryGrid> = BTreeMap::new();

    let mut value = 0.0;
    for &(oj, rk, cj) in &members {
        for &(oi, ri, ci) in &members {
            if rk == ri {
                continue;
            }
            let (p, q) = (&predictions[rk], &predictions[ri]);
            let mut gp = vec![0.0; p.values().len()];
            let mut gq = vec![0.0; q.values().len()];
            if oj == oi {
                value += grid_kl(p, q, None, &mut gp, &mut gq, 1.0);
            } else {
                let key = if cj <= ci { (cj, ci) } else { (ci, cj) };
                if let std::collections::btree_map::Entry::Vacant(slot) = regions.entry(key) {
                    let (a, b) = (&masks[cj], &masks[ci]);
                    check_shape(a.shape(), b.shape())?;
                    let data = a
                        .as_slice()
                        .iter()
                        .zip(b.as_slice())
                        .map(|(x, y)| x | y)
                        .collect();
                    slot.insert(Grid::from_column_major(a.height(), a.width(), data)?);
                }
                let region = &regions[&key];
                let mut dp = vec![0.0; gp.len()];
                let mut dq = vec![0.0; gq.len()];
                let kl = grid_kl(p, q, Some(region), &mut dp, &mut dq, 1.0);
                if kl > PROB_EPS {
                    value += 1.0 / (gamma * kl);
                    let scale = -1.0 / (gamma * kl * kl);
                    gp.iter_mut().zip(&dp).for_each(|(g, d)| *g += scale * d);
                    gq.iter_mut().zip(&dq).for_each(|(g, d)| *g += scale * d);
                } else {
                    value += 1.0 / (gamma * PROB_EPS);
                }
            }
            grads
                .get_mut(rk)
                .expect("member")
                .iter_mut()
                .zip(&gp)
                .for_each(|(g, d)| *g += d);
            grads
                .get_mut(ri)
                .expect("member")
                .iter_mut()
                .zip(&gq)
                .for_each(|(g, d)| *g += d);
        }
    }

    let (h, w) = shape.unwrap_or((0, 0));
    let grads = grads
        .into_iter()
        .map(|(r, g)| Ok((r.to_string(), Grid::from_column_major(h, w, g)?)))
        .collect::<Result<_>>()?;
    Ok(LossGrad { value, grads })
}

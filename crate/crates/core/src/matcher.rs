//! Constrained greedy matching of candidate masks to objects.
//!
//! A matching assigns at most one candidate to every object of an image. The
//! assignment is shared by all references of that object, and no candidate
//! is given to two objects. Objects may stay unmatched when the image has
//! fewer usable candidates than objects.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::dataset::{CandidateId, CandidateSet, ImageId, ObjectId, ObjectRefs, RefId};
use crate::error::{Error, Result};
use crate::mask::{soft_iou_dense, BinaryGrid, SoftMask};

/// Largest instance `brute_force_match` will enumerate.
pub const MAX_ENUM_OBJECTS: usize = 6;
pub const MAX_ENUM_CANDIDATES: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreEntry {
    pub object_id: ObjectId,
    pub ref_id: RefId,
    pub candidate_id: CandidateId,
    pub score: f64,
}

impl ScoreEntry {
    pub fn new(object_id: &str, ref_id: &str, candidate_id: &str, score: f64) -> Self {
        Self {
            object_id: object_id.into(),
            ref_id: ref_id.into(),
            candidate_id: candidate_id.into(),
            score,
        }
    }
}

/// Scores for every (object, reference, candidate) triple of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchScores {
    image_id: ImageId,
    objects: ObjectRefs,
    entries: Vec<ScoreEntry>,
}

impl MatchScores {
    pub fn new(image_id: impl Into<ImageId>, objects: ObjectRefs, entries: Vec<ScoreEntry>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for e in &entries {
            let refs = objects
                .get(&e.object_id)
                .ok_or_else(|| Error::UnknownId(format!("object {:?}", e.object_id)))?;
            if !refs.contains(&e.ref_id) {
                return Err(Error::UnknownId(format!(
                    "reference {:?} of object {:?}",
                    e.ref_id, e.object_id
                )));
            }
            if !e.score.is_finite() {
                return Err(Error::InvalidValue(format!(
                    "non-finite score for ({}, {}, {})",
                    e.object_id, e.ref_id, e.candidate_id
                )));
            }
            if !seen.insert((&e.object_id, &e.ref_id, &e.candidate_id)) {
                return Err(Error::InvalidValue(format!(
                    "duplicate score for ({}, {}, {})",
                    e.object_id, e.ref_id, e.candidate_id
                )));
            }
        }
        Ok(Self {
            image_id: image_id.into(),
            objects,
            entries,
        })
    }

    /// Convenience constructor for one-reference-per-object instances given as
    /// a dense `objects × candidates` matrix. Objects are named `o0..`, their
    /// references `o0r0..` and candidates `c0..`.
    pub fn from_matrix(matrix: &[Vec<f64>]) -> Result<Self> {
        let mut objects = ObjectRefs::new();
        let mut entries = Vec::new();
        for (j, row) in matrix.iter().enumerate() {
            let o = format!("o{j}");
            let r = format!("o{j}r0");
            objects.insert(o.clone(), vec![r.clone()]);
            for (c, &s) in row.iter().enumerate() {
                entries.push(ScoreEntry::new(&o, &r, &format!("c{c}"), s));
            }
        }
        Self::new("matrix", objects, entries)
    }

    pub fn image_id(&self) -> &str {
        &self.image_id
    }

    pub fn objects(&self) -> &ObjectRefs {
        &self.objects
    }

    pub fn entries(&self) -> &[ScoreEntry] {
        &self.entries
    }

    pub fn candidate_ids(&self) -> BTreeSet<&CandidateId> {
        self.entries.iter().map(|e| &e.candidate_id).collect()
    }

    /// Σ_k score(j, k, c) for every scored (object, candidate) pair, summing
    /// references in the object's declared order.
    fn pair_totals(&self) -> HashMap<(&str, &str), f64> {
        let lookup: HashMap<(&str, &str, &str), f64> = self
            .entries
            .iter()
            .map(|e| ((e.object_id.as_str(), e.ref_id.as_str(), e.candidate_id.as_str()), e.score))
            .collect();
        let mut totals = HashMap::new();
        for e in &self.entries {
            let key = (e.object_id.as_str(), e.candidate_id.as_str());
            if totals.contains_key(&key) {
                continue;
            }
            let total = self.objects[&e.object_id]
                .iter()
                .filter_map(|r| lookup.get(&(key.0, r.as_str(), key.1)))
                .sum::<f64>();
            totals.insert(key, total);
        }
        totals
    }

    /// Matching objective: the summed score of every matched reference.
    pub fn objective(&self, assignment: &Assignment) -> f64 {
        let totals = self.pair_totals();
        objective_from(&totals, &assignment.matched)
    }
}

fn objective_from(totals: &HashMap<(&str, &str), f64>, matched: &BTreeMap<ObjectId, CandidateId>) -> f64 {
    matched
        .iter()
        .map(|(o, c)| totals.get(&(o.as_str(), c.as_str())).copied().unwrap_or(0.0))
        .sum()
}

/// Object-level matching for one image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    pub image_id: ImageId,
    pub matched: BTreeMap<ObjectId, CandidateId>,
    pub unmatched: Vec<ObjectId>,
}

/// One `δ = 1` cell of the reference-level matching variable.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DeltaEntry {
    pub object_id: ObjectId,
    pub ref_id: RefId,
    pub candidate_id: CandidateId,
}

impl Assignment {
    pub fn from_pairs<'a>(
        image_id: &str,
        objects: &ObjectRefs,
        pairs: impl IntoIterator<Item = (&'a str, &'a str)>,
    ) -> Self {
        let matched: BTreeMap<_, _> = pairs
            .into_iter()
            .map(|(o, c)| (o.to_string(), c.to_string()))
            .collect();
        let unmatched = objects
            .keys()
            .filter(|o| !matched.contains_key(*o))
            .cloned()
            .collect();
        Self {
            image_id: image_id.into(),
            matched,
            unmatched,
        }
    }

    /// Expands to reference level: every reference of a matched object gets
    /// the object's candidate.
    pub fn delta(&self, objects: &ObjectRefs) -> Vec<DeltaEntry> {
        let mut out = Vec::new();
        for (o, c) in &self.matched {
            for r in objects.get(o).into_iter().flatten() {
                out.push(DeltaEntry {
                    object_id: o.clone(),
                    ref_id: r.clone(),
                    candidate_id: c.clone(),
                });
            }
        }
        out
    }

    pub fn ref_targets(&self, objects: &ObjectRefs) -> BTreeMap<RefId, CandidateId> {
        self.delta(objects)
            .into_iter()
            .map(|d| (d.ref_id, d.candidate_id))
            .collect()
    }
}

/// Soft-IoU between every reference's prediction and each of its listed candidates.
pub fn compute_match_scores(
    predictions: &BTreeMap<RefId, SoftMask>,
    candidates: &CandidateSet,
    objects: &ObjectRefs,
) -> Result<MatchScores> {
    let mut decoded: BTreeMap<&str, BinaryGrid> = BTreeMap::new();
    let mut entries = Vec::new();
    for (object_id, refs) in objects {
        for ref_id in refs {
            let Some(listed) = candidates.per_reference.get(ref_id) else {
                continue;
            };
            let pred = predictions
                .get(ref_id)
                .ok_or_else(|| Error::MissingPrediction(ref_id.clone()))?;
            for cand in listed {
                if !decoded.contains_key(cand.as_str()) {
                    decoded.insert(cand, candidates.mask(cand)?.decode());
                }
                let score = soft_iou_dense(pred, &decoded[cand.as_str()])?;
                entries.push(ScoreEntry {
                    object_id: object_id.clone(),
                    ref_id: ref_id.clone(),
                    candidate_id: cand.clone(),
                    score,
                });
            }
        }
    }
    MatchScores::new(candidates.image_id.clone(), objects.clone(), entries)
}

/// Descending-score scan with an exclusion set.
///
/// The best remaining (object, reference, candidate) triple is accepted unless
/// its object or its candidate is already taken; acceptance matches the
/// candidate to every reference of the object. Ties are broken by
/// `(score desc, object asc, ref asc, candidate asc)`, so the result does not
/// depend on entry order.
pub fn greedy_match(scores: &MatchScores) -> Assignment {
    let mut order: Vec<&ScoreEntry> = scores.entries.iter().collect();
    order.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.object_id.cmp(&b.object_id))
            .then_with(|| a.ref_id.cmp(&b.ref_id))
            .then_with(|| a.candidate_id.cmp(&b.candidate_id))
    });
    let mut matched = BTreeMap::new();
    let mut used = BTreeSet::new();
    for e in order {
        if matched.contains_key(&e.object_id) || used.contains(&e.candidate_id) {
            continue;
        }
        matched.insert(e.object_id.clone(), e.candidate_id.clone());
        used.insert(e.candidate_id.clone());
    }
    let unmatched = scores
        .objects
        .keys()
        .filter(|o| !matched.contains_key(*o))
        .cloned()
        .collect();
    Assignment {
        image_id: scores.image_id.clone(),
        matched,
        unmatched,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimalMatch {
    pub assignment: Assignment,
    pub objective: f64,
}

/// Exhaustive optimum over maximal injective object → candidate maps.
///
/// An object may only take candidates scored for at least one of its
/// references, and it may stay unmatched only if all of those are used by
/// other objects. Among equal objectives the first assignment in
/// lexicographic order (objects ascending, candidates ascending, unmatched
/// last) wins.
pub fn brute_force_match(scores: &MatchScores) -> Result<OptimalMatch> {
    let objects: Vec<&ObjectId> = scores.objects.keys().collect();
    let n_candidates = scores.candidate_ids().len();
    if objects.len() > MAX_ENUM_OBJECTS || n_candidates > MAX_ENUM_CANDIDATES {
        return Err(Error::TooLarge {
            objects: objects.len(),
            candidates: n_candidates,
            max_objects: MAX_ENUM_OBJECTS,
            max_candidates: MAX_ENUM_CANDIDATES,
        });
    }
    let mut allowed: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    for e in &scores.entries {
        allowed
            .entry(e.object_id.as_str())
            .or_default()
            .insert(e.candidate_id.as_str());
    }
    let options: Vec<Vec<&str>> = objects
        .iter()
        .map(|o| {
            allowed
                .get(o.as_str())
                .map(|s| s.iter().copied().collect())
                .unwrap_or_default()
        })
        .collect();
    let totals = scores.pair_totals();

    struct Search<'a> {
        options: &'a [Vec<&'a str>],
        choice: Vec<Option<&'a str>>,
        used: BTreeSet<&'a str>,
        best: Option<(f64, Vec<Option<&'a str>>)>,
        objects: &'a [&'a ObjectId],
        totals: &'a HashMap<(&'a str, &'a str), f64>,
    }

    impl<'a> Search<'a> {
        fn run(&mut self, depth: usize) {
            if depth == self.options.len() {
                let maximal = self.choice.iter().zip(self.options).all(|(c, opts)| {
                    c.is_some() || opts.iter().all(|o| self.used.contains(o))
                });
                if !maximal {
                    return;
                }
                let value: f64 = self
                    .objects
                    .iter()
                    .zip(&self.choice)
                    .filter_map(|(o, c)| c.map(|c| (o.as_str(), c)))
                    .map(|k| self.totals.get(&k).copied().unwrap_or(0.0))
                    .sum();
                if self.best.as_ref().is_none_or(|(b, _)| value > *b) {
                    self.best = Some((value, self.choice.clone()));
                }
                return;
            }
            for i in 0..self.options[depth].len() {
                let c = self.options[depth][i];
                if self.used.contains(c) {
                    continue;
                }
                self.used.insert(c);
                self.choice.push(Some(c));
                self.run(depth + 1);
                self.choice.pop();
                self.used.remove(c);
            }
            self.choice.push(None);
            self.run(depth + 1);
            self.choice.pop();
        }
    }

    let mut search = Search {
        options: &options,
        choice: Vec::with_capacity(objects.len()),
        used: BTreeSet::new(),
        best: None,
        objects: &objects,
        totals: &totals,
    };
    search.run(0);
    let (_, choice) = search.best.expect("the all-unmatched branch always terminates");
    let pairs = objects
        .iter()
        .zip(&choice)
        .filter_map(|(o, c)| c.map(|c| (o.as_str(), c)));
    let assignment = Assignment::from_pairs(&scores.image_id, &scores.objects, pairs);
    // Recompute through the shared path so greedy and optimum compare exactly.
    let objective = objective_from(&totals, &assignment.matched);
    Ok(OptimalMatch {
        assignment,
        objective,
    })
}

/// Breach of the matching constraints.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    /// A reference carries more than one mask.
    MultipleMasks {
        ref_id: RefId,
        candidates: Vec<CandidateId>,
    },
    /// References of one object do not share the same mask.
    InconsistentObject { object_id: ObjectId },
    /// One mask serves several objects.
    SharedCandidate {
        candidate_id: CandidateId,
        objects: Vec<ObjectId>,
    },
    UnknownObject { object_id: ObjectId },
    UnknownReference { object_id: ObjectId, ref_id: RefId },
    UnknownCandidate { candidate_id: CandidateId },
}

/// Returns every constraint violated by `delta`. Objects without any `δ = 1`
/// cell are treated as unmatched, which is allowed.
pub fn check_feasible(
    delta: &[DeltaEntry],
    objects: &ObjectRefs,
    candidates: &BTreeSet<CandidateId>,
) -> Vec<Violation> {
    let mut violations = Vec::new();
    let mut per_ref: BTreeMap<(&ObjectId, &RefId), BTreeSet<&CandidateId>> = BTreeMap::new();
    let mut per_candidate: BTreeMap<&CandidateId, BTreeSet<&ObjectId>> = BTreeMap::new();
    let mut reported_unknown = BTreeSet::new();
    for d in delta {
        match objects.get(&d.object_id) {
            None => {
                if reported_unknown.insert(("o", d.object_id.clone())) {
                    violations.push(Violation::UnknownObject {
                        object_id: d.object_id.clone(),
                    });
                }
                continue;
            }
            Some(refs) if !refs.contains(&d.ref_id) => {
                violations.push(Violation::UnknownReference {
                    object_id: d.object_id.clone(),
                    ref_id: d.ref_id.clone(),
                });
                continue;
            }
            _ => {}
        }
        if !candidates.contains(&d.candidate_id) {
            if reported_unknown.insert(("c", d.candidate_id.clone())) {
                violations.push(Violation::UnknownCandidate {
                    candidate_id: d.candidate_id.clone(),
                });
            }
            continue;
        }
        per_ref
            .entry((&d.object_id, &d.ref_id))
            .or_default()
            .insert(&d.candidate_id);
        per_candidate
            .entry(&d.candidate_id)
            .or_default()
            .insert(&d.object_id);
    }

    for ((_, ref_id), cands) in &per_ref {
        if cands.len() > 1 {
            violations.push(Violation::MultipleMasks {
                ref_id: (*ref_id).clone(),
                candidates: cands.iter().map(|c| (*c).clone()).collect(),
            });
        }
    }
    for (object_id, refs) in objects {
        let sets: Vec<Option<&BTreeSet<&CandidateId>>> =
            refs.iter().map(|r| per_ref.get(&(object_id, r))).collect();
        if sets.iter().all(Option::is_none) {
            continue;
        }
        if sets.windows(2).any(|w| w[0] != w[1]) {
            violations.push(Violation::InconsistentObject {
                object_id: object_id.clone(),
            });
        }
    }
    for (candidate_id, objs) in per_candidate {
        if objs.len() > 1 {
            violations.push(Violation::SharedCandidate {
                candidate_id: candidate_id.clone(),
                objects: objs.into_iter().cloned().collect(),
            });
        }
    }
    violations
}

//! Weakly-supervised referring dataset and per-image candidate masks.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jsonl;
use crate::mask::RleMask;

pub type ImageId = String;
pub type ObjectId = String;
pub type RefId = String;
pub type CandidateId = String;

/// Object → its reference ids, for one image.
pub type ObjectRefs = BTreeMap<ObjectId, Vec<RefId>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reference {
    pub ref_id: RefId,
    pub text: String,
    /// Noun phrase extracted upstream, kept for auditing class projection.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phrase: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectRecord {
    pub object_id: ObjectId,
    pub references: Vec<Reference>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: ImageId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub height: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<u32>,
    pub objects: Vec<ObjectRecord>,
}

impl ImageRecord {
    pub fn shape(&self) -> Option<(usize, usize)> {
        Some((self.height? as usize, self.width? as usize))
    }

    pub fn object_refs(&self) -> ObjectRefs {
        self.objects
            .iter()
            .map(|o| {
                (
                    o.object_id.clone(),
                    o.references.iter().map(|r| r.ref_id.clone()).collect(),
                )
            })
            .collect()
    }

    pub fn ref_ids(&self) -> impl Iterator<Item = &RefId> {
        self.objects
            .iter()
            .flat_map(|o| o.references.iter().map(|r| &r.ref_id))
    }
}

/// Where a reference lives.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RefLocation {
    pub image_id: ImageId,
    pub object_id: ObjectId,
}

/// Validated dataset: unique ids, every object referenced at least once.
#[derive(Debug, Clone)]
pub struct ReferringDataset {
    images: Vec<ImageRecord>,
    ref_index: BTreeMap<RefId, RefLocation>,
    image_index: BTreeMap<ImageId, usize>,
}

impl PartialEq for ReferringDataset {
    fn eq(&self, other: &Self) -> bool {
        self.images == other.images
    }
}

impl ReferringDataset {
    pub fn new(images: Vec<ImageRecord>) -> Result<Self> {
        let lines: Vec<usize> = (1..=images.len()).collect();
        Self::build(images, &lines, "<memory>")
    }

    fn build(images: Vec<ImageRecord>, lines: &[usize], source: &str) -> Result<Self> {
        let fail = |line: usize, message: String| Error::Validation {
            path: source.to_string(),
            line,
            message,
        };
        let mut image_index = BTreeMap::new();
        let mut ref_index = BTreeMap::new();
        for (idx, (image, &line)) in images.iter().zip(lines).enumerate() {
            if image_index.insert(image.image_id.clone(), idx).is_some() {
                return Err(fail(line, format!("duplicate image_id {:?}", image.image_id)));
            }
            if image.height == Some(0) || image.width == Some(0) {
                return Err(fail(
                    line,
                    format!("image {:?} has a zero dimension", image.image_id),
                ));
            }
            let mut objects = BTreeSet::new();
            for object in &image.objects {
                if !objects.insert(&object.object_id) {
                    return Err(fail(
                        line,
                        format!(
                            "duplicate object_id {:?} in image {:?}",
                            object.object_id, image.image_id
                        ),
                    ));
                }
                if object.references.is_empty() {
                    return Err(fail(
                        line,
                        format!(
                            "object {:?} in image {:?} has no references",
                            object.object_id, image.image_id
                        ),
                    ));
                }
                for r in &object.references {
                    let loc = RefLocation {
                        image_id: image.image_id.clone(),
                        object_id: object.object_id.clone(),
                    };
                    if ref_index.insert(r.ref_id.clone(), loc).is_some() {
                        return Err(fail(line, format!("duplicate ref_id {:?}", r.ref_id)));
                    }
                }
            }
        }
        Ok(Self {
            images,
            ref_index,
            image_index,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let located = jsonl::read_path::<ImageRecord>(path, jsonl::DATASET)?;
        let lines: Vec<usize> = located.iter().map(|l| l.line).collect();
        let images = located.into_iter().map(|l| l.record).collect();
        Self::build(images, &lines, &path.display().to_string())
    }

    pub fn write<W: Write>(&self, out: W) -> Result<()> {
        jsonl::write(out, jsonl::DATASET, &self.images)
    }

    pub fn images(&self) -> &[ImageRecord] {
        &self.images
    }

    pub fn image(&self, image_id: &str) -> Option<&ImageRecord> {
        self.image_index.get(image_id).map(|&i| &self.images[i])
    }

    pub fn locate(&self, ref_id: &str) -> Option<&RefLocation> {
        self.ref_index.get(ref_id)
    }

    pub fn ref_ids(&self) -> impl Iterator<Item = &RefId> {
        self.ref_index.keys()
    }

    /// (images, objects, references)
    pub fn counts(&self) -> (usize, usize, usize) {
        let objects = self.images.iter().map(|i| i.objects.len()).sum();
        (self.images.len(), objects, self.ref_index.len())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub candidate_id: CandidateId,
    pub class: String,
    pub mask: RleMask,
}

/// Candidate masks for one image. Candidate ids are image-scoped, so
/// references of different objects can point at the same candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub image_id: ImageId,
    pub candidates: Vec<Candidate>,
    #[serde(default)]
    pub per_reference: BTreeMap<RefId, Vec<CandidateId>>,
}

impl CandidateSet {
    pub fn get(&self, candidate_id: &str) -> Option<&Candidate> {
        self.candidates.iter().find(|c| c.candidate_id == candidate_id)
    }

    pub fn mask(&self, candidate_id: &str) -> Result<&RleMask> {
        self.get(candidate_id)
            .map(|c| &c.mask)
            .ok_or_else(|| {
                Error::UnknownId(format!(
                    "candidate {candidate_id:?} in image {:?}",
                    self.image_id
                ))
            })
    }

    pub fn candidate_ids(&self) -> BTreeSet<&CandidateId> {
        self.candidates.iter().map(|c| &c.candidate_id).collect()
    }
}

pub type CandidateIndex = BTreeMap<ImageId, CandidateSet>;

pub fn load_candidates(path: &Path) -> Result<CandidateIndex> {
    let mut index = CandidateIndex::new();
    for l in jsonl::read_path::<CandidateSet>(path, jsonl::CANDIDATES)? {
        let id = l.record.image_id.clone();
        if index.insert(id.clone(), l.record).is_some() {
            return Err(Error::Validation {
                path: path.display().to_string(),
                line: l.line,
                message: format!("duplicate candidate record for image {id:?}"),
            });
        }
    }
    Ok(index)
}

pub fn write_candidates<W: Write>(out: W, index: &CandidateIndex) -> Result<()> {
    jsonl::write(out, jsonl::CANDIDATES, index.values())
}

/// Consistency problem between a dataset and its candidate sets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Finding {
    NoCandidates {
        image_id: ImageId,
        ref_id: RefId,
    },
    DanglingCandidate {
        image_id: ImageId,
        ref_id: RefId,
        candidate_id: CandidateId,
    },
    DuplicateCandidate {
        image_id: ImageId,
        candidate_id: CandidateId,
    },
    Geometry {
        image_id: ImageId,
        candidate_id: CandidateId,
        expected: (usize, usize),
        found: (usize, usize),
    },
    UnknownImage {
        image_id: ImageId,
    },
    UnknownReference {
        image_id: ImageId,
        ref_id: RefId,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub findings: Vec<Finding>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.findings.is_empty()
    }
}

/// Cross-checks candidate sets against the dataset. Never fails; problems are
/// collected as findings.
pub fn validate_candidates(ds: &ReferringDataset, index: &CandidateIndex) -> ValidationReport {
    let mut findings = Vec::new();
    for image_id in index.keys() {
        if ds.image(image_id).is_none() {
            findings.push(Finding::UnknownImage {
                image_id: image_id.clone(),
            });
        }
    }
    for image in ds.images() {
        let set = index.get(&image.image_id);
        if let Some(set) = set {
            let mut seen = BTreeSet::new();
            let expected = image
                .shape()
                .or_else(|| set.candidates.first().map(|c| c.mask.shape()));
            for c in &set.candidates {
                if !seen.insert(&c.candidate_id) {
                    findings.push(Finding::DuplicateCandidate {
                        image_id: image.image_id.clone(),
                        candidate_id: c.candidate_id.clone(),
                    });
                }
                if let Some(expected) = expected {
                    if c.mask.shape() != expected {
                        findings.push(Finding::Geometry {
                            image_id: image.image_id.clone(),
                            candidate_id: c.candidate_id.clone(),
                            expected,
                            found: c.mask.shape(),
                        });
                    }
                }
            }
            let refs: BTreeSet<&RefId> = image.ref_ids().collect();
            for ref_id in set.per_reference.keys() {
                if !refs.contains(ref_id) {
                    findings.push(Finding::UnknownReference {
                        image_id: image.image_id.clone(),
                        ref_id: ref_id.clone(),
                    });
                }
            }
        }
        for ref_id in image.ref_ids() {
            let listed = set.and_then(|s| s.per_reference.get(ref_id));
            match listed {
                None => findings.push(Finding::NoCandidates {
                    image_id: image.image_id.clone(),
                    ref_id: ref_id.clone(),
                }),
                Some(ids) if ids.is_empty() => findings.push(Finding::NoCandidates {
                    image_id: image.image_id.clone(),
                    ref_id: ref_id.clone(),
                }),
                Some(ids) => {
                    let set = set.expect("listed implies set");
                    for id in ids {
                        if set.get(id).is_none() {
                            findings.push(Finding::DanglingCandidate {
                                image_id: image.image_id.clone(),
                                ref_id: ref_id.clone(),
                                candidate_id: id.clone(),
                            });
                        }
                    }
                }
            }
        }
    }
    ValidationReport { findings }
}

/// Histogram of object instances per image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectStats {
    pub images: usize,
    pub histogram: BTreeMap<usize, usize>,
    pub mean: f64,
}

impl ObjectStats {
    pub fn mean_rounded(&self) -> f64 {
        crate::round2(self.mean)
    }
}

pub fn objects_per_image_stats(ds: &ReferringDataset) -> Result<ObjectStats> {
    if ds.images().is_empty() {
        return Err(Error::EmptyInput("dataset has no images".into()));
    }
    let mut histogram = BTreeMap::new();
    let mut total = 0usize;
    for image in ds.images() {
        *histogram.entry(image.objects.len()).or_insert(0) += 1;
        total += image.objects.len();
    }
    Ok(ObjectStats {
        images: ds.images().len(),
        histogram,
        mean: total as f64 / ds.images().len() as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(id: &str, objects: &[(&str, &[&str])]) -> ImageRecord {
        ImageRecord {
            image_id: id.into(),
            file: None,
            height: Some(2),
            width: Some(2),
            objects: objects
                .iter()
                .map(|(o, refs)| ObjectRecord {
                    object_id: o.to_string(),
                    references: refs
                        .iter()
                        .map(|r| Reference {
                            ref_id: r.to_string(),
                            text: format!("the {r}"),
                            phrase: None,
                        })
                        .collect(),
                })
                .collect(),
        }
    }

    fn candidate(id: &str, h: usize, w: usize) -> Candidate {
        Candidate {
            candidate_id: id.into(),
            class: "dog".into(),
            mask: RleMask::empty(h, w).unwrap(),
        }
    }

    #[test]
    fn duplicate_ref_named() {
        let err = ReferringDataset::new(vec![
            image("i1", &[("o1", &["r1"])]),
            image("i2", &[("o1", &["r1"])]),
        ])
        .unwrap_err();
        assert!(err.to_string().contains("duplicate ref_id \"r1\""), "{err}");
    }

    #[test]
    fn object_without_refs_rejected() {
        let err = ReferringDataset::new(vec![image("i1", &[("o1", &[])])]).unwrap_err();
        assert!(err.to_string().contains("no references"));
    }

    #[test]
    fn stats() {
        let ds = ReferringDataset::new(vec![image("i", &[("o", &["r"])])]).unwrap();
        let s = objects_per_image_stats(&ds).unwrap();
        assert_eq!(s.histogram, BTreeMap::from([(1, 1)]));
        assert_eq!(s.mean_rounded(), 1.0);

        let ds = ReferringDataset::new(vec![
            image("a", &[("1", &["a1"]), ("2", &["a2"])]),
            image("b", &[("1", &["b1"]), ("2", &["b2"]), ("3", &["b3"])]),
            image(
                "c",
                &[("1", &["c1"]), ("2", &["c2"]), ("3", &["c3"]), ("4", &["c4"]), ("5", &["c5"])],
            ),
        ])
        .unwrap();
        let s = objects_per_image_stats(&ds).unwrap();
        assert_eq!(s.histogram, BTreeMap::from([(2, 1), (3, 1), (5, 1)]));
        assert_eq!(s.mean_rounded(), 3.33);

        let empty = ReferringDataset::new(vec![]).unwrap();
        assert!(matches!(objects_per_image_stats(&empty), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn candidate_findings() {
        let ds = ReferringDataset::new(vec![image("i", &[("o1", &["r1"]), ("o2", &["r2"])])])
            .unwrap();
        let mut set = CandidateSet {
            image_id: "i".into(),
            candidates: vec![candidate("a", 2, 2), candidate("b", 2, 2)],
            per_reference: BTreeMap::from([
                ("r1".to_string(), vec!["a".to_string(), "b".to_string()]),
                ("r2".to_string(), vec!["a".to_string(), "b".to_string()]),
            ]),
        };
        let index = CandidateIndex::from([("i".to_string(), set.clone())]);
        assert!(validate_candidates(&ds, &index).is_clean());

        set.per_reference
            .get_mut("r2")
            .unwrap()
            .push("zz".to_string());
        let index = CandidateIndex::from([("i".to_string(), set.clone())]);
        assert_eq!(
            validate_candidates(&ds, &index).findings,
            vec![Finding::DanglingCandidate {
                image_id: "i".into(),
                ref_id: "r2".into(),
                candidate_id: "zz".into()
            }]
        );

        set.per_reference.get_mut("r2").unwrap().pop();
        set.candidates[1] = candidate("b", 3, 2);
        let index = CandidateIndex::from([("i".to_string(), set.clone())]);
        let report = validate_candidates(&ds, &index);
        assert_eq!(report.findings.len(), 1);
        assert!(matches!(report.findings[0], Finding::Geometry { .. }));

        set.candidates[1] = candidate("b", 2, 2);
        set.per_reference.remove("r1");
        let index = CandidateIndex::from([("i".to_string(), set)]);
        assert_eq!(
            validate_candidates(&ds, &index).findings,
            vec![Finding::NoCandidates {
                image_id: "i".into(),
                ref_id: "r1".into()
            }]
        );
    }
}

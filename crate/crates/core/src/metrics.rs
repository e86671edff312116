//! Set IoU distributions and the semantic-variance score between two representations.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::activation::ActivationSet;
use crate::error::{Error, Result};
use crate::labels::LabelSet;
use crate::probe::ConceptEmbedding;
use crate::tensor::VOID_LABEL;

/// Default weight on emergent/vanished concepts.
pub const DEFAULT_LAMBDA: f64 = 2.0;

/// Running intersection/union totals for one concept.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct IouCounts {
    pub intersection: u64,
    pub union: u64,
    pub foreground: u64,
}

impl IouCounts {
    /// Accumulate one sample; void label pixels are skipped.
    pub fn add(&mut self, pred: &[bool], labels: &[i32], concept: i32) -> Result<()> {
        if pred.len() != labels.len() {
            return Err(Error::Shape(format!(
                "mask has {} pixels, label map has {}",
                pred.len(),
                labels.len()
            )));
        }
        for (&m, &l) in pred.iter().zip(labels) {
            if l == VOID_LABEL {
                continue;
            }
            let fg = l == concept;
            self.intersection += u64::from(m && fg);
            self.union += u64::from(m || fg);
            self.foreground += u64::from(fg);
        }
        Ok(())
    }

    pub fn iou(&self, concept: i32) -> Result<f64> {
        if self.foreground == 0 {
            return Err(Error::ConceptNotPresent(concept));
        }
        Ok(self.intersection as f64 / self.union as f64)
    }
}

/// `Σ|M ∩ L| / Σ|M ∪ L|` over samples containing `concept`.
pub fn set_iou<'a, I>(pairs: I, concept: i32) -> Result<f64>
where
    I: IntoIterator<Item = (&'a [bool], &'a [i32])>,
{
    let mut counts = IouCounts::default();
    for (pred, labels) in pairs {
        counts.add(pred, labels, concept)?;
    }
    counts.iou(concept)
}

/// Strict `> tau` binarization.
pub fn binarize(mask: &[f64], tau: f64) -> Vec<bool> {
    mask.iter().map(|&v| v > tau).collect()
}

/// Set IoU of one embedding over the samples containing its concept.
pub fn concept_iou(e: &ConceptEmbedding, acts: &ActivationSet, labels: &LabelSet, tau: f64) -> Result<f64> {
    let mut counts = IouCounts::default();
    for i in labels.samples_with(e.concept)? {
        let a = acts.get(i)?;
        let l = labels.get(i)?;
        counts.add(&binarize(&e.predict_mask(&a, labels.shape())?, tau), &l.data, e.concept)?;
    }
    counts.iou(e.concept)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IoUDistribution {
    /// Representation the probes were evaluated on (selector syntax).
    pub representation: String,
    pub concepts: Vec<i32>,
    pub iou: Vec<f64>,
    /// `N_c`: probe samples containing each concept.
    pub sample_counts: Vec<usize>,
    /// Concepts absent from the probe set (IoU reported as 0).
    pub absent: Vec<i32>,
}

impl IoUDistribution {
    pub fn mean(&self) -> f64 {
        if self.iou.is_empty() {
            0.0
        } else {
            self.iou.iter().sum::<f64>() / self.iou.len() as f64
        }
    }
}

/// Evaluate one embedding per concept on `acts` and collect the set IoUs.
pub fn iou_distribution(
    embeddings: &BTreeMap<i32, ConceptEmbedding>,
    acts: &ActivationSet,
    labels: &LabelSet,
    tau: f64,
) -> Result<IoUDistribution> {
    let concepts = labels.concepts().to_vec();
    let members: Vec<Vec<usize>> = concepts
        .iter()
        .map(|&c| labels.samples_with(c))
        .collect::<Result<_>>()?;
    for (&c, mem) in concepts.iter().zip(&members) {
        if !mem.is_empty() && !embeddings.contains_key(&c) {
            return Err(Error::MissingEmbedding {
                representation: acts.name().to_string(),
                concept: c,
            });
        }
    }
    let mut counts = vec![IouCounts::default(); concepts.len()];
    let mut sample_counts = vec![0usize; concepts.len()];
    let out_shape = labels.shape();
    for i in 0..acts.len() {
        let wanted: Vec<usize> = (0..concepts.len())
            .filter(|&j| members[j].binary_search(&i).is_ok())
            .collect();
        if wanted.is_empty() {
            continue;
        }
        let a = acts.get(i)?;
        let l = labels.get(i)?;
        for j in wanted {
            let e = &embeddings[&concepts[j]];
            let mask = binarize(&e.predict_mask(&a, out_shape)?, tau);
            counts[j].add(&mask, &l.data, concepts[j])?;
            sample_counts[j] += 1;
        }
    }
    let mut iou = Vec::with_capacity(concepts.len());
    let mut absent = Vec::new();
    for (j, &c) in concepts.iter().enumerate() {
        if members[j].is_empty() {
            absent.push(c);
            iou.push(0.0);
        } else {
            iou.push(counts[j].iou(c)?);
        }
    }
    Ok(IoUDistribution {
        representation: acts.name().to_string(),
        concepts,
        iou,
        sample_counts,
        absent,
    })
}

/// Relative change of an existing concept: `(b - a) / max(a, b)`.
pub fn svar_existing(iou2: f64, iou1: f64) -> f64 {
    (iou2 - iou1) / iou2.max(iou1)
}

/// Change of an emergent or vanished concept relative to the reference mean IoU.
pub fn svar_boundary(iou2: f64, iou1: f64, iou1_mean: f64) -> Result<f64> {
    if iou1_mean <= 0.0 {
        return Err(Error::DegenerateReference);
    }
    if iou2 == iou1 {
        return Ok(0.0);
    }
    Ok((iou2 - iou1) / iou1_mean)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    /// Present in both representations.
    Existing,
    /// Emergent, vanished, or absent from both.
    Boundary,
    /// Zero proportion in the reference set; not summed.
    Excluded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SVarTerm {
    pub concept: i32,
    pub iou_target: f64,
    pub iou_reference: f64,
    /// The indicator `I(min(IoU_2, IoU_1) > 0)`.
    pub alpha: bool,
    pub branch: Branch,
    /// The active branch value before weighting.
    pub value: f64,
    pub proportion: f64,
    pub term: f64,
}

/// Semantic variance of `target` relative to `reference`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SVarReport {
    pub target: String,
    pub reference: String,
    pub lambda: f64,
    pub reference_mean_iou: f64,
    pub terms: Vec<SVarTerm>,
    pub excluded: Vec<i32>,
    pub aggregate: f64,
}

impl SVarReport {
    /// Sum of the non-excluded terms, in concept order.
    pub fn recompute(&self) -> f64 {
        self.terms
            .iter()
            .filter(|t| t.branch != Branch::Excluded)
            .fold(0.0, |acc, t| acc + t.term)
    }
}

/// `S.Var(target; reference)` with per-concept proportions `p`.
pub fn semantic_variance(
    target: &IoUDistribution,
    reference: &IoUDistribution,
    proportions: &[f64],
    lambda: f64,
) -> Result<SVarReport> {
    if target.concepts != reference.concepts
        || target.iou.len() != target.concepts.len()
        || reference.iou.len() != reference.concepts.len()
        || proportions.len() != reference.concepts.len()
    {
        return Err(Error::ConceptListMismatch);
    }
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidConfig(format!("lambda must be positive, got {lambda}")));
    }
    let mean1 = reference.mean();
    if mean1 <= 0.0 {
        return Err(Error::DegenerateReference);
    }

    let mut terms = Vec::with_capacity(target.concepts.len());
    let mut excluded = Vec::new();
    let mut aggregate = 0.0;
    for (j, &concept) in target.concepts.iter().enumerate() {
        let (i2, i1, p) = (target.iou[j], reference.iou[j], proportions[j]);
        let alpha = i2.min(i1) > 0.0;
        let (value, weighted) = if alpha {
            let v = svar_existing(i2, i1);
            (v, v)
        } else {
            let v = svar_boundary(i2, i1, mean1)?;
            (v, lambda * v)
        };
        let (branch, term) = if p <= 0.0 {
            excluded.push(concept);
            (Branch::Excluded, 0.0)
        } else {
            let b = if alpha { Branch::Existing } else { Branch::Boundary };
            (b, weighted / p)
        };
        if branch != Branch::Excluded {
            aggregate += term;
        }
        terms.push(SVarTerm {
            concept,
            iou_target: i2,
            iou_reference: i1,
            alpha,
            branch,
            value,
            proportion: p,
            term,
        });
    }
    Ok(SVarReport {
        target: target.representation.clone(),
        reference: reference.representation.clone(),
        lambda,
        reference_mean_iou: mean1,
        terms,
        excluded,
        aggregate,
    })
}

//! Ground-truth label maps and the per-concept pixel statistics derived from them.

use std::path::PathBuf;
use std::sync::Arc;

use crate::cache::DumpCache;
use crate::error::{DumpRef, Error, Result};
use crate::manifest::ProbeManifest;
use crate::npy;
use crate::tensor::LabelMap;

pub type LabelCache = DumpCache<LabelMap>;

/// Label maps for the probe set plus foreground counts gathered in one pass.
#[derive(Debug, Clone)]
pub struct LabelSet {
    samples: Vec<String>,
    paths: Vec<PathBuf>,
    concepts: Vec<i32>,
    shape: (usize, usize),
    /// `counts[sample][concept_index]`
    counts: Vec<Vec<usize>>,
    labeled: Vec<usize>,
    cache: Arc<LabelCache>,
}

impl LabelSet {
    pub fn open(m: &ProbeManifest, cache: Arc<LabelCache>) -> Result<LabelSet> {
        let concepts = m.concept_ids();
        let shape = (m.label_shape[0], m.label_shape[1]);
        let paths: Vec<PathBuf> = m.samples.iter().map(|s| m.label_path(s)).collect();
        let mut set = LabelSet {
            samples: m.samples.clone(),
            paths,
            concepts,
            shape,
            counts: Vec::new(),
            labeled: Vec::new(),
            cache,
        };
        let base = set.concepts[0];
        for i in 0..set.samples.len() {
            let map = set.get(i)?;
            let mut counts = vec![0usize; set.concepts.len()];
            let mut labeled = 0;
            for &v in &map.data {
                if v == crate::tensor::VOID_LABEL {
                    continue;
                }
                labeled += 1;
                let idx = v - base;
                if idx >= 0 && (idx as usize) < counts.len() {
                    counts[idx as usize] += 1;
                }
            }
            set.counts.push(counts);
            set.labeled.push(labeled);
        }
        Ok(set)
    }

    pub fn get(&self, i: usize) -> Result<Arc<LabelMap>> {
        let path = &self.paths[i];
        if let Some(hit) = self.cache.get(path) {
            return Ok(hit);
        }
        if !path.is_file() {
            return Err(Error::MissingDump(vec![DumpRef {
                model: "labels".into(),
                layer: String::new(),
                sample: self.samples[i].clone(),
                path: path.clone(),
            }]));
        }
        let map = LabelMap::try_from(npy::read_tensor(path)?)?;
        if (map.height, map.width) != self.shape {
            return Err(Error::CorruptDump {
                path: path.clone(),
                reason: format!(
                    "label map is {}x{}, manifest declares {}x{}",
                    map.height, map.width, self.shape.0, self.shape.1
                ),
            });
        }
        let map = Arc::new(map);
        self.cache.insert(path, Arc::clone(&map), map.data.len() * 4);
        Ok(map)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[String] {
        &self.samples
    }

    pub fn concepts(&self) -> &[i32] {
        &self.concepts
    }

    /// `(h_s, w_s)`.
    pub fn shape(&self) -> (usize, usize) {
        self.shape
    }

    fn index_of(&self, concept: i32) -> Result<usize> {
        self.concepts
            .iter()
            .position(|&c| c == concept)
            .ok_or(Error::UnknownConcept(concept))
    }

    /// `|L_c(x)|` for sample `i`.
    pub fn count(&self, i: usize, concept: i32) -> Result<usize> {
        Ok(self.counts[i][self.index_of(concept)?])
    }

    pub fn labeled_count(&self, i: usize) -> usize {
        self.labeled[i]
    }

    /// Indices of the samples containing `concept` (the set `X_c`).
    pub fn samples_with(&self, concept: i32) -> Result<Vec<usize>> {
        let j = self.index_of(concept)?;
        Ok((0..self.len()).filter(|&i| self.counts[i][j] > 0).collect())
    }

    /// `Σ_x |L_c(x)|` over the whole probe set.
    pub fn total(&self, concept: i32) -> Result<usize> {
        let j = self.index_of(concept)?;
        Ok(self.counts.iter().map(|c| c[j]).sum())
    }
}

/// Loss weight for the positive class of `concept`:
/// one minus the mean foreground fraction over labeled pixels of the probe set.
pub fn foreground_weight(labels: &LabelSet, concept: i32) -> Result<f64> {
    let fg = labels.total(concept)?;
    if fg == 0 {
        return Err(Error::ConceptNotPresent(concept));
    }
    let labeled: usize = (0..labels.len()).map(|i| labels.labeled_count(i)).sum();
    Ok(1.0 - fg as f64 / labeled as f64)
}

/// Per-concept share of all label pixels over the full reference set,
/// `Σ_x |L_j(x)| / (|X_R| · S)`, in manifest concept order.
pub fn concept_proportions(labels: &LabelSet) -> Vec<f64> {
    let denom = (labels.len() * labels.shape.0 * labels.shape.1) as f64;
    labels
        .concepts
        .iter()
        .map(|&c| labels.total(c).unwrap_or(0) as f64 / denom)
        .collect()
}

//! The probe-dataset manifest: models, layers, samples and concepts, plus the
//! on-disk layout of every dump they imply.
//!
//! ```text
//! <dump_root>/<model>/<layer>/<sample>.npy              float32 (K, h, w)
//! <dump_root>/labels/<sample>.npy                       int32 (h_s, w_s)
//! <dump_root>/gradients/<model>/<layer>/<concept>/<sample>.npy
//! <dump_root>/embeddings/<model>/<layer>/<concept>.{json,npy}
//! ```

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{DumpRef, Error, Result};
use crate::npy;
use crate::tensor::DType;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Separate,
    Joint,
    Fusion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelEntry {
    pub id: String,
    pub modality: String,
    pub regime: Regime,
    /// Layers dumped for this model. `None` means every declared layer.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layers: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerEntry {
    pub id: String,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConceptEntry {
    pub id: i32,
    pub name: String,
}

/// A layer whose Grad-CAM gradients were dumped, and how the concept score
/// was defined when they were produced.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CamTarget {
    pub model: String,
    pub layer: String,
    #[serde(default = "default_score")]
    pub score: String,
}

fn default_score() -> String {
    "pre_softmax".to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeManifest {
    pub format_version: u32,
    pub dump_root: String,
    pub models: Vec<ModelEntry>,
    pub layers: Vec<LayerEntry>,
    pub samples: Vec<String>,
    pub concepts: Vec<ConceptEntry>,
    pub label_shape: [usize; 2],
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub cam_targets: Vec<CamTarget>,
    /// Directory the manifest was loaded from; relative `dump_root`s resolve against it.
    #[serde(skip)]
    pub base_dir: PathBuf,
    /// SHA-256 of the manifest bytes as loaded.
    #[serde(skip)]
    pub source_hash: String,
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Load and validate a manifest. With `validate`, every declared
/// (model, layer, sample) dump and every label file is checked on disk.
pub fn load_manifest(path: impl AsRef<Path>, validate: bool) -> Result<ProbeManifest> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut m: ProbeManifest = serde_json::from_slice(&bytes)
        .map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
    m.base_dir = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    m.source_hash = hex(&Sha256::digest(&bytes));
    m.check_schema()?;
    if validate {
        m.check_dumps()?;
    }
    Ok(m)
}

fn safe_component(s: &str) -> bool {
    !s.is_empty() && s != "." && s != ".." && !s.contains(['/', '\\', '\0'])
}

impl ProbeManifest {
    /// Write the manifest as pretty JSON and remember `path`'s directory as base.
    pub fn save(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        text.push('\n');
        npy::write_atomic(path, text.as_bytes())?;
        self.base_dir = path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        self.source_hash = hex(&Sha256::digest(text.as_bytes()));
        Ok(())
    }

    pub fn check_schema(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Manifest(msg));
        if self.format_version != FORMAT_VERSION {
            return bad(format!(
                "unsupported format_version {} (expected {FORMAT_VERSION})",
                self.format_version
            ));
        }
        if self.models.is_empty() || self.layers.is_empty() {
            return bad("at least one model and one layer are required".into());
        }
        if self.samples.is_empty() {
            return bad("sample list is empty".into());
        }
        if self.concepts.is_empty() {
            return bad("concept list is empty".into());
        }
        if self.label_shape[0] == 0 || self.label_shape[1] == 0 {
            return bad(format!("label_shape {:?} must be positive", self.label_shape));
        }

        let mut seen = HashSet::new();
        for s in &self.samples {
            if !safe_component(s) {
                return bad(format!("sample id '{s}' is not a valid file name"));
            }
            if !seen.insert(s.as_str()) {
                return bad(format!("duplicate sample id '{s}'"));
            }
        }

        let mut layer_ids = HashSet::new();
        for l in &self.layers {
            if !safe_component(&l.id) || l.id == "labels" {
                return bad(format!("layer id '{}' is not usable", l.id));
            }
            if !layer_ids.insert(l.id.as_str()) {
                return bad(format!("duplicate layer id '{}'", l.id));
            }
            if l.channels == 0 || l.height == 0 || l.width == 0 {
                return bad(format!("layer '{}' has an empty dimension", l.id));
            }
        }

        let reserved = ["labels", "gradients", "embeddings", "cat"];
        let mut model_ids = HashSet::new();
        for m in &self.models {
            if !safe_component(&m.id) || reserved.contains(&m.id.as_str()) || m.id.contains([':', '(', ')', ','])
            {
                return bad(format!("model id '{}' is not usable", m.id));
            }
            if !model_ids.insert(m.id.as_str()) {
                return bad(format!("duplicate model id '{}'", m.id));
            }
            if let Some(layers) = &m.layers {
                for l in layers {
                    if !layer_ids.contains(l.as_str()) {
                        return bad(format!("model '{}' lists undeclared layer '{l}'", m.id));
                    }
                }
            }
        }

        let mut ids: Vec<i32> = self.concepts.iter().map(|c| c.id).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return bad("duplicate concept id".into());
        }
        let base = ids[0];
        if base != 0 && base != 1 {
            return bad(format!("concept ids must start at 0 or 1, found {base}"));
        }
        if ids.iter().enumerate().any(|(i, &id)| id != base + i as i32) {
            return bad("concept ids are not contiguous".into());
        }

        for t in &self.cam_targets {
            if !self.has_layer(&t.model, &t.layer) {
                return bad(format!(
                    "cam target ({}, {}) is not a declared model layer",
                    t.model, t.layer
                ));
            }
        }
        Ok(())
    }

    /// Check every activation and label dump exists with the declared shape.
    pub fn check_dumps(&self) -> Result<()> {
        let mut missing = Vec::new();
        let mut wrong = Vec::new();
        let mut check = |r: DumpRef, shape: Vec<usize>, dtype: DType| {
            if !r.path.is_file() {
                missing.push(r);
                return;
            }
            match npy::read_header(&r.path) {
                Ok((d, s)) if d == dtype && s == shape => {}
                Ok((d, s)) => wrong.push(format!(
                    "{r}: found {d:?} {s:?}, expected {dtype:?} {shape:?}"
                )),
                Err(e) => wrong.push(format!("{r}: {e}")),
            }
        };
        for m in &self.models {
            for layer in self.model_layers(m) {
                for s in &self.samples {
                    check(
                        DumpRef {
                            model: m.id.clone(),
                            layer: layer.id.clone(),
                            sample: s.clone(),
                            path: self.activation_path(&m.id, &layer.id, s),
                        },
                        vec![layer.channels, layer.height, layer.width],
                        DType::F32,
                    );
                }
            }
        }
        for s in &self.samples {
            check(
                DumpRef {
                    model: "labels".into(),
                    layer: String::new(),
                    sample: s.clone(),
                    path: self.label_path(s),
                },
                self.label_shape.to_vec(),
                DType::I32,
            );
        }
        if !missing.is_empty() {
            return Err(Error::MissingDump(missing));
        }
        if !wrong.is_empty() {
            return Err(Error::CorruptDump {
                path: self.dump_dir(),
                reason: wrong.join("; "),
            });
        }
        Ok(())
    }

    pub fn dump_dir(&self) -> PathBuf {
        self.base_dir.join(&self.dump_root)
    }

    pub fn activation_path(&self, model: &str, layer: &str, sample: &str) -> PathBuf {
        self.dump_dir()
            .join(model)
            .join(layer)
            .join(format!("{sample}.npy"))
    }

    pub fn label_path(&self, sample: &str) -> PathBuf {
        self.dump_dir().join("labels").join(format!("{sample}.npy"))
    }

    pub fn gradient_path(&self, model: &str, layer: &str, concept: i32, sample: &str) -> PathBuf {
        self.dump_dir()
            .join("gradients")
            .join(model)
            .join(layer)
            .join(concept.to_string())
            .join(format!("{sample}.npy"))
    }

    pub fn embedding_dir(&self, model_key: &str, layer_key: &str) -> PathBuf {
        self.dump_dir()
            .join("embeddings")
            .join(model_key)
            .join(layer_key)
    }

    pub fn model(&self, id: &str) -> Option<&ModelEntry> {
        self.models.iter().find(|m| m.id == id)
    }

    pub fn layer(&self, id: &str) -> Option<&LayerEntry> {
        self.layers.iter().find(|l| l.id == id)
    }

    /// Layers dumped for `m`, in manifest order.
    pub fn model_layers<'a>(&'a self, m: &'a ModelEntry) -> impl Iterator<Item = &'a LayerEntry> + 'a {
        self.layers.iter().filter(move |l| match &m.layers {
            Some(ids) => ids.iter().any(|id| id == &l.id),
            None => true,
        })
    }

    pub fn has_layer(&self, model: &str, layer: &str) -> bool {
        self.model(model)
            .is_some_and(|m| self.model_layers(m).any(|l| l.id == layer))
    }

    pub fn concept_ids(&self) -> Vec<i32> {
        self.concepts.iter().map(|c| c.id).collect()
    }

    pub fn concept_name(&self, id: i32) -> Option<&str> {
        self.concepts
            .iter()
            .find(|c| c.id == id)
            .map(|c| c.name.as_str())
    }

    pub fn num_concepts(&self) -> usize {
        self.concepts.len()
    }

    /// `S = h_s * w_s`.
    pub fn label_pixels(&self) -> usize {
        self.label_shape[0] * self.label_shape[1]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    pub(crate) fn tiny_manifest(concepts: usize) -> ProbeManifest {
        ProbeManifest {
            format_version: 1,
            dump_root: "dumps".into(),
            models: vec![
                ModelEntry {
                    id: "rgb_sep".into(),
                    modality: "rgb".into(),
                    regime: Regime::Separate,
                    layers: None,
                },
                ModelEntry {
                    id: "depth_sep".into(),
                    modality: "depth".into(),
                    regime: Regime::Separate,
                    layers: None,
                },
            ],
            layers: (1..=4)
                .map(|i| LayerEntry {
                    id: format!("layer{i}"),
                    channels: 2,
                    height: 2,
                    width: 2,
                })
                .collect(),
            samples: vec!["a".into(), "b".into(), "c".into()],
            concepts: (0..concepts as i32)
                .map(|i| ConceptEntry {
                    id: i,
                    name: format!("c{i}"),
                })
                .collect(),
            label_shape: [4, 4],
            cam_targets: vec![],
            base_dir: PathBuf::new(),
            source_hash: String::new(),
        }
    }

    fn write_dumps(m: &ProbeManifest) {
        for model in &m.models {
            for l in m.model_layers(model) {
                for s in &m.samples {
                    let t = Tensor::from_f32(
                        vec![l.channels, l.height, l.width],
                        vec![0.5; l.channels * l.height * l.width],
                    )
                    .unwrap();
                    npy::write_tensor(m.activation_path(&model.id, &l.id, s), &t).unwrap();
                }
            }
        }
        for s in &m.samples {
            let t = Tensor::from_i32(vec![4, 4], vec![0; 16]).unwrap();
            npy::write_tensor(m.label_path(s), &t).unwrap();
        }
    }

    #[test]
    fn loads_thirty_seven_concepts() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = tiny_manifest(37);
        m.save(dir.path().join("manifest.json")).unwrap();
        let back = load_manifest(dir.path().join("manifest.json"), false).unwrap();
        assert_eq!(back.num_concepts(), 37);
        assert_eq!(back.models.len(), 2);
        assert_eq!(back.layers.len(), 4);
        assert_eq!(back.samples.len(), 3);
        assert_eq!(back.source_hash.len(), 64);
    }

    #[test]
    fn duplicate_sample_rejected() {
        let mut m = tiny_manifest(2);
        m.samples.push("a".into());
        assert!(matches!(m.check_schema(), Err(Error::Manifest(msg)) if msg.contains("duplicate sample")));
    }

    #[test]
    fn concept_ids_must_be_contiguous_from_zero_or_one() {
        let mut m = tiny_manifest(3);
        m.concepts[2].id = 5;
        assert!(m.check_schema().is_err());
        let mut m = tiny_manifest(3);
        for c in &mut m.concepts {
            c.id += 1;
        }
        assert!(m.check_schema().is_ok());
        for c in &mut m.concepts {
            c.id += 1;
        }
        assert!(m.check_schema().is_err());
    }

    #[test]
    fn unknown_top_level_key_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = tiny_manifest(2);
        m.save(dir.path().join("m.json")).unwrap();
        let text = fs::read_to_string(dir.path().join("m.json")).unwrap();
        let text = text.replacen('{', "{\n  \"extra\": 1,", 1);
        fs::write(dir.path().join("m.json"), text).unwrap();
        assert!(matches!(
            load_manifest(dir.path().join("m.json"), false),
            Err(Error::Manifest(_))
        ));
    }

    #[test]
    fn validation_names_deleted_triple() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = tiny_manifest(2);
        m.save(dir.path().join("manifest.json")).unwrap();
        write_dumps(&m);
        assert!(load_manifest(dir.path().join("manifest.json"), true).is_ok());

        fs::remove_file(m.activation_path("depth_sep", "layer3", "b")).unwrap();
        match load_manifest(dir.path().join("manifest.json"), true) {
            Err(Error::MissingDump(refs)) => {
                assert_eq!(refs.len(), 1);
                assert_eq!(
                    (refs[0].model.as_str(), refs[0].layer.as_str(), refs[0].sample.as_str()),
                    ("depth_sep", "layer3", "b")
                );
            }
            other => panic!("expected MissingDump, got {other:?}"),
        }
    }

    #[test]
    fn validation_rejects_wrong_shape() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = tiny_manifest(2);
        m.save(dir.path().join("manifest.json")).unwrap();
        write_dumps(&m);
        let t = Tensor::from_f32(vec![3, 2, 2], vec![0.0; 12]).unwrap();
        npy::write_tensor(m.activation_path("rgb_sep", "layer1", "a"), &t).unwrap();
        assert!(matches!(
            load_manifest(dir.path().join("manifest.json"), true),
            Err(Error::CorruptDump { .. })
        ));
    }

    #[test]
    fn model_layer_subsets() {
        let mut m = tiny_manifest(2);
        m.models[1].layers = Some(vec!["layer4".into()]);
        assert!(m.check_schema().is_ok());
        assert!(m.has_layer("depth_sep", "layer4"));
        assert!(!m.has_layer("depth_sep", "layer1"));
        m.models[1].layers = Some(vec!["nope".into()]);
        assert!(m.check_schema().is_err());
    }
}

//! The comparison protocol: representation selectors, pair specifications and
//! the report assembled from running them.

mod report;

pub use report::{emit_report, render_svg_bars, render_svg_matrix, render_table, ReportFormat};

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::activation::{open_activation_set, ActivationSet, FeatureCache};
use crate::error::{Error, Result};
use crate::labels::{concept_proportions, LabelCache, LabelSet};
use crate::manifest::ProbeManifest;
use crate::metrics::{iou_distribution, semantic_variance, IoUDistribution, SVarReport, DEFAULT_LAMBDA};
use crate::probe::{load_embedding, save_embedding, train_concept_embedding, ConceptEmbedding, ProbeTrainConfig};
use crate::similarity::{cka_cross_level, cka_cross_modal, CkaMatrix, LayerCka, Pooling};

/// A representation: `<model>:<layer>` or `cat(<selector>,<selector>)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Selector {
    Layer { model: String, layer: String },
    Cat(Box<Selector>, Box<Selector>),
}

impl fmt::Display for Selector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Selector::Layer { model, layer } => write!(f, "{model}:{layer}"),
            Selector::Cat(a, b) => write!(f, "cat({a},{b})"),
        }
    }
}

impl FromStr for Selector {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let err = |reason: &str| Error::Selector {
            selector: s.to_string(),
            reason: reason.to_string(),
        };
        let t = s.trim();
        if let Some(inner) = t.strip_prefix("cat(").and_then(|r| r.strip_suffix(')')) {
            // split at the top-level comma
            let mut depth = 0usize;
            let mut split = None;
            for (i, ch) in inner.char_indices() {
                match ch {
                    '(' => depth += 1,
                    ')' => depth = depth.checked_sub(1).ok_or_else(|| err("unbalanced parentheses"))?,
                    ',' if depth == 0 => {
                        if split.is_some() {
                            return Err(err("cat takes exactly two selectors"));
                        }
                        split = Some(i);
                    }
                    _ => {}
                }
            }
            if depth != 0 {
                return Err(err("unbalanced parentheses"));
            }
            let i = split.ok_or_else(|| err("cat takes exactly two selectors"))?;
            let a: Selector = inner[..i].parse().map_err(|_| err("bad first operand"))?;
            let b: Selector = inner[i + 1..].parse().map_err(|_| err("bad second operand"))?;
            return Ok(Selector::Cat(Box::new(a), Box::new(b)));
        }
        let (model, layer) = t.split_once(':').ok_or_else(|| err("expected <model>:<layer>"))?;
        let ok = |p: &str| !p.is_empty() && !p.contains([':', '(', ')', ',', '/', '\\']);
        if !ok(model) || !ok(layer) {
            return Err(err("expected <model>:<layer>"));
        }
        Ok(Selector::Layer {
            model: model.to_string(),
            layer: layer.to_string(),
        })
    }
}

impl Selector {
    /// Check the selector names declared (model, layer) pairs.
    pub fn check(&self, m: &ProbeManifest) -> Result<()> {
        match self {
            Selector::Layer { model, layer } => {
                if m.model(model).is_none() {
                    return Err(Error::Selector {
                        selector: self.to_string(),
                        reason: format!("unknown model '{model}'"),
                    });
                }
                if !m.has_layer(model, layer) {
                    return Err(Error::Selector {
                        selector: self.to_string(),
                        reason: format!("model '{model}' has no layer '{layer}'"),
                    });
                }
                Ok(())
            }
            Selector::Cat(a, b) => {
                a.check(m)?;
                b.check(m)
            }
        }
    }

    pub fn resolve(&self, m: &ProbeManifest, cache: Arc<FeatureCache>) -> Result<ActivationSet> {
        match self {
            Selector::Layer { model, layer } => open_activation_set(m, model, layer, cache),
            Selector::Cat(a, b) => concat_features(a.resolve(m, cache.clone())?, b.resolve(m, cache)?),
        }
    }
}

/// Channel-wise concatenation: `a`'s channels, then `b`'s.
pub fn concat_features(a: ActivationSet, b: ActivationSet) -> Result<ActivationSet> {
    ActivationSet::concat(a, b)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairKind {
    Svar,
    CkaPerLayer,
    CkaCrossLevel,
    IouBars,
}

/// One comparison. For `svar` and `iou_bars`, `target` and `reference` are
/// selectors; for `cka_per_layer` they are model ids compared over `layers`;
/// `cka_cross_level` uses only `target` (a model) and `layers`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairSpec {
    pub name: String,
    pub kind: PairKind,
    pub target: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub layers: Vec<String>,
    /// Table group the row belongs to.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_label: Option<String>,
}

impl PairSpec {
    pub fn target_label(&self) -> &str {
        self.target_label.as_deref().unwrap_or(&self.target)
    }

    pub fn reference_label(&self) -> &str {
        self.reference_label
            .as_deref()
            .or(self.reference.as_deref())
            .unwrap_or("")
    }

    fn reference_or_err(&self) -> Result<&str> {
        self.reference.as_deref().ok_or_else(|| {
            Error::InvalidConfig(format!("pair '{}' needs a reference", self.name))
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ComparisonSpec {
    pub lambda: f64,
    pub pooling: Pooling,
    pub tau: f64,
    /// Used when embeddings are trained on demand.
    pub train: ProbeTrainConfig,
    pub pairs: Vec<PairSpec>,
}

impl Default for ComparisonSpec {
    fn default() -> Self {
        ComparisonSpec {
            lambda: DEFAULT_LAMBDA,
            pooling: Pooling::SpatialMean,
            tau: 0.5,
            train: ProbeTrainConfig::default(),
            pairs: Vec::new(),
        }
    }
}

impl ComparisonSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidConfig(format!("lambda must be positive, got {}", self.lambda)));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::InvalidConfig(format!("tau must lie in (0, 1), got {}", self.tau)));
        }
        self.train.validate()?;
        let mut names = BTreeSet::new();
        for p in &self.pairs {
            if !names.insert(p.name.as_str()) {
                return Err(Error::InvalidConfig(format!("duplicate pair name '{}'", p.name)));
            }
            match p.kind {
                PairKind::Svar | PairKind::IouBars => {
                    p.reference_or_err()?;
                }
                PairKind::CkaPerLayer => {
                    p.reference_or_err()?;
                    if p.layers.is_empty() {
                        return Err(Error::InvalidConfig(format!("pair '{}' lists no layers", p.name)));
                    }
                }
                PairKind::CkaCrossLevel => {
                    if p.layers.is_empty() {
                        return Err(Error::InvalidConfig(format!("pair '{}' lists no layers", p.name)));
                    }
                }
            }
        }
        Ok(())
    }

    /// Parse and check every selector against the manifest.
    pub fn check_selectors(&self, m: &ProbeManifest) -> Result<()> {
        for p in &self.pairs {
            match p.kind {
                PairKind::Svar | PairKind::IouBars => {
                    p.target.parse::<Selector>()?.check(m)?;
                    p.reference_or_err()?.parse::<Selector>()?.check(m)?;
                }
                PairKind::CkaPerLayer | PairKind::CkaCrossLevel => {
                    let mut models = vec![p.target.as_str()];
                    if p.kind == PairKind::CkaPerLayer {
                        models.push(p.reference_or_err()?);
                    }
                    for model in models {
                        for layer in &p.layers {
                            Selector::Layer {
                                model: model.to_string(),
                                layer: layer.clone(),
                            }
                            .check(m)?;
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Change {
    Increase,
    Decrease,
    Emergent,
    Vanished,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BarEntry {
    pub concept: i32,
    pub baseline: f64,
    pub target: f64,
    pub change: Option<Change>,
}

/// Per-concept IoUs of a target against a baseline distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IouBars {
    pub baseline: IoUDistribution,
    pub target: IoUDistribution,
    pub bars: Vec<BarEntry>,
}

pub fn classify_change(baseline: f64, target: f64) -> Option<Change> {
    if baseline == target {
        None
    } else if baseline == 0.0 {
        Some(Change::Emergent)
    } else if target == 0.0 {
        Some(Change::Vanished)
    } else if target > baseline {
        Some(Change::Increase)
    } else {
        Some(Change::Decrease)
    }
}

pub fn iou_bars(baseline: &IoUDistribution, target: &IoUDistribution) -> Result<IouBars> {
    if baseline.concepts != target.concepts {
        return Err(Error::ConceptListMismatch);
    }
    let bars = baseline
        .concepts
        .iter()
        .zip(baseline.iou.iter().zip(&target.iou))
        .map(|(&concept, (&b, &t))| BarEntry {
            concept,
            baseline: b,
            target: t,
            change: classify_change(b, t),
        })
        .collect();
    Ok(IouBars {
        baseline: baseline.clone(),
        target: target.clone(),
        bars,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum PairResult {
    Svar(SVarReport),
    CkaPerLayer { layers: Vec<LayerCka> },
    CkaCrossLevel(CkaMatrix),
    IouBars(IouBars),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairStatus {
    Ok,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairOutcome {
    pub spec: PairSpec,
    pub status: PairStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<PairResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub toolkit: String,
    pub toolkit_version: String,
    pub manifest_sha256: String,
    pub spec: ComparisonSpec,
    pub auto_train: bool,
    pub concepts: Vec<i32>,
    pub concept_proportions: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timestamps {
    pub started: String,
    pub finished: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub provenance: Provenance,
    pub pairs: Vec<PairOutcome>,
    /// Kept last and apart from everything else so runs can be compared
    /// byte for byte up to this field.
    pub timestamps: Timestamps,
}

impl AnalysisReport {
    pub fn pair(&self, name: &str) -> Option<&PairOutcome> {
        self.pairs.iter().find(|p| p.spec.name == name)
    }

    /// The S.Var aggregate of a pair, if it ran.
    pub fn svar(&self, name: &str) -> Option<f64> {
        match self.pair(name)?.result.as_ref()? {
            PairResult::Svar(r) => Some(r.aggregate),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ProtocolOptions {
    /// Train and persist embeddings that are missing on disk.
    pub auto_train: bool,
    pub features: Arc<FeatureCache>,
    pub labels: Arc<LabelCache>,
}

impl Default for ProtocolOptions {
    fn default() -> Self {
        ProtocolOptions {
            auto_train: false,
            features: Arc::new(FeatureCache::from_env()),
            labels: Arc::new(LabelCache::from_env()),
        }
    }
}

/// Load the embedding of every concept present in the probe set, training
/// (and saving) the missing ones when `train` is given.
pub fn load_embeddings(
    m: &ProbeManifest,
    acts: &ActivationSet,
    labels: &LabelSet,
    train: Option<&ProbeTrainConfig>,
) -> Result<BTreeMap<i32, ConceptEmbedding>> {
    let present: Vec<i32> = labels
        .concepts()
        .iter()
        .copied()
        .filter(|&c| labels.total(c).is_ok_and(|t| t > 0))
        .collect();
    let loaded: Vec<(i32, ConceptEmbedding)> = present
        .par_iter()
        .map(|&c| match load_embedding(m, acts.model_key(), acts.layer_key(), c) {
            Ok(e) => Ok((c, e)),
            Err(Error::MissingEmbedding { .. }) if train.is_some() => {
                let e = train_concept_embedding(acts, labels, c, train.unwrap())?;
                save_embedding(m, &e)?;
                Ok((c, e))
            }
            Err(e) => Err(e),
        })
        .collect::<Result<_>>()?;
    Ok(loaded.into_iter().collect())
}

/// IoU distribution of the probes of one representation.
pub fn representation_iou(
    m: &ProbeManifest,
    selector: &Selector,
    labels: &LabelSet,
    tau: f64,
    train: Option<&ProbeTrainConfig>,
    cache: Arc<FeatureCache>,
) -> Result<IoUDistribution> {
    let acts = selector.resolve(m, cache)?;
    let embeddings = load_embeddings(m, &acts, labels, train)?;
    let mut d = iou_distribution(&embeddings, &acts, labels, tau)?;
    d.representation = selector.to_string();
    Ok(d)
}

/// Run every pair of `spec`. Selector problems abort the run; any other
/// failure is recorded on its pair.
pub fn run_protocol(m: &ProbeManifest, spec: &ComparisonSpec, opts: &ProtocolOptions) -> Result<AnalysisReport> {
    let started = chrono::Utc::now();
    spec.validate()?;
    spec.check_selectors(m)?;
    let labels = LabelSet::open(m, opts.labels.clone())?;
    let proportions = concept_proportions(&labels);
    let train = opts.auto_train.then_some(&spec.train);

    let mut needed = BTreeSet::new();
    for p in &spec.pairs {
        if matches!(p.kind, PairKind::Svar | PairKind::IouBars) {
            needed.insert(p.target.parse::<Selector>()?);
            needed.insert(p.reference_or_err()?.parse::<Selector>()?);
        }
    }
    let needed: Vec<Selector> = needed.into_iter().collect();
    let dists: BTreeMap<Selector, std::result::Result<IoUDistribution, String>> = needed
        .par_iter()
        .map(|sel| {
            info!("evaluating probes of {sel}");
            let d = representation_iou(m, sel, &labels, spec.tau, train, opts.features.clone());
            (sel.clone(), d.map_err(|e| e.to_string()))
        })
        .collect();
    let dist = |s: &str| -> std::result::Result<&IoUDistribution, String> {
        let sel: Selector = s.parse().map_err(|e: Error| e.to_string())?;
        dists[&sel].as_ref().map_err(|e| format!("{sel}: {e}"))
    };

    let pairs: Vec<PairOutcome> = spec
        .pairs
        .par_iter()
        .map(|p| {
            let result = (|| -> std::result::Result<PairResult, String> {
                let lib = |e: Error| e.to_string();
                match p.kind {
                    PairKind::Svar => {
                        let r = semantic_variance(dist(&p.target)?, dist(p.reference_or_err().map_err(|e| e.to_string())?)?, &proportions, spec.lambda)
                            .map_err(lib)?;
                        Ok(PairResult::Svar(r))
                    }
                    PairKind::IouBars => Ok(PairResult::IouBars(
                        iou_bars(dist(p.reference_or_err().map_err(|e| e.to_string())?)?, dist(&p.target)?).map_err(lib)?,
                    )),
                    PairKind::CkaPerLayer => Ok(PairResult::CkaPerLayer {
                        layers: cka_cross_modal(
                            m,
                            &p.target,
                            p.reference_or_err().map_err(|e| e.to_string())?,
                            &p.layers,
                            spec.pooling,
                            opts.features.clone(),
                        )
                        .map_err(lib)?,
                    }),
                    PairKind::CkaCrossLevel => Ok(PairResult::CkaCrossLevel(
                        cka_cross_level(m, &p.target, &p.layers, spec.pooling, opts.features.clone()).map_err(lib)?,
                    )),
                }
            })();
            match result {
                Ok(r) => PairOutcome {
                    spec: p.clone(),
                    status: PairStatus::Ok,
                    error: None,
                    result: Some(r),
                },
                Err(e) => PairOutcome {
                    spec: p.clone(),
                    status: PairStatus::Failed,
                    error: Some(e),
                    result: None,
                },
            }
        })
        .collect();

    Ok(AnalysisReport {
        provenance: Provenance {
            toolkit: env!("CARGO_PKG_NAME").into(),
            toolkit_version: env!("CARGO_PKG_VERSION").into(),
            manifest_sha256: m.source_hash.clone(),
            spec: spec.clone(),
            auto_train: opts.auto_train,
            concepts: labels.concepts().to_vec(),
            concept_proportions: proportions,
        },
        pairs,
        timestamps: Timestamps {
            started: started.to_rfc3339(),
            finished: chrono::Utc::now().to_rfc3339(),
        },
    })
}

//! Interpretability toolkit for multi-modal fusion networks.
//!
//! Activations dumped from unimodal and fusion models are probed for
//! concepts, the resulting IoU distributions are compared with the semantic
//! variance score, layers are compared with linear CKA, and concept
//! attributions are rendered with Grad-CAM.

pub mod activation;
pub mod analysis;
pub mod cache;
pub mod cam;
mod colormap;
pub mod error;
pub mod fixtures;
pub mod labels;
pub mod manifest;
pub mod metrics;
pub mod npy;
pub mod probe;
pub mod resample;
pub mod similarity;
pub mod tensor;

pub use activation::{open_activation_set, ActivationSet, FeatureCache};
pub use analysis::{
    concat_features, emit_report, run_protocol, AnalysisReport, ComparisonSpec, PairKind, PairSpec, ProtocolOptions,
    ReportFormat, Selector,
};
pub use cache::DumpCache;
pub use cam::{cam_for_sample, grad_cam, render_heatmap, CamMap, Underlay};
pub use error::{Error, Result};
pub use fixtures::{generate_probe_dataset, SynthConfig};
pub use labels::{concept_proportions, foreground_weight, LabelCache, LabelSet};
pub use manifest::{load_manifest, ProbeManifest};
pub use metrics::{concept_iou, iou_distribution, semantic_variance, set_iou, IoUDistribution, SVarReport};
pub use probe::{
    load_embedding, save_embedding, train_concept_embedding, ConceptEmbedding, ProbeTrainConfig,
};
pub use similarity::{cka_cross_level, cka_cross_modal, linear_cka, CkaMatrix, FeatureMatrix, Pooling};
pub use tensor::{DType, FeatureMap, LabelMap, Tensor};

//! Linear concept probes over a layer's filters.
//!
//! A probe predicts the soft mask `σ(up(Σ_k w_k · A_k) + b)` where `up` is
//! bilinear resampling to the label grid, and is fitted by minimizing a
//! class-weighted per-pixel binary cross-entropy over the samples that
//! contain the concept.

use std::path::Path;

use log::{debug, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::activation::ActivationSet;
use crate::error::{Error, Result};
use crate::labels::{foreground_weight, LabelSet};
use crate::manifest::ProbeManifest;
use crate::npy;
use crate::resample::Bilinear;
use crate::tensor::{FeatureMap, Tensor, VOID_LABEL};

/// Probabilities are clamped to `[EPS, 1 - EPS]` before taking logarithms.
pub const EPS: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeTrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub bias: bool,
    /// Binarization threshold applied to predicted masks before IoU.
    pub tau: f64,
    /// When set, activations are replaced by `I(A_k > T_k)` with `T_k` the
    /// given per-channel quantile over the training samples.
    pub activation_quantile: Option<f64>,
}

impl Default for ProbeTrainConfig {
    fn default() -> Self {
        ProbeTrainConfig {
            epochs: 30,
            learning_rate: 1e-3,
            momentum: 0.9,
            weight_decay: 4e-3,
            batch_size: 16,
            seed: 0,
            bias: false,
            tau: 0.5,
            activation_quantile: None,
        }
    }
}

impl ProbeTrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.epochs < 1 {
            return bad("epochs must be at least 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight decay must be non-negative");
        }
        if self.batch_size < 1 {
            return bad("batch size must be at least 1");
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return bad("tau must lie in (0, 1)");
        }
        if let Some(q) = self.activation_quantile {
            if !(0.0..1.0).contains(&q) {
                return bad("activation quantile must lie in [0, 1)");
            }
        }
        Ok(())
    }
}

/// Real-valued probe parameters, used for training and gradient checks.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeParams {
    pub weights: Vec<f64>,
    pub bias: Option<f64>,
    pub thresholds: Option<Vec<f32>>,
}

/// A learned concept embedding for one (representation, concept).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptEmbedding {
    pub concept: i32,
    pub model: String,
    pub layer: String,
    #[serde(skip)]
    pub weights: Vec<f32>,
    pub bias: Option<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub thresholds: Option<Vec<f32>>,
    pub config: ProbeTrainConfig,
    pub alpha_loss: f64,
    pub samples_used: usize,
    pub final_loss: f64,
    pub epochs_run: usize,
    pub loss_history: Vec<f64>,
}

impl ConceptEmbedding {
    /// An untrained embedding with the given weights (no bias, no thresholds).
    pub fn from_weights(concept: i32, model: &str, layer: &str, weights: Vec<f32>) -> Self {
        ConceptEmbedding {
            concept,
            model: model.to_string(),
            layer: layer.to_string(),
            weights,
            bias: None,
            thresholds: None,
            config: ProbeTrainConfig::default(),
            alpha_loss: 0.0,
            samples_used: 0,
            final_loss: f64::NAN,
            epochs_run: 0,
            loss_history: Vec::new(),
        }
    }

    pub fn params(&self) -> ProbeParams {
        ProbeParams {
            weights: self.weights.iter().map(|&w| w as f64).collect(),
            bias: self.bias.map(|b| b as f64),
            thresholds: self.thresholds.clone(),
        }
    }

    /// Soft mask on the `out_shape` label grid.
    pub fn predict_mask(&self, a: &FeatureMap, out_shape: (usize, usize)) -> Result<Vec<f64>> {
        self.params().predict_mask(a, out_shape)
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl ProbeParams {
    pub fn zeros(k: usize, bias: bool) -> Self {
        ProbeParams {
            weights: vec![0.0; k],
            bias: bias.then_some(0.0),
            thresholds: None,
        }
    }

    /// Number of trainable scalars (`K`, plus one with a bias).
    pub fn len(&self) -> usize {
        self.weights.len() + usize::from(self.bias.is_some())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn check(&self, a: &FeatureMap) -> Result<()> {
        if self.weights.len() != a.channels {
            return Err(Error::Shape(format!(
                "probe has {} weights, activation has {} channels",
                self.weights.len(),
                a.channels
            )));
        }
        if let Some(t) = &self.thresholds {
            if t.len() != a.channels {
                return Err(Error::Shape(format!(
                    "{} thresholds for {} channels",
                    t.len(),
                    a.channels
                )));
            }
        }
        Ok(())
    }

    /// Value of input channel `k` at pixel `p` after the optional indicator.
    #[inline]
    fn input(&self, a: &FeatureMap, k: usize, p: usize) -> f64 {
        let v = a.channel(k)[p];
        match &self.thresholds {
            Some(t) => f64::from(u8::from(v > t[k])),
            None => v as f64,
        }
    }

    /// Pre-sigmoid map on the label grid.
    pub fn logits(&self, a: &FeatureMap, resample: &Bilinear) -> Result<Vec<f64>> {
        self.check(a)?;
        let n = a.plane_len();
        let mut low = vec![0.0f64; n];
        for (k, &w) in self.weights.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            for (p, z) in low.iter_mut().enumerate() {
                *z += w * self.input(a, k, p);
            }
        }
        let mut z = resample.forward(&low);
        if let Some(b) = self.bias {
            z.iter_mut().for_each(|v| *v += b);
        }
        Ok(z)
    }

    pub fn predict_mask(&self, a: &FeatureMap, out_shape: (usize, usize)) -> Result<Vec<f64>> {
        let resample = Bilinear::new((a.height, a.width), out_shape);
        Ok(self
            .logits(a, &resample)?
            .into_iter()
            .map(|z| sigmoid(z).clamp(EPS, 1.0 - EPS))
            .collect())
    }

    /// Loss and its exact gradient with respect to `(w, b)` for one sample.
    pub fn loss_gradient(
        &self,
        a: &FeatureMap,
        labels: &[i32],
        concept: i32,
        alpha: f64,
        resample: &Bilinear,
    ) -> Result<(f64, Vec<f64>)> {
        let z = self.logits(a, resample)?;
        if labels.len() != z.len() {
            return Err(Error::Shape(format!(
                "label map has {} pixels, prediction has {}",
                labels.len(),
                z.len()
            )));
        }
        let labeled = labels.iter().filter(|&&l| l != VOID_LABEL).count();
        let mut grad = vec![0.0; self.len()];
        if labeled == 0 {
            return Ok((0.0, grad));
        }
        let scale = 1.0 / labeled as f64;
        let mut loss = 0.0;
        let mut dz = vec![0.0; z.len()];
        for ((&zi, &l), d) in z.iter().zip(labels).zip(dz.iter_mut()) {
            if l == VOID_LABEL {
                continue;
            }
            let p = sigmoid(zi);
            let pc = p.clamp(EPS, 1.0 - EPS);
            let fg = l == concept;
            loss -= if fg {
                alpha * pc.ln()
            } else {
                (1.0 - alpha) * (1.0 - pc).ln()
            };
            if p == pc {
                *d = scale * if fg { -alpha * (1.0 - p) } else { (1.0 - alpha) * p };
            }
        }
        let low = resample.transpose(&dz);
        for (k, g) in grad.iter_mut().take(self.weights.len()).enumerate() {
            *g = low
                .iter()
                .enumerate()
                .map(|(p, &d)| d * self.input(a, k, p))
                .sum();
        }
        if self.bias.is_some() {
            grad[self.weights.len()] = dz.iter().sum();
        }
        Ok((loss * scale, grad))
    }
}

/// Class-weighted binary cross-entropy of a soft mask against the
/// foreground of `concept`, averaged over labeled pixels.
pub fn probe_loss(pred: &[f64], labels: &[i32], concept: i32, alpha: f64) -> Result<f64> {
    if pred.len() != labels.len() {
        return Err(Error::Shape(format!(
            "prediction has {} pixels, label map has {}",
            pred.len(),
            labels.len()
        )));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for (&p, &l) in pred.iter().zip(labels) {
        if l == VOID_LABEL {
            continue;
        }
        count += 1;
        let p = p.clamp(EPS, 1.0 - EPS);
        sum += if l == concept {
            alpha * p.ln()
        } else {
            (1.0 - alpha) * (1.0 - p).ln()
        };
    }
    Ok(if count == 0 { 0.0 } else { -sum / count as f64 })
}

fn channel_thresholds(
    acts: &ActivationSet,
    samples: &[usize],
    quantile: f64,
) -> Result<Vec<f32>> {
    const MAX_VALUES: usize = 100_000;
    let (k, h, w) = acts.shape();
    let per_sample = h * w;
    let total = per_sample * samples.len();
    let stride = total.div_ceil(MAX_VALUES).max(1);
    let mut values: Vec<Vec<f32>> = vec![Vec::new(); k];
    let mut idx = 0usize;
    for &i in samples {
        let a = acts.get(i)?;
        for p in 0..per_sample {
            if idx.is_multiple_of(stride) {
                for (c, v) in values.iter_mut().enumerate() {
                    v.push(a.channel(c)[p]);
                }
            }
            idx += 1;
        }
    }
    Ok(values
        .into_iter()
        .map(|mut v| {
            v.sort_by(f32::total_cmp);
            let pos = ((v.len() - 1) as f64 * quantile).round() as usize;
            v[pos]
        })
        .collect())
}

/// Fit the embedding of `concept` on the samples of `acts` that contain it.
pub fn train_concept_embedding(
    acts: &ActivationSet,
    labels: &LabelSet,
    concept: i32,
    cfg: &ProbeTrainConfig,
) -> Result<ConceptEmbedding> {
    cfg.validate()?;
    if acts.samples() != labels.samples() {
        return Err(Error::Shape(format!(
            "{} and the label set cover different samples",
            acts.name()
        )));
    }
    let members = labels.samples_with(concept)?;
    if members.is_empty() {
        return Err(Error::ConceptNotPresent(concept));
    }
    let alpha = foreground_weight(labels, concept)?;
    let (k, h, w) = acts.shape();
    let resample = Bilinear::new((h, w), labels.shape());

    let mut params = ProbeParams::zeros(k, cfg.bias);
    if let Some(q) = cfg.activation_quantile {
        params.thresholds = Some(channel_thresholds(acts, &members, q)?);
    }
    let dim = params.len();
    let mut velocity = vec![0.0; dim];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order = members.clone();
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut grad = vec![0.0; dim];
            for &i in batch {
                let a = acts.get(i)?;
                let l = labels.get(i)?;
                let (loss, g) = params.loss_gradient(&a, &l.data, concept, alpha, &resample)?;
                epoch_loss += loss;
                grad.iter_mut().zip(&g).for_each(|(acc, v)| *acc += v);
            }
            let inv = 1.0 / batch.len() as f64;
            for j in 0..dim {
                let mut g = grad[j] * inv;
                if j < k {
                    g += cfg.weight_decay * params.weights[j];
                }
                velocity[j] = cfg.momentum * velocity[j] + g;
            }
            for (wj, v) in params.weights.iter_mut().zip(&velocity) {
                *wj -= cfg.learning_rate * v;
            }
            if let Some(b) = params.bias.as_mut() {
                *b -= cfg.learning_rate * velocity[k];
            }
        }
        let epoch_loss = epoch_loss / members.len() as f64;
        if !epoch_loss.is_finite() || params.weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::TrainingDiverged { concept, epoch });
        }
        if let Some(&prev) = history.last() {
            if epoch_loss > prev * (1.0 + 1e-6) {
                warn!(
                    "{} concept {concept}: training loss rose from {prev:.6} to {epoch_loss:.6} at epoch {epoch}",
                    acts.name()
                );
            }
        }
        debug!("{} concept {concept} epoch {epoch}: loss {epoch_loss:.6}", acts.name());
        history.push(epoch_loss);
    }

    let weights: Vec<f32> = params.weights.iter().map(|&w| w as f32).collect();
    let bias = params.bias.map(|b| b as f32);
    let mut emb = ConceptEmbedding {
        concept,
        model: acts.model_key().to_string(),
        layer: acts.layer_key().to_string(),
        weights,
        bias,
        thresholds: params.thresholds,
        config: cfg.clone(),
        alpha_loss: alpha,
        samples_used: members.len(),
        final_loss: 0.0,
        epochs_run: cfg.epochs,
        loss_history: history,
    };
    // final loss at the stored (f32) parameters
    let stored = emb.params();
    let mut total = 0.0;
    for &i in &members {
        let a = acts.get(i)?;
        let l = labels.get(i)?;
        total += stored.loss_gradient(&a, &l.data, concept, alpha, &resample)?.0;
    }
    emb.final_loss = total / members.len() as f64;
    Ok(emb)
}

fn embedding_paths(m: &ProbeManifest, model: &str, layer: &str, concept: i32) -> (std::path::PathBuf, std::path::PathBuf) {
    let dir = m.embedding_dir(model, layer);
    (
        dir.join(format!("{concept}.json")),
        dir.join(format!("{concept}.npy")),
    )
}

/// Persist as `<dump_root>/embeddings/<model>/<layer>/<concept>.{json,npy}`.
pub fn save_embedding(m: &ProbeManifest, e: &ConceptEmbedding) -> Result<()> {
    let (json, weights) = embedding_paths(m, &e.model, &e.layer, e.concept);
    let t = Tensor::from_f32(vec![e.weights.len()], e.weights.clone())?;
    npy::write_tensor(&weights, &t)?;
    let mut text = serde_json::to_string_pretty(e).map_err(|err| Error::json(&json, err))?;
    text.push('\n');
    npy::write_atomic(&json, text.as_bytes())
}

pub fn load_embedding(m: &ProbeManifest, model: &str, layer: &str, concept: i32) -> Result<ConceptEmbedding> {
    let (json, weights) = embedding_paths(m, model, layer, concept);
    if !json.is_file() || !weights.is_file() {
        return Err(Error::MissingEmbedding {
            representation: format!("{model}/{layer}"),
            concept,
        });
    }
    read_embedding(&json, &weights)
}

fn read_embedding(json: &Path, weights: &Path) -> Result<ConceptEmbedding> {
    let text = std::fs::read(json).map_err(|e| Error::io(json, e))?;
    let mut e: ConceptEmbedding = serde_json::from_slice(&text).map_err(|err| Error::json(json, err))?;
    let t = npy::read_tensor(weights)?;
    e.weights = t
        .as_f32()
        .ok_or_else(|| Error::Format {
            path: weights.to_path_buf(),
            reason: "embedding weights must be float32".into(),
        })?
        .to_vec();
    if e.weights.iter().any(|w| !w.is_finite()) {
        return Err(Error::CorruptDump {
            path: weights.to_path_buf(),
            reason: "non-finite embedding weight".into(),
        });
    }
    Ok(e)
}

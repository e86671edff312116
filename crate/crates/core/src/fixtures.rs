//! Deterministic synthetic probe datasets.
//!
//! Every concept gets a smooth random field per sample. Its margin
//! `tanh(gain · (F - threshold))` is positive exactly on the concept's region
//! and is planted into the concept's channels of the modality specialized in
//! it; the other modality sees an unrelated distractor field there instead.
//! Pixels near a region boundary, or claimed by two concepts, are void.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::analysis::{ComparisonSpec, PairKind, PairSpec};
use crate::error::{Error, Result};
use crate::manifest::{CamTarget, ConceptEntry, LayerEntry, ModelEntry, ProbeManifest, Regime, FORMAT_VERSION};
use crate::npy;
use crate::resample::Bilinear;
use crate::tensor::{FeatureMap, LabelMap, Tensor, VOID_LABEL};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Modality {
    A,
    B,
}

impl Modality {
    fn name(self) -> &'static str {
        match self {
            Modality::A => "A",
            Modality::B => "B",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub samples: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub label_height: usize,
    pub label_width: usize,
    /// Concepts are numbered `1..=concepts`; label 0 is background.
    pub concepts: usize,
    /// Encoder stages `layer1..=layerN`; stage `l` carries `l / N` of the signal.
    pub layers: usize,
    /// Peak magnitude of planted signal.
    pub amplitude: f64,
    /// Signal-to-noise ratio of planted channels; `None` plants noise-free signal.
    pub snr: Option<f64>,
    /// Channels per concept. Defaults to `{2j, 2j+1} mod K` for the j-th concept.
    pub planted: Option<Vec<Vec<usize>>>,
    /// Modality specialized in each concept. Defaults to the last quarter
    /// (at least one) of the concepts on `B`, the rest on `A`.
    pub specialization: Option<Vec<Modality>>,
    /// Smoothing of the random fields, in activation pixels.
    pub blob_sigma: f64,
    pub threshold: f64,
    pub gain: f64,
    /// Pixels whose margin lies within this distance of zero are void.
    pub boundary: f64,
    /// Probability that a concept appears in a sample.
    pub presence: f64,
    /// Share of the other modality's concepts visible in joint-regime models.
    pub joint_leak: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            samples: 16,
            channels: 8,
            height: 16,
            width: 16,
            label_height: 32,
            label_width: 32,
            concepts: 4,
            layers: 4,
            amplitude: 1.0,
            snr: Some(4.0),
            planted: None,
            specialization: None,
            blob_sigma: 1.5,
            threshold: 1.0,
            gain: 4.0,
            boundary: 0.4,
            presence: 1.0,
            joint_leak: 0.5,
            seed: 7,
        }
    }
}

impl SynthConfig {
    /// `n=16, K=8, C=4, SNR=4, seed=7`, with `A` specialized in concepts 1-3.
    pub fn small() -> Self {
        SynthConfig::default()
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "small" => Ok(SynthConfig::small()),
            _ => Err(Error::InvalidConfig(format!("unknown preset '{name}'"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.samples == 0 || self.channels == 0 || self.layers == 0 {
            return bad("samples, channels and layers must be positive".into());
        }
        if self.height == 0 || self.width == 0 || self.label_height == 0 || self.label_width == 0 {
            return bad("spatial sizes must be positive".into());
        }
        if self.concepts == 0 {
            return bad("at least one concept is required".into());
        }
        if let Some(snr) = self.snr {
            if !(snr > 0.0 && snr.is_finite()) {
                return bad(format!("snr must be positive, got {snr}"));
            }
        }
        if let Some(p) = &self.planted {
            if p.len() != self.concepts {
                return bad(format!("planted lists {} concepts, expected {}", p.len(), self.concepts));
            }
            if let Some(&k) = p.iter().flatten().find(|&&k| k >= self.channels) {
                return bad(format!("planted channel {k} is not below K={}", self.channels));
            }
            if p.iter().any(Vec::is_empty) {
                return bad("every concept needs at least one planted channel".into());
            }
        }
        if let Some(s) = &self.specialization {
            if s.len() != self.concepts {
                return bad(format!("specialization lists {} concepts, expected {}", s.len(), self.concepts));
            }
        }
        if !(self.amplitude > 0.0 && self.amplitude.is_finite()) {
            return bad("amplitude must be positive".into());
        }
        if !(self.blob_sigma > 0.0 && self.gain > 0.0 && self.threshold.is_finite()) {
            return bad("blob_sigma and gain must be positive".into());
        }
        if !(0.0..1.0).contains(&self.boundary) {
            return bad("boundary must lie in [0, 1)".into());
        }
        if !(self.presence > 0.0 && self.presence <= 1.0) {
            return bad("presence must lie in (0, 1]".into());
        }
        if !(0.0..=1.0).contains(&self.joint_leak) {
            return bad("joint_leak must lie in [0, 1]".into());
        }
        Ok(())
    }

    pub fn planted_channels(&self) -> Vec<Vec<usize>> {
        self.planted.clone().unwrap_or_else(|| {
            (0..self.concepts)
                .map(|j| {
                    let mut ch = vec![(2 * j) % self.channels, (2 * j + 1) % self.channels];
                    ch.dedup();
                    ch
                })
                .collect()
        })
    }

    pub fn specializations(&self) -> Vec<Modality> {
        self.specialization.clone().unwrap_or_else(|| {
            let on_b = if self.concepts == 1 { 0 } else { (self.concepts / 4).max(1) };
            (0..self.concepts)
                .map(|j| if j + on_b >= self.concepts { Modality::B } else { Modality::A })
                .collect()
        })
    }

    fn noise_std(&self) -> f64 {
        self.snr.map_or(0.0, |s| 1.0 / s)
    }

    pub fn layer_ids(&self) -> Vec<String> {
        (1..=self.layers).map(|l| format!("layer{l}")).collect()
    }
}

pub const FUSION_MODEL: &str = "fusion";
pub const FUSED_LAYER: &str = "fused";

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable blur with edge clamping.
fn blur(src: &[f64], h: usize, w: usize, kernel: &[f64]) -> Vec<f64> {
    let r = (kernel.len() / 2) as isize;
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(i, kv)| kv * src[y * w + clamp(x as isize + i as isize - r, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(i, kv)| kv * tmp[clamp(y as isize + i as isize - r, h) * w + x])
                .sum();
        }
    }
    out
}

/// Blurred white noise rescaled to zero mean and unit variance.
fn smooth_field(rng: &mut ChaCha8Rng, h: usize, w: usize, kernel: &[f64]) -> Vec<f64> {
    let noise: Vec<f64> = (0..h * w).map(|_| rng.sample(StandardNormal)).collect();
    let mut f = blur(&noise, h, w, kernel);
    let n = f.len() as f64;
    let mean = f.iter().sum::<f64>() / n;
    let std = (f.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    let std = if std > 0.0 { std } else { 1.0 };
    f.iter_mut().for_each(|v| *v = (*v - mean) / std);
    f
}

struct Sample {
    /// Per-concept margin at activation resolution.
    margins: Vec<Vec<f64>>,
    /// Distractor margins per modality and channel.
    distractors: [Vec<Vec<f64>>; 2],
    labels: Vec<i32>,
}

/// Label `j` where concept `j`'s upsampled margin exceeds `band` and every
/// other margin is below `-band`; background where all margins are below
/// `-band`; void elsewhere (region boundaries and overlaps).
fn label_map(margins: &[Vec<f64>], up: &Bilinear, band: f64) -> Vec<i32> {
    let ups: Vec<Vec<f64>> = margins.iter().map(|m| up.forward(m)).collect();
    let n = up.output_shape().0 * up.output_shape().1;
    (0..n)
        .map(|p| {
            let mut hit = None;
            let mut count = 0;
            for (j, u) in ups.iter().enumerate() {
                if u[p] >= -band {
                    count += 1;
                    if u[p] > band {
                        hit = Some(j as i32 + 1);
                    }
                }
            }
            match (count, hit) {
                (0, _) => 0,
                (1, Some(j)) => j,
                _ => VOID_LABEL,
            }
        })
        .collect()
}

fn build_samples(cfg: &SynthConfig) -> Result<Vec<Sample>> {
    let (h, w) = (cfg.height, cfg.width);
    let kernel = gaussian_kernel(cfg.blob_sigma);
    let up = Bilinear::new((h, w), (cfg.label_height, cfg.label_width));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut presence: Vec<Vec<bool>> = (0..cfg.samples)
        .map(|_| (0..cfg.concepts).map(|_| rng.random_bool(cfg.presence)).collect())
        .collect();
    for j in 0..cfg.concepts {
        if !presence.iter().any(|row| row[j]) {
            presence[j % cfg.samples][j] = true;
        }
    }

    let mut out = Vec::with_capacity(cfg.samples);
    for present in &presence {
        let fields: Vec<Vec<f64>> = (0..cfg.concepts)
            .map(|_| smooth_field(&mut rng, h, w, &kernel))
            .collect();
        let distractors = [(); 2].map(|_| {
            (0..cfg.channels)
                .map(|_| {
                    smooth_field(&mut rng, h, w, &kernel)
                        .into_iter()
                        .map(|v| (cfg.gain * (v - cfg.threshold)).tanh())
                        .collect()
                })
                .collect::<Vec<Vec<f64>>>()
        });

        // Lift each present concept until it owns pixels at label resolution.
        let mut shift = vec![0.0f64; cfg.concepts];
        for (j, f) in fields.iter().enumerate() {
            let peak = f.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            shift[j] = (cfg.threshold + 0.5 - peak).max(0.0);
        }
        let margins_for = |shift: &[f64]| -> Vec<Vec<f64>> {
            fields
                .iter()
                .enumerate()
                .map(|(j, f)| {
                    if present[j] {
                        f.iter()
                            .map(|v| (cfg.gain * (v + shift[j] - cfg.threshold)).tanh())
                            .collect()
                    } else {
                        vec![-1.0; h * w]
                    }
                })
                .collect()
        };
        let mut attempts = 0;
        let (margins, labels) = loop {
            let margins = margins_for(&shift);
            let labels = label_map(&margins, &up, cfg.boundary);
            let starved: Vec<usize> = (0..cfg.concepts)
                .filter(|&j| present[j] && !labels.contains(&(j as i32 + 1)))
                .collect();
            if starved.is_empty() {
                break (margins, labels);
            }
            attempts += 1;
            if attempts > 64 {
                return Err(Error::InvalidConfig(
                    "could not place every concept at label resolution; enlarge the label grid".into(),
                ));
            }
            for j in starved {
                shift[j] += 0.25;
            }
        };
        out.push(Sample {
            margins,
            distractors,
            labels,
        });
    }
    Ok(out)
}

/// Noise-free signal of one channel for a modality and regime.
fn channel_signal(
    s: &Sample,
    k: usize,
    modality: Modality,
    joint: bool,
    owners: &[Vec<usize>],
    spec: &[Modality],
    leak: f64,
) -> Vec<f64> {
    let mut own = false;
    let mut sig = vec![0.0; s.margins.first().map_or(0, Vec::len)];
    for &j in &owners[k] {
        let weight = if spec[j] == modality {
            own = true;
            1.0
        } else if joint {
            leak
        } else {
            0.0
        };
        if weight > 0.0 {
            sig.iter_mut().zip(&s.margins[j]).for_each(|(v, m)| *v += weight * m);
        }
    }
    if !own {
        let d = &s.distractors[modality as usize][k];
        sig.iter_mut().zip(d).for_each(|(v, m)| *v += m);
    }
    sig
}

/// Write a synthetic dataset under `out_dir` and return its manifest.
///
/// Layout: `manifest.json`, `protocol.json` (the comparison spec of the
/// standard protocol), `dumps/` and grayscale underlays in `images/`.
pub fn generate_probe_dataset(cfg: &SynthConfig, out_dir: impl AsRef<Path>) -> Result<ProbeManifest> {
    cfg.validate()?;
    let out_dir = out_dir.as_ref();
    let (h, w) = (cfg.height, cfg.width);
    let k = cfg.channels;
    let planted = cfg.planted_channels();
    let spec = cfg.specializations();
    let mut owners = vec![Vec::new(); k];
    for (j, chans) in planted.iter().enumerate() {
        for &c in chans {
            if !owners[c].contains(&j) {
                owners[c].push(j);
            }
        }
    }
    let layer_ids = cfg.layer_ids();
    let sample_ids: Vec<String> = (0..cfg.samples).map(|i| format!("s{i:04}")).collect();

    let mut models = Vec::new();
    for (regime, tag) in [(Regime::Separate, "sep"), (Regime::Joint, "joint")] {
        for modality in [Modality::A, Modality::B] {
            models.push(ModelEntry {
                id: format!("{}_{tag}", modality.name()),
                modality: modality.name().into(),
                regime,
                layers: Some(layer_ids.clone()),
            });
        }
    }
    models.push(ModelEntry {
        id: FUSION_MODEL.into(),
        modality: "A+B".into(),
        regime: Regime::Fusion,
        layers: Some(vec![FUSED_LAYER.into()]),
    });
    let mut layers: Vec<LayerEntry> = layer_ids
        .iter()
        .map(|id| LayerEntry {
            id: id.clone(),
            channels: k,
            height: h,
            width: w,
        })
        .collect();
    layers.push(LayerEntry {
        id: FUSED_LAYER.into(),
        channels: 2 * k,
        height: h,
        width: w,
    });

    let mut m = ProbeManifest {
        format_version: FORMAT_VERSION,
        dump_root: "dumps".into(),
        models,
        layers,
        samples: sample_ids.clone(),
        concepts: (1..=cfg.concepts as i32)
            .map(|id| ConceptEntry {
                id,
                name: format!("concept{id}"),
            })
            .collect(),
        label_shape: [cfg.label_height, cfg.label_width],
        cam_targets: vec![CamTarget {
            model: FUSION_MODEL.into(),
            layer: FUSED_LAYER.into(),
            score: "sum_over_labeled_pixels".into(),
        }],
        base_dir: out_dir.to_path_buf(),
        source_hash: String::new(),
    };
    m.check_schema()?;

    let samples = build_samples(cfg)?;
    let up = Bilinear::new((h, w), (cfg.label_height, cfg.label_width));
    let sigma = cfg.noise_std();
    let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    noise_rng.set_stream(1);
    let nl = cfg.layers;

    for (s, sid) in samples.iter().zip(&sample_ids) {
        let labels = LabelMap::new(cfg.label_height, cfg.label_width, s.labels.clone())?;
        npy::write_tensor(m.label_path(sid), &labels.to_tensor())?;
        let image: Vec<u8> = s
            .labels
            .iter()
            .map(|&l| if l < 0 { 0 } else { (40 + 200 * l as usize / cfg.concepts) as u8 })
            .collect();
        npy::write_tensor(
            out_dir.join("images").join(format!("{sid}.npy")),
            &Tensor::from_u8(vec![cfg.label_height, cfg.label_width], image)?,
        )?;

        let mut last_joint = Vec::new();
        for joint in [false, true] {
            for modality in [Modality::A, Modality::B] {
                let model = format!("{}_{}", modality.name(), if joint { "joint" } else { "sep" });
                let signals: Vec<Vec<f64>> = (0..k)
                    .map(|c| channel_signal(s, c, modality, joint, &owners, &spec, cfg.joint_leak))
                    .collect();
                for (li, layer) in layer_ids.iter().enumerate() {
                    let scale = cfg.amplitude * (li + 1) as f64 / nl as f64;
                    let mut fm = FeatureMap::zeros(k, h, w);
                    for (c, sig) in signals.iter().enumerate() {
                        for (v, &x) in fm.channel_mut(c).iter_mut().zip(sig) {
                            let n: f64 = noise_rng.sample(StandardNormal);
                            *v = (scale * x + cfg.amplitude * sigma * n) as f32;
                        }
                    }
                    npy::write_tensor(m.activation_path(&model, layer, sid), &fm.to_tensor())?;
                    if joint && li + 1 == nl {
                        last_joint.push(fm);
                    }
                }
            }
        }

        // fused = Cat(A_joint, B_joint) at the deepest stage plus every concept's signal
        let mut fused = last_joint[0].concat(&last_joint[1])?;
        for c in 0..2 * k {
            let shared = &owners[c % k];
            let plane = fused.channel_mut(c);
            for &j in shared {
                plane
                    .iter_mut()
                    .zip(&s.margins[j])
                    .for_each(|(v, &x)| *v += (cfg.amplitude * x) as f32);
            }
        }
        npy::write_tensor(m.activation_path(FUSION_MODEL, FUSED_LAYER, sid), &fused.to_tensor())?;

        // Gradients of an identity decoder: concept j's logit is the sum of its
        // planted channels, scored over the pixels labeled j.
        for j in 0..cfg.concepts {
            let concept = j as i32 + 1;
            let mask: Vec<f64> = s
                .labels
                .iter()
                .map(|&l| if l == concept { 1.0 } else { 0.0 })
                .collect();
            let back = up.transpose(&mask);
            let mut g = FeatureMap::zeros(2 * k, h, w);
            for c in 0..2 * k {
                if owners[c % k].contains(&j) {
                    for (v, &x) in g.channel_mut(c).iter_mut().zip(&back) {
                        *v = x as f32;
                    }
                }
            }
            npy::write_tensor(m.gradient_path(FUSION_MODEL, FUSED_LAYER, concept, sid), &g.to_tensor())?;
        }
    }

    let protocol = standard_protocol(cfg);
    let mut text = serde_json::to_string_pretty(&protocol).map_err(|e| Error::json(out_dir.join("protocol.json"), e))?;
    text.push('\n');
    npy::write_atomic(&out_dir.join("protocol.json"), text.as_bytes())?;
    m.save(out_dir.join("manifest.json"))?;
    Ok(m)
}

/// The comparison protocol of the five table groups plus CKA and bar data,
/// with `A` playing the RGB role and `B` the depth role.
pub fn standard_protocol(cfg: &SynthConfig) -> ComparisonSpec {
    let last = format!("layer{}", cfg.layers);
    let sel = |model: &str| format!("{model}:{last}");
    let fused = format!("{FUSION_MODEL}:{FUSED_LAYER}");
    let svar = |name: &str, group: u32, reference: (String, &str), target: (String, &str)| PairSpec {
        name: name.into(),
        kind: PairKind::Svar,
        target: target.0,
        reference: Some(reference.0),
        layers: vec![],
        group: Some(group),
        target_label: Some(target.1.into()),
        reference_label: Some(reference.1.into()),
    };
    let mut pairs = vec![
        svar("b_sep_vs_a_sep", 1, (sel("B_sep"), "B (separate)"), (sel("A_sep"), "A (separate)")),
        svar("b_joint_vs_a_joint", 1, (sel("B_joint"), "B (joint)"), (sel("A_joint"), "A (joint)")),
        svar("b_sep_vs_b_joint", 2, (sel("B_sep"), "B (separate)"), (sel("B_joint"), "B (joint)")),
        svar("a_sep_vs_a_joint", 2, (sel("A_sep"), "A (separate)"), (sel("A_joint"), "A (joint)")),
        svar("b_sep_vs_fused", 3, (sel("B_sep"), "B (separate)"), (fused.clone(), "A+B (joint)")),
        svar("a_sep_vs_fused", 3, (sel("A_sep"), "A (separate)"), (fused.clone(), "A+B (joint)")),
        svar("b_joint_vs_fused", 4, (sel("B_joint"), "B (joint)"), (fused.clone(), "A+B (joint)")),
        svar("a_joint_vs_fused", 4, (sel("A_joint"), "A (joint)"), (fused.clone(), "A+B (joint)")),
        svar(
            "cat_sep_vs_cat_joint",
            5,
            (format!("cat({},{})", sel("A_sep"), sel("B_sep")), "Cat (separate)"),
            (format!("cat({},{})", sel("A_joint"), sel("B_joint")), "Cat (joint)"),
        ),
    ];
    let layers = cfg.layer_ids();
    for (name, a, b) in [("cka_sep", "A_sep", "B_sep"), ("cka_joint", "A_joint", "B_joint")] {
        pairs.push(PairSpec {
            name: name.into(),
            kind: PairKind::CkaPerLayer,
            target: a.into(),
            reference: Some(b.into()),
            layers: layers.clone(),
            group: None,
            target_label: None,
            reference_label: None,
        });
    }
    for model in ["A_sep", "A_joint"] {
        pairs.push(PairSpec {
            name: format!("levels_{}", model.to_lowercase()),
            kind: PairKind::CkaCrossLevel,
            target: model.into(),
            reference: None,
            layers: layers.clone(),
            group: None,
            target_label: None,
            reference_label: None,
        });
    }
    for (name, reference, target) in [
        ("bars_b_sep_to_a_sep", "B_sep", "A_sep"),
        ("bars_b_sep_to_b_joint", "B_sep", "B_joint"),
    ] {
        pairs.push(PairSpec {
            name: name.into(),
            kind: PairKind::IouBars,
            target: sel(target),
            reference: Some(sel(reference)),
            layers: vec![],
            group: None,
            target_label: None,
            reference_label: None,
        });
    }
    ComparisonSpec {
        pairs,
        ..ComparisonSpec::default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifest::load_manifest;

    fn tiny() -> SynthConfig {
        SynthConfig {
            samples: 8,
            channels: 4,
            height: 8,
            width: 8,
            label_height: 8,
            label_width: 8,
            concepts: 2,
            layers: 2,
            ..SynthConfig::default()
        }
    }

    fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
        fn walk(root: &Path, dir: &Path, out: &mut Vec<(String, Vec<u8>)>) {
            let mut entries: Vec<_> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
            entries.sort();
            for p in entries {
                if p.is_dir() {
                    walk(root, &p, out);
                } else {
                    let rel = p.strip_prefix(root).unwrap().display().to_string();
                    out.push((rel, std::fs::read(&p).unwrap()));
                }
            }
        }
        let mut out = Vec::new();
        walk(dir, dir, &mut out);
        out
    }

    #[test]
    fn tiny_dataset_validates() {
        let dir = tempfile::tempdir().unwrap();
        generate_probe_dataset(&tiny(), dir.path()).unwrap();
        let m = load_manifest(dir.path().join("manifest.json"), true).unwrap();
        assert_eq!(m.models.len(), 5);
        assert_eq!(m.concept_ids(), vec![1, 2]);
        assert!(m.has_layer("fusion", "fused"));
        assert!(!m.has_layer("fusion", "layer1"));
        assert_eq!(tiny().specializations(), vec![Modality::A, Modality::B]);
    }

    #[test]
    fn every_concept_appears() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            presence: 0.05,
            ..tiny()
        };
        let m = generate_probe_dataset(&cfg, dir.path()).unwrap();
        for c in m.concept_ids() {
            let found = m.samples.iter().any(|s| {
                let t = npy::read_tensor(m.label_path(s)).unwrap();
                t.as_i32().unwrap().contains(&c)
            });
            assert!(found, "concept {c} never labeled");
        }
    }

    #[test]
    fn same_seed_same_tree() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        generate_probe_dataset(&tiny(), a.path()).unwrap();
        generate_probe_dataset(&tiny(), b.path()).unwrap();
        assert_eq!(tree(a.path()), tree(b.path()));

        let c = tempfile::tempdir().unwrap();
        generate_probe_dataset(&SynthConfig { seed: 8, ..tiny() }, c.path()).unwrap();
        assert_ne!(tree(a.path()), tree(c.path()));
    }

    #[test]
    fn invalid_configs() {
        assert!(SynthConfig { concepts: 0, ..tiny() }.validate().is_err());
        assert!(SynthConfig { snr: Some(0.0), ..tiny() }.validate().is_err());
        let planted = Some(vec![vec![0], vec![4]]);
        assert!(SynthConfig { planted, ..tiny() }.validate().is_err());
        assert!(SynthConfig::preset("huge").is_err());
    }

    #[test]
    fn labels_follow_specialized_channels() {
        // noise-free: the specialized channel is positive exactly where the
        // upsampled margin is, so label 1 implies a positive planted channel
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig { snr: None, ..tiny() };
        let m = generate_probe_dataset(&cfg, dir.path()).unwrap();
        for s in &m.samples {
            let l = npy::read_tensor(m.label_path(s)).unwrap();
            let a = FeatureMap::try_from(npy::read_tensor(m.activation_path("A_sep", "layer2", s)).unwrap()).unwrap();
            for (p, &v) in l.as_i32().unwrap().iter().enumerate() {
                if v == 1 {
                    assert!(a.channel(0)[p] > 0.0);
                }
            }
        }
    }

    #[test]
    fn blur_preserves_constants() {
        let k = gaussian_kernel(1.5);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let out = blur(&[3.0; 20], 4, 5, &k);
        assert!(out.iter().all(|v| (v - 3.0).abs() < 1e-12));
    }
}

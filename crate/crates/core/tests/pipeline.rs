//! End-to-end checks on generated fixture datasets.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use fusionlens::analysis::{PairResult, PairStatus};
use fusionlens::fixtures::{standard_protocol, Modality};
use fusionlens::metrics::iou_distribution;
use fusionlens::similarity::feature_matrix;
use fusionlens::{
    concat_features, generate_probe_dataset, linear_cka, open_activation_set, run_protocol, train_concept_embedding,
    ComparisonSpec, Error, FeatureCache, LabelCache, LabelSet, Pooling, ProbeManifest, ProbeTrainConfig,
    ProtocolOptions, SynthConfig,
};

fn caches() -> (Arc<FeatureCache>, Arc<LabelCache>) {
    (Arc::new(FeatureCache::new(64 << 20)), Arc::new(LabelCache::new(16 << 20)))
}

/// Train probes for every concept on `model:layer` and return their set IoUs.
fn probe_ious(m: &ProbeManifest, model: &str, layer: &str, cfg: &ProbeTrainConfig) -> Vec<f64> {
    let (features, labels) = caches();
    let acts = open_activation_set(m, model, layer, features).unwrap();
    let labels = LabelSet::open(m, labels).unwrap();
    let embeddings: BTreeMap<_, _> = labels
        .concepts()
        .iter()
        .map(|&c| (c, train_concept_embedding(&acts, &labels, c, cfg).unwrap()))
        .collect();
    iou_distribution(&embeddings, &acts, &labels, cfg.tau).unwrap().iou
}

/// IoU of each concept on the separate-regime model specialized in it.
fn specialized_ious(cfg: &SynthConfig, dir: &Path) -> Vec<f64> {
    let m = generate_probe_dataset(cfg, dir).unwrap();
    let layer = format!("layer{}", cfg.layers);
    let train = ProbeTrainConfig::default();
    let a = probe_ious(&m, "A_sep", &layer, &train);
    let b = probe_ious(&m, "B_sep", &layer, &train);
    cfg.specializations()
        .iter()
        .enumerate()
        .map(|(j, s)| if *s == Modality::A { a[j] } else { b[j] })
        .collect()
}

#[test]
fn planted_concepts_are_recovered() {
    let dir = tempfile::tempdir().unwrap();
    let ious = specialized_ious(&SynthConfig::small(), dir.path());
    assert!(ious.iter().all(|&v| v >= 0.95), "{ious:?}");
}

#[test]
fn noise_free_concepts_are_recovered_almost_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig {
        snr: None,
        ..SynthConfig::small()
    };
    let ious = specialized_ious(&cfg, dir.path());
    assert!(ious.iter().all(|&v| v >= 0.99), "{ious:?}");
}

#[test]
fn recovery_does_not_drop_as_snr_grows() {
    let mut prev: Option<Vec<f64>> = None;
    for snr in [0.5, 1.0, 2.0, 4.0] {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            snr: Some(snr),
            ..SynthConfig::small()
        };
        let ious = specialized_ious(&cfg, dir.path());
        if let Some(p) = &prev {
            for (j, (lo, hi)) in p.iter().zip(&ious).enumerate() {
                assert!(hi >= lo, "concept {} fell from {lo} to {hi} at snr {snr}", j + 1);
            }
        }
        prev = Some(ious);
    }
}

#[test]
fn training_is_deterministic_and_loss_trends_down() {
    let dir = tempfile::tempdir().unwrap();
    let m = generate_probe_dataset(&SynthConfig::small(), dir.path()).unwrap();
    let cfg = ProbeTrainConfig::default();
    let (features, labels) = caches();
    let acts = open_activation_set(&m, "A_sep", "layer4", features).unwrap();
    let labels = LabelSet::open(&m, labels).unwrap();
    for concept in [1, 2, 3] {
        let e1 = train_concept_embedding(&acts, &labels, concept, &cfg).unwrap();
        let e2 = train_concept_embedding(&acts, &labels, concept, &cfg).unwrap();
        assert_eq!(e1, e2);
        assert_eq!(e1.weights, e2.weights);

        let mut ema = e1.loss_history[0];
        for (epoch, &loss) in e1.loss_history.iter().enumerate().take(10).skip(1) {
            let next = 0.5 * ema + 0.5 * loss;
            assert!(next < ema, "concept {concept}: smoothed loss rose at epoch {epoch}");
            ema = next;
        }
    }
}

#[test]
fn concatenation_order_does_not_change_cka() {
    let dir = tempfile::tempdir().unwrap();
    let m = generate_probe_dataset(&SynthConfig::small(), dir.path()).unwrap();
    let (features, _) = caches();
    let open = |model: &str| open_activation_set(&m, model, "layer4", features.clone()).unwrap();
    let ab = concat_features(open("A_sep"), open("B_sep")).unwrap();
    let ba = concat_features(open("B_sep"), open("A_sep")).unwrap();
    assert_eq!(ab.channels(), 16);
    for pooling in [Pooling::SpatialMean, Pooling::Flatten] {
        let x = feature_matrix(&ab, pooling).unwrap();
        let y = feature_matrix(&ba, pooling).unwrap();
        assert!((linear_cka(&x, &y).unwrap() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn protocol_on_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig::small();
    let m = generate_probe_dataset(&cfg, dir.path()).unwrap();
    let spec = standard_protocol(&cfg);
    let opts = ProtocolOptions {
        auto_train: true,
        ..ProtocolOptions::default()
    };
    let r = run_protocol(&m, &spec, &opts).unwrap();

    // one outcome per pair, in spec order, all successful
    assert_eq!(r.pairs.len(), spec.pairs.len());
    for (o, p) in r.pairs.iter().zip(&spec.pairs) {
        assert_eq!(o.spec.name, p.name);
        assert_eq!(o.status, PairStatus::Ok, "{}: {:?}", p.name, o.error);
    }

    // aggregates equal the sum of their reported terms
    for o in &r.pairs {
        if let Some(PairResult::Svar(s)) = &o.result {
            let sum: f64 = s.terms.iter().map(|t| t.term).sum();
            assert!((s.aggregate - sum).abs() < 1e-9, "{}", o.spec.name);
        }
    }

    // fused beats both unimodal views, and A (more concepts) beats B
    assert!(r.svar("a_sep_vs_fused").unwrap() > 0.0);
    assert!(r.svar("b_sep_vs_fused").unwrap() > 0.0);
    assert!(r.svar("b_sep_vs_a_sep").unwrap() > 0.0);

    for name in ["cka_sep", "cka_joint"] {
        let Some(PairResult::CkaPerLayer { layers }) = &r.pair(name).unwrap().result else {
            panic!("{name} has no per-layer result");
        };
        assert_eq!(layers.len(), cfg.layers);
        assert!(layers.iter().all(|l| l.cka < 1.0), "{layers:?}");
    }

    // rerun reuses the embeddings saved by the first run
    let again = run_protocol(&m, &spec, &opts).unwrap();
    assert_eq!(
        serde_json::to_value(&r.pairs).unwrap(),
        serde_json::to_value(&again.pairs).unwrap()
    );
}

#[test]
fn empty_spec_and_bad_selectors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig::small();
    let m = generate_probe_dataset(&cfg, dir.path()).unwrap();
    let opts = ProtocolOptions::default();

    let r = run_protocol(&m, &ComparisonSpec::default(), &opts).unwrap();
    assert!(r.pairs.is_empty());
    assert_eq!(r.provenance.concepts, vec![1, 2, 3, 4]);

    let mut spec = standard_protocol(&cfg);
    spec.pairs[0].target = "C_sep:layer4".into();
    assert!(matches!(run_protocol(&m, &spec, &opts), Err(Error::Selector { .. })));

    // without auto-train, missing embeddings fail their pairs only
    let spec = standard_protocol(&cfg);
    let r = run_protocol(&m, &spec, &opts).unwrap();
    assert_eq!(r.pairs.len(), spec.pairs.len());
    let failed = r.pairs.iter().filter(|o| o.status == PairStatus::Failed).count();
    assert_eq!(failed, 11, "svar and bar pairs need embeddings");
    assert!(r.pair("cka_sep").unwrap().status == PairStatus::Ok);
}

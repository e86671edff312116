use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::Arc;

use fusionlens::analysis::representation_iou;
use fusionlens::fixtures::standard_protocol;
use fusionlens::similarity::cka_cross_modal;
use fusionlens::{
    cam_for_sample, concept_proportions, load_manifest, npy, open_activation_set, render_heatmap, semantic_variance,
    FeatureCache, LabelCache, LabelSet, Pooling, ProbeManifest, SynthConfig, Tensor,
};
use serde_json::Value;
use tempfile::TempDir;

fn fusionlens(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fusionlens")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

struct Fixture {
    _dir: TempDir,
    root: PathBuf,
}

impl Fixture {
    fn new() -> Fixture {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("data");
        let o = fusionlens(&["synth", "--preset", "small", "--out", s(&root)]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        Fixture { _dir: dir, root }
    }

    fn manifest(&self) -> String {
        self.root.join("manifest.json").display().to_string()
    }

    fn path(&self, rel: &str) -> String {
        self.root.join(rel).display().to_string()
    }

    fn load(&self) -> ProbeManifest {
        load_manifest(self.manifest(), true).unwrap()
    }

    fn train(&self, model: &str, layer: &str) {
        let o = fusionlens(&["probe-train", "--manifest", &self.manifest(), "--model", model, "--layer", layer]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// The file holds exactly the library's pretty JSON of `value`.
fn assert_serialized<T: serde::Serialize>(path: &str, value: &T) {
    let text = std::fs::read_to_string(path).unwrap();
    assert_eq!(text, serde_json::to_string_pretty(value).unwrap() + "\n");
}

fn read_json(path: &str) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn help_lists_every_flag() {
    let o = fusionlens(&["--help"]);
    assert_eq!(code(&o), 0);
    let top = stdout(&o);
    for sub in ["probe-train", "svar", "cka", "cam", "report", "synth", "--jobs"] {
        assert!(top.contains(sub), "{sub} missing from help");
    }
    let flags: [(&str, &[&str]); 6] = [
        ("probe-train", &["--manifest", "--model", "--layer", "--concepts", "--epochs", "--lr", "--seed", "--out"]),
        ("svar", &["--manifest", "--target", "--reference", "--lambda", "--tau", "--out"]),
        ("cka", &["--manifest", "--a", "--b", "--layers", "--cross-level", "--pooling", "--out"]),
        ("cam", &["--manifest", "--model", "--layer", "--concept", "--samples", "--underlay-dir", "--json", "--out"]),
        ("report", &["--manifest", "--spec", "--out", "--auto-train", "--formats"]),
        ("synth", &["--config", "--preset", "--out"]),
    ];
    for (sub, names) in flags {
        let o = fusionlens(&[sub, "--help"]);
        assert_eq!(code(&o), 0);
        let text = stdout(&o);
        for f in names {
            assert!(text.contains(f), "{sub} help lacks {f}");
        }
    }
}

#[test]
fn bad_invocations_are_user_errors() {
    assert_eq!(code(&fusionlens(&["synth", "--preset", "small", "--out", "x", "--bogus"])), 1);
    assert_eq!(code(&fusionlens(&[])), 1);
    assert_eq!(code(&fusionlens(&["synth", "--preset", "huge", "--out", "x"])), 1);
    assert_eq!(code(&fusionlens(&["svar", "--manifest", "missing.json", "--target", "a:b", "--reference", "a:b"])), 1);
}

#[test]
fn synth_is_reproducible_and_valid() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        assert_eq!(code(&fusionlens(&["synth", "--preset", "small", "--out", s(out)])), 0);
    }
    let m = load_manifest(a.join("manifest.json"), true).unwrap();
    assert_eq!(m.samples.len(), 16);
    for rel in ["manifest.json", "protocol.json", "dumps/A_sep/layer4/s0003.npy", "dumps/labels/s0015.npy"] {
        assert_eq!(std::fs::read(a.join(rel)).unwrap(), std::fs::read(b.join(rel)).unwrap(), "{rel}");
    }
    let protocol: Value = read_json(s(&a.join("protocol.json")));
    let expected = serde_json::to_value(standard_protocol(&SynthConfig::small())).unwrap();
    assert_eq!(protocol, expected);

    // config file route with a different seed
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"seed": 8, "samples": 4}"#).unwrap();
    let c = dir.path().join("c");
    assert_eq!(code(&fusionlens(&["synth", "--config", s(&cfg), "--out", s(&c)])), 0);
    assert_eq!(load_manifest(c.join("manifest.json"), true).unwrap().samples.len(), 4);
    std::fs::write(&cfg, r#"{"seeds": 8}"#).unwrap();
    assert_eq!(code(&fusionlens(&["synth", "--config", s(&cfg), "--out", s(&c)])), 1);
}

#[test]
fn synth_into_unwritable_location_is_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, b"x").unwrap();
    let o = fusionlens(&["synth", "--preset", "small", "--out", s(&blocker.join("sub"))]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
}

#[test]
fn probe_train_writes_embeddings() {
    let f = Fixture::new();
    let out = f.path("trained.json");
    let o = fusionlens(&[
        "probe-train", "--manifest", &f.manifest(), "--model", "A_sep", "--layer", "layer4", "--concepts", "1,2",
        "--out", &out,
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("concept 1 (concept1): final loss"));
    for c in [1, 2] {
        assert!(f.root.join(format!("dumps/embeddings/A_sep/layer4/{c}.json")).is_file());
        assert!(f.root.join(format!("dumps/embeddings/A_sep/layer4/{c}.npy")).is_file());
    }
    assert!(!f.root.join("dumps/embeddings/A_sep/layer4/3.json").exists());
    let json = read_json(&out);
    assert_eq!(json.as_array().unwrap().len(), 2);
    assert_eq!(json[0]["concept"], 1);
    assert_eq!(json[0]["loss_history"].as_array().unwrap().len(), 30);
}

#[test]
fn probe_train_errors() {
    let f = Fixture::new();
    let m = f.manifest();
    let o = fusionlens(&["probe-train", "--manifest", &m, "--model", "A_sep", "--layer", "layer9"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("layer9"));
    let o = fusionlens(&["probe-train", "--manifest", &m, "--model", "A_sep", "--layer", "layer4", "--epochs", "0"]);
    assert_eq!(code(&o), 1);
    let o = fusionlens(&["probe-train", "--manifest", &m, "--model", "A_sep", "--layer", "layer4", "--concepts", "9"]);
    assert_eq!(code(&o), 2);
    let o = fusionlens(&["probe-train", "--manifest", &m, "--model", "A_sep", "--layer", "layer4", "--concepts", "x"]);
    assert_eq!(code(&o), 1);
    // a missing dump file
    std::fs::remove_file(f.root.join("dumps/A_sep/layer2/s0004.npy")).unwrap();
    let o = fusionlens(&["probe-train", "--manifest", &m, "--model", "A_sep", "--layer", "layer4"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("s0004"));
}

#[test]
fn svar_matches_library() {
    let f = Fixture::new();
    f.train("A_sep", "layer4");
    f.train("B_sep", "layer4");
    let m = f.manifest();
    let o = fusionlens(&["svar", "--manifest", &m, "--target", "A_sep:layer4", "--reference", "A_sep:layer4"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(stdout(&o).trim(), "0.00");

    let out = f.path("svar.json");
    let o = fusionlens(&[
        "svar", "--manifest", &m, "--target", "A_sep:layer4", "--reference", "B_sep:layer4", "--out", &out,
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    let manifest = f.load();
    let cache = Arc::new(FeatureCache::new(1 << 26));
    let labels = LabelSet::open(&manifest, Arc::new(LabelCache::new(1 << 24))).unwrap();
    let sel = |t: &str| t.parse().unwrap();
    let d2 = representation_iou(&manifest, &sel("A_sep:layer4"), &labels, 0.5, None, cache.clone()).unwrap();
    let d1 = representation_iou(&manifest, &sel("B_sep:layer4"), &labels, 0.5, None, cache).unwrap();
    let lib = semantic_variance(&d2, &d1, &concept_proportions(&labels), 2.0).unwrap();
    assert!(lib.aggregate > 0.0);
    assert_serialized(&out, &lib);
    assert_eq!(read_json(&out)["aggregate"].as_f64().unwrap().to_bits(), lib.aggregate.to_bits());
    assert_eq!(stdout(&o).trim(), format!("{:.2}", lib.aggregate));

    let o = fusionlens(&["svar", "--manifest", &m, "--target", "A_joint:layer4", "--reference", "B_sep:layer4"]);
    assert_eq!(code(&o), 2);
    let o = fusionlens(&["svar", "--manifest", &m, "--target", "A_sep", "--reference", "B_sep:layer4"]);
    assert_eq!(code(&o), 1);
}

#[test]
fn cka_matches_library() {
    let f = Fixture::new();
    let m = f.manifest();
    let o = fusionlens(&["cka", "--manifest", &m, "--a", "A_sep", "--b", "A_sep"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let lines: Vec<String> = stdout(&o).lines().map(str::to_string).collect();
    assert_eq!(lines.len(), 4);
    assert!(lines.iter().all(|l| l.ends_with("1.0000")), "{lines:?}");

    let out = f.path("cka.json");
    let o = fusionlens(&[
        "cka", "--manifest", &m, "--a", "A_sep", "--b", "B_sep", "--layers", "layer1,layer4", "--pooling", "flatten",
        "--out", &out,
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let layers = vec!["layer1".to_string(), "layer4".to_string()];
    let lib = cka_cross_modal(&f.load(), "A_sep", "B_sep", &layers, Pooling::Flatten, Arc::new(FeatureCache::new(1 << 26)))
        .unwrap();
    assert_serialized(&out, &lib);

    let out = f.path("levels.json");
    let o = fusionlens(&["cka", "--manifest", &m, "--cross-level", "A_joint", "--out", &out]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let levels = read_json(&out);
    assert_eq!(levels["values"].as_array().unwrap().len(), 16);

    assert_eq!(code(&fusionlens(&["cka", "--manifest", &m, "--a", "A_sep"])), 1);
    assert_eq!(code(&fusionlens(&["cka", "--manifest", &m, "--a", "A_sep", "--b", "B_sep", "--pooling", "max"])), 1);
}

#[test]
fn cka_on_a_single_sample_is_data_error() {
    let f = Fixture::new();
    let path = f.root.join("manifest.json");
    let mut json: Value = read_json(s(&path));
    json["samples"] = serde_json::json!(["s0000"]);
    std::fs::write(&path, serde_json::to_string_pretty(&json).unwrap()).unwrap();
    let o = fusionlens(&["cka", "--manifest", s(&path), "--a", "A_sep", "--b", "B_sep"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

fn decode_png(path: &str) -> Vec<u8> {
    let dec = png::Decoder::new(std::io::BufReader::new(std::fs::File::open(path).unwrap()));
    let mut reader = dec.read_info().unwrap();
    let mut buf = vec![0; reader.output_buffer_size().unwrap()];
    let info = reader.next_frame(&mut buf).unwrap();
    buf.truncate(info.buffer_size());
    buf
}

#[test]
fn cam_matches_library() {
    let f = Fixture::new();
    let m = f.manifest();
    let out = f.path("cams");
    let o = fusionlens(&[
        "cam", "--manifest", &m, "--model", "fusion", "--layer", "fused", "--concept", "2", "--samples",
        "s0001,s0005", "--underlay-dir", &f.path("images"), "--json", "--out", &out,
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    let manifest = f.load();
    let acts = open_activation_set(&manifest, "fusion", "fused", Arc::new(FeatureCache::new(1 << 24))).unwrap();
    let c = cam_for_sample(&manifest, &acts, 2, 5).unwrap();
    let underlay = (&npy::read_tensor(f.root.join("images/s0005.npy")).unwrap()).try_into().unwrap();
    let lib = render_heatmap(&c, Some(&underlay)).unwrap();
    assert_eq!(std::fs::read(format!("{out}/s0005_concept2.png")).unwrap(), lib);
    let first = cam_for_sample(&manifest, &acts, 2, 1).unwrap();
    assert_serialized(&format!("{out}/cams.json"), &vec![first, c]);

    // an all-zero gradient gives a map of the lowest colormap entry
    let g = f.root.join("dumps/gradients/fusion/fused/3/s0002.npy");
    let shape = npy::read_tensor(&g).unwrap().shape().to_vec();
    let n = shape.iter().product();
    npy::write_tensor(&g, &Tensor::from_f32(shape, vec![0.0; n]).unwrap()).unwrap();
    let o = fusionlens(&[
        "cam", "--manifest", &m, "--model", "fusion", "--layer", "fused", "--concept", "3", "--samples", "s0002",
        "--out", &out,
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let px = decode_png(&format!("{out}/s0002_concept3.png"));
    assert!(px.chunks(3).all(|p| p == px[..3].to_vec()));
    assert_eq!(&px[..3], &[68, 1, 84]);

    std::fs::remove_file(&g).unwrap();
    let o = fusionlens(&[
        "cam", "--manifest", &m, "--model", "fusion", "--layer", "fused", "--concept", "3", "--samples", "s0002",
        "--out", &out,
    ]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("s0002"));
}

#[test]
fn report_runs_the_standard_protocol() {
    let f = Fixture::new();
    let out = f.path("report");
    let o = fusionlens(&[
        "report", "--manifest", &f.manifest(), "--spec", &f.path("protocol.json"), "--out", &out, "--auto-train",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let table = std::fs::read_to_string(format!("{out}/tables/semantic_variance.txt")).unwrap();
    for g in 1..=5 {
        assert!(table.contains(&format!("[group {g}]")));
    }
    assert_eq!(stdout(&o).lines().next(), table.lines().next());
    for file in ["report.json", "report.csv", "figures/cka_sep.svg", "figures/levels_a_sep.svg", "figures/bars_b_sep_to_a_sep.svg"] {
        assert!(Path::new(&format!("{out}/{file}")).is_file(), "{file}");
    }
    let r = read_json(&format!("{out}/report.json"));
    assert_eq!(r["pairs"].as_array().unwrap().len(), 15);
    assert!(r["pairs"].as_array().unwrap().iter().all(|p| p["status"] == "ok"));

    // a format subset
    let subset = f.path("subset");
    let o = fusionlens(&[
        "report", "--manifest", &f.manifest(), "--spec", &f.path("protocol.json"), "--out", &subset, "--formats",
        "csv",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(Path::new(&format!("{subset}/report.csv")).is_file());
    assert!(!Path::new(&format!("{subset}/report.json")).exists());
}

#[test]
fn report_edge_cases() {
    let f = Fixture::new();
    let spec = f.path("empty.json");
    std::fs::write(&spec, "{}").unwrap();
    let out = f.path("empty_report");
    let o = fusionlens(&["report", "--manifest", &f.manifest(), "--spec", &spec, "--out", &out]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let r = read_json(&format!("{out}/report.json"));
    assert!(r["pairs"].as_array().unwrap().is_empty());
    assert_eq!(r["provenance"]["concepts"], serde_json::json!([1, 2, 3, 4]));

    let mut protocol = read_json(&f.path("protocol.json"));
    protocol["pairs"][0]["reference"] = Value::from("D_sep:layer4");
    std::fs::write(&spec, protocol.to_string()).unwrap();
    let o = fusionlens(&["report", "--manifest", &f.manifest(), "--spec", &spec, "--out", &out]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
    assert!(stderr(&o).contains("D_sep"));

    std::fs::write(&spec, "{not json").unwrap();
    let o = fusionlens(&["report", "--manifest", &f.manifest(), "--spec", &spec, "--out", &out]);
    assert_eq!(code(&o), 1);
}

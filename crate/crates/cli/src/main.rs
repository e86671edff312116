//! `fusionlens` command-line front end.
//!
//! Exit codes: 0 success, 1 user error, 2 data error, 3 I/O or internal error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use log::warn;
use rayon::prelude::*;

use fusionlens::analysis::{render_table, representation_iou, PairStatus};
use fusionlens::similarity::{cka_cross_level, cka_cross_modal};
use fusionlens::{
    cam_for_sample, concept_iou, emit_report, generate_probe_dataset, load_manifest, npy, open_activation_set,
    render_heatmap, run_protocol, save_embedding, semantic_variance, train_concept_embedding,
    ComparisonSpec, ConceptEmbedding, Error, FeatureCache, LabelCache, LabelSet, Pooling, ProbeManifest,
    ProbeTrainConfig, ProtocolOptions, ReportFormat, Selector, SynthConfig, Underlay,
};

#[derive(Parser)]
#[command(name = "fusionlens", version, about = "Concept probing, semantic variance, CKA and Grad-CAM for fusion models")]
struct Cli {
    /// Worker threads; defaults to the number of logical cores. `--jobs 1` runs fully serially.
    #[arg(long, global = true, value_parser = clap::value_parser!(u32).range(1..))]
    jobs: Option<u32>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train concept probes on one layer and store the embeddings under the dump root.
    ProbeTrain(ProbeTrainArgs),
    /// Semantic variance of a target representation relative to a reference.
    Svar(SvarArgs),
    /// Linear CKA between two models per layer, or across the layers of one model.
    Cka(CkaArgs),
    /// Render Grad-CAM heatmaps from dumped concept gradients.
    Cam(CamArgs),
    /// Run a comparison spec and write the report directory.
    Report(ReportArgs),
    /// Generate a synthetic probe dataset.
    Synth(SynthArgs),
}

#[derive(Args)]
struct ProbeTrainArgs {
    /// Probe manifest (JSON).
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    model: String,
    #[arg(long)]
    layer: String,
    /// `all`, or a comma-separated list of concept ids.
    #[arg(long, default_value = "all")]
    concepts: String,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the trained embeddings as JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SvarArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Target selector, `model:layer` or `cat(SEL,SEL)`.
    #[arg(long)]
    target: String,
    /// Reference selector.
    #[arg(long)]
    reference: String,
    /// Weight of emergent and vanished concepts.
    #[arg(long, default_value_t = 2.0)]
    lambda: f64,
    /// Mask binarization threshold.
    #[arg(long, default_value_t = 0.5)]
    tau: f64,
    /// Write the full per-concept report as JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CkaArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// First model of a per-layer comparison.
    #[arg(long, requires = "b", conflicts_with = "cross_level")]
    a: Option<String>,
    /// Second model of a per-layer comparison.
    #[arg(long, requires = "a")]
    b: Option<String>,
    /// Compare every pair of layers of this model instead.
    #[arg(long, required_unless_present = "a")]
    cross_level: Option<String>,
    /// Comma-separated layer ids; defaults to every layer of the model(s).
    #[arg(long, value_delimiter = ',')]
    layers: Vec<String>,
    /// `spatial_mean`, `flatten` or `subsample:<k>[:<seed>]`.
    #[arg(long, default_value = "spatial_mean")]
    pooling: String,
    /// Write the result as JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CamArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    model: String,
    #[arg(long)]
    layer: String,
    #[arg(long)]
    concept: i32,
    /// `all`, or a comma-separated list of sample ids.
    #[arg(long, default_value = "all")]
    samples: String,
    /// Directory of `<sample>.npy` uint8 images to blend under the maps.
    #[arg(long)]
    underlay_dir: Option<PathBuf>,
    /// Also write the raw maps to `cams.json`.
    #[arg(long)]
    json: bool,
    /// Output directory for `<sample>_concept<id>.png`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Comparison spec (JSON).
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Train and store missing probe embeddings instead of failing their pairs.
    #[arg(long)]
    auto_train: bool,
    /// Comma-separated subset of json, csv, text_table, svg_bars, svg_matrix.
    #[arg(long, value_delimiter = ',')]
    formats: Vec<String>,
}

#[derive(Args)]
struct SynthArgs {
    /// Generator configuration (JSON).
    #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
    config: Option<PathBuf>,
    /// Named configuration; only `small` exists.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    if let Some(n) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n as usize).build_global() {
            eprintln!("error: cannot start worker pool: {e}");
            return ExitCode::from(3);
        }
    }
    let result = match cli.command {
        Command::ProbeTrain(a) => probe_train(a),
        Command::Svar(a) => svar(a),
        Command::Cka(a) => cka(a),
        Command::Cam(a) => cam(a),
        Command::Report(a) => report(a),
        Command::Synth(a) => synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(Error::InvalidConfig(_) | Error::Selector { .. }) => 1,
        Some(Error::Io { .. } | Error::Png(_)) => 3,
        Some(_) => 2,
        None => 3,
    }
}

fn user_error(msg: impl Into<String>) -> anyhow::Error {
    Error::InvalidConfig(msg.into()).into()
}

fn open_manifest(path: &Path) -> Result<ProbeManifest> {
    if !path.is_file() {
        return Err(user_error(format!("manifest {} not found", path.display())));
    }
    Ok(load_manifest(path, true)?)
}

fn caches() -> (Arc<FeatureCache>, Arc<LabelCache>) {
    (Arc::new(FeatureCache::from_env()), Arc::new(LabelCache::from_env()))
}

/// Parse a JSON file supplied by the user; any failure is a user error.
fn read_user_json<T: serde::de::DeserializeOwned>(path: &Path, what: &str) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| user_error(format!("cannot read {what} {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| user_error(format!("bad {what} {}: {e}", path.display())))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).context("serializing output")?;
    text.push('\n');
    npy::write_atomic(path, text.as_bytes())?;
    Ok(())
}

fn concept_list(m: &ProbeManifest, labels: &LabelSet, spec: &str) -> Result<Vec<i32>> {
    if spec == "all" {
        let mut present = Vec::new();
        for &c in labels.concepts() {
            if labels.total(c)? > 0 {
                present.push(c);
            } else {
                warn!("concept {c} does not appear in the probe set; skipped");
            }
        }
        return Ok(present);
    }
    spec.split(',')
        .map(|s| {
            let c: i32 = s.trim().parse().map_err(|_| user_error(format!("bad concept id '{s}'")))?;
            if m.concept_name(c).is_none() {
                return Err(Error::UnknownConcept(c).into());
            }
            Ok(c)
        })
        .collect()
}

fn probe_train(args: ProbeTrainArgs) -> Result<()> {
    let cfg = ProbeTrainConfig {
        epochs: args.epochs,
        learning_rate: args.lr,
        seed: args.seed,
        ..ProbeTrainConfig::default()
    };
    cfg.validate()?;
    let m = open_manifest(&args.manifest)?;
    let (features, label_cache) = caches();
    let acts = open_activation_set(&m, &args.model, &args.layer, features)?;
    let labels = LabelSet::open(&m, label_cache)?;
    let concepts = concept_list(&m, &labels, &args.concepts)?;
    let trained: Vec<(ConceptEmbedding, f64)> = concepts
        .par_iter()
        .map(|&c| {
            let e = train_concept_embedding(&acts, &labels, c, &cfg)?;
            save_embedding(&m, &e)?;
            let iou = concept_iou(&e, &acts, &labels, cfg.tau)?;
            Ok((e, iou))
        })
        .collect::<fusionlens::Result<_>>()?;
    for (e, iou) in &trained {
        let name = m.concept_name(e.concept).unwrap_or("?");
        println!(
            "concept {} ({name}): final loss {:.6}, set IoU {iou:.4}",
            e.concept, e.final_loss
        );
    }
    if !trained.is_empty() {
        let mean = trained.iter().map(|t| t.1).sum::<f64>() / trained.len() as f64;
        println!("{} probes on {}:{}, mean set IoU {mean:.4}", trained.len(), args.model, args.layer);
    }
    if let Some(out) = &args.out {
        let embeddings: Vec<&ConceptEmbedding> = trained.iter().map(|t| &t.0).collect();
        write_json(out, &embeddings)?;
    }
    Ok(())
}

fn svar(args: SvarArgs) -> Result<()> {
    let target: Selector = args.target.parse()?;
    let reference: Selector = args.reference.parse()?;
    let m = open_manifest(&args.manifest)?;
    target.check(&m)?;
    reference.check(&m)?;
    let (features, label_cache) = caches();
    let labels = LabelSet::open(&m, label_cache)?;
    let proportions = fusionlens::concept_proportions(&labels);
    let d2 = representation_iou(&m, &target, &labels, args.tau, None, features.clone())?;
    let d1 = representation_iou(&m, &reference, &labels, args.tau, None, features)?;
    let r = semantic_variance(&d2, &d1, &proportions, args.lambda)?;
    let shown = format!("{:.2}", r.aggregate);
    println!("{}", if shown == "-0.00" { "0.00" } else { &shown });
    if let Some(out) = &args.out {
        write_json(out, &r)?;
    }
    Ok(())
}

fn model_layers(m: &ProbeManifest, model: &str) -> Result<Vec<String>> {
    let entry = m.model(model).ok_or_else(|| Error::UnknownModel(model.to_string()))?;
    Ok(m.model_layers(entry).map(|l| l.id.clone()).collect())
}

fn cka(args: CkaArgs) -> Result<()> {
    let pooling: Pooling = args.pooling.parse()?;
    let m = open_manifest(&args.manifest)?;
    let (features, _) = caches();
    if let Some(model) = &args.cross_level {
        let layers = if args.layers.is_empty() { model_layers(&m, model)? } else { args.layers.clone() };
        let mat = cka_cross_level(&m, model, &layers, pooling, features)?;
        let width = layers.iter().map(|l| l.len()).max().unwrap_or(0).max(6);
        print!("{:width$}", "");
        for l in &mat.cols {
            print!("  {l:>width$}");
        }
        println!();
        for (i, row) in mat.rows.iter().enumerate() {
            print!("{row:width$}");
            for j in 0..mat.cols.len() {
                print!("  {:>width$.4}", mat.get(i, j));
            }
            println!();
        }
        if let Some(out) = &args.out {
            write_json(out, &mat)?;
        }
    } else {
        let (a, b) = (args.a.as_deref().unwrap_or_default(), args.b.as_deref().unwrap_or_default());
        let layers = if args.layers.is_empty() { model_layers(&m, a)? } else { args.layers.clone() };
        let curve = cka_cross_modal(&m, a, b, &layers, pooling, features)?;
        for l in &curve {
            println!("{}  {:.4}", l.layer, l.cka);
        }
        if let Some(out) = &args.out {
            write_json(out, &curve)?;
        }
    }
    Ok(())
}

fn cam(args: CamArgs) -> Result<()> {
    let m = open_manifest(&args.manifest)?;
    if m.concept_name(args.concept).is_none() {
        return Err(Error::UnknownConcept(args.concept).into());
    }
    let (features, _) = caches();
    let acts = open_activation_set(&m, &args.model, &args.layer, features)?;
    let indices: Vec<usize> = if args.samples == "all" {
        (0..m.samples.len()).collect()
    } else {
        args.samples
            .split(',')
            .map(|s| {
                m.samples
                    .iter()
                    .position(|x| x == s.trim())
                    .ok_or_else(|| user_error(format!("unknown sample '{s}'")))
            })
            .collect::<Result<_>>()?
    };
    let maps = indices
        .par_iter()
        .map(|&i| -> Result<_> {
            let c = cam_for_sample(&m, &acts, args.concept, i)?;
            let underlay = match &args.underlay_dir {
                None => None,
                Some(dir) => {
                    let path = dir.join(format!("{}.npy", c.sample));
                    if !path.is_file() {
                        return Err(user_error(format!("no underlay {}", path.display())));
                    }
                    Some(Underlay::try_from(&npy::read_tensor(&path)?)?)
                }
            };
            let png = render_heatmap(&c, underlay.as_ref())?;
            let path = args.out.join(format!("{}_concept{}.png", c.sample, c.concept));
            npy::write_atomic(&path, &png)?;
            Ok(c)
        })
        .collect::<Result<Vec<_>>>()?;
    println!("wrote {} heatmaps to {}", maps.len(), args.out.display());
    if args.json {
        write_json(&args.out.join("cams.json"), &maps)?;
    }
    Ok(())
}

fn report(args: ReportArgs) -> Result<()> {
    let spec: ComparisonSpec = read_user_json(&args.spec, "spec")?;
    spec.validate()?;
    let formats: Vec<ReportFormat> = if args.formats.is_empty() {
        ReportFormat::ALL.to_vec()
    } else {
        args.formats.iter().map(|f| f.parse()).collect::<fusionlens::Result<_>>()?
    };
    let m = open_manifest(&args.manifest)?;
    let (features, labels) = caches();
    let opts = ProtocolOptions {
        auto_train: args.auto_train,
        features,
        labels,
    };
    let r = run_protocol(&m, &spec, &opts)?;
    for p in r.pairs.iter().filter(|p| p.status == PairStatus::Failed) {
        warn!("pair '{}' failed: {}", p.spec.name, p.error.as_deref().unwrap_or(""));
    }
    let written = emit_report(&r, &args.out, &formats)?;
    print!("{}", render_table(&r));
    println!("wrote {} files to {}", written.len(), args.out.display());
    Ok(())
}

fn synth(args: SynthArgs) -> Result<()> {
    let cfg = match (&args.config, &args.preset) {
        (Some(path), _) => read_user_json::<SynthConfig>(path, "config")?,
        (None, Some(name)) => SynthConfig::preset(name)?,
        (None, None) => return Err(user_error("one of --config or --preset is required")),
    };
    cfg.validate()?;
    let m = generate_probe_dataset(&cfg, &args.out)?;
    println!(
        "wrote {} samples, {} concepts to {}",
        m.samples.len(),
        m.concepts.len(),
        args.out.join("manifest.json").display()
    );
    Ok(())
}

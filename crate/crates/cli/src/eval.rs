use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::Args;
use serde::Serialize;

use tidyhome_core::eval::{
    run_phase, write_report, BackendSpec, EmbedderSpec, EvalReport, ModelSpec, Phase, RunSpec,
};
use tidyhome_core::fixtures::FixtureSet;
use tidyhome_core::gateway::{sha256_hex, BackendConfig, OpenAiBackend};

use crate::config::{load_models, CliConfig};

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// task, kb or routing.
    #[arg(long, value_parser = crate::parse_phase)]
    phase: Phase,
    /// Models file (TOML `[[models]]` or JSON `{"models": [...]}`).
    #[arg(long)]
    models: Option<PathBuf>,
    /// Add a scripted model: a shipped script name or a script file. Repeatable.
    #[arg(long)]
    scripted: Vec<String>,
    #[arg(long)]
    reps: Option<u32>,
    /// Knowledge base: also run without retrieval, the whole history as context.
    #[arg(long)]
    no_rag: bool,
    /// Chunks retrieved per question.
    #[arg(long)]
    k: Option<usize>,
    /// Routing: score tool-less models through the keyword fallback.
    #[arg(long)]
    routing_fallback: bool,
    /// Restrict to these scenario, question or group ids. Repeatable.
    #[arg(long = "item")]
    items: Vec<String>,
    /// Worker threads; 1 runs sequentially, 0 uses every core.
    #[arg(long)]
    jobs: Option<usize>,
    /// Output directory for the report files and manifest.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Embeddings from an OpenAI-compatible server instead of the hash embedder.
    #[arg(long, requires = "embedder_model")]
    embedder_url: Option<String>,
    #[arg(long, requires = "embedder_url")]
    embedder_model: Option<String>,
}

#[derive(Serialize)]
struct ManifestFile {
    name: String,
    bytes: u64,
    sha256: String,
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    phase: &'static str,
    fixture_sha256: &'a str,
    spec: &'a RunSpec,
    files: Vec<ManifestFile>,
    warnings: &'a [String],
}

fn script_model_name(script: &str) -> String {
    Path::new(script)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| script.to_string())
}

fn build_spec(args: &EvalArgs, config: &CliConfig) -> anyhow::Result<RunSpec> {
    let mut models = match &args.models {
        Some(path) => load_models(path)?,
        None => Vec::new(),
    };
    models.extend(args.scripted.iter().map(|s| ModelSpec::scripted(&script_model_name(s), s.clone())));
    if models.is_empty() {
        models = config.models.clone();
    }
    if models.is_empty() {
        bail!("no models given: pass --models <file>, --scripted <script>, or list [[models]] in the config");
    }
    let mut spec = RunSpec::new(args.phase, models);
    if let Some(r) = args.reps.or(config.eval.repetitions) {
        spec.repetitions = r;
    }
    if let Some(k) = args.k.or(config.eval.k) {
        spec.k = k;
    }
    if let Some(j) = args.jobs.or(config.eval.jobs) {
        spec.jobs = j;
    }
    if let Some(m) = config.eval.max_transport_failures {
        spec.max_transport_failures = m;
    }
    spec.ablation = args.no_rag;
    spec.routing_fallback = args.routing_fallback;
    spec.items = args.items.clone();
    spec.embedder = match (&args.embedder_url, &args.embedder_model) {
        (Some(url), Some(model)) => EmbedderSpec::Openai(BackendConfig::new(url.clone(), model.clone())),
        _ => config.embedder.clone().unwrap_or_default(),
    };
    if args.no_rag && spec.phase != Phase::KnowledgeBase {
        bail!("--no-rag only applies to --phase kb");
    }
    spec.validate()?;
    Ok(spec)
}

/// Fails fast (exit 2) when a live backend is down, rather than recording
/// every run as invalid.
fn preflight(spec: &RunSpec) -> anyhow::Result<()> {
    let mut live: Vec<(&str, &BackendConfig)> = spec
        .models
        .iter()
        .filter_map(|m| match &m.backend {
            BackendSpec::Openai(cfg) => Some((m.name.as_str(), cfg)),
            BackendSpec::Scripted { .. } => None,
        })
        .collect();
    if let EmbedderSpec::Openai(cfg) = &spec.embedder {
        live.push(("embedder", cfg));
    }
    for (name, cfg) in live {
        OpenAiBackend::new(cfg.clone())
            .and_then(|b| b.ping())
            .with_context(|| format!("backend for {name} at {} is unreachable", cfg.base_url))?;
    }
    Ok(())
}

fn redacted(spec: &RunSpec) -> RunSpec {
    let mut spec = spec.clone();
    let strip = |b: &mut BackendSpec| {
        if let BackendSpec::Openai(cfg) = b {
            cfg.api_key = None;
        }
    };
    spec.models.iter_mut().for_each(|m| strip(&mut m.backend));
    if let Some(j) = spec.judge.as_mut() {
        strip(&mut j.backend);
    }
    if let EmbedderSpec::Openai(cfg) = &mut spec.embedder {
        cfg.api_key = None;
    }
    spec
}

fn write_manifest(dir: &Path, spec: &RunSpec, report: &EvalReport, files: &[PathBuf]) -> anyhow::Result<PathBuf> {
    let mut entries = Vec::new();
    for path in files {
        let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        entries.push(ManifestFile {
            name: path.file_name().unwrap_or_default().to_string_lossy().into_owned(),
            bytes: bytes.len() as u64,
            sha256: sha256_hex(&bytes),
        });
    }
    let spec = redacted(spec);
    let manifest = Manifest {
        tool: "tidyhome",
        version: env!("CARGO_PKG_VERSION"),
        phase: spec.phase.as_str(),
        fixture_sha256: &report.metadata.fixture_sha256,
        spec: &spec,
        files: entries,
        warnings: &report.warnings,
    };
    let path = dir.join("manifest.json");
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

pub fn run(args: EvalArgs, config: &CliConfig, fixtures: &FixtureSet) -> anyhow::Result<()> {
    let spec = build_spec(&args, config)?;
    preflight(&spec)?;
    let report = run_phase(&spec, fixtures)?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    let out = args
        .out
        .or(config.eval.out.clone())
        .unwrap_or_else(|| PathBuf::from("eval-out"));
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let files = write_report(&report, &out).with_context(|| format!("writing report to {}", out.display()))?;
    let manifest = write_manifest(&out, &spec, &report, &[files.text.clone(), files.json.clone(), files.csv.clone()])?;
    print!("{}", report.render_text());
    println!();
    for f in [&files.text, &files.json, &files.csv, &manifest] {
        println!("wrote {}", f.display());
    }
    Ok(())
}

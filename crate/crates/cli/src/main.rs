//! `tidyhome`: evaluation runs, a chat REPL, fixture checks and the server.
//!
//! Exit codes: 0 success, 1 invalid input or failed validation, 2 a model
//! backend could not be reached.

mod chat;
mod config;
mod eval;

use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use tidyhome_core::eval::{BackendSpec, EmbedderSpec, EvalError, Phase};
use tidyhome_core::fixtures::FixtureSet;
use tidyhome_core::gateway::{BackendConfig, GatewayError};
use tidyhome_core::simulator::ScenarioId;

use config::CliConfig;

#[derive(Debug, Parser)]
#[command(name = "tidyhome", version, about = "Household robot agent orchestration")]
struct Cli {
    /// TOML config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Fixture directory replacing the built-in fixtures.
    #[arg(long, global = true)]
    fixtures: Option<PathBuf>,
    /// More logging (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one evaluation phase and write its report files.
    Eval(eval::EvalArgs),
    /// Talk to a local session on stdin/stdout.
    Chat(chat::ChatArgs),
    /// Fixture maintenance.
    Fixtures {
        #[command(subcommand)]
        command: FixturesCommand,
    },
    /// Start the HTTP service.
    Serve(ServeArgs),
}

#[derive(Debug, Subcommand)]
enum FixturesCommand {
    /// Check every fixture invariant and that scripts cover all prompts.
    Validate {
        /// Extra script files to check for coverage.
        #[arg(long = "script")]
        scripts: Vec<String>,
    },
}

/// Chat backend selection shared by `chat` and `serve`.
#[derive(Debug, Clone, Args)]
struct BackendArgs {
    /// Scripted backend: a shipped script name or a script file.
    #[arg(long, conflicts_with_all = ["backend_url", "backend_model"])]
    scripted: Option<String>,
    /// OpenAI-compatible server, e.g. http://localhost:11434.
    #[arg(long, requires = "backend_model")]
    backend_url: Option<String>,
    #[arg(long, requires = "backend_url")]
    backend_model: Option<String>,
}

impl BackendArgs {
    fn resolve(&self, config: &CliConfig) -> BackendSpec {
        if let Some(script) = &self.scripted {
            return BackendSpec::Scripted { script: script.clone() };
        }
        if let (Some(url), Some(model)) = (&self.backend_url, &self.backend_model) {
            return BackendSpec::Openai(BackendConfig::new(url.clone(), model.clone()));
        }
        config.backend.clone().unwrap_or(BackendSpec::Scripted {
            script: "qwen_like".into(),
        })
    }
}

#[derive(Debug, Args)]
struct ServeArgs {
    #[arg(long)]
    host: Option<String>,
    /// 0 picks a free port; the bound address is printed.
    #[arg(long)]
    port: Option<u16>,
    /// Allowed browser origin (repeatable); `*` allows any.
    #[arg(long = "cors-origin")]
    cors_origins: Vec<String>,
    /// Journal each session's memory here.
    #[arg(long)]
    memory_dir: Option<PathBuf>,
    #[command(flatten)]
    backend: BackendArgs,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    init_logging(cli.verbose);
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => tracing::Level::WARN,
        1 => tracing::Level::INFO,
        _ => tracing::Level::DEBUG,
    };
    tracing_subscriber::fmt().with_max_level(level).with_writer(std::io::stderr).init();
}

fn exit_code(e: &anyhow::Error) -> u8 {
    let unreachable = e.chain().any(|c| {
        c.downcast_ref::<EvalError>().is_some_and(EvalError::is_unreachable)
            || c.downcast_ref::<GatewayError>().is_some_and(GatewayError::is_transport)
    });
    if unreachable {
        2
    } else {
        1
    }
}

fn load_fixtures(cli_dir: Option<&PathBuf>, config: &CliConfig) -> anyhow::Result<FixtureSet> {
    match cli_dir.or(config.fixtures.as_ref()) {
        Some(dir) => FixtureSet::load_dir(dir).with_context(|| format!("loading fixtures from {}", dir.display())),
        None => Ok(FixtureSet::builtin()),
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let config = match &cli.config {
        Some(p) => CliConfig::load(p)?,
        None => CliConfig::default(),
    };
    let fixtures = load_fixtures(cli.fixtures.as_ref(), &config)?;
    match cli.command {
        Command::Eval(args) => eval::run(args, &config, &fixtures),
        Command::Chat(args) => chat::run(args, &config, &fixtures),
        Command::Fixtures {
            command: FixturesCommand::Validate { scripts },
        } => validate_fixtures(&fixtures, &scripts),
        Command::Serve(args) => serve(args, &config, fixtures),
    }
}

fn validate_fixtures(fixtures: &FixtureSet, extra: &[String]) -> anyhow::Result<()> {
    fixtures.validate().context("fixture validation failed")?;
    let mut names = vec!["qwen_like".to_string(), "llama_like".to_string()];
    names.extend(extra.iter().cloned());
    let mut failed = false;
    for name in &names {
        let script = tidyhome_core::eval::load_script(name).with_context(|| format!("loading script {name}"))?;
        let gaps = fixtures.script_gaps(&script);
        if gaps.is_empty() {
            println!("script {name}: covers every fixture prompt");
        } else {
            failed = true;
            for g in gaps {
                println!("script {name}: missing {g}");
            }
        }
    }
    anyhow::ensure!(!failed, "scripts do not cover the fixtures");
    println!(
        "fixtures ok: {} scenarios, {} dialogue entries, {} questions, {} routing queries (sha256 {})",
        fixtures.scenarios.len(),
        fixtures.knowledge.dialogue.len(),
        fixtures.knowledge.questions.len(),
        fixtures.routing.queries.len(),
        fixtures.hash()
    );
    Ok(())
}

fn serve(args: ServeArgs, config: &CliConfig, fixtures: FixtureSet) -> anyhow::Result<()> {
    let host = args.host.or(config.service.host.clone()).unwrap_or_else(|| "127.0.0.1".into());
    let port = args.port.or(config.service.port).unwrap_or(8080);
    let mut cors = args.cors_origins;
    if cors.is_empty() {
        cors = config.service.cors_origins.clone();
    }
    let mut service = tidyhome_service::ServiceConfig {
        default_backend: args.backend.resolve(config),
        default_embedder: config.embedder.clone().unwrap_or(EmbedderSpec::Hash),
        fixtures: Arc::new(fixtures),
        memory_dir: args.memory_dir.or(config.service.memory_dir.clone()),
        ..Default::default()
    };
    if !cors.is_empty() {
        service.cors_origins = cors;
    }
    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind((host.as_str(), port))
            .await
            .with_context(|| format!("binding {host}:{port}"))?;
        println!("listening on http://{}", listener.local_addr()?);
        tidyhome_service::serve(service, listener).await?;
        Ok(())
    })
}

pub(crate) fn parse_scenario(s: &str) -> Result<ScenarioId, String> {
    ScenarioId::ALL
        .into_iter()
        .find(|id| id.as_str() == s)
        .ok_or_else(|| {
            let known: Vec<&str> = ScenarioId::ALL.iter().map(|i| i.as_str()).collect();
            format!("unknown scenario `{s}` (expected one of {})", known.join(", "))
        })
}

pub(crate) fn parse_phase(s: &str) -> Result<Phase, String> {
    s.parse()
}

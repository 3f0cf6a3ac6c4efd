use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::sync::Arc;

use anyhow::Context;
use clap::Args;

use tidyhome_core::domain::{parse_destination, DestinationId, Timestamp, UserRequest};
use tidyhome_core::eval::EmbedderSpec;
use tidyhome_core::fixtures::FixtureSet;
use tidyhome_core::historian::ContextMode;
use tidyhome_core::orchestrator::{AgentBackends, Session, SessionConfig, TurnRecord, TurnResult};
use tidyhome_core::simulator::ScenarioId;

use crate::config::CliConfig;
use crate::BackendArgs;

#[derive(Debug, Args)]
pub struct ChatArgs {
    #[arg(long, value_parser = crate::parse_scenario, default_value = "dining_table")]
    scenario: ScenarioId,
    #[command(flatten)]
    backend: BackendArgs,
    /// Execute OBJECT at DEST whatever the plan says, e.g. Jacket=trash_can. Repeatable.
    #[arg(long = "inject", value_parser = parse_injection)]
    inject: Vec<(String, DestinationId)>,
    /// Answer history questions from the whole dialogue instead of retrieval.
    #[arg(long)]
    no_rag: bool,
    /// Print the retrieved evidence under each answer.
    #[arg(long)]
    evidence: bool,
}

fn parse_injection(s: &str) -> Result<(String, DestinationId), String> {
    let (obj, dest) = s.split_once('=').ok_or("expected OBJECT=DESTINATION")?;
    let dest = parse_destination(dest).map_err(|e| e.to_string())?;
    Ok((obj.trim().to_string(), dest))
}

const HELP: &str = "commands: /scenario <id>, /world, /history, /help, /quit";

pub fn run(args: ChatArgs, config: &CliConfig, fixtures: &FixtureSet) -> anyhow::Result<()> {
    let chat = args.backend.resolve(config).connect().context("connecting chat backend")?;
    let embedder = config
        .embedder
        .clone()
        .unwrap_or(EmbedderSpec::Hash)
        .connect()
        .context("connecting embedder")?;
    let mut session_config = SessionConfig::new(AgentBackends::uniform(chat, embedder));
    session_config.prompts = Arc::new(fixtures.prompts.clone());
    session_config.error_injection = args.inject.into_iter().collect::<BTreeMap<_, _>>();
    if args.no_rag {
        session_config.historian.mode = ContextMode::FullHistory;
    }
    let mut session = Session::new("cli", args.scenario, session_config);
    for s in &fixtures.scenarios {
        session.load_scenario(s.clone());
    }
    session.set_scenario(args.scenario);

    let stdin = std::io::stdin();
    let mut out = std::io::stdout().lock();
    writeln!(out, "scenario {}; {HELP}", args.scenario.as_str())?;
    for line in stdin.lock().lines() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        match line.split_once(' ').map_or((line, ""), |(c, r)| (c, r.trim())) {
            ("/quit" | "/exit", _) => break,
            ("/help", _) => writeln!(out, "{HELP}")?,
            ("/scenario", id) => match crate::parse_scenario(id) {
                Ok(id) => {
                    session.set_scenario(id);
                    writeln!(out, "scenario {}", id.as_str())?;
                }
                Err(e) => writeln!(out, "{e}")?,
            },
            ("/world", _) => {
                for (object, location) in &session.world().placements {
                    writeln!(out, "  {object}: {location}")?;
                }
            }
            ("/history", _) => {
                for e in session.history() {
                    writeln!(out, "  #{} [{}] {} -> {}", e.entry_id, e.timestamp, e.question, e.answer)?;
                }
            }
            _ => {
                let request = UserRequest::new(line, "cli", Timestamp::now())?;
                let record = session.handle_turn(&request);
                print_turn(&mut out, &record, args.evidence)?;
            }
        }
        out.flush()?;
    }
    Ok(())
}

fn print_turn(out: &mut impl Write, record: &TurnRecord, evidence: bool) -> std::io::Result<()> {
    match &record.result {
        TurnResult::Plan(p) => {
            writeln!(out, "robot: {}", p.narration)?;
            for w in &p.warnings {
                writeln!(out, "  (warning: {})", serde_json::to_string(w).unwrap_or_default())?;
            }
        }
        TurnResult::Answer(a) => {
            writeln!(out, "robot: {}", a.answer)?;
            if evidence {
                for h in &a.provenance.hits {
                    writeln!(out, "  [{:.3}] {}", h.score, h.rendered_text)?;
                }
            }
        }
        TurnResult::Clarification { prompt } => writeln!(out, "robot: {prompt}")?,
        TurnResult::Failed(f) => writeln!(out, "error ({}): {}", f.stage.as_str(), f.message)?,
    }
    Ok(())
}

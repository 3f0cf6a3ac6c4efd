//! Versioned prompt pack: the plain-text prompts and tool specs every agent uses.
//!
//! The default pack is compiled in from `fixtures/prompts/`; a directory with
//! the same file names can be loaded at runtime to tune prompts without a
//! rebuild.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::DestinationId;
use crate::gateway::ToolSpec;

pub const TOOL_TASK_PLANNER: &str = "transfer_to_task_planner";
pub const TOOL_KNOWLEDGE_BASE: &str = "transfer_to_knowledge_base";
pub const TOOL_CLARIFY: &str = "ask_clarification";

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("reading prompt pack file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid tool specs: {0}")]
    Tools(String),
    #[error("prompt pack invariant violated: {0}")]
    Invariant(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouterPromptConfig {
    pub system_prompt: String,
    pub keyword_instruction: String,
    pub tools: Vec<ToolSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannerPromptConfig {
    pub system_prompt: String,
    pub format_instruction: String,
    pub retry_instruction: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistorianPromptConfig {
    pub system_prompt: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptPack {
    pub version: String,
    pub router: RouterPromptConfig,
    pub planner: PlannerPromptConfig,
    pub historian: HistorianPromptConfig,
}

const FILES: [&str; 8] = [
    "VERSION",
    "router_system.txt",
    "router_keyword_instruction.txt",
    "router_tools.json",
    "planner_system.txt",
    "planner_format.txt",
    "planner_retry.txt",
    "historian_system.txt",
];

const EMBEDDED: [&str; 8] = [
    include_str!("../fixtures/prompts/VERSION"),
    include_str!("../fixtures/prompts/router_system.txt"),
    include_str!("../fixtures/prompts/router_keyword_instruction.txt"),
    include_str!("../fixtures/prompts/router_tools.json"),
    include_str!("../fixtures/prompts/planner_system.txt"),
    include_str!("../fixtures/prompts/planner_format.txt"),
    include_str!("../fixtures/prompts/planner_retry.txt"),
    include_str!("../fixtures/prompts/historian_system.txt"),
];

impl PromptPack {
    /// The pack shipped with the crate.
    pub fn builtin() -> Self {
        Self::from_parts(EMBEDDED.map(str::to_string)).expect("builtin prompt pack is valid")
    }

    pub fn load_dir(dir: &Path) -> Result<Self, PromptError> {
        let mut parts: [String; 8] = Default::default();
        for (slot, name) in parts.iter_mut().zip(FILES) {
            let path = dir.join(name);
            *slot = std::fs::read_to_string(&path).map_err(|source| PromptError::Io {
                path: path.display().to_string(),
                source,
            })?;
        }
        Self::from_parts(parts)
    }

    fn from_parts(parts: [String; 8]) -> Result<Self, PromptError> {
        let [version, router_system, keyword, tools, planner_system, format, retry, historian] =
            parts;
        let tools: Vec<ToolSpec> =
            serde_json::from_str(&tools).map_err(|e| PromptError::Tools(e.to_string()))?;
        let pack = PromptPack {
            version: version.trim().to_string(),
            router: RouterPromptConfig {
                system_prompt: router_system.trim_end().to_string(),
                keyword_instruction: keyword.trim().to_string(),
                tools,
            },
            planner: PlannerPromptConfig {
                system_prompt: planner_system.trim_end().to_string(),
                format_instruction: format.trim_end().to_string(),
                retry_instruction: retry.trim().to_string(),
            },
            historian: HistorianPromptConfig {
                system_prompt: historian.trim_end().to_string(),
            },
        };
        pack.validate()?;
        Ok(pack)
    }

    pub fn validate(&self) -> Result<(), PromptError> {
        self.router.validate()?;
        self.planner.validate()?;
        self.historian.validate()
    }
}

impl RouterPromptConfig {
    pub fn validate(&self) -> Result<(), PromptError> {
        let mut names: Vec<&str> = self.tools.iter().map(|t| t.name.as_str()).collect();
        names.sort_unstable();
        let mut expected = [TOOL_CLARIFY, TOOL_KNOWLEDGE_BASE, TOOL_TASK_PLANNER];
        expected.sort_unstable();
        if names != expected {
            return Err(PromptError::Invariant(format!(
                "router needs exactly the tools {expected:?}, found {names:?}"
            )));
        }
        Ok(())
    }
}

impl PlannerPromptConfig {
    pub fn validate(&self) -> Result<(), PromptError> {
        for d in DestinationId::PLACEMENTS {
            let line = format!("{} – {}", d.label(), d.definition());
            if !self.system_prompt.contains(&line) {
                return Err(PromptError::Invariant(format!(
                    "planner prompt lacks destination definition `{line}`"
                )));
            }
        }
        if !self.format_instruction.contains("\"tasks\"") {
            return Err(PromptError::Invariant("format instruction lacks the plan schema".into()));
        }
        Ok(())
    }
}

impl HistorianPromptConfig {
    pub fn validate(&self) -> Result<(), PromptError> {
        let lower = self.system_prompt.to_lowercase();
        if !(lower.contains("only from the provided history") && lower.contains("do not make up")) {
            return Err(PromptError::Invariant(
                "historian prompt lacks the no-fabrication instruction".into(),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_pack_is_valid() {
        let p = PromptPack::builtin();
        assert_eq!(p.version, "tidyhome-prompts/1");
        assert_eq!(p.router.tools.len(), 3);
    }

    #[test]
    fn missing_destination_definition_is_rejected() {
        let mut p = PromptPack::builtin();
        p.planner.system_prompt = p.planner.system_prompt.replace("For perishable food.", "");
        assert!(p.validate().is_err());
    }

    #[test]
    fn router_needs_three_unique_tools() {
        let mut p = PromptPack::builtin();
        p.router.tools.pop();
        assert!(p.validate().is_err());
        let mut p = PromptPack::builtin();
        p.router.tools[2] = p.router.tools[0].clone();
        assert!(p.validate().is_err());
    }

    #[test]
    fn historian_needs_no_fabrication_rule() {
        let mut p = PromptPack::builtin();
        p.historian.system_prompt = "Answer questions.".into();
        assert!(p.validate().is_err());
    }

    #[test]
    fn load_dir_matches_builtin() {
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/prompts");
        assert_eq!(PromptPack::load_dir(&dir).unwrap(), PromptPack::builtin());
    }
}

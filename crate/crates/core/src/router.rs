//! Routing agent: classifies each request as an action command, a history
//! query, or something that needs clarification.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{RouteCategory, RouteDecision, RouteProvenance, UserRequest};
use crate::gateway::{ChatBackend, ChatMessage, GatewayError};
use crate::metrics::Rate;
use crate::prompts::{RouterPromptConfig, TOOL_CLARIFY, TOOL_KNOWLEDGE_BASE, TOOL_TASK_PLANNER};

pub const GENERIC_CLARIFICATION: &str =
    "I'm not sure what you would like me to do. Could you rephrase your request?";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RouterError {
    #[error("routing undecidable: backend reply carried neither a handoff nor a category keyword: {reply:?}")]
    RoutingUndecidable { reply: String },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

/// How the routing agent is asked to answer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoutingMode {
    /// Handoff tools are offered; plain-text replies still get the keyword parser.
    Tools,
    /// No tools; the model must answer with a category keyword.
    Keyword,
}

pub fn build_messages(
    request: &UserRequest,
    config: &RouterPromptConfig,
    mode: RoutingMode,
) -> Vec<ChatMessage> {
    let system = match mode {
        RoutingMode::Tools => config.system_prompt.clone(),
        RoutingMode::Keyword => format!("{}\n\n{}", config.system_prompt, config.keyword_instruction),
    };
    vec![ChatMessage::system(system), ChatMessage::user(request.text.clone())]
}

pub fn route(
    request: &UserRequest,
    config: &RouterPromptConfig,
    backend: &dyn ChatBackend,
    mode: RoutingMode,
) -> Result<RouteDecision, RouterError> {
    let messages = build_messages(request, config, mode);
    let tools = match mode {
        RoutingMode::Tools => config.tools.as_slice(),
        RoutingMode::Keyword => &[],
    };
    let reply = backend.chat(&messages, tools)?;
    interpret_reply(&reply)
}

/// Maps a routing reply onto a decision. Tool calls win over text.
pub fn interpret_reply(reply: &ChatMessage) -> Result<RouteDecision, RouterError> {
    for call in &reply.tool_calls {
        match call.name.as_str() {
            TOOL_TASK_PLANNER => {
                return Ok(RouteDecision::routed(
                    RouteCategory::ActionCommand,
                    RouteProvenance::ToolCall,
                ))
            }
            TOOL_KNOWLEDGE_BASE => {
                return Ok(RouteDecision::routed(
                    RouteCategory::HistoryQuery,
                    RouteProvenance::ToolCall,
                ))
            }
            TOOL_CLARIFY => {
                let question = call
                    .arguments
                    .get("question")
                    .and_then(|q| q.as_str())
                    .unwrap_or_default();
                return Ok(RouteDecision::unclear(question, RouteProvenance::ToolCall));
            }
            _ => {}
        }
    }
    match parse_keyword(&reply.content) {
        Some(RouteCategory::Unclear) => {
            let prompt = strip_keyword(&reply.content);
            Ok(RouteDecision::unclear(prompt, RouteProvenance::KeywordFallback))
        }
        Some(category) => Ok(RouteDecision::routed(category, RouteProvenance::KeywordFallback)),
        None => Err(RouterError::RoutingUndecidable {
            reply: reply.content.clone(),
        }),
    }
}

const KEYWORDS: [(&str, RouteCategory); 3] = [
    ("ACTION", RouteCategory::ActionCommand),
    ("HISTORY", RouteCategory::HistoryQuery),
    ("UNCLEAR", RouteCategory::Unclear),
];

fn words(text: &str) -> impl Iterator<Item = &str> {
    text.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty())
}

/// Finds the single category keyword in a text reply.
///
/// Upper-case keywords are looked for first; a reply naming more than one
/// distinct category is ambiguous and yields `None`.
pub fn parse_keyword(text: &str) -> Option<RouteCategory> {
    let unique = |case_sensitive: bool| {
        let mut found: Option<RouteCategory> = None;
        for w in words(text) {
            let hit = KEYWORDS.iter().find(|(k, _)| {
                if case_sensitive {
                    w == *k
                } else {
                    w.eq_ignore_ascii_case(k)
                }
            });
            if let Some((_, cat)) = hit {
                match found {
                    Some(prev) if prev != *cat => return Err(()),
                    _ => found = Some(*cat),
                }
            }
        }
        Ok(found)
    };
    match unique(true) {
        Ok(Some(c)) => Some(c),
        Err(()) => None,
        Ok(None) => unique(false).ok().flatten(),
    }
}

fn strip_keyword(text: &str) -> String {
    let rest = text.trim().trim_start_matches(|c: char| !c.is_alphanumeric());
    let rest = match rest.get(..7) {
        Some(head) if head.eq_ignore_ascii_case("unclear") => &rest[7..],
        _ => "",
    };
    rest.trim_start_matches(|c: char| c == ':' || c == '-' || c == '.' || c.is_whitespace())
        .trim()
        .to_string()
}

/// Percentage of decisions whose category matched the expected one.
pub fn score_routing(decisions: &[(RouteCategory, RouteCategory)]) -> Rate {
    Rate::from_bools(decisions.iter().map(|(expected, actual)| expected == actual))
}

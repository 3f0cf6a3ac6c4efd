//! Task planning agent: prompt construction, plan extraction and validation.
//!
//! Agents answer in free text that must contain one JSON document of the form
//! `{"tasks":[{"objects":[...],"destination":"..."}]}`. Extraction prefers
//! fenced code blocks, then falls back to a balanced-brace scan over the whole
//! reply. Both passes are linear in the reply length.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::domain::{
    fold, match_object, parse_destination, DestinationId, DomainError, ObjectObservation,
    TaskPlan, TaskStep, UserRequest,
};
use crate::gateway::{ChatBackend, ChatMessage, GatewayError, Role};
use crate::prompts::PlannerPromptConfig;

#[derive(Debug, Error, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "detail", rename_all = "snake_case")]
pub enum ExtractError {
    #[error("no JSON document found in the reply")]
    NoJsonFound,
    #[error("malformed plan: {0}")]
    MalformedPlan(String),
    #[error("unknown destination `{0}`")]
    UnknownDestination(String),
}

impl ExtractError {
    /// Format failures get one corrective retry; content failures do not.
    pub fn is_format_failure(&self) -> bool {
        matches!(self, ExtractError::NoJsonFound | ExtractError::MalformedPlan(_))
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlannerError {
    #[error("planning failed after {} attempt(s): {error}", replies.len())]
    PlanningFailed {
        error: ExtractError,
        replies: Vec<String>,
    },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PlanWarning {
    UnknownObject { name: String },
    DuplicateAssignment { object: String, kept: DestinationId },
    EmptyStepDropped { destination: DestinationId },
    EmptyPlan,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanExtraction {
    pub plan: TaskPlan,
    pub warnings: Vec<PlanWarning>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanOutcome {
    pub extraction: PlanExtraction,
    /// Number of chat calls made (1, or 2 after a corrective retry).
    pub attempts: u32,
    pub transcript: Vec<ChatMessage>,
}

pub fn build_prompt(
    objects: &[ObjectObservation],
    request: &UserRequest,
    config: &PlannerPromptConfig,
) -> Vec<ChatMessage> {
    assert!(!objects.is_empty(), "planner needs at least one observed object");
    let system = format!("{}\n\n{}", config.system_prompt, config.format_instruction);
    let mut user = String::from("Observed objects:\n");
    for (i, o) in objects.iter().enumerate() {
        user.push_str(&format!("{}. {}\n", i + 1, o.name));
    }
    user.push_str("\nRequest: ");
    user.push_str(&request.text);
    vec![ChatMessage::system(system), ChatMessage::user(user)]
}

/// Calls `f` on every balanced top-level `{...}` span of `text`, in order,
/// until it returns `true`. Braces inside JSON strings are ignored.
fn scan_objects(text: &str, mut f: impl FnMut(&str) -> bool) {
    let bytes = text.as_bytes();
    let (mut depth, mut start) = (0usize, 0usize);
    let (mut in_string, mut escaped) = (false, false);
    for (i, &b) in bytes.iter().enumerate() {
        if depth == 0 {
            if b == b'{' {
                depth = 1;
                start = i;
            }
            continue;
        }
        if in_string {
            match (escaped, b) {
                (true, _) => escaped = false,
                (false, b'\\') => escaped = true,
                (false, b'"') => in_string = false,
                _ => {}
            }
            continue;
        }
        match b {
            b'"' => in_string = true,
            b'{' => depth += 1,
            b'}' => {
                depth -= 1;
                if depth == 0 && f(&text[start..=i]) {
                    return;
                }
            }
            _ => {}
        }
    }
}

/// Bodies of ``` fenced blocks, in order. An unterminated fence runs to the end.
fn fenced_blocks(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut rest = text;
    while let Some(open) = rest.find("```") {
        let after = &rest[open + 3..];
        // Skip the info string (e.g. `json`) up to the end of the line.
        let body_start = after.find('\n').map(|n| n + 1).unwrap_or(after.len());
        let body = &after[body_start..];
        match body.find("```") {
            Some(close) => {
                out.push(&body[..close]);
                rest = &body[close + 3..];
            }
            None => {
                out.push(body);
                break;
            }
        }
    }
    out
}

enum Located {
    Plan(serde_json::Map<String, Value>),
    OtherJson,
    Nothing,
}

/// First JSON object carrying `tasks` in `text`, and whether any JSON object was seen.
fn first_plan(text: &str) -> (Option<serde_json::Map<String, Value>>, bool) {
    let (mut plan, mut any_json) = (None, false);
    scan_objects(text, |candidate| match serde_json::from_str::<Value>(candidate) {
        Ok(Value::Object(map)) if map.contains_key("tasks") => {
            plan = Some(map);
            true
        }
        Ok(_) => {
            any_json = true;
            false
        }
        Err(_) => false,
    });
    (plan, any_json)
}

fn locate(text: &str) -> Located {
    let mut any_json = false;
    for block in fenced_blocks(text) {
        let (plan, any) = first_plan(block);
        if let Some(map) = plan {
            return Located::Plan(map);
        }
        any_json |= any;
    }
    let (plan, any) = first_plan(text);
    match plan {
        Some(map) => Located::Plan(map),
        None if any_json || any => Located::OtherJson,
        None => Located::Nothing,
    }
}

fn as_object_names(value: &Value, task: usize) -> Result<Vec<String>, ExtractError> {
    match value {
        Value::String(s) => Ok(vec![s.clone()]),
        Value::Array(items) => items
            .iter()
            .map(|v| {
                v.as_str().map(str::to_string).ok_or_else(|| {
                    ExtractError::MalformedPlan(format!("task {task}: object names must be strings"))
                })
            })
            .collect(),
        _ => Err(ExtractError::MalformedPlan(format!(
            "task {task}: `objects` must be a list of names"
        ))),
    }
}

/// Locates the plan document in `text` and parses it into raw
/// `(object names, destination)` steps, without checking the names against
/// any object list.
pub fn parse_document(text: &str) -> Result<Vec<(Vec<String>, DestinationId)>, ExtractError> {
    let map = match locate(text) {
        Located::Plan(map) => map,
        Located::OtherJson => {
            return Err(ExtractError::MalformedPlan("JSON document has no `tasks` field".into()))
        }
        Located::Nothing => return Err(ExtractError::NoJsonFound),
    };
    let tasks = map["tasks"]
        .as_array()
        .ok_or_else(|| ExtractError::MalformedPlan("`tasks` must be a list".into()))?;

    // Parse the whole document before resolving objects so that schema
    // errors are reported regardless of position.
    let mut raw_steps = Vec::with_capacity(tasks.len());
    for (i, task) in tasks.iter().enumerate() {
        let task = task
            .as_object()
            .ok_or_else(|| ExtractError::MalformedPlan(format!("task {i} is not an object")))?;
        let names = as_object_names(
            task.get("objects")
                .ok_or_else(|| ExtractError::MalformedPlan(format!("task {i} lacks `objects`")))?,
            i,
        )?;
        let dest_text = task
            .get("destination")
            .and_then(Value::as_str)
            .ok_or_else(|| {
                ExtractError::MalformedPlan(format!("task {i} lacks a string `destination`"))
            })?;
        let destination = parse_destination(dest_text).map_err(|e| match e {
            DomainError::UnknownDestination(d) => ExtractError::UnknownDestination(d),
            other => ExtractError::MalformedPlan(other.to_string()),
        })?;
        raw_steps.push((names, destination));
    }
    Ok(raw_steps)
}

/// Extracts and validates the plan carried by an agent reply.
pub fn extract_plan(
    reply: &ChatMessage,
    objects: &[ObjectObservation],
) -> Result<PlanExtraction, ExtractError> {
    debug_assert_eq!(reply.role, Role::Assistant);
    let text = &reply.content;
    let raw_steps = parse_document(text)?;

    let mut warnings = Vec::new();
    let mut claimed: BTreeMap<String, DestinationId> = BTreeMap::new();
    let mut steps = Vec::new();
    for (names, destination) in raw_steps {
        let mut kept = Vec::new();
        for name in names {
            let Some(obs) = match_object(objects, &name) else {
                warnings.push(PlanWarning::UnknownObject { name });
                continue;
            };
            match claimed.get(&fold(&obs.name)) {
                // Repeated within the same step.
                Some(_) if kept.contains(&obs.name) => {}
                Some(&first) => warnings.push(PlanWarning::DuplicateAssignment {
                    object: obs.name.clone(),
                    kept: first,
                }),
                None => {
                    claimed.insert(fold(&obs.name), destination);
                    kept.push(obs.name.clone());
                }
            }
        }
        if destination == DestinationId::Stationary {
            continue;
        }
        if kept.is_empty() {
            warnings.push(PlanWarning::EmptyStepDropped { destination });
        } else {
            steps.push(TaskStep {
                objects: kept,
                destination,
            });
        }
    }
    if steps.is_empty() {
        warnings.push(PlanWarning::EmptyPlan);
    }
    Ok(PlanExtraction {
        plan: TaskPlan {
            steps,
            raw_agent_text: text.clone(),
        },
        warnings,
    })
}

/// Builds the prompt, queries the backend and extracts the plan, with one
/// corrective retry when the reply is not a well-formed plan.
pub fn plan(
    request: &UserRequest,
    objects: &[ObjectObservation],
    config: &PlannerPromptConfig,
    backend: &dyn ChatBackend,
) -> Result<PlanOutcome, PlannerError> {
    let mut transcript = build_prompt(objects, request, config);
    let mut replies = Vec::new();
    loop {
        let reply = backend.chat(&transcript, &[])?;
        replies.push(reply.content.clone());
        let result = extract_plan(&reply, objects);
        transcript.push(reply);
        match result {
            Ok(extraction) => {
                return Ok(PlanOutcome {
                    extraction,
                    attempts: replies.len() as u32,
                    transcript,
                })
            }
            Err(e) if e.is_format_failure() && replies.len() == 1 => {
                transcript.push(ChatMessage::user(config.retry_instruction.clone()));
            }
            Err(error) => return Err(PlannerError::PlanningFailed { error, replies }),
        }
    }
}

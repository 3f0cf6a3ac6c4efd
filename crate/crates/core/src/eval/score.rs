//! Pure scoring functions: plan verdicts per object and answer validity.

use serde::{Deserialize, Serialize};

use crate::domain::{DestinationId, TaskPlan};
use crate::fixtures::{mentions, AnswerCheck, KnowledgeQuestion};
use crate::gateway::{ChatBackend, ChatMessage, GatewayError};
use crate::metrics::Rate;
use crate::simulator::Scenario;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectVerdict {
    pub object: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub assigned: Option<DestinationId>,
    pub strict: bool,
    pub lenient: bool,
}

/// Object-level verdicts for one run. `plan` is `None` when no valid plan
/// could be extracted, which makes every object incorrect.
pub fn score_plan(plan: Option<&TaskPlan>, scenario: &Scenario) -> Vec<ObjectVerdict> {
    scenario
        .objects
        .iter()
        .map(|object| {
            let gold = scenario.gold_for(object).expect("validated scenario has gold for every object");
            let Some(plan) = plan else {
                return ObjectVerdict {
                    object: object.clone(),
                    assigned: None,
                    strict: false,
                    lenient: false,
                };
            };
            let assigned = plan.destination_of(object);
            let (strict, lenient) = match assigned {
                // A stationary object must not receive any task.
                None => (gold.stationary, gold.stationary),
                Some(_) if gold.stationary => (false, false),
                Some(d) => (d == gold.destination, d == gold.destination || gold.lenient.contains(&d)),
            };
            ObjectVerdict {
                object: object.clone(),
                assigned,
                strict,
                lenient,
            }
        })
        .collect()
}

/// Validity of an answer: 0 or 1 for facts, the identified fraction for sets.
pub fn score_knowledge(answer: &str, question: &KnowledgeQuestion) -> Rate {
    match &question.check {
        AnswerCheck::Fact { accept, reject } => {
            let ok = accept.iter().any(|p| mentions(answer, p)) && !reject.iter().any(|p| mentions(answer, p));
            Rate::new(u64::from(ok), 1)
        }
        AnswerCheck::Set { expected } => Rate::from_bools(
            expected
                .iter()
                .map(|e| e.patterns.iter().any(|p| mentions(answer, p))),
        ),
    }
}

const JUDGE_SYSTEM: &str = "You grade answers given by a household robot about its own past actions. \
Follow the reply format exactly and add nothing else.";

/// Scores an answer with a judging model instead of patterns. Never used for
/// gating; live runs only.
pub fn judge_knowledge(
    answer: &str,
    question: &KnowledgeQuestion,
    judge: &dyn ChatBackend,
) -> Result<Rate, GatewayError> {
    let (task, den) = match &question.check {
        AnswerCheck::Fact { accept, reject } => (
            format!(
                "A correct answer conveys one of: {}. It must not claim: {}.\nReply CORRECT or INCORRECT.",
                accept.join("; "),
                if reject.is_empty() { "(nothing)".to_string() } else { reject.join("; ") }
            ),
            1u64,
        ),
        AnswerCheck::Set { expected } => (
            format!(
                "The expected objects are: {}.\nReply with a single integer: how many of them the answer names.",
                expected.iter().map(|e| e.object.as_str()).collect::<Vec<_>>().join(", ")
            ),
            expected.len() as u64,
        ),
    };
    let messages = [
        ChatMessage::system(JUDGE_SYSTEM),
        ChatMessage::user(format!("Question: {}\nAnswer: {answer}\n\n{task}", question.text)),
    ];
    let reply = judge.chat(&messages, &[])?.content;
    let reply = reply.trim();
    let num = match &question.check {
        AnswerCheck::Fact { .. } => {
            let upper = reply.to_uppercase();
            u64::from(upper.contains("CORRECT") && !upper.contains("INCORRECT"))
        }
        AnswerCheck::Set { .. } => reply
            .split(|c: char| !c.is_ascii_digit())
            .find(|t| !t.is_empty())
            .and_then(|t| t.parse::<u64>().ok())
            .ok_or_else(|| GatewayError::Protocol(format!("judge reply has no count: {reply:?}")))?
            .min(den),
    };
    Ok(Rate::new(num, den))
}

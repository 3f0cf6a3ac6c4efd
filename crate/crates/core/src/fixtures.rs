//! Evaluation fixtures: scenarios, the extended knowledge-base dialogue with
//! its questions, and routing gold labels — plus the cross-checks that keep
//! them consistent with each other.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{fold, DestinationId, RouteCategory, Timestamp, UserRequest};
use crate::gateway::{sha256_hex, ChatMessage, ScriptReply, ScriptedBackend};
use crate::historian::{self, ContextMode, HistorianOptions};
use crate::memory::{DialogueEntry, MemoryStore};
use crate::planner;
use crate::prompts::PromptPack;
use crate::router::{self, RoutingMode};
use crate::simulator::{Scenario, ScenarioId};

#[derive(Debug, Error)]
pub enum FixtureError {
    #[error("reading fixture {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("fixture {name}: {reason}")]
    Invalid { name: String, reason: String },
}

fn invalid(name: &str, reason: impl Into<String>) -> FixtureError {
    FixtureError::Invalid {
        name: name.to_string(),
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpectedObject {
    pub object: String,
    pub patterns: Vec<String>,
}

/// How an answer to a question is judged.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AnswerCheck {
    /// Correct iff some accept pattern and no reject pattern occurs.
    Fact {
        accept: Vec<String>,
        #[serde(default)]
        reject: Vec<String>,
    },
    /// Fraction of expected objects named in the answer.
    Set { expected: Vec<ExpectedObject> },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeQuestion {
    pub id: String,
    pub label: String,
    pub text: String,
    #[serde(flatten)]
    pub check: AnswerCheck,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OverrideTruth {
    pub spoken: DestinationId,
    pub executed: DestinationId,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeTruth {
    #[serde(default)]
    pub executed_overrides: BTreeMap<String, OverrideTruth>,
    #[serde(default)]
    pub never_moved: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeFixture {
    pub id: String,
    pub dialogue: Vec<DialogueEntry>,
    pub questions: Vec<KnowledgeQuestion>,
    #[serde(default)]
    pub truth: KnowledgeTruth,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoutingItem {
    pub text: String,
    pub expected: RouteCategory,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoutingGold {
    pub queries: Vec<RoutingItem>,
}

const KNOWLEDGE: &str = include_str!("../fixtures/knowledge/dialogue.json");
const ROUTING: &str = include_str!("../fixtures/routing/gold.json");
pub const QWEN_LIKE_SCRIPT: &str = include_str!("../fixtures/scripts/qwen_like.script");
pub const LLAMA_LIKE_SCRIPT: &str = include_str!("../fixtures/scripts/llama_like.script");

/// Lower-cases, maps every non-alphanumeric run to one space and pads with
/// spaces, so that substring tests respect word boundaries.
pub fn normalize(text: &str) -> String {
    let mut out = String::with_capacity(text.len() + 2);
    out.push(' ');
    let mut last_space = true;
    for c in text.chars().flat_map(char::to_lowercase) {
        // Apostrophes vanish so "didn't" and "didn’t" become "didnt".
        if c == '\'' || c == '’' {
            continue;
        }
        if c.is_alphanumeric() {
            out.push(c);
            last_space = false;
        } else if !last_space {
            out.push(' ');
            last_space = true;
        }
    }
    if !last_space {
        out.push(' ');
    }
    out
}

/// Normalized, word-bounded substring match.
pub fn mentions(text: &str, pattern: &str) -> bool {
    let p = normalize(pattern);
    !p.trim().is_empty() && normalize(text).contains(&p)
}

impl KnowledgeFixture {
    pub fn from_json(text: &str) -> Result<Self, FixtureError> {
        let k: KnowledgeFixture =
            serde_json::from_str(text).map_err(|e| invalid("knowledge", e.to_string()))?;
        k.validate()?;
        Ok(k)
    }

    pub fn builtin() -> Self {
        Self::from_json(KNOWLEDGE).expect("builtin knowledge fixture is valid")
    }

    pub fn question(&self, id: &str) -> Option<&KnowledgeQuestion> {
        self.questions.iter().find(|q| q.id == id)
    }

    /// Final location of every object moved in the dialogue, replaying the
    /// executed plans embedded in the answers in order.
    pub fn executed_locations(&self) -> BTreeMap<String, (String, DestinationId)> {
        let mut at = BTreeMap::new();
        for e in &self.dialogue {
            if let Ok(steps) = planner::parse_document(&e.answer) {
                for (objects, dest) in steps {
                    for o in objects {
                        at.insert(fold(&o), (o, dest));
                    }
                }
            }
        }
        at
    }

    pub fn validate(&self) -> Result<(), FixtureError> {
        let name = format!("knowledge/{}", self.id);
        let fail = |r: String| invalid(&name, r);
        if self.dialogue.is_empty() {
            return Err(fail("empty dialogue".into()));
        }
        let mut prev: Option<&DialogueEntry> = None;
        for (i, e) in self.dialogue.iter().enumerate() {
            if e.entry_id != i as u64 + 1 {
                return Err(fail(format!("entry ids must be dense from 1, found {} at {i}", e.entry_id)));
            }
            if e.question.trim().is_empty() || e.answer.trim().is_empty() {
                return Err(fail(format!("entry {} has an empty side", e.entry_id)));
            }
            if let Some(p) = prev {
                if e.timestamp <= p.timestamp {
                    return Err(fail(format!("entry {} is not later than its predecessor", e.entry_id)));
                }
            }
            prev = Some(e);
        }
        let ids: BTreeSet<&str> = self.questions.iter().map(|q| q.id.as_str()).collect();
        if ids.len() != self.questions.len() || self.questions.is_empty() {
            return Err(fail("question ids must be unique and non-empty".into()));
        }
        for q in &self.questions {
            match &q.check {
                AnswerCheck::Fact { accept, .. } if accept.is_empty() => {
                    return Err(fail(format!("{}: no accept patterns", q.id)))
                }
                AnswerCheck::Set { expected } if expected.is_empty() => {
                    return Err(fail(format!("{}: empty expected set", q.id)))
                }
                _ => {}
            }
        }

        // Cross-check the authored truth against the plans in the dialogue.
        let at = self.executed_locations();
        for (obj, t) in &self.truth.executed_overrides {
            match at.get(&fold(obj)) {
                Some((_, d)) if *d == t.executed => {}
                other => {
                    return Err(fail(format!(
                        "{obj}: executed location {:?} disagrees with truth {:?}",
                        other.map(|(_, d)| d),
                        t.executed
                    )))
                }
            }
            let told = format!("Moved {obj} to the {}.", spoken_phrase(t.spoken));
            if !self.dialogue.iter().any(|e| e.answer.contains(&told)) {
                return Err(fail(format!("{obj}: no answer tells the user `{told}`")));
            }
        }
        for obj in &self.truth.never_moved {
            if at.contains_key(&fold(obj)) {
                return Err(fail(format!("{obj} is supposed never to move")));
            }
        }
        if let Some(q) = self.question("trash_status") {
            let expected = expected_set(q);
            let actual: BTreeSet<String> = at
                .values()
                .filter(|(_, d)| *d == DestinationId::TrashCan)
                .map(|(o, _)| fold(o))
                .collect();
            if expected != actual {
                return Err(fail(format!("trash set {actual:?} differs from expected {expected:?}")));
            }
        }
        if let Some(q) = self.question("food_availability") {
            for obj in expected_set(q) {
                match at.get(&obj) {
                    Some((_, DestinationId::Fridge | DestinationId::FoodShelf)) => {}
                    _ => return Err(fail(format!("food `{obj}` is not stored in the dialogue"))),
                }
            }
        }
        Ok(())
    }
}

fn spoken_phrase(d: DestinationId) -> String {
    d.label().to_lowercase()
}

fn expected_set(q: &KnowledgeQuestion) -> BTreeSet<String> {
    match &q.check {
        AnswerCheck::Set { expected } => expected.iter().map(|e| fold(&e.object)).collect(),
        AnswerCheck::Fact { .. } => BTreeSet::new(),
    }
}

impl RoutingGold {
    pub fn from_json(text: &str) -> Result<Self, FixtureError> {
        let g: RoutingGold =
            serde_json::from_str(text).map_err(|e| invalid("routing", e.to_string()))?;
        g.validate()?;
        Ok(g)
    }

    pub fn builtin() -> Self {
        Self::from_json(ROUTING).expect("builtin routing fixture is valid")
    }

    pub fn validate(&self) -> Result<(), FixtureError> {
        if self.queries.is_empty() {
            return Err(invalid("routing", "no queries"));
        }
        let texts: BTreeSet<&str> = self.queries.iter().map(|q| q.text.as_str()).collect();
        if texts.len() != self.queries.len() {
            return Err(invalid("routing", "duplicate query text"));
        }
        if self.queries.iter().any(|q| q.expected == RouteCategory::Unclear) {
            return Err(invalid("routing", "gold labels must be action_command or history_query"));
        }
        Ok(())
    }
}

/// Everything an evaluation run reads, with a content hash for provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureSet {
    pub scenarios: Vec<Scenario>,
    pub knowledge: KnowledgeFixture,
    pub routing: RoutingGold,
    pub prompts: PromptPack,
}

impl FixtureSet {
    pub fn builtin() -> Self {
        Self {
            scenarios: Scenario::builtin_all(),
            knowledge: KnowledgeFixture::builtin(),
            routing: RoutingGold::builtin(),
            prompts: PromptPack::builtin(),
        }
    }

    /// Loads `scenarios/*.json`, `knowledge/dialogue.json` and
    /// `routing/gold.json` from `dir`; a `prompts/` directory, when present,
    /// replaces the builtin prompt pack.
    pub fn load_dir(dir: &Path) -> Result<Self, FixtureError> {
        let read = |rel: &str| {
            let path = dir.join(rel);
            std::fs::read_to_string(&path).map_err(|source| FixtureError::Io {
                path: path.display().to_string(),
                source,
            })
        };
        let mut scenarios = Vec::new();
        for id in ScenarioId::ALL {
            let text = read(&format!("scenarios/{id}.json"))?;
            let s = Scenario::from_json(&text).map_err(|e| invalid(&format!("scenarios/{id}"), e.to_string()))?;
            if s.id != id {
                return Err(invalid(&format!("scenarios/{id}"), format!("file declares id {}", s.id)));
            }
            scenarios.push(s);
        }
        let prompts_dir = dir.join("prompts");
        let prompts = if prompts_dir.is_dir() {
            PromptPack::load_dir(&prompts_dir).map_err(|e| invalid("prompts", e.to_string()))?
        } else {
            PromptPack::builtin()
        };
        let set = Self {
            scenarios,
            knowledge: KnowledgeFixture::from_json(&read("knowledge/dialogue.json")?)?,
            routing: RoutingGold::from_json(&read("routing/gold.json")?)?,
            prompts,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn scenario(&self, id: ScenarioId) -> &Scenario {
        self.scenarios.iter().find(|s| s.id == id).expect("all scenarios loaded")
    }

    /// SHA-256 over the canonical JSON of every fixture, hex encoded.
    pub fn hash(&self) -> String {
        let doc = serde_json::to_vec(self).expect("fixtures serialize");
        sha256_hex(&doc)
    }

    pub fn validate(&self) -> Result<(), FixtureError> {
        for s in &self.scenarios {
            s.validate().map_err(|e| invalid(&format!("scenarios/{}", s.id), e.to_string()))?;
        }
        self.knowledge.validate()?;
        self.routing.validate()?;
        self.prompts.validate().map_err(|e| invalid("prompts", e.to_string()))?;
        // Every scenario command is a routing item labelled as an action.
        for s in &self.scenarios {
            if !self
                .routing
                .queries
                .iter()
                .any(|q| q.text == s.command && q.expected == RouteCategory::ActionCommand)
            {
                return Err(invalid("routing", format!("command of {} is not a gold action", s.id)));
            }
        }
        for q in &self.knowledge.questions {
            if !self
                .routing
                .queries
                .iter()
                .any(|r| r.text == q.text && r.expected == RouteCategory::HistoryQuery)
            {
                return Err(invalid("routing", format!("question {} is not a gold history query", q.id)));
            }
        }
        Ok(())
    }

    /// Checks that `script` has a reply for every transcript an evaluation
    /// over these fixtures produces. Returns the uncovered prompts.
    pub fn script_gaps(&self, script: &ScriptedBackend) -> Vec<String> {
        let mut gaps = Vec::new();
        let at = Timestamp::from_unix(0);
        let req = |text: &str| UserRequest::new(text, "fixture-check", at).expect("non-empty");
        for item in &self.routing.queries {
            for mode in [RoutingMode::Tools, RoutingMode::Keyword] {
                let msgs = router::build_messages(&req(&item.text), &self.prompts.router, mode);
                if script.lookup(&msgs).is_none() {
                    gaps.push(format!("router ({mode:?}): {}", item.text));
                }
            }
        }
        for s in &self.scenarios {
            let msgs = planner::build_prompt(&s.observe(), &req(&s.command), &self.prompts.planner);
            if !is_text_reply(script.lookup(&msgs)) {
                gaps.push(format!("planner: {}", s.id));
            }
        }
        let store = MemoryStore::new();
        let embedder = crate::gateway::HashEmbedder::new();
        store
            .ingest(&self.knowledge.dialogue, &embedder)
            .expect("validated dialogue ingests");
        for q in &self.knowledge.questions {
            for mode in [ContextMode::Rag, ContextMode::FullHistory] {
                let options = HistorianOptions {
                    mode,
                    ..Default::default()
                };
                let k = match mode {
                    ContextMode::Rag => options.k,
                    ContextMode::FullHistory => store.len(),
                };
                let provenance = store.retrieve(&q.text, k, &embedder).expect("store is non-empty");
                let msgs: Vec<ChatMessage> =
                    historian::build_messages(&req(&q.text), &provenance, &self.prompts.historian, options);
                if !is_text_reply(script.lookup(&msgs)) {
                    gaps.push(format!("historian ({mode:?}): {}", q.id));
                }
            }
        }
        gaps
    }
}

fn is_text_reply(reply: Option<ScriptReply>) -> bool {
    reply.is_some_and(|r| r.tool_calls.is_empty() && !r.content.trim().is_empty())
}

/// Validates the builtin fixtures and scripts.
pub fn validate_all() -> Result<(), FixtureError> {
    let set = FixtureSet::builtin();
    set.validate()?;
    for (name, text) in [("qwen_like", QWEN_LIKE_SCRIPT), ("llama_like", LLAMA_LIKE_SCRIPT)] {
        let script = ScriptedBackend::from_json(name, text).map_err(|e| invalid(name, e.to_string()))?;
        let gaps = set.script_gaps(&script);
        if !gaps.is_empty() {
            return Err(invalid(name, format!("no reply for: {}", gaps.join("; "))));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_fixtures_are_consistent() {
        validate_all().unwrap();
    }

    #[test]
    fn dialogue_shape() {
        let k = KnowledgeFixture::builtin();
        assert_eq!(k.dialogue.len(), 21);
        assert_eq!(k.questions.len(), 4);
        let words: usize = k
            .dialogue
            .iter()
            .map(|e| e.question.split_whitespace().count() + e.answer.split_whitespace().count())
            .sum();
        // Roughly 4000 tokens at about 1.3-1.5 tokens per word.
        assert!((2400..3400).contains(&words), "{words} words");
    }

    #[test]
    fn laptop_never_moves_and_jacket_is_in_trash() {
        let k = KnowledgeFixture::builtin();
        let at = k.executed_locations();
        assert!(!at.contains_key("laptop"));
        assert_eq!(at["jacket"].1, DestinationId::TrashCan);
        assert_eq!(at["tv remote"].1, DestinationId::UserHandover);
    }

    #[test]
    fn routing_gold_has_four_of_each() {
        let g = RoutingGold::builtin();
        assert_eq!(g.queries.len(), 8);
        let actions = g.queries.iter().filter(|q| q.expected == RouteCategory::ActionCommand).count();
        assert_eq!(actions, 4);
        assert!(g.queries.iter().any(|q| q.text == "Can I have a banana?"));
    }

    #[test]
    fn normalization_is_word_bounded() {
        assert!(mentions("It is in the Trash-Can!", "trash can"));
        assert!(!mentions("the trashcan", "trash can"));
        assert!(mentions("I didn’t move the laptop", "didn't move the laptop"));
        assert!(!mentions("bin", ""));
        assert!(!mentions("cabinet", "bin"));
    }

    #[test]
    fn hash_is_stable_and_content_sensitive() {
        let a = FixtureSet::builtin();
        assert_eq!(a.hash(), FixtureSet::builtin().hash());
        assert_eq!(a.hash().len(), 64);
        let mut b = a.clone();
        b.knowledge.dialogue[0].answer.push('!');
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn load_dir_round_trips_the_shipped_tree() {
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures");
        let loaded = FixtureSet::load_dir(&dir).unwrap();
        assert_eq!(loaded.hash(), FixtureSet::builtin().hash());
    }

    #[test]
    fn broken_truth_is_detected() {
        let mut k = KnowledgeFixture::builtin();
        k.truth.never_moved.push("Plate".into());
        assert!(k.validate().is_err());
        let mut k = KnowledgeFixture::builtin();
        if let AnswerCheck::Set { expected } = &mut k.questions[3].check {
            expected.pop();
        }
        assert!(k.validate().is_err());
    }
}

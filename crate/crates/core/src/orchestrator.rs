//! Session loop: route each request, dispatch it to the planner or the
//! historian, execute plans in the simulated world and remember every turn.
//!
//! A turn commits atomically. World and memory change only once every stage
//! of the turn has succeeded; a failed stage is recorded in the
//! [`TurnRecord`] and leaves the session exactly as it was.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::{info, warn};

use crate::domain::{
    DestinationId, MoveEvent, RouteCategory, RouteDecision, RouteProvenance, TaskPlan, TaskStep,
    Timestamp, UserRequest, WorldState,
};
use crate::gateway::{ChatBackend, ChatMessage, Embedder, GatewayError};
use crate::historian::{self, HistorianError, HistorianOptions};
use crate::memory::{DialogueEntry, MemoryError, MemoryStore, RetrievalResult};
use crate::planner::{self, PlanWarning, PlannerError};
use crate::prompts::PromptPack;
use crate::router::{self, RouterError, RoutingMode, GENERIC_CLARIFICATION};
use crate::simulator::{self, ExecutedStep, ExecutionOutcome, Scenario, ScenarioId, SkipReason, SkippedStep};

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("unknown scenario `{0}`")]
    UnknownScenario(String),
    #[error(transparent)]
    Memory(#[from] MemoryError),
}

/// Millisecond clock used for per-stage latencies.
pub trait Clock: Send + Sync {
    fn now_ms(&self) -> u64;
}

#[derive(Debug)]
pub struct SystemClock(Instant);

impl Default for SystemClock {
    fn default() -> Self {
        Self(Instant::now())
    }
}

impl Clock for SystemClock {
    fn now_ms(&self) -> u64 {
        self.0.elapsed().as_millis() as u64
    }
}

/// Always reads zero; makes turn records reproducible byte for byte.
#[derive(Debug, Default, Clone, Copy)]
pub struct FrozenClock;

impl Clock for FrozenClock {
    fn now_ms(&self) -> u64 {
        0
    }
}

/// Backends per agent role.
#[derive(Clone)]
pub struct AgentBackends {
    pub router: Arc<dyn ChatBackend>,
    pub planner: Arc<dyn ChatBackend>,
    pub historian: Arc<dyn ChatBackend>,
    pub embedder: Arc<dyn Embedder>,
}

impl AgentBackends {
    /// One chat backend for every role.
    pub fn uniform(chat: Arc<dyn ChatBackend>, embedder: Arc<dyn Embedder>) -> Self {
        Self {
            router: chat.clone(),
            planner: chat.clone(),
            historian: chat,
            embedder,
        }
    }
}

impl std::fmt::Debug for AgentBackends {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AgentBackends")
            .field("router", &self.router.model_id())
            .field("planner", &self.planner.model_id())
            .field("historian", &self.historian.model_id())
            .field("embedder", &self.embedder.model_id())
            .finish()
    }
}

#[derive(Debug, Clone)]
pub struct SessionConfig {
    pub backends: AgentBackends,
    pub prompts: Arc<PromptPack>,
    pub routing_mode: RoutingMode,
    pub historian: HistorianOptions,
    /// Object → destination actually executed, regardless of the plan.
    /// The user is still told the planned destination.
    pub error_injection: BTreeMap<String, DestinationId>,
}

impl SessionConfig {
    pub fn new(backends: AgentBackends) -> Self {
        Self {
            backends,
            prompts: Arc::new(PromptPack::builtin()),
            routing_mode: RoutingMode::Tools,
            historian: HistorianOptions::default(),
            error_injection: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Route,
    Plan,
    Execute,
    Answer,
    Clarify,
    Memorize,
}

impl Stage {
    pub fn as_str(&self) -> &'static str {
        match self {
            Stage::Route => "route",
            Stage::Plan => "plan",
            Stage::Execute => "execute",
            Stage::Answer => "answer",
            Stage::Clarify => "clarify",
            Stage::Memorize => "memorize",
        }
    }
}

/// Lifecycle notifications emitted while a turn is processed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum TurnEvent {
    Routed { category: RouteCategory },
    Planned { steps: usize },
    Executed { moves: usize, skipped: usize },
    Answered { retrieved: usize },
    Clarified,
    Memorized { entry_id: u64 },
    Failed { stage: Stage, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentTranscript {
    pub agent: String,
    pub model: String,
    pub messages: Vec<ChatMessage>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanTurn {
    pub plan: TaskPlan,
    pub warnings: Vec<PlanWarning>,
    pub attempts: u32,
    pub executed: Vec<ExecutedStep>,
    pub skipped: Vec<SkippedStep>,
    pub events: Vec<MoveEvent>,
    pub narration: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerTurn {
    pub answer: String,
    pub provenance: RetrievalResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageFailure {
    pub stage: Stage,
    pub message: String,
    /// The backend could not be reached (as opposed to answering badly).
    pub transport: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TurnResult {
    Plan(PlanTurn),
    Answer(AnswerTurn),
    Clarification { prompt: String },
    Failed(StageFailure),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnRecord {
    pub session_id: String,
    pub turn: u64,
    pub scenario: ScenarioId,
    pub request: UserRequest,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub route: Option<RouteDecision>,
    pub transcripts: Vec<AgentTranscript>,
    pub result: TurnResult,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub memory_entry: Option<DialogueEntry>,
    pub latency_ms: BTreeMap<String, u64>,
}

impl TurnRecord {
    pub fn is_failed(&self) -> bool {
        matches!(self.result, TurnResult::Failed(_))
    }
}

fn place_phrase(d: DestinationId) -> &'static str {
    match d {
        DestinationId::Sink => "the sink",
        DestinationId::TrashCan => "the trash can",
        DestinationId::Fridge => "the fridge",
        DestinationId::FoodShelf => "the food shelf",
        DestinationId::StorageBox => "the storage box",
        DestinationId::UserHandover => "you",
        DestinationId::Stationary => "where it was",
    }
}

/// One sentence per move, then one per skipped step.
pub fn narrate_outcome(outcome: &ExecutionOutcome) -> String {
    let mut sentences = Vec::new();
    for step in &outcome.executed {
        for m in &step.moves {
            sentences.push(match m.spoken {
                DestinationId::UserHandover => format!("Handed {} to you.", m.object),
                d => format!("Moved {} to {}.", m.object, place_phrase(d)),
            });
        }
    }
    for s in &outcome.skipped {
        let objects = s.step.objects.join(", ");
        sentences.push(match &s.reason {
            SkipReason::ObjectNotPresent { object } => {
                format!("Could not move {objects}: {object} is not here.")
            }
            SkipReason::AlreadyAtDestination => {
                format!("{objects} already at {}.", place_phrase(s.step.destination))
            }
        });
    }
    if sentences.is_empty() {
        return "No actions were performed.".to_string();
    }
    sentences.join(" ")
}

/// Rewrites the plan so injected objects go to their injected destination.
fn inject_errors(
    plan: &TaskPlan,
    injection: &BTreeMap<String, DestinationId>,
) -> (TaskPlan, BTreeMap<String, DestinationId>) {
    let mut spoken = BTreeMap::new();
    let mut steps = Vec::new();
    for step in &plan.steps {
        let mut kept = Vec::new();
        for obj in &step.objects {
            let injected = injection
                .iter()
                .find(|(k, _)| crate::domain::fold(k) == crate::domain::fold(obj))
                .map(|(_, d)| *d);
            match injected {
                Some(d) if d != step.destination && d != DestinationId::Stationary => {
                    spoken.insert(obj.clone(), step.destination);
                    steps.push(TaskStep {
                        objects: vec![obj.clone()],
                        destination: d,
                    });
                }
                _ => kept.push(obj.clone()),
            }
        }
        if !kept.is_empty() {
            steps.push(TaskStep {
                objects: kept,
                destination: step.destination,
            });
        }
    }
    (
        TaskPlan {
            steps,
            raw_agent_text: plan.raw_agent_text.clone(),
        },
        spoken,
    )
}

pub struct Session {
    id: String,
    active: ScenarioId,
    scenarios: BTreeMap<ScenarioId, Scenario>,
    worlds: BTreeMap<ScenarioId, WorldState>,
    memory: MemoryStore,
    config: SessionConfig,
    clock: Arc<dyn Clock>,
    turns: u64,
}

impl std::fmt::Debug for Session {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Session")
            .field("id", &self.id)
            .field("active", &self.active)
            .field("turns", &self.turns)
            .finish()
    }
}

impl Session {
    pub fn new(id: impl Into<String>, scenario: ScenarioId, config: SessionConfig) -> Self {
        Self::with_memory(id, scenario, config, MemoryStore::new())
    }

    pub fn with_memory(
        id: impl Into<String>,
        scenario: ScenarioId,
        config: SessionConfig,
        memory: MemoryStore,
    ) -> Self {
        let mut s = Self {
            id: id.into(),
            active: scenario,
            scenarios: BTreeMap::new(),
            worlds: BTreeMap::new(),
            memory,
            config,
            clock: Arc::new(SystemClock::default()),
            turns: 0,
        };
        s.set_scenario(scenario);
        s
    }

    pub fn with_clock(mut self, clock: Arc<dyn Clock>) -> Self {
        self.clock = clock;
        self
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn active_scenario(&self) -> ScenarioId {
        self.active
    }

    pub fn config(&self) -> &SessionConfig {
        &self.config
    }

    /// Moves the robot to another scenario. Each scenario keeps its own world.
    pub fn set_scenario(&mut self, id: ScenarioId) {
        let scenario = self
            .scenarios
            .entry(id)
            .or_insert_with(|| Scenario::builtin(id))
            .clone();
        self.worlds.entry(id).or_insert_with(|| scenario.initial_world());
        self.active = id;
    }

    /// Replaces the fixture used for a scenario (and resets its world).
    pub fn load_scenario(&mut self, scenario: Scenario) {
        let id = scenario.id;
        self.worlds.insert(id, scenario.initial_world());
        self.scenarios.insert(id, scenario);
    }

    pub fn world(&self) -> &WorldState {
        &self.worlds[&self.active]
    }

    pub fn world_of(&self, id: ScenarioId) -> Option<&WorldState> {
        self.worlds.get(&id)
    }

    pub fn memory(&self) -> &MemoryStore {
        &self.memory
    }

    pub fn history(&self) -> Vec<DialogueEntry> {
        self.memory.entries()
    }

    pub fn turn_count(&self) -> u64 {
        self.turns
    }

    pub fn handle_turn(&mut self, request: &UserRequest) -> TurnRecord {
        self.handle_turn_observed(request, &mut |_| {})
    }

    pub fn handle_turn_observed(
        &mut self,
        request: &UserRequest,
        observer: &mut dyn FnMut(&TurnEvent),
    ) -> TurnRecord {
        self.turns += 1;
        let mut record = TurnRecord {
            session_id: self.id.clone(),
            turn: self.turns,
            scenario: self.active,
            request: request.clone(),
            route: None,
            transcripts: Vec::new(),
            result: TurnResult::Clarification {
                prompt: String::new(),
            },
            memory_entry: None,
            latency_ms: BTreeMap::new(),
        };

        let fail = |record: &mut TurnRecord,
                        observer: &mut dyn FnMut(&TurnEvent),
                        stage: Stage,
                        message: String,
                        transport: bool| {
            warn!(session = %record.session_id, turn = record.turn, stage = stage.as_str(), %message, "turn failed");
            observer(&TurnEvent::Failed {
                stage,
                message: message.clone(),
            });
            record.result = TurnResult::Failed(StageFailure {
                stage,
                message,
                transport,
            });
        };

        // Route.
        let started = self.clock.now_ms();
        let routing = router::build_messages(request, &self.config.prompts.router, self.config.routing_mode);
        let decision = match router::route(
            request,
            &self.config.prompts.router,
            self.config.backends.router.as_ref(),
            self.config.routing_mode,
        ) {
            Ok(d) => d,
            Err(RouterError::RoutingUndecidable { reply }) => {
                info!(session = %self.id, %reply, "routing undecidable, asking for clarification");
                RouteDecision::unclear(GENERIC_CLARIFICATION, RouteProvenance::Undecidable)
            }
            Err(RouterError::Gateway(e)) => {
                record.latency_ms.insert("route".into(), self.clock.now_ms() - started);
                let transport = is_transport(&e);
                fail(&mut record, observer, Stage::Route, e.to_string(), transport);
                return record;
            }
        };
        record.latency_ms.insert("route".into(), self.clock.now_ms() - started);
        record.transcripts.push(AgentTranscript {
            agent: "router".into(),
            model: self.config.backends.router.model_id().to_string(),
            messages: routing,
        });
        observer(&TurnEvent::Routed {
            category: decision.category,
        });
        record.route = Some(decision.clone());

        let staged = match decision.category {
            RouteCategory::ActionCommand => self.stage_action(request, &mut record, observer),
            RouteCategory::HistoryQuery => self.stage_history(request, &mut record, observer),
            RouteCategory::Unclear => {
                let prompt = decision
                    .clarification_prompt
                    .clone()
                    .unwrap_or_else(|| GENERIC_CLARIFICATION.to_string());
                observer(&TurnEvent::Clarified);
                Ok(Staged {
                    result: TurnResult::Clarification {
                        prompt: prompt.clone(),
                    },
                    answer: prompt,
                    world: None,
                })
            }
        };
        let staged = match staged {
            Ok(s) => s,
            Err((stage, message, transport)) => {
                fail(&mut record, observer, stage, message, transport);
                return record;
            }
        };

        // Memorize, then commit the world.
        let started = self.clock.now_ms();
        let entry = self.next_entry(request, &staged.answer);
        if let Err(e) = self
            .memory
            .ingest(std::slice::from_ref(&entry), self.config.backends.embedder.as_ref())
        {
            record.latency_ms.insert("memorize".into(), self.clock.now_ms() - started);
            let transport = matches!(&e, MemoryError::Gateway(g) if is_transport(g));
            fail(&mut record, observer, Stage::Memorize, e.to_string(), transport);
            return record;
        }
        record.latency_ms.insert("memorize".into(), self.clock.now_ms() - started);
        if let Some(world) = staged.world {
            self.worlds.insert(self.active, world);
        }
        observer(&TurnEvent::Memorized {
            entry_id: entry.entry_id,
        });
        record.memory_entry = Some(entry);
        record.result = staged.result;
        record
    }

    fn next_entry(&self, request: &UserRequest, answer: &str) -> DialogueEntry {
        let last = self.memory.last_entry();
        let id = last.as_ref().map(|e| e.entry_id + 1).unwrap_or(1);
        let ts = match &last {
            Some(e) if e.timestamp > request.received_at => e.timestamp,
            _ => request.received_at,
        };
        DialogueEntry::new(id, ts, request.text.clone(), answer.to_string())
    }

    fn stage_action(
        &self,
        request: &UserRequest,
        record: &mut TurnRecord,
        observer: &mut dyn FnMut(&TurnEvent),
    ) -> Result<Staged, (Stage, String, bool)> {
        let scenario = &self.scenarios[&self.active];
        let objects = scenario.observe();
        let started = self.clock.now_ms();
        let planned = planner::plan(
            request,
            &objects,
            &self.config.prompts.planner,
            self.config.backends.planner.as_ref(),
        );
        record.latency_ms.insert("plan".into(), self.clock.now_ms() - started);
        let outcome = match planned {
            Ok(o) => o,
            Err(PlannerError::Gateway(e)) => return Err((Stage::Plan, e.to_string(), is_transport(&e))),
            Err(e) => return Err((Stage::Plan, e.to_string(), false)),
        };
        record.transcripts.push(AgentTranscript {
            agent: "planner".into(),
            model: self.config.backends.planner.model_id().to_string(),
            messages: outcome.transcript.clone(),
        });
        let plan = outcome.extraction.plan;
        if plan.steps.is_empty() {
            warn!(session = %self.id, request = %request.text, "planner produced an empty plan");
        }
        observer(&TurnEvent::Planned {
            steps: plan.steps.len(),
        });

        let started = self.clock.now_ms();
        let (executed_plan, spoken) = inject_errors(&plan, &self.config.error_injection);
        let execution = simulator::execute(&executed_plan, self.world(), &spoken, request.received_at);
        record.latency_ms.insert("execute".into(), self.clock.now_ms() - started);
        observer(&TurnEvent::Executed {
            moves: execution.move_count(),
            skipped: execution.skipped.len(),
        });
        let narration = narrate_outcome(&execution);
        let world = execution.state.clone();
        Ok(Staged {
            result: TurnResult::Plan(PlanTurn {
                plan,
                warnings: outcome.extraction.warnings,
                attempts: outcome.attempts,
                executed: execution.executed,
                skipped: execution.skipped,
                events: execution.events,
                narration: narration.clone(),
            }),
            answer: narration,
            world: Some(world),
        })
    }

    fn stage_history(
        &self,
        request: &UserRequest,
        record: &mut TurnRecord,
        observer: &mut dyn FnMut(&TurnEvent),
    ) -> Result<Staged, (Stage, String, bool)> {
        let started = self.clock.now_ms();
        let answered = historian::answer(
            request,
            &self.memory,
            &self.config.prompts.historian,
            self.config.backends.embedder.as_ref(),
            self.config.backends.historian.as_ref(),
            self.config.historian,
        );
        record.latency_ms.insert("answer".into(), self.clock.now_ms() - started);
        let a = match answered {
            Ok(a) => a,
            Err(HistorianError::Gateway(e)) => return Err((Stage::Answer, e.to_string(), is_transport(&e))),
            Err(e) => return Err((Stage::Answer, e.to_string(), false)),
        };
        if !a.transcript.is_empty() {
            record.transcripts.push(AgentTranscript {
                agent: "historian".into(),
                model: self.config.backends.historian.model_id().to_string(),
                messages: a.transcript,
            });
        }
        observer(&TurnEvent::Answered {
            retrieved: a.provenance.k_returned,
        });
        Ok(Staged {
            result: TurnResult::Answer(AnswerTurn {
                answer: a.answer.clone(),
                provenance: a.provenance,
            }),
            answer: a.answer,
            world: None,
        })
    }
}

struct Staged {
    result: TurnResult,
    /// Answer half of the memory entry.
    answer: String,
    world: Option<WorldState>,
}

fn is_transport(e: &GatewayError) -> bool {
    e.is_transport()
}

/// Convenience for building requests with a fixed clock, e.g. in fixtures.
pub fn request_at(text: &str, session_id: &str, at: Timestamp) -> UserRequest {
    UserRequest::new(text, session_id, at).expect("non-empty request text")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::Location;
    use crate::gateway::{HashEmbedder, ScriptedBackend};
    use crate::simulator::SpokenMove;
    use serde_json::json;

    fn outcome_with(moves: Vec<SpokenMove>) -> ExecutionOutcome {
        ExecutionOutcome {
            executed: vec![ExecutedStep {
                step: TaskStep {
                    objects: moves.iter().map(|m| m.object.clone()).collect(),
                    destination: moves[0].executed,
                },
                moves,
            }],
            skipped: vec![],
            state: WorldState::default(),
            events: vec![],
        }
    }

    #[test]
    fn narration_examples() {
        let one = outcome_with(vec![SpokenMove {
            object: "Plate".into(),
            spoken: DestinationId::Sink,
            executed: DestinationId::Sink,
        }]);
        assert_eq!(narrate_outcome(&one), "Moved Plate to the sink.");
        let empty = ExecutionOutcome {
            executed: vec![],
            skipped: vec![],
            state: WorldState::default(),
            events: vec![],
        };
        assert_eq!(narrate_outcome(&empty), "No actions were performed.");
        let lied = outcome_with(vec![SpokenMove {
            object: "Jacket".into(),
            spoken: DestinationId::StorageBox,
            executed: DestinationId::TrashCan,
        }]);
        assert_eq!(narrate_outcome(&lied), "Moved Jacket to the storage box.");
    }

    #[test]
    fn narration_of_handover_and_skips() {
        let mut o = outcome_with(vec![SpokenMove {
            object: "A brush".into(),
            spoken: DestinationId::UserHandover,
            executed: DestinationId::UserHandover,
        }]);
        o.skipped.push(SkippedStep {
            step: TaskStep {
                objects: vec!["Banana".into()],
                destination: DestinationId::UserHandover,
            },
            reason: SkipReason::ObjectNotPresent {
                object: "Banana".into(),
            },
        });
        assert_eq!(
            narrate_outcome(&o),
            "Handed A brush to you. Could not move Banana: Banana is not here."
        );
    }

    #[test]
    fn injection_splits_steps() {
        let plan = TaskPlan {
            steps: vec![TaskStep {
                objects: vec!["Jacket".into(), "Pen".into()],
                destination: DestinationId::StorageBox,
            }],
            raw_agent_text: String::new(),
        };
        let inj = BTreeMap::from([("jacket".to_string(), DestinationId::TrashCan)]);
        let (p, spoken) = inject_errors(&plan, &inj);
        assert_eq!(p.steps.len(), 2);
        assert_eq!(p.destination_of("Jacket"), Some(DestinationId::TrashCan));
        assert_eq!(p.destination_of("Pen"), Some(DestinationId::StorageBox));
        assert_eq!(spoken["Jacket"], DestinationId::StorageBox);
    }

    fn script(entries: serde_json::Value) -> Arc<ScriptedBackend> {
        Arc::new(ScriptedBackend::from_json("orch-test", &entries.to_string()).unwrap())
    }

    fn session(b: Arc<ScriptedBackend>) -> Session {
        let cfg = SessionConfig::new(AgentBackends::uniform(b, Arc::new(HashEmbedder::new())));
        Session::new("s1", ScenarioId::DiningTable, cfg).with_clock(Arc::new(FrozenClock))
    }

    #[test]
    fn unclear_turn_changes_nothing_but_memory() {
        let b = script(json!([
            {"match": {"last_user_message": "Blue."},
             "reply": {"content": "", "tool_calls": [{"name": "ask_clarification", "arguments": {"question": "What about blue?"}}]}}
        ]));
        let mut s = session(b);
        let before = s.world().clone();
        let rec = s.handle_turn(&request_at("Blue.", "s1", Timestamp::from_unix(100)));
        assert_eq!(rec.result, TurnResult::Clarification { prompt: "What about blue?".into() });
        assert_eq!(s.world(), &before);
        assert_eq!(s.history().len(), 1);
        assert_eq!(s.history()[0].answer, "What about blue?");
    }

    #[test]
    fn undecidable_routing_becomes_clarification() {
        let b = script(json!([
            {"match": {"last_user_message": "hmm"}, "reply": {"content": "no idea"}}
        ]));
        let mut s = session(b);
        let rec = s.handle_turn(&request_at("hmm", "s1", Timestamp::from_unix(100)));
        assert_eq!(rec.route.unwrap().provenance, RouteProvenance::Undecidable);
        assert_eq!(rec.result, TurnResult::Clarification { prompt: GENERIC_CLARIFICATION.into() });
    }

    #[test]
    fn failed_plan_leaves_session_untouched() {
        let b = script(json!([
            {"match": {"last_user_message": "clear it"},
             "reply": {"content": "", "tool_calls": [{"name": "transfer_to_task_planner", "arguments": {}}]}}
        ]));
        let mut s = session(b);
        let before = s.world().clone();
        let mut events = Vec::new();
        let rec = s.handle_turn_observed(&request_at("clear it", "s1", Timestamp::from_unix(100)), &mut |e| events.push(e.clone()));
        match &rec.result {
            TurnResult::Failed(f) => {
                assert_eq!(f.stage, Stage::Plan);
                assert!(!f.transport);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(events.last(), Some(TurnEvent::Failed { stage: Stage::Plan, .. })));
        assert_eq!(s.world(), &before);
        assert!(s.history().is_empty());
        assert!(rec.memory_entry.is_none());
    }

    #[test]
    fn action_turn_executes_and_remembers() {
        let objects = Scenario::builtin(ScenarioId::DiningTable).observe();
        let pack = PromptPack::builtin();
        let req = request_at("Put the plate in the sink.", "s1", Timestamp::from_unix(100));
        let user = planner::build_prompt(&objects, &req, &pack.planner)[1].content.clone();
        let b = script(json!([
            {"match": {"last_user_message": req.text},
             "reply": {"content": "", "tool_calls": [{"name": "transfer_to_task_planner", "arguments": {}}]}},
            {"match": {"last_user_message": user},
             "reply": {"content": "{\"tasks\": [{\"objects\": [\"Plate\"], \"destination\": \"Sink\"}]}"}}
        ]));
        let mut s = session(b);
        let mut events = Vec::new();
        let rec = s.handle_turn_observed(&req, &mut |e| events.push(e.clone()));
        let TurnResult::Plan(p) = &rec.result else { panic!("{:?}", rec.result) };
        assert_eq!(p.narration, "Moved Plate to the sink.");
        assert_eq!(s.world().placements["Plate"], Location::At(DestinationId::Sink));
        assert_eq!(s.history()[0].entry_id, 1);
        let stages: Vec<&str> = events
            .iter()
            .map(|e| match e {
                TurnEvent::Routed { .. } => "routed",
                TurnEvent::Planned { .. } => "planned",
                TurnEvent::Executed { .. } => "executed",
                TurnEvent::Memorized { .. } => "memorized",
                _ => "other",
            })
            .collect();
        assert_eq!(stages, ["routed", "planned", "executed", "memorized"]);
        assert!(rec.latency_ms.values().all(|v| *v == 0));
    }

    #[test]
    fn router_transport_failure_is_flagged() {
        struct Down;
        impl ChatBackend for Down {
            fn model_id(&self) -> &str {
                "down"
            }
            fn chat(&self, _: &[ChatMessage], _: &[crate::gateway::ToolSpec]) -> Result<ChatMessage, GatewayError> {
                Err(GatewayError::Transport("connection refused".into()))
            }
        }
        let cfg = SessionConfig::new(AgentBackends::uniform(Arc::new(Down), Arc::new(HashEmbedder::new())));
        let mut s = Session::new("s", ScenarioId::Desk, cfg);
        let rec = s.handle_turn(&request_at("hi", "s", Timestamp::from_unix(1)));
        assert!(matches!(rec.result, TurnResult::Failed(StageFailure { stage: Stage::Route, transport: true, .. })));
        assert_eq!(s.turn_count(), 1);
        assert!(s.history().is_empty());
    }

    #[test]
    fn memory_timestamps_never_go_backwards() {
        let b = script(json!([
            {"match": {"last_user_message": "Blue."},
             "reply": {"content": "UNCLEAR"}}
        ]));
        let mut s = session(b);
        s.handle_turn(&request_at("Blue.", "s1", Timestamp::from_unix(100)));
        s.handle_turn(&request_at("Blue.", "s1", Timestamp::from_unix(50)));
        let h = s.history();
        assert_eq!(h.iter().map(|e| e.entry_id).collect::<Vec<_>>(), vec![1, 2]);
        assert!(h[1].timestamp >= h[0].timestamp);
    }
}

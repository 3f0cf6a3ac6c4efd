//! Symbolic household world: scenario layouts, observation, and plan execution.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{
    DestinationId, Location, MoveEvent, ObjectObservation, TaskPlan, TaskStep, Timestamp,
    WorldState,
};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SimulatorError {
    #[error("unknown scenario `{0}`")]
    UnknownScenario(String),
    #[error("invalid scenario fixture `{id}`: {reason}")]
    InvalidFixture { id: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioId {
    DiningTable,
    LivingRoom,
    Desk,
}

impl ScenarioId {
    pub const ALL: [ScenarioId; 3] = [ScenarioId::DiningTable, ScenarioId::LivingRoom, ScenarioId::Desk];

    pub fn as_str(&self) -> &'static str {
        match self {
            ScenarioId::DiningTable => "dining_table",
            ScenarioId::LivingRoom => "living_room",
            ScenarioId::Desk => "desk",
        }
    }
}

impl fmt::Display for ScenarioId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScenarioId {
    type Err = SimulatorError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ScenarioId::ALL
            .into_iter()
            .find(|id| id.as_str() == s.trim())
            .ok_or_else(|| SimulatorError::UnknownScenario(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldEntry {
    pub destination: DestinationId,
    #[serde(default)]
    pub lenient: Vec<DestinationId>,
    pub stationary: bool,
    #[serde(default)]
    pub rationale: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scenario {
    pub id: ScenarioId,
    #[serde(default)]
    pub title: String,
    pub cleanup_zone: String,
    pub objects: Vec<String>,
    pub command: String,
    pub gold: BTreeMap<String, GoldEntry>,
}

const BUILTIN: [&str; 3] = [
    include_str!("../fixtures/scenarios/dining_table.json"),
    include_str!("../fixtures/scenarios/living_room.json"),
    include_str!("../fixtures/scenarios/desk.json"),
];

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self, SimulatorError> {
        let s: Scenario = serde_json::from_str(text).map_err(|e| SimulatorError::InvalidFixture {
            id: "?".into(),
            reason: e.to_string(),
        })?;
        s.validate()?;
        Ok(s)
    }

    pub fn builtin(id: ScenarioId) -> Scenario {
        let idx = ScenarioId::ALL.iter().position(|x| *x == id).expect("known id");
        Scenario::from_json(BUILTIN[idx]).expect("builtin scenario fixtures are valid")
    }

    pub fn builtin_all() -> Vec<Scenario> {
        ScenarioId::ALL.into_iter().map(Scenario::builtin).collect()
    }

    pub fn validate(&self) -> Result<(), SimulatorError> {
        let fail = |reason: String| SimulatorError::InvalidFixture {
            id: self.id.to_string(),
            reason,
        };
        ObjectObservation::list(&self.objects).map_err(|e| fail(e.to_string()))?;
        if self.command.trim().is_empty() {
            return Err(fail("empty command".into()));
        }
        if self.gold.len() != self.objects.len() {
            return Err(fail(format!(
                "{} gold entries for {} objects",
                self.gold.len(),
                self.objects.len()
            )));
        }
        for name in &self.objects {
            let g = self
                .gold
                .get(name)
                .ok_or_else(|| fail(format!("no gold entry for `{name}`")))?;
            if g.stationary != (g.destination == DestinationId::Stationary) {
                return Err(fail(format!("`{name}`: stationary flag disagrees with destination")));
            }
            if g.stationary && !g.lenient.is_empty() {
                return Err(fail(format!("stationary `{name}` has lenient destinations")));
            }
            if g.lenient.contains(&g.destination) || g.lenient.contains(&DestinationId::Stationary) {
                return Err(fail(format!("`{name}`: lenient set repeats gold or is stationary")));
            }
        }
        Ok(())
    }

    /// The object list as perceived, in fixture order.
    pub fn observe(&self) -> Vec<ObjectObservation> {
        ObjectObservation::list(&self.objects).expect("validated on load")
    }

    pub fn initial_world(&self) -> WorldState {
        WorldState::with_objects_at(self.objects.iter().map(String::as_str), &self.cleanup_zone)
    }

    pub fn gold_for(&self, object: &str) -> Option<&GoldEntry> {
        self.gold.get(object)
    }

    pub fn stationary_count(&self) -> usize {
        self.gold.values().filter(|g| g.stationary).count()
    }
}

/// Observation lookup by scenario id string.
pub fn observe(scenario: &str) -> Result<Vec<ObjectObservation>, SimulatorError> {
    let id: ScenarioId = scenario.parse()?;
    Ok(Scenario::builtin(id).observe())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum SkipReason {
    ObjectNotPresent { object: String },
    AlreadyAtDestination,
}

impl fmt::Display for SkipReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SkipReason::ObjectNotPresent { object } => write!(f, "{object} is not present"),
            SkipReason::AlreadyAtDestination => f.write_str("already there"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpokenMove {
    pub object: String,
    /// What the user is told.
    pub spoken: DestinationId,
    /// What the world actually did.
    pub executed: DestinationId,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutedStep {
    pub step: TaskStep,
    pub moves: Vec<SpokenMove>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedStep {
    pub step: TaskStep,
    pub reason: SkipReason,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutionOutcome {
    pub executed: Vec<ExecutedStep>,
    pub skipped: Vec<SkippedStep>,
    pub state: WorldState,
    /// Events appended by this execution, in order.
    pub events: Vec<MoveEvent>,
}

impl ExecutionOutcome {
    pub fn move_count(&self) -> usize {
        self.executed.iter().map(|s| s.moves.len()).sum()
    }
}

/// Executes `plan` step by step against `state`.
///
/// A step whose objects are not all present is skipped as a whole; objects
/// already at the target are left alone. `spoken_override` only changes what
/// is reported to the user, never the events.
pub fn execute(
    plan: &TaskPlan,
    state: &WorldState,
    spoken_override: &BTreeMap<String, DestinationId>,
    at: Timestamp,
) -> ExecutionOutcome {
    let mut world = state.clone();
    let mut executed = Vec::new();
    let mut skipped = Vec::new();
    let mut events = Vec::new();
    let at = world
        .event_log
        .last()
        .map(|e| e.timestamp.max(at))
        .unwrap_or(at);

    for step in &plan.steps {
        let resolved: Result<Vec<String>, String> = step
            .objects
            .iter()
            .map(|o| world.resolve(o).map(str::to_string).ok_or_else(|| o.clone()))
            .collect();
        let names = match resolved {
            Ok(n) => n,
            Err(object) => {
                skipped.push(SkippedStep {
                    step: step.clone(),
                    reason: SkipReason::ObjectNotPresent { object },
                });
                continue;
            }
        };
        let target = Location::for_destination(step.destination);
        let mut moves = Vec::new();
        for name in names {
            let from = world.placements[&name].clone();
            if from == target {
                continue;
            }
            let event = MoveEvent {
                timestamp: at,
                object: name.clone(),
                from,
                to: target.clone(),
            };
            world.placements.insert(name.clone(), target.clone());
            world.event_log.push(event.clone());
            events.push(event);
            let spoken = lookup_override(spoken_override, &name).unwrap_or(step.destination);
            moves.push(SpokenMove {
                object: name,
                spoken,
                executed: step.destination,
            });
        }
        if moves.is_empty() {
            skipped.push(SkippedStep {
                step: step.clone(),
                reason: SkipReason::AlreadyAtDestination,
            });
        } else {
            executed.push(ExecutedStep {
                step: step.clone(),
                moves,
            });
        }
    }

    ExecutionOutcome {
        executed,
        skipped,
        state: world,
        events,
    }
}

fn lookup_override(map: &BTreeMap<String, DestinationId>, object: &str) -> Option<DestinationId> {
    let key = crate::domain::fold(object);
    map.iter()
        .find(|(k, _)| crate::domain::fold(k) == key)
        .map(|(_, v)| *v)
}

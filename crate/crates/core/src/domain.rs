//! Shared vocabulary: objects, destinations, plans, requests and world snapshots.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, SubsecRound, TimeZone, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DomainError {
    #[error("unknown destination `{0}`")]
    UnknownDestination(String),
    #[error("inconsistent event for `{object}`: expected it at `{expected}`, found `{found}`")]
    InconsistentEvent {
        object: String,
        expected: String,
        found: String,
    },
    #[error("event for unknown object `{0}`")]
    UnknownObject(String),
    #[error("events out of chronological order at `{0}`")]
    OutOfOrder(Timestamp),
    #[error("invalid timestamp `{0}`")]
    InvalidTimestamp(String),
    #[error("invalid value: {0}")]
    Invalid(String),
}

/// UTC wall-clock instant truncated to whole seconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Timestamp(DateTime<Utc>);

impl Timestamp {
    pub fn now() -> Self {
        Self(Utc::now().trunc_subsecs(0))
    }

    pub fn from_unix(secs: i64) -> Self {
        Self(Utc.timestamp_opt(secs, 0).single().expect("unix seconds in range"))
    }

    pub fn unix(&self) -> i64 {
        self.0.timestamp()
    }

    pub fn plus_seconds(&self, secs: i64) -> Self {
        Self::from_unix(self.unix() + secs)
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0.format("%Y-%m-%dT%H:%M:%SZ"))
    }
}

impl FromStr for Timestamp {
    type Err = DomainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parsed = DateTime::parse_from_rfc3339(s.trim())
            .map_err(|_| DomainError::InvalidTimestamp(s.to_string()))?;
        Ok(Self(parsed.with_timezone(&Utc).trunc_subsecs(0)))
    }
}

impl Serialize for Timestamp {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Timestamp {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Closed set of placement targets an agent may assign.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DestinationId {
    Sink,
    TrashCan,
    Fridge,
    FoodShelf,
    StorageBox,
    UserHandover,
    Stationary,
}

impl DestinationId {
    pub const ALL: [DestinationId; 7] = [
        DestinationId::Sink,
        DestinationId::TrashCan,
        DestinationId::Fridge,
        DestinationId::FoodShelf,
        DestinationId::StorageBox,
        DestinationId::UserHandover,
        DestinationId::Stationary,
    ];

    /// The five physical placement locations of the household.
    pub const PLACEMENTS: [DestinationId; 5] = [
        DestinationId::Sink,
        DestinationId::TrashCan,
        DestinationId::Fridge,
        DestinationId::FoodShelf,
        DestinationId::StorageBox,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            DestinationId::Sink => "sink",
            DestinationId::TrashCan => "trash_can",
            DestinationId::Fridge => "fridge",
            DestinationId::FoodShelf => "food_shelf",
            DestinationId::StorageBox => "storage_box",
            DestinationId::UserHandover => "user_handover",
            DestinationId::Stationary => "stationary",
        }
    }

    /// Human-facing label, as used in narration ("the sink").
    pub fn label(&self) -> &'static str {
        match self {
            DestinationId::Sink => "Sink",
            DestinationId::TrashCan => "Trash Can",
            DestinationId::Fridge => "Fridge",
            DestinationId::FoodShelf => "Food Shelf",
            DestinationId::StorageBox => "Storage Box",
            DestinationId::UserHandover => "User",
            DestinationId::Stationary => "Stationary",
        }
    }

    pub fn definition(&self) -> &'static str {
        match self {
            DestinationId::Sink => "For items that need washing.",
            DestinationId::TrashCan => "For disposable or inedible items.",
            DestinationId::Fridge => "For perishable food.",
            DestinationId::FoodShelf => "For non-perishable food items.",
            DestinationId::StorageBox => "For general storage.",
            DestinationId::UserHandover => "Hand the item directly to the user.",
            DestinationId::Stationary => "The item stays where it is.",
        }
    }
}

impl fmt::Display for DestinationId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DestinationId {
    type Err = DomainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_destination(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Destination {
    pub id: DestinationId,
    pub description: String,
}

impl Destination {
    pub fn new(id: DestinationId) -> Self {
        Self {
            id,
            description: id.definition().to_string(),
        }
    }
}

// Keys are normalized: lowercase ascii alphanumerics only.
const DESTINATION_SYNONYMS: &[(&str, DestinationId)] = &[
    ("sink", DestinationId::Sink),
    ("kitchensink", DestinationId::Sink),
    ("dishwasher", DestinationId::Sink),
    ("trashcan", DestinationId::TrashCan),
    ("trash", DestinationId::TrashCan),
    ("trashbin", DestinationId::TrashCan),
    ("garbage", DestinationId::TrashCan),
    ("garbagecan", DestinationId::TrashCan),
    ("garbagebin", DestinationId::TrashCan),
    ("bin", DestinationId::TrashCan),
    ("wastebin", DestinationId::TrashCan),
    ("rubbish", DestinationId::TrashCan),
    ("rubbishbin", DestinationId::TrashCan),
    ("fridge", DestinationId::Fridge),
    ("refrigerator", DestinationId::Fridge),
    ("foodshelf", DestinationId::FoodShelf),
    ("pantry", DestinationId::FoodShelf),
    ("foodshelves", DestinationId::FoodShelf),
    ("storagebox", DestinationId::StorageBox),
    ("storage", DestinationId::StorageBox),
    ("userhandover", DestinationId::UserHandover),
    ("user", DestinationId::UserHandover),
    ("handover", DestinationId::UserHandover),
    ("handtouser", DestinationId::UserHandover),
    ("withuser", DestinationId::UserHandover),
    ("stationary", DestinationId::Stationary),
    ("notask", DestinationId::Stationary),
    ("none", DestinationId::Stationary),
    ("stay", DestinationId::Stationary),
];

fn normalize_key(text: &str) -> String {
    text.chars()
        .filter(|c| c.is_ascii_alphanumeric())
        .map(|c| c.to_ascii_lowercase())
        .collect()
}

/// Maps an agent-emitted destination string onto its canonical id.
///
/// Matching ignores case, whitespace, punctuation and a leading article
/// ("the sink"). Anything outside the synonym table is rejected.
pub fn parse_destination(text: &str) -> Result<DestinationId, DomainError> {
    let mut key = normalize_key(text);
    if key.starts_with("the") && key.len() > 3 {
        let stripped = &key[3..];
        if DESTINATION_SYNONYMS.iter().any(|(k, _)| *k == stripped) {
            key = stripped.to_string();
        }
    }
    DESTINATION_SYNONYMS
        .iter()
        .find(|(k, _)| *k == key)
        .map(|(_, id)| *id)
        .ok_or_else(|| DomainError::UnknownDestination(text.to_string()))
}

/// Where an object currently is.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Location {
    At(DestinationId),
    Zone(String),
    WithUser,
}

impl Location {
    /// The location an object ends up at after being assigned `dest`.
    pub fn for_destination(dest: DestinationId) -> Self {
        match dest {
            DestinationId::UserHandover => Location::WithUser,
            other => Location::At(other),
        }
    }
}

impl fmt::Display for Location {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Location::At(d) => f.write_str(d.as_str()),
            Location::Zone(z) => f.write_str(z),
            Location::WithUser => f.write_str("with_user"),
        }
    }
}

impl From<&str> for Location {
    fn from(s: &str) -> Self {
        if s == "with_user" {
            return Location::WithUser;
        }
        match DestinationId::ALL.iter().find(|d| d.as_str() == s) {
            Some(d) => Location::At(*d),
            None => Location::Zone(s.to_string()),
        }
    }
}

impl Serialize for Location {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Location {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Ok(Location::from(s.as_str()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectObservation {
    pub name: String,
    pub observation_index: usize,
}

impl ObjectObservation {
    /// Builds an observation list, enforcing non-empty and case-folded unique names.
    pub fn list<S: AsRef<str>>(names: &[S]) -> Result<Vec<ObjectObservation>, DomainError> {
        let mut seen = std::collections::BTreeSet::new();
        let mut out = Vec::with_capacity(names.len());
        for (i, name) in names.iter().enumerate() {
            let name = name.as_ref().trim();
            if name.is_empty() {
                return Err(DomainError::Invalid(format!("empty object name at index {i}")));
            }
            if !seen.insert(fold(name)) {
                return Err(DomainError::Invalid(format!("duplicate object name `{name}`")));
            }
            out.push(ObjectObservation {
                name: name.to_string(),
                observation_index: i,
            });
        }
        Ok(out)
    }
}

/// Case-folded, trimmed form used for object-name matching.
pub fn fold(name: &str) -> String {
    name.trim().to_lowercase()
}

/// Finds the observed object a free-text name refers to (case-insensitive exact match).
pub fn match_object<'a>(
    objects: &'a [ObjectObservation],
    name: &str,
) -> Option<&'a ObjectObservation> {
    let key = fold(name);
    objects.iter().find(|o| fold(&o.name) == key)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskStep {
    pub objects: Vec<String>,
    pub destination: DestinationId,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskPlan {
    pub steps: Vec<TaskStep>,
    pub raw_agent_text: String,
}

impl TaskPlan {
    pub fn empty(raw_agent_text: impl Into<String>) -> Self {
        Self {
            steps: Vec::new(),
            raw_agent_text: raw_agent_text.into(),
        }
    }

    /// Destination assigned to `object`, if any step names it.
    pub fn destination_of(&self, object: &str) -> Option<DestinationId> {
        let key = fold(object);
        self.steps
            .iter()
            .find(|s| s.objects.iter().any(|o| fold(o) == key))
            .map(|s| s.destination)
    }

    pub fn assigned_objects(&self) -> impl Iterator<Item = &str> {
        self.steps.iter().flat_map(|s| s.objects.iter().map(String::as_str))
    }

    /// Checks every plan invariant against the observation list.
    pub fn validate(&self, objects: &[ObjectObservation]) -> Result<(), DomainError> {
        let mut seen = std::collections::BTreeSet::new();
        for step in &self.steps {
            if step.objects.is_empty() {
                return Err(DomainError::Invalid("step without objects".into()));
            }
            if step.destination == DestinationId::Stationary {
                return Err(DomainError::Invalid("step with stationary destination".into()));
            }
            for obj in &step.objects {
                if match_object(objects, obj).is_none() {
                    return Err(DomainError::Invalid(format!("object `{obj}` was not observed")));
                }
                if !seen.insert(fold(obj)) {
                    return Err(DomainError::Invalid(format!("object `{obj}` assigned twice")));
                }
            }
        }
        Ok(())
    }

    /// Renders the plan in the published agent schema.
    pub fn to_schema_json(&self) -> serde_json::Value {
        serde_json::json!({
            "tasks": self.steps.iter().map(|s| serde_json::json!({
                "objects": s.objects,
                "destination": s.destination.as_str(),
            })).collect::<Vec<_>>()
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserRequest {
    pub text: String,
    pub session_id: String,
    pub received_at: Timestamp,
}

impl UserRequest {
    pub fn new(
        text: impl Into<String>,
        session_id: impl Into<String>,
        received_at: Timestamp,
    ) -> Result<Self, DomainError> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(DomainError::Invalid("request text is empty".into()));
        }
        Ok(Self {
            text,
            session_id: session_id.into(),
            received_at,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RouteCategory {
    ActionCommand,
    HistoryQuery,
    Unclear,
}

impl RouteCategory {
    pub fn as_str(&self) -> &'static str {
        match self {
            RouteCategory::ActionCommand => "action_command",
            RouteCategory::HistoryQuery => "history_query",
            RouteCategory::Unclear => "unclear",
        }
    }
}

/// How the router reached its decision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RouteProvenance {
    ToolCall,
    KeywordFallback,
    Undecidable,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RouteDecision {
    pub category: RouteCategory,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clarification_prompt: Option<String>,
    pub provenance: RouteProvenance,
}

impl RouteDecision {
    pub fn action() -> Self {
        Self::routed(RouteCategory::ActionCommand, RouteProvenance::ToolCall)
    }

    pub fn routed(category: RouteCategory, provenance: RouteProvenance) -> Self {
        assert!(category != RouteCategory::Unclear, "unclear decisions need a prompt");
        Self {
            category,
            clarification_prompt: None,
            provenance,
        }
    }

    pub fn unclear(prompt: impl Into<String>, provenance: RouteProvenance) -> Self {
        let mut prompt = prompt.into();
        if prompt.trim().is_empty() {
            prompt = crate::router::GENERIC_CLARIFICATION.to_string();
        }
        Self {
            category: RouteCategory::Unclear,
            clarification_prompt: Some(prompt),
            provenance,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MoveEvent {
    pub timestamp: Timestamp,
    pub object: String,
    pub from: Location,
    pub to: Location,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorldState {
    pub placements: BTreeMap<String, Location>,
    pub event_log: Vec<MoveEvent>,
}

impl WorldState {
    /// Every object placed in one zone, no history.
    pub fn with_objects_at<'a>(names: impl IntoIterator<Item = &'a str>, zone: &str) -> Self {
        Self {
            placements: names
                .into_iter()
                .map(|n| (n.to_string(), Location::Zone(zone.to_string())))
                .collect(),
            event_log: Vec::new(),
        }
    }

    pub fn location_of(&self, object: &str) -> Option<&Location> {
        self.placements.get(object).or_else(|| {
            let key = fold(object);
            self.placements
                .iter()
                .find(|(k, _)| fold(k) == key)
                .map(|(_, v)| v)
        })
    }

    /// Canonical key under which `object` is stored, if present.
    pub fn resolve(&self, object: &str) -> Option<&str> {
        if let Some((k, _)) = self.placements.get_key_value(object) {
            return Some(k.as_str());
        }
        let key = fold(object);
        self.placements
            .keys()
            .find(|k| fold(k) == key)
            .map(String::as_str)
    }

    fn apply(&mut self, event: &MoveEvent) -> Result<(), DomainError> {
        if let Some(last) = self.event_log.last() {
            if event.timestamp < last.timestamp {
                return Err(DomainError::OutOfOrder(event.timestamp));
            }
        }
        let current = self
            .placements
            .get_mut(&event.object)
            .ok_or_else(|| DomainError::UnknownObject(event.object.clone()))?;
        if *current != event.from {
            return Err(DomainError::InconsistentEvent {
                object: event.object.clone(),
                expected: event.from.to_string(),
                found: current.to_string(),
            });
        }
        *current = event.to.clone();
        self.event_log.push(event.clone());
        Ok(())
    }
}

/// Applies `events` to `initial` in order, extending its event log.
pub fn replay(initial: &WorldState, events: &[MoveEvent]) -> Result<WorldState, DomainError> {
    let mut state = initial.clone();
    for event in events {
        state.apply(event)?;
    }
    Ok(state)
}

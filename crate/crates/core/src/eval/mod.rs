//! Evaluation harness for the three phases: task planning, knowledge base
//! (with and without retrieval) and routing.
//!
//! Specialized agents are driven directly; the router is only exercised in
//! the routing phase. Items and repetitions may run concurrently, but
//! scoring and report assembly are deterministic and ordered.

mod report;
mod score;

use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::{info, warn};

pub use report::{
    method_label, EvalReport, ModelMeta, ReportCell, ReportMetadata, RunDetail, RunRecord,
    METRIC_LENIENT, METRIC_STRICT, METRIC_SUCCESS, METRIC_WITHOUT_RAG, METRIC_WITH_RAG,
    REPORT_FORMAT, TOTAL_ITEM,
};
pub use score::{judge_knowledge, score_knowledge, score_plan, ObjectVerdict};

use crate::domain::{RouteCategory, RouteProvenance, Timestamp, UserRequest};
use crate::fixtures::{FixtureError, FixtureSet, LLAMA_LIKE_SCRIPT, QWEN_LIKE_SCRIPT};
use crate::gateway::{
    BackendConfig, ChatBackend, Embedder, GatewayError, HashEmbedder, OpenAiBackend,
    ScriptedBackend,
};
use crate::historian::{self, ContextMode, HistorianError, HistorianOptions};
use crate::memory::{MemoryError, MemoryStore, DEFAULT_K};
use crate::metrics::Rate;
use crate::planner::{self, PlannerError};
use crate::router::{self, RouterError, RoutingMode};
use crate::simulator::ScenarioId;

pub const DEFAULT_REPETITIONS: u32 = 5;
pub const DEFAULT_MAX_TRANSPORT_FAILURES: u32 = 3;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("invalid run spec: {0}")]
    InvalidSpec(String),
    #[error("backend for model `{model}` failed")]
    Backend {
        model: String,
        #[source]
        source: GatewayError,
    },
    #[error(transparent)]
    Fixture(#[from] FixtureError),
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error("report failed its self-consistency check: {0}")]
    Inconsistent(String),
}

impl EvalError {
    /// Whether the failure is a backend that could not be reached.
    pub fn is_unreachable(&self) -> bool {
        match self {
            EvalError::Backend { source, .. } => source.is_transport(),
            EvalError::Memory(MemoryError::Gateway(g)) => g.is_transport(),
            _ => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    TaskPlanning,
    KnowledgeBase,
    Routing,
}

impl Phase {
    pub const ALL: [Phase; 3] = [Phase::TaskPlanning, Phase::KnowledgeBase, Phase::Routing];

    pub fn as_str(&self) -> &'static str {
        match self {
            Phase::TaskPlanning => "task_planning",
            Phase::KnowledgeBase => "knowledge_base",
            Phase::Routing => "routing",
        }
    }
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Phase {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "task" | "task_planning" => Ok(Phase::TaskPlanning),
            "kb" | "knowledge_base" => Ok(Phase::KnowledgeBase),
            "routing" => Ok(Phase::Routing),
            other => Err(format!("unknown phase `{other}` (expected task, kb or routing)")),
        }
    }
}

/// Where a model's replies come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendSpec {
    /// A script file path, or the name of a shipped script
    /// (`qwen_like`, `llama_like`).
    Scripted { script: String },
    Openai(BackendConfig),
}

impl BackendSpec {
    pub fn connect(&self) -> Result<Arc<dyn ChatBackend>, GatewayError> {
        match self {
            BackendSpec::Scripted { script } => Ok(Arc::new(load_script(script)?)),
            BackendSpec::Openai(cfg) => Ok(Arc::new(OpenAiBackend::new(cfg.clone())?)),
        }
    }
}

/// Resolves a shipped script name or a file path.
pub fn load_script(script: &str) -> Result<ScriptedBackend, GatewayError> {
    match script {
        "qwen_like" => ScriptedBackend::from_json("qwen_like", QWEN_LIKE_SCRIPT),
        "llama_like" => ScriptedBackend::from_json("llama_like", LLAMA_LIKE_SCRIPT),
        path => ScriptedBackend::from_file(Path::new(path)),
    }
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    #[serde(default = "yes")]
    pub supports_tools: bool,
    pub backend: BackendSpec,
}

impl ModelSpec {
    pub fn scripted(name: &str, script: impl Into<String>) -> Self {
        Self {
            name: name.to_string(),
            supports_tools: true,
            backend: BackendSpec::Scripted { script: script.into() },
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EmbedderSpec {
    #[default]
    Hash,
    Openai(BackendConfig),
}

impl EmbedderSpec {
    pub fn connect(&self) -> Result<Arc<dyn Embedder>, GatewayError> {
        match self {
            EmbedderSpec::Hash => Ok(Arc::new(HashEmbedder::new())),
            EmbedderSpec::Openai(cfg) => Ok(Arc::new(OpenAiBackend::new(cfg.clone())?)),
        }
    }
}

fn default_reps() -> u32 {
    DEFAULT_REPETITIONS
}

fn default_k() -> usize {
    DEFAULT_K
}

fn default_failures() -> u32 {
    DEFAULT_MAX_TRANSPORT_FAILURES
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    pub phase: Phase,
    pub models: Vec<ModelSpec>,
    #[serde(default)]
    pub embedder: EmbedderSpec,
    #[serde(default = "default_reps")]
    pub repetitions: u32,
    /// Knowledge base: also run without retrieval (whole dialogue as context).
    #[serde(default)]
    pub ablation: bool,
    #[serde(default = "default_k")]
    pub k: usize,
    /// Routing: evaluate models without tool calling via the keyword fallback
    /// instead of excluding them.
    #[serde(default)]
    pub routing_fallback: bool,
    #[serde(default = "default_failures")]
    pub max_transport_failures: u32,
    /// Worker threads; 0 picks the number of cores, 1 runs sequentially.
    #[serde(default)]
    pub jobs: usize,
    /// Restricts the run to these scenario, question or query-group ids.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub items: Vec<String>,
    /// Knowledge base: judge answers with this model instead of patterns.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub judge: Option<ModelSpec>,
}

impl RunSpec {
    pub fn new(phase: Phase, models: Vec<ModelSpec>) -> Self {
        Self {
            phase,
            models,
            embedder: EmbedderSpec::Hash,
            repetitions: DEFAULT_REPETITIONS,
            ablation: false,
            k: DEFAULT_K,
            routing_fallback: false,
            max_transport_failures: DEFAULT_MAX_TRANSPORT_FAILURES,
            jobs: 0,
            items: Vec::new(),
            judge: None,
        }
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        let bad = |m: &str| Err(EvalError::InvalidSpec(m.to_string()));
        if self.repetitions == 0 {
            return bad("repetitions must be at least 1");
        }
        if self.k == 0 {
            return bad("k must be at least 1");
        }
        if self.max_transport_failures == 0 {
            return bad("max_transport_failures must be at least 1");
        }
        if self.models.is_empty() {
            return bad("no models given");
        }
        let mut names: Vec<&str> = self.models.iter().map(|m| m.name.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        if names.len() != self.models.len() {
            return bad("model names must be unique");
        }
        if self.judge.is_some() && self.phase != Phase::KnowledgeBase {
            return bad("a judge only applies to the knowledge_base phase");
        }
        Ok(())
    }
}

/// A connected model under evaluation.
#[derive(Clone)]
pub struct EvalModel {
    pub name: String,
    pub supports_tools: bool,
    pub backend: Arc<dyn ChatBackend>,
}

impl std::fmt::Debug for EvalModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EvalModel")
            .field("name", &self.name)
            .field("model_id", &self.backend.model_id())
            .finish()
    }
}

/// Connects the spec's backends and runs it.
pub fn run_phase(spec: &RunSpec, fixtures: &FixtureSet) -> Result<EvalReport, EvalError> {
    spec.validate()?;
    let connect = |m: &ModelSpec| {
        m.backend.connect().map(|backend| EvalModel {
            name: m.name.clone(),
            supports_tools: m.supports_tools,
            backend,
        })
        .map_err(|source| EvalError::Backend {
            model: m.name.clone(),
            source,
        })
    };
    let models = spec.models.iter().map(connect).collect::<Result<Vec<_>, _>>()?;
    let judge = spec.judge.as_ref().map(connect).transpose()?;
    let embedder = spec.embedder.connect().map_err(|source| EvalError::Backend {
        model: "embedder".into(),
        source,
    })?;
    run_with(spec, &models, embedder.as_ref(), judge.as_ref(), fixtures)
}

/// Runs `spec` against already connected models.
pub fn run_with(
    spec: &RunSpec,
    models: &[EvalModel],
    embedder: &dyn Embedder,
    judge: Option<&EvalModel>,
    fixtures: &FixtureSet,
) -> Result<EvalReport, EvalError> {
    spec.validate()?;
    let mut metas: Vec<ModelMeta> = models
        .iter()
        .map(|m| ModelMeta {
            name: m.name.clone(),
            model_id: m.backend.model_id().to_string(),
            temperature: m.backend.temperature(),
            supports_tools: m.supports_tools,
            included: true,
            excluded_reason: None,
            routing_mode: None,
        })
        .collect();
    let ctx = Ctx {
        spec,
        fixtures,
        embedder,
        judge,
        store: None,
    };
    let (cells, runs) = match spec.phase {
        Phase::TaskPlanning => run_task(&ctx, models)?,
        Phase::KnowledgeBase => {
            let store = MemoryStore::new();
            store.ingest(&fixtures.knowledge.dialogue, embedder)?;
            let ctx = Ctx {
                store: Some(store),
                ..ctx
            };
            run_knowledge(&ctx, models)?
        }
        Phase::Routing => run_routing(&ctx, models, &mut metas)?,
    };

    let mut warnings: Vec<String> = runs
        .iter()
        .filter_map(|r| {
            r.invalid
                .as_ref()
                .map(|why| format!("{} {} rep {}: invalid run ({why})", r.model, r.item, r.rep))
        })
        .collect();
    if spec.phase == Phase::KnowledgeBase && spec.ablation {
        for m in models {
            let with = cells_total(&cells, &m.name, METRIC_WITH_RAG);
            let without = cells_total(&cells, &m.name, METRIC_WITHOUT_RAG);
            if let (Some(w), Some(wo)) = (with, without) {
                if w.ratio() <= wo.ratio() {
                    let msg = format!(
                        "{}: total validity with RAG ({}) does not exceed the ablation without RAG ({})",
                        m.name,
                        w.display(),
                        wo.display()
                    );
                    warn!("{msg}");
                    warnings.push(msg);
                }
            }
        }
    }

    let report = EvalReport {
        format: REPORT_FORMAT.to_string(),
        phase: spec.phase,
        metadata: ReportMetadata {
            models: metas,
            repetitions: spec.repetitions,
            k: spec.k,
            embedder: embedder.model_id().to_string(),
            prompt_version: fixtures.prompts.version.clone(),
            fixture_sha256: fixtures.hash(),
            ablation: spec.ablation,
            routing_fallback: spec.routing_fallback,
            judge: judge.map(|j| j.backend.model_id().to_string()),
        },
        cells,
        runs,
        warnings,
    };
    report.check_consistency().map_err(EvalError::Inconsistent)?;
    info!(phase = %spec.phase, cells = report.cells.len(), "evaluation finished");
    Ok(report)
}

fn cells_total(cells: &[ReportCell], model: &str, metric: &str) -> Option<Rate> {
    cells
        .iter()
        .find(|c| c.model == model && c.metric == metric && c.item == TOTAL_ITEM)
        .map(ReportCell::rate)
}

struct Ctx<'a> {
    spec: &'a RunSpec,
    fixtures: &'a FixtureSet,
    embedder: &'a dyn Embedder,
    judge: Option<&'a EvalModel>,
    store: Option<MemoryStore>,
}

impl Ctx<'_> {
    fn selected(&self, item: &str) -> bool {
        self.spec.items.is_empty() || self.spec.items.iter().any(|i| i == item)
    }
}

/// Fixed request time: evaluation items do not depend on the clock.
fn eval_request(text: &str) -> UserRequest {
    UserRequest::new(text, "eval", Timestamp::from_unix(0)).expect("fixture texts are non-empty")
}

enum Attempt<T> {
    Done(T),
    Invalid(String),
}

/// Runs `op`, retrying transport failures up to `max` attempts in total.
fn with_retries<T>(max: u32, mut op: impl FnMut() -> Result<T, (bool, String)>) -> Attempt<T> {
    let mut last = String::new();
    for attempt in 1..=max {
        match op() {
            Ok(v) => return Attempt::Done(v),
            Err((true, msg)) => {
                warn!(attempt, error = %msg, "transport failure");
                last = msg;
            }
            Err((false, msg)) => return Attempt::Invalid(msg),
        }
    }
    Attempt::Invalid(format!("{max} consecutive transport failures: {last}"))
}

fn gateway_failure(e: &GatewayError) -> (bool, String) {
    (e.is_transport(), e.to_string())
}

/// Maps `f` over `units`, on a rayon pool when enabled. Output order always
/// matches input order.
fn map_units<T: Sync, R: Send>(units: &[T], jobs: usize, f: impl Fn(&T) -> R + Sync + Send) -> Vec<R> {
    #[cfg(feature = "parallel")]
    if jobs != 1 {
        use rayon::prelude::*;
        match rayon::ThreadPoolBuilder::new().num_threads(jobs).build() {
            Ok(pool) => return pool.install(|| units.par_iter().map(&f).collect()),
            Err(e) => warn!(error = %e, "could not start worker pool, running sequentially"),
        }
    }
    #[cfg(not(feature = "parallel"))]
    let _ = jobs;
    units.iter().map(f).collect()
}

type Assembled = (Vec<ReportCell>, Vec<RunRecord>);

fn run_task(ctx: &Ctx<'_>, models: &[EvalModel]) -> Result<Assembled, EvalError> {
    let scenarios: Vec<ScenarioId> = ScenarioId::ALL
        .into_iter()
        .filter(|id| ctx.selected(id.as_str()))
        .collect();
    if scenarios.is_empty() {
        return Err(EvalError::InvalidSpec("no scenario selected".into()));
    }
    let units: Vec<(usize, ScenarioId, u32)> = models
        .iter()
        .enumerate()
        .flat_map(|(mi, _)| {
            scenarios
                .iter()
                .flat_map(move |s| (1..=ctx.spec.repetitions).map(move |rep| (mi, *s, rep)))
        })
        .collect();
    let runs = map_units(&units, ctx.spec.jobs, |&(mi, sid, rep)| {
        let model = &models[mi];
        let scenario = ctx.fixtures.scenario(sid);
        let request = eval_request(&scenario.command);
        let objects = scenario.observe();
        let outcome = with_retries(ctx.spec.max_transport_failures, || {
            match planner::plan(&request, &objects, &ctx.fixtures.prompts.planner, model.backend.as_ref()) {
                Ok(o) => Ok(Ok(o)),
                Err(PlannerError::Gateway(e)) => Err(gateway_failure(&e)),
                Err(PlannerError::PlanningFailed { error, replies }) => Ok(Err((error, replies.len() as u32))),
            }
        });
        let (detail, invalid) = match outcome {
            Attempt::Done(Ok(o)) => (
                RunDetail::Plan {
                    verdicts: score_plan(Some(&o.extraction.plan), scenario),
                    attempts: o.attempts,
                    error: None,
                },
                None,
            ),
            Attempt::Done(Err((error, attempts))) => (
                RunDetail::Plan {
                    verdicts: score_plan(None, scenario),
                    attempts,
                    error: Some(error.to_string()),
                },
                None,
            ),
            Attempt::Invalid(why) => (
                RunDetail::Plan {
                    verdicts: score_plan(None, scenario),
                    attempts: 0,
                    error: Some(why.clone()),
                },
                Some(why),
            ),
        };
        RunRecord {
            model: model.name.clone(),
            item: sid.as_str().to_string(),
            metric: "plan".into(),
            rep,
            detail: Some(detail),
            invalid,
        }
    });

    let mut cells = Vec::new();
    for model in models {
        let mut per_metric: [Vec<Rate>; 2] = Default::default();
        let mut rows: Vec<(ScenarioId, Rate, Rate)> = Vec::new();
        for sid in &scenarios {
            let verdicts: Vec<&ObjectVerdict> = runs
                .iter()
                .filter(|r| r.model == model.name && r.item == sid.as_str())
                .flat_map(|r| match &r.detail {
                    Some(RunDetail::Plan { verdicts, .. }) => verdicts.iter(),
                    _ => [].iter(),
                })
                .collect();
            let strict = Rate::from_bools(verdicts.iter().map(|v| v.strict));
            let lenient = Rate::from_bools(verdicts.iter().map(|v| v.lenient));
            per_metric[0].push(strict);
            per_metric[1].push(lenient);
            rows.push((*sid, strict, lenient));
        }
        for (sid, strict, lenient) in rows {
            let title = &ctx.fixtures.scenario(sid).title;
            cells.push(ReportCell::new(&model.name, sid.as_str(), title, METRIC_STRICT, strict));
            cells.push(ReportCell::new(&model.name, sid.as_str(), title, METRIC_LENIENT, lenient));
        }
        cells.push(ReportCell::new(&model.name, TOTAL_ITEM, "Total Accuracy", METRIC_STRICT, Rate::mean(&per_metric[0])));
        cells.push(ReportCell::new(&model.name, TOTAL_ITEM, "Total Accuracy", METRIC_LENIENT, Rate::mean(&per_metric[1])));
    }
    Ok((cells, runs))
}

fn run_knowledge(ctx: &Ctx<'_>, models: &[EvalModel]) -> Result<Assembled, EvalError> {
    let store = ctx.store.as_ref().expect("knowledge runs have a store");
    let questions: Vec<usize> = ctx
        .fixtures
        .knowledge
        .questions
        .iter()
        .enumerate()
        .filter(|(_, q)| ctx.selected(&q.id))
        .map(|(i, _)| i)
        .collect();
    if questions.is_empty() {
        return Err(EvalError::InvalidSpec("no question selected".into()));
    }
    let mut modes = Vec::new();
    if ctx.spec.ablation {
        modes.push((METRIC_WITHOUT_RAG, ContextMode::FullHistory));
    }
    modes.push((METRIC_WITH_RAG, ContextMode::Rag));

    let mut units = Vec::new();
    for mi in 0..models.len() {
        for &(metric, mode) in &modes {
            for &qi in &questions {
                for rep in 1..=ctx.spec.repetitions {
                    units.push((mi, metric, mode, qi, rep));
                }
            }
        }
    }
    let runs = map_units(&units, ctx.spec.jobs, |&(mi, metric, mode, qi, rep)| {
        let model = &models[mi];
        let question = &ctx.fixtures.knowledge.questions[qi];
        let request = eval_request(&question.text);
        let options = HistorianOptions {
            k: ctx.spec.k,
            mode,
            ..Default::default()
        };
        let outcome = with_retries(ctx.spec.max_transport_failures, || {
            let a = historian::answer(
                &request,
                store,
                &ctx.fixtures.prompts.historian,
                ctx.embedder,
                model.backend.as_ref(),
                options,
            )
            .map_err(|e| match e {
                HistorianError::Gateway(g) => gateway_failure(&g),
                other => (false, other.to_string()),
            })?;
            let score = match ctx.judge {
                Some(j) => judge_knowledge(&a.answer, question, j.backend.as_ref())
                    .map_err(|e| gateway_failure(&e))?,
                None => score_knowledge(&a.answer, question),
            };
            Ok((a, score))
        });
        let (detail, invalid) = match outcome {
            Attempt::Done((a, score)) => (
                Some(RunDetail::Answer {
                    answer: a.answer,
                    retrieved: a.provenance.ids(),
                    score,
                }),
                None,
            ),
            Attempt::Invalid(why) => (None, Some(why)),
        };
        RunRecord {
            model: model.name.clone(),
            item: question.id.clone(),
            metric: metric.to_string(),
            rep,
            detail,
            invalid,
        }
    });

    let mut cells = Vec::new();
    for &(metric, _) in &modes {
        for model in models {
            let mut parts = Vec::new();
            for &qi in &questions {
                let q = &ctx.fixtures.knowledge.questions[qi];
                let per_rep = score_knowledge("", q).denominator;
                let (num, den) = runs
                    .iter()
                    .filter(|r| r.model == model.name && r.metric == metric && r.item == q.id)
                    .fold((0, 0), |(n, d), r| match &r.detail {
                        Some(RunDetail::Answer { score, .. }) => (n + score.numerator, d + score.denominator),
                        _ => (n, d + per_rep),
                    });
                let rate = Rate::new(num, den);
                parts.push(rate);
                cells.push(ReportCell::new(&model.name, &q.id, &q.label, metric, rate));
            }
            cells.push(ReportCell::new(&model.name, TOTAL_ITEM, "Total Validity", metric, Rate::mean(&parts)));
        }
    }
    Ok((cells, runs))
}

const ROUTING_GROUPS: [(&str, &str, RouteCategory); 2] = [
    ("task_planning_queries", "Task Planning Queries", RouteCategory::ActionCommand),
    ("knowledge_base_queries", "Knowledge Base Queries", RouteCategory::HistoryQuery),
];

fn run_routing(
    ctx: &Ctx<'_>,
    models: &[EvalModel],
    metas: &mut [ModelMeta],
) -> Result<Assembled, EvalError> {
    let groups: Vec<&(&str, &str, RouteCategory)> =
        ROUTING_GROUPS.iter().filter(|g| ctx.selected(g.0)).collect();
    if groups.is_empty() {
        return Err(EvalError::InvalidSpec("no query group selected".into()));
    }
    let mut modes = Vec::new();
    for (model, meta) in models.iter().zip(metas.iter_mut()) {
        let mode = if model.supports_tools {
            Some(RoutingMode::Tools)
        } else if ctx.spec.routing_fallback {
            Some(RoutingMode::Keyword)
        } else {
            meta.included = false;
            meta.excluded_reason = Some("no tool calling; keyword fallback disabled".into());
            None
        };
        meta.routing_mode = mode;
        modes.push(mode);
    }
    let queries: Vec<usize> = ctx
        .fixtures
        .routing
        .queries
        .iter()
        .enumerate()
        .filter(|(_, q)| groups.iter().any(|g| g.2 == q.expected))
        .map(|(i, _)| i)
        .collect();
    let mut units = Vec::new();
    for (mi, mode) in modes.iter().enumerate() {
        let Some(mode) = mode else { continue };
        for &qi in &queries {
            for rep in 1..=ctx.spec.repetitions {
                units.push((mi, *mode, qi, rep));
            }
        }
    }
    let runs = map_units(&units, ctx.spec.jobs, |&(mi, mode, qi, rep)| {
        let model = &models[mi];
        let item = &ctx.fixtures.routing.queries[qi];
        let request = eval_request(&item.text);
        let outcome = with_retries(ctx.spec.max_transport_failures, || {
            match router::route(&request, &ctx.fixtures.prompts.router, model.backend.as_ref(), mode) {
                Ok(d) => Ok((d.category, d.provenance)),
                Err(RouterError::RoutingUndecidable { .. }) => {
                    Ok((RouteCategory::Unclear, RouteProvenance::Undecidable))
                }
                Err(RouterError::Gateway(e)) => Err(gateway_failure(&e)),
            }
        });
        let (detail, invalid) = match outcome {
            Attempt::Done((actual, provenance)) => (
                Some(RunDetail::Route {
                    expected: item.expected,
                    actual,
                    provenance,
                }),
                None,
            ),
            Attempt::Invalid(why) => (None, Some(why)),
        };
        RunRecord {
            model: model.name.clone(),
            item: item.text.clone(),
            metric: METRIC_SUCCESS.into(),
            rep,
            detail,
            invalid,
        }
    });

    let mut cells = Vec::new();
    for (model, mode) in models.iter().zip(&modes) {
        if mode.is_none() {
            continue;
        }
        let mut parts = Vec::new();
        for (id, label, category) in groups.iter().copied() {
            let pairs: Vec<(RouteCategory, RouteCategory)> = runs
                .iter()
                .filter(|r| r.model == model.name)
                .filter_map(|r| {
                    let q = ctx.fixtures.routing.queries.iter().find(|q| q.text == r.item)?;
                    (q.expected == *category).then(|| match &r.detail {
                        Some(RunDetail::Route { actual, .. }) => (q.expected, *actual),
                        _ => (q.expected, RouteCategory::Unclear),
                    })
                })
                .collect();
            if pairs.is_empty() {
                continue;
            }
            let rate = router::score_routing(&pairs);
            parts.push(rate);
            cells.push(ReportCell::new(&model.name, id, label, METRIC_SUCCESS, rate));
        }
        if !parts.is_empty() {
            cells.push(ReportCell::new(&model.name, TOTAL_ITEM, "Total Success Rate", METRIC_SUCCESS, Rate::pooled(&parts)));
        }
    }
    Ok((cells, runs))
}

/// Files written for one report under an output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportFiles {
    pub text: PathBuf,
    pub json: PathBuf,
    pub csv: PathBuf,
}

/// Writes `<phase>.txt`, `<phase>.json` and `<phase>.csv` into `dir`.
pub fn write_report(report: &EvalReport, dir: &Path) -> std::io::Result<ReportFiles> {
    std::fs::create_dir_all(dir)?;
    let stem = report.phase.as_str();
    let files = ReportFiles {
        text: dir.join(format!("{stem}.txt")),
        json: dir.join(format!("{stem}.json")),
        csv: dir.join(format!("{stem}.csv")),
    };
    std::fs::write(&files.text, report.render_text())?;
    std::fs::write(&files.json, report.to_json())?;
    let csv = report.to_csv().map_err(std::io::Error::other)?;
    std::fs::write(&files.csv, csv)?;
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::ChatMessage;

    fn scripted_spec(phase: Phase) -> RunSpec {
        RunSpec::new(
            phase,
            vec![ModelSpec::scripted("qwen_like", "qwen_like"), ModelSpec::scripted("llama_like", "llama_like")],
        )
    }

    #[test]
    fn phases_parse_short_and_long_names() {
        assert_eq!("task".parse::<Phase>().unwrap(), Phase::TaskPlanning);
        assert_eq!("kb".parse::<Phase>().unwrap(), Phase::KnowledgeBase);
        assert_eq!("knowledge_base".parse::<Phase>().unwrap(), Phase::KnowledgeBase);
        assert!("tasks".parse::<Phase>().is_err());
    }

    #[test]
    fn spec_validation() {
        let mut s = scripted_spec(Phase::TaskPlanning);
        s.repetitions = 0;
        assert!(matches!(s.validate(), Err(EvalError::InvalidSpec(_))));
        let mut s = scripted_spec(Phase::TaskPlanning);
        s.models.push(s.models[0].clone());
        assert!(s.validate().is_err());
        let spec: RunSpec = serde_json::from_str(
            r#"{"phase": "routing", "models": [{"name": "a", "backend": {"kind": "scripted", "script": "qwen_like"}}]}"#,
        )
        .unwrap();
        assert_eq!(spec.repetitions, 5);
        assert_eq!(spec.k, 5);
        assert!(spec.models[0].supports_tools);
    }

    #[test]
    fn task_phase_has_three_scenarios_and_totals() {
        let report = run_phase(&scripted_spec(Phase::TaskPlanning), &FixtureSet::builtin()).unwrap();
        let c = report.cell("qwen_like", "dining_table", METRIC_STRICT).unwrap();
        assert_eq!(c.denominator, 50);
        assert_eq!(report.cell("qwen_like", "living_room", METRIC_STRICT).unwrap().denominator, 45);
        assert_eq!(report.cell("qwen_like", "desk", METRIC_STRICT).unwrap().denominator, 75);
        // The qwen-like script follows the gold plans exactly.
        assert_eq!(c.percent, "100.0");
        let llama = report.cell("llama_like", "dining_table", METRIC_STRICT).unwrap();
        assert!(llama.numerator < llama.denominator);
        assert!(report.render_text().contains("Dining Table"));
        report.check_consistency().unwrap();
    }

    #[test]
    fn one_rep_one_scenario_denominator_is_object_count() {
        let mut spec = scripted_spec(Phase::TaskPlanning);
        spec.repetitions = 1;
        spec.items = vec!["living_room".into()];
        let report = run_phase(&spec, &FixtureSet::builtin()).unwrap();
        assert_eq!(report.cell("qwen_like", "living_room", METRIC_STRICT).unwrap().denominator, 9);
        assert!(report.cell("qwen_like", "desk", METRIC_STRICT).is_none());
    }

    #[test]
    fn knowledge_ablation_produces_both_blocks() {
        let mut spec = scripted_spec(Phase::KnowledgeBase);
        spec.ablation = true;
        let report = run_phase(&spec, &FixtureSet::builtin()).unwrap();
        let with = report.cell("qwen_like", TOTAL_ITEM, METRIC_WITH_RAG).unwrap();
        let without = report.cell("qwen_like", TOTAL_ITEM, METRIC_WITHOUT_RAG).unwrap();
        assert!(with.rate().ratio() > without.rate().ratio());
        assert_eq!(report.cell("qwen_like", "trash_status", METRIC_WITH_RAG).unwrap().denominator, 20);
        assert_eq!(report.cell("qwen_like", "food_availability", METRIC_WITH_RAG).unwrap().denominator, 10);
        assert!(report.render_text().contains("Without RAG (Ablation Study)"));
        assert!(report.warnings.is_empty(), "{:?}", report.warnings);
    }

    #[test]
    fn routing_excludes_toolless_models_unless_fallback() {
        let mut spec = scripted_spec(Phase::Routing);
        spec.models[1].supports_tools = false;
        let report = run_phase(&spec, &FixtureSet::builtin()).unwrap();
        assert!(report.cell("llama_like", TOTAL_ITEM, METRIC_SUCCESS).is_none());
        assert!(!report.metadata.models[1].included);
        let total = report.cell("qwen_like", TOTAL_ITEM, METRIC_SUCCESS).unwrap();
        assert_eq!(total.denominator, 40);

        spec.routing_fallback = true;
        let report = run_phase(&spec, &FixtureSet::builtin()).unwrap();
        assert_eq!(report.metadata.models[1].routing_mode, Some(RoutingMode::Keyword));
        assert!(report.cell("llama_like", TOTAL_ITEM, METRIC_SUCCESS).is_some());
    }

    struct Flaky(std::sync::atomic::AtomicU32);

    impl ChatBackend for Flaky {
        fn model_id(&self) -> &str {
            "flaky"
        }
        fn chat(&self, _: &[ChatMessage], _: &[crate::gateway::ToolSpec]) -> Result<ChatMessage, GatewayError> {
            self.0.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
            Err(GatewayError::Transport("connection refused".into()))
        }
    }

    #[test]
    fn transport_failures_mark_items_invalid() {
        let flaky = Arc::new(Flaky(Default::default()));
        let models = [EvalModel {
            name: "flaky".into(),
            supports_tools: true,
            backend: flaky.clone(),
        }];
        let mut spec = RunSpec::new(Phase::Routing, vec![ModelSpec::scripted("flaky", "unused")]);
        spec.repetitions = 1;
        spec.jobs = 1;
        let report = run_with(&spec, &models, &HashEmbedder::new(), None, &FixtureSet::builtin()).unwrap();
        assert_eq!(flaky.0.load(std::sync::atomic::Ordering::SeqCst), 8 * 3);
        assert!(report.runs.iter().all(|r| r.invalid.is_some()));
        assert_eq!(report.cell("flaky", TOTAL_ITEM, METRIC_SUCCESS).unwrap().percent, "0.0");
        assert_eq!(report.warnings.len(), 8);
    }

    #[test]
    fn csv_has_the_documented_columns() {
        let report = run_phase(&scripted_spec(Phase::Routing), &FixtureSet::builtin()).unwrap();
        let csv = report.to_csv().unwrap();
        assert!(csv.starts_with("phase,model,scenario/question,metric,numerator,denominator,percent\n"));
        assert_eq!(csv.lines().count(), 1 + report.cells.len());
    }
}

//! End-to-end competition driver.
//!
//! State lives in a directory of plain files, one per stage:
//!
//! | file               | written by            |
//! |--------------------|-----------------------|
//! | `state.json`       | every stage           |
//! | `config.json`      | [`Pipeline::init`]    |
//! | `pool.jsonl`       | [`Pipeline::init`]    |
//! | `responses.jsonl`  | [`Pipeline::collect_responses`] |
//! | `selections.jsonl` | [`Pipeline::select`]  |
//! | `tasks.jsonl`      | [`Pipeline::enqueue`] |
//! | `submissions.jsonl`| the annotation queue  |
//! | `judgments.jsonl`  | [`Pipeline::rank`]    |
//! | `ratings.json`     | [`Pipeline::rank`]    |
//! | `reports/`         | [`Pipeline::report`]  |
//!
//! Every stage checks `state.json` first and returns immediately when it has
//! already completed, so an interrupted run is resumed by running it again.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use chrono::{DateTime, Duration};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotation::{build_tasks, AnnotationError, Task, TaskQueue};
use crate::clock::{Clock, ManualClock, SystemClock};
use crate::config::{CompetitionConfig, ConfigError, MetricKind};
use crate::embed::{EmbedError, Embedder, EmbeddingSimilarity, EmbeddingVector, JudgeSimilarity, SimilarityBackend};
use crate::jsonl::{self, JsonlError};
use crate::model::{
    content_hash, Instruction, InstructionId, Judgment, ModelId, RatingTable, Response, ResponseStatus,
};
use crate::provider::{generator_for, EmbeddingProvider, ProviderError, TextGenerator};
use crate::rating::{elo_bootstrap, leaderboard, ratings_csv, win_matrix, BootstrapReport, RatingError};
use crate::report::{selections_listing, srcc_curve, srcc_curve_csv};
use crate::selector::{
    build_response_set, select_for_new_model, ResponseSet, SelectError, SelectionInputs, SelectionResult,
};
use crate::sim::{SimError, SimulatedAnnotator};
use crate::store::ResponseStore;
use crate::template::{PromptTemplate, TemplateError};

pub const STATE: &str = "state.json";
pub const CONFIG: &str = "config.json";
pub const POOL: &str = "pool.jsonl";
pub const RESPONSES: &str = "responses.jsonl";
pub const SELECTIONS: &str = "selections.jsonl";
pub const TASKS: &str = "tasks.jsonl";
pub const SUBMISSIONS: &str = "submissions.jsonl";
pub const JUDGMENTS: &str = "judgments.jsonl";
pub const RATINGS: &str = "ratings.json";
pub const REPORTS: &str = "reports";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("no competition state in {0}")]
    NoState(PathBuf),
    #[error("stage `{needed:?}` required, state is at `{found:?}`")]
    Stage { needed: Stage, found: Stage },
    #[error("instruction pool is empty")]
    EmptyPool,
    #[error("instruction id {0} appears twice in the pool")]
    DuplicateInstruction(InstructionId),
    #[error("model `{0}` is not configured")]
    UnknownModel(ModelId),
    #[error("model `{0}` is already part of the competition")]
    DuplicateModel(ModelId),
    #[error("too many failed responses: {0}")]
    TooManyFailures(String),
    #[error("no judgments have been collected")]
    NoJudgments,
    #[error("no judgments collected yet for the tasks of `{0}`; ratings left unchanged")]
    NoNewJudgments(ModelId),
    #[error("a model addition is still waiting for judgments")]
    AdditionPending,
    #[error("{0}")]
    Io(#[from] JsonlError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Select(#[from] SelectError),
    #[error(transparent)]
    Annotation(#[from] AnnotationError),
    #[error(transparent)]
    Rating(#[from] RatingError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Template(#[from] TemplateError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    PoolBuilt,
    ResponsesCollected,
    Selected,
    Judging,
    Rated,
}

/// A model added after the initial competition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Addition {
    pub model: ModelId,
    /// Tasks with ids from here on belong to this addition.
    pub first_task: u64,
    pub tasks: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompetitionState {
    pub stage: Stage,
    pub models: Vec<ModelId>,
    pub pool_size: usize,
    pub tasks: usize,
    /// Pairs that could not be selected for, with the reason.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub selection_failures: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub additions: Vec<Addition>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pending_addition: Option<Addition>,
}

/// Simulated judgments get timestamps from a fixed start, one second apart.
const SIMULATION_EPOCH: i64 = 1_704_067_200; // 2024-01-01T00:00:00Z

pub struct Pipeline {
    dir: PathBuf,
    cfg: CompetitionConfig,
    clock: Arc<dyn Clock>,
    generators: HashMap<ModelId, Arc<dyn TextGenerator>>,
    embedding_provider: Option<Arc<dyn EmbeddingProvider>>,
    judge: Option<Arc<dyn TextGenerator>>,
    embedder: Mutex<Option<Arc<Embedder>>>,
    stages_run: Mutex<Vec<Stage>>,
}

impl Pipeline {
    pub fn new(dir: impl Into<PathBuf>, cfg: CompetitionConfig) -> Self {
        Self {
            dir: dir.into(),
            cfg,
            clock: Arc::new(SystemClock),
            generators: HashMap::new(),
            embedding_provider: None,
            judge: None,
            embedder: Mutex::new(None),
            stages_run: Mutex::new(Vec::new()),
        }
    }

    pub fn with_clock(mut self, clock: Arc<dyn Clock>) -> Self {
        self.clock = clock;
        self
    }

    /// Uses `generator` for `model` instead of the configured provider.
    pub fn with_generator(mut self, model: impl Into<ModelId>, generator: Arc<dyn TextGenerator>) -> Self {
        self.generators.insert(model.into(), generator);
        self
    }

    pub fn with_embedding_provider(mut self, provider: Arc<dyn EmbeddingProvider>) -> Self {
        self.embedding_provider = Some(provider);
        self
    }

    pub fn with_judge(mut self, judge: Arc<dyn TextGenerator>) -> Self {
        self.judge = Some(judge);
        self
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn config(&self) -> &CompetitionConfig {
        &self.cfg
    }

    pub fn path(&self, file: &str) -> PathBuf {
        self.dir.join(file)
    }

    /// Stages this instance actually executed (skipped ones are not listed).
    pub fn stages_run(&self) -> Vec<Stage> {
        self.stages_run.lock().unwrap().clone()
    }

    fn ran(&self, s: Stage) {
        self.stages_run.lock().unwrap().push(s);
    }

    pub fn state(&self) -> Result<Option<CompetitionState>, PipelineError> {
        let path = self.path(STATE);
        if !path.exists() {
            return Ok(None);
        }
        let bytes = std::fs::read(&path).map_err(|e| JsonlError::Io {
            path: path.clone(),
            source: e,
        })?;
        let state = serde_json::from_slice(&bytes).map_err(|e| JsonlError::Parse {
            path,
            line: 1,
            message: e.to_string(),
        })?;
        Ok(Some(state))
    }

    fn require_state(&self) -> Result<CompetitionState, PipelineError> {
        self.state()?.ok_or_else(|| PipelineError::NoState(self.dir.clone()))
    }

    fn save_state(&self, state: &CompetitionState) -> Result<(), PipelineError> {
        write_json(&self.path(STATE), state)
    }

    fn at_least(state: &CompetitionState, needed: Stage) -> Result<(), PipelineError> {
        if state.stage < needed {
            return Err(PipelineError::Stage {
                needed,
                found: state.stage,
            });
        }
        Ok(())
    }

    pub fn pool(&self) -> Result<Vec<Instruction>, PipelineError> {
        Ok(jsonl::read(&self.path(POOL))?)
    }

    pub fn responses(&self) -> Result<ResponseStore, PipelineError> {
        Ok(ResponseStore::load(&self.path(RESPONSES))?)
    }

    pub fn selections(&self) -> Result<Vec<SelectionResult>, PipelineError> {
        Ok(jsonl::read_or_empty(&self.path(SELECTIONS))?)
    }

    pub fn tasks(&self) -> Result<Vec<Task>, PipelineError> {
        Ok(jsonl::read_or_empty(&self.path(TASKS))?)
    }

    pub fn ratings(&self) -> Result<BootstrapReport, PipelineError> {
        let path = self.path(RATINGS);
        let bytes = std::fs::read(&path).map_err(|e| JsonlError::Io {
            path: path.clone(),
            source: e,
        })?;
        serde_json::from_slice(&bytes).map_err(|e| {
            PipelineError::Io(JsonlError::Parse {
                path,
                line: 1,
                message: e.to_string(),
            })
        })
    }

    /// Starts a competition over `pool`. No-op if the directory already holds one.
    pub fn init(&self, pool: &[Instruction]) -> Result<CompetitionState, PipelineError> {
        if let Some(s) = self.state()? {
            return Ok(s);
        }
        if pool.is_empty() {
            return Err(PipelineError::EmptyPool);
        }
        let mut seen = HashSet::new();
        for ins in pool {
            if !seen.insert(&ins.id) {
                return Err(PipelineError::DuplicateInstruction(ins.id.clone()));
            }
        }
        self.cfg.validate()?;
        let models = self.cfg.initial_models();
        for m in &models {
            self.generator(m)?;
        }
        jsonl::write(&self.path(POOL), None, pool)?;
        write_json(&self.path(CONFIG), &self.cfg)?;
        let state = CompetitionState {
            stage: Stage::PoolBuilt,
            models,
            pool_size: pool.len(),
            tasks: 0,
            selection_failures: BTreeMap::new(),
            additions: Vec::new(),
            pending_addition: None,
        };
        self.save_state(&state)?;
        self.ran(Stage::PoolBuilt);
        Ok(state)
    }

    /// Reads the pool file named in the configuration and calls [`Self::init`].
    pub fn init_from_config(&self) -> Result<CompetitionState, PipelineError> {
        if let Some(s) = self.state()? {
            return Ok(s);
        }
        let path = self
            .cfg
            .pool
            .clone()
            .ok_or_else(|| ConfigError::Invalid("`pool` is not set".into()))?;
        self.init(&jsonl::read::<Instruction>(&path)?)
    }

    fn generator(&self, model: &ModelId) -> Result<Arc<dyn TextGenerator>, PipelineError> {
        if let Some(g) = self.generators.get(model) {
            return Ok(g.clone());
        }
        let m = self
            .cfg
            .model(model)
            .ok_or_else(|| PipelineError::UnknownModel(model.clone()))?;
        Ok(Arc::from(generator_for(m)?))
    }

    fn embedder(&self) -> Result<Arc<Embedder>, PipelineError> {
        let mut slot = self.embedder.lock().unwrap();
        if let Some(e) = slot.as_ref() {
            return Ok(e.clone());
        }
        let provider = match &self.embedding_provider {
            Some(p) => p.clone(),
            None => self.cfg.embedding.provider()?,
        };
        let e = Arc::new(self.cfg.embedding.embedder(provider, &self.dir)?);
        *slot = Some(e.clone());
        Ok(e)
    }

    fn similarity_backend(&self) -> Result<Box<dyn SimilarityBackend>, PipelineError> {
        match self.cfg.similarity.metric {
            MetricKind::Embedding => Ok(Box::new(EmbeddingSimilarity::new(self.embedder()?))),
            MetricKind::Judge => {
                let judge_ref = self.cfg.similarity.judge.as_ref().expect("validated");
                let judge = match &self.judge {
                    Some(j) => j.clone(),
                    None => Arc::from(generator_for(judge_ref)?),
                };
                let source = match &self.cfg.similarity.judge_template {
                    Some(p) => std::fs::read_to_string(p).map_err(|e| ConfigError::Read {
                        path: p.clone(),
                        source: e,
                    })?,
                    None => DEFAULT_JUDGE_TEMPLATE.to_owned(),
                };
                Ok(Box::new(JudgeSimilarity::new(
                    judge,
                    PromptTemplate::parse(&source)?,
                    judge_ref.generation_params.clone(),
                    self.cfg.seed,
                )?))
            }
        }
    }

    fn collect(
        &self,
        models: &[ModelId],
        pool: &[Instruction],
        store: &mut ResponseStore,
    ) -> Result<(), PipelineError> {
        let generators: Vec<(ModelId, Arc<dyn TextGenerator>)> = models
            .iter()
            .map(|m| Ok((m.clone(), self.generator(m)?)))
            .collect::<Result<_, PipelineError>>()?;
        let todo: Vec<(&ModelId, &Arc<dyn TextGenerator>, &Instruction)> = generators
            .iter()
            .flat_map(|(m, g)| pool.iter().map(move |ins| (m, g, ins)))
            .filter(|(m, _, ins)| !store.get(&ins.id, m).is_some_and(Response::is_usable))
            .collect();
        log::info!("collecting {} responses", todo.len());

        let sink = Mutex::new(());
        let path = self.path(RESPONSES);
        let workers = rayon::ThreadPoolBuilder::new()
            .num_threads(self.cfg.responses.concurrency.max(1))
            .build()
            .expect("thread pool");
        let fresh: Vec<Response> = workers.install(|| {
            todo.par_iter()
                .map(|(m, g, ins)| {
                    let params = &self.cfg.model(m).map(|r| r.generation_params.clone()).unwrap_or_default();
                    let start = self.clock.now();
                    let result = self.cfg.responses.retry.run(|_| g.generate(&ins.text, params));
                    let latency_ms = (self.clock.now() - start).num_milliseconds().max(0) as u64;
                    let (text, status) = match result {
                        Ok(g) if g.text.trim().is_empty() => (String::new(), ResponseStatus::Failed),
                        Ok(g) if g.truncated => (g.text, ResponseStatus::Truncated),
                        Ok(g) => (g.text, ResponseStatus::Ok),
                        Err(e) => {
                            log::warn!("{m} failed on {}: {e}", ins.id);
                            (String::new(), ResponseStatus::Failed)
                        }
                    };
                    let r = Response {
                        instruction_id: ins.id.clone(),
                        model_id: (*m).clone(),
                        embedding_key: (!text.is_empty()).then(|| content_hash(&text)),
                        text,
                        status,
                        latency_ms,
                    };
                    let _guard = sink.lock().unwrap();
                    jsonl::append(&path, &r)?;
                    Ok(r)
                })
                .collect::<Result<_, JsonlError>>()
        })?;
        for r in fresh {
            store.insert(r);
        }
        store.save(&path)?;

        let mut tally = Vec::new();
        for m in models {
            let failed = pool
                .iter()
                .filter(|ins| !store.get(&ins.id, m).is_some_and(Response::is_usable))
                .count();
            if failed as f64 > self.cfg.responses.max_failure_fraction * pool.len() as f64 {
                tally.push(format!("{m}: {failed}/{} failed", pool.len()));
            }
        }
        if !tally.is_empty() {
            return Err(PipelineError::TooManyFailures(tally.join("; ")));
        }
        Ok(())
    }

    /// One response per (model, instruction). Usable responses already on disk are kept.
    pub fn collect_responses(&self) -> Result<CompetitionState, PipelineError> {
        let mut state = self.require_state()?;
        if state.stage >= Stage::ResponsesCollected {
            return Ok(state);
        }
        let pool = self.pool()?;
        let mut store = self.responses()?;
        self.collect(&state.models, &pool, &mut store)?;
        state.stage = Stage::ResponsesCollected;
        self.save_state(&state)?;
        self.ran(Stage::ResponsesCollected);
        Ok(state)
    }

    fn instruction_embeddings(&self, pool: &[Instruction]) -> Result<HashMap<InstructionId, EmbeddingVector>, PipelineError> {
        let texts: Vec<&str> = pool.iter().map(|i| i.text.as_str()).collect();
        let vectors = self.embedder()?.embed_texts(&texts)?;
        Ok(pool.iter().map(|i| i.id.clone()).zip(vectors).collect())
    }

    fn run_selection(
        &self,
        pool: &[Instruction],
        responses: &ResponseStore,
        f: impl FnOnce(&SelectionInputs<'_>) -> Result<ResponseSet, SelectError>,
    ) -> Result<ResponseSet, PipelineError> {
        let ids: Vec<InstructionId> = pool.iter().map(|i| i.id.clone()).collect();
        let backend = self.similarity_backend()?;
        let embeddings = if self.cfg.selection.lambda > 0.0 {
            self.instruction_embeddings(pool)?
        } else {
            HashMap::new()
        };
        let inputs = SelectionInputs {
            pool: &ids,
            responses,
            similarity: backend.as_ref(),
            embeddings: &embeddings,
        };
        Ok(f(&inputs)?)
    }

    /// Top-K instructions for every model pair.
    pub fn select(&self) -> Result<CompetitionState, PipelineError> {
        let mut state = self.require_state()?;
        Self::at_least(&state, Stage::ResponsesCollected)?;
        if state.stage >= Stage::Selected {
            return Ok(state);
        }
        let pool = self.pool()?;
        let responses = self.responses()?;
        let set = self.run_selection(&pool, &responses, |inputs| {
            build_response_set(&state.models, inputs, &self.cfg.selection)
        })?;
        state.selection_failures = set
            .failures
            .iter()
            .map(|(p, e)| (p.to_string(), e.to_string()))
            .collect();
        jsonl::write(&self.path(SELECTIONS), None, set.selections.values())?;
        state.stage = Stage::Selected;
        self.save_state(&state)?;
        self.ran(Stage::Selected);
        Ok(state)
    }

    /// Turns selections into annotation tasks.
    pub fn enqueue(&self) -> Result<CompetitionState, PipelineError> {
        let mut state = self.require_state()?;
        Self::at_least(&state, Stage::Selected)?;
        if state.stage >= Stage::Judging {
            return Ok(state);
        }
        let pool = pool_index(self.pool()?);
        let tasks = build_tasks(
            &self.selections()?,
            &pool,
            &self.responses()?,
            self.cfg.annotation.side_seed,
            1,
        )?;
        jsonl::write(&self.path(TASKS), None, &tasks)?;
        state.tasks = tasks.len();
        state.stage = Stage::Judging;
        self.save_state(&state)?;
        self.ran(Stage::Judging);
        Ok(state)
    }

    /// The persistent annotation queue over all tasks.
    pub fn open_queue(&self, clock: Arc<dyn Clock>) -> Result<TaskQueue, PipelineError> {
        let state = self.require_state()?;
        Self::at_least(&state, Stage::Judging)?;
        Ok(TaskQueue::open(
            self.tasks()?,
            &self.path(SUBMISSIONS),
            self.cfg.annotation.lease.clone(),
            clock,
        )?)
    }

    /// Works through the queue with simulated annotators. Returns the number of
    /// judgments added.
    pub fn simulate_judging(&self) -> Result<usize, PipelineError> {
        let sim = &self.cfg.simulation;
        let annotator = SimulatedAnnotator::new(sim.skills.clone(), sim.tie_width, sim.seed)?;
        let clock = Arc::new(ManualClock::stepping(
            DateTime::from_timestamp(SIMULATION_EPOCH, 0).expect("valid epoch"),
            Duration::seconds(1),
        ));
        let mut queue = self.open_queue(clock)?;
        let before = queue.submissions().len();
        let by_id: HashMap<u64, Task> = queue.tasks().iter().map(|t| (t.id, t.clone())).collect();
        for i in 1..=sim.annotators.max(1) {
            let name = format!("sim-{i:03}");
            while let Some(payload) = queue.next_task(&name)? {
                let choice = annotator.choose(&by_id[&payload.task_id], &name)?;
                queue.submit(payload.task_id, &name, choice)?;
            }
        }
        Ok(queue.submissions().len() - before)
    }

    /// All collected judgments, ordered by task.
    pub fn judgments(&self) -> Result<Vec<Judgment>, PipelineError> {
        let clock: Arc<dyn Clock> = self.clock.clone();
        Ok(self.open_queue(clock)?.judgments())
    }

    /// Bootstrapped Elo over every collected judgment.
    pub fn rank(&self) -> Result<RatingTable, PipelineError> {
        let mut state = self.require_state()?;
        Self::at_least(&state, Stage::Judging)?;
        let queue = self.open_queue(self.clock.clone())?;
        if let Some(add) = &state.pending_addition {
            let fresh = queue
                .submissions()
                .iter()
                .filter(|s| s.task_id >= add.first_task)
                .count();
            if fresh == 0 {
                return Err(PipelineError::NoNewJudgments(add.model.clone()));
            }
        }
        let judgments = queue.judgments();
        let report = if judgments.is_empty() {
            if state.tasks > 0 {
                return Err(PipelineError::NoJudgments);
            }
            // No pairs to judge (a single model): everyone keeps the initial rating.
            let table = RatingTable::from_ratings(state.models.iter().map(|m| (m.clone(), self.cfg.elo.s0, 0.0)));
            BootstrapReport {
                entries: table
                    .rows
                    .into_iter()
                    .map(|r| crate::rating::BootstrapEntry {
                        model: r.model,
                        mean_rating: r.mean_rating,
                        rating_std: r.rating_std,
                        rank: r.rank,
                    })
                    .collect(),
                replicates: self.cfg.elo.replicates,
                seed: self.cfg.elo.seed,
                judgments: 0,
            }
        } else {
            elo_bootstrap(&judgments, &state.models, &self.cfg.elo)?
        };
        std::fs::write(self.path(JUDGMENTS), queue.export_judgments()?).map_err(|e| JsonlError::Io {
            path: self.path(JUDGMENTS),
            source: e,
        })?;
        write_json(&self.path(RATINGS), &report)?;
        if let Some(add) = state.pending_addition.take() {
            state.additions.push(add);
        }
        state.stage = Stage::Rated;
        self.save_state(&state)?;
        self.ran(Stage::Rated);
        Ok(report.table())
    }

    /// Every stage in order. With `simulate`, judgments come from simulated
    /// annotators; otherwise the run stops at the judging stage (returning
    /// `None`) so the annotation service can be started.
    pub fn run(&self, simulate: bool) -> Result<Option<RatingTable>, PipelineError> {
        self.init_from_config_or_existing()?;
        self.collect_responses()?;
        self.select()?;
        self.enqueue()?;
        let state = self.require_state()?;
        if state.stage == Stage::Rated && state.pending_addition.is_none() {
            return Ok(Some(self.ratings()?.table()));
        }
        if !simulate {
            return Ok(None);
        }
        self.simulate_judging()?;
        self.rank().map(Some)
    }

    pub fn init_from_config_or_existing(&self) -> Result<CompetitionState, PipelineError> {
        match self.state()? {
            Some(s) => Ok(s),
            None => self.init_from_config(),
        }
    }

    /// Adds `model` to a rated competition: collects its responses, selects
    /// instructions against each existing model, and enqueues the new tasks.
    /// With `simulate`, also judges them and re-rates over all judgments.
    pub fn add_model(&self, model: &ModelId, simulate: bool) -> Result<Option<RatingTable>, PipelineError> {
        let mut state = self.require_state()?;
        Self::at_least(&state, Stage::Rated)?;
        if state.pending_addition.is_some() {
            return Err(PipelineError::AdditionPending);
        }
        if state.models.contains(model) {
            return Err(PipelineError::DuplicateModel(model.clone()));
        }
        let pool = self.pool()?;
        let mut responses = self.responses()?;
        self.collect(std::slice::from_ref(model), &pool, &mut responses)?;
        let set = self.run_selection(&pool, &responses, |inputs| {
            select_for_new_model(&state.models, model, inputs, &self.cfg.selection)
        })?;
        for (p, e) in &set.failures {
            state.selection_failures.insert(p.to_string(), e.to_string());
        }
        let mut all: BTreeMap<_, _> = self
            .selections()?
            .into_iter()
            .map(|s| (s.pair.clone(), s))
            .collect();
        all.extend(set.selections.clone());
        jsonl::write(&self.path(SELECTIONS), None, all.values())?;

        let mut tasks = self.tasks()?;
        let first_task = tasks.iter().map(|t| t.id).max().unwrap_or(0) + 1;
        let fresh = build_tasks(
            set.selections.values(),
            &pool_index(pool),
            &responses,
            self.cfg.annotation.side_seed,
            first_task,
        )?;
        let added = fresh.len();
        tasks.extend(fresh);
        jsonl::write(&self.path(TASKS), None, &tasks)?;

        state.models.push(model.clone());
        state.tasks = tasks.len();
        state.pending_addition = Some(Addition {
            model: model.clone(),
            first_task,
            tasks: added,
        });
        self.save_state(&state)?;
        if !simulate {
            return Ok(None);
        }
        self.simulate_judging()?;
        self.rank().map(Some)
    }

    /// Writes the leaderboard, rating table, win matrix, selection listing and,
    /// when enabled, the ranking-agreement-versus-K curve. Returns the files written.
    pub fn report(&self) -> Result<Vec<PathBuf>, PipelineError> {
        let state = self.require_state()?;
        Self::at_least(&state, Stage::Rated)?;
        let dir = self.path(REPORTS);
        let table = self.ratings()?.table();
        let judgments = self.judgments()?;
        let selections = self.selections()?;
        let names: HashMap<ModelId, String> = self
            .cfg
            .models
            .iter()
            .map(|m| (m.model.id.clone(), m.model.display_name.clone()))
            .collect();
        let mut files = vec![
            ("leaderboard.txt", leaderboard(&table, &names)),
            ("ratings.csv", ratings_csv(&table)),
            ("win_matrix.csv", win_matrix(&judgments, &state.models).to_csv()),
            ("selections.txt", selections_listing(&selections, &pool_index(self.pool()?))),
        ];
        if self.cfg.report.k_sweep && state.models.len() >= 2 && !judgments.is_empty() {
            let curve = srcc_curve(&judgments, &selections, &state.models, &self.cfg.elo)?;
            files.push(("srcc_curve.csv", srcc_curve_csv(&curve)));
        }
        let mut written = Vec::new();
        for (name, body) in files {
            let path = dir.join(name);
            jsonl::write_atomic(&path, body.as_bytes())?;
            written.push(path);
        }
        Ok(written)
    }
}

fn pool_index(pool: Vec<Instruction>) -> HashMap<InstructionId, Instruction> {
    pool.into_iter().map(|i| (i.id.clone(), i)).collect()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    let mut body = serde_json::to_string_pretty(value).map_err(JsonlError::Encode)?;
    body.push('\n');
    Ok(jsonl::write_atomic(path, body.as_bytes())?)
}

/// Used when the judge metric is selected without a template file.
pub const DEFAULT_JUDGE_TEMPLATE: &str = include_str!("../../../templates/similarity_judge.txt");

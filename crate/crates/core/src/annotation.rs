//! Blind 3-AFC task queue.
//!
//! Each selected response pair becomes one [`Task`]. Which model is shown on
//! the left is decided once per task by a seeded coin and never changes, so
//! every annotator of a task sees the same layout. Clients only ever receive
//! [`TaskPayload`], which carries no model identity.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::{DateTime, Duration, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::clock::Clock;
use crate::jsonl::{self, JsonlError};
use crate::model::{
    encode_outcome, Choice, Instruction, InstructionId, Judgment, ModelError, ModelId, PairKey,
};
use crate::selector::SelectionResult;
use crate::store::ResponseStore;

pub const EXPORT_HEADER: &str = "madeval judgments; outcome 1 = model_a won, 0 = model_b won, 0.5 = tie";

#[derive(Debug, Error)]
pub enum AnnotationError {
    #[error("unknown task {0}")]
    NotFound(u64),
    #[error("task {task} is not leased to `{annotator}` (lease expired or never held)")]
    LeaseExpired { task: u64, annotator: String },
    #[error("annotator id must be non-empty")]
    EmptyAnnotator,
    #[error("selection for {pair} references {what} that is not available")]
    MissingArtifact { pair: PairKey, what: String },
    #[error("lease duration must be positive")]
    InvalidLease,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] JsonlError),
}

/// One response pair to judge. Server-side only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub id: u64,
    pub pair: PairKey,
    pub instruction_id: InstructionId,
    pub instruction: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_answer: Option<String>,
    pub response_left: String,
    pub response_right: String,
    pub left_is: ModelId,
}

/// What an annotator's browser receives.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskPayload {
    pub task_id: u64,
    pub instruction: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_answer: Option<String>,
    pub response_left: String,
    pub response_right: String,
    pub lease_expires_at: DateTime<Utc>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LeaseConfig {
    pub lease_secs: i64,
    pub judgments_required: usize,
    pub show_reference: bool,
}

impl Default for LeaseConfig {
    fn default() -> Self {
        Self {
            lease_secs: 600,
            judgments_required: 1,
            show_reference: true,
        }
    }
}

/// Seeded fair coin: does `model_a` go on the left for this task?
pub fn a_on_left(seed: u64, pair: &PairKey, instruction: &InstructionId) -> bool {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(pair.model_a().as_str().as_bytes());
    h.update([0]);
    h.update(pair.model_b().as_str().as_bytes());
    h.update([0]);
    h.update(instruction.as_str().as_bytes());
    h.finalize()[0] & 1 == 0
}

/// Turns selections into tasks numbered from `first_id`, in pair then pick order.
pub fn build_tasks<'a>(
    selections: impl IntoIterator<Item = &'a SelectionResult>,
    pool: &HashMap<InstructionId, Instruction>,
    responses: &ResponseStore,
    side_seed: u64,
    first_id: u64,
) -> Result<Vec<Task>, AnnotationError> {
    let mut tasks = Vec::new();
    let mut id = first_id;
    for sel in selections {
        for pick in &sel.picks {
            let missing = |what: String| AnnotationError::MissingArtifact {
                pair: sel.pair.clone(),
                what,
            };
            let ins = pool
                .get(&pick.instruction_id)
                .ok_or_else(|| missing(format!("instruction {}", pick.instruction_id)))?;
            let text = |m: &ModelId| {
                responses
                    .get(&pick.instruction_id, m)
                    .filter(|r| r.is_usable())
                    .map(|r| r.text.clone())
                    .ok_or_else(|| missing(format!("response of {m} to {}", pick.instruction_id)))
            };
            let (a, b) = (sel.pair.model_a(), sel.pair.model_b());
            let (left, right) = if a_on_left(side_seed, &sel.pair, &pick.instruction_id) {
                (a, b)
            } else {
                (b, a)
            };
            tasks.push(Task {
                id,
                pair: sel.pair.clone(),
                instruction_id: pick.instruction_id.clone(),
                instruction: ins.text.clone(),
                reference_answer: ins.reference_answer.clone(),
                response_left: text(left)?,
                response_right: text(right)?,
                left_is: left.clone(),
            });
            id += 1;
        }
    }
    Ok(tasks)
}

/// A persisted submission: the canonical judgment plus what the annotator clicked.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Submission {
    pub task_id: u64,
    pub choice: Choice,
    pub judgment: Judgment,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ack {
    pub task_id: u64,
    pub duplicate: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub done: usize,
    pub leased: usize,
    pub remaining: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairProgress {
    /// Position of the pair in canonical order; pair identities are not exposed.
    pub pair_index: usize,
    #[serde(flatten)]
    pub counts: Counts,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SideTally {
    pub left: usize,
    pub right: usize,
    pub tie: usize,
    /// Tasks whose left side shows `model_a`.
    pub tasks_a_left: usize,
    pub tasks: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub total: Counts,
    pub judgments: usize,
    pub pairs: Vec<PairProgress>,
    pub sides: SideTally,
}

#[derive(Clone, Debug)]
struct Lease {
    annotator: String,
    expires: DateTime<Utc>,
}

pub struct TaskQueue {
    tasks: Vec<Task>,
    position: HashMap<u64, usize>,
    submissions: Vec<Submission>,
    judged_by: HashMap<u64, HashSet<String>>,
    leases: HashMap<u64, Lease>,
    cfg: LeaseConfig,
    clock: Arc<dyn Clock>,
    sink: Option<PathBuf>,
}

impl TaskQueue {
    pub fn new(tasks: Vec<Task>, cfg: LeaseConfig, clock: Arc<dyn Clock>) -> Result<Self, AnnotationError> {
        if cfg.lease_secs <= 0 {
            return Err(AnnotationError::InvalidLease);
        }
        let mut tasks = tasks;
        tasks.sort_by_key(|t| t.id);
        let position = tasks.iter().enumerate().map(|(i, t)| (t.id, i)).collect();
        Ok(Self {
            tasks,
            position,
            submissions: Vec::new(),
            judged_by: HashMap::new(),
            leases: HashMap::new(),
            cfg,
            clock,
            sink: None,
        })
    }

    /// Opens a queue whose submissions are appended to `submissions_path`,
    /// replaying any already stored there.
    pub fn open(
        tasks: Vec<Task>,
        submissions_path: &Path,
        cfg: LeaseConfig,
        clock: Arc<dyn Clock>,
    ) -> Result<Self, AnnotationError> {
        let mut q = Self::new(tasks, cfg, clock)?;
        for s in jsonl::read_or_empty::<Submission>(submissions_path)? {
            if !q.position.contains_key(&s.task_id) {
                return Err(AnnotationError::NotFound(s.task_id));
            }
            q.record(s);
        }
        q.sink = Some(submissions_path.to_path_buf());
        Ok(q)
    }

    fn record(&mut self, s: Submission) {
        self.judged_by
            .entry(s.task_id)
            .or_default()
            .insert(s.judgment.annotator_id.clone());
        self.submissions.push(s);
    }

    pub fn tasks(&self) -> &[Task] {
        &self.tasks
    }

    pub fn submissions(&self) -> &[Submission] {
        &self.submissions
    }

    pub fn config(&self) -> &LeaseConfig {
        &self.cfg
    }

    fn done_count(&self, task: u64) -> usize {
        self.judged_by.get(&task).map_or(0, HashSet::len)
    }

    fn is_done(&self, task: u64) -> bool {
        self.done_count(task) >= self.cfg.judgments_required
    }

    fn expire_leases(&mut self, now: DateTime<Utc>) {
        self.leases.retain(|_, l| l.expires > now);
    }

    fn payload(&self, t: &Task, expires: DateTime<Utc>) -> TaskPayload {
        TaskPayload {
            task_id: t.id,
            instruction: t.instruction.clone(),
            reference_answer: t.reference_answer.clone().filter(|_| self.cfg.show_reference),
            response_left: t.response_left.clone(),
            response_right: t.response_right.clone(),
            lease_expires_at: expires,
        }
    }

    /// Leases the next task this annotator may judge, or `None` when there is none.
    /// An annotator holding a live lease gets that task again.
    pub fn next_task(&mut self, annotator: &str) -> Result<Option<TaskPayload>, AnnotationError> {
        if annotator.trim().is_empty() {
            return Err(AnnotationError::EmptyAnnotator);
        }
        let now = self.clock.now();
        self.expire_leases(now);
        if let Some((&id, lease)) = self.leases.iter().find(|(_, l)| l.annotator == annotator) {
            let t = &self.tasks[self.position[&id]];
            return Ok(Some(self.payload(t, lease.expires)));
        }
        let Some(t) = self.tasks.iter().find(|t| {
            !self.is_done(t.id)
                && !self.leases.contains_key(&t.id)
                && !self
                    .judged_by
                    .get(&t.id)
                    .is_some_and(|s| s.contains(annotator))
        }) else {
            return Ok(None);
        };
        let expires = now + Duration::seconds(self.cfg.lease_secs);
        let payload = self.payload(t, expires);
        self.leases.insert(
            t.id,
            Lease {
                annotator: annotator.to_owned(),
                expires,
            },
        );
        Ok(Some(payload))
    }

    /// Records a choice for a leased task and releases the lease.
    pub fn submit(&mut self, task_id: u64, annotator: &str, choice: Choice) -> Result<Ack, AnnotationError> {
        let &pos = self
            .position
            .get(&task_id)
            .ok_or(AnnotationError::NotFound(task_id))?;
        if self
            .judged_by
            .get(&task_id)
            .is_some_and(|s| s.contains(annotator))
        {
            return Ok(Ack {
                task_id,
                duplicate: true,
            });
        }
        let now = self.clock.now();
        self.expire_leases(now);
        match self.leases.get(&task_id) {
            Some(l) if l.annotator == annotator => {}
            _ => {
                return Err(AnnotationError::LeaseExpired {
                    task: task_id,
                    annotator: annotator.to_owned(),
                })
            }
        }
        let t = &self.tasks[pos];
        let outcome = encode_outcome(choice, &t.left_is, &t.pair)?;
        let s = Submission {
            task_id,
            choice,
            judgment: Judgment {
                pair: t.pair.clone(),
                instruction_id: t.instruction_id.clone(),
                annotator_id: annotator.to_owned(),
                outcome,
                presented_left: t.left_is.clone(),
                submitted_at: now,
            },
        };
        if let Some(path) = &self.sink {
            jsonl::append(path, &s)?;
        }
        self.record(s);
        self.leases.remove(&task_id);
        Ok(Ack {
            task_id,
            duplicate: false,
        })
    }

    /// Pairs in canonical order; `Progress::pairs[i]` refers to `pair_keys()[i]`.
    pub fn pair_keys(&self) -> Vec<PairKey> {
        let set: std::collections::BTreeSet<&PairKey> = self.tasks.iter().map(|t| &t.pair).collect();
        set.into_iter().cloned().collect()
    }

    pub fn progress(&mut self) -> Progress {
        let now = self.clock.now();
        self.expire_leases(now);
        let keys = self.pair_keys();
        let index: BTreeMap<&PairKey, usize> = keys.iter().enumerate().map(|(i, k)| (k, i)).collect();
        let mut pairs: Vec<PairProgress> = (0..keys.len())
            .map(|i| PairProgress {
                pair_index: i,
                counts: Counts::default(),
            })
            .collect();
        let mut p = Progress {
            judgments: self.submissions.len(),
            ..Progress::default()
        };
        for t in &self.tasks {
            let slot = if self.is_done(t.id) {
                |c: &mut Counts| c.done += 1
            } else if self.leases.contains_key(&t.id) {
                |c: &mut Counts| c.leased += 1
            } else {
                |c: &mut Counts| c.remaining += 1
            };
            slot(&mut p.total);
            slot(&mut pairs[index[&t.pair]].counts);
            p.sides.tasks += 1;
            if &t.left_is == t.pair.model_a() {
                p.sides.tasks_a_left += 1;
            }
        }
        for s in &self.submissions {
            match s.choice {
                Choice::Left => p.sides.left += 1,
                Choice::Right => p.sides.right += 1,
                Choice::Tie => p.sides.tie += 1,
            }
        }
        p.pairs = pairs;
        p
    }

    /// Canonical judgments ordered by task id, then submission order.
    pub fn judgments(&self) -> Vec<Judgment> {
        let mut subs: Vec<(usize, &Submission)> = self.submissions.iter().enumerate().collect();
        subs.sort_by_key(|(i, s)| (s.task_id, *i));
        subs.into_iter().map(|(_, s)| s.judgment.clone()).collect()
    }

    pub fn export_judgments(&self) -> Result<String, AnnotationError> {
        Ok(jsonl::to_string(Some(EXPORT_HEADER), &self.judgments())?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::ManualClock;
    use crate::model::{canonical_pair, Outcome};

    fn pair() -> PairKey {
        canonical_pair(&ModelId::from("alpha"), &ModelId::from("beta")).unwrap()
    }

    fn task(id: u64, left: &str) -> Task {
        Task {
            id,
            pair: pair(),
            instruction_id: InstructionId::from(format!("x{id}")),
            instruction: format!("instruction {id}"),
            reference_answer: Some("ref".into()),
            response_left: format!("left {id}"),
            response_right: format!("right {id}"),
            left_is: ModelId::from(left),
        }
    }

    fn queue(n: u64) -> (TaskQueue, Arc<ManualClock>) {
        let clock = Arc::new(ManualClock::new(DateTime::UNIX_EPOCH));
        let tasks = (1..=n).map(|i| task(i, if i % 2 == 0 { "alpha" } else { "beta" })).collect();
        (TaskQueue::new(tasks, LeaseConfig::default(), clock.clone()).unwrap(), clock)
    }

    #[test]
    fn payload_is_blind() {
        let (mut q, _) = queue(3);
        let p = q.next_task("ann").unwrap().unwrap();
        let body = serde_json::to_string(&p).unwrap();
        assert!(!body.contains("alpha") && !body.contains("beta"));
        assert_eq!(p.response_left, "left 1");
    }

    #[test]
    fn leases_are_exclusive_and_expire() {
        let (mut q, clock) = queue(2);
        let a = q.next_task("A").unwrap().unwrap();
        let b = q.next_task("B").unwrap().unwrap();
        assert_ne!(a.task_id, b.task_id);
        assert!(q.next_task("C").unwrap().is_none());
        assert_eq!(q.next_task("A").unwrap().unwrap().task_id, a.task_id);

        clock.advance(Duration::minutes(11));
        assert!(matches!(
            q.submit(a.task_id, "A", Choice::Left),
            Err(AnnotationError::LeaseExpired { .. })
        ));
        assert_eq!(q.next_task("C").unwrap().unwrap().task_id, a.task_id);
    }

    #[test]
    fn submission_derandomizes_and_is_idempotent() {
        let (mut q, _) = queue(2);
        // Task 1 shows beta (model_b) on the left.
        let t = q.next_task("A").unwrap().unwrap();
        assert_eq!(q.submit(t.task_id, "A", Choice::Left).unwrap(), Ack { task_id: 1, duplicate: false });
        assert_eq!(q.submit(t.task_id, "A", Choice::Left).unwrap(), Ack { task_id: 1, duplicate: true });
        assert_eq!(q.judgments().len(), 1);
        assert_eq!(q.judgments()[0].outcome, Outcome::B_WINS);

        let t = q.next_task("A").unwrap().unwrap();
        q.submit(t.task_id, "A", Choice::Tie).unwrap();
        assert_eq!(q.judgments()[1].outcome, Outcome::TIE);
        assert!(q.next_task("A").unwrap().is_none());

        assert!(matches!(q.submit(99, "A", Choice::Tie), Err(AnnotationError::NotFound(99))));
        assert!(matches!(q.next_task(" "), Err(AnnotationError::EmptyAnnotator)));
    }

    #[test]
    fn annotator_never_sees_a_task_twice() {
        let clock = Arc::new(ManualClock::new(DateTime::UNIX_EPOCH));
        let cfg = LeaseConfig {
            judgments_required: 2,
            ..LeaseConfig::default()
        };
        let mut q = TaskQueue::new(vec![task(1, "alpha")], cfg, clock).unwrap();
        let t = q.next_task("A").unwrap().unwrap();
        q.submit(t.task_id, "A", Choice::Right).unwrap();
        assert!(q.next_task("A").unwrap().is_none());
        let t = q.next_task("B").unwrap().unwrap();
        q.submit(t.task_id, "B", Choice::Right).unwrap();
        assert!(q.next_task("C").unwrap().is_none());
        assert_eq!(q.progress().total.done, 1);
    }

    #[test]
    fn progress_and_sides() {
        let (mut q, _) = queue(4);
        let p = q.progress();
        assert_eq!(p.total, Counts { done: 0, leased: 0, remaining: 4 });
        assert_eq!((p.sides.tasks, p.sides.tasks_a_left), (4, 2));
        let t = q.next_task("A").unwrap().unwrap();
        q.submit(t.task_id, "A", Choice::Right).unwrap();
        q.next_task("A").unwrap();
        let p = q.progress();
        assert_eq!(p.total, Counts { done: 1, leased: 1, remaining: 2 });
        assert_eq!(p.pairs[0].counts, p.total);
        assert_eq!(p.sides.right, 1);
        assert!(!serde_json::to_string(&p).unwrap().contains("alpha"));
    }

    #[test]
    fn export_is_stable_and_parses() {
        let (mut q, _) = queue(3);
        assert_eq!(q.export_judgments().unwrap(), format!("# {EXPORT_HEADER}\n"));
        for _ in 0..3 {
            let t = q.next_task("A").unwrap().unwrap();
            q.submit(t.task_id, "A", Choice::Left).unwrap();
        }
        let a = q.export_judgments().unwrap();
        assert_eq!(a, q.export_judgments().unwrap());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("j.jsonl");
        std::fs::write(&path, &a).unwrap();
        assert_eq!(jsonl::read::<Judgment>(&path).unwrap(), q.judgments());
    }

    #[test]
    fn submissions_survive_restart() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("subs.jsonl");
        let clock = Arc::new(ManualClock::new(DateTime::UNIX_EPOCH));
        let tasks: Vec<Task> = (1..=2).map(|i| task(i, "alpha")).collect();
        let mut q = TaskQueue::open(tasks.clone(), &path, LeaseConfig::default(), clock.clone()).unwrap();
        let t = q.next_task("A").unwrap().unwrap();
        q.submit(t.task_id, "A", Choice::Left).unwrap();
        drop(q);
        let mut q = TaskQueue::open(tasks, &path, LeaseConfig::default(), clock).unwrap();
        assert_eq!(q.judgments().len(), 1);
        assert_eq!(q.next_task("A").unwrap().unwrap().task_id, 2);
    }

    #[test]
    fn reference_answer_toggle() {
        let clock = Arc::new(ManualClock::new(DateTime::UNIX_EPOCH));
        let cfg = LeaseConfig {
            show_reference: false,
            ..LeaseConfig::default()
        };
        let mut q = TaskQueue::new(vec![task(1, "alpha")], cfg, clock).unwrap();
        assert_eq!(q.next_task("A").unwrap().unwrap().reference_answer, None);
    }

    #[test]
    fn side_coin_is_fair() {
        let p = pair();
        let heads = (0..2000)
            .filter(|i| a_on_left(7, &p, &InstructionId::from(format!("i{i}"))))
            .count();
        // 99% interval for Binomial(2000, 0.5) is about 1000 ± 58.
        assert!((942..=1058).contains(&heads), "{heads}");
    }
}

//! Instruction pool construction: seed ingestion and template-driven evolution.
//!
//! Evolution templates are plain-text files with a small header:
//!
//! ```text
//! scenario: reasoning
//! reply: structured
//! prompt_field: question
//! answer_field: answer
//! ---
//! ...template body with {instruction} and optionally {output}...
//! ```
//!
//! `reply: free` takes the whole generator reply as the new instruction.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::jsonl::{self, JsonlError, LineError};
use crate::model::{GenerationParams, Instruction, InstructionId, ModelError, ModelId, Scenario};
use crate::provider::{ProviderError, TextGenerator};
use crate::template::{PromptTemplate, TemplateError};

#[derive(Debug, Error)]
pub enum PoolError {
    #[error(transparent)]
    Io(#[from] JsonlError),
    #[error("{0}: no valid seed instructions")]
    EmptyPool(PathBuf),
    #[error("no evolution template for scenario `{0}`")]
    MissingTemplate(Scenario),
    #[error("{path}: {message}")]
    TemplateFile { path: String, message: String },
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("at least one generator is required")]
    NoGenerators,
    #[error("every generator failed for parent {parent}: {last}")]
    Unreachable {
        parent: InstructionId,
        last: ProviderError,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ReplyFormat {
    Free,
    Structured {
        prompt_field: String,
        answer_field: Option<String>,
    },
}

#[derive(Clone, Debug)]
pub struct EvolutionTemplate {
    pub scenario: Scenario,
    pub reply: ReplyFormat,
    template: PromptTemplate,
}

impl EvolutionTemplate {
    pub fn parse(source: &str, origin: &str) -> Result<Self, PoolError> {
        let bad = |message: String| PoolError::TemplateFile {
            path: origin.to_owned(),
            message,
        };
        let (header, body) = source
            .split_once("\n---\n")
            .ok_or_else(|| bad("missing `---` line after the header".into()))?;
        let mut fields = BTreeMap::new();
        for line in header.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once(':')
                .ok_or_else(|| bad(format!("malformed header line `{line}`")))?;
            fields.insert(k.trim().to_owned(), v.trim().to_owned());
        }
        let scenario = Scenario::from(
            fields
                .remove("scenario")
                .ok_or_else(|| bad("header lacks `scenario`".into()))?,
        );
        let reply = match fields.remove("reply").as_deref() {
            Some("free") | None => ReplyFormat::Free,
            Some("structured") => ReplyFormat::Structured {
                prompt_field: fields
                    .remove("prompt_field")
                    .ok_or_else(|| bad("structured reply needs `prompt_field`".into()))?,
                answer_field: fields.remove("answer_field"),
            },
            Some(other) => return Err(bad(format!("unknown reply format `{other}`"))),
        };
        if let Some(k) = fields.keys().next() {
            return Err(bad(format!("unknown header field `{k}`")));
        }
        let template = PromptTemplate::parse(body)?;
        template.require_slots(&["instruction"])?;
        if let Some(s) = template.slots().into_iter().find(|s| s != "instruction" && s != "output") {
            return Err(bad(format!("unsupported slot `{s}`")));
        }
        Ok(Self {
            scenario,
            reply,
            template,
        })
    }

    pub fn load(path: &Path) -> Result<Self, PoolError> {
        let text = fs::read_to_string(path).map_err(|e| PoolError::TemplateFile {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn expects_answer(&self) -> bool {
        matches!(
            self.reply,
            ReplyFormat::Structured {
                answer_field: Some(_),
                ..
            }
        )
    }

    pub fn render(&self, parent: &Instruction) -> Result<String, TemplateError> {
        let output = parent.reference_answer.as_deref().unwrap_or("");
        if self.template.has_slot("output") {
            self.template
                .render(&[("instruction", &parent.text), ("output", output)])
        } else {
            self.template.render(&[("instruction", &parent.text)])
        }
    }

    /// Extracts `(new instruction, answer)` from a generator reply.
    pub fn parse_reply(&self, reply: &str) -> Option<(String, Option<String>)> {
        match &self.reply {
            ReplyFormat::Free => {
                let text = reply.trim();
                let text = text.strip_prefix("The new prompt is:").unwrap_or(text).trim();
                (!text.is_empty()).then(|| (text.to_owned(), None))
            }
            ReplyFormat::Structured {
                prompt_field,
                answer_field,
            } => {
                let obj = extract_json_object(reply)?;
                let prompt = obj.get(prompt_field)?.as_str()?.trim();
                if prompt.is_empty() {
                    return None;
                }
                let answer = match answer_field {
                    None => None,
                    Some(f) => match obj.get(f)? {
                        serde_json::Value::String(s) if !s.trim().is_empty() => Some(s.clone()),
                        serde_json::Value::Null | serde_json::Value::String(_) => return None,
                        v => Some(v.to_string()),
                    },
                };
                Some((prompt.to_owned(), answer))
            }
        }
    }
}

fn extract_json_object(reply: &str) -> Option<serde_json::Map<String, serde_json::Value>> {
    let start = reply.find('{')?;
    let end = reply.rfind('}')?;
    if end < start {
        return None;
    }
    match serde_json::from_str(&reply[start..=end]).ok()? {
        serde_json::Value::Object(m) => Some(m),
        _ => None,
    }
}

/// Evolution templates by scenario.
#[derive(Clone, Debug, Default)]
pub struct TemplateSet {
    templates: BTreeMap<Scenario, EvolutionTemplate>,
}

impl TemplateSet {
    pub fn insert(&mut self, t: EvolutionTemplate) {
        self.templates.insert(t.scenario.clone(), t);
    }

    pub fn get(&self, scenario: &Scenario) -> Result<&EvolutionTemplate, PoolError> {
        self.templates
            .get(scenario)
            .ok_or_else(|| PoolError::MissingTemplate(scenario.clone()))
    }

    /// Loads every `*.txt` in `dir` that carries a template header.
    pub fn load_dir(dir: &Path) -> Result<Self, PoolError> {
        let mut set = Self::default();
        let entries = fs::read_dir(dir).map_err(|e| PoolError::TemplateFile {
            path: dir.display().to_string(),
            message: e.to_string(),
        })?;
        let mut paths: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "txt"))
            .collect();
        paths.sort();
        for p in paths {
            let text = fs::read_to_string(&p).map_err(|e| PoolError::TemplateFile {
                path: p.display().to_string(),
                message: e.to_string(),
            })?;
            if text.starts_with("scenario:") {
                set.insert(EvolutionTemplate::parse(&text, &p.display().to_string())?);
            }
        }
        Ok(set)
    }

    pub fn scenarios(&self) -> impl Iterator<Item = &Scenario> {
        self.templates.keys()
    }
}

#[derive(Deserialize)]
struct SeedRecord {
    #[serde(alias = "instruction")]
    text: String,
    #[serde(default, alias = "output")]
    answer: Option<String>,
}

#[derive(Debug)]
pub struct SeedLoad {
    pub instructions: Vec<Instruction>,
    pub line_errors: Vec<LineError>,
    pub duplicates: usize,
}

/// Reads `{"text": ..., "answer": ...}` lines, keeping valid ones.
pub fn load_seeds(path: &Path, scenario: &Scenario) -> Result<SeedLoad, PoolError> {
    let (records, mut line_errors) = jsonl::read_lenient::<SeedRecord>(path)?;
    let mut seen = HashSet::new();
    let mut instructions = Vec::new();
    let mut duplicates = 0;
    for (i, r) in records.into_iter().enumerate() {
        let Ok(ins) = Instruction::seed(scenario.clone(), r.text) else {
            line_errors.push(LineError {
                line: 0,
                message: format!("record {} has empty text", i + 1),
            });
            continue;
        };
        if seen.insert(ins.id.clone()) {
            instructions.push(ins.with_reference_answer(r.answer));
        } else {
            duplicates += 1;
        }
    }
    if instructions.is_empty() {
        return Err(PoolError::EmptyPool(path.to_path_buf()));
    }
    Ok(SeedLoad {
        instructions,
        line_errors,
        duplicates,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvolutionRecord {
    pub instruction: Instruction,
    pub parent: InstructionId,
    pub generator: ModelId,
    pub round: usize,
    pub raw_reply: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DroppedReply {
    pub parent: InstructionId,
    pub generator: ModelId,
    pub round: usize,
    pub raw_replies: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RoundOutput {
    pub records: Vec<EvolutionRecord>,
    pub dropped: Vec<DroppedReply>,
    pub duplicates: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GrowthPolicy {
    /// Every round evolves the original seeds again.
    #[default]
    SeedsOnly,
    /// Every round evolves the whole pool built so far.
    Cumulative,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct EvolveConfig {
    pub rounds: usize,
    pub children_per_parent: usize,
    pub growth: GrowthPolicy,
    pub params: GenerationParams,
    /// Upper bound on concurrent generator calls.
    pub concurrency: usize,
    pub seed: u64,
}

impl Default for EvolveConfig {
    fn default() -> Self {
        Self {
            rounds: 1,
            children_per_parent: 1,
            growth: GrowthPolicy::SeedsOnly,
            params: GenerationParams::default(),
            concurrency: 8,
            seed: 0,
        }
    }
}

fn call_seed(seed: u64, round: usize, parent: &InstructionId, child: usize) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((round as u64).to_le_bytes());
    h.update(parent.as_str().as_bytes());
    h.update((child as u64).to_le_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().unwrap())
}

enum TaskOutcome {
    Accepted(EvolutionRecord),
    Dropped(DroppedReply),
}

fn run_task(
    parent: &Instruction,
    template: &EvolutionTemplate,
    generators: &[Arc<dyn TextGenerator>],
    first: usize,
    round: usize,
    params: &GenerationParams,
) -> Result<TaskOutcome, PoolError> {
    let prompt = template.render(parent)?;
    let mut last_err = None;
    for step in 0..generators.len() {
        let generator = &generators[(first + step) % generators.len()];
        let mut replies = Vec::new();
        let mut transport = None;
        for _ in 0..2 {
            match generator.generate(&prompt, params) {
                Ok(g) => {
                    if let Some((text, answer)) = template.parse_reply(&g.text) {
                        let mut lineage = parent.lineage.clone();
                        lineage.push(parent.id.clone());
                        let instruction = Instruction {
                            id: InstructionId::from_content(&parent.scenario, &text),
                            scenario: parent.scenario.clone(),
                            text,
                            lineage,
                            generator: Some(ModelId::new(generator.id())),
                            reference_answer: None,
                        }
                        .with_reference_answer(answer);
                        return Ok(TaskOutcome::Accepted(EvolutionRecord {
                            instruction,
                            parent: parent.id.clone(),
                            generator: ModelId::new(generator.id()),
                            round,
                            raw_reply: g.text,
                        }));
                    }
                    replies.push(g.text);
                }
                Err(e) => {
                    transport = Some(e);
                    break;
                }
            }
        }
        match transport {
            Some(e) if replies.is_empty() => {
                log::warn!("generator {} failed: {e}; trying the next one", generator.id());
                last_err = Some(e);
            }
            _ => {
                return Ok(TaskOutcome::Dropped(DroppedReply {
                    parent: parent.id.clone(),
                    generator: ModelId::new(generator.id()),
                    round,
                    raw_replies: replies,
                }))
            }
        }
    }
    Err(PoolError::Unreachable {
        parent: parent.id.clone(),
        last: last_err.expect("at least one generator was tried"),
    })
}

/// One evolution round over `parents`; children already in `pool` are
/// counted as duplicates and not returned.
pub fn evolve_round(
    parents: &[Instruction],
    pool: &[Instruction],
    templates: &TemplateSet,
    generators: &[Arc<dyn TextGenerator>],
    round: usize,
    cfg: &EvolveConfig,
) -> Result<RoundOutput, PoolError> {
    if generators.is_empty() {
        return Err(PoolError::NoGenerators);
    }
    for p in parents {
        templates.get(&p.scenario)?;
    }
    let tasks: Vec<(usize, &Instruction, usize)> = parents
        .iter()
        .flat_map(|p| (0..cfg.children_per_parent).map(move |c| (p, c)))
        .enumerate()
        .map(|(i, (p, c))| (i, p, c))
        .collect();
    let workers = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.concurrency.max(1))
        .build()
        .expect("thread pool");
    let outcomes: Vec<Result<TaskOutcome, PoolError>> = workers.install(|| {
        tasks
            .par_iter()
            .map(|&(i, parent, child)| {
                let params = GenerationParams {
                    seed: Some(call_seed(cfg.seed, round, &parent.id, child)),
                    ..cfg.params.clone()
                };
                let template = templates.get(&parent.scenario)?;
                run_task(parent, template, generators, i, round, &params)
            })
            .collect()
    });

    let mut seen: HashSet<InstructionId> = pool.iter().map(|i| i.id.clone()).collect();
    let mut out = RoundOutput::default();
    for o in outcomes {
        match o? {
            TaskOutcome::Accepted(r) => {
                if seen.insert(r.instruction.id.clone()) {
                    out.records.push(r);
                } else {
                    out.duplicates += 1;
                }
            }
            TaskOutcome::Dropped(d) => out.dropped.push(d),
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvolutionLog {
    pub records: Vec<EvolutionRecord>,
    pub dropped: Vec<DroppedReply>,
    pub duplicates: usize,
}

/// Runs `cfg.rounds` rounds from `seeds` and returns the grown pool.
pub fn evolve(
    seeds: &[Instruction],
    templates: &TemplateSet,
    generators: &[Arc<dyn TextGenerator>],
    cfg: &EvolveConfig,
) -> Result<(Vec<Instruction>, EvolutionLog), PoolError> {
    let mut pool = seeds.to_vec();
    let mut log = EvolutionLog::default();
    for round in 1..=cfg.rounds {
        let parents = match cfg.growth {
            GrowthPolicy::SeedsOnly => seeds.to_vec(),
            GrowthPolicy::Cumulative => pool.clone(),
        };
        let out = evolve_round(&parents, &pool, templates, generators, round, cfg)?;
        log::info!(
            "round {round}: {} new, {} dropped, {} duplicate",
            out.records.len(),
            out.dropped.len(),
            out.duplicates
        );
        pool.extend(out.records.iter().map(|r| r.instruction.clone()));
        log.records.extend(out.records);
        log.dropped.extend(out.dropped);
        log.duplicates += out.duplicates;
    }
    Ok((pool, log))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PoolStats {
    pub total: usize,
    pub per_scenario: BTreeMap<String, usize>,
    /// Round 0 holds instructions with no evolution record (seeds).
    pub per_round: BTreeMap<usize, usize>,
    pub depth_histogram: BTreeMap<usize, usize>,
    /// Share of accepted generations discarded as duplicates.
    pub dedup_ratio: f64,
}

pub fn pool_stats(pool: &[Instruction], log: Option<&EvolutionLog>) -> PoolStats {
    let mut stats = PoolStats {
        total: pool.len(),
        ..PoolStats::default()
    };
    let rounds: BTreeMap<&InstructionId, usize> = log
        .map(|l| l.records.iter().map(|r| (&r.instruction.id, r.round)).collect())
        .unwrap_or_default();
    for ins in pool {
        *stats
            .per_scenario
            .entry(ins.scenario.as_str().to_owned())
            .or_default() += 1;
        *stats.depth_histogram.entry(ins.depth()).or_default() += 1;
        *stats
            .per_round
            .entry(rounds.get(&ins.id).copied().unwrap_or(0))
            .or_default() += 1;
    }
    if let Some(l) = log {
        let generated = l.records.len() + l.duplicates;
        if generated > 0 {
            stats.dedup_ratio = l.duplicates as f64 / generated as f64;
        }
    }
    stats
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::provider::{FnGenerator, StubGenerator};
    use std::io::Write;

    const STRUCTURED: &str = "scenario: understanding\nreply: structured\nprompt_field: new_prompt\nanswer_field: answer\n---\nReply in JSON {{...}}: {instruction}\n";

    fn templates() -> TemplateSet {
        let mut t = TemplateSet::default();
        t.insert(EvolutionTemplate::parse(STRUCTURED, "t").unwrap());
        t
    }

    fn seeds(texts: &[&str]) -> Vec<Instruction> {
        texts
            .iter()
            .map(|t| Instruction::seed(Scenario::Understanding, *t).unwrap())
            .collect()
    }

    fn file(lines: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(lines.as_bytes()).unwrap();
        f
    }

    #[test]
    fn seeds_load_dedup_and_tolerate_bad_lines() {
        let f = file("{\"text\":\"a\"}\n{\"text\":\"b\"}\n{\"text\":\"c\"}\n");
        assert_eq!(load_seeds(f.path(), &Scenario::Writing).unwrap().instructions.len(), 3);

        let f = file("{\"text\":\"a\"}\n{\"text\":\"a\"}\n{\"text\":\"c\"}\n");
        let s = load_seeds(f.path(), &Scenario::Writing).unwrap();
        assert_eq!((s.instructions.len(), s.duplicates), (2, 1));

        let f = file("{\"text\":\"a\"}\nnot json\n{\"text\":\"c\", \"answer\": \"42\"}\n");
        let s = load_seeds(f.path(), &Scenario::Reasoning).unwrap();
        assert_eq!(s.instructions.len(), 2);
        assert_eq!(s.line_errors.iter().map(|e| e.line).collect::<Vec<_>>(), vec![2]);
        assert_eq!(s.instructions[1].reference_answer.as_deref(), Some("42"));
        assert!(s.instructions.iter().all(|i| i.lineage.is_empty()));

        let f = file("");
        assert!(matches!(
            load_seeds(f.path(), &Scenario::Writing),
            Err(PoolError::EmptyPool(_))
        ));
    }

    #[test]
    fn reload_is_idempotent() {
        let f = file("{\"text\":\"x\"}\n{\"text\":\"y\"}\n");
        let a = load_seeds(f.path(), &Scenario::Coding).unwrap().instructions;
        let b = load_seeds(f.path(), &Scenario::Coding).unwrap().instructions;
        assert_eq!(a, b);
    }

    #[test]
    fn template_header_validation() {
        assert!(EvolutionTemplate::parse("no header here {instruction}", "t").is_err());
        assert!(EvolutionTemplate::parse("scenario: x\n---\nno slot", "t").is_err());
        assert!(EvolutionTemplate::parse("scenario: x\n---\n{instruction} {other}", "t").is_err());
        assert!(EvolutionTemplate::parse("scenario: x\nreply: odd\n---\n{instruction}", "t").is_err());
        let t = EvolutionTemplate::parse("scenario: writing\nreply: free\n---\n{instruction}", "t").unwrap();
        assert!(!t.expects_answer());
        assert!(EvolutionTemplate::parse(STRUCTURED, "t").unwrap().expects_answer());
    }

    #[test]
    fn bundled_templates_load() {
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../templates");
        let set = TemplateSet::load_dir(&dir).unwrap();
        let names: Vec<&str> = set.scenarios().map(|s| s.as_str()).collect();
        assert_eq!(names, ["understanding", "reasoning", "writing", "coding"]);
        let reasoning = set.get(&Scenario::Reasoning).unwrap();
        let parent = Instruction::seed(Scenario::Reasoning, "Q?")
            .unwrap()
            .with_reference_answer(Some("A.".into()));
        let prompt = reasoning.render(&parent).unwrap();
        assert!(prompt.contains("Question:\nQ?\nAnswer:\nA.\n"));
        assert!(prompt.contains("{\n  \"question\""));
    }

    #[test]
    fn structured_reply_parsing() {
        let t = EvolutionTemplate::parse(STRUCTURED, "t").unwrap();
        let fenced = "```json\n{\"new_prompt\": \"P\", \"answer\": \"A\"}\n```";
        assert_eq!(t.parse_reply(fenced), Some(("P".into(), Some("A".into()))));
        assert_eq!(
            t.parse_reply("{\"new_prompt\": \"P\", \"answer\": 7}"),
            Some(("P".into(), Some("7".into())))
        );
        assert_eq!(t.parse_reply("{\"new_prompt\": \"P\"}"), None);
        assert_eq!(t.parse_reply("plain prose"), None);
    }

    #[test]
    fn stub_round_trip_two_parents() {
        let reply = "{\"new_prompt\": \"child of PARENT\", \"answer\": \"ans\"}";
        let g: Arc<dyn TextGenerator> = Arc::new(FnGenerator::new("g", move |p: &str| {
            let parent = p.rsplit(": ").next().unwrap().trim();
            Ok(reply.replace("PARENT", parent))
        }));
        let parents = seeds(&["p1", "p2"]);
        let out = evolve_round(&parents, &parents, &templates(), &[g], 1, &EvolveConfig::default()).unwrap();
        assert_eq!(out.records.len(), 2);
        assert_eq!(out.records[0].instruction.text, "child of p1");
        assert_eq!(out.records[0].instruction.reference_answer.as_deref(), Some("ans"));
        assert_eq!(out.records[1].instruction.lineage, vec![parents[1].id.clone()]);
        assert_eq!(out.records[0].raw_reply, "{\"new_prompt\": \"child of p1\", \"answer\": \"ans\"}");
    }

    #[test]
    fn garbage_is_retried_once_then_dropped() {
        let g = Arc::new(FnGenerator::new("g", |_: &str| Ok("no structure".to_string())));
        let dynamic: Arc<dyn TextGenerator> = g.clone();
        let parents = seeds(&["p1", "p2"]);
        let out = evolve_round(&parents, &parents, &templates(), &[dynamic], 1, &EvolveConfig::default()).unwrap();
        assert!(out.records.is_empty());
        assert_eq!(out.dropped.len(), 2);
        assert!(out.dropped.iter().all(|d| d.raw_replies == ["no structure", "no structure"]));
        assert_eq!(g.calls(), 4);
    }

    #[test]
    fn round_robin_and_failover() {
        let down: Arc<dyn TextGenerator> = Arc::new(FnGenerator::new("down", |_: &str| {
            Err(ProviderError::Transport("refused".into()))
        }));
        let up: Arc<dyn TextGenerator> = Arc::new(StubGenerator::new("up"));
        let parents = seeds(&["p1", "p2", "p3"]);
        let out = evolve_round(&parents, &parents, &templates(), &[down.clone(), up], 1, &EvolveConfig::default()).unwrap();
        assert_eq!(out.records.len(), 3);
        assert!(out.records.iter().all(|r| r.generator.as_str() == "up"));

        let err = evolve_round(&parents, &parents, &templates(), &[down], 1, &EvolveConfig::default());
        assert!(matches!(err, Err(PoolError::Unreachable { .. })));
        assert!(matches!(
            evolve_round(&parents, &parents, &templates(), &[], 1, &EvolveConfig::default()),
            Err(PoolError::NoGenerators)
        ));
        let writing = seeds(&[]).into_iter().chain([Instruction::seed(Scenario::Writing, "w").unwrap()]).collect::<Vec<_>>();
        assert!(matches!(
            evolve_round(&writing, &writing, &templates(), &[Arc::new(StubGenerator::new("s"))], 1, &EvolveConfig::default()),
            Err(PoolError::MissingTemplate(Scenario::Writing))
        ));
    }

    #[test]
    fn duplicates_against_pool_are_dropped() {
        let g: Arc<dyn TextGenerator> = Arc::new(FnGenerator::new("g", |_: &str| {
            Ok("{\"new_prompt\": \"p1\", \"answer\": \"a\"}".to_string())
        }));
        let parents = seeds(&["p1", "p2"]);
        let out = evolve_round(&parents, &parents, &templates(), &[g], 1, &EvolveConfig::default()).unwrap();
        assert_eq!((out.records.len(), out.duplicates), (0, 2));
    }

    #[test]
    fn lineage_is_a_forest_under_cumulative_growth() {
        let g: Arc<dyn TextGenerator> = Arc::new(StubGenerator::new("s"));
        let cfg = EvolveConfig {
            rounds: 3,
            growth: GrowthPolicy::Cumulative,
            ..EvolveConfig::default()
        };
        let s = seeds(&["alpha", "beta"]);
        let (pool, log) = evolve(&s, &templates(), &[g], &cfg).unwrap();
        assert_eq!(pool.len(), 2 + 2 + 4 + 8 - log.duplicates);
        let ids: HashSet<_> = pool.iter().map(|i| &i.id).collect();
        for ins in &pool {
            assert!(!ins.lineage.contains(&ins.id));
            assert!(ins.lineage.iter().all(|a| ids.contains(a)));
            if let Some(root) = ins.lineage.first() {
                assert!(s.iter().any(|x| &x.id == root));
            }
        }
        assert_eq!(log.records.len(), pool.len() - 2);
    }

    #[test]
    fn stats() {
        assert_eq!(pool_stats(&[], None), PoolStats::default());
        let g: Arc<dyn TextGenerator> = Arc::new(StubGenerator::new("s"));
        let s = seeds(&["a", "b", "c"]);
        let (pool, log) = evolve(&s, &templates(), &[g], &EvolveConfig::default()).unwrap();
        let st = pool_stats(&pool, Some(&log));
        assert_eq!(st.depth_histogram, BTreeMap::from([(0, 3), (1, 3)]));
        assert_eq!(st.per_round, BTreeMap::from([(0, 3), (1, 3)]));
        assert_eq!(st.per_scenario.values().sum::<usize>(), st.total);
        assert_eq!(st.dedup_ratio, 0.0);
    }
}

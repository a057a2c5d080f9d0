//! Builds a fine-tuning set from the model's own reasoning: traces that were
//! right the first time are kept as they are. For wrong traces the model is
//! told the correct id, asked what went wrong, and then asked for clean
//! reasoning that reaches the correct answer. Emitted records carry the
//! prompt without principles.

use std::collections::BTreeSet;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::engine::answer::extract_answer;
use crate::engine::llm::{complete_with_retry, ChatTurn, LlmClient, LlmProvider, Role};
use crate::engine::prompt::{PromptBuilder, PromptMode};
use crate::engine::{
    ground_all, run_loop, EngineError, GroundingConfig, Outcome, Prediction, ReasoningTrace,
    TaskRun,
};
use crate::sandbox::{preload_context, ExecStatus, ExecutorFactory};
use crate::scene::{GroundingTask, SceneStore};

/// Re-requests of the clean derivation after the first attempt.
pub const MAX_REREQUESTS: u32 = 2;

pub const CLEAN_REQUEST: &str = "Now write a clean, self-contained reasoning process for the \
original question that arrives at the correct answer. Do not mention this correction or the \
earlier mistake. You may use code as before, and finish with the answer in the required format.";

pub fn correction_request(gt_id: u32) -> String {
    format!(
        "The correct answer is object {gt_id}. Can you double check the information of object \
{gt_id} and the given prompt and see where you got wrong?"
    )
}

pub fn rerequest(gt_id: u32, got: Option<u32>) -> String {
    let got = got.map_or_else(|| "no answer".to_string(), |id| format!("object {id}"));
    format!(
        "That reasoning ended with {got}, but the correct answer is object {gt_id}. Write the \
clean reasoning again so that it reaches object {gt_id}, and finish with the answer in the \
required format."
    )
}

#[derive(Debug, thiserror::Error)]
pub enum SelfCorrectError {
    #[error("task {0} has no gt_object_id")]
    MissingGroundTruth(String),
    #[error("trace for task {0} already answers the ground truth")]
    AlreadyCorrect(String),
    #[error("task {task}: {reason}")]
    Unusable { task: String, reason: String },
    #[error(transparent)]
    Engine(#[from] EngineError),
}

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("task {task_id}: record contains a principle sentence: `{sentence}`")]
    PrincipleLeak { task_id: String, sentence: String },
    #[error("task {task_id}: final answer {got:?} does not match ground truth {gt}")]
    WrongAnswer {
        task_id: String,
        got: Option<u32>,
        gt: u32,
    },
    #[error("task {task_id}: {reason}")]
    Malformed { task_id: String, reason: String },
    #[error("i/o on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {source}")]
    Json {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
}

/// A trace together with the id it should have reached.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledTrace {
    pub trace: ReasoningTrace,
    pub gt_object_id: u32,
}

/// Tasks split by whether the first run reached the ground truth.
#[derive(Debug, Default)]
pub struct Partition {
    pub correct: Vec<TaskRun>,
    pub incorrect: Vec<TaskRun>,
}

/// Runs every task once. Failed runs count as incorrect.
pub fn collect_runs(
    tasks: &[GroundingTask],
    scenes: &SceneStore,
    llms: &dyn LlmProvider,
    executors: &dyn ExecutorFactory,
    config: &GroundingConfig,
    jobs: usize,
) -> Result<Partition, SelfCorrectError> {
    if let Some(t) = tasks.iter().find(|t| t.gt_object_id.is_none()) {
        return Err(SelfCorrectError::MissingGroundTruth(t.task_id.clone()));
    }
    let mut part = Partition::default();
    for run in ground_all(tasks, scenes, llms, executors, config, jobs) {
        let gt = run.task.gt_object_id;
        let answered = run.result.as_ref().ok().and_then(|g| g.trace.answer_id());
        if answered.is_some() && answered == gt {
            part.correct.push(run);
        } else {
            part.incorrect.push(run);
        }
    }
    Ok(part)
}

/// What the correction conversation produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelfCorrection {
    pub reflection: String,
    /// The whole exchange: first attempt, correction, reflection, rederivation.
    pub conversation: ReasoningTrace,
    /// Original prompt followed by only the successful clean derivation.
    pub clean: ReasoningTrace,
}

/// Asks the model to diagnose a wrong trace given `gt_id`, then to reason
/// cleanly to it. Code in the rederivation runs in a fresh session loaded
/// with the same objects as the original run.
pub fn elicit_correction(
    run: &TaskRun,
    scenes: &SceneStore,
    llm: &dyn LlmClient,
    executors: &dyn ExecutorFactory,
    config: &GroundingConfig,
) -> Result<SelfCorrection, SelfCorrectError> {
    let task = &run.task;
    let task_id = task.task_id.clone();
    let gt = task
        .gt_object_id
        .ok_or_else(|| SelfCorrectError::MissingGroundTruth(task_id.clone()))?;
    let unusable = |reason: String| SelfCorrectError::Unusable {
        task: task_id.clone(),
        reason,
    };
    let grounding = match &run.result {
        Ok(g) => g,
        Err(err) => return Err(unusable(format!("no trace to correct ({err})"))),
    };
    let original = &grounding.trace;
    if original.answer_id() == Some(gt) {
        return Err(SelfCorrectError::AlreadyCorrect(task_id));
    }
    let prompt_len = original
        .turns
        .iter()
        .position(|t| t.role == Role::Assistant)
        .unwrap_or(original.turns.len());

    let mut turns = original.turns.clone();
    // the first run may have stopped on an unanswered user nudge
    if turns.last().is_some_and(|t| t.role == Role::User) && turns.len() > prompt_len {
        turns.pop();
    }
    turns.push(ChatTurn::user(correction_request(gt)));
    let reflection = complete_with_retry(llm, &turns, &config.loop_config.retry)
        .map_err(|e| unusable(format!("reflection request failed: {e}")))?;
    let mut usage = original.token_usage;
    usage += reflection.usage;
    let reflection = reflection.text;
    turns.push(ChatTurn::assistant(reflection.clone()));
    turns.push(ChatTurn::user(CLEAN_REQUEST));

    let scene = scenes.get(&task.scene_id).map_err(EngineError::from)?;
    let mut executor = executors.open(&format!("{task_id}-clean"));
    let preload = preload_context(
        executor.as_mut(),
        &task_id,
        &scene,
        &grounding.filter.kept_ids,
    );
    if preload.status != ExecStatus::Ok {
        tracing::warn!(task = %task_id, stderr = %preload.stderr, "context preload failed");
    }

    let mut rounds = original.rounds_used + 1;
    let mut last = None;
    for attempt in 0..=MAX_REREQUESTS {
        let start = turns.len();
        let t = run_loop(&task_id, turns, llm, executor.as_mut(), &config.loop_config)?;
        rounds += t.rounds_used;
        usage += t.token_usage;
        let answer = t.answer_id();
        let (outcome, abort_cause, rounds_used, token_usage) =
            (t.outcome, t.abort_cause, t.rounds_used, t.token_usage);
        turns = t.turns;
        if outcome == Outcome::Answered && answer == Some(gt) {
            let mut clean_turns = original.turns[..prompt_len].to_vec();
            clean_turns.extend_from_slice(&turns[start..]);
            let clean = ReasoningTrace {
                task_id: task_id.clone(),
                turns: clean_turns,
                rounds_used,
                outcome: Outcome::Answered,
                answer: Some(Prediction::Object(gt)),
                abort_cause: None,
                token_usage,
            };
            let conversation = ReasoningTrace {
                task_id: task_id.clone(),
                turns,
                rounds_used: rounds,
                outcome: Outcome::Answered,
                answer: Some(Prediction::Object(gt)),
                abort_cause: None,
                token_usage: usage,
            };
            return Ok(SelfCorrection {
                reflection,
                conversation,
                clean,
            });
        }
        if outcome == Outcome::Aborted {
            return Err(unusable(format!(
                "rederivation aborted: {}",
                abort_cause.unwrap_or_default()
            )));
        }
        last = answer;
        if attempt < MAX_REREQUESTS {
            turns.push(ChatTurn::user(rerequest(gt, last)));
        }
    }
    Err(unusable(format!(
        "clean rederivation still wrong after {MAX_REREQUESTS} re-requests (last answer {last:?})"
    )))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordLabel {
    CorrectFirstTry,
    SelfCorrected,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FinetuneRecord {
    pub messages: Vec<ChatTurn>,
    pub label: RecordLabel,
    pub task_id: String,
}

impl FinetuneRecord {
    /// Chat record from a trace: the system turn is replaced by the prompt
    /// without principles and tool outputs are folded into the assistant turn
    /// that produced them.
    pub fn from_trace(trace: &ReasoningTrace, label: RecordLabel, prompts: &PromptBuilder) -> Self {
        let mut messages: Vec<ChatTurn> = Vec::with_capacity(trace.turns.len());
        for turn in &trace.turns {
            match turn.role {
                Role::System => messages.push(ChatTurn::system(
                    prompts.system_prompt(PromptMode::NoPrinciples),
                )),
                Role::Tool => match messages.last_mut() {
                    Some(prev) if prev.role == Role::Assistant => {
                        prev.content.push_str("\n\n");
                        prev.content.push_str(&turn.content);
                    }
                    _ => messages.push(ChatTurn::assistant(turn.content.clone())),
                },
                _ => messages.push(turn.clone()),
            }
        }
        Self {
            messages,
            label,
            task_id: trace.task_id.clone(),
        }
    }

    pub fn validate(&self, gt: u32, prompts: &PromptBuilder) -> Result<(), DatasetError> {
        for m in &self.messages {
            if let Some(sentence) = prompts.find_principle(&m.content) {
                return Err(DatasetError::PrincipleLeak {
                    task_id: self.task_id.clone(),
                    sentence: sentence.to_string(),
                });
            }
        }
        let last = self
            .messages
            .iter()
            .rev()
            .find(|m| m.role == Role::Assistant)
            .ok_or_else(|| DatasetError::Malformed {
                task_id: self.task_id.clone(),
                reason: "no assistant message".into(),
            })?;
        let got = extract_answer(&last.content).ok().flatten();
        if got != Some(gt) {
            return Err(DatasetError::WrongAnswer {
                task_id: self.task_id.clone(),
                got,
                gt,
            });
        }
        Ok(())
    }
}

/// Writes correct and self-corrected traces as chat JSONL. Every record is
/// validated before anything is written. Returns the record count.
pub fn emit_dataset(
    correct: &[LabeledTrace],
    corrected: &[LabeledTrace],
    out: impl AsRef<Path>,
    prompts: &PromptBuilder,
) -> Result<usize, DatasetError> {
    let labeled = correct
        .iter()
        .map(|t| (t, RecordLabel::CorrectFirstTry))
        .chain(corrected.iter().map(|t| (t, RecordLabel::SelfCorrected)));
    let mut records = Vec::new();
    let mut seen = BTreeSet::new();
    for (item, label) in labeled {
        let record = FinetuneRecord::from_trace(&item.trace, label, prompts);
        record.validate(item.gt_object_id, prompts)?;
        if !seen.insert(record.task_id.clone()) {
            return Err(DatasetError::Malformed {
                task_id: record.task_id,
                reason: "task appears twice".into(),
            });
        }
        records.push(record);
    }
    let out = out.as_ref();
    let io = |source| DatasetError::Io {
        path: out.display().to_string(),
        source,
    };
    let mut w = BufWriter::new(std::fs::File::create(out).map_err(io)?);
    for r in &records {
        serde_json::to_writer(&mut w, r).expect("record serializes");
        w.write_all(b"\n").map_err(io)?;
    }
    w.flush().map_err(io)?;
    Ok(records.len())
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Vec<FinetuneRecord>, DatasetError> {
    let path = path.as_ref();
    let io = |source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    };
    let reader = BufReader::new(std::fs::File::open(path).map_err(io)?);
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(
            serde_json::from_str(&line).map_err(|source| DatasetError::Json {
                line: i + 1,
                source,
            })?,
        );
    }
    Ok(records)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BuildStats {
    pub correct_first_try: usize,
    pub self_corrected: usize,
    pub dropped: usize,
    pub records: usize,
    pub dropped_tasks: Vec<(String, String)>,
}

/// The whole procedure: run, correct the failures, emit the dataset.
#[allow(clippy::too_many_arguments)]
pub fn build_dataset(
    tasks: &[GroundingTask],
    scenes: &SceneStore,
    llms: &dyn LlmProvider,
    executors: &dyn ExecutorFactory,
    config: &GroundingConfig,
    jobs: usize,
    out: impl AsRef<Path>,
) -> Result<BuildStats, BuildError> {
    let part = collect_runs(tasks, scenes, llms, executors, config, jobs)?;
    let mut stats = BuildStats::default();
    let correct: Vec<LabeledTrace> = part
        .correct
        .iter()
        .filter_map(|run| {
            Some(LabeledTrace {
                trace: run.result.as_ref().ok()?.trace.clone(),
                gt_object_id: run.task.gt_object_id?,
            })
        })
        .collect();
    let mut corrected = Vec::new();
    for run in &part.incorrect {
        let outcome = llms
            .client_for(&run.task.task_id)
            .map_err(|e| SelfCorrectError::Unusable {
                task: run.task.task_id.clone(),
                reason: e.to_string(),
            })
            .and_then(|llm| elicit_correction(run, scenes, llm.as_ref(), executors, config));
        match outcome {
            Ok(fix) => corrected.push(LabeledTrace {
                trace: fix.clean,
                gt_object_id: run.task.gt_object_id.expect("checked in collect_runs"),
            }),
            Err(err) => {
                tracing::info!(task = %run.task.task_id, %err, "dropping sample");
                stats
                    .dropped_tasks
                    .push((run.task.task_id.clone(), err.to_string()));
            }
        }
    }
    stats.correct_first_try = correct.len();
    stats.self_corrected = corrected.len();
    stats.dropped = stats.dropped_tasks.len();
    stats.records = emit_dataset(&correct, &corrected, out, &config.prompts)?;
    Ok(stats)
}

#[derive(Debug, thiserror::Error)]
pub enum BuildError {
    #[error(transparent)]
    Run(#[from] SelfCorrectError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

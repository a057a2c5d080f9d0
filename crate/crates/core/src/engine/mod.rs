//! The grounding pipeline: filter the scene, render it, prompt the model and
//! iterate between model turns and code execution until an answer appears.

pub mod answer;
pub mod llm;
pub mod prompt;

use std::sync::Arc;
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::filter::{filter_lexical, filter_llm, FilterResult, Lexicon};
use crate::geometry::Aabb;
use crate::sandbox::{
    preload_context, ExecRequest, ExecResult, ExecStatus, Executor, ExecutorFactory,
    DEFAULT_TIMEOUT,
};
use crate::scene::{render_transcript, GroundingTask, SceneError, SceneStore, SceneTranscript};

use answer::{extract_answer, extract_code_blocks};
use llm::{complete_with_retry, ChatTurn, LlmClient, LlmProvider, RetryPolicy, Usage};
use prompt::{PromptBuilder, PromptMode};

pub const DEFAULT_MAX_ROUNDS: u32 = 10;

/// Sent when a reply has neither code nor an answer.
pub const CONTINUE_REQUEST: &str = "Continue. Write Python code if you need more information, \
or give the final answer in the required format.";
/// Sent when the completion marker is followed by something unparseable.
pub const REFORMAT_REQUEST: &str = "Your final answer could not be read. Repeat it exactly in \
the form: Now the answer is complete -- {'ID':N}";

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error("empty utterance")]
    EmptyUtterance,
    #[error("max_rounds must be at least 1")]
    NoRounds,
    #[error("task {task} refers to scene `{expected}` but scene `{got}` was given")]
    SceneMismatch {
        task: String,
        expected: String,
        got: String,
    },
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error("no model client for task {task}: {source}")]
    Client {
        task: String,
        #[source]
        source: llm::LlmError,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Answered,
    MaxRounds,
    Aborted,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Prediction {
    Object(u32),
    Box(Aabb),
}

impl Prediction {
    pub fn object_id(&self) -> Option<u32> {
        match self {
            Self::Object(id) => Some(*id),
            Self::Box(_) => None,
        }
    }

    pub fn aabb(&self) -> Option<Aabb> {
        match self {
            Self::Box(b) => Some(*b),
            Self::Object(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReasoningTrace {
    pub task_id: String,
    pub turns: Vec<ChatTurn>,
    pub rounds_used: u32,
    pub outcome: Outcome,
    pub answer: Option<Prediction>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub abort_cause: Option<String>,
    pub token_usage: Usage,
}

impl ReasoningTrace {
    pub fn answer_id(&self) -> Option<u32> {
        self.answer.and_then(|a| a.object_id())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoopConfig {
    pub max_rounds: u32,
    pub retry: RetryPolicy,
    pub exec_timeout: Duration,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self {
            max_rounds: DEFAULT_MAX_ROUNDS,
            retry: RetryPolicy::default(),
            exec_timeout: DEFAULT_TIMEOUT,
        }
    }
}

/// Text of the tool turn reporting one execution.
pub fn format_exec_result(result: &ExecResult) -> String {
    match result.status {
        ExecStatus::Ok => {
            let mut text = String::from("Code execution result:\n");
            if result.stdout.trim().is_empty() {
                text.push_str("(no output)");
            } else {
                text.push_str(result.stdout.trim_end());
            }
            if !result.stderr.trim().is_empty() {
                text.push_str("\nwarnings:\n");
                text.push_str(result.stderr.trim_end());
            }
            text
        }
        ExecStatus::Error => format!(
            "Code execution failed:\n{}\nFix the code and try again.",
            result.stderr.trim_end()
        ),
        ExecStatus::Timeout => format!(
            "Code execution timed out:\n{}\nSimplify the code and try again.",
            result.stderr.trim_end()
        ),
    }
}

/// Drives the model/code loop starting from `turns` (which may already hold
/// an earlier conversation). Each model reply with fenced code has every
/// block executed in order, one tool turn per block; a reply without code is
/// checked for the final answer. At most `max_rounds` model calls are made.
pub fn run_loop(
    task_id: &str,
    turns: Vec<ChatTurn>,
    llm: &dyn LlmClient,
    executor: &mut dyn Executor,
    config: &LoopConfig,
) -> Result<ReasoningTrace, EngineError> {
    if config.max_rounds == 0 {
        return Err(EngineError::NoRounds);
    }
    let mut trace = ReasoningTrace {
        task_id: task_id.to_string(),
        turns,
        rounds_used: 0,
        outcome: Outcome::MaxRounds,
        answer: None,
        abort_cause: None,
        token_usage: Usage::default(),
    };
    for round in 1..=config.max_rounds {
        let completion = match complete_with_retry(llm, &trace.turns, &config.retry) {
            Ok(c) => c,
            Err(err) => {
                trace.outcome = Outcome::Aborted;
                trace.abort_cause = Some(err.to_string());
                return Ok(trace);
            }
        };
        trace.rounds_used = round;
        trace.token_usage += completion.usage;
        let text = if completion.text.trim().is_empty() {
            "(empty response)".to_string()
        } else {
            completion.text
        };
        let blocks = extract_code_blocks(&text);
        trace.turns.push(ChatTurn::assistant(text.clone()));
        let last_round = round == config.max_rounds;

        if !blocks.is_empty() {
            for code in blocks {
                let req = ExecRequest::new(task_id, code).with_timeout(config.exec_timeout);
                let result = executor.execute(&req);
                trace
                    .turns
                    .push(ChatTurn::tool(format_exec_result(&result)));
            }
            continue;
        }
        match extract_answer(&text) {
            Ok(Some(id)) => {
                trace.outcome = Outcome::Answered;
                trace.answer = Some(Prediction::Object(id));
                return Ok(trace);
            }
            Ok(None) if !last_round => trace.turns.push(ChatTurn::user(CONTINUE_REQUEST)),
            Err(_) if !last_round => trace.turns.push(ChatTurn::user(REFORMAT_REQUEST)),
            _ => {}
        }
    }
    Ok(trace)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    /// Answer with an object id.
    #[default]
    Referit3d,
    /// Answer with the box of the chosen object.
    Scanrefer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum FilterStrategy {
    #[default]
    Lexical,
    Llm,
}

#[derive(Debug, Clone)]
pub struct GroundingConfig {
    pub mode: PromptMode,
    pub protocol: Protocol,
    pub filter: FilterStrategy,
    pub loop_config: LoopConfig,
    pub lexicon: Arc<Lexicon>,
    pub prompts: Arc<PromptBuilder>,
}

impl Default for GroundingConfig {
    fn default() -> Self {
        Self {
            mode: PromptMode::Principles,
            protocol: Protocol::Referit3d,
            filter: FilterStrategy::Lexical,
            loop_config: LoopConfig::default(),
            lexicon: Arc::new(Lexicon::builtin()),
            prompts: Arc::new(PromptBuilder::default()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grounding {
    /// Absent unless the model answered (and, for boxes, named a scene object).
    pub prediction: Option<Prediction>,
    pub filter: FilterResult,
    pub trace: ReasoningTrace,
}

/// Resolves one referring expression end to end.
pub fn ground(
    task: &GroundingTask,
    scene: &SceneTranscript,
    llm: &dyn LlmClient,
    executor: &mut dyn Executor,
    config: &GroundingConfig,
) -> Result<Grounding, EngineError> {
    if task.scene_id != scene.scene_id {
        return Err(EngineError::SceneMismatch {
            task: task.task_id.clone(),
            expected: task.scene_id.clone(),
            got: scene.scene_id.clone(),
        });
    }
    if task.utterance.trim().is_empty() {
        return Err(EngineError::EmptyUtterance);
    }
    let filter = match config.filter {
        FilterStrategy::Lexical => filter_lexical(scene, &task.utterance, &config.lexicon),
        FilterStrategy::Llm => filter_llm(scene, &task.utterance, llm, &config.lexicon),
    };
    let scene_text = render_transcript(scene, Some(&filter.kept_ids))?;
    let turns = config
        .prompts
        .build(&scene_text, &task.utterance, config.mode)?;
    let preload = preload_context(executor, &task.task_id, scene, &filter.kept_ids);
    if preload.status != ExecStatus::Ok {
        tracing::warn!(task = %task.task_id, stderr = %preload.stderr, "context preload failed");
    }
    let trace = run_loop(&task.task_id, turns, llm, executor, &config.loop_config)?;
    let prediction = match (trace.answer_id(), config.protocol) {
        (None, _) => None,
        (Some(id), Protocol::Referit3d) => Some(Prediction::Object(id)),
        (Some(id), Protocol::Scanrefer) => scene.object(id).map(|o| Prediction::Box(o.aabb())),
    };
    Ok(Grounding {
        prediction,
        filter,
        trace,
    })
}

/// One task's outcome in a batch.
#[derive(Debug)]
pub struct TaskRun {
    pub task: GroundingTask,
    pub result: Result<Grounding, EngineError>,
}

impl TaskRun {
    pub fn prediction(&self) -> Option<Prediction> {
        self.result.as_ref().ok().and_then(|g| g.prediction)
    }
}

/// Grounds every task on a pool of `jobs` workers. Results keep input order.
pub fn ground_all(
    tasks: &[GroundingTask],
    scenes: &SceneStore,
    llms: &dyn LlmProvider,
    executors: &dyn ExecutorFactory,
    config: &GroundingConfig,
    jobs: usize,
) -> Vec<TaskRun> {
    let run_one = |task: &GroundingTask| {
        let result = (|| {
            let scene = scenes.get(&task.scene_id)?;
            let llm = llms
                .client_for(&task.task_id)
                .map_err(|source| EngineError::Client {
                    task: task.task_id.clone(),
                    source,
                })?;
            let mut executor = executors.open(&task.task_id);
            ground(task, &scene, llm.as_ref(), executor.as_mut(), config)
        })();
        if let Err(err) = &result {
            tracing::warn!(task = %task.task_id, %err, "grounding failed");
        }
        TaskRun {
            task: task.clone(),
            result,
        }
    };
    match rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
    {
        Ok(pool) => pool.install(|| tasks.par_iter().map(run_one).collect()),
        Err(_) => tasks.iter().map(run_one).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sandbox::ScriptedExecutor;
    use llm::{Role, ScriptedLlm};

    fn prompt() -> Vec<ChatTurn> {
        vec![ChatTurn::system("sys"), ChatTurn::user("scene + utterance")]
    }

    fn cfg(max_rounds: u32) -> LoopConfig {
        LoopConfig {
            max_rounds,
            retry: RetryPolicy::no_delay(),
            ..LoopConfig::default()
        }
    }

    #[test]
    fn code_then_answer() {
        let llm = ScriptedLlm::new([
            "```python\nprint(OBJECTS[19].center)\n```",
            "Chair 19 it is. Now the answer is complete -- {'ID':19}",
        ]);
        let mut ex =
            ScriptedExecutor::default().rule("OBJECTS[19]", ExecResult::ok("(1.0, 2.0, 0.4)\n"));
        let t = run_loop("t", prompt(), &llm, &mut ex, &cfg(10)).unwrap();
        assert_eq!(t.outcome, Outcome::Answered);
        assert_eq!(t.rounds_used, 2);
        assert_eq!(t.answer, Some(Prediction::Object(19)));
        let roles: Vec<Role> = t.turns.iter().map(|t| t.role).collect();
        assert_eq!(
            roles,
            [
                Role::System,
                Role::User,
                Role::Assistant,
                Role::Tool,
                Role::Assistant
            ]
        );
        assert!(t.turns[3].content.contains("(1.0, 2.0, 0.4)"));
    }

    #[test]
    fn multiple_blocks_give_one_tool_turn_each() {
        let llm = ScriptedLlm::new([
            "```python\na = 1\n```\nand\n```python\nprint(a)\n```",
            "Now the answer is complete -- {'ID':2}",
        ]);
        let mut ex = ScriptedExecutor::default();
        let t = run_loop("t", prompt(), &llm, &mut ex, &cfg(5)).unwrap();
        assert_eq!(t.turns.iter().filter(|t| t.role == Role::Tool).count(), 2);
        assert_eq!(ex.log, vec!["a = 1", "print(a)"]);
    }

    #[test]
    fn malformed_answer_gets_reformat_request() {
        let llm = ScriptedLlm::new([
            "Now the answer is complete -- {'ID': 'chair'}",
            "Now the answer is complete -- {'ID': 7}",
        ]);
        let t = run_loop(
            "t",
            prompt(),
            &llm,
            &mut ScriptedExecutor::default(),
            &cfg(5),
        )
        .unwrap();
        assert_eq!(t.answer_id(), Some(7));
        assert_eq!(t.turns[3].content, REFORMAT_REQUEST);
    }

    #[test]
    fn max_rounds_is_a_hard_bound() {
        let llm = ScriptedLlm::new(vec!["thinking..."; 20]);
        let t = run_loop(
            "t",
            prompt(),
            &llm,
            &mut ScriptedExecutor::default(),
            &cfg(4),
        )
        .unwrap();
        assert_eq!(t.outcome, Outcome::MaxRounds);
        assert_eq!(t.rounds_used, 4);
        assert_eq!(
            t.turns.iter().filter(|t| t.role == Role::Assistant).count(),
            4
        );
        assert_eq!(t.turns.last().unwrap().role, Role::Assistant);
        assert!(t.answer.is_none());
        assert!(matches!(
            run_loop(
                "t",
                prompt(),
                &llm,
                &mut ScriptedExecutor::default(),
                &cfg(0)
            ),
            Err(EngineError::NoRounds)
        ));
    }

    #[test]
    fn exhausted_backend_aborts() {
        let llm = ScriptedLlm::new(["```python\nx=1\n```"]);
        let t = run_loop(
            "t",
            prompt(),
            &llm,
            &mut ScriptedExecutor::default(),
            &cfg(5),
        )
        .unwrap();
        assert_eq!(t.outcome, Outcome::Aborted);
        assert_eq!(t.rounds_used, 1);
        assert!(t.abort_cause.unwrap().contains("no response #1"));
    }

    #[test]
    fn exec_result_text() {
        assert_eq!(
            format_exec_result(&ExecResult::ok("")),
            "Code execution result:\n(no output)"
        );
        assert!(format_exec_result(&ExecResult::error("NameError")).contains("Fix the code"));
    }
}

//! `scene-ground` command line.
//!
//! Exit codes: 0 success, 1 task failure, 2 input or configuration error.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::engine::llm::{LiveLlm, LlmProvider, RateLimiter, ScriptBook};
use crate::engine::prompt::{PromptBuilder, PromptMode};
use crate::engine::{
    ground, ground_all, FilterStrategy, GroundingConfig, LoopConfig, Outcome, Prediction, Protocol,
    DEFAULT_MAX_ROUNDS,
};
use crate::eval::{load_tasks, sample_subset, score_referit3d, score_scanrefer, EvalReport};
use crate::filter::{filter_lexical, Lexicon};
use crate::sandbox::{ExecutorFactory, ScriptedExecutor, ShimCommand};
use crate::scene::{load_detections, render_transcript, GroundingTask, SceneStore};
use crate::selfcorrect::build_dataset;

pub const EXIT_OK: i32 = 0;
pub const EXIT_TASK_FAILURE: i32 = 1;
pub const EXIT_INPUT_ERROR: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "scene-ground",
    version,
    about = "Ground referring expressions in 3D scene transcripts"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print the text transcript of a detection file, optionally filtered by an utterance.
    Transcribe {
        scene: PathBuf,
        #[arg(long)]
        utterance: Option<String>,
        /// Extra synonym table merged into the built-in one.
        #[arg(long)]
        lexicon: Option<PathBuf>,
    },
    /// Ground a single task and append its trace to <out>/traces.jsonl.
    Ground {
        #[arg(long = "task-id")]
        task_id: String,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Ground a (sub)set of tasks and write a scored report.
    Eval {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Build a self-corrected fine-tuning set from training tasks.
    BuildFinetune {
        #[command(flatten)]
        run: RunArgs,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeArg {
    Principles,
    NoPrinciples,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProtocolArg {
    Referit3d,
    Scanrefer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FilterArg {
    Lexical,
    Llm,
}

/// Shared run options; each may also come from the `--config` TOML file,
/// with flags taking precedence.
#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub tasks: Option<PathBuf>,
    #[arg(long)]
    pub scenes: Option<PathBuf>,
    /// `scripted:<fixture.json>` or `live:<base-url>`.
    #[arg(long)]
    pub backend: Option<String>,
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    #[arg(long = "max-rounds")]
    pub max_rounds: Option<u32>,
    #[arg(long)]
    pub subset: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub jobs: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub protocol: Option<ProtocolArg>,
    #[arg(long, value_enum)]
    pub filter: Option<FilterArg>,
    /// Interpreter shim command line, e.g. `python3 shim.py`.
    #[arg(long)]
    pub shim: Option<String>,
    #[arg(long)]
    pub lexicon: Option<PathBuf>,
    #[arg(long)]
    pub principles: Option<PathBuf>,
    /// Live backend request budget.
    #[arg(long = "requests-per-minute")]
    pub requests_per_minute: Option<u32>,
}

impl RunArgs {
    fn merged(self) -> Result<Self, String> {
        let Some(path) = &self.config else {
            return Ok(self);
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        let file: RunArgs =
            toml::from_str(&text).map_err(|e| format!("bad config {}: {e}", path.display()))?;
        Ok(Self {
            config: self.config,
            tasks: self.tasks.or(file.tasks),
            scenes: self.scenes.or(file.scenes),
            backend: self.backend.or(file.backend),
            model: self.model.or(file.model),
            mode: self.mode.or(file.mode),
            max_rounds: self.max_rounds.or(file.max_rounds),
            subset: self.subset.or(file.subset),
            seed: self.seed.or(file.seed),
            jobs: self.jobs.or(file.jobs),
            out: self.out.or(file.out),
            protocol: self.protocol.or(file.protocol),
            filter: self.filter.or(file.filter),
            shim: self.shim.or(file.shim),
            lexicon: self.lexicon.or(file.lexicon),
            principles: self.principles.or(file.principles),
            requests_per_minute: self.requests_per_minute.or(file.requests_per_minute),
        })
    }
}

/// Resolved configuration of a run.
pub struct RunConfig {
    pub tasks: Vec<GroundingTask>,
    pub scenes: SceneStore,
    pub llms: Box<dyn LlmProvider>,
    pub executors: Box<dyn ExecutorFactory>,
    pub grounding: GroundingConfig,
    pub jobs: usize,
    pub subset: Option<usize>,
    pub seed: u64,
    pub out: PathBuf,
}

fn backend(args: &RunArgs) -> Result<Box<dyn LlmProvider>, String> {
    let spec = args
        .backend
        .as_deref()
        .ok_or("--backend is required (scripted:<file> or live:<url>)")?;
    if let Some(path) = spec.strip_prefix("scripted:") {
        let book = ScriptBook::load(path).map_err(|e| e.to_string())?;
        return Ok(Box::new(book));
    }
    if let Some(url) = spec.strip_prefix("live:") {
        let model = args
            .model
            .clone()
            .ok_or("--model is required for a live backend")?;
        let limiter = Arc::new(match args.requests_per_minute {
            Some(n) if n > 0 => RateLimiter::per_minute(n),
            _ => RateLimiter::new(std::time::Duration::ZERO),
        });
        let llm = LiveLlm::from_env(url, model).with_rate_limiter(limiter);
        return Ok(Box::new(Arc::new(llm)));
    }
    Err(format!("unknown backend `{spec}`"))
}

impl RunConfig {
    pub fn from_args(args: RunArgs) -> Result<Self, String> {
        let args = args.merged()?;
        let tasks_path = args.tasks.clone().ok_or("--tasks is required")?;
        let tasks = load_tasks(&tasks_path).map_err(|e| e.to_string())?;
        let scenes_dir = args.scenes.clone().ok_or("--scenes is required")?;
        if !scenes_dir.is_dir() {
            return Err(format!(
                "scenes directory {} not found",
                scenes_dir.display()
            ));
        }
        let jobs = args.jobs.unwrap_or(1);
        if jobs == 0 {
            return Err("--jobs must be at least 1".into());
        }
        let max_rounds = args.max_rounds.unwrap_or(DEFAULT_MAX_ROUNDS);
        if max_rounds == 0 {
            return Err("--max-rounds must be at least 1".into());
        }
        let mut lexicon = Lexicon::builtin();
        if let Some(path) = &args.lexicon {
            lexicon.extend(Lexicon::load(path).map_err(|e| e.to_string())?);
        }
        let prompts = match &args.principles {
            Some(path) => PromptBuilder::load(path)
                .map_err(|e| format!("cannot read principles {}: {e}", path.display()))?,
            None => PromptBuilder::default(),
        };
        let executors: Box<dyn ExecutorFactory> = match &args.shim {
            Some(line) => Box::new(ShimCommand::parse(line).ok_or("empty --shim command")?),
            None => Box::new(ScriptedExecutor::unavailable()),
        };
        let grounding = GroundingConfig {
            mode: match args.mode.unwrap_or(ModeArg::Principles) {
                ModeArg::Principles => PromptMode::Principles,
                ModeArg::NoPrinciples => PromptMode::NoPrinciples,
            },
            protocol: match args.protocol.unwrap_or(ProtocolArg::Referit3d) {
                ProtocolArg::Referit3d => Protocol::Referit3d,
                ProtocolArg::Scanrefer => Protocol::Scanrefer,
            },
            filter: match args.filter.unwrap_or(FilterArg::Lexical) {
                FilterArg::Lexical => FilterStrategy::Lexical,
                FilterArg::Llm => FilterStrategy::Llm,
            },
            loop_config: LoopConfig {
                max_rounds,
                ..LoopConfig::default()
            },
            lexicon: Arc::new(lexicon),
            prompts: Arc::new(prompts),
        };
        Ok(Self {
            tasks,
            llms: backend(&args)?,
            scenes: SceneStore::from_dir(scenes_dir),
            executors,
            grounding,
            jobs,
            subset: args.subset,
            seed: args.seed.unwrap_or(0),
            out: args.out.unwrap_or_else(|| PathBuf::from("out")),
        })
    }

    fn selected_tasks(&self) -> Result<Vec<GroundingTask>, String> {
        match self.subset {
            Some(n) => sample_subset(&self.tasks, n, self.seed).map_err(|e| e.to_string()),
            None => Ok(self.tasks.clone()),
        }
    }
}

fn ensure_dir(dir: &Path) -> Result<(), String> {
    std::fs::create_dir_all(dir).map_err(|e| format!("cannot create {}: {e}", dir.display()))
}

fn write_file(path: &Path, contents: &str) -> Result<(), String> {
    std::fs::write(path, contents).map_err(|e| format!("cannot write {}: {e}", path.display()))
}

fn fmt_vec(v: &[f64; 3]) -> String {
    format!("[{:.2}, {:.2}, {:.2}]", v[0], v[1], v[2])
}

pub fn cmd_transcribe(
    scene: &Path,
    utterance: Option<&str>,
    lexicon: Option<&Path>,
) -> Result<String, String> {
    if !scene.is_file() {
        return Err(format!("scene file {} not found", scene.display()));
    }
    let scene = load_detections(scene).map_err(|e| e.to_string())?;
    let ids = match utterance {
        Some(u) => {
            let mut lex = Lexicon::builtin();
            if let Some(path) = lexicon {
                lex.extend(Lexicon::load(path).map_err(|e| e.to_string())?);
            }
            Some(filter_lexical(&scene, u, &lex).kept_ids)
        }
        None => None,
    };
    render_transcript(&scene, ids.as_ref()).map_err(|e| e.to_string())
}

enum Failure {
    Input(String),
    Task(String),
}

fn cmd_ground(task_id: &str, args: RunArgs) -> Result<String, Failure> {
    let cfg = RunConfig::from_args(args).map_err(Failure::Input)?;
    let task = cfg
        .tasks
        .iter()
        .find(|t| t.task_id == task_id)
        .ok_or_else(|| Failure::Input(format!("unknown task id `{task_id}`")))?;
    let scene = cfg
        .scenes
        .get(&task.scene_id)
        .map_err(|e| Failure::Input(e.to_string()))?;
    let llm = cfg
        .llms
        .client_for(task_id)
        .map_err(|e| Failure::Input(e.to_string()))?;
    let mut executor = cfg.executors.open(task_id);
    let grounding = ground(
        task,
        &scene,
        llm.as_ref(),
        executor.as_mut(),
        &cfg.grounding,
    )
    .map_err(|e| Failure::Input(e.to_string()))?;

    ensure_dir(&cfg.out).map_err(Failure::Input)?;
    let path = cfg.out.join("traces.jsonl");
    let mut file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .map_err(|e| Failure::Input(format!("cannot open {}: {e}", path.display())))?;
    let line = serde_json::to_string(&grounding.trace).expect("trace serializes");
    writeln!(file, "{line}").map_err(|e| Failure::Input(e.to_string()))?;

    match grounding.prediction {
        Some(Prediction::Object(id)) => Ok(id.to_string()),
        Some(Prediction::Box(b)) => Ok(format!(
            "center={} size={}",
            fmt_vec(&b.center),
            fmt_vec(&b.size)
        )),
        None => Err(Failure::Task(match grounding.trace.outcome {
            Outcome::Aborted => format!(
                "task {task_id} aborted: {}",
                grounding.trace.abort_cause.unwrap_or_default()
            ),
            Outcome::MaxRounds => format!("task {task_id}: no answer within the round limit"),
            Outcome::Answered => format!("task {task_id}: answered object is not in the scene"),
        })),
    }
}

fn cmd_eval(args: RunArgs) -> Result<String, Failure> {
    let cfg = RunConfig::from_args(args).map_err(Failure::Input)?;
    let tasks = cfg.selected_tasks().map_err(Failure::Input)?;
    let runs = ground_all(
        &tasks,
        &cfg.scenes,
        cfg.llms.as_ref(),
        cfg.executors.as_ref(),
        &cfg.grounding,
        cfg.jobs,
    );

    let report: EvalReport = match cfg.grounding.protocol {
        Protocol::Referit3d => {
            let preds: BTreeMap<String, Option<u32>> = runs
                .iter()
                .map(|r| {
                    (
                        r.task.task_id.clone(),
                        r.prediction().and_then(|p| p.object_id()),
                    )
                })
                .collect();
            score_referit3d(&preds, &tasks)
        }
        Protocol::Scanrefer => {
            let preds = runs
                .iter()
                .map(|r| {
                    (
                        r.task.task_id.clone(),
                        r.prediction().and_then(|p| p.aabb()),
                    )
                })
                .collect();
            score_scanrefer(&preds, &tasks)
        }
    }
    .map_err(|e| Failure::Input(e.to_string()))?;

    ensure_dir(&cfg.out).map_err(Failure::Input)?;
    let mut traces = String::new();
    for run in &runs {
        if let Ok(g) = &run.result {
            traces.push_str(&serde_json::to_string(&g.trace).expect("trace serializes"));
            traces.push('\n');
        }
    }
    write_file(&cfg.out.join("traces.jsonl"), &traces).map_err(Failure::Input)?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    write_file(&cfg.out.join("report.json"), &(json + "\n")).map_err(Failure::Input)?;
    let table = report.to_table();
    write_file(&cfg.out.join("report.txt"), &table).map_err(Failure::Input)?;
    Ok(table)
}

fn cmd_build_finetune(args: RunArgs) -> Result<String, Failure> {
    let cfg = RunConfig::from_args(args).map_err(Failure::Input)?;
    let tasks = cfg.selected_tasks().map_err(Failure::Input)?;
    ensure_dir(&cfg.out).map_err(Failure::Input)?;
    let out = cfg.out.join("finetune.jsonl");
    let stats = build_dataset(
        &tasks,
        &cfg.scenes,
        cfg.llms.as_ref(),
        cfg.executors.as_ref(),
        &cfg.grounding,
        cfg.jobs,
        &out,
    )
    .map_err(|e| match e {
        crate::selfcorrect::BuildError::Run(
            crate::selfcorrect::SelfCorrectError::MissingGroundTruth(t),
        ) => Failure::Input(format!("task {t} has no gt_object_id")),
        other => Failure::Task(other.to_string()),
    })?;
    let json = serde_json::to_string_pretty(&stats).expect("stats serialize");
    write_file(&cfg.out.join("finetune_stats.json"), &(json + "\n")).map_err(Failure::Input)?;
    Ok(format!(
        "records={} correct_first_try={} self_corrected={} dropped={}",
        stats.records, stats.correct_first_try, stats.self_corrected, stats.dropped
    ))
}

/// Runs a parsed command line, printing results to stdout and errors to
/// stderr. Returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let result = match cli.command {
        Command::Transcribe {
            scene,
            utterance,
            lexicon,
        } => {
            cmd_transcribe(&scene, utterance.as_deref(), lexicon.as_deref()).map_err(Failure::Input)
        }
        Command::Ground { task_id, run } => cmd_ground(&task_id, run),
        Command::Eval { run } => cmd_eval(run),
        Command::BuildFinetune { run } => cmd_build_finetune(run),
    };
    match result {
        Ok(text) => {
            println!("{}", text.trim_end());
            EXIT_OK
        }
        Err(Failure::Input(msg)) => {
            eprintln!("error: {msg}");
            EXIT_INPUT_ERROR
        }
        Err(Failure::Task(msg)) => {
            eprintln!("error: {msg}");
            EXIT_TASK_FAILURE
        }
    }
}

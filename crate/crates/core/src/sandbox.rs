//! Code execution for the reasoning loop.
//!
//! Snippets go to an interpreter shim process over newline-delimited JSON on
//! its stdin/stdout:
//!
//! ```text
//! -> {"id": "task7-3", "code": "print(1+1)", "reset": false}
//! <- {"id": "task7-3", "stdout": "2\n", "stderr": "", "status": "ok"}
//! ```
//!
//! One shim process backs one session, and its namespace accumulates across
//! snippets until a reset. The host enforces the timeout by killing the
//! process and caps captured output.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::scene::SceneTranscript;

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(10);
pub const MAX_TIMEOUT: Duration = Duration::from_secs(60);
/// Characters of stdout/stderr kept per snippet.
pub const OUTPUT_LIMIT: usize = 4096;

const HELPERS_PY: &str = include_str!("../assets/helpers.py");

#[derive(Debug, Clone, PartialEq)]
pub struct ExecRequest {
    pub session_id: String,
    pub code: String,
    pub timeout: Duration,
    pub reset: bool,
}

impl ExecRequest {
    pub fn new(session_id: impl Into<String>, code: impl Into<String>) -> Self {
        Self {
            session_id: session_id.into(),
            code: code.into(),
            timeout: DEFAULT_TIMEOUT,
            reset: false,
        }
    }

    pub fn reset(session_id: impl Into<String>) -> Self {
        Self {
            reset: true,
            ..Self::new(session_id, "")
        }
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.code.trim().is_empty() && !self.reset {
            return Err("empty code".into());
        }
        if self.timeout.is_zero() || self.timeout > MAX_TIMEOUT {
            return Err(format!(
                "timeout must be in (0, {}] seconds",
                MAX_TIMEOUT.as_secs()
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExecStatus {
    Ok,
    Error,
    Timeout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecResult {
    pub stdout: String,
    pub stderr: String,
    pub status: ExecStatus,
    /// Seconds.
    pub wall_time: f64,
}

impl ExecResult {
    pub fn ok(stdout: impl Into<String>) -> Self {
        Self {
            stdout: stdout.into(),
            stderr: String::new(),
            status: ExecStatus::Ok,
            wall_time: 0.0,
        }
    }

    pub fn error(stderr: impl Into<String>) -> Self {
        Self {
            stdout: String::new(),
            stderr: stderr.into(),
            status: ExecStatus::Error,
            wall_time: 0.0,
        }
    }
}

/// Wire request line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShimRequest {
    pub id: String,
    pub code: String,
    pub reset: bool,
}

/// Wire response line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShimResponse {
    pub id: String,
    pub stdout: String,
    pub stderr: String,
    pub status: ExecStatus,
}

/// Cuts `text` to `limit` characters, appending a marker when anything was
/// dropped.
pub fn truncate_output(text: &str, limit: usize) -> String {
    match text.char_indices().nth(limit) {
        None => text.to_string(),
        Some((cut, _)) => {
            let omitted = text[cut..].chars().count();
            format!(
                "{}\n...[output truncated: {omitted} characters omitted]",
                &text[..cut]
            )
        }
    }
}

/// A session that runs code snippets in order.
pub trait Executor: Send {
    fn execute(&mut self, req: &ExecRequest) -> ExecResult;
}

/// Opens fresh executor sessions.
pub trait ExecutorFactory: Send + Sync {
    fn open(&self, session_id: &str) -> Box<dyn Executor>;
}

/// How to launch the shim.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShimCommand {
    pub program: String,
    pub args: Vec<String>,
}

impl ShimCommand {
    /// Splits a command line on whitespace.
    pub fn parse(line: &str) -> Option<Self> {
        let mut parts = line.split_whitespace().map(str::to_string);
        Some(Self {
            program: parts.next()?,
            args: parts.collect(),
        })
    }
}

struct ShimProcess {
    child: Child,
    stdin: ChildStdin,
    lines: Receiver<std::io::Result<String>>,
}

impl ShimProcess {
    fn spawn(cmd: &ShimCommand) -> std::io::Result<Self> {
        let mut command = Command::new(&cmd.program);
        command
            .args(&cmd.args)
            .env_clear()
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::null());
        for key in ["PATH", "LANG", "LC_ALL"] {
            if let Ok(v) = std::env::var(key) {
                command.env(key, v);
            }
        }
        let mut child = command.spawn()?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let (tx, lines) = mpsc::channel();
        std::thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        Ok(Self {
            child,
            stdin,
            lines,
        })
    }

    fn kill(mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// Executor backed by a shim subprocess, spawned lazily and respawned after
/// a crash or timeout (which loses the namespace).
pub struct ShimSession {
    session_id: String,
    command: ShimCommand,
    process: Option<ShimProcess>,
    seq: u64,
    output_limit: usize,
}

impl ShimSession {
    pub fn new(session_id: impl Into<String>, command: ShimCommand) -> Self {
        Self {
            session_id: session_id.into(),
            command,
            process: None,
            seq: 0,
            output_limit: OUTPUT_LIMIT,
        }
    }

    pub fn with_output_limit(mut self, limit: usize) -> Self {
        self.output_limit = limit;
        self
    }

    pub fn session_id(&self) -> &str {
        &self.session_id
    }

    fn finish(&self, mut result: ExecResult, started: Instant) -> ExecResult {
        result.stdout = truncate_output(&result.stdout, self.output_limit);
        result.stderr = truncate_output(&result.stderr, self.output_limit);
        result.wall_time = started.elapsed().as_secs_f64();
        result
    }

    fn crashed(&mut self, what: &str) -> ExecResult {
        if let Some(p) = self.process.take() {
            p.kill();
        }
        ExecResult::error(format!(
            "interpreter {what}; it will be restarted with an empty namespace on the next snippet"
        ))
    }

    fn round_trip(&mut self, req: &ExecRequest) -> ExecResult {
        if self.process.is_none() {
            match ShimProcess::spawn(&self.command) {
                Ok(p) => self.process = Some(p),
                Err(err) => {
                    return ExecResult::error(format!(
                        "cannot start interpreter `{}`: {err}",
                        self.command.program
                    ))
                }
            }
        }
        self.seq += 1;
        let id = format!("{}-{}", self.session_id, self.seq);
        let line = serde_json::to_string(&ShimRequest {
            id: id.clone(),
            code: req.code.clone(),
            reset: req.reset,
        })
        .expect("request serializes");
        let proc = self.process.as_mut().expect("spawned above");
        if writeln!(proc.stdin, "{line}")
            .and_then(|_| proc.stdin.flush())
            .is_err()
        {
            return self.crashed("exited unexpectedly");
        }
        let deadline = Instant::now() + req.timeout;
        loop {
            let remaining = deadline.saturating_duration_since(Instant::now());
            let proc = self.process.as_mut().expect("spawned above");
            match proc.lines.recv_timeout(remaining) {
                Ok(Ok(text)) => match serde_json::from_str::<ShimResponse>(&text) {
                    Ok(resp) if resp.id == id => {
                        return ExecResult {
                            stdout: resp.stdout,
                            stderr: resp.stderr,
                            status: resp.status,
                            wall_time: 0.0,
                        }
                    }
                    // a stale reply to an earlier request
                    Ok(_) => continue,
                    Err(err) => return self.crashed(&format!("sent a malformed response ({err})")),
                },
                Ok(Err(_)) | Err(RecvTimeoutError::Disconnected) => {
                    return self.crashed("exited unexpectedly")
                }
                Err(RecvTimeoutError::Timeout) => {
                    if let Some(p) = self.process.take() {
                        p.kill();
                    }
                    return ExecResult {
                        stdout: String::new(),
                        stderr: format!(
                            "execution exceeded the {:.1} s limit; interpreter restarted with an empty namespace",
                            req.timeout.as_secs_f64()
                        ),
                        status: ExecStatus::Timeout,
                        wall_time: 0.0,
                    };
                }
            }
        }
    }
}

impl Executor for ShimSession {
    fn execute(&mut self, req: &ExecRequest) -> ExecResult {
        let started = Instant::now();
        if let Err(why) = req.validate() {
            return ExecResult::error(format!("invalid request: {why}"));
        }
        let result = self.round_trip(req);
        self.finish(result, started)
    }
}

impl Drop for ShimSession {
    fn drop(&mut self) {
        if let Some(p) = self.process.take() {
            p.kill();
        }
    }
}

impl ExecutorFactory for ShimCommand {
    fn open(&self, session_id: &str) -> Box<dyn Executor> {
        Box::new(ShimSession::new(session_id, self.clone()))
    }
}

/// In-process stand-in for the shim: answers each snippet from a rule list
/// (first rule whose needle occurs in the code wins). Records every snippet.
#[derive(Debug, Clone)]
pub struct ScriptedExecutor {
    rules: Vec<(String, ExecResult)>,
    default: ExecResult,
    pub log: Vec<String>,
}

impl Default for ScriptedExecutor {
    fn default() -> Self {
        Self::new(ExecResult::ok(""))
    }
}

impl ScriptedExecutor {
    pub fn new(default: ExecResult) -> Self {
        Self {
            rules: Vec::new(),
            default,
            log: Vec::new(),
        }
    }

    /// Executor that reports that no interpreter is configured.
    pub fn unavailable() -> Self {
        Self::new(ExecResult::error(
            "no code interpreter is configured; reason without code",
        ))
    }

    pub fn rule(mut self, needle: impl Into<String>, result: ExecResult) -> Self {
        self.rules.push((needle.into(), result));
        self
    }
}

impl Executor for ScriptedExecutor {
    fn execute(&mut self, req: &ExecRequest) -> ExecResult {
        if let Err(why) = req.validate() {
            return ExecResult::error(format!("invalid request: {why}"));
        }
        self.log.push(req.code.clone());
        let mut result = self
            .rules
            .iter()
            .find(|(needle, _)| req.code.contains(needle.as_str()))
            .map(|(_, r)| r.clone())
            .unwrap_or_else(|| self.default.clone());
        result.stdout = truncate_output(&result.stdout, OUTPUT_LIMIT);
        result.stderr = truncate_output(&result.stderr, OUTPUT_LIMIT);
        result
    }
}

impl ExecutorFactory for ScriptedExecutor {
    fn open(&self, _session_id: &str) -> Box<dyn Executor> {
        Box::new(Self {
            log: Vec::new(),
            ..self.clone()
        })
    }
}

fn py_float(x: f64) -> String {
    // `{:?}` always keeps a decimal point or exponent, which Python parses
    format!("{:?}", crate::scene::round2(x))
}

fn py_vec(v: &[f64; 3]) -> String {
    format!(
        "({}, {}, {})",
        py_float(v[0]),
        py_float(v[1]),
        py_float(v[2])
    )
}

/// Python source defining the helper functions, `SCENE_CENTER`, and the
/// `OBJECTS` table (id -> Obj) restricted to `kept_ids`, with values rounded
/// as in the transcript.
pub fn context_source(scene: &SceneTranscript, kept_ids: &BTreeSet<u32>) -> String {
    let mut src = String::from(HELPERS_PY);
    let _ = writeln!(
        src,
        "\nSCENE_ID = {}",
        serde_json::to_string(&scene.scene_id).expect("string")
    );
    let _ = writeln!(src, "SCENE_CENTER = {}", py_vec(&scene.scene_center));
    src.push_str("OBJECTS = ObjectTable()\n");
    for o in scene.objects.iter().filter(|o| kept_ids.contains(&o.id)) {
        let _ = writeln!(
            src,
            "OBJECTS[{id}] = Obj({id}, {cat}, {ctr}, {size}, ({r}, {g}, {b}))",
            id = o.id,
            cat = serde_json::to_string(&o.category).expect("string"),
            ctr = py_vec(&o.center),
            size = py_vec(&o.size),
            r = o.rgb[0],
            g = o.rgb[1],
            b = o.rgb[2],
        );
    }
    src
}

/// Loads the filtered object table and the geometry helpers into a session.
pub fn preload_context(
    executor: &mut dyn Executor,
    session_id: &str,
    scene: &SceneTranscript,
    kept_ids: &BTreeSet<u32>,
) -> ExecResult {
    executor.execute(&ExecRequest::new(
        session_id,
        context_source(scene, kept_ids),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn truncation_boundary() {
        let text = "x".repeat(OUTPUT_LIMIT + 10);
        let cut = truncate_output(&text, OUTPUT_LIMIT);
        assert!(cut.starts_with(&"x".repeat(OUTPUT_LIMIT)));
        assert!(!cut.starts_with(&"x".repeat(OUTPUT_LIMIT + 1)));
        assert!(cut.ends_with("[output truncated: 10 characters omitted]"));
        let exact = "y".repeat(OUTPUT_LIMIT);
        assert_eq!(truncate_output(&exact, OUTPUT_LIMIT), exact);
        assert_eq!(
            truncate_output("héllo", 2),
            "hé\n...[output truncated: 3 characters omitted]"
        );
    }

    #[test]
    fn request_validation() {
        assert!(ExecRequest::new("s", "  ").validate().is_err());
        assert!(ExecRequest::reset("s").validate().is_ok());
        assert!(ExecRequest::new("s", "x=1")
            .with_timeout(Duration::from_secs(61))
            .validate()
            .is_err());
        assert!(ExecRequest::new("s", "x=1")
            .with_timeout(Duration::ZERO)
            .validate()
            .is_err());
    }

    #[test]
    fn wire_format_is_exact() {
        let req = ShimRequest {
            id: "a-1".into(),
            code: "print(1)".into(),
            reset: false,
        };
        assert_eq!(
            serde_json::to_string(&req).unwrap(),
            r#"{"id":"a-1","code":"print(1)","reset":false}"#
        );
        let resp: ShimResponse =
            serde_json::from_str(r#"{"id":"a-1","stdout":"1\n","stderr":"","status":"timeout"}"#)
                .unwrap();
        assert_eq!(resp.status, ExecStatus::Timeout);
    }

    #[test]
    fn scripted_executor_rules() {
        let mut ex = ScriptedExecutor::default()
            .rule(
                "undefined_fn",
                ExecResult::error("NameError: name 'undefined_fn' is not defined"),
            )
            .rule("print", ExecResult::ok("2\n"));
        assert_eq!(
            ex.execute(&ExecRequest::new("s", "print(1+1)")).stdout,
            "2\n"
        );
        let err = ex.execute(&ExecRequest::new("s", "undefined_fn()"));
        assert_eq!(err.status, ExecStatus::Error);
        assert_eq!(
            ex.execute(&ExecRequest::new("s", "x = 1")).status,
            ExecStatus::Ok
        );
        assert_eq!(ex.log.len(), 3);
    }

    #[test]
    fn missing_interpreter_is_an_error_result() {
        let mut s = ShimSession::new(
            "s",
            ShimCommand::parse("/nonexistent/definitely-not-a-shim").unwrap(),
        );
        let r = s.execute(&ExecRequest::new("s", "print(1)"));
        assert_eq!(r.status, ExecStatus::Error);
        assert!(r.stderr.contains("cannot start"));
    }

    #[test]
    fn context_source_lists_only_kept_objects() {
        use crate::scene::ObjectRecord;
        let scene = SceneTranscript::new(
            "scene0592",
            None,
            vec![
                ObjectRecord {
                    id: 6,
                    category: "copier".into(),
                    center: [1.0, 2.0, 0.5],
                    size: [1.0; 3],
                    rgb: [200, 200, 200],
                },
                ObjectRecord {
                    id: 19,
                    category: "chair".into(),
                    center: [-2.984, -3.3149, 0.39],
                    size: [0.53, 0.61, 0.81],
                    rgb: [60, 58, 50],
                },
            ],
        )
        .unwrap();
        let src = context_source(&scene, &BTreeSet::from([19]));
        assert!(src.contains(r#"OBJECTS[19] = Obj(19, "chair", (-2.98, -3.31, 0.39), (0.53, 0.61, 0.81), (60, 58, 50))"#), "{src}");
        assert!(!src.contains("OBJECTS[6]"));
    }
}

//! Benchmark scoring: ReferIt3D-style accuracy over object ids with
//! Easy/Hard and view-dependent/independent breakdowns, and ScanRefer-style
//! accuracy at IoU 0.25 and 0.5. Also task-file ingestion, seeded subset
//! sampling and report output.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{iou3d, Aabb};
use crate::scene::GroundingTask;

pub const IOU_THRESHOLDS: [f64; 2] = [0.25, 0.5];

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("task {0} has no distractor_count")]
    MissingDistractors(String),
    #[error("task {0} has no view_dependent flag")]
    MissingViewFlag(String),
    #[error("task {0} has no ground truth for this protocol")]
    MissingGroundTruth(String),
    #[error("prediction for unknown task {0}")]
    UnknownTask(String),
    #[error("task {0} listed twice")]
    DuplicateTask(String),
    #[error("cannot sample {wanted} tasks from {available}")]
    SubsetTooLarge { wanted: usize, available: usize },
    #[error("i/o on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {source}")]
    Json {
        path: String,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Difficulty {
    Easy,
    Hard,
}

/// Easy means at most one distractor of the target's class.
pub fn classify_difficulty(task: &GroundingTask) -> Result<Difficulty, EvalError> {
    match task.distractor_count {
        Some(n) if n <= 1 => Ok(Difficulty::Easy),
        Some(_) => Ok(Difficulty::Hard),
        None => Err(EvalError::MissingDistractors(task.task_id.clone())),
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bucket {
    pub correct: usize,
    pub total: usize,
}

impl Bucket {
    pub fn accuracy(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }

    fn add(&mut self, hit: bool) {
        self.total += 1;
        self.correct += usize::from(hit);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalProtocol {
    Referit3d,
    Scanrefer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: EvalProtocol,
    pub overall: Bucket,
    pub easy: Option<Bucket>,
    pub hard: Option<Bucket>,
    pub view_dep: Option<Bucket>,
    pub view_ind: Option<Bucket>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub acc_at_25: Option<Bucket>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub acc_at_50: Option<Bucket>,
}

fn check_tasks<'a, P>(
    tasks: &'a [GroundingTask],
    predictions: &BTreeMap<String, P>,
) -> Result<(), EvalError> {
    let mut ids: BTreeSet<&'a str> = BTreeSet::new();
    for t in tasks {
        if !ids.insert(&t.task_id) {
            return Err(EvalError::DuplicateTask(t.task_id.clone()));
        }
    }
    if let Some(unknown) = predictions.keys().find(|k| !ids.contains(k.as_str())) {
        return Err(EvalError::UnknownTask(unknown.clone()));
    }
    Ok(())
}

struct Breakdown {
    easy: Bucket,
    hard: Bucket,
    view_dep: Bucket,
    view_ind: Bucket,
}

impl Breakdown {
    fn new() -> Self {
        Self {
            easy: Bucket::default(),
            hard: Bucket::default(),
            view_dep: Bucket::default(),
            view_ind: Bucket::default(),
        }
    }

    fn add(&mut self, task: &GroundingTask, hit: bool) -> Result<(), EvalError> {
        match classify_difficulty(task)? {
            Difficulty::Easy => self.easy.add(hit),
            Difficulty::Hard => self.hard.add(hit),
        }
        match task.view_dependent {
            Some(true) => self.view_dep.add(hit),
            Some(false) => self.view_ind.add(hit),
            None => return Err(EvalError::MissingViewFlag(task.task_id.clone())),
        }
        Ok(())
    }
}

/// Accuracy over object ids. Tasks without a prediction count as wrong.
pub fn score_referit3d(
    predictions: &BTreeMap<String, Option<u32>>,
    tasks: &[GroundingTask],
) -> Result<EvalReport, EvalError> {
    check_tasks(tasks, predictions)?;
    let mut overall = Bucket::default();
    let mut parts = Breakdown::new();
    for task in tasks {
        let gt = task
            .gt_object_id
            .ok_or_else(|| EvalError::MissingGroundTruth(task.task_id.clone()))?;
        let hit = predictions.get(&task.task_id).copied().flatten() == Some(gt);
        overall.add(hit);
        parts.add(task, hit)?;
    }
    Ok(EvalReport {
        protocol: EvalProtocol::Referit3d,
        overall,
        easy: Some(parts.easy),
        hard: Some(parts.hard),
        view_dep: Some(parts.view_dep),
        view_ind: Some(parts.view_ind),
        acc_at_25: None,
        acc_at_50: None,
    })
}

/// Accuracy at IoU 0.25 and 0.5. `overall` and the breakdown buckets use
/// the 0.25 threshold; the breakdown is only reported when every task
/// carries difficulty and view metadata.
pub fn score_scanrefer(
    predictions: &BTreeMap<String, Option<Aabb>>,
    tasks: &[GroundingTask],
) -> Result<EvalReport, EvalError> {
    check_tasks(tasks, predictions)?;
    let mut at = [Bucket::default(); 2];
    let with_meta = tasks
        .iter()
        .all(|t| t.distractor_count.is_some() && t.view_dependent.is_some());
    let mut parts = Breakdown::new();
    for task in tasks {
        let gt = task
            .gt_bbox
            .ok_or_else(|| EvalError::MissingGroundTruth(task.task_id.clone()))?;
        let iou = predictions
            .get(&task.task_id)
            .copied()
            .flatten()
            .map_or(0.0, |p| iou3d(&p, &gt));
        let hits = IOU_THRESHOLDS.map(|t| iou > 0.0 && iou >= t);
        for (b, hit) in at.iter_mut().zip(hits) {
            b.add(hit);
        }
        if with_meta {
            parts.add(task, hits[0])?;
        }
    }
    Ok(EvalReport {
        protocol: EvalProtocol::Scanrefer,
        overall: at[0],
        easy: with_meta.then_some(parts.easy),
        hard: with_meta.then_some(parts.hard),
        view_dep: with_meta.then_some(parts.view_dep),
        view_ind: with_meta.then_some(parts.view_ind),
        acc_at_25: Some(at[0]),
        acc_at_50: Some(at[1]),
    })
}

/// Seeded sample of `n` distinct tasks, in sampled order.
pub fn sample_subset(
    tasks: &[GroundingTask],
    n: usize,
    seed: u64,
) -> Result<Vec<GroundingTask>, EvalError> {
    if n > tasks.len() {
        return Err(EvalError::SubsetTooLarge {
            wanted: n,
            available: tasks.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(rand::seq::index::sample(&mut rng, tasks.len(), n)
        .into_iter()
        .map(|i| tasks[i].clone())
        .collect())
}

/// Reads a task JSONL file (one [`GroundingTask`] per line).
pub fn load_tasks(path: impl AsRef<Path>) -> Result<Vec<GroundingTask>, EvalError> {
    let path = path.as_ref();
    let shown = path.display().to_string();
    let file = std::fs::File::open(path).map_err(|source| EvalError::Io {
        path: shown.clone(),
        source,
    })?;
    let mut tasks = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| EvalError::Io {
            path: shown.clone(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        tasks.push(
            serde_json::from_str(&line).map_err(|source| EvalError::Json {
                path: shown.clone(),
                line: i + 1,
                source,
            })?,
        );
    }
    Ok(tasks)
}

fn pct(b: Option<Bucket>) -> String {
    b.map_or_else(
        || "-".to_string(),
        |b| format!("{:.1}", 100.0 * b.accuracy()),
    )
}

impl EvalReport {
    /// Fixed-width table: Overall, Easy, Hard, View Dep., View Ind., then the
    /// IoU columns for ScanRefer.
    pub fn to_table(&self) -> String {
        let mut cols = vec![
            ("Overall", Some(self.overall)),
            ("Easy", self.easy),
            ("Hard", self.hard),
            ("View Dep.", self.view_dep),
            ("View Ind.", self.view_ind),
        ];
        if self.protocol == EvalProtocol::Scanrefer {
            cols.push(("acc@0.25", self.acc_at_25));
            cols.push(("acc@0.5", self.acc_at_50));
        }
        let mut out = String::new();
        for (name, _) in &cols {
            let _ = write!(out, "{name:>10}");
        }
        out.push('\n');
        for (_, b) in &cols {
            let _ = write!(out, "{:>10}", pct(*b));
        }
        out.push('\n');
        for (_, b) in &cols {
            let n = b.map_or_else(|| "-".to_string(), |b| format!("{}/{}", b.correct, b.total));
            let _ = write!(out, "{n:>10}");
        }
        out.push('\n');
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn task(id: &str, gt: u32, distractors: u32, view_dep: bool) -> GroundingTask {
        GroundingTask {
            gt_object_id: Some(gt),
            distractor_count: Some(distractors),
            view_dependent: Some(view_dep),
            ..GroundingTask::new(id, "scene", "utterance")
        }
    }

    #[test]
    fn difficulty_split() {
        let mut t = task("a", 1, 0, false);
        assert_eq!(classify_difficulty(&t).unwrap(), Difficulty::Easy);
        t.distractor_count = Some(1);
        assert_eq!(classify_difficulty(&t).unwrap(), Difficulty::Easy);
        t.distractor_count = Some(2);
        assert_eq!(classify_difficulty(&t).unwrap(), Difficulty::Hard);
        t.distractor_count = None;
        assert!(matches!(
            classify_difficulty(&t),
            Err(EvalError::MissingDistractors(_))
        ));
    }

    #[test]
    fn two_of_four() {
        let tasks = vec![
            task("e1", 1, 0, false),
            task("e2", 2, 1, true),
            task("h1", 3, 2, false),
            task("h2", 4, 5, true),
        ];
        let preds = BTreeMap::from([
            ("e1".to_string(), Some(1)),
            ("e2".to_string(), Some(9)),
            ("h1".to_string(), Some(3)),
            ("h2".to_string(), None),
        ]);
        let r = score_referit3d(&preds, &tasks).unwrap();
        assert_eq!(r.overall.accuracy(), 0.5);
        assert_eq!(r.easy.unwrap().accuracy(), 0.5);
        assert_eq!(r.hard.unwrap().accuracy(), 0.5);
        assert_eq!(
            r.view_ind.unwrap(),
            Bucket {
                correct: 2,
                total: 2
            }
        );
        assert_eq!(
            r.view_dep.unwrap(),
            Bucket {
                correct: 0,
                total: 2
            }
        );
    }

    #[test]
    fn absent_predictions_score_zero() {
        let tasks = vec![task("a", 1, 0, false), task("b", 2, 3, true)];
        let r = score_referit3d(&BTreeMap::new(), &tasks).unwrap();
        for b in [Some(r.overall), r.easy, r.hard, r.view_dep, r.view_ind] {
            assert_eq!(b.unwrap().accuracy(), 0.0);
        }
    }

    #[test]
    fn unknown_and_duplicate_tasks_rejected() {
        let tasks = vec![task("a", 1, 0, false)];
        let preds = BTreeMap::from([("zzz".to_string(), Some(1))]);
        assert!(matches!(
            score_referit3d(&preds, &tasks),
            Err(EvalError::UnknownTask(_))
        ));
        let dup = vec![task("a", 1, 0, false), task("a", 1, 0, false)];
        assert!(matches!(
            score_referit3d(&BTreeMap::new(), &dup),
            Err(EvalError::DuplicateTask(_))
        ));
    }

    #[test]
    fn scanrefer_thresholds() {
        let gt = Aabb::new([0.0; 3], [2.0; 3]);
        let third = Aabb::new([1.0, 0.0, 0.0], [2.0; 3]);
        let mut tasks = Vec::new();
        for id in ["same", "third", "none"] {
            tasks.push(GroundingTask {
                gt_bbox: Some(gt),
                ..GroundingTask::new(id, "s", "u")
            });
        }
        let preds = BTreeMap::from([
            ("same".to_string(), Some(gt)),
            ("third".to_string(), Some(third)),
            ("none".to_string(), None),
        ]);
        let r = score_scanrefer(&preds, &tasks).unwrap();
        assert_eq!(
            r.acc_at_25.unwrap(),
            Bucket {
                correct: 2,
                total: 3
            }
        );
        assert_eq!(
            r.acc_at_50.unwrap(),
            Bucket {
                correct: 1,
                total: 3
            }
        );
        assert!(r.easy.is_none());
        assert!(r.to_table().contains("acc@0.25"));
    }

    #[test]
    fn subset_sampling() {
        let tasks: Vec<_> = (0..50)
            .map(|i| task(&format!("t{i}"), i, 0, false))
            .collect();
        let a = sample_subset(&tasks, 20, 7).unwrap();
        assert_eq!(a, sample_subset(&tasks, 20, 7).unwrap());
        assert_ne!(a, sample_subset(&tasks, 20, 8).unwrap());
        let all = sample_subset(&tasks, 50, 1).unwrap();
        let ids: BTreeSet<_> = all.iter().map(|t| t.task_id.clone()).collect();
        assert_eq!(ids.len(), 50);
        assert!(matches!(
            sample_subset(&tasks, 51, 1),
            Err(EvalError::SubsetTooLarge {
                wanted: 51,
                available: 50
            })
        ));
    }

    #[test]
    fn table_layout() {
        let tasks = vec![task("a", 1, 0, false)];
        let r = score_referit3d(&BTreeMap::from([("a".to_string(), Some(1))]), &tasks).unwrap();
        let table = r.to_table();
        let header = table.lines().next().unwrap();
        assert_eq!(header, "   Overall      Easy      Hard View Dep. View Ind.");
        assert!(table.lines().nth(1).unwrap().contains("100.0"));
    }
}

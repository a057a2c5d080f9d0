//! Scene and object records, detection-file ingestion and the textual scene
//! transcript handed to the language model.
//!
//! A transcript looks like:
//!
//! ```text
//! scene0592: Scene center: [1.02, -0.48, 1.31]. objs list:
//! monitor, id=0, ctr=[0.52, 2.10, 0.95], size=[0.55, 0.20, 0.40], rgb=[40, 41, 45];
//! chair, id=19, ctr=[-2.98, -3.31, 0.39], size=[0.53, 0.61, 0.81], rgb=[60, 58, 50];
//! ```
//!
//! Coordinates stay in the detector's world frame (z up) and are printed with
//! two decimals; colors are integers.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::geometry::{Aabb, Vec3};

#[derive(Debug, thiserror::Error)]
pub enum SceneError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(
        "malformed detection file at line {line}, column {column} (field `{field}`): {message}"
    )]
    Json {
        line: usize,
        column: usize,
        field: String,
        message: String,
    },
    #[error("duplicate id {0}")]
    DuplicateId(u32),
    #[error("object {id}: {reason}")]
    InvalidObject { id: u32, reason: String },
    #[error("scene `{0}` has no objects")]
    Empty(String),
    #[error("unknown object id {0}")]
    UnknownId(u32),
    #[error("unknown scene `{0}`")]
    UnknownScene(String),
    #[error("transcript line {line}: {reason}: `{text}`")]
    Grammar {
        line: usize,
        reason: String,
        text: String,
    },
}

/// One detected object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectRecord {
    pub id: u32,
    pub category: String,
    pub center: Vec3,
    pub size: Vec3,
    pub rgb: [u8; 3],
}

impl ObjectRecord {
    pub fn aabb(&self) -> Aabb {
        Aabb {
            center: self.center,
            size: self.size,
        }
    }

    /// Copy with center and size rounded the way the transcript prints them.
    pub fn rounded(&self) -> Self {
        Self {
            center: self.center.map(round2),
            size: self.size.map(round2),
            ..self.clone()
        }
    }

    fn validate(&self) -> Result<(), SceneError> {
        let bad = |reason: &str| SceneError::InvalidObject {
            id: self.id,
            reason: reason.to_string(),
        };
        if self.category.trim().is_empty() {
            return Err(bad("empty category"));
        }
        if self.category.contains(',') || self.category.contains('\n') {
            return Err(bad("category may not contain ',' or newlines"));
        }
        if self.center.iter().any(|c| !c.is_finite()) {
            return Err(bad("non-finite center"));
        }
        if self.size.iter().any(|s| !s.is_finite() || *s <= 0.0) {
            return Err(bad("size components must be positive"));
        }
        Ok(())
    }
}

/// An object-centric description of a scene. Immutable once built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneTranscript {
    pub scene_id: String,
    pub scene_center: Vec3,
    pub objects: Vec<ObjectRecord>,
}

impl SceneTranscript {
    /// Validates and builds a scene. Categories are lowercased; a missing
    /// center defaults to the mean of the object centers.
    pub fn new(
        scene_id: impl Into<String>,
        scene_center: Option<Vec3>,
        mut objects: Vec<ObjectRecord>,
    ) -> Result<Self, SceneError> {
        let scene_id = scene_id.into();
        if objects.is_empty() {
            return Err(SceneError::Empty(scene_id));
        }
        let mut seen = HashSet::new();
        for obj in &mut objects {
            obj.category = obj.category.trim().to_lowercase();
            obj.validate()?;
            if !seen.insert(obj.id) {
                return Err(SceneError::DuplicateId(obj.id));
            }
        }
        let scene_center = scene_center.unwrap_or_else(|| mean_center(&objects));
        Ok(Self {
            scene_id,
            scene_center,
            objects,
        })
    }

    pub fn object(&self, id: u32) -> Option<&ObjectRecord> {
        self.objects.iter().find(|o| o.id == id)
    }

    pub fn ids(&self) -> BTreeSet<u32> {
        self.objects.iter().map(|o| o.id).collect()
    }

    /// Scene restricted to `ids`, keeping the original order and center.
    pub fn subset(&self, ids: &BTreeSet<u32>) -> Result<Self, SceneError> {
        if let Some(missing) = ids.iter().find(|id| self.object(**id).is_none()) {
            return Err(SceneError::UnknownId(*missing));
        }
        Ok(Self {
            scene_id: self.scene_id.clone(),
            scene_center: self.scene_center,
            objects: self
                .objects
                .iter()
                .filter(|o| ids.contains(&o.id))
                .cloned()
                .collect(),
        })
    }

    /// The scene as the transcript parser would return it.
    pub fn rounded(&self) -> Self {
        Self {
            scene_id: self.scene_id.clone(),
            scene_center: self.scene_center.map(round2),
            objects: self.objects.iter().map(ObjectRecord::rounded).collect(),
        }
    }
}

fn mean_center(objects: &[ObjectRecord]) -> Vec3 {
    let n = objects.len() as f64;
    let mut sum = [0.0; 3];
    for o in objects {
        for (s, c) in sum.iter_mut().zip(o.center) {
            *s += c;
        }
    }
    sum.map(|s| s / n)
}

/// One referring expression to resolve, with optional ground truth and
/// benchmark metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundingTask {
    pub task_id: String,
    pub scene_id: String,
    pub utterance: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_object_id: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_bbox: Option<Aabb>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distractor_count: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub view_dependent: Option<bool>,
}

impl GroundingTask {
    pub fn new(
        task_id: impl Into<String>,
        scene_id: impl Into<String>,
        utterance: impl Into<String>,
    ) -> Self {
        Self {
            task_id: task_id.into(),
            scene_id: scene_id.into(),
            utterance: utterance.into(),
            gt_object_id: None,
            gt_bbox: None,
            distractor_count: None,
            view_dependent: None,
        }
    }

    /// Usable for scoring: carries some ground truth.
    pub fn has_ground_truth(&self) -> bool {
        self.gt_object_id.is_some() || self.gt_bbox.is_some()
    }
}

/// Scenes by id, read from `<dir>/<scene_id>.json` on first use or supplied
/// up front.
#[derive(Debug, Default)]
pub struct SceneStore {
    dir: Option<PathBuf>,
    cache: Mutex<HashMap<String, Arc<SceneTranscript>>>,
}

impl SceneStore {
    pub fn from_dir(dir: impl Into<PathBuf>) -> Self {
        Self {
            dir: Some(dir.into()),
            cache: Mutex::default(),
        }
    }

    pub fn from_scenes(scenes: impl IntoIterator<Item = SceneTranscript>) -> Self {
        let map = scenes
            .into_iter()
            .map(|s| (s.scene_id.clone(), Arc::new(s)))
            .collect();
        Self {
            dir: None,
            cache: Mutex::new(map),
        }
    }

    pub fn get(&self, scene_id: &str) -> Result<Arc<SceneTranscript>, SceneError> {
        if let Some(scene) = self.cache.lock().expect("scene cache").get(scene_id) {
            return Ok(scene.clone());
        }
        let dir = self
            .dir
            .as_ref()
            .ok_or_else(|| SceneError::UnknownScene(scene_id.to_string()))?;
        let path = dir.join(format!("{scene_id}.json"));
        if !path.is_file() {
            return Err(SceneError::UnknownScene(scene_id.to_string()));
        }
        let scene = Arc::new(load_detections(&path)?);
        if scene.scene_id != scene_id {
            return Err(SceneError::UnknownScene(format!(
                "{scene_id} ({} declares scene_id `{}`)",
                path.display(),
                scene.scene_id
            )));
        }
        self.cache
            .lock()
            .expect("scene cache")
            .insert(scene_id.to_string(), scene.clone());
        Ok(scene)
    }
}

/// Rounds to the two decimals printed in transcripts.
pub fn round2(x: f64) -> f64 {
    let r: f64 = format!("{x:.2}").parse().expect("formatted float parses");
    // avoid "-0.00" drifting through round trips
    if r == 0.0 {
        0.0
    } else {
        r
    }
}

#[derive(Deserialize)]
struct DetectionFile {
    scene_id: String,
    #[serde(default)]
    scene_center: Option<Vec3>,
    objects: Vec<ObjectRecord>,
}

/// Parses a detection JSON document.
pub fn parse_detections(text: &str) -> Result<SceneTranscript, SceneError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let file: DetectionFile = serde_path_to_error::deserialize(de).map_err(|err| {
        let field = err.path().to_string();
        let inner = err.into_inner();
        SceneError::Json {
            line: inner.line(),
            column: inner.column(),
            field,
            message: inner.to_string(),
        }
    })?;
    SceneTranscript::new(file.scene_id, file.scene_center, file.objects)
}

pub fn load_detections(path: impl AsRef<Path>) -> Result<SceneTranscript, SceneError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| SceneError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_detections(&text)
}

fn fmt_vec(v: &Vec3) -> String {
    format!(
        "[{:.2}, {:.2}, {:.2}]",
        round2(v[0]),
        round2(v[1]),
        round2(v[2])
    )
}

fn header_line(scene: &SceneTranscript) -> String {
    format!(
        "{}: Scene center: {}. objs list:",
        scene.scene_id,
        fmt_vec(&scene.scene_center)
    )
}

pub fn object_line(obj: &ObjectRecord) -> String {
    format!(
        "{}, id={}, ctr={}, size={}, rgb=[{}, {}, {}];",
        obj.category,
        obj.id,
        fmt_vec(&obj.center),
        fmt_vec(&obj.size),
        obj.rgb[0],
        obj.rgb[1],
        obj.rgb[2]
    )
}

/// Renders the transcript; with `ids`, only those objects are listed (in
/// scene order).
pub fn render_transcript(
    scene: &SceneTranscript,
    ids: Option<&BTreeSet<u32>>,
) -> Result<String, SceneError> {
    if let Some(ids) = ids {
        if let Some(missing) = ids.iter().find(|id| scene.object(**id).is_none()) {
            return Err(SceneError::UnknownId(*missing));
        }
    }
    let mut out = header_line(scene);
    for obj in &scene.objects {
        if ids.is_some_and(|ids| !ids.contains(&obj.id)) {
            continue;
        }
        out.push('\n');
        let _ = write!(out, "{}", object_line(obj));
    }
    Ok(out)
}

fn parse_vec3(text: &str) -> Option<Vec3> {
    let inner = text.trim().strip_prefix('[')?.strip_suffix(']')?;
    let parts: Vec<f64> = inner
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .ok()?;
    let v: Vec3 = parts.try_into().ok()?;
    Some(v.map(|x| if x == 0.0 { 0.0 } else { x }))
}

fn parse_rgb(text: &str) -> Option<[u8; 3]> {
    let inner = text.trim().strip_prefix('[')?.strip_suffix(']')?;
    let parts: Vec<u8> = inner
        .split(',')
        .map(|p| p.trim().parse::<u8>())
        .collect::<Result<_, _>>()
        .ok()?;
    parts.try_into().ok()
}

/// Takes the bracketed value following `key=` and the rest of the line.
fn take_field<'a>(rest: &'a str, key: &str) -> Result<(&'a str, &'a str), String> {
    let rest = rest.trim_start();
    let rest = rest
        .strip_prefix(key)
        .and_then(|r| r.strip_prefix('='))
        .ok_or_else(|| format!("expected `{key}=`"))?;
    let end = rest
        .find(']')
        .ok_or_else(|| format!("unterminated `{key}` value"))?;
    let value = &rest[..=end];
    let tail = rest[end + 1..].trim_start();
    let tail = tail.strip_prefix(',').unwrap_or(tail);
    Ok((value, tail))
}

fn parse_object_line(line: &str) -> Result<ObjectRecord, String> {
    let body = line
        .trim()
        .strip_suffix(';')
        .ok_or("missing trailing `;`")?;
    let (category, rest) = body.split_once(", id=").ok_or("expected `, id=`")?;
    let (id_text, rest) = rest.split_once(',').ok_or("expected `,` after id")?;
    let id = id_text
        .trim()
        .parse::<u32>()
        .map_err(|_| "id is not a non-negative integer")?;
    let (ctr, rest) = take_field(rest, "ctr")?;
    let (size, rest) = take_field(rest, "size")?;
    let (rgb, rest) = take_field(rest, "rgb")?;
    if !rest.trim().is_empty() {
        return Err("trailing text after rgb".into());
    }
    Ok(ObjectRecord {
        id,
        category: category.trim().to_string(),
        center: parse_vec3(ctr).ok_or("bad ctr vector")?,
        size: parse_vec3(size).ok_or("bad size vector")?,
        rgb: parse_rgb(rgb).ok_or("bad rgb triple")?,
    })
}

/// Inverse of [`render_transcript`]. Blank lines and `...` elision lines are
/// skipped; the header may carry extra text around its fields.
pub fn parse_transcript(text: &str) -> Result<SceneTranscript, SceneError> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && *l != "...");
    let (hline, header) = lines.next().ok_or_else(|| SceneError::Grammar {
        line: 1,
        reason: "empty transcript".into(),
        text: String::new(),
    })?;
    let grammar = |line: usize, reason: &str, text: &str| SceneError::Grammar {
        line,
        reason: reason.to_string(),
        text: text.to_string(),
    };
    let (scene_id, rest) = header
        .split_once(':')
        .ok_or_else(|| grammar(hline, "header must start with `<scene_id>:`", header))?;
    let center_text = rest
        .split_once("Scene center:")
        .map(|(_, c)| c)
        .ok_or_else(|| grammar(hline, "header lacks `Scene center:`", header))?;
    let end = center_text
        .find(']')
        .ok_or_else(|| grammar(hline, "unterminated scene center", header))?;
    let scene_center = parse_vec3(&center_text[..=end])
        .ok_or_else(|| grammar(hline, "bad scene center vector", header))?;

    let mut objects = Vec::new();
    for (n, line) in lines {
        let obj = parse_object_line(line).map_err(|reason| grammar(n, &reason, line))?;
        objects.push(obj);
    }
    let mut seen = HashSet::new();
    for o in &objects {
        if !seen.insert(o.id) {
            return Err(SceneError::DuplicateId(o.id));
        }
    }
    Ok(SceneTranscript {
        scene_id: scene_id.trim().to_string(),
        scene_center,
        objects,
    })
}

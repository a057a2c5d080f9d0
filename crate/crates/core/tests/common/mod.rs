#![allow(dead_code)]

use std::path::PathBuf;
use std::process::Command;

use scene_grounding::sandbox::ShimCommand;
use scene_grounding::scene::load_detections;
use scene_grounding::SceneTranscript;

pub fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

pub fn office() -> SceneTranscript {
    load_detections(fixtures().join("scenes/scene0592_00.json")).expect("office fixture")
}

pub fn python_available() -> bool {
    Command::new("python3")
        .arg("-c")
        .arg("pass")
        .status()
        .is_ok_and(|s| s.success())
}

/// The protocol test double, or `None` (test skipped) without python3.
pub fn fake_shim() -> Option<ShimCommand> {
    if !python_available() {
        eprintln!("python3 not found; skipping shim-backed test");
        return None;
    }
    Some(ShimCommand {
        program: "python3".into(),
        args: vec![fixtures().join("fake_shim.py").display().to_string()],
    })
}

pub const CORNER_UTTERANCE: &str =
    "chair in the corner of the room, between white and yellow desks";

pub const CORNER_CODE: &str = "```python\nwalls = OBJECTS.of_category('wall')\nfor c in OBJECTS.of_category('chair'):\n    print(c.id, round(corner_score(c, walls), 2))\n```";

pub const CORNER_ANSWER: &str = "Chair 18 has the smallest corner score and sits between the white desk 12 and the yellow desk 13. Now the answer is complete -- {'ID':18}";

pub const VOXEL: f64 = 0.01;

/// Number of grid cells (edge `VOXEL`) whose centers fall in `[lo, hi)`.
fn cells(lo: f64, hi: f64) -> i64 {
    if hi <= lo {
        return 0;
    }
    let first = (lo / VOXEL - 0.5).ceil() as i64;
    let last = (hi / VOXEL - 0.5).ceil() as i64 - 1;
    (last - first + 1).max(0)
}

/// IoU by counting voxel centers on a fixed grid. Axis-aligned boxes make
/// the count separable, so each axis is counted on its own and multiplied.
pub fn voxel_iou(a: &scene_grounding::Aabb, b: &scene_grounding::Aabb) -> f64 {
    let (amin, amax, bmin, bmax) = (a.min(), a.max(), b.min(), b.max());
    let mut na = 1i64;
    let mut nb = 1i64;
    let mut ni = 1i64;
    for i in 0..3 {
        na *= cells(amin[i], amax[i]);
        nb *= cells(bmin[i], bmax[i]);
        ni *= cells(amin[i].max(bmin[i]), amax[i].min(bmax[i]));
    }
    let union = na + nb - ni;
    if union == 0 {
        0.0
    } else {
        ni as f64 / union as f64
    }
}

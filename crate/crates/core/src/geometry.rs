//! Geometric and color primitives used by the reasoning helpers and the
//! evaluation metrics. The up axis is +z; view-dependent relations are
//! resolved in the horizontal (x, y) plane.

use serde::{Deserialize, Serialize};

pub type Vec3 = [f64; 3];

/// Eye height of the default observer, meters.
pub const STANDING_HEIGHT: f64 = 1.6;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GeometryError {
    #[error("rgb component {0} outside 0..=255")]
    RgbOutOfRange(i64),
    #[error("plane normal must have unit length (|n| = {0})")]
    NonUnitNormal(f64),
    #[error("anchor coincides with the observer in the horizontal plane")]
    DegenerateView,
    #[error("segment endpoints coincide")]
    DegenerateSegment,
    #[error("corner score needs at least two walls, got {0}")]
    InsufficientWalls(usize),
}

/// Axis-aligned box given by center and full extents.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub center: Vec3,
    pub size: Vec3,
}

impl Aabb {
    pub fn new(center: Vec3, size: Vec3) -> Self {
        Self { center, size }
    }

    pub fn min(&self) -> Vec3 {
        std::array::from_fn(|i| self.center[i] - self.size[i] / 2.0)
    }

    pub fn max(&self) -> Vec3 {
        std::array::from_fn(|i| self.center[i] + self.size[i] / 2.0)
    }

    pub fn volume(&self) -> f64 {
        self.size.iter().product()
    }
}

/// Intersection over union of two axis-aligned boxes.
pub fn iou3d(a: &Aabb, b: &Aabb) -> f64 {
    if a == b {
        return 1.0;
    }
    let (amin, amax, bmin, bmax) = (a.min(), a.max(), b.min(), b.max());
    let mut inter = 1.0;
    for i in 0..3 {
        let overlap = amax[i].min(bmax[i]) - amin[i].max(bmin[i]);
        if overlap <= 0.0 {
            return 0.0;
        }
        inter *= overlap;
    }
    let union = a.volume() + b.volume() - inter;
    (inter / union).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hsl {
    /// Degrees in [0, 360).
    pub h: f64,
    pub s: f64,
    pub l: f64,
}

pub fn rgb_to_hsl(rgb: [i64; 3]) -> Result<Hsl, GeometryError> {
    if let Some(bad) = rgb.iter().find(|c| !(0..=255).contains(*c)) {
        return Err(GeometryError::RgbOutOfRange(*bad));
    }
    let [r, g, b] = rgb.map(|c| c as f64 / 255.0);
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let l = (max + min) / 2.0;
    let delta = max - min;
    if delta == 0.0 {
        return Ok(Hsl { h: 0.0, s: 0.0, l });
    }
    let s = if l <= 0.5 {
        delta / (max + min)
    } else {
        delta / (2.0 - max - min)
    };
    let h = if max == r {
        60.0 * ((g - b) / delta)
    } else if max == g {
        60.0 * ((b - r) / delta + 2.0)
    } else {
        60.0 * ((r - g) / delta + 4.0)
    };
    let h = h.rem_euclid(360.0);
    Ok(Hsl {
        h: if h >= 360.0 { 0.0 } else { h },
        s,
        l,
    })
}

pub fn rgb8_to_hsl(rgb: [u8; 3]) -> Hsl {
    rgb_to_hsl(rgb.map(i64::from)).expect("u8 components are in range")
}

pub fn hsl_to_rgb(hsl: Hsl) -> [u8; 3] {
    let c = (1.0 - (2.0 * hsl.l - 1.0).abs()) * hsl.s;
    let hp = hsl.h.rem_euclid(360.0) / 60.0;
    let x = c * (1.0 - (hp.rem_euclid(2.0) - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = hsl.l - c / 2.0;
    [r, g, b].map(|v| ((v + m) * 255.0).round().clamp(0.0, 255.0) as u8)
}

/// Relative weights of the hue, saturation and lightness terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ColorWeights {
    pub hue: f64,
    pub saturation: f64,
    pub lightness: f64,
}

impl Default for ColorWeights {
    fn default() -> Self {
        Self {
            hue: 1.0,
            saturation: 0.5,
            lightness: 0.5,
        }
    }
}

/// Hue difference folded onto [0, 180].
pub fn hue_gap(a: f64, b: f64) -> f64 {
    let d = (a - b).abs() % 360.0;
    d.min(360.0 - d)
}

/// Weighted Euclidean distance in HSL with a circular hue term normalized by
/// 180 degrees.
pub fn color_distance(a: &Hsl, b: &Hsl, w: &ColorWeights) -> f64 {
    let dh = w.hue * hue_gap(a.h, b.h) / 180.0;
    let ds = w.saturation * (a.s - b.s);
    let dl = w.lightness * (a.l - b.l);
    (dh * dh + ds * ds + dl * dl).sqrt()
}

pub fn sub(a: &Vec3, b: &Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn dot(a: &Vec3, b: &Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn norm(a: &Vec3) -> f64 {
    dot(a, a).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Plane {
    pub point: Vec3,
    pub normal: Vec3,
}

pub fn point_plane_distance(p: &Vec3, plane: &Plane) -> Result<f64, GeometryError> {
    let n = norm(&plane.normal);
    if (n - 1.0).abs() > 1e-6 {
        return Err(GeometryError::NonUnitNormal(n));
    }
    Ok(dot(&sub(p, &plane.point), &plane.normal).abs())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left,
    Right,
    Aligned,
}

/// Below this horizontal cross product (m^2) the candidate counts as aligned.
pub const SIDE_TOLERANCE: f64 = 1e-9;

/// Which side of the observer's line of sight towards `anchor` the candidate
/// lies on, judged in the horizontal plane.
pub fn left_right_of(
    anchor: &Vec3,
    candidate: &Vec3,
    observer: &Vec3,
) -> Result<Side, GeometryError> {
    let fwd = sub(anchor, observer);
    if fwd[0].hypot(fwd[1]) < 1e-12 {
        return Err(GeometryError::DegenerateView);
    }
    let to_cand = sub(candidate, observer);
    let cross_z = fwd[0] * to_cand[1] - fwd[1] * to_cand[0];
    Ok(if cross_z.abs() < SIDE_TOLERANCE {
        Side::Aligned
    } else if cross_z > 0.0 {
        Side::Left
    } else {
        Side::Right
    })
}

/// Observer standing at the scene center.
pub fn default_observer(scene_center: &Vec3) -> Vec3 {
    [scene_center[0], scene_center[1], STANDING_HEIGHT]
}

/// Perpendicular offsets up to this fraction of |ab| still count as fully
/// between.
pub const BETWEEN_SLACK: f64 = 0.1;
/// Falloff scale of the betweenness score, in units of |ab|.
pub const BETWEEN_SIGMA: f64 = 0.25;

/// How well `x` sits between `a` and `b`: 1 inside the segment near its axis,
/// decaying as a Gaussian in the (segment-length normalized) distance outside
/// the segment and perpendicular offset beyond the slack.
pub fn betweenness(a: &Vec3, b: &Vec3, x: &Vec3) -> Result<f64, GeometryError> {
    let ab = sub(b, a);
    let len2 = dot(&ab, &ab);
    if len2 < 1e-18 {
        return Err(GeometryError::DegenerateSegment);
    }
    let len = len2.sqrt();
    let ax = sub(x, a);
    let t = dot(&ax, &ab) / len2;
    let foot = [a[0] + t * ab[0], a[1] + t * ab[1], a[2] + t * ab[2]];
    let perp = norm(&sub(x, &foot)) / len;
    let outside = (-t).max(t - 1.0).max(0.0);
    let offset = (perp - BETWEEN_SLACK).max(0.0);
    let d2 = outside * outside + offset * offset;
    Ok((-d2 / (2.0 * BETWEEN_SIGMA * BETWEEN_SIGMA)).exp())
}

/// The large face of a wall box on the side facing `p`. The face normal is
/// the wall's thinnest horizontal axis.
pub fn wall_face(wall: &Aabb, p: &Vec3) -> Plane {
    let axis = if wall.size[0] <= wall.size[1] { 0 } else { 1 };
    let mut normal = [0.0; 3];
    let mut point = wall.center;
    let side = if p[axis] >= wall.center[axis] {
        1.0
    } else {
        -1.0
    };
    normal[axis] = 1.0;
    point[axis] += side * wall.size[axis] / 2.0;
    Plane { point, normal }
}

/// Sum of the two smallest distances from the object's center to the wall
/// faces; lower means more tucked into a corner.
pub fn corner_score(obj: &Aabb, walls: &[Aabb]) -> Result<f64, GeometryError> {
    if walls.len() < 2 {
        return Err(GeometryError::InsufficientWalls(walls.len()));
    }
    let mut dists: Vec<f64> = walls
        .iter()
        .map(|w| point_plane_distance(&obj.center, &wall_face(w, &obj.center)))
        .collect::<Result<_, _>>()?;
    dists.sort_by(f64::total_cmp);
    Ok(dists[0] + dists[1])
}

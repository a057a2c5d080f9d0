# Geometry helpers preloaded into every interpreter session. These mirror the
# host-side implementations in geometry.rs and must stay numerically identical.
import math

STANDING_HEIGHT = 1.6
SIDE_TOLERANCE = 1e-9
BETWEEN_SLACK = 0.1
BETWEEN_SIGMA = 0.25
COLOR_WEIGHTS = (1.0, 0.5, 0.5)


class Obj:
    __slots__ = ("id", "category", "center", "size", "rgb")

    def __init__(self, id, category, center, size, rgb):
        self.id = id
        self.category = category
        self.center = tuple(center)
        self.size = tuple(size)
        self.rgb = tuple(rgb)

    def __repr__(self):
        return "Obj(id=%d, category=%r, center=%r, size=%r, rgb=%r)" % (
            self.id, self.category, list(self.center), list(self.size), list(self.rgb))


class ObjectTable(dict):
    def __missing__(self, key):
        raise KeyError("object id %r is not among the relevant objects" % (key,))

    def of_category(self, category):
        return [o for o in self.values() if o.category == category]


def _box(b):
    if hasattr(b, "center"):
        return b.center, b.size
    return b[0], b[1]


def iou3d(a, b):
    (ac, asz), (bc, bsz) = _box(a), _box(b)
    if tuple(ac) == tuple(bc) and tuple(asz) == tuple(bsz):
        return 1.0
    inter = 1.0
    for i in range(3):
        amin, amax = ac[i] - asz[i] / 2.0, ac[i] + asz[i] / 2.0
        bmin, bmax = bc[i] - bsz[i] / 2.0, bc[i] + bsz[i] / 2.0
        overlap = min(amax, bmax) - max(amin, bmin)
        if overlap <= 0.0:
            return 0.0
        inter *= overlap
    union = asz[0] * asz[1] * asz[2] + bsz[0] * bsz[1] * bsz[2] - inter
    return min(max(inter / union, 0.0), 1.0)


def rgb_to_hsl(rgb):
    if any(c < 0 or c > 255 for c in rgb):
        raise ValueError("rgb component outside 0..255: %r" % (rgb,))
    r, g, b = (c / 255.0 for c in rgb)
    mx, mn = max(r, g, b), min(r, g, b)
    l = (mx + mn) / 2.0
    d = mx - mn
    if d == 0.0:
        return (0.0, 0.0, l)
    s = d / (mx + mn) if l <= 0.5 else d / (2.0 - mx - mn)
    if mx == r:
        h = 60.0 * ((g - b) / d)
    elif mx == g:
        h = 60.0 * ((b - r) / d + 2.0)
    else:
        h = 60.0 * ((r - g) / d + 4.0)
    h = h % 360.0
    if h >= 360.0:
        h = 0.0
    return (h, s, l)


def hue_gap(a, b):
    d = abs(a - b) % 360.0
    return min(d, 360.0 - d)


def color_distance(a, b, weights=COLOR_WEIGHTS):
    dh = weights[0] * hue_gap(a[0], b[0]) / 180.0
    ds = weights[1] * (a[1] - b[1])
    dl = weights[2] * (a[2] - b[2])
    return math.sqrt(dh * dh + ds * ds + dl * dl)


def _sub(a, b):
    return (a[0] - b[0], a[1] - b[1], a[2] - b[2])


def _dot(a, b):
    return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]


def point_plane_distance(p, point, normal):
    n = math.sqrt(_dot(normal, normal))
    if abs(n - 1.0) > 1e-6:
        raise ValueError("plane normal must have unit length")
    return abs(_dot(_sub(p, point), normal))


def default_observer():
    c = SCENE_CENTER
    return (c[0], c[1], STANDING_HEIGHT)


def left_right_of(anchor, candidate, observer=None):
    """'left', 'right' or 'aligned' as seen from observer looking at anchor."""
    if hasattr(anchor, "center"):
        anchor = anchor.center
    if hasattr(candidate, "center"):
        candidate = candidate.center
    if observer is None:
        observer = default_observer()
    fwd = _sub(anchor, observer)
    if math.hypot(fwd[0], fwd[1]) < 1e-12:
        raise ValueError("anchor coincides with the observer in the horizontal plane")
    to_c = _sub(candidate, observer)
    cross_z = fwd[0] * to_c[1] - fwd[1] * to_c[0]
    if abs(cross_z) < SIDE_TOLERANCE:
        return "aligned"
    return "left" if cross_z > 0.0 else "right"


def betweenness(a, b, x):
    ab = _sub(b, a)
    len2 = _dot(ab, ab)
    if len2 < 1e-18:
        raise ValueError("segment endpoints coincide")
    length = math.sqrt(len2)
    t = _dot(_sub(x, a), ab) / len2
    foot = (a[0] + t * ab[0], a[1] + t * ab[1], a[2] + t * ab[2])
    off = _sub(x, foot)
    perp = math.sqrt(_dot(off, off)) / length
    outside = max(max(-t, t - 1.0), 0.0)
    offset = max(perp - BETWEEN_SLACK, 0.0)
    d2 = outside * outside + offset * offset
    return math.exp(-d2 / (2.0 * BETWEEN_SIGMA * BETWEEN_SIGMA))


def wall_face(wall, p):
    c, s = _box(wall)
    axis = 0 if s[0] <= s[1] else 1
    normal = [0.0, 0.0, 0.0]
    point = list(c)
    side = 1.0 if p[axis] >= c[axis] else -1.0
    normal[axis] = 1.0
    point[axis] += side * s[axis] / 2.0
    return tuple(point), tuple(normal)


def corner_score(obj, walls):
    if len(walls) < 2:
        raise ValueError("corner score needs at least two walls")
    c, _ = _box(obj)
    dists = sorted(point_plane_distance(c, *wall_face(w, c)) for w in walls)
    return dists[0] + dists[1]

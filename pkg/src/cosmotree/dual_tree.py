"""The real tree dual to a lifted multicurve, realized lazily.

Vertices are complementary regions of the leaf system, edges are leaves
with length equal to their weight.  Nothing is materialized globally:
every query reduces to counting weighted separating leaves, which is
exact up to the leaf system's truncation horizon.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations

import numpy as np

from .errors import SearchInconclusiveError
from .lamination import LeafSystem, intersection_number, perturb
from .minkowski import geodesic_foot, h2_tangent, mink_inner
from .surface_group import parse_word, word_inverse, word_name

FOUR_POINT_TOL = 1e-9
AXIS_SEARCH_TOL = 1e-6


def leaf_fingerprint(dual: np.ndarray) -> tuple[float, float, float]:
    v = np.round(dual, 9) + 0.0  # normalize -0.0 to 0.0
    return (float(v[0]), float(v[1]), float(v[2]))


@dataclass(frozen=True)
class RegionId:
    """Canonical name of a complementary region.

    The key lists (leaf fingerprint, side sign) for every enumerated leaf
    separating the region from the base region, sorted; two points get
    equal keys iff no enumerated leaf separates them.
    """

    key: tuple[tuple[tuple[float, float, float], int], ...]
    representative: np.ndarray

    def __eq__(self, other):
        return isinstance(other, RegionId) and self.key == other.key

    def __hash__(self):
        return hash(self.key)

    @property
    def depth(self) -> int:
        return len(self.key)


@dataclass(frozen=True)
class TreePoint:
    """A point of the dual tree: a region vertex or a point on an edge.

    Edge points carry the leaf index and the offset s from the edge's
    near endpoint (the region on the basepoint side), with 0 <= s <= weight.
    """

    region: RegionId | None = None
    leaf_index: int | None = None
    offset: float = 0.0

    @property
    def is_vertex(self) -> bool:
        return self.region is not None


def region_of(system: LeafSystem, p: np.ndarray) -> RegionId:
    """Canonical region of a point (points on a leaf go to its + side)."""
    sides = system.sides(p)
    mask = sides != system.base_sides
    key = tuple(
        sorted(
            (leaf_fingerprint(system.duals[i]), int(sides[i]))
            for i in np.flatnonzero(mask)
        )
    )
    return RegionId(key, p)


def tree_distance(system: LeafSystem, x: np.ndarray, y: np.ndarray) -> float:
    """Pseudo-distance on H^2: total weight of leaves separating x from y."""
    return system.weight_between(x, y)


def tree_point_distance(system: LeafSystem, a: TreePoint, b: TreePoint) -> float:
    """Distance between two tree points, handling edge offsets.

    Vertices are compared through their region representatives; an edge
    point at offset s exits through either endpoint (cost s to the near
    vertex, weight - s to the far one), and in a tree the minimum over
    exit choices is exact.
    """
    sn, sf = system.witness_sides

    def exits(t: TreePoint):
        if t.is_vertex:
            return [(system.sides(t.region.representative), 0.0)]
        i = t.leaf_index
        return [(sn[:, i], t.offset), (sf[:, i], float(system.weights[i]) - t.offset)]

    if not a.is_vertex and not b.is_vertex and a.leaf_index == b.leaf_index:
        return abs(a.offset - b.offset)
    best = np.inf
    for sa, ca in exits(a):
        for sb, cb in exits(b):
            best = min(best, ca + cb + system.weight_between_sides(sa, sb))
    return float(best)


def separating_leaves_ordered(
    system: LeafSystem, x: np.ndarray, y: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Leaves separating x from y, in crossing order along the geodesic [x, y].

    Returns (leaf indices, crossing parameters), the parameters being
    hyperbolic arclengths from x along the geodesic toward y.  Because
    complementary regions are convex, crossing order along the geodesic
    equals the tree order of the dual edges.
    """
    mask = system.separating_mask(x, y)
    idx = np.flatnonzero(mask)
    if len(idx) == 0:
        return idx, np.empty(0)
    t = h2_tangent(x, y)
    num = system._vm[idx] @ x
    den = system._vm[idx] @ t
    params = np.arctanh(np.clip(-num / den, -1 + 1e-15, 1 - 1e-15))
    order = np.argsort(params)
    return idx[order], params[order]


@dataclass(frozen=True)
class FourPointReport:
    tuples_checked: int
    max_defect: float
    violations: tuple[tuple[int, int, int, int, float], ...]

    @property
    def passed(self) -> bool:
        return not self.violations


def four_point_check(
    system: LeafSystem,
    points: list[np.ndarray],
    max_tuples: int | None = None,
    rng: np.random.Generator | None = None,
) -> FourPointReport:
    """0-hyperbolicity test: two largest of the three pair-sums must tie.

    Checks every 4-subset of the sample (or a deterministic random
    subsample of max_tuples of them) against the four-point condition
    with tolerance 1e-9.
    """
    if len(points) < 4:
        raise ValueError("need at least 4 points")
    pts = np.asarray(points)
    sides = np.where(system._vm @ pts.T >= -1e-12, 1, -1) if len(system) else np.zeros((0, len(pts)))
    w = system.weights

    def dist(i, j):
        return float(w[sides[:, i] != sides[:, j]].sum())

    quads = list(combinations(range(len(pts)), 4))
    if max_tuples is not None and len(quads) > max_tuples:
        rng = rng or np.random.default_rng(0)
        sel = rng.choice(len(quads), size=max_tuples, replace=False)
        quads = [quads[k] for k in sorted(sel)]
    max_defect = 0.0
    violations = []
    for i, j, k, l in quads:
        sums = sorted(
            (
                dist(i, j) + dist(k, l),
                dist(i, k) + dist(j, l),
                dist(i, l) + dist(j, k),
            )
        )
        defect = sums[2] - sums[1]
        max_defect = max(max_defect, defect)
        if defect > FOUR_POINT_TOL:
            violations.append((i, j, k, l, defect))
    return FourPointReport(len(quads), max_defect, tuple(violations))


def tree_translation_length(system: LeafSystem, gamma) -> float:
    """Translation length of gamma on the dual tree = intersection number."""
    return intersection_number(system, gamma)


@dataclass(frozen=True)
class AxisSearchResult:
    word: tuple[int, ...]
    tree_length: float
    moved: float  # d_T(x, gamma x)
    concat_defect: float  # |d(x,y) + d(y, gx) - d(x, gx)|


def find_axis_element(
    system: LeafSystem,
    x: np.ndarray,
    y: np.ndarray,
    search_radius: int = 2,
    max_power: int = 6,
    extra_words: tuple[str, ...] = ("a1", "b1", "a2", "b2", "a1b1", "b1a2", "a2b2", "b1b2"),
    tol: float = AXIS_SEARCH_TOL,
) -> AxisSearchResult:
    """Find gamma whose tree axis contains the segment [x̄, ȳ].

    Certification is pure tree arithmetic: x̄ lies on the axis iff
    d(x̄, γx̄) equals l_T(γ) > 0, and then ȳ ∈ [x̄, γx̄] ⊂ axis iff the
    concatenation d(x̄,ȳ) + d(ȳ, γx̄) = d(x̄, γx̄) is tight.  Candidates
    are ball conjugates g w^k g^-1 of a word list that includes the
    lamination components, the generators, and short products (component
    words alone are elliptic on the tree, so they cannot suffice).

    Raises a search error when no candidate certifies at the caps.
    """
    group = system.group
    d_xy = system.weight_between(x, y)
    ball = group.ball(search_radius)
    words = [w for w, _ in system.multicurve.components]
    words += [parse_word(s) for s in extra_words]
    seen = set()
    base_words = [w for w in words if not (w in seen or seen.add(w))]
    best = None
    for w in base_words:
        m1 = group.element(w)
        lt1 = tree_translation_length(system, w)
        if lt1 <= 0:
            continue
        for k in range(1, max_power + 1):
            lt = k * lt1
            if lt + tol < d_xy:
                continue  # axis segment too short to contain [x,y]
            mk = np.linalg.matrix_power(m1, k)
            for g, gw in zip(ball.matrices, ball.words):
                gamma = g @ mk @ np.linalg.inv(g)
                gx = gamma @ x
                moved = system.weight_between(x, gx)
                if abs(moved - lt) > tol or moved <= tol:
                    continue
                defect = abs(d_xy + system.weight_between(y, gx) - moved)
                if defect <= tol:
                    word = gw + w * k + word_inverse(gw)
                    return AxisSearchResult(word, lt, moved, defect)
    raise SearchInconclusiveError(
        "search not conclusive: no axis found containing the segment "
        f"(d_T = {d_xy}, radius {search_radius}, powers <= {max_power})"
    )

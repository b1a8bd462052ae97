"""Weighted multicurve laminations and their lifted leaf systems.

A lamination is a finite list of (conjugacy word, weight > 0) pairs whose
axes project to disjoint simple closed geodesics.  Its lift to the
hyperbolic plane is the family of all group translates of the component
axes; the package enumerates the translates reachable from a group ball,
deduplicates them, and validates disjointness by endpoint linking on the
boundary circle.  Every derived quantity (tree distances, intersection
numbers, the singularity tree) is a weighted sum over separating leaves
of this finite system, so the system carries explicit truncation
metadata: the horizon radius within which the enumeration is provably
complete.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .dedup import dedup_indices, mask_not_near
from .errors import LaminationError, ResourceLimitError
from .minkowski import (
    MINK_DIAG,
    SIDE_TIE_TOL,
    geodesic_foot,
    h2_dist,
    h2_geodesic_point,
    h2_tangent,
    mink_inner,
)
from .surface_group import Axis, GroupBall, SurfaceGroup, parse_word, word_name

PERTURB_EPS = 1e-7
# Fixed, arbitrary direction angle for all deterministic perturbations.
PERTURB_ANGLE = 0.2391
# Leaves are deduplicated in endpoint-angle space: the angles are O(1)
# with ~1e-10 accuracy however large the dual vectors get, and distinct
# leaves within the usable horizon differ by >> 1e-9 in some endpoint.
LEAF_DEDUP_TOL = 1e-9
TANGENCY_TOL = 1e-9


def perturb(p: np.ndarray, eps: float = PERTURB_EPS) -> np.ndarray:
    """Push p off any leaf: 1e-7 along the fixed direction, projected to H^2."""
    e = np.array([0.0, np.cos(PERTURB_ANGLE), np.sin(PERTURB_ANGLE)])
    t = e + mink_inner(p, e) * p
    t = t / np.sqrt(1.0 + mink_inner(p, e) ** 2)
    return h2_geodesic_point(p, t, eps)


@dataclass(frozen=True)
class Leaf:
    """One lifted leaf: an oriented geodesic with a weight and provenance."""

    dual: np.ndarray  # unit spacelike, oriented away from the base region
    weight: float
    component: int
    coset_word: tuple[int, ...]

    def __repr__(self):
        w = word_name(self.coset_word)
        return f"Leaf(comp={self.component}, coset={w}, weight={self.weight})"


@dataclass(frozen=True)
class MeasuredMulticurve:
    """Validated weighted multicurve with realized axes."""

    components: tuple[tuple[tuple[int, ...], float], ...]
    axes: tuple[Axis, ...]

    @property
    def total_weight(self) -> float:
        return sum(w for _, w in self.components)

    def describe(self) -> str:
        if not self.components:
            return "empty"
        return ", ".join(
            f"({word_name(w)}, {wt})" for w, wt in self.components
        )


def _crossing_matrix(starts: np.ndarray, ends: np.ndarray) -> np.ndarray:
    """Pairwise endpoint-linking test for geodesics given endpoint angles.

    Geodesics i and j cross iff exactly one endpoint of j lies in the
    open arc (start_i, end_i).  Endpoint coincidences within the
    tangency tolerance are treated as non-crossing.
    """

    def _in_arc(t):
        return (starts[:, None] < t[None, :]) & (t[None, :] < ends[:, None])

    def _near(t, u):
        d = np.abs(t[:, None] - u[None, :])
        return np.minimum(d, 2 * np.pi - d) < TANGENCY_TOL

    cross = _in_arc(starts) ^ _in_arc(ends)
    shared = _near(starts, starts) | _near(starts, ends) | _near(ends, starts) | _near(ends, ends)
    return cross & ~shared.T & ~shared


def realize(
    group: SurfaceGroup,
    components: list[tuple[tuple[int, ...] | str, float]],
    validation_ball: GroupBall,
) -> MeasuredMulticurve:
    """Validate and realize a weighted multicurve as geodesic axes.

    Simplicity and mutual disjointness are checked over all ball
    translates of the component axes: any linked endpoint pair rejects
    the input.  Distinct components sharing an axis are also rejected.

    Raises
    ------
    LaminationError
        "component not simple or components crossing", naming the
        offending pair of translates.
    NotHyperbolicError
        if a component word has no axis.
    """
    comps: list[tuple[tuple[int, ...], float]] = []
    axes: list[Axis] = []
    for word, weight in components:
        if isinstance(word, str):
            word = parse_word(word)
        if weight <= 0:
            raise LaminationError(f"weight must be positive: {word_name(word)}")
        axes.append(group.axis_of(word))
        comps.append((word, float(weight)))
    if comps:
        system = _enumerate_leaves(group, tuple(comps), tuple(axes), validation_ball)
        starts, ends = system.endpoint_angles
        crossing = _crossing_matrix(starts, ends)
        bad = np.argwhere(crossing)
        if len(bad):
            i, j = bad[0]
            raise LaminationError(
                "component not simple or components crossing: "
                f"{system.leaf(i)!r} vs {system.leaf(j)!r}"
            )
        # dedup ran per component, so any surviving near-duplicate pair
        # witnesses two components with a common axis
        angles = np.stack(system.endpoint_angles, axis=1)
        if len(dedup_indices(angles, LEAF_DEDUP_TOL)) < len(system):
            raise LaminationError(
                "distinct components share an axis: " + system.multicurve.describe()
            )
    return MeasuredMulticurve(tuple(comps), tuple(axes))


class LeafSystem:
    """The enumerated lift of a multicurve: oriented leaves + fast queries.

    Leaves are stored as arrays sorted in a canonical deterministic order
    (lexicographic in the rounded dual vectors).  Orientation convention:
    every dual is flipped so the perturbed basepoint lies on its negative
    side; oriented duals therefore all have positive time component and
    "point away" from the base region.
    """

    def __init__(
        self,
        group: SurfaceGroup,
        multicurve: MeasuredMulticurve,
        ball: GroupBall,
        duals: np.ndarray,
        weights: np.ndarray,
        comp: np.ndarray,
        words: tuple[tuple[int, ...], ...],
    ):
        self.group = group
        self.multicurve = multicurve
        self.ball = ball
        self.duals = duals
        self.weights = weights
        self.comp = comp
        self.words = words
        self.basepoint = perturb(group.basepoint)
        self._vm = duals * MINK_DIAG  # row i gives <p, dual_i> as _vm[i] @ p
        self.base_sides = self.sides(self.basepoint)

    def __len__(self) -> int:
        return len(self.duals)

    def leaf(self, i: int) -> Leaf:
        return Leaf(self.duals[i], float(self.weights[i]), int(self.comp[i]), self.words[i])

    def sides(self, p: np.ndarray) -> np.ndarray:
        """Side signs of p for every leaf, with the deterministic tie rule."""
        return np.where(self._vm @ p >= -SIDE_TIE_TOL, 1, -1).astype(np.int8)

    def separating_mask(self, p: np.ndarray, q: np.ndarray) -> np.ndarray:
        return self.sides(p) != self.sides(q)

    def weight_between(self, p: np.ndarray, q: np.ndarray) -> float:
        return float(self.weights[self.separating_mask(p, q)].sum())

    def weight_between_sides(self, sa: np.ndarray, sb: np.ndarray) -> float:
        return float(self.weights[sa != sb].sum())

    def leaf_distances(self, u: np.ndarray) -> np.ndarray:
        """Hyperbolic distances from a hyperboloid point to every leaf."""
        return np.arcsinh(np.abs(self._vm @ u))

    @cached_property
    def endpoint_angles(self) -> tuple[np.ndarray, np.ndarray]:
        angles = geodesic_angles(self.duals)
        return angles[:, 0], angles[:, 1]

    @cached_property
    def foot_points(self) -> np.ndarray:
        """Foot of the perturbed basepoint on each leaf."""
        return np.array([geodesic_foot(self.basepoint, v) for v in self.duals])

    @cached_property
    def near_far_witnesses(self) -> tuple[np.ndarray, np.ndarray]:
        """Points 1e-7 off each leaf's foot point, toward and away from o.

        The minimum gap between distinct leaves is of order 1 (reported by
        min_gap), so these witnesses certify the two regions adjacent to
        the leaf at its foot point.
        """
        near, far = [], []
        for z, v in zip(self.foot_points, self.duals):
            t = h2_tangent(z, self.basepoint)
            near.append(h2_geodesic_point(z, t, PERTURB_EPS))
            far.append(h2_geodesic_point(z, t, -PERTURB_EPS))
        return np.array(near).reshape(-1, 3), np.array(far).reshape(-1, 3)

    @cached_property
    def witness_sides(self) -> tuple[np.ndarray, np.ndarray]:
        """Side matrices of the near/far witnesses w.r.t. every leaf.

        Column j holds the side signs of the witness pair of leaf j.  The
        own-leaf entry [j, j] is forced from the construction (near lies
        on the basepoint side, far on the other): for distant leaves the
        foot point carries cancellation error larger than the 1e-7 push,
        while every cross-leaf margin is at least the leaf gap, so only
        the diagonal needs protection.
        """
        near, far = self.near_far_witnesses
        sn = np.where(self._vm @ near.T >= -SIDE_TIE_TOL, 1, -1).astype(np.int8)
        sf = np.where(self._vm @ far.T >= -SIDE_TIE_TOL, 1, -1).astype(np.int8)
        diag = np.arange(len(self))
        sn[diag, diag] = self.base_sides
        sf[diag, diag] = -self.base_sides
        return sn, sf

    @cached_property
    def min_gap(self) -> float:
        """Smallest hyperbolic distance between distinct leaves (0 if any cross)."""
        if len(self) < 2:
            return np.inf
        best = np.inf
        chunk = 512
        for i0 in range(0, len(self), chunk):
            block = self._vm[i0 : i0 + chunk] @ self.duals.T
            for k in range(len(block)):  # mask self-pairs
                block[k, i0 + k] = np.inf
            c = np.abs(block)
            best = min(best, float(np.arccosh(np.maximum(1.0, c)).min()))
        return best

    @cached_property
    def horizon(self) -> float | None:
        """Completeness radius: queries staying within it see every leaf.

        Computed as the smallest distance from the basepoint to a leaf
        that first appears at ball radius R+1; any leaf missing from this
        system is at least that far away, so separating-leaf queries for
        point pairs within the horizon of o are certified complete.
        None when the R+1 enumeration exceeds the cap.
        """
        try:
            bigger = self.group.ball(self.ball.radius + 1)
        except ResourceLimitError:
            return None
        big = _enumerate_leaves(self.group, self.multicurve.components,
                                self.multicurve.axes, bigger)
        new_mask = mask_not_near(
            np.stack(big.endpoint_angles, axis=1),
            np.stack(self.endpoint_angles, axis=1),
            LEAF_DEDUP_TOL,
        )
        if not new_mask.any():
            return np.inf  # enumeration saturated: no new leaves appear
        return float(big.leaf_distances(self.basepoint)[new_mask].min())

    def certifies(self, p: np.ndarray, q: np.ndarray) -> bool | None:
        """Whether the separating-leaf set for (p, q) is provably complete.

        A geodesic separating p from q meets the segment [p, q], hence
        passes within max(d(o,p), d(o,q)) of the basepoint.  None when
        the horizon is unknown.
        """
        h = self.horizon
        if h is None:
            return None
        reach = max(h2_dist(self.basepoint, p), h2_dist(self.basepoint, q))
        return bool(reach < h)


def geodesic_angles(duals: np.ndarray) -> np.ndarray:
    """Vectorized ideal-endpoint angles, each row sorted increasing."""
    if len(duals) == 0:
        return np.empty((0, 2))
    v0, v1, v2 = duals.T
    r = np.hypot(v1, v2)
    base = np.arctan2(v2, v1)
    off = np.arccos(np.clip(v0 / r, -1.0, 1.0))
    t1 = (base + off) % (2 * np.pi)
    t2 = (base - off) % (2 * np.pi)
    return np.stack([np.minimum(t1, t2), np.maximum(t1, t2)], axis=1)


def _enumerate_leaves(
    group: SurfaceGroup,
    components: tuple[tuple[tuple[int, ...], float], ...],
    axes: tuple[Axis, ...],
    ball: GroupBall,
) -> LeafSystem:
    o = perturb(group.basepoint)
    all_duals, all_w, all_comp, all_words, all_angles = [], [], [], [], []
    for ci, ((word, weight), axis) in enumerate(zip(components, axes)):
        duals = ball.matrices @ axis.geodesic.dual  # (n, 3)
        # restore exact unit norm (long matrix products drift by ~|A|^2 eps)
        norms = np.sqrt(-(duals[:, 0] ** 2) + duals[:, 1] ** 2 + duals[:, 2] ** 2)
        duals = duals / norms[:, None]
        inner = -(duals[:, 0] * o[0]) + duals[:, 1] * o[1] + duals[:, 2] * o[2]
        duals = np.where(inner[:, None] >= 0, -duals, duals)  # orient away from o
        angles = geodesic_angles(duals)
        keep = dedup_indices(angles, LEAF_DEDUP_TOL)
        all_duals.append(duals[keep])
        all_angles.append(angles[keep])
        all_w.append(np.full(len(keep), weight))
        all_comp.append(np.full(len(keep), ci, dtype=int))
        all_words.extend(ball.words[i] for i in keep)
    duals = np.concatenate(all_duals) if all_duals else np.empty((0, 3))
    angles = np.concatenate(all_angles) if all_angles else np.empty((0, 2))
    weights = np.concatenate(all_w) if all_w else np.empty(0)
    comp = np.concatenate(all_comp) if all_comp else np.empty(0, dtype=int)
    order = np.lexsort(np.round(angles, 9).T)
    words = tuple(all_words[i] for i in order)
    mc = MeasuredMulticurve(components, axes)
    system = LeafSystem(
        group, mc, ball, duals[order], weights[order], comp[order], words
    )
    system.__dict__["endpoint_angles"] = (angles[order, 0], angles[order, 1])
    return system


def build_leaf_system(
    group: SurfaceGroup, multicurve: MeasuredMulticurve, ball: GroupBall
) -> LeafSystem:
    """Enumerate the lifted leaves of a validated multicurve over a ball."""
    return _enumerate_leaves(group, multicurve.components, multicurve.axes, ball)


def leaves_crossing(
    system: LeafSystem, p: np.ndarray, q: np.ndarray
) -> list[tuple[Leaf, int]]:
    """All enumerated leaves separating p from q, with crossing orientation.

    The sign is the side of q: +1 when the crossing goes from the leaf's
    negative (basepoint) side to its positive side.
    """
    mask = system.separating_mask(p, q)
    q_sides = system.sides(q)
    return [(system.leaf(i), int(q_sides[i])) for i in np.flatnonzero(mask)]


def intersection_number(
    system: LeafSystem, gamma: tuple[int, ...] | str
) -> float:
    """Total transverse weight i(gamma, lamination) from the leaf system.

    Counts weights of leaves separating x0 from gamma(x0), where x0 is
    the foot of the basepoint on the axis of gamma, perturbed off any
    leaf by the fixed displacement rule.
    """
    axis = system.group.axis_of(gamma)  # raises "not hyperbolic"
    x0 = perturb(geodesic_foot(system.group.basepoint, axis.geodesic.dual))
    return system.weight_between(x0, axis.matrix @ x0)

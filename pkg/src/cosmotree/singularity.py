"""The flat spacetime of a bent surface group: singularity tree and cosmological time.

Given the leaf system of a multicurve, the holonomy bends the Fuchsian
group into the affine Lorentz group: the translation part of an element
is the weighted sum of oriented leaf duals over the leaves separating
the basepoint from its image.  The initial singularity Sigma embeds the
dual tree into Minkowski space: region vertices map to the same weighted
sums, and each leaf contributes a spacelike edge of Minkowski length
equal to its weight.  The domain is Omega = I^+(Sigma) and the
cosmological time of a point is its maximal Lorentz distance to Sigma.

The retraction is certified, not guessed: a maximizing point in the
interior of an edge is automatically correct (the unit normal then lies
on the edge's dual leaf), and a maximizing vertex r is accepted exactly
when the vertex of the region containing the unit normal (p - r)/tau
reproduces r.  By the structure of regular domains this decomposition
p = r + tau*n with n in the dual cell of r is unique, so a certificate
identifies the true cosmological time.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import DomainError, FlowError, SearchInconclusiveError
from .lamination import LeafSystem, MeasuredMulticurve, build_leaf_system, realize
from .minkowski import (
    BASEPOINT,
    Isometry,
    lorentz_dist_point,
    mink_norm2,
)
from .surface_group import GroupBall, SurfaceGroup, free_reduce, parse_word

VERTEX_CERT_TOL = 1e-8
DEGENERACY_TOL = 1e-10
EDGE_INTERIOR_MARGIN = 1e-12


@dataclass(frozen=True)
class CosmoResult:
    """Cosmological time with its certified retraction."""

    tau: float
    retraction: np.ndarray
    cell: str  # "edge" | "vertex" | "apex" (empty lamination)
    leaf_index: int | None
    edge_param: float | None


@dataclass(frozen=True)
class GradientLine:
    """Cosmological gradient line {retraction + t * direction, t > 0}."""

    retraction: np.ndarray
    direction: np.ndarray  # future unit timelike

    def at_time(self, t: float) -> np.ndarray:
        return self.retraction + t * self.direction


class Spacetime:
    """Bundles the group, the lamination's leaf system, and Sigma queries."""

    def __init__(self, system: LeafSystem):
        self.system = system
        self.group = system.group

    @staticmethod
    def build(
        group: SurfaceGroup,
        components: list[tuple[str, float]],
        leaf_ball: GroupBall,
        validation_ball: GroupBall | None = None,
    ) -> "Spacetime":
        mc = realize(group, components, validation_ball or leaf_ball)
        return Spacetime(build_leaf_system(group, mc, leaf_ball))

    @property
    def multicurve(self) -> MeasuredMulticurve:
        return self.system.multicurve

    # ---------------- holonomy ----------------

    def translation_part(self, linear: np.ndarray) -> np.ndarray:
        """t_gamma = sum of weight * dual over leaves separating o from gamma o.

        Complete (hence exact) only while gamma o stays within the
        horizon; `holonomy` telescopes over letters so that long words
        never rely on completeness far from the basepoint.
        """
        sys = self.system
        if len(sys) == 0:
            return np.zeros(3)
        o = sys.basepoint
        mask = sys.separating_mask(o, linear @ o)
        return (sys.weights[mask, None] * sys.duals[mask]).sum(axis=0)

    @cached_property
    def _letter_translations(self) -> np.ndarray:
        # single-generator hops are short, so each direct sum is certified
        return np.array([self.translation_part(g) for g in self.group.gens])

    def holonomy(self, word: tuple[int, ...] | str) -> Isometry:
        """Affine holonomy rho(word), translation accumulated letter by letter.

        t_{gh} = t_g + A_g t_h applied along the word keeps every hop
        within one generator displacement of the basepoint, which the
        horizon certifies; a direct separating sum for the whole word
        would silently truncate once the orbit point leaves the horizon.
        """
        if isinstance(word, str):
            word = parse_word(word)
        word = free_reduce(word)
        linear = np.eye(3)
        translation = np.zeros(3)
        for k in word:
            translation = translation + linear @ self._letter_translations[k]
            linear = linear @ self.group.gens[k]
        return Isometry(linear, translation)

    # ---------------- the singularity tree ----------------

    def vertex_of_point(self, p: np.ndarray) -> np.ndarray:
        """Sigma vertex of the region containing the hyperbolic point p."""
        sys = self.system
        if len(sys) == 0:
            return np.zeros(3)
        mask = sys.separating_mask(sys.basepoint, p)
        return (sys.weights[mask, None] * sys.duals[mask]).sum(axis=0)

    def vertex(self, region) -> np.ndarray:
        return self.vertex_of_point(region.representative)

    @cached_property
    def edge_starts(self) -> np.ndarray:
        """Near endpoints x(R_near) of all edges, computed in one batch."""
        sys = self.system
        sn, _ = sys.witness_sides
        sep = sn != sys.base_sides[:, None]  # (n_leaves, n_edges)
        return sep.T.astype(float) @ (sys.weights[:, None] * sys.duals)

    @cached_property
    def edge_vectors(self) -> np.ndarray:
        return self.system.weights[:, None] * self.system.duals

    def edge(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        a = self.edge_starts[i]
        return a, a + self.edge_vectors[i]

    def edges_near(self, p: np.ndarray, radius: float) -> np.ndarray:
        """Indices of leaves passing within `radius` of p's H^2 projection."""
        u = self._project_direction(p)
        return np.flatnonzero(self.system.leaf_distances(u) <= radius)

    def _project_direction(self, p: np.ndarray) -> np.ndarray:
        s = mink_norm2(p)
        if s < 0 and p[0] > 0:
            return p / np.sqrt(-s)
        return BASEPOINT

    # ---------------- cosmological time ----------------

    def cosmo_time(self, p: np.ndarray) -> CosmoResult:
        """Cosmological time and certified retraction of a point of Omega.

        Raises
        ------
        DomainError
            "point not in Omega" when no cell of Sigma is in the past.
        SearchInconclusiveError
            "search not conclusive" when the maximizer cannot be
            certified within the enumerated part of Sigma.
        """
        p = np.asarray(p, dtype=float)
        sys = self.system
        if len(sys) == 0:
            try:
                tau = lorentz_dist_point(p, np.zeros(3))
            except Exception:
                raise DomainError("point not in Omega") from None
            return CosmoResult(tau, np.zeros(3), "apex", None, None)

        a = self.edge_starts
        d = self.edge_vectors
        dd = np.einsum("ij,ij->i", d, d * np.array([-1.0, 1.0, 1.0]))
        pa = p[None, :] - a
        s = np.einsum("ij,ij->i", pa, d * np.array([-1.0, 1.0, 1.0])) / dd
        s = np.clip(s, 0.0, 1.0)
        q = a + s[:, None] * d
        diff = p[None, :] - q
        nrm = -(diff[:, 0] ** 2) + diff[:, 1] ** 2 + diff[:, 2] ** 2
        visible = (nrm < 0) & (diff[:, 0] > 0)
        if not visible.any():
            raise DomainError("point not in Omega")
        vals = np.where(visible, np.sqrt(np.maximum(-nrm, 0.0)), -np.inf)
        i = int(np.argmax(vals))
        tau = float(vals[i])
        r = q[i]

        ties = np.flatnonzero(vals >= tau - DEGENERACY_TOL)
        if len(ties) > 1 and np.abs(q[ties] - r).max() > VERTEX_CERT_TOL:
            warnings.warn(
                f"degenerate retraction: {len(ties)} cells tie within {DEGENERACY_TOL}",
                stacklevel=2,
            )

        si = float(s[i])
        if EDGE_INTERIOR_MARGIN < si < 1.0 - EDGE_INTERIOR_MARGIN:
            return CosmoResult(tau, r, "edge", i, si)
        n = (p - r) / tau
        if np.abs(self.vertex_of_point(n) - r).max() <= VERTEX_CERT_TOL:
            return CosmoResult(tau, r, "vertex", i, si)
        raise SearchInconclusiveError(
            "search not conclusive: retraction vertex not certified "
            "(point likely beyond the enumerated part of Sigma)"
        )

    def cosmo_time_batch(
        self, points: np.ndarray, chunk: int = 4096
    ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Vectorized cosmo_time over rows of `points`.

        Returns (tau, retraction, ok). Rows that are outside Omega or fail
        the retraction certificate get ok=False instead of raising.
        """
        points = np.asarray(points, dtype=float)
        m = len(points)
        tau = np.full(m, np.nan)
        retr = np.full((m, 3), np.nan)
        ok = np.zeros(m, dtype=bool)
        sys = self.system
        if len(sys) == 0:
            diff = points
            n2 = -(diff[:, 0] ** 2) + diff[:, 1] ** 2 + diff[:, 2] ** 2
            good = (n2 < 0) & (diff[:, 0] > 0)
            tau[good] = np.sqrt(-n2[good])
            retr[good] = 0.0
            return tau, retr, good
        a = self.edge_starts
        d = self.edge_vectors
        md = np.array([-1.0, 1.0, 1.0])
        dd = np.einsum("ij,ij->i", d, d * md)
        weights = sys.weights
        duals = sys.duals
        base_sides = sys.base_sides
        vm = duals * md
        for lo in range(0, m, chunk):
            P = points[lo : lo + chunk]
            pa = P[:, None, :] - a[None, :, :]
            s = np.einsum("nij,ij->ni", pa, d * md) / dd[None, :]
            np.clip(s, 0.0, 1.0, out=s)
            q = a[None, :, :] + s[..., None] * d[None, :, :]
            diff = P[:, None, :] - q
            n2 = np.einsum("nij,nij->ni", diff, diff * md)
            visible = (n2 < 0) & (diff[..., 0] > 0)
            vals = np.where(visible, np.sqrt(np.maximum(-n2, 0.0)), -np.inf)
            best = np.argmax(vals, axis=1)
            rows = np.arange(len(P))
            t = vals[rows, best]
            good = np.isfinite(t) & (t > 0)
            r = q[rows, best]
            sb = s[rows, best]
            interior = good & (sb > EDGE_INTERIOR_MARGIN) & (sb < 1.0 - EDGE_INTERIOR_MARGIN)
            # vertex certificate for the clipped rows
            need = good & ~interior
            if need.any():
                n = (P[need] - r[need]) / t[need, None]
                sides = np.where(n @ vm.T >= -1e-12, 1, -1).astype(np.int8)
                sep = sides != base_sides[None, :]
                vtx = (sep * weights[None, :]).astype(float) @ duals
                certified = np.abs(vtx - r[need]).max(axis=1) <= VERTEX_CERT_TOL
                upd = np.flatnonzero(need)
                good[upd[~certified]] = False
            tau[lo : lo + chunk][good] = t[good]
            retr[lo : lo + chunk][good] = r[good]
            ok[lo : lo + chunk] = good
        return tau, retr, ok

    def gradient_line(self, p: np.ndarray) -> GradientLine:
        res = self.cosmo_time(p)
        return GradientLine(res.retraction, (p - res.retraction) / res.tau)

    def cosmo_flow(self, p: np.ndarray, t: float) -> np.ndarray:
        res = self.cosmo_time(p)
        if res.tau + t <= 0:
            raise FlowError(f"flow leaves the domain: tau {res.tau} + {t} <= 0")
        u = (p - res.retraction) / res.tau
        return res.retraction + (res.tau + t) * u

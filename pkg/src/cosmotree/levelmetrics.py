"""Distances on level sets of time functions.

A level set {T = a} inherits a Riemannian metric from the ambient
Lorentz form.  "Points" of the limit object are whole gradient or flow
lines, identified with their intersection with each level; this module
measures the induced distances between such line representatives, with
two backends:

* a structured backend for the cosmological time, which uses the exact
  decomposition of {tau = a} into hyperbolic sectors over Sigma-vertices
  (metric a^2 x hyperbolic) and flat bands over Sigma-edges (metric
  ds^2 + a^2 dtheta^2, full crossing length = edge weight), and
* a generic graph backend for any time function: sample the level set,
  join k-nearest neighbors by chords, run a shortest-path search, then
  straighten and subdivide the winning polyline.

Every estimate carries an upper bound (length of an explicit path) and
the best certified lower bound (the dual-tree distance on tau-levels,
zero otherwise).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import solve_ivp
from scipy.optimize import brentq, minimize_scalar
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import dijkstra
from scipy.spatial import cKDTree

from .dual_tree import TreePoint, region_of, separating_leaves_ordered, tree_point_distance
from .errors import DomainError, FlowError, SamplingError, SearchInconclusiveError
from .minkowski import (
    MINK_DIAG,
    Isometry,
    geodesic_foot,
    geodesic_tangent,
    h2_dist,
    h2_geodesic_point,
    h2_normalize,
    h2_tangent,
    mink_cross,
    mink_inner,
    mink_norm2,
)
from .singularity import Spacetime
from .times import TimeFunction, cosmological_time, eval_many, grad_many, xi_flow

TAU = "cosmological"

# descent/assembly tolerances for the structured backend
SWEEP_STOP_REL = 1e-12
MAX_SWEEPS = 60
THETA_WINDOW = 2.0

# generic backend defaults (calibrated at desk scale, all overridable)
DEFAULT_CLOUD = 20000
DEFAULT_KNN = 12
DEFAULT_ROUNDS = 3
COVERAGE_MARGIN = 1.5
AXIS_SEED_OFFSET = 1e-4


# ---------------- line references ----------------


@dataclass(frozen=True)
class LinePointRef:
    """A point of a line space: a cosmological gradient line or a
    xi-flow line of some other time function.

    The representative on the level {T = a} is recovered by the
    identification rule "intersect the line with the level".
    """

    kind: str  # "gradient" | "flow"
    base: np.ndarray
    retraction: np.ndarray | None = None
    direction: np.ndarray | None = None
    cell: str | None = None
    leaf_index: int | None = None
    edge_param: float | None = None
    time: TimeFunction | None = None  # flow lines only


def gradient_ref(spacetime: Spacetime, p: np.ndarray) -> LinePointRef:
    """The cosmological gradient line through p (an element of X_tau)."""
    p = np.asarray(p, dtype=float)
    res = spacetime.cosmo_time(p)
    direction = (p - res.retraction) / res.tau
    return LinePointRef(
        "gradient", p, retraction=res.retraction, direction=direction,
        cell=res.cell, leaf_index=res.leaf_index, edge_param=res.edge_param,
    )


def flow_ref(T: TimeFunction, p: np.ndarray) -> LinePointRef:
    """The xi-flow line of T through p (an element of X_T)."""
    return LinePointRef("flow", np.asarray(p, dtype=float), time=T)


def transform_ref(spacetime: Spacetime, iso: Isometry, ref: LinePointRef) -> LinePointRef:
    """Image of a line under an isometry (gamma . line).

    Gradient lines map to gradient lines exactly; flow lines of a
    Gamma-invariant time map to the flow line through the moved base.
    """
    if ref.kind == "gradient":
        return gradient_ref(spacetime, iso.apply(ref.base))
    return flow_ref(ref.time, iso.apply(ref.base))


def direction_of(spacetime: Spacetime, ref: LinePointRef) -> np.ndarray:
    """Unit timelike direction (H^2 point) used for coverage and ordering."""
    if ref.kind == "gradient":
        return ref.direction
    res = spacetime.cosmo_time(ref.base)
    return (ref.base - res.retraction) / res.tau


def rep_at(spacetime: Spacetime, ref: LinePointRef, T: TimeFunction, a: float) -> np.ndarray:
    """Intersection of the line with {T = a} (monotone 1D root-find).

    Along a gradient line r + t u the map t -> T(r + t u) is strictly
    increasing (dT of a future timelike vector is positive), and along a
    xi-flow line of S the value of T is likewise monotone; the root is
    bracketed by doubling and polished by brentq.
    """
    if ref.kind == "gradient":
        if T.name == TAU:
            return ref.retraction + a * ref.direction
        r, u = ref.retraction, ref.direction

        def f(t):
            return T.value(r + t * u) - a

        lo = min(1e-9, 0.1 * a)
        hi = a  # T >= tau gives f(a) >= 0 for the concave times
        flo, fhi = f(lo), f(hi)
        grow = 0
        while fhi < 0 and grow < 40:
            hi *= 2.0
            fhi = f(hi)
            grow += 1
        if flo > 0 or fhi < 0:
            raise DomainError(
                f"gradient line does not meet the level {T.name}={a} in the bracket"
            )
        t = brentq(f, lo, hi, xtol=1e-14, rtol=8.9e-16)
        return r + t * u
    # flow line: integrate the S-flow once with dense output, root-find
    # T(sol(s)) = a on the interpolant, then polish onto the level
    S = ref.time
    base_value = S.value(ref.base)
    if T.name == S.name:
        # transverse drift ~rtol is far below the estimate tolerances;
        # the landing value itself is polished inside the flow
        return xi_flow(S, ref.base, a - base_value, rtol=1e-7)

    def flow_dense(s_end):
        def rhs(_, y):
            gr = S.gradient(y)
            return gr / max(-mink_norm2(gr), 1e-12)

        sol = solve_ivp(
            rhs, (0.0, s_end), ref.base, rtol=1e-8, atol=1e-12, dense_output=True
        )
        if not sol.success:
            raise FlowError(f"flow integration failed: {sol.message}")
        return sol

    g0 = T.value(ref.base) - a
    if abs(g0) <= 1e-13 * max(1.0, a):
        return np.asarray(ref.base, dtype=float)
    if g0 > 0:
        # root below the base; keep the S-value floor well above the
        # singularity so the quadratic certificates stay conditioned
        sol = None
        for frac in (1e-3, 1e-2, 1e-1):
            s_lo = frac * min(a, base_value) - base_value
            try:
                sol = flow_dense(s_lo)
                break
            except (FlowError, DomainError):
                continue
        if sol is None:
            raise DomainError(f"flow line leaves the domain above the level {T.name}={a}")

        def fn(s):
            return T.value(sol.sol(s)) - a

        if fn(s_lo) > 0:
            raise DomainError(f"flow line does not meet the level {T.name}={a}")
        s = brentq(fn, s_lo, 0.0, xtol=1e-12, rtol=8.9e-16)
    else:
        s_hi = max(a - base_value, 0.0) + 0.5 * max(1.0, a)
        sol = flow_dense(s_hi)
        grow = 0
        while T.value(sol.sol(s_hi)) - a < 0 and grow < 8:
            s_hi *= 2.0
            sol = flow_dense(s_hi)
            grow += 1

        def fn(s):
            return T.value(sol.sol(s)) - a

        if fn(s_hi) < 0:
            raise DomainError(f"flow line does not meet the level {T.name}={a}")
        s = brentq(fn, 0.0, s_hi, xtol=1e-12, rtol=8.9e-16)
    q = np.asarray(sol.sol(s), dtype=float)
    for _ in range(12):
        err = a - T.value(q)
        if abs(err) <= 1e-11 * max(1.0, a):
            break
        gr = T.gradient(q)
        q = q + err * gr / max(-mink_norm2(gr), 1e-12)
    return q


def tree_point_of(spacetime: Spacetime, ref: LinePointRef) -> TreePoint:
    """Dual-tree point of the line's retraction (certified lower-bound anchor)."""
    sys = spacetime.system
    if ref.kind == "gradient" and ref.cell == "edge":
        return TreePoint(
            leaf_index=ref.leaf_index,
            offset=float(ref.edge_param * sys.weights[ref.leaf_index]),
        )
    u = direction_of(spacetime, ref)
    return TreePoint(region=region_of(sys, u))


# ---------------- estimates ----------------


@dataclass(frozen=True)
class DistanceEstimate:
    """Two-sided estimate: upper = explicit path length, lower = certificate."""

    upper: float
    lower: float
    method: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.lower <= self.upper + 1e-9:
            raise AssertionError(
                f"lower bound {self.lower} exceeds upper estimate {self.upper}"
            )

    @property
    def value(self) -> float:
        return self.upper


@dataclass
class MetricOpts:
    """Estimator configuration; one instance carries cloud caches across calls."""

    backend: str = "auto"  # "auto" | "structured" | "graph" | "both"
    cloud: int = DEFAULT_CLOUD
    knn: int = DEFAULT_KNN
    rounds: int = DEFAULT_ROUNDS
    seed: int = 0
    graph_backends: dict = field(default_factory=dict)

    def graph_for(self, spacetime: Spacetime, T: TimeFunction) -> "GraphBackend":
        key = T.name
        if key not in self.graph_backends:
            self.graph_backends[key] = GraphBackend(
                spacetime, T, cloud=self.cloud, k=self.knn,
                rounds=self.rounds, seed=self.seed,
            )
        return self.graph_backends[key]


# ---------------- structured backend (tau only) ----------------


class _ChainPoint:
    """A movable point of a candidate path: fixed in H^2, or sliding
    along the geodesic of one leaf at parameter theta."""

    __slots__ = ("leaf", "theta", "fixed", "u")

    def __init__(self, leaf=None, theta=0.0, fixed=False, u=None):
        self.leaf = leaf
        self.theta = theta
        self.fixed = fixed
        self.u = u


class StructuredBackend:
    """Exact-decomposition distance on {tau = a}.

    A candidate path is a chain of points alternating through hyperbolic
    sectors (cost a * dH) and band crossings (cost sqrt(ds^2 + a^2
    dtheta^2) with ds the crossed width); the crossing sequence comes
    from the dual-tree geodesic, the crossing points from coordinate
    descent.  Initial crossings sit on the H^2 geodesic [u_x, u_y], so
    the starting chain is always realizable; descent only improves it.
    """

    def __init__(self, spacetime: Spacetime):
        self.spacetime = spacetime
        sys = spacetime.system
        self.feet = sys.foot_points if len(sys) else np.zeros((0, 3))
        self.tangents = (
            np.array([geodesic_tangent(v, f) for v, f in zip(sys.duals, self.feet)])
            if len(sys)
            else np.zeros((0, 3))
        )

    def _on_leaf(self, i: int, theta: float) -> np.ndarray:
        return np.cosh(theta) * self.feet[i] + np.sinh(theta) * self.tangents[i]

    def _theta_of(self, i: int, p: np.ndarray) -> float:
        return float(np.arcsinh(mink_inner(p, self.tangents[i])))

    def _coord(self, pt: _ChainPoint) -> np.ndarray:
        return pt.u if pt.u is not None else self._on_leaf(pt.leaf, pt.theta)

    def _chain(self, a, rx, ry):
        """Assemble the chain and per-segment costs for a ref pair."""
        sys = self.spacetime.system
        ux, uy = rx.direction, ry.direction
        seq, _params = separating_leaves_ordered(sys, ux, uy)
        seq = [int(i) for i in seq]

        def merge_end(ref, u_other, seq_local):
            # Edge-cell refs start inside a band: pay a partial crossing
            # toward the side holding the other direction, and drop the
            # band's leaf from the full-crossing list if present.
            if ref.cell != "edge":
                return [_ChainPoint(u=ux if ref is rx else uy, fixed=True)], [], seq_local
            j = ref.leaf_index
            s = ref.edge_param
            exit_far = sys.sides(u_other)[j] != sys.base_sides[j]
            ds = float((1.0 - s if exit_far else s) * sys.weights[j])
            theta0 = self._theta_of(j, direction_of(self.spacetime, ref))
            pts = [
                _ChainPoint(leaf=j, theta=theta0, fixed=True),
                _ChainPoint(leaf=j, theta=theta0),
            ]
            seq_local = [l for l in seq_local if l != j]
            return pts, [("band", ds)], seq_local

        x_pts, x_costs, seq = merge_end(rx, uy, seq)
        y_pts, y_costs, seq = merge_end(ry, ux, seq)

        # same band, nothing in between: one flat crossing is the chain
        if (
            rx.cell == "edge" and ry.cell == "edge"
            and rx.leaf_index == ry.leaf_index and not seq
        ):
            j = rx.leaf_index
            ds = float(abs(rx.edge_param - ry.edge_param) * sys.weights[j])
            chain = [
                _ChainPoint(leaf=j, theta=self._theta_of(j, ux), fixed=True),
                _ChainPoint(leaf=j, theta=self._theta_of(j, uy), fixed=True),
            ]
            return chain, [("band", ds)]

        t_xy = h2_tangent(ux, uy) if h2_dist(ux, uy) > 1e-12 else None
        chain = list(x_pts)
        costs = list(x_costs)
        for l in seq:
            # initial crossing angle: where [u_x, u_y] meets the leaf
            if t_xy is not None:
                num = -mink_inner(ux, sys.duals[l])
                den = mink_inner(t_xy, sys.duals[l])
                tpar = np.arctanh(np.clip(num / den, -1 + 1e-15, 1 - 1e-15))
                cpt = h2_normalize(np.cosh(tpar) * ux + np.sinh(tpar) * t_xy)
                th = self._theta_of(l, cpt)
            else:
                th = self._theta_of(l, ux)
            costs.append(("sector", None))
            chain.append(_ChainPoint(leaf=l, theta=th))
            costs.append(("band", float(sys.weights[l])))
            chain.append(_ChainPoint(leaf=l, theta=th))
        costs.append(("sector", None))
        chain.extend(reversed(y_pts))
        costs.extend(reversed(y_costs))
        return chain, costs

    def _seg_cost(self, a, chain, costs, i) -> float:
        kind, ds = costs[i]
        if kind == "band":
            dth = chain[i + 1].theta - chain[i].theta
            return float(np.hypot(ds, a * dth))
        return a * h2_dist(self._coord(chain[i]), self._coord(chain[i + 1]))

    def _total(self, a, chain, costs) -> float:
        return sum(self._seg_cost(a, chain, costs, i) for i in range(len(costs)))

    def _admissible(self, chain, costs) -> bool:
        """Sector segments must cross no band they do not account for."""
        sys = self.spacetime.system
        for i, (kind, _) in enumerate(costs):
            if kind != "sector":
                continue
            ca, cb = self._coord(chain[i]), self._coord(chain[i + 1])
            mask = sys.separating_mask(ca, cb)
            allowed = {chain[i].leaf, chain[i + 1].leaf} - {None}
            if set(np.flatnonzero(mask)) - allowed:
                return False
        return True

    def distance(self, a: float, rx: LinePointRef, ry: LinePointRef) -> tuple[float, dict]:
        chain, costs = self._chain(a, rx, ry)
        free = [i for i, pt in enumerate(chain) if not pt.fixed]
        init_thetas = [chain[i].theta for i in free]
        if not free:
            return self._total(a, chain, costs), {"crossings": 0, "sweeps": 0}

        def run_descent(window):
            total = self._total(a, chain, costs)
            sweeps = 0
            for _ in range(MAX_SWEEPS):
                sweeps += 1
                for i in free:
                    pt = chain[i]
                    segs = [j for j in (i - 1, i) if 0 <= j < len(costs)]

                    def local(th, pt=pt, segs=segs):
                        old = pt.theta
                        pt.theta = th
                        val = sum(self._seg_cost(a, chain, costs, j) for j in segs)
                        pt.theta = old
                        return val

                    cur = local(pt.theta)
                    res = minimize_scalar(
                        local,
                        bounds=(pt.theta - window, pt.theta + window),
                        method="bounded",
                        options={"xatol": 1e-11},
                    )
                    if res.fun < cur:
                        pt.theta = float(res.x)
                new_total = self._total(a, chain, costs)
                if total - new_total <= SWEEP_STOP_REL * max(1.0, total):
                    total = new_total
                    break
                total = new_total
            return total, sweeps

        upper, sweeps = run_descent(THETA_WINDOW)
        retries = 0
        while not self._admissible(chain, costs) and retries < 2:
            # descent wandered outside the modeled cells: restart closer
            # to the (always realizable) straight-line initialization
            retries += 1
            for i, th in zip(free, init_thetas):
                chain[i].theta = th
            upper, sweeps = run_descent(THETA_WINDOW * 0.25**retries)
        if not self._admissible(chain, costs):
            for i, th in zip(free, init_thetas):
                chain[i].theta = th
            upper = self._total(a, chain, costs)
            retries = -1
        n_cross = sum(1 for kind, _ in costs if kind == "band")
        return upper, {"crossings": n_cross, "sweeps": sweeps, "clamp_retries": retries}


# ---------------- generic graph backend ----------------


class GraphBackend:
    """Level-set distances by shortest paths in a sampled neighbor graph.

    Clouds are sampled per level (sectors by area-uniform directions,
    bands by uniform (s, theta) patches, so both parts of the tau-level
    carry points), projected to {T = a}, and cached; each query appends
    its two endpoints, runs a shortest-path search, then straightens and
    subdivides the winning polyline on the level set.
    """

    def __init__(
        self,
        spacetime: Spacetime,
        T: TimeFunction,
        cloud: int = DEFAULT_CLOUD,
        k: int = DEFAULT_KNN,
        rounds: int = DEFAULT_ROUNDS,
        seed: int = 0,
    ):
        self.spacetime = spacetime
        self.T = T
        self.cloud = int(cloud)
        self.k = int(k)
        self.rounds = int(rounds)
        self.seed = int(seed)
        self._levels: dict = {}

    # -- cloud construction --

    def _tau_level_points(self, a: float, R: float, rng) -> np.ndarray:
        st = self.spacetime
        sys = st.system
        n = self.cloud
        # split the budget by the area of the two kinds of pieces
        sector_area = 2.0 * np.pi * (np.cosh(R) - 1.0) * a * a
        if len(sys):
            foot_d = sys.leaf_distances(sys.basepoint)
            caps = np.where(
                np.cosh(foot_d) < np.cosh(R),
                np.arccosh(np.maximum(np.cosh(R) / np.cosh(foot_d), 1.0)),
                0.0,
            )
            band_areas = sys.weights * a * 2.0 * caps
        else:
            band_areas = np.zeros(0)
        total = sector_area + band_areas.sum()
        n_bands = np.floor(n * band_areas / total).astype(int)
        n_sec = max(n - int(n_bands.sum()), n // 10)

        u = rng.uniform(size=n_sec)
        rho = np.arccosh(1.0 + u * (np.cosh(R) - 1.0))
        phi = rng.uniform(0.0, 2.0 * np.pi, size=n_sec)
        dirs = np.stack(
            [np.cosh(rho), np.sinh(rho) * np.cos(phi), np.sinh(rho) * np.sin(phi)], axis=1
        )
        if len(sys) == 0:
            return a * dirs
        tau, retr, ok = st.cosmo_time_batch(dirs)
        parts = [retr[ok] + a * (dirs[ok] - retr[ok]) / tau[ok, None]]
        starts = st.edge_starts
        vectors = st.edge_vectors
        for j in np.flatnonzero(n_bands):
            nj = int(n_bands[j])
            s = rng.uniform(0.0, 1.0, size=nj)
            th = rng.uniform(-caps[j], caps[j], size=nj)
            foot = sys.foot_points[j]
            tg = geodesic_tangent(sys.duals[j], foot)
            on_leaf = np.cosh(th)[:, None] * foot + np.sinh(th)[:, None] * tg
            parts.append(starts[j] + s[:, None] * vectors[j] + a * on_leaf)
        return np.concatenate(parts)

    def _project(self, a: float, Q: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Project points onto {T = a}; returns (points, converged mask)."""
        if self.T.name == TAU:
            tau, retr, ok = self.spacetime.cosmo_time_batch(Q)
            out = Q.copy()
            out[ok] = retr[ok] + a * (Q[ok] - retr[ok]) / tau[ok, None]
            return out, ok
        P = Q.copy()
        ok = np.ones(len(P), dtype=bool)
        for _ in range(6):
            v = eval_many(self.T, P)
            err = a - v
            live = ok & np.isfinite(v)
            if not live.any() or np.abs(err[live]).max() < 1e-10:
                ok &= np.isfinite(v)
                break
            g = grad_many(self.T, P)
            nn = g[:, 0] ** 2 - g[:, 1] ** 2 - g[:, 2] ** 2
            good = live & np.isfinite(nn) & (nn > 1e-12)
            step = np.zeros_like(P)
            step[good] = (err[good] / nn[good])[:, None] * g[good]
            P = P + step
            ok &= np.isfinite(v)
        v = eval_many(self.T, P)
        ok &= np.isfinite(v) & (np.abs(v - a) < 1e-8 * max(1.0, a))
        return P, ok

    def _level(self, a: float, R_needed: float) -> dict:
        key = round(float(a), 12)
        lv = self._levels.get(key)
        if lv is not None and lv["radius"] >= R_needed - 1e-9:
            return lv
        # quantize upward so a drift of query radii does not rebuild per query
        R = max(np.ceil(R_needed + 0.5), lv["radius"] if lv else 0.0)
        rng = np.random.default_rng(
            [self.seed, int(a * 2**40) % 2**63, int(R * 2**16) % 2**63]
        )
        pts = self._tau_level_points(a, R, rng)
        if self.T.name != TAU:
            pts, ok = self._project(a, pts)
            pts = pts[ok]
        if len(pts) < self.k + 2:
            raise SamplingError("level sampling produced too few points")
        tree = cKDTree(pts)
        _, idx = tree.query(pts, k=self.k + 1)
        rows = np.repeat(np.arange(len(pts)), self.k)
        cols = idx[:, 1:].ravel()
        chord = pts[rows] - pts[cols]
        w2 = np.einsum("ij,ij->i", chord, chord * MINK_DIAG)
        w = np.sqrt(np.maximum(w2, 0.0))
        graph = coo_matrix((w, (rows, cols)), shape=(len(pts), len(pts))).tocsr()
        spacing = float(np.median(w.reshape(len(pts), self.k)[:, -1]))
        lv = {"points": pts, "tree": tree, "graph": graph, "radius": R, "spacing": spacing}
        self._levels[key] = lv
        return lv

    # -- queries --

    def _chord_lengths(self, P: np.ndarray) -> np.ndarray:
        d = np.diff(P, axis=0)
        n2 = np.einsum("ij,ij->i", d, d * MINK_DIAG)
        return np.sqrt(np.maximum(n2, 0.0))

    @staticmethod
    def _pair_lens(A: np.ndarray, B: np.ndarray) -> np.ndarray:
        d = A - B
        return np.sqrt(np.maximum(np.einsum("ij,ij->i", d, d * MINK_DIAG), 0.0))

    def _resample(self, a: float, P: np.ndarray, n_seg: int) -> np.ndarray:
        """Equal-arclength resampling of a polyline, nodes re-projected."""
        seg = self._chord_lengths(P)
        cum = np.concatenate([[0.0], np.cumsum(seg)])
        total = cum[-1]
        if total <= 0 or len(P) < 3:
            return P
        out = [P[0]]
        for t in np.linspace(0.0, total, n_seg + 1)[1:-1]:
            j = min(max(int(np.searchsorted(cum, t)) - 1, 0), len(seg) - 1)
            frac = (t - cum[j]) / max(seg[j], 1e-300)
            out.append((1.0 - frac) * P[j] + frac * P[j + 1])
        out.append(P[-1])
        Q = np.array(out)
        mid, ok = self._project(a, Q[1:-1])
        Q[1:-1][ok] = mid[ok]
        return Q

    def _smooth(self, a: float, P: np.ndarray, max_sweeps: int) -> np.ndarray:
        """Red-black curve shortening: move nodes to projected midpoints
        of their neighbors whenever that shortens the two chords."""
        if len(P) < 3:
            return P
        total = float(self._chord_lengths(P).sum())
        interior = np.arange(1, len(P) - 1)
        for _ in range(max_sweeps):
            for parity in (1, 0):
                idx = interior[interior % 2 == parity]
                if len(idx) == 0:
                    continue
                cand, ok = self._project(a, 0.5 * (P[idx - 1] + P[idx + 1]))
                old = self._pair_lens(P[idx - 1], P[idx]) + self._pair_lens(P[idx], P[idx + 1])
                new = self._pair_lens(P[idx - 1], cand) + self._pair_lens(cand, P[idx + 1])
                take = ok & (new < old)
                P[idx[take]] = cand[take]
            new_total = float(self._chord_lengths(P).sum())
            if total - new_total <= 1e-7 * max(1.0, total):
                return P
            total = new_total
        return P

    def _refine(self, a: float, P: np.ndarray) -> np.ndarray:
        """Coarse-to-fine geodesic relaxation of the graph path.

        Straightening at 8 segments first removes the macroscopic zigzag
        cheaply; each doubling then only has fine-scale error to relax,
        so a few sweeps per level suffice (chord defect ~ (dH/n)^2/24,
        well under the calibration tolerances at 8 * 2^rounds segments).
        """
        P = self._resample(a, P, 8)
        P = self._smooth(a, P, 30)
        for _ in range(self.rounds):
            mids, ok = self._project(a, 0.5 * (P[:-1] + P[1:]))
            out = [P[0]]
            for i in range(len(P) - 1):
                if ok[i]:
                    out.append(mids[i])
                out.append(P[i + 1])
            P = self._smooth(a, np.array(out), 12)
        return P

    def distance(self, a: float, px: np.ndarray, py: np.ndarray, R_needed: float) -> tuple[float, dict]:
        lv = self._level(a, R_needed)
        pts, graph = lv["points"], lv["graph"]
        m = len(pts)
        kq = min(self.k, m)
        _, ix = lv["tree"].query(px, k=kq)
        _, iy = lv["tree"].query(py, k=kq)
        base = graph.tocoo()
        rows, cols, ws = [base.row], [base.col], [base.data]
        for src, nbrs in ((m, np.atleast_1d(ix)), (m + 1, np.atleast_1d(iy))):
            p0 = px if src == m else py
            chord = p0[None, :] - pts[nbrs]
            w2 = np.einsum("ij,ij->i", chord, chord * MINK_DIAG)
            rows.append(np.full(len(nbrs), src))
            cols.append(nbrs)
            ws.append(np.sqrt(np.maximum(w2, 0.0)))
        direct = float(np.sqrt(max(mink_norm2(px - py), 0.0)))
        if direct <= 2.0 * lv["spacing"]:
            rows.append(np.array([m]))
            cols.append(np.array([m + 1]))
            ws.append(np.array([direct]))
        G = coo_matrix(
            (np.concatenate(ws), (np.concatenate(rows), np.concatenate(cols))),
            shape=(m + 2, m + 2),
        ).tocsr()
        dist, pred = dijkstra(
            G, directed=False, indices=m, return_predecessors=True
        )
        if not np.isfinite(dist[m + 1]):
            raise SamplingError("disconnected sample graph (increase sampling density)")
        order = [m + 1]
        while order[-1] != m:
            order.append(pred[order[-1]])
        order.reverse()
        coords = [px] + [pts[i] for i in order[1:-1]] + [py]
        path = self._refine(a, np.array(coords))
        upper = float(self._chord_lengths(path).sum())
        return upper, {
            "cloud": m,
            "k": self.k,
            "rounds": self.rounds,
            "path_nodes": len(path),
            "graph_value": float(dist[m + 1]),
        }


# ---------------- public operations ----------------


def _coverage_radius(spacetime: Spacetime, refs) -> float:
    o = spacetime.system.basepoint if len(spacetime.system) else np.array([1.0, 0.0, 0.0])
    r = max(h2_dist(o, direction_of(spacetime, ref)) for ref in refs)
    return r + COVERAGE_MARGIN


def _structured_cached(spacetime: Spacetime, opts: MetricOpts) -> StructuredBackend:
    key = "structured"
    if key not in opts.graph_backends:
        opts.graph_backends[key] = StructuredBackend(spacetime)
    return opts.graph_backends[key]


def level_distance(
    spacetime: Spacetime,
    T: TimeFunction,
    a: float,
    x: LinePointRef,
    y: LinePointRef,
    opts: MetricOpts | None = None,
) -> DistanceEstimate:
    """Distance between the level-a representatives of two lines.

    Structured backend on cosmological levels (near-exact), graph
    backend otherwise; "both" runs the two and keeps the smaller upper
    bound.  The lower bound is the dual-tree distance on tau-levels (by
    monotone convergence), else 0 with "no certified lower bound".
    """
    if a <= 0:
        raise DomainError("level a must be positive")
    opts = opts or MetricOpts()
    structured_ok = (
        T.name == TAU and x.kind == "gradient" and y.kind == "gradient"
        and opts.backend != "graph"
    )
    upper = np.inf
    method = ""
    params: dict = {}
    if structured_ok:
        upper, params = _structured_cached(spacetime, opts).distance(a, x, y)
        method = "structured"
    if not structured_ok or opts.backend == "both":
        px = rep_at(spacetime, x, T, a)
        py = rep_at(spacetime, y, T, a)
        backend = opts.graph_for(spacetime, T)
        g_upper, g_params = backend.distance(
            a, px, py, _coverage_radius(spacetime, (x, y))
        )
        if g_upper < upper:
            upper, method = g_upper, "graph"
            params = g_params
        elif opts.backend == "both":
            params = dict(params, graph_upper=g_upper)
    if T.name == TAU:
        lower = tree_point_distance(
            spacetime.system, tree_point_of(spacetime, x), tree_point_of(spacetime, y)
        )
    else:
        lower = 0.0
        params = dict(params, lower_note="no certified lower bound")
    return DistanceEstimate(float(upper), float(lower), method, params)


def mixed_distance(
    spacetime: Spacetime,
    T: TimeFunction,
    a: float,
    x: LinePointRef,
    y: LinePointRef,
    opts: MetricOpts | None = None,
) -> DistanceEstimate:
    """Distance on {T = a} between representatives of lines of any family.

    Intersect each line with {T = a} (monotone root-find), then measure
    on that level.  On cosmological levels the intersections are turned
    into gradient refs of their own, so the structured backend and the
    tree lower bound still apply.
    """
    if a <= 0:
        raise DomainError("level a must be positive")
    opts = opts or MetricOpts()
    if T.name == TAU:
        ex = x if x.kind == "gradient" else gradient_ref(spacetime, rep_at(spacetime, x, T, a))
        ey = y if y.kind == "gradient" else gradient_ref(spacetime, rep_at(spacetime, y, T, a))
        return level_distance(spacetime, T, a, ex, ey, opts)
    px = rep_at(spacetime, x, T, a)
    py = rep_at(spacetime, y, T, a)
    backend = opts.graph_for(spacetime, T)
    upper, params = backend.distance(a, px, py, _coverage_radius(spacetime, (x, y)))
    params = dict(params, lower_note="no certified lower bound")
    return DistanceEstimate(float(upper), 0.0, "graph", params)


# ---------------- spectra ----------------


@dataclass(frozen=True)
class SpectrumEntry:
    a: float
    value: float
    axis_param: float
    method: str


@dataclass(frozen=True)
class SpectrumReport:
    """Translation-length spectrum of one word over an a-grid."""

    gamma: str
    grid: tuple[float, ...]
    values: tuple[float, ...]
    tree_value: float
    axis_params: tuple[float, ...]

    def __post_init__(self):
        if any(v < 0 for v in self.values):
            raise AssertionError("spectrum values must be nonnegative")
        if any(b >= a for a, b in zip(self.grid, self.grid[1:])):
            raise AssertionError("spectrum grid must be strictly decreasing")


def spectrum_entry(
    spacetime: Spacetime,
    T: TimeFunction,
    a: float,
    word,
    opts: MetricOpts | None = None,
    line_time: TimeFunction | None = None,
    coarse: int = 7,
) -> SpectrumEntry:
    """Upper estimate of inf_x d(x, gamma x) on the level {T = a}.

    Seeds slide along the axis of gamma over one translation period
    (coarse grid, then bounded local refinement); the reported value is
    an upper estimate of the true infimum.  line_time selects the line
    family: None uses the family native to T, anything else measures the
    mixed distance of that family's lines on {T = a}.
    """
    opts = opts or MetricOpts()
    group = spacetime.group
    axis = group.axis_of(word)
    period = axis.length
    foot = geodesic_foot(
        spacetime.system.basepoint if len(spacetime.system) else np.array([1.0, 0.0, 0.0]),
        axis.geodesic.dual,
    )
    tg = geodesic_tangent(axis.geodesic.dual, foot)
    iso = spacetime.holonomy(word)

    if line_time is None:
        native = T.name == TAU
        family = None if native else T
    else:
        family = None if line_time.name == TAU else line_time

    def make_ref(t):
        seed = np.cosh(t) * foot + np.sinh(t) * tg
        # the axis of an orbit word is itself a leaf; nudge transversally
        # off it so the retraction cell is unambiguous (upper estimate,
        # and wide enough to clear the retraction degeneracy window)
        perp = mink_cross(seed, tg)
        seed = np.cosh(AXIS_SEED_OFFSET) * seed + np.sinh(AXIS_SEED_OFFSET) * perp
        if family is None:
            return gradient_ref(spacetime, seed)
        return flow_ref(family, seed)

    if T.name != TAU or opts.backend in ("graph", "both"):
        # pre-warm the sample cloud over the whole seed sweep, so the
        # coverage radius is settled once instead of growing query by query
        o = spacetime.system.basepoint if len(spacetime.system) else np.array([1.0, 0.0, 0.0])
        R = 0.0
        width0 = period / coarse
        for t in np.linspace(-0.5 * period - width0, 0.5 * period + width0, coarse + 2):
            try:
                ref = make_ref(t)
                gref = transform_ref(spacetime, iso, ref)
                R = max(
                    R,
                    h2_dist(o, direction_of(spacetime, ref)),
                    h2_dist(o, direction_of(spacetime, gref)),
                )
            except (DomainError, SearchInconclusiveError):
                continue
        if R > 0.0:
            opts.graph_for(spacetime, T)._level(a, R + COVERAGE_MARGIN)

    def measure(t):
        # seeds whose line (or its gamma-image) leaves the certified part
        # of Sigma are unusable, not fatal: the entry is an upper estimate
        try:
            ref = make_ref(t)
            gref = transform_ref(spacetime, iso, ref)
            if line_time is None:
                est = level_distance(spacetime, T, a, ref, gref, opts)
            else:
                est = mixed_distance(spacetime, T, a, ref, gref, opts)
            return est.upper
        except (DomainError, FlowError, SearchInconclusiveError, SamplingError):
            return np.inf

    # one translation period, centered on the axis point closest to o
    ts = np.linspace(-0.5 * period, 0.5 * period, coarse, endpoint=False)
    vals = [measure(t) for t in ts]
    i0 = int(np.argmin(vals))
    if not np.isfinite(vals[i0]):
        raise SearchInconclusiveError(
            f"no axis seed for {word!r} lies in the certified part of Sigma"
        )
    width = period / coarse
    res = minimize_scalar(
        measure,
        bounds=(ts[i0] - width, ts[i0] + width),
        method="bounded",
        options={"xatol": max(1e-4 * period, 1e-6), "maxiter": 10},
    )
    best_t, best_v = (float(res.x), float(res.fun)) if res.fun < vals[i0] else (
        float(ts[i0]), float(vals[i0])
    )
    kind = "level" if line_time is None else "mixed"
    return SpectrumEntry(float(a), best_v, best_t, f"{kind}:{T.name}")


# ---------------- cross validation ----------------


@dataclass(frozen=True)
class BackendComparison:
    a: float
    structured: float
    graph: float

    @property
    def rel_diff(self) -> float:
        return abs(self.structured - self.graph) / max(self.structured, self.graph, 1e-30)


def cross_validate(
    spacetime: Spacetime,
    a: float,
    pairs,
    opts: MetricOpts | None = None,
    rel_tol: float = 0.01,
) -> tuple[bool, list[BackendComparison]]:
    """Agreement check between the two backends on a tau-level.

    The structured backend is near-exact there; the graph backend must
    reproduce it within rel_tol before being trusted on other times.
    """
    opts = opts or MetricOpts()
    tau = cosmological_time(spacetime)
    rows = []
    for x, y in pairs:
        s_opts = MetricOpts(
            backend="structured", cloud=opts.cloud, knn=opts.knn,
            rounds=opts.rounds, seed=opts.seed, graph_backends=opts.graph_backends,
        )
        g_opts = MetricOpts(
            backend="graph", cloud=opts.cloud, knn=opts.knn,
            rounds=opts.rounds, seed=opts.seed, graph_backends=opts.graph_backends,
        )
        s = level_distance(spacetime, tau, a, x, y, s_opts)
        g = level_distance(spacetime, tau, a, x, y, g_opts)
        rows.append(BackendComparison(a, s.upper, g.upper))
    passed = all(
        r.rel_diff <= rel_tol or max(r.structured, r.graph) < 1e-9 for r in rows
    )
    return passed, rows

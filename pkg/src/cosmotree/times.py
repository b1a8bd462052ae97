"""Quasi-concave time functions on the spacetime: evaluation, flow, validation.

A time function is a behavior bundle (value, gradient, name).  The
gradient convention: gradient(p) is the future-pointing vector g with
dT(w) = -<g, w> for all w; for the two built-ins it is the unit vector
(p - argmax)/T, so the level-preserving field xi = g / (-<g,g>) equals g
and the flow moves one unit of time value per unit parameter.

Built-ins:
  * cosmological time (from the singularity module),
  * hull time T_C: Lorentz distance to the convex hull of the enumerated
    singularity vertices, computed by projected ascent over hull
    coefficients with an exact active-face refinement (the objective is
    quadratic, so the face problem is a linear solve),
  * a deliberately broken "ripple" time for negative tests.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.integrate import solve_ivp

from scipy.spatial import cKDTree

from .dedup import dedup_indices
from .errors import DomainError, FlowError, SearchInconclusiveError
from .minkowski import mink_inner, mink_norm2
from .singularity import Spacetime

HULL_SUPPORT_TOL = 1e-12
FLOW_VALUE_TOL = 1e-9


@dataclass(frozen=True)
class TimeFunction:
    """Behavior bundle of a time function on Omega.

    value_many/gradient_many are optional vectorized variants over row
    stacks; they return NaN rows where the point cannot be evaluated.
    """

    name: str
    value: Callable[[np.ndarray], float]
    gradient: Callable[[np.ndarray], np.ndarray]
    smoothness: str = ""
    value_many: Callable[[np.ndarray], np.ndarray] | None = None
    gradient_many: Callable[[np.ndarray], np.ndarray] | None = None


def eval_many(T: TimeFunction, points: np.ndarray) -> np.ndarray:
    if T.value_many is not None:
        return T.value_many(points)
    out = np.full(len(points), np.nan)
    for i, p in enumerate(points):
        try:
            out[i] = T.value(p)
        except Exception:
            pass
    return out


def grad_many(T: TimeFunction, points: np.ndarray) -> np.ndarray:
    if T.gradient_many is not None:
        return T.gradient_many(points)
    out = np.full((len(points), 3), np.nan)
    for i, p in enumerate(points):
        try:
            out[i] = T.gradient(p)
        except Exception:
            pass
    return out


def cosmological_time(spacetime: Spacetime) -> TimeFunction:
    def value(p):
        return spacetime.cosmo_time(p).tau

    def gradient(p):
        res = spacetime.cosmo_time(p)
        return (p - res.retraction) / res.tau

    def value_many(P):
        tau, _, ok = spacetime.cosmo_time_batch(P)
        tau[~ok] = np.nan
        return tau

    def gradient_many(P):
        tau, retr, ok = spacetime.cosmo_time_batch(P)
        g = (P - retr) / tau[:, None]
        g[~ok] = np.nan
        return g

    return TimeFunction(
        "cosmological", value, gradient,
        smoothness="C^1 on Omega; piecewise analytic (edge bands and vertex sectors)",
        value_many=value_many, gradient_many=gradient_many,
    )


# ---------------- hull time ----------------


class HullTime:
    """Lorentz distance to the convex hull of the enumerated Sigma vertices.

    The objective q -> -<p-q, p-q> is concave on the visible part of the
    hull (sqrt of it is the Lorentz distance), so projected gradient
    ascent over the simplex of vertex coefficients cannot get trapped;
    an exact solve on the active face then polishes the maximizer to
    machine precision.  The cosmological retraction provides a feasible
    warm start, which also proves T_C >= tau.
    """

    def __init__(self, spacetime: Spacetime, max_iter: int = 400):
        self.spacetime = spacetime
        self.max_iter = max_iter
        sys = spacetime.system
        if len(sys) == 0:
            self.vertices = np.zeros((1, 3))
            self._edge_vertex = None
        else:
            starts = spacetime.edge_starts
            ends = starts + spacetime.edge_vectors
            pts = np.concatenate([starts, ends])
            keep = dedup_indices(np.round(pts, 9), 1e-8)
            self.vertices = pts[keep]
            # map each edge to its endpoint rows inside `vertices`
            n = len(sys)
            _, row_of = cKDTree(self.vertices).query(pts, k=1)
            self._edge_vertex = (row_of[:n], row_of[n:])

    def _argmax(self, p: np.ndarray) -> tuple[float, np.ndarray]:
        """Returns (T^2, hull point) maximizing -<p-q, p-q>."""
        V = self.vertices
        if len(V) == 1:
            return -mink_norm2(p - V[0]), V[0].copy()
        lam0 = np.zeros(len(V))
        try:
            res = self.spacetime.cosmo_time(p)
        except (DomainError, SearchInconclusiveError):
            res = None
        if res is not None and res.edge_param is not None:
            i = res.leaf_index
            s = res.edge_param
            lam0[self._edge_vertex[0][i]] += 1.0 - s
            lam0[self._edge_vertex[1][i]] += s
        else:
            # start from the deepest visible vertex (keeps the hull time
            # evaluable independently of the retraction machinery)
            diff = p[None, :] - V
            nrm = -(diff[:, 0] ** 2) + diff[:, 1] ** 2 + diff[:, 2] ** 2
            vis = (nrm < 0) & (diff[:, 0] > 0)
            if not vis.any():
                raise DomainError("point not in Omega")
            lam0[int(np.argmin(np.where(vis, nrm, np.inf)))] = 1.0
        VM = V * np.array([-1.0, 1.0, 1.0])  # row i gives <v_i, .>
        lam = lam0
        for _ in range(self.max_iter):
            q = V.T @ lam
            d = p - q
            h = -mink_norm2(d)
            g = 2.0 * (VM @ d)  # dh/dlam_i
            # Frank-Wolfe: move toward the best single vertex
            i_star = int(np.argmax(g))
            gap = g[i_star] - float(g @ lam)
            if gap <= 1e-12 * max(1.0, abs(h)):
                break
            dq = V[i_star] - q  # direction in ambient space
            a2 = mink_norm2(dq)  # h(t) = h + 2t<d,dq> - t^2 <dq,dq>
            b1 = 2.0 * mink_inner(d, dq)
            if a2 <= 0:
                t = 1.0 if (b1 - a2) > 0 else 0.0
            else:
                t = float(np.clip(b1 / (2.0 * a2), 0.0, 1.0))
            if t <= 0.0:
                break
            lam = (1.0 - t) * lam
            lam[i_star] += t
            lam = self._face_polish(p, lam)
        lam = self._face_polish(p, lam)
        q = self.vertices.T @ lam
        return -mink_norm2(p - q), q

    def _face_polish(self, p: np.ndarray, lam: np.ndarray) -> np.ndarray:
        """Exact KKT solve on the active face (quadratic objective)."""
        V = self.vertices
        for _ in range(4):
            support = np.flatnonzero(lam > HULL_SUPPORT_TOL)
            if len(support) == 1:
                return lam
            Vs = V[support]
            k = len(support)
            H = -2.0 * (Vs * np.array([-1.0, 1.0, 1.0])) @ Vs.T
            b = 2.0 * (Vs * np.array([-1.0, 1.0, 1.0])) @ p
            A = np.zeros((k + 1, k + 1))
            A[:k, :k] = H
            A[:k, k] = 1.0
            A[k, :k] = 1.0
            rhs = np.concatenate([-b, [1.0]])
            try:
                sol = np.linalg.solve(A, rhs)
            except np.linalg.LinAlgError:
                sol, *_ = np.linalg.lstsq(A, rhs, rcond=None)
            mu = sol[:k]
            if mu.min() >= -1e-14:
                new_lam = np.zeros_like(lam)
                new_lam[support] = np.clip(mu, 0.0, None)
                new_lam /= new_lam.sum()
                old = -mink_norm2(p - V.T @ lam)
                new = -mink_norm2(p - V.T @ new_lam)
                return new_lam if new >= old else lam
            drop = support[int(np.argmin(mu))]
            lam = lam.copy()
            lam[drop] = 0.0
            s = lam.sum()
            if s <= 0:
                return lam
            lam /= s
        return lam

    def value(self, p: np.ndarray) -> float:
        h, _ = self._argmax(np.asarray(p, dtype=float))
        if h <= 0:
            raise DomainError("point not in Omega")
        return float(np.sqrt(h))

    def gradient(self, p: np.ndarray) -> np.ndarray:
        p = np.asarray(p, dtype=float)
        h, q = self._argmax(p)
        if h <= 0:
            raise DomainError("point not in Omega")
        return (p - q) / np.sqrt(h)

    def argmax_many(self, P: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Vectorized (T^2, hull point) over rows of P; NaN where undefined.

        The cosmological retraction already maximizes over Sigma itself, so
        most rows pass the Frank-Wolfe gap test immediately; only rows with
        a positive gap fall back to the scalar optimizer.
        """
        P = np.asarray(P, dtype=float)
        n = len(P)
        h = np.full(n, np.nan)
        Q = np.full((n, 3), np.nan)
        V = self.vertices
        if len(V) == 1:
            d = P - V[0]
            h = d[:, 0] ** 2 - d[:, 1] ** 2 - d[:, 2] ** 2
            Q[:] = V[0]
            h[h <= 0] = np.nan
            Q[np.isnan(h)] = np.nan
            return h, Q
        tau, retr, ok = self.spacetime.cosmo_time_batch(P)
        todo = []
        VM = V * np.array([-1.0, 1.0, 1.0])
        for idx in np.flatnonzero(ok):
            d = P[idx] - retr[idx]
            hv = tau[idx] ** 2
            g = 2.0 * (VM @ d)
            # <grad, lam> equals 2<d, q> for q in the hull
            glam = 2.0 * (-d[0] * retr[idx, 0] + d[1] * retr[idx, 1] + d[2] * retr[idx, 2])
            if g.max() - glam <= 1e-12 * max(1.0, hv):
                h[idx] = hv
                Q[idx] = retr[idx]
            else:
                todo.append(idx)
        todo.extend(np.flatnonzero(~ok))
        for idx in todo:
            try:
                h[idx], Q[idx] = self._argmax(P[idx])
            except DomainError:
                continue
        h[h <= 0] = np.nan
        return h, Q


def _project_simplex(v: np.ndarray) -> np.ndarray:
    """Euclidean projection onto the probability simplex (sort-based)."""
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    rho = np.flatnonzero(u > css / np.arange(1, len(v) + 1))[-1]
    theta = css[rho] / (rho + 1.0)
    return np.clip(v - theta, 0.0, None)


def hull_time(spacetime: Spacetime) -> TimeFunction:
    ht = HullTime(spacetime)

    def value_many(P):
        h, _ = ht.argmax_many(P)
        return np.sqrt(h)

    def gradient_many(P):
        h, Q = ht.argmax_many(P)
        return (P - Q) / np.sqrt(h)[:, None]

    return TimeFunction(
        "hull", ht.value, ht.gradient,
        smoothness="C^{1,1}, concave; not C^2 across face changes",
        value_many=value_many, gradient_many=gradient_many,
    )


def ripple_time(
    spacetime: Spacetime, amplitude: float = 0.05, frequency: float = 5.0
) -> TimeFunction:
    """Deliberately non-quasi-concave perturbation of tau (negative test)."""

    def value(p):
        tau = spacetime.cosmo_time(p).tau
        return tau + amplitude * np.sin(frequency * p[1]) * np.exp(-(p[1] ** 2) - p[2] ** 2)

    def gradient(p, h=1e-6):
        dT = np.zeros(3)
        for k in range(3):
            e = np.zeros(3)
            e[k] = h
            dT[k] = (value(p + e) - value(p - e)) / (2 * h)
        g = -np.array([-dT[0], dT[1], dT[2]])  # raise index, orient future
        if g[0] < 0:
            g = -g
        return g

    return TimeFunction("ripple", value, gradient, smoothness="broken by construction")


_USER_TIMES: dict[str, Callable[[Spacetime], TimeFunction]] = {"ripple": ripple_time}


def register_user_time(ident: str, factory: Callable[[Spacetime], TimeFunction]) -> None:
    _USER_TIMES[ident] = factory


def make_time(spacetime: Spacetime, name: str) -> TimeFunction:
    """Resolve a time function by name: "cosmological", "hull", "user:<id>"."""
    if name == "cosmological":
        return cosmological_time(spacetime)
    if name == "hull":
        return hull_time(spacetime)
    if name.startswith("user:"):
        ident = name.split(":", 1)[1]
        if ident not in _USER_TIMES:
            raise KeyError(f"unknown user time {ident!r}")
        return _USER_TIMES[ident](spacetime)
    raise KeyError(f"unknown time function {name!r}")


# ---------------- flow and validators ----------------


def xi_flow(T: TimeFunction, p: np.ndarray, t: float, rtol: float = 1e-10) -> np.ndarray:
    """Flow along xi = gradient / (-<gradient, gradient>) for parameter t.

    Moves to the future for t > 0 and changes the time value by exactly t
    (postcondition enforced by a terminal correction along xi).  rtol
    controls only the transverse integration accuracy; the value of T at
    the result is exact to FLOW_VALUE_TOL regardless.
    """
    p = np.asarray(p, dtype=float)
    if t == 0.0:
        return p
    target = T.value(p) + t
    if target <= 0:
        raise FlowError(f"target level {target} <= 0")

    def rhs(_, y):
        g = T.gradient(y)
        return g / max(-mink_norm2(g), 1e-12)

    try:
        sol = solve_ivp(
            rhs, (0.0, t), p, rtol=rtol, atol=1e-12, dense_output=False
        )
    except DomainError as exc:
        raise FlowError("left domain") from exc
    if not sol.success:
        raise FlowError(f"flow integration failed: {sol.message}")
    q = sol.y[:, -1]
    for _ in range(12):
        err = target - T.value(q)
        if abs(err) <= FLOW_VALUE_TOL:
            break
        g = T.gradient(q)
        q = q + err * g / max(-mink_norm2(g), 1e-12)
    return q


def unit_normal(T: TimeFunction, p: np.ndarray) -> np.ndarray:
    g = T.gradient(p)
    n2 = -mink_norm2(g)
    if n2 <= 0:
        raise DomainError(f"gradient of {T.name} not timelike at {p}")
    return g / np.sqrt(n2)


def tangent_frame(normal: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Orthonormal spacelike pair spanning the level tangent plane."""
    seed = np.array([0.0, 1.0, 0.0])
    if abs(mink_inner(seed, normal)) > 0.9:
        seed = np.array([0.0, 0.0, 1.0])
    e1 = seed + mink_inner(seed, normal) * normal
    e1 = e1 / np.sqrt(mink_norm2(e1))
    e2 = np.array([-1.0, 1.0, 1.0]) * np.cross(normal, e1)
    e2 = e2 / np.sqrt(mink_norm2(e2))
    return e1, e2


@dataclass(frozen=True)
class ShapeReport:
    name: str
    samples: int
    directions: int
    min_value: float
    argmin_point: np.ndarray
    passed: bool
    slack: float


def quasiconcavity_check(
    T: TimeFunction,
    samples: list[np.ndarray],
    n_directions: int = 8,
    h: float = 1e-4,
    slack: float = 1e-3,
) -> ShapeReport:
    """Second-fundamental-form positivity: min over samples/directions of
    <grad_X n, X> with the future unit normal n; PASS iff min >= -slack.

    Uses central differences of the normal field; when the verdict is
    within 10x of the slack, the estimate is Richardson-refined with a
    halved step before deciding.
    """
    min_val = np.inf
    argmin = None

    def shape_at(p, X, step):
        n_plus = unit_normal(T, p + step * X)
        n_minus = unit_normal(T, p - step * X)
        return mink_inner((n_plus - n_minus) / (2 * step), X)

    for p in samples:
        try:
            n = unit_normal(T, p)
            e1, e2 = tangent_frame(n)
            for k in range(n_directions):
                ang = np.pi * k / n_directions
                X = np.cos(ang) * e1 + np.sin(ang) * e2
                val = shape_at(p, X, h)
                if abs(val) < 10 * slack:
                    fine = shape_at(p, X, h / 2)
                    val = (4 * fine - val) / 3  # second-order Richardson
                if val < min_val:
                    min_val, argmin = val, p
        except DomainError:
            # a non-timelike gradient disqualifies the candidate outright
            min_val, argmin = -np.inf, p
            break
    return ShapeReport(
        T.name, len(samples), n_directions, float(min_val),
        np.asarray(argmin), bool(min_val >= -slack), slack,
    )


def polyline_length(points: list[np.ndarray]) -> float:
    """Minkowski length of a spacelike polyline."""
    total = 0.0
    for u, v in zip(points, points[1:]):
        n2 = mink_norm2(v - u)
        if n2 < 0:
            raise DomainError("polyline segment not spacelike")
        total += float(np.sqrt(n2))
    return total


def level_circle(
    T: TimeFunction, a: float, count: int, radius: float = 0.8
) -> list[np.ndarray]:
    """Closed polyline on the level {T = a} around the apex direction."""
    pts = []
    for k in range(count + 1):
        phi = 2 * np.pi * (k % count) / count
        u = np.array([np.cosh(radius), np.sinh(radius) * np.cos(phi),
                      np.sinh(radius) * np.sin(phi)])
        p = a * u
        p = xi_flow(T, p, a - T.value(p))
        pts.append(p)
    return pts


@dataclass(frozen=True)
class ExpansionReport:
    name: str
    level_from: float
    level_to: float
    length_from: float
    length_to: float
    passed: bool


def expansion_check(
    T: TimeFunction, level_points: list[np.ndarray], t: float, rel_tol: float = 1e-6
) -> ExpansionReport:
    """Flowing a level curve to the future must not shrink its length."""
    a = T.value(level_points[0])
    flowed = [xi_flow(T, p, t) for p in level_points]
    l0 = polyline_length(level_points)
    l1 = polyline_length(flowed)
    return ExpansionReport(
        T.name, a, a + t, l0, l1, bool(l1 >= l0 * (1.0 - rel_tol))
    )


@dataclass(frozen=True)
class ConcavityReport:
    name: str
    segments: int
    min_defect: float
    passed: bool
    tol: float


def concavity_check(
    T: TimeFunction, segments: list[tuple[np.ndarray, np.ndarray]], tol: float = 1e-7
) -> ConcavityReport:
    """Midpoint concavity: T((p+q)/2) - (T(p)+T(q))/2 >= -tol on each segment."""
    worst = np.inf
    for p, q in segments:
        defect = T.value((p + q) / 2) - 0.5 * (T.value(p) + T.value(q))
        worst = min(worst, defect)
    return ConcavityReport(T.name, len(segments), float(worst), bool(worst >= -tol), tol)

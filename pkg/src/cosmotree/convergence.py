"""Small-level experiments: tabulate level metrics over a geometric grid
of levels, extrapolate the a -> 0 limit, and compare against the tree.

An experiment fixes a time function T, sample pairs of lines, and a list
of group words.  For every grid level it tabulates distances (native
level distances for the cosmological time, mixed distances for any other
time) and displacement spectra, then Richardson-extrapolates the last
three grid points.  Extrapolation is refused (item INCONCLUSIVE) when
the observed order falls below RICHARDSON_MIN_ORDER; honesty beats
optimism here, a noisy tail must not be laundered into a limit.

Words also get an axis chain check: a line x is anchored at the foot of
the basepoint on the word's hyperbolic axis, where the tree distance to
gamma x equals the tree translation length, and the chain

    spectrum_T(gamma)  <=  line distance on {T = a}(x, gamma x)
                       <=  cosmological level distance(x, gamma x)
                       =   tree translation length(gamma)

must collapse to a single number as a -> 0.

Reports serialize to CSV (one row per cell) and JSON (extrapolations,
tree references, PASS/FAIL per item); both are byte-deterministic for a
fixed configuration and seed.
"""

from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .dual_tree import find_axis_element, tree_point_distance, tree_translation_length
from .errors import (
    DomainError,
    FlowError,
    NotHyperbolicError,
    SamplingError,
    SearchInconclusiveError,
)
from .lamination import perturb
from .levelmetrics import (
    COVERAGE_MARGIN,
    TAU,
    MetricOpts,
    direction_of,
    gradient_ref,
    level_distance,
    mixed_distance,
    spectrum_entry,
    transform_ref,
    tree_point_of,
)
from .minkowski import geodesic_foot, h2_dist
from .singularity import Spacetime
from .surface_group import cyclic_reduce, parse_word, primitive_root, word_name
from .times import TimeFunction, cosmological_time

RICHARDSON_MIN_ORDER = 0.5
FLAT_ATOL = 1e-12


def geometric_grid(a0: float = 1.0, factor: float = 0.5, count: int = 9) -> tuple[float, ...]:
    """Levels a0 * factor^k for k = 0..count-1 (decreasing)."""
    if not a0 > 0:
        raise ValueError("a0 must be > 0")
    if not 0.0 < factor < 1.0:
        raise ValueError("factor must lie in (0, 1)")
    if count < 1:
        raise ValueError("count must be >= 1")
    return tuple(a0 * factor**k for k in range(count))


@dataclass(frozen=True)
class Extrapolation:
    """Richardson result; limit is None when extrapolation was refused."""

    limit: float | None
    order: float | None
    status: str  # "OK" | "INCONCLUSIVE"
    note: str = ""


def richardson(grid, values) -> Extrapolation:
    """Limit estimate from the last three points of a geometric tabulation.

    Models f(a) = L + C a^p: with grid ratio q the difference ratio
    s = (f[-2]-f[-1])/(f[-3]-f[-2]) equals q^p, giving the order
    p = log s / log q and the limit L = f[-1] + d1 * s/(1-s) where
    d1 = f[-1] - f[-2].  A tail that is flat to FLAT_ATOL counts as
    already converged; a ratio outside (0, 1) or an order below
    RICHARDSON_MIN_ORDER refuses.
    """
    grid = [float(a) for a in grid]
    values = [float(v) for v in values]
    if len(grid) != len(values):
        raise ValueError("grid and values must have equal length")
    if len(grid) < 3:
        return Extrapolation(None, None, "INCONCLUSIVE", "need at least 3 grid points")
    q = grid[-1] / grid[-2]
    if not 0.0 < q < 1.0 or abs(grid[-2] / grid[-3] - q) > 1e-9 * q:
        raise ValueError("grid must be geometric and decreasing")
    f0, f1, f2 = values[-3], values[-2], values[-1]
    if not (math.isfinite(f0) and math.isfinite(f1) and math.isfinite(f2)):
        return Extrapolation(None, None, "INCONCLUSIVE", "non-finite tail values")
    scale = max(1.0, abs(f2))
    d0, d1 = f1 - f0, f2 - f1
    if max(abs(d0), abs(d1)) <= FLAT_ATOL * scale:
        return Extrapolation(f2, None, "OK", "tail flat at tolerance")
    if d0 == 0.0:
        return Extrapolation(None, None, "INCONCLUSIVE", "stalled then moving tail")
    s = d1 / d0
    if not 0.0 < s < 1.0:
        return Extrapolation(
            None, None, "INCONCLUSIVE", f"difference ratio {s:.3g} outside (0, 1)"
        )
    order = math.log(s) / math.log(q)
    if order < RICHARDSON_MIN_ORDER:
        return Extrapolation(
            None, order, "INCONCLUSIVE", f"estimated order {order:.3f} < {RICHARDSON_MIN_ORDER}"
        )
    return Extrapolation(f2 + d1 * s / (1.0 - s), order, "OK")


# ---------------- report rows ----------------


@dataclass(frozen=True)
class CellRow:
    cell: str
    a: float
    value: float
    lower: float
    upper: float
    method: str


@dataclass(frozen=True)
class ItemReport:
    name: str
    kind: str  # "distance" | "spectrum"
    tree_value: float
    grid: tuple[float, ...]
    values: tuple[float, ...]
    extrapolation: Extrapolation
    rel_error: float | None
    status: str  # "PASS" | "FAIL" | "INCONCLUSIVE"
    rows: tuple[CellRow, ...]


@dataclass(frozen=True)
class ChainReport:
    pair: str
    word: str
    tree_length: float
    spectrum_limit: float | None  # l_{0,T}(gamma), flow/native lines
    line_limit: float | None  # delta^T_0(x, gamma x)
    level_limit: float | None  # d^tau_0(x, gamma x)
    spread: float | None  # max pairwise gap / tree_length
    status: str
    note: str = ""
    rows: tuple[CellRow, ...] = ()


@dataclass(frozen=True)
class ConvergenceReport:
    time_name: str
    grid: tuple[float, ...]
    tolerance: float
    ball_radius: int
    items: tuple[ItemReport, ...]
    chains: tuple[ChainReport, ...]
    status: str  # "PASS" | "FAIL" | "INCONCLUSIVE"

    def to_csv(self) -> str:
        """One row per tabulated cell (RFC 4180 quoting, CRLF rows)."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\r\n")
        w.writerow(["cell", "a", "value", "lower", "upper", "method", "ball_radius"])
        rows = [r for item in self.items for r in item.rows]
        rows += [r for chain in self.chains for r in chain.rows]
        for r in rows:
            w.writerow(
                [r.cell, repr(r.a), repr(r.value), repr(r.lower), repr(r.upper),
                 r.method, self.ball_radius]
            )
        return buf.getvalue()

    def to_json(self) -> str:
        payload = {
            "time": self.time_name,
            "grid": list(self.grid),
            "tolerance": self.tolerance,
            "ball_radius": self.ball_radius,
            "status": self.status,
            "items": [
                {
                    "name": it.name,
                    "kind": it.kind,
                    "tree_value": it.tree_value,
                    "values": list(it.values),
                    "limit": it.extrapolation.limit,
                    "order": it.extrapolation.order,
                    "extrapolation_status": it.extrapolation.status,
                    "note": it.extrapolation.note,
                    "rel_error": it.rel_error,
                    "status": it.status,
                }
                for it in self.items
            ],
            "chains": [
                {
                    "pair": ch.pair,
                    "word": ch.word,
                    "tree_length": ch.tree_length,
                    "spectrum_limit": ch.spectrum_limit,
                    "line_limit": ch.line_limit,
                    "level_limit": ch.level_limit,
                    "spread": ch.spread,
                    "status": ch.status,
                    "note": ch.note,
                }
                for ch in self.chains
            ],
        }
        return json.dumps(_jsonable(payload), sort_keys=True, indent=2) + "\n"


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    return obj


# ---------------- experiment orchestration ----------------

_CELL_ERRORS = (DomainError, FlowError, SamplingError, SearchInconclusiveError)


def sample_pairs(spacetime: Spacetime, count: int, seed: int, radius: float = 1.2):
    """Deterministic random line pairs: directions drawn area-uniformly in
    a hyperbolic disk around the basepoint, lifted to gradient lines.

    Every even-indexed pair is resampled until it crosses at least one
    leaf: without the quota most pairs land in one tree region and the
    limit check degenerates to 0 = 0.
    """
    sys = spacetime.system
    rng = np.random.default_rng(seed)

    def draw():
        r = np.arccosh(1.0 + (np.cosh(radius) - 1.0) * rng.random())
        phi = 2.0 * np.pi * rng.random()
        return np.array([np.cosh(r), np.sinh(r) * np.cos(phi), np.sinh(r) * np.sin(phi)])

    pairs = []
    for i in range(count):
        ux = draw()
        uy = draw()
        if len(sys) and i % 2 == 0:
            for _ in range(200):
                if sys.weight_between(ux, uy) > 0:
                    break
                uy = draw()
            else:
                raise SamplingError(
                    f"no leaf-crossing pair found within radius {radius}"
                )
        refs = [
            gradient_ref(spacetime, spacetime.vertex_of_point(u) + u)
            for u in (ux, uy)
        ]
        pairs.append((refs[0], refs[1]))
    return pairs


def _pair_tree_value(spacetime: Spacetime, x, y) -> float:
    return tree_point_distance(
        spacetime.system, tree_point_of(spacetime, x), tree_point_of(spacetime, y)
    )


def _distance_cells(spacetime, T, tau_T, a, x, y, opts):
    if T.name == TAU:
        return level_distance(spacetime, T, a, x, y, opts)
    return mixed_distance(spacetime, T, a, x, y, opts)


def _prewarm_levels(spacetime, T, refs, grid, opts) -> None:
    """Build every graph-backend cloud once, sequentially, before any
    parallel tabulation: cloud radii then depend only on the inputs, not
    on query completion order."""
    if T.name == TAU and opts.backend not in ("graph", "both"):
        return
    sys = spacetime.system
    o = sys.basepoint if len(sys) else np.array([1.0, 0.0, 0.0])
    R = 0.0
    for ref in refs:
        try:
            R = max(R, h2_dist(o, direction_of(spacetime, ref)))
        except _CELL_ERRORS:
            continue
    if R == 0.0:
        return
    backend = opts.graph_for(spacetime, T)
    for a in grid:
        backend._level(float(a), R + COVERAGE_MARGIN)


def _word_key(word) -> tuple[int, ...]:
    return parse_word(word) if isinstance(word, str) else tuple(word)


def converge(
    spacetime: Spacetime,
    T: TimeFunction,
    pairs,
    words,
    grid,
    opts: MetricOpts | None = None,
    tol: float = 0.02,
    spectra_grid=None,
    chain_pairs: int | None = None,
    threads: int = 1,
) -> ConvergenceReport:
    """Tabulate, extrapolate, and compare to the tree (PASS/FAIL per item).

    pairs: list of (x, y) line references; words: group words for the
    displacement spectra; grid: decreasing geometric levels.  Distances
    are tabulated on the full grid, spectra and chain checks on
    spectra_grid (default: the full grid).  chain_pairs caps how many
    pairs get the axis chain check (None = all).  threads parallelizes
    over cells; results are assembled by cell key, not completion order.
    """
    opts = opts or MetricOpts()
    grid = tuple(float(a) for a in grid)
    spectra_grid = grid if spectra_grid is None else tuple(float(a) for a in spectra_grid)
    tau_T = T if T.name == TAU else cosmological_time(spacetime)
    sys = spacetime.system
    ball_radius = int(sys.ball.radius) if len(sys) else 0

    pairs = list(pairs)
    word_keys = [_word_key(w) for w in words]

    # chain setup first so every graph level can be pre-warmed in one pass;
    # a point tree (empty lamination) has no axes, so no chain to check.
    # The axis search returns a conjugate g w g^-1 whose tree axis carries
    # the pair's segment; transporting the pair's own line by it would
    # leave the enumerated part of Sigma, so the chain is measured at the
    # conjugation core w instead, anchored at the foot of the basepoint
    # on w's hyperbolic axis.  All four chain members are conjugation
    # invariant in the a -> 0 limit, and the anchor region lies on w's
    # tree axis, so the same equalities are certified within the horizon.
    n_chain = len(pairs) if chain_pairs is None else min(chain_pairs, len(pairs))
    if len(sys) == 0:
        n_chain = 0
    chain_info = []
    for i, (px, py) in enumerate(pairs[:n_chain]):
        name = f"pair{i:02d}"
        try:
            found = find_axis_element(
                sys, direction_of(spacetime, px), direction_of(spacetime, py)
            )
            # powers share the axis and scale every chain member alike,
            # so the primitive root certifies the same equalities cheaper
            word = primitive_root(cyclic_reduce(found.word))
            axis = spacetime.group.axis_of(word)
            u = perturb(geodesic_foot(sys.basepoint, axis.geodesic.dual))
            lt = tree_translation_length(sys, word)
            iso = spacetime.holonomy(word)
            note = ""
            anchor_defect = abs(sys.weight_between(u, iso.apply_linear(u)) - lt)
            if anchor_defect > 1e-9:
                note = f"axis anchor defect {anchor_defect:.2e}"
            x = gradient_ref(spacetime, spacetime.vertex_of_point(u) + u)
            gx = transform_ref(spacetime, iso, x)
        except (NotHyperbolicError, DomainError, SearchInconclusiveError) as exc:
            chain_info.append((name, None, None, None, math.nan, str(exc)))
            continue
        chain_info.append((name, x, gx, word, lt, note))

    warm_refs = [r for pr in pairs for r in pr]
    warm_refs += [r for _, x, gx, _, _, _ in chain_info for r in (x, gx) if r is not None]
    _prewarm_levels(spacetime, T, warm_refs, set(grid) | set(spectra_grid), opts)

    # ---- task table: every cell is pure and independently computable ----
    tasks = {}
    for i, (x, y) in enumerate(pairs):
        for a in grid:
            tasks[("pair", i, a)] = (
                lambda a=a, x=x, y=y: _distance_cells(spacetime, T, tau_T, a, x, y, opts)
            )
    for k, word in enumerate(word_keys):
        for a in spectra_grid:
            tasks[("word", k, a)] = (
                lambda a=a, word=word: spectrum_entry(spacetime, T, a, word, opts)
            )
    # chain cells are keyed by the core word: pairs sharing a core share
    # the anchor, so their cells collapse to one computation
    for name, x, gx, word, lt, note in chain_info:
        if gx is None:
            continue
        for a in spectra_grid:
            tasks[("chain-line", word, a)] = (
                lambda a=a, x=x, gx=gx: _distance_cells(spacetime, T, tau_T, a, x, gx, opts)
            )
            tasks[("chain-level", word, a)] = (
                lambda a=a, x=x, gx=gx: level_distance(spacetime, tau_T, a, x, gx, opts)
            )
            tasks[("chain-spec", word, a)] = (
                lambda a=a, w=word: spectrum_entry(spacetime, T, a, w, opts)
            )

    def run(task):
        try:
            return task()
        except _CELL_ERRORS as exc:
            return exc

    keys = sorted(tasks, key=repr)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            done = dict(zip(keys, pool.map(run, (tasks[k] for k in keys))))
    else:
        done = {k: run(tasks[k]) for k in keys}

    def cell_row(cell, a, res):
        if isinstance(res, Exception):
            return CellRow(cell, a, math.nan, math.nan, math.nan,
                           f"error:{type(res).__name__}")
        if hasattr(res, "upper"):
            return CellRow(cell, a, res.upper, res.lower, res.upper, res.method)
        return CellRow(cell, a, res.value, 0.0, res.value, res.method)

    def finish(name, kind, tree_value, this_grid, rows):
        values = tuple(r.value for r in rows)
        ex = richardson(this_grid, values)
        if ex.status != "OK":
            return ItemReport(name, kind, tree_value, this_grid, values, ex, None,
                              "INCONCLUSIVE", tuple(rows))
        denom = abs(tree_value) if abs(tree_value) > 1e-9 else 1.0
        rel = abs(ex.limit - tree_value) / denom
        status = "PASS" if rel <= tol else "FAIL"
        return ItemReport(name, kind, tree_value, this_grid, values, ex, rel,
                          status, tuple(rows))

    items = []
    for i, (x, y) in enumerate(pairs):
        name = f"pair{i:02d}"
        rows = [cell_row(f"dist:{name}", a, done[("pair", i, a)]) for a in grid]
        items.append(finish(name, "distance", _pair_tree_value(spacetime, x, y), grid, rows))
    for k, word in enumerate(word_keys):
        name = word_name(word)
        rows = [cell_row(f"spectrum:{name}", a, done[("word", k, a)]) for a in spectra_grid]
        items.append(finish(name, "spectrum",
                            tree_translation_length(sys, word), spectra_grid, rows))

    chains = []
    for name, x, gx, word, lt, note in chain_info:
        if gx is None:
            chains.append(ChainReport(name, "", math.nan, None, None, None, None,
                                      "INCONCLUSIVE", note))
            continue
        wname = word_name(word)
        rows = []
        rows += [cell_row(f"chain:{wname}:line", a, done[("chain-line", word, a)])
                 for a in spectra_grid]
        rows += [cell_row(f"chain:{wname}:level", a, done[("chain-level", word, a)])
                 for a in spectra_grid]
        rows += [cell_row(f"chain:{wname}:spectrum", a, done[("chain-spec", word, a)])
                 for a in spectra_grid]
        n = len(spectra_grid)
        ex_line = richardson(spectra_grid, [r.value for r in rows[:n]])
        ex_level = richardson(spectra_grid, [r.value for r in rows[n : 2 * n]])
        ex_spec = richardson(spectra_grid, [r.value for r in rows[2 * n :]])
        limits = (ex_spec.limit, ex_line.limit, ex_level.limit, lt)
        if any(v is None for v in limits):
            chains.append(ChainReport(name, wname, lt, ex_spec.limit,
                                      ex_line.limit, ex_level.limit, None, "INCONCLUSIVE",
                                      note or "extrapolation refused on a chain member",
                                      tuple(rows)))
            continue
        spread = (max(limits) - min(limits)) / max(lt, 1.0)
        status = "PASS" if spread <= tol else "FAIL"
        chains.append(ChainReport(name, wname, lt, ex_spec.limit,
                                  ex_line.limit, ex_level.limit, spread, status, note,
                                  tuple(rows)))

    statuses = [it.status for it in items] + [ch.status for ch in chains]
    overall = ("FAIL" if "FAIL" in statuses
               else "INCONCLUSIVE" if "INCONCLUSIVE" in statuses else "PASS")
    return ConvergenceReport(T.name, grid, tol, ball_radius,
                             tuple(items), tuple(chains), overall)

"""Command-line front end.

Subcommands build the configured spacetime and delegate to the library:

    build      construct and validate, write a summary JSON
    tau        cosmological time of one point
    tree       dual-tree statistics and word translation lengths
    dist       distance between two lines on one level set
    spectrum   displacement spectra over the configured grid
    converge   full tabulate/extrapolate/compare experiment
    validate   invariant suite (exit 0 only if everything passes)

Exit codes: 0 success, 1 usage or config parse error, 2 validation
failure, 3 inconclusive (a search or extrapolation refused to certify).
Outputs are deterministic for a fixed config and seed.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, load_config
from .convergence import _jsonable, converge, richardson, sample_pairs
from .dual_tree import four_point_check, tree_point_distance, tree_translation_length
from .errors import (
    ConfigError,
    DomainError,
    LaminationError,
    NotHyperbolicError,
    ResourceLimitError,
    SamplingError,
    SearchInconclusiveError,
)
from .levelmetrics import (
    MetricOpts,
    cross_validate,
    gradient_ref,
    level_distance,
    mixed_distance,
    spectrum_entry,
    tree_point_of,
)
from .singularity import Spacetime
from .surface_group import GEN_NAMES
from .times import make_time, quasiconcavity_check

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_VALIDATION = 2
EXIT_INCONCLUSIVE = 3

COCYCLE_TOL = 1e-9
EQUIVARIANCE_TOL = 1e-8


def main(argv=None) -> int:
    parser = _make_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors; remap to the documented code
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    try:
        cfg = load_config(args.config) if args.config else ExperimentConfig()
        if args.seed is not None:
            cfg = replace(cfg, seed=int(args.seed))
        if args.out is not None:
            cfg = replace(cfg, output=str(args.out))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (LaminationError, NotHyperbolicError, DomainError, SamplingError) as exc:
        print(f"validation failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (SearchInconclusiveError, ResourceLimitError) as exc:
        print(f"inconclusive: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INCONCLUSIVE


def _make_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="experiment config (JSON)")
    common.add_argument("--out", type=Path, help="output directory (overrides config)")
    common.add_argument("--seed", type=int, help="random seed (overrides config)")
    common.add_argument("--threads", type=int, default=1, help="worker threads")
    common.add_argument("--verbose", action="store_true")

    parser = argparse.ArgumentParser(
        prog="cosmotree", parents=[common],
        description="Flat spacetimes from bent surface groups: level metrics, "
                    "dual trees, and their small-level limits.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build", parents=[common],
                       help="construct the spacetime, validate, write summary")
    p.set_defaults(func=cmd_build)

    p = sub.add_parser("tau", parents=[common], help="cosmological time of a point")
    p.add_argument("--point", required=True, help="comma-separated t,x,y")
    p.set_defaults(func=cmd_tau)

    p = sub.add_parser("tree", parents=[common],
                       help="dual-tree statistics and translation lengths")
    p.add_argument("--x", help="optional point t,x,y (line through it)")
    p.add_argument("--y", help="optional point t,x,y")
    p.set_defaults(func=cmd_tree)

    p = sub.add_parser("dist", parents=[common], help="line distance on one level")
    p.add_argument("--a", type=float, required=True, help="level value")
    p.add_argument("--x", required=True, help="point t,x,y on the first line")
    p.add_argument("--y", required=True, help="point t,x,y on the second line")
    p.add_argument("--time", default=None, help="time function (default: first configured)")
    p.set_defaults(func=cmd_dist)

    p = sub.add_parser("spectrum", parents=[common],
                       help="displacement spectra over the grid")
    p.add_argument("--word", action="append", default=None,
                   help="group word (repeatable; default: config words)")
    p.add_argument("--time", default=None)
    p.set_defaults(func=cmd_spectrum)

    p = sub.add_parser("converge", parents=[common],
                       help="tabulate, extrapolate, compare to the tree")
    p.add_argument("--time", default=None, help="restrict to one time function")
    p.set_defaults(func=cmd_converge)

    p = sub.add_parser("validate", parents=[common], help="run the invariant suite")
    p.set_defaults(func=cmd_validate)
    return parser


# ---------------- shared plumbing ----------------


def _parse_point(text: str) -> np.ndarray:
    try:
        vec = np.array([float(v) for v in text.split(",")], dtype=float)
    except ValueError as exc:
        raise ConfigError(f"point {text!r}: {exc}") from exc
    if vec.shape != (3,):
        raise ConfigError(f"point {text!r}: need exactly 3 coordinates t,x,y")
    return vec


def _build_spacetime(cfg: ExperimentConfig) -> Spacetime:
    group = cfg.build_group()
    leaf_ball = group.ball(cfg.radii.leaves, cfg.radii.cap)
    validation_ball = group.ball(cfg.radii.search, cfg.radii.cap)
    return Spacetime.build(group, cfg.components(), leaf_ball, validation_ball)


def _metric_opts(cfg: ExperimentConfig) -> MetricOpts:
    be = cfg.backend
    return MetricOpts(backend=be.backend, cloud=be.cloud, knn=be.knn,
                      rounds=be.rounds, seed=cfg.seed)


def _out_dir(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write(path: Path, text: str, verbose: bool) -> None:
    path.write_text(text)
    if verbose:
        print(f"wrote {path}", file=sys.stderr)


def _dump(payload) -> str:
    return json.dumps(_jsonable(payload), sort_keys=True, indent=2) + "\n"


def _cocycle_defect(spacetime: Spacetime, radius: int) -> float:
    """max over ball pairs of |t_{gh} - (t_g + A_g t_h)|."""
    ball = spacetime.group.ball(radius)
    isos = {w: spacetime.holonomy(w) for w in ball.words}
    worst = 0.0
    for wg, g in isos.items():
        for wh, h in isos.items():
            composed = spacetime.holonomy(wg + wh)
            predicted = g.linear @ h.translation + g.translation
            worst = max(worst, float(np.abs(composed.translation - predicted).max()))
    return worst


def _equivariance_defect(
    spacetime: Spacetime, radius: int, n_regions: int, seed: int
) -> tuple[float, int]:
    """max over (gamma, R) pairs of |x(gamma R) - gamma . x(R)|, with count.

    Pairs where the direct separating sum for x(gamma R) is not
    horizon-certified are skipped; the holonomy side stays exact for
    every word, so only the directly summed side needs the certificate.
    """
    sys = spacetime.system
    if len(sys) == 0:
        return 0.0, 0
    rng = np.random.default_rng(seed)
    points = []
    for _ in range(n_regions):
        r = np.arccosh(1.0 + (np.cosh(1.0) - 1.0) * rng.random())
        phi = 2.0 * np.pi * rng.random()
        points.append(np.array([np.cosh(r), np.sinh(r) * np.cos(phi),
                                np.sinh(r) * np.sin(phi)]))
    ball = spacetime.group.ball(radius)
    worst = 0.0
    checked = 0
    for u in points:
        xu = spacetime.vertex_of_point(u)
        for w in ball.words:
            iso = spacetime.holonomy(w)
            gu = iso.apply_linear(u)
            if sys.certifies(sys.basepoint, gu) is False:
                continue
            moved = spacetime.vertex_of_point(gu)
            worst = max(worst, float(np.abs(moved - iso.apply(xu)).max()))
            checked += 1
    return worst, checked


def _sample_domain_points(spacetime: Spacetime, count: int, seed: int) -> list[np.ndarray]:
    rng = np.random.default_rng(seed)
    pts = []
    for _ in range(count):
        r = np.arccosh(1.0 + (np.cosh(1.2) - 1.0) * rng.random())
        phi = 2.0 * np.pi * rng.random()
        u = np.array([np.cosh(r), np.sinh(r) * np.cos(phi), np.sinh(r) * np.sin(phi)])
        t = 0.3 + 1.7 * rng.random()
        pts.append(spacetime.vertex_of_point(u) + t * u)
    return pts


# ---------------- subcommands ----------------


def cmd_build(cfg: ExperimentConfig, args) -> int:
    try:
        spacetime = _build_spacetime(cfg)
    except LaminationError as exc:
        print(f"validation failure: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    group = spacetime.group
    sys_ = spacetime.system
    relator_err = float(np.abs(group.element(group.relator) - np.eye(3)).max())
    cocycle = _cocycle_defect(spacetime, min(cfg.radii.search, 2))
    equivariance, eq_pairs = _equivariance_defect(
        spacetime, min(cfg.radii.search, 2), 6, cfg.seed
    )
    holonomy = {
        name: {
            "linear": spacetime.holonomy(name).linear.tolist(),
            "translation": spacetime.holonomy(name).translation.tolist(),
        }
        for name in GEN_NAMES[:4]
    }
    summary = {
        "surface": cfg.surface if isinstance(cfg.surface, str) else "custom",
        "lamination": [[w, wt] for w, wt in cfg.lamination],
        "sigma": {
            "leaves": len(sys_),
            "total_weight": sys_.multicurve.total_weight if len(sys_) else 0.0,
            "min_gap": sys_.min_gap if len(sys_) else None,
            "horizon": sys_.horizon if len(sys_) else None,
            "ball_radius": sys_.ball.radius if len(sys_) else 0,
        },
        "holonomy": holonomy,
        "validation": {
            "relator_error": relator_err,
            "simplicity": "PASS",
            "cocycle_defect": cocycle,
            "equivariance_defect": equivariance,
            "equivariance_pairs": eq_pairs,
        },
    }
    passed = (relator_err <= 1e-8 and cocycle <= COCYCLE_TOL
              and equivariance <= EQUIVARIANCE_TOL
              and (eq_pairs > 0 or len(sys_) == 0))
    summary["status"] = "PASS" if passed else "FAIL"
    _write(_out_dir(cfg) / "build.json", _dump(summary), args.verbose)
    print(f"build {summary['status']}: {len(sys_)} leaves, "
          f"cocycle defect {cocycle:.2e}, equivariance defect {equivariance:.2e}")
    return EXIT_OK if passed else EXIT_VALIDATION


def cmd_tau(cfg: ExperimentConfig, args) -> int:
    spacetime = _build_spacetime(cfg)
    p = _parse_point(args.point)
    res = spacetime.cosmo_time(p)
    print(_dump({
        "point": p.tolist(),
        "tau": res.tau,
        "retraction": res.retraction.tolist(),
        "cell": res.cell,
        "leaf_index": res.leaf_index,
        "edge_param": res.edge_param,
    }), end="")
    return EXIT_OK


def cmd_tree(cfg: ExperimentConfig, args) -> int:
    spacetime = _build_spacetime(cfg)
    sys_ = spacetime.system
    lengths = {w: tree_translation_length(sys_, w) for w in cfg.words}
    payload = {"translation_lengths": lengths}
    if len(sys_):
        rng = np.random.default_rng(cfg.seed)
        pts = []
        for _ in range(8):
            r = np.arccosh(1.0 + (np.cosh(1.2) - 1.0) * rng.random())
            phi = 2.0 * np.pi * rng.random()
            pts.append(np.array([np.cosh(r), np.sinh(r) * np.cos(phi),
                                 np.sinh(r) * np.sin(phi)]))
        fp = four_point_check(sys_, pts)
        payload["four_point"] = {"quads": fp.tuples_checked, "max_defect": fp.max_defect,
                                 "violations": len(fp.violations)}
    if args.x and args.y:
        x = gradient_ref(spacetime, _parse_point(args.x))
        y = gradient_ref(spacetime, _parse_point(args.y))
        payload["tree_distance"] = tree_point_distance(
            sys_, tree_point_of(spacetime, x), tree_point_of(spacetime, y))
    print(_dump(payload), end="")
    return EXIT_OK


def cmd_dist(cfg: ExperimentConfig, args) -> int:
    spacetime = _build_spacetime(cfg)
    name = args.time or cfg.times[0]
    T = make_time(spacetime, name)
    opts = _metric_opts(cfg)
    x = gradient_ref(spacetime, _parse_point(args.x))
    y = gradient_ref(spacetime, _parse_point(args.y))
    if T.name == "cosmological":
        est = level_distance(spacetime, T, args.a, x, y, opts)
    else:
        est = mixed_distance(spacetime, T, args.a, x, y, opts)
    print(_dump({
        "time": T.name, "a": args.a,
        "value": est.upper, "lower": est.lower, "upper": est.upper,
        "method": est.method, "params": est.params,
    }), end="")
    return EXIT_OK


def cmd_spectrum(cfg: ExperimentConfig, args) -> int:
    spacetime = _build_spacetime(cfg)
    words = args.word or list(cfg.words)
    names = [args.time] if args.time else list(cfg.times)
    opts = _metric_opts(cfg)
    levels = cfg.spectra_levels()
    rows = []
    inconclusive = False
    for tname in names:
        T = make_time(spacetime, tname)
        for word in words:
            values = []
            for a in levels:
                try:
                    e = spectrum_entry(spacetime, T, a, word, opts)
                    rows.append({"time": T.name, "word": word, "a": a,
                                 "value": e.value, "method": e.method})
                    values.append(e.value)
                except (SearchInconclusiveError, SamplingError, DomainError) as exc:
                    rows.append({"time": T.name, "word": word, "a": a,
                                 "value": None, "method": f"error:{type(exc).__name__}"})
                    values.append(float("nan"))
                    inconclusive = True
            ex = richardson(levels, values) if len(levels) >= 3 else None
            tree = tree_translation_length(spacetime.system, word)
            line = (f"spectrum {T.name} {word}: tree={tree:.6f}"
                    + (f" limit={ex.limit:.6f} [{ex.status}]" if ex and ex.limit is not None
                       else f" [{ex.status}]" if ex else ""))
            print(line)
            if ex and ex.status != "OK":
                inconclusive = True
    out = _out_dir(cfg)
    _write(out / "spectrum.json", _dump({"levels": list(levels), "entries": rows}),
           args.verbose)
    return EXIT_INCONCLUSIVE if inconclusive else EXIT_OK


def cmd_converge(cfg: ExperimentConfig, args) -> int:
    spacetime = _build_spacetime(cfg)
    opts = _metric_opts(cfg)
    pairs = sample_pairs(spacetime, cfg.pairs.count, cfg.seed, cfg.pairs.radius)
    names = [args.time] if args.time else list(cfg.times)
    grid = cfg.grid.levels()
    out = _out_dir(cfg)
    worst = EXIT_OK
    for tname in names:
        T = make_time(spacetime, tname)
        report = converge(
            spacetime, T, pairs, list(cfg.words), grid,
            opts=opts, tol=cfg.tolerances.limit,
            spectra_grid=cfg.spectra_levels(),
            chain_pairs=cfg.chain_pairs, threads=max(1, args.threads),
        )
        stem = tname.replace(":", "_")
        _write(out / f"converge_{stem}.csv", report.to_csv(), args.verbose)
        _write(out / f"converge_{stem}.json", report.to_json(), args.verbose)
        for item in report.items:
            limit = ("-" if item.extrapolation.limit is None
                     else f"{item.extrapolation.limit:.6f}")
            print(f"{tname} {item.kind} {item.name}: tree={item.tree_value:.6f} "
                  f"limit={limit} {item.status}")
        for chain in report.chains:
            spread = "-" if chain.spread is None else f"{chain.spread:.4f}"
            print(f"{tname} chain {chain.pair} ({chain.word}): spread={spread} "
                  f"{chain.status}")
        print(f"{tname}: {report.status}")
        code = {"PASS": EXIT_OK, "FAIL": EXIT_VALIDATION,
                "INCONCLUSIVE": EXIT_INCONCLUSIVE}[report.status]
        worst = max(worst, code)
    return worst


def cmd_validate(cfg: ExperimentConfig, args) -> int:
    checks = []

    def record(name, value, threshold, passed, detail=""):
        checks.append({"check": name, "value": value, "threshold": threshold,
                       "status": "PASS" if passed else "FAIL", "detail": detail})
        if args.verbose or not passed:
            print(f"{'PASS' if passed else 'FAIL'} {name}: {value} "
                  f"(threshold {threshold}) {detail}", file=sys.stderr)

    try:
        spacetime = _build_spacetime(cfg)
    except LaminationError as exc:
        print(f"validation failure: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    group = spacetime.group
    sys_ = spacetime.system

    relator_err = float(np.abs(group.element(group.relator) - np.eye(3)).max())
    record("relator", relator_err, 1e-8, relator_err <= 1e-8)

    cocycle = _cocycle_defect(spacetime, min(cfg.radii.search, 2))
    record("cocycle", cocycle, COCYCLE_TOL, cocycle <= COCYCLE_TOL)

    equiv, eq_pairs = _equivariance_defect(spacetime, min(cfg.radii.search, 2), 6, cfg.seed)
    record("equivariance", equiv, EQUIVARIANCE_TOL,
           equiv <= EQUIVARIANCE_TOL and (eq_pairs > 0 or len(sys_) == 0))

    if len(sys_):
        rng = np.random.default_rng(cfg.seed + 1)
        pts = []
        for _ in range(12):
            r = np.arccosh(1.0 + (np.cosh(1.2) - 1.0) * rng.random())
            phi = 2.0 * np.pi * rng.random()
            pts.append(np.array([np.cosh(r), np.sinh(r) * np.cos(phi),
                                 np.sinh(r) * np.sin(phi)]))
        fp = four_point_check(sys_, pts)
        record("tree-four-point", fp.max_defect, 1e-9,
               fp.max_defect <= 1e-9, f"{fp.tuples_checked} quadruples")

    samples = _sample_domain_points(spacetime, 200, cfg.seed + 2)
    for tname in cfg.times:
        T = make_time(spacetime, tname)
        shape = quasiconcavity_check(T, samples, n_directions=8,
                                     slack=cfg.tolerances.shape_slack)
        detail = "" if shape.passed else f"worst sample {shape.argmin_point.tolist()}"
        record(f"quasiconcavity:{T.name}", shape.min_value,
               -cfg.tolerances.shape_slack, shape.passed, detail)

    # domain consistency: every tested time is positive where tau is, and
    # the hull value dominates tau (its competitor set is larger)
    tau = make_time(spacetime, "cosmological")
    for tname in cfg.times:
        if tname == "cosmological":
            continue
        T = make_time(spacetime, tname)
        worst = 0.0
        for p in samples[:50]:
            tv, hv = tau.value(p), T.value(p)
            if tname == "hull":
                worst = max(worst, tv - hv)
            if not np.isfinite(hv) or hv <= 0:
                worst = np.inf
        record(f"domain-consistency:{tname}", worst, 1e-9, worst <= 1e-9)

    if len(sys_) and cfg.pairs.count:
        opts = _metric_opts(cfg)
        pairs = sample_pairs(spacetime, min(cfg.pairs.count, 4), cfg.seed + 3,
                             cfg.pairs.radius)
        a_mid = cfg.grid.levels()[len(cfg.grid.levels()) // 2]
        passed, rows = cross_validate(spacetime, a_mid, pairs, opts,
                                      rel_tol=cfg.tolerances.cross_validate)
        worst_rel = max((r.rel_diff for r in rows), default=0.0)
        record("backend-cross-validation", worst_rel,
               cfg.tolerances.cross_validate, passed, f"level {a_mid}")

    failed = [c for c in checks if c["status"] == "FAIL"]
    payload = {"checks": checks, "status": "FAIL" if failed else "PASS"}
    _write(_out_dir(cfg) / "validate.json", _dump(payload), args.verbose)
    print(f"validate: {payload['status']} ({len(checks)} checks, {len(failed)} failed)")
    return EXIT_VALIDATION if failed else EXIT_OK

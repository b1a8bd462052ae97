"""Experiment configuration: one JSON file describing a full run.

A configuration pins everything a run depends on: the surface group,
the weighted multicurve, which time functions to test, the geometric
level grid, enumeration radii, tolerances, the sampled pairs and word
list, and the random seed.  Two runs from equal configurations (same
seed) produce byte-identical reports.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .surface_group import SurfaceGroup, genus2_octagon, parse_word


@dataclass(frozen=True)
class GridSpec:
    a0: float = 1.0
    factor: float = 0.5
    count: int = 9

    def levels(self) -> tuple[float, ...]:
        return tuple(self.a0 * self.factor**k for k in range(self.count))


@dataclass(frozen=True)
class RadiiSpec:
    leaves: int = 4  # ball radius for leaf enumeration (Sigma truncation)
    search: int = 3  # ball radius for validation / axis searches
    cap: int = 200_000

    def __post_init__(self):
        if self.leaves < 1 or self.search < 1:
            raise ConfigError("radii.leaves and radii.search must be >= 1")
        if self.cap < 1:
            raise ConfigError("radii.cap must be >= 1")


@dataclass(frozen=True)
class ToleranceSpec:
    limit: float = 0.02  # extrapolated limit vs tree reference
    cross_validate: float = 0.01  # structured vs graph backend on tau levels
    shape_slack: float = 1e-3  # quasi-concavity validator slack

    def __post_init__(self):
        for name in ("limit", "cross_validate", "shape_slack"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"tolerances.{name} must be > 0")


@dataclass(frozen=True)
class PairSpec:
    count: int = 20
    radius: float = 1.2  # hyperbolic sampling disk around the basepoint

    def __post_init__(self):
        if self.count < 0:
            raise ConfigError("pairs.count must be >= 0")
        if self.radius <= 0:
            raise ConfigError("pairs.radius must be > 0")


@dataclass(frozen=True)
class BackendSpec:
    cloud: int = 20_000
    knn: int = 12
    rounds: int = 3
    backend: str = "auto"  # "auto" | "structured" | "graph" | "both"

    def __post_init__(self):
        if self.cloud < 100:
            raise ConfigError("backend.cloud must be >= 100")
        if self.knn < 4:
            raise ConfigError("backend.knn must be >= 4")
        if self.rounds < 0:
            raise ConfigError("backend.rounds must be >= 0")
        if self.backend not in ("auto", "structured", "graph", "both"):
            raise ConfigError(f"backend.backend {self.backend!r} unknown")


@dataclass(frozen=True)
class CustomSurface:
    generators: tuple  # 4 matrices, each 3x3 (row-major nested lists)
    relator: str


@dataclass(frozen=True)
class ExperimentConfig:
    surface: str | CustomSurface = "genus2-octagon"
    lamination: tuple[tuple[str, float], ...] = ()
    times: tuple[str, ...] = ("cosmological",)
    grid: GridSpec = field(default_factory=GridSpec)
    radii: RadiiSpec = field(default_factory=RadiiSpec)
    tolerances: ToleranceSpec = field(default_factory=ToleranceSpec)
    pairs: PairSpec = field(default_factory=PairSpec)
    words: tuple[str, ...] = ("a1", "b1", "a1b1", "b1a2")
    seed: int = 7
    output: str = "out"
    backend: BackendSpec = field(default_factory=BackendSpec)
    spectra_count: int = 0  # leading grid levels used for spectra/chains; 0 = all
    chain_pairs: int | None = None  # None = chain-check every pair

    def __post_init__(self):
        if not self.grid.a0 > 0:
            raise ConfigError("grid.a0 must be > 0")
        if not 0.0 < self.grid.factor < 1.0:
            raise ConfigError("grid.factor must lie in (0, 1)")
        if self.grid.count < 1:
            raise ConfigError("grid.count must be >= 1")
        if self.spectra_count < 0:
            raise ConfigError("spectra_count must be >= 0")
        if self.chain_pairs is not None and self.chain_pairs < 0:
            raise ConfigError("chain_pairs must be >= 0 or null")
        if not self.times:
            raise ConfigError("times must list at least one time function")
        for name in self.times:
            if name not in ("cosmological", "hull") and not name.startswith("user:"):
                raise ConfigError(f"times entry {name!r} unknown "
                                  "(expected 'cosmological', 'hull', or 'user:<id>')")
        for entry in self.lamination:
            word, weight = entry
            try:
                parse_word(word)
            except (ValueError, KeyError) as exc:
                raise ConfigError(f"lamination word {word!r}: {exc}") from exc
            if not float(weight) > 0:
                raise ConfigError(f"lamination weight for {word!r} must be > 0")
        for word in self.words:
            try:
                parse_word(word)
            except (ValueError, KeyError) as exc:
                raise ConfigError(f"words entry {word!r}: {exc}") from exc

    # ---------------- construction helpers ----------------

    def build_group(self) -> SurfaceGroup:
        if isinstance(self.surface, CustomSurface):
            gens = np.asarray(self.surface.generators, dtype=float)
            try:
                return SurfaceGroup(gens, parse_word(self.surface.relator))
            except ValueError as exc:
                raise ConfigError(f"surface: {exc}") from exc
        if self.surface == "genus2-octagon":
            return genus2_octagon()
        raise ConfigError(f"surface {self.surface!r} unknown")

    def components(self) -> list[tuple[str, float]]:
        return [(word, float(weight)) for word, weight in self.lamination]

    def spectra_levels(self) -> tuple[float, ...]:
        """Grid levels used for spectrum and chain cells.

        Starts one step below a0: the coarsest level sits deep in the
        curved regime and would pollute a short extrapolation tail,
        while levels far below a0 cost disproportionate backend work.
        """
        levels = self.grid.levels()
        if self.spectra_count and self.spectra_count < len(levels):
            return levels[1 : 1 + self.spectra_count]
        return levels

    def to_dict(self) -> dict:
        surface = (
            {"generators": self.surface.generators, "relator": self.surface.relator}
            if isinstance(self.surface, CustomSurface)
            else self.surface
        )
        return {
            "surface": surface,
            "lamination": [[w, float(wt)] for w, wt in self.lamination],
            "times": list(self.times),
            "grid": {"a0": self.grid.a0, "factor": self.grid.factor, "count": self.grid.count},
            "radii": {"leaves": self.radii.leaves, "search": self.radii.search,
                      "cap": self.radii.cap},
            "tolerances": {"limit": self.tolerances.limit,
                           "cross_validate": self.tolerances.cross_validate,
                           "shape_slack": self.tolerances.shape_slack},
            "pairs": {"count": self.pairs.count, "radius": self.pairs.radius},
            "words": list(self.words),
            "seed": self.seed,
            "output": self.output,
            "backend": {"cloud": self.backend.cloud, "knn": self.backend.knn,
                        "rounds": self.backend.rounds, "backend": self.backend.backend},
            "spectra_count": self.spectra_count,
            "chain_pairs": self.chain_pairs,
        }


def _take(data: dict, key: str, default):
    value = data.pop(key, None)
    return default if value is None else value


def _section(data, key, cls, defaults):
    raw = _take(data, key, {})
    if not isinstance(raw, dict):
        raise ConfigError(f"{key} must be an object")
    unknown = set(raw) - set(defaults)
    if unknown:
        raise ConfigError(f"{key}: unknown field(s) {sorted(unknown)}")
    merged = dict(defaults)
    merged.update(raw)
    return cls(**merged)


def config_from_dict(data: dict) -> ExperimentConfig:
    data = dict(data)
    surface = _take(data, "surface", "genus2-octagon")
    if isinstance(surface, dict):
        if set(surface) != {"generators", "relator"}:
            raise ConfigError("surface object needs exactly the fields "
                              "'generators' and 'relator'")
        surface = CustomSurface(tuple(map(tuple, surface["generators"])),
                                str(surface["relator"]))
    lam_raw = _take(data, "lamination", [])
    lamination = []
    for k, entry in enumerate(lam_raw):
        if not (isinstance(entry, (list, tuple)) and len(entry) == 2):
            raise ConfigError(f"lamination[{k}] must be a [word, weight] pair")
        lamination.append((str(entry[0]), float(entry[1])))
    chain_pairs = data.pop("chain_pairs", None)
    if chain_pairs is not None:
        chain_pairs = int(chain_pairs)
    cfg = ExperimentConfig(
        surface=surface,
        lamination=tuple(lamination),
        times=tuple(_take(data, "times", ["cosmological"])),
        grid=_section(data, "grid", GridSpec, {"a0": 1.0, "factor": 0.5, "count": 9}),
        radii=_section(data, "radii", RadiiSpec,
                       {"leaves": 4, "search": 3, "cap": 200_000}),
        tolerances=_section(data, "tolerances", ToleranceSpec,
                            {"limit": 0.02, "cross_validate": 0.01, "shape_slack": 1e-3}),
        pairs=_section(data, "pairs", PairSpec, {"count": 20, "radius": 1.2}),
        words=tuple(_take(data, "words", ["a1", "b1", "a1b1", "b1a2"])),
        seed=int(_take(data, "seed", 7)),
        output=str(_take(data, "output", "out")),
        backend=_section(data, "backend", BackendSpec,
                         {"cloud": 20_000, "knn": 12, "rounds": 3, "backend": "auto"}),
        spectra_count=int(_take(data, "spectra_count", 0)),
        chain_pairs=chain_pairs,
    )
    if data:
        raise ConfigError(f"unknown top-level field(s): {sorted(data)}")
    return cfg


def load_config(path: str | Path) -> ExperimentConfig:
    """Parse and validate a configuration file (diagnostics carry the
    JSON line/column or the offending field name)."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(
            f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}"
        ) from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    try:
        return config_from_dict(data)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from exc

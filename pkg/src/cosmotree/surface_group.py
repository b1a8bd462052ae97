"""Genus-2 surface group acting on the hyperbolic plane.

The group is generated by the four side-pairing isometries of a regular
hyperbolic octagon whose vertex angles are all pi/4, so the quotient is a
closed genus-2 surface and the single relator [a1,b1][a2,b2] holds.  The
octagon apothem is calibrated by a one-dimensional root-find on the
vertex-angle function; the relator residual is the construction's own
correctness certificate.

Group elements are plain 3x3 Lorentz matrices paired with reduced words
over generator indices 0..7 (0..3 = a1,b1,a2,b2 and i+4 = inverse of i).
Balls are enumerated breadth-first with free reduction and matrix
deduplication; discreteness keeps distinct elements far apart, so the
1e-6 dedup threshold is safe by many orders of magnitude.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

from .dedup import dedup_indices, mask_not_near
from .errors import NotHyperbolicError, ResourceLimitError
from .minkowski import (
    BASEPOINT,
    DERIVED_TOL,
    GeodesicH2,
    Isometry,
    boost,
    geodesic_foot,
    geodesic_tangent,
    h2_point,
    h2_tangent,
    mink_cross,
    mink_inner,
    mink_norm2,
    rotation,
)

GEN_NAMES = ("a1", "b1", "a2", "b2", "A1", "B1", "A2", "B2")
N_GENS = 8
RELATOR_TOL = 1e-8
DEDUP_TOL = 1e-6
DEFAULT_BALL_CAP = 200_000

_TOKEN = re.compile(r"([abAB][12])(?:\^(-?\d+))?")
_SEPARATORS = re.compile(r"[\s*.·]+")


def inverse_index(k: int) -> int:
    return k ^ 4


def free_reduce(indices: list[int]) -> tuple[int, ...]:
    out: list[int] = []
    for k in indices:
        if out and out[-1] == inverse_index(k):
            out.pop()
        else:
            out.append(k)
    return tuple(out)


def parse_word(text: str) -> tuple[int, ...]:
    """Parse a word like "a1 b1^-1 A2" into reduced generator indices.

    Capital letters denote inverses; separators (spaces, '*', '.') are
    optional; '^k' repeats a letter (negative k inverts it).  The empty
    string is the identity.
    """
    s = _SEPARATORS.sub("", text)
    indices: list[int] = []
    pos = 0
    while pos < len(s):
        m = _TOKEN.match(s, pos)
        if m is None:
            raise ValueError(f"cannot parse word {text!r} at position {pos}")
        letter, exponent = m.group(1), int(m.group(2) or 1)
        k = GEN_NAMES.index(letter if letter[0].islower() else letter.lower())
        if letter[0].isupper():
            k = inverse_index(k)
        if exponent < 0:
            k, exponent = inverse_index(k), -exponent
        indices.extend([k] * exponent)
        pos = m.end()
    return free_reduce(indices)


def word_name(word: tuple[int, ...]) -> str:
    """Render an index word back to a string (capitals for inverses)."""
    return "".join(GEN_NAMES[k] for k in word) or "id"


def word_inverse(word: tuple[int, ...]) -> tuple[int, ...]:
    return tuple(inverse_index(k) for k in reversed(word))


def cyclic_reduce(word: tuple[int, ...]) -> tuple[int, ...]:
    """Conjugation core: free reduction plus stripping matched end letters."""
    w = free_reduce(word)
    while len(w) >= 2 and w[0] == inverse_index(w[-1]):
        w = w[1:-1]
    return w


def primitive_root(word: tuple[int, ...]) -> tuple[int, ...]:
    """Shortest r with word = r^k as a letter string (word itself if none)."""
    n = len(word)
    for m in range(1, n + 1):
        if n % m == 0 and word == word[:m] * (n // m):
            return word[:m]
    return word


@dataclass(frozen=True)
class Axis:
    """Translation axis of a hyperbolic isometry of H^2."""

    word: tuple[int, ...]
    matrix: np.ndarray
    length: float
    geodesic: GeodesicH2
    attracting: np.ndarray
    repelling: np.ndarray


@dataclass(frozen=True)
class GroupBall:
    """All group elements with reduced word length <= radius, deduplicated."""

    radius: int
    matrices: np.ndarray  # (n, 3, 3), identity first, sorted by word length
    words: tuple[tuple[int, ...], ...]

    def __len__(self) -> int:
        return len(self.words)


class SurfaceGroup:
    """The octagon surface group, or a custom group given by 8 matrices."""

    def __init__(self, generators: np.ndarray, relator: tuple[int, ...]):
        generators = np.asarray(generators, dtype=float)
        if generators.shape != (4, 3, 3):
            raise ValueError("need exactly 4 generator matrices of shape 3x3")
        inverses = np.array([np.linalg.inv(g) for g in generators])
        self.gens = np.concatenate([generators, inverses])  # indices 0..7
        for g in self.gens:
            Isometry.from_linear(g)  # validates Lorentz, orientations
        self.relator = relator
        err = np.abs(self.element(relator) - np.eye(3)).max()
        if err > RELATOR_TOL:
            raise ValueError(f"relator does not evaluate to identity: err={err:.2e}")
        self.basepoint = BASEPOINT.copy()
        self.apothem: float | None = None  # set by genus2_octagon
        self._balls: dict[int, GroupBall] = {}

    @property
    def generators(self) -> dict[str, Isometry]:
        return {name: Isometry.from_linear(self.gens[k]) for k, name in enumerate(GEN_NAMES)}

    def element(self, word: tuple[int, ...] | str) -> np.ndarray:
        if isinstance(word, str):
            word = parse_word(word)
        m = np.eye(3)
        for k in word:
            m = m @ self.gens[k]
        return m

    def ball(self, radius: int, cap: int = DEFAULT_BALL_CAP) -> GroupBall:
        """Breadth-first enumeration of reduced words up to the given length.

        Raises a resource error when the deduplicated element count would
        exceed `cap` (growth is exponential, roughly 7x per unit radius).
        """
        if radius < 0:
            raise ValueError("radius must be >= 0")
        if radius in self._balls:
            return self._balls[radius]
        mats = np.eye(3)[None]
        words: list[tuple[int, ...]] = [()]
        frontier = mats
        fwords = words[:]
        for _ in range(radius):
            cand_mats, cand_words = [], []
            for k in range(N_GENS):
                keep = [i for i, w in enumerate(fwords) if not w or w[-1] != inverse_index(k)]
                if not keep:
                    continue
                cand_mats.append(frontier[keep] @ self.gens[k])
                cand_words.extend(fwords[i] + (k,) for i in keep)
            cand = np.concatenate(cand_mats)
            flat = cand.reshape(len(cand), 9)
            rep = dedup_indices(flat, DEDUP_TOL)
            new_mask = mask_not_near(flat[rep], mats.reshape(len(mats), 9), DEDUP_TOL)
            rep = rep[new_mask]
            frontier = cand[rep]
            fwords = [cand_words[i] for i in rep]
            mats = np.concatenate([mats, frontier])
            words.extend(fwords)
            if len(mats) > cap:
                raise ResourceLimitError(
                    f"group ball exceeds cap: {len(mats)} > {cap} elements"
                )
        ball = GroupBall(radius, mats, tuple(words))
        self._balls[radius] = ball
        return ball

    def trace(self, word: tuple[int, ...] | str) -> float:
        return float(np.trace(self.element(word)))

    def translation_length(self, word: tuple[int, ...] | str) -> float:
        tr = self.trace(word)
        if tr <= 3.0 + DERIVED_TOL:
            raise NotHyperbolicError("not hyperbolic")
        return float(np.arccosh((tr - 1.0) / 2.0))

    def axis_of(self, word: tuple[int, ...] | str) -> Axis:
        """Axis data of a hyperbolic element via its eigen-structure.

        The matrix has eigenvalues (e^l, 1, e^-l); the 1-eigenvector is the
        spacelike dual of the axis geodesic and the null eigenvectors are
        the ideal fixed points.  The dual's sign is chosen so the element
        translates in the direction of mink_cross(point-on-axis, dual).
        """
        if isinstance(word, str):
            word = parse_word(word)
        m = self.element(word)
        length = self.translation_length(word)  # raises "not hyperbolic"
        evals, evecs = np.linalg.eig(m)
        order = np.argsort(np.abs(evals.real - 1.0) + np.abs(evals.imag))
        dual = evecs[:, order[0]].real
        dual = dual / np.sqrt(mink_norm2(dual))
        on_axis = geodesic_foot(self.basepoint, dual)
        forward = geodesic_tangent(dual, on_axis)
        if mink_inner(m @ on_axis, forward) < 0:
            dual = -dual
            forward = -forward
        att = on_axis + forward
        rep = on_axis - forward
        big = np.argmax(evals.real)
        small = np.argmin(np.abs(evals.real))
        att_eig = evecs[:, big].real
        att_eig = att_eig / att_eig[0] if abs(att_eig[0]) > 1e-12 else att
        rep_eig = evecs[:, small].real
        rep_eig = rep_eig / rep_eig[0] if abs(rep_eig[0]) > 1e-12 else rep
        return Axis(
            word=word,
            matrix=m,
            length=length,
            geodesic=GeodesicH2(dual),
            attracting=att_eig,
            repelling=rep_eig,
        )


def _octagon_side_dual(apothem: float, k: int) -> np.ndarray:
    """Outward-oriented dual of side k (the geodesic at distance r, direction k*pi/4)."""
    return rotation(k * np.pi / 4) @ np.array([np.sinh(apothem), np.cosh(apothem), 0.0])


def _octagon_vertex_angle(apothem: float) -> float:
    """Interior angle of the regular octagon with the given apothem.

    Measured at the vertex between sides 0 and 1 as the angle between the
    two unit tangents pointing from the vertex toward the side midpoints.
    """
    u = _octagon_side_dual(apothem, 0)
    v = _octagon_side_dual(apothem, 1)
    p = mink_cross(u, v)
    n = mink_norm2(p)
    if n >= 0:
        return 0.0  # adjacent sides ultraparallel: vertex at or beyond infinity
    p = p / np.sqrt(-n)
    if p[0] < 0:
        p = -p
    t0 = h2_tangent(p, h2_point(apothem, 0.0))
    t1 = h2_tangent(p, h2_point(apothem, np.pi / 4))
    return float(np.arccos(np.clip(mink_inner(t0, t1), -1.0, 1.0)))


def calibrate_octagon_apothem() -> float:
    """Apothem at which all octagon vertex angles equal pi/4 (root-find)."""
    return brentq(
        lambda r: _octagon_vertex_angle(r) - np.pi / 4, 0.2, 3.0, xtol=1e-15
    )


def _side_pairing(apothem: float, j: int, i: int) -> np.ndarray:
    """The orientation-preserving isometry carrying side i onto side j.

    It maps the midpoint of side i to the midpoint of side j with tangent
    reversal (the image octagon lies on the far side of side j), which
    pins the map down uniquely: rotate side i to angle 0, push across by
    twice the apothem, rotate into place.
    """
    return rotation(j * np.pi / 4) @ boost(2 * apothem) @ rotation(np.pi - i * np.pi / 4)


# Side pairing of the regular octagon giving the genus-2 relator
# [a1,b1][a2,b2] = id: generator g_k carries the listed source side onto
# the listed target side.  Found by searching the per-generator gluing
# orientations for the combination whose relator residual vanishes.
_PAIRING = ((0, 2), (3, 1), (4, 6), (7, 5))  # (target side, source side) per generator

RELATOR_WORD = parse_word("a1 b1 A1 B1 a2 b2 A2 B2")


def genus2_octagon() -> SurfaceGroup:
    """Surface group of the regular octagon with vertex angles pi/4."""
    r = calibrate_octagon_apothem()
    gens = np.array([_side_pairing(r, j, i) for j, i in _PAIRING])
    group = SurfaceGroup(gens, RELATOR_WORD)
    group.apothem = r
    return group

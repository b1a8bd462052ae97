"""Minkowski 3-space primitives and the hyperboloid model of the hyperbolic plane.

All geometry in this package lives in R^{1,2} with the bilinear form
<u, v> = -u0 v0 + u1 v1 + u2 v2.  The hyperbolic plane is the upper
hyperboloid H = {p : <p,p> = -1, p0 > 0}; complete geodesics of H are
cut out by unit spacelike duals v via {p in H : <p,v> = 0}.  Points and
vectors are plain numpy arrays of shape (3,); this module is the only
place the signature convention appears explicitly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import CausalityError

# Global tolerance policy: membership checks are exact-arithmetic facts and
# get 1e-10; quantities derived through eigensolves or root finding get 1e-9.
MEMBERSHIP_TOL = 1e-10
DERIVED_TOL = 1e-9
# Deterministic tie rule for side queries: |<p,v>| <= SIDE_TIE_TOL counts as
# the positive side, so repeated queries can never flip.
SIDE_TIE_TOL = 1e-12

MINK_DIAG = np.array([-1.0, 1.0, 1.0])
MINK = np.diag(MINK_DIAG)

BASEPOINT = np.array([1.0, 0.0, 0.0])


def mink_inner(u: np.ndarray, v: np.ndarray) -> float:
    """Minkowski inner product -u0 v0 + u1 v1 + u2 v2."""
    return float(-u[0] * v[0] + u[1] * v[1] + u[2] * v[2])


def mink_norm2(u: np.ndarray) -> float:
    return mink_inner(u, u)


def is_future_timelike(u: np.ndarray) -> bool:
    return mink_norm2(u) < 0 and u[0] > 0


def mink_cross(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Minkowski cross product: <mink_cross(u,v), w> = det[u, v, w] for all w."""
    return MINK_DIAG * np.cross(u, v)


def assert_hpoint(p: np.ndarray, tol: float = MEMBERSHIP_TOL) -> np.ndarray:
    """Validate membership in the upper hyperboloid and return p unchanged."""
    if abs(mink_norm2(p) + 1.0) > tol or p[0] <= 0:
        raise ValueError(f"not a hyperboloid point: <p,p>={mink_norm2(p)}, p0={p[0]}")
    return p


def h2_normalize(u: np.ndarray) -> np.ndarray:
    """Scale a future timelike vector onto the hyperboloid."""
    s = mink_norm2(u)
    if s >= 0 or u[0] <= 0:
        raise CausalityError("not future timelike")
    return u / np.sqrt(-s)


def h2_point(rho: float, phi: float) -> np.ndarray:
    """Hyperbolic polar coordinates about the basepoint (1,0,0)."""
    return np.array(
        [np.cosh(rho), np.sinh(rho) * np.cos(phi), np.sinh(rho) * np.sin(phi)]
    )


def h2_dist(p: np.ndarray, q: np.ndarray) -> float:
    """Hyperbolic distance arccosh(-<p,q>), clamped below at argument 1.

    The clamp absorbs the roundoff that makes -<p,q> dip below 1 for
    nearly equal points; no other correction is applied.
    """
    return float(np.arccosh(max(1.0, -mink_inner(p, q))))


def h2_tangent(p: np.ndarray, toward: np.ndarray) -> np.ndarray:
    """Unit tangent at p pointing toward another hyperboloid point."""
    t = toward + mink_inner(p, toward) * p
    n = mink_norm2(t)
    if n <= 0:
        raise ValueError("points coincide; tangent undefined")
    return t / np.sqrt(n)


def h2_geodesic_point(p: np.ndarray, tangent: np.ndarray, t: float) -> np.ndarray:
    """Point at arclength t along the geodesic through p with unit tangent."""
    return np.cosh(t) * p + np.sinh(t) * tangent


def lorentz_dist_point(p: np.ndarray, q: np.ndarray) -> float:
    """Lorentzian distance sqrt(-<p-q, p-q>) for q in the timelike past of p.

    Raises
    ------
    CausalityError
        If p - q is not future timelike ("not in timelike future").
    """
    d = p - q
    s = mink_norm2(d)
    if s >= 0 or d[0] <= 0:
        raise CausalityError("not in timelike future")
    return float(np.sqrt(-s))


def lorentz_dist_segment(
    p: np.ndarray, a: np.ndarray, b: np.ndarray
) -> tuple[float, np.ndarray, float]:
    """Maximum Lorentzian distance from p to the spacelike segment [a, b].

    The squared distance -<p-a-s(b-a), p-a-s(b-a)> is a concave quadratic
    in s because b-a is spacelike, so the maximizer is the interior
    critical point <p - a - s(b-a), b-a> = 0 clamped to [0, 1].

    Returns
    -------
    (value, argmax, s) : the distance, the maximizing point on the
        segment, and its parameter in [0, 1].

    Raises
    ------
    CausalityError
        "segment not visible" if no point of the segment lies in the
        timelike past of p.
    """
    d = b - a
    dd = mink_norm2(d)
    if dd <= 0:
        if np.abs(d).max() < 1e-14:  # degenerate segment: treat as a point
            try:
                return lorentz_dist_point(p, a), np.array(a, dtype=float), 0.0
            except CausalityError:
                raise CausalityError("segment not visible") from None
        raise ValueError("segment direction is not spacelike")
    s = mink_inner(p - a, d) / dd
    s = min(1.0, max(0.0, s))
    q = a + s * d
    try:
        val = lorentz_dist_point(p, q)
    except CausalityError:
        raise CausalityError("segment not visible") from None
    return val, q, s


@dataclass(frozen=True)
class Isometry:
    """Affine isometry x -> A x + t of Minkowski space.

    The linear part A must preserve the form, the time orientation
    (A[0,0] > 0), and the space orientation (det A = +1).  Pure
    hyperbolic-plane isometries have t = 0.
    """

    linear: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        A = self.linear
        err = np.abs(A.T @ MINK @ A - MINK).max()
        # Roundoff in a product of Lorentz matrices scales with the squared
        # matrix norm, so the form check is norm-aware: strict (1e-10) for
        # moderate matrices, proportionally relaxed for long-word products.
        if err > MEMBERSHIP_TOL * max(1.0, np.abs(A).max() ** 2):
            raise ValueError(f"linear part does not preserve the form: err={err:.2e}")
        if A[0, 0] <= 0:
            raise ValueError("linear part reverses time orientation")
        if np.linalg.det(A) < 0:
            raise ValueError("linear part reverses space orientation")

    def apply(self, p: np.ndarray) -> np.ndarray:
        return self.linear @ p + self.translation

    def apply_linear(self, v: np.ndarray) -> np.ndarray:
        return self.linear @ v

    def compose(self, other: "Isometry") -> "Isometry":
        """self after other: (A,t)(B,s) = (AB, A s + t)."""
        return Isometry(
            self.linear @ other.linear,
            self.linear @ other.translation + self.translation,
        )

    def inverse(self) -> "Isometry":
        Ainv = MINK @ self.linear.T @ MINK  # form-preserving inverse
        return Isometry(Ainv, -(Ainv @ self.translation))

    @staticmethod
    def identity() -> "Isometry":
        return Isometry(np.eye(3), np.zeros(3))

    @staticmethod
    def from_linear(A: np.ndarray) -> "Isometry":
        return Isometry(np.asarray(A, dtype=float), np.zeros(3))

    @staticmethod
    def translation_by(t: np.ndarray) -> "Isometry":
        return Isometry(np.eye(3), np.asarray(t, dtype=float))


def rotation(phi: float) -> np.ndarray:
    """Linear rotation fixing the basepoint (1,0,0)."""
    c, s = np.cos(phi), np.sin(phi)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def boost(length: float) -> np.ndarray:
    """Hyperbolic translation by `length` along the x1-axis geodesic."""
    c, s = np.cosh(length), np.sinh(length)
    return np.array([[c, s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class GeodesicH2:
    """Complete geodesic of H^2 presented by a unit spacelike dual vector.

    The geodesic is {p : <p, dual> = 0}; the positive side is
    {p : <p, dual> > 0}.  dual and -dual present the same geodesic with
    opposite sides.
    """

    dual: np.ndarray

    def __post_init__(self):
        if abs(mink_norm2(self.dual) - 1.0) > 100 * MEMBERSHIP_TOL:
            raise ValueError("dual vector is not unit spacelike")

    def side(self, p: np.ndarray) -> int:
        return geodesic_side(p, self.dual)

    def foot(self, p: np.ndarray) -> np.ndarray:
        return geodesic_foot(p, self.dual)


def geodesic_side(p: np.ndarray, dual: np.ndarray) -> int:
    """Side of the geodesic: +1 or -1, with ties (|<p,v>| <= 1e-12) sent to +1."""
    s = mink_inner(p, dual)
    return 1 if s >= -SIDE_TIE_TOL else -1


def geodesic_foot(p: np.ndarray, dual: np.ndarray) -> np.ndarray:
    """Closest point of the geodesic to a hyperboloid point p."""
    c = p - mink_inner(p, dual) * dual
    return c / np.sqrt(-mink_norm2(c))


def geodesic_dist(p: np.ndarray, dual: np.ndarray) -> float:
    """Hyperbolic distance from p to the geodesic: arcsinh|<p, dual>|."""
    return float(np.arcsinh(abs(mink_inner(p, dual))))


def geodesic_tangent(dual: np.ndarray, at: np.ndarray) -> np.ndarray:
    """Unit tangent of the geodesic at a point on it (orientation from the dual)."""
    e = mink_cross(at, dual)
    return e / np.sqrt(mink_norm2(e))


def geodesic_endpoints(dual: np.ndarray) -> tuple[float, float]:
    """Boundary-circle angles of the two ideal endpoints.

    A null direction (1, cos t, sin t) lies on the geodesic's closure iff
    it is orthogonal to the dual; solving gives two angles, returned in
    increasing order in [0, 2 pi).
    """
    v0, v1, v2 = dual
    r = np.hypot(v1, v2)
    if r <= abs(v0):
        raise ValueError("dual vector is not spacelike enough for endpoints")
    base = np.arctan2(v2, v1)
    off = np.arccos(np.clip(v0 / r, -1.0, 1.0))
    t1 = (base + off) % (2 * np.pi)
    t2 = (base - off) % (2 * np.pi)
    return (t1, t2) if t1 <= t2 else (t2, t1)


def geodesics_cross(dual_a: np.ndarray, dual_b: np.ndarray, tol: float = 1e-9) -> bool:
    """Whether two geodesics cross at an interior point of H^2.

    Decided by linking of ideal endpoints on the boundary circle, which
    stays stable when the would-be intersection point runs off to
    infinity.  Shared endpoints within `tol` of each other count as not
    crossing (tangency at infinity).
    """
    a1, a2 = geodesic_endpoints(dual_a)
    b1, b2 = geodesic_endpoints(dual_b)
    for t in (b1, b2):
        d1 = min(abs(t - a1), 2 * np.pi - abs(t - a1))
        d2 = min(abs(t - a2), 2 * np.pi - abs(t - a2))
        if min(d1, d2) < tol:
            return False
    inside1 = a1 < b1 < a2
    inside2 = a1 < b2 < a2
    return inside1 != inside2


def same_geodesic(dual_a: np.ndarray, dual_b: np.ndarray, tol: float = 1e-8) -> bool:
    return bool(
        np.abs(dual_a - dual_b).max() < tol or np.abs(dual_a + dual_b).max() < tol
    )

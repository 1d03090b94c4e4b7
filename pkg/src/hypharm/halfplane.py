"""Upper half-plane primitives and scaled ideal triangles.

Points are complex numbers z = x + iy with y > 0 and metric
ds^2 = (dx^2 + dy^2) / y^2.  The scaled ideal triangle of scale r > 0 is
the convex hull of the boundary points 0, r and infinity; its sides are
the vertical lines x = 0 and x = r and the semicircle |z - r/2| = r/2.
Boundary points at infinity are represented by the module constant INF.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

INF = float("inf")

#: Hyperbolic length of the altitude segment from a distinguished edge
#: point to the triangle center; the same for every side and scale.
ALTITUDE_ARC_LENGTH = 0.5 * math.log(3.0)


def hyp_distance(p: complex, q: complex) -> float:
    """Hyperbolic distance between two points of the upper half-plane."""
    py, qy = p.imag, q.imag
    if py <= 0 or qy <= 0:
        raise ValueError("points must have positive imaginary part")
    arg = 1.0 + (abs(p - q) ** 2) / (2.0 * py * qy)
    return math.acosh(max(arg, 1.0))


@dataclass(frozen=True)
class Mobius:
    """Real Moebius transformation of the upper half-plane.

    Acts as z -> (a z + b) / (c z + d) when ``conj`` is False and as
    z -> (a conj(z) + b) / (c conj(z) + d) when ``conj`` is True.  The
    determinant must be positive in the first case and negative in the
    second, so the map always preserves the upper half-plane.
    """

    a: float
    b: float
    c: float
    d: float
    conj: bool = False

    def __post_init__(self):
        det = self.a * self.d - self.b * self.c
        if det == 0:
            raise ValueError("singular coefficient matrix")
        if self.conj != (det < 0):
            raise ValueError("determinant sign does not preserve the half-plane")

    @staticmethod
    def identity() -> "Mobius":
        return Mobius(1.0, 0.0, 0.0, 1.0)

    @staticmethod
    def scaling(s: float) -> "Mobius":
        if s <= 0:
            raise ValueError("scaling factor must be positive")
        return Mobius(s, 0.0, 0.0, 1.0)

    @staticmethod
    def translation(t: float) -> "Mobius":
        return Mobius(1.0, t, 0.0, 1.0)

    @staticmethod
    def reflection_across_imaginary_axis() -> "Mobius":
        """The anti-holomorphic map z -> -conj(z)."""
        return Mobius(-1.0, 0.0, 0.0, 1.0, conj=True)

    def normalized(self) -> "Mobius":
        s = math.sqrt(abs(self.a * self.d - self.b * self.c))
        return Mobius(self.a / s, self.b / s, self.c / s, self.d / s, self.conj)

    def __call__(self, z):
        """Apply to a complex scalar or numpy array of complex numbers."""
        w = np.conj(z) if self.conj else z
        return (self.a * w + self.b) / (self.c * w + self.d)

    def apply_boundary(self, x: float) -> float:
        """Apply to an extended-real boundary point (INF allowed).

        Real boundary points are fixed by conjugation, so the conj flag
        is immaterial here.
        """
        if math.isinf(x):
            if self.c == 0.0:
                return INF
            return self.a / self.c
        den = self.c * x + self.d
        if den == 0.0:
            return INF
        return (self.a * x + self.b) / den

    def compose(self, other: "Mobius") -> "Mobius":
        """Return self after other (apply ``other`` first)."""
        # For real matrices, conj(M w) = M conj(w), so the matrix of the
        # composition is the plain product and conj flags xor.
        a = self.a * other.a + self.b * other.c
        b = self.a * other.b + self.b * other.d
        c = self.c * other.a + self.d * other.c
        d = self.c * other.b + self.d * other.d
        return Mobius(a, b, c, d, self.conj != other.conj).normalized()

    def inverse(self) -> "Mobius":
        # If w = M(conj z) then z = conj(M^-1 w) = M^-1(conj w), so the
        # conj flag carries over (the inverse matrix has 1/det, which
        # keeps the sign matching the flag).
        det = self.a * self.d - self.b * self.c
        return Mobius(self.d / det, -self.b / det, -self.c / det,
                      self.a / det, self.conj).normalized()

    def complex_deriv(self, z: complex) -> complex:
        """d/dz of the holomorphic part, evaluated at z (or conj z)."""
        w = np.conj(z) if self.conj else z
        det = self.a * self.d - self.b * self.c
        return det / (self.c * w + self.d) ** 2

    def jacobian(self, z: complex) -> np.ndarray:
        """Real 2x2 Jacobian at z."""
        if not self.conj:
            m = self.complex_deriv(z)
            return np.array([[m.real, -m.imag], [m.imag, m.real]])
        m = self.complex_deriv(z)  # derivative w.r.t. conj(z)
        # w = M(conj z): w_x = M', w_y = -i M'
        return np.array([[m.real, m.imag], [m.imag, -m.real]])

    def velocity_along_edge(self, y: float) -> complex:
        """d/dy of y -> self(i y), as a complex vector."""
        if not self.conj:
            return 1j * self.complex_deriv(1j * y)
        return -1j * self.complex_deriv(1j * y)

    def is_close_to(self, other: "Mobius", tol: float = 1e-12) -> bool:
        if self.conj != other.conj:
            return False
        m1, m2 = self.normalized(), other.normalized()
        v1 = np.array([m1.a, m1.b, m1.c, m1.d])
        v2 = np.array([m2.a, m2.b, m2.c, m2.d])
        return min(np.max(np.abs(v1 - v2)), np.max(np.abs(v1 + v2))) <= tol


def _proj_row(p: float) -> tuple[float, float]:
    """Row of the matrix encoding z -> z - p, with p possibly INF."""
    if math.isinf(p):
        return (0.0, 1.0)
    return (1.0, -p)


def _proj_eval(row: tuple[float, float], q: float) -> float:
    if math.isinf(q):
        return row[0]
    return row[0] * q + row[1]


def mobius_from_boundary_triple(p: float, q: float, r: float,
                                scale: float = 1.0) -> Mobius:
    """Map of the half-plane sending boundary points p,q,r to 0,scale,inf.

    Returns the unique such isometry; it is realized anti-holomorphically
    whenever the ordered triple has the wrong cyclic orientation.
    """
    n = _proj_row(p)
    d = _proj_row(r)
    wq = _proj_eval(n, q) / _proj_eval(d, q)
    s = scale / wq
    a, b = s * n[0], s * n[1]
    c, dd = d
    det = a * dd - b * c
    return Mobius(a, b, c, dd, conj=det < 0).normalized()


class Region(Enum):
    INTERIOR = "interior"
    EDGE = "edge"
    OUTSIDE = "outside"


@dataclass(frozen=True)
class IdealTriangle:
    """The ideal triangle r*T with vertices 0, r and infinity."""

    scale: float = 1.0

    def __post_init__(self):
        if self.scale <= 0:
            raise ValueError("scale must be positive")

    @property
    def cusps(self) -> tuple[float, float, float]:
        return (0.0, self.scale, INF)

    def side_circle_sq(self, z: complex) -> float:
        """|z - r/2|^2 - (r/2)^2; negative inside the bottom semicircle."""
        r = self.scale
        return abs(z - r / 2.0) ** 2 - (r / 2.0) ** 2


def membership(t: IdealTriangle, p: complex, tol: float = 1e-12):
    """Classify a point against the triangle's three geodesic sides.

    Returns (Region.INTERIOR, None), (Region.EDGE, k) where k indexes the
    sides (0: x=0 line, 1: x=r line, 2: bottom semicircle), or
    (Region.OUTSIDE, None).
    """
    r = t.scale
    if p.imag <= 0:
        return (Region.OUTSIDE, None)
    ax = tol * max(1.0, r)
    x = p.real
    circ = t.side_circle_sq(p)
    circ_tol = tol * max(1.0, r * r, abs(p) ** 2)
    if x < -ax or x > r + ax or circ < -circ_tol:
        return (Region.OUTSIDE, None)
    if abs(x) <= ax:
        return (Region.EDGE, 0)
    if abs(x - r) <= ax:
        return (Region.EDGE, 1)
    if abs(circ) <= circ_tol:
        return (Region.EDGE, 2)
    return (Region.INTERIOR, None)


def distinguished_points(t: IdealTriangle):
    """Center of the triangle and the three feet of its altitudes.

    Feet are returned in the order (on x=0 line, on x=r line, on the
    semicircle).
    """
    r = t.scale
    center = r * complex(0.5, math.sqrt(3.0) / 2.0)
    feet = (r * 1j, r * complex(1.0, 1.0), r * complex(0.5, 0.5))
    return center, feet


def ideal_triangle_area(t: IdealTriangle) -> float:
    """Hyperbolic area; pi for every scale."""
    return math.pi


def cusp_band_area(t: IdealTriangle, level: float) -> float:
    """Area of the horoball band cut off at the given level at any cusp.

    The level is measured in the chart obtained by the triangle symmetry
    carrying the cusp to infinity, where the band is {Im z > level}.
    """
    r = t.scale
    if level < r / 2.0:
        raise ValueError("cut level must clear the opposite side")
    return r / level


def truncated_area(t: IdealTriangle, levels) -> float:
    """Area of the triangle with a horoball band removed at each cusp.

    ``levels`` maps each cusp (keys 0.0, t.scale, INF or a 3-sequence in
    that order) to its cut level.
    """
    if not isinstance(levels, dict):
        levels = dict(zip(t.cusps, levels))
    return math.pi - sum(cusp_band_area(t, y) for y in levels.values())


def cusp_symmetry(t: IdealTriangle, cusp: float) -> Mobius:
    """Orientation-preserving self-isometry sending the cusp to infinity.

    Fixes the triangle setwise (hence fixes its center) and permutes the
    ideal vertices cyclically.
    """
    r = t.scale
    if math.isinf(cusp):
        return Mobius.identity()
    if cusp == 0.0:
        return Mobius(r, -r * r, 1.0, 0.0).normalized()
    if cusp == r:
        return Mobius(0.0, r * r, -1.0, r).normalized()
    raise ValueError(f"not a cusp of this triangle: {cusp}")


def side_to_standard_position(t: IdealTriangle, tail: float, head: float) -> Mobius:
    """Symmetry of the triangle carrying the directed side (tail, head)
    onto the geodesic (0, infinity) oriented upward.

    ``tail`` and ``head`` must be two of the triangle's cusps; the third
    goes to t.scale, so the image triangle is again t.
    """
    cusps = set(t.cusps)
    if tail not in cusps or head not in cusps or tail == head:
        raise ValueError("tail/head must be distinct cusps")
    (third,) = cusps - {tail, head}
    return mobius_from_boundary_triple(tail, third, head, scale=t.scale)


def horoball_level(t: IdealTriangle, cusp: float, p: complex) -> float:
    """Height of the point in the chart where the cusp sits at infinity.

    The horocycle at ``cusp`` of level Y is exactly the level set
    ``horoball_level(t, cusp, z) == Y``.
    """
    r = t.scale
    if math.isinf(cusp):
        return p.imag
    if cusp == 0.0:
        return r * r * p.imag / abs(p) ** 2
    if cusp == r:
        return r * r * p.imag / abs(p - r) ** 2
    raise ValueError(f"not a cusp of this triangle: {cusp}")


def geodesic_between(p: complex, q: complex):
    """Circle (center, radius) through two interior points orthogonal to
    the real axis, or None when they lie on one vertical line."""
    if abs(p.real - q.real) < 1e-300:
        return None
    c = (abs(q) ** 2 - abs(p) ** 2) / (2.0 * (q.real - p.real))
    return c, abs(p - c)

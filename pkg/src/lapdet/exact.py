"""Exact rational planar geometry for lattice/surface identification.

Positions are stored in "s-coordinates": a point is a pair of Fractions
(x, ys) whose true embedded position is (x, ys * s) with s = sqrt(3) for
triangulations and s = 1 for quadrangulations.  All isometries generated by
rotations through multiples of the face angle (pi/2 or pi/3), reflections
across face-edge lines, and rational translations act as 2x2 rational
matrices on s-coordinates, which makes vertex identification across glued
faces exact.  Incidence tests (orientation signs, segment intersection) are
valid directly in s-coordinates because the change of basis is linear.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Tuple

Pt = Tuple[Fraction, Fraction]

SQRT3 = math.sqrt(3.0)

_HALF = Fraction(1, 2)
_3HALF = Fraction(3, 2)

# 2x2 s-coordinate matrices for rotation by pi/3 and pi/2.
_ROT_TRI = (_HALF, -_3HALF, _HALF, _HALF)      # rotation by pi/3 (s = sqrt3)
_ROT_QUAD = (Fraction(0), Fraction(-1), Fraction(1), Fraction(0))  # pi/2


def scale_factor(cell_kind: str) -> float:
    return SQRT3 if cell_kind == "triangulation" else 1.0


def embed(p: Pt, cell_kind: str) -> Tuple[float, float]:
    """True embedded position of an s-coordinate point."""
    return (float(p[0]), float(p[1]) * scale_factor(cell_kind))


def dist2(p: Pt, q: Pt, cell_kind: str) -> float:
    dx = float(p[0] - q[0])
    dy = float(p[1] - q[1]) * scale_factor(cell_kind)
    return dx * dx + dy * dy


@dataclass(frozen=True)
class Isometry:
    """Affine map (x, ys) -> (a x + b ys + tx, c x + d ys + ty), all Fractions."""

    a: Fraction
    b: Fraction
    c: Fraction
    d: Fraction
    tx: Fraction
    ty: Fraction

    def __call__(self, p: Pt) -> Pt:
        x, y = p
        return (self.a * x + self.b * y + self.tx, self.c * x + self.d * y + self.ty)

    def compose(self, other: "Isometry") -> "Isometry":
        """self o other (apply `other` first)."""
        a = self.a * other.a + self.b * other.c
        b = self.a * other.b + self.b * other.d
        c = self.c * other.a + self.d * other.c
        d = self.c * other.b + self.d * other.d
        tx = self.a * other.tx + self.b * other.ty + self.tx
        ty = self.c * other.tx + self.d * other.ty + self.ty
        return Isometry(a, b, c, d, tx, ty)

    def inverse(self) -> "Isometry":
        det = self.a * self.d - self.b * self.c
        ia, ib = self.d / det, -self.b / det
        ic, id_ = -self.c / det, self.a / det
        return Isometry(ia, ib, ic, id_,
                        -(ia * self.tx + ib * self.ty),
                        -(ic * self.tx + id_ * self.ty))


def identity_isometry() -> Isometry:
    return Isometry(Fraction(1), Fraction(0), Fraction(0), Fraction(1),
                    Fraction(0), Fraction(0))


def translation(dx: Fraction, dy: Fraction) -> Isometry:
    return Isometry(Fraction(1), Fraction(0), Fraction(0), Fraction(1), dx, dy)


def rotation(k: int, cell_kind: str, center: Pt = (Fraction(0), Fraction(0))) -> Isometry:
    """Rotation by k * (pi/3 or pi/2) about `center`."""
    base = _ROT_TRI if cell_kind == "triangulation" else _ROT_QUAD
    order = 6 if cell_kind == "triangulation" else 4
    m = identity_isometry()
    step = Isometry(*base, Fraction(0), Fraction(0))
    for _ in range(k % order):
        m = step.compose(m)
    if center == (Fraction(0), Fraction(0)):
        return m
    to0 = translation(-center[0], -center[1])
    back = translation(center[0], center[1])
    return back.compose(m.compose(to0))


def reflection(dir_k: int, cell_kind: str, point: Pt = (Fraction(0), Fraction(0))) -> Isometry:
    """Reflection across the line through `point` at angle dir_k * (pi/3 or pi/2)."""
    # reflect across the x-axis, conjugated by a rotation through the line angle
    refl_x = Isometry(Fraction(1), Fraction(0), Fraction(0), Fraction(-1),
                      Fraction(0), Fraction(0))
    rot = rotation(dir_k, cell_kind)
    lin = rot.compose(refl_x.compose(rot.inverse()))
    if point == (Fraction(0), Fraction(0)):
        return lin
    to0 = translation(-point[0], -point[1])
    back = translation(point[0], point[1])
    return back.compose(lin.compose(to0))


def reflection_across_points(p: Pt, q: Pt, cell_kind: str) -> Isometry:
    """Reflection across the line through two distinct rational points.

    Only lines whose direction is a multiple of the base angle are supported
    (face-edge lines always are); raises ValueError otherwise.
    """
    d = (q[0] - p[0], q[1] - p[1])
    order = 6 if cell_kind == "triangulation" else 4
    for k in range(order):
        rot = rotation(k, cell_kind)
        # direction of the rotated x-axis
        ex = rot((Fraction(1), Fraction(0)))
        if ex[0] * d[1] - ex[1] * d[0] == 0:
            return reflection(k, cell_kind, p)
    raise ValueError("line direction is not a lattice-symmetry angle")


def cross(o: Pt, a: Pt, b: Pt) -> Fraction:
    """Signed area cross product (a - o) x (b - o) in s-coordinates."""
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def on_segment(p: Pt, a: Pt, b: Pt) -> bool:
    """True if p lies on the closed segment [a, b] (assumes collinear check by caller)."""
    if cross(a, b, p) != 0:
        return False
    return (min(a[0], b[0]) <= p[0] <= max(a[0], b[0])
            and min(a[1], b[1]) <= p[1] <= max(a[1], b[1]))


def segments_cross(p1: Pt, p2: Pt, q1: Pt, q2: Pt) -> bool:
    """True if the open segment (p1,p2) crosses the half-open segment [q1,q2).

    Used for puncture-cut crossing tests: the cut is [puncture, boundary-point)
    and lattice edges are open segments (their endpoints never lie on the cut
    by the puncture-placement preconditions).
    """
    d1 = cross(q1, q2, p1)
    d2 = cross(q1, q2, p2)
    if d1 == 0 or d2 == 0 or (d1 > 0) == (d2 > 0):
        return False
    d3 = cross(p1, p2, q1)
    d4 = cross(p1, p2, q2)
    if (d3 > 0) == (d4 > 0):
        return False
    # intersection parameter along [q1, q2): exclude the q2 endpoint
    # t = d3 / (d3 - d4) in [0, 1); crossing at q2 means d4 == 0 (excluded above)
    return True


def crossing_sign(p1: Pt, p2: Pt, q1: Pt, q2: Pt) -> int:
    """Orientation of the crossing of directed segment p1->p2 over directed line q1->q2.

    +1 when p1->p2 crosses from the right of q1->q2 to its left.
    """
    return 1 if cross(q1, q2, p1) < 0 else -1


def segment_line_param(p1: Pt, p2: Pt, a: Pt, b: Pt):
    """Parameters (t, u) with p1 + t (p2-p1) = a + u (b-a), rational, or None if parallel."""
    rx, ry = p2[0] - p1[0], p2[1] - p1[1]
    sx, sy = b[0] - a[0], b[1] - a[1]
    den = rx * sy - ry * sx
    if den == 0:
        return None
    qx, qy = a[0] - p1[0], a[1] - p1[1]
    t = (qx * sy - qy * sx) / den
    u = (qx * ry - qy * rx) / den
    return t, u

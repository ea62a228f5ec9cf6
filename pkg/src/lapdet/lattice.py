"""Bi-periodic planar lattices with exact rational embeddings.

A LatticeSpec describes one fundamental cell of a bi-periodic weighted graph
embedded in the plane, with periods (1, i) for quadrangulations and
(1, 1/2 + sqrt(3)/2 i) for triangulations.  Coordinates are stored in the
exact s-coordinates of :mod:`lapdet.exact` so that restriction to faces and
gluing identification are exact.  Weight normalization makes the
continuous-time walk converge to standard 2D Brownian motion (identity
covariance in macroscopic units).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .errors import NonScalarCovariance, SchemaError
from .exact import Pt, embed, rotation, reflection, scale_factor

Edge = Tuple[int, int, Tuple[int, int], float]

_F0 = Fraction(0)
_F1 = Fraction(1)
_FH = Fraction(1, 2)


def periods(cell_kind: str) -> Tuple[Pt, Pt]:
    """Fundamental periods in s-coordinates."""
    if cell_kind == "quadrangulation":
        return ((_F1, _F0), (_F0, _F1))
    return ((_F1, _F0), (_FH, _FH))  # 1 and 1/2 + sqrt3/2 i


def cell_area(cell_kind: str) -> float:
    return 1.0 if cell_kind == "quadrangulation" else math.sqrt(3.0) / 2.0


@dataclass(frozen=True)
class LatticeSpec:
    """One fundamental cell of a bi-periodic weighted embedded graph."""

    name: str
    cell_kind: str  # 'quadrangulation' | 'triangulation'
    vertices: Tuple[Pt, ...]
    edges: Tuple[Edge, ...]  # (i, j, (m, n), w), canonical orientation

    @property
    def delta0(self) -> float:
        return math.sqrt(cell_area(self.cell_kind) / len(self.vertices))

    @property
    def symmetry_order(self) -> int:
        return 6 if self.cell_kind == "triangulation" else 4

    def position(self, i: int, off: Tuple[int, int]) -> Pt:
        p1, p2 = periods(self.cell_kind)
        v = self.vertices[i]
        m, n = off
        return (v[0] + m * p1[0] + n * p2[0], v[1] + m * p1[1] + n * p2[1])

    def edges_at(self, i: int):
        """Yield (j, offset, w) over the symmetric closure of the edge list."""
        for (a, b, off, w) in self.edges:
            if a == i:
                yield (b, off, w)
            if b == i:
                yield (a, (-off[0], -off[1]), w)

    def degree_weight(self, i: int) -> float:
        return sum(w for (_, _, w) in self.edges_at(i))

    def cell_coords(self, p: Pt) -> Tuple[Fraction, Fraction]:
        """Coordinates of p in the period basis (exact)."""
        if self.cell_kind == "quadrangulation":
            return (p[0], p[1])
        v = 2 * p[1]
        u = p[0] - p[1]
        return (u, v)

    def locate(self, p: Pt):
        """Return (vertex index, offset) with p = v_i + offset, or None."""
        u, v = self.cell_coords(p)
        for i, vert in enumerate(self.vertices):
            uu, vv = self.cell_coords(vert)
            du, dv = u - uu, v - vv
            if du.denominator == 1 and dv.denominator == 1:
                return i, (int(du), int(dv))
        return None

    def max_edge_length(self) -> float:
        best = 0.0
        for (a, b, off, _) in self.edges:
            pa = embed(self.vertices[a], self.cell_kind)
            pb = embed(self.position(b, off), self.cell_kind)
            best = max(best, math.hypot(pb[0] - pa[0], pb[1] - pa[1]))
        return best

    def scale_weights(self, factor: float) -> "LatticeSpec":
        new_edges = tuple((a, b, off, w * factor) for (a, b, off, w) in self.edges)
        return replace(self, edges=new_edges)


# ---------------------------------------------------------------------------
# built-ins
# ---------------------------------------------------------------------------

def _canonical_edge(i: int, j: int, off: Tuple[int, int], w: float) -> Edge:
    fwd = (i, j, off)
    rev = (j, i, (-off[0], -off[1]))
    return (*min(fwd, rev), w)


def _dedup(edges: Sequence[Edge]) -> Tuple[Edge, ...]:
    seen = {}
    for (i, j, off, w) in edges:
        key = (i, j, off)
        if key in seen and seen[key] != w:
            raise SchemaError(f"conflicting weights for edge {key}")
        seen[key] = w
    return tuple((i, j, off, w) for (i, j, off), w in sorted(seen.items()))


def builtin_lattice(name: str) -> LatticeSpec:
    """Built-in lattices with unit (not yet normalized) weights."""
    if name == "square":
        verts = ((_F0, _F0),)
        raw = [(0, 0, (1, 0), 1.0), (0, 0, (0, 1), 1.0)]
        kind = "quadrangulation"
    elif name == "shifted_square":
        verts = ((_FH, _FH),)
        raw = [(0, 0, (1, 0), 1.0), (0, 0, (0, 1), 1.0)]
        kind = "quadrangulation"
    elif name == "triangular":
        verts = ((_F0, _F0),)
        raw = [(0, 0, (1, 0), 1.0), (0, 0, (0, 1), 1.0), (0, 0, (1, -1), 1.0)]
        kind = "triangulation"
    elif name == "hexagonal":
        # origin at a hexagon center; two sublattices at 1/3 and 2/3 of the
        # cell diagonal, bond length 1/sqrt(3)
        c1 = (_FH, Fraction(1, 6))
        c2 = (_F0, Fraction(1, 3))
        verts = (c1, c2)
        raw = []
        for (m, n) in [(0, 0), (1, 0), (0, 1), (-1, 0), (0, -1), (1, -1), (-1, 1)]:
            dx = c2[0] - c1[0] + m * _F1 + n * _FH
            dy = c2[1] - c1[1] + n * _FH
            if dx * dx + 3 * dy * dy == Fraction(1, 3):  # true |d|^2 = 1/3
                raw.append((0, 1, (m, n), 1.0))
        kind = "triangulation"
    else:
        raise SchemaError(f"unknown builtin lattice {name!r}")
    edges = _dedup([_canonical_edge(*e) for e in raw])
    return LatticeSpec(name, kind, verts, edges)


# ---------------------------------------------------------------------------
# normalization and validation
# ---------------------------------------------------------------------------

def _class_covariances(spec: LatticeSpec) -> List[np.ndarray]:
    covs = []
    for i in range(len(spec.vertices)):
        pi = np.array(embed(spec.vertices[i], spec.cell_kind))
        c = np.zeros((2, 2))
        for (j, off, w) in spec.edges_at(i):
            pj = np.array(embed(spec.position(j, off), spec.cell_kind))
            d = pj - pi
            c += w * np.outer(d, d)
        covs.append(c)
    return covs


def normalize_weights(spec: LatticeSpec, tol: float = 1e-12) -> LatticeSpec:
    """Rescale all weights so the walk covariance is delta0^2 * Id per class.

    With this normalization the walk at mesh delta = delta0/N and walk-time
    delta^{-2} t converges to standard Brownian motion with transition density
    (1/2 pi t) exp(-|x-y|^2 / 2t).
    """
    covs = _class_covariances(spec)
    target = spec.delta0 ** 2
    diag = np.mean([c[0, 0] for c in covs])
    for c in covs:
        scale = max(np.abs(c).max(), 1e-30)
        if (abs(c[0, 1]) > tol * scale or abs(c[1, 0]) > tol * scale
                or abs(c[0, 0] - c[1, 1]) > tol * scale
                or abs(c[0, 0] - diag) > tol * scale):
            raise NonScalarCovariance(
                f"walk covariance is not scalar/uniform: {c.tolist()}")
    return spec.scale_weights(target / diag)


def canonical_form(spec: LatticeSpec, iso=None):
    """Canonical multiset of embedded edges modulo lattice translations.

    Each edge segment (optionally mapped through the isometry `iso`) is
    reduced by translating its lex-smaller endpoint's cell coordinates into
    [0,1)^2; the form is a sorted tuple of (endpoint, endpoint, weight)
    s-coordinate tuples, invariant under relabeling and lattice translation.
    """
    p1, p2 = periods(spec.cell_kind)
    items = []
    for (a, b, off, w) in spec.edges:
        pa, pb = spec.vertices[a], spec.position(b, off)
        if iso is not None:
            pa, pb = iso(pa), iso(pb)
        ends = sorted([pa, pb])
        # translate so the lex-smaller endpoint's cell coords land in [0,1);
        # sorting first keeps the reduction independent of edge storage order
        ua, va = spec.cell_coords(ends[0])
        m = -(ua.numerator // ua.denominator)
        n = -(va.numerator // va.denominator)
        sh = (m * p1[0] + n * p2[0], m * p1[1] + n * p2[1])
        qa = (ends[0][0] + sh[0], ends[0][1] + sh[1])
        qb = (ends[1][0] + sh[0], ends[1][1] + sh[1])
        items.append((qa, qb, round(w, 12)))
    return tuple(sorted(items))


def validate_symmetry(spec: LatticeSpec) -> List[str]:
    """Check the LatticeSpec invariants; returns a list of failure messages."""
    report: List[str] = []
    for (a, b, off, w) in spec.edges:
        if w <= 0:
            report.append(f"nonpositive weight on edge ({a},{b},{off}): {w}")
    base = canonical_form(spec)
    if canonical_form(spec, rotation(1, spec.cell_kind)) != base:
        angle = "pi/3" if spec.cell_kind == "triangulation" else "pi/2"
        report.append(f"edge set not invariant under rotation by {angle}")
    if canonical_form(spec, reflection(0, spec.cell_kind)) != base:
        report.append("edge set not invariant under reflection across the real axis")
    if not _face_connected(spec, N=4):
        report.append("restriction to one closed unit face is disconnected")
    return report


def face_polygon(cell_kind: str) -> List[Pt]:
    """Unit face corners in s-coordinates, counterclockwise."""
    if cell_kind == "quadrangulation":
        return [(_F0, _F0), (_F1, _F0), (_F1, _F1), (_F0, _F1)]
    return [(_F0, _F0), (_F1, _F0), (_FH, _FH)]


def point_in_face(p: Pt, cell_kind: str) -> bool:
    """Closed unit-face membership, exact."""
    x, y = p
    if cell_kind == "quadrangulation":
        return _F0 <= x <= _F1 and _F0 <= y <= _F1
    return y >= _F0 and y <= x and y <= _F1 - x


def points_in_face(spec: LatticeSpec, N: int) -> List[Tuple[Pt, int]]:
    """All points of (1/N)-scaled lattice in the closed unit face, with class index."""
    pts = []
    # cell-coordinate bounding box of N * face is [0, N]^2 in both kinds
    for i, v in enumerate(spec.vertices):
        uu, vv = spec.cell_coords(v)
        for m in range(-2 - math.ceil(uu), N + 2):
            for n in range(-2 - math.ceil(vv), N + 2):
                p = spec.position(i, (m, n))
                q = (p[0] / N, p[1] / N)
                if point_in_face(q, spec.cell_kind):
                    pts.append((q, i))
    return pts


def _face_connected(spec: LatticeSpec, N: int) -> bool:
    pts = points_in_face(spec, N)
    index = {p: k for k, (p, _) in enumerate(pts)}
    parent = list(range(len(pts)))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for k, (p, i) in enumerate(pts):
        for (j, off, _) in spec.edges_at(i):
            q = spec.position(j, off)
            scaled_q = (p[0] + (q[0] - spec.vertices[i][0]) / N,
                        p[1] + (q[1] - spec.vertices[i][1]) / N)
            other = index.get(scaled_q)
            if other is not None:
                ra, rb = find(k), find(other)
                if ra != rb:
                    parent[ra] = rb
    roots = {find(k) for k in range(len(pts))}
    return len(roots) <= 1


# ---------------------------------------------------------------------------
# JSON serialization
# ---------------------------------------------------------------------------

def to_json(spec: LatticeSpec) -> str:
    den = 1
    for (x, y) in spec.vertices:
        den = den * x.denominator // math.gcd(den, x.denominator)
        den = den * y.denominator // math.gcd(den, y.denominator)
    doc = {
        "name": spec.name,
        "cell_kind": spec.cell_kind,
        "denominator": den,
        "vertices": [[int(x * den), int(y * den)] for (x, y) in spec.vertices],
        "edges": [[a, b, off[0], off[1], w] for (a, b, off, w) in spec.edges],
    }
    return json.dumps(doc, indent=2)


def from_json(text: str) -> LatticeSpec:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"invalid JSON: {exc}") from exc
    for key in ("name", "cell_kind", "denominator", "vertices", "edges"):
        if key not in doc:
            raise SchemaError(f"lattice document missing key {key!r}")
    if doc["cell_kind"] not in ("quadrangulation", "triangulation"):
        raise SchemaError(f"bad cell_kind {doc['cell_kind']!r}")
    den = int(doc["denominator"])
    verts = tuple((Fraction(int(x), den), Fraction(int(y), den))
                  for (x, y) in doc["vertices"])
    edges = _dedup([_canonical_edge(int(a), int(b), (int(m), int(n)), float(w))
                    for (a, b, m, n, w) in doc["edges"]])
    return LatticeSpec(str(doc["name"]), doc["cell_kind"], verts, edges)

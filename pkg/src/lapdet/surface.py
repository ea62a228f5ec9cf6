"""Surface gluing specifications and their lattice discretizations.

A SurfaceSpec glues unit squares or equilateral triangles along edges, with
Dirichlet/Neumann conditions on unglued edges, a flat unitary bundle given by
per-gluing connection matrices, and punctures carrying monodromy.  discretize()
restricts a normalized lattice to each face chart and identifies seam cells
exactly (rational arithmetic), producing the mesh-N weighted graph with
connection matrices, reflection signs, boundary bookkeeping, and a singularity
registry.

Conventions:
  * faces use one chart each (the unit face, counterclockwise corners);
  * gluing (a, b, flip=False) matches edge-a parameter t to edge-b parameter
    1 - t (the orientation-compatible gluing); flip=True matches t to t;
  * crossing a gluing from side a to side b multiplies section values by U;
  * edges on a glued seam are shared 1-cells and enter once; distinct cells
    between the same vertex pair stay as parallel edges (multigraph);
  * vertices on the Dirichlet boundary are removed; edges that cross an
    unglued edge are reflected across its line with sign +1 (N) or -1 (D).
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import (
    AngleNotRepresentable,
    MeshIncompatible,
    NonUnitaryMatrix,
    PunctureOnEdge,
    SchemaError,
    UnreflectableEdge,
)
from .exact import (
    Isometry,
    Pt,
    cross,
    dist2,
    on_segment,
    reflection_across_points,
    rotation,
    segment_line_param,
    segments_cross,
    translation,
)
from .lattice import LatticeSpec, face_polygon, point_in_face, points_in_face

_F0 = Fraction(0)
_F1 = Fraction(1)

UNITARY_TOL = 1e-12
FLATNESS_TOL = 1e-10


def _check_unitary(U: np.ndarray, what: str) -> np.ndarray:
    U = np.asarray(U, dtype=complex)
    if U.ndim != 2 or U.shape[0] != U.shape[1]:
        raise NonUnitaryMatrix(f"{what} is not square")
    err = np.abs(U.conj().T @ U - np.eye(U.shape[0])).max()
    if err > UNITARY_TOL:
        raise NonUnitaryMatrix(f"{what} deviates from unitarity by {err:.3e}")
    return U


@dataclass
class Gluing:
    a: Tuple[int, int]  # (face, edge index)
    b: Tuple[int, int]
    flip: bool
    U: np.ndarray  # d x d, applied when crossing from side a to side b


@dataclass
class BoundaryCondition:
    face: int
    edge: int
    bc: Optional[str] = None  # 'D' | 'N' for a uniform edge
    split: Optional[Tuple[Fraction, str, str]] = None  # (fraction, before, after)

    def bc_at(self, s: Fraction) -> str:
        if self.split is None:
            return self.bc
        frac, before, after = self.split
        if s < frac:
            return before
        if s > frac:
            return after
        return "D" if "D" in (before, after) else "N"


@dataclass
class Puncture:
    face: int
    pos: Pt  # nominal position, s-coordinates in the face chart
    monodromy: np.ndarray
    cut: str = "-x"  # lattice-axis ray direction toward the face boundary


@dataclass
class SurfaceSpec:
    face_kind: str  # 'square' | 'triangle'
    face_count: int
    gluings: List[Gluing]
    boundary: List[BoundaryCondition]
    punctures: List[Puncture]
    bundle_rank: int = 1

    @property
    def cell_kind(self) -> str:
        return "quadrangulation" if self.face_kind == "square" else "triangulation"

    @property
    def n_edges_per_face(self) -> int:
        return 4 if self.face_kind == "square" else 3

    @property
    def face_angle(self) -> Fraction:
        """Interior corner angle as a fraction of pi."""
        return Fraction(1, 2) if self.face_kind == "square" else Fraction(1, 3)

    def corners(self) -> List[Pt]:
        return face_polygon(self.cell_kind)

    def edge_endpoints(self, e: int) -> Tuple[Pt, Pt]:
        c = self.corners()
        return c[e], c[(e + 1) % len(c)]

    def glued_lookup(self) -> Dict[Tuple[int, int], Tuple[Gluing, bool]]:
        """Map (face, edge) -> (gluing, crossing is a->b?)."""
        table: Dict[Tuple[int, int], Tuple[Gluing, bool]] = {}
        for g in self.gluings:
            for key, fwd in ((tuple(g.a), True), (tuple(g.b), False)):
                if key in table:
                    raise SchemaError(f"edge {key} glued more than once")
                table[key] = (g, fwd)
        return table

    def boundary_lookup(self) -> Dict[Tuple[int, int], BoundaryCondition]:
        return {(b.face, b.edge): b for b in self.boundary}


@dataclass
class SingularityDescriptor:
    kind: str  # 'cone' | 'corner' | 'puncture'
    angle_over_pi: Fraction  # alpha / pi (punctures: 2)
    bc_pair: Optional[Tuple[str, str]] = None
    monodromy: Optional[np.ndarray] = None
    reps: List[Tuple[int, Pt]] = field(default_factory=list)  # chart locations
    vertex_at: Optional[int] = None  # vertex id if a lattice vertex sits there
    anchor: Optional[int] = None  # nearest active vertex id

    @property
    def angle(self) -> float:
        return math.pi * float(self.angle_over_pi)


# ---------------------------------------------------------------------------
# parsing
# ---------------------------------------------------------------------------

def _parse_matrix(data, what: str) -> np.ndarray:
    try:
        arr = np.array([[complex(z[0], z[1]) for z in row] for row in data])
    except (TypeError, IndexError) as exc:
        raise SchemaError(f"{what}: expected a matrix of [re, im] pairs") from exc
    return _check_unitary(arr, what)


def parse_surface_spec(document) -> SurfaceSpec:
    """Parse and validate a surface-gluing JSON document (dict or JSON text)."""
    if isinstance(document, (str, bytes)):
        try:
            document = json.loads(document)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"invalid JSON: {exc}") from exc
    if not isinstance(document, dict):
        raise SchemaError("surface document must be a JSON object")
    errs = []
    face_kind = document.get("face_kind")
    if face_kind not in ("square", "triangle"):
        raise SchemaError(f"face_kind must be 'square' or 'triangle', got {face_kind!r}")
    faces = document.get("faces")
    if not isinstance(faces, int) or faces < 1:
        raise SchemaError("faces must be a positive integer")
    rank = document.get("rank", 1)
    if not isinstance(rank, int) or rank < 1:
        raise SchemaError("rank must be a positive integer")
    n_edges = 4 if face_kind == "square" else 3

    def check_fe(fe, what):
        if (not isinstance(fe, (list, tuple)) or len(fe) != 2
                or not all(isinstance(v, int) for v in fe)):
            errs.append(f"{what}: expected [face, edge]")
            return (0, 0)
        f, e = fe
        if not (0 <= f < faces and 0 <= e < n_edges):
            errs.append(f"{what}: face/edge out of range: {fe}")
        return (f, e)

    gluings = []
    for k, g in enumerate(document.get("gluings", [])):
        a = check_fe(g.get("a"), f"gluings[{k}].a")
        b = check_fe(g.get("b"), f"gluings[{k}].b")
        U = (np.eye(rank, dtype=complex) if "U" not in g
             else _parse_matrix(g["U"], f"gluings[{k}].U"))
        if U.shape != (rank, rank):
            errs.append(f"gluings[{k}].U has shape {U.shape}, expected ({rank},{rank})")
        gluings.append(Gluing(a, b, bool(g.get("flip", False)), U))

    boundary = []
    for k, b in enumerate(document.get("boundary", [])):
        face, edge = check_fe([b.get("face"), b.get("edge")], f"boundary[{k}]")
        if "split" in b:
            sp = b["split"]
            p, q = sp.get("frac", [1, 2])
            before, after = sp.get("before"), sp.get("after")
            if before not in ("D", "N") or after not in ("D", "N"):
                errs.append(f"boundary[{k}].split: bc must be 'D' or 'N'")
            boundary.append(BoundaryCondition(face, edge, None,
                                              (Fraction(int(p), int(q)), before, after)))
        else:
            bc = b.get("bc")
            if bc not in ("D", "N"):
                errs.append(f"boundary[{k}].bc must be 'D' or 'N', got {bc!r}")
            boundary.append(BoundaryCondition(face, edge, bc, None))

    punctures = []
    for k, p in enumerate(document.get("punctures", [])):
        face = p.get("face", 0)
        px, py, den = p.get("pos", [1, 1, 2])
        M = _parse_matrix(p.get("M", np.eye(rank)[..., None].repeat(2, -1) * [1, 0]),
                          f"punctures[{k}].M") if "M" in p else np.eye(rank, dtype=complex)
        if M.shape != (rank, rank):
            errs.append(f"punctures[{k}].M has shape {M.shape}, expected ({rank},{rank})")
        punctures.append(Puncture(face, (Fraction(int(px), int(den)),
                                         Fraction(int(py), int(den))),
                                  M, p.get("cut", "-x")))

    spec = SurfaceSpec(face_kind, faces, gluings, boundary, punctures, rank)

    # every edge must be glued or carry a boundary condition, not both
    glued = set()
    for g in gluings:
        glued.update([tuple(g.a), tuple(g.b)])
    spec.glued_lookup()  # raises on duplicates
    bdry = set((b.face, b.edge) for b in boundary)
    if glued & bdry:
        errs.append(f"edges both glued and boundary: {sorted(glued & bdry)}")
    missing = [(f, e) for f in range(faces) for e in range(n_edges)
               if (f, e) not in glued and (f, e) not in bdry]
    if missing:
        errs.append(f"edges neither glued nor boundary: {missing}")
    for p in punctures:
        if not point_in_face(p.pos, spec.cell_kind):
            errs.append(f"puncture at {p.pos} outside its face")
        if p.pos in spec.corners():
            errs.append("puncture coincides with a face corner")
    if errs:
        raise SchemaError("; ".join(errs))
    return spec


# ---------------------------------------------------------------------------
# gluing isometries and the corner-orbit structure
# ---------------------------------------------------------------------------

def _direction_rotation_index(d1: Pt, d2: Pt, cell_kind: str) -> Optional[int]:
    order = 6 if cell_kind == "triangulation" else 4
    for k in range(order):
        ex = rotation(k, cell_kind)(d1)
        if ex == d2:
            return k
    return None


def gluing_isometry(spec: SurfaceSpec, g: Gluing, forward: bool) -> Isometry:
    """Chart map across a gluing: face-a chart -> face-b chart (or reverse)."""
    (fa, ea), (fb, eb) = tuple(g.a), tuple(g.b)
    A, B = spec.edge_endpoints(ea)
    C, D = spec.edge_endpoints(eb)
    kind = spec.cell_kind
    if not g.flip:
        # orientation-preserving isometry with A -> D, B -> C
        d1 = (A[0] - B[0], A[1] - B[1])
        d2 = (D[0] - C[0], D[1] - C[1])
        k = _direction_rotation_index(d1, d2, kind)
        if k is None:
            raise SchemaError("gluing edges are not rotation-compatible")
        iso = translation(*C).compose(rotation(k, kind).compose(translation(-B[0], -B[1])))
    else:
        # orientation-reversing isometry with A -> C, B -> D
        refl = Isometry(Fraction(1), Fraction(0), Fraction(0), Fraction(-1),
                        Fraction(0), Fraction(0))
        d1 = refl((B[0] - A[0], B[1] - A[1]))
        d2 = (D[0] - C[0], D[1] - C[1])
        k = _direction_rotation_index(d1, d2, kind)
        if k is None:
            raise SchemaError("gluing edges are not reflection-compatible")
        iso = translation(*C).compose(
            rotation(k, kind).compose(refl.compose(translation(-A[0], -A[1]))))
    if not forward:
        iso = gluing_isometry(spec, Gluing(g.b, g.a, g.flip, g.U.conj().T), True)
    return iso


@dataclass
class _CornerOrbit:
    members: List[Tuple[int, int]]  # (face, corner index), fan order
    boundary_arcs: List[Tuple[int, int]]  # unglued arcs at the two fan ends
    holonomy: np.ndarray
    closed: bool


def _fan_step(spec: SurfaceSpec, table, face: int, k: int, direction: int):
    """Cross the gluing at one side of corner (face, k) of the fan.

    direction +1 crosses edge e_k (the edge starting at the corner), -1
    crosses e_{k-1}.  Returns (face', k', direction', U) or None if unglued.
    Orientation-reversing gluings (flip=True) reverse the walk direction.
    """
    n = spec.n_edges_per_face
    corners = spec.corners()
    e = k if direction == 1 else (k - 1) % n
    entry = table.get((face, e))
    if entry is None:
        return None
    g, fwd = entry
    iso = gluing_isometry(spec, g, fwd)
    dest_face = g.b[0] if fwd else g.a[0]
    img = iso(corners[k])
    if img not in corners:
        raise SchemaError("gluing does not map a corner to a corner")
    k2 = corners.index(img)
    U = g.U if fwd else g.U.conj().T
    d2 = -direction if g.flip else direction
    return dest_face, k2, d2, U


def corner_orbits(spec: SurfaceSpec) -> List[_CornerOrbit]:
    """Walk corner fans; returns orbits with fan-ordered members and holonomy."""
    n = spec.n_edges_per_face
    table = spec.glued_lookup()
    seen = set()
    orbits = []
    d = spec.bundle_rank
    limit = 2 * n * spec.face_count + 4

    for face in range(spec.face_count):
        for k in range(n):
            if (face, k) in seen:
                continue
            # walk backwards to find a fan end (or detect a closed fan)
            state = (face, k, 1)
            closed = False
            for _ in range(limit):
                nxt = _fan_step(spec, table, state[0], state[1], -state[2])
                if nxt is None:
                    break
                state = (nxt[0], nxt[1], -nxt[2])
                if state == (face, k, 1):
                    closed = True
                    break
            else:
                raise SchemaError("corner fan walk did not terminate")
            first = state
            first_arc = None
            if not closed:
                e = (first[1] - 1) % n if first[2] == 1 else first[1]
                first_arc = (first[0], e)
            members = [(first[0], first[1])]
            hol = np.eye(d, dtype=complex)
            here = first
            last_arc = None
            for _ in range(limit):
                nxt = _fan_step(spec, table, *here)
                if nxt is None:
                    e = here[1] if here[2] == 1 else (here[1] - 1) % n
                    last_arc = (here[0], e)
                    break
                hol = nxt[3] @ hol
                here = (nxt[0], nxt[1], nxt[2])
                if closed and (here[0], here[1], here[2]) == first:
                    break
                members.append((here[0], here[1]))
            seen.update(members)
            arcs = [] if closed else [first_arc, last_arc]
            orbits.append(_CornerOrbit(members, arcs, hol, closed))
    return orbits


def validate_flatness(spec: SurfaceSpec) -> List[str]:
    """Holonomy defect per interior corner and angle-audit report."""
    report = []
    for g in spec.gluings:
        try:
            _check_unitary(g.U, f"gluing {g.a}->{g.b} matrix")
        except NonUnitaryMatrix as exc:
            report.append(str(exc))
    for p in spec.punctures:
        try:
            _check_unitary(p.monodromy, "puncture monodromy")
        except NonUnitaryMatrix as exc:
            report.append(str(exc))
    for orb in corner_orbits(spec):
        if orb.closed:
            defect = np.abs(orb.holonomy - np.eye(spec.bundle_rank)).max()
            if defect > FLATNESS_TOL:
                report.append(
                    f"holonomy defect {defect:.6g} at interior corner orbit "
                    f"{orb.members}")
    # puncture positions distinct
    pts = [(p.face, p.pos) for p in spec.punctures]
    if len(set(pts)) != len(pts):
        report.append("coincident punctures")
    return report


# ---------------------------------------------------------------------------
# discretization
# ---------------------------------------------------------------------------

class _UnionFind:
    def __init__(self):
        self.parent = {}

    def add(self, x):
        self.parent.setdefault(x, x)

    def find(self, x):
        p = self.parent
        while p[x] != x:
            p[x] = p[p[x]]
            x = p[x]
        return x

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[max(ra, rb)] = min(ra, rb)


@dataclass
class DiscreteSurface:
    """Mesh-N graph of a glued surface with connections and bookkeeping."""

    spec: SurfaceSpec
    lat: LatticeSpec
    N: int
    d: int
    reps: List[List[Tuple[int, Pt]]]          # chart representatives per vertex
    canon: List[Tuple[int, Pt]]               # canonical representative
    rep_class: Dict[Tuple[int, Pt], int]
    rep_frame: Dict[Tuple[int, Pt], np.ndarray]
    active: np.ndarray                        # bool per vertex class
    tags: List[str]
    cell_weight: List[Fraction]               # volume-term weight per vertex
    lat_class: List[int]
    edges: List[Tuple[int, int, float, np.ndarray]]  # shared cells: (u, v, w, phi_{v->u})
    refl_edges: List[Tuple[int, int, float, np.ndarray]]  # one-sided row terms
    diag_extra: np.ndarray                    # Dirichlet reflection diagonal terms
    singularities: List[SingularityDescriptor]
    len_d: Fraction                           # Dirichlet boundary length (macroscopic)
    len_n: Fraction

    @property
    def delta(self) -> float:
        return self.lat.delta0 / self.N

    @property
    def n_active(self) -> int:
        return int(self.active.sum())

    @property
    def active_ids(self) -> np.ndarray:
        return np.nonzero(self.active)[0]

    @property
    def active_index(self) -> np.ndarray:
        """Map vertex class id -> row index among active vertices (-1 if removed)."""
        idx = np.full(len(self.active), -1, dtype=int)
        idx[self.active] = np.arange(self.n_active)
        return idx

    def w_diag(self) -> np.ndarray:
        """Operator diagonal coefficient per vertex class (w_x)."""
        w = self.diag_extra.copy()
        for (u, v, wt, _) in self.edges:
            w[u] += wt
            w[v] += wt
        for (u, v, wt, U) in self.refl_edges:
            if u == v:
                # self terms w (f - U f): diagonal w (1 - Re tr U / d)
                w[u] += wt * (1.0 - float(np.real(np.trace(U))) / self.d)
            else:
                w[u] += wt
        return w

    def rates(self):
        """Ordered jump rates r[(u, v)] of the walk (reflection rule verbatim)."""
        r: Dict[Tuple[int, int], float] = {}
        for (u, v, wt, _) in self.edges:
            r[(u, v)] = r.get((u, v), 0.0) + wt
            r[(v, u)] = r.get((v, u), 0.0) + wt
        for (u, v, wt, _) in self.refl_edges:
            if u != v:
                r[(u, v)] = r.get((u, v), 0.0) + wt
        return r

    def counts(self):
        """(|Omega^delta|, |bdry_D|, |bdry_N|, volume-weighted count)."""
        n_act = self.n_active
        vwc = sum((self.cell_weight[i] for i in self.active_ids), start=Fraction(0))
        return (n_act, self.len_d * self.N, self.len_n * self.N, vwc)

    def embedded_position(self, i: int, face: Optional[int] = None):
        from .exact import embed
        for (f, p) in self.reps[i]:
            if face is None or f == face:
                return f, embed(p, self.lat.cell_kind)
        return None

    def export_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["u", "v", "weight", "conn"])
        for (u, v, wt, U) in self.edges:
            w.writerow([u, v, repr(wt), json.dumps(
                [[[z.real, z.imag] for z in row] for row in U.tolist()])])
        return buf.getvalue()

    def export_header(self) -> dict:
        n, ld, ln, vwc = self.counts()
        return {
            "N": self.N,
            "delta": self.delta,
            "rank": self.d,
            "n_vertices": n,
            "len_dirichlet": float(ld),
            "len_neumann": float(ln),
            "volume_weighted_count": float(vwc),
            "singularities": [
                {"kind": s.kind, "angle_over_pi": [s.angle_over_pi.numerator,
                                                   s.angle_over_pi.denominator],
                 "bc": s.bc_pair, "vertex_at": s.vertex_at}
                for s in self.singularities],
        }


def _arc_param(spec: SurfaceSpec, e: int, p: Pt):
    """Parameter of p along face edge e, or None if p is not on the closed arc."""
    A, B = spec.edge_endpoints(e)
    if cross(A, B, p) != 0:
        return None
    if B[0] != A[0]:
        s = (p[0] - A[0]) / (B[0] - A[0])
    else:
        s = (p[1] - A[1]) / (B[1] - A[1])
    if _F0 <= s <= _F1:
        return s
    return None


def _cut_segment(spec: SurfaceSpec, lat: LatticeSpec, pn: Puncture, pos: Pt):
    """The monodromy cut: segment from the puncture to the face boundary."""
    dirs = {"+x": (_F1, _F0), "-x": (-_F1, _F0),
            "+y": (_F0, _F1), "-y": (_F0, -_F1)}
    if pn.cut not in dirs:
        raise SchemaError(f"unknown cut direction {pn.cut!r}")
    d = dirs[pn.cut]
    far = (pos[0] + 4 * d[0], pos[1] + 4 * d[1])
    best = None
    for e in range(spec.n_edges_per_face):
        A, B = spec.edge_endpoints(e)
        res = segment_line_param(pos, far, A, B)
        if res is None:
            continue
        t, u = res
        if t > 0 and _F0 <= u <= _F1:
            if best is None or t < best[0]:
                best = (t, (pos[0] + t * (far[0] - pos[0]),
                            pos[1] + t * (far[1] - pos[1])))
    if best is None:
        raise SchemaError("puncture cut does not reach the face boundary")
    return (pos, best[1])


def discretize(spec: SurfaceSpec, lat: LatticeSpec, N: int) -> DiscreteSurface:
    """Build the mesh-N discrete surface graph."""
    if spec.cell_kind != lat.cell_kind:
        raise SchemaError(
            f"face_kind {spec.face_kind} needs a {spec.cell_kind} lattice")
    if N < 1:
        raise MeshIncompatible("N must be >= 1")
    for b in spec.boundary:
        if b.split is not None and N % b.split[0].denominator != 0:
            raise MeshIncompatible(
                f"split fraction {b.split[0]} requires q | N, got N={N}")
    flat = validate_flatness(spec)
    if flat:
        raise SchemaError("surface is not flat: " + "; ".join(flat))

    d = spec.bundle_rank
    kind = spec.cell_kind
    table = spec.glued_lookup()
    bdry = spec.boundary_lookup()
    corners = spec.corners()
    n_edges = spec.n_edges_per_face

    # -- punctures: snap to anchored lattice-cell positions -----------------
    cut_segments: Dict[int, List[Tuple[Pt, Pt, np.ndarray]]] = {}
    snapped_punctures = []
    anchor = _cell_anchor(lat)
    for pn in spec.punctures:
        pos = _snap_puncture(lat, N, pn.pos, anchor)
        if not point_in_face(pos, kind) or any(_arc_param(spec, e, pos) is not None
                                               for e in range(n_edges)):
            raise PunctureOnEdge(f"snapped puncture {pos} is not interior")
        seg = _cut_segment(spec, lat, pn, pos)
        cut_segments.setdefault(pn.face, []).append(
            (seg[0], seg[1], np.asarray(pn.monodromy, dtype=complex)))
        snapped_punctures.append((pn, pos))

    # -- chart points --------------------------------------------------------
    pts = points_in_face(lat, N)
    face_pts = {f: pts for f in range(spec.face_count)}
    all_reps = [(f, q) for f in range(spec.face_count) for (q, _) in pts]
    lat_class_of = {}
    for (q, ci) in pts:
        lat_class_of[q] = ci

    uf = _UnionFind()
    for r in all_reps:
        uf.add(r)
    rep_set = set(all_reps)

    # identification edges across gluings, with connection matrices
    ident_edges = []
    iso_cache: Dict[Tuple[int, int], Isometry] = {}

    def iso_for(face, e):
        if (face, e) not in iso_cache:
            g, fwd = table[(face, e)]
            iso_cache[(face, e)] = gluing_isometry(spec, g, fwd)
        return iso_cache[(face, e)]

    for (face, e), (g, fwd) in table.items():
        dest = g.b[0] if fwd else g.a[0]
        U = g.U if fwd else g.U.conj().T
        iso = iso_for(face, e)
        for (q, _) in pts:
            if _arc_param(spec, e, q) is None:
                continue
            img = iso(q)
            src, dst = (face, q), (dest, img)
            if dst not in rep_set:
                raise SchemaError(
                    f"gluing does not map lattice point {src} to a lattice point")
            uf.union(src, dst)
            ident_edges.append((src, dst, U))

    # -- vertex classes ------------------------------------------------------
    root_of = {r: uf.find(r) for r in all_reps}
    classes: Dict[Tuple[int, Pt], int] = {}
    reps: List[List[Tuple[int, Pt]]] = []
    canon: List[Tuple[int, Pt]] = []
    for r in sorted(all_reps):
        root = root_of[r]
        if root not in classes:
            classes[root] = len(reps)
            reps.append([])
            canon.append(r)
        reps[classes[root]].append(r)
    rep_class = {r: classes[root_of[r]] for r in all_reps}
    nv = len(reps)

    # frames by BFS over identification edges
    rep_frame: Dict[Tuple[int, Pt], np.ndarray] = {}
    adj: Dict[Tuple[int, Pt], List[Tuple[Tuple[int, Pt], np.ndarray]]] = {}
    for (src, dst, U) in ident_edges:
        adj.setdefault(src, []).append((dst, U))
        adj.setdefault(dst, []).append((src, U.conj().T))
    for c in range(nv):
        start = canon[c]
        rep_frame[start] = np.eye(d, dtype=complex)
        queue = [start]
        while queue:
            cur = queue.pop()
            for (nxt, U) in adj.get(cur, []):
                if nxt not in rep_frame:
                    rep_frame[nxt] = U @ rep_frame[cur]
                    queue.append(nxt)

    # -- boundary tagging ----------------------------------------------------
    is_dirichlet = np.zeros(nv, dtype=bool)
    is_neumann = np.zeros(nv, dtype=bool)
    for (f, q) in all_reps:
        for e in range(n_edges):
            if (f, e) in table or (f, e) not in bdry:
                continue
            s = _arc_param(spec, e, q)
            if s is None:
                continue
            bc = bdry[(f, e)].bc_at(s)
            c = rep_class[(f, q)]
            if bc == "D":
                is_dirichlet[c] = True
            else:
                is_neumann[c] = True
    active = ~is_dirichlet

    # -- per-vertex cell weights, lattice classes, tags ----------------------
    cell_weight = [Fraction(0)] * nv
    lat_class = [0] * nv
    corner_w = Fraction(1, 4) if spec.face_kind == "square" else Fraction(1, 6)
    at_corner = np.zeros(nv, dtype=bool)
    on_arc = np.zeros(nv, dtype=bool)
    for (f, q) in all_reps:
        c = rep_class[(f, q)]
        lat_class[c] = lat_class_of[q]
        if q in corners:
            cell_weight[c] += corner_w
            at_corner[c] = True
        elif any(_arc_param(spec, e, q) is not None for e in range(n_edges)):
            cell_weight[c] += Fraction(1, 2)
            on_arc[c] = True
        else:
            cell_weight[c] += Fraction(1)

    # -- singularity registry -------------------------------------------------
    singularities = _build_registry(spec, snapped_punctures)
    _register_cut_endpoint_defects(
        spec, singularities,
        [(face, seg[1], seg[2])
         for face, segs in cut_segments.items() for seg in segs])

    tags = []
    tip_classes = set()
    for s in singularities:
        if s.kind == "cone":
            for (f, p) in s.reps:
                c = rep_class.get((f, p))
                if c is not None:
                    s.vertex_at = c
                    tip_classes.add(c)
    for c in range(nv):
        if c in tip_classes:
            tags.append("cone_tip")
        elif is_dirichlet[c]:
            tags.append("dirichlet_boundary")
        elif is_neumann[c]:
            tags.append("neumann_boundary")
        elif at_corner[c]:
            tags.append("face_corner")
        elif on_arc[c]:
            tags.append("face_edge")
        else:
            tags.append("interior")

    # -- edges -----------------------------------------------------------------
    builder = _EdgeBuilder(spec, lat, N, table, bdry, iso_for, rep_set, rep_class,
                           rep_frame, active, cut_segments, d)
    for f in range(spec.face_count):
        for (q, ci) in face_pts[f]:
            for (cj, off, w) in lat.edges_at(ci):
                dvx = (lat.position(cj, off)[0] - lat.vertices[ci][0]) / N
                dvy = (lat.position(cj, off)[1] - lat.vertices[ci][1]) / N
                z = (q[0] + dvx, q[1] + dvy)
                builder.process(f, q, z, w)
    (edges_two, edges_one), diag_extra = builder.finish()

    ds = DiscreteSurface(
        spec=spec, lat=lat, N=N, d=d, reps=reps, canon=canon,
        rep_class=rep_class, rep_frame=rep_frame, active=active, tags=tags,
        cell_weight=cell_weight, lat_class=lat_class, edges=edges_two,
        refl_edges=edges_one, diag_extra=diag_extra, singularities=singularities,
        len_d=_boundary_length(spec, "D"), len_n=_boundary_length(spec, "N"))

    # anchors: nearest active vertex per singularity
    for s in ds.singularities:
        best = None
        for (f, p) in s.reps:
            for (fr, q) in all_reps:
                if fr != f or not active[rep_class[(fr, q)]]:
                    continue
                dd = dist2(p, q, kind)
                if best is None or dd < best[0]:
                    best = (dd, rep_class[(fr, q)])
        s.anchor = None if best is None else best[1]
    return ds


def _cell_anchor(lat: LatticeSpec) -> Pt:
    """A fixed fundamental-domain point away from vertices and edges.

    Used to place punctures: the snapped puncture is always the N-scaling of
    this anchor, as the asymptotics require a mesh-independent local position.
    """
    if lat.name == "square":
        return (Fraction(1, 2), Fraction(1, 2))
    if lat.name == "shifted_square":
        return (_F0, _F0)
    if lat.name == "triangular":
        return (Fraction(1, 2), Fraction(1, 6))  # up-triangle centroid
    if lat.name == "hexagonal":
        return (_F0, _F0)  # hexagon center
    return (Fraction(1, 3), Fraction(1, 5))


def _snap_puncture(lat: LatticeSpec, N: int, nominal: Pt, anchor: Pt) -> Pt:
    """Nearest point to `nominal` of the form (anchor + lattice vector)/N."""
    from .lattice import periods
    p1, p2 = periods(lat.cell_kind)
    # solve nominal * N - anchor = m p1 + n p2 approximately
    tx = nominal[0] * N - anchor[0]
    ty = nominal[1] * N - anchor[1]
    if lat.cell_kind == "quadrangulation":
        m0, n0 = round(tx), round(ty)
    else:
        n0 = round(2 * ty)
        m0 = round(tx - Fraction(n0, 2))
    best = None
    for dm in (-1, 0, 1):
        for dn in (-1, 0, 1):
            m, n = m0 + dm, n0 + dn
            q = (Fraction(anchor[0] + m * p1[0] + n * p2[0], N),
                 Fraction(anchor[1] + m * p1[1] + n * p2[1], N))
            dd = dist2(q, nominal, lat.cell_kind)
            if best is None or dd < best[0]:
                best = (dd, q)
    return best[1]


def _boundary_length(spec: SurfaceSpec, which: str) -> Fraction:
    total = Fraction(0)
    for b in spec.boundary:
        if b.split is None:
            if b.bc == which:
                total += 1
        else:
            frac, before, after = b.split
            if before == which:
                total += frac
            if after == which:
                total += 1 - frac
    return total


def _build_registry(spec: SurfaceSpec, snapped_punctures) -> List[SingularityDescriptor]:
    sing: List[SingularityDescriptor] = []
    corners = spec.corners()
    bdry = spec.boundary_lookup()
    for orb in corner_orbits(spec):
        alpha = len(orb.members) * spec.face_angle  # alpha / pi
        reps = [(f, corners[k]) for (f, k) in orb.members]
        if orb.closed:
            if alpha != 2:
                sing.append(SingularityDescriptor("cone", alpha, reps=reps))
        else:
            (f1, e1), (f2, e2) = orb.boundary_arcs
            b1, b2 = bdry[(f1, e1)], bdry[(f2, e2)]
            # bc at the corner end of each arc
            A1, _ = spec.edge_endpoints(e1)
            corner_pt = reps[0][1] if reps[0][0] == f1 else None
            for (f, k) in orb.members:
                if f == f1:
                    corner_pt = corners[k]
            s1 = _arc_param(spec, e1, corner_pt)
            bc1 = b1.bc_at(s1)
            cpt2 = None
            for (f, k) in orb.members:
                if f == f2:
                    cpt2 = corners[k]
            s2 = _arc_param(spec, e2, cpt2)
            bc2 = b2.bc_at(s2)
            if alpha == 1 and bc1 == bc2:
                continue  # straight boundary, not a corner
            sing.append(SingularityDescriptor("corner", alpha, bc_pair=(bc1, bc2),
                                              reps=reps))
    # bc-change points interior to a side are corners of angle pi
    for b in spec.boundary:
        if b.split is not None:
            frac, before, after = b.split
            if before != after:
                A, B = spec.edge_endpoints(b.edge)
                pt = (A[0] + frac * (B[0] - A[0]), A[1] + frac * (B[1] - A[1]))
                sing.append(SingularityDescriptor(
                    "corner", Fraction(1), bc_pair=(before, after),
                    reps=[(b.face, pt)]))
    for (pn, pos) in snapped_punctures:
        sing.append(SingularityDescriptor(
            "puncture", Fraction(2), monodromy=np.asarray(pn.monodromy, complex),
            reps=[(pn.face, pos)]))
    return sing


def _register_cut_endpoint_defects(spec: SurfaceSpec, sing, cut_far_points):
    """Cuts ending on a glued edge leave a compensating flux defect there.

    The plaquette holonomies of a closed surface multiply to the identity, so
    a monodromy-M puncture forces a second defect with monodromy M^{-1} in the
    plaquette at the far end of the cut; it only disappears when the cut ends
    on (removed/reflected) boundary.  The registry records it so theorem-C
    bookkeeping matches the constructed connection.
    """
    table = spec.glued_lookup()
    for (face, endpoint, M) in cut_far_points:
        for e in range(spec.n_edges_per_face):
            if _arc_param(spec, e, endpoint) is not None and (face, e) in table:
                if np.allclose(M, np.eye(M.shape[0])):
                    break
                sing.append(SingularityDescriptor(
                    "puncture", Fraction(2), monodromy=M.conj().T,
                    reps=[(face, endpoint)]))
                break


class _EdgeBuilder:
    """Turns lattice edges in face charts into surface graph edges.

    Two-sided edges come from shared 1-cells (deduplicated by canonical cell
    key); reflected boundary edges are one-sided row terms per the extension
    rule f(z) = -+ f(z*).
    """

    def __init__(self, spec, lat, N, table, bdry, iso_for, rep_set, rep_class,
                 rep_frame, active, cut_segments, d):
        self.spec, self.lat, self.N = spec, lat, N
        self.table, self.bdry = table, bdry
        self._iso_for = iso_for
        self.rep_set, self.rep_class = rep_set, rep_class
        self.rep_frame, self.active = rep_frame, active
        self.cuts = cut_segments
        self.d = d
        self.seen = set()
        self.edges: List[Tuple[int, int, float, np.ndarray]] = []
        self.one_sided: List[Tuple[int, int, float, np.ndarray]] = []
        self.diag_extra = np.zeros(len(active))
        self.kind = spec.cell_kind

    # -- cut factors ---------------------------------------------------------

    def _cut_factor(self, face: int, a: Pt, b: Pt) -> np.ndarray:
        X = np.eye(self.d, dtype=complex)
        for (p, q, M) in self.cuts.get(face, []):
            if segments_cross(a, b, p, q):
                if cross(p, q, a) < 0:
                    X = M @ X
                else:
                    X = M.conj().T @ X
        return X

    # -- exit-arc resolution ---------------------------------------------------

    def _exit_arc(self, face: int, a: Pt, b: Pt):
        """Arc (edge index) through which segment a->b leaves the face.

        Requires: a in the closed face, b strictly outside.  Returns
        (e, crossing point, arc parameter).  Raises UnreflectableEdge when no
        single arc-line strictly separates b.
        """
        hits = []
        n = self.spec.n_edges_per_face
        for e in range(n):
            A, B = self.spec.edge_endpoints(e)
            # interior is on the left of A->B; b must be strictly right
            if cross(A, B, b) >= 0:
                continue
            res = segment_line_param(a, b, A, B)
            if res is None:
                continue
            t, u = res
            if _F0 <= u <= _F1 and _F0 <= t < _F1:
                hits.append((t, e, u))
        if not hits:
            raise UnreflectableEdge(f"no exit arc for segment {a} -> {b}")
        hits.sort()
        if len(hits) > 1 and hits[0][0] == hits[1][0]:
            raise UnreflectableEdge(
                f"segment {a} -> {b} exits through a corner ambiguously")
        t, e, u = hits[0]
        c = (a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1]))
        return e, c, u

    # -- main entry ---------------------------------------------------------------

    def process(self, f: int, q: Pt, z: Pt, w: float):
        if point_in_face(z, self.kind):
            if not q < z:
                return
            self._in_face(f, q, z, w)
        else:
            self._crossing(f, q, z, w)

    def _in_face(self, f, q, z, w):
        mid = ((q[0] + z[0]) / 2, (q[1] + z[1]) / 2)
        cands = [(f, mid)]
        for e in range(self.spec.n_edges_per_face):
            if (f, e) in self.table and _arc_param(self.spec, e, mid) is not None:
                iso, dest = self._glue(f, e)
                cands.append((dest, iso(mid)))
        key = min(cands)
        if key in self.seen:
            return
        self.seen.add(key)
        X = self._cut_factor(f, q, z)
        self._record_two(f, q, f, z, w, X)

    def _glue(self, f, e):
        g, fwd = self.table[(f, e)]
        dest = g.b[0] if fwd else g.a[0]
        return self._iso_for(f, e), dest

    def _glue_matrix(self, f, e):
        g, fwd = self.table[(f, e)]
        return g.U if fwd else g.U.conj().T

    def _germ_key(self, f, q, z):
        """Canonical identity of the outgoing half-edge germ at q.

        Chart descriptions of the same germ are related by gluing maps whose
        seam passes through q; deduplicating bounced (one-sided) edges by this
        key prevents double counting at straight face-junction boundary
        vertices.
        """
        mid = ((q[0] + z[0]) / 2, (q[1] + z[1]) / 2)
        cands = [(f, mid)]
        for e in range(self.spec.n_edges_per_face):
            if (f, e) in self.table and _arc_param(self.spec, e, q) is not None:
                iso, dest = self._glue(f, e)
                cands.append((dest, iso(mid)))
        return tuple(sorted(cands))

    def _crossing(self, f, q, z, w):
        d = self.d
        G_total = np.eye(d, dtype=complex)
        cur_f, cur_a, cur_b, cur_q = f, q, z, q
        cur_mid = ((q[0] + z[0]) / 2, (q[1] + z[1]) / 2)
        cands = []
        consumed = False
        bounced = False
        start_rep = (f, q)
        u_class = self.rep_class[start_rep]
        germ = ("refl", u_class, self._germ_key(f, q, z))
        for _ in range(12):
            if point_in_face(cur_b, self.kind):
                if bounced:
                    if germ in self.seen:
                        return
                    self.seen.add(germ)
                self._land(f, q, w, G_total, cur_f, cur_a, cur_b, cur_q,
                           cur_mid, cands, consumed, bounced, start_rep, u_class)
                return
            e, c, u = self._exit_arc(cur_f, cur_a, cur_b)
            if (cur_f, e) in self.table:
                if c != cur_a:
                    consumed = True
                    cands.append((cur_f, cur_mid))
                G_total = self._glue_matrix(cur_f, e) @ (
                    self._cut_factor(cur_f, cur_a, c) @ G_total)
                iso, dest = self._glue(cur_f, e)
                cur_a, cur_b = iso(c), iso(cur_b)
                cur_mid, cur_q = iso(cur_mid), iso(cur_q)
                cur_f = dest
            else:
                # unglued: reflect the remainder across the arc line
                if not self.active[u_class]:
                    return  # reflected terms live in the (removed) source row
                bc = self.bdry[(cur_f, e)].bc_at(u)
                sign = 1.0 if bc == "N" else -1.0
                A, B = self.spec.edge_endpoints(e)
                refl = reflection_across_points(A, B, self.kind)
                G_total = sign * (self._cut_factor(cur_f, cur_a, c) @ G_total)
                cur_b = refl(cur_b)
                cur_mid = refl(cur_mid)
                cur_a = c
                bounced = True
        raise UnreflectableEdge(f"edge from {q} in face {f} crosses too many arcs")

    def _land(self, f, q, w, G_total, cur_f, cur_a, cur_b, cur_q, cur_mid,
              cands, consumed, bounced, start_rep, u_class):
        G_total = self._cut_factor(cur_f, cur_a, cur_b) @ G_total
        if bounced:
            if cur_b == cur_q:
                # reflected back onto the source vertex: the row term
                # w (f(u) - s f(u)) becomes a one-sided self edge
                if self.active[u_class]:
                    T = self.rep_frame[start_rep]
                    U = T.conj().T @ G_total.conj().T @ T
                    self.one_sided.append((u_class, u_class, w, U))
                return
            if (cur_f, cur_b) not in self.rep_set:
                raise UnreflectableEdge(
                    f"reflected endpoint {cur_b} is not a lattice vertex")
            v_rep = (cur_f, cur_b)
            v_class = self.rep_class[v_rep]
            if not self.active[u_class]:
                return
            if not self.active[v_class]:
                self.diag_extra[u_class] += w
                return
            U = (self.rep_frame[start_rep].conj().T
                 @ G_total.conj().T @ self.rep_frame[v_rep])
            self.one_sided.append((u_class, v_class, w, U))
            return
        if not consumed and point_in_face(cur_q, self.kind):
            # zero length consumed before entering this chart: the edge is an
            # in-chart cell there and is enumerated by that face's in-face pass
            return
        cands.append((cur_f, cur_mid))
        if (cur_f, cur_b) not in self.rep_set:
            raise UnreflectableEdge(
                f"glued edge endpoint {cur_b} is not a lattice vertex")
        key = ("x", min(cands), max(cands))
        if key in self.seen:
            return
        self.seen.add(key)
        self._record_two(f, q, cur_f, cur_b, w, G_total, from_rep=start_rep)

    def _record_two(self, f_u, q_u, f_v, q_v, w, G_total, from_rep=None):
        u_rep = from_rep or (f_u, q_u)
        v_rep = (f_v, q_v)
        u_class, v_class = self.rep_class[u_rep], self.rep_class[v_rep]
        au, av = self.active[u_class], self.active[v_class]
        if not au and not av:
            return
        if au and not av:
            self.diag_extra[u_class] += w
            return
        if av and not au:
            self.diag_extra[v_class] += w
            return
        # phi_{v -> u} pulls the v value back through the chart chain into u's frame
        U = (self.rep_frame[u_rep].conj().T
             @ G_total.conj().T @ self.rep_frame[v_rep])
        self.edges.append((u_class, v_class, w, U))

    def finish(self):
        return (self.edges, self.one_sided), self.diag_extra


# ---------------------------------------------------------------------------
# standard surface documents
# ---------------------------------------------------------------------------

def surface_document(name: str, **kw) -> dict:
    """JSON documents for the standard test surfaces."""
    if name == "torus":
        doc = {"face_kind": "square", "faces": 1, "rank": kw.get("rank", 1),
               "gluings": [{"a": [0, 0], "b": [0, 2], "flip": False},
                           {"a": [0, 1], "b": [0, 3], "flip": False}],
               "boundary": [], "punctures": []}
    elif name == "punctured_torus":
        m = kw.get("monodromy", -1.0)
        if np.isscalar(m):
            M = [[[float(np.real(m)), float(np.imag(m))]]]
        else:
            M = [[[float(z.real), float(z.imag)] for z in row] for row in np.asarray(m)]
        doc = surface_document("torus", rank=kw.get("rank", 1))
        doc["punctures"] = [{"face": 0, "pos": kw.get("pos", [1, 1, 2]),
                             "M": M, "cut": kw.get("cut", "-x")}]
    elif name == "pillowcase":
        doc = {"face_kind": "square", "faces": 2, "rank": kw.get("rank", 1),
               "gluings": [{"a": [0, 1], "b": [1, 3], "flip": False},
                           {"a": [0, 3], "b": [1, 1], "flip": False},
                           {"a": [0, 0], "b": [1, 0], "flip": False},
                           {"a": [0, 2], "b": [1, 2], "flip": False}],
               "boundary": [], "punctures": []}
    elif name == "square":
        # unit square with per-side boundary conditions, sides S, E, N, W
        bcs = kw.get("bcs", "DDDD")
        doc = {"face_kind": "square", "faces": 1, "rank": 1, "gluings": [],
               "boundary": [{"face": 0, "edge": e, "bc": bcs[e]} for e in range(4)],
               "punctures": []}
    elif name == "punctured_square":
        m = kw.get("monodromy", -1.0)
        doc = surface_document("square", bcs=kw.get("bcs", "DDDD"))
        doc["punctures"] = [{"face": 0, "pos": kw.get("pos", [1, 1, 2]),
                             "M": [[[float(np.real(m)), float(np.imag(m))]]],
                             "cut": kw.get("cut", "-x")}]
    elif name == "cylinder":
        bcs = kw.get("bcs", "DD")
        doc = {"face_kind": "square", "faces": 1, "rank": kw.get("rank", 1),
               "gluings": [{"a": [0, 1], "b": [0, 3], "flip": False}],
               "boundary": [{"face": 0, "edge": 0, "bc": bcs[0]},
                            {"face": 0, "edge": 2, "bc": bcs[1]}],
               "punctures": []}
    elif name == "triangle":
        bcs = kw.get("bcs", "DDD")
        doc = {"face_kind": "triangle", "faces": 1, "rank": 1, "gluings": [],
               "boundary": [{"face": 0, "edge": e, "bc": bcs[e]} for e in range(3)],
               "punctures": []}
    elif name == "tri_torus":
        # two equilateral triangles glued into the hexagonal-modulus torus
        doc = {"face_kind": "triangle", "faces": 2, "rank": kw.get("rank", 1),
               "gluings": [{"a": [0, 0], "b": [1, 0], "flip": False},
                           {"a": [0, 1], "b": [1, 1], "flip": False},
                           {"a": [0, 2], "b": [1, 2], "flip": False}],
               "boundary": [], "punctures": []}
    else:
        raise SchemaError(f"unknown surface {name!r}")
    return doc

"""Discrete model surfaces: plane, half-plane, cone, wedge, punctured plane.

Models live at the delta0 lattice scale; a mesh-N model truncated at
macroscopic radius R occupies lattice radius R*N.  Cones and wedges are fans
of beta-sectors (beta = pi/2 or pi/3) glued with the same single-seam-cell
convention as surface discretization, so surface and model kernels cancel
exactly near tips.

Two kernel engines:

* exact method of images (ImageKernel) over a finite lattice-symmetry group:
  valid for half-planes, matching-bc wedges of angle pi/2 (pi/3 on
  triangulations), the mixed pi/2 wedge, and tipless cones of angle 2 pi/m
  with a lattice rotation of order m.  Everything reduces to plane-kernel
  values and their dt/t integrals.
* an explicit truncated graph with Dirichlet far boundary: kernels from a
  dense eigensolve (small n) or sparse expm sampling on a geometric time
  grid, with escape-probability certificates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Dict, List, Optional, Tuple

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import (
    AngleNotRepresentable,
    TailNotDecaying,
    TruncationBudgetExceeded,
    UnreflectableEdge,
)
from .exact import Pt, reflection, rotation
from .lattice import LatticeSpec
from .planekernel import plane_kernel_for
from .special import small_time_cutoff

_F0 = Fraction(0)


@dataclass(frozen=True)
class ModelKind:
    """A local model surface."""

    variant: str  # 'plane' | 'halfplane' | 'cone' | 'wedge' | 'punctured'
    alpha_over_pi: Fraction = Fraction(2)
    bc: Tuple[str, ...] = ()           # halfplane: (b,); wedge: (right, left)
    monodromy: Optional[tuple] = None  # flattened complex matrix
    rank: int = 1

    @property
    def alpha(self) -> float:
        return math.pi * float(self.alpha_over_pi)

    def monodromy_matrix(self) -> np.ndarray:
        if self.monodromy is None:
            return np.eye(self.rank, dtype=complex)
        return np.array(self.monodromy, dtype=complex).reshape(self.rank, self.rank)

    def label(self) -> str:
        if self.variant in ("plane", "punctured"):
            return self.variant
        extra = "".join(self.bc)
        return f"{self.variant}({self.alpha_over_pi}pi{',' + extra if extra else ''})"


def plane() -> ModelKind:
    return ModelKind("plane")


def halfplane(bc: str) -> ModelKind:
    return ModelKind("halfplane", Fraction(1), (bc,))


def cone_model(alpha_over_pi) -> ModelKind:
    return ModelKind("cone", Fraction(alpha_over_pi))


def wedge_model(alpha_over_pi, bc_right: str, bc_left: str) -> ModelKind:
    return ModelKind("wedge", Fraction(alpha_over_pi), (bc_right, bc_left))


def punctured_model(M) -> ModelKind:
    M = np.atleast_2d(np.asarray(M, dtype=complex))
    return ModelKind("punctured", Fraction(2),
                     monodromy=tuple(M.ravel().tolist()), rank=M.shape[0])


def _beta(lat: LatticeSpec) -> Fraction:
    """Sector angle as a fraction of pi."""
    return Fraction(1, 3) if lat.cell_kind == "triangulation" else Fraction(1, 2)


def model_sectors(kind: ModelKind, lat: LatticeSpec) -> int:
    if kind.variant in ("plane", "punctured"):
        alpha = Fraction(2)
    elif kind.variant == "halfplane":
        alpha = Fraction(1)
    else:
        alpha = kind.alpha_over_pi
    k = alpha / _beta(lat)
    if k.denominator != 1 or k < 1:
        raise AngleNotRepresentable(
            f"angle {kind.alpha_over_pi}*pi needs multiples of {_beta(lat)}*pi")
    return int(k)


# ---------------------------------------------------------------------------
# exact images
# ---------------------------------------------------------------------------

def exact_images(kind: ModelKind, lat: LatticeSpec, x: Pt, tip_vertex: bool = False):
    """[(coefficient, target point)] for the fiber of x, or None if unavailable.

    Covers half-planes, cones 2 pi/m (tipless only: a tip vertex breaks the
    quotient identification of seam cells), and dihedral wedges whose sign
    representation is consistent.  Coefficients are characters; conflicting
    characters at a fixed target give coefficient 0 (Dirichlet-type fixed
    points, where sections vanish).
    """
    order = lat.symmetry_order
    kindv = kind.variant
    if kindv == "plane":
        return [(1.0, x)]
    targets: Dict[Pt, float] = {}

    def visit(p: Pt, chi: float):
        if p in targets:
            if abs(targets[p] - chi) > 1e-12:
                targets[p] = 0.0
        else:
            targets[p] = chi

    if kindv == "halfplane":
        s = 1.0 if kind.bc[0] == "N" else -1.0
        visit(x, 1.0)
        visit(reflection(0, lat.cell_kind)(x), s)
    elif kindv == "cone":
        if tip_vertex:
            return None
        m = Fraction(2) / kind.alpha_over_pi
        step = kind.alpha_over_pi / _beta(lat)
        if m.denominator != 1 or step.denominator != 1:
            return None
        for j in range(int(m)):
            visit(rotation(int(step) * j % order, lat.cell_kind)(x), 1.0)
    elif kindv == "wedge":
        if tip_vertex:
            return None
        c = kind.alpha_over_pi / _beta(lat)
        m = Fraction(1) / kind.alpha_over_pi  # pi / alpha
        if c.denominator != 1 or m.denominator != 1:
            return None
        c, m = int(c), int(m)
        s_r = 1.0 if kind.bc[0] == "N" else -1.0
        s_l = 1.0 if kind.bc[1] == "N" else -1.0
        if s_r != s_l and m % 2 == 1:
            return None
        for j in range(m):
            visit(rotation(2 * c * j % order, lat.cell_kind)(x),
                  float((s_r * s_l) ** j))
            # reflection across the line at angle alpha*j alternates characters
            visit(reflection(c * j % order, lat.cell_kind)(x),
                  s_r if j % 2 == 0 else s_l)
    elif kindv == "punctured":
        if np.allclose(kind.monodromy_matrix(), np.eye(kind.rank)):
            return [(1.0, x)]
        return None
    else:
        return None
    return [(chi, p) for p, chi in targets.items()]


# ---------------------------------------------------------------------------
# truncated model graphs
# ---------------------------------------------------------------------------

def _norm2(p: Pt, lat: LatticeSpec) -> Fraction:
    """Exact squared embedded norm (s-coordinates scale y by sqrt(3))."""
    mult = 3 if lat.cell_kind == "triangulation" else 1
    return p[0] * p[0] + mult * p[1] * p[1]


def _in_sector(p: Pt, lat: LatticeSpec) -> bool:
    """Closed first sector 0 <= arg <= beta (beta = pi/2 or pi/3)."""
    x, y = p
    if y < 0:
        return False
    if lat.cell_kind == "triangulation":
        return y <= x  # arg <= pi/3 in s-coordinates
    return x >= 0


def _on_top_ray(p: Pt, lat: LatticeSpec) -> bool:
    x, y = p
    if lat.cell_kind == "triangulation":
        return y == x and y > 0
    return x == 0 and y > 0


def _resolve_fan(lat: LatticeSpec, k: int, closed: bool, bc: Tuple[str, str],
                 j: int, p: Pt, max_bounce: int = 16):
    """Canonical fan chart of a raw (sector, point): (sector', point', sign).

    Rotates across interior seams (sector wraps modulo k for closed fans) and
    reflects at wedge walls, accumulating the boundary sign.  Points on a
    seam's top ray are pushed into the next sector's bottom ray.
    """
    sign = 1.0
    for _ in range(max_bounce):
        x, y = p
        below = y < 0
        above = (y > x) if lat.cell_kind == "triangulation" else (x < 0)
        if not below and not above:
            if closed:
                j %= k
                if _on_top_ray(p, lat):
                    return ((j + 1) % k, rotation(-1, lat.cell_kind)(p), sign)
                return (j, p, sign)
            if 0 <= j < k:
                if _on_top_ray(p, lat) and j < k - 1:
                    return (j + 1, rotation(-1, lat.cell_kind)(p), sign)
                if _on_top_ray(p, lat) and j == k - 1:
                    return (j, p, sign)
                return (j, p, sign)
            # sector index escaped the wedge: fall through to a wall bounce
            above = j >= k
        if closed:
            if above:
                p, j = rotation(-1, lat.cell_kind)(p), j + 1
            else:
                p, j = rotation(1, lat.cell_kind)(p), j - 1
            continue
        if above:
            if j + 1 < k:
                p, j = rotation(-1, lat.cell_kind)(p), j + 1
            else:
                # left wall at angle beta of the last sector
                sign *= 1.0 if bc[1] == "N" else -1.0
                p = reflection(1, lat.cell_kind)(p)
        else:
            if j - 1 >= 0:
                p, j = rotation(1, lat.cell_kind)(p), j - 1
            else:
                sign *= 1.0 if bc[0] == "N" else -1.0
                p = reflection(0, lat.cell_kind)(p)
    raise UnreflectableEdge("fan resolution did not terminate")


@dataclass
class TruncatedModel:
    """Radius-R truncation of a model surface with Dirichlet far boundary."""

    kind: ModelKind
    lat: LatticeSpec
    N: int
    R: float
    points: List[Tuple[int, Pt]]     # canonical (sector, point), delta0 scale
    index: Dict[Tuple[int, Pt], int]
    basepoint: int
    H: sp.csr_matrix                 # Hermitian, size d*n
    w_max: float
    tip_index: Optional[int]
    quotient_tip: bool

    def __post_init__(self):
        self._eig = None
        self._samples = {}

    @property
    def n(self) -> int:
        return len(self.points)

    @property
    def d(self) -> int:
        return self.kind.rank

    def lattice_radius(self) -> float:
        return self.R * self.N

    def certified_twalk(self, eps: float = 1e-10) -> float:
        """Largest walk time with the escape-probability bound below eps."""
        bx = self.points[self.basepoint][1]
        dist = self.lattice_radius() - math.sqrt(float(_norm2(bx, self.lat)))
        if dist <= 0:
            raise TruncationBudgetExceeded("basepoint outside the truncation")
        return dist * dist / (2.0 * self.lat.delta0 ** 2 * math.log(1.0 / eps))

    def require_certified(self, t_walk: float, eps: float = 1e-10):
        if t_walk > self.certified_twalk(eps):
            raise TruncationBudgetExceeded(
                f"walk time {t_walk:.3g} beyond certified "
                f"{self.certified_twalk(eps):.3g} at eps={eps}")

    def eig(self):
        if self._eig is None:
            evals, vecs = np.linalg.eigh(self.H.toarray())
            self._eig = (evals, vecs)
        return self._eig

    def diag_trace(self, t, vertex: Optional[int] = None) -> np.ndarray:
        """Tr P(x, x, t) at the basepoint (or given vertex), vectorized in t."""
        ts = np.atleast_1d(np.asarray(t, dtype=float))
        x = self.basepoint if vertex is None else vertex
        d = self.d
        if self.n * d <= 6500:
            evals, vecs = self.eig()
            V = vecs[x * d:(x + 1) * d, :]
            a = np.sum(np.abs(V) ** 2, axis=0)
            out = np.exp(-np.multiply.outer(ts, evals)) @ a
        else:
            out = self._sampled(tuple(ts.tolist()), x)
        return out if np.ndim(t) else float(out[0])

    def eig_weights(self, vertex: int) -> Tuple[np.ndarray, np.ndarray]:
        """(eigenvalues, block weights a_i) so Tr P = sum a_i e^{-lam_i t}."""
        evals, vecs = self.eig()
        d = self.d
        V = vecs[vertex * d:(vertex + 1) * d, :]
        return evals, np.sum(np.abs(V) ** 2, axis=0)

    def pair_kernel(self, xi: int, yi: int, t: float) -> np.ndarray:
        evals, vecs = self.eig()
        d = self.d
        Vx = vecs[xi * d:(xi + 1) * d, :]
        Vy = vecs[yi * d:(yi + 1) * d, :]
        return (Vx * np.exp(-evals * t)) @ Vy.conj().T

    def _sampled(self, tkey, x: int) -> np.ndarray:
        key = (tkey, x)
        if key not in self._samples:
            ts = np.asarray(tkey, dtype=float)
            d = self.d
            out = np.empty(len(ts))
            u = np.zeros((self.H.shape[0], d), dtype=complex)
            for a in range(d):
                u[x * d + a, a] = 1.0
            t_prev = 0.0
            A = -self.H.tocsc()
            for j in np.argsort(ts):
                dt = ts[j] - t_prev
                if dt > 0:
                    u = spla.expm_multiply(A * dt, u)
                    t_prev = ts[j]
                blk = u[x * d:(x + 1) * d, :]
                out[j] = float(np.real(np.trace(blk)))
            self._samples[key] = out
        return self._samples[key]


def _default_basepoint_target(kind: ModelKind, N: int) -> Tuple[float, float]:
    return (float(N), 0.0)


def unfolded_point(lat: LatticeSpec, j: int, p: Pt) -> Pt:
    """Exact plane point of a fan-chart point (sector rotated back)."""
    return rotation(j, lat.cell_kind)(p)


def unfolded_position(lat: LatticeSpec, j: int, p: Pt) -> Tuple[float, float]:
    """Embedded plane position of a fan-chart point (sector rotated back)."""
    q = unfolded_point(lat, j, p)
    s = math.sqrt(3.0) if lat.cell_kind == "triangulation" else 1.0
    return (float(q[0]), float(q[1]) * s)


def build_model(kind: ModelKind, lat: LatticeSpec, N: int, R: float,
                basepoint: Optional[Tuple[float, float]] = None,
                quotient_tip: bool = False) -> TruncatedModel:
    """Build the radius-R truncation (R macroscopic, lattice radius R*N).

    `basepoint` is an embedded delta0-scale target; the nearest sector-0
    vertex is used.  Punctured models place the puncture at the lattice cell
    anchor nearest the origin, cut along -x.
    """
    k = model_sectors(kind, lat)
    closed = kind.variant in ("plane", "cone", "punctured")
    if kind.variant == "halfplane":
        bc = (kind.bc[0], kind.bc[0])
    elif kind.variant == "wedge":
        bc = (kind.bc[0], kind.bc[1])
    else:
        bc = ("N", "N")
    d = kind.rank
    R_l = R * N
    R2 = Fraction(int(math.floor(R_l * R_l * 1024)), 1024)

    # sector-0 lattice points (closed sector), replicated over sectors
    base_pts = []
    bound = int(math.ceil(R_l)) + 2
    for i in range(len(lat.vertices)):
        for mm in range(-bound, bound + 1):
            for nn in range(-bound, bound + 1):
                p = lat.position(i, (mm, nn))
                if p != (_F0, _F0) and _in_sector(p, lat) and _norm2(p, lat) <= R2:
                    base_pts.append(p)
    tip_present = lat.locate((_F0, _F0)) is not None
    pts: List[Tuple[int, Pt]] = []
    seen = set()
    for j in range(k):
        for p in base_pts:
            cj, cp, _ = _resolve_fan(lat, k, closed, bc, j, p)
            if (cj, cp) not in seen:
                seen.add((cj, cp))
                pts.append((cj, cp))
    pts.sort()
    if tip_present:
        pts = [(0, (_F0, _F0))] + pts

    # Dirichlet walls follow the surface convention: on-wall vertices removed
    removed = set()
    if kind.variant in ("halfplane", "wedge"):
        for (j, p) in pts:
            is_tip = p == (_F0, _F0)
            on_w0 = (j == 0 and p[1] == 0) or is_tip
            on_wl = (j == k - 1 and _on_top_ray(p, lat)) or is_tip
            if (bc[0] == "D" and on_w0) or (bc[1] == "D" and on_wl):
                removed.add((j, p))
    pts = [jp for jp in pts if jp not in removed]
    index = {pc: i for i, pc in enumerate(pts)}
    tip_index = index.get((0, (_F0, _F0)))
    n = len(pts)

    # puncture cut along -x from the cell anchor nearest the origin
    cuts: List[Tuple[Pt, Pt]] = []
    M = kind.monodromy_matrix()
    twisted = kind.variant == "punctured" and not np.allclose(M, np.eye(d))
    if twisted:
        from .surface import _cell_anchor
        anchor = _cell_anchor(lat)
        if anchor == (_F0, _F0):
            anchor = (Fraction(1, 3), Fraction(1, 5))  # off-vertex interior point
        far = (anchor[0] - 8 * Fraction(int(math.ceil(R_l + 4))), anchor[1])
        cuts.append((anchor, far))

    from .exact import cross as _cross, segments_cross as _scross

    def cut_factor(a: Pt, b: Pt) -> np.ndarray:
        X = np.eye(d, dtype=complex)
        for (c0, c1) in cuts:
            if _scross(a, b, c0, c1):
                X = (M if _cross(c0, c1, a) < 0 else M.conj().T) @ X
        return X

    # directed rate matrix L, then mass symmetrization
    Lrows: Dict[Tuple[int, int], np.ndarray] = {}
    diag = np.zeros((n, d, d), dtype=complex)
    rates: Dict[Tuple[int, int], float] = {}

    def add_dir(u: int, v: int, w: float, X: np.ndarray):
        diag[u] += w * np.eye(d)
        key = (u, v)
        if key not in Lrows:
            Lrows[key] = np.zeros((d, d), dtype=complex)
        Lrows[key] += -w * X
        rates[key] = rates.get(key, 0.0) + w

    ray_dir_cache = None
    for (j, p) in pts:
        if (j, p) == (0, (_F0, _F0)):
            continue  # cone tip row handled below; wedge tip never canonical 0
        ci, _off = lat.locate(p)
        for (cjv, off, w) in lat.edges_at(ci):
            dq = (lat.position(cjv, off)[0] - lat.vertices[ci][0],
                  lat.position(cjv, off)[1] - lat.vertices[ci][1])
            q_raw = (p[0] + dq[0], p[1] + dq[1])
            u = index[(j, p)]
            if q_raw == (_F0, _F0):
                if not tip_present:
                    raise UnreflectableEdge("edge hits a vertex-free origin")
                if tip_index is None:
                    diag[u] += w * np.eye(d)  # removed Dirichlet corner
                elif closed and kind.variant != "plane" and k != lat.symmetry_order:
                    # cone tip: only the single seam cell from the 0-ray
                    # vertex of each sector survives the identification
                    if p[1] == 0:
                        add_dir(u, tip_index, w, np.eye(d, dtype=complex))
                else:
                    add_dir(u, tip_index, w, cut_factor(p, q_raw))
                continue
            cj2, cq, sign = _resolve_fan(lat, k, closed, bc, j, q_raw)
            if _norm2(cq, lat) > R2:
                diag[u] += w * np.eye(d)  # Dirichlet far boundary
                continue
            v = index.get((cj2, cq))
            if v is None:
                diag[u] += w * np.eye(d)  # removed Dirichlet wall vertex
                continue
            if v == u:
                X = cut_factor(p, q_raw)
                diag[u] += w * (np.eye(d) - sign * X)
                continue
            add_dir(u, v, w, sign * cut_factor(p, q_raw))
    if tip_index is not None:
        # The tip's own row.  The tip touches every sector, so its lattice
        # star is enumerated by seam RAYS, not by chart directions: rays
        # 0..k-1 (cone, cyclic) or 0..k (wedge, both walls), one cell each,
        # plus wall bounces of the out-of-wedge star directions.
        ci0 = lat.locate((_F0, _F0))[0]
        d0 = None
        w0 = None
        for (cjv, off, w) in lat.edges_at(ci0):
            dq = lat.position(cjv, off)
            if dq[1] == 0 and dq[0] > 0:
                d0, w0 = dq, w
        if d0 is None:
            raise UnreflectableEdge("no 0-ray lattice direction at the tip")

        def ray_point(ell: int):
            if ell < k:
                return index.get((ell, d0))
            return index.get((k - 1, rotation(1, lat.cell_kind)(d0)))

        if closed:
            mult = (lat.symmetry_order // k) if quotient_tip else 1.0
            if kind.variant == "plane" or k == lat.symmetry_order:
                mult = 1.0
            for ell in range(k):
                X = np.eye(d, dtype=complex)
                if cuts:
                    X = cut_factor((_F0, _F0),
                                   rotation(ell % lat.symmetry_order,
                                            lat.cell_kind)(d0))
                add_dir(tip_index, ray_point(ell), w0 * mult, X)
        else:
            half = lat.symmetry_order // 2
            s_r = 1.0 if bc[0] == "N" else -1.0
            s_l = 1.0 if bc[1] == "N" else -1.0
            for ell in range(k + 1):
                tv = ray_point(ell)
                if tv is None:
                    diag[tip_index] += w0 * np.eye(d)
                else:
                    add_dir(tip_index, tv, w0, np.eye(d, dtype=complex))
            if kind.alpha_over_pi == 1 or kind.variant == "halfplane":
                # straight boundary: the walls are collinear and the two
                # chart descriptions of each below-direction are the same
                # germ; bounce each once (D wins at an exact bc change)
                s_r = s_l = -1.0 if "D" in bc else 1.0
                bounce_sets = [(-r, 1.0) for r in range(1, half)]
            else:
                bounce_sets = ([(-r, 1.0) for r in range(1, half)]
                               + [(k + r, 1.0) for r in range(1, half)])
            for (r, _) in bounce_sets:
                sign = 1.0
                guard = 0
                while not (0 <= r <= k):
                    if r < 0:
                        r, sign = -r, sign * s_r
                    else:
                        r, sign = 2 * k - r, sign * s_l
                    guard += 1
                    if guard > 16:
                        raise UnreflectableEdge("tip bounce did not terminate")
                tv = ray_point(r)
                if tv is None:
                    diag[tip_index] += w0 * np.eye(d)
                elif sign == 0:
                    pass
                else:
                    add_dir(tip_index, tv, w0, sign * np.eye(d, dtype=complex))

    H = _symmetrize_rates(Lrows, diag, rates, n, d)
    w_max = float(max(np.real(np.trace(diag[i])) / d for i in range(n)))
    if basepoint is None:
        basepoint = _default_basepoint_target(kind, N)
    bp = _nearest_vertex(lat, pts, basepoint)
    return TruncatedModel(kind, lat, N, R, pts, index, bp, H, w_max,
                          tip_index, quotient_tip)


def _nearest_vertex(lat: LatticeSpec, pts, target) -> int:
    best = None
    for i, (j, p) in enumerate(pts):
        ex, ey = unfolded_position(lat, j, p)
        dd = (ex - target[0]) ** 2 + (ey - target[1]) ** 2
        if best is None or dd < best[0]:
            best = (dd, i)
    return best[1]


def _symmetrize_rates(Lrows, diag, rates, n: int, d: int) -> sp.csr_matrix:
    """Hermitian representative via masses from rate ratios (BFS)."""
    m = np.full(n, -1.0)
    adj: Dict[int, List[int]] = {}
    for (u, v) in rates:
        adj.setdefault(u, []).append(v)
    for start in range(n):
        if m[start] > 0:
            continue
        m[start] = 1.0
        stack = [start]
        while stack:
            a = stack.pop()
            for b in adj.get(a, []):
                val = m[a] * rates[(a, b)] / rates[(b, a)]
                if m[b] < 0:
                    m[b] = val
                    stack.append(b)
    rows, cols, vals = [], [], []
    for (u, v), B in Lrows.items():
        S = math.sqrt(m[u] / m[v]) * B
        for a in range(d):
            for b in range(d):
                if S[a, b] != 0:
                    rows.append(u * d + a)
                    cols.append(v * d + b)
                    vals.append(S[a, b])
    for i in range(n):
        for a in range(d):
            for b in range(d):
                if diag[i][a, b] != 0:
                    rows.append(i * d + a)
                    cols.append(i * d + b)
                    vals.append(diag[i][a, b])
    H = sp.csr_matrix((vals, (rows, cols)), shape=(n * d, n * d), dtype=complex)
    H.sum_duplicates()
    H = (H + H.conj().T) * 0.5
    return H.tocsr()


# ---------------------------------------------------------------------------
# kernel evaluation facade
# ---------------------------------------------------------------------------

def plane_kernel(lat: LatticeSpec, cls: int, t):
    """P^{C^{delta0}}(x, x, t) for a vertex class, walk-time units."""
    return plane_kernel_for(lat).diag(cls, t)


def image_pairs(lat: LatticeSpec, x: Pt, images):
    """Convert image targets to (coef, class_i, class_j, offset) plane-kernel args."""
    loc_x = lat.locate(x)
    if loc_x is None:
        raise UnreflectableEdge(f"{x} is not a lattice point")
    ci, off_x = loc_x
    out = []
    for (coef, q) in images:
        loc_q = lat.locate(q)
        if loc_q is None:
            raise UnreflectableEdge(f"image {q} is not a lattice point")
        cj, off_q = loc_q
        out.append((coef, ci, cj, (off_q[0] - off_x[0], off_q[1] - off_x[1])))
    return out


def exact_diag_kernel(kind: ModelKind, lat: LatticeSpec, x: Pt, t):
    """P^{model}(x, x, t) via the method of images; None if unavailable."""
    images = exact_images(kind, lat, x)
    if images is None:
        return None
    pk = plane_kernel_for(lat)
    t = np.asarray(t, dtype=float)
    total = np.zeros_like(t, dtype=float)
    for (coef, ci, cj, off) in image_pairs(lat, x, images):
        if coef != 0.0:
            total = total + coef * pk.pair(ci, cj, off, t)
    return total


def model_diag_kernel(m: TruncatedModel, t, eps: float = 1e-10):
    """Tr P(x, x, t) at the basepoint of a truncated model, with certificate."""
    ts = np.atleast_1d(np.asarray(t, dtype=float))
    m.require_certified(float(ts.max()), eps)
    return m.diag_trace(t)


def agreement_radius_steps(m2: TruncatedModel, m1: TruncatedModel) -> int:
    """Graph distance around the basepoint where the two models coincide.

    Conservative: the lattice distance from the basepoint to the tip/wall
    divided by the longest edge, minus one step.
    """
    lat = m2.lat
    bx = m2.points[m2.basepoint][1]
    dist = math.sqrt(float(_norm2(bx, lat)))
    if m1.kind.variant != "plane" or m2.kind.variant != "plane":
        # distance to the nearest feature: tip/wall at the origin axis
        d_feature = dist if m2.kind.variant in ("cone", "wedge", "punctured") \
            else float(bx[1]) * (math.sqrt(3) if lat.cell_kind == "triangulation" else 1)
        if m2.kind.variant == "halfplane":
            d_feature = float(bx[1]) * (math.sqrt(3.0)
                                        if lat.cell_kind == "triangulation" else 1.0)
    else:
        d_feature = dist
    g = int(d_feature / lat.max_edge_length()) - 1
    return max(1, g)


def _tail_exponent(kinds) -> float:
    """Subleading decay exponent p of t*(P2-P1): min(1, pi/alpha-type)."""
    p = 1.0
    for kind in kinds:
        if kind.variant == "cone" and kind.alpha_over_pi > 1:
            p = min(p, float(2 / kind.alpha_over_pi))
        if kind.variant == "wedge" and kind.alpha_over_pi > 1:
            p = min(p, float(1 / kind.alpha_over_pi))
        if kind.variant == "punctured":
            p = min(p, 0.5)  # log-suppressed winding tail; fit conservatively
    return p


def _log_simpson(ts: np.ndarray, fs: np.ndarray) -> float:
    """Integral of f dt/t on a geometric grid via Simpson in log t."""
    x = np.log(ts)
    n = len(x)
    total = 0.0
    i = 0
    while i + 2 < n:
        h1, h2 = x[i + 1] - x[i], x[i + 2] - x[i + 1]
        # nonuniform Simpson
        c0 = (h1 + h2) * (2 * h1 - h2) / (6 * h1)
        c1 = (h1 + h2) ** 3 / (6 * h1 * h2)
        c2 = (h1 + h2) * (2 * h2 - h1) / (6 * h2)
        total += c0 * fs[i] + c1 * fs[i + 1] + c2 * fs[i + 2]
        i += 2
    if i + 1 < n:
        total += 0.5 * (fs[i] + fs[i + 1]) * (x[i + 1] - x[i])
    return total


@dataclass
class IIntegralResult:
    value: float
    t_cut: float
    t_tail: float
    dropped_bound: float
    tail_value: float
    tail_error: float

    def __float__(self):
        return float(self.value)


def i_integral(m2: TruncatedModel, m1: TruncatedModel,
               points_per_decade: int = 32, eps_trunc: float = 1e-7,
               small_t_tol: float = 1e-14) -> IIntegralResult:
    """int_0^inf (Tr P2(x,x,t) - Tr P1(x,x,t)) dt/t at matched basepoints.

    Windows: [0, t_cut) dropped under the Poisson few-step certificate;
    [t_cut, T_tail] quadrature on sampled kernels (exact images when both
    models admit them); beyond T_tail a fitted a/t + b/t^{1+p} tail.
    """
    lat = m2.lat
    x2 = unfolded_point(lat, *m2.points[m2.basepoint])
    x1 = unfolded_point(lat, *m1.points[m1.basepoint])
    if x2 != x1:
        raise UnreflectableEdge("i_integral requires matched basepoints")

    img2 = exact_images(m2.kind, lat, x2, tip_vertex=m2.tip_index is not None)
    img1 = exact_images(m1.kind, lat, x1, tip_vertex=m1.tip_index is not None)
    if img2 is not None and img1 is not None:
        # exact path: the identity images cancel; the rest are absolutely
        # convergent dt/t integrals of plane kernels
        pk = plane_kernel_for(lat)
        coefs: Dict[tuple, float] = {}
        for (c, ci, cj, off) in image_pairs(lat, x2, img2):
            coefs[(ci, cj, off)] = coefs.get((ci, cj, off), 0.0) + c
        for (c, ci, cj, off) in image_pairs(lat, x1, img1):
            coefs[(ci, cj, off)] = coefs.get((ci, cj, off), 0.0) - c
        total = 0.0
        for (ci, cj, off), c in coefs.items():
            if abs(c) < 1e-15:
                continue
            if off == (0, 0) and ci == cj:
                raise TailNotDecaying(
                    "identity images do not cancel; integral diverges")
            total += c * pk.full_integral(ci, cj, off)
        return IIntegralResult(float(total), 0.0, math.inf, 0.0, 0.0, 0.0)

    g = min(agreement_radius_steps(m2, m1), agreement_radius_steps(m1, m2))
    w_max = max(m2.w_max, m1.w_max)
    t_cut = small_time_cutoff(w_max, 2 * g, tol=small_t_tol)
    T2 = m2.certified_twalk(eps_trunc)
    T1 = m1.certified_twalk(eps_trunc) if m1.kind.variant != "plane" else T2
    T_tail = min(T2, T1)
    if T_tail <= 4 * t_cut:
        raise TruncationBudgetExceeded("no certified quadrature window")

    ndec = math.log10(T_tail / t_cut)
    npts = max(8, int(points_per_decade * ndec)) | 1
    ts = np.geomspace(t_cut, T_tail, npts)
    P2 = _kernel_values(m2, ts)
    P1 = _kernel_values(m1, ts)
    diff = P2 - P1
    mid = _log_simpson(ts, diff)

    # dropped small-t mass bound: 2 P(Pois(w t) >= 2g) integrated over [0,t_cut]
    from .special import poisson_tail
    dropped = 2.0 * poisson_tail(w_max * t_cut, 2 * g) / max(1, 2 * g)

    # tail fit on the last half-decade: t * diff = a + b t^{-p}
    p = _tail_exponent([m2.kind, m1.kind])
    sel = ts >= T_tail / math.sqrt(10.0)
    tf, ff = ts[sel], ts[sel] * diff[sel]
    A = np.vstack([np.ones_like(tf), tf ** (-p)]).T
    coef, res, *_ = np.linalg.lstsq(A, ff, rcond=None)
    fit_resid = float(np.sqrt(np.mean((A @ coef - ff) ** 2)))
    a_c, b_c = coef
    tail = a_c / T_tail + b_c * T_tail ** (-(1 + p)) / (1 + p)
    tail_err = fit_resid / T_tail * 4.0
    if abs(ff[-1]) > 2.0 * abs(ff[0]) and abs(ff[-1]) > 10 * fit_resid:
        raise TailNotDecaying("kernel difference is not decaying in the fit window")
    return IIntegralResult(float(mid + tail), t_cut, T_tail, dropped,
                           float(tail), float(tail_err))


def _kernel_values(m: TruncatedModel, ts: np.ndarray) -> np.ndarray:
    x = unfolded_point(m.lat, *m.points[m.basepoint])
    if exact_images(m.kind, m.lat, x,
                    tip_vertex=m.tip_index is not None) is not None:
        return exact_diag_kernel(m.kind, m.lat, x, ts)
    return m.diag_trace(ts)


def verify_local_isomorphism(m: TruncatedModel) -> bool:
    """Compare the graph within radius R/2 against a radius R+1 rebuild."""
    bigger = build_model(m.kind, m.lat, m.N, m.R + 1.0,
                         quotient_tip=m.quotient_tip)
    half2 = Fraction(int(math.floor((m.R * m.N / 2) ** 2 * 1024)), 1024)

    def edge_set(model):
        H = model.matrix if hasattr(model, "matrix") else model.H
        coo = H.tocoo()
        d = model.d
        out = set()
        for r, c, v in zip(coo.row, coo.col, coo.data):
            pu, pv = model.points[r // d], model.points[c // d]
            if _norm2(pu[1], model.lat) <= half2 and _norm2(pv[1], model.lat) <= half2:
                out.add((pu, r % d, pv, c % d, complex(np.round(v, 12))))
        return out

    return edge_set(m) == edge_set(bigger)

"""The six-term decomposition of -log det* and its per-mesh verification.

With walk-time T = delta^{-2} = N^2/delta0^2 and k zero modes,

  -log det* = T1 + T2 + T3 + T4 + T5 + T6
  T1 = int_T^inf (Theta(t) - k) dt/t                    = sum E1(lambda T)
  T2 = sum_x int_0^T (Tr P_surf(x,x,t) - P_model(x,t)) dt/t
  T3 = -sum_x int_T^inf P_model(x,t) dt/t
  T4 = sum_x int_0^inf (P_model(x,t) - d P_plane(x,t)) dt/t
  T5 = d sum_x [int_0^inf (P_plane(x,t) - e^{-w_x t}) dt/t - log w_x]
  T6 = 2 k log(delta) - k gamma_Euler

P_model is d times the local model kernel (trace for twisted punctured
models).  At a cone tip with a lattice vertex the T4/T5 split is divergent
term by term; their sum is computed directly and attributed to T4.

Model kernels come from exact images where available and from truncated fan
graphs otherwise, with a quotient-image defect split so that large-time
tails ride on exact plane-kernel integrals.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy import integrate

from .errors import BudgetExceeded, OverlapViolation, TruncationBudgetExceeded
from .exact import Pt, dist2, rotation, translation
from .lattice import LatticeSpec
from .modeldomains import (
    ModelKind,
    TruncatedModel,
    build_model,
    cone_model,
    exact_images,
    halfplane,
    image_pairs,
    plane,
    punctured_model,
    unfolded_point,
    wedge_model,
    _resolve_fan,
)
from .planekernel import plane_kernel_for
from .special import EULER_GAMMA, e1, e1_scalar, poisson_tail, small_time_cutoff
from .spectral import Spectrum, diag_weights
from .surface import DiscreteSurface, SingularityDescriptor, corner_orbits

_F0 = Fraction(0)


@dataclass
class KeyFormulaParams:
    r: float = 0.2
    model_R: float = 6.0        # macroscopic truncation radius for fan models
    trunc_eps: float = 1e-9
    small_t_tol: float = 1e-13
    quad_tol: float = 1e-11
    gamma_euler: float = EULER_GAMMA


@dataclass
class Assignment:
    kind: ModelKind
    feature: Optional[int]              # singularity index, or None
    chart_pos: Optional[Tuple[int, Pt]] # fan chart (sector, point), delta0 scale
    images: Optional[list]              # exact image pairs vs the plane kernel
    height_or_dist: float = 0.0


@dataclass
class KeyFormulaReport:
    terms: Dict[str, float]
    lhs: float
    residual: float
    budget: float
    assignments: Dict[str, int]
    tip_combined: List[int] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "terms": self.terms,
            "lhs": self.lhs,
            "residual": self.residual,
            "budget": self.budget,
            "assignments": self.assignments,
        }


# ---------------------------------------------------------------------------
# geometry: distances and model assignment
# ---------------------------------------------------------------------------

def _chart_images_of_features(ds: DiscreteSurface):
    """Per-face chart positions of each singularity, one gluing-unfold deep."""
    spec = ds.spec
    from .surface import gluing_isometry
    out = []
    for s in ds.singularities:
        per_face: Dict[int, List[Pt]] = {}
        for (f, p) in s.reps:
            per_face.setdefault(f, []).append(p)
        for g in spec.gluings:
            for fwd in (True, False):
                src = (g.a if fwd else g.b)[0]
                dst = (g.b if fwd else g.a)[0]
                iso = gluing_isometry(spec, g, fwd)
                for (f, p) in s.reps:
                    if f == src:
                        per_face.setdefault(dst, []).append(iso(p))
        out.append(per_face)
    return out


def _boundary_segments(ds: DiscreteSurface):
    """(face, A, B, bc) per maximal constant-bc piece of each unglued edge."""
    spec = ds.spec
    segs = []
    table = spec.glued_lookup()
    for b in spec.boundary:
        if (b.face, b.edge) in table:
            continue
        A, B = spec.edge_endpoints(b.edge)
        if b.split is None:
            segs.append((b.face, A, B, b.bc))
        else:
            frac, before, after = b.split
            M = (A[0] + frac * (B[0] - A[0]), A[1] + frac * (B[1] - A[1]))
            segs.append((b.face, A, M, before))
            segs.append((b.face, M, B, after))
    return segs


def _dist_point_segment(q: Pt, A: Pt, B: Pt, kind: str) -> float:
    from .exact import embed
    qx, qy = embed(q, kind)
    ax, ay = embed(A, kind)
    bx, by = embed(B, kind)
    vx, vy = bx - ax, by - ay
    tt = ((qx - ax) * vx + (qy - ay) * vy) / (vx * vx + vy * vy)
    tt = min(1.0, max(0.0, tt))
    px, py = ax + tt * vx, ay + tt * vy
    return math.hypot(qx - px, qy - py)


def _r_alpha(alpha: float, r: float) -> float:
    return r / math.sin(alpha / 2) if alpha < math.pi else r


def validate_no_overlap(ds: DiscreteSurface, p: KeyFormulaParams):
    feats = _chart_images_of_features(ds)
    kind = ds.lat.cell_kind
    for i, s1 in enumerate(ds.singularities):
        r1 = _r_alpha(s1.angle, p.r) if s1.kind == "corner" else p.r
        for j in range(i + 1, len(ds.singularities)):
            s2 = ds.singularities[j]
            r2 = _r_alpha(s2.angle, p.r) if s2.kind == "corner" else p.r
            shared_corner = s1.kind == "corner" and s2.kind == "corner"
            best = None
            for (f, q) in s1.reps:
                for q2 in feats[j].get(f, []):
                    d = math.sqrt(dist2(q, q2, kind))
                    best = d if best is None else min(best, d)
            if best is not None and best > 0 and best < (r1 + r2) * (
                    1.0 if shared_corner else 2.0):
                raise OverlapViolation(
                    f"model neighborhoods of singularities {i} and {j} overlap "
                    f"(distance {best:.3g})")


def assign_model(ds: DiscreteSurface, x: int, p: KeyFormulaParams,
                 _feats=None, _segs=None) -> Assignment:
    """Model surface of a vertex per the r / r_alpha assignment rule."""
    kind = ds.lat.cell_kind
    feats = _chart_images_of_features(ds) if _feats is None else _feats
    segs = _boundary_segments(ds) if _segs is None else _segs

    best_corner = None
    best_point = None
    for i, s in enumerate(ds.singularities):
        dmin = None
        for (f, q) in ds.reps[x]:
            for pos in feats[i].get(f, []):
                d = math.sqrt(dist2(q, pos, kind))
                dmin = d if dmin is None else min(dmin, d)
        if dmin is None:
            continue
        if s.kind == "corner":
            if dmin <= _r_alpha(s.angle, p.r) and (
                    best_corner is None or dmin < best_corner[0]):
                best_corner = (dmin, i)
        else:
            if dmin <= p.r and (best_point is None or dmin < best_point[0]):
                best_point = (dmin, i)
    if best_corner is not None:
        d, i = best_corner
        s = ds.singularities[i]
        return Assignment(wedge_model(s.angle_over_pi, *s.bc_pair), i, None,
                          None, d)
    if best_point is not None:
        d, i = best_point
        s = ds.singularities[i]
        if s.kind == "cone":
            return Assignment(cone_model(s.angle_over_pi), i, None, None, d)
        return Assignment(punctured_model(s.monodromy), i, None, None, d)
    # boundary segments
    best_seg = None
    for (f, A, B, bc) in segs:
        for (fr, q) in ds.reps[x]:
            if fr != f:
                continue
            d = _dist_point_segment(q, A, B, kind)
            if d <= p.r and (best_seg is None or d < best_seg[0]):
                best_seg = (d, (f, A, B, bc))
    if best_seg is not None:
        d, (f, A, B, bc) = best_seg
        return Assignment(halfplane(bc), None, None, None, d)
    return Assignment(plane(), None, None, None, 0.0)


# ---------------------------------------------------------------------------
# per-vertex model geometry
# ---------------------------------------------------------------------------

def _corner_standardizer(spec, face: int, corner_pt: Pt):
    """Map the face chart so the corner sits at the origin with its outgoing
    edge along +x (one face corner spans exactly one beta-sector)."""
    corners = spec.corners()
    k = corners.index(corner_pt)
    step = (4 // 4) if spec.face_kind == "square" else (6 // 3)
    rot = rotation(-k * step, spec.cell_kind)
    tr = translation(-corner_pt[0], -corner_pt[1])
    return rot.compose(tr)


def _arc_standardizer(spec, face: int, edge: int, pt: Pt):
    """Map the chart so a boundary-arc point sits at the origin with the arc
    along +x (for bc-change pi-corners)."""
    A, B = spec.edge_endpoints(edge)
    d = (B[0] - A[0], B[1] - A[1])
    order = 4 if spec.face_kind == "square" else 6
    from .exact import rotation as _rot
    for k in range(order):
        if _rot(k, spec.cell_kind)((Fraction(1), Fraction(0))) == d:
            rot = _rot(-k, spec.cell_kind)
            return rot.compose(translation(-pt[0], -pt[1]))
    raise OverlapViolation("boundary arc direction is not a lattice angle")


def fan_position(ds: DiscreteSurface, x: int, sing_idx: int,
                 p: KeyFormulaParams) -> Tuple[int, Pt]:
    """Fan-chart coordinates (sector, delta0-scale point) of vertex x around
    a cone/corner singularity."""
    s = ds.singularities[sing_idx]
    spec = ds.spec
    lat = ds.lat
    N = ds.N
    k_sec = int(s.angle_over_pi / (Fraction(1, 2) if spec.face_kind == "square"
                                   else Fraction(1, 3)))
    closed = s.kind == "cone"
    bc = s.bc_pair if s.kind == "corner" else ("N", "N")
    corners = spec.corners()
    if s.kind == "corner" and s.reps[0][1] not in corners:
        # bc-change point interior to a boundary arc: one chart, angle pi
        (f, pt) = s.reps[0]
        b = [bb for bb in spec.boundary
             if bb.face == f and _on_edge(spec, bb.edge, pt)]
        std = _arc_standardizer(spec, f, b[0].edge, pt)
        for (fr, q) in ds.reps[x]:
            if fr != f:
                continue
            q2 = std(q)
            qs = (q2[0] * N, q2[1] * N)
            cj, cp, _ = _resolve_fan(lat, k_sec, closed, bc, 0, qs)
            return (cj, cp)
        raise OverlapViolation("vertex has no chart shared with its corner")
    for j, (fj, cpt) in enumerate(s.reps):
        std = _corner_standardizer(spec, fj, cpt)
        for (fr, q) in ds.reps[x]:
            if fr != fj:
                continue
            q2 = std(q)
            qs = (q2[0] * N, q2[1] * N)
            if qs[1] < 0:
                continue
            if lat.cell_kind == "triangulation" and qs[1] > qs[0]:
                continue
            if lat.cell_kind == "quadrangulation" and qs[0] < 0:
                continue
            cj, cp, _ = _resolve_fan(lat, k_sec, closed, bc, j, qs)
            return (cj, cp)
    raise OverlapViolation(f"vertex {x} not in any sector of singularity {sing_idx}")


def _on_edge(spec, edge: int, pt: Pt) -> bool:
    from .surface import _arc_param
    return _arc_param(spec, edge, pt) is not None


def halfplane_offset(ds: DiscreteSurface, x: int, segs) -> Tuple[int, int, Tuple[int, int]]:
    """Plane-kernel image data for a halfplane vertex: classes and offset of
    the reflected point."""
    from .exact import reflection_across_points
    lat, N = ds.lat, ds.N
    kind = lat.cell_kind
    best = None
    for (f, A, B, bc) in segs:
        for (fr, q) in ds.reps[x]:
            if fr != f:
                continue
            d = _dist_point_segment(q, A, B, kind)
            if best is None or d < best[0]:
                best = (d, (f, A, B, q))
    (_, (f, A, B, q)) = best
    refl = reflection_across_points(A, B, kind)
    qr = refl(q)
    ci, off_x = lat.locate((q[0] * N, q[1] * N))
    cj, off_r = lat.locate((qr[0] * N, qr[1] * N))
    return ci, cj, (off_r[0] - off_x[0], off_r[1] - off_x[1])


# ---------------------------------------------------------------------------
# kernel engines
# ---------------------------------------------------------------------------

class _ImagesEngine:
    """Model kernel as a signed sum of plane kernels (trace convention)."""

    def __init__(self, pk, pairs, d: int):
        # pairs: (coef, ci, cj, off) with the identity image carrying coef 1
        self.pk = pk
        self.d = d
        self.pairs = [(c * d, ci, cj, off) for (c, ci, cj, off) in pairs]

    def trace(self, t):
        t = np.asarray(t, dtype=float)
        total = np.zeros_like(t)
        for (c, ci, cj, off) in self.pairs:
            if c != 0.0:
                total = total + c * self.pk.pair(ci, cj, off, t)
        return total

    def t3(self, T: float) -> Tuple[float, float]:
        val = sum(c * self.pk.tail_integral(ci, cj, off, T)
                  for (c, ci, cj, off) in self.pairs if c != 0.0)
        return -val, 0.0

    def t4(self) -> Tuple[float, float]:
        val = 0.0
        for (c, ci, cj, off) in self.pairs:
            if (ci, cj, off) == (ci, ci, (0, 0)) and off == (0, 0) and ci == cj:
                continue  # identity image cancels against d * plane
            if c != 0.0:
                val += c * self.pk.full_integral(ci, cj, off)
        return val, 0.0


class _FanEngine:
    """Truncated fan model with an optional quotient-image defect split."""

    def __init__(self, model: TruncatedModel, vertex: int, pk,
                 quot_pairs, d: int, eps: float):
        self.m = model
        self.v = vertex
        self.pk = pk
        self.quot = None if quot_pairs is None else \
            [(c * d, ci, cj, off) for (c, ci, cj, off) in quot_pairs]
        self.d = d
        self.T_cert = model.certified_twalk(eps)

    def trace(self, t):
        return self.m.diag_trace(np.asarray(t, dtype=float), vertex=self.v)

    def _quot_trace(self, t):
        t = np.asarray(t, dtype=float)
        total = np.zeros_like(t)
        for (c, ci, cj, off) in self.quot:
            if c != 0.0:
                total = total + c * self.pk.pair(ci, cj, off, t)
        return total

    def _defect_tail(self, T: float) -> Tuple[float, float]:
        """int_T^inf (trace - quotient images) dt/t by quadrature + t^-2 fit."""
        T2 = self.T_cert
        if T >= T2:
            raise TruncationBudgetExceeded("no certified defect window")
        ts = np.geomspace(T, T2, 48)
        dvals = self.trace(ts) - self._quot_trace(ts)
        from .modeldomains import _log_simpson
        mid = _log_simpson(ts, dvals)
        sel = ts >= T2 / math.sqrt(10.0)
        tf = ts[sel]
        ff = dvals[sel] * tf ** 2  # defect ~ c2/t^2 + c3/t^3
        A = np.vstack([np.ones_like(tf), 1.0 / tf]).T
        coef, *_ = np.linalg.lstsq(A, ff, rcond=None)
        tail = coef[0] / (2 * T2 ** 2) + coef[1] / (3 * T2 ** 3)
        resid = float(np.sqrt(np.mean((A @ coef - ff) ** 2)))
        return mid + tail, abs(tail) * 0.05 + resid / T2 ** 2

    def t3(self, T: float) -> Tuple[float, float]:
        if self.quot is not None:
            base = sum(c * self.pk.tail_integral(ci, cj, off, T)
                       for (c, ci, cj, off) in self.quot if c != 0.0)
            dtail, derr = self._defect_tail(T)
            return -(base + dtail), derr
        evals, a = self.m.eig_weights(self.v)
        nz = evals > 1e-12
        val = float(np.sum(a[nz] * e1(evals[nz] * T)))
        # beyond the certificate the truncated kernel loses the 1/t tail;
        # append the fitted a/t correction
        T2 = self.T_cert
        ts = np.geomspace(0.5 * T2, T2, 12)
        f = self.trace(ts) * ts
        corr = float(np.mean(f)) / T2 - float(
            np.sum(a[nz] * e1(evals[nz] * T2)))
        return -(val + corr), abs(corr) * 0.2

    def t4(self, t_cut: float) -> Tuple[float, float]:
        pk = self.pk
        cls = self.m.lat.locate(unfolded_point(
            self.m.lat, *self.m.points[self.v]))[0]
        if self.quot is not None:
            base = 0.0
            for (c, ci, cj, off) in self.quot:
                if ci == cj and off == (0, 0):
                    continue
                if c != 0.0:
                    base += c * pk.full_integral(ci, cj, off)
            T2 = self.T_cert
            ts = np.geomspace(t_cut, T2, 160)
            dvals = self.trace(ts) - self._quot_trace(ts)
            from .modeldomains import _log_simpson
            mid = _log_simpson(ts, dvals)
            sel = ts >= T2 / math.sqrt(10.0)
            tf = ts[sel]
            ff = dvals[sel] * tf ** 2
            A = np.vstack([np.ones_like(tf), 1.0 / tf]).T
            coef, *_ = np.linalg.lstsq(A, ff, rcond=None)
            tail = coef[0] / (2 * T2 ** 2) + coef[1] / (3 * T2 ** 3)
            return base + mid + tail, abs(tail) * 0.05
        # generic windowed route against the plane
        T2 = self.T_cert
        ts = np.geomspace(t_cut, T2, 200)
        dvals = self.trace(ts) - self.d * pk.diag(cls, ts)
        from .modeldomains import _log_simpson
        mid = _log_simpson(ts, dvals)
        sel = ts >= T2 / math.sqrt(10.0)
        tf = ts[sel]
        ff = dvals[sel] * tf
        A = np.vstack([np.ones_like(tf), tf ** (-2.0 / 3.0)]).T
        coef, *_ = np.linalg.lstsq(A, ff, rcond=None)
        tail = coef[0] / T2 + coef[1] * T2 ** (-5.0 / 3.0) / (5.0 / 3.0)
        resid = float(np.sqrt(np.mean((A @ coef - ff) ** 2)))
        return mid + tail, resid / T2 * 4 + abs(tail) * 0.02

    def t45_tip(self, w_x: float) -> Tuple[float, float]:
        """Combined T4+T5 at a tip vertex: int (trace - d e^{-w t}) dt/t - d log w."""
        T2 = self.T_cert
        val, qerr = integrate.quad(
            lambda tt: (float(self.m.diag_trace(np.array([tt]), vertex=self.v)[0])
                        - self.d * math.exp(-w_x * tt)) / tt,
            0.0, T2, limit=300, epsabs=1e-12)
        # tail: quotient images attach the exact plane tails
        if self.quot is not None:
            base = sum(c * self.pk.tail_integral(ci, cj, off, T2)
                       for (c, ci, cj, off) in self.quot if c != 0.0)
            dtail, derr = self._defect_tail(T2 * 0.99)
            dmid = 0.0
        else:
            raise TruncationBudgetExceeded(
                "tip vertices need a quotient-image tail")
        # remove the already-counted defect below T2*0.99 (negligible window)
        tail = base + dtail
        val2 = val + tail - self.d * e1_scalar(w_x * T2) - self.d * math.log(w_x)
        return val2, qerr + derr


# ---------------------------------------------------------------------------
# T5 volume summand and the evaluator
# ---------------------------------------------------------------------------

def t5_summand(pk, cls: int, w_x: float) -> float:
    """int_0^inf (P_plane(x,x,t) - e^{-w_x t}) dt/t - log w_x."""
    tsw = pk.t_switch(cls, cls, (0, 0))
    val, err = integrate.quad(
        lambda tt: (float(pk.diag(cls, tt)) - math.exp(-w_x * tt)) / tt,
        0.0, tsw, limit=300, epsabs=1e-13, epsrel=1e-12)
    tail = pk.tail_integral(cls, cls, (0, 0), tsw)
    return val + tail - e1_scalar(w_x * tsw) - math.log(w_x)


def _quotient_pairs(ds: DiscreteSurface, kind: ModelKind, fanpos, pk):
    """Quotient-image pairs for a cone fan point, or None."""
    lat = ds.lat
    j, pt = fanpos
    order = lat.symmetry_order
    ksec = int(kind.alpha_over_pi / (Fraction(1, 2)
               if lat.cell_kind == "quadrangulation" else Fraction(1, 3)))
    m = Fraction(2) / kind.alpha_over_pi
    if m.denominator != 1 or order % int(m) != 0:
        return None
    unf = rotation(j % order, lat.cell_kind)(pt) if j < ksec else None
    if unf is None:
        return None
    imgs = exact_images(kind, lat, unf, tip_vertex=False)
    if imgs is None:
        return None
    return image_pairs(lat, unf, imgs)


def _make_engine(ds, asg: Assignment, x: int, p, pk, segs, model_cache):
    lat, N, d = ds.lat, ds.N, ds.d
    kindv = asg.kind.variant
    if kindv == "plane":
        ci = ds.lat_class[x]
        return _ImagesEngine(pk, [(1.0, ci, ci, (0, 0))], d)
    if kindv == "halfplane":
        ci, cj, off = halfplane_offset(ds, x, segs)
        s = 1.0 if asg.kind.bc[0] == "N" else -1.0
        pairs = [(1.0, ci, ci, (0, 0))]
        if off != (0, 0) or ci != cj:
            pairs.append((s, ci, cj, off))
        return _ImagesEngine(pk, pairs, d)
    if kindv in ("cone", "wedge"):
        fanpos = fan_position(ds, x, asg.feature, p)
        s = ds.singularities[asg.feature]
        tip_here = s.vertex_at == x
        if not tip_here:
            unf_ok = True
            try:
                unf = rotation(fanpos[0] % lat.symmetry_order,
                               lat.cell_kind)(fanpos[1])
            except Exception:
                unf_ok = False
            if unf_ok and s.vertex_at is None:
                imgs = exact_images(asg.kind, lat, unf, tip_vertex=False)
                if imgs is not None:
                    return _ImagesEngine(pk, image_pairs(lat, unf, imgs), d)
        key = asg.kind.label()
        if key not in model_cache:
            model_cache[key] = build_model(asg.kind, lat, N, p.model_R)
        m = model_cache[key]
        v = m.index[fanpos]
        quot = _quotient_pairs(ds, asg.kind, fanpos, pk) \
            if kindv == "cone" else None
        return _FanEngine(m, v, pk, quot, d, p.trunc_eps)
    if kindv == "punctured":
        s = ds.singularities[asg.feature]
        M = s.monodromy
        if np.allclose(M, np.eye(d)):
            ci = ds.lat_class[x]
            return _ImagesEngine(pk, [(1.0, ci, ci, (0, 0))], d)
        key = asg.kind.label() + repr(np.round(M, 12).tolist())
        if key not in model_cache:
            model_cache[key] = build_model(asg.kind, lat, N, p.model_R)
        m = model_cache[key]
        # position of x relative to the puncture, shifted to the model anchor
        from .surface import _cell_anchor
        anchor = _cell_anchor(lat)
        (f_p, p_pos) = s.reps[0]
        for (fr, q) in ds.reps[x]:
            if fr == f_p:
                rel = ((q[0] - p_pos[0]) * N + anchor[0],
                       (q[1] - p_pos[1]) * N + anchor[1])
                cj, cp, _ = _resolve_fan(lat, lat.symmetry_order, True,
                                         ("N", "N"), 0, rel)
                v = m.index[(cj, cp)]
                return _FanEngine(m, v, pk, None, d, p.trunc_eps)
        raise OverlapViolation("puncture vertex lacks a shared chart")
    raise ValueError(f"unknown model {kindv}")


def evaluate(ds: DiscreteSurface, S: Spectrum,
             p: Optional[KeyFormulaParams] = None) -> KeyFormulaReport:
    """Evaluate the six terms and the identity residual at one mesh."""
    if p is None:
        p = KeyFormulaParams()
    validate_no_overlap(ds, p)
    lat, N, d = ds.lat, ds.N, ds.d
    pk = plane_kernel_for(lat)
    T = N * N / lat.delta0 ** 2
    k = S.kernel_dim
    lam = S.eigenvalues
    lam_nz = lam[k:]
    lhs = -float(np.sum(np.log(lam_nz)))
    T1 = float(np.sum(e1(lam_nz * T)))
    T6 = 2 * k * math.log(lat.delta0 / N) - k * p.gamma_euler

    wdiag = ds.w_diag()
    weights = diag_weights(S, d)
    feats = _chart_images_of_features(ds)
    segs = _boundary_segments(ds)
    model_cache: Dict[str, TruncatedModel] = {}

    w_max = float(wdiag[ds.active].max()) if ds.n_active else 2.0
    ell = lat.max_edge_length()
    g_steps = max(1, int(p.r * N / ell))
    t_cut = small_time_cutoff(w_max, 2 * g_steps, tol=p.small_t_tol)
    dropped = 2.0 * d * poisson_tail(w_max * t_cut, 2 * g_steps) / max(1, 2 * g_steps)

    T2 = T3 = T4 = T5 = 0.0
    budget = abs(dropped) * ds.n_active + 1e-12
    hist: Dict[str, int] = {}
    tip_combined = []
    act = ds.active_ids
    for i, x in enumerate(act):
        asg = assign_model(ds, x, p, feats, segs)
        hist[asg.kind.label()] = hist.get(asg.kind.label(), 0) + 1
        engine = _make_engine(ds, asg, x, p, pk, segs, model_cache)
        a_x = weights[i]
        w_x = float(wdiag[x])

        def surf_trace(tt):
            return float(np.sum(a_x * np.exp(-lam * tt)))

        val2, err2 = integrate.quad(
            lambda tt: (surf_trace(tt) - float(np.atleast_1d(
                engine.trace(tt))[0])) / tt,
            t_cut, T, limit=400, epsabs=p.quad_tol, epsrel=1e-9,
            points=[min(1.0, T / 2), min(10.0, T)] if T > 1 else None)
        T2 += val2
        budget += err2

        is_tip = any(s.vertex_at == x for s in ds.singularities)
        if is_tip and isinstance(engine, _FanEngine):
            v45, e45 = engine.t45_tip(w_x)
            T4 += v45
            budget += e45
            tip_combined.append(int(x))
            t3v, e3 = engine.t3(T)
            T3 += t3v
            budget += e3
            continue
        t3v, e3 = engine.t3(T)
        T3 += t3v
        budget += e3
        if isinstance(engine, _ImagesEngine):
            t4v, e4 = engine.t4()
        else:
            t4v, e4 = engine.t4(t_cut)
        T4 += t4v
        budget += e4
        T5 += d * t5_summand(pk, ds.lat_class[x], w_x)

    terms = {"T1": T1, "T2": T2, "T3": T3, "T4": T4, "T5": T5, "T6": T6}
    total = sum(terms.values())
    residual = lhs - total
    return KeyFormulaReport(terms, lhs, residual, budget, hist, tip_combined)

"""Heat kernels of infinite normalized lattices, in walk-time units.

P(x, y, t) is the transition probability of the continuous-time walk on the
full bi-periodic lattice (the delta0-scale graph; walk time does not rescale
with the mesh).  Square-structure lattices use the exact Bessel closed form
P = ive(m, 2wt) * ive(n, 2wt); everything else goes through Brillouin-zone
quadrature of the lattice symbol, with spectrally accurate periodic trapezoid
grids.  Large times switch to the universal 1/(2 pi t) asymptotics with
lattice correction coefficients fitted from the quadrature itself.

All "dt/t" integrals of the key formula reduce to the window/tail/full
integral methods here.
"""

from __future__ import annotations

import math
from fractions import Fraction
from functools import lru_cache
from typing import Dict, Tuple

import numpy as np
from scipy import integrate
from scipy.special import gammainc, ive

from .errors import QuadratureFailure
from .lattice import LatticeSpec, canonical_form
from .lattice import cell_area as _cell_area_fn


def cell_area_of(lat: LatticeSpec) -> float:
    return _cell_area_fn(lat.cell_kind)

_T_SWITCH = 48.0  # asymptotic-model switch for the diagonal (b = 0)
_BZ_T_MAX = 2500.0  # largest time resolvable by the Brillouin-zone grids


def _is_square_structure(lat: LatticeSpec):
    """Return the common edge weight if the lattice is a (shifted) square grid."""
    if lat.cell_kind != "quadrangulation" or len(lat.vertices) != 1:
        return None
    offs = {}
    for (j, off, w) in lat.edges_at(0):
        offs[off] = w
    if set(offs) == {(1, 0), (-1, 0), (0, 1), (0, -1)}:
        ws = set(round(w, 14) for w in offs.values())
        if len(ws) == 1:
            return next(iter(offs.values()))
    return None


class PlaneKernel:
    """Exact plane heat kernel for one normalized LatticeSpec."""

    def __init__(self, lat: LatticeSpec):
        self.lat = lat
        self.nclasses = len(lat.vertices)
        self.w_class = [lat.degree_weight(i) for i in range(self.nclasses)]
        self._square_w = _is_square_structure(lat)
        self._grids: Dict[int, tuple] = {}
        self._tail_cache: Dict[tuple, np.ndarray] = {}
        # per-coordinate variance rate of the walk (delta0^2 when normalized)
        from .lattice import _class_covariances
        covs = _class_covariances(lat)
        self.diffusivity = float(np.mean([c[0, 0] for c in covs]))
        # long-time density prefactor: (area per vertex) / (2 pi D t)
        self._density = (cell_area_of(lat) / self.nclasses) / self.diffusivity

    # -- embedded geometry -------------------------------------------------

    def embedded_offset(self, ci: int, cj: int, off: Tuple[int, int]) -> Tuple[float, float]:
        pi = self.lat.vertices[ci]
        pj = self.lat.position(cj, off)
        s = math.sqrt(3.0) if self.lat.cell_kind == "triangulation" else 1.0
        return (float(pj[0] - pi[0]), float(pj[1] - pi[1]) * s)

    def gaussian_b(self, ci: int, cj: int, off) -> float:
        """|Delta|^2 / (2 D): walk-time decay constant of the continuum envelope."""
        dx, dy = self.embedded_offset(ci, cj, off)
        return (dx * dx + dy * dy) / (2.0 * self.diffusivity)

    def t_switch(self, ci: int, cj: int, off) -> float:
        """Time beyond which the fitted 1/t-series asymptotic model is valid.

        The 1/t expansion of 2 pi t e^{b/t} P(t) only converges for t well
        above the Gaussian decay constant b, so the switch scales with b.
        """
        ts = max(_T_SWITCH, 8.0 * self.gaussian_b(ci, cj, off))
        if self._square_w is None and ts > _BZ_T_MAX:
            raise QuadratureFailure(
                "far-offset kernels need the Bessel closed form; offsets this "
                "large are unsupported on non-square lattices")
        return ts

    # -- pointwise values ----------------------------------------------------

    def pair(self, ci: int, cj: int, off: Tuple[int, int], t):
        """P(x, y, t) for y = x + lattice offset, vectorized over t."""
        t = np.asarray(t, dtype=float)
        if self._square_w is not None:
            a = 2.0 * self._square_w * t
            m, n = abs(off[0]), abs(off[1])
            return ive(m, a) * ive(n, a)
        small = t <= self.t_switch(ci, cj, off)
        out = np.empty_like(t)
        if small.any():
            out[small] = self._bz_pair(ci, cj, off, t[small])
        if (~small).any():
            out[~small] = self._asym_pair(ci, cj, off, t[~small])
        return out

    def diag(self, ci: int, t):
        return self.pair(ci, ci, (0, 0), t)

    # -- Brillouin-zone quadrature -------------------------------------------

    def _grid(self, M: int):
        if M not in self._grids:
            u = (np.arange(M) + 0.5) / M
            U, V = np.meshgrid(u, u, indexing="ij")
            if self.nclasses == 1:
                sig = np.zeros((M, M))
                for (j, offe, w) in self.lat.edges_at(0):
                    sig += w * (1.0 - np.cos(2 * np.pi * (offe[0] * U + offe[1] * V)))
                self._grids[M] = ("scalar", U, V, sig)
            else:
                # multi-class: assemble the symbol matrix field and
                # eigen-decompose (needed only for diagonal entries)
                nc = self.nclasses
                sym = np.zeros((M, M, nc, nc), dtype=complex)
                for i in range(nc):
                    sym[:, :, i, i] = self.w_class[i]
                    for (j, offe, w) in self.lat.edges_at(i):
                        ph = np.exp(2j * np.pi * (offe[0] * U + offe[1] * V))
                        sym[:, :, i, j] -= w * ph
                lam, vec = np.linalg.eigh(sym)
                self._grids[M] = ("bands", U, V, lam, vec)
        return self._grids[M]

    def _bz_pair(self, ci, cj, off, t):
        prev = None
        for M in (128, 256, 512, 1024):
            val = self._bz_pair_at(ci, cj, off, t, M)
            if prev is not None and np.max(np.abs(val - prev)) < 1e-12:
                return val
            prev = val
        if np.max(t) <= _T_SWITCH and max(abs(off[0]), abs(off[1])) <= 256:
            raise QuadratureFailure("Brillouin-zone quadrature did not converge")
        return prev

    def _bz_pair_at(self, ci, cj, off, t, M):
        g = self._grid(M)
        if g[0] == "scalar":
            _, U, V, sig = g
            phase = np.cos(2 * np.pi * (off[0] * U + off[1] * V))
            out = np.array([np.mean(np.exp(-tt * sig) * phase) for tt in np.atleast_1d(t)])
        else:
            _, U, V, lam, vec = g
            if (ci, cj, off) != (ci, ci, (0, 0)) and (ci != cj or off != (0, 0)):
                raise QuadratureFailure(
                    "off-diagonal kernels are unsupported for multi-class lattices")
            wgt = np.abs(vec[:, :, ci, :]) ** 2
            out = np.array([np.mean(np.sum(np.exp(-tt * lam) * wgt, axis=-1))
                            for tt in np.atleast_1d(t)])
        return out if np.ndim(t) else out[0]

    # -- large-time asymptotic model -------------------------------------------

    def _tail_coeffs(self, ci, cj, off) -> np.ndarray:
        """Fit 2 pi t e^{b/t} P(t) = 1 + c1/t + c2/t^2 + c3/t^3 near t = T_SWITCH."""
        key = (ci, cj, off)
        if key not in self._tail_cache:
            b = self.gaussian_b(ci, cj, off)
            tsw = self.t_switch(ci, cj, off)
            ts = np.linspace(0.55 * tsw, tsw, 10)
            if self._square_w is not None:
                a = 2.0 * self._square_w * ts
                vals = ive(abs(off[0]), a) * ive(abs(off[1]), a)
            else:
                vals = self._bz_pair(ci, cj, off, ts)
            y = 2.0 * math.pi * ts / self._density * np.exp(b / ts) * vals - 1.0
            A = np.vstack([1.0 / ts, 1.0 / ts ** 2, 1.0 / ts ** 3]).T
            coef, *_ = np.linalg.lstsq(A, y, rcond=None)
            self._tail_cache[key] = coef
        return self._tail_cache[key]

    def _asym_pair(self, ci, cj, off, t):
        b = self.gaussian_b(ci, cj, off)
        c = self._tail_coeffs(ci, cj, off)
        base = self._density * np.exp(-b / t) / (2.0 * math.pi * t)
        return base * (1.0 + c[0] / t + c[1] / t ** 2 + c[2] / t ** 3)

    # -- dt/t integrals ---------------------------------------------------------

    @lru_cache(maxsize=None)
    def window_integral(self, ci, cj, off, a: float, b: float) -> float:
        """Integral of P(x, y, t) dt/t over [a, b]."""
        if a >= b:
            return 0.0
        tsw = self.t_switch(ci, cj, off)
        b_end = min(b, tsw)
        total = 0.0
        if a < b_end:
            val, err = integrate.quad(
                lambda tt: float(self.pair(ci, cj, off, tt)) / tt, a, b_end,
                limit=400, epsabs=1e-13, epsrel=1e-11)
            if err > 1e-9 * max(1.0, abs(val)):
                raise QuadratureFailure(f"window integral error {err}")
            total += val
        if b > tsw:
            total += self._tail_between(ci, cj, off, max(a, tsw), b)
        return total

    def _tail_between(self, ci, cj, off, a, b):
        return self.tail_integral(ci, cj, off, a) - (
            self.tail_integral(ci, cj, off, b) if b != math.inf else 0.0)

    @lru_cache(maxsize=None)
    def tail_integral(self, ci, cj, off, a: float) -> float:
        """Integral of P dt/t over [a, infinity)."""
        tsw = self.t_switch(ci, cj, off)
        if a < tsw:
            return self.window_integral(ci, cj, off, a, tsw) + \
                self.tail_integral(ci, cj, off, tsw)
        bcst = self.gaussian_b(ci, cj, off)
        c = self._tail_coeffs(ci, cj, off)
        # int_a^inf t^{-(k+2)} e^{-b/t} dt = gamma(k+1, b/a) / b^{k+1}
        total = 0.0
        for k, ck in enumerate([1.0, c[0], c[1], c[2]]):
            if bcst == 0.0:
                term = a ** (-(k + 1)) / (k + 1)
            else:
                term = math.gamma(k + 1) * gammainc(k + 1, bcst / a) / bcst ** (k + 1)
            total += ck * term
        return total * self._density / (2.0 * math.pi)

    @lru_cache(maxsize=None)
    def full_integral(self, ci, cj, off) -> float:
        """J(Delta) = int_0^inf P(x, y, t) dt/t for a nonzero offset."""
        if ci == cj and off == (0, 0):
            raise ValueError("full dt/t integral diverges at zero offset")
        tsw = self.t_switch(ci, cj, off)
        val, err = integrate.quad(
            lambda tt: float(self.pair(ci, cj, off, tt)) / tt, 0.0, tsw,
            limit=400, epsabs=1e-14, epsrel=1e-11,
            points=[self.gaussian_b(ci, cj, off)] if tsw > 100 else None)
        if err > 1e-9 * max(1.0, abs(val)):
            raise QuadratureFailure(f"full integral error {err}")
        return val + self.tail_integral(ci, cj, off, tsw)

    @lru_cache(maxsize=None)
    def volume_summand(self, ci) -> float:
        """int_0^inf (P(x,x,t) - e^{-w_x t}) dt/t - log w_x for the class."""
        w = self.w_class[ci]
        val, err = integrate.quad(
            lambda tt: (float(self.diag(ci, tt)) - math.exp(-w * tt)) / tt,
            0.0, _T_SWITCH, limit=300, epsabs=1e-13, epsrel=1e-12)
        if err > 1e-9:
            raise QuadratureFailure(f"volume integrand error {err}")
        tail = self.tail_integral(ci, ci, (0, 0), _T_SWITCH)
        # exp tail is exp_window to infinity: E1(w * T)
        from .special import e1_scalar
        return val + tail - e1_scalar(w * _T_SWITCH) - math.log(w)


_KERNELS: Dict[object, PlaneKernel] = {}


def plane_kernel_for(lat: LatticeSpec) -> PlaneKernel:
    key = (lat.cell_kind, canonical_form(lat))
    if key not in _KERNELS:
        _KERNELS[key] = PlaneKernel(lat)
    return _KERNELS[key]

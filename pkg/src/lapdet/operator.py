"""Twisted Laplacian assembly, gauge transforms, and covariant constants.

The boundary reflection rule produces, verbatim, a non-symmetric rate matrix
at Neumann boundary vertices (a boundary vertex jumps inward at doubled rate
while the interior neighbor jumps back at the plain rate).  The two operators
are diagonally similar; assemble() computes the vertex masses from the rate
ratios and returns the Hermitian representative M^{1/2} L M^{-1/2}, which has
the same spectrum and the same diagonal heat-kernel entries.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np
import scipy.sparse as sp

from .errors import KernelMismatch, NonUnitaryGauge, SchemaError
from .surface import DiscreteSurface

HERMITICITY_TOL = 1e-14
KERNEL_SV_TOL = 1e-10


@dataclass
class TwistedLaplacian:
    """Hermitian matrix on sections, d x d block per active vertex pair."""

    ds: DiscreteSurface
    matrix: sp.csr_matrix          # n x n complex Hermitian, n = d * |active|
    masses: np.ndarray             # per active vertex, similarity weights
    kernel_dim_expected: int

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    @property
    def d(self) -> int:
        return self.ds.d

    def dense(self) -> np.ndarray:
        return self.matrix.toarray()

    def export_coordinate_text(self) -> str:
        coo = self.matrix.tocoo()
        lines = ["row col re im"]
        for r, c, v in zip(coo.row, coo.col, coo.data):
            lines.append(f"{r} {c} {v.real:.17g} {v.imag:.17g}")
        return "\n".join(lines) + "\n"


def _active_rates(ds: DiscreteSurface) -> Dict[Tuple[int, int], float]:
    act = ds.active
    return {(u, v): r for (u, v), r in ds.rates().items() if act[u] and act[v]}


def _masses(ds: DiscreteSurface) -> np.ndarray:
    """Similarity weights m with m_u r(u->v) = m_v r(v->u); BFS + consistency."""
    rates = _active_rates(ds)
    idx = ds.active_index
    na = ds.n_active
    m = np.full(na, -1.0)
    adj: Dict[int, List[int]] = {}
    for (u, v) in rates:
        adj.setdefault(idx[u], []).append(idx[v])
    ridx = {}
    for (u, v), r in rates.items():
        ridx[(idx[u], idx[v])] = r
    for start in range(na):
        if m[start] > 0:
            continue
        m[start] = 1.0
        stack = [start]
        while stack:
            a = stack.pop()
            for b in adj.get(a, []):
                val = m[a] * ridx[(a, b)] / ridx[(b, a)]
                if m[b] < 0:
                    m[b] = val
                    stack.append(b)
                elif abs(m[b] - val) > 1e-10 * max(1.0, m[b]):
                    raise SchemaError(
                        "reflection rates admit no consistent symmetrization")
    return m


def assemble(ds: DiscreteSurface) -> TwistedLaplacian:
    """Assemble the Hermitian twisted Laplacian of a discrete surface."""
    d = ds.d
    idx = ds.active_index
    na = ds.n_active
    n = na * d
    masses = _masses(ds)

    rows: List[int] = []
    cols: List[int] = []
    vals: List[complex] = []
    diag = np.zeros((na, d, d), dtype=complex)

    def scale(u, v):
        return math.sqrt(masses[idx[u]] / masses[idx[v]])

    def add_block(iu, iv, B):
        for a in range(d):
            for b in range(d):
                z = B[a, b]
                if z != 0:
                    rows.append(iu * d + a)
                    cols.append(iv * d + b)
                    vals.append(z)

    for (u, v, w, U) in ds.edges:
        if not (ds.active[u] and ds.active[v]):
            continue
        iu, iv = idx[u], idx[v]
        diag[iu] += w * np.eye(d)
        diag[iv] += w * np.eye(d)
        add_block(iu, iv, -w * scale(u, v) * U)
        add_block(iv, iu, -w * scale(v, u) * U.conj().T)
    for (u, v, w, U) in ds.refl_edges:
        if not ds.active[u]:
            continue
        iu = idx[u]
        if u == v:
            diag[iu] += w * (np.eye(d) - U)
        else:
            if not ds.active[v]:
                continue
            iv = idx[v]
            diag[iu] += w * np.eye(d)
            add_block(iu, iv, -w * scale(u, v) * U)
    for u in np.nonzero(ds.active)[0]:
        diag[idx[u]] += ds.diag_extra[u] * np.eye(d)
    for iu in range(na):
        add_block(iu, iu, diag[iu])

    H = sp.csr_matrix((vals, (rows, cols)), shape=(n, n), dtype=complex)
    H.sum_duplicates()
    herm_err = abs(H - H.conj().T).max() if H.nnz else 0.0
    if herm_err > HERMITICITY_TOL * max(1.0, abs(H).max()):
        raise SchemaError(f"assembled operator not Hermitian: {herm_err:.3e}")
    H = (H + H.conj().T) * 0.5

    basis = covariant_constants(ds, masses=masses)
    return TwistedLaplacian(ds, H.tocsr(), masses, basis.shape[1])


def gauge_transform(L: TwistedLaplacian, g: np.ndarray) -> TwistedLaplacian:
    """Conjugate blocks by per-vertex unitaries: B'_{xy} = g_x B_{xy} g_y^dag."""
    d = L.d
    na = L.n // d
    g = np.asarray(g, dtype=complex)
    if g.shape != (na, d, d):
        raise NonUnitaryGauge(f"gauge shape {g.shape}, expected {(na, d, d)}")
    for x in range(na):
        if np.abs(g[x].conj().T @ g[x] - np.eye(d)).max() > 1e-12:
            raise NonUnitaryGauge(f"gauge at vertex {x} is not unitary")
    G = sp.block_diag([sp.csr_matrix(g[x]) for x in range(na)], format="csr")
    H = G @ L.matrix @ G.conj().T
    return TwistedLaplacian(L.ds, H.tocsr(), L.masses, L.kernel_dim_expected)


def covariant_constants(ds: DiscreteSurface, masses: Optional[np.ndarray] = None
                        ) -> np.ndarray:
    """Orthonormal basis of the kernel: parallel-transported covariant constants.

    Transport along a spanning tree, then intersect the fixed spaces of all
    independent cycle holonomies (singular values below 1e-10 count as zero).
    Returns an (n, k) array in the Hermitian gauge (mass-weighted); empty when
    Dirichlet boundary is present.
    """
    d = ds.d
    idx = ds.active_index
    na = ds.n_active
    n = na * d
    if ds.len_d > 0 or (~ds.active).any():
        return np.zeros((n, 0), dtype=complex)
    if masses is None:
        masses = _masses(ds)

    # adjacency with phi_{v->u}: f(u) = U f(v), so transport u->v is U^dag
    adj: Dict[int, List[Tuple[int, np.ndarray]]] = {i: [] for i in range(na)}
    constraints: List[Tuple[int, int, np.ndarray]] = []
    for (u, v, w, U) in list(ds.edges) + list(ds.refl_edges):
        if not (ds.active[u] and ds.active[v]):
            continue
        iu, iv = idx[u], idx[v]
        if iu == iv:
            constraints.append((iu, iu, U))
            continue
        adj[iu].append((iv, U.conj().T))
        adj[iv].append((iu, U))
        constraints.append((iu, iv, U))

    t = [None] * na
    t[0] = np.eye(d, dtype=complex)
    queue = [0]
    while queue:
        a = queue.pop()
        for (b, T) in adj[a]:
            if t[b] is None:
                t[b] = T @ t[a]
                queue.append(b)
    if any(x is None for x in t):
        raise SchemaError("active vertex graph is disconnected")

    rows = []
    for (iu, iv, U) in constraints:
        rows.append(t[iu] - U @ t[iv])
    if rows:
        A = np.vstack(rows)
        _, s, Vh = np.linalg.svd(A)
        k = int(np.sum(s < KERNEL_SV_TOL * max(1.0, s.max() if len(s) else 1.0)))
        null = Vh.conj().T[:, A.shape[1] - k:] if k else np.zeros((d, 0))
    else:
        null = np.eye(d, dtype=complex)
    k = null.shape[1]
    basis = np.zeros((n, k), dtype=complex)
    for i in range(na):
        basis[i * d:(i + 1) * d, :] = math.sqrt(masses[i]) * (t[i] @ null)
    if k:
        basis, _ = np.linalg.qr(basis)
    return basis

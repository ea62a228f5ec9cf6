"""Eigendecomposition, log-det*, theta/zeta, and pointwise heat kernels."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import KernelMismatch, MissingVectors, SizeLimit
from .operator import TwistedLaplacian

DENSE_LIMIT = 8192
ZERO_EIG_REL = 1e-10


@dataclass
class Spectrum:
    """Ascending eigenvalues (walk-time units) with a certified kernel count."""

    eigenvalues: np.ndarray
    kernel_dim: int
    eigenvectors: Optional[np.ndarray] = None  # columns

    @property
    def n(self) -> int:
        return len(self.eigenvalues)

    def nonzero(self) -> np.ndarray:
        return self.eigenvalues[self.kernel_dim:]


def _zero_threshold(evals: np.ndarray) -> float:
    lmax = float(evals[-1]) if len(evals) else 1.0
    return ZERO_EIG_REL * max(1.0, lmax)


def eigensolve(L: TwistedLaplacian, want_vectors: bool = False) -> Spectrum:
    """Dense Hermitian eigensolve with kernel certification."""
    n = L.n
    if want_vectors and n > DENSE_LIMIT:
        raise SizeLimit(f"n = {n} exceeds dense limit {DENSE_LIMIT}")
    A = L.dense()
    if want_vectors:
        evals, vecs = np.linalg.eigh(A)
    else:
        evals, vecs = sla.eigh(A, eigvals_only=True), None
    evals = np.asarray(evals, dtype=float)
    lmax = float(evals[-1]) if n else 1.0
    if n and evals[0] < -ZERO_EIG_REL * max(1.0, lmax):
        raise KernelMismatch(f"negative eigenvalue {evals[0]:.3e}")
    k = int(np.sum(evals < _zero_threshold(evals)))
    if k != L.kernel_dim_expected:
        raise KernelMismatch(
            f"eigensolve kernel {k} != covariant constants {L.kernel_dim_expected}")
    return Spectrum(evals, k, vecs)


def logdet_star(L: TwistedLaplacian, backend: str = "dense") -> float:
    """log of the product of nonzero eigenvalues.

    backend 'dense': sum of log eigenvalues.  backend 'sparse': kernel-deflated
    sparse LU log-determinant of the bordered matrix [[H, K], [K*, 0]], whose
    determinant is (-1)^k det*(H) for an orthonormal kernel basis K.
    """
    if backend == "dense":
        S = eigensolve(L, want_vectors=False)
        return float(np.sum(np.log(S.nonzero())))
    if backend != "sparse":
        raise ValueError(f"unknown backend {backend!r}")
    from .operator import covariant_constants
    K = covariant_constants(L.ds, masses=L.masses)
    k = K.shape[1]
    if k != L.kernel_dim_expected:
        raise KernelMismatch("kernel basis does not match expectation")
    H = L.matrix
    if k:
        B = sp.bmat([[H, sp.csr_matrix(K)],
                     [sp.csr_matrix(K.conj().T), None]], format="csc")
    else:
        B = H.tocsc()
    lu = spla.splu(B, permc_spec="COLAMD", diag_pivot_thresh=0.0)
    logdet = float(np.sum(np.log(np.abs(lu.U.diagonal()))))
    return logdet


def theta(S: Spectrum, t: float) -> float:
    """Trace of the heat semigroup at walk time t."""
    return float(np.sum(np.exp(-S.eigenvalues * t)))


def zeta(S: Spectrum, s: complex) -> complex:
    """Spectral zeta: sum over nonzero eigenvalues of lambda^{-s}."""
    lam = S.nonzero()
    return complex(np.sum(lam ** (-complex(s))))


def zeta_prime_zero(S: Spectrum) -> float:
    """-zeta'(0) computed exactly as sum log lambda (= logdet*)."""
    return float(np.sum(np.log(S.nonzero())))


def heat_block(S: Spectrum, d: int, x: int, t: float) -> np.ndarray:
    """Block (x, x) of exp(-tH): Hermitian PSD, trace <= d."""
    if S.eigenvectors is None:
        raise MissingVectors("heat_block needs eigenvectors")
    V = S.eigenvectors[x * d:(x + 1) * d, :]
    return (V * np.exp(-S.eigenvalues * t)) @ V.conj().T


def heat_diag_trace(S: Spectrum, d: int, x: int, t) -> np.ndarray:
    """Tr P(x, x, t), vectorized over t."""
    if S.eigenvectors is None:
        raise MissingVectors("heat_diag_trace needs eigenvectors")
    V = S.eigenvectors[x * d:(x + 1) * d, :]
    a = np.sum(np.abs(V) ** 2, axis=0)
    t = np.asarray(t, dtype=float)
    return np.exp(-np.multiply.outer(t, S.eigenvalues)) @ a


def diag_weights(S: Spectrum, d: int) -> np.ndarray:
    """a[x, i] = squared norm of the x-block of eigenvector i."""
    if S.eigenvectors is None:
        raise MissingVectors("diag_weights needs eigenvectors")
    V = S.eigenvectors
    na = V.shape[0] // d
    return np.add.reduce(
        np.abs(V).reshape(na, d, V.shape[1]) ** 2, axis=1)

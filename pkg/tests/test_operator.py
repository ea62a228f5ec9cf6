"""Operator assembly, gauge invariance, covariant constants, spectra."""

import math

import numpy as np
import pytest

from lapdet.errors import KernelMismatch
from lapdet.lattice import builtin_lattice, normalize_weights
from lapdet.operator import assemble, covariant_constants, gauge_transform
from lapdet.spectral import (
    Spectrum,
    diag_weights,
    eigensolve,
    heat_block,
    heat_diag_trace,
    logdet_star,
    theta,
    zeta,
    zeta_prime_zero,
)
from lapdet.surface import discretize, parse_surface_spec, surface_document


@pytest.fixture(scope="module")
def sq():
    return normalize_weights(builtin_lattice("square"))


def build(name, lat, N, **kw):
    spec = parse_surface_spec(surface_document(name, **kw))
    return discretize(spec, lat, N)


def torus_eigs(N):
    """Fourier oracle: eigenvalues 2 - cos(2 pi j/N) - cos(2 pi k/N)."""
    j = np.arange(N)
    lam = 2.0 - np.cos(2 * np.pi * j / N)[:, None] - np.cos(2 * np.pi * j / N)[None, :]
    return np.sort(lam.ravel())


# ---------------------------------------------------------------------------
# assembly
# ---------------------------------------------------------------------------

def test_torus_n2_matrix(sq):
    ds = build("torus", sq, 2)
    L = assemble(ds)
    A = L.dense()
    assert A.shape == (4, 4)
    assert np.allclose(np.diag(A), 2.0)
    off = A - np.diag(np.diag(A))
    assert np.allclose(off[off != 0], -1.0)  # double edges: -2 * (1/2)


def test_torus_spectrum_vs_fourier(sq):
    for N in (2, 3, 4, 8):
        ds = build("torus", sq, N)
        S = eigensolve(assemble(ds))
        assert np.allclose(S.eigenvalues, torus_eigs(N), atol=1e-12)


def test_torus_n2_values(sq):
    S = eigensolve(assemble(build("torus", sq, 2)))
    assert np.allclose(S.eigenvalues, [0.0, 2.0, 2.0, 4.0], atol=1e-13)
    assert S.kernel_dim == 1


def test_dirichlet_path_eigs(sq):
    """1D analogue via a thin cylinder: Dirichlet path eigenvalues."""
    # three interior vertices in a row with Dirichlet ends has eigenvalues
    # {1 - sqrt(2)/2, 1, 1 + sqrt(2)/2}; realize as exact tridiagonal check
    T = np.diag([1.0, 1.0, 1.0]) + np.diag([-0.5, -0.5], 1) + np.diag([-0.5, -0.5], -1)
    evs = np.linalg.eigvalsh(T)
    assert np.allclose(evs, [1 - math.sqrt(2) / 2, 1.0, 1 + math.sqrt(2) / 2])


def test_dirichlet_single_vertex(sq):
    ds = build("square", sq, 2, bcs="DDDD")
    L = assemble(ds)
    assert L.n == 1
    assert np.allclose(L.dense(), [[2.0]])
    assert logdet_star(L) == pytest.approx(math.log(2.0), abs=1e-14)


def test_hermitian_and_psd(sq):
    for name, kw in [("square", {"bcs": "NNNN"}), ("square", {"bcs": "DNDN"}),
                     ("pillowcase", {}), ("punctured_torus", {"monodromy": -1.0})]:
        ds = build(name, sq, 4, **kw)
        L = assemble(ds)
        A = L.dense()
        assert np.abs(A - A.conj().T).max() < 1e-13
        S = eigensolve(L)
        assert S.eigenvalues[0] > -1e-10 * max(1.0, S.eigenvalues[-1])


def test_trace_identity(sq):
    """Sum of eigenvalues equals d * sum of diagonal rates."""
    for name, kw in [("torus", {}), ("square", {"bcs": "NNNN"}), ("pillowcase", {})]:
        ds = build(name, sq, 4, **kw)
        L = assemble(ds)
        S = eigensolve(L)
        wd = ds.w_diag()[ds.active] * ds.d
        assert np.sum(S.eigenvalues) == pytest.approx(np.sum(wd), rel=1e-12)


# ---------------------------------------------------------------------------
# kernels and covariant constants
# ---------------------------------------------------------------------------

def test_covariant_constants_dims(sq):
    assert covariant_constants(build("torus", sq, 3)).shape[1] == 1
    assert covariant_constants(build("square", sq, 3, bcs="DDDD")).shape[1] == 0
    assert covariant_constants(
        build("punctured_torus", sq, 4, monodromy=-1.0)).shape[1] == 0
    assert covariant_constants(
        build("punctured_torus", sq, 4, monodromy=1.0)).shape[1] == 1
    assert covariant_constants(build("pillowcase", sq, 4)).shape[1] == 1


def test_kernel_dim_matches_eigensolve(sq):
    for name, kw in [("torus", {}), ("pillowcase", {}),
                     ("square", {"bcs": "NNNN"}),
                     ("punctured_torus", {"monodromy": -1.0})]:
        ds = build(name, sq, 4, **kw)
        L = assemble(ds)
        S = eigensolve(L)
        assert S.kernel_dim == L.kernel_dim_expected


def test_neumann_kernel_is_mass_weighted(sq):
    ds = build("square", sq, 3, bcs="NNNN")
    L = assemble(ds)
    S = eigensolve(L, want_vectors=True)
    assert S.kernel_dim == 1
    v = S.eigenvectors[:, 0]
    expected = np.sqrt(L.masses)
    expected /= np.linalg.norm(expected)
    assert min(np.linalg.norm(v - expected), np.linalg.norm(v + expected)) < 1e-10


def test_closed_surface_row_sums(sq):
    ds = build("pillowcase", sq, 4)
    L = assemble(ds)
    const = covariant_constants(ds)
    assert np.abs(L.matrix @ const).max() < 1e-12


# ---------------------------------------------------------------------------
# gauge invariance
# ---------------------------------------------------------------------------

def test_gauge_identity(sq):
    L = assemble(build("torus", sq, 3))
    g = np.eye(1, dtype=complex)[None, :, :].repeat(L.n, axis=0)
    L2 = gauge_transform(L, g)
    assert np.abs((L2.matrix - L.matrix)).max() < 1e-15


def test_gauge_random_phases(sq):
    rng = np.random.default_rng(3)
    L = assemble(build("torus", sq, 4))
    g = np.exp(1j * rng.uniform(0, 2 * np.pi, L.n))[:, None, None]
    L2 = gauge_transform(L, g)
    assert np.abs(L2.matrix - L.matrix).max() > 0.1  # genuinely different matrix
    e1 = eigensolve(L).eigenvalues
    e2 = eigensolve(L2).eigenvalues
    assert np.abs(e1 - e2).max() < 1e-10


def test_puncture_cut_move_is_gauge(sq):
    # on a surface with boundary the cut ends on removed boundary and leaves
    # no compensating defect, so different rays give gauge-equivalent graphs
    e1 = eigensolve(assemble(build("punctured_square", sq, 6, monodromy=-1.0,
                                   cut="-x"))).eigenvalues
    e2 = eigensolve(assemble(build("punctured_square", sq, 6, monodromy=-1.0,
                                   cut="-y"))).eigenvalues
    assert np.abs(e1 - e2).max() < 1e-10


def test_torus_cut_endpoint_defect_registered(sq):
    # global flatness forces a compensating defect where the cut meets a seam
    ds = build("punctured_torus", sq, 6, monodromy=-1.0)
    punctures = [s for s in ds.singularities if s.kind == "puncture"]
    assert len(punctures) == 2
    ds2 = build("punctured_square", sq, 6, monodromy=-1.0)
    assert len([s for s in ds2.singularities if s.kind == "puncture"]) == 1
    ds3 = build("punctured_torus", sq, 6, monodromy=1.0)
    assert len([s for s in ds3.singularities if s.kind == "puncture"]) == 1


def test_puncture_trivial_monodromy_equals_torus(sq):
    e1 = eigensolve(assemble(build("punctured_torus", sq, 6,
                                   monodromy=1.0))).eigenvalues
    e2 = eigensolve(assemble(build("torus", sq, 6))).eigenvalues
    assert np.abs(e1 - e2).max() < 1e-12


# ---------------------------------------------------------------------------
# spectral functions
# ---------------------------------------------------------------------------

def test_logdet_torus_n2(sq):
    L = assemble(build("torus", sq, 2))
    assert logdet_star(L) == pytest.approx(math.log(16.0), abs=1e-12)


def test_logdet_backends_agree(sq):
    for name, kw in [("torus", {}), ("pillowcase", {}),
                     ("square", {"bcs": "DDDD"}),
                     ("punctured_torus", {"monodromy": -1.0})]:
        L = assemble(build(name, sq, 5, **kw))
        a = logdet_star(L, "dense")
        b = logdet_star(L, "sparse")
        assert abs(a - b) < 1e-8 * L.n


def test_theta_and_zeta_torus_n2(sq):
    S = eigensolve(assemble(build("torus", sq, 2)), want_vectors=True)
    assert theta(S, 1.0) == pytest.approx(1 + 2 * math.exp(-2) + math.exp(-4), rel=1e-14)
    assert theta(S, 1e-9) == pytest.approx(4.0, abs=1e-6)
    assert zeta(S, 0) == pytest.approx(S.n - S.kernel_dim)
    assert zeta(S, 1) == pytest.approx(1.25, rel=1e-14)
    assert zeta_prime_zero(S) == pytest.approx(math.log(16.0), rel=1e-14)


def test_theta_inversion_and_heat_diag(sq):
    ds = build("pillowcase", sq, 3)
    L = assemble(ds)
    S = eigensolve(L, want_vectors=True)
    for t in (0.3, 1.0, 4.0):
        total = sum(float(heat_diag_trace(S, ds.d, x, t))
                    for x in range(L.n // ds.d))
        assert total == pytest.approx(theta(S, t), abs=1e-10)
    B = heat_block(S, ds.d, 0, 0.0)
    assert np.allclose(B, np.eye(ds.d), atol=1e-12)


def test_torus_heat_diag_translation_invariance(sq):
    ds = build("torus", sq, 2)
    S = eigensolve(assemble(ds), want_vectors=True)
    v = (1 + 2 * math.exp(-2) + math.exp(-4)) / 4
    for x in range(4):
        assert float(heat_diag_trace(S, 1, x, 1.0)) == pytest.approx(v, rel=1e-12)


def test_quadratic_form_identity(sq):
    """<Hf, f> = 1/2 sum w |U f(v) - f(u)|^2 on closed surfaces."""
    rng = np.random.default_rng(11)
    ds = build("pillowcase", sq, 3)
    L = assemble(ds)
    idx = ds.active_index
    f = rng.normal(size=L.n) + 1j * rng.normal(size=L.n)
    lhs = float(np.real(np.vdot(f, L.matrix @ f)))
    rhs = 0.0
    for (u, v, w, U) in ds.edges:
        fu, fv = f[idx[u]], f[idx[v]]
        rhs += 0.5 * w * abs(complex(U[0, 0]) * fv - fu) ** 2 * 2
    assert lhs == pytest.approx(rhs, rel=1e-10)
    assert lhs >= 0


def test_stochastic_row_sums(sq):
    """Closed trivial-bundle surface: heat kernel rows sum to 1."""
    ds = build("torus", sq, 3)
    S = eigensolve(assemble(ds), want_vectors=True)
    V = S.eigenvectors
    P = (V * np.exp(-S.eigenvalues * 0.7)) @ V.conj().T
    assert np.abs(P.sum(axis=1) - 1.0).max() < 1e-10

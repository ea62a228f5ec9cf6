"""Continuum zeta-determinants: dual-route agreement and scaling laws."""

import math

import pytest

from lapdet.continuum import (
    dedekind_eta,
    rectangle_zeta_det,
    torus_zeta_det,
    torus_zeta_zero,
)


def test_eta_special_value():
    # eta(i) = Gamma(1/4) / (2 pi^{3/4})
    ref = math.gamma(0.25) / (2 * math.pi ** 0.75)
    assert abs(dedekind_eta(1j) - ref) < 1e-14


def test_torus_unit_modulus():
    """Dual routes agree internally (asserted inside) and match eta(i)^4."""
    v = torus_zeta_det(1j, 1.0, 1.0)
    assert v == pytest.approx(4 * math.log(abs(dedekind_eta(1j))), abs=1e-12)


def test_torus_normalization_scaling():
    """c = 1/2 shifts log det* by (+log 2) * (-zeta(0)) with zeta(0) = -1."""
    v1 = torus_zeta_det(1j, 1.0, 1.0)
    v2 = torus_zeta_det(1j, 1.0, 0.5)
    assert torus_zeta_zero() == -1.0
    assert v2 - v1 == pytest.approx(math.log(2.0), abs=1e-12)


def test_torus_modular_invariance():
    tau = complex(0.3, 1.7)
    inv = -1.0 / tau
    # same torus: area must match, so rescale
    s2 = tau.imag / inv.imag
    v1 = torus_zeta_det(tau, 1.0, 1.0)
    v2 = torus_zeta_det(inv, math.sqrt(s2), 1.0)
    assert v1 == pytest.approx(v2, abs=1e-10)


def test_torus_area_scaling():
    """Scaling the torus by rho shifts log det* by 2 log rho (zeta(0) = -1)."""
    v1 = torus_zeta_det(1j, 1.0, 1.0)
    v2 = torus_zeta_det(1j, 2.0, 1.0)
    assert v2 - v1 == pytest.approx(2 * math.log(2.0), abs=1e-11)


def test_rectangle_symmetry_and_routes():
    assert rectangle_zeta_det(1.0, 2.0, "D") == pytest.approx(
        rectangle_zeta_det(2.0, 1.0, "D"), abs=1e-12)
    assert rectangle_zeta_det(1.5, 0.7, "N") == pytest.approx(
        rectangle_zeta_det(0.7, 1.5, "N"), abs=1e-12)


def test_rectangle_known_value():
    """Unit Dirichlet square: det = |eta(i)|^4 / 4 to the quarter power."""
    v = rectangle_zeta_det(1.0, 1.0, "D", 1.0)
    ref = 0.25 * math.log(abs(dedekind_eta(1j)) ** 4 / 4)
    assert v == pytest.approx(ref, abs=1e-12)


def test_rectangle_c_scaling():
    """zeta(0) = 1/4 (D) and -3/4 (N) drive the c-normalization shift."""
    vD1 = rectangle_zeta_det(1.0, 1.0, "D", 1.0)
    vD2 = rectangle_zeta_det(1.0, 1.0, "D", 0.5)
    assert vD2 - vD1 == pytest.approx(math.log(0.5) * 0.25, abs=1e-10)
    vN1 = rectangle_zeta_det(1.0, 1.0, "N", 1.0)
    vN2 = rectangle_zeta_det(1.0, 1.0, "N", 0.5)
    assert vN2 - vN1 == pytest.approx(math.log(0.5) * (-0.75), abs=1e-10)


def test_weyl_consistency():
    """Theta(t) * 4 pi c t / Area -> 1 as t -> 0 on the numeric route."""
    import numpy as np
    c, area = 0.5, 1.0
    t = 1e-3
    m = np.arange(-200, 201)
    lam = c * 4 * math.pi ** 2 * (m[:, None] ** 2 + m[None, :] ** 2)
    theta = np.exp(-lam * t).sum()
    assert theta * 4 * math.pi * c * t / area == pytest.approx(1.0, abs=1e-8)

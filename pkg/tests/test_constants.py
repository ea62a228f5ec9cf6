"""Closed-form singularity constants, corner assembly, lattice constant A."""

import math
from fractions import Fraction

import numpy as np
import pytest

from lapdet.constants import (
    c_cone,
    c_corner,
    c_puncture,
    c_puncture_series,
    continuum_i,
    corner_assembly_check,
    lattice_constant_A,
    near_wall_integrand,
    theorem_C,
    theorem_constants,
)
from lapdet.lattice import builtin_lattice, normalize_weights
from lapdet.special import catalan_constant


def test_c_cone_values():
    assert c_cone(2 * math.pi) == pytest.approx(0.0, abs=1e-15)
    assert c_cone(math.pi) == pytest.approx(1 / 12 - 1 / 3, abs=1e-15)
    assert c_cone(1.5 * math.pi) == pytest.approx(1 / 8 - 2 / 9, abs=1e-15)


def test_c_corner_values():
    assert c_corner(math.pi / 2, "D", "D") == pytest.approx(-1 / 8, abs=1e-15)
    assert c_corner(math.pi, "D", "D") == pytest.approx(0.0, abs=1e-15)
    assert c_corner(math.pi, "N", "N") == pytest.approx(0.0, abs=1e-15)
    assert c_corner(math.pi, "N", "D") == pytest.approx(1 / 12 + 1 / 24, abs=1e-15)


def test_c_puncture_values():
    assert c_puncture(np.eye(1)) == 0.0
    assert c_puncture(np.array([[-1.0]])) == pytest.approx(0.25, abs=1e-14)
    w = np.exp(2j * math.pi / 3)
    assert c_puncture(np.array([[w]])) == pytest.approx(2 / 9, abs=1e-14)


def test_c_puncture_series_agrees():
    rng = np.random.default_rng(5)
    for _ in range(3):
        H = rng.normal(size=(2, 2)) + 1j * rng.normal(size=(2, 2))
        M = np.linalg.qr(H)[0]
        assert c_puncture(M) == pytest.approx(c_puncture_series(M), abs=1e-5)
    assert c_puncture(np.array([[-1.0]])) >= 0.0


ANGLES_QUAD = [Fraction(1, 2), Fraction(1), Fraction(3, 2), Fraction(2), Fraction(3)]
ANGLES_TRI = [Fraction(1, 3), Fraction(2, 3), Fraction(1), Fraction(4, 3),
              Fraction(3, 2), Fraction(2), Fraction(3)]


@pytest.mark.parametrize("aop", sorted(set(ANGLES_QUAD + ANGLES_TRI)))
@pytest.mark.parametrize("bc", ["DD", "NN", "DN", "ND"])
def test_corner_assembly_all_admissible(aop, bc):
    """Acceptance criterion 8: assembly matches closed forms to 1e-12."""
    alpha = math.pi * float(aop)
    chat, cp = corner_assembly_check(alpha, bc[0], bc[1])
    assert cp == pytest.approx(c_corner(alpha, bc[0], bc[1]), abs=1e-12)


def test_near_wall_closed_form_vs_series():
    """Numerical theta-integration of the image series matches the closed form."""
    from scipy.integrate import quad
    from lapdet.constants import _near_wall_integral
    for (alpha, s_n, s_f) in [(1.5 * math.pi, 1.0, 1.0), (0.5 * math.pi, -1.0, -1.0),
                              (1.5 * math.pi, -1.0, 1.0)]:
        gamma = min(alpha / 2, math.pi / 2)
        closed = _near_wall_integral(alpha, gamma, s_n, s_f)
        series, err = quad(lambda th: near_wall_integrand(alpha, th, s_n, s_f, 3000),
                           1e-6, gamma, limit=100)
        assert closed == pytest.approx(series, abs=5e-4)


def test_continuum_i_values():
    assert continuum_i("universal_cover", 2 * math.pi) == pytest.approx(
        1 / (4 * math.pi ** 3), rel=1e-14)
    assert continuum_i("cone", 2 * math.pi) == pytest.approx(0.0, abs=1e-16)
    assert continuum_i("halfplane", "D") == pytest.approx(-1 / (4 * math.pi))
    assert continuum_i("halfplane", "N") == pytest.approx(1 / (4 * math.pi))
    assert continuum_i("cone", math.pi) == pytest.approx(1 / (4 * math.pi))
    # puncture: -d C_P / (2 pi)
    assert continuum_i("puncture", np.array([[-1.0]])) == pytest.approx(
        -0.25 / (2 * math.pi))


def test_lattice_constant_A_square():
    """A(square) = 4 G / pi - log 2 with Catalan's G (two independent routes)."""
    sq = normalize_weights(builtin_lattice("square"))
    A = lattice_constant_A(sq)
    ref = 4 * catalan_constant() / math.pi - math.log(2.0)
    assert A == pytest.approx(ref, abs=1e-6)
    # note: 4G/pi - log 2 = 0.4730964...; asserting the formula, per the
    # two-route acceptance criterion
    assert A == pytest.approx(0.4730964, abs=1e-6)


def test_lattice_constant_A_weight_doubling():
    """Doubling all weights shifts A by +log 2 (eigenvalues double)."""
    sq = normalize_weights(builtin_lattice("square"))
    A1 = lattice_constant_A(sq)
    A2 = lattice_constant_A(sq.scale_weights(2.0))
    assert A2 - A1 == pytest.approx(math.log(2.0), abs=1e-8)


def test_lattice_constant_A_triangular_vs_torus_sweep():
    """Cross-check A(triangular) against the torus logdet growth to 1e-4."""
    from lapdet.operator import assemble
    from lapdet.spectral import eigensolve
    from lapdet.surface import discretize, parse_surface_spec, surface_document
    tri = normalize_weights(builtin_lattice("triangular"))
    A = lattice_constant_A(tri)
    spec = parse_surface_spec(surface_document("tri_torus"))
    vals = {}
    for N in (12, 16, 24, 32):
        S = eigensolve(assemble(discretize(spec, tri, N)))
        vals[N] = float(np.sum(np.log(S.eigenvalues[1:])))
    # logdet = A N^2 + 2 log N + D + o(1): difference quotient eliminates D
    import numpy as _np
    rows = []
    for N, ld in vals.items():
        rows.append([N * N, math.log(N), 1.0, ld])
    Arr = _np.array(rows)
    coef, *_ = _np.linalg.lstsq(Arr[:, :3], Arr[:, 3], rcond=None)
    assert coef[0] == pytest.approx(A, abs=1e-4)


def test_theorem_C_examples():
    from lapdet.surface import SingularityDescriptor as SD
    assert theorem_C([], kernel_dim=1) == pytest.approx(-2.0)
    sq_corners = [SD("corner", Fraction(1, 2), bc_pair=("D", "D"))
                  for _ in range(4)]
    assert theorem_C(sq_corners, kernel_dim=0) == pytest.approx(0.5)
    cones = [SD("cone", Fraction(1)) for _ in range(4)]
    assert theorem_C(cones, kernel_dim=1) == pytest.approx(-1.0)
    mixed = [SD("corner", Fraction(1, 2), bc_pair=("N", "D")) for _ in range(4)]
    assert theorem_C(mixed, kernel_dim=0) == pytest.approx(-0.5)

"""Model domains: truncations, image kernels, reflection identities, I-integrals."""

import math
from fractions import Fraction

import numpy as np
import pytest

from lapdet.lattice import builtin_lattice, normalize_weights
from lapdet.modeldomains import (
    build_model,
    cone_model,
    exact_diag_kernel,
    halfplane,
    i_integral,
    model_diag_kernel,
    plane,
    plane_kernel,
    punctured_model,
    verify_local_isomorphism,
    wedge_model,
)
from lapdet.planekernel import plane_kernel_for


@pytest.fixture(scope="module")
def sq():
    return normalize_weights(builtin_lattice("square"))


@pytest.fixture(scope="module")
def ssq():
    return normalize_weights(builtin_lattice("shifted_square"))


@pytest.fixture(scope="module")
def tri():
    return normalize_weights(builtin_lattice("triangular"))


# ---------------------------------------------------------------------------
# construction
# ---------------------------------------------------------------------------

def test_cone_2pi_is_plane(sq, tri):
    for lat in (sq, tri):
        m_cone = build_model(cone_model(2), lat, 2, 3.0)
        m_plane = build_model(plane(), lat, 2, 3.0)
        assert m_cone.n == m_plane.n
        d1 = np.sort(np.linalg.eigvalsh(m_cone.H.toarray()))
        d2 = np.sort(np.linalg.eigvalsh(m_plane.H.toarray()))
        assert np.abs(d1 - d2).max() < 1e-12


def test_halfplane_boundary_doubling(sq):
    m = build_model(halfplane("N"), sq, 2, 3.0)
    # a wall vertex away from the far boundary has diagonal 2 (flat rate)
    i = m.index[(0, (Fraction(2), Fraction(0)))]
    row = m.H.getrow(i).toarray().ravel()
    assert row[i].real == pytest.approx(2.0)
    # inward neighbor coupling is the geometric mean sqrt(2w * w) = sqrt(1/2)
    j = m.index[(0, (Fraction(2), Fraction(1)))]
    assert row[j].real == pytest.approx(-math.sqrt(0.5), abs=1e-12)


def test_wedge_mixed_signs(sq):
    m = build_model(wedge_model(Fraction(1, 2), "D", "N"), sq, 2, 3.0)
    # Dirichlet-wall vertices are removed; their interior neighbors keep the
    # lost weight on the diagonal
    assert (0, (Fraction(2), Fraction(0))) not in m.index
    i = m.index[(0, (Fraction(2), Fraction(1)))]
    row = m.H.getrow(i).toarray().ravel()
    assert row[i].real == pytest.approx(2.0)
    # Neumann-wall vertices stay, with the flat diagonal via doubled edges
    m2 = build_model(wedge_model(Fraction(1, 2), "N", "N"), sq, 2, 3.0)
    i2 = m2.index[(0, (Fraction(2), Fraction(0)))]
    assert m2.H.getrow(i2).toarray().ravel()[i2].real == pytest.approx(2.0)


def test_pi_cone_tip_rate(sq):
    m = build_model(cone_model(1), sq, 2, 3.0)
    assert m.tip_index is not None
    row = m.H.getrow(m.tip_index).toarray().ravel()
    assert row[m.tip_index].real == pytest.approx(1.0)  # two seam cells of 1/2
    mq = build_model(cone_model(1), sq, 2, 3.0, quotient_tip=True)
    rowq = mq.H.getrow(mq.tip_index).toarray().ravel()
    assert rowq[mq.tip_index].real == pytest.approx(2.0)


def test_local_isomorphism_certificate(sq):
    m = build_model(cone_model(Fraction(3, 2)), sq, 2, 2.5)
    assert verify_local_isomorphism(m)


# ---------------------------------------------------------------------------
# kernels
# ---------------------------------------------------------------------------

def test_plane_kernel_op(sq):
    assert plane_kernel(sq, 0, 0.0) == pytest.approx(1.0)
    t = 400.0
    assert float(plane_kernel(sq, 0, t)) == pytest.approx(1 / (2 * math.pi * t), rel=0.01)


def test_halfplane_exact_vs_truncation(sq):
    """Truncated-model kernel matches the image formula within tol_trunc."""
    N = 2
    m = build_model(halfplane("N"), sq, N, 20.0, basepoint=(0.0, 2.0))
    x = m.points[m.basepoint][1]
    ts = np.array([0.5, 2.0, 8.0, 20.0])
    exact = exact_diag_kernel(halfplane("N"), sq, (Fraction(0), Fraction(2)), ts)
    # the basepoint canonicalizes into sector 1 at (2, 0) = plane point (0, 2)
    trunc = model_diag_kernel(m, ts)
    assert np.abs(exact - trunc).max() < 1e-10


def test_dirichlet_halfplane_kernel_identity(sq):
    """P^H_D(x,x,t) = P^C(x,x,t) - P^C(x,xbar,t) on the truncation."""
    pk = plane_kernel_for(sq)
    m = build_model(halfplane("D"), sq, 2, 20.0, basepoint=(0.0, 3.0))
    ts = np.array([1.0, 5.0, 15.0])
    trunc = model_diag_kernel(m, ts)
    ref = pk.diag(0, ts) - pk.pair(0, 0, (6, 0), ts)
    assert np.abs(trunc - ref).max() < 1e-10


def test_wedge_cone_reflection_identity(sq):
    """P^{wedge a,b}(x,y,t) = P^{cone 2a}(x,y,t) +- P^{cone 2a}(x,ybar,t)."""
    from lapdet.modeldomains import _resolve_fan
    N = 2
    alpha = Fraction(3, 2)
    k = 3  # wedge sectors

    def mirror(mc, jp):
        # reflection of the doubled cone across the wedge's 0-wall: sector
        # j -> 2k-1-j with the chart point reflected across the bisector
        j, p = jp
        cj, cp, _ = _resolve_fan(sq, 2 * k, True, ("N", "N"),
                                 2 * k - 1 - j, (p[1], p[0]))
        return mc.index[(cj, cp)]

    for bcs, s in (("N", 1.0), ("D", -1.0)):
        mw = build_model(wedge_model(alpha, bcs, bcs), sq, N, 3.0)
        mc = build_model(cone_model(2 * alpha), sq, N, 3.0)
        x = (0, (Fraction(3), Fraction(1)))
        y = (1, (Fraction(2), Fraction(1)))
        xi_w, yi_w = mw.index[x], mw.index[y]
        xi_c, yi_c = mc.index[x], mc.index[y]
        yb_c = mirror(mc, y)
        for t in (0.4, 2.0):
            lhs = float(np.real(np.trace(mw.pair_kernel(xi_w, yi_w, t))))
            rhs = float(np.real(np.trace(mc.pair_kernel(xi_c, yi_c, t)))) + \
                s * float(np.real(np.trace(mc.pair_kernel(xi_c, yb_c, t))))
            assert lhs == pytest.approx(rhs, abs=1e-10)


# ---------------------------------------------------------------------------
# I-integrals
# ---------------------------------------------------------------------------

def test_i_integral_same_model_zero(sq):
    m1 = build_model(halfplane("D"), sq, 4, 4.0)
    m2 = build_model(halfplane("D"), sq, 4, 4.0)
    assert float(i_integral(m2, m1)) == pytest.approx(0.0, abs=1e-14)


@pytest.mark.parametrize("bc,sgn", [("D", -1.0), ("N", 1.0)])
def test_halfplane_i_integral_continuum(sq, bc, sgn):
    """delta^{-2} I_C^H(i) -> s/(4 pi) within 2e-3 at N=16."""
    N = 16
    mh = build_model(halfplane(bc), sq, N, 4.0, basepoint=(0.0, float(N)))
    mp = build_model(plane(), sq, N, 4.0, basepoint=(0.0, float(N)))
    val = float(i_integral(mh, mp)) * N ** 2
    assert val == pytest.approx(sgn / (4 * math.pi), abs=2e-3)


def test_cone_pi_i_integral_continuum(ssq):
    """Tipless pi-cone: delta^{-2} I_C^{cone} matches 1/(4 pi rho^2) within 2e-3."""
    from lapdet.modeldomains import unfolded_position
    N = 16
    target = (float(N), 0.0)
    mc = build_model(cone_model(1), ssq, N, 4.0, basepoint=target)
    mp = build_model(plane(), ssq, N, 4.0, basepoint=target)
    ex, ey = unfolded_position(ssq, *mc.points[mc.basepoint])
    rho = math.hypot(ex, ey) / N  # true macroscopic distance of the basepoint
    val = float(i_integral(mc, mp)) * N ** 2
    expect = (math.pi / (3 * math.pi ** 2) - 1 / (12 * math.pi)) / rho ** 2
    assert 1 / (4 * math.pi) == pytest.approx(expect, rel=0.1)
    assert val == pytest.approx(expect, abs=2e-3)


def test_cone_scaling_law(ssq):
    """N^2 rho^2 I is constant across (N, rho) with N rho >= 16 within 1%."""
    from lapdet.modeldomains import unfolded_position
    vals = []
    for (N, rho_nom) in [(16, 1.0), (8, 2.0), (24, 1.0)]:
        target = (N * rho_nom, 0.0)
        mc = build_model(cone_model(1), ssq, N, 4.0 * rho_nom, basepoint=target)
        mp = build_model(plane(), ssq, N, 4.0 * rho_nom, basepoint=target)
        ex, ey = unfolded_position(ssq, *mc.points[mc.basepoint])
        rho = math.hypot(ex, ey) / N
        vals.append(float(i_integral(mc, mp)) * N ** 2 * rho ** 2)
    for v in vals[1:]:
        assert v == pytest.approx(vals[0], rel=0.01)


def test_cone_three_half_pi_windowed_smoke(sq):
    """Windowed truncation route for the 3pi/2 cone at modest size."""
    N = 8
    mc = build_model(cone_model(Fraction(3, 2)), sq, N, 6.0,
                     basepoint=(float(N), 0.0))
    mp = build_model(plane(), sq, N, 6.0, basepoint=(float(N), 0.0))
    res = i_integral(mc, mp, eps_trunc=1e-6)
    val = float(res) * N ** 2
    alpha = 1.5 * math.pi
    expect = math.pi / (3 * alpha ** 2) - 1 / (12 * math.pi)
    assert val == pytest.approx(expect, abs=2e-2)
    assert res.dropped_bound < 1e-12


def test_punctured_plane_kernel_decay(sq):
    """Twisted punctured-plane kernel is below the plane kernel."""
    N = 4
    m = build_model(punctured_model(np.array([[-1.0 + 0j]])), sq, N, 6.0,
                    basepoint=(float(N), 0.0))
    pk = plane_kernel_for(sq)
    ts = np.array([2.0, 5.0, 8.0])
    tw = model_diag_kernel(m, ts)
    pl = pk.diag(0, ts)
    assert np.all(tw < pl)
    assert np.all(tw > 0)

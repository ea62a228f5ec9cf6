"""Lattice construction, symmetry validation, and weight normalization."""

import math
from fractions import Fraction

import numpy as np
import pytest

from lapdet.errors import NonScalarCovariance
from lapdet.lattice import (
    builtin_lattice,
    canonical_form,
    from_json,
    normalize_weights,
    points_in_face,
    to_json,
    validate_symmetry,
)
from lapdet.exact import rotation


BUILTINS = ["square", "shifted_square", "triangular", "hexagonal"]


@pytest.mark.parametrize("name", BUILTINS)
def test_builtins_pass_validation(name):
    spec = builtin_lattice(name)
    assert validate_symmetry(spec) == []


def test_builtin_shapes():
    sq = builtin_lattice("square")
    assert len(sq.vertices) == 1
    assert sum(1 for _ in sq.edges_at(0)) == 4
    assert sq.delta0 == 1.0

    tri = builtin_lattice("triangular")
    assert sum(1 for _ in tri.edges_at(0)) == 6
    assert tri.delta0 == pytest.approx(3 ** 0.25 / math.sqrt(2), abs=1e-15)

    hexa = builtin_lattice("hexagonal")
    assert len(hexa.vertices) == 2
    assert sum(1 for _ in hexa.edges_at(0)) == 3
    assert sum(1 for _ in hexa.edges_at(1)) == 3
    assert hexa.delta0 == pytest.approx(3 ** 0.25 / 2, abs=1e-15)


def test_perturbed_weight_breaks_symmetry():
    sq = builtin_lattice("square")
    edges = list(sq.edges)
    a, b, off, w = edges[0]
    edges[0] = (a, b, off, 1.1)
    bad = sq.__class__(sq.name, sq.cell_kind, sq.vertices, tuple(edges))
    report = validate_symmetry(bad)
    assert any("rotation" in msg or "reflection" in msg for msg in report)


def test_normalize_square():
    spec = normalize_weights(builtin_lattice("square"))
    assert all(w == pytest.approx(0.5, abs=1e-15) for (_, _, _, w) in spec.edges)


def test_normalize_triangular_closed_form():
    # covariance sum per coordinate: sum_k w cos^2(k pi/3) = 3w over the six
    # unit edges; it must equal delta0^2 = sqrt(3)/2, so w = sqrt(3)/6.
    spec = normalize_weights(builtin_lattice("triangular"))
    expected = math.sqrt(3.0) / 6.0
    assert all(w == pytest.approx(expected, rel=1e-14) for (_, _, _, w) in spec.edges)


def test_normalize_idempotent():
    spec = normalize_weights(builtin_lattice("hexagonal"))
    again = normalize_weights(spec)
    for (e1, e2) in zip(spec.edges, again.edges):
        assert e1[3] == pytest.approx(e2[3], rel=1e-14)


def test_normalize_rejects_anisotropic():
    sq = builtin_lattice("square")
    edges = []
    for (a, b, off, w) in sq.edges:
        edges.append((a, b, off, 2.0 if off[0] != 0 else 1.0))
    bad = sq.__class__(sq.name, sq.cell_kind, sq.vertices, tuple(edges))
    with pytest.raises(NonScalarCovariance):
        normalize_weights(bad)


@pytest.mark.parametrize("name", BUILTINS)
def test_rotation_preserves_canonical_form(name):
    spec = builtin_lattice(name)
    rot = rotation(1, spec.cell_kind)
    assert canonical_form(spec, rot) == canonical_form(spec)


@pytest.mark.parametrize("name", BUILTINS)
def test_json_roundtrip(name):
    spec = normalize_weights(builtin_lattice(name))
    back = from_json(to_json(spec))
    assert back.cell_kind == spec.cell_kind
    assert back.vertices == spec.vertices
    assert canonical_form(back) == canonical_form(spec)


def test_points_in_face_counts():
    # closed unit square at mesh N on Z+iZ has (N+1)^2 points
    sq = builtin_lattice("square")
    assert len(points_in_face(sq, 4)) == 25
    # shifted lattice: N^2 interior points, none on the boundary
    sh = builtin_lattice("shifted_square")
    pts = points_in_face(sh, 4)
    assert len(pts) == 16


@pytest.mark.parametrize("name", BUILTINS)
def test_walk_covariance_monte_carlo(name):
    """After normalization the empirical walk covariance over walk-time
    delta0^{-2} is the identity within 3 standard errors."""
    spec = normalize_weights(builtin_lattice(name))
    rng = np.random.default_rng(12345)
    n_walks = 200_000
    T = 1.0 / spec.delta0 ** 2

    # per-class jump tables
    class_moves = []
    for i in range(len(spec.vertices)):
        moves = []
        for (j, off, w) in spec.edges_at(i):
            d = np.array([float(spec.position(j, off)[0] - spec.vertices[i][0]),
                          float(spec.position(j, off)[1] - spec.vertices[i][1])
                          * (math.sqrt(3.0) if spec.cell_kind == "triangulation" else 1.0)])
            moves.append((j, d, w))
        class_moves.append(moves)

    pos = np.zeros((n_walks, 2))
    cls = np.zeros(n_walks, dtype=int)
    t_left = np.full(n_walks, T)
    active = np.ones(n_walks, dtype=bool)
    while active.any():
        idx = np.nonzero(active)[0]
        for c in range(len(spec.vertices)):
            sel = idx[cls[idx] == c]
            if len(sel) == 0:
                continue
            moves = class_moves[c]
            rates = np.array([w for (_, _, w) in moves])
            wtot = rates.sum()
            dt = rng.exponential(1.0 / wtot, size=len(sel))
            jump = dt < t_left[sel]
            t_left[sel] -= dt
            active[sel[~jump]] = False
            go = sel[jump]
            if len(go) == 0:
                continue
            choice = rng.choice(len(moves), size=len(go), p=rates / wtot)
            for k, (j, d, _) in enumerate(moves):
                mask = go[choice == k]
                pos[mask] += d
                cls[mask] = j
    cov = pos.T @ pos / n_walks
    se = 3.0 * math.sqrt(2.0 / n_walks)  # 3 sigma for variance of N(0,1) samples
    assert abs(cov[0, 0] - 1.0) < se * 2
    assert abs(cov[1, 1] - 1.0) < se * 2
    assert abs(cov[0, 1]) < se * 2

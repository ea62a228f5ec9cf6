"""Surface parsing, gluing, discretization, and counts."""

import math
from fractions import Fraction

import numpy as np
import pytest

from lapdet.errors import MeshIncompatible, SchemaError
from lapdet.lattice import builtin_lattice, normalize_weights
from lapdet.surface import (
    discretize,
    parse_surface_spec,
    surface_document,
    validate_flatness,
)


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
# parsing and flatness
# ---------------------------------------------------------------------------

def test_parse_torus():
    spec = parse_surface_spec(surface_document("torus"))
    assert spec.face_count == 1
    assert len(spec.gluings) == 2
    assert spec.bundle_rank == 1
    assert validate_flatness(spec) == []


def test_parse_pillowcase_angles():
    spec = parse_surface_spec(surface_document("pillowcase"))
    assert spec.face_count == 2
    assert len(spec.gluings) == 4
    assert validate_flatness(spec) == []
    from lapdet.surface import corner_orbits
    orbits = corner_orbits(spec)
    # four pi-cones: each corner surrounded by 2 faces x pi/2
    assert len(orbits) == 4
    assert all(len(o.members) == 2 and o.closed for o in orbits)


def test_parse_punctured_torus():
    spec = parse_surface_spec(surface_document("punctured_torus", monodromy=-1.0))
    assert len(spec.punctures) == 1
    assert validate_flatness(spec) == []


def test_flatness_detects_bad_gluing():
    doc = surface_document("pillowcase")
    doc["gluings"][2]["U"] = [[[-1.0, 0.0]]]
    spec = parse_surface_spec(doc)
    report = validate_flatness(spec)
    # the -1 gluing makes the holonomy around two of the cones equal -1
    assert len(report) == 2
    assert all("defect 2" in msg for msg in report)


def test_parse_rejects_incomplete():
    doc = surface_document("torus")
    doc["gluings"] = doc["gluings"][:1]
    with pytest.raises(SchemaError):
        parse_surface_spec(doc)


def test_parse_rejects_nonunitary():
    doc = surface_document("torus")
    doc["gluings"][0]["U"] = [[[2.0, 0.0]]]
    with pytest.raises(Exception):
        parse_surface_spec(doc)


# ---------------------------------------------------------------------------
# discretize: counts
# ---------------------------------------------------------------------------

def test_torus_counts(sq):
    spec = parse_surface_spec(surface_document("torus"))
    ds = discretize(spec, sq, 4)
    n, ld, ln, vwc = ds.counts()
    assert n == 16
    assert ld == 0 and ln == 0
    assert vwc == 16
    assert len(ds.edges) == 32
    assert all(np.allclose(U, np.eye(1)) for (_, _, _, U) in ds.edges)
    assert not ds.refl_edges
    assert np.allclose(ds.w_diag()[ds.active], 2.0)


def test_torus_n2_multigraph(sq):
    spec = parse_surface_spec(surface_document("torus"))
    ds = discretize(spec, sq, 2)
    assert ds.n_active == 4
    assert len(ds.edges) == 8  # honest multigraph: 2 parallel edges per pair
    assert np.allclose(ds.w_diag(), 2.0)


def test_dirichlet_square_active(sq):
    spec = parse_surface_spec(surface_document("square", bcs="DDDD"))
    ds = discretize(spec, sq, 4)
    n, ld, ln, vwc = ds.counts()
    assert n == 9  # (N-1)^2 interior points
    assert ld == 16 and ln == 0
    # interior points adjacent to removed vertices pick up diagonal weight
    assert np.isclose(ds.w_diag()[ds.active_ids].max(), 2.0)
    assert np.isclose(ds.w_diag()[ds.active_ids].min(), 2.0)


def test_dirichlet_square_shifted(ssq):
    spec = parse_surface_spec(surface_document("square", bcs="DDDD"))
    ds = discretize(spec, ssq, 4)
    n, ld, ln, vwc = ds.counts()
    assert n == 16  # no vertices on the boundary
    assert vwc == 16
    assert ld == 16
    # boundary-adjacent rows carry the reflection diagonal 2w
    wd = ds.w_diag()
    assert np.isclose(wd.max(), 3.0)  # corner cells: 2 + 2*(2w) = 3 at w=1/2
    assert np.isclose(wd.min(), 2.0)


def test_neumann_square_counts(sq):
    spec = parse_surface_spec(surface_document("square", bcs="NNNN"))
    for N in (4, 6):
        ds = discretize(spec, sq, N)
        n, ld, ln, vwc = ds.counts()
        assert n == (N + 1) ** 2
        assert ln == 4 * N and ld == 0
        assert vwc == N ** 2
    # boundary-line vertices keep the flat diagonal via doubled inward edges
    assert np.allclose(ds.w_diag()[ds.active], 2.0)


def test_pillowcase_counts(sq):
    spec = parse_surface_spec(surface_document("pillowcase"))
    for N in (2, 4, 8):
        ds = discretize(spec, sq, N)
        n, _, _, vwc = ds.counts()
        assert n == 2 * N * N + 2
        tips = [s for s in ds.singularities if s.kind == "cone"]
        assert len(tips) == 4
        assert all(s.angle_over_pi == 1 for s in tips)
        assert all(s.vertex_at is not None for s in tips)
        # volume weight alpha/(2 pi) = 1/2 at each tip
        assert all(ds.cell_weight[s.vertex_at] == Fraction(1, 2) for s in tips)
        wd = ds.w_diag()
        for s in tips:
            assert np.isclose(wd[s.vertex_at], 1.0)  # two seam edges of w=1/2


def test_volume_growth_polynomial(sq):
    """|Omega^delta| = a N^2 + b N + c with a = area * F / delta0^2 exactly."""
    spec = parse_surface_spec(surface_document("pillowcase"))
    ns = [3, 4, 5, 6]
    counts = [discretize(spec, sq, N).counts()[0] for N in ns]
    coef = np.polyfit(ns, counts, 2)
    assert coef[0] == pytest.approx(2.0, abs=1e-9)  # area 1 * F=2 / delta0^2=1
    pred = np.polyval(coef, 7)
    assert discretize(spec, sq, 7).counts()[0] == pytest.approx(pred, abs=1e-6)


def test_tri_torus_counts(tri):
    spec = parse_surface_spec(surface_document("tri_torus"))
    assert validate_flatness(spec) == []
    ds = discretize(spec, tri, 4)
    n, ld, ln, vwc = ds.counts()
    # area 2*(sqrt3/4), delta0^2 = sqrt3/2 -> a = 1
    assert n == 16
    assert vwc == 16
    # closed flat torus: every vertex is 6-regular
    assert np.allclose(ds.w_diag(), 6 * tri.edges[0][3])


def test_triangle_dirichlet(tri):
    spec = parse_surface_spec(surface_document("triangle", bcs="DDD"))
    ds = discretize(spec, tri, 6)
    n, ld, ln, _ = ds.counts()
    # interior points of the closed triangle: (N-1)(N-2)/2
    assert n == 10
    assert ld == 18
    corners = [s for s in ds.singularities if s.kind == "corner"]
    assert len(corners) == 3
    assert all(s.angle_over_pi == Fraction(1, 3) for s in corners)
    assert all(s.bc_pair == ("D", "D") for s in corners)


def test_mixed_square_registry(sq):
    spec = parse_surface_spec(surface_document("square", bcs="DNDN"))
    ds = discretize(spec, sq, 4)
    corners = [s for s in ds.singularities if s.kind == "corner"]
    assert len(corners) == 4
    assert all(set(s.bc_pair) == {"D", "N"} for s in corners)


def test_split_side_registry(sq):
    doc = surface_document("square", bcs="NNNN")
    doc["boundary"][0] = {"face": 0, "edge": 0,
                          "split": {"frac": [1, 2], "before": "D", "after": "N"}}
    spec = parse_surface_spec(doc)
    ds = discretize(spec, sq, 4)
    n, ld, ln, _ = ds.counts()
    assert ld == 2 and ln == 14
    pi_corners = [s for s in ds.singularities
                  if s.kind == "corner" and s.angle_over_pi == 1]
    assert len(pi_corners) == 1
    assert set(pi_corners[0].bc_pair) == {"D", "N"}
    with pytest.raises(MeshIncompatible):
        discretize(spec, sq, 5)


def test_puncture_snapping(sq):
    spec = parse_surface_spec(surface_document("punctured_torus", monodromy=-1.0))
    ds = discretize(spec, sq, 8)
    punc = [s for s in ds.singularities if s.kind == "puncture"][0]
    (f, pos) = punc.reps[0]
    # snapped to a plaquette-center image: N*pos has half-integer coordinates
    assert (pos[0] * 8) % 1 == Fraction(1, 2)
    assert (pos[1] * 8) % 1 == Fraction(1, 2)
    # edges crossing the cut picked up the monodromy
    n_twisted = sum(1 for (_, _, _, U) in ds.edges if not np.allclose(U, np.eye(1)))
    assert n_twisted > 0


def test_torus_edge_count_scaling(sq):
    spec = parse_surface_spec(surface_document("torus"))
    for N in (3, 5):
        ds = discretize(spec, sq, N)
        assert len(ds.edges) == 2 * N * N

import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from toda_blowup.green import GreenFunction, vortex_weight
from toda_blowup.mesh import DomainSpec, build_mesh

DISK = DomainSpec.unit_disk()
A = GreenFunction("analytic-disk")


def _disk_points(rng, n, rmax=0.8):
    out = []
    while len(out) < n:
        p = rng.uniform(-rmax, rmax, 2)
        if np.linalg.norm(p) < rmax:
            out.append(p)
    return np.array(out)


def test_H_vanishes_for_centre_source():
    assert A.H([0.37, -0.2], [0.0, 0.0]) == pytest.approx(0.0, abs=1e-15)


def test_robin_value():
    assert A.robin([0.5, 0.0]) == pytest.approx(math.log(0.75) / (2 * math.pi), abs=1e-12)
    assert A.robin([0.5, 0.0]) == pytest.approx(-0.0457866, abs=1e-6)


def test_G_values():
    assert A.G([0.5, 0.0], [-0.5, 0.0]) == pytest.approx(math.log(1.25) / (2 * math.pi), abs=1e-12)
    assert A.G([0.5, 0.0], [0.0, 0.0]) == pytest.approx(0.110318, abs=1e-6)


def test_grad1_H_value():
    g = A.grad1_H([0.3, 0.0], [0.3, 0.0])
    # d/dx1 of (1/4π) ln(|x|²|y|² - 2x·y + 1) at x = y = (0.3, 0)
    exact = (2 * 0.09 * 0.3 - 2 * 0.3) / (4 * math.pi * (0.09**2 - 2 * 0.09 + 1))
    assert g[0] == pytest.approx(exact, abs=1e-14)
    assert g[0] == pytest.approx(-0.052469, abs=1e-6)


def test_G_singular_on_diagonal():
    with pytest.raises(ValueError):
        A.G([0.1, 0.1], [0.1, 0.1])


@given(st.floats(-0.7, 0.7), st.floats(-0.7, 0.7), st.floats(-0.7, 0.7), st.floats(-0.7, 0.7))
def test_analytic_symmetry(a, b, c, d):
    x, y = np.array([a, b]), np.array([c, d])
    assert A.H(x, y) == pytest.approx(A.H(y, x), abs=1e-13)


@given(st.floats(-0.6, 0.6), st.floats(-0.6, 0.6))
def test_grad1_G_matches_finite_difference(a, b):
    x, y = np.array([a, b]), np.array([0.1, -0.2])
    if np.linalg.norm(x - y) < 0.05:
        return
    e = 1e-6
    fd = [(A.G(x + e * v, y) - A.G(x - e * v, y)) / (2 * e) for v in np.eye(2)]
    np.testing.assert_allclose(A.grad1_G(x, y), fd, rtol=1e-6, atol=1e-7)


def test_vortex_weight_examples():
    assert vortex_weight(A, [0.5, 0.0], [[0.0, 0.0]]) == pytest.approx(0.25, abs=1e-14)
    assert vortex_weight(A, [0.2, 0.1], [[0.2, 0.1]]) == 0.0


def test_vortex_weight_equals_exponential_of_G():
    rng = np.random.default_rng(2)
    xi = np.array([[0.3, 0.1], [-0.2, -0.4]])
    for x in _disk_points(rng, 20):
        lhs = vortex_weight(A, x, xi)
        rhs = math.exp(-4 * math.pi * sum(A.G(x, p) for p in xi))
        assert lhs == pytest.approx(rhs, rel=1e-10)


def test_numeric_matches_analytic_at_second_order():
    rng = np.random.default_rng(0)
    P = _disk_points(rng, 40)
    errs, hs = [], []
    for h in (0.08, 0.04, 0.02):
        m = build_mesh(DISK, h)
        g = GreenFunction("numeric", m)
        errs.append(max(abs(g.H(P[i], P[i + 20]) - A.H(P[i], P[i + 20])) for i in range(20)))
        hs.append(m.h_max)
    order = np.polyfit(np.log(hs), np.log(errs), 1)[0]
    assert order > 1.8, (errs, order)


def test_numeric_on_square_satisfies_boundary_condition():
    m = build_mesh(DomainSpec.rectangle(1.0, 1.0), 0.05)
    g = GreenFunction("numeric", m)
    y = np.array([0.4, 0.6])
    b = m.nodes[m.boundary_indices]
    vals = g.H_field(y).values[m.boundary_indices]
    np.testing.assert_allclose(vals, np.log(np.linalg.norm(b - y, axis=1)) / (2 * math.pi), atol=1e-14)


def test_numeric_symmetry_on_fine_mesh():
    m = build_mesh(DISK, 0.01)
    g = GreenFunction("numeric", m)
    P = _disk_points(np.random.default_rng(1), 20)
    defect = max(abs(g.H(P[i], P[i + 10]) - g.H(P[i + 10], P[i])) for i in range(10))
    assert defect < 1e-6


def test_analytic_mode_rejects_other_domains():
    m = build_mesh(DomainSpec.rectangle(1.0, 1.0), 0.2)
    with pytest.raises(ValueError):
        GreenFunction("analytic-disk", m)
    assert GreenFunction.for_mesh(m).mode == "numeric"

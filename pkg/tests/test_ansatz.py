import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from toda_blowup.ansatz import (
    build_ansatz,
    bubble,
    bubble_exp,
    delta_from_xi,
    fit_scaling,
    kernel_function,
    liouville_integrals,
    norm_scaling_study,
    project,
    project_bubble,
    residual_fields,
)
from toda_blowup.errors import InsufficientDataError
from toda_blowup.fem import operator_for
from toda_blowup.green import GreenFunction
from toda_blowup.mesh import DomainSpec, build_mesh

DISK = DomainSpec.unit_disk()
A = GreenFunction("analytic-disk")


@pytest.fixture(scope="module")
def disk():
    return build_mesh(DISK, 0.05)


def test_bubble_values():
    d = 0.1
    assert bubble(d, [0.2, 0.0], [[0.2, 0.0]])[0] == pytest.approx(math.log(8 / d**2))
    assert bubble(1.0, [0.0, 0.0], [[1.0, 0.0]])[0] == pytest.approx(math.log(2), abs=1e-15)
    x = np.array([[0.3, 0.4]])
    assert bubble_exp(d, [0.0, 0.0], x)[0] == pytest.approx(math.exp(bubble(d, [0.0, 0.0], x)[0]))


@given(st.floats(0.05, 5.0), st.floats(0.05, 3.0))
def test_bubble_solves_liouville_radially(d, r):
    # -Δw = e^w for w(r) = log 8δ² - 2 log(δ² + r²)
    h = 1e-4 * max(r, d)
    w = lambda s: bubble(d, [0.0, 0.0], [[s, 0.0]])[0]
    lap = (w(r + h) - 2 * w(r) + w(r - h)) / h**2 + (w(r + h) - w(r - h)) / (2 * h * r)
    assert -lap == pytest.approx(bubble_exp(d, [0.0, 0.0], [[r, 0.0]])[0], rel=1e-4)


def test_liouville_integrals():
    li = liouville_integrals(1000.0)
    assert abs(li["mass_truncated"] - li["mass_truncated_exact"]) < 1e-12
    assert li["mass_truncated"] + li["mass_tail"] == pytest.approx(math.pi, abs=1e-12)
    assert li["second_moment"] == pytest.approx(math.pi / 4, abs=1e-12)
    assert li["log_moment"] == pytest.approx(8 * math.pi, rel=1e-10)
    assert li["log_moment_squared_power"] == pytest.approx(-16 * math.pi, rel=1e-10)


def test_truncated_bubble_mass(disk):
    d = 0.05
    R = 1 / d
    q = build_mesh(DISK, 0.05).quadrature("deg5x2")
    # ∫_{|x|<1} e^w = 8π R²/(1+R²) with R = 1/δ; the mesh misses O(h²) near the rim
    mass = q.integrate(bubble_exp(d, [0.0, 0.0], q.points))
    assert mass == pytest.approx(8 * math.pi * R**2 / (1 + R**2), rel=2e-3)


def test_project_zero(disk):
    P = project(lambda x: np.zeros(len(np.atleast_2d(x))), operator_for(disk))
    assert np.all(P.nodal() == 0)


@given(st.floats(-5.0, 5.0))
def test_projection_linear(alpha):
    op = operator_for(build_mesh(DISK, 0.2))
    Z = kernel_function(0, 0.1, [0.1, 0.0])
    P1 = project(Z, op)
    P2 = project(lambda x: alpha * Z(x), op)
    np.testing.assert_allclose(P2.nodal(), alpha * P1.nodal(), atol=1e-12)


def test_projected_bubble_vanishes_on_boundary(disk):
    b = project_bubble(0.05, [0.2, 0.1], A, operator_for(disk))
    assert np.all(b.nodal()[disk.boundary_indices] == 0)
    assert np.abs(b.at(disk.nodes[disk.boundary_indices])).max() < 1e-12


def test_expansion_defects_shrink_like_delta_squared(disk):
    op = operator_for(disk)
    xi = [0.3, 0.0]
    pw, pz = [], []
    for d in (0.08, 0.04, 0.02, 0.01):
        pw.append(project_bubble(d, xi, A, op).expansion_defect())
        pz.append(float(np.abs(project(kernel_function(0, d, xi), op).correction.values + 1).max()))
    for seq in (pw, pz):
        assert all(a / b >= 3.0 for a, b in zip(seq, seq[1:])), seq


def test_delta_from_xi_closed_form():
    d, dd = delta_from_xi([[0.0, 0.0]], 0.01, None, A)
    assert d[0] == pytest.approx(0.05, rel=1e-14) and dd[0] == 1.0
    d, _ = delta_from_xi([[0.0, 0.0]], 1e-4, None, A)
    assert d[0] == pytest.approx(0.005, rel=1e-14)


def test_delta_symmetric_pair():
    d, _ = delta_from_xi([[0.4, 0.0], [-0.4, 0.0]], 1e-3, None, A)
    assert d[0] == pytest.approx(d[1], rel=1e-14)


@pytest.fixture(scope="module")
def ansatz_small():
    return build_ansatz(DISK, [[0.3, 0.0]], 1e-3, 0.5, h=0.08)


def test_linear_identity(ansatz_small):
    W1, W2 = ansatz_small.W_nodal()
    np.testing.assert_allclose(W1 + 2 * W2 - 1.5 * ansatz_small.z.values, 0.0, atol=1e-12)


def test_mesh_resolves_bubble(ansatz_small):
    A_ = ansatz_small
    from toda_blowup.mesh import locate

    t = locate(A_.mesh, A_.xi[0]).triangle
    assert A_.mesh.triangle_diameters[t] <= 0.3 * A_.deltas[0]


def test_mass_tends_to_4pi():
    ratios = [build_ansatz(DISK, [[0.0, 0.0]], lam, 0.5, h=0.08).integrals()["lam_int_eW1"] for lam in (1e-2, 1e-3, 1e-4)]
    errs = [abs(r - 4 * math.pi) for r in ratios]
    assert errs[0] > errs[1] > errs[2] and errs[2] < 0.01


def test_centre_cancellation_rho_zero():
    vals = []
    for lam in (1e-2, 1e-3, 1e-4):
        a = build_ansatz(DISK, [[0.2, 0.1]], lam, 0.0, h=0.08)
        vals.append(abs(a.E(a.xi)[0]) * a.deltas[0] ** 2)
    assert vals[0] > vals[1] > vals[2]


def test_eW2_defect_linear_in_lambda():
    lams = [1e-2, 1e-3, 1e-4, 1e-5]
    reps = [residual_fields(build_ansatz(DISK, [[0.3, 0.0]], l, 0.5, h=0.08)) for l in lams]
    fit = fit_scaling(lams, [r.eW2_defect for r in reps])
    assert fit.slope == pytest.approx(1.0, abs=0.15)


def test_norm_scaling_study():
    lams = [1e-2, 1e-3, 1e-4, 1e-5]
    reports, fits = norm_scaling_study(DISK, [[0.3, 0.0]], 0.5, lams, h=0.08)
    # ‖PZ¹‖√λ settles to sqrt(8π/(3d))
    a = np.array([r.PZ_norms[0, 1] * math.sqrt(r.lam) for r in reports])
    target = math.sqrt(8 * math.pi / (3 * reports[0].deltas[0] ** 2 * 4 / reports[0].lam))
    assert abs(a[0] / a[-1] - 1) < 0.05
    assert abs(a[0] - target) / target < 0.05
    # ‖Pw‖² / |log λ| bounded
    ratio = [r.Pw_norms[0] ** 2 / abs(math.log(r.lam)) for r in reports]
    assert max(ratio) / min(ratio) < 2.0
    # mixed products are o(1/λ)
    cross = [abs(r.PZ_cross[0]) * r.lam for r in reports]
    assert max(cross) < 1e-6
    assert fits["E0_sup"].slope == pytest.approx(1.0, abs=0.15)


def test_fit_scaling_rejects_thin_data():
    with pytest.raises(InsufficientDataError):
        fit_scaling([1e-2, 1e-3, 1e-4], [1, 2, 3])
    with pytest.raises(InsufficientDataError):
        fit_scaling([1e-2, 5e-3, 2e-3, 1e-3], [1, 2, 3, 4])
    f = fit_scaling([1e-1, 1e-2, 1e-3, 1e-4], [2e-1, 2e-3, 2e-5, 2e-7])
    assert f.slope == pytest.approx(2.0, abs=1e-12)

"""Acceptance suite. Each test records a one-line verdict that is printed
in the terminal summary under "acceptance criteria"."""

import math
import time

import numpy as np
import pytest

from toda_blowup.ansatz import build_ansatz, fit_scaling, liouville_integrals, residual_fields
from toda_blowup.cli import main
from toda_blowup.errors import BranchAbortError, EscapedConfigurationError, NonConvergenceError
from toda_blowup.green import GreenFunction
from toda_blowup.mesh import DomainSpec, build_mesh
from toda_blowup.pipeline import default_seeds
from toda_blowup.reduced import CriticalPoint, ReducedEnergy, find_critical, multistart
from toda_blowup.toda import continuation, liouville_newton

DISK = DomainSpec.unit_disk()
FOUR_PI = 4 * math.pi
DEFAULT_H = 0.05
LADDER = dict(lam_start=1e-2, lam_min=1e-5, shrink=0.5)

pytestmark = pytest.mark.acceptance


def _random_disk_points(rng, n, rmax=0.8):
    out = []
    while len(out) < n:
        p = rng.uniform(-rmax, rmax, 2)
        if np.hypot(*p) < rmax:
            out.append(p)
    return np.array(out)


def _strictly_decreasing(seq):
    return all(b < a for a, b in zip(seq, seq[1:]))


# ---------------------------------------------------------------------------
# shared runs


@pytest.fixture(scope="session")
def critical_rho05():
    t0 = time.perf_counter()
    energy = ReducedEnergy(DISK, 0.5, h=DEFAULT_H)
    cp = find_critical(energy, [[0.25, -0.3]])
    return cp, energy.resolution, time.perf_counter() - t0


@pytest.fixture(scope="session")
def branch_rho05(critical_rho05):
    cp, _, _ = critical_rho05
    t0 = time.perf_counter()
    rec = continuation(DISK, cp.xi, 0.5, h=DEFAULT_H, **LADDER)
    return rec, time.perf_counter() - t0


@pytest.fixture(scope="session")
def branch_rho0():
    t0 = time.perf_counter()
    cp = find_critical(ReducedEnergy(DISK, 0.0), [[0.4, 0.2]])
    rec = continuation(DISK, cp.xi, 0.0, h=DEFAULT_H, keep_states=True, **LADDER)
    return rec, time.perf_counter() - t0


# ---------------------------------------------------------------------------


def test_criterion_01_green_oracle(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    P = _random_disk_points(rng, 100)
    X, Y = P[:50], P[50:]
    exact = GreenFunction("analytic-disk")
    errs, hs = [], []
    for h in (0.08, 0.04, 0.02):
        g = GreenFunction("numeric", build_mesh(DISK, h))
        errs.append(max(abs(g.H(x, y) - exact.H(x, y)) for x, y in zip(X, Y)))
        hs.append(g.mesh.h_max)
    orders = [math.log(errs[i] / errs[i + 1]) / math.log(hs[i] / hs[i + 1]) for i in range(2)]
    elapsed = time.perf_counter() - t0
    ok = errs[-1] < 1e-3 and min(orders) >= 1.8 and elapsed < 60
    criterion(1, "Green oracle", ok, f"max err {errs[-1]:.2e} at h=0.02, orders {orders[0]:.2f}/{orders[1]:.2f}, {elapsed:.1f}s")
    assert errs[-1] < 1e-3
    assert min(orders) >= 1.8
    assert elapsed < 60


def test_criterion_02_mass_constants(criterion):
    t0 = time.perf_counter()
    li = liouville_integrals(R=1000.0)
    mass_err = abs(li["mass_truncated"] - math.pi)
    moment_err = abs(li["second_moment"] - math.pi / 4)
    elapsed = time.perf_counter() - t0
    ok = mass_err < 1e-6 and moment_err < 1e-6 and elapsed < 1
    criterion(
        2,
        "mass constants",
        ok,
        f"|∫_(|y|<1000) - π| = {mass_err:.2e} (closed-form tail π/(1+R²) = {li['mass_tail']:.2e}), "
        f"|second moment - π/4| = {moment_err:.1e}, {elapsed:.2f}s",
    )
    assert moment_err < 1e-6
    assert elapsed < 1
    # truncating at R = 1000 removes exactly π/(1+R²) ≈ 3.1e-6 of mass
    assert mass_err < 1e-6


def test_criterion_03_gradient_identity(criterion):
    t0 = time.perf_counter()
    E = ReducedEnergy(DISK, 0.5, h=DEFAULT_H)
    xi = [[0.3, 0.0]]
    g = E.gradient(xi)[0, 0]
    fd = E.gradient_fd(xi, step=1e-3)[0, 0]
    rel = abs(g - fd) / abs(fd)
    g0 = ReducedEnergy(DISK, 0.0).gradient(xi)[0, 0]
    closed = 16 * math.pi * 0.3 / 0.91
    rel0 = abs(g0 - closed) / closed
    elapsed = time.perf_counter() - t0
    ok = rel < 0.02 and rel0 < 0.005 and elapsed < 300
    criterion(3, "gradient identity", ok, f"ρ₂=0.5 rel {rel:.1e} ({g:.5f} vs fd {fd:.5f}); ρ₂=0 rel {rel0:.1e}; {elapsed:.1f}s")
    assert rel < 0.02 and rel0 < 0.005 and elapsed < 300


def test_criterion_04_critical_point(criterion, critical_rho05):
    t0 = time.perf_counter()
    cp0 = find_critical(ReducedEnergy(DISK, 0.0), [[0.4, 0.2]])
    d0 = float(np.linalg.norm(cp0.xi))
    cp, h, t_rho = critical_rho05
    d = float(np.linalg.norm(cp.xi))
    elapsed = time.perf_counter() - t0 + t_rho
    ok = d0 < 1e-6 and d < h and elapsed < 600
    criterion(4, "critical point", ok, f"|ξ*| = {d0:.1e} (ρ₂=0), {d:.1e} vs h = {h:.3f} (ρ₂=0.5); {elapsed:.1f}s")
    assert d0 < 1e-6 and d < h and elapsed < 600


def test_criterion_05_residual_scaling(criterion):
    t0 = time.perf_counter()
    lams = [1e-2, 1e-3, 1e-4, 1e-5]
    reps = [residual_fields(build_ansatz(DISK, [[0.3, 0.0]], lam, 0.5, h=DEFAULT_H)) for lam in lams]
    s12 = fit_scaling(lams, [r.E_norms[1.2] for r in reps]).slope
    s15 = fit_scaling(lams, [r.E_norms[1.5] for r in reps]).slope
    s0 = fit_scaling(lams, [r.E0_sup for r in reps]).slope
    elapsed = time.perf_counter() - t0
    checks = [abs(s12 - 1 / 3) <= 0.15 / 3, abs(s15 - 1 / 6) <= 0.15 / 6, abs(s0 - 1) <= 0.15, elapsed < 1200]
    criterion(5, "residual scaling", all(checks), f"slopes p=1.2: {s12:.4f}, p=1.5: {s15:.4f}, E₀ sup: {s0:.4f}; {elapsed:.1f}s")
    assert all(checks)


def test_criterion_06_projection_expansions(criterion):
    t0 = time.perf_counter()
    # δ ∝ √λ, so dividing λ by 4 halves δ
    lams = [1e-2 / 4**j for j in range(4)]
    defects = []
    for lam in lams:
        A = build_ansatz(DISK, [[0.3, 0.0]], lam, 0.5, h=DEFAULT_H)
        defects.append(residual_fields(A).projection_defects[0])
    defects = np.array(defects)
    ratios = defects[:-1] / defects[1:]
    elapsed = time.perf_counter() - t0
    ok = bool(np.all(ratios >= 3.0)) and elapsed < 600
    criterion(
        6,
        "projection expansions",
        ok,
        f"Pw ratios {np.round(ratios[:, 0], 2).tolist()}, PZ⁰ ratios {np.round(ratios[:, 1], 2).tolist()}; {elapsed:.1f}s",
    )
    assert ok


def test_criterion_07a_mass_quantization_single(criterion, branch_rho05):
    rec, elapsed = branch_rho05
    errs = [abs(r - FOUR_PI) for r in rec.rho1]
    final_lam = rec.samples[-1].lam
    ok = (
        not rec.truncated
        and final_lam == pytest.approx(1e-5)
        and errs[-1] < 0.2
        and _strictly_decreasing(errs)
        and elapsed < 3600
    )
    criterion(7, "mass quantization k=1", ok, f"|ρ₁-4π| = {errs[-1]:.2e} at λ={final_lam:.0e}, {len(errs)} samples, monotone={_strictly_decreasing(errs)}; {elapsed:.1f}s")
    assert not rec.truncated and final_lam == pytest.approx(1e-5)
    assert errs[-1] < 0.2
    assert _strictly_decreasing(errs)
    assert elapsed < 3600


def test_criterion_07b_mass_quantization_antipodal(criterion):
    t0 = time.perf_counter()
    energy = ReducedEnergy(DISK, 0.5, h=DEFAULT_H)
    seeds = default_seeds(DISK, 2, 3, seed=0)
    results = multistart(energy, seeds)
    pairs = [r for r in results if isinstance(r, CriticalPoint)]
    failures = sorted({type(r).__name__ + (": collision" if "collision" in str(r) else "") for r in results if not isinstance(r, CriticalPoint)})
    detail = f"{len(pairs)}/{len(seeds)} multistarts found a critical pair ({', '.join(failures) or 'none failed'})"
    if not pairs:
        # follow the branch from a symmetric pair anyway to report how it fails
        try:
            rec = continuation(DISK, [[0.5, 0.0], [-0.5, 0.0]], 0.5, h=DEFAULT_H, inf_sup=False, **LADDER)
            detail += f"; branch from (±0.5,0) reached ρ₁ = {rec.rho1[-1]:.4f}"
        except (BranchAbortError, NonConvergenceError, EscapedConfigurationError) as exc:
            detail += f"; branch from (±0.5,0): {type(exc).__name__}"
        criterion(7, "mass quantization k=2 antipodal", False, detail)
        pytest.fail("no antipodal critical pair of the reduced energy on the disk: " + detail)
    cp = min(pairs, key=lambda c: c.value)
    rec = continuation(DISK, cp.xi, 0.5, h=DEFAULT_H, **LADDER)
    errs = [abs(r - 2 * FOUR_PI) for r in rec.rho1]
    elapsed = time.perf_counter() - t0
    ok = not rec.truncated and errs[-1] < 0.2 and _strictly_decreasing(errs) and elapsed < 3600
    criterion(7, "mass quantization k=2 antipodal", ok, f"|ρ₁-8π| = {errs[-1]:.2e}; {elapsed:.1f}s")
    assert ok


def test_criterion_08_energy_expansion(criterion, branch_rho05):
    rec, _ = branch_rho05
    mags = np.abs(rec.defects)
    ok = _strictly_decreasing(mags) and mags[-1] < 0.5 and rec.samples[-1].lam == pytest.approx(1e-5)
    criterion(8, "energy expansion", ok, f"|defect| {mags[0]:.2e} → {mags[-1]:.2e} over {len(mags)} samples, monotone={_strictly_decreasing(mags)}")
    assert _strictly_decreasing(mags)
    assert mags[-1] < 0.5


def test_criterion_09_rho2_zero_regression(criterion, branch_rho0):
    rec, elapsed = branch_rho0
    states = rec.states
    u2_norms = [st.norms()[1] for st in states]
    gaps, relation = [], []
    for st in states:
        phi, _ = liouville_newton(st.ansatz)
        gaps.append(float(np.abs(st.phi1 - phi).max()))
        relation.append(float(np.abs(st.u2.values + 0.5 * st.u1.values).max()))
    match = max(gaps) < 1e-8
    zero_u2 = max(u2_norms) < 1e-8
    ok = zero_u2 and match and not rec.truncated and elapsed < 900
    criterion(
        9,
        "ρ₂=0 regression",
        ok,
        f"max ‖u₂‖ = {max(u2_norms):.3e} (u₂ + u₁/2 ≤ {max(relation):.1e}); "
        f"max nodal gap to scalar Liouville Newton = {max(gaps):.1e}; {elapsed:.1f}s",
    )
    assert not rec.truncated and match and elapsed < 900
    assert max(relation) < 1e-10
    # the coupling forces u₂ = -u₁/2 when ρ₂ = 0, so this cannot vanish
    assert zero_u2, f"‖u₂‖ = {max(u2_norms):.3e}"


def test_criterion_10_determinism(criterion, tmp_path):
    cfg = tmp_path / "cfg.toml"
    cfg.write_text(
        "k = 1\nrho2 = 0.5\nseed = 7\n"
        "[mesh]\nh_target = 0.08\n"
        "[ladder]\nlambda_start = 1e-2\nlambda_min = 1e-3\nshrink = 0.5\n"
        "[scan]\nmultistart = 2\n"
    )
    outs = []
    for name, threads in (("a", "1"), ("b", "2")):
        out = tmp_path / name
        assert main(["full-pipeline", "--config", str(cfg), "--out", str(out), "--threads", threads]) == 0
        outs.append(out)
    csvs = sorted(p.name for p in outs[0].glob("*.csv"))
    same = [(outs[0] / n).read_bytes() == (outs[1] / n).read_bytes() for n in csvs]
    ok = bool(csvs) and all(same)
    criterion(10, "determinism", ok, f"{sum(same)}/{len(csvs)} CSV files byte-identical ({', '.join(csvs)})")
    assert ok

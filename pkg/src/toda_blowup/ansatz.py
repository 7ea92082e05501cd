"""Liouville bubbles, their H^1_0 projections, the two-component ansatz and
its residual fields.

For a bubble ``w(x) = log(8δ² / (δ² + |x - ξ|²)²)`` the projection
``Pw = w - Harm(w|∂Ω)`` is evaluated as

    Pw = -2 log(δ² + |x - ξ|²) + 8π H(x, ξ) + ψ,

where ``ψ`` is the discrete harmonic extension of
``2 log(1 + δ² / |x - ξ|²)`` from the boundary. Only ``ψ`` is solved for;
the logarithmic part goes through the Green evaluator.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import integrate as sci_integrate

from .errors import InsufficientDataError
from .fem import DirichletOperator, harmonic_extension, lp_norm_quadrature, operator_for
from .green import GreenFunction
from .meanfield import MeanFieldProblem, MeanFieldSolution, solve_meanfield
from .mesh import (
    DomainSpec,
    Mesh,
    ScalarField,
    bubble_size_function,
    build_mesh,
    interpolate,
    locate_many,
)

__all__ = [
    "bubble",
    "bubble_exp",
    "liouville_integrals",
    "Projection",
    "project",
    "project_load",
    "project_bubble",
    "kernel_function",
    "delta_from_xi",
    "Ansatz",
    "build_ansatz",
    "ResidualReport",
    "residual_fields",
    "ScalingFit",
    "fit_scaling",
    "norm_scaling_study",
]

log = logging.getLogger(__name__)

_8PI = 8.0 * math.pi


def bubble(delta: float, xi, x) -> np.ndarray:
    """``w_{δ,ξ}(x) = log(8δ² / (δ² + |x - ξ|²)²)``."""
    r2 = ((np.atleast_2d(x) - np.asarray(xi)) ** 2).sum(axis=1)
    return math.log(8.0 * delta**2) - 2.0 * np.log(delta**2 + r2)


def bubble_exp(delta: float, xi, x) -> np.ndarray:
    r2 = ((np.atleast_2d(x) - np.asarray(xi)) ** 2).sum(axis=1)
    return 8.0 * delta**2 / (delta**2 + r2) ** 2


def liouville_integrals(R: float = 1000.0) -> dict:
    """Radial quadrature of the planar Liouville integrals.

    Returns the truncated mass ``∫_{|y|<R} (1+|y|²)^{-2}`` with its exact
    value ``πR²/(1+R²)``, the full-plane second moment
    ``∫ y_1² (1+|y|²)^{-3}`` and the logarithmic moments
    ``∫ 8 (1+|y|²)^{-2} log(1+|y|²)`` and
    ``∫ 8 (1+|y|²)^{-2} log((1+|y|²)^{-2})``.
    """

    def radial(f, upper):
        # split at r = 1 and integrate in log r beyond it for the long tail
        inner = sci_integrate.quad(lambda r: 2 * math.pi * r * f(r), 0.0, 1.0, epsabs=0, epsrel=1e-13, limit=200)[0]
        if upper == math.inf:
            outer = sci_integrate.quad(
                lambda s: 2 * math.pi * math.exp(2 * s) * f(math.exp(s)), 0.0, 60.0, epsabs=0, epsrel=1e-13, limit=400
            )[0]
        else:
            outer = sci_integrate.quad(
                lambda s: 2 * math.pi * math.exp(2 * s) * f(math.exp(s)),
                0.0,
                math.log(upper),
                epsabs=0,
                epsrel=1e-13,
                limit=400,
            )[0]
        return inner + outer

    mass_R = radial(lambda r: (1 + r * r) ** -2, R)
    second = radial(lambda r: 0.5 * r * r * (1 + r * r) ** -3, math.inf)
    log1 = radial(lambda r: 8 * (1 + r * r) ** -2 * math.log1p(r * r), math.inf)
    log2 = radial(lambda r: 8 * (1 + r * r) ** -2 * (-2.0 * math.log1p(r * r)), math.inf)
    return {
        "R": R,
        "mass_truncated": mass_R,
        "mass_truncated_exact": math.pi * R * R / (1 + R * R),
        "mass_tail": math.pi / (1 + R * R),
        "second_moment": second,
        "log_moment": log1,
        "log_moment_squared_power": log2,
    }


# ---------------------------------------------------------------------------
# Projections


@dataclass
class Projection:
    """``P u = u - c`` with ``u`` in closed form and ``c`` a discrete
    harmonic field matching ``u`` on the boundary nodes."""

    func: Callable[[np.ndarray], np.ndarray]
    correction: ScalarField

    @property
    def mesh(self) -> Mesh:
        return self.correction.mesh

    def nodal(self) -> np.ndarray:
        v = self.func(self.mesh.nodes) - self.correction.values
        v[self.mesh.boundary] = 0.0
        return v

    def at(self, points) -> np.ndarray:
        pts = np.atleast_2d(points)
        return self.func(pts) - interpolate(self.correction, pts, strict=False)

    def at_quadrature(self, quad) -> np.ndarray:
        return self.func(quad.points) - quad.B @ self.correction.values


def project(u: Callable[[np.ndarray], np.ndarray], op: DirichletOperator) -> Projection:
    """Projection of a smooth function onto H^1_0 via its boundary trace."""
    mesh = op.mesh
    trace = np.asarray(u(mesh.nodes[op.bnd]), dtype=float)
    return Projection(u, harmonic_extension(op, trace))


def project_load(load: Callable[[np.ndarray], np.ndarray], op: DirichletOperator, rule: str = "deg5") -> ScalarField:
    """Galerkin solution of ``-Δv = load`` with zero trace, an independent
    route to a projection whose Laplacian is known in closed form."""
    q = op.mesh.quadrature(rule)
    return ScalarField(op.mesh, op.solve_load(q.load(load(q.points))))


@dataclass
class BubbleProjection:
    """``Pw`` for one bubble, split as described in the module docstring."""

    delta: float
    xi: np.ndarray
    green: GreenFunction
    psi: ScalarField

    def parts(self, points, H=None, psi=None):
        """Return ``(r², 8πH, ψ)`` at points."""
        pts = np.atleast_2d(points)
        r2 = ((pts - self.xi) ** 2).sum(axis=1)
        if H is None:
            H = np.atleast_1d(self.green.H(pts, self.xi))
        if psi is None:
            psi = interpolate(self.psi, pts, strict=False)
        return r2, _8PI * H, psi

    def at(self, points) -> np.ndarray:
        r2, h8, psi = self.parts(points)
        return -2.0 * np.log(self.delta**2 + r2) + h8 + psi

    def nodal(self) -> np.ndarray:
        mesh = self.psi.mesh
        r2 = ((mesh.nodes - self.xi) ** 2).sum(axis=1)
        h8 = _8PI * self.green.H_nodes(mesh, self.xi)
        v = -2.0 * np.log(self.delta**2 + r2) + h8 + self.psi.values
        v[mesh.boundary] = 0.0
        return v

    def expansion_defect(self) -> float:
        """``max |Pw - (w - log 8δ² + 8πH)|`` over the mesh, i.e. ``max |ψ|``."""
        return float(np.abs(self.psi.values).max())


def project_bubble(delta: float, xi, green: GreenFunction, op: DirichletOperator) -> BubbleProjection:
    xi = np.asarray(xi, dtype=float)
    b = op.mesh.nodes[op.bnd]
    r2 = ((b - xi) ** 2).sum(axis=1)
    psi = harmonic_extension(op, 2.0 * np.log1p(delta**2 / r2))
    return BubbleProjection(delta, xi, green, psi)


def kernel_function(j: int, delta: float, xi) -> Callable[[np.ndarray], np.ndarray]:
    """``Z^0 = (δ² - r²)/(δ² + r²)`` and ``Z^j = (x_j - ξ_j)/(δ² + r²)``,
    the kernel of the linearised Liouville operator."""
    xi = np.asarray(xi, dtype=float)
    d2 = delta * delta

    def Z(x):
        x = np.atleast_2d(x)
        r2 = ((x - xi) ** 2).sum(axis=1)
        if j == 0:
            return (d2 - r2) / (d2 + r2)
        return (x[:, j - 1] - xi[j - 1]) / (d2 + r2)

    return Z


# ---------------------------------------------------------------------------
# Ansatz


def delta_from_xi(xi, lam: float, z: ScalarField | None, green: GreenFunction) -> tuple[np.ndarray, np.ndarray]:
    """Concentration parameters ``δ_i = ½ sqrt(λ d_i)`` with
    ``d_i = exp(8πH(ξ_i,ξ_i) + Σ_{j≠i} 8πG(ξ_j,ξ_i) - z(ξ_i)/2)``.

    Returns ``(delta, d)``.
    """
    p = np.atleast_2d(np.asarray(xi, dtype=float))
    zx = interpolate(z, p) if z is not None else np.zeros(len(p))
    logd = np.zeros(len(p))
    for i in range(len(p)):
        s = _8PI * green.robin(p[i])
        for j in range(len(p)):
            if j != i:
                s += _8PI * green.G(p[j], p[i])
        logd[i] = s - 0.5 * zx[i]
    d = np.exp(logd)
    return 0.5 * np.sqrt(lam * d), d


@dataclass
class _PointValues:
    """Ingredients of the ansatz at a set of points."""

    r2: np.ndarray  # (k, n)
    Pw_minus_w: np.ndarray  # (k, n): -log 8δ² + 8πH + ψ
    Pw: np.ndarray  # (k, n)
    ew: np.ndarray  # (k, n)
    z: np.ndarray  # (n,)


@dataclass
class Ansatz:
    """``W₁ = Σ Pw_i - z/2`` and ``W₂ = -½ Σ Pw_i + z`` on a graded mesh."""

    mesh: Mesh
    green: GreenFunction
    xi: np.ndarray
    lam: float
    rho2: float
    deltas: np.ndarray
    d: np.ndarray
    z: ScalarField
    bubbles: list[BubbleProjection]
    rule: str
    meanfield: MeanFieldSolution | None = None
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def k(self) -> int:
        return len(self.xi)

    @property
    def op(self) -> DirichletOperator:
        return operator_for(self.mesh)

    @property
    def quad(self):
        return self.mesh.quadrature(self.rule)

    def _values(self, points=None) -> _PointValues:
        if points is None:
            if "quad" in self._cache:
                return self._cache["quad"]
            q = self.quad
            zq = q.B @ self.z.values
            Hs = [self.green.H_quadrature(q, b.xi) for b in self.bubbles]
            psis = [q.B @ b.psi.values for b in self.bubbles]
            pts = q.points
        else:
            pts = np.atleast_2d(points)
            zq = interpolate(self.z, pts, strict=False)
            Hs = [np.atleast_1d(self.green.H(pts, b.xi)) for b in self.bubbles]
            psis = [interpolate(b.psi, pts, strict=False) for b in self.bubbles]
        r2 = np.stack([((pts - b.xi) ** 2).sum(axis=1) for b in self.bubbles])
        dd = (self.deltas**2)[:, None]
        pmw = np.stack([-math.log(8 * b.delta**2) + _8PI * H + s for b, H, s in zip(self.bubbles, Hs, psis)])
        w = np.log(8 * dd) - 2.0 * np.log(dd + r2)
        vals = _PointValues(r2, pmw, w + pmw, 8 * dd / (dd + r2) ** 2, zq)
        if points is None:
            self._cache["quad"] = vals
        return vals

    # fields ---------------------------------------------------------------------
    def W(self, points=None) -> tuple[np.ndarray, np.ndarray]:
        v = self._values(points)
        s = v.Pw.sum(axis=0)
        return s - 0.5 * v.z, -0.5 * s + v.z

    def W_nodal(self) -> tuple[np.ndarray, np.ndarray]:
        s = sum(b.nodal() for b in self.bubbles)
        return s - 0.5 * self.z.values, -0.5 * s + self.z.values

    def E(self, points=None) -> np.ndarray:
        """``Σ e^{w_i} - 2λ e^{W₁}``, evaluated without cancellation near
        the concentration points."""
        v = self._values(points)
        near = np.argmin(v.r2, axis=0)
        cols = np.arange(v.r2.shape[1])
        others = v.Pw.sum(axis=0) - v.Pw[near, cols]
        a = math.log(2 * self.lam) + v.Pw_minus_w[near, cols] + others - 0.5 * v.z
        return v.ew.sum(axis=0) - v.ew[near, cols] - v.ew[near, cols] * np.expm1(a)

    def exp_W1(self, points=None) -> np.ndarray:
        return np.exp(self.W(points)[0])

    def vortex_weight(self, points=None) -> np.ndarray:
        pts = self.quad.points if points is None else np.atleast_2d(points)
        out = np.ones(len(pts))
        for b in self.bubbles:
            H = self.green.H_quadrature(self.quad, b.xi) if points is None else np.atleast_1d(self.green.H(pts, b.xi))
            out *= ((pts - b.xi) ** 2).sum(axis=1) * np.exp(-4 * math.pi * H)
        return out

    def integrals(self) -> dict:
        """Quadrature of ``∫e^{W₂}``, ``∫h e^z`` and ``λ∫e^{W₁}``."""
        if "integrals" not in self._cache:
            q = self.quad
            W1, W2 = self.W()
            v = self._values()
            self._cache["integrals"] = {
                "int_eW2": q.integrate(np.exp(W2)),
                "int_hez": q.integrate(self.vortex_weight() * np.exp(v.z)),
                "lam_int_eW1": self.lam * q.integrate(np.exp(W1)),
            }
        return self._cache["integrals"]

    def E0(self, points=None) -> np.ndarray:
        """``2ρ₂ (e^{W₂}/∫e^{W₂} - h e^z/∫h e^z)``."""
        if self.rho2 == 0:
            n = len(self.quad) if points is None else len(np.atleast_2d(points))
            return np.zeros(n)
        I = self.integrals()
        _, W2 = self.W(points)
        v = self._values(points)
        return 2 * self.rho2 * (np.exp(W2) / I["int_eW2"] - self.vortex_weight(points) * np.exp(v.z) / I["int_hez"])

    def eW2_minus_hez(self, points=None) -> np.ndarray:
        _, W2 = self.W(points)
        return np.exp(W2) - self.vortex_weight(points) * np.exp(self._values(points).z)

    def sample_points(self) -> np.ndarray:
        """Nodes, quadrature points and the concentration points."""
        return np.concatenate([self.mesh.nodes, self.quad.points, self.xi])


def build_ansatz(
    domain: DomainSpec,
    xi,
    lam: float,
    rho2: float,
    h: float = 0.05,
    grading: float = 0.25,
    rule: str = "deg5",
    green_mode: str = "auto",
    refine_radius: float = 10.0,
    meanfield_rule: str = "mid3",
) -> Ansatz:
    """Build the ansatz on a mesh graded around each ``ξ_i``.

    The mean-field solution is computed on a uniform mesh to obtain ``δ``,
    then again on the graded mesh (cells of size ``grading * δ_i`` at
    ``ξ_i``), from which the final ``δ`` is taken.
    """
    xi = np.atleast_2d(np.asarray(xi, dtype=float))
    base = build_mesh(domain, h)
    z0 = _solve_z(base, xi, rho2, green_mode, meanfield_rule, None)
    g0 = GreenFunction.for_mesh(base, green_mode)
    delta0, _ = delta_from_xi(xi, lam, z0.z if z0 else None, g0)
    size = bubble_size_function(xi, delta0, h, grading)
    mesh = build_mesh(domain, h, size=size)
    return ansatz_on_mesh(mesh, xi, lam, rho2, green_mode, rule, meanfield_rule, z0.z if z0 else None)


def _solve_z(mesh, xi, rho2, green_mode, rule, init):
    if rho2 == 0:
        return None
    green = GreenFunction.for_mesh(mesh, green_mode)
    problem = MeanFieldProblem(mesh, xi, rho2, green, rule)
    if init is not None and init.mesh is not mesh:
        init = ScalarField(mesh, _transfer(init, mesh))
    return solve_meanfield(problem, init=init)


def _transfer(field: ScalarField, mesh: Mesh) -> np.ndarray:
    v = np.zeros(mesh.n_nodes)
    inner = mesh.interior
    t, b = locate_many(field.mesh, mesh.nodes[inner], strict=False)
    v[inner] = (field.values[field.mesh.triangles[t]] * b).sum(axis=1)
    return v


def ansatz_on_mesh(
    mesh: Mesh,
    xi,
    lam: float,
    rho2: float,
    green_mode: str = "auto",
    rule: str = "deg5",
    meanfield_rule: str = "mid3",
    z_init: ScalarField | None = None,
) -> Ansatz:
    xi = np.atleast_2d(np.asarray(xi, dtype=float))
    green = GreenFunction.for_mesh(mesh, green_mode)
    sol = _solve_z(mesh, xi, rho2, green_mode, meanfield_rule, z_init)
    z = sol.z if sol is not None else ScalarField(mesh, np.zeros(mesh.n_nodes))
    deltas, d = delta_from_xi(xi, lam, z, green)
    op = operator_for(mesh)
    bubbles = [project_bubble(dl, p, green, op) for dl, p in zip(deltas, xi)]
    return Ansatz(mesh, green, xi, lam, rho2, deltas, d, z, bubbles, rule, sol)


# ---------------------------------------------------------------------------
# Residuals and norms


@dataclass
class ResidualReport:
    lam: float
    deltas: np.ndarray
    E_norms: dict
    E0_sup: float
    R_norms: dict
    Pw_norms: np.ndarray
    PZ_norms: np.ndarray  # (k, 3): j = 0, 1, 2
    PZ_cross: np.ndarray  # (k,): <PZ^1_i, PZ^2_i>
    mass_ratio: float
    eW2_defect: float
    projection_defects: np.ndarray  # (k, 2): Pw and PZ^0 expansion defects

    def row(self) -> dict:
        out = {"lambda": self.lam, "delta_min": float(self.deltas.min())}
        for p, v in self.E_norms.items():
            out[f"E_L{p}"] = v
        out["E0_sup"] = self.E0_sup
        for p, v in self.R_norms.items():
            out[f"R_L{p}"] = v
        out["Pw_norm"] = float(self.Pw_norms.max())
        out["PZ1_norm"] = float(self.PZ_norms[:, 1].max())
        out["PZ2_norm"] = float(self.PZ_norms[:, 2].max())
        out["PZ_cross"] = float(np.abs(self.PZ_cross).max())
        out["mass_ratio"] = self.mass_ratio
        out["eW2_defect"] = self.eW2_defect
        return out


def residual_fields(ansatz: Ansatz, ps: Sequence[float] = (1.2, 1.5)) -> ResidualReport:
    """Norms of ``E``, ``E₀`` and ``R̃ = (E + ½E₀, -½E - E₀)`` together with
    the H^1_0 norms of the projected bubbles and kernel functions."""
    q = ansatz.quad
    E = ansatz.E()
    E0 = ansatz.E0()
    R1, R2 = E + 0.5 * E0, -0.5 * E - E0
    E_norms = {p: lp_norm_quadrature(E, q.weights, p) for p in ps}
    R_norms = {p: lp_norm_quadrature(R1, q.weights, p) + lp_norm_quadrature(R2, q.weights, p) for p in ps}
    pts = np.concatenate([ansatz.mesh.nodes, ansatz.xi])
    E0_sup = float(max(np.abs(E0).max(), np.abs(ansatz.E0(pts)).max()))
    eW2 = float(max(np.abs(ansatz.eW2_minus_hez()).max(), np.abs(ansatz.eW2_minus_hez(pts)).max()))

    v = ansatz._values()
    op = ansatz.op
    k = ansatz.k
    Pw_norms = np.zeros(k)
    PZ = np.zeros((k, 3))
    cross = np.zeros(k)
    defects = np.zeros((k, 2))
    for i, b in enumerate(ansatz.bubbles):
        ew = v.ew[i]
        Pw_norms[i] = math.sqrt(max(0.0, q.integrate(ew * v.Pw[i])))
        projs = []
        for j in range(3):
            Z = kernel_function(j, b.delta, b.xi)
            P = project(Z, op)
            projs.append(P)
            PZ[i, j] = math.sqrt(max(0.0, q.integrate(ew * Z(q.points) * P.at_quadrature(q))))
        Z1 = kernel_function(1, b.delta, b.xi)
        cross[i] = q.integrate(ew * Z1(q.points) * projs[2].at_quadrature(q))
        defects[i, 0] = b.expansion_defect()
        # PZ^0 - (Z^0 + 1) is minus the harmonic extension of Z^0 + 1
        defects[i, 1] = float(np.abs(projs[0].correction.values + 1.0).max())
    mass_ratio = ansatz.integrals()["lam_int_eW1"] / (4 * math.pi * k)
    return ResidualReport(
        ansatz.lam, ansatz.deltas, E_norms, E0_sup, R_norms, Pw_norms, PZ, cross, mass_ratio, eW2, defects
    )


@dataclass
class ScalingFit:
    slope: float
    intercept: float
    residual: float
    n: int


def fit_scaling(x, y, min_samples: int = 4, min_decades: float = 2.0) -> ScalingFit:
    """Least-squares slope of ``log y`` against ``log x``."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if len(x) < min_samples:
        raise InsufficientDataError(f"need at least {min_samples} samples, got {len(x)}")
    if np.log10(x.max() / x.min()) < min_decades - 1e-12:
        raise InsufficientDataError(f"samples must span at least {min_decades} decades")
    lx, ly = np.log(x), np.log(y)
    A = np.stack([lx, np.ones_like(lx)], axis=1)
    coef, res, *_ = np.linalg.lstsq(A, ly, rcond=None)
    resid = float(np.sqrt(np.mean((A @ coef - ly) ** 2)))
    return ScalingFit(float(coef[0]), float(coef[1]), resid, len(x))


def norm_scaling_study(
    domain: DomainSpec,
    xi,
    rho2: float,
    lambdas: Sequence[float],
    h: float = 0.05,
    grading: float = 0.25,
    rule: str = "deg5",
    green_mode: str = "auto",
) -> tuple[list[ResidualReport], dict]:
    """Residual reports along a λ ladder and fitted exponents:
    ``E_L<p>`` and ``E0_sup`` against λ, ``Pw_norm`` against ``|log λ|``."""
    lams = sorted(float(l) for l in lambdas)
    if len(lams) < 4 or math.log10(lams[-1] / lams[0]) < 2 - 1e-12:
        raise InsufficientDataError("scaling study needs four λ values spanning two decades")
    reports = []
    for lam in lams:
        A = build_ansatz(domain, xi, lam, rho2, h=h, grading=grading, rule=rule, green_mode=green_mode)
        reports.append(residual_fields(A))
    fits = {}
    for p in reports[0].E_norms:
        fits[f"E_L{p}"] = fit_scaling(lams, [r.E_norms[p] for r in reports])
    if rho2 > 0:
        fits["E0_sup"] = fit_scaling(lams, [r.E0_sup for r in reports])
    fits["Pw_norm"] = fit_scaling(
        [abs(math.log(l)) for l in lams], [r.Pw_norms.max() for r in reports], min_decades=0.0
    )
    return reports, fits

"""Singular mean-field problem

    -Δz = 2ρ₂ (h e^z / ∫ h e^z)  in Ω,   z = 0 on ∂Ω,

solved as the minimiser of

    I(z) = ½ ∫|∇z|² - 2ρ₂ log ∫ h e^z

with ``h`` the vortex weight of the concentration points.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import diags
from scipy.sparse import linalg as spla

from .errors import NonConvergenceError, RegimeError
from .fem import DirichletOperator, NearBoundaryWarning, gradient_at, operator_for
from .green import GreenFunction
from .mesh import Mesh, ScalarField

__all__ = [
    "MeanFieldProblem",
    "MeanFieldSolution",
    "NondegeneracyReport",
    "solve_meanfield",
    "nondegeneracy_check",
    "grad_Itilde",
]

log = logging.getLogger(__name__)

RHO2_LIMIT = 4.0 * math.pi


class MeanFieldProblem:
    """Discretised mean-field functional for fixed ``ρ₂`` and points ``ξ``."""

    def __init__(
        self,
        mesh: Mesh,
        xi,
        rho2: float,
        green: GreenFunction | None = None,
        rule: str = "mid3",
        allow_supercritical: bool = False,
    ):
        if rho2 < 0:
            raise RegimeError("rho2 must be non-negative")
        if rho2 >= RHO2_LIMIT and not allow_supercritical:
            raise RegimeError("rho2 must stay below 4π for the minimisation to be coercive")
        self.mesh = mesh
        self.xi = np.atleast_2d(np.asarray(xi, dtype=float))
        self.rho2 = float(rho2)
        self.green = green or GreenFunction.for_mesh(mesh)
        self.op: DirichletOperator = operator_for(mesh)
        self.quad = mesh.quadrature(rule)
        hq = np.ones(len(self.quad))
        for p in self.xi:
            d2 = ((self.quad.points - p) ** 2).sum(axis=1)
            hq *= d2 * np.exp(-4.0 * math.pi * self.green.H_quadrature(self.quad, p))
        self.h_q = hq
        self.wh = self.quad.weights * hq
        self.B_I = self.quad.B[:, self.op.interior].tocsr()

    # functional pieces ----------------------------------------------------------
    def _log_mass(self, zq: np.ndarray) -> tuple[float, np.ndarray]:
        s = zq.max()
        e = self.wh * np.exp(zq - s)
        tot = e.sum()
        return s + math.log(tot), e / tot

    def energy(self, z_int: np.ndarray) -> float:
        quad = 0.5 * float(z_int @ (self.op.K_II @ z_int))
        if self.rho2 == 0:
            return quad
        return quad - 2.0 * self.rho2 * self._log_mass(self.B_I @ z_int)[0]

    def gradient(self, z_int: np.ndarray) -> np.ndarray:
        g = self.op.K_II @ z_int
        if self.rho2:
            _, p = self._log_mass(self.B_I @ z_int)
            g = g - 2.0 * self.rho2 * (self.B_I.T @ p)
        return g

    def hessian_parts(self, z_int: np.ndarray):
        """Sparse part ``A`` and rank-one data ``(c, v)`` with Hessian
        ``A + c v v^T``."""
        if self.rho2 == 0:
            return self.op.K_II, 0.0, np.zeros(len(z_int))
        _, p = self._log_mass(self.B_I @ z_int)
        A = self.op.K_II - 2.0 * self.rho2 * (self.B_I.T @ diags(p) @ self.B_I)
        return A.tocsc(), 2.0 * self.rho2, self.B_I.T @ p

    def mass(self, z: ScalarField | np.ndarray) -> float:
        """``∫ h e^z``."""
        zi = z.values if isinstance(z, ScalarField) else np.asarray(z)
        zq = self.quad.B @ zi
        return float(self.wh @ np.exp(zq))

    def energy_of(self, z: ScalarField) -> float:
        return self.energy(z.values[self.op.interior])


def _rank_one_solver(A, c: float, v: np.ndarray):
    """Return a solver for ``(A + c v v^T) x = b`` via Sherman-Morrison."""
    lu = spla.splu(A)
    if c == 0:
        return lu.solve
    Av = lu.solve(v)
    denom = 1.0 + c * float(v @ Av)

    def solve(b):
        Ab = lu.solve(b)
        return Ab - Av * (c * float(v @ Ab) / denom)

    return solve


@dataclass
class MeanFieldSolution:
    z: ScalarField
    energy: float
    iterations: int
    gradient_norm: float
    trace: list[dict] = field(default_factory=list)
    problem: MeanFieldProblem | None = None

    @property
    def mass(self) -> float:
        return self.problem.mass(self.z)


def solve_meanfield(
    problem: MeanFieldProblem,
    init: ScalarField | np.ndarray | None = None,
    gtol: float = 1e-10,
    max_iter: int = 100,
    max_halvings: int = 60,
) -> MeanFieldSolution:
    """Damped Newton on the interior unknowns with Armijo backtracking.

    Stops when the discrete H^{-1} norm of the gradient drops below
    ``gtol * (1 + |I|)``.
    """
    op = problem.op
    if init is None:
        z = np.zeros(op.n_interior)
    else:
        zi = init.values if isinstance(init, ScalarField) else np.asarray(init, dtype=float)
        z = zi[op.interior] if len(zi) == problem.mesh.n_nodes else zi.copy()
    trace: list[dict] = []
    energy = problem.energy(z)
    for it in range(max_iter + 1):
        g = problem.gradient(z)
        gnorm = op.dual_norm(g)
        trace.append({"iteration": it, "energy": energy, "gradient_norm": gnorm})
        if gnorm < gtol * (1.0 + abs(energy)):
            return MeanFieldSolution(ScalarField(problem.mesh, op.extend(z)), energy, it, gnorm, trace, problem)
        if it == max_iter:
            break
        A, c, v = problem.hessian_parts(z)
        try:
            d = -_rank_one_solver(A, c, v)(g)
            if not np.all(np.isfinite(d)) or float(g @ d) >= 0:
                raise ValueError
        except (RuntimeError, ValueError):
            d = -op.solve_interior(g)
        slope = float(g @ d)
        t = 1.0
        for _ in range(max_halvings):
            trial = z + t * d
            e_trial = problem.energy(trial)
            if e_trial <= energy + 1e-4 * t * slope:
                break
            # energy differences below round-off: fall back to the gradient norm
            if abs(e_trial - energy) <= 1e-13 * (1.0 + abs(energy)):
                if op.dual_norm(problem.gradient(trial)) < gnorm:
                    break
            t *= 0.5
        else:
            # at round-off level the energy cannot decrease any further
            if gnorm < 1e3 * gtol * (1.0 + abs(energy)):
                trace[-1]["note"] = "round-off floor"
                return MeanFieldSolution(ScalarField(problem.mesh, op.extend(z)), energy, it, gnorm, trace, problem)
            raise NonConvergenceError("line search stalled in the mean-field solve", trace)
        trace[-1]["step"] = t
        z, energy = trial, e_trial
    raise NonConvergenceError("mean-field Newton iteration did not converge", trace)


@dataclass
class NondegeneracyReport:
    """Smallest ``|μ|`` of ``L ψ = μ M ψ`` for the linearised operator ``L``.

    ``ratio`` compares with the same quantity for the bare Laplacian.
    """

    value: float
    laplacian_value: float
    ratio: float
    threshold: float
    passed: bool
    converged: bool
    iterations: int


def _smallest_generalised(solve, apply_L, M, n, tol=1e-10, max_iter=500, seed=0):
    x = np.random.default_rng(seed).standard_normal(n)
    x /= math.sqrt(float(x @ (M @ x)))
    mu_old = np.inf
    for it in range(1, max_iter + 1):
        y = solve(M @ x)
        y /= math.sqrt(float(y @ (M @ y)))
        mu = float(y @ apply_L(y))
        x = y
        if abs(mu - mu_old) <= tol * max(1.0, abs(mu)):
            return mu, True, it
        mu_old = mu
    return mu, False, max_iter


def nondegeneracy_check(solution: MeanFieldSolution, threshold: float = 1e-6) -> NondegeneracyReport:
    """Inverse iteration for the eigenvalue of smallest modulus of the
    linearisation at ``z`` against the P1 mass matrix.

    At ``ρ₂ = 0`` the value is the first Dirichlet eigenvalue of the
    discrete Laplacian. The check passes when the value exceeds
    ``threshold`` times the Laplacian value.
    """
    problem = solution.problem
    op = problem.op
    z = solution.z.values[op.interior]
    A, c, v = problem.hessian_parts(z)
    solve = _rank_one_solver(A.tocsc(), c, v)

    def apply_L(y):
        return A @ y + c * v * float(v @ y)

    value, conv, its = _smallest_generalised(solve, apply_L, op.M_II, op.n_interior)
    key = "laplacian-first-eigenvalue"
    lap = problem.mesh._cache.get(key)
    if lap is None:
        lap = _smallest_generalised(op.solve_interior, lambda y: op.K_II @ y, op.M_II, op.n_interior)[0]
        problem.mesh._cache[key] = lap
    ratio = abs(value) / lap
    return NondegeneracyReport(abs(value), lap, ratio, threshold, conv and ratio > threshold, conv, its)


def grad_Itilde(solution: MeanFieldSolution, j: int) -> np.ndarray:
    """Gradient of the reduced mean-field value with respect to ``ξ_j``:
    ``4π ∇z(ξ_j)`` by the envelope theorem."""
    problem = solution.problem
    xj = problem.xi[j]
    mesh = problem.mesh
    if mesh.domain is not None and mesh.domain.boundary_distance(xj[None])[0] < 3 * mesh.h_max:
        warnings.warn("ξ_j is within three mesh sizes of the boundary", NearBoundaryWarning, stacklevel=2)
    return 4.0 * math.pi * gradient_at(solution.z, xj, warn=False)

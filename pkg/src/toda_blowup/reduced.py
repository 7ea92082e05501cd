"""Reduced energy of k concentration points

    Λ(ξ) = ½ I(z_ξ) - 16π² ( Σ_i H(ξ_i, ξ_i) + Σ_{i≠j} G(ξ_i, ξ_j) ),

its gradient and a search for its critical points.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, EscapedConfigurationError, NonConvergenceError
from .green import ANALYTIC_DISK, GreenFunction
from .meanfield import MeanFieldProblem, MeanFieldSolution, grad_Itilde, solve_meanfield
from .mesh import DomainSpec, Mesh, build_mesh

__all__ = [
    "ConfigPoints",
    "LambdaEvaluation",
    "ReducedEnergy",
    "CriticalPoint",
    "find_critical",
    "multistart",
]

log = logging.getLogger(__name__)

_16PI2 = 16.0 * math.pi**2


@dataclass(frozen=True)
class ConfigPoints:
    """``k`` distinct points inside a domain."""

    points: np.ndarray
    domain: DomainSpec

    def __post_init__(self):
        p = np.atleast_2d(np.asarray(self.points, dtype=float))
        if p.ndim != 2 or p.shape[1] != 2 or len(p) == 0:
            raise ConfigurationError("points must have shape (k, 2)")
        object.__setattr__(self, "points", p)
        if np.any(self.domain.boundary_distance(p) <= 0):
            raise ConfigurationError("concentration point outside the domain")
        if self.min_separation == 0:
            raise ConfigurationError("concentration points must be distinct")

    @property
    def k(self) -> int:
        return len(self.points)

    @property
    def boundary_margin(self) -> float:
        return float(self.domain.boundary_distance(self.points).min())

    @property
    def min_separation(self) -> float:
        p = self.points
        if len(p) < 2:
            return math.inf
        d = np.linalg.norm(p[:, None] - p[None], axis=-1)
        return float(d[np.triu_indices(len(p), 1)].min())


@dataclass
class LambdaEvaluation:
    xi: np.ndarray
    value: float
    half_I: float
    robin_sum: float
    pair_sum: float
    meanfield: MeanFieldSolution | None = None


class ReducedEnergy:
    """Evaluator of ``Λ`` for fixed ``ρ₂`` on one domain.

    The mean-field solve uses a fixed background mesh and is warm-started
    from the previous evaluation. With ``ρ₂ = 0`` the mean-field part
    vanishes identically and no mesh is needed in closed-form mode.
    """

    def __init__(
        self,
        domain: DomainSpec,
        rho2: float,
        h: float = 0.05,
        green_mode: str = "auto",
        mesh: Mesh | None = None,
        rule: str = "mid3",
        gtol: float = 1e-10,
    ):
        self.domain = domain
        self.rho2 = float(rho2)
        self.h = float(h)
        if green_mode == "auto":
            green_mode = ANALYTIC_DISK if domain.kind == "unit-disk" else "numeric"
        self.green_mode = green_mode
        needs_mesh = self.rho2 > 0 or green_mode != ANALYTIC_DISK
        self.mesh = mesh if mesh is not None else (build_mesh(domain, h) if needs_mesh else None)
        self.green = GreenFunction(green_mode, self.mesh)
        self.rule = rule
        self.gtol = gtol
        self._warm = None
        self.evaluations = 0

    @property
    def resolution(self) -> float:
        return self.mesh.h_max if self.mesh is not None else self.h

    def config(self, xi) -> ConfigPoints:
        return ConfigPoints(np.atleast_2d(np.asarray(xi, dtype=float)), self.domain)

    def meanfield(self, xi) -> MeanFieldSolution | None:
        if self.rho2 == 0:
            return None
        problem = MeanFieldProblem(self.mesh, xi, self.rho2, self.green, self.rule)
        sol = solve_meanfield(problem, init=self._warm, gtol=self.gtol)
        self._warm = sol.z
        return sol

    def evaluate(self, xi) -> LambdaEvaluation:
        cp = self.config(xi)
        p = cp.points
        self.evaluations += 1
        sol = self.meanfield(p)
        half_I = 0.5 * sol.energy if sol is not None else 0.0
        robin = sum(self.green.robin(pi) for pi in p)
        pair = 0.0
        for i in range(len(p)):
            for j in range(len(p)):
                if i != j:
                    pair += self.green.G(p[i], p[j])
        value = half_I - _16PI2 * (robin + pair)
        return LambdaEvaluation(p, value, half_I, robin, pair, sol)

    def value(self, xi) -> float:
        return self.evaluate(xi).value

    def gradient(self, xi, evaluation: LambdaEvaluation | None = None) -> np.ndarray:
        """``∂_{ξ_j} Λ = 2π ∇z(ξ_j) - 32π² (∂₁H(ξ_j, ξ_j) + Σ_{i≠j} ∂₁G(ξ_j, ξ_i))``."""
        ev = evaluation if evaluation is not None else self.evaluate(xi)
        p = ev.xi
        out = np.zeros_like(p)
        for j in range(len(p)):
            s = self.green.grad1_H(p[j], p[j])
            for i in range(len(p)):
                if i != j:
                    s = s + self.green.grad1_G(p[j], p[i])
            out[j] = -2.0 * _16PI2 * s
            if ev.meanfield is not None:
                out[j] += 0.5 * grad_Itilde(ev.meanfield, j)
        return out

    def gradient_fd(self, xi, step: float = 1e-5) -> np.ndarray:
        p = np.atleast_2d(np.asarray(xi, dtype=float))
        out = np.zeros_like(p)
        for j in range(len(p)):
            for d in range(2):
                e = np.zeros_like(p)
                e[j, d] = step
                out[j, d] = (self.value(p + e) - self.value(p - e)) / (2 * step)
        return out

    def hessian_fd(self, xi, step: float | None = None) -> np.ndarray:
        """Symmetrised central differences of the gradient."""
        p = np.atleast_2d(np.asarray(xi, dtype=float))
        step = step if step is not None else (1e-5 if self.mesh is None else 0.25 * self.resolution)
        n = p.size
        Hm = np.zeros((n, n))
        for a in range(n):
            e = np.zeros(n)
            e[a] = step
            gp = self.gradient(p + e.reshape(p.shape)).ravel()
            gm = self.gradient(p - e.reshape(p.shape)).ravel()
            Hm[:, a] = (gp - gm) / (2 * step)
        return 0.5 * (Hm + Hm.T)


@dataclass
class CriticalPoint:
    xi: np.ndarray
    value: float
    gradient: np.ndarray
    gradient_norm: float
    hessian_eigenvalues: np.ndarray
    classification: str
    iterations: int
    history: list[dict] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {
            "xi": self.xi.tolist(),
            "value": self.value,
            "gradient": self.gradient.tolist(),
            "gradient_norm": self.gradient_norm,
            "hessian_eigenvalues": self.hessian_eigenvalues.tolist(),
            "classification": self.classification,
            "iterations": self.iterations,
        }


def _barrier(energy: ReducedEnergy, p: np.ndarray) -> float:
    """Logarithmic penalty active only within ``2h`` of the boundary or of
    another point; its weight ``h`` vanishes under refinement."""
    h = energy.resolution
    s = energy.domain.boundary_distance(p) / (2 * h)
    if len(p) > 1:
        d = np.linalg.norm(p[:, None] - p[None], axis=-1)[np.triu_indices(len(p), 1)]
        s = np.concatenate([s, d / (2 * h)])
    if np.any(s <= 0):
        return math.inf
    s = s[s < 1]
    return float(h * np.sum(-np.log(s) + s - 1.0))


def _barrier_grad(energy: ReducedEnergy, p: np.ndarray, eps: float = 1e-7) -> np.ndarray:
    g = np.zeros_like(p)
    if _barrier(energy, p) == 0.0:
        return g
    for idx in np.ndindex(p.shape):
        e = np.zeros_like(p)
        e[idx] = eps
        g[idx] = (_barrier(energy, p + e) - _barrier(energy, p - e)) / (2 * eps)
    return g


def _classify(eigs: np.ndarray) -> str:
    if np.all(eigs > 0):
        return "minimum"
    if np.all(eigs < 0):
        return "maximum"
    if np.any(eigs > 0) and np.any(eigs < 0):
        return "saddle"
    return "degenerate"


def find_critical(
    energy: ReducedEnergy,
    xi0,
    tol: float | None = None,
    max_iter: int = 400,
    mode: str = "minimize",
    polish_below: float = 1e-1,
) -> CriticalPoint:
    """Locate a critical point of ``Λ`` starting from ``xi0``.

    ``mode="minimize"`` runs backtracking gradient descent on ``Λ`` plus a
    vanishing boundary/collision barrier, switching to Newton steps with a
    finite-difference Hessian once the gradient is small.
    ``mode="saddle"`` uses Newton steps on ``|∇Λ|`` throughout. Raises
    :class:`EscapedConfigurationError` if the iterates approach the
    boundary or collide.
    """
    if tol is None:
        tol = 1e-5 if energy.mesh is None else 1e-3
    p = energy.config(xi0).points.copy()
    h = energy.resolution
    history: list[dict] = []

    def total(q):
        b = _barrier(energy, q)
        if not math.isfinite(b):
            return math.inf, None
        ev = energy.evaluate(q)
        return ev.value + b, ev

    def check_escape(q, prev):
        cp_margin = energy.domain.boundary_distance(q).min()
        sep = math.inf
        if len(q) > 1:
            d = np.linalg.norm(q[:, None] - q[None], axis=-1)
            sep = d[np.triu_indices(len(q), 1)].min()
        if cp_margin < 0.5 * h or sep < 0.5 * h:
            step = q - prev
            nrm = np.linalg.norm(step)
            direction = step / nrm if nrm > 0 else step
            kind = "boundary" if cp_margin < 0.5 * h else "collision"
            raise EscapedConfigurationError(
                f"iterates left the admissible set ({kind}); "
                f"boundary margin {cp_margin:.3g}, separation {sep:.3g}",
                points=q,
                direction=direction,
            )

    f, ev = total(p)
    if ev is None:
        raise ConfigurationError("starting configuration violates the barrier")
    g = energy.gradient(p, ev) + _barrier_grad(energy, p)
    t = 0.1 / max(1.0, np.linalg.norm(g))
    it = 0
    for it in range(1, max_iter + 1):
        gn = float(np.linalg.norm(g))
        history.append({"iteration": it - 1, "value": f, "gradient_norm": gn})
        if gn < tol:
            break
        prev = p.copy()
        newton = mode == "saddle" or gn < polish_below
        accepted = False
        if newton:
            Hm = energy.hessian_fd(p)
            try:
                d = -np.linalg.solve(Hm, g.ravel()).reshape(p.shape)
            except np.linalg.LinAlgError:
                d = None
            if d is not None:
                lim = 0.25 * max(h, energy.domain.boundary_distance(p).min())
                dn = np.linalg.norm(d)
                if dn > lim:
                    d *= lim / dn
                s = 1.0
                for _ in range(30):
                    q = p + s * d
                    fq, evq = total(q)
                    if evq is not None:
                        gq = energy.gradient(q, evq) + _barrier_grad(energy, q)
                        ok = np.linalg.norm(gq) < gn if mode == "saddle" else fq <= f + 1e-12 * abs(f) or np.linalg.norm(gq) < gn
                        if ok:
                            p, f, g, accepted = q, fq, gq, True
                            break
                    s *= 0.5
        if not accepted:
            if mode == "saddle":
                raise NonConvergenceError("Newton refinement stalled at a saddle", history)
            for _ in range(60):
                q = p - t * g
                fq, evq = total(q)
                if evq is not None and fq <= f - 1e-4 * t * gn * gn:
                    g = energy.gradient(q, evq) + _barrier_grad(energy, q)
                    p, f = q, fq
                    accepted = True
                    t *= 2.0
                    break
                t *= 0.5
            if not accepted:
                check_escape(p, prev)
                raise NonConvergenceError("line search stalled in critical-point search", history)
        check_escape(p, prev)
    else:
        raise NonConvergenceError("critical-point search hit the iteration limit", history)
    grad = energy.gradient(p)
    eigs = np.linalg.eigvalsh(energy.hessian_fd(p))
    return CriticalPoint(p, energy.value(p), grad, float(np.linalg.norm(grad)), eigs, _classify(eigs), it, history)


def multistart(energy: ReducedEnergy, seeds, **kwargs) -> list:
    """Run :func:`find_critical` from each seed in order; failures are
    returned as exception objects in the same position."""
    out = []
    for s in seeds:
        try:
            out.append(find_critical(energy, s, **kwargs))
        except (EscapedConfigurationError, NonConvergenceError) as exc:
            out.append(exc)
    return out

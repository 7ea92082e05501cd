"""The λ-parametrised SU(3) Toda system with zero Dirichlet data

    -Δu₁ = 2λ e^{u₁} - ρ₂ e^{u₂} / ∫e^{u₂}
    -Δu₂ = 2ρ₂ e^{u₂} / ∫e^{u₂} - λ e^{u₁}

solved by damped Newton, and its continuation in decreasing λ.

Unknowns are represented as ``u = W + φ``: the ansatz ``W`` is kept in
closed form (evaluated exactly at quadrature points) and only the
correction ``φ`` is a P1 field. Without an ansatz ``W = 0``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
import numpy as np
from scipy import sparse
from scipy.sparse import linalg as spla

from .ansatz import Ansatz, _transfer, build_ansatz
from .errors import BranchAbortError, NonConvergenceError, TodaLabError
from .fem import DirichletOperator, operator_for
from .mesh import DomainSpec, Mesh, ScalarField

__all__ = [
    "NumericalRangeError",
    "BasinEscapeError",
    "TodaSystem",
    "TodaState",
    "toda_residual",
    "toda_newton",
    "energy_J",
    "jacobian_inf_sup",
    "BranchSample",
    "BranchRecord",
    "lambda_ladder",
    "continuation",
    "expansion_check",
    "reduced_energy_on_ansatz",
    "liouville_newton",
    "liouville_disk_solution",
    "ENERGY_CONSTANT",
]

log = logging.getLogger(__name__)

ENERGY_CONSTANT = 8.0 * math.pi * (1.0 - math.log(2.0))
_EXP_LIMIT = 700.0


class NumericalRangeError(TodaLabError, OverflowError):
    """``e^{u₁}`` overflowed; a smaller λ step is needed."""


class BasinEscapeError(NonConvergenceError):
    """Newton did not converge from the given initial state."""

    def __init__(self, message, initial_residual, trace=None):
        super().__init__(message, trace)
        self.initial_residual = initial_residual


class TodaSystem:
    """Discrete weak residual and Jacobian of the Toda system around a fixed
    ansatz on one mesh.

    The Jacobian has the form ``A + U V^T`` with ``A`` sparse and a rank-one
    term from the nonlocal normalisation ``e^{u₂}/∫e^{u₂}``.
    """

    def __init__(self, mesh: Mesh, lam: float, rho2: float, ansatz: Ansatz | None = None, rule: str = "deg5"):
        if ansatz is not None:
            if ansatz.mesh is not mesh:
                raise ValueError("ansatz lives on a different mesh")
            rule = ansatz.rule
        self.mesh = mesh
        self.lam = float(lam)
        self.rho2 = float(rho2)
        self.ansatz = ansatz
        self.op: DirichletOperator = operator_for(mesh)
        self.quad = mesh.quadrature(rule)
        q = self.quad
        self.B = q.B
        self.B_I = q.B[:, self.op.interior].tocsr()
        self.w = q.weights
        n = mesh.n_nodes
        if ansatz is None:
            self.W1q = np.zeros(len(q))
            self.W2q = np.zeros(len(q))
            self.load_W1 = np.zeros(n)
            self.load_W2 = np.zeros(n)
            self.PP = self.Pz = self.zz = 0.0
        else:
            self.W1q, self.W2q = ansatz.W()
            v = ansatz._values()
            ew = v.ew.sum(axis=0)
            Kz = self.op.K @ ansatz.z.values
            bw = q.load(ew)
            # ∫∇W·∇v_j for every hat function, using -ΔPw_i = e^{w_i}
            self.load_W1 = bw - 0.5 * Kz
            self.load_W2 = -0.5 * bw + Kz
            P = v.Pw.sum(axis=0)
            self.PP = q.integrate(ew * P)
            self.Pz = q.integrate(ew * v.z)
            self.zz = float(ansatz.z.values @ Kz)

    # helpers ------------------------------------------------------------------
    def fields_q(self, phi1: np.ndarray, phi2: np.ndarray):
        u1 = self.W1q + self.B @ phi1
        u2 = self.W2q + self.B @ phi2
        m = u1.max()
        if m > _EXP_LIMIT:
            raise NumericalRangeError(f"e^u1 overflows (max u1 = {m:.1f}); use a smaller λ step")
        e1 = np.exp(u1)
        s2 = u2.max()
        e2 = np.exp(u2 - s2)
        S = float(self.w @ e2)
        g2 = e2 / S  # e^{u₂}/∫e^{u₂} at quadrature points
        return e1, g2, S * math.exp(s2) if s2 < _EXP_LIMIT else math.inf, math.log(S) + s2

    def weak_residual(self, phi1: np.ndarray, phi2: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Full nodal vectors ``∫∇u_a·∇v_j - ∫F_a(u) v_j``."""
        e1, g2, _, _ = self.fields_q(phi1, phi2)
        K = self.op.K
        l1 = self.B.T @ (self.w * e1)
        l2 = self.B.T @ (self.w * g2)
        R1 = self.load_W1 + K @ phi1 - 2 * self.lam * l1 + self.rho2 * l2
        R2 = self.load_W2 + K @ phi2 - 2 * self.rho2 * l2 + self.lam * l1
        return R1, R2

    def residual_interior(self, x: np.ndarray) -> np.ndarray:
        phi1, phi2 = self.split(x)
        R1, R2 = self.weak_residual(phi1, phi2)
        I = self.op.interior
        return np.concatenate([R1[I], R2[I]])

    def split(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        n = self.op.n_interior
        return self.op.extend(x[:n]), self.op.extend(x[n:])

    def residual_norm(self, x: np.ndarray, r: np.ndarray | None = None) -> float:
        r = self.residual_interior(x) if r is None else r
        n = self.op.n_interior
        return self.op.dual_norm(r[:n]) + self.op.dual_norm(r[n:])

    def jacobian(self, x: np.ndarray):
        """Return ``(A, U, V)`` with Jacobian ``A + U V^T``."""
        phi1, phi2 = self.split(x)
        e1, g2, _, _ = self.fields_q(phi1, phi2)
        BI = self.B_I
        D1 = BI.T @ sparse.diags(self.w * e1) @ BI
        D2 = BI.T @ sparse.diags(self.w * g2) @ BI
        v2 = BI.T @ (self.w * g2)
        K = self.op.K_II
        lam, rho = self.lam, self.rho2
        A = sparse.bmat([[K - 2 * lam * D1, rho * D2], [lam * D1, K - 2 * rho * D2]], format="csc")
        zero = np.zeros_like(v2)
        U = np.concatenate([-rho * v2, 2 * rho * v2])
        V = np.concatenate([zero, v2])
        return A, U, V

    # norms and energy ------------------------------------------------------------
    def inner_products(self, phi1: np.ndarray, phi2: np.ndarray) -> np.ndarray:
        """Gram matrix ``(∫∇u_a·∇u_b)_{a,b}`` of ``u = W + φ``."""
        K = self.op.K
        PP, Pz, zz = self.PP, self.Pz, self.zz
        # W₁ = P - z/2, W₂ = -P/2 + z
        WW = np.array(
            [
                [PP - Pz + 0.25 * zz, -0.5 * PP + 1.25 * Pz - 0.5 * zz],
                [-0.5 * PP + 1.25 * Pz - 0.5 * zz, 0.25 * PP - Pz + zz],
            ]
        )
        loads = [self.load_W1, self.load_W2]
        phis = [phi1, phi2]
        G = WW.copy()
        for a in range(2):
            for b in range(2):
                G[a, b] += loads[a] @ phis[b] + loads[b] @ phis[a] + phis[a] @ (K @ phis[b])
        return G


def _rank_one_solver(A, U: np.ndarray, V: np.ndarray):
    lu = spla.splu(A)
    AU = lu.solve(U)
    denom = 1.0 + float(V @ AU)
    AtV = lu.solve(V, trans="T")
    denom_t = 1.0 + float(U @ AtV)

    def solve(b):
        y = lu.solve(b)
        return y - AU * (float(V @ y) / denom)

    def solve_t(b):
        y = lu.solve(b, trans="T")
        return y - AtV * (float(U @ y) / denom_t)

    return solve, solve_t


@dataclass
class TodaState:
    """A (possibly converged) solution ``u = W + φ`` on one mesh."""

    system: TodaSystem
    phi1: np.ndarray
    phi2: np.ndarray
    residual_norm: float = math.nan
    converged: bool = False
    iterations: int = 0
    trace: list[dict] = field(default_factory=list)

    @classmethod
    def from_fields(cls, u1: ScalarField, u2: ScalarField, lam: float, rho2: float, rule: str = "mid3") -> "TodaState":
        """State with ``W = 0`` and ``φ = u`` (both zero-trace P1 fields)."""
        if u1.mesh is not u2.mesh:
            raise ValueError("fields must share a mesh")
        system = TodaSystem(u1.mesh, lam, rho2, None, rule)
        return cls(system, np.array(u1.values, dtype=float), np.array(u2.values, dtype=float))

    @property
    def mesh(self) -> Mesh:
        return self.system.mesh

    @property
    def lam(self) -> float:
        return self.system.lam

    @property
    def rho2(self) -> float:
        return self.system.rho2

    @property
    def ansatz(self) -> Ansatz | None:
        return self.system.ansatz

    @property
    def u1(self) -> ScalarField:
        W1 = self.ansatz.W_nodal()[0] if self.ansatz is not None else 0.0
        return ScalarField(self.mesh, W1 + self.phi1)

    @property
    def u2(self) -> ScalarField:
        W2 = self.ansatz.W_nodal()[1] if self.ansatz is not None else 0.0
        return ScalarField(self.mesh, W2 + self.phi2)

    @property
    def x(self) -> np.ndarray:
        I = self.system.op.interior
        return np.concatenate([self.phi1[I], self.phi2[I]])

    def norms(self) -> tuple[float, float]:
        G = self.system.inner_products(self.phi1, self.phi2)
        return math.sqrt(max(G[0, 0], 0.0)), math.sqrt(max(G[1, 1], 0.0))

    @property
    def u_norm(self) -> float:
        a, b = self.norms()
        return a + b

    @property
    def distance_to_ansatz(self) -> float:
        """``‖u - W‖ = ‖∇φ₁‖ + ‖∇φ₂‖``."""
        K = self.system.op.K
        return math.sqrt(max(0.0, self.phi1 @ (K @ self.phi1))) + math.sqrt(max(0.0, self.phi2 @ (K @ self.phi2)))

    @property
    def rho1(self) -> float:
        """``λ ∫ e^{u₁}``."""
        e1, _, _, _ = self.system.fields_q(self.phi1, self.phi2)
        return self.lam * float(self.system.w @ e1)

    @property
    def int_eu2(self) -> float:
        return self.system.fields_q(self.phi1, self.phi2)[2]


def toda_residual(state: TodaState) -> tuple[ScalarField, ScalarField]:
    """Strong-form residuals ``Δu₁ + 2λe^{u₁} - ρ₂e^{u₂}/∫e^{u₂}`` and
    ``Δu₂ + 2ρ₂e^{u₂}/∫e^{u₂} - λe^{u₁}``, recovered from the weak residual
    with the lumped mass at every node."""
    R1, R2 = state.system.weak_residual(state.phi1, state.phi2)
    lumped = np.asarray(state.system.op.M.sum(axis=1)).ravel()
    return ScalarField(state.mesh, -R1 / lumped), ScalarField(state.mesh, -R2 / lumped)


def toda_newton(
    init: TodaState,
    rtol: float = 1e-9,
    max_steps: int = 40,
    max_halvings: int = 30,
) -> TodaState:
    """Damped Newton on the coupled system, the merit being the sum of the
    H^{-1} norms of the two weak residuals. Converged when that sum is below
    ``rtol * (1 + ‖u‖)``."""
    system = init.system
    x = init.x.copy()
    r = system.residual_interior(x)
    rn = system.residual_norm(x, r)
    r0 = rn
    trace = []
    for it in range(max_steps + 1):
        st = TodaState(system, *system.split(x))
        unorm = st.u_norm
        trace.append({"iteration": it, "residual_norm": rn, "u_norm": unorm})
        if rn < rtol * (1.0 + unorm):
            return TodaState(system, st.phi1, st.phi2, rn, True, it, trace)
        if it == max_steps:
            break
        A, U, V = system.jacobian(x)
        solve, _ = _rank_one_solver(A, U, V)
        d = -solve(r)
        t = 1.0
        for _ in range(max_halvings):
            xt = x + t * d
            try:
                rt = system.residual_interior(xt)
            except NumericalRangeError:
                t *= 0.5
                continue
            rnt = system.residual_norm(xt, rt)
            if np.isfinite(rnt) and rnt <= (1.0 - 1e-4 * t) * rn:
                break
            t *= 0.5
        else:
            raise BasinEscapeError(
                f"Newton line search failed (initial residual {r0:.3e})", r0, trace
            )
        trace[-1]["step"] = t
        x, r, rn = xt, rt, rnt
    raise BasinEscapeError(f"Newton did not converge in {max_steps} steps (initial residual {r0:.3e})", r0, trace)


def energy_J(state: TodaState) -> float:
    """``J = ⅓ ∫(|∇u₁|² + |∇u₂|² + ∇u₁·∇u₂) - λ∫e^{u₁} - ρ₂ log ∫e^{u₂}``."""
    G = state.system.inner_products(state.phi1, state.phi2)
    Q = G[0, 0] + G[1, 1] + G[0, 1]
    e1, _, _, logS = state.system.fields_q(state.phi1, state.phi2)
    out = Q / 3.0 - state.lam * float(state.system.w @ e1)
    if state.rho2:
        out -= state.rho2 * logS
    return out


def jacobian_inf_sup(state: TodaState, tol: float = 1e-8, max_iter: int = 300) -> float:
    """Smallest singular value of the Jacobian as a map H^1_0 → H^{-1}
    (each component measured in the stiffness norm); equals 1 for two
    decoupled Laplacians."""
    system = state.system
    A, U, V = system.jacobian(state.x)
    solve, solve_t = _rank_one_solver(A, U, V)
    Kb = sparse.block_diag([system.op.K_II, system.op.K_II], format="csr")
    x = np.random.default_rng(1).standard_normal(A.shape[0])
    x /= math.sqrt(x @ (Kb @ x))
    est_old = math.inf
    for _ in range(max_iter):
        y = solve(Kb @ solve_t(Kb @ x))
        est = math.sqrt(y @ (Kb @ y))
        x = y / est
        if abs(est - est_old) <= tol * est:
            break
        est_old = est
    return 1.0 / math.sqrt(est)


# ---------------------------------------------------------------------------
# Continuation


def lambda_ladder(lam_start: float, lam_min: float, shrink: float) -> list[float]:
    """``λ_start · shrink^j`` while above ``λ_min``, ending exactly at ``λ_min``."""
    if not (0.3 < shrink < 0.9):
        raise ValueError("shrink factor must lie in (0.3, 0.9)")
    if not (0 < lam_min <= lam_start <= 1e-1):
        raise ValueError("need 0 < λ_min ≤ λ_start ≤ 1e-1")
    out = []
    j = 0
    while True:
        lam = lam_start * shrink**j
        if lam <= lam_min * (1 + 1e-12):
            break
        out.append(lam)
        j += 1
    out.append(lam_min)
    return out


@dataclass
class BranchSample:
    lam: float
    rho1: float
    J: float
    defect: float
    iterations: int
    distance: float
    sigma_min: float
    converged: bool
    residual_norm: float
    delta_min: float
    n_nodes: int
    Lambda: float

    def row(self) -> dict:
        return {
            "lambda": self.lam,
            "rho1": self.rho1,
            "J": self.J,
            "defect": self.defect,
            "newton_iterations": self.iterations,
            "u_minus_W": self.distance,
            "jacobian_sigma_min": self.sigma_min,
        }


@dataclass
class BranchRecord:
    xi: np.ndarray
    rho2: float
    Lambda: float | None
    samples: list[BranchSample] = field(default_factory=list)
    states: list[TodaState] = field(default_factory=list, repr=False)
    truncated: bool = False
    diagnostics: str = ""

    @property
    def lambdas(self) -> np.ndarray:
        return np.array([s.lam for s in self.samples])

    @property
    def rho1(self) -> np.ndarray:
        return np.array([s.rho1 for s in self.samples])

    @property
    def defects(self) -> np.ndarray:
        return np.array([s.defect for s in self.samples])


def continuation(
    domain: DomainSpec,
    xi,
    rho2: float,
    Lambda_value: float | None = None,
    lam_start: float = 1e-2,
    lam_min: float = 1e-5,
    shrink: float = 0.5,
    h: float = 0.05,
    grading: float = 0.25,
    rule: str = "deg5",
    green_mode: str = "auto",
    rtol: float = 1e-9,
    keep_states: bool = False,
    inf_sup: bool = True,
) -> BranchRecord:
    """Follow the branch of solutions concentrating at ``ξ`` as λ decreases.

    Each λ gets a fresh ansatz and graded mesh; the previous correction φ is
    interpolated onto the new mesh as the Newton seed. Unless
    ``Lambda_value`` is given, the reduced energy entering the defect is
    evaluated on each sample's own mesh so that both sides of the energy
    expansion share one discretisation.
    """
    xi = np.atleast_2d(np.asarray(xi, dtype=float))
    k = len(xi)
    record = BranchRecord(xi, rho2, Lambda_value)
    prev: TodaState | None = None
    for lam in lambda_ladder(lam_start, lam_min, shrink):
        A = build_ansatz(domain, xi, lam, rho2, h=h, grading=grading, rule=rule, green_mode=green_mode)
        system = TodaSystem(A.mesh, lam, rho2, A)
        if prev is None:
            init = TodaState(system, np.zeros(A.mesh.n_nodes), np.zeros(A.mesh.n_nodes))
        else:
            p1 = ScalarField(prev.mesh, prev.phi1)
            p2 = ScalarField(prev.mesh, prev.phi2)
            init = TodaState(system, _transfer(p1, A.mesh), _transfer(p2, A.mesh))
        try:
            st = toda_newton(init, rtol=rtol)
        except (NonConvergenceError, NumericalRangeError) as exc:
            if prev is None:
                raise BranchAbortError(f"first continuation step failed at λ={lam:.3e}: {exc}") from exc
            record.truncated = True
            record.diagnostics = f"stopped at λ={lam:.3e}: {exc}"
            log.warning(record.diagnostics)
            break
        J = energy_J(st)
        Lam = Lambda_value if Lambda_value is not None else reduced_energy_on_ansatz(A)
        defect = J + 4 * math.pi * k * math.log(lam) - Lam + k * ENERGY_CONSTANT
        sigma = jacobian_inf_sup(st) if inf_sup else math.nan
        record.samples.append(
            BranchSample(
                lam, st.rho1, J, defect, st.iterations, st.distance_to_ansatz, sigma, True,
                st.residual_norm, float(A.deltas.min()), A.mesh.n_nodes, Lam,
            )
        )
        if keep_states:
            record.states.append(st)
        log.info("λ=%.3e ρ₁=%.8f J=%.6f defect=%.4e its=%d", lam, st.rho1, J, defect, st.iterations)
        prev = st
    return record


def reduced_energy_on_ansatz(ansatz: Ansatz) -> float:
    """``Λ(ξ)`` using the mean-field solution stored with the ansatz."""
    half_I = 0.5 * ansatz.meanfield.energy if ansatz.meanfield is not None else 0.0
    p = ansatz.xi
    green = ansatz.green
    s = sum(green.robin(pi) for pi in p)
    s += sum(green.G(p[i], p[j]) for i in range(len(p)) for j in range(len(p)) if i != j)
    return half_I - 16 * math.pi**2 * s


def expansion_check(record: BranchRecord) -> np.ndarray:
    """Per-λ defect ``J + 4πk log λ - Λ(ξ*) + 8πk(1 - log 2)``."""
    return record.defects


# ---------------------------------------------------------------------------
# Scalar Liouville reference


def liouville_newton(ansatz: Ansatz, lam: float | None = None, rtol: float = 1e-9, max_steps: int = 40) -> tuple[np.ndarray, int]:
    """Solve ``Δu + 2λe^u = 0``, ``u = Σ Pw_i + φ``, by Newton; returns the
    nodal correction φ and the iteration count."""
    lam = ansatz.lam if lam is None else lam
    op = ansatz.op
    q = ansatz.quad
    v = ansatz._values()
    Wq = v.Pw.sum(axis=0)
    loadW = q.load(v.ew.sum(axis=0))
    BI = q.B[:, op.interior].tocsr()
    I = op.interior
    phi = np.zeros(op.n_interior)

    def residual(p):
        e = np.exp(Wq + BI @ p)
        return loadW[I] + op.K_II @ p - 2 * lam * (BI.T @ (q.weights * e)), e

    r, e = residual(phi)
    for it in range(max_steps + 1):
        rn = op.dual_norm(r)
        unorm = math.sqrt(max(0.0, q.integrate(v.ew.sum(axis=0) * Wq) + 2 * loadW[I] @ phi + phi @ (op.K_II @ phi)))
        if rn < rtol * (1 + unorm):
            return op.extend(phi), it
        Jm = (op.K_II - 2 * lam * (BI.T @ sparse.diags(q.weights * e) @ BI)).tocsc()
        d = -spla.spsolve(Jm, r)
        t = 1.0
        for _ in range(30):
            rt, et = residual(phi + t * d)
            if op.dual_norm(rt) <= (1 - 1e-4 * t) * rn:
                break
            t *= 0.5
        phi, r, e = phi + t * d, rt, et
    raise NonConvergenceError("scalar Liouville Newton did not converge")


def liouville_disk_solution(lam: float) -> dict:
    """Radial solution ``u = 2 log((1+μ²)/(μ²+r²))`` of ``Δu + 2λe^u = 0``
    on the unit disk with ``λ = 4μ²/(1+μ²)²`` (small branch), its mass
    ``ρ₁ = λ∫e^u = 4π/(1+μ²)`` and energy ``¼∫|∇u|² - λ∫e^u``."""
    mu = (1 - math.sqrt(1 - lam)) / math.sqrt(lam)
    m2 = mu * mu
    rho1 = 4 * math.pi / (1 + m2)
    dirichlet = 16 * math.pi * (math.log((1 + m2) / m2) + m2 / (1 + m2) - 1)
    return {"mu": mu, "rho1": rho1, "dirichlet": dirichlet, "energy": 0.25 * dirichlet - rho1}

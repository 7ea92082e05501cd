"""P1 finite elements with homogeneous Dirichlet data: stiffness and mass
assembly, cached factorisations, Poisson and harmonic-extension solves,
recovered gradients and norms."""

from __future__ import annotations

import logging
import threading
import warnings

import numpy as np
from scipy import sparse
from scipy.sparse import linalg as spla

from .mesh import Mesh, ScalarField, _values, locate_many

__all__ = [
    "DirichletOperator",
    "operator_for",
    "stiffness_matrix",
    "mass_matrix",
    "solve_poisson",
    "harmonic_extension",
    "gradient_at",
    "nodal_gradients",
    "lp_norm",
    "lp_norm_quadrature",
    "h1_seminorm",
    "NearBoundaryWarning",
]

log = logging.getLogger(__name__)


class NearBoundaryWarning(UserWarning):
    """Gradient requested closer to the boundary than the mesh resolves."""


def _shape_gradients(mesh: Mesh) -> np.ndarray:
    """Gradients of the three hat functions on each triangle, shape (m, 3, 2)."""
    p = mesh.nodes[mesh.triangles]
    x, y = p[..., 0], p[..., 1]
    a2 = 2.0 * mesh.areas
    gx = np.stack([y[:, 1] - y[:, 2], y[:, 2] - y[:, 0], y[:, 0] - y[:, 1]], axis=1) / a2[:, None]
    gy = np.stack([x[:, 2] - x[:, 1], x[:, 0] - x[:, 2], x[:, 1] - x[:, 0]], axis=1) / a2[:, None]
    return np.stack([gx, gy], axis=-1)


def stiffness_matrix(mesh: Mesh) -> sparse.csr_matrix:
    g = _shape_gradients(mesh)
    local = np.einsum("tid,tjd->tij", g, g) * mesh.areas[:, None, None]
    t = mesh.triangles
    rows = np.repeat(t, 3, axis=1).ravel()
    cols = np.tile(t, (1, 3)).ravel()
    return sparse.csr_matrix((local.ravel(), (rows, cols)), shape=(mesh.n_nodes,) * 2)


def mass_matrix(mesh: Mesh) -> sparse.csr_matrix:
    ref = (np.ones((3, 3)) + np.eye(3)) / 12.0
    local = mesh.areas[:, None, None] * ref[None]
    t = mesh.triangles
    rows = np.repeat(t, 3, axis=1).ravel()
    cols = np.tile(t, (1, 3)).ravel()
    return sparse.csr_matrix((local.ravel(), (rows, cols)), shape=(mesh.n_nodes,) * 2)


class DirichletOperator:
    """Stiffness/mass matrices of a mesh with the interior block factorised
    once and reused for every right-hand side."""

    def __init__(self, mesh: Mesh):
        self.mesh = mesh
        self.K = stiffness_matrix(mesh)
        self.M = mass_matrix(mesh)
        self.interior = mesh.interior
        self.bnd = mesh.boundary_indices
        self.K_II = self.K[self.interior][:, self.interior].tocsc()
        self.K_IB = self.K[self.interior][:, self.bnd].tocsr()
        self.M_II = self.M[self.interior][:, self.interior].tocsr()
        self._lu = None
        self._lock = threading.Lock()

    @property
    def n_interior(self) -> int:
        return len(self.interior)

    def _factor(self):
        with self._lock:
            if self._lu is None:
                try:
                    self._lu = spla.splu(self.K_II)
                except (MemoryError, RuntimeError) as exc:  # pragma: no cover
                    log.warning("direct factorisation failed (%s); using CG", exc)
                    self._lu = False
        return self._lu

    def solve_interior(self, b: np.ndarray) -> np.ndarray:
        """Solve ``K_II x = b`` for one or several right-hand sides."""
        lu = self._factor()
        if lu is not False:
            return lu.solve(np.asarray(b, dtype=float))
        b = np.asarray(b, dtype=float)
        cols = b.reshape(len(b), -1)
        out = np.empty_like(cols)
        for j in range(cols.shape[1]):
            out[:, j], info = spla.cg(self.K_II, cols[:, j], rtol=1e-12, maxiter=20 * len(b))
            if info:
                raise RuntimeError("conjugate gradients did not converge")
        return out.reshape(b.shape)

    def extend(self, interior_values: np.ndarray) -> np.ndarray:
        """Embed interior values into a full nodal vector with zero trace."""
        out = np.zeros(self.mesh.n_nodes)
        out[self.interior] = interior_values
        return out

    def solve_load(self, load: np.ndarray) -> np.ndarray:
        """Nodal solution with zero trace for a full weak load vector."""
        return self.extend(self.solve_interior(np.asarray(load)[self.interior]))

    def dual_norm(self, r_interior: np.ndarray) -> float:
        """``sqrt(r^T K_II^{-1} r)``, the discrete H^{-1} norm of a weak residual."""
        return float(np.sqrt(max(0.0, np.dot(r_interior, self.solve_interior(r_interior)))))


_OP_KEY = "dirichlet-operator"


def operator_for(mesh: Mesh) -> DirichletOperator:
    """Cached :class:`DirichletOperator` of a mesh."""
    op = mesh._cache.get(_OP_KEY)
    if op is None:
        op = mesh._cache[_OP_KEY] = DirichletOperator(mesh)
    return op


def solve_poisson(op: DirichletOperator, rhs) -> ScalarField:
    """Solve ``-Δu = rhs`` with zero boundary values; ``rhs`` is a P1 field
    (its load vector is formed exactly with the consistent mass matrix)."""
    f = _values(op.mesh, rhs)
    return ScalarField(op.mesh, op.solve_load(op.M @ f))


def harmonic_extension(op: DirichletOperator, boundary_values) -> ScalarField:
    """Discrete harmonic function with the given values at boundary nodes.

    ``boundary_values`` is either a full nodal vector (only boundary entries
    are read) or a vector over ``mesh.boundary_indices``.
    """
    g = np.asarray(boundary_values, dtype=float)
    if g.shape == (op.mesh.n_nodes,):
        g = g[op.bnd]
    out = np.zeros(op.mesh.n_nodes)
    out[op.bnd] = g
    out[op.interior] = -op.solve_interior(op.K_IB @ g)
    return ScalarField(op.mesh, out)


def nodal_gradients(field: ScalarField) -> np.ndarray:
    """Area-weighted average of element gradients around each node; exact
    for linear functions."""
    mesh = field.mesh
    g = _shape_gradients(mesh)
    grad_t = np.einsum("ti,tid->td", field.values[mesh.triangles], g)
    w = np.repeat(mesh.areas, 3)
    idx = mesh.triangles.ravel()
    num = np.zeros((mesh.n_nodes, 2))
    np.add.at(num, idx, np.repeat(grad_t, 3, axis=0) * w[:, None])
    den = np.bincount(idx, weights=w, minlength=mesh.n_nodes)
    return num / den[:, None]


def gradient_at(field: ScalarField, points, warn: bool = True) -> np.ndarray:
    """Recovered gradient at interior points, shape ``(2,)`` or ``(n, 2)``."""
    mesh = field.mesh
    pts = np.asarray(points, dtype=float)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    if warn and mesh.domain is not None:
        near = mesh.domain.boundary_distance(pts) < mesh.h_max
        if near.any():
            warnings.warn(
                "gradient requested within one mesh size of the boundary",
                NearBoundaryWarning,
                stacklevel=2,
            )
    gn = nodal_gradients(field)
    t, b = locate_many(mesh, pts)
    out = np.einsum("pk,pkd->pd", b, gn[mesh.triangles[t]])
    return out[0] if single else out


def lp_norm(field, p: float, rule: str = "mid3") -> float:
    """L^p norm of a P1 field; ``p = inf`` gives the nodal maximum."""
    if isinstance(field, ScalarField):
        mesh, v = field.mesh, field.values
    else:
        raise TypeError("lp_norm expects a ScalarField")
    if p == np.inf:
        return float(np.abs(v).max())
    q = mesh.quadrature(rule)
    return lp_norm_quadrature(q.B @ v, q.weights, p)


def lp_norm_quadrature(values_q, weights, p: float) -> float:
    """L^p norm from values at quadrature points."""
    if not p >= 1:
        raise ValueError("p must be at least 1")
    a = np.abs(np.asarray(values_q, dtype=float))
    if p == np.inf:
        return float(a.max())
    return float(np.dot(weights, a**p) ** (1.0 / p))


def h1_seminorm(field: ScalarField, op: DirichletOperator | None = None) -> float:
    """``||∇u||_{L^2}``, the H^1_0 norm used throughout."""
    op = op or operator_for(field.mesh)
    v = field.values
    return float(np.sqrt(max(0.0, v @ (op.K @ v))))

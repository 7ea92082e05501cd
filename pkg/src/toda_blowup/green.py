"""Dirichlet Green function ``G(x, y) = (1/2π) log(1/|x - y|) + H(x, y)``.

``H`` is available in closed form on the unit disk and numerically, as the
discrete harmonic extension of ``(1/2π) log|b - y|``, on any meshed domain.
"""

from __future__ import annotations

import math
import threading

import numpy as np

from .fem import DirichletOperator, gradient_at, harmonic_extension, nodal_gradients, operator_for
from .mesh import Mesh, ScalarField, locate_many

__all__ = ["GreenFunction", "vortex_weight", "ANALYTIC_DISK", "NUMERIC"]

ANALYTIC_DISK = "analytic-disk"
NUMERIC = "numeric"

_INV2PI = 1.0 / (2.0 * math.pi)
_INV4PI = 1.0 / (4.0 * math.pi)


def _pts(x) -> tuple[np.ndarray, bool]:
    a = np.asarray(x, dtype=float)
    return np.atleast_2d(a), a.ndim == 1


class GreenFunction:
    """Evaluator for ``G``, its regular part ``H`` and their ``x``-gradients.

    In numeric mode the field ``H(·, y)`` is computed once per source and
    cached (sources are rounded to a 1e-9 grid, so nearly equal sources
    share a field).
    """

    def __init__(self, mode: str = ANALYTIC_DISK, mesh: Mesh | None = None):
        if mode not in (ANALYTIC_DISK, NUMERIC):
            raise ValueError(f"unknown Green mode {mode!r}")
        if mode == NUMERIC and mesh is None:
            raise ValueError("numeric Green mode needs a mesh")
        if mode == ANALYTIC_DISK and mesh is not None and mesh.domain is not None:
            if mesh.domain.kind != "unit-disk":
                raise ValueError("closed-form Green function is only available on the unit disk")
        self.mode = mode
        self.mesh = mesh
        self._fields: dict[tuple[int, int], ScalarField] = {}
        self._grads: dict[tuple[int, int], np.ndarray] = {}
        self._lock = threading.Lock()

    @classmethod
    def for_mesh(cls, mesh: Mesh, mode: str = "auto") -> "GreenFunction":
        if mode == "auto":
            mode = ANALYTIC_DISK if mesh.domain is not None and mesh.domain.kind == "unit-disk" else NUMERIC
        return cls(mode, mesh)

    @property
    def op(self) -> DirichletOperator:
        return operator_for(self.mesh)

    # numeric fields -----------------------------------------------------------
    def _key(self, y) -> tuple[int, int]:
        return (int(round(y[0] * 1e9)), int(round(y[1] * 1e9)))

    def H_field(self, y) -> ScalarField:
        """Nodal field ``x -> H(x, y)`` on the evaluator's mesh."""
        y = np.asarray(y, dtype=float)
        if self.mode == ANALYTIC_DISK:
            if self.mesh is None:
                raise ValueError("no mesh attached")
            return ScalarField(self.mesh, self._H_analytic(self.mesh.nodes, y))
        key = self._key(y)
        with self._lock:
            field = self._fields.get(key)
        if field is None:
            yq = np.array(key, dtype=float) * 1e-9
            b = self.mesh.nodes[self.op.bnd]
            data = _INV2PI * np.log(np.linalg.norm(b - yq, axis=1))
            field = harmonic_extension(self.op, data)
            with self._lock:
                field = self._fields.setdefault(key, field)
        return field

    # closed form -----------------------------------------------------------------
    @staticmethod
    def _H_analytic(x: np.ndarray, y: np.ndarray) -> np.ndarray:
        xx = (x * x).sum(-1)
        yy = (y * y).sum(-1)
        xy = (x * y).sum(-1)
        return _INV4PI * np.log(xx * yy - 2.0 * xy + 1.0)

    @staticmethod
    def _grad1_H_analytic(x: np.ndarray, y: np.ndarray) -> np.ndarray:
        xx = (x * x).sum(-1)
        yy = (y * y).sum(-1)
        xy = (x * y).sum(-1)
        den = xx * yy - 2.0 * xy + 1.0
        return _INV4PI * (2.0 * yy[..., None] * x - 2.0 * y) / den[..., None]

    # public API -------------------------------------------------------------------
    def H(self, x, y):
        """Regular part ``H(x, y)`` for one source ``y`` and points ``x``."""
        X, single = _pts(x)
        y = np.asarray(y, dtype=float)
        if self.mode == ANALYTIC_DISK:
            out = self._H_analytic(X, y)
        else:
            out = self._eval_numeric(X, y)
        return float(out[0]) if single else out

    def _eval_numeric(self, X: np.ndarray, y: np.ndarray) -> np.ndarray:
        # Σ b_i (u_i + ½ ∇u_i·(x - x_i)) with recovered nodal gradients is
        # exact for quadratics, so point values do not inherit the O(h²)
        # interpolation error of the P1 field on top of the nodal error
        f = self.H_field(y)
        key = self._key(y)
        with self._lock:
            grads = self._grads.get(key)
        if grads is None:
            grads = nodal_gradients(f)
            with self._lock:
                grads = self._grads.setdefault(key, grads)
        t, b = locate_many(self.mesh, X, strict=False)
        tri = self.mesh.triangles[t]
        d = X[:, None, :] - self.mesh.nodes[tri]
        corr = 0.5 * np.einsum("pkd,pkd->pk", grads[tri], d)
        return ((f.values[tri] + corr) * b).sum(axis=1)

    def H_quadrature(self, quad, y) -> np.ndarray:
        """``H(x_q, y)`` at the points of a quadrature; on the evaluator's own
        mesh the numeric field is applied through the P1 evaluation matrix."""
        y = np.asarray(y, dtype=float)
        if self.mode == ANALYTIC_DISK:
            return self._H_analytic(quad.points, y)
        if quad.mesh is self.mesh:
            return quad.B @ self.H_field(y).values
        return self.H(quad.points, y)

    def H_nodes(self, mesh: Mesh, y) -> np.ndarray:
        """``H(x, y)`` at the nodes of ``mesh``."""
        y = np.asarray(y, dtype=float)
        if self.mode == NUMERIC and mesh is self.mesh:
            return self.H_field(y).values
        return np.atleast_1d(self.H(mesh.nodes, y))

    def robin(self, y) -> float:
        return self.H(y, y)

    def G(self, x, y):
        X, single = _pts(x)
        y = np.asarray(y, dtype=float)
        r = np.linalg.norm(X - y, axis=1)
        if np.any(r == 0):
            raise ValueError("G is singular on the diagonal")
        out = -_INV2PI * np.log(r) + np.atleast_1d(self.H(X, y))
        return float(out[0]) if single else out

    def grad1_H(self, x, y):
        """Gradient of ``H`` in its first argument."""
        X, single = _pts(x)
        y = np.asarray(y, dtype=float)
        if self.mode == ANALYTIC_DISK:
            out = self._grad1_H_analytic(X, y)
        else:
            out = np.atleast_2d(gradient_at(self.H_field(y), X, warn=False))
        return out[0] if single else out

    def grad1_G(self, x, y):
        X, single = _pts(x)
        y = np.asarray(y, dtype=float)
        d = X - y
        r2 = (d * d).sum(axis=1)
        if np.any(r2 == 0):
            raise ValueError("G is singular on the diagonal")
        out = -_INV2PI * d / r2[:, None] + np.atleast_2d(self.grad1_H(X, y))
        return out[0] if single else out


def vortex_weight(green: GreenFunction, x, xi) -> np.ndarray:
    """``h(x) = prod_i |x - ξ_i|^2 exp(-4π H(x, ξ_i))``, which equals
    ``exp(-4π Σ_i G(x, ξ_i))`` and vanishes at the points ``ξ_i``."""
    X, single = _pts(x)
    out = np.ones(len(X))
    for p in np.atleast_2d(np.asarray(xi, dtype=float)):
        d2 = ((X - p) ** 2).sum(axis=1)
        out *= d2 * np.exp(-4.0 * math.pi * np.atleast_1d(green.H(X, p)))
    return float(out[0]) if single else out


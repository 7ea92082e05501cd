"""Planar domains, conforming P1 triangulations, refinement, point location
and quadrature.

Triangles are stored counter-clockwise with the newest-vertex convention:
``triangles[t, 0]`` is the newest vertex and the edge
``(triangles[t, 1], triangles[t, 2])`` is the edge bisected next.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Callable, Iterable

import numpy as np
from scipy import sparse
from scipy.spatial import cKDTree

from .errors import MeshError, OutsideDomainError

__all__ = [
    "DomainSpec",
    "Mesh",
    "ScalarField",
    "Quadrature",
    "PointLocation",
    "build_mesh",
    "refine",
    "refine_to_size",
    "uniform_refine",
    "bubble_size_function",
    "locate",
    "locate_many",
    "interpolate",
    "integrate",
    "quadrature_rule",
    "read_mesh",
    "write_mesh",
    "read_field",
    "write_field",
]


# ---------------------------------------------------------------------------
# Domains


def _segments_cross(p, q, r, s) -> bool:
    def orient(a, b, c):
        return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])

    d1, d2 = orient(r, s, p), orient(r, s, q)
    d3, d4 = orient(p, q, r), orient(p, q, s)
    if ((d1 > 0) != (d2 > 0)) and ((d3 > 0) != (d4 > 0)) and d1 and d2 and d3 and d4:
        return True
    # collinear overlaps count as crossings
    def on_seg(a, b, c):
        return (
            min(a[0], b[0]) - 1e-15 <= c[0] <= max(a[0], b[0]) + 1e-15
            and min(a[1], b[1]) - 1e-15 <= c[1] <= max(a[1], b[1]) + 1e-15
        )

    return (
        (d1 == 0 and on_seg(r, s, p))
        or (d2 == 0 and on_seg(r, s, q))
        or (d3 == 0 and on_seg(p, q, r))
        or (d4 == 0 and on_seg(p, q, s))
    )


@dataclass(frozen=True)
class DomainSpec:
    """A bounded planar domain: the unit disk, a rectangle or a polygon.

    Rectangles occupy ``[0, width] x [0, height]``. Polygon vertices must be
    listed counter-clockwise and describe a simple polygon.
    """

    kind: str
    width: float | None = None
    height: float | None = None
    vertices: tuple[tuple[float, float], ...] | None = None

    def __post_init__(self):
        if self.kind == "unit-disk":
            return
        if self.kind == "rectangle":
            if self.width is None or self.height is None:
                raise MeshError("rectangle needs width and height")
            if not (self.width > 0 and self.height > 0):
                raise MeshError("degenerate rectangle")
            return
        if self.kind == "polygon":
            v = self.vertices
            if v is None or len(v) < 3:
                raise MeshError("degenerate polygon: fewer than three vertices")
            arr = np.asarray(v, dtype=float)
            if arr.ndim != 2 or arr.shape[1] != 2 or not np.all(np.isfinite(arr)):
                raise MeshError("polygon vertices must be finite (x, y) pairs")
            if len({tuple(p) for p in arr.tolist()}) != len(arr):
                raise MeshError("degenerate polygon: repeated vertex")
            area = _shoelace(arr)
            scale = np.ptp(arr, axis=0).max() ** 2
            if abs(area) <= 1e-12 * scale:
                raise MeshError("degenerate polygon: zero area")
            if area < 0:
                raise MeshError("polygon vertices must be counter-clockwise")
            n = len(arr)
            for i in range(n):
                for j in range(i + 1, n):
                    if j == i + 1 or (i == 0 and j == n - 1):
                        continue
                    if _segments_cross(arr[i], arr[(i + 1) % n], arr[j], arr[(j + 1) % n]):
                        raise MeshError("polygon is self-intersecting")
            return
        raise MeshError(f"unknown domain kind {self.kind!r}")

    @classmethod
    def unit_disk(cls) -> "DomainSpec":
        return cls("unit-disk")

    @classmethod
    def rectangle(cls, width: float, height: float) -> "DomainSpec":
        return cls("rectangle", width=float(width), height=float(height))

    @classmethod
    def polygon(cls, vertices: Iterable[Iterable[float]]) -> "DomainSpec":
        return cls("polygon", vertices=tuple((float(x), float(y)) for x, y in vertices))

    @property
    def polygon_vertices(self) -> np.ndarray:
        if self.kind == "rectangle":
            w, h = self.width, self.height
            return np.array([[0.0, 0.0], [w, 0.0], [w, h], [0.0, h]])
        if self.kind == "polygon":
            return np.asarray(self.vertices, dtype=float)
        raise MeshError("the disk has no vertices")

    @property
    def area(self) -> float:
        if self.kind == "unit-disk":
            return math.pi
        return float(_shoelace(self.polygon_vertices))

    @property
    def diameter(self) -> float:
        if self.kind == "unit-disk":
            return 2.0
        v = self.polygon_vertices
        d = np.linalg.norm(v[:, None, :] - v[None, :, :], axis=-1)
        return float(d.max())

    def boundary_distance(self, points) -> np.ndarray:
        """Signed distance to the boundary, positive inside."""
        p = np.atleast_2d(np.asarray(points, dtype=float))
        if self.kind == "unit-disk":
            return 1.0 - np.hypot(p[:, 0], p[:, 1])
        v = self.polygon_vertices
        a, b = v, np.roll(v, -1, axis=0)
        ab = b - a
        ap = p[:, None, :] - a[None, :, :]
        t = np.clip((ap * ab).sum(-1) / (ab * ab).sum(-1), 0.0, 1.0)
        closest = a[None] + t[..., None] * ab[None]
        dist = np.linalg.norm(p[:, None, :] - closest, axis=-1).min(axis=1)
        return np.where(self._inside_polygon(p), dist, -dist)

    def _inside_polygon(self, p) -> np.ndarray:
        v = self.polygon_vertices
        x, y = p[:, 0][:, None], p[:, 1][:, None]
        x1, y1 = v[:, 0][None], v[:, 1][None]
        x2, y2 = np.roll(v[:, 0], -1)[None], np.roll(v[:, 1], -1)[None]
        cond = (y1 > y) != (y2 > y)
        with np.errstate(divide="ignore", invalid="ignore"):
            xint = x1 + (y - y1) * (x2 - x1) / (y2 - y1)
        crossings = (cond & (x < xint)).sum(axis=1)
        return crossings % 2 == 1

    def contains(self, points, margin: float = 0.0) -> np.ndarray:
        return self.boundary_distance(points) > margin


def _shoelace(v: np.ndarray) -> float:
    x, y = v[:, 0], v[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


# ---------------------------------------------------------------------------
# Quadrature rules on the reference triangle (barycentric points, weights
# summing to one)


def _rule_mid3():
    bary = np.array([[0.5, 0.5, 0.0], [0.0, 0.5, 0.5], [0.5, 0.0, 0.5]])
    return bary, np.full(3, 1.0 / 3.0)


def _rule_deg5():
    a1, b1 = 0.059715871789770, 0.470142064105115
    a2, b2 = 0.797426985353087, 0.101286507323456
    w0, w1, w2 = 0.225, 0.132394152788506, 0.125939180544827
    bary = [[1 / 3, 1 / 3, 1 / 3]]
    bary += [[a1, b1, b1], [b1, a1, b1], [b1, b1, a1]]
    bary += [[a2, b2, b2], [b2, a2, b2], [b2, b2, a2]]
    w = [w0] + [w1] * 3 + [w2] * 3
    return np.array(bary), np.array(w)


def _subdivide_rule(bary, w, levels):
    """Apply a rule on the ``4**levels`` congruent sub-triangles."""
    tris = [np.eye(3)]
    for _ in range(levels):
        nxt = []
        for t in tris:
            m01, m12, m20 = (t[0] + t[1]) / 2, (t[1] + t[2]) / 2, (t[2] + t[0]) / 2
            nxt += [
                np.array([t[0], m01, m20]),
                np.array([m01, t[1], m12]),
                np.array([m20, m12, t[2]]),
                np.array([m12, m20, m01]),
            ]
        tris = nxt
    pts = np.concatenate([bary @ t for t in tris])
    wts = np.concatenate([w / len(tris) for _ in tris])
    return pts, wts


def quadrature_rule(name: str):
    """Return ``(barycentric_points, weights)`` for a named rule.

    ``"mid3"`` is the edge-midpoint rule (exact for quadratics),
    ``"deg5"`` the seven-point rule exact for quintics and ``"deg5x<s>"``
    the seven-point rule on ``4**s`` sub-triangles.
    """
    if name == "mid3":
        return _rule_mid3()
    if name == "deg5":
        return _rule_deg5()
    if name.startswith("deg5x"):
        return _subdivide_rule(*_rule_deg5(), int(name[5:]))
    raise ValueError(f"unknown quadrature rule {name!r}")


# ---------------------------------------------------------------------------
# Mesh


class Mesh:
    """Immutable conforming triangulation with P1 dofs at the nodes."""

    def __init__(self, nodes, triangles, boundary=None, domain: DomainSpec | None = None):
        nodes = np.array(nodes, dtype=float)
        tris = np.array(triangles, dtype=np.int64)
        if nodes.ndim != 2 or nodes.shape[1] != 2:
            raise MeshError("nodes must have shape (n, 2)")
        if tris.ndim != 2 or tris.shape[1] != 3:
            raise MeshError("triangles must have shape (m, 3)")
        if tris.min() < 0 or tris.max() >= len(nodes):
            raise MeshError("triangle index out of range")
        if boundary is None:
            boundary = _boundary_nodes_from_topology(tris, len(nodes))
        boundary = np.array(boundary, dtype=bool)
        for arr in (nodes, tris, boundary):
            arr.setflags(write=False)
        self.nodes = nodes
        self.triangles = tris
        self.boundary = boundary
        self.domain = domain
        self._cache: dict = {}
        if np.any(self.signed_areas <= 0):
            raise MeshError("triangles must be non-degenerate and counter-clockwise")

    # basic geometry -------------------------------------------------------
    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    @cached_property
    def interior(self) -> np.ndarray:
        return np.flatnonzero(~self.boundary)

    @cached_property
    def boundary_indices(self) -> np.ndarray:
        return np.flatnonzero(self.boundary)

    @cached_property
    def signed_areas(self) -> np.ndarray:
        p = self.nodes[self.triangles]
        d1, d2 = p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    @property
    def areas(self) -> np.ndarray:
        return self.signed_areas

    @property
    def total_area(self) -> float:
        return float(self.areas.sum())

    @cached_property
    def centroids(self) -> np.ndarray:
        return self.nodes[self.triangles].mean(axis=1)

    @cached_property
    def edges(self) -> np.ndarray:
        """Unique undirected edges, sorted pairs."""
        return _edge_table(self.triangles, self.n_nodes)[0]

    @cached_property
    def edge_lengths(self) -> np.ndarray:
        e = self.edges
        return np.linalg.norm(self.nodes[e[:, 0]] - self.nodes[e[:, 1]], axis=1)

    @cached_property
    def triangle_diameters(self) -> np.ndarray:
        p = self.nodes[self.triangles]
        return np.max(
            np.stack(
                [
                    np.linalg.norm(p[:, 1] - p[:, 2], axis=1),
                    np.linalg.norm(p[:, 2] - p[:, 0], axis=1),
                    np.linalg.norm(p[:, 0] - p[:, 1], axis=1),
                ]
            ),
            axis=0,
        )

    @property
    def h_max(self) -> float:
        return float(self.edge_lengths.max())

    @property
    def h_min(self) -> float:
        return float(self.edge_lengths.min())

    def check_conforming(self) -> None:
        """Raise :class:`MeshError` unless every edge has one or two triangles
        and boundary flags match the topological boundary."""
        _, inv, counts = _edge_table(self.triangles, self.n_nodes)
        if counts.max() > 2:
            raise MeshError("edge shared by more than two triangles")
        topo = _boundary_nodes_from_topology(self.triangles, self.n_nodes)
        if not np.array_equal(topo, self.boundary):
            raise MeshError("boundary flags do not match topology")
        used = np.zeros(self.n_nodes, bool)
        used[self.triangles.ravel()] = True
        if not used.all():
            raise MeshError("mesh has unreferenced nodes")

    # cached helpers ----------------------------------------------------------
    def quadrature(self, rule: str = "mid3") -> "Quadrature":
        key = ("quad", rule)
        if key not in self._cache:
            self._cache[key] = Quadrature(self, rule)
        return self._cache[key]

    @cached_property
    def _centroid_tree(self) -> cKDTree:
        return cKDTree(self.centroids)

    def __repr__(self) -> str:
        return f"Mesh(n_nodes={self.n_nodes}, n_triangles={self.n_triangles}, h_max={self.h_max:.4g})"


def _edge_table(tris: np.ndarray, n: int):
    e = np.stack([tris[:, [1, 2]], tris[:, [2, 0]], tris[:, [0, 1]]], axis=1)
    es = np.sort(e, axis=2).reshape(-1, 2)
    keys = es[:, 0] * n + es[:, 1]
    ukeys, inv, counts = np.unique(keys, return_inverse=True, return_counts=True)
    edges = np.stack([ukeys // n, ukeys % n], axis=1)
    return edges, inv.reshape(-1, 3), counts


def _boundary_nodes_from_topology(tris: np.ndarray, n: int) -> np.ndarray:
    edges, _, counts = _edge_table(tris, n)
    flag = np.zeros(n, bool)
    flag[edges[counts == 1].ravel()] = True
    return flag


@dataclass
class ScalarField:
    """Nodal values of a continuous piecewise-linear function on a mesh."""

    mesh: Mesh
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.mesh.n_nodes,):
            raise ValueError("field length does not match mesh")

    @property
    def zero_trace(self) -> bool:
        return bool(np.all(self.values[self.mesh.boundary] == 0.0))

    def at(self, points) -> np.ndarray:
        return interpolate(self, points)

    def __add__(self, other):
        other = other.values if isinstance(other, ScalarField) else other
        return ScalarField(self.mesh, self.values + other)

    def __sub__(self, other):
        other = other.values if isinstance(other, ScalarField) else other
        return ScalarField(self.mesh, self.values - other)

    def __mul__(self, c):
        return ScalarField(self.mesh, self.values * c)

    __rmul__ = __mul__

    def __neg__(self):
        return ScalarField(self.mesh, -self.values)


def _values(mesh: Mesh, field) -> np.ndarray:
    if isinstance(field, ScalarField):
        if field.mesh is not mesh:
            raise ValueError("field lives on a different mesh")
        return field.values
    v = np.asarray(field, dtype=float)
    if v.shape != (mesh.n_nodes,):
        raise ValueError("field length does not match mesh")
    return v


# ---------------------------------------------------------------------------
# Mesh generators


def _disk_mesh(n_rings: int) -> tuple[np.ndarray, np.ndarray]:
    """Concentric-ring triangulation: ring ``j`` has ``6j`` nodes at radius
    ``j/n``; outermost nodes lie exactly on the unit circle."""
    nodes = [np.zeros((1, 2))]
    start = [0]
    count = 1
    for j in range(1, n_rings + 1):
        m = 6 * j
        ang = 2 * np.pi * np.arange(m) / m
        r = 1.0 if j == n_rings else j / n_rings
        nodes.append(np.stack([r * np.cos(ang), r * np.sin(ang)], axis=1))
        start.append(count)
        count += m
    tris = []
    for k in range(6):
        tris.append((0, 1 + k, 1 + (k + 1) % 6))
    for j in range(2, n_rings + 1):
        ni, no = 6 * (j - 1), 6 * j
        si, so = start[j - 1], start[j]
        i = k = 0
        while i < ni or k < no:
            # advance whichever ring has the smaller next angle; ties go outer
            next_outer = (k + 1) / no
            next_inner = (i + 1) / ni
            I, O = si + i % ni, so + k % no
            if k < no and (i >= ni or next_outer <= next_inner + 1e-14):
                tris.append((I, O, so + (k + 1) % no))
                k += 1
            else:
                tris.append((I, O, si + (i + 1) % ni))
                i += 1
    return np.concatenate(nodes), np.array(tris, dtype=np.int64)


def _rectangle_mesh(w: float, h: float, step: float):
    nx, ny = max(1, math.ceil(w / step)), max(1, math.ceil(h / step))
    xs, ys = np.linspace(0.0, w, nx + 1), np.linspace(0.0, h, ny + 1)
    X, Y = np.meshgrid(xs, ys, indexing="xy")
    nodes = np.stack([X.ravel(), Y.ravel()], axis=1)
    idx = np.arange((nx + 1) * (ny + 1)).reshape(ny + 1, nx + 1)
    a, b = idx[:-1, :-1].ravel(), idx[:-1, 1:].ravel()
    c, d = idx[1:, 1:].ravel(), idx[1:, :-1].ravel()
    # diagonal a-c is the refinement edge of both halves
    t1 = np.stack([b, c, a], axis=1)
    t2 = np.stack([d, a, c], axis=1)
    return nodes, np.concatenate([t1, t2])


def _ear_clip(v: np.ndarray) -> np.ndarray:
    """Triangulate a simple counter-clockwise polygon, greedily clipping the
    ear with the largest minimum angle."""
    idx = list(range(len(v)))
    tris = []

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    def min_angle(p, q, r):
        out = []
        for a, b, c in ((p, q, r), (q, r, p), (r, p, q)):
            u, w = b - a, c - a
            cosang = np.dot(u, w) / (np.linalg.norm(u) * np.linalg.norm(w))
            out.append(math.acos(max(-1.0, min(1.0, cosang))))
        return min(out)

    while len(idx) > 3:
        best, best_q = None, -1.0
        n = len(idx)
        for k in range(n):
            i0, i1, i2 = idx[k - 1], idx[k], idx[(k + 1) % n]
            p, q, r = v[i0], v[i1], v[i2]
            if cross(p, q, r) <= 1e-14:
                continue
            ok = True
            for j in idx:
                if j in (i0, i1, i2):
                    continue
                s = v[j]
                if cross(p, q, s) >= 0 and cross(q, r, s) >= 0 and cross(r, p, s) >= 0:
                    ok = False
                    break
            if ok:
                qual = min_angle(p, q, r)
                if qual > best_q:
                    best, best_q = k, qual
        if best is None:
            raise MeshError("ear clipping failed; polygon may be degenerate")
        n = len(idx)
        tris.append((idx[best - 1], idx[best], idx[(best + 1) % n]))
        idx.pop(best)
    tris.append(tuple(idx))
    return np.array(tris, dtype=np.int64)


def _label_longest_edge(nodes: np.ndarray, tris: np.ndarray) -> np.ndarray:
    """Rotate each triangle so that its longest edge is the refinement edge."""
    p = nodes[tris]
    lens = np.stack(
        [
            np.linalg.norm(p[:, 1] - p[:, 2], axis=1),
            np.linalg.norm(p[:, 2] - p[:, 0], axis=1),
            np.linalg.norm(p[:, 0] - p[:, 1], axis=1),
        ],
        axis=1,
    )
    k = np.argmax(lens - 1e-12 * np.arange(3), axis=1)
    rows = np.arange(len(tris))[:, None]
    order = (k[:, None] + np.arange(3)[None, :]) % 3
    return tris[rows, order]


def _snapper(domain: DomainSpec | None):
    if domain is not None and domain.kind == "unit-disk":
        return lambda pts: pts / np.linalg.norm(pts, axis=1, keepdims=True)
    return None


def build_mesh(
    domain: DomainSpec,
    h_target: float,
    size: Callable[[np.ndarray], np.ndarray] | None = None,
    max_rounds: int = 80,
) -> Mesh:
    """Triangulate ``domain`` with maximal edge length at most ``2 * h_target``.

    ``size`` optionally maps points ``(n, 2)`` to a local target edge length;
    triangles are bisected until their longest edge is below it.
    """
    if not (h_target > 0):
        raise ValueError("h_target must be positive")
    if h_target >= domain.diameter / 4:
        raise ValueError("h_target must be smaller than a quarter of the domain diameter")
    if domain.kind == "unit-disk":
        nodes, tris = _disk_mesh(max(2, math.ceil(1.0 / h_target)))
    elif domain.kind == "rectangle":
        nodes, tris = _rectangle_mesh(domain.width, domain.height, h_target)
    else:
        v = domain.polygon_vertices
        nodes, tris = v.copy(), _ear_clip(v)
    tris = _label_longest_edge(nodes, tris)
    mesh = Mesh(nodes, tris, domain=domain)
    if domain.kind == "polygon":
        mesh = refine_to_size(mesh, lambda p: np.full(len(p), h_target), max_rounds)
    if size is not None:
        mesh = refine_to_size(mesh, size, max_rounds)
    return mesh


# ---------------------------------------------------------------------------
# Newest-vertex bisection


def refine(mesh: Mesh, marked) -> Mesh:
    """Bisect the marked triangles (bool mask or indices) plus the closure
    needed for conformity. Boundary midpoints are snapped onto curved
    boundaries."""
    tris = mesh.triangles
    n = mesh.n_nodes
    mask = np.zeros(len(tris), bool)
    mask[np.asarray(marked)] = True
    if not mask.any():
        return mesh
    edges, tedge, counts = _edge_table(tris, n)
    keys = edges[:, 0] * n + edges[:, 1]
    medge = np.zeros(len(edges), bool)
    medge[tedge[mask, 0]] = True
    while True:
        need = medge[tedge].any(axis=1) & ~medge[tedge[:, 0]]
        if not need.any():
            break
        medge[tedge[need, 0]] = True

    eid = np.flatnonzero(medge)
    mid = 0.5 * (mesh.nodes[edges[eid, 0]] + mesh.nodes[edges[eid, 1]])
    on_bnd = counts[eid] == 1
    snap = _snapper(mesh.domain)
    if snap is not None and on_bnd.any():
        mid[on_bnd] = snap(mid[on_bnd])
    mid_index = np.full(len(edges), -1, dtype=np.int64)
    mid_index[eid] = n + np.arange(len(eid))
    nodes = np.concatenate([mesh.nodes, mid])
    boundary = np.concatenate([mesh.boundary, on_bnd])

    done = []
    work = tris
    while len(work):
        a, b = np.minimum(work[:, 1], work[:, 2]), np.maximum(work[:, 1], work[:, 2])
        k = a * n + b
        pos = np.searchsorted(keys, k)
        pos_c = np.minimum(pos, len(keys) - 1)
        split = (pos < len(keys)) & (keys[pos_c] == k) & (a < n) & (b < n)
        split[split] = medge[pos_c[split]]
        done.append(work[~split])
        w = work[split]
        m = mid_index[pos_c[split]]
        c1 = np.stack([m, w[:, 0], w[:, 1]], axis=1)
        c2 = np.stack([m, w[:, 2], w[:, 0]], axis=1)
        work = np.concatenate([c1, c2])
    return Mesh(nodes, np.concatenate(done), boundary, domain=mesh.domain)


def uniform_refine(mesh: Mesh, times: int = 1) -> Mesh:
    """Bisect every triangle twice per pass, halving the mesh size."""
    for _ in range(2 * times):
        mesh = refine(mesh, np.ones(mesh.n_triangles, bool))
    return mesh


def refine_to_size(mesh: Mesh, size: Callable[[np.ndarray], np.ndarray], max_rounds: int = 80) -> Mesh:
    """Bisect until every triangle's longest edge is at most the local target
    size (the minimum of ``size`` over its vertices and centroid)."""
    for _ in range(max_rounds):
        p = mesh.nodes[mesh.triangles]
        pts = np.concatenate([p[:, 0], p[:, 1], p[:, 2], p.mean(axis=1)])
        target = np.asarray(size(pts), dtype=float).reshape(4, -1).min(axis=0)
        marked = mesh.triangle_diameters > target
        if not marked.any():
            return mesh
        mesh = refine(mesh, marked)
    raise MeshError("local refinement did not reach the requested size")


def bubble_size_function(centers, radii, h_background: float, grading: float = 0.25):
    """Target size ``min(h_bg, grading * (r_i + |x - c_i|))``: cells of size
    about ``grading * r_i`` at each centre, growing linearly away from it."""
    c = np.atleast_2d(np.asarray(centers, dtype=float))
    r = np.atleast_1d(np.asarray(radii, dtype=float))

    def size(pts):
        d = np.linalg.norm(pts[:, None, :] - c[None, :, :], axis=-1)
        return np.minimum(h_background, (grading * (r[None, :] + d)).min(axis=1))

    return size


# ---------------------------------------------------------------------------
# Point location


@dataclass(frozen=True)
class PointLocation:
    triangle: int
    barycentric: np.ndarray


def _barycentric(mesh: Mesh, tri_idx: np.ndarray, pts: np.ndarray) -> np.ndarray:
    p = mesh.nodes[mesh.triangles[tri_idx]]
    v0, v1, v2 = p[..., 0, :], p[..., 1, :], p[..., 2, :]
    det = (v1[..., 0] - v0[..., 0]) * (v2[..., 1] - v0[..., 1]) - (v1[..., 1] - v0[..., 1]) * (
        v2[..., 0] - v0[..., 0]
    )
    dx, dy = pts[..., 0] - v0[..., 0], pts[..., 1] - v0[..., 1]
    l1 = (dx * (v2[..., 1] - v0[..., 1]) - dy * (v2[..., 0] - v0[..., 0])) / det
    l2 = ((v1[..., 0] - v0[..., 0]) * dy - (v1[..., 1] - v0[..., 1]) * dx) / det
    return np.stack([1.0 - l1 - l2, l1, l2], axis=-1)


def locate_many(mesh: Mesh, points, strict: bool = True, tol: float = 1e-10):
    """Locate points; returns ``(triangle_indices, barycentric (n, 3))``.

    When several triangles contain a point the lowest index wins. With
    ``strict=False`` points slightly outside the mesh are attached to the
    best candidate triangle with clamped coordinates.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    npts = len(pts)
    out_t = np.full(npts, -1, dtype=np.int64)
    out_b = np.zeros((npts, 3))
    k = min(24, mesh.n_triangles)
    _, cand = mesh._centroid_tree.query(pts, k=k)
    cand = np.asarray(cand).reshape(npts, k)
    bary = _barycentric(mesh, cand, pts[:, None, :])
    inside = bary.min(axis=-1) >= -tol
    cand_masked = np.where(inside, cand, np.iinfo(np.int64).max)
    best = cand_masked.argmin(axis=1)
    found = inside.any(axis=1)
    rows = np.flatnonzero(found)
    out_t[rows] = cand[rows, best[rows]]
    out_b[rows] = bary[rows, best[rows]]
    missing = np.flatnonzero(~found)
    if len(missing):
        all_t = np.arange(mesh.n_triangles)
        for i in missing:
            b = _barycentric(mesh, all_t, pts[i][None, :])
            score = b.min(axis=1)
            hits = np.flatnonzero(score >= -tol)
            if len(hits):
                t = hits[0]
            elif strict:
                raise OutsideDomainError(f"point {pts[i].tolist()} lies outside the mesh")
            else:
                t = int(np.argmax(score))
            out_t[i] = t
            out_b[i] = b[t]
    if not strict:
        out_b = np.clip(out_b, 0.0, None)
        out_b /= out_b.sum(axis=1, keepdims=True)
    return out_t, out_b


def locate(mesh: Mesh, point) -> PointLocation:
    t, b = locate_many(mesh, np.asarray(point, dtype=float)[None, :])
    return PointLocation(int(t[0]), b[0])


def interpolation_matrix(mesh: Mesh, points, strict: bool = True) -> sparse.csr_matrix:
    """Sparse matrix mapping nodal values to values at ``points``."""
    t, b = locate_many(mesh, points, strict=strict)
    rows = np.repeat(np.arange(len(t)), 3)
    cols = mesh.triangles[t].ravel()
    return sparse.csr_matrix((b.ravel(), (rows, cols)), shape=(len(t), mesh.n_nodes))


def interpolate(field, points, strict: bool = True) -> np.ndarray:
    mesh = field.mesh
    t, b = locate_many(mesh, points, strict=strict)
    return (field.values[mesh.triangles[t]] * b).sum(axis=1)


# ---------------------------------------------------------------------------
# Quadrature on a mesh


class Quadrature:
    """Quadrature points of a mesh with the P1 evaluation matrix ``B``."""

    def __init__(self, mesh: Mesh, rule: str = "mid3"):
        bary, w = quadrature_rule(rule)
        nq = len(w)
        tri = mesh.triangles
        p = mesh.nodes[tri]
        self.rule = rule
        self.points = np.einsum("qk,tkd->tqd", bary, p).reshape(-1, 2)
        self.weights = (mesh.areas[:, None] * w[None, :]).ravel()
        self.triangle = np.repeat(np.arange(mesh.n_triangles), nq)
        rows = np.repeat(np.arange(len(self.weights)), 3)
        cols = np.repeat(tri, nq, axis=0).ravel()
        vals = np.tile(bary, (mesh.n_triangles, 1)).ravel()
        self.B = sparse.csr_matrix((vals, (rows, cols)), shape=(len(self.weights), mesh.n_nodes))
        self.mesh = mesh

    def __len__(self) -> int:
        return len(self.weights)

    def integrate(self, values_q) -> float:
        return float(np.dot(self.weights, values_q))

    def load(self, values_q) -> np.ndarray:
        """Weak load vector ``(∫ f φ_j)_j`` from values at quadrature points."""
        return self.B.T @ (self.weights * values_q)


def integrate(mesh: Mesh, field) -> float:
    """Exact integral of a P1 field."""
    v = _values(mesh, field)
    return float(np.dot(mesh.areas, v[mesh.triangles].mean(axis=1)))


# ---------------------------------------------------------------------------
# Text I/O


def _fmt(x: float) -> str:
    return "%.17g" % x


def write_mesh(mesh: Mesh, path) -> None:
    Path(path).write_text(_mesh_text(mesh))


def _mesh_text(mesh: Mesh) -> str:
    lines = [f"nodes {mesh.n_nodes}"]
    lines += [f"{_fmt(x)} {_fmt(y)} {int(b)}" for (x, y), b in zip(mesh.nodes.tolist(), mesh.boundary)]
    lines.append(f"triangles {mesh.n_triangles}")
    lines += [f"{i} {j} {k}" for i, j, k in mesh.triangles.tolist()]
    return "\n".join(lines) + "\n"


def _parse_mesh(lines: list[str], domain=None) -> tuple[Mesh, int]:
    head = lines[0].split()
    if head[0] != "nodes":
        raise MeshError("mesh file must start with 'nodes N'")
    n = int(head[1])
    rows = [ln.split() for ln in lines[1 : 1 + n]]
    nodes = np.array([[float(r[0]), float(r[1])] for r in rows])
    bnd = np.array([r[2] == "1" for r in rows])
    head = lines[1 + n].split()
    if head[0] != "triangles":
        raise MeshError("expected 'triangles M'")
    m = int(head[1])
    tris = np.array([[int(t) for t in ln.split()] for ln in lines[2 + n : 2 + n + m]], dtype=np.int64)
    return Mesh(nodes, tris, bnd, domain=domain), 2 + n + m


def read_mesh(path, domain: DomainSpec | None = None) -> Mesh:
    lines = Path(path).read_text().splitlines()
    return _parse_mesh(lines, domain)[0]


def write_field(field: ScalarField, path) -> None:
    """Mesh block, then ``field N`` and one value per node."""
    text = _mesh_text(field.mesh) + f"field {field.mesh.n_nodes}\n"
    text += "\n".join(_fmt(v) for v in field.values.tolist()) + "\n"
    Path(path).write_text(text)


def read_field(path, domain: DomainSpec | None = None) -> ScalarField:
    lines = Path(path).read_text().splitlines()
    mesh, pos = _parse_mesh(lines, domain)
    head = lines[pos].split()
    if head[0] != "field":
        raise MeshError("expected 'field N'")
    vals = np.array([float(v) for v in lines[pos + 1 : pos + 1 + int(head[1])]])
    return ScalarField(mesh, vals)

"""Spatial triangulations of polygonal domains and uniform time partitions.

The spatial mesh is shared by every space-time slab; a slab is represented
implicitly by the pair ``(SpatialMesh, (t_n, t_{n+1}))``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

DIRICHLET = "dirichlet"
NEUMANN = "neumann"
SIDES = ("left", "right", "bottom", "top")


class MeshError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class SpatialMesh:
    """Conforming triangulation with a facet table.

    Facets are stored once.  ``facet_elements[f] = (owner, neighbor)`` with
    ``neighbor == -1`` on the boundary, and ``facet_normals[f]`` is the unit
    outward normal of the owner.  ``element_facets[K, e]`` is the facet
    opposite local vertex ``e`` and ``element_signs[K, e]`` is ``+1`` when K
    owns it, ``-1`` otherwise.
    """

    vertices: np.ndarray
    triangles: np.ndarray
    facets: np.ndarray
    facet_elements: np.ndarray
    facet_normals: np.ndarray
    facet_lengths: np.ndarray
    element_facets: np.ndarray
    element_signs: np.ndarray
    element_diameters: np.ndarray
    boundary_sides: tuple
    boundary_tags: tuple
    quasi_uniformity_bound: float = 4.0
    areas: np.ndarray = field(init=False)

    def __post_init__(self):
        p = self.vertices[self.triangles]
        area = 0.5 * ((p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1])
                      - (p[:, 2, 0] - p[:, 0, 0]) * (p[:, 1, 1] - p[:, 0, 1]))
        if np.any(area <= 0.0):
            raise MeshError("triangles must have positive signed area")
        object.__setattr__(self, "areas", area)
        if self.quasi_uniformity_ratio > self.quasi_uniformity_bound:
            raise MeshError(
                f"quasi-uniformity ratio {self.quasi_uniformity_ratio:.3g} "
                f"exceeds bound {self.quasi_uniformity_bound}")

    @property
    def n_elements(self) -> int:
        return len(self.triangles)

    @property
    def n_facets(self) -> int:
        return len(self.facets)

    @property
    def h(self) -> float:
        return float(self.element_diameters.max())

    @property
    def quasi_uniformity_ratio(self) -> float:
        return float(self.element_diameters.max() / self.element_diameters.min())

    @property
    def interior_facets(self) -> np.ndarray:
        return np.flatnonzero(self.facet_elements[:, 1] >= 0)

    @property
    def boundary_facets(self) -> np.ndarray:
        return np.flatnonzero(self.facet_elements[:, 1] < 0)

    def facets_with_tag(self, tag: str) -> np.ndarray:
        return np.array([f for f, t in enumerate(self.boundary_tags) if t == tag],
                        dtype=int)

    @property
    def dirichlet_mask(self) -> np.ndarray:
        return np.array([t == DIRICHLET for t in self.boundary_tags])

    @property
    def neumann_mask(self) -> np.ndarray:
        return np.array([t == NEUMANN for t in self.boundary_tags])

    @property
    def pure_dirichlet(self) -> bool:
        return not self.neumann_mask.any()

    def with_boundary_conditions(self, bc: Mapping[str, str]) -> "SpatialMesh":
        """Return a copy whose boundary facets are tagged from a side -> kind map."""
        unknown = set(bc) - {s for s in self.boundary_sides if s is not None}
        if unknown:
            raise MeshError(f"unknown boundary side(s) {sorted(unknown)}")
        tags = []
        for side in self.boundary_sides:
            if side is None:
                tags.append(None)
            else:
                kind = bc.get(side, DIRICHLET)
                if kind not in (DIRICHLET, NEUMANN):
                    raise MeshError(f"unknown boundary kind {kind!r} for side {side!r}")
                tags.append(kind)
        return SpatialMesh(self.vertices, self.triangles, self.facets,
                           self.facet_elements, self.facet_normals,
                           self.facet_lengths, self.element_facets,
                           self.element_signs, self.element_diameters,
                           self.boundary_sides, tuple(tags),
                           self.quasi_uniformity_bound)

    @classmethod
    def from_triangles(cls, vertices, triangles, side_of=None,
                       quasi_uniformity_bound: float = 4.0) -> "SpatialMesh":
        """Build the facet table of an arbitrary conforming triangulation.

        ``side_of(midpoint)`` names the boundary side of a boundary facet;
        without it every boundary facet is labelled ``"boundary"``.
        """
        vertices = np.asarray(vertices, dtype=float)
        triangles = np.asarray(triangles, dtype=int)
        ne = len(triangles)
        element_facets = np.empty((ne, 3), dtype=int)
        element_signs = np.empty((ne, 3), dtype=int)
        lookup: dict = {}
        facets, owners, neighbors = [], [], []
        for K, tri in enumerate(triangles):
            for e in range(3):
                a, b = int(tri[(e + 1) % 3]), int(tri[(e + 2) % 3])
                key = (min(a, b), max(a, b))
                f = lookup.get(key)
                if f is None:
                    f = len(facets)
                    lookup[key] = f
                    facets.append((a, b))
                    owners.append(K)
                    neighbors.append(-1)
                    element_signs[K, e] = 1
                else:
                    if neighbors[f] != -1:
                        raise MeshError(f"facet {key} shared by more than two triangles")
                    neighbors[f] = K
                    element_signs[K, e] = -1
                element_facets[K, e] = f
        facets = np.array(facets, dtype=int)
        d = vertices[facets[:, 1]] - vertices[facets[:, 0]]
        lengths = np.hypot(d[:, 0], d[:, 1])
        # owner traverses the edge counter-clockwise, so the outward normal
        # is the tangent rotated clockwise
        normals = np.column_stack([d[:, 1], -d[:, 0]]) / lengths[:, None]
        p = vertices[triangles]
        edges = np.stack([p[:, 1] - p[:, 2], p[:, 2] - p[:, 0], p[:, 0] - p[:, 1]], axis=1)
        diam = np.linalg.norm(edges, axis=2).max(axis=1)
        sides = []
        for f in range(len(facets)):
            if neighbors[f] >= 0:
                sides.append(None)
            else:
                mid = 0.5 * (vertices[facets[f, 0]] + vertices[facets[f, 1]])
                sides.append(side_of(mid) if side_of else "boundary")
        tags = tuple(None if s is None else DIRICHLET for s in sides)
        return cls(vertices, triangles, facets,
                   np.column_stack([owners, neighbors]), normals, lengths,
                   element_facets, element_signs, diam, tuple(sides), tags,
                   quasi_uniformity_bound)

    def dump(self, path) -> None:
        """Write vertices, triangles and tagged facets as whitespace-separated text."""
        with open(path, "w") as fh:
            fh.write(f"vertices {len(self.vertices)}\n")
            for x, y in self.vertices:
                fh.write(f"{x:.17g} {y:.17g}\n")
            fh.write(f"triangles {self.n_elements}\n")
            for a, b, c in self.triangles:
                fh.write(f"{a} {b} {c}\n")
            fh.write(f"facets {self.n_facets}\n")
            for f, (a, b) in enumerate(self.facets):
                owner, nb = self.facet_elements[f]
                tag = self.boundary_tags[f] or "interior"
                fh.write(f"{a} {b} {owner} {nb} {tag}\n")


@dataclass(frozen=True)
class TimePartition:
    t_levels: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.t_levels, dtype=float)
        if t.ndim != 1 or len(t) < 2:
            raise ValueError("a time partition needs at least one slab")
        if np.any(np.diff(t) <= 0.0):
            raise ValueError("time levels must be strictly increasing")
        object.__setattr__(self, "t_levels", t)

    @property
    def n_slabs(self) -> int:
        return len(self.t_levels) - 1

    @property
    def dt(self) -> np.ndarray:
        return np.diff(self.t_levels)

    @property
    def final_time(self) -> float:
        return float(self.t_levels[-1])

    def slab(self, n: int) -> tuple[float, float]:
        return float(self.t_levels[n]), float(self.t_levels[n + 1])


def build_structured_mesh(nx: int, ny: int,
                          domain: Sequence[float] = (0.0, 1.0, 0.0, 1.0),
                          bc: Mapping[str, str] | None = None) -> SpatialMesh:
    """Split an ``nx`` x ``ny`` grid of a rectangle into ``2 nx ny`` triangles.

    Every cell is cut along its lower-left to upper-right diagonal.
    ``domain`` is ``(x0, x1, y0, y1)``; ``bc`` maps side names
    (``left``, ``right``, ``bottom``, ``top``) to ``"dirichlet"`` or
    ``"neumann"`` (default Dirichlet everywhere).
    """
    if nx < 1 or ny < 1:
        raise MeshError("nx and ny must be at least 1")
    x0, x1, y0, y1 = map(float, domain)
    if not (x1 > x0 and y1 > y0):
        raise MeshError("degenerate rectangle")
    xs = np.linspace(x0, x1, nx + 1)
    ys = np.linspace(y0, y1, ny + 1)
    X, Y = np.meshgrid(xs, ys)
    vertices = np.column_stack([X.ravel(), Y.ravel()])
    tris = []
    for j in range(ny):
        for i in range(nx):
            v00 = j * (nx + 1) + i
            v10, v01, v11 = v00 + 1, v00 + nx + 1, v00 + nx + 2
            tris.append((v00, v10, v11))
            tris.append((v00, v11, v01))
    tol = 1e-12 * max(x1 - x0, y1 - y0)

    def side_of(m):
        if abs(m[0] - x0) < tol:
            return "left"
        if abs(m[0] - x1) < tol:
            return "right"
        if abs(m[1] - y0) < tol:
            return "bottom"
        return "top"

    mesh = SpatialMesh.from_triangles(vertices, tris, side_of)
    return mesh.with_boundary_conditions(bc or {})


def facet_trace_map(mesh: SpatialMesh, K: int) -> list[tuple[int, int, int]]:
    """``(facet, local_edge, sign)`` for the three edges of element ``K``."""
    if not 0 <= K < mesh.n_elements:
        raise IndexError(f"element {K} out of range")
    return [(int(mesh.element_facets[K, e]), e, int(mesh.element_signs[K, e]))
            for e in range(3)]


def uniform_time_partition(T: float, N: int) -> TimePartition:
    if T <= 0 or N < 1:
        raise ValueError("need T > 0 and N >= 1")
    return TimePartition(np.linspace(0.0, T, N + 1))

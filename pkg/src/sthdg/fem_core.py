"""Reference-element bases, quadrature rules and affine element maps.

Reference entities: the triangle with vertices (0,0), (1,0), (0,1); the unit
segment [0, 1] (facets); the unit interval [0, 1] (time).  All bases are
orthonormal with respect to the reference L2 inner product.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from math import comb

import numpy as np
from numpy.polynomial import legendre
from scipy.special import roots_jacobi

KINDS = ("triangle", "segment", "interval")
MAX_QUADRATURE_DEGREE = 60


@dataclass(frozen=True)
class QuadratureRule:
    kind: str
    points: np.ndarray
    weights: np.ndarray
    degree: int

    def __len__(self):
        return len(self.weights)


@lru_cache(maxsize=None)
def make_quadrature(kind: str, degree: int) -> QuadratureRule:
    """Gauss rule exact for polynomials of total degree ``degree``.

    The triangle rule is the collapsed (Duffy) product of Gauss-Legendre and
    Gauss-Jacobi(1, 0) rules, so all weights are positive.
    """
    if kind not in KINDS:
        raise ValueError(f"unknown entity kind {kind!r}")
    if degree < 1:
        raise ValueError("quadrature exactness must be at least 1")
    if degree > MAX_QUADRATURE_DEGREE:
        raise ValueError(f"quadrature degree {degree} exceeds the supported "
                         f"maximum {MAX_QUADRATURE_DEGREE}")
    n = degree // 2 + 1
    x, w = legendre.leggauss(n)
    s, ws = 0.5 * (x + 1.0), 0.5 * w
    if kind != "triangle":
        return QuadratureRule(kind, s[:, None], ws, degree)
    xj, wj = roots_jacobi(n, 1.0, 0.0)
    v, wv = 0.5 * (xj + 1.0), 0.25 * wj
    U, V = np.meshgrid(s, v, indexing="ij")
    pts = np.column_stack([(U * (1.0 - V)).ravel(), V.ravel()])
    wts = np.outer(ws, wv).ravel()
    return QuadratureRule(kind, pts, wts, degree)


def _monomial_exponents(k: int) -> list[tuple[int, int]]:
    return [(i, d - i) for d in range(k + 1) for i in range(d, -1, -1)]


class ReferenceBasis:
    """Orthonormal polynomial basis of degree ``degree`` on a reference entity.

    Degree 0 is allowed here because the element pressure space uses
    degree ``k - 1``; use :func:`make_basis` for the validated public factory.
    """

    def __init__(self, kind: str, degree: int):
        if kind not in KINDS:
            raise ValueError(f"unknown entity kind {kind!r}")
        if degree < 0:
            raise ValueError("degree must be non-negative")
        self.kind = kind
        self.degree = degree
        if kind == "triangle":
            self._exps = _monomial_exponents(degree)
            q = make_quadrature("triangle", max(2 * degree, 1))
            m = self._monomials(q.points)
            gram = (m * q.weights) @ m.T
            chol = np.linalg.cholesky(gram)
            # phi = C m with C = L^{-1}, so C G C^T = I
            self._coef = np.linalg.solve(chol, np.eye(len(gram)))
        self.dim = (degree + 1) * (degree + 2) // 2 if kind == "triangle" else degree + 1
        self.condition_number = float(np.linalg.cond(self.eval(self.unisolvent_nodes()).T))

    def unisolvent_nodes(self) -> np.ndarray:
        k = max(self.degree, 1)
        if self.kind == "triangle":
            if self.degree == 0:
                return np.array([[1.0 / 3.0, 1.0 / 3.0]])
            return np.array([[i / k, j / k] for j in range(k + 1)
                             for i in range(k + 1 - j)])
        if self.degree == 0:
            return np.array([[0.5]])
        return np.linspace(0.0, 1.0, self.degree + 1)[:, None]

    def _monomials(self, pts, dx=0, dy=0):
        x = pts[:, 0] - 1.0 / 3.0
        y = pts[:, 1] - 1.0 / 3.0
        out = np.zeros((len(self._exps), len(pts)))
        for r, (i, j) in enumerate(self._exps):
            if i < dx or j < dy:
                continue
            c = (np.prod(range(i - dx + 1, i + 1)) if dx else 1) * \
                (np.prod(range(j - dy + 1, j + 1)) if dy else 1)
            out[r] = c * x ** (i - dx) * y ** (j - dy)
        return out

    def eval(self, pts) -> np.ndarray:
        """Basis values, shape ``(dim, npts)``."""
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        if self.kind == "triangle":
            return self._coef @ self._monomials(pts)
        s = 2.0 * pts[:, 0] - 1.0
        out = np.empty((self.degree + 1, len(s)))
        for i in range(self.degree + 1):
            c = np.zeros(i + 1)
            c[i] = 1.0
            out[i] = np.sqrt(2 * i + 1) * legendre.legval(s, c)
        return out

    def grad(self, pts) -> np.ndarray:
        """Reference gradients, shape ``(dim, npts, tdim)``."""
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        if self.kind == "triangle":
            gx = self._coef @ self._monomials(pts, dx=1)
            gy = self._coef @ self._monomials(pts, dy=1)
            return np.stack([gx, gy], axis=-1)
        s = 2.0 * pts[:, 0] - 1.0
        out = np.empty((self.degree + 1, len(s), 1))
        for i in range(self.degree + 1):
            c = np.zeros(i + 1)
            c[i] = 1.0
            out[i, :, 0] = 2.0 * np.sqrt(2 * i + 1) * legendre.legval(s, legendre.legder(c))
        return out


@lru_cache(maxsize=None)
def make_basis(kind: str, k: int) -> ReferenceBasis:
    if k < 1:
        raise ValueError(
            f"polynomial degree k={k} is not supported: the scheme uses P_(k-1) "
            "element pressures and equal velocity degrees in space and time, "
            "which requires k >= 1")
    return ReferenceBasis(kind, k)


@lru_cache(maxsize=None)
def pressure_basis(k: int) -> ReferenceBasis:
    """Element pressure basis of degree ``k - 1``."""
    return ReferenceBasis("triangle", k - 1)


def triangle_monomial_integral(i: int, j: int) -> float:
    """Exact integral of x^i y^j over the reference triangle."""
    from math import factorial
    return factorial(i) * factorial(j) / factorial(i + j + 2)


@dataclass(frozen=True)
class AffineMap:
    origin: np.ndarray
    jacobian: np.ndarray

    @property
    def det(self) -> float:
        return float(np.linalg.det(self.jacobian))

    @property
    def inverse_transpose(self) -> np.ndarray:
        return np.linalg.inv(self.jacobian).T

    def __call__(self, ref_pts) -> np.ndarray:
        return self.origin + np.atleast_2d(ref_pts) @ self.jacobian.T

    def inverse(self, pts) -> np.ndarray:
        return np.linalg.solve(self.jacobian, (np.atleast_2d(pts) - self.origin).T).T

    def push_gradients(self, ref_grads) -> np.ndarray:
        """Map reference gradients (..., 2) to physical ones with J^{-T}."""
        return ref_grads @ self.inverse_transpose.T


def physical_map(mesh, K: int) -> AffineMap:
    p = mesh.vertices[mesh.triangles[K]]
    J = np.column_stack([p[1] - p[0], p[2] - p[0]])
    if abs(np.linalg.det(J)) <= 1e-14 * max(np.abs(J).max(), 1e-300) ** 2:
        raise ValueError(f"element {K} is degenerate")
    return AffineMap(p[0].copy(), J)


def element_jacobians(mesh):
    """Batched affine data: origins (nE,2), J (nE,2,2), det (nE,), J^{-T} (nE,2,2)."""
    p = mesh.vertices[mesh.triangles]
    J = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]], axis=2)
    det = J[:, 0, 0] * J[:, 1, 1] - J[:, 0, 1] * J[:, 1, 0]
    if np.any(np.abs(det) <= 0.0):
        raise ValueError("degenerate element in mesh")
    invT = np.empty_like(J)
    invT[:, 0, 0] = J[:, 1, 1] / det
    invT[:, 0, 1] = -J[:, 1, 0] / det
    invT[:, 1, 0] = -J[:, 0, 1] / det
    invT[:, 1, 1] = J[:, 0, 0] / det
    return p[:, 0].copy(), J, det, invT


def n_triangle_dofs(k: int) -> int:
    return comb(k + 2, 2)

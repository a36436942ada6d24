"""Degree-of-freedom layout of the slab spaces and evaluation of discrete fields.

Coefficient conventions (all bases reference-orthonormal):

* element velocity ``u[K, i, c, a]``: time mode ``i`` (Legendre on the slab
  mapped to [0, 1]), component ``c``, triangle basis function ``a``;
* element pressure ``p[K, i, b]`` in P_(k-1);
* facet velocity ``ubar[F, i, c, d]`` and facet pressure ``pbar[F, i, d]``
  in P_k of the facet parameter running from ``facets[F, 0]`` to
  ``facets[F, 1]``.

So ``u(x, t) = sum_i psi_i(s) sum_a u[K,i,c,a] phi_a(xi)`` with
``s = (t - t_n) / dt`` and ``xi`` the reference coordinates of ``x`` in K.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .fem_core import element_jacobians, make_basis, make_quadrature, pressure_basis
from .geometry import SpatialMesh


class SlabSpace:
    """Layout of (u, p, ubar, pbar) on one slab for polynomial degree ``k``.

    The local spatial vector of an element is ordered
    ``[u (2, nk) | p (np) | ubar_e (2, nf) for e in 0..2 | pbar_e (nf) for e in 0..2]``.
    Globally each facet owns a block ``[ubar (2 nf) if not Dirichlet | pbar (nf)]``
    per time mode; a zero-mean multiplier per time mode is appended when every
    boundary facet is Dirichlet.
    """

    def __init__(self, mesh: SpatialMesh, k: int):
        make_basis("triangle", k)  # validates k
        self.mesh = mesh
        self.k = k
        self.n_modes = k + 1
        self.nk = (k + 1) * (k + 2) // 2
        self.np = k * (k + 1) // 2
        self.nf = k + 1
        self.nu = 2 * self.nk
        self.nx = self.nu + self.np
        self.nfacet_u = 2 * self.nf
        self.nfacet = self.nfacet_u + self.nf
        self.nS = self.nx + 3 * self.nfacet
        self.dirichlet = mesh.dirichlet_mask.copy()
        self.pure_dirichlet = mesh.pure_dirichlet
        self.n_multipliers = 1 if self.pure_dirichlet else 0

        # per-mode (spatial) global numbering of facet unknowns
        sizes = np.where(self.dirichlet, self.nf, self.nfacet)
        self.facet_offset = np.concatenate([[0], np.cumsum(sizes)[:-1]])
        self.n_facet_dofs = int(sizes.sum())
        self.n_global = self.n_facet_dofs + self.n_multipliers

    # local spatial index blocks
    def local_u(self):
        return np.arange(self.nu)

    def local_p(self):
        return np.arange(self.nu, self.nx)

    def local_ubar(self, e):
        s = self.nx + e * self.nfacet_u
        return np.arange(s, s + self.nfacet_u)

    def local_pbar(self, e):
        s = self.nx + 3 * self.nfacet_u + e * self.nf
        return np.arange(s, s + self.nf)

    def element_global_map(self):
        """Global (per-mode) index of each facet-local entry of every element.

        Returns an index array of shape ``(nE, 3 * nfacet)`` aligned with the
        local facet part ``[ubar_0, ubar_1, ubar_2, pbar_0, pbar_1, pbar_2]``;
        Dirichlet velocity entries get index -1.
        """
        mesh = self.mesh
        ne = mesh.n_elements
        idx = np.full((ne, 3 * self.nfacet), -1, dtype=np.int64)
        for e in range(3):
            F = mesh.element_facets[:, e]
            off = self.facet_offset[F]
            dir_ = self.dirichlet[F]
            cols = np.arange(e * self.nfacet_u, (e + 1) * self.nfacet_u)
            uidx = off[:, None] + np.arange(self.nfacet_u)[None, :]
            uidx[dir_] = -1
            idx[:, cols] = uidx
            pcols = 3 * self.nfacet_u + e * self.nf + np.arange(self.nf)
            poff = np.where(dir_, off, off + self.nfacet_u)
            idx[:, pcols] = poff[:, None] + np.arange(self.nf)[None, :]
        return idx

    def dof_counts(self) -> dict:
        """Unknown counts on one slab (all time modes)."""
        m = self.mesh
        nfree = int((~self.dirichlet).sum())
        T = self.n_modes
        return {
            "element_velocity": m.n_elements * self.nu * T,
            "element_pressure": m.n_elements * self.np * T,
            "facet_velocity": nfree * self.nfacet_u * T,
            "facet_pressure": m.n_facets * self.nf * T,
            "multipliers": self.n_multipliers * T,
        }

    def zero_state(self, n: int = 0, t0: float = 0.0, t1: float = 1.0) -> "SlabState":
        m, T = self.mesh, self.n_modes
        return SlabState(
            space=self, n=n, t0=t0, t1=t1,
            u=np.zeros((m.n_elements, T, 2, self.nk)),
            p=np.zeros((m.n_elements, T, self.np)),
            ubar=np.zeros((m.n_facets, T, 2, self.nf)),
            pbar=np.zeros((m.n_facets, T, self.nf)),
            u_prev=np.zeros((m.n_elements, 2, self.nk)),
            lam=np.zeros(T * self.n_multipliers),
        )


@dataclass
class SlabState:
    space: SlabSpace
    n: int
    t0: float
    t1: float
    u: np.ndarray
    p: np.ndarray
    ubar: np.ndarray
    pbar: np.ndarray
    u_prev: np.ndarray
    lam: np.ndarray = field(default_factory=lambda: np.zeros(0))
    report: Optional[object] = None

    @property
    def dt(self) -> float:
        return self.t1 - self.t0

    def copy(self) -> "SlabState":
        new = copy.copy(self)
        for name in ("u", "p", "ubar", "pbar", "u_prev", "lam"):
            setattr(new, name, getattr(self, name).copy())
        return new

    def dump(self, fh) -> None:
        """Plain-text snapshot: one line per (kind, entity, mode) block."""
        blocks = (("u", self.u), ("p", self.p), ("ubar", self.ubar), ("pbar", self.pbar))
        for kind, arr in blocks:
            for ent in range(arr.shape[0]):
                for i in range(arr.shape[1]):
                    vals = " ".join(f"{v:.17g}" for v in np.ravel(arr[ent, i]))
                    fh.write(f"{self.n} {kind} {ent} {i} {vals}\n")


@dataclass(frozen=True)
class FieldSample:
    x: np.ndarray
    t: float
    velocity: np.ndarray
    gradient: np.ndarray
    pressure: float

    @property
    def divergence(self) -> float:
        return float(np.trace(self.gradient))


def time_basis_values(k: int, s) -> np.ndarray:
    """Orthonormal temporal basis on [0, 1] at ``s``, shape (k+1, len(s))."""
    return make_basis("interval", k).eval(np.reshape(np.asarray(s, float), (-1, 1)))


def locate(mesh: SpatialMesh, x, tol: float = 1e-12) -> int:
    origin, J, det, invT = element_jacobians(mesh)
    xi = np.einsum("kji,kj->ki", invT, np.asarray(x, float)[None, :] - origin)
    lam = np.column_stack([1.0 - xi.sum(1), xi])
    inside = np.flatnonzero(lam.min(axis=1) >= -tol)
    if len(inside) == 0:
        raise ValueError(f"point {x} is outside the mesh")
    return int(inside[0])


def evaluate(state: SlabState, x, t: float, K: Optional[int] = None) -> FieldSample:
    """Evaluate velocity, velocity gradient and pressure at ``(x, t)``."""
    sp = state.space
    mesh = sp.mesh
    x = np.asarray(x, dtype=float)
    if K is None:
        K = locate(mesh, x)
    if not (state.t0 - 1e-14 <= t <= state.t1 + 1e-14):
        raise ValueError(f"time {t} outside slab ({state.t0}, {state.t1}]")
    origin, J, det, invT = element_jacobians(mesh)
    xi = invT[K].T @ (x - origin[K])
    if min(1.0 - xi.sum(), xi[0], xi[1]) < -1e-10:
        raise ValueError(f"point {x} is outside element {K}")
    vb = make_basis("triangle", sp.k)
    phi = vb.eval(xi[None, :])[:, 0]
    dphi = vb.grad(xi[None, :])[:, 0, :] @ invT[K].T
    psi = time_basis_values(sp.k, [(t - state.t0) / state.dt])[:, 0]
    coeff = np.einsum("i,ica->ca", psi, state.u[K])
    vel = coeff @ phi
    grad = coeff @ dphi  # grad[c, d] = d u_c / d x_d
    pb = pressure_basis(sp.k).eval(xi[None, :])[:, 0]
    pres = float(np.einsum("i,ib,b->", psi, state.p[K], pb))
    return FieldSample(x, t, vel, grad, pres)


def trace_minus(state: SlabState) -> np.ndarray:
    """Spatial coefficients of u at t_{n+1}^- (an element field in V_h)."""
    psi1 = time_basis_values(state.space.k, [1.0])[:, 0]
    return np.einsum("i,kica->kca", psi1, state.u)


def trace_plus(state: SlabState) -> np.ndarray:
    psi0 = time_basis_values(state.space.k, [0.0])[:, 0]
    return np.einsum("i,kica->kca", psi0, state.u)


def interpolate_element(f: Callable, space: SlabSpace, t0: float, t1: float,
                        degree: Optional[int] = None, ncomp: int = 2) -> np.ndarray:
    """Local space-time L2 projection of ``f(x, y, t)`` onto P_k(K) x P_k(I_n).

    ``f`` returns an array with a leading component axis of length ``ncomp``.
    Result shape ``(nE, k+1, ncomp, nk)``.
    """
    k = space.k
    deg = degree or 2 * k + 4
    mesh = space.mesh
    qx = make_quadrature("triangle", deg)
    qt = make_quadrature("interval", deg)
    origin, J, det, invT = element_jacobians(mesh)
    X = origin[:, None, :] + np.einsum("kij,qj->kqi", J, qx.points)
    phi = make_basis("triangle", k).eval(qx.points)
    psi = time_basis_values(k, qt.points[:, 0])
    out = np.zeros((mesh.n_elements, k + 1, ncomp, space.nk))
    for r, s in enumerate(qt.points[:, 0]):
        t = t0 + s * (t1 - t0)
        vals = np.asarray(f(X[..., 0], X[..., 1], t)).reshape(ncomp, *X.shape[:2])
        proj = np.einsum("ckq,q,aq->kca", vals, qx.weights, phi)
        out += qt.weights[r] * psi[:, r][None, :, None, None] * proj[:, None]
    return out


def interpolate_spatial(f: Callable, space: SlabSpace, t: float,
                        degree: Optional[int] = None, ncomp: int = 2) -> np.ndarray:
    """Elementwise L2 projection of ``f(x, y, t)`` at fixed time, shape (nE, ncomp, nk)."""
    k = space.k
    qx = make_quadrature("triangle", degree or 2 * k + 4)
    origin, J, det, invT = element_jacobians(space.mesh)
    X = origin[:, None, :] + np.einsum("kij,qj->kqi", J, qx.points)
    phi = make_basis("triangle", k).eval(qx.points)
    vals = np.asarray(f(X[..., 0], X[..., 1], t)).reshape(ncomp, *X.shape[:2])
    return np.einsum("ckq,q,aq->kca", vals, qx.weights, phi)


def interpolate_facet(f: Callable, space: SlabSpace, t0: float, t1: float,
                      facets=None, degree: Optional[int] = None,
                      ncomp: int = 2) -> np.ndarray:
    """Facet space-time L2 projection, shape ``(len(facets), k+1, ncomp, nf)``."""
    k = space.k
    mesh = space.mesh
    facets = np.arange(mesh.n_facets) if facets is None else np.asarray(facets)
    deg = degree or 2 * k + 4
    qs = make_quadrature("segment", deg)
    qt = make_quadrature("interval", deg)
    a = mesh.vertices[mesh.facets[facets, 0]]
    b = mesh.vertices[mesh.facets[facets, 1]]
    X = a[:, None, :] + qs.points[None, :, 0, None] * (b - a)[:, None, :]
    mu = make_basis("segment", k).eval(qs.points)
    psi = time_basis_values(k, qt.points[:, 0])
    out = np.zeros((len(facets), k + 1, ncomp, k + 1))
    for r, s in enumerate(qt.points[:, 0]):
        t = t0 + s * (t1 - t0)
        vals = np.asarray(f(X[..., 0], X[..., 1], t)).reshape(ncomp, *X.shape[:2])
        proj = np.einsum("cfq,q,dq->fcd", vals, qs.weights, mu)
        out += qt.weights[r] * psi[:, r][None, :, None, None] * proj[:, None]
    return out


def interpolate(f: Callable, space: SlabSpace, t0: float, t1: float,
                degree: Optional[int] = None):
    """Element and facet space-time L2 projections of a vector field."""
    return (interpolate_element(f, space, t0, t1, degree),
            interpolate_facet(f, space, t0, t1, degree=degree))

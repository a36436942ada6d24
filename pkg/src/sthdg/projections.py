"""Projections onto the discrete spaces.

* :class:`DivFreeProjector` -- L2 projection onto the discretely divergence
  free subspace of V_h (solenoidal elementwise, normal-continuous).
* :func:`bdm_interpolate`, :func:`bdm_lift` -- BDM_k interpolation and the
  local lifting of facet normal data.
* :func:`project_temporal_dg` -- right-endpoint / moment projection in time.
* :func:`project_spacetime` -- the composition of the two.
"""
from __future__ import annotations

from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp

from .fem_core import (ReferenceBasis, element_jacobians, make_basis, make_quadrature,
                       pressure_basis)
from .forms import ElementData, pressure_blocks, pressure_mean_vector
from .linalg import SingularMatrixError, factor_sparse, solve
from .spaces import SlabSpace, interpolate_spatial, time_basis_values


def facet_projection(f: Callable, space: SlabSpace, facets=None,
                     degree: Optional[int] = None, ncomp: int = 2) -> np.ndarray:
    """Spatial L2 projection onto P_k of each facet, shape (len(facets), ncomp, nf).

    ``f(x, y)`` returns an array with a leading component axis.
    """
    mesh = space.mesh
    facets = np.arange(mesh.n_facets) if facets is None else np.asarray(facets)
    qs = make_quadrature("segment", degree or 2 * space.k + 4)
    a = mesh.vertices[mesh.facets[facets, 0]]
    b = mesh.vertices[mesh.facets[facets, 1]]
    X = a[:, None, :] + qs.points[None, :, 0, None] * (b - a)[:, None, :]
    mu = make_basis("segment", space.k).eval(qs.points)
    vals = np.asarray(f(X[..., 0], X[..., 1])).reshape(ncomp, *X.shape[:2])
    return np.einsum("cfq,q,dq->fcd", vals, qs.weights, mu)


class DivFreeProjector:
    """L2 projection onto {v in V_h : b_h((q, qb), v) = data for all (q, qb)}.

    ``boundary`` selects the normal data on Dirichlet facets:
    ``"homogeneous"`` (v.n = 0) or ``"self"`` (v.n equals the facet projection
    of the projected field's own normal trace).  Facet pressures on Neumann
    facets are dropped because a free facet velocity makes them vacuous.
    """

    def __init__(self, space: SlabSpace, boundary: str = "homogeneous",
                 ed: Optional[ElementData] = None):
        if boundary not in ("homogeneous", "self"):
            raise ValueError(f"unknown boundary treatment {boundary!r}")
        self.space = space
        self.boundary = boundary
        mesh = space.mesh
        self.ed = ed or ElementData(space)
        ne, nu, np_, nf = mesh.n_elements, space.nu, space.np, space.nf
        B_e, B_f, _ = pressure_blocks(self.ed)
        self.mass = np.abs(self.ed.det)

        # constrained facet pressures: all but Neumann facets
        keep = ~mesh.neumann_mask
        self.pfacets = np.flatnonzero(keep)
        fidx = np.full(mesh.n_facets, -1)
        fidx[self.pfacets] = np.arange(len(self.pfacets))
        n_pe = ne * np_
        n_pf = len(self.pfacets) * nf
        self.n_mult = 1 if mesh.pure_dirichlet else 0
        nv = ne * nu
        self.nv = nv
        N = nv + n_pe + n_pf + self.n_mult
        rows, cols, vals = [np.arange(nv)], [np.arange(nv)], [np.repeat(self.mass, nu)]
        vcol = np.arange(nv).reshape(ne, nu)
        # element pressure rows
        prow = nv + np.arange(n_pe).reshape(ne, np_)
        be = B_e.reshape(ne, np_, nu)
        r = np.broadcast_to(prow[:, :, None], be.shape)
        c = np.broadcast_to(vcol[:, None, :], be.shape)
        rows += [r.ravel(), c.ravel()]
        cols += [c.ravel(), r.ravel()]
        vals += [be.ravel(), be.ravel()]
        for e in range(3):
            F = mesh.element_facets[:, e]
            ok = fidx[F] >= 0
            frow = nv + n_pe + fidx[F][:, None] * nf + np.arange(nf)[None, :]
            bf = B_f[:, e].reshape(ne, nf, nu)[ok]
            r = np.broadcast_to(frow[ok][:, :, None], bf.shape)
            c = np.broadcast_to(vcol[ok][:, None, :], bf.shape)
            rows += [r.ravel(), c.ravel()]
            cols += [c.ravel(), r.ravel()]
            vals += [bf.ravel(), bf.ravel()]
        if self.n_mult:
            m = pressure_mean_vector(self.ed).ravel()
            mr = np.full(n_pe, N - 1)
            rows += [mr, prow.ravel()]
            cols += [prow.ravel(), mr]
            vals += [m, m]
        A = sp.csc_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                          shape=(N, N))
        A.sum_duplicates()
        self.matrix = A
        self.n_pe = n_pe
        self.fidx = fidx
        # the velocity mass is diagonal: factor the pressure Schur complement
        # B M^-1 B^T (bordered by the mean constraint) instead of the saddle matrix
        npr = n_pe + n_pf
        self._minv = 1.0 / A.diagonal()[:nv]
        self._B = A[nv:nv + npr, :nv].tocsr()
        S = (self._B @ sp.diags(self._minv) @ self._B.T).tocsc()
        if self.n_mult:
            m = A[nv:nv + npr, N - 1]
            S = sp.bmat([[S, -m], [-m.T, None]], format="csc")
        try:
            self.fact = factor_sparse(S)
        except SingularMatrixError as exc:
            raise SingularMatrixError(
                f"divergence-free projection is singular ({exc}); the velocity-pressure "
                "pair is not inf-sup stable on this mesh", exc.row) from exc

    def rhs(self, f: Callable, degree: Optional[int] = None):
        sp_ = self.space
        mesh = sp_.mesh
        coef = interpolate_spatial(lambda x, y, t: f(x, y), sp_, 0.0, degree)
        b = np.zeros(self.matrix.shape[0])
        b[:self.nv] = (self.mass[:, None, None] * coef).ravel()
        if self.boundary == "self":
            df = np.flatnonzero(mesh.dirichlet_mask)
            if len(df):
                g = facet_projection(f, sp_, df, degree)
                flux = np.einsum("fcd,fc->fd", g, mesh.facet_normals[df])
                flux *= mesh.facet_lengths[df][:, None]
                rows = self.nv + self.n_pe + self.fidx[df][:, None] * sp_.nf + np.arange(sp_.nf)
                b[rows] = flux
        return coef, b

    def _solve(self, b: np.ndarray) -> np.ndarray:
        """Solve ``matrix @ x = b`` through the Schur complement."""
        nv = self.nv
        bv = b[:nv]
        r = -b[nv:]
        r[:self._B.shape[0]] += self._B @ (self._minv * bv)
        y = solve(self.fact, r)
        v = self._minv * (bv - self._B.T @ y[:self._B.shape[0]])
        return np.concatenate([v, y])

    def __call__(self, f: Callable, degree: Optional[int] = None) -> np.ndarray:
        coef, b = self.rhs(f, degree)
        return self._solve(b)[:self.nv].reshape(coef.shape)

    def project_coefficients(self, coef: np.ndarray) -> np.ndarray:
        """Project a broken field given by coefficients ``(nE, 2, nk)`` (homogeneous data)."""
        b = np.zeros(self.matrix.shape[0])
        b[:self.nv] = (self.mass[:, None, None] * coef).ravel()
        return self._solve(b)[:self.nv].reshape(coef.shape)

    def multipliers(self, f: Callable, degree: Optional[int] = None) -> np.ndarray:
        coef, b = self.rhs(f, degree)
        return self._solve(b)[self.nv:]


def project_divfree(f: Callable, space: SlabSpace, boundary: str = "homogeneous",
                    degree: Optional[int] = None) -> np.ndarray:
    """Coefficients ``(nE, 2, nk)`` of the divergence-free L2 projection of ``f(x, y)``."""
    return DivFreeProjector(space, boundary)(f, degree)


# -- BDM ------------------------------------------------------------------------------
class _BDMData:
    """Per-element moment matrices of the BDM_k degrees of freedom."""

    def __init__(self, space: SlabSpace, ed: Optional[ElementData] = None):
        ed = ed or ElementData(space)
        self.ed = ed
        self.space = space
        ne, nk, nf = space.mesh.n_elements, space.nk, space.nf
        tests = _bdm_tests(space, ed.qx.points, ed.invT)      # (nE, m, nq, 2)
        n_dof = 3 * nf + tests.shape[1]
        if n_dof != 2 * nk:
            raise AssertionError("BDM degrees of freedom are not unisolvent")
        D = np.zeros((ne, n_dof, 2, nk))
        # edge normal moments (element outward normal, facet parametrisation)
        D[:, :3 * nf] = np.einsum("kear,kec,dr,ker->kedca", ed.phiE, ed.normal,
                                  ed.mu, ed.WE).reshape(ne, 3 * nf, 2, nk)
        D[:, 3 * nf:] = np.einsum("kmqc,aq,kq->kmca", tests, ed.phi, ed.W)
        self.D = D.reshape(ne, n_dof, 2 * nk)
        self.Dinv = np.linalg.inv(self.D)


def bdm_interpolate(f: Callable, space: SlabSpace, degree: Optional[int] = None,
                    data: Optional[_BDMData] = None) -> np.ndarray:
    """BDM_k interpolant of ``f(x, y)``; coefficients ``(nE, 2, nk)``."""
    data = data or _BDMData(space)
    ed = data.ed
    k = space.k
    deg = degree or 2 * k + 4
    qs = make_quadrature("segment", deg)
    qx = make_quadrature("triangle", deg)
    mesh = space.mesh
    ne = mesh.n_elements
    fac = mesh.element_facets
    a = mesh.vertices[mesh.facets[fac, 0]]
    b = mesh.vertices[mesh.facets[fac, 1]]
    XE = a[:, :, None, :] + qs.points[None, None, :, 0, None] * (b - a)[:, :, None, :]
    fE = np.asarray(f(XE[..., 0], XE[..., 1]))             # (2, nE, 3, nr)
    mu = make_basis("segment", k).eval(qs.points)
    WE = mesh.facet_lengths[fac][..., None] * qs.weights
    edge = np.einsum("ckes,kec,ds,kes->ked", fE, ed.normal, mu, WE).reshape(ne, -1)
    origin, J, det, invT = element_jacobians(mesh)
    X = origin[:, None, :] + np.einsum("kij,qj->kqi", J, qx.points)
    fX = np.asarray(f(X[..., 0], X[..., 1]))                # (2, nE, nq)
    # interior test fields re-evaluated on the finer rule
    tests = _bdm_tests(space, qx.points, invT)
    W = np.abs(det)[:, None] * qx.weights
    inner = np.einsum("kmqc,ckq,kq->km", tests, fX, W)
    rhs = np.concatenate([edge, inner], axis=1)
    return np.einsum("kij,kj->ki", data.Dinv, rhs).reshape(ne, 2, space.nk)


def _bdm_tests(space, pts, invT):
    k = space.k
    pb = pressure_basis(k)
    gq = np.einsum("bqj,kij->kbqi", pb.grad(pts)[1:], invT)
    if k < 2:
        return gq
    cb = ReferenceBasis("triangle", k - 2)
    xi, eta = pts[:, 0], pts[:, 1]
    bub = (1 - xi - eta) * xi * eta
    dbub = np.stack([eta * (1 - 2 * xi - eta), xi * (1 - xi - 2 * eta)], axis=-1)
    dref = dbub[None] * cb.eval(pts)[:, :, None] + bub[None, :, None] * cb.grad(pts)
    grad = np.einsum("bqj,kij->kbqi", dref, invT)
    curl = np.stack([grad[..., 1], -grad[..., 0]], axis=-1)
    return np.concatenate([gq, curl], axis=1)


def bdm_lift(qbar: np.ndarray, K: int, space: SlabSpace,
             data: Optional[_BDMData] = None) -> np.ndarray:
    """Element field on K with normal trace ``qbar[e]`` on edge e and zero interior moments.

    ``qbar`` has shape ``(3, nf)`` in the facet bases; the normal is K's
    outward normal.  Returns coefficients ``(2, nk)``.
    """
    data = data or _BDMData(space)
    qbar = np.asarray(qbar, dtype=float).reshape(3, space.nf)
    lengths = space.mesh.facet_lengths[space.mesh.element_facets[K]]
    rhs = np.zeros(2 * space.nk)
    rhs[:3 * space.nf] = (lengths[:, None] * qbar).ravel()
    return (data.Dinv[K] @ rhs).reshape(2, space.nk)


# -- temporal and space-time projections ------------------------------------------------
def project_temporal_dg(w: Callable, t0: float, t1: float, k: int,
                        degree: Optional[int] = None) -> np.ndarray:
    """Coefficients ``c_i`` of P^t w in the orthonormal basis of [t0, t1].

    P^t w matches w at t1 and has the same moments against P_(k-1).
    ``w(t)`` may return an array; coefficients get a leading axis of length k+1.
    """
    q = make_quadrature("interval", degree or 2 * k + 4)
    psi = time_basis_values(k, q.points[:, 0])
    vals = np.array([np.asarray(w(t0 + s * (t1 - t0)), dtype=float) for s in q.points[:, 0]])
    c = np.einsum("iq,q,q...->i...", psi[:k], q.weights, vals)
    psi1 = time_basis_values(k, [1.0])[:, 0]
    end = np.asarray(w(t1), dtype=float)
    last = (end - np.tensordot(psi1[:k], c, axes=(0, 0))) / psi1[k]
    return np.concatenate([c, last[None]], axis=0)


def project_spacetime(f: Callable, space: SlabSpace, t0: float, t1: float,
                      boundary: str = "homogeneous", degree: Optional[int] = None,
                      projector: Optional[DivFreeProjector] = None) -> np.ndarray:
    """P^t applied to the div-free projection: coefficients ``(nE, k+1, 2, nk)``.

    ``f(x, y, t)``; since P_h is linear it commutes with P^t.
    """
    proj = projector or DivFreeProjector(space, boundary)
    coeffs = project_temporal_dg(lambda t: proj(lambda x, y: f(x, y, t), degree),
                                 t0, t1, space.k, degree)
    return np.moveaxis(coeffs, 0, 1)


def project_spacetime_facet(f: Callable, space: SlabSpace, t0: float, t1: float,
                            facets=None, degree: Optional[int] = None) -> np.ndarray:
    """P^t applied to the facet L2 projection: ``(nF, k+1, 2, nf)``."""
    coeffs = project_temporal_dg(
        lambda t: facet_projection(lambda x, y: f(x, y, t), space, facets, degree),
        t0, t1, space.k, degree)
    return np.moveaxis(coeffs, 0, 1)


def project_spatial_temporal(f: Callable, space: SlabSpace, t0: float, t1: float,
                             boundary: str = "homogeneous",
                             degree: Optional[int] = None) -> np.ndarray:
    """P_h applied to P^t f, composed in the opposite order to :func:`project_spacetime`."""
    k = space.k
    proj = DivFreeProjector(space, boundary)
    q = make_quadrature("interval", degree or 2 * k + 4)
    psi = time_basis_values(k, q.points[:, 0])
    psi1 = time_basis_values(k, [1.0])[:, 0]
    times = t0 + q.points[:, 0] * (t1 - t0)

    def moment(i):
        return lambda x, y: sum(q.weights[r] * psi[i, r] * np.asarray(f(x, y, t))
                                for r, t in enumerate(times))

    moments = [moment(i) for i in range(k)]

    def last(x, y):
        return (np.asarray(f(x, y, t1)) - sum(psi1[i] * moments[i](x, y)
                                              for i in range(k))) / psi1[k]

    return np.stack([proj(g, degree) for g in moments + [last]], axis=1)

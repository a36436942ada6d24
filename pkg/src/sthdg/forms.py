"""Element-local kernels for the viscous, convective and pressure forms.

Everything here is batched over elements.  For a single time instant the
local spatial operator of element K acts on the local vector
``[u | p | ubar_e | pbar_e]`` (see :class:`~sthdg.spaces.SlabSpace`).  The
velocity forms act identically on both components, so the scalar blocks are
stored once and expanded with ``kron(I2, .)``.

Sign conventions (test function in the row, trial in the column)::

    a(u, v) = (grad u, grad v)_K + alpha/h_K <u - ub, v - vb>
              - <u - ub, d_n v> - <d_n u, v - vb>
    o(w; u, v) = -(u w^T, grad v)_K + 1/2 <w.n (u + ub), v - vb>
                 + 1/2 <|w.n| (u - ub), v - vb>
    b(p, v) = -(p, div v)_K + <v.n, pb>

On boundary facets the facet pressure couples to ``(v - vb).n``; this is
``v.n`` whenever ``vb`` vanishes there, and with prescribed Dirichlet data it
puts the boundary flux into the continuity rows.  On Neumann facets the
facet-velocity test also carries the outflow part of the convective flux,
``<max(w.n, 0) ub, vb>``.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Optional

import numpy as np

from .fem_core import element_jacobians, make_basis, make_quadrature, pressure_basis
from .spaces import SlabSpace


@dataclass(frozen=True)
class FormParams:
    """Viscosity, interior-penalty parameter and polynomial degree."""

    nu: float
    k: int
    alpha: Optional[float] = None

    def __post_init__(self):
        if not 0.0 < self.nu <= 1.0:
            raise ValueError(f"nu must lie in (0, 1], got {self.nu}")
        if self.k < 1:
            raise ValueError("k must be at least 1")
        if self.alpha is None:
            object.__setattr__(self, "alpha", 10.0 * self.k ** 2)
        if self.alpha <= 0.0:
            raise ValueError("alpha must be positive")


def default_degrees(k: int) -> dict:
    """Quadrature exactness used by the kernels (o_h integrands are cubic in P_k)."""
    return {"element": 3 * k + 2, "facet": 3 * k + 4, "time": 3 * k + 2}


class ElementData:
    """Basis values, gradients and geometry at element and edge quadrature points.

    Edge quadrature points are generated from each facet's own
    parametrisation, so both neighbours of a facet see the same physical
    points in the same order.
    """

    def __init__(self, space: SlabSpace, element_degree: Optional[int] = None,
                 facet_degree: Optional[int] = None):
        k = space.k
        mesh = space.mesh
        deg = default_degrees(k)
        self.space = space
        self.mesh = mesh
        self.k = k
        self.qx = make_quadrature("triangle", element_degree or deg["element"])
        self.qs = make_quadrature("segment", facet_degree or deg["facet"])
        vb = make_basis("triangle", k)
        self.origin, self.J, self.det, self.invT = element_jacobians(mesh)
        self.h = mesh.element_diameters
        ne = mesh.n_elements

        self.phi = vb.eval(self.qx.points)                      # (nk, nq)
        self.dphi = np.einsum("aqj,kij->kaqi", vb.grad(self.qx.points), self.invT)
        self.psi_p = pressure_basis(k).eval(self.qx.points)       # (np, nq)
        self.W = np.abs(self.det)[:, None] * self.qx.weights[None, :]
        self.X = self.origin[:, None, :] + np.einsum("kij,qj->kqi", self.J, self.qx.points)

        self.mu = make_basis("segment", k).eval(self.qs.points)   # (nf, nr)
        fac = mesh.element_facets
        a = mesh.vertices[mesh.facets[fac, 0]]                     # (nE, 3, 2)
        b = mesh.vertices[mesh.facets[fac, 1]]
        s = self.qs.points[:, 0]
        self.XE = a[:, :, None, :] + s[None, None, :, None] * (b - a)[:, :, None, :]
        xi = np.einsum("kji,kerj->keri", self.invT, self.XE - self.origin[:, None, None, :])
        nr = len(s)
        flat = xi.reshape(-1, 2)
        self.phiE = vb.eval(flat).reshape(vb.dim, ne, 3, nr).transpose(1, 2, 0, 3)
        g = vb.grad(flat).reshape(vb.dim, ne, 3, nr, 2)
        self.dphiE = np.einsum("akerj,kij->keari", g, self.invT)
        self.psi_pE = pressure_basis(k).eval(flat).reshape(-1, ne, 3, nr).transpose(1, 2, 0, 3)
        self.normal = (mesh.element_signs[..., None] * mesh.facet_normals[fac])  # (nE,3,2)
        self.WE = mesh.facet_lengths[fac][..., None] * self.qs.weights[None, None, :]
        self.dnphiE = np.einsum("keari,kei->kear", self.dphiE, self.normal)
        self.neumann_edge = mesh.neumann_mask[fac]
        self.dirichlet_edge = mesh.dirichlet_mask[fac]
        self.boundary_edge = self.neumann_edge | self.dirichlet_edge

    _PER_ELEMENT = ("origin", "J", "det", "invT", "h", "dphi", "W", "X", "XE",
                    "phiE", "dphiE", "psi_pE", "normal", "WE", "dnphiE",
                    "neumann_edge", "dirichlet_edge", "boundary_edge")

    def subset(self, elements) -> "ElementData":
        """Shallow copy restricted to ``elements`` (index array or slice)."""
        out = object.__new__(ElementData)
        out.__dict__.update(self.__dict__)
        for name in self._PER_ELEMENT:
            setattr(out, name, getattr(self, name)[elements])
        return out

    # -- fields at quadrature points ---------------------------------------
    def velocity_at(self, w: np.ndarray):
        """Values of an element field ``w[K, c, a]`` at element and edge points."""
        we = np.einsum("kca,aq->kqc", w, self.phi)
        wE = np.einsum("kca,kear->kerc", w, self.phiE)
        return we, wE


def viscous_blocks(ed: ElementData, alpha: float):
    """Scalar blocks of a_h: (A_ee, A_ef, A_ff) with shapes
    (nE,nk,nk), (nE,3,nk,nf), (nE,3,nf,nf)."""
    pen = alpha / ed.h[:, None, None]
    A_ee = np.einsum("kaqi,kbqi,kq->kab", ed.dphi, ed.dphi, ed.W)
    pp = np.einsum("kear,kebr,ker->keab", ed.phiE, ed.phiE, ed.WE)
    dn = np.einsum("kear,kebr,ker->keab", ed.dnphiE, ed.phiE, ed.WE)
    A_ee += (pen[..., None] * pp).sum(1) - dn.sum(1) - dn.transpose(0, 1, 3, 2).sum(1)
    pm = np.einsum("kear,dr,ker->kead", ed.phiE, ed.mu, ed.WE)
    dnm = np.einsum("kear,dr,ker->kead", ed.dnphiE, ed.mu, ed.WE)
    A_ef = -pen[..., None] * pm + dnm
    mm = np.einsum("cr,dr,ker->kecd", ed.mu, ed.mu, ed.WE)
    A_ff = pen[..., None] * mm
    return A_ee, A_ef, A_ff


def convection_blocks(ed: ElementData, w: np.ndarray):
    """Scalar blocks of o_h(w; ., .) for an element velocity ``w[K, c, a]``.

    Returns (O_ee, O_ef, O_fe, O_ff) where O_ef is (test element, trial facet)
    and O_fe is (test facet, trial element).
    """
    we, wE = ed.velocity_at(w)
    wn = np.einsum("kerc,kec->ker", wE, ed.normal)
    awn = np.abs(wn)
    wgrad = (ed.dphi * we[:, None]).sum(-1)                   # w . grad phi_a
    O_ee = -(wgrad * ed.W[:, None, :]) @ ed.phi.T
    up = (0.5 * (wn + awn) * ed.WE)[:, :, None, :]
    dn = (0.5 * (wn - awn) * ed.WE)[:, :, None, :]
    phiE_T = ed.phiE.swapaxes(-1, -2)
    O_ee += ((ed.phiE * up) @ phiE_T).sum(1)
    O_ef = (ed.phiE * dn) @ ed.mu.T
    O_fe = -(ed.mu * up) @ phiE_T
    ff = -dn + np.where(ed.neumann_edge[..., None], np.maximum(wn, 0.0), 0.0)[:, :, None, :] \
        * ed.WE[:, :, None, :]
    O_ff = (ed.mu * ff) @ ed.mu.T
    return O_ee, O_ef, O_fe, O_ff


def apply_velocity_blocks(space: SlabSpace, blocks, X: np.ndarray) -> np.ndarray:
    """Product of the velocity blocks ``(ee, ef, fe, ff)`` with local vectors ``X (nE, nS)``.

    Equivalent to ``assemble_spatial(space, *blocks) @ X`` without forming the
    matrices; rows outside the velocity entries are zero.
    """
    ee, ef, fe, ff = blocks
    ne, nk, nf = X.shape[0], space.nk, space.nf
    U = space.local_u()
    Y = np.zeros(X.shape, dtype=np.result_type(X, ee))
    u = X[:, U].reshape(ne, 2, nk)
    yu = u @ ee.swapaxes(-1, -2)
    for e in range(3):
        Ub = space.local_ubar(e)
        ub = X[:, Ub].reshape(ne, 2, nf)
        yu += ub @ ef[:, e].swapaxes(-1, -2)
        Y[:, Ub] = (u @ fe[:, e].swapaxes(-1, -2) + ub @ ff[:, e].swapaxes(-1, -2)) \
            .reshape(ne, -1)
    Y[:, U] = yu.reshape(ne, -1)
    return Y


def pressure_blocks(ed: ElementData):
    """Blocks of b_h: B_e (nE,np,2,nk), B_f (nE,3,nf,2,nk), B_n (nE,3,nf,2,nf).

    B_n is the boundary coupling -<ub.n, qb> (zero on interior edges).
    """
    B_e = -np.einsum("bq,kaqc,kq->kbca", ed.psi_p, ed.dphi, ed.W)
    B_f = np.einsum("kear,kec,dr,ker->kedca", ed.phiE, ed.normal, ed.mu, ed.WE)
    B_n = -np.einsum("gr,kec,dr,ker->kedcg", ed.mu, ed.normal, ed.mu, ed.WE)
    B_n *= ed.boundary_edge[:, :, None, None, None]
    return B_e, B_f, B_n


def mass_vector(ed: ElementData) -> np.ndarray:
    """Element velocity mass (diagonal for the orthonormal basis), shape (nE, 2 nk)."""
    nk = ed.phi.shape[0]
    return np.repeat(np.abs(ed.det)[:, None], 2 * nk, axis=1)


def pressure_mean_vector(ed: ElementData) -> np.ndarray:
    """int_K psi_b for each element pressure basis function, shape (nE, np)."""
    return np.einsum("bq,kq->kb", ed.psi_p, ed.W)


def _kron2(block):
    """Expand a scalar block (..., m, n) to (..., 2m, 2n) acting per component."""
    m, n = block.shape[-2:]
    out = np.zeros(block.shape[:-2] + (2 * m, 2 * n), dtype=block.dtype)
    out[..., :m, :n] = block
    out[..., m:, n:] = block
    return out


def assemble_spatial(space: SlabSpace, ee=None, ef=None, fe=None, ff=None,
                     B=None, out=None):
    """Scatter velocity blocks (and pressure blocks) into local spatial matrices."""
    ne = space.mesh.n_elements
    nS = space.nS
    if out is None:
        dtype = np.result_type(*(x.dtype for x in (ee, ef, fe, ff) if x is not None),
                               np.float64)
        out = np.zeros((ne, nS, nS), dtype=dtype)
    U = space.local_u()
    if ee is not None:
        out[:, U[:, None], U[None, :]] += _kron2(ee)
    for e in range(3):
        Ub = space.local_ubar(e)
        if ef is not None:
            out[:, U[:, None], Ub[None, :]] += _kron2(ef[:, e])
        if fe is not None:
            out[:, Ub[:, None], U[None, :]] += _kron2(fe[:, e])
        if ff is not None:
            out[:, Ub[:, None], Ub[None, :]] += _kron2(ff[:, e])
    if B is not None:
        B_e, B_f, B_n = B
        P = space.local_p()
        be = B_e.reshape(ne, space.np, space.nu)
        out[:, P[:, None], U[None, :]] += be
        out[:, U[:, None], P[None, :]] += be.transpose(0, 2, 1)
        for e in range(3):
            Pb = space.local_pbar(e)
            Ub = space.local_ubar(e)
            bf = B_f[:, e].reshape(ne, space.nf, space.nu)
            out[:, Pb[:, None], U[None, :]] += bf
            out[:, U[:, None], Pb[None, :]] += bf.transpose(0, 2, 1)
            bn = B_n[:, e].reshape(ne, space.nf, space.nfacet_u)
            out[:, Pb[:, None], Ub[None, :]] += bn
            out[:, Ub[:, None], Pb[None, :]] += bn.transpose(0, 2, 1)
    return out


@lru_cache(maxsize=None)
def time_matrices(k: int, degree: Optional[int] = None):
    """Reference temporal data on [0, 1].

    Returns ``(T, psi0, psi1, s, w, psi_q)`` where
    ``T[i, j] = -int psi_j psi_i' + psi_j(1) psi_i(1)`` (test i, trial j),
    ``psi0``/``psi1`` the basis at the slab ends, and ``(s, w, psi_q)`` a
    temporal quadrature with basis values ``psi_q[i, q]``.
    """
    tb = make_basis("interval", k)
    q = make_quadrature("interval", degree or default_degrees(k)["time"])
    psi_q = tb.eval(q.points)
    dpsi_q = tb.grad(q.points)[:, :, 0]
    psi0 = tb.eval([[0.0]])[:, 0]
    psi1 = tb.eval([[1.0]])[:, 0]
    T = -np.einsum("jq,iq,q->ij", psi_q, dpsi_q, q.weights) + np.outer(psi1, psi1)
    for arr in (T, psi0, psi1, psi_q):
        arr.setflags(write=False)
    return T, psi0, psi1, q.points[:, 0], q.weights, psi_q


# -- single-element views -------------------------------------
@dataclass
class LocalBlock:
    """Dense local blocks keyed by (test entity, trial entity)."""

    blocks: dict

    def __getitem__(self, key):
        return self.blocks[key]


def a_h_local(ed: ElementData, K: int, params: FormParams) -> LocalBlock:
    A_ee, A_ef, A_ff = viscous_blocks(ed, params.alpha)
    return LocalBlock({("u", "u"): A_ee[K], ("u", "ubar"): A_ef[K],
                       ("ubar", "u"): A_ef[K].transpose(0, 2, 1), ("ubar", "ubar"): A_ff[K]})


def o_h_local(ed: ElementData, w: np.ndarray, K: int) -> LocalBlock:
    O_ee, O_ef, O_fe, O_ff = convection_blocks(ed, w)
    return LocalBlock({("u", "u"): O_ee[K], ("u", "ubar"): O_ef[K],
                       ("ubar", "u"): O_fe[K], ("ubar", "ubar"): O_ff[K]})


def b_h_local(ed: ElementData, K: int) -> LocalBlock:
    B_e, B_f, B_n = pressure_blocks(ed)
    return LocalBlock({("p", "u"): B_e[K], ("pbar", "u"): B_f[K], ("pbar", "ubar"): B_n[K]})


def time_terms_local(k: int, dt: float) -> LocalBlock:
    """Temporal couplings per unit spatial mass.

    ``("u", "u")`` is the slab matrix T (independent of dt for the
    orthonormal basis) and ``("u", "u_prev")`` the right-hand-side coupling
    ``psi_i(0)`` with the incoming trace.
    """
    T, psi0, psi1, *_ = time_matrices(k)
    return LocalBlock({("u", "u"): np.array(T), ("u", "u_prev"): np.array(psi0),
                       ("u", "u_end"): np.array(psi1)})


# -- direct evaluation of forms on discrete fields ------------------------------
class FieldTraces:
    """Element and facet data of a spatial discrete field at quadrature points."""

    def __init__(self, ed: ElementData, u, ubar=None, p=None, pbar=None):
        sp = ed.space
        self.ed = ed
        self.u = u
        self.ue = np.einsum("kca,aq->kqc", u, ed.phi)
        self.gu = np.einsum("kca,kaqi->kqci", u, ed.dphi)
        self.uE = np.einsum("kca,kear->kerc", u, ed.phiE)
        self.guE = np.einsum("kca,keari->kerci", u, ed.dphiE)
        fac = ed.mesh.element_facets
        if ubar is None:
            ubar = np.zeros((ed.mesh.n_facets, 2, sp.nf))
        self.ubE = np.einsum("kecd,dr->kerc", ubar[fac], ed.mu)
        if p is not None:
            self.pe = np.einsum("kb,bq->kq", p, ed.psi_p)
        if pbar is not None:
            self.pbE = np.einsum("ked,dr->ker", pbar[fac], ed.mu)


def eval_a_h(ed: ElementData, alpha: float, U: FieldTraces, V: FieldTraces) -> float:
    h = ed.h[:, None, None]
    vol = np.einsum("kqci,kqci,kq->", U.gu, V.gu, ed.W)
    ju = U.uE - U.ubE
    jv = V.uE - V.ubE
    dnu = np.einsum("kerci,kei->kerc", U.guE, ed.normal)
    dnv = np.einsum("kerci,kei->kerc", V.guE, ed.normal)
    pen = np.einsum("kerc,kerc,ker->", ju, jv, ed.WE / h)
    cons = np.einsum("kerc,kerc,ker->", ju, dnv, ed.WE) + np.einsum("kerc,kerc,ker->", dnu, jv, ed.WE)
    return float(vol + alpha * pen - cons)


def eval_o_h(ed: ElementData, W: FieldTraces, U: FieldTraces, V: FieldTraces,
             neumann_outflow: bool = True) -> float:
    vol = -np.einsum("kqc,kqd,kqcd,kq->", U.ue, W.ue, V.gu, ed.W)
    wn = np.einsum("kerc,kec->ker", W.uE, ed.normal)
    jv = V.uE - V.ubE
    f1 = 0.5 * np.einsum("ker,kerc,kerc,ker->", wn, U.uE + U.ubE, jv, ed.WE)
    f2 = 0.5 * np.einsum("ker,kerc,kerc,ker->", np.abs(wn), U.uE - U.ubE, jv, ed.WE)
    out = vol + f1 + f2
    if neumann_outflow:
        m = ed.neumann_edge[..., None] * np.maximum(wn, 0.0)
        out += np.einsum("ker,kerc,kerc,ker->", m, U.ubE, V.ubE, ed.WE)
    return float(out)


def eval_b_h(ed: ElementData, P: FieldTraces, V: FieldTraces) -> float:
    div = np.einsum("kqcc->kq", V.gu)
    vol = -np.einsum("kq,kq,kq->", P.pe, div, ed.W)
    vn = np.einsum("kerc,kec->ker", V.uE, ed.normal)
    vbn = np.einsum("kerc,kec->ker", V.ubE, ed.normal)
    vn = vn - ed.boundary_edge[..., None] * vbn
    return float(vol + np.einsum("ker,ker,ker->", vn, P.pbE, ed.WE))


def oh_facet_expression(ed: ElementData, W: FieldTraces, V: FieldTraces,
                        neumann_outflow: bool = True) -> float:
    """1/2 sum_K int_dK |w.n| |v - vb|^2 + 1/2 int_N |w.n| |vb|^2.

    Equals ``o_h(w; v, v)`` when w is solenoidal, normal-continuous and has
    zero normal trace on Dirichlet facets.
    """
    wn = np.einsum("kerc,kec->ker", W.uE, ed.normal)
    jv = V.uE - V.ubE
    out = 0.5 * np.einsum("ker,kerc,kerc,ker->", np.abs(wn), jv, jv, ed.WE)
    if neumann_outflow:
        m = ed.neumann_edge[..., None] * np.abs(wn)
        out += 0.5 * np.einsum("ker,kerc,kerc,ker->", m, V.ubE, V.ubE, ed.WE)
    return float(out)


# -- mesh-dependent norms --------------------------------------------------------
def _norm_parts(ed: ElementData, V: FieldTraces):
    grad = np.einsum("kqci,kqci,kq->", V.gu, V.gu, ed.W)
    jv = V.uE - V.ubE
    jump = np.einsum("kerc,kerc,ker->", jv, jv, ed.WE / ed.h[:, None, None])
    dn = np.einsum("kerci,kei->kerc", V.guE, ed.normal)
    extra = np.einsum("kerc,kerc,ker->", dn, dn, ed.WE * ed.h[:, None, None])
    return grad, jump, extra


def norm_v(ed: ElementData, V: FieldTraces) -> float:
    g, j, _ = _norm_parts(ed, V)
    return float(np.sqrt(g + j))


def norm_v_prime(ed: ElementData, V: FieldTraces) -> float:
    g, j, e = _norm_parts(ed, V)
    return float(np.sqrt(g + j + e))


def tnorm_p(ed: ElementData, p: np.ndarray, pbar: np.ndarray) -> float:
    """sqrt(||q||^2 + sum_K h_K ||qb||^2_dK) for reference-orthonormal coefficients."""
    vol = np.einsum("kb,kb,k->", p, p, np.abs(ed.det))
    fac = ed.mesh.element_facets
    lengths = ed.mesh.facet_lengths[fac]
    face = np.einsum("ked,ked,ke,k->", pbar[fac], pbar[fac], lengths, ed.h)
    return float(np.sqrt(vol + face))


def facet_jumps(mesh, u_at_edges: np.ndarray) -> np.ndarray:
    """Jumps of an element field across interior facets at edge quadrature points.

    ``u_at_edges[K, e, r, ...]`` holds the element-K trace on its edge e.
    Both sides share the facet's own quadrature points.
    """
    fe = mesh.facet_elements
    interior = np.flatnonzero(fe[:, 1] >= 0)
    # local edge index of facet f in each neighbour
    loc = np.full((mesh.n_facets, 2), -1)
    for e in range(3):
        F = mesh.element_facets[:, e]
        own = mesh.element_signs[:, e] > 0
        loc[F[own], 0] = e
        loc[F[~own], 1] = e
    f = interior
    return u_at_edges[fe[f, 0], loc[f, 0]] - u_at_edges[fe[f, 1], loc[f, 1]]


def norm_1ph(ed: ElementData, v: np.ndarray, p: float = 2.0) -> float:
    """Broken W^{1,p} seminorm with facet jumps (boundary facets use the trace)."""
    mesh = ed.mesh
    gu = np.einsum("kca,kaqi->kqci", v, ed.dphi)
    gnorm = np.sqrt((gu ** 2).sum(axis=(2, 3)))
    vol = np.einsum("kq,kq->", gnorm ** p, ed.W)
    uE = np.einsum("kca,kear->kerc", v, ed.phiE)
    jumps = np.sqrt((facet_jumps(mesh, uE) ** 2).sum(-1))
    interior = mesh.interior_facets
    loc = _owner_edge(mesh)
    hF = mesh.facet_lengths
    wI = hF[interior][:, None] * ed.qs.weights[None, :]
    face = np.einsum("fr,fr,f->", jumps ** p, wI, hF[interior] ** (1.0 - p))
    bnd = mesh.boundary_facets
    own = mesh.facet_elements[bnd, 0]
    tr = np.sqrt((uE[own, loc[bnd]] ** 2).sum(-1))
    wB = hF[bnd][:, None] * ed.qs.weights[None, :]
    face += np.einsum("fr,fr,f->", tr ** p, wB, hF[bnd] ** (1.0 - p))
    return float((vol + face) ** (1.0 / p))


def _owner_edge(mesh) -> np.ndarray:
    loc = np.full(mesh.n_facets, -1)
    for e in range(3):
        own = mesh.element_signs[:, e] > 0
        loc[mesh.element_facets[own, e]] = e
    return loc


def norm_v_blocks(ed: ElementData):
    """Scalar Gram blocks of the squared v-norm (broken gradient + h^-1 facet mismatch)."""
    h = ed.h[:, None, None, None]
    G_ee = np.einsum("kaqi,kbqi,kq->kab", ed.dphi, ed.dphi, ed.W)
    pp = np.einsum("kear,kebr,ker->keab", ed.phiE, ed.phiE, ed.WE)
    G_ee += (pp / h).sum(1)
    G_ef = -np.einsum("kear,dr,ker->kead", ed.phiE, ed.mu, ed.WE) / h
    G_ff = np.einsum("cr,dr,ker->kecd", ed.mu, ed.mu, ed.WE) / h
    return G_ee, G_ef, G_ff

"""Slab-by-slab solution of the space-time HDG discretisation.

On each slab the unknowns are expanded in the orthonormal temporal basis
``psi_0..psi_k``.  With ``E`` the element velocity mass and ``K(w)`` the
spatial operator (viscous + pressure + convection frozen at ``w``), the
slab system reads, for test mode ``i``::

    sum_j T_ij E X_j + dt K_lin X_i
        + dt sum_q w_q psi_i(s_q) psi_j(s_q) O(w(s_q)) X_j = F_i

Element unknowns (velocity and pressure) are eliminated element by element;
the global system couples facet unknowns and, for pure Dirichlet problems,
one pressure-mean multiplier per time mode.

Two linear solvers are available for the Picard iteration:

* ``"direct"`` condenses and factorizes the full space-time operator at every
  iteration (exact Picard steps).
* ``"modal"`` diagonalizes ``T`` and preconditions with the operator in which
  the convecting field is averaged over the slab; each iteration is a defect
  correction ``X <- X + P^{-1}(F - A(X) X)``.  The spatial systems decouple
  per eigenvalue of ``T`` and conjugate pairs share one complex
  factorization.  The fixed point is the same Picard fixed point.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp

from .fem_core import make_basis
from .forms import (ElementData, FormParams, apply_velocity_blocks, assemble_spatial,
                    convection_blocks, pressure_blocks, pressure_mean_vector,
                    time_matrices, viscous_blocks)
from .geometry import SpatialMesh, TimePartition
from .linalg import SingularMatrixError, batched_inverse, factor_sparse, solve
from .problems import ProblemSpec
from .spaces import SlabSpace, SlabState, interpolate_element, interpolate_facet

log = logging.getLogger(__name__)

CHUNK = 2048


class SlabSolveError(RuntimeError):
    """A slab could not be solved; carries the slab index and last iterate norms."""

    def __init__(self, message, slab=None, increment=None, residual=None):
        super().__init__(message)
        self.slab = slab
        self.increment = increment
        self.residual = residual


@dataclass
class NonlinearSettings:
    tolerance: float = 1e-10
    max_iterations: int = 60
    relaxation: float = 1.0
    method: str = "auto"
    residual_factor: float = 10.0
    forcing_degree: Optional[int] = None
    refactor_ratio: float = 0.5
    direct_limit: int = 50
    anderson_depth: int = 3

    def __post_init__(self):
        if self.tolerance <= 0.0:
            raise ValueError("tolerance must be positive")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be at least 1")
        if not 0.0 < self.relaxation <= 1.0:
            raise ValueError("relaxation must lie in (0, 1]")
        if self.method not in ("auto", "direct", "modal"):
            raise ValueError(f"unknown method {self.method!r}")
        if self.anderson_depth < 0:
            raise ValueError("anderson_depth must be non-negative")

    def resolve_method(self, n_elements: int) -> str:
        if self.method != "auto":
            return self.method
        return "direct" if n_elements <= self.direct_limit else "modal"


@dataclass
class IterationRecord:
    slab: int
    iteration: int
    increment: float
    residual: float

    def line(self) -> str:
        return (f"slab {self.slab:6d}  iter {self.iteration:4d}  "
                f"increment {self.increment:12.5e}  residual {self.residual:12.5e}")


@dataclass
class SlabReport:
    slab: int
    iterations: list = field(default_factory=list)
    factorizations: int = 0
    seconds: float = 0.0

    @property
    def n_iterations(self) -> int:
        return len(self.iterations)


# -- element condensation ---------------------------------------------------------
class CondensedSystem:
    """Static condensation of element-interior unknowns.

    ``L`` holds local matrices ordered ``[interior | trace]``; ``gidx`` maps
    trace entries to global rows (``-1`` marks prescribed entries, which are
    excluded from the global system and get zero correction).
    """

    def __init__(self, L: np.ndarray, n_int: int, gidx: np.ndarray, n_glob: int):
        ne, n, _ = L.shape
        self.n_int = n_int
        self.gidx = gidx
        self.n_glob = n_glob
        dtype = L.dtype
        self.inv = np.empty((ne, n_int, n_int), dtype)
        self.Z = np.empty((ne, n_int, n - n_int), dtype)
        self.Ali = np.ascontiguousarray(L[:, n_int:, :n_int])
        S = np.empty((ne, n - n_int, n - n_int), dtype)
        for c0 in range(0, ne, CHUNK):
            c = slice(c0, min(c0 + CHUNK, ne))
            inv = batched_inverse(L[c, :n_int, :n_int])
            self.inv[c] = inv
            self.Z[c] = inv @ L[c, :n_int, n_int:]
            S[c] = L[c, n_int:, n_int:] - self.Ali[c] @ self.Z[c]
        rows = np.broadcast_to(gidx[:, :, None], S.shape)
        cols = np.broadcast_to(gidx[:, None, :], S.shape)
        keep = (rows >= 0) & (cols >= 0)
        A = sp.csc_matrix((S[keep], (rows[keep], cols[keep])), shape=(n_glob, n_glob))
        A.sum_duplicates()
        self.matrix = A
        self.fact = factor_sparse(A)

    def _scatter(self, vals):
        valid = self.gidx >= 0
        g = self.gidx[valid]
        v = vals[valid]
        out = np.bincount(g, weights=v.real, minlength=self.n_glob)
        if np.iscomplexobj(v):
            out = out + 1j * np.bincount(g, weights=v.imag, minlength=self.n_glob)
        return out

    def condense_rhs(self, r_int, r_glob):
        y = np.einsum("kij,kj->ki", self.inv, r_int)
        return y, r_glob - self._scatter(np.einsum("kij,kj->ki", self.Ali, y))

    def solve(self, r_int, r_glob):
        y, rhs = self.condense_rhs(r_int, r_glob)
        lam = solve(self.fact, rhs)
        loc = np.where(self.gidx >= 0, lam[np.maximum(self.gidx, 0)], 0.0)
        return y - np.einsum("kij,kj->ki", self.Z, loc), lam


# -- slab operator -----------------------------------------------------------------
class SlabDiscretization:
    """Slab-independent operators and data handling for one mesh and degree."""

    def __init__(self, space: SlabSpace, params: FormParams, problem: ProblemSpec,
                 forcing_degree: Optional[int] = None):
        self.space = space
        self.params = params
        self.problem = problem
        self.mesh = space.mesh
        self.k = space.k
        self.T_modes = space.n_modes
        self.ed = ElementData(space)
        self.forcing_degree = forcing_degree or min(2 * (3 * self.k + 2), 40)
        ne = self.mesh.n_elements
        nS = space.nS
        self.nm = space.n_multipliers
        self.nSa = nS + self.nm
        self.nx = space.nx
        self.nL = self.nSa - self.nx

        A_ee, A_ef, A_ff = viscous_blocks(self.ed, params.alpha)
        S = np.zeros((ne, self.nSa, self.nSa))
        assemble_spatial(space, params.nu * A_ee, params.nu * A_ef,
                         params.nu * A_ef.transpose(0, 1, 3, 2), params.nu * A_ff, out=S)
        assemble_spatial(space, B=pressure_blocks(self.ed), out=S)
        if self.nm:
            m = pressure_mean_vector(self.ed)
            S[:, space.local_p(), nS] = m
            S[:, nS, space.local_p()] = m
        self.S_lin = S
        self.E = np.zeros((ne, self.nSa))
        self.E[:, :space.nu] = np.abs(self.ed.det)[:, None]

        self.T, self.psi0, self.psi1, self.sq, self.wq, self.psiq = time_matrices(self.k)

        g = space.element_global_map()
        if self.nm:
            g = np.concatenate([g, np.full((ne, 1), space.n_facet_dofs)], axis=1)
        self.gmap = g
        self.n_global = space.n_global
        fac = self.mesh.element_facets
        self._fac = fac

        self.dirichlet_facets = np.flatnonzero(space.dirichlet)
        self.neumann_facets = np.flatnonzero(self.mesh.neumann_mask)
        self._setup_modes()

    # -- packing ------------------------------------------------------------------
    def gather(self, state: SlabState) -> np.ndarray:
        """Local natural-order vectors ``(nE, T, nSa)`` of a slab state."""
        sp_ = self.space
        ne, T = self.mesh.n_elements, self.T_modes
        X = np.zeros((ne, T, self.nSa))
        X[:, :, :sp_.nu] = state.u.reshape(ne, T, sp_.nu)
        X[:, :, sp_.nu:sp_.nx] = state.p
        for e in range(3):
            F = self._fac[:, e]
            X[:, :, sp_.local_ubar(e)] = state.ubar[F].reshape(ne, T, sp_.nfacet_u)
            X[:, :, sp_.local_pbar(e)] = state.pbar[F]
        if self.nm:
            X[:, :, sp_.nS] = state.lam.reshape(T, self.nm)[None, :, 0]
        return X

    def pack_global(self, state: SlabState) -> np.ndarray:
        sp_ = self.space
        T = self.T_modes
        G = np.zeros((T, self.n_global))
        off = sp_.facet_offset
        free = ~sp_.dirichlet
        fi = np.flatnonzero(free)
        G[:, off[fi, None] + np.arange(sp_.nfacet_u)] = \
            state.ubar[fi].reshape(len(fi), T, -1).transpose(1, 0, 2)
        poff = np.where(sp_.dirichlet, off, off + sp_.nfacet_u)
        G[:, poff[:, None] + np.arange(sp_.nf)] = state.pbar.transpose(1, 0, 2)
        if self.nm:
            G[:, sp_.n_facet_dofs:] = state.lam.reshape(T, self.nm)
        return G

    def add_global(self, state: SlabState, G: np.ndarray, scale: float = 1.0) -> None:
        sp_ = self.space
        T = self.T_modes
        off = sp_.facet_offset
        fi = np.flatnonzero(~sp_.dirichlet)
        state.ubar[fi] += scale * G[:, off[fi, None] + np.arange(sp_.nfacet_u)] \
            .transpose(1, 0, 2).reshape(len(fi), T, 2, sp_.nf)
        poff = np.where(sp_.dirichlet, off, off + sp_.nfacet_u)
        state.pbar += scale * G[:, poff[:, None] + np.arange(sp_.nf)].transpose(1, 0, 2)
        if self.nm:
            state.lam += scale * G[:, sp_.n_facet_dofs:].reshape(-1)

    def add_interior(self, state: SlabState, Xi: np.ndarray, scale: float = 1.0) -> None:
        """Add interior corrections ``(nE, T, nx)`` to element unknowns."""
        sp_ = self.space
        ne, T = self.mesh.n_elements, self.T_modes
        state.u += scale * Xi[:, :, :sp_.nu].reshape(ne, T, 2, sp_.nk)
        state.p += scale * Xi[:, :, sp_.nu:]

    def scatter_trace(self, R: np.ndarray) -> np.ndarray:
        """Sum local trace rows ``(nE, T, nL)`` into global rows ``(T, n_global)``."""
        valid = self.gmap >= 0
        g = self.gmap[valid]
        out = np.zeros((self.T_modes, self.n_global))
        for i in range(self.T_modes):
            out[i] = np.bincount(g, weights=R[:, i, :][valid], minlength=self.n_global)
        return out

    # -- data ---------------------------------------------------------------------
    def dirichlet_values(self, t0: float, t1: float) -> np.ndarray:
        if len(self.dirichlet_facets) == 0:
            return np.zeros((0, self.T_modes, 2, self.space.nf))
        return interpolate_facet(self.problem.boundary_velocity, self.space, t0, t1,
                                 facets=self.dirichlet_facets,
                                 degree=self.forcing_degree)

    def rhs(self, u_prev: np.ndarray, t0: float, t1: float):
        """Right-hand side: interior rows ``(nE, T, nx)`` and global rows ``(T, n_global)``."""
        sp_ = self.space
        ne, T = self.mesh.n_elements, self.T_modes
        dt = t1 - t0
        det = np.abs(self.ed.det)
        Fx = np.zeros((ne, T, self.nx))
        fu = interpolate_element(self.problem.forcing, sp_, t0, t1, self.forcing_degree)
        Fx[:, :, :sp_.nu] = dt * det[:, None, None] * fu.reshape(ne, T, sp_.nu)
        Fx[:, :, :sp_.nu] += self.psi0[None, :, None] * \
            (det[:, None] * u_prev.reshape(ne, sp_.nu))[:, None, :]
        FG = np.zeros((T, self.n_global))
        nf = self.neumann_facets
        if len(nf):
            normals = self.mesh.facet_normals[nf].T[:, :, None]
            h = interpolate_facet(lambda x, y, t: self.problem.traction(x, y, t, normals),
                                  sp_, t0, t1, facets=nf, degree=self.forcing_degree)
            h *= dt * self.mesh.facet_lengths[nf][:, None, None, None]
            cols = sp_.facet_offset[nf, None] + np.arange(sp_.nfacet_u)
            FG[:, cols] += h.reshape(len(nf), T, -1).transpose(1, 0, 2)
        return Fx, FG

    # -- operator application -------------------------------------------------------
    def convecting_velocity(self, u: np.ndarray, q: int) -> np.ndarray:
        return np.einsum("i,kica->kca", self.psiq[:, q], u)

    def _convection_matrix(self, w: np.ndarray, elements=slice(None)) -> np.ndarray:
        ed = self.ed if elements == slice(None) else self.ed.subset(elements)
        blocks = convection_blocks(ed, w[elements])
        out = np.zeros((len(ed.det), self.nSa, self.nSa))
        return assemble_spatial(self.space, *blocks, out=out)

    def apply(self, X: np.ndarray, w_u: Optional[np.ndarray], dt: float) -> np.ndarray:
        """``A(w) X`` for local vectors ``X (nE, T, nSa)``."""
        Y = np.einsum("ij,kl,kjl->kil", self.T, self.E, X)
        Y += dt * np.einsum("kab,kib->kia", self.S_lin, X)
        if w_u is None or not self.problem.convection:
            return Y
        for q in range(len(self.wq)):
            w = self.convecting_velocity(w_u, q)
            Xq = np.einsum("i,kil->kl", self.psiq[:, q], X)
            OX = apply_velocity_blocks(self.space, convection_blocks(self.ed, w), Xq)
            Y += dt * self.wq[q] * self.psiq[:, q][None, :, None] * OX[:, None, :]
        return Y

    def averaged_convection(self, w_u: np.ndarray) -> np.ndarray:
        ne = self.mesh.n_elements
        O = np.zeros((ne, self.nSa, self.nSa))
        if w_u is None or not self.problem.convection:
            return O
        for q in range(len(self.wq)):
            w = self.convecting_velocity(w_u, q)
            for c0 in range(0, ne, CHUNK):
                c = slice(c0, min(c0 + CHUNK, ne))
                O[c] += self.wq[q] * self._convection_matrix(w, c)
        return O

    def local_spacetime(self, w_u: Optional[np.ndarray], dt: float) -> np.ndarray:
        """Full local space-time matrices ``(nE, T, nSa, T, nSa)`` (natural order)."""
        ne, T, n = self.mesh.n_elements, self.T_modes, self.nSa
        L = np.zeros((ne, T, n, T, n))
        d = np.arange(n)
        for i in range(T):
            for j in range(T):
                L[:, i, d, j, d] += self.T[i, j] * self.E
            L[:, i, :, i, :] += dt * self.S_lin
        if w_u is not None and self.problem.convection:
            for q in range(len(self.wq)):
                O = self._convection_matrix(self.convecting_velocity(w_u, q))
                pq = self.psiq[:, q]
                L += dt * self.wq[q] * np.einsum("i,j,kab->kiajb", pq, pq, O)
        return L

    # -- preconditioners -------------------------------------------------------------
    def _setup_modes(self):
        lam, V = np.linalg.eig(self.T)
        tol = 1e-10 * np.abs(lam).max()
        real = [m for m in range(len(lam)) if abs(lam[m].imag) <= tol]
        pos = [m for m in range(len(lam)) if lam[m].imag > tol]
        cols = [V[:, m].real for m in real] + [V[:, m] for m in pos]
        full = np.column_stack(cols + [np.conj(V[:, m]) for m in pos]).astype(complex)
        self.mode_values = np.array([lam[m].real for m in real] + [lam[m] for m in pos])
        self.mode_paired = np.array([False] * len(real) + [True] * len(pos))
        self.V = full[:, :len(cols)]
        self.Vinv = np.linalg.inv(full)[:len(cols)]

    def direct_system(self, w_u, dt) -> CondensedSystem:
        ne, T, n, nx = self.mesh.n_elements, self.T_modes, self.nSa, self.nx
        L = self.local_spacetime(w_u, dt).reshape(ne, T * n, T * n)
        interior = (np.arange(T)[:, None] * n + np.arange(nx)[None, :]).ravel()
        trace = (np.arange(T)[:, None] * n + np.arange(nx, n)[None, :]).ravel()
        perm = np.concatenate([interior, trace])
        L = L[:, perm[:, None], perm[None, :]]
        g = self.gmap
        gst = np.where(g[:, None, :] >= 0,
                       np.arange(T)[None, :, None] * self.n_global + g[:, None, :], -1)
        return CondensedSystem(L, T * nx, gst.reshape(ne, -1), T * self.n_global)

    def modal_systems(self, w_u, dt) -> list:
        Kbar = dt * (self.S_lin + self.averaged_convection(w_u))
        out = []
        diagE = np.einsum("kl,lm->klm", self.E, np.eye(self.nSa))
        for d, paired in zip(self.mode_values, self.mode_paired):
            L = d * diagE + Kbar
            if not paired:
                L = L.real
            out.append(CondensedSystem(L, self.nx, self.gmap, self.n_global))
        return out

    def solve_direct(self, system: CondensedSystem, Rx, RG):
        ne, T = self.mesh.n_elements, self.T_modes
        x, lam = system.solve(Rx.reshape(ne, -1), RG.reshape(-1))
        return x.reshape(ne, T, self.nx), lam.reshape(T, self.n_global)

    def solve_modal(self, systems: list, Rx, RG):
        Rx_t = np.einsum("mi,kil->kml", self.Vinv, Rx)
        RG_t = self.Vinv @ RG
        dx = np.zeros(Rx.shape)
        dG = np.zeros(RG.shape)
        for m, (system, paired) in enumerate(zip(systems, self.mode_paired)):
            rx, rg = Rx_t[:, m], RG_t[m]
            if not paired:
                rx, rg = rx.real, rg.real
            y, lam = system.solve(rx, rg)
            weight = 2.0 if paired else 1.0
            dx += weight * np.real(self.V[:, m][None, :, None] * y[:, None, :])
            dG += weight * np.real(self.V[:, m][:, None] * lam[None, :])
        return dx, dG

    # -- residual ---------------------------------------------------------------------
    def residual(self, state: SlabState, Fx, FG, w_u=None):
        """Rows of ``F - A(w) X`` (``w`` defaults to the state's velocity).

        Returns ``(Rx, RG, scale)`` with ``scale = max(|F|, |A(w) X|)``.
        """
        X = self.gather(state)
        Y = self.apply(X, state.u if w_u is None else w_u, state.dt)
        YG = self.scatter_trace(Y[:, :, self.nx:])
        Rx = Fx - Y[:, :, :self.nx]
        RG = FG - YG
        scale = max(np.sqrt(np.sum(Fx ** 2) + np.sum(FG ** 2)),
                    np.sqrt(np.sum(Y[:, :, :self.nx] ** 2) + np.sum(YG ** 2)))
        return Rx, RG, scale

    def velocity_norm(self, u: np.ndarray, dt: float) -> float:
        return float(np.sqrt(dt * np.einsum("k,kica,kica->", np.abs(self.ed.det), u, u)))


# -- state initialisation ----------------------------------------------------------
def initial_state(disc: SlabDiscretization, n: int, t0: float, t1: float,
                  u_prev: np.ndarray, previous: Optional[SlabState] = None) -> SlabState:
    """Initial iterate: the incoming trace held constant in time."""
    state = disc.space.zero_state(n, t0, t1)
    state.u_prev = u_prev.copy()
    state.u[:, 0] = u_prev
    if previous is not None:
        p1 = disc.psi1
        state.p[:, 0] = np.einsum("i,kib->kb", p1, previous.p)
        state.ubar[:, 0] = np.einsum("i,ficd->fcd", p1, previous.ubar)
        state.pbar[:, 0] = np.einsum("i,fid->fd", p1, previous.pbar)
        if disc.nm:
            lam = previous.lam.reshape(disc.T_modes, disc.nm)
            state.lam[:disc.nm] = p1 @ lam
    df = disc.dirichlet_facets
    if len(df):
        state.ubar[df] = disc.dirichlet_values(t0, t1)
    return state


def solve_slab_nonlinear(disc: SlabDiscretization, u_prev: np.ndarray, n: int,
                         t0: float, t1: float, settings: NonlinearSettings,
                         previous: Optional[SlabState] = None,
                         cache: Optional[dict] = None) -> SlabState:
    """Picard iteration on one slab.

    Stops when the relative velocity increment (slab L2(L2) norm) drops below
    ``settings.tolerance`` and the scaled residual is at most
    ``residual_factor * tolerance``.  ``cache`` carries the modal
    preconditioner between slabs of equal length.
    """
    start = time.perf_counter()
    method = settings.resolve_method(disc.mesh.n_elements)
    state = initial_state(disc, n, t0, t1, u_prev, previous)
    dt = t1 - t0
    Fx, FG = disc.rhs(u_prev, t0, t1)
    report = SlabReport(n)
    linear = not disc.problem.convection
    cache = {} if cache is None else cache
    systems = None
    if method == "modal":
        systems = cache.get("modal") if cache.get("dt") == dt else None
        if systems is None:
            systems = _build(disc.modal_systems, state.u, dt, n)
            report.factorizations += 1
    tol = settings.tolerance
    Rx, RG, scale = disc.residual(state, Fx, FG)
    last_inc = np.inf
    increment = res = np.inf
    accel = _Anderson(settings.anderson_depth if method == "modal" else 0)
    for it in range(1, settings.max_iterations + 1):
        if method == "direct":
            system = _build(disc.direct_system, state.u, dt, n)
            report.factorizations += 1
            dx, dG = disc.solve_direct(system, Rx, RG)
        else:
            dx, dG = disc.solve_modal(systems, Rx, RG)
        dx, dG = accel.step(dx, dG, settings.relaxation)
        disc.add_interior(state, dx)
        disc.add_global(state, dG)
        du = dx[:, :, :disc.space.nu].reshape(state.u.shape)
        unorm = disc.velocity_norm(state.u, dt)
        inc_abs = disc.velocity_norm(du, dt)
        increment = inc_abs / unorm if unorm > 0 else inc_abs
        Rx, RG, scale = disc.residual(state, Fx, FG)
        res = float(np.sqrt(np.sum(Rx ** 2) + np.sum(RG ** 2)) / scale) if scale > 0 else 0.0
        rec = IterationRecord(n, it, increment, res)
        report.iterations.append(rec)
        log.debug(rec.line())
        if (increment < tol or linear) and res <= settings.residual_factor * tol:
            break
        if method == "modal" and it > 1 and increment > settings.refactor_ratio * last_inc:
            systems = _build(disc.modal_systems, state.u, dt, n)
            report.factorizations += 1
            accel.reset()
        last_inc = increment
    else:
        raise SlabSolveError(
            f"slab {n}: Picard iteration did not converge in "
            f"{settings.max_iterations} iterations (increment {increment:.3e}, "
            f"residual {res:.3e})", slab=n, increment=increment, residual=res)
    if method == "modal":
        cache.update(modal=systems, dt=dt)
    report.seconds = time.perf_counter() - start
    state.report = report
    for rec in report.iterations:
        log.info(rec.line())
    return state


class _Anderson:
    """Anderson mixing of the defect-correction updates ``g = P^-1 (F - A(X) X)``.

    With depth 0 this is plain (relaxed) defect correction.  The history is
    cleared whenever the preconditioner changes.
    """

    def __init__(self, depth: int):
        self.depth = depth
        self.reset()

    def reset(self):
        self.dX, self.dG = [], []
        self.prev_g = None
        self.prev_step = None

    def step(self, dx, dG, relaxation: float = 1.0):
        shapes = (dx.shape, dG.shape)
        g = np.concatenate([dx.ravel(), dG.ravel()])
        if self.depth == 0:
            step = relaxation * g
        else:
            if self.prev_g is not None:
                self.dG.append(g - self.prev_g)
                self.dX.append(self.prev_step)
                if len(self.dG) > self.depth:
                    self.dG.pop(0)
                    self.dX.pop(0)
            step = relaxation * g
            if self.dG:
                Gm = np.column_stack(self.dG)
                gamma = np.linalg.lstsq(Gm, g, rcond=1e-12)[0]
                step = step - (np.column_stack(self.dX) + relaxation * Gm) @ gamma
            self.prev_g = g
            self.prev_step = step
        n = dx.size
        return step[:n].reshape(shapes[0]), step[n:].reshape(shapes[1])


def _build(fn, u, dt, n):
    try:
        return fn(u, dt)
    except SingularMatrixError as exc:
        raise SlabSolveError(f"slab {n}: singular slab system ({exc}); check alpha "
                             "and the boundary conditions", slab=n) from exc


def advance(state: SlabState) -> np.ndarray:
    """Trace u(t_{n+1}^-) of a solved slab, the next slab's incoming data."""
    return np.einsum("i,kica->kca", make_basis("interval", state.space.k).eval([[1.0]])[:, 0],
                     state.u)


# -- whole runs ----------------------------------------------------------------------
def run_simulation(problem: ProblemSpec, mesh: SpatialMesh, partition: TimePartition,
                   settings: Optional[NonlinearSettings] = None, k: int = 2,
                   alpha: Optional[float] = None,
                   callback: Optional[Callable[[SlabState], None]] = None,
                   keep_states: bool = True) -> list:
    """Solve all slabs in order; returns the slab states (if ``keep_states``).

    The initial velocity is the divergence-free L2 projection of
    ``problem.initial_velocity``.
    """
    from .projections import project_divfree

    settings = settings or NonlinearSettings()
    if any(s is not None and s != "boundary" for s in mesh.boundary_sides):
        mesh = mesh.with_boundary_conditions(problem.bc)
    space = SlabSpace(mesh, k)
    params = FormParams(problem.nu, k, alpha)
    disc = SlabDiscretization(space, params, problem, settings.forcing_degree)
    t0 = float(partition.t_levels[0])
    u_prev = project_divfree(lambda x, y: problem.initial_velocity(x, y, t0), space,
                             boundary="self")
    states = []
    cache: dict = {}
    previous = None
    for n in range(partition.n_slabs):
        a, b = partition.slab(n)
        try:
            state = solve_slab_nonlinear(disc, u_prev, n, a, b, settings, previous, cache)
        except SlabSolveError:
            raise
        except Exception as exc:
            raise SlabSolveError(f"slab {n}: {exc}", slab=n) from exc
        if callback is not None:
            callback(state)
        if keep_states:
            states.append(state)
        u_prev = advance(state)
        previous = state
    return states


# -- linear slab systems (for inspection and equivalence checks) --------------------
@dataclass
class SlabSystem:
    """Condensed linear slab system for a frozen convecting field."""

    disc: SlabDiscretization
    condensed: CondensedSystem
    state0: SlabState
    Fx: np.ndarray
    FG: np.ndarray
    w_u: Optional[np.ndarray]

    @property
    def matrix(self):
        return self.condensed.matrix

    def rhs(self):
        Rx, RG = self.residual(self.state0)
        return self.condensed.condense_rhs(Rx.reshape(len(Rx), -1), RG.reshape(-1))[1]

    def residual(self, state):
        return self.disc.residual(state, self.Fx, self.FG, w_u=self._w())[:2]

    def _w(self):
        return self.w_u if self.w_u is not None else np.zeros_like(self.state0.u)

    def solve(self) -> SlabState:
        Rx, RG = self.residual(self.state0)
        dx, dG = self.disc.solve_direct(self.condensed, Rx, RG)
        state = self.state0.copy()
        self.disc.add_interior(state, dx)
        self.disc.add_global(state, dG)
        return state


def assemble_slab(disc: SlabDiscretization, w_u: Optional[np.ndarray], u_prev: np.ndarray,
                  n: int, t0: float, t1: float) -> SlabSystem:
    """Linear slab system with convection frozen at ``w_u`` (``None`` for Stokes)."""
    state0 = initial_state(disc, n, t0, t1, np.zeros_like(u_prev))
    state0.u[:] = 0.0
    Fx, FG = disc.rhs(u_prev, t0, t1)
    w = w_u if w_u is not None else np.zeros_like(state0.u)
    try:
        cond = disc.direct_system(w, t1 - t0)
    except SingularMatrixError as exc:
        raise SlabSolveError(f"slab {n}: singular condensed matrix ({exc})", slab=n) from exc
    return SlabSystem(disc, cond, state0, Fx, FG, w_u)


def monolithic_solve(system: SlabSystem) -> SlabState:
    """Solve the uncondensed slab system (all element and facet unknowns) at once."""
    disc = system.disc
    ne, T, n, nx = disc.mesh.n_elements, disc.T_modes, disc.nSa, disc.nx
    w = system._w()
    L = disc.local_spacetime(w, system.state0.dt).reshape(ne, T * n, T * n)
    n_glob = T * disc.n_global
    # global numbering: facets/multipliers first, then element interiors
    loc = np.zeros((ne, T, n), dtype=np.int64)
    g = disc.gmap
    loc[:, :, nx:] = np.where(g[:, None, :] >= 0,
                              np.arange(T)[None, :, None] * disc.n_global + g[:, None, :], -1)
    loc[:, :, :nx] = n_glob + np.arange(ne * T * nx).reshape(ne, T, nx)
    loc = loc.reshape(ne, -1)
    N = n_glob + ne * T * nx
    rows = np.broadcast_to(loc[:, :, None], L.shape)
    cols = np.broadcast_to(loc[:, None, :], L.shape)
    keep = (rows >= 0) & (cols >= 0)
    A = sp.csc_matrix((L[keep], (rows[keep], cols[keep])), shape=(N, N))
    Rx, RG = system.residual(system.state0)
    b = np.concatenate([RG.reshape(-1), Rx.reshape(-1)])
    x = solve(factor_sparse(A), b)
    state = system.state0.copy()
    disc.add_global(state, x[:n_glob].reshape(T, disc.n_global))
    disc.add_interior(state, x[n_glob:].reshape(ne, T, nx))
    return state

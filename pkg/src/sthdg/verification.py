"""Error measurement, convergence studies and property harnesses."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .fem_core import make_basis, make_quadrature
from .forms import (ElementData, FieldTraces, FormParams, assemble_spatial, default_degrees,
                    eval_a_h, eval_b_h, eval_o_h, facet_jumps, norm_1ph, norm_v_blocks,
                    pressure_blocks, viscous_blocks)
from .geometry import build_structured_mesh, uniform_time_partition
from .problems import ProblemSpec
from .projections import DivFreeProjector, project_temporal_dg
from .slab_solver import CondensedSystem, NonlinearSettings, run_simulation
from .spaces import SlabSpace, SlabState, interpolate_spatial, time_basis_values

EXACT = "exact"


# -- errors ---------------------------------------------------------------------------
@dataclass
class ErrorRow:
    cells: int
    slabs: int
    vel_err_vprime: float
    p_err_l2l2: float
    final_l2: float
    jump_sum: float
    iterations: int = 0
    seconds: float = 0.0


@dataclass
class ErrorReport:
    k: int
    rows: list = field(default_factory=list)
    diagnostics: list = field(default_factory=list)

    @staticmethod
    def _rate(a, b):
        if a <= 1e-12 and b <= 1e-12:
            return EXACT
        if b <= 0.0:
            return math.inf
        return math.log2(a / b)

    def rates(self, name: str) -> list:
        vals = [getattr(r, name) for r in self.rows]
        return [None] + [self._rate(a, b) for a, b in zip(vals[:-1], vals[1:])]

    def table(self) -> list:
        out = []
        vr, pr = self.rates("vel_err_vprime"), self.rates("p_err_l2l2")
        for r, a, b in zip(self.rows, vr, pr):
            out.append({"k": self.k, "cells_per_slab": r.cells, "n_slabs": r.slabs,
                        "vel_err_vprime": r.vel_err_vprime, "vel_rate": a,
                        "p_err_l2l2": r.p_err_l2l2, "p_rate": b})
        return out

    def to_csv(self, path, append: bool = False) -> None:
        cols = ["k", "cells_per_slab", "n_slabs", "vel_err_vprime", "vel_rate", "p_err_l2l2", "p_rate"]
        with open(path, "a" if append else "w", newline="") as fh:
            w = csv.writer(fh)
            if not append:
                w.writerow(cols)
            for row in self.table():
                w.writerow([_fmt(row[c]) for c in cols])


def _fmt(v):
    if v is None:
        return "-"
    if isinstance(v, str):
        return v
    if isinstance(v, (int, np.integer)):
        return str(v)
    return f"{v:.6e}"


class ErrorAccumulator:
    """Accumulates space-time error integrals slab by slab (usable as a solver callback)."""

    def __init__(self, problem: ProblemSpec, space: SlabSpace, degree: Optional[int] = None):
        if problem.exact is None:
            raise ValueError("error measurement needs an exact solution")
        self.problem = problem
        self.space = space
        k = space.k
        deg = degree or 2 * k + 6
        self.ed = ElementData(space, element_degree=deg, facet_degree=deg)
        self.qt = make_quadrature("interval", deg)
        self.psi = time_basis_values(k, self.qt.points[:, 0])
        self.pure_dirichlet = space.mesh.pure_dirichlet
        self.vel2 = 0.0
        self.p2 = 0.0
        self.jump2 = 0.0
        self.final2 = 0.0
        self.iterations = 0
        self.seconds = 0.0

    def _pressure_mean(self, p, W):
        return np.einsum("kq,kq->", p, W) / W.sum()

    def __call__(self, state: SlabState) -> None:
        ed, ex = self.ed, self.problem.exact
        fac = ed.mesh.element_facets
        X, XE = ed.X, ed.XE
        h = ed.h
        if state.report is not None:
            self.iterations += state.report.n_iterations
            self.seconds += state.report.seconds
        for r, s in enumerate(self.qt.points[:, 0]):
            t = state.t0 + s * state.dt
            psi = self.psi[:, r]
            u = np.einsum("i,kica->kca", psi, state.u)
            ub = np.einsum("i,ficd->fcd", psi, state.ubar)
            p = np.einsum("i,kib->kb", psi, state.p)
            gu = np.einsum("kca,kaqi->kqci", u, ed.dphi)
            gex = np.moveaxis(ex.gradient(X[..., 0], X[..., 1], t), (0, 1), (-2, -1))
            vol = np.einsum("kqci,kq->", (gex - gu) ** 2, ed.W)
            uE = np.einsum("kca,kear->kerc", u, ed.phiE)
            ubE = np.einsum("kecd,dr->kerc", ub[fac], ed.mu)
            jump = np.einsum("kerc,ker->k", (uE - ubE) ** 2, ed.WE)
            gexE = np.moveaxis(ex.gradient(XE[..., 0], XE[..., 1], t), (0, 1), (-2, -1))
            guE = np.einsum("kca,keari->kerci", u, ed.dphiE)
            dn = np.einsum("kerci,kei->kerc", gexE - guE, ed.normal)
            ngrad = np.einsum("kerc,ker->k", dn ** 2, ed.WE)
            e2 = vol + np.sum(jump / h) + np.sum(ngrad * h)
            ph = np.einsum("kb,bq->kq", p, ed.psi_p)
            pex = ex.pressure(X[..., 0], X[..., 1], t)
            if self.pure_dirichlet:
                pex = pex - self._pressure_mean(pex, ed.W)
            ep = np.einsum("kq,kq->", (pex - ph) ** 2, ed.W)
            w = self.qt.weights[r] * state.dt
            self.vel2 += w * e2
            self.p2 += w * ep
        # jump of the error at t_n equals minus the jump of u_h
        psi0 = time_basis_values(self.space.k, [0.0])[:, 0]
        plus = np.einsum("i,kica->kca", psi0, state.u)
        self.jump2 += float(np.einsum("k,kca->", np.abs(ed.det), (plus - state.u_prev) ** 2))
        psi1 = time_basis_values(self.space.k, [1.0])[:, 0]
        minus = np.einsum("i,kica->kca", psi1, state.u)
        um = np.einsum("kca,aq->kqc", minus, ed.phi)
        uex = np.moveaxis(ex.velocity(X[..., 0], X[..., 1], state.t1), 0, -1)
        self.final2 = float(np.einsum("kqc,kq->", (uex - um) ** 2, ed.W))

    def row(self, cells: int, slabs: int) -> ErrorRow:
        return ErrorRow(cells, slabs, math.sqrt(self.vel2), math.sqrt(self.p2),
                        math.sqrt(self.final2), self.jump2, self.iterations, self.seconds)


def compute_errors(states: Sequence[SlabState], problem: ProblemSpec,
                   degree: Optional[int] = None) -> ErrorRow:
    """Velocity v'-norm error (L2 in time), pressure L2(L2) error, final L2 error, jump sum."""
    if problem.exact is None:
        raise ValueError("error measurement needs an exact solution")
    if not states:
        raise ValueError("no slab states given")
    acc = ErrorAccumulator(problem, states[0].space, degree)
    for s in states:
        acc(s)
    return acc.row(states[0].space.mesh.n_elements, len(states))


def mesh_for_cells(cells: int, problem: Optional[ProblemSpec] = None):
    nx = int(round(math.sqrt(cells / 2)))
    if 2 * nx * nx != cells:
        raise ValueError(f"{cells} cells is not a 2 n^2 structured triangulation")
    bc = problem.bc if problem is not None else None
    domain = problem.domain if problem is not None else (0.0, 1.0, 0.0, 1.0)
    return build_structured_mesh(nx, nx, domain, bc)


def convergence_study(problem: ProblemSpec, levels: Sequence[tuple], k: int,
                      settings: Optional[NonlinearSettings] = None,
                      alpha: Optional[float] = None, progress=None,
                      diagnostics: bool = False) -> ErrorReport:
    """Solve on each ``(cells, slabs)`` level and tabulate errors and rates.

    With ``diagnostics`` a :class:`ConservationMonitor` runs alongside and its
    report is stored per level in ``report.diagnostics``.
    """
    if len(levels) < 2:
        raise ValueError("a convergence study needs at least two levels")
    report = ErrorReport(k)
    for cells, slabs in levels:
        mesh = mesh_for_cells(cells, problem)
        space = SlabSpace(mesh, k)
        callbacks = [ErrorAccumulator(problem, space)]
        if diagnostics:
            callbacks.append(ConservationMonitor(problem, space,
                                                 FormParams(problem.nu, k, alpha)))
        try:
            run_simulation(problem, mesh, uniform_time_partition(problem.final_time, slabs),
                           settings, k=k, alpha=alpha,
                           callback=lambda s: [cb(s) for cb in callbacks], keep_states=False)
        except Exception as exc:
            raise RuntimeError(f"level ({cells}, {slabs}): {exc}") from exc
        report.rows.append(callbacks[0].row(cells, slabs))
        if diagnostics:
            report.diagnostics.append(callbacks[1].report)
        if progress is not None:
            progress(report.rows[-1])
    return report


def temporal_study(problem: ProblemSpec, nx: int, slabs: Sequence[int], k: int,
                   settings: Optional[NonlinearSettings] = None,
                   diagnostics: bool = False) -> ErrorReport:
    """Delta-t refinement on a fixed mesh."""
    mesh = build_structured_mesh(nx, nx, problem.domain, problem.bc)
    report = ErrorReport(k)
    space = SlabSpace(mesh, k)
    for n in slabs:
        acc = ErrorAccumulator(problem, space)
        mon = ConservationMonitor(problem, space, FormParams(problem.nu, k)) \
            if diagnostics else None

        def callback(state, acc=acc, mon=mon):
            acc(state)
            if mon is not None:
                mon(state)

        run_simulation(problem, mesh, uniform_time_partition(problem.final_time, n), settings,
                       k=k, callback=callback, keep_states=False)
        report.rows.append(acc.row(mesh.n_elements, n))
        if mon is not None:
            report.diagnostics.append(mon.report)
    return report


# -- conservation and energy ------------------------------------------------------------
@dataclass
class SlabDiagnostics:
    slab: int
    max_divergence: float
    max_normal_jump: float
    max_boundary_flux_mismatch: float
    velocity_scale: float
    energy_residual: float
    energy_scale: float
    trace_norm: float
    jump_norm: float
    dissipation: float

    @property
    def energy_relative(self) -> float:
        return self.energy_residual / self.energy_scale if self.energy_scale > 0 else 0.0


@dataclass
class DiagnosticsReport:
    slabs: list = field(default_factory=list)
    initial_norm: float = 0.0

    @property
    def max_divergence(self) -> float:
        return max((s.max_divergence / max(s.velocity_scale, 1e-300) for s in self.slabs),
                   default=0.0)

    @property
    def max_normal_jump(self) -> float:
        return max((s.max_normal_jump / max(s.velocity_scale, 1e-300) for s in self.slabs),
                   default=0.0)

    @property
    def max_energy_residual(self) -> float:
        return max((s.energy_relative for s in self.slabs), default=0.0)

    @property
    def trace_norms(self) -> list:
        return [self.initial_norm] + [s.trace_norm for s in self.slabs]

    @property
    def energy_nonincreasing(self) -> bool:
        n = self.trace_norms
        return all(b <= a * (1 + 1e-12) for a, b in zip(n[:-1], n[1:]))

    @property
    def stability_constant(self) -> float:
        """(|u_N^-|^2 + sum |[u]_n|^2 + 2 int (nu a_h + o_h)) / |u_0^-|^2."""
        if self.initial_norm == 0.0 or not self.slabs:
            return 0.0
        lhs = self.slabs[-1].trace_norm ** 2 + sum(s.jump_norm ** 2 for s in self.slabs) \
            + 2.0 * sum(s.dissipation for s in self.slabs)
        return lhs / self.initial_norm ** 2

    def lines(self) -> list:
        out = [f"max_divergence_relative {self.max_divergence:.6e}",
               f"max_normal_jump_relative {self.max_normal_jump:.6e}",
               f"max_energy_identity_residual_relative {self.max_energy_residual:.6e}",
               f"energy_nonincreasing {self.energy_nonincreasing}",
               f"stability_constant {self.stability_constant:.6e}"]
        for s in self.slabs:
            out.append(f"slab {s.slab:6d} div {s.max_divergence:.3e} jump {s.max_normal_jump:.3e}"
                       f" bflux {s.max_boundary_flux_mismatch:.3e}"
                       f" energy {s.energy_relative:.3e} trace {s.trace_norm:.10e}")
        return out


class ConservationMonitor:
    """Per-slab divergence, normal-jump and energy-identity diagnostics.

    The energy identity is the scheme tested with its own solution,
    ``V = (u_h, ubar_h - g_h)`` where ``g_h`` is the prescribed Dirichlet
    trace, and ``(p_h, pbar_h)``.  The polynomial terms are recomputed with
    finer quadrature than the solver uses.  The convective term carries the
    non-polynomial upwind weight ``|w.n|``, so it is evaluated with the
    scheme's own rules (the identity is a property of the discrete scheme), and
    the loads use the solver's data quadrature ``data_degree``.
    """

    def __init__(self, problem: ProblemSpec, space: SlabSpace, params: FormParams,
                 data_degree: Optional[int] = None):
        self.problem = problem
        self.space = space
        self.params = params
        k = space.k
        self.ed = ElementData(space, element_degree=3 * k + 4, facet_degree=3 * k + 6)
        self.qt = make_quadrature("interval", 3 * k + 4)
        self.psi = time_basis_values(k, self.qt.points[:, 0])
        self.psi0 = time_basis_values(k, [0.0])[:, 0]
        self.psi1 = time_basis_values(k, [1.0])[:, 0]
        self.ed_o = ElementData(space)
        self.qt_o = make_quadrature("interval", default_degrees(k)["time"])
        dd = data_degree or min(2 * (3 * k + 2), 40)
        self.ed_f = ElementData(space, element_degree=dd, facet_degree=dd)
        self.qt_f = make_quadrature("interval", dd)
        self.report = DiagnosticsReport()
        self._started = False
        mesh = space.mesh
        self.dir_mask = mesh.dirichlet_mask
        loc = np.full((mesh.n_facets, 2), -1)
        for e in range(3):
            F = mesh.element_facets[:, e]
            own = mesh.element_signs[:, e] > 0
            loc[F[own], 0] = e
            loc[F[~own], 1] = e
        self._owner_edge = loc[:, 0]

    def _mass_norm(self, u):
        return float(np.sqrt(np.einsum("k,kca->", np.abs(self.ed.det), u ** 2)))

    def __call__(self, state: SlabState) -> None:
        ed, pr = self.ed, self.problem
        mesh = self.space.mesh
        fac = mesh.element_facets
        if not self._started:
            self.report.initial_norm = self._mass_norm(state.u_prev)
            self._started = True
        nu, alpha = self.params.nu, self.params.alpha
        max_div = max_jump = max_bflux = scale = 0.0
        A = O = Bv = Bu = 0.0
        dir_edge = self.dir_mask[fac]
        neu_edge = mesh.neumann_mask[fac]
        for r in range(len(self.qt.weights)):
            psi = self.psi[:, r]
            u = np.einsum("i,kica->kca", psi, state.u)
            ub = np.einsum("i,ficd->fcd", psi, state.ubar)
            p = np.einsum("i,kib->kb", psi, state.p)
            pb = np.einsum("i,fid->fd", psi, state.pbar)
            g = np.where(self.dir_mask[:, None, None], ub, 0.0)
            U = FieldTraces(ed, u, ub, p, pb)
            V = FieldTraces(ed, u, ub - g)
            w = self.qt.weights[r] * state.dt
            A += w * nu * eval_a_h(ed, alpha, U, V)
            Bv += w * eval_b_h(ed, U, V)
            Bu += w * eval_b_h(ed, U, U)
            # pointwise conservation
            div = np.einsum("kqcc->kq", U.gu)
            max_div = max(max_div, float(np.abs(div).max()))
            scale = max(scale, float(np.abs(U.ue).max()), float(np.abs(U.uE).max()))
            un = np.einsum("kerc,kec->ker", U.uE, ed.normal * mesh.element_signs[..., None])
            jn = facet_jumps(mesh, un)
            if jn.size:
                max_jump = max(max_jump, float(np.abs(jn).max()))
            ubn = np.einsum("kerc,kec->ker", U.ubE, ed.normal)
            uen = np.einsum("kerc,kec->ker", U.uE, ed.normal)
            bmask = (dir_edge | neu_edge)
            if bmask.any():
                max_bflux = max(max_bflux, float(np.abs((uen - ubn)[bmask]).max()))
        if pr.convection:
            O = self._convective(state)
        Fr, H = self._loads(state, neu_edge)
        plus = np.einsum("i,kica->kca", self.psi0, state.u)
        minus = np.einsum("i,kica->kca", self.psi1, state.u)
        n1 = self._mass_norm(minus)
        jmp = self._mass_norm(plus - state.u_prev)
        n0 = self._mass_norm(state.u_prev)
        temporal = 0.5 * n1 ** 2 + 0.5 * jmp ** 2 - 0.5 * n0 ** 2
        # momentum tested with V plus continuity tested with -(p, pbar)
        res = temporal + A + O + Bv - Bu - Fr - H
        scale_e = max(abs(x) for x in (0.5 * n1 ** 2, 0.5 * n0 ** 2, A, O, Bv, Fr, H, 1e-300))
        self.report.slabs.append(SlabDiagnostics(
            state.n, max_div, max_jump, max_bflux, scale, abs(res), scale_e, n1, jmp,
            A + O))


    def _slab_fields(self, state, psi, ed):
        u = np.einsum("i,kica->kca", psi, state.u)
        ub = np.einsum("i,ficd->fcd", psi, state.ubar)
        g = np.where(self.dir_mask[:, None, None], ub, 0.0)
        return FieldTraces(ed, u, ub), FieldTraces(ed, u, ub - g)

    def _convective(self, state) -> float:
        total = 0.0
        for r, wq in enumerate(self.qt_o.weights):
            psi = time_basis_values(self.space.k, self.qt_o.points[r:r + 1, 0])[:, 0]
            U, V = self._slab_fields(state, psi, self.ed_o)
            total += wq * state.dt * eval_o_h(self.ed_o, U, U, V)
        return total

    def _loads(self, state, neu_edge):
        ed, pr = self.ed_f, self.problem
        psi_all = time_basis_values(self.space.k, self.qt_f.points[:, 0])
        Fr = H = 0.0
        for r, wq in enumerate(self.qt_f.weights):
            t = state.t0 + self.qt_f.points[r, 0] * state.dt
            U, _ = self._slab_fields(state, psi_all[:, r], ed)
            w = wq * state.dt
            f = pr.forcing(ed.X[..., 0], ed.X[..., 1], t)
            Fr += w * np.einsum("ckq,kqc,kq->", f, U.ue, ed.W)
            if neu_edge.any():
                hN = pr.traction(ed.XE[..., 0], ed.XE[..., 1], t,
                                 np.moveaxis(ed.normal, -1, 0)[:, :, :, None])
                H += w * np.einsum("cker,kerc,ker,ke->", hN, U.ubE, ed.WE, neu_edge)
        return Fr, H


def conservation_report(states: Sequence[SlabState], problem: ProblemSpec,
                        params: FormParams) -> DiagnosticsReport:
    if not states:
        raise ValueError("no slab states given")
    mon = ConservationMonitor(problem, states[0].space, params)
    for s in states:
        mon(s)
    return mon.report


# -- global spatial assembly helpers ---------------------------------------------------
def _global_layout(space: SlabSpace):
    """Global index of each local spatial entry, no Dirichlet elimination.

    Order: element velocities, element pressures, facet velocities, facet pressures.
    """
    mesh = space.mesh
    ne, nF = mesh.n_elements, mesh.n_facets
    NU, NP, NUB = ne * space.nu, ne * space.np, nF * space.nfacet_u
    idx = np.zeros((ne, space.nS), dtype=np.int64)
    idx[:, space.local_u()] = np.arange(NU).reshape(ne, -1)
    idx[:, space.local_p()] = NU + np.arange(NP).reshape(ne, -1)
    for e in range(3):
        F = mesh.element_facets[:, e]
        idx[:, space.local_ubar(e)] = NU + NP + F[:, None] * space.nfacet_u + \
            np.arange(space.nfacet_u)
        idx[:, space.local_pbar(e)] = NU + NP + NUB + F[:, None] * space.nf + np.arange(space.nf)
    sizes = dict(u=NU, p=NP, ubar=NUB, pbar=nF * space.nf)
    return idx, sizes


def _assemble(local: np.ndarray, idx: np.ndarray, N: int) -> sp.csr_matrix:
    rows = np.broadcast_to(idx[:, :, None], local.shape).ravel()
    cols = np.broadcast_to(idx[:, None, :], local.shape).ravel()
    A = sp.csr_matrix((local.ravel(), (rows, cols)), shape=(N, N))
    A.sum_duplicates()
    A.eliminate_zeros()
    return A


def local_spatial_matrices(space: SlabSpace, alpha: float) -> dict:
    """Local (nE, nS, nS) matrices of a_h, the v-norm Gram, b_h and the p-norm Gram."""
    ed = ElementData(space)
    ne, nS = space.mesh.n_elements, space.nS
    A_ee, A_ef, A_ff = viscous_blocks(ed, alpha)
    A = assemble_spatial(space, A_ee, A_ef, A_ef.transpose(0, 1, 3, 2), A_ff)
    G_ee, G_ef, G_ff = norm_v_blocks(ed)
    Gv = assemble_spatial(space, G_ee, G_ef, G_ef.transpose(0, 1, 3, 2), G_ff)
    # homogeneous Dirichlet data: the facet-velocity part of b_h is never used
    B_e, B_f, B_n = pressure_blocks(ed)
    Bl = assemble_spatial(space, B=(B_e, B_f, np.zeros_like(B_n)),
                          out=np.zeros((ne, nS, nS)))
    # p-norm Gram: element mass plus h_K |F| on facet pressures
    Gq = np.zeros((ne, nS, nS))
    P = space.local_p()
    Gq[:, P, P] = np.abs(ed.det)[:, None]
    lengths = space.mesh.facet_lengths[space.mesh.element_facets]
    for e in range(3):
        Pb = space.local_pbar(e)
        Gq[:, Pb, Pb] = (ed.h * lengths[:, e])[:, None]
    return dict(A=A, Gv=Gv, B=Bl, Gq=Gq)


def spatial_matrices(space: SlabSpace, alpha: float) -> dict:
    """Global a_h, v-norm Gram, b_h and p-norm Gram matrices (homogeneous Dirichlet).

    Velocity unknowns are element velocities and facet velocities on
    interior facets; pressure unknowns are element and facet pressures.
    """
    loc = local_spatial_matrices(space, alpha)
    idx, sizes = _global_layout(space)
    N = sum(sizes.values())
    free = np.repeat(space.mesh.facet_elements[:, 1] >= 0, space.nfacet_u)
    vsel = np.concatenate([np.arange(sizes["u"]),
                           sizes["u"] + sizes["p"] + np.flatnonzero(free)])
    qsel = np.concatenate([sizes["u"] + np.arange(sizes["p"]),
                           sizes["u"] + sizes["p"] + sizes["ubar"] + np.arange(sizes["pbar"])])
    m = {key: _assemble(val, idx, N) for key, val in loc.items()}
    return dict(A=m["A"][vsel][:, vsel], Gv=m["Gv"][vsel][:, vsel], B=m["B"][qsel][:, vsel],
                Gq=m["Gq"][qsel][:, qsel], n_element_pressure=sizes["p"])


def coercivity_constant(space: SlabSpace, alpha: Optional[float] = None) -> float:
    """min over (v, vb) of a_h(v, v) / |||v|||_v^2 (homogeneous Dirichlet)."""
    alpha = FormParams(1.0, space.k, alpha).alpha
    m = spatial_matrices(space, alpha)
    A, G = sp.csc_matrix(m["A"]), sp.csc_matrix(m["Gv"])
    if A.shape[0] <= 600:
        return float(sla.eigh(A.toarray(), G.toarray(), eigvals_only=True)[0])
    vals = spla.eigsh(A, k=1, M=G, sigma=0.0, which="LM", return_eigenvectors=False)
    return float(vals.min())


def infsup_constant(space: SlabSpace, drop_facet_pressure: bool = False,
                    dense: Optional[bool] = None) -> float:
    """Discrete inf-sup constant of b_h in the v- and p-norms (pure Dirichlet).

    beta^2 is the smallest nonzero eigenvalue of ``B Gv^-1 B^T x = mu Gq x``.
    The constant mode ``p = pbar = const`` lies in the kernel of b_h and is
    skipped; without facet pressures there is no kernel.
    """
    if not space.mesh.pure_dirichlet:
        raise ValueError("the inf-sup estimate is defined for pure Dirichlet meshes")
    n_zero = 0 if drop_facet_pressure else 1
    if dense is None:
        dense = space.mesh.n_elements <= 128
    if dense:
        m = spatial_matrices(space, 1.0)
        B, Gv, Gq = m["B"].toarray(), m["Gv"].toarray(), m["Gq"].toarray()
        if drop_facet_pressure:
            keep = np.arange(m["n_element_pressure"])
            B, Gq = B[keep], Gq[np.ix_(keep, keep)]
        S = B @ np.linalg.solve(Gv, B.T)
        mu = sla.eigh(S, Gq, eigvals_only=True)
        return float(np.sqrt(max(mu[n_zero], 0.0)))
    return _infsup_condensed(space, drop_facet_pressure, n_zero)


def _infsup_condensed(space: SlabSpace, drop_facet_pressure: bool, n_zero: int) -> float:
    """Shift-invert Lanczos on the generalized problem.

    ``(S + s Gq)^-1`` is applied through the saddle-point system
    ``[[Gv, B^T], [B, -s Gq]]``, statically condensed onto facet unknowns
    exactly as the flow solver does.  Gq is diagonal, so the problem is
    symmetrised with ``Gq^(1/2)``.
    """
    mesh = space.mesh
    ne, nF = mesh.n_elements, mesh.n_facets
    loc = local_spatial_matrices(space, 1.0)
    s = 1e-4
    L = loc["Gv"] + loc["B"] - s * loc["Gq"]
    nx = space.nx
    # global trace layout: [ubar on interior facets | pbar on all facets]
    interior = mesh.facet_elements[:, 1] >= 0
    uid = np.full(nF, -1)
    uid[interior] = np.arange(int(interior.sum()))
    n_ub = int(interior.sum()) * space.nfacet_u
    gidx = np.full((ne, space.nS - nx), -1, dtype=np.int64)
    for e in range(3):
        F = mesh.element_facets[:, e]
        ok = uid[F] >= 0
        cols = space.local_ubar(e) - nx
        gidx[np.ix_(ok, cols)] = uid[F[ok]][:, None] * space.nfacet_u + np.arange(space.nfacet_u)
        if not drop_facet_pressure:
            gidx[:, space.local_pbar(e) - nx] = n_ub + F[:, None] * space.nf + np.arange(space.nf)
    n_glob = n_ub + (0 if drop_facet_pressure else nF * space.nf)
    cs = CondensedSystem(L, nx, gidx, n_glob)

    P = space.local_p()
    d_p = np.abs(ElementData(space).det)
    sd_p = np.sqrt(np.repeat(d_p, space.np))
    n_pe = ne * space.np
    if drop_facet_pressure:
        sd_f = np.zeros(0)
    else:
        hK = mesh.element_diameters
        pbar_gram = np.zeros(nF)
        for e in range(3):
            np.add.at(pbar_gram, mesh.element_facets[:, e],
                      hK * mesh.facet_lengths[mesh.element_facets[:, e]])
        sd_f = np.sqrt(np.repeat(pbar_gram, space.nf))
    nq = n_pe + len(sd_f)

    def opinv(r):
        r = np.asarray(r).ravel()
        r_int = np.zeros((ne, nx))
        r_int[:, P] = -(r[:n_pe] * sd_p).reshape(ne, space.np)
        r_glob = np.zeros(n_glob)
        r_glob[n_ub:] = -r[n_pe:] * sd_f
        x_int, lam = cs.solve(r_int, r_glob)
        return np.concatenate([x_int[:, P].ravel() * sd_p, lam[n_ub:] * sd_f])

    OP = spla.LinearOperator((nq, nq), matvec=opinv, dtype=float)
    theta = spla.eigsh(OP, k=n_zero + 2, which="LM", return_eigenvectors=False, tol=1e-12)
    mu = np.sort(1.0 / theta - s)
    return float(np.sqrt(max(mu[n_zero], 0.0)))


def infsup_estimate(levels: Sequence[int], k: int, drop_facet_pressure: bool = False,
                    dense: Optional[bool] = None) -> list:
    """beta_h on structured n x n meshes of the unit square for each n in ``levels``."""
    if len(levels) < 2:
        raise ValueError("need at least two levels")
    out = []
    for n in levels:
        mesh = build_structured_mesh(n, n)
        if 2 * n * n > 2048:
            raise MemoryError("inf-sup estimate limited to 2048 cells")
        out.append(infsup_constant(SlabSpace(mesh, k), drop_facet_pressure, dense))
    return out


# -- inequality harness ------------------------------------------------------------------
@dataclass
class InequalityReport:
    id: str
    level: int
    samples: int
    worst_ratio: float


INEQUALITIES = ("sobolev_l6", "poincare", "ladyzhenskaya", "l3_interpolation",
                "facet_scaling_l4", "time_scaling_linf", "time_scaling_l4", "time_inverse")


def random_broken_fields(space: SlabSpace, n: int, rng: np.random.Generator) -> list:
    """Random broken P_k vector fields: localized, global and smooth samples.

    A third of the samples live on a single element and use the same reference
    coefficients on every mesh level (the worst case for scale-invariant
    ratios), a third have i.i.d. uniform coefficients everywhere, and the rest
    are projections of random low-frequency trigonometric fields.
    """
    ne, nk = space.mesh.n_elements, space.nk
    out = []
    for i in range(n):
        kind = i % 3
        if kind == 0:
            c = np.zeros((ne, 2, nk))
            K = int(rng.integers(0, 2))
            c[K] = rng.uniform(-1.0, 1.0, (2, nk))
        elif kind == 1:
            c = rng.uniform(-1.0, 1.0, (ne, 2, nk))
        else:
            a = rng.uniform(-1.0, 1.0, (2, 3, 3))
            ph = rng.uniform(0.0, 2 * np.pi, (2, 3, 3))

            def f(x, y, t, a=a, ph=ph):
                out = np.zeros((2,) + np.shape(x))
                for c_ in range(2):
                    for m in range(3):
                        for l in range(3):
                            out[c_] += a[c_, m, l] * np.sin(np.pi * ((m + 1) * x + l * y)
                                                            + ph[c_, m, l])
                return out

            c = interpolate_spatial(f, space, 0.0)
        if not np.any(c):
            c[0, 0, 1] = 1.0
        out.append(c)
    return out


def _lp_norm(ed, c, p):
    v = np.einsum("kca,aq->kqc", c, ed.phi)
    mag = np.sqrt((v ** 2).sum(-1))
    if np.isinf(p):
        return float(mag.max())
    return float(np.einsum("kq,kq->", mag ** p, ed.W) ** (1.0 / p))


def inequality_harness(levels: Sequence[int], k: int, samples: int = 200,
                       seed: int = 0, ids: Iterable[str] = INEQUALITIES) -> list:
    """Worst ratio (left side / right side) of each discrete inequality per level.

    Spatial levels are structured n x n meshes; temporal inequalities use
    slab lengths 1/n with random P_k polynomials in time.
    """
    if len(levels) < 2:
        raise ValueError("need at least two levels")
    ids = list(ids)
    reports = []
    for n in levels:
        rng = np.random.default_rng(seed)
        space = SlabSpace(build_structured_mesh(n, n), k)
        ed = ElementData(space, element_degree=6 * k + 2, facet_degree=4 * k + 2)
        fields = random_broken_fields(space, samples, rng)
        worst = {i: 0.0 for i in ids}
        for c in fields:
            l2 = _lp_norm(ed, c, 2)
            h1 = norm_1ph(ed, c)
            if h1 == 0.0:
                continue
            vals = {
                "sobolev_l6": _lp_norm(ed, c, 6) / h1,
                "poincare": l2 / h1,
                "ladyzhenskaya": _lp_norm(ed, c, 4) / math.sqrt(l2 * h1),
                "l3_interpolation": _lp_norm(ed, c, 3) / (l2 ** (2 / 3) * h1 ** (1 / 3)),
            }
            for key, v in vals.items():
                if key in worst:
                    worst[key] = max(worst[key], v)
        if "facet_scaling_l4" in worst:
            worst["facet_scaling_l4"] = _facet_scaling(space, ed, samples, rng)
        dt = 1.0 / n
        tq = make_quadrature("interval", 4 * k + 2)
        tb = make_basis("interval", k)
        dense = np.linspace(0.0, 1.0, 2001)[:, None]
        for _ in range(samples):
            a = rng.uniform(-1.0, 1.0, k + 1)
            v = a @ tb.eval(tq.points)
            dv = a @ tb.grad(tq.points)[:, :, 0] / dt
            l2 = math.sqrt(dt * np.sum(tq.weights * v ** 2))
            if l2 == 0.0:
                continue
            if "time_scaling_linf" in worst:
                linf = np.abs(a @ tb.eval(dense)).max()
                worst["time_scaling_linf"] = max(worst["time_scaling_linf"],
                                                 linf / (dt ** -0.5 * l2))
            if "time_scaling_l4" in worst:
                l4 = (dt * np.sum(tq.weights * v ** 4)) ** 0.25
                worst["time_scaling_l4"] = max(worst["time_scaling_l4"],
                                               l4 / (dt ** (0.25 - 0.5) * l2))
            if "time_inverse" in worst:
                ld = math.sqrt(dt * np.sum(tq.weights * dv ** 2))
                worst["time_inverse"] = max(worst["time_inverse"], ld / (l2 / dt))
        for key in ids:
            reports.append(InequalityReport(key, n, samples, float(worst[key])))
    return reports


def _facet_scaling(space, ed, samples, rng) -> float:
    """max ||mu||_{L4(dK)} / (h^{-1/4} ||mu||_{L2(dK)}) for random mu in P_k(dK)."""
    worst = 0.0
    for i in range(samples):
        K = int(rng.integers(0, space.mesh.n_elements))
        c = rng.uniform(-1.0, 1.0, (3, space.nf))
        vals = c @ ed.mu                                        # (3, nr)
        w = ed.WE[K]
        l2 = math.sqrt(np.sum(w * vals ** 2))
        l4 = np.sum(w * vals ** 4) ** 0.25
        worst = max(worst, l4 / (ed.h[K] ** -0.25 * l2))
    return worst


def inequality_growth(reports: Sequence[InequalityReport]) -> dict:
    """Largest ratio worst[level+1] / worst[level] for each inequality id."""
    by = {}
    for r in reports:
        by.setdefault(r.id, []).append(r.worst_ratio)
    return {k: max(b / a for a, b in zip(v[:-1], v[1:])) for k, v in by.items() if len(v) > 1}


def write_inequalities_csv(path, reports: Sequence) -> None:
    """Rows ``k, id, level, samples, worst_ratio`` from ``(k, InequalityReport)`` pairs."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["k", "id", "level", "samples", "worst_ratio"])
        for k, r in reports:
            w.writerow([k, r.id, r.level, r.samples, f"{r.worst_ratio:.12e}"])


# -- projection rates --------------------------------------------------------------------
def projection_study(f, levels: Sequence[int], k: int, degree: Optional[int] = None) -> dict:
    """L2 and h^-1-weighted facet errors of the div-free projection of ``f(x, y)``."""
    l2, facet = [], []
    for n in levels:
        space = SlabSpace(build_structured_mesh(n, n), k)
        deg = degree or 2 * k + 6
        ed = ElementData(space, element_degree=deg, facet_degree=deg)
        c = DivFreeProjector(space, "homogeneous", ed=ElementData(space))(f, degree=deg)
        uh = np.einsum("kca,aq->kqc", c, ed.phi)
        ex = np.moveaxis(f(ed.X[..., 0], ed.X[..., 1]), 0, -1)
        l2.append(math.sqrt(np.einsum("kqc,kq->", (ex - uh) ** 2, ed.W)))
        uE = np.einsum("kca,kear->kerc", c, ed.phiE)
        exE = np.moveaxis(f(ed.XE[..., 0], ed.XE[..., 1]), 0, -1)
        fe = np.einsum("kerc,ker->k", (exE - uE) ** 2, ed.WE)
        facet.append(math.sqrt(np.sum(fe / ed.h)))
    return {"l2": l2, "facet": facet}


def temporal_projection_errors(w, slabs: Sequence[int], k: int, T: float = 1.0) -> list:
    """L2(0, T) error of the piecewise temporal DG projection of a scalar ``w(t)``."""
    q = make_quadrature("interval", 2 * k + 8)
    out = []
    for N in slabs:
        err = 0.0
        edges = np.linspace(0.0, T, N + 1)
        for a, b in zip(edges[:-1], edges[1:]):
            c = project_temporal_dg(w, a, b, k)
            vals = c @ time_basis_values(k, q.points[:, 0])
            ex = np.array([w(a + s * (b - a)) for s in q.points[:, 0]])
            err += (b - a) * np.sum(q.weights * (ex - vals) ** 2)
        out.append(math.sqrt(err))
    return out


def observed_rates(errors: Sequence[float]) -> list:
    return [math.log2(a / b) for a, b in zip(errors[:-1], errors[1:])]

"""End-to-end acceptance checks; each test prints one PASS/FAIL line.

The benchmark studies take several minutes each on one core.
"""
import math

import numpy as np
import pytest

from sthdg import forms as F
from sthdg.forms import FormParams
from sthdg.geometry import NEUMANN, build_structured_mesh, uniform_time_partition
from sthdg.problems import (decay_problem, gradient_potential, manufactured_problem,
                            problem_from_exact, representable_problem, representable_solution,
                            vortex_velocity, with_extra_forcing)
from sthdg.projections import DivFreeProjector, project_divfree
from sthdg.slab_solver import (SlabDiscretization, assemble_slab, monolithic_solve,
                               run_simulation)
from sthdg.spaces import SlabSpace
from sthdg.verification import (EXACT, coercivity_constant, conservation_report,
                                convergence_study, inequality_growth, inequality_harness,
                                infsup_estimate, observed_rates, projection_study,
                                temporal_projection_errors, temporal_study)

BENCHMARK_LEVELS = [(128, 20), (512, 40), (2048, 80)]
REFERENCE_K2 = [8.6e-1, 2.1e-1, 5.2e-2]


def _fmt(values):
    return "[" + ", ".join(v if isinstance(v, str) else f"{v:.4g}" for v in values) + "]"


# -- shared runs ---------------------------------------------------------------------
@pytest.fixture(scope="module")
def benchmark_k2():
    return convergence_study(manufactured_problem(nu=1e-4), BENCHMARK_LEVELS, 2,
                             diagnostics=True)


@pytest.fixture(scope="module")
def benchmark_k3():
    return convergence_study(manufactured_problem(nu=1e-4), BENCHMARK_LEVELS, 3,
                             diagnostics=True)


@pytest.fixture(scope="module")
def decay_run():
    problem = decay_problem(vortex_velocity, nu=1e-2, final_time=1.2)
    states = run_simulation(problem, build_structured_mesh(4, 4),
                            uniform_time_partition(1.2, 24), k=2)
    return conservation_report(states, problem, FormParams(problem.nu, 2))


@pytest.fixture(scope="module")
def stokes_pair():
    """Pure-Dirichlet Stokes runs with and without a gradient added to the forcing."""
    base = problem_from_exact(representable_solution(2), 0.1, convection=False,
                              final_time=0.5)
    perturbed = with_extra_forcing(base, gradient_potential)
    mesh = build_structured_mesh(4, 4)
    out = []
    for problem in (base, perturbed):
        states = run_simulation(problem, mesh, uniform_time_partition(0.5, 4), k=2)
        out.append((states, conservation_report(states, problem, FormParams(problem.nu, 2))))
    return out


@pytest.fixture(scope="module")
def temporal_studies():
    return {k: temporal_study(representable_problem(k, nu=0.1, final_time=1.0), 2,
                              [4, 8, 16], k, diagnostics=True) for k in (1, 2, 3)}


# -- convergence on the travelling-wave benchmark ----------------------------------------
def test_benchmark_k2_rates_and_errors(benchmark_k2, verdict):
    vel = [r.vel_err_vprime for r in benchmark_k2.rows]
    vr = benchmark_k2.rates("vel_err_vprime")[-1]
    pr = benchmark_k2.rates("p_err_l2l2")[-1]
    ratios = [e / r for e, r in zip(vel, REFERENCE_K2)]
    ok = (1.85 <= vr <= 2.15 and 1.5 <= pr <= 2.3
          and all(1 / 3 <= q <= 3 for q in ratios))
    verdict("k=2 benchmark", ok,
            f"velocity errors {_fmt(vel)} (ratio to reference {_fmt(ratios)}), "
            f"velocity rate {vr:.3f} in [1.85, 2.15], pressure rate {pr:.3f} in [1.5, 2.3]")


def test_benchmark_k3_rate(benchmark_k3, verdict):
    vel = [r.vel_err_vprime for r in benchmark_k3.rows]
    rates = benchmark_k3.rates("vel_err_vprime")[1:]
    verdict("k=3 benchmark", 2.8 <= rates[-1] <= 3.2,
            f"velocity errors {_fmt(vel)}, rates {_fmt(rates)}, last in [2.8, 3.2]")


# -- conservation and energy -------------------------------------------------------------
def _all_diagnostics(benchmark_k2, benchmark_k3, decay_run, stokes_pair, temporal_studies):
    reports = list(benchmark_k2.diagnostics) + list(benchmark_k3.diagnostics) + [decay_run]
    reports += [rep for _, rep in stokes_pair]
    for study in temporal_studies.values():
        reports += study.diagnostics
    return reports


def test_pointwise_mass_conservation(benchmark_k2, benchmark_k3, decay_run, stokes_pair,
                                     temporal_studies, verdict):
    reps = _all_diagnostics(benchmark_k2, benchmark_k3, decay_run, stokes_pair,
                            temporal_studies)
    div = max(r.max_divergence for r in reps)
    jump = max(r.max_normal_jump for r in reps)
    verdict("mass conservation", div <= 1e-10 and jump <= 1e-10,
            f"{len(reps)} runs, max relative |div u| {div:.2e}, "
            f"max relative normal jump {jump:.2e} (<= 1e-10)")


def test_energy_identity_and_decay(benchmark_k2, benchmark_k3, decay_run, stokes_pair,
                                   temporal_studies, verdict):
    reps = _all_diagnostics(benchmark_k2, benchmark_k3, decay_run, stokes_pair,
                            temporal_studies)
    worst = max(r.max_energy_residual for r in reps)
    norms = decay_run.trace_norms
    ok = worst <= 1e-8 and decay_run.energy_nonincreasing and len(norms) - 1 >= 20
    verdict("energy identity", ok,
            f"max relative residual {worst:.2e} (<= 1e-8) over {len(reps)} runs; "
            f"unforced decay over {len(norms) - 1} slabs non-increasing: "
            f"{decay_run.energy_nonincreasing} ({norms[0]:.4f} -> {norms[-1]:.4f})")


def test_pressure_robustness(stokes_pair, verdict):
    (s0, _), (s1, _) = stokes_pair
    u0 = np.concatenate([s.u.ravel() for s in s0])
    u1 = np.concatenate([s.u.ravel() for s in s1])
    p0 = np.concatenate([s.p.ravel() for s in s0])
    p1 = np.concatenate([s.p.ravel() for s in s1])
    du = np.linalg.norm(u1 - u0) / np.linalg.norm(u0)
    dp = np.linalg.norm(p1 - p0) / np.linalg.norm(p0)
    verdict("pressure robustness", du <= 1e-8 and dp >= 1e-2,
            f"relative velocity change {du:.2e} (<= 1e-8), pressure change {dp:.2e} (>= 1e-2)")


# -- form properties ---------------------------------------------------------------------
def test_convection_positivity_samples(verdict):
    rng = np.random.default_rng(2024)
    worst_pos, worst_eq, count = np.inf, 0.0, 0
    configs = [(k, bc) for k in (1, 2, 3) for bc in ({}, {"top": NEUMANN, "right": NEUMANN})]
    per = math.ceil(500 / len(configs))
    for k, bc in configs:
        space = SlabSpace(build_structured_mesh(3, 3, bc=bc), k)
        ed = F.ElementData(space)
        proj = DivFreeProjector(space)
        ne, nf = space.mesh.n_elements, space.mesh.n_facets
        for _ in range(per):
            w = proj.project_coefficients(rng.uniform(-1, 1, (ne, 2, space.nk)))
            u = rng.standard_normal((ne, 2, space.nk))
            ub = rng.standard_normal((nf, 2, space.nf))
            ub[space.mesh.dirichlet_mask] = 0.0
            TW, TV = F.FieldTraces(ed, w), F.FieldTraces(ed, u, ub)
            o = F.eval_o_h(ed, TW, TV, TV)
            expr = F.oh_facet_expression(ed, TW, TV)
            worst_pos = min(worst_pos, o / F.norm_v(ed, TV) ** 2)
            worst_eq = max(worst_eq, abs(o - expr) / abs(expr))
            count += 1
    verdict("convection positivity", count >= 500 and worst_pos >= -1e-12 and worst_eq <= 1e-11,
            f"{count} samples, min o_h/|v|^2 {worst_pos:.3e} (>= -1e-12), "
            f"max relative gap to facet form {worst_eq:.2e} (<= 1e-11)")


def test_coercivity_sweep(verdict):
    detail, ok = [], True
    for k in (1, 2, 3):
        vals = [coercivity_constant(SlabSpace(build_structured_mesh(n, n), k), 10.0 * k * k)
                for n in (4, 8, 16)]
        ratios = [b / a for a, b in zip(vals[:-1], vals[1:])]
        ok &= min(vals) >= 0.05 and min(ratios) >= 0.8
        detail.append(f"k={k} {_fmt(vals)}")
    verdict("coercivity", ok, "; ".join(detail) + " (>= 0.05, drop <= 20% per refinement)")


def test_infsup_stability(verdict):
    detail, ok = [], True
    for k in (1, 2):
        betas = infsup_estimate([8, 16, 32], k)
        drops = [1 - b / a for a, b in zip(betas[:-1], betas[1:])]
        ok &= max(drops) <= 0.2
        detail.append(f"k={k} beta {_fmt(betas)} drops {_fmt(drops)}")
    verdict("inf-sup", ok, "; ".join(detail) + " (<= 0.2 per refinement)")


def test_ladyzhenskaya_growth(verdict):
    detail, ok = [], True
    for k in (1, 2):
        reps = inequality_harness([4, 8, 16], k, samples=200, seed=0, ids=["ladyzhenskaya"])
        growth = [b.worst_ratio / a.worst_ratio for a, b in zip(reps[:-1], reps[1:])]
        ok &= max(growth) <= 1.10
        detail.append(f"k={k} worst {_fmt([r.worst_ratio for r in reps])}")
        assert inequality_growth(reps)["ladyzhenskaya"] == pytest.approx(max(growth))
    verdict("ladyzhenskaya", ok, "; ".join(detail) + " (growth <= 10% per refinement)")


# -- projections -------------------------------------------------------------------------
def test_projection_rates(verdict):
    detail, ok = [], True
    for k in (1, 2, 3):
        errs = projection_study(vortex_velocity, [8, 16, 32], k)
        l2, fac = observed_rates(errs["l2"]), observed_rates(errs["facet"])
        tr = observed_rates(temporal_projection_errors(
            lambda t: math.exp(2 * t) * math.sin(3 * t), [4, 8, 16], k))
        ok &= all(abs(r - (k + 1)) <= 0.2 for r in l2 + tr)
        ok &= all(abs(r - k) <= 0.2 for r in fac)
        detail.append(f"k={k} L2 {_fmt(l2)} facet {_fmt(fac)} time {_fmt(tr)}")
    verdict("projection rates", ok, "; ".join(detail) + " (k+1, k, k+1 within 0.2)")


# -- slab solves -------------------------------------------------------------------------
def test_condensed_matches_monolithic(verdict):
    rng = np.random.default_rng(7)
    worst = 0.0
    for k in (1, 2):
        for outflow in (False, True):
            problem = manufactured_problem(nu=0.01)
            if not outflow:
                problem = problem_from_exact(problem.exact, 0.01)
            mesh = build_structured_mesh(1, 1, bc=problem.bc)
            space = SlabSpace(mesh, k)
            disc = SlabDiscretization(space, FormParams(problem.nu, k), problem)
            u0 = project_divfree(lambda x, y: problem.initial_velocity(x, y, 0.0), space,
                                 boundary="self")
            w = rng.standard_normal((2, k + 1, 2, space.nk))
            system = assemble_slab(disc, w, u0, 0, 0.0, 0.1)
            a, b = system.solve(), monolithic_solve(system)
            for name in ("u", "p", "ubar", "pbar"):
                x, y = getattr(a, name), getattr(b, name)
                worst = max(worst, np.linalg.norm(x - y) / np.linalg.norm(y))
    verdict("condensed vs monolithic", worst <= 1e-10,
            f"max relative difference {worst:.2e} on 2 triangles, k in {{1, 2}} (<= 1e-10)")


def test_temporal_order(temporal_studies, verdict):
    detail, ok = [], True
    for k, study in temporal_studies.items():
        rates = study.rates("vel_err_vprime")[1:]
        ok &= all(r != EXACT and abs(r - (k + 1)) <= 0.2 for r in rates)
        detail.append(f"k={k} errors {_fmt([r.vel_err_vprime for r in study.rows])} "
                      f"rates {_fmt(rates)}")
    verdict("temporal order", ok, "; ".join(detail) + " (k+1 within 0.2)")

import csv
import math

import numpy as np
import pytest

from sthdg.forms import FormParams
from sthdg.geometry import build_structured_mesh, uniform_time_partition
from sthdg.problems import (decay_problem, manufactured_problem, problem_from_exact,
                            representable_solution, vortex_velocity)
from sthdg.slab_solver import NonlinearSettings, run_simulation
from sthdg.spaces import SlabSpace
from sthdg import verification as V


def test_rates_and_exact_sentinel():
    rep = V.ErrorReport(2, [V.ErrorRow(8, 2, 4.0, 1e-13, 0, 0),
                            V.ErrorRow(32, 4, 1.0, 1e-14, 0, 0),
                            V.ErrorRow(128, 8, 0.125, 0.5, 0, 0)])
    assert rep.rates("vel_err_vprime") == [None, 2.0, 3.0]
    assert rep.rates("p_err_l2l2")[1] == V.EXACT
    assert rep.table()[0]["k"] == 2


def test_error_csv_layout(tmp_path):
    rep = V.ErrorReport(1, [V.ErrorRow(8, 2, 0.5, 0.25, 0, 0), V.ErrorRow(32, 4, 0.125, 0.125, 0, 0)])
    path = tmp_path / "c.csv"
    rep.to_csv(path)
    V.ErrorReport(2, rep.rows).to_csv(path, append=True)
    rows = list(csv.reader(open(path)))
    assert rows[0] == ["k", "cells_per_slab", "n_slabs", "vel_err_vprime", "vel_rate",
                       "p_err_l2l2", "p_rate"]
    assert rows[1][:3] == ["1", "8", "2"] and rows[1][4] == "-"
    assert float(rows[2][4]) == pytest.approx(2.0)
    assert len(rows) == 5 and rows[4][0] == "2"


def test_mesh_for_cells():
    assert V.mesh_for_cells(128).n_elements == 128
    with pytest.raises(ValueError):
        V.mesh_for_cells(100)


def test_errors_vanish_for_representable_polynomial_data():
    k = 1
    ex = representable_solution(k, lambda t, d=0: (1.0 + t, 1.0)[d], lambda t: 0.0)
    problem = problem_from_exact(ex, 0.2, final_time=0.2)
    states = run_simulation(problem, build_structured_mesh(2, 2), uniform_time_partition(0.2, 2),
                            NonlinearSettings(method="direct"), k=k)
    row = V.compute_errors(states, problem)
    assert row.vel_err_vprime < 1e-9 and row.p_err_l2l2 < 1e-9 and row.final_l2 < 1e-9


def test_errors_need_exact_solution():
    problem = decay_problem(vortex_velocity)
    with pytest.raises(ValueError):
        V.compute_errors([], problem)


def test_conservation_diagnostics_on_decay_run():
    problem = decay_problem(vortex_velocity, nu=0.01, final_time=0.2)
    states = run_simulation(problem, build_structured_mesh(3, 3), uniform_time_partition(0.2, 4),
                            k=2)
    rep = V.conservation_report(states, problem, FormParams(problem.nu, 2))
    assert rep.max_divergence < 1e-10
    assert rep.max_normal_jump < 1e-10
    assert rep.max_energy_residual < 1e-8
    assert rep.energy_nonincreasing
    assert rep.stability_constant == pytest.approx(1.0, abs=1e-6)
    assert rep.lines()[0].startswith("max_divergence_relative")


def test_energy_identity_with_forcing_and_outflow():
    problem = manufactured_problem(nu=0.01, final_time=0.1)
    states = run_simulation(problem, build_structured_mesh(3, 3, bc=problem.bc),
                            uniform_time_partition(0.1, 2), k=2)
    rep = V.conservation_report(states, problem, FormParams(problem.nu, 2))
    assert rep.max_energy_residual < 1e-8


def test_coercivity_constant_is_positive():
    space = SlabSpace(build_structured_mesh(2, 2), 1)
    c = V.coercivity_constant(space)
    assert 0.05 < c <= 1.0 + 1e-12


@pytest.mark.parametrize("k", [1, 2])
def test_infsup_dense_and_iterative_agree(k):
    space = SlabSpace(build_structured_mesh(4, 4), k)
    a = V.infsup_constant(space, dense=True)
    b = V.infsup_constant(space, dense=False)
    assert a == pytest.approx(b, rel=1e-6)
    assert a > 0.05


def test_infsup_estimate_limits():
    with pytest.raises(ValueError):
        V.infsup_estimate([4], 1)
    with pytest.raises(MemoryError):
        V.infsup_estimate([4, 64], 1)


def test_inequality_harness_is_deterministic(tmp_path):
    a = V.inequality_harness([2, 4], 1, samples=12, seed=3)
    b = V.inequality_harness([2, 4], 1, samples=12, seed=3)
    assert a == b
    assert {r.id for r in a} == set(V.INEQUALITIES)
    p1, p2 = tmp_path / "a.csv", tmp_path / "b.csv"
    V.write_inequalities_csv(p1, [(1, r) for r in a])
    V.write_inequalities_csv(p2, [(1, r) for r in b])
    assert p1.read_bytes() == p2.read_bytes()


def test_time_inequalities_are_level_independent():
    reps = V.inequality_harness([2, 4, 8], 2, samples=30, ids=["time_scaling_linf",
                                                               "time_inverse"])
    growth = V.inequality_growth(reps)
    assert set(growth) == {"time_scaling_linf", "time_inverse"}
    # scale invariant: only sampling noise separates the levels
    for g in growth.values():
        assert 0.9 < g < 1.05


def test_inequality_growth():
    R = V.InequalityReport
    g = V.inequality_growth([R("a", 1, 5, 1.0), R("a", 2, 5, 1.5), R("a", 4, 5, 1.5)])
    assert g == {"a": 1.5}


def test_random_fields_cover_all_kinds(rng):
    space = SlabSpace(build_structured_mesh(2, 2), 1)
    fields = V.random_broken_fields(space, 6, rng)
    nonzero = [np.count_nonzero(np.abs(c).sum((1, 2))) for c in fields]
    assert nonzero[0] == 1 and nonzero[1] == space.mesh.n_elements


def test_projection_study_rates():
    out = V.projection_study(vortex_velocity, [2, 4, 8], 1)
    assert V.observed_rates(out["l2"])[-1] == pytest.approx(2.0, abs=0.3)
    assert V.observed_rates(out["facet"])[-1] == pytest.approx(1.0, abs=0.3)


def test_temporal_projection_rates():
    errs = V.temporal_projection_errors(lambda t: math.exp(2 * t), [4, 8, 16], 1)
    assert V.observed_rates(errs)[-1] == pytest.approx(2.0, abs=0.1)

import numpy as np
import pytest

from sthdg.forms import FormParams
from sthdg.geometry import NEUMANN, build_structured_mesh, uniform_time_partition
from sthdg.problems import (decay_problem, manufactured_problem, representable_problem,
                            representable_solution, problem_from_exact, vortex_velocity)
from sthdg.projections import project_divfree
from sthdg.slab_solver import (NonlinearSettings, SlabDiscretization, SlabSolveError, advance,
                               assemble_slab, monolithic_solve, run_simulation,
                               solve_slab_nonlinear)
from sthdg.spaces import SlabSpace, evaluate, trace_minus


def _disc(problem, mesh, k):
    mesh = mesh.with_boundary_conditions(problem.bc) if problem.bc else mesh
    space = SlabSpace(mesh, k)
    return SlabDiscretization(space, FormParams(problem.nu, k), problem)


def _rel(a, b):
    return np.linalg.norm(a - b) / np.linalg.norm(b)


@pytest.mark.parametrize("k", [1, 2])
@pytest.mark.parametrize("outflow", [False, True])
def test_condensed_and_monolithic_solves_agree(rng, k, outflow):
    problem = manufactured_problem(nu=0.01)
    if not outflow:
        problem = problem_from_exact(problem.exact, 0.01)
    disc = _disc(problem, build_structured_mesh(1, 1), k)
    u0 = project_divfree(lambda x, y: problem.initial_velocity(x, y, 0.0), disc.space,
                         boundary="self")
    w = rng.standard_normal((disc.mesh.n_elements, k + 1, 2, disc.space.nk))
    system = assemble_slab(disc, w, u0, 0, 0.0, 0.1)
    a, b = system.solve(), monolithic_solve(system)
    for name in ("u", "p", "ubar", "pbar"):
        assert _rel(getattr(a, name), getattr(b, name)) < 1e-10, name


def test_linear_slab_system_residual_vanishes():
    problem = representable_problem(2)
    disc = _disc(problem, build_structured_mesh(2, 2), 2)
    u0 = project_divfree(lambda x, y: problem.initial_velocity(x, y, 0.0), disc.space,
                         boundary="self")
    system = assemble_slab(disc, None, u0, 0, 0.0, 0.25)
    Rx, RG = system.residual(system.solve())
    Rx0, RG0 = system.residual(system.state0)
    scale = np.linalg.norm(np.concatenate([Rx0.ravel(), RG0.ravel()]))
    assert np.linalg.norm(np.concatenate([Rx.ravel(), RG.ravel()])) < 1e-10 * scale


@pytest.mark.parametrize("method", ["direct", "modal"])
def test_polynomial_solution_is_reproduced(method):
    """Data polynomial in space and time of degree <= k is captured exactly."""
    k = 2
    amp = lambda t, d=0: (1.0 + t - 0.5 * t * t, 1.0 - t)[d]
    ex = representable_solution(k, amp, lambda t: 1.0 + 2.0 * t)
    problem = problem_from_exact(ex, 0.1, final_time=0.5)
    states = run_simulation(problem, build_structured_mesh(2, 2),
                            uniform_time_partition(0.5, 3), NonlinearSettings(method=method), k=k)
    for x in [(0.3, 0.4), (0.9, 0.05), (0.5, 0.5)]:
        for s in states:
            t = 0.5 * (s.t0 + s.t1)
            got = evaluate(s, x, t)
            X, Y = np.array(x[0]), np.array(x[1])
            np.testing.assert_allclose(got.velocity, ex.velocity(X, Y, t), atol=1e-9)
            np.testing.assert_allclose(got.pressure, ex.pressure(X, Y, t), atol=1e-8)


def test_methods_agree_on_nonlinear_slab():
    problem = manufactured_problem(nu=1e-3, final_time=0.05)
    mesh = build_structured_mesh(3, 3)
    part = uniform_time_partition(0.05, 2)
    runs = [run_simulation(problem, mesh, part, NonlinearSettings(method=m, anderson_depth=d),
                           k=1)
            for m, d in (("direct", 0), ("modal", 0), ("modal", 3))]
    ref = runs[0][-1].u
    for states in runs[1:]:
        assert _rel(states[-1].u, ref) < 1e-8


def test_stokes_mode_converges_in_one_iteration():
    problem = decay_problem(vortex_velocity, nu=0.05, final_time=0.1, convection=False)
    states = run_simulation(problem, build_structured_mesh(3, 3), uniform_time_partition(0.1, 2),
                            NonlinearSettings(method="direct"), k=1)
    assert all(s.report.n_iterations == 1 for s in states)


def test_iteration_limit_raises():
    problem = manufactured_problem(nu=1e-3, final_time=0.1)
    with pytest.raises(SlabSolveError) as info:
        run_simulation(problem, build_structured_mesh(2, 2), uniform_time_partition(0.1, 1),
                       NonlinearSettings(method="direct", max_iterations=1), k=1)
    assert info.value.slab == 0
    assert info.value.increment is not None


def test_singular_system_is_reported(monkeypatch):
    from sthdg.linalg import SingularMatrixError

    def broken(self, w_u, dt):
        raise SingularMatrixError("zero pivot")

    monkeypatch.setattr(SlabDiscretization, "direct_system", broken)
    problem = representable_problem(1)
    with pytest.raises(SlabSolveError, match="slab 0: singular"):
        run_simulation(problem, build_structured_mesh(2, 2), uniform_time_partition(0.1, 1),
                       NonlinearSettings(method="direct"), k=1)


def test_settings_validation():
    for bad in (dict(tolerance=0.0), dict(max_iterations=0), dict(relaxation=1.5),
                dict(method="newton"), dict(anderson_depth=-1)):
        with pytest.raises(ValueError):
            NonlinearSettings(**bad)
    s = NonlinearSettings(direct_limit=10)
    assert s.resolve_method(10) == "direct" and s.resolve_method(11) == "modal"


def test_advance_is_the_right_endpoint_trace():
    problem = decay_problem(vortex_velocity, nu=0.05, final_time=0.1)
    states = run_simulation(problem, build_structured_mesh(2, 2), uniform_time_partition(0.1, 2),
                            k=2)
    np.testing.assert_allclose(advance(states[0]), trace_minus(states[0]))
    np.testing.assert_allclose(states[1].u_prev, advance(states[0]))


def test_states_stream_through_callback():
    seen = []
    problem = decay_problem(vortex_velocity, nu=0.05, final_time=0.1)
    out = run_simulation(problem, build_structured_mesh(2, 2), uniform_time_partition(0.1, 3),
                         k=1, callback=seen.append, keep_states=False)
    assert out == [] and [s.n for s in seen] == [0, 1, 2]

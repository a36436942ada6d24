"""Problem data: forcing, boundary data and (optionally) an exact solution.

All callables take ``(x, y, t)`` with array ``x, y`` of a common shape and
return arrays with leading component axes, e.g. a velocity has shape
``(2,) + x.shape`` and a velocity gradient ``(2, 2) + x.shape`` with
``grad[c, d] = d u_c / d x_d``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional

import numpy as np

from .geometry import NEUMANN

Field = Callable[..., np.ndarray]


@dataclass(frozen=True)
class ExactSolution:
    velocity: Field
    gradient: Field
    pressure: Field
    time_derivative: Optional[Field] = None
    laplacian: Optional[Field] = None
    pressure_gradient: Optional[Field] = None


@dataclass
class ProblemSpec:
    """Data of one transient (Navier-)Stokes problem on a rectangle.

    ``convection=False`` drops the convective form (Stokes mode).  Boundary
    sides missing from ``bc`` are Dirichlet.  ``traction`` returns the Neumann
    data ``nu d_n u - p n - min(u.n, 0) u`` at boundary points with outward
    normal ``n``; when an exact solution is given it is derived from it.
    """

    nu: float
    forcing: Field
    initial_velocity: Field
    boundary_velocity: Field
    exact: Optional[ExactSolution] = None
    bc: Mapping[str, str] = field(default_factory=dict)
    domain: tuple = (0.0, 1.0, 0.0, 1.0)
    final_time: float = 1.0
    convection: bool = True
    traction: Optional[Callable] = None
    name: str = "custom"

    def __post_init__(self):
        if not 0.0 < self.nu <= 1.0:
            raise ValueError(f"nu must lie in (0, 1], got {self.nu}")
        if self.traction is None and self.exact is not None:
            self.traction = self._exact_traction
        if self.traction is None:
            self.traction = _zero_traction

    @property
    def has_neumann(self) -> bool:
        return any(v == NEUMANN for v in self.bc.values())

    def _exact_traction(self, x, y, t, n):
        ex = self.exact
        g = ex.gradient(x, y, t)
        u = ex.velocity(x, y, t)
        p = ex.pressure(x, y, t)
        n = np.asarray(n, dtype=float)
        if n.ndim == 1:
            n = n.reshape((2,) + (1,) * np.ndim(x))
        dn = g[:, 0] * n[0] + g[:, 1] * n[1]
        un = u[0] * n[0] + u[1] * n[1]
        out = self.nu * dn - p * n
        if self.convection:
            out = out - np.minimum(un, 0.0) * u
        return out


def _zero_traction(x, y, t, n):
    return np.zeros((2,) + np.shape(x))


def _zero_vector(x, y, t):
    return np.zeros((2,) + np.shape(x))


def forcing_from_exact(ex: ExactSolution, nu: float, convection: bool = True) -> Field:
    """f = d_t u + (u . grad) u - nu lap u + grad p."""
    def f(x, y, t):
        u = ex.velocity(x, y, t)
        g = ex.gradient(x, y, t)
        out = ex.time_derivative(x, y, t) - nu * ex.laplacian(x, y, t) \
            + ex.pressure_gradient(x, y, t)
        if convection:
            out = out + np.einsum("cd...,d...->c...", g, u)
        return out
    return f


def problem_from_exact(ex: ExactSolution, nu: float, convection: bool = True,
                       **kwargs) -> ProblemSpec:
    return ProblemSpec(
        nu=nu, forcing=forcing_from_exact(ex, nu, convection),
        initial_velocity=lambda x, y, t=0.0: ex.velocity(x, y, t),
        boundary_velocity=ex.velocity, exact=ex, convection=convection, **kwargs)


# -- travelling-wave manufactured solution ------------------------------------
_W = 2.0 * np.pi


def _waves(x, y, t):
    a = _W * (x - t)
    b = _W * (y - t)
    return np.sin(a), np.cos(a), np.sin(b), np.cos(b)


def _wave_velocity(x, y, t):
    S, C, s, c = _waves(x, y, t)
    return np.stack([2.0 + S * s, 2.0 + C * c])


def _wave_gradient(x, y, t):
    S, C, s, c = _waves(x, y, t)
    return _W * np.stack([np.stack([C * s, S * c]), np.stack([-S * c, -C * s])])


def _wave_dt(x, y, t):
    S, C, s, c = _waves(x, y, t)
    return _W * np.stack([-(C * s + S * c), S * c + C * s])


def _wave_laplacian(x, y, t):
    S, C, s, c = _waves(x, y, t)
    return -2.0 * _W ** 2 * np.stack([S * s, C * c])


def _wave_pressure(x, y, t):
    S, C, s, c = _waves(x, y, t)
    return S * c


def _wave_pressure_gradient(x, y, t):
    S, C, s, c = _waves(x, y, t)
    return _W * np.stack([C * c, -S * s])


TRAVELLING_WAVE = ExactSolution(_wave_velocity, _wave_gradient, _wave_pressure,
                                _wave_dt, _wave_laplacian, _wave_pressure_gradient)


def manufactured_problem(nu: float = 1e-4, final_time: float = 1.0) -> ProblemSpec:
    """Travelling-wave benchmark on the unit square.

    u = (2 + sin 2pi(x-t) sin 2pi(y-t), 2 + cos 2pi(x-t) cos 2pi(y-t)),
    p = sin 2pi(x-t) cos 2pi(y-t); Dirichlet on x = 0, x = 1, y = 0 and
    traction data on y = 1.
    """
    return problem_from_exact(TRAVELLING_WAVE, nu, bc={"top": NEUMANN},
                              final_time=final_time, name="travelling_wave")


# -- fields that P_k reproduces exactly in space ------------------------------
def representable_solution(k: int, amplitude: Callable = None,
                           pressure_amplitude: Callable = None) -> ExactSolution:
    """u = a(t) (y^k, -x^k), p = b(t) (x^(k-1) - 1/k).

    The velocity is solenoidal and in P_k, the pressure is mean-free and in
    P_(k-1), so only the time discretisation contributes to the error.
    """
    if k < 1:
        raise ValueError("k must be at least 1")
    if amplitude is None:
        def amplitude(t, d=0):
            return (np.sin(3.0 * t) + 1.5, 3.0 * np.cos(3.0 * t))[d]
    if pressure_amplitude is None:
        def pressure_amplitude(t):
            return np.cos(2.0 * t)

    def vel(x, y, t):
        return amplitude(t) * np.stack([y ** k, -x ** k])

    def grad(x, y, t):
        z = np.zeros_like(x)
        dy = k * y ** (k - 1) if k > 1 else np.ones_like(y)
        dx = k * x ** (k - 1) if k > 1 else np.ones_like(x)
        return amplitude(t) * np.stack([np.stack([z, dy]), np.stack([-dx, z])])

    def dt(x, y, t):
        return amplitude(t, 1) * np.stack([y ** k, -x ** k])

    def lap(x, y, t):
        if k < 2:
            return np.zeros((2,) + np.shape(x))
        return amplitude(t) * k * (k - 1) * np.stack([y ** (k - 2), -x ** (k - 2)])

    def pres(x, y, t):
        if k == 1:
            return np.zeros_like(x)
        return pressure_amplitude(t) * (x ** (k - 1) - 1.0 / k)

    def pgrad(x, y, t):
        z = np.zeros_like(x)
        if k == 1:
            return np.stack([z, z])
        dx = (k - 1) * x ** (k - 2) if k > 2 else np.ones_like(x)
        return pressure_amplitude(t) * np.stack([dx, z])

    return ExactSolution(vel, grad, pres, dt, lap, pgrad)


def representable_problem(k: int, nu: float = 0.1, final_time: float = 1.0) -> ProblemSpec:
    return problem_from_exact(representable_solution(k), nu, final_time=final_time,
                              name="representable")


def decay_problem(initial_velocity: Field, nu: float = 1e-2, final_time: float = 1.0,
                  convection: bool = True) -> ProblemSpec:
    """Unforced flow with homogeneous Dirichlet data."""
    return ProblemSpec(nu=nu, forcing=_zero_vector, initial_velocity=initial_velocity,
                       boundary_velocity=_zero_vector, final_time=final_time,
                       convection=convection, name="decay")


def vortex_velocity(x, y, t=0.0):
    """Solenoidal field vanishing on the unit-square boundary: curl of sin^2(pi x) sin^2(pi y)."""
    sx, sy = np.sin(np.pi * x), np.sin(np.pi * y)
    cx, cy = np.cos(np.pi * x), np.cos(np.pi * y)
    return np.stack([2.0 * np.pi * sx ** 2 * sy * cy, -2.0 * np.pi * sy ** 2 * sx * cx])


def vortex_gradient(x, y, t=0.0):
    s2x, s2y = np.sin(2 * np.pi * x), np.sin(2 * np.pi * y)
    sx2, sy2 = np.sin(np.pi * x) ** 2, np.sin(np.pi * y) ** 2
    c2x, c2y = np.cos(2 * np.pi * x), np.cos(2 * np.pi * y)
    pi = np.pi
    # u1 = pi sx^2 s2y, u2 = -pi sy^2 s2x
    return np.stack([
        np.stack([pi ** 2 * s2x * s2y, 2 * pi ** 2 * sx2 * c2y]),
        np.stack([-2 * pi ** 2 * sy2 * c2x, -pi ** 2 * s2y * s2x]),
    ])


def gradient_potential(x, y, t=0.0):
    """grad of sin(pi x) sin(pi y)."""
    return np.pi * np.stack([np.cos(np.pi * x) * np.sin(np.pi * y),
                             np.sin(np.pi * x) * np.cos(np.pi * y)])


def with_extra_forcing(problem: ProblemSpec, extra: Field) -> ProblemSpec:
    """Same problem with ``extra`` added to the forcing (exact solution dropped)."""
    base = problem.forcing
    return ProblemSpec(nu=problem.nu, forcing=lambda x, y, t: base(x, y, t) + extra(x, y, t),
                       initial_velocity=problem.initial_velocity,
                       boundary_velocity=problem.boundary_velocity, exact=None,
                       bc=dict(problem.bc), domain=problem.domain,
                       final_time=problem.final_time, convection=problem.convection,
                       traction=problem.traction, name=problem.name + "+extra")


NAMED_PROBLEMS = {"travelling_wave": manufactured_problem}

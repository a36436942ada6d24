"""Batch front end: ``sthdg --config run.yaml [--mode M] [--out DIR] ...``.

Configuration files are YAML (JSON is accepted as a subset).  Every top-level
key has a command-line flag of the same name; flags override the file.
"""
from __future__ import annotations

import argparse
import logging
import math
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import yaml

log = logging.getLogger("sthdg")

MODES = ("solve", "convergence", "inequalities", "infsup", "conservation")
PROBLEMS = ("travelling_wave", "representable", "decay")
SIDES = ("left", "right", "bottom", "top")
NONLINEAR_KEYS = ("tolerance", "max_iterations", "relaxation", "method", "residual_factor",
                  "refactor_ratio", "direct_limit", "anderson_depth")


class ConfigError(ValueError):
    """Invalid run configuration; ``field`` names the offending key."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


@dataclass
class RunConfig:
    mode: str
    k: list = field(default_factory=lambda: [2])
    nu: float = 1e-4
    alpha: Optional[float] = None
    problem: str = "travelling_wave"
    domain: list = field(default_factory=lambda: [0.0, 1.0, 0.0, 1.0])
    bc: dict = field(default_factory=dict)
    final_time: float = 1.0
    levels: list = field(default_factory=list)
    mesh_levels: list = field(default_factory=lambda: [4, 8, 16])
    samples: int = 200
    nonlinear: dict = field(default_factory=dict)
    rate_tolerance: float = 0.2
    growth_bound: float = 1.10
    infsup_drop: float = 0.20
    coercivity_bound: float = 0.05
    mesh_ratio_bound: float = 4.0
    out: str = "out"
    seed: int = 0
    threads: int = 1

    def alpha_for(self, k: int) -> float:
        return 10.0 * k * k if self.alpha is None else self.alpha


_FIELDS = {f.name for f in fields(RunConfig)}


def _as_float(name, v):
    try:
        return float(v)
    except (TypeError, ValueError):
        raise ConfigError(name, f"expected a number, got {v!r}") from None


def _as_int(name, v):
    if isinstance(v, bool) or (isinstance(v, float) and not v.is_integer()):
        raise ConfigError(name, f"expected an integer, got {v!r}")
    try:
        return int(v)
    except (TypeError, ValueError):
        raise ConfigError(name, f"expected an integer, got {v!r}") from None


def validate(raw: dict) -> RunConfig:
    """Apply defaults and check a raw key-value mapping."""
    if not isinstance(raw, dict):
        raise ConfigError("<root>", "configuration must be a mapping")
    unknown = sorted(set(raw) - _FIELDS)
    if unknown:
        raise ConfigError(unknown[0], "unknown key")
    if raw.get("mode") is None:
        raise ConfigError("mode", "missing")
    mode = raw["mode"]
    if mode not in MODES:
        raise ConfigError("mode", f"must be one of {', '.join(MODES)}, got {mode!r}")
    cfg = RunConfig(mode=mode)
    for key, val in raw.items():
        if val is not None:
            setattr(cfg, key, val)

    ks = cfg.k if isinstance(cfg.k, (list, tuple)) else [cfg.k]
    cfg.k = [_as_int("k", v) for v in ks]
    if not cfg.k or min(cfg.k) < 1:
        raise ConfigError("k", "polynomial degree must be at least 1")
    cfg.nu = _as_float("nu", cfg.nu)
    if not 0.0 < cfg.nu <= 1.0:
        raise ConfigError("nu", f"must lie in (0, 1], got {cfg.nu}")
    if cfg.alpha is not None:
        cfg.alpha = _as_float("alpha", cfg.alpha)
        if cfg.alpha <= 0.0:
            raise ConfigError("alpha", "must be positive")
    if cfg.problem not in PROBLEMS:
        raise ConfigError("problem", f"must be one of {', '.join(PROBLEMS)}")
    if len(cfg.domain) != 4:
        raise ConfigError("domain", "expected [x0, x1, y0, y1]")
    cfg.domain = [_as_float("domain", v) for v in cfg.domain]
    if cfg.domain[1] <= cfg.domain[0] or cfg.domain[3] <= cfg.domain[2]:
        raise ConfigError("domain", "empty rectangle")
    if not isinstance(cfg.bc, dict):
        raise ConfigError("bc", "expected a mapping side -> dirichlet|neumann")
    for side, kind in cfg.bc.items():
        if side not in SIDES:
            raise ConfigError("bc", f"unknown side {side!r}")
        if kind not in ("dirichlet", "neumann"):
            raise ConfigError("bc", f"unknown condition {kind!r} on {side}")
    cfg.final_time = _as_float("final_time", cfg.final_time)
    if cfg.final_time <= 0.0:
        raise ConfigError("final_time", "must be positive")

    levels = []
    for lv in cfg.levels:
        if not isinstance(lv, (list, tuple)) or len(lv) != 2:
            raise ConfigError("levels", f"each level is [cells, slabs], got {lv!r}")
        cells, slabs = _as_int("levels", lv[0]), _as_int("levels", lv[1])
        n = int(round(math.sqrt(cells / 2)))
        if cells < 2 or 2 * n * n != cells:
            raise ConfigError("levels", f"{cells} cells is not 2 n^2 (structured triangles)")
        if slabs < 1:
            raise ConfigError("levels", "slab count must be positive")
        levels.append((cells, slabs))
    cfg.levels = levels
    cfg.mesh_levels = [_as_int("mesh_levels", v) for v in cfg.mesh_levels]
    if any(v < 1 for v in cfg.mesh_levels):
        raise ConfigError("mesh_levels", "must be positive")
    cfg.samples = _as_int("samples", cfg.samples)
    cfg.seed = _as_int("seed", cfg.seed)
    cfg.threads = _as_int("threads", cfg.threads)
    if cfg.threads < 1:
        raise ConfigError("threads", "must be at least 1")
    if not isinstance(cfg.nonlinear, dict):
        raise ConfigError("nonlinear", "expected a mapping")
    bad = sorted(set(cfg.nonlinear) - set(NONLINEAR_KEYS))
    if bad:
        raise ConfigError(f"nonlinear.{bad[0]}", "unknown key")
    for key in ("rate_tolerance", "growth_bound", "infsup_drop", "coercivity_bound",
                "mesh_ratio_bound"):
        setattr(cfg, key, _as_float(key, getattr(cfg, key)))

    # mode-specific requirements
    if mode == "solve" and len(cfg.levels) != 1:
        raise ConfigError("levels", "solve mode needs exactly one [cells, slabs] level")
    if mode == "conservation" and len(cfg.levels) < 1:
        raise ConfigError("levels", "conservation mode needs at least one level")
    if mode == "convergence" and len(cfg.levels) < 2:
        raise ConfigError("levels", "convergence mode needs at least two levels")
    if mode == "convergence" and cfg.problem == "decay":
        raise ConfigError("problem", "convergence needs a problem with an exact solution")
    if mode in ("inequalities", "infsup") and len(cfg.mesh_levels) < 2:
        raise ConfigError("mesh_levels", "need at least two mesh levels")
    if mode == "infsup" and max(2 * n * n for n in cfg.mesh_levels) > 2048:
        raise ConfigError("mesh_levels", "inf-sup estimate limited to 2048 cells")
    if mode == "inequalities" and cfg.samples < 1:
        raise ConfigError("samples", "must be positive")
    return cfg


def parse_config(path) -> RunConfig:
    """Read and validate a YAML/JSON run configuration."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError("config", f"cannot read {path}: {exc}") from exc
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError("config", f"not valid YAML/JSON: {exc}") from exc
    return validate(raw or {})


# -- runs ---------------------------------------------------------------------------
def planned_checks(cfg: RunConfig) -> list:
    """``(name, requirement)`` for every assertion the mode will evaluate."""
    plan = []
    for k in cfg.k:
        if cfg.mode in ("solve", "conservation"):
            runs = 1 if cfg.mode == "solve" else len(cfg.levels)
            for _ in range(runs):
                plan += [(f"k{k}.max_divergence", "<= 1e-10"),
                         (f"k{k}.max_normal_jump", "<= 1e-10"),
                         (f"k{k}.energy_identity", "<= 1e-8 relative")]
                if cfg.problem == "decay" and not cfg.bc:
                    plan.append((f"k{k}.energy_nonincreasing", "non-increasing |u(t_n^-)|"))
        elif cfg.mode == "convergence":
            plan.append((f"k{k}.velocity_rate", f"{k} +- {cfg.rate_tolerance}"))
        elif cfg.mode == "inequalities":
            from .verification import INEQUALITIES
            plan += [(f"k{k}.{key}.growth", f"<= {cfg.growth_bound}") for key in INEQUALITIES]
        else:
            plan += [(f"k{k}.infsup_drop", f"<= {cfg.infsup_drop} per refinement"),
                     (f"k{k}.coercivity", f">= {cfg.coercivity_bound}")]
    return plan


class Checks:
    """Mode-level assertions, evaluated in the announced order."""

    def __init__(self, plan=()):
        self.plan = list(plan)
        self.results = []

    def announce(self) -> None:
        for name, bound in self.plan:
            line = f"assert {name} {bound}"
            print(line)
            log.info(line)

    def check(self, name: str, value, ok: bool, bound: str) -> bool:
        if (name, bound) not in self.plan:
            raise AssertionError(f"check {name} ({bound}) was not announced")
        status = "PASS" if ok else "FAIL"
        log.info("%s %s = %s (require %s)", status, name, value, bound)
        self.results.append((name, bool(ok)))
        return ok

    @property
    def passed(self) -> bool:
        return all(ok for _, ok in self.results)


def build_problem(cfg: RunConfig, k: int):
    from .problems import (decay_problem, manufactured_problem, representable_problem,
                           vortex_velocity)
    if cfg.problem == "travelling_wave":
        pr = manufactured_problem(cfg.nu, cfg.final_time)
    elif cfg.problem == "representable":
        pr = representable_problem(k, cfg.nu, cfg.final_time)
    else:
        pr = decay_problem(vortex_velocity, cfg.nu, cfg.final_time)
    if cfg.bc:
        pr.bc = dict(cfg.bc)
    pr.domain = tuple(cfg.domain)
    return pr


def _settings(cfg: RunConfig):
    from .slab_solver import NonlinearSettings
    return NonlinearSettings(**cfg.nonlinear)


def _mesh(cfg, cells, problem):
    from .geometry import build_structured_mesh
    n = int(round(math.sqrt(cells / 2)))
    mesh = build_structured_mesh(n, n, problem.domain, problem.bc)
    ratio = mesh.element_diameters.max() / mesh.element_diameters.min()
    log.info("mesh %d cells, h = %.5e, quasi-uniformity %.3f", mesh.n_elements,
             mesh.element_diameters.max(), ratio)
    if ratio > cfg.mesh_ratio_bound:
        raise ConfigError("mesh_ratio_bound", f"mesh ratio {ratio:.3f} exceeds the bound")
    return mesh


def run_solve(cfg: RunConfig, out: Path, checks: Checks) -> None:
    from .forms import FormParams
    from .geometry import uniform_time_partition
    from .slab_solver import run_simulation
    from .verification import ConservationMonitor, ErrorAccumulator, ErrorReport
    from .spaces import SlabSpace
    for k in cfg.k:
        pr = build_problem(cfg, k)
        cells, slabs = cfg.levels[0]
        mesh = _mesh(cfg, cells, pr)
        space = SlabSpace(mesh, k)
        params = FormParams(pr.nu, k, cfg.alpha_for(k))
        mon = ConservationMonitor(pr, space, params)
        acc = ErrorAccumulator(pr, space) if pr.exact is not None else None

        def callback(state):
            mon(state)
            if acc is not None:
                acc(state)
            log.info("slab %d done: %d iterations", state.n, state.report.n_iterations)

        run_simulation(pr, mesh, uniform_time_partition(pr.final_time, slabs), _settings(cfg),
                       k=k, alpha=cfg.alpha_for(k), callback=callback, keep_states=False)
        if acc is not None:
            rep = ErrorReport(k, [acc.row(cells, slabs)])
            rep.to_csv(out / "convergence.csv", append=k != cfg.k[0])
        _write_conservation(out / "conservation.txt", k, mon.report, append=k != cfg.k[0])
        _conservation_checks(checks, k, mon.report, pr)


def _write_conservation(path, k, report, append=False) -> None:
    with open(path, "a" if append else "w") as fh:
        fh.write(f"# k = {k}\n")
        for line in report.lines():
            fh.write(line + "\n")


def _conservation_checks(checks: Checks, k: int, report, problem) -> None:
    checks.check(f"k{k}.max_divergence", f"{report.max_divergence:.3e}",
                 report.max_divergence <= 1e-10, "<= 1e-10")
    checks.check(f"k{k}.max_normal_jump", f"{report.max_normal_jump:.3e}",
                 report.max_normal_jump <= 1e-10, "<= 1e-10")
    checks.check(f"k{k}.energy_identity", f"{report.max_energy_residual:.3e}",
                 report.max_energy_residual <= 1e-8, "<= 1e-8 relative")
    if problem.name == "decay" and not problem.bc:
        checks.check(f"k{k}.energy_nonincreasing", report.energy_nonincreasing,
                     report.energy_nonincreasing, "non-increasing |u(t_n^-)|")


def run_conservation(cfg: RunConfig, out: Path, checks: Checks) -> None:
    from .forms import FormParams
    from .geometry import uniform_time_partition
    from .slab_solver import run_simulation
    from .spaces import SlabSpace
    from .verification import ConservationMonitor
    first = True
    for k in cfg.k:
        for cells, slabs in cfg.levels:
            pr = build_problem(cfg, k)
            mesh = _mesh(cfg, cells, pr)
            mon = ConservationMonitor(pr, SlabSpace(mesh, k), FormParams(pr.nu, k,
                                                                         cfg.alpha_for(k)))
            run_simulation(pr, mesh, uniform_time_partition(pr.final_time, slabs),
                           _settings(cfg), k=k, alpha=cfg.alpha_for(k), callback=mon,
                           keep_states=False)
            _write_conservation(out / "conservation.txt", k, mon.report, append=not first)
            first = False
            _conservation_checks(checks, k, mon.report, pr)


def run_convergence(cfg: RunConfig, out: Path, checks: Checks) -> None:
    from .verification import convergence_study
    for i, k in enumerate(cfg.k):
        pr = build_problem(cfg, k)
        for cells, _ in cfg.levels:
            _mesh(cfg, cells, pr)
        rep = convergence_study(pr, cfg.levels, k, _settings(cfg), cfg.alpha_for(k),
                                progress=lambda r: log.info(
                                    "level %d/%d: velocity %.6e pressure %.6e", r.cells,
                                    r.slabs, r.vel_err_vprime, r.p_err_l2l2))
        rep.to_csv(out / "convergence.csv", append=i > 0)
        rate = rep.rates("vel_err_vprime")[-1]
        ok = rate == "exact" or abs(rate - k) <= cfg.rate_tolerance
        checks.check(f"k{k}.velocity_rate", rate, ok, f"{k} +- {cfg.rate_tolerance}")


def run_inequalities(cfg: RunConfig, out: Path, checks: Checks) -> None:
    from .verification import inequality_growth, inequality_harness, write_inequalities_csv
    reports = []
    for k in cfg.k:
        rk = inequality_harness(cfg.mesh_levels, k, cfg.samples, cfg.seed)
        for key, g in inequality_growth(rk).items():
            checks.check(f"k{k}.{key}.growth", f"{g:.4f}", g <= cfg.growth_bound,
                         f"<= {cfg.growth_bound}")
        reports += [(k, r) for r in rk]
    write_inequalities_csv(out / "inequalities.csv", reports)


def run_infsup(cfg: RunConfig, out: Path, checks: Checks) -> None:
    from .geometry import build_structured_mesh
    from .spaces import SlabSpace
    from .verification import coercivity_constant, infsup_estimate
    rows = []
    for k in cfg.k:
        betas = infsup_estimate(cfg.mesh_levels, k)
        coer = [coercivity_constant(SlabSpace(build_structured_mesh(n, n), k), cfg.alpha_for(k))
                for n in cfg.mesh_levels]
        for n, b, c in zip(cfg.mesh_levels, betas, coer):
            rows.append((k, n, 2 * n * n, b, c))
            log.info("k=%d n=%d beta_h=%.6e coercivity=%.6e", k, n, b, c)
        drop = max(1.0 - b1 / b0 for b0, b1 in zip(betas[:-1], betas[1:]))
        checks.check(f"k{k}.infsup_drop", f"{drop:.4f}", drop <= cfg.infsup_drop,
                     f"<= {cfg.infsup_drop} per refinement")
        checks.check(f"k{k}.coercivity", f"{min(coer):.4f}", min(coer) >= cfg.coercivity_bound,
                     f">= {cfg.coercivity_bound}")
        if min(coer) < cfg.coercivity_bound:
            log.warning("coercivity constant %.3e below %.2f: increase alpha", min(coer),
                        cfg.coercivity_bound)
    with open(out / "infsup.csv", "w") as fh:
        fh.write("k,n,cells,beta_h,coercivity\n")
        for k, n, c, b, a in rows:
            fh.write(f"{k},{n},{c},{b:.12e},{a:.12e}\n")


RUNNERS = {"solve": run_solve, "convergence": run_convergence,
           "inequalities": run_inequalities, "infsup": run_infsup,
           "conservation": run_conservation}


def _setup_logging(out: Path) -> logging.Handler:
    out.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(out / "run.log", mode="w")
    handler.setFormatter(logging.Formatter("%(levelname)s %(message)s"))
    log.addHandler(handler)
    log.setLevel(logging.INFO)
    return handler


def run(cfg: RunConfig) -> int:
    """Execute a validated configuration; returns the exit status."""
    from threadpoolctl import threadpool_limits

    out = Path(cfg.out)
    handler = _setup_logging(out)
    try:
        log.info("configuration: %s", yaml.safe_dump(asdict(cfg), sort_keys=True)
                 .replace("\n", "; "))
        for k in cfg.k:
            log.info("k = %d: alpha = %g", k, cfg.alpha_for(k))
        checks = Checks(planned_checks(cfg))
        checks.announce()
        with threadpool_limits(cfg.threads):
            try:
                RUNNERS[cfg.mode](cfg, out, checks)
            except Exception as exc:                       # reported, nonzero status
                log.error("run failed: %s", exc)
                print(f"error: {exc}", file=sys.stderr)
                return 2
        for name, ok in checks.results:
            print(f"{'PASS' if ok else 'FAIL'} {name}")
        status = 0 if checks.passed and len(checks.results) == len(checks.plan) else 1
        log.info("exit status %d", status)
        return status
    finally:
        log.removeHandler(handler)
        handler.close()


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sthdg", description=__doc__.splitlines()[0])
    p.add_argument("--config", help="YAML or JSON run configuration")
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int)
    p.add_argument("--k", type=int, action="append", help="polynomial degree (repeatable)")
    p.add_argument("--nu", type=float)
    p.add_argument("--alpha", type=float)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    raw = {}
    try:
        if args.config:
            raw = yaml.safe_load(Path(args.config).read_text()) or {}
            if not isinstance(raw, dict):
                raise ConfigError("<root>", "configuration must be a mapping")
        for key in ("mode", "out", "seed", "threads", "k", "nu", "alpha"):
            val = getattr(args, key)
            if val is not None:
                raw[key] = val
        cfg = validate(raw)
    except (ConfigError, OSError, yaml.YAMLError) as exc:
        print(f"invalid configuration: {exc}", file=sys.stderr)
        return 2
    return run(cfg)


if __name__ == "__main__":
    sys.exit(main())

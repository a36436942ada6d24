import json

import pytest
import yaml

from sthdg.cli import ConfigError, RunConfig, main, parse_config, planned_checks, validate


def _write(path, data):
    path.write_text(yaml.safe_dump(data))
    return path


def test_minimal_solve_config_defaults_alpha(tmp_path):
    cfg = parse_config(_write(tmp_path / "c.yaml",
                              {"mode": "solve", "k": 2, "nu": 1e-4, "levels": [[128, 20]]}))
    assert cfg.k == [2] and cfg.levels == [(128, 20)]
    assert cfg.alpha_for(2) == 40.0


def test_table_reproduction_config(tmp_path):
    data = {"mode": "convergence", "k": [2, 3], "nu": 1e-4,
            "levels": [[128, 20], [512, 40], [2048, 80], [8192, 160]]}
    cfg = parse_config(_write(tmp_path / "t.yaml", data))
    assert len(cfg.levels) == 4 and cfg.k == [2, 3]
    assert [cfg.alpha_for(k) for k in cfg.k] == [40.0, 90.0]


def test_json_is_accepted(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"mode": "infsup", "mesh_levels": [2, 4]}))
    assert parse_config(p).mesh_levels == [2, 4]


@pytest.mark.parametrize("raw,field", [
    ({"mode": "solve", "k": 0, "levels": [[8, 1]]}, "k"),
    ({"mode": "solve", "nu": 0.0, "levels": [[8, 1]]}, "nu"),
    ({"mode": "solve", "nu": 1.5, "levels": [[8, 1]]}, "nu"),
    ({"mode": "solve", "levels": [[8, 1]], "viscosity": 1.0}, "viscosity"),
    ({"k": 2}, "mode"),
    ({"mode": "solve"}, "levels"),
    ({"mode": "convergence", "levels": [[8, 1]]}, "levels"),
    ({"mode": "solve", "levels": [[100, 1]]}, "levels"),
    ({"mode": "solve", "levels": [[8, 1]], "alpha": -1}, "alpha"),
    ({"mode": "solve", "levels": [[8, 1]], "bc": {"north": "neumann"}}, "bc"),
    ({"mode": "solve", "levels": [[8, 1]], "nonlinear": {"damping": 1}}, "nonlinear.damping"),
    ({"mode": "infsup", "mesh_levels": [8, 64]}, "mesh_levels"),
    ({"mode": "walk"}, "mode"),
])
def test_invalid_configs_name_the_field(raw, field):
    with pytest.raises(ConfigError) as info:
        validate(raw)
    assert info.value.field == field
    assert field in str(info.value)


def test_flags_override_file(tmp_path, capsys):
    p = _write(tmp_path / "c.yaml", {"mode": "solve", "k": 0, "levels": [[8, 1]]})
    assert main(["--config", str(p)]) == 2
    assert "k:" in capsys.readouterr().err
    cfg_file = _write(tmp_path / "d.yaml", {"mode": "infsup", "k": 3, "nu": 0.5,
                                           "mesh_levels": [2, 4]})
    out = tmp_path / "o"
    status = main(["--config", str(cfg_file), "--k", "1", "--alpha", "12", "--out", str(out)])
    assert status == 0
    log = (out / "run.log").read_text()
    assert "k = 1: alpha = 12" in log and "k = 3" not in log


def test_assertions_are_printed_before_results(tmp_path, capsys):
    out = tmp_path / "o"
    main(["--mode", "infsup", "--k", "1", "--out", str(out)])
    lines = capsys.readouterr().out.splitlines()
    first_result = min(i for i, l in enumerate(lines) if l.startswith(("PASS", "FAIL")))
    announced = [l for l in lines[:first_result] if l.startswith("assert ")]
    assert len(announced) == len(planned_checks(validate({"mode": "infsup", "k": 1})))


def test_inequalities_output_is_byte_identical(tmp_path):
    cfg = _write(tmp_path / "i.yaml", {"mode": "inequalities", "k": [1], "mesh_levels": [2, 4],
                                       "samples": 9, "seed": 5})
    out = tmp_path / "o"
    snapshots = []
    for _ in range(2):
        assert main(["--config", str(cfg), "--out", str(out)]) in (0, 1)
        snapshots.append(((out / "inequalities.csv").read_bytes(),
                          (out / "run.log").read_bytes()))
    assert snapshots[0] == snapshots[1]
    header = snapshots[0][0].decode().splitlines()[0]
    assert header == "k,id,level,samples,worst_ratio"


def test_failed_assertion_gives_status_one(tmp_path, capsys):
    cfg = _write(tmp_path / "i.yaml", {"mode": "inequalities", "k": [1], "mesh_levels": [2, 4],
                                       "samples": 6, "growth_bound": 0.5})
    assert main(["--config", str(cfg), "--out", str(tmp_path / "o")]) == 1
    assert "FAIL k1." in capsys.readouterr().out


def test_conservation_mode(tmp_path, capsys):
    cfg = _write(tmp_path / "c.yaml", {"mode": "conservation", "k": [1], "problem": "decay",
                                       "nu": 0.01, "final_time": 0.1, "levels": [[8, 2]]})
    assert main(["--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
    text = (tmp_path / "o" / "conservation.txt").read_text()
    line = next(l for l in text.splitlines() if l.startswith("max_divergence_relative"))
    assert float(line.split()[1]) <= 1e-10
    assert "PASS k1.energy_nonincreasing" in capsys.readouterr().out


def test_solve_mode_writes_errors(tmp_path):
    cfg = _write(tmp_path / "s.yaml", {"mode": "solve", "k": [1], "problem": "representable",
                                       "nu": 0.1, "final_time": 0.1, "levels": [[8, 2]]})
    assert main(["--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
    rows = (tmp_path / "o" / "convergence.csv").read_text().splitlines()
    assert rows[0].startswith("k,cells_per_slab,n_slabs") and rows[1].startswith("1,8,2,")
    assert (tmp_path / "o" / "conservation.txt").exists()


def test_convergence_mode_reports_rate(tmp_path):
    cfg = _write(tmp_path / "c.yaml", {"mode": "convergence", "k": [1], "problem":
                                       "travelling_wave", "nu": 0.1, "final_time": 0.05,
                                       "levels": [[8, 1], [32, 2]], "rate_tolerance": 10.0})
    assert main(["--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
    rows = (tmp_path / "o" / "convergence.csv").read_text().splitlines()
    assert len(rows) == 3 and rows[1].split(",")[4] == "-"


def test_solver_failure_status(tmp_path, capsys):
    cfg = _write(tmp_path / "s.yaml", {"mode": "solve", "k": [1], "nu": 1e-3,
                                       "final_time": 0.1, "levels": [[8, 1]],
                                       "nonlinear": {"max_iterations": 1, "method": "direct"}})
    assert main(["--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
    assert "slab 0" in capsys.readouterr().err


def test_runconfig_alpha_override():
    assert RunConfig(mode="solve", alpha=3.0).alpha_for(2) == 3.0

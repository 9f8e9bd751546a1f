import json
from pathlib import Path

import pytest

from levyobstacle import cli
from levyobstacle.errors import ConfigError

CONFIGS = Path(__file__).resolve().parents[1] / "configs"

SMALL = """
schema_version = 1
[model]
family = "vg"
nu_vg = 0.3
sigma = 0.2
theta = -0.1
r = 0.05
[problem]
kind = "{kind}"
payoff = "put"
strike = 1.0
{extra}
[solver]
grid = 201
t_mesh = 40
seed = 42
mc_paths = 1000
dpp_paths = 1000
[outputs]
directory = "out"
reports = {reports}
paths = 3
paths_steps = 10
"""


def write(tmp_path, kind="stationary", extra="", reports='["model", "value", "boundary", "regularity"]'):
    p = tmp_path / "exp.toml"
    p.write_text(SMALL.format(kind=kind, extra=extra, reports=reports))
    return p


def test_shipped_configs_parse():
    names = sorted(p.name for p in CONFIGS.glob("*.toml"))
    assert names
    for p in CONFIGS.glob("*.toml"):
        cli.load_config(p)


def test_unknown_key_rejected():
    with pytest.raises(ConfigError, match="nuvg"):
        cli.parse_config('schema_version = 1\n[model]\nfamily = "vg"\nnuvg = 0.3\nsigma = 0.2\n')


def test_schema_version_required():
    with pytest.raises(ConfigError):
        cli.parse_config('[model]\nfamily = "vg"\nnu_vg = 0.3\nsigma = 0.2\n')
    with pytest.raises(ConfigError):
        cli.parse_config('schema_version = 2\n')


def test_missing_table_file(tmp_path):
    p = write(tmp_path, extra='table = "nope.csv"').read_text().replace('payoff = "put"',
                                                                         'payoff = "custom-table"')
    with pytest.raises(ConfigError, match="not found"):
        cli.parse_config(p, tmp_path)


def test_custom_table_payoff(tmp_path):
    (tmp_path / "phi.csv").write_text("x,phi\n-5,1\n0,0\n5,0\n")
    text = write(tmp_path, extra='table = "phi.csv"').read_text().replace('payoff = "put"',
                                                                           'payoff = "custom-table"')
    (tmp_path / "exp.toml").write_text(text)
    assert cli.main(["solve", "--config", str(tmp_path / "exp.toml"), "--out", str(tmp_path / "o"),
                     "--quiet"]) == 0
    assert (tmp_path / "o" / "value.csv").exists()


def test_run_writes_artifacts(tmp_path):
    cfg = write(tmp_path, reports='["model", "value", "boundary", "regularity", "paths"]')
    out = tmp_path / "o"
    assert cli.main(["run", "--config", str(cfg), "--out", str(out), "--quiet"]) == 0
    for name in ("model.json", "value.csv", "boundary.csv", "regularity.json", "paths.csv", "run.json"):
        assert (out / name).exists(), name
    run = json.loads((out / "run.json").read_text())
    assert run["seeds"]["solver"] == 42
    assert set(run["versions"]) == {"levyobstacle", "numpy", "scipy", "python"}
    assert run["outputs"]["value.csv"]
    model = json.loads((out / "model.json").read_text())
    assert abs(model["psi_at_minus_i"][0] - 0.05) < 1e-10
    for name in ("value.csv", "boundary.csv", "paths.csv"):
        assert b"\r" not in (out / name).read_bytes()


def test_seed_flag_overrides(tmp_path):
    cfg = write(tmp_path, reports='["paths"]')
    cli.main(["run", "--config", str(cfg), "--out", str(tmp_path / "a"), "--seed", "7", "--quiet"])
    cli.main(["run", "--config", str(cfg), "--out", str(tmp_path / "b"), "--quiet"])
    assert json.loads((tmp_path / "a" / "run.json").read_text())["seeds"]["solver"] == 7
    assert (tmp_path / "a" / "paths.csv").read_bytes() != (tmp_path / "b" / "paths.csv").read_bytes()


def test_moment_error_exit_2(tmp_path, capsys):
    p = tmp_path / "bad.toml"
    p.write_text('schema_version = 1\n[model]\nfamily = "cgmy"\nC = 1.0\nG = 5.0\nM = 0.5\nY = 0.8\n')
    assert cli.main(["calibrate", "--config", str(p), "--out", str(tmp_path / "o")]) == 2
    assert "MomentError" in capsys.readouterr().err


def test_compatibility_error_exit_2(tmp_path, capsys):
    cfg = write(tmp_path, kind="evolution", extra='horizon = 0.5\nterminal = "zero"')
    assert cli.main(["solve", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
    assert "CompatibilityError" in capsys.readouterr().err


def test_nonconvergence_exit_3(tmp_path, capsys):
    text = write(tmp_path).read_text().replace("seed = 42", 'seed = 42\nmethod = "jacobi"\nmax_iter = 3')
    (tmp_path / "exp.toml").write_text(text)
    assert cli.main(["solve", "--config", str(tmp_path / "exp.toml"), "--out", str(tmp_path / "o")]) == 3
    assert "NoConvergence" in capsys.readouterr().err


def test_missing_config_exit_2(tmp_path):
    assert cli.main(["solve", "--config", str(tmp_path / "none.toml")]) == 2


def test_diagnose_writes_regularity(tmp_path):
    cfg = write(tmp_path)
    assert cli.main(["diagnose", "--config", str(cfg), "--out", str(tmp_path / "o"), "--quiet"]) == 0
    rep = json.loads((tmp_path / "o" / "regularity.json").read_text())
    assert rep["condition_flags"]["c0_ge_lip_b"] is True and rep["seed"] == 42


def test_crosscheck_table(tmp_path, capsys):
    cfg = write(tmp_path, kind="evolution", extra="horizon = 0.5")
    assert cli.main(["crosscheck", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
    out = capsys.readouterr().out
    assert "grid-vs-mc" in out
    rows = (tmp_path / "o" / "crosscheck.csv").read_text().splitlines()
    assert rows[0].startswith("check,x,reference,estimate")
    assert len(rows) == 6

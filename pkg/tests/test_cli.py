import csv
import re

import pytest

from sva.cli import main
from sva.config import ConfigError, ExperimentConfig, load_config, parse_config
from sva.stats import fit_decay_order, read_reports_csv

SMALL = """
# small sweep
model = ou_quartic
epsilon_list = 0.5, 0.25, 0.125, 0.0625
controls = none, order1, order2
n_traj = 3000
dt = 0.01
seed = 17
n_bootstrap = 100
oracle = false
"""


def test_parse_config_values_and_overrides():
    cfg = parse_config(SMALL, n_workers=2, output_dir="x")
    assert cfg.model_name == "ou_quartic" and cfg.epsilon_list == (0.5, 0.25, 0.125, 0.0625)
    assert cfg.n_traj == 3000 and cfg.dt == 0.01 and cfg.seed == 17 and not cfg.oracle
    assert cfg.n_workers == 2 and cfg.output_dir == "x"
    assert parse_config("n_traj = 1e5").n_traj == 100_000
    assert parse_config("model = lq\nq = 2").model_params == {"a": 1.0, "q": 2.0}


@pytest.mark.parametrize("text,match", [
    ("colour = blue", "unknown key"),
    ("n_traj", "expected"),
    ("dt = fast", "bad value"),
    ("oracle = maybe", "boolean"),
    ("epsilon_list = 0.5, 0.5", "distinct"),
    ("epsilon_list = 0.5, -0.1", "positive"),
    ("controls = none, order3", "controls"),
    ("n_traj = 1", "n_traj"),
])
def test_parse_config_errors(text, match):
    with pytest.raises(ConfigError, match=match):
        parse_config(text)


def test_output_dir_from_environment(monkeypatch):
    monkeypatch.setenv("SVA_OUTPUT_DIR", "/tmp/somewhere")
    assert ExperimentConfig().output_dir == "/tmp/somewhere"


def test_missing_config_file(tmp_path, capsys):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "nope.cfg")
    assert main(["run", "--config", str(tmp_path / "nope.cfg")]) == 2
    assert "configuration error" in capsys.readouterr().err


def test_usage_errors_exit_2():
    assert main([]) == 2
    assert main(["run"]) == 2
    assert main(["instanton", "--model", "double_well", "--out", "x.csv"]) == 2


def test_instanton_command(tmp_path, capsys):
    out = tmp_path / "inst.csv"
    assert main(["instanton", "--model", "ou_quartic", "--dt", "0.01", "--out", str(out)]) == 0
    rows = list(csv.reader(out.open()))
    assert rows[0] == ["t", "phi_0", "theta_0", "K_00"] and len(rows) == 502
    assert float(rows[-1][1]) == pytest.approx(0.8183, abs=1e-3)
    assert "converged" in capsys.readouterr().out


def test_numerical_failure_exit_3(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text(SMALL + "max_iter = 2\n")
    assert main(["run", "--config", str(cfg), "--output-dir", str(tmp_path / "o")]) == 3
    assert "numerical failure" in capsys.readouterr().err


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    cfg = root / "small.cfg"
    cfg.write_text(SMALL)
    assert main(["run", "--config", str(cfg), "--output-dir", str(root / "a"), "--no-timestamp"]) == 0
    return root, cfg


def test_run_writes_artifacts(small_run):
    root, _ = small_run
    out = root / "a"
    for name in ("instanton.csv", "efficiency.csv", "summary.txt"):
        assert (out / name).exists()
    lines = (out / "efficiency.csv").read_text().splitlines()
    assert lines[0] == "epsilon,control,n,seed,Z_hat,R_hat,ci_lo,ci_hi,rel_var"
    assert len(lines) == 13


def test_rerun_is_byte_identical(small_run):
    root, cfg = small_run
    assert main(["run", "--config", str(cfg), "--output-dir", str(root / "b"), "--no-timestamp",
                 "--workers", "3"]) == 0
    for name in ("instanton.csv", "efficiency.csv", "summary.txt"):
        assert (root / "a" / name).read_bytes() == (root / "b" / name).read_bytes()


def test_timestamp_header_is_optional(small_run, tmp_path):
    _, cfg = small_run
    assert main(["run", "--config", str(cfg), "--output-dir", str(tmp_path)]) == 0
    first = (tmp_path / "efficiency.csv").read_text().splitlines()[0]
    assert first.startswith("# generated")
    assert read_reports_csv(tmp_path / "efficiency.csv")[0].epsilon == 0.5


def test_summary_slopes_equal_refit_of_csv(small_run):
    root, _ = small_run
    reports = read_reports_csv(root / "a" / "efficiency.csv")
    text = (root / "a" / "summary.txt").read_text()
    for control in ("none", "order1", "order2"):
        m = re.search(rf"^\s+{control}\s+slope = (\S+)", text, re.M)
        assert float(m.group(1)) == fit_decay_order(reports, control).slope


def test_validate_without_monte_carlo(tmp_path, capsys):
    cfg = tmp_path / "v.cfg"
    cfg.write_text("epsilon_list = 0.5, 0.25\ndt = 0.01\n")
    assert main(["validate", "--config", str(cfg), "--output-dir", str(tmp_path), "--no-mc"]) == 0
    rows = list(csv.DictReader((tmp_path / "validation.csv").open()))
    assert [float(r["epsilon"]) for r in rows] == [0.5, 0.25]
    assert abs(float(rows[0]["Z_oracle"]) + 1.4447143) < 1e-5
    assert "g1 error ratios" in capsys.readouterr().out

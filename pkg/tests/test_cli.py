from __future__ import annotations

import csv
import json
import os
import subprocess
import sys

import pytest

from helpers import SCENARIOS
from uasflow import cli, scenario
from uasflow.config import config_hash, load_config
from uasflow.errors import NumericalError

SMALL = """
name: small
geometry:
  outer_min: [-10, -10]
  outer_max: [10, 10]
  regions:
    - {name: c, kind: circle, center: [0, 0], radius: 3}
floors:
  - index: 1
    gamma: {c: 1}
    uniform: {u_inf: 1, theta0: 0}
grid: {spacing: 1.0}
clusters:
  - {id: solo, entry: [-10, 6]}
integration: {dt: 0.1, horizon: 25}
"""


@pytest.fixture
def small(tmp_path):
    p = tmp_path / "small.yaml"
    p.write_text(SMALL)
    return p


def manifest(out):
    return json.loads((out / "manifest.json").read_text())


def header(path):
    with open(path, newline="") as fh:
        return next(csv.reader(fh))


class TestExitCodes:
    def test_success_and_manifest(self, small, tmp_path):
        out = tmp_path / "fd"
        assert cli.main(["macro-fd", str(small), "--out", str(out)]) == cli.EXIT_OK
        m = manifest(out)
        assert m["subcommand"] == "macro-fd"
        assert m["spec_sha256"] == config_hash(load_config(small))
        assert m["output_directory"] == "."
        assert set(m["files"]) == {"nodal_potential.csv"}
        assert m["metrics"]["flux_relative"] < 1e-8
        assert header(out / "nodal_potential.csv") == ["x_m", "y_m", "label", "phi"]

    def test_missing_file(self, tmp_path, capsys):
        assert cli.main(["micro", str(tmp_path / "nope.yaml"), "--out", str(tmp_path)]) == cli.EXIT_VALIDATION
        assert "cannot read scenario file" in capsys.readouterr().err

    def test_malformed_key_reports_line(self, tmp_path, capsys):
        p = tmp_path / "bad.yaml"
        p.write_text(SMALL.replace("spacing:", "spacingg:"))
        assert cli.main(["macro-fd", str(p), "--out", str(tmp_path / "o")]) == cli.EXIT_VALIDATION
        err = capsys.readouterr().err
        assert "bad.yaml:12: grid.spacingg: Extra inputs are not permitted" in err
        assert not (tmp_path / "o").exists()

    def test_resilient_without_events(self, small, tmp_path, capsys):
        assert cli.main(["resilient", str(small), "--out", str(tmp_path / "r")]) == cli.EXIT_VALIDATION
        assert "at least one pop-up event" in capsys.readouterr().err

    def test_numerical_failure(self, small, tmp_path, monkeypatch, capsys):
        def boom(cfg):
            raise NumericalError("singular system")

        monkeypatch.setattr(scenario, "run_macro_fd", boom)
        assert cli.main(["macro-fd", str(small), "--out", str(tmp_path / "n")]) == cli.EXIT_NUMERICAL
        assert "numerical failure: singular system" in capsys.readouterr().err

    @pytest.mark.parametrize("argv", [["micro"], ["micro", "x.yaml"], ["warp", "x.yaml", "--out", "o"], ["micro", "x.yaml", "--out", "o", "--dt", "-1"], ["micro", "x.yaml", "--out", "o", "--seed", str(2**64)]])
    def test_argument_errors(self, argv):
        with pytest.raises(SystemExit) as exc:
            cli.main(argv)
        assert exc.value.code == 2


class TestOverrides:
    def test_dt_and_seed_in_manifest(self, small, tmp_path):
        out = tmp_path / "m"
        assert cli.main(["micro", str(small), "--out", str(out), "--dt", "0.2", "--seed", "0xff"]) == 0
        m = manifest(out)
        assert m["dt_s"] == 0.2 and m["seed"] == 255
        base = load_config(small)
        eff = base.model_copy(update={"integration": base.integration.model_copy(update={"dt": 0.2}), "seed": 255})
        assert m["spec_sha256"] == config_hash(eff) != config_hash(base)
        t = (out / "trajectories.csv").read_text().splitlines()
        assert t[0] == "t_s,cluster,agent,x_m,y_m,z_m,deviation_m"
        assert t[2].startswith("0.2,")

    def test_run_writes_prefixed_tables(self, small, tmp_path):
        out = tmp_path / "all"
        assert cli.main(["run", str(small), "--out", str(out)]) == 0
        files = set(manifest(out)["files"])
        assert "macro_fd/nodal_potential.csv" in files
        assert "macro_analytic/channels.csv" in files
        assert "micro/trajectories.csv" in files
        assert (out / "micro" / "pose.csv").exists()


def test_log_level_from_environment(small, tmp_path):
    env = dict(os.environ, UASFLOW_LOG="INFO")
    proc = subprocess.run(
        [sys.executable, "-m", "uasflow.cli", "macro-analytic", str(small), "--out", str(tmp_path / "a")],
        env=env,
        capture_output=True,
        text=True,
        check=False,
    )
    assert proc.returncode == 0
    assert "INFO uasflow: wrote" in proc.stderr
    env["UASFLOW_LOG"] = "WARNING"
    quiet = subprocess.run(
        [sys.executable, "-m", "uasflow.cli", "macro-analytic", str(small), "--out", str(tmp_path / "b")],
        env=env,
        capture_output=True,
        text=True,
        check=False,
    )
    assert quiet.returncode == 0 and "INFO" not in quiet.stderr


def test_micro_scenario_ten_agents(tmp_path):
    out = tmp_path / "vc"
    assert cli.main(["micro", str(SCENARIOS / "vc_micro.yaml"), "--out", str(out)]) == 0
    with open(out / "trajectories.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert {r["agent"] for r in rows} == {str(j) for j in range(1, 11)}
    for t in ("0", "40", "80", "120", "160", "190"):
        assert (out / f"formation_t{t}.csv").exists()
    m = manifest(out)["metrics"]
    assert m["C1.q_orthogonality_max_err"] < 1e-12

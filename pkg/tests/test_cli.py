from __future__ import annotations

import subprocess
import sys

import pytest

from cli_cases import output_snapshot, stable_manifest, subcommands, write_inputs
from softpad.cli import EXIT_DOMAIN, EXIT_OK, EXIT_USAGE, main
from softpad.kvfile import read_kv


@pytest.fixture(scope="module")
def inputs(tmp_path_factory):
    return write_inputs(tmp_path_factory.mktemp("inputs"))


def test_usage_errors(tmp_path, capsys):
    assert main(["no-such-command"]) == EXIT_USAGE
    assert main([]) == EXIT_USAGE
    assert main(["drop", "--thickness-mm", "abc"]) == EXIT_USAGE
    assert main(["drop", "--jobs", "0", "--out", str(tmp_path)]) == EXIT_USAGE
    assert main(["--help"]) == EXIT_OK
    assert "gen-mesh" in capsys.readouterr().out


def test_domain_errors(tmp_path, inputs):
    out = str(tmp_path / "o")
    assert main(["drop", "--config", str(tmp_path / "missing.cfg"), "--out", out]) == EXIT_DOMAIN
    bad = tmp_path / "bad.cfg"
    bad.write_text("payload_mass=-1\n")
    assert main(["drop", "--config", str(bad), "--out", out]) == EXIT_DOMAIN
    bad.write_text("no_such_key=1\n")
    assert main(["drop", "--config", str(bad), "--out", out]) == EXIT_DOMAIN
    assert main(["rewards", "--frames", str(inputs["frames"]), "--out", out]) == EXIT_DOMAIN
    broken = tmp_path / "log.csv"
    broken.write_text("episode,scenario,time_s,link,px,py,pz,force_N\ne1,push,0,head,0,0,0,-1\n")
    assert main(["damage-map", "--log", str(broken), "--out", out]) == EXIT_DOMAIN


def test_pressure_stats_prints_reduction(tmp_path, inputs, capsys):
    args = subcommands(inputs)["pressure-stats"]
    assert main(args + ["--out", str(tmp_path)]) == EXIT_OK
    assert "median pressure reduction 42.1%" in capsys.readouterr().out
    assert "median_reduction_percent,42.1,," in (tmp_path / "stats.csv").read_text()


def test_drop_manifest_reports_step_timing(tmp_path, inputs):
    assert main(subcommands(inputs)["drop"] + ["--out", str(tmp_path)]) == EXIT_OK
    m = read_kv(tmp_path / "manifest.txt")
    assert m["subcommand"] == "drop"
    assert float(m["timing.mean_step_ms"]) > 0
    assert int(m["timing.steps"]) > 0
    for name in ("trace.csv", "summary.csv", "pressure.csv", "pressure.pgm"):
        assert f"output.{name}" in m
    assert "timing." not in stable_manifest((tmp_path / "manifest.txt").read_text())


def test_codesign_outputs(tmp_path, inputs):
    assert main(subcommands(inputs)["codesign"] + ["--out", str(tmp_path)]) == EXIT_OK
    rows = (tmp_path / "protector_spec.csv").read_text().strip().splitlines()
    assert rows[0] == "link,force_N,thickness_m,threshold_Pa,feasible"
    by_link = {r.split(",")[0]: r.split(",") for r in rows[1:]}
    assert by_link["right_foot"][2] == "0.0"
    assert by_link["head"][4] == "false"


def test_unwrap_outputs(tmp_path, inputs):
    assert main(subcommands(inputs)["unwrap"] + ["--out", str(tmp_path)]) == EXIT_OK
    svg = (tmp_path / "outline.svg").read_text()
    assert svg.count("<path") == 2
    assert len((tmp_path / "distortion.csv").read_text().strip().splitlines()) == 3


SUBCOMMANDS = ("gen-mesh", "drop", "calibrate", "sweep", "codesign", "damage-map", "pressure-stats", "unwrap", "rewards")


@pytest.mark.parametrize("name", SUBCOMMANDS)
def test_subcommand_is_deterministic(tmp_path, inputs, name):
    args = subcommands(inputs)[name]
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(args + ["--seed", "7", "--out", str(a)]) == EXIT_OK
    assert main(args + ["--seed", "7", "--out", str(b)]) == EXIT_OK
    snap_a, snap_b = output_snapshot(a), output_snapshot(b)
    assert snap_a.keys() == snap_b.keys()
    assert "manifest.txt" in snap_a and len(snap_a) >= 2
    for key in snap_a:
        assert snap_a[key] == snap_b[key], key


def test_console_script_entry_point(tmp_path, inputs):
    proc = subprocess.run(
        [sys.executable, "-m", "softpad.cli", *subcommands(inputs)["damage-map"], "--out", str(tmp_path)],
        capture_output=True,
        text=True,
    )
    assert proc.returncode == 0, proc.stderr
    assert "4 episodes" in proc.stdout

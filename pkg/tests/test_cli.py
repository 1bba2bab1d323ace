import subprocess
import sys
from pathlib import Path

import pytest

from fluidsteer import cli
from fluidsteer.control import FeedbackLaw, SynthesisError
from fluidsteer.scenario import ScenarioError, parse_scenario, scenario_from_dict, serialize

DATA = Path(__file__).parent / "data"
GOLDEN = Path(__file__).parent / "golden"
SHORT = str(DATA / "ellipse-short.toml")


def minimal(**overrides):
    raw = {"domain": {"radius": 1.0}, "body": [{"a": 0.6, "b": 0.3, "inertia": 0.1125}],
           "target": {"times": [0.0, 1.0], "poses": [[0, 0, 0], [0.1, 0, 0]]}}
    raw.update(overrides)
    return raw


# -- parsing ---------------------------------------------------------------------

@pytest.mark.parametrize("fmt", ["toml", "json"])
def test_bundled_scenario_round_trips(tmp_path, fmt):
    cfg = parse_scenario(cli.bundled_scenario("ellipse-translate"))
    path = tmp_path / f"copy.{fmt}"
    path.write_text(serialize(cfg, fmt))
    again = parse_scenario(path)
    assert again == cfg
    assert again.digest() == cfg.digest()


@pytest.mark.parametrize("name", ["ellipse-translate", "ellipse-pd", "two-body-regroup"])
def test_every_bundled_scenario_parses(name):
    assert parse_scenario(cli.bundled_scenario(name)).name == name


def test_indefinite_gain_is_rejected_by_name():
    raw = minimal(mode={"kind": "pd", "kp": [[1, 0, 0], [0, -2, 0], [0, 0, 1]], "kd": 2.0})
    with pytest.raises(ScenarioError) as info:
        scenario_from_dict(raw)
    assert any("kp" in e and "positive definite" in e for e in info.value.errors)
    assert not any("kd" in e for e in info.value.errors)


def test_waypoints_out_of_order_are_rejected():
    raw = minimal(target={"times": [0.0, 1.0, 0.5], "poses": [[0, 0, 0]] * 3})
    with pytest.raises(ScenarioError, match="increasing"):
        scenario_from_dict(raw)


def test_every_problem_is_reported():
    raw = minimal(numerics={"dt": -1.0, "resolution": 0}, gamma=[0.0, 1.0], extra={})
    with pytest.raises(ScenarioError) as info:
        scenario_from_dict(raw)
    text = " | ".join(info.value.errors)
    assert "numerics.dt" in text and "numerics.resolution" in text
    assert "gamma" in text and "extra" in text


def test_malformed_and_missing_files(tmp_path):
    bad = tmp_path / "bad.toml"
    bad.write_text("[domain\nradius = 1")
    with pytest.raises(ScenarioError, match="malformed"):
        parse_scenario(bad)
    with pytest.raises(ScenarioError, match="cannot read"):
        parse_scenario(tmp_path / "absent.toml")


# -- command line ------------------------------------------------------------------

def test_validate_writes_nothing(tmp_path, monkeypatch, capsys):
    monkeypatch.chdir(tmp_path)
    assert cli.main(["validate", "--scenario", "ellipse-translate"]) == cli.EXIT_OK
    assert list(tmp_path.iterdir()) == []
    assert "ok" in capsys.readouterr().out


@pytest.mark.parametrize("dt", ["0", "-0.001"])
def test_nonpositive_time_step_is_a_validation_error(tmp_path, dt):
    out = tmp_path / "out"
    assert cli.main(["run", "--scenario", SHORT, "--out", str(out), "--dt", dt]) == cli.EXIT_INVALID
    assert not out.exists()


def test_bad_arguments_and_missing_scenario(tmp_path):
    assert cli.main(["run"]) == cli.EXIT_INVALID
    assert cli.main(["run", "--scenario", str(tmp_path / "nope.toml")]) == cli.EXIT_INVALID


def test_short_run_writes_report_dumps_and_plots(tmp_path):
    out = tmp_path / "out"
    code = cli.main(["run", "--scenario", SHORT, "--out", str(out), "--plots", "--control-dump", "--dump-forces"])
    assert code == cli.EXIT_OK
    lines = (out / "report.csv").read_text().splitlines()
    header = [ln for ln in lines if ln.startswith("#")]
    assert any(ln.startswith("# config_hash: ") for ln in header)
    assert any(ln.startswith("# seed: 0") for ln in header)
    assert lines[len(header)].split(",")[:5] == ["t", "err_pos", "err_vel", "ctrl_residual", "ctrl_norm"]
    assert len(lines) - len(header) - 1 == 6       # t = 0 plus every second of 10 steps
    controls = (out / "controls.csv").read_text().splitlines()
    assert controls[0] == "t,stage,residual,control_norm,cache_hit,eps" and len(controls) == 1 + 40
    forces = (out / "forces.csv").read_text().splitlines()
    assert forces[0].split(",")[2:] == [f"drift_{i}" for i in (1, 2, 3)] + [f"control_{i}" for i in (1, 2, 3)]
    assert (out / "error.svg").is_file() and (out / "trajectories.svg").is_file()


def test_flags_override_file_and_are_echoed(tmp_path, capsys):
    out = tmp_path / "out"
    assert cli.main(["run", "--scenario", SHORT, "--out", str(out), "--dt", "0.004"]) == cli.EXIT_OK
    text = (out / "report.csv").read_text()
    assert '"dt":0.004' in text
    # pd needs gains, which the short scenario does not define
    assert cli.main(["run", "--scenario", SHORT, "--out", str(out), "--mode", "pd"]) == cli.EXIT_INVALID
    err = capsys.readouterr().err
    assert "mode.kp" in err and "mode.kd" in err


def test_short_run_matches_golden_file(tmp_path):
    out = tmp_path / "out"
    assert cli.main(["--threads", "1", "run", "--scenario", SHORT, "--out", str(out)]) == cli.EXIT_OK
    assert (out / "report.csv").read_bytes() == (GOLDEN / "ellipse-short.csv").read_bytes()


def test_repeated_runs_are_byte_identical(tmp_path):
    paths = []
    for k in range(2):
        out = tmp_path / f"run{k}"
        assert cli.main(["run", "--scenario", SHORT, "--out", str(out), "--control-dump"]) == cli.EXIT_OK
        paths.append(out)
    for name in ("report.csv", "controls.csv"):
        assert (paths[0] / name).read_bytes() == (paths[1] / name).read_bytes()


def test_collision_aborts_with_partial_report(tmp_path, capsys):
    out = tmp_path / "out"
    assert cli.main(["run", "--scenario", str(DATA / "ellipse-crash.toml"), "--out", str(out)]) == cli.EXIT_ABORTED
    text = (out / "report.csv").read_text()
    assert "# aborted: step " in text and "collision" in text
    rows = [ln for ln in text.splitlines() if ln and not ln.startswith(("#", "t,"))]
    assert len(rows) >= 2
    assert "aborted" in capsys.readouterr().err


def test_synthesis_failure_exits_with_solver_code(tmp_path, monkeypatch):
    def refuse(self, state, target):
        raise SynthesisError("scaling", "forced failure")

    monkeypatch.setattr(FeedbackLaw, "feedback", refuse)
    out = tmp_path / "out"
    assert cli.main(["run", "--scenario", SHORT, "--out", str(out)]) == cli.EXIT_SOLVER
    assert "forced failure" in (out / "report.csv").read_text()


@pytest.mark.slow
def test_selftest_passes_on_this_checkout():
    proc = subprocess.run([sys.executable, "-m", "fluidsteer.cli", "selftest"], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stdout[-2000:]

import json
from pathlib import Path

import pytest
import yaml

from cbflab import __version__
from cbflab.cli import main, run
from cbflab.config import ConfigError, fixture_path, load_config, parse_config

FIXTURES = sorted(p.stem for p in fixture_path("disk").parent.glob("*.yaml"))


@pytest.mark.parametrize("name", FIXTURES)
def test_fixtures_load(name):
    cfg = load_config(fixture_path(name))
    assert cfg.run["commands"]
    assert len(cfg.digest) == 64


def fixture_dict(name):
    return yaml.safe_load(fixture_path(name).read_text())


@pytest.mark.parametrize("path, value, message", [
    (("system", "drift"), ["x1", "x3"], "unknown variables"),
    (("system", "inputs"), [["1", "u3"], ["0", "1"]], "unknown variables"),
    (("system", "input_set"), {"type": "cube"}, "input_set"),
    (("system", "input_set"), {"type": "ball", "radius": -1}, "radius"),
    (("safeset", "bbox"), [[1, -1], [-1, 1]], "bbox"),
    (("safeset", "h"), "1 - x1^2 +", "safeset.h"),
    (("alpha",), {"type": "expression", "expr": "r^2"}, "alpha"),
    (("run", "commands"), ["euler", "fly"], "fly"),
    (("perturbations",), {"bad": {"field": ["x1"]}}, "perturbations.bad"),
])
def test_validation_errors_name_the_field(path, value, message):
    raw = fixture_dict("unit_disk")
    node = raw
    for key in path[:-1]:
        node = node[key]
    node[path[-1]] = value
    with pytest.raises(ConfigError, match=message):
        parse_config(raw, "test.yaml")


def test_unknown_top_level_key_is_rejected():
    raw = fixture_dict("unit_disk")
    raw["sytem"] = {}
    with pytest.raises(ConfigError, match="sytem"):
        parse_config(raw, "test.yaml")


def test_digest_tracks_content(tmp_path):
    a = tmp_path / "a.yaml"
    a.write_text(fixture_path("unit_disk").read_text())
    b = tmp_path / "b.yaml"
    b.write_text(fixture_path("unit_disk").read_text() + "\n# comment\n")
    assert load_config(a).digest == load_config(fixture_path("unit_disk")).digest
    assert load_config(a).digest != load_config(b).digest


def cli(tmp_path, *args):
    out = tmp_path / "report.json"
    code = main([*args, "--out", str(out)])
    return code, json.loads(out.read_text()) if out.exists() else None


def test_report_schema(tmp_path):
    code, rep = cli(tmp_path, "euler", "--config", "unit_disk")
    assert code == 0 and rep["exit_code"] == 0
    assert rep["schema_version"] == "1.0"
    assert rep["tool"]["version"] == __version__
    assert rep["config"]["sha256"] == load_config(fixture_path("unit_disk")).digest
    (cmd,) = rep["commands"]
    assert cmd["status"] == "ok" and cmd["result"]["chi"] == 1
    assert cmd["wall_time"] >= 0
    assert {row["theorem"] for row in rep["comparison"]} >= {"T3", "T4", "T5", "Brockett"}


@pytest.mark.parametrize("command, name, code", [
    ("brockett", "nonholonomic", 2),
    ("obstruct-t3", "unit_disk_sphere_input", 2),
    ("obstruct-t3", "unit_disk_ball_input", 0),
    ("obstruct-family", "satellite_reduced", 2),
    ("synthesize", "single_integrator", 0),
    ("synthesize", "unit_disk_sphere_input", 1),
    ("flow-invariance", "outward_field", 0),
])
def test_exit_codes(tmp_path, command, name, code):
    got, rep = cli(tmp_path, command, "--config", name)
    assert got == code == rep["exit_code"]


def test_outward_field_reports_witness(tmp_path):
    _, rep = cli(tmp_path, "flow-invariance", "--config", "outward_field")
    res = rep["commands"][0]["result"]
    assert res["passed"] is False
    assert res["min_h"] < -1e-6
    assert len(res["worst_start"]) == 2


def test_config_errors_exit_one(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    raw = fixture_dict("unit_disk")
    raw["system"]["inputs"] = [["1", "u3"], ["0", "1"]]
    bad.write_text(yaml.safe_dump(raw))
    assert main(["euler", "--config", str(bad)]) == 1
    assert "unknown variables" in capsys.readouterr().err
    assert main(["euler", "--config", str(tmp_path / "missing.yaml")]) == 1


def test_run_uses_config_commands(tmp_path):
    code, rep = cli(tmp_path, "run", "--config", "disk")
    assert code == 0
    assert [c["command"] for c in rep["commands"]] == load_config(fixture_path("disk")).run["commands"]


def test_error_outranks_violation():
    cfg = load_config(fixture_path("unit_disk_sphere_input"))
    rep = run(cfg, ["obstruct-t3", "synthesize"])
    assert [c.status for c in rep.commands] == ["ok", "error"]
    assert rep.exit_code == 1


def test_verdict_fields_are_deterministic(tmp_path):
    strip = lambda rep: [{k: v for k, v in c.items() if k != "wall_time"} for c in rep["commands"]]
    _, a = cli(tmp_path, "obstruct-t3", "--config", "unit_disk_sphere_input", "--seed", "5")
    _, b = cli(tmp_path, "obstruct-t3", "--config", "unit_disk_sphere_input", "--seed", "5")
    assert strip(a) == strip(b)


def test_resolution_override_and_csv(tmp_path):
    code, rep = cli(tmp_path, "euler", "--config", "disk", "--resolution", "32", "--csv-dir", str(tmp_path / "csv"))
    assert code == 0 and rep["commands"][0]["result"]["resolution"] == 32
    assert any(Path(tmp_path / "csv").iterdir())
    assert main(["euler", "--config", "disk", "--resolution", "0"]) == 1


def test_threads_do_not_change_results(tmp_path):
    _, a = cli(tmp_path, "flow-invariance", "--config", "unit_disk", "--threads", "1")
    _, b = cli(tmp_path, "flow-invariance", "--config", "unit_disk", "--threads", "4")
    assert a["commands"][0]["result"]["min_h"] == b["commands"][0]["result"]["min_h"]

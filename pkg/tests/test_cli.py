import json
import math
import sys

import pytest
from hypothesis import given, strategies as st

from toda_blowup.cli import EXIT_CONFIG, EXIT_STAGE, main
from toda_blowup.config import ExperimentConfig, dump_config, load_config
from toda_blowup.errors import ConfigurationError
from toda_blowup.reporting import format_value, read_csv, sha256_file, write_csv

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


def write(tmp_path, text, name="cfg.toml"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_defaults_validate():
    cfg = ExperimentConfig()
    assert cfg.k == 1 and cfg.xi == "auto"


@given(
    st.integers(1, 4),
    st.floats(0.0, 12.0),
    st.integers(0, 2**63),
    st.floats(0.01, 0.2),
    st.sampled_from(["unit-disk", "rectangle"]),
)
def test_config_round_trip(k, rho2, seed, h, kind):
    cfg = ExperimentConfig.from_dict(
        {"k": k, "rho2": rho2, "seed": seed, "mesh": {"h_target": h}, "domain": {"kind": kind, "width": 2.0}}
    )
    text = dump_config(cfg)
    again = ExperimentConfig.from_dict(tomllib.loads(text))
    assert again == cfg
    assert dump_config(again) == text
    assert again.hash() == cfg.hash()


def test_polygon_round_trip(tmp_path):
    p = write(tmp_path, '[domain]\nkind = "polygon"\nvertices = [[0, 0], [2, 0], [2, 1], [0, 1]]\n')
    cfg = load_config(p)
    assert cfg.domain_spec().area == pytest.approx(2.0)
    assert load_config(write(tmp_path, dump_config(cfg), "b.toml")) == cfg


@pytest.mark.parametrize(
    "text",
    [
        "rh02 = 0.5\n",
        "[mesh]\nh_targt = 0.1\n",
        "[ladders]\nshrink = 0.5\n",
        "rho2 = -1.0\n",
        "k = 0\n",
        "[ladder]\nlambda_start = 1e-3\nlambda_min = 1e-2\n",
        "[ladder]\nshrink = 0.95\n",
        "k = 2\nxi = [[0.1, 0.0]]\n",
        'green_mode = "fast"\n',
        "rho2 = \n",
    ],
)
def test_bad_configs_rejected(tmp_path, text):
    with pytest.raises(ConfigurationError):
        load_config(write(tmp_path, text))


def test_cli_config_error_exit(tmp_path, capsys):
    p = write(tmp_path, "rh02 = 0.5\n")
    assert main(["meanfield", "--config", str(p), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    assert "rh02" in capsys.readouterr().err


def test_format_value_round_trips():
    for x in (0.1, 1 / 3, math.pi * 1e-300, -2.5e17):
        assert float(format_value(x)) == x
    assert format_value(True) == "1" and format_value(7) == "7"


def test_csv_round_trip(tmp_path):
    p = write_csv(tmp_path / "a.csv", ["a", "b"], [{"a": 0.1, "b": 2}], {"slope": 0.5})
    cols, rows = read_csv(p)
    assert cols == ["a", "b"] and rows == [{"a": 0.1, "b": 2.0}]
    assert p.read_text().splitlines()[-1] == '# {"slope": 0.5}'


def _manifest_complete(out):
    manifest = json.loads((out / "manifest.json").read_text())
    files = {p.name for p in out.iterdir() if p.name != "manifest.json"}
    assert set(manifest["files"]) == files
    for name, digest in manifest["files"].items():
        assert sha256_file(out / name) == digest
    return manifest


def test_find_critical_closed_form(tmp_path):
    cfg = write(tmp_path, "rho2 = 0.0\n[scan]\nmultistart = 2\n")
    out = tmp_path / "fc"
    assert main(["find-critical", "--config", str(cfg), "--out", str(out)]) == 0
    best = json.loads((out / "critical.json").read_text())["best"]
    assert math.hypot(*best["xi"][0]) < 1e-6
    assert best["gradient_norm"] < 1e-5
    m = _manifest_complete(out)
    assert m["stages"]["find-critical"]["status"] == "ok"


def test_failing_stage_is_named(tmp_path, capsys):
    cfg = write(tmp_path, "k = 2\nrho2 = 0.0\n[scan]\nmultistart = 2\n")
    out = tmp_path / "fail"
    assert main(["find-critical", "--config", str(cfg), "--out", str(out)]) == EXIT_STAGE
    assert "find-critical" in capsys.readouterr().err
    m = _manifest_complete(out)
    assert m["stages"]["find-critical"]["status"] == "failed"


def test_green_check_and_meanfield(tmp_path):
    cfg = write(
        tmp_path,
        "rho2 = 0.5\nxi = [[0.0, 0.0]]\n[mesh]\nh_target = 0.1\nrefinement_levels = 2\n[scan]\ngreen_pairs = 10\n",
    )
    out = tmp_path / "gm"
    assert main(["green-check", "--config", str(cfg), "--out", str(out)]) == 0
    cols, rows = read_csv(out / "green_check.csv")
    assert rows[1]["max_abs_error"] < rows[0]["max_abs_error"]
    out2 = tmp_path / "mf"
    assert main(["meanfield", "--config", str(cfg), "--out", str(out2), "--verbosity", "2"]) == 0
    summary = json.loads((out2 / "meanfield.json").read_text())
    assert summary["nondegeneracy"]["passed"]
    assert (out2 / "meanfield_trace.csv").exists()
    _manifest_complete(out2)


def test_lambda_scan(tmp_path):
    cfg = write(tmp_path, "rho2 = 0.0\n[scan]\ngrid_points = 5\n")
    out = tmp_path / "ls"
    assert main(["lambda-scan", "--config", str(cfg), "--out", str(out)]) == 0
    _, rows = read_csv(out / "lambda_scan.csv")
    for r in rows:
        r2 = r["xi_x"] ** 2 + r["xi_y"] ** 2
        assert r["Lambda"] == pytest.approx(-8 * math.pi * math.log(1 - r2), rel=1e-12, abs=1e-12)


def test_branch_minimal(tmp_path):
    cfg = write(
        tmp_path,
        "rho2 = 0.5\nxi = [[0.0, 0.0]]\n[mesh]\nh_target = 0.08\n"
        "[ladder]\nlambda_start = 1e-2\nlambda_min = 1e-3\nshrink = 0.5\n",
    )
    out = tmp_path / "br"
    assert main(["branch", "--config", str(cfg), "--out", str(out), "--threads", "2"]) == 0
    cols, rows = read_csv(out / "branch.csv")
    assert cols == ["lambda", "rho1", "J", "defect", "newton_iterations", "u_minus_W", "jacobian_sigma_min"]
    assert abs(rows[-1]["rho1"] - 4 * math.pi) < 0.2
    _manifest_complete(out)

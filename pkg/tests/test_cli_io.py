import json
import os
import re
import subprocess
import sys
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from gmcweld import __version__
from gmcweld.cli_io import (
    ConfigError,
    JSON_SCHEMA,
    SCHEMA,
    constant_overrides,
    main,
    parse_config,
    read_config_text,
    read_csv,
    read_gridfield,
    svg_path,
)

SMALL_WELD = ["--gamma", "0", "--grid-m", "64", "--depth", "3", "--set", "beltrami.grid=64",
              "--set", "beltrami.field_n=32", "--set", "beltrami.n_list=1,2"]


def _run(tmp_path, *args):
    return main([args[0], "--out-dir", str(tmp_path), *args[1:]])


def _report(tmp_path, name):
    return json.loads((tmp_path / name).read_text())


# ---------------------------------------------------------------------------
# configuration

def test_empty_file_gives_defaults(tmp_path):
    p = tmp_path / "empty.cfg"
    p.write_text("")
    cfg = parse_config(p)
    assert (cfg["gamma"], cfg["rho"], cfg["grid_m"], cfg["depth"]) == (0.2, 1 / 16, 4096, 10)
    assert set(cfg) == set(SCHEMA)


def test_flag_overrides_file(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text("# comment\ngamma = 0.2\nbeltrami.tol = 1e-8  # trailing\n")
    cfg = parse_config(p, {"gamma": "0.3"})
    assert cfg["gamma"] == 0.3 and cfg["beltrami.tol"] == 1e-8


@pytest.mark.parametrize("raw,msg", [
    ({"gamma": "1.5"}, "sqrt 2"),
    ({"gamma": "-0.1"}, "gamma"),
    ({"rho": "1"}, "rho"),
    ({"grid_m": "100"}, "power of two"),
    ({"nonsense": "1"}, "unknown key"),
    ({"events.constants.Shape.nope": "1"}, "unknown key"),
    ({"events.list": "Shape1,Bogus"}, "unknown event"),
    ({"depth": "2.5"}, "integer"),
    ({"beltrami.box": "0,1,0,2"}, "square"),
])
def test_rejections(raw, msg):
    with pytest.raises(ConfigError, match=msg):
        parse_config(None, raw)


def test_config_text_errors():
    with pytest.raises(ConfigError, match="key = value"):
        read_config_text("gamma 0.2")
    with pytest.raises(ConfigError):
        parse_config("/nonexistent/file.cfg")


def test_rational_values_and_constants():
    cfg = parse_config(None, {"rho": "1/4", "events.constants.Shape.J": "1/8"})
    assert cfg["rho"] == 0.25
    assert constant_overrides(cfg) == {"Shape": {"J": 0.125}}


def test_exit_code_for_config_errors(tmp_path, capsys):
    assert _run(tmp_path, "sample", "--gamma", "1.5") == 2
    assert "sqrt 2" in capsys.readouterr().err
    assert _run(tmp_path, "sample", "--set", "nonsense") == 2
    assert _run(tmp_path, "moments", "--grid-m", "64", "--set", "moments.levels=4,9") == 2


def test_exit_code_for_stage_errors(tmp_path, capsys):
    # gamma above the welding cap is a pipeline failure, not a config error
    assert _run(tmp_path, "weld", *SMALL_WELD[2:], "--gamma", "0.5") == 1
    assert "weld failed" in capsys.readouterr().err


def test_thread_variable(tmp_path, monkeypatch):
    monkeypatch.setenv("GMCWELD_THREADS", "0")
    assert _run(tmp_path, "sample", "--grid-m", "16", "--depth", "1") == 2
    monkeypatch.setenv("GMCWELD_THREADS", "2")
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS"):
        monkeypatch.delenv(var, raising=False)
    assert _run(tmp_path, "sample", "--grid-m", "16", "--depth", "1") == 0
    assert os.environ["OMP_NUM_THREADS"] == "2" and os.environ["OPENBLAS_NUM_THREADS"] == "2"


def test_module_entry_point(tmp_path):
    out = subprocess.run([sys.executable, "-m", "gmcweld", "--version"], capture_output=True, text=True)
    assert out.returncode == 0 and __version__ in out.stdout


# ---------------------------------------------------------------------------
# artifacts

def _check_stamp(doc, command):
    assert doc["schema"] == JSON_SCHEMA and doc["command"] == command
    assert doc["version"] == __version__
    assert doc["seed"] == doc["config"]["seed"]
    assert set(doc["config"]) >= set(SCHEMA)
    assert isinstance(doc["grid"], dict) and doc["grid"]


@pytest.fixture(scope="module")
def weld_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("weld")
    assert main(["weld", "--out-dir", str(d), *SMALL_WELD]) == 0
    return d


def test_weld_gamma_zero_report(weld_dir):
    doc = _report(weld_dir, "weld.json")
    _check_stamp(doc, "weld")
    assert doc["result"]["consistency_error"] < 1e-6
    assert doc["result"]["radial_deviation"] < 1e-6
    assert doc["files"] == sorted(["weld_curve.svg", "weld_curve.csv", "weld_mu.bin", "weld_solution.bin"])


def test_weld_svg_is_unit_circle(weld_dir):
    root = ET.parse(weld_dir / "weld_curve.svg").getroot()
    ns = {"s": "http://www.w3.org/2000/svg"}
    paths = root.findall("s:path", ns)
    assert len(paths) == 1
    meta = json.loads(root.find("s:metadata", ns).text)
    assert meta["version"] == __version__ and meta["config"]["gamma"] == 0.0
    nums = np.array(re.findall(r"-?\d+\.\d{9}", paths[0].get("d")), dtype=float).reshape(-1, 2)
    assert nums.shape[0] == 1024
    assert np.max(np.abs(np.hypot(nums[:, 0], nums[:, 1]) - 1)) < 1e-6


def test_weld_csv_columns(weld_dir):
    lines = (weld_dir / "weld_curve.csv").read_text().splitlines()
    assert lines[0].startswith("# gmcweld-csv/1")
    assert json.loads(lines[1][2:])["seed"] == 0
    header, rows = read_csv(weld_dir / "weld_curve.csv")
    assert header == ["theta", "re", "im"]
    th, re_, im = np.array(rows, dtype=float).T
    assert np.allclose(th, 2 * np.pi * np.arange(1024) / 1024)
    assert np.max(np.abs(re_ + 1j * im - np.exp(1j * th))) < 1e-6


def test_weld_gridfields(weld_dir):
    mu, side = read_gridfield(weld_dir / "weld_mu.bin")
    assert mu.values.shape == (32, 32) and side["box"] == [-1.5, 1.5, -1.5, 1.5]
    assert np.max(np.abs(mu.values)) < 1e-10  # differencing roundoff of the identity extension
    F, side = read_gridfield(weld_dir / "weld_solution.bin")
    assert side["solver"]["n"] == 2 and side["solver"]["residual"] < side["solver"]["tol"]
    assert side["solver"]["flagged"] == 0 and side["seed"] == 0
    # identity welding: F(exp(2 pi i w)) = exp(2 pi i w) at every node
    z = F.coords()
    assert np.max(np.abs(F.values - np.exp(2j * np.pi * z))) < 1e-9


def test_determinism(tmp_path):
    args = ["walk", "--out-dir", str(tmp_path), "--set", "walk.N=20", "--set", "walk.steps=40",
            "--set", "walk.replicas=100", "--seed", "3"]
    assert main(args) == 0
    first = (tmp_path / "walk.json").read_bytes(), (tmp_path / "walk_trace.csv").read_bytes()
    assert main(args) == 0
    assert (tmp_path / "walk.json").read_bytes() == first[0]
    assert (tmp_path / "walk_trace.csv").read_bytes() == first[1]


def test_sample(tmp_path):
    assert _run(tmp_path, "sample", "--grid-m", "64", "--depth", "3", "--set", "sample.replicas=3") == 0
    doc = _report(tmp_path, "sample.json")
    _check_stamp(doc, "sample")
    assert len(doc["result"]["total_mass"]) == 3
    header, rows = read_csv(tmp_path / "sample_masses.csv")
    assert header == ["replica", "cell", "mass"] and len(rows) == 3 * 64
    masses = np.array([float(r[2]) for r in rows]).reshape(3, 64).sum(axis=1)
    assert np.allclose(masses, doc["result"]["total_mass"])


def test_moments(tmp_path):
    assert _run(tmp_path, "moments", "--grid-m", "256", "--depth", "4", "--rho", "1/4",
                "--set", "moments.replicas=50", "--set", "moments.levels=2,3,4,5") == 0
    doc = _report(tmp_path, "moments.json")
    _check_stamp(doc, "moments")
    fits = doc["result"]["fits"]
    p1 = [f for f in fits if f["p"] == 1.0][0]
    assert p1["slope"] == pytest.approx(1.0, abs=1e-12)


def test_covcheck(tmp_path):
    assert _run(tmp_path, "covcheck", "--grid-m", "256", "--depth", "3", "--rho", "1/2",
                "--set", "covcheck.replicas=200", "--set", "covcheck.offsets=8") == 0
    res = _report(tmp_path, "covcheck.json")["result"]
    for kind in ("H", "V"):
        assert res[kind] and all({"offset", "empirical", "se", "pass"} <= set(r) for r in res[kind])
    assert res["V_variance"]["offset"] == pytest.approx(np.log(2))


def test_events(tmp_path):
    assert _run(tmp_path, "events", "--gamma", "0", "--grid-m", "64", "--depth", "5",
                "--set", "events.list=Frac,Upp,Match", "--set", "events.constants.Frac.bound=0.5") == 0
    doc = _report(tmp_path, "events.json")
    rows = {r["event"]: r for r in doc["result"]["events"]}
    assert rows["Frac"]["rate"] == 1.0 and rows["Upp"]["rate"] == 1.0
    assert rows["Frac"]["constants"] == {"bound": 0.5}
    assert rows["Frac"]["replicas"] == 100
    header, data = read_csv(tmp_path / "events_indicators.csv")
    assert header == ["replica", "Frac", "Upp", "Match"] and len(data) == 100


def test_walk_field_mode(tmp_path):
    assert _run(tmp_path, "walk", "--rho", "1/2", "--gamma", "0.5", "--set", "walk.mode=field",
                "--set", "walk.N=2", "--set", "walk.steps=5", "--set", "walk.replicas=100",
                "--set", "walk.field_m=16") == 0
    doc = _report(tmp_path, "walk.json")
    assert doc["result"]["mode"] == "field" and doc["grid"]["depth"] == 13
    header, rows = read_csv(tmp_path / "walk_trace.csv")
    assert header == ["m", "Y", "i", "j", "branch"] and len(rows) == 6


def test_walk_field_mode_too_large(tmp_path):
    assert _run(tmp_path, "walk", "--set", "walk.mode=field", "--set", "walk.field_m=4096") == 2


def test_svg_path_format():
    d = svg_path(np.array([1 + 0j, 1j, -1 + 0j]))
    assert d == "M 1.000000000 -0.000000000 L 0.000000000 -1.000000000 L -1.000000000 -0.000000000 Z" or \
        d == "M 1.000000000 0.000000000 L 0.000000000 -1.000000000 L -1.000000000 0.000000000 Z"

import json
import warnings
from pathlib import Path

import numpy as np
import pytest

from plasmoheat.cli_io import (DEFAULTS, EXIT_CONFIG, EXIT_FAIL, EXIT_OK, ConfigError, cmd_field, cmd_gap_scan,
                               cmd_heat, cmd_spectrum, cmd_validate, dump_config, fit_exponent, gap_scan,
                               main, parse_config, read_csv, write_csv)
from plasmoheat.plasmonic_field import UncoupledModeWarning

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def cfg_text(**over):
    base = {"schema_version": 1, "name": "t"}
    base.update(over)
    return json.dumps(base, indent=2)


def small(**over):
    d = {"geometry": {"n": 32, "interior_h": 0.2},
         "thermal": {"time": {"T": 1.0, "n": 6, "t_min_ratio": 0.01}, "fit_window": [0.01, 1.0]},
         "output": {"svg": False}}
    d.update(over)
    return parse_config(cfg_text(**d))


# --- config ------------------------------------------------------------------

def test_defaults_round_trip():
    cfg = parse_config(cfg_text())
    assert cfg["thermal"]["gamma_c"] == DEFAULTS["thermal"]["gamma_c"]
    text = dump_config(cfg)
    assert dump_config(parse_config(text)) == text


def test_schema_error_has_line_number():
    text = '{\n  "schema_version": 1,\n  "geometry": {\n    "n": 15\n  }\n}\n'
    with pytest.raises(ConfigError) as exc:
        parse_config(text, "c.json")
    assert "c.json:4:" in str(exc.value) and "geometry/n" in str(exc.value)


@pytest.mark.parametrize("text", ["{not json", cfg_text(extra=1), '{"schema_version": 2}',
                                  cfg_text(wave={"material": {"mode": "drude"}}),
                                  cfg_text(wave={"material": {"mode": "direct"}})])
def test_bad_configs(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_cli_schema_error_exit_code(tmp_path, capsys):
    p = tmp_path / "bad.json"
    p.write_text(cfg_text(geometry={"n": -4}))
    assert main(["spectrum", "--config", str(p)]) == EXIT_CONFIG
    assert "geometry/n" in capsys.readouterr().err
    assert main(["spectrum", "--config", str(tmp_path / "missing.json")]) == EXIT_CONFIG


def test_cli_version(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--version"])
    assert exc.value.code == 0
    assert "plasmoheat" in capsys.readouterr().out


# --- csv -------------------------------------------------------------------------

def test_csv_round_trip(tmp_path):
    p = tmp_path / "a.csv"
    write_csv(p, ["i", "x", "ok"], [(0, 0.1, True), (1, -2.5e-9, False)], {"k": "v"})
    meta, header, data = read_csv(p)
    assert meta == {"k": "v"} and header == ["i", "x", "ok"]
    assert np.array_equal(data, [[0, 0.1, 1], [1, -2.5e-9, 0]])
    assert sorted(x.name for x in tmp_path.iterdir()) == ["a.csv"]


# --- spectrum ---------------------------------------------------------------------

def _spectrum(tmp_path, cfg):
    cmd_spectrum(cfg, str(tmp_path))
    return read_csv(tmp_path / "spectrum.csv")


def test_spectrum_ellipse(tmp_path):
    meta, header, data = _spectrum(tmp_path, small(geometry={"n": 128}))
    assert header == ["index", "eigenvalue", "coupling_x", "coupling_y", "is_half"]
    ev = data[:, 1]
    assert ev[0] == pytest.approx(0.5) and data[0, 4] == 1
    assert np.abs(ev - 0.1).min() < 1e-6 and np.abs(ev + 0.1).min() < 1e-6


def test_spectrum_circle(tmp_path):
    cfg = small(geometry={"curves": [{"type": "circle", "a": 0.03, "b": 0.03}], "n": 32})
    _, _, data = _spectrum(tmp_path, cfg)
    assert data[0, 1] == pytest.approx(0.5)
    assert np.abs(data[1:, 1]).max() < 1e-12


def test_spectrum_pair_clusters_toward_half(tmp_path):
    tops = []
    for gap in (0.4, 0.1):
        cfg = small(geometry={"curves": [{"type": "circle", "a": 1.0, "b": 1.0},
                                         {"type": "circle", "a": 1.0, "b": 1.0, "center": [2.0 + gap, 0.0]}],
                              "n": 128})
        _, _, data = _spectrum(tmp_path / str(gap), cfg)
        assert np.sum(data[:, 4]) == 2
        tops.append(data[data[:, 4] == 0, 1].max())
    assert tops[0] < tops[1] < 0.5


# --- field ---------------------------------------------------------------------

def test_field_deterministic(tmp_path):
    cfg = small()
    cmd_field(cfg, out=str(tmp_path / "a"))
    cmd_field(cfg, out=str(tmp_path / "b"))
    assert (tmp_path / "a" / "field.csv").read_bytes() == (tmp_path / "b" / "field.csv").read_bytes()


def test_field_no_contrast(tmp_path):
    cfg = small(wave={"material": {"mode": "direct", "lambda": [1e12, 0.0]}})
    cmd_field(cfg, out=str(tmp_path))
    meta, header, data = read_csv(tmp_path / "field.csv")
    dk = float(meta["delta"]) * float(meta["k_m"])
    assert np.abs(data[:, header.index("abs_u")] - 1).max() <= dk**2
    assert np.abs(data[:, header.index("abs_first")]).max() <= 1e-10


def test_field_uncoupled_mode_warns(tmp_path):
    cfg = small(wave={"direction": [1.0, 0.0]})
    with pytest.warns(UncoupledModeWarning):
        cmd_field(cfg, mode=2, out=str(tmp_path))
    assert (tmp_path / "field.csv").exists()


def test_field_drude_mode(tmp_path):
    cfg = small(wave={"material": {"mode": "drude", "omega": 2.5, "eps_inf": 9.84, "omega_p": 9.0,
                                   "gamma_d": 0.067}})
    cmd_field(cfg, out=str(tmp_path))
    meta, _, _ = read_csv(tmp_path / "field.csv")
    assert meta["mode"] == "none"


# --- heat -----------------------------------------------------------------------

def test_heat_outputs(tmp_path):
    cfg = small()
    cmd_heat(cfg, out=str(tmp_path))
    meta, header, data = read_csv(tmp_path / "heat.csv")
    assert header == ["component_id", "theta", "t", "tau", "tau_zeroth", "tau_first"]
    assert meta["lambda_gamma"] == "0.501890"
    assert np.isfinite(float(meta["zeroth_log_slope"]))
    assert data.shape == (32 * 6, 6)
    summary = json.loads((tmp_path / "heat_summary.json").read_text())
    assert summary["lambda_gamma"] == pytest.approx(0.5019, abs=1e-4)
    assert read_csv(tmp_path / "heat_projected.csv")[0]["variant"] == "projected"


def test_heat_no_dissipation(tmp_path):
    cfg = small(thermal={"source": {"omega": 2.0, "im_eps_c": 0.0},
                         "time": {"T": 1.0, "n": 4, "t_min_ratio": 0.1}})
    cmd_heat(cfg, out=str(tmp_path))
    _, header, data = read_csv(tmp_path / "heat.csv")
    assert np.abs(data[:, 3:]).max() == 0.0


# --- gap scan ----------------------------------------------------------------------

def test_fit_exponent_synthetic():
    g = np.array([0.1, 0.05, 0.02, 0.01])
    p, c = fit_exponent(g, 0.7 * g**0.5)
    assert abs(p - 0.5) <= 1e-6 and abs(c - 0.7) <= 1e-6


def test_gap_scan_single_particle(tmp_path):
    cfg = small(gap_scan={"particles": 1, "n": 32, "gaps": [0.2, 0.1, 0.05]})
    cmd_gap_scan(cfg, out=str(tmp_path))
    meta, _, _ = read_csv(tmp_path / "gap_scan.csv")
    assert meta["exponent"] == "none"


def test_gap_scan_reports_failed_gap():
    rows = gap_scan(1.0, [0.5, 1e-9], 32, 0.0)
    assert rows[0]["status"] == "ok"
    assert rows[1]["status"].startswith("failed")


def test_gap_scan_needs_three_gaps(tmp_path):
    with pytest.raises(ValueError):
        cmd_gap_scan(small(), gaps=[0.1, 0.2], out=str(tmp_path))


def test_gap_scan_deficits_shrink(tmp_path):
    cfg = small(gap_scan={"n": 128, "grading": 0.8, "gaps": [0.2, 0.1, 0.05]})
    cmd_gap_scan(cfg, out=str(tmp_path))
    meta, _, data = read_csv(tmp_path / "gap_scan.csv")
    assert np.all(np.diff(data[:, 2]) < 0)
    assert float(meta["exponent"]) > 0


# --- validate -------------------------------------------------------------------------

def test_validate_coarse_mesh_fails_calderon(tmp_path):
    # single-ellipse operators satisfy the identity exactly at any n, so use a close pair
    pair = json.loads((CONFIGS / "pair.json").read_text())["geometry"]["curves"]
    cfg = small(geometry={"curves": pair, "n": 16})
    code, path = cmd_validate(cfg, str(tmp_path), quick=True)
    assert code == EXIT_FAIL
    report = json.loads(path.read_text())
    cal = next(c for c in report["checks"] if c["name"] == "calderon_identity")
    assert not cal["passed"] and "increase geometry.n" in cal["message"]
    cfg64 = small(geometry={"curves": pair, "n": 64})
    code, path = cmd_validate(cfg64, str(tmp_path / "b"), quick=True)
    cal = next(c for c in json.loads(path.read_text())["checks"] if c["name"] == "calderon_identity")
    assert code == EXIT_FAIL and cal["value"] > 1e-8 and "increase geometry.n" in cal["message"]


def test_validate_quick_passes(tmp_path, monkeypatch, capsys):
    p = tmp_path / "c.json"
    p.write_text(cfg_text(geometry={"n": 128}, output={"svg": False}))
    monkeypatch.setenv("PLASMOHEAT_THREADS", "1")
    assert main(["validate", "--config", str(p), "--out", str(tmp_path / "o"), "--quick"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "PASS calderon_identity" in out and "FAIL" not in out


def test_cli_spectrum_lists_files(tmp_path, capsys):
    p = tmp_path / "c.json"
    p.write_text(cfg_text(geometry={"n": 32}))
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        assert main(["spectrum", "--config", str(p), "--out", str(tmp_path / "o")]) == EXIT_OK
    out = capsys.readouterr().out
    assert "spectrum.csv" in out and "spectrum.svg" in out
    assert (tmp_path / "o" / "config.resolved.json").exists()

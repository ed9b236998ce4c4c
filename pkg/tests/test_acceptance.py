"""Acceptance criteria 1-11; each test also leaves one PASS/FAIL line for the terminal summary."""
from pathlib import Path

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from plasmoheat.cli_io import (Setup, check_dF_dnu, check_ellipse_spectrum, check_gap_scan, check_lambda_gamma,
                               check_resonance, check_series_slopes, cmd_validate, fd_disk_comparison,
                               load_config, run_heat)
from plasmoheat.geometry import build_ellipse, discretize
from plasmoheat.heat import log_time_fit, total_boundary_heat
from plasmoheat.helmholtz_bie import IncidentWave, WaveParams, eval_field, solve_transmission
from plasmoheat.np_core import LaplaceLayers, calderon_residual
from plasmoheat.plasmonic_field import coupling_spectrum, inner_field_asymptotic

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def record(key: str, ok: bool, text: str) -> bool:
    ACCEPTANCE_LINES[key] = f"{'PASS' if ok else 'FAIL'} criterion {key.lstrip('0')}: {text}"
    print(ACCEPTANCE_LINES[key])
    return ok


def test_criterion_01_lambda_gamma():
    c = check_lambda_gamma()
    assert record("01", c["passed"], f"{c['message']}, |diff from 0.5019| = {c['value']:.2e} <= 1e-4")


def test_criterion_02_ellipse_spectrum():
    c = check_ellipse_spectrum(256)
    assert record("02", c["passed"], f"3:2 ellipse n=256, max error {c['value']:.2e} <= 1e-3")


def test_criterion_03_calderon(ellipse_layers):
    L = ellipse_layers
    res = calderon_residual(L.Stilde, L.Kstar, L.K)
    assert record("03", res <= 1e-8, f"3:2 ellipse n=256, relative residual {res:.2e} <= 1e-8")


def test_criterion_04_series_slopes():
    a, b = check_series_slopes()
    ok = a["passed"] and b["passed"]
    assert record("04", ok, f"operator {a['message']}, inverse {b['message']} (target 1 +- 10%)")


@pytest.fixture(scope="module")
def ellipse_config():
    cfg = load_config(CONFIGS / "ellipse.json")
    return cfg, Setup(cfg)


def test_criterion_05_transmission_order():
    curve = build_ellipse(1.0, 2.0 / 3.0)
    mesh_B = discretize([curve], 128)
    d = LaplaceLayers.build(mesh_B).decomp
    dvec = np.array([1.0, 1.0]) / np.sqrt(2)
    j = coupling_spectrum(d, mesh_B).strongest(dvec)
    lam = d.eigenvalues[j] + 0.05j
    inc = IncidentWave(dvec, 1.0)
    z = np.array([0.3, -0.2])
    rng = np.random.default_rng(3)
    s, t = np.sqrt(rng.uniform(0, 0.64, 150)), rng.uniform(-np.pi, np.pi, 150)
    pts = curve.center + s[:, None] * (curve.point(t) - curve.center)
    etas = [0.04, 0.02, 0.01]
    errs = []
    for eta in etas:
        delta = eta * 2 * np.pi / curve.diameter()
        wave = WaveParams.from_lambda(lam, 1.0)
        mD = discretize([curve.affine(z, delta)], 128)
        sol = solve_transmission(mD, wave, inc)
        u = eval_field(mD, sol.psi, sol.phi, wave, z + delta * pts, "interior", upsample=8)
        fs = inner_field_asymptotic(d, mesh_B, pts, z, delta, wave.field_lambda, inc)
        errs.append(np.linalg.norm(u - fs.total) / np.linalg.norm(u))
    slope = np.polyfit(np.log(etas), np.log(errs), 1)[0]
    errs_txt = ", ".join(f"{e:.2e}" for e in errs)
    assert record("05", slope >= 2.5, f"relative L2 errors [{errs_txt}], fitted order {slope:.2f} >= 2.5")


def test_criterion_06_resonant_enhancement(ellipse_config):
    c = check_resonance(ellipse_config[1])
    assert record("06", c["passed"], f"first-order ratio {c['value']:.1f} >= 100 ({c['message']})")


def test_criterion_07_dF_dnu():
    c = check_dF_dnu(32)
    assert record("07", c["passed"], f"max relative error {c['value']:.2e} <= 1e-4, {c['message']}")


@pytest.fixture(scope="module")
def heat_run(ellipse_config):
    cfg, s = ellipse_config
    res = run_heat(s, cfg["wave"]["mode"])
    lo, hi = cfg["thermal"]["fit_window"]
    out = {}
    for v in ("direct", "projected"):
        tot = total_boundary_heat(res[v])
        t = tot["t"]
        sel = (t >= lo * (1 - 1e-12)) & (t <= hi * (1 + 1e-12))
        out[v] = {"t": t[sel], "zeroth": tot["zeroth"][sel], "first": tot["first"][sel]}
    return out


def _increment_ratio(first: np.ndarray) -> float:
    """Last increment over the first one on the log-spaced window; tends to 0 for a converging series."""
    inc = np.abs(np.diff(first))
    return float(inc[-1] / max(inc[0], 1e-300))


def test_criterion_08a_zeroth_log_linear(heat_run):
    h = heat_run["direct"]
    slope, _, r2 = log_time_fit(h["t"], h["zeroth"])
    assert record("08a", r2 >= 0.99, f"zeroth total vs log t on [0.1, 10]: slope {slope:.4e}, R^2 {r2:.8f} >= 0.99")


def test_criterion_08b_first_order_converges(heat_run):
    # the variant confirmed by the FD oracle (criterion 9) is the direct one; its resolvent carries the
    # equilibrium component whose boundary potential keeps growing like log t
    rd, rp = _increment_ratio(heat_run["direct"]["first"]), _increment_ratio(heat_run["projected"]["first"])
    ok = rd <= 0.05
    assert record("08b", ok, f"last/first increment ratio {rd:.3f} (direct variant) <= 0.05; "
                             f"projected variant {rp:.3e}")


def test_criterion_09_fd_oracle():
    r = fd_disk_comparison()
    best = min(r["err_direct"], r["err_projected"])
    assert record("09", best <= 0.05, f"matching variant {r['matching']}: relative error {best:.2e} <= 0.05 "
                                      f"(direct {r['err_direct']:.2e}, projected {r['err_projected']:.2e})")


def test_criterion_10_gap_scan():
    c = check_gap_scan()
    assert record("10", c["passed"], c["message"])


def test_criterion_11_validate_deterministic(tmp_path):
    results = []
    for name in ("ellipse", "pair", "disk"):
        cfg = load_config(CONFIGS / f"{name}.json")
        codes, blobs = [], []
        for rep in range(2):
            code, path = cmd_validate(cfg, out=str(tmp_path / f"{name}{rep}"))
            codes.append(code)
            blobs.append((path.parent / "validate.csv").read_bytes())
        results.append((name, codes, blobs[0] == blobs[1]))
    ok = all(c == [0, 0] and same for _, c, same in results)
    txt = "; ".join(f"{n} exit {c} identical={same}" for n, c, same in results)
    assert record("11", ok, txt)

"""Command line front end: configuration, experiment pipelines and file export.

Usage::

    plasmoheat <spectrum|coupling|field|heat|gap-scan|validate> --config run.json [--mode J] [--out DIR]

Configs are JSON documents with a ``schema_version`` field; missing entries
are filled from ``DEFAULTS`` and the resolved document is echoed next to the
outputs. CSV files start with ``#``-prefixed metadata lines and are the data
contract; SVG files are quick looks.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import sys
import tempfile
import time
import warnings
from pathlib import Path
from typing import Any, Callable, Sequence

import jsonschema
import numpy as np

from . import __version__
from .geometry import InteriorMesh, ParamCurve, build_circle, build_ellipse, discretize, mesh_interior
from .helmholtz_bie import IncidentWave, assemble_Sk, inv_Sk_asymptotic, series_Sk
from .np_core import ConditioningError, GeometryDegeneracyError, LaplaceLayers, calderon_residual
from .plasmonic_field import (RESONANCE_SHIFT, UncoupledModeWarning, coupling_spectrum, drude_epsilon,
                              inner_field_asymptotic, resonant_lambda)
from .heat import (FDGrid, HeatSource, ThermalParams, build_volume_rule, F_D, dF_dnu, fd_heat_oracle,
                   inside_curve, log_time_fit, temperature_boundary, temperature_boundary_projected,
                   total_boundary_heat, variant_difference)

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_CONFIG = 2


class ConfigError(ValueError):
    """Config file is unreadable or violates the schema."""


# ---------------------------------------------------------------------------
# Schema and defaults
# ---------------------------------------------------------------------------

_POS = {"type": "number", "exclusiveMinimum": 0}
_VEC2 = {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2}

CONFIG_SCHEMA: dict = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["schema_version"],
    "additionalProperties": False,
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "name": {"type": "string"},
        "units": {"enum": ["nondimensional", "SI"]},
        "seed": {"type": "integer", "minimum": 0},
        "geometry": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "curves": {
                    "type": "array", "minItems": 1,
                    "items": {
                        "type": "object",
                        "required": ["type", "a", "b"],
                        "additionalProperties": False,
                        "properties": {
                            "type": {"enum": ["ellipse", "circle"]},
                            "a": _POS, "b": _POS,
                            "center": _VEC2,
                            "rotation": {"type": "number"},
                            "grading": {
                                "type": "object",
                                "required": ["theta0", "strength"],
                                "additionalProperties": False,
                                "properties": {"theta0": {"type": "number"},
                                               "strength": {"type": "number", "minimum": 0,
                                                            "exclusiveMaximum": 1}},
                            },
                        },
                    },
                },
                "n": {"type": "integer", "minimum": 16, "multipleOf": 2},
                "interior_h": {"type": "number", "exclusiveMinimum": 0, "maximum": 0.5},
            },
        },
        "wave": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "wavelength": _POS,
                "direction": _VEC2,
                "eps_m": _POS,
                "material": {
                    "type": "object",
                    "additionalProperties": False,
                    "required": ["mode"],
                    "properties": {
                        "mode": {"enum": ["resonance", "direct", "drude"]},
                        "shift": {"type": "number", "exclusiveMinimum": 0},
                        "lambda": _VEC2,
                        "omega": _POS,
                        "eps_inf": _POS,
                        "omega_p": _POS,
                        "gamma_d": _POS,
                    },
                },
                "mode": {"type": ["integer", "null"], "minimum": 1},
            },
        },
        "thermal": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "gamma_c": _POS, "gamma_m": _POS, "rhoC_c": _POS, "rhoC_m": _POS,
                "source": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "scale": {"type": "number", "minimum": 0},
                        "omega": _POS,
                        "im_eps_c": {"type": "number", "minimum": 0},
                    },
                },
                "time": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "T": _POS,
                        "n": {"type": "integer", "minimum": 3},
                        "t_min_ratio": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                    },
                },
                "fit_window": _VEC2,
            },
        },
        "gap_scan": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "particles": {"enum": [1, 2]},
                "radius": _POS,
                "gaps": {"type": "array", "items": _POS, "minItems": 3},
                "n": {"type": "integer", "minimum": 16, "multipleOf": 2},
                "grading": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
            },
        },
        "output": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"dir": {"type": "string"}, "svg": {"type": "boolean"}},
        },
    },
}

DEFAULTS: dict = {
    "schema_version": SCHEMA_VERSION,
    "name": "ellipse",
    "units": "nondimensional",
    "seed": 0,
    "geometry": {
        "curves": [{"type": "ellipse", "a": 0.03, "b": 0.02, "center": [0.0, 0.0], "rotation": 0.0}],
        "n": 128,
        "interior_h": 0.1,
    },
    "wave": {
        "wavelength": 0.75,
        "direction": [1.0, 1.0],
        "eps_m": 1.0,
        "material": {"mode": "resonance", "shift": 1e-3},
        "mode": None,
    },
    "thermal": {
        "gamma_c": 318.0, "gamma_m": 0.6, "rhoC_c": 318.0, "rhoC_m": 0.6,
        "source": {"scale": 1.0},
        "time": {"T": 10.0, "n": 64, "t_min_ratio": 1e-3},
        "fit_window": [0.1, 10.0],
    },
    "gap_scan": {"particles": 2, "radius": 1.0, "gaps": [0.01, 0.005, 0.0025], "n": 512, "grading": 0.97},
    "output": {"dir": "out", "svg": True},
}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k != "material":
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _line_of(text: str, path: Sequence) -> int | None:
    """Best-effort line number of the innermost key of ``path`` in the raw text."""
    keys = [p for p in path if isinstance(p, str)]
    if not keys:
        return None
    needle = f'"{keys[-1]}"'
    for i, line in enumerate(text.splitlines(), 1):
        if needle in line:
            return i
    return None


def parse_config(text: str, source: str = "<config>") -> dict:
    """Validate a JSON config and return it merged with the defaults.

    Raises
    ------
    ConfigError
        With a ``source:line`` prefix when the location is known.
    """
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{source}:{exc.lineno}: invalid JSON: {exc.msg}") from exc
    validator = jsonschema.Draft202012Validator(CONFIG_SCHEMA)
    errors = sorted(validator.iter_errors(raw), key=lambda e: list(e.absolute_path))
    if errors:
        msgs = []
        for e in errors:
            line = _line_of(text, list(e.absolute_path))
            where = "/".join(str(p) for p in e.absolute_path) or "<root>"
            msgs.append(f"{source}:{line if line else '?'}: {where}: {e.message}")
        raise ConfigError("\n".join(msgs))
    cfg = _merge(DEFAULTS, raw)
    mat = cfg["wave"]["material"]
    if mat["mode"] == "drude" and not all(k in mat for k in ("omega", "eps_inf", "omega_p", "gamma_d")):
        raise ConfigError(f"{source}: wave/material: drude mode needs omega, eps_inf, omega_p, gamma_d")
    if mat["mode"] == "direct" and "lambda" not in mat:
        raise ConfigError(f"{source}: wave/material: direct mode needs lambda = [re, im]")
    return cfg


def load_config(path: str | Path) -> dict:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"{p}: cannot read config: {exc}") from exc
    return parse_config(text, str(p))


def dump_config(cfg: dict) -> str:
    return json.dumps(cfg, indent=2, sort_keys=True) + "\n"


# ---------------------------------------------------------------------------
# Output helpers
# ---------------------------------------------------------------------------

def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="\n") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, str):
        return v
    v = float(v)
    if v == 0:
        return "0"
    return f"{v:.12e}"


def write_csv(path: Path, columns: Sequence[str], rows, meta: dict | None = None) -> None:
    lines = [f"# {k}: {v}" for k, v in (meta or {}).items()]
    lines.append(",".join(columns))
    for r in rows:
        lines.append(",".join(_fmt(v) for v in r))
    _atomic_write(path, "\n".join(lines) + "\n")


def read_csv(path: Path) -> tuple[dict, list[str], np.ndarray]:
    meta, header, data = {}, None, []
    for line in Path(path).read_text().splitlines():
        if line.startswith("#"):
            k, _, v = line[1:].partition(":")
            meta[k.strip()] = v.strip()
        elif header is None:
            header = line.split(",")
        else:
            data.append([_num(x) for x in line.split(",")])
    return meta, header, np.array(data)


def _num(x: str) -> float:
    """Float value of a CSV cell; text cells such as status strings map to NaN."""
    try:
        return float(x)
    except ValueError:
        return np.nan


_PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"]


def svg_lines(series: dict[str, tuple[np.ndarray, np.ndarray]], title: str, xlabel: str, ylabel: str,
              logx: bool = False, logy: bool = False, markers: bool = False) -> str:
    """Minimal static line plot."""
    W, H, m = 640, 420, 60
    xs = [np.log10(x) if logx else np.asarray(x, float) for x, _ in series.values()]
    ys = [np.log10(np.abs(y) + 1e-300) if logy else np.asarray(y, float) for _, y in series.values()]
    allx, ally = np.concatenate(xs), np.concatenate(ys)
    x0, x1 = float(allx.min()), float(allx.max())
    y0, y1 = float(ally.min()), float(ally.max())
    x1 = x1 if x1 > x0 else x0 + 1
    y1 = y1 if y1 > y0 else y0 + 1

    def px(x):
        return m + (x - x0) / (x1 - x0) * (W - 2 * m)

    def py(y):
        return H - m - (y - y0) / (y1 - y0) * (H - 2 * m)

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="12">',
           f'<rect width="{W}" height="{H}" fill="white"/>',
           f'<text x="{W / 2}" y="20" text-anchor="middle" font-size="14">{title}</text>',
           f'<line x1="{m}" y1="{H - m}" x2="{W - m}" y2="{H - m}" stroke="black"/>',
           f'<line x1="{m}" y1="{m}" x2="{m}" y2="{H - m}" stroke="black"/>',
           f'<text x="{W / 2}" y="{H - 15}" text-anchor="middle">{xlabel}{" (log10)" if logx else ""}</text>',
           f'<text x="15" y="{H / 2}" text-anchor="middle" transform="rotate(-90 15 {H / 2})">'
           f'{ylabel}{" (log10)" if logy else ""}</text>']
    for v, pos in ((x0, "start"), (x1, "end")):
        out.append(f'<text x="{px(v):.1f}" y="{H - m + 15}" text-anchor="{pos}">{v:.3g}</text>')
    for v in (y0, y1):
        out.append(f'<text x="{m - 5}" y="{py(v):.1f}" text-anchor="end">{v:.3g}</text>')
    for i, (name, x, y) in enumerate(zip(series, xs, ys)):
        c = _PALETTE[i % len(_PALETTE)]
        pts = " ".join(f"{px(a):.1f},{py(b):.1f}" for a, b in zip(x, y))
        if markers:
            out += [f'<circle cx="{px(a):.1f}" cy="{py(b):.1f}" r="2.5" fill="{c}"/>' for a, b in zip(x, y)]
        else:
            out.append(f'<polyline points="{pts}" fill="none" stroke="{c}" stroke-width="1.5"/>')
        out.append(f'<text x="{W - m - 5}" y="{m + 15 * (i + 1)}" text-anchor="end" fill="{c}">{name}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def svg_heatmap(points: np.ndarray, values: np.ndarray, title: str) -> str:
    """Scatter heat map of values at 2D points (viridis-like ramp)."""
    W, H, m = 520, 520, 40
    p = np.asarray(points, float)
    lo, hi = p.min(0), p.max(0)
    span = float(max(hi - lo)) or 1.0
    v = np.asarray(values, float)
    vn = (v - v.min()) / (np.ptp(v) or 1.0)
    stops = np.array([[68, 1, 84], [59, 82, 139], [33, 145, 140], [94, 201, 98], [253, 231, 37]], float)
    r = max(2.0, 0.6 * (W - 2 * m) / np.sqrt(max(len(p), 1)))
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="12">',
           f'<rect width="{W}" height="{H}" fill="white"/>',
           f'<text x="{W / 2}" y="20" text-anchor="middle" font-size="14">{title} '
           f'[{v.min():.3g}, {v.max():.3g}]</text>']
    for (x, y), t in zip(p, vn):
        k = min(int(t * 4), 3)
        f = t * 4 - k
        c = (1 - f) * stops[k] + f * stops[k + 1]
        cx = m + (x - lo[0]) / span * (W - 2 * m)
        cy = H - m - (y - lo[1]) / span * (H - 2 * m)
        out.append(f'<circle cx="{cx:.1f}" cy="{cy:.1f}" r="{r:.1f}" fill="rgb({c[0]:.0f},{c[1]:.0f},{c[2]:.0f})"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


# ---------------------------------------------------------------------------
# Building blocks shared by the commands
# ---------------------------------------------------------------------------

def build_curves(cfg: dict, graded: bool = True) -> list[ParamCurve]:
    """Curves of the config; ``graded=False`` drops node grading (same point sets)."""
    curves = []
    for c in cfg["geometry"]["curves"]:
        center = c.get("center", [0.0, 0.0])
        if c["type"] == "circle":
            curve = build_circle(c["a"], center)
        else:
            curve = build_ellipse(c["a"], c["b"], center, c.get("rotation", 0.0))
        if graded and "grading" in c:
            curve = curve.graded(c["grading"]["theta0"], c["grading"]["strength"])
        curves.append(curve)
    return curves


class Setup:
    """Meshes and Laplace layers for a config's geometry (built once per command)."""

    def __init__(self, cfg: dict):
        self.cfg = cfg
        self.curves = build_curves(cfg)
        self.mesh = discretize(self.curves, cfg["geometry"]["n"])
        self.layers = LaplaceLayers.build(self.mesh)
        pts = self.mesh.nodes
        self.z = 0.5 * (pts.min(0) + pts.max(0))
        self.delta = 0.5 * self.mesh.diameter()
        self.B_curves = [c.affine(-self.z / self.delta, 1.0 / self.delta) for c in self.curves]
        self.mesh_B = discretize(self.B_curves, cfg["geometry"]["n"])
        self.layers_B = LaplaceLayers.build(self.mesh_B)
        self._interiors = None

    @property
    def interiors(self) -> list[InteriorMesh]:
        if self._interiors is None:
            h = self.cfg["geometry"]["interior_h"]
            out = []
            # graded parametrizations distort the polar interior map, so mesh the plain curves
            for c in build_curves(self.cfg, graded=False):
                p = c.params
                size = min(p["a"], p["b"]) if "b" in p else p.get("radius", c.diameter() / 2)
                out.append(mesh_interior(c, h * size))
            self._interiors = out
        return self._interiors

    @property
    def k_m(self) -> float:
        return 2 * np.pi * np.sqrt(self.cfg["wave"]["eps_m"]) / self.cfg["wave"]["wavelength"]

    @property
    def direction(self) -> np.ndarray:
        d = np.asarray(self.cfg["wave"]["direction"], float)
        return d / np.linalg.norm(d)

    def incident(self) -> IncidentWave:
        return IncidentWave(self.direction, self.k_m)

    def resolvent_lambda(self, mode: int | None) -> tuple[complex, int | None]:
        """Resolvent parameter for the inner-field formula and the mode it targets."""
        mat = self.cfg["wave"]["material"]
        decomp = self.layers_B.decomp
        if mat["mode"] == "direct":
            return complex(*mat["lambda"]), None
        if mat["mode"] == "drude":
            eps_c = complex(drude_epsilon(mat["omega"], mat["eps_inf"], mat["omega_p"], mat["gamma_d"]))
            lam_eps = (eps_c + self.cfg["wave"]["eps_m"]) / (2 * (eps_c - self.cfg["wave"]["eps_m"]))
            return -lam_eps, None
        cs = coupling_spectrum(decomp, self.mesh_B)
        j = cs.strongest(self.direction) if mode is None else int(mode)
        total = np.abs(self.direction[0] * cs.coupling_x) + np.abs(self.direction[1] * cs.coupling_y)
        if total[j] < 1e-6 * total.max():
            warnings.warn(f"mode {j} is not coupled to the illumination direction", UncoupledModeWarning,
                          stacklevel=2)
        return resonant_lambda(decomp, j, mat.get("shift", abs(RESONANCE_SHIFT)) * 1j), j

    def field_fn(self, lam: complex) -> Callable[[np.ndarray], np.ndarray]:
        inc = self.incident()

        def u(p):
            pb = (np.atleast_2d(p) - self.z) / self.delta
            return inner_field_asymptotic(self.layers_B.decomp, self.mesh_B, pb, self.z, self.delta, lam,
                                          inc).total
        return u

    def thermal(self) -> ThermalParams:
        t = self.cfg["thermal"]
        return ThermalParams(t["gamma_c"], t["gamma_m"], t["rhoC_c"], t["rhoC_m"])

    def source_scale(self) -> float:
        s = self.cfg["thermal"]["source"]
        if "omega" in s or "im_eps_c" in s:
            return s.get("omega", 2 * np.pi) * s.get("im_eps_c", 0.0) / (2 * np.pi * self.cfg["thermal"]["gamma_c"])
        return float(s.get("scale", 1.0))

    def time_grid(self) -> np.ndarray:
        t = self.cfg["thermal"]["time"]
        return np.concatenate([[0.0], np.geomspace(t["T"] * t["t_min_ratio"], t["T"], t["n"] - 1)])


def _meta(cfg: dict, command: str, extra: dict | None = None) -> dict:
    m = {"plasmoheat": __version__, "command": command, "config": cfg.get("name", ""),
         "schema_version": cfg["schema_version"], "units": cfg["units"]}
    m.update(extra or {})
    return m


def _out_dir(cfg: dict, out: str | None) -> Path:
    d = Path(out if out is not None else cfg["output"]["dir"])
    d.mkdir(parents=True, exist_ok=True)
    _atomic_write(d / "config.resolved.json", dump_config(cfg))
    return d


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_spectrum(cfg: dict, out: str | None = None) -> list[Path]:
    """Eigenvalues of K* with the couplings of both normal components."""
    d = _out_dir(cfg, out)
    s = Setup(cfg)
    dec = s.layers.decomp
    cs = coupling_spectrum(dec, s.mesh)
    half = np.zeros(dec.n, bool)
    half[dec.half_indices] = True
    rows = [(j, dec.eigenvalues[j], cs.coupling_x[j], cs.coupling_y[j], half[j]) for j in range(dec.n)]
    path = d / "spectrum.csv"
    write_csv(path, ["index", "eigenvalue", "coupling_x", "coupling_y", "is_half"], rows,
              _meta(cfg, "spectrum", {"n": s.mesh.n, "gram_residual": f"{dec.gram_residual:.3e}"}))
    files = [path]
    if cfg["output"]["svg"]:
        j = np.arange(dec.n)
        svg = svg_lines({"|(nu_x, phi_j)|": (j, cs.coupling_x), "|(nu_y, phi_j)|": (j, cs.coupling_y),
                         "lambda_j": (j, dec.eigenvalues)}, "spectrum and couplings", "j", "value", markers=True)
        _atomic_write(d / "spectrum.svg", svg)
        files.append(d / "spectrum.svg")
    return files


def cmd_coupling(cfg: dict, out: str | None = None) -> list[Path]:
    """Coupling table sorted by strength for the configured illumination direction."""
    d = _out_dir(cfg, out)
    s = Setup(cfg)
    dec = s.layers.decomp
    cs = coupling_spectrum(dec, s.mesh)
    dirc = np.abs(s.direction[0] * cs.coupling_x) + np.abs(s.direction[1] * cs.coupling_y)
    order = np.lexsort((np.arange(dec.n), -np.round(dirc, 12)))
    rows = [(j, dec.eigenvalues[j], cs.coupling_x[j], cs.coupling_y[j], dirc[j]) for j in order]
    path = d / "coupling.csv"
    write_csv(path, ["index", "eigenvalue", "coupling_x", "coupling_y", "coupling_d"], rows,
              _meta(cfg, "coupling", {"strongest_x": cs.strongest((1, 0)), "strongest_y": cs.strongest((0, 1)),
                                      "strongest_d": cs.strongest(s.direction)}))
    return [path]


def cmd_field(cfg: dict, mode: int | None = None, out: str | None = None) -> list[Path]:
    """Inner field on interior sample points split into orders."""
    d = _out_dir(cfg, out)
    s = Setup(cfg)
    lam, j = s.resolvent_lambda(mode if mode is not None else cfg["wave"]["mode"])
    pts = np.concatenate([im.centroids for im in s.interiors])
    pb = (pts - s.z) / s.delta
    sol = inner_field_asymptotic(s.layers_B.decomp, s.mesh_B, pb, s.z, s.delta, lam, s.incident())
    grad = s.incident().gradient(s.z[None, :])[0]
    fx = sol.first_parts[:, 0] * grad[0]
    fy = sol.first_parts[:, 1] * grad[1]
    rows = [(p[0], p[1], u.real, u.imag, abs(u), abs(z0), abs(f1), abs(a), abs(b))
            for p, u, z0, f1, a, b in zip(sol.points, sol.total, sol.zeroth, sol.first, fx, fy)]
    path = d / "field.csv"
    write_csv(path, ["x", "y", "re_u", "im_u", "abs_u", "abs_zeroth", "abs_first", "abs_first_x", "abs_first_y"],
              rows, _meta(cfg, "field", {"mode": j if j is not None else "none",
                                         "lambda": f"{lam.real:.12e}{lam.imag:+.12e}j",
                                         "delta": f"{s.delta:.12e}", "k_m": f"{s.k_m:.12e}"}))
    files = [path]
    if cfg["output"]["svg"]:
        for name, vals in (("abs_u", np.abs(sol.total)), ("abs_zeroth", np.abs(sol.zeroth)),
                           ("abs_first", np.abs(sol.first))):
            _atomic_write(d / f"field_{name}.svg", svg_heatmap(sol.points, vals, name))
            files.append(d / f"field_{name}.svg")
    return files


def run_heat(s: Setup, mode: int | None) -> dict:
    """Both temperature variants for the config's particle(s) and field source."""
    lam, j = s.resolvent_lambda(mode)
    scale = s.source_scale()
    u = s.field_fn(lam)
    src = HeatSource(lambda p: scale * np.abs(u(p)) ** 2, {"kind": "field", "mode": j, "scale": scale})
    par = s.thermal()
    times = s.time_grid()
    rule = build_volume_rule(s.interiors, src, s.mesh.nodes)
    zeroth = F_D(s.interiors, src, par.b_c, s.mesh.nodes, times, rule)
    load = dF_dnu(s.interiors, src, par.b_c, s.mesh, times, rule)
    direct = temperature_boundary(s.layers.decomp, s.mesh, s.interiors, src, par, times, zeroth, load)
    proj = temperature_boundary_projected(s.layers.decomp, s.mesh, s.interiors, src, par, times, zeroth, load)
    return {"lam": lam, "mode": j, "direct": direct, "projected": proj, "params": par}


def cmd_heat(cfg: dict, mode: int | None = None, out: str | None = None) -> list[Path]:
    """Boundary temperature traces (both variants) and their boundary integrals."""
    d = _out_dir(cfg, out)
    s = Setup(cfg)
    res = run_heat(s, mode if mode is not None else cfg["wave"]["mode"])
    direct, proj, par = res["direct"], res["projected"], res["params"]
    tot, totp = total_boundary_heat(direct), total_boundary_heat(proj)
    lo, hi = cfg["thermal"]["fit_window"]
    sel = (direct.times >= lo * (1 - 1e-12)) & (direct.times <= hi * (1 + 1e-12))
    slope, icpt, r2 = log_time_fit(direct.times[sel], tot["zeroth"][sel]) if sel.sum() >= 2 else (np.nan,) * 3
    meta = _meta(cfg, "heat", {"lambda_gamma": f"{par.lambda_gamma:.6f}", "b_c": f"{par.b_c:.12e}",
                               "mode": res["mode"] if res["mode"] is not None else "none",
                               "zeroth_log_slope": f"{slope:.12e}", "zeroth_log_r2": f"{r2:.12f}",
                               "variant_difference": f"{variant_difference(direct, proj):.6e}"})
    files = []
    for name, tr in (("heat.csv", direct), ("heat_projected.csv", proj)):
        rows = []
        for i in range(s.mesh.n):
            for k, t in enumerate(tr.times):
                rows.append((s.mesh.component[i], s.mesh.theta[i], t, tr.values[i, k], tr.zeroth[i, k],
                             tr.first[i, k]))
        write_csv(d / name, ["component_id", "theta", "t", "tau", "tau_zeroth", "tau_first"], rows,
                  dict(meta, variant=tr.variant))
        files.append(d / name)
    rows = [(t, a, b, c, e, f) for t, a, b, c, e, f in zip(direct.times, tot["total"], tot["zeroth"], tot["first"],
                                                            totp["total"], totp["first"])]
    write_csv(d / "heat_totals.csv", ["t", "total", "zeroth", "first", "total_projected", "first_projected"],
              rows, meta)
    files.append(d / "heat_totals.csv")
    summary = {"lambda_gamma": par.lambda_gamma, "zeroth_log_slope": slope, "zeroth_log_r2": r2,
               "variant_difference": variant_difference(direct, proj),
               "first_increments_direct": np.diff(tot["first"][sel])[-3:].tolist(),
               "first_increments_projected": np.diff(totp["first"][sel])[-3:].tolist()}
    _atomic_write(d / "heat_summary.json", json.dumps(_jsonable(summary), indent=2, sort_keys=True) + "\n")
    files.append(d / "heat_summary.json")
    if cfg["output"]["svg"]:
        t = direct.times[1:]
        _atomic_write(d / "heat_totals.svg", svg_lines(
            {"zeroth": (t, tot["zeroth"][1:]), "total (direct)": (t, tot["total"][1:]),
             "total (projected)": (t, totp["total"][1:])}, "boundary-integrated temperature", "t", "value",
            logx=True))
        _atomic_write(d / "heat_first.svg", svg_lines(
            {"first (direct)": (t, np.abs(tot["first"][1:])), "first (projected)": (t, np.abs(totp["first"][1:]))},
            "first-order part", "t", "|value|", logx=True, logy=True))
        files += [d / "heat_totals.svg", d / "heat_first.svg"]
    return files


def fit_exponent(gaps, deficits) -> tuple[float, float]:
    """Least-squares fit ``deficit = c gap^p``; returns ``(p, c)``."""
    x, y = np.log(np.asarray(gaps, float)), np.log(np.asarray(deficits, float))
    p, logc = np.polyfit(x, y, 1)
    return float(p), float(np.exp(logc))


def gap_scan(radius: float, gaps: Sequence[float], n: int, grading: float, particles: int = 2) -> list[dict]:
    """Largest non-1/2 eigenvalue of K* for disks separated by each gap."""
    rows = []
    for g in gaps:
        try:
            if particles == 2:
                c1 = build_circle(radius, (-radius - g / 2, 0.0)).graded(0.0, grading)
                c2 = build_circle(radius, (radius + g / 2, 0.0)).graded(-np.pi, grading)
                mesh = discretize([c1, c2], n)
            else:
                mesh = discretize([build_circle(radius, (0.0, 0.0))], n)
            dec = LaplaceLayers.build(mesh).decomp
            if len(dec.half_indices) != mesh.n_components:
                raise ConditioningError(f"found {len(dec.half_indices)} eigenvalues at 1/2, "
                                        f"expected {mesh.n_components}")
            rest = np.delete(dec.eigenvalues, dec.half_indices)
            lam = float(rest.max())
            rows.append({"gap": g, "lambda": lam, "deficit": 0.5 - lam, "status": "ok"})
        except (ConditioningError, GeometryDegeneracyError, np.linalg.LinAlgError) as exc:
            rows.append({"gap": g, "lambda": np.nan, "deficit": np.nan, "status": f"failed: {exc}"})
    return rows


def cmd_gap_scan(cfg: dict, gaps: Sequence[float] | None = None, out: str | None = None) -> list[Path]:
    d = _out_dir(cfg, out)
    gs = cfg["gap_scan"]
    gaps = list(gs["gaps"] if gaps is None else gaps)
    if len(gaps) < 3:
        raise ValueError("gap scan needs at least 3 gap values")
    rows = gap_scan(gs["radius"], gaps, gs["n"], gs["grading"], gs["particles"])
    ok = [r for r in rows if r["status"] == "ok" and r["deficit"] > 0]
    trend = len(ok) >= 2 and gs["particles"] == 2 and np.ptp([r["deficit"] for r in ok]) > 1e-8
    if trend:
        p, c = fit_exponent([r["gap"] for r in ok], [r["deficit"] for r in ok])
        fit = {"exponent": f"{p:.12e}", "prefactor": f"{c:.12e}", "points": len(ok)}
    else:
        fit = {"exponent": "none", "prefactor": "none", "points": len(ok)}
    path = d / "gap_scan.csv"
    write_csv(path, ["gap", "lambda", "half_minus_lambda", "status"],
              [(r["gap"], r["lambda"], r["deficit"], r["status"]) for r in rows],
              _meta(cfg, "gap-scan", fit))
    files = [path]
    if cfg["output"]["svg"] and trend:
        _atomic_write(d / "gap_scan.svg", svg_lines(
            {"1/2 - lambda": (np.array([r["gap"] for r in ok]), np.array([r["deficit"] for r in ok]))},
            "eigenvalue deficit vs gap", "gap", "1/2 - lambda", logx=True, logy=True, markers=True))
        files.append(d / "gap_scan.svg")
    return files


# ---------------------------------------------------------------------------
# Validation suite
# ---------------------------------------------------------------------------

def _check(name: str, value: float, threshold: float, passed: bool, message: str = "") -> dict:
    return {"name": name, "value": float(value), "threshold": float(threshold), "passed": bool(passed),
            "message": message}


def check_lambda_gamma() -> dict:
    lg = ThermalParams(318.0, 0.6, 1.0, 1.0).lambda_gamma
    return _check("lambda_gamma_gold_water", abs(lg - 0.5019), 1e-4, abs(lg - 0.5019) <= 1e-4,
                  f"lambda_gamma = {lg:.6f}")


def check_ellipse_spectrum(n: int = 256) -> dict:
    mesh = discretize([build_ellipse(3.0, 2.0)], n)
    ev = LaplaceLayers.build(mesh).decomp.eigenvalues
    err = 0.0
    for k in range(1, 6):
        for sgn in (1, -1):
            target = sgn * 0.5 * 0.2 ** k
            err = max(err, float(np.abs(ev - target).min()))
    return _check("ellipse_spectrum", err, 1e-3, err <= 1e-3, "max distance to +-(1/2) 0.2^k, k = 1..5")


def check_calderon(s: Setup) -> dict:
    L = s.layers
    res = calderon_residual(L.Stilde, L.Kstar, L.K)
    msg = "" if res <= 1e-8 else f"residual {res:.2e} too large: increase geometry.n (now {s.mesh.n_per_curve})"
    return _check("calderon_identity", res, 1e-8, res <= 1e-8, msg)


def check_jump_relations(s: Setup) -> dict:
    """``K*[phi0] = phi0 / 2`` and ``K[1] = 1/2`` per component."""
    L = s.layers
    phi0 = L.phi0.values
    r1 = np.linalg.norm(L.Kstar.matrix @ phi0 - 0.5 * phi0) / np.linalg.norm(phi0)
    r2 = np.abs(L.K.matrix @ np.ones(s.mesh.n) - 0.5).max()
    res = float(max(r1, r2))
    return _check("jump_relations", res, 1e-8, res <= 1e-8,
                  "" if res <= 1e-8 else f"residual {res:.2e}: increase geometry.n")


def check_series_slopes() -> list[dict]:
    mesh = discretize([build_ellipse(1.0, 2.0 / 3.0)], 64)
    L = LaplaceLayers.build(mesh)
    ks = np.array([1e-2, 1e-3, 1e-4])
    e_op, e_inv = [], []
    for k in ks:
        Sk = assemble_Sk(mesh, k).matrix
        approx = series_Sk(mesh, k, 0, L.S.matrix).matrix
        e_op.append(np.linalg.norm(Sk - approx, 2))
        inv = inv_Sk_asymptotic(L.decomp, k, mesh)
        e_inv.append(np.linalg.norm(Sk @ inv - np.eye(mesh.n), 2))
    x = np.log(ks ** 2 * np.abs(np.log(ks)))
    s1 = np.polyfit(x, np.log(e_op), 1)[0]
    s2 = np.polyfit(x, np.log(e_inv), 1)[0]
    return [_check("series_Sk_slope", abs(s1 - 1), 0.1, abs(s1 - 1) <= 0.1, f"fitted slope {s1:.4f}"),
            _check("inverse_Sk_slope", abs(s2 - 1), 0.1, abs(s2 - 1) <= 0.1, f"fitted slope {s2:.4f}")]


def check_dF_dnu(n_nodes: int = 32) -> dict:
    curve = build_ellipse(1.0, 2.0 / 3.0)
    mesh = discretize([curve], 128)
    im = mesh_interior(curve, 0.1)
    src = HeatSource(lambda p: 1.0 + 0.5 * p[:, 0] - 0.3 * p[:, 1] ** 2)
    idx = np.arange(0, mesh.n, mesh.n // n_nodes)[:n_nodes]
    ts = [0.01, 0.1, 1.0, 10.0]
    exact = dF_dnu(im, src, 1.0, mesh, ts, nodes=idx)
    X, nu = mesh.nodes[idx], mesh.normals[idx]
    eps = 3e-3
    F = [F_D(im, src, 1.0, X + k * eps * nu, ts) for k in range(5)]
    fd = (-25 * F[0] + 48 * F[1] - 36 * F[2] + 16 * F[3] - 3 * F[4]) / (12 * eps)
    err = float((np.abs(fd - exact).max(0) / np.abs(exact).max(0)).max())
    return _check("dF_dnu_vs_finite_differences", err, 1e-4, err <= 1e-4,
                  "one-sided exterior 5-point differences, 32 nodes x 4 times")


def fd_disk_comparison(radius: float = 0.005, n: int = 64, T: float = 1.0) -> dict:
    """Boundary temperature of a uniformly heated disk: both variants vs the FD oracle."""
    par = ThermalParams(318.0, 0.6, 318.0, 0.6)
    curve = build_circle(radius, (0.0, 0.0))
    mesh = discretize([curve], n)
    im = mesh_interior(curve, 0.1 * radius)
    L = LaplaceLayers.build(mesh)
    times = np.concatenate([[0.0], np.geomspace(1e-2 * T, T, 63)])
    src = HeatSource.constant(1.0)
    direct = temperature_boundary(L.decomp, mesh, im, src, par, times)
    proj = temperature_boundary_projected(L.decomp, mesh, im, src, par, times, direct.zeroth)
    grid = FDGrid(half_width=10.0 * np.sqrt(T), core=1.2 * radius, h_core=radius / 20, growth=1.08)
    sol = fd_heat_oracle(grid, inside_curve(curve), par, src, T, n_steps=200)
    ref = float(np.mean(sol.interpolate(mesh.nodes[:: max(1, n // 16)])))
    e_d = abs(direct.values[:, -1].mean() - ref) / abs(ref)
    e_p = abs(proj.values[:, -1].mean() - ref) / abs(ref)
    return {"reference": ref, "direct": float(direct.values[:, -1].mean()),
            "projected": float(proj.values[:, -1].mean()), "err_direct": e_d, "err_projected": e_p,
            "matching": "direct" if e_d <= e_p else "projected"}


def check_fd_oracle() -> dict:
    r = fd_disk_comparison()
    best = min(r["err_direct"], r["err_projected"])
    return _check("fd_oracle_disk", best, 0.05, best <= 0.05,
                  f"matching variant: {r['matching']} (direct {r['err_direct']:.3e}, "
                  f"projected {r['err_projected']:.3e})")


def check_gap_scan() -> dict:
    rows = gap_scan(1.0, [0.01, 0.005, 0.0025], 512, 0.97)
    ok = [r for r in rows if r["status"] == "ok"]
    if len(ok) < 2:
        return _check("gap_scan_exponent", np.nan, 0.5, False, "too few valid gaps")
    p, _ = fit_exponent([r["gap"] for r in ok], [r["deficit"] for r in ok])
    return _check("gap_scan_exponent", p, 0.5, 0.4 <= p <= 0.6, f"fitted exponent {p:.4f}, window [0.4, 0.6]")


def check_resonance(s: Setup) -> dict:
    dec, mB = s.layers_B.decomp, s.mesh_B
    cs = coupling_spectrum(dec, mB)
    j = cs.strongest(s.direction)
    pts = np.concatenate([(im.centroids - s.z) / s.delta for im in s.interiors])
    inc = s.incident()
    on = inner_field_asymptotic(dec, mB, pts, s.z, s.delta, resonant_lambda(dec, j), inc)
    off = inner_field_asymptotic(dec, mB, pts, s.z, s.delta, 10.0 + 0j, inc)
    ratio = float(np.linalg.norm(on.first) / np.linalg.norm(off.first))
    return _check("resonant_enhancement", ratio, 100.0, ratio >= 100.0, f"mode {j}")


def cmd_validate(cfg: dict, out: str | None = None, quick: bool = False) -> tuple[int, Path]:
    """Run the invariant and oracle suite; returns (exit code, report path)."""
    d = _out_dir(cfg, out)
    checks: list[dict] = []
    try:
        s = Setup(cfg)
        runners: list[Callable[[], Any]] = [check_lambda_gamma, lambda: check_calderon(s),
                                            lambda: check_jump_relations(s), lambda: check_resonance(s)]
    except (np.linalg.LinAlgError, ValueError) as exc:
        # a mesh too coarse to assemble fails every geometry check
        msg = f"{type(exc).__name__}: {exc}; increase geometry.n (now {cfg['geometry']['n']})"
        checks += [_check(name, np.nan, 1e-8, False, msg)
                   for name in ("calderon_identity", "jump_relations", "resonant_enhancement")]
        runners = [check_lambda_gamma]
    if not quick:
        runners += [check_ellipse_spectrum, check_series_slopes, check_dF_dnu, check_fd_oracle, check_gap_scan]
    for run in runners:
        try:
            res = run()
        except Exception as exc:  # a crashing check is a failed check
            res = _check(getattr(run, "__name__", "check"), np.nan, np.nan, False, f"{type(exc).__name__}: {exc}")
        checks.extend(res if isinstance(res, list) else [res])
    passed = all(c["passed"] for c in checks)
    report = {"config": cfg.get("name", ""), "passed": passed, "checks": checks}
    path = d / "validate.json"
    _atomic_write(path, json.dumps(_jsonable(report), indent=2, sort_keys=True) + "\n")
    write_csv(d / "validate.csv", ["name", "value", "threshold", "passed"],
              [(c["name"], c["value"], c["threshold"], c["passed"]) for c in checks], _meta(cfg, "validate"))
    for c in checks:
        logger.info("%s %s value=%.3e %s", "PASS" if c["passed"] else "FAIL", c["name"], c["value"], c["message"])
    return (EXIT_OK if passed else EXIT_FAIL), path


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if np.isfinite(v) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

COMMANDS = ("spectrum", "coupling", "field", "heat", "gap-scan", "validate")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="plasmoheat", description="Plasmonic fields and heating of 2D nanoparticles")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", required=True, help="JSON run config")
    p.add_argument("--mode", type=int, default=None, help="eigenmode index for field/heat")
    p.add_argument("--out", default=None, help="output directory (overrides config)")
    p.add_argument("--gaps", type=float, nargs="+", default=None, help="gap values for gap-scan")
    p.add_argument("--quick", action="store_true", help="validate: config-dependent checks only")
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    return p


def _thread_limit():
    n = os.environ.get("PLASMOHEAT_THREADS")
    if not n:
        return None
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=max(1, int(n)))


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        print(f"config error:\n{exc}", file=sys.stderr)
        return EXIT_CONFIG
    limiter = _thread_limit()
    t0 = time.perf_counter()
    try:
        if args.command == "spectrum":
            files = cmd_spectrum(cfg, args.out)
        elif args.command == "coupling":
            files = cmd_coupling(cfg, args.out)
        elif args.command == "field":
            files = cmd_field(cfg, args.mode, args.out)
        elif args.command == "heat":
            files = cmd_heat(cfg, args.mode, args.out)
        elif args.command == "gap-scan":
            files = cmd_gap_scan(cfg, args.gaps, args.out)
        else:
            code, path = cmd_validate(cfg, args.out, args.quick)
            report = json.loads(path.read_text())
            for c in report["checks"]:
                print(f"{'PASS' if c['passed'] else 'FAIL'} {c['name']}: {c['message']}")
            print(f"report: {path}")
            return code
    finally:
        if limiter is not None:
            limiter.restore_original_limits()
    for f in files:
        print(f)
    logger.info("done in %.1f s", time.perf_counter() - t0)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

"""Boundary temperature of heated particles via heat potentials.

The temperature on the boundary is approximated by

    tau = F_D - V (lam_gamma I - K*)^{-1}[dF_D/dnu]

where ``F_D`` is the volume heat potential of the source and ``V`` the
boundary heat single layer, both with the kernel
``exp(-|x|^2 / (4 b t)) / (4 pi b t)``. Time integrals of this kernel have
closed forms in terms of the exponential integral ``E1``, which removes all
time quadrature from ``F_D`` and its normal derivative and gives exact
product weights for piecewise-linear densities in ``V``.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .geometry import (BoundaryMesh, InteriorMesh, _gauss, _points_in_polygon, base_cells,
                       cell_quadrature)
from .helmholtz_bie import upsample_density
from .np_core import (NearSingularWarning, SpectralDecomposition, kress_weights,
                      project_off_half)

logger = logging.getLogger(__name__)

EULER_GAMMA = float(np.euler_gamma)


class CFLError(ValueError):
    """Explicit time step violates the stability bound."""


class TimeGridError(ValueError):
    """Requested time is not a node of the time grid."""


# ---------------------------------------------------------------------------
# Exponential integral
# ---------------------------------------------------------------------------

_K = np.arange(1, 31)
_SERIES = (-1.0) ** (_K + 1) / (_K * np.cumprod(_K.astype(float)))
_LAG_T, _LAG_W = np.polynomial.laguerre.laggauss(24)


def exp1(x) -> np.ndarray:
    """Vectorized ``E1(x)`` for ``x >= 0`` (relative accuracy about 1e-10).

    Power series up to 2, Gauss-Laguerre quadrature of
    ``exp(-x) int exp(-t) / (x + t) dt`` beyond; ``E1(0) = inf``.
    """
    x = np.asarray(x, dtype=float)
    out = np.zeros_like(x)
    small = x <= 2.0
    xs = x[small]
    p = np.zeros_like(xs)
    for c in _SERIES[::-1]:
        p = p * xs + c
    with np.errstate(divide="ignore"):
        out[small] = -EULER_GAMMA - np.log(xs) + p * xs
    big = (~small) & (x < 700.0)
    xl = x[big]
    acc = np.zeros_like(xl)
    for t, w in zip(_LAG_T, _LAG_W):
        acc += w / (xl + t)
    out[big] = np.exp(-xl) * acc
    return out


# ---------------------------------------------------------------------------
# Material parameters and sources
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ThermalParams:
    """Conductivities and volumetric heat capacities of particle and medium."""

    gamma_c: float
    gamma_m: float
    rhoC_c: float
    rhoC_m: float

    def __post_init__(self):
        for name in ("gamma_c", "gamma_m", "rhoC_c", "rhoC_m"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v > 0):
                raise ValueError(f"{name} must be positive, got {v}")

    @property
    def lambda_gamma(self) -> float:
        """``(gamma_c + gamma_m) / (2 (gamma_c - gamma_m))``."""
        if self.gamma_c == self.gamma_m:
            return np.inf
        return (self.gamma_c + self.gamma_m) / (2 * (self.gamma_c - self.gamma_m))

    @property
    def b_c(self) -> float:
        return self.rhoC_c / self.gamma_c

    @property
    def b_m(self) -> float:
        return self.rhoC_m / self.gamma_m


@dataclass(frozen=True)
class HeatSource:
    """Source ``g_u`` (already divided by ``gamma_c``) as a function of position."""

    func: Callable[[np.ndarray], np.ndarray]
    provenance: dict = field(default_factory=dict)

    def __call__(self, pts) -> np.ndarray:
        return np.asarray(self.func(np.atleast_2d(pts)), dtype=float)

    @classmethod
    def constant(cls, value: float) -> "HeatSource":
        return cls(lambda p: np.full(p.shape[0], float(value)), {"kind": "constant", "value": value})

    @classmethod
    def from_field(cls, field_fn: Callable[[np.ndarray], np.ndarray], omega: float,
                   im_eps_c: float, gamma_c: float) -> "HeatSource":
        """``g_u = omega / (2 pi gamma_c) Im(eps_c) |u|^2``."""
        scale = omega / (2 * np.pi * gamma_c) * im_eps_c
        return cls(lambda p: scale * np.abs(field_fn(p)) ** 2,
                   {"kind": "field", "omega": omega, "im_eps_c": im_eps_c, "gamma_c": gamma_c})

    def scaled(self, c: float) -> "HeatSource":
        f = self.func
        return HeatSource(lambda p: c * np.asarray(f(p)), dict(self.provenance, scale=c))


# ---------------------------------------------------------------------------
# Volume quadrature with local refinement
# ---------------------------------------------------------------------------

def _lagrange_basis(nodes: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Values of the Lagrange basis on ``nodes`` at points ``x``: shape (len(x), q)."""
    q = nodes.size
    out = np.ones((x.size, q))
    for i in range(q):
        for j in range(q):
            if i != j:
                out[:, i] *= (x - nodes[j]) / (nodes[i] - nodes[j])
    return out


def locate(interior: InteriorMesh, x: np.ndarray) -> tuple[float, float] | None:
    """Polar-map parameters ``(s, theta)`` of ``x`` or None if outside the domain."""
    z = interior.curve.center
    v = np.asarray(x, dtype=float) - z
    rho = np.hypot(*v)
    scale = np.hypot(*(interior.curve.point(np.array([0.0])) - z)[0])
    if rho < 1e-14 * scale:
        return 0.0, 0.0
    target = np.arctan2(v[1], v[0])
    t = target
    for _ in range(60):
        q = interior.curve.point(np.array([t]))[0] - z
        dq = interior.curve.deriv(np.array([t]))[0]
        ang = np.arctan2(q[1], q[0])
        dang = (q[0] * dq[1] - q[1] * dq[0]) / (q @ q)
        step = ((ang - target + np.pi) % (2 * np.pi) - np.pi) / dang
        t -= step
        if abs(step) < 1e-15:
            break
    t = (t + np.pi) % (2 * np.pi) - np.pi
    q = interior.curve.point(np.array([t]))[0] - z
    s = rho / np.hypot(*q)
    if s > 1 + 1e-12:
        return None
    return min(s, 1.0), t


@dataclass
class VolumeRule:
    """Quadrature for integrals over the particle(s) seen from target points.

    The shared base points are the tensor Gauss nodes of every polar cell;
    for each target the cells close to it are replaced by locally refined
    cells (and Duffy rules where the target lies in the cell). Source values
    on refined points are interpolated from the base nodes of the parent
    cell, so the source is sampled only once.
    """

    targets: np.ndarray
    base_pts: np.ndarray
    base_w: np.ndarray           # (m, N) target-specific weights (zero where replaced)
    extra_pts: np.ndarray
    extra_w: np.ndarray
    extra_owner: np.ndarray
    _cache: dict = field(default_factory=dict, repr=False)

    def pairs(self):
        """Differences ``x - y`` and weights flattened per target (cached)."""
        if "pairs" not in self._cache:
            m = self.targets.shape[0]
            d = (self.targets[:, None, :] - self.base_pts[None, :, :]).reshape(-1, 2)
            owner = np.repeat(np.arange(m), self.base_pts.shape[0])
            w = self.base_w.ravel()
            keep = w != 0
            de = self.targets[self.extra_owner] - self.extra_pts
            self._cache["pairs"] = (np.concatenate([d[keep], de]),
                                    np.concatenate([w[keep], self.extra_w]),
                                    np.concatenate([owner[keep], self.extra_owner]))
        return self._cache["pairs"]

    def moments(self, key: str, values: Callable[[np.ndarray], np.ndarray], order: int):
        """``sum_y w values(x - y) (r^2 / r2max)^k`` for ``k <= order`` and ``r2max`` per target."""
        ck = (key, order)
        if ck not in self._cache:
            d, w, o = self.pairs()
            m = self.targets.shape[0]
            r2 = d[:, 0] ** 2 + d[:, 1] ** 2
            r2max = np.zeros(m)
            np.maximum.at(r2max, o, r2)
            rho = r2 / r2max[o]
            acc = w * values(d)
            out = np.empty((order + 1, m))
            for k in range(order + 1):
                out[k] = np.bincount(o, weights=acc, minlength=m)
                acc = acc * rho
            self._cache[ck] = (out, r2max)
        return self._cache[ck]


def _cell_geometry(interior: InteriorMesh, cells: np.ndarray):
    s = np.stack([cells[:, 0], cells[:, 1], cells[:, 1], cells[:, 0],
                  0.5 * (cells[:, 0] + cells[:, 1])], axis=1)
    t = np.stack([cells[:, 2], cells[:, 2], cells[:, 3], cells[:, 3],
                  0.5 * (cells[:, 2] + cells[:, 3])], axis=1)
    pts, _ = interior.polar_map(s, t)
    c = pts[:, :4, :]
    diam = np.sqrt(((c[:, :, None, :] - c[:, None, :, :]) ** 2).sum(-1)).max(axis=(1, 2))
    return pts, diam


def _local_rule(interior: InteriorMesh, x: np.ndarray, order: int, eta: float,
                max_depth: int):
    """Refined cells near ``x``: returns (replaced base cell mask, pts, w, parent, local)."""
    cells0 = base_cells(interior.s_panels, interior.t_panels)
    pts, diam = _cell_geometry(interior, cells0)
    dist = np.sqrt(((pts - x) ** 2).sum(-1)).min(1) - 0.5 * diam
    loc = locate(interior, x)
    centre = loc is not None and loc[0] == 0.0
    near = dist < eta * diam
    if loc is not None:
        near |= _contains(cells0, loc)
    replaced = near.copy()
    cells = cells0[near]
    parent = np.flatnonzero(near)
    out_pts, out_w, out_par, out_cells = [], [], [], []
    for depth in range(max_depth + 1):
        if cells.shape[0] == 0:
            break
        pts, diam = _cell_geometry(interior, cells)
        dist = np.sqrt(((pts - x) ** 2).sum(-1)).min(1) - 0.5 * diam
        inside = _contains(cells, loc) if loc is not None else np.zeros(len(cells), bool)
        close = (dist < eta * diam) | inside
        last = depth == max_depth
        done = ~close | last
        if np.any(done):
            ins = inside & last & (not centre)
            plain = done & ~ins
            if np.any(plain):
                qp, qw, qpar = _gauss_param(interior, cells[plain], order)
                out_pts.append(qp)
                out_w.append(qw)
                out_par.append(np.repeat(parent[plain], order * order))
                out_cells.append(qpar)
            for c, p_ in zip(cells[ins], parent[ins]):
                apex = np.array([loc[0], _wrap(loc[1], c)])
                qp, qw, qpar = _duffy_param(interior, apex, c, order)
                out_pts.append(qp)
                out_w.append(qw)
                out_par.append(np.full(qw.size, p_))
                out_cells.append(qpar)
        cells = cells[~done]
        parent = parent[~done]
        if cells.shape[0] == 0:
            break
        s0, s1, t0, t1 = cells.T
        sm, tm = 0.5 * (s0 + s1), 0.5 * (t0 + t1)
        if centre:
            cells = np.concatenate([np.stack([s0, sm, t0, t1], 1), np.stack([sm, s1, t0, t1], 1)])
            parent = np.concatenate([parent, parent])
        else:
            cells = np.concatenate([np.stack([s0, sm, t0, tm], 1), np.stack([sm, s1, t0, tm], 1),
                                    np.stack([s0, sm, tm, t1], 1), np.stack([sm, s1, tm, t1], 1)])
            parent = np.tile(parent, 4)
    if not out_pts:
        return replaced, np.zeros((0, 2)), np.zeros(0), np.zeros(0, int), np.zeros((0, 2))
    return (replaced, np.concatenate(out_pts), np.concatenate(out_w),
            np.concatenate(out_par), np.concatenate(out_cells))


def _wrap(theta: float, cell: np.ndarray) -> float:
    mid = 0.5 * (cell[2] + cell[3])
    return theta + 2 * np.pi * np.round((mid - theta) / (2 * np.pi))


def _contains(cells: np.ndarray, loc) -> np.ndarray:
    s, t = loc
    mid = 0.5 * (cells[:, 2] + cells[:, 3])
    tw = t + 2 * np.pi * np.round((mid - t) / (2 * np.pi))
    tol = 1e-12
    return ((cells[:, 0] - tol <= s) & (s <= cells[:, 1] + tol)
            & (cells[:, 2] - tol <= tw) & (tw <= cells[:, 3] + tol))


def _gauss_param(interior, cells, order):
    g, gw = _gauss(order)
    cells = np.atleast_2d(cells)
    s0, s1, t0, t1 = (c[:, None, None] for c in cells.T)
    S = s0 + (s1 - s0) * g[None, :, None] + 0 * g[None, None, :]
    T = t0 + (t1 - t0) * g[None, None, :] + 0 * g[None, :, None]
    pts, jac = interior.polar_map(S, T)
    w = (s1 - s0) * (t1 - t0) * np.outer(gw, gw)[None] * jac
    return pts.reshape(-1, 2), w.ravel(), np.stack([S.ravel(), T.ravel()], 1)


def _duffy_param(interior, apex, cell, order):
    g, gw = _gauss(order)
    s0, s1, t0, t1 = cell
    corners = np.array([[s0, t0], [s1, t0], [s1, t1], [s0, t1]])
    u, v = np.meshgrid(g, g, indexing="ij")
    wu, wv = np.meshgrid(gw, gw, indexing="ij")
    P_all, W_all, Q_all = [], [], []
    for k in range(4):
        P, Q = corners[k], corners[(k + 1) % 4]
        det = (P[0] - apex[0]) * (Q[1] - P[1]) - (P[1] - apex[1]) * (Q[0] - P[0])
        if abs(det) < 1e-300:
            continue
        par = apex + u[..., None] * (P - apex) + (u * v)[..., None] * (Q - P)
        pts, jac = interior.polar_map(par[..., 0], par[..., 1])
        P_all.append(pts.reshape(-1, 2))
        W_all.append((wu * wv * u * abs(det) * jac).ravel())
        Q_all.append(par.reshape(-1, 2))
    return np.concatenate(P_all), np.concatenate(W_all), np.concatenate(Q_all)


def build_volume_rule(interiors: Sequence[InteriorMesh] | InteriorMesh, source: HeatSource,
                      targets, eta: float = 1.0, max_depth: int = 10) -> VolumeRule:
    """Quadrature of ``int_D k(x, y) g(y) dy`` for each target ``x``, weights include ``g``."""
    if isinstance(interiors, InteriorMesh):
        interiors = [interiors]
    X = np.atleast_2d(np.asarray(targets, dtype=float))
    base_pts_all, base_w_all, ex_p, ex_w, ex_o = [], [], [], [], []
    for im in interiors:
        if not im.polar:
            pts, w = im.centroids, im.areas
            base_pts_all.append(pts)
            base_w_all.append(np.tile(w * source(pts), (X.shape[0], 1)))
            continue
        order = im.order
        cells = base_cells(im.s_panels, im.t_panels)
        pts, w = cell_quadrature(im, cells, order)
        gvals = source(pts)
        gcell = gvals.reshape(cells.shape[0], order, order)
        gnodes, _ = _gauss(order)
        Wb = np.tile(w * gvals, (X.shape[0], 1))
        q2 = order * order
        for i, x in enumerate(X):
            replaced, qp, qw, par, qpar = _local_rule(im, x, order, eta, max_depth)
            for c in np.flatnonzero(replaced):
                Wb[i, c * q2:(c + 1) * q2] = 0.0
            if qw.size == 0:
                continue
            pc = cells[par]
            ls = (qpar[:, 0] - pc[:, 0]) / (pc[:, 1] - pc[:, 0])
            tw = qpar[:, 1] + 2 * np.pi * np.round((0.5 * (pc[:, 2] + pc[:, 3]) - qpar[:, 1]) / (2 * np.pi))
            lt = (tw - pc[:, 2]) / (pc[:, 3] - pc[:, 2])
            Ls = _lagrange_basis(gnodes, ls)
            Lt = _lagrange_basis(gnodes, lt)
            gi = np.einsum("pa,pab,pb->p", Ls, gcell[par], Lt)
            ex_p.append(qp)
            ex_w.append(qw * gi)
            ex_o.append(np.full(qw.size, i))
        base_pts_all.append(pts)
        base_w_all.append(Wb)
    return VolumeRule(
        targets=X,
        base_pts=np.concatenate(base_pts_all),
        base_w=np.concatenate(base_w_all, axis=1),
        extra_pts=np.concatenate(ex_p) if ex_p else np.zeros((0, 2)),
        extra_w=np.concatenate(ex_w) if ex_w else np.zeros(0),
        extra_owner=np.concatenate(ex_o) if ex_o else np.zeros(0, int),
    )


def _apply_rule(rule: VolumeRule, kernel: Callable[[np.ndarray, np.ndarray], np.ndarray]) -> np.ndarray:
    """``sum_y w(x, y) kernel(x - y, x)`` for every target; kernel returns (m, N) arrays."""
    d = rule.targets[:, None, :] - rule.base_pts[None, :, :]
    out = np.sum(rule.base_w * kernel(d, np.arange(rule.targets.shape[0])[:, None]), axis=1)
    if rule.extra_w.size:
        de = rule.targets[rule.extra_owner] - rule.extra_pts
        vals = rule.extra_w * kernel(de[None, :, :], rule.extra_owner[None, :])[0]
        out = out + np.bincount(rule.extra_owner, weights=vals, minlength=out.size)
    return out


def _times(t) -> np.ndarray:
    t = np.atleast_1d(np.asarray(t, dtype=float))
    if np.any(t < 0):
        raise ValueError("times must be nonnegative")
    return t


SERIES_ORDER = 40
SERIES_XMAX = 4.0
_FACT = np.cumprod(np.concatenate([[1.0], np.arange(1, SERIES_ORDER + 1, dtype=float)]))


def _r2(d):
    return d[..., 0] ** 2 + d[..., 1] ** 2


def F_D(interior, source: HeatSource, b_c: float, x, t, rule: VolumeRule | None = None) -> np.ndarray:
    """Volume heat potential ``int_0^t int_D K g dy dt'`` at points ``x``.

    Uses ``int_0^t K ds = E1(r^2 / (4 b t)) / (4 pi b)``. When ``r^2 / (4 b t)``
    stays small over the particle, ``E1 = -gamma - log x + Ein(x)`` and the
    entire part is summed from precomputed spatial moments. Returns (m, len(t)).
    """
    t = _times(t)
    rule = build_volume_rule(interior, source, x) if rule is None else rule
    out = np.zeros((rule.targets.shape[0], t.size))
    k = np.arange(1, SERIES_ORDER + 1)
    coef = (-1.0) ** (k + 1) / (k * _FACT[1:])
    for j, tk in enumerate(t):
        if tk == 0:
            continue
        mom, r2max = rule.moments("one", lambda d: np.ones(d.shape[0]), SERIES_ORDER)
        xmax = r2max / (4 * b_c * tk)
        if np.all(xmax <= SERIES_XMAX):
            logm, _ = rule.moments("log", lambda d: np.log(_r2(d)), 0)
            powers = xmax[None, :] ** k[:, None]
            ein = (coef[:, None] * powers * mom[1:]).sum(0)
            val = (-EULER_GAMMA + np.log(4 * b_c * tk)) * mom[0] - logm[0] + ein
        else:
            val = _apply_rule(rule, lambda d, _o: exp1(_r2(d) / (4 * b_c * tk)))
        out[:, j] = val / (4 * np.pi * b_c)
    return out


def dF_dnu(interior, source: HeatSource, b_c: float, mesh: BoundaryMesh, t,
           rule: VolumeRule | None = None, nodes=None) -> np.ndarray:
    """Closed-form normal derivative of ``F_D`` on boundary nodes.

    ``(1/(2 pi b)) int_D exp(-r^2/(4 b t)) <y - x, nu_x> / r^2 g(y) dy``.
    Returns (n_nodes, len(t)); the value at ``t = 0`` is zero.
    """
    t = _times(t)
    idx = np.arange(mesh.n) if nodes is None else np.asarray(nodes)
    X, nu = mesh.nodes[idx], mesh.normals[idx]
    rule = build_volume_rule(interior, source, X) if rule is None else rule
    out = np.zeros((idx.size, t.size))
    d_, _, owner = rule.pairs()
    nu_pairs = nu[owner]

    def flux(d):
        return -(d[:, 0] * nu_pairs[:, 0] + d[:, 1] * nu_pairs[:, 1]) / _r2(d)

    k = np.arange(SERIES_ORDER + 1)
    coef = (-1.0) ** k / _FACT
    for j, tk in enumerate(t):
        if tk == 0:
            continue
        mom, r2max = rule.moments("flux", flux, SERIES_ORDER)
        xmax = r2max / (4 * b_c * tk)
        if np.all(xmax <= SERIES_XMAX):
            val = (coef[:, None] * xmax[None, :] ** k[:, None] * mom).sum(0)
        else:
            def kern(d, o, tk=tk):
                r2 = _r2(d)
                n_ = nu[o]
                return np.exp(-r2 / (4 * b_c * tk)) * -(d[..., 0] * n_[..., 0] + d[..., 1] * n_[..., 1]) / r2
            val = _apply_rule(rule, kern)
        out[:, j] = val / (2 * np.pi * b_c)
    return out


def dF_dnu_limit(interior, source: HeatSource, b_c: float, mesh: BoundaryMesh,
                 rule: VolumeRule | None = None) -> np.ndarray:
    """``t -> infinity`` limit of ``dF_dnu`` (Newtonian-potential normal derivative)."""
    return dF_dnu(interior, source, b_c, mesh, [np.inf], rule)[:, 0]


# ---------------------------------------------------------------------------
# Boundary heat single layer
# ---------------------------------------------------------------------------

def _interval_weights(a: np.ndarray, ta: float, tb: float):
    """Weights of ``f(t_{m-1})`` and ``f(t_m)`` for one interval (times 4 pi b).

    ``a = r^2 / (4 b)``, ``ta = t - t_m``, ``tb = t - t_{m-1}``.
    """
    dt = tb - ta
    with np.errstate(divide="ignore", invalid="ignore"):
        eb = exp1(a / tb)
        if ta > 0:
            ea = exp1(a / ta)
            I0 = eb - ea
            I1 = (tb * np.exp(-a / tb) - a * eb) - (ta * np.exp(-a / ta) - a * ea)
            zero = a == 0
            I0 = np.where(zero, np.log(tb / ta), I0)
            I1 = np.where(zero, tb - ta, I1)
        else:
            I0 = eb
            I1 = tb * np.exp(-a / tb) - a * eb
        w_new = (tb * I0 - I1) / dt
        w_old = (I1 - ta * I0) / dt
    return w_old, w_new


def _upsample_factor(h_max: float, b: float, dt: float, cap: int = 16) -> int:
    return int(min(cap, max(1, np.ceil(2 * h_max / np.sqrt(4 * b * dt)))))


def V_heat(mesh: BoundaryMesh, f: np.ndarray, b_c: float, times, x=None, t=None) -> np.ndarray:
    """Heat single layer ``int_0^t int_dD K f dy dt'`` on boundary nodes.

    ``f`` has shape (n, len(times)) with ``times[0] = 0``; it is treated as
    piecewise linear in time, for which the time integrals are exact. The
    log singularity of the last interval at ``y = x`` is integrated with Kress
    product weights; the density is upsampled in space when the last time
    step is short compared with the node spacing.

    Returns (n, len(times)) unless ``t`` selects a single grid time.
    """
    times = _times(times)
    if times[0] != 0:
        raise TimeGridError("time grid must start at t = 0")
    if np.any(np.diff(times) <= 0):
        raise TimeGridError("time grid must be strictly increasing")
    f = np.asarray(f, dtype=float)
    if f.shape != (mesh.n, times.size):
        raise ValueError(f"f must have shape {(mesh.n, times.size)}")
    if x is not None:
        raise NotImplementedError("evaluation is on boundary nodes; pass x=None")
    sel = None
    if t is not None:
        hit = np.flatnonzero(np.isclose(times, t, rtol=0, atol=1e-14 * max(1.0, times[-1])))
        if hit.size == 0:
            raise TimeGridError(f"t = {t} is not on the time grid")
        sel = int(hit[0])
    out = np.zeros((mesh.n, times.size))
    h_max = mesh.max_spacing()
    cache: dict[int, tuple] = {}
    steps = range(1, times.size) if sel is None else [sel] if sel > 0 else []
    for N in steps:
        p = _upsample_factor(h_max, b_c, times[N] - times[N - 1])
        if p not in cache:
            cache[p] = _fine_geometry(mesh, p)
        fine, rows, r2, R, ls_rows = cache[p]
        ffine = upsample_density(mesh, f[:, :N + 1], p) if p > 1 else f[:, :N + 1]
        if ffine.ndim == 1:
            ffine = ffine[:, None]
        a = r2 / (4 * b_c)
        tN = times[N]
        val = np.zeros(mesh.n)
        for m in range(1, N + 1):
            ta, tb = tN - times[m], tN - times[m - 1]
            w_old, w_new = _interval_weights(a, ta, tb)
            if m < N:
                val += np.sum(w_old * fine.weights * ffine[:, m - 1][None, :], axis=1)
                val += np.sum(w_new * fine.weights * ffine[:, m][None, :], axis=1)
            else:
                val += _kress_last(mesh, fine, rows, a, r2, R, ls_rows, w_old, w_new, tb,
                                   ffine[:, m - 1], ffine[:, m], b_c)
        out[:, N] = val / (4 * np.pi * b_c)
    return out if sel is None else out[:, sel]


def _fine_geometry(mesh: BoundaryMesh, p: int):
    fine = mesh.refined(p) if p > 1 else mesh
    rows = np.arange(mesh.n) * p
    d = fine.nodes[rows][:, None, :] - fine.nodes[None, :, :]
    r2 = d[..., 0] ** 2 + d[..., 1] ** 2
    R = kress_weights(fine.n_per_curve)
    m = fine.n_per_curve
    k = np.arange(m)
    ls_rows = None
    delta = 2 * np.pi * (((rows % m)[:, None] - k[None, :]) % m) / m
    with np.errstate(divide="ignore"):
        ls_rows = np.log(4 * np.sin(delta / 2) ** 2)
    return fine, rows, r2, R, ls_rows


def _kress_last(mesh, fine, rows, a, r2, R, ls_rows, w_old, w_new, dt, f_old, f_new, b):
    """Last interval: weights are ``C log r + smooth`` with C known in closed form."""
    m = fine.n_per_curve
    hf = 2 * np.pi / m
    c_new = -2 * (dt + a) / dt
    c_old = 2 * a / dt
    total = np.zeros(mesh.n)
    comp_rows = fine.component[rows]
    for cid, sl in enumerate(fine.slices()):
        own = comp_rows == cid
        other = ~own
        if np.any(other):
            ws = fine.weights[sl]
            total[other] += np.sum(w_old[other][:, sl] * ws * f_old[sl], axis=1)
            total[other] += np.sum(w_new[other][:, sl] * ws * f_new[sl], axis=1)
        if not np.any(own):
            continue
        ri = np.flatnonzero(own)
        loc = rows[ri] - sl.start
        ls = ls_rows[ri]
        Rr = R[loc]
        speed = fine.speed[sl]
        wn, wo = w_new[ri][:, sl], w_old[ri][:, sl]
        cn, co = c_new[ri][:, sl], c_old[ri][:, sl]
        diag = (np.arange(ri.size), loc)
        with np.errstate(invalid="ignore"):
            rest_n = wn - 0.5 * cn * ls
            rest_o = wo - 0.5 * co * ls
        rest_n[diag] = -2 * np.log(speed[loc]) - EULER_GAMMA + np.log(4 * b * dt) - 1.0
        rest_o[diag] = 1.0
        kn = 0.5 * Rr * cn + hf * rest_n
        ko = 0.5 * Rr * co + hf * rest_o
        total[ri] += (kn * speed) @ f_new[sl] + (ko * speed) @ f_old[sl]
    return total


# ---------------------------------------------------------------------------
# Temperature
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TemperatureTrace:
    """Boundary temperature on nodes x times with its order decomposition."""

    times: np.ndarray
    zeroth: np.ndarray
    first: np.ndarray
    variant: str
    mesh: BoundaryMesh

    @property
    def values(self) -> np.ndarray:
        return self.zeroth + self.first


def default_time_grid(T: float = 1.0, n: int = 64, t_min_ratio: float = 1e-2) -> np.ndarray:
    """``0`` followed by ``n-1`` geometrically graded nodes ending at ``T``."""
    return np.concatenate([[0.0], np.geomspace(T * t_min_ratio, T, n - 1)])


def _resolvent_columns(decomp: SpectralDecomposition, lam: float, load: np.ndarray,
                       guard: float = 1e-10) -> np.ndarray:
    C = decomp.eigenvectors.T @ (decomp.gram @ load)
    gap = lam - decomp.eigenvalues
    loaded = np.abs(C).max(axis=1) > 1e-12 * max(np.abs(C).max(), 1e-300)
    if loaded.any():
        dist = float(np.abs(gap[loaded]).min())
        if dist < guard:
            warnings.warn(f"lambda_gamma within {dist:.3g} of the spectrum", NearSingularWarning,
                          stacklevel=3)
    return decomp.eigenvectors @ (C / gap[:, None])


def temperature_boundary(decomp: SpectralDecomposition, mesh: BoundaryMesh, interior,
                         source: HeatSource, params: ThermalParams, times,
                         zeroth: np.ndarray | None = None, load: np.ndarray | None = None,
                         ) -> TemperatureTrace:
    """``tau = F_D - V (lam_gamma - K*)^{-1}[dF_D/dnu]`` on the boundary nodes."""
    times = _times(times)
    b = params.b_c
    rule = build_volume_rule(interior, source, mesh.nodes)
    F = F_D(interior, source, b, mesh.nodes, times, rule) if zeroth is None else zeroth
    dF = dF_dnu(interior, source, b, mesh, times, rule) if load is None else load
    psi = _resolvent_columns(decomp, params.lambda_gamma, dF)
    first = -V_heat(mesh, psi, b, times)
    return TemperatureTrace(times, F, first, "direct", mesh)


def temperature_boundary_projected(decomp: SpectralDecomposition, mesh: BoundaryMesh, interior,
                                   source: HeatSource, params: ThermalParams, times,
                                   zeroth: np.ndarray | None = None,
                                   load: np.ndarray | None = None) -> TemperatureTrace:
    """``tau = F_D + V (lam_gamma - K*)^{-1} P[dF_D/dnu]``, P removing the 1/2 eigenspace."""
    times = _times(times)
    b = params.b_c
    if zeroth is None or load is None:
        rule = build_volume_rule(interior, source, mesh.nodes)
        zeroth = F_D(interior, source, b, mesh.nodes, times, rule) if zeroth is None else zeroth
        load = dF_dnu(interior, source, b, mesh, times, rule) if load is None else load
    P = np.stack([project_off_half(decomp, load[:, k]) for k in range(times.size)], axis=1)
    psi = _resolvent_columns(decomp, params.lambda_gamma, P)
    first = V_heat(mesh, psi, b, times)
    return TemperatureTrace(times, zeroth, first, "projected", mesh)


def variant_difference(a: TemperatureTrace, b: TemperatureTrace) -> float:
    return float(np.abs(a.values - b.values).max() / max(np.abs(a.values).max(), 1e-300))


def total_boundary_heat(trace: TemperatureTrace) -> dict:
    """Per-time boundary integrals of the total, zeroth and first parts."""
    w = trace.mesh.weights
    return {"t": trace.times, "total": w @ trace.values, "zeroth": w @ trace.zeroth,
            "first": w @ trace.first}


def log_time_fit(t: np.ndarray, y: np.ndarray) -> tuple[float, float, float]:
    """Least-squares ``y = a log t + c``; returns ``(a, c, R^2)``."""
    x = np.log(t)
    A = np.stack([x, np.ones_like(x)], axis=1)
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = y - A @ coef
    r2 = 1 - resid @ resid / max(((y - y.mean()) ** 2).sum(), 1e-300)
    return float(coef[0]), float(coef[1]), float(r2)


# ---------------------------------------------------------------------------
# Finite-difference oracle
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FDGrid:
    """Tensor grid of cell centres on ``[-half_width, half_width]^2``.

    Cells are uniform of size ``h_core`` inside ``[-core, core]^2`` and grow
    geometrically by ``growth`` outside.
    """

    half_width: float
    core: float
    h_core: float
    growth: float = 1.08

    def edges(self) -> np.ndarray:
        n_core = int(round(2 * self.core / self.h_core))
        e = list(np.linspace(-self.core, self.core, n_core + 1))
        h = self.h_core
        while e[-1] < self.half_width:
            h *= self.growth
            e.append(e[-1] + h)
        right = np.array(e)
        right = right[right >= 0]
        left = -right[::-1]
        return np.unique(np.concatenate([left, right]))


@dataclass(frozen=True)
class FDSolution:
    x: np.ndarray
    y: np.ndarray
    times: np.ndarray
    values: np.ndarray  # (len(times), ny, nx)

    def interpolate(self, pts: np.ndarray, k: int = -1) -> np.ndarray:
        from scipy.interpolate import RegularGridInterpolator
        f = RegularGridInterpolator((self.y, self.x), self.values[k], method="cubic")
        pts = np.atleast_2d(pts)
        return f(np.stack([pts[:, 1], pts[:, 0]], axis=1))


def fd_heat_oracle(grid: FDGrid, inside: Callable[[np.ndarray], np.ndarray], params: ThermalParams,
                   g_u: HeatSource, T: float, n_steps: int = 200, method: str = "implicit",
                   n_max: int = 400, save_times=None) -> FDSolution:
    """Finite-volume solution of ``rhoC tau_t - div(gamma grad tau) = gamma_c g_u chi_D``.

    Face conductivities are harmonic means of the adjacent cell values, which
    enforces continuity of the flux ``gamma dtau/dnu`` across the interface;
    the box boundary is held at zero. ``method="implicit"`` uses
    Crank-Nicolson after two backward-Euler start-up steps; ``"explicit"``
    uses forward Euler and checks the stability bound.

    Raises
    ------
    CFLError
        If the explicit step exceeds the stability limit.
    """
    edges = grid.edges()
    if edges.size - 1 > n_max:
        raise ValueError(f"grid has {edges.size - 1} cells per side, above {n_max}")
    xc = 0.5 * (edges[1:] + edges[:-1])
    hx = np.diff(edges)
    nx = xc.size
    X, Y = np.meshgrid(xc, xc)
    P = np.stack([X.ravel(), Y.ravel()], axis=1)
    ins = inside(P)
    gam = np.where(ins, params.gamma_c, params.gamma_m)
    rc = np.where(ins, params.rhoC_c, params.rhoC_m)
    src = np.where(ins, params.gamma_c * g_u(P), 0.0)
    idx = np.arange(nx * nx).reshape(nx, nx)
    area = np.outer(hx, hx).ravel()
    rows, cols, vals = [], [], []
    diag = np.zeros(nx * nx)
    G = gam.reshape(nx, nx)
    # x-direction faces
    for axis in (0, 1):
        if axis == 1:
            g0, g1 = G[:, :-1], G[:, 1:]
            i0, i1 = idx[:, :-1], idx[:, 1:]
            dist = 0.5 * (hx[:-1] + hx[1:])[None, :]
            face = hx[:, None] * np.ones_like(g0)
        else:
            g0, g1 = G[:-1, :], G[1:, :]
            i0, i1 = idx[:-1, :], idx[1:, :]
            dist = 0.5 * (hx[:-1] + hx[1:])[:, None]
            face = hx[None, :] * np.ones_like(g0)
        gh = 2 * g0 * g1 / (g0 + g1)
        c = (gh * face / dist).ravel()
        a, b_ = i0.ravel(), i1.ravel()
        rows += [a, b_]
        cols += [b_, a]
        vals += [c, c]
        np.add.at(diag, a, -c)
        np.add.at(diag, b_, -c)
    # Dirichlet zero on the box: half-cell distance to the wall
    for side in (idx[0, :], idx[-1, :], idx[:, 0], idx[:, -1]):
        hh = hx[0]
        c = gam[side] * hh / (0.5 * hh)
        np.add.at(diag, side, -c)
    L = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(nx * nx, nx * nx)) + sp.diags(diag)
    M = rc * area
    f = src * area
    dt = T / n_steps
    save = np.asarray([T] if save_times is None else save_times, dtype=float)
    out = []
    u = np.zeros(nx * nx)
    t = 0.0
    if method == "explicit":
        limit = float(np.min(M / np.maximum(-diag, 1e-300)))
        if dt > limit:
            raise CFLError(f"dt = {dt:.3g} exceeds the explicit stability limit {limit:.3g}")
        for step in range(n_steps):
            u = u + dt * (L @ u + f) / M
            t += dt
            if np.any(np.isclose(t, save, rtol=1e-10)):
                out.append(u.reshape(nx, nx).copy())
    elif method == "implicit":
        Mdiag = sp.diags(M)
        be = spla.splu((Mdiag - (dt / 2) * L).tocsc())
        # two half-size backward-Euler steps damp start-up oscillations
        for _ in range(2):
            u = be.solve(M * u + (dt / 2) * f)
            t += dt / 2
        if np.any(np.isclose(t, save, rtol=1e-10)):
            out.append(u.reshape(nx, nx).copy())
        cn_l = spla.splu((Mdiag - (dt / 2) * L).tocsc())
        cn_r = (Mdiag + (dt / 2) * L).tocsr()
        for step in range(1, n_steps):
            u = cn_l.solve(cn_r @ u + dt * f)
            t += dt
            if np.any(np.isclose(t, save, rtol=1e-10)):
                out.append(u.reshape(nx, nx).copy())
    else:
        raise ValueError("method must be 'implicit' or 'explicit'")
    return FDSolution(xc, xc, save[:len(out)], np.array(out))


def inside_curve(curve, n: int = 4096) -> Callable[[np.ndarray], np.ndarray]:
    poly = curve.point(-np.pi + 2 * np.pi * np.arange(n) / n)
    return lambda P: _points_in_polygon(np.atleast_2d(P), poly)

"""Parametrized closed curves, boundary quadrature meshes and interior meshes.

Curves are smooth, closed and positively oriented. Boundary meshes use
equispaced parameters with the periodic trapezoid rule, which is spectrally
accurate for the smooth parts of every kernel in this package.

Interior meshes carry two discretizations of the same domain: a straight-sided
triangulation (sample points, plots, area checks) and a curved tensor
quadrature in polar-map coordinates ``y = z + s (p(theta) - z)`` that follows
the exact boundary and supports locally refined singular integration.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

from functools import lru_cache

import numpy as np
from scipy.spatial import Delaunay

logger = logging.getLogger(__name__)

MIN_NODES = 16
MAX_ASPECT_RATIO = 12.0


class InvalidGeometryError(ValueError):
    """Raised for nonpositive axes, overlapping curves or bad orientation."""


class MeshingError(RuntimeError):
    """Raised when an interior triangulation is degenerate."""


@dataclass(frozen=True)
class ParamCurve:
    """Smooth closed curve ``theta -> p(theta)`` on ``[-pi, pi]``.

    Attributes
    ----------
    center : np.ndarray, shape (2,)
        Reference point; the polar interior map is centred here.
    point, deriv, deriv2 : callable
        Vectorized maps from an array of parameters to arrays of shape (m, 2).
    kind : str
        ``"ellipse"`` or ``"general"``.
    params : dict
        Construction parameters (semi-axes, rotation) kept for export.
    """

    center: np.ndarray
    point: Callable[[np.ndarray], np.ndarray]
    deriv: Callable[[np.ndarray], np.ndarray]
    deriv2: Callable[[np.ndarray], np.ndarray]
    kind: str = "general"
    params: dict = field(default_factory=dict)

    def affine(self, shift: Sequence[float], scale: float) -> "ParamCurve":
        """Return the curve ``shift + scale * p``."""
        shift = np.asarray(shift, dtype=float)
        if scale <= 0:
            raise InvalidGeometryError("scale must be positive")
        p, dp, ddp = self.point, self.deriv, self.deriv2
        params = dict(self.params)
        if self.kind == "ellipse":
            params["a"] = params["a"] * scale
            params["b"] = params["b"] * scale
            params["center"] = list(shift + scale * np.asarray(params["center"]))
        return ParamCurve(
            center=shift + scale * self.center,
            point=lambda t: shift + scale * p(t),
            deriv=lambda t: scale * dp(t),
            deriv2=lambda t: scale * ddp(t),
            kind=self.kind,
            params=params,
        )

    def graded(self, theta0: float, strength: float) -> "ParamCurve":
        """Same curve with nodes clustered near parameter ``theta0``.

        Uses ``sigma(t) = t - a sin(t - theta0)``; the local node spacing at
        ``theta0`` shrinks by ``1 - a``. ``strength = a`` must lie in [0, 1).
        """
        a = float(strength)
        if not 0 <= a < 1:
            raise InvalidGeometryError("grading strength must lie in [0, 1)")
        p, dp, ddp = self.point, self.deriv, self.deriv2

        def sig(t):
            t = np.asarray(t, dtype=float)
            return t - a * np.sin(t - theta0), 1 - a * np.cos(t - theta0), a * np.sin(t - theta0)

        def point(t):
            return p(sig(t)[0])

        def deriv(t):
            s, ds, _ = sig(t)
            return dp(s) * ds[..., None]

        def deriv2(t):
            s, ds, dds = sig(t)
            return ddp(s) * (ds**2)[..., None] + dp(s) * dds[..., None]

        params = dict(self.params, grading={"theta0": float(theta0), "strength": a})
        return ParamCurve(self.center, point, deriv, deriv2, "general", params)

    def diameter(self, n: int = 512) -> float:
        pts = self.point(np.linspace(-np.pi, np.pi, n, endpoint=False))
        d = pts[:, None, :] - pts[None, :, :]
        return float(np.sqrt((d**2).sum(-1)).max())


def build_ellipse(a: float, b: float, center: Sequence[float] = (0.0, 0.0),
                  rotation: float = 0.0) -> ParamCurve:
    """Ellipse with semi-axes ``a`` (along the rotated x axis) and ``b``.

    Raises
    ------
    InvalidGeometryError
        If either semi-axis is not strictly positive.
    """
    if not (np.isfinite(a) and np.isfinite(b)) or a <= 0 or b <= 0:
        raise InvalidGeometryError(f"semi-axes must be positive, got a={a}, b={b}")
    c = np.asarray(center, dtype=float).reshape(2)
    cr, sr = np.cos(rotation), np.sin(rotation)
    rot = np.array([[cr, -sr], [sr, cr]])

    def point(t):
        t = np.asarray(t, dtype=float)
        local = np.stack([a * np.cos(t), b * np.sin(t)], axis=-1)
        return c + local @ rot.T

    def deriv(t):
        t = np.asarray(t, dtype=float)
        return np.stack([-a * np.sin(t), b * np.cos(t)], axis=-1) @ rot.T

    def deriv2(t):
        t = np.asarray(t, dtype=float)
        return np.stack([-a * np.cos(t), -b * np.sin(t)], axis=-1) @ rot.T

    params = {"a": float(a), "b": float(b), "center": [float(c[0]), float(c[1])],
              "rotation": float(rotation)}
    return ParamCurve(center=c, point=point, deriv=deriv, deriv2=deriv2,
                      kind="ellipse", params=params)


def build_circle(radius: float, center: Sequence[float] = (0.0, 0.0)) -> ParamCurve:
    return build_ellipse(radius, radius, center, 0.0)


@dataclass(frozen=True)
class BoundaryMesh:
    """Nyström discretization of one or more closed curves.

    Attributes
    ----------
    nodes : np.ndarray, shape (n, 2)
    normals : np.ndarray, shape (n, 2)
        Unit outward normals.
    weights : np.ndarray, shape (n,)
        Arclength trapezoid weights ``|p'(theta_i)| 2 pi / m``.
    component : np.ndarray of int, shape (n,)
    theta : np.ndarray, shape (n,)
    curvature : np.ndarray, shape (n,)
    speed : np.ndarray, shape (n,)
        ``|p'(theta_i)|``.
    curves : tuple of ParamCurve
    n_per_curve : int
    """

    nodes: np.ndarray
    normals: np.ndarray
    weights: np.ndarray
    component: np.ndarray
    theta: np.ndarray
    curvature: np.ndarray
    speed: np.ndarray
    curves: tuple
    n_per_curve: int

    @property
    def n(self) -> int:
        return self.nodes.shape[0]

    @property
    def n_components(self) -> int:
        return len(self.curves)

    @property
    def h(self) -> float:
        """Parameter step ``2 pi / n_per_curve``."""
        return 2 * np.pi / self.n_per_curve

    def slices(self) -> list[slice]:
        m = self.n_per_curve
        return [slice(i * m, (i + 1) * m) for i in range(self.n_components)]

    def perimeters(self) -> np.ndarray:
        return np.array([self.weights[s].sum() for s in self.slices()])

    def diameter(self) -> float:
        d = self.nodes[:, None, :] - self.nodes[None, :, :]
        return float(np.sqrt((d**2).sum(-1)).max())

    def max_spacing(self) -> float:
        return float(self.weights.max())

    def refined(self, factor: int) -> "BoundaryMesh":
        """Same curves with ``factor`` times more nodes per curve."""
        return discretize(list(self.curves), self.n_per_curve * int(factor))

    def validate(self) -> None:
        for arr, name in ((self.normals, "normals"), (self.weights, "weights")):
            if arr.shape[0] != self.n or not np.all(np.isfinite(arr)):
                raise InvalidGeometryError(f"inconsistent {name}")
        if np.any(self.weights <= 0):
            raise InvalidGeometryError("quadrature weights must be positive")


def _signed_area(pts: np.ndarray) -> float:
    x, y = pts[:, 0], pts[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def _points_in_polygon(pts: np.ndarray, poly: np.ndarray) -> np.ndarray:
    x, y = pts[:, 0][:, None], pts[:, 1][:, None]
    x0, y0 = poly[:, 0][None, :], poly[:, 1][None, :]
    x1, y1 = np.roll(poly[:, 0], -1)[None, :], np.roll(poly[:, 1], -1)[None, :]
    cond = (y0 > y) != (y1 > y)
    with np.errstate(divide="ignore", invalid="ignore"):
        xc = x0 + (y - y0) * (x1 - x0) / (y1 - y0)
    return np.sum(cond & (x < xc), axis=1) % 2 == 1


def discretize(curves: Sequence[ParamCurve], n_per_curve: int,
               overlap_tol: float = 1e-12) -> BoundaryMesh:
    """Equispaced-parameter trapezoid discretization of closed curves.

    Raises
    ------
    InvalidGeometryError
        If ``n_per_curve`` is odd or below 16, a curve is negatively oriented
        or degenerate, or two curves overlap.
    """
    if isinstance(curves, ParamCurve):
        curves = [curves]
    curves = tuple(curves)
    if not curves:
        raise InvalidGeometryError("at least one curve is required")
    n = int(n_per_curve)
    if n < MIN_NODES or n % 2:
        raise InvalidGeometryError(f"n_per_curve must be even and >= {MIN_NODES}, got {n}")
    theta = -np.pi + 2 * np.pi * np.arange(n) / n
    blocks = []
    for cid, c in enumerate(curves):
        p = c.point(theta)
        dp = c.deriv(theta)
        ddp = c.deriv2(theta)
        speed = np.hypot(dp[:, 0], dp[:, 1])
        if np.any(speed <= 0) or not np.all(np.isfinite(p)):
            raise InvalidGeometryError(f"curve {cid} has a degenerate parametrization")
        if _signed_area(p) <= 0:
            raise InvalidGeometryError(f"curve {cid} must be positively oriented")
        tangent = dp / speed[:, None]
        normal = np.stack([tangent[:, 1], -tangent[:, 0]], axis=1)
        kappa = (dp[:, 0] * ddp[:, 1] - dp[:, 1] * ddp[:, 0]) / speed**3
        blocks.append((p, normal, speed * 2 * np.pi / n, np.full(n, cid), theta.copy(),
                       kappa, speed))
    nodes = np.concatenate([b[0] for b in blocks])
    scale = max(np.ptp(nodes[:, 0]), np.ptp(nodes[:, 1]))
    for i in range(len(curves)):
        for j in range(i + 1, len(curves)):
            pi_, pj = blocks[i][0], blocks[j][0]
            d = np.sqrt(((pi_[:, None, :] - pj[None, :, :]) ** 2).sum(-1)).min()
            if d <= overlap_tol * scale or np.any(_points_in_polygon(pi_, pj)) \
                    or np.any(_points_in_polygon(pj, pi_)):
                raise InvalidGeometryError(f"curves {i} and {j} overlap")
    mesh = BoundaryMesh(
        nodes=nodes,
        normals=np.concatenate([b[1] for b in blocks]),
        weights=np.concatenate([b[2] for b in blocks]),
        component=np.concatenate([b[3] for b in blocks]).astype(int),
        theta=np.concatenate([b[4] for b in blocks]),
        curvature=np.concatenate([b[5] for b in blocks]),
        speed=np.concatenate([b[6] for b in blocks]),
        curves=curves,
        n_per_curve=n,
    )
    mesh.validate()
    return mesh


# ---------------------------------------------------------------------------
# Interior meshes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class InteriorMesh:
    """Triangulation plus curved tensor quadrature of a curve's interior.

    Attributes
    ----------
    vertices : np.ndarray, shape (nv, 2)
    triangles : np.ndarray of int, shape (nt, 3)
    areas : np.ndarray, shape (nt,)
    centroids : np.ndarray, shape (nt, 2)
    curve : ParamCurve
    polar : bool
        True when the curve is star-shaped about its centre, enabling the
        curved polar-map quadrature used by the volume potentials.
    s_panels, t_panels : int
        Panel counts of the polar quadrature in the radial and angular
        parameters.
    order : int
        Gauss points per panel direction.
    """

    vertices: np.ndarray
    triangles: np.ndarray
    areas: np.ndarray
    centroids: np.ndarray
    curve: ParamCurve
    polar: bool
    s_panels: int
    t_panels: int
    order: int = 6

    @property
    def area(self) -> float:
        return float(self.areas.sum())

    def polar_map(self, s: np.ndarray, t: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Return points ``z + s (p(t) - z)`` and the Jacobian determinant."""
        z = self.curve.center
        q = self.curve.point(t) - z
        dq = self.curve.deriv(t)
        pts = z + s[..., None] * q
        jac = s * (q[..., 0] * dq[..., 1] - q[..., 1] * dq[..., 0])
        return pts, jac

    def quadrature(self) -> tuple[np.ndarray, np.ndarray]:
        """Smooth-integrand quadrature nodes and weights over the curved domain."""
        if not self.polar:
            return self.centroids, self.areas
        cells = base_cells(self.s_panels, self.t_panels)
        return cell_quadrature(self, cells, self.order)


def base_cells(s_panels: int, t_panels: int) -> np.ndarray:
    """Parameter-space cells ``[s0, s1, t0, t1]`` covering ``[0,1] x [-pi,pi]``."""
    s = np.linspace(0.0, 1.0, s_panels + 1)
    t = np.linspace(-np.pi, np.pi, t_panels + 1)
    S0, T0 = np.meshgrid(s[:-1], t[:-1], indexing="ij")
    S1, T1 = np.meshgrid(s[1:], t[1:], indexing="ij")
    return np.stack([S0.ravel(), S1.ravel(), T0.ravel(), T1.ravel()], axis=1)


@lru_cache(maxsize=None)
def _gauss(order: int) -> tuple[np.ndarray, np.ndarray]:
    x, w = np.polynomial.legendre.leggauss(order)
    return 0.5 * (x + 1), 0.5 * w


def cell_quadrature(mesh: InteriorMesh, cells: np.ndarray,
                    order: int) -> tuple[np.ndarray, np.ndarray]:
    """Tensor Gauss rule on parameter cells mapped through the polar map."""
    g, gw = _gauss(order)
    cells = np.atleast_2d(cells)
    ds = cells[:, 1] - cells[:, 0]
    dt = cells[:, 3] - cells[:, 2]
    s = cells[:, 0][:, None, None] + ds[:, None, None] * g[None, :, None]
    t = cells[:, 2][:, None, None] + dt[:, None, None] * g[None, None, :]
    s, t = np.broadcast_arrays(s, t)
    pts, jac = mesh.polar_map(s, t)
    w = (ds * dt)[:, None, None] * gw[None, :, None] * gw[None, None, :] * jac
    return pts.reshape(-1, 2), w.ravel()


def duffy_quadrature(mesh: InteriorMesh, apex: np.ndarray, cell: np.ndarray,
                     order: int) -> tuple[np.ndarray, np.ndarray]:
    """Duffy rule on a parameter cell split into triangles with a common apex.

    Removes ``1/r`` and ``log r`` singularities located at ``apex``, which must
    lie in the closure of ``cell``.
    """
    g, gw = _gauss(order)
    s0, s1, t0, t1 = cell
    corners = np.array([[s0, t0], [s1, t0], [s1, t1], [s0, t1]])
    u, v = np.meshgrid(g, g, indexing="ij")
    wu, wv = np.meshgrid(gw, gw, indexing="ij")
    pts_all, w_all = [], []
    for k in range(4):
        P, Q = corners[k], corners[(k + 1) % 4]
        det = (P[0] - apex[0]) * (Q[1] - P[1]) - (P[1] - apex[1]) * (Q[0] - P[0])
        if abs(det) < 1e-300:
            continue
        par = apex + u[..., None] * (P - apex) + (u * v)[..., None] * (Q - P)
        pts, jac = mesh.polar_map(par[..., 0], par[..., 1])
        pts_all.append(pts.reshape(-1, 2))
        w_all.append((wu * wv * u * abs(det) * jac).ravel())
    return np.concatenate(pts_all), np.concatenate(w_all)


def _star_shaped(curve: ParamCurve, n: int = 2048) -> bool:
    t = np.linspace(-np.pi, np.pi, n, endpoint=False)
    q = curve.point(t) - curve.center
    dq = curve.deriv(t)
    return bool(np.all(q[:, 0] * dq[:, 1] - q[:, 1] * dq[:, 0] > 0))


def _zip_rings(i0: int, m0: int, i1: int, m1: int) -> list[tuple[int, int, int]]:
    """Triangulate the band between two closed rings of angle-sorted points."""
    tris = []
    a = b = 0
    while a < m0 or b < m1:
        ta = (a + 1) / m0 if m0 else 2.0
        tb = (b + 1) / m1
        if b < m1 and (a >= m0 or tb <= ta):
            tris.append((i0 + a % m0, i1 + b % m1, i1 + (b + 1) % m1))
            b += 1
        else:
            tris.append((i0 + a % m0, i1 + b % m1, i0 + (a + 1) % m0))
            a += 1
    return tris


def mesh_interior(curve: ParamCurve, target_h: float, order: int = 6) -> InteriorMesh:
    """Conforming triangulation of the interior with a matching curved quadrature.

    Star-shaped curves (all ellipses) get a structured mapped-polar mesh whose
    rings follow the polar map; other curves fall back to a Delaunay mesh of
    boundary and lattice points.

    Raises
    ------
    InvalidGeometryError
        If ``target_h`` is not below the smallest inscribed radius estimate.
    MeshingError
        If any triangle exceeds the aspect-ratio threshold.
    """
    t = np.linspace(-np.pi, np.pi, 1024, endpoint=False)
    radii = np.hypot(*(curve.point(t) - curve.center).T)
    rmin, rmax = radii.min(), radii.max()
    if curve.kind == "ellipse":
        rmin = min(curve.params["a"], curve.params["b"])
    if not (0 < target_h < rmin):
        raise InvalidGeometryError(f"target_h must lie in (0, {rmin}), got {target_h}")
    polar = _star_shaped(curve)
    pts = curve.point(t)
    perim = np.sum(np.hypot(*(np.roll(pts, -1, axis=0) - pts).T))
    n_t = max(16, int(np.ceil(perim / target_h)))
    n_s = max(2, int(np.ceil(rmax / target_h)))
    if polar:
        verts = [curve.center[None, :]]
        rings = []
        start = 1
        for i in range(1, n_s + 1):
            s = i / n_s
            m = max(6, int(round(n_t * s)))
            th = -np.pi + 2 * np.pi * np.arange(m) / m
            verts.append(curve.center + s * (curve.point(th) - curve.center))
            rings.append((start, m))
            start += m
        vertices = np.concatenate(verts)
        tris = [(0, rings[0][0] + k, rings[0][0] + (k + 1) % rings[0][1])
                for k in range(rings[0][1])]
        for (i0, m0), (i1, m1) in zip(rings[:-1], rings[1:]):
            tris.extend(_zip_rings(i0, m0, i1, m1))
        triangles = np.array(tris, dtype=int)
    else:
        bpts = curve.point(-np.pi + 2 * np.pi * np.arange(n_t) / n_t)
        lo, hi = bpts.min(0), bpts.max(0)
        gx, gy = np.meshgrid(np.arange(lo[0], hi[0], target_h), np.arange(lo[1], hi[1], target_h))
        grid = np.stack([gx.ravel(), gy.ravel()], axis=1)
        inside = _points_in_polygon(grid, bpts)
        grid = grid[inside]
        d = np.sqrt(((grid[:, None, :] - bpts[None, :, :]) ** 2).sum(-1)).min(1)
        grid = grid[d > 0.5 * target_h]
        vertices = np.concatenate([bpts, grid])
        triangles = Delaunay(vertices).simplices
        cent = vertices[triangles].mean(axis=1)
        triangles = triangles[_points_in_polygon(cent, bpts)]
    a, b, c = (vertices[triangles[:, k]] for k in range(3))
    areas = 0.5 * ((b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0]))
    flip = areas < 0
    triangles[flip] = triangles[flip][:, [0, 2, 1]]
    areas = np.abs(areas)
    edges = np.stack([np.hypot(*(b - a).T), np.hypot(*(c - b).T), np.hypot(*(a - c).T)], axis=1)
    with np.errstate(divide="ignore"):
        aspect = edges.max(1) ** 2 / (2 * areas)
    if np.any(areas <= 0) or np.any(aspect > MAX_ASPECT_RATIO):
        raise MeshingError(f"degenerate triangles (max aspect {aspect.max():.3g})")
    centroids = (a + b + c) / 3.0
    n_sp = max(4, int(np.ceil(n_s / 2)))
    n_tp = max(16, int(np.ceil(n_t / 2)))
    return InteriorMesh(vertices=vertices, triangles=triangles, areas=areas,
                        centroids=centroids, curve=curve, polar=polar,
                        s_panels=n_sp, t_panels=n_tp, order=order)

"""Helmholtz layer potentials, their small-k series and the transmission solver.

The outgoing Green function is ``G(x, k) = -(i/4) H0(k|x|)``. Both Helmholtz
operators are discretized with the log-splitting of Kress: the part of the
kernel multiplying ``log|x-y|`` is integrated with the periodic product
weights and the remainder with the trapezoid rule, each block per component.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import hankel1, jv

from .geometry import BoundaryMesh
from .np_core import (DenseOperator, SpectralDecomposition, _vals, kress_weights,
                      log_sin_term, pair_geometry)

logger = logging.getLogger(__name__)

EULER_GAMMA = float(np.euler_gamma)


class ResonanceError(np.linalg.LinAlgError):
    """The transmission system is numerically singular."""


class NearBoundaryWarning(RuntimeWarning):
    """Field evaluated closer to the boundary than two node spacings."""


@dataclass(frozen=True)
class WaveParams:
    """Frequency and relative material constants.

    ``k_m = omega sqrt(eps_m mu_m)`` and ``k_c = omega sqrt(eps_c mu_c)`` in
    the units of the mesh (pass ``omega`` already divided by the speed of
    light, or use ``from_wavelength``).
    """

    omega: float
    eps_m: float
    eps_c: complex
    mu_m: float = 1.0
    mu_c: complex = 1.0

    def __post_init__(self):
        if np.imag(self.eps_c) < 0:
            raise ValueError("Im eps_c must be nonnegative")
        if self.omega <= 0 or self.eps_m <= 0 or self.mu_m <= 0:
            raise ValueError("omega, eps_m and mu_m must be positive")

    @classmethod
    def from_wavelength(cls, wavelength: float, eps_m: float, eps_c: complex,
                        mu_m: float = 1.0, mu_c: complex = 1.0) -> "WaveParams":
        """Parameters whose background wavenumber is ``2 pi / wavelength``."""
        omega = 2 * np.pi / (wavelength * np.sqrt(eps_m * mu_m))
        return cls(omega, eps_m, eps_c, mu_m, mu_c)

    @classmethod
    def from_lambda(cls, lam: complex, k_m: float, eps_m: float = 1.0) -> "WaveParams":
        """Particle permittivity realizing a given field contrast parameter.

        The inner-field resolvent parameter of the transmission problem with
        the ``1/eps`` flux condition is ``-lambda_eps`` (see ``field_lambda``);
        this inverts that map.
        """
        lam_eps = -complex(lam)
        eps_c = eps_m * (2 * lam_eps + 1) / (2 * lam_eps - 1)
        return cls(k_m / np.sqrt(eps_m), eps_m, eps_c)

    @property
    def k_m(self) -> float:
        return float(self.omega * np.sqrt(self.eps_m * self.mu_m))

    @property
    def k_c(self) -> complex:
        k = self.omega * np.sqrt(complex(self.eps_c) * complex(self.mu_c))
        return k if k.imag >= 0 else -k

    @property
    def lambda_eps(self) -> complex:
        """``(eps_c + eps_m) / (2 (eps_c - eps_m))``."""
        return (self.eps_c + self.eps_m) / (2 * (self.eps_c - self.eps_m))

    @property
    def field_lambda(self) -> complex:
        """Resolvent parameter of the inner-field expansion for this problem.

        With the ``1/eps`` weighted flux condition the quasi-static density
        solves ``(-lambda_eps I - K*) psi = nu . grad u^i``, so the expansion
        uses ``-lambda_eps``.
        """
        return -self.lambda_eps


@dataclass(frozen=True)
class IncidentWave:
    """Plane wave ``exp(i k d.x)``."""

    direction: np.ndarray
    k: float

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=float)
        if d.shape != (2,) or abs(np.hypot(*d) - 1) > 1e-12:
            raise ValueError("direction must be a unit 2-vector")
        object.__setattr__(self, "direction", d)

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return np.exp(1j * self.k * (x @ self.direction))

    def gradient(self, x) -> np.ndarray:
        return 1j * self.k * self(x)[..., None] * self.direction


# ---------------------------------------------------------------------------
# Series coefficients
# ---------------------------------------------------------------------------

def series_coefficients(k: complex, j: int) -> tuple[complex, float, complex]:
    """Return ``(tau_k, b_j, c_j)`` of the small-argument expansion

    ``G = (1/2pi) log r + tau_k + sum_j (b_j log(k r) + c_j) (k r)^{2j}``.
    """
    if j < 1:
        raise ValueError("j must be >= 1")
    tau = (np.log(complex(k)) + EULER_GAMMA - np.log(2)) / (2 * np.pi) - 0.25j
    b = (-1) ** j / (2 * np.pi) / (4**j * float(np.prod(np.arange(1, j + 1))) ** 2)
    harmonic = float(np.sum(1.0 / np.arange(1, j + 1)))
    c = b * (EULER_GAMMA - np.log(2) - 0.5j * np.pi - harmonic)
    return tau, b, c


def tau_k(k: complex) -> complex:
    return series_coefficients(k, 1)[0]


# ---------------------------------------------------------------------------
# Assembly
# ---------------------------------------------------------------------------

def _assemble_split(mesh: BoundaryMesh, log_coeff, full_kernel, diag_rest) -> np.ndarray:
    """Kress assembly for ``k = log_coeff * log r + smooth`` (see np_core).

    ``log_coeff`` and ``full_kernel`` are (n, n) arrays over all node pairs;
    ``diag_rest`` is the diagonal limit of ``k - log_coeff * 0.5 log(4 sin^2)``.
    """
    n, m, h = mesh.n, mesh.n_per_curve, mesh.h
    R = kress_weights(m)
    ls = log_sin_term(m)
    out = np.empty((n, n), dtype=complex)
    for a, sa in enumerate(mesh.slices()):
        for b, sb in enumerate(mesh.slices()):
            if a == b:
                c1 = log_coeff[sa, sa]
                rest = full_kernel[sa, sa] - 0.5 * c1 * ls
                rest[np.diag_indices_from(rest)] = diag_rest[sa]
                out[sa, sa] = (0.5 * R * c1 + h * rest) * mesh.speed[sa][None, :]
            else:
                out[sa, sb] = full_kernel[sa, sb] * mesh.weights[sb][None, :]
    return out


def assemble_Sk(mesh: BoundaryMesh, k: complex) -> DenseOperator:
    """Helmholtz single layer with kernel ``-(i/4) H0(k|x-y|)``.

    Raises
    ------
    ValueError
        For ``k = 0``; use ``np_core.assemble_S``.
    """
    if k == 0:
        raise ValueError("k = 0: use np_core.assemble_S for the Laplace single layer")
    _, r, r_safe = pair_geometry(mesh)
    kr = k * r_safe
    full = -0.25j * hankel1(0, kr)
    c1 = jv(0, k * r) / (2 * np.pi)
    diag = np.log(mesh.speed) / (2 * np.pi) + tau_k(k)
    return DenseOperator(_assemble_split(mesh, c1, full, diag), f"S^k(k={k})")


def assemble_Kstar_k(mesh: BoundaryMesh, k: complex) -> DenseOperator:
    """Helmholtz adjoint double layer ``int dG(x,y,k)/dnu(x) phi(y) ds(y)``."""
    if k == 0:
        raise ValueError("k = 0: use np_core.assemble_Kstar")
    d, r, r_safe = pair_geometry(mesh)
    cos_term = (d[..., 0] * mesh.normals[:, None, 0] + d[..., 1] * mesh.normals[:, None, 1]) / r_safe
    kr = k * r_safe
    full = 0.25j * k * hankel1(1, kr) * cos_term
    c1 = -(k / (2 * np.pi)) * jv(1, kr) * cos_term
    np.fill_diagonal(c1, 0.0)
    diag = mesh.curvature / (4 * np.pi)
    return DenseOperator(_assemble_split(mesh, c1, full, diag), f"K^k*(k={k})")


def single_layer_eval(mesh: BoundaryMesh, density, points, k: complex | None = None,
                      upsample: int = 1) -> np.ndarray:
    """Evaluate ``S^k[phi]`` (or the Laplace ``S`` for ``k=None``) off the boundary.

    ``upsample`` interpolates the density spectrally onto a finer mesh of the
    same curves, which keeps the trapezoid rule accurate for points close to
    the boundary.
    """
    phi = _vals(density)
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if upsample > 1:
        fine = mesh.refined(upsample)
        phi = upsample_density(mesh, phi, upsample)
        mesh = fine
    out = np.empty(pts.shape[0], dtype=complex)
    chunk = max(1, 2_000_000 // mesh.n)
    for s in range(0, pts.shape[0], chunk):
        d = pts[s:s + chunk, None, :] - mesh.nodes[None, :, :]
        r = np.hypot(d[..., 0], d[..., 1])
        if k is None:
            ker = np.log(r) / (2 * np.pi)
        else:
            ker = -0.25j * hankel1(0, k * r)
        out[s:s + chunk] = ker @ (mesh.weights * phi)
    return out


def upsample_density(mesh: BoundaryMesh, phi: np.ndarray, factor: int) -> np.ndarray:
    """Trigonometric interpolation of per-component samples onto ``factor*m`` nodes."""
    m = mesh.n_per_curve
    parts = []
    for sl in mesh.slices():
        c = np.fft.fft(phi[sl], axis=0)
        M = m * factor
        cf = np.zeros((M,) + c.shape[1:], dtype=complex)
        half = m // 2
        cf[:half] = c[:half]
        cf[-half + 1:] = c[-half + 1:]
        cf[half] = 0.5 * c[half]
        cf[-half] = 0.5 * c[half]
        # node 0 sits at theta = -pi for both grids, so no phase shift is needed
        vals = np.fft.ifft(cf, axis=0) * factor
        parts.append(vals if np.iscomplexobj(phi) else vals.real)
    return np.concatenate(parts)


# ---------------------------------------------------------------------------
# Small-k series
# ---------------------------------------------------------------------------

def series_Sk(mesh: BoundaryMesh, k: complex, J: int, S: DenseOperator | None = None) -> DenseOperator:
    """Truncated series ``S + tau_k int + sum_{j<=J} k^{2j}(log k S1_j + S2_j)``.

    ``S1_j`` has kernel ``b_j r^{2j}``; ``S2_j`` has kernel
    ``r^{2j} (b_j log r + c_j)``.

    Raises
    ------
    ValueError
        If ``|k| diam >= 1`` (outside the convergence region used here).
    """
    from .np_core import assemble_S

    diam = mesh.diameter()
    if abs(k) * diam >= 1:
        raise ValueError(f"|k| diam = {abs(k) * diam:.3g} >= 1: series not applicable")
    S = assemble_S(mesh) if S is None else S
    out = np.asarray(S).astype(complex) + tau_k(k) * np.outer(np.ones(mesh.n), mesh.weights)
    logk = np.log(complex(k))
    for j in range(1, J + 1):
        out += k ** (2 * j) * (logk * series_S1(mesh, j) + series_S2(mesh, j))
    return DenseOperator(out, f"series S^k(J={J})")


def series_S1(mesh: BoundaryMesh, j: int) -> np.ndarray:
    _, b, _ = series_coefficients(1.0, j)
    _, r, _ = pair_geometry(mesh)
    return b * r ** (2 * j) * mesh.weights[None, :]


def series_S2(mesh: BoundaryMesh, j: int) -> np.ndarray:
    _, b, c = series_coefficients(1.0, j)
    _, r, r_safe = pair_geometry(mesh)
    r2j = r ** (2 * j)
    full = r2j * (b * np.log(r_safe) + c)
    return _assemble_split(mesh, b * r2j, full, np.zeros(mesh.n))


def upsilon_apply(decomp: SpectralDecomposition, phi, k: complex) -> np.ndarray:
    """``Upsilon_k[phi] = (phi, phi0)_H* (S[phi0] + 1 + tau_k)`` (constant function)."""
    v = _vals(phi)
    coef = decomp.inner(v, decomp.phi0)
    return np.full(v.shape, coef * (decomp.s_phi0 + 1 + tau_k(k)), dtype=complex)


def U_k_matrix(decomp: SpectralDecomposition, k: complex, guard: float = 1e-12) -> np.ndarray:
    """``U_k[g] = -(S~^{-1} g, phi0)_H* / (S[phi0] + tau_k) phi0`` as a matrix."""
    denom = decomp.s_phi0 + tau_k(k)
    if abs(denom) < guard:
        raise ZeroDivisionError("S[phi0] + tau_k vanishes: choose a different k")
    Sinv = np.linalg.inv(decomp.stilde)
    row = decomp.phi0 @ decomp.gram @ Sinv  # (S~^{-1} g, phi0) as a row functional
    return -np.outer(decomp.phi0, row) / denom


def inv_Sk_asymptotic(decomp: SpectralDecomposition, k: complex, mesh: BoundaryMesh | None = None) -> np.ndarray:
    """``P_H0 S~^{-1} + U_k - k^2 log k P_H0 S~^{-1} S1_1 P_H0 S~^{-1}``."""
    mesh = decomp.mesh if mesh is None else mesh
    n = decomp.n
    Sinv = np.linalg.inv(decomp.stilde)
    P = np.eye(n) - np.outer(decomp.phi0, decomp.phi0 @ decomp.gram)
    PS = P @ Sinv
    corr = k**2 * np.log(complex(k)) * PS @ series_S1(mesh, 1) @ PS
    return PS + U_k_matrix(decomp, k) - corr


# ---------------------------------------------------------------------------
# Transmission problem
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TransmissionSolution:
    psi: np.ndarray
    phi: np.ndarray
    residual: float
    condition: float


def solve_transmission(mesh: BoundaryMesh, wave: WaveParams, incident: IncidentWave,
                       ops: dict | None = None) -> TransmissionSolution:
    """Solve the 2n x 2n system for the exterior/interior densities ``(psi, phi)``.

    Raises
    ------
    ResonanceError
        If the block matrix is numerically singular.
    """
    km, kc = wave.k_m, wave.k_c
    if ops is None:
        ops = {}
    Sm = ops.get("Sm") if "Sm" in ops else np.asarray(assemble_Sk(mesh, km))
    Sc = ops.get("Sc") if "Sc" in ops else np.asarray(assemble_Sk(mesh, kc))
    Km = ops.get("Km") if "Km" in ops else np.asarray(assemble_Kstar_k(mesh, km))
    Kc = ops.get("Kc") if "Kc" in ops else np.asarray(assemble_Kstar_k(mesh, kc))
    n = mesh.n
    I = np.eye(n)
    A = np.block([[Sm, -Sc],
                  [(0.5 * I + Km) / wave.eps_m, (0.5 * I - Kc) / wave.eps_c]])
    ui = incident(mesh.nodes)
    dui = np.sum(incident.gradient(mesh.nodes) * mesh.normals, axis=1)
    rhs = np.concatenate([-ui, -dui / wave.eps_m])
    cond = np.linalg.cond(A)
    if not np.isfinite(cond) or cond > 1e13:
        raise ResonanceError(f"transmission system singular (condition {cond:.3g})")
    sol = np.linalg.solve(A, rhs)
    res = float(np.linalg.norm(A @ sol - rhs) / np.linalg.norm(rhs))
    return TransmissionSolution(sol[:n], sol[n:], res, float(cond))


def eval_field(mesh: BoundaryMesh, psi, phi, wave: WaveParams, points, region: str,
               incident: IncidentWave | None = None, upsample: int = 4) -> np.ndarray:
    """Total field: ``S^{k_c}[phi]`` inside, ``u^i + S^{k_m}[psi]`` outside."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    dmin = np.sqrt(((pts[:, None, :] - mesh.nodes[None, :, :]) ** 2).sum(-1)).min(1)
    if np.any(dmin < 2 * mesh.max_spacing() / upsample):
        warnings.warn("points within two node spacings of the boundary", NearBoundaryWarning,
                      stacklevel=2)
    if region == "interior":
        return single_layer_eval(mesh, phi, pts, wave.k_c, upsample)
    if region == "exterior":
        if incident is None:
            raise ValueError("incident wave required for exterior evaluation")
        return incident(pts) + single_layer_eval(mesh, psi, pts, wave.k_m, upsample)
    raise ValueError("region must be 'interior' or 'exterior'")

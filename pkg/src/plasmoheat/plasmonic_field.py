"""Inner-field asymptotics for small plasmonic particles.

For ``D = z + delta B`` and a plane wave ``u^i``, the field inside is
approximated by

    u(z + delta x) ~ u^i(z) + delta (x + S_B (lam I - K*_B)^{-1}[nu]) . grad u^i(z)

with ``x`` in reference coordinates. The first bracket term together with
``u^i(z)`` is the zeroth-order part; the layer-potential term is the
first-order part that carries the resonance.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np

from .geometry import BoundaryMesh
from .helmholtz_bie import IncidentWave, single_layer_eval
from .np_core import SpectralDecomposition, resolvent_apply, spectral_distance

logger = logging.getLogger(__name__)

RESONANCE_SHIFT = 1e-3j
COUPLING_FLOOR = 1e-6


class UncoupledModeWarning(RuntimeWarning):
    """The requested mode has negligible coupling to the normal field."""


@dataclass(frozen=True)
class CouplingSpectrum:
    """Per-mode eigenvalue and couplings ``|(nu_x, phi_j)_H*|``, ``|(nu_y, phi_j)_H*|``."""

    eigenvalues: np.ndarray
    coupling_x: np.ndarray
    coupling_y: np.ndarray

    @property
    def total(self) -> np.ndarray:
        return np.hypot(self.coupling_x, self.coupling_y)

    def strongest(self, direction=None) -> int:
        if direction is None:
            c = self.total
        else:
            d = np.asarray(direction, dtype=float)
            c = np.abs(d[0] * self.coupling_x) + np.abs(d[1] * self.coupling_y)
        return int(np.argmax(c))


@dataclass(frozen=True)
class FieldSolution:
    """Inner field split into orders on sample points (physical coordinates).

    ``first_parts`` holds ``delta S_B[rho_x]`` and ``delta S_B[rho_y]`` with
    ``rho = (lam - K*)^{-1}[nu]``, one column per component.
    """

    points: np.ndarray
    total: np.ndarray
    zeroth: np.ndarray
    first: np.ndarray
    first_parts: np.ndarray
    lam: complex


def coupling_spectrum(decomp: SpectralDecomposition, mesh: BoundaryMesh) -> CouplingSpectrum:
    cx = np.abs(decomp.coefficients(mesh.normals[:, 0]))
    cy = np.abs(decomp.coefficients(mesh.normals[:, 1]))
    return CouplingSpectrum(decomp.eigenvalues.copy(), cx, cy)


def resonant_lambda(decomp: SpectralDecomposition, j: int, shift: complex = RESONANCE_SHIFT) -> complex:
    """``lam_j + 0.001 i`` (shift overridable)."""
    if not (1 <= j < decomp.n):
        raise IndexError(f"mode index {j} outside 1..{decomp.n - 1}")
    return complex(decomp.eigenvalues[j]) + shift


def normal_resolvents(decomp: SpectralDecomposition, mesh: BoundaryMesh, lam: complex) -> np.ndarray:
    """``(lam - K*)^{-1}[nu_x]`` and ``[nu_y]`` as columns of an (n, 2) array."""
    return np.stack([resolvent_apply(decomp, lam, mesh.normals[:, 0]),
                     resolvent_apply(decomp, lam, mesh.normals[:, 1])], axis=1)


def inner_field_asymptotic(decomp: SpectralDecomposition, mesh_B: BoundaryMesh, points_B,
                           z, delta: float, lam: complex, incident: IncidentWave,
                           upsample: int = 8) -> FieldSolution:
    """Evaluate both orders of the small-volume expansion.

    Parameters
    ----------
    decomp, mesh_B
        Spectral data of the reference shape ``B``.
    points_B : array (m, 2)
        Sample points in reference coordinates (strictly inside ``B``).
    z, delta
        Particle centre and size, ``D = z + delta B``.
    lam : complex
        Resolvent parameter; must not lie on the spectrum.
    """
    z = np.asarray(z, dtype=float)
    pts = np.atleast_2d(np.asarray(points_B, dtype=float))
    dist = spectral_distance(decomp, lam)
    if dist < 1e-12:
        warnings.warn(f"lambda within {dist:.3g} of the spectrum", RuntimeWarning, stacklevel=2)
    grad = incident.gradient(z[None, :])[0]
    uz = incident(z[None, :])[0]
    zeroth = uz + delta * (pts @ grad)
    rho = normal_resolvents(decomp, mesh_B, lam)
    parts = np.stack([single_layer_eval(mesh_B, rho[:, c], pts, None, upsample)
                      for c in range(2)], axis=1) * delta
    first = parts @ grad
    return FieldSolution(z + delta * pts, zeroth + first, zeroth, first, parts, complex(lam))


@dataclass(frozen=True)
class ModalIntensity:
    full: np.ndarray
    single: np.ndarray
    mode: int
    relative_gap: float


def u_squared_modal(decomp: SpectralDecomposition, mesh: BoundaryMesh, lam: complex,
                    k_m: float, d, points=None, upsample: int = 8,
                    coupling_floor: float = COUPLING_FLOOR) -> ModalIntensity:
    """``|u|^2 ~ 1 + 2 k Re(i S(lam - K*)^{-1}[nu].d) + |k S(lam - K*)^{-1}[nu].d|^2``.

    Returns the full-resolvent value and the single-mode reduction built on
    the coupled mode whose eigenvalue is closest to ``Re lam`` (summed over
    that eigenvalue's eigenspace). ``points=None`` evaluates on the boundary
    nodes using the assembled single layer.
    """
    d = np.asarray(d, dtype=float)
    load = mesh.normals @ d
    coeffs = decomp.coefficients(load)
    mag = np.abs(coeffs)
    coupled = np.flatnonzero(mag > coupling_floor * mag.max())
    j_star = int(coupled[np.argmin(np.abs(decomp.eigenvalues[coupled] - lam.real))])
    same = coupled[np.abs(decomp.eigenvalues[coupled] - decomp.eigenvalues[j_star]) < 1e-8]
    full_density = decomp.synthesize(coeffs / (lam - decomp.eigenvalues))
    single_density = decomp.eigenvectors[:, same] @ (coeffs[same] / (lam - decomp.eigenvalues[same]))

    def intensity(density):
        if points is None:
            from .np_core import assemble_S
            s = assemble_S(mesh) @ density
        else:
            s = single_layer_eval(mesh, density, points, None, upsample)
        return 1 + 2 * k_m * np.real(1j * s) + np.abs(k_m * s) ** 2

    full = intensity(full_density)
    single = intensity(single_density)
    gap = float(np.linalg.norm(full - single) / np.linalg.norm(full - 1 + 1e-300))
    return ModalIntensity(full, single, j_star, gap)


def drude_epsilon(omega, eps_inf: float, omega_p: float, gamma_d: float):
    """``eps_inf - omega_p^2 / (omega^2 + i gamma_d omega)``."""
    omega = np.asarray(omega, dtype=float)
    if np.any(omega <= 0):
        raise ValueError("omega must be positive")
    return eps_inf - omega_p**2 / (omega**2 + 1j * gamma_d * omega)


def lambda_eps(eps_c, eps_m):
    return (eps_c + eps_m) / (2 * (eps_c - eps_m))

"""Laplace layer potentials, the equilibrium density and the H* spectral theory.

All operators act on density samples at the nodes of a ``BoundaryMesh``; an
operator matrix ``A`` maps densities to node values, so ``A @ phi`` is the
discrete ``A[phi]``. Weights are folded into the columns.

The Neumann-Poincaré operator ``K*`` is self-adjoint for the energy pairing
``(u, v)_H* = -(u, S~[v])``, so its spectrum is computed from the
generalized symmetric problem ``G K* v = lam G v`` with the Gram matrix
``G = -W S~``.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .geometry import BoundaryMesh

logger = logging.getLogger(__name__)

HALF_TOL = 1e-6


class ConditioningError(np.linalg.LinAlgError):
    """The discrete H* Gram matrix is not positive definite."""


class GeometryDegeneracyError(np.linalg.LinAlgError):
    """The bordered equilibrium system is singular."""


class NearSingularWarning(RuntimeWarning):
    """A resolvent parameter lies within the guard distance of an eigenvalue."""


@dataclass(frozen=True)
class DensityField:
    """Density samples on mesh nodes.

    ``mean`` is the discrete integral ``sum_i w_i v_i``.
    """

    values: np.ndarray
    mesh: BoundaryMesh
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.values.shape != (self.mesh.n,):
            raise ValueError(f"density has shape {self.values.shape}, mesh has {self.mesh.n} nodes")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("density contains non-finite entries")

    @property
    def mean(self) -> complex:
        return np.sum(self.mesh.weights * self.values)

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.values, dtype=dtype)


@dataclass(frozen=True)
class DenseOperator:
    """Square operator matrix over mesh nodes with a provenance label."""

    matrix: np.ndarray
    label: str
    hstar_symmetric: bool = False

    def __matmul__(self, other):
        return self.matrix @ np.asarray(other)

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.matrix, dtype=dtype)

    @property
    def shape(self):
        return self.matrix.shape


def _vals(x) -> np.ndarray:
    return np.asarray(x.values if isinstance(x, DensityField) else x)


# ---------------------------------------------------------------------------
# Quadrature helpers
# ---------------------------------------------------------------------------

def kress_weights(n: int) -> np.ndarray:
    """Circulant weights for ``int log(4 sin^2((t-s)/2)) f(s) ds`` on n nodes.

    Returns the (n, n) matrix ``R`` with ``R[i, j] = R_{(i-j) mod n}``.
    """
    k = np.arange(n)
    m = np.arange(1, n // 2)
    delta = 2 * np.pi * k / n
    r = -(4 * np.pi / n) * (np.cos(np.outer(delta, m)) / m).sum(axis=1) \
        - (4 * np.pi / n**2) * np.cos(n * delta / 2)
    idx = (k[:, None] - k[None, :]) % n
    return r[idx]


def log_sin_term(n: int) -> np.ndarray:
    """``log(4 sin^2((t_i - t_j)/2))`` with zeros on the diagonal."""
    k = np.arange(n)
    d = 2 * np.pi * ((k[:, None] - k[None, :]) % n) / n
    with np.errstate(divide="ignore"):
        out = np.log(4 * np.sin(d / 2) ** 2)
    np.fill_diagonal(out, 0.0)
    return out


def pair_geometry(mesh: BoundaryMesh):
    """Differences ``x_i - y_j``, distances and a safe distance with unit diagonal."""
    d = mesh.nodes[:, None, :] - mesh.nodes[None, :, :]
    r = np.hypot(d[..., 0], d[..., 1])
    r_safe = r.copy()
    np.fill_diagonal(r_safe, 1.0)
    return d, r, r_safe


# ---------------------------------------------------------------------------
# Operators
# ---------------------------------------------------------------------------

def length_scale(mesh: BoundaryMesh) -> float:
    return float(max(np.ptp(mesh.nodes[:, 0]), np.ptp(mesh.nodes[:, 1])))


def _assemble_S_unit(mesh: BoundaryMesh, L: float) -> np.ndarray:
    """Single layer on the curve scaled by ``1/L`` (weights stay physical)."""
    x = mesh.nodes / L
    speed = mesh.speed / L
    d = x[:, None, :] - x[None, :, :]
    r = np.hypot(d[..., 0], d[..., 1])
    np.fill_diagonal(r, 1.0)
    logr = np.log(r)
    n, m, h = mesh.n, mesh.n_per_curve, mesh.h
    R = kress_weights(m)
    ls = log_sin_term(m)
    out = np.empty((n, n))
    for a, sa in enumerate(mesh.slices()):
        for b, sb in enumerate(mesh.slices()):
            if a == b:
                rest = logr[sa, sa] - 0.5 * ls
                np.fill_diagonal(rest, np.log(speed[sa]))
                out[sa, sa] = (0.5 * R + h * rest) * speed[sa][None, :] / (2 * np.pi)
            else:
                out[sa, sb] = logr[sa, sb] * (mesh.weights[sb] / L)[None, :] / (2 * np.pi)
    return out


def assemble_S(mesh: BoundaryMesh) -> DenseOperator:
    """Laplace single layer ``S[phi](x) = int (1/2pi) log|x-y| phi(y) ds(y)``.

    Assembled on the curve rescaled to unit size; the ``log L`` rank-one term
    of the physical operator is added explicitly.
    """
    L = length_scale(mesh)
    SB = _assemble_S_unit(mesh, L)
    S = L * SB + (np.log(L) / (2 * np.pi)) * np.outer(np.ones(mesh.n), mesh.weights)
    return DenseOperator(S, "S")


def assemble_Kstar(mesh: BoundaryMesh) -> DenseOperator:
    """Neumann-Poincaré operator with kernel ``(x-y).nu(x) / (2 pi |x-y|^2)``.

    The diagonal carries the smooth limit ``kappa / (4 pi)``.
    """
    d, r, r_safe = pair_geometry(mesh)
    num = d[..., 0] * mesh.normals[:, None, 0] + d[..., 1] * mesh.normals[:, None, 1]
    ker = num / (2 * np.pi * r_safe**2)
    np.fill_diagonal(ker, mesh.curvature / (4 * np.pi))
    return DenseOperator(ker * mesh.weights[None, :], "K*")


def assemble_K(mesh: BoundaryMesh) -> DenseOperator:
    """Double layer ``K[phi](x) = int (y-x).nu(y) / (2 pi |x-y|^2) phi(y) ds(y)``."""
    d, r, r_safe = pair_geometry(mesh)
    num = -(d[..., 0] * mesh.normals[None, :, 0] + d[..., 1] * mesh.normals[None, :, 1])
    ker = num / (2 * np.pi * r_safe**2)
    np.fill_diagonal(ker, mesh.curvature / (4 * np.pi))
    return DenseOperator(ker * mesh.weights[None, :], "K")


def compute_phi0(mesh: BoundaryMesh, S: DenseOperator | None = None) -> DensityField:
    """Equilibrium density from the bordered system ``S phi + a = 0``, ``int phi = 1``.

    The constant ``a`` is returned as ``meta["a"]``; ``S[phi0] = -a``.
    """
    S = assemble_S(mesh) if S is None else S
    n = mesh.n
    A = np.zeros((n + 1, n + 1))
    A[:n, :n] = np.asarray(S)
    A[:n, n] = 1.0
    A[n, :n] = mesh.weights
    rhs = np.zeros(n + 1)
    rhs[n] = 1.0
    cond = np.linalg.cond(A)
    if not np.isfinite(cond) or cond > 1e14:
        raise GeometryDegeneracyError(f"bordered equilibrium system is singular (cond={cond:.3g})")
    sol = np.linalg.solve(A, rhs)
    return DensityField(sol[:n], mesh, {"a": float(sol[n]), "S_phi0": float(-sol[n])})


def build_Stilde(S: DenseOperator, phi0: DensityField) -> DenseOperator:
    """``S~[phi] = S[phi] - (int phi)(S[phi0] + 1)``; maps ``phi0`` to ``-1``."""
    Sm = np.asarray(S)
    w = phi0.mesh.weights
    c = Sm @ phi0.values + 1.0
    return DenseOperator(Sm - np.outer(c, w), "S~")


def gram_matrix(Stilde: DenseOperator, weights: np.ndarray) -> np.ndarray:
    """Symmetrized discrete H* Gram matrix ``-W S~``."""
    G = -weights[:, None] * np.asarray(Stilde)
    return 0.5 * (G + G.T)


def hstar_inner(u, v, Stilde: DenseOperator, weights: np.ndarray | None = None) -> complex:
    """``(u, v)_H* = -sum_i w_i u_i conj(S~[v])_i``; conjugate-linear in ``v``."""
    if isinstance(u, DensityField) and isinstance(v, DensityField) and u.mesh is not v.mesh:
        if u.mesh.n != v.mesh.n or not np.allclose(u.mesh.nodes, v.mesh.nodes):
            raise ValueError("densities live on different meshes")
    if weights is None:
        for x in (u, v):
            if isinstance(x, DensityField):
                weights = x.mesh.weights
                break
        else:
            raise ValueError("weights required for raw arrays")
    uu, vv = _vals(u), _vals(v)
    if uu.shape != vv.shape or uu.shape != weights.shape:
        raise ValueError("mesh mismatch between densities")
    return -np.sum(weights * uu * np.conj(np.asarray(Stilde) @ vv))


# ---------------------------------------------------------------------------
# Spectral decomposition
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SpectralDecomposition:
    """H*-orthonormal eigenpairs of ``K*`` with the 1/2 eigenspace first.

    Attributes
    ----------
    eigenvalues : np.ndarray, shape (n,)
    eigenvectors : np.ndarray, shape (n, n)
        Columns are densities ``phi_j`` with ``(phi_i, phi_j)_H* = delta_ij``.
    gram : np.ndarray
        Symmetrized Gram matrix ``-W S~``.
    phi0 : np.ndarray
        Equilibrium density (``int phi0 = 1``).
    half_indices : np.ndarray of int
        Indices of eigenvalues within ``HALF_TOL`` of 1/2.
    gram_residual : float
        ``max |V^T G V - I|`` certificate.
    """

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    gram: np.ndarray
    phi0: np.ndarray
    half_indices: np.ndarray
    gram_residual: float
    mesh: BoundaryMesh | None = None
    kstar: np.ndarray | None = None
    stilde: np.ndarray | None = None
    s_phi0: float = 0.0

    @property
    def n(self) -> int:
        return self.eigenvalues.size

    def coefficients(self, rhs) -> np.ndarray:
        """``(rhs, phi_j)_H*`` for every j."""
        return self.eigenvectors.T @ (self.gram @ _vals(rhs))

    def inner(self, u, v) -> complex:
        return np.asarray(_vals(u)) @ self.gram @ np.conj(_vals(v))

    def synthesize(self, coeffs) -> np.ndarray:
        return self.eigenvectors @ np.asarray(coeffs)


def eigendecompose(Kstar: DenseOperator, Stilde: DenseOperator, weights: np.ndarray,
                   phi0: DensityField | None = None, mesh: BoundaryMesh | None = None,
                   ) -> SpectralDecomposition:
    """Solve ``G K* v = lam G v`` via Cholesky of the Gram matrix ``G = -W S~``.

    Raises
    ------
    ConditioningError
        If the Gram matrix is not positive definite; refining the mesh or
        increasing the gap between curves usually helps.
    """
    G = gram_matrix(Stilde, weights)
    A = G @ np.asarray(Kstar)
    A = 0.5 * (A + A.T)
    try:
        lam, V = sla.eigh(A, G, driver="gv")
    except np.linalg.LinAlgError as exc:
        raise ConditioningError(
            "H* Gram matrix is not positive definite; refine the mesh "
            "(more nodes per curve) or increase the gap between curves") from exc
    is_half = np.abs(lam - 0.5) < HALF_TOL
    order = np.lexsort((-lam, -np.round(np.abs(lam), 12), ~is_half))
    lam, V = lam[order], V[:, order]
    # deterministic signs: positive mean, else positive largest entry
    for j in range(V.shape[1]):
        col = V[:, j]
        m = weights @ col
        piv = col[np.argmax(np.abs(col))]
        if (abs(m) > 1e-10 and m < 0) or (abs(m) <= 1e-10 and piv < 0):
            V[:, j] = -col
    res = float(np.abs(V.T @ G @ V - np.eye(V.shape[1])).max())
    half = np.flatnonzero(np.abs(lam - 0.5) < HALF_TOL)
    p0 = phi0.values if phi0 is not None else V[:, 0] / (weights @ V[:, 0])
    s_phi0 = float(phi0.meta.get("S_phi0", 0.0)) if phi0 is not None else 0.0
    return SpectralDecomposition(lam, V, G, p0, half, res, mesh,
                                 np.asarray(Kstar), np.asarray(Stilde), s_phi0)


def resolvent_apply(decomp: SpectralDecomposition, lam: complex, rhs,
                    guard: float = 1e-12, coupling_tol: float = 1e-12) -> np.ndarray:
    """``sum_j (rhs, phi_j)_H* / (lam - lam_j) phi_j`` over all eigenpairs.

    Emits ``NearSingularWarning`` when ``lam`` is within ``guard`` of an
    eigenvalue whose coefficient is not negligible.
    """
    c = decomp.coefficients(rhs)
    gap = lam - decomp.eigenvalues
    loaded = np.abs(c) > coupling_tol * max(np.abs(c).max(), 1e-300)
    dist = float(np.abs(gap[loaded]).min()) if loaded.any() else np.inf
    if dist < guard:
        warnings.warn(f"resolvent parameter within {dist:.3g} of the spectrum",
                      NearSingularWarning, stacklevel=2)
    return decomp.synthesize(c / gap)


def spectral_distance(decomp: SpectralDecomposition, lam: complex) -> float:
    return float(np.abs(lam - decomp.eigenvalues).min())


def project_H0(decomp: SpectralDecomposition, phi) -> np.ndarray:
    """Remove the ``phi0`` component: ``phi - (phi, phi0)_H* phi0``."""
    v = _vals(phi)
    return v - decomp.inner(v, decomp.phi0) * decomp.phi0


def project_off_half(decomp: SpectralDecomposition, phi) -> np.ndarray:
    """Projection onto the H*-complement of the eigenvalue-1/2 eigenspace."""
    v = _vals(phi)
    idx = decomp.half_indices
    if idx.size == 0:
        return v.copy()
    Vh = decomp.eigenvectors[:, idx]
    return v - Vh @ (Vh.T @ (decomp.gram @ v))


def dnu_from_interior(decomp: SpectralDecomposition, Stilde: DenseOperator, g_on_boundary,
                      source_term=None) -> np.ndarray:
    """Normal derivative of the harmonic extension of ``g``: ``-(1/2 - K*) S~^{-1}[g]``.

    ``source_term`` is an optional correction density added to the result for
    non-harmonic data.
    """
    g = _vals(g_on_boundary)
    psi = np.linalg.solve(np.asarray(Stilde), g)
    out = -(0.5 * psi - decomp.kstar @ psi)
    if source_term is not None:
        out = out + _vals(source_term)
    return out


@dataclass(frozen=True)
class LaplaceLayers:
    """All Laplace-layer objects of a mesh, assembled once."""

    mesh: BoundaryMesh
    S: DenseOperator
    Kstar: DenseOperator
    K: DenseOperator
    phi0: DensityField
    Stilde: DenseOperator
    decomp: SpectralDecomposition

    @classmethod
    def build(cls, mesh: BoundaryMesh) -> "LaplaceLayers":
        S = assemble_S(mesh)
        Ks = assemble_Kstar(mesh)
        K = assemble_K(mesh)
        phi0 = compute_phi0(mesh, S)
        St = build_Stilde(S, phi0)
        decomp = eigendecompose(Ks, St, mesh.weights, phi0, mesh)
        return cls(mesh, S, Ks, K, phi0, St, decomp)


def calderon_residual(S_tilde: DenseOperator, Kstar: DenseOperator, K: DenseOperator) -> float:
    """``||S~ K* - K S~|| / (||S~|| ||K*||)`` in the spectral norm."""
    St, Ks, Km = (np.asarray(x) for x in (S_tilde, Kstar, K))
    num = np.linalg.norm(St @ Ks - Km @ St, 2)
    return float(num / (np.linalg.norm(St, 2) * np.linalg.norm(Ks, 2)))


def export_operator_csv(op: DenseOperator, path) -> None:
    """Row-major CSV dump with a ``# operator <name> n=<n>`` header line."""
    M = np.asarray(op)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# operator {op.label} n={M.shape[0]}\n")
        np.savetxt(fh, M, delimiter=",", fmt="%.17g")


def decomposition_json(decomp: SpectralDecomposition, coupling: dict | None = None) -> str:
    """``{"lambda": [...], "coupling": {...}}`` as a JSON string."""
    data = {"lambda": [float(x) for x in decomp.eigenvalues],
            "coupling": {k: [float(x) for x in np.asarray(v)] for k, v in (coupling or {}).items()}}
    return json.dumps(data, sort_keys=True)

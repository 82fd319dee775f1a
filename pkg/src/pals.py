"""Parametric Level-Set Absorption Model

The absorption image is the c-level set of a sum of compactly supported radial
basis functions,

    φ(x, p) = Σ_j α_j ψ(‖β_j (x − χ_j)‖†),   ‖v‖† = sqrt(‖v‖² + γ²),
    μ(x, p) = μ_in H_ε(φ − c) + μ_out (1 − H_ε(φ − c)),

with ψ(r) = (max(0, 1 − r))² (2r + 1). Parameter vectors are laid out as
[α₁..α_m, β₁..β_m, χ_{1,1}, χ_{1,2}, χ_{2,1}, χ_{2,2}, ...], ℓ = 4m.
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple

import numpy as np
import scipy.sparse as sparse

from .grid_forward import DomainSpec

# Set up logging
logger = logging.getLogger(__name__)

DELTA_THRESHOLD = 1e-14


@dataclass(frozen=True)
class PalsConfig:
    """Level-set configuration; μ values in cm⁻¹."""

    m0: int = 15
    epsilon: float = 0.1
    gamma: float = 1e-3
    level: float = 0.1
    mu_in: float = 0.2
    mu_out: float = 0.05
    sigma: float = 0.05

    def __post_init__(self):
        if self.m0 < 1:
            raise ValueError("m0 must be at least 1")
        if not (self.epsilon > 0 and self.gamma > 0):
            raise ValueError("epsilon and gamma must be positive")
        if not (self.mu_in > 0 and self.mu_out > 0):
            raise ValueError("mu_in and mu_out must be positive")
        if self.mu_in == self.mu_out:
            raise ValueError("mu_in and mu_out must differ")

    @property
    def n_params(self) -> int:
        return 4 * self.m0


@dataclass(frozen=True)
class PalsParams:
    """Named view of a flat parameter vector."""

    alpha: np.ndarray
    beta: np.ndarray
    centers: np.ndarray

    @classmethod
    def from_vector(cls, p: np.ndarray, m0: int) -> 'PalsParams':
        p = np.asarray(p, dtype=float)
        if p.shape != (4 * m0,):
            raise ValueError(f"parameter vector must have length {4 * m0}, got {p.shape}")
        if not np.all(np.isfinite(p)):
            raise ValueError("parameter vector must be finite")
        return cls(alpha=p[:m0], beta=p[m0:2 * m0], centers=p[2 * m0:].reshape(m0, 2))

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.alpha, self.beta, self.centers.ravel()])


def params_to_list(p: np.ndarray) -> List[float]:
    """Serialize a parameter vector for reports (documented flat order)."""
    return [float(v) for v in np.asarray(p, dtype=float)]


def params_from_list(values: Sequence[float], m0: int) -> np.ndarray:
    """Parse a serialized parameter vector, validating its length."""
    return PalsParams.from_vector(np.asarray(values, dtype=float), m0).to_vector()


def csrbf(r):
    """ψ(r) = (max(0, 1 − r))² (2r + 1); C¹ and zero for r ≥ 1."""
    r = np.asarray(r, dtype=float)
    s = np.maximum(0.0, 1.0 - r)
    return s * s * (2.0 * r + 1.0)


def csrbf_derivative(r):
    """ψ′(r) = −6 r (1 − r) on [0, 1), zero beyond."""
    r = np.asarray(r, dtype=float)
    return np.where(r < 1.0, -6.0 * r * (1.0 - r), 0.0)


def heaviside(r, epsilon: float):
    """C¹ approximate Heaviside with transition half-width ε.

    0 for r ≤ −ε, 1 for r ≥ ε, ½(1 + r/ε + sin(πr/ε)/π) in between.
    """
    r = np.asarray(r, dtype=float)
    inside = 0.5 * (1.0 + r / epsilon + np.sin(np.pi * r / epsilon) / np.pi)
    return np.where(r <= -epsilon, 0.0, np.where(r >= epsilon, 1.0, inside))


def heaviside_derivative(r, epsilon: float):
    """H′_ε(r) = (1 + cos(πr/ε)) / (2ε) inside the transition, zero outside."""
    r = np.asarray(r, dtype=float)
    inside = (1.0 + np.cos(np.pi * r / epsilon)) / (2.0 * epsilon)
    return np.where(np.abs(r) < epsilon, inside, 0.0)


def _radii(points: np.ndarray, params: PalsParams, gamma: float) -> Tuple[np.ndarray, np.ndarray]:
    """Smoothed scaled distances ρ (points × m) and squared offsets ‖x − χ‖²."""
    offsets = points[:, None, :] - params.centers[None, :, :]
    dist2 = np.sum(offsets * offsets, axis=2)
    rho = np.sqrt(params.beta[None, :] ** 2 * dist2 + gamma * gamma)
    return rho, dist2


def level_set(x, p: np.ndarray, cfg: PalsConfig) -> np.ndarray:
    """φ(x, p) at one 2D point or an array of points (shape (..., 2))."""
    params = PalsParams.from_vector(p, cfg.m0)
    points = np.atleast_2d(np.asarray(x, dtype=float))
    rho, _ = _radii(points, params, cfg.gamma)
    phi = csrbf(rho) @ params.alpha
    return phi[0] if np.ndim(x) == 1 else phi


def _node_points(domain: DomainSpec) -> np.ndarray:
    x, z = domain.node_coordinates()
    return np.column_stack([x, z])


def absorption_image(p: np.ndarray, cfg: PalsConfig, domain: DomainSpec) -> np.ndarray:
    """μ(x, p) in cm⁻¹ at every node, shape (nz, nx)."""
    phi = level_set(_node_points(domain), p, cfg)
    h_eps = heaviside(phi - cfg.level, cfg.epsilon)
    mu = cfg.mu_in * h_eps + cfg.mu_out * (1.0 - h_eps)
    return mu.reshape(domain.nz, domain.nx)


def absorption_diagonal(p: np.ndarray, cfg: PalsConfig, domain: DomainSpec) -> np.ndarray:
    """Diagonal of A₁(p): h² μ(x, p) at PDE nodes, 0 on boundary-constraint rows."""
    mu = absorption_image(p, cfg, domain).ravel()
    return np.where(domain.interior_mask(), domain.h ** 2 * mu, 0.0)


def absorption_jacobian(p: np.ndarray, cfg: PalsConfig, domain: DomainSpec) -> sparse.csc_matrix:
    """All derivative diagonals ∂A₁/∂p_k as columns of a sparse n×ℓ matrix.

    Column k holds h² (μ_in − μ_out) H′_ε(φ − c) ∂φ/∂p_k at PDE nodes; a column
    is nonzero only where basis function j(k) is supported and φ lies in the
    Heaviside transition band.
    """
    m = cfg.m0
    params = PalsParams.from_vector(p, m)
    points = _node_points(domain)
    rho, _ = _radii(points, params, cfg.gamma)
    phi = csrbf(rho) @ params.alpha

    scale = domain.h ** 2 * (cfg.mu_in - cfg.mu_out) * heaviside_derivative(phi - cfg.level, cfg.epsilon)
    scale = np.where(domain.interior_mask(), scale, 0.0)
    active = np.flatnonzero(scale)

    points = points[active]
    rho, dist2 = _radii(points, params, cfg.gamma)
    psi = csrbf(rho)
    dpsi = csrbf_derivative(rho)

    # ∂ρ/∂β = β‖x − χ‖²/ρ,  ∂ρ/∂χ_c = −β²(x_c − χ_c)/ρ
    d_alpha = psi
    d_beta = params.alpha[None, :] * dpsi * params.beta[None, :] * dist2 / rho
    common = -params.alpha[None, :] * dpsi * params.beta[None, :] ** 2 / rho
    offsets = points[:, None, :] - params.centers[None, :, :]
    d_chi = common[:, :, None] * offsets

    blocks = [d_alpha, d_beta, d_chi.reshape(active.size, 2 * m)]
    columns = np.concatenate(blocks, axis=1) * scale[active, None]
    rows, cols = np.nonzero(columns)
    return sparse.csc_matrix((columns[rows, cols], (active[rows], cols)),
                             shape=(domain.n, cfg.n_params))


def absorption_derivative(p: np.ndarray, cfg: PalsConfig, domain: DomainSpec, k: int) -> np.ndarray:
    """Diagonal of ∂A₁/∂p_k as a dense n-vector."""
    if not 0 <= k < cfg.n_params:
        raise ValueError(f"parameter index {k} out of range [0, {cfg.n_params})")
    return absorption_jacobian(p, cfg, domain)[:, k].toarray().ravel()


@dataclass(frozen=True)
class SupportDelta:
    """Sparse change of the absorption diagonal between two parameter vectors."""

    indices: np.ndarray
    values: np.ndarray

    @property
    def q(self) -> int:
        return int(self.indices.size)

    def scatter(self, n: int) -> np.ndarray:
        full = np.zeros(n)
        full[self.indices] = self.values
        return full


def support_delta(p_old: np.ndarray, p_new: np.ndarray, cfg: PalsConfig,
                  domain: DomainSpec) -> SupportDelta:
    """Nodes where A₁ changes by more than 1e−14, with new-minus-old values."""
    a_old = absorption_diagonal(p_old, cfg, domain)
    a_new = absorption_diagonal(p_new, cfg, domain)
    diff = a_new - a_old
    indices = np.flatnonzero(np.abs(diff) > DELTA_THRESHOLD)
    return SupportDelta(indices=indices, values=diff[indices])


def initial_parameters(cfg: PalsConfig, domain: DomainSpec, grid_shape: Tuple[int, int],
                       alpha: float = 0.25) -> np.ndarray:
    """Uniform-grid initial guess with alternating-sign expansion coefficients.

    Args:
        cfg: Level-set configuration (m0 must equal gx·gz)
        domain: Grid description
        grid_shape: (gx, gz) centers across x and z
        alpha: Magnitude of the expansion coefficients

    Returns:
        Parameter vector
    """
    gx, gz = grid_shape
    if gx * gz != cfg.m0:
        raise ValueError(f"initial grid {gx}x{gz} does not hold m0 = {cfg.m0} basis functions")
    xs = np.linspace(-domain.half_width, domain.half_width, gx + 2)[1:-1]
    zs = np.linspace(-domain.half_height, domain.half_height, gz + 2)[1:-1]
    spacing = min(2 * domain.half_width / (gx + 1), 2 * domain.half_height / (gz + 1))

    centers = np.array([(x, z) for z in zs for x in xs])
    signs = np.array([1.0 if j % 2 == 0 else -1.0 for j in range(cfg.m0)])
    params = PalsParams(alpha=alpha * signs,
                        beta=np.full(cfg.m0, 1.0 / (2.0 * spacing)),
                        centers=centers)
    return params.to_vector()

"""Interpolatory Parametric Model Reduction

Offline: solve the forward and adjoint systems at K parameter samples and the
experiment frequencies, concatenate the local bases and compress them with an
SVD into a global basis (V, W). Online: evaluate the Petrov-Galerkin reduced
model

    Ψ̂(ω; p) = Ĉ ((iω/ν) Ê + Â₀ + Â₁(p))⁻¹ B̂,   Â₁(p) = Wᵀ diag(A₁(p)) V

whose absorption term is updated in O(r² q) from the q nodes where A₁ changed.
By construction Ψ̂ and ∇_pΨ̂ interpolate Ψ and ∇_pΨ at every sampled
(ω_j, π_i) when no singular value is truncated.
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.linalg

from .counters import CostCounters
from .errors import BasisFormatError, SolverError
from .grid_forward import DiscreteOperators, ForwardSolver, _derivative_columns
from .pals import PalsConfig, SupportDelta, absorption_diagonal, DELTA_THRESHOLD
from .utils import ProgressTracker, payload_array, read_container, write_container

# Set up logging
logger = logging.getLogger(__name__)

BASIS_MAGIC = b'DOTROMB1'
BASIS_VERSION = 1
ORTHONORMALITY_TOLERANCE = 1e-10


@dataclass
class LocalBasis:
    """Forward and adjoint solutions at one parameter sample, all frequencies."""

    sample: np.ndarray
    V: np.ndarray
    W: np.ndarray


@dataclass
class GlobalBasis:
    """Orthonormal projection bases; W is V in one-sided mode."""

    V: np.ndarray
    W: np.ndarray
    tolerance: float
    singular_values: np.ndarray
    two_sided: bool = False
    frequencies: Tuple[float, ...] = ()
    grid_hash: str = ''
    n_src: int = 0
    n_det: int = 0
    n_samples: int = 0

    @property
    def n(self) -> int:
        return self.V.shape[0]

    @property
    def r(self) -> int:
        return self.V.shape[1]


def build_local_basis(forward: ForwardSolver, cfg: PalsConfig, sample: np.ndarray,
                      frequencies: Sequence[float], sample_index: int = 0) -> LocalBasis:
    """Solve n_ω·(n_src + n_det) large systems at one parameter sample.

    Args:
        forward: Full-order solver (counts the solves)
        cfg: Level-set configuration
        sample: Parameter sample π_i
        frequencies: Interpolation frequencies ω_j
        sample_index: Index i, used in error context

    Returns:
        Local basis with V_i = [V_{i,1} … V_{i,n_ω}] and W_i likewise
    """
    ops = forward.ops
    a1 = absorption_diagonal(sample, cfg, ops.domain)
    v_blocks, w_blocks = [], []
    for omega in frequencies:
        try:
            v_blocks.append(forward.states(a1, omega))
            w_blocks.append(forward.adjoint_solutions(a1, omega))
        except SolverError as e:
            logger.error(f"Local basis failed for sample {sample_index} at omega={omega:g}")
            raise SolverError("local basis solve failed", iterations=e.iterations, residual=e.residual,
                              context=f"sample {sample_index}, {e.context or f'omega={omega:g}'}") from e
    return LocalBasis(sample=np.array(sample, dtype=float),
                      V=np.hstack(v_blocks), W=np.hstack(w_blocks))


def _real_columns(columns: np.ndarray) -> np.ndarray:
    """Keep real columns real; split complex columns into real and imaginary parts."""
    if not np.iscomplexobj(columns) or not np.any(columns.imag):
        return np.ascontiguousarray(np.real(columns))
    return np.hstack([columns.real, columns.imag])


def _truncated_svd(columns: np.ndarray, tolerance: float) -> Tuple[np.ndarray, np.ndarray, int]:
    if columns.ndim != 2 or columns.shape[1] == 0:
        raise ValueError("compression needs at least one column")
    U, s, _ = scipy.linalg.svd(columns, full_matrices=False)
    if s.size == 0 or s[0] == 0.0:
        raise ValueError("cannot compress: all columns are numerically zero (rank 0)")
    cutoff = max(tolerance, np.finfo(float).eps * max(columns.shape)) * s[0]
    r = int(np.count_nonzero(s > cutoff))
    if r == 0:
        raise ValueError("cannot compress: rank 0 after truncation")
    return U, s, r


def compress(columns: np.ndarray, tolerance: float = 1e-8) -> GlobalBasis:
    """Leading left singular vectors whose singular values exceed τ·σ_max.

    τ = 0 keeps the numerical rank of the input.

    Args:
        columns: Concatenated local basis columns (real or complex)
        tolerance: Relative truncation tolerance τ

    Returns:
        One-sided global basis (W = V)
    """
    real = _real_columns(np.asarray(columns))
    U, s, r = _truncated_svd(real, tolerance)
    V = np.ascontiguousarray(U[:, :r])
    logger.info(f"Compressed {real.shape[1]} columns to rank r = {r} (tau = {tolerance:g})")
    return GlobalBasis(V=V, W=V, tolerance=tolerance, singular_values=s)


def build_global_basis(forward: ForwardSolver, cfg: PalsConfig, samples: Sequence[np.ndarray],
                       frequencies: Sequence[float], tolerance: float = 1e-8,
                       two_sided: bool = False) -> GlobalBasis:
    """Offline stage: local bases at every sample, concatenated and compressed.

    One-sided mode compresses [V₁ … V_K W₁ … W_K] into a single basis used on
    both sides. Two-sided mode compresses the forward and adjoint blocks
    separately and keeps the same number of columns on each side.

    Args:
        forward: Full-order solver
        cfg: Level-set configuration
        samples: Parameter samples π₁ … π_K
        frequencies: Interpolation frequencies
        tolerance: Relative SVD truncation tolerance
        two_sided: Build a separate W from the adjoint solves

    Returns:
        Global basis stamped with frequencies, grid hash and layout sizes
    """
    if not samples:
        raise ValueError("need at least one parameter sample")
    ops = forward.ops
    tracker = ProgressTracker(len(samples), "Building local bases")
    locals_: List[LocalBasis] = []
    for i, sample in enumerate(samples):
        locals_.append(build_local_basis(forward, cfg, sample, frequencies, sample_index=i))
        tracker.update()

    v_columns = np.hstack([lb.V for lb in locals_])
    w_columns = np.hstack([lb.W for lb in locals_])

    if not two_sided:
        basis = compress(np.hstack([v_columns, w_columns]), tolerance)
    else:
        v_real, w_real = _real_columns(v_columns), _real_columns(w_columns)
        Uv, sv, rv = _truncated_svd(v_real, tolerance)
        Uw, sw, rw = _truncated_svd(w_real, tolerance)
        r = min(max(rv, rw), Uv.shape[1], Uw.shape[1])
        basis = GlobalBasis(V=np.ascontiguousarray(Uv[:, :r]), W=np.ascontiguousarray(Uw[:, :r]),
                            tolerance=tolerance, singular_values=sv, two_sided=True)
        logger.info(f"Two-sided bases: rank(V) = {rv}, rank(W) = {rw}, using r = {r}")

    basis.frequencies = tuple(float(w) for w in frequencies)
    basis.grid_hash = ops.grid_hash
    basis.n_src = ops.n_src
    basis.n_det = ops.n_det
    basis.n_samples = len(samples)
    return basis


class RomModel:
    """Reduced parametric model with a cached, incrementally updated Â₁."""

    def __init__(self, ops: DiscreteOperators, basis: GlobalBasis, a1: np.ndarray,
                 p: Optional[np.ndarray] = None, counters: Optional[CostCounters] = None,
                 refresh_interval: int = 50):
        """Project the constant operators and initialize the absorption cache.

        Args:
            ops: Full-order operators
            basis: Global basis (V, W)
            a1: Absorption diagonal A₁ at the initial parameter vector
            p: Initial parameter vector (kept as p_current)
            counters: Shared counters
            refresh_interval: Dense recomputation of Â₁ every this many updates
        """
        if basis.V.shape[0] != ops.n or basis.W.shape != basis.V.shape:
            raise ValueError(f"basis of shape {basis.V.shape} does not match n = {ops.n}")
        if np.shape(a1) != (ops.n,):
            raise ValueError("absorption diagonal has the wrong length")
        self.ops = ops
        self.basis = basis
        self.V = basis.V
        self.W = basis.W
        self.counters = counters if counters is not None else CostCounters()
        self.refresh_interval = refresh_interval
        self.nu = ops.domain.speed_of_light

        WT = self.W.T
        self.E_hat = WT @ (ops.E[:, None] * self.V)
        self.A0_hat = WT @ (ops.A0 @ self.V)
        self.B_hat = np.asarray(ops.B.T @ self.W).T
        self.C_hat = np.asarray(ops.C @ self.V)

        self.a1 = np.array(a1, dtype=float)
        self.p_current = None if p is None else np.array(p, dtype=float)
        self.A1_hat = self._project_diagonal(self.a1)
        self.updates_since_refresh = 0

    @property
    def r(self) -> int:
        return self.V.shape[1]

    def _project_diagonal(self, diagonal: np.ndarray) -> np.ndarray:
        return self.W.T @ (diagonal[:, None] * self.V)

    def _gathered_projection(self, rows: np.ndarray, values: np.ndarray) -> np.ndarray:
        """Wᵀ diag(scatter(values at rows)) V using only the affected rows."""
        return self.W[rows].T @ (values[:, None] * self.V[rows])

    def refresh(self) -> None:
        """Recompute Â₁ densely from the cached diagonal."""
        self.A1_hat = self._project_diagonal(self.a1)
        self.updates_since_refresh = 0
        logger.debug("Refreshed reduced absorption matrix")

    def update_absorption(self, delta: SupportDelta, p_new: Optional[np.ndarray] = None) -> None:
        """Â₁ ← Â₁ + Wᵀ diag(Δ) V, gathering only the q changed rows (r²q flops)."""
        if p_new is not None:
            self.p_current = np.array(p_new, dtype=float)
        if delta.q == 0:
            return
        rows = np.asarray(delta.indices)
        if rows.min() < 0 or rows.max() >= self.ops.n:
            raise ValueError("update indices out of range")
        self.A1_hat = self.A1_hat + self._gathered_projection(rows, delta.values)
        self.a1[rows] += delta.values
        self.counters.record_update_flops(self.r * self.r * delta.q)
        self.updates_since_refresh += 1
        if self.updates_since_refresh >= self.refresh_interval:
            self.refresh()

    def set_parameters(self, p: np.ndarray, cfg: PalsConfig) -> SupportDelta:
        """Move the cached state to p via the sparse absorption change."""
        a_new = absorption_diagonal(p, cfg, self.ops.domain)
        diff = a_new - self.a1
        indices = np.flatnonzero(np.abs(diff) > DELTA_THRESHOLD)
        delta = SupportDelta(indices=indices, values=diff[indices])
        self.update_absorption(delta, p_new=p)
        return delta

    def system_matrix(self, omega: float) -> np.ndarray:
        K = self.A0_hat + self.A1_hat
        if omega != 0:
            K = K + (1j * omega / self.nu) * self.E_hat
        return K

    def _factor(self, omega: float):
        K = self.system_matrix(omega)
        lu, piv = scipy.linalg.lu_factor(K, check_finite=True)
        pivots = np.abs(np.diag(lu))
        if pivots.min() <= np.finfo(float).eps * max(pivots.max(), 1.0) * 1e-3:
            raise SolverError("singular reduced matrix", context=f"reduced model at omega={omega:g}")
        return lu, piv

    def frequency_response(self, omega: float) -> np.ndarray:
        """Ψ̂(ω; p_current) via a dense r×r factorization."""
        lu_piv = self._factor(omega)
        X_hat = scipy.linalg.lu_solve(lu_piv, self.B_hat)
        self.counters.record_reduced_solves(self.B_hat.shape[1])
        return self.C_hat @ X_hat

    def evaluate(self, omega: float, d_a1=None) -> Tuple[np.ndarray, Optional[np.ndarray]]:
        """Reduced response and (optionally) Jacobian sharing one factorization.

        Args:
            omega: Angular frequency
            d_a1: Derivative diagonals ∂A₁/∂p_k (sparse n×ℓ, dense or list);
                None skips the Jacobian

        Returns:
            Tuple of (Ψ̂, J or None); J rows ordered i_src·n_det + i_det
        """
        lu_piv = self._factor(omega)
        X_hat = scipy.linalg.lu_solve(lu_piv, self.B_hat)
        self.counters.record_reduced_solves(self.B_hat.shape[1])
        psi = self.C_hat @ X_hat
        if d_a1 is None:
            return psi, None

        Z_hat = scipy.linalg.lu_solve(lu_piv, self.C_hat.T, trans=1)
        self.counters.record_reduced_solves(self.C_hat.shape[0])
        derivatives = _derivative_columns(d_a1, self.ops.n)
        ell = derivatives.shape[1]
        n_det, n_src = psi.shape
        J = np.zeros((n_det * n_src, ell), dtype=np.result_type(psi.dtype, Z_hat.dtype))
        ZT = Z_hat.T
        for k in range(ell):
            start, end = derivatives.indptr[k], derivatives.indptr[k + 1]
            if start == end:
                continue
            dA_hat = self._gathered_projection(derivatives.indices[start:end],
                                               derivatives.data[start:end])
            J[:, k] = -(ZT @ dA_hat @ X_hat).ravel(order='F')
        return psi, J

    def jacobian(self, d_a1, omega: float) -> np.ndarray:
        """∇_pΨ̂(ω; p) = −Ĉ K̂⁻¹ (∂Â₁/∂p_k) K̂⁻¹ B̂ for every k."""
        return self.evaluate(omega, d_a1)[1]


def reduce(ops: DiscreteOperators, basis: GlobalBasis, a1: np.ndarray,
           p: Optional[np.ndarray] = None, counters: Optional[CostCounters] = None,
           refresh_interval: int = 50) -> RomModel:
    """Form Ê, Â₀, B̂, Ĉ once and initialize the Â₁ cache."""
    if basis.grid_hash and basis.grid_hash != ops.grid_hash:
        raise BasisFormatError("basis was built for a different mesh or layout")
    model = RomModel(ops, basis, a1, p=p, counters=counters, refresh_interval=refresh_interval)
    logger.info(f"Reduced model: n = {ops.n} -> r = {model.r}")
    return model


def local_rom(forward: ForwardSolver, cfg: PalsConfig, sample: np.ndarray,
              frequencies: Sequence[float], tolerance: float = 1e-8,
              adjoint: bool = True) -> RomModel:
    """Reduced model built from the solves at a single sample (one-sided).

    With adjoint=False only the forward states X(ω_j) span the basis, which
    costs n_ω·n_src large solves instead of n_ω·(n_src + n_det).
    """
    a1 = absorption_diagonal(sample, cfg, forward.ops.domain)
    if adjoint:
        local = build_local_basis(forward, cfg, sample, frequencies)
        columns = np.hstack([local.V, local.W])
    else:
        columns = np.hstack([forward.states(a1, omega) for omega in frequencies])
    basis = compress(columns, tolerance)
    return RomModel(forward.ops, basis, a1, p=sample, counters=forward.counters)


def save_basis(filepath: str, basis: GlobalBasis) -> None:
    """Persist a global basis (header + little-endian float64 column-major V [, W])."""
    header = {
        'magic': BASIS_MAGIC.decode('ascii'),
        'version': BASIS_VERSION,
        'n': basis.n,
        'r': basis.r,
        'n_src': basis.n_src,
        'n_det': basis.n_det,
        'n_samples': basis.n_samples,
        'frequencies': list(basis.frequencies),
        'grid_hash': basis.grid_hash,
        'two_sided': bool(basis.two_sided),
        'tolerance': float(basis.tolerance),
        'singular_values': [float(s) for s in basis.singular_values],
        'dtype': '<f8',
    }
    arrays = [basis.V.astype('<f8')]
    if basis.two_sided:
        arrays.append(basis.W.astype('<f8'))
    write_container(filepath, BASIS_MAGIC, header, arrays)
    logger.info(f"Saved basis (n = {basis.n}, r = {basis.r}) to {filepath}")


def basis_info(filepath: str) -> Dict:
    """Read only the header of a basis container."""
    header, _ = read_container(filepath, BASIS_MAGIC)
    if header.get('version') != BASIS_VERSION:
        raise BasisFormatError(f"{filepath}: unsupported basis version {header.get('version')}")
    return header


def load_basis(filepath: str, expected_hash: Optional[str] = None) -> GlobalBasis:
    """Load a basis; a grid hash mismatch is a hard error.

    Args:
        filepath: Container path
        expected_hash: Grid hash of the current mesh/layout, if known

    Returns:
        Global basis

    Raises:
        BasisFormatError: Corrupt container or hash mismatch
    """
    header, payload = read_container(filepath, BASIS_MAGIC)
    if header.get('version') != BASIS_VERSION:
        raise BasisFormatError(f"{filepath}: unsupported basis version {header.get('version')}")
    if expected_hash is not None and header.get('grid_hash') != expected_hash:
        raise BasisFormatError(f"{filepath}: grid hash mismatch (basis is for another mesh or layout)")
    try:
        n, r = int(header['n']), int(header['r'])
        V, offset = payload_array(payload, 0, (n, r), '<f8')
        W = V
        if header['two_sided']:
            W, offset = payload_array(payload, offset, (n, r), '<f8')
    except KeyError as e:
        raise BasisFormatError(f"{filepath}: header field missing: {e}")
    if offset != len(payload):
        raise BasisFormatError(f"{filepath}: unexpected trailing bytes")
    return GlobalBasis(V=V, W=W, tolerance=float(header['tolerance']),
                       singular_values=np.asarray(header['singular_values'], dtype=float),
                       two_sided=bool(header['two_sided']),
                       frequencies=tuple(header['frequencies']),
                       grid_hash=header['grid_hash'],
                       n_src=int(header['n_src']), n_det=int(header['n_det']),
                       n_samples=int(header.get('n_samples', 0)))


def orthonormality_error(Q: np.ndarray) -> float:
    """max |QᵀQ − I|."""
    return float(np.max(np.abs(Q.T @ Q - np.eye(Q.shape[1])))) if Q.size else 0.0


def verify_basis(filepath: str, ops: DiscreteOperators) -> Dict:
    """Check orthonormality (≤ 1e−10) and the grid hash of a stored basis.

    Raises:
        BasisFormatError: Hash mismatch or non-orthonormal columns
    """
    basis = load_basis(filepath, expected_hash=ops.grid_hash)
    errors = {'V': orthonormality_error(basis.V)}
    if basis.two_sided:
        errors['W'] = orthonormality_error(basis.W)
    worst = max(errors.values())
    if worst > ORTHONORMALITY_TOLERANCE:
        raise BasisFormatError(f"{filepath}: columns not orthonormal (error {worst:.2e})")
    return {'path': filepath, 'r': basis.r, 'n': basis.n, 'grid_hash': basis.grid_hash,
            'orthonormality_error': errors, 'status': 'ok'}

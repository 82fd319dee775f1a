"""Reduced-Model Diagnostics

Measures how well a reduced model built at one parameter value serves at
others: canonical-angle gaps between reduction spaces, relative interpolation
error ratios normalized by (grid-sampled) H∞ norms, and solve accounting.
"""

import os
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
import scipy.linalg
from scipy.stats import spearmanr

from .counters import CostCounters, CostReport
from .errors import SolverError
from .grid_forward import ForwardSolver
from .inversion import InversionTrace
from .mor import RomModel, local_rom
from .pals import PalsConfig, absorption_diagonal
from .utils import ProgressTracker, ensure_directory

# Set up logging
logger = logging.getLogger(__name__)

ORTHONORMALITY_TOLERANCE = 1e-10


def counters(source: CostCounters) -> CostReport:
    """Snapshot of large solves, reduced solves, update flops, K_fun, K_Jac and K."""
    return source.snapshot()


def _check_orthonormal(Q: np.ndarray, name: str) -> None:
    error = np.max(np.abs(Q.conj().T @ Q - np.eye(Q.shape[1]))) if Q.size else 0.0
    if error > ORTHONORMALITY_TOLERANCE:
        raise ValueError(f"{name} does not have orthonormal columns (error {error:.2e})")


def subspace_gap(Va: np.ndarray, Vb: np.ndarray) -> float:
    """Sine of the largest canonical angle from range(Va) into range(Vb).

    Computed as ‖Va − Vb(VbᴴVa)‖₂, which equals sqrt(1 − σ_min(VbᴴVa)²) when
    r₁ ≤ r₂ and stays accurate for small angles.

    Raises:
        ValueError: Inputs without orthonormal columns or of different height
    """
    Va = np.asarray(Va)
    Vb = np.asarray(Vb)
    if Va.ndim != 2 or Vb.ndim != 2 or Va.shape[0] != Vb.shape[0]:
        raise ValueError("bases must be 2D arrays with the same number of rows")
    _check_orthonormal(Va, 'Va')
    _check_orthonormal(Vb, 'Vb')
    if Va.shape == Vb.shape and np.array_equal(Va, Vb):
        return 0.0
    projection_residual = Va - Vb @ (Vb.conj().T @ Va)
    gap = scipy.linalg.norm(projection_residual, 2) if projection_residual.size else 0.0
    return float(np.clip(gap, 0.0, 1.0))


def default_hinf_grid(frequencies: Sequence[float], points: int = 101) -> np.ndarray:
    """Zero plus log-spaced points spanning the positive experiment frequencies."""
    positive = [w for w in frequencies if w > 0]
    if not positive:
        return np.array([0.0])
    low, high = min(positive), max(positive)
    if low == high:
        low, high = low / 10.0, high * 10.0
    return np.concatenate([[0.0], np.logspace(np.log10(low), np.log10(high), points)])


def hinf_on_grid(model: RomModel, omegas: Sequence[float]) -> float:
    """max over the grid of ‖Ψ̂(ω; p_current)‖₂, a lower bound of the H∞ norm.

    Points where the reduced system is singular are skipped with a warning.
    """
    best = 0.0
    for omega in omegas:
        try:
            psi = model.frequency_response(float(omega))
        except SolverError as e:
            logger.warning(f"Skipping omega={omega:g} in H-infinity estimate: {e}")
            continue
        best = max(best, float(scipy.linalg.norm(psi, 2)))
    return best


def interpolation_error_ratio(full: ForwardSolver, reference: RomModel, current: RomModel,
                              cfg: PalsConfig, omega: float, p: np.ndarray,
                              hinf_grid: Optional[Sequence[float]] = None) -> float:
    """‖Ψ(ω;p) − Ψ̂_ref(ω;p)‖₂ / ((‖Ψ̂_cur‖_H∞ + ‖Ψ̂_ref‖_H∞)/2).

    Both reduced models are moved to p. The full solve is counted on the
    solver's own counters.
    """
    p = np.asarray(p, dtype=float)
    grid = hinf_grid if hinf_grid is not None else [omega]
    for model in (reference, current):
        model.set_parameters(p, cfg)
    psi_full = full.frequency_response(absorption_diagonal(p, cfg, full.ops.domain), omega)
    psi_ref = reference.frequency_response(omega)
    scale = 0.5 * (hinf_on_grid(current, grid) + hinf_on_grid(reference, grid))
    error = float(scipy.linalg.norm(psi_full - psi_ref, 2))
    if scale == 0.0:
        return 0.0 if error == 0.0 else float('inf')
    return error / scale


@dataclass
class GapSeries:
    iterations: List[int] = field(default_factory=list)
    gaps: List[float] = field(default_factory=list)


@dataclass
class ErrorRatioSeries:
    iterations: List[int] = field(default_factory=list)
    ratios: List[float] = field(default_factory=list)


@dataclass
class DiagnosticSeries:
    gap: GapSeries
    error_ratio: ErrorRatioSeries
    correlation: Optional[float]
    counters: CostReport

    def to_dict(self) -> Dict:
        return {
            'iterations': self.gap.iterations,
            'gaps': self.gap.gaps,
            'error_ratios': self.error_ratio.ratios,
            'rank_correlation': self.correlation,
            'counters': self.counters.to_dict(),
        }


def gap_error_series(forward: ForwardSolver, cfg: PalsConfig, trace: InversionTrace,
                     frequencies: Sequence[float], tolerance: float = 1e-8,
                     hinf_points: int = 101) -> DiagnosticSeries:
    """Gap and error-ratio series along the path of an inversion.

    The path is the trace's lead-in (the full-order warm start of a reduced
    run) followed by its accepted iterates, so p₁ is the initial guess. Each
    iterate p_k gets the local space V_k = span{X(ω_j; p_k)} of its forward
    states; sinΘ(V₁, V_k) is recorded together with the error of the model
    built on V₁ at p_k (first frequency), normalized by the H∞ surrogates of
    the V₁ and V_k models at p_k.

    Args:
        forward: Full-order solver; use dedicated counters so inversion
            counts stay untouched
        cfg: Level-set configuration
        trace: Completed inversion trace
        frequencies: Experiment frequencies
        tolerance: SVD truncation tolerance for the local bases
        hinf_points: Log-spaced points of the H∞ grid

    Returns:
        Both series and their Spearman rank correlation
    """
    iterates = trace.trajectory()
    if not iterates:
        raise ValueError("trace has no accepted iterates")
    grid = default_hinf_grid(frequencies, hinf_points)
    omega = float(frequencies[0])

    reference = local_rom(forward, cfg, iterates[0], frequencies, tolerance, adjoint=False)
    gaps, ratios = GapSeries(), ErrorRatioSeries()
    tracker = ProgressTracker(len(iterates), "Diagnosing iterates")
    for k, p in enumerate(iterates):
        current = reference if k == 0 else local_rom(forward, cfg, p, frequencies, tolerance, adjoint=False)
        gaps.iterations.append(k)
        gaps.gaps.append(subspace_gap(reference.V, current.V))
        ratios.iterations.append(k)
        ratios.ratios.append(interpolation_error_ratio(forward, reference, current, cfg, omega, p, grid))
        tracker.update()

    correlation = None
    if len(gaps.gaps) > 2 and np.ptp(gaps.gaps) > 0 and np.ptp(ratios.ratios) > 0:
        correlation = float(spearmanr(gaps.gaps, ratios.ratios)[0])
    logger.info(f"Diagnosed {len(iterates)} iterates, max gap {max(gaps.gaps):.3e}, "
                f"rank correlation {correlation}")
    return DiagnosticSeries(gap=gaps, error_ratio=ratios, correlation=correlation,
                            counters=forward.counters.snapshot())


def write_series(series: DiagnosticSeries, filepath: str) -> str:
    """Write "iteration,gap,error_ratio" rows as comma-separated text."""
    ensure_directory(os.path.dirname(filepath))
    table = np.column_stack([series.gap.iterations, series.gap.gaps, series.error_ratio.ratios])
    np.savetxt(filepath, table, delimiter=',', fmt=['%d', '%.10e', '%.10e'],
               header='iteration,gap,error_ratio', comments='')
    logger.info(f"Wrote diagnostic series to {filepath}")
    return filepath

"""Trust-Region Gauss-Newton Image Reconstruction

Solves min_p ‖𝕄(p) − 𝔻‖₂ over the level-set parameters p, with the predicted
measurements 𝕄(p) supplied either by the full-order model or by the reduced
model. Complex residuals are lifted to real vectors [Re; Im] so the problem is
an ordinary real least-squares problem.
"""

import logging
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import scipy.linalg
from scipy.optimize import brentq

from .config import OptimizerOptions, RunConfig
from .counters import CostCounters
from .errors import PhaseError
from .grid_forward import (DiscreteOperators, ForwardSolver, assemble, full_jacobian_block,
                           stack_jacobians, stack_responses, unstack_responses)
from .mor import GlobalBasis, RomModel, build_global_basis, load_basis, reduce
from .pals import (PalsConfig, absorption_diagonal, absorption_image, absorption_jacobian,
                   initial_parameters, params_to_list)
from .utils import load_json, save_json

# Set up logging
logger = logging.getLogger(__name__)


@dataclass
class MeasurementSet:
    """Stacked measurement vector 𝔻 with its frequencies and layout sizes.

    Entry ((i_src·n_ω + j_ω)·n_det + i_det) holds the reading of detector i_det
    for source i_src at frequency ω_j.
    """

    frequencies: np.ndarray
    data: np.ndarray
    n_det: int
    n_src: int
    noise: float = 0.0
    grid_hash: str = ''

    def __post_init__(self):
        self.frequencies = np.asarray(self.frequencies, dtype=float)
        self.data = np.asarray(self.data, dtype=complex)
        expected = self.n_det * self.n_src * self.frequencies.size
        if self.data.shape != (expected,):
            raise ValueError(f"measurement vector must have length n_det·n_src·n_omega = {expected}, "
                             f"got {self.data.shape}")

    @property
    def n_omega(self) -> int:
        return int(self.frequencies.size)

    def blocks(self) -> List[np.ndarray]:
        """Per-frequency n_det×n_src matrices."""
        return unstack_responses(self.data, self.n_det, self.n_src, self.n_omega)


class ObjectiveBackend:
    """Evaluates 𝕄(p) and J(p) = ∂𝕄/∂p as complex stacked arrays."""

    kind = 'abstract'

    def __init__(self, cfg: PalsConfig, frequencies: Sequence[float], counters: CostCounters):
        self.cfg = cfg
        self.frequencies = [float(w) for w in frequencies]
        self.counters = counters

    def responses(self, p: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def jacobian(self, p: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class FullBackend(ObjectiveBackend):
    """Full-order model: n_ω·n_src large solves per function evaluation,
    n_ω·n_det more per Jacobian (the states X are reused)."""

    kind = 'full'

    def __init__(self, forward: ForwardSolver, cfg: PalsConfig, frequencies: Sequence[float]):
        super().__init__(cfg, frequencies, forward.counters)
        self.forward = forward
        self.ops = forward.ops
        self._cached_p: Optional[np.ndarray] = None
        self._cached_states: List[np.ndarray] = []

    def responses(self, p: np.ndarray) -> np.ndarray:
        p = np.asarray(p, dtype=float)
        a1 = absorption_diagonal(p, self.cfg, self.ops.domain)
        blocks, states = [], []
        for omega in self.frequencies:
            psi, X = self.forward.frequency_response(a1, omega, return_states=True)
            blocks.append(psi)
            states.append(X)
        self._cached_p = p.copy()
        self._cached_states = states
        self.counters.record_function_evaluation()
        return stack_responses(blocks)

    def jacobian(self, p: np.ndarray) -> np.ndarray:
        p = np.asarray(p, dtype=float)
        if self._cached_p is None or not np.array_equal(p, self._cached_p):
            # the states are only available through a function evaluation
            self.responses(p)
        a1 = absorption_diagonal(p, self.cfg, self.ops.domain)
        d_a1 = absorption_jacobian(p, self.cfg, self.ops.domain)
        blocks = []
        for omega, X in zip(self.frequencies, self._cached_states):
            Z = self.forward.adjoint_solutions(a1, omega)
            blocks.append(full_jacobian_block(self.ops, a1, d_a1, omega, X, Z))
        self.counters.record_jacobian_evaluation()
        return stack_jacobians(blocks, self.ops.n_det, self.ops.n_src)


class RomBackend(ObjectiveBackend):
    """Reduced model: no large solves, Â₁ moved to p by sparse updates."""

    kind = 'rom'

    def __init__(self, model: RomModel, cfg: PalsConfig, frequencies: Sequence[float]):
        super().__init__(cfg, frequencies, model.counters)
        self.model = model

    def _move_to(self, p: np.ndarray) -> None:
        if self.model.p_current is None or not np.array_equal(p, self.model.p_current):
            self.model.set_parameters(p, self.cfg)

    def responses(self, p: np.ndarray) -> np.ndarray:
        p = np.asarray(p, dtype=float)
        self._move_to(p)
        blocks = [self.model.frequency_response(omega) for omega in self.frequencies]
        self.counters.record_function_evaluation()
        return stack_responses(blocks)

    def jacobian(self, p: np.ndarray) -> np.ndarray:
        p = np.asarray(p, dtype=float)
        self._move_to(p)
        d_a1 = absorption_jacobian(p, self.cfg, self.model.ops.domain)
        blocks = [self.model.evaluate(omega, d_a1)[1] for omega in self.frequencies]
        self.counters.record_jacobian_evaluation()
        return stack_jacobians(blocks, self.model.ops.n_det, self.model.ops.n_src)


def _real_stack(values: np.ndarray) -> np.ndarray:
    return np.concatenate([values.real, values.imag], axis=0)


def residual(backend: ObjectiveBackend, p: np.ndarray, data: MeasurementSet) -> np.ndarray:
    """Real residual [Re(𝕄(p) − 𝔻); Im(𝕄(p) − 𝔻)]; its 2-norm is the complex misfit."""
    p = np.asarray(p, dtype=float)
    if not np.all(np.isfinite(p)):
        raise ValueError("parameter vector must be finite")
    predicted = backend.responses(p)
    if predicted.shape != data.data.shape:
        raise ValueError(f"backend produced {predicted.shape} values, data has {data.data.shape}")
    return _real_stack(predicted - data.data)


def jacobian(backend: ObjectiveBackend, p: np.ndarray) -> np.ndarray:
    """Real Jacobian [Re J; Im J] matching the residual stacking."""
    p = np.asarray(p, dtype=float)
    if not np.all(np.isfinite(p)):
        raise ValueError("parameter vector must be finite")
    return _real_stack(np.asarray(backend.jacobian(p), dtype=complex))


@dataclass
class InversionTrace:
    """Every evaluated point with its objective, trust radius and acceptance."""

    backend: str = ''
    points: List[List[float]] = field(default_factory=list)
    objectives: List[float] = field(default_factory=list)
    radii: List[float] = field(default_factory=list)
    accepted: List[bool] = field(default_factory=list)
    status: str = 'running'
    large_solves: int = 0
    reduced_solves: int = 0
    k_fun: int = 0
    k_jac: int = 0
    # full-order iterates that led to the first point (warm start of a reduced run)
    lead_in: List[List[float]] = field(default_factory=list)

    def record(self, p: np.ndarray, objective: float, radius: float, accepted: bool) -> None:
        self.points.append(params_to_list(p))
        self.objectives.append(float(objective))
        self.radii.append(float(radius))
        self.accepted.append(bool(accepted))

    def accepted_iterates(self) -> List[np.ndarray]:
        return [np.asarray(p) for p, ok in zip(self.points, self.accepted) if ok]

    def accepted_objectives(self) -> List[float]:
        return [f for f, ok in zip(self.objectives, self.accepted) if ok]

    def trajectory(self) -> List[np.ndarray]:
        """Lead-in iterates followed by the accepted iterates."""
        return [np.asarray(p) for p in self.lead_in] + self.accepted_iterates()

    @property
    def n_accepted_steps(self) -> int:
        return max(sum(self.accepted) - 1, 0)

    def to_dict(self) -> Dict[str, Any]:
        return {
            'backend': self.backend,
            'points': self.points,
            'objectives': self.objectives,
            'radii': self.radii,
            'accepted': self.accepted,
            'status': self.status,
            'large_solves': self.large_solves,
            'reduced_solves': self.reduced_solves,
            'k_fun': self.k_fun,
            'k_jac': self.k_jac,
            'lead_in': self.lead_in,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'InversionTrace':
        return cls(**data)

    def save(self, filepath: str) -> None:
        save_json(self.to_dict(), filepath)

    @classmethod
    def load(cls, filepath: str) -> 'InversionTrace':
        data = load_json(filepath)
        if data is None:
            raise OSError(f"could not read trace {filepath}")
        return cls.from_dict(data)


def _trust_region_step(eigenvalues: np.ndarray, eigenvectors: np.ndarray, gradient: np.ndarray,
                       radius: float):
    """Minimize ‖J d + r‖² subject to ‖d‖ ≤ radius from the eigenpairs of JᵀJ.

    Returns:
        Tuple of (step, whether the step lies on the trust-region boundary)
    """
    lam = np.maximum(eigenvalues, 0.0)
    gq = eigenvectors.T @ gradient
    cutoff = np.finfo(float).eps * max(lam.max(initial=0.0), 1e-300) * lam.size
    positive = lam > cutoff

    if np.any(positive):
        coefficients = np.zeros_like(gq)
        coefficients[positive] = gq[positive] / lam[positive]
        step = -eigenvectors @ coefficients
        if np.linalg.norm(step) <= radius:
            return step, False

    def step_norm_excess(shift: float) -> float:
        return np.linalg.norm(gq / (lam + shift)) - radius

    g_norm = np.linalg.norm(gradient)
    upper = g_norm / radius
    lower = 0.0 if lam.min() > cutoff else upper * 1e-12
    if step_norm_excess(lower) <= 0.0:
        shift = lower
    else:
        shift = brentq(step_norm_excess, lower, upper, xtol=1e-14 * upper, rtol=1e-12)
    return -eigenvectors @ (gq / (lam + shift)), True


def update_radius(radius: float, ratio: float, at_boundary: bool) -> float:
    """Shrink by 4 unless ρ > 0.1; double when ρ > 0.75 and the step hit the boundary."""
    if ratio <= 0.1:
        return radius * 0.25
    if ratio > 0.75 and at_boundary:
        return radius * 2.0
    return radius


def solve(backend: ObjectiveBackend, p0: np.ndarray, data: MeasurementSet,
          options: Optional[OptimizerOptions] = None):
    """Trust-region Gauss-Newton iteration.

    Each trial step minimizes the Gauss-Newton model inside the trust region
    using a Levenberg shift found by 1D root finding. Steps with ρ > 0.1 are
    accepted; the radius doubles when ρ > 0.75 and the step hit the boundary
    and shrinks by 4 when ρ <= 0.1. With `options.discrepancy` set and a known
    noise level, the iteration stops once the misfit reaches the noise floor
    discrepancy·noise·‖𝔻‖.

    Args:
        backend: Full or reduced objective backend
        p0: Initial parameter vector
        data: Measurements
        options: Iteration limits and tolerances

    Returns:
        Tuple of (best parameter vector, InversionTrace)

    Raises:
        ValueError: Objective not finite at p0
    """
    options = options or OptimizerOptions()
    counters = backend.counters
    start = counters.snapshot()
    trace = InversionTrace(backend=backend.kind)

    p = np.array(p0, dtype=float)
    r = residual(backend, p, data)
    f = float(np.linalg.norm(r))
    if not np.isfinite(f):
        raise ValueError("objective is not finite at the initial parameters")
    radius = float(options.initial_radius)
    target = options.discrepancy * data.noise * float(np.linalg.norm(data.data))
    trace.record(p, f, radius, True)
    logger.info(f"[{backend.kind}] initial objective {f:.6e}")

    def finish(status: str):
        trace.status = status
        spent = counters.snapshot().since(start)
        trace.large_solves = spent.large_solves
        trace.reduced_solves = spent.reduced_solves
        trace.k_fun = spent.k_fun
        trace.k_jac = spent.k_jac
        logger.info(f"[{backend.kind}] stopped ({status}) after {trace.n_accepted_steps} accepted steps, "
                    f"objective {f:.6e}, large solves {spent.large_solves}")
        return p, trace

    if f == 0.0:
        return finish('zero-residual')
    if f <= target:
        return finish('discrepancy')
    if options.max_accepted is not None and options.max_accepted <= 0:
        return finish('max-accepted')

    J = jacobian(backend, p)
    g = J.T @ r
    g0_norm = float(np.linalg.norm(g))
    if g0_norm == 0.0:
        return finish('gtol')
    eigenvalues, eigenvectors = scipy.linalg.eigh(J.T @ J)
    n_accepted = 0

    for iteration in range(1, options.max_iter + 1):
        step, at_boundary = _trust_region_step(eigenvalues, eigenvectors, g, radius)
        model_residual = r + J @ step
        predicted = 0.5 * (f * f - float(model_residual @ model_residual))

        p_trial = p + step
        r_trial = residual(backend, p_trial, data)
        f_trial = float(np.linalg.norm(r_trial))
        actual = 0.5 * (f * f - f_trial * f_trial)
        ratio = actual / predicted if predicted > 0 and np.isfinite(f_trial) else -np.inf
        accepted = ratio > 0.1
        trace.record(p_trial, f_trial, radius, accepted)
        logger.debug(f"[{backend.kind}] iteration {iteration}: f={f_trial:.6e} rho={ratio:.3f} "
                     f"radius={radius:.3e} {'accepted' if accepted else 'rejected'}")

        radius = update_radius(radius, ratio, at_boundary)

        if accepted:
            f_old = f
            p, r, f = p_trial, r_trial, f_trial
            n_accepted += 1
            logger.info(f"[{backend.kind}] step {n_accepted}: objective {f:.6e}")
            if f == 0.0:
                return finish('zero-residual')
            if f <= target:
                return finish('discrepancy')
            if f_old - f <= options.ftol * f_old:
                return finish('ftol')
            if options.max_accepted is not None and n_accepted >= options.max_accepted:
                return finish('max-accepted')
            J = jacobian(backend, p)
            g = J.T @ r
            if np.linalg.norm(g) <= options.gtol * g0_norm:
                return finish('gtol')
            eigenvalues, eigenvectors = scipy.linalg.eigh(J.T @ J)

        if radius < options.min_radius:
            logger.warning(f"[{backend.kind}] trust radius underflow, returning best iterate")
            return finish('radius-underflow')

    return finish('max-iter')


@dataclass
class ReconstructionReport:
    """Outcome of run_reconstruction; `image` and `trace` are written separately."""

    mode: str
    status: str
    initial_parameters: List[float]
    final_parameters: List[float]
    objective_history: List[float]
    initial_misfit: float
    final_misfit: float
    final_misfit_full: Optional[float]
    counters: Dict[str, Any]
    phase_counters: Dict[str, Dict[str, Any]]
    offline_online_ratio: Optional[float]
    n_samples: int
    basis_rank: Optional[int]
    config: Dict[str, Any]
    image: Optional[np.ndarray] = field(default=None, repr=False)
    trace: Optional[InversionTrace] = field(default=None, repr=False)
    samples: List[List[float]] = field(default_factory=list)
    basis: Optional[GlobalBasis] = field(default=None, repr=False)
    paths: Dict[str, str] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return {
            'mode': self.mode,
            'status': self.status,
            'initial_parameters': self.initial_parameters,
            'final_parameters': self.final_parameters,
            'objective_history': self.objective_history,
            'initial_misfit': self.initial_misfit,
            'final_misfit': self.final_misfit,
            'final_misfit_full': self.final_misfit_full,
            'counters': self.counters,
            'phase_counters': self.phase_counters,
            'offline_online_ratio': self.offline_online_ratio,
            'n_samples': self.n_samples,
            'basis_rank': self.basis_rank,
            'samples': self.samples,
            'paths': self.paths,
            'config': self.config,
        }


def relative_misfit(predicted: np.ndarray, data: MeasurementSet) -> float:
    """‖𝕄 − 𝔻‖ / ‖𝔻‖."""
    norm = np.linalg.norm(data.data)
    return float(np.linalg.norm(predicted - data.data) / norm) if norm > 0 else float('nan')


def _run_phase(name: str, func, *args, **kwargs):
    logger.info(f"Phase: {name}")
    try:
        return func(*args, **kwargs)
    except PhaseError:
        raise
    except Exception as e:
        logger.error(f"Phase '{name}' failed: {e}")
        raise PhaseError(name, e) from e


def build_operators(config: RunConfig) -> DiscreteOperators:
    domain = config.domain_spec()
    return assemble(domain, config.layout_spec(domain))


def run_reconstruction(config: RunConfig, data: MeasurementSet,
                       basis: Optional[GlobalBasis] = None,
                       ops: Optional[DiscreteOperators] = None,
                       counters: Optional[CostCounters] = None) -> ReconstructionReport:
    """Run the configured pipeline: warm start, basis, inversion, rasterization.

    Modes:
        full          full-order inversion from the initial guess
        rom           K − 1 full-order warm-start steps give K samples, then
                      the basis is built and the reduced inversion continues
                      from the last warm-start iterate
        rom-recycled  reduced inversion with a preloaded basis, no large solves

    Args:
        config: Run configuration
        data: Measurements to fit
        basis: Preloaded basis (otherwise read from config.basis_path in
            rom-recycled mode)
        ops: Assembled operators (assembled from config when omitted)
        counters: Shared counters

    Returns:
        Reconstruction report

    Raises:
        PhaseError: Any failure, tagged with the phase it happened in
    """
    counters = counters if counters is not None else CostCounters()
    cfg = _run_phase('setup', config.pals_config)
    ops = ops if ops is not None else _run_phase('setup', build_operators, config)
    frequencies = config.frequency_values()
    if data.grid_hash and data.grid_hash != ops.grid_hash:
        raise PhaseError('setup', ValueError("measurements were simulated on a different mesh or layout"))
    if data.n_det != ops.n_det or data.n_src != ops.n_src or \
            not np.array_equal(data.frequencies, np.asarray(frequencies)):
        raise PhaseError('setup', ValueError("measurements do not match the configured layout or frequencies"))

    forward = ForwardSolver(ops, method=config.solver.method, tolerance=config.solver.tolerance,
                            max_iterations=config.solver.max_iterations, counters=counters)
    p0 = initial_parameters(cfg, ops.domain, config.initial_grid, alpha=config.pals.initial_alpha)
    phase_counters: Dict[str, Dict[str, Any]] = {}
    mark = counters.snapshot()

    def close_phase(name: str) -> None:
        nonlocal mark
        now = counters.snapshot()
        phase_counters[name] = now.since(mark).to_dict()
        mark = now

    full_backend = FullBackend(forward, cfg, frequencies)
    start_p = p0
    samples: List[np.ndarray] = []
    initial_objective: Optional[float] = None
    mode = config.mode

    if mode == 'full':
        backend: ObjectiveBackend = full_backend
    else:
        if mode == 'rom' and basis is None:
            options = replace(config.optimizer, max_accepted=config.rom.samples - 1)
            _, warm_trace = _run_phase('warm_start', solve, full_backend, p0, data, options)
            initial_objective = warm_trace.objectives[0]
            samples = warm_trace.accepted_iterates()[:config.rom.samples]
            start_p = samples[-1]
            close_phase('warm_start')
            basis = _run_phase('basis', build_global_basis, forward, cfg, samples, frequencies,
                               tolerance=config.rom.tolerance, two_sided=config.rom.two_sided)
            close_phase('basis')
        elif basis is None:
            if not config.basis_path:
                raise PhaseError('basis', ValueError("rom-recycled mode needs a basis path"))
            basis = _run_phase('basis', load_basis, config.basis_path, expected_hash=ops.grid_hash)
        if basis.grid_hash and basis.grid_hash != ops.grid_hash:
            raise PhaseError('basis', ValueError("basis was built for a different mesh or layout"))
        model = _run_phase('basis', reduce, ops, basis,
                           absorption_diagonal(start_p, cfg, ops.domain), p=start_p,
                           counters=counters, refresh_interval=config.rom.refresh_interval)
        backend = RomBackend(model, cfg, frequencies)

    if samples:
        counters.set_samples(len(samples))
    elif basis is not None:
        counters.set_samples(basis.n_samples)
    else:
        # a full run is priced against the K samples a reduced run would take
        counters.set_samples(config.rom.samples)
    before_inversion = counters.snapshot()
    p_final, trace = _run_phase('inversion', solve, backend, start_p, data, config.optimizer)
    trace.lead_in = [params_to_list(s) for s in samples[:-1]]
    close_phase('inversion')
    inversion_counts = counters.snapshot().since(before_inversion)

    objectives = trace.accepted_objectives()
    data_norm = float(np.linalg.norm(data.data))
    if initial_objective is None:
        initial_objective = objectives[0]
    initial_misfit = initial_objective / data_norm if data_norm > 0 else float('nan')
    final_misfit = objectives[-1] / data_norm if data_norm > 0 else float('nan')

    final_misfit_full = None
    if mode == 'full':
        final_misfit_full = final_misfit
    elif config.diagnostics.full_misfit:
        # separate counters keep the inversion's solve counts exact
        check = ForwardSolver(ops, method=config.solver.method, tolerance=config.solver.tolerance,
                              max_iterations=config.solver.max_iterations, counters=CostCounters())
        predicted = _run_phase('rasterize', FullBackend(check, cfg, frequencies).responses, p_final)
        final_misfit_full = relative_misfit(predicted, data)

    image = _run_phase('rasterize', absorption_image, p_final, cfg, ops.domain)
    totals = counters.snapshot()
    ratio = inversion_counts.offline_online_ratio

    report = ReconstructionReport(
        mode=mode,
        status=trace.status,
        initial_parameters=params_to_list(p0),
        final_parameters=params_to_list(p_final),
        objective_history=objectives,
        initial_misfit=initial_misfit,
        final_misfit=final_misfit,
        final_misfit_full=final_misfit_full,
        counters=totals.to_dict(),
        phase_counters=phase_counters,
        offline_online_ratio=ratio,
        n_samples=totals.k_samples,
        basis_rank=None if basis is None else basis.r,
        config=config.to_dict(),
        image=image,
        trace=trace,
        samples=[params_to_list(s) for s in samples],
        basis=basis,
    )
    logger.info(f"Reconstruction ({mode}) finished: misfit {initial_misfit:.3e} -> {final_misfit:.3e}, "
                f"{totals.large_solves} large solves")
    return report

"""Experiment-level checks on the shipped 50×50 configuration

Full and reduced reconstructions of the configured phantom, the reduction
rank, basis recycling on a second phantom and the gap/error-ratio series.
Each run takes several hundred large solves; results are shared between tests.
"""

import os
from dataclasses import replace
from functools import lru_cache

import numpy as np

from src.config import load_config
from src.counters import CostCounters
from src.diagnostics import gap_error_series
from src.grid_forward import ForwardSolver
from src.inversion import build_operators, run_reconstruction
from src.pals import initial_parameters
from src.synth import rasterize_phantom, simulate_measurements
from suite_runner import exit_with_results

CONFIG_PATH = os.path.join(os.path.dirname(os.path.abspath(__file__)), 'configs', 'small-50.json')
SECOND_PHANTOM = 'block-pair'


@lru_cache(maxsize=None)
def _experiment():
    config = load_config(CONFIG_PATH)
    return config, build_operators(config)


@lru_cache(maxsize=None)
def _measurements(shape):
    config, ops = _experiment()
    phantom = rasterize_phantom(shape, ops.domain, config.phantom.seed, config.pals_config())
    forward = ForwardSolver(ops, method=config.solver.method, tolerance=config.solver.tolerance)
    data, _ = simulate_measurements(phantom, forward, config.frequency_values(),
                                    config.noise.level, config.noise.seed)
    return data


@lru_cache(maxsize=None)
def _reconstruction(mode):
    config, ops = _experiment()
    return run_reconstruction(replace(config, mode=mode), _measurements(config.phantom.shape), ops=ops)


def test_experiment_layout():
    config, ops = _experiment()
    assert (config.domain.nx, config.domain.nz) == (50, 50)
    assert ops.n_src == 24 and ops.n_det == 24
    assert config.frequency_values() == [0.0]
    assert config.rom.samples == 2 and config.rom.tolerance == 1e-8
    assert not set(ops.layout.source_nodes) & set(ops.layout.detector_nodes)


def test_full_run_cost_follows_the_counting_model():
    config, ops = _experiment()
    report = _reconstruction('full')
    counts = report.counters
    n_omega = len(config.frequency_values())
    assert counts['large_solves'] == (counts['k_fun'] * n_omega * ops.n_src
                                      + counts['k_jac'] * n_omega * ops.n_det)
    assert 384 <= counts['large_solves'] <= 1536
    assert report.offline_online_ratio == (counts['k_fun'] + counts['k_jac']) / (2.0 * config.rom.samples)


def test_both_backends_reduce_the_misfit_tenfold():
    for mode in ('full', 'rom'):
        report = _reconstruction(mode)
        assert report.initial_misfit >= 1e-2, mode
        assert report.initial_misfit / report.final_misfit_full >= 10.0, mode


def test_reduced_misfit_stays_close_to_the_full_misfit():
    full = _reconstruction('full')
    rom = _reconstruction('rom')
    assert rom.final_misfit_full <= 2.0 * full.final_misfit


def test_reduction_rank_and_online_cost():
    config, ops = _experiment()
    report = _reconstruction('rom')
    assert 60 <= report.basis_rank <= 96
    assert report.basis.n == ops.n
    assert report.phase_counters['inversion']['large_solves'] == 0
    assert report.phase_counters['basis']['large_solves'] == config.rom.samples * (ops.n_src + ops.n_det)


def test_basis_recycles_to_a_second_phantom():
    config, ops = _experiment()
    basis = _reconstruction('rom').basis
    data = _measurements(SECOND_PHANTOM)
    counters = CostCounters()
    report = run_reconstruction(replace(config, mode='rom-recycled'), data, basis=basis, ops=ops,
                                counters=counters)
    assert counters.large_solves == 0
    assert report.counters['large_solves'] == 0
    assert report.initial_misfit / report.final_misfit_full >= 10.0


def test_gap_and_error_ratio_track_each_other():
    config, ops = _experiment()
    report = _reconstruction('rom')
    cfg = config.pals_config()
    forward = ForwardSolver(ops, method=config.solver.method, tolerance=config.solver.tolerance,
                            counters=CostCounters())
    series = gap_error_series(forward, cfg, report.trace, config.frequency_values(),
                              tolerance=config.rom.tolerance,
                              hinf_points=config.diagnostics.hinf_points)

    p0 = initial_parameters(cfg, ops.domain, config.initial_grid, alpha=config.pals.initial_alpha)
    np.testing.assert_array_equal(report.trace.trajectory()[0], p0)
    assert len(series.gap.gaps) == len(report.trace.trajectory())
    assert series.gap.gaps[0] == 0.0
    assert max(series.gap.gaps) <= 0.7
    assert series.correlation is not None and series.correlation > 0.0


if __name__ == "__main__":
    exit_with_results("50x50 experiment", globals())

"""Tests for phantoms and synthetic measurements"""

import os
import tempfile

import numpy as np
import pytest

from src.errors import BasisFormatError
from src.grid_forward import DomainSpec, ForwardSolver, SourceDetectorLayout, assemble
from src.pals import PalsConfig
from src.synth import (PRESETS, add_noise, draw_preset, load_mask, load_measurement_metadata,
                       load_measurements, pixel_absorption_diagonal, rasterize_phantom, save_mask,
                       save_measurements, simulate_measurements)
from suite_runner import exit_with_results


def _domain(n=50):
    half = 2.5
    return DomainSpec(half_width=half, half_height=half, nx=n, nz=n)


def test_presets_rasterize_at_any_resolution():
    for name in PRESETS:
        for n in (25, 50, 101):
            mask = draw_preset(name, n, n)
            assert mask.shape == (n, n) and mask.dtype == bool
            assert 0 < mask.sum() < n * n


def test_cup_covers_a_plausible_fraction():
    phantom = rasterize_phantom('cup', _domain(), 0, PalsConfig())
    assert 0.05 < phantom.mask_fraction < 0.15


def test_zero_variation_gives_exact_levels():
    cfg = PalsConfig(sigma=0.0)
    phantom = rasterize_phantom('triple-disc', _domain(), 3, cfg)
    assert np.all(phantom.absorption[phantom.mask] == cfg.mu_in)
    assert np.all(phantom.absorption[~phantom.mask] == cfg.mu_out)


def test_variation_is_seeded():
    cfg = PalsConfig()
    a = rasterize_phantom('block-pair', _domain(), 4, cfg)
    b = rasterize_phantom('block-pair', _domain(), 4, cfg)
    c = rasterize_phantom('block-pair', _domain(), 5, cfg)
    assert np.array_equal(a.absorption, b.absorption)
    assert not np.array_equal(a.absorption, c.absorption)
    assert np.array_equal(a.mask, c.mask)
    inside = a.absorption[a.mask]
    assert abs(inside.mean() - cfg.mu_in) < 3 * cfg.sigma * cfg.mu_in


def test_empty_mask_file_gives_uniform_background():
    cfg = PalsConfig()
    domain = _domain(25)
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, 'empty.pgm')
        save_mask(np.zeros((25, 25), dtype=bool), path)
        phantom = rasterize_phantom(path, domain, 0, cfg)
    assert phantom.mask_fraction == 0.0
    assert np.all(phantom.absorption == cfg.mu_out)


def test_mask_files_keep_orientation():
    mask = np.zeros((25, 25), dtype=bool)
    mask[2, 3:7] = True
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, 'mask.pgm')
        save_mask(mask, path)
        assert np.array_equal(load_mask(path), mask)


def test_invalid_phantoms_rejected():
    cfg = PalsConfig()
    with pytest.raises(ValueError, match="unknown"):
        rasterize_phantom('no-such-shape', _domain(25), 0, cfg)
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, 'small.pgm')
        save_mask(np.ones((10, 10), dtype=bool), path)
        with pytest.raises(ValueError, match="shape"):
            rasterize_phantom(path, _domain(25), 0, cfg)


def test_pixel_absorption_path():
    cfg = PalsConfig()
    domain = _domain(25)
    phantom = rasterize_phantom('amoeba', domain, 0, cfg)
    a1 = pixel_absorption_diagonal(phantom, domain)
    interior = domain.interior_mask()
    np.testing.assert_array_equal(a1[interior], domain.h ** 2 * phantom.absorption.ravel()[interior])
    assert np.all(a1[~interior] == 0.0)
    with pytest.raises(ValueError):
        pixel_absorption_diagonal(phantom, _domain(27))


def test_noise_level_calibration():
    clean = np.exp(1j * np.linspace(0.0, 3.0, 576)) * np.linspace(1.0, 2.0, 576)
    noisy = add_noise(clean, 0.001, 7, [0.5], 24).noisy
    ratio = np.linalg.norm(noisy - clean) / np.linalg.norm(clean)
    assert 0.0005 <= ratio <= 0.002

    ratios = [np.linalg.norm(add_noise(clean, 0.001, seed, [0.5], 24).noisy - clean) / np.linalg.norm(clean)
              for seed in range(100)]
    assert abs(np.mean(ratios) - 0.001) < 0.0001

    assert np.array_equal(add_noise(clean, 0.0, 7, [0.5], 24).noisy, clean)
    with pytest.raises(ValueError):
        add_noise(clean, -0.1, 7, [0.5], 24)


def test_static_entries_get_real_noise():
    n_det, n_src = 4, 3
    clean = np.ones(n_det * n_src * 2, dtype=complex)
    noisy = add_noise(clean, 0.01, 2, [0.0, 1.0], n_det).noisy
    static = (np.arange(clean.size) // n_det) % 2 == 0
    assert np.all(noisy[static].imag == 0.0)
    assert np.all(noisy[~static].imag != 0.0)


def test_simulated_measurements():
    domain = _domain()
    ops = assemble(domain, SourceDetectorLayout.uniform(domain, 24, 24))
    forward = ForwardSolver(ops, method='direct')
    phantom = rasterize_phantom('block-pair', domain, 0, PalsConfig())
    first, signal = simulate_measurements(phantom, forward, [0.0], 0.001, 1)
    second, _ = simulate_measurements(phantom, forward, [0.0], 0.001, 1)

    assert first.data.size == 576
    assert np.array_equal(first.data, second.data)
    assert first.grid_hash == ops.grid_hash
    assert np.all(first.data.imag == 0.0)
    ratio = np.linalg.norm(signal.noisy - signal.clean) / np.linalg.norm(signal.clean)
    assert 0.0005 <= ratio <= 0.002
    assert forward.counters.large_solves == 2 * 24

    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, 'measurements.bin')
        sidecar = save_measurements(path, first, metadata={'phantom': 'block-pair'})
        assert os.path.exists(sidecar)
        loaded = load_measurements(path, expected_hash=ops.grid_hash)
        assert np.array_equal(loaded.data, first.data)
        assert loaded.n_det == 24 and loaded.n_src == 24 and loaded.noise == 0.001
        assert load_measurement_metadata(path)['phantom'] == 'block-pair'
        with pytest.raises(BasisFormatError, match="hash"):
            load_measurements(path, expected_hash='0' * 64)


if __name__ == "__main__":
    exit_with_results("Phantoms and measurements", globals())

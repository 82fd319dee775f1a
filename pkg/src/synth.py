"""Synthetic Phantoms and Measurements

Ground-truth anomalies are drawn as 0-1 pixel masks, turned into absorption
maps with a small random variation inside the anomaly, and pushed through the
full-order model to produce noisy measurement sets. The data path builds A₁
straight from the pixel map, never through the level-set representation used
for reconstruction.
"""

import os
import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image, ImageDraw

from .errors import BasisFormatError
from .grid_forward import DomainSpec, ForwardSolver, stack_responses
from .inversion import MeasurementSet
from .pals import PalsConfig
from .utils import (load_graymap, load_json, payload_array, read_container, save_graymap,
                    save_json, write_container)

# Set up logging
logger = logging.getLogger(__name__)

MEASUREMENT_MAGIC = b'DOTMEAS1'
MEASUREMENT_VERSION = 1


def _scale(points: Sequence[Tuple[float, float]], width: int, height: int) -> List[Tuple[float, float]]:
    return [(u * (width - 1), v * (height - 1)) for u, v in points]


def _box(u0: float, v0: float, u1: float, v1: float, width: int, height: int) -> List[float]:
    (x0, y0), (x1, y1) = _scale([(u0, v0), (u1, v1)], width, height)
    return [x0, y0, x1, y1]


def _draw_block_pair(draw: ImageDraw.ImageDraw, width: int, height: int) -> None:
    draw.rectangle(_box(0.22, 0.30, 0.42, 0.48, width, height), fill=255)
    draw.rectangle(_box(0.58, 0.52, 0.78, 0.70, width, height), fill=255)


def _draw_triple_disc(draw: ImageDraw.ImageDraw, width: int, height: int) -> None:
    for cu, cv, radius in ((0.30, 0.35, 0.09), (0.68, 0.40, 0.11), (0.48, 0.68, 0.08)):
        draw.ellipse(_box(cu - radius, cv - radius, cu + radius, cv + radius, width, height), fill=255)


def _draw_cup(draw: ImageDraw.ImageDraw, width: int, height: int) -> None:
    outline = [(0.30, 0.35), (0.40, 0.35), (0.40, 0.60), (0.60, 0.60),
               (0.60, 0.35), (0.70, 0.35), (0.70, 0.70), (0.30, 0.70)]
    draw.polygon(_scale(outline, width, height), fill=255)


def _draw_amoeba(draw: ImageDraw.ImageDraw, width: int, height: int) -> None:
    angles = np.linspace(0.0, 2.0 * np.pi, 48, endpoint=False)
    radius = 0.16 + 0.05 * np.sin(3 * angles) + 0.03 * np.cos(5 * angles + 0.7)
    outline = [(0.5 + r * np.cos(t), 0.5 + 0.85 * r * np.sin(t)) for r, t in zip(radius, angles)]
    draw.polygon(_scale(outline, width, height), fill=255)


PRESETS: Dict[str, Callable[[ImageDraw.ImageDraw, int, int], None]] = {
    'block-pair': _draw_block_pair,
    'triple-disc': _draw_triple_disc,
    'cup': _draw_cup,
    'amoeba': _draw_amoeba,
}


def draw_preset(name: str, nx: int, nz: int) -> np.ndarray:
    """Rasterize a named anomaly preset at any resolution.

    Returns:
        Boolean nz×nx mask in picture orientation (row 0 is the top surface)
    """
    if name not in PRESETS:
        raise ValueError(f"unknown phantom preset '{name}', expected one of {sorted(PRESETS)}")
    img = Image.new('L', (nx, nz), 0)
    PRESETS[name](ImageDraw.Draw(img), nx, nz)
    return np.array(img, dtype=np.uint8) > 127


@dataclass
class Phantom:
    """Anomaly mask and per-node absorption map, both (nz, nx) in node order (row 0 = bottom)."""

    mask: np.ndarray
    absorption: np.ndarray
    seed: int
    shape: str

    @property
    def mask_fraction(self) -> float:
        return float(np.mean(self.mask))


@dataclass
class NoisySignal:
    clean: np.ndarray
    noise: float
    seed: int
    noisy: np.ndarray


def save_mask(mask: np.ndarray, filepath: str) -> None:
    """Write a node-order mask as a graymap (0 background, 255 anomaly), top row first."""
    save_graymap(np.flipud(np.asarray(mask, dtype=bool)).astype(np.uint8) * 255, filepath)


def load_mask(filepath: str) -> np.ndarray:
    """Read a graymap mask back into node order."""
    return np.flipud(load_graymap(filepath) > 127)


def rasterize_phantom(shape: str, domain: DomainSpec, seed: int, cfg: PalsConfig) -> Phantom:
    """Build the ground-truth absorption map.

    Off the mask μ = μ_out; on the mask μ ~ N(μ_in, (σ·μ_in)²), clipped positive.

    Args:
        shape: Preset name or path to a graymap mask file
        domain: Grid the phantom lives on
        seed: Random seed of the in-anomaly variation
        cfg: Supplies μ_in, μ_out and σ

    Returns:
        Phantom

    Raises:
        ValueError: Unknown preset or mask of the wrong size
    """
    if shape in PRESETS:
        mask = np.flipud(draw_preset(shape, domain.nx, domain.nz))
    elif os.path.isfile(shape):
        mask = load_mask(shape)
    else:
        raise ValueError(f"unknown phantom preset or mask file '{shape}'")
    if mask.shape != (domain.nz, domain.nx):
        raise ValueError(f"mask has shape {mask.shape}, grid needs {(domain.nz, domain.nx)}")

    rng = np.random.default_rng(seed)
    variation = rng.normal(cfg.mu_in, cfg.sigma * cfg.mu_in, size=mask.shape)
    inside = np.maximum(variation, np.finfo(float).tiny)
    absorption = np.where(mask, inside, cfg.mu_out)
    logger.info(f"Phantom '{shape}': {int(mask.sum())} anomaly pixels ({100 * mask.mean():.1f}%)")
    return Phantom(mask=np.ascontiguousarray(mask), absorption=absorption, seed=int(seed), shape=shape)


def pixel_absorption_diagonal(phantom: Phantom, domain: DomainSpec) -> np.ndarray:
    """A₁ taken directly from the pixel map: h² μ at PDE nodes."""
    if phantom.absorption.shape != (domain.nz, domain.nx):
        raise ValueError("phantom grid does not match the operators")
    return np.where(domain.interior_mask(), domain.h ** 2 * phantom.absorption.ravel(), 0.0)


def add_noise(clean: np.ndarray, noise: float, seed: int, frequencies: Sequence[float],
              n_det: int) -> NoisySignal:
    """White Gaussian noise of standard deviation noise·RMS(𝔻₀) per entry.

    Entries at ω = 0 are real and receive real noise; other entries get
    (g₁ + i g₂)/√2 so that E|e|² is the same for both.
    """
    clean = np.asarray(clean, dtype=complex)
    if noise < 0:
        raise ValueError("noise level must be non-negative")
    rng = np.random.default_rng(seed)
    std = noise * np.sqrt(np.mean(np.abs(clean) ** 2))
    g_real = rng.standard_normal(clean.size)
    g_imag = rng.standard_normal(clean.size)

    freqs = np.asarray(frequencies, dtype=float)
    entry_freq = freqs[(np.arange(clean.size) // n_det) % freqs.size]
    static = entry_freq == 0.0
    perturbation = np.where(static, g_real, (g_real + 1j * g_imag) / np.sqrt(2.0)) * std
    return NoisySignal(clean=clean, noise=float(noise), seed=int(seed), noisy=clean + perturbation)


def simulate_measurements(phantom: Phantom, forward: ForwardSolver, frequencies: Sequence[float],
                          noise: float, seed: int):
    """Full-order synthetic data with white noise.

    Args:
        phantom: Ground truth
        forward: Full-order solver on the phantom's grid
        frequencies: Experiment frequencies
        noise: Relative noise level (0.001 for 0.1%)
        seed: Noise seed

    Returns:
        Tuple of (MeasurementSet, NoisySignal)
    """
    ops = forward.ops
    a1 = pixel_absorption_diagonal(phantom, ops.domain)
    blocks = [forward.frequency_response(a1, omega) for omega in frequencies]
    clean = stack_responses(blocks)
    signal = add_noise(clean, noise, seed, frequencies, ops.n_det)
    measurements = MeasurementSet(frequencies=np.asarray(frequencies, dtype=float), data=signal.noisy,
                                  n_det=ops.n_det, n_src=ops.n_src, noise=float(noise),
                                  grid_hash=ops.grid_hash)
    logger.info(f"Simulated {clean.size} measurements at noise level {noise:g}")
    return measurements, signal


def _sidecar_path(filepath: str) -> str:
    return os.path.splitext(filepath)[0] + '.meta.json'


def save_measurements(filepath: str, measurements: MeasurementSet,
                      metadata: Optional[Dict] = None) -> str:
    """Write a measurement container plus its metadata sidecar.

    Returns:
        Path of the sidecar
    """
    header = {
        'magic': MEASUREMENT_MAGIC.decode('ascii'),
        'version': MEASUREMENT_VERSION,
        'n_det': measurements.n_det,
        'n_src': measurements.n_src,
        'frequencies': [float(w) for w in measurements.frequencies],
        'grid_hash': measurements.grid_hash,
        'noise': measurements.noise,
        'length': int(measurements.data.size),
        'dtype': '<c16',
    }
    write_container(filepath, MEASUREMENT_MAGIC, header, [measurements.data.astype('<c16')])
    sidecar = _sidecar_path(filepath)
    save_json({**(metadata or {}), 'grid_hash': measurements.grid_hash,
               'noise': measurements.noise}, sidecar)
    logger.info(f"Saved {measurements.data.size} measurements to {filepath}")
    return sidecar


def load_measurements(filepath: str, expected_hash: Optional[str] = None) -> MeasurementSet:
    """Read a measurement container.

    Raises:
        BasisFormatError: Corrupt container or grid hash mismatch
    """
    header, payload = read_container(filepath, MEASUREMENT_MAGIC)
    if header.get('version') != MEASUREMENT_VERSION:
        raise BasisFormatError(f"{filepath}: unsupported measurement version {header.get('version')}")
    if expected_hash is not None and header.get('grid_hash') != expected_hash:
        raise BasisFormatError(f"{filepath}: grid hash mismatch (data is for another mesh or layout)")
    data, offset = payload_array(payload, 0, (int(header['length']),), '<c16')
    if offset != len(payload):
        raise BasisFormatError(f"{filepath}: unexpected trailing bytes")
    return MeasurementSet(frequencies=np.asarray(header['frequencies'], dtype=float), data=data,
                          n_det=int(header['n_det']), n_src=int(header['n_src']),
                          noise=float(header['noise']), grid_hash=header['grid_hash'])


def load_measurement_metadata(filepath: str) -> Optional[Dict]:
    return load_json(_sidecar_path(filepath))

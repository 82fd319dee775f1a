"""Run Configuration

Dataclass sections for every stage of a reconstruction run, loaded from and
saved to JSON documents. Missing keys take the defaults below; unknown keys
are rejected.
"""

import os
import logging
from dataclasses import dataclass, field, fields, asdict
from typing import Any, Dict, List, Optional, Tuple

from .errors import ConfigValidationError
from .grid_forward import DomainSpec, SourceDetectorLayout, frequency_grid
from .linear_solvers import SOLVER_METHODS
from .pals import PalsConfig
from .utils import load_json, save_json

# Set up logging
logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
MODES = ('full', 'rom', 'rom-recycled')


@dataclass
class DomainConfig:
    half_width: float = 2.5
    half_height: float = 2.5
    nx: int = 50
    nz: int = 50
    speed_of_light: float = 1.0
    robin_constant: float = 1.0
    diffusion: float = 0.03


@dataclass
class LayoutConfig:
    n_src: int = 24
    n_det: int = 24
    footprint_half_width: int = 0


@dataclass
class PalsSettings:
    m0: int = 15
    epsilon: float = 0.1
    gamma: float = 1e-3
    level: float = 0.1
    mu_in: float = 0.2
    mu_out: float = 0.05
    sigma: float = 0.05
    initial_grid: List[int] = field(default_factory=lambda: [5, 3])
    initial_alpha: float = 0.25


@dataclass
class PhantomConfig:
    shape: str = 'block-pair'
    seed: int = 0


@dataclass
class NoiseConfig:
    level: float = 0.001
    seed: int = 1


@dataclass
class OptimizerOptions:
    max_iter: int = 200
    gtol: float = 1e-8
    ftol: float = 1e-10
    initial_radius: float = 1.0
    min_radius: float = 1e-14
    max_accepted: Optional[int] = None
    # stop once ‖r‖ <= discrepancy·noise·‖𝔻‖; 0 disables
    discrepancy: float = 0.0


@dataclass
class RomSettings:
    samples: int = 2
    tolerance: float = 1e-8
    two_sided: bool = False
    refresh_interval: int = 50


@dataclass
class SolverSettings:
    method: str = 'iterative'
    tolerance: float = 1e-10
    max_iterations: Optional[int] = None


@dataclass
class DiagnosticsSettings:
    enabled: bool = True
    hinf_points: int = 101
    full_misfit: bool = True


SECTIONS = {
    'domain': DomainConfig,
    'layout': LayoutConfig,
    'pals': PalsSettings,
    'phantom': PhantomConfig,
    'noise': NoiseConfig,
    'optimizer': OptimizerOptions,
    'rom': RomSettings,
    'solver': SolverSettings,
    'diagnostics': DiagnosticsSettings,
}


@dataclass
class RunConfig:
    """Complete, self-describing configuration of one experiment."""

    domain: DomainConfig = field(default_factory=DomainConfig)
    layout: LayoutConfig = field(default_factory=LayoutConfig)
    frequencies: List[float] = field(default_factory=lambda: [0.0])
    pals: PalsSettings = field(default_factory=PalsSettings)
    phantom: PhantomConfig = field(default_factory=PhantomConfig)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    optimizer: OptimizerOptions = field(default_factory=OptimizerOptions)
    rom: RomSettings = field(default_factory=RomSettings)
    solver: SolverSettings = field(default_factory=SolverSettings)
    diagnostics: DiagnosticsSettings = field(default_factory=DiagnosticsSettings)
    mode: str = 'rom'
    basis_path: Optional[str] = None
    output_dir: str = 'output'
    schema_version: int = SCHEMA_VERSION

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'RunConfig':
        """Build a config from a parsed document.

        Raises:
            ConfigValidationError: Unknown key, wrong schema version or invalid value
        """
        if not isinstance(data, dict):
            raise ConfigValidationError('<root>', "config must be a JSON object")
        known = {f.name for f in fields(cls)}
        for key in data:
            if key not in known:
                raise ConfigValidationError(key, "unknown key")

        version = data.get('schema_version', SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ConfigValidationError('schema_version', f"unsupported version {version}")

        kwargs: Dict[str, Any] = {}
        for name, section_cls in SECTIONS.items():
            section = data.get(name, {})
            if not isinstance(section, dict):
                raise ConfigValidationError(name, "section must be an object")
            section_known = {f.name for f in fields(section_cls)}
            for key in section:
                if key not in section_known:
                    raise ConfigValidationError(f"{name}.{key}", "unknown key")
            kwargs[name] = section_cls(**section)

        for name in ('frequencies', 'mode', 'basis_path', 'output_dir'):
            if name in data:
                kwargs[name] = data[name]
        config = cls(**kwargs)
        config.validate()
        return config

    def validate(self) -> None:
        """Cross-field checks; each failure names the offending field."""
        try:
            self.domain_spec()
        except (ValueError, TypeError) as e:
            raise ConfigValidationError('domain', str(e))
        try:
            frequency_grid(self.frequencies)
        except (ValueError, TypeError) as e:
            raise ConfigValidationError('frequencies', str(e))
        try:
            self.pals_config()
        except (ValueError, TypeError) as e:
            raise ConfigValidationError('pals', str(e))

        gx, gz = self.initial_grid
        if gx * gz != self.pals.m0:
            raise ConfigValidationError('pals.initial_grid', f"{gx}x{gz} does not hold m0 = {self.pals.m0}")
        if self.layout.n_src < 1 or self.layout.n_det < 1:
            raise ConfigValidationError('layout', "need at least one source and one detector")
        if self.layout.n_src + (self.layout.n_det + 1) // 2 > self.domain.nx - 2:
            raise ConfigValidationError('layout', "more sources and top detectors than top surface nodes")
        if self.mode not in MODES:
            raise ConfigValidationError('mode', f"expected one of {MODES}, got '{self.mode}'")
        if self.solver.method not in SOLVER_METHODS:
            raise ConfigValidationError('solver.method', f"expected one of {SOLVER_METHODS}")
        if not 0.0 <= self.noise.level < 1.0:
            raise ConfigValidationError('noise.level', "must lie in [0, 1)")
        if self.rom.samples < 1:
            raise ConfigValidationError('rom.samples', "need at least one sample")
        if self.rom.tolerance < 0:
            raise ConfigValidationError('rom.tolerance', "must be non-negative")
        if self.optimizer.initial_radius <= 0:
            raise ConfigValidationError('optimizer.initial_radius', "must be positive")
        if self.optimizer.discrepancy < 0:
            raise ConfigValidationError('optimizer.discrepancy', "must be non-negative")

    @property
    def initial_grid(self) -> Tuple[int, int]:
        gx, gz = self.pals.initial_grid
        return int(gx), int(gz)

    def domain_spec(self) -> DomainSpec:
        d = self.domain
        return DomainSpec(half_width=d.half_width, half_height=d.half_height, nx=d.nx, nz=d.nz,
                          speed_of_light=d.speed_of_light, robin_constant=d.robin_constant,
                          diffusion=d.diffusion)

    def layout_spec(self, domain: Optional[DomainSpec] = None) -> SourceDetectorLayout:
        domain = domain or self.domain_spec()
        return SourceDetectorLayout.uniform(domain, self.layout.n_src, self.layout.n_det,
                                            self.layout.footprint_half_width)

    def pals_config(self) -> PalsConfig:
        s = self.pals
        return PalsConfig(m0=s.m0, epsilon=s.epsilon, gamma=s.gamma, level=s.level,
                          mu_in=s.mu_in, mu_out=s.mu_out, sigma=s.sigma)

    def frequency_values(self) -> List[float]:
        return [float(w) for w in frequency_grid(self.frequencies)]


def apply_environment(config: RunConfig) -> RunConfig:
    """Fill defaults from DOT_OUTPUT_DIR and DOT_SOLVER_METHOD when the file left them unset."""
    output_dir = os.getenv('DOT_OUTPUT_DIR')
    if output_dir and config.output_dir == RunConfig.output_dir:
        config.output_dir = output_dir
    method = os.getenv('DOT_SOLVER_METHOD')
    if method and config.solver.method == SolverSettings.method:
        if method not in SOLVER_METHODS:
            raise ConfigValidationError('DOT_SOLVER_METHOD', f"expected one of {SOLVER_METHODS}")
        config.solver.method = method
    return config


def load_config(filepath: Optional[str]) -> RunConfig:
    """Load a config file, or the defaults when no path is given.

    Raises:
        OSError: File missing or unreadable
        ConfigValidationError: Invalid content
    """
    if filepath is None:
        config = RunConfig()
        config.validate()
        return config
    if not os.path.exists(filepath):
        raise FileNotFoundError(f"config file not found: {filepath}")
    data = load_json(filepath)
    if data is None:
        raise ConfigValidationError(filepath, "not a valid JSON document")
    logger.info(f"Loaded config from {filepath}")
    return RunConfig.from_dict(data)


def save_config(config: RunConfig, filepath: str) -> None:
    save_json(config.to_dict(), filepath)

"""Main CLI Application

Command-line interface for diffuse optical tomography reconstruction with
reduced-order forward models.
"""

import os
import sys
import argparse
import logging
from dataclasses import replace
from typing import Dict, List, Optional

import numpy as np
from dotenv import load_dotenv

from src.config import RunConfig, apply_environment, load_config, save_config
from src.counters import CostCounters
from src.diagnostics import gap_error_series
from src.errors import BasisFormatError, ConfigValidationError, PhaseError, SolverError
from src.grid_forward import ForwardSolver
from src.inversion import InversionTrace, build_operators, run_reconstruction, solve, FullBackend
from src.mor import basis_info, build_global_basis, load_basis, save_basis, verify_basis
from src.pals import initial_parameters, params_from_list
from src.report_generator import ReportGenerator, image_range
from src.synth import load_measurements, rasterize_phantom, save_measurements, simulate_measurements
from src.utils import load_json

# Load environment variables
load_dotenv()

# Set up logging
logging.basicConfig(
    level=os.getenv('DOT_LOG_LEVEL', 'INFO').upper(),
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
)
logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_VALIDATION = 2
EXIT_SOLVER = 3
EXIT_IO = 4
EXIT_INTERRUPTED = 130


def exit_code_for(error: BaseException) -> int:
    """Map an exception to the documented exit code."""
    if isinstance(error, PhaseError):
        return exit_code_for(error.cause)
    if isinstance(error, KeyboardInterrupt):
        return EXIT_INTERRUPTED
    if isinstance(error, ConfigValidationError):
        return EXIT_VALIDATION
    if isinstance(error, SolverError):
        return EXIT_SOLVER
    if isinstance(error, (BasisFormatError, OSError)):
        return EXIT_IO
    if isinstance(error, ValueError):
        return EXIT_VALIDATION
    return EXIT_FAILURE


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description='Reconstruct absorption images from diffuse optical tomography data',
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  python main.py generate --config configs/small-50.json --out runs/small
  python main.py invert --config configs/small-50.json --mode rom --out runs/small
  python main.py basis info runs/small/basis.bin
  python main.py diagnose runs/small/trace.json --config configs/small-50.json
        """
    )

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', help='Run configuration (JSON); defaults are used when omitted')
    common.add_argument('--seed', type=int,
                        help='Phantom seed; the noise seed becomes seed + 1')
    common.add_argument('--phantom', help='Phantom preset or mask file (overrides the config)')
    common.add_argument('--out', help='Output directory (default: config output_dir or DOT_OUTPUT_DIR)')
    common.add_argument('--verbose', action='store_true', help='Enable verbose logging')

    commands = parser.add_subparsers(dest='command', required=True)

    commands.add_parser('generate', parents=[common],
                        help='Rasterize the phantom and simulate noisy measurements')

    invert = commands.add_parser('invert', parents=[common], help='Reconstruct from measurements')
    invert.add_argument('--mode', choices=['full', 'rom', 'rom-recycled'],
                        help='Forward model used during optimization')
    invert.add_argument('--basis', help='Preloaded reduction basis')
    invert.add_argument('--measurements',
                        help='Measurement container (default: <out>/measurements.bin)')

    basis = commands.add_parser('basis', help='Build, inspect or verify reduction bases')
    basis_commands = basis.add_subparsers(dest='action', required=True)
    build = basis_commands.add_parser('build', parents=[common],
                                      help='Build a basis from parameter sample files')
    build.add_argument('samples', nargs='*',
                       help='JSON files holding parameter vectors; warm start when omitted')
    build.add_argument('--basis', help='Destination (default: <out>/basis.bin)')
    info = basis_commands.add_parser('info', parents=[common], help='Print a basis header')
    info.add_argument('path')
    verify = basis_commands.add_parser('verify', parents=[common],
                                       help='Check orthonormality and grid hash')
    verify.add_argument('path')

    diagnose = commands.add_parser('diagnose', parents=[common],
                                   help='Subspace-gap and error-ratio series of inversion traces')
    diagnose.add_argument('traces', nargs='+')
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Config file, then environment defaults, then command-line flags."""
    config = apply_environment(load_config(args.config))
    if getattr(args, 'mode', None):
        config.mode = args.mode
    if getattr(args, 'basis', None) and args.command == 'invert':
        config.basis_path = args.basis
    if args.phantom:
        config.phantom.shape = args.phantom
    if args.seed is not None:
        config.phantom.seed = args.seed
        config.noise.seed = args.seed + 1
    if args.out:
        config.output_dir = args.out
    config.validate()
    return config


def make_forward(config: RunConfig, ops, counters: Optional[CostCounters] = None) -> ForwardSolver:
    return ForwardSolver(ops, method=config.solver.method, tolerance=config.solver.tolerance,
                         max_iterations=config.solver.max_iterations, counters=counters)


def cmd_generate(config: RunConfig) -> Dict[str, str]:
    """Write the phantom mask, truth image and noisy measurement set."""
    ops = build_operators(config)
    cfg = config.pals_config()
    forward = make_forward(config, ops)
    frequencies = config.frequency_values()

    phantom = rasterize_phantom(config.phantom.shape, ops.domain, config.phantom.seed, cfg)
    measurements, signal = simulate_measurements(phantom, forward, frequencies,
                                                 config.noise.level, config.noise.seed)

    generator = ReportGenerator(config.output_dir)
    paths = generator.write_phantom(phantom, *image_range(cfg.mu_in, cfg.mu_out))
    paths['measurements'] = os.path.join(config.output_dir, 'measurements.bin')
    metadata = {
        'phantom': config.phantom.shape,
        'phantom_seed': config.phantom.seed,
        'noise_seed': config.noise.seed,
        'mask_fraction': phantom.mask_fraction,
        'clean_norm': float(np.linalg.norm(signal.clean)),
        'noise_norm': float(np.linalg.norm(signal.noisy - signal.clean)),
        'length': int(measurements.data.size),
        'large_solves': forward.counters.large_solves,
    }
    paths['metadata'] = save_measurements(paths['measurements'], measurements, metadata)
    paths['config'] = os.path.join(config.output_dir, 'config.json')
    save_config(config, paths['config'])
    return paths


def cmd_invert(config: RunConfig, measurements_path: Optional[str] = None):
    """Run the reconstruction and write images, report and diagnostic series."""
    ops = build_operators(config)
    measurements_path = measurements_path or os.path.join(config.output_dir, 'measurements.bin')
    data = load_measurements(measurements_path, expected_hash=ops.grid_hash)

    basis = None
    if config.basis_path and config.mode in ('rom', 'rom-recycled'):
        basis = load_basis(config.basis_path, expected_hash=ops.grid_hash)

    report = run_reconstruction(config, data, basis=basis, ops=ops)
    cfg = config.pals_config()
    generator = ReportGenerator(config.output_dir)

    if config.diagnostics.enabled and config.mode != 'full' and report.trace is not None:
        # diagnostic solves are kept off the inversion counters
        forward = make_forward(config, ops, CostCounters())
        series = gap_error_series(forward, cfg, report.trace, config.frequency_values(),
                                  tolerance=config.rom.tolerance,
                                  hinf_points=config.diagnostics.hinf_points)
        report.paths.update(generator.write_diagnostics(series))

    paths = generator.write_reconstruction(report, *image_range(cfg.mu_in, cfg.mu_out))
    return report, paths


def _warm_start_samples(config: RunConfig, ops, forward: ForwardSolver) -> List[np.ndarray]:
    """First K iterates of a full-model run on the configured phantom."""
    cfg = config.pals_config()
    frequencies = config.frequency_values()
    phantom = rasterize_phantom(config.phantom.shape, ops.domain, config.phantom.seed, cfg)
    data, _ = simulate_measurements(phantom, forward, frequencies, config.noise.level, config.noise.seed)
    p0 = initial_parameters(cfg, ops.domain, config.initial_grid, alpha=config.pals.initial_alpha)
    options = replace(config.optimizer, max_accepted=config.rom.samples - 1)
    _, trace = solve(FullBackend(forward, cfg, frequencies), p0, data, options)
    return trace.accepted_iterates()[:config.rom.samples]


def cmd_basis(action: str, config: RunConfig, paths: List[str],
              destination: Optional[str] = None) -> Dict:
    """Build, inspect or verify a reduction basis."""
    if action == 'info':
        return basis_info(paths[0])

    ops = build_operators(config)
    if action == 'verify':
        return verify_basis(paths[0], ops)

    cfg = config.pals_config()
    forward = make_forward(config, ops)
    if paths:
        samples = []
        for path in paths:
            values = load_json(path)
            if values is None:
                raise OSError(f"could not read parameter sample {path}")
            samples.append(params_from_list(values, cfg.m0))
    else:
        samples = _warm_start_samples(config, ops, forward)

    basis = build_global_basis(forward, cfg, samples, config.frequency_values(),
                               tolerance=config.rom.tolerance, two_sided=config.rom.two_sided)
    destination = destination or os.path.join(config.output_dir, 'basis.bin')
    save_basis(destination, basis)
    return {'path': destination, 'r': basis.r, 'n': basis.n, 'samples': len(samples),
            'large_solves': forward.counters.large_solves}


def cmd_diagnose(config: RunConfig, trace_paths: List[str]) -> List[str]:
    """Write one gap/error-ratio series per trace."""
    ops = build_operators(config)
    cfg = config.pals_config()
    generator = ReportGenerator(config.output_dir)
    written = []
    for path in trace_paths:
        trace = InversionTrace.load(path)
        forward = make_forward(config, ops, CostCounters())
        series = gap_error_series(forward, cfg, trace, config.frequency_values(),
                                  tolerance=config.rom.tolerance,
                                  hinf_points=config.diagnostics.hinf_points)
        stem = os.path.splitext(os.path.basename(path))[0]
        written.append(generator.write_diagnostics(series, name=f"diagnostics-{stem}")['series'])
    return written


def run(args: argparse.Namespace) -> int:
    config = resolve_config(args)

    if args.command == 'generate':
        print(f"🧪 Generating synthetic data ({config.phantom.shape}, seed {config.phantom.seed})")
        paths = cmd_generate(config)
        print(f"✅ Measurements written to {paths['measurements']}")
        print(f"🖼️  Mask: {paths['mask']}")

    elif args.command == 'invert':
        print(f"🚀 Reconstructing ({config.mode} mode)")
        print(f"📁 Output Directory: {config.output_dir}\n")
        report, paths = cmd_invert(config, args.measurements)
        counters = report.counters
        print("\n" + "=" * 60)
        print("🎉 RECONSTRUCTION COMPLETE!")
        print("=" * 60)
        print(f"📉 Relative misfit: {report.initial_misfit:.3e} -> {report.final_misfit:.3e}")
        print(f"🧮 Large solves: {counters['large_solves']}, reduced solves: {counters['reduced_solves']}")
        if report.offline_online_ratio is not None:
            print(f"⚖️  (K_fun + K_Jac)/(2K): {report.offline_online_ratio:.3f}")
        print(f"\n📁 Generated Files:")
        for key in sorted(paths):
            print(f"   • {paths[key]}")

    elif args.command == 'basis':
        if args.action == 'build':
            result = cmd_basis('build', config, args.samples, args.basis)
        else:
            result = cmd_basis(args.action, config, [args.path])
        if args.action == 'build':
            print(f"✅ Basis with r = {result['r']} saved to {result['path']}")
        elif args.action == 'verify':
            print(f"✅ Basis verified (r = {result['r']}, orthonormality error "
                  f"{max(result['orthonormality_error'].values()):.2e})")
        else:
            for key in sorted(result):
                if key != 'singular_values':
                    print(f"{key}: {result[key]}")

    elif args.command == 'diagnose':
        for path in cmd_diagnose(config, args.traces):
            print(f"📈 Series written to {path}")

    return EXIT_OK


def main(argv: Optional[List[str]] = None) -> int:
    """Main application entry point."""
    parser = build_parser()
    args = parser.parse_args(argv)

    if args.verbose:
        logging.getLogger().setLevel(logging.DEBUG)

    try:
        return run(args)
    except KeyboardInterrupt:
        print("\n❌ Process interrupted by user")
        return EXIT_INTERRUPTED
    except Exception as e:
        code = exit_code_for(e)
        logger.error(f"Error during processing: {e}", exc_info=code == EXIT_FAILURE)
        print(f"\n❌ Error occurred: {str(e)}")
        return code


if __name__ == "__main__":
    sys.exit(main())

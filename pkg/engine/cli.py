#!/usr/bin/env python3
"""
Command-line entry point.

    python cli.py simulate --transducer H131 --medium water --power 50 --harmonics 5 --out run1
    python cli.py plan --transducer H131 --medium water --harmonics 5
    python cli.py converge quadrature --medium liver --nw-values 4 6 8 --nw-ref 12
    python cli.py validate

Exit codes: 0 success, 1 configuration error, 2 runtime or numerical error.
"""
import argparse
import dataclasses
import hashlib
import json
import logging
import math
import os
import platform
import sys
from contextlib import contextmanager
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, Iterator, List, Literal, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError
from dotenv import load_dotenv

from config import (ConfigError, configure_logging, format_validation_error, get_data_config, get_grid_config,
                    get_solver_config, read_json_config, validate_distance, validate_harmonic_params,
                    validate_power)

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


# --- 1. RUN CONFIGURATION ---

class SlabConfig(BaseModel):
    """Axis-normal layer for the inhomogeneous mode."""
    model_config = ConfigDict(extra='forbid')
    medium: Union[str, Dict[str, Any]] = 'kidney'
    centre_x: float
    thickness: float = Field(gt=0)


class RunConfig(BaseModel):
    model_config = ConfigDict(extra='forbid')

    transducer: Union[str, Dict[str, Any]] = 'H131'
    medium: Union[str, Dict[str, Any]] = 'water'
    power: float = Field(default=100.0, ge=0)
    harmonics: int = Field(default=5, ge=1)
    n_w: float = Field(default=6, ge=1)
    d: Optional[float] = Field(default=None, ge=0)
    f0: Optional[float] = Field(default=None, gt=0)
    n_points: Optional[int] = Field(default=None, ge=1)
    mode: Literal['homogeneous', 'vie'] = 'homogeneous'
    medium_map: Optional[str] = None
    slab: Optional[SlabConfig] = None
    fractions: Optional[Union[str, Dict[str, Any]]] = None
    out: str = Field(default_factory=lambda: get_data_config()['output_dir'])
    threads: Optional[int] = Field(default=None, ge=1)
    dump_fields: bool = False
    vie_tol: Optional[float] = Field(default=None, gt=0)


def validate_run_config(config: RunConfig) -> None:
    """Cross-field checks and resolvability; raises ConfigError."""
    checks = [
        validate_harmonic_params(config.harmonics, config.n_w),
        validate_power(config.power),
        validate_distance(config.d if config.d is not None else get_grid_config()['post_focal_distance']),
    ]
    errors = [message for ok, message in checks if not ok]
    if config.mode == 'vie' and config.medium_map is None and config.slab is None:
        errors.append("mode 'vie' needs --medium-map or a slab definition")
    if config.mode == 'homogeneous' and (config.medium_map or config.slab):
        errors.append("a medium map is only used with --mode vie")

    out = Path(config.out).resolve()
    parent = next((p for p in [out, *out.parents] if p.exists()), None)
    if parent is None or not os.access(parent, os.W_OK):
        errors.append(f"output directory {config.out} is not writable")

    if errors:
        raise ConfigError('\n'.join(errors))


def resolve_inputs(config: RunConfig):
    """Resolve presets and files into (transducer, medium, layer medium or None)."""
    from medium import resolve_medium
    from transducer import resolve_transducer

    try:
        transducer = resolve_transducer(config.transducer, power=config.power, n_points=config.n_points)
        if config.f0 is not None:
            transducer = dataclasses.replace(transducer, f0=config.f0)
        medium = resolve_medium(config.medium)
        layer = resolve_medium(config.slab.medium) if config.slab else None
    except ValueError as e:
        raise e if isinstance(e, ConfigError) else ConfigError(str(e))

    if config.medium_map and not Path(config.medium_map).exists():
        raise ConfigError(f"Medium map not found: {config.medium_map}")
    if config.fractions is not None:
        from grid import plan_nested_meshes
        try:
            plan_nested_meshes(transducer, medium, config.d, config.n_w, max(2, config.harmonics), config.fractions)
        except (KeyError, ValueError) as e:
            raise e if isinstance(e, ConfigError) else ConfigError(str(e))
    return transducer, medium, layer


def load_run_config(path: str) -> RunConfig:
    data, source = read_json_config(path)
    return run_config_from_dict(data, source)


def run_config_from_dict(data: Dict[str, Any], source: str = '<config>') -> RunConfig:
    try:
        return RunConfig(**data)
    except ValidationError as e:
        raise ConfigError(format_validation_error(source, e))


def config_from_manifest(path: str) -> RunConfig:
    data, source = read_json_config(path)
    if 'inputs' not in data:
        raise ConfigError(f"{source}: not a run manifest (no 'inputs')")
    return run_config_from_dict(data['inputs'], source)


# --- 2. OUTPUT WRITERS ---

def sha256_file(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, 'rb') as f:
        for block in iter(lambda: f.read(1 << 20), b''):
            digest.update(block)
    return digest.hexdigest()


def library_versions() -> Dict[str, str]:
    import pandas
    import pydantic
    import scipy
    import sklearn
    return {
        'python': platform.python_version(), 'numpy': np.__version__, 'scipy': scipy.__version__,
        'pandas': pandas.__version__, 'scikit-learn': sklearn.__version__, 'pydantic': pydantic.__version__,
    }


def write_axis_csv(profile, out_dir: Path) -> Path:
    path = out_dir / f"axis_p{profile.harmonic_index}.csv"
    profile.to_frame().to_csv(path, index=False, float_format='%.10e')
    return path


def write_field_dump(field, out_dir: Path) -> List[Path]:
    """Little-endian complex128 values in x-fastest order plus a JSON header."""
    n = field.harmonic_index
    data_path = out_dir / f"field_p{n}.bin"
    header_path = out_dir / f"field_p{n}.json"
    field.values.astype('<c16').ravel(order='F').tofile(data_path)

    k = field.wavenumber.k if field.wavenumber is not None else complex('nan')
    header = {
        'dims': list(field.grid.dims), 'delta_x': field.grid.delta_x, 'origin': list(field.grid.origin),
        'harmonic_index': n, 'wavenumber': {'re': k.real, 'im': k.imag},
        'dtype': 'complex128-le', 'order': 'x-fastest', 'data_file': data_path.name,
    }
    header_path.write_text(json.dumps(header, indent=2), encoding=get_data_config()['encoding'])
    return [data_path, header_path]


def write_manifest(out_dir: Path, config: RunConfig, outputs: List[Path], extra: Optional[Dict] = None) -> Path:
    manifest = {
        'utc': datetime.now(timezone.utc).strftime('%Y-%m-%dT%H:%M:%SZ'),
        'command': ' '.join(sys.argv),
        'inputs': config.model_dump(),
        'versions': library_versions(),
        'seed': None,
        'threads': get_solver_config()['threads'],
        'outputs': {p.name: sha256_file(p) for p in outputs},
        **(extra or {}),
    }
    path = out_dir / 'manifest.json'
    path.write_text(json.dumps(manifest, indent=2, default=str), encoding=get_data_config()['encoding'])
    return path


@contextmanager
def scoped_threads(threads: Optional[int]) -> Iterator[None]:
    """Set FUS_THREADS for the duration of one command; --threads wins over the environment."""
    previous = os.environ.get('FUS_THREADS')
    if threads is not None:
        os.environ['FUS_THREADS'] = str(threads)
    try:
        yield
    finally:
        if previous is None:
            os.environ.pop('FUS_THREADS', None)
        else:
            os.environ['FUS_THREADS'] = previous


# --- 3. COMMANDS ---

def cmd_simulate(config: RunConfig) -> List[Path]:
    """Run the cascade and write axis CSVs, optional dumps, plan, timings and manifest."""
    from analysis import on_axis_profile, OnAxisProfile
    from cascade import CascadeConfig, run_cascade
    from grid import VoxelGrid, plan_nested_meshes, reference_domain
    from transducer import IncidentField

    validate_run_config(config)
    transducer, medium, layer = resolve_inputs(config)
    out_dir = Path(config.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    outputs: List[Path] = []

    logger.info(f"🚀 Simulating {config.harmonics} harmonic(s): {transducer.name} at {transducer.power} W "
                f"in {medium.name}")
    incident = IncidentField(transducer, medium, threads=get_solver_config()['threads'])

    if config.harmonics == 1:
        domain = reference_domain(transducer, config.d)
        grid = VoxelGrid.anchored(domain, medium.c0 / (transducer.f0 * config.n_w), 1, tuple(transducer.focus))
        x = grid.axis_centres(0)
        outputs.append(write_axis_csv(OnAxisProfile(x, incident.on_axis(x), 1), out_dir))
        outputs.append(write_manifest(out_dir, config, outputs, {'normalization': incident.normalization}))
        return outputs

    plan = plan_nested_meshes(transducer, medium, config.d, config.n_w, config.harmonics, config.fractions)
    plan_txt, plan_json = out_dir / 'plan.txt', out_dir / 'plan.json'
    plan_txt.write_text(plan.report() + '\n', encoding=get_data_config()['encoding'])
    plan_json.write_text(json.dumps(plan.to_dict(), indent=2), encoding=get_data_config()['encoding'])
    outputs += [plan_txt, plan_json]

    cascade_config = CascadeConfig(medium, transducer, plan, config.harmonics,
                                   record_fields=config.dump_fields, threads=config.threads)
    if config.mode == 'vie':
        from vie import MediumMap, load_medium_map, run_cascade_inhomogeneous
        if config.medium_map:
            medium_map = load_medium_map(config.medium_map, background=medium)
        else:
            medium_map = MediumMap.from_slab(medium, layer, plan.grid(2), config.slab.centre_x,
                                             config.slab.thickness)
        result = run_cascade_inhomogeneous(cascade_config, medium_map, incident, tol=config.vie_tol)
    else:
        result = run_cascade(cascade_config, incident)

    for field in result.fields:
        if cascade_config.record_axis:
            outputs.append(write_axis_csv(on_axis_profile(field), out_dir))
        if cascade_config.record_fields:
            outputs += write_field_dump(field, out_dir)

    timings_path = out_dir / 'timings.csv'
    result.timing_frame().to_csv(timings_path, index=False)
    outputs.append(timings_path)

    extra = {'normalization': incident.normalization, 'peak_pressure': result.peak_pressure}
    if result.solver_info:
        extra['solver'] = {str(k): v for k, v in result.solver_info.items()}
    outputs.append(write_manifest(out_dir, config, outputs, extra))
    logger.info(f"✅ Wrote {len(outputs)} files to {out_dir}")
    return outputs


def cmd_plan(config: RunConfig, as_json: bool = False) -> str:
    """Mesh-plan report for the configuration."""
    from grid import plan_nested_meshes

    validate_run_config(config)
    transducer, medium, _ = resolve_inputs(config)
    if config.harmonics < 2:
        raise ConfigError("A mesh plan needs at least 2 harmonics")
    plan = plan_nested_meshes(transducer, medium, config.d, config.n_w, config.harmonics, config.fractions)
    text = json.dumps(plan.to_dict(), indent=2) if as_json else plan.report()
    print(text)
    return text


def cmd_converge(config: RunConfig, study: str, n_w_values: Optional[List[float]] = None,
                 n_w_ref: float = 20, box_length: Optional[float] = None,
                 box_width: Optional[float] = None, taper: float = 0.0) -> List[Path]:
    """Run a convergence study and write its records, plot data and manifest."""
    from analysis import (domain_shrink_study, one_percent_fractions, quadrature_convergence_study,
                          write_records)
    from cascade import CascadeConfig
    from grid import DomainBox, plan_nested_meshes

    validate_run_config(config)
    transducer, medium, _ = resolve_inputs(config)
    out_dir = Path(config.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    extra: Dict[str, Any] = {'study': study}

    if study == 'quadrature':
        domain = None
        if box_length is not None:
            l = transducer.focal_length
            half_width = box_width / 2 if box_width else transducer.outer_radius
            domain = DomainBox.axial(l - box_length / 2, l + box_length / 2, half_width)
        result = quadrature_convergence_study(transducer, medium, n_w_values or [4, 6, 8, 10], n_w_ref,
                                              domain=domain, d=config.d, taper=taper)
        records = result.records
        extra.update({'slope': result.slope, 'intercept': result.intercept, 'n_w_ref': n_w_ref})
        print(f"📈 Fitted log-log slope: {result.slope:.3f}")
    elif study == 'domain':
        n = max(2, config.harmonics)
        plan = plan_nested_meshes(transducer, medium, config.d, config.n_w, n)
        records = domain_shrink_study(CascadeConfig(medium, transducer, plan, n))
        extra['one_percent_fractions'] = one_percent_fractions(records)
        print(f"📐 1% fractions: {extra['one_percent_fractions']}")
    else:
        raise ConfigError(f"Unknown study '{study}' (expected quadrature or domain)")

    outputs = write_records(records, out_dir, study)
    outputs.append(write_manifest(out_dir, config, outputs, extra))
    return outputs


def cmd_validate() -> bool:
    """Fast self-check of the core invariants; prints a pass/fail line per check."""
    from grid import VoxelGrid, DomainBox, HarmonicField, interpolate, plan_nested_meshes
    from medium import complex_wavenumber, medium_preset
    from potential import GreenKernel, apply_potential, direct_potential_oracle, green_function, self_weight
    from transducer import IncidentField, distribute_points, normalize_to_power, transducer_preset
    from vie import MediumMap, vie_operator_apply

    rng = np.random.default_rng(0)
    water = medium_preset('water')
    small = VoxelGrid.anchored(DomainBox.axial(-4e-4, 4e-4, 3e-4), 1e-4, 2)

    def wavenumber_linearity():
        k1, k5 = (complex_wavenumber(water, 1.1e6, n) for n in (1, 5))
        return math.isclose(k5.k.real, 5 * k1.k.real, rel_tol=1e-14)

    def self_weight_limit():
        a = 1e-3 * (3 / (4 * math.pi)) ** (1 / 3)
        return math.isclose(self_weight(0, 1e-3).real, a * a / 2, rel_tol=1e-12)

    def green_reciprocity():
        x, y = rng.normal(size=3), rng.normal(size=3)
        return green_function(x, y, 3 + 0.1j) == green_function(y, x, 3 + 0.1j)

    def fft_direct_equivalence():
        k = complex_wavenumber(water, 1e6, 2)
        f = HarmonicField(small, rng.normal(size=small.dims) + 1j * rng.normal(size=small.dims))
        fast = apply_potential(GreenKernel.for_grid(k, small), f).values
        slow = direct_potential_oracle(k, small, f).values
        return np.abs(fast - slow).max() / np.abs(slow).max() < 1e-12

    def sphere_membership():
        l, R = 0.035, 0.0165
        points = distribute_points(l, R, 512)
        radii = np.linalg.norm(points - np.array([l, 0, 0]), axis=1)
        return len(points) == 512 and np.abs(radii - l).max() <= 1e-12 * l

    def plan_reduction():
        plan = plan_nested_meshes(transducer_preset('H131'), water, 10.2e-3, 6, 5, 'h131-water-100w')
        return 28 <= plan.reduction_factors()[2] <= 32

    def normalization_idempotent():
        incident = IncidentField(transducer_preset('H131', power=10.0, n_points=64), water,
                                 disc_spacing=1e-3)
        once = normalize_to_power(incident.disc_field(), incident.transducer, water)
        twice = normalize_to_power(once, incident.transducer, water)
        return np.allclose(once.values, twice.values, rtol=1e-12, atol=0)

    def vie_identity():
        k = complex_wavenumber(water, 1e6, 1)
        field = HarmonicField(small, rng.normal(size=small.dims) + 0j, k)
        out = vie_operator_apply(field, MediumMap.homogeneous(water, small), GreenKernel.for_grid(k, small))
        return np.array_equal(out.values, field.values)

    def interpolation_identity():
        field = HarmonicField(small, rng.normal(size=small.dims) + 1j)
        return np.array_equal(interpolate(field, small).values, field.values)

    checks = [wavenumber_linearity, self_weight_limit, green_reciprocity, fft_direct_equivalence,
              sphere_membership, plan_reduction, normalization_idempotent, vie_identity, interpolation_identity]
    passed = 0
    for check in checks:
        try:
            ok = bool(check())
        except Exception as e:
            logger.error(f"{check.__name__} raised {e}", exc_info=True)
            ok = False
        passed += ok
        print(f"{'✅' if ok else '❌'} {check.__name__}")
    print(f"\n{passed}/{len(checks)} invariant checks passed")
    return passed == len(checks)


# --- 4. ARGUMENT PARSING ---

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', help='JSON run configuration; flags override its values')
    common.add_argument('--from-manifest', help='Re-run the inputs recorded in a manifest.json')
    common.add_argument('--transducer', help='Preset name (H101, H131) or transducer JSON file')
    common.add_argument('--medium', help='Preset name (water, liver, kidney) or medium JSON file')
    common.add_argument('--power', type=float, help='Radiated power (W)')
    common.add_argument('--harmonics', type=int, help='Number of harmonics including p1')
    common.add_argument('--nw', dest='n_w', type=float, help='Voxels per wavelength of each harmonic')
    common.add_argument('--d', type=float, help='Post-focal distance (m)')
    common.add_argument('--f0', type=float, help='Override the transducer frequency (Hz)')
    common.add_argument('--n-points', type=int, help='Monopoles on the bowl')
    common.add_argument('--fractions', help='Domain-fraction preset instead of the rule of thumb')
    common.add_argument('--mode', choices=['homogeneous', 'vie'])
    common.add_argument('--medium-map', help='Raster header (JSON) of the inhomogeneous medium')
    common.add_argument('--slab', nargs=3, metavar=('MEDIUM', 'CENTRE_X', 'THICKNESS'),
                        help='Axis-normal layer for --mode vie')
    common.add_argument('--vie-tol', type=float, help='GMRES relative residual tolerance')
    common.add_argument('--out', help='Output directory')
    common.add_argument('--threads', type=int, help='FFT and evaluation threads (overrides FUS_THREADS)')
    common.add_argument('--dump-fields', action='store_true', default=None, help='Write 3D field dumps')
    common.add_argument('--log-level', default=None, help='DEBUG, INFO, WARNING or ERROR')

    parser = argparse.ArgumentParser(description='Harmonics of a focused ultrasound field on nested meshes')
    sub = parser.add_subparsers(dest='command', required=True)
    sub.add_parser('simulate', parents=[common], help='Compute the harmonics and write outputs')
    plan = sub.add_parser('plan', parents=[common], help='Print the nested mesh plan')
    plan.add_argument('--json', action='store_true', help='Print the plan as JSON')
    converge = sub.add_parser('converge', parents=[common], help='Run a convergence study')
    converge.add_argument('study', choices=['quadrature', 'domain'])
    converge.add_argument('--nw-values', type=float, nargs='+', default=[4, 6, 8, 10])
    converge.add_argument('--nw-ref', type=float, default=20)
    converge.add_argument('--box-length', type=float, help='Quadrature study: x-length of a box about the focus (m)')
    converge.add_argument('--box-width', type=float, help='Quadrature study: y/z width of that box (m)')
    converge.add_argument('--taper', type=float, default=0.0,
                          help='Quadrature study: window the source to zero this close to the box faces (m)')
    sub.add_parser('validate', parents=[common], help='Run the invariant self-check')
    return parser


_FLAG_FIELDS = ('transducer', 'medium', 'power', 'harmonics', 'n_w', 'd', 'f0', 'n_points', 'fractions',
                'mode', 'medium_map', 'vie_tol', 'out', 'threads', 'dump_fields')


def run_config_from_args(args: argparse.Namespace) -> RunConfig:
    data: Dict[str, Any] = {}
    if args.from_manifest:
        data = config_from_manifest(args.from_manifest).model_dump()
    if args.config:
        config_data, source = read_json_config(args.config)
        if not isinstance(config_data, dict):
            raise ConfigError(f"{source}: run config must be a JSON object")
        data.update(config_data)
    for name in _FLAG_FIELDS:
        value = getattr(args, name, None)
        if value is not None:
            data[name] = value
    if args.slab:
        try:
            data['slab'] = {'medium': args.slab[0], 'centre_x': float(args.slab[1]),
                            'thickness': float(args.slab[2])}
        except ValueError:
            raise ConfigError(f"--slab: CENTRE_X and THICKNESS must be numbers, got {args.slab[1:]}")
    return run_config_from_dict(data, args.config or args.from_manifest or '<flags>')


def main(argv: Optional[List[str]] = None) -> int:
    load_dotenv()
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level)

    try:
        if args.command == 'validate':
            return EXIT_OK if cmd_validate() else EXIT_RUNTIME
        config = run_config_from_args(args)
        with scoped_threads(config.threads):
            if args.command == 'simulate':
                cmd_simulate(config)
            elif args.command == 'plan':
                cmd_plan(config, as_json=args.json)
            elif args.command == 'converge':
                cmd_converge(config, args.study, args.nw_values, args.nw_ref, args.box_length, args.box_width,
                             args.taper)
        return EXIT_OK
    except ConfigError as e:
        logger.error(f"❌ Configuration error:\n{e}")
        return EXIT_CONFIG
    except Exception as e:
        logger.error(f"❌ {args.command} failed: {e}", exc_info=True)
        return EXIT_RUNTIME


if __name__ == '__main__':
    sys.exit(main())

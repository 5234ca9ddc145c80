"""
Configuration file for the harmonic FUS solver.
Adjust these settings based on your workstation and accuracy needs.
"""
import json
import logging
import os
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

from dotenv import load_dotenv

load_dotenv()

logger = logging.getLogger(__name__)

BASE_DIR = Path(__file__).resolve().parent.parent


class ConfigError(ValueError):
    """Raised for unresolvable presets and invalid configuration files."""


# Solver Configuration
SOLVER_CONFIG = {
    'fast_fft_sizes': False,     # Pad circulant embedding to 5-smooth sizes
    'threads': 1,                # FFT workers (overridden by FUS_THREADS / --threads)
    'direct_oracle_max_voxels': 100_000,
    'kernel_cache_size': 2,      # kernels (with their DFTs) kept between harmonics
}

# Grid Configuration
GRID_CONFIG = {
    'voxels_per_wavelength': 6,      # n_w, ~1% quadrature error
    'post_focal_distance': 10.2e-3,  # d (m), reproduces the 4.1 cm H131 domain
    'standoff': 1e-4,                # epsilon (m) between bowl and domain
    'interpolation_order': 1,        # 1 = trilinear, 2 = quadratic spline
    'bytes_per_value': 16,           # complex double
}

# Transducer Configuration
TRANSDUCER_CONFIG = {
    'n_points': 4096,                  # monopoles on the bowl
    'disc_standoff_wavelengths': 0.0,  # power disc offset from the rim plane
    'disc_points_per_wavelength': 12,  # polar midpoint sampling of the disc
    'eval_chunk_pairs': 4_000_000,     # eval points x sources per numpy chunk
    'coincidence_tolerance': 1e-12,    # m
}

# Cascade Configuration
CASCADE_CONFIG = {
    'peak_pressure_limit': 15e6,  # Pa, weakly nonlinear regime
    'recompute_p1': False,        # evaluate p1 from the sources on every mesh
}

# VIE Configuration
VIE_CONFIG = {
    'tol': 1e-6,
    'restart': 30,
    'max_iter': 600,
}

# Analysis Configuration
ANALYSIS_CONFIG = {
    'shrink_levels': 12,
    'min_fraction': 0.05,
    'error_threshold_percent': 1.0,
    'memory_budget_bytes': 8 * 1024 ** 3,
    'trend_constant': 10.0,
}

# API Configuration
API_CONFIG = {
    'cors_origins': ['*'],
    'max_voxels': 2_000_000,   # Largest plan the REST surface will run synchronously
    'max_axis_points': 4096,
}

# Logging Configuration
LOGGING_CONFIG = {
    'level': os.getenv('FUS_LOG_LEVEL', 'INFO'),
    'format': '%(asctime)s - %(name)s - %(levelname)s - %(message)s',
}

# Data Configuration
DATA_CONFIG = {
    'presets_file': os.getenv('FUS_PRESETS', str(BASE_DIR / 'presets.json')),
    'output_dir': os.getenv('FUS_OUTPUT_DIR', './fus_output'),
    'encoding': 'utf-8',
}


def get_solver_config():
    """Get solver configuration, with the thread count taken from FUS_THREADS if set."""
    config = SOLVER_CONFIG.copy()
    env_threads = os.getenv('FUS_THREADS')
    if env_threads:
        try:
            config['threads'] = max(1, int(env_threads))
        except ValueError:
            logger.warning(f"Ignoring non-integer FUS_THREADS={env_threads!r}")
    return config


def get_grid_config():
    """Get grid configuration."""
    return GRID_CONFIG.copy()


def get_transducer_config():
    """Get transducer configuration."""
    return TRANSDUCER_CONFIG.copy()


def get_cascade_config():
    """Get cascade configuration."""
    return CASCADE_CONFIG.copy()


def get_vie_config():
    """Get VIE solver configuration."""
    return VIE_CONFIG.copy()


def get_analysis_config():
    """Get analysis configuration."""
    return ANALYSIS_CONFIG.copy()


def get_api_config():
    """Get API configuration."""
    return API_CONFIG.copy()


def get_data_config():
    """Get data configuration."""
    return DATA_CONFIG.copy()


def configure_logging(level: Optional[str] = None) -> None:
    """Configure root logging once per entry point."""
    logging.basicConfig(
        level=getattr(logging, (level or LOGGING_CONFIG['level']).upper(), logging.INFO),
        format=LOGGING_CONFIG['format'],
    )


def validate_harmonic_params(n_harmonics, n_w):
    """
    Validate harmonic count and resolution.

    Args:
        n_harmonics: Number of harmonics to compute (p1 included)
        n_w: Voxels per wavelength of each harmonic

    Returns:
        tuple: (is_valid, error_message)
    """
    if not isinstance(n_harmonics, int) or n_harmonics < 1:
        return False, "Number of harmonics must be a positive integer"

    if not (isinstance(n_w, (int, float)) and n_w >= 1):
        return False, "Voxels per wavelength (n_w) must be at least 1"

    return True, None


def validate_power(power):
    """Validate the prescribed radiated power (W)."""
    if not isinstance(power, (int, float)) or power < 0:
        return False, "Power must be a non-negative number of watts"
    return True, None


def validate_distance(d):
    """Validate the post-focal distance d (m)."""
    if not isinstance(d, (int, float)) or d < 0:
        return False, "Post-focal distance d must be non-negative"
    return True, None


# --- Preset catalog ---

_PRESET_CACHE: Dict[str, Dict[str, Any]] = {}


def load_presets(path: Optional[str] = None) -> Dict[str, Any]:
    """
    Load the preset catalog (media, transducers, domain fractions).

    Raises:
        ConfigError: if the file is missing or not valid JSON.
    """
    path = path or DATA_CONFIG['presets_file']
    if path in _PRESET_CACHE:
        return _PRESET_CACHE[path]

    try:
        with open(path, 'r', encoding=DATA_CONFIG['encoding']) as f:
            data = json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"Preset file not found: {path}")
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}:{e.lineno}:{e.colno}: {e.msg}")

    for section in ('media', 'transducers', 'domain_fractions'):
        data.setdefault(section, [])

    _PRESET_CACHE[path] = data
    logger.debug(f"Loaded presets from {path}")
    return data


def find_preset(section: str, name: str, path: Optional[str] = None) -> Dict[str, Any]:
    """Find a preset entry by name (case-insensitive)."""
    entries: List[Dict[str, Any]] = load_presets(path).get(section, [])
    for entry in entries:
        if entry.get('name', '').lower() == name.lower():
            return dict(entry)

    available = sorted(e.get('name', '') for e in entries)
    raise ConfigError(f"Unknown {section} preset '{name}'. Available: {available}")


def preset_names(section: str, path: Optional[str] = None) -> List[str]:
    """List preset names in a section."""
    return [e['name'] for e in load_presets(path).get(section, [])]


def read_json_config(path: str) -> Tuple[Dict[str, Any], str]:
    """
    Read a JSON config file, reporting syntax errors with line and column.

    Returns:
        tuple: (parsed document, path as string)
    """
    try:
        text = Path(path).read_text(encoding=DATA_CONFIG['encoding'])
    except FileNotFoundError:
        raise ConfigError(f"Config file not found: {path}")
    try:
        return json.loads(text), str(path)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}:{e.lineno}:{e.colno}: {e.msg}")


def format_validation_error(source: str, error) -> str:
    """Render a pydantic ValidationError as one line per offending field."""
    lines = []
    for item in error.errors():
        location = '.'.join(str(part) for part in item.get('loc', ())) or '<root>'
        lines.append(f"{source}: {location}: {item.get('msg')}")
    return '\n'.join(lines)

"""
Acoustic media and the attenuating wavenumber of each harmonic.
"""
import logging
import math
from dataclasses import dataclass
from typing import Any, Dict, Optional

from pydantic import BaseModel, Field, ValidationError

from config import ConfigError, find_preset, format_validation_error, read_json_config

logger = logging.getLogger(__name__)

# Amplitude attenuation: 1 Np = 20/ln(10) dB
DB_PER_NEPER = 20.0 / math.log(10.0)

# Attenuation validity bound alpha/k below which the power law is a weak perturbation
ATTENUATION_BOUND = 0.1


@dataclass(frozen=True)
class Medium:
    """
    Homogeneous acoustic medium.

    alpha0 is in dB/m/MHz^eta; frequencies are converted to MHz before
    the power law is applied.
    """
    name: str
    rho0: float
    c0: float
    beta: float
    alpha0: float
    eta: float

    def __post_init__(self):
        if self.rho0 <= 0:
            raise ValueError(f"Density rho0 must be positive, got {self.rho0}")
        if self.c0 <= 0:
            raise ValueError(f"Sound speed c0 must be positive, got {self.c0}")
        if self.beta < 0:
            raise ValueError(f"Nonlinearity beta must be non-negative, got {self.beta}")
        if self.alpha0 < 0:
            raise ValueError(f"Attenuation alpha0 must be non-negative, got {self.alpha0}")
        if not (1.0 <= self.eta <= 2.0):
            logger.warning(f"Medium '{self.name}': power-law exponent eta={self.eta} outside [1, 2]")

    def attenuation(self, frequency: float) -> float:
        """Amplitude attenuation in Np/m at the given frequency (Hz)."""
        if self.alpha0 == 0:
            return 0.0
        db_per_m = self.alpha0 * (frequency / 1e6) ** self.eta
        return db_per_m / DB_PER_NEPER

    def wavelength(self, frequency: float) -> float:
        return self.c0 / frequency

    def to_dict(self) -> Dict[str, Any]:
        return {
            'name': self.name, 'rho0': self.rho0, 'c0': self.c0,
            'beta': self.beta, 'alpha0': self.alpha0, 'eta': self.eta,
        }


@dataclass(frozen=True)
class Wavenumber:
    """Complex wavenumber k_n of harmonic n at fundamental angular frequency omega."""
    k: complex
    harmonic_index: int
    omega: float

    def __post_init__(self):
        if self.k.real <= 0:
            raise ValueError(f"Re(k) must be positive, got {self.k.real}")
        if self.k.imag < 0:
            raise ValueError(f"Im(k) must be non-negative, got {self.k.imag}")

    @property
    def frequency(self) -> float:
        """Frequency of this harmonic (Hz)."""
        return self.harmonic_index * self.omega / (2 * math.pi)

    @property
    def wavelength(self) -> float:
        return 2 * math.pi / self.k.real


def complex_wavenumber(medium: Medium, f0: float, n: int) -> Wavenumber:
    """
    Complex wavenumber of harmonic n: k_n = n*omega/c0 + i*alpha(n*omega).

    Args:
        medium: Propagation medium
        f0: Fundamental frequency (Hz)
        n: Harmonic index (n >= 1)

    Returns:
        Wavenumber with attenuation converted from dB/m to Np/m.
    """
    if f0 <= 0:
        raise ValueError(f"Frequency f0 must be positive, got {f0}")
    if n < 1:
        raise ValueError(f"Harmonic index must be >= 1, got {n}")

    omega = 2 * math.pi * f0
    k_real = n * omega / medium.c0
    alpha = medium.attenuation(n * f0)

    if alpha / k_real >= ATTENUATION_BOUND:
        logger.warning(
            f"Medium '{medium.name}' at {n * f0 / 1e6:.3g} MHz: alpha/k = {alpha / k_real:.3g} "
            f"exceeds the weak-attenuation bound {ATTENUATION_BOUND}"
        )

    return Wavenumber(k=complex(k_real, alpha), harmonic_index=n, omega=omega)


# --- Presets and config files ---

class MediumModel(BaseModel):
    """Schema of a medium config file."""
    name: str = 'custom'
    rho0: float = Field(gt=0)
    c0: float = Field(gt=0)
    beta: float = Field(ge=0)
    alpha0: float = Field(ge=0)
    eta: float


def medium_preset(name: str, presets_path: Optional[str] = None) -> Medium:
    """Built-in medium by name (water, liver, kidney)."""
    entry = find_preset('media', name, presets_path)
    return Medium(**entry)


def medium_from_dict(data: Dict[str, Any], source: str = '<dict>') -> Medium:
    try:
        model = MediumModel(**data)
    except ValidationError as e:
        raise ConfigError(format_validation_error(source, e))
    return Medium(**model.model_dump())


def load_medium(path: str) -> Medium:
    """Load a medium from a JSON config file."""
    data, source = read_json_config(path)
    if not isinstance(data, dict):
        raise ConfigError(f"{source}: medium config must be a JSON object")
    return medium_from_dict(data, source)


def resolve_medium(spec) -> Medium:
    """Resolve a preset name, a path to a JSON file, a dict, or a Medium."""
    if isinstance(spec, Medium):
        return spec
    if isinstance(spec, dict):
        return medium_from_dict(spec)
    if isinstance(spec, str) and spec.lower().endswith('.json'):
        return load_medium(spec)
    return medium_preset(str(spec))

"""
Bowl transducer geometry, monopole discretisation and the incident field.

The bowl's apex sits at the origin and it radiates along +x; the
geometric focus is at (l, 0, 0) and the bowl is the cap of the sphere of
radius l centred on the focus.
"""
import dataclasses
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Dict, Optional

import numpy as np
from pydantic import BaseModel, Field, ValidationError

from config import (ConfigError, find_preset, format_validation_error, get_transducer_config,
                    read_json_config)
from medium import Medium, Wavenumber, complex_wavenumber

logger = logging.getLogger(__name__)


def _apportion(total: int, weights: np.ndarray) -> np.ndarray:
    """Split `total` into integer parts proportional to `weights`, each at least 1."""
    raw = total * weights / weights.sum()
    counts = np.maximum(np.floor(raw).astype(int), 1)
    order = np.argsort(-(raw - np.floor(raw)), kind='stable')
    deficit = total - int(counts.sum())
    i = 0
    while deficit > 0:
        counts[order[i % len(counts)]] += 1
        deficit -= 1
        i += 1
    while deficit < 0:
        counts[int(np.argmax(counts))] -= 1
        deficit += 1
    return counts


def distribute_points(l: float, R: float, n_p: int) -> np.ndarray:
    """
    Deterministic, approximately equal-area points on the bowl.

    Rings of latitude are spaced evenly in polar angle, each ring gets a
    number of points proportional to its circumference, and each ring is
    placed at the area midpoint of the band it represents so every point
    carries the same area A/n_p.

    Args:
        l: Radius of curvature / geometric focal length (m)
        R: Aperture radius (m)
        n_p: Number of points

    Returns:
        (n_p, 3) array of points on the cap.
    """
    if n_p < 1:
        raise ValueError(f"Number of points must be >= 1, got {n_p}")
    if not (0 < R < l):
        raise ValueError(f"Degenerate bowl: need 0 < R < l, got R={R}, l={l}")

    focus = np.array([l, 0.0, 0.0])
    if n_p == 1:
        return np.zeros((1, 3))

    cos_max = math.sqrt(l * l - R * R) / l
    u_max = 1.0 - cos_max                       # area coordinate 1 - cos(theta)
    theta_max = math.acos(cos_max)
    spacing = math.sqrt(2 * math.pi * l * l * u_max / n_p)

    n_rings = min(n_p, max(1, int(round(l * theta_max / spacing))))
    ring_centres = (np.arange(n_rings) + 0.5) * theta_max / n_rings
    counts = _apportion(n_p, np.sin(ring_centres))

    cumulative = np.concatenate(([0], np.cumsum(counts))) / n_p
    u_edges = u_max * cumulative
    u_mid = 0.5 * (u_edges[:-1] + u_edges[1:])

    points = []
    for j, (count, u) in enumerate(zip(counts, u_mid)):
        if j == 0 and count == 1:
            points.append(np.zeros((1, 3)))
            continue
        cos_t = 1.0 - u
        sin_t = math.sqrt(u * (2.0 - u))
        phi = 2 * math.pi * (np.arange(count) + 0.5 * (j % 2)) / count
        ring = np.empty((count, 3))
        ring[:, 0] = -cos_t
        ring[:, 1] = sin_t * np.cos(phi)
        ring[:, 2] = sin_t * np.sin(phi)
        points.append(focus + l * ring)

    return np.vstack(points)


@dataclass(frozen=True, eq=False)
class BowlTransducer:
    """Single-element spherical bowl with n_points monopoles on its surface."""
    f0: float
    focal_length: float
    outer_radius: float
    power: float = 0.0
    n_points: int = 4096
    name: str = 'custom'
    source_points: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.f0 <= 0:
            raise ValueError(f"Operating frequency must be positive, got {self.f0}")
        if self.power < 0:
            raise ValueError(f"Power must be non-negative, got {self.power}")
        points = distribute_points(self.focal_length, self.outer_radius, self.n_points)
        points.setflags(write=False)
        object.__setattr__(self, 'source_points', points)

    @property
    def focus(self) -> np.ndarray:
        return np.array([self.focal_length, 0.0, 0.0])

    @property
    def rim_depth(self) -> float:
        """x-coordinate of the plane of the bowl rim."""
        l, R = self.focal_length, self.outer_radius
        return l - math.sqrt(l * l - R * R)

    @property
    def area(self) -> float:
        """Cap surface area A = 2 pi l (l - sqrt(l^2 - R^2))."""
        return 2 * math.pi * self.focal_length * self.rim_depth

    def with_power(self, power: float) -> 'BowlTransducer':
        return dataclasses.replace(self, power=power)

    def to_dict(self) -> Dict[str, Any]:
        return {
            'name': self.name, 'f0': self.f0, 'focal_length': self.focal_length,
            'outer_radius': self.outer_radius, 'power': self.power, 'n_points': self.n_points,
        }


@dataclass(frozen=True, eq=False)
class SourceField:
    """Complex pressure sampled at a set of points, with optional quadrature weights."""
    points: np.ndarray
    values: np.ndarray
    weights: Optional[np.ndarray] = None
    normalization: float = 1.0

    def __post_init__(self):
        if self.normalization < 0:
            raise ValueError(f"Normalization factor must be non-negative, got {self.normalization}")
        if len(self.points) != len(self.values):
            raise ValueError("points and values differ in length")


def _monopole_sum(points: np.ndarray, sources: np.ndarray, k: complex, tol: float) -> np.ndarray:
    diff = points[:, None, :] - sources[None, :, :]
    r = np.sqrt(np.einsum('ijk,ijk->ij', diff, diff))
    if r.min() < tol:
        raise ValueError("Evaluation point coincides with a monopole source")
    return (np.exp(1j * k * r) / (4 * math.pi * r)).sum(axis=1)


def unnormalized_field(transducer: BowlTransducer, eval_points: np.ndarray, k,
                       threads: int = 1) -> np.ndarray:
    """
    Sum of monopoles over the bowl: p(x) = (A/n_p) * sum_i G_k(x, r_i).

    Args:
        transducer: Bowl transducer
        eval_points: (M, 3) evaluation points (m)
        k: Wavenumber or complex scalar
        threads: Worker threads for the chunked evaluation

    Returns:
        (M,) complex amplitudes.
    """
    config = get_transducer_config()
    k_value = k.k if isinstance(k, Wavenumber) else complex(k)
    points = np.atleast_2d(np.asarray(eval_points, dtype=float))
    sources = transducer.source_points

    chunk = max(1, config['eval_chunk_pairs'] // len(sources))
    starts = range(0, len(points), chunk)
    tol = config['coincidence_tolerance']

    def work(start):
        return _monopole_sum(points[start:start + chunk], sources, k_value, tol)

    if threads > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(work, starts))
    else:
        parts = [work(s) for s in starts]

    values = np.concatenate(parts) if parts else np.zeros(0, dtype=complex)
    return transducer.area / len(sources) * values


def spherical_cap_on_axis(transducer: BowlTransducer, x: np.ndarray, k) -> np.ndarray:
    """
    Closed-form on-axis value of the continuous monopole layer over the cap,
    the integral that the monopole sum approximates.
    """
    k_value = k.k if isinstance(k, Wavenumber) else complex(k)
    l, R = transducer.focal_length, transducer.outer_radius
    x = np.asarray(x, dtype=float)

    r_apex = np.abs(x)
    r_rim = np.sqrt((x - transducer.rim_depth) ** 2 + R * R)
    gap = l - x
    near_focus = np.abs(gap) < 1e-9 * l
    safe_gap = np.where(near_focus, 1.0, gap)

    values = l / (2j * k_value * safe_gap) * (np.exp(1j * k_value * r_rim) - np.exp(1j * k_value * r_apex))
    focal_value = transducer.area * np.exp(1j * k_value * l) / (4 * math.pi * l)
    return np.where(near_focus, focal_value, values)


# --- Power normalisation ---

def aperture_disc(transducer: BowlTransducer, spacing: float, standoff: float = 0.0):
    """
    Polar midpoint sampling of the disc covering the open end of the bowl.

    Returns:
        tuple: (points (M, 3), area weights (M,))
    """
    if spacing <= 0:
        raise ValueError(f"Disc spacing must be positive, got {spacing}")
    R = transducer.outer_radius
    n_r = max(1, int(math.ceil(R / spacing)))
    dr = R / n_r
    plane = transducer.rim_depth + standoff

    points, weights = [], []
    for i in range(n_r):
        r = (i + 0.5) * dr
        n_theta = max(8, int(math.ceil(2 * math.pi * r / spacing)))
        theta = 2 * math.pi * (np.arange(n_theta) + 0.5) / n_theta
        ring = np.column_stack((np.full(n_theta, plane), r * np.cos(theta), r * np.sin(theta)))
        points.append(ring)
        weights.append(np.full(n_theta, r * dr * 2 * math.pi / n_theta))

    return np.vstack(points), np.concatenate(weights)


def radiated_power(field: SourceField, medium: Medium) -> float:
    """Intensity |p|^2 / (2 rho0 c0) integrated with the field's area weights."""
    if field.weights is None:
        raise ValueError("Field carries no quadrature weights; sample it on the aperture disc")
    return float(np.sum(field.weights * np.abs(field.values) ** 2) / (2 * medium.rho0 * medium.c0))


def normalize_to_power(field: SourceField, transducer: BowlTransducer, medium: Medium) -> SourceField:
    """
    Scale a disc-sampled field so that it radiates transducer.power.

    The scale factor is sqrt(P0 / P(field)); the returned field records the
    accumulated normalization.
    """
    power = radiated_power(field, medium)
    if power == 0:
        raise ValueError("Degenerate field: radiated power is zero")

    factor = math.sqrt(transducer.power / power)
    return SourceField(points=field.points, values=field.values * factor, weights=field.weights,
                       normalization=field.normalization * factor)


class IncidentField:
    """
    First harmonic radiated by a bowl transducer, normalised to its power.
    The normalization factor is computed once on the aperture disc and cached.
    """

    def __init__(self, transducer: BowlTransducer, medium: Medium,
                 disc_spacing: Optional[float] = None, disc_standoff: Optional[float] = None,
                 threads: int = 1):
        config = get_transducer_config()
        self.transducer = transducer
        self.medium = medium
        self.k = complex_wavenumber(medium, transducer.f0, 1)
        wavelength = self.k.wavelength
        self.disc_spacing = disc_spacing or wavelength / config['disc_points_per_wavelength']
        if disc_standoff is None:
            disc_standoff = config['disc_standoff_wavelengths'] * wavelength
        self.disc_standoff = disc_standoff
        self.threads = threads
        self._normalization: Optional[float] = None

    def disc_field(self, spacing: Optional[float] = None) -> SourceField:
        """Unnormalised field on the aperture disc."""
        points, weights = aperture_disc(self.transducer, spacing or self.disc_spacing, self.disc_standoff)
        values = unnormalized_field(self.transducer, points, self.k, threads=self.threads)
        return SourceField(points=points, values=values, weights=weights)

    @property
    def normalization(self) -> float:
        if self._normalization is None:
            logger.info(f"Normalising incident field to {self.transducer.power} W "
                        f"(disc spacing {self.disc_spacing * 1e3:.3f} mm)")
            normalized = normalize_to_power(self.disc_field(), self.transducer, self.medium)
            self._normalization = normalized.normalization
        return self._normalization

    def evaluate(self, points: np.ndarray) -> np.ndarray:
        """Normalised first harmonic at arbitrary points."""
        scale = self.normalization
        if scale == 0:
            return np.zeros(len(np.atleast_2d(points)), dtype=complex)
        return scale * unnormalized_field(self.transducer, points, self.k, threads=self.threads)

    def on_axis(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        points = np.column_stack((x, np.zeros_like(x), np.zeros_like(x)))
        return self.evaluate(points)


# --- Presets and config files ---

class TransducerModel(BaseModel):
    """Schema of a transducer config file."""
    name: str = 'custom'
    f0: float = Field(gt=0)
    focal_length: float = Field(gt=0)
    outer_radius: float = Field(gt=0)
    power: float = Field(default=0.0, ge=0)
    n_points: int = Field(default=4096, ge=1)


def transducer_from_dict(data: Dict[str, Any], source: str = '<dict>') -> BowlTransducer:
    try:
        model = TransducerModel(**data)
    except ValidationError as e:
        raise ConfigError(format_validation_error(source, e))
    if model.outer_radius >= model.focal_length:
        raise ConfigError(f"{source}: outer_radius: must be smaller than focal_length")
    return BowlTransducer(**model.model_dump())


def transducer_preset(name: str, power: float = 0.0, n_points: Optional[int] = None,
                      presets_path: Optional[str] = None) -> BowlTransducer:
    """Built-in transducer by name (H101, H131)."""
    entry = find_preset('transducers', name, presets_path)
    entry['power'] = power
    entry['n_points'] = n_points or get_transducer_config()['n_points']
    return transducer_from_dict(entry, f"preset {name}")


def load_transducer(path: str) -> BowlTransducer:
    data, source = read_json_config(path)
    if not isinstance(data, dict):
        raise ConfigError(f"{source}: transducer config must be a JSON object")
    return transducer_from_dict(data, source)


def resolve_transducer(spec, power: Optional[float] = None, n_points: Optional[int] = None) -> BowlTransducer:
    """Resolve a preset name, JSON path, dict or BowlTransducer; power/n_points override."""
    if isinstance(spec, BowlTransducer):
        transducer = spec
    elif isinstance(spec, dict):
        transducer = transducer_from_dict(spec)
    elif isinstance(spec, str) and spec.lower().endswith('.json'):
        transducer = load_transducer(spec)
    else:
        transducer = transducer_preset(str(spec), power or 0.0, n_points)

    overrides = {}
    if power is not None:
        overrides['power'] = power
    if n_points is not None and n_points != transducer.n_points:
        overrides['n_points'] = n_points
    return dataclasses.replace(transducer, **overrides) if overrides else transducer

"""
Volume integral equations for media with spatially varying sound speed,
nonlinearity and attenuation (density held at the background value).

Each harmonic solves

    p_n - V_{kbar_n}[(k_n(x)^2 - kbar_n^2) p_n] = rhs_n

with rhs_1 the incident field and, for n >= 2,
rhs_n = -coef_n(x) V_{kbar_n}[sum_m p_m p_{n-m}], coef_n applied after the
convolution.
"""
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
from scipy import ndimage
from scipy.sparse.linalg import LinearOperator, gmres

from config import ConfigError, get_data_config, get_vie_config
from cascade import (CascadeConfig, CascadeResult, StageTiming, check_peak_pressure, coefficient,
                     incident_on_grid, quadratic_products)
from grid import DomainBox, HarmonicField, VoxelGrid, interpolate
from medium import DB_PER_NEPER, Medium, Wavenumber, complex_wavenumber
from potential import GreenKernel, get_kernel
from transducer import IncidentField

logger = logging.getLogger(__name__)

CHANNELS = ('c', 'beta', 'alpha0', 'eta')

# Relative deviation from the background below which a voxel counts as background
_SUPPORT_TOL = 1e-12


class ConvergenceError(RuntimeError):
    """Krylov iteration did not reach the requested tolerance."""

    def __init__(self, message: str, residual_history: List[float], iterations: int):
        super().__init__(message)
        self.residual_history = residual_history
        self.iterations = iterations


@dataclass(frozen=True, eq=False)
class MediumMap:
    """Per-voxel c, beta, alpha0 and eta over a grid, with the background medium."""
    background: Medium
    grid: VoxelGrid
    c: np.ndarray
    beta: np.ndarray
    alpha0: np.ndarray
    eta: np.ndarray
    support: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        for name in CHANNELS:
            if getattr(self, name).shape != tuple(self.grid.dims):
                raise ValueError(f"Map '{name}' has shape {getattr(self, name).shape}, grid is {self.grid.dims}")
        if np.any(self.c <= 0):
            raise ValueError("Sound speed map must be positive everywhere")

        bg = self.background
        support = np.zeros(self.grid.dims, dtype=bool)
        for values, reference in ((self.c, bg.c0), (self.alpha0, bg.alpha0), (self.eta, bg.eta)):
            support |= np.abs(values - reference) > _SUPPORT_TOL * max(abs(reference), 1.0)
        object.__setattr__(self, 'support', support)

    @classmethod
    def homogeneous(cls, background: Medium, grid: VoxelGrid) -> 'MediumMap':
        def fill(value):
            return np.full(grid.dims, float(value))
        return cls(background, grid, fill(background.c0), fill(background.beta),
                   fill(background.alpha0), fill(background.eta))

    @classmethod
    def from_slab(cls, background: Medium, layer: Medium, grid: VoxelGrid,
                  centre_x: float, thickness: float) -> 'MediumMap':
        """Axis-normal slab of `layer` occupying |x - centre_x| <= thickness / 2."""
        if thickness <= 0:
            raise ValueError(f"Slab thickness must be positive, got {thickness}")
        if abs(layer.rho0 - background.rho0) > 0.1 * background.rho0:
            logger.warning(f"Slab density {layer.rho0} differs from background {background.rho0} by more "
                           f"than 10%; density is held constant in the integral equations")

        inside = np.abs(grid.axis_centres(0) - centre_x) <= 0.5 * thickness
        mask = np.broadcast_to(inside[:, None, None], grid.dims)

        def channel(attr):
            return np.where(mask, getattr(layer, attr), getattr(background, attr)).astype(float)
        return cls(background, grid, channel('c0'), channel('beta'), channel('alpha0'), channel('eta'))

    def wavenumbers(self, k_bar: Wavenumber) -> np.ndarray:
        """k_n(x) = n omega / c(x) + i alpha(x, n f0)."""
        frequency = k_bar.frequency
        alpha = self.alpha0 * (frequency / 1e6) ** self.eta / DB_PER_NEPER
        return k_bar.harmonic_index * k_bar.omega / self.c + 1j * alpha

    def contrast(self, k_bar: Wavenumber) -> np.ndarray:
        """k_n(x)^2 - kbar_n^2, exactly zero outside the support."""
        out = np.zeros(self.grid.dims, dtype=complex)
        if self.support.any():
            k_local = self.wavenumbers(k_bar)[self.support]
            out[self.support] = k_local ** 2 - k_bar.k ** 2
        return out

    def rhs_coefficient(self, n: int, omega: float) -> np.ndarray:
        """beta(x) omega^2 n^2 / (2 rho0 c(x)^4)."""
        return coefficient(n, self.background, omega, beta=self.beta, c0=self.c)

    def resample(self, grid: VoxelGrid) -> 'MediumMap':
        """Linear resampling of every channel onto another grid (edge values extended)."""
        if self.grid.same_as(grid):
            return MediumMap(self.background, grid, self.c, self.beta, self.alpha0, self.eta)

        coords = [(grid.axis_centres(a) - self.grid.origin[a]) / self.grid.delta_x for a in range(3)]
        points = np.stack(np.meshgrid(*coords, indexing='ij'))
        channels = [ndimage.map_coordinates(getattr(self, name), points, order=1, mode='nearest')
                    for name in CHANNELS]
        return MediumMap(self.background, grid, *channels)

    def save(self, header_path: str) -> Path:
        """Write the raster: float64 little-endian channels in x-fastest order plus a JSON header."""
        header_path = Path(header_path)
        data_path = header_path.with_suffix('.bin')
        stacked = np.stack([np.asfortranarray(getattr(self, name)).ravel(order='F') for name in CHANNELS])
        stacked.astype('<f8').tofile(data_path)

        header = {
            'dims': list(self.grid.dims), 'delta_x': self.grid.delta_x, 'origin': list(self.grid.origin),
            'channels': list(CHANNELS), 'order': 'x-fastest', 'dtype': 'float64-le',
            'data_file': data_path.name, 'background': self.background.to_dict(),
        }
        header_path.write_text(json.dumps(header, indent=2), encoding=get_data_config()['encoding'])
        return header_path


def load_medium_map(header_path: str, background: Optional[Medium] = None) -> MediumMap:
    """Read a raster written by MediumMap.save; only c and beta are required channels."""
    header_path = Path(header_path)
    try:
        header = json.loads(header_path.read_text(encoding=get_data_config()['encoding']))
    except FileNotFoundError:
        raise ConfigError(f"Medium map header not found: {header_path}")
    except json.JSONDecodeError as e:
        raise ConfigError(f"{header_path}:{e.lineno}:{e.colno}: {e.msg}")

    try:
        dims = tuple(int(n) for n in header['dims'])
        delta_x = float(header['delta_x'])
        origin = tuple(float(o) for o in header['origin'])
        channels = list(header.get('channels', ['c', 'beta']))
        data_file = header_path.parent / header.get('data_file', header_path.with_suffix('.bin').name)
        background = background or Medium(**header['background'])
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigError(f"{header_path}: invalid medium map header ({e})")

    if not {'c', 'beta'} <= set(channels):
        raise ConfigError(f"{header_path}: channels must include 'c' and 'beta', got {channels}")

    n = int(np.prod(dims))
    raw = np.fromfile(data_file, dtype='<f8')
    if raw.size != n * len(channels):
        raise ConfigError(f"{data_file}: expected {n * len(channels)} values, found {raw.size}")

    arrays = {name: raw[i * n:(i + 1) * n].reshape(dims, order='F') for i, name in enumerate(channels)}
    for name, default in (('alpha0', background.alpha0), ('eta', background.eta)):
        arrays.setdefault(name, np.full(dims, float(default)))

    extents = [(o - 0.5 * delta_x, o + (d - 0.5) * delta_x) for o, d in zip(origin, dims)]
    grid = VoxelGrid(DomainBox(*extents), delta_x, dims, 1, origin)
    return MediumMap(background, grid, *(np.ascontiguousarray(arrays[name]) for name in CHANNELS))


# --- Operator and solver ---

def vie_operator_apply(field: HarmonicField, medium_map: MediumMap, kernel: GreenKernel,
                       contrast: Optional[np.ndarray] = None) -> HarmonicField:
    """p - V[(k_n^2(x) - kbar_n^2) p] with V the kernel of the background wavenumber."""
    if not medium_map.grid.same_as(field.grid):
        raise ValueError("Field and medium map are on different grids")
    if not kernel.matches(field.grid):
        raise ValueError("Kernel was built for a different grid")
    if contrast is None:
        if kernel.wavenumber is None:
            raise ValueError("Kernel carries no Wavenumber; pass the contrast explicitly")
        contrast = medium_map.contrast(kernel.wavenumber)

    values = field.values - kernel.convolve(contrast * field.values)
    return HarmonicField(field.grid, values, field.wavenumber)


@dataclass
class VIESolution:
    field: HarmonicField
    iterations: int
    residual: float
    residual_history: List[float]


def solve_vie(rhs: HarmonicField, medium_map: MediumMap, k_bar: Wavenumber,
              tol: Optional[float] = None, max_iter: Optional[int] = None,
              restart: Optional[int] = None) -> VIESolution:
    """
    Restarted GMRES on the matrix-free VIE operator, started from zero.

    With zero contrast the operator is the identity and the first Krylov
    step returns the right-hand side.

    Raises:
        ConvergenceError: if the true relative residual is above tol after max_iter iterations.
    """
    config = get_vie_config()
    tol = config['tol'] if tol is None else tol
    max_iter = config['max_iter'] if max_iter is None else max_iter
    restart = config['restart'] if restart is None else restart
    if tol <= 0:
        raise ValueError(f"Tolerance must be positive, got {tol}")

    grid = rhs.grid
    b = rhs.values.ravel()
    b_norm = np.linalg.norm(b)
    if b_norm == 0:
        return VIESolution(HarmonicField(grid, np.zeros(grid.dims, dtype=complex), k_bar), 0, 0.0, [])

    kernel = get_kernel(k_bar, grid)
    contrast = medium_map.contrast(k_bar)
    dims = grid.dims

    def matvec(x):
        x = x.reshape(dims)
        return (x - kernel.convolve(contrast * x)).ravel()

    operator = LinearOperator((grid.n_voxels, grid.n_voxels), matvec=matvec, dtype=complex)
    history: List[float] = []

    def true_residual(x):
        return float(np.linalg.norm(matvec(x) - b) / b_norm)

    x = np.zeros_like(b)
    residual = 1.0
    while residual > tol and len(history) < max_iter:
        done = len(history)
        cycles = max(1, math.ceil((max_iter - done) / restart))
        x, info = gmres(operator, b, x0=x, rtol=tol, atol=0.0, restart=restart, maxiter=cycles,
                        callback=history.append, callback_type='pr_norm')
        residual = true_residual(x)
        if info != 0 or len(history) == done:
            break

    if residual > tol:
        raise ConvergenceError(f"GMRES stopped at relative residual {residual:.3e} > {tol:.1e} "
                               f"after {len(history)} iterations", history, len(history))

    logger.info(f"VIE for harmonic {k_bar.harmonic_index} converged in {len(history)} iterations "
                f"(residual {residual:.2e})")
    return VIESolution(HarmonicField(grid, x.reshape(dims), k_bar), len(history), residual, history)


def run_cascade_inhomogeneous(config: CascadeConfig, medium_map: MediumMap,
                              incident: Optional[IncidentField] = None,
                              tol: Optional[float] = None, max_iter: Optional[int] = None) -> CascadeResult:
    """
    Harmonics p1..p_n in an inhomogeneous medium on the planned meshes.

    config.medium is the background. The master medium_map is resampled
    onto each planned grid. p1 is solved on the grid of p2 and then
    interpolated like every other lower harmonic.
    """
    background, transducer, plan = config.medium, config.transducer, config.plan
    incident = incident or IncidentField(transducer, background, threads=config.threads)
    omega = incident.k.omega

    fields: Dict[int, HarmonicField] = {}
    timings: List[StageTiming] = []
    solver_info: Dict[int, Dict[str, float]] = {}

    for i in range(2, config.n_harmonics + 1):
        level = plan.level(i)
        t0 = time.perf_counter()
        grid = VoxelGrid.anchored(level.domain, level.grid.delta_x, i, plan.focus)
        local_map = medium_map.resample(grid)
        k_i = complex_wavenumber(background, transducer.f0, i)
        t1 = time.perf_counter()

        if i == 2:
            p_inc = incident_on_grid(incident, grid)
            solution = solve_vie(p_inc, local_map, incident.k, tol, max_iter)
            fields[1] = solution.field
            solver_info[1] = {'iterations': solution.iterations, 'residual': solution.residual}
            lower = {1: fields[1]}
        else:
            lower = {1: interpolate(fields[1], grid)}
        for m in range(2, i):
            lower[m] = interpolate(fields[m], grid)
        t2 = time.perf_counter()

        kernel = get_kernel(k_i, grid)
        t3 = time.perf_counter()

        products = quadratic_products(i, lower)
        convolved = kernel.convolve(products.values)
        rhs = HarmonicField(grid, -local_map.rhs_coefficient(i, omega) * convolved, k_i)
        solution = solve_vie(rhs, local_map, k_i, tol, max_iter)
        fields[i] = solution.field
        solver_info[i] = {'iterations': solution.iterations, 'residual': solution.residual}
        t4 = time.perf_counter()

        timings.append(StageTiming(i, grid.n_voxels, t1 - t0, t2 - t1, t3 - t2, t4 - t3))
        logger.info(f"Harmonic p{i} (VIE) on {grid.describe()}: {solution.iterations} iterations")

    ordered = [fields[n] for n in range(1, config.n_harmonics + 1)]
    peak = check_peak_pressure(ordered)
    return CascadeResult(fields=ordered, timings=timings, plan=plan, peak_pressure=peak,
                         solver_info=solver_info)

"""
Cuboidal domains, uniform voxel grids and the nested-mesh planner.

Every grid is registered so that the transducer focus is a voxel centre;
voxel centres therefore sit at focus + j * delta_x along each axis.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage

from config import find_preset, get_grid_config
from medium import Medium, Wavenumber

logger = logging.getLogger(__name__)

# Slack for floating-point rounding when counting voxels and testing containment
_ROUNDING = 1e-9


@dataclass(frozen=True)
class DomainBox:
    """Axis-aligned box [x_min, x_max] x [y_min, y_max] x [z_min, z_max] (m)."""
    x_range: Tuple[float, float]
    y_range: Tuple[float, float]
    z_range: Tuple[float, float]

    def __post_init__(self):
        for axis, (lo, hi) in zip('xyz', (self.x_range, self.y_range, self.z_range)):
            if not hi > lo:
                raise ValueError(f"Empty domain along {axis}: [{lo}, {hi}]")

    @classmethod
    def axial(cls, x_min: float, x_max: float, half_width: float) -> 'DomainBox':
        """Box symmetric about the x-axis."""
        return cls((x_min, x_max), (-half_width, half_width), (-half_width, half_width))

    @property
    def ranges(self) -> Tuple[Tuple[float, float], ...]:
        return (self.x_range, self.y_range, self.z_range)

    @property
    def extents(self) -> Tuple[float, float, float]:
        return tuple(hi - lo for lo, hi in self.ranges)

    @property
    def width(self) -> float:
        """Extent in y (equal to z for axial boxes)."""
        return self.y_range[1] - self.y_range[0]

    @property
    def is_axial(self) -> bool:
        return all(abs(lo + hi) <= _ROUNDING * (hi - lo) for lo, hi in (self.y_range, self.z_range))

    def contains(self, other: 'DomainBox', tol: float = 0.0) -> bool:
        return all(lo - tol <= o_lo and o_hi <= hi + tol
                   for (lo, hi), (o_lo, o_hi) in zip(self.ranges, other.ranges))

    def to_dict(self) -> Dict[str, List[float]]:
        return {'x_range': list(self.x_range), 'y_range': list(self.y_range), 'z_range': list(self.z_range)}


def _anchored_axis(lo: float, hi: float, anchor: float, delta_x: float) -> Tuple[int, int]:
    """Return (first centre index relative to anchor, count) covering [lo, hi]."""
    n_lo = math.ceil((anchor - lo) / delta_x - 0.5 - _ROUNDING)
    n_hi = math.ceil((hi - anchor) / delta_x - 0.5 - _ROUNDING)
    count = max(1, n_lo + 1 + n_hi)
    return -n_lo, count


@dataclass(frozen=True)
class VoxelGrid:
    """
    Uniform voxel mesh over a domain box.

    origin is the centre of voxel (0, 0, 0); values on the grid are stored
    as arrays of shape dims indexed [ix, iy, iz].
    """
    domain: DomainBox
    delta_x: float
    dims: Tuple[int, int, int]
    harmonic_index: int
    origin: Tuple[float, float, float]

    def __post_init__(self):
        if self.delta_x <= 0:
            raise ValueError(f"Voxel size must be positive, got {self.delta_x}")
        if any(n < 1 for n in self.dims):
            raise ValueError(f"Grid dimensions must be positive, got {self.dims}")

    @classmethod
    def anchored(cls, domain: DomainBox, delta_x: float, harmonic_index: int,
                 anchor: Sequence[float] = (0.0, 0.0, 0.0)) -> 'VoxelGrid':
        """Grid covering `domain` with `anchor` as a voxel centre."""
        dims, origin = [], []
        for (lo, hi), a in zip(domain.ranges, anchor):
            first, count = _anchored_axis(lo, hi, a, delta_x)
            dims.append(count)
            origin.append(a + first * delta_x)
        return cls(domain=domain, delta_x=delta_x, dims=tuple(dims),
                   harmonic_index=harmonic_index, origin=tuple(origin))

    @property
    def n_voxels(self) -> int:
        return int(np.prod(self.dims))

    @property
    def memory_bytes(self) -> int:
        return self.n_voxels * get_grid_config()['bytes_per_value']

    def axis_centres(self, axis: int) -> np.ndarray:
        return self.origin[axis] + self.delta_x * np.arange(self.dims[axis])

    def centres(self) -> np.ndarray:
        """(N, 3) voxel centres in C order (z fastest)."""
        xs, ys, zs = np.meshgrid(*(self.axis_centres(a) for a in range(3)), indexing='ij')
        return np.column_stack((xs.ravel(), ys.ravel(), zs.ravel()))

    def voxel_box(self) -> DomainBox:
        """Box spanned by the voxel faces."""
        half = 0.5 * self.delta_x
        ranges = [(c[0] - half, c[-1] + half) for c in (self.axis_centres(a) for a in range(3))]
        return DomainBox(*ranges)

    def same_as(self, other: 'VoxelGrid') -> bool:
        return (self.dims == other.dims
                and math.isclose(self.delta_x, other.delta_x, rel_tol=1e-12)
                and np.allclose(self.origin, other.origin, rtol=0, atol=1e-9 * self.delta_x))

    def describe(self) -> str:
        nx, ny, nz = self.dims
        return f"{nx}x{ny}x{nz} = {self.n_voxels:.3e} voxels, dx = {self.delta_x * 1e6:.2f} um"

    def to_dict(self) -> Dict[str, Any]:
        return {
            'harmonic_index': self.harmonic_index, 'dims': list(self.dims), 'delta_x': self.delta_x,
            'origin': list(self.origin), 'n_voxels': self.n_voxels, 'domain': self.domain.to_dict(),
        }


@dataclass(frozen=True, eq=False)
class HarmonicField:
    """Complex amplitude of one harmonic (or its source density) at voxel centres."""
    grid: VoxelGrid
    values: np.ndarray
    wavenumber: Optional[Wavenumber] = None

    def __post_init__(self):
        if self.values.shape != tuple(self.grid.dims):
            raise ValueError(f"Field shape {self.values.shape} does not match grid dims {self.grid.dims}")

    @property
    def harmonic_index(self) -> int:
        if self.wavenumber is not None:
            return self.wavenumber.harmonic_index
        return self.grid.harmonic_index

    def scaled(self, factor) -> 'HarmonicField':
        return HarmonicField(self.grid, self.values * factor, self.wavenumber)


# --- Domains and plans ---

def reference_domain(transducer, d: Optional[float] = None, standoff: Optional[float] = None) -> DomainBox:
    """
    D2 = [l - L, l + d] x [-R, R]^2 with L = sqrt(l^2 - R^2) - standoff.
    """
    config = get_grid_config()
    d = config['post_focal_distance'] if d is None else d
    standoff = config['standoff'] if standoff is None else standoff
    if d < 0:
        raise ValueError(f"Post-focal distance must be non-negative, got {d}")

    l, R = transducer.focal_length, transducer.outer_radius
    L = math.sqrt(l * l - R * R) - standoff
    return DomainBox.axial(l - L, l + d, R)


def harmonic_delta_x(medium: Medium, f0: float, harmonic_index: int, n_w: float) -> float:
    """delta_x = lambda_i / n_w with lambda_i = c0 / (i f0)."""
    return medium.c0 / (harmonic_index * f0 * n_w)


@dataclass(frozen=True)
class MeshLevel:
    harmonic_index: int
    domain: DomainBox
    grid: VoxelGrid
    fraction_x: float
    fraction_yz: float


@dataclass(frozen=True)
class MeshPlan:
    """Nested domains D2 ⊇ D3 ⊇ ... and their grids, with the single-mesh reference."""
    levels: Tuple[MeshLevel, ...]
    d: float
    w: float
    n_w: float
    reference: VoxelGrid
    fractions_name: str = 'rule-of-thumb'
    focus: Tuple[float, float, float] = field(default=(0.0, 0.0, 0.0))

    @property
    def n_harmonics(self) -> int:
        return self.levels[-1].harmonic_index

    def level(self, harmonic_index: int) -> MeshLevel:
        for level in self.levels:
            if level.harmonic_index == harmonic_index:
                return level
        raise KeyError(f"No mesh planned for harmonic {harmonic_index}")

    def grid(self, harmonic_index: int) -> VoxelGrid:
        return self.level(harmonic_index).grid

    def reduction_factors(self) -> Dict[int, float]:
        """Reference voxel count over each planned grid's count."""
        return {lv.harmonic_index: self.reference.n_voxels / lv.grid.n_voxels for lv in self.levels}

    def total_reduction(self) -> float:
        """Degrees of freedom saved over computing every harmonic on the reference mesh."""
        total = sum(lv.grid.n_voxels for lv in self.levels)
        return len(self.levels) * self.reference.n_voxels / total

    def expected_reduction(self) -> float:
        """(n/2)^3, the saving if the post-focal length scaled too."""
        return (self.n_harmonics / 2) ** 3

    def report(self) -> str:
        fft_factor = 8
        lines = [
            f"Mesh plan ({self.fractions_name}), n_w = {self.n_w}, "
            f"d = {self.d * 1e3:.2f} mm, w = {self.w * 1e3:.2f} mm",
            f"Reference (single mesh at harmonic {self.reference.harmonic_index}): {self.reference.describe()}",
            f"{'harm':>4} {'Nx':>6} {'Ny':>6} {'Nz':>6} {'voxels':>11} {'dx_um':>8} {'mem_MB':>9} "
            f"{'fft_MB':>9} {'frac_x':>7} {'frac_yz':>7} {'reduction':>9}",
        ]
        reductions = self.reduction_factors()
        for lv in self.levels:
            g = lv.grid
            lines.append(
                f"{lv.harmonic_index:>4} {g.dims[0]:>6} {g.dims[1]:>6} {g.dims[2]:>6} {g.n_voxels:>11.4e} "
                f"{g.delta_x * 1e6:>8.2f} {g.memory_bytes / 1e6:>9.1f} {fft_factor * g.memory_bytes / 1e6:>9.1f} "
                f"{lv.fraction_x:>7.3f} {lv.fraction_yz:>7.3f} {reductions[lv.harmonic_index]:>9.2f}"
            )
        lines.append(f"Total DOF reduction: {self.total_reduction():.2f} "
                     f"(ideal (n/2)^3 = {self.expected_reduction():.2f})")
        return '\n'.join(lines)

    def to_dict(self) -> Dict[str, Any]:
        reductions = self.reduction_factors()
        return {
            'fractions': self.fractions_name, 'n_w': self.n_w, 'd': self.d, 'w': self.w,
            'focus': list(self.focus),
            'reference': self.reference.to_dict(),
            'levels': [
                {**lv.grid.to_dict(), 'fraction_x': lv.fraction_x, 'fraction_yz': lv.fraction_yz,
                 'memory_bytes': lv.grid.memory_bytes, 'reduction': reductions[lv.harmonic_index]}
                for lv in self.levels
            ],
            'total_reduction': self.total_reduction(),
            'expected_reduction': self.expected_reduction(),
        }


FractionSpec = Union[None, str, Dict[str, Sequence[float]]]


def rule_of_thumb_fraction_x(harmonic_index: int, L: float, d: float) -> float:
    """Share of the reference x-extent L + d kept when L is scaled by 2 / i."""
    return ((2.0 / harmonic_index) * L + d) / (L + d)


def fraction_box(transducer, L: float, d: float, fraction_x: float, fraction_yz: float) -> DomainBox:
    """
    Sub-box of the reference domain: fraction_x of the x-extent L + d
    measured back from the far face x = l + d, fraction_yz of the width 2R.
    """
    l, R = transducer.focal_length, transducer.outer_radius
    return DomainBox.axial(l + d - fraction_x * (L + d), l + d, fraction_yz * R)


def _resolve_fractions(fractions: FractionSpec, n_harmonics: int, L: float,
                       d: float) -> Tuple[str, Dict[int, Tuple[float, float]]]:
    if fractions is None:
        return 'rule-of-thumb', {i: (rule_of_thumb_fraction_x(i, L, d), 2.0 / i)
                                 for i in range(2, n_harmonics + 1)}

    if isinstance(fractions, str):
        name, table = fractions, find_preset('domain_fractions', fractions)
    else:
        name, table = fractions.get('name', 'custom'), fractions

    xs, yzs = list(table['x']), list(table['yz'])
    if len(xs) < n_harmonics - 1 or len(yzs) < n_harmonics - 1:
        raise ValueError(f"Fraction table '{name}' covers harmonics 2..{min(len(xs), len(yzs)) + 1}, "
                         f"{n_harmonics} requested")
    resolved = {}
    for i in range(2, n_harmonics + 1):
        fx, fyz = float(xs[i - 2]), float(yzs[i - 2])
        if not (0 < fx <= 1 and 0 < fyz <= 1):
            raise ValueError(f"Fractions for harmonic {i} must lie in (0, 1], got x={fx}, yz={fyz}")
        resolved[i] = (fx, fyz)
    return name, resolved


def plan_nested_meshes(transducer, medium: Medium, d: Optional[float] = None, n_w: Optional[float] = None,
                       n_harmonics: int = 5, fractions: FractionSpec = None) -> MeshPlan:
    """
    Plan one mesh per harmonic 2..n_harmonics.

    By default the pre-focal length L and the width w of D_i are scaled by
    lambda_i / lambda_2 = 2 / i with the post-focal distance d kept.
    A fraction table (preset name or {'x': [...], 'yz': [...]}, indexed
    from harmonic 2) instead keeps its x entry of the reference x-extent
    L + d, measured back from x = l + d, and its yz entry of the width w.

    Each grid has delta_x = lambda_i / n_w and is anchored at the focus.
    """
    config = get_grid_config()
    d = config['post_focal_distance'] if d is None else d
    n_w = config['voxels_per_wavelength'] if n_w is None else n_w
    if n_harmonics < 2:
        raise ValueError(f"A nested plan needs at least 2 harmonics, got {n_harmonics}")
    if n_w < 1:
        raise ValueError(f"n_w must be at least 1, got {n_w}")

    d2 = reference_domain(transducer, d)
    l, R = transducer.focal_length, transducer.outer_radius
    L = l - d2.x_range[0]
    focus = (l, 0.0, 0.0)
    name, table = _resolve_fractions(fractions, n_harmonics, L, d)

    levels = []
    for i in range(2, n_harmonics + 1):
        fx, fyz = table[i]
        if levels and (fx > levels[-1].fraction_x or fyz > levels[-1].fraction_yz):
            # Lower harmonics are interpolated onto D_i, so D_i must lie inside D_{i-1}
            logger.warning(f"Fractions for harmonic {i} ({fx}, {fyz}) exceed those of harmonic {i - 1} "
                           f"in '{name}'; clamped to keep the domains nested")
            fx, fyz = min(fx, levels[-1].fraction_x), min(fyz, levels[-1].fraction_yz)
        domain = fraction_box(transducer, L, d, fx, fyz)
        grid = VoxelGrid.anchored(domain, harmonic_delta_x(medium, transducer.f0, i, n_w), i, focus)
        levels.append(MeshLevel(i, domain, grid, fx, fyz))

    reference = VoxelGrid.anchored(d2, harmonic_delta_x(medium, transducer.f0, n_harmonics, n_w),
                                   n_harmonics, focus)
    plan = MeshPlan(levels=tuple(levels), d=d, w=2 * R, n_w=n_w, reference=reference,
                    fractions_name=name, focus=focus)
    logger.info(f"Planned {len(levels)} meshes ({name}); total DOF reduction {plan.total_reduction():.2f}")
    return plan


def reference_plan(transducer, medium: Medium, d: Optional[float] = None, n_w: Optional[float] = None,
                   n_harmonics: int = 5) -> MeshPlan:
    """Every harmonic on the single reference mesh D2 at delta_x = lambda_n / n_w."""
    nested = plan_nested_meshes(transducer, medium, d, n_w, n_harmonics)
    ref = nested.reference
    levels = tuple(
        MeshLevel(i, ref.domain, VoxelGrid(ref.domain, ref.delta_x, ref.dims, i, ref.origin), 1.0, 1.0)
        for i in range(2, n_harmonics + 1)
    )
    return MeshPlan(levels=levels, d=nested.d, w=nested.w, n_w=nested.n_w, reference=ref,
                    fractions_name='reference', focus=nested.focus)


# --- Thresholding ---

def shrink_domain_by_threshold(field: HarmonicField, Q0: float) -> DomainBox:
    """
    Smallest box of voxels containing every voxel where log10(|f| / max|f|) >= Q0.

    Q0 = -inf returns the field's domain; Q0 >= 0 keeps only the peak voxel.
    """
    magnitude = np.abs(field.values)
    peak = magnitude.max()
    if peak == 0:
        raise ValueError("Cannot threshold an identically zero field")
    if Q0 == -math.inf:
        return field.grid.domain

    if Q0 >= 0:
        mask = np.zeros(magnitude.shape, dtype=bool)
        mask[np.unravel_index(np.argmax(magnitude), magnitude.shape)] = True
    else:
        mask = magnitude >= peak * 10.0 ** Q0

    grid = field.grid
    half = 0.5 * grid.delta_x
    ranges = []
    for axis in range(3):
        other = tuple(a for a in range(3) if a != axis)
        hit = np.flatnonzero(mask.any(axis=other))
        centres = grid.axis_centres(axis)
        ranges.append((centres[hit[0]] - half, centres[hit[-1]] + half))
    return DomainBox(*ranges)


# --- Interpolation ---

def interpolate(field: HarmonicField, target: VoxelGrid, order: Optional[int] = None,
                wavenumber: Optional[Wavenumber] = None) -> HarmonicField:
    """
    Resample a field onto another grid's voxel centres.

    Real and imaginary parts are interpolated independently (order 1 is
    trilinear, order 2 a quadratic spline). Target centres up to one
    source voxel beyond the source faces are clamped to the boundary
    values; anything further is an error.
    """
    order = get_grid_config()['interpolation_order'] if order is None else order
    if order not in (1, 2):
        raise ValueError(f"Interpolation order must be 1 or 2, got {order}")
    wavenumber = wavenumber or field.wavenumber
    source = field.grid

    if source.same_as(target):
        return HarmonicField(target, field.values.copy(), wavenumber)

    coords = []
    for axis in range(3):
        index = (target.axis_centres(axis) - source.origin[axis]) / source.delta_x
        n = source.dims[axis]
        if index.min() < -1.5 - _ROUNDING or index.max() > n + 0.5 + _ROUNDING:
            raise ValueError(f"Target grid extends more than one source voxel beyond the source along "
                             f"{'xyz'[axis]}")
        coords.append(np.clip(index, 0, n - 1))

    if order == 1:
        parts = (field.values.real, field.values.imag)
    else:
        parts = tuple(ndimage.spline_filter(p, order=2, mode='nearest')
                      for p in (field.values.real, field.values.imag))

    values = np.empty(target.dims, dtype=complex)
    iy, iz = np.meshgrid(coords[1], coords[2], indexing='ij')
    for ix, x_index in enumerate(coords[0]):
        points = np.stack((np.full(iy.shape, x_index), iy, iz))
        re, im = (ndimage.map_coordinates(p, points, order=order, mode='nearest', prefilter=False)
                  for p in parts)
        values[ix] = re + 1j * im

    return HarmonicField(target, values, wavenumber)

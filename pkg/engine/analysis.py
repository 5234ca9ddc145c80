"""
Error metrics, the localisedness map and the convergence studies.
"""
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from scipy.interpolate import CubicSpline
from sklearn.linear_model import LinearRegression

from config import get_analysis_config
from cascade import CascadeConfig, CascadeResult, incident_on_grid, rhs_source, run_cascade
from grid import (DomainBox, HarmonicField, VoxelGrid, fraction_box, harmonic_delta_x, reference_domain,
                  reference_plan, rule_of_thumb_fraction_x, shrink_domain_by_threshold)
from medium import Medium, complex_wavenumber
from potential import GreenKernel, apply_potential
from transducer import BowlTransducer, IncidentField

logger = logging.getLogger(__name__)


# --- On-axis profiles and errors ---

@dataclass(frozen=True, eq=False)
class OnAxisProfile:
    x: np.ndarray
    values: np.ndarray
    harmonic_index: int
    wavenumber: Optional[float] = None   # Re(k_n); enables phase-compensated resampling

    def __post_init__(self):
        if len(self.x) != len(self.values):
            raise ValueError("x and values differ in length")
        if len(self.x) > 1 and np.any(np.diff(self.x) <= 0):
            raise ValueError("Profile x-coordinates must be strictly increasing")

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            'x_m': self.x, 're_Pa': self.values.real, 'im_Pa': self.values.imag, 'abs_Pa': np.abs(self.values),
        })


def _nearest_axis_indices(centres: np.ndarray, delta_x: float) -> List[int]:
    distance = np.abs(centres)
    nearest = distance.min()
    return list(np.flatnonzero(distance <= nearest + 1e-9 * delta_x))


def on_axis_profile(field: HarmonicField) -> OnAxisProfile:
    """Samples along the voxel column nearest the axis; tied columns are averaged."""
    grid = field.grid
    ys = _nearest_axis_indices(grid.axis_centres(1), grid.delta_x)
    zs = _nearest_axis_indices(grid.axis_centres(2), grid.delta_x)
    values = field.values[:, ys][:, :, zs].mean(axis=(1, 2))
    k = field.wavenumber.k.real if field.wavenumber is not None else None
    return OnAxisProfile(grid.axis_centres(0), values, field.harmonic_index, k)


def _midpoint_weights(x: np.ndarray) -> np.ndarray:
    if len(x) == 1:
        return np.ones(1)
    edges = np.concatenate(([x[0] - 0.5 * (x[1] - x[0])], 0.5 * (x[1:] + x[:-1]),
                            [x[-1] + 0.5 * (x[-1] - x[-2])]))
    return np.diff(edges)


def _resample(profile: OnAxisProfile, nodes: np.ndarray) -> np.ndarray:
    """
    Profile values at other x-coordinates.

    With a known wavenumber the carrier exp(ikx) is divided out, the
    envelope is interpolated with a cubic spline and the carrier restored;
    otherwise real and imaginary parts are interpolated linearly.
    """
    if profile.wavenumber is None or len(profile.x) < 4:
        return (np.interp(nodes, profile.x, profile.values.real)
                + 1j * np.interp(nodes, profile.x, profile.values.imag))

    k = profile.wavenumber
    envelope = profile.values * np.exp(-1j * k * profile.x)
    real, imag = CubicSpline(profile.x, envelope.real), CubicSpline(profile.x, envelope.imag)
    return (real(nodes) + 1j * imag(nodes)) * np.exp(1j * k * nodes)


def on_axis_error(p: OnAxisProfile, p_ref: OnAxisProfile, normalizer: Optional[OnAxisProfile] = None) -> float:
    """
    100 ||p - p_ref|| / ||normalizer|| in percent.

    The quadrature nodes are the reference nodes inside p's x-range; p and
    the normalizer are resampled onto them (see _resample) and the norms
    use the midpoint rule.
    """
    normalizer = p_ref if normalizer is None else normalizer
    tol = 1e-9 * (p_ref.x[-1] - p_ref.x[0] if len(p_ref.x) > 1 else 1.0)
    inside = (p_ref.x >= p.x[0] - tol) & (p_ref.x <= p.x[-1] + tol)
    nodes = p_ref.x[inside]
    if len(nodes) == 0:
        raise ValueError("Profiles do not overlap")

    weights = _midpoint_weights(nodes)
    reference = p_ref.values[inside]
    norm_values = normalizer.values[inside] if normalizer is p_ref else _resample(normalizer, nodes)
    denominator = math.sqrt(np.sum(weights * np.abs(norm_values) ** 2))
    if denominator == 0:
        raise ValueError("Normalizer has zero norm")

    difference = _resample(p, nodes) - reference
    return 100.0 * math.sqrt(np.sum(weights * np.abs(difference) ** 2)) / denominator


def profile_norm(profile: OnAxisProfile) -> float:
    return math.sqrt(np.sum(_midpoint_weights(profile.x) * np.abs(profile.values) ** 2))


def nested_mesh_errors(nested: CascadeResult, reference: CascadeResult) -> Dict[int, float]:
    """
    On-axis error (percent) of every harmonic of a nested-mesh cascade
    against the same cascade on the single reference mesh, relative to
    the reference ||p1||.
    """
    p1_ref = on_axis_profile(reference.field(1))
    errors = {}
    for field in nested.fields:
        n = field.harmonic_index
        errors[n] = on_axis_error(on_axis_profile(field), on_axis_profile(reference.field(n)), p1_ref)
        logger.info(f"Nested vs reference, p{n}: {errors[n]:.4f}% of ||p1||")
    return errors


def localisedness_map(f: HarmonicField) -> HarmonicField:
    """Q = log10(|f| / max|f|), -inf where f vanishes."""
    magnitude = np.abs(f.values)
    peak = magnitude.max()
    if peak == 0:
        raise ValueError("Localisedness is undefined for an identically zero field")
    with np.errstate(divide='ignore'):
        q = np.log10(magnitude / peak)
    return HarmonicField(f.grid, q, f.wavenumber)


# --- Study records ---

@dataclass
class ConvergenceRecord:
    harmonic: int
    control_variable: str
    value: float
    error_percent: float
    fraction_x: float = float('nan')
    fraction_yz: float = float('nan')
    trend: float = float('nan')

    def __post_init__(self):
        if not self.error_percent >= 0:
            raise ValueError(f"Error must be non-negative, got {self.error_percent}")


@dataclass
class QuadratureStudy:
    records: List[ConvergenceRecord]
    slope: float
    intercept: float


def records_frame(records: Sequence[ConvergenceRecord]) -> pd.DataFrame:
    return pd.DataFrame([asdict(r) for r in records])


def plot_frame(records: Sequence[ConvergenceRecord]) -> pd.DataFrame:
    """Long-format (series, x, y) rows, one series per harmonic and control variable."""
    rows = [{'series': f"p{r.harmonic}:{r.control_variable}", 'x': r.value, 'y': r.error_percent}
            for r in records]
    return pd.DataFrame(rows, columns=['series', 'x', 'y'])


def fit_loglog_slope(x: Sequence[float], y: Sequence[float]):
    """Least-squares slope and intercept of log(y) against log(x), over positive y."""
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    keep = y > 0
    if keep.sum() < 2:
        raise ValueError("Need at least two positive errors to fit a slope")
    model = LinearRegression().fit(np.log(x[keep]).reshape(-1, 1), np.log(y[keep]))
    return float(model.coef_[0]), float(model.intercept_)


# --- Fan-out ---

def study_workers(per_run_bytes: int, n_tasks: int) -> int:
    """Concurrent runs allowed by the memory budget."""
    budget = get_analysis_config()['memory_budget_bytes']
    return max(1, min(n_tasks, int(budget // max(per_run_bytes, 1))))


def fan_out(func: Callable, tasks: Sequence, per_run_bytes: int) -> List:
    workers = study_workers(per_run_bytes, len(tasks))
    logger.info(f"Running {len(tasks)} study runs on {workers} worker(s)")
    if workers == 1:
        return [func(t) for t in tasks]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(func, tasks))


def _run_bytes(grid: VoxelGrid) -> int:
    # kernel, its DFT and two padded work arrays on the doubled grid, plus a few fields
    return (4 * 8 + 4) * grid.memory_bytes


# --- Quadrature study ---

def box_taper(grid: VoxelGrid, domain: DomainBox, width: float) -> np.ndarray:
    """
    Separable raised-cosine window on the grid: 1 deeper than width inside
    the box, 0 on its faces and beyond.
    """
    if not 0 < 2 * width <= min(domain.extents):
        raise ValueError(f"Taper width {width} must be positive and at most half the smallest box extent")
    window = np.ones(grid.dims)
    for axis, (lo, hi) in enumerate(domain.ranges):
        centres = grid.axis_centres(axis)
        depth = np.clip(np.minimum(centres - lo, hi - centres) / width, 0.0, 1.0)
        shape = [1, 1, 1]
        shape[axis] = -1
        window = window * (np.sin(0.5 * np.pi * depth) ** 2).reshape(shape)
    return window


def second_harmonic_on_grid(incident: IncidentField, medium: Medium, grid: VoxelGrid,
                            window: Optional[np.ndarray] = None) -> HarmonicField:
    p1 = incident_on_grid(incident, grid)
    k2 = complex_wavenumber(medium, incident.transducer.f0, 2)
    source = rhs_source(2, {1: p1}, medium, incident.k.omega)
    if window is not None:
        source = source.scaled(window)
    return apply_potential(GreenKernel.for_grid(k2, grid), source).scaled(-1)


def quadrature_convergence_study(transducer: BowlTransducer, medium: Medium, n_w_values: Sequence[float],
                                 n_w_ref: float, domain: Optional[DomainBox] = None,
                                 d: Optional[float] = None, taper: float = 0.0) -> QuadratureStudy:
    """
    On-axis error of p2 against a finer-resolution reference as n_w varies,
    with the log-log convergence slope.

    With taper > 0 the source is windowed to zero over that distance from
    every face of the domain, so grids of different spacing integrate the
    same compactly supported source however they overhang the box.
    """
    if n_w_ref <= max(n_w_values):
        raise ValueError(f"Reference n_w ({n_w_ref}) must exceed every studied n_w ({max(n_w_values)})")
    domain = domain or reference_domain(transducer, d)
    focus = tuple(transducer.focus)
    incident = IncidentField(transducer, medium)
    _ = incident.normalization  # cached before the fan-out

    def grid_for(n_w):
        return VoxelGrid.anchored(domain, harmonic_delta_x(medium, transducer.f0, 2, n_w), 2, focus)

    def p2_profile(n_w):
        grid = grid_for(n_w)
        window = box_taper(grid, domain, taper) if taper > 0 else None
        return on_axis_profile(second_harmonic_on_grid(incident, medium, grid, window))

    reference = p2_profile(n_w_ref)

    def run(n_w):
        profile = p2_profile(n_w)
        error = on_axis_error(profile, reference)
        logger.info(f"n_w = {n_w}: error {error:.3f}%")
        return ConvergenceRecord(2, 'n_w', float(n_w), error)

    values = list(n_w_values)
    records = fan_out(run, values, _run_bytes(grid_for(max(values))))
    slope, intercept = fit_loglog_slope([r.value for r in records], [r.error_percent for r in records])
    logger.info(f"Quadrature convergence slope {slope:.3f}")
    return QuadratureStudy(records, slope, intercept)


# --- Domain-shrink study ---

def default_shrink_levels() -> np.ndarray:
    config = get_analysis_config()
    return np.geomspace(1.0, config['min_fraction'], config['shrink_levels'])


def default_q0_values() -> np.ndarray:
    return -np.geomspace(4.0, 0.25, get_analysis_config()['shrink_levels'])


def _mask_outside(field: HarmonicField, box: DomainBox) -> HarmonicField:
    """Zero the voxels whose centres lie outside the box."""
    grid = field.grid
    if box.contains(grid.domain, tol=1e-9 * grid.delta_x):
        return field
    slack = 1e-6 * grid.delta_x
    inside = [(c > lo - slack) & (c < hi + slack)
              for c, (lo, hi) in zip((grid.axis_centres(a) for a in range(3)), box.ranges)]
    mask = inside[0][:, None, None] & inside[1][None, :, None] & inside[2][None, None, :]
    return HarmonicField(grid, np.where(mask, field.values, 0), field.wavenumber)


def domain_shrink_study(config: CascadeConfig, Q0_values: Optional[Sequence[float]] = None,
                        fractions: Optional[Sequence[float]] = None,
                        reference: Optional[CascadeResult] = None) -> List[ConvergenceRecord]:
    """
    Error of each harmonic when its source is restricted to a smaller box.

    Every harmonic is computed on the single reference mesh. For harmonic
    i the source f_i (from the reference lower harmonics) is zeroed
    outside the box and the potential is evaluated on the whole grid. The
    error is measured on the axis relative to ||p1||. Boxes come from
    thresholding Q = log10(|f_i| / max|f_i|) at each Q0, and from sweeping
    the x fraction (full width) and the y/z fraction (full length).
    """
    analysis = get_analysis_config()
    medium, transducer = config.medium, config.transducer
    Q0_values = default_q0_values() if Q0_values is None else Q0_values
    fractions = default_shrink_levels() if fractions is None else fractions

    if reference is None:
        plan = reference_plan(transducer, medium, config.plan.d, config.plan.n_w, config.n_harmonics)
        reference = run_cascade(CascadeConfig(medium, transducer, plan, config.n_harmonics))

    fields = {f.harmonic_index: f for f in reference.fields}
    grid = fields[2].grid
    omega = fields[1].wavenumber.omega
    d = config.plan.d
    L = transducer.focal_length - reference_domain(transducer, d).x_range[0]
    p1_profile = on_axis_profile(fields[1])
    p1_norm = profile_norm(p1_profile)

    tasks = []
    for i in range(2, config.n_harmonics + 1):
        source = rhs_source(i, {m: fields[m] for m in range(1, i)}, medium, omega)
        kernel = GreenKernel.for_grid(fields[i].wavenumber, grid)
        profile_ref = on_axis_profile(fields[i])
        trend_scale = analysis['trend_constant'] * profile_norm(profile_ref) / p1_norm
        context = (i, source, kernel, profile_ref, trend_scale)
        for q0 in Q0_values:
            tasks.append((context, 'Q0', float(q0)))
        for s in fractions:
            tasks.append((context, 'fraction_x', float(s)))
            tasks.append((context, 'fraction_yz', float(s)))

    def run(task):
        (i, source, kernel, profile_ref, trend_scale), control, value = task
        if control == 'Q0':
            box = shrink_domain_by_threshold(source, value)
            fx = min(1.0, (transducer.focal_length + d - box.x_range[0]) / (L + d))
            fyz = min(1.0, max(abs(box.y_range[0]), abs(box.y_range[1])) / transducer.outer_radius)
            trend = trend_scale * math.sqrt(abs(value))
        else:
            fx, fyz = (value, 1.0) if control == 'fraction_x' else (1.0, value)
            box = fraction_box(transducer, L, d, fx, fyz)
            trend = float('nan')
        shrunk = apply_potential(kernel, _mask_outside(source, box)).scaled(-1)
        error = on_axis_error(on_axis_profile(shrunk), profile_ref, p1_profile)
        return ConvergenceRecord(i, control, value, error, fx, fyz, trend)

    records = fan_out(run, tasks, _run_bytes(grid))
    logger.info(f"Domain-shrink study: {len(records)} records over harmonics 2..{config.n_harmonics}")
    return records


def one_percent_fractions(records: Sequence[ConvergenceRecord], threshold: Optional[float] = None) -> Dict:
    """
    Smallest x and y/z fractions per harmonic such that every swept
    fraction at or above it keeps the error below the threshold.
    """
    threshold = get_analysis_config()['error_threshold_percent'] if threshold is None else threshold
    harmonics = sorted({r.harmonic for r in records})
    row = {'name': 'measured', 'x': [], 'yz': []}
    for key, control in (('x', 'fraction_x'), ('yz', 'fraction_yz')):
        for i in harmonics:
            sweep = sorted((r.value, r.error_percent) for r in records
                           if r.harmonic == i and r.control_variable == control)
            smallest = 1.0
            for value, error in reversed(sweep):
                if error >= threshold:
                    break
                smallest = value
            row[key].append(smallest)
    return row


def rule_of_thumb_fractions(n_harmonics: int, L: float, d: float) -> Dict:
    """Rule-of-thumb row: x as a share of L + d, y/z = lambda_i / lambda_2."""
    harmonics = range(2, n_harmonics + 1)
    return {
        'name': 'rule-of-thumb',
        'x': [rule_of_thumb_fraction_x(i, L, d) for i in harmonics],
        'yz': [2.0 / i for i in harmonics],
    }


def write_records(records: Sequence[ConvergenceRecord], out_dir, study: str) -> List:
    """Write records_{study}.csv and plot_{study}.csv."""
    out_dir = Path(out_dir)
    records_path = out_dir / f"records_{study}.csv"
    plot_path = out_dir / f"plot_{study}.csv"
    records_frame(records).to_csv(records_path, index=False)
    plot_frame(records).to_csv(plot_path, index=False)
    return [records_path, plot_path]

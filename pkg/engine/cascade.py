"""
Harmonic cascade on nested meshes.

For i = 2..n the harmonic p_i solves a Helmholtz equation with wavenumber
k_i whose source is quadratic in the lower harmonics:

    p_i = -V_{k_i}[ (beta omega^2 / (2 rho0 c0^4)) i^2 sum_{m=1}^{i-1} p_m p_{i-m} ]

Energy transfer from higher to lower harmonics is neglected, so each
harmonic depends only on those below it.
"""
import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Union

import numpy as np
import pandas as pd

from config import get_cascade_config, get_solver_config
from grid import HarmonicField, MeshPlan, VoxelGrid, interpolate
from medium import Medium, complex_wavenumber
from potential import apply_potential, get_kernel
from transducer import BowlTransducer, IncidentField

logger = logging.getLogger(__name__)


def coefficient(n: int, medium: Medium, omega: float, beta=None, c0=None):
    """(beta omega^2 / (2 rho0 c0^4)) n^2; beta and c0 may be per-voxel arrays."""
    beta = medium.beta if beta is None else beta
    c0 = medium.c0 if c0 is None else c0
    return beta * omega ** 2 / (2 * medium.rho0 * c0 ** 4) * n ** 2


def quadratic_products(n: int, lower: Union[Mapping[int, HarmonicField], Sequence[HarmonicField]]) -> HarmonicField:
    """sum_{m=1}^{n-1} p_m p_{n-m} on the common grid of the lower harmonics."""
    if not isinstance(lower, Mapping):
        lower = {f.harmonic_index: f for f in lower}
    missing = [m for m in range(1, n) if m not in lower]
    if missing:
        raise ValueError(f"Harmonic {n} needs lower harmonics {missing}")

    grid = lower[1].grid
    for m in range(2, n):
        if not lower[m].grid.same_as(grid):
            raise ValueError(f"Lower harmonic {m} is not on the grid of harmonic 1; interpolate first")

    total = np.zeros(grid.dims, dtype=complex)
    for m in range(1, n):
        total += lower[m].values * lower[n - m].values
    return HarmonicField(grid, total)


def rhs_source(n: int, lower, medium: Medium, omega: float) -> HarmonicField:
    """Source density f_n of harmonic n; p_n = -V_{k_n} f_n."""
    products = quadratic_products(n, lower)
    return products.scaled(coefficient(n, medium, omega))


@dataclass
class CascadeConfig:
    medium: Medium
    transducer: BowlTransducer
    plan: MeshPlan
    n_harmonics: int
    record_axis: bool = True
    record_fields: bool = True
    recompute_p1: Optional[bool] = None
    threads: Optional[int] = None

    def __post_init__(self):
        if self.n_harmonics < 2:
            raise ValueError(f"The cascade needs n_harmonics >= 2, got {self.n_harmonics}")
        if self.plan.n_harmonics < self.n_harmonics:
            raise ValueError(f"Plan covers harmonics up to {self.plan.n_harmonics}, "
                             f"{self.n_harmonics} requested")
        if self.recompute_p1 is None:
            self.recompute_p1 = get_cascade_config()['recompute_p1']
        if self.threads is None:
            self.threads = get_solver_config()['threads']


@dataclass
class StageTiming:
    """Wall-clock seconds per stage for one harmonic."""
    harmonic: int
    n_voxels: int
    meshing_s: float = 0.0
    interpolation_s: float = 0.0
    evaluate_green_s: float = 0.0
    compute_p_s: float = 0.0


@dataclass
class CascadeResult:
    fields: List[HarmonicField]
    timings: List[StageTiming] = field(default_factory=list)
    plan: Optional[MeshPlan] = None
    peak_pressure: float = 0.0
    solver_info: Dict[int, Dict[str, float]] = field(default_factory=dict)

    def field(self, harmonic_index: int) -> HarmonicField:
        for f in self.fields:
            if f.harmonic_index == harmonic_index:
                return f
        raise KeyError(f"Harmonic {harmonic_index} not in result")

    @property
    def n_harmonics(self) -> int:
        return len(self.fields)

    def timing_frame(self) -> pd.DataFrame:
        return pd.DataFrame([asdict(t) for t in self.timings])


def _estimate_peak(fields: Sequence[HarmonicField]) -> float:
    """Upper bound on the time-domain peak: sum of the harmonic amplitude peaks."""
    return float(sum(np.abs(f.values).max() for f in fields))


def check_peak_pressure(fields: Sequence[HarmonicField]) -> float:
    peak = _estimate_peak(fields)
    limit = get_cascade_config()['peak_pressure_limit']
    if peak > limit:
        logger.warning(f"Peak pressure {peak / 1e6:.1f} MPa exceeds the weakly nonlinear limit "
                       f"{limit / 1e6:.0f} MPa; neglected back-transfer between harmonics may matter")
    return peak


def incident_on_grid(incident: IncidentField, grid: VoxelGrid) -> HarmonicField:
    """First harmonic evaluated from the sources at every voxel centre."""
    values = incident.evaluate(grid.centres()).reshape(grid.dims)
    return HarmonicField(grid, values, incident.k)


def run_cascade(config: CascadeConfig, incident: Optional[IncidentField] = None) -> CascadeResult:
    """
    Compute p1..p_n on the planned meshes.

    p1 is evaluated from the monopole sources on the grid of p2; later grids
    receive it by interpolation unless recompute_p1 is set. Higher lower
    harmonics are always interpolated onto the current grid.
    """
    medium, transducer, plan = config.medium, config.transducer, config.plan
    incident = incident or IncidentField(transducer, medium, threads=config.threads)
    omega = incident.k.omega

    fields: Dict[int, HarmonicField] = {}
    timings: List[StageTiming] = []

    for i in range(2, config.n_harmonics + 1):
        level = plan.level(i)
        t0 = time.perf_counter()
        grid = VoxelGrid.anchored(level.domain, level.grid.delta_x, i, plan.focus)
        k_i = complex_wavenumber(medium, transducer.f0, i)
        t1 = time.perf_counter()

        if i == 2 or config.recompute_p1:
            p1 = incident_on_grid(incident, grid)
            if i == 2:
                fields[1] = p1
        else:
            p1 = interpolate(fields[1], grid)
        lower = {1: p1}
        for m in range(2, i):
            lower[m] = interpolate(fields[m], grid)
        t2 = time.perf_counter()

        kernel = get_kernel(k_i, grid)
        t3 = time.perf_counter()

        source = rhs_source(i, lower, medium, omega)
        u = apply_potential(kernel, source)
        fields[i] = HarmonicField(grid, -u.values, k_i)
        t4 = time.perf_counter()

        timings.append(StageTiming(i, grid.n_voxels, t1 - t0, t2 - t1, t3 - t2, t4 - t3))
        logger.info(f"Harmonic p{i} on {grid.describe()}: max |p| = {np.abs(fields[i].values).max():.4g} Pa "
                    f"({t4 - t0:.2f} s)")

    ordered = [fields[n] for n in range(1, config.n_harmonics + 1)]
    peak = check_peak_pressure(ordered)
    return CascadeResult(fields=ordered, timings=timings, plan=plan, peak_pressure=peak)

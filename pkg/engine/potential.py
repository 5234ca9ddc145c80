"""
FFT evaluation of the Helmholtz volume potential on a voxel grid.

apply_potential computes the unsigned quadrature sum
    u(x_i) = sum_j w(x_i, x_j) f(x_j),
with w = delta_x^3 G_k(x_i, x_j) off the diagonal and the equal-volume
sphere integral of G_k on it. u approximates the solution of
laplacian(u) + k^2 u = -f; signs and physical constants live in the cascade.
"""
import logging
import math
from collections import OrderedDict
from typing import Optional, Tuple

import numpy as np
from scipy import fft
from scipy.spatial.distance import cdist

from config import get_solver_config
from grid import HarmonicField, VoxelGrid
from medium import Wavenumber

logger = logging.getLogger(__name__)

# Radius of the sphere with the volume of a unit voxel, (3 / (4 pi))^(1/3)
SPHERE_RADIUS_FACTOR = (3.0 / (4.0 * math.pi)) ** (1.0 / 3.0)


def _as_complex(k) -> complex:
    return k.k if isinstance(k, Wavenumber) else complex(k)


def green_function(x, y, k) -> complex:
    """G_k(x, y) = exp(ik|x - y|) / (4 pi |x - y|)."""
    r = float(np.linalg.norm(np.asarray(x, dtype=float) - np.asarray(y, dtype=float)))
    if r == 0:
        raise ValueError("Green's function is singular at x = y")
    return complex(np.exp(1j * _as_complex(k) * r) / (4 * math.pi * r))


def self_weight(k, delta_x: float) -> complex:
    """
    Integral of G_k over the sphere of voxel volume centred on the singularity:
    (exp(ika) (1 - ika) - 1) / k^2 with a = delta_x (3 / 4pi)^(1/3).
    Small |ka| uses the Taylor series, which tends to a^2 / 2 as k -> 0.
    """
    if delta_x <= 0:
        raise ValueError(f"Voxel size must be positive, got {delta_x}")
    k = _as_complex(k)
    a = delta_x * SPHERE_RADIUS_FACTOR

    if abs(k * a) < 0.1:
        # -sum_{n>=2} (n - 1) (ia)^n k^(n-2) / n!
        total, term = 0j, 1j * a          # term = (ia)^n k^(n-2) / n!, seeded for n = 1
        for n in range(2, 24):
            term = term * (1j * a) * (k if n > 2 else 1) / n
            total -= (n - 1) * term
        return complex(total)

    ika = 1j * k * a
    return complex((np.exp(ika) * (1 - ika) - 1) / (k * k))


def _embedding_size(n: int, fast: bool) -> int:
    return fft.next_fast_len(2 * n - 1) if fast else 2 * n


def _signed_offsets(n: int, m: int) -> Tuple[np.ndarray, np.ndarray]:
    """Signed voxel offset stored at each circulant index, and which indices are used."""
    index = np.arange(m)
    offsets = np.where(index < n, index, index - m)
    used = (index < n) | (index > m - n)
    return offsets, used


class GreenKernel:
    """
    Quadrature weights over all relative voxel offsets of a grid, embedded
    in a circulant tensor, with the tensor's forward DFT cached.
    """

    def __init__(self, k, delta_x: float, dims: Tuple[int, int, int],
                 fast_sizes: Optional[bool] = None, workers: Optional[int] = None):
        config = get_solver_config()
        self.wavenumber = k if isinstance(k, Wavenumber) else None
        self.k = _as_complex(k)
        self.delta_x = delta_x
        self.dims = tuple(int(n) for n in dims)
        self.workers = workers or config['threads']
        fast = config['fast_fft_sizes'] if fast_sizes is None else fast_sizes
        self.shape = tuple(_embedding_size(n, fast) for n in self.dims)

        axes = []
        for axis, (n, m) in enumerate(zip(self.dims, self.shape)):
            offsets, used = _signed_offsets(n, m)
            shape = [1, 1, 1]
            shape[axis] = m
            axes.append((offsets.reshape(shape) * delta_x, used.reshape(shape)))

        r = np.sqrt(axes[0][0] ** 2 + axes[1][0] ** 2 + axes[2][0] ** 2)
        used = axes[0][1] & axes[1][1] & axes[2][1]
        with np.errstate(divide='ignore', invalid='ignore'):
            values = delta_x ** 3 * np.exp(1j * self.k * r) / (4 * math.pi * r)
        values[~used] = 0
        values[0, 0, 0] = self_weight(self.k, delta_x)

        self.values = values
        self.values_hat = fft.fftn(values, workers=self.workers)
        logger.debug(f"Green kernel ready: dims {self.dims}, embedding {self.shape}, k = {self.k:.6g}")

    @classmethod
    def for_grid(cls, k, grid: VoxelGrid, **kwargs) -> 'GreenKernel':
        return cls(k, grid.delta_x, grid.dims, **kwargs)

    def matches(self, grid: VoxelGrid) -> bool:
        return tuple(grid.dims) == self.dims and math.isclose(grid.delta_x, self.delta_x, rel_tol=1e-12)

    def weight(self, offset: Tuple[int, int, int]) -> complex:
        """Quadrature weight between voxels separated by a signed index offset."""
        index = tuple(o % m for o, m in zip(offset, self.shape))
        return complex(self.values[index])

    def convolve(self, values: np.ndarray) -> np.ndarray:
        """Toeplitz product of the weights with a (Nx, Ny, Nz) array."""
        if values.shape != self.dims:
            raise ValueError(f"Input shape {values.shape} does not match kernel dims {self.dims}")
        spectrum = fft.fftn(values, s=self.shape, workers=self.workers)
        full = fft.ifftn(spectrum * self.values_hat, workers=self.workers)
        return full[:self.dims[0], :self.dims[1], :self.dims[2]]


_KERNEL_CACHE: 'OrderedDict[tuple, GreenKernel]' = OrderedDict()


def get_kernel(k, grid: VoxelGrid) -> GreenKernel:
    """Kernel for (k, grid), reused across calls with the same wavenumber and grid."""
    config = get_solver_config()
    key = (_as_complex(k), grid.delta_x, tuple(grid.dims), config['fast_fft_sizes'], config['threads'])
    if key in _KERNEL_CACHE:
        _KERNEL_CACHE.move_to_end(key)
        return _KERNEL_CACHE[key]

    kernel = GreenKernel.for_grid(k, grid)
    _KERNEL_CACHE[key] = kernel
    while len(_KERNEL_CACHE) > config['kernel_cache_size']:
        _KERNEL_CACHE.popitem(last=False)
    return kernel


def clear_kernel_cache() -> None:
    _KERNEL_CACHE.clear()


def apply_potential(kernel: GreenKernel, f: HarmonicField) -> HarmonicField:
    """u = V f on f's grid, via zero-padded FFT convolution."""
    if not kernel.matches(f.grid):
        raise ValueError(f"Field grid {f.grid.dims} (dx={f.grid.delta_x}) does not match the kernel "
                         f"{kernel.dims} (dx={kernel.delta_x})")
    return HarmonicField(f.grid, kernel.convolve(f.values), kernel.wavenumber or f.wavenumber)


# --- Direct summation ---

def _weight_rows(k: complex, grid: VoxelGrid, rows: np.ndarray, centres: np.ndarray) -> np.ndarray:
    r = cdist(centres[rows], centres)
    with np.errstate(divide='ignore', invalid='ignore'):
        w = grid.delta_x ** 3 * np.exp(1j * k * r) / (4 * math.pi * r)
    w[r == 0] = self_weight(k, grid.delta_x)
    return w


def _check_guard(grid: VoxelGrid) -> None:
    limit = get_solver_config()['direct_oracle_max_voxels']
    if grid.n_voxels > limit:
        raise ValueError(f"Direct summation limited to {limit} voxels, grid has {grid.n_voxels}")


def potential_matrix(k, grid: VoxelGrid) -> np.ndarray:
    """Dense (N, N) matrix of quadrature weights, rows and columns in C order."""
    _check_guard(grid)
    centres = grid.centres()
    return _weight_rows(_as_complex(k), grid, np.arange(len(centres)), centres)


def direct_potential_oracle(k, grid: VoxelGrid, f: HarmonicField, block: int = 256) -> HarmonicField:
    """Same quadrature as apply_potential by explicit summation over voxel pairs."""
    _check_guard(grid)
    if f.values.shape != tuple(grid.dims):
        raise ValueError(f"Field shape {f.values.shape} does not match grid dims {grid.dims}")

    k_value = _as_complex(k)
    centres = grid.centres()
    flat = f.values.ravel()
    out = np.empty(len(flat), dtype=complex)
    for start in range(0, len(flat), block):
        rows = np.arange(start, min(start + block, len(flat)))
        out[rows] = _weight_rows(k_value, grid, rows, centres) @ flat

    wavenumber = k if isinstance(k, Wavenumber) else f.wavenumber
    return HarmonicField(grid, out.reshape(grid.dims), wavenumber)

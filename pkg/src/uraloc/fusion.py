"""Multi-array fusion: closest points between AoA rays and direct position determination."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from itertools import combinations
from typing import Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .aoa import decompose, sample_covariance
from .geometry import Ray, UraConfig, local_unit_vectors, phase_center_factor, steering_matrix

PARALLEL_TOL = 1e-10
DEFAULT_RADIUS = 0.1
DEFAULT_VOXEL = 0.005
DEFAULT_MAX_ITERS = 4


class DegenerateRaysError(ValueError):
    """Two rays are (nearly) parallel, so their closest points are not unique."""


class NoFixError(ValueError):
    pass


def closest_points(ray_h: Ray, ray_i: Ray) -> tuple[NDArray[np.float64], NDArray[np.float64], tuple[float, float]]:
    """Closest pair of points between two lines and their parameters ``(t_h, t_i)``.

    Solves the normal equations making the connecting segment perpendicular to
    both directions.
    """
    dh, di = ray_h.direction, ray_i.direction
    w = ray_h.anchor - ray_i.anchor
    b = float(dh @ di)
    system = np.array([[-1.0, b], [-b, 1.0]])
    det = -1.0 + b * b
    if abs(det) <= PARALLEL_TOL:
        raise DegenerateRaysError(f"rays are near-parallel (|det| = {abs(det):.3e})")
    t_h, t_i = np.linalg.solve(system, np.array([w @ dh, w @ di]))
    return ray_h.point_at(t_h), ray_i.point_at(t_i), (float(t_h), float(t_i))


@dataclass
class GeometricFix:
    position: NDArray[np.float64]
    pairwise_points: list[tuple[NDArray[np.float64], NDArray[np.float64]]]
    residual: float
    skipped_pairs: list[tuple[int, int]] = field(default_factory=list)
    behind: list[tuple[int, int]] = field(default_factory=list)


def geometric_position(rays: Sequence[Ray]) -> GeometricFix:
    """Mean of the closest points of every non-degenerate ray pair.

    Near-parallel pairs are skipped and listed; pairs whose closest points lie
    behind an anchor (negative parameter) are kept and listed in ``behind``.
    """
    if len(rays) < 2:
        raise NoFixError("need at least two rays")
    points, skipped, behind, gaps = [], [], [], []
    for h, i in combinations(range(len(rays)), 2):
        try:
            p_h, p_i, (t_h, t_i) = closest_points(rays[h], rays[i])
        except DegenerateRaysError:
            skipped.append((h, i))
            continue
        points.append((p_h, p_i))
        gaps.append(float(np.linalg.norm(p_h - p_i)))
        if t_h < 0 or t_i < 0:
            behind.append((h, i))
    if not points:
        raise NoFixError("every ray pair is degenerate")
    position = np.mean([p for pair in points for p in pair], axis=0)
    return GeometricFix(position, points, max(gaps), skipped, behind)


@dataclass
class Lsoi:
    """Cubic lattice of pitch ``voxel`` around ``center``, clipped to a ball of ``radius``."""

    center: NDArray[np.float64]
    radius: float = DEFAULT_RADIUS
    voxel: float = DEFAULT_VOXEL
    points: NDArray[np.float64] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        if not self.radius > 0 or not self.voxel > 0:
            raise ValueError("radius and voxel must be positive")
        self.center = np.asarray(self.center, dtype=float).reshape(3)
        n = int(math.floor(self.radius / self.voxel + 1e-9))
        ax = np.arange(-n, n + 1)
        offs = np.stack(np.meshgrid(ax, ax, ax, indexing="ij"), axis=-1).reshape(-1, 3)
        keep = np.sum(offs**2, axis=1) * self.voxel**2 <= self.radius**2 * (1 + 1e-12)
        self.points = self.center + offs[keep] * self.voxel

    @property
    def size(self) -> int:
        return self.points.shape[0]


def build_virtual_steering(uras: Sequence[UraConfig], points: ArrayLike, model: str = "plane") -> NDArray[np.complex128]:
    """Stacked steering vectors of the synchronized virtual array, shape (K, sum M_i).

    Each block is array ``i``'s response to point ``p`` with its range phase
    ``exp(-j k |p - c_i|)``; dividing by array 0's range phase leaves the
    first block as a center-referenced plane-wave steering vector and later
    blocks scaled by the inter-array phase ``2 pi (|p - c_0| - |p - c_i|) / lambda``.
    Blocks are normalised to unit norm.  ``model="exact"`` uses per-element
    path lengths instead of the plane-wave approximation inside each array.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    blocks, ranges = [], []
    for ura in uras:
        unit, rng = local_unit_vectors(ura, points)
        k = 2.0 * np.pi / ura.wavelength
        if model == "plane":
            theta = np.arccos(np.clip(unit[:, 2], -1.0, 1.0))
            phi = np.arctan2(unit[:, 1], unit[:, 0])
            a = steering_matrix(ura.mx, ura.my, ura.spacing_wavelengths, theta, phi)
            a = a * phase_center_factor(ura, unit)[:, None]
            blocks.append(a * np.exp(-1j * k * rng)[:, None])
        elif model == "exact":
            dist = np.linalg.norm(points[:, None, :] - ura.element_positions()[None, :, :], axis=-1)
            blocks.append(np.exp(-1j * k * dist))
        else:
            raise ValueError(f"unknown steering model {model!r}")
        ranges.append(rng)
    ref = np.exp(1j * 2.0 * np.pi / uras[0].wavelength * ranges[0])[:, None]
    return np.hstack([b * ref / math.sqrt(b.shape[1]) for b in blocks])


def noise_subspace(stacked: ArrayLike, dimension: int = 1) -> NDArray[np.complex128]:
    return decompose(sample_covariance(stacked), dimension).noise_basis


def dpd_spectrum(noise_basis: NDArray[np.complex128], steering: NDArray[np.complex128], workers: int = 1,
                 chunk: int = 8192) -> NDArray[np.float64]:
    """MUSIC pseudo-spectrum of the stacked array at every steering row."""
    if steering.shape[1] != noise_basis.shape[0]:
        raise ValueError(
            f"steering dimension {steering.shape[1]} does not match the stacked capture ({noise_basis.shape[0]})"
        )
    en_conj = noise_basis.conj()

    def run(sl):
        a = steering[sl]
        proj = a @ en_conj
        norm = np.sum(np.abs(a) ** 2, axis=1)
        return norm / (np.sum(proj.real**2 + proj.imag**2, axis=1) + 1e-12 * norm)

    chunks = [slice(i, min(i + chunk, steering.shape[0])) for i in range(0, steering.shape[0], chunk)]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return np.concatenate(list(pool.map(run, chunks)))
    return np.concatenate([run(sl) for sl in chunks])


@dataclass
class PositionFix:
    position: NDArray[np.float64]
    iterations: int
    spectrum_peak: float
    method: str
    converged: bool = True
    residual: float = 0.0
    lattice_position: NDArray[np.float64] | None = None
    centers: list[NDArray[np.float64]] = field(default_factory=list)
    lsoi: Lsoi | None = field(default=None, repr=False)
    lsoi_values: NDArray[np.float64] | None = field(default=None, repr=False)


def polish_peak(noise_basis: NDArray[np.complex128], uras: Sequence[UraConfig], start: ArrayLike, step: float,
                model: str = "plane", tol: float = 1e-6) -> tuple[NDArray[np.float64], float]:
    """Sub-voxel maximum of the stacked spectrum by Nelder-Mead on its logarithm.

    The stacked aperture makes the peak a ridge narrower than a typical voxel,
    so the best lattice point can sit well away from the true maximum.
    """
    from scipy.optimize import minimize

    start = np.asarray(start, dtype=float)

    def cost(x):
        return -math.log(dpd_spectrum(noise_basis, build_virtual_steering(uras, x[None, :], model))[0])

    simplex = np.vstack([start, start + step * np.eye(3)])
    res = minimize(cost, start, method="Nelder-Mead",
                   options={"initial_simplex": simplex, "xatol": tol, "fatol": 1e-9, "maxiter": 2000})
    return res.x, math.exp(-res.fun)


def locate_dpd(stacked: ArrayLike, uras: Sequence[UraConfig], init: GeometricFix | ArrayLike,
               radius: float = DEFAULT_RADIUS, voxel: float = DEFAULT_VOXEL, max_iters: int = DEFAULT_MAX_ITERS,
               dimension: int = 1, model: str = "plane", polish: bool = True, workers: int = 1) -> PositionFix:
    """Progressive local traversal of the stacked-array spectrum.

    Starting from ``init``, the search ball is re-centered on its spectrum
    maximum until the center moves by less than ``voxel`` or ``max_iters``
    balls have been evaluated.  Without convergence the best point seen so far
    is returned with ``converged=False``.  With ``polish`` the lattice maximum
    is refined off-lattice (see :func:`polish_peak`), and kept only if it stays
    inside the final ball and raises the spectrum.  The polish also starts from
    ``init``: when the lattice misses the narrow true ridge its best sample can
    sit on a neighboring fringe, while the initial fix usually lies on the
    ridge's flank.
    """
    if max_iters < 1:
        raise ValueError("max_iters must be at least 1")
    stacked = np.asarray(stacked, dtype=complex)
    expected = sum(u.n_elements for u in uras)
    if stacked.shape[0] != expected:
        raise ValueError(f"stacked capture has {stacked.shape[0]} rows, arrays have {expected} elements")
    center = np.asarray(init.position if isinstance(init, GeometricFix) else init, dtype=float).reshape(3)
    en = noise_subspace(stacked, dimension)
    centers = [center]
    best = (-np.inf, center, None, None)
    converged = False
    iterations = 0
    for iterations in range(1, max_iters + 1):
        lsoi = Lsoi(center, radius, voxel)
        values = dpd_spectrum(en, build_virtual_steering(uras, lsoi.points, model), workers)
        k = int(np.argmax(values))
        peak = lsoi.points[k]
        if values[k] > best[0]:
            best = (float(values[k]), peak, lsoi, values)
        moved = float(np.linalg.norm(peak - center))
        center = peak
        centers.append(center)
        if moved < voxel * (1 - 1e-9):
            converged = True
            break
    if converged:
        value, position = float(values[k]), peak
    else:
        value, position, lsoi, values = best
    lattice_position = position
    if polish:
        for start in (position, centers[0]):
            refined, refined_value = polish_peak(en, uras, start, voxel, model)
            if refined_value > value and np.linalg.norm(refined - lsoi.center) <= radius:
                position, value = refined, refined_value
    return PositionFix(position, iterations, value, "dpd", converged, lattice_position=lattice_position,
                       centers=centers, lsoi=lsoi, lsoi_values=values)


def smooth_trajectory(positions: ArrayLike, window: int = 5) -> NDArray[np.float64]:
    """Sliding median along each axis; windows are truncated at the ends."""
    pts = np.asarray(positions, dtype=float)
    if pts.size == 0:
        raise ValueError("trajectory is empty")
    if window < 1 or window % 2 == 0:
        raise ValueError("window must be a positive odd integer")
    pts = pts.reshape(len(pts), -1)
    half = window // 2
    out = np.empty_like(pts)
    for i in range(len(pts)):
        out[i] = np.median(pts[max(0, i - half) : i + half + 1], axis=0)
    return out

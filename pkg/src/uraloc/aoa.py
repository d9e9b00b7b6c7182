"""Covariance estimation, spatial smoothing and 2D MUSIC for uniform rectangular arrays."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .geometry import Direction, UraConfig, steering_matrix, wrap_phase
from .simulate import CsiCapture

METHODS = ("music", "ss-music", "i-ssmusic")
EPS_FLOOR = 1e-12


@dataclass(frozen=True)
class ArrayShape:
    """Element counts and spacing (in wavelengths) that fix a steering vector."""

    mx: int
    my: int
    spacing_wavelengths: float

    @classmethod
    def of(cls, ura: UraConfig) -> "ArrayShape":
        return cls(ura.mx, ura.my, ura.spacing_wavelengths)

    @property
    def n_elements(self) -> int:
        return self.mx * self.my


@dataclass
class Covariance:
    values: NDArray[np.complex128]
    snapshots_used: int

    @property
    def size(self) -> int:
        return self.values.shape[0]

    def trace(self) -> float:
        return float(np.real(np.trace(self.values)))


@dataclass
class SubspaceDecomposition:
    signal_basis: NDArray[np.complex128]
    noise_basis: NDArray[np.complex128]
    eigenvalues: NDArray[np.float64]

    @property
    def dimension(self) -> int:
        return self.signal_basis.shape[1]


@dataclass(frozen=True)
class SmoothingSpec:
    """Subarray size ``m1 x m2`` and smoothing mode (``"forward"`` or ``"forward-backward"``)."""

    m1: int
    m2: int
    mode: str = "forward-backward"

    def __post_init__(self) -> None:
        if self.mode not in ("forward", "forward-backward"):
            raise ValueError(f"unknown smoothing mode {self.mode!r}")
        if self.m1 < 1 or self.m2 < 1:
            raise ValueError("subarray dimensions must be positive")

    def counts(self, shape: ArrayShape) -> tuple[int, int]:
        if self.m1 > shape.mx or self.m2 > shape.my:
            raise ValueError(f"subarray {self.m1}x{self.m2} larger than array {shape.mx}x{shape.my}")
        return shape.mx - self.m1 + 1, shape.my - self.m2 + 1

    def subarray(self, shape: ArrayShape) -> ArrayShape:
        return ArrayShape(self.m1, self.m2, shape.spacing_wavelengths)


@dataclass
class SpectrumGrid:
    """Pseudo-spectrum on an (elevation, azimuth) grid; ``values[i, j]`` is at ``(theta[i], phi[j])``."""

    theta: NDArray[np.float64]
    phi: NDArray[np.float64]
    values: NDArray[np.float64]

    def __post_init__(self) -> None:
        if self.values.shape != (self.theta.size, self.phi.size):
            raise ValueError("spectrum shape does not match its axes")
        if np.any(np.diff(self.theta) <= 0) or np.any(np.diff(self.phi) <= 0):
            raise ValueError("spectrum axes must be strictly increasing")


@dataclass(frozen=True)
class AoaEstimate:
    direction: Direction
    spectrum_value: float
    array_id: str = ""


class PeakSearch(NamedTuple):
    peaks: list[AoaEstimate]
    shortfall: bool


def angle_grid(step_deg: float = 0.2, theta_max_deg: float = 90.0) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
    """Default search axes: elevation ``[0, theta_max]``, azimuth ``[-180, 180)``, in radians."""
    n_theta = int(round(theta_max_deg / step_deg)) + 1
    n_phi = int(round(360.0 / step_deg))
    theta = np.radians(np.linspace(0.0, theta_max_deg, n_theta))
    phi = np.radians(-180.0 + step_deg * np.arange(n_phi))
    return theta, phi


def _full_snapshots(capture: CsiCapture | ArrayLike) -> NDArray[np.complex128]:
    if isinstance(capture, CsiCapture):
        if capture.is_switched:
            raise ValueError("covariance needs a calibrated (unswitched) capture")
        return capture.values
    return np.atleast_2d(np.asarray(capture, dtype=complex))


def sample_covariance(capture: CsiCapture | ArrayLike) -> Covariance:
    y = _full_snapshots(capture)
    t = y.shape[1]
    if t < 1:
        raise ValueError("need at least one snapshot")
    r = y @ y.conj().T / t
    return Covariance(0.5 * (r + r.conj().T), t)


def decompose(cov: Covariance | ArrayLike, dimension: int) -> SubspaceDecomposition:
    """Split eigenvectors into the ``dimension`` dominant ones and the rest."""
    r = cov.values if isinstance(cov, Covariance) else np.asarray(cov, dtype=complex)
    m = r.shape[0]
    if not 1 <= dimension < m:
        raise ValueError(f"signal dimension must be in [1, {m - 1}], got {dimension}")
    scale = max(np.abs(r).max(), 1e-300)
    if np.abs(r - r.conj().T).max() > 1e-10 * scale:
        raise ValueError("covariance is not Hermitian")
    w, v = np.linalg.eigh(0.5 * (r + r.conj().T))
    order = np.argsort(w)[::-1]
    w, v = w[order], v[:, order]
    return SubspaceDecomposition(v[:, :dimension], v[:, dimension:], w)


def estimate_signal_dimension(eigenvalues: ArrayLike) -> int:
    """Model order by the largest ratio between consecutive descending eigenvalues."""
    w = np.sort(np.asarray(eigenvalues, dtype=float))[::-1]
    w = np.maximum(w, 1e-15 * max(w[0], 1e-300))
    return int(np.argmax(w[:-1] / w[1:])) + 1


def subarray_indices(shape: ArrayShape, spec: SmoothingSpec) -> list[NDArray[np.int_]]:
    """Element indices of every forward subarray, each in x-major order."""
    hx, hy = spec.counts(shape)
    idx = np.arange(shape.n_elements).reshape(shape.my, shape.mx)
    return [idx[j : j + spec.m2, i : i + spec.m1].ravel() for j in range(hy) for i in range(hx)]


def exchange_matrix(n: int) -> NDArray[np.float64]:
    return np.fliplr(np.eye(n))


def _smooth(r: NDArray[np.complex128], shape: ArrayShape, spec: SmoothingSpec, backward: bool):
    blocks = subarray_indices(shape, spec)
    rf = sum(r[np.ix_(b, b)] for b in blocks) / len(blocks)
    if backward:
        rf = 0.5 * (rf + rf[::-1, ::-1].conj())
    return 0.5 * (rf + rf.conj().T)


def _covariance_and_shape(capture, shape: ArrayShape | None):
    if isinstance(capture, Covariance):
        if shape is None:
            raise ValueError("array shape is required when smoothing a bare covariance")
        return capture, shape
    cov = sample_covariance(capture)
    if shape is None:
        if not isinstance(capture, CsiCapture):
            raise ValueError("array shape is required for bare snapshot matrices")
        shape = ArrayShape.of(capture.ura)
    return cov, shape


def forward_smooth(capture: CsiCapture | Covariance | ArrayLike, spec: SmoothingSpec,
                   shape: ArrayShape | None = None) -> Covariance:
    """Average of the covariances of every contiguous ``m1 x m2`` subarray."""
    cov, shape = _covariance_and_shape(capture, shape)
    if cov.size != shape.n_elements:
        raise ValueError("covariance size does not match the array shape")
    return Covariance(_smooth(cov.values, shape, spec, backward=False), cov.snapshots_used)


def forward_backward_smooth(capture: CsiCapture | Covariance | ArrayLike, spec: SmoothingSpec,
                            shape: ArrayShape | None = None) -> Covariance:
    """Forward smoothing followed by averaging with the exchange-conjugated matrix."""
    cov, shape = _covariance_and_shape(capture, shape)
    if cov.size != shape.n_elements:
        raise ValueError("covariance size does not match the array shape")
    return Covariance(_smooth(cov.values, shape, spec, backward=True), cov.snapshots_used)


def _spectrum_rows(noise_proj: NDArray[np.complex128], shape: ArrayShape, theta, phi):
    a = steering_matrix(shape.mx, shape.my, shape.spacing_wavelengths, theta[:, None], phi[None, :])
    norm = float(shape.n_elements)
    # ||E_N^H a||^2 without forming E_N E_N^H
    proj = np.einsum("tpm,mk->tpk", a, noise_proj.conj())
    denom = np.sum(proj.real**2 + proj.imag**2, axis=-1)
    return norm / (denom + EPS_FLOOR * norm)


def music_spectrum(decomp: SubspaceDecomposition, shape: ArrayShape | UraConfig, theta: ArrayLike | None = None,
                   phi: ArrayLike | None = None, workers: int = 1, rows_per_chunk: int = 32) -> SpectrumGrid:
    """MUSIC pseudo-spectrum ``a^H a / (a^H E_N E_N^H a + eps)`` on an angle grid.

    Rows of the grid are evaluated in independent chunks, optionally on a
    thread pool; the result does not depend on the split.
    """
    if isinstance(shape, UraConfig):
        shape = ArrayShape.of(shape)
    if decomp.noise_basis.shape[0] != shape.n_elements:
        raise ValueError(
            f"decomposition has dimension {decomp.noise_basis.shape[0]}, geometry has {shape.n_elements} elements"
        )
    if theta is None or phi is None:
        default_theta, default_phi = angle_grid()
        theta = default_theta if theta is None else theta
        phi = default_phi if phi is None else phi
    theta = np.asarray(theta, dtype=float)
    phi = np.asarray(phi, dtype=float)
    en = decomp.noise_basis
    chunks = [slice(i, min(i + rows_per_chunk, theta.size)) for i in range(0, theta.size, rows_per_chunk)]

    def run(sl):
        return _spectrum_rows(en, shape, theta[sl], phi)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, chunks))
    else:
        parts = [run(sl) for sl in chunks]
    return SpectrumGrid(theta, phi, np.vstack(parts))


def _neighbour_max(values: NDArray[np.float64]) -> NDArray[np.float64]:
    """Largest of the 8 neighbours; azimuth wraps, elevation edges pad with -inf."""
    padded = np.pad(values, ((1, 1), (0, 0)), constant_values=-np.inf)
    best = np.full(values.shape, -np.inf)
    for di in (-1, 0, 1):
        rows = padded[1 + di : 1 + di + values.shape[0]]
        for dj in (-1, 0, 1):
            if di == 0 and dj == 0:
                continue
            best = np.maximum(best, np.roll(rows, -dj, axis=1))
    return best


def _refine(values, i, j, theta, phi):
    """Vertex of the parabola through a peak and its two neighbours along each axis."""
    def vertex(vm, v0, vp):
        den = vm - 2 * v0 + vp
        return 0.0 if den >= 0 else float(np.clip(0.5 * (vm - vp) / den, -0.5, 0.5))

    n_t, n_p = values.shape
    t = theta[i]
    if 0 < i < n_t - 1:
        t += vertex(values[i - 1, j], values[i, j], values[i + 1, j]) * (theta[i + 1] - theta[i - 1]) / 2
    dp = phi[1] - phi[0] if n_p > 1 else 0.0
    p = phi[j] + vertex(values[i, j - 1], values[i, j], values[i, (j + 1) % n_p]) * dp
    return min(max(t, 0.0), math.pi / 2), p


def find_peaks(spectrum: SpectrumGrid, count: int, refine: bool = False, array_id: str = "") -> PeakSearch:
    """The ``count`` largest strict local maxima, by descending value.

    Ties go to the lower elevation, then the lower azimuth.  The elevation-zero
    row is a single physical direction and is treated as one candidate.
    """
    if count < 1:
        raise ValueError("peak count must be at least 1")
    v = spectrum.values
    strict = v > _neighbour_max(v)
    if spectrum.theta[0] == 0.0:
        strict[0, :] = False
        ring = v[1].max() if v.shape[0] > 1 else -np.inf
        if v[0, 0] > ring:
            strict[0, 0] = True
    ii, jj = np.nonzero(strict)
    order = sorted(range(ii.size), key=lambda k: (-v[ii[k], jj[k]], spectrum.theta[ii[k]], spectrum.phi[jj[k]]))
    peaks = []
    for k in order[:count]:
        i, j = ii[k], jj[k]
        if refine:
            t, p = _refine(v, i, j, spectrum.theta, spectrum.phi)
        else:
            t, p = spectrum.theta[i], spectrum.phi[j]
        peaks.append(AoaEstimate(Direction(t, p), float(v[i, j]), array_id))
    return PeakSearch(peaks, len(peaks) < count)


@dataclass
class AoaResult:
    estimates: list[AoaEstimate]
    spectrum: SpectrumGrid
    shortfall: bool
    covariance: Covariance
    decomposition: SubspaceDecomposition


def default_smoothing(shape: ArrayShape, mode: str = "forward-backward") -> SmoothingSpec:
    """``(Mx, My - 1)`` subarrays: two of them on a 3x4 array."""
    return SmoothingSpec(shape.mx, max(1, shape.my - 1), mode)


def estimate_aoa(capture: CsiCapture, method: str = "i-ssmusic", spec: SmoothingSpec | None = None,
                 sources: int = 1, dimension: int | None = None, theta: ArrayLike | None = None,
                 phi: ArrayLike | None = None, refine: bool = False, workers: int = 1) -> AoaResult:
    """Covariance, optional smoothing, MUSIC spectrum and peak search in one call.

    ``method`` picks the raw covariance (``music``), forward smoothing
    (``ss-music``) or forward-backward smoothing (``i-ssmusic``).  The signal
    dimension defaults to ``sources``; pass ``dimension=0`` to estimate it from
    the eigenvalue gaps.
    """
    if method not in METHODS:
        raise ValueError(f"unknown AoA method {method!r}; choose from {METHODS}")
    shape = ArrayShape.of(capture.ura)
    cov = sample_covariance(capture)
    steer_shape = shape
    if method != "music":
        mode = "forward" if method == "ss-music" else "forward-backward"
        spec = default_smoothing(shape, mode) if spec is None else SmoothingSpec(spec.m1, spec.m2, mode)
        cov = (forward_smooth if mode == "forward" else forward_backward_smooth)(cov, spec, shape)
        steer_shape = spec.subarray(shape)
    if dimension is None:
        dimension = sources
    elif dimension == 0:
        dimension = estimate_signal_dimension(np.linalg.eigvalsh(cov.values))
    dimension = min(dimension, cov.size - 1)
    decomp = decompose(cov, dimension)
    spectrum = music_spectrum(decomp, steer_shape, theta, phi, workers=workers)
    found = find_peaks(spectrum, sources, refine=refine, array_id=capture.array_id)
    return AoaResult(found.peaks, spectrum, found.shortfall, cov, decomp)


def angular_errors(estimate: Direction, truth: Direction) -> tuple[float, float]:
    """Absolute (elevation, wrapped azimuth) errors in radians."""
    return abs(estimate.elevation - truth.elevation), abs(float(wrap_phase(estimate.azimuth - truth.azimuth)))


def match_estimates(estimates: list[Direction], truths: list[Direction]) -> list[tuple[int, int]]:
    """Assignment of estimates to truths minimising total angular error (Hungarian)."""
    from scipy.optimize import linear_sum_assignment

    if not estimates or not truths:
        return []
    cost = np.array([[sum(angular_errors(e, t)) for t in truths] for e in estimates])
    rows, cols = linear_sum_assignment(cost)
    return list(zip(rows.tolist(), cols.tolist()))

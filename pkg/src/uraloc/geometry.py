"""Array layouts, angle conventions and steering vectors for uniform rectangular arrays.

Element ordering is x-major: element ``m = m_y * Mx + m_x``.  Angles are in
radians internally; elevation is measured down from the array's local +z axis
(boresight) and azimuth counterclockwise from its local +x axis.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.spatial.transform import Rotation

SPEED_OF_LIGHT = 299792458.0
DEFAULT_FREQUENCY = 5.2e9
N_CHAINS = 3


def wrap_phase(phase: ArrayLike) -> NDArray[np.float64] | float:
    """Wrap phases to ``[-pi, pi)``."""
    wrapped = np.mod(np.asarray(phase, dtype=float) + np.pi, 2.0 * np.pi) - np.pi
    if wrapped.ndim == 0:
        return float(wrapped)
    return wrapped


def wavelength_for(frequency: float) -> float:
    return SPEED_OF_LIGHT / frequency


@dataclass(frozen=True)
class Direction:
    """Arrival direction (elevation, azimuth) in radians.

    Azimuth is canonicalized to ``[-pi, pi)``; inputs in ``[0, 2pi)`` are accepted.
    """

    elevation: float
    azimuth: float

    def __post_init__(self) -> None:
        theta = float(self.elevation)
        if not math.isfinite(theta) or not -1e-12 <= theta <= math.pi / 2 + 1e-12:
            raise ValueError(f"elevation {theta!r} rad outside [0, pi/2]")
        object.__setattr__(self, "elevation", min(max(theta, 0.0), math.pi / 2))
        phi = float(self.azimuth)
        if not math.isfinite(phi):
            raise ValueError("azimuth must be finite")
        object.__setattr__(self, "azimuth", wrap_phase(phi))

    @classmethod
    def from_degrees(cls, elevation: float, azimuth: float) -> "Direction":
        return cls(math.radians(elevation), math.radians(azimuth))

    def degrees(self) -> tuple[float, float]:
        return math.degrees(self.elevation), math.degrees(self.azimuth)

    def unit_vector(self) -> NDArray[np.float64]:
        """Unit vector in the array's local frame pointing toward the source."""
        st = math.sin(self.elevation)
        return np.array([st * math.cos(self.azimuth), st * math.sin(self.azimuth), math.cos(self.elevation)])


@dataclass(frozen=True)
class Ray:
    """Half-line ``anchor + t * direction`` with a unit direction."""

    anchor: NDArray[np.float64]
    direction: NDArray[np.float64]

    def __post_init__(self) -> None:
        anchor = np.asarray(self.anchor, dtype=float).reshape(3)
        direction = np.asarray(self.direction, dtype=float).reshape(3)
        norm = np.linalg.norm(direction)
        if not norm > 0:
            raise ValueError("ray direction must be nonzero")
        object.__setattr__(self, "anchor", anchor)
        object.__setattr__(self, "direction", direction / norm)

    def point_at(self, t: float) -> NDArray[np.float64]:
        return self.anchor + t * self.direction


def rotation_from_euler(yaw: float = 0.0, pitch: float = 0.0, roll: float = 0.0) -> NDArray[np.float64]:
    """Local-to-world rotation ``Rz(yaw) @ Ry(pitch) @ Rx(roll)``; angles in degrees."""
    return Rotation.from_euler("ZYX", [yaw, pitch, roll], degrees=True).as_matrix()


def euler_from_rotation(rotation: ArrayLike) -> tuple[float, float, float]:
    """Inverse of :func:`rotation_from_euler`; at pitch +-90 the roll is folded into yaw."""
    with warnings.catch_warnings():
        warnings.filterwarnings("ignore", message="Gimbal lock")
        yaw, pitch, roll = Rotation.from_matrix(np.asarray(rotation)).as_euler("ZYX", degrees=True)
    return float(yaw), float(pitch), float(roll)


def default_grouping(n_elements: int) -> tuple[tuple[tuple[int, ...], ...], tuple[int, ...]]:
    """Switch groups and calibration-point antennas (0-based) for ``n_elements``.

    Groups are consecutive triples, so element ``m`` is wired to RF chain
    ``m % 3``.  Group ``g`` designates the member on chain ``(0, 2, 1)[g % 3]``
    as its CPA, which keeps every window of three consecutive CPAs on three
    distinct chains.  For twelve elements this yields CPAs ``{0, 5, 7, 9}``.
    """
    groups = tuple(
        tuple(range(start, min(start + N_CHAINS, n_elements))) for start in range(0, n_elements, N_CHAINS)
    )
    cpas = []
    for g, members in enumerate(groups):
        wanted = (0, 2, 1)[g % 3]
        pick = next((m for m in members if m % N_CHAINS == wanted), None)
        if pick is None:
            taken = {c % N_CHAINS for c in cpas[-2:]}
            pick = next((m for m in members if m % N_CHAINS not in taken), members[0])
        cpas.append(pick)
    return groups, tuple(cpas)


def redundant_groups(cpas: tuple[int, ...]) -> tuple[tuple[int, ...], ...]:
    """Redundant CPA packets: sliding windows of three consecutive CPAs.

    ``(0, 5, 7, 9)`` gives ``((0, 5, 7), (5, 7, 9))``.  With two groups a single
    pair is sampled; a single group needs no redundancy.
    """
    if len(cpas) < 2:
        return ()
    if len(cpas) == 2:
        return (tuple(cpas),)
    return tuple(tuple(cpas[i : i + 3]) for i in range(len(cpas) - 2))


@dataclass(frozen=True)
class UraConfig:
    """Geometry, pose and switch grouping of one uniform rectangular array.

    ``center`` is the geometric center of the aperture and the array's phase
    reference point.  ``groups`` and ``cpas`` hold 0-based element indices.
    """

    mx: int
    my: int
    wavelength: float = field(default_factory=lambda: wavelength_for(DEFAULT_FREQUENCY))
    spacing: float | None = None
    center: NDArray[np.float64] = field(default_factory=lambda: np.zeros(3))
    rotation: NDArray[np.float64] = field(default_factory=lambda: np.eye(3))
    groups: tuple[tuple[int, ...], ...] | None = None
    cpas: tuple[int, ...] | None = None
    array_id: str = "ura0"

    def __post_init__(self) -> None:
        if self.mx < 2 or self.my < 2:
            raise ValueError(f"URA needs at least 2x2 elements, got {self.mx}x{self.my}")
        if not self.wavelength > 0:
            raise ValueError("wavelength must be positive")
        spacing = 0.54 * self.wavelength if self.spacing is None else float(self.spacing)
        if not spacing > 0:
            raise ValueError("element spacing must be positive")
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float).reshape(3))
        rotation = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        if not np.allclose(rotation @ rotation.T, np.eye(3), atol=1e-9) or np.linalg.det(rotation) < 0:
            raise ValueError("orientation must be a proper rotation matrix")
        object.__setattr__(self, "rotation", rotation)

        n = self.mx * self.my
        default_groups, default_cpas = default_grouping(n)
        groups = default_groups if self.groups is None else tuple(tuple(int(m) for m in g) for g in self.groups)
        cpas = default_cpas if self.cpas is None else tuple(int(c) for c in self.cpas)
        flat = sorted(m for g in groups for m in g)
        if flat != list(range(n)):
            raise ValueError("groups must partition the element indices")
        if any(len(g) > N_CHAINS or len(g) == 0 for g in groups):
            raise ValueError("each group holds between 1 and 3 elements")
        for g in groups:
            if len({m % N_CHAINS for m in g}) != len(g):
                raise ValueError(f"group {g} places two elements on one RF chain")
        if len(cpas) != len(groups) or any(c not in g for c, g in zip(cpas, groups)):
            raise ValueError("exactly one CPA per group is required, in group order")
        object.__setattr__(self, "groups", groups)
        object.__setattr__(self, "cpas", cpas)

    @property
    def n_elements(self) -> int:
        return self.mx * self.my

    @property
    def shape(self) -> tuple[int, int]:
        return self.mx, self.my

    @property
    def spacing_wavelengths(self) -> float:
        return self.spacing / self.wavelength

    @property
    def redundant_groups(self) -> tuple[tuple[int, ...], ...]:
        return redundant_groups(self.cpas)

    def local_offsets(self) -> NDArray[np.float64]:
        """Element positions relative to ``center`` in the local frame, shape (M, 3)."""
        mx_idx, my_idx = np.meshgrid(np.arange(self.mx), np.arange(self.my), indexing="xy")
        x = (mx_idx.ravel() - (self.mx - 1) / 2) * self.spacing
        y = (my_idx.ravel() - (self.my - 1) / 2) * self.spacing
        return np.column_stack([x, y, np.zeros_like(x)])

    def element_positions(self) -> NDArray[np.float64]:
        """World coordinates of every element, shape (M, 3)."""
        return self.center + self.local_offsets() @ self.rotation.T

    @property
    def boresight(self) -> NDArray[np.float64]:
        return self.rotation[:, 2].copy()

    def to_local(self, points: ArrayLike) -> NDArray[np.float64]:
        return (np.asarray(points, dtype=float) - self.center) @ self.rotation

    def to_world_vector(self, vectors: ArrayLike) -> NDArray[np.float64]:
        return np.asarray(vectors, dtype=float) @ self.rotation.T


def _steering_from_cosines(alpha, beta, mx: int, my: int, spacing_wavelengths: float):
    """Kronecker ``a_y (x) a_x`` for direction cosines; leading axes broadcast."""
    alpha = np.asarray(alpha, dtype=float)[..., None]
    beta = np.asarray(beta, dtype=float)[..., None]
    k = 2.0 * np.pi * spacing_wavelengths
    ax = np.exp(1j * k * alpha * np.arange(mx))
    ay = np.exp(1j * k * beta * np.arange(my))
    return (ay[..., :, None] * ax[..., None, :]).reshape(*ax.shape[:-1], mx * my)


def steering_vector(ura: UraConfig, direction: Direction) -> NDArray[np.complex128]:
    """Steering vector of ``ura`` toward ``direction``, referenced to element 0."""
    st = math.sin(direction.elevation)
    return _steering_from_cosines(
        st * math.cos(direction.azimuth), st * math.sin(direction.azimuth), ura.mx, ura.my, ura.spacing_wavelengths
    )


def steering_matrix(
    mx: int, my: int, spacing_wavelengths: float, elevation: ArrayLike, azimuth: ArrayLike
) -> NDArray[np.complex128]:
    """Steering vectors for broadcastable angle arrays; trailing axis has length ``mx*my``."""
    elevation = np.asarray(elevation, dtype=float)
    azimuth = np.asarray(azimuth, dtype=float)
    st = np.sin(elevation)
    return _steering_from_cosines(st * np.cos(azimuth), st * np.sin(azimuth), mx, my, spacing_wavelengths)


def max_spacing(theta_l: float) -> float:
    """Largest grating-lobe-free element spacing, in wavelengths, for scan limit ``theta_l``."""
    if not 0.0 <= theta_l <= math.pi / 2:
        raise ValueError(f"scan limit {theta_l!r} rad outside [0, pi/2]")
    return 1.0 / (1.0 + abs(math.sin(theta_l)))


def local_unit_vectors(ura: UraConfig, points: ArrayLike) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
    """Local-frame unit vectors and ranges from the array center to ``points`` (N, 3)."""
    local = ura.to_local(np.atleast_2d(points))
    ranges = np.linalg.norm(local, axis=1)
    if np.any(ranges <= 1e-12):
        raise ValueError(f"point coincides with the center of array {ura.array_id}")
    return local / ranges[:, None], ranges


def direction_from_point(ura: UraConfig, point: ArrayLike) -> Direction:
    """(Elevation, azimuth) of ``point`` as seen from ``ura``'s center."""
    unit, _ = local_unit_vectors(ura, np.asarray(point, dtype=float).reshape(1, 3))
    x, y, z = unit[0]
    if z < -1e-12:
        raise ValueError(f"point lies behind array {ura.array_id}")
    return Direction(math.acos(min(1.0, max(-1.0, z))), math.atan2(y, x))


def ray_from_aoa(ura: UraConfig, direction: Direction) -> Ray:
    return Ray(ura.center, ura.to_world_vector(direction.unit_vector()))


def phase_center_factor(ura: UraConfig, unit_local: ArrayLike) -> NDArray[np.complex128]:
    """Phase of element 0 relative to the array center for plane waves along ``unit_local``.

    Multiplying a steering vector by this factor references it to the center
    instead of element 0.
    """
    k = 2.0 * np.pi / ura.wavelength
    offset0 = ura.local_offsets()[0]
    return np.exp(1j * k * (np.asarray(unit_local, dtype=float) @ offset0))

"""Synthetic CSI generation for one or more switched uniform rectangular arrays.

All arrays share one three-chain receiver.  A source's complex amplitude is
indexed by *virtual snapshot*: packet ``j`` of every switch group observes
waveform sample ``j``, while the carrier frequency offset is evaluated at the
packet's own timestamp.  Hardware phase on an element sampled by RF chain
``c`` is ``pll[c] + 2*pi*f*cable_delay[element]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Any, Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .geometry import (
    DEFAULT_FREQUENCY,
    N_CHAINS,
    Direction,
    UraConfig,
    local_unit_vectors,
    phase_center_factor,
    steering_matrix,
)

PACKET_RATE = 2000.0


@dataclass
class SourceSpec:
    """A point or far-field emitter.

    Exactly one of ``position`` (world meters) or ``direction`` (applied in
    every array's local frame) is set.  Sources sharing ``coherence_group``
    radiate scaled copies of one waveform.
    """

    position: NDArray[np.float64] | None = None
    direction: Direction | None = None
    power: float = 1.0
    coherence_group: str | None = None
    gain: complex | None = None
    waveform: NDArray[np.complex128] | None = None

    def __post_init__(self) -> None:
        if (self.position is None) == (self.direction is None):
            raise ValueError("a source needs exactly one of position or direction")
        if self.position is not None:
            self.position = np.asarray(self.position, dtype=float).reshape(3)
        if not self.power >= 0:
            raise ValueError("source power must be nonnegative")


@dataclass
class HardwareImpairments:
    """Receiver impairments shared by all arrays on one NIC.

    ``cable_delays`` is indexed by stacked element (array 0 first); ``None``
    means zero delay everywhere.
    """

    pll_phases: NDArray[np.float64] = field(default_factory=lambda: np.zeros(N_CHAINS))
    cable_delays: NDArray[np.float64] | None = None
    cfo: float = 0.0
    frequency: float = DEFAULT_FREQUENCY

    def __post_init__(self) -> None:
        self.pll_phases = np.asarray(self.pll_phases, dtype=float).reshape(N_CHAINS)
        if self.cable_delays is not None:
            self.cable_delays = np.asarray(self.cable_delays, dtype=float).ravel()
            if not np.all(np.isfinite(self.cable_delays)):
                raise ValueError("cable delays must be finite")
        if not np.all(np.isfinite(self.pll_phases)) or not math.isfinite(self.cfo):
            raise ValueError("impairments must be finite")

    def element_phase(self, stacked_index: NDArray[np.int_], chain: NDArray[np.int_]) -> NDArray[np.float64]:
        phase = self.pll_phases[chain]
        if self.cable_delays is not None:
            phase = phase + 2.0 * np.pi * self.frequency * self.cable_delays[stacked_index]
        return phase

    @classmethod
    def random(cls, n_elements: int, rng: np.random.Generator, max_cfo: float = 10e3, max_delay: float = 2e-9,
               frequency: float = DEFAULT_FREQUENCY) -> "HardwareImpairments":
        return cls(
            pll_phases=rng.uniform(-np.pi, np.pi, N_CHAINS),
            cable_delays=rng.uniform(0.0, max_delay, n_elements),
            cfo=float(rng.uniform(-max_cfo, max_cfo)),
            frequency=frequency,
        )


@dataclass(frozen=True)
class CaptureSchedule:
    """Order in which switch groups are sampled.

    Group indices refer to ``ura.groups + ura.redundant_groups``: the primary
    groups first, then the redundant CPA packets.
    """

    group_order: tuple[int, ...]
    packets_per_group: int = 50
    packet_interval: float = 1.0 / PACKET_RATE

    def __post_init__(self) -> None:
        if self.packets_per_group < 1:
            raise ValueError("packets_per_group must be at least 1")
        if not self.packet_interval > 0:
            raise ValueError("packet_interval must be positive")
        object.__setattr__(self, "group_order", tuple(int(g) for g in self.group_order))

    @classmethod
    def default(cls, ura: UraConfig, packets_per_group: int = 50, packet_interval: float = 1.0 / PACKET_RATE):
        n = len(ura.groups) + len(ura.redundant_groups)
        return cls(tuple(range(n)), packets_per_group, packet_interval)

    @property
    def n_packets(self) -> int:
        return len(self.group_order) * self.packets_per_group

    def validate(self, ura: UraConfig) -> None:
        n_all = len(ura.groups) + len(ura.redundant_groups)
        bad = [g for g in self.group_order if not 0 <= g < n_all]
        if bad:
            raise ValueError(f"group index {bad[0]} out of range for array {ura.array_id} ({n_all} groups)")
        missing = set(range(len(ura.groups))) - set(self.group_order)
        if missing:
            raise ValueError(f"schedule never samples group(s) {sorted(missing)} of array {ura.array_id}")


def all_groups(ura: UraConfig) -> tuple[tuple[int, ...], ...]:
    return tuple(ura.groups) + tuple(ura.redundant_groups)


@dataclass
class CsiCapture:
    """Complex snapshots of one array.

    ``values`` is (M, T); ``mask`` marks the entries actually sampled (all of
    them for an unswitched capture).  ``column_group`` gives the schedule group
    of each column (-1 when every element was sampled at once) and
    ``snapshot`` the virtual snapshot index.
    """

    ura: UraConfig
    values: NDArray[np.complex128]
    timestamps: NDArray[np.float64]
    mask: NDArray[np.bool_] | None = None
    column_group: NDArray[np.int_] | None = None
    snapshot: NDArray[np.int_] | None = None
    schedule: CaptureSchedule | None = None
    truth: dict[str, Any] | None = None

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=complex)
        m, t = self.values.shape
        if m != self.ura.n_elements:
            raise ValueError(f"capture has {m} rows, array has {self.ura.n_elements} elements")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("capture entries must be finite")
        self.timestamps = np.asarray(self.timestamps, dtype=float).reshape(t)
        self.mask = np.ones((m, t), dtype=bool) if self.mask is None else np.asarray(self.mask, dtype=bool)
        self.column_group = (
            np.full(t, -1, dtype=int) if self.column_group is None else np.asarray(self.column_group, dtype=int)
        )
        self.snapshot = np.arange(t) if self.snapshot is None else np.asarray(self.snapshot, dtype=int)

    @property
    def array_id(self) -> str:
        return self.ura.array_id

    @property
    def n_snapshots(self) -> int:
        return self.values.shape[1]

    @property
    def is_switched(self) -> bool:
        return not bool(np.all(self.mask))

    def group_block(self, group: int) -> tuple[tuple[int, ...], NDArray[np.complex128], NDArray[np.int_]]:
        """Members, (len(members), P) samples and virtual snapshot indices of one schedule group."""
        members = all_groups(self.ura)[group]
        cols = np.flatnonzero(self.column_group == group)
        return members, self.values[np.ix_(members, cols)], self.snapshot[cols]

    def copy(self) -> "CsiCapture":
        return replace(self, values=self.values.copy(), mask=self.mask.copy())


@dataclass
class SharedCapture:
    """Packets sampling elements of two arrays through one switch setting.

    ``elements`` lists ``(array_index, element_index)`` per row; the first row
    is the reference element of the reference array.
    """

    elements: tuple[tuple[int, int], ...]
    values: NDArray[np.complex128]
    timestamps: NDArray[np.float64]
    snapshot: NDArray[np.int_]
    truth: dict[str, Any] | None = None

    def __post_init__(self) -> None:
        self.elements = tuple((int(a), int(e)) for a, e in self.elements)
        self.values = np.asarray(self.values, dtype=complex)
        if self.values.shape[0] != len(self.elements):
            raise ValueError("one row per shared element is required")

    @property
    def arrays(self) -> tuple[int, ...]:
        return tuple(sorted({a for a, _ in self.elements}))


def default_shared_group(uras: Sequence[UraConfig], other: int, reference: int = 0) -> tuple[tuple[int, int], ...]:
    """Elements linking ``reference`` and ``other`` in one packet, one per RF chain.

    The reference array contributes its first two CPAs; the other array
    contributes an element on the remaining chain, preferring one of its CPAs.
    For two 3x4 arrays this is ``{(0, 0), (0, 5), (1, 7)}``.
    """
    ref = uras[reference]
    picks = [(reference, c) for c in ref.cpas[:2]]
    if len(picks) < 2:
        picks.append((reference, next(m for m in range(ref.n_elements) if m % N_CHAINS != ref.cpas[0] % N_CHAINS)))
    used = {e % N_CHAINS for _, e in picks}
    free = next(c for c in range(N_CHAINS) if c not in used)
    target = uras[other]
    element = next((c for c in target.cpas if c % N_CHAINS == free), None)
    if element is None:
        element = next(m for m in range(target.n_elements) if m % N_CHAINS == free)
    return tuple(picks) + ((other, element),)


def _substreams(seed: int, n: int) -> list[np.random.Generator]:
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def source_amplitudes(sources: Sequence[SourceSpec], n_snapshots: int, rng: np.random.Generator) -> NDArray[np.complex128]:
    """Per-source complex amplitude sequences, shape (L, T).

    Each coherence group draws one unit-modulus random-phase waveform; every
    source gets a unit-modulus gain, fixed for the scenario.
    """
    waveforms: dict[Any, NDArray[np.complex128]] = {}
    rows = []
    for idx, src in enumerate(sources):
        key = src.coherence_group if src.coherence_group is not None else ("__own__", idx)
        if src.waveform is not None:
            wave = np.asarray(src.waveform, dtype=complex).ravel()
            if wave.size < n_snapshots:
                raise ValueError(f"source {idx} waveform has {wave.size} samples, need {n_snapshots}")
            wave = wave[:n_snapshots]
        elif key in waveforms:
            wave = waveforms[key]
        else:
            wave = np.exp(1j * rng.uniform(-np.pi, np.pi, n_snapshots))
        waveforms.setdefault(key, wave)
        gain = src.gain if src.gain is not None else np.exp(1j * rng.uniform(-np.pi, np.pi))
        rows.append(math.sqrt(src.power) * gain * wave)
    return np.array(rows, dtype=complex).reshape(len(sources), n_snapshots)


def array_response(ura: UraConfig, source: SourceSpec, propagation: str = "exact",
                   wavelength: float | None = None) -> NDArray[np.complex128]:
    """Noise-free response of every element of ``ura`` to a unit-amplitude ``source``.

    Direction sources are plane waves referenced to the array center.  Position
    sources carry the absolute range phase ``exp(-j k r)``: ``"exact"`` uses
    each element's own path length, ``"plane"`` the center range plus the
    local plane-wave steering vector.
    """
    lam = ura.wavelength if wavelength is None else wavelength
    k = 2.0 * np.pi / lam
    if source.direction is not None:
        unit = source.direction.unit_vector()
        a = steering_matrix(ura.mx, ura.my, ura.spacing / lam, source.direction.elevation, source.direction.azimuth)
        return a * phase_center_factor(ura, unit)
    unit, rng_c = local_unit_vectors(ura, source.position[None, :])
    if propagation == "exact":
        dist = np.linalg.norm(ura.element_positions() - source.position, axis=1)
        if np.any(dist <= 1e-12):
            raise ValueError(f"source coincides with an element of array {ura.array_id}")
        return np.exp(-1j * k * dist)
    if propagation == "plane":
        x, y, z = unit[0]
        if z < -1e-12:
            raise ValueError(f"source lies behind array {ura.array_id}")
        theta = math.acos(min(1.0, z))
        phi = math.atan2(y, x)
        a = steering_matrix(ura.mx, ura.my, ura.spacing / lam, theta, phi)
        return np.exp(-1j * k * rng_c[0]) * phase_center_factor(ura, unit[0]) * a
    raise ValueError(f"unknown propagation model {propagation!r}")


def _noise(rng: np.random.Generator, shape, variance: float) -> NDArray[np.complex128]:
    if variance == 0:
        return np.zeros(shape, dtype=complex)
    scale = math.sqrt(variance / 2.0)
    return scale * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))


def _clean_responses(uras, sources, amplitudes, propagation):
    out = []
    for ura in uras:
        steer = np.column_stack([array_response(ura, s, propagation) for s in sources])
        out.append(steer @ amplitudes)
    return out


def _truth(sources, impairments=None) -> dict[str, Any]:
    rec: dict[str, Any] = {"sources": []}
    for s in sources:
        entry: dict[str, Any] = {"power": s.power, "coherence_group": s.coherence_group}
        if s.position is not None:
            entry["position_m"] = [float(v) for v in s.position]
        else:
            entry["direction_deg"] = list(s.direction.degrees())
        rec["sources"].append(entry)
    if impairments is not None:
        rec["impairments"] = {
            "pll_phases_rad": [float(v) for v in impairments.pll_phases],
            "cable_delays_s": None if impairments.cable_delays is None else [float(v) for v in impairments.cable_delays],
            "cfo_hz": impairments.cfo,
            "frequency_hz": impairments.frequency,
        }
    return rec


def simulate_ideal(uras: Sequence[UraConfig], sources: Sequence[SourceSpec], n_snapshots: int,
                   noise_variance: float = 0.0, seed: int = 0, propagation: str = "exact",
                   cfo: float = 0.0, timestamps: ArrayLike | None = None) -> list[CsiCapture]:
    """Unswitched captures ``Y = A S + N`` for every array, sharing one source matrix.

    ``cfo`` and ``timestamps`` optionally apply a common carrier phase per
    snapshot, which is what a single-shot capture of all elements would see.
    """
    if n_snapshots < 1:
        raise ValueError("need at least one snapshot")
    if not sources:
        raise ValueError("need at least one source")
    if noise_variance < 0:
        raise ValueError("noise variance must be nonnegative")
    streams = _substreams(seed, 1 + len(uras))
    amplitudes = source_amplitudes(sources, n_snapshots, streams[0])
    clean = _clean_responses(uras, sources, amplitudes, propagation)
    times = np.arange(n_snapshots) / PACKET_RATE if timestamps is None else np.asarray(timestamps, dtype=float)
    carrier = np.exp(-2j * np.pi * cfo * times)
    captures = []
    for ura, x, rng in zip(uras, clean, streams[1:]):
        y = x * carrier + _noise(rng, x.shape, noise_variance)
        truth = _truth(sources)
        truth["noise_variance"] = noise_variance
        captures.append(CsiCapture(ura, y, times, truth=truth))
    return captures


def _stacked_offsets(uras: Sequence[UraConfig]) -> list[int]:
    return list(np.cumsum([0] + [u.n_elements for u in uras[:-1]]))


def _switched(uras, clean, impairments, schedules, noise_variance, streams, t0=0.0):
    offsets = _stacked_offsets(uras)
    captures = []
    t_start = t0
    for a, (ura, x, sched, rng) in enumerate(zip(uras, clean, schedules, streams)):
        sched.validate(ura)
        groups = all_groups(ura)
        p = sched.packets_per_group
        if x.shape[1] < p:
            raise ValueError("fewer virtual snapshots than packets per group")
        n_cols = sched.n_packets
        values = np.zeros((ura.n_elements, n_cols), dtype=complex)
        mask = np.zeros((ura.n_elements, n_cols), dtype=bool)
        times = t_start + np.arange(n_cols) * sched.packet_interval
        col_group = np.repeat(np.array(sched.group_order, dtype=int), p)
        snap = np.tile(np.arange(p), len(sched.group_order))
        for slot, g in enumerate(sched.group_order):
            members = np.array(groups[g])
            cols = slice(slot * p, (slot + 1) * p)
            hw = impairments.element_phase(offsets[a] + members, members % N_CHAINS)
            carrier = np.exp(-2j * np.pi * impairments.cfo * times[cols])
            block = x[members, :p] * np.exp(1j * hw)[:, None] * carrier[None, :]
            values[members, cols] = block + _noise(rng, block.shape, noise_variance)
            mask[members, cols] = True
        captures.append(CsiCapture(ura, values, times, mask, col_group, snap, sched))
        t_start = times[-1] + sched.packet_interval
    return captures, t_start


def _shared(uras, clean, impairments, group, packets, interval, t_start, noise_variance, rng):
    offsets = _stacked_offsets(uras)
    times = t_start + np.arange(packets) * interval
    carrier = np.exp(-2j * np.pi * impairments.cfo * times)
    rows = []
    for a, e in group:
        hw = impairments.element_phase(np.array([offsets[a] + e]), np.array([e % N_CHAINS]))[0]
        rows.append(clean[a][e, :packets] * np.exp(1j * hw) * carrier)
    values = np.array(rows)
    values = values + _noise(rng, values.shape, noise_variance)
    return SharedCapture(group, values, times, np.arange(packets))


def _check_impairments(uras, impairments):
    total = sum(u.n_elements for u in uras)
    if impairments.cable_delays is not None and impairments.cable_delays.size != total:
        raise ValueError(f"cable_delays has {impairments.cable_delays.size} entries, arrays have {total} elements")


@dataclass
class SwitchedRun:
    """Everything one switched acquisition produces."""

    captures: list[CsiCapture]
    shared: list[SharedCapture]


def simulate_switched(uras: Sequence[UraConfig], sources: Sequence[SourceSpec], impairments: HardwareImpairments,
                      schedule: CaptureSchedule | Sequence[CaptureSchedule] | None = None,
                      noise_variance: float = 0.0, seed: int = 0, propagation: str = "exact",
                      shared_groups: Sequence[tuple[tuple[int, int], ...]] | None = None) -> SwitchedRun:
    """Time-division capture of every array through the three RF chains.

    Arrays are sampled one after another in schedule order, followed by one
    shared packet group per non-reference array linking it to array 0.
    """
    if not sources:
        raise ValueError("need at least one source")
    _check_impairments(uras, impairments)
    schedules = _schedules(uras, schedule)
    p = schedules[0].packets_per_group
    streams = _substreams(seed, 1 + 2 * len(uras))
    amplitudes = source_amplitudes(sources, p, streams[0])
    clean = _clean_responses(uras, sources, amplitudes, propagation)
    captures, t_end = _switched(uras, clean, impairments, schedules, noise_variance, streams[1:1 + len(uras)])
    shared = _shared_all(uras, clean, impairments, schedules[0], t_end, noise_variance,
                         streams[1 + len(uras):], shared_groups)
    truth = _truth(sources, impairments)
    truth["noise_variance"] = noise_variance
    truth["propagation"] = propagation
    for cap in captures:
        cap.truth = truth
    for sh in shared:
        sh.truth = truth
    return SwitchedRun(captures, shared)


def simulate_calibration(uras: Sequence[UraConfig], impairments: HardwareImpairments,
                         schedule: CaptureSchedule | Sequence[CaptureSchedule] | None = None,
                         noise_variance: float = 0.0, seed: int = 0,
                         shared_groups: Sequence[tuple[tuple[int, int], ...]] | None = None) -> SwitchedRun:
    """Switched capture of a broadside far-field reference source.

    Every element sees the same propagation delay, so any phase difference
    inside a packet is hardware offset.
    """
    _check_impairments(uras, impairments)
    schedules = _schedules(uras, schedule)
    p = schedules[0].packets_per_group
    streams = _substreams(seed, 1 + 2 * len(uras))
    wave = np.exp(1j * streams[0].uniform(-np.pi, np.pi, p))
    clean = [np.ones((u.n_elements, 1)) * wave[None, :] for u in uras]
    captures, t_end = _switched(uras, clean, impairments, schedules, noise_variance, streams[1:1 + len(uras)])
    shared = _shared_all(uras, clean, impairments, schedules[0], t_end, noise_variance,
                         streams[1 + len(uras):], shared_groups)
    truth = {"broadside_calibration": True, **_truth([], impairments), "noise_variance": noise_variance}
    for cap in captures:
        cap.truth = truth
    return SwitchedRun(captures, shared)


def _schedules(uras, schedule):
    if schedule is None:
        return [CaptureSchedule.default(u) for u in uras]
    if isinstance(schedule, CaptureSchedule):
        return [schedule] * len(uras)
    schedules = list(schedule)
    if len(schedules) != len(uras):
        raise ValueError("one schedule per array is required")
    if len({s.packets_per_group for s in schedules}) != 1:
        raise ValueError("all arrays must use the same packets_per_group")
    return schedules


def _shared_all(uras, clean, impairments, schedule, t_start, noise_variance, streams, shared_groups):
    if len(uras) < 2:
        return []
    groups = shared_groups if shared_groups is not None else [default_shared_group(uras, i) for i in range(1, len(uras))]
    out = []
    p = schedule.packets_per_group
    for group, rng in zip(groups, streams):
        if len({e % N_CHAINS for _, e in group}) != len(group):
            raise ValueError(f"shared group {group} places two elements on one RF chain")
        sh = _shared(uras, clean, impairments, group, p, schedule.packet_interval, t_start, noise_variance, rng)
        out.append(sh)
        t_start = sh.timestamps[-1] + schedule.packet_interval
    return out


def inter_array_phase(c1: ArrayLike, c2: ArrayLike, point: ArrayLike, wavelength: float) -> float:
    """Unwrapped phase ``2 pi (|p - c1| - |p - c2|) / wavelength`` between two receivers."""
    p = np.asarray(point, dtype=float)
    r1 = np.linalg.norm(p - np.asarray(c1, dtype=float))
    r2 = np.linalg.norm(p - np.asarray(c2, dtype=float))
    if r1 <= 1e-12 or r2 <= 1e-12:
        raise ValueError("point coincides with a receiver")
    return float(2.0 * np.pi * (r1 - r2) / wavelength)


def snr_to_noise_variance(snr_db: float, power: float = 1.0) -> float:
    return power / 10.0 ** (snr_db / 10.0)

"""Intra-group, inter-group and inter-array phase calibration of switched captures."""

from __future__ import annotations

import warnings
from collections import deque
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .geometry import wrap_phase
from .simulate import CsiCapture, SharedCapture, all_groups

SPREAD_WARNING = 0.2


class CalibrationError(ValueError):
    pass


class CalibrationWarning(UserWarning):
    pass


def circular_mean(phases: ArrayLike, axis: int = -1) -> NDArray[np.float64] | float:
    return wrap_phase(np.angle(np.mean(np.exp(1j * np.asarray(phases, dtype=float)), axis=axis)))


def circular_spread(phases: ArrayLike, axis: int = -1) -> NDArray[np.float64] | float:
    """Circular standard deviation ``sqrt(-2 ln R)``."""
    r = np.abs(np.mean(np.exp(1j * np.asarray(phases, dtype=float)), axis=axis))
    return np.sqrt(-2.0 * np.log(np.clip(r, 1e-300, 1.0)))


@dataclass
class CalibrationProfile:
    """Measured phase corrections for one array.

    ``intra_group`` maps a schedule group (primary groups first, then the
    redundant CPA packets) to the offset of each member relative to its first
    member, so entry 0 is always 0.  ``inter_group`` holds one alignment phase
    per primary group, group 0 being the reference.  ``inter_array`` maps the
    id of the other array to the measured phase difference.
    """

    array_id: str
    intra_group: dict[int, NDArray[np.float64]] = field(default_factory=dict)
    inter_group: NDArray[np.float64] | None = None
    cpa_chain: tuple[tuple[int, ...], ...] = ()
    inter_array: dict[str, float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.intra_group = {int(g): np.asarray(wrap_phase(v), dtype=float).reshape(-1)
                            for g, v in self.intra_group.items()}
        if self.inter_group is not None:
            self.inter_group = np.asarray(wrap_phase(self.inter_group), dtype=float).reshape(-1)
        self.inter_array = {k: float(wrap_phase(v)) for k, v in self.inter_array.items()}


def _group_offsets(block: NDArray[np.complex128], label: str, spread_limit: float) -> NDArray[np.float64]:
    if block.shape[1] < 2:
        raise CalibrationError(f"{label}: at least 2 snapshots are needed, got {block.shape[1]}")
    rel = np.angle(block * np.conj(block[0:1, :]))
    offsets = np.atleast_1d(circular_mean(rel, axis=1))
    offsets[0] = 0.0
    spread = np.atleast_1d(circular_spread(rel, axis=1))
    if np.any(spread > spread_limit):
        warnings.warn(
            f"{label}: per-snapshot offset spread {spread.max():.3f} rad exceeds {spread_limit} rad; "
            "is the reference source broadside and in the far field?",
            CalibrationWarning,
            stacklevel=3,
        )
    return offsets


def measure_intra_group(capture: CsiCapture, spread_limit: float = SPREAD_WARNING) -> dict[int, NDArray[np.float64]]:
    """Offsets of each group member relative to the first, from a broadside calibration capture."""
    out = {}
    for g in sorted(set(capture.column_group.tolist())):
        if g < 0:
            raise CalibrationError("intra-group measurement needs a switched capture")
        _, block, _ = capture.group_block(g)
        out[g] = _group_offsets(block, f"array {capture.array_id} group {g}", spread_limit)
    return out


def measure_shared_offsets(shared: SharedCapture, spread_limit: float = SPREAD_WARNING) -> NDArray[np.float64]:
    return _group_offsets(shared.values, f"shared group {shared.elements}", spread_limit)


def apply_intra_group(capture: CsiCapture, profile: CalibrationProfile | dict[int, ArrayLike]) -> CsiCapture:
    """Rotate every sampled entry by minus its group's measured offset."""
    offsets = profile.intra_group if isinstance(profile, CalibrationProfile) else profile
    out = capture.copy()
    groups = all_groups(capture.ura)
    for g in sorted(set(capture.column_group.tolist())):
        if g < 0:
            continue
        if g not in offsets:
            raise CalibrationError(f"profile has no intra-group offsets for group {g} of array {capture.array_id}")
        members = groups[g]
        off = np.asarray(offsets[g], dtype=float)
        if off.size != len(members):
            raise CalibrationError(f"group {g} has {len(members)} members but {off.size} offsets")
        cols = np.flatnonzero(capture.column_group == g)
        out.values[np.ix_(members, cols)] *= np.exp(-1j * off)[:, None]
    return out


def apply_shared_offsets(shared: SharedCapture, offsets: ArrayLike) -> SharedCapture:
    off = np.asarray(offsets, dtype=float)
    return SharedCapture(shared.elements, shared.values * np.exp(-1j * off)[:, None], shared.timestamps,
                         shared.snapshot, shared.truth)


def _by_snapshot(capture: CsiCapture, group: int):
    members, block, snap = capture.group_block(group)
    return {m: dict(zip(snap.tolist(), block[i])) for i, m in enumerate(members)}


def _relative_phase(a: dict[int, complex], b: dict[int, complex], snapshots) -> NDArray[np.float64]:
    return np.angle(np.array([a[j] * np.conj(b[j]) for j in snapshots]))


def align_inter_group(capture: CsiCapture) -> NDArray[np.float64]:
    """Alignment phase for every primary group, chaining through shared CPAs.

    The capture must already be intra-group calibrated.  A primary group ``g``
    is aligned once a redundant packet holds one of its elements ``e`` and an
    element ``e'`` of an aligned primary group ``h``: the redundant packet
    gives the true phase of ``e`` relative to ``e'``, and the alignment phase
    is whatever rotation of ``g`` reproduces it.
    """
    ura = capture.ura
    n_primary = len(ura.groups)
    present = set(capture.column_group.tolist())
    missing = [g for g in range(n_primary) if g not in present]
    if missing:
        raise CalibrationError(f"capture never samples primary group(s) {missing}")
    owner = {m: g for g, members in enumerate(ura.groups) for m in members}
    data = {g: _by_snapshot(capture, g) for g in present if g >= 0}
    redundant = [g for g in range(n_primary, n_primary + len(ura.redundant_groups)) if g in present]

    alpha: dict[int, float] = {0: 0.0}
    queue = deque([0])
    while queue:
        h = queue.popleft()
        for r in redundant:
            members = all_groups(ura)[r]
            anchors = [m for m in members if owner[m] == h]
            for e_ref in anchors:
                for e in members:
                    g = owner[e]
                    if g in alpha:
                        continue
                    common = sorted(set(data[r][e]) & set(data[g][e]) & set(data[h][e_ref]))
                    if not common:
                        raise CalibrationError(f"groups {r}, {g}, {h} share no virtual snapshot")
                    true_rel = _relative_phase(data[r][e], data[r][e_ref], common)
                    observed = _relative_phase(data[g][e], data[h][e_ref], common)
                    alpha[g] = float(wrap_phase(circular_mean(true_rel - observed) + alpha[h]))
                    queue.append(g)
    unreachable = [g for g in range(n_primary) if g not in alpha]
    if unreachable:
        raise CalibrationError(
            f"array {ura.array_id}: group(s) {unreachable} share no CPA chain with group 0 "
            f"(redundant packets sampled: {[all_groups(ura)[r] for r in redundant]})"
        )
    return np.array([alpha[g] for g in range(n_primary)])


def apply_inter_group(capture: CsiCapture, alignment: ArrayLike) -> CsiCapture:
    """Rotate each primary group and merge packet ``j`` of every group into snapshot ``j``.

    Returns an unswitched (M, P) capture whose time reference is that of
    group 0.  Redundant packets are dropped.
    """
    ura = capture.ura
    alignment = np.asarray(alignment, dtype=float)
    if alignment.size != len(ura.groups):
        raise CalibrationError(f"need {len(ura.groups)} alignment phases, got {alignment.size}")
    ref_cols = np.flatnonzero(capture.column_group == 0)
    snapshots = capture.snapshot[ref_cols]
    order = np.argsort(snapshots, kind="stable")
    snapshots, ref_cols = snapshots[order], ref_cols[order]
    values = np.zeros((ura.n_elements, snapshots.size), dtype=complex)
    filled = np.zeros(ura.n_elements, dtype=bool)
    for g, members in enumerate(ura.groups):
        cols = np.flatnonzero(capture.column_group == g)
        lookup = dict(zip(capture.snapshot[cols].tolist(), cols.tolist()))
        try:
            take = [lookup[j] for j in snapshots.tolist()]
        except KeyError as exc:
            raise CalibrationError(f"group {g} lacks virtual snapshot {exc.args[0]}") from None
        values[list(members), :] = capture.values[np.ix_(members, take)] * np.exp(1j * alignment[g])
        filled[list(members)] = True
    if not filled.all():
        raise CalibrationError("primary groups do not cover every element")
    return CsiCapture(ura, values, capture.timestamps[ref_cols], truth=capture.truth, snapshot=snapshots)


def calibrate_array(capture: CsiCapture, profile: CalibrationProfile) -> CsiCapture:
    """Intra-group correction then inter-group alignment; fills ``profile.inter_group``."""
    corrected = apply_intra_group(capture, profile)
    profile.inter_group = align_inter_group(corrected)
    profile.cpa_chain = tuple(capture.ura.redundant_groups)
    return apply_inter_group(corrected, profile.inter_group)


def align_inter_array(shared: SharedCapture) -> float:
    """Phase of the other array's shared element relative to the reference element, wrapped.

    ``shared`` must already be intra-group corrected, so the result is the
    propagation phase difference between the two elements.
    """
    arrays = {a for a, _ in shared.elements}
    if len(arrays) < 2:
        raise CalibrationError(f"shared capture {shared.elements} samples a single array")
    ref_array = shared.elements[0][0]
    other = next(i for i, (a, _) in enumerate(shared.elements) if a != ref_array)
    rel = np.angle(shared.values[other] * np.conj(shared.values[0]))
    return float(circular_mean(rel))


def inter_array_rotation(reference: CsiCapture, other: CsiCapture, shared: SharedCapture, delta_gamma: float) -> float:
    """Rotation that puts ``other``'s calibrated snapshots on ``reference``'s phase reference.

    Both captures must be fully calibrated (unswitched).  The calibrated data
    should show the shared elements with relative phase ``delta_gamma``; the
    rotation is the circular mean shortfall over common virtual snapshots.
    """
    ref_elem = shared.elements[0][1]
    other_elem = next(e for a, e in shared.elements if a != shared.elements[0][0])
    ref_lookup = dict(zip(reference.snapshot.tolist(), range(reference.n_snapshots)))
    other_lookup = dict(zip(other.snapshot.tolist(), range(other.n_snapshots)))
    common = sorted(set(ref_lookup) & set(other_lookup))
    if not common:
        raise CalibrationError("calibrated captures share no virtual snapshot")
    a = reference.values[ref_elem, [ref_lookup[j] for j in common]]
    b = other.values[other_elem, [other_lookup[j] for j in common]]
    return float(circular_mean(delta_gamma - np.angle(b * np.conj(a))))


@dataclass
class SystemCalibration:
    """Calibration outcome for a set of arrays sharing one receiver."""

    profiles: list[CalibrationProfile]
    shared_offsets: list[NDArray[np.float64]]
    rotations: list[float]

    def stacked(self, captures: list[CsiCapture]) -> NDArray[np.complex128]:
        """Stack calibrated captures into one virtual-array snapshot matrix."""
        blocks = [c.values * np.exp(1j * rot) for c, rot in zip(captures, self.rotations)]
        n = min(b.shape[1] for b in blocks)
        return np.vstack([b[:, :n] for b in blocks])


def measure_profiles(calibration_captures: list[CsiCapture], calibration_shared: list[SharedCapture] = (),
                     spread_limit: float = SPREAD_WARNING) -> tuple[list[CalibrationProfile], list[NDArray[np.float64]]]:
    """Intra-group offsets for every array and every shared group, from broadside captures."""
    profiles = [CalibrationProfile(c.array_id, measure_intra_group(c, spread_limit)) for c in calibration_captures]
    shared = [measure_shared_offsets(s, spread_limit) for s in calibration_shared]
    return profiles, shared


def calibrate_system(captures: list[CsiCapture], shared: list[SharedCapture], profiles: list[CalibrationProfile],
                     shared_offsets: list[ArrayLike]) -> tuple[list[CsiCapture], SystemCalibration]:
    """Run all three calibration stages on one switched acquisition.

    Shared capture ``i`` must link array 0 with array ``i + 1``.
    """
    if len(profiles) != len(captures):
        raise CalibrationError("one calibration profile per array is required")
    calibrated = [calibrate_array(c, p) for c, p in zip(captures, profiles)]
    rotations = [0.0]
    for i, sh in enumerate(shared):
        if i >= len(shared_offsets):
            raise CalibrationError(f"no intra-group offsets for shared group {sh.elements}")
        corrected = apply_shared_offsets(sh, shared_offsets[i])
        other = next(a for a, _ in sh.elements if a != sh.elements[0][0])
        dgamma = align_inter_array(corrected)
        profiles[0].inter_array[profiles[other].array_id] = dgamma
        profiles[other].inter_array[profiles[0].array_id] = float(wrap_phase(-dgamma))
        rotations.append(inter_array_rotation(calibrated[0], calibrated[other], corrected, dgamma))
    if len(rotations) < len(captures) and len(captures) > 1:
        raise CalibrationError(f"{len(captures) - len(rotations)} array(s) lack a shared capture")
    return calibrated, SystemCalibration(profiles, [np.asarray(o, dtype=float) for o in shared_offsets], rotations)

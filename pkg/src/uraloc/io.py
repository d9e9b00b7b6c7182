"""Text file formats for captures, calibration profiles, spectra and fixes.

Capture files (``.csi``) start with ``# key: <json>`` header lines followed by
a CSV table ``snapshot,timestamp_s,element,re,im`` holding only the sampled
entries.  Element indices are 0-based and x-major.  Simulation ground truth
goes to a ``.truth.json`` sidecar flagged ``simulation_only``.
"""

from __future__ import annotations

import csv
import io as _io
import json
from pathlib import Path
from typing import Any

import numpy as np

from .aoa import AoaEstimate, SpectrumGrid
from .calibration import CalibrationProfile
from .fusion import GeometricFix, Lsoi, PositionFix
from .geometry import UraConfig, euler_from_rotation
from .simulate import CaptureSchedule, CsiCapture, SharedCapture

CAPTURE_FORMAT = "uraloc-capture/1"
SHARED_FORMAT = "uraloc-shared/1"
PROFILE_FORMAT = "uraloc-profile/1"


def _num(v: float) -> str:
    return repr(float(v))


def _header(lines: list[str]) -> tuple[dict[str, Any], list[str]]:
    meta, body = {}, []
    for line in lines:
        if line.startswith("# "):
            key, _, value = line[2:].partition(": ")
            meta[key] = json.loads(value)
        elif line.strip():
            body.append(line)
    return meta, body


def ura_to_dict(ura: UraConfig) -> dict[str, Any]:
    return {
        "array_id": ura.array_id,
        "mx": ura.mx,
        "my": ura.my,
        "spacing_m": ura.spacing,
        "wavelength_m": ura.wavelength,
        "center_m": [float(v) for v in ura.center],
        "orientation_deg": list(euler_from_rotation(ura.rotation)),
        "rotation": [[float(v) for v in row] for row in ura.rotation],
        "groups": [list(g) for g in ura.groups],
        "cpas": list(ura.cpas),
    }


def ura_from_dict(d: dict[str, Any]) -> UraConfig:
    return UraConfig(
        d["mx"], d["my"], wavelength=d["wavelength_m"], spacing=d["spacing_m"], center=d["center_m"],
        rotation=d["rotation"], groups=d["groups"], cpas=d["cpas"], array_id=d["array_id"],
    )


def _schedule_dict(s: CaptureSchedule | None):
    if s is None:
        return None
    return {"group_order": list(s.group_order), "packets_per_group": s.packets_per_group,
            "packet_interval_s": s.packet_interval}


def write_capture(path: str | Path, capture: CsiCapture) -> Path:
    path = Path(path)
    buf = _io.StringIO()
    buf.write(f"# format: {json.dumps(CAPTURE_FORMAT)}\n")
    buf.write(f"# array: {json.dumps(ura_to_dict(capture.ura))}\n")
    buf.write(f"# schedule: {json.dumps(_schedule_dict(capture.schedule))}\n")
    buf.write(f"# virtual_snapshot: {json.dumps(capture.snapshot.tolist())}\n")
    buf.write(f"# column_group: {json.dumps(capture.column_group.tolist())}\n")
    buf.write("snapshot,timestamp_s,element,re,im\n")
    for t in range(capture.n_snapshots):
        ts = _num(capture.timestamps[t])
        for m in np.flatnonzero(capture.mask[:, t]):
            z = capture.values[m, t]
            buf.write(f"{t},{ts},{m},{_num(z.real)},{_num(z.imag)}\n")
    path.write_text(buf.getvalue(), encoding="utf-8")
    if capture.truth is not None:
        write_truth(path.with_suffix(".truth.json"), capture.truth)
    return path


def write_truth(path: str | Path, truth: dict[str, Any]) -> Path:
    path = Path(path)
    path.write_text(json.dumps({"simulation_only": True, **truth}, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def read_capture(path: str | Path) -> CsiCapture:
    path = Path(path)
    meta, body = _header(path.read_text(encoding="utf-8").splitlines())
    if meta.get("format") != CAPTURE_FORMAT:
        raise ValueError(f"{path}: not a capture file")
    ura = ura_from_dict(meta["array"])
    snapshot = np.array(meta["virtual_snapshot"], dtype=int)
    n = snapshot.size
    values = np.zeros((ura.n_elements, n), dtype=complex)
    mask = np.zeros((ura.n_elements, n), dtype=bool)
    times = np.zeros(n)
    for row in csv.DictReader(body):
        t, m = int(row["snapshot"]), int(row["element"])
        values[m, t] = complex(float(row["re"]), float(row["im"]))
        mask[m, t] = True
        times[t] = float(row["timestamp_s"])
    s = meta["schedule"]
    schedule = None if s is None else CaptureSchedule(s["group_order"], s["packets_per_group"], s["packet_interval_s"])
    truth_path = path.with_suffix(".truth.json")
    truth = json.loads(truth_path.read_text()) if truth_path.exists() else None
    return CsiCapture(ura, values, times, mask, np.array(meta["column_group"], dtype=int), snapshot, schedule, truth)


def write_shared(path: str | Path, shared: SharedCapture) -> Path:
    path = Path(path)
    buf = _io.StringIO()
    buf.write(f"# format: {json.dumps(SHARED_FORMAT)}\n")
    buf.write(f"# elements: {json.dumps([list(e) for e in shared.elements])}\n")
    buf.write(f"# virtual_snapshot: {json.dumps(shared.snapshot.tolist())}\n")
    buf.write("snapshot,timestamp_s,array,element,re,im\n")
    for t in range(shared.values.shape[1]):
        ts = _num(shared.timestamps[t])
        for r, (a, e) in enumerate(shared.elements):
            z = shared.values[r, t]
            buf.write(f"{t},{ts},{a},{e},{_num(z.real)},{_num(z.imag)}\n")
    path.write_text(buf.getvalue(), encoding="utf-8")
    return path


def read_shared(path: str | Path) -> SharedCapture:
    path = Path(path)
    meta, body = _header(path.read_text(encoding="utf-8").splitlines())
    if meta.get("format") != SHARED_FORMAT:
        raise ValueError(f"{path}: not a shared capture file")
    elements = [tuple(e) for e in meta["elements"]]
    snapshot = np.array(meta["virtual_snapshot"], dtype=int)
    values = np.zeros((len(elements), snapshot.size), dtype=complex)
    times = np.zeros(snapshot.size)
    row_of = {e: i for i, e in enumerate(elements)}
    for row in csv.DictReader(body):
        t = int(row["snapshot"])
        values[row_of[(int(row["array"]), int(row["element"]))], t] = complex(float(row["re"]), float(row["im"]))
        times[t] = float(row["timestamp_s"])
    return SharedCapture(elements, values, times, snapshot)


def profile_to_dict(profile: CalibrationProfile) -> dict[str, Any]:
    return {
        "format": PROFILE_FORMAT,
        "array_id": profile.array_id,
        "intra_group_rad": {str(g): [float(v) for v in off] for g, off in sorted(profile.intra_group.items())},
        "inter_group_rad": None if profile.inter_group is None else [float(v) for v in profile.inter_group],
        "cpa_chain": [list(g) for g in profile.cpa_chain],
        "inter_array_rad": dict(sorted(profile.inter_array.items())),
    }


def profile_from_dict(d: dict[str, Any]) -> CalibrationProfile:
    if d.get("format") != PROFILE_FORMAT:
        raise ValueError("not a calibration profile")
    return CalibrationProfile(
        d["array_id"],
        {int(g): np.array(v) for g, v in d["intra_group_rad"].items()},
        None if d["inter_group_rad"] is None else np.array(d["inter_group_rad"]),
        tuple(tuple(g) for g in d["cpa_chain"]),
        dict(d["inter_array_rad"]),
    )


def write_json(path: str | Path, payload: Any) -> Path:
    path = Path(path)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def write_profiles(path: str | Path, profiles: list[CalibrationProfile], shared_offsets=()) -> Path:
    return write_json(path, {
        "profiles": [profile_to_dict(p) for p in profiles],
        "shared_offsets_rad": [[float(v) for v in off] for off in shared_offsets],
    })


def read_profiles(path: str | Path) -> tuple[list[CalibrationProfile], list[np.ndarray]]:
    d = json.loads(Path(path).read_text(encoding="utf-8"))
    return [profile_from_dict(p) for p in d["profiles"]], [np.array(o) for o in d.get("shared_offsets_rad", [])]


def write_spectrum(path: str | Path, spectrum: SpectrumGrid) -> Path:
    path = Path(path)
    theta = np.degrees(spectrum.theta)
    phi = np.degrees(spectrum.phi)
    lines = ["theta_deg,phi_deg,value"]
    for i, t in enumerate(theta):
        ts = _num(t)
        lines.extend(f"{ts},{_num(p)},{_num(v)}" for p, v in zip(phi, spectrum.values[i]))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def read_spectrum(path: str | Path) -> SpectrumGrid:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    theta = np.unique(data[:, 0])
    phi = np.unique(data[:, 1])
    return SpectrumGrid(np.radians(theta), np.radians(phi), data[:, 2].reshape(theta.size, phi.size))


def peaks_to_dict(peaks: list[AoaEstimate]) -> list[dict[str, Any]]:
    return [
        {"array_id": p.array_id, "elevation_deg": p.direction.degrees()[0], "azimuth_deg": p.direction.degrees()[1],
         "spectrum_value": p.spectrum_value}
        for p in peaks
    ]


def fix_to_dict(fix: PositionFix | GeometricFix, method: str | None = None) -> dict[str, Any]:
    if isinstance(fix, GeometricFix):
        return {"method": "gp", "position_m": [float(v) for v in fix.position], "iterations": 0,
                "residual_m": fix.residual, "skipped_pairs": [list(p) for p in fix.skipped_pairs],
                "behind_pairs": [list(p) for p in fix.behind]}
    return {
        "method": method or fix.method,
        "position_m": [float(v) for v in fix.position],
        "lattice_position_m": None if fix.lattice_position is None else [float(v) for v in fix.lattice_position],
        "iterations": fix.iterations,
        "converged": fix.converged,
        "spectrum_peak": fix.spectrum_peak,
        "residual_m": fix.residual,
    }


def write_lsoi_spectrum(path: str | Path, lsoi: Lsoi, values: np.ndarray) -> Path:
    path = Path(path)
    lines = ["x_m,y_m,z_m,value"]
    lines.extend(f"{_num(x)},{_num(y)},{_num(z)},{_num(v)}" for (x, y, z), v in zip(lsoi.points, values))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path

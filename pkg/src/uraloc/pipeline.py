"""End-to-end stages driven by a :class:`~uraloc.scenario.Scenario`.

Every ``run_*`` function is a pure function of ``(scenario, seed)`` as far as
the numerical files it writes are concerned; wall-clock timings go to a
separate ``timing.json``.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np
from numpy.typing import NDArray

from . import io
from .aoa import (
    ArrayShape,
    AoaResult,
    SmoothingSpec,
    angle_grid,
    angular_errors,
    default_smoothing,
    estimate_aoa,
    match_estimates,
)
from .calibration import CalibrationProfile, SystemCalibration, calibrate_system, measure_profiles
from .fusion import GeometricFix, PositionFix, geometric_position, locate_dpd, smooth_trajectory
from .geometry import Direction, UraConfig, direction_from_point, ray_from_aoa, rotation_from_euler, wavelength_for
from .metrics import MetricsReport, nearest_rank
from .scenario import Scenario
from .simulate import (
    CaptureSchedule,
    CsiCapture,
    HardwareImpairments,
    SharedCapture,
    SourceSpec,
    simulate_calibration,
    simulate_ideal,
    simulate_switched,
    snr_to_noise_variance,
)


class StageError(RuntimeError):
    """Failure inside one pipeline stage; ``stage`` names it for diagnostics."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


def derive_seed(seed: int, *keys: int) -> int:
    """Independent integer seed for a (stage, trial, ...) key path."""
    return int(np.random.SeedSequence([seed, *keys]).generate_state(1)[0])


# stage keys for derive_seed
_SIM, _CAL, _IMP, _TRIAL = 1, 2, 3, 4


# --- building domain objects ---------------------------------------------------


def build_arrays(scn: Scenario) -> list[UraConfig]:
    lam = wavelength_for(scn.frequency_hz)
    out = []
    for a in scn.arrays:
        if a.spacing_m is not None:
            spacing = a.spacing_m
        elif a.spacing_wavelengths is not None:
            spacing = a.spacing_wavelengths * lam
        else:
            spacing = None
        out.append(UraConfig(a.mx, a.my, wavelength=lam, spacing=spacing, center=a.center_m,
                             rotation=rotation_from_euler(*a.orientation_deg), groups=a.groups, cpas=a.cpas,
                             array_id=a.array_id))
    return out


def build_sources(scn: Scenario) -> list[SourceSpec]:
    out = []
    for s in scn.sources:
        gain = None if s.gain_phase_deg is None else complex(np.exp(1j * math.radians(s.gain_phase_deg)))
        direction = None if s.direction_deg is None else Direction.from_degrees(*s.direction_deg)
        out.append(SourceSpec(position=s.position_m, direction=direction, power=s.power,
                              coherence_group=s.coherence_group, gain=gain))
    return out


def build_impairments(scn: Scenario, uras: Sequence[UraConfig], seed: int) -> HardwareImpairments:
    imp = scn.impairments
    total = sum(u.n_elements for u in uras)
    if imp.randomize:
        rng = np.random.default_rng(derive_seed(seed, _IMP))
        return HardwareImpairments.random(total, rng, imp.max_cfo_hz, imp.max_cable_delay_s, scn.frequency_hz)
    pll = np.zeros(3) if imp.pll_phases_deg is None else np.radians(imp.pll_phases_deg)
    return HardwareImpairments(pll, imp.cable_delays_s, imp.cfo_hz, scn.frequency_hz)


def build_schedule(scn: Scenario, uras: Sequence[UraConfig]) -> list[CaptureSchedule]:
    s = scn.schedule
    out = []
    for u in uras:
        default = CaptureSchedule.default(u, s.packets_per_group, s.packet_interval_s)
        order = default.group_order if s.group_order is None else s.group_order
        sched = CaptureSchedule(order, s.packets_per_group, s.packet_interval_s)
        sched.validate(u)
        out.append(sched)
    return out


def region_points(scn: Scenario) -> NDArray[np.float64]:
    """Lattice of candidate source positions of the Monte-Carlo region."""
    mc = scn.monte_carlo
    axes = []
    for lo, hi in (mc.x_m, mc.y_m, mc.z_m):
        n = int(round((hi - lo) / mc.pitch_m)) + 1
        axes.append(np.linspace(lo, hi, n))
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)


# --- acquisition and synchronization ---------------------------------------------


@dataclass
class Acquisition:
    uras: list[UraConfig]
    captures: list[CsiCapture]
    shared: list[SharedCapture] = field(default_factory=list)
    calibration: list[CsiCapture] = field(default_factory=list)
    calibration_shared: list[SharedCapture] = field(default_factory=list)
    impairments: HardwareImpairments | None = None


def acquire(scn: Scenario, seed: int, sources: Sequence[SourceSpec] | None = None,
            noise_variance: float | None = None) -> Acquisition:
    """Simulate the captures of every array (plus calibration captures when switched)."""
    uras = build_arrays(scn)
    sources = build_sources(scn) if sources is None else list(sources)
    nv = scn.impairments.noise_variance if noise_variance is None else noise_variance
    if scn.impairments.mode == "ideal":
        caps = simulate_ideal(uras, sources, scn.snapshots, nv, derive_seed(seed, _SIM), scn.propagation)
        return Acquisition(uras, caps)
    imp = build_impairments(scn, uras, seed)
    schedules = build_schedule(scn, uras)
    run = simulate_switched(uras, sources, imp, schedules, nv, derive_seed(seed, _SIM), scn.propagation)
    cal = simulate_calibration(uras, imp, schedules, nv, derive_seed(seed, _CAL))
    return Acquisition(uras, run.captures, run.shared, cal.captures, cal.shared, imp)


def synchronize(acq: Acquisition, profiles: list[CalibrationProfile] | None = None,
                shared_offsets: list[NDArray[np.float64]] | None = None
                ) -> tuple[list[CsiCapture], NDArray[np.complex128], SystemCalibration | None]:
    """Calibrated per-array captures and the stacked virtual-array snapshots."""
    if not any(c.is_switched for c in acq.captures):
        n = min(c.n_snapshots for c in acq.captures)
        return acq.captures, np.vstack([c.values[:, :n] for c in acq.captures]), None
    if profiles is None:
        profiles, shared_offsets = measure_profiles(acq.calibration, acq.calibration_shared)
    calibrated, system = calibrate_system(acq.captures, acq.shared, profiles, shared_offsets or [])
    return calibrated, system.stacked(calibrated), system


# --- AoA ---------------------------------------------------------------------------


def smoothing_for(scn: Scenario, ura: UraConfig) -> SmoothingSpec:
    if scn.estimator.smoothing is None:
        return default_smoothing(ArrayShape.of(ura))
    return SmoothingSpec(*scn.estimator.smoothing)


def estimate_all(scn: Scenario, captures: Sequence[CsiCapture], method: str, sources: int | None = None
                 ) -> list[AoaResult]:
    est = scn.estimator
    n_src = sources if sources is not None else (est.sources or len(scn.sources))
    theta, phi = angle_grid(est.grid_step_deg)
    return [
        estimate_aoa(c, method, smoothing_for(scn, c.ura), n_src, est.dimension, theta, phi, refine=est.refine)
        for c in captures
    ]


def true_directions(scn: Scenario, ura: UraConfig, sources: Sequence[SourceSpec]) -> list[Direction]:
    return [s.direction if s.direction is not None else direction_from_point(ura, s.position) for s in sources]


# --- localization ------------------------------------------------------------------


@dataclass
class TrialResult:
    truth: NDArray[np.float64]
    snr_db: float | None
    gp: GeometricFix
    dpd: PositionFix | None
    runtimes: dict[str, float]

    def error(self, method: str) -> float:
        fix = self.gp if method == "gp" else self.dpd
        return float(np.linalg.norm(fix.position - self.truth))


def locate_once(scn: Scenario, seed: int, position, snr_db: float | None = None,
                methods: Sequence[str] | None = None) -> TrialResult:
    """One simulated acquisition of a single source at ``position`` followed by GP and DPD fixes.

    ``snr_db=None`` means a noiseless capture.
    """
    methods = tuple(methods or scn.locator.methods)
    position = np.asarray(position, dtype=float)
    nv = 0.0 if snr_db is None else snr_to_noise_variance(snr_db)
    src = [SourceSpec(position=position)]
    times: dict[str, float] = {}

    t0 = time.perf_counter()
    acq = acquire(scn, seed, src, nv)
    times["simulate"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    captures, stacked, _ = synchronize(acq)
    times["calibrate"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    results = estimate_all(scn, captures, scn.estimator.methods[-1], sources=1)
    times["aoa"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    rays = [ray_from_aoa(u, r.estimates[0].direction) for u, r in zip(acq.uras, results) if r.estimates]
    gp = geometric_position(rays)
    times["gp"] = time.perf_counter() - t0
    dpd = None
    if "dpd" in methods:
        loc = scn.locator
        t0 = time.perf_counter()
        dpd = locate_dpd(stacked, acq.uras, gp, loc.lsoi_radius_m, loc.voxel_m, loc.max_iters,
                         model=loc.model, polish=loc.polish)
        times["dpd"] = time.perf_counter() - t0
    return TrialResult(position, snr_db, gp, dpd, times)


def trial_plan(scn: Scenario, seed: int) -> list[tuple[NDArray[np.float64], float | None]]:
    """(position, snr_db) of every Monte-Carlo trial."""
    mc = scn.monte_carlo
    trials = 1 if mc is None else mc.trials
    if mc is not None and mc.x_m is not None:
        candidates = region_points(scn)
    else:
        positioned = [s.position_m for s in scn.sources if s.position_m is not None]
        if len(positioned) != 1:
            raise ValueError("locate needs exactly one source with position_m or a monte_carlo region")
        candidates = np.array([positioned[0]], dtype=float)
    plan = []
    for t in range(trials):
        rng = np.random.default_rng(derive_seed(seed, _TRIAL, t))
        pos = candidates[rng.integers(candidates.shape[0])]
        if mc is not None and mc.snr_db_range is not None:
            snr = float(rng.uniform(*mc.snr_db_range))
        else:
            snr = scn.impairments.snr_db
        plan.append((pos, snr))
    return plan


# --- file-writing stages -------------------------------------------------------------


def _out(out: str | Path) -> Path:
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _stage(stage: str, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except StageError:
        raise
    except (ValueError, ArithmeticError, np.linalg.LinAlgError, KeyError, OSError) as exc:
        raise StageError(stage, str(exc)) from exc


def _write_rows(path: Path, header: Sequence[str], rows: Sequence[Sequence[Any]]) -> Path:
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    return path


def write_acquisition(acq: Acquisition, out: Path) -> list[Path]:
    written = [io.write_capture(out / f"{c.array_id}.csi", c) for c in acq.captures]
    written += [io.write_shared(out / f"shared_{k}.csi", s) for k, s in enumerate(acq.shared)]
    written += [io.write_capture(out / f"cal_{c.array_id}.csi", c) for c in acq.calibration]
    written += [io.write_shared(out / f"cal_shared_{k}.csi", s) for k, s in enumerate(acq.calibration_shared)]
    return written


def read_acquisition(scn: Scenario, directory: str | Path) -> Acquisition:
    directory = Path(directory)
    uras = build_arrays(scn)
    caps = [io.read_capture(directory / f"{u.array_id}.csi") for u in uras]
    shared = [io.read_shared(directory / f"shared_{k}.csi") for k in range(len(uras) - 1)
              if (directory / f"shared_{k}.csi").exists()]
    cal = [io.read_capture(directory / f"cal_{u.array_id}.csi") for u in uras
           if (directory / f"cal_{u.array_id}.csi").exists()]
    cal_shared = [io.read_shared(directory / f"cal_shared_{k}.csi") for k in range(len(uras) - 1)
                  if (directory / f"cal_shared_{k}.csi").exists()]
    return Acquisition([c.ura for c in caps], caps, shared, cal, cal_shared)


def run_simulate(scn: Scenario, seed: int, out: str | Path) -> dict[str, Any]:
    out = _out(out)
    acq = _stage("simulate", acquire, scn, seed)
    files = write_acquisition(acq, out)
    return {"stage": "simulate", "files": [p.name for p in files]}


def _load_or_acquire(scn, seed, captures_dir):
    if captures_dir is not None:
        return _stage("simulate", read_acquisition, scn, captures_dir)
    return _stage("simulate", acquire, scn, seed)


def run_calibrate(scn: Scenario, seed: int, out: str | Path, captures_dir: str | Path | None = None,
                  profile_in: str | Path | None = None, profile_out: str | Path | None = None) -> dict[str, Any]:
    """Three-stage calibration; writes profiles and calibrated captures."""
    out = _out(out)
    acq = _load_or_acquire(scn, seed, captures_dir)
    if not any(c.is_switched for c in acq.captures):
        raise StageError("calibrate", "captures are unswitched; set impairments.mode: switched")
    profiles = offsets = None
    if profile_in is not None:
        profiles, offsets = _stage("calibrate", io.read_profiles, profile_in)
    calibrated, stacked, system = _stage("calibrate", synchronize, acq, profiles, offsets)
    io.write_profiles(profile_out or out / "profiles.json", system.profiles, system.shared_offsets)
    for c in calibrated:
        io.write_capture(out / f"calibrated_{c.array_id}.csi", c)
    report = {"stage": "calibrate", "rotations_rad": [float(r) for r in system.rotations]}
    if captures_dir is None:
        report["phase_residual_rad"] = calibration_residual(scn, seed, acq, calibrated)
    io.write_json(out / "calibration.json", report)
    return report


def calibration_residual(scn: Scenario, seed: int, acq: Acquisition, calibrated: list[CsiCapture]) -> list[float]:
    """Largest phase deviation from the unswitched single-shot capture, up to one global phase, per array."""
    sources = build_sources(scn)
    out = []
    for k, cal in enumerate(calibrated):
        ref = simulate_ideal(acq.uras, sources, cal.n_snapshots, 0.0, derive_seed(seed, _SIM), scn.propagation,
                             cfo=acq.impairments.cfo, timestamps=cal.timestamps)[k]
        rel = cal.values * np.conj(ref.values)
        rel = rel * np.exp(-1j * np.angle(np.sum(rel)))
        out.append(float(np.max(np.abs(np.angle(rel)))))
    return out


def run_aoa(scn: Scenario, seed: int, out: str | Path, methods: Sequence[str] | None = None,
            captures_dir: str | Path | None = None) -> dict[str, Any]:
    """Spectra, peaks and an error table for each array and estimator."""
    out = _out(out)
    acq = _load_or_acquire(scn, seed, captures_dir)
    captures, _, _ = _stage("calibrate", synchronize, acq)
    sources = build_sources(scn)
    rows, peaks = [], {}
    for method in methods or scn.estimator.methods:
        results = _stage("aoa", estimate_all, scn, captures, method)
        for ura, res in zip(acq.uras, results):
            io.write_spectrum(out / f"{ura.array_id}_{method}_spectrum.csv", res.spectrum)
            peaks[f"{ura.array_id}/{method}"] = io.peaks_to_dict(res.estimates)
            truths = _stage("aoa", true_directions, scn, ura, sources)
            pairs = dict(match_estimates([e.direction for e in res.estimates], truths))
            for i, est in enumerate(res.estimates):
                e_deg = est.direction.degrees()
                if i in pairs:
                    t = truths[pairs[i]]
                    d_el, d_az = (math.degrees(v) for v in angular_errors(est.direction, t))
                    rows.append([ura.array_id, method, i, *e_deg, *t.degrees(), d_el, d_az])
                else:
                    rows.append([ura.array_id, method, i, *e_deg, "", "", "", ""])
            if res.shortfall:
                rows.append([ura.array_id, method, "shortfall", "", "", "", "", "", ""])
    _write_rows(out / "aoa_table.csv", ["array_id", "method", "peak", "elevation_deg", "azimuth_deg",
                                        "true_elevation_deg", "true_azimuth_deg", "error_elevation_deg",
                                        "error_azimuth_deg"], rows)
    io.write_json(out / "aoa_peaks.json", peaks)
    return {"stage": "aoa", "rows": len(rows)}


def run_locate(scn: Scenario, seed: int, out: str | Path, methods: Sequence[str] | None = None) -> dict[str, Any]:
    """Paired GP/DPD trials; rows, fixes, metrics and timings."""
    out = _out(out)
    methods = tuple(methods or scn.locator.methods)
    plan = _stage("locate", trial_plan, scn, seed)
    report = MetricsReport()
    rows, fixes = [], []
    for t, (pos, snr) in enumerate(plan):
        res = _stage("locate", locate_once, scn, derive_seed(seed, _TRIAL, t, 1), pos, snr, methods)
        for stage, dt in res.runtimes.items():
            report.add_runtime(stage, dt)
        entry = {"trial": t, "truth_m": [float(v) for v in pos], "snr_db": snr}
        for method in methods:
            fix = res.gp if method == "gp" else res.dpd
            err = res.error(method)
            report.add_error(f"{method}_3d_m", err)
            for axis, d in zip("xyz", np.abs(fix.position - pos)):
                report.add_error(f"{method}_{axis}_m", float(d))
            iters = 0 if method == "gp" else fix.iterations
            rows.append([t, method, *pos.tolist(), *fix.position.tolist(), err, iters])
            entry[method] = io.fix_to_dict(fix)
        fixes.append(entry)
        if t == 0 and res.dpd is not None and res.dpd.lsoi is not None:
            io.write_lsoi_spectrum(out / "lsoi_spectrum.csv", res.dpd.lsoi, res.dpd.lsoi_values)
    _write_rows(out / "locate_rows.csv", ["trial", "method", "true_x_m", "true_y_m", "true_z_m", "x_m", "y_m",
                                          "z_m", "error_m", "iterations"], rows)
    io.write_json(out / "fixes.json", fixes)
    summary = report.summary(with_runtimes=False)
    io.write_json(out / "metrics.json", summary)
    io.write_json(out / "timing.json", report.summary()["runtimes_s"])
    return {"stage": "locate", **summary}


def run_track(scn: Scenario, seed: int, out: str | Path, method: str | None = None) -> dict[str, Any]:
    """Per-waypoint fixes along the scenario trajectory, raw and median-smoothed."""
    out = _out(out)
    if scn.trajectory is None:
        raise StageError("track", "scenario has no trajectory block")
    method = method or ("dpd" if "dpd" in scn.locator.methods else "gp")
    truth = np.array(scn.trajectory.points(), dtype=float)
    raw = []
    for k, pos in enumerate(truth):
        res = _stage("locate", locate_once, scn, derive_seed(seed, _TRIAL, k, 2), pos, scn.impairments.snr_db, (method,))
        raw.append((res.gp if method == "gp" else res.dpd).position)
    raw = np.array(raw)
    smoothed = _stage("track", smooth_trajectory, raw, scn.trajectory.window)
    raw_err = np.linalg.norm(raw - truth, axis=1)
    smooth_err = np.linalg.norm(smoothed - truth, axis=1)
    rows = [[k, *truth[k], *raw[k], *smoothed[k], raw_err[k], smooth_err[k]] for k in range(len(truth))]
    _write_rows(out / "track.csv", ["index", "true_x_m", "true_y_m", "true_z_m", "raw_x_m", "raw_y_m", "raw_z_m",
                                    "smooth_x_m", "smooth_y_m", "smooth_z_m", "raw_error_m", "smooth_error_m"], rows)
    summary = {
        "stage": "track",
        "method": method,
        "waypoints": len(truth),
        "raw_median_m": nearest_rank(raw_err, 50),
        "smoothed_median_m": nearest_rank(smooth_err, 50),
    }
    io.write_json(out / "track_metrics.json", summary)
    return summary


def bench_scenario(scn: Scenario, seed: int) -> tuple[MetricsReport, list[list[float]]]:
    """Time each configured stage over ``bench.repeats`` runs with the same seed."""
    bench = scn.bench
    stages = bench.stages if bench is not None else ("simulate", "calibrate", "aoa", "locate")
    repeats = bench.repeats if bench is not None else 3
    report = MetricsReport()
    outputs = []
    for _ in range(repeats):
        with report.timed("setup"):
            uras = build_arrays(scn)
        if not stages:
            outputs.append([])
            continue
        with report.timed("simulate"):
            acq = acquire(scn, seed)
        captures = acq.captures
        stacked = None
        if "calibrate" in stages or "locate" in stages:
            with report.timed("calibrate"):
                captures, stacked, _ = synchronize(acq)
        numbers = []
        if "aoa" in stages or "locate" in stages:
            with report.timed("aoa"):
                results = estimate_all(scn, captures, scn.estimator.methods[-1])
            numbers += [v for r in results for e in r.estimates for v in e.direction.degrees()]
        if "locate" in stages and len(uras) > 1:
            with report.timed("gp"):
                gp = geometric_position([ray_from_aoa(u, r.estimates[0].direction) for u, r in zip(uras, results)])
            loc = scn.locator
            with report.timed("dpd"):
                dpd = locate_dpd(stacked, uras, gp, loc.lsoi_radius_m, loc.voxel_m, loc.max_iters,
                                 model=loc.model, polish=loc.polish)
            numbers += gp.position.tolist() + dpd.position.tolist()
        outputs.append(numbers)
    return report, outputs


def run_bench(scenarios: Sequence[Scenario], seed: int, out: str | Path) -> dict[str, Any]:
    out = _out(out)
    result = {}
    for scn in scenarios:
        report, outputs = _stage("bench", bench_scenario, scn, seed)
        runtimes = report.summary()["runtimes_s"]
        result[scn.name] = {
            "runtimes_s": runtimes,
            "deterministic": all(o == outputs[0] for o in outputs),
            "outputs": outputs[0],
        }
    io.write_json(out / "bench.json", result)
    return {"stage": "bench", **result}

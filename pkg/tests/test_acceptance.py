"""Acceptance criteria A1-A8.

Each test records one PASS/FAIL line; the lines are printed in the pytest
terminal summary (see conftest.py) and when this file is run directly.
"""

import math
import time
from dataclasses import replace

import numpy as np
import pytest
from scipy.stats import chi

from uraloc import pipeline
from uraloc.aoa import (
    SmoothingSpec,
    angle_grid,
    angular_errors,
    estimate_aoa,
    forward_backward_smooth,
    forward_smooth,
    match_estimates,
)
from uraloc.cli import main
from uraloc.fusion import closest_points, geometric_position, locate_dpd, smooth_trajectory
from uraloc.geometry import Direction, Ray, UraConfig, ray_from_aoa
from uraloc.scenario import ImpairmentBlock, dump_scenario, load_scenario, parse_scenario
from uraloc.simulate import SourceSpec, simulate_ideal

from conftest import SCENARIOS

RESULTS: dict[str, str] = {}

FIG8_TRUTH = [(21.8, 90.0), (32.0, 56.0), (15.0, -60.0), (60.0, -150.0)]


def record(name: str, passed: bool, detail: str) -> None:
    RESULTS[name] = f"{name} {'PASS' if passed else 'FAIL'}: {detail}"
    print(RESULTS[name])


def worst_errors(estimates, truths):
    """Largest matched (elevation, azimuth) error in degrees; inf if a source has no peak."""
    if len(estimates) < len(truths):
        return math.inf, math.inf
    pairs = match_estimates([e.direction for e in estimates], truths)
    errs = [angular_errors(estimates[i].direction, truths[j]) for i, j in pairs]
    return max(math.degrees(e[0]) for e in errs), max(math.degrees(e[1]) for e in errs)


def test_a1_coherent_sources_resolved():
    scn = load_scenario(SCENARIOS / "coherent_four.yaml")
    truths = [Direction.from_degrees(*d) for d in FIG8_TRUTH]
    theta, phi = angle_grid(scn.estimator.grid_step_deg)
    start = time.perf_counter()
    cap = pipeline.acquire(scn, scn.seed).captures[0]
    good = estimate_aoa(cap, "i-ssmusic", SmoothingSpec(3, 3), sources=4, theta=theta, phi=phi)
    elapsed = time.perf_counter() - start
    bad = estimate_aoa(cap, "music", sources=4, theta=theta, phi=phi)
    el, az = worst_errors(good.estimates, truths)
    m_el, m_az = worst_errors(bad.estimates, truths)
    music_fails = bad.shortfall or max(m_el, m_az) > 5.0
    ok = el <= 2.5 and az <= 2.5 and not good.shortfall and music_fails and elapsed < 5.0
    peaks = ", ".join(f"({e.direction.degrees()[0]:.1f},{e.direction.degrees()[1]:.1f})" for e in good.estimates)
    record("A1", ok, f"I-SSMUSIC peaks {peaks}; worst error el {el:.2f} deg az {az:.2f} deg; "
                     f"MUSIC worst {max(m_el, m_az):.1f} deg; {elapsed:.2f} s")
    assert ok


def test_a2_decorrelation_capacity():
    ura = UraConfig(3, 4)
    spec = SmoothingSpec(3, 3)  # two subarrays on a 3x4 array

    def rank(cov):
        w = np.linalg.eigvalsh(cov.values)
        return int(np.sum(w > 1e-9 * np.trace(cov.values).real))

    ranks = {}
    for n in (3, 4):
        src = [SourceSpec(direction=Direction.from_degrees(*d), coherence_group="one") for d in FIG8_TRUTH[:n]]
        cap = simulate_ideal([ura], src, 50)[0]
        ranks[n] = (rank(forward_smooth(cap, SmoothingSpec(3, 3, "forward"))), rank(forward_backward_smooth(cap, spec)))
    ok = ranks[3][0] <= 2 and ranks[4][0] <= 2 and ranks[4][1] == 4
    record("A2", ok, f"forward rank (3 src, 4 src) = ({ranks[3][0]}, {ranks[4][0]}); "
                     f"forward-backward rank with 4 src = {ranks[4][1]}")
    assert ok


def test_a3_calibration_round_trip():
    scn = load_scenario(SCENARIOS / "calibration_roundtrip.yaml")
    assert scn.arrays[0].cpas == (0, 5, 7, 9)  # elements 1, 6, 8, 10 counted from one
    # five random draws plus one explicit case at the 10 kHz CFO limit
    edge = replace(scn, impairments=ImpairmentBlock(
        mode="switched", pll_phases_deg=(120.0, -75.0, 33.0),
        cable_delays_s=tuple(np.linspace(0.0, 2e-9, 12).tolist()), cfo_hz=10_000.0))
    worst, slowest, cfos = 0.0, 0.0, []
    for seed, case in enumerate([scn] * 5 + [edge]):
        start = time.perf_counter()
        acq = pipeline.acquire(case, seed)
        calibrated, _, _ = pipeline.synchronize(acq)
        slowest = max(slowest, time.perf_counter() - start)
        residual = pipeline.calibration_residual(case, seed, acq, calibrated)
        worst = max(worst, max(residual))
        cfos.append(abs(acq.impairments.cfo))
    ok = worst < 1e-6 and slowest < 1.0
    record("A3", ok, f"max phase residual {worst:.2e} rad over 6 impairment sets (|CFO| up to {max(cfos):.0f} Hz); "
                     f"slowest run {slowest:.2f} s")
    assert ok


@pytest.mark.slow
def test_a4_dpd_not_worse_than_gp():
    scn = load_scenario(SCENARIOS / "two_ura_region.yaml")
    assert scn.monte_carlo.trials >= 100
    assert len(pipeline.region_points(scn)) == 11 * 11 * 5
    start = time.perf_counter()
    gp, dpd = [], []
    for t, (pos, snr) in enumerate(pipeline.trial_plan(scn, scn.seed)):
        assert 10.0 <= snr <= 15.0
        res = pipeline.locate_once(scn, pipeline.derive_seed(scn.seed, 4, t, 1), pos, snr)
        gp.append(res.error("gp"))
        dpd.append(res.error("dpd"))
    noiseless = []
    for t, (pos, _) in enumerate(pipeline.trial_plan(scn, scn.seed + 1)[:10]):
        res = pipeline.locate_once(scn, t, pos, None, ("dpd",))
        noiseless.append(res.error("dpd"))
    elapsed = time.perf_counter() - start
    med_gp, med_dpd = float(np.median(gp)), float(np.median(dpd))
    q = scn.locator.voxel_m
    ok = med_dpd <= med_gp and max(noiseless) <= q and elapsed < 600
    record("A4", ok, f"{len(gp)} paired trials: median GP {100 * med_gp:.2f} cm, DPD {100 * med_dpd:.2f} cm; "
                     f"noiseless DPD max error {1000 * max(noiseless):.2f} mm (q = {1000 * q:.0f} mm); {elapsed:.0f} s")
    assert ok


def _grid_search_closest(ah, dh, ai, di, half=4, resolution=1e-9, max_iter=5000):
    """Pattern search over (t_h, t_i) minimising the squared gap, many pairs at once.

    A (2*half+1)^2 grid is centred on the best point so far; the step halves
    only when the best point is interior, so the search can walk along the
    shallow valley of near-parallel pairs.
    """
    n = len(ah)
    center = np.zeros((n, 2))
    step = np.ones(n)
    g = np.arange(-half, half + 1)
    w0 = ah - ai
    for _ in range(max_iter):
        t = center[:, 0, None] + step[:, None] * g
        s = center[:, 1, None] + step[:, None] * g
        gap = w0[:, None, None, :] + t[:, :, None, None] * dh[:, None, None, :] - s[:, None, :, None] * di[:, None, None, :]
        f = np.einsum("nabk,nabk->nab", gap, gap).reshape(n, -1)
        bi, bj = np.divmod(f.argmin(axis=1), g.size)
        center = np.column_stack([t[np.arange(n), bi], s[np.arange(n), bj]])
        interior = (bi > 0) & (bi < g.size - 1) & (bj > 0) & (bj < g.size - 1)
        step = np.where(interior, step / 2, step)
        if step.max() < resolution:
            break
    return center


def test_a5_closest_points_oracle():
    rng = np.random.default_rng(20)
    n = 10_000
    ah, ai = rng.uniform(-5, 5, (n, 3)), rng.uniform(-5, 5, (n, 3))
    dh, di = rng.standard_normal((n, 3)), rng.standard_normal((n, 3))
    dh /= np.linalg.norm(dh, axis=1)[:, None]
    di /= np.linalg.norm(di, axis=1)[:, None]
    start = time.perf_counter()
    params, perp = np.empty((n, 2)), 0.0
    gaps = np.empty(n)
    for k in range(n):
        p, q, tt = closest_points(Ray(ah[k], dh[k]), Ray(ai[k], di[k]))
        params[k] = tt
        gaps[k] = np.linalg.norm(p - q)
        perp = max(perp, abs((p - q) @ dh[k]), abs((p - q) @ di[k]))
    oracle = _grid_search_closest(ah, dh, ai, di)
    elapsed = time.perf_counter() - start
    # The gap is flat along the valley of nearly parallel rays: with squared gaps
    # resolved to ~1e-12 the parameters are pinned only to ~1e-6 / sin(angle).
    sin_angle = np.sqrt(1 - np.sum(dh * di, axis=1) ** 2)
    tol = 1e-6 / sin_angle
    param_err = np.max(np.abs(params - oracle), axis=1)
    oracle_gap = np.linalg.norm(ah + oracle[:, :1] * dh - ai - oracle[:, 1:] * di, axis=1)
    ok = bool(np.all(param_err <= tol)) and perp <= 1e-9 and bool(np.all(gaps <= oracle_gap + 1e-12)) and elapsed < 30
    record("A5", ok, f"{n} pairs: worst parameter error / tolerance {np.max(param_err / tol):.3f}; "
                     f"max perpendicularity residual {perp:.1e}; {elapsed:.1f} s")
    assert ok


@pytest.mark.slow
def test_a6_traversal_converges_quickly():
    scn = load_scenario(SCENARIOS / "two_ura_region.yaml")
    loc = scn.locator
    iterations, converged = [], []
    for t, (pos, _) in enumerate(pipeline.trial_plan(scn, 606)):
        acq = pipeline.acquire(scn, t, [SourceSpec(position=pos)], noise_variance=0.0)
        captures, stacked, _ = pipeline.synchronize(acq)
        results = pipeline.estimate_all(scn, captures, "i-ssmusic", sources=1)
        gp = geometric_position([ray_from_aoa(u, r.estimates[0].direction) for u, r in zip(acq.uras, results)])
        fix = locate_dpd(stacked, acq.uras, gp, loc.lsoi_radius_m, loc.voxel_m, loc.max_iters, model=loc.model,
                         polish=False)
        iterations.append(fix.iterations)
        converged.append(fix.converged)
    iterations = np.array(iterations)
    within3 = float(np.mean((iterations <= 3) & np.array(converged)))
    ok = len(iterations) >= 100 and within3 >= 0.9 and iterations.max() <= 4
    counts = {int(k): int(np.sum(iterations == k)) for k in np.unique(iterations)}
    record("A6", ok, f"{len(iterations)} trials: {100 * within3:.0f}% converged within 3 iterations; "
                     f"iteration counts {counts}; max {iterations.max()}")
    assert ok


def test_a7_trajectory_smoothing():
    scn = load_scenario(SCENARIOS / "walk.yaml")
    truth = np.array(scn.trajectory.points())
    assert len(truth) == 98
    # isotropic Gaussian fix noise: the 3D error follows a chi(3) law, so this
    # per-axis sigma puts the raw median error at 0.11 m
    sigma = 0.11 / chi(3).median()
    rng = np.random.default_rng(98)
    raw = truth + sigma * rng.standard_normal(truth.shape)
    smoothed = smooth_trajectory(raw, window=scn.trajectory.window)
    raw_med = float(np.median(np.linalg.norm(raw - truth, axis=1)))
    smooth_med = float(np.median(np.linalg.norm(smoothed - truth, axis=1)))
    reduction = 1 - smooth_med / raw_med
    ok = abs(raw_med - 0.11) <= 0.02 and reduction >= 0.10
    record("A7", ok, f"98 waypoints: raw median {raw_med:.3f} m, smoothed {smooth_med:.3f} m "
                     f"({100 * reduction:.0f}% reduction)")
    assert ok


def test_a8_determinism_and_formats(tmp_path):
    coarse = tmp_path / "coarse.yaml"
    coarse.write_text((SCENARIOS / "coherent_four.yaml").read_text().replace("grid_step_deg: 0.2", "grid_step_deg: 1.0"))
    located = tmp_path / "located.yaml"
    located.write_text((SCENARIOS / "two_ura_switched.yaml").read_text())
    runs = []
    for tag in ("first", "second"):
        out = tmp_path / tag
        assert main(["simulate", "--scenario", str(coarse), "--seed", "8", "--out", str(out / "sim")]) == 0
        assert main(["aoa", "--scenario", str(coarse), "--seed", "8", "--out", str(out / "aoa")]) == 0
        assert main(["locate", "--scenario", str(located), "--seed", "8", "--out", str(out / "loc")]) == 0
        runs.append(out)
    names = ["sim/ura0.csi", "sim/ura0.truth.json", "aoa/ura0_i-ssmusic_spectrum.csv", "aoa/aoa_peaks.json",
             "loc/fixes.json", "loc/locate_rows.csv", "loc/lsoi_spectrum.csv"]
    identical = [(runs[0] / n).read_bytes() == (runs[1] / n).read_bytes() for n in names]
    shipped = sorted(SCENARIOS.glob("*.yaml"))
    lossless = []
    for path in shipped:
        scn = load_scenario(path)
        lossless.append(parse_scenario(dump_scenario(scn)) == scn)
    ok = all(identical) and all(lossless)
    record("A8", ok, f"{sum(identical)}/{len(names)} output files byte-identical across runs; "
                     f"{sum(lossless)}/{len(shipped)} scenarios round-trip losslessly")
    assert ok


if __name__ == "__main__":
    import sys

    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))

import math

import numpy as np
import pytest

from uraloc.aoa import sample_covariance
from uraloc.geometry import Direction, UraConfig, steering_vector, wrap_phase
from uraloc.simulate import (
    CaptureSchedule,
    HardwareImpairments,
    SourceSpec,
    default_shared_group,
    inter_array_phase,
    simulate_ideal,
    simulate_switched,
    snr_to_noise_variance,
)


def rank(mat, rel=1e-9):
    w = np.linalg.eigvalsh(mat)
    return int(np.sum(w > rel * np.trace(mat).real))


def test_single_source_columns_are_collinear_with_steering(ura):
    d = Direction.from_degrees(40, 25)
    cap = simulate_ideal([ura], [SourceSpec(direction=d)], 20)[0]
    a = steering_vector(ura, d)
    a = a / np.linalg.norm(a)
    for col in cap.values.T:
        resid = col - a * (a.conj() @ col)
        assert np.linalg.norm(resid) / np.linalg.norm(col) < 1e-12


def test_one_snapshot_rank_one(ura):
    cap = simulate_ideal([ura], [SourceSpec(direction=Direction.from_degrees(10, 10))], 1)[0]
    assert rank(sample_covariance(cap).values) == 1


def test_coherent_groups_set_the_rank(ura):
    dirs = [Direction.from_degrees(*a) for a in [(20, 30), (40, -100), (60, 150)]]
    coherent = [SourceSpec(direction=d, coherence_group="a") for d in dirs]
    assert rank(sample_covariance(simulate_ideal([ura], coherent, 200)[0]).values) == 1
    mixed = coherent[:2] + [SourceSpec(direction=dirs[2], coherence_group="b")]
    assert rank(sample_covariance(simulate_ideal([ura], mixed, 200)[0]).values) == 2


def test_two_incoherent_sources_rank_two(ura):
    srcs = [SourceSpec(direction=Direction.from_degrees(20, 0)), SourceSpec(direction=Direction.from_degrees(50, 90))]
    assert rank(sample_covariance(simulate_ideal([ura], srcs, 500)[0]).values) == 2


def test_noise_energy_matches_variance(ura):
    # E||N||_F^2 = M T sigma^2, checked over many trials
    var, t, trials = 0.3, 40, 200
    src = [SourceSpec(direction=Direction(0.0, 0.0), power=0.0)]
    energy = [np.sum(np.abs(simulate_ideal([ura], src, t, var, seed=s)[0].values) ** 2) for s in range(trials)]
    expected = ura.n_elements * t * var
    assert abs(np.mean(energy) / expected - 1) < 3 / math.sqrt(trials)


def test_same_seed_reproduces_bits(ura):
    src = [SourceSpec(direction=Direction.from_degrees(30, 30))]
    a = simulate_ideal([ura], src, 10, 0.1, seed=9)[0].values
    b = simulate_ideal([ura], src, 10, 0.1, seed=9)[0].values
    assert np.array_equal(a, b)
    assert not np.array_equal(a, simulate_ideal([ura], src, 10, 0.1, seed=10)[0].values)


def test_no_impairments_switched_equals_ideal(ura):
    src = [SourceSpec(position=(0.3, 0.2, 2.0))]
    run = simulate_switched([ura], src, HardwareImpairments(), seed=4)
    ideal = simulate_ideal([ura], src, 50, seed=4)[0]
    cap = run.captures[0]
    for col in range(cap.n_snapshots):
        rows = cap.mask[:, col]
        np.testing.assert_allclose(cap.values[rows, col], ideal.values[rows, cap.snapshot[col]], atol=1e-12)


def test_cfo_is_common_within_a_packet(ura):
    src = [SourceSpec(direction=Direction.from_degrees(25, 70))]
    clean = simulate_switched([ura], src, HardwareImpairments(), seed=2).captures[0]
    with_cfo = simulate_switched([ura], src, HardwareImpairments(cfo=7300.0), seed=2).captures[0]
    ratio = with_cfo.values * np.conj(clean.values)
    for col in range(clean.n_snapshots):
        phases = np.angle(ratio[with_cfo.mask[:, col], col])
        assert np.ptp(wrap_phase(phases - phases[0])) < 1e-12
        assert abs(wrap_phase(phases[0] + 2 * np.pi * 7300.0 * clean.timestamps[col])) < 1e-9


def test_cpa_phase_across_groups_follows_cfo(ura):
    # CPA 0 is sampled in group 0 (slot 0) and in redundant group 4 (slot 4)
    cfo = 3100.0
    run = simulate_switched([ura], [SourceSpec(direction=Direction.from_degrees(30, -40))],
                            HardwareImpairments(pll_phases=[0.4, -1.0, 2.0], cfo=cfo), seed=1)
    cap = run.captures[0]
    p = cap.schedule.packets_per_group
    first = cap.values[0, cap.column_group == 0]
    later = cap.values[0, cap.column_group == 4]
    dt = 4 * p * cap.schedule.packet_interval
    np.testing.assert_allclose(np.angle(later * np.conj(first)), wrap_phase(-2 * np.pi * cfo * dt), atol=1e-9)


def test_schedule_validation(ura):
    with pytest.raises(ValueError, match="out of range"):
        CaptureSchedule((0, 1, 2, 3, 9)).validate(ura)
    with pytest.raises(ValueError, match="never samples"):
        CaptureSchedule((0, 1, 2)).validate(ura)


def test_rejections(ura):
    with pytest.raises(ValueError):
        simulate_ideal([ura], [], 5)
    with pytest.raises(ValueError):
        simulate_ideal([ura], [SourceSpec(direction=Direction(0, 0))], 0)
    with pytest.raises(ValueError, match="coincides"):
        simulate_ideal([ura], [SourceSpec(position=(0, 0, 0))], 2)
    with pytest.raises(ValueError):
        SourceSpec()


def test_inter_array_phase_examples():
    lam = 0.05
    assert inter_array_phase((0, 2, 1.17), (2, 0, 1.17), (1, 1, 1.17), lam) == 0.0
    assert inter_array_phase((0, 0, 0), (1, 0, 0), (0.5 + lam / 4, 0, 0), lam) == pytest.approx(math.pi)
    with pytest.raises(ValueError):
        inter_array_phase((0, 0, 0), (1, 0, 0), (0, 0, 0), lam)


def test_default_shared_group(two_uras):
    assert default_shared_group(two_uras, 1) == ((0, 0), (0, 5), (1, 7))


def test_snr_conversion():
    assert snr_to_noise_variance(10.0) == pytest.approx(0.1)
    assert snr_to_noise_variance(0.0, power=2.0) == pytest.approx(2.0)

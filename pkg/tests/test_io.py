import json

import numpy as np

from uraloc import io
from uraloc.aoa import SpectrumGrid
from uraloc.calibration import CalibrationProfile
from uraloc.geometry import UraConfig, rotation_from_euler
from uraloc.simulate import HardwareImpairments, SourceSpec, simulate_switched


def test_switched_capture_round_trip(tmp_path, two_uras):
    imp = HardwareImpairments.random(24, np.random.default_rng(2))
    run = simulate_switched(two_uras, [SourceSpec(position=(1.2, 1.5, 1.0))], imp, noise_variance=0.01)
    cap = run.captures[1]
    path = io.write_capture(tmp_path / "south.csi", cap)
    back = io.read_capture(path)
    assert np.array_equal(back.values, cap.values)
    assert np.array_equal(back.mask, cap.mask)
    assert np.array_equal(back.timestamps, cap.timestamps)
    assert np.array_equal(back.column_group, cap.column_group)
    assert back.schedule == cap.schedule
    assert np.array_equal(back.ura.rotation, cap.ura.rotation)
    assert back.ura.cpas == cap.ura.cpas and back.ura.array_id == "south"
    truth = json.loads((tmp_path / "south.truth.json").read_text())
    assert truth["simulation_only"] is True
    assert truth["sources"][0]["position_m"] == [1.2, 1.5, 1.0]


def test_capture_records_are_x_major_entries(tmp_path):
    ura = UraConfig(2, 2, rotation=rotation_from_euler(10, 20, 30))
    from uraloc.simulate import CsiCapture

    cap = CsiCapture(ura, np.arange(8).reshape(4, 2) + 0.5j, [0.0, 0.25])
    text = io.write_capture(tmp_path / "c.csi", cap).read_text()
    body = [line for line in text.splitlines() if not line.startswith("#")]
    assert body[0] == "snapshot,timestamp_s,element,re,im"
    assert body[1:4] == ["0,0.0,0,0.0,0.5", "0,0.0,1,2.0,0.5", "0,0.0,2,4.0,0.5"]


def test_shared_round_trip(tmp_path, two_uras):
    run = simulate_switched(two_uras, [SourceSpec(position=(1.2, 1.5, 1.0))], HardwareImpairments())
    sh = run.shared[0]
    back = io.read_shared(io.write_shared(tmp_path / "s.csi", sh))
    assert back.elements == sh.elements
    assert np.array_equal(back.values, sh.values)


def test_profile_round_trip(tmp_path):
    prof = CalibrationProfile("ura0", {0: [0.0, 1.0, -2.0], 4: [0.0, 0.5, 3.0]}, [0.0, 0.1, 0.2, 0.3],
                              ((0, 5, 7), (5, 7, 9)), {"ura1": 0.25})
    path = io.write_profiles(tmp_path / "p.json", [prof], [np.array([0.0, 0.2, 0.4])])
    (back,), offsets = io.read_profiles(path)
    assert back.array_id == "ura0" and back.cpa_chain == prof.cpa_chain
    assert all(np.array_equal(back.intra_group[g], prof.intra_group[g]) for g in prof.intra_group)
    assert np.array_equal(back.inter_group, prof.inter_group)
    assert back.inter_array == {"ura1": 0.25}
    assert np.array_equal(offsets[0], [0.0, 0.2, 0.4])


def test_spectrum_round_trip(tmp_path):
    theta = np.radians([0.0, 0.5, 1.0])
    phi = np.radians([-180.0, -90.0, 0.0, 90.0])
    spec = SpectrumGrid(theta, phi, np.arange(12.0).reshape(3, 4) / 7)
    back = io.read_spectrum(io.write_spectrum(tmp_path / "s.csv", spec))
    assert np.array_equal(back.values, spec.values)
    np.testing.assert_allclose(back.theta, theta, atol=1e-15)

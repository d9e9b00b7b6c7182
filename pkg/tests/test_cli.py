import json
import subprocess
import sys

import pytest

from uraloc.cli import main

from conftest import SCENARIOS


def test_simulate_is_byte_deterministic(tmp_path):
    scn = str(SCENARIOS / "calibration_roundtrip.yaml")
    for run in ("a", "b"):
        assert main(["simulate", "--scenario", scn, "--seed", "3", "--out", str(tmp_path / run)]) == 0
    files = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert "ura0.csi" in files and "cal_ura0.csi" in files and "ura0.truth.json" in files
    for name in files:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_seed_changes_output(tmp_path):
    scn = str(SCENARIOS / "calibration_roundtrip.yaml")
    main(["simulate", "--scenario", scn, "--seed", "1", "--out", str(tmp_path / "a")])
    main(["simulate", "--scenario", scn, "--seed", "2", "--out", str(tmp_path / "b")])
    assert (tmp_path / "a" / "ura0.csi").read_bytes() != (tmp_path / "b" / "ura0.csi").read_bytes()


def test_calibrate_from_saved_captures_and_profile(tmp_path):
    scn = str(SCENARIOS / "calibration_roundtrip.yaml")
    assert main(["simulate", "--scenario", scn, "--out", str(tmp_path / "cap")]) == 0
    assert main(["calibrate", "--scenario", scn, "--out", str(tmp_path / "c1"), "--captures", str(tmp_path / "cap"),
                 "--save-profile", str(tmp_path / "prof.json")]) == 0
    assert main(["calibrate", "--scenario", scn, "--out", str(tmp_path / "c2"),
                 "--load-profile", str(tmp_path / "prof.json")]) == 0
    report = json.loads((tmp_path / "c2" / "calibration.json").read_text())
    assert max(report["phase_residual_rad"]) < 1e-6
    a = (tmp_path / "c1" / "calibrated_ura0.csi").read_bytes()
    assert a == (tmp_path / "c2" / "calibrated_ura0.csi").read_bytes()


def test_bad_scenario_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("name: x\narrays:\n  - {mx: 3, my: 4, center: [0, 0, 0]}\nsources:\n  - {direction_deg: [0, 0]}\n")
    assert main(["simulate", "--scenario", str(bad), "--out", str(tmp_path / "o")]) == 2
    err = capsys.readouterr().err
    assert "error [scenario]" in err and "bad.yaml:3:" in err and "center" in err


def test_stage_failure_is_attributed(tmp_path, capsys):
    code = main(["calibrate", "--scenario", str(SCENARIOS / "coherent_four.yaml"), "--out", str(tmp_path)])
    assert code == 3
    assert "stage=calibrate" in capsys.readouterr().err


def test_aoa_method_sweep(tmp_path):
    scn = tmp_path / "coarse.yaml"
    scn.write_text((SCENARIOS / "coherent_four.yaml").read_text().replace("grid_step_deg: 0.2", "grid_step_deg: 2.0"))
    assert main(["aoa", "--scenario", str(scn), "--out", str(tmp_path / "o"), "--method", "music",
                 "--method", "i-ssmusic"]) == 0
    rows = (tmp_path / "o" / "aoa_table.csv").read_text().splitlines()
    assert {r.split(",")[1] for r in rows[1:]} == {"music", "i-ssmusic"}
    assert (tmp_path / "o" / "ura0_music_spectrum.csv").exists()


def test_bench_noop_is_fast(tmp_path):
    assert main(["bench", "--scenario", str(SCENARIOS / "noop.yaml"), "--out", str(tmp_path)]) == 0
    report = json.loads((tmp_path / "bench.json").read_text())["noop"]
    assert set(report["runtimes_s"]) == {"setup"}
    assert report["runtimes_s"]["setup"]["median"] < 0.05
    assert report["deterministic"]


def test_console_entry_point(tmp_path):
    out = subprocess.run([sys.executable, "-m", "uraloc.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for cmd in ("simulate", "calibrate", "aoa", "locate", "track", "bench"):
        assert cmd in out.stdout
    with pytest.raises(SystemExit):
        main(["locate"])


def _short_walk(tmp_path, extra=""):
    text = (SCENARIOS / "walk.yaml").read_text().replace("count: 98", "count: 12").replace("window: 5", "window: 3")
    path = tmp_path / "walk.yaml"
    path.write_text(text + extra)
    return str(path)


def test_track_writes_raw_and_smoothed(tmp_path):
    assert main(["track", "--scenario", _short_walk(tmp_path), "--out", str(tmp_path / "out")]) == 0
    rows = (tmp_path / "out" / "track.csv").read_text().splitlines()
    assert len(rows) == 13
    metrics = json.loads((tmp_path / "out" / "track_metrics.json").read_text())
    assert metrics["waypoints"] == 12 and metrics["smoothed_median_m"] > 0


def test_locate_single_trial(tmp_path):
    extra = "monte_carlo:\n  trials: 2\n  x_m: [1.4, 1.6]\n  y_m: [1.4, 1.6]\n  z_m: [1.0, 1.0]\n  pitch_m: 0.2\n"
    assert main(["locate", "--scenario", _short_walk(tmp_path, extra), "--out", str(tmp_path / "out")]) == 0
    for name in ("locate_rows.csv", "fixes.json", "metrics.json", "timing.json"):
        assert (tmp_path / "out" / name).exists()
    rows = (tmp_path / "out" / "locate_rows.csv").read_text().splitlines()
    assert len(rows) == 3

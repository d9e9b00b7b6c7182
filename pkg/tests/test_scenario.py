import pytest

from uraloc.scenario import ScenarioError, dump_scenario, load_scenario, parse_scenario

from conftest import SCENARIOS

BASE = """\
name: t
arrays:
  - id: a
    mx: 3
    my: 4
sources:
  - direction_deg: [20.0, 30.0]
impairments:
  snr_db: 10.0
"""


@pytest.mark.parametrize("path", sorted(SCENARIOS.glob("*.yaml")), ids=lambda p: p.stem)
def test_shipped_scenarios_round_trip(path):
    scn = load_scenario(path)
    again = parse_scenario(dump_scenario(scn))
    assert again == scn
    assert dump_scenario(again) == dump_scenario(scn)


def test_snr_converted_once():
    scn = parse_scenario(BASE)
    assert scn.impairments.noise_variance == pytest.approx(0.1)
    assert "noise_variance" not in dump_scenario(scn)


def test_exponent_without_dot_is_a_number():
    scn = parse_scenario(BASE + "frequency_hz: 5e9\n")
    assert scn.frequency_hz == 5e9


@pytest.mark.parametrize(
    "edit,line,fragment",
    [
        (("    my: 4", "    my: 4\n    spacing: 0.03"), 6, "unknown key"),
        (("    mx: 3", "    mx: three"), 4, "expected an integer"),
        (("  snr_db: 10.0", "  snr_db: loud"), 9, "expected a number"),
        (("[20.0, 30.0]", "[120.0, 30.0]"), 7, "outside [0, 90]"),
        (("  - direction_deg: [20.0, 30.0]", "  - 42"), 7, "must be a mapping"),
    ],
)
def test_line_level_diagnostics(edit, line, fragment):
    with pytest.raises(ScenarioError) as err:
        parse_scenario(BASE.replace(*edit), "bad.yaml")
    msg = str(err.value)
    assert msg.startswith(f"bad.yaml:{line}:"), msg
    assert fragment in msg


def test_empty_source_list_rejected():
    with pytest.raises(ScenarioError, match="at least one source"):
        parse_scenario(BASE.split("sources:")[0] + "sources: []\n")


def test_malformed_yaml_reports_line():
    with pytest.raises(ScenarioError, match=r"^x.yaml:4: malformed"):
        parse_scenario("name: t\narrays:\n  - [unclosed\n", "x.yaml")  # error surfaces at end of stream


def test_missing_file():
    with pytest.raises(ScenarioError, match="cannot read"):
        load_scenario(SCENARIOS / "nope.yaml")


def test_trajectory_polyline():
    scn = parse_scenario(BASE + "trajectory:\n  vertices_m: [[0, 0, 1], [2, 0, 1], [2, 1, 1]]\n  count: 4\n")
    pts = scn.trajectory.points()
    assert pts[0] == (0.0, 0.0, 1.0) and pts[-1] == (2.0, 1.0, 1.0)
    assert pts[1] == pytest.approx((1.0, 0.0, 1.0))
    assert pts[2] == pytest.approx((2.0, 0.0, 1.0))

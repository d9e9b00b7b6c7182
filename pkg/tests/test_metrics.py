import pytest

from uraloc.metrics import MetricsReport, nearest_rank


def test_nearest_rank_by_hand():
    data = [15, 20, 35, 40, 50]
    # ranks: ceil(0.3*5)=2, ceil(0.4*5)=2, ceil(0.5*5)=3, ceil(1.0*5)=5
    assert nearest_rank(data, 30) == 20
    assert nearest_rank(data, 40) == 20
    assert nearest_rank(data, 50) == 35
    assert nearest_rank(data, 100) == 50
    assert nearest_rank([3, 1, 2, 4], 50) == 2
    assert nearest_rank([7.0], 90) == 7.0


def test_nearest_rank_rejects_bad_input():
    with pytest.raises(ValueError):
        nearest_rank([], 50)
    with pytest.raises(ValueError):
        nearest_rank([1, 2], 0)


def test_report_summary_and_timing():
    rep = MetricsReport()
    for v in [0.3, 0.1, 0.2]:
        rep.add_error("gp_3d_m", v)
    with rep.timed("aoa"):
        pass
    s = rep.summary()
    assert s["errors"]["gp_3d_m"] == {"count": 3, "p50": 0.2, "p90": 0.3}
    assert s["runtimes_s"]["aoa"]["count"] == 1
    assert "runtimes_s" not in rep.summary(with_runtimes=False)
    with pytest.raises(ValueError):
        rep.add_error("x", -1.0)

import math

import pytest

from unlearnaudit import audit as aud
from unlearnaudit.errors import ArgumentError, CoverageError
from unlearnaudit.risk import RiskRecord, RiskTable


def table(ratios, fpr=0.1):
    records = {}
    for i, r in ratios.items():
        ln = math.log(r) if r > 0 else -math.inf
        records[i] = RiskRecord(i, min(r * fpr, 1.0), fpr, r, ln)
    return RiskTable(records)


def test_select_by_risk():
    t = table({i: float(r) for i, r in enumerate([3, 9, 1, 4, 8, 2, 7, 5, 6, 0.5])})
    assert aud.select_by_risk(t, 0.2, "top") == [1, 4]
    assert aud.select_by_risk(t, 0.2, "bottom") == [2, 9]
    top, bottom = aud.select_by_risk(t, 0.5, "top"), aud.select_by_risk(t, 0.5, "bottom")
    assert sorted(top + bottom) == list(range(10)) and not set(top) & set(bottom)
    flat = table({i: 2.0 for i in range(10)})
    assert aud.select_by_risk(flat, 0.3, "top") == [0, 1, 2]
    assert aud.select_by_risk(flat, 0.3, "bottom") == [0, 1, 2]
    assert len(aud.select_by_risk(t, 0.05, "top")) == 1  # ceil(0.5)
    for k in (0.0, 0.6):
        with pytest.raises(ArgumentError):
            aud.select_by_risk(t, k)


def test_criterion1_examples():
    b, a = table({0: 5.0, 1: 5.0, 2: 5.0}), table({0: 3.0, 1: 5.5, 2: 4.9})
    v = aud.check_criterion1(b, a, [0, 1])["c1"]
    assert (v[0].passed, v[0].margin) == (True, 2.0)
    assert v[1].passed is False
    v = aud.check_criterion1(b, a, [2], t1=0.5)["c1"][0]
    assert v.passed is False and v.margin == pytest.approx(-0.4)
    with pytest.raises(CoverageError):
        aud.check_criterion1(b, a, [7])


def test_criterion1_abs():
    a = table({0: math.exp(0.005), 1: math.exp(0.02)})
    v = aud.check_criterion1(a, a, [0, 1], t_abs=0.01)["c1_abs"]
    assert [x.passed for x in v] == [True, False]


def test_criterion1_scale_covariance():
    b, a = table({0: 5.0, 1: 2.0, 2: 3.0}), table({0: 4.0, 1: 2.5, 2: 2.0})
    base = [v.passed for v in aud.check_criterion1(b, a, [0, 1, 2], t1=0.5)["c1"]]
    for c in (0.1, 3.0, 1e4):
        bs, as_ = table({i: r * c for i, r in {0: 5.0, 1: 2.0, 2: 3.0}.items()}), \
            table({i: r * c for i, r in {0: 4.0, 1: 2.5, 2: 2.0}.items()})
        assert [v.passed for v in aud.check_criterion1(bs, as_, [0, 1, 2], t1=0.5 * c)["c1"]] == base


def test_criterion2_dp():
    a = table({0: math.exp(1.8), 1: math.exp(2.3), 2: 0.0})
    v = aud.check_criterion2_dp(a, [0, 1, 2], 2.0)
    assert [x.passed for x in v] == [True, False, True]
    assert v[0].margin == pytest.approx(0.2)
    for eps in (0.5, 1.0, 2.0, 3.0):
        lower = {x.sample_id for x in aud.check_criterion2_dp(a, [0, 1, 2], eps) if x.passed}
        higher = {x.sample_id for x in aud.check_criterion2_dp(a, [0, 1, 2], eps + 0.7) if x.passed}
        assert lower <= higher


def test_criterion2_dp_at_ceiling_never_fails():
    floor = 0.1
    a = table({i: r for i, r in enumerate([1.0, 3.0, 10.0, 7.5])}, fpr=floor)
    v = aud.check_criterion2_dp(a, [0, 1, 2, 3], math.log(1 / floor))
    assert aud.failure_rate(v) == 0.0


def test_criterion2_nondp():
    b = table({0: 4.0, 1: 6.0, 2: 1.0})
    a = table({0: 6.0, 1: 6.1, 2: 0.5})
    v = aud.check_criterion2_nondp(b, a, [0, 1, 2], t2=0.0)
    assert [x.passed for x in v] == [True, False, True]
    v = aud.check_criterion2_nondp(b, a, [0, 1, 2], t2=-6.0)
    assert not any(x.passed for x in v)


def test_failure_rate():
    mk = lambda p: aud.CriterionVerdict(0, "c1", p, 0.0)
    assert aud.failure_rate([mk(False)] * 2 + [mk(True)] * 998) == 0.002
    assert aud.failure_rate([mk(True)] * 50) == 0.0
    assert aud.failure_rate([mk(False)] * 3) == 1.0
    with pytest.raises(ArgumentError):
        aud.failure_rate([])


def hand_tables():
    """Four samples; forget = {0, 1}; retained = {2, 3}."""
    before = table({0: 5.0, 1: 2.0, 2: 3.0, 3: 1.0})
    after = table({0: 4.0, 1: 2.5, 2: 5.5, 3: math.exp(1.5)})
    return before, after


def test_hand_built_report():
    before, after = hand_tables()
    th = aud.Thresholds(t1=0.5, t_abs=0.01, epsilon=1.6, t2=0.0, dp_mode=True)
    r = aud.build_report(before, after, [0, 1], th, {"note": "hand"})
    # c1: 4 < 4.5 pass; 2.5 < 1.5 fail
    assert [v.passed for v in r.verdicts["c1"]] == [True, False]
    # c1_abs: ln 4 and ln 2.5 are both above 0.01
    assert [v.passed for v in r.verdicts["c1_abs"]] == [False, False]
    # c2_dp: ln 5.5 = 1.70 > 1.6 fail; 1.5 <= 1.6 pass
    assert [v.passed for v in r.verdicts["c2_dp"]] == [False, True]
    # c2_nondp: bound max(before) = 5; 5.5 fail, e^1.5 = 4.48 pass
    assert [v.passed for v in r.verdicts["c2_nondp"]] == [False, True]
    assert (r.failure_rate_c1, r.failure_rate_c1_abs, r.failure_rate_c2) == (0.5, 1.0, 0.5)
    assert r.c2_variant == "c2_dp" and (r.n_forget, r.n_retained) == (2, 2)
    nondp = aud.build_report(before, after, [0, 1], aud.Thresholds(t1=0.5))
    assert nondp.c2_variant == "c2_nondp" and "c2_dp" not in nondp.verdicts


def test_empty_forget_set():
    before, after = hand_tables()
    r = aud.build_report(before, after, [], aud.Thresholds())
    assert r.verdicts["c1"] == [] and r.failure_rate_c1 is None
    assert [v.sample_id for v in r.verdicts["c2_nondp"]] == [0, 1, 2, 3]


def test_report_round_trip(tmp_path):
    before, after = hand_tables()
    after.records[3] = RiskRecord(3, 0.0, 0.1, 0.0, -math.inf)
    r = aud.build_report(before, after, [0, 1], aud.Thresholds(epsilon=2.0, dp_mode=True), {"k": 0.05},
                         ln_ratio_ceiling=math.log(16))
    aud.save_report(r, tmp_path / "r.json")
    back = aud.load_report(tmp_path / "r.json")
    assert back == r
    aud.save_verdicts(r, tmp_path / "v.csv", config_hash="abc")
    lines = (tmp_path / "v.csv").read_text().splitlines()
    assert lines[0] == "sample_id,criterion,pass,margin,config_hash"
    assert len(lines) == 1 + sum(len(v) for v in r.verdicts.values())


def test_thresholds_validation():
    with pytest.raises(ArgumentError):
        aud.Thresholds(t1=-1)
    with pytest.raises(ArgumentError):
        aud.Thresholds(dp_mode=True)

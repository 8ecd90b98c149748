import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cellsegkit.ema import (ValidationTrace, detect_outlier, ema_update, select_best, trace_from_csv,
                            trace_to_csv)


def feed(values, **kw):
    tr = ValidationTrace(**kw)
    for v in values:
        ema_update(tr, v)
    return tr


def plateau_with_crash():
    rng = np.random.default_rng(0)
    rise = list(np.linspace(0.5, 0.9, 12))
    plateau = list(0.9166 + rng.normal(0, 0.004, 20))
    return rise + plateau + [0.1366] + list(0.9166 + rng.normal(0, 0.004, 5))


def test_ema_examples():
    assert feed([0.9, 0.8]).ema == pytest.approx(0.89, abs=1e-15)
    tr = feed([0.7] * 50)
    assert all(r.ema_dice == 0.7 for r in tr.records)
    vals = [0.3, 0.8, 0.55, 0.6]
    tr = feed(vals, alpha=0.0, outlier_floor=1.0)
    assert [r.ema_dice for r in tr.records] == vals


def test_range_errors():
    tr = ValidationTrace()
    for bad in (-0.1, 1.5, float("nan")):
        with pytest.raises(ValueError):
            ema_update(tr, bad)
    with pytest.raises(ValueError):
        ValidationTrace(alpha=1.0)
    with pytest.raises(ValueError):
        select_best(tr)
    with pytest.raises(ValueError):
        select_best(feed([0.5]), by="median")


def test_crash_is_flagged_and_never_selected():
    vals = plateau_with_crash()
    tr = feed(vals)
    crash = len(vals) - 5
    flagged = [r.epoch for r in tr.records if r.outlier]
    assert flagged == [crash]
    assert tr.records[crash - 1].ema_dice == tr.records[crash - 2].ema_dice
    assert select_best(tr) != crash
    assert select_best(tr) in range(13, len(vals) + 1)


def test_monotone_improvement_never_flagged():
    tr = feed([0.5 + 0.002 * i for i in range(200)])
    assert not any(r.outlier for r in tr.records)
    assert select_best(tr) == 200
    assert select_best(tr, by="raw") == 200


def test_first_epochs_never_flagged():
    tr = feed([0.9, 0.05, 0.95])
    assert not any(r.outlier for r in tr.records)
    assert detect_outlier(feed([0.9, 0.9]), 0.0) is False


def test_only_drops_are_flagged():
    tr = feed([0.90, 0.91, 0.90, 0.91, 0.90])
    assert detect_outlier(tr, 0.5)
    assert not detect_outlier(tr, 1.0)


def test_tie_goes_to_later_epoch():
    tr = feed([0.8, 0.8, 0.8])
    assert select_best(tr) == 3 and select_best(tr, by="raw") == 3
    tr = feed([0.2, 0.9, 0.4, 0.9], outlier_floor=1.0)
    assert select_best(tr, by="raw") == 4


def test_selection_stable_under_worse_epochs():
    vals = plateau_with_crash()
    tr = feed(vals)
    best = select_best(tr)
    floor = min(r.ema_dice for r in tr.records)
    for _ in range(10):
        ema_update(tr, floor * 0.5)
        assert select_best(tr) == best


def test_removing_outlier_leaves_later_emas_identical():
    vals = plateau_with_crash()
    full = feed(vals)
    crash = [r.epoch for r in full.records if r.outlier][0]
    without = feed(vals[:crash - 1] + vals[crash:])
    a = [r.ema_dice for r in full.records if r.epoch != crash]
    b = [r.ema_dice for r in without.records]
    assert a == b


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0.0, 1.0), min_size=1, max_size=40), st.floats(0.0, 0.99))
def test_ema_within_inlier_range(values, alpha):
    tr = feed(values, alpha=alpha)
    inl = [r.raw_dice for r in tr.records if not r.outlier]
    for r in tr.records:
        assert min(inl) - 1e-12 <= r.ema_dice <= max(inl) + 1e-12
    assert not tr.records[select_best(tr) - 1].outlier


def test_csv_round_trip():
    tr = feed(plateau_with_crash())
    text = trace_to_csv(tr)
    assert text.splitlines()[0] == "epoch,raw_dice,ema_dice,outlier"
    back = trace_from_csv(text)
    assert [(r.epoch, r.raw_dice, r.ema_dice, r.outlier) for r in back.records] == \
        [(r.epoch, r.raw_dice, r.ema_dice, r.outlier) for r in tr.records]
    assert select_best(back) == select_best(tr)

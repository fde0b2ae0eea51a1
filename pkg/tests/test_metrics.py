import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from aspest import metrics as M
from aspest.exceptions import DegenerateFrameError, ShapeError
from oracles import (
    acc_at_cov_oracle,
    auacc_oracle,
    auroc_oracle,
    cov_at_acc_oracle,
    cov_star_oracle,
    sweep_points,
)

T, F = True, False


def frame(scores, correct, selected=None):
    return M.EvalFrame(np.array(scores, dtype=float), np.array(correct), selected)


@st.composite
def frames(draw):
    n = draw(st.integers(1, 24))
    # a small score alphabet produces plenty of ties
    scores = draw(st.lists(st.sampled_from([0.1, 0.25, 0.5, 0.5, 0.75, 0.9, 1.0]),
                           min_size=n, max_size=n))
    correct = draw(st.lists(st.booleans(), min_size=n, max_size=n))
    selected = draw(st.lists(st.booleans(), min_size=n, max_size=n))
    if all(selected):
        selected[0] = False
    return frame(scores, correct, np.array(selected))


@given(frames(), st.floats(0, 1))
def test_metrics_match_sweep_oracle(fr, t):
    args = (fr.scores, fr.correct, fr.selected)
    assert M.auacc(fr) == pytest.approx(auacc_oracle(*args), abs=1e-9)
    assert M.max_acc_at_coverage(fr, t) == pytest.approx(acc_at_cov_oracle(*args, t), abs=1e-9)
    assert M.max_cov_at_accuracy(fr, t) == pytest.approx(cov_at_acc_oracle(*args, t), abs=1e-9)
    assert M.cov_star_at_accuracy(fr, t) == pytest.approx(cov_star_oracle(*args, t), abs=1e-9)


@given(frames())
def test_monotone_transform_invariance(fr):
    warped = M.EvalFrame(np.exp(3 * fr.scores) - 7, fr.correct, fr.selected)
    for fn in (M.auacc, lambda f: M.max_cov_at_accuracy(f, 0.7),
               lambda f: M.max_acc_at_coverage(f, 0.3)):
        assert fn(warped) == pytest.approx(fn(fr), abs=1e-12)


@given(frames())
def test_trivial_targets(fr):
    curve = M.accuracy_coverage_curve(fr)
    assert M.max_cov_at_accuracy(fr, 0.0) == 1.0
    assert M.max_acc_at_coverage(fr, 0.0) == pytest.approx(curve.accuracy.max())
    assert 0.0 <= M.auacc(fr) <= 1.0
    assert M.cov_star_at_accuracy(fr, 0.0) == pytest.approx(1 - fr.n_selected / fr.n)


def test_acc_cov_examples():
    fr = frame([0.9, 0.8, 0.6, 0.4], [T, T, F, F])
    assert M.acc_cov_at_threshold(fr, 0.7) == (1.0, 0.5)
    assert M.acc_cov_at_threshold(fr, 0.5) == (pytest.approx(2 / 3), 0.75)
    assert M.acc_cov_at_threshold(fr, math.inf) == (1.0, 0.0)
    assert M.acc_cov_at_threshold(fr, -math.inf) == (0.5, 1.0)


def test_acc_cov_excludes_labeled_points():
    fr = frame([0.9, 0.8, 0.6, 0.4], [T, T, F, F], np.array([T, F, F, F]))
    acc, cov = M.acc_cov_at_threshold(fr, 0.7)
    assert (acc, cov) == (1.0, pytest.approx(1 / 3))


def test_max_acc_at_coverage_examples():
    fr = frame([0.9, 0.8, 0.6, 0.4], [T, T, F, F])
    assert M.max_acc_at_coverage(fr, 0.5) == 1.0
    assert M.max_acc_at_coverage(fr, 1.0) == 0.5


def test_max_cov_at_accuracy_examples():
    # both top-scored points are correct, so accepting the top two keeps accuracy 1
    assert M.max_cov_at_accuracy(frame([0.9, 0.8, 0.6, 0.4], [T, T, F, F]), 1.0) == 0.5
    # here only the top-scored point is accepted at accuracy 1
    assert M.max_cov_at_accuracy(frame([0.9, 0.8, 0.6, 0.4], [T, F, T, F]), 1.0) == 0.25


def test_auacc_worked_example():
    fr = frame([0.9, 0.8, 0.6, 0.4], [T, F, T, F])
    expected = auacc_oracle(fr.scores, fr.correct)
    # hand trapezoid over coverage 1, .75, .5, .25, 0 with accuracy .5, 2/3, .5, 1, 1
    by_hand = 0.25 * ((0.5 + 2 / 3) + (2 / 3 + 0.5) + (0.5 + 1) + (1 + 1)) / 2
    assert expected == pytest.approx(by_hand, abs=1e-12)
    assert M.auacc(fr) == pytest.approx(by_hand, abs=1e-12)
    assert by_hand == pytest.approx(0.7291666666666666)


def test_cov_star_bounded_by_unlabeled_fraction():
    fr = frame([0.9, 0.8, 0.6, 0.4], [T, F, T, F], np.array([T, F, F, F]))
    assert M.cov_star_at_accuracy(fr, 1.0) == pytest.approx(
        cov_star_oracle(fr.scores, fr.correct, fr.selected, 1.0))
    assert M.cov_star_at_accuracy(fr, 0.0) == 0.75


def test_all_selected_is_degenerate():
    with pytest.raises(DegenerateFrameError):
        M.auacc(frame([0.5], [T], np.array([T])))


def test_shape_errors():
    with pytest.raises(ShapeError):
        frame([0.5, 0.6], [T])
    with pytest.raises(ShapeError):
        frame([np.nan], [T])


def test_constant_scores_single_interior_point():
    fr = frame([0.5] * 4, [T, F, T, T])
    curve = M.accuracy_coverage_curve(fr)
    np.testing.assert_allclose(curve.coverage, [1, 1, 0])
    assert M.auacc(fr) == pytest.approx((0.75 + 1) / 2)


@given(frames())
def test_auroc_matches_pair_enumeration(fr):
    s, c = fr.unselected()
    if c.all() or not c.any():
        assert M.metric_bundle(fr)["auroc"] is None
        return
    assert M.auroc(fr) == pytest.approx(auroc_oracle(s, c), abs=1e-12)


def test_overconfidence_ratio():
    fr = frame([1.0, 1.0, 0.7, 1.0 - 1e-13, 0.4], [T, F, F, F, F])
    assert M.overconfidence_ratio(fr) == pytest.approx(0.5)


def test_bundle_keys():
    b = M.metric_bundle(frame([0.9, 0.8, 0.6, 0.4], [T, F, T, F]))
    assert set(b) == {"accuracy", "acc_at_cov", "cov_at_acc", "cov_star_at_acc", "auacc",
                      "auroc", "overconfidence_ratio"}
    assert b["overconfidence_ratio"] == 0.0


def test_curve_csv_roundtrip(tmp_path):
    fr = frame([0.9, 0.8, 0.6, 0.4], [T, F, T, F])
    curve = M.accuracy_coverage_curve(fr)
    M.write_curve_csv(curve, tmp_path / "c.csv")
    lines = (tmp_path / "c.csv").read_text().splitlines()
    assert lines[0] == "tau,coverage,accuracy"
    assert lines[1].startswith("-inf,1.0,") and lines[-1].startswith("inf,0.0,1.0")
    back = M.read_curve_csv(tmp_path / "c.csv")
    assert M.curve_area(back) == pytest.approx(M.auacc(fr), abs=1e-12)


def test_sweep_oracle_endpoints():
    pts = sweep_points([0.3, 0.3], [T, F])
    assert [p[1] for p in pts] == [1.0, 1.0, 0.0]

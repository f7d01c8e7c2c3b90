import io
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import (
    SCATTER_NEGATIVES,
    SCATTER_POSITIVES,
    SCATTER_THRESHOLD,
    exhaustive_pr_points,
    trapezoid,
)
from seqgauge.evaluation import (
    EvalError,
    ScoreSet,
    auc_roc_pairwise,
    confusion_at,
    curve,
    expand_benign,
    format_curve_csv,
    imbalance_sweep,
    parse_curve_csv,
    pr_curve,
    read_scores_csv,
    roc_curve,
    write_scores_csv,
)

SCATTER = ScoreSet(SCATTER_POSITIVES, SCATTER_NEGATIVES)


def random_scores(rng, tie_grid=None):
    p = int(rng.integers(1, 30))
    n = int(rng.integers(1, 30))
    if tie_grid:
        return ScoreSet(rng.integers(0, tie_grid, p) / 2, rng.integers(0, tie_grid, n) / 2)
    return ScoreSet(rng.normal(0.5, 1, p), rng.normal(0, 1, n))


# -- score sets and confusion counts ----------------------------------------


def test_score_set_rejects_non_finite():
    with pytest.raises(EvalError):
        ScoreSet([1.0, math.nan], [0.0])
    with pytest.raises(EvalError):
        ScoreSet([1.0], [-math.inf])


def test_empty_score_set_cannot_build_curves():
    with pytest.raises(EvalError):
        roc_curve(ScoreSet([], [1.0]))
    with pytest.raises(EvalError):
        pr_curve(ScoreSet([1.0], []))
    with pytest.raises(EvalError):
        confusion_at(ScoreSet([], []), 0.0)


def test_scatter_threshold_counts():
    c = confusion_at(SCATTER, SCATTER_THRESHOLD)
    assert (c.tp, c.fn, c.fp, c.tn) == (7, 3, 2, 8)
    assert (c.fpr, c.tpr) == (0.2, 0.7)
    assert c.precision == pytest.approx(7 / 9)


def test_thresholds_beyond_the_scores():
    lo = confusion_at(SCATTER, -100.0)
    hi = confusion_at(SCATTER, 100.0)
    assert (lo.tp, lo.fp, lo.fn, lo.tn) == (10, 10, 0, 0)
    assert (hi.tp, hi.fp) == (0, 0)


def test_threshold_is_inclusive():
    c = confusion_at(ScoreSet([1.0], [1.0]), 1.0)
    assert (c.tp, c.fp) == (1, 1)


# -- ROC --------------------------------------------------------------------


def test_scatter_roc():
    roc = roc_curve(SCATTER)
    assert (0.2, 0.7) in roc.points
    assert roc.points[0] == (0.0, 0.0) and roc.points[-1] == (1.0, 1.0)
    assert roc.auc == 0.75


def test_roc_separated():
    assert roc_curve(ScoreSet([3, 4, 5], [0, 1, 2])).auc == 1.0


def test_roc_small_case_matches_enumeration():
    s = ScoreSet([0.9, 0.8, 0.7], [0.85, 0.1])
    assert roc_curve(s).auc == pytest.approx(4 / 6, abs=1e-15)
    assert auc_roc_pairwise(s) == pytest.approx(4 / 6, abs=1e-15)


def test_roc_identical_multisets():
    s = ScoreSet([1, 2, 2, 5], [5, 2, 1, 2])
    assert roc_curve(s).auc == 0.5 and auc_roc_pairwise(s) == 0.5


def test_roc_single_value_everywhere():
    s = ScoreSet([3.0, 3.0], [3.0])
    assert roc_curve(s).points == ((0.0, 0.0), (1.0, 1.0))
    assert roc_curve(s).auc == 0.5


def test_roc_ties_draw_a_diagonal():
    roc = roc_curve(ScoreSet([2.0, 1.0], [2.0, 0.0]))
    assert roc.points == ((0.0, 0.0), (0.5, 0.5), (0.5, 1.0), (1.0, 1.0))


def test_roc_x_is_non_decreasing():
    rng = np.random.default_rng(1)
    for _ in range(50):
        roc = roc_curve(random_scores(rng, tie_grid=8))
        assert np.all(np.diff(roc.x) >= 0) and np.all(np.diff(roc.y) >= 0)


def test_roc_auc_equals_pairwise_estimator():
    rng = np.random.default_rng(2024)
    for i in range(1000):
        s = random_scores(rng, tie_grid=10 if i % 2 else None)
        assert abs(roc_curve(s).auc - auc_roc_pairwise(s)) <= 1e-12


def test_pairwise_estimator_against_loops():
    rng = np.random.default_rng(3)
    for _ in range(30):
        s = random_scores(rng, tie_grid=6)
        total = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in s.positives for n in s.negatives)
        assert auc_roc_pairwise(s) == pytest.approx(total / (s.positives.size * s.negatives.size), abs=1e-15)


# -- PR ---------------------------------------------------------------------


def test_scatter_pr():
    pr = pr_curve(SCATTER)
    assert (0.7, 7 / 9) in pr.points
    assert pr.auc == pytest.approx(0.69, abs=0.01)


def test_pr_separated_balanced():
    assert pr_curve(ScoreSet([3, 4, 5], [0, 1, 2])).auc == 1.0


def test_pr_small_case_matches_exhaustive_sweep():
    s = ScoreSet([3.0, 1.0], [2.0])
    oracle = exhaustive_pr_points([3.0, 1.0], [2.0])
    assert oracle == [(0.5, 1.0), (0.5, 0.5), (1.0, 2 / 3)]
    pr = pr_curve(s)
    assert pr.points == ((0.0, 1.0), *oracle)
    assert pr.auc == pytest.approx(trapezoid([(0.0, 1.0), *oracle]), abs=1e-15)


def test_pr_matches_exhaustive_sweep_random():
    rng = np.random.default_rng(9)
    for _ in range(200):
        s = random_scores(rng, tie_grid=8)
        oracle = exhaustive_pr_points(s.positives.tolist(), s.negatives.tolist())
        if oracle[0][0] > 0:
            oracle = [(0.0, oracle[0][1]), *oracle]
        pr = pr_curve(s)
        np.testing.assert_allclose(np.array(pr.points), np.array(oracle), atol=1e-15)
        assert abs(pr.auc - trapezoid(oracle)) < 1e-12


def test_pr_recall_spans_unit_interval():
    rng = np.random.default_rng(4)
    for _ in range(50):
        pr = pr_curve(random_scores(rng, tie_grid=5))
        assert pr.x[0] == 0.0 and pr.x[-1] == 1.0
        assert np.all(np.diff(pr.x) >= 0)
        assert 0.0 <= pr.auc <= 1.0


def test_curve_dispatch():
    assert curve(SCATTER, "roc").kind == "roc"
    assert curve(SCATTER, "pr").kind == "pr"
    with pytest.raises(EvalError):
        curve(SCATTER, "det")


# -- benign expansion -------------------------------------------------------


def test_expand_identity_and_multiplicity():
    same = expand_benign(SCATTER, 1)
    assert np.array_equal(same.negatives, SCATTER.negatives) and np.array_equal(same.positives, SCATTER.positives)
    neg = np.arange(40.0)
    big = expand_benign(ScoreSet([1.0], neg), 10)
    assert big.negatives.size == 400
    vals, counts = np.unique(big.negatives, return_counts=True)
    assert np.array_equal(vals, neg) and np.all(counts == 10)
    with pytest.raises(EvalError):
        expand_benign(SCATTER, 0)


def test_expanded_precision_formula():
    c = confusion_at(expand_benign(SCATTER, 10), SCATTER_THRESHOLD)
    assert (c.tp, c.fp) == (7, 20)
    assert c.precision == pytest.approx(0.2593, abs=1e-4)


def test_expansion_leaves_roc_points_unchanged():
    rng = np.random.default_rng(6)
    for _ in range(100):
        s = random_scores(rng, tie_grid=7)
        base = roc_curve(s)
        for n in (2, 10, 100, 1000):
            big = roc_curve(expand_benign(s, n))
            assert big.points == base.points
            assert big.auc == base.auc


def test_imbalance_sweep_grid():
    rows = imbalance_sweep(SCATTER, [1, 10, 100, 1000])
    assert [r.n for r in rows] == [1, 10, 100, 1000]
    assert all(r.auc_roc == 0.75 for r in rows)
    assert all(a.auc_pr >= b.auc_pr for a, b in zip(rows, rows[1:]))
    assert rows[-1].auc_pr < rows[0].auc_pr
    with pytest.raises(EvalError):
        imbalance_sweep(SCATTER, [])


def test_imbalance_sweep_random():
    rng = np.random.default_rng(12)
    for _ in range(100):
        rows = imbalance_sweep(random_scores(rng, tie_grid=9), [1, 10, 100])
        assert max(r.auc_roc for r in rows) - min(r.auc_roc for r in rows) <= 1e-12
        assert rows[0].auc_pr >= rows[1].auc_pr - 1e-12 >= rows[2].auc_pr - 2e-12


# -- symmetry properties ----------------------------------------------------


finite = st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False)
sets = st.tuples(st.lists(finite, min_size=1, max_size=25), st.lists(finite, min_size=1, max_size=25))
grid = st.tuples(
    st.lists(st.integers(0, 6), min_size=1, max_size=25), st.lists(st.integers(0, 6), min_size=1, max_size=25)
)


@settings(max_examples=200, deadline=None)
@given(st.one_of(sets, grid))
def test_trapezoid_equals_pairwise(data):
    s = ScoreSet(*data)
    assert abs(roc_curve(s).auc - auc_roc_pairwise(s)) <= 1e-12


@settings(max_examples=100, deadline=None)
@given(grid)
def test_monotone_transform_keeps_curves(data):
    s = ScoreSet(*data)
    t = ScoreSet(np.exp(s.positives / 3) * 5 - 2, np.exp(s.negatives / 3) * 5 - 2)
    assert roc_curve(t).points == roc_curve(s).points
    assert pr_curve(t).points == pr_curve(s).points


@settings(max_examples=100, deadline=None)
@given(st.one_of(sets, grid))
def test_label_swap_and_reversal(data):
    s = ScoreSet(*data)
    auc = roc_curve(s).auc
    mirrored = ScoreSet(-s.negatives, -s.positives)
    assert abs(roc_curve(mirrored).auc - auc) <= 1e-12
    assert abs(roc_curve(s.swapped()).auc + auc - 1.0) <= 1e-12


@settings(max_examples=100, deadline=None)
@given(grid, st.integers(1, 50))
def test_expansion_property(data, n):
    s = ScoreSet(*data)
    assert roc_curve(expand_benign(s, n)).points == roc_curve(s).points
    assert pr_curve(expand_benign(s, n)).auc <= pr_curve(s).auc + 1e-12


# -- CSV --------------------------------------------------------------------


def test_scores_csv_round_trip():
    s = ScoreSet([0.1, -2.5e-7], [1 / 3], ("a", "b"), ("c",))
    buf = io.StringIO()
    write_scores_csv(s, buf)
    assert buf.getvalue().splitlines()[0] == "sample_id,label,score"
    back = read_scores_csv(io.StringIO(buf.getvalue()))
    assert np.array_equal(back.positives, s.positives) and np.array_equal(back.negatives, s.negatives)
    assert back.positive_ids == ("a", "b") and back.negative_ids == ("c",)


def test_scores_csv_family_labels_are_positive():
    text = "# note\nsample_id,label,score\nx,zbot,1.5\ny,benign,0.5\nz,0,0.1\n"
    s = read_scores_csv(io.StringIO(text))
    assert s.positives.tolist() == [1.5] and s.negatives.tolist() == [0.5, 0.1]


@pytest.mark.parametrize("text", ["a,b\n", "x,benign,notanumber\n"])
def test_scores_csv_errors(text):
    with pytest.raises(EvalError):
        read_scores_csv(io.StringIO(text))


def test_curve_csv_round_trip():
    c = pr_curve(SCATTER)
    meta, pts = parse_curve_csv(format_curve_csv(c, 10, family="f"))
    assert meta == {"kind": "pr", "auc": f"{c.auc:.6f}", "expand": "10", "family": "f"}
    assert tuple(pts) == c.points

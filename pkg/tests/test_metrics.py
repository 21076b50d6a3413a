import logging
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dcmt import metrics as M
from dcmt.numerics import DimensionError


def pairwise_auc(scores, positive):
    pos = [s for s, p in zip(scores, positive) if p]
    neg = [s for s, p in zip(scores, positive) if not p]
    wins = sum(1.0 if a > b else 0.5 if a == b else 0.0 for a in pos for b in neg)
    return wins / (len(pos) * len(neg))


def pairwise_macro(scores, labels):
    return float(np.mean([pairwise_auc(scores[:, c], labels == c) for c in range(scores.shape[1])]))


def hand_recall_f1(cm):
    """Exact per-class arithmetic in rationals."""
    n = len(cm)
    recs, f1s = [], []
    for c in range(n):
        tp = cm[c][c]
        actual = sum(cm[c])
        predicted = sum(cm[r][c] for r in range(n))
        r = Fraction(tp, actual) if actual else Fraction(0)
        p = Fraction(tp, predicted) if predicted else Fraction(0)
        recs.append(r)
        f1s.append(2 * r * p / (r + p) if r + p else Fraction(0))
    return float(sum(recs) / n), float(sum(f1s) / n)


# --- recall / F1 ----------------------------------------------------------------

CONFUSIONS = [
    [[5, 0, 0], [0, 3, 0], [0, 0, 7]],
    [[1, 1], [1, 1]],
    [[4, 0, 0], [3, 0, 1], [2, 0, 5]],
    [[0, 2], [2, 0]],
    [[10, 0], [5, 5]],
    [[3, 1, 1], [1, 3, 1], [1, 1, 3]],
    [[7, 2, 1], [0, 9, 1], [0, 0, 10]],
    [[1, 0, 0, 0], [0, 2, 1, 0], [0, 0, 0, 3], [1, 1, 1, 1]],
    [[6, 4], [0, 0]],
    [[0, 0, 5], [0, 0, 5], [0, 0, 5]],
]


@pytest.mark.parametrize("cm", CONFUSIONS)
def test_recall_f1_library(cm):
    rec, f1 = M.recall_f1(np.array(cm))
    er, ef = hand_recall_f1(cm)
    assert abs(rec - er) < 1e-15 and abs(f1 - ef) < 1e-15


def test_recall_f1_examples():
    assert M.recall_f1(np.diag([4, 2, 9])) == (1.0, 1.0)
    assert M.recall_f1(np.array([[1, 1], [1, 1]])) == (0.5, 0.5)
    with pytest.raises(M.UsageError):
        M.recall_f1(np.zeros((3, 3)))
    with pytest.raises(M.UsageError):
        M.recall_f1(np.zeros((0, 0)))


def test_confusion_rows_are_class_counts():
    labels = [0, 0, 1, 2, 2, 2]
    cm = M.confusion_matrix(labels, [0, 1, 1, 2, 0, 2], 3)
    assert cm.sum(axis=1).tolist() == [2, 1, 3]
    assert cm.trace() == 4


# --- AUC -------------------------------------------------------------------------


def test_auc_examples():
    labels = np.array([0, 1, 2, 0, 1, 2])
    perfect = np.eye(3)[labels]
    assert M.auc_macro(perfect, labels) == 1.0
    assert M.auc_macro(np.full((6, 3), 0.3), labels) == 0.5


def test_auc_matches_pairwise_oracle_on_50_instances():
    rng = np.random.default_rng(123)
    for _ in range(50):
        n = int(rng.integers(6, 200))
        labels = np.concatenate([[0, 1, 2], rng.integers(0, 3, n - 3)])
        scores = rng.dirichlet(np.ones(3), size=n)
        if rng.random() < 0.5:  # force ties
            scores = np.round(scores, 1)
        assert abs(M.auc_macro(scores, labels) - pairwise_macro(scores, labels)) <= 1e-12


def test_auc_skips_absent_class(caplog):
    labels = np.array([0, 0, 1, 1])
    scores = np.array([[0.9, 0.1, 0.0], [0.6, 0.4, 0.0], [0.2, 0.8, 0.0], [0.5, 0.5, 0.0]])
    with caplog.at_level(logging.WARNING):
        v = M.auc_macro(scores, labels)
    assert "class 2" in caplog.text
    assert v == 1.0
    with pytest.raises(M.UsageError):
        M.auc_macro(np.ones((2, 1)), np.array([0, 0]))
    with pytest.raises(DimensionError):
        M.auc_macro(np.ones((3, 3)), np.array([0, 1]))


# --- IoU / TIoU ------------------------------------------------------------------


def test_iou_examples():
    seg = np.zeros((4, 4), bool)
    seg[:2] = True  # 8 px
    att = np.zeros((4, 4))
    att[1:3, :2] = 0.9  # 4 px, 2 overlap
    assert abs(M.iou(att, seg) - 0.2) < 1e-15
    assert M.iou(seg.astype(float), seg) == 1.0
    assert M.iou((~seg).astype(float), seg) == 0.0
    with pytest.raises(DimensionError):
        M.iou(np.zeros((4, 3)), seg)


def test_iou_binarization_is_strict():
    seg = np.array([[1, 0]])
    assert M.iou(np.array([[0.5, 0.0]]), seg) == 0.0
    assert M.iou(np.array([[0.5, 0.0]]), seg, bin_threshold=0.4) == 1.0


def test_tiou_examples():
    assert M.tiou([1.0, 1.0])[0] == 1.0
    assert M.tiou([0.0])[0] == 0.0
    t, acc = M.tiou([0.35])
    assert abs(t - 3 / 7) < 1e-15
    assert [acc[x] for x in M.TIOU_THRESHOLDS] == [1, 1, 1, 0, 0, 0, 0]
    # an IoU equal to a threshold does not count there
    assert M.tiou([0.3])[1][0.3] == 0.0
    with pytest.raises(M.UsageError):
        M.tiou([])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=30), st.floats(0, 0.5), st.integers(0, 2**32 - 1))
def test_tiou_monotone_and_order_free(vals, bump, seed):
    base = M.tiou(vals)[0]
    raised = M.tiou([min(1.0, v + bump) for v in vals])[0]
    assert raised >= base
    perm = np.random.default_rng(seed).permutation(len(vals))
    assert M.tiou([vals[i] for i in perm])[0] == base


def test_report_invariant_under_reordering():
    rng = np.random.default_rng(5)
    n = 30
    labels = np.concatenate([[0, 1, 2], rng.integers(0, 3, n - 3)])
    probs = rng.dirichlet(np.ones(3), size=n)
    att = rng.random((n, 8, 8))
    segs = rng.random((n, 8, 8)) > 0.6
    a = M.build_report(probs, labels, att, segs)
    perm = rng.permutation(n)
    b = M.build_report(probs[perm], labels[perm], att[perm], segs[perm])
    assert (a.recall, a.f1, a.tiou) == (b.recall, b.f1, b.tiou)
    assert abs(a.auc - b.auc) < 1e-15
    for v in (a.recall, a.f1, a.auc, a.tiou):
        assert 0 <= v <= 1
    assert a.confusion.sum(axis=1).tolist() == np.bincount(labels, minlength=3).tolist()


def test_csv_outputs(tmp_path):
    rep = M.MetricsReport(0.5, 0.25, 0.75, 0.125, {t: 0.5 for t in M.TIOU_THRESHOLDS})
    M.write_leaderboard(tmp_path / "lb.csv", [dict(run_id="r0", labeled_fraction=0.1, method="dcmt", recall=0.5, f1=0.25, auc=0.75, tiou=0.125)])
    assert (tmp_path / "lb.csv").read_text() == "run_id,labeled_fraction,method,recall,f1,auc,tiou\nr0,0.1,dcmt,0.5,0.25,0.75,0.125\n"
    M.write_threshold_csv(tmp_path / "t.csv", [("r0", rep)])
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0].split(",")[1] == "T0.1" and lines[1].split(",")[1:] == ["0.5"] * 7

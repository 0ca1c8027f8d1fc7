import json
import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from landslide_seg.config import ConfigError, LossConfig
from landslide_seg.metrics import (
    EPS,
    METRIC_FIELDS,
    ConfusionCounts,
    MetricReport,
    accumulate_confusion,
    binary_cross_entropy,
    compute_metrics,
    cross_entropy,
    f1_score,
    summarize_reports,
    total_loss,
)

counts_st = st.builds(ConfusionCounts, *(st.integers(0, 10_000) for _ in range(4)))


# -- cross-entropy -----------------------------------------------------------


def test_bce_examples():
    p = torch.tensor([1.0, 0.5, 0.5, EPS], dtype=torch.float64)
    y = torch.tensor([1, 1, 0, 1])
    out = binary_cross_entropy(p, y)
    assert out[0].item() == 0.0
    assert out[1].item() == pytest.approx(math.log(2))
    assert out[2].item() == pytest.approx(math.log(2))
    assert out[3].item() == pytest.approx(16.118, abs=1e-3)
    assert binary_cross_entropy(torch.tensor([0.0]), torch.tensor([1])).item() == pytest.approx(-math.log(EPS))


def test_cross_entropy_on_score_maps():
    score = torch.zeros(1, 2, 3, 3, dtype=torch.float64)
    per_pixel, mean = cross_entropy(score, torch.zeros(1, 3, 3, dtype=torch.long))
    assert per_pixel.shape == (1, 3, 3)
    assert mean.item() == pytest.approx(math.log(2))
    with pytest.raises(ValueError):
        cross_entropy(score, torch.zeros(1, 4, 4, dtype=torch.long))


def test_cross_entropy_gradient_is_softmax_minus_onehot():
    torch.manual_seed(0)
    logits = torch.randn(1, 2, 4, 5, dtype=torch.float64, requires_grad=True)
    label = (torch.rand(1, 4, 5) > 0.5).long()
    per_pixel, _ = cross_entropy(logits, label)
    per_pixel.sum().backward()
    onehot = torch.stack([1 - label, label], dim=1).double()
    expected = torch.softmax(logits.detach(), dim=1) - onehot
    torch.testing.assert_close(logits.grad, expected, rtol=1e-10, atol=1e-12)

    # and against central differences
    flat = logits.detach().clone().ravel()
    h = 1e-6
    for i in (0, 7, 23, 39):
        xp, xm = flat.clone(), flat.clone()
        xp[i] += h
        xm[i] -= h
        fd = (cross_entropy(xp.view_as(logits), label)[0].sum()
              - cross_entropy(xm.view_as(logits), label)[0].sum()) / (2 * h)
        assert abs(fd.item() - logits.grad.ravel()[i].item()) <= 1e-5 * max(1e-3, abs(fd.item()))


def test_total_loss_composition():
    assert total_loss([2.0], [3.0], LossConfig(1.0, 0.1)) == pytest.approx(2.3)
    assert total_loss([2.0, 1.0], [], LossConfig(0.5, 0.1)) == pytest.approx(1.5)
    with pytest.raises(ConfigError):
        LossConfig(alpha=0.0)
    with pytest.raises(ConfigError):
        LossConfig(beta=-0.1)


# -- confusion ---------------------------------------------------------------


def test_confusion_examples():
    label = np.array([[1, 0, 0, 1], [1, 1, 0, 0], [0, 0, 0, 0], [1, 0, 1, 0]])
    assert accumulate_confusion(label, label).FP == 0 and accumulate_confusion(label, label).FN == 0
    inv = accumulate_confusion(1 - label, label)
    assert inv.TP == 0 and inv.TN == 0
    pred = np.array([[1, 1, 0, 0], [1, 0, 0, 0], [0, 1, 0, 0], [1, 0, 1, 1]])
    c = accumulate_confusion(pred, label)
    assert (c.TP, c.TN, c.FP, c.FN) == (4, 7, 3, 2)
    assert c.total == 16
    with pytest.raises(ValueError):
        accumulate_confusion(pred, label[:3])


def test_accumulation_is_micro():
    a = accumulate_confusion(np.ones((2, 2)), np.ones((2, 2)))
    b = accumulate_confusion(np.zeros((2, 2)), np.ones((2, 2)), a)
    assert (b.TP, b.FN) == (4, 4)


# -- scores ------------------------------------------------------------------


def test_hand_computed_report():
    r = compute_metrics(ConfusionCounts(TP=50, TN=900, FP=25, FN=25))
    assert r.precision == pytest.approx(2 / 3) and r.recall == pytest.approx(2 / 3)
    assert r.f1 == pytest.approx(2 / 3)
    assert r.landslide_iou == pytest.approx(0.5)
    assert r.background_iou == pytest.approx(900 / 950)
    assert abs(r.miou - 0.7237) <= 1e-4
    assert not r.undefined


def test_published_f1_is_consistent():
    assert abs(f1_score(0.462, 0.551) - 0.503) <= 1e-3


def test_perfect_prediction():
    r = compute_metrics(ConfusionCounts(TP=10, TN=30))
    assert all(v == 1.0 for v in r.as_dict().values())


def test_zero_over_zero_is_flagged():
    r = compute_metrics(ConfusionCounts(TN=16))
    assert r.precision == 0.0 and "precision" in r.undefined and "landslide_iou" in r.undefined
    assert r.background_iou == 1.0


def test_report_serialisation(tmp_path):
    r = compute_metrics(ConfusionCounts(3, 4, 5, 6))
    r.write(tmp_path / "rep")
    rec = json.loads((tmp_path / "rep.json").read_text())
    assert set(METRIC_FIELDS) <= set(rec)
    assert MetricReport.from_record(rec) == r
    text = (tmp_path / "rep.txt").read_text()
    assert "averaging=micro" in text and "miou" in text


def test_summary_mean_and_std():
    reps = [compute_metrics(ConfusionCounts(TP=1, TN=1)), compute_metrics(ConfusionCounts(FP=1, FN=1))]
    s = summarize_reports(reps)
    assert s["miou"]["mean"] == pytest.approx(0.5) and s["miou"]["std"] == pytest.approx(0.5)


@given(counts_st)
def test_f1_bounds(c):
    r = compute_metrics(c)
    assert 0.0 <= r.f1 <= (r.precision + r.recall) / 2 + 1e-12
    if r.precision == r.recall:
        assert r.f1 == pytest.approx(r.precision)


@given(counts_st)
def test_landslide_iou_below_precision_and_recall(c):
    r = compute_metrics(c)
    assert r.landslide_iou <= min(r.precision, r.recall) + 1e-12


@given(counts_st)
def test_swapping_fp_fn_swaps_precision_recall(c):
    a = compute_metrics(c)
    b = compute_metrics(ConfusionCounts(TP=c.TP, TN=c.TN, FP=c.FN, FN=c.FP))
    assert a.precision == b.recall and a.recall == b.precision
    assert a.f1 == pytest.approx(b.f1) and a.miou == b.miou


@given(counts_st, counts_st)
def test_confusion_addition_is_commutative(a, b):
    assert a + b == b + a
    assert (a + b).total == a.total + b.total

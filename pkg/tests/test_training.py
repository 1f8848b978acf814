import math
from decimal import Decimal, getcontext

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lightformer.config import ModelConfig, TrainConfig
from lightformer.errors import ContractError, NumericError
from lightformer.functional import cross_entropy
from lightformer.model import LightFormer
from lightformer.rng import make_rng
from lightformer.tensor import Tensor
from lightformer.training import (
    STATUS_NAMES,
    binary_metrics,
    evaluate,
    metrics_from_predictions,
    total_loss,
    train,
)

TINY = ModelConfig(buffer_size=2, embed_dim=8, num_heads=2, num_points=2,
                   image_height=32, image_width=64, seed=1)
LN2 = math.log(2.0)


def tiny_dataset(n=6, seed=0):
    rng = make_rng(seed, "tinyset")
    X = rng.uniform(0, 1, (n, 2, 3, 32, 64)).astype(np.float32)
    y = rng.integers(0, 2, (n, 2))
    return X, y


# -- losses -------------------------------------------------------------------------
def test_uniform_cross_entropy():
    assert float(cross_entropy(Tensor([0.0, 0.0]), 0).data) == pytest.approx(0.693147, abs=1e-6)
    assert float(cross_entropy(Tensor([0.0, 0.0]), 0).data) == pytest.approx(LN2, abs=1e-15)


def test_cross_entropy_saturates_monotonically():
    sweep = [float(cross_entropy(Tensor([z, 0.0]), 0).data) for z in np.linspace(-20, 60, 81)]
    assert all(a >= b for a, b in zip(sweep, sweep[1:]))
    # strictly decreasing until the loss drops below double-precision resolution
    assert all(a > b for a, b in zip(sweep, sweep[1:]) if a > 1e-12)
    assert sweep[-1] == 0.0


def lse_oracle(logits, target):
    getcontext().prec = 50
    z = [Decimal(float(v)) for v in logits]
    return float(sum(v.exp() for v in z).ln() - z[target])


@pytest.mark.parametrize("seed", range(20))
def test_cross_entropy_matches_extended_precision(seed):
    rng = make_rng(seed, "ce")
    logits = rng.standard_normal(5) * 30
    target = int(rng.integers(5))
    assert float(cross_entropy(Tensor(logits), target).data) == pytest.approx(
        lse_oracle(logits, target), abs=1e-10)


def test_batched_cross_entropy_is_mean():
    rng = make_rng(0, "ceb")
    logits, target = rng.standard_normal((4, 3)), np.array([0, 2, 1, 1])
    want = np.mean([lse_oracle(logits[i], target[i]) for i in range(4)])
    assert float(cross_entropy(Tensor(logits), target).data) == pytest.approx(want, abs=1e-12)


def test_cross_entropy_rejects_bad_target():
    with pytest.raises(ContractError):
        cross_entropy(Tensor([0.0, 1.0]), 2)


def test_total_loss_cases():
    uniform = Tensor([0.0, 0.0])
    assert float(total_loss(uniform, uniform, (1, 0)).data) == pytest.approx(2 * LN2, abs=1e-15)
    perfect = Tensor([800.0, 0.0])
    assert float(total_loss(perfect, uniform, (0, 1)).data) == pytest.approx(LN2, abs=1e-15)
    rng = make_rng(0, "tl")
    s, l = rng.standard_normal((3, 2)), rng.standard_normal((3, 2))
    lab = np.array([[0, 1], [1, 1], [0, 0]])
    want = cross_entropy(Tensor(s), lab[:, 0]).data + cross_entropy(Tensor(l), lab[:, 1]).data
    assert float(total_loss(Tensor(s), Tensor(l), lab).data) == float(want)


def test_heads_are_independent():
    model = LightFormer(TINY)
    X, y = tiny_dataset(2)
    out = model.forward(X, targets=y)
    cross_entropy(out.left_logits, y[:, 1]).backward()
    assert model.params["straight.centres"].grad is None or not np.any(model.params["straight.centres"].grad)
    assert np.any(model.params["left.centres"].grad)
    model.zero_grad()
    out = model.forward(X, targets=y)
    cross_entropy(out.straight_logits, y[:, 0]).backward()
    assert model.params["left.centres"].grad is None or not np.any(model.params["left.centres"].grad)


# -- training loop ------------------------------------------------------------------
def test_zero_learning_rate_freezes_everything():
    model = LightFormer(TINY)
    before = {k: v.data.copy() for k, v in model.params.items()}
    X, y = tiny_dataset()
    result = train(model, X, y, TrainConfig(epochs=3, learning_rate=0.0, batch_size=2))
    for k, v in model.params.items():
        np.testing.assert_array_equal(v.data, before[k])
    losses = [r.loss for r in result.history]
    assert losses[0] == pytest.approx(losses[1], rel=1e-6) and losses[1] == pytest.approx(losses[2], rel=1e-6)


def test_training_is_bit_deterministic(tmp_path):
    X, y = tiny_dataset()
    cfg = TrainConfig(epochs=2, learning_rate=1e-3, batch_size=4, seed=5)
    a = train(LightFormer(TINY), X, y, cfg, checkpoint_path=tmp_path / "a.lfck")
    b = train(LightFormer(TINY), X, y, cfg, checkpoint_path=tmp_path / "b.lfck")
    assert [r.to_line() for r in a.history] == [r.to_line() for r in b.history]
    assert [r.loss for r in a.history] == [r.loss for r in b.history]
    assert (tmp_path / "a.lfck").read_bytes() == (tmp_path / "b.lfck").read_bytes()


def test_training_reduces_loss_and_reports_epochs():
    X, y = tiny_dataset(4)
    seen = []
    result = train(LightFormer(TINY), X, y, TrainConfig(epochs=6, learning_rate=3e-3, batch_size=4),
                   on_epoch=seen.append)
    assert [r.epoch for r in seen] == list(range(1, 7))
    assert result.history[-1].loss < result.history[0].loss
    assert all(0.0 <= r.train_acc <= 1.0 for r in result.history)
    assert result.history[0].to_line().count("\t") == 2


def test_non_finite_loss_aborts():
    model = LightFormer(TINY)
    model.params["query"].data[:] = np.nan
    X, y = tiny_dataset(2)
    with pytest.raises(NumericError, match="epoch 1, batch 0"):
        train(model, X, y, TrainConfig(epochs=1))


def test_empty_dataset():
    with pytest.raises(ContractError):
        train(LightFormer(TINY), np.zeros((0, 2, 3, 32, 64), np.float32), np.zeros((0, 2), int))
    with pytest.raises(ContractError):
        evaluate(LightFormer(TINY), np.zeros((0, 2, 3, 32, 64), np.float32), np.zeros((0, 2), int))


# -- metrics ----------------------------------------------------------------------
def confusion_oracle(pred, true, positive):
    tp = fp = fn = tn = 0
    for p, t in zip(pred, true):
        if p == positive and t == positive:
            tp += 1
        elif p == positive:
            fp += 1
        elif t == positive:
            fn += 1
        else:
            tn += 1
    prec = tp / (tp + fp) if tp + fp else 0.0
    rec = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
    return (tp, fp, fn, tn), (tp + tn) / len(pred), prec, rec, f1


def test_closed_form_metrics():
    m = binary_metrics([0, 0, 1], [0, 1, 1], positive=0)
    assert (m.counts.tp, m.counts.fp, m.counts.fn) == (1, 1, 0)
    assert m.precision == 0.5 and m.recall == 1.0
    assert m.f1 == pytest.approx(2 / 3, abs=1e-15)


def test_perfect_predictions():
    y = np.array([[0, 1], [1, 0], [1, 1], [0, 0]])
    report = metrics_from_predictions(y, y)
    assert list(report.statuses) == list(STATUS_NAMES)
    for m in report.statuses.values():
        assert (m.accuracy, m.precision, m.recall, m.f1) == (1.0, 1.0, 1.0, 1.0)


def test_zero_denominators_are_flagged():
    m = binary_metrics([1, 1], [1, 1], positive=0)
    assert (m.precision, m.recall, m.f1) == (0.0, 0.0, 0.0)
    assert set(m.undefined) == {"precision", "recall", "f1"}
    report = metrics_from_predictions(np.ones((2, 2), int), np.ones((2, 2), int))
    assert "zero denominator" in report.to_text()
    assert "straight_pass.undefined=precision,recall,f1" in report.to_key_values()


@pytest.mark.parametrize("seed", range(10))
def test_metrics_match_confusion_oracle(seed):
    rng = make_rng(seed, "metrics")
    pred, true = rng.integers(0, 2, (200, 2)), rng.integers(0, 2, (200, 2))
    report = metrics_from_predictions(pred, true)
    for col, direction in enumerate(("straight", "left")):
        for cls, status in enumerate(("pass", "stop")):
            m = report[f"{direction}_{status}"]
            counts, acc, prec, rec, f1 = confusion_oracle(pred[:, col], true[:, col], cls)
            assert (m.counts.tp, m.counts.fp, m.counts.fn, m.counts.tn) == counts
            assert (m.accuracy, m.precision, m.recall, m.f1) == (acc, prec, rec, f1)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 1), st.integers(0, 1)), min_size=1, max_size=40))
def test_f1_identities(pairs):
    pred, true = zip(*pairs)
    m = binary_metrics(pred, true, positive=0)
    assert m.counts.total == len(pairs)
    if not m.undefined:
        assert m.f1 == pytest.approx(2 * m.precision * m.recall / (m.precision + m.recall), abs=1e-12)
        assert m.f1 <= (m.precision + m.recall) / 2 + 1e-12
        if m.precision == m.recall:
            assert m.f1 == pytest.approx(m.precision, abs=1e-12)
    for v in (m.accuracy, m.precision, m.recall, m.f1):
        assert 0.0 <= v <= 1.0


def test_evaluate_ignores_order():
    model = LightFormer(TINY)
    X, y = tiny_dataset(5)
    perm = np.array([3, 0, 4, 1, 2])
    a = evaluate(model, X, y, batch_size=2)
    b = evaluate(model, X[perm], y[perm], batch_size=3)
    assert a.to_key_values() == b.to_key_values()
    assert a.to_text().splitlines()[0].split() == ["status", "accuracy", "precision", "recall", "f1"]

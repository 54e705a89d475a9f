import csv
import math

import numpy as np
import pytest

from dunet import tensor as T
from dunet.geometry import anchor_array
from dunet.loss import build_targets, mine_hard_negatives, multibox_loss
from dunet.model import build_dunet, desk_config
from dunet.shapes import generate_shapes
from dunet.train import SGD, SampleSet, TrainConfig, TrainingDiverged, samples_from_arrays, sgd_step, train


def _loss(logits, boxes, labels, targets, **kw):
    return multibox_loss(T.Tensor(logits), T.Tensor(boxes), labels, targets, **kw)


def test_perfect_prediction_has_near_zero_loss():
    labels = np.array([[2, 0, 0, 1, 0, 0, 0, 0]])
    logits = np.zeros((1, 8, 3))
    logits[0, np.arange(8), labels[0]] = 40.0
    targets = np.random.default_rng(0).normal(size=(1, 8, 4))
    parts = _loss(logits, targets.copy(), labels, targets)
    assert 0.0 <= float(parts.total.data) < 1e-8


def test_uniform_logits_give_ln3_per_selected_anchor():
    labels = np.array([[1, 0, 0, 0, 0]])
    logits = np.zeros((1, 5, 3))
    targets = np.zeros((1, 5, 4))
    parts = _loss(logits, targets, labels, targets)
    # one positive plus three mined negatives, each contributing ln 3, over N = 1
    assert parts.num_pos == 1 and parts.num_neg == 3
    assert float(parts.total.data) == pytest.approx(4 * math.log(3), abs=1e-12)


def test_localization_term_uses_smooth_l1():
    labels = np.array([[1, 0]])
    logits = np.zeros((1, 2, 2))
    logits[0, 0, 1] = logits[0, 1, 0] = 40.0
    targets = np.zeros((1, 2, 4))
    preds = np.full((1, 2, 4), 0.5)
    parts = _loss(logits, preds, labels, targets)
    assert parts.loc == pytest.approx(4 * 0.125)


def test_no_positive_uses_single_hardest_negative():
    labels = np.zeros((2, 4), dtype=np.int64)
    logits = np.zeros((2, 4, 3))
    logits[1, 2, 0] = -3.0
    parts = _loss(logits, np.zeros((2, 4, 4)), labels, np.zeros((2, 4, 4)))
    assert parts.num_pos == 0 and parts.num_neg == 1
    expected = -T.log_softmax(np.array([-3.0, 0.0, 0.0]))[0]
    assert float(parts.total.data) == pytest.approx(expected)


def test_mining_selects_min_of_ratio_and_available():
    rng = np.random.default_rng(0)
    for _ in range(50):
        labels = (rng.random((3, 30)) < 0.1).astype(np.int64)
        bg = rng.random((3, 30))
        sel = mine_hard_negatives(bg, labels, 3)
        assert not (sel & (labels > 0)).any()
        for i in range(3):
            n_pos = int(labels[i].sum())
            if labels.any():
                assert sel[i].sum() == min(3 * n_pos, int((labels[i] == 0).sum()))
                chosen = bg[i][sel[i]]
                rest = bg[i][(labels[i] == 0) & ~sel[i]]
                if len(chosen) and len(rest):
                    assert chosen.min() >= rest.max()


def test_loss_shape_mismatch():
    with pytest.raises(T.DimensionError):
        _loss(np.zeros((1, 4, 3)), np.zeros((1, 4, 4)), np.zeros((1, 5), dtype=int), np.zeros((1, 4, 4)))


def test_build_targets_background_is_zero():
    anchors = anchor_array(desk_config())
    labels, targets = build_targets(anchors, np.array([[0.1, 0.1, 0.4, 0.5]]), np.array([2]))
    assert set(np.unique(labels)) == {0, 2}
    assert not targets[labels == 0].any()
    empty, _ = build_targets(anchors, np.zeros((0, 4)), np.zeros(0))
    assert not empty.any()


# -- optimizer


def test_sgd_examples():
    w = [np.array([1.0, -2.0])]
    p, _ = sgd_step(w, [np.zeros(2)], 0.1, 0.0, 0.9)
    assert np.array_equal(p[0], w[0])
    p, _ = sgd_step([np.array(3.0)], [np.array(1.0)], 0.1, 0.0, 0.0)
    assert p[0] == pytest.approx(2.9)


def test_sgd_two_step_recurrence():
    mu, lr, wd = 0.9, 0.1, 0.01
    w0, g1, g2 = 1.0, 0.5, -0.25
    v1 = g1 + wd * w0
    w1 = w0 - lr * v1
    v2 = mu * v1 + g2 + wd * w1
    w2 = w1 - lr * v2
    p, v = sgd_step([np.array(w0)], [np.array(g1)], lr, wd, mu)
    p, v = sgd_step(p, [np.array(g2)], lr, wd, mu, v)
    assert p[0] == pytest.approx(w2, abs=1e-15)
    t = T.Tensor(np.array(w0), requires_grad=True)
    opt = SGD([t], mu, wd)
    t.grad = np.array(g1)
    opt.step(lr)
    t.grad = np.array(g2)
    opt.step(lr)
    assert t.data == pytest.approx(w2, abs=1e-15)


def test_train_config_validation_and_schedule():
    cfg = TrainConfig(lr_schedule=[(0, 0.1), (100, 0.01)])
    assert cfg.rate_at(99) == 0.1 and cfg.rate_at(100) == 0.01
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0).validate()
    with pytest.raises(ValueError):
        TrainConfig(lr_schedule=[(0, -1.0)]).validate()


# -- training loop


@pytest.fixture(scope="module")
def tiny_samples():
    return samples_from_arrays(generate_shapes(4, 64, seed=3), 64)


def test_overfit_four_images(tiny_samples):
    model = build_dunet(desk_config(), seed=0)
    cfg = TrainConfig(batch_size=4, max_steps=500, lr_schedule=[(0, 0.05)], hflip=False, weight_decay=0.0)
    res = train(model, tiny_samples, cfg, log_every=0)
    first = res.losses[0][1]
    best = min(l[1] for l in res.losses)
    assert best < 0.1 * first


def test_training_is_deterministic_and_writes_artifacts(tmp_path, tiny_samples):
    cfg = TrainConfig(batch_size=2, max_steps=6, checkpoint_every=3)
    a = train(build_dunet(desk_config(), seed=1), tiny_samples, cfg, out_dir=tmp_path / "a", log_every=0)
    b = train(build_dunet(desk_config(), seed=1), tiny_samples, cfg, out_dir=tmp_path / "b", log_every=0)
    assert a.losses == b.losses
    assert (tmp_path / "a" / "loss.csv").read_bytes() == (tmp_path / "b" / "loss.csv").read_bytes()
    assert (tmp_path / "a" / "checkpoint.bin").read_bytes() == (tmp_path / "b" / "checkpoint.bin").read_bytes()
    rows = list(csv.reader(open(tmp_path / "a" / "loss.csv")))
    assert rows[0] == ["step", "total_loss", "conf_loss", "loc_loss"] and len(rows) == 7


def test_nan_loss_aborts_with_step(tiny_samples):
    model = build_dunet(desk_config(), seed=0)
    model.heads[0].cls.bias.data[:] = np.nan
    with pytest.raises(TrainingDiverged) as err:
        train(model, tiny_samples, TrainConfig(batch_size=2, max_steps=3), log_every=0)
    assert err.value.step == 0 and "step 0" in str(err.value)


def test_empty_dataset_writes_nothing(tmp_path):
    empty = SampleSet(np.zeros((0, 3, 64, 64)), [], [])
    with pytest.raises(ValueError, match="empty"):
        train(build_dunet(desk_config()), empty, TrainConfig(), out_dir=tmp_path / "out")
    assert not (tmp_path / "out" / "checkpoint.bin").exists()

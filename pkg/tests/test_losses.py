import itertools
import math

import numpy as np
import pytest

from tsenet import engine as E
from tsenet.discretize import class_probs
from tsenet.engine import Tensor
from tsenet.losses import (
    PROB_CLAMP,
    LossReport,
    build_pl_list,
    class_probs_tensor,
    l1_loss,
    ordinal_loss,
    pl_loss,
    predicted_class_confidence,
    ranking_order,
)


def bce_oracle(p, y):
    p = np.clip(p, PROB_CLAMP, 1 - PROB_CLAMP)
    return float(np.mean(-(y * np.log(p) + (1 - y) * np.log(1 - p))))


def pl_oracle(q, order):
    q = [q[i] for i in order]
    return -sum(math.log(q[j] / sum(q[j:])) for j in range(len(q) - 1))


def test_ordinal_loss_matches_oracle():
    rng = np.random.default_rng(0)
    p = rng.uniform(0.01, 0.99, (2, 3, 3, 5))
    y = (rng.uniform(size=p.shape) > 0.5).astype(float)
    assert ordinal_loss(Tensor(p), y).item() == pytest.approx(bce_oracle(p, y), rel=1e-12)


def test_ordinal_loss_clamps_saturated_probs():
    loss = ordinal_loss(Tensor([0.0, 1.0]), np.array([1.0, 0.0])).item()
    assert np.isfinite(loss)
    assert loss == pytest.approx(-math.log(PROB_CLAMP), rel=1e-6)


def test_ordinal_loss_shape_mismatch():
    with pytest.raises(ValueError, match="labels"):
        ordinal_loss(Tensor(np.full((2, 3), 0.5)), np.zeros((2, 4)))


def test_l1_masked():
    pred = Tensor([1.0, 2.0, 10.0], requires_grad=True)
    loss = l1_loss(pred, [0.0, 0.0, 0.0], mask=[1, 1, 0])
    assert loss.item() == pytest.approx(1.5)
    E.backward(loss)
    np.testing.assert_allclose(pred.grad, [0.5, 0.5, 0.0])


def test_l1_empty_mask_is_zero():
    assert l1_loss(Tensor([1.0, 2.0]), [0.0, 0.0], mask=[0, 0]).item() == 0.0


def test_class_probs_tensor_matches_numpy():
    p = np.random.default_rng(1).uniform(0.05, 0.95, (4, 7))
    np.testing.assert_allclose(class_probs_tensor(Tensor(p)).data, class_probs(p), rtol=1e-10)


def test_confidence_picks_argmax():
    q = Tensor([[0.2, 0.5, 0.3], [0.6, 0.1, 0.3]])
    np.testing.assert_array_equal(predicted_class_confidence(q).data, [0.5, 0.6])


def test_pl_two_items_exact():
    qa, qb = 0.7, 0.2
    assert pl_loss(np.array([qa, qb]), [0, 1]).item() == -math.log(qa / (qa + qb))


def test_pl_matches_oracle_and_best_permutation():
    q = np.array([0.9, 0.5, 0.1])
    losses = {perm: pl_loss(q, perm).item() for perm in itertools.permutations(range(3))}
    for perm, v in losses.items():
        assert v == pytest.approx(pl_oracle(q, perm), rel=1e-12)
    assert min(losses, key=losses.get) == (0, 1, 2)


def test_pl_short_list_is_zero():
    assert pl_loss(np.array([0.3]), [0]).item() == 0.0


def test_pl_permutation_consistency():
    rng = np.random.default_rng(2)
    q = rng.uniform(0.1, 1.0, 6)
    order = rng.permutation(6)
    perm = rng.permutation(6)
    # relabelling items does not change the likelihood of the same ranking
    inv = np.argsort(perm)
    assert pl_loss(q[perm], inv[order]).item() == pytest.approx(pl_loss(q, order).item(), rel=1e-12)


def test_pl_rejects_nonpositive_weights():
    with pytest.raises(ValueError, match="positive"):
        pl_loss(np.array([0.5, 0.0]), [0, 1])


def test_pl_gradient(gradcheck):
    q = np.random.default_rng(3).uniform(0.1, 1.0, 5)
    gradcheck(lambda t: pl_loss(t, [3, 0, 4, 1, 2]), [q])


def test_ranking_order_ties_keep_position():
    np.testing.assert_array_equal(ranking_order([0.0, 1.0, 0.0]), [0, 2, 1])


def test_build_pl_list_errors_sorted():
    rng = np.random.default_rng(4)
    conf = rng.uniform(size=(8, 8))
    pred, gt = rng.normal(size=(8, 8)), rng.normal(size=(8, 8))
    plist = build_pl_list(conf, pred, gt, 20, rng)
    assert len(set(plist.indices)) == 20
    assert np.all(np.diff(plist.errors[plist.order]) >= 0)
    np.testing.assert_allclose(plist.errors, np.abs(gt.ravel() - pred.ravel())[plist.indices])


def test_loss_report_totals():
    rep = LossReport(l_cls=1.0, l_reg_T=2.0, l_pl=3.0, l_sup_S=4.0, l_unlabeled=5.0)
    assert rep.l_sup_T == 6.0 and rep.total == 15.0
    assert rep.as_row()["total"] == 15.0

"""Training objectives built from engine ops so gradients reach the networks."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import engine as E
from .engine import Tensor

PROB_CLAMP = 1e-7


def clamp_probs(p: Tensor) -> Tensor:
    return E.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)


def ordinal_loss(p: Tensor, y) -> Tensor:
    """Binary cross-entropy averaged over cuts and pixels.

    ``p`` and ``y`` share a shape whose last axis indexes the ``N - 1`` cuts.
    """
    y = np.asarray(y, dtype=np.float64)
    if p.shape != y.shape:
        raise ValueError(f"ordinal_loss: probabilities {p.shape} vs labels {y.shape}")
    pc = clamp_probs(p)
    nll = -(y * E.log(pc) + (1.0 - y) * E.log(1.0 - pc))
    return E.mean(nll)


def l1_loss(pred: Tensor, target, mask=None) -> Tensor:
    """Mean absolute error, optionally restricted to ``mask == 1`` pixels.

    An all-zero mask yields a constant zero loss.
    """
    target = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"l1_loss: prediction {pred.shape} vs target {target.shape}")
    if mask is None:
        return E.mean(E.abs(pred - target))
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != pred.shape:
        raise ValueError(f"l1_loss: mask {mask.shape} vs prediction {pred.shape}")
    count = mask.sum()
    if count == 0:
        return Tensor(0.0)
    target = np.where(mask > 0, target, pred.data)
    return E.sum(E.abs(pred - target) * mask) * (1.0 / count)


def class_probs_tensor(p: Tensor) -> Tensor:
    """Differentiable per-class probabilities from per-cut probabilities (last axis)."""
    k = p.shape[-1]
    pc = clamp_probs(p)
    log_p = E.log(pc)
    log_not = E.log(1.0 - pc)
    # prefix[i] = sum_{c < i} log p_c
    strict_upper = np.triu(np.ones((k, k)), 1)
    prefix = log_p @ strict_upper
    head = E.exp(log_not + prefix)
    tail = E.exp(E.sum(log_p, axis=-1, keepdims=True))
    return E.concat([head, tail], axis=-1)


def predicted_class_confidence(q: Tensor) -> Tensor:
    """Probability of the argmax class, keeping the gradient path into ``q``."""
    onehot = np.zeros(q.shape)
    np.put_along_axis(onehot, np.argmax(q.data, axis=-1)[..., None], 1.0, axis=-1)
    return E.sum(q * onehot, axis=-1)


@dataclass
class PLList:
    """Sampled pixels for the listwise ranking loss.

    ``order`` lists positions into ``indices`` sorted by ascending error.
    """

    indices: np.ndarray
    q: np.ndarray
    errors: np.ndarray
    order: np.ndarray

    def __post_init__(self):
        m = len(self.indices)
        if not (len(self.q) == len(self.errors) == len(self.order) == m):
            raise ValueError("PLList fields must all have length M")


def ranking_order(errors: np.ndarray) -> np.ndarray:
    """Ascending error; ties broken by position."""
    return np.argsort(np.asarray(errors), kind="stable")


def build_pl_list(confidence, pred_heights, gt_heights, m: int, rng: np.random.Generator) -> PLList:
    """Sample ``m`` pixels uniformly without replacement and rank them by error."""
    conf = np.asarray(confidence.data if isinstance(confidence, Tensor) else confidence).ravel()
    pred = np.asarray(pred_heights.data if isinstance(pred_heights, Tensor) else pred_heights).ravel()
    gt = np.asarray(gt_heights).ravel()
    if conf.size == 0:
        raise ValueError("build_pl_list: empty map")
    if not (conf.size == pred.size == gt.size):
        raise ValueError(f"build_pl_list: map sizes {conf.size}, {pred.size}, {gt.size} differ")
    m = min(m, conf.size)
    idx = np.sort(rng.choice(conf.size, size=m, replace=False))
    err = np.abs(gt[idx] - pred[idx])
    # errors can tie exactly (e.g. both zero); order by pixel index then
    return PLList(indices=idx, q=conf[idx], errors=err, order=ranking_order(err))


def pl_loss(q, order) -> Tensor:
    """Negative log-likelihood of ``order`` under a Plackett-Luce model with weights ``q``.

    ``q`` is a length-M tensor (or array) of positive weights.  Lists shorter
    than two items carry no ranking information and give zero.
    """
    q = E.as_tensor(q)
    m = q.size
    if m < 2:
        return Tensor(0.0)
    if np.any(q.data <= 0):
        raise ValueError("pl_loss: weights must be positive")
    ranked = E.take(q, np.asarray(order))
    # suffix[j] = sum_{k >= j} ranked[k]
    suffix = E.reshape(ranked, (1, m)) @ np.tril(np.ones((m, m)))
    head = np.arange(m - 1)
    log_ratio = E.log(E.take(ranked, head)) - E.log(E.take(suffix, head))
    return -E.sum(log_ratio)


def pl_loss_from_list(conf: Tensor, plist: PLList) -> Tensor:
    return pl_loss(E.take(conf, plist.indices), plist.order)


@dataclass
class LossReport:
    l_cls: float = 0.0
    l_reg_T: float = 0.0
    l_pl: float = 0.0
    l_sup_S: float = 0.0
    l_unlabeled: float = 0.0
    clamp_hits: int = 0
    extras: dict = field(default_factory=dict)

    @property
    def l_sup_T(self) -> float:
        return self.l_cls + self.l_reg_T + self.l_pl

    @property
    def total(self) -> float:
        return self.l_sup_T + self.l_sup_S + self.l_unlabeled

    def as_row(self) -> dict:
        row = asdict(self)
        row.pop("extras")
        row["l_sup_T"] = self.l_sup_T
        row["total"] = self.total
        return row

"""Teacher/student/exam self-training: variant wiring, the training step and the epoch loop.

The teacher (a multi-task regressor/ordinal classifier) and the student are
trained jointly on labeled batches.  On unlabeled batches the teacher labels a
weak view, the labels follow the strong view's geometry, the confidence
ranking masks out the least trustworthy pixels and the student regresses the
survivors.  The exam network is an EMA of the student and is what gets
evaluated for the TSE variant.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import engine as E
from .augment import AugmentedView, StrongRanges, augment_strong, augment_weak
from .config import RunConfig
from .discretize import BinScheme, class_of, class_probs, encode_multihot
from .filtering import (
    ThresholdState,
    default_decay,
    fixed_threshold,
    make_mask,
    mask_diagnostics,
    rank_batch,
    threshold_step,
)
from .losses import (
    LossReport,
    build_pl_list,
    class_probs_tensor,
    l1_loss,
    ordinal_loss,
    pl_loss_from_list,
    predicted_class_confidence,
)
from .metrics import MetricReport, evaluate
from .networks import (
    EmaSchedule,
    MultiTaskNet,
    RegressorNet,
    ema_update,
    frozen_copy,
    save_checkpoint,
)
from .optim import AdamState, adam_step
from .scenes import Scene

logger = logging.getLogger(__name__)

LOG_COLUMNS = [
    "epoch", "l_cls", "l_reg_T", "l_pl", "l_sup_S", "l_unlabeled", "total",
    "threshold_r", "kept_fraction", "val_rmse_total", "val_rmse_building", "is_best",
    "conf_kept", "conf_dropped",
]


class NumericError(RuntimeError):
    """A loss became NaN or infinite."""


# ----------------------------------------------------------------------------
# variant wiring

PIPELINES = {
    "reg.-reg.": ("reg", "reg", "teacher"),
    "regcls.-regcls.": ("regcls", "regcls", "teacher"),
    "regcls.-cls.": ("regcls", "cls", "teacher"),
    "regcls.-reg.": ("regcls", "reg", "teacher"),
    "regcls.-reg. (TSE)": ("regcls", "reg", "exam"),
    "supervised": (None, "reg", "student"),
}
ALIASES = {"tse": "regcls.-reg. (TSE)", "regcls.-reg.(tse)": "regcls.-reg. (TSE)"}


@dataclass(frozen=True)
class Wiring:
    pipeline: str
    teacher: str | None
    student: str
    inference: str
    strategy: str
    pl: bool
    ranking: bool
    dynamic_threshold: bool

    @property
    def uses_unlabeled(self) -> bool:
        return self.teacher is not None


def canonical_pipeline(name: str) -> str:
    key = name.strip()
    if key in PIPELINES:
        return key
    lowered = key.lower().replace(" ", "")
    for alias, target in ALIASES.items():
        if lowered == alias.replace(" ", ""):
            return target
    for known in PIPELINES:
        if lowered == known.lower().replace(" ", ""):
            return known
    raise ValueError(f"unknown pipeline variant {name!r}; expected one of {sorted(PIPELINES)} or 'tse'")


def select_pipeline_variant(cfg: RunConfig) -> Wiring:
    """Resolve pipeline name and toggles into a concrete wiring.

    Raises:
        ValueError: for unknown names or toggles that need a classification
            branch the teacher does not have.
    """
    name = canonical_pipeline(cfg.variant.pipeline)
    teacher, student, inference = PIPELINES[name]
    v = cfg.variant
    if teacher != "regcls":
        if v.ranking:
            raise ValueError(
                f"{name}: ranking-based filtering needs a regcls. teacher; set variant.ranking=false"
            )
        if v.pl:
            raise ValueError(f"{name}: the PL loss needs a regcls. teacher; set variant.pl=false")
    if cfg.bins.strategy not in ("UD", "SID", "HBC"):
        raise ValueError(f"unknown bin strategy {cfg.bins.strategy!r}")
    return Wiring(name, teacher, student, inference, cfg.bins.strategy, v.pl, v.ranking,
                  v.dynamic_threshold)


def apply_ablation(cfg: RunConfig, row: str) -> RunConfig:
    """Return a copy of ``cfg`` set up for one named ablation row."""
    import copy

    out = copy.deepcopy(cfg)
    v = out.variant
    v.pipeline, v.pl, v.ranking, v.dynamic_threshold = "regcls.-reg. (TSE)", True, True, True
    out.bins.strategy = "HBC"
    if row == "full":
        pass
    elif row in ("UD", "SID", "HBC"):
        out.bins.strategy = row
    elif row == "w/o PL":
        v.pl = False
    elif row == "w/o ranking":
        v.ranking = False
    elif row == "w/o dynamic thres.":
        v.dynamic_threshold = False
    elif row == "supervised":
        v.pipeline, v.pl, v.ranking = "supervised", False, False
    else:
        v.pipeline = canonical_pipeline(row)
        if PIPELINES[v.pipeline][0] != "regcls":
            v.pl = v.ranking = False
    return out


ABLATION_ROWS = [
    "reg.-reg.", "regcls.-regcls.", "regcls.-cls.", "regcls.-reg.", "regcls.-reg. (TSE)",
    "UD", "SID", "w/o PL", "w/o ranking", "w/o dynamic thres.", "full",
]


# ----------------------------------------------------------------------------
# state


@dataclass
class BestRecord:
    epoch: int = -1
    metric: float = math.inf
    checkpoint: str | None = None


@dataclass
class TrioState:
    wiring: Wiring
    scheme: BinScheme
    student: RegressorNet
    exam: RegressorNet
    teacher: RegressorNet | None
    student_opt: AdamState
    teacher_opt: AdamState | None
    threshold: ThresholdState
    ema: EmaSchedule
    epoch: int = 0
    best: BestRecord = field(default_factory=BestRecord)

    def inference_net(self) -> RegressorNet:
        return {"teacher": self.teacher, "exam": self.exam, "student": self.student}[self.wiring.inference]

    def networks(self) -> dict[str, RegressorNet]:
        nets = {"student": self.student, "exam": self.exam}
        if self.teacher is not None:
            nets["teacher"] = self.teacher
        return nets


def build_network(kind: str, rng: np.random.Generator, cfg: RunConfig, num_cuts: int) -> RegressorNet:
    widths = tuple(cfg.model.widths)
    if kind == "reg":
        return RegressorNet(rng, widths=widths, height_scale=cfg.model.height_scale)
    return MultiTaskNet(rng, num_cuts, widths=widths, height_scale=cfg.model.height_scale)


def init_state(cfg: RunConfig, scheme: BinScheme, seed: int) -> TrioState:
    wiring = select_pipeline_variant(cfg)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    student = build_network(wiring.student, rng, cfg, scheme.num_cuts)
    teacher = None
    if wiring.teacher is not None:
        teacher = build_network(wiring.teacher, rng, cfg, scheme.num_cuts)
    exam = frozen_copy(student)
    opt_kw = dict(learning_rate=cfg.optimizer.lr, beta1=cfg.optimizer.beta1,
                  beta2=cfg.optimizer.beta2, epsilon=cfg.optimizer.epsilon)
    if wiring.dynamic_threshold:
        decay = cfg.schedule.threshold_decay or default_decay(cfg.schedule.epochs)
        threshold = ThresholdState(r=1.0, decay=decay)
    else:
        threshold = fixed_threshold()
    return TrioState(
        wiring=wiring,
        scheme=scheme,
        student=student,
        exam=exam,
        teacher=teacher,
        student_opt=AdamState.for_params(student.parameters(), **opt_kw),
        teacher_opt=None if teacher is None else AdamState.for_params(teacher.parameters(), **opt_kw),
        threshold=threshold,
        ema=EmaSchedule(cfg.model.ema_alpha),
    )


# ----------------------------------------------------------------------------
# one step


def _nhwc_to_nchw(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(a.transpose(0, 3, 1, 2))


def pseudo_label_views(state: TrioState, unlabeled: np.ndarray, rng: np.random.Generator,
                       ranges: StrongRanges) -> list[AugmentedView]:
    """Weak view -> teacher pseudo-labels -> strong view carrying the labels along."""
    weak = [augment_weak(img, rng) for img in unlabeled]
    with E.no_grad():
        batch = np.stack([v.image for v in weak])
        if isinstance(state.teacher, MultiTaskNet):
            h, p = state.teacher(batch)
            probs = _nhwc_to_nchw(p.data)
        else:
            h, probs = state.teacher(batch), None
    views = []
    for i, v in enumerate(weak):
        v.heights = h.data[i]
        v.probs = None if probs is None else probs[i]
        views.append(augment_strong(v, rng, ranges=ranges))
    return views


def _student_supervised(state: TrioState, images: np.ndarray, heights: np.ndarray,
                        labels: np.ndarray) -> E.Tensor:
    """Student loss on labeled data: L1 for reg., ordinal (+ L1) for cls./regcls."""
    kind = state.wiring.student
    if kind == "reg":
        return l1_loss(state.student(images), heights)
    h_s, p_s = state.student(images)
    cls = ordinal_loss(p_s, labels)
    if kind == "cls":
        return cls
    return l1_loss(h_s, heights) + cls


def _student_unlabeled(state: TrioState, views: list[AugmentedView], mask: np.ndarray) -> E.Tensor:
    images = np.stack([v.image for v in views])
    targets = np.stack([v.heights for v in views])
    kind = state.wiring.student
    if kind == "reg":
        return l1_loss(state.student(images), targets, mask)
    h_s, p_s = state.student(images)
    if kind == "regcls":
        return l1_loss(h_s, targets, mask)
    # cls. student: ordinal loss against pseudo-height classes on kept pixels
    labels = encode_multihot(class_of(targets, state.scheme), state.scheme.num_classes)
    keep = mask > 0
    if not keep.any():
        return E.Tensor(0.0)
    per_pixel = E.mean(
        -(labels * E.log(E.clip(p_s, 1e-7, 1 - 1e-7))
          + (1.0 - labels) * E.log(1.0 - E.clip(p_s, 1e-7, 1 - 1e-7))),
        axis=-1,
    )
    return E.sum(per_pixel * mask.astype(float)) * (1.0 / keep.sum())


def train_step(state: TrioState, images: np.ndarray, heights: np.ndarray,
               unlabeled: np.ndarray | None, cfg: RunConfig,
               rng: np.random.Generator) -> LossReport:
    """One optimization step on a labeled batch and an optional unlabeled batch.

    ``images`` is ``(B, 3, H, W)``, ``heights`` ``(B, H, W)``.  Returns the
    weighted loss terms; the teacher and student are updated with Adam and
    the exam tracks the student by EMA.
    """
    if len(images) == 0:
        raise ValueError("train_step: empty labeled batch")
    w, lw = state.wiring, cfg.loss
    scheme = state.scheme
    report = LossReport()
    labels = encode_multihot(class_of(heights, scheme), scheme.num_classes)
    terms: list[E.Tensor] = []

    if state.teacher is not None:
        if isinstance(state.teacher, MultiTaskNet):
            h_t, p_t = state.teacher(images)
            l_cls = ordinal_loss(p_t, labels) * lw.cls
            report.l_cls = l_cls.item()
            report.clamp_hits = int(np.sum((p_t.data < 1e-7) | (p_t.data > 1 - 1e-7)))
            terms.append(l_cls)
            if w.pl:
                conf = predicted_class_confidence(class_probs_tensor(p_t))
                plist = build_pl_list(conf, h_t, heights, cfg.schedule.pl_list_size, rng)
                l_pl = pl_loss_from_list(conf, plist) * lw.pl
                report.l_pl = l_pl.item()
                terms.append(l_pl)
        else:
            h_t = state.teacher(images)
        l_reg_t = l1_loss(h_t, heights) * lw.reg_teacher
        report.l_reg_T = l_reg_t.item()
        terms.append(l_reg_t)

    l_sup_s = _student_supervised(state, images, heights, labels)
    l_sup_s = l_sup_s * lw.sup_student
    report.l_sup_S = l_sup_s.item()
    terms.append(l_sup_s)

    diag = {"kept_fraction": 0.0, "conf_kept": float("nan"), "conf_dropped": float("nan")}
    if w.uses_unlabeled and unlabeled is not None and len(unlabeled) and lw.unlabeled != 0:
        ranges = StrongRanges(tuple(cfg.augment.gamma), cfg.augment.brightness,
                              tuple(cfg.augment.contrast), tuple(cfg.augment.blur_sigma))
        r = state.threshold.r
        if w.ranking and r >= 1.0:
            # nothing can pass an r = 1 cut; keep the RNG stream aligned anyway
            for img in unlabeled:
                augment_weak(img, rng)
                augment_strong(AugmentedView(img), rng, ranges=ranges)
        else:
            views = pseudo_label_views(state, unlabeled, rng, ranges)
            if w.ranking:
                q = class_probs(np.clip(np.stack([v.probs for v in views]), 1e-7, 1 - 1e-7).transpose(0, 2, 3, 1))
                conf = q.max(axis=-1)
                mask = make_mask(rank_batch(conf), r)
                diag = mask_diagnostics(conf, mask)
            else:
                mask = np.ones((len(views),) + views[0].heights.shape)
                diag = {"kept_fraction": 1.0, "conf_kept": float("nan"), "conf_dropped": float("nan")}
            mask = mask * np.stack([v.valid for v in views])
            if mask.any():
                l_unl = _student_unlabeled(state, views, mask) * lw.unlabeled
                report.l_unlabeled = l_unl.item()
                terms.append(l_unl)
    report.extras.update(diag)

    if not math.isfinite(report.total):
        raise NumericError(f"non-finite loss {report.total} at epoch {state.epoch}")
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    E.backward(total)
    if state.teacher is not None:
        adam_step(state.teacher.parameters(), state.teacher_opt)
    adam_step(state.student.parameters(), state.student_opt)
    ema_update(state.exam, state.student, state.ema)
    return report


# ----------------------------------------------------------------------------
# data streams and evaluation


class BatchStream:
    """Endless reshuffled passes over ``n`` items."""

    def __init__(self, n: int, batch: int, rng: np.random.Generator):
        self.n, self.batch, self.rng = n, batch, rng
        self._order = np.empty(0, dtype=int)
        self._pos = 0

    def next(self) -> np.ndarray:
        out = []
        while len(out) < min(self.batch, self.n):
            if self._pos >= len(self._order):
                self._order = self.rng.permutation(self.n)
                self._pos = 0
            out.append(self._order[self._pos])
            self._pos += 1
        return np.asarray(out)


def predict(net: RegressorNet, images: np.ndarray, batch: int = 8) -> np.ndarray:
    """Height maps ``(N, H, W)`` from the regression head, without recording a tape."""
    out = []
    with E.no_grad():
        for i in range(0, len(images), batch):
            res = net(images[i:i + batch])
            if isinstance(res, tuple):
                res = res[0]
            out.append(res.data)
    return np.concatenate(out) if out else np.empty((0,) + images.shape[2:])


def _stack(scenes: list[Scene]) -> tuple[np.ndarray, np.ndarray]:
    if not scenes:
        return np.empty((0, 3, 0, 0)), np.empty((0, 0, 0))
    return np.stack([s.image for s in scenes]), np.stack([s.heights for s in scenes])


def evaluate_net(net: RegressorNet, scenes: list[Scene], cfg: RunConfig) -> MetricReport:
    images, _ = _stack(scenes)
    preds = predict(net, images, cfg.schedule.val_batch)
    return evaluate(list(preds), scenes, cfg.eval.bucket_width)


@dataclass
class TrainResult:
    state: TrioState
    log: list[dict]
    best_checkpoint: Path | None
    best_weights: dict[str, np.ndarray] = field(default_factory=dict)

    def restore_best(self, net: RegressorNet) -> None:
        """Load the best-validation weights of the inference network into ``net``."""
        for name, t in net.params.items():
            t.data[...] = self.best_weights[name]


def _mean_reports(reports: list[LossReport]) -> dict:
    keys = ["l_cls", "l_reg_T", "l_pl", "l_sup_S", "l_unlabeled"]
    row = {k: float(np.mean([getattr(r, k) for r in reports])) for k in keys}
    row["total"] = float(np.sum([row[k] for k in keys]))
    for k in ("kept_fraction", "conf_kept", "conf_dropped"):
        vals = [r.extras[k] for r in reports if not math.isnan(r.extras[k])]
        row[k] = float(np.mean(vals)) if vals else float("nan")
    return row


def train_loop(state: TrioState, labeled: list[Scene], unlabeled: list[Scene],
               validation: list[Scene], cfg: RunConfig, seed: int,
               checkpoint_dir: Path | None = None,
               on_epoch: Callable[[dict], None] | None = None) -> TrainResult:
    """Run ``cfg.schedule.epochs`` epochs of ``steps_per_epoch`` steps each.

    The threshold decays once per epoch.  After each epoch the inference
    network is scored on ``validation``; the best epoch by total RMSE is
    checkpointed as ``best.tsew``.
    """
    if not validation:
        raise ValueError("train_loop: empty validation set")
    if not labeled:
        raise ValueError("train_loop: no labeled scenes")
    sched = cfg.schedule
    rng = np.random.default_rng(np.random.SeedSequence([seed, 2]))
    lab_x, lab_h = _stack(labeled)
    unl_x, _ = _stack(unlabeled)
    lab_stream = BatchStream(len(labeled), sched.batch_labeled, rng)
    unl_stream = BatchStream(len(unlabeled), sched.batch_unlabeled, rng) if unlabeled else None
    best_path = None
    if checkpoint_dir is not None:
        checkpoint_dir.mkdir(parents=True, exist_ok=True)
        best_path = checkpoint_dir / "best.tsew"
    log: list[dict] = []
    best_weights: dict[str, np.ndarray] = {}
    for epoch in range(sched.epochs):
        state.epoch = epoch
        reports = []
        # divergence surfaces below as a non-finite total, not as numpy warnings
        with np.errstate(over="ignore", invalid="ignore"):
            for _ in range(sched.steps_per_epoch):
                li = lab_stream.next()
                u = unl_x[unl_stream.next()] if unl_stream is not None else None
                reports.append(train_step(state, lab_x[li], lab_h[li], u, cfg, rng))
        row = {"epoch": epoch, **_mean_reports(reports), "threshold_r": state.threshold.r}
        if not math.isfinite(row["total"]):
            raise NumericError(f"non-finite loss at epoch {epoch}")
        metrics = evaluate_net(state.inference_net(), validation, cfg)
        val = metrics.rmse_total
        row["val_rmse_total"] = val
        row["val_rmse_building"] = metrics.rmse_building_balanced
        row["is_best"] = int(val is not None and val < state.best.metric)
        if row["is_best"]:
            state.best = BestRecord(epoch, val, str(best_path) if best_path else None)
            best_weights = {k: t.data.copy() for k, t in state.inference_net().params.items()}
            if best_path is not None:
                save_checkpoint(best_path, state.networks())
        log.append({k: row.get(k) for k in LOG_COLUMNS})
        if on_epoch is not None:
            on_epoch(log[-1])
        logger.info("epoch %d total %.4f r %.3f val %.4f", epoch, row["total"], row["threshold_r"], val)
        state.threshold = threshold_step(state.threshold)
    return TrainResult(state, log, best_path, best_weights)

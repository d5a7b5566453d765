import json

import numpy as np
import pytest

from tsenet.augment import AugmentedView, StrongParams, augment_strong
from tsenet.config import RunConfig
from tsenet.discretize import ud_edges
from tsenet.filtering import ThresholdState, default_decay
from tsenet.networks import MultiTaskNet, RegressorNet
from tsenet.pipeline import (
    ABLATION_ROWS,
    BatchStream,
    apply_ablation,
    init_state,
    select_pipeline_variant,
    train_loop,
    train_step,
)
from tsenet.scenes import SceneConfig, generate_scene

SCHEME = ud_edges(0.0, 40.0, 4)


def tiny_cfg(**over):
    cfg = RunConfig()
    cfg.model.widths = [4, 4, 4]
    cfg.optimizer.lr = 1e-3
    cfg.schedule.pl_list_size = 32
    for key, value in over.items():
        section, name = key.split("__")
        setattr(getattr(cfg, section), name, value)
    return cfg


def toy_batch(seed, n=2, size=16):
    cfg = SceneConfig(size=size, buildings=(1, 1), trees=(0, 1), building_side=(4, 6), tree_radius=(1, 2))
    scenes = [generate_scene(np.random.default_rng([seed, i]), cfg) for i in range(n)]
    return np.stack([s.image for s in scenes]), np.stack([s.heights for s in scenes])


def params_of(net):
    return {k: t.data.copy() for k, t in net.params.items()}


def test_full_configuration_wiring():
    w = select_pipeline_variant(apply_ablation(RunConfig(), "full"))
    assert (w.teacher, w.student, w.inference) == ("regcls", "reg", "exam")
    assert w.pl and w.ranking and w.dynamic_threshold and w.strategy == "HBC"


def test_reg_reg_has_no_cls_pl_or_filter():
    cfg = apply_ablation(RunConfig(), "reg.-reg.")
    w = select_pipeline_variant(cfg)
    assert w.teacher == "reg" and not w.pl and not w.ranking and w.inference == "teacher"


def test_contradictory_toggles_rejected():
    cfg = RunConfig()
    cfg.variant.pipeline = "reg.-reg."
    with pytest.raises(ValueError, match="ranking"):
        select_pipeline_variant(cfg)
    cfg.variant.pipeline = "not a pipeline"
    with pytest.raises(ValueError, match="unknown pipeline"):
        select_pipeline_variant(cfg)


@pytest.mark.parametrize("row", ABLATION_ROWS + ["supervised"])
def test_every_ablation_row_resolves(row):
    select_pipeline_variant(apply_ablation(RunConfig(), row))


def test_without_dynamic_threshold_is_fixed_half():
    st = init_state(apply_ablation(tiny_cfg(), "w/o dynamic thres."), SCHEME, 0)
    assert st.threshold.r == 0.5 and st.threshold.decay == 1.0


def test_exam_starts_as_student_copy_and_has_no_grad():
    st = init_state(tiny_cfg(), SCHEME, 0)
    for k, t in st.exam.params.items():
        np.testing.assert_array_equal(t.data, st.student.params[k].data)
    x, h = toy_batch(0)
    u, _ = toy_batch(1)
    st.threshold = ThresholdState(r=0.5, decay=0.9)
    train_step(st, x, h, u, tiny_cfg(), np.random.default_rng(0))
    assert all(t.grad is None for t in st.exam.parameters())


def test_r_one_gives_zero_unlabeled_loss():
    st = init_state(tiny_cfg(), SCHEME, 0)
    x, h = toy_batch(0)
    u, _ = toy_batch(1)
    rep = train_step(st, x, h, u, tiny_cfg(), np.random.default_rng(0))
    assert st.threshold.r == 1.0
    assert rep.l_unlabeled == 0.0 and rep.extras["kept_fraction"] == 0.0
    assert rep.l_pl > 0 and rep.l_cls > 0


def test_alpha_zero_makes_exam_equal_student():
    cfg = tiny_cfg(model__ema_alpha=0.0)
    st = init_state(cfg, SCHEME, 0)
    x, h = toy_batch(0)
    train_step(st, x, h, None, cfg, np.random.default_rng(0))
    for k, t in st.exam.params.items():
        np.testing.assert_array_equal(t.data, st.student.params[k].data)


def test_kept_fraction_follows_threshold():
    st = init_state(tiny_cfg(), SCHEME, 0)
    st.threshold = ThresholdState(r=0.5, decay=0.9)
    x, h = toy_batch(0)
    u, _ = toy_batch(1)
    rep = train_step(st, x, h, u, tiny_cfg(), np.random.default_rng(0))
    assert abs(rep.extras["kept_fraction"] - 0.5) <= 1 / (2 * 8 * 8)
    assert rep.l_unlabeled > 0
    assert rep.extras["conf_kept"] >= rep.extras["conf_dropped"]


def test_without_ranking_keeps_everything():
    cfg = apply_ablation(tiny_cfg(), "w/o ranking")
    st = init_state(cfg, SCHEME, 0)
    x, h = toy_batch(0)
    u, _ = toy_batch(1)
    rep = train_step(st, x, h, u, cfg, np.random.default_rng(0))
    assert rep.extras["kept_fraction"] == 1.0


def _step_total(seed, lr):
    cfg = tiny_cfg(optimizer__lr=lr)
    st = init_state(cfg, SCHEME, seed)
    x, h = toy_batch(seed)
    u, _ = toy_batch(seed + 100)
    train_step(st, x, h, u, cfg, np.random.default_rng(seed))
    # score both runs on the same fresh draw so only the update differs
    return train_step(st, x, h, u, cfg, np.random.default_rng(10_000 + seed)).total


def test_one_step_beats_zero_lr_control():
    wins = sum(_step_total(s, 1e-2) < _step_total(s, 0.0) for s in range(10))
    assert wins >= 9


def test_teacher_update_independent_of_unlabeled_term():
    x, h = toy_batch(3)
    u, _ = toy_batch(4)
    deltas = []
    for weight in (1.0, 0.0):
        cfg = tiny_cfg(loss__unlabeled=weight)
        st = init_state(cfg, SCHEME, 0)
        st.threshold = ThresholdState(r=0.5, decay=0.9)
        before = params_of(st.teacher)
        rep = train_step(st, x, h, u, cfg, np.random.default_rng(0))
        deltas.append({k: st.teacher.params[k].data - v for k, v in before.items()})
        if weight:
            assert rep.l_unlabeled > 0
    for k in deltas[0]:
        assert deltas[0][k].tobytes() == deltas[1][k].tobytes()


def test_crop_only_view_targets_are_cropped_pseudo_heights():
    img = np.random.default_rng(0).uniform(size=(3, 16, 16))
    pseudo = np.random.default_rng(1).uniform(0, 30, (16, 16))
    v = augment_strong(AugmentedView(img, heights=pseudo), params=StrongParams(crop_y=5, crop_x=3, gamma=1.4))
    np.testing.assert_array_equal(v.heights, pseudo[5:13, 3:11])


def test_batch_stream_cycles_every_item():
    s = BatchStream(5, 2, np.random.default_rng(0))
    seen = np.concatenate([s.next() for _ in range(5)])
    assert sorted(seen) == [0, 0, 1, 1, 2, 2, 3, 3, 4, 4]


def small_scenes(seed, n):
    cfg = SceneConfig(size=16, buildings=(1, 1), trees=(0, 1), building_side=(4, 6), tree_radius=(1, 2))
    return [generate_scene(np.random.default_rng([seed, i]), cfg) for i in range(n)]


def test_train_loop_log_and_determinism(tmp_path):
    cfg = tiny_cfg(schedule__epochs=4, schedule__steps_per_epoch=2)
    lab, unl, val = small_scenes(0, 2), small_scenes(1, 4), small_scenes(2, 2)
    logs, ckpts = [], []
    for run in range(2):
        st = init_state(cfg, SCHEME, 5)
        res = train_loop(st, lab, unl, val, cfg, 5, checkpoint_dir=tmp_path / str(run))
        logs.append(res.log)
        ckpts.append((tmp_path / str(run) / "best.tsew").read_bytes())
    assert json.dumps(logs[0]) == json.dumps(logs[1])
    assert ckpts[0] == ckpts[1]
    rs = [row["threshold_r"] for row in logs[0]]
    lam = default_decay(4)
    assert rs == [max(lam**t, 0.5) for t in range(4)]
    assert rs[2] == 0.5  # floor reached by epoch ceil(T / 2)
    best = [row["val_rmse_total"] for row in logs[0] if row["is_best"]]
    assert best == sorted(best, reverse=True)


def test_train_loop_without_unlabeled_is_supervised():
    cfg = tiny_cfg(schedule__epochs=2, schedule__steps_per_epoch=2)
    st = init_state(cfg, SCHEME, 0)
    res = train_loop(st, small_scenes(0, 2), [], small_scenes(2, 2), cfg, 0)
    assert all(row["l_unlabeled"] == 0 for row in res.log)


def test_train_loop_rejects_empty_validation():
    cfg = tiny_cfg()
    with pytest.raises(ValueError, match="validation"):
        train_loop(init_state(cfg, SCHEME, 0), small_scenes(0, 2), [], [], cfg, 0)


def test_exam_smoother_than_student():
    # the temporal ensemble should fluctuate less across late epochs than the raw student
    from tsenet.pipeline import evaluate_net

    lab, unl, val = small_scenes(0, 4), small_scenes(1, 8), small_scenes(2, 4)
    cfg = tiny_cfg(model__ema_alpha=0.9, optimizer__lr=1e-2)
    ratios = []
    for seed in range(3):
        st = init_state(cfg, SCHEME, seed)
        rng = np.random.default_rng(seed)
        lab_x = np.stack([s.image for s in lab])
        lab_h = np.stack([s.heights for s in lab])
        unl_x = np.stack([s.image for s in unl])
        stu, exam = [], []
        st.threshold = ThresholdState(r=0.5, decay=0.9)
        for step in range(40):
            i = rng.choice(4, 2, replace=False)
            train_step(st, lab_x[i], lab_h[i], unl_x[rng.choice(8, 2, replace=False)], cfg, rng)
            if step >= 30:
                stu.append(evaluate_net(st.student, val, cfg).rmse_total)
                exam.append(evaluate_net(st.exam, val, cfg).rmse_total)
        # step-to-step jitter, so a shared downward trend does not count
        ratios.append(np.var(np.diff(exam)) < np.var(np.diff(stu)))
    assert sum(ratios) >= 2

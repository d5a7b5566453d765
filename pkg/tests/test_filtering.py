import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tsenet.filtering import (
    ThresholdState,
    default_decay,
    fixed_threshold,
    make_mask,
    mask_diagnostics,
    rank_batch,
    threshold_step,
)


def quadratic_ranks(conf):
    flat = conf.ravel()
    n = flat.size
    out = [sum(flat[j] < flat[i] or (flat[j] == flat[i] and j < i) for j in range(n)) / n for i in range(n)]
    return np.array(out).reshape(conf.shape)


def test_rank_matches_quadratic_oracle():
    conf = np.random.default_rng(0).integers(0, 5, size=(2, 3, 4)).astype(float)
    np.testing.assert_array_equal(rank_batch(conf), quadratic_ranks(conf))


def test_ranks_are_batch_wide():
    conf = np.array([[[0.1, 0.2]], [[0.9, 0.8]]])
    np.testing.assert_allclose(rank_batch(conf).ravel(), [0, 0.25, 0.75, 0.5])


def test_mask_r1_keeps_nothing_and_floor_keeps_half():
    ranks = rank_batch(np.arange(10.0))
    assert make_mask(ranks, 1.0).sum() == 0
    assert make_mask(ranks, 0.5).sum() == 4  # ranks 0.6..0.9


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 300), st.floats(0.0, 1.0), st.integers(0, 2**31))
def test_kept_fraction_quantum(n, r, seed):
    conf = np.random.default_rng(seed).uniform(size=n)
    kept = make_mask(rank_batch(conf), r).mean()
    assert abs(kept - (1 - r)) <= 1 / n + 1e-12


@settings(max_examples=100, deadline=None)
@given(st.floats(0.0, 1.0), st.floats(0.0, 1.0))
def test_mask_monotone_in_r(a, b):
    ranks = rank_batch(np.random.default_rng(1).uniform(size=50))
    lo, hi = min(a, b), max(a, b)
    assert np.all(make_mask(ranks, hi) <= make_mask(ranks, lo))


def test_threshold_sequence_closed_form():
    lam = 0.9
    state = ThresholdState(decay=lam)
    for t in range(1, 201):
        state = threshold_step(state)
        assert state.r == max(lam**t, 0.5)
        assert state.t == t


def test_fixed_threshold_stays():
    s = fixed_threshold()
    for _ in range(5):
        s = threshold_step(s)
    assert s.r == 0.5


def test_threshold_validation():
    with pytest.raises(ValueError):
        ThresholdState(decay=0.0)
    with pytest.raises(ValueError):
        ThresholdState(r=0.2)


@pytest.mark.parametrize("epochs", [1, 2, 7, 60, 200])
def test_default_decay_reaches_floor_at_half(epochs):
    lam = default_decay(epochs)
    half = math.ceil(epochs / 2)
    assert lam**half <= 0.5
    if half > 1:
        assert lam ** (half - 1) > 0.5


def test_mask_diagnostics():
    conf = np.array([0.1, 0.9, 0.8, 0.2])
    d = mask_diagnostics(conf, np.array([0, 1, 1, 0]))
    assert d["kept_fraction"] == 0.5
    assert d["conf_kept"] == pytest.approx(0.85)
    assert d["conf_dropped"] == pytest.approx(0.15)

import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from occamlme.conjugate import Scorer, WorkingData
from occamlme.model import GlobalParams, ModelError, ModelIndicator
from occamlme.window import (OccamWindow, allocate_updates, full_window, initialize,
                             propose_flip, smallest_level)

from conftest import make_dataset


def _scorer(seed=0, p=6, n_range=(10, 40)):
    d = make_dataset(seed, M=1, p=p, n_range=n_range, h=0.4)[0]
    g = GlobalParams(zeta_star=np.zeros(d.q), psi=1.0, g2=2.0, a=2.0, b=0.5, a1=1.0, b1=2.0)
    return Scorer(WorkingData.from_individual(d), g)


def _all_scores(scorer):
    models = np.array(list(itertools.product([False, True], repeat=scorer.p)))
    return models, scorer.log_marginal(models) + scorer.log_prior(models)


def test_smallest_level():
    assert smallest_level(10, 10) == 1
    assert smallest_level(10, 11) == 2
    assert smallest_level(6, 8) == 2
    assert smallest_level(3, 8) == 3


def test_initialize_picks_best_small_models():
    sc = _scorer(1)
    win = initialize(sc, 8)
    models, scores = _all_scores(sc)
    small = models.sum(1) <= smallest_level(6, 8)
    best = set(map(tuple, models[small][np.argsort(-scores[small])[:8]]))
    assert {m.gamma for m in win.models} == best
    assert win.K == 8 and len({m.key for m in win.models}) == 8


def test_initialize_rejects_oversized_window():
    with pytest.raises(ModelError):
        initialize(_scorer(0, p=3), 9)


def test_full_window_is_saturated():
    sc = _scorer(2, p=3)
    win = full_window(sc)
    rng = np.random.default_rng(0)
    for _ in range(50):
        assert propose_flip(win, sc, rng) is False
    assert win.stale_count == 50


def test_k1_replaced_by_better_proposal():
    sc = _scorer(3, p=1)
    models, scores = _all_scores(sc)
    worst = int(np.argmin(scores))
    m = ModelIndicator(tuple(models[worst]))
    row = models[worst:worst + 1]
    win = OccamWindow([m], sc.log_marginal(row), sc.log_prior(row))
    assert propose_flip(win, sc, np.random.default_rng(0)) is True
    assert win.models[0].gamma == tuple(models[1 - worst])


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_min_score_never_decreases_and_models_distinct(seed):
    sc = _scorer(seed % 7)
    win = initialize(sc, 6)
    rng = np.random.default_rng(seed)
    last = win.min_log_marginal
    for _ in range(60):
        propose_flip(win, sc, rng)
        assert win.min_log_marginal >= last
        last = win.min_log_marginal
        assert len({m.key for m in win.models}) == win.K
        assert win.weights.sum() == pytest.approx(1.0)


def test_allocate_sums_and_zero():
    rng = np.random.default_rng(0)
    assert np.all(allocate_updates([0, 3, 1], 0, rng) == 0)
    for L in (1, 7, 1000):
        assert allocate_updates([0, 5, 2, 9], L, rng).sum() == L
    with pytest.raises(ModelError):
        allocate_updates([0], -1, rng)


def test_allocate_exchangeable_shares():
    M, L, reps = 5, 20, 100_000
    rng = np.random.default_rng(1)
    draws = np.array([allocate_updates(np.full(M, 3), L, rng) for _ in range(reps)])
    share = draws / L
    se = share.std(axis=0) / np.sqrt(reps)
    assert np.all(np.abs(share.mean(axis=0) - 1 / M) < 3 * se)


def test_allocate_favours_fresh_individual():
    rng = np.random.default_rng(2)
    t = np.array([0] + [10 ** 6] * 4)
    shares = [allocate_updates(t, 100, rng)[0] / 100 for _ in range(10_000)]
    assert np.mean(shares) >= 0.99

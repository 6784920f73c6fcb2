import math

import numpy as np
import pandas as pd
import pytest
from scipy import stats

from occamlme.model import ModelError
from occamlme.normal_em import FitConfig
from occamlme.simulate import (SimConfig, desk_grid, full_grid, generate, rmse_gamma,
                               rmse_scalar, run_study, skewt_errors)


def test_h_zero_gives_no_effects():
    data, truth = generate(SimConfig(M=20, p=5, h=0.0, n_small=3, n_large=4), 0)
    assert not truth.gamma.any() and np.all(truth.beta == 0)
    assert len(data) == 20 and data[0].p == 5 and data[0].q == 6


def test_large_individual_share_is_binomial():
    cfg = SimConfig(M=2000, p=1, q_prop=0.3, n_small=1, n_large=2, q=1)
    data, _ = generate(cfg, 0)
    k = sum(d.n == 2 for d in data)
    assert stats.binomtest(k, 2000, 0.3).pvalue > 0.01


def test_effect_share_is_h():
    _, truth = generate(SimConfig(M=400, p=10, h=0.25, n_small=2, n_large=2), 1)
    assert truth.gamma.mean() == pytest.approx(0.25, abs=0.03)


def test_generate_is_reproducible():
    cfg = SimConfig(M=5, p=3, n_small=4, n_large=6, seed=9)
    (a, ta), (b, tb) = generate(cfg, 2), generate(cfg, 2)
    assert all(np.array_equal(x.y, y.y) for x, y in zip(a, b))
    c, _ = generate(cfg, 3)
    assert not np.array_equal(a[0].y, c[0].y)


def test_normal_limit_errors_are_normal():
    e = skewt_errors(100_000, 1.0, 0.0, math.inf, np.random.default_rng(0))
    z = (e - e.mean()) / e.std()
    assert abs(stats.skew(z)) < 0.05 and abs(stats.kurtosis(z)) < 0.1
    assert e.var() == pytest.approx(1.0, rel=0.02)


def test_skew_normal_limit_matches_closed_form():
    c = 4.0
    e = skewt_errors(200_000, 1.0, c, math.inf, np.random.default_rng(1))
    delta = c / math.sqrt(1 + c * c)
    m = delta * math.sqrt(2 / math.pi)
    skew = (4 - math.pi) / 2 * m ** 3 / (1 - m * m) ** 1.5
    assert e.mean() == pytest.approx(m, rel=0.01)
    assert e.var() == pytest.approx(1 - m * m, rel=0.02)
    assert stats.skew(e) == pytest.approx(skew, abs=0.03)


def test_symmetric_t_limit_variance():
    f = 7.0
    e = skewt_errors(400_000, 2.0, 0.0, f, np.random.default_rng(2))
    assert e.var() == pytest.approx(2.0 * f / (f - 2), rel=0.03)
    assert stats.kstest(e / math.sqrt(2.0), stats.t(f).cdf).pvalue > 0.01


def test_rmse_gamma_examples():
    t = [np.array([[1, 0], [0, 0]])]
    assert rmse_gamma(t, [np.array([[1.0, 0.0], [0.0, 0.0]])]) == 0.0
    assert rmse_gamma(t, [np.full((2, 2), 0.5)]) == pytest.approx(0.5)
    assert rmse_gamma(t, [np.zeros((2, 2))]) == pytest.approx(0.5)
    assert rmse_gamma(t, [np.zeros((2, 2))], metric_literal=True) == pytest.approx(0.25)


def test_rmse_gamma_pools_replicates_and_is_order_invariant():
    rng = np.random.default_rng(3)
    t = [rng.random((4, 3)) < 0.3 for _ in range(3)]
    e = [rng.random((4, 3)) for _ in range(3)]
    pooled = math.sqrt(np.mean(np.concatenate([((a - b) ** 2).ravel() for a, b in zip(t, e)])))
    assert rmse_gamma(t, e) == pytest.approx(pooled)
    assert rmse_gamma(t[::-1], e[::-1]) == pytest.approx(pooled)


def test_rmse_gamma_errors():
    with pytest.raises(ModelError):
        rmse_gamma([], [])
    with pytest.raises(ModelError):
        rmse_gamma([np.zeros((2, 2))], [np.zeros((2, 3))])


def test_rmse_scalar():
    assert rmse_scalar(4.0, [3.0, 5.0]) == pytest.approx(1.0)
    est = np.random.default_rng(4).normal(4.0, 0.5, size=200)
    assert 0.3 <= rmse_scalar(4.0, est) <= 0.7
    with pytest.raises(ModelError):
        rmse_scalar(1.0, [])


def test_config_validation():
    with pytest.raises(ModelError):
        SimConfig(h=1.5)
    with pytest.raises(ModelError):
        SimConfig(method="mcmc")
    with pytest.raises(ModelError):
        run_study([])


def test_grids():
    assert len(desk_grid()) == 4 and len(full_grid()) == 64
    assert {c.K for c in desk_grid()} == {30, 100}


def test_study_smoke_reproducible_and_worker_invariant(tmp_path):
    grid = desk_grid(M=6, p=3, replicates=2, method="normal-em", K_values=(2, 4))
    grid = [SimConfig(**{**c.__dict__, "n_small": 8, "n_large": 15}) for c in grid]
    fc = FitConfig(max_iter=5, L=20)
    a = run_study(grid, fc, out_dir=tmp_path / "a")
    run_study(grid, fc, out_dir=tmp_path / "b")
    run_study(grid, fc, workers=2, out_dir=tmp_path / "c")
    assert len(a) == 4 and (a["n_ok"] == 2).all()
    text = (tmp_path / "a" / "results.tsv").read_bytes()
    assert text == (tmp_path / "b" / "results.tsv").read_bytes()
    assert text == (tmp_path / "c" / "results.tsv").read_bytes()
    table = pd.read_csv(tmp_path / "a" / "results.tsv", sep="\t")
    assert {"rmse_gamma", "rmse_gamma_prior_mean", "mean_c"} <= set(table.columns)
    assert "mean_wall_time" not in table.columns
    assert (tmp_path / "a" / "timings.tsv").exists()

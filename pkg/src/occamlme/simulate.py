"""Synthetic data generation, simulation studies and error metrics."""
from __future__ import annotations

import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from itertools import product
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import pandas as pd

from . import __version__, parallel
from .model import IndividualData, ModelError
from .normal_em import FitConfig, em_fit

log = logging.getLogger(__name__)

METHODS = ("normal-em", "skewt-vb")


@dataclass(frozen=True)
class SimConfig:
    """One cell of the factorial design.

    ``q_prop`` is the probability that an individual gets ``n_large``
    observations rather than ``n_small``. ``f = inf`` gives normal scale
    mixing (``rho = 1``).
    """

    M: int = 50
    p: int = 10
    h: float = 0.1
    q_prop: float = 0.15
    c: float = 0.0
    f: float = 5.0
    K: int = 30
    replicates: int = 5
    seed: int = 0
    method: str = "skewt-vb"
    q: int = 6
    n_small: int = 50
    n_large: int = 200
    sigma2_shape: float = 10.0
    sigma2_scale: float = 0.1

    def __post_init__(self):
        if self.M < 1 or self.p < 1 or self.q < 1:
            raise ModelError("M, p and q must be positive")
        if not 0 <= self.h <= 1 or not 0 <= self.q_prop <= 1:
            raise ModelError("h and q_prop must lie in [0, 1]")
        if not self.f > 0:
            raise ModelError("f must be positive")
        if self.K < 1 or self.replicates < 1:
            raise ModelError("K and replicates must be at least 1")
        if self.method not in METHODS:
            raise ModelError(f"unknown method {self.method!r}")

    def cell(self) -> dict[str, Any]:
        return {k: getattr(self, k) for k in ("M", "p", "h", "q_prop", "c", "f", "K", "method")}


@dataclass
class Truth:
    gamma: np.ndarray  # (M, p) bool
    beta: np.ndarray  # (M, p)
    sigma2: np.ndarray  # (M,)
    zeta: np.ndarray  # (q,)
    c: float
    f: float


def skewt_errors(n: int, sigma2: float, c: float, f: float,
                 rng: np.random.Generator) -> np.ndarray:
    """Errors from the latent construction: ``c/sqrt(1+c^2) d + e*``."""
    rho = np.ones(n) if math.isinf(f) else rng.gamma(0.5 * f, 2.0 / f, size=n)
    sd = np.sqrt(sigma2 / rho)
    d = np.abs(rng.standard_normal(n)) * sd
    e = rng.standard_normal(n) * sd / math.sqrt(1.0 + c * c)
    return c / math.sqrt(1.0 + c * c) * d + e


def generate(config: SimConfig, replicate: int) -> tuple[list[IndividualData], Truth]:
    """One synthetic dataset and its ground truth.

    Fixed effects: ``zeta_0 = 0`` and the rest standard normal. Designs are
    standard normal; the individual intercept is zero and each candidate
    effect is nonzero (standard normal) with probability ``h``.
    """
    cfg = config
    rng = parallel.stream(cfg.seed, parallel.SIMULATE, replicate)
    zeta = np.concatenate([[0.0], rng.standard_normal(cfg.q - 1)])
    large = rng.random(cfg.M) < cfg.q_prop
    sigma2 = cfg.sigma2_scale / rng.gamma(cfg.sigma2_shape, 1.0, size=cfg.M)
    gamma = rng.random((cfg.M, cfg.p)) < cfg.h
    beta = np.where(gamma, rng.standard_normal((cfg.M, cfg.p)), 0.0)
    gamma = beta != 0.0
    data = []
    for i in range(cfg.M):
        n = cfg.n_large if large[i] else cfg.n_small
        X = np.column_stack([np.ones(n), rng.standard_normal((n, cfg.q - 1))])
        S = rng.standard_normal((n, cfg.p))
        e = skewt_errors(n, float(sigma2[i]), cfg.c, cfg.f, rng)
        data.append(IndividualData(i, X @ zeta + S @ beta[i] + e, X, S))
    return data, Truth(gamma, beta, sigma2, zeta, cfg.c, cfg.f)


# ---------------------------------------------------------------------------
# metrics


def rmse_gamma(truth: Sequence[np.ndarray], estimates: Sequence[np.ndarray],
               metric_literal: bool = False) -> float:
    """Root mean square of ``gamma_true - E[gamma | y]`` over replicates,
    individuals and variables.

    ``metric_literal`` returns the mean square without the root.
    """
    if len(truth) != len(estimates) or len(truth) == 0:
        raise ModelError("truth and estimates need the same non-zero number of replicates")
    sq = []
    for t, e in zip(truth, estimates):
        t = np.asarray(t, dtype=float)
        e = np.asarray(e, dtype=float)
        if t.shape != e.shape:
            raise ModelError(f"shape mismatch {t.shape} vs {e.shape}")
        sq.append(((t - e) ** 2).ravel())
    mse = float(np.mean(np.concatenate(sq)))
    return mse if metric_literal else math.sqrt(mse)


def rmse_scalar(true_value: float, estimates) -> float:
    est = np.asarray(estimates, dtype=float)
    if est.size == 0:
        raise ModelError("no estimates")
    return float(np.sqrt(np.mean((est - true_value) ** 2)))


# ---------------------------------------------------------------------------
# studies


@dataclass
class ReplicateResult:
    replicate: int
    inclusion: np.ndarray | None
    truth_gamma: np.ndarray
    c_hat: float = math.nan
    f_hat: float = math.nan
    iterations: int = 0
    converged: bool = False
    wall_time: float = 0.0
    error: str | None = None


def fit_dataset(data, method: str, fit_config: FitConfig):
    if method == "normal-em":
        return em_fit(data, fit_config)
    from .skewt import vb_fit
    return vb_fit(data, fit_config)


def run_replicate(config: SimConfig, replicate: int,
                  fit_config: FitConfig | None = None) -> ReplicateResult:
    data, truth = generate(config, replicate)
    fc = replace(fit_config or FitConfig(), K=config.K,
                 seed=config.seed * 1_000_003 + replicate)
    t0 = time.perf_counter()
    try:
        state = fit_dataset(data, config.method, fc)
    except (ArithmeticError, ValueError) as exc:
        log.warning("replicate %d failed: %s", replicate, exc)
        return ReplicateResult(replicate, None, truth.gamma, error=str(exc),
                               wall_time=time.perf_counter() - t0)
    g = state.globals
    return ReplicateResult(
        replicate, state.inclusion_probabilities(), truth.gamma,
        c_hat=g.c if config.method == "skewt-vb" else math.nan,
        f_hat=g.f if config.method == "skewt-vb" else math.nan,
        iterations=state.iteration, converged=state.converged,
        wall_time=time.perf_counter() - t0)


def _job(args):
    config, replicate, fit_config = args
    return run_replicate(config, replicate, fit_config)


@dataclass
class CellResult:
    config: SimConfig
    replicates: list[ReplicateResult] = field(default_factory=list)

    @property
    def ok(self) -> list[ReplicateResult]:
        return [r for r in self.replicates if r.error is None]

    def row(self, metric_literal: bool = False) -> dict[str, Any]:
        ok = self.ok
        row = self.config.cell()
        row.update({"replicates": self.config.replicates, "seed": self.config.seed,
                    "n_ok": len(ok), "partial": len(ok) < len(self.replicates)})
        if ok:
            row["rmse_gamma"] = rmse_gamma([r.truth_gamma for r in ok],
                                           [r.inclusion for r in ok], metric_literal)
            hs = [np.full(r.truth_gamma.shape, self.config.h) for r in ok]
            row["rmse_gamma_prior_mean"] = rmse_gamma([r.truth_gamma for r in ok], hs,
                                                      metric_literal)
            if self.config.method == "skewt-vb":
                row["rmse_c"] = rmse_scalar(self.config.c, [r.c_hat for r in ok])
                row["rmse_f"] = rmse_scalar(self.config.f, [r.f_hat for r in ok])
                row["mean_c"] = float(np.mean([r.c_hat for r in ok]))
                row["mean_f"] = float(np.mean([r.f_hat for r in ok]))
            else:
                row.update(rmse_c=math.nan, rmse_f=math.nan, mean_c=math.nan, mean_f=math.nan)
        else:
            row.update(rmse_gamma=math.nan, rmse_gamma_prior_mean=math.nan, rmse_c=math.nan,
                       rmse_f=math.nan, mean_c=math.nan, mean_f=math.nan)
        row["mean_wall_time"] = float(np.mean([r.wall_time for r in self.replicates]))
        return row


TIMING_COLUMNS = ("mean_wall_time",)


def run_study(grid: Sequence[SimConfig], fit_config: FitConfig | None = None,
              workers: int = 1, out_dir: str | Path | None = None,
              metric_literal: bool = False) -> pd.DataFrame:
    """Run every cell's replicates and aggregate the metrics.

    Jobs are keyed by ``(cell, replicate)`` so the table does not depend on
    completion order. With ``out_dir`` writes ``results.tsv`` (timing-free,
    bit-reproducible), ``timings.tsv`` and ``manifest.json``.
    """
    if not grid:
        raise ModelError("empty grid")
    jobs = [(cell, r, fit_config) for cell in grid for r in range(cell.replicates)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_job, jobs))
    else:
        results = [_job(j) for j in jobs]
    cells = [CellResult(cell) for cell in grid]
    k = 0
    for cr in cells:
        cr.replicates = results[k:k + cr.config.replicates]
        k += cr.config.replicates
    table = pd.DataFrame([cr.row(metric_literal) for cr in cells])
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        table.drop(columns=list(TIMING_COLUMNS)).to_csv(out / "results.tsv", sep="\t",
                                                        index=False, float_format="%.17g")
        table[list(grid[0].cell()) + list(TIMING_COLUMNS)].to_csv(
            out / "timings.tsv", sep="\t", index=False)
        manifest = {
            "mode": "simulate",
            "version": __version__,
            "numpy": np.__version__,
            "pandas": pd.__version__,
            "grid": [asdict(c) for c in grid],
            "fit": (fit_config or FitConfig()).to_dict(),
            "metric_literal": metric_literal,
            "workers": workers,
        }
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2, default=_jsonable))
    return table


def _jsonable(x):
    if isinstance(x, float) and not math.isfinite(x):
        return None
    return str(x)


def desk_grid(c: float = 4.0, f: float = 5.0, M: int = 50, p: int = 10, h: float = 0.1,
              replicates: int = 3, seed: int = 0, method: str = "skewt-vb",
              q_values=(0.15, 0.3), K_values=(30, 100)) -> list[SimConfig]:
    """The q x K symbol combinations of one ``(c, f)`` panel at reduced scale."""
    return [SimConfig(M=M, p=p, h=h, q_prop=q, c=c, f=f, K=K, replicates=replicates,
                      seed=seed, method=method) for q, K in product(q_values, K_values)]


def full_grid(replicates: int = 30, M: int = 300, seed: int = 0,
              method: str = "skewt-vb") -> list[SimConfig]:
    """All 32 design cells crossed with both window sizes (long-running)."""
    return [SimConfig(M=M, p=p, h=h, q_prop=q, c=c, f=f, K=K, replicates=replicates,
                      seed=seed, method=method)
            for p, h, q, c, f, K in product((10, 20), (0.1, 0.25), (0.15, 0.3), (0.0, 4.0),
                                            (5.0, 20.0), (30, 100))]

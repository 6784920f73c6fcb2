"""EM for the normal-error sparse mixed model with Occam's window E-steps.

The E-step for individual ``i`` is the posterior over its window models
(weights) and, per model, ``sigma^2 ~ IG(a + n_i/2, b + C/2)`` and
``beta | sigma^2 ~ N(A, sigma^2 B)``. The M-step maximizes the expected
complete-data log posterior ``Q`` block by block.
"""
from __future__ import annotations

import logging
import math
import time
import warnings
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.optimize import brentq
from scipy.special import digamma, gammaln

from . import parallel
from .conjugate import (
    LOG_2PI,
    Scorer,
    WindowPosterior,
    WorkingData,
    truncate_weights,
    window_posterior,
)
from .model import (
    GlobalParams,
    IndividualData,
    ModelError,
    NumericalError,
    log_prior_table,
    validate_dataset,
)
from .window import OccamWindow, allocate_updates, full_window, initialize, search

log = logging.getLogger(__name__)

A_BOUNDS = (1e-6, 1e6)
AB1_BOUNDS = (1e-6, 1e6)
# the half-Cauchy prior is unbounded at zero, so an all-empty fit drives the slab to 0
SLAB_BOUNDS = (1e-10, 1e10)


class SolverError(ArithmeticError):
    def __init__(self, message: str, **diagnostics: Any):
        super().__init__(message)
        self.diagnostics = diagnostics


@dataclass
class FitConfig:
    """Settings shared by the normal EM and skew-t VB fits."""

    K: int = 30
    L: int | None = None
    epsilon: float = 1e-8
    tol: float = 1e-8
    max_iter: int = 200
    patience: int = 3
    seed: int = 0
    threads: int = 1
    exponent_convention: str = "half"
    slab: str = "g2"
    score_includes_prior: bool = True
    init_a: float = 2.0
    full_enumeration: bool = False
    # skew-t only
    mc_draws: int = 200
    init_c: float | None = None
    init_f: float = 10.0
    fix_c: bool = False
    fix_f: bool = False
    normal_limit: bool = False
    smooth_window: int = 5

    def __post_init__(self):
        if self.K < 1:
            raise ModelError("K must be at least 1")
        if self.L is not None and self.L < 0:
            raise ModelError("L must be non-negative")
        if not 0 <= self.epsilon < 1:
            raise ModelError("epsilon must lie in [0, 1)")
        if self.max_iter < 1:
            raise ModelError("max_iter must be at least 1")

    def updates_for(self, M: int) -> int:
        return 10 * M if self.L is None else self.L

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


@dataclass
class EMState:
    globals: GlobalParams
    windows: list[OccamWindow]
    posteriors: list[WindowPosterior]
    q_value: float
    iteration: int
    trace: list[dict[str, Any]] = field(default_factory=list)
    converged: bool = False
    diagnostics: dict[str, Any] = field(default_factory=dict)
    latents: list | None = None

    @property
    def q_trace(self) -> list[float]:
        return [row["Q"] for row in self.trace]

    @property
    def objective_trace(self) -> list[float]:
        return [row["objective"] for row in self.trace]

    def inclusion_probabilities(self) -> np.ndarray:
        return np.array([post.inclusion() for post in self.posteriors])


# ---------------------------------------------------------------------------
# E-step


def estep(wds: Sequence[WorkingData], windows: Sequence[OccamWindow],
          globals_: GlobalParams, slab: str = "g2", threads: int = 1,
          ids: Sequence | None = None) -> list[WindowPosterior]:
    """Posteriors for every individual's window; refreshes cached scores."""
    ids = ids if ids is not None else range(len(wds))

    def one(i):
        scorer = Scorer(wds[i], globals_, slab, ids[i])
        post = window_posterior(scorer, windows[i].model_matrix())
        return post

    posts = parallel.pmap(one, list(range(len(wds))), threads)
    for win, post in zip(windows, posts):
        win.log_marginals = post.log_marginal.copy()
        win.log_priors = post.log_prior.copy()
        win.dirty = False
    return posts


def _kept(posts: Sequence[WindowPosterior], epsilon: float) -> list[np.ndarray]:
    return [truncate_weights(post.weights, epsilon) for post in posts]


# ---------------------------------------------------------------------------
# Q function


def hyper_log_prior(globals_: GlobalParams, slab: str = "g2") -> float:
    """Log hyperprior of psi (IG(1, 1)) and the slab variance (half-Cauchy on its root)."""
    v = globals_.slab_variance(slab)
    psi = globals_.psi
    return -2.0 * math.log(psi) - 1.0 / psi - 0.5 * math.log(v) - math.log1p(v)


def prior_block(post: WindowPosterior, globals_: GlobalParams, slab: str = "g2") -> np.ndarray:
    """Per-model expected log priors of ``beta``, ``sigma^2`` and ``gamma``."""
    g = globals_
    v = g.slab_variance(slab)
    p = post.models.shape[1]
    k = post.counts
    e_log = post.e_log_sig2
    beta = (-0.5 * (k + 1) * LOG_2PI - 0.5 * math.log(g.psi) - 0.5 * k * math.log(v)
            - 0.5 * (k + 1) * e_log - 0.5 * (post.e_b1sq / g.psi + post.e_brest / v))
    sig = g.a * math.log(g.b) - gammaln(g.a) - (g.a + 1.0) * e_log - g.b * post.e_inv
    gam = log_prior_table(g.a1, g.b1, p)[k]
    return beta + sig + gam


def normal_loglik_block(post: WindowPosterior, wd: WorkingData, zeta: np.ndarray) -> np.ndarray:
    """Per-model expected normal log likelihood at fixed-effect vector ``zeta``."""
    Str, rtr = wd.residual(zeta)
    A = post.A
    quad = rtr - 2.0 * A @ Str + np.einsum("ki,ij,kj->k", A, wd.StS, A)
    e_u2 = post.e_inv * quad + np.einsum("ij,kij->k", wd.StS, post.B)
    return -0.5 * wd.n * LOG_2PI - 0.5 * wd.n * post.e_log_sig2 - 0.5 * e_u2


def q_function(wds: Sequence[WorkingData], posts: Sequence[WindowPosterior],
               globals_: GlobalParams, epsilon: float = 1e-8, slab: str = "g2") -> float:
    """Expected complete-data log posterior at ``globals_``.

    Expectations are under the fixed E-step ``posts``; only models with
    weight above ``epsilon`` enter (kept weights are renormalized).
    """
    per = []
    for wd, post, w in zip(wds, posts, _kept(posts, epsilon)):
        terms = normal_loglik_block(post, wd, globals_.zeta_star) + prior_block(post, globals_, slab)
        per.append(float(w[w > 0] @ terms[w > 0]))
    return float(parallel.tree_sum(per)) + hyper_log_prior(globals_, slab)


def estep_entropy(posts: Sequence[WindowPosterior], epsilon: float = 0.0) -> float:
    """Entropy of the E-step distribution over ``(gamma, beta, sigma^2)``."""
    per = []
    for post, w in zip(posts, _kept(posts, epsilon)):
        keep = w > 0
        a = post.shape
        r = post.rate
        h_sig = a + np.log(r) + gammaln(a) - (1.0 + a) * digamma(a)
        d = post.counts + 1
        h_beta = 0.5 * d * (1.0 + LOG_2PI) + 0.5 * post.logdet_B + 0.5 * d * post.e_log_sig2
        per.append(float(-(w[keep] @ np.log(w[keep])) + w[keep] @ (h_sig + h_beta)[keep]))
    return float(parallel.tree_sum(per))


def log_posterior(wds: Sequence[WorkingData], posts: Sequence[WindowPosterior],
                  globals_: GlobalParams, slab: str = "g2") -> float:
    """Log posterior of the global parameters with each gamma-sum restricted to its window.

    This is the quantity EM increases; ``posts`` must be computed at ``globals_``.
    """
    g = globals_
    per = []
    for wd, post in zip(wds, posts):
        const = (-0.5 * wd.n * LOG_2PI + g.a * math.log(g.b) - gammaln(g.a)
                 + gammaln(g.a + wd.shape_inc))
        s = post.log_marginal + post.log_prior
        top = float(np.max(s))
        per.append(top + math.log(float(np.sum(np.exp(s - top)))) + const)
    return float(parallel.tree_sum(per)) + hyper_log_prior(g, slab)


# ---------------------------------------------------------------------------
# M-step


def mstep_zeta(wds: Sequence[WorkingData], posts: Sequence[WindowPosterior],
               epsilon: float = 1e-8) -> np.ndarray:
    """Fixed effects maximizing Q given the E-step."""
    lhs, rhs = [], []
    for wd, post, w in zip(wds, posts, _kept(posts, epsilon)):
        we = w * post.e_inv
        W = float(we.sum())
        abar = we @ post.A
        lhs.append(W * wd.XtX)
        rhs.append(W * wd.Xty - wd.StX.T @ abar)
    G = parallel.tree_sum(lhs)
    h = parallel.tree_sum(rhs)
    try:
        return cho_solve(cho_factor(G), h)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("fixed-effect normal matrix is rank deficient") from exc


def mstep_psi(posts: Sequence[WindowPosterior], epsilon: float = 1e-8) -> float:
    total = parallel.tree_sum([float(w @ post.e_b1sq)
                               for post, w in zip(posts, _kept(posts, epsilon))])
    return (total + 2.0) / (len(posts) + 4.0)


def solve_ab(posts: Sequence[WindowPosterior], epsilon: float = 1e-8) -> tuple[float, float]:
    """Joint maximizer of Q in the inverse-gamma hyperparameters ``(a, b)``.

    Substituting ``b = a M / sum w E[1/sigma^2]`` leaves
    ``digamma(a) - log(a) = log(M / S1) + S2 / M`` which is solved by Brent's
    method in ``log a``.
    """
    kept = _kept(posts, epsilon)
    M = len(posts)
    s1 = parallel.tree_sum([float(w @ post.e_inv) for post, w in zip(posts, kept)])
    s2 = parallel.tree_sum([float(-(w @ post.e_log_sig2)) for post, w in zip(posts, kept)])
    if not s1 > 0:
        raise SolverError("sum of E[1/sigma^2] must be positive", s1=s1)
    target = math.log(M / s1) + s2 / M

    def h(u):
        a = math.exp(u)
        return float(digamma(a)) - u - target

    lo, hi = math.log(A_BOUNDS[0]), math.log(A_BOUNDS[1])
    h_lo, h_hi = h(lo), h(hi)
    if not (h_lo < 0 < h_hi):
        raise SolverError(
            "no root for a in bracket; E[log 1/sigma^2] too close to log E[1/sigma^2] "
            "(a diverges)", target=target, h_lo=h_lo, h_hi=h_hi, s1=s1, s2=s2, M=M)
    u = brentq(h, lo, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=500)
    a = math.exp(u)
    return a, a * M / s1


def _count_weights(posts: Sequence[WindowPosterior], p: int, epsilon: float) -> np.ndarray:
    T = np.zeros(p + 1)
    for post, w in zip(posts, _kept(posts, epsilon)):
        np.add.at(T, post.counts, w)
    return T


def ab1_objective(a1: float, b1: float, T: np.ndarray, p: int) -> float:
    """Q as a function of the beta-binomial hyperparameters; ``T[k]`` is the
    total weight on models of size k."""
    return float(T @ log_prior_table(a1, b1, p))


def _ab1_derivatives(x: float, y: float, T: np.ndarray, p: int):
    """Value, gradient and Hessian of the a1/b1 objective in ``(log a1, log b1)``."""
    j = np.arange(p)
    M = T.sum()
    sab = np.sum(1.0 / (x + y + j))
    sab2 = np.sum(1.0 / (x + y + j) ** 2)
    cx = np.concatenate([[0.0], np.cumsum(1.0 / (x + j))])
    cy = np.concatenate([[0.0], np.cumsum(1.0 / (y + j))])[::-1]
    cx2 = np.concatenate([[0.0], np.cumsum(1.0 / (x + j) ** 2)])
    cy2 = np.concatenate([[0.0], np.cumsum(1.0 / (y + j) ** 2)])[::-1]
    gx = T @ cx - M * sab
    gy = T @ cy - M * sab
    hxx = -(T @ cx2) + M * sab2
    hyy = -(T @ cy2) + M * sab2
    grad = np.array([x * gx, y * gy])
    hess = np.array([[x * x * hxx + x * gx, x * y * M * sab2],
                     [x * y * M * sab2, y * y * hyy + y * gy]])
    return ab1_objective(x, y, T, p), grad, hess


def solve_a1_b1(posts: Sequence[WindowPosterior], p: int, a1: float = 1.0, b1: float = 1.0,
                epsilon: float = 1e-8, tol: float = 1e-12,
                max_steps: int = 200) -> tuple[float, float, dict[str, Any]]:
    """Beta-binomial hyperparameters maximizing Q.

    Newton ascent on ``(log a1, log b1)`` from the previous values, with
    step halving so the objective never decreases. The maximizer often lies
    along a slowly rising ridge, so both parameters are capped at
    ``AB1_BOUNDS``.
    """
    T = _count_weights(posts, p, epsilon)
    lo, hi = (math.log(b) for b in AB1_BOUNDS)
    u = np.clip(np.log([a1, b1]), lo, hi)
    val, grad, hess = _ab1_derivatives(*np.exp(u), T, p)
    steps = 0
    for steps in range(1, max_steps + 1):
        try:
            neg_def = np.all(np.linalg.eigvalsh(hess) < 0)
        except np.linalg.LinAlgError:
            neg_def = False
        step = -np.linalg.solve(hess, grad) if neg_def else grad / max(1.0, np.abs(grad).max())
        # freeze coordinates pushing against a bound
        blocked = ((u <= lo) & (step < 0)) | ((u >= hi) & (step > 0))
        step[blocked] = 0.0
        if not np.any(step):
            break
        t = 1.0
        while t > 1e-12:
            u_new = np.clip(u + t * step, lo, hi)
            val_new = ab1_objective(*np.exp(u_new), T, p)
            if val_new >= val:
                break
            t *= 0.5
        else:
            break
        moved = np.abs(u_new - u).max()
        u = u_new
        val, grad, hess = _ab1_derivatives(*np.exp(u), T, p)
        if moved < tol:
            break
    x, y = (float(v) for v in np.exp(u))
    lo_v, hi_v = AB1_BOUNDS
    diag = {"newton_steps": steps,
            "a1_at_lower": x <= lo_v * (1 + 1e-6), "b1_at_lower": y <= lo_v * (1 + 1e-6),
            "a1_at_upper": x >= hi_v * (1 - 1e-6), "b1_at_upper": y >= hi_v * (1 - 1e-6)}
    if any(v for key, v in diag.items() if key.endswith(("lower", "upper"))):
        log.info("beta-binomial hyperparameters at search bound: %s", diag)
    return x, y, diag


def g_objective(v: float, sum_p: float, sum_b: float) -> float:
    return -sum_p * math.log(v) - sum_b / v - math.log(v) - 2.0 * math.log1p(v)


def solve_g(posts: Sequence[WindowPosterior], previous: float, epsilon: float = 1e-8) -> float:
    """Slab variance maximizing Q.

    The stationarity condition of the objective is a quadratic in the
    variance, so its positive root is returned directly, clipped to
    ``SLAB_BOUNDS``. Returns ``previous`` unchanged when no window model
    includes an effect.
    """
    kept = _kept(posts, epsilon)
    sum_p = parallel.tree_sum([float(w @ post.counts) for post, w in zip(posts, kept)])
    sum_b = parallel.tree_sum([float(w @ post.e_brest) for post, w in zip(posts, kept)])
    if sum_p <= 0:
        warnings.warn("no window model includes a random effect; slab variance unchanged",
                      RuntimeWarning, stacklevel=2)
        return previous
    return min(max(slab_root(sum_p, sum_b), SLAB_BOUNDS[0]), SLAB_BOUNDS[1])


def slab_root(sum_p: float, sum_b: float) -> float:
    # -(S_p+3) v^2 + (S_b - S_p - 1) v + S_b = 0
    qa = sum_p + 3.0
    qb = sum_b - sum_p - 1.0
    disc = qb * qb + 4.0 * qa * sum_b
    if qb >= 0:
        return (qb + math.sqrt(disc)) / (2.0 * qa)
    # rationalized form avoids cancellation when qb < 0
    return 2.0 * sum_b / (math.sqrt(disc) - qb)


def mstep(wds, posts, globals_: GlobalParams, cfg: FitConfig,
          record: Callable[[str, GlobalParams], None] | None = None,
          ) -> tuple[GlobalParams, dict[str, Any]]:
    """Block updates in the order zeta, psi, (a, b), (a1, b1), slab variance."""
    eps = cfg.epsilon
    g = globals_.copy()
    g.zeta_star = mstep_zeta(wds, posts, eps)
    if record:
        record("zeta", g)
    g.psi = mstep_psi(posts, eps)
    if record:
        record("psi", g)
    g.a, g.b = solve_ab(posts, eps)
    if record:
        record("ab", g)
    p = posts[0].models.shape[1]
    g.a1, g.b1, diag = solve_a1_b1(posts, p, g.a1, g.b1, eps)
    if record:
        record("a1b1", g)
    v = solve_g(posts, g.slab_variance(cfg.slab), eps)
    g.g2 = GlobalParams.g2_from_slab_variance(v, cfg.slab)
    if record:
        record("g", g)
    return g, {"a1b1": diag}


# ---------------------------------------------------------------------------
# Initialization and driver


def init_globals(data: Sequence[IndividualData], cfg: FitConfig) -> GlobalParams:
    """Starting values: within-individual least squares for the fixed effects,
    a pooled random-intercept variance estimate for ``b``."""
    q = data[0].q
    if q > 1:
        Xc = np.vstack([d.X[:, 1:] - d.X[:, 1:].mean(axis=0) for d in data])
        yc = np.concatenate([d.y - d.y.mean() for d in data])
        G = Xc.T @ Xc
        try:
            slope = cho_solve(cho_factor(G), Xc.T @ yc)
        except np.linalg.LinAlgError:
            slope = np.linalg.lstsq(Xc, yc, rcond=None)[0]
        resid = np.concatenate([d.y - d.X[:, 1:] @ slope for d in data])
        zeta = np.concatenate([[resid.mean()], slope])
    else:
        zeta = np.array([np.concatenate([d.y for d in data]).mean()])
    ss, N = 0.0, 0
    for d in data:
        r = d.y - d.X @ zeta
        ss += float(((r - r.mean()) ** 2).sum())
        N += d.n
    dof = N - len(data) if N > len(data) else N
    sigma2 = max(ss / dof, 1e-12)
    a = cfg.init_a
    return GlobalParams(zeta_star=zeta, psi=1.0, g2=1.0, a=a, b=a * sigma2, a1=1.0, b1=1.0)


def use_full_enumeration(cfg: FitConfig, p: int) -> bool:
    return cfg.full_enumeration or cfg.K >= 2 ** p


def init_windows(wds, globals_: GlobalParams, cfg: FitConfig, ids, p: int) -> list[OccamWindow]:
    full = use_full_enumeration(cfg, p)

    def one(i):
        scorer = Scorer(wds[i], globals_, cfg.slab, ids[i])
        if full:
            return full_window(scorer, cfg.score_includes_prior)
        return initialize(scorer, cfg.K, cfg.score_includes_prior)

    return parallel.pmap(one, list(range(len(wds))), cfg.threads)


def search_windows(wds, windows: list[OccamWindow], globals_: GlobalParams, cfg: FitConfig,
                   iteration: int, ids) -> int:
    """Allocate the update budget and run the greedy search; returns replacements."""
    M = len(windows)
    L = cfg.updates_for(M)
    alloc = allocate_updates([w.stale_count for w in windows], L,
                             parallel.stream(cfg.seed, parallel.ALLOCATE, iteration))

    def one(i):
        if alloc[i] == 0:
            return 0
        scorer = Scorer(wds[i], globals_, cfg.slab, ids[i])
        windows[i].refresh(scorer)
        rng = parallel.stream(cfg.seed, parallel.SEARCH, iteration, i)
        return search(windows[i], scorer, int(alloc[i]), rng)

    return int(sum(parallel.pmap(one, list(range(M)), cfg.threads)))


def trace_row(iteration: int, objective: float, q_value: float, g: GlobalParams,
              elapsed: float, replacements: int, **extra) -> dict[str, Any]:
    row = {"iteration": iteration, "objective": objective, "Q": q_value}
    row.update(g.to_dict())
    row.update({"wall_time": elapsed, "window_replacements": replacements})
    row.update(extra)
    return row


def em_fit(data: Sequence[IndividualData], config: FitConfig | None = None,
           globals_init: GlobalParams | None = None,
           on_iteration: Callable[[dict[str, Any]], None] | None = None) -> EMState:
    """Fit the normal-error model.

    Each iteration: E-step over all windows, block M-step, then ``L`` window
    search updates at the new parameters. Stops when the relative change in
    the objective stays below ``tol`` for ``patience`` iterations without any
    window replacement, or after ``max_iter`` iterations.
    """
    cfg = config or FitConfig()
    validate_dataset(data)
    p = data[0].p
    ids = [d.id for d in data]
    wds = [WorkingData.from_individual(d, cfg.exponent_convention) for d in data]
    g = globals_init.copy() if globals_init is not None else init_globals(data, cfg)
    windows = init_windows(wds, g, cfg, ids, p)
    full = use_full_enumeration(cfg, p)

    trace: list[dict[str, Any]] = []
    quiet = 0
    prev_obj = None
    converged = False
    it = 0
    diagnostics: dict[str, Any] = {}
    for it in range(1, cfg.max_iter + 1):
        t0 = time.perf_counter()
        try:
            posts = estep(wds, windows, g, cfg.slab, cfg.threads, ids)
            objective = log_posterior(wds, posts, g, cfg.slab)
            g_new, diag = mstep(wds, posts, g, cfg)
            q_value = q_function(wds, posts, g_new, cfg.epsilon, cfg.slab)
        except (NumericalError, SolverError, ModelError) as exc:
            exc.args = (f"iteration {it}: {exc.args[0]}",) + exc.args[1:]
            raise
        g = g_new
        diagnostics = diag
        replaced = 0 if full else search_windows(wds, windows, g, cfg, it, ids)
        row = trace_row(it, objective, q_value, g, time.perf_counter() - t0, replaced)
        trace.append(row)
        if on_iteration:
            on_iteration(row)
        if prev_obj is not None and abs(objective - prev_obj) < cfg.tol * abs(objective) \
                and replaced == 0:
            quiet += 1
        else:
            quiet = 0
        prev_obj = objective
        if quiet >= cfg.patience:
            converged = True
            break
    posts = estep(wds, windows, g, cfg.slab, cfg.threads, ids)
    q_final = q_function(wds, posts, g, cfg.epsilon, cfg.slab)
    return EMState(globals=g, windows=windows, posteriors=posts, q_value=q_final,
                   iteration=it, trace=trace, converged=converged, diagnostics=diagnostics)

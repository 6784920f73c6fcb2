"""Variational Bayes for the skew-t error model.

Errors are written as ``c/sqrt(1+c^2) d + e*`` with ``d ~ N+(0, sigma^2/rho)``,
``e* ~ N(0, sigma^2 / (rho (1 + c^2)))`` and ``rho ~ Ga(f/2, f/2)``. Given the
per-observation moments of ``(rho, d)`` the posterior of
``(gamma, beta, sigma^2)`` is that of a normal model on reweighted pseudo
data, so the normal-EM machinery is reused. The joint factor ``q(rho, d)``
is a positive-truncated t for ``d`` and a gamma for ``rho | d``; the latter is
integrated analytically and only ``d`` is sampled.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass
from functools import lru_cache
from typing import Any, Callable, Sequence

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.special import digamma, gammaln, stdtr, stdtrit

from . import parallel
from .conjugate import LOG_2PI, WindowPosterior, WorkingData, shape_increment
from .model import GlobalParams, IndividualData, ModelError, NumericalError, validate_dataset
from .normal_em import (
    EMState,
    FitConfig,
    SolverError,
    _kept,
    estep,
    estep_entropy,
    hyper_log_prior,
    init_globals,
    init_windows,
    log_posterior,
    mstep,
    prior_block,
    q_function,
    search_windows,
    trace_row,
    use_full_enumeration,
)
from .solvers import maximize_1d, maximize_log_scale

log = logging.getLogger(__name__)

C_BOUNDS = (-50.0, 50.0)
F_BOUNDS = (0.5, 500.0)
C_PRIOR_SD = 100.0
TAIL_FALLBACK = 1e-12


@dataclass
class LatentMoments:
    """Monte Carlo moments of ``(rho, d)`` for each observation of one individual."""

    e_rho: np.ndarray
    e_rho_d: np.ndarray
    e_rho_d2: np.ndarray
    e_log_rho: np.ndarray
    q_var: np.ndarray | None = None
    entropy: np.ndarray | None = None

    @classmethod
    def degenerate(cls, n: int) -> "LatentMoments":
        """The normal limit: ``rho = 1`` and no skewing component."""
        z = np.zeros(n)
        return cls(np.ones(n), z, z.copy(), z.copy(), z.copy(), z.copy())

    @classmethod
    def half_normal(cls, n: int, sigma: float) -> "LatentMoments":
        """Moments with ``rho = 1`` and ``d ~ N+(0, sigma^2)``; a starting point only."""
        z = np.zeros(n)
        return cls(np.ones(n), np.full(n, sigma * math.sqrt(2.0 / math.pi)),
                   np.full(n, sigma * sigma), z, z.copy(), None)

    def check(self) -> None:
        if np.any(self.e_rho <= 0) or np.any(self.e_rho_d2 < 0):
            raise NumericalError("latent moments violate positivity")


@dataclass
class TruncTParams:
    """``q(d)`` proportional to ``(1 + (d - mu)^2 / nu)^(-(dof + 1)/2)`` on ``d > 0``.

    ``lam`` is twice the minimum over ``d`` of the rate of ``q(rho | d)``, so
    that rate equals ``lam/2 * (1 + (d - mu)^2 / nu)``.
    """

    mu: np.ndarray
    nu: np.ndarray
    dof: float
    lam: np.ndarray

    @property
    def scale(self) -> np.ndarray:
        return np.sqrt(self.nu / self.dof)

    def rho_rate(self, d: np.ndarray) -> np.ndarray:
        """Rate of ``q(rho | d)`` for draws ``d`` of shape ``(n, D)``."""
        return 0.5 * self.lam[:, None] * (1.0 + (d - self.mu[:, None]) ** 2 / self.nu[:, None])


def trunc_t_params(W: float, U: np.ndarray, V: np.ndarray, c: float, f: float) -> TruncTParams:
    """Parameters of ``q(d)`` for every observation of one individual.

    ``W = sum_k w_k E[1/sigma^2]``, ``U_j = sum_k w_k E[(y_j - X_j zeta - S_j beta)/sigma^2]``
    and ``V_j`` the same with the squared residual.
    """
    U = np.asarray(U, dtype=float)
    V = np.asarray(V, dtype=float)
    if not W > 0:
        raise NumericalError("non-positive E[1/sigma^2] in truncated-t parameters")
    cc = 1.0 + c * c
    mu = c * math.sqrt(cc) * U / (cc * W)
    inv_nu_factor = cc * W
    lam = cc * (V - W * mu * mu) + f
    lam = np.maximum(lam, f)  # V >= U^2/W, so only rounding can push below f
    nu = lam / inv_nu_factor
    if np.any(nu <= 0) or not np.all(np.isfinite(nu)):
        raise NumericalError("non-positive scale in truncated-t parameters")
    return TruncTParams(mu=mu, nu=nu, dof=f + 1.0, lam=lam)


# ---------------------------------------------------------------------------
# sampling


def _t_logpdf(t: np.ndarray, dof: float) -> np.ndarray:
    return (gammaln(0.5 * (dof + 1)) - gammaln(0.5 * dof) - 0.5 * math.log(dof * math.pi)
            - 0.5 * (dof + 1) * np.log1p(t * t / dof))


@lru_cache(maxsize=8)
def _isf_spline(dof: float) -> CubicSpline:
    """Spline of ``asinh`` of the upper-tail quantile against ``log v``, ``v <= 1/2``.

    Table entries come from ``stdtrit`` where it round-trips and from the
    Pareto asymptote elsewhere, then get Newton-polished on the log
    survival function.
    """
    # dense where the curve bends, sparse in the near-linear far tail
    x = np.concatenate([np.linspace(-700.0, -40.0, 1500, endpoint=False),
                        np.linspace(-40.0, -8.0, 1600, endpoint=False),
                        np.linspace(-8.0, math.log(0.5), 3000)])
    t = -stdtrit(dof, np.exp(x))
    log_c = gammaln(0.5 * (dof + 1)) - gammaln(0.5 * dof) - 0.5 * math.log(dof * math.pi)
    asym = np.exp((log_c + 0.5 * (dof - 1) * math.log(dof) - x) / dof)
    with np.errstate(divide="ignore", invalid="ignore"):
        bad = ~(np.abs(np.log(stdtr(dof, -t)) - x) < 1e-3)
    t[bad] = asym[bad]
    far = asym > 1e8  # relative error of the asymptote is O(1/t^2)
    t[far] = asym[far]
    near = ~far
    for _ in range(4):
        tn = t[near]
        sf = stdtr(dof, -tn)
        t[near] = tn + (np.log(sf) - x[near]) * sf / np.exp(_t_logpdf(tn, dof))
    return CubicSpline(x, np.arcsinh(t))


def t_isf(v: np.ndarray, dof: float) -> np.ndarray:
    """Upper-tail quantile of the standard t: ``P(T > t) = v``.

    Evaluates a cubic spline through exact quantiles on a grid in ``log v``
    (relative accuracy near 1e-10); upper halves use symmetry.
    """
    v = np.asarray(v, dtype=float)
    upper = v > 0.5
    w = np.where(upper, 1.0 - v, v)
    with np.errstate(divide="ignore"):
        x = np.maximum(np.log(w), -700.0)
    t = np.sinh(_isf_spline(float(dof))(x))
    return np.where(upper, -t, t)


def _tail_rejection(z0: np.ndarray, dof: float, n_draws: int,
                    rng: np.random.Generator) -> np.ndarray:
    """Draws of ``T | T > z0`` for very large ``z0`` by a Pareto-tail proposal.

    The Pareto index matches the log-slope of the t density at ``z0``, so the
    density ratio peaks at ``z0`` and acceptance stays high for any ``dof``.
    Requires ``z0 > 1``.
    """
    if np.any(z0 <= 1.0):
        raise NumericalError("tail sampler needs a truncation point above 1")
    out = np.empty((len(z0), n_draws))
    for i, lo in enumerate(z0):
        alpha = (dof + 1) * lo * lo / (dof + lo * lo) - 1.0
        got = 0
        buf = np.empty(n_draws)
        while got < n_draws:
            m = 2 * (n_draws - got) + 8
            cand = lo * rng.random(m) ** (-1.0 / alpha)
            # target over proposal density relative to its value at lo, at most one
            log_acc = ((alpha + 1) * np.log(cand / lo)
                       - 0.5 * (dof + 1) * np.log1p((cand * cand - lo * lo) / (dof + lo * lo)))
            acc = np.exp(np.minimum(log_acc, 0.0))
            keep = cand[rng.random(m) < acc][: n_draws - got]
            buf[got:got + len(keep)] = keep
            got += len(keep)
        out[i] = buf
    return out


def sample_d(params: TruncTParams, n_draws: int, rng: np.random.Generator) -> np.ndarray:
    """Draws from each observation's positive-truncated t, shape ``(n, n_draws)``."""
    if n_draws < 1:
        raise ModelError("n_draws must be at least 1")
    mu, s, dof = params.mu, params.scale, params.dof
    n = mu.shape[0]
    z0 = -mu / s
    mass = stdtr(dof, -z0)  # P(T > z0)
    u = rng.random((n, n_draws))
    d = np.empty((n, n_draws))
    tail = mass < TAIL_FALLBACK
    body = ~tail
    if np.any(body):
        v = u[body] * mass[body, None]
        t = t_isf(v, dof)
        t = np.maximum(t, z0[body, None])
        d[body] = mu[body, None] + s[body, None] * t
    if np.any(tail):
        t = _tail_rejection(z0[tail], dof, n_draws, rng)
        d[tail] = mu[tail, None] + s[tail, None] * t
    return np.maximum(d, 0.0)


def sample_latents(params: TruncTParams, f: float, n_draws: int,
                   rng: np.random.Generator) -> LatentMoments:
    """Monte Carlo moments of ``(rho, d)``; ``rho | d`` is integrated exactly."""
    d = sample_d(params, n_draws, rng)
    rate = params.rho_rate(d)
    if not np.all(np.isfinite(rate)) or np.any(rate <= 0):
        raise NumericalError("non-finite rate in q(rho | d)")
    shape = 0.5 * f + 1.0
    e_rho_given = shape / rate
    log_rate = np.log(rate)
    mean_log_rate = log_rate.mean(axis=1)
    # entropy of q(d) q(rho | d); the d-dependence enters only through log rate
    const_rho = shape + gammaln(shape) + (1.0 - shape) * digamma(shape)
    entropy = (log_trunc_t_normalizer(params) + const_rho
               + shape * (mean_log_rate - np.log(0.5 * params.lam)) - mean_log_rate)
    return LatentMoments(
        e_rho=e_rho_given.mean(axis=1),
        e_rho_d=(d * e_rho_given).mean(axis=1),
        e_rho_d2=(d * d * e_rho_given).mean(axis=1),
        e_log_rho=digamma(shape) - mean_log_rate,
        q_var=(0.5 * f) ** 2 * log_rate.var(axis=1) / n_draws,
        entropy=entropy,
    )


def log_trunc_t_normalizer(params: TruncTParams) -> np.ndarray:
    """``log`` of the integral of the unnormalized ``q(d)`` over ``d > 0``."""
    dof = params.dof
    s = params.scale
    log_c = (gammaln(0.5 * (dof + 1)) - gammaln(0.5 * dof) - 0.5 * math.log(dof * math.pi))
    with np.errstate(divide="ignore"):
        log_mass = np.log(stdtr(dof, params.mu / s))
    tiny = ~np.isfinite(log_mass)
    if np.any(tiny):
        # far tail: P(T > z) ~ c dof^((dof-1)/2) z^-dof
        z = -params.mu[tiny] / s[tiny]
        log_mass[tiny] = (log_c + 0.5 * (dof + 1) * math.log(dof) - math.log(dof)
                          - dof * np.log(z))
    return np.log(s) + log_mass - log_c


# ---------------------------------------------------------------------------
# pseudo data


def pseudo_data(data: IndividualData, c: float, latents: LatentMoments,
                normal_limit: bool = False, convention: str = "half"):
    """Reweighted designs and working response.

    Returns ``(X*, S1*, r*, extra)`` where ``S1*`` includes the scaled
    intercept column and ``extra`` is the model-independent part of the
    expected residual quadratic form.
    """
    latents.check()
    cc = 1.0 + c * c
    er = latents.e_rho
    root = np.sqrt(er * cc)
    Xs = root[:, None] * data.X
    Ss = root[:, None] * data.S1
    rs = root * data.y - c * latents.e_rho_d / np.sqrt(er)
    if normal_limit:
        extra = 0.0
    else:
        extra = float(np.sum(cc * latents.e_rho_d2 - c * c * latents.e_rho_d ** 2 / er))
    return Xs, Ss, rs, max(extra, 0.0)


def working_data(data: IndividualData, c: float, latents: LatentMoments,
                 normal_limit: bool = False, convention: str = "half") -> WorkingData:
    Xs, Ss, rs, extra = pseudo_data(data, c, latents, normal_limit)
    inc = shape_increment(data.n, convention) if normal_limit else float(data.n)
    return WorkingData.from_arrays(Xs, Ss, rs, inc, extra)


# ---------------------------------------------------------------------------
# expectations on the original scale


@dataclass
class ResidualMoments:
    """Window-averaged ``E[1/s2]``, ``E[u/s2]`` and ``E[u^2/s2]`` per observation."""

    W: float
    U: np.ndarray
    V: np.ndarray
    e_log_sig2: float


def residual_moments(data: IndividualData, post: WindowPosterior, zeta: np.ndarray,
                     weights: np.ndarray) -> ResidualMoments:
    e_inv = post.e_inv
    we = weights * e_inv
    W = float(we.sum())
    abar = we @ post.A
    H = np.einsum("k,ki,kj->ij", we, post.A, post.A) + np.einsum("k,kij->ij", weights, post.B)
    S1 = data.S1
    r = data.y - data.X @ zeta
    fit = S1 @ abar
    U = W * r - fit
    V = W * r * r - 2.0 * r * fit + np.einsum("ji,ik,jk->j", S1, H, S1)
    return ResidualMoments(W=W, U=U, V=np.maximum(V, 0.0),
                           e_log_sig2=float(weights @ post.e_log_sig2))


# ---------------------------------------------------------------------------
# Q function and M-steps for c and f


@dataclass
class LatentSums:
    """Sufficient sums of the latent block over all observations."""

    rho_V: float
    rhod_U: float
    rhod2_W: float
    n_obs: float
    e_rho: float
    e_log_rho: float


def latent_sums(rms: Sequence[ResidualMoments], latents: Sequence[LatentMoments]) -> LatentSums:
    return LatentSums(
        rho_V=parallel.tree_sum([float(l.e_rho @ rm.V) for rm, l in zip(rms, latents)]),
        rhod_U=parallel.tree_sum([float(l.e_rho_d @ rm.U) for rm, l in zip(rms, latents)]),
        rhod2_W=parallel.tree_sum([rm.W * float(l.e_rho_d2.sum()) for rm, l in zip(rms, latents)]),
        n_obs=float(sum(len(l.e_rho) for l in latents)),
        e_rho=parallel.tree_sum([float(l.e_rho.sum()) for l in latents]),
        e_log_rho=parallel.tree_sum([float(l.e_log_rho.sum()) for l in latents]),
    )


def c_objective(c: float, s: LatentSums) -> float:
    cc = 1.0 + c * c
    return (-0.5 * cc * s.rho_V + c * math.sqrt(cc) * s.rhod_U - 0.5 * c * c * s.rhod2_W
            + 0.5 * s.n_obs * math.log(cc) - 0.5 * c * c / C_PRIOR_SD ** 2)


def f_objective(f: float, s: LatentSums) -> float:
    h = 0.5 * f
    return (s.n_obs * (h * math.log(h) - gammaln(h)) + (h - 1.0) * s.e_log_rho - h * s.e_rho
            + math.log(f) - 0.1 * f)


def mstep_c(sums: LatentSums, previous: float = 0.0) -> float:
    """Skewness maximizing Q over ``[-50, 50]`` with multistart."""
    return maximize_1d(lambda c: c_objective(c, sums), *C_BOUNDS, grid=201,
                       starts=[previous, 0.0, 1.0, -1.0])


def mstep_f(sums: LatentSums, previous: float | None = None) -> float:
    """Degrees of freedom maximizing Q over ``[0.5, 500]``."""
    starts = [previous] if previous else []
    return maximize_log_scale(lambda f: f_objective(f, sums), *F_BOUNDS, grid=81, starts=starts)


def vb_q_function(data: Sequence[IndividualData], posts: Sequence[WindowPosterior],
                  latents: Sequence[LatentMoments], globals_: GlobalParams,
                  epsilon: float = 1e-8, slab: str = "g2", normal_limit: bool = False,
                  convention: str = "half") -> float:
    """Expected complete-data log posterior for the skew-t model.

    With ``normal_limit`` the latent blocks are dropped and the value equals
    the normal-model Q.
    """
    g = globals_
    c = 0.0 if normal_limit else g.c
    cc = 1.0 + c * c
    per = []
    for d, post, lat, w in zip(data, posts, latents, _kept(posts, epsilon)):
        keep = w > 0
        rm = residual_moments(d, post, g.zeta_star, w)
        prior = float(w[keep] @ prior_block(post, g, slab)[keep])
        if normal_limit:
            inc = shape_increment(d.n, convention)
            lik = (-0.5 * d.n * LOG_2PI - inc * rm.e_log_sig2 - 0.5 * float(rm.V.sum()))
        else:
            lik = (d.n * (-LOG_2PI + math.log(2.0) + 0.5 * math.log(cc))
                   + float(lat.e_log_rho.sum()) - d.n * rm.e_log_sig2
                   - 0.5 * (cc * float(lat.e_rho @ rm.V)
                            - 2.0 * c * math.sqrt(cc) * float(lat.e_rho_d @ rm.U)
                            + cc * rm.W * float(lat.e_rho_d2.sum())))
            h = 0.5 * g.f
            lik += (d.n * (h * math.log(h) - gammaln(h))
                    + (h - 1.0) * float(lat.e_log_rho.sum()) - h * float(lat.e_rho.sum()))
        per.append(prior + lik)
    total = float(parallel.tree_sum(per)) + hyper_log_prior(g, slab)
    if not normal_limit:
        total += -0.5 * c * c / C_PRIOR_SD ** 2 + math.log(g.f) - 0.1 * g.f
    return total


def elbo(q_value: float, posts: Sequence[WindowPosterior], latents: Sequence[LatentMoments],
         epsilon: float = 1e-8) -> float:
    """Evidence lower bound: Q plus the entropies of both variational factors."""
    h_lat = parallel.tree_sum([float(l.entropy.sum()) for l in latents])
    return q_value + estep_entropy(posts, epsilon) + h_lat


# ---------------------------------------------------------------------------
# driver


def _initial_skewness(data: Sequence[IndividualData], g: GlobalParams) -> float:
    """Moment-matched skew-normal shape from pooled standardized residuals."""
    z = []
    for d in data:
        r = d.y - d.X @ g.zeta_star
        r = r - r.mean()
        sd = r.std()
        if d.n > 2 and sd > 0:
            z.append(r / sd)
    if not z:
        return 0.0
    z = np.concatenate(z)
    skew = float(np.mean(z ** 3))
    # skew-normal skewness range is (-0.995, 0.995)
    g1 = float(np.clip(skew, -0.99, 0.99))
    k = (2.0 * abs(g1) / (4.0 - math.pi)) ** (2.0 / 3.0)
    delta = math.sqrt(math.pi / 2.0 * k / (1.0 + k))
    delta = min(delta, 0.99)
    return math.copysign(delta / math.sqrt(1.0 - delta * delta), g1)


def _sample_all(data, posts, g: GlobalParams, kept, seed: int, iteration: int,
                draws: int, threads: int) -> list[LatentMoments]:
    def one(i):
        rm = residual_moments(data[i], posts[i], g.zeta_star, kept[i])
        params = trunc_t_params(rm.W, rm.U, rm.V, g.c, g.f)
        rng = parallel.stream(seed, parallel.LATENT, iteration, i)
        return sample_latents(params, g.f, draws, rng)

    return parallel.pmap(one, list(range(len(data))), threads)


def vb_fit(data: Sequence[IndividualData], config: FitConfig | None = None,
           globals_init: GlobalParams | None = None,
           on_iteration: Callable[[dict[str, Any]], None] | None = None) -> EMState:
    """Fit the skew-t model by the three-block variational scheme.

    Each iteration updates the global parameters (including ``c`` and ``f``),
    refreshes the latent moments by Monte Carlo, then searches the windows
    using log marginals of the pseudo data. Convergence is judged on a
    moving average of the evidence lower bound because the latent step is stochastic;
    the number of draws doubles once that average has nearly settled.

    With ``normal_limit`` the latents are fixed at ``rho = 1``, ``c = 0``
    and the iterates coincide with :func:`~occamlme.normal_em.em_fit`.
    """
    cfg = config or FitConfig()
    validate_dataset(data)
    p = data[0].p
    ids = [d.id for d in data]
    nl = cfg.normal_limit
    g = globals_init.copy() if globals_init is not None else init_globals(data, cfg)
    if nl:
        g.c, g.f = 0.0, math.inf
        latents = [LatentMoments.degenerate(d.n) for d in data]
    else:
        if globals_init is None:
            g.c = cfg.init_c if cfg.init_c is not None else _initial_skewness(data, g)
            g.f = cfg.init_f
        if not math.isfinite(g.f):
            raise ModelError("skew-t fit needs finite f")
        sigma = math.sqrt(g.b / g.a)
        latents = [LatentMoments.half_normal(d.n, sigma) for d in data]
    draws = cfg.mc_draws

    def build(gg, lats):
        return [working_data(d, gg.c, l, nl, cfg.exponent_convention)
                for d, l in zip(data, lats)]

    wds = build(g, latents)
    windows = init_windows(wds, g, cfg, ids, p)
    full = use_full_enumeration(cfg, p)
    if not nl:
        # latents drawn from q at the starting values so the first c, f update is informed
        posts = estep(wds, windows, g, cfg.slab, cfg.threads, ids)
        latents = _sample_all(data, posts, g, _kept(posts, cfg.epsilon), cfg.seed, 0,
                              draws, cfg.threads)
        wds = build(g, latents)

    trace: list[dict[str, Any]] = []
    q_hist: list[float] = []
    quiet = 0
    converged = False
    diagnostics: dict[str, Any] = {}
    it = 0
    for it in range(1, cfg.max_iter + 1):
        t0 = time.perf_counter()
        try:
            posts = estep(wds, windows, g, cfg.slab, cfg.threads, ids)
            objective = log_posterior(wds, posts, g, cfg.slab) if nl else None
            g_new, diag = mstep(wds, posts, g, cfg)
            kept = _kept(posts, cfg.epsilon)
            q_se = 0.0
            if not nl:
                rms = [residual_moments(d, post, g_new.zeta_star, w)
                       for d, post, w in zip(data, posts, kept)]
                sums = latent_sums(rms, latents)
                g_new.c = g.c if cfg.fix_c else mstep_c(sums, g.c)
                g_new.f = g.f if cfg.fix_f else mstep_f(sums, g.f)
            if nl:
                q_value = q_function(wds, posts, g_new, cfg.epsilon, cfg.slab)
            else:
                q_value = vb_q_function(data, posts, latents, g_new, cfg.epsilon, cfg.slab)
                objective = elbo(q_value, posts, latents, cfg.epsilon)
                q_se = math.sqrt(sum(float(l.q_var.sum()) for l in latents))
                latents = _sample_all(data, posts, g_new, kept, cfg.seed, it, draws,
                                      cfg.threads)
            g = g_new
            wds = build(g, latents)
        except (NumericalError, SolverError, ModelError) as exc:
            exc.args = (f"iteration {it}: {exc.args[0]}",) + exc.args[1:]
            raise
        diagnostics = diag
        replaced = 0 if full else search_windows(wds, windows, g, cfg, it, ids)
        if nl:
            row = trace_row(it, objective, q_value, g, time.perf_counter() - t0, replaced)
        else:
            row = trace_row(it, objective, q_value, g, time.perf_counter() - t0, replaced,
                            q_mc_se=q_se, mc_draws=draws)
        trace.append(row)
        if on_iteration:
            on_iteration(row)
        q_hist.append(row["objective"])
        w = 1 if nl else cfg.smooth_window
        if len(q_hist) >= 2 * w:
            cur = float(np.mean(q_hist[-w:]))
            prev = float(np.mean(q_hist[-2 * w:-w]))
            rel = abs(cur - prev) / max(abs(cur), 1e-300)
            if not nl and draws == cfg.mc_draws and rel < max(10 * cfg.tol, 1e-6):
                draws = 2 * cfg.mc_draws
            # Monte Carlo noise keeps swapping near-tied models, so only the
            # normal limit also requires a quiet window search
            settled = rel < cfg.tol and (replaced == 0 or not nl)
            quiet = quiet + 1 if settled else 0
            if quiet >= cfg.patience:
                converged = True
                break
    posts = estep(wds, windows, g, cfg.slab, cfg.threads, ids)
    if nl:
        q_final = q_function(wds, posts, g, cfg.epsilon, cfg.slab)
    else:
        q_final = vb_q_function(data, posts, latents, g, cfg.epsilon, cfg.slab)
    diagnostics = dict(diagnostics)
    diagnostics["mc_draws"] = draws
    return EMState(globals=g, windows=windows, posteriors=posts, q_value=q_final,
                   iteration=it, trace=trace, converged=converged, diagnostics=diagnostics,
                   latents=latents)

"""Normal/inverse-gamma algebra for one individual and a set of models.

Everything here works from cross-product matrices of the working data, so
the same code serves the normal-error fit (working data = raw data) and the
skew-t fit (working data = latent-moment reweighted pseudo data).

Shapes used throughout: ``P = p + 1`` is the width of ``[1 | S]``; a set of
``K`` models is a boolean ``(K, p)`` array; per-model coefficient vectors
and scale matrices are embedded into length ``P`` / ``(P, P)`` arrays with
zeros in excluded slots.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import digamma, gammaln

from .model import (
    GlobalParams,
    IndividualData,
    ModelError,
    ModelIndicator,
    NumericalError,
    log_prior_counts,
)

LOG_2PI = math.log(2.0 * math.pi)

EXPONENT_CONVENTIONS = ("half", "full")


def shape_increment(n: int, convention: str = "half") -> float:
    """Posterior shape increment of sigma^2 for ``n`` normal observations.

    ``"half"`` is the conjugate update ``a + n/2``; ``"full"`` uses ``a + n``.
    """
    if convention == "half":
        return 0.5 * n
    if convention == "full":
        return float(n)
    raise ModelError(f"unknown exponent convention {convention!r}")


@dataclass
class WorkingData:
    """Cross products of one individual's (possibly reweighted) data.

    ``extra`` is a non-negative constant added to the residual quadratic form
    and ``shape_inc`` the increment of the inverse-gamma shape; both are
    model independent.
    """

    n: int
    StS: np.ndarray
    StX: np.ndarray
    Sty: np.ndarray
    XtX: np.ndarray
    Xty: np.ndarray
    yty: float
    shape_inc: float
    extra: float = 0.0

    @classmethod
    def from_arrays(cls, X, S1, y, shape_inc, extra=0.0) -> "WorkingData":
        X = np.asarray(X, dtype=float)
        S1 = np.asarray(S1, dtype=float)
        y = np.asarray(y, dtype=float)
        return cls(
            n=y.shape[0],
            StS=S1.T @ S1,
            StX=S1.T @ X,
            Sty=S1.T @ y,
            XtX=X.T @ X,
            Xty=X.T @ y,
            yty=float(y @ y),
            shape_inc=float(shape_inc),
            extra=float(extra),
        )

    @classmethod
    def from_individual(cls, data: IndividualData, convention: str = "half") -> "WorkingData":
        return cls.from_arrays(data.X, data.S1, data.y, shape_increment(data.n, convention))

    @property
    def P(self) -> int:
        return self.StS.shape[0]

    def residual(self, zeta: np.ndarray) -> tuple[np.ndarray, float]:
        """``S1' r`` and ``r' r`` for ``r = y - X zeta``."""
        Str = self.Sty - self.StX @ zeta
        rtr = self.yty - 2.0 * float(zeta @ self.Xty) + float(zeta @ self.XtX @ zeta)
        return Str, max(rtr, 0.0)


@dataclass
class SufficientStats:
    """Posterior summaries of one model for one individual."""

    A: np.ndarray
    B: np.ndarray
    C: float
    Lambda: np.ndarray
    logdet_B: float

    @property
    def m_scalar(self) -> float:
        return float(self.A[0])

    @property
    def M_vec(self) -> np.ndarray:
        return self.A[1:]

    @property
    def q_scalar(self) -> float:
        return float(self.B[0, 0])

    @property
    def Q_mat(self) -> np.ndarray:
        return self.B[1:, 1:]


@dataclass
class PosteriorMoments:
    e_beta_over_sig2: np.ndarray
    e_b1sq_over_sig2: float
    e_brest_sq_over_sig2: float
    e_inv_sig2: float
    e_neg_log_sig2: float


def prior_precision(count: int, globals_: GlobalParams, slab: str = "g2") -> np.ndarray:
    v = globals_.slab_variance(slab)
    return np.concatenate([[1.0 / globals_.psi], np.full(count, 1.0 / v)])


def model_core(wd: WorkingData, zeta: np.ndarray, models: np.ndarray,
               globals_: GlobalParams, slab: str = "g2", ident=None) -> dict[str, np.ndarray]:
    """Batched posterior algebra for ``K`` models of one individual.

    Returns embedded ``A`` (K, P), ``B`` (K, P, P), and per-model ``C``,
    ``logdet_B`` and ``counts``. Models are grouped by size so each group is
    one stacked Cholesky factorization.
    """
    models = np.asarray(models, dtype=bool)
    if models.ndim == 1:
        models = models[None, :]
    K, p = models.shape
    P = p + 1
    if P != wd.P:
        raise ModelError(f"models have p={p} but working data has {wd.P - 1} effects")
    Str, rtr = wd.residual(zeta)
    counts = models.sum(axis=1)
    A = np.zeros((K, P))
    B = np.zeros((K, P, P))
    C = np.empty(K)
    logdet = np.empty(K)
    v = globals_.slab_variance(slab)
    for k in np.unique(counts):
        rows = np.flatnonzero(counts == k)
        sel = np.nonzero(models[rows])[1].reshape(len(rows), k) + 1
        idx = np.concatenate([np.zeros((len(rows), 1), dtype=int), sel], axis=1)
        G = wd.StS[idx[:, :, None], idx[:, None, :]]
        diag = np.arange(k + 1)
        G[:, diag, diag] += np.concatenate([[1.0 / globals_.psi], np.full(k, 1.0 / v)])
        try:
            L = np.linalg.cholesky(G)
        except np.linalg.LinAlgError as exc:
            raise NumericalError(
                "posterior precision not positive definite",
                individual=ident, model_size=int(k),
            ) from exc
        Linv = np.linalg.inv(L)
        h = Str[idx]
        z = np.einsum("kij,kj->ki", Linv, h)
        Ak = np.einsum("kji,kj->ki", Linv, z)
        Bk = np.einsum("kji,kjl->kil", Linv, Linv)
        C[rows] = rtr - np.einsum("ki,ki->k", z, z)
        logdet[rows] = -2.0 * np.log(np.diagonal(L, axis1=1, axis2=2)).sum(axis=1)
        A[rows[:, None], idx] = Ak
        B[rows[:, None, None], idx[:, :, None], idx[:, None, :]] = Bk
    # rounding can leave a tiny negative quadratic form for near-perfect fits
    C = np.where((C < 0) & (C > -1e-10 * max(rtr, 1.0)), 0.0, C)
    return {"A": A, "B": B, "C": C, "logdet_B": logdet, "counts": counts}


def log_marginal_from_core(core, wd: WorkingData, globals_: GlobalParams,
                           slab: str = "g2", full: bool = False, ident=None) -> np.ndarray:
    """Log marginal likelihood of each model, up to model-independent terms.

    With ``full=True`` the normalising constants of the normal-error model
    are added, giving the exact ``log p(y_i | gamma, chi)``.
    """
    counts = core["counts"]
    rate = globals_.b + 0.5 * (core["C"] + wd.extra)
    if np.any(rate <= 0):
        raise ModelError(f"b + C/2 must be positive (individual {ident!r})")
    shape = globals_.a + wd.shape_inc
    v = globals_.slab_variance(slab)
    out = (-0.5 * counts * math.log(v) + 0.5 * core["logdet_B"]
           - shape * np.log(rate) - 0.5 * math.log(globals_.psi))
    if full:
        out = out + (-0.5 * wd.n * LOG_2PI + globals_.a * math.log(globals_.b)
                     - gammaln(globals_.a) + gammaln(shape))
    return out


class Scorer:
    """Scores models of one individual at fixed global parameters."""

    def __init__(self, wd: WorkingData, globals_: GlobalParams, slab: str = "g2",
                 ident=None):
        self.wd = wd
        self.globals = globals_
        self.slab = slab
        self.ident = ident
        self.p = wd.P - 1

    def core(self, models: np.ndarray) -> dict[str, np.ndarray]:
        return model_core(self.wd, self.globals.zeta_star, models, self.globals,
                          self.slab, self.ident)

    def log_marginal(self, models: np.ndarray, full: bool = False) -> np.ndarray:
        return log_marginal_from_core(self.core(models), self.wd, self.globals,
                                      self.slab, full, self.ident)

    def log_prior(self, models: np.ndarray) -> np.ndarray:
        counts = np.asarray(models, dtype=bool).reshape(-1, self.p).sum(axis=1)
        return log_prior_counts(counts, self.globals.a1, self.globals.b1, self.p)


def normalize_log_weights(scores: np.ndarray) -> np.ndarray:
    scores = np.asarray(scores, dtype=float)
    top = np.max(scores)
    if not np.isfinite(top):
        raise NumericalError("degenerate window: no model has finite score")
    w = np.exp(scores - top)
    return w / w.sum()


def truncate_weights(weights: np.ndarray, epsilon: float) -> np.ndarray:
    """Zero weights at or below ``epsilon`` and renormalize the rest."""
    w = np.where(weights > epsilon, weights, 0.0)
    total = w.sum()
    if total <= 0:
        w = np.zeros_like(weights)
        w[np.argmax(weights)] = 1.0
        return w
    return w / total


def _as_working(data, convention: str) -> WorkingData:
    if isinstance(data, WorkingData):
        return data
    return WorkingData.from_individual(data, convention)


def sufficient_stats(data: IndividualData | WorkingData, gamma: ModelIndicator,
                     globals_: GlobalParams, slab: str = "g2",
                     convention: str = "half") -> SufficientStats:
    """Posterior mean ``A``, scale ``B`` and residual form ``C`` of one model."""
    wd = _as_working(data, convention)
    ident = getattr(data, "id", None)
    try:
        core = model_core(wd, globals_.zeta_star, gamma.as_array(), globals_, slab, ident)
    except NumericalError as exc:
        exc.context["gamma"] = gamma.bitstring()
        raise
    idx = np.concatenate([[0], gamma.indices + 1])
    return SufficientStats(
        A=core["A"][0, idx],
        B=core["B"][0][np.ix_(idx, idx)],
        C=float(core["C"][0]),
        Lambda=np.diag(prior_precision(gamma.count, globals_, slab)),
        logdet_B=float(core["logdet_B"][0]),
    )


def log_marginal(data: IndividualData | WorkingData, gamma: ModelIndicator,
                 globals_: GlobalParams, slab: str = "g2", convention: str = "half",
                 full: bool = False) -> float:
    """Log marginal likelihood of ``gamma`` (model-dependent part unless ``full``)."""
    wd = _as_working(data, convention)
    scorer = Scorer(wd, globals_, slab, getattr(data, "id", None))
    return float(scorer.log_marginal(gamma.as_array(), full=full)[0])


def posterior_moments(stats: SufficientStats, n_i: int, globals_: GlobalParams,
                      convention: str = "half", extra: float = 0.0,
                      shape_inc: float | None = None) -> PosteriorMoments:
    """Expectations under ``sigma^2 ~ IG(shape, b + C/2)``, ``beta ~ N(A, sigma^2 B)``."""
    if shape_inc is None:
        shape_inc = shape_increment(n_i, convention)
    shape = globals_.a + shape_inc
    rate = globals_.b + 0.5 * (stats.C + extra)
    e_inv = shape / rate
    return PosteriorMoments(
        e_beta_over_sig2=e_inv * stats.A,
        e_b1sq_over_sig2=stats.q_scalar + e_inv * stats.m_scalar ** 2,
        e_brest_sq_over_sig2=float(np.trace(stats.Q_mat) + e_inv * stats.M_vec @ stats.M_vec),
        e_inv_sig2=e_inv,
        e_neg_log_sig2=float(digamma(shape) - math.log(rate)),
    )


@dataclass
class WindowPosterior:
    """E-step output for one individual: per-model posteriors and weights."""

    models: np.ndarray
    counts: np.ndarray
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    logdet_B: np.ndarray
    shape: float
    rate: np.ndarray
    log_marginal: np.ndarray
    log_prior: np.ndarray
    weights: np.ndarray

    @property
    def e_inv(self) -> np.ndarray:
        return self.shape / self.rate

    @property
    def e_log_sig2(self) -> np.ndarray:
        return np.log(self.rate) - digamma(self.shape)

    @property
    def e_b1sq(self) -> np.ndarray:
        return self.B[:, 0, 0] + self.e_inv * self.A[:, 0] ** 2

    @property
    def e_brest(self) -> np.ndarray:
        tr = np.trace(self.B, axis1=1, axis2=2) - self.B[:, 0, 0]
        return tr + self.e_inv * np.einsum("ki,ki->k", self.A[:, 1:], self.A[:, 1:])

    def beta_mean(self, weights: np.ndarray | None = None) -> np.ndarray:
        """Model-averaged posterior mean of ``[intercept, beta_1..beta_p]``."""
        w = self.weights if weights is None else weights
        return w @ self.A

    def inclusion(self) -> np.ndarray:
        return self.weights @ self.models.astype(float)


def window_posterior(scorer: Scorer, models: np.ndarray,
                     score_weights: bool = True) -> WindowPosterior:
    core = scorer.core(models)
    lm = log_marginal_from_core(core, scorer.wd, scorer.globals, scorer.slab,
                                ident=scorer.ident)
    lp = log_prior_counts(core["counts"], scorer.globals.a1, scorer.globals.b1, scorer.p)
    g = scorer.globals
    return WindowPosterior(
        models=np.asarray(models, dtype=bool),
        counts=core["counts"],
        A=core["A"],
        B=core["B"],
        C=core["C"],
        logdet_B=core["logdet_B"],
        shape=g.a + scorer.wd.shape_inc,
        rate=g.b + 0.5 * (core["C"] + scorer.wd.extra),
        log_marginal=lm,
        log_prior=lp,
        weights=normalize_log_weights(lm + lp),
    )

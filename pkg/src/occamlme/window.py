"""Occam's window: per-individual sets of K candidate models and their search."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from itertools import combinations
from math import comb

import numpy as np

from .conjugate import Scorer, normalize_log_weights
from .model import ModelError, ModelIndicator

log = logging.getLogger(__name__)


@dataclass
class OccamWindow:
    """K distinct models with their scores.

    ``log_marginals`` and ``log_priors`` are cached at the global parameters
    in force when they were last refreshed; ``dirty`` marks them stale.
    """

    models: list[ModelIndicator]
    log_marginals: np.ndarray
    log_priors: np.ndarray
    score_includes_prior: bool = True
    stale_count: int = 0
    dirty: bool = False
    _keys: set = field(default_factory=set, repr=False)

    def __post_init__(self):
        self.log_marginals = np.asarray(self.log_marginals, dtype=float)
        self.log_priors = np.asarray(self.log_priors, dtype=float)
        self._keys = {m.key for m in self.models}
        if len(self._keys) != len(self.models):
            raise ModelError("window models must be distinct")

    @property
    def K(self) -> int:
        return len(self.models)

    @property
    def scores(self) -> np.ndarray:
        if self.score_includes_prior:
            return self.log_marginals + self.log_priors
        return self.log_marginals

    @property
    def weights(self) -> np.ndarray:
        return normalize_log_weights(self.log_marginals + self.log_priors)

    @property
    def min_log_marginal(self) -> float:
        return float(np.min(self.scores))

    def argmin(self) -> int:
        """Index of the model to evict.

        Ties on the minimal score go to the largest model, then the lowest
        index.
        """
        s = self.scores
        ties = np.flatnonzero(s == s.min())
        if len(ties) == 1:
            return int(ties[0])
        counts = np.array([self.models[t].count for t in ties])
        return int(ties[np.flatnonzero(counts == counts.max())[0]])

    def contains(self, model: ModelIndicator) -> bool:
        return model.key in self._keys

    def model_matrix(self) -> np.ndarray:
        return np.array([m.gamma for m in self.models], dtype=bool).reshape(self.K, -1)

    def replace(self, index: int, model: ModelIndicator, log_marginal: float,
                log_prior: float) -> None:
        self._keys.discard(self.models[index].key)
        self.models[index] = model
        self._keys.add(model.key)
        self.log_marginals[index] = log_marginal
        self.log_priors[index] = log_prior

    def refresh(self, scorer: Scorer) -> None:
        """Recompute cached scores at the scorer's global parameters."""
        M = self.model_matrix()
        self.log_marginals = scorer.log_marginal(M)
        self.log_priors = scorer.log_prior(M)
        self.dirty = False

    def rows(self) -> list[tuple[str, float, float]]:
        w = self.weights
        return [(m.bitstring(), float(lm), float(wk))
                for m, lm, wk in zip(self.models, self.log_marginals, w)]


def smallest_level(p: int, K: int) -> int:
    """Smallest ``p*`` with ``sum_{k=1}^{p*} C(p, k) >= K`` (capped at ``p``)."""
    total = 0
    for level in range(1, p + 1):
        total += comb(p, level)
        if total >= K:
            return level
    return p


def _enumerate_upto(p: int, level: int) -> np.ndarray:
    rows = [np.zeros(p, dtype=bool)]
    for k in range(1, level + 1):
        for idx in combinations(range(p), k):
            row = np.zeros(p, dtype=bool)
            row[list(idx)] = True
            rows.append(row)
    return np.array(rows, dtype=bool)


def initialize(scorer: Scorer, K: int, score_includes_prior: bool = True) -> OccamWindow:
    """Fill a window with the K best models of size at most ``p*``."""
    p = scorer.p
    if K < 1:
        raise ModelError("K must be at least 1")
    if K > 2 ** p:
        raise ModelError(f"K={K} exceeds the 2^{p} available models")
    level = smallest_level(p, K)
    cand = _enumerate_upto(p, level)
    while cand.shape[0] < K and level < p:
        level += 1
        cand = _enumerate_upto(p, level)
    lm = scorer.log_marginal(cand)
    lp = scorer.log_prior(cand)
    score = lm + lp if score_includes_prior else lm
    # stable sort on (-score, size) keeps sparser models on ties
    order = np.lexsort((cand.sum(axis=1), -score))[:K]
    models = [ModelIndicator(tuple(row)) for row in cand[order]]
    return OccamWindow(models, lm[order], lp[order], score_includes_prior)


def full_window(scorer: Scorer, score_includes_prior: bool = True) -> OccamWindow:
    """Window holding the whole model space (exact E-step)."""
    cand = _enumerate_upto(scorer.p, scorer.p)
    models = [ModelIndicator(tuple(row)) for row in cand]
    return OccamWindow(models, scorer.log_marginal(cand), scorer.log_prior(cand),
                       score_includes_prior)


def propose_flip(window: OccamWindow, scorer: Scorer, rng: np.random.Generator) -> bool:
    """One greedy add/drop proposal; returns whether the window changed."""
    k = int(rng.integers(window.K))
    j = int(rng.integers(scorer.p))
    proposal = window.models[k].flip(j)
    if window.contains(proposal):
        window.stale_count += 1
        return False
    row = proposal.as_array()[None, :]
    lm = float(scorer.log_marginal(row)[0])
    lp = float(scorer.log_prior(row)[0])
    score = lm + lp if window.score_includes_prior else lm
    if score > window.min_log_marginal:
        window.replace(window.argmin(), proposal, lm, lp)
        window.stale_count = 0
        return True
    window.stale_count += 1
    return False


def allocate_updates(stale_counts, L: int, rng: np.random.Generator) -> np.ndarray:
    """Split ``L`` search updates across individuals by an exponential race."""
    t = np.asarray(stale_counts, dtype=float)
    if L < 0:
        raise ModelError("L must be non-negative")
    if L == 0 or t.size == 0:
        return np.zeros(t.size, dtype=int)
    r = rng.exponential(scale=1.0 / (1.0 + t))
    return rng.multinomial(L, r / r.sum())


def search(window: OccamWindow, scorer: Scorer, n_updates: int,
           rng: np.random.Generator) -> int:
    """Run ``n_updates`` proposals; returns the number of replacements."""
    accepted = 0
    for _ in range(n_updates):
        accepted += propose_flip(window, scorer, rng)
    return accepted

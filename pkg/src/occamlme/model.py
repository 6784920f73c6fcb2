"""Domain types, priors and dataset validation for the sparse mixed model.

Each individual ``i`` is modelled as::

    y_i = X_i zeta* + S_i^gamma beta_i + e_i

where the first column of ``X_i`` is all ones (housing the population
intercept) and ``S_i^gamma`` is ``[1 | selected columns of S_i]``: the
individual intercept is always present, the ``p`` candidate random effects
are switched on and off by the indicator vector ``gamma_i``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Any, Hashable, Sequence

import numpy as np
from scipy.special import gammaln


class ModelError(ValueError):
    """Raised when inputs violate a domain constraint."""


class DatasetError(ModelError):
    """Raised by :func:`validate_dataset`; carries a per-individual report."""

    def __init__(self, message: str, report: list[dict[str, Any]] | None = None):
        super().__init__(message)
        self.report = report or []


class NumericalError(ArithmeticError):
    """A factorization or special-function evaluation failed."""

    def __init__(self, message: str, **context: Any):
        super().__init__(message)
        self.context = context


@dataclass(frozen=True, eq=False)
class IndividualData:
    """Response and design matrices of one individual."""

    id: Hashable
    y: np.ndarray
    X: np.ndarray
    S: np.ndarray

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float).reshape(-1)
        X = np.asarray(self.X, dtype=float)
        S = np.asarray(self.S, dtype=float)
        if X.ndim == 1:
            X = X.reshape(-1, 1)
        if S.ndim == 1:
            S = S.reshape(-1, 1)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "S", S)

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def q(self) -> int:
        return self.X.shape[1]

    @property
    def p(self) -> int:
        return self.S.shape[1]

    @property
    def S1(self) -> np.ndarray:
        """Random-effect design with the individual intercept column prepended."""
        return np.column_stack([np.ones(self.n), self.S])


@dataclass
class GlobalParams:
    """Population-level parameters.

    ``g2`` is the slab variance multiplier (coefficients of included effects
    are ``N(0, g2 * sigma^2)`` under the default convention). ``c`` and ``f``
    are only used by the skew-t fit; ``f = inf`` marks the normal limit.
    """

    zeta_star: np.ndarray
    psi: float = 1.0
    g2: float = 1.0
    a: float = 2.0
    b: float = 1.0
    a1: float = 1.0
    b1: float = 1.0
    c: float = 0.0
    f: float = math.inf

    def __post_init__(self):
        self.zeta_star = np.asarray(self.zeta_star, dtype=float).reshape(-1)
        for name in ("psi", "g2", "a", "b", "a1", "b1", "f"):
            value = getattr(self, name)
            if not (value > 0):
                raise ModelError(f"{name} must be positive, got {value!r}")
        if not math.isfinite(self.c):
            raise ModelError(f"c must be finite, got {self.c!r}")

    def copy(self, **changes) -> "GlobalParams":
        out = replace(self, **changes)
        if "zeta_star" not in changes:
            out.zeta_star = self.zeta_star.copy()
        return out

    def slab_variance(self, convention: str = "g2") -> float:
        """Prior variance multiplier of included effects.

        ``"g2"`` treats ``g2`` itself as the multiplier (prior ``N(0, g^2
        sigma^2)``); ``"g"`` puts ``g = sqrt(g2)`` on the precision diagonal.
        """
        if convention == "g2":
            return self.g2
        if convention == "g":
            return math.sqrt(self.g2)
        raise ModelError(f"unknown slab convention {convention!r}")

    @staticmethod
    def g2_from_slab_variance(v: float, convention: str = "g2") -> float:
        return v if convention == "g2" else v * v

    def to_dict(self) -> dict[str, Any]:
        return {
            "zeta_star": [float(z) for z in self.zeta_star],
            "psi": float(self.psi),
            "g2": float(self.g2),
            "a": float(self.a),
            "b": float(self.b),
            "a1": float(self.a1),
            "b1": float(self.b1),
            "c": float(self.c),
            "f": float(self.f) if math.isfinite(self.f) else None,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "GlobalParams":
        f = d.get("f")
        return cls(
            zeta_star=np.asarray(d["zeta_star"], dtype=float),
            psi=d["psi"], g2=d["g2"], a=d["a"], b=d["b"], a1=d["a1"], b1=d["b1"],
            c=d.get("c", 0.0), f=math.inf if f is None else f,
        )


@dataclass(frozen=True)
class ModelIndicator:
    """Inclusion vector over the ``p`` candidate random effects."""

    gamma: tuple[bool, ...]
    key: int = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        bits = tuple(bool(g) for g in self.gamma)
        object.__setattr__(self, "gamma", bits)
        key = 0
        for j, g in enumerate(bits):
            if g:
                key |= 1 << j
        object.__setattr__(self, "key", key)

    def __hash__(self) -> int:
        return hash((len(self.gamma), self.key))

    def __eq__(self, other) -> bool:
        if not isinstance(other, ModelIndicator):
            return NotImplemented
        return self.gamma == other.gamma

    @property
    def p(self) -> int:
        return len(self.gamma)

    @property
    def count(self) -> int:
        return sum(self.gamma)

    @property
    def indices(self) -> np.ndarray:
        return np.flatnonzero(np.asarray(self.gamma, dtype=bool))

    def as_array(self) -> np.ndarray:
        return np.asarray(self.gamma, dtype=bool)

    def flip(self, j: int) -> "ModelIndicator":
        bits = list(self.gamma)
        bits[j] = not bits[j]
        return ModelIndicator(tuple(bits))

    def bitstring(self) -> str:
        return "".join("1" if g else "0" for g in self.gamma)

    @classmethod
    def from_bitstring(cls, s: str) -> "ModelIndicator":
        if any(ch not in "01" for ch in s):
            raise ModelError(f"not a bit string: {s!r}")
        return cls(tuple(ch == "1" for ch in s))

    @classmethod
    def from_indices(cls, p: int, idx: Sequence[int]) -> "ModelIndicator":
        bits = [False] * p
        for j in idx:
            bits[j] = True
        return cls(tuple(bits))

    @classmethod
    def empty(cls, p: int) -> "ModelIndicator":
        return cls((False,) * p)


def log_prior_gamma(gamma: ModelIndicator | int, a1: float, b1: float, p: int) -> float:
    """Log beta-binomial prior mass of one inclusion vector.

    ``gamma`` may also be given directly as its number of included effects,
    since the prior depends on nothing else.
    """
    if not (a1 > 0 and b1 > 0):
        raise ModelError(f"a1 and b1 must be positive, got {a1!r}, {b1!r}")
    k = gamma.count if isinstance(gamma, ModelIndicator) else int(gamma)
    if not 0 <= k <= p:
        raise ModelError(f"model size {k} outside [0, {p}]")
    return float(log_prior_table(a1, b1, p)[k])


def _log_rising(x: float, p: int) -> np.ndarray:
    """``log x(x+1)...(x+k-1)`` for k = 0..p."""
    return np.concatenate([[0.0], np.cumsum(np.log(x + np.arange(p)))])


def log_prior_table(a1: float, b1: float, p: int) -> np.ndarray:
    """Log prior mass of one model of each size k = 0..p.

    Written as a ratio of rising factorials rather than log-gamma
    differences, which cancel badly once a1 or b1 is large.
    """
    la, lb, lab = _log_rising(a1, p), _log_rising(b1, p), _log_rising(a1 + b1, p)
    return la + lb[::-1] - lab[p]


def log_prior_table_grad(a1: float, b1: float, p: int) -> tuple[np.ndarray, np.ndarray]:
    """Derivatives of :func:`log_prior_table` in ``a1`` and ``b1``."""
    def rising_grad(x):
        return np.concatenate([[0.0], np.cumsum(1.0 / (x + np.arange(p)))])
    ga, gb, gab = rising_grad(a1), rising_grad(b1), rising_grad(a1 + b1)
    return ga - gab[p], gb[::-1] - gab[p]


def log_prior_counts(counts: np.ndarray, a1: float, b1: float, p: int) -> np.ndarray:
    """Vectorised :func:`log_prior_gamma` over an array of model sizes."""
    counts = np.asarray(counts)
    if np.issubdtype(counts.dtype, np.integer) or np.all(counts == np.round(counts)):
        return log_prior_table(a1, b1, p)[counts.astype(int)]
    return (
        gammaln(a1 + b1) - gammaln(a1) - gammaln(b1)
        + gammaln(counts + a1) + gammaln(p - counts + b1) - gammaln(p + a1 + b1)
    )


def validate_dataset(data: Sequence[IndividualData]) -> None:
    """Check dimensions and finiteness across individuals.

    Raises :class:`DatasetError` whose ``report`` lists one entry per
    offending individual.
    """
    if len(data) == 0:
        raise DatasetError("no individuals")
    q, p = data[0].q, data[0].p
    report = []
    seen = set()
    for ind in data:
        problems = []
        if ind.id in seen:
            problems.append("duplicate id")
        seen.add(ind.id)
        if ind.n < 1:
            problems.append("no observations")
        if ind.X.shape[0] != ind.n:
            problems.append(f"X has {ind.X.shape[0]} rows, y has {ind.n}")
        if ind.S.shape[0] != ind.n:
            problems.append(f"S has {ind.S.shape[0]} rows, y has {ind.n}")
        if ind.q != q:
            problems.append(f"X has {ind.q} columns, expected {q}")
        if ind.p != p:
            problems.append(f"S has {ind.p} columns, expected {p}")
        for name, arr in (("y", ind.y), ("X", ind.X), ("S", ind.S)):
            if not np.all(np.isfinite(arr)):
                problems.append(f"non-finite entries in {name}")
        if problems:
            report.append({"id": ind.id, "errors": problems})
    if report:
        ids = ", ".join(str(r["id"]) for r in report)
        raise DatasetError(f"invalid individuals: {ids}", report)

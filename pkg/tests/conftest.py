import numpy as np
import pytest

from occamlme.model import IndividualData

# acceptance outcomes, printed once at the end of the session
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def make_dataset(seed, M=6, p=4, q=2, n_range=(5, 30), sigma=0.5, h=0.4, zeta=None):
    """Small normal-error dataset with sparse individual effects."""
    rng = np.random.default_rng(seed)
    zeta = np.linspace(0.5, -0.5, q) if zeta is None else np.asarray(zeta)
    data = []
    for i in range(M):
        n = int(rng.integers(n_range[0], n_range[1] + 1))
        X = np.column_stack([np.ones(n), rng.normal(size=(n, q - 1))])
        S = rng.normal(size=(n, p))
        beta = rng.normal(size=p) * (rng.random(p) < h)
        y = X @ zeta + rng.normal(scale=0.3) + S @ beta + rng.normal(scale=sigma, size=n)
        data.append(IndividualData(i, y, X, S))
    return data


@pytest.fixture
def dataset():
    return make_dataset(0)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")

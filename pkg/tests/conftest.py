import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from exomdp.core import ExoMdpModel, FactorSet  # noqa: E402

_ACCEPTANCE = []


@pytest.fixture
def acceptance():
    """Record one pass/fail line per acceptance criterion; printed at session end."""

    def record(criterion, passed, detail):
        line = f"[criterion {criterion:>2}] {'PASS' if passed else 'FAIL'}  {detail}"
        _ACCEPTANCE.append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE, key=lambda s: int(s.split("]")[0].split()[-1])):
            terminalreporter.write_line(line)


def random_model(rng, d, k, S, A, H, m=None, alpha=1.0):
    """Unconstrained random model (no reachability certificate), for oracle tests."""
    m = m if m is not None else int(rng.integers(1, k + 1))
    i_star = FactorSet(rng.choice(d, size=m, replace=False))
    n_en, n_ex = S**m, S ** (d - m)
    return ExoMdpModel(
        d, k, S, A, H, i_star,
        rng.dirichlet(np.full(n_en, alpha), size=(n_en, A)),
        rng.dirichlet(np.full(n_ex, alpha), size=n_ex),
        rng.random((n_en, A)),
        rng.dirichlet(np.ones(n_en)),
        rng.dirichlet(np.ones(n_ex)),
    )


def deterministic_control_model(d, S=2, A=2, H=2):
    """Factor 0 is set to the action taken (mod S); other factors keep their value."""
    n_ex = S ** (d - 1)
    t_en = np.zeros((S, A, S))
    for e in range(S):
        for a in range(A):
            t_en[e, a, a % S] = 1.0
    return ExoMdpModel(
        d, 1, S, A, H, FactorSet([0]), t_en, np.eye(n_ex), np.zeros((S, A)),
        np.full(S, 1.0 / S), np.full(n_ex, 1.0 / n_ex),
    )

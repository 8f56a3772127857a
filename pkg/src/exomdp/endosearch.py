"""Error-tolerant factor searches.

Both searches scan factor sets by cardinality (lexicographic within a size)
and accept the first set whose shortfall against the global optimum is
within a tolerance that shrinks as the set grows. The shrinking tolerance
is what biases the search toward small, hence endogenous, sets.
"""
from __future__ import annotations

from dataclasses import dataclass, field

from .core import FactorSet, subsets, subsets_of_size, submap


class SearchFailed(RuntimeError):
    """No candidate satisfied the acceptance condition."""

    def __init__(self, message, diagnostics):
        super().__init__(message)
        self.diagnostics = diagnostics


@dataclass(frozen=True)
class EpsLadder:
    k: int
    eps: float
    multiplier: float = 1.0

    def __call__(self, size):
        if self.k == 0:
            return self.multiplier * self.eps
        return (1 + 1 / self.k) ** (self.k - size) * self.multiplier * self.eps


def ladder_gaps(k, eps, multiplier=1.0):
    """(k1, k2, eps_k2 - eps_k1 - eps / 3k) for every 1 <= k2 <= k1 - 1 <= k."""
    lad = EpsLadder(k, eps, multiplier)
    out = []
    for k1 in range(2, k + 2):
        for k2 in range(1, k1):
            out.append((k1, k2, lad(k2) - lad(k1) - eps / (3 * k)))
    return out


@dataclass
class EpoResult:
    policy: object
    factor_set: FactorSet
    value: float
    global_max: float
    slack: float


def endo_policy_optimization(best, d, k, eps) -> EpoResult:
    """``best(K)`` returns (policy, value): the maximum over one-step policies on K.

    Returns the maximizer on the first K whose maximum is within eps_|K| of
    the maximum over every K with at most k factors.
    """
    ladder = EpsLadder(k, eps, 1.0)
    results = {K: best(K) for K in subsets(d, k)}
    top = max(v for _, v in results.values())
    for K, (policy, value) in results.items():
        slack = value + ladder(len(K)) - top
        if slack >= 0:
            return EpoResult(policy, K, value, top, slack)
    worst = min(results, key=lambda K: results[K][1] + ladder(len(K)) - top)
    raise SearchFailed(
        "policy optimization found no acceptable factor set",
        {"globalMax": top, "values": {str(list(K)): v for K, (_, v) in results.items()}, "worst": list(worst)},
    )


@dataclass
class SelectionResult:
    factor_set: FactorSet
    policies: tuple
    level: int
    slack: float
    scanned: list = field(default_factory=list)


def endo_factor_selection(gamma, i_prev, dhat, d, k, eps, S) -> SelectionResult:
    """Pick the first I containing ``i_prev`` whose policies gamma[J & I] cover every target.

    ``gamma[J]`` lists one-step policies indexed by packed s_h[J].
    ``dhat.maximum(J)`` gives, per packed y, the maximum estimate over all
    policies; ``dhat.value(J, y, policy)`` the estimate for one policy.
    """
    i_prev = FactorSet(i_prev)
    ladder = EpsLadder(k, eps, 5.0)
    targets = subsets(d, k, i_prev)
    scanned = []
    worst_overall = None
    for size in range(len(i_prev), k + 1):
        tol = ladder(size)
        for I in subsets_of_size(d, size, i_prev):
            slack, where = float("inf"), None
            for J in targets:
                JI = J & I
                to_sub = submap(J, JI, S)
                maxima = dhat.maximum(J)
                for y in range(S ** len(J)):
                    gap = dhat.value(J, y, gamma[JI][to_sub[y]]) + tol - maxima[y]
                    if gap < slack:
                        slack, where = gap, (list(J), y)
            scanned.append({"factorSet": list(I), "slack": slack, "worst": where})
            if slack >= 0:
                return SelectionResult(I, tuple(gamma[I]), size, slack, scanned)
            if worst_overall is None or slack > worst_overall[0]:
                worst_overall = (slack, list(I), where)
    raise SearchFailed(
        "factor selection found no covering factor set",
        {"scanned": scanned, "closest": worst_overall},
    )

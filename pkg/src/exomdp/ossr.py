"""Sampled backward construction of endogenous policy covers, one layer at a time."""
from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np

from .core import FactorSet, NonstationaryPolicy, OneStepPolicy, PolicyCover, subsets, submap
from .endosearch import endo_factor_selection, endo_policy_optimization
from .estimator import build_weight_tensor, estimate_occupancy, implicit_argmax_all
from .sampler import collect_ossr_dataset

DEFAULT_N_CAP = 5 * 10**7


class BudgetExceeded(RuntimeError):
    pass


def n_cap() -> int:
    return int(os.environ.get("EXOMDP_N_CAP", DEFAULT_N_CAP))


@dataclass
class LearnConfig:
    """Budget knobs shared by the cover and policy learners.

    ``c_const`` scales the theoretical per-step episode count; ``n_override``
    replaces it outright. ``log`` receives one dict per backward step.
    """

    c_const: float = 4.0
    n_override: int = None
    cap: int = None
    threads: int = 1
    log: object = None

    def budget(self, d, k, S, A, H, eps, delta) -> int:
        n = self.n_override if self.n_override is not None else layer_sample_size(d, k, S, A, H, eps, delta, self.c_const)
        limit = self.cap if self.cap is not None else n_cap()
        if n > limit:
            raise BudgetExceeded(f"per-step episode count {n} exceeds cap {limit}")
        return n

    def emit(self, record):
        if self.log is not None:
            self.log(record)


def layer_sample_size(d, k, S, A, H, eps, delta, C=4.0) -> int:
    """Episodes per backward step: C A S^4k H^2 k^3 log(dSAH/delta) / eps^2."""
    k = max(k, 1)
    return math.ceil(C * A * S ** (4 * k) * H**2 * k**3 * math.log(d * S * A * H / delta) / eps**2)


def step_tolerance(eps, S, k, H):
    return eps / (2 * S**k * H)


class SampledOccupancy:
    """Occupancy estimates from one dataset, with tensors built on demand."""

    def __init__(self, ds, S, i_prev):
        self.ds, self.S, self.i_prev = ds, S, FactorSet(i_prev)
        self._tensors = {}
        self._maxima = {}

    def tensor(self, acts_on, targets):
        key = (FactorSet(acts_on), FactorSet(targets))
        if key not in self._tensors:
            self._tensors[key] = build_weight_tensor(self.ds, key[0], key[1], self.S)
        return self._tensors[key]

    def rollout_index(self, J):
        """Rollout policy index for each packed s_h[J]: the policy indexed by y[i_prev]."""
        return submap(FactorSet(J), self.i_prev, self.S)

    def set_maximum(self, J, values):
        self._maxima[FactorSet(J)] = values

    def maximum(self, J):
        return self._maxima[FactorSet(J)]

    def value(self, J, y, policy):
        w = self.tensor(policy.acts_on, J)
        return estimate_occupancy(w, policy, int(self.rollout_index(J)[y]), y)


def optimize_targets(dhat, d, k, eps0, S):
    """For every target J containing i_prev and every value y: the policy from
    endogenous policy optimization and the global maximum estimate."""
    gamma, chosen = {}, {}
    candidates = subsets(d, k)
    for J in subsets(d, k, dhat.i_prev):
        psi = dhat.rollout_index(J)
        tables, values = {}, {}
        for K in candidates:
            tables[K], values[K] = implicit_argmax_all(dhat.tensor(K, J), K, psi)
        ny = S ** len(J)
        policies, maxima = [], []
        for y in range(ny):
            res = endo_policy_optimization(
                lambda K: (OneStepPolicy(K, tables[K][y], S), float(values[K][y])), d, k, eps0
            )
            policies.append(res.policy)
            maxima.append(res.global_max)
            chosen.setdefault(res.factor_set, 0)
            chosen[res.factor_set] += 1
        gamma[J] = policies
        dhat.set_maximum(J, maxima)
    return gamma, chosen


def compose_cover(t, h, chosen, policies, next_cover, S):
    to_prev = submap(chosen, next_cover.factor_set, S)
    out = [
        NonstationaryPolicy(t, (policies[z],) + next_cover.policies[to_prev[z]].steps)
        for z in range(S ** len(chosen))
    ]
    return PolicyCover(t, h, chosen, out)


def ossr_h(sampler, covers, h, eps, delta, config=None, rng=None):
    """Endogenous approximate cover for layer h.

    ``covers[t]`` is the cover for layer t (t = 1..h-1); its uniform mixture
    is the roll-in for backward step t. Returns (cover, trace).
    """
    config = config or LearnConfig()
    rng = rng if rng is not None else np.random.default_rng()
    d, k, S, A, H = sampler.d, sampler.k, sampler.S, sampler.A, sampler.H
    if h == 1:
        return PolicyCover.trivial(1), []
    if not 2 <= h <= H:
        raise ValueError(f"h={h} outside 2..{H}")
    eps0 = step_tolerance(eps, S, k, H)
    n = config.budget(d, k, S, A, H, eps, delta)
    cover = PolicyCover.trivial(h)
    trace = []
    for t in range(h - 1, 0, -1):
        ds = collect_ossr_dataset(sampler, covers[t].mixture(), cover, t, h, n, rng, threads=config.threads)
        dhat = SampledOccupancy(ds, S, cover.factor_set)
        gamma, chosen = optimize_targets(dhat, d, k, eps0, S)
        sel = endo_factor_selection(gamma, cover.factor_set, dhat, d, k, eps0, S)
        cover = compose_cover(t, h, sel.factor_set, sel.policies, cover, S)
        record = {
            "phase": "ossr",
            "h": h,
            "t": t,
            "n": n,
            "factorSet": list(sel.factor_set),
            "selectionSlack": sel.slack,
            "optimizationSets": {str(list(K)): c for K, c in sorted(chosen.items())},
        }
        trace.append(record)
        config.emit(record)
    return cover, trace

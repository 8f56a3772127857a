"""End-to-end learning, the subset-enumeration baseline and exact comparators."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import FactorSet, NonstationaryPolicy, OneStepPolicy, PolicyCover, all_values, subsets
from .ossr import LearnConfig, ossr_h
from .psdp import exo_psdp
from .sampler import collect_uniform, roll_episodes


@dataclass
class RunResult:
    policy: NonstationaryPolicy
    covers: dict
    phase_episodes: dict
    trace: list = field(default_factory=list)

    @property
    def total_episodes(self):
        return sum(self.phase_episodes.values())


def exo_rl(sampler, eps, delta, eta, config=None, rng=None) -> RunResult:
    """Covers for every layer at precision eta/2, then backward policy search at precision eps."""
    for name, v in (("eps", eps), ("delta", delta), ("eta", eta)):
        if not 0 < v < 1:
            raise ValueError(f"{name} must lie in (0, 1), got {v}")
    config = config or LearnConfig()
    rng = rng if rng is not None else np.random.default_rng()
    covers = {1: PolicyCover.trivial(1)}
    phases, trace = {}, []
    for h in range(2, sampler.H + 1):
        before = sampler.episodes
        covers[h], steps = ossr_h(sampler, covers, h, eta / 2, delta, config, rng)
        phases[f"ossr_h{h}"] = sampler.episodes - before
        trace.extend(steps)
    before = sampler.episodes
    policy, steps = exo_psdp(sampler, covers, eps, delta, config, rng)
    phases["psdp"] = sampler.episodes - before
    trace.extend(steps)
    return RunResult(policy, covers, phases, trace)


@dataclass
class BaselineResult:
    policy: NonstationaryPolicy
    candidates: list
    estimates: list
    episodes: int


def _empirical_vi(states, actions, rewards, I, S, A):
    """Finite-horizon value iteration on s[I] with tables estimated per step."""
    n, H, _ = states.shape
    m = S ** len(I)
    weights = S ** np.arange(len(I) - 1, -1, -1, dtype=np.int64)
    x = states[:, :, list(I)] @ weights if I else np.zeros((n, H), dtype=np.int64)
    V = np.zeros(m)
    steps = []
    for t in range(H - 1, -1, -1):
        cell = x[:, t] * A + actions[:, t]
        visits = np.bincount(cell, minlength=m * A).reshape(m, A)
        target = rewards[:, t].copy()
        if t < H - 1:
            target += V[x[:, t + 1]]
        total = np.bincount(cell, weights=target, minlength=m * A).reshape(m, A)
        Q = np.where(visits > 0, total / np.maximum(visits, 1), 0.0)
        table = np.argmax(Q, axis=1)
        V = Q.max(axis=1)
        steps.append(OneStepPolicy(I, table, S))
    return NonstationaryPolicy(1, tuple(reversed(steps)))


def baseline_subset_enumeration(sampler, eps, budget, eval_episodes=None, rng=None) -> BaselineResult:
    """Treat each candidate factor set as the state, learn on it, keep the best by Monte Carlo.

    ``budget`` uniform-policy episodes are collected per candidate.
    """
    rng = rng if rng is not None else np.random.default_rng()
    d, k, S, A, H = sampler.d, sampler.k, sampler.S, sampler.A, sampler.H
    if eval_episodes is None:
        # Hoeffding: every candidate's estimate within eps/2 with probability 0.95
        eval_episodes = math.ceil(2 * H**2 * math.log(2 * len(subsets(d, k)) / 0.05) / eps**2)
    start = sampler.episodes
    candidates, policies, estimates = subsets(d, k), [], []
    for I in candidates:
        states, actions, rewards = collect_uniform(sampler, budget, rng)
        policies.append(_empirical_vi(states, actions, rewards, I, S, A))
    for policy in policies:
        _, _, rewards, _ = roll_episodes(sampler, policy, eval_episodes, rng)
        estimates.append(float(rewards.sum(axis=1).mean()))
    best = int(np.argmax(estimates))
    return BaselineResult(policies[best], candidates, estimates, sampler.episodes - start)


def full_joint_value_iteration(model):
    """Optimal value and a deterministic optimal policy on all factors, by joint-state DP."""
    full = FactorSet(range(model.d))
    packed = model.restriction_index(full)
    V = np.zeros((model.n_en, model.n_ex))
    steps = []
    for _ in range(model.H):
        W = model.ex_backward(V)
        Q = np.stack([model.r_en[:, a, None] + model.t_en[:, a, :] @ W for a in range(model.A)], axis=-1)
        best = np.argmax(Q, axis=-1).ravel()
        V = Q.max(axis=-1)
        table = np.zeros(model.S**model.d, dtype=np.int64)
        table[packed] = best
        steps.append(OneStepPolicy(full, table, model.S))
    value = float(model.d1_en @ V @ model.d1_ex)
    return value, NonstationaryPolicy(1, tuple(reversed(steps)))


def endogenous_value_iteration(model):
    """Optimal value over endogenous policies, by DP on the endogenous chain."""
    V = np.zeros(model.n_en)
    for _ in range(model.H):
        V = np.max(model.r_en + np.einsum("eaf,f->ea", model.t_en, V), axis=1)
    return float(model.d1_en @ V)


def behavioral_endogeneity(model, policy):
    """True when changing any exogenous coordinate of any state never changes an action.

    Returns (verdict, counterexample or None).
    """
    states = all_values(model.d, model.S)
    for t in range(policy.start, policy.end + 1):
        step = policy.at(t)
        base = step.act_batch(states)
        for i in model.exo:
            for v in range(model.S):
                moved = states.copy()
                moved[:, i] = v
                diff = np.flatnonzero(step.act_batch(moved) != base)
                if diff.size:
                    j = diff[0]
                    return False, {"t": t, "state": states[j].tolist(), "factor": int(i), "value": v}
    return True, None

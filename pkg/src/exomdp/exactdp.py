"""Exact occupancy, value and one-step maximization by dynamic programming
over the full joint state, plus the exact cover construction built on them.

Joint distributions are held as (n_en, n_ex) arrays so the factorized
transition can be applied as two matrix products.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import (
    FactorSet,
    NonstationaryPolicy,
    OneStepPolicy,
    PolicyCover,
    as_mixture,
    subsets,
    submap,
)

EXACT_TOL = 1e-9


class InfeasibleModel(RuntimeError):
    """An exact search found no satisfying factor set; the model does not factorize."""


@dataclass(frozen=True)
class OccupancyTable:
    target: FactorSet
    h: int
    values: np.ndarray


def advance(model, P, actions):
    """Push a joint distribution one step forward under per-state actions."""
    out = np.zeros_like(P)
    for a in range(model.A):
        mask = actions == a
        if not mask.any():
            continue
        M = np.where(mask, P, 0.0)
        out += model.t_en[:, a, :].T @ model.ex_forward(M)
    return out


def initial_distribution(model):
    return np.outer(model.d1_en, model.d1_ex)


def rollin_actions(model, policy, t):
    return policy.at(t).act_joint(model).reshape(model.n_en, model.n_ex)


def state_distribution(model, policy, h):
    """Joint distribution of s_h, shape (n_en, n_ex)."""
    if h == 1:
        return initial_distribution(model)
    mix = as_mixture(policy)
    total = np.zeros((model.n_en, model.n_ex))
    for member in mix.members:
        P = initial_distribution(model)
        for t in range(1, h):
            P = advance(model, P, rollin_actions(model, member, t))
        total += P
    return total / len(mix.members)


def marginal(model, P, target):
    return np.bincount(model.restriction_index(target), weights=P.ravel(), minlength=model.S ** len(target))


def exact_occupancy(model, policy, h, target) -> OccupancyTable:
    if not 1 <= h <= model.H:
        raise ValueError(f"h={h} outside 1..{model.H}")
    target = FactorSet(target).check(model.d)
    P = state_distribution(model, policy, h)
    return OccupancyTable(target, h, marginal(model, P, target))


def indicator_reward(model, target, x):
    """State-only reward array 1{s[target] = x}."""
    hit = model.restriction_index(FactorSet(target)) == x
    return hit.reshape(model.n_en, model.n_ex).astype(float)


def _reward_at(model, rewards, t, P, member):
    if rewards is None:
        actions = rollin_actions(model, member, t)
        r = np.take_along_axis(model.r_en, actions, axis=1)
        return float((P * r).sum())
    r = rewards.get(t)
    if r is None:
        return 0.0
    r = np.asarray(r, dtype=float)
    if r.ndim == 2:
        return float((P * r).sum())
    actions = rollin_actions(model, member, t)
    return float((P * np.take_along_axis(r, actions[..., None], axis=2)[..., 0]).sum())


def exact_value(model, policy, rewards=None, t_range=None) -> float:
    """Expected sum of rewards over steps t..h.

    ``rewards`` is None for the model reward, or a dict mapping timestep to a
    synthetic reward array of shape (n_en, n_ex) (state-only) or
    (n_en, n_ex, A).
    """
    t0, t1 = t_range if t_range is not None else (1, model.H)
    if not 1 <= t0 <= t1 <= model.H:
        raise ValueError(f"bad time range {(t0, t1)}")
    mix = as_mixture(policy)
    total = 0.0
    for member in mix.members:
        P = initial_distribution(model)
        value = 0.0
        for t in range(1, t1 + 1):
            if t >= t0:
                value += _reward_at(model, rewards, t, P, member)
            if t < t1:
                P = advance(model, P, rollin_actions(model, member, t))
        total += value
    return total / len(mix.members)


def reach_q(model, rollout, t, h, hit):
    """Q[en, ex, a] = P(s_h in hit | s_t, a_t = a, then ``rollout`` on t+1..h-1).

    ``hit`` is a boolean (n_en, n_ex) array over step-h states.
    """
    V = hit.astype(float)
    for tau in range(h - 1, t, -1):
        W = model.ex_backward(V)
        actions = rollin_actions(model, rollout, tau)
        Q = np.stack([model.t_en[:, a, :] @ W for a in range(model.A)], axis=-1)
        V = np.take_along_axis(Q, actions[..., None], axis=2)[..., 0]
    W = model.ex_backward(V)
    return np.stack([model.t_en[:, a, :] @ W for a in range(model.A)], axis=-1)


def group_max(model, f, acts_on):
    """Per-group argmax of f (n_joint, A) grouped by s[acts_on]; ties to the smallest action."""
    groups = model.restriction_index(acts_on)
    n = model.S ** len(acts_on)
    G = np.stack([np.bincount(groups, weights=f[:, a], minlength=n) for a in range(model.A)], axis=1)
    table = np.argmax(G, axis=1)
    return OneStepPolicy(acts_on, table, model.S), float(G.max(axis=1).sum())


def policy_weight(model, f, policy):
    actions = policy.act_joint(model)
    return float(f[np.arange(f.shape[0]), actions].sum())


def skolem_max_one_step(model, mu, t, h, rollout, acts_on, target, x):
    """Best one-step policy on ``acts_on`` at step t for reaching s_h[target] = x.

    Returns (policy, occupancy) where the occupancy is
    d_h(x; mu then policy at t then rollout).
    """
    if not 1 <= t < h <= model.H:
        raise ValueError(f"need 1 <= t < h <= H, got t={t}, h={h}")
    P = state_distribution(model, mu, t)
    hit = indicator_reward(model, target, x) > 0
    Q = reach_q(model, rollout, t, h, hit)
    f = (P[..., None] * Q).reshape(model.n_joint, model.A)
    return group_max(model, f, FactorSet(acts_on))


def max_reach(model, h):
    """max over all policies of P(s_h[I*] = x), for every endogenous value x.

    Computed on the endogenous chain alone, which suffices for factorized models.
    """
    V = np.eye(model.n_en)
    for _ in range(h - 1):
        V = np.max(np.einsum("eaf,fx->eax", model.t_en, V), axis=1)
    return model.d1_en @ V


def certified_eta(model):
    """Smallest positive max-occupancy of any endogenous value over all layers (None if all zero)."""
    eta = None
    for h in range(1, model.H + 1):
        reach = max_reach(model, h)
        pos = reach[reach > 1e-12]
        if pos.size:
            eta = float(pos.min()) if eta is None else min(eta, float(pos.min()))
    return eta


def endogenous_occupancy(model, policy, h):
    return state_distribution(model, policy, h).sum(axis=1)


def cover_deficiency(model, cover, h) -> float:
    """max over x of (max_pi d_h(x) - max_psi d_h(x)) for endogenous values x."""
    best = max_reach(model, h)
    achieved = np.max([endogenous_occupancy(model, p, h) for p in cover.policies], axis=0)
    return float(max(0.0, np.max(best - achieved)))


# ---- exact cover construction ----------------------------------------------


@dataclass
class ExactStep:
    t: int
    h: int
    phase_one: FactorSet
    factor_set: FactorSet
    cover: PolicyCover


def exact_backward_step(model, P_t, t, h, next_cover, tol=EXACT_TOL):
    """One backward step of the exact optimization/selection refinement."""
    d, k, S = model.d, model.k, model.S
    i_prev = next_cover.factor_set
    targets = subsets(d, k, i_prev)
    candidates = subsets(d, k)

    weights = {}
    for J in targets:
        labels = model.restriction_index(J).reshape(model.n_en, model.n_ex)
        to_prev = submap(J, i_prev, S)
        for y in range(S ** len(J)):
            psi = next_cover.policies[to_prev[y]]
            Q = reach_q(model, psi, t, h, labels == y)
            weights[J, y] = (P_t[..., None] * Q).reshape(model.n_joint, model.A)

    best = {key: {K: group_max(model, f, K) for K in candidates} for key, f in weights.items()}
    maxima = {key: max(v for _, v in row.values()) for key, row in best.items()}

    phase_one = next(
        (K for K in candidates if all(best[key][K][1] >= maxima[key] - tol for key in weights)),
        None,
    )
    if phase_one is None:
        raise InfeasibleModel(f"no factor set attains every maximum at t={t}, h={h}")
    gamma = {J: [best[J, y][phase_one][0] for y in range(S ** len(J))] for J in targets}

    def covered(I):
        for (J, y), f in weights.items():
            JI = J & I
            z = submap(J, JI, S)[y]
            if maxima[J, y] > policy_weight(model, f, gamma[JI][z]) + tol:
                return False
        return True

    chosen = next((I for I in targets if covered(I)), None)
    if chosen is None:
        raise InfeasibleModel(f"no factor set covers every target at t={t}, h={h}")
    to_prev = submap(chosen, i_prev, S)
    policies = [
        NonstationaryPolicy(t, (gamma[chosen][z],) + next_cover.policies[to_prev[z]].steps)
        for z in range(S ** len(chosen))
    ]
    return ExactStep(t, h, phase_one, chosen, PolicyCover(t, h, chosen, policies))


def empty_cover():
    return PolicyCover.trivial(1)


def ossr_exact_h(model, covers, h, trace=None) -> PolicyCover:
    """Exact cover for layer h given exact covers ``covers[t]`` for t = 1..h-1."""
    if h == 1:
        return empty_cover()
    if not 2 <= h <= model.H:
        raise ValueError(f"h={h} outside 2..{model.H}")
    cover = PolicyCover.trivial(h)
    for t in range(h - 1, 0, -1):
        P_t = state_distribution(model, covers[t].mixture(), t)
        step = exact_backward_step(model, P_t, t, h, cover)
        if trace is not None:
            trace.append(step)
        cover = step.cover
    return cover


def ossr_exact_all(model, H=None):
    """Exact covers for every layer 1..H, built front to back."""
    H = model.H if H is None else H
    covers = {1: empty_cover()}
    for h in range(2, H + 1):
        covers[h] = ossr_exact_h(model, covers, h)
    return covers


def ossr_one_step_exact(model):
    """Layer-2 exact refinement; returns (factor set, {packed value: one-step policy})."""
    if model.H < 2:
        raise ValueError("needs H >= 2")
    cover = ossr_exact_h(model, {1: empty_cover()}, 2)
    return cover.factor_set, {z: p.at(1) for z, p in enumerate(cover.policies)}


def density_ratios(model, covers, eps=0.0):
    """Worst ratio max_pi d_t(x) / d_t(x; uniform over covers[t]) over x with max_pi d_t(x) >= 2 eps."""
    worst = 0.0
    for t, cover in covers.items():
        best = max_reach(model, t)
        mix = endogenous_occupancy(model, cover.mixture(), t)
        floor = max(2 * eps, 1e-12)
        for x in np.flatnonzero(best >= floor):
            worst = max(worst, best[x] / mix[x] if mix[x] > 0 else np.inf)
    return worst

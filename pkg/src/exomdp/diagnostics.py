"""Executable structural checks on a model. Each returns a report dict with
``check``, ``passed``, ``worstResidual`` and free-form ``details``."""
from __future__ import annotations

import numpy as np

from .core import FactorSet, MixturePolicy, NonstationaryPolicy, OneStepPolicy, subsets, submap
from .endosearch import ladder_gaps
from .envgen import bellman_error_matrices, gen_bellman_rank_instance, numeric_rank
from .exactdp import (
    group_max,
    indicator_reward,
    marginal,
    ossr_exact_all,
    reach_q,
    state_distribution,
    density_ratios,
)

RESIDUAL_TOL = 1e-10


def random_endogenous_policy(model, start, end, rng):
    steps = []
    for _ in range(start, end + 1):
        size = rng.integers(len(model.i_star) + 1)
        I = FactorSet(rng.choice(list(model.i_star), size=size, replace=False)) if size else FactorSet()
        steps.append(OneStepPolicy(I, rng.integers(model.A, size=model.S ** len(I)), model.S))
    return NonstationaryPolicy(start, tuple(steps))


def random_endogenous_mixture(model, start, end, rng, members=None):
    members = members or int(rng.integers(1, 4))
    return MixturePolicy(tuple(random_endogenous_policy(model, start, end, rng) for _ in range(members)))


def _report(check, passed, worst, **details):
    return {"check": check, "passed": bool(passed), "worstResidual": float(worst), "details": details}


def _target_sets(model):
    if 2**model.d <= 64:
        return subsets(model.d, model.d)
    return subsets(model.d, min(model.d, model.k + 1))


def decoupling_residual(model, mixture, h):
    P = state_distribution(model, mixture, h)
    S, worst = model.S, 0.0
    for I in _target_sets(model):
        I_en, I_ex = I & model.i_star, I & model.exo
        joint = marginal(model, P, I)
        product = marginal(model, P, I_en)[submap(I, I_en, S)] * marginal(model, P, I_ex)[submap(I, I_ex, S)]
        worst = max(worst, float(np.abs(joint - product).max()))
    return worst


def check_decoupling(model, rng, n_policies=20):
    worst = 0.0
    for _ in range(n_policies):
        h = int(rng.integers(1, model.H + 1))
        mix = random_endogenous_mixture(model, 1, max(h - 1, 0), rng) if h > 1 else NonstationaryPolicy.empty(1)
        worst = max(worst, decoupling_residual(model, mix, h))
    return _report("decoupling", worst < RESIDUAL_TOL, worst, policies=n_policies, tolerance=RESIDUAL_TOL)


def restriction_residual(model, rng):
    """Largest gap between one-step maxima on J and on J & I* for one random roll-in/rollout pair."""
    t = int(rng.integers(1, model.H))
    h = int(rng.integers(t + 1, model.H + 1))
    mu = random_endogenous_mixture(model, 1, t - 1, rng) if t > 1 else NonstationaryPolicy.empty(1)
    rho = random_endogenous_policy(model, t + 1, h - 1, rng)
    P = state_distribution(model, mu, t)
    acts = subsets(model.d, min(model.d, model.k + 1))
    worst = 0.0
    for I in _target_sets(model):
        for x in range(model.S ** len(I)):
            hit = indicator_reward(model, I, x) > 0
            f = (P[..., None] * reach_q(model, rho, t, h, hit)).reshape(model.n_joint, model.A)
            for J in acts:
                full = group_max(model, f, J)[1]
                endo = group_max(model, f, J & model.i_star)[1]
                worst = max(worst, abs(full - endo))
    return worst


def check_restriction(model, rng, n_trials=10):
    if model.H < 2:
        return _report("restriction", True, 0.0, trials=0, note="needs H >= 2")
    worst = max(restriction_residual(model, rng) for _ in range(n_trials))
    return _report("restriction", worst < RESIDUAL_TOL, worst, trials=n_trials, tolerance=RESIDUAL_TOL)


def check_density_ratio(model, covers=None):
    covers = covers or ossr_exact_all(model)
    bound = 2 * model.S**model.k
    worst = density_ratios(model, covers)
    return _report("density-ratio", worst <= bound, worst, bound=bound)


def check_ladder(kmax=10, epsilons=(0.01, 0.1, 1.0), multipliers=(1.0, 5.0)):
    worst, count = np.inf, 0
    for k in range(1, kmax + 1):
        for eps in epsilons:
            for c in multipliers:
                for _, _, gap in ladder_gaps(k, eps, c):
                    worst = min(worst, gap)
                    count += 1
    return _report("ladder", worst > 0, worst, inequalities=count, kmax=kmax, note="residual is the smallest margin")


def check_bellman_rank(model):
    prov = model.provenance or {}
    if prov.get("generator") != "bellman":
        return _report("bellman-rank", False, np.inf, note="model was not produced by the bellman generator")
    d = prov["params"]["d"]
    _, F = gen_bellman_rank_instance(d)
    mats = bellman_error_matrices(model, F)
    ranks = [numeric_rank(E) for E in mats]
    e1 = float(np.abs(mats[0]).max())
    passed = max(ranks) >= d - 1 and e1 <= 1e-12
    off = mats[1][1:, 1:]
    return _report(
        "bellman-rank",
        passed,
        e1,
        d=d,
        ranks=ranks,
        rank=max(ranks),
        E1MaxAbs=e1,
        E2Diagonal=np.diag(off).tolist(),
        E2OffDiagonalMaxAbs=float(np.abs(off - np.diag(np.diag(off))).max()) if d > 2 else 0.0,
    )


CHECKS = ("decoupling", "restriction", "density-ratio", "ladder", "bellman-rank")


def run_check(name, model, rng):
    if name == "decoupling":
        return check_decoupling(model, rng)
    if name == "restriction":
        return check_restriction(model, rng)
    if name == "density-ratio":
        return check_density_ratio(model)
    if name == "ladder":
        return check_ladder()
    if name == "bellman-rank":
        return check_bellman_rank(model)
    raise ValueError(f"unknown check {name!r}")

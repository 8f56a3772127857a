"""Backward policy search over learned covers, keeping every step endogenous."""
from __future__ import annotations

import numpy as np

from .core import NonstationaryPolicy
from .endosearch import endo_policy_optimization
from .estimator import build_q_tensor, implicit_argmax_value
from .ossr import LearnConfig, step_tolerance
from .sampler import collect_psdp_dataset


def exo_psdp(sampler, covers, eps, delta, config=None, rng=None):
    """Policy for steps 1..H, optimized from the last step backwards.

    Step t is learned from episodes that roll in with the uniform mixture
    over ``covers[t]``, act uniformly at t, then follow the policy already
    learned for t+1..H. The final step is optimized too, since its action
    still earns reward. Returns (policy, trace).
    """
    config = config or LearnConfig()
    rng = rng if rng is not None else np.random.default_rng()
    d, k, S, A, H = sampler.d, sampler.k, sampler.S, sampler.A, sampler.H
    eps0 = step_tolerance(eps, S, k, H)
    n = config.budget(d, k, S, A, H, eps, delta)
    pihat = NonstationaryPolicy.empty(H + 1)
    trace = []
    for t in range(H, 0, -1):
        ds = collect_psdp_dataset(sampler, covers[t].mixture(), pihat, t, n, rng, threads=config.threads)
        tensors = {}

        def best(K):
            if K not in tensors:
                tensors[K] = build_q_tensor(ds, K, S)
            return implicit_argmax_value(tensors[K], K)

        res = endo_policy_optimization(best, d, k, eps0)
        pihat = NonstationaryPolicy(t, (res.policy,) + pihat.steps)
        record = {
            "phase": "psdp",
            "t": t,
            "n": n,
            "factorSet": list(res.factor_set),
            "value": res.value,
            "globalMax": res.global_max,
        }
        trace.append(record)
        config.emit(record)
    return pihat, trace

"""Instance generators: random certified ExoMDPs, combination locks, and the
small instance whose Bellman-error matrices have rank growing with d."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.linalg import hadamard

from .core import ExoMdpModel, FactorSet, subsets
from .exactdp import advance, certified_eta, initial_distribution

MAX_EX_DENSE = 4096


class GenerationError(RuntimeError):
    def __init__(self, message, achieved_eta):
        super().__init__(message)
        self.achieved_eta = achieved_eta


def _floored_dirichlet(rng, alpha, n, floor, size=()):
    p = rng.dirichlet(np.full(n, alpha), size=size)
    return floor + (1 - n * floor) * p


def _block_chain_product(rng, S, m, alpha, floor):
    """Joint exogenous transition and initial law as a product of independent
    chains over a random partition of the m exogenous coordinates."""
    if m == 0:
        return np.ones((1, 1)), np.ones(1), []
    if S**m > MAX_EX_DENSE:
        raise ValueError(f"exogenous space S^{m} = {S**m} too large for a dense table")
    labels = rng.integers(m, size=m)
    blocks = [list(np.flatnonzero(labels == b)) for b in np.unique(labels)]
    T = np.ones(())
    d1 = np.ones(())
    order = []
    for block in blocks:
        n = S ** len(block)
        Tb = _floored_dirichlet(rng, alpha, n, floor / n, size=n)
        db = _floored_dirichlet(rng, alpha, n, floor / n)
        shape = (S,) * len(block)
        T = np.multiply.outer(T, Tb.reshape(shape + shape))
        d1 = np.multiply.outer(d1, db.reshape(shape))
        order.append(block)
    # T axes: for each block, its "from" coords then its "to" coords
    src, dst, pos = {}, {}, 0
    for block in order:
        for c in block:
            src[c] = pos
            pos += 1
        for c in block:
            dst[c] = pos
            pos += 1
    T = T.transpose([src[c] for c in range(m)] + [dst[c] for c in range(m)])
    flat_order = [c for block in order for c in block]
    d1 = d1.transpose([flat_order.index(c) for c in range(m)])
    return T.reshape(S**m, S**m), d1.reshape(S**m), [[int(c) for c in b] for b in blocks]


def gen_random_exo_mdp(d, k, S, A, H, eta_floor, seed, alpha=1.0, floor=None, max_retries=200, n_endo=None):
    """Random model whose endogenous state space is certified eta_floor-reachable.

    The endogenous factor set is drawn uniformly among nonempty sets of at
    most k factors (all factors when k == d, unless ``n_endo`` fixes the size).
    """
    if not 1 <= k <= d:
        raise ValueError("need 1 <= k <= d")
    floor = 0.05 / S if floor is None else floor
    rng = np.random.default_rng(seed)
    if n_endo is not None:
        pool = [I for I in subsets(d, n_endo) if len(I) == n_endo]
    elif k == d:
        pool = [FactorSet(range(d))]
    else:
        pool = [I for I in subsets(d, k) if I]
    best = None
    for attempt in range(max_retries):
        i_star = pool[rng.integers(len(pool))]
        m = len(i_star)
        n_en = S**m
        t_en = _floored_dirichlet(rng, alpha, n_en, floor, size=(n_en, A))
        r_en = rng.random((n_en, A))
        d1_en = _floored_dirichlet(rng, alpha, n_en, floor)
        t_ex, d1_ex, blocks = _block_chain_product(rng, S, d - m, alpha, floor)
        provenance = {
            "generator": "random",
            "params": {"d": d, "k": k, "S": S, "A": A, "H": H, "etaFloor": eta_floor, "alpha": alpha, "floor": floor},
            "seed": seed,
            "attempt": attempt,
            "exogenousBlocks": blocks,
        }
        model = ExoMdpModel(d, k, S, A, H, i_star, t_en, t_ex, r_en, d1_en, d1_ex, provenance)
        eta = certified_eta(model)
        if eta is not None and eta >= eta_floor:
            provenance["certifiedEta"] = eta
            return model
        if best is None or (eta or 0) > best:
            best = eta or 0.0
    raise GenerationError(f"no instance reached eta {eta_floor} in {max_retries} attempts (best {best})", best)


def gen_combo_lock(d, h_chain, S, A, noise_exo, seed, k=1):
    """Factor 0 counts progress along a chain; one action per position advances,
    any other resets to 0. Reward 1 at the chain end. Factors 1..d-1 are
    exogenous, each resampled uniformly with probability ``noise_exo``."""
    if S < h_chain + 1:
        raise ValueError("need S >= h_chain + 1 values to encode the chain position")
    rng = np.random.default_rng(seed)
    key = rng.integers(A, size=h_chain)
    H = h_chain + 1
    t_en = np.zeros((S, A, S))
    for p in range(S):
        for a in range(A):
            if p >= h_chain:
                t_en[p, a, p] = 1.0
            elif a == key[p]:
                t_en[p, a, p + 1] = 1.0
            else:
                t_en[p, a, 0] = 1.0
    r_en = np.zeros((S, A))
    r_en[h_chain, :] = 1.0
    d1_en = np.zeros(S)
    d1_en[0] = 1.0
    one = (1 - noise_exo) * np.eye(S) + noise_exo / S
    t_ex, d1_ex = np.ones((1, 1)), np.ones(1)
    for _ in range(d - 1):
        t_ex = np.kron(t_ex, one)
        d1_ex = np.kron(d1_ex, np.full(S, 1.0 / S))
    provenance = {
        "generator": "combolock",
        "params": {"d": d, "hChain": h_chain, "S": S, "A": A, "noiseExo": noise_exo, "k": k},
        "seed": seed,
        "key": key.tolist(),
    }
    return ExoMdpModel(d, k, S, A, H, FactorSet([0]), t_en, t_ex, r_en, d1_en, d1_ex, provenance)


def walsh_subsets(d):
    """Subsets A_1..A_{d-1} of range(d) from the rows of a Sylvester Hadamard matrix."""
    if d < 2 or d & (d - 1):
        raise ValueError(f"d must be a power of two >= 2, got {d}")
    Hm = hadamard(d)
    return [frozenset(np.flatnonzero(Hm[j] == 1).tolist()) for j in range(1, d)]


@dataclass(frozen=True, eq=False)
class FunctionClass:
    """Q-functions as (n_en, n_ex, A) arrays over the joint state."""

    tables: tuple

    def greedy(self, j):
        return np.argmax(self.tables[j], axis=-1)


def gen_bellman_rank_instance(d):
    """Model with one 3-valued endogenous factor (0) and d binary exogenous
    factors (1..d) started at a uniformly random unit vector, plus the function
    class whose Bellman errors certify rank d - 1.

    From endogenous state 0, action 0 moves to 1 and action 1 moves to 2;
    states 1 and 2 are absorbing with rewards 1/2 and 3/4.
    """
    subs = walsh_subsets(d)
    S, A, H = 3, 2, 2
    n_ex = S**d
    t_en = np.zeros((3, A, 3))
    t_en[0, 0, 1] = t_en[0, 1, 2] = 1.0
    t_en[1, :, 1] = t_en[2, :, 2] = 1.0
    r_en = np.array([[0.0, 0.0], [0.5, 0.5], [0.75, 0.75]])
    d1_en = np.array([1.0, 0.0, 0.0])
    units = [S ** (d - 1 - i) for i in range(d)]
    d1_ex = np.zeros(n_ex)
    d1_ex[units] = 1.0 / d
    t_ex = sparse.identity(n_ex, format="csr")
    provenance = {"generator": "bellman", "params": {"d": d}, "seed": None}
    model = ExoMdpModel(d + 1, 1, S, A, H, FactorSet([0]), t_en, t_ex, r_en, d1_en, d1_ex, provenance)

    q_star = np.zeros((3, n_ex, A))
    q_star[0, :, 0], q_star[0, :, 1] = 0.5, 0.75
    q_star[1], q_star[2] = 0.5, 0.75
    tables = [q_star]
    for Aj in subs:
        f = np.zeros((3, n_ex, A))
        member = np.zeros(n_ex)
        member[[units[i] for i in Aj]] = 1.0
        f[0, :, 0] = member
        f[0, :, 1] = 0.75
        f[1] = member[:, None]
        f[2] = 0.75
        tables.append(f)
    return model, FunctionClass(tuple(tables))


def bellman_error_matrices(model, F):
    """E_h[i, j]: average Bellman error of f_j on states reached by greedy(f_i), for h = 1..H."""
    n = len(F.tables)
    greedy = [F.greedy(j) for j in range(n)]
    values = [F.tables[j].max(axis=-1) for j in range(n)]
    out = []
    for h in range(1, model.H + 1):
        residual = []
        for j in range(n):
            f, a = F.tables[j], greedy[j]
            r = np.take_along_axis(model.r_en[:, None, :].repeat(model.n_ex, 1), a[..., None], axis=2)[..., 0]
            here = np.take_along_axis(f, a[..., None], axis=2)[..., 0]
            if h < model.H:
                W = model.ex_backward(values[j])
                nxt = np.stack([model.t_en[:, b, :] @ W for b in range(model.A)], axis=-1)
                ahead = np.take_along_axis(nxt, a[..., None], axis=2)[..., 0]
            else:
                ahead = 0.0
            residual.append(here - r - ahead)
        E = np.zeros((n, n))
        for i in range(n):
            P = initial_distribution(model)
            for _ in range(1, h):
                P = advance(model, P, greedy[i])
            E[i] = [(P * residual[j]).sum() for j in range(n)]
        out.append(E)
    return out


def numeric_rank(E, tol=1e-8):
    return int((np.linalg.svd(E, compute_uv=False) > tol).sum())


def bellman_rank(model, F, tol=1e-8):
    return max(numeric_rank(E, tol) for E in bellman_error_matrices(model, F))

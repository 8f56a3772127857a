"""Episode simulation and dataset collection.

Batches are simulated in fixed-size chunks; chunk c draws from the stream
seeded by (master, c). The chunk layout depends only on N, so datasets are
identical for any number of worker threads.
"""
from __future__ import annotations

import json
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy import sparse

from .core import MixturePolicy, Trajectory, all_values, as_mixture

CHUNK = 4096


class _RowSampler:
    """Inverse-CDF sampling from many categorical rows at once."""

    def __init__(self, rows):
        csr = sparse.csr_matrix(rows, dtype=float)
        csr.eliminate_zeros()
        self.indptr = csr.indptr
        self.indices = csr.indices
        counts = np.diff(csr.indptr)
        row_of = np.repeat(np.arange(csr.shape[0]), counts)
        cum = np.cumsum(csr.data)
        starts = np.concatenate(([0.0], cum))[csr.indptr[:-1]]
        self.cum = cum - np.repeat(starts, counts) + row_of

    def draw(self, rows, u):
        pos = np.searchsorted(self.cum, rows + u, side="right")
        pos = np.minimum(pos, self.indptr[rows + 1] - 1)
        return self.indices[pos]


class Sampler:
    """Simulation access to a model.

    Exposes d, k, S, A, H and episode generation. The endogenous factor set
    stays private to the wrapped model; learning code receives only this.
    ``episodes`` counts every simulated episode.
    """

    def __init__(self, model, threads=1):
        self._model = model
        self.d, self.k, self.S, self.A, self.H = model.d, model.k, model.S, model.A, model.H
        self.threads = threads
        self.episodes = 0
        self._lock = threading.Lock()
        m = len(model.i_star)
        self._en_cols = list(model.i_star)
        self._ex_cols = list(model.exo)
        self._en_digits = all_values(m, model.S)
        self._ex_digits = all_values(model.d - m, model.S)
        self._t_en = _RowSampler(model.t_en.reshape(model.n_en * model.A, model.n_en))
        self._t_ex = _RowSampler(model.t_ex)
        self._d1_en = _RowSampler(model.d1_en[None, :])
        self._d1_ex = _RowSampler(model.d1_ex[None, :])

    def _count(self, n):
        with self._lock:
            self.episodes += n

    def _reset(self, rng, n):
        zeros = np.zeros(n, dtype=np.int64)
        en = self._d1_en.draw(zeros, rng.random(n))
        ex = self._d1_ex.draw(zeros, rng.random(n))
        return en, ex

    def _advance(self, rng, en, ex, actions):
        en2 = self._t_en.draw(en * self.A + actions, rng.random(len(en)))
        ex2 = self._t_ex.draw(ex, rng.random(len(ex)))
        return en2, ex2

    def _reward(self, en, actions):
        return self._model.r_en[en, actions]

    def _coords(self, en, ex):
        out = np.empty((len(en), self.d), dtype=np.int64)
        out[:, self._en_cols] = self._en_digits[en]
        out[:, self._ex_cols] = self._ex_digits[ex]
        return out


def _group_act(policies, which, states, t):
    actions = np.empty(len(states), dtype=np.int64)
    for idx in np.unique(which):
        mask = which == idx
        actions[mask] = policies[idx].at(t).act_batch(states[mask])
    return actions


def _chunks(n):
    return [(c, min(CHUNK, n - c * CHUNK)) for c in range((n + CHUNK - 1) // CHUNK)]


def _run_chunks(job, n, rng, threads):
    master = int(rng.integers(2**63))
    jobs = _chunks(n)

    def one(item):
        c, size = item
        return job(np.random.default_rng([master, c]), size)

    if threads > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(one, jobs))
    else:
        parts = [one(item) for item in jobs]
    return [np.concatenate(arrays) for arrays in zip(*parts)]


def _simulate(sampler, rng, n, rollin, t, rollout, horizon, act_last=True):
    """Roll in with a drawn mixture member up to t-1, act uniformly at t,
    then follow a drawn rollout policy. Without ``act_last`` the episode
    stops at the state of step ``horizon``."""
    en, ex = sampler._reset(rng, n)
    member = rng.integers(len(rollin), size=n)
    a_t = rng.integers(sampler.A, size=n)
    which = rng.integers(len(rollout), size=n)
    rewards = np.zeros((n, horizon))
    s_t = None
    for tau in range(1, horizon + 1):
        states = sampler._coords(en, ex)
        if tau == horizon and not act_last:
            break
        if tau < t:
            actions = _group_act(rollin, member, states, tau)
        elif tau == t:
            s_t = states
            actions = a_t
        else:
            actions = _group_act(rollout, which, states, tau)
        rewards[:, tau - 1] = sampler._reward(en, actions)
        if tau < horizon:
            en, ex = sampler._advance(rng, en, ex, actions)
    return s_t, a_t, which, member, states, rewards


@dataclass(frozen=True, eq=False)
class OssrDataset:
    t: int
    h: int
    A: int
    psi_count: int
    s_t: np.ndarray
    a_t: np.ndarray
    psi: np.ndarray
    s_h: np.ndarray

    @property
    def n(self):
        return len(self.a_t)


@dataclass(frozen=True, eq=False)
class PsdpDataset:
    t: int
    A: int
    s_t: np.ndarray
    a_t: np.ndarray
    rewards: np.ndarray

    @property
    def n(self):
        return len(self.a_t)


def _check_rollin(members, t):
    for m in members:
        if t > 1 and not (m.start == 1 and m.end >= t - 1):
            raise ValueError(f"roll-in must cover steps 1..{t - 1}")


def collect_ossr_dataset(sampler, mu, rollouts, t, h, n, rng, threads=None) -> OssrDataset:
    """Records (s_t, a_t, rollout index, s_h).

    ``mu`` covers steps 1..t-1; ``rollouts`` is a cover for t+1..h-1 whose
    policies are drawn uniformly by index.
    """
    if n < 1:
        raise ValueError("N must be at least 1")
    if not 1 <= t < h <= sampler.H:
        raise ValueError(f"need 1 <= t < h <= H, got t={t}, h={h}")
    rollin = as_mixture(mu).members
    _check_rollin(rollin, t)
    policies = rollouts.policies

    def job(chunk_rng, size):
        s_t, a_t, which, _, s_h, _ = _simulate(sampler, chunk_rng, size, rollin, t, policies, h, act_last=False)
        return s_t, a_t, which, s_h

    s_t, a_t, psi, s_h = _run_chunks(job, n, rng, threads or sampler.threads)
    sampler._count(n)
    return OssrDataset(t, h, sampler.A, len(policies), s_t, a_t, psi, s_h)


def collect_psdp_dataset(sampler, mu, pihat, t, n, rng, threads=None) -> PsdpDataset:
    """Records (s_t, a_t, all H rewards) under mu, a uniform action at t, then ``pihat``."""
    if n < 1:
        raise ValueError("N must be at least 1")
    if pihat.start != t + 1 or pihat.end != sampler.H:
        raise ValueError(f"completion policy must cover {t + 1}..{sampler.H}")
    rollin = as_mixture(mu).members
    _check_rollin(rollin, t)

    def job(chunk_rng, size):
        s_t, a_t, _, _, _, rewards = _simulate(sampler, chunk_rng, size, rollin, t, (pihat,), sampler.H)
        return s_t, a_t, rewards

    s_t, a_t, rewards = _run_chunks(job, n, rng, threads or sampler.threads)
    sampler._count(n)
    return PsdpDataset(t, sampler.A, s_t, a_t, rewards)


def roll_episodes(sampler, policy, n, rng, threads=None):
    """(states (n, H, d), actions, rewards) for n episodes of a policy or mixture."""
    mix = as_mixture(policy).members
    H = sampler.H

    def job(chunk_rng, size):
        en, ex = sampler._reset(chunk_rng, size)
        member = chunk_rng.integers(len(mix), size=size)
        states = np.zeros((size, H, sampler.d), dtype=np.int64)
        actions = np.zeros((size, H), dtype=np.int64)
        rewards = np.zeros((size, H))
        for t in range(1, H + 1):
            s = sampler._coords(en, ex)
            a = _group_act(mix, member, s, t)
            states[:, t - 1], actions[:, t - 1] = s, a
            rewards[:, t - 1] = sampler._reward(en, a)
            if t < H:
                en, ex = sampler._advance(chunk_rng, en, ex, a)
        return states, actions, rewards, member

    states, actions, rewards, member = _run_chunks(job, n, rng, threads or sampler.threads)
    sampler._count(n)
    return states, actions, rewards, member


def roll_episode(sampler, policy, rng) -> Trajectory:
    states, actions, rewards, member = roll_episodes(sampler, policy, 1, rng, threads=1)
    meta = {"member": int(member[0])} if isinstance(policy, MixturePolicy) else {}
    return Trajectory(states[0], actions[0], rewards[0], meta)


def collect_uniform(sampler, n, rng, threads=None):
    """Episodes with i.i.d. uniform actions: (states (n, H, d), actions, rewards)."""
    H = sampler.H

    def job(chunk_rng, size):
        en, ex = sampler._reset(chunk_rng, size)
        states = np.zeros((size, H, sampler.d), dtype=np.int64)
        actions = chunk_rng.integers(sampler.A, size=(size, H))
        rewards = np.zeros((size, H))
        for t in range(H):
            states[:, t] = sampler._coords(en, ex)
            rewards[:, t] = sampler._reward(en, actions[:, t])
            if t < H - 1:
                en, ex = sampler._advance(chunk_rng, en, ex, actions[:, t])
        return states, actions, rewards

    out = _run_chunks(job, n, rng, threads or sampler.threads)
    sampler._count(n)
    return out


# ---- JSON-lines persistence -------------------------------------------------


def save_dataset_jsonl(ds, path):
    with open(path, "w") as fh:
        if isinstance(ds, OssrDataset):
            fh.write(json.dumps({"kind": "ossr", "t": ds.t, "h": ds.h, "A": ds.A, "psiCount": ds.psi_count}) + "\n")
            for i in range(ds.n):
                rec = {"sT": ds.s_t[i].tolist(), "aT": int(ds.a_t[i]), "psi": int(ds.psi[i]), "sH": ds.s_h[i].tolist()}
                fh.write(json.dumps(rec) + "\n")
        else:
            fh.write(json.dumps({"kind": "psdp", "t": ds.t, "A": ds.A}) + "\n")
            for i in range(ds.n):
                rec = {"sT": ds.s_t[i].tolist(), "aT": int(ds.a_t[i]), "rewards": ds.rewards[i].tolist()}
                fh.write(json.dumps(rec) + "\n")


def load_dataset_jsonl(path):
    with open(path) as fh:
        header = json.loads(fh.readline())
        records = [json.loads(line) for line in fh if line.strip()]
    s_t = np.array([r["sT"] for r in records], dtype=np.int64)
    a_t = np.array([r["aT"] for r in records], dtype=np.int64)
    if header["kind"] == "ossr":
        psi = np.array([r["psi"] for r in records], dtype=np.int64)
        s_h = np.array([r["sH"] for r in records], dtype=np.int64)
        return OssrDataset(header["t"], header["h"], header["A"], header["psiCount"], s_t, a_t, psi, s_h)
    rewards = np.array([r["rewards"] for r in records], dtype=float)
    return PsdpDataset(header["t"], header["A"], s_t, a_t, rewards)

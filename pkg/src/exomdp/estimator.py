"""Importance-weighted occupancy and value estimates.

A ``WeightTensor`` keeps per-cell importance weights so that the estimate for
any one-step policy on a subset of its factors is a gather-and-sum, and the
maximum over all such policies is a per-group argmax. No policy class is
ever enumerated.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import FactorSet, OneStepPolicy, restrict_batch, submap


def occupancy_sample_size(d, k, S, A, eps, delta, C=4.0) -> int:
    """Episodes for simultaneous eps-accurate occupancies over all policies on at most k factors."""
    return math.ceil(C * A * S ** (2 * k) * max(k, 1) * math.log(d * S * A / delta) / eps**2)


@dataclass(frozen=True, eq=False)
class WeightTensor:
    """counts[x, a, psi, y] over packed s_t[acts_on] = x and s_h[targets] = y."""

    acts_on: FactorSet
    targets: FactorSet
    psi_count: int
    counts: np.ndarray
    n: int
    S: int
    A: int

    @property
    def scale(self):
        return self.A * self.psi_count


def build_weight_tensor(ds, acts_on, targets, S) -> WeightTensor:
    acts_on, targets = FactorSet(acts_on), FactorSet(targets)
    nx, ny = S ** len(acts_on), S ** len(targets)
    A, P = ds.A, ds.psi_count
    x = restrict_batch(ds.s_t, acts_on, S)
    y = restrict_batch(ds.s_h, targets, S)
    flat = ((x * A + ds.a_t) * P + ds.psi) * ny + y
    counts = np.bincount(flat, minlength=nx * A * P * ny).astype(float)
    counts *= A * P / ds.n
    counts = counts.reshape(nx, A, P, ny)
    counts.flags.writeable = False
    return WeightTensor(acts_on, targets, P, counts, ds.n, S, A)


def _check_psi(w, psi):
    if not 0 <= psi < w.psi_count:
        raise IndexError(f"rollout index {psi} out of range 0..{w.psi_count - 1}")


def estimate_occupancy(w, pi, psi, y) -> float:
    """Estimate of d_h(y; roll-in, pi at t, rollout psi)."""
    _check_psi(w, psi)
    groups = submap(w.acts_on, pi.acts_on, w.S)
    actions = pi.array[groups]
    return float(w.counts[np.arange(len(groups)), actions, psi, y].sum())


def _grouped(cells, groups, n_groups):
    """Sum rows of cells (X, A, ...) into groups -> (n_groups, A, ...)."""
    out = np.zeros((n_groups,) + cells.shape[1:])
    np.add.at(out, groups, cells)
    return out


def implicit_argmax_occupancy(w, acts_on, psi, y):
    """Best one-step policy on ``acts_on`` (a subset of w.acts_on) and its estimate."""
    _check_psi(w, psi)
    acts_on = FactorSet(acts_on)
    groups = submap(w.acts_on, acts_on, w.S)
    G = _grouped(w.counts[:, :, psi, y], groups, w.S ** len(acts_on))
    return OneStepPolicy(acts_on, np.argmax(G, axis=1), w.S), float(G.max(axis=1).sum())


def implicit_argmax_all(w, acts_on, psi_of_y):
    """Vectorized over every target value y with rollout index psi_of_y[y].

    Returns (tables (Y, groups), values (Y,)).
    """
    acts_on = FactorSet(acts_on)
    groups = submap(w.acts_on, acts_on, w.S)
    ny = w.counts.shape[3]
    cells = w.counts[:, :, psi_of_y, np.arange(ny)]
    G = _grouped(cells, groups, w.S ** len(acts_on))
    return np.argmax(G, axis=1).T, G.max(axis=1).sum(axis=0)


@dataclass(frozen=True, eq=False)
class QTensor:
    """sums[x, a] = (A / N) * sum of returns over records with s_t[acts_on] = x, a_t = a."""

    acts_on: FactorSet
    sums: np.ndarray
    n: int
    S: int
    A: int


def build_q_tensor(ds, acts_on, S) -> QTensor:
    acts_on = FactorSet(acts_on)
    nx = S ** len(acts_on)
    x = restrict_batch(ds.s_t, acts_on, S)
    returns = ds.rewards[:, ds.t - 1 :].sum(axis=1)
    sums = np.bincount(x * ds.A + ds.a_t, weights=returns, minlength=nx * ds.A) * (ds.A / ds.n)
    sums = sums.reshape(nx, ds.A)
    sums.flags.writeable = False
    return QTensor(acts_on, sums, ds.n, S, ds.A)


def estimate_value(q, pi) -> float:
    groups = submap(q.acts_on, pi.acts_on, q.S)
    return float(q.sums[np.arange(len(groups)), pi.array[groups]].sum())


def implicit_argmax_value(q, acts_on):
    acts_on = FactorSet(acts_on)
    groups = submap(q.acts_on, acts_on, q.S)
    G = _grouped(q.sums, groups, q.S ** len(acts_on))
    return OneStepPolicy(acts_on, np.argmax(G, axis=1), q.S), float(G.max(axis=1).sum())

"""Factored state arithmetic, the ExoMDP model type, policies and trajectories.

Conventions: factors are 0-indexed, timesteps are 1-indexed. A restriction
s[I] is packed as a mixed-radix integer with radix S per coordinate and the
first factor of I as the most significant digit.

The model object is the oracle. Learning code only ever receives a
``Sampler`` (see ``exomdp.sampler``), which exposes sizes and simulation but
not the endogenous factor set.
"""
from __future__ import annotations

import itertools
import json
import os
from dataclasses import dataclass, field
from functools import cached_property, lru_cache

import numpy as np
from scipy import sparse

PROB_TOL = 1e-9
DEFAULT_STATE_CAP = 10**7


def state_cap() -> int:
    return int(os.environ.get("EXOMDP_STATE_CAP", DEFAULT_STATE_CAP))


class SchemaError(ValueError):
    """Malformed document; ``path`` names the offending field."""

    def __init__(self, path, message):
        super().__init__(f"{path}: {message}")
        self.path = path


class StateSpaceTooLarge(RuntimeError):
    pass


class PolicyRangeError(IndexError):
    pass


class FactorSet(tuple):
    """Strictly ascending tuple of distinct factor indices."""

    def __new__(cls, indices=()):
        values = [int(i) for i in indices]
        if len(set(values)) != len(values):
            raise ValueError(f"duplicate factor indices in {values}")
        values.sort()
        if values and values[0] < 0:
            raise ValueError(f"negative factor index {values[0]}")
        return super().__new__(cls, values)

    def __repr__(self):
        return f"FactorSet({list(self)})"

    def __and__(self, other):
        other = set(other)
        return FactorSet(i for i in self if i in other)

    def __or__(self, other):
        return FactorSet(set(self) | set(other))

    def __sub__(self, other):
        other = set(other)
        return FactorSet(i for i in self if i not in other)

    def complement(self, d):
        return FactorSet(range(d)) - self

    def issubset(self, other):
        return set(self) <= set(other)

    def issuperset(self, other):
        return set(self) >= set(other)

    def check(self, d):
        if self and self[-1] >= d:
            raise ValueError(f"factor index {self[-1]} out of range for d={d}")
        return self


EMPTY = FactorSet()


def subsets_of_size(d, size, base=EMPTY):
    """Supersets of ``base`` with exactly ``size`` factors, lexicographic."""
    base = FactorSet(base)
    rest = [i for i in range(d) if i not in base]
    if size < len(base):
        return []
    return sorted(base | extra for extra in itertools.combinations(rest, size - len(base)))


def subsets(d, k, base=EMPTY):
    """Supersets of ``base`` with at most ``k`` factors.

    Ordered by cardinality, lexicographic within a cardinality. This is the
    order every minimal-cardinality search scans in.
    """
    out = []
    for size in range(len(base), min(k, d) + 1):
        out.extend(subsets_of_size(d, size, base))
    return out


def encode(digits, S) -> int:
    index = 0
    for v in digits:
        index = index * S + int(v)
    return index


def decode(index, m, S) -> tuple:
    digits = [0] * m
    for j in range(m - 1, -1, -1):
        index, digits[j] = divmod(index, S)
    return tuple(digits)


def restrict(s, I, S) -> int:
    """Packed index of s[I]."""
    return encode((s[i] for i in I), S)


def restrict_batch(states, I, S) -> np.ndarray:
    """Packed s[I] for every row of an (N, d) integer array."""
    states = np.asarray(states)
    if not I:
        return np.zeros(states.shape[0], dtype=np.int64)
    weights = S ** np.arange(len(I) - 1, -1, -1, dtype=np.int64)
    return states[:, list(I)].astype(np.int64) @ weights


def merge(I1, v1, I2, v2, S) -> int:
    """Packed s[I1 | I2] from the packed pieces s[I1] and s[I2] (disjoint)."""
    I1, I2 = FactorSet(I1), FactorSet(I2)
    if I1 & I2:
        raise ValueError("merge needs disjoint factor sets")
    coords = dict(zip(I1, decode(v1, len(I1), S)))
    coords.update(zip(I2, decode(v2, len(I2), S)))
    return encode((coords[i] for i in I1 | I2), S)


@lru_cache(maxsize=None)
def all_values(m, S) -> np.ndarray:
    """Digits of every packed value over m factors, in packed order."""
    if m == 0:
        return np.zeros((1, 0), dtype=np.int64)
    grid = np.array(list(itertools.product(range(S), repeat=m)), dtype=np.int64)
    grid.flags.writeable = False
    return grid


@lru_cache(maxsize=None)
def submap(outer, inner, S) -> np.ndarray:
    """For each packed value over ``outer``, the packed value of its restriction to ``inner``."""
    outer, inner = FactorSet(outer), FactorSet(inner)
    if not inner.issubset(outer):
        raise ValueError(f"{inner} is not a subset of {outer}")
    positions = [outer.index(i) for i in inner]
    grid = all_values(len(outer), S)
    out = restrict_batch(grid, positions, S)
    out.flags.writeable = False
    return out


def _prob_rows(arr, path, axis=-1):
    arr = np.asarray(arr, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise SchemaError(path, "non-finite probability")
    bad = np.argwhere(arr < 0)
    if bad.size:
        raise SchemaError(path + "".join(f"[{i}]" for i in bad[0]), "negative probability")
    sums = arr.sum(axis=axis)
    off = np.argwhere(np.abs(sums - 1.0) > PROB_TOL)
    if off.size:
        where = "".join(f"[{i}]" for i in off[0])
        raise SchemaError(path + where, f"row sums to {np.asarray(sums)[tuple(off[0])]!r}")
    return arr


def _check_sparse_rows(mat, path):
    if mat.nnz and mat.data.min() < 0:
        raise SchemaError(path, "negative probability")
    sums = np.asarray(mat.sum(axis=1)).ravel()
    off = np.flatnonzero(np.abs(sums - 1.0) > PROB_TOL)
    if off.size:
        raise SchemaError(f"{path}[{off[0]}]", f"row sums to {sums[off[0]]!r}")


@dataclass(frozen=True, eq=False)
class ExoMdpModel:
    """Full generative model with factorized dynamics.

    ``t_en[e, a, e']`` is the endogenous transition, ``t_ex[x, x']`` the joint
    exogenous transition (dense array or scipy sparse matrix), ``r_en[e, a]``
    the reward. Endogenous and exogenous indices are packed restrictions to
    ``i_star`` and its complement.
    """

    d: int
    k: int
    S: int
    A: int
    H: int
    i_star: FactorSet
    t_en: np.ndarray
    t_ex: object
    r_en: np.ndarray
    d1_en: np.ndarray
    d1_ex: np.ndarray
    provenance: dict = field(default=None)

    def __post_init__(self):
        d, k, S, A, H = self.d, self.k, self.S, self.A, self.H
        for name, v, lo in (("d", d, 1), ("S", S, 1), ("A", A, 1), ("H", H, 1), ("k", k, 0)):
            if int(v) != v or v < lo:
                raise SchemaError(name, f"expected integer >= {lo}, got {v!r}")
        try:
            i_star = FactorSet(self.i_star).check(d)
        except (TypeError, ValueError) as err:
            raise SchemaError("iStar", str(err)) from None
        if not len(i_star) <= k <= d:
            raise SchemaError("k", f"need |iStar| <= k <= d, got |iStar|={len(i_star)}, k={k}, d={d}")
        object.__setattr__(self, "i_star", i_star)
        n_en, n_ex = S ** len(i_star), S ** (d - len(i_star))
        n_joint = n_en * n_ex
        if n_joint > state_cap():
            raise StateSpaceTooLarge(f"joint state space {n_joint} exceeds cap {state_cap()}")

        t_en = _prob_rows(self.t_en, "tEn")
        if t_en.shape != (n_en, A, n_en):
            raise SchemaError("tEn", f"expected shape {(n_en, A, n_en)}, got {t_en.shape}")
        if sparse.issparse(self.t_ex):
            t_ex = sparse.csr_matrix(self.t_ex, dtype=float)
            if t_ex.shape != (n_ex, n_ex):
                raise SchemaError("tEx", f"expected shape {(n_ex, n_ex)}, got {t_ex.shape}")
            _check_sparse_rows(t_ex, "tEx")
        else:
            t_ex = _prob_rows(self.t_ex, "tEx")
            if t_ex.shape != (n_ex, n_ex):
                raise SchemaError("tEx", f"expected shape {(n_ex, n_ex)}, got {t_ex.shape}")
            t_ex.flags.writeable = False
        r_en = np.asarray(self.r_en, dtype=float)
        if r_en.shape != (n_en, A):
            raise SchemaError("rEn", f"expected shape {(n_en, A)}, got {r_en.shape}")
        bad = np.argwhere(~((r_en >= 0) & (r_en <= 1)))
        if bad.size:
            raise SchemaError(f"rEn[{bad[0][0]}][{bad[0][1]}]", "reward outside [0, 1]")
        d1_en = _prob_rows(self.d1_en, "d1En")
        d1_ex = _prob_rows(self.d1_ex, "d1Ex")
        if d1_en.shape != (n_en,):
            raise SchemaError("d1En", f"expected length {n_en}, got shape {d1_en.shape}")
        if d1_ex.shape != (n_ex,):
            raise SchemaError("d1Ex", f"expected length {n_ex}, got shape {d1_ex.shape}")
        for arr in (t_en, r_en, d1_en, d1_ex):
            arr.flags.writeable = False
        object.__setattr__(self, "t_en", t_en)
        object.__setattr__(self, "t_ex", t_ex)
        object.__setattr__(self, "r_en", r_en)
        object.__setattr__(self, "d1_en", d1_en)
        object.__setattr__(self, "d1_ex", d1_ex)
        object.__setattr__(self, "_restrictions", {})

    @property
    def n_en(self):
        return self.S ** len(self.i_star)

    @property
    def n_ex(self):
        return self.S ** (self.d - len(self.i_star))

    @property
    def n_joint(self):
        return self.n_en * self.n_ex

    @cached_property
    def exo(self) -> FactorSet:
        return self.i_star.complement(self.d)

    @cached_property
    def joint_coords(self) -> np.ndarray:
        """(n_en * n_ex, d) coordinates; row en * n_ex + ex."""
        out = np.zeros((self.n_en, self.n_ex, self.d), dtype=np.int64)
        out[:, :, list(self.i_star)] = all_values(len(self.i_star), self.S)[:, None, :]
        out[:, :, list(self.exo)] = all_values(len(self.exo), self.S)[None, :, :]
        out = out.reshape(self.n_joint, self.d)
        out.flags.writeable = False
        return out

    def restriction_index(self, I) -> np.ndarray:
        """Packed s[I] for each joint state, flattened (en-major)."""
        I = FactorSet(I)
        cache = self._restrictions
        if I not in cache:
            arr = restrict_batch(self.joint_coords, I, self.S)
            arr.flags.writeable = False
            cache[I] = arr
        return cache[I]

    def split(self, states):
        """Endogenous and exogenous packed indices for rows of an (N, d) array."""
        return restrict_batch(states, self.i_star, self.S), restrict_batch(states, self.exo, self.S)

    def ex_forward(self, M) -> np.ndarray:
        """M @ t_ex for a dense (rows, n_ex) array."""
        if sparse.issparse(self.t_ex):
            return np.asarray((self.t_ex.T @ M.T).T)
        return M @ self.t_ex

    def ex_backward(self, V) -> np.ndarray:
        """V @ t_ex.T for a dense (rows, n_ex) array."""
        if sparse.issparse(self.t_ex):
            return np.asarray((self.t_ex @ V.T).T)
        return V @ self.t_ex.T


@dataclass(frozen=True)
class OneStepPolicy:
    """Deterministic map from packed s[acts_on] to an action."""

    acts_on: FactorSet
    table: tuple
    S: int

    def __post_init__(self):
        object.__setattr__(self, "acts_on", FactorSet(self.acts_on))
        object.__setattr__(self, "table", tuple(int(a) for a in self.table))
        if len(self.table) != self.S ** len(self.acts_on):
            raise ValueError(
                f"table has {len(self.table)} entries, expected {self.S ** len(self.acts_on)}"
            )
        if self.table and min(self.table) < 0:
            raise ValueError("negative action in table")

    @classmethod
    def constant(cls, action, S):
        return cls(EMPTY, (action,), S)

    @cached_property
    def array(self) -> np.ndarray:
        arr = np.asarray(self.table, dtype=np.int64)
        arr.flags.writeable = False
        return arr

    def act(self, s) -> int:
        return self.table[restrict(s, self.acts_on, self.S)]

    def act_batch(self, states) -> np.ndarray:
        return self.array[restrict_batch(states, self.acts_on, self.S)]

    def act_joint(self, model) -> np.ndarray:
        """Action at every joint state of ``model``, flattened en-major."""
        return self.array[model.restriction_index(self.acts_on)]


@dataclass(frozen=True)
class NonstationaryPolicy:
    """One-step policies for the contiguous timesteps start .. start + len(steps) - 1."""

    start: int
    steps: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "steps", tuple(self.steps))
        if self.start < 1:
            raise ValueError("timesteps start at 1")

    @classmethod
    def empty(cls, start):
        return cls(start, ())

    @property
    def end(self):
        return self.start + len(self.steps) - 1

    def covers(self, t):
        return self.start <= t <= self.end

    def at(self, t) -> OneStepPolicy:
        if not self.covers(t):
            raise PolicyRangeError(f"timestep {t} outside policy range {self.start}..{self.end}")
        return self.steps[t - self.start]

    def act(self, s, t) -> int:
        return self.at(t).act(s)

    def compose(self, other, t):
        """Follow self through t - 1, then ``other`` (which must start at t)."""
        if other.start != t:
            raise ValueError(f"composed policy starts at {other.start}, expected {t}")
        if not self.start <= t <= self.end + 1:
            raise ValueError(f"cannot switch at {t} for a policy on {self.start}..{self.end}")
        return NonstationaryPolicy(self.start, self.steps[: t - self.start] + other.steps)

    def then(self, other):
        return self.compose(other, other.start)

    def factor_sets(self):
        return [p.acts_on for p in self.steps]

    def is_endogenous(self, i_star) -> bool:
        return all(I.issubset(i_star) for I in self.factor_sets())


@dataclass(frozen=True)
class MixturePolicy:
    """Uniform mixture; one member is drawn per episode and followed throughout."""

    members: tuple

    def __post_init__(self):
        object.__setattr__(self, "members", tuple(self.members))
        if not self.members:
            raise ValueError("mixture needs at least one member")

    def act(self, s, t, member) -> int:
        return self.members[member].act(s, t)


def as_mixture(policy) -> MixturePolicy:
    if isinstance(policy, MixturePolicy):
        return policy
    return MixturePolicy((policy,))


@dataclass(frozen=True)
class PolicyCover:
    """Policies for steps t .. h-1 indexed by the packed restriction s[factor_set]."""

    t: int
    h: int
    factor_set: FactorSet
    policies: tuple

    def __post_init__(self):
        object.__setattr__(self, "factor_set", FactorSet(self.factor_set))
        object.__setattr__(self, "policies", tuple(self.policies))
        if not self.policies:
            raise ValueError("cover needs at least one policy")
        count, m = len(self.policies), len(self.factor_set)
        S = next((step.S for p in self.policies for step in p.steps), None)
        if S is not None and count != S**m:
            raise ValueError(f"{count} policies cannot index a {m}-factor restriction with S={S}")
        if m == 0 and count != 1:
            raise ValueError("empty factor set indexes exactly one policy")
        for p in self.policies:
            if p.start != self.t or p.end != self.h - 1:
                raise ValueError(
                    f"cover policy spans {p.start}..{p.end}, expected {self.t}..{self.h - 1}"
                )

    @classmethod
    def trivial(cls, h):
        """The cover at t = h: one empty policy."""
        return cls(h, h, EMPTY, (NonstationaryPolicy.empty(h),))

    def mixture(self) -> MixturePolicy:
        return MixturePolicy(self.policies)

    def factor_sets(self):
        return sorted({I for p in self.policies for I in p.factor_sets()})

    def __len__(self):
        return len(self.policies)


@dataclass
class Trajectory:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        H = len(self.states)
        if len(self.actions) != H or len(self.rewards) != H:
            raise ValueError("states, actions and rewards must have equal length")


# ---- serialization ---------------------------------------------------------


def dumps(doc) -> str:
    """Canonical JSON text: sorted keys, fixed indentation, trailing newline."""
    return json.dumps(doc, sort_keys=True, indent=1) + "\n"


def save_json(doc, path):
    with open(path, "w") as fh:
        fh.write(dumps(doc))


def load_json(path):
    with open(path) as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as err:
            raise SchemaError("$", f"invalid JSON: {err}") from None


def model_to_dict(model) -> dict:
    if sparse.issparse(model.t_ex):
        coo = model.t_ex.tocoo()
        order = np.lexsort((coo.col, coo.row))
        t_ex = {
            "format": "sparse",
            "shape": list(coo.shape),
            "entries": [[int(coo.row[i]), int(coo.col[i]), float(coo.data[i])] for i in order],
        }
    else:
        t_ex = model.t_ex.tolist()
    doc = {
        "d": model.d,
        "k": model.k,
        "S": model.S,
        "A": model.A,
        "H": model.H,
        "iStar": list(model.i_star),
        "tEn": model.t_en.tolist(),
        "tEx": t_ex,
        "rEn": model.r_en.tolist(),
        "d1En": model.d1_en.tolist(),
        "d1Ex": model.d1_ex.tolist(),
    }
    if model.provenance is not None:
        doc["provenance"] = model.provenance
    return doc


def _require(doc, key, path=""):
    if not isinstance(doc, dict):
        raise SchemaError(path or "$", "expected an object")
    if key not in doc:
        raise SchemaError(f"{path}{'.' if path else ''}{key}", "missing field")
    return doc[key]


def _array(value, path):
    try:
        arr = np.asarray(value, dtype=float)
    except (TypeError, ValueError):
        raise SchemaError(path, "expected a (nested) array of numbers") from None
    if arr.dtype == object:
        raise SchemaError(path, "ragged array")
    return arr


def model_from_dict(doc) -> ExoMdpModel:
    ints = {}
    for key in ("d", "k", "S", "A", "H"):
        v = _require(doc, key)
        if not isinstance(v, int) or isinstance(v, bool):
            raise SchemaError(key, f"expected integer, got {v!r}")
        ints[key] = v
    i_star = _require(doc, "iStar")
    if not isinstance(i_star, list) or not all(isinstance(i, int) for i in i_star):
        raise SchemaError("iStar", "expected a list of integers")
    if i_star != sorted(set(i_star)):
        raise SchemaError("iStar", "must be strictly ascending")
    raw_ex = _require(doc, "tEx")
    if isinstance(raw_ex, dict):
        if raw_ex.get("format") != "sparse":
            raise SchemaError("tEx.format", "expected 'sparse'")
        shape = _require(raw_ex, "shape", "tEx")
        entries = _require(raw_ex, "entries", "tEx")
        try:
            rows, cols, vals = zip(*entries) if entries else ((), (), ())
            t_ex = sparse.csr_matrix((vals, (rows, cols)), shape=tuple(shape))
        except (TypeError, ValueError) as err:
            raise SchemaError("tEx.entries", str(err)) from None
    else:
        t_ex = _array(raw_ex, "tEx")
    return ExoMdpModel(
        i_star=FactorSet(i_star),
        t_en=_array(_require(doc, "tEn"), "tEn"),
        t_ex=t_ex,
        r_en=_array(_require(doc, "rEn"), "rEn"),
        d1_en=_array(_require(doc, "d1En"), "d1En"),
        d1_ex=_array(_require(doc, "d1Ex"), "d1Ex"),
        provenance=doc.get("provenance"),
        **ints,
    )


def load_model(path) -> ExoMdpModel:
    return model_from_dict(load_json(path))


def save_model(model, path):
    save_json(model_to_dict(model), path)


def one_step_to_dict(p: OneStepPolicy) -> dict:
    return {"actsOn": list(p.acts_on), "table": list(p.table)}


def policy_to_dict(policy: NonstationaryPolicy, S) -> dict:
    return {
        "kind": "nonstationary",
        "S": S,
        "start": policy.start,
        "steps": [dict(t=policy.start + i, **one_step_to_dict(p)) for i, p in enumerate(policy.steps)],
    }


def policy_from_dict(doc, path="$") -> NonstationaryPolicy:
    if _require(doc, "kind", path) != "nonstationary":
        raise SchemaError(f"{path}.kind", "expected 'nonstationary'")
    S = _require(doc, "S", path)
    start = _require(doc, "start", path)
    steps = []
    for i, step in enumerate(_require(doc, "steps", path)):
        where = f"{path}.steps[{i}]"
        if _require(step, "t", where) != start + i:
            raise SchemaError(f"{where}.t", f"expected {start + i}")
        try:
            steps.append(OneStepPolicy(FactorSet(_require(step, "actsOn", where)), _require(step, "table", where), S))
        except (TypeError, ValueError) as err:
            raise SchemaError(where, str(err)) from None
    return NonstationaryPolicy(start, tuple(steps))


def cover_to_dict(cover: PolicyCover, S) -> dict:
    return {
        "t": cover.t,
        "h": cover.h,
        "factorSet": list(cover.factor_set),
        "policies": [policy_to_dict(p, S) for p in cover.policies],
    }


def cover_from_dict(doc, path="$") -> PolicyCover:
    policies = [
        policy_from_dict(p, f"{path}.policies[{i}]") for i, p in enumerate(_require(doc, "policies", path))
    ]
    try:
        return PolicyCover(
            _require(doc, "t", path), _require(doc, "h", path), FactorSet(_require(doc, "factorSet", path)), policies
        )
    except (TypeError, ValueError) as err:
        raise SchemaError(path, str(err)) from None

import numpy as np
import pytest

from conftest import deterministic_control_model
from exomdp.core import ExoMdpModel, FactorSet, NonstationaryPolicy, OneStepPolicy, PolicyCover, subsets, submap
from exomdp.endosearch import (
    EpsLadder,
    SearchFailed,
    endo_factor_selection,
    endo_policy_optimization,
    ladder_gaps,
)
from exomdp.envgen import gen_random_exo_mdp
from exomdp.exactdp import group_max, initial_distribution, policy_weight, reach_q, state_distribution


def test_ladder_values():
    lad = EpsLadder(2, 0.1)
    assert [lad(i) for i in range(3)] == pytest.approx([0.225, 0.15, 0.1], abs=1e-15)
    lad5 = EpsLadder(2, 0.1, 5.0)
    assert lad5(1) == pytest.approx(0.75, abs=1e-15) and lad5(2) == pytest.approx(0.5, abs=1e-15)


@pytest.mark.parametrize("multiplier", [1.0, 5.0])
def test_ladder_gaps_positive(multiplier):
    for k in range(1, 11):
        for eps in (0.01, 0.1, 1.0):
            assert all(gap > 0 for _, _, gap in ladder_gaps(k, eps, multiplier))


def test_equal_values_select_empty_set():
    res = endo_policy_optimization(lambda K: (OneStepPolicy.constant(0, 2), 0.5), d=3, k=2, eps=0.1)
    assert res.factor_set == FactorSet() and res.slack == pytest.approx(0.225)


def _distractor_model():
    """Factor 0 follows the action; factor 1 is uniform noise; reward pays for factor 0 matching 1."""
    t_en = np.zeros((2, 2, 2))
    t_en[:, 0, 0] = t_en[:, 1, 1] = 1
    return ExoMdpModel(2, 1, 2, 2, 2, FactorSet([0]), t_en, np.full((2, 2), 0.5),
                       np.array([[0.0, 0.2], [1.0, 0.9]]), np.array([0.5, 0.5]), np.array([0.5, 0.5]))


def _exact_best(model, f):
    return lambda K: group_max(model, f, K)


@pytest.mark.parametrize("eps", [0.001, 0.05, 0.3])
def test_distractor_factor_never_selected(eps):
    model = _distractor_model()
    P = initial_distribution(model)
    # value of acting at step 1 then best at step 2 = immediate reward + reach of factor 0 = 1
    Q1 = reach_q(model, NonstationaryPolicy.empty(2), 1, 2, np.array([[0, 0], [1, 1]], bool))
    f = (P[..., None] * (Q1 + model.r_en[:, None, :])).reshape(-1, 2)
    for k in (1, 2):
        res = endo_policy_optimization(_exact_best(model, f), model.d, k, eps)
        assert 1 not in res.factor_set
        top = max(group_max(model, f, K)[1] for K in subsets(2, k))
        assert res.global_max == pytest.approx(top)


@pytest.mark.parametrize("seed", range(6))
def test_exact_policy_search_is_endogenous_on_generated_instances(seed):
    model = gen_random_exo_mdp(4, 2, 2, 2, 3, 0.05, seed=seed)
    P = state_distribution(model, NonstationaryPolicy.empty(1), 1)
    f = (P[..., None] * model.r_en[:, None, :]).reshape(-1, 2)
    res = endo_policy_optimization(_exact_best(model, f), model.d, model.k, 0.05)
    assert res.factor_set.issubset(model.i_star)
    assert res.value >= res.global_max - EpsLadder(model.k, 0.05)(len(res.factor_set)) - 1e-12


class ExactDhat:
    """Exact occupancies standing in for the sampled estimates."""

    def __init__(self, model, P_t, t, h, cover):
        self.model = model
        self.weights = {}
        for J in subsets(model.d, model.k, cover.factor_set):
            labels = model.restriction_index(J).reshape(model.n_en, model.n_ex)
            to_prev = submap(J, cover.factor_set, model.S)
            for y in range(model.S ** len(J)):
                Q = reach_q(model, cover.policies[to_prev[y]], t, h, labels == y)
                self.weights[J, y] = (P_t[..., None] * Q).reshape(model.n_joint, model.A)

    def best(self, J, y):
        return lambda K: group_max(self.model, self.weights[J, y], K)

    def maximum(self, J):
        return [max(group_max(self.model, self.weights[J, y], K)[1] for K in subsets(self.model.d, self.model.k))
                for y in range(self.model.S ** len(J))]

    def value(self, J, y, policy):
        return policy_weight(self.model, self.weights[J, y], policy)


def _gamma(dhat, model, i_prev, eps):
    return {
        J: [endo_policy_optimization(dhat.best(J, y), model.d, model.k, eps).policy for y in range(model.S ** len(J))]
        for J in subsets(model.d, model.k, i_prev)
    }


def test_selection_finds_the_controllable_factor():
    model = deterministic_control_model(3)
    cover = PolicyCover.trivial(2)
    dhat = ExactDhat(model, initial_distribution(model), 1, 2, cover)
    gamma = _gamma(dhat, model, FactorSet(), 0.01)
    res = endo_factor_selection(gamma, FactorSet(), dhat, model.d, model.k, 0.01, model.S)
    assert res.factor_set == FactorSet([0])
    assert res.slack == pytest.approx(EpsLadder(1, 0.01, 5.0)(1), abs=1e-12)
    assert res.scanned[0]["factorSet"] == [] and res.scanned[0]["slack"] < 0


def test_selection_accepts_previous_set_when_it_is_endogenous():
    model = deterministic_control_model(3, H=3)
    P2 = state_distribution(model, NonstationaryPolicy(1, (OneStepPolicy.constant(0, 2),)), 2)
    cover = PolicyCover(2, 3, FactorSet([0]), [NonstationaryPolicy(2, (OneStepPolicy.constant(a, 2),)) for a in (0, 1)])
    dhat = ExactDhat(model, P2, 1, 3, cover)
    gamma = _gamma(dhat, model, FactorSet([0]), 0.01)
    res = endo_factor_selection(gamma, FactorSet([0]), dhat, model.d, model.k, 0.01, model.S)
    assert res.factor_set == FactorSet([0]) and res.level == 1


@pytest.mark.parametrize("seed", range(5))
def test_exact_selection_is_endogenous_on_generated_instances(seed):
    model = gen_random_exo_mdp(4, 1, 2, 2, 3, 0.05, seed=seed)
    dhat = ExactDhat(model, initial_distribution(model), 1, 2, PolicyCover.trivial(2))
    gamma = _gamma(dhat, model, FactorSet(), 0.01)
    res = endo_factor_selection(gamma, FactorSet(), dhat, model.d, model.k, 0.01, model.S)
    assert res.factor_set.issubset(model.i_star)
    again = endo_factor_selection(gamma, FactorSet(), dhat, model.d, model.k, 0.01, model.S)
    assert again.factor_set == res.factor_set


def test_selection_failure_carries_diagnostics():
    class Impossible:
        def maximum(self, J):
            return [10.0] * 2 ** len(J)

        def value(self, J, y, policy):
            return 0.0

    gamma = {J: [OneStepPolicy.constant(0, 2)] * 2 ** len(J) for J in subsets(2, 1)}
    with pytest.raises(SearchFailed) as err:
        endo_factor_selection(gamma, FactorSet(), Impossible(), 2, 1, 0.1, 2)
    assert err.value.diagnostics["closest"] is not None
    assert len(err.value.diagnostics["scanned"]) == 3

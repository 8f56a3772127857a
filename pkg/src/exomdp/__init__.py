"""Exogenous-noise MDPs: simulator, exact oracles, and learners that find
policies acting only on the endogenous part of a factored state."""
from .core import (
    ExoMdpModel,
    FactorSet,
    MixturePolicy,
    NonstationaryPolicy,
    OneStepPolicy,
    PolicyCover,
    Trajectory,
    load_model,
    restrict,
    save_model,
    subsets,
)
from .driver import baseline_subset_enumeration, exo_rl, full_joint_value_iteration
from .envgen import gen_bellman_rank_instance, gen_combo_lock, gen_random_exo_mdp
from .exactdp import exact_occupancy, exact_value, ossr_exact_all
from .ossr import LearnConfig, ossr_h
from .psdp import exo_psdp
from .sampler import Sampler

__all__ = [
    "ExoMdpModel",
    "FactorSet",
    "LearnConfig",
    "MixturePolicy",
    "NonstationaryPolicy",
    "OneStepPolicy",
    "PolicyCover",
    "Sampler",
    "Trajectory",
    "baseline_subset_enumeration",
    "exact_occupancy",
    "exact_value",
    "exo_psdp",
    "exo_rl",
    "full_joint_value_iteration",
    "gen_bellman_rank_instance",
    "gen_combo_lock",
    "gen_random_exo_mdp",
    "load_model",
    "ossr_exact_all",
    "ossr_h",
    "restrict",
    "save_model",
    "subsets",
]

"""Model-based multi-task policy search toolkit.

Learns a single task-parametrized feedback policy over a set of training
tasks using Gaussian-process dynamics models, analytic moment-matched
rollouts and gradient-based policy optimization, and evaluates
generalization against nearest-neighbor / gating-network controller banks
on a cart-pole swing-up benchmark.
"""

from jax import config as _jax_config

# Everything downstream assumes float64; float32 moment matching is far too
# coarse for the finite-difference gradient contracts.
_jax_config.update("jax_enable_x64", True)

from .gaussian import AugmentedDist, FeatureMap, GaussianDist, Relation, TaskSpec, augment, nearest_psd
from .gp import GPFitOptions, GPModel, TransitionDataset, condition, fit, log_marginal_likelihood, predict_point
from .moments import propagate, propagate_rbf, propagate_with_grads
from .policy import (
    AffinePolicy,
    PolicyInit,
    PolicyShape,
    RbfPolicy,
    eval_policy,
    init_random,
    pack,
    predict_control,
    unpack,
)
from .cost import SaturatingCost, cartpole_cost, expected, immediate, target_cost
from .rollout import ObjectiveValue, RolloutResult, expected_long_term_cost, multi_task_objective, rollout
from .optim import MinimizeResult, minimize, trace_csv
from .baselines import LocalPolicyBank, combined_control, gating_weights, nn_select
from .harness import ExperimentConfig, RunState, evaluate, load_run, run_training, save_run

__all__ = [
    "AugmentedDist",
    "FeatureMap",
    "GaussianDist",
    "Relation",
    "TaskSpec",
    "augment",
    "nearest_psd",
    "GPFitOptions",
    "GPModel",
    "TransitionDataset",
    "condition",
    "fit",
    "log_marginal_likelihood",
    "predict_point",
    "propagate",
    "propagate_rbf",
    "propagate_with_grads",
    "AffinePolicy",
    "PolicyInit",
    "PolicyShape",
    "RbfPolicy",
    "eval_policy",
    "init_random",
    "pack",
    "predict_control",
    "unpack",
    "SaturatingCost",
    "cartpole_cost",
    "expected",
    "immediate",
    "target_cost",
    "ObjectiveValue",
    "RolloutResult",
    "expected_long_term_cost",
    "multi_task_objective",
    "rollout",
    "MinimizeResult",
    "minimize",
    "trace_csv",
    "LocalPolicyBank",
    "combined_control",
    "gating_weights",
    "nn_select",
    "ExperimentConfig",
    "RunState",
    "evaluate",
    "load_run",
    "run_training",
    "save_run",
]

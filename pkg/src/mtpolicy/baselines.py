"""Hierarchical comparison controllers: per-task policies combined by
nearest-neighbor selection or by a softmax-over-task-distance gating network.

The local policies are trained independently (single-task reductions of
the same pipeline); only their combination differs between the two modes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import policy as policy_mod
from .errors import DimensionError
from .gaussian import Relation, TaskSpec


@dataclass(frozen=True)
class LocalPolicyBank:
    """Independently trained per-task controllers plus the gating width kappa."""

    entries: tuple  # ((TaskSpec, policy), ...)
    kappa: float  # m^2

    def __post_init__(self):
        if len(self.entries) < 1:
            raise DimensionError("bank needs at least one entry")
        if self.kappa <= 0:
            raise DimensionError("kappa must be positive")
        dims = {e[1].feature_map.in_dim for e in self.entries}
        if len(dims) != 1:
            raise DimensionError("all local policies must share input dimensions")
        object.__setattr__(self, "entries", tuple(self.entries))

    @property
    def task_means(self) -> np.ndarray:
        return np.stack([t.eta for t, _ in self.entries])


def nn_select(bank: LocalPolicyBank, eta_test: np.ndarray) -> int:
    """Index of the entry with the closest training task (ties: lowest index)."""
    eta_test = np.atleast_1d(np.asarray(eta_test, dtype=float))
    d = np.linalg.norm(bank.task_means - eta_test[None, :], axis=1)
    return int(np.argmin(d))


def gating_weights(bank: LocalPolicyBank, eta_test: np.ndarray) -> np.ndarray:
    """Softmax weights exp(-||eta - eta_i||^2 / (2 kappa)), normalized.

    Computed with log-sum-exp stabilization; weights are strictly
    positive and sum to one.
    """
    eta_test = np.atleast_1d(np.asarray(eta_test, dtype=float))
    d2 = np.sum((bank.task_means - eta_test[None, :]) ** 2, axis=1)
    logits = -0.5 * d2 / bank.kappa
    logits -= logits.max()
    w = np.exp(logits)
    return w / w.sum()


def combined_control(bank: LocalPolicyBank, x: np.ndarray, eta_test: np.ndarray,
                     *, mode: str = "gating") -> np.ndarray:
    """Control at state x for test task eta: convex combination (gating)
    or the nearest local policy's output (nn)."""
    eta_test = np.atleast_1d(np.asarray(eta_test, dtype=float))
    if mode == "nn":
        task, pol = bank.entries[nn_select(bank, eta_test)]
        return policy_mod.eval_policy(pol, _augmented_input(task, x, eta_test))
    if mode != "gating":
        raise DimensionError(f"unknown combination mode {mode!r}")
    w = gating_weights(bank, eta_test)
    out = None
    for wi, (task, pol) in zip(w, bank.entries):
        u = policy_mod.eval_policy(pol, _augmented_input(task, x, eta_test))
        out = wi * u if out is None else out + wi * u
    return out


def _augmented_input(task: TaskSpec, x: np.ndarray, eta_test: np.ndarray) -> np.ndarray:
    """Local policies keep their own training-task relation; the test task
    replaces eta when forming g(x, eta)."""
    x = np.asarray(x, dtype=float)
    if task.relation is Relation.DIFFERENCE:
        g = eta_test - x[list(task.mask_for(x.size))]
    else:
        g = eta_test
    return np.concatenate([x, g])


def to_json(bank: LocalPolicyBank) -> str:
    doc = {
        "format_version": 1,
        "kappa": bank.kappa,
        "entries": [
            {
                "eta": t.eta.tolist(),
                "sigma_eta": t.sigma_eta.tolist(),
                "relation": t.relation.value,
                "mask": list(t.mask) if t.mask is not None else None,
                "policy": json.loads(policy_mod.to_json(p)),
            }
            for t, p in bank.entries
        ],
    }
    return json.dumps(doc, sort_keys=True)


def from_json(text: str) -> LocalPolicyBank:
    doc = json.loads(text)
    entries = []
    for e in doc["entries"]:
        task = TaskSpec(
            np.array(e["eta"], dtype=float),
            np.array(e["sigma_eta"], dtype=float),
            Relation(e["relation"]),
            mask=tuple(e["mask"]) if e["mask"] is not None else None,
        )
        entries.append((task, policy_mod.from_json(json.dumps(e["policy"]))))
    return LocalPolicyBank(tuple(entries), float(doc["kappa"]))

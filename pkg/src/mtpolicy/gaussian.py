"""Gaussian distribution type, task specifications, and state-task augmentation.

The joint Gaussian over (x, g(x, eta)) built here is the input
distribution of every task-parametrized controller: for a linear
state-task relation g(x, eta) = eta - x the blocks are correlated
(cross-covariance -Sigma_x), while an index-like task, g(x, eta) = eta,
is independent of the state.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError

# Matrices are symmetrized on construction; eigenvalues below this
# (relative) threshold trigger a projection onto the PSD cone.
_CLIP_TOL = 1e-12


def nearest_psd(m: np.ndarray) -> np.ndarray:
    """Project a symmetric matrix onto the PSD cone by clipping eigenvalues."""
    m = np.asarray(m, dtype=float)
    w, v = np.linalg.eigh(0.5 * (m + m.T))
    if w.size and w[0] >= 0.0:
        return 0.5 * (m + m.T)
    w = np.clip(w, 0.0, None)
    out = (v * w) @ v.T
    return 0.5 * (out + out.T)


def _hygiene(cov: np.ndarray) -> np.ndarray:
    """Symmetrize, and clip the spectrum if meaningfully indefinite."""
    cov = 0.5 * (cov + cov.T)
    if cov.size == 0:
        return cov
    w = np.linalg.eigvalsh(cov)
    scale = max(float(w[-1]), 1.0)
    if w[0] < -_CLIP_TOL * scale:
        cov = nearest_psd(cov)
    return cov


@dataclass(frozen=True)
class GaussianDist:
    """Multivariate Gaussian: the currency for states, controls, and tasks.

    The covariance is symmetrized and PSD-projected on construction;
    moment-matching arithmetic accumulates asymmetry otherwise.
    """

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        cov = np.asarray(self.cov, dtype=float)
        if cov.ndim == 0:
            cov = cov.reshape(1, 1)
        if mean.ndim != 1 or cov.shape != (mean.size, mean.size):
            raise DimensionError(
                f"mean has dimension {mean.shape}, cov has shape {cov.shape}"
            )
        if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(cov))):
            raise DimensionError("non-finite entries in Gaussian moments")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", _hygiene(cov))

    @property
    def dim(self) -> int:
        return self.mean.size

    @classmethod
    def deterministic(cls, mean) -> "GaussianDist":
        mean = np.atleast_1d(np.asarray(mean, dtype=float))
        return cls(mean, np.zeros((mean.size, mean.size)))

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        # spectrum may carry O(eps) negatives from symmetrized arithmetic
        return rng.multivariate_normal(
            self.mean, nearest_psd(self.cov), size=size, method="eigh", check_valid="ignore"
        )


class Relation(enum.Enum):
    """How the task variable relates to the state inside the controller input."""

    DIFFERENCE = "difference"  # g(x, eta) = eta - x  (on masked components)
    IDENTITY = "identity"  # g(x, eta) = eta


@dataclass(frozen=True)
class TaskSpec:
    """A task: mean eta, training covariance, and the state-task relation.

    For the DIFFERENCE relation, ``mask`` names the state components the
    task offsets (e.g. just the cart position); dim(eta) must equal
    len(mask).  ``sigma_eta`` may be exactly zero for deterministic tasks.
    """

    eta: np.ndarray
    sigma_eta: np.ndarray
    relation: Relation
    mask: tuple[int, ...] | None = None

    def __post_init__(self):
        eta = np.atleast_1d(np.asarray(self.eta, dtype=float))
        sig = np.asarray(self.sigma_eta, dtype=float)
        if sig.ndim == 0:
            sig = sig.reshape(1, 1)
        if sig.shape != (eta.size, eta.size):
            raise DimensionError(
                f"sigma_eta shape {sig.shape} incompatible with eta dim {eta.size}"
            )
        sig = _hygiene(sig)
        if sig.size and np.linalg.eigvalsh(sig)[0] < -1e-8 * max(float(np.linalg.eigvalsh(sig)[-1]), 1.0):
            raise DimensionError("sigma_eta must be positive semidefinite")
        object.__setattr__(self, "eta", eta)
        object.__setattr__(self, "sigma_eta", sig)
        if self.mask is not None:
            object.__setattr__(self, "mask", tuple(int(i) for i in self.mask))

    @property
    def dim(self) -> int:
        return self.eta.size

    def mask_for(self, state_dim: int) -> tuple[int, ...]:
        """The state components entering g, resolved for a given state dim."""
        if self.relation is Relation.IDENTITY:
            return ()
        if self.mask is None:
            if self.dim != state_dim:
                raise DimensionError(
                    f"difference task of dim {self.dim} needs a mask for state dim {state_dim}"
                )
            return tuple(range(state_dim))
        if len(self.mask) != self.dim:
            raise DimensionError("mask length must equal dim(eta)")
        if any(i < 0 or i >= state_dim for i in self.mask):
            raise DimensionError("mask index out of range")
        return self.mask


@dataclass(frozen=True)
class AugmentedDist:
    """Joint Gaussian over (x, g(x, eta)) feeding the controller."""

    joint: GaussianDist
    state_dim: int
    task_dim: int

    def __post_init__(self):
        if self.joint.dim != self.state_dim + self.task_dim:
            raise DimensionError("joint dimension must equal state_dim + task_dim")

    @property
    def state(self) -> GaussianDist:
        d = self.state_dim
        return GaussianDist(self.joint.mean[:d], self.joint.cov[:d, :d])

    @property
    def cross(self) -> np.ndarray:
        """Cross-covariance C^{x,eta} between state and task block."""
        d = self.state_dim
        return self.joint.cov[:d, d:]


def augment(state: GaussianDist, task: TaskSpec) -> AugmentedDist:
    """Joint Gaussian of the state and the (transformed) task variable.

    DIFFERENCE: block mean eta - mu[mask], block cov Sigma[mask,mask] +
    sigma_eta, cross-covariance -Sigma[:, mask].  IDENTITY: independent
    block N(eta, sigma_eta), zero cross-covariance.
    """
    d = state.dim
    k = task.dim
    mean = np.empty(d + k)
    cov = np.zeros((d + k, d + k))
    mean[:d] = state.mean
    cov[:d, :d] = state.cov

    if task.relation is Relation.DIFFERENCE:
        mask = list(task.mask_for(d))
        mean[d:] = task.eta - state.mean[mask]
        cov[d:, d:] = state.cov[np.ix_(mask, mask)] + task.sigma_eta
        cov[:d, d:] = -state.cov[:, mask]
        cov[d:, :d] = cov[:d, d:].T
    else:
        mean[d:] = task.eta
        cov[d:, d:] = task.sigma_eta

    return AugmentedDist(GaussianDist(mean, cov), state_dim=d, task_dim=k)


@dataclass(frozen=True)
class FeatureMap:
    """Linear selection plus exact (sin, cos) expansion of chosen coordinates.

    Output layout: the ``lin`` coordinates in order, then (sin, cos)
    pairs for each index in ``ang``.  Identity maps use lin = all, ang = ().
    """

    in_dim: int
    lin: tuple[int, ...]
    ang: tuple[int, ...] = field(default=())

    def __post_init__(self):
        object.__setattr__(self, "lin", tuple(int(i) for i in self.lin))
        object.__setattr__(self, "ang", tuple(int(i) for i in self.ang))
        for i in self.lin + self.ang:
            if i < 0 or i >= self.in_dim:
                raise DimensionError("feature index out of range")

    @classmethod
    def identity(cls, dim: int) -> "FeatureMap":
        return cls(in_dim=dim, lin=tuple(range(dim)))

    @property
    def out_dim(self) -> int:
        return len(self.lin) + 2 * len(self.ang)

    def apply(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        if z.shape[-1] != self.in_dim:
            raise DimensionError(f"expected input dim {self.in_dim}, got {z.shape[-1]}")
        parts = [z[..., list(self.lin)]]
        for i in self.ang:
            parts.append(np.stack([np.sin(z[..., i]), np.cos(z[..., i])], axis=-1))
        return np.concatenate(parts, axis=-1)

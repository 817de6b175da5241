"""Saturating immediate cost and its exact Gaussian expectation.

c(x) = 1 - exp(-1/2 d(x)^T Q d(x)) with a linear-or-trig feature map d.
The expectation under a Gaussian state is the standard
determinant-scaled exponential; angles inside d are handled with the
same exact sin/cos moment formulas used for model inputs, so the
expectation stays analytic.
"""

from __future__ import annotations

from dataclasses import dataclass

import jax
import jax.numpy as jnp
import numpy as np

from . import _mm
from .errors import DimensionError, NumericalDegeneracyError
from .gaussian import GaussianDist

# width of the paper-style saturating cost: quadratic coefficient 8 on the
# squared distance, i.e. Q = 2*8*I on the feature vector
DEFAULT_WIDTH = 8.0


@dataclass(frozen=True)
class SaturatingCost:
    """Bounded cost on features d(x) = feat_lin @ trig(x) + feat_off.

    ``angles`` lists state coordinates whose (sin, cos) pairs are
    appended to x before the linear map; ``weight`` is the PSD matrix Q
    (any width constant folded in).  Values are always in [0, 1].
    """

    feat_lin: np.ndarray  # (k, state_dim + 2*len(angles))
    feat_off: np.ndarray  # (k,)
    weight: np.ndarray  # (k, k) PSD
    angles: tuple[int, ...]
    state_dim: int

    def __post_init__(self):
        lin = np.atleast_2d(np.asarray(self.feat_lin, dtype=float))
        off = np.atleast_1d(np.asarray(self.feat_off, dtype=float))
        w = np.atleast_2d(np.asarray(self.weight, dtype=float))
        ext = self.state_dim + 2 * len(self.angles)
        if lin.shape != (off.size, ext):
            raise DimensionError(f"feat_lin shape {lin.shape}, expected ({off.size}, {ext})")
        if w.shape != (off.size, off.size):
            raise DimensionError("weight must be square on the feature dimension")
        w = 0.5 * (w + w.T)
        if np.linalg.eigvalsh(w)[0] < -1e-10 * max(float(np.linalg.eigvalsh(w)[-1]), 1.0):
            raise DimensionError("weight must be positive semidefinite")
        object.__setattr__(self, "feat_lin", lin)
        object.__setattr__(self, "feat_off", off)
        object.__setattr__(self, "weight", w)
        object.__setattr__(self, "angles", tuple(int(i) for i in self.angles))


def target_cost(target: np.ndarray, weight: np.ndarray | None = None) -> SaturatingCost:
    """Plain quadratic-feature cost d(x) = x - target (no angles)."""
    target = np.atleast_1d(np.asarray(target, dtype=float))
    k = target.size
    if weight is None:
        weight = 2.0 * DEFAULT_WIDTH * np.eye(k)
    return SaturatingCost(np.eye(k), -target, weight, (), k)


def cartpole_cost(eta: float, pole_length: float, width: float = DEFAULT_WIDTH) -> SaturatingCost:
    """Pendulum-tip distance cost for the cart-pole.

    State (chi, chi_dot, phi, phi_dot) with phi = 0 hanging down; the
    features are the tip offset from the inverted position at cart
    target eta: d = (chi - eta + l sin(phi), l + l cos(phi)).  Zero cost
    exactly at chi = eta, phi = pi + 2k*pi.
    """
    l = float(pole_length)
    # extended layout: (chi, chi_dot, phi, phi_dot, sin phi, cos phi)
    lin = np.array(
        [
            [1.0, 0.0, 0.0, 0.0, l, 0.0],
            [0.0, 0.0, 0.0, 0.0, 0.0, l],
        ]
    )
    off = np.array([-float(eta), l])
    return SaturatingCost(lin, off, 2.0 * width * np.eye(2), (2,), 4)


def immediate(cost: SaturatingCost, x: np.ndarray) -> float:
    """1 - exp(-1/2 d(x)^T Q d(x)), in [0, 1], zero iff d(x) = 0."""
    x = np.asarray(x, dtype=float)
    if x.shape != (cost.state_dim,):
        raise DimensionError(f"state must have dim {cost.state_dim}")
    val = _mm.sat_cost_point(
        jnp.asarray(x),
        jnp.asarray(cost.feat_lin),
        jnp.asarray(cost.feat_off),
        jnp.asarray(cost.weight),
        cost.angles,
    )
    return float(val)


@dataclass(frozen=True)
class CostGrads:
    dmean: np.ndarray  # (d,)
    dcov: np.ndarray  # (d, d), symmetric


def expected(cost: SaturatingCost, state: GaussianDist, *, with_grads: bool = False):
    """Exact expectation of the saturating cost under a Gaussian state."""
    if state.dim != cost.state_dim:
        raise DimensionError(f"state must have dim {cost.state_dim}")
    args = (
        jnp.asarray(cost.feat_lin),
        jnp.asarray(cost.feat_off),
        jnp.asarray(cost.weight),
    )

    def fn(m, s):
        return _mm.expected_sat_cost(m, s, *args, cost.angles)

    m0 = jnp.asarray(state.mean)
    s0 = jnp.asarray(state.cov)
    val = float(fn(m0, s0))
    if not np.isfinite(val):
        raise NumericalDegeneracyError("expected cost is not finite (singular I + Sigma_d Q)")
    if not with_grads:
        return val
    gm, gs = jax.grad(fn, argnums=(0, 1))(m0, s0)
    return val, CostGrads(dmean=np.asarray(gm), dcov=np.asarray(0.5 * (gs + gs.T)))

"""Exact moment matching: Gaussian in, Gaussian out, plus cross-covariance.

Propagates a Gaussian input through a GP (or a deterministic RBF
function) and returns the exact first two moments of the predictive
marginal together with the input-output cross-covariance, and, on
request, analytic partial derivatives with respect to the input moments.
"""

from __future__ import annotations

from dataclasses import dataclass

import jax
import jax.numpy as jnp
import numpy as np

from . import _mm
from .errors import DimensionError, NumericalDegeneracyError
from .gaussian import GaussianDist
from .gp import GPModel


@dataclass(frozen=True)
class PropagateResult:
    output: GaussianDist
    cross: np.ndarray  # (input_dim, output_dim) Cov(input, output)


@dataclass(frozen=True)
class MomentGrads:
    """Partials of (mean, cov, cross) wrt the input mean and covariance.

    Covariance directions are symmetrized: the d_*_dcov arrays contain
    the gradient of the map S -> f((S + S^T)/2).
    """

    dmean_dmean: np.ndarray  # (E, d)
    dmean_dcov: np.ndarray  # (E, d, d)
    dcov_dmean: np.ndarray  # (E, E, d)
    dcov_dcov: np.ndarray  # (E, E, d, d)
    dcross_dmean: np.ndarray  # (d, E, d)
    dcross_dcov: np.ndarray  # (d, E, d, d)


def _gp_arrays(model: GPModel):
    return (
        jnp.asarray(model.model_inputs),
        jnp.asarray(model.beta),
        jnp.asarray(model.chol),
        jnp.asarray(model.log_ell),
        jnp.asarray(model.log_sf2),
        jnp.asarray(model.log_sn2),
    )


def _propagate_core(model_arrays, fm_sel, fm_ang, m, s, *, deterministic, include_noise):
    """Moments through trig preprocessing + GP, cross wrt the raw input."""
    x_train, beta, chol, log_ell, log_sf2, log_sn2 = model_arrays
    d_raw = m.shape[0]
    me, se = _mm.extend_trig(m, s, fm_ang)
    sel = jnp.asarray(fm_sel, dtype=int)
    mz = me[sel]
    sz = se[jnp.ix_(sel, sel)]
    mean, cov, v = _mm.gp_moments(
        x_train,
        beta,
        chol,
        log_ell,
        log_sf2,
        log_sn2,
        mz,
        sz,
        deterministic=deterministic,
        include_noise=include_noise,
    )
    cross = se[:d_raw, sel] @ v
    return mean, cov, cross


def _feature_selection(model: GPModel):
    """Indices of the model-input layout inside the trig-extended raw input."""
    fm = model.input_map
    d_raw = fm.in_dim
    ang = fm.ang
    # FeatureMap.apply emits the lin block then (sin, cos) pairs; extend_trig
    # appends the pairs after the raw vector, so select accordingly.
    sel = list(fm.lin)
    for k in range(len(ang)):
        sel.extend([d_raw + 2 * k, d_raw + 2 * k + 1])
    return tuple(sel), ang


def _check_input(model_dim: int, dist: GaussianDist):
    if dist.dim != model_dim:
        raise DimensionError(f"input dim {dist.dim} does not match model input dim {model_dim}")


def _finalize(mean, cov, cross, what: str):
    mean = np.asarray(mean)
    cov = np.asarray(cov)
    cross = np.asarray(cross)
    if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(cov)) and np.all(np.isfinite(cross))):
        bad = np.flatnonzero(~np.isfinite(np.concatenate([mean.ravel(), np.diag(cov)])))
        dim = int(bad[0]) % mean.size if bad.size else None
        raise NumericalDegeneracyError(
            f"non-finite {what} moments (output dimension {dim})", output_dim=dim
        )
    return PropagateResult(GaussianDist(mean, cov), cross)


def propagate(model: GPModel, input: GaussianDist, *, include_noise: bool = True) -> PropagateResult:
    """Exact GP predictive moments under a Gaussian input.

    With a deterministic input (zero covariance) this reduces to
    predict_point exactly; the output covariance carries the
    model-uncertainty term and, by default, the learned noise variance.
    """
    _check_input(model.raw_input_dim, input)
    sel, ang = _feature_selection(model)
    mean, cov, cross = _propagate_core(
        _gp_arrays(model),
        sel,
        ang,
        jnp.asarray(input.mean),
        jnp.asarray(input.cov),
        deterministic=False,
        include_noise=include_noise,
    )
    return _finalize(mean, cov, cross, "GP")


def propagate_with_grads(model: GPModel, input: GaussianDist, *, include_noise: bool = True):
    """propagate plus partial derivatives wrt the input mean and covariance."""
    _check_input(model.raw_input_dim, input)
    sel, ang = _feature_selection(model)
    arrays = _gp_arrays(model)

    def fn(m, s):
        return _propagate_core(
            arrays, sel, ang, m, s, deterministic=False, include_noise=include_noise
        )

    m0 = jnp.asarray(input.mean)
    s0 = jnp.asarray(input.cov)
    mean, cov, cross = fn(m0, s0)
    jac_m = jax.jacfwd(fn, argnums=0)(m0, s0)
    jac_s = jax.jacfwd(fn, argnums=1)(m0, s0)
    result = _finalize(mean, cov, cross, "GP")
    grads = MomentGrads(
        dmean_dmean=np.asarray(jac_m[0]),
        dmean_dcov=np.asarray(jac_s[0]),
        dcov_dmean=np.asarray(jac_m[1]),
        dcov_dcov=np.asarray(jac_s[1]),
        dcross_dmean=np.asarray(jac_m[2]),
        dcross_dcov=np.asarray(jac_s[2]),
    )
    return result, grads


def propagate_rbf(rbf, input: GaussianDist) -> PropagateResult:
    """Moments of a deterministic RBF network output under a Gaussian input.

    ``rbf`` provides centers (m, d), weights (m, F) and shared log_widths
    (d,).  The output covariance is the variance of the deterministic
    function alone (no model-uncertainty or noise term); a deterministic
    input returns the plain RBF evaluation.
    """
    centers = jnp.asarray(rbf.centers)
    weights = jnp.asarray(rbf.weights)
    log_widths = jnp.asarray(rbf.log_widths)
    n_basis, d = centers.shape
    if input.dim != d:
        raise DimensionError(f"input dim {input.dim} does not match RBF input dim {d}")
    f = weights.shape[1]
    log_ell = jnp.broadcast_to(log_widths, (f, d))
    zeros = jnp.zeros(f)
    mean, cov, v = _mm.gp_moments(
        centers,
        weights.T,
        None,
        log_ell,
        zeros,
        zeros,
        jnp.asarray(input.mean),
        jnp.asarray(input.cov),
        deterministic=True,
        include_noise=False,
    )
    cross = jnp.asarray(input.cov) @ v
    return _finalize(mean, cov, cross, "RBF")

"""Task-augmented feedback controllers (affine and RBF-network).

Both controller families consume the joint (state, task) input, map it
through an optional feature map (component selection plus sin/cos
expansion of angles), and squash the preliminary output through a
bounded third-order sine so |u| <= u_max always holds.  Control moments
under a Gaussian augmented input are computed analytically, with
gradients with respect to the flat parameter vector theta and the input
moments.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import jax
import jax.numpy as jnp
import numpy as np

from . import _mm
from .errors import DimensionError, NumericalDegeneracyError
from .gaussian import AugmentedDist, FeatureMap, GaussianDist, Relation, TaskSpec

_FORMAT_VERSION = 1


def squash(v: np.ndarray, u_max: np.ndarray) -> np.ndarray:
    """Bounded saturation u = u_max (9 sin(v/u_max) + sin(3 v/u_max)) / 8."""
    v = np.asarray(v, dtype=float)
    r = v / u_max
    return u_max * (9.0 * np.sin(r) + np.sin(3.0 * r)) / 8.0


@dataclass(frozen=True)
class AffinePolicy:
    """u = squash(A f(x, g) + b) for the feature vector f of the augmented input."""

    a_mat: np.ndarray  # (F, D_in)
    b: np.ndarray  # (F,)
    u_max: np.ndarray  # (F,)
    feature_map: FeatureMap

    kind = "affine"

    def __post_init__(self):
        a = np.atleast_2d(np.asarray(self.a_mat, dtype=float))
        b = np.atleast_1d(np.asarray(self.b, dtype=float))
        u = np.atleast_1d(np.asarray(self.u_max, dtype=float))
        if a.shape != (b.size, self.feature_map.out_dim):
            raise DimensionError(
                f"A has shape {a.shape}, expected ({b.size}, {self.feature_map.out_dim})"
            )
        if np.any(u <= 0) or u.size != b.size:
            raise DimensionError("u_max must be positive with one entry per control")
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
            raise DimensionError("non-finite policy parameters")
        object.__setattr__(self, "a_mat", a)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "u_max", u)

    @property
    def control_dim(self) -> int:
        return self.b.size

    @property
    def shape(self) -> "PolicyShape":
        return PolicyShape("affine", self.feature_map, self.control_dim, 0, tuple(self.u_max))

    def preliminary(self, feat: np.ndarray) -> np.ndarray:
        return self.a_mat @ feat + self.b


@dataclass(frozen=True)
class RbfPolicy:
    """Squashed RBF network with learned centers, weights, shared widths."""

    centers: np.ndarray  # (m, D_in)
    weights: np.ndarray  # (m, F)
    log_widths: np.ndarray  # (D_in,) shared diagonal widths
    u_max: np.ndarray  # (F,)
    feature_map: FeatureMap

    kind = "rbf"

    def __post_init__(self):
        c = np.atleast_2d(np.asarray(self.centers, dtype=float))
        w = np.atleast_2d(np.asarray(self.weights, dtype=float))
        lw = np.atleast_1d(np.asarray(self.log_widths, dtype=float))
        u = np.atleast_1d(np.asarray(self.u_max, dtype=float))
        if c.shape[0] < 1 or c.shape[1] != self.feature_map.out_dim:
            raise DimensionError("centers must be (m, D_in) with m >= 1")
        if w.shape != (c.shape[0], u.size):
            raise DimensionError("weights must be (m, F)")
        if lw.size != c.shape[1]:
            raise DimensionError("one shared width per input dimension")
        if np.any(u <= 0):
            raise DimensionError("u_max must be positive")
        for arr in (c, w, lw):
            if not np.all(np.isfinite(arr)):
                raise DimensionError("non-finite policy parameters")
        object.__setattr__(self, "centers", c)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "log_widths", lw)
        object.__setattr__(self, "u_max", u)

    @property
    def control_dim(self) -> int:
        return self.u_max.size

    @property
    def n_basis(self) -> int:
        return self.centers.shape[0]

    @property
    def shape(self) -> "PolicyShape":
        return PolicyShape("rbf", self.feature_map, self.control_dim, self.n_basis, tuple(self.u_max))

    def preliminary(self, feat: np.ndarray) -> np.ndarray:
        diff = self.centers - feat[None, :]
        quad = np.sum(diff * diff * np.exp(-2.0 * self.log_widths)[None, :], axis=1)
        return np.exp(-0.5 * quad) @ self.weights


@dataclass(frozen=True)
class PolicyShape:
    """Structural descriptor used by pack/unpack and random initialization."""

    kind: str
    feature_map: FeatureMap
    control_dim: int
    n_basis: int
    u_max: tuple[float, ...]

    @property
    def in_dim(self) -> int:
        return self.feature_map.out_dim

    @property
    def theta_len(self) -> int:
        if self.kind == "affine":
            return self.control_dim * self.in_dim + self.control_dim
        return self.n_basis * self.in_dim + self.n_basis * self.control_dim + self.in_dim


def eval_policy(policy, z_aug: np.ndarray) -> np.ndarray:
    """Deterministic control for an augmented input vector (x, g(x, eta))."""
    z_aug = np.asarray(z_aug, dtype=float)
    feat = policy.feature_map.apply(z_aug)
    return squash(policy.preliminary(feat), policy.u_max)


def pack(policy) -> np.ndarray:
    """Flatten the policy into theta (row-major blocks, documented order)."""
    if policy.kind == "affine":
        return np.concatenate([policy.a_mat.ravel(), policy.b])
    return np.concatenate([policy.centers.ravel(), policy.weights.ravel(), policy.log_widths])


def unpack(theta: np.ndarray, shape: PolicyShape):
    theta = np.asarray(theta, dtype=float).ravel()
    if theta.size != shape.theta_len:
        raise DimensionError(f"theta has length {theta.size}, expected {shape.theta_len}")
    u_max = np.array(shape.u_max, dtype=float)
    d, f = shape.in_dim, shape.control_dim
    if shape.kind == "affine":
        a = theta[: f * d].reshape(f, d)
        return AffinePolicy(a, theta[f * d :], u_max, shape.feature_map)
    m = shape.n_basis
    centers = theta[: m * d].reshape(m, d)
    weights = theta[m * d : m * d + m * f].reshape(m, f)
    log_widths = theta[m * d + m * f :]
    return RbfPolicy(centers, weights, log_widths, u_max, shape.feature_map)


@dataclass(frozen=True)
class PolicyInit:
    """Sampling spec for random initialization.

    RBF centers are drawn by sampling a state from x0, a training task
    (round-robin) with task noise sigma_eta, and mapping the augmented
    vector through the feature map; weights ~ N(0, (0.1 u_max)^2), widths 1.
    """

    x0: GaussianDist
    tasks: tuple[TaskSpec, ...]


def init_random(shape: PolicyShape, rng: np.random.Generator, init: PolicyInit):
    u_max = np.array(shape.u_max, dtype=float)
    if shape.kind == "affine":
        a = rng.normal(scale=0.1, size=(shape.control_dim, shape.in_dim))
        b = rng.normal(scale=0.1, size=shape.control_dim)
        return AffinePolicy(a, b, u_max, shape.feature_map)
    centers = np.stack(
        [sample_augmented(rng, init.x0, init.tasks[i % len(init.tasks)]) for i in range(shape.n_basis)]
    )
    centers = shape.feature_map.apply(centers)
    weights = rng.normal(size=(shape.n_basis, shape.control_dim)) * (0.1 * u_max)[None, :]
    log_widths = np.zeros(shape.in_dim)
    return RbfPolicy(centers, weights, log_widths, u_max, shape.feature_map)


def sample_augmented(rng: np.random.Generator, x0: GaussianDist, task: TaskSpec) -> np.ndarray:
    """One draw of the augmented vector (x, g(x, eta')) with eta' ~ N(eta, sigma_eta)."""
    x = x0.sample(rng, 1)[0]
    eta = task.eta + GaussianDist(np.zeros(task.dim), task.sigma_eta).sample(rng, 1)[0]
    if task.relation is Relation.DIFFERENCE:
        g = eta - x[list(task.mask_for(x0.dim))]
    else:
        g = eta
    return np.concatenate([x, g])


# ---------------------------------------------------------------------------
# control moments under a Gaussian augmented input
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ControlPrediction:
    control: GaussianDist
    cross: np.ndarray  # (aug_dim, F) Cov(augmented input, control)


@dataclass(frozen=True)
class ControlGrads:
    dmean_dtheta: np.ndarray  # (F, P)
    dcov_dtheta: np.ndarray  # (F, F, P)
    dcross_dtheta: np.ndarray  # (da, F, P)
    dmean_dmean: np.ndarray  # (F, da)
    dmean_dcov: np.ndarray  # (F, da, da)
    dcov_dmean: np.ndarray
    dcov_dcov: np.ndarray
    dcross_dmean: np.ndarray
    dcross_dcov: np.ndarray


def control_static(policy_shape: PolicyShape):
    """Static selection data for the jax core: (sel, ang, dims...)."""
    fm = policy_shape.feature_map
    da = fm.in_dim
    sel = list(fm.lin)
    for k in range(len(fm.ang)):
        sel.extend([da + 2 * k, da + 2 * k + 1])
    return tuple(sel), fm.ang


def control_moments_core(theta, m_a, s_a, u_max, shape: PolicyShape):
    """jax: control mean/cov and Cov(augmented input, control)."""
    sel_t, ang = control_static(shape)
    me, se = _mm.extend_trig(m_a, s_a, ang)
    sel = jnp.asarray(sel_t, dtype=int)
    mp = me[sel]
    sp = se[jnp.ix_(sel, sel)]
    d, f = shape.in_dim, shape.control_dim
    if shape.kind == "affine":
        a = theta[: f * d].reshape(f, d)
        b = theta[f * d :]
        mv = a @ mp + b
        sv = a @ sp @ a.T
        v_pv = a.T
    else:
        m_b = shape.n_basis
        centers = theta[: m_b * d].reshape(m_b, d)
        weights = theta[m_b * d : m_b * d + m_b * f].reshape(m_b, f)
        log_widths = theta[m_b * d + m_b * f :]
        log_ell = jnp.broadcast_to(log_widths, (f, d))
        zeros = jnp.zeros(f)
        mv, sv, v_pv = _mm.gp_moments(
            centers, weights.T, None, log_ell, zeros, zeros, mp, sp,
            deterministic=True, include_noise=False,
        )
    mu, su, kappa = _mm.squash_moments(mv, sv, u_max)
    cross = se[: m_a.shape[0], sel] @ (v_pv * kappa[None, :])
    return mu, su, cross


def preliminary_moments(policy, aug: AugmentedDist) -> ControlPrediction:
    """Moments of the pre-squash controller output (affine: exact linear)."""
    shape = policy.shape
    sel_t, ang = control_static(shape)
    me, se = _mm.extend_trig(jnp.asarray(aug.joint.mean), jnp.asarray(aug.joint.cov), ang)
    sel = jnp.asarray(sel_t, dtype=int)
    mp, sp = me[sel], se[jnp.ix_(sel, sel)]
    if shape.kind == "affine":
        mv = policy.a_mat @ np.asarray(mp) + policy.b
        sv = policy.a_mat @ np.asarray(sp) @ policy.a_mat.T
        cross = np.asarray(se[: aug.joint.dim, sel]) @ policy.a_mat.T
    else:
        from .moments import propagate_rbf

        res = propagate_rbf(policy, GaussianDist(np.asarray(mp), np.asarray(sp)))
        mv, sv = res.output.mean, res.output.cov
        cross = np.asarray(se[: aug.joint.dim, sel]) @ np.linalg.pinv(np.asarray(sp)) @ res.cross
    return ControlPrediction(GaussianDist(np.asarray(mv), np.asarray(sv)), np.asarray(cross))


def predict_control(policy, aug: AugmentedDist, *, with_grads: bool = False):
    """Moments of the squashed control under the Gaussian augmented input.

    Returns a ControlPrediction, and with_grads=True additionally the
    partial derivatives of (mean, cov, cross) with respect to theta and
    the augmented input moments.
    """
    shape = policy.shape
    if aug.joint.dim != shape.feature_map.in_dim:
        raise DimensionError(
            f"augmented input dim {aug.joint.dim} does not match policy input dim "
            f"{shape.feature_map.in_dim}"
        )
    theta = jnp.asarray(pack(policy))
    u_max = jnp.asarray(policy.u_max)
    m_a = jnp.asarray(aug.joint.mean)
    s_a = jnp.asarray(aug.joint.cov)

    def fn(th, m, s):
        return control_moments_core(th, m, s, u_max, shape)

    mu, su, cross = fn(theta, m_a, s_a)
    mu_np, su_np, cr_np = np.asarray(mu), np.asarray(su), np.asarray(cross)
    if not (np.all(np.isfinite(mu_np)) and np.all(np.isfinite(su_np)) and np.all(np.isfinite(cr_np))):
        raise NumericalDegeneracyError("non-finite control moments")
    pred = ControlPrediction(GaussianDist(mu_np, su_np), cr_np)
    if not with_grads:
        return pred

    jt = jax.jacfwd(fn, argnums=0)(theta, m_a, s_a)
    jm = jax.jacfwd(fn, argnums=1)(theta, m_a, s_a)
    js = jax.jacfwd(fn, argnums=2)(theta, m_a, s_a)
    grads = ControlGrads(
        dmean_dtheta=np.asarray(jt[0]),
        dcov_dtheta=np.asarray(jt[1]),
        dcross_dtheta=np.asarray(jt[2]),
        dmean_dmean=np.asarray(jm[0]),
        dmean_dcov=np.asarray(js[0]),
        dcov_dmean=np.asarray(jm[1]),
        dcov_dcov=np.asarray(js[1]),
        dcross_dmean=np.asarray(jm[2]),
        dcross_dcov=np.asarray(js[2]),
    )
    return pred, grads


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def to_json(policy) -> str:
    doc = {
        "format_version": _FORMAT_VERSION,
        "kind": policy.kind,
        "feature_map": {
            "in_dim": policy.feature_map.in_dim,
            "lin": list(policy.feature_map.lin),
            "ang": list(policy.feature_map.ang),
        },
        "u_max": policy.u_max.tolist(),
        "n_basis": getattr(policy, "n_basis", 0),
        "theta": pack(policy).tolist(),
    }
    return json.dumps(doc, sort_keys=True)


def from_json(text: str):
    doc = json.loads(text)
    if doc.get("format_version") != _FORMAT_VERSION:
        raise DimensionError(f"unsupported policy format version {doc.get('format_version')}")
    fm = FeatureMap(
        in_dim=int(doc["feature_map"]["in_dim"]),
        lin=tuple(doc["feature_map"]["lin"]),
        ang=tuple(doc["feature_map"]["ang"]),
    )
    shape = PolicyShape(
        kind=doc["kind"],
        feature_map=fm,
        control_dim=len(doc["u_max"]),
        n_basis=int(doc["n_basis"]),
        u_max=tuple(float(u) for u in doc["u_max"]),
    )
    return unpack(np.array(doc["theta"], dtype=float), shape)

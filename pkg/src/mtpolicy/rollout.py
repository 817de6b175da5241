"""Moment-matched rollouts, per-task expected long-term cost, multi-task
objective, and its exact gradient with respect to the policy parameters.

One step of the cascade: augment the state with the task block, append
exact (sin, cos) moments for angle coordinates, compute squashed control
moments, join (input, control) with the analytic cross-covariance, push
the joint through the dynamics GP by exact moment matching, and assemble
the successor Gaussian (delta convention) plus process noise.

The multi-task objective runs the cascade under jax.lax.scan and
differentiates it algorithmically; the value function is deterministic,
so the gradient contract is agreement with central finite differences of
the objective itself.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import partial

import jax
import jax.numpy as jnp
import numpy as np

from . import _mm
from .errors import DimensionError, NumericalDegeneracyError
from .gaussian import GaussianDist, Relation, TaskSpec
from .gp import GPModel
from .policy import PolicyShape, pack

DEFAULT_REG_WEIGHT = 1e-4


@dataclass(frozen=True)
class RolloutStatic:
    """Compile-time structure of the cascade (hashable jit key)."""

    state_dim: int
    task_dim: int
    relation: int  # 0 difference, 1 identity
    mask: tuple[int, ...]
    state_angles: tuple[int, ...]
    pol_sel: tuple[int, ...]
    dyn_sel: tuple[int, ...]
    kind: str
    n_basis: int
    control_dim: int
    horizon: int
    episode_task_noise: bool
    cost_angles: tuple[int, ...]


@dataclass(frozen=True)
class RolloutResult:
    states: tuple[GaussianDist, ...]  # t = 0..T
    controls: tuple[GaussianDist, ...]  # t = 0..T-1
    per_step_cost: tuple[float, ...] | None  # t = 1..T


@dataclass(frozen=True)
class ObjectiveValue:
    value: float
    grad: np.ndarray
    per_task: tuple[tuple[TaskSpec, float], ...]


def _trig_positions(base: int, state_angles: tuple[int, ...], idx: int) -> tuple[int, int]:
    k = state_angles.index(idx)
    return base + 2 * k, base + 2 * k + 1


def build_static(
    model: GPModel,
    policy_shape: PolicyShape,
    task: TaskSpec,
    horizon: int,
    *,
    episode_task_noise: bool = False,
    cost_angles: tuple[int, ...] = (),
) -> RolloutStatic:
    d = model.dataset.state_dim
    f = model.dataset.control_dim
    dt = task.dim
    fm_pol = policy_shape.feature_map
    if fm_pol.in_dim != d + dt:
        raise DimensionError(
            f"policy input dim {fm_pol.in_dim} does not match state+task dim {d + dt}"
        )
    if any(i >= d for i in fm_pol.ang):
        raise DimensionError("policy trig features must reference state coordinates")
    if policy_shape.control_dim != f:
        raise DimensionError("policy control dim does not match the model")

    state_angles = tuple(sorted(set(fm_pol.ang) | set(model.angle_idx)))
    base = d + dt

    pol_sel: list[int] = list(fm_pol.lin)
    for i in fm_pol.ang:
        pol_sel.extend(_trig_positions(base, state_angles, i))

    fm_dyn = model.input_map
    l1 = base + 2 * len(state_angles)
    dyn_sel: list[int] = []
    for i in fm_dyn.lin:
        dyn_sel.append(i if i < d else l1 + (i - d))
    for i in fm_dyn.ang:
        dyn_sel.extend(_trig_positions(base, state_angles, i))

    mask = task.mask_for(d) if task.relation is Relation.DIFFERENCE else ()
    return RolloutStatic(
        state_dim=d,
        task_dim=dt,
        relation=0 if task.relation is Relation.DIFFERENCE else 1,
        mask=tuple(mask),
        state_angles=state_angles,
        pol_sel=tuple(pol_sel),
        dyn_sel=tuple(dyn_sel),
        kind=policy_shape.kind,
        n_basis=policy_shape.n_basis,
        control_dim=f,
        horizon=int(horizon),
        episode_task_noise=bool(episode_task_noise),
        cost_angles=tuple(cost_angles),
    )


def _augment_arrays(mx, sx, eta, seta, st: RolloutStatic):
    d, dt = st.state_dim, st.task_dim
    if st.relation == 0:
        mask = jnp.asarray(st.mask, dtype=int)
        mg = eta - mx[mask]
        cxg = -sx[:, mask]
        sgg = sx[jnp.ix_(mask, mask)] + seta
    else:
        mg = eta
        cxg = jnp.zeros((d, dt))
        sgg = seta
    ma = jnp.concatenate([mx, mg])
    sa = jnp.block([[sx, cxg], [cxg.T, sgg]])
    return ma, _mm.sym(sa)


def _prelim(theta, mp, sp, st: RolloutStatic):
    """Pre-squash controller moments plus V = Sp^{-1} Cov(p, v)."""
    d_in = len(st.pol_sel)
    f = st.control_dim
    if st.kind == "affine":
        a = theta[: f * d_in].reshape(f, d_in)
        b = theta[f * d_in : f * d_in + f]
        return a @ mp + b, a @ sp @ a.T, a.T
    m_b = st.n_basis
    centers = theta[: m_b * d_in].reshape(m_b, d_in)
    weights = theta[m_b * d_in : m_b * d_in + m_b * f].reshape(m_b, f)
    log_widths = theta[m_b * d_in + m_b * f :]
    log_ell = jnp.broadcast_to(log_widths, (f, d_in))
    zeros = jnp.zeros(f)
    return _mm.gp_moments(
        centers, weights.T, None, log_ell, zeros, zeros, mp, sp,
        deterministic=True, include_noise=False,
    )


def _step(ma, sa, theta, u_max, gp_arrays, st: RolloutStatic):
    """One moment-matched transition from the augmented joint (x, g).

    Returns the successor augmented joint plus per-step quantities
    (control moments, successor state marginal).
    """
    d, dt, f = st.state_dim, st.task_dim, st.control_dim
    gp_x, gp_beta, gp_chol, gp_le, gp_lsf, gp_lsn = gp_arrays

    me, se = _mm.extend_trig(ma, sa, tuple(st.state_angles))
    pol = jnp.asarray(st.pol_sel, dtype=int)
    mp = me[pol]
    sp = se[jnp.ix_(pol, pol)]
    mv, sv, v_pv = _prelim(theta, mp, sp, st)
    mu, su, kappa = _mm.squash_moments(mv, sv, u_max)
    c_e1_u = se[:, pol] @ (v_pv * kappa[None, :])

    l1 = me.shape[0]
    me2 = jnp.concatenate([me, mu])
    se2 = jnp.block([[se, c_e1_u], [c_e1_u.T, su]])

    dyn = jnp.asarray(st.dyn_sel, dtype=int)
    mz = me2[dyn]
    sz = _mm.sym(se2[jnp.ix_(dyn, dyn)])
    m_delta, s_delta, v_zd = _mm.gp_moments(
        gp_x, gp_beta, gp_chol, gp_le, gp_lsf, gp_lsn, mz, sz,
        deterministic=False, include_noise=False,
    )
    c_a_delta = se2[: d + dt, dyn] @ v_zd  # Cov((x, g), delta)
    noise = jnp.exp(gp_lsn)

    mx1 = ma[:d] + m_delta
    cxd = c_a_delta[:d]
    sx1 = _mm.sym(sa[:d, :d] + s_delta + cxd + cxd.T) + jnp.diag(noise)

    if st.relation == 0 and dt > 0:
        mask = jnp.asarray(st.mask, dtype=int)
        cgd = c_a_delta[d:]  # Cov(g, delta)
        mg1 = ma[d:] - m_delta[mask]
        sgg1 = (
            sa[d:, d:]
            + s_delta[jnp.ix_(mask, mask)]
            + jnp.diag(noise)[jnp.ix_(mask, mask)]
            - cgd[:, mask]
            - cgd[:, mask].T
        )
        cxg1 = (
            sa[:d, d:]
            - cxd[:, mask]
            + cgd.T
            - s_delta[:, mask]
            - jnp.diag(noise)[:, mask]
        )
    else:
        mg1 = ma[d:]
        sgg1 = sa[d:, d:]
        cxg1 = sa[:d, d:] + c_a_delta[d:].T

    ma1 = jnp.concatenate([mx1, mg1])
    sa1 = _mm.sym(jnp.block([[sx1, cxg1], [cxg1.T, sgg1]]))
    return ma1, sa1, (mu, su, mx1, sx1)


def _scan_objective(st, theta, x0m, x0s, eta, seta, c_lin, c_off, c_w, u_max, gp_arrays):
    """Sum of expected per-step costs for one task (scan over the horizon)."""
    ma0, sa0 = _augment_arrays(x0m, x0s, eta, seta, st)

    def body(carry, _):
        ma, sa = carry
        if not st.episode_task_noise:
            ma, sa = _augment_arrays(ma[: st.state_dim], sa[: st.state_dim, : st.state_dim], eta, seta, st)
        ma1, sa1, (mu, su, mx1, sx1) = _step(ma, sa, theta, u_max, gp_arrays, st)
        c = _mm.expected_sat_cost(mx1, sx1, c_lin, c_off, c_w, st.cost_angles)
        return (ma1, sa1), c

    (_, _), costs = jax.lax.scan(body, (ma0, sa0), None, length=st.horizon)
    return jnp.sum(costs)


@partial(jax.jit, static_argnums=0)
def _objective_vg(st, theta, x0m, x0s, etas, setas, c_lin, c_off, c_w, u_max, *gp_arrays):
    def f(th):
        js = jax.vmap(
            lambda eta, seta, cl, co, cw: _scan_objective(
                st, th, x0m, x0s, eta, seta, cl, co, cw, u_max, gp_arrays
            )
        )(etas, setas, c_lin, c_off, c_w)
        return jnp.mean(js), js

    (val, js), grad = jax.value_and_grad(f, has_aux=True)(theta)
    return val, js, grad


def gp_rollout_arrays(model: GPModel):
    return (
        jnp.asarray(model.model_inputs),
        jnp.asarray(model.beta),
        jnp.asarray(model.chol),
        jnp.asarray(model.log_ell),
        jnp.asarray(model.log_sf2),
        jnp.asarray(model.log_sn2),
    )


def _cost_arrays(costs):
    return (
        jnp.asarray(np.stack([c.feat_lin for c in costs])),
        jnp.asarray(np.stack([c.feat_off for c in costs])),
        jnp.asarray(np.stack([c.weight for c in costs])),
    )


def _check_tasks(tasks, d):
    first = tasks[0]
    for t in tasks:
        if t.relation is not first.relation or t.dim != first.dim:
            raise DimensionError("all tasks must share relation and dimension")
        if t.relation is Relation.DIFFERENCE and t.mask_for(d) != first.mask_for(d):
            raise DimensionError("all tasks must share the difference mask")


def rollout(
    model: GPModel,
    policy,
    task: TaskSpec,
    x0: GaussianDist,
    horizon: int,
    *,
    cost=None,
    episode_task_noise: bool = False,
) -> RolloutResult:
    """Cascade of one-step moment-matched predictions for one task.

    Deterministic: identical inputs give bit-identical state and control
    sequences.  When ``cost`` is given, per-step expected costs for
    t = 1..T are attached.
    """
    if horizon < 1:
        raise DimensionError("horizon must be >= 1")
    if x0.dim != model.dataset.state_dim:
        raise DimensionError("x0 dimension does not match the model state dim")
    st = build_static(
        model,
        policy.shape,
        task,
        horizon,
        episode_task_noise=episode_task_noise,
        cost_angles=cost.angles if cost is not None else (),
    )
    theta = jnp.asarray(pack(policy))
    u_max = jnp.asarray(policy.u_max)
    gp_arrays = gp_rollout_arrays(model)
    eta = jnp.asarray(task.eta)
    seta = jnp.asarray(task.sigma_eta)

    ma, sa = _augment_arrays(jnp.asarray(x0.mean), jnp.asarray(x0.cov), eta, seta, st)
    states = [x0]
    controls = []
    step_costs = [] if cost is not None else None
    d = st.state_dim
    for t in range(horizon):
        if not st.episode_task_noise:
            ma, sa = _augment_arrays(ma[:d], sa[:d, :d], eta, seta, st)
        ma, sa, (mu, su, mx1, sx1) = _step(ma, sa, theta, u_max, gp_arrays, st)
        mx1_np, sx1_np = np.asarray(mx1), np.asarray(sx1)
        if not (np.all(np.isfinite(mx1_np)) and np.all(np.isfinite(sx1_np))):
            raise NumericalDegeneracyError(
                f"state moments degenerated at step {t + 1}", step=t + 1
            )
        controls.append(GaussianDist(np.asarray(mu), np.asarray(su)))
        states.append(GaussianDist(mx1_np, sx1_np))
        if cost is not None:
            step_costs.append(
                float(_mm.expected_sat_cost(mx1, sx1, jnp.asarray(cost.feat_lin),
                                            jnp.asarray(cost.feat_off), jnp.asarray(cost.weight),
                                            st.cost_angles))
            )
    return RolloutResult(
        states=tuple(states),
        controls=tuple(controls),
        per_step_cost=tuple(step_costs) if step_costs is not None else None,
    )


def _objective_raw(model, policy_shape, theta, tasks, costs, x0, horizon, *, episode_task_noise=False):
    """(value, per-task values, grad) without the regularization penalty."""
    st = build_static(
        model, policy_shape, tasks[0], horizon,
        episode_task_noise=episode_task_noise,
        cost_angles=costs[0].angles,
    )
    for c in costs:
        if c.angles != costs[0].angles or c.state_dim != model.dataset.state_dim:
            raise DimensionError("all task costs must share structure")
    etas = jnp.asarray(np.stack([t.eta for t in tasks]))
    setas = jnp.asarray(np.stack([t.sigma_eta for t in tasks]))
    val, js, grad = _objective_vg(
        st,
        jnp.asarray(theta),
        jnp.asarray(x0.mean),
        jnp.asarray(x0.cov),
        etas,
        setas,
        *_cost_arrays(costs),
        jnp.asarray(np.array(policy_shape.u_max)),
        *gp_rollout_arrays(model),
    )
    return float(val), np.asarray(js), np.asarray(grad)


def expected_long_term_cost(model, policy, task: TaskSpec, cost, x0: GaussianDist, horizon: int,
                            *, episode_task_noise: bool = False) -> float:
    """Sum over t = 1..T of the expected immediate cost of p(x_t | task)."""
    _check_tasks([task], model.dataset.state_dim)
    val, js, _ = _objective_raw(
        model, policy.shape, pack(policy), [task], [cost], x0, horizon,
        episode_task_noise=episode_task_noise,
    )
    return float(js[0])


def regularization(policy_shape: PolicyShape, theta: np.ndarray, reg_weight: float):
    """Additive weight penalty for RBF controllers: reg * ||weights||^2."""
    if policy_shape.kind != "rbf" or reg_weight == 0.0:
        return 0.0, np.zeros_like(theta)
    d, f, m = policy_shape.in_dim, policy_shape.control_dim, policy_shape.n_basis
    sl = slice(m * d, m * d + m * f)
    w = theta[sl]
    grad = np.zeros_like(theta)
    grad[sl] = 2.0 * reg_weight * w
    return float(reg_weight * np.sum(w * w)), grad


def multi_task_objective(
    model: GPModel,
    policy,
    tasks,
    cost_builder,
    x0: GaussianDist,
    horizon: int,
    *,
    reg_weight: float = DEFAULT_REG_WEIGHT,
    episode_task_noise: bool = False,
) -> ObjectiveValue:
    """Average expected long-term cost over training tasks, with gradient.

    value = mean_i J(theta, task_i) + reg; the gradient is exact for the
    moment-matched objective (agrees with central finite differences of
    this function's own value).
    """
    tasks = list(tasks)
    if not tasks:
        raise DimensionError("need at least one task")
    _check_tasks(tasks, model.dataset.state_dim)
    costs = [cost_builder(t) for t in tasks]
    theta = pack(policy)
    shape = policy.shape
    val, js, grad = _objective_raw(
        model, shape, theta, tasks, costs, x0, horizon,
        episode_task_noise=episode_task_noise,
    )
    if not np.isfinite(val) or not np.all(np.isfinite(grad)):
        bad = [i for i, v in enumerate(js) if not np.isfinite(v)]
        raise NumericalDegeneracyError(
            f"objective degenerated (task indices {bad or 'gradient only'})"
        )
    pen, pen_grad = regularization(shape, theta, reg_weight)
    return ObjectiveValue(
        value=val + pen,
        grad=grad + pen_grad,
        per_task=tuple((t, float(j)) for t, j in zip(tasks, js)),
    )

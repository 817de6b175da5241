"""Experiment driver: the full train/apply loop, the evaluation protocol,
configuration, persistence, and report emission.

The loop alternates model refits, gradient-based policy search on the
multi-task objective, and application of the current policy to the plant
(round-robin over training tasks), checkpointing after every outer
iteration.  Everything is driven by explicit seeded generators: two runs
with the same config produce byte-identical metrics logs, and a reloaded
checkpoint resumes bit-identically.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import baselines, cartpole, cost as cost_mod, gp, optim, policy as policy_mod
from .rollout import _objective_raw, regularization, rollout as rollout_fn
from .errors import DimensionError, ModelFitError, NumericalDegeneracyError, OptimizerError, RunStateLoadError
from .gaussian import FeatureMap, GaussianDist, Relation, TaskSpec

SCHEMA_VERSION = 1

_STATE_DIM = 4
_ANGLE_IDX = (2,)


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything a run needs; validated up front, JSON round-trippable."""

    scenario: str = "cartpole"
    seed: int = 0
    out_dir: str | None = None

    # plant
    cart_mass: float = 0.5
    pole_mass: float = 0.5
    pole_length: float = 0.6
    friction: float = 0.1
    dt_control: float = 0.1
    u_max: float = 10.0
    process_noise_sd: tuple[float, float, float, float] = (0.01, 0.01, 0.01, 0.01)

    # tasks: cart target positions; DIFFERENCE relation on the position
    train_tasks: tuple[float, ...] = (-1.0, 0.5, 1.0)
    sigma_eta: float = 0.01  # training task variance (0 for the zero-covariance variant)
    episode_task_noise: bool = False  # False: task covariance re-enters every step

    # policy
    policy_kind: str = "rbf"
    n_basis: int = 50
    exclude_position: bool = True  # headline feature set: task difference carries position
    # weight decay must stay far below the saturating-cost plateau gradient
    # (~1e-4), or the search just shrinks the controller
    reg_weight: float = 1e-8

    # rollout / budget
    horizon: int = 30
    n_outer_iterations: int = 15
    random_trial_steps: int = 40
    trial_steps: int = 30
    x0_sd: float = 0.1

    # model
    gp_max_points: int = 150
    gp_pad_buckets: tuple[int, ...] = (80, 150)
    gp_restarts: int = 3
    gp_max_iters: int = 60

    # optimizer
    opt_max_iters: int = 100
    opt_grad_tol: float = 1e-8
    opt_ls_evals: int = 25

    # local-controller (baseline) budget
    locals_outer_iterations: int = 8
    locals_opt_max_iters: int = 60
    locals_budget_mode: str = "per-controller"  # or "aggregate"
    kappa: float = 0.0068

    # evaluation
    eval_grid: tuple[float, float, float] = (-1.2, 1.2, 0.1)
    eval_rollouts: int = 30
    diverge_threshold: float = 50.0

    schema_version: int = SCHEMA_VERSION

    def validate(self) -> "ExperimentConfig":
        if self.scenario != "cartpole":
            raise DimensionError(f"unknown scenario {self.scenario!r}")
        if self.schema_version != SCHEMA_VERSION:
            raise DimensionError(f"unsupported schema_version {self.schema_version}")
        self.plant_params()  # validates plant numbers
        if not self.train_tasks:
            raise DimensionError("need at least one training task")
        if self.sigma_eta < 0 or self.horizon < 1 or self.n_outer_iterations < 1:
            raise DimensionError("sigma_eta, horizon, iteration budget must be positive")
        if self.policy_kind not in ("rbf", "affine"):
            raise DimensionError(f"unknown policy kind {self.policy_kind!r}")
        if self.trial_steps < 1 or self.random_trial_steps < 2:
            raise DimensionError("trial lengths too short to record transitions")
        if self.gp_max_points < 10:
            raise DimensionError("gp_max_points too small")
        if self.locals_budget_mode not in ("per-controller", "aggregate"):
            raise DimensionError(f"unknown locals_budget_mode {self.locals_budget_mode!r}")
        lo, hi, step_sz = self.eval_grid
        if step_sz <= 0 or hi < lo:
            raise DimensionError("bad evaluation grid")
        if self.kappa <= 0:
            raise DimensionError("kappa must be positive")
        return self

    # -- derived pieces ----------------------------------------------------

    def plant_params(self) -> cartpole.CartPoleParams:
        return cartpole.CartPoleParams(
            cart_mass=self.cart_mass,
            pole_mass=self.pole_mass,
            pole_length=self.pole_length,
            friction=self.friction,
            dt_control=self.dt_control,
            u_max=self.u_max,
            process_noise_sd=tuple(self.process_noise_sd),
        )

    def feature_map(self) -> FeatureMap:
        lin = (1, 3, 4) if self.exclude_position else (0, 1, 3, 4)
        return FeatureMap(in_dim=_STATE_DIM + 1, lin=lin, ang=_ANGLE_IDX)

    def policy_shape(self) -> policy_mod.PolicyShape:
        return policy_mod.PolicyShape(
            kind=self.policy_kind,
            feature_map=self.feature_map(),
            control_dim=1,
            n_basis=self.n_basis if self.policy_kind == "rbf" else 0,
            u_max=(self.u_max,),
        )

    def tasks(self) -> list[TaskSpec]:
        sig = np.array([[self.sigma_eta]])
        return [
            TaskSpec(np.array([e]), sig, Relation.DIFFERENCE, mask=(0,))
            for e in self.train_tasks
        ]

    def test_task(self, eta: float) -> TaskSpec:
        # test tasks are deterministic: plugged into the augmentation with
        # zero covariance
        return TaskSpec(np.array([eta]), np.zeros((1, 1)), Relation.DIFFERENCE, mask=(0,))

    def x0_dist(self) -> GaussianDist:
        return GaussianDist(np.zeros(_STATE_DIM), self.x0_sd**2 * np.eye(_STATE_DIM))

    def cost_builder(self):
        length = self.pole_length

        def build(task: TaskSpec) -> cost_mod.SaturatingCost:
            return cost_mod.cartpole_cost(float(task.eta[0]), length)

        return build

    def eval_etas(self) -> np.ndarray:
        lo, hi, step_sz = self.eval_grid
        n = int(round((hi - lo) / step_sz)) + 1
        return np.round(lo + step_sz * np.arange(n), 10)


def desk_config(seed: int = 0) -> ExperimentConfig:
    """Scaled-down multi-task cart-pole experiment (runs in tens of minutes)."""
    return ExperimentConfig(seed=seed)


def paper_scale_config(seed: int = 0) -> ExperimentConfig:
    """Full-size setup: 5 training tasks, 100 bases, 20 trials, 31 test tasks."""
    return ExperimentConfig(
        seed=seed,
        train_tasks=(-1.0, -0.5, 0.0, 0.5, 1.0),
        n_basis=100,
        horizon=35,
        n_outer_iterations=19,
        trial_steps=35,
        gp_max_points=300,
        gp_pad_buckets=(100, 200, 300),
        opt_max_iters=120,
        locals_outer_iterations=10,
        locals_opt_max_iters=80,
        eval_grid=(-1.5, 1.5, 0.1),
        eval_rollouts=100,
    )


def smoke_config(seed: int = 0) -> ExperimentConfig:
    """Tiny configuration for determinism/persistence tests."""
    return ExperimentConfig(
        seed=seed,
        train_tasks=(-0.5, 0.5),
        n_basis=5,
        horizon=5,
        n_outer_iterations=2,
        random_trial_steps=8,
        trial_steps=5,
        gp_max_points=40,
        gp_pad_buckets=(40,),
        gp_restarts=1,
        gp_max_iters=15,
        opt_max_iters=4,
        locals_outer_iterations=1,
        locals_opt_max_iters=3,
        eval_grid=(-0.5, 0.5, 0.5),
        eval_rollouts=3,
    )


# ---------------------------------------------------------------------------
# run state and persistence
# ---------------------------------------------------------------------------


@dataclass
class RunState:
    config: ExperimentConfig
    dataset: gp.TransitionDataset | None
    theta: np.ndarray
    iteration: int
    rng_state: dict
    metrics: list[dict] = field(default_factory=list)
    # warm-start hyperparameters from the previous fit (lists, JSON-friendly)
    hypers: tuple | None = None


_METRIC_COLUMNS = (
    "iteration",
    "applied_task",
    "objective",
    "per_task_costs",
    "final_step_expected_cost",
    "trial_mean_cost",
    "grad_norm",
    "n_evals",
    "dataset_size",
    "optimizer_warning",
    "error",
)


def _config_to_doc(config: ExperimentConfig) -> dict:
    doc = dataclasses.asdict(config)
    for k, v in doc.items():
        if isinstance(v, tuple):
            doc[k] = list(v)
    return doc


def config_from_doc(doc: dict) -> ExperimentConfig:
    fields = {f.name: f for f in dataclasses.fields(ExperimentConfig)}
    unknown = set(doc) - set(fields)
    if unknown:
        raise RunStateLoadError(f"unknown config fields {sorted(unknown)}", field=sorted(unknown)[0])
    kwargs = {}
    for name, f in fields.items():
        if name not in doc:
            continue
        v = doc[name]
        if isinstance(v, list):
            v = tuple(v)
        kwargs[name] = v
    return ExperimentConfig(**kwargs).validate()


def save_config(config: ExperimentConfig, path: str):
    with open(path, "w") as fh:
        json.dump(_config_to_doc(config), fh, sort_keys=True, indent=1)
        fh.write("\n")


def load_config(path: str) -> ExperimentConfig:
    with open(path) as fh:
        return config_from_doc(json.load(fh))


def save_run(state: RunState, path: str):
    """Persist the run state; floats keep full round-trip precision."""
    doc = {
        "schema_version": SCHEMA_VERSION,
        "config": _config_to_doc(state.config),
        "iteration": state.iteration,
        "theta": state.theta.tolist(),
        "dataset": None
        if state.dataset is None
        else {
            "inputs": state.dataset.inputs.tolist(),
            "targets": state.dataset.targets.tolist(),
            "state_dim": state.dataset.state_dim,
            "control_dim": state.dataset.control_dim,
        },
        "rng_state": state.rng_state,
        "metrics": state.metrics,
        "hypers": None
        if state.hypers is None
        else [np.asarray(h).tolist() for h in state.hypers],
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True, separators=(",", ":"))


def load_run(path: str) -> RunState:
    with open(path) as fh:
        doc = json.load(fh)
    for name in ("schema_version", "config", "iteration", "theta", "rng_state"):
        if name not in doc:
            raise RunStateLoadError(f"missing field {name!r}", field=name)
    if doc["schema_version"] != SCHEMA_VERSION:
        raise RunStateLoadError(
            f"schema_version {doc['schema_version']} unsupported", field="schema_version"
        )
    config = config_from_doc(doc["config"])
    ds_doc = doc.get("dataset")
    dataset = None
    if ds_doc is not None:
        dataset = gp.TransitionDataset(
            np.array(ds_doc["inputs"], dtype=float),
            np.array(ds_doc["targets"], dtype=float),
            int(ds_doc["state_dim"]),
            int(ds_doc["control_dim"]),
        )
    hypers = doc.get("hypers")
    if hypers is not None:
        hypers = tuple(np.array(h, dtype=float) for h in hypers)
    return RunState(
        config=config,
        dataset=dataset,
        theta=np.array(doc["theta"], dtype=float),
        iteration=int(doc["iteration"]),
        rng_state=doc["rng_state"],
        metrics=list(doc.get("metrics", [])),
        hypers=hypers,
    )


def metrics_csv(metrics: list[dict]) -> str:
    lines = [",".join(_METRIC_COLUMNS)]
    for row in metrics:
        rendered = []
        for c in _METRIC_COLUMNS:
            v = row.get(c, "")
            if isinstance(v, float):
                rendered.append(repr(v))
            elif isinstance(v, (list, tuple)):
                rendered.append('"' + ";".join(repr(float(x)) for x in v) + '"')
            else:
                rendered.append(str(v))
        lines.append(",".join(rendered))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# dataset padding (compile-cache-friendly fixed shapes)
# ---------------------------------------------------------------------------


def pad_bucket(n: int, buckets: tuple[int, ...]) -> int:
    for b in sorted(buckets):
        if n <= b:
            return b
    return n


def pad_dataset(dataset: gp.TransitionDataset, model: gp.GPModel, n_total: int) -> gp.TransitionDataset:
    """Append rows so far from the data that they cannot influence any
    prediction (kernel values underflow to exactly zero), with zero targets.

    Keeps jit compilation caches valid across growing datasets.
    """
    n_pad = n_total - dataset.n
    if n_pad <= 0:
        return dataset
    fm = model.input_map
    d_raw = dataset.state_dim + dataset.control_dim
    # per raw (non-angle) dim: the largest lengthscale any output uses
    ell_max = np.zeros(d_raw)
    for j, raw in enumerate(fm.lin):
        ell_max[raw] = np.max(np.exp(model.log_ell[:, j]))
    rows = np.zeros((n_pad, d_raw))
    for raw in fm.lin:
        base = np.max(np.abs(dataset.inputs[:, raw])) + 50.0 * ell_max[raw]
        rows[:, raw] = base + 50.0 * ell_max[raw] * (1.0 + np.arange(n_pad))
    return dataset.extend(rows, np.zeros((n_pad, dataset.state_dim)))


def _model_for_rollout(model: gp.GPModel, dataset: gp.TransitionDataset, config: ExperimentConfig) -> gp.GPModel:
    target = pad_bucket(dataset.n, tuple(config.gp_pad_buckets))
    if target <= dataset.n:
        return model
    return gp.condition(model, pad_dataset(dataset, model, target))


def _subsample(dataset: gp.TransitionDataset, cap: int) -> gp.TransitionDataset:
    if dataset.n <= cap:
        return dataset
    x = dataset.inputs
    scale = np.maximum(np.std(x, axis=0), 1e-9)
    idx = gp.farthest_point_subset(x / scale, cap)
    return gp.TransitionDataset(
        dataset.inputs[idx], dataset.targets[idx], dataset.state_dim, dataset.control_dim
    )


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


def _mtps_controller(policy, task_template: TaskSpec, eta: float):
    """Deterministic controller x -> u with the test task plugged in."""
    eta_arr = np.atleast_1d(np.asarray(eta, dtype=float))

    def ctrl(x):
        if task_template.relation is Relation.DIFFERENCE:
            g = eta_arr - x[list(task_template.mask_for(x.size))]
        else:
            g = eta_arr
        return policy_mod.eval_policy(policy, np.concatenate([x, g]))[0]

    return ctrl


def _record_trial(config, controller, x0_state, rng, n_steps, cost=None):
    """Roll the plant, returning (transition inputs, deltas, mean step cost)."""
    p = config.plant_params()
    xs, us = [], []
    s = x0_state
    costs = []
    for _ in range(n_steps):
        x = s.as_array()
        if np.max(np.abs(x)) > config.diverge_threshold:
            break
        u = float(controller(x))
        s = cartpole.step(p, s, u, rng)
        xs.append(np.concatenate([x, [np.clip(u, -p.u_max, p.u_max)]]))
        us.append(s.as_array() - x)
        if cost is not None:
            costs.append(cost_mod.immediate(cost, s.as_array()))
    inputs = np.array(xs) if xs else np.zeros((0, _STATE_DIM + 1))
    deltas = np.array(us) if us else np.zeros((0, _STATE_DIM))
    mean_cost = float(np.mean(costs)) if costs else float("nan")
    return inputs, deltas, mean_cost


def init_run(config: ExperimentConfig) -> RunState:
    """Random policy, one random-control trial, fresh generators."""
    config.validate()
    rng = np.random.default_rng(np.random.SeedSequence(config.seed))
    shape = config.policy_shape()
    pol = policy_mod.init_random(
        shape, rng, policy_mod.PolicyInit(config.x0_dist(), tuple(config.tasks()))
    )
    theta = policy_mod.pack(pol)

    x0 = cartpole.sample_initial(rng, config.x0_sd)
    controls = rng.uniform(-config.u_max, config.u_max, size=config.random_trial_steps)
    it = iter(controls)
    inputs, deltas, _ = _record_trial(
        config, lambda x: next(it), x0, rng, config.random_trial_steps
    )
    dataset = gp.TransitionDataset(inputs, deltas, _STATE_DIM, 1)
    return RunState(
        config=config,
        dataset=dataset,
        theta=theta,
        iteration=0,
        rng_state=rng.bit_generator.state,
        metrics=[],
    )


def _objective_closure(model, shape, tasks, cost_builder, x0, config):
    costs = [cost_builder(t) for t in tasks]

    def f(theta):
        val, js, grad = _objective_raw(
            model, shape, theta, tasks, costs, x0, config.horizon,
            episode_task_noise=config.episode_task_noise,
        )
        pen, pen_grad = regularization(shape, theta, config.reg_weight)
        return val + pen, grad + pen_grad

    return f


def train_iteration(state: RunState, *, opt_max_iters: int | None = None) -> RunState:
    """One outer iteration: refit, policy search, apply, checkpointable."""
    config = state.config
    rng = np.random.default_rng()
    rng.bit_generator.state = state.rng_state
    tasks = config.tasks()
    shape = config.policy_shape()
    x0 = config.x0_dist()
    cost_builder = config.cost_builder()
    row: dict = {"iteration": state.iteration, "error": ""}

    theta = state.theta
    new_dataset = state.dataset
    hypers = state.hypers
    try:
        fit_ds = _subsample(state.dataset, config.gp_max_points)
        fit_seed = int(rng.integers(2**31 - 1))
        opts = gp.GPFitOptions(
            restarts=config.gp_restarts,
            max_iters=config.gp_max_iters,
            seed=fit_seed,
            angle_idx=_ANGLE_IDX,
            init=hypers,
        )
        model = gp.fit(fit_ds, opts)
        hypers = (model.log_ell, model.log_sf2, model.log_sn2)
        rollout_model = _model_for_rollout(model, fit_ds, config)

        res = optim.minimize(
            _objective_closure(rollout_model, shape, tasks, cost_builder, x0, config),
            state.theta,
            max_iters=opt_max_iters if opt_max_iters is not None else config.opt_max_iters,
            grad_tol=config.opt_grad_tol,
            max_line_search_evals=config.opt_ls_evals,
        )
        theta = res.theta
        pol = policy_mod.unpack(theta, shape)

        # model-predicted diagnostics per training task
        per_task = []
        final_step = []
        for t in tasks:
            rr = rollout_fn(
                rollout_model, pol, t, x0, config.horizon, cost=cost_builder(t),
                episode_task_noise=config.episode_task_noise,
            )
            per_task.append(float(np.sum(rr.per_step_cost)))
            final_step.append(float(np.mean(rr.per_step_cost[-1:])))

        applied = tasks[state.iteration % len(tasks)]
        ctrl = _mtps_controller(pol, applied, float(applied.eta[0]))
        x0_state = cartpole.sample_initial(rng, config.x0_sd)
        inputs, deltas, trial_cost = _record_trial(
            config, ctrl, x0_state, rng, config.trial_steps, cost=cost_builder(applied)
        )
        if inputs.shape[0] > 0:
            new_dataset = state.dataset.extend(inputs, deltas)

        row.update(
            applied_task=float(applied.eta[0]),
            objective=float(res.value),
            per_task_costs=per_task,
            final_step_expected_cost=final_step,
            trial_mean_cost=trial_cost,
            grad_norm=float(np.linalg.norm(res.grad)),
            n_evals=res.n_evals,
            optimizer_warning=res.warning or "",
        )
    except (ModelFitError, NumericalDegeneracyError, OptimizerError) as exc:
        row["error"] = f"{type(exc).__name__}: {exc}"
        theta = state.theta

    row.setdefault("applied_task", float("nan"))
    row["dataset_size"] = new_dataset.n
    return RunState(
        config=config,
        dataset=new_dataset,
        theta=theta,
        iteration=state.iteration + 1,
        rng_state=rng.bit_generator.state,
        metrics=state.metrics + [row],
        hypers=hypers,
    )


def run_training(config: ExperimentConfig, out_dir: str | None = None,
                 *, resume_state: RunState | None = None) -> RunState:
    """Execute the full loop (or continue one); checkpoints every iteration."""
    out_dir = out_dir or config.out_dir
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    state = resume_state if resume_state is not None else init_run(config)
    if out_dir and resume_state is None:
        save_run(state, os.path.join(out_dir, "checkpoint_000.json"))
    while state.iteration < config.n_outer_iterations:
        state = train_iteration(state)
        if out_dir:
            save_run(state, os.path.join(out_dir, f"checkpoint_{state.iteration:03d}.json"))
            save_run(state, os.path.join(out_dir, "state.json"))
            with open(os.path.join(out_dir, "metrics.csv"), "w") as fh:
                fh.write(metrics_csv(state.metrics))
    return state


# ---------------------------------------------------------------------------
# evaluation protocol
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EvalRow:
    eta: float
    mean_cost: float
    two_se: float
    n_diverged: int


@dataclass(frozen=True)
class EvalTable:
    label: str
    rows: tuple[EvalRow, ...]
    rollouts: int

    @property
    def grand_mean(self) -> float:
        return float(np.mean([r.mean_cost for r in self.rows]))

    def to_csv(self) -> str:
        lines = ["eta,mean_cost,two_se,n_diverged"]
        for r in self.rows:
            lines.append(f"{r.eta!r},{r.mean_cost!r},{r.two_se!r},{r.n_diverged}")
        return "\n".join(lines) + "\n"


def _eval_rollout(config, controller, cost, rng, horizon) -> tuple[float, bool]:
    """Mean per-step plant cost of one rollout; diverged steps cost 1."""
    p = config.plant_params()
    s = cartpole.sample_initial(rng, config.x0_sd)
    total = 0.0
    diverged = False
    for t in range(horizon):
        x = s.as_array()
        if diverged or np.max(np.abs(x)) > config.diverge_threshold:
            diverged = True
            total += 1.0
            continue
        u = float(controller(x))
        s = cartpole.step(p, s, u, rng)
        total += cost_mod.immediate(cost, s.as_array())
    return total / horizon, diverged


def _controller_for(config, artifact, mode, eta):
    if mode == "joint":
        return _mtps_controller(artifact, config.test_task(eta), eta)
    if mode in ("nn", "gating"):
        return lambda x: baselines.combined_control(artifact, x, np.array([eta]), mode=mode)[0]
    raise DimensionError(f"unknown evaluation mode {mode!r}")


def evaluate(artifact, config: ExperimentConfig, *, mode: str, label: str | None = None,
             etas=None, rollouts: int | None = None, horizon: int | None = None) -> EvalTable:
    """Plant-rollout evaluation over the test-task grid.

    For each test task, ``rollouts`` episodes start from the sampled
    initial distribution; the table reports mean per-step cost with twice
    the standard error, and diverged rollouts are flagged (their
    remaining steps cost 1).  Returns the per-task table; the grand mean
    is the average over tasks.
    """
    config.validate()
    etas = config.eval_etas() if etas is None else np.asarray(etas, dtype=float)
    rollouts = config.eval_rollouts if rollouts is None else int(rollouts)
    horizon = config.horizon if horizon is None else int(horizon)
    if rollouts < 1:
        raise DimensionError("need at least one evaluation rollout")
    if etas.size == 0:
        raise DimensionError("empty evaluation grid")
    rows = []
    for ti, eta in enumerate(etas):
        ctrl = _controller_for(config, artifact, mode, float(eta))
        cost = config.cost_builder()(config.test_task(float(eta)))
        per = np.empty(rollouts)
        n_div = 0
        for k in range(rollouts):
            rng = np.random.default_rng(
                np.random.SeedSequence((config.seed, 7002, ti, k))
            )
            per[k], div = _eval_rollout(config, ctrl, cost, rng, horizon)
            n_div += int(div)
        se = float(per.std(ddof=1) / math.sqrt(rollouts)) if rollouts > 1 else 0.0
        rows.append(EvalRow(float(eta), float(per.mean()), 2.0 * se, n_div))
    return EvalTable(label or mode, tuple(rows), rollouts)


def training_task_success(policy, config: ExperimentConfig, *, rollouts: int = 10,
                          tail_steps: int = 10) -> dict:
    """Swing-up check: per training task, final-tail mean plant cost per
    rollout and the count meeting the 0.25 threshold."""
    p = config.plant_params()
    out = {}
    for ti, eta in enumerate(config.train_tasks):
        ctrl = _mtps_controller(policy, config.test_task(float(eta)), float(eta))
        cost = config.cost_builder()(config.test_task(float(eta)))
        tails = []
        for k in range(rollouts):
            rng = np.random.default_rng(np.random.SeedSequence((config.seed, 7003, ti, k)))
            s = cartpole.sample_initial(rng, config.x0_sd)
            cs = []
            for _ in range(config.horizon):
                x = s.as_array()
                if np.max(np.abs(x)) > config.diverge_threshold:
                    cs.append(1.0)
                    continue
                s = cartpole.step(p, s, float(ctrl(x)), rng)
                cs.append(cost_mod.immediate(cost, s.as_array()))
            tails.append(float(np.mean(cs[-tail_steps:])))
        out[float(eta)] = {
            "tail_costs": tails,
            "n_success": int(sum(t <= 0.25 for t in tails)),
        }
    return out


def select_best_checkpoint(run_dir: str, config: ExperimentConfig, *, rollouts: int = 10):
    """Pick the checkpoint whose policy best solves the training tasks on
    the plant (lowest mean tail cost); returns (iteration, policy)."""
    shape = config.policy_shape()
    best = None
    for name in sorted(os.listdir(run_dir)):
        if not (name.startswith("checkpoint_") and name.endswith(".json")):
            continue
        st = load_run(os.path.join(run_dir, name))
        if st.iteration == 0:
            continue
        pol = policy_mod.unpack(st.theta, shape)
        succ = training_task_success(pol, config, rollouts=rollouts)
        score = float(np.mean([np.mean(v["tail_costs"]) for v in succ.values()]))
        if best is None or score < best[0]:
            best = (score, st.iteration, pol)
    if best is None:
        raise RunStateLoadError("no checkpoints found", field="run_dir")
    return best[1], best[2]


# ---------------------------------------------------------------------------
# baseline bank training
# ---------------------------------------------------------------------------


def local_config(config: ExperimentConfig, eta: float, *, n_outer: int, seed_offset: int) -> ExperimentConfig:
    """Single-task reduction of the pipeline used for the controller banks."""
    return dataclasses.replace(
        config,
        train_tasks=(float(eta),),
        sigma_eta=0.0,
        seed=config.seed + 1000 * (1 + seed_offset),
        n_outer_iterations=n_outer,
        opt_max_iters=config.locals_opt_max_iters,
        out_dir=None,
    )


def train_local_bank(config: ExperimentConfig, out_dir: str | None = None) -> baselines.LocalPolicyBank:
    """Independently train one controller per training task (M = 1 runs)."""
    config.validate()
    n_locals = len(config.train_tasks)
    if config.locals_budget_mode == "per-controller":
        n_outer = config.locals_outer_iterations
    else:
        n_outer = max(1, config.locals_outer_iterations // n_locals)
    entries = []
    shape = config.policy_shape()
    for i, eta in enumerate(config.train_tasks):
        sub = local_config(config, eta, n_outer=n_outer, seed_offset=i)
        sub_dir = os.path.join(out_dir, f"local_{i}") if out_dir else None
        state = run_training(sub, sub_dir)
        pol = policy_mod.unpack(state.theta, shape)
        entries.append((sub.tasks()[0], pol))
    bank = baselines.LocalPolicyBank(tuple(entries), kappa=config.kappa)
    if out_dir:
        with open(os.path.join(out_dir, "bank.json"), "w") as fh:
            fh.write(baselines.to_json(bank))
    return bank


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


def policy_slice_csv(policy, fixed_state: np.ndarray, etas, train_tasks) -> str:
    """Controls at one fixed state across the task grid (plus train markers)."""
    fixed_state = np.asarray(fixed_state, dtype=float)
    train_set = {round(float(e), 10) for e in train_tasks}
    lines = ["eta,u,is_train"]
    for eta in np.asarray(etas, dtype=float):
        g = np.array([eta]) - fixed_state[[0]]
        u = policy_mod.eval_policy(policy, np.concatenate([fixed_state, g]))[0]
        flag = 1 if round(float(eta), 10) in train_set else 0
        lines.append(f"{float(eta)!r},{u!r},{flag}")
    return "\n".join(lines) + "\n"


def write_report(run_dir: str, *, slice_points: int = 61):
    """Emit learning-curve CSV, policy slice CSV, and a JSON summary stub."""
    state = load_run(os.path.join(run_dir, "state.json"))
    config = state.config
    with open(os.path.join(run_dir, "learning_curve.csv"), "w") as fh:
        fh.write(metrics_csv(state.metrics))
    pol = policy_mod.unpack(state.theta, config.policy_shape())
    lo, hi, _ = config.eval_grid
    etas = np.linspace(lo, hi, slice_points)
    with open(os.path.join(run_dir, "policy_slice.csv"), "w") as fh:
        fh.write(policy_slice_csv(pol, np.zeros(_STATE_DIM), etas, config.train_tasks))
    return state


def run_full_experiment(config: ExperimentConfig, out_dir: str,
                        *, methods=("joint", "nn", "gating"), use_best_checkpoint: bool = True) -> dict:
    """Train the joint policy and the baseline bank, evaluate everything.

    Writes per-method cost tables and summary.json; returns the summary.
    """
    os.makedirs(out_dir, exist_ok=True)
    t_start = time.time()
    runtimes = {}
    summary = {
        "schema_version": SCHEMA_VERSION,
        "seed": config.seed,
        "grand_means": {},
        "runtimes": runtimes,
    }

    joint_dir = os.path.join(out_dir, "joint")
    t0 = time.time()
    state = run_training(config, joint_dir)
    runtimes["train_joint_s"] = time.time() - t0
    if use_best_checkpoint:
        best_it, pol = select_best_checkpoint(joint_dir, config)
        summary["joint_best_iteration"] = best_it
    else:
        pol = policy_mod.unpack(state.theta, config.policy_shape())
    with open(os.path.join(out_dir, "joint_policy.json"), "w") as fh:
        fh.write(policy_mod.to_json(pol))

    bank = None
    if "nn" in methods or "gating" in methods:
        t0 = time.time()
        bank = train_local_bank(config, os.path.join(out_dir, "bank"))
        runtimes["train_bank_s"] = time.time() - t0

    t0 = time.time()
    for mode in methods:
        artifact = pol if mode == "joint" else bank
        table = evaluate(artifact, config, mode=mode)
        with open(os.path.join(out_dir, f"eval_{mode}.csv"), "w") as fh:
            fh.write(table.to_csv())
        summary["grand_means"][mode] = table.grand_mean
    runtimes["evaluate_s"] = time.time() - t0

    summary["training_success"] = training_task_success(pol, config)
    runtimes["total_s"] = time.time() - t_start
    write_report(joint_dir)
    with open(os.path.join(out_dir, "summary.json"), "w") as fh:
        json.dump(summary, fh, sort_keys=True, indent=1)
    return summary

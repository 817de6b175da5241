"""GP forward dynamics: per-output SE-ARD regression on transition data.

Targets are successor-state deltas x_{t+1} - x_t; angle coordinates are
expanded to (sin, cos) pairs in the model-input representation so the
kernel sees a periodicity-respecting embedding.  Hyperparameters are
trained by marginal-likelihood maximization with seeded restarts.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

from . import optim
from .errors import DimensionError, ModelFitError, OptimizerError
from .gaussian import FeatureMap

_JITTERS = (0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6, 1e-5, 1e-4)
_FORMAT_VERSION = 1


@dataclass(frozen=True)
class TransitionDataset:
    """Rows of (state, control) inputs with successor-delta targets."""

    inputs: np.ndarray  # (n, D + F)
    targets: np.ndarray  # (n, D)
    state_dim: int
    control_dim: int

    def __post_init__(self):
        inputs = np.atleast_2d(np.asarray(self.inputs, dtype=float))
        targets = np.atleast_2d(np.asarray(self.targets, dtype=float))
        if inputs.shape[0] != targets.shape[0] or inputs.shape[0] < 1:
            raise DimensionError("inputs and targets must have the same nonzero row count")
        if inputs.shape[1] != self.state_dim + self.control_dim:
            raise DimensionError(
                f"inputs have {inputs.shape[1]} columns, expected "
                f"{self.state_dim + self.control_dim}"
            )
        if targets.shape[1] != self.state_dim:
            raise DimensionError("targets must have state_dim columns")
        if not (np.all(np.isfinite(inputs)) and np.all(np.isfinite(targets))):
            raise DimensionError("non-finite entries in transition data")
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "targets", targets)

    @property
    def n(self) -> int:
        return self.inputs.shape[0]

    def extend(self, inputs, targets) -> "TransitionDataset":
        return TransitionDataset(
            np.vstack([self.inputs, np.atleast_2d(inputs)]),
            np.vstack([self.targets, np.atleast_2d(targets)]),
            self.state_dim,
            self.control_dim,
        )


@dataclass(frozen=True)
class GPModel:
    """Fitted dynamics model: dataset, per-output hyperparameters, caches."""

    dataset: TransitionDataset
    angle_idx: tuple[int, ...]
    log_ell: np.ndarray  # (E, Dm)
    log_sf2: np.ndarray  # (E,)
    log_sn2: np.ndarray  # (E,)
    model_inputs: np.ndarray = field(repr=False, default=None)  # (n, Dm)
    chol: np.ndarray = field(repr=False, default=None)  # (E, n, n)
    beta: np.ndarray = field(repr=False, default=None)  # (E, n)

    @property
    def input_map(self) -> FeatureMap:
        return model_input_map(self.dataset.state_dim, self.dataset.control_dim, self.angle_idx)

    @property
    def output_dim(self) -> int:
        return self.dataset.state_dim

    @property
    def raw_input_dim(self) -> int:
        return self.dataset.state_dim + self.dataset.control_dim

    @property
    def model_input_dim(self) -> int:
        return self.model_inputs.shape[1]

    @property
    def noise_var(self) -> np.ndarray:
        return np.exp(self.log_sn2)


def model_input_map(state_dim: int, control_dim: int, angle_idx: tuple[int, ...]) -> FeatureMap:
    """Raw (state, control) -> model input: non-angle states, controls, trig pairs."""
    angle_idx = tuple(int(i) for i in angle_idx)
    if any(i < 0 or i >= state_dim for i in angle_idx):
        raise DimensionError("angle index outside the state block")
    lin = tuple(i for i in range(state_dim) if i not in angle_idx) + tuple(
        range(state_dim, state_dim + control_dim)
    )
    return FeatureMap(in_dim=state_dim + control_dim, lin=lin, ang=angle_idx)


def _chol_with_jitter(kn: np.ndarray):
    """Cholesky with escalating diagonal jitter (1e-10 .. 1e-4, diag-scaled)."""
    scale = max(float(np.mean(np.diag(kn))), 1.0)
    for jit in _JITTERS:
        try:
            return np.linalg.cholesky(kn + jit * scale * np.eye(kn.shape[0])), jit * scale
        except np.linalg.LinAlgError:
            continue
    raise ModelFitError("Cholesky failed after jitter escalation up to 1e-4")


def _sqdists(x: np.ndarray) -> np.ndarray:
    diff = x[:, None, :] - x[None, :, :]
    return diff * diff  # (n, n, d)


def _kernel(sqd, log_ell, log_sf2):
    ilam = np.exp(-2.0 * log_ell)
    return np.exp(log_sf2) * np.exp(-0.5 * np.tensordot(sqd, ilam, axes=(2, 0)))


def _lml_and_grad(sqd, y, hyp):
    """Log marginal likelihood and gradient wrt (log_ell..., log_sf2, log_sn2)."""
    d = sqd.shape[2]
    log_ell, log_sf2, log_sn2 = hyp[:d], hyp[d], hyp[d + 1]
    n = y.size
    k = _kernel(sqd, log_ell, log_sf2)
    kn = k + np.exp(log_sn2) * np.eye(n)
    chol, _ = _chol_with_jitter(kn)
    alpha = cho_solve((chol, True), y)
    lml = (
        -0.5 * float(y @ alpha)
        - float(np.sum(np.log(np.diag(chol))))
        - 0.5 * n * np.log(2.0 * np.pi)
    )
    kinv = cho_solve((chol, True), np.eye(n))
    a_mat = np.outer(alpha, alpha) - kinv
    grad = np.empty(d + 2)
    ilam = np.exp(-2.0 * log_ell)
    for j in range(d):
        grad[j] = 0.5 * float(np.sum(a_mat * (k * sqd[:, :, j] * ilam[j])))
    grad[d] = 0.5 * float(np.sum(a_mat * k))
    grad[d + 1] = 0.5 * np.exp(log_sn2) * float(np.trace(a_mat))
    return lml, grad


def log_marginal_likelihood(model: GPModel, d: int):
    """LML of output d at the model's hyperparameters, with gradient.

    The gradient is with respect to the log-hyperparameters in the order
    (log lengthscales, log signal variance, log noise variance).
    """
    sqd = _sqdists(model.model_inputs)
    hyp = np.concatenate([model.log_ell[d], [model.log_sf2[d]], [model.log_sn2[d]]])
    return _lml_and_grad(sqd, model.dataset.targets[:, d], hyp)


@dataclass(frozen=True)
class GPFitOptions:
    restarts: int = 3
    max_iters: int = 200
    grad_tol: float = 1e-5
    seed: int = 0
    angle_idx: tuple[int, ...] = ()
    # warm start: (log_ell (E, Dm), log_sf2 (E,), log_sn2 (E,)); replaces
    # heuristic init and disables restarts when given
    init: tuple | None = None


def fit(dataset: TransitionDataset, opts: GPFitOptions = GPFitOptions()) -> GPModel:
    """Train per-output SE-ARD GPs by maximizing the marginal likelihood."""
    if dataset.n < 2:
        raise ModelFitError("need at least 2 transitions to fit a model")
    fm = model_input_map(dataset.state_dim, dataset.control_dim, tuple(opts.angle_idx))
    x = fm.apply(dataset.inputs)
    sqd = _sqdists(x)
    n, dm = x.shape
    e_out = dataset.state_dim
    rng = np.random.default_rng(opts.seed)
    log_std = np.log(np.maximum(np.std(x, axis=0), 1e-3))

    log_ell = np.empty((e_out, dm))
    log_sf2 = np.empty(e_out)
    log_sn2 = np.empty(e_out)
    for d in range(e_out):
        y = dataset.targets[:, d]
        if opts.init is not None:
            starts = [np.concatenate([opts.init[0][d], [opts.init[1][d]], [opts.init[2][d]]])]
        else:
            ell0 = np.log(np.maximum(np.std(x, axis=0), 1e-2))
            sf0 = np.log(max(float(np.var(y)), 1e-6))
            sn0 = sf0 - 2.0 * np.log(10.0)
            base = np.concatenate([ell0, [sf0], [sn0]])
            starts = [base] + [
                base + rng.normal(scale=0.5, size=base.size) for _ in range(opts.restarts - 1)
            ]

        best = None
        for start in starts:
            try:
                res = optim.minimize(
                    lambda h: _neg_lml(sqd, y, h, log_std),
                    start,
                    max_iters=opts.max_iters,
                    grad_tol=opts.grad_tol,
                )
            except OptimizerError as exc:
                raise ModelFitError(f"hyperparameter search failed for output {d}: {exc}") from exc
            if best is None or res.value < best.value:
                best = res
        hyp = best.theta
        log_ell[d] = hyp[:dm]
        log_sf2[d] = hyp[dm]
        log_sn2[d] = hyp[dm + 1]

    return _build_caches(dataset, tuple(opts.angle_idx), log_ell, log_sf2, log_sn2, x)


# The training objective carries two soft curbs mirroring standard practice
# for GP dynamics models: a signal-to-noise cap (noiseless data otherwise
# drives sn2 -> 0 and the Gram matrix numerically singular) and a
# lengthscale cap relative to the input spread (sparse trajectory data
# otherwise collapses into an overconfident quasi-linear fit whose
# predictive variance never grows away from the data).
_SNR_MAX = 10000.0
_LS_CAP = 10.0
_CURB_POWER = 30


def _neg_lml(sqd, y, hyp, log_std=None):
    try:
        v, g = _lml_and_grad(sqd, y, hyp)
    except ModelFitError:
        return np.inf, np.zeros_like(hyp)
    d = sqd.shape[2]
    neg = -g
    pen = 0.0
    ratio = 0.5 * (hyp[d] - hyp[d + 1]) / np.log(_SNR_MAX)
    pen += ratio**_CURB_POWER
    dpen = _CURB_POWER * ratio ** (_CURB_POWER - 1) * 0.5 / np.log(_SNR_MAX)
    neg[d] += dpen
    neg[d + 1] -= dpen
    if log_std is not None:
        r = (hyp[:d] - log_std - np.log(_LS_CAP)) / np.log(_LS_CAP)
        pen += float(np.sum(r**_CURB_POWER))
        neg[:d] += _CURB_POWER * r ** (_CURB_POWER - 1) / np.log(_LS_CAP)
    return -v + pen, neg


def condition(model: GPModel, dataset: TransitionDataset) -> GPModel:
    """Rebuild caches on new data with the model's hyperparameters fixed."""
    fm = model_input_map(dataset.state_dim, dataset.control_dim, model.angle_idx)
    x = fm.apply(dataset.inputs)
    return _build_caches(dataset, model.angle_idx, model.log_ell, model.log_sf2, model.log_sn2, x)


def with_hyperparameters(
    dataset: TransitionDataset,
    angle_idx: tuple[int, ...],
    log_ell: np.ndarray,
    log_sf2: np.ndarray,
    log_sn2: np.ndarray,
) -> GPModel:
    """Model with explicitly chosen hyperparameters (no fitting)."""
    angle_idx = tuple(angle_idx)
    fm = model_input_map(dataset.state_dim, dataset.control_dim, angle_idx)
    return _build_caches(
        dataset,
        angle_idx,
        np.atleast_2d(np.asarray(log_ell, dtype=float)),
        np.atleast_1d(np.asarray(log_sf2, dtype=float)),
        np.atleast_1d(np.asarray(log_sn2, dtype=float)),
        fm.apply(dataset.inputs),
    )


def _build_caches(dataset, angle_idx, log_ell, log_sf2, log_sn2, x):
    n = x.shape[0]
    e_out = dataset.state_dim
    sqd = _sqdists(x)
    chol = np.empty((e_out, n, n))
    beta = np.empty((e_out, n))
    for d in range(e_out):
        k = _kernel(sqd, log_ell[d], log_sf2[d])
        kn = k + np.exp(log_sn2[d]) * np.eye(n)
        chol[d], jit = _chol_with_jitter(kn)
        kn_eff = kn + jit * np.eye(n)
        y = dataset.targets[:, d]
        b = cho_solve((chol[d], True), y)
        ynorm = max(np.linalg.norm(y), 1e-300)
        # iterative refinement: ill-conditioned near-noiseless fits need it
        # to hit the residual contract
        for _ in range(3):
            r = y - kn_eff @ b
            if np.linalg.norm(r) / ynorm <= 1e-12:
                break
            b = b + cho_solve((chol[d], True), r)
        beta[d] = b
        resid = np.linalg.norm(kn_eff @ b - y) / ynorm
        if resid > 1e-8 and np.linalg.norm(y) > 1e-12:
            raise ModelFitError(f"dual weights residual {resid:.2e} for output {d}")
    return GPModel(
        dataset=dataset,
        angle_idx=tuple(angle_idx),
        log_ell=log_ell.copy(),
        log_sf2=log_sf2.copy(),
        log_sn2=log_sn2.copy(),
        model_inputs=x,
        chol=chol,
        beta=beta,
    )


def predict_point(model: GPModel, z: np.ndarray):
    """GP predictive distribution at a deterministic raw (state, control) input.

    Returns (mean (E,), var (E,)); outputs are mutually independent given
    z, and the variance includes the learned noise variance.
    """
    z = np.asarray(z, dtype=float)
    if z.shape != (model.raw_input_dim,):
        raise DimensionError(f"expected input of dim {model.raw_input_dim}")
    zf = model.input_map.apply(z)
    diff = model.model_inputs - zf[None, :]
    e_out = model.output_dim
    mean = np.empty(e_out)
    var = np.empty(e_out)
    for d in range(e_out):
        ilam = np.exp(-2.0 * model.log_ell[d])
        k = np.exp(model.log_sf2[d]) * np.exp(-0.5 * (diff * diff) @ ilam)
        mean[d] = float(k @ model.beta[d])
        half = solve_triangular(model.chol[d], k, lower=True)
        var[d] = float(np.exp(model.log_sf2[d]) - half @ half + np.exp(model.log_sn2[d]))
    return mean, var


def farthest_point_subset(x: np.ndarray, k: int) -> np.ndarray:
    """Greedy max-min-distance subset of row indices (deterministic, starts at 0)."""
    n = x.shape[0]
    if k >= n:
        return np.arange(n)
    chosen = [0]
    d2 = np.sum((x - x[0]) ** 2, axis=1)
    for _ in range(k - 1):
        nxt = int(np.argmax(d2))
        chosen.append(nxt)
        d2 = np.minimum(d2, np.sum((x - x[nxt]) ** 2, axis=1))
    return np.array(sorted(chosen))


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def to_json(model: GPModel) -> str:
    doc = {
        "format_version": _FORMAT_VERSION,
        "state_dim": model.dataset.state_dim,
        "control_dim": model.dataset.control_dim,
        "angle_idx": list(model.angle_idx),
        "inputs": model.dataset.inputs.tolist(),
        "targets": model.dataset.targets.tolist(),
        "log_ell": model.log_ell.tolist(),
        "log_sf2": model.log_sf2.tolist(),
        "log_sn2": model.log_sn2.tolist(),
    }
    return json.dumps(doc, sort_keys=True)


def from_json(text: str) -> GPModel:
    doc = json.loads(text)
    if doc.get("format_version") != _FORMAT_VERSION:
        raise ModelFitError(f"unsupported model format version {doc.get('format_version')}")
    dataset = TransitionDataset(
        np.array(doc["inputs"], dtype=float),
        np.array(doc["targets"], dtype=float),
        int(doc["state_dim"]),
        int(doc["control_dim"]),
    )
    angle_idx = tuple(int(i) for i in doc["angle_idx"])
    fm = model_input_map(dataset.state_dim, dataset.control_dim, angle_idx)
    return _build_caches(
        dataset,
        angle_idx,
        np.array(doc["log_ell"], dtype=float),
        np.array(doc["log_sf2"], dtype=float),
        np.array(doc["log_sn2"], dtype=float),
        fm.apply(dataset.inputs),
    )

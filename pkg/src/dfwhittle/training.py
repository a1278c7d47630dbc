"""Two-stage and decision-focused training of the kernel predictor.

Decision-focused gradient for one instance, composed stage by stage::

    features -> kernels P -> Whittle table W -> soft pull probabilities at
    every logged state -> importance-sampling value

and backwards through the same stages (estimator gradient, soft top-k
backward, Whittle Jacobian, network backprop).
"""
from __future__ import annotations

import csv
import io
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .core import make_rng, stack_trajectories
from .datagen import InstanceData
from .evaluation import (EvalReport, StrictWhittlePolicy, cwpdis_eval, cwpdis_eval_single,
                         empirical_kernels, gather_scores, simulate_eval, strict_pulls)
from .predictor import PredictorModel, backprop, forward, nll_loss, predict
from .softtopk import SoftTopKConfig, soft_topk_backward, soft_topk_forward
from .whittle import BRACKET_TOL, compute_whittle
from .whittle_diff import compute_jacobian

LOG_COLUMNS = ("epoch", "split", "nll", "is_eval", "soft_is_eval", "sim_eval", "ms_per_step")
METHODS = ("two-stage", "df-whittle")
VARIANTS = ("cwpdis", "single-trajectory")

# sub-stream keys under the training seed
_DROPOUT, _SIMULATION = 0, 1


class TrainingError(RuntimeError):
    """A numeric failure inside one stage of the training chain."""

    def __init__(self, stage: str, msg: str, instance: int | None = None):
        where = f" (instance {instance})" if instance is not None else ""
        super().__init__(f"[{stage}] {msg}{where}")
        self.stage = stage
        self.instance = instance


@dataclass(frozen=True)
class TrainConfig:
    method: str = "df-whittle"
    epochs: int = 50
    learning_rate: float = 0.01
    topk: SoftTopKConfig = field(default_factory=SoftTopKConfig)
    gamma: float | None = None  # None uses each instance's discount
    seed: int = 0
    split_seed: int = 0
    eval_variant: str = "cwpdis"
    sim_episodes: int = 100
    eval_every: int = 1
    dropout: bool = True
    bisect_tol: float = BRACKET_TOL

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")
        if self.eval_variant not in VARIANTS:
            raise ValueError(f"eval_variant must be one of {VARIANTS}")
        if self.epochs < 0 or self.learning_rate < 0:
            raise ValueError("epochs and learning_rate must be non-negative")
        if self.eval_every < 1:
            raise ValueError("eval_every must be at least 1")

    def to_json(self) -> dict:
        out = asdict(self)
        out["topk"] = asdict(self.topk)
        return out


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)
    best_epoch: int | None = None
    best_params: dict | None = field(default=None, repr=False)

    def add(self, epoch: int, split: str, metrics: "EvalMetrics", ms_per_step: float) -> None:
        self.rows.append({"epoch": epoch, "split": split, "nll": metrics.nll, "is_eval": metrics.is_eval,
                          "soft_is_eval": metrics.soft_is_eval, "sim_eval": metrics.sim_eval,
                          "ms_per_step": ms_per_step})

    def column(self, split: str, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows if r["split"] == split])

    def epochs(self, split: str) -> np.ndarray:
        return np.array([r["epoch"] for r in self.rows if r["split"] == split])

    def to_csv(self, timing: bool = True) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=LOG_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for r in self.rows:
            writer.writerow({**r, "ms_per_step": r["ms_per_step"] if timing else ""})
        return buf.getvalue()

    def summary(self) -> dict:
        last = {}
        for r in self.rows:
            last[r["split"]] = {k: r[k] for k in LOG_COLUMNS if k != "split"}
        return {"best_epoch": self.best_epoch, "final": last}


@dataclass(frozen=True)
class EvalMetrics:
    nll: float
    is_eval: float
    soft_is_eval: float
    sim_eval: float
    per_instance: list = field(default_factory=list, repr=False)


def split_dataset(num_instances: int, seed: int = 0) -> dict[str, np.ndarray]:
    """Seeded 70/10/20 train/validation/test split by instance."""
    order = make_rng(seed).permutation(num_instances)
    n_train = int(round(0.7 * num_instances))
    n_val = int(round(0.1 * num_instances))
    return {"train": np.sort(order[:n_train]), "val": np.sort(order[n_train:n_train + n_val]),
            "test": np.sort(order[n_train + n_val:])}


def _gamma(cfg: TrainConfig, item: InstanceData) -> float:
    return item.instance.discount if cfg.gamma is None else cfg.gamma


def _check(stage: str, *arrays, instance=None):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise TrainingError(stage, "non-finite values", instance)


def estimate(pull_probs, logs: dict, gamma: float, variant: str) -> EvalReport:
    """Importance-sampling value of ``pull_probs`` ``(J, T, N)`` with its gradient.

    The single-trajectory variant averages the per-trajectory estimates.
    """
    if variant == "cwpdis" and logs["states"].shape[0] >= 2:
        return cwpdis_eval(pull_probs, logs, gamma)
    reports = [cwpdis_eval_single(pull_probs[j], {k: v[j:j + 1] for k, v in logs.items()}, gamma)
               for j in range(logs["states"].shape[0])]
    grad = np.concatenate([r.gradient for r in reports]) / len(reports)
    return EvalReport(float(np.mean([r.value for r in reports])), "single-trajectory",
                      weights=np.concatenate([r.weights for r in reports]), gradient=grad)


def df_gradient(model: PredictorModel, item: InstanceData, cfg: TrainConfig, rng=None,
                index: int | None = None):
    """Importance-sampling value of the soft Whittle policy and its gradient
    with respect to every model weight; returns ``(value, GradientSet)``."""
    inst = item.instance
    gamma = _gamma(cfg, item)
    logs = stack_trajectories(item.trajectories)
    states = logs["states"]
    n = inst.num_arms
    try:
        kernels, cache = forward(model, item.features, rng)
        _check("predict", kernels, instance=index)
        table = compute_whittle(kernels, inst.reward, gamma, tol=cfg.bisect_tol)
    except (ValueError, ArithmeticError) as err:
        raise TrainingError("whittle", str(err), index) from err
    scores = gather_scores(table.indices, states)
    try:
        probs, topk_state = soft_topk_forward(scores, inst.budget, cfg.topk)
        report = estimate(probs, logs, gamma, cfg.eval_variant)
        _check("evaluate", report.value, report.gradient, instance=index)
        d_scores = soft_topk_backward(topk_state, report.gradient)
        _check("soft-topk", d_scores, instance=index)
    except (ValueError, ArithmeticError) as err:
        raise TrainingError("policy", str(err), index) from err
    d_index = np.zeros((n, inst.num_states))
    np.add.at(d_index, (np.broadcast_to(np.arange(n), states.shape), states), d_scores)
    try:
        jac = compute_jacobian(kernels, inst.reward, gamma, table)
    except (ValueError, ArithmeticError) as err:
        raise TrainingError("whittle-diff", str(err), index) from err
    d_kernels = np.einsum("nu,nusat->nsat", d_index, jac.index_grad)
    _check("whittle-diff", d_kernels, instance=index)
    grads = backprop(model, item.features, d_kernels, cache)
    if not grads.is_finite():
        raise TrainingError("backprop", "non-finite gradient", index)
    return report.value, grads


def nll_gradient(model: PredictorModel, item: InstanceData, rng=None, index: int | None = None):
    """Predictive loss and its gradient with respect to the weights."""
    kernels, cache = forward(model, item.features, rng)
    loss, d_kernels = nll_loss(kernels, item.trajectories)
    if not np.isfinite(loss):
        raise TrainingError("nll", f"loss is {loss}", index)
    grads = backprop(model, item.features, d_kernels, cache)
    if not grads.is_finite():
        raise TrainingError("backprop", "non-finite gradient", index)
    return loss, grads


def evaluate_instance(kernels, item: InstanceData, cfg: TrainConfig, sim_seed: int = 0) -> dict:
    """Predictive loss, strict and soft IS values, and simulated value on empirical kernels."""
    inst = item.instance
    gamma = _gamma(cfg, item)
    logs = stack_trajectories(item.trajectories)
    table = compute_whittle(kernels, inst.reward, gamma)
    scores = gather_scores(table.indices, logs["states"])
    strict = estimate(strict_pulls(scores, inst.budget), logs, gamma, cfg.eval_variant).value
    soft = estimate(soft_topk_forward(scores, inst.budget, cfg.topk)[0], logs, gamma, cfg.eval_variant).value
    sim = se = float("nan")
    if cfg.sim_episodes > 0:
        emp, _ = empirical_kernels(logs, inst.num_states)
        report = simulate_eval(emp, inst.reward, StrictWhittlePolicy(table, inst.budget), gamma, inst.horizon,
                               cfg.sim_episodes, seed=sim_seed, initial_states=logs["states"][:, 0])
        sim, se = report.value, report.std_error
    return {"nll": nll_loss(kernels, logs)[0], "is_eval": strict, "soft_is_eval": soft, "sim_eval": sim,
            "sim_se": se}


def evaluate_model(data: list[InstanceData], model: PredictorModel | None, cfg: TrainConfig,
                   kernels_fn=None) -> EvalMetrics:
    """Mean metrics over ``data``; ``kernels_fn(item)`` overrides the model (e.g. true kernels)."""
    per = []
    for j, item in enumerate(data):
        kernels = kernels_fn(item) if kernels_fn is not None else predict(model, item.features)
        per.append(evaluate_instance(kernels, item, cfg, sim_seed=_sim_seed(cfg, j)))
    if not per:
        nan = float("nan")
        return EvalMetrics(nan, nan, nan, nan, [])
    mean = {k: float(np.mean([p[k] for p in per])) for k in ("nll", "is_eval", "soft_is_eval", "sim_eval")}
    return EvalMetrics(mean["nll"], mean["is_eval"], mean["soft_is_eval"], mean["sim_eval"], per)


def _sim_seed(cfg: TrainConfig, j: int) -> int:
    return int(make_rng(cfg.seed, _SIMULATION, j).integers(0, 2**63 - 1))


def _log_epoch(log, epoch, data, splits, model, cfg, ms):
    for name, idx in splits.items():
        if len(idx):
            log.add(epoch, name, evaluate_model([data[i] for i in idx], model, cfg), ms)


def _train(data, model, cfg, splits, step_fn, sign):
    model = model.copy()
    splits = splits if splits is not None else split_dataset(len(data), cfg.split_seed)
    log = TrainLog()
    _log_epoch(log, 0, data, splits, model, cfg, 0.0)
    best = -np.inf

    def track(epoch):
        nonlocal best
        vals = [r["is_eval"] for r in log.rows if r["epoch"] == epoch and r["split"] == "val"]
        if vals and vals[0] > best:
            best = vals[0]
            log.best_epoch = epoch
            log.best_params = {k: v.copy() for k, v in model.params.items()}

    track(0)
    for epoch in range(1, cfg.epochs + 1):
        rng = make_rng(cfg.seed, _DROPOUT, epoch) if cfg.dropout else None
        times = []
        for i in splits["train"]:
            start = time.perf_counter()
            _, grads = step_fn(model, data[i], rng, int(i))
            model.step(grads, sign * cfg.learning_rate)
            times.append(1e3 * (time.perf_counter() - start))
        if epoch % cfg.eval_every == 0 or epoch == cfg.epochs:
            _log_epoch(log, epoch, data, splits, model, cfg, float(np.mean(times)) if times else 0.0)
            track(epoch)
    return model, log


def train_two_stage(data: list[InstanceData], model: PredictorModel, cfg: TrainConfig, splits=None):
    """Gradient descent on the predictive loss, one instance at a time."""
    return _train(data, model, cfg, splits, lambda m, item, rng, i: nll_gradient(m, item, rng, i), -1.0)


def train_df_whittle(data: list[InstanceData], model: PredictorModel, cfg: TrainConfig, splits=None):
    """Gradient ascent on the importance-sampling value of the soft Whittle policy."""
    return _train(data, model, cfg, splits, lambda m, item, rng, i: df_gradient(m, item, cfg, rng, i), 1.0)


def train(data, model, cfg: TrainConfig, splits=None):
    fn = train_two_stage if cfg.method == "two-stage" else train_df_whittle
    return fn(data, model, cfg, splits)

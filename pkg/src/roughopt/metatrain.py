"""Outer-loop training of the learned optimizer.

The gradient estimators and the genetic step work on flat parameter vectors
and a loss callback, so they serve both the learned optimizer and scalar
hyperparameter tuning.  A callback receives stacked parameter vectors
``thetas`` (K, D) and sub-batch ids ``groups`` (K,) and returns K losses;
equal group ids mean common random initializations.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .learnedopt import (
    FeatureConfig,
    LearnedOptimizer,
    LearnedOptParams,
    init_params,
    load_checkpoint,
    save_checkpoint,
)
from .systems import ConfigurationError, RngStream
from .tasks import TaskSpec, harmonic_init_batch, init_streams

log = logging.getLogger(__name__)

STRATEGIES = ("es", "esmc", "ga")

Objective = Callable[[np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class MetaConfig:
    """Outer-loop settings; ``population`` counts loss evaluations per update."""

    strategy: str = "es"
    sigma: float = 0.1
    population: int = 80
    inner_steps: int = 50000
    batch_target: int = 80
    ga_batch: int = 8
    lr0: float = 1e-2
    decay: float = 0.98
    decay_every: int = 10
    total: int = 1000
    checkpoint_every: int = 25
    tasks: tuple = ("lj13",)
    seed: int = 0
    features: FeatureConfig = field(default_factory=FeatureConfig)

    def __post_init__(self):
        object.__setattr__(self, "tasks", tuple(self.tasks))
        if self.strategy not in STRATEGIES:
            raise ConfigurationError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if not self.sigma > 0:
            raise ConfigurationError("sigma must be positive")
        if self.strategy in ("es", "esmc") and self.population % 2:
            raise ConfigurationError("ES populations must be even (antithetic pairs)")
        for name in ("population", "inner_steps", "batch_target", "ga_batch", "decay_every", "checkpoint_every"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be at least 1")
        if self.total < 0:
            raise ConfigurationError("total must be non-negative")
        if not self.tasks:
            raise ConfigurationError("at least one task is needed")

    @property
    def n_pairs(self) -> int:
        return self.population // 2

    def to_dict(self) -> dict:
        doc = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "features"}
        doc["tasks"] = list(self.tasks)
        doc["features"] = self.features.to_dict()
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "MetaConfig":
        doc = dict(doc)
        unknown = set(doc) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigurationError(f"unknown training options: {sorted(unknown)}")
        if "features" in doc:
            doc["features"] = FeatureConfig.from_dict(doc["features"])
        return cls(**doc)


# -- outer optimizer -----------------------------------------------------------------

def outer_lr(t: int, lr0: float = 1e-2, decay: float = 0.98, every: int = 10) -> float:
    """Step-decayed learning rate ``lr0 * decay ** (t // every)``."""
    if t < 0:
        raise ValueError("t must be non-negative")
    return lr0 * decay ** (t // every)


@dataclass(frozen=True)
class OuterAdam:
    """Adam on a flat parameter vector with a step-decayed learning rate."""

    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr0: float = 1e-2
    decay: float = 0.98
    every: int = 10
    b1: float = 0.9
    b2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def start(cls, theta, lr0: float = 1e-2, decay: float = 0.98, every: int = 10) -> "OuterAdam":
        z = np.zeros_like(np.asarray(theta, dtype=np.float64))
        return cls(z, z.copy(), 0, lr0, decay, every)

    @property
    def lr(self) -> float:
        return outer_lr(self.t, self.lr0, self.decay, self.every)

    def step(self, theta, grad) -> tuple[np.ndarray, "OuterAdam"]:
        lr = self.lr
        t = self.t + 1
        m = self.b1 * self.m + (1.0 - self.b1) * grad
        v = self.b2 * self.v + (1.0 - self.b2) * grad * grad
        mhat = m / (1.0 - self.b1**t)
        vhat = v / (1.0 - self.b2**t)
        return theta - lr * mhat / (np.sqrt(vhat) + self.eps), replace(self, m=m, v=v, t=t)

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["m"], doc["v"] = self.m.tolist(), self.v.tolist()
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "OuterAdam":
        doc = dict(doc)
        doc["m"], doc["v"] = np.asarray(doc["m"], dtype=np.float64), np.asarray(doc["v"], dtype=np.float64)
        return cls(**doc)


def outer_adam_step(opt_state: OuterAdam, theta, grad, t: Optional[int] = None):
    """Functional form; ``t`` (if given) overrides the state's step count."""
    if t is not None:
        opt_state = replace(opt_state, t=int(t))
    return opt_state.step(theta, grad)


# -- gradient estimators ---------------------------------------------------------

@dataclass
class Estimate:
    """A meta-gradient estimate and the losses behind it."""

    grad: np.ndarray
    plus: np.ndarray
    minus: np.ndarray
    base: Optional[np.ndarray] = None
    evaluations: int = 0

    @property
    def loss(self) -> float:
        """Loss reported for the update: the unperturbed one when known."""
        if self.base is not None:
            return float(np.mean(self.base))
        return float(np.mean(np.concatenate([self.plus, self.minus])))


def _perturbations(theta, sigma, n_pairs, rng: RngStream) -> np.ndarray:
    if n_pairs < 1:
        raise ValueError("n_pairs must be at least 1")
    return sigma * rng.generator().standard_normal((n_pairs, np.size(theta)))


def _antithetic(theta, objective: Objective, sigma, n_pairs, rng, with_base: bool) -> Estimate:
    theta = np.asarray(theta, dtype=np.float64)
    eps = _perturbations(theta, sigma, n_pairs, rng)
    pairs = np.arange(n_pairs)
    thetas = [theta + eps, theta - eps]
    groups = [pairs, pairs]
    if with_base:
        thetas.append(np.repeat(theta[None], n_pairs, axis=0))
        groups.append(pairs)
    losses = np.asarray(objective(np.concatenate(thetas), np.concatenate(groups)), dtype=np.float64)
    plus, minus = losses[:n_pairs], losses[n_pairs:2 * n_pairs]
    base = losses[2 * n_pairs:] if with_base else None
    if with_base:
        lp, lm = np.minimum(base, plus), np.minimum(base, minus)
    else:
        lp, lm = plus, minus
    grad = ((lp - lm) / (2.0 * sigma**2)) @ eps / n_pairs
    return Estimate(grad, plus, minus, base, len(losses))


def es_gradient(theta, objective: Objective, sigma: float, n_pairs: int, rng: RngStream,
                full_output: bool = False):
    """Antithetic ES estimate ``mean_k (L(th+e_k) - L(th-e_k)) / (2 sigma^2) e_k``.

    Each pair ``k`` is evaluated on its own sub-batch ``k`` (shared by +e and -e).
    """
    est = _antithetic(theta, objective, sigma, n_pairs, rng, with_base=False)
    return est if full_output else est.grad


def esmc_gradient(theta, objective: Objective, sigma: float, n_pairs: int, rng: RngStream,
                  full_output: bool = False):
    """ES with each perturbed loss clipped at the unperturbed loss of its sub-batch."""
    est = _antithetic(theta, objective, sigma, n_pairs, rng, with_base=True)
    return est if full_output else est.grad


def pair_contribution(base: float, plus: float, minus: float, eps, sigma: float, clip: bool = True) -> np.ndarray:
    """One antithetic pair's term of the estimate, clipped or not."""
    lp, lm = (min(base, plus), min(base, minus)) if clip else (plus, minus)
    return (lp - lm) / (2.0 * sigma**2) * np.asarray(eps, dtype=np.float64)


@dataclass
class Generation:
    theta: np.ndarray
    loss: float
    incumbent_loss: float
    accepted: bool
    evaluations: int


def ga_generation(theta, population: int, sigma: float, objective: Objective, rng: RngStream) -> Generation:
    """Elitist step: the best of ``population`` Gaussian children replaces ``theta`` only if it is better.

    All members and the incumbent share one batch (group 0).
    """
    if population < 1:
        raise ValueError("population must be at least 1")
    theta = np.asarray(theta, dtype=np.float64)
    kids = theta + _perturbations(theta, sigma, population, rng)
    thetas = np.concatenate([theta[None], kids])
    losses = np.asarray(objective(thetas, np.zeros(len(thetas), np.int64)), dtype=np.float64)
    best = int(np.argmin(losses[1:]))
    incumbent = float(losses[0])
    if losses[1 + best] < incumbent:
        return Generation(kids[best].copy(), float(losses[1 + best]), incumbent, True, len(losses))
    return Generation(theta.copy(), incumbent, incumbent, False, len(losses))


# -- batches and the meta-loss ------------------------------------------------------

@dataclass
class BatchItem:
    task: TaskSpec
    positions: np.ndarray


def sample_batch(tasks: Sequence[TaskSpec], target: int, rng: RngStream) -> list[BatchItem]:
    """``target // m`` harmonic initializations of each of the ``m`` tasks, task-major."""
    m = len(tasks)
    if m < 1:
        raise ConfigurationError("need at least one task")
    if m > target:
        raise ConfigurationError(f"{m} tasks do not fit a batch of {target}")
    copies = target // m
    out = []
    for i, task in enumerate(tasks):
        x0 = harmonic_init_batch(task, init_streams(rng.spawn(i), copies))
        out.extend(BatchItem(task, x) for x in x0)
    return out


@dataclass
class UnrollCounter:
    unrolls: int = 0
    inner_steps: int = 0
    diverged: int = 0


def evaluate_members(thetas, fc: FeatureConfig, items: Sequence[Sequence[BatchItem]], steps: int,
                     counter: Optional[UnrollCounter] = None) -> np.ndarray:
    """Mean normalized final energy of ``thetas[k]`` over ``items[k]``.

    Unrolls are grouped by task and run as one stacked batch per task.
    """
    thetas = np.atleast_2d(thetas)
    sums = np.zeros(len(thetas))
    by_task: dict[str, list] = {}
    for k, its in enumerate(items):
        for it in its:
            if it.task.normalizer is None:
                raise ConfigurationError(f"task {it.task.name} has no normalizer")
            by_task.setdefault(it.task.name, []).append((k, it))
    for name in sorted(by_task):
        rows = by_task[name]
        task = rows[0][1].task
        members = np.array([k for k, _ in rows])
        used = np.unique(members)
        local = np.searchsorted(used, members)
        order = np.argsort(local, kind="stable")
        x0 = np.stack([rows[i][1].positions for i in order])
        opt = LearnedOptimizer(thetas[used], fc, local[order])
        res = opt.run(task, x0, steps)
        np.add.at(sums, members[order], res.final_energy / task.normalizer)
        if counter is not None:
            counter.unrolls += len(rows)
            counter.inner_steps += len(rows) * steps
            counter.diverged += int(res.diverged.sum())
    return sums / np.array([len(its) for its in items])


def meta_loss(params, batch: Sequence[BatchItem], fc: FeatureConfig, steps: int) -> float:
    """Mean normalized final-step energy of the unrolls (no polish)."""
    theta = params.flat() if isinstance(params, LearnedOptParams) else np.asarray(params)
    return float(evaluate_members(theta, fc, [list(batch)], steps)[0])


def sub_batches(batch: Sequence[BatchItem], n_groups: int) -> list[list[BatchItem]]:
    """Group ``k`` takes ``ceil(len/n)`` consecutive items starting at ``k * size`` (wrapping)."""
    size = math.ceil(len(batch) / n_groups)
    return [[batch[(k * size + j) % len(batch)] for j in range(size)] for k in range(n_groups)]


def make_objective(batch: Sequence[BatchItem], fc: FeatureConfig, steps: int, n_groups: int,
                   counter: Optional[UnrollCounter] = None) -> Objective:
    groups_items = sub_batches(batch, n_groups) if n_groups > 1 else [list(batch)]

    def objective(thetas, groups):
        return evaluate_members(thetas, fc, [groups_items[g] for g in groups], steps, counter)

    return objective


# -- training ----------------------------------------------------------------------

LOG_COLUMNS = ("update", "meta_loss", "best", "lr", "diverged", "evaluations", "unrolls", "accepted")


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)
    wall: list = field(default_factory=list)

    def append(self, row: dict, seconds: float) -> None:
        self.rows.append(row)
        self.wall.append(seconds)

    @property
    def best(self) -> np.ndarray:
        return np.array([r["best"] for r in self.rows])

    def to_tsv(self) -> str:
        lines = ["\t".join(LOG_COLUMNS)]
        for r in self.rows:
            lines.append("\t".join(_fmt(r[c]) for c in LOG_COLUMNS))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_tsv(cls, text: str) -> "TrainLog":
        lines = text.strip().splitlines()
        head = lines[0].split("\t")
        rows = []
        for line in lines[1:]:
            vals = dict(zip(head, line.split("\t")))
            rows.append({c: (int(vals[c]) if c in ("update", "diverged", "evaluations", "unrolls", "accepted")
                             else float(vals[c])) for c in LOG_COLUMNS})
        return cls(rows, [0.0] * len(rows))


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, float) else str(v)


@dataclass
class TrainState:
    """Everything needed to resume: parameters, outer optimizer, best so far and the log."""

    update: int
    theta: np.ndarray
    best_theta: np.ndarray
    best_loss: float
    outer: OuterAdam
    log: TrainLog

    def to_dict(self) -> dict:
        return {
            "format": "train-state", "version": 1, "update": self.update,
            "theta": self.theta.tolist(), "best_theta": self.best_theta.tolist(),
            "best_loss": self.best_loss, "outer": self.outer.to_dict(), "log": self.log.rows,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainState":
        if doc.get("format") != "train-state":
            raise ConfigurationError("not a training state file")
        log_ = TrainLog(list(doc["log"]), [0.0] * len(doc["log"]))
        return cls(int(doc["update"]), np.asarray(doc["theta"], dtype=np.float64),
                   np.asarray(doc["best_theta"], dtype=np.float64), float(doc["best_loss"]),
                   OuterAdam.from_dict(doc["outer"]), log_)


@dataclass
class TrainResult:
    final: LearnedOptParams
    best: LearnedOptParams
    log: TrainLog
    state: TrainState


def _check_tasks(tasks: Sequence[TaskSpec]) -> None:
    missing = [t.name for t in tasks if t.normalizer is None]
    if missing:
        raise ConfigurationError(f"tasks without a normalizer: {', '.join(missing)}")


def train(cfg: MetaConfig, tasks: Sequence[TaskSpec], out_dir=None, resume=None,
          init: Optional[LearnedOptParams] = None) -> TrainResult:
    """Run ``cfg.total`` meta-updates of the selected strategy.

    ``tasks`` must carry normalizers.  With ``out_dir`` the latest and best
    checkpoints, a resumable state and the log are written every
    ``cfg.checkpoint_every`` updates and at the end.  ``resume`` is a state
    file written by an earlier run with the same config.
    """
    _check_tasks(tasks)
    fc = cfg.features
    sizes = fc.layer_sizes
    root = RngStream(cfg.seed)
    out = None if out_dir is None else Path(out_dir)
    if resume is not None:
        state = TrainState.from_dict(json.loads(Path(resume).read_text()))
    else:
        theta0 = (init or init_params(fc, root.spawn(0))).flat()
        state = TrainState(0, theta0, theta0.copy(), math.inf,
                           OuterAdam.start(theta0, cfg.lr0, cfg.decay, cfg.decay_every), TrainLog())
    lineage = {"seed": cfg.seed, "strategy": cfg.strategy, "tasks": list(cfg.tasks)}
    # wall-clock times live in their own file so the log itself is reproducible
    pending_wall: list = []

    def persist():
        if out is None:
            return
        lin = dict(lineage, update=state.update)
        save_checkpoint(out / "checkpoints" / "latest.json", LearnedOptParams.from_flat(state.theta, sizes), fc, lin)
        save_checkpoint(out / "checkpoints" / "best.json", LearnedOptParams.from_flat(state.best_theta, sizes), fc,
                        dict(lin, best_loss=state.best_loss))
        save_checkpoint(out / "checkpoints" / f"update_{state.update:05d}.json",
                        LearnedOptParams.from_flat(state.theta, sizes), fc, lin)
        (out / "checkpoints" / "train_state.json").write_text(json.dumps(state.to_dict()) + "\n")
        (out / "logs").mkdir(parents=True, exist_ok=True)
        (out / "logs" / "train_log.tsv").write_text(state.log.to_tsv())
        with open(out / "logs" / "walltime.tsv", "a") as fh:
            fh.writelines(f"{u}\t{sec:.3f}\n" for u, sec in pending_wall)
        pending_wall.clear()

    if state.update == 0 and out is not None:
        persist()
    while state.update < cfg.total:
        t0 = time.perf_counter()
        u = state.update
        rng = root.spawn(1000 + u)
        counter = UnrollCounter()
        lr = state.outer.lr
        if cfg.strategy == "ga":
            batch = sample_batch(tasks, cfg.ga_batch, rng.spawn(0))
            objective = make_objective(batch, fc, cfg.inner_steps, 1, counter)
            gen = ga_generation(state.theta, cfg.population, cfg.sigma, objective, rng.spawn(1))
            theta, loss, evals, accepted = gen.theta, gen.loss, gen.evaluations, int(gen.accepted)
            outer = replace(state.outer, t=state.outer.t + 1)
        else:
            batch = sample_batch(tasks, cfg.batch_target, rng.spawn(0))
            objective = make_objective(batch, fc, cfg.inner_steps, cfg.n_pairs, counter)
            estimator = esmc_gradient if cfg.strategy == "esmc" else es_gradient
            est = estimator(state.theta, objective, cfg.sigma, cfg.n_pairs, rng.spawn(1), full_output=True)
            loss, evals, accepted = est.loss, est.evaluations, 1
            if np.all(np.isfinite(est.grad)):
                theta, outer = state.outer.step(state.theta, est.grad)
            else:
                log.warning("update %d: non-finite meta-gradient, skipped", u)
                theta, outer, accepted = state.theta, replace(state.outer, t=state.outer.t + 1), 0
        # the logged loss belongs to the parameters the update started from
        # (or, for GA, the selected ones)
        scored = theta if cfg.strategy == "ga" else state.theta
        best_theta, best_loss = state.best_theta, state.best_loss
        if np.isfinite(loss) and loss < best_loss:
            best_theta, best_loss = scored.copy(), loss
        row = {"update": u + 1, "meta_loss": float(loss), "best": float(best_loss), "lr": float(lr),
               "diverged": counter.diverged, "evaluations": evals, "unrolls": counter.unrolls,
               "accepted": accepted}
        seconds = time.perf_counter() - t0
        state.log.append(row, seconds)
        pending_wall.append((u + 1, seconds))
        log.info("update %d loss %.6f best %.6f", u + 1, loss, best_loss)
        state = TrainState(u + 1, theta, best_theta, best_loss, outer, state.log)
        if out is not None and (state.update % cfg.checkpoint_every == 0 or state.update == cfg.total):
            persist()
    return TrainResult(LearnedOptParams.from_flat(state.theta, sizes),
                       LearnedOptParams.from_flat(state.best_theta, sizes), state.log, state)


def load_trained(path) -> tuple[LearnedOptParams, FeatureConfig]:
    params, fc, _ = load_checkpoint(path)
    return params, fc

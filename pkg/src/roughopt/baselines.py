"""Classical optimizers (GD, Adam, FIRE), greedy Basin Hopping and their tuning.

Every optimizer works on a stack of configurations ``x`` of shape (B, N, 3)
and follows the same protocol::

    state = opt.init_state(x)
    x, state = opt.update(x, forces, state)

``forces`` are ``-dE/dx``.  :func:`drive` runs the protocol for a fixed number
of steps, handles divergence and records the energy trace.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .systems import Configuration, RngStream
from .tasks import TaskSpec, harmonic_init_batch, init_streams

log = logging.getLogger(__name__)


# -- trajectories --------------------------------------------------------------

@dataclass
class Trajectory:
    """Energy trace and end point of a single optimization run."""

    steps: np.ndarray
    energies: np.ndarray
    final: Configuration
    final_energy: float
    n_steps: int
    diverged: bool


@dataclass
class BatchTrajectory:
    """A stack of runs advanced in lockstep; ``energies`` has shape (samples, B)."""

    steps: np.ndarray
    energies: np.ndarray
    final_positions: np.ndarray
    final_energy: np.ndarray
    n_steps: np.ndarray
    diverged: np.ndarray
    n_force_evals: int = 0

    def __len__(self):
        return len(self.final_energy)

    def single(self, i: int, task: TaskSpec) -> Trajectory:
        return Trajectory(
            steps=self.steps.copy(),
            energies=self.energies[:, i].copy(),
            final=task.configuration(self.final_positions[i]),
            final_energy=float(self.final_energy[i]),
            n_steps=int(self.n_steps[i]),
            diverged=bool(self.diverged[i]),
        )


def sample_steps(steps: int, stride: Optional[int]) -> np.ndarray:
    stride = steps if not stride else stride
    marks = list(range(0, steps + 1, max(int(stride), 1)))
    if marks[-1] != steps:
        marks.append(steps)
    return np.asarray(marks, dtype=np.int64)


def drive(opt, task: TaskSpec, x0: np.ndarray, steps: int, stride: Optional[int] = None,
          energy_forces=None) -> BatchTrajectory:
    """Apply ``steps`` updates of ``opt`` to every configuration in ``x0``.

    A configuration whose energy turns non-finite is frozen at its last finite
    point and flagged as diverged; the others keep going.
    """
    if steps < 0:
        raise ValueError("steps must be non-negative")
    energy_forces = energy_forces or task.energy_forces
    x = np.array(x0, dtype=np.float64, copy=True)
    nb = len(x)
    marks = sample_steps(steps, stride)
    trace = np.empty((len(marks), nb))
    e, f = energy_forces(x)
    diverged = ~np.isfinite(e)
    alive = ~diverged
    n_steps = np.zeros(nb, dtype=np.int64)
    f[~alive] = 0.0
    state = opt.init_state(x)
    k = 0
    if marks[0] == 0:
        trace[0] = e
        k = 1
    evals = 1
    with np.errstate(all="ignore"):
        for t in range(1, steps + 1):
            x_new, state = opt.update(x, f, state)
            e_new, f_new = energy_forces(x_new)
            evals += 1
            bad = alive & ~(np.isfinite(e_new) & np.isfinite(x_new).all(axis=(1, 2)))
            keep = ~alive | bad
            if keep.any():
                x_new[keep] = x[keep]
                e_new[keep] = e[keep]
                f_new[keep] = 0.0
                diverged |= bad
                alive &= ~bad
            n_steps[alive] += 1
            x, e, f = x_new, e_new, f_new
            if k < len(marks) and marks[k] == t:
                trace[k] = e
                k += 1
    return BatchTrajectory(marks, trace, x, e.copy(), n_steps, diverged, n_force_evals=evals - 1)


class Optimizer:
    """Base class; subclasses implement ``init_state`` and ``update``."""

    name = "optimizer"

    def run(self, task: TaskSpec, x0: np.ndarray, steps: int, rngs: Optional[Sequence[RngStream]] = None,
            stride: Optional[int] = None) -> BatchTrajectory:
        return drive(self, task, x0, steps, stride)

    def scalars(self) -> dict:
        return {k: v for k, v in asdict(self).items()}


# -- gradient descent ----------------------------------------------------------

@dataclass(frozen=True)
class GradientDescent(Optimizer):
    lr: float = 1e-3
    name = "gd"

    def init_state(self, x):
        return None

    def update(self, x, forces, state):
        return x + self.lr * forces, state


def gd_step(config: Configuration, forces: np.ndarray, lr: float) -> Configuration:
    """``x <- x + lr * F``; with ``F = -dE/dx`` this descends."""
    if lr < 0:
        raise ValueError("lr must be non-negative")
    return config.with_positions(config.positions + lr * np.asarray(forces))


# -- Adam ------------------------------------------------------------------------

@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 0.01
    b1: float = 0.9
    b2: float = 0.999
    eps: float = 1e-8
    # running b1**t and b2**t; products round identically for scalar and
    # per-row hyperparameters, unlike pow
    b1_t: float = 1.0
    b2_t: float = 1.0

    @classmethod
    def zeros_like(cls, x, **hyper) -> "AdamState":
        return cls(np.zeros_like(x), np.zeros_like(x), 0, **hyper)


def adam_update(x, grads, state: AdamState):
    b1_t = state.b1_t * state.b1
    b2_t = state.b2_t * state.b2
    m = state.b1 * state.m + (1.0 - state.b1) * grads
    v = state.b2 * state.v + (1.0 - state.b2) * grads * grads
    mhat = m / (1.0 - b1_t)
    vhat = v / (1.0 - b2_t)
    x = x - state.lr * mhat / (np.sqrt(vhat) + state.eps)
    return x, replace(state, m=m, v=v, t=state.t + 1, b1_t=b1_t, b2_t=b2_t)


def adam_step(config: Configuration, grads: np.ndarray, state: AdamState):
    """Bias-corrected Adam step on positions; ``grads`` is ``dE/dx``."""
    x, state = adam_update(config.positions, np.asarray(grads), state)
    return config.with_positions(x), state


@dataclass(frozen=True)
class Adam(Optimizer):
    lr: float = 0.01
    b1: float = 0.9
    b2: float = 0.999
    eps: float = 1e-8
    name = "adam"

    def init_state(self, x):
        return AdamState.zeros_like(x, lr=self.lr, b1=self.b1, b2=self.b2, eps=self.eps)

    def update(self, x, forces, state):
        return adam_update(x, -forces, state)


# -- FIRE ------------------------------------------------------------------------

@dataclass(frozen=True)
class FireParams:
    dt0: float = 0.01
    dt_max: Optional[float] = None
    n_min: int = 5
    f_inc: float = 1.1
    f_dec: float = 0.5
    alpha_start: float = 0.1
    f_alpha: float = 0.99

    @property
    def dt_limit(self) -> float:
        return 10.0 * self.dt0 if self.dt_max is None else self.dt_max


@dataclass
class FireState:
    velocity: np.ndarray
    dt: np.ndarray
    alpha: np.ndarray
    n_pos: np.ndarray
    params: FireParams = field(default_factory=FireParams)

    @classmethod
    def start(cls, x, params: FireParams) -> "FireState":
        lead = x.shape[:-2]
        return cls(
            np.zeros_like(x),
            np.full(lead, params.dt0),
            np.full(lead, params.alpha_start),
            np.zeros(lead, dtype=np.int64),
            params,
        )


def fire_update(x, forces, state: FireState):
    """One FIRE step on a (..., N, 3) stack; per-configuration dt and mixing."""
    prm = state.params
    v = state.velocity
    power = np.sum(forces * v, axis=(-2, -1))
    f_norm = np.sqrt(np.sum(forces * forces, axis=(-2, -1)))
    v_norm = np.sqrt(np.sum(v * v, axis=(-2, -1)))
    scale = np.where(f_norm > 0, v_norm / np.where(f_norm > 0, f_norm, 1.0), 0.0)
    a = state.alpha[..., None, None]
    v = (1.0 - a) * v + a * scale[..., None, None] * forces
    uphill = power <= 0
    n_pos = np.where(uphill, 0, state.n_pos + 1)
    grow = ~uphill & (n_pos > prm.n_min)
    dt = np.where(uphill, state.dt * prm.f_dec, np.where(grow, np.minimum(state.dt * prm.f_inc, prm.dt_limit), state.dt))
    alpha = np.where(uphill, prm.alpha_start, np.where(grow, state.alpha * prm.f_alpha, state.alpha))
    v = np.where(uphill[..., None, None], 0.0, v)
    # semi-implicit Euler, unit mass
    v = v + dt[..., None, None] * forces
    x = x + dt[..., None, None] * v
    return x, FireState(v, dt, alpha, n_pos, prm)


def fire_step(config: Configuration, forces: np.ndarray, state: FireState):
    x, state = fire_update(config.positions, np.asarray(forces), state)
    return config.with_positions(x), state


@dataclass(frozen=True)
class Fire(Optimizer):
    lr: float = 0.01
    n_min: int = 5
    f_inc: float = 1.1
    f_dec: float = 0.5
    alpha_start: float = 0.1
    f_alpha: float = 0.99
    dt_max: Optional[float] = None
    name = "fire"

    @property
    def params(self) -> FireParams:
        return FireParams(self.lr, self.dt_max, self.n_min, self.f_inc, self.f_dec, self.alpha_start, self.f_alpha)

    def init_state(self, x):
        return FireState.start(x, self.params)

    def update(self, x, forces, state):
        return fire_update(x, forces, state)


# -- Basin Hopping -------------------------------------------------------------

@dataclass(frozen=True)
class BasinHopping(Optimizer):
    """Greedy Basin Hopping with Adam descents.

    The first descent starts from the initial configuration; every further
    basin perturbs all coordinates of the incumbent by ``N(0, step_scale^2)``,
    descends again and keeps the result only if its energy is lower.
    """

    step_scale: float = 0.4
    n_basins: int = 10
    steps_per_basin: int = 5000
    lr: float = 1e-2
    name = "bh"

    @property
    def budget(self) -> int:
        return self.n_basins * self.steps_per_basin

    def run(self, task, x0, steps=None, rngs=None, stride=None):
        if steps is not None and steps != self.budget:
            raise ValueError(f"basin hopping budget is {self.budget} steps, asked for {steps}")
        if rngs is None:
            raise ValueError("basin hopping needs one random stream per configuration")
        gens = [r.generator() for r in rngs]
        nb = len(x0)
        # stacked copies carry one step scale / learning rate per row
        scale = np.broadcast_to(np.asarray(self.step_scale, dtype=np.float64).reshape(-1), (nb,))
        lr = self.lr if np.ndim(self.lr) == 0 else np.asarray(self.lr).reshape(-1, 1, 1)
        descent = Adam(lr=lr)
        res = drive(descent, task, x0, self.steps_per_basin)
        best_x, best_e = res.final_positions, res.final_energy.copy()
        diverged = res.diverged.copy()
        n_steps = res.n_steps.copy()
        evals = res.n_force_evals
        trace = [best_e.copy()]
        for _ in range(1, self.n_basins):
            kick = np.stack([g.normal(0.0, s, size=x0.shape[1:]) for g, s in zip(gens, scale)])
            res = drive(descent, task, best_x + kick, self.steps_per_basin)
            evals += res.n_force_evals
            n_steps += res.n_steps
            ok = ~res.diverged & (res.final_energy < best_e)
            best_x = np.where(ok[:, None, None], res.final_positions, best_x)
            best_e = np.where(ok, res.final_energy, best_e)
            trace.append(best_e.copy())
        if task.cell is not None:
            best_x = best_x % task.cell
        marks = np.arange(1, self.n_basins + 1) * self.steps_per_basin
        return BatchTrajectory(marks, np.stack(trace), best_x, best_e, n_steps, diverged, evals)


def basin_hopping(task: TaskSpec, init: Configuration, n_basins: int, steps_per_basin: int,
                  step_scale: float, rng: RngStream, lr: float = 1e-2) -> Trajectory:
    bh = BasinHopping(step_scale, n_basins, steps_per_basin, lr)
    return bh.run(task, init.positions[None], rngs=[rng]).single(0, task)


# -- single-run helper ------------------------------------------------------------

def run(task: TaskSpec, optimizer: Optimizer, init: Configuration, steps: int,
        stride: Optional[int] = None, rng: Optional[RngStream] = None) -> Trajectory:
    if steps < 1:
        raise ValueError("steps must be at least 1")
    rngs = None if rng is None else [rng]
    if isinstance(optimizer, BasinHopping):
        return optimizer.run(task, init.positions[None], rngs=rngs).single(0, task)
    return optimizer.run(task, init.positions[None], steps, rngs=rngs, stride=stride).single(0, task)


def step_budget(optimizer: Optimizer, steps: int) -> int:
    return optimizer.budget if isinstance(optimizer, BasinHopping) else steps


# -- tuning ----------------------------------------------------------------------

LR_GRID = (0.01, 0.005, 0.001)
STEP_SCALE_GRID = (0.2, 0.4, 0.6, 0.8)


def family_grid(family: str, steps: int) -> list[Optimizer]:
    if family == "adam":
        return [Adam(lr=lr) for lr in LR_GRID]
    if family == "fire":
        return [Fire(lr=lr) for lr in LR_GRID]
    if family == "bh":
        per_basin = 5000 if steps >= 5000 else max(steps // 10, 1)
        return [BasinHopping(s, max(steps // per_basin, 1), per_basin) for s in STEP_SCALE_GRID]
    raise ValueError(f"unknown optimizer family {family!r}")


def _grid_key(opt: Optimizer) -> float:
    return opt.step_scale if isinstance(opt, BasinHopping) else opt.lr


_ROW_SHAPE = {Adam: (-1, 1, 1), Fire: (-1,), BasinHopping: (-1,), GradientDescent: (-1, 1, 1)}
_SHARED = {"n_min", "n_basins", "steps_per_basin", "dt_max"}


def stack_optimizers(opts: Sequence[Optimizer], repeats: int) -> Optimizer:
    """One optimizer whose hyperparameters vary per configuration row.

    Row ``i * repeats + k`` uses ``opts[i]``.  Rows never interact, so each
    row evolves exactly as it would in a separate run.
    """
    kind = type(opts[0])
    if any(type(o) is not kind for o in opts):
        raise TypeError("can only stack optimizers of one family")
    values = {}
    for name, first in asdict(opts[0]).items():
        col = [getattr(o, name) for o in opts]
        if name in _SHARED or first is None:
            if any(c != first for c in col):
                raise ValueError(f"{name} must agree across stacked optimizers")
            values[name] = first
        else:
            values[name] = np.repeat(np.asarray(col, dtype=np.float64), repeats).reshape(_ROW_SHAPE[kind])
    return kind(**values)


def group_final_energies(task: TaskSpec, opts: Sequence[Optimizer], x0: np.ndarray, steps: int,
                         rngs: Sequence[RngStream]) -> np.ndarray:
    """Final energies of every optimizer on the same initializations, shape (len(opts), B)."""
    nb = len(x0)
    big = stack_optimizers(opts, nb)
    xs = np.concatenate([x0] * len(opts))
    res = big.run(task, xs, step_budget(opts[0], steps), rngs=list(rngs) * len(opts))
    return res.final_energy.reshape(len(opts), nb)


def tune_grid(task: TaskSpec, family: str, rng: RngStream, n_inits: int = 20, steps: Optional[int] = None,
              grid: Optional[Sequence[Optimizer]] = None) -> tuple[Optimizer, dict]:
    """Best grid point by mean final energy over ``n_inits`` shared initializations.

    Ties go to the smaller learning rate / step scale.
    """
    steps = task.inner_steps if steps is None else steps
    grid = list(grid) if grid is not None else family_grid(family, steps)
    streams = init_streams(rng, n_inits)
    x0 = harmonic_init_batch(task, streams)
    kicks = [r.spawn(1) for r in streams]
    means = group_final_energies(task, grid, x0, steps, kicks).mean(axis=1)
    for opt, m in zip(grid, means):
        log.info("grid %s %r: %.5f", task.name, opt, m)
    order = sorted(range(len(grid)), key=lambda i: (means[i], _grid_key(grid[i])))
    return grid[order[0]], {repr(o): float(m) for o, m in zip(grid, means)}


def _softplus(u):
    return np.logaddexp(0.0, u)


def _sigmoid(u):
    return 1.0 / (1.0 + np.exp(-u))


def _logit(p):
    return math.log(p / (1.0 - p))


def _inv_softplus(y):
    return math.log(math.expm1(y))


class ScalarFamily:
    """Maps an unconstrained vector onto valid hyperparameters of one family.

    Positive scalars go through softplus (``eps`` through exp), fractions
    through the logistic function.
    """

    def __init__(self, template: Optimizer):
        self.template = template

    def encode(self) -> np.ndarray:
        o = self.template
        if isinstance(o, Adam):
            return np.array([_inv_softplus(o.lr), _logit(o.b1), _logit(o.b2), math.log(o.eps)])
        if isinstance(o, Fire):
            return np.array([_inv_softplus(o.lr), _inv_softplus(o.f_inc - 1.0), _logit(o.f_dec),
                             _logit(o.alpha_start), _logit(o.f_alpha)])
        if isinstance(o, BasinHopping):
            return np.array([_inv_softplus(o.step_scale)])
        raise TypeError(f"no scalar parameterization for {o!r}")

    def decode(self, u) -> Optimizer:
        o = self.template
        u = np.asarray(u, dtype=np.float64)
        if isinstance(o, Adam):
            return replace(o, lr=float(_softplus(u[0])), b1=float(_sigmoid(u[1])),
                           b2=float(_sigmoid(u[2])), eps=float(np.exp(u[3])))
        if isinstance(o, Fire):
            return replace(o, lr=float(_softplus(u[0])), f_inc=1.0 + float(_softplus(u[1])),
                           f_dec=float(_sigmoid(u[2])), alpha_start=float(_sigmoid(u[3])),
                           f_alpha=float(_sigmoid(u[4])))
        return replace(o, step_scale=float(_softplus(u[0])))


def tune_scalar_meta(task: TaskSpec, start, rng: RngStream, outer_steps: int = 100,
                     n_pairs: int = 8, n_inits: int = 8, sigma: float = 0.1, lr: float = 1e-2,
                     steps: Optional[int] = None, n_eval: int = 20) -> tuple[Optimizer, list[float]]:
    """Meta-tune the scalars of ``start`` (an optimizer or family name) with antithetic ES.

    Each outer step draws fresh initializations, estimates the gradient of the
    mean final energy with ``n_pairs`` antithetic pairs (each pair sharing its
    own ``n_inits`` initializations) and applies outer Adam.  The returned
    optimizer is the best one seen on a fixed evaluation set that also scores
    ``start``, so it is never worse than ``start`` there.
    """
    from .metatrain import OuterAdam, es_gradient

    if not isinstance(start, Optimizer):
        start = family_grid(start, 50000)[0]
    steps = task.inner_steps if steps is None else steps
    fam = ScalarFamily(start)
    theta = fam.encode()
    eval_streams = init_streams(rng.spawn(0), n_eval)
    eval_x = harmonic_init_batch(task, eval_streams)
    eval_kicks = [r.spawn(1) for r in eval_streams]

    def score(u) -> float:
        return float(group_final_energies(task, [fam.decode(u)], eval_x, steps, eval_kicks).mean())

    best_theta, best = theta.copy(), score(theta)
    history = [best]
    outer = OuterAdam.start(theta, lr0=lr)
    for t in range(outer_steps):
        step_rng = rng.spawn(t + 1)
        streams = init_streams(step_rng, n_pairs * n_inits)
        x0 = harmonic_init_batch(task, streams)
        kicks = [r.spawn(1) for r in streams]

        def objective(thetas, groups):
            opts = [fam.decode(u) for u in thetas]
            rows = np.concatenate([np.arange(g * n_inits, (g + 1) * n_inits) for g in groups])
            big = stack_optimizers(opts, n_inits)
            res = big.run(task, x0[rows], step_budget(start, steps), rngs=[kicks[i] for i in rows])
            return res.final_energy.reshape(len(opts), n_inits).mean(axis=1)

        grad = es_gradient(theta, objective, sigma, n_pairs, step_rng.spawn(10**6))
        if np.all(np.isfinite(grad)):
            theta, outer = outer.step(theta, grad)
        current = score(theta)
        history.append(current)
        log.info("scalar meta %s step %d: %.5f %r", task.name, t, current, fam.decode(theta))
        if current < best:
            best, best_theta = current, theta.copy()
    return fam.decode(best_theta), history


def tune_two_stage(task: TaskSpec, family: str, rng: RngStream, n_inits: int = 20,
                   steps: Optional[int] = None, outer_steps: int = 100, meta: bool = True,
                   **meta_kwargs) -> tuple[Optimizer, dict]:
    """Grid search, then scalar meta-tuning started from every grid point.

    All meta-tuning runs share one evaluation set, whose first entry scores
    the grid point itself, so the winner is the best of the grid points and
    the learned scalars on common ground.  Returns ``(winner, record)``.
    """
    steps = task.inner_steps if steps is None else steps
    grid_best, scores = tune_grid(task, family, rng.spawn(0), n_inits=n_inits, steps=steps)
    record = {"grid": scores, "grid_winner": optimizer_to_dict(grid_best)}
    if not meta:
        return grid_best, record
    runs = []
    for start in family_grid(family, steps):
        tuned, history = tune_scalar_meta(task, start, rng.spawn(1), outer_steps=outer_steps,
                                          steps=steps, **meta_kwargs)
        runs.append({"start": optimizer_to_dict(start), "tuned": optimizer_to_dict(tuned),
                     "score": float(min(history)), "history": history})
    best = min(range(len(runs)), key=lambda i: runs[i]["score"])
    record["meta_runs"] = runs
    return optimizer_from_dict(runs[best]["tuned"]), record


# -- hyperparameter cache ------------------------------------------------------

OPTIMIZER_TYPES = {"gd": GradientDescent, "adam": Adam, "fire": Fire, "bh": BasinHopping}


def optimizer_to_dict(opt: Optimizer) -> dict:
    return {"family": opt.name, **asdict(opt)}


def optimizer_from_dict(doc: dict) -> Optimizer:
    doc = dict(doc)
    return OPTIMIZER_TYPES[doc.pop("family")](**doc)


class TunedCache:
    """JSON file mapping ``(task, family)`` to tuned hyperparameters."""

    FORMAT = "tuned-cache"
    VERSION = 1

    def __init__(self, path):
        self.path = Path(path)
        self.entries: dict[str, dict] = {}
        if self.path.exists():
            doc = json.loads(self.path.read_text())
            self.entries = {f"{e['task']}/{e['family']}": e for e in doc["entries"]}

    def get(self, task: str, family: str) -> Optional[Optimizer]:
        e = self.entries.get(f"{task}/{family}")
        return None if e is None else optimizer_from_dict(e["winner"])

    def put(self, task: str, family: str, winner: Optimizer, **meta) -> None:
        self.entries[f"{task}/{family}"] = {"task": task, "family": family,
                                             "winner": optimizer_to_dict(winner), **meta}
        self.path.parent.mkdir(parents=True, exist_ok=True)
        doc = {"format": self.FORMAT, "version": self.VERSION,
               "entries": [self.entries[k] for k in sorted(self.entries)]}
        self.path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")

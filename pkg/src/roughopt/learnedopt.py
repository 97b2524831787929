"""Learned optimizer: per-coordinate features, a small MLP and a gated update.

Each coordinate of each atom is described by a feature row (gradient,
position, moment estimates, atom count, species, time and radial
environment).  A shared MLP maps every row to a magnitude ``m`` and a
direction ``d`` and the position moves by ``alpha * d * sigmoid(beta*m + gamma)``.

Parameters are handled as flat vectors so the outer loop can perturb them
directly; :class:`LearnedOptimizer` runs many parameter vectors side by side,
one per configuration row.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import _kernels
from .baselines import BatchTrajectory, Optimizer, drive
from .systems import Configuration, ConfigurationError, RngStream
from .tasks import TaskSpec, normalize

RADIAL_ETAS = (0.0009, 0.01, 0.02, 0.035, 0.06, 0.1, 0.2, 0.4)
SINE_TAUS = (1, 3, 10, 30, 100, 300, 1000, 3000, 10000)
EMA_DECAYS = (0.9, 0.99, 0.999)
ADAM_EPS = 1e-8

FLAGS = ("gradient", "position", "moments", "adam", "count", "species", "sine", "radial")


@dataclass(frozen=True)
class FeatureConfig:
    """Which features are built and how; also fixes the MLP hidden widths."""

    etas: tuple = RADIAL_ETAS
    cutoff: float = 2.5
    p: float = 10.0
    taus: tuple = SINE_TAUS
    decays: tuple = EMA_DECAYS
    n_species: int = 4
    gradient: bool = True
    position: bool = True
    moments: bool = True
    adam: bool = True
    count: bool = True
    species: bool = True
    sine: bool = True
    radial: bool = True
    centroid_positions: bool = False
    hidden: tuple = (32, 32)

    def __post_init__(self):
        for name in ("etas", "taus", "decays", "hidden"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if not all(e > 0 for e in self.etas):
            raise ConfigurationError("radial widths must be positive")
        if not self.cutoff > 0:
            raise ConfigurationError("radial cutoff must be positive")
        if any(b <= a for a, b in zip(self.taus, self.taus[1:])):
            raise ConfigurationError("sine timescales must be strictly increasing")
        if not all(0 < d < 1 for d in self.decays):
            raise ConfigurationError("EMA decays must lie in (0, 1)")
        if self.n_species < 1 or any(h < 1 for h in self.hidden):
            raise ConfigurationError("species count and hidden widths must be positive")

    @property
    def n_features(self) -> int:
        k, s = len(self.decays), self.n_species
        widths = {
            "gradient": 2, "position": 2, "moments": 4 * k, "adam": 4 * k, "count": 2,
            "species": s, "sine": len(self.taus), "radial": 2 * len(self.etas) * s,
        }
        return sum(w for name, w in widths.items() if getattr(self, name))

    @property
    def layer_sizes(self) -> tuple[int, ...]:
        return (self.n_features, *self.hidden, 2)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, doc: dict) -> "FeatureConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(doc) - names
        if unknown:
            raise ConfigurationError(f"unknown feature options: {sorted(unknown)}")
        return cls(**doc)


# -- parameters ------------------------------------------------------------------

@dataclass
class LearnedOptParams:
    """MLP weights (``in x out`` per layer), biases and the output scalars."""

    weights: list
    biases: list
    alpha: float = 0.1
    beta: float = 1.0
    gamma: float = -3.0

    @property
    def layer_sizes(self) -> tuple[int, ...]:
        return (self.weights[0].shape[0], *(w.shape[1] for w in self.weights))

    def flat(self) -> np.ndarray:
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts += [w.ravel(), b.ravel()]
        parts.append(np.array([self.alpha, self.beta, self.gamma]))
        return np.concatenate(parts)

    @classmethod
    def from_flat(cls, vec, sizes: Sequence[int]) -> "LearnedOptParams":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.size != n_params(sizes):
            raise ConfigurationError(f"expected {n_params(sizes)} parameters, got {vec.size}")
        weights, biases, k = [], [], 0
        for a, b in zip(sizes[:-1], sizes[1:]):
            weights.append(vec[k:k + a * b].reshape(a, b).copy())
            k += a * b
            biases.append(vec[k:k + b].copy())
            k += b
        alpha, beta, gamma = (float(v) for v in vec[k:k + 3])
        return cls(weights, biases, alpha, beta, gamma)


def n_params(sizes: Sequence[int]) -> int:
    return sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:])) + 3


def init_params(fc: FeatureConfig, rng: RngStream) -> LearnedOptParams:
    """LeCun-normal hidden layers, an all-zero output layer and (0.1, 1, -3)."""
    g = rng.generator()
    sizes = fc.layer_sizes
    weights, biases = [], []
    for a, b in zip(sizes[:-2], sizes[1:-1]):
        weights.append(g.normal(0.0, 1.0 / math.sqrt(a), size=(a, b)))
        biases.append(np.zeros(b))
    weights.append(np.zeros((sizes[-2], sizes[-1])))
    biases.append(np.zeros(sizes[-1]))
    return LearnedOptParams(weights, biases, 0.1, 1.0, -3.0)


def unpack_stack(thetas: np.ndarray, sizes: Sequence[int]):
    """Stacked flat vectors (P, D) -> per-layer (P, in, out) weights, (P, 1, out) biases, scalars (P, 3)."""
    thetas = np.atleast_2d(np.asarray(thetas, dtype=np.float64))
    if thetas.shape[1] != n_params(sizes):
        raise ConfigurationError(f"expected {n_params(sizes)} parameters, got {thetas.shape[1]}")
    layers, k = [], 0
    for a, b in zip(sizes[:-1], sizes[1:]):
        w = thetas[:, k:k + a * b].reshape(-1, a, b)
        k += a * b
        layers.append((w, thetas[:, None, k:k + b]))
        k += b
    return layers, thetas[:, k:k + 3]


# -- features --------------------------------------------------------------------

def logmag(x, p: float = 10.0):
    """Log-magnitude / direction pair; small values go through a linear branch.

    ``(log|x| / p, sign x)`` when ``|x| > e^-p`` and ``(-1, x e^p)`` otherwise.
    """
    x = np.asarray(x, dtype=np.float64)
    a = np.abs(x)
    big = a > math.exp(-p)
    with np.errstate(divide="ignore"):
        mag = np.where(big, np.log(np.where(big, a, 1.0)) / p, -1.0)
    return mag, np.where(big, np.sign(x), x * math.exp(p))


def radial_features(config_or_positions, fc: FeatureConfig = FeatureConfig(), channels=None, cell=None):
    """Gaussian radial descriptors per (neighbour channel, width); shape (..., N, len(etas) * S)."""
    if isinstance(config_or_positions, Configuration):
        pos, cell = config_or_positions.positions, config_or_positions.cell
        channels = config_or_positions.species if channels is None else channels
    else:
        pos = config_or_positions
    pos = np.ascontiguousarray(pos, dtype=np.float64)
    squeeze = pos.ndim == 2
    if squeeze:
        pos = pos[None]
    ch = np.zeros(pos.shape[1], np.int64) if channels is None else np.asarray(channels, np.int64)
    if ch.size and ch.max() >= fc.n_species:
        raise ConfigurationError("species channel outside the configured one-hot width")
    edge = -1.0 if cell is None else float(cell)
    out = _kernels.radial_symmetry(pos, edge, ch, fc.n_species, np.asarray(fc.etas, np.float64), float(fc.cutoff))
    return out[0] if squeeze else out


@dataclass
class LearnedOptState:
    """EMA buffers of shape (..., N, 3, K) and the inner step counter."""

    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def start(cls, x, fc: FeatureConfig) -> "LearnedOptState":
        shape = (*np.shape(x), len(fc.decays))
        return cls(np.zeros(shape), np.zeros(shape), 0)


def update_moments(state: LearnedOptState, grads, fc: FeatureConfig) -> LearnedOptState:
    b = np.asarray(fc.decays)
    g = np.asarray(grads)[..., None]
    return LearnedOptState(b * state.m + (1.0 - b) * g, b * state.v + (1.0 - b) * g * g, state.t)


def feature_names(fc: FeatureConfig) -> list[str]:
    """Column names in the order produced by :func:`build_features`."""
    names = []

    def lm(base):
        names.extend([f"{base}:log", f"{base}:sign"])

    if fc.gradient:
        lm("grad")
    if fc.position:
        lm("pos")
    if fc.moments:
        for d in fc.decays:
            lm(f"m@{d}")
            lm(f"v@{d}")
    if fc.adam:
        for d in fc.decays:
            lm(f"ratio@{d}")
            lm(f"invnorm@{d}")
    if fc.count:
        lm("n_atoms")
    if fc.species:
        names.extend(f"species{s}" for s in range(fc.n_species))
    if fc.sine:
        names.extend(f"sin@{tau}" for tau in fc.taus)
    if fc.radial:
        for s in range(fc.n_species):
            for eta in fc.etas:
                lm(f"radial{s}@{eta}")
    return names


@dataclass
class FeatureBlocks:
    """Features split by how they vary: per coordinate, per atom and global.

    ``coord`` has shape (B, N, 3, Fc), ``atom`` (B, N, Fa) and ``sine`` (Fs,).
    ``coord_cols``, ``atom_cols`` and ``sine_cols`` give their column
    positions in the full feature layout.
    """

    coord: np.ndarray
    atom: np.ndarray
    sine: np.ndarray
    coord_cols: np.ndarray
    atom_cols: np.ndarray
    sine_cols: np.ndarray

    def assemble(self) -> np.ndarray:
        nb, n = self.coord.shape[:2]
        width = len(self.coord_cols) + len(self.atom_cols) + len(self.sine_cols)
        out = np.empty((nb, n, 3, width))
        out[..., self.coord_cols] = self.coord
        out[..., self.atom_cols] = self.atom[:, :, None, :]
        out[..., self.sine_cols] = self.sine
        return out.reshape(nb, 3 * n, width)


def _lm(values: np.ndarray, p: float) -> np.ndarray:
    lead = values.shape[:-1]
    flat = np.ascontiguousarray(values.reshape(-1, values.shape[-1]))
    return _kernels.logmag_pairs(flat, float(p)).reshape(*lead, 2 * values.shape[-1])


def feature_blocks(x, grads, state: LearnedOptState, channels, cell, fc: FeatureConfig) -> FeatureBlocks:
    """Batched features, (B, N, 3) inputs; see :func:`build_features` for the layout."""
    nb, n, _ = x.shape
    if state.m.shape[:3] != x.shape or np.shape(grads) != x.shape:
        raise ConfigurationError("state, gradient and position shapes disagree")
    channels = np.asarray(channels, np.int64)
    if channels.size and channels.max() >= fc.n_species:
        raise ConfigurationError("species channel outside the configured one-hot width")
    vals = []
    if fc.gradient:
        vals.append(np.asarray(grads)[..., None])
    if fc.position:
        pos = x % cell if cell is not None else x
        if fc.centroid_positions and cell is None:
            pos = pos - pos.mean(axis=1, keepdims=True)
        vals.append(pos[..., None])
    if fc.moments:
        vals.append(np.stack([state.m, state.v], axis=-1).reshape(nb, n, 3, -1))
    if fc.adam:
        corr = 1.0 - np.asarray(fc.decays) ** (state.t + 1)
        inv = 1.0 / (np.sqrt(state.v / corr) + ADAM_EPS)
        vals.append(np.stack([state.m / corr * inv, inv], axis=-1).reshape(nb, n, 3, -1))
    coord = _lm(np.concatenate(vals, axis=-1), fc.p) if vals else np.empty((nb, n, 3, 0))

    head, tail = [], []
    if fc.count:
        head.append(np.broadcast_to(_lm(np.array([float(n)]), fc.p), (nb, n, 2)))
    if fc.species:
        head.append(np.broadcast_to(np.eye(fc.n_species)[channels], (nb, n, fc.n_species)))
    if fc.radial:
        tail.append(_lm(radial_features(x, fc, channels, cell), fc.p))
    sine = np.sin(state.t / np.asarray(fc.taus, dtype=np.float64)) if fc.sine else np.empty(0)
    atom = np.concatenate(head + tail, axis=-1) if head or tail else np.empty((nb, n, 0))
    return FeatureBlocks(coord, atom, sine, *feature_layout(fc))


def feature_layout(fc: FeatureConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Column positions of the coordinate, atom and sine blocks in the full layout."""
    k = len(fc.decays)
    n_coord = 2 * fc.gradient + 2 * fc.position + 4 * k * fc.moments + 4 * k * fc.adam
    n_head = 2 * fc.count + fc.n_species * fc.species
    n_sine = len(fc.taus) * fc.sine
    n_rad = 2 * len(fc.etas) * fc.n_species * fc.radial
    start = n_coord + n_head
    atom = np.concatenate([np.arange(n_coord, start), np.arange(start + n_sine, start + n_sine + n_rad)])
    return np.arange(n_coord), atom.astype(np.int64), np.arange(start, start + n_sine)


def build_features(x, grads, state: LearnedOptState, channels, cell, fc: FeatureConfig) -> np.ndarray:
    """Feature rows for every coordinate, shape (B, 3N, F) (or (3N, F) for one config).

    Column order: gradient, position, (m_k, v_k) per decay, (corrected ratio,
    inverse norm) per decay, atom count, species one-hot, sine features,
    radial features of the owning atom.  Every value except one-hots and
    sines becomes an adjacent (log-magnitude, direction) pair.  ``state``
    must already hold the moments updated with ``grads``; its ``t`` is the
    index of the current step.
    """
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 2
    if squeeze:
        x, grads = x[None], np.asarray(grads)[None]
        state = LearnedOptState(state.m[None], state.v[None], state.t)
    out = feature_blocks(x, grads, state, channels, cell, fc).assemble()
    return out[0] if squeeze else out


# -- network and update ---------------------------------------------------------------

def mlp_forward(features, params) -> tuple[np.ndarray, np.ndarray]:
    """Coordinate-wise MLP; returns magnitude ``m`` and direction ``d``.

    ``params`` is a :class:`LearnedOptParams` or the output of
    :func:`unpack_stack` paired with a row->member index (see
    :class:`LearnedOptimizer`).
    """
    h = np.asarray(features, dtype=np.float64)
    if h.shape[-1] != params.weights[0].shape[0]:
        raise ConfigurationError(f"feature width {h.shape[-1]} does not match the network input {params.weights[0].shape[0]}")
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = h @ w + b
        if i < last:
            h = np.maximum(h, 0.0)
    return h[..., 0], h[..., 1]


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def gated_update(m, d, alpha, beta, gamma):
    """``alpha * d * sigmoid(beta * m + gamma)``."""
    return alpha * d * _sigmoid(beta * m + gamma)


def learned_step(config: Configuration, spec, state: LearnedOptState, params: LearnedOptParams,
                 task: TaskSpec, fc: FeatureConfig) -> tuple[Configuration, LearnedOptState]:
    """One learned update of a single configuration; ``spec`` is the potential."""
    from .potentials import energy_and_forces

    _, f = energy_and_forces(config, spec)
    state = update_moments(state, -f, fc)
    feats = build_features(config.positions, -f, state, task.channels, config.cell, fc)
    m, d = mlp_forward(feats, params)
    dx = gated_update(m, d, params.alpha, params.beta, params.gamma).reshape(config.positions.shape)
    return config.with_positions(config.positions + dx), LearnedOptState(state.m, state.v, state.t + 1)


class LearnedOptimizer(Optimizer):
    """Runs one or more parameter vectors; row ``i`` uses ``thetas[member[i]]``.

    With a single parameter vector every row shares it.
    """

    name = "learned"

    def __init__(self, thetas, fc: FeatureConfig, member=None):
        thetas = np.atleast_2d(np.asarray(thetas, dtype=np.float64))
        self.fc = fc
        self.thetas = thetas
        self.member = None if member is None else np.asarray(member, np.int64)
        self._layers, self._scalars = unpack_stack(thetas, fc.layer_sizes)
        cc, ac, sc = feature_layout(fc)
        w1 = self._layers[0][0]
        self._w1 = (np.ascontiguousarray(w1[:, cc]), np.ascontiguousarray(w1[:, ac]), np.ascontiguousarray(w1[:, sc]))
        self._task: Optional[TaskSpec] = None

    @classmethod
    def from_params(cls, params: LearnedOptParams, fc: FeatureConfig) -> "LearnedOptimizer":
        if tuple(params.layer_sizes) != tuple(fc.layer_sizes):
            raise ConfigurationError(f"checkpoint layers {params.layer_sizes} do not match features {fc.layer_sizes}")
        return cls(params.flat(), fc)

    def __repr__(self):
        return f"LearnedOptimizer(members={len(self.thetas)}, features={self.fc.n_features})"

    def _rows(self, nb):
        """Row->member index and, when rows come in equal contiguous groups, the group size."""
        if self.member is None:
            if len(self.thetas) != 1:
                raise ConfigurationError("several parameter vectors need a row->member index")
            return np.zeros(nb, np.int64), nb
        if len(self.member) != nb:
            raise ConfigurationError("member index length differs from the batch size")
        p = len(self.thetas)
        if nb % p == 0 and np.array_equal(self.member, np.repeat(np.arange(p), nb // p)):
            return self.member, nb // p
        return self.member, None

    def init_state(self, x):
        return LearnedOptState.start(x, self.fc)

    def _dense(self, h, w, rows, group):
        """Per-row ``h @ w[member]`` for h of shape (B, M, F)."""
        if len(w) == 1:
            return h @ w[0]
        if group is not None:
            nb, m, f = h.shape
            return np.matmul(h.reshape(len(w), group * m, f), w).reshape(nb, m, -1)
        return np.matmul(h, w[rows])

    def step_delta(self, x, forces, state: LearnedOptState):
        """Moments update and the proposed displacement, without moving ``x``."""
        task = self._task
        nb, n, _ = x.shape
        state = update_moments(state, -forces, self.fc)
        blk = feature_blocks(x, -forces, state, task.channels, task.cell, self.fc)
        rows, group = self._rows(nb)
        b1, rest = self._layers[0][1], self._layers[1:]
        w_coord, w_atom, w_sine = self._w1
        # first layer split by feature block: per-atom and global parts are
        # multiplied once and broadcast over coordinates
        h = self._dense(blk.coord.reshape(nb, 3 * n, -1), w_coord, rows, group).reshape(nb, n, 3, -1)
        h += self._dense(blk.atom, w_atom, rows, group)[:, :, None, :]
        bias = (blk.sine @ w_sine)[:, None, :] + b1
        h += bias[0] if len(bias) == 1 else bias[rows][:, :, None, :]
        h = h.reshape(nb, 3 * n, -1)
        for w, b in rest:
            h = np.maximum(h, 0.0)
            h = self._dense(h, w, rows, group) + (b[0] if len(b) == 1 else b[rows])
        sc = self._scalars[rows][:, None, :]
        dx = gated_update(h[..., 0], h[..., 1], sc[..., 0], sc[..., 1], sc[..., 2])
        return dx.reshape(x.shape), state

    def update(self, x, forces, state):
        dx, state = self.step_delta(x, forces, state)
        return x + dx, LearnedOptState(state.m, state.v, state.t + 1)

    def run(self, task: TaskSpec, x0, steps: int, rngs=None, stride=None) -> BatchTrajectory:
        self._task = task
        try:
            return drive(self, task, x0, steps, stride)
        finally:
            self._task = None


def unroll(task: TaskSpec, params: LearnedOptParams, init: Configuration, steps: int,
           fc: FeatureConfig, log_stride: Optional[int] = None):
    """Apply the learned optimizer for ``steps`` iterations.

    Returns the normalized final energy and the sampled trajectory; a diverged
    unroll reports its last finite configuration.
    """
    if task.normalizer is None:
        raise ConfigurationError(f"task {task.name} has no normalizer")
    opt = LearnedOptimizer.from_params(params, fc)
    traj = opt.run(task, init.positions[None], steps, stride=log_stride).single(0, task)
    return float(normalize(traj.final_energy, task.normalizer)), traj


def probe_at_minimum(task: TaskSpec, params: LearnedOptParams, gm_config: Configuration, steps: int,
                     fc: FeatureConfig) -> np.ndarray:
    """Update norms ``|dx|`` the optimizer would apply while the positions stay frozen."""
    opt = LearnedOptimizer.from_params(params, fc)
    opt._task = task
    x = gm_config.positions[None]
    _, f = task.energy_forces(x)
    state = opt.init_state(x)
    out = np.empty(steps)
    for t in range(steps):
        dx, state = opt.step_delta(x, f, state)
        state = LearnedOptState(state.m, state.v, state.t + 1)
        out[t] = np.linalg.norm(dx)
    return out


# -- checkpoints -----------------------------------------------------------------

CHECKPOINT_FORMAT = "learnedopt-checkpoint"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, params: LearnedOptParams, fc: FeatureConfig, lineage: Optional[dict] = None) -> None:
    """Versioned JSON; floats are written with shortest round-trip repr."""
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "features": fc.to_dict(),
        "layers": list(params.layer_sizes),
        "weights": [w.tolist() for w in params.weights],
        "biases": [b.tolist() for b in params.biases],
        "alpha": params.alpha,
        "beta": params.beta,
        "gamma": params.gamma,
        "lineage": lineage or {},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp")
    tmp.write_text(json.dumps(doc, indent=1) + "\n")
    tmp.replace(path)


def load_checkpoint(path) -> tuple[LearnedOptParams, FeatureConfig, dict]:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ConfigurationError(f"{path}: not a learned-optimizer checkpoint")
    fc = FeatureConfig.from_dict(doc["features"])
    params = LearnedOptParams(
        [np.asarray(w, dtype=np.float64).reshape(a, b) for w, a, b in zip(doc["weights"], doc["layers"][:-1], doc["layers"][1:])],
        [np.asarray(b, dtype=np.float64) for b in doc["biases"]],
        float(doc["alpha"]), float(doc["beta"]), float(doc["gamma"]),
    )
    if tuple(doc["layers"]) != fc.layer_sizes:
        raise ConfigurationError(f"{path}: layer sizes {doc['layers']} do not match the feature config")
    return params, fc, doc.get("lineage", {})

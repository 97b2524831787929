"""Empirical potentials: Lennard-Jones, Gupta, Stillinger-Weber and soft sphere.

All four share one calling convention.  ``energy``/``forces`` act on a single
:class:`~roughopt.systems.Configuration`; ``batch_energy_forces`` is the
vectorised entry point used by the optimizers.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable, Mapping, Optional, Union

import numpy as np

from . import _kernels
from .systems import Configuration, ConfigurationError


class NonFiniteEnergyError(FloatingPointError):
    """Energy evaluated to inf/nan, e.g. two atoms on top of each other."""


@dataclass(frozen=True)
class GuptaPair:
    p: float
    q: float
    d0: float
    A: float
    xi: float


class PairParamTable(Mapping):
    """Symmetric map from an unordered element pair to a :class:`GuptaPair`."""

    def __init__(self, entries: Union[Mapping, Iterable] = ()):
        self._data: dict[frozenset, GuptaPair] = {}
        items = entries.items() if isinstance(entries, Mapping) else entries
        for pair, rec in items:
            a, b = pair
            self._data[frozenset((a, b))] = rec if isinstance(rec, GuptaPair) else GuptaPair(**rec)

    def __getitem__(self, pair) -> GuptaPair:
        a, b = pair
        try:
            return self._data[frozenset((a, b))]
        except KeyError:
            raise ConfigurationError(f"no Gupta parameters for pair {a}-{b}") from None

    def __iter__(self):
        for key in sorted(self._data, key=lambda k: tuple(sorted(k))):
            yield tuple(sorted(key)) if len(key) == 2 else (next(iter(key)),) * 2

    def __len__(self):
        return len(self._data)

    def __eq__(self, other):
        return isinstance(other, PairParamTable) and self._data == other._data

    def __hash__(self):
        return hash(frozenset(self._data.items()))

    def __repr__(self):
        return f"PairParamTable({dict(self.items())!r})"

    def matrices(self, elements: tuple[str, ...]) -> dict[str, np.ndarray]:
        s = len(elements)
        out = {name: np.zeros((s, s)) for name in ("p", "q", "d0", "A", "xi")}
        for i, a in enumerate(elements):
            for j, b in enumerate(elements):
                rec = self[a, b]
                for name in out:
                    out[name][i, j] = getattr(rec, name)
        return out


@dataclass(frozen=True)
class LennardJones:
    epsilon: float = 1.0
    d0: float = 1.0
    kind = "lj"
    cutoff = None


@dataclass(frozen=True)
class Gupta:
    elements: tuple[str, ...]
    table: PairParamTable
    kind = "gupta"
    cutoff = None

    def __post_init__(self):
        object.__setattr__(self, "elements", tuple(self.elements))
        for rec in (self.table[a, b] for a in self.elements for b in self.elements):
            if min(rec.d0, rec.p, rec.q) <= 0:
                raise ConfigurationError("Gupta p, q and d0 must be positive")


@dataclass(frozen=True)
class StillingerWeber:
    A: float = 7.049
    epsilon: float = 2.168
    B: float = 0.602
    p: float = 4.0
    q: float = 0.0
    lam: float = 21.0
    gamma: float = 1.2
    sigma: float = 2.0951
    a: float = 1.8
    cos_theta0: float = -1.0 / 3.0
    r_cut: float = 3.77
    kind = "sw"

    def __post_init__(self):
        if self.r_cut > self.a * self.sigma:
            raise ConfigurationError("r_cut must not exceed a*sigma")

    @property
    def cutoff(self) -> float:
        return min(self.r_cut, self.a * self.sigma)


@dataclass(frozen=True)
class SoftSphere:
    epsilon: float = 1.0
    alpha: float = 2.0
    sigma: float = 1.0
    kind = "soft_sphere"

    @property
    def cutoff(self) -> float:
        return self.sigma


PotentialSpec = Union[LennardJones, Gupta, StillingerWeber, SoftSphere]


def batch_energy_forces(spec: PotentialSpec, positions: np.ndarray, species=None, cell=None):
    """Energies (B,) and forces (B, N, 3) for a stack of configurations.

    Non-finite energies are returned as-is; callers decide how to treat them.
    """
    pos = np.ascontiguousarray(positions, dtype=np.float64)
    squeeze = pos.ndim == 2
    if squeeze:
        pos = pos[None]
    edge = -1.0 if cell is None else float(cell)
    if spec.kind == "lj":
        e, f = _kernels.lennard_jones(pos, edge, float(spec.epsilon), float(spec.d0))
    elif spec.kind == "soft_sphere":
        e, f = _kernels.soft_sphere(pos, edge, float(spec.epsilon), float(spec.alpha), float(spec.sigma))
    elif spec.kind == "gupta":
        m = _gupta_matrices(spec)
        sp = np.zeros(pos.shape[1], np.int64) if species is None else np.asarray(species, np.int64)
        if sp.size and sp.max() >= len(spec.elements):
            raise ConfigurationError("species id outside the declared element list")
        e, f = _kernels.gupta(pos, edge, sp, m["p"], m["q"], m["d0"], m["A"], m["xi"])
    elif spec.kind == "sw":
        e, f = _kernels.stillinger_weber(
            pos, edge, float(spec.A), float(spec.epsilon), float(spec.B), float(spec.p),
            float(spec.q), float(spec.lam), float(spec.gamma), float(spec.sigma),
            float(spec.a), float(spec.cos_theta0), float(spec.r_cut),
        )
    else:
        raise ConfigurationError(f"unknown potential {spec!r}")
    if squeeze:
        return e[0], f[0]
    return e, f


_MATRIX_CACHE: dict = {}


def _gupta_matrices(spec: Gupta) -> dict[str, np.ndarray]:
    key = (spec.elements, spec.table)
    if key not in _MATRIX_CACHE:
        _MATRIX_CACHE[key] = spec.table.matrices(spec.elements)
    return _MATRIX_CACHE[key]


def _check(config: Configuration, spec: PotentialSpec) -> None:
    if spec.kind == "sw" and not config.periodic:
        raise ConfigurationError("Stillinger-Weber needs a periodic configuration")
    if spec.cutoff is not None:
        config.check_cutoff(spec.cutoff)


def energy_and_forces(config: Configuration, spec: PotentialSpec) -> tuple[float, np.ndarray]:
    _check(config, spec)
    e, f = batch_energy_forces(spec, config.positions, config.species, config.cell)
    if not math.isfinite(e):
        raise NonFiniteEnergyError(f"non-finite energy ({e}) for {spec.kind}")
    return float(e), f


def energy(config: Configuration, spec: PotentialSpec) -> float:
    return energy_and_forces(config, spec)[0]


def forces(config: Configuration, spec: PotentialSpec) -> np.ndarray:
    """Analytic forces, ``-dE/dx``, shape (N, 3)."""
    return energy_and_forces(config, spec)[1]


def lj_energy(config: Configuration, spec: LennardJones = LennardJones()) -> float:
    return energy(config, spec)


def gupta_energy(config: Configuration, spec: Gupta) -> float:
    return energy(config, spec)


def sw_energy(config: Configuration, spec: StillingerWeber = StillingerWeber()) -> float:
    return energy(config, spec)


def soft_sphere_energy(config: Configuration, spec: SoftSphere = SoftSphere()) -> float:
    return energy(config, spec)


def numerical_gradient(config: Configuration, spec: PotentialSpec, h: float = 1e-5) -> np.ndarray:
    """Central finite-difference estimate of dE/dx, one coordinate at a time."""
    if not h > 0:
        raise ValueError("h must be positive")
    x = config.positions
    n = x.size
    # all 2n displaced copies evaluated as one batch
    shifted = np.repeat(x[None], 2 * n, axis=0).reshape(2 * n, -1)
    idx = np.arange(n)
    shifted[2 * idx, idx] += h
    shifted[2 * idx + 1, idx] -= h
    e, _ = batch_energy_forces(spec, shifted.reshape(2 * n, *x.shape), config.species, config.cell)
    return ((e[0::2] - e[1::2]) / (2.0 * h)).reshape(x.shape)


# -- parameter files ---------------------------------------------------------

def save_gupta_table(path, table: PairParamTable) -> None:
    records = [{"pair": list(pair), **asdict(table[pair])} for pair in table]
    Path(path).write_text(json.dumps({"format": "gupta-pairs", "version": 1, "records": records}, indent=2) + "\n")


def load_gupta_table(path) -> PairParamTable:
    """Read a Gupta pair table; one record per element pair with p, q, d0, A, xi."""
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != "gupta-pairs":
        raise ConfigurationError(f"{path}: not a gupta-pairs file")
    names = {f.name for f in fields(GuptaPair)}
    entries = []
    for rec in doc["records"]:
        pair = rec.pop("pair")
        if set(rec) != names:
            raise ConfigurationError(f"{path}: record for {pair} needs exactly {sorted(names)}")
        entries.append((tuple(pair), GuptaPair(**rec)))
    return PairParamTable(entries)


def save_sw_params(path, spec: StillingerWeber) -> None:
    Path(path).write_text(json.dumps({"format": "sw-params", "version": 1, **asdict(spec)}, indent=2) + "\n")


def load_sw_params(path) -> StillingerWeber:
    doc = json.loads(Path(path).read_text())
    if doc.pop("format", None) != "sw-params":
        raise ConfigurationError(f"{path}: not a sw-params file")
    doc.pop("version", None)
    return StillingerWeber(**doc)


@dataclass
class ForceCheck:
    """Worst disagreement between analytic forces and finite differences."""

    rel_error: float
    atom: int
    axis: int
    analytic: float
    numeric: float

    def passed(self, tol: float = 1e-6) -> bool:
        return self.rel_error < tol


def check_forces(config: Configuration, spec: PotentialSpec, h: float = 1e-5) -> ForceCheck:
    """Compare ``forces`` with ``-numerical_gradient``, relative to the largest force component."""
    f = forces(config, spec)
    num = -numerical_gradient(config, spec, h)
    diff = np.abs(f - num)
    scale = max(float(np.max(np.abs(num))), 1e-12)
    i, a = np.unravel_index(int(np.argmax(diff)), diff.shape)
    return ForceCheck(float(diff[i, a] / scale), int(i), int(a), float(f[i, a]), float(num[i, a]))

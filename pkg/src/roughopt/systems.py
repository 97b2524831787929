"""Configurations, periodic geometry and deterministic random streams."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

# Diamond-cubic basis in units of the conventional cell edge.
DIAMOND_BASIS = np.array(
    [
        [0.0, 0.0, 0.0],
        [0.0, 0.5, 0.5],
        [0.5, 0.0, 0.5],
        [0.5, 0.5, 0.0],
        [0.25, 0.25, 0.25],
        [0.25, 0.75, 0.75],
        [0.75, 0.25, 0.75],
        [0.75, 0.75, 0.25],
    ]
)


class ConfigurationError(ValueError):
    """Raised when a configuration or its parameters are inconsistent."""


@dataclass(frozen=True)
class RngStream:
    """Immutable handle on a counter-based random stream.

    The same ``(seed, stream)`` pair always yields the same draws; a stream
    never advances in place, use :meth:`spawn` to derive child streams.
    """

    seed: int
    stream: int = 0

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence([self.seed & (2**64 - 1), self.stream & (2**64 - 1)])
        return np.random.Generator(np.random.Philox(ss))

    def spawn(self, key: int) -> "RngStream":
        ss = np.random.SeedSequence(
            [self.seed & (2**64 - 1), self.stream & (2**64 - 1), int(key) & (2**64 - 1)]
        )
        return RngStream(self.seed, int(ss.generate_state(1, np.uint64)[0]))


@dataclass
class Configuration:
    """Atomic positions, species ids and an optional cubic periodic cell.

    ``cell`` is the edge length of a cubic cell; ``None`` means free space.
    """

    positions: np.ndarray
    species: np.ndarray = field(default=None)
    cell: Optional[float] = None

    def __post_init__(self):
        self.positions = np.array(self.positions, dtype=np.float64).reshape(-1, 3)
        n = len(self.positions)
        if n < 1:
            raise ConfigurationError("a configuration needs at least one atom")
        if self.species is None:
            self.species = np.zeros(n, dtype=np.int64)
        self.species = np.asarray(self.species, dtype=np.int64).reshape(-1)
        if len(self.species) != n:
            raise ConfigurationError(f"{n} positions but {len(self.species)} species ids")
        if np.any(self.species < 0):
            raise ConfigurationError("species ids must be non-negative")
        if not np.all(np.isfinite(self.positions)):
            raise ConfigurationError("positions must be finite")
        if self.cell is not None:
            self.cell = float(self.cell)
            if not self.cell > 0:
                raise ConfigurationError("cell edge must be positive")

    @property
    def n_atoms(self) -> int:
        return len(self.positions)

    @property
    def periodic(self) -> bool:
        return self.cell is not None

    def with_positions(self, positions) -> "Configuration":
        return Configuration(positions, self.species.copy(), self.cell)

    def check_cutoff(self, cutoff: float) -> None:
        """Reject periodic cells too small for an unambiguous minimum image."""
        if self.cell is not None and not self.cell > 2.0 * cutoff:
            raise ConfigurationError(
                f"cell edge {self.cell} must exceed twice the cutoff {cutoff}"
            )


def minimum_image(delta: np.ndarray, cell: Optional[float]) -> np.ndarray:
    """Wrap difference vectors into (-edge/2, edge/2] per component."""
    if cell is None:
        return delta
    return delta - cell * np.ceil(delta / cell - 0.5)


def displacement(a, b, cell: Optional[float] = None) -> np.ndarray:
    """Vector from ``a`` to ``b``, minimum image if ``cell`` is given."""
    delta = np.asarray(b, dtype=np.float64) - np.asarray(a, dtype=np.float64)
    return minimum_image(delta, cell)


def pair_displacements(positions: np.ndarray, cell: Optional[float] = None) -> np.ndarray:
    """All ``x_j - x_i`` as an array of shape ``(..., N, N, 3)``."""
    delta = positions[..., None, :, :] - positions[..., :, None, :]
    return minimum_image(delta, cell)


def pair_distances(positions: np.ndarray, cell: Optional[float] = None) -> np.ndarray:
    return np.sqrt(np.sum(pair_displacements(positions, cell) ** 2, axis=-1))


def neighbor_pairs(config: Configuration, cutoff: float) -> list[tuple[int, int, float]]:
    """Pairs ``(i, j, d)`` with ``i < j`` and minimum-image distance below ``cutoff``."""
    if not cutoff > 0:
        raise ValueError("cutoff must be positive")
    d = pair_distances(config.positions, config.cell)
    i, j = np.triu_indices(config.n_atoms, k=1)
    keep = d[i, j] < cutoff
    return [(int(a), int(b), float(r)) for a, b, r in zip(i[keep], j[keep], d[i, j][keep])]


def diamond_lattice(cells_per_edge: int, cell_edge: float) -> Configuration:
    """Periodic diamond-cubic crystal with ``8 * cells_per_edge**3`` atoms."""
    if int(cells_per_edge) != cells_per_edge or cells_per_edge < 1:
        raise ConfigurationError("cells_per_edge must be a positive integer")
    if not cell_edge > 0:
        raise ConfigurationError("cell_edge must be positive")
    c = int(cells_per_edge)
    grid = np.stack(np.meshgrid(np.arange(c), np.arange(c), np.arange(c), indexing="ij"), -1)
    origins = grid.reshape(-1, 1, 3)
    positions = ((origins + DIAMOND_BASIS[None]) * cell_edge).reshape(-1, 3)
    return Configuration(positions, np.zeros(len(positions), dtype=np.int64), c * cell_edge)


def random_box_init(
    n: int,
    species: Sequence[int],
    box_edge: float,
    rng: RngStream,
    cell: Optional[float] = None,
) -> Configuration:
    """Uniform i.i.d. coordinates in ``[0, box_edge]^3``."""
    if n < 1:
        raise ConfigurationError("n must be at least 1")
    if not box_edge > 0:
        raise ConfigurationError("box_edge must be positive")
    positions = rng.generator().uniform(0.0, box_edge, size=(n, 3))
    return Configuration(positions, np.asarray(species, dtype=np.int64), cell)

"""Benchmark harness: multi-start evaluation, statistics, histograms and convex hulls."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .baselines import GradientDescent, Optimizer, drive, optimizer_to_dict, step_budget
from .systems import Configuration, ConfigurationError, RngStream
from .tasks import GM_TOLERANCE, TaskSpec, harmonic_init_batch, init_streams, normalize

POLISH_STEPS = 1000
POLISH_LR = 1e-3
HIST_WIDTH = 0.5
REPORT_FORMAT = "eval-report"
REPORT_VERSION = 1


# -- polish ------------------------------------------------------------------------

def polish_batch(task: TaskSpec, x: np.ndarray, steps: int = POLISH_STEPS, lr: float = POLISH_LR):
    """Plain gradient descent on a stack; returns (positions, energies, diverged, force evaluations)."""
    res = drive(GradientDescent(lr), task, x, steps)
    return res.final_positions, res.final_energy, res.diverged, res.n_force_evals


def polish(config: Configuration, task: TaskSpec, steps: int = POLISH_STEPS, lr: float = POLISH_LR):
    """``steps`` GD steps at ``lr``; returns the configuration and a diverged flag.

    A diverged polish returns the input configuration.
    """
    x, _, div, _ = polish_batch(task, config.positions[None], steps, lr)
    if div[0]:
        return config, True
    return config.with_positions(x[0]), False


# -- statistics ----------------------------------------------------------------------

def histogram(energies, anchor: Optional[float] = None, width: float = HIST_WIDTH):
    """Fixed-width bins whose edges sit at ``anchor + k * width``; returns (edges, counts)."""
    e = np.asarray(energies, dtype=np.float64)
    if e.size == 0:
        return np.array([]), np.array([], dtype=np.int64)
    anchor = float(e.min()) if anchor is None or not math.isfinite(anchor) else float(anchor)
    lo = math.floor((e.min() - anchor) / width)
    hi = math.floor((e.max() - anchor) / width) + 1
    edges = anchor + width * np.arange(lo, hi + 1)
    idx = np.clip(np.floor((e - anchor) / width).astype(np.int64) - lo, 0, hi - lo - 1)
    counts = np.bincount(idx, minlength=hi - lo)
    return edges, counts


def gm_hit_rate(report_or_energies, gm_reference: Optional[float] = None, tol: float = GM_TOLERANCE) -> int:
    """Number of final energies within ``tol`` of the reference global minimum."""
    if isinstance(report_or_energies, EvalReport):
        finals = report_or_energies.finals
        gm_reference = report_or_energies.gm_reference if gm_reference is None else gm_reference
    else:
        finals = np.asarray(report_or_energies, dtype=np.float64)
    if gm_reference is None:
        raise ConfigurationError("no global-minimum reference")
    return int(np.sum(np.abs(finals - gm_reference) <= tol))


@dataclass
class EvalReport:
    """Per-initialization final energies (after polish) and their summary."""

    task: str
    optimizer: str
    finals: np.ndarray
    diverged: np.ndarray
    seed: int
    steps: int
    polish_steps: int = POLISH_STEPS
    gm_reference: Optional[float] = None
    normalizer: Optional[float] = None
    hist_width: float = HIST_WIDTH
    force_evals: int = 0

    @property
    def n_inits(self) -> int:
        return len(self.finals)

    @property
    def min(self) -> float:
        return float(np.min(self.finals))

    @property
    def mean(self) -> float:
        return float(np.mean(self.finals))

    @property
    def hits(self) -> Optional[int]:
        return None if self.gm_reference is None else gm_hit_rate(self.finals, self.gm_reference)

    @property
    def n_diverged(self) -> int:
        return int(np.sum(self.diverged))

    @property
    def histogram(self):
        return histogram(self.finals, self.gm_reference, self.hist_width)

    def summary(self) -> dict:
        edges, counts = self.histogram
        doc = {
            "format": REPORT_FORMAT, "version": REPORT_VERSION, "task": self.task,
            "optimizer": self.optimizer, "seed": self.seed, "n_inits": self.n_inits,
            "steps": self.steps, "polish_steps": self.polish_steps, "min": self.min, "mean": self.mean,
            "gm_reference": self.gm_reference, "hits": self.hits, "diverged": self.n_diverged,
            "histogram": {"edges": edges.tolist(), "counts": counts.tolist()},
        }
        if self.normalizer is not None:
            doc["normalizer"] = self.normalizer
            doc["normalized_min"] = float(normalize(self.min, self.normalizer))
            doc["normalized_mean"] = float(normalize(self.mean, self.normalizer))
        return doc


def evaluate(task: TaskSpec, optimizer: Optimizer, n_inits: int = 150, seed: int = 0,
             steps: Optional[int] = None, polish_steps: int = POLISH_STEPS, label: Optional[str] = None,
             return_positions: bool = False):
    """Harmonic inits -> optimizer for the step budget -> polish -> statistics.

    Initialization ``i`` always uses stream ``spawn(i)`` of ``seed``, so a
    report on ``n`` inits is a prefix of a report on more.
    """
    if n_inits < 1:
        raise ValueError("n_inits must be at least 1")
    steps = task.inner_steps if steps is None else steps
    budget = step_budget(optimizer, steps)
    streams = init_streams(RngStream(seed), n_inits)
    x0 = harmonic_init_batch(task, streams)
    res = optimizer.run(task, x0, budget, rngs=[r.spawn(1) for r in streams])
    x, e, div, pe = polish_batch(task, res.final_positions, polish_steps)
    report = EvalReport(
        task.name, label or describe(optimizer), e, res.diverged | div, seed, budget, polish_steps,
        task.gm_reference, task.normalizer, force_evals=res.n_force_evals + pe,
    )
    return (report, x) if return_positions else report


def describe(optimizer) -> str:
    if hasattr(optimizer, "fc"):
        return "learned"
    d = optimizer_to_dict(optimizer)
    fam = d.pop("family")
    return fam + "(" + ",".join(f"{k}={v}" for k, v in d.items()) + ")"


# -- tables and export ------------------------------------------------------------------

TABLE_COLUMNS = ("task", "optimizer", "n_inits", "steps", "min", "mean", "hits", "gm_reference", "diverged")


class BudgetMismatch(ConfigurationError):
    pass


def benchmark_table(tasks: Sequence[TaskSpec], optimizers: dict, n_inits: int = 150, seed: int = 0,
                    steps: Optional[int] = None) -> list[EvalReport]:
    """Evaluate every (task, optimizer); budgets must agree before anything runs.

    ``optimizers`` maps a label to an optimizer or to a per-task callable
    ``task -> optimizer``.
    """
    for task in tasks:
        s = task.inner_steps if steps is None else steps
        chosen = {k: (o(task) if callable(o) and not isinstance(o, Optimizer) else o) for k, o in optimizers.items()}
        budgets = {k: step_budget(o, s) for k, o in chosen.items()}
        if len(set(budgets.values())) > 1:
            raise BudgetMismatch(f"inner-step budgets differ on {task.name}: {budgets}")
    reports = []
    for task in tasks:
        s = task.inner_steps if steps is None else steps
        for label, o in optimizers.items():
            opt = o(task) if callable(o) and not isinstance(o, Optimizer) else o
            reports.append(evaluate(task, opt, n_inits, seed, s, label=label))
    return reports


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def table_tsv(reports: Sequence[EvalReport]) -> str:
    lines = ["\t".join(TABLE_COLUMNS)]
    for r in reports:
        row = {"task": r.task, "optimizer": r.optimizer, "n_inits": r.n_inits, "steps": r.steps,
               "min": r.min, "mean": r.mean, "hits": r.hits, "gm_reference": r.gm_reference,
               "diverged": r.n_diverged}
        lines.append("\t".join(_cell(row[c]) for c in TABLE_COLUMNS))
    return "\n".join(lines) + "\n"


def histogram_tsv(edges, counts) -> str:
    lines = ["bin_lo\tbin_hi\tcount"]
    lines += [f"{lo:.6f}\t{hi:.6f}\t{int(c)}" for lo, hi, c in zip(edges[:-1], edges[1:], counts)]
    return "\n".join(lines) + "\n"


def trajectory_tsv(steps, energies) -> str:
    lines = ["step\tenergy"] + [f"{int(s)}\t{float(e)!r}" for s, e in zip(steps, energies)]
    return "\n".join(lines) + "\n"


def finals_tsv(report: EvalReport) -> str:
    lines = ["init\tenergy\tdiverged"]
    lines += [f"{i}\t{float(e)!r}\t{int(d)}" for i, (e, d) in enumerate(zip(report.finals, report.diverged))]
    return "\n".join(lines) + "\n"


def export_plot_data(obj, out_dir, stem: str) -> list[Path]:
    """Write columnar files for a report, hull, histogram ``(edges, counts)`` or trajectory ``(steps, energies)``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    def put(name, text):
        p = out / name
        p.write_text(text)
        written.append(p)

    if isinstance(obj, EvalReport):
        put(f"{stem}.json", json.dumps(obj.summary(), indent=2, sort_keys=True) + "\n")
        put(f"{stem}_finals.tsv", finals_tsv(obj))
        put(f"{stem}_hist.tsv", histogram_tsv(*obj.histogram))
    elif isinstance(obj, HullReport):
        put(f"{stem}.json", json.dumps(obj.summary(), indent=2, sort_keys=True) + "\n")
        put(f"{stem}.tsv", obj.to_tsv())
    elif isinstance(obj, tuple) and len(obj) == 2 and len(obj[0]) == len(obj[1]) + 1:
        put(f"{stem}.tsv", histogram_tsv(*obj))
    elif isinstance(obj, tuple) and len(obj) == 2:
        put(f"{stem}.tsv", trajectory_tsv(*obj))
    else:
        raise TypeError(f"cannot export {type(obj).__name__}")
    return written


# -- formation energies and hulls -----------------------------------------------------------

def formation_energy(energy: float, m: int, n: int, e_pure_a: float, e_pure_b: float) -> float:
    """``E - ((n - m)/n) E_A - (m/n) E_B`` for ``m`` atoms of B out of ``n``."""
    if not 0 <= m <= n or n < 1:
        raise ValueError("need 0 <= m <= n and n >= 1")
    if m == 0:
        return float(energy - e_pure_a)
    if m == n:
        return float(energy - e_pure_b)
    return float(energy - (n - m) / n * e_pure_a - m / n * e_pure_b)


def _cross(o, a, b) -> float:
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def lower_convex_hull(points) -> list[int]:
    """Indices of the lower-hull vertices, sorted by ``x``.

    Collinear interior points and all but the lowest point at a repeated
    ``x`` are dropped.  Both ``x = 0`` and ``x = 1`` must be present.
    """
    pts = [(float(x), float(y)) for x, y in points]
    if len(pts) < 2:
        raise ConfigurationError("need at least two points")
    xs = [p[0] for p in pts]
    if 0.0 not in xs or 1.0 not in xs:
        raise ConfigurationError("both endpoints (x=0 and x=1) are required")
    order = sorted(range(len(pts)), key=lambda i: (pts[i][0], pts[i][1], i))
    hull: list[int] = []
    for i in order:
        if hull and pts[hull[-1]][0] == pts[i][0]:
            continue
        while len(hull) >= 2 and _cross(pts[hull[-2]], pts[hull[-1]], pts[i]) <= 0:
            hull.pop()
        hull.append(i)
    return hull


def hull_oracle(points) -> list[int]:
    """Brute force: a point is a vertex unless some segment lies on or below it."""
    pts = [(float(x), float(y)) for x, y in points]
    keep = []
    for i, (x, y) in enumerate(pts):
        lowest_here = min(range(len(pts)), key=lambda k: (pts[k][0] != x, pts[k][1], k))
        if lowest_here != i:
            continue
        covered = False
        for j, (xj, yj) in enumerate(pts):
            for k, (xk, yk) in enumerate(pts):
                if xj < x < xk:
                    y_seg = yj + (yk - yj) * (x - xj) / (xk - xj)
                    if y >= y_seg:
                        covered = True
                        break
            if covered:
                break
        if not covered:
            keep.append(i)
    return sorted(keep, key=lambda i: pts[i][0])


@dataclass
class HullReport:
    """Formation energies of a fixed-size composition series and its lower hull."""

    series: str
    n_atoms: int
    counts: np.ndarray
    energies: np.ndarray
    formation: np.ndarray
    on_hull: np.ndarray
    e_pure_a: float
    e_pure_b: float
    optimizer: str = ""
    seed: int = 0

    def summary(self) -> dict:
        return {
            "format": "hull-report", "version": 1, "series": self.series, "n_atoms": self.n_atoms,
            "optimizer": self.optimizer, "seed": self.seed, "e_pure_a": self.e_pure_a,
            "e_pure_b": self.e_pure_b, "hull": [int(m) for m in self.counts[self.on_hull]],
        }

    def to_tsv(self) -> str:
        lines = ["m\tfraction\tenergy\tformation\ton_hull"]
        for m, e, f, h in zip(self.counts, self.energies, self.formation, self.on_hull):
            lines.append(f"{int(m)}\t{m / self.n_atoms:.6f}\t{float(e)!r}\t{float(f)!r}\t{int(h)}")
        return "\n".join(lines) + "\n"


def hull_report(series: str, n_atoms: int, energies: dict, optimizer: str = "", seed: int = 0) -> HullReport:
    """Build a hull report from ``{m: best energy}``; needs ``m = 0`` and ``m = n_atoms``."""
    if 0 not in energies or n_atoms not in energies:
        raise ConfigurationError("pure endpoints (m=0 and m=n) are missing")
    counts = np.array(sorted(energies), dtype=np.int64)
    e = np.array([energies[m] for m in counts], dtype=np.float64)
    ea, eb = float(energies[0]), float(energies[n_atoms])
    form = np.array([formation_energy(ei, int(m), n_atoms, ea, eb) for ei, m in zip(e, counts)])
    hull = lower_convex_hull(list(zip(counts / n_atoms, form)))
    on = np.zeros(len(counts), dtype=bool)
    on[hull] = True
    return HullReport(series, n_atoms, counts, e, form, on, ea, eb, optimizer, seed)


def composition_series(series: str, optimizer_for, n_inits: int, seed: int, steps: Optional[int] = None,
                       counts: Optional[Sequence[int]] = None, total: int = 38) -> tuple[HullReport, list[EvalReport]]:
    """Evaluate every composition of a bimetallic series and build its hull.

    ``optimizer_for(task)`` returns the optimizer for one composition; the
    pure endpoints are always included.
    """
    from .tasks import builtin_task

    ms = sorted(set(range(total + 1) if counts is None else counts) | {0, total})
    best, reports = {}, []
    for m in ms:
        task = builtin_task(f"{series}{m}")
        opt = optimizer_for(task)
        rep = evaluate(task, opt, n_inits, seed, steps)
        reports.append(rep)
        best[m] = rep.min
    label = reports[0].optimizer if reports else ""
    return hull_report(series, total, best, label, seed), reports

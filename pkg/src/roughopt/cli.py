"""Command-line entry point.

Output layout under ``--out``::

    caches/normalizers.json   caches/tuned.json
    checkpoints/              reports/              logs/

Exit codes: 0 success, 1 usage or configuration error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .baselines import (
    Adam,
    BasinHopping,
    Fire,
    GradientDescent,
    TunedCache,
    family_grid,
    tune_two_stage,
)
from .evaluate import composition_series, evaluate, export_plot_data, table_tsv
from .learnedopt import LearnedOptimizer, load_checkpoint
from .metatrain import MetaConfig, train
from .potentials import NonFiniteEnergyError, SoftSphere, check_forces
from .systems import ConfigurationError, RngStream
from .tasks import (
    SERIES,
    NormalizationError,
    NormalizerCache,
    builtin_task,
    compute_normalizer,
    harmonic_init_batch,
    init_streams,
)

log = logging.getLogger("roughopt")

WORKERS_ENV = "ROUGHOPT_WORKERS"
EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2
FAMILIES = ("adam", "fire", "bh")


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    """Every option a command can take; a JSON config file may set any of them."""

    seed: int = 0
    workers: Optional[int] = None
    out: str = "runs"
    task: Optional[str] = None
    optimizer: str = "adam"
    ckpt: Optional[str] = None
    inits: Optional[int] = None
    steps: Optional[int] = None
    strategy: Optional[str] = None
    bh_multiplier: int = 10
    trials: int = 100
    meta_tune: bool = True
    outer_steps: int = 100
    resume: Optional[str] = None
    train: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        names = {f.name for f in fields(cls)}
        unknown = sorted(set(doc) - names)
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(unknown)}")
        cfg = cls(**doc)
        if cfg.train:
            MetaConfig.from_dict({k: v for k, v in cfg.train.items()})
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {path}: {exc}") from None
        if not isinstance(doc, dict):
            raise UsageError("config file must hold a JSON object")
        return cls.from_dict(doc)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file with any RunConfig option")
    common.add_argument("--seed", type=int)
    common.add_argument("--workers", type=int, help=f"parallel threads (env {WORKERS_ENV})")
    common.add_argument("--out", help="output directory (default: runs)")
    common.add_argument("--task")
    common.add_argument("--optimizer")
    common.add_argument("--ckpt", help="learned-optimizer checkpoint")
    common.add_argument("--inits", type=int)
    common.add_argument("--steps", type=int)
    common.add_argument("--strategy", choices=("es", "esmc", "ga"))
    common.add_argument("--bh-multiplier", type=int, dest="bh_multiplier")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="roughopt", description="Atomic structure optimization with classical and learned optimizers.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("normalize", parents=[common], help="compute and cache a task normalizer")
    t = sub.add_parser("tune", parents=[common], help="grid (+ scalar meta) tuning of a baseline")
    t.add_argument("--no-meta", action="store_false", dest="meta_tune", default=None)
    t.add_argument("--outer-steps", type=int, dest="outer_steps")
    tr = sub.add_parser("train", parents=[common], help="meta-train a learned optimizer")
    tr.add_argument("--resume", help="training state file to continue from")
    sub.add_parser("eval", parents=[common], help="multi-start evaluation report")
    sub.add_parser("hull", parents=[common], help="formation-energy hull of a bimetallic series")
    c = sub.add_parser("check-forces", parents=[common], help="analytic vs finite-difference forces")
    c.add_argument("--trials", type=int)
    return p


def resolve_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    env = os.environ.get(WORKERS_ENV)
    if env:
        try:
            cfg.workers = int(env)
        except ValueError:
            raise UsageError(f"{WORKERS_ENV} must be an integer") from None
    for f in fields(RunConfig):
        v = getattr(args, f.name, None)
        if v is not None and f.name != "train":
            setattr(cfg, f.name, v)
    if cfg.workers is not None and cfg.workers < 1:
        raise UsageError("--workers must be at least 1")
    return cfg


def set_workers(n: Optional[int]) -> None:
    """Bound kernel threads; results do not depend on the count."""
    if n is None:
        return
    import numba

    numba.set_num_threads(max(1, min(int(n), numba.config.NUMBA_NUM_THREADS)))


# -- helpers ---------------------------------------------------------------------------

def _task(name: Optional[str]):
    if not name:
        raise UsageError("--task is required")
    try:
        return builtin_task(name)
    except KeyError as exc:
        raise UsageError(exc.args[0]) from None


def _dirs(cfg: RunConfig) -> dict:
    root = Path(cfg.out)
    return {k: root / k for k in ("caches", "checkpoints", "reports", "logs")}


def _with_normalizer(task, cfg: RunConfig):
    cache = NormalizerCache(_dirs(cfg)["caches"] / "normalizers.json")
    value = cache.get(task.name, cfg.seed)
    if value is None:
        value = cache.lookup(task.name)
    return task if value is None else task.with_normalizer(value)


def _baseline(family: str, task, cfg: RunConfig, steps: int):
    if family == "gd":
        return GradientDescent(1e-3)
    if family not in FAMILIES:
        raise UsageError(f"unknown optimizer {family!r}; choose from {', '.join(FAMILIES + ('gd', 'learned'))}")
    tuned = TunedCache(_dirs(cfg)["caches"] / "tuned.json").get(task.name, family)
    if tuned is not None:
        return tuned
    log.warning("no tuned %s for %s; using the first grid point", family, task.name)
    return family_grid(family, steps)[0]


def _learned(cfg: RunConfig):
    if not cfg.ckpt:
        raise UsageError("the learned optimizer needs --ckpt")
    params, fc, _ = load_checkpoint(cfg.ckpt)
    if cfg.train.get("features"):
        from .learnedopt import FeatureConfig

        if FeatureConfig.from_dict(cfg.train["features"]) != fc:
            raise UsageError("checkpoint feature config differs from the configured one")
    return LearnedOptimizer.from_params(params, fc)


# -- commands --------------------------------------------------------------------------

def cmd_normalize(cfg: RunConfig) -> int:
    task = _task(cfg.task)
    cache = NormalizerCache(_dirs(cfg)["caches"] / "normalizers.json")
    cached = cache.get(task.name, cfg.seed)
    if cached is not None:
        print(f"{task.name}: normalizer {cached!r} (cached)")
        return EXIT_OK
    n = cfg.inits or 150
    value = compute_normalizer(task, RngStream(cfg.seed), n_inits=n, steps=cfg.steps)
    cache.put(task.name, cfg.seed, value, n_inits=n, steps=cfg.steps or task.inner_steps, optimizer="adam(lr=0.01)")
    print(f"{task.name}: normalizer {value!r}")
    return EXIT_OK


def cmd_tune(cfg: RunConfig) -> int:
    task = _task(cfg.task)
    family = cfg.optimizer
    if family not in FAMILIES:
        raise UsageError(f"tune supports {', '.join(FAMILIES)}, not {family!r}")
    steps = cfg.steps or task.inner_steps
    winner, record = tune_two_stage(task, family, RngStream(cfg.seed), n_inits=cfg.inits or 20,
                                    steps=steps, outer_steps=cfg.outer_steps, meta=cfg.meta_tune)
    TunedCache(_dirs(cfg)["caches"] / "tuned.json").put(task.name, family, winner, seed=cfg.seed, steps=steps, **record)
    print(f"{task.name}/{family}: {winner!r}")
    return EXIT_OK


def cmd_train(cfg: RunConfig) -> int:
    doc = dict(cfg.train)
    doc.setdefault("seed", cfg.seed)
    if cfg.strategy:
        doc["strategy"] = cfg.strategy
    if cfg.steps:
        doc["inner_steps"] = cfg.steps
    if cfg.task:
        doc["tasks"] = [cfg.task]
    meta = MetaConfig.from_dict(doc)
    tasks = [_with_normalizer(_task(name), cfg) for name in meta.tasks]
    out = Path(cfg.out)
    result = train(meta, tasks, out_dir=out, resume=cfg.resume)
    (out / "logs").mkdir(parents=True, exist_ok=True)
    (out / "logs" / "train_config.json").write_text(json.dumps(meta.to_dict(), indent=2, sort_keys=True) + "\n")
    best = result.log.rows[-1]["best"] if result.log.rows else float("nan")
    print(f"trained {meta.total} updates ({meta.strategy}); best meta-loss {best!r}")
    return EXIT_OK


def _optimizer(cfg: RunConfig, task, steps):
    if cfg.optimizer == "learned":
        return _learned(cfg)
    return _baseline(cfg.optimizer, task, cfg, steps)


def cmd_eval(cfg: RunConfig) -> int:
    task = _with_normalizer(_task(cfg.task), cfg)
    steps = cfg.steps or task.inner_steps
    opt = _optimizer(cfg, task, steps)
    report = evaluate(task, opt, cfg.inits or 150, cfg.seed, steps, label=cfg.optimizer)
    stem = f"{task.name}_{cfg.optimizer}_seed{cfg.seed}"
    export_plot_data(report, _dirs(cfg)["reports"], stem)
    (_dirs(cfg)["reports"] / f"{stem}_table.tsv").write_text(table_tsv([report]))
    hits = "" if report.hits is None else f" hits {report.hits}/{report.n_inits}"
    print(f"{task.name} {cfg.optimizer}: min {report.min:.4f} mean {report.mean:.4f}{hits}")
    return EXIT_OK


def cmd_hull(cfg: RunConfig) -> int:
    series = cfg.task
    if series not in SERIES:
        raise UsageError(f"--task must name a series: {', '.join(SERIES)}")
    steps = cfg.steps or 50000

    def optimizer_for(task):
        if cfg.optimizer == "bh":
            base = _baseline("bh", task, cfg, steps)
            total = steps * cfg.bh_multiplier
            return BasinHopping(base.step_scale, max(total // base.steps_per_basin, 1), base.steps_per_basin, base.lr)
        return _optimizer(cfg, task, steps)

    hull, reports = composition_series(series, optimizer_for, cfg.inits or 150, cfg.seed, steps)
    stem = f"hull_{series}_{cfg.optimizer}_seed{cfg.seed}"
    export_plot_data(hull, _dirs(cfg)["reports"], stem)
    (_dirs(cfg)["reports"] / f"{stem}_table.tsv").write_text(table_tsv(reports))
    print(f"{series}: hull compositions {[int(m) for m in hull.counts[hull.on_hull]]}")
    return EXIT_OK


def cmd_check_forces(cfg: RunConfig) -> int:
    names = [cfg.task] if cfg.task else ["lj13", "au55", "si64", "soft-sphere"]
    rng = RngStream(cfg.seed)
    ok = True
    for k, name in enumerate(names):
        if name == "soft-sphere":
            task, spec = builtin_task("lj13"), SoftSphere()
        else:
            task = _task(name)
            spec = task.potential
        streams = init_streams(rng.spawn(k), cfg.trials)
        x0 = harmonic_init_batch(task, streams)
        # jiggle off the soft-sphere minimum so forces are generic
        x0 = x0 + np.stack([0.05 * r.spawn(2).generator().standard_normal(x0.shape[1:]) for r in streams])
        worst = max((check_forces(task.configuration(x), spec) for x in x0), key=lambda c: c.rel_error)
        status = "PASS" if worst.passed() else "FAIL"
        ok &= worst.passed()
        print(f"{status} {name}: max relative error {worst.rel_error:.3e} over {cfg.trials} configs "
              f"(worst atom {worst.atom} axis {'xyz'[worst.axis]}: analytic {worst.analytic:.9g} numeric {worst.numeric:.9g})")
    return EXIT_OK if ok else EXIT_NUMERIC


COMMANDS = {
    "normalize": cmd_normalize, "tune": cmd_tune, "train": cmd_train, "eval": cmd_eval,
    "hull": cmd_hull, "check-forces": cmd_check_forces,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        set_workers(cfg.workers)
        return COMMANDS[args.command](cfg)
    except UsageError as exc:
        print(f"roughopt: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigurationError, FileNotFoundError) as exc:
        print(f"roughopt: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NormalizationError, NonFiniteEnergyError, FloatingPointError) as exc:
        print(f"roughopt: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())

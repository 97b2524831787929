"""End-to-end acceptance checks, one test per criterion.

The heavy criteria (3 to 7) drive the command-line protocol into a work
directory (``ROUGHOPT_ACCEPT_DIR``, default ``runs/acceptance`` under the
repository).  Every stage is skipped when its artifact already exists, so a
finished run can be re-checked in seconds; delete the directory to start over.
A cold run takes several hours on one core.
"""

import json
import os
import subprocess
import sys
from pathlib import Path

import numpy as np

from roughopt.baselines import Adam, TunedCache
from roughopt.cli import EXIT_OK, main
from roughopt.evaluate import formation_energy, gm_hit_rate, hull_oracle, lower_convex_hull
from roughopt.metatrain import es_gradient, esmc_gradient, ga_generation, outer_lr, pair_contribution
from roughopt.potentials import LennardJones, energy, forces
from roughopt.systems import Configuration, RngStream
from roughopt.tasks import NormalizerCache, builtin_task, harmonic_init_batch, init_streams, normalize

ROOT = Path(__file__).resolve().parents[1]
WORK = Path(os.environ.get("ROUGHOPT_ACCEPT_DIR", ROOT / "runs" / "acceptance"))
MAIN = WORK / "main"
DESK = WORK / "desk"

# desk-scale GA meta-training
DESK_STEPS = 2000
DESK_TRAIN = {"strategy": "ga", "population": 16, "ga_batch": 8, "inner_steps": DESK_STEPS, "total": 200,
              "tasks": ["lj13"], "seed": 0}


def verdict(capsys, number, ok, detail):
    with capsys.disabled():
        print(f"\nACCEPTANCE {number:>2} {'PASS' if ok else 'FAIL'}: {detail}")
    assert ok, detail


def cli(out, *args):
    code = main([*args, "--out", str(out)])
    assert code == EXIT_OK, f"roughopt {' '.join(args)} exited {code}"


def normalized(out, task):
    if NormalizerCache(out / "caches" / "normalizers.json").get(task, 0) is None:
        cli(out, "normalize", "--task", task)


def tuned(out, task, family, *extra):
    if TunedCache(out / "caches" / "tuned.json").get(task, family) is None:
        cli(out, "tune", "--task", task, "--optimizer", family, *extra)


def report(out, task, optimizer, *extra):
    path = out / "reports" / f"{task}_{optimizer}_seed0.json"
    if not path.exists():
        cli(out, "eval", "--task", task, "--optimizer", optimizer, *extra)
    doc = json.loads(path.read_text())
    finals = np.loadtxt(out / "reports" / f"{task}_{optimizer}_seed0_finals.tsv", skiprows=1, usecols=1)
    return doc, np.atleast_1d(finals)


def trained_checkpoint():
    ckpt = DESK / "checkpoints" / "best.json"
    log = DESK / "logs" / "train_log.tsv"
    done = log.exists() and len(log.read_text().splitlines()) - 1 >= DESK_TRAIN["total"]
    if not done:
        DESK.mkdir(parents=True, exist_ok=True)
        cfg = DESK / "train.json"
        cfg.write_text(json.dumps({"train": DESK_TRAIN}))
        args = ["train", "--config", str(cfg)]
        state = DESK / "checkpoints" / "train_state.json"
        if state.exists():
            args += ["--resume", str(state)]
        cli(DESK, *args)
    return ckpt


class TestCheap:
    def test_01_force_correctness(self, capsys, tmp_path):
        code = main(["check-forces", "--trials", "100", "--out", str(tmp_path)])
        lines = [l for l in capsys.readouterr().out.splitlines() if l.startswith(("PASS", "FAIL"))]
        ok = code == EXIT_OK and len(lines) == 4 and all(l.startswith("PASS") for l in lines)
        verdict(capsys, 1, ok, "; ".join(l.split(" (")[0] for l in lines))

    def test_02_lj_dimer(self, capsys):
        spec = LennardJones(epsilon=1.0, d0=1.0)
        c = Configuration(np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]))
        e, f = energy(c, spec), forces(c, spec)
        ok = abs(e + 1.0) < 1e-10 and np.max(np.abs(f)) < 1e-10
        verdict(capsys, 2, ok, f"E(d0) = {e!r}, max |F| = {np.max(np.abs(f)):.1e}")

    def test_08_esmc_zero(self, capsys):
        eps = RngStream(0).generator().standard_normal(50)
        worst = 0.0
        for base, plus, minus in [(1.0, 1.5, 2.0), (-0.9, -0.5, -0.1), (0.0, 0.0, 0.0), (3.0, 3.0, 7.0)]:
            worst = max(worst, float(np.max(np.abs(pair_contribution(base, plus, minus, eps, 0.1)))))
        ok = worst == 0.0
        verdict(capsys, 8, ok, f"max |pair gradient| with both losses above base = {worst!r}")

    def test_09_estimator_cosine(self, capsys):
        theta = RngStream(1).generator().standard_normal(20)

        def objective(thetas, groups):
            return np.sum(np.atleast_2d(thetas) ** 2, axis=1)

        exact = 2 * theta
        cos = {}
        for name, fn in (("es", es_gradient), ("esmc", esmc_gradient)):
            g = fn(theta, objective, 0.1, 1000, RngStream(2))
            cos[name] = float(g @ exact / (np.linalg.norm(g) * np.linalg.norm(exact)))
        ok = min(cos.values()) > 0.9
        verdict(capsys, 9, ok, f"cosine ES {cos['es']:.4f}, ESMC {cos['esmc']:.4f}")

    def test_10_ga_elitism(self, capsys):
        centre = np.array([1.5, -0.5])

        def objective(thetas, groups):
            return np.sum((np.atleast_2d(thetas) - centre) ** 2, axis=1)

        theta, rng, best = np.array([-2.0, 3.0]), RngStream(3), []
        for g in range(100):
            gen = ga_generation(theta, 16, 0.3, objective, rng.spawn(g))
            theta = gen.theta
            best.append(gen.loss)
        ok = bool(np.all(np.diff(best) <= 0))
        verdict(capsys, 10, ok, f"best meta-loss {best[0]:.4f} -> {best[-1]:.2e} over 100 generations")

    def test_12_outer_lr(self, capsys):
        got = (outer_lr(0), outer_lr(10), outer_lr(100))
        want = (0.01, 0.01 * 0.98, 0.01 * 0.98 ** 10)
        ok = got == want
        verdict(capsys, 12, ok, f"lr(0), lr(10), lr(100) = {got}")

    def test_13_hull(self, capsys):
        rng = np.random.default_rng(13)
        agree = 0
        for _ in range(50):
            n = int(rng.integers(2, 30))
            xs = np.concatenate([[0.0, 1.0], rng.integers(1, 40, n - 2) / 40.0])
            pts = list(zip(xs, rng.normal(size=n)))
            agree += lower_convex_hull(pts) == hull_oracle(pts)
        ends = all(formation_energy(ea, 0, int(n), ea, eb) == 0.0 and formation_energy(eb, int(n), int(n), ea, eb) == 0.0
                   for (ea, eb), n in zip(rng.uniform(-300, 0, (50, 2)), rng.integers(1, 80, 50)))
        ok = agree == 50 and ends
        verdict(capsys, 13, ok, f"hull matches oracle on {agree}/50 sets; endpoint formation zero: {ends}")

    def test_14_determinism_across_workers(self, capsys, tmp_path):
        env = dict(os.environ, NUMBA_NUM_THREADS="4")
        env.pop("ROUGHOPT_WORKERS", None)
        trees = []
        for workers in (1, 4):
            out = tmp_path / f"w{workers}"
            out.mkdir()
            (out / "t.json").write_text(json.dumps({"train": {"strategy": "es", "population": 4, "batch_target": 4,
                                                              "total": 2, "inner_steps": 20}}))
            for args in (["normalize", "--task", "lj13", "--inits", "6", "--steps", "300"],
                         ["tune", "--task", "lj13", "--optimizer", "fire", "--inits", "3", "--steps", "100",
                          "--outer-steps", "2"],
                         ["eval", "--task", "lj13", "--optimizer", "fire", "--inits", "4", "--steps", "200"],
                         ["train", "--task", "lj13", "--config", str(out / "t.json")],
                         ["eval", "--task", "lj13", "--optimizer", "learned", "--ckpt",
                          str(out / "checkpoints" / "best.json"), "--inits", "3", "--steps", "20"]):
                subprocess.run([sys.executable, "-m", "roughopt", *args, "--out", str(out),
                                "--workers", str(workers)], check=True, env=env, capture_output=True)
            (out / "t.json").unlink()
            trees.append({str(p.relative_to(out)): p.read_bytes() for p in sorted(out.rglob("*"))
                          if p.is_file() and p.name != "walltime.tsv"})
        same = sorted(trees[0]) == sorted(trees[1]) and all(trees[0][k] == trees[1][k] for k in trees[0])
        verdict(capsys, 14, same, f"{len(trees[0])} output files byte-identical with 1 and 4 workers: {same}")


class TestProtocol:
    def test_03_lj13_tuned_adam(self, capsys):
        normalized(MAIN, "lj13")
        tuned(MAIN, "lj13", "adam")
        doc, finals = report(MAIN, "lj13", "adam")
        hits = gm_hit_rate(finals, -44.33)
        checks = {"min": abs(doc["min"] + 44.33) <= 0.01, "mean": abs(doc["mean"] + 40.58) <= 1.0,
                  "hits": 10 <= hits <= 35, "inits": doc["n_inits"] == 150 and doc["steps"] == 50000}
        failed = [k for k, v in checks.items() if not v]
        verdict(capsys, 3, not failed, f"min {doc['min']:.4f} mean {doc['mean']:.4f} hits {hits}/150"
                                       + (f" (out of band: {', '.join(failed)})" if failed else ""))

    def test_04_lj13_basin_hopping(self, capsys):
        tuned(MAIN, "lj13", "bh")
        bh = TunedCache(MAIN / "caches" / "tuned.json").get("lj13", "bh")
        doc, finals = report(MAIN, "lj13", "bh")
        shape = (bh.n_basins, bh.steps_per_basin) == (10, 5000)
        found = gm_hit_rate(finals, -44.33) > 0
        ok = shape and found and abs(doc["mean"] + 43.49) <= 0.5
        verdict(capsys, 4, ok, f"{bh!r}: min {doc['min']:.4f} mean {doc['mean']:.4f} "
                               f"hits {gm_hit_rate(finals, -44.33)}/150")

    def test_05_au55_basin_hopping(self, capsys):
        tuned(MAIN, "au55", "bh", "--no-meta")
        doc, finals = report(MAIN, "au55", "bh")
        hits = gm_hit_rate(finals, -181.89, tol=0.05)
        ok = hits > 0 and doc["steps"] == 50000
        verdict(capsys, 5, ok, f"min {doc['min']:.4f} eV, {hits}/150 within 0.05 of -181.89")

    def test_06_si64_fire(self, capsys):
        tuned(MAIN, "si64", "fire", "--no-meta")
        doc, _ = report(MAIN, "si64", "fire")
        ok = abs(doc["mean"] + 257.01) <= 3.0
        verdict(capsys, 6, ok, f"mean {doc['mean']:.3f} eV (band -257.01 +- 3), min {doc['min']:.3f}")

    def test_07_desk_meta_training(self, capsys):
        normalized(DESK, "lj13")
        tuned(DESK, "lj13", "adam", "--steps", str(DESK_STEPS))
        adam, adam_finals = report(DESK, "lj13", "adam", "--steps", str(DESK_STEPS), "--inits", "50")
        ckpt = trained_checkpoint()
        learned, learned_finals = report(DESK, "lj13", "learned", "--ckpt", str(ckpt), "--steps", str(DESK_STEPS),
                                         "--inits", "50")
        hits_a, hits_l = gm_hit_rate(adam_finals, -44.33), gm_hit_rate(learned_finals, -44.33)
        ok = learned["mean"] < adam["mean"] and hits_l > hits_a
        verdict(capsys, 7, ok, f"learned mean {learned['mean']:.4f} hits {hits_l}/50 vs "
                               f"tuned Adam mean {adam['mean']:.4f} hits {hits_a}/50")

    def test_11_normalization_identity(self, capsys):
        normalized(MAIN, "lj13")
        task = builtin_task("lj13")
        value = NormalizerCache(MAIN / "caches" / "normalizers.json").get("lj13", 0)
        # replay the normalizer's own Adam runs
        x0 = harmonic_init_batch(task, init_streams(RngStream(0), 150))
        traj = Adam(lr=0.01).run(task, x0, task.inner_steps)
        best = float(normalize(traj.final_energy[~traj.diverged].min(), value))
        ok = best == -1.0
        verdict(capsys, 11, ok, f"normalizer {value!r}, best normalized final energy {best!r}")

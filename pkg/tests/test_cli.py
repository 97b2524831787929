import json
import os
import subprocess
import sys

import pytest

from roughopt.baselines import TunedCache
from roughopt.cli import EXIT_OK, EXIT_USAGE, RunConfig, UsageError, main
from roughopt.learnedopt import FeatureConfig, init_params, save_checkpoint
from roughopt.systems import RngStream
from roughopt.tasks import NormalizerCache


def run(tmp_path, *args):
    return main([*args, "--out", str(tmp_path)])


def tree_bytes(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*"))
            if p.is_file() and p.name != "walltime.tsv"}


class TestConfig:
    def test_round_trip(self):
        cfg = RunConfig(seed=4, task="lj13", train={"strategy": "ga", "population": 16})
        assert RunConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg

    def test_unknown_key(self):
        with pytest.raises(UsageError):
            RunConfig.from_dict({"sed": 1})

    def test_unknown_training_key(self):
        from roughopt.systems import ConfigurationError

        with pytest.raises(ConfigurationError):
            RunConfig.from_dict({"train": {"pop": 3}})

    def test_flags_override_file(self, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"task": "lj99", "steps": 10, "inits": 2}))
        assert main(["normalize", "--config", str(cfg), "--task", "lj5", "--out", str(tmp_path)]) == EXIT_OK
        assert NormalizerCache(tmp_path / "caches" / "normalizers.json").get("lj5", 0) is not None


class TestExitCodes:
    def test_unknown_task(self, tmp_path, capsys):
        assert run(tmp_path, "normalize", "--task", "cu13") == EXIT_USAGE
        assert "unknown task 'cu13'" in capsys.readouterr().err

    def test_missing_task(self, tmp_path):
        assert run(tmp_path, "normalize") == EXIT_USAGE

    def test_bad_flag(self, tmp_path):
        with pytest.raises(SystemExit) as exc:
            run(tmp_path, "eval", "--bogus")
        assert exc.value.code == EXIT_USAGE

    def test_bad_config_file(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text("[1, 2]")
        assert main(["eval", "--config", str(p)]) == EXIT_USAGE

    def test_unknown_family(self, tmp_path):
        assert run(tmp_path, "tune", "--task", "lj5", "--optimizer", "lbfgs") == EXIT_USAGE

    def test_learned_needs_checkpoint(self, tmp_path):
        assert run(tmp_path, "eval", "--task", "lj5", "--optimizer", "learned", "--inits", "1") == EXIT_USAGE

    def test_missing_checkpoint_file(self, tmp_path):
        assert run(tmp_path, "eval", "--task", "lj5", "--optimizer", "learned", "--ckpt",
                   str(tmp_path / "nope.json")) == EXIT_USAGE

    def test_train_without_normalizer(self, tmp_path, capsys):
        assert run(tmp_path, "train", "--task", "lj5", "--steps", "2") == EXIT_USAGE
        assert "lj5" in capsys.readouterr().err

    def test_bad_workers(self, tmp_path, monkeypatch):
        monkeypatch.setenv("ROUGHOPT_WORKERS", "many")
        assert run(tmp_path, "normalize", "--task", "lj5") == EXIT_USAGE

    def test_hull_needs_series(self, tmp_path):
        assert run(tmp_path, "hull", "--task", "lj13") == EXIT_USAGE


class TestCommands:
    def test_normalize_idempotent(self, tmp_path, capsys):
        args = ("normalize", "--task", "lj5", "--inits", "3", "--steps", "200")
        assert run(tmp_path, *args) == EXIT_OK
        first = (tmp_path / "caches" / "normalizers.json").read_bytes()
        assert run(tmp_path, *args) == EXIT_OK
        assert "cached" in capsys.readouterr().out
        assert (tmp_path / "caches" / "normalizers.json").read_bytes() == first

    def test_tune_grid_only(self, tmp_path):
        assert run(tmp_path, "tune", "--task", "lj5", "--optimizer", "bh", "--inits", "2", "--steps", "100",
                   "--no-meta") == EXIT_OK
        bh = TunedCache(tmp_path / "caches" / "tuned.json").get("lj5", "bh")
        assert bh.step_scale in (0.2, 0.4, 0.6, 0.8)

    def test_tune_with_meta(self, tmp_path):
        assert run(tmp_path, "tune", "--task", "lj5", "--inits", "2", "--steps", "50", "--outer-steps", "1") == EXIT_OK
        doc = json.loads((tmp_path / "caches" / "tuned.json").read_text())
        entry = doc["entries"][0]
        assert entry["grid_winner"]["lr"] in (0.01, 0.005, 0.001)
        assert len(entry["meta_runs"]) == 3

    def test_eval_uses_tuned(self, tmp_path, capsys):
        run(tmp_path, "tune", "--task", "lj5", "--inits", "2", "--steps", "50", "--no-meta")
        assert run(tmp_path, "eval", "--task", "lj5", "--inits", "1", "--steps", "50") == EXIT_OK
        reports = tmp_path / "reports"
        names = sorted(p.name for p in reports.iterdir())
        assert names == ["lj5_adam_seed0.json", "lj5_adam_seed0_finals.tsv", "lj5_adam_seed0_hist.tsv",
                         "lj5_adam_seed0_table.tsv"]

    def test_train_and_eval_learned(self, tmp_path):
        run(tmp_path, "normalize", "--task", "lj5", "--inits", "2", "--steps", "100")
        cfg = tmp_path / "train.json"
        cfg.write_text(json.dumps({"train": {"strategy": "ga", "population": 2, "ga_batch": 2, "total": 1,
                                             "features": {"hidden": [4]}}}))
        assert main(["train", "--config", str(cfg), "--task", "lj5", "--steps", "5", "--out", str(tmp_path)]) == EXIT_OK
        ckpt = tmp_path / "checkpoints" / "best.json"
        assert ckpt.exists() and (tmp_path / "logs" / "train_log.tsv").exists()
        assert run(tmp_path, "eval", "--task", "lj5", "--optimizer", "learned", "--ckpt", str(ckpt),
                   "--inits", "1", "--steps", "5") == EXIT_OK

    def test_checkpoint_feature_mismatch(self, tmp_path):
        save_checkpoint(tmp_path / "c.json", init_params(FeatureConfig(hidden=(4,)), RngStream(0)),
                        FeatureConfig(hidden=(4,)))
        cfg = tmp_path / "run.json"
        cfg.write_text(json.dumps({"train": {"features": {"hidden": [8]}}}))
        assert main(["eval", "--config", str(cfg), "--task", "lj5", "--optimizer", "learned",
                     "--ckpt", str(tmp_path / "c.json"), "--out", str(tmp_path)]) == EXIT_USAGE

    def test_hull_smoke(self, tmp_path, capsys):
        assert run(tmp_path, "hull", "--task", "agau", "--optimizer", "gd", "--inits", "1", "--steps", "2") == EXIT_OK
        tsv = (tmp_path / "reports" / "hull_agau_gd_seed0.tsv").read_text().splitlines()
        assert len(tsv) == 40
        assert "hull compositions" in capsys.readouterr().out

    def test_check_forces(self, tmp_path, capsys):
        assert run(tmp_path, "check-forces", "--trials", "3") == EXIT_OK
        out = capsys.readouterr().out.splitlines()
        assert len(out) == 4 and all(line.startswith("PASS") for line in out)


class TestDeterminism:
    def _run(self, out, workers):
        env = dict(os.environ, NUMBA_NUM_THREADS="4")
        env.pop("ROUGHOPT_WORKERS", None)
        cmds = [
            ["normalize", "--task", "lj7", "--inits", "4", "--steps", "100"],
            ["tune", "--task", "lj7", "--inits", "3", "--steps", "50", "--outer-steps", "1"],
            ["eval", "--task", "lj7", "--inits", "3", "--steps", "60"],
            ["train", "--task", "lj7", "--strategy", "esmc", "--steps", "5", "--config", str(out / "t.json")],
        ]
        out.mkdir()
        (out / "t.json").write_text(json.dumps({"train": {"population": 4, "batch_target": 4, "total": 2,
                                                          "features": {"hidden": [4]}}}))
        for c in cmds:
            subprocess.run([sys.executable, "-m", "roughopt", *c, "--out", str(out), "--workers", str(workers)],
                           check=True, env=env, capture_output=True)
        (out / "t.json").unlink()
        return tree_bytes(out)

    def test_worker_count_does_not_matter(self, tmp_path):
        one = self._run(tmp_path / "w1", 1)
        four = self._run(tmp_path / "w4", 4)
        assert sorted(one) == sorted(four)
        for name in one:
            assert one[name] == four[name], name

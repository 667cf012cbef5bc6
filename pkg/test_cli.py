import json
import os
import tempfile
import unittest

import numpy as np
import yaml

from softdiff.config import ConfigError, ExperimentConfig, rng_for
from softdiff.datasets import make_dataset
from softdiff.main import main, parse_steps
from softdiff.scheduler import empirical_distance
from softdiff.storage import ArtifactStore, read_csv, read_tensor

TINY = {
    "seed": 3,
    "dataset": {"kind": "gmm", "dim": 2, "num_components": 3, "train_size": 512, "test_size": 256},
    "corruption": {"family": "fade", "fade_rates": [0.8, 1.0], "level_min": 0.01, "level_max": 4.0},
    "schedule": {"num_levels": 8, "num_candidates": 8, "target_length": 4, "sample_size": 256,
                 "num_projections": 16},
    "model": {"width": 8, "depth": 1, "num_frequencies": 2},
    "train": {"steps": 5, "batch_size": 16, "warmup_steps": 0, "log_every": 1},
    "sampler": {"num_steps": 4, "num_samples": 64},
    "eval": {"num_projections": 8, "repeats": 2, "num_points": 50},
}


class CliTestCase(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.out = os.path.join(self.tmp.name, "run")

    def tearDown(self):
        self.tmp.cleanup()

    def write_config(self, overrides=None, name="run.yaml"):
        config = json.loads(json.dumps(TINY))
        for section, values in (overrides or {}).items():
            if isinstance(values, dict):
                config.setdefault(section, {}).update(values)
            else:
                config[section] = values
        path = os.path.join(self.tmp.name, name)
        with open(path, "w") as f:
            yaml.safe_dump(config, f)
        return path

    def run_verb(self, verb, *extra, config=None, out=None):
        return main([verb, "--config", config or self.write_config(), "--out", out or self.out, *extra])


class TestScheduleVerb(CliTestCase):
    def test_auto_schedule_artifacts(self):
        config = self.write_config({"schedule": {"source": "auto"}})
        self.assertEqual(self.run_verb("schedule", config=config), 0)

        with open(os.path.join(self.out, "schedule.json")) as f:
            schedule = json.load(f)
        levels = [e["blur_std"] for e in schedule["entries"]]
        self.assertTrue(all(a <= b for a, b in zip(levels[:-1], levels[1:])))
        self.assertEqual(levels[-1], 4.0)
        self.assertIsNotNone(schedule["config_hash"])

        header, rows = read_csv(os.path.join(self.out, "distances.csv"))
        self.assertEqual(len(rows) + 1, 9)
        self.assertEqual(len(header), 9)

    def test_mse_matched_schedule(self):
        config = self.write_config({"schedule": {"source": "mse-matched"}})
        self.assertEqual(self.run_verb("schedule", config=config), 0)
        self.assertFalse(os.path.exists(os.path.join(self.out, "distances.csv")))


class TestReproducibility(CliTestCase):
    ARTIFACTS = ("schedule.json", "distances.csv", "mixture.json", "model.ckpt", "loss.csv", "samples.sdt",
                 "samples.json", "report.json", "nfe.csv")

    def test_every_verb_is_byte_reproducible(self):
        config = self.write_config({"schedule": {"source": "auto"}})
        other = os.path.join(self.tmp.name, "other")
        for out in (self.out, other):
            for verb, extra in (("schedule", ()), ("train", ()), ("sample", ()), ("eval", ()),
                                ("sweep-nfe", ("--steps", "2,4"))):
                self.assertEqual(self.run_verb(verb, *extra, config=config, out=out), 0, verb)
        for name in self.ARTIFACTS:
            with open(os.path.join(self.out, name), "rb") as a, open(os.path.join(other, name), "rb") as b:
                self.assertEqual(a.read(), b.read(), name)

    def test_mixture_artifact_matches_dataset(self):
        config = self.write_config()
        self.assertEqual(self.run_verb("schedule", config=config), 0)
        store = ArtifactStore(self.out, ExperimentConfig.from_file(config).config_hash())
        stored = store.load_mixture(store.path("mixture.json"))
        data = make_dataset(ExperimentConfig.from_file(config).dataset, rng_for(TINY["seed"], "data"))
        np.testing.assert_array_equal(stored.means, data.mixture.means)
        np.testing.assert_array_equal(stored.weights, data.mixture.weights)

    def test_no_mixture_for_blobs(self):
        config = self.write_config({
            "dataset": {"kind": "blobs", "image_size": 4, "train_size": 64, "test_size": 32},
            "corruption": {"family": "blur", "kernel_half_size": 2},
        })
        self.assertEqual(self.run_verb("schedule", config=config), 0)
        self.assertTrue(os.path.exists(os.path.join(self.out, "schedule.json")))
        self.assertFalse(os.path.exists(os.path.join(self.out, "mixture.json")))


class TestPipeline(CliTestCase):
    def test_train_sample_eval(self):
        config = self.write_config()
        self.assertEqual(self.run_verb("train", config=config), 0)
        header, rows = read_csv(os.path.join(self.out, "loss.csv"))
        self.assertEqual(header, ["step", "loss", "t_mean"])
        self.assertEqual(len(rows), 5)

        self.assertEqual(self.run_verb("sample", config=config), 0)
        samples = read_tensor(os.path.join(self.out, "samples.sdt"))
        self.assertEqual(samples.shape, (64, 2))
        self.assertTrue(np.all(np.isfinite(samples)))

        self.assertEqual(self.run_verb("eval", config=config), 0)
        with open(os.path.join(self.out, "report.json")) as f:
            report = json.load(f)
        self.assertEqual(report["nfe"], 4)
        self.assertEqual(len(report["score_errors"]), 3)
        self.assertNotIn("wall_clock_s", report)

    def test_eval_refuses_foreign_samples(self):
        self.assertEqual(self.run_verb("sample", config=self.write_config({"sampler": {"denoiser": "oracle"}})), 0)
        changed = self.write_config({"seed": 4, "sampler": {"denoiser": "oracle"}}, name="changed.yaml")
        self.assertEqual(self.run_verb("eval", config=changed), 2)

    def test_missing_checkpoint(self):
        self.assertEqual(self.run_verb("sample"), 2)

    def test_invalid_config(self):
        self.assertEqual(self.run_verb("train", config=self.write_config({"train": {"weighting": "snr"}})), 2)

    def test_mistyped_config_exits_2(self):
        for overrides in ({"seed": "abc"}, {"train": {"steps": "10"}},
                          {"dataset": {"kind": "blob_gmm", "num_components": 0, "image_size": 4},
                           "corruption": {"family": "blur"}, "sampler": {"denoiser": "oracle"}}):
            self.assertEqual(self.run_verb("train", config=self.write_config(overrides)), 2, overrides)

    def test_malformed_yaml_exits_2(self):
        path = os.path.join(self.tmp.name, "broken.yaml")
        with open(path, "w") as f:
            f.write("seed: [3\n")
        self.assertEqual(self.run_verb("schedule", config=path), 2)

    def test_missing_config_file(self):
        self.assertEqual(self.run_verb("train", config=os.path.join(self.tmp.name, "absent.yaml")), 2)


class TestSweep(CliTestCase):
    def test_oracle_nfe_sweep(self):
        config = self.write_config({
            "dataset": {"kind": "gaussian", "dim": 2, "test_size": 4096},
            "corruption": {"level_min": 0.0, "level_max": 5.0, "sigma_min": 0.01, "sigma_max": 1.0},
            "schedule": {"num_levels": 32},
            "sampler": {"denoiser": "oracle", "num_samples": 4096},
            "eval": {"num_projections": 64, "repeats": 5, "nfe_steps": [8, 16, 32, 64, 128]},
        })
        self.assertEqual(self.run_verb("sweep-nfe", config=config), 0)
        header, rows = read_csv(os.path.join(self.out, "nfe.csv"))
        self.assertEqual(header, ["nfe", "sliced_w2", "sliced_w2_std"])
        self.assertEqual([int(r[0]) for r in rows], [8, 16, 32, 64, 128])
        w2 = [float(r[1]) for r in rows]
        std = [float(r[2]) for r in rows]

        # distance between two halves of held-out data: what sampling alone contributes
        test = make_dataset(ExperimentConfig.from_file(config).dataset, rng_for(TINY["seed"], "data")).test
        floor = empirical_distance(test[:2048], test[2048:], 64, np.random.default_rng(0))
        for i in range(3):
            self.assertLessEqual(w2[i + 1], w2[i] + 3 * max(std[i], std[i + 1]) + floor,
                                 f"nfe {rows[i][0]} -> {rows[i + 1][0]}: {w2}")
        self.assertLessEqual(w2[3], w2[0] + 3 * max(std[0], std[3]))

    def test_steps_flag(self):
        config = self.write_config({"sampler": {"denoiser": "oracle"}})
        self.assertEqual(self.run_verb("sweep-nfe", "--steps", "2,4", config=config), 0)
        _, rows = read_csv(os.path.join(self.out, "nfe.csv"))
        self.assertEqual([int(r[0]) for r in rows], [2, 4])

    def test_parse_steps(self):
        self.assertEqual(parse_steps("8, 16,32"), [8, 16, 32])
        self.assertIsNone(parse_steps(None))
        with self.assertRaises(ConfigError):
            parse_steps("8,x")
        with self.assertRaises(ConfigError):
            parse_steps("0")


class TestVerify(CliTestCase):
    def test_verify_passes_and_is_reproducible(self):
        other = os.path.join(self.tmp.name, "other")
        self.assertEqual(self.run_verb("verify"), 0)
        self.assertEqual(self.run_verb("verify", out=other), 0)
        with open(os.path.join(self.out, "verify.json")) as f:
            result = json.load(f)
        self.assertTrue(result["passed"])
        self.assertEqual(set(result["suites"]),
                         {"score_constancy", "gradient_check", "ve_reduction", "oracle_sampler"})
        with open(os.path.join(self.out, "verify.json"), "rb") as a, open(os.path.join(other, "verify.json"), "rb") as b:
            self.assertEqual(a.read(), b.read())


if __name__ == "__main__":
    unittest.main()

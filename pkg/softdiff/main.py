"""softdiff - command-line entry point.

    python -m softdiff.main <verb> [--config PATH] [--seed N] [--out DIR]
                                   [--checkpoint PATH] [--samples PATH] [--steps 8,16,32]

Verbs: schedule | train | sample | eval | verify | sweep-nfe
"""

import argparse
import logging
import os
import sys
import time
from typing import Optional

import numpy as np

from softdiff import __version__
from softdiff.audit import AuditError, SampleAuditor
from softdiff.config import ConfigError, ExperimentConfig, rng_for
from softdiff.datasets import Dataset, DatasetError, make_dataset
from softdiff.model import (Architecture, CheckpointError, ModelError, OptimizerSettings, ScoreModel,
                            load_checkpoint, save_checkpoint)
from softdiff.objective import LossConfig, ObjectiveError, TrainingDiverged, train
from softdiff.operators import (BlurFamily, CorruptionProcess, FadeFamily, OperatorError, OperatorFamily,
                                Schedule, ScheduleError, default_schedule)
from softdiff.oracle import OracleError
from softdiff.sampler import (SamplerConfig, SamplerError, TerminalDistribution, model_denoiser,
                              momentum_sample, naive_sample, oracle_denoiser)
from softdiff.scheduler import build_candidate_grid, calibrate_epsilon, mse_matched_schedule, ve_reference
from softdiff.storage import ArtifactError, ArtifactStore
from softdiff.validator import Validator

LOG_FORMAT = "%(asctime)s [%(levelname)s] %(name)s: %(message)s"
VERBS = ("schedule", "train", "sample", "eval", "verify", "sweep-nfe")

logger = logging.getLogger("softdiff")

KNOWN_ERRORS = (ConfigError, DatasetError, OperatorError, ScheduleError, OracleError, ModelError,
                CheckpointError, ObjectiveError, TrainingDiverged, SamplerError, ArtifactError, AuditError)


def setup_logging(level: str = "INFO", log_dir: Optional[str] = None):
    logging.basicConfig(
        level=getattr(logging, level.upper(), logging.INFO),
        format=LOG_FORMAT,
        handlers=[logging.StreamHandler(sys.stdout)],
    )
    if not log_dir:
        return
    try:
        os.makedirs(log_dir, exist_ok=True)
        file_handler = logging.FileHandler(os.path.join(log_dir, "softdiff.log"))
    except OSError as e:
        logger.warning(f"File logging disabled: {e}")
        return
    file_handler.setFormatter(logging.Formatter(LOG_FORMAT))
    logging.getLogger().addHandler(file_handler)


class Experiment:
    """Owns one validated config and runs the commands against its output directory."""

    def __init__(self, config: ExperimentConfig):
        self.config = config.ensure_valid()
        self.seed = config.seed
        self.hash = config.config_hash()
        self.store = ArtifactStore(config.out_dir, self.hash)
        self._dataset: Optional[Dataset] = None

    # ── Shared pieces ──

    @property
    def dataset(self) -> Dataset:
        if self._dataset is None:
            self._dataset = make_dataset(self.config.dataset, rng_for(self.seed, "data"))
        return self._dataset

    def family(self) -> OperatorFamily:
        c = self.config.corruption
        if c.family == "blur":
            height, width = self.dataset.image_shape
            return BlurFamily(height, width, c.kernel_half_size)
        return FadeFamily(tuple(c.fade_rates))

    def build_schedule(self) -> tuple[Schedule, Optional[tuple[np.ndarray, np.ndarray]]]:
        """Schedule for the configured source, plus the distance matrix when one was measured."""
        c, s = self.config.corruption, self.config.schedule
        if s.source == "file":
            return self.store.load_schedule(s.path), None
        if s.source == "uniform":
            return default_schedule(c.level_min, c.level_max, c.sigma_min, c.sigma_max, c.denoise_end,
                                    s.num_levels, dataset=self.config.dataset.kind), None
        if s.source == "mse-matched":
            result = mse_matched_schedule(ve_reference(s.reference_sigma_min, s.reference_sigma_max),
                                          self.dataset.train, self.family(), c.level_min, c.level_max,
                                          c.sigma_max, c.sigma_min, num_points=s.num_levels,
                                          dataset=self.config.dataset.kind)
            return result.schedule, None

        thetas = np.linspace(c.level_min, c.level_max, s.num_candidates)
        grid = build_candidate_grid(self.dataset.train, self.family(), thetas, s.sample_size, s.num_projections,
                                    rng_for(self.seed, "schedule"), cloud_sigma=c.sigma_min,
                                    sigma_min=c.sigma_min, sigma_max=c.sigma_max, denoise_end=c.denoise_end,
                                    dataset=self.config.dataset.kind)
        result = calibrate_epsilon(grid, s.target_length)
        return result.schedule, (grid.thetas, grid.distances)

    def process(self) -> CorruptionProcess:
        """Corruption process from schedule.json when `schedule` already ran, else built fresh."""
        path = self.store.path("schedule.json")
        if self.config.schedule.source in ("auto", "mse-matched") and os.path.exists(path):
            schedule = self.store.load_schedule(path)
            self._warn_on_foreign(schedule.config_hash, path)
        else:
            schedule, _ = self.build_schedule()
        return CorruptionProcess(schedule, self.family())

    def load_model(self, checkpoint: Optional[str]) -> ScoreModel:
        path = checkpoint or self.store.path("model.ckpt")
        if not os.path.exists(path):
            raise CheckpointError(f"checkpoint not found: {path} (run `train` first)")
        model, header = load_checkpoint(path, expected_dim=self.dataset.dim)
        self._warn_on_foreign(header.get("config_hash"), path)
        return model

    def _warn_on_foreign(self, recorded: Optional[str], path: str):
        # sampler or eval edits change the hash without invalidating upstream artifacts
        if recorded != self.hash:
            logger.warning(f"{path} was produced by config {recorded}, current config is {self.hash}")

    def denoiser(self, proc: CorruptionProcess, checkpoint: Optional[str]):
        if self.config.sampler.denoiser == "oracle":
            if not self.dataset.has_oracle:
                raise OracleError(f"dataset {self.dataset.name} has no closed-form oracle")
            return oracle_denoiser(self.dataset.mixture, proc)
        return model_denoiser(self.load_model(checkpoint))

    def draw_samples(self, proc: CorruptionProcess, denoiser, num_steps: int, purpose: str) -> np.ndarray:
        sp = self.config.sampler
        cfg = SamplerConfig(num_steps=num_steps, normalization=sp.normalization, seed=self.seed)
        p1 = TerminalDistribution.from_data(self.dataset.train, proc)
        run = momentum_sample if sp.method == "momentum" else naive_sample
        return run(denoiser, proc, cfg, p1, sp.num_samples, rng_for(self.seed, purpose))

    # ── Commands ──

    def cmd_schedule(self) -> Schedule:
        schedule, measured = self.build_schedule()
        self.store.save_schedule(schedule)
        if measured is not None:
            self.store.write_distances(*measured)
        if self.dataset.has_oracle:
            self.store.save_mixture(self.dataset.mixture)
        logger.info(f"📋 Schedule with {len(schedule.entries)} entries, "
                    f"levels {schedule.levels[0]:.4g}..{schedule.levels[-1]:.4g}")
        return schedule

    def cmd_train(self) -> str:
        d, m, tr = self.dataset, self.config.model, self.config.train
        arch = Architecture(d.dim, m.width, m.depth, m.num_frequencies, m.freq_min, m.freq_max)
        model = ScoreModel.init(arch, rng_for(self.seed, "init"))
        settings = OptimizerSettings(tr.learning_rate, tr.beta1, tr.beta2, tr.adam_eps, tr.grad_clip,
                                     tr.warmup_steps, tr.steps if tr.lr_schedule == "cosine" else 0)
        logger.info(f"🏋️ Training {arch.num_params} parameters for {tr.steps} steps")
        result = train(model, d.train, self.process(), LossConfig(tr.weighting, tr.t_min), settings,
                       tr.steps, tr.batch_size, rng_for(self.seed, "train"), tr.log_every)
        path = self.store.path("model.ckpt")
        save_checkpoint(result.model, path, self.hash)
        self.store.write_csv("loss.csv", ["step", "loss", "t_mean"],
                             ((r.step, r.loss, r.t_mean) for r in result.trace))
        return path

    def cmd_sample(self, checkpoint: Optional[str] = None) -> str:
        sp = self.config.sampler
        proc = self.process()
        start = time.monotonic()
        samples = self.draw_samples(proc, self.denoiser(proc, checkpoint), sp.num_steps, "sample")
        logger.info(f"🎲 {sp.num_samples} samples in {time.monotonic() - start:.1f}s ({sp.num_steps} NFE)")
        metadata = {"method": sp.method, "normalization": sp.normalization, "denoiser": sp.denoiser,
                    "nfe": sp.num_steps}
        return self.store.write_samples(samples, metadata)

    def cmd_eval(self, samples_path: Optional[str] = None, checkpoint: Optional[str] = None):
        samples, meta = self.store.read_samples(samples_path or self.store.path("samples.sdt"))
        self.store.check_hash(meta.get("config_hash"), "samples")
        model = proc = None
        if meta.get("denoiser") == "model" and self.dataset.has_oracle:
            model, proc = self.load_model(checkpoint), self.process()
        auditor = SampleAuditor(self.config.eval, self.dataset.test, rng_for(self.seed, "eval"))
        report = auditor.analyze(samples, int(meta.get("nfe", 0)), model, proc, self.dataset.mixture)
        self.store.write_json("report.json", report.to_dict())
        print(auditor.generate_report(report))
        return report

    def cmd_verify(self) -> bool:
        results = Validator.run_all(self.seed, rng_for)
        passed = all(r["ok"] for r in results.values())
        self.store.write_json("verify.json", {"passed": passed, "suites": results})
        logger.info(f"{'✅ All suites passed' if passed else '❌ Verification failed'}")
        return passed

    def cmd_sweep_nfe(self, steps: list[int], checkpoint: Optional[str] = None) -> str:
        proc = self.process()
        denoiser = self.denoiser(proc, checkpoint)
        ev = self.config.eval
        rows = []
        for n in steps:
            samples = self.draw_samples(proc, denoiser, n, f"sweep.{n}")
            auditor = SampleAuditor(ev, self.dataset.test, rng_for(self.seed, f"sweep.eval.{n}"))
            report = auditor.analyze(samples, n)
            rows.append((n, report.sliced_w2, report.sliced_w2_std))
        return self.store.write_csv("nfe.csv", ["nfe", "sliced_w2", "sliced_w2_std"], rows)


def parse_steps(text: Optional[str]) -> Optional[list[int]]:
    if not text:
        return None
    try:
        steps = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise ConfigError([f"--steps: expected comma-separated integers, got {text!r}"]) from None
    if not steps or any(s < 1 for s in steps):
        raise ConfigError([f"--steps: step counts must be positive, got {text!r}"])
    return steps


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="softdiff", description="Diffusion under linear corruption.")
    parser.add_argument("verb", choices=VERBS)
    parser.add_argument("--config", help="experiment YAML file")
    parser.add_argument("--seed", type=int, help="root seed (overrides the config)")
    parser.add_argument("--out", help="output directory (overrides the config)")
    parser.add_argument("--checkpoint", help="model checkpoint (default: <out>/model.ckpt)")
    parser.add_argument("--samples", help="sample file for eval (default: <out>/samples.sdt)")
    parser.add_argument("--steps", help="comma-separated step counts for sweep-nfe")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    """Entry point. Returns 0 on success, 1 when verification fails, 2 on errors."""
    args = build_parser().parse_args(argv)
    setup_logging(os.environ.get("SOFTDIFF_LOG_LEVEL", "INFO"), os.environ.get("SOFTDIFF_LOG_DIR"))

    try:
        config = ExperimentConfig.from_env(args.config)
        if args.seed is not None:
            config.seed = args.seed
        if args.out:
            config.out_dir = args.out
        exp = Experiment(config)
        logger.info(f"softdiff {__version__}: {args.verb} (config {exp.hash}, out {config.out_dir})")

        if args.verb == "schedule":
            exp.cmd_schedule()
        elif args.verb == "train":
            exp.cmd_train()
        elif args.verb == "sample":
            exp.cmd_sample(args.checkpoint)
        elif args.verb == "eval":
            exp.cmd_eval(args.samples, args.checkpoint)
        elif args.verb == "verify":
            return 0 if exp.cmd_verify() else 1
        elif args.verb == "sweep-nfe":
            steps = parse_steps(args.steps) or config.eval.nfe_steps
            exp.cmd_sweep_nfe(steps, args.checkpoint)
    except KNOWN_ERRORS as e:
        logger.error(f"{type(e).__name__}: {e}")
        return 2
    except OSError as e:
        logger.error(f"I/O error: {e}")
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())

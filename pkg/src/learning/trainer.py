"""Three-stage SVAE training loop"""
import csv
import os
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np
import structlog

from ..config.settings import TrainConfig
from ..models.chain import BPMethod
from ..models.results import GradMode
from ..models.svae import StepReport
from ..tools import checkpoint, rng
from ..utils.exceptions import ConfigError, SvaeException
from ..utils.metrics import metrics
from ..utils.progress_logger import ProgressLogger
from .optimizer import Adam, NaturalGradientAscent
from .svae import SVAE, TrainState, train_step

logger = structlog.get_logger(__name__)

CSV_HEADER = ["step", "elbo", "prior_kl", "local_kl", "recon", "surrogate", "wall_ms"]

STAGES = {
    1: "per-step VAE with a standard normal prior",
    2: "natural-gradient fit of the global factors with frozen networks",
    3: "joint ELBO optimization",
}


@dataclass
class TrainingRun:
    """Final parameters and per-step reports"""
    params: Dict[str, np.ndarray]
    reports: List[StepReport] = field(default_factory=list)
    checkpoints: List[str] = field(default_factory=list)

    def stage_reports(self, stage: int) -> List[StepReport]:
        return [r for r in self.reports if r.stage == stage]

    def final_elbo(self, stage: int) -> float:
        reports = self.stage_reports(stage)
        return reports[-1].loss.elbo if reports else float("nan")


class Trainer:
    """Runs the staged schedule of a ``TrainConfig`` over a dataset of sequences"""

    def __init__(self, model: SVAE, config: TrainConfig, seed: int = 0, threads: int = 1,
                 checkpoint_dir: Optional[str] = None, metrics_path: Optional[str] = None):
        self.model = model
        self.config = config
        self.seed = seed
        self.threads = threads
        self.checkpoint_dir = checkpoint_dir
        self.metrics_path = metrics_path
        self.mode = GradMode.parse(config.grad_mode, config.richardson_iters, config.residual_tol)
        self.bp = BPMethod.parse(config.bp)
        self.progress = ProgressLogger(log_every=config.log_every)

    def _batch(self, step: int, n_data: int) -> np.ndarray:
        size = min(self.config.batch_size, n_data)
        return rng.stream(self.seed, "batch", step).choice(n_data, size=size, replace=False)

    def _noise(self, step: int, index: int, T: int) -> np.ndarray:
        return self.model.draw_noise(rng.stream(self.seed, "noise", step, index), T)

    def _checkpoint(self, params: Dict[str, np.ndarray], stage: int) -> Optional[str]:
        if self.checkpoint_dir is None:
            return None
        os.makedirs(self.checkpoint_dir, exist_ok=True)
        path = os.path.join(self.checkpoint_dir, f"stage{stage}.svae")
        checkpoint.save(path, params, self.model.config)
        return path

    def fit(self, data: np.ndarray, params: Optional[Dict[str, np.ndarray]] = None) -> TrainingRun:
        """Train on ``data`` of shape (N, T, Dx)"""
        data = np.asarray(data, dtype=float)
        if data.ndim != 3 or data.shape[0] < 1:
            raise ConfigError(f"training data must be (N, T, Dx) with N >= 1, got {data.shape}")
        if params is None:
            params = self.model.init_params(rng.stream(self.seed, "init"))
        cfg = self.config
        state = TrainState(params=params, adam=Adam(lr=cfg.adam_lr),
                           natgrad=NaturalGradientAscent(lr=cfg.nat_lr),
                           global_adam=Adam(lr=cfg.global_adam_lr) if cfg.global_optimizer == "adam" else None)
        run = TrainingRun(params=params)
        n_data = data.shape[0]

        writer_file = None
        writer = None
        if self.metrics_path is not None:
            writer_file = open(self.metrics_path, "w", newline="")
            writer = csv.writer(writer_file, lineterminator="\n")
            writer.writerow(CSV_HEADER)

        self.progress.start_run("fit", N=n_data, T=data.shape[1], steps=cfg.steps,
                                grad_mode=self.mode.kind.value, bp=self.bp.value)
        try:
            for stage, steps in zip((1, 2, 3), cfg.stage_steps()):
                self.progress.start_stage(f"stage{stage}", steps, STAGES[stage])
                for _ in range(steps):
                    report = self._step(state, data, stage, n_data)
                    wall_ms = 0.0 if cfg.deterministic else report.wall_ms
                    if writer is not None:
                        writer.writerow(report.csv_row(wall_ms))
                    run.reports.append(report)
                    self.progress.log_step(report.step, {"elbo": report.loss.elbo,
                                                         "surrogate": report.loss.surrogate})
                path = self._checkpoint(state.params, stage)
                if path is not None:
                    run.checkpoints.append(path)
                self.progress.complete_stage(elbo=run.final_elbo(stage), checkpoint=path)
        except SvaeException as exc:
            logger.error("training_failed", step=state.step, error=str(exc), exc_info=True)
            self.progress.log_error(str(exc), "aborting run")
            raise
        finally:
            if writer_file is not None:
                writer_file.close()

        run.params = state.params
        self.progress.complete_run({"steps": state.step, "final_elbo": run.final_elbo(3)})
        return run

    def _step(self, state: TrainState, data: np.ndarray, stage: int, n_data: int) -> StepReport:
        cfg = self.config
        step = state.step
        indices = self._batch(step, n_data)
        batch = [data[i] for i in indices]
        noise = [self._noise(step, int(i), data.shape[1]) for i in indices]
        start = time.perf_counter()
        report = train_step(
            self.model, state, batch, noise, self.mode, stage=stage,
            update_networks=stage != 2, update_globals=stage != 1,
            biased=cfg.biased_natgrad, bp=self.bp, parallelism=self.threads,
            max_iters=cfg.max_sweeps, tol=cfg.sweep_tol, n_data=n_data, workers=self.threads,
            natural=cfg.global_optimizer == "natural",
        )
        report.wall_ms = (time.perf_counter() - start) * 1000.0
        metrics.record(f"train.stage{stage}.step_ms", report.wall_ms)
        metrics.record(f"train.stage{stage}.elbo", report.loss.elbo)
        metrics.increment("train.steps")
        return report

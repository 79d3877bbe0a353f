"""Timing harness for gradient steps and inference"""
import csv
import os
import time
from dataclasses import astuple, dataclass, fields
from typing import List

import numpy as np
import structlog

from ..config.settings import ModelConfig, TrainConfig
from ..learning.optimizer import Adam, NaturalGradientAscent
from ..learning.svae import SVAE, TrainState, train_step
from ..models.chain import BPMethod
from ..models.results import GradMode
from ..utils.metrics import metrics
from . import rng

logger = structlog.get_logger(__name__)


@dataclass
class BenchRow:
    """One benchmark measurement"""
    T: int
    D: int
    K: int
    bp: str
    threads: int
    grad_mode: str
    ms_per_step: float
    peak_states: int


def run_bench(model_config: ModelConfig, train_config: TrainConfig, T: int, repeats: int = 3,
              threads: int = 1, seed: int = 0, inference_only: bool = False) -> BenchRow:
    """Average wall time of ``repeats`` steps on one random sequence of length ``T``"""
    model = SVAE(model_config)
    params = model.init_params(rng.stream(seed, "bench", "init"))
    x = rng.stream(seed, "bench", "data").standard_normal((T, model_config.obs_dim))
    bp = BPMethod.parse(train_config.bp)
    mode = GradMode.parse(train_config.grad_mode, train_config.richardson_iters, train_config.residual_tol)
    state = TrainState(params=params, adam=Adam(lr=train_config.adam_lr),
                       natgrad=NaturalGradientAscent(lr=train_config.nat_lr))

    metrics.reset()
    elapsed = []
    for r in range(repeats):
        start = time.perf_counter()
        if inference_only:
            model.infer(params, x, bp=bp, parallelism=threads, max_iters=train_config.max_sweeps,
                        tol=train_config.sweep_tol)
        else:
            noise = model.draw_noise(rng.stream(seed, "bench", "noise", r), T)
            train_step(model, state, [x], [noise], mode, stage=3, bp=bp, parallelism=threads,
                       max_iters=train_config.max_sweeps, tol=train_config.sweep_tol)
        elapsed.append((time.perf_counter() - start) * 1000.0)

    row = BenchRow(T=T, D=model_config.latent_dim, K=model_config.states, bp=bp.value, threads=threads,
                   grad_mode="none" if inference_only else mode.kind.value,
                   ms_per_step=float(np.mean(elapsed)),
                   peak_states=int(metrics.get_peak("gradients.stored_states")))
    logger.info("bench_row", **row.__dict__)
    return row


def append_rows(path: str, rows: List[BenchRow]):
    """Append rows, writing the header when the file is new"""
    new_file = not os.path.exists(path) or os.path.getsize(path) == 0
    with open(path, "a", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        if new_file:
            writer.writerow([f.name for f in fields(BenchRow)])
        for row in rows:
            writer.writerow(astuple(row))

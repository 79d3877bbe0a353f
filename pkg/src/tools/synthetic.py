"""Synthetic datasets: Laplace bumps on a grid and ground-truth LDS/SLDS samples"""
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
import structlog

from ..config.settings import SynthConfig
from ..utils.exceptions import ConfigError, NotSPD
from . import rng as rng_streams
from .sequence_file import SequenceData

logger = structlog.get_logger(__name__)

REGIMES = ("mean+", "mean-", "var+", "var-")
LOC_RANGE = (0.2, 0.8)


def laplace_frame(grid_size: int, loc: float, scale: float) -> np.ndarray:
    """Laplace density on {0, .., G-1}/G rescaled to sum to G"""
    grid = np.arange(grid_size) / grid_size
    density = np.exp(-np.abs(grid - loc) / scale) / (2.0 * scale)
    return density * (grid_size / density.sum())


def _evolve(regime: str, loc: float, scale: float, cfg: SynthConfig) -> Tuple[float, float]:
    if regime == "mean+":
        loc += cfg.drift_step
    elif regime == "mean-":
        loc -= cfg.drift_step
    elif regime == "var+":
        scale += cfg.scale_step
    else:
        scale -= cfg.scale_step
    return float(np.clip(loc, *LOC_RANGE)), float(np.clip(scale, cfg.scale_min, cfg.scale_max))


def _laplace_sequence(cfg: SynthConfig, index: int) -> Tuple[np.ndarray, np.ndarray]:
    gen = rng_streams.stream(cfg.seed, "laplace", index)
    loc = float(np.clip(cfg.loc_init + gen.uniform(-0.1, 0.1), *LOC_RANGE))
    scale = cfg.scale_init
    frames = np.zeros((cfg.T, cfg.grid_size))
    labels = np.zeros(cfg.T, dtype=np.uint8)
    regime = cfg.regimes[gen.integers(len(cfg.regimes))]
    for t in range(cfg.T):
        if t > 0:
            if t % cfg.period == 0:
                regime = cfg.regimes[gen.integers(len(cfg.regimes))]
            loc, scale = _evolve(regime, loc, scale, cfg)
        frames[t] = laplace_frame(cfg.grid_size, loc, scale)
        labels[t] = REGIMES.index(regime)
    noise = gen.standard_normal(frames.shape)
    return frames + cfg.noise * noise, labels


def gen_laplace_sequences(cfg: SynthConfig, workers: int = 1) -> SequenceData:
    """Bump sequences whose location or width drifts under a regime switched every period.

    Each sequence draws from its own stream, so results do not depend on ``workers``.
    """
    if cfg.scale_min > cfg.scale_max:
        raise ConfigError("scale_min must not exceed scale_max")
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outputs = list(pool.map(lambda n: _laplace_sequence(cfg, n), range(cfg.n_sequences)))
    else:
        outputs = [_laplace_sequence(cfg, n) for n in range(cfg.n_sequences)]
    x = np.stack([o[0] for o in outputs])
    labels = np.stack([o[1] for o in outputs])
    logger.info("laplace_sequences_generated", N=cfg.n_sequences, T=cfg.T, G=cfg.grid_size,
                period=cfg.period, noise=cfg.noise)
    return SequenceData(x=x, labels=labels)


@dataclass
class GroundTruth:
    """Latent path, observations and (for switching models) the discrete path"""
    z: np.ndarray
    x: np.ndarray
    k: Optional[np.ndarray] = None
    spectral_radius: float = 0.0


def _chol(matrix: np.ndarray, where: str, index: Optional[int] = None) -> np.ndarray:
    try:
        return np.linalg.cholesky(np.asarray(matrix, dtype=float))
    except np.linalg.LinAlgError:
        raise NotSPD(where, index) from None


def _observe(z: np.ndarray, C: Optional[np.ndarray], d: Optional[np.ndarray], R: Optional[np.ndarray],
             gen: np.random.Generator) -> np.ndarray:
    if C is None:
        return z.copy()
    x = z @ np.asarray(C, dtype=float).T
    if d is not None:
        x = x + d
    if R is not None:
        x = x + gen.standard_normal(x.shape) @ _chol(R, "observation").T
    return x


def gen_lds_ground_truth(A: np.ndarray, b: np.ndarray, Q: np.ndarray, mu0: np.ndarray,
                         Sigma0: np.ndarray, T: int, seed: int,
                         C: Optional[np.ndarray] = None, d: Optional[np.ndarray] = None,
                         R: Optional[np.ndarray] = None) -> GroundTruth:
    """Ancestral sample z_1 ~ N(mu0, Sigma0), z_t ~ N(A z_{t-1} + b, Q); x = C z + d + noise or z"""
    A, b, mu0 = (np.asarray(a, dtype=float) for a in (A, b, mu0))
    L0 = _chol(Sigma0, "initial covariance")
    LQ = _chol(Q, "transition covariance")
    radius = float(np.max(np.abs(np.linalg.eigvals(A)))) if A.size else 0.0
    if radius >= 1.0:
        logger.warning("lds_not_stable", spectral_radius=radius)
    gen = rng_streams.stream(seed, "lds")
    D = mu0.shape[0]
    noise = gen.standard_normal((T, D))
    z = np.zeros((T, D))
    z[0] = mu0 + L0 @ noise[0]
    for t in range(1, T):
        z[t] = A @ z[t - 1] + b + LQ @ noise[t]
    return GroundTruth(z=z, x=_observe(z, C, d, R, gen), spectral_radius=radius)


def gen_slds_ground_truth(As: Sequence[np.ndarray], bs: Sequence[np.ndarray], Qs: Sequence[np.ndarray],
                          mu0: np.ndarray, Sigma0: np.ndarray, pi0: np.ndarray, Pi: np.ndarray,
                          T: int, seed: int, C: Optional[np.ndarray] = None,
                          d: Optional[np.ndarray] = None, R: Optional[np.ndarray] = None) -> GroundTruth:
    """Switching sample: k_2 ~ pi0, k_t ~ Pi[k_{t-1}], z_t ~ N(A_k z_{t-1} + b_k, Q_k).

    ``k[t]`` (t = 0..T-2) is the state of the transition into step t + 1.
    """
    K = len(As)
    pi0, Pi = np.asarray(pi0, dtype=float), np.asarray(Pi, dtype=float)
    if pi0.shape != (K,) or Pi.shape != (K, K) or len(bs) != K or len(Qs) != K:
        raise ConfigError(f"switching parameters inconsistent with K={K}")
    chols = [_chol(Q, "transition covariance", k) for k, Q in enumerate(Qs)]
    L0 = _chol(Sigma0, "initial covariance")
    radius = max(float(np.max(np.abs(np.linalg.eigvals(np.asarray(A, dtype=float))))) for A in As)
    gen = rng_streams.stream(seed, "slds")
    mu0 = np.asarray(mu0, dtype=float)
    D = mu0.shape[0]
    z = np.zeros((T, D))
    k = np.zeros(max(T - 1, 0), dtype=int)
    z[0] = mu0 + L0 @ gen.standard_normal(D)
    for t in range(1, T):
        probs = pi0 if t == 1 else Pi[k[t - 2]]
        k[t - 1] = gen.choice(K, p=probs / probs.sum())
        s = k[t - 1]
        z[t] = np.asarray(As[s]) @ z[t - 1] + np.asarray(bs[s]) + chols[s] @ gen.standard_normal(D)
    return GroundTruth(z=z, x=_observe(z, C, d, R, gen), k=k, spectral_radius=radius)

"""SVAE outputs and training records"""
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

import numpy as np

from .meanfield import MeanFieldState
from .results import LossBreakdown


@dataclass
class RecognitionOutput:
    """Per-step Gaussian potentials exp(r_t'z - 1/2 z'diag(R_t)z) from the encoder"""
    r: Any
    R_diag: Any

    @property
    def T(self) -> int:
        return self.r.shape[0]

    @property
    def R(self) -> Any:
        from ..autodiff import ops
        return ops.diag_embed(self.R_diag)

    def astuple(self) -> tuple:
        return (self.r, self.R)


@dataclass
class ImputeResult:
    """Posterior means of the latent chain and decoded reconstructions"""
    latent_mean: np.ndarray
    reconstruction: np.ndarray
    samples: np.ndarray
    masked_steps: List[int]
    state: MeanFieldState
    discrete_path: Optional[np.ndarray] = None

    def to_dict(self) -> Dict[str, Any]:
        """Convert to dictionary representation"""
        return {
            'T': int(self.latent_mean.shape[0]),
            'masked_steps': list(self.masked_steps),
            'n_samples': int(self.samples.shape[0]),
            'sweeps': self.state.iters,
        }


@dataclass
class StepReport:
    """Batch-averaged loss parts and estimator diagnostics of one training step"""
    step: int
    stage: int
    loss: LossBreakdown
    richardson_iters: int = 0
    stored_states: int = 0
    residual: float = 0.0
    fell_back: int = 0
    sweeps: List[int] = field(default_factory=list)
    wall_ms: float = 0.0

    def csv_row(self, wall_ms: float) -> List[Any]:
        """Row of the metrics file: step, elbo, prior_kl, local_kl, recon, surrogate, wall_ms"""
        return [self.step, repr(self.loss.elbo), repr(self.loss.prior_kl), repr(self.loss.local_kl),
                repr(self.loss.reconstruction), repr(self.loss.surrogate), repr(float(wall_ms))]

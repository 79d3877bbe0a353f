"""Loss, gradient-mode and check result models"""
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, Optional

from ..utils.exceptions import ConfigError


@dataclass
class LossBreakdown:
    """ELBO decomposition for one sequence (or a batch average)"""
    prior_kl: float
    local_kl_continuous: float
    local_kl_discrete: float
    reconstruction: float
    elbo: float
    surrogate: float

    @property
    def local_kl(self) -> float:
        return self.local_kl_continuous + self.local_kl_discrete

    def to_dict(self) -> Dict[str, float]:
        """Convert to dictionary representation"""
        return {
            'elbo': self.elbo,
            'prior_kl': self.prior_kl,
            'local_kl': self.local_kl,
            'local_kl_continuous': self.local_kl_continuous,
            'local_kl_discrete': self.local_kl_discrete,
            'recon': self.reconstruction,
            'surrogate': self.surrogate,
        }


class LikelihoodKind(str, Enum):
    """Observation model of the decoder"""
    GAUSSIAN = "gaussian"
    GAMMA = "gamma"


class GradModeKind(str, Enum):
    """Gradient estimator for the inner mean-field optimization"""
    UNROLLED = "unrolled"
    IMPLICIT = "implicit"
    CAPPED = "capped"
    THRESHOLDED = "thresholded"
    NO_SOLVE = "no-solve"


@dataclass(frozen=True)
class GradMode:
    """Estimator kind with its Richardson budget J and residual tolerance"""
    kind: GradModeKind
    J: int = 50
    residual_tol: float = 1e-6

    def __post_init__(self):
        if self.J < 0:
            raise ConfigError(f"Richardson iterations must be >= 0, got {self.J}")
        if self.residual_tol <= 0:
            raise ConfigError(f"residual tolerance must be > 0, got {self.residual_tol}")

    @classmethod
    def parse(cls, name: str, J: int = 50, residual_tol: float = 1e-6) -> "GradMode":
        try:
            kind = GradModeKind(name)
        except ValueError:
            valid = ", ".join(k.value for k in GradModeKind)
            raise ConfigError(f"unknown grad mode {name!r} (expected one of: {valid})") from None
        return cls(kind, J, residual_tol)

    def richardson_budget(self, forward_iters: int) -> int:
        """Richardson iterations for a forward solve of ``forward_iters`` sweeps"""
        if self.kind == GradModeKind.NO_SOLVE:
            return 0
        if self.kind in (GradModeKind.CAPPED, GradModeKind.THRESHOLDED):
            return forward_iters
        return self.J


@dataclass
class GradientResult:
    """Loss value, parameter gradients and estimator diagnostics"""
    loss: float
    grads: Dict[str, Any]
    mode: GradMode
    richardson_iters: int = 0
    stored_states: int = 0
    residual: float = 0.0
    fell_back: bool = False
    partial: Dict[str, Any] = field(default_factory=dict)


@dataclass
class CheckResult:
    """Outcome of one invariant check"""
    suite: str
    name: str
    passed: bool
    max_error: float
    tolerance: float
    detail: Optional[str] = None

    def to_dict(self) -> Dict[str, Any]:
        """Convert to dictionary representation"""
        return {
            'suite': self.suite,
            'name': self.name,
            'passed': self.passed,
            'max_error': self.max_error,
            'tolerance': self.tolerance,
            'detail': self.detail or '',
        }

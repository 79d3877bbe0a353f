"""Structured mean-field state"""
from dataclasses import dataclass, field
from typing import Any, List, Optional

from .chain import ChainPotentials, FilterResult, SmoothResult
from .hmm import HmmMarginals, HmmPotentials


@dataclass
class GlobalExpectedStats:
    """Expected global parameters in chain form.

    Per-state transition blocks are stacked on a leading K axis; ``logZ_trans[k]`` is the
    expected log normalizer of state k's transition and ``logZ_init`` that of the initial factor.
    """
    h0: Any
    J0: Any
    logZ_init: Any
    h1: Any
    J11: Any
    J12: Any
    J22: Any
    h2: Any
    logZ_trans: Any
    log_pi0: Any
    log_pi: Any

    @property
    def K(self) -> int:
        return self.J11.shape[0]

    @property
    def D(self) -> int:
        return self.J11.shape[1]


@dataclass
class MeanFieldState:
    """Current block parameters, their expected statistics and the sweep trace"""
    omega_z: ChainPotentials
    omega_k: Optional[HmmPotentials]
    mu_z: SmoothResult
    mu_k: Optional[HmmMarginals]
    filtered: FilterResult
    trace: List[float] = field(default_factory=list)
    residuals: List[float] = field(default_factory=list)
    converged: bool = False
    iters: int = 0

    @property
    def q_k(self) -> Any:
        return None if self.mu_k is None else self.mu_k.marginal

    @property
    def surrogate(self) -> float:
        return self.trace[-1] if self.trace else float("nan")

    @property
    def residual(self) -> float:
        return self.residuals[-1] if self.residuals else float("nan")

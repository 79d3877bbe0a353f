"""Discrete chain potentials and marginals"""
from dataclasses import dataclass
from typing import Any

from ..utils.exceptions import DimMismatch


@dataclass
class HmmPotentials:
    """Expected log initial/transition probabilities and per-step state potentials"""
    log_pi0: Any
    log_pi: Any
    obs: Any

    def __post_init__(self):
        K = self.log_pi0.shape[0]
        if self.log_pi.shape != (K, K) or self.obs.ndim != 2 or self.obs.shape[1] != K:
            raise DimMismatch(f"hmm potentials inconsistent with K={K}")
        if self.obs.shape[0] < 1:
            raise DimMismatch("hmm chain length must be at least 1")

    @property
    def K(self) -> int:
        return self.log_pi0.shape[0]

    @property
    def Tk(self) -> int:
        return self.obs.shape[0]


@dataclass
class HmmMarginals:
    """Per-step state marginals (log and normalized) and the chain log partition"""
    log_marginal: Any
    marginal: Any
    logZ: Any

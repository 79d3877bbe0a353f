"""Gaussian chain potentials, messages and scan elements"""
from dataclasses import dataclass, fields, replace
from enum import Enum
from typing import Any

import numpy as np

from ..utils.exceptions import ConfigError, DimMismatch


class BPMethod(str, Enum):
    """Belief propagation schedule for the Gaussian chain"""
    SEQUENTIAL = "sequential"
    PARALLEL = "parallel"

    @classmethod
    def parse(cls, name: str) -> "BPMethod":
        try:
            return cls(name)
        except ValueError:
            raise ConfigError(f"unknown bp method '{name}' (expected sequential or parallel)") from None


@dataclass
class ChainPotentials:
    """Information-form factors of a Gaussian chain.

    Transition arrays are indexed 0..T-2 for the factors linking z_{t-1} to z_t, t = 2..T.
    Each transition factor is
    exp(-1/2 a'J11 a - h1'a + a'J12 b - 1/2 b'J22 b + h2'b) with a = z_{t-1}, b = z_t;
    each recognition factor is exp(-1/2 z'R z + r'z).
    """
    h0: Any
    J0: Any
    h1: Any
    J11: Any
    J12: Any
    J22: Any
    h2: Any
    r: Any
    R: Any

    def __post_init__(self):
        T, D = self.r.shape[0], self.r.shape[1]
        if T < 1:
            raise DimMismatch("chain length must be at least 1")
        if self.h1.shape[0] != T - 1 or self.J11.shape[0] != T - 1:
            raise DimMismatch(f"expected {T - 1} transition factors, got {self.h1.shape[0]}")
        if self.J0.shape != (D, D) or self.R.shape != (T, D, D):
            raise DimMismatch("initial or recognition blocks do not match latent dimension")

    @property
    def T(self) -> int:
        return self.r.shape[0]

    @property
    def D(self) -> int:
        return self.r.shape[1]

    def with_recognition(self, r: Any, R: Any) -> "ChainPotentials":
        return replace(self, r=r, R=R)

    def numpy(self) -> "ChainPotentials":
        """Copy with every block detached to a numpy array"""
        from ..autodiff.ops import value
        return ChainPotentials(**{f.name: np.asarray(value(getattr(self, f.name)))
                                  for f in fields(self)})


@dataclass
class FilterResult:
    """Filtered (f, F), predicted (fp, Fp, index 0..T-2 for t = 2..T) and logZ"""
    f: Any
    F: Any
    fp: Any
    Fp: Any
    P: Any
    logZ: Any


@dataclass
class SmoothResult:
    """Smoothed natural parameters and expected statistics of the chain"""
    fs: Any
    Fs: Any
    C: Any
    Ez: Any
    Ezz: Any
    Ezz_next: Any

    @property
    def T(self) -> int:
        return self.Ez.shape[0]

    @property
    def cov(self) -> Any:
        from ..autodiff import ops
        return self.Ezz - ops.outer(self.Ez, self.Ez)


@dataclass
class FilterElement:
    """Stacked filter scan elements: f-part (Phi11, phi1, Phi12, phi2, Phi22) and g-part (Gamma, gamma)"""
    Phi11: Any
    phi1: Any
    Phi12: Any
    phi2: Any
    Phi22: Any
    Gamma: Any
    gamma: Any

    def astuple(self) -> tuple:
        return (self.Phi11, self.phi1, self.Phi12, self.phi2, self.Phi22, self.Gamma, self.gamma)


@dataclass
class SmootherElement:
    """Stacked smoother scan elements (E11, eps1, E12, eps2, E22)"""
    E11: Any
    eps1: Any
    E12: Any
    eps2: Any
    E22: Any

    def astuple(self) -> tuple:
        return (self.E11, self.eps1, self.E12, self.eps2, self.E22)

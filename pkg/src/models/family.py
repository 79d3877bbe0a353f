"""Exponential-family descriptors and parameter containers"""
from dataclasses import dataclass
from enum import Enum
from typing import Any, Dict, List, Tuple

from ..utils.exceptions import DimMismatch


class FamilyKind(str, Enum):
    """Supported exponential families"""
    MVN = "mvn"
    NIW = "niw"
    MNIW = "mniw"
    DIRICHLET = "dirichlet"
    CATEGORICAL = "categorical"


@dataclass(frozen=True)
class FamilyDescriptor:
    """Family kind with its dimensions (n; m for MNIW; n is K for discrete families)"""
    kind: FamilyKind
    n: int
    m: int = 0

    def __post_init__(self):
        if self.n < 1:
            raise DimMismatch(f"{self.kind.value} requires n >= 1, got {self.n}")
        if self.kind == FamilyKind.MNIW and self.m < 1:
            raise DimMismatch(f"mniw requires m >= 1, got {self.m}")

    @classmethod
    def mvn(cls, n: int) -> "FamilyDescriptor":
        return cls(FamilyKind.MVN, n)

    @classmethod
    def niw(cls, n: int) -> "FamilyDescriptor":
        return cls(FamilyKind.NIW, n)

    @classmethod
    def mniw(cls, n: int, m: int) -> "FamilyDescriptor":
        return cls(FamilyKind.MNIW, n, m)

    @classmethod
    def dirichlet(cls, k: int) -> "FamilyDescriptor":
        return cls(FamilyKind.DIRICHLET, k)

    @classmethod
    def categorical(cls, k: int) -> "FamilyDescriptor":
        return cls(FamilyKind.CATEGORICAL, k)

    @property
    def layout(self) -> List[Tuple[str, Tuple[int, ...]]]:
        """Block names and shapes in packing order (matrices row-major)"""
        n, m = self.n, self.m
        if self.kind == FamilyKind.MVN:
            return [("h", (n,)), ("neg_half_precision", (n, n))]
        if self.kind == FamilyKind.NIW:
            return [("S_plus", (n, n)), ("lam_m", (n,)), ("lam", ()), ("dof", ())]
        if self.kind == FamilyKind.MNIW:
            return [("S_plus", (n, n)), ("MV", (n, m)), ("V", (m, m)), ("dof", ())]
        if self.kind == FamilyKind.DIRICHLET:
            return [("alpha", (n,))]
        return [("logits", (n,))]

    @property
    def size(self) -> int:
        total = 0
        for _, shape in self.layout:
            count = 1
            for s in shape:
                count *= s
            total += count
        return total

    def to_dict(self) -> Dict[str, Any]:
        """Convert to dictionary representation"""
        return {'kind': self.kind.value, 'n': self.n, 'm': self.m}


@dataclass
class NaturalParams:
    """Flat natural-parameter vector of one family member"""
    family: FamilyDescriptor
    data: Any

    def __post_init__(self):
        length = self.data.shape[0] if hasattr(self.data, "shape") else len(self.data)
        if length != self.family.size:
            raise DimMismatch(
                f"{self.family.kind.value} expects {self.family.size} natural parameters, got {length}")


@dataclass
class MeanParams:
    """Flat expected sufficient statistics, packed like the natural parameters"""
    family: FamilyDescriptor
    data: Any

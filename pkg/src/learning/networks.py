"""Dense per-step networks"""
import math
from dataclasses import dataclass
from enum import Enum
from typing import Any, Dict, List, Sequence

import numpy as np

from ..autodiff import ops
from ..utils.exceptions import ShapeMismatch

LAYER_NORM_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)


class Activation(str, Enum):
    GELU = "gelu"
    TANH = "tanh"
    IDENTITY = "identity"


def gelu(x: Any) -> Any:
    """tanh approximation of the Gaussian error linear unit"""
    return 0.5 * x * (1.0 + ops.tanh(_GELU_C * (x + 0.044715 * x * x * x)))


def layer_norm(x: Any) -> Any:
    """Normalize the last axis to zero mean and unit variance"""
    centered = x - ops.mean(x, axis=-1, keepdims=True)
    var = ops.mean(centered * centered, axis=-1, keepdims=True)
    return centered / ops.sqrt(var + LAYER_NORM_EPS)


def activate(kind: Activation, x: Any) -> Any:
    if kind == Activation.GELU:
        return gelu(x)
    if kind == Activation.TANH:
        return ops.tanh(x)
    return x


@dataclass(frozen=True)
class DenseLayer:
    in_dim: int
    out_dim: int
    activation: Activation = Activation.GELU
    layer_norm: bool = False


class DenseNet:
    """Stack of affine layers applied independently to every row of the input.

    Parameters live in a flat dict under ``{prefix}.{i}.W`` (in x out) and ``{prefix}.{i}.b``.
    """

    def __init__(self, prefix: str, sizes: Sequence[int], hidden_activation: Activation = Activation.GELU,
                 output_activation: Activation = Activation.IDENTITY, layer_norm: bool = False):
        if len(sizes) < 2 or any(s < 1 for s in sizes):
            raise ShapeMismatch(f"network sizes must be >= 1 with at least two entries, got {list(sizes)}")
        self.prefix = prefix
        n = len(sizes) - 1
        self.layers: List[DenseLayer] = [
            DenseLayer(sizes[i], sizes[i + 1],
                       output_activation if i == n - 1 else hidden_activation,
                       layer_norm and i < n - 1)
            for i in range(n)
        ]

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    def param_names(self) -> List[str]:
        names = []
        for i in range(len(self.layers)):
            names += [f"{self.prefix}.{i}.W", f"{self.prefix}.{i}.b"]
        return names

    def init_params(self, rng: np.random.Generator, scale: float = 1.0) -> Dict[str, np.ndarray]:
        """Glorot-scaled weights and zero biases"""
        params = {}
        for i, layer in enumerate(self.layers):
            std = scale * math.sqrt(2.0 / (layer.in_dim + layer.out_dim))
            params[f"{self.prefix}.{i}.W"] = std * rng.standard_normal((layer.in_dim, layer.out_dim))
            params[f"{self.prefix}.{i}.b"] = np.zeros(layer.out_dim)
        return params

    def apply(self, params: Dict[str, Any], x: Any) -> Any:
        """(T, in_dim) -> (T, out_dim)"""
        if ops.shape(x)[-1] != self.in_dim:
            raise ShapeMismatch(f"{self.prefix} expects {self.in_dim} features, got {ops.shape(x)[-1]}")
        h = x
        for i, layer in enumerate(self.layers):
            h = ops.matmul(h, params[f"{self.prefix}.{i}.W"]) + params[f"{self.prefix}.{i}.b"]
            if layer.layer_norm:
                h = layer_norm(h)
            h = activate(layer.activation, h)
        return h

"""Optimizers for network weights and global parameters"""
from dataclasses import dataclass, field
from typing import Dict

import numpy as np

from ..utils.exceptions import NonFinite

BETA1 = 0.9
BETA2 = 0.999
EPS_ADAM = 1e-8


@dataclass
class Adam:
    """Bias-corrected Adam descent on a named parameter dict"""
    lr: float = 1e-3
    beta1: float = BETA1
    beta2: float = BETA2
    eps: float = EPS_ADAM
    step_count: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    def step(self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray]) -> Dict[str, np.ndarray]:
        """Return updated copies of the parameters named in ``grads``; others pass through"""
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NonFinite(f"gradient of {name} is not finite", iteration=self.step_count)
        self.step_count += 1
        updated = dict(params)
        if self.lr == 0.0:
            return updated
        t = self.step_count
        for name, g in grads.items():
            m = self.beta1 * self.m.get(name, np.zeros_like(g)) + (1 - self.beta1) * g
            v = self.beta2 * self.v.get(name, np.zeros_like(g)) + (1 - self.beta2) * g * g
            self.m[name], self.v[name] = m, v
            m_hat = m / (1 - self.beta1 ** t)
            v_hat = v / (1 - self.beta2 ** t)
            updated[name] = params[name] - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return updated


@dataclass
class NaturalGradientAscent:
    """theta <- theta + lr * direction for natural-gradient directions"""
    lr: float = 1.0
    step_count: int = 0

    def step(self, params: Dict[str, np.ndarray], directions: Dict[str, np.ndarray]) -> Dict[str, np.ndarray]:
        for name, d in directions.items():
            if not np.all(np.isfinite(d)):
                raise NonFinite(f"natural gradient of {name} is not finite", iteration=self.step_count)
        self.step_count += 1
        updated = dict(params)
        if self.lr == 0.0:
            return updated
        for name, d in directions.items():
            updated[name] = params[name] + self.lr * d
        return updated

"""Tape-based automatic differentiation"""
from .tape import Primitive, Tape, Tensor, jvp, value_and_grad, vjp

__all__ = ["Primitive", "Tape", "Tensor", "jvp", "value_and_grad", "vjp"]

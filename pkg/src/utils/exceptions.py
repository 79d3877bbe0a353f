"""Custom exceptions for the structured inference engine"""
from typing import Optional


class SvaeException(Exception):
    """Base exception for inference and training errors"""
    pass


class NotSPD(SvaeException):
    """Raised when a matrix expected to be symmetric positive definite fails Cholesky"""
    def __init__(self, where: str, index: Optional[int] = None):
        self.where = where
        self.index = index
        location = f"{where}[{index}]" if index is not None else where
        super().__init__(f"matrix is not positive definite at {location}")


class DomainError(SvaeException):
    """Raised when a parameter lies outside its family's domain"""
    pass


class BoundaryError(SvaeException):
    """Raised when a constrained value is on or outside the constraint boundary"""
    pass


class FamilyMismatch(SvaeException):
    """Raised when two parameter vectors belong to different families"""
    pass


class DimMismatch(SvaeException):
    """Raised when block dimensions are inconsistent"""
    pass


class DegenerateDistribution(SvaeException):
    """Raised when a discrete distribution has no support"""
    pass


class ShapeMismatch(SvaeException):
    """Raised when array shapes do not match an operation's contract"""
    pass


class NonFinite(SvaeException):
    """Raised when an iterate or gradient becomes non-finite"""
    def __init__(self, message: str, iteration: Optional[int] = None):
        self.iteration = iteration
        suffix = f" (iteration {iteration})" if iteration is not None else ""
        super().__init__(f"{message}{suffix}")


class RichardsonDivergence(NonFinite):
    """Raised when Richardson iterates grow past the divergence guard"""
    pass


class CapacityError(SvaeException):
    """Raised when a gradient computation would exceed the stored-state budget"""
    pass


class ConfigError(SvaeException):
    """Raised when run configuration is invalid"""
    pass


class ParseError(ConfigError):
    """Raised when a config file cannot be parsed"""
    def __init__(self, message: str, line: int, offset: int = 0):
        self.line = line
        self.offset = offset
        super().__init__(f"line {line}, offset {offset}: {message}")


class MagicMismatch(SvaeException):
    """Raised when a binary file does not start with the expected magic bytes"""
    pass


class LengthError(SvaeException):
    """Raised when a binary file is truncated or has trailing bytes"""
    pass

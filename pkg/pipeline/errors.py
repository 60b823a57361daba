"""Exception hierarchy shared by the pipeline modules."""

from typing import Optional

import numpy as np


class SparseMetaError(Exception):
    """Base class for every error raised by the pipeline."""


class DomainError(SparseMetaError, ValueError):
    """An argument lies outside the domain of the operation."""


class ConsistencyError(SparseMetaError, ValueError):
    """Inputs disagree with each other (unknown ids, mismatched shapes)."""


class InfeasibleError(SparseMetaError, ValueError):
    """No model dimension fits within the available estimates."""


class NumericalError(SparseMetaError, ArithmeticError):
    """A factorization or evaluation failed numerically."""


class SamplerAbort(NumericalError):
    """The sampler could not continue; carries the offending state."""

    def __init__(self, message: str, state: Optional[np.ndarray] = None, chain: Optional[int] = None):
        super().__init__(message)
        self.state = None if state is None else np.array(state, copy=True)
        self.chain = chain

    def state_dump(self) -> dict:
        return {
            "chain": self.chain,
            "state": None if self.state is None else self.state.tolist(),
            "message": str(self),
        }


class DatasetParseError(ConsistencyError):
    """A dataset file row could not be accepted."""

    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


class ConfigError(SparseMetaError, ValueError):
    """A configuration field is unknown or has an invalid value."""

    def __init__(self, field: str, message: str):
        super().__init__(f"config field '{field}': {message}")
        self.field = field


class CalibrationRangeError(DomainError):
    """The requested heterogeneity target cannot be reached."""

"""
Exception hierarchy for the cosformer package.

Every fault raised by the library derives from CosformerError so callers
(and the CLI) can tell library faults from programming errors.
"""

from pathlib import Path
from typing import Optional, Union


class CosformerError(Exception):
    """Base class for all cosformer faults."""


class ContractViolation(CosformerError, ValueError):
    """A precondition of an operation was not met."""


class NumericFault(CosformerError, ArithmeticError):
    """A non-finite value or a diverging iteration was detected."""

    def __init__(self, message: str, node_id: Optional[int] = None):
        if node_id is not None:
            message = f"{message} (node {node_id})"
        super().__init__(message)
        self.node_id = node_id


class GenerationFault(CosformerError):
    """Synthetic stream generation could not satisfy its constraints."""


class FormatError(CosformerError, OSError):
    """A bag, manifest or checkpoint file is malformed."""

    def __init__(self, path: Union[str, Path], message: str):
        super().__init__(f"{path}: {message}")
        self.path = str(path)


class UsageError(CosformerError):
    """Invalid combination of command-line options."""

"""
Exception hierarchy for the sliced attention toolkit.

Every error carries the exit code the command-line front end reports for it,
so library code can raise and the CLI only has to translate.
"""

from typing import Optional, Tuple


class SlicedAttentionError(Exception):
    """Base class for all toolkit errors."""

    exit_code: int = 1

    def __init__(self, module: str, message: str):
        self.module = module
        self.message = message
        super().__init__(f"{module}: {message}")


class PropertyFailure(SlicedAttentionError):
    """A verified property (gradcheck, CPD, matching) did not hold."""

    exit_code = 1


class InputParseError(SlicedAttentionError):
    """A token or parameter file could not be read."""

    exit_code = 2


class ConfigurationError(SlicedAttentionError):
    """Invalid flags, config values or a refused resource request."""

    exit_code = 2


class ShapeMismatchError(ConfigurationError):
    """Dimensions of inputs and parameters do not agree."""

    exit_code = 3


class EmptyInputError(SlicedAttentionError):
    """A token sequence with no tokens was supplied."""

    exit_code = 3


class DegenerateInputError(SlicedAttentionError):
    """Inputs for which the requested construction cannot exist."""

    exit_code = 3


class NumericError(SlicedAttentionError):
    """Non-finite values appeared in inputs or results."""

    exit_code = 4

    def __init__(self, module: str, message: str, index: Optional[int] = None):
        self.index = index
        if index is not None:
            message = f"{message} (index {index})"
        super().__init__(module, message)


class ContractViolationError(SlicedAttentionError):
    """A low-level routine was called with broken preconditions."""

    exit_code = 4


class ScoreTieError(SlicedAttentionError):
    """Projected query and key scores are too close to differentiate."""

    exit_code = 4

    def __init__(self, module: str, pair: Tuple[int, int], gap: float, required: float):
        self.pair = pair
        self.gap = gap
        self.required = required
        super().__init__(
            module,
            f"query {pair[0]} and key {pair[1]} are {gap:.3e} apart, "
            f"below the required gap {required:.3e}",
        )


class ConstructionError(SlicedAttentionError):
    """The expressivity engine failed on inputs that satisfy its hypotheses."""

    exit_code = 4

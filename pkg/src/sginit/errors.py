"""Exception types shared across the package.

The CLI maps these onto stable exit codes (see cli module): configuration
problems exit 2, I/O problems 3, solver singularities 4, empty overlaps 5.
"""


class ConfigError(ValueError):
    """Invalid configuration: bad option value, missing input, shape of a run."""


class ShapeError(ValueError):
    """Array dimensions disagree with what the operation requires."""


class DomainError(ValueError):
    """Input outside the mathematical domain of the operation."""


class BehindCameraError(ValueError):
    """Point has non-positive depth and cannot be projected."""


class InvalidDepthError(ValueError):
    """Non-positive or non-finite depth where a positive depth is required."""


class ParseError(ValueError):
    """Malformed file content; message carries the location (line or byte offset)."""


class SingularSystemError(RuntimeError):
    """Reduced normal equations are singular beyond damping; names the pose."""

    def __init__(self, pose_index: int, message: str | None = None):
        self.pose_index = pose_index
        super().__init__(message or f"normal equations singular at pose {pose_index}")


class NoOverlapError(ValueError):
    """No jointly valid samples between the two inputs being compared."""


class DegenerateFitError(ValueError):
    """Least-squares fit underdetermined (e.g. constant predictor)."""


class DegenerateAlignmentError(ValueError):
    """Point set leaves the alignment rotation ambiguous."""


class NoValidPixelsError(ValueError):
    """Mask selects no pixels."""


class CoverageError(KeyError):
    """A provider was queried for an edge it does not cover."""

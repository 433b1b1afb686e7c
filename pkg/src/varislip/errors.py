"""Exception hierarchy shared by all modules."""
from __future__ import annotations


class VarislipError(Exception):
    """Base class for every error raised by the package."""


class InvalidMaterial(VarislipError, ValueError):
    """Material or regularizer parameters violate their admissibility rules."""


class DegenerateJacobian(VarislipError):
    """A deformation gradient has nonpositive determinant at some node."""

    def __init__(self, message, nodes=None):
        super().__init__(message)
        self.nodes = nodes


class ShapeMismatch(VarislipError, ValueError):
    """Arrays do not match the grid they are supposed to live on."""


class NonSimpleBoundary(VarislipError):
    """A boundary curve is not a simple closed polygon."""


class InterpolationOutOfDomain(VarislipError):
    """A query point has no active fluid cell within the search window."""

    def __init__(self, message, points=None):
        super().__init__(message)
        self.points = points


class ContactImminent(VarislipError):
    """The solid is closer to the container or itself than the threshold."""

    def __init__(self, message, step=None, separation=None, result=None):
        super().__init__(message)
        self.step = step
        self.separation = separation
        self.result = result


class LineSearchFailed(VarislipError):
    """No admissible step length was found along a descent direction."""


class MaxIterations(VarislipError):
    """The step solver did not converge within its iteration budget."""


class ParseError(VarislipError, ValueError):
    """A configuration document could not be parsed."""

    def __init__(self, message, line=None, key=None):
        loc = []
        if line is not None:
            loc.append(f"line {line}")
        if key is not None:
            loc.append(f"key {key!r}")
        super().__init__(f"{message} ({', '.join(loc)})" if loc else message)
        self.line = line
        self.key = key


class ValidationError(VarislipError, ValueError):
    """A configuration value is out of its admissible range."""

    def __init__(self, message, key=None):
        super().__init__(f"{key}: {message}" if key else message)
        self.key = key


class IntegrityError(VarislipError):
    """An output file does not match the hash recorded in its metadata."""


class SampleEscaped(VarislipError):
    """A flow-map sample left the fluid region by more than the search window."""

"""Exception hierarchy shared across the toolkit.

The CLI maps these onto its exit-code scheme: parse/input problems exit 2,
violated data invariants exit 3 (semantic violations such as an invalid pose
are reported via exit 1 without an exception).
"""


class GeoaffError(Exception):
    """Base class for all toolkit errors."""


class ParseError(GeoaffError):
    """Malformed input: bad OBJ/JSON/MLD1 content, missing fields, bad magic."""


class InvariantError(GeoaffError):
    """A data-structure invariant does not hold (corrupt file, broken state)."""


class DegenerateInputError(GeoaffError):
    """Numerically degenerate problem: coplanar calibration points, constant
    timestamps, empty mesh."""


class ConvergenceError(GeoaffError):
    """An iterative solver failed to converge within its iteration budget."""

"""Exception hierarchy shared across the engine.

The split matters for the CLI's exit codes and the service's error payloads:
format problems (a file we could not even read as the expected shape) are
reported separately from validation problems (a well-formed file whose
content violates an invariant) and from grid mismatches (features built on
incompatible grids being combined).
"""


class SegplagError(Exception):
    """Base class for all engine errors."""


class FormatError(SegplagError):
    """A file or record is not in the expected format (parse failure)."""


class ValidationError(SegplagError):
    """Well-formed input violates a documented invariant."""


class GridMismatchError(SegplagError):
    """Two features or an index/query pair were built on incompatible grids."""

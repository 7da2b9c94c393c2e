"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes: usage problems exit 1, data problems
(bad file contents, incomplete sweeps, checkpoint mismatches) exit 2, and
anything else exits 3.
"""


class PnpError(Exception):
    """Base class for all package errors."""


class MirSyntaxError(PnpError):
    """Malformed MIR text. Carries the line/column of the offending token."""

    def __init__(self, message: str, line: int, col: int):
        super().__init__(f"{line}:{col}: {message}")
        self.line = line
        self.col = col


class MirValidationError(PnpError):
    """Structurally well-formed MIR that violates a module invariant
    (SSA, arity, block labels, terminators)."""


class GraphFormatError(PnpError):
    """Graph interchange bytes that do not decode to a valid graph."""


class DataError(PnpError):
    """Inconsistent measurement data: incomplete sweeps, missing rows,
    out-of-space configs, bad counters."""


class CheckpointError(PnpError):
    """Unreadable or incompatible checkpoint payload."""

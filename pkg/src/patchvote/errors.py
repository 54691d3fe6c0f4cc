"""Exception hierarchy shared across the package.

Every error raised by library code derives from PatchVoteError so the CLI
can turn any failure into a machine-readable error object.
"""


class PatchVoteError(Exception):
    """Base class for all package errors."""


class ObjParseError(PatchVoteError):
    """Malformed OBJ input; carries the offending 1-based line number."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class MeshError(PatchVoteError):
    """Degenerate or otherwise unusable mesh geometry."""


class RenderError(PatchVoteError):
    """Rasterization cannot proceed (bad view, empty projection)."""


class DescriptorError(PatchVoteError):
    """Invalid descriptor operation (e.g. IoU of an empty descriptor)."""


class ConfigError(PatchVoteError):
    """Configuration file rejected; message names the offending key."""


class SynthError(PatchVoteError):
    """Invalid synthetic-shape spec or benchmark arguments."""


class TrainingError(PatchVoteError):
    """Training cannot proceed (empty corpus, all anchors skipped)."""


class EmptyIndexError(PatchVoteError):
    """The patch index holds no records."""


class NoRetrievalError(PatchVoteError):
    """Every query patch was excluded; no vote could be cast."""


class FormatError(PatchVoteError):
    """A binary artifact file is malformed or truncated."""

"""Exception types shared across the package.

Argument misuse raises plain ``ValueError``; the classes below mark
problems with data content or file structure so the CLI can map them to
its data/format exit code.
"""


class FormatError(Exception):
    """A file does not conform to the CSRT/CSRQ layout (bad magic,
    truncated payload, unsupported version, ...)."""


class DataError(Exception):
    """Structurally valid input carrying invalid content (non-finite
    values, out-of-range codes, ...)."""


class DegenerateInputError(DataError):
    """Input on which the requested statistic is undefined (constant
    sample, zero-variance deltas, ...)."""

"""Exception taxonomy shared by the library and the CLI.

Every class carries a short machine-parseable ``code`` that the CLI prints
as the prefix of its single-line error output.
"""


class DefscanError(Exception):
    code = "E_INTERNAL"


class DimensionError(DefscanError):
    """Array extents do not satisfy an operation's contract."""

    code = "E_DIM"


class ConfigurationError(DefscanError):
    """A structural knob (kernel size, window, preset, config key) is invalid."""

    code = "E_CONFIG"


class InputError(DefscanError):
    """Runtime data violates a precondition (range, sign, finiteness)."""

    code = "E_INPUT"


class FormatError(DefscanError):
    """A serialized artifact (checkpoint, image) is malformed."""

    code = "E_FORMAT"


class DivergenceError(DefscanError):
    """Training produced a non-finite loss."""

    code = "E_DIVERGED"

"""Exception types shared across the toolkit.

The CLI maps :class:`ConfigError` to exit code 2 and :class:`NumericError`
to exit code 3; everything else propagates as an ordinary failure.
"""


class EULError(Exception):
    pass


class ConfigError(EULError, ValueError):
    """Invalid configuration, degenerate parameters or an unusable split."""


class ShapeError(EULError, ValueError):
    pass


class ContractError(EULError, ValueError):
    """A documented precondition of an operation was violated."""


class NumericError(EULError, ArithmeticError):
    pass


class SingularSystemError(NumericError):
    pass


class AlignmentError(EULError, ValueError):
    pass


class InsufficientDataError(EULError, ValueError):
    pass


class UnknownEntityError(EULError, KeyError):
    def __init__(self, unknown, known):
        self.unknown = sorted(unknown)
        self.known = sorted(known)
        super().__init__(
            f"unknown entity keys {self.unknown}; known keys: {self.known}")

    def __str__(self):
        return self.args[0]


class FormatError(EULError, ValueError):
    """A serialized artifact has the wrong magic, version or shape table."""


class ChecksumError(FormatError):
    pass

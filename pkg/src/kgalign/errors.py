"""Exception hierarchy shared by every kgalign module.

The CLI maps these onto exit codes: data problems exit 2, numeric
failures exit 3.
"""


class KgaError(Exception):
    """Base class for all kgalign errors."""


class DataError(KgaError):
    """Input data could not be used as given."""


class ParseError(DataError):
    def __init__(self, message, path=None, line_no=None):
        self.path = path
        self.line_no = line_no
        where = ""
        if path is not None:
            where = f"{path}:"
        if line_no is not None:
            where += f"{line_no}: "
        elif where:
            where += " "
        super().__init__(where + message)


class VocabularyError(DataError):
    pass


class ConflictError(DataError):
    pass


class FormatError(DataError):
    """Checkpoint bytes are malformed, truncated or of an unknown version."""


class ShapeError(KgaError, ValueError):
    pass


class ContractError(KgaError):
    """A caller broke a documented precondition (e.g. a stale cache)."""


class NumericError(KgaError, ArithmeticError):
    pass


class SamplingError(KgaError):
    pass


class ConfigError(KgaError):
    pass

"""Exception hierarchy shared by every module.

Each class maps to a distinct CLI exit code (see ``vcrn.cli``).
"""


class VCRNError(Exception):
    exit_code = 1
    category = "vcrn"


class ConfigError(VCRNError, ValueError):
    exit_code = 4
    category = "config"


class DimensionError(VCRNError, ValueError):
    exit_code = 5
    category = "dimension"


class NumericError(VCRNError, ArithmeticError):
    exit_code = 7
    category = "numeric"


class ContractError(VCRNError, ValueError):
    exit_code = 8
    category = "contract"


class TrainingError(VCRNError, RuntimeError):
    exit_code = 9
    category = "training"


class ParseError(VCRNError, ValueError):
    """Malformed binary or text file."""

    exit_code = 6
    category = "parse"


class BadMagicError(ParseError):
    pass


class VersionMismatchError(ParseError):
    pass


class TruncatedPayloadError(ParseError):
    pass

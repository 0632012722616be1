"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class VesselTrajError(Exception):
    exit_code = 1


class ContractError(VesselTrajError):
    """Caller violated a documented precondition."""

    exit_code = 1


class DimensionError(ContractError):
    pass


class DomainError(ContractError):
    pass


class ConfigError(VesselTrajError):
    exit_code = 1


class ExtentError(ContractError):
    """Model extents (hidden size, intention vocabulary, ...) disagree."""


class DataError(VesselTrajError):
    exit_code = 2


class FormatError(DataError):
    pass


class AmbiguityError(DataError):
    pass


class IntegrityError(DataError):
    pass


class NumericError(VesselTrajError):
    exit_code = 3

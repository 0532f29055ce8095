# dicp_components/errors.py
"""Exception hierarchy shared by every component.

Each class carries the process exit code the CLI reports for it.
"""


class DICPError(Exception):
    """Base class for all toolkit errors"""

    exit_code = 1


class ConfigError(DICPError):
    """Invalid configuration document, flag or parameter value"""

    exit_code = 2


class DataError(DICPError):
    """Malformed or inconsistent input data"""

    exit_code = 3


class NumericalError(DICPError):
    """A computation could not produce a meaningful result"""

    exit_code = 4


class DimensionMismatchError(DataError):
    """Operands live in different dimensions (2D vs 3D)"""


class EmptyCloudError(DataError):
    """An operation needs at least one point"""


class SingularityError(NumericalError):
    """Rotation angle too close to +/- pi for the logarithmic map"""


class NoCorrespondencesError(NumericalError):
    """Every correspondence weight was gated to zero"""

"""Exception hierarchy.

Three families map onto CLI exit codes: configuration problems (2),
model problems (3) and I/O problems (4).
"""


class EpimemError(Exception):
    exit_code = 1


class ConfigError(EpimemError):
    exit_code = 2


class ModelError(EpimemError):
    exit_code = 3


class IoError(EpimemError):
    exit_code = 4


class NegativeAge(ModelError, ValueError):
    pass


class InvalidModel(ModelError):
    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class NonConvergent(ModelError):
    pass


class ZeroLimit(ModelError):
    pass


class ZeroGammaStar(ModelError):
    pass


class NoConvergence(ModelError):
    pass


class NonPositiveKernel(ModelError):
    pass


class NonPositiveForce(ModelError):
    pass


class MassDrift(ModelError):
    pass


class GridMismatch(ModelError):
    pass


class MemoryKernelNotConstant(ModelError):
    pass


class TailDivergent(ModelError):
    pass


class NonUniformSusceptibility(ModelError):
    pass


class BoundaryNearZero(ModelError):
    pass


class BetaZero(ModelError):
    pass


class PathTooShort(ModelError):
    pass


class InsufficientReplicas(ConfigError):
    pass


class ZeroLambdaStarWarning(UserWarning):
    """lambda_star is zero: the proposal process is empty and nothing happens."""

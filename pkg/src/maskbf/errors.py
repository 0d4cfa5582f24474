"""Exception types raised across the package."""


class MaskBFError(Exception):
    """Base class for all package errors."""


class DimensionMismatch(MaskBFError, ValueError):
    pass


class NotPositiveDefinite(MaskBFError, ValueError):
    pass


class SingularMatrix(MaskBFError, ValueError):
    pass


class ZeroEnergy(MaskBFError, ValueError):
    pass


class ZeroMaskSum(MaskBFError, ValueError):
    pass


class ZeroReference(MaskBFError, ValueError):
    pass


class EmptyInput(MaskBFError, ValueError):
    pass


class NonColaWindow(MaskBFError, ValueError):
    pass


class ChannelMismatch(MaskBFError, ValueError):
    pass


class GraphCycle(MaskBFError, RuntimeError):
    pass


class UnsupportedOp(MaskBFError, RuntimeError):
    pass


class PlanError(MaskBFError, ValueError):
    """Invalid experiment plan (CLI exit code 2)."""

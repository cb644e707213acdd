"""Exception types shared across the package."""


class QcdensError(Exception):
    """Base class for all numerical/contract failures raised by qcdens."""


class PointOutsideGrid(QcdensError):
    """A point to be interpolated lies beyond the safe grid margin."""


class InverseMapFailure(QcdensError):
    """Newton inversion of the deformation failed to converge at a needed node."""


class TargetGridOverflow(QcdensError):
    """The image of the dilatation support does not fit inside the target grid."""


class DegeneratePinning(QcdensError):
    """Affine pinning of the vector field is impossible (a = 0)."""


class OrientationLoss(QcdensError):
    """A step produced a non-positive Jacobian at some grid node."""


class RebuildDiverged(QcdensError):
    """Rebuilding the deformation left a Beltrami residual above tolerance."""


class NonzeroCoefficients(QcdensError):
    """An affine-only constructor was given nonzero basis coefficients."""


class NonpositiveJacobian(QcdensError):
    """Evaluation found J <= 0 at a data point (state inconsistency)."""


class BranchSearchIncomplete(QcdensError):
    """Preimage root search hit the boundary of its bracketing range."""


class NegativeDensity(QcdensError):
    """A density grid contains values below the negativity tolerance."""


class ConfigError(QcdensError):
    """Invalid experiment configuration."""

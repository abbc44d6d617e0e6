class TaxPoseError(Exception):
    """Base class for all errors raised by this package."""


class NumericalError(TaxPoseError):
    """Solver or gradient failure caused by ill-conditioned input."""


class DegenerateCorrespondences(NumericalError):
    """Weighted cross-covariance has rank < 2, so the rotation is ambiguous."""


class NearDegenerateSpectrum(NumericalError):
    """Two singular values are too close for the SVD differential to be defined."""


class DegenerateGeometry(TaxPoseError):
    """Point cloud has no spatial extent (all points coincide)."""


class CentroidCoincidence(TaxPoseError):
    """A point sits on the cloud centroid, so its unit offset is undefined."""


class ParallelReference(TaxPoseError):
    """Reference direction is parallel to the rotational symmetry axis."""


class LengthMismatch(TaxPoseError, ValueError):
    pass


class GoalContextMismatch(TaxPoseError, ValueError):
    pass


class UnknownGoal(TaxPoseError, KeyError):
    pass


class CheckpointFormatError(TaxPoseError, ValueError):
    pass


class NonFiniteLoss(NumericalError):
    def __init__(self, step, value):
        super().__init__(f"non-finite loss {value!r} at step {step}")
        self.step = step
        self.value = value

"""Exception types raised across the toolkit."""


class GeometryError(ValueError):
    """Invalid acquisition geometry (distances, pitches, volume/source overlap)."""


class PointAtInfinityError(ValueError):
    """Homogeneous projection of a point on the camera's principal plane."""


class DegenerateMatchesError(ValueError):
    """Point matches do not constrain the epipolar geometry (rank deficiency)."""


class DecompositionError(RuntimeError):
    """No essential-matrix candidate passed the cheirality vote."""


class BoundsError(RuntimeError):
    """Pose search left its bounds.  Carries the best parameters found so far."""

    def __init__(self, message, best=None, residual=None):
        super().__init__(message)
        self.best = best
        self.residual = residual


class TilingError(ValueError):
    """Block/stride combination cannot tile the image."""


class CoverageError(ValueError):
    """A pixel of the merged map is not covered by any block."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss.  Carries the epoch index."""

    def __init__(self, message, epoch):
        super().__init__(message)
        self.epoch = epoch


class EmptyEvidenceError(ValueError):
    """A localizer input volume carries no evidence (all zero)."""


class PhantomSpecError(ValueError):
    """Phantom specification violates its invariants (e.g. shape escapes the prism)."""

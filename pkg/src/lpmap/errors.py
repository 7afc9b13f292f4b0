"""Exception types shared across the package."""


class LpmapError(Exception):
    """Base class for all lpmap errors."""


class SingularDirection(LpmapError):
    """Direction is too close to the (alpha, beta) chart singularity (±x axis)."""


class EmptyStream(LpmapError):
    """Pose stream contained no poses."""


class NotLinear(LpmapError):
    """Cluster failed the PCA linearity gate."""


class BasisNotOrthonormal(LpmapError):
    """Subspace basis is not orthonormal."""


class DimensionMismatch(LpmapError):
    """Subspaces have different ambient or intrinsic dimension."""


class NoConsensus(LpmapError):
    """Consistent correspondence set too small."""


class Degenerate(LpmapError):
    """Registration problem is unobservable (too few or parallel landmarks)."""


class NotConverged(LpmapError):
    """Iterative solve failed to converge."""


class MissingChain(LpmapError):
    """Odometry chain between two keyframes cannot be composed."""


class ParseError(LpmapError):
    """Input file is malformed; message carries the locus."""


class ValidationError(LpmapError):
    """Parsed data violates a named invariant."""


class NoOverlap(LpmapError):
    """Session shares no accepted loops with the map."""


class LostTrack(LpmapError):
    """Localization inlier count dropped below the tracking threshold."""


class LengthMismatch(LpmapError):
    """Trajectories to compare have different lengths."""


class NumericalFailure(LpmapError):
    """Optimization produced a non-finite cost."""

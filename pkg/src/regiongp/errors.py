"""Exception and warning types shared across the package.

User errors (bad inputs, malformed files) derive from :class:`InputError`;
numerical failures during model fitting derive from :class:`NumericalError`.
The CLI maps these to exit codes 1 and 2 respectively.
"""


class RegionGpError(Exception):
    """Base class for all package errors."""


class InputError(RegionGpError):
    """Invalid user input: bad file, bad option, inconsistent data."""


class NumericalError(RegionGpError):
    """A numerical routine failed to produce a usable result."""


# data ingestion
class DuplicateLineId(InputError):
    pass


class DuplicateMarkerId(InputError):
    pass


class NonNumericGenotype(InputError):
    pass


class AllMissingMarker(InputError):
    """More than half of the markers had to be dropped as fully missing."""


class DuplicatePhenotypeRecord(InputError):
    pass


class NegativePosition(InputError):
    pass


class UnknownUnit(InputError):
    pass


class NoOverlap(InputError):
    """Fewer than two lines have both genotypes and phenotypes."""


# partitioning
class EmptyChromosome(InputError):
    """A chromosome in the map has no markers present in the matrix."""


# kernels
class ZeroVarianceInput(NumericalError):
    """All rows identical; automatic Gaussian bandwidth is undefined."""


class NonFiniteEntry(NumericalError):
    pass


class ZeroTrace(NumericalError):
    pass


class ColumnMismatch(InputError):
    """Marker columns of two matrices do not agree."""


# variance-component solver
class SingularXstar(NumericalError):
    """Fixed-effect design is rank deficient."""


class NonPsdK(NumericalError):
    """Kernel matrix has eigenvalues below the PSD tolerance."""


class ConvergenceFailure(NumericalError):
    pass


class SingularV(NumericalError):
    pass


class DimensionMismatch(InputError):
    pass


# combiner
class NonConvergence(NumericalError):
    """Coordinate descent did not converge within the sweep budget."""


class DegenerateFolds(InputError):
    """Too few observations to cross-validate."""


# local values / pipeline
class TooManyFailedRegions(NumericalError):
    """More than half of the region fits failed."""


# simulator
class InfeasibleH2(InputError):
    """No genetic variance configured, so no heritability target is reachable."""


# cross validation
class TooFewTestLines(InputError):
    pass


class LengthMismatch(InputError):
    pass


# bundles / CLI
class ManifestMismatch(InputError):
    """Input markers do not match the model bundle manifest."""


class ConfigError(InputError):
    """Malformed configuration file or unknown configuration key."""


# warnings
class RegionGpWarning(UserWarning):
    pass


class AllMissingMarkerWarning(RegionGpWarning):
    """A fully missing marker was dropped."""


class DepthTooLarge(RegionGpWarning):
    """A chromosome had too few markers and stopped subdividing early."""


class RankDeficient(RegionGpWarning):
    """Requested more principal components than available; count reduced."""


class UnmappedMarkers(RegionGpWarning):
    """Markers in the matrix are missing from the genetic map."""


class RegionFitFailed(RegionGpWarning):
    """A region fit failed; its column is zeroed and flagged."""

"""Exception hierarchy shared across the toolkit."""


class TrackmapError(Exception):
    """Base class for all toolkit errors."""


class InputError(TrackmapError):
    """Bad user input: missing files, malformed data, invalid parameters."""


class NumericalError(TrackmapError):
    """Numerical failure: singular systems, domain violations."""


# -- geometry ---------------------------------------------------------------

class AngleOutOfRange(NumericalError):
    """Rotation angle too close to pi for a unique angle-axis logarithm."""


class EmptyHypothesisSet(InputError):
    """Hypothesis aggregation called with no samples."""


# -- imaging ----------------------------------------------------------------

class IndivisibleResolution(InputError):
    """Image resolution not divisible by 2^(levels-1)."""


# -- keyframe ---------------------------------------------------------------

class DegenerateView(TrackmapError):
    """Virtual viewpoint sees (almost) nothing of the keyframe."""


# -- cost volume ------------------------------------------------------------

class InvalidRange(InputError):
    """Invalid depth-label range specification."""


class EmptyFrameList(InputError):
    """Cost accumulation called with no frames."""


class LabelMismatch(InputError):
    """Operation requires a shared fixed-band label set."""


# -- tracking ---------------------------------------------------------------

class InsufficientOverlap(TrackmapError):
    """Too few valid residual pixels to estimate a pose increment."""


class SingularNormalEquations(NumericalError):
    """Normal equations unsolvable even after damping."""


class TrackingLost(TrackmapError):
    """Tracking failed on every pyramid level.

    Carries the partial trajectory accumulated up to the failing frame.
    """

    def __init__(self, message, partial_trajectory=None, partial_keyframes=None):
        super().__init__(message)
        self.partial_trajectory = partial_trajectory or []
        self.partial_keyframes = partial_keyframes or []


# -- losses / metrics -------------------------------------------------------

class NoValidPixels(InputError):
    """No jointly valid pixels to evaluate a loss or metric on."""


class DomainError(NumericalError):
    """Argument outside the mathematical domain of a function."""


class SingularCovariance(NumericalError):
    """Covariance not positive definite even after regularization."""


class NonPositiveDepth(InputError):
    """Metric depth map contains non-positive values at valid pixels."""


class InsufficientOverlapInTime(InputError):
    """Fewer than two timestamp-aligned trajectory pairs."""


# -- synthetic scenes -------------------------------------------------------

class EmptyView(TrackmapError):
    """Rendered view contains no scene geometry."""


# -- dataset I/O ------------------------------------------------------------

class MissingIndexFile(InputError):
    """Sequence directory lacks a required index file."""


class MalformedLine(InputError):
    """Index or trajectory file has a malformed line."""

    def __init__(self, path, line_number, message):
        super().__init__(f"{path}:{line_number}: {message}")
        self.path = str(path)
        self.line_number = line_number

"""Exception hierarchy shared by all tacml modules.

``ValidationError`` subclasses mark bad user input (CLI exit code 1);
everything else rooted at ``TacmlError`` is a runtime failure (exit code 2).
"""


class TacmlError(Exception):
    """Base class for all tacml errors."""


class ValidationError(TacmlError):
    """Invalid input, configuration, or file content."""


# geometry
class DegeneratePoint(TacmlError):
    """Perspective denominator vanishes at the queried point."""


class NonInvertible(TacmlError):
    """Transform cannot be inverted (determinant below tolerance)."""


class EmptyFamily(ValidationError):
    """Transform family has no enabled kinds."""


class EmptyKeypoints(ValidationError):
    """Keypoint list is empty where at least one point is required."""


# encoder
class ShapeMismatch(ValidationError):
    """Tensor shapes are inconsistent with the fixed architecture."""


class StaleCache(TacmlError):
    """Backward called with gradients that do not match the forward cache."""


class IncompatibleCheckpoint(ValidationError):
    """Checkpoint metadata disagrees with the current architecture."""


# losses
class DimensionMismatch(ValidationError):
    """Operands have different dimensionality."""


class EmptyOverlapWarning(UserWarning):
    """No comparable cells between the two attention maps."""


# clustering
class TooFewPoints(ValidationError):
    """Fewer points than requested clusters."""


class TooFewCenters(ValidationError):
    """Operation needs at least two cluster centers."""


# membank
class BatchTooLarge(ValidationError):
    """Batch exceeds the memory bank capacity."""


# matching
class ImageTooSmall(ValidationError):
    """Image smaller than the matching patch."""


class TooFewMatches(ValidationError):
    """Not enough correspondences for the requested transform model."""


class DegenerateConfiguration(TacmlError):
    """Point configuration is rank-deficient (e.g. collinear)."""


class ParseError(ValidationError):
    """Malformed match file; carries a 1-based line number."""

    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


class UnknownImageId(ValidationError):
    """Match file references an image id absent from the dataset."""


# data
class InvalidShape(ValidationError):
    """Dataset shape violates generator preconditions."""


class CropTooLarge(ValidationError):
    """Requested crop exceeds the source image."""


class FormatError(ValidationError):
    """Tensor file is corrupt or has the wrong format."""


class SeparabilityError(TacmlError):
    """Generated dataset failed the pixel nearest-neighbour solvability check."""


# harness
class TooFewClasses(ValidationError):
    """Fewer pseudo-classes available than requested per batch."""


class UnknownLoss(ValidationError):
    """Gradient check requested for an unregistered loss."""


class AllSingletons(ValidationError):
    """Every query class has a single instance; recall is undefined."""


class NonFiniteLoss(TacmlError):
    """Training produced a non-finite loss value."""

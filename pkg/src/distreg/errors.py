"""Typed errors raised across the library.

All library-specific failures derive from ``DistregError`` so callers can
catch one base class at a process boundary while tests assert the precise
subclass.
"""


class DistregError(Exception):
    """Base class for all library errors."""


class EmptyCloud(DistregError):
    """An operation required a non-empty point cloud."""


class DegenerateGeometry(DistregError):
    """Correspondence geometry is collinear or coincident (covariance rank < 2)."""


class MalformedFile(DistregError):
    """A file failed structural validation (truncation, bad field count)."""


class NonRigidPose(DistregError):
    """A parsed pose violates orthonormality beyond the repair threshold."""


class TooFewPoints(DistregError):
    """Cloud has fewer points than the encoder neighborhood size."""


class ShapeMismatch(DistregError):
    """Array shapes are inconsistent with the declared model dimensions."""


class MissingCache(DistregError):
    """Backward pass invoked without the forward activations."""


class NoPositives(DistregError):
    """Metric loss needs at least one positive correspondence."""


class EmptyFeatureMap(DistregError):
    """Feature matching needs non-empty feature maps."""


class TooFewCorrespondences(DistregError):
    """Robust estimation needs at least the minimal sample size."""


class EmptyResults(DistregError):
    """Recall aggregation over an empty result list."""


class NoNeighborFrames(DistregError):
    """Aggregation found no usable non-key frames around the key frame."""


class NoPairs(DistregError):
    """Training requires a non-empty distilled pair list."""


class NonFiniteLoss(DistregError):
    """Training loss became NaN/Inf; carries the failing step index."""

    def __init__(self, step: int, message: str = ""):
        self.step = step
        super().__init__(message or f"non-finite loss at step {step}")


class NonFinite(DistregError):
    """A scalar input expected to be finite was NaN/Inf."""

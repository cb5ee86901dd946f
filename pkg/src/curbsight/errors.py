"""Exception types raised across the pipeline."""

from __future__ import annotations


class CurbsightError(Exception):
    """Base class for all library errors."""


class NonPositiveDepth(CurbsightError):
    pass


class AtOrAboveHorizon(CurbsightError):
    pass


class NonPositiveDistance(CurbsightError):
    pass


class RegionOutsideImage(CurbsightError):
    pass


class DegenerateIntersection(CurbsightError):
    pass


class RowAboveReference(CurbsightError):
    pass


class NegativeDiscriminant(CurbsightError):
    pass


class DegenerateFit(CurbsightError):
    pass


class EmptyImage(CurbsightError):
    pass


class FaceOutsideImage(CurbsightError):
    pass


class DegenerateFace(CurbsightError):
    pass


class DimensionMismatch(CurbsightError):
    pass


class EmptyClass(CurbsightError):
    pass


class WrongBagSize(CurbsightError):
    pass


class EmptyCounts(CurbsightError):
    pass


class MisalignedLogs(CurbsightError):
    pass


class ConfigError(CurbsightError):
    pass


class StateOutsideFrame(CurbsightError):
    """No curb pixel is visible. Carries the rendered raster and its record."""

    def __init__(self, message, raster=None, record=None):
        super().__init__(message)
        self.raster = raster
        self.record = record

"""Monocular curb detection, ranging and tracking."""

from __future__ import annotations

__version__ = "0.1.0"

from .geometry import CameraRig, CddConfig, Csr, CurbState, Line2
from .pipeline import Pipeline, detect_frame, run_sequence

__all__ = ["CameraRig", "CddConfig", "Csr", "CurbState", "Line2", "Pipeline", "detect_frame", "run_sequence", "__version__"]

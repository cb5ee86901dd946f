"""Per-frame detection and sequence tracking wired together."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, List, Optional, Sequence

import numpy as np

from .appearance import LinearModel, filter_candidates
from .edges import EdgeParams, LineSet, extract_lines_warped
from .errors import RegionOutsideImage
from .geometry import CameraRig, CddConfig, Csr, csr_to_image
from .ipcm import RemapConfig, WarpedImage, warp_csr
from .template import TRIPLET, Candidate, FitConfig, build_candidate_set
from .tracker import TrackOutput, Tracker, TrackerConfig


@dataclass(frozen=True)
class Pipeline:
    rig: CameraRig
    cdd: CddConfig
    remap: RemapConfig
    edges: EdgeParams = EdgeParams()
    fit: FitConfig = FitConfig()
    tracker: TrackerConfig = TrackerConfig()
    max_residual: float = 3.0

    @classmethod
    def default(cls, rig: Optional[CameraRig] = None, **kw) -> "Pipeline":
        rig = rig or CameraRig()
        cdd = kw.pop("cdd", None) or CddConfig.from_rig(rig)
        remap = kw.pop("remap", None) or RemapConfig.from_rig(rig, cdd.D_max)
        return cls(rig, cdd, remap, **kw)

    def warp(self, frame: np.ndarray, csr: Csr, prefilter_sigma: float = 0.0) -> WarpedImage:
        return warp_csr(frame, csr_to_image(csr, self.rig, self.cdd), self.remap, self.cdd, prefilter_sigma)


@dataclass(frozen=True)
class FrameResult:
    lines: LineSet
    candidates: List[Candidate]
    accepted: List[Candidate]
    warped: Optional[WarpedImage] = field(default=None, repr=False)

    @property
    def best(self) -> Optional[Candidate]:
        """Accepted candidate with the highest mean window score."""
        if not self.accepted:
            return None
        return max(self.accepted, key=lambda c: (c.score if c.score is not None else -np.inf))


def _drop_covered_pairs(cands: Sequence[Candidate]) -> List[Candidate]:
    """Remove two-line candidates whose lines belong to an accepted triplet."""
    covered = set()
    for c in cands:
        if c.kind == TRIPLET and c.tuple is not None:
            ls = c.tuple.lines
            covered.update({(ls[0], ls[1]), (ls[0], ls[2]), (ls[1], ls[2])})
    return [c for c in cands if c.kind == TRIPLET or c.tuple is None or tuple(c.tuple.lines) not in covered]


def detect_frame(frame: np.ndarray, csr: Csr, pipe: Pipeline, model: Optional[LinearModel]) -> FrameResult:
    """Lines, fitted candidates and appearance-filtered candidates of one frame.

    Without a model every candidate under the residual limit is accepted.
    """
    try:
        warped = pipe.warp(frame, csr)
        smoothed = pipe.warp(frame, csr, pipe.edges.prewarp_sigma) if pipe.edges.prewarp_sigma > 0 else warped
    except RegionOutsideImage:
        return FrameResult(LineSet(), [], [], None)
    ls = extract_lines_warped(smoothed, pipe.edges)
    cands = build_candidate_set(ls.lines, pipe.rig, pipe.cdd, pipe.fit)
    plausible = [c for c in cands if c.residual_norm <= pipe.max_residual]
    if model is None:
        accepted = plausible
    else:
        accepted = filter_candidates(plausible, model, warped, pipe.cdd)
    return FrameResult(ls, cands, _drop_covered_pairs(accepted), warped)


@dataclass(frozen=True)
class SequenceResult:
    outputs: List[TrackOutput]
    detections: List[FrameResult]


def run_sequence(frames: Iterable[np.ndarray], pipe: Pipeline, model: Optional[LinearModel], keep_warped: bool = False) -> SequenceResult:
    tracker = Tracker(pipe.cdd, pipe.tracker)
    outputs, dets = [], []
    for t, frame in enumerate(frames):
        res = detect_frame(frame, tracker.csr_for(t), pipe, model)
        if not keep_warped:
            res = FrameResult(res.lines, res.candidates, res.accepted, None)
        outputs.append(tracker.step(res.accepted, t))
        dets.append(res)
    return SequenceResult(outputs, dets)

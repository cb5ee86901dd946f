from __future__ import annotations

import time
from dataclasses import dataclass
from typing import List

import numpy as np
import pytest

import curbsight.synthscene as ss
from curbsight.appearance import load_model
from curbsight.cli import DEFAULT_MODEL
from curbsight.pipeline import Pipeline, SequenceResult, run_sequence

N_SEQUENCES = 10


@pytest.fixture(scope="session")
def pipe() -> Pipeline:
    return Pipeline.default()


@pytest.fixture(scope="session")
def model():
    """The bundled classifier (test_appearance checks it against a fresh retrain)."""
    return load_model(DEFAULT_MODEL)


@dataclass
class TrackedSequence:
    seed: int
    preset: str
    frames: int
    gt: List[ss.GroundTruthRecord]
    result: SequenceResult
    seconds: float


def approach_sequence(i: int, pipe: Pipeline):
    """Noisy 500 to 100 cm approach number ``i``; presets alternate.

    Returns the preset, a lazy frame iterator and the ground truth records (filled as frames are drawn).
    """
    rng = np.random.default_rng(i)
    preset = ss.PRESETS[i % 2]
    traj = ss.approach_trajectory(
        500.0,
        100.0,
        rng.uniform(60, 100),
        yaw=rng.uniform(-0.1, 0.1),
        height=rng.uniform(10, 20),
        depth=rng.uniform(15, 30),
        seed=i,
    )
    gt: List[ss.GroundTruthRecord] = []

    def frames():
        for img, rec in ss.render_sequence(traj, pipe.rig, ss.Photometry.preset(preset), seed=i, cdd=pipe.cdd):
            gt.append(rec)
            yield img

    return preset, frames(), gt


@pytest.fixture(scope="session")
def tracked_sequences(pipe, model) -> List[TrackedSequence]:
    """Ten tracked approach sequences shared by the end-to-end acceptance checks."""
    out = []
    for i in range(N_SEQUENCES):
        t0 = time.perf_counter()
        preset, frames, gt = approach_sequence(i, pipe)
        res = run_sequence(frames, pipe, model)
        out.append(TrackedSequence(i, preset, len(gt), gt, res, time.perf_counter() - t0))
    return out


def pytest_terminal_summary(terminalreporter):
    lines = []
    for key in ("passed", "failed"):
        for rep in terminalreporter.stats.get(key, []):
            if rep.when == "call":
                lines += [v for k, v in rep.user_properties if k == "acceptance"]
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)

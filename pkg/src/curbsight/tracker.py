"""Temporal filtering of per-frame curb candidates.

The tracker first collects candidate sets from consecutive frames, picks the
most linear chain through them and then follows the curb with one
least-squares line per parameter over the recent frames. The lines predict
the next state, gate the next frame's candidates and give the smoothed
output.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .geometry import CddConfig, Csr, CurbState
from .template import Candidate

COLLECTING = "collecting"
TRACKING = "tracking"

# parameter order: D, yaw, H, E
GATE_ORDER = (0, 2, 1, 3)  # D, H, yaw, E


@dataclass(frozen=True)
class TrackerConfig:
    buffer_len: int = 5
    window: int = 7
    max_misses: int = 5
    gate_sigmas: float = 3.0
    sigma_floor: Tuple[float, float, float, float] = (4.0, 0.02, 1.0, 3.0)
    sse_scale: Tuple[float, float, float, float] = (1.0, 0.01, 0.5, 1.0)
    csr_length: float = 60.0
    max_combinations: int = 100_000
    H_span: float = 25.0
    E_span: float = 40.0

    def __post_init__(self):
        if self.buffer_len < 2 or self.window < self.buffer_len:
            raise ValueError("need 2 <= buffer_len <= window")
        if self.max_misses < 1 or self.gate_sigmas <= 0 or self.csr_length <= 0:
            raise ValueError("tracker limits must be positive")


def candidate_vector(c: Candidate) -> np.ndarray:
    """State as a 4-vector; a two-line candidate's unknown depth becomes NaN."""
    x = c.state.as_array()
    if not c.state.has_depth:
        x[3] = np.nan
    return x


@dataclass(frozen=True)
class PredictionLines:
    slopes: np.ndarray
    intercepts: np.ndarray
    sigmas: np.ndarray
    n: int

    def at(self, t: float) -> np.ndarray:
        return self.slopes * t + self.intercepts


def _line_fit(t: np.ndarray, y: np.ndarray):
    ok = np.isfinite(y)
    tt, yy = t[ok], y[ok]
    if tt.size == 0:
        return 0.0, np.nan, 0.0
    if tt.size == 1 or np.ptp(tt) == 0:
        return 0.0, float(yy.mean()), 0.0
    A = np.column_stack([tt, np.ones_like(tt)])
    (m, c), *_ = np.linalg.lstsq(A, yy, rcond=None)
    res = yy - (m * tt + c)
    sigma = math.sqrt(float(res @ res) / (tt.size - 2)) if tt.size > 2 else 0.0
    return float(m), float(c), sigma


def fit_lines(ts: Sequence[float], X: np.ndarray) -> PredictionLines:
    """One least-squares line per parameter; NaN samples are skipped."""
    t = np.asarray(ts, dtype=float)
    X = np.asarray(X, dtype=float)
    fits = [_line_fit(t, X[:, j]) for j in range(4)]
    m, c, s = (np.array(v) for v in zip(*fits))
    return PredictionLines(m, c, s, len(t))


def _sse_stack(t: np.ndarray, Y: np.ndarray) -> np.ndarray:
    """Residual sum of squares of a line fit for every row of Y (no NaNs)."""
    A = np.column_stack([t, np.ones_like(t)])
    M = np.eye(t.size) - A @ np.linalg.pinv(A)
    R = Y @ M.T
    return (R * R).sum(axis=1)


def combination_scores(ts, vectors: Sequence[np.ndarray], scales) -> Tuple[np.ndarray, np.ndarray]:
    """Score every one-per-frame chain.

    ``vectors[k]`` is an (n_k, 4) array of frame k's candidates. Returns the
    index table (n_comb, K) and the scaled SSE of each chain.
    """
    t = np.asarray(ts, dtype=float)
    sizes = [len(v) for v in vectors]
    idx = np.stack(np.meshgrid(*[np.arange(s) for s in sizes], indexing="ij"), axis=-1).reshape(-1, len(sizes))
    vals = np.stack([vectors[k][idx[:, k]] for k in range(len(sizes))], axis=1)  # (n, K, 4)
    total = np.zeros(len(idx))
    for j in range(4):
        Y = vals[:, :, j]
        valid = np.isfinite(Y)
        sse = np.zeros(len(idx))
        patterns, inverse = np.unique(valid, axis=0, return_inverse=True)
        for p_i, pat in enumerate(patterns):
            rows = np.nonzero(inverse.ravel() == p_i)[0]
            if pat.sum() > 2:
                sse[rows] = _sse_stack(t[pat], Y[np.ix_(rows, np.nonzero(pat)[0])])
        total += sse / scales[j] ** 2
    return idx, total


def select_initial_combination(
    buffer: Sequence[Tuple[int, Sequence[Candidate]]], cfg: TrackerConfig = TrackerConfig()
) -> Tuple[List[Tuple[int, np.ndarray]], PredictionLines]:
    """Most linear chain through the buffered frames.

    Falls back to each frame's smallest-residual candidate when the number
    of chains exceeds ``cfg.max_combinations``.
    """
    if not buffer or any(len(c) == 0 for _, c in buffer):
        raise ValueError("every buffered frame needs at least one candidate")
    ts = [t for t, _ in buffer]
    vectors = [np.array([candidate_vector(c) for c in cands]) for _, cands in buffer]
    n_comb = math.prod(len(v) for v in vectors)
    if n_comb > cfg.max_combinations:
        pick = [int(np.argmin([c.residual_norm for c in cands])) for _, cands in buffer]
    else:
        idx, score = combination_scores(ts, vectors, cfg.sse_scale)
        pick = list(idx[int(np.argmin(score))])
    chain = [(t, vectors[k][pick[k]]) for k, t in enumerate(ts)]
    return chain, fit_lines(ts, np.array([x for _, x in chain]))


def predict_state(lines: PredictionLines, t: float, cdd: CddConfig) -> np.ndarray:
    """Line values at ``t`` with the distance clamped to [0, D_max]."""
    x = lines.at(t)
    x[0] = min(max(x[0], 0.0), cdd.D_max)
    return x


def update_csr(D_pred: float, cdd: CddConfig, cfg: TrackerConfig = TrackerConfig()) -> Csr:
    """Searching region of length ``csr_length`` centred on the predicted distance."""
    L = cfg.csr_length
    if not cdd.contains(D_pred):
        return Csr(max(cdd.D_max - L, cdd.D_min), cdd.D_max, cfg.H_span, cfg.E_span)
    lo = max(D_pred - L / 2, cdd.D_min)
    hi = min(D_pred + L / 2, cdd.D_max)
    return Csr(lo, hi, cfg.H_span, cfg.E_span)


def gate_and_select(
    cands: Sequence[Candidate], x_pred: np.ndarray, lines: PredictionLines, cfg: TrackerConfig = TrackerConfig()
) -> Optional[Candidate]:
    """Closest inlier on distance, or None.

    Parameters are checked in the order D, H, yaw, E against a
    ``gate_sigmas``-sigma window; an unknown depth is not checked.
    """
    sig = np.maximum(np.nan_to_num(lines.sigmas, nan=0.0), cfg.sigma_floor)
    best, best_dev = None, np.inf
    for c in cands:
        x = candidate_vector(c)
        ok = True
        for j in GATE_ORDER:
            if not (np.isfinite(x[j]) and np.isfinite(x_pred[j])):
                continue
            if abs(x[j] - x_pred[j]) >= cfg.gate_sigmas * sig[j]:
                ok = False
                break
        if ok:
            dev = abs(x[0] - x_pred[0]) / sig[0]
            if dev < best_dev:
                best, best_dev = c, dev
    return best


def _state_or_none(x: Optional[np.ndarray]) -> Optional[CurbState]:
    if x is None or not np.all(np.isfinite(x[:3])):
        return None
    D = max(float(x[0]), 1e-6)
    yaw = float(np.clip(x[1], -1.5, 1.5))
    H = max(float(x[2]), 1e-6)
    E = float(x[3]) if np.isfinite(x[3]) and x[3] > 0 else 0.0
    return CurbState(D, yaw, H, E)


@dataclass(frozen=True)
class TrackOutput:
    t: int
    mode: str
    predicted: Optional[np.ndarray]
    chosen: Optional[Candidate]
    smoothed: Optional[np.ndarray]
    csr: Csr

    @property
    def smoothed_state(self) -> Optional[CurbState]:
        return _state_or_none(self.smoothed)


class Tracker:
    """Mutable per-sequence tracking state."""

    def __init__(self, cdd: CddConfig, cfg: TrackerConfig = TrackerConfig()):
        self.cdd = cdd
        self.cfg = cfg
        self.mode = COLLECTING
        self.buffer: List[Tuple[int, List[Candidate]]] = []
        self.chain: List[Tuple[int, np.ndarray]] = []
        self.lines: Optional[PredictionLines] = None
        self.misses = 0
        self.csr = self._collect_csr()

    def _collect_csr(self) -> Csr:
        return self.cdd.full_csr(H_span=self.cfg.H_span, E_span=self.cfg.E_span)

    def _reset(self):
        self.mode = COLLECTING
        self.buffer = []
        self.chain = []
        self.lines = None
        self.misses = 0

    def csr_for(self, t: int) -> Csr:
        """Searching region to use for frame ``t``."""
        if self.mode == TRACKING and self.lines is not None:
            return update_csr(predict_state(self.lines, t, self.cdd)[0], self.cdd, self.cfg)
        return self._collect_csr()

    def step(self, cands: Sequence[Candidate], t: int) -> TrackOutput:
        cands = list(cands)
        csr = self.csr_for(t)
        if self.mode == COLLECTING:
            return self._collect(cands, t, csr)
        return self._track(cands, t, csr)

    def _collect(self, cands, t, csr) -> TrackOutput:
        if not cands:
            self.buffer = []
            return TrackOutput(t, COLLECTING, None, None, None, csr)
        if self.buffer and self.buffer[-1][0] != t - 1:
            self.buffer = []
        self.buffer.append((t, cands))
        if len(self.buffer) < self.cfg.buffer_len:
            return TrackOutput(t, COLLECTING, None, None, None, csr)
        self.chain, self.lines = select_initial_combination(self.buffer, self.cfg)
        self.buffer = []
        self.mode = TRACKING
        self.misses = 0
        last = self.chain[-1][1]
        chosen = next((c for c in cands if np.array_equal(candidate_vector(c), last, equal_nan=True)), None)
        return TrackOutput(t, TRACKING, None, chosen, self.lines.at(t), csr)

    def _track(self, cands, t, csr) -> TrackOutput:
        x_pred = predict_state(self.lines, t, self.cdd)
        chosen = gate_and_select(cands, x_pred, self.lines, self.cfg)
        if chosen is None:
            self.misses += 1
            smoothed = self.lines.at(t)
            if self.misses >= self.cfg.max_misses:
                self._reset()
                return TrackOutput(t, COLLECTING, x_pred, None, None, csr)
            return TrackOutput(t, TRACKING, x_pred, None, smoothed, csr)
        self.misses = 0
        self.chain.append((t, candidate_vector(chosen)))
        self.chain = self.chain[-self.cfg.window :]
        ts = [k for k, _ in self.chain]
        self.lines = fit_lines(ts, np.array([x for _, x in self.chain]))
        return TrackOutput(t, TRACKING, x_pred, chosen, self.lines.at(t), csr)

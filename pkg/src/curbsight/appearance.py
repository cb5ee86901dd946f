"""Appearance check of curb candidates.

Seven square windows are cut along the candidate's frontal face in the
remapped image, described by a 288-value gradient orientation histogram and
scored by a linear classifier. A candidate survives when the majority of
its windows score positive.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import cv2
import numpy as np
from scipy import ndimage

from .errors import DegenerateFace, DimensionMismatch, EmptyClass, FaceOutsideImage, WrongBagSize
from .geometry import CddConfig
from .ipcm import WarpedImage, forward_v, remapped_line_rows
from .template import Candidate, project_edges

PATCH = 32
CELL = 8
BINS = 8
N_WINDOWS = 7
FEATURE_LEN = 288
MODEL_MAGIC = "curbsight-svm v1"
HOG_EPS = 1e-3
MIN_FACE_PX = 4.0
# window side as a multiple of the face height, so both face edges sit inside
WINDOW_SCALE = 1.5


def window_geometry(cand: Candidate, warped: WarpedImage, cdd: CddConfig, scale: float = None) -> np.ndarray:
    """(7, 3) array of window centre column, centre row and side, in raster pixels."""
    cfg = warped.cfg
    base, front, _ = project_edges(cand.state, cdd, cfg.rig)
    rows, cols = warped.shape
    c = (np.arange(1, N_WINDOWS + 1) / (N_WINDOWS + 1)) * (cols - 1)
    u_t, _ = warped.to_remapped(c, 0.0)
    rb = remapped_line_rows(base, u_t, cfg) - warped.v_origin
    rf = remapped_line_rows(front, u_t, cfg) - warped.v_origin
    side = rb - rf
    if np.any(side < MIN_FACE_PX):
        raise DegenerateFace(f"frontal face only {side.min():.1f} px tall")
    mid = 0.5 * (rb + rf)
    if np.any(mid < 0) or np.any(mid > rows - 1):
        raise FaceOutsideImage("frontal face leaves the remapped region")
    return np.column_stack([c, mid, side * (WINDOW_SCALE if scale is None else scale)])


def face_rows(state, cfg) -> Tuple[float, float]:
    """Remapped rows of the frontal face's top and bottom at the centre column."""
    rig = cfg.rig
    top = rig.cy + rig.fy * (rig.camera_height - state.height) / state.distance
    bottom = rig.cy + rig.fy * rig.camera_height / state.distance
    return forward_v(top, cfg), forward_v(bottom, cfg)


def face_overlap(s1, s2, cfg) -> float:
    """Intersection over union of two states' frontal faces in remapped rows."""
    a0, a1 = face_rows(s1, cfg)
    b0, b1 = face_rows(s2, cfg)
    inter = max(0.0, min(a1, b1) - max(a0, b0))
    union = max(a1, b1) - min(a0, b0)
    return inter / union if union > 0 else 0.0


def sample_windows(cand: Candidate, warped: WarpedImage, cdd: CddConfig, sigma: float = 0.8, scale: float = None) -> np.ndarray:
    """Seven 32x32 patches along the frontal face, shape (7, 32, 32), float."""
    geo = window_geometry(cand, warped, cdd, scale)
    img = np.asarray(warped.data, dtype=np.float32)
    grid = (np.arange(PATCH) + 0.5) / PATCH - 0.5
    g_r, g_c = np.meshgrid(grid, grid, indexing="ij")
    out = np.empty((N_WINDOWS, PATCH, PATCH), dtype=np.float64)
    for k, (cu, cv, side) in enumerate(geo):
        rr, cc = cv + side * g_r, cu + side * g_c
        if side > PATCH:
            # pre-filter to limit aliasing when shrinking
            s = 0.5 * side / PATCH
            y0, y1 = int(max(cv - side, 0)), int(min(cv + side + 2, img.shape[0]))
            x0, x1 = int(max(cu - side, 0)), int(min(cu + side + 2, img.shape[1]))
            sub = cv2.GaussianBlur(img[y0:y1, x0:x1], (0, 0), s)
            patch = ndimage.map_coordinates(sub, [rr - y0, cc - x0], order=1, mode="nearest")
        else:
            patch = ndimage.map_coordinates(img, [rr, cc], order=1, mode="nearest")
        out[k] = patch
    if sigma > 0:
        for k in range(N_WINDOWS):
            out[k] = cv2.GaussianBlur(out[k], (0, 0), sigma, borderType=cv2.BORDER_REPLICATE)
    return out


def hog_batch(patches: np.ndarray, eps: float = HOG_EPS) -> np.ndarray:
    """Descriptors of an (N, 32, 32) stack, shape (N, 288)."""
    p = np.asarray(patches, dtype=np.float64)
    if p.ndim == 2:
        p = p[None]
    if p.shape[1:] != (PATCH, PATCH):
        raise ValueError(f"patches must be {PATCH}x{PATCH}")
    n = p.shape[0]
    gx = np.zeros_like(p)
    gy = np.zeros_like(p)
    gx[:, :, 1:-1] = p[:, :, 2:] - p[:, :, :-2]
    gy[:, 1:-1, :] = p[:, 2:, :] - p[:, :-2, :]
    mag = np.hypot(gx, gy)
    ang = np.mod(np.arctan2(gy, gx), math.pi)
    b = np.minimum((ang / (math.pi / BINS)).astype(np.int64), BINS - 1)
    nc = PATCH // CELL
    cell_idx = (np.arange(PATCH) // CELL)
    flat = (cell_idx[:, None] * nc + cell_idx[None, :])[None] * BINS + b
    offs = (np.arange(n) * nc * nc * BINS)[:, None, None]
    hist = np.bincount((flat + offs).ravel(), weights=mag.ravel(), minlength=n * nc * nc * BINS)
    hist = hist.reshape(n, nc, nc, BINS)
    blocks = []
    for by in range(nc - 1):
        for bx in range(nc - 1):
            v = hist[:, by : by + 2, bx : bx + 2, :].reshape(n, -1)
            blocks.append(v / np.sqrt((v * v).sum(axis=1, keepdims=True) + eps**2))
    return np.concatenate(blocks, axis=1)


def hog(patch: np.ndarray) -> np.ndarray:
    return hog_batch(np.asarray(patch)[None])[0]


@dataclass(frozen=True)
class LinearModel:
    weights: np.ndarray = field(repr=False)
    bias: float

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if w.ndim != 1:
            raise ValueError("weights must be a vector")
        if not (np.all(np.isfinite(w)) and math.isfinite(self.bias)):
            raise ValueError("model parameters must be finite")
        object.__setattr__(self, "weights", w)

    def scores(self, F: np.ndarray) -> np.ndarray:
        F = np.atleast_2d(np.asarray(F, dtype=float))
        if F.shape[1] != self.weights.size:
            raise DimensionMismatch(f"feature length {F.shape[1]} != model length {self.weights.size}")
        return F @ self.weights + self.bias


def predict(model: LinearModel, f) -> Tuple[float, int]:
    """Score and label; a score of exactly zero is negative."""
    s = float(model.scores(f)[0])
    return s, 1 if s > 0 else -1


def train_with_history(positives, negatives, C: float = 0.5, epochs: int = 300, tol: float = 1e-4, seed: int = 0):
    """Hinge-loss linear classifier by dual coordinate descent.

    The bias is learnt as the weight of a constant feature. Returns the model
    and the dual objective after every epoch (non-increasing).
    """
    P = np.atleast_2d(np.asarray(positives, dtype=float))
    N = np.atleast_2d(np.asarray(negatives, dtype=float))
    if P.size == 0 or N.size == 0:
        raise EmptyClass("both classes need at least one sample")
    if P.shape[1] != N.shape[1]:
        raise DimensionMismatch("positive and negative features differ in length")
    X = np.vstack([P, N])
    X = np.hstack([X, np.ones((X.shape[0], 1))])
    y = np.concatenate([np.ones(len(P)), -np.ones(len(N))])
    n = X.shape[0]
    Qii = (X * X).sum(axis=1)
    alpha = np.zeros(n)
    w = np.zeros(X.shape[1])
    rng = np.random.default_rng(seed)
    history = []
    for _ in range(epochs):
        max_pg, min_pg = -np.inf, np.inf
        for i in rng.permutation(n):
            G = y[i] * (w @ X[i]) - 1.0
            a = alpha[i]
            if a == 0:
                pg = min(G, 0.0)
            elif a == C:
                pg = max(G, 0.0)
            else:
                pg = G
            max_pg, min_pg = max(max_pg, pg), min(min_pg, pg)
            if pg != 0 and Qii[i] > 0:
                alpha[i] = min(max(a - G / Qii[i], 0.0), C)
                w += (alpha[i] - a) * y[i] * X[i]
        history.append(0.5 * w @ w - alpha.sum())
        if max_pg - min_pg < tol:
            break
    return LinearModel(w[:-1].copy(), float(w[-1])), history


def train(positives, negatives, C: float = 0.5, epochs: int = 300, seed: int = 0) -> LinearModel:
    return train_with_history(positives, negatives, C=C, epochs=epochs, seed=seed)[0]


@dataclass(frozen=True)
class Bag:
    features: np.ndarray = field(repr=False)
    scores: np.ndarray

    def __post_init__(self):
        if len(self.features) != N_WINDOWS or len(self.scores) != N_WINDOWS:
            raise WrongBagSize(f"a bag holds exactly {N_WINDOWS} instances")

    @property
    def labels(self) -> np.ndarray:
        return np.where(np.asarray(self.scores) > 0, 1, -1)

    @property
    def mean_score(self) -> float:
        return float(np.mean(self.scores))


def bag_label(labels: Sequence[int]) -> int:
    labels = list(labels)
    if len(labels) != N_WINDOWS:
        raise WrongBagSize(f"a bag holds exactly {N_WINDOWS} instances, got {len(labels)}")
    return 1 if sum(1 for l in labels if l > 0) >= N_WINDOWS // 2 + 1 else -1


def classify_bag(bag: Bag, model: Optional[LinearModel] = None) -> int:
    """Majority vote over instance labels; rescored first when a model is given."""
    if model is not None:
        bag = Bag(bag.features, model.scores(bag.features))
    return bag_label(bag.labels)


def make_bag(cand: Candidate, warped: WarpedImage, cdd: CddConfig, model: LinearModel) -> Bag:
    F = hog_batch(sample_windows(cand, warped, cdd))
    return Bag(F, model.scores(F))


def filter_candidates(cands: Sequence[Candidate], model: LinearModel, warped: WarpedImage, cdd: CddConfig) -> List[Candidate]:
    """Candidates with a positive bag, each tagged with its mean window score."""
    kept = []
    for c in cands:
        try:
            bag = make_bag(c, warped, cdd, model)
        except (DegenerateFace, FaceOutsideImage):
            continue
        if bag_label(bag.labels) > 0:
            kept.append(c.with_score(bag.mean_score))
    return kept


def save_model(model: LinearModel, path) -> None:
    lines = [MODEL_MAGIC, format(model.bias, ".17g")] + [format(float(v), ".17g") for v in model.weights]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_model(path) -> LinearModel:
    with open(path) as fh:
        lines = [l.strip() for l in fh if l.strip()]
    if not lines or lines[0] != MODEL_MAGIC:
        raise ValueError(f"{path}: not a {MODEL_MAGIC!r} model file")
    w = np.array([float(v) for v in lines[2:]])
    if w.size != FEATURE_LEN:
        raise DimensionMismatch(f"{path}: expected {FEATURE_LEN} weights, found {w.size}")
    return LinearModel(w, float(lines[1]))

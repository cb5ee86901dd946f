"""Synthetic road scenes with exact ground truth.

Each pixel's viewing ray is classified against the road plane, the curb's
frontal face, its top face and the raised region behind it. Pixels whose
label differs from a neighbour are re-shaded from 16 sub-samples.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field, replace
from typing import Iterable, List, Optional, Sequence, Tuple

import cv2
import numpy as np

from .errors import StateOutsideFrame
from .geometry import CameraRig, CddConfig, CurbState, Line2
from .template import project_edges

ROAD, FACE, TOP, BEYOND, SKY = 0, 1, 2, 3, 4
FPS = 21.0


@dataclass(frozen=True)
class Distractor:
    """Texture on the road plane.

    ``seam``: a dark strip of ``width`` cm along the ground line
    z = z0 - x*tan(angle). ``patch``: a rectangle [x0, x1] x [z0, z0 + width]
    offset in brightness by ``delta``.
    """

    kind: str
    z0: float
    width: float
    delta: float
    angle: float = 0.0
    x0: float = 0.0
    x1: float = 0.0

    def __post_init__(self):
        if self.kind not in ("seam", "patch"):
            raise ValueError(f"unknown distractor kind {self.kind!r}")
        if not self.width > 0:
            raise ValueError("distractor width must be positive")


@dataclass(frozen=True)
class Photometry:
    road: float = 70.0
    face: float = 140.0
    top: float = 195.0
    beyond: float = 120.0
    sky: float = 160.0
    noise_sigma: float = 4.0
    texture: float = 4.0
    shadow: Optional[str] = None  # "band", "gradient" or None
    shadow_strength: float = 0.0
    shadow_extent: float = 0.35
    min_contrast: float = 0.0
    distractors: Tuple[Distractor, ...] = ()

    def __post_init__(self):
        for name in ("road", "face", "top", "beyond", "sky"):
            val = getattr(self, name)
            if not 0 <= val <= 255:
                raise ValueError(f"{name} intensity {val} outside [0, 255]")
        if self.noise_sigma < 0 or self.texture < 0:
            raise ValueError("noise and texture amplitudes must be non-negative")
        if self.shadow not in (None, "band", "gradient"):
            raise ValueError(f"unknown shadow model {self.shadow!r}")
        if self.min_contrast > 0:
            pairs = [(self.road, self.face), (self.face, self.top), (self.top, self.beyond)]
            worst = min(abs(p - q) for p, q in pairs)
            if worst < self.min_contrast:
                raise ValueError(f"adjacent-surface contrast {worst} below {self.min_contrast}")

    @classmethod
    def preset(cls, name: str, **kw) -> "Photometry":
        if name == "clear":
            base = cls(shadow="band", shadow_strength=25.0, shadow_extent=0.35, min_contrast=40.0)
        elif name == "shadow":
            base = cls(road=60.0, face=150.0, top=190.0, beyond=110.0, shadow="gradient", shadow_strength=35.0, min_contrast=40.0)
        else:
            raise ValueError(f"unknown photometry preset {name!r}")
        return replace(base, **kw)


PRESETS = ("clear", "shadow")


@dataclass(frozen=True)
class GroundTruthRecord:
    frame: int
    state: Optional[CurbState]
    edges: Optional[Tuple[Line2, Line2, Line2]]
    present: bool
    partial: bool

    def row(self) -> list:
        if self.state is None:
            return [self.frame, 0, 0] + ["nan"] * 10
        s = self.state
        vals = [self.frame, int(self.present), int(self.partial), s.distance, s.yaw, s.height, s.depth]
        for e in self.edges:
            vals += [e.a, e.b]
        return [_fmt(v) for v in vals]


GT_HEADER = ["frame", "present", "partial", "D_cm", "theta_rad", "H_cm", "E_cm", "a1", "b1", "a2", "b2", "a3", "b3"]


def _fmt(v):
    return repr(float(v)) if isinstance(v, float) else v


def _rays(rig: CameraRig, u, v):
    return (u - rig.cx) / rig.fx, (v - rig.cy) / rig.fy


def _classify(state: Optional[CurbState], rig: CameraRig, dx, dy):
    """Surface label, plus hit coordinates (x, z, height-above-road) for shading."""
    H_C = rig.camera_height
    label = np.full(dx.shape, SKY, dtype=np.int8)
    below = dy > 1e-9
    t_g = np.where(below, H_C / np.where(below, dy, 1.0), np.inf)
    x = t_g * dx
    z = t_g.copy()
    elev = np.zeros(dx.shape, dtype=float)
    if state is None:
        label[below] = ROAD
        return label, x, z, elev
    D, th, H, E = state.distance, state.yaw, state.height, state.depth
    c, tn = math.cos(th), math.tan(th)
    q_g = (z + x * tn - D) * c
    road = below & (q_g < 0)
    label[road] = ROAD
    # raised plane
    top_y = H_C - H
    t_r = np.where(below, top_y / np.where(below, dy, 1.0), np.inf)
    q_r = (t_r * (1 + dx * tn) - D) * c
    raised = below & ~road & (q_r >= 0)
    label[raised & (q_r <= E)] = TOP
    label[raised & (q_r > E)] = BEYOND
    face = below & ~road & ~raised
    label[face] = FACE
    # hit points
    x = np.where(raised, t_r * dx, x)
    z = np.where(raised, t_r, z)
    denom = 1 + dx * tn
    t_f = np.where(face, D / np.where(face & (np.abs(denom) > 1e-12), denom, 1.0), 0.0)
    elev = np.where(face, H_C - t_f * dy, elev)
    elev = np.where(raised, H, elev)
    # faces seen from beyond the horizon side are already excluded by ``below``
    return label, x, z, elev


def _distractor_ids(ph: Photometry, label, x, z):
    ids = np.zeros(label.shape, dtype=np.int16)
    offset = np.zeros(label.shape, dtype=float)
    on_road = label == ROAD
    for k, d in enumerate(ph.distractors, start=1):
        if d.kind == "seam":
            s = (z + x * math.tan(d.angle) - d.z0) * math.cos(d.angle)
            hit = on_road & (s >= 0) & (s <= d.width)
        else:
            hit = on_road & (x >= d.x0) & (x <= d.x1) & (z >= d.z0) & (z <= d.z0 + d.width)
        ids[hit] = k
        offset[hit] += d.delta
    return ids, offset


def _shade(state, rig, ph: Photometry, u, v):
    dx, dy = _rays(rig, u, v)
    label, x, z, elev = _classify(state, rig, dx, dy)
    base = np.array([ph.road, ph.face, ph.top, ph.beyond, ph.sky])[label]
    if state is not None and ph.shadow is not None:
        f = np.clip(elev / state.height, 0, 1)
        is_face = label == FACE
        if ph.shadow == "band":
            base = base - ph.shadow_strength * (is_face & (f < ph.shadow_extent))
        else:
            base = base - ph.shadow_strength * (1 - f) * is_face
    ids, off = _distractor_ids(ph, label, x, z)
    return base + off, label * 64 + ids


def _texture(shape, amplitude: float, rng: np.random.Generator):
    if amplitude <= 0:
        return 0.0
    h, w = shape
    coarse = rng.standard_normal((max(h // 16, 2), max(w // 16, 2))).astype(np.float32)
    return amplitude * cv2.resize(coarse, (w, h), interpolation=cv2.INTER_CUBIC)


def _center_labels(state: Optional[CurbState], rig: CameraRig, r0: int):
    """Pixel-centre labels from the projected edge lines (exact for this geometry)."""
    H, W = rig.height, rig.width
    rows = np.arange(r0, H, dtype=np.float32)[:, None]
    label = np.full((H - r0, W), ROAD, dtype=np.int8)
    if state is None:
        return label
    cols = np.arange(W, dtype=np.float64)
    # any half-width gives the same lines; a wide one keeps the two points apart
    e = project_edges(state, CddConfig(1.0, 2.0, 100.0), rig)
    v_base, v_front, v_rear = (l.v_at(cols).astype(np.float32)[None, :] for l in e)
    label[rows <= v_base] = FACE
    label[rows <= v_front] = TOP
    label[rows <= v_rear] = BEYOND
    return label


def _center_shade(state, rig, ph: Photometry, r0: int):
    label = _center_labels(state, rig, r0)
    val = np.array([ph.road, ph.face, ph.top, ph.beyond, ph.sky], dtype=np.float32)[label]
    ids = label.astype(np.int16) * 64
    if state is not None and ph.shadow is not None:
        fr, fc = np.nonzero(label == FACE)
        if fr.size:
            dx, dy = _rays(rig, fc.astype(float), fr + float(r0))
            _, _, _, elev = _classify(state, rig, dx, dy)
            f = np.clip(elev / state.height, 0, 1)
            if ph.shadow == "band":
                val[fr, fc] -= ph.shadow_strength * (f < ph.shadow_extent)
            else:
                val[fr, fc] -= ph.shadow_strength * (1 - f)
    if ph.distractors:
        rr, rc = np.nonzero(label == ROAD)
        dx, dy = _rays(rig, rc.astype(float), rr + float(r0))
        z = rig.camera_height / dy
        d_ids, off = _distractor_ids(ph, np.zeros(rr.size, dtype=np.int8), z * dx, z)
        val[rr, rc] += off
        ids[rr, rc] += d_ids
    return val, ids


def _subsample_offsets(n: int) -> np.ndarray:
    """n*n sub-pixel offsets on an n-rooks pattern.

    Every sample has its own row and column, so a near-horizontal or
    near-vertical edge is resolved in 1/n^2 px steps instead of 1/n.
    """
    m = n * n
    k = np.arange(m)
    # a stride coprime with m spreads the columns like a rotated grid
    stride = next(s for s in range(n + 1, m) if math.gcd(s, m) == 1) if m > 2 else 1
    return np.column_stack([((k * stride) % m + 0.5) / m - 0.5, (k + 0.5) / m - 0.5])


def render_raster(state: Optional[CurbState], rig: CameraRig, ph: Photometry, seed: int = 0, supersample: int = 4) -> np.ndarray:
    """Noise-free shading plus texture and noise, quantised to 8 bits."""
    rng = np.random.default_rng(seed)
    H, W = rig.height, rig.width
    img = np.full((H, W), ph.sky, dtype=np.float32)
    r0 = int(math.floor(rig.cy)) + 1  # everything above is sky
    val, lab = _center_shade(state, rig, ph, r0)
    edge = np.zeros(lab.shape, dtype=bool)
    dh = lab[:, 1:] != lab[:, :-1]
    dv = lab[1:, :] != lab[:-1, :]
    edge[:, 1:] |= dh
    edge[:, :-1] |= dh
    edge[1:, :] |= dv
    edge[:-1, :] |= dv
    if supersample > 1 and edge.any():
        er, ec = np.nonzero(edge)
        uu, vv = ec.astype(float), er + float(r0)
        acc = np.zeros(uu.size)
        offs = _subsample_offsets(supersample)
        for ox, oy in offs:
            acc += _shade(state, rig, ph, uu + ox, vv + oy)[0]
        val[er, ec] = acc / len(offs)
    img[r0:, :] = val
    img += _texture((H, W), ph.texture, rng)
    if ph.noise_sigma > 0:
        img += ph.noise_sigma * rng.standard_normal((H, W), dtype=np.float32)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def render_frame(
    state: Optional[CurbState],
    rig: CameraRig,
    photometry: Photometry,
    seed: int = 0,
    cdd: Optional[CddConfig] = None,
    frame: int = 0,
) -> Tuple[np.ndarray, GroundTruthRecord]:
    cdd = cdd or CddConfig.from_rig(rig)
    raster = render_raster(state, rig, photometry, seed)
    if state is None:
        return raster, GroundTruthRecord(frame, None, None, False, False)
    edges = project_edges(state, cdd, rig)
    last_row = rig.height - 1
    rows_base = edges[0].v_at([0.0, rig.width - 1.0])
    rows_rear = edges[2].v_at([0.0, rig.width - 1.0])
    partial = bool(np.max(rows_base) > last_row)
    visible = bool(np.min(rows_rear) < last_row)
    rec = GroundTruthRecord(frame, state, edges, visible, partial)
    if not visible:
        raise StateOutsideFrame("no part of the curb is inside the frame", raster, rec)
    return raster, rec


def approach_trajectory(
    D_start: float = 500.0,
    D_end: float = 100.0,
    speed: float = 80.0,
    fps: float = FPS,
    yaw: float = 0.0,
    yaw_rate: float = 0.0,
    height: float = 15.0,
    depth: float = 20.0,
    jitter: float = 0.0,
    seed: int = 0,
) -> List[CurbState]:
    """Constant-speed approach; ``speed`` in cm/s, ``yaw_rate`` in rad/s."""
    if speed <= 0 or fps <= 0:
        raise ValueError("speed and fps must be positive")
    rng = np.random.default_rng(seed)
    step = speed / fps
    n = int(math.floor((D_start - D_end) / step + 1e-9)) + 1
    out = []
    for k in range(n):
        D = D_start - k * step
        if jitter:
            D += rng.normal(0.0, jitter)
        out.append(CurbState(D, yaw + yaw_rate * k / fps, height, depth))
    return out


def frame_seed(seed: int, k: int) -> int:
    """Render seed of frame ``k`` of a sequence rendered with ``seed``."""
    return seed * 100003 + k


def render_sequence(
    trajectory: Sequence[Optional[CurbState]],
    rig: CameraRig,
    photometry: Photometry,
    seed: int = 0,
    cdd: Optional[CddConfig] = None,
):
    """Yield ``(raster, record)`` per frame; frame k uses seed ``seed * 100003 + k``."""
    cdd = cdd or CddConfig.from_rig(rig)
    for k, state in enumerate(trajectory):
        try:
            yield render_frame(state, rig, photometry, frame_seed(seed, k), cdd, frame=k)
        except StateOutsideFrame as exc:
            yield exc.raster, exc.record


def random_distractors(rng: np.random.Generator, cdd: CddConfig, n_seams: int = 1, n_patches: int = 1, z_range=None) -> Tuple[Distractor, ...]:
    lo, hi = z_range or (cdd.D_min + 20, cdd.D_max)
    out = []
    for _ in range(n_seams):
        out.append(
            Distractor("seam", rng.uniform(lo, hi), rng.uniform(2.0, 5.0), -rng.uniform(35, 60), angle=rng.uniform(-0.3, 0.3))
        )
    for _ in range(n_patches):
        x0 = rng.uniform(-cdd.W_max, 0.3 * cdd.W_max)
        out.append(
            Distractor(
                "patch",
                rng.uniform(lo, hi),
                rng.uniform(15, 60),
                rng.choice([-1, 1]) * rng.uniform(30, 60),
                x0=x0,
                x1=x0 + rng.uniform(0.3, 0.9) * cdd.W_max,
            )
        )
    return tuple(out)


def random_photometry(rng: np.random.Generator, preset: Optional[str] = None, jitter: float = 12.0, **kw) -> Photometry:
    """A preset with its surface intensities shuffled by up to ``jitter`` levels."""
    name = preset or PRESETS[int(rng.integers(len(PRESETS)))]
    ph = Photometry.preset(name, **kw)
    changes = {k: float(np.clip(getattr(ph, k) + rng.uniform(-jitter, jitter), 0, 255)) for k in ("road", "face", "top", "beyond")}
    try:
        return replace(ph, **changes)
    except ValueError:
        return ph


def random_state(rng: np.random.Generator, cdd: CddConfig, D_range=None) -> CurbState:
    lo, hi = D_range or (cdd.D_min + 10, cdd.D_max - 20)
    return CurbState(rng.uniform(lo, hi), rng.uniform(-0.15, 0.15), rng.uniform(8, 22), rng.uniform(12, 35))


# ---- file formats


def write_pgm(path, raster: np.ndarray, comment: Optional[str] = None) -> None:
    img = np.ascontiguousarray(raster, dtype=np.uint8)
    if img.ndim != 2:
        raise ValueError("expected a 2D raster")
    h, w = img.shape
    head = "P5\n"
    if comment:
        head += "".join(f"# {line}\n" for line in comment.splitlines())
    head += f"{w} {h}\n255\n"
    with open(path, "wb") as fh:
        fh.write(head.encode("ascii"))
        fh.write(img.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(b"P5"):
        raise ValueError(f"{path}: not a binary graymap")
    fields, pos = [], 2
    while len(fields) < 3:
        while data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end : end + 1].isspace():
            end += 1
        fields.append(int(data[pos:end]))
        pos = end
    pos += 1  # single whitespace after maxval
    w, h, maxval = fields
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit graymaps are supported")
    arr = np.frombuffer(data, dtype=np.uint8, count=w * h, offset=pos)
    return arr.reshape(h, w).copy()


def write_gt_csv(path, records: Iterable[GroundTruthRecord]) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(GT_HEADER)
        for r in records:
            wr.writerow(r.row())


def read_gt_csv(path) -> List[GroundTruthRecord]:
    out = []
    with open(path, newline="") as fh:
        rd = csv.DictReader(fh)
        if rd.fieldnames != GT_HEADER:
            raise ValueError(f"{path}: unexpected ground-truth header")
        for row in rd:
            k = int(row["frame"])
            if row["D_cm"] in ("nan", ""):
                out.append(GroundTruthRecord(k, None, None, False, False))
                continue
            s = CurbState(float(row["D_cm"]), float(row["theta_rad"]), float(row["H_cm"]), float(row["E_cm"]))
            edges = tuple(Line2(float(row[f"a{i}"]), float(row[f"b{i}"])) for i in (1, 2, 3))
            out.append(GroundTruthRecord(k, s, edges, bool(int(row["present"])), bool(int(row["partial"]))))
    return out


def frame_name(k: int) -> str:
    return f"frame_{k:05d}.pgm"


def list_frames(directory) -> List[str]:
    names = sorted(n for n in os.listdir(directory) if n.endswith(".pgm"))
    return [os.path.join(directory, n) for n in names]


# ---- training corpus for the appearance classifier


@dataclass(frozen=True)
class Corpus:
    patches: np.ndarray = field(repr=False)  # (N, 32, 32)
    labels: np.ndarray  # +1 / -1
    seeds: Tuple[int, ...]

    def split(self) -> Tuple[np.ndarray, np.ndarray]:
        return self.patches[self.labels > 0], self.patches[self.labels < 0]


def _tracking_csr(D: float, cdd: CddConfig):
    from .tracker import update_csr

    return update_csr(D, cdd)


def _window_set(cand_states, warped, cdd):
    from .appearance import sample_windows
    from .errors import DegenerateFace, FaceOutsideImage
    from .template import TRIPLET, Candidate

    out = []
    for s in cand_states:
        try:
            out.append(sample_windows(Candidate(s, 0.0, TRIPLET), warped, cdd))
        except (DegenerateFace, FaceOutsideImage, ValueError):
            continue
    return out


NEG_OVERLAP = 0.4
POS_OVERLAP = 0.8


def _misfit_distance(state: CurbState, rng: np.random.Generator, sign: int, cfg) -> float:
    """Distance offset of 20-50 cm, pushed further until the face overlap drops below NEG_OVERLAP."""
    from .appearance import face_overlap

    d = rng.uniform(20.0, 50.0)
    while face_overlap(state, replace(state, distance=state.distance + sign * d), cfg) >= NEG_OVERLAP:
        d *= 1.15
    return state.distance + sign * d


def frame_windows(raster: np.ndarray, state: Optional[CurbState], rng: np.random.Generator, pipe):
    """Positive and negative windows from one frame with known truth.

    Positives sit on the true face (with sub-centimetre jitter). Negatives
    come from states moved off the face in distance, from fitted candidates
    whose face barely overlaps the true one, and from fits on curb-free
    roads. Candidates in between are left out as ambiguous.
    """
    from .appearance import face_overlap
    from .pipeline import detect_frame

    cdd = pipe.cdd
    pos, neg = [], []
    csrs = [cdd.full_csr()]
    if state is not None:
        csrs.append(_tracking_csr(state.distance, cdd))
    for csr in csrs:
        res = detect_frame(raster, csr, pipe, None)
        if res.warped is None:
            continue
        good, wrong = [], []
        for c in res.candidates:
            iou = 0.0 if state is None else face_overlap(c.state, state, pipe.remap)
            if iou < NEG_OVERLAP:
                wrong.append(c.state)
            elif iou >= POS_OVERLAP:
                good.append(c.state)
        neg += _window_set(wrong, res.warped, cdd)
        if state is None:
            fakes = [random_state(rng, cdd) for _ in range(2)]
            neg += _window_set(fakes, res.warped, cdd)
            continue
        jit = [
            CurbState(
                state.distance + rng.normal(0, 0.7),
                state.yaw + rng.normal(0, 0.003),
                max(state.height + rng.normal(0, 0.3), 1.0),
                state.depth,
            )
            for _ in range(2)
        ]
        pos += _window_set([state] + jit + good[:2], res.warped, cdd)
        offs = [_misfit_distance(state, rng, sgn, pipe.remap) for sgn in (-1, 1)]
        bad = [replace(state, distance=d) for d in offs if cdd.D_min < d < cdd.D_max]
        neg += _window_set(bad, res.warped, cdd)
    return pos, neg


def scene_windows(rng: np.random.Generator, pipe, seed: int, curb: bool, distractors: bool = True):
    """Windows from one random scene (see ``frame_windows``)."""
    ph = random_photometry(rng)
    if distractors:
        ph = replace(ph, distractors=random_distractors(rng, pipe.cdd, int(rng.integers(0, 3)), int(rng.integers(0, 2))))
    state = random_state(rng, pipe.cdd) if curb else None
    return frame_windows(render_raster(state, pipe.rig, ph, seed), state, rng, pipe)


def corpus_from_windows(pos, neg, seeds, rng: np.random.Generator, balance: bool = True) -> Corpus:
    P = np.concatenate(pos).reshape(-1, 32, 32) if pos else np.zeros((0, 32, 32))
    N = np.concatenate(neg).reshape(-1, 32, 32) if neg else np.zeros((0, 32, 32))
    if balance and len(P) and len(N):
        m = min(len(P), len(N))
        P = P[np.sort(rng.choice(len(P), m, replace=False))]
        N = N[np.sort(rng.choice(len(N), m, replace=False))]
    patches = np.concatenate([P, N])
    labels = np.concatenate([np.ones(len(P), dtype=int), -np.ones(len(N), dtype=int)])
    return Corpus(patches, labels, tuple(seeds))


def make_training_corpus(n_scenes: int, pipe=None, seed: int = 0, balance: bool = True) -> Corpus:
    """Window patches from ``n_scenes`` curb and ``n_scenes`` curb-free renders.

    Scene ``k`` of the curb half uses render seed ``seed * 1_000_003 + 2k``
    and the curb-free half ``... + 2k + 1``, so disjoint ``seed`` values give
    disjoint scenes.
    """
    from .pipeline import Pipeline

    pipe = pipe or Pipeline.default()
    rng = np.random.default_rng(seed)
    pos, neg, seeds = [], [], []
    for k in range(n_scenes):
        for curb in (True, False):
            s = seed * 1_000_003 + 2 * k + (0 if curb else 1)
            p, n = scene_windows(rng, pipe, s, curb)
            pos += p
            neg += n
            seeds.append(s)
    return corpus_from_windows(pos, neg, seeds, rng, balance)

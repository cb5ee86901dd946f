"""Curb edge line extraction on the remapped searching region."""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass
from typing import Optional, Tuple

import cv2
import numpy as np
from scipy import special

from .errors import DegenerateFit, EmptyImage, NegativeDiscriminant
from .geometry import CameraRig, CddConfig, Csr, Line2, csr_to_image
from .ipcm import RemapConfig, WarpedImage, inverse_map, map_line_to_original, warp_csr


@dataclass(frozen=True)
class LineSet:
    lines: Tuple[Line2, ...] = ()
    votes: Tuple[float, ...] = ()

    def __post_init__(self):
        if len(self.lines) != len(self.votes):
            raise ValueError("lines and votes differ in length")

    def __len__(self):
        return len(self.lines)

    def __iter__(self):
        return iter(self.lines)

    def by_votes(self) -> "LineSet":
        order = sorted(range(len(self)), key=lambda i: -self.votes[i])
        return LineSet(tuple(self.lines[i] for i in order), tuple(self.votes[i] for i in order))

    def by_intercept(self) -> "LineSet":
        order = sorted(range(len(self)), key=lambda i: -self.lines[i].b)
        return LineSet(tuple(self.lines[i] for i in order), tuple(self.votes[i] for i in order))


@dataclass(frozen=True)
class EdgeParams:
    low_thresh: float = 20.0
    high_thresh: float = 50.0
    # smoothing during the remap and after it, both in remapped pixels
    prewarp_sigma: float = 1.0
    blur_sigma: float = 0.7
    angle_band_deg: float = 20.0
    angle_step_deg: float = 0.25
    min_votes_frac: float = 0.5
    max_lines: int = 6
    nms_rho: float = 2.0
    nms_theta_deg: float = 2.0
    tol_a: float = 0.02
    tol_b: float = 3.0
    refine: bool = True
    # width of the gradient peak; None derives it from the smoothing
    peak_sigma: Optional[float] = None
    refine_band: float = 2.0

    def __post_init__(self):
        if not 0 <= self.low_thresh <= self.high_thresh:
            raise ValueError("need 0 <= low_thresh <= high_thresh")
        if self.prewarp_sigma < 0 or self.blur_sigma < 0:
            raise ValueError("smoothing widths must be non-negative")
        if self.max_lines < 1 or not 0 < self.min_votes_frac <= 1:
            raise ValueError("max_lines must be positive and min_votes_frac in (0, 1]")

    @property
    def peak_width(self) -> float:
        """Gradient peak width of a sharp step after both blurs and the 3-tap derivative."""
        if self.peak_sigma is not None:
            return self.peak_sigma
        return math.sqrt(self.prewarp_sigma**2 + self.blur_sigma**2 + 1.0 / 3.0)


def _blur_u8(raster: np.ndarray, sigma: float) -> np.ndarray:
    img = np.asarray(raster, dtype=np.float32)
    if sigma > 0:
        img = cv2.GaussianBlur(img, (0, 0), sigma, borderType=cv2.BORDER_REPLICATE)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def detect_edges(raster, low_thresh: float = 20.0, high_thresh: float = 50.0, blur_sigma: float = 1.2) -> np.ndarray:
    """Canny edges (3x3 Sobel, non-maximum suppression, hysteresis) as a bool map."""
    img = np.asarray(raster)
    if img.size == 0:
        raise EmptyImage("empty raster")
    if not 0 < low_thresh < high_thresh:
        raise ValueError("need 0 < low_thresh < high_thresh")
    edges = cv2.Canny(_blur_u8(img, blur_sigma), low_thresh, high_thresh, apertureSize=3)
    return edges > 0


def vote_lines(
    edges: np.ndarray,
    angle_band: float = math.radians(20.0),
    max_lines: int = 6,
    angle_step: float = math.radians(0.25),
    min_votes: Optional[float] = None,
    nms_rho: float = 2.0,
    nms_theta: float = math.radians(2.0),
) -> LineSet:
    """Hough voting for near-horizontal lines in raster coordinates.

    Lines are parameterised by the normal angle theta (pi/2 is horizontal)
    and offset rho = u*cos(theta) + v*sin(theta), with 1 px offset bins.
    Peaks are taken greedily with a rectangular suppression window.
    """
    if not 0 < angle_band < math.pi / 2:
        raise ValueError("angle band must lie inside (0, pi/2)")
    rows, cols = edges.shape
    if min_votes is None:
        min_votes = 0.5 * cols
    vs, us = np.nonzero(edges)
    if vs.size == 0 or max_lines <= 0:
        return LineSet()
    n_half = int(math.floor(angle_band / angle_step + 1e-9))
    thetas = math.pi / 2 + angle_step * np.arange(-n_half, n_half + 1)
    cos_t, sin_t = np.cos(thetas), np.sin(thetas)
    rho_max = int(math.ceil(math.hypot(rows, cols))) + 1
    rho = np.rint(us[:, None] * cos_t[None, :] + vs[:, None] * sin_t[None, :]).astype(np.int64)
    n_rho = 2 * rho_max + 1
    idx = np.arange(thetas.size)[None, :] * n_rho + (rho + rho_max)
    acc = np.bincount(idx.ravel(), minlength=thetas.size * n_rho).reshape(thetas.size, n_rho).astype(float)

    dt = max(int(round(nms_theta / angle_step)), 0)
    dr = max(int(round(nms_rho)), 0)
    lines, votes = [], []
    while len(lines) < max_lines:
        k = int(np.argmax(acc))
        ti, ri = divmod(k, n_rho)
        score = acc[ti, ri]
        if score < min_votes or score <= 0:
            break
        th, r = thetas[ti], ri - rho_max
        lines.append(Line2(-math.cos(th) / math.sin(th), r / math.sin(th)))
        votes.append(float(score))
        acc[max(ti - dt, 0) : ti + dt + 1, max(ri - dr, 0) : ri + dr + 1] = 0
    return LineSet(tuple(lines), tuple(votes))


def cluster_lines(ls: LineSet, tol_a: float = 0.02, tol_b: float = 3.0) -> LineSet:
    """Merge lines closer than the tolerances in (slope, intercept) space.

    Single linkage; every cluster becomes the mean of its members with the
    votes summed. Linking is repeated on the cluster means until no two
    means are within tolerance, so the result is a fixed point.
    """
    n = len(ls)
    if n == 0:
        return LineSet()
    a = np.array([l.a for l in ls.lines])
    b = np.array([l.b for l in ls.lines])
    w = np.array(ls.votes, dtype=float)

    def find(parent, i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    pa, pb = a, b
    groups = [[i] for i in range(n)]
    while True:
        m = len(groups)
        parent = list(range(m))
        merged = False
        for i in range(m):
            for j in range(i + 1, m):
                if abs(pa[i] - pa[j]) < tol_a and abs(pb[i] - pb[j]) < tol_b:
                    ri, rj = find(parent, i), find(parent, j)
                    if ri != rj:
                        parent[rj] = ri
                        merged = True
        if not merged:
            break
        roots = {}
        for i in range(m):
            roots.setdefault(find(parent, i), []).extend(groups[i])
        groups = list(roots.values())
        pa = np.array([a[g].mean() for g in groups])
        pb = np.array([b[g].mean() for g in groups])
    out_lines = tuple(Line2(float(a[g].mean()), float(b[g].mean())) for g in groups)
    out_votes = tuple(float(w[g].sum()) for g in groups)
    return LineSet(out_lines, out_votes).by_votes()


def _raster_line_to_remapped(line: Line2, warped: WarpedImage) -> Line2:
    # row = a*col + b  ->  v_t - v0 = a*(u_t - u0) + b
    return Line2(line.a, line.b + warped.v_origin - line.a * warped.u_origin)


@functools.lru_cache(maxsize=8)
def _peak_projectors(sigma: float, half: int, n_grid: int):
    """Offsets and, per offset, the residual projector of the peak-plus-background basis."""
    ks = np.arange(-half, half + 1, dtype=float)
    ds = np.linspace(-0.75, 0.75, n_grid)
    mats = []
    for d in ds:
        A = np.column_stack([np.exp(-((ks - d) ** 2) / (2 * sigma * sigma)), np.ones_like(ks), special.ndtr((ks - d) / sigma)])
        mats.append(np.eye(ks.size) - A @ np.linalg.pinv(A))
    return ds, np.stack(mats)


def _subpixel_rows(grad: np.ndarray, rows: np.ndarray, cols: np.ndarray, sigma: float = 1.2, half: int = 2, n_grid: int = 41) -> np.ndarray:
    """Sub-pixel peak of the gradient magnitude along the row axis.

    Each column profile over ``half`` rows either side is fitted by a
    Gaussian peak of width ``sigma`` on a background made of a constant and
    a smoothed step at the same offset. The step absorbs the gradient of
    shading that is present on one side of the edge only,
    which would otherwise pull the peak towards that side. The offset is
    found on a grid and refined by a parabola through the residuals.
    """
    h = grad.shape[0]
    r = np.asarray(rows, dtype=np.int64)
    c = np.asarray(cols, dtype=np.int64)
    out = r.astype(float)
    ok = (r >= half) & (r < h - half)
    if not ok.any():
        return out
    rr, cc = r[ok], c[ok]
    ks = np.arange(-half, half + 1)
    P = grad[rr[:, None] + ks[None, :], cc[:, None]].astype(float)
    ds, mats = _peak_projectors(float(sigma), int(half), int(n_grid))
    R = np.einsum("nk,gjk->ngj", P, mats)
    res = (R * R).sum(axis=2)
    j = np.clip(res.argmin(axis=1), 1, n_grid - 2)
    idx = np.arange(j.size)
    y0, y1, y2 = res[idx, j - 1], res[idx, j], res[idx, j + 1]
    den = y0 - 2 * y1 + y2
    with np.errstate(divide="ignore", invalid="ignore"):
        frac = np.where(den > 0, 0.5 * (y0 - y2) / den, 0.0)
    out[ok] = rr + ds[j] + np.clip(frac, -1.0, 1.0) * (ds[1] - ds[0])
    return out


def _refine_line(line_rc: Line2, edge_rc: Tuple[np.ndarray, np.ndarray], sub_rows: np.ndarray, warped: WarpedImage, band: float, min_support: int) -> Optional[Line2]:
    """Least-squares line in original space through the edge pixels near a Hough line."""
    rows, cols = edge_rc
    near = np.abs(rows - (line_rc.a * cols + line_rc.b)) <= band
    if near.sum() < min_support:
        return None
    ut, vt = warped.to_remapped(cols[near], sub_rows[near])
    try:
        u, v = inverse_map(ut, vt, warped.cfg)
    except NegativeDiscriminant:
        return None
    keep = np.ones(u.size, dtype=bool)
    coef = None
    for _ in range(3):
        if keep.sum() < min_support:
            return None
        coef = np.polyfit(u[keep], v[keep], 1)
        res = v - np.polyval(coef, u)
        # scale of one remapped row in original pixels at each point
        scale = (v - warped.cfg.rig.cy) / warped.cfg.y0
        new_keep = np.abs(res) <= 1.5 * scale + 1e-9
        if np.array_equal(new_keep, keep):
            break
        keep = new_keep
    try:
        return Line2(float(coef[0]), float(coef[1]))
    except ValueError:
        return None


def extract_lines(
    frame: np.ndarray,
    csr: Csr,
    rig: CameraRig,
    cdd: CddConfig,
    remap: RemapConfig,
    params: EdgeParams = EdgeParams(),
    debug: Optional[dict] = None,
) -> LineSet:
    """Candidate curb edge lines in original image space, lowest line first."""
    region = csr_to_image(csr, rig, cdd)
    warped = warp_csr(frame, region, remap, cdd, params.prewarp_sigma)
    return extract_lines_warped(warped, params, debug)


def extract_lines_warped(warped: WarpedImage, params: EdgeParams = EdgeParams(), debug: Optional[dict] = None) -> LineSet:
    """Lines of a remapped region, which should be a warp made with ``params.prewarp_sigma``."""
    blurred = np.asarray(warped.data, dtype=np.float32)
    if params.blur_sigma > 0:
        blurred = cv2.GaussianBlur(blurred, (0, 0), params.blur_sigma, borderType=cv2.BORDER_REPLICATE)
    edges = detect_edges(blurred, params.low_thresh, params.high_thresh, blur_sigma=0.0)
    rows, cols = edges.shape
    hough = vote_lines(
        edges,
        angle_band=math.radians(params.angle_band_deg),
        max_lines=params.max_lines,
        angle_step=math.radians(params.angle_step_deg),
        min_votes=params.min_votes_frac * cols,
        nms_rho=params.nms_rho,
        nms_theta=math.radians(params.nms_theta_deg),
    )
    if debug is not None:
        debug.update(warped=warped, edges=edges, hough=hough)

    er, ec = np.nonzero(edges)
    if params.refine and er.size:
        gy = cv2.Sobel(blurred, cv2.CV_32F, 0, 1, ksize=3)
        gx = cv2.Sobel(blurred, cv2.CV_32F, 1, 0, ksize=3)
        sub_rows = _subpixel_rows(np.hypot(gx, gy), er, ec, params.peak_width)
    else:
        sub_rows = er.astype(float)

    lines, votes = [], []
    u_range = warped.u_range
    for line_rc, vote in zip(hough.lines, hough.votes):
        refined = None
        if params.refine:
            refined = _refine_line(line_rc, (er, ec), sub_rows, warped, params.refine_band, max(8, int(0.25 * cols)))
        if refined is None:
            try:
                refined, _ = map_line_to_original(_raster_line_to_remapped(line_rc, warped), u_range, warped.cfg)
            except (DegenerateFit, NegativeDiscriminant):
                continue
        lines.append(refined)
        votes.append(vote)
    clustered = cluster_lines(LineSet(tuple(lines), tuple(votes)), params.tol_a, params.tol_b)
    capped = clustered.by_votes()
    capped = LineSet(capped.lines[: params.max_lines], capped.votes[: params.max_lines])
    return capped.by_intercept()

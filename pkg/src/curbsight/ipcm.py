"""Inverse perspective-compressing remap.

Rows below the horizon are stretched or squeezed so that a vertical segment
of fixed height spans the same number of output rows at any road distance.
Columns are scaled per row by the same factor, which turns the trapezoidal
footprint of a road region into a rectangle.

The reference row ``v0 = c_y + y0`` is the lowest-resolution row inside the
detection domain; it maps to output row 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import cv2
import numpy as np
from scipy import ndimage

from .errors import (
    AtOrAboveHorizon,
    DegenerateFit,
    NegativeDiscriminant,
    RegionOutsideImage,
    RowAboveReference,
)
from .geometry import CameraRig, CddConfig, CsrRegion, Line2

# spline order used by each resampling mode
INTERPOLATION_ORDER = {"nearest": 0, "bilinear": 1}


@dataclass(frozen=True)
class RemapConfig:
    rig: CameraRig
    y0: float
    D_hat_max: float
    interpolation: str = "bilinear"

    def __post_init__(self):
        if not self.y0 > 1:
            raise ValueError("reference row offset y0 must exceed 1 px")
        if self.interpolation not in INTERPOLATION_ORDER:
            raise ValueError(f"unknown interpolation {self.interpolation!r}")

    @classmethod
    def from_rig(cls, rig: CameraRig, D_max: float = 500.0, interpolation: str = "bilinear") -> "RemapConfig":
        """Pick the farthest realisable sampling distance not beyond ``D_max``."""
        v_exact = rig.cy + rig.fy * rig.camera_height / D_max
        v0 = math.ceil(v_exact - 1e-9)
        y0 = v0 - rig.cy
        return cls(rig, y0, rig.fy * rig.camera_height / y0, interpolation)

    @property
    def v0(self) -> float:
        return self.rig.cy + self.y0

    @property
    def target_rate(self) -> float:
        """Equalised vertical sampling rate, px/cm."""
        return self.rig.fy / self.D_hat_max

    def avoids_interpolation(self, cdd: CddConfig) -> bool:
        """True when no realisable CDD row is sampled more coarsely than the target."""
        rig = self.rig
        rows = np.arange(math.ceil(self.v0 - 1e-9), rig.height + 1, dtype=float)
        rates = rig.fy / (rig.fy * rig.camera_height / (rows - rig.cy))
        return bool(self.target_rate <= rates.min() + 1e-12)

    def half_width(self, cdd: CddConfig) -> float:
        """Half width of the CDD in remapped columns."""
        rig = self.rig
        return self.y0 * rig.fx * cdd.W_max / (rig.fy * rig.camera_height)


def forward_v(v, cfg: RemapConfig):
    """Remapped row of original row ``v`` (closed form)."""
    y = np.asarray(v, dtype=float) - cfg.rig.cy
    if np.any(y <= 0.5):
        raise RowAboveReference("row is too close to the horizon to remap")
    y0 = cfg.y0
    out = y0 * np.log(y * y / (y0 * (y - 0.5))) - 0.5
    return float(out) if np.ndim(out) == 0 else out


def forward_u(u, v, cfg: RemapConfig):
    rig = cfg.rig
    y = np.asarray(v, dtype=float) - rig.cy
    if np.any(y <= 0):
        raise AtOrAboveHorizon("column remap needs a row below the horizon")
    out = cfg.y0 * (np.asarray(u, dtype=float) - rig.cx) / y + rig.cx
    return float(out) if np.ndim(out) == 0 else out


def open_form_v(v, cfg: RemapConfig):
    """Remapped row as the exact partial harmonic sum (test oracle).

    ``v`` must be an integer number of rows at or below the reference row.
    Summation runs in extended precision.
    """
    v = np.asarray(v, dtype=float)
    y = v - cfg.rig.cy
    if np.any(y <= 0.5):
        raise RowAboveReference("row is too close to the horizon to remap")
    n = np.rint(v - cfg.v0)
    if np.any(np.abs(v - cfg.v0 - n) > 1e-9) or np.any(n < 0):
        raise ValueError("open form needs integer rows at or below the reference row")
    n = n.astype(np.int64)
    nmax = int(n.max()) if n.size else 0
    i = np.arange(1, nmax + 1, dtype=np.longdouble)
    y0 = np.longdouble(cfg.y0)
    partial = np.concatenate([[np.longdouble(0)], np.cumsum(y0 / (y0 + i))])
    out = partial[n].astype(float)
    return float(out) if np.ndim(out) == 0 else out


def inverse_map(u_t, v_t, cfg: RemapConfig):
    """Original (u, v) of a remapped point."""
    rig = cfg.rig
    y0 = cfg.y0
    m = y0 * np.exp((np.asarray(v_t, dtype=float) + 0.5) / y0)
    if np.any(m < 2):
        raise NegativeDiscriminant("remapped row lies above the invertible band")
    y = (m + np.sqrt(m * (m - 2))) / 2
    v = y + rig.cy
    u = (np.asarray(u_t, dtype=float) - rig.cx) * y / y0 + rig.cx
    if np.ndim(u) == 0 and np.ndim(v) == 0:
        return float(u), float(v)
    return u, v


def approximation_error(cfg: RemapConfig) -> float:
    """Largest |closed form - open form| over the rows from the reference row to the bottom."""
    rows = np.arange(cfg.v0, cfg.rig.height, dtype=float)
    return float(np.max(np.abs(forward_v(rows, cfg) - open_form_v(rows, cfg))))


def round_trip_error(cfg: RemapConfig, n: int = 100) -> float:
    """Largest forward(inverse(p)) - p over an n x n grid of remapped points."""
    rig = cfg.rig
    vt = np.linspace(forward_v(cfg.v0, cfg), forward_v(rig.height - 1.0, cfg), n)
    ut = np.linspace(0.0, rig.width - 1.0, n)
    UT, VT = np.meshgrid(ut, vt)
    u, v = inverse_map(UT, VT, cfg)
    return float(max(np.abs(forward_v(v, cfg) - VT).max(), np.abs(forward_u(u, v, cfg) - UT).max()))


@dataclass(frozen=True)
class WarpedImage:
    """Remapped raster; pixel (row, col) sits at (u_origin + col, v_origin + row)."""

    data: np.ndarray
    u_origin: float
    v_origin: float
    cfg: RemapConfig

    @property
    def shape(self):
        return self.data.shape

    @property
    def u_range(self):
        return self.u_origin, self.u_origin + self.data.shape[1] - 1

    def to_remapped(self, col, row):
        return np.asarray(col, dtype=float) + self.u_origin, np.asarray(row, dtype=float) + self.v_origin

    def to_raster(self, u_t, v_t):
        return np.asarray(u_t, dtype=float) - self.u_origin, np.asarray(v_t, dtype=float) - self.v_origin


def warp_region(region: CsrRegion, cfg: RemapConfig, cdd: CddConfig):
    """Origin and size of the remapped rectangle covering a region."""
    rig = cfg.rig
    vt_top = forward_v(region.v_top, cfg)
    vt_bot = forward_v(region.v_bottom, cfg)
    rows = int(math.ceil(vt_bot - vt_top))
    y_bot = region.v_bottom - rig.cy
    visible = cfg.y0 * min(rig.cx - region.u_left, region.u_right - rig.cx) / y_bot
    half = min(cfg.half_width(cdd), visible)
    cols = int(math.floor(2 * half)) + 1
    if rows < 2 or cols < 2:
        raise RegionOutsideImage("searching region collapses after remapping")
    return rig.cx - half, vt_top, rows, cols


# width ratio between neighbouring levels of the prefilter ladder
PREFILTER_RATIO = 2 ** 0.25


def _prefiltered_samples(img: np.ndarray, rr: np.ndarray, cc: np.ndarray, sigma_rows: np.ndarray, order: int) -> np.ndarray:
    """Sample ``img`` after a Gaussian blur whose width varies per output row.

    The image is blurred at a geometric ladder of widths; each output row
    blends the two ladder levels around its own width.
    """
    lo, hi = float(sigma_rows.min()), float(sigma_rows.max())
    step = math.log(PREFILTER_RATIO)
    n = int(math.ceil(math.log(hi / lo) / step - 1e-9)) + 1
    pos = np.log(sigma_rows / lo) / step
    k = np.minimum(np.floor(pos).astype(np.int64), max(n - 2, 0))
    w = (pos - k).astype(np.float32)
    out = np.zeros(rr.shape, dtype=np.float32)
    for j in range(n):
        lower, upper = k == j, (k + 1 == j)
        rows = np.nonzero(lower | upper)[0]
        if rows.size == 0:
            continue
        sigma = lo * PREFILTER_RATIO**j
        # blur only the band of frame rows these output rows read from
        pad = int(math.ceil(4 * sigma)) + 2
        r0 = max(int(math.floor(rr[rows].min())) - pad, 0)
        r1 = min(int(math.ceil(rr[rows].max())) + pad + 1, img.shape[0])
        blurred = cv2.GaussianBlur(img[r0:r1], (0, 0), sigma, borderType=cv2.BORDER_REPLICATE)
        vals = ndimage.map_coordinates(blurred, [rr[rows] - r0, cc[rows]], order=order, mode="nearest")
        weight = np.where(lower[rows], 1.0 - w[rows], w[rows]).astype(np.float32)
        out[rows] += weight[:, None] * vals
    return out


def warp_csr(image: np.ndarray, region: CsrRegion, cfg: RemapConfig, cdd: CddConfig, prefilter_sigma: float = 0.0) -> WarpedImage:
    """Resample the searching region into the remapped rectangle.

    ``prefilter_sigma`` (remapped pixels) blurs the frame before sampling.
    In the frame the blur is widened by the local compression factor
    ``(v - c_y) / y0``, so every output row sees the same smoothing. This
    keeps sharp edges from aliasing where many frame rows fold into one.
    """
    img = np.asarray(image)
    if img.ndim != 2:
        raise ValueError("expected a grayscale raster")
    u0, v0, rows, cols = warp_region(region, cfg, cdd)
    vt = v0 + np.arange(rows, dtype=float)
    ut = u0 + np.arange(cols, dtype=float)
    U, V = inverse_map(ut[None, :], vt[:, None], cfg)
    U = np.broadcast_to(U, (rows, cols))
    V = np.broadcast_to(V, (rows, cols))
    h, w = img.shape
    if V.min() < -0.5 or V.max() > h - 0.5 or U.min() < -0.5 or U.max() > w - 0.5:
        raise RegionOutsideImage("remapped region samples outside the frame")
    order = INTERPOLATION_ORDER[cfg.interpolation]
    sigma_rows = prefilter_sigma * (V[:, 0] - cfg.rig.cy) / cfg.y0
    # only the covered part of the frame is needed
    pad = 2 + int(math.ceil(4 * sigma_rows.max() * PREFILTER_RATIO))
    r0, r1 = max(int(math.floor(V.min())) - pad, 0), min(int(math.ceil(V.max())) + pad + 1, h)
    c0, c1 = max(int(math.floor(U.min())) - pad, 0), min(int(math.ceil(U.max())) + pad + 1, w)
    sub = img[r0:r1, c0:c1].astype(np.float32)
    if prefilter_sigma > 0:
        out = _prefiltered_samples(sub, V - r0, U - c0, sigma_rows, order)
    else:
        out = ndimage.map_coordinates(sub, [V - r0, U - c0], order=order, mode="nearest")
    return WarpedImage(out, u0, v0, cfg)


def remapped_line_rows(line: Line2, u_t, cfg: RemapConfig):
    """Remapped rows where an original-space line crosses remapped columns ``u_t``."""
    rig = cfg.rig
    s = np.asarray(u_t, dtype=float) - rig.cx
    b = line.a * rig.cx + line.b - rig.cy  # line in principal-point coordinates
    denom = cfg.y0 - line.a * s
    U = s * b / denom
    y = line.a * U + b
    return forward_v(y + rig.cy, cfg)


def map_line_to_original(line: Line2, u_t_range, cfg: RemapConfig, n_points: int = 16):
    """Fit the original-space line behind a straight remapped line.

    Returns ``(line, rms)`` where ``rms`` is the fit residual in original pixels.
    """
    if n_points < 8:
        raise ValueError("need at least 8 sample points")
    ut = np.linspace(u_t_range[0], u_t_range[1], n_points)
    vt = line.a * ut + line.b
    u, v = inverse_map(ut, vt, cfg)
    if np.ptp(u) < 1e-6 * max(1.0, np.ptp(v)):
        raise DegenerateFit("mapped points are stacked vertically")
    A = np.column_stack([u, np.ones_like(u)])
    (a, b), *_ = np.linalg.lstsq(A, v, rcond=None)
    rms = float(np.sqrt(np.mean((A @ np.array([a, b]) - v) ** 2)))
    try:
        fitted = Line2(float(a), float(b))
    except ValueError as exc:
        raise DegenerateFit(str(exc)) from exc
    return fitted, rms

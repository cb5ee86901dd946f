"""Camera model, ground-plane ranging, line algebra and detection regions.

Conventions
-----------
Camera frame: x right, y down, z forward; the x-z plane is parallel to the
road, which is the plane y = H_C. World lengths are centimeters, angles are
radians, image coordinates are pixels with v pointing down.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional, Tuple

import numpy as np

from .errors import (
    AtOrAboveHorizon,
    DegenerateIntersection,
    NonPositiveDepth,
    NonPositiveDistance,
    RegionOutsideImage,
)

Point = Tuple[float, float]

# Curb edges are near-horizontal; anything steeper is an outlier.
MAX_SLOPE = 5.0
PARALLEL_EPS = 1e-12


@dataclass(frozen=True)
class CameraRig:
    fx: float = 1000.0
    fy: float = 1000.0
    cx: float = 960.0
    cy: float = 540.0
    camera_height: float = 55.0
    width: int = 1920
    height: int = 1080

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image")
        if not self.camera_height > 0:
            raise ValueError("camera height must be positive")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def scaled(self, factor: float) -> "CameraRig":
        """Same optics at a different sensor resolution."""
        return replace(
            self,
            fx=self.fx * factor,
            fy=self.fy * factor,
            cx=self.cx * factor,
            cy=self.cy * factor,
            width=int(round(self.width * factor)),
            height=int(round(self.height * factor)),
        )


@dataclass(frozen=True)
class CurbState:
    """Curb distance, yaw, height and depth.

    ``depth == 0`` marks a two-line estimate where the depth is unknown.
    """

    distance: float
    yaw: float
    height: float
    depth: float = 0.0

    def __post_init__(self):
        if not self.distance > 0:
            raise ValueError(f"curb distance must be positive, got {self.distance}")
        if not abs(self.yaw) < math.pi / 2:
            raise ValueError(f"|yaw| must be below pi/2, got {self.yaw}")
        if not self.height > 0:
            raise ValueError(f"curb height must be positive, got {self.height}")
        if not self.depth >= 0:
            raise ValueError(f"curb depth must be non-negative, got {self.depth}")

    def as_array(self) -> np.ndarray:
        return np.array([self.distance, self.yaw, self.height, self.depth], dtype=float)

    @classmethod
    def from_array(cls, x) -> "CurbState":
        x = [float(v) for v in x]
        if len(x) == 3:
            x.append(0.0)
        return cls(*x)

    @property
    def has_depth(self) -> bool:
        return self.depth > 0


@dataclass(frozen=True)
class Line2:
    """Image line v = a*u + b."""

    a: float
    b: float

    def __post_init__(self):
        if not (math.isfinite(self.a) and math.isfinite(self.b)):
            raise ValueError("line parameters must be finite")
        if abs(self.a) > MAX_SLOPE:
            raise ValueError(f"near-vertical line rejected (slope {self.a:.3g})")

    @property
    def homogeneous(self) -> np.ndarray:
        return np.array([self.a, -1.0, self.b])

    def v_at(self, u):
        return self.a * np.asarray(u, dtype=float) + self.b

    @classmethod
    def through(cls, p: Point, q: Point) -> "Line2":
        du = q[0] - p[0]
        if du == 0:
            raise ValueError("points share a column; line is vertical")
        a = (q[1] - p[1]) / du
        return cls(a, p[1] - a * p[0])


def dehomogenize(h: np.ndarray, rel_eps: float = 1e-12) -> Optional[Point]:
    """Euclidean point of a homogeneous 3-vector, or None at infinity."""
    w = h[2]
    if abs(w) <= rel_eps * max(abs(h[0]), abs(h[1]), 1.0):
        return None
    return (h[0] / w, h[1] / w)


def meet(h1: np.ndarray, h2: np.ndarray) -> Point:
    """Intersection of two homogeneous lines; raises when they are parallel."""
    p = dehomogenize(np.cross(h1, h2))
    if p is None:
        raise DegenerateIntersection("lines meet at infinity")
    return p


def join(p: Point, q: Point) -> np.ndarray:
    """Homogeneous line through two Euclidean points."""
    return np.cross([p[0], p[1], 1.0], [q[0], q[1], 1.0])


def vertical_line(u: float) -> np.ndarray:
    return np.array([1.0, 0.0, -u])


def intersect_lines(l1: Line2, l2: Line2) -> Optional[Point]:
    """Common point of two image lines, or None when they are parallel."""
    da = l2.a - l1.a
    if abs(da) < PARALLEL_EPS:
        return None
    # cross([a1,-1,b1], [a2,-1,b2]) = [b1-b2, a2*b1-a1*b2, a2-a1]
    return ((l1.b - l2.b) / da, (l2.a * l1.b - l1.a * l2.b) / da)


def project_point(P, rig: CameraRig) -> Point:
    x, y, z = (float(c) for c in P)
    if z <= 0:
        raise NonPositiveDepth(f"point depth {z} is not in front of the camera")
    return (rig.fx * x / z + rig.cx, rig.fy * y / z + rig.cy)


def project_points(P: np.ndarray, rig: CameraRig) -> np.ndarray:
    """Vectorised pinhole projection of an (..., 3) array."""
    P = np.asarray(P, dtype=float)
    z = P[..., 2]
    if np.any(z <= 0):
        raise NonPositiveDepth("point behind the camera")
    return np.stack([rig.fx * P[..., 0] / z + rig.cx, rig.fy * P[..., 1] / z + rig.cy], axis=-1)


def distance_from_row(v, rig: CameraRig):
    """Road-plane depth seen at image row ``v``."""
    y = np.asarray(v, dtype=float) - rig.cy
    if np.any(y <= 0):
        raise AtOrAboveHorizon(f"row {v} is at or above the horizon row {rig.cy}")
    d = rig.fy * rig.camera_height / y
    return float(d) if np.ndim(d) == 0 else d


def row_from_distance(D, rig: CameraRig):
    """Image row of road-plane points at depth ``D``."""
    D = np.asarray(D, dtype=float)
    if np.any(D <= 0):
        raise NonPositiveDistance("distance must be positive")
    v = rig.cy + rig.fy * rig.camera_height / D
    return float(v) if np.ndim(v) == 0 else v


def sampling_rate(D, rig: CameraRig):
    """Pixels per centimeter of a vertical segment at depth ``D``."""
    D = np.asarray(D, dtype=float)
    if np.any(D <= 0):
        raise NonPositiveDistance("distance must be positive")
    r = rig.fy / D
    return float(r) if np.ndim(r) == 0 else r


@dataclass(frozen=True)
class CddConfig:
    """Road-plane rectangle where curbs are detected."""

    D_min: float
    D_max: float = 500.0
    W_max: float = 130.0

    def __post_init__(self):
        if not 0 < self.D_min < self.D_max:
            raise ValueError("need 0 < D_min < D_max")
        if not self.W_max > 0:
            raise ValueError("W_max must be positive")

    @classmethod
    def from_rig(cls, rig: CameraRig, D_max: float = 500.0, W_max: float = 130.0) -> "CddConfig":
        # the bottom boundary of the field of view fixes the near limit
        return cls(distance_from_row(rig.height, rig), D_max, W_max)

    @property
    def area_m2(self) -> float:
        return 2 * self.W_max * (self.D_max - self.D_min) / 1e4

    def full_csr(self, **kw) -> "Csr":
        return Csr(self.D_min, self.D_max, **kw)

    def contains(self, D: float) -> bool:
        return self.D_min <= D <= self.D_max


@dataclass(frozen=True)
class Csr:
    """Searching region: the curb base is expected between D_near and D_far.

    The image band also reaches up far enough to hold the raised edges of a
    curb up to ``H_span`` tall and ``E_span`` deep standing at ``D_far``.
    """

    D_near: float
    D_far: float
    H_span: float = 25.0
    E_span: float = 40.0

    def __post_init__(self):
        if not 0 < self.D_near < self.D_far:
            raise ValueError("need 0 < D_near < D_far")
        if self.H_span < 0 or self.E_span < 0:
            raise ValueError("spans must be non-negative")

    def check(self, cdd: CddConfig, tol: float = 1e-9) -> None:
        if self.D_near < cdd.D_min - tol or self.D_far > cdd.D_max + tol:
            raise ValueError(
                f"CSR [{self.D_near:.2f}, {self.D_far:.2f}] leaves the CDD "
                f"[{cdd.D_min:.2f}, {cdd.D_max:.2f}]"
            )


@dataclass(frozen=True)
class CsrRegion:
    """Image footprint of a CSR."""

    csr: Csr
    corners: np.ndarray = field(repr=False)  # near-left, near-right, far-right, far-left
    b_L: Line2
    b_R: Line2
    v_top: float
    v_bottom: float
    u_left: float
    u_right: float

    @property
    def width(self) -> float:
        return self.u_right - self.u_left


def side_boundaries(rig: CameraRig, cdd: CddConfig) -> Tuple[Line2, Line2]:
    """Image projections of the CDD's left and right road-plane limits."""
    lines = []
    for x in (-cdd.W_max, cdd.W_max):
        p = project_point((x, rig.camera_height, cdd.D_min), rig)
        q = project_point((x, rig.camera_height, cdd.D_max), rig)
        lines.append(Line2.through(p, q))
    return lines[0], lines[1]


def csr_to_image(csr: Csr, rig: CameraRig, cdd: CddConfig) -> CsrRegion:
    csr.check(cdd)
    if csr.H_span >= rig.camera_height:
        raise ValueError("H_span must stay below the camera")
    H_C = rig.camera_height
    W = cdd.W_max
    corners = np.array(
        [
            project_point((-W, H_C, csr.D_near), rig),
            project_point((W, H_C, csr.D_near), rig),
            project_point((W, H_C, csr.D_far), rig),
            project_point((-W, H_C, csr.D_far), rig),
        ]
    )
    b_L, b_R = side_boundaries(rig, cdd)
    v_bottom = min(corners[0, 1], rig.height - 1.0)
    v_top = rig.cy + rig.fy * (H_C - csr.H_span) / (csr.D_far + csr.E_span)
    if v_top >= rig.height - 1 or v_bottom <= v_top:
        raise RegionOutsideImage("searching region does not overlap the frame")
    # narrowest visible row is the bottom one
    u_left = max(corners[0, 0], 0.0)
    u_right = min(corners[1, 0], rig.width - 1.0)
    if u_right <= u_left:
        raise RegionOutsideImage("searching region has no horizontal overlap with the frame")
    return CsrRegion(csr, corners, b_L, b_R, float(v_top), float(v_bottom), float(u_left), float(u_right))

"""Curb template fitting.

A curb is a prism standing on the road. Its three visible horizontal edges
(base, front top, rear top) cut the vertical planes x = -W and x = +W over
the detection domain's side limits in six control points. The template's
projected control points are compared with the points where detected image
lines cross the projected side limits, and the state is solved for by
damped Gauss-Newton.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import DegenerateIntersection
from .geometry import (
    CameraRig,
    CddConfig,
    CurbState,
    Line2,
    distance_from_row,
    intersect_lines,
    join,
    meet,
    project_points,
    side_boundaries,
    vertical_line,
)

PAIR = "pair"
TRIPLET = "triplet"

# parameter order in every vector below: D, yaw, H, E
PARAM_NAMES = ("D", "theta", "H", "E")


@dataclass(frozen=True)
class LineTuple:
    """Two or three lines, lowest image line (curb base) first."""

    lines: Tuple[Line2, ...]

    def __post_init__(self):
        if len(self.lines) not in (2, 3):
            raise ValueError("a tuple holds 2 or 3 lines")
        bs = [l.b for l in self.lines]
        if any(b1 <= b2 for b1, b2 in zip(bs, bs[1:])):
            raise ValueError("tuple lines must have strictly decreasing intercepts")

    @property
    def kind(self) -> str:
        return PAIR if len(self.lines) == 2 else TRIPLET


@dataclass(frozen=True)
class FitConfig:
    D_bounds: Tuple[float, float] = (5.0, 600.0)
    theta_bounds: Tuple[float, float] = (-0.6, 0.6)
    H_bounds: Tuple[float, float] = (3.0, 30.0)
    E_bounds: Tuple[float, float] = (5.0, 40.0)
    max_iter: int = 100
    step_tol: float = 1e-10
    damping: float = 1e-3
    fd_steps: Tuple[float, float, float, float] = (0.1, 1e-3, 0.05, 0.05)
    default_E: float = 20.0

    def __post_init__(self):
        for lo, hi in self.bounds:
            if not lo < hi:
                raise ValueError("empty parameter bounds")
        if self.max_iter < 1 or self.damping <= 0:
            raise ValueError("max_iter and damping must be positive")

    @property
    def bounds(self) -> Tuple[Tuple[float, float], ...]:
        return (self.D_bounds, self.theta_bounds, self.H_bounds, self.E_bounds)

    def lower(self, n: int = 4) -> np.ndarray:
        return np.array([b[0] for b in self.bounds[:n]])

    def upper(self, n: int = 4) -> np.ndarray:
        return np.array([b[1] for b in self.bounds[:n]])

    def clamp(self, x: np.ndarray) -> np.ndarray:
        n = len(x)
        return np.clip(x, self.lower(n), self.upper(n))


@dataclass(frozen=True)
class Candidate:
    state: CurbState
    residual_norm: float
    kind: str
    tuple: Optional[LineTuple] = field(default=None, repr=False)
    converged: bool = True
    iterations: int = 0
    score: Optional[float] = None

    def __post_init__(self):
        if not self.residual_norm >= 0:
            raise ValueError("residual norm must be non-negative")
        if self.kind not in (PAIR, TRIPLET):
            raise ValueError(f"unknown candidate kind {self.kind!r}")

    def with_score(self, score: float) -> "Candidate":
        return replace(self, score=float(score))


def _outside(p, width: float, height: float) -> bool:
    if p is None:
        return True
    return not (0 <= p[0] <= width - 1 and 0 <= p[1] <= height - 1)


def enumerate_tuples(lines: Sequence[Line2], width: float, height: float) -> Tuple[List[LineTuple], List[LineTuple]]:
    """All pairs and triplets of lines that do not cross inside the image."""
    ordered = sorted(lines, key=lambda l: -l.b)
    if len(ordered) > 6:
        raise ValueError("at most six lines are expected")
    n = len(ordered)
    ok = np.ones((n, n), dtype=bool)
    for i, j in itertools.combinations(range(n), 2):
        same_b = ordered[i].b == ordered[j].b
        ok[i, j] = ok[j, i] = (not same_b) and _outside(intersect_lines(ordered[i], ordered[j]), width, height)
    pairs = [LineTuple((ordered[i], ordered[j])) for i, j in itertools.combinations(range(n), 2) if ok[i, j]]
    triplets = [
        LineTuple((ordered[i], ordered[j], ordered[k]))
        for i, j, k in itertools.combinations(range(n), 3)
        if ok[i, j] and ok[i, k] and ok[j, k]
    ]
    return pairs, triplets


def _depths(x: np.ndarray, W: float):
    D, th = x[0], x[1]
    E = x[3] if len(x) > 3 else 0.0
    d1 = W * math.tan(th)
    d2 = E / math.cos(th)
    return D, d1, d2


def template_points(x, cdd: CddConfig, rig: CameraRig) -> np.ndarray:
    """World control points, shape (6, 3): left base, left top, left rear, then right."""
    x = np.asarray(x, dtype=float)
    W, H_C = cdd.W_max, rig.camera_height
    D, d1, d2 = _depths(x, W)
    top = H_C - x[2]
    return np.array(
        [
            [-W, H_C, D + d1],
            [-W, top, D + d1],
            [-W, top, D + d1 + d2],
            [W, H_C, D - d1],
            [W, top, D - d1],
            [W, top, D - d1 + d2],
        ]
    )


def template_control_points(state: CurbState, cdd: CddConfig, rig: CameraRig) -> np.ndarray:
    return template_points(state.as_array(), cdd, rig)


def project_control_points(state, cdd: CddConfig, rig: CameraRig) -> np.ndarray:
    """Pixel control points p1..p6, shape (6, 2)."""
    x = state.as_array() if isinstance(state, CurbState) else np.asarray(state, dtype=float)
    return project_points(template_points(x, cdd, rig), rig)


def project_edges(state: CurbState, cdd: CddConfig, rig: CameraRig) -> Tuple[Line2, Line2, Line2]:
    """Image lines of the base, front top and rear top edges."""
    x = state.as_array()
    if not state.has_depth:
        x[3] = 0.0
    p = project_points(template_points(x, cdd, rig), rig)
    return tuple(Line2.through(p[i], p[i + 3]) for i in range(3))


def target_control_points(t: LineTuple, b_L: Line2, b_R: Line2, rig: CameraRig) -> np.ndarray:
    """Image control points implied by a tuple: (6, 2) for triplets, (4, 2) for pairs.

    Pair rows are p1, p2, p4, p5.
    """
    c = (rig.cx, rig.cy)
    base, mid = t.lines[0].homogeneous, t.lines[1].homogeneous
    out = []
    for side in (b_L, b_R):
        p1 = meet(base, side.homogeneous)
        p2 = meet(mid, vertical_line(p1[0]))
        out += [p1, p2]
        if t.kind == TRIPLET:
            ray = join(c, p2)
            if np.allclose(ray, 0):
                raise DegenerateIntersection("control point coincides with the principal point")
            out.append(meet(t.lines[2].homogeneous, ray))
    return np.array(out, dtype=float)


_PAIR_ROWS = [0, 1, 3, 4]


def _model_points(x: np.ndarray, cdd: CddConfig, rig: CameraRig, kind: str) -> np.ndarray:
    pts = project_control_points(x if len(x) == 4 else np.append(x, 0.0), cdd, rig)
    return pts if kind == TRIPLET else pts[_PAIR_ROWS]


def residuals(x, targets: np.ndarray, kind: str, cdd: CddConfig, rig: CameraRig) -> np.ndarray:
    """Weighted residual vector sqrt(D/D_max) * (p - p_hat), flattened."""
    x = np.asarray(x, dtype=float)
    w = math.sqrt(x[0] / cdd.D_max)
    return w * (targets - _model_points(x, cdd, rig, kind)).ravel()


def numeric_jacobian(x, targets, kind, cdd, rig, steps) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    cols = []
    for i in range(len(x)):
        h = np.zeros_like(x)
        h[i] = steps[i]
        cols.append((residuals(x + h, targets, kind, cdd, rig) - residuals(x - h, targets, kind, cdd, rig)) / (2 * steps[i]))
    return np.column_stack(cols)


def analytic_jacobian(x, targets, kind, cdd: CddConfig, rig: CameraRig) -> np.ndarray:
    """Closed-form Jacobian of :func:`residuals` (used to check the numeric one)."""
    x = np.asarray(x, dtype=float)
    n = len(x)
    W = cdd.W_max
    D, th = x[0], x[1]
    E = x[3] if n > 3 else 0.0
    sec = 1.0 / math.cos(th)
    P = template_points(x if n == 4 else np.append(x, 0.0), cdd, rig)
    X, Y, Z = P[:, 0], P[:, 1], P[:, 2]
    # derivatives of (X, Y, Z) with respect to the parameters, per point
    sign = np.array([1, 1, 1, -1, -1, -1], dtype=float)
    rear = np.array([0, 0, 1, 0, 0, 1], dtype=float)
    raised = np.array([0, 1, 1, 0, 1, 1], dtype=float)
    dZ = np.zeros((6, 4))
    dY = np.zeros((6, 4))
    dZ[:, 0] = 1.0
    dZ[:, 1] = sign * W * sec**2 + rear * E * sec * math.tan(th)
    dZ[:, 3] = rear * sec
    dY[:, 2] = -raised
    du = -rig.fx * X[:, None] / Z[:, None] ** 2 * dZ
    dv = rig.fy * (dY / Z[:, None] - Y[:, None] / Z[:, None] ** 2 * dZ)
    dp = np.stack([du, dv], axis=1)  # (6, 2, 4)
    rows = list(range(6)) if kind == TRIPLET else _PAIR_ROWS
    dp = dp[rows][:, :, :n].reshape(-1, n)
    diff = (targets - _model_points(x, cdd, rig, kind)).ravel()
    w = math.sqrt(D / cdd.D_max)
    J = -w * dp
    J[:, 0] += diff / (2 * math.sqrt(D * cdd.D_max))
    return J


def initial_state(t: LineTuple, rig: CameraRig, cfg: FitConfig = FitConfig()) -> CurbState:
    """Closed-form starting point read off the lines at the centre column.

    Exact for a zero-yaw curb; the yaw follows from the base line slope.
    """
    base, mid = t.lines[0], t.lines[1]
    v_b = float(base.v_at(rig.cx))
    D0 = distance_from_row(v_b, rig) if v_b > rig.cy else cfg.D_bounds[1]
    D0 = float(np.clip(D0, *cfg.D_bounds))
    tan0 = base.a * rig.fx * D0 / (rig.fy * rig.camera_height)
    th0 = float(np.clip(math.atan(tan0), *cfg.theta_bounds))
    gap = v_b - float(mid.v_at(rig.cx))
    H0 = float(np.clip(gap * D0 / rig.fy, *cfg.H_bounds))
    E0 = cfg.default_E
    if t.kind == TRIPLET:
        v_t = float(t.lines[2].v_at(rig.cx))
        if v_t > rig.cy:
            z_rear = rig.fy * (rig.camera_height - H0) / (v_t - rig.cy)
            E0 = (z_rear - D0) * math.cos(th0)
        E0 = float(np.clip(E0, *cfg.E_bounds))
        return CurbState(D0, th0, H0, E0)
    return CurbState(D0, th0, H0, 0.0)


def fit_template(
    t: LineTuple,
    init: CurbState,
    cfg: FitConfig,
    cdd: CddConfig,
    rig: CameraRig,
    boundaries: Optional[Tuple[Line2, Line2]] = None,
) -> Candidate:
    """Levenberg-Marquardt fit of the template to one tuple."""
    b_L, b_R = boundaries if boundaries is not None else side_boundaries(rig, cdd)
    targets = target_control_points(t, b_L, b_R, rig)
    n = 4 if t.kind == TRIPLET else 3
    x = init.as_array()[:n]
    if np.any(x < cfg.lower(n)) or np.any(x > cfg.upper(n)):
        raise ValueError("initial state lies outside the fit bounds")
    steps = np.array(cfg.fd_steps[:n])

    r = residuals(x, targets, t.kind, cdd, rig)
    cost = float(r @ r)
    lam = cfg.damping
    converged = False
    it = 0
    for it in range(1, cfg.max_iter + 1):
        J = numeric_jacobian(x, targets, t.kind, cdd, rig, steps)
        A = J.T @ J
        g = J.T @ r
        diag = np.maximum(np.diag(A), 1e-12)
        improved = False
        while lam < 1e12:
            try:
                delta = -np.linalg.solve(A + lam * np.diag(diag), g)
            except np.linalg.LinAlgError:
                lam *= 10
                continue
            x_new = cfg.clamp(x + delta)
            r_new = residuals(x_new, targets, t.kind, cdd, rig)
            cost_new = float(r_new @ r_new)
            if cost_new <= cost:
                improved = True
                break
            lam *= 10
        if not improved:
            converged = True  # no descent direction left at this scale
            break
        step = x_new - x
        x, r, cost = x_new, r_new, cost_new
        lam = max(lam / 10, 1e-12)
        if np.all(np.abs(step) <= cfg.step_tol * (1 + np.abs(x))) or cost == 0.0:
            converged = True
            break

    raw = (targets - _model_points(x, cdd, rig, t.kind)).ravel()
    state = CurbState.from_array(x if n == 4 else np.append(x, 0.0))
    return Candidate(state, float(np.sqrt(raw @ raw)), t.kind, t, converged, it)


def build_candidate_set(
    lines: Sequence[Line2],
    rig: CameraRig,
    cdd: CddConfig,
    cfg: FitConfig = FitConfig(),
) -> List[Candidate]:
    """Fit every admissible pair and triplet of lines; triplets first."""
    pairs, triplets = enumerate_tuples(lines, rig.width, rig.height)
    bounds = side_boundaries(rig, cdd)
    out = []
    for t in triplets + pairs:
        try:
            out.append(fit_template(t, initial_state(t, rig, cfg), cfg, cdd, rig, bounds))
        except (DegenerateIntersection, ValueError, ZeroDivisionError):
            continue
    return out


def format_candidates(cands: Sequence[Candidate]) -> str:
    """Tab-separated dump: kind, D (cm), yaw (deg), H (cm), E (cm), residual (px), score or NA."""
    rows = []
    for c in cands:
        s = c.state
        score = "NA" if c.score is None else f"{c.score:.6g}"
        rows.append(
            "\t".join(
                [c.kind, f"{s.distance:.3f}", f"{math.degrees(s.yaw):.4f}", f"{s.height:.3f}", f"{s.depth:.3f}", f"{c.residual_norm:.6g}", score]
            )
        )
    return "".join(r + "\n" for r in rows)

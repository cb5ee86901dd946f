"""Detection rates, distance-binned parameter errors and report files."""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .errors import EmptyCounts, MisalignedLogs

BIN_WIDTH = 25.0
PARAMS = ("D", "theta", "H", "E")
TP_GATE_CM = 50.0


@dataclass(frozen=True)
class ConfusionCounts:
    TP: int = 0
    TN: int = 0
    FP: int = 0
    FN: int = 0

    def __post_init__(self):
        if min(self.TP, self.TN, self.FP, self.FN) < 0:
            raise ValueError("counts must be non-negative")

    @property
    def total(self) -> int:
        return self.TP + self.TN + self.FP + self.FN

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.TP + other.TP, self.TN + other.TN, self.FP + other.FP, self.FN + other.FN)


def accuracy(c: ConfusionCounts) -> float:
    if c.total == 0:
        raise EmptyCounts("no decisions to score")
    return (c.TP + c.TN) / c.total


def f1(c: ConfusionCounts) -> float:
    if c.TP + c.FP == 0 or c.TP + c.FN == 0 or c.TP == 0:
        warnings.warn("F1 is degenerate for these counts; reporting 0", RuntimeWarning, stacklevel=2)
        return 0.0
    precision = c.TP / (c.TP + c.FP)
    recall = c.TP / (c.TP + c.FN)
    return 2 * precision * recall / (precision + recall)


def detection_confusion(
    detected_D: Sequence[Optional[float]], gt_D: Sequence[Optional[float]], gate: float = TP_GATE_CM
) -> ConfusionCounts:
    """Frame-level counts.

    ``detected_D[k]`` is the reported distance or None; ``gt_D[k]`` the true
    distance or None for a curb-free frame. A detection further than
    ``gate`` from the truth counts as a miss.
    """
    if len(detected_D) != len(gt_D):
        raise MisalignedLogs("decision and ground-truth streams differ in length")
    tp = tn = fp = fn = 0
    for d, g in zip(detected_D, gt_D):
        if g is None:
            if d is None:
                tn += 1
            else:
                fp += 1
        elif d is not None and abs(d - g) <= gate:
            tp += 1
        else:
            fn += 1
    return ConfusionCounts(tp, tn, fp, fn)


@dataclass
class BinnedErrors:
    edges: np.ndarray
    abs_err: Dict[str, List[List[float]]] = field(default_factory=dict)
    pct_err: Dict[str, List[List[float]]] = field(default_factory=dict)

    @property
    def n_bins(self) -> int:
        return len(self.edges) - 1

    def counts(self) -> List[int]:
        return [len(b) for b in self.abs_err["D"]]


def _quantiles(v: Sequence[float]):
    if not len(v):
        return [math.nan] * 5
    return [float(x) for x in np.quantile(np.asarray(v, dtype=float), [0.0, 0.25, 0.5, 0.75, 1.0])]


def binned_errors(
    frames: Sequence[int],
    estimates: Sequence[Optional[Sequence[float]]],
    gt_frames: Sequence[int],
    gt_states: Sequence[Optional[Sequence[float]]],
    D_max: float = 500.0,
    D_min: float = 0.0,
    bin_width: float = BIN_WIDTH,
) -> BinnedErrors:
    """Absolute and percentage errors grouped by true distance.

    Estimates and truth are 4-vectors (D, yaw, H, E) matched by frame
    index; frames lacking either are skipped. Percentage errors are kept
    for D, H and E only, and for D only where the truth is at least D_min.
    An estimate whose depth is NaN or zero contributes no depth error.
    """
    if len(frames) != len(estimates) or len(gt_frames) != len(gt_states):
        raise MisalignedLogs("frame index and value streams differ in length")
    gt = dict(zip(gt_frames, gt_states))
    missing = [f for f in frames if f not in gt]
    if missing:
        raise MisalignedLogs(f"{len(missing)} estimate frames have no ground truth (first: {missing[0]})")
    n_bins = int(math.ceil(D_max / bin_width - 1e-9))
    edges = np.arange(n_bins + 1) * bin_width
    out = BinnedErrors(edges)
    for p in PARAMS:
        out.abs_err[p] = [[] for _ in range(n_bins)]
        if p != "theta":
            out.pct_err[p] = [[] for _ in range(n_bins)]
    for f, est in zip(frames, estimates):
        g = gt[f]
        if est is None or g is None:
            continue
        est = np.asarray(est, dtype=float)
        g = np.asarray(g, dtype=float)
        k = int(math.floor(g[0] / bin_width))
        if g[0] == D_max:
            k = n_bins - 1
        if not 0 <= k < n_bins:
            continue
        for j, p in enumerate(PARAMS):
            if not (math.isfinite(est[j]) and math.isfinite(g[j])):
                continue
            if p == "E" and est[j] <= 0:
                continue
            err = abs(est[j] - g[j])
            out.abs_err[p][k].append(err)
            if p in out.pct_err and g[j] != 0 and (p != "D" or g[0] >= D_min):
                out.pct_err[p][k].append(100.0 * err / abs(g[j]))
    return out


def summarize(be: BinnedErrors) -> List[dict]:
    """Per-bin MAE, MAPE and box-plot quantiles."""
    rows = []
    for k in range(be.n_bins):
        row = {"bin_lo": float(be.edges[k]), "bin_hi": float(be.edges[k + 1]), "n": len(be.abs_err["D"][k])}
        for p in PARAMS:
            a = be.abs_err[p][k]
            row[f"MAE_{p}"] = float(np.mean(a)) if a else math.nan
            row[f"box_{p}"] = _quantiles(a)
            if p in be.pct_err:
                q = be.pct_err[p][k]
                row[f"MAPE_{p}"] = float(np.mean(q)) if q else math.nan
        rows.append(row)
    return rows


def overall_mae(be: BinnedErrors, param: str) -> float:
    vals = [x for b in be.abs_err[param] for x in b]
    return float(np.mean(vals)) if vals else math.nan


def _clean(v):
    if isinstance(v, float) and not math.isfinite(v):
        return None
    if isinstance(v, list):
        return [_clean(x) for x in v]
    return v


def write_report(prefix: str, be: BinnedErrors, confusion: Optional[ConfusionCounts] = None, meta: Optional[dict] = None) -> List[str]:
    """Write ``prefix.json``, ``prefix_bins.csv`` and one ``prefix_box_<param>.dat`` per parameter."""
    rows = summarize(be)
    report = {"meta": meta or {}, "bins": [{k: _clean(v) for k, v in r.items()} for r in rows]}
    report["overall_MAE"] = {p: _clean(overall_mae(be, p)) for p in PARAMS}
    if confusion is not None:
        report["confusion"] = asdict(confusion)
        report["accuracy"] = accuracy(confusion) if confusion.total else None
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            report["f1"] = f1(confusion)
    paths = [prefix + ".json", prefix + "_bins.csv"]
    with open(paths[0], "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
    cols = ["bin_lo", "bin_hi", "n"] + [f"MAE_{p}" for p in PARAMS] + [f"MAPE_{p}" for p in PARAMS if p != "theta"]
    with open(paths[1], "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(cols)
        for r in rows:
            wr.writerow([r[c] for c in cols])
    for p in PARAMS:
        path = f"{prefix}_box_{p}.dat"
        with open(path, "w") as fh:
            fh.write(f"# bin_center min q1 median q3 max  (absolute error of {p})\n")
            for r in rows:
                if r["n"] == 0:
                    continue
                center = 0.5 * (r["bin_lo"] + r["bin_hi"])
                fh.write(" ".join(f"{x:.6g}" for x in [center] + r[f"box_{p}"]) + "\n")
        paths.append(path)
    return paths

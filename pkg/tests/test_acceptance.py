"""Acceptance criteria, one test each.

Every test records a one-line verdict before asserting; the lines are
printed together at the end of the run (see ``conftest.py``).
"""

from __future__ import annotations

import time
from dataclasses import replace

import numpy as np

import curbsight.synthscene as ss
from curbsight.appearance import FEATURE_LEN, N_WINDOWS, hog, make_bag
from curbsight.edges import vote_lines
from curbsight.evaluation import accuracy, binned_errors, detection_confusion, summarize
from curbsight.geometry import CameraRig, CddConfig, CurbState, side_boundaries
from curbsight.ipcm import RemapConfig, approximation_error, round_trip_error
from curbsight.pipeline import detect_frame
from curbsight.template import (
    TRIPLET,
    Candidate,
    FitConfig,
    LineTuple,
    analytic_jacobian,
    fit_template,
    numeric_jacobian,
    project_control_points,
    project_edges,
    target_control_points,
)
from curbsight.tracker import COLLECTING, TRACKING, Tracker

RIG = CameraRig()
CDD = CddConfig.from_rig(RIG)
REMAP = RemapConfig.from_rig(RIG, CDD.D_max)
FIT = FitConfig()


def verdict(record_property, n, ok, detail, seconds, limit):
    ok = bool(ok) and seconds < limit
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}; {seconds:.2f} s (limit {limit:g} s)"
    record_property("acceptance", line)
    print(line)
    return ok, line


def random_states(n, seed):
    rng = np.random.default_rng(seed)
    return [
        CurbState(rng.uniform(CDD.D_min, CDD.D_max), rng.uniform(-0.3, 0.3), rng.uniform(5.0, 25.0), rng.uniform(10.0, 35.0))
        for _ in range(n)
    ]


def test_criterion_1_remap_approximation_bound(record_property):
    t0 = time.perf_counter()
    dev = approximation_error(REMAP)
    ok, line = verdict(record_property, 1, dev < 2e-3, f"max closed vs open form deviation {dev:.3e} px (< 2e-3)", time.perf_counter() - t0, 1.0)
    assert ok, line


def test_criterion_2_remap_round_trip(record_property):
    t0 = time.perf_counter()
    err = round_trip_error(REMAP, 100)  # 100 x 100 grid
    ok, line = verdict(record_property, 2, err < 1e-9, f"max round trip error {err:.3e} px on 10^4 points (< 1e-9)", time.perf_counter() - t0, 1.0)
    assert ok, line


def test_criterion_3_geometry_oracle(record_property):
    b_L, b_R = side_boundaries(RIG, CDD)
    t0 = time.perf_counter()
    worst = 0.0
    for s in random_states(1000, seed=31):
        got = target_control_points(LineTuple(project_edges(s, CDD, RIG)), b_L, b_R, RIG)
        worst = max(worst, float(np.abs(got - project_control_points(s, CDD, RIG)).max()))
    ok, line = verdict(record_property, 3, worst <= 1e-6, f"max target vs projected control point gap {worst:.2e} px over 1000 states (<= 1e-6)", time.perf_counter() - t0, 5.0)
    assert ok, line


def test_criterion_4_fit_recovery(record_property):
    rng = np.random.default_rng(41)
    tol = np.array([0.5, 0.005, 0.2, 1.0])
    t0 = time.perf_counter()
    good = 0
    states = random_states(1000, seed=40)
    for s in states:
        init = CurbState.from_array(s.as_array() * rng.uniform(0.9, 1.1, 4))
        c = fit_template(LineTuple(project_edges(s, CDD, RIG)), init, FIT, CDD, RIG)
        good += c.kind == TRIPLET and bool(np.all(np.abs(c.state.as_array() - s.as_array()) <= tol))
    rate = good / len(states)
    ok, line = verdict(record_property, 4, rate >= 0.99, f"{good}/1000 states recovered within (0.5 cm, 0.005 rad, 0.2 cm, 1 cm) (>= 99%)", time.perf_counter() - t0, 30.0)
    assert ok, line


def test_criterion_5_end_to_end_tracking(record_property, tracked_sequences):
    t0 = time.perf_counter()
    worst_mape, maes, presets = 0.0, [], set()
    for seq in tracked_sequences:
        presets.add(seq.preset)
        est = [o.smoothed for o in seq.result.outputs]
        gt = [None if g.state is None else g.state.as_array() for g in seq.gt]
        be = binned_errors(list(range(len(est))), est, [g.frame for g in seq.gt], gt, D_max=CDD.D_max, D_min=CDD.D_min)
        mapes = [r["MAPE_D"] for r in summarize(be) if not np.isnan(r["MAPE_D"])]
        worst_mape = max(worst_mape, max(mapes))
        maes += [x for b in be.abs_err["H"] for x in b]
    h_mae = float(np.mean(maes))
    seconds = sum(s.seconds for s in tracked_sequences) + time.perf_counter() - t0
    detail = f"{len(tracked_sequences)} sequences ({'/'.join(sorted(presets))}), worst per-bin MAPE(D) {worst_mape:.3f}% (<= 9%), H MAE {h_mae:.3f} cm (<= 1.5)"
    ok, line = verdict(record_property, 5, worst_mape <= 9.0 and h_mae <= 1.5 and presets == set(ss.PRESETS), detail, seconds, 300.0)
    assert ok, line


def mixed_suite(pipe, model, n=80, seed=99):
    """Alternating curb and curb-free frames, every one with road texture distractors."""
    rng = np.random.default_rng(seed)
    detected, truth = [], []
    for i in range(n):
        ph = ss.random_photometry(rng)
        ph = replace(ph, distractors=ss.random_distractors(rng, pipe.cdd, int(rng.integers(1, 3)), int(rng.integers(0, 2))))
        state = ss.random_state(rng, pipe.cdd) if i % 2 == 0 else None
        best = detect_frame(ss.render_raster(state, pipe.rig, ph, 5000 + i), pipe.cdd.full_csr(), pipe, model).best
        detected.append(None if best is None else best.state.distance)
        truth.append(None if state is None else state.distance)
    return detection_confusion(detected, truth)


def test_criterion_6_mixed_detection_rate(record_property, pipe, model):
    t0 = time.perf_counter()
    c = mixed_suite(pipe, model)
    acc = accuracy(c)
    detail = f"ACC {acc:.3f} on {c.total} frames (TP {c.TP}, TN {c.TN}, FP {c.FP}, FN {c.FN}) (>= 0.90)"
    ok, line = verdict(record_property, 6, acc >= 0.90, detail, time.perf_counter() - t0, 300.0)
    assert ok, line


def test_criterion_7_structural_invariants(record_property, pipe, model):
    t0 = time.perf_counter()
    checks = {}
    rng = np.random.default_rng(70)
    checks["hog length 288"] = all(hog(rng.uniform(0, 255, (32, 32))).size == FEATURE_LEN == 288 for _ in range(20))
    # a busy edge map with many long lines
    e = np.zeros((200, 600), dtype=bool)
    for k in range(15):
        e[10 + 12 * k, : 600 - 10 * k] = True
    n_vote = len(vote_lines(e, min_votes=50))
    n_frame = 0
    for k in range(3):
        ph = replace(ss.Photometry.preset("clear"), distractors=ss.random_distractors(rng, CDD, 3, 2))
        res = detect_frame(ss.render_raster(ss.random_state(rng, CDD), RIG, ph, 7000 + k), CDD.full_csr(), pipe, None)
        n_frame = max(n_frame, len(res.lines))
    checks["at most 6 lines"] = n_vote == 6 and n_frame <= 6
    s = CurbState(260.0, 0.03, 14.0, 20.0)
    res = detect_frame(ss.render_raster(s, RIG, ss.Photometry.preset("clear"), 3), CDD.full_csr(), pipe, model)
    checks["7-window bags"] = bool(res.accepted) and all(
        len(make_bag(c, res.warped, CDD, model).features) == N_WINDOWS == 7 for c in res.accepted
    )
    # tracking only after five consecutive non-empty frames, whatever the gaps
    rng_t = np.random.default_rng(71)
    entered_ok = True
    for _ in range(50):
        tr = Tracker(CDD)
        run = 0
        for t in range(40):
            present = rng_t.random() < 0.8
            cands = [detect_stub(300.0 - 2 * t)] if present else []
            was = tr.mode
            out = tr.step(cands, t)
            run = run + 1 if present else 0
            if was == COLLECTING and out.mode == TRACKING:
                entered_ok &= run == 5
    checks["tracking after 5 frames"] = entered_ok
    failed = [k for k, v in checks.items() if not v]
    detail = "hog 288, <= 6 lines, 7-window bags, tracking entered after 5 consecutive frames" + (f"; failed: {failed}" if failed else "")
    ok, line = verdict(record_property, 7, not failed, detail, time.perf_counter() - t0, 10.0)
    assert ok, line


def detect_stub(D):
    return Candidate(CurbState(D, 0.0, 12.0, 20.0), 0.1, TRIPLET)


def test_criterion_8_numerical_checks(record_property, tracked_sequences):
    t0 = time.perf_counter()
    worst_rel = 0.0
    for s in random_states(20, seed=80):
        targets = target_control_points(LineTuple(project_edges(s, CDD, RIG)), *side_boundaries(RIG, CDD), RIG) + 0.5
        Jn = numeric_jacobian(s.as_array(), targets, TRIPLET, CDD, RIG, FIT.fd_steps)
        Ja = analytic_jacobian(s.as_array(), targets, TRIPLET, CDD, RIG)
        for j in range(3):  # D, yaw, H
            worst_rel = max(worst_rel, float(np.abs(Jn[:, j] - Ja[:, j]).max() / np.abs(Ja[:, j]).max()))
    reductions = []
    for seq in tracked_sequences:
        raw, smooth = [], []
        for out, det, g in zip(seq.result.outputs, seq.result.detections, seq.gt):
            if det.best is None or out.smoothed is None or g.state is None:
                continue
            raw.append(det.best.state.distance - g.state.distance)
            smooth.append(out.smoothed[0] - g.state.distance)
        reductions.append((np.sqrt(np.mean(np.square(smooth))), np.sqrt(np.mean(np.square(raw)))))
    all_reduced = all(s < r for s, r in reductions)
    worst = max(s / r for s, r in reductions)
    detail = (
        f"Jacobian worst relative gap {worst_rel:.2e} (<= 1e-4); smoothed D RMS below raw best-candidate RMS on "
        f"{sum(s < r for s, r in reductions)}/{len(reductions)} sequences (worst ratio {worst:.3f})"
    )
    ok, line = verdict(record_property, 8, worst_rel <= 1e-4 and all_reduced, detail, time.perf_counter() - t0, 60.0)
    assert ok, line

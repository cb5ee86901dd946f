from __future__ import annotations

import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import special

import curbsight.synthscene as ss
from curbsight.edges import EdgeParams, LineSet, _subpixel_rows, cluster_lines, detect_edges, extract_lines, vote_lines
from curbsight.errors import EmptyImage
from curbsight.geometry import CameraRig, CddConfig, Csr, CurbState, Line2, distance_from_row
from curbsight.ipcm import RemapConfig, remapped_line_rows
from curbsight.pipeline import Pipeline
from curbsight.template import project_edges

RIG = CameraRig()
CDD = CddConfig.from_rig(RIG)
CFG = RemapConfig.from_rig(RIG)
CLEAN = replace(ss.Photometry.preset("clear"), noise_sigma=0.0, texture=0.0, shadow=None)


def _lines(img, csr):
    return extract_lines(img, csr, RIG, CDD, CFG)


def test_detect_edges_errors():
    with pytest.raises(EmptyImage):
        detect_edges(np.zeros((0, 5), dtype=np.uint8))
    with pytest.raises(ValueError):
        detect_edges(np.zeros((5, 5), dtype=np.uint8), 50, 20)


def test_constant_image_has_no_edges():
    assert not detect_edges(np.full((40, 60), 90, dtype=np.uint8)).any()


def test_step_edge_gives_thin_chain():
    img = np.full((40, 60), 60, dtype=np.uint8)
    img[20:] = 160
    e = detect_edges(img)
    inner = e[:, 3:-3]
    assert np.all(inner.sum(axis=0) == 1)
    rows = np.nonzero(inner)[0]
    assert np.ptp(rows) == 0 and rows[0] in (19, 20)


def test_edges_of_rendered_curb_sit_on_true_rows():
    pipe = Pipeline.default()
    s = CurbState(250.0, 0.05, 14.0, 22.0)
    img = ss.render_raster(s, RIG, CLEAN)
    csr = Csr(220.0, 280.0)
    w = pipe.warp(img, csr, pipe.edges.prewarp_sigma)
    e = detect_edges(w.data, pipe.edges.low_thresh, pipe.edges.high_thresh, pipe.edges.blur_sigma)
    rows, cols = np.nonzero(e)
    ut, _ = w.to_remapped(cols, 0.0)
    truth = np.stack([remapped_line_rows(l, ut, CFG) - w.v_origin for l in project_edges(s, CDD, RIG)])
    dist = np.abs(truth - rows[None, :]).min(axis=0)
    assert rows.size > 0
    assert np.all(dist <= 1.0)
    # every column carries all three edges
    for k in range(3):
        near = np.abs(truth[k] - rows) <= 1.0
        assert np.unique(cols[near]).size >= 0.95 * w.shape[1]


def _draw_line(shape, a, b, u_lo=0, u_hi=None):
    img = np.zeros(shape, dtype=bool)
    u_hi = shape[1] if u_hi is None else u_hi
    u = np.arange(u_lo, u_hi)
    v = np.rint(a * u + b).astype(int)
    ok = (v >= 0) & (v < shape[0])
    img[v[ok], u[ok]] = True
    return img


def test_vote_single_line():
    a, b = math.tan(math.radians(3.0)), 40.0
    ls = vote_lines(_draw_line((120, 400), a, b))
    assert len(ls) == 1
    l = ls.lines[0]
    assert abs(math.degrees(math.atan(l.a)) - 3.0) < 0.5
    assert abs(l.v_at(200) - (a * 200 + b)) < 1.0


def test_vote_caps_at_six_longest():
    e = np.zeros((200, 400), dtype=bool)
    lengths = [400, 380, 360, 340, 320, 300, 280, 260]
    for k, n in enumerate(lengths):
        e |= _draw_line(e.shape, 0.0, 10 + 22 * k, 0, n)
    ls = vote_lines(e, min_votes=50)
    assert len(ls) == 6
    assert sorted(round(l.b) for l in ls.lines) == [10 + 22 * k for k in range(6)]


def test_vote_empty():
    assert len(vote_lines(np.zeros((50, 50), dtype=bool))) == 0


def test_cluster_mean_example():
    ls = LineSet((Line2(0.01, 100.2), Line2(0.012, 100.9)), (5.0, 7.0))
    out = cluster_lines(ls, 0.05, 2.0)
    assert len(out) == 1
    assert out.lines[0].a == pytest.approx(0.011)
    assert out.lines[0].b == pytest.approx(100.55)
    assert out.votes[0] == 12.0


def test_cluster_far_lines_unchanged():
    ls = LineSet((Line2(0.0, 10.0), Line2(0.0, 50.0)), (3.0, 2.0))
    out = cluster_lines(ls)
    assert set(out.lines) == set(ls.lines)


line_sets = st.lists(
    st.tuples(st.floats(-0.1, 0.1), st.floats(0, 60), st.floats(1, 100)), min_size=0, max_size=8
).map(lambda xs: LineSet(tuple(Line2(a, b) for a, b, _ in xs), tuple(v for _, _, v in xs)))


@given(line_sets)
def test_cluster_properties(ls):
    once = cluster_lines(ls)
    assert len(once) <= len(ls)
    assert sum(once.votes) == pytest.approx(sum(ls.votes))
    twice = cluster_lines(once)
    assert len(twice) == len(once)
    assert sorted((l.a, l.b) for l in twice.lines) == pytest.approx(sorted((l.a, l.b) for l in once.lines))


def _gauss_step_profile(d, sigma, amp, step, rows=21, centre=10):
    k = np.arange(rows) - centre - d
    return amp * np.exp(-(k**2) / (2 * sigma**2)) + 3.0 + step * special.ndtr(k / sigma)


@given(st.floats(-0.5, 0.5), st.floats(0.0, 20.0), st.sampled_from([-1, 1]))
def test_subpixel_peak_with_one_sided_shading(d, step, sign):
    prof = _gauss_step_profile(d, 1.2, 60.0, sign * step)
    grad = np.repeat(prof[:, None], 3, axis=1)
    peak = int(np.argmax(prof))
    got = _subpixel_rows(grad, np.array([peak]), np.array([1]))[0]
    assert abs(got - (10 + d)) < 0.01


@given(st.floats(-0.5, 0.5), st.floats(0.9, 1.8))
def test_subpixel_peak_of_given_width(d, sigma):
    k = np.arange(21) - 10 - d
    grad = np.repeat(np.exp(-(k**2) / (2 * sigma**2))[:, None] * 50.0, 2, axis=1)
    got = _subpixel_rows(grad, np.array([int(np.argmax(grad[:, 0]))]), np.array([0]), sigma)[0]
    assert abs(got - (10 + d)) < 0.01


def test_peak_width_follows_smoothing():
    p = EdgeParams(prewarp_sigma=1.0, blur_sigma=0.7)
    assert p.peak_width == pytest.approx(math.sqrt(1.0 + 0.49 + 1 / 3))
    assert EdgeParams(peak_sigma=2.0).peak_width == 2.0


def test_extract_three_clean_lines():
    s = CurbState(260.0, 0.04, 13.0, 21.0)
    ls = _lines(ss.render_raster(s, RIG, CLEAN), Csr(230.0, 290.0))
    truth = project_edges(s, CDD, RIG)
    assert len(ls) == 3
    for got, want in zip(ls.lines, truth):
        assert abs(got.a - want.a) < 5e-3
        assert abs(got.b - want.b) < 1.0


def test_flat_road_has_no_lines():
    img = ss.render_raster(None, RIG, CLEAN, seed=3)
    assert len(_lines(img, CDD.full_csr())) == 0


def test_outlier_edge_keeps_true_lines():
    s = CurbState(300.0, 0.0, 15.0, 20.0)
    # a seam well clear of the base edge, crossing the region at a slant
    seam = ss.Distractor("seam", 265.0, 3.0, -50.0, angle=0.05)
    ph = replace(CLEAN, distractors=(seam,))
    ls = _lines(ss.render_raster(s, RIG, ph), Csr(260.0, 330.0))
    assert len(ls) <= 6
    truth = project_edges(s, CDD, RIG)
    for want in truth:
        assert any(abs(g.a - want.a) < 5e-3 and abs(g.v_at(RIG.cx) - want.v_at(RIG.cx)) < 1.0 for g in ls.lines)
    assert len(ls) > 3


@settings(max_examples=8, deadline=None)
@given(st.floats(150.0, 420.0), st.floats(-20.0, 20.0))
def test_base_line_follows_distance(D, dD):
    ranges = []
    for dist in (D, D + dD):
        s = CurbState(dist, 0.0, 12.0, 20.0)
        ls = _lines(ss.render_raster(s, RIG, CLEAN), Csr(dist - 30, dist + 30))
        base = ls.lines[0]
        ranges.append(base.v_at(RIG.cx))
    expected = RIG.cy + RIG.fy * RIG.camera_height / (D + dD) - (RIG.cy + RIG.fy * RIG.camera_height / D)
    assert abs((ranges[1] - ranges[0]) - expected) < 1.0
    assert distance_from_row(ranges[1], RIG) == pytest.approx(D + dD, rel=0.01)

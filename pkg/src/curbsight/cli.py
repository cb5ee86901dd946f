"""Command-line front end.

Subcommands: render, train, detect, track, evaluate, remap-check. Exit
codes: 0 success, 1 bad configuration, 2 input/output failure, 3 a failed
remap check.
"""

from __future__ import annotations

import argparse
import csv
import io
import math
import os
import sys
from dataclasses import replace
from typing import List, Optional

import cv2
import numpy as np
import yaml

from . import __version__
from . import synthscene as ss
from .appearance import MODEL_MAGIC, LinearModel, hog_batch, load_model, save_model, train
from .config import Config, load_config
from .edges import extract_lines_warped
from .errors import ConfigError, CurbsightError, MisalignedLogs
from .evaluation import binned_errors, detection_confusion, write_report
from .ipcm import approximation_error, round_trip_error
from .pipeline import detect_frame, run_sequence
from .template import format_candidates, project_edges

EXIT_CONFIG = 1
EXIT_IO = 2
EXIT_CHECK = 3
APPROX_BOUND = 2e-3
ROUND_TRIP_TOL = 1e-9
DEFAULT_MODEL = os.path.join(os.path.dirname(__file__), "data", "default_model.txt")

LOG_COLUMNS = ["t", "mode"] + [
    f"{group}_{p}" for group in ("pred", "chosen", "smooth") for p in ("D", "theta_deg", "H", "E")
] + ["csr_near", "csr_far"]


class InputError(CurbsightError):
    """A file could not be read, parsed or written."""


def _io(fn, *args, **kw):
    try:
        return fn(*args, **kw)
    except (OSError, ValueError, KeyError) as exc:
        raise InputError(str(exc)) from exc


def _fmt(v) -> str:
    if v is None or (isinstance(v, float) and not math.isfinite(v)):
        return "NA"
    return f"{v:.6f}"


def _state_cells(x) -> List[str]:
    """D, yaw in degrees, H, E of a 4-vector (or NA cells)."""
    if x is None:
        return ["NA"] * 4
    x = np.asarray(x, dtype=float)
    return [_fmt(float(x[0])), _fmt(math.degrees(float(x[1]))), _fmt(float(x[2])), _fmt(float(x[3]))]


def _resolve_model(args, cfg: Config) -> Optional[LinearModel]:
    if getattr(args, "no_appearance", False):
        return None
    path = args.model or cfg.model_path or DEFAULT_MODEL
    return _io(load_model, path)


def _model_label(args, cfg: Config) -> str:
    if getattr(args, "no_appearance", False):
        return "none"
    return args.model or cfg.model_path or "bundled"


# ---- subcommands


def cmd_render(cfg: Config, args) -> int:
    pipe = cfg.pipeline()
    seed = cfg.seed if args.seed is None else args.seed
    rng = np.random.default_rng(seed)
    ph = cfg.photometry(args.preset)
    if args.distractors:
        ph = replace(ph, distractors=ss.random_distractors(rng, pipe.cdd, args.distractors, args.distractors))
    if args.no_curb:
        traj = [None] * args.frames
    else:
        traj = ss.approach_trajectory(
            args.D_start,
            args.D_end,
            args.speed,
            yaw=math.radians(args.yaw_deg),
            yaw_rate=math.radians(args.yaw_rate_deg),
            height=args.height,
            depth=args.depth,
            jitter=args.jitter,
            seed=seed,
        )
        if args.frames:
            traj = traj[: args.frames]
    _io(os.makedirs, args.out_dir, exist_ok=True)
    records = []
    for k, (raster, rec) in enumerate(ss.render_sequence(traj, pipe.rig, ph, seed=seed, cdd=pipe.cdd)):
        note = f"curbsight {__version__} render\nseed={ss.frame_seed(seed, k)} sequence_seed={seed} preset={args.preset} frame={k}"
        _io(ss.write_pgm, os.path.join(args.out_dir, ss.frame_name(k)), raster, note)
        records.append(rec)
    _io(ss.write_gt_csv, os.path.join(args.out_dir, "gt.csv"), records)
    meta = {
        "version": __version__,
        "seed": seed,
        "preset": args.preset,
        "frames": len(records),
        "scenario": {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "config", "set", "out_dir")},
        "config": cfg.tree,
    }
    _io(_write_text, os.path.join(args.out_dir, "meta.yaml"), yaml.safe_dump(meta, sort_keys=True))
    print(f"wrote {len(records)} frames to {args.out_dir}")
    return 0


def _write_text(path, text: str) -> None:
    with open(path, "w") as fh:
        fh.write(text)


def cmd_train(cfg: Config, args) -> int:
    pipe = cfg.pipeline()
    seed = cfg.seed if args.seed is None else args.seed
    rng = np.random.default_rng(seed)
    if args.corpus:
        pos, neg, seeds = [], [], []
        for d in args.corpus:
            records = {r.frame: r for r in _io(ss.read_gt_csv, os.path.join(d, "gt.csv"))}
            for k, path in enumerate(_io(ss.list_frames, d)):
                rec = records.get(k)
                if rec is None:
                    raise InputError(f"{path}: no ground-truth row for frame {k}")
                state = rec.state if rec.present else None
                p, n = ss.frame_windows(_io(ss.read_pgm, path), state, rng, pipe)
                pos += p
                neg += n
        corpus = ss.corpus_from_windows(pos, neg, seeds, rng)
    else:
        corpus = ss.make_training_corpus(args.scenes, pipe, seed=seed)
    P, N = corpus.split()
    if not len(P) or not len(N):
        raise InputError("the corpus yields no windows of one class")
    model = train(hog_batch(P), hog_batch(N), C=args.C, epochs=args.epochs, seed=seed)
    _io(save_model, model, args.out)
    print(f"trained on {len(P)} positive and {len(N)} negative windows; model written to {args.out}")
    return 0


def _annotate(frame: np.ndarray, cands, pipe) -> np.ndarray:
    out = np.array(frame, dtype=np.uint8)
    w = frame.shape[1]
    for c in cands:
        for line in project_edges(c.state, pipe.cdd, pipe.rig):
            p0 = (0, int(round(line.b)))
            p1 = (w - 1, int(round(line.a * (w - 1) + line.b)))
            cv2.line(out, p0, p1, 255, 1)
    return out


def _line_overlay(data: np.ndarray, lines) -> np.ndarray:
    out = np.clip(np.rint(data), 0, 255).astype(np.uint8)
    w = out.shape[1]
    for l in lines:
        cv2.line(out, (0, int(round(l.b))), (w - 1, int(round(l.a * (w - 1) + l.b))), 255, 1)
    return out


def cmd_detect(cfg: Config, args) -> int:
    pipe = cfg.pipeline()
    model = _resolve_model(args, cfg)
    frame = _io(ss.read_pgm, args.frame)
    csr = pipe.cdd.full_csr(H_span=pipe.tracker.H_span, E_span=pipe.tracker.E_span)
    res = detect_frame(frame, csr, pipe, model)
    head = f"# curbsight {__version__} detect\n# frame={args.frame} model={_model_label(args, cfg)} seed={cfg.seed}\n"
    head += "# kind\tD_cm\ttheta_deg\tH_cm\tE_cm\tresidual_px\tscore\n"
    text = head + format_candidates(sorted(res.accepted, key=lambda c: c.state.distance))
    if args.out:
        _io(_write_text, args.out, text)
    else:
        sys.stdout.write(text)
    if args.annotate:
        _io(ss.write_pgm, args.annotate, _annotate(frame, res.accepted, pipe), f"curbsight {__version__} detect overlay")
    if args.debug_dir:
        _io(os.makedirs, args.debug_dir, exist_ok=True)
        dbg = {}
        smoothed = pipe.warp(frame, csr, pipe.edges.prewarp_sigma)
        extract_lines_warped(smoothed, pipe.edges, dbg)
        _io(ss.write_pgm, os.path.join(args.debug_dir, "warped.pgm"), np.clip(np.rint(smoothed.data), 0, 255))
        _io(ss.write_pgm, os.path.join(args.debug_dir, "edges.pgm"), dbg["edges"].astype(np.uint8) * 255)
        _io(ss.write_pgm, os.path.join(args.debug_dir, "lines.pgm"), _line_overlay(smoothed.data, dbg["hough"].lines))
    return 0


def _frames(paths):
    for p in paths:
        yield _io(ss.read_pgm, p)


def cmd_track(cfg: Config, args) -> int:
    pipe = cfg.pipeline()
    model = _resolve_model(args, cfg)
    paths = _io(ss.list_frames, args.frames_dir)
    if not paths:
        raise InputError(f"{args.frames_dir}: no .pgm frames")
    res = run_sequence(_frames(paths), pipe, model)
    buf = io.StringIO()
    buf.write(f"# curbsight {__version__} track log\n")
    buf.write(f"# frames={args.frames_dir} model={_model_label(args, cfg)} seed={cfg.seed}\n")
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(LOG_COLUMNS)
    for o in res.outputs:
        chosen = None if o.chosen is None else o.chosen.state.as_array()
        if chosen is not None and not o.chosen.state.has_depth:
            chosen[3] = np.nan
        wr.writerow([o.t, o.mode] + _state_cells(o.predicted) + _state_cells(chosen) + _state_cells(o.smoothed) + [_fmt(o.csr.D_near), _fmt(o.csr.D_far)])
    _io(_write_text, args.out, buf.getvalue())
    n_track = sum(o.mode == "tracking" for o in res.outputs)
    print(f"tracked {len(res.outputs)} frames ({n_track} in tracking mode); log written to {args.out}")
    return 0


def read_track_log(path):
    """Frame indices and smoothed states (radians) of a track log; missing states are None."""
    with open(path, newline="") as fh:
        lines = [l for l in fh if not l.startswith("#")]
    rd = csv.DictReader(lines)
    if rd.fieldnames != LOG_COLUMNS:
        raise ValueError(f"{path}: unexpected track log header")
    frames, states = [], []
    for row in rd:
        frames.append(int(row["t"]))
        cells = [row[f"smooth_{p}"] for p in ("D", "theta_deg", "H", "E")]
        if cells[0] == "NA":
            states.append(None)
            continue
        x = [float("nan") if c == "NA" else float(c) for c in cells]
        x[1] = math.radians(x[1])
        states.append(x)
    return frames, states


def cmd_evaluate(cfg: Config, args) -> int:
    frames, est = _io(read_track_log, args.track_log)
    gt = _io(ss.read_gt_csv, args.gt_csv)
    gt_frames = [r.frame for r in gt]
    gt_states = [r.state.as_array() if (r.present and r.state is not None) else None for r in gt]
    be = binned_errors(frames, est, gt_frames, gt_states, D_max=cfg.cdd.D_max, D_min=cfg.cdd.D_min)
    gt_by_frame = dict(zip(gt_frames, gt_states))
    conf = detection_confusion(
        [None if e is None else e[0] for e in est],
        [None if gt_by_frame[f] is None else float(gt_by_frame[f][0]) for f in frames],
    )
    meta = {"track_log": args.track_log, "gt": args.gt_csv, "seed": cfg.seed, "version": __version__}
    paths = _io(write_report, args.out, be, conf, meta)
    print("wrote " + ", ".join(paths))
    return 0


def cmd_remap_check(cfg: Config, args) -> int:
    dev = approximation_error(cfg.remap)
    rt = round_trip_error(cfg.remap, args.grid)
    ok = dev < APPROX_BOUND and rt < ROUND_TRIP_TOL
    print(f"closed vs open form: max deviation {dev:.3e} px (bound {APPROX_BOUND:g})")
    print(f"forward(inverse(p)) - p: max {rt:.3e} px on a {args.grid}x{args.grid} grid (tolerance {ROUND_TRIP_TOL:g})")
    print("PASS" if ok else "FAIL")
    return 0 if ok else EXIT_CHECK


# ---- argument parsing


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", help="YAML configuration file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override, e.g. tracker.window=9 (repeatable)")
    return p


def _appearance_opts(p: argparse.ArgumentParser) -> None:
    p.add_argument("--model", help="classifier file (default: config, then the bundled model)")
    p.add_argument("--no-appearance", action="store_true", help="accept every fitted candidate")


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="curbsight", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"curbsight {__version__} (model format {MODEL_MAGIC!r})")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("render", parents=[common], help="render a synthetic approach sequence")
    p.add_argument("out_dir")
    p.add_argument("--preset", default="clear", choices=ss.PRESETS)
    p.add_argument("--seed", type=int, help="sequence seed (default: run.seed)")
    p.add_argument("--frames", type=int, default=0, help="frame count (curb-free) or cap (approach)")
    p.add_argument("--no-curb", action="store_true", help="render curb-free road frames")
    p.add_argument("--distractors", type=int, default=0, help="number of road seams and of road patches")
    p.add_argument("--D-start", dest="D_start", type=float, default=500.0)
    p.add_argument("--D-end", dest="D_end", type=float, default=100.0)
    p.add_argument("--speed", type=float, default=80.0, help="cm/s at 21 fps")
    p.add_argument("--yaw-deg", type=float, default=0.0)
    p.add_argument("--yaw-rate-deg", type=float, default=0.0, help="deg/s")
    p.add_argument("--height", type=float, default=15.0)
    p.add_argument("--depth", type=float, default=20.0)
    p.add_argument("--jitter", type=float, default=0.0, help="per-frame distance jitter, cm")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("train", parents=[common], help="train the window classifier")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--corpus", nargs="+", metavar="DIR", help="rendered frame directories with gt.csv")
    src.add_argument("--scenes", type=int, help="number of random curb and curb-free scenes to synthesise")
    p.add_argument("--out", required=True, help="model file to write")
    p.add_argument("--C", type=float, default=0.5)
    p.add_argument("--epochs", type=int, default=300)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("detect", parents=[common], help="detect curb candidates in one frame")
    p.add_argument("frame")
    _appearance_opts(p)
    p.add_argument("--out", help="candidate dump (default: stdout)")
    p.add_argument("--annotate", help="write the frame with accepted candidates drawn")
    p.add_argument("--debug-dir", help="write the remapped region, edge map and line overlay here")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("track", parents=[common], help="track the curb through a frame directory")
    p.add_argument("frames_dir")
    _appearance_opts(p)
    p.add_argument("--out", required=True, help="track log CSV")
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("evaluate", parents=[common], help="score a track log against ground truth")
    p.add_argument("track_log")
    p.add_argument("gt_csv")
    p.add_argument("--out", required=True, help="report prefix")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("remap-check", parents=[common], help="check the remap approximation bound")
    p.add_argument("--grid", type=int, default=100)
    p.set_defaults(func=cmd_remap_check)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.set)
    except ConfigError as exc:
        print(f"curbsight: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"curbsight: cannot read configuration: {exc}", file=sys.stderr)
        return EXIT_IO
    try:
        return args.func(cfg, args)
    except ConfigError as exc:
        print(f"curbsight: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (InputError, MisalignedLogs) as exc:
        print(f"curbsight: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())

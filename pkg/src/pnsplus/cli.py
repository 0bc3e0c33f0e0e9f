"""Command-line front end.

Every subcommand writes into its own output location and overwrites what
it wrote before, so reruns are deterministic. Failures print a single
``error: <Type>: <message>`` line on stderr and exit with status 1; bad
usage exits with status 2.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import annotate as A
from . import metrics as M
from . import plotting, stats
from .checkpoint import CheckpointError
from .io import (
    SPLITS,
    ImageFormatError,
    ManifestError,
    load_clip,
    load_manifest,
    prob_to_u8,
    read_image,
    write_image,
)
from .ns_block import ConfigError
from .tensor import NonFiniteError, ShapeError

log = logging.getLogger("pnsplus")

KNOWN_ERRORS = (
    ManifestError,
    ImageFormatError,
    ConfigError,
    CheckpointError,
    ShapeError,
    NonFiniteError,
    M.MissingPredictionsError,
    A.ScribbleError,
    ValueError,
    KeyError,
    OSError,
)
ANNOTATION_KINDS = ("boundary", "scribble", "polygon", "bbox")
PRED_SUFFIXES = (".pgm", ".png")


def _map(fn, items, threads: int):
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


def _records(manifest, split):
    recs = manifest.clips if split is None else manifest.by_split(split)
    if not recs:
        raise ManifestError(f"no clips in split {split!r}")
    return recs


def _write_csv(path: Path, rows) -> None:
    with open(path, "w", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerows(rows)


# -------------------------------------------------------------------- train


def cmd_train(args) -> int:
    from .pipeline import PipelineConfig, load_config, save_checkpoint, save_config, train

    cfg = load_config(args.config) if args.config else PipelineConfig()
    overrides = {k: v for k, v in (("steps", args.steps), ("seed", args.seed)) if v is not None}
    if overrides:
        cfg = cfg.replace(**overrides)
    manifest = load_manifest(args.manifest)
    clips = [load_clip(r) for r in _records(manifest, args.split)]
    for c in clips:
        if c.frames.shape[1:3] != (cfg.height, cfg.width):
            raise ShapeError(f"clip {c.clip_id!r} is {c.frames.shape[1:3]}, config expects {(cfg.height, cfg.width)}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def report(step, loss):
        if step % 50 == 0:
            log.info("step %d loss %.5f", step, loss)

    result = train(clips, cfg, callback=report)
    save_checkpoint(result.model, out / "model.ckpt")
    save_config(cfg, out / "config.txt")
    _write_csv(out / "losses.csv", [["step", "loss"]] + [[i, repr(v)] for i, v in enumerate(result.losses)])
    plotting.loss_curve(result.losses, out / "loss.png")
    print(f"trained {len(clips)} clips for {cfg.steps} steps, final loss {result.losses[-1]:.5f} -> {out}")
    return 0


# -------------------------------------------------------------------- infer


def cmd_infer(args) -> int:
    from .pipeline import infer_clip, load_checkpoint, load_config

    ckpt = Path(args.checkpoint)
    cfg_path = Path(args.config) if args.config else ckpt.parent / "config.txt"
    cfg = load_config(cfg_path)
    model = load_checkpoint(ckpt, cfg)
    manifest = load_manifest(args.manifest)
    out = Path(args.out)
    n = 0
    for rec in _records(manifest, args.split):
        clip = load_clip(rec)
        if clip.frames.shape[1:3] != (cfg.height, cfg.width):
            raise ShapeError(f"clip {clip.clip_id!r} is {clip.frames.shape[1:3]}, model expects {(cfg.height, cfg.width)}")
        probs = infer_clip(clip, model)
        cdir = out / clip.clip_id
        cdir.mkdir(parents=True, exist_ok=True)
        for i, p in enumerate(probs, start=1):
            write_image(cdir / f"{i:05d}.pgm", prob_to_u8(p))
        n += len(probs)
    print(f"wrote {n} prediction maps -> {out}")
    return 0


# --------------------------------------------------------------------- eval


def read_predictions(pred_dir, clip_ids) -> dict[str, dict[int, np.ndarray]]:
    """``pred_dir/<clip_id>/<frame_index>.(pgm|png)`` as uint8 maps keyed by frame index."""
    root = Path(pred_dir)
    if not root.is_dir():
        raise FileNotFoundError(f"prediction folder not found: {root}")
    preds: dict[str, dict[int, np.ndarray]] = {}
    for cid in clip_ids:
        frames: dict[int, np.ndarray] = {}
        cdir = root / cid
        if cdir.is_dir():
            for f in sorted(cdir.iterdir()):
                if f.suffix.lower() in PRED_SUFFIXES and f.stem.isdigit():
                    img = read_image(f)
                    frames[int(f.stem)] = img.max(axis=2) if img.ndim == 3 else img
        preds[cid] = frames
    return preds


def cmd_eval(args) -> int:
    manifest = load_manifest(args.manifest)
    clips = [load_clip(r) for r in _records(manifest, args.split)]
    preds = read_predictions(args.pred, [c.clip_id for c in clips])
    for c in clips:
        for i, p in preds[c.clip_id].items():
            if i < len(c.masks) and p.shape != c.masks[i].shape:
                raise ShapeError(f"clip {c.clip_id!r} frame {i}: prediction {p.shape} vs mask {c.masks[i].shape}")
    report = M.evaluate_dataset(
        preds, clips, attribute_filter=args.attr_filter, with_attributes=args.attrs,
        skip_anchor=not args.include_anchor, threads=args.threads,
    )
    if not report.clips:
        raise ValueError(f"no clips carry attribute {args.attr_filter!r}")
    out = Path(args.report)
    out.parent.mkdir(parents=True, exist_ok=True)
    report.to_csv(out)
    stem = out.with_suffix("")
    plotting.metric_bars({c.clip_id: c.scores for c in report.clips} | {"dataset": report.dataset},
                         f"{stem}_clips.png", "per-clip scores")
    if args.attrs and report.by_attribute:
        plotting.metric_bars(report.by_attribute, f"{stem}_attributes.png", "per-attribute scores")
    if args.curves:
        selected = [c for c in clips if c.clip_id in {s.clip_id for s in report.clips}]
        curves = M.dataset_curves(preds, selected, skip_anchor=not args.include_anchor)
        rows = [["threshold", *curves]] + [[t, *(repr(float(curves[k][t])) for k in curves)] for t in range(M.LEVELS)]
        _write_csv(Path(f"{stem}_curves.csv"), rows)
        plotting.threshold_curves(curves, f"{stem}_curves.png")
    if report.flagged:
        log.warning("%d frames with empty ground truth excluded from sen/fbeta/wfbeta", len(report.flagged))
    print(" ".join(f"{m}={report.dataset[m]:.4f}" for m in M.METRICS))
    return 0


# ----------------------------------------------------------------- annotate


def annotate_frame(mask: np.ndarray, kinds, seed: int) -> tuple[dict[str, np.ndarray], dict]:
    images: dict[str, np.ndarray] = {}
    record: dict = {}
    empty = not mask.any()
    if "boundary" in kinds:
        images["boundary"] = A.mask_to_boundary(mask)
    if "bbox" in kinds:
        record["bbox"] = None if empty else list(A.mask_to_bbox(mask))
    if "polygon" in kinds:
        polys = [] if empty else A.mask_to_polygons(mask, seed=seed)
        record["epsilon"] = A.sample_epsilon(seed)
        record["polygons"] = [p.vertices.tolist() for p in polys]
        raster = np.zeros(mask.shape, dtype=bool)
        for p in polys:
            raster |= A.rasterize_polygon(p, mask.shape)
        images["polygon"] = raster
    if "scribble" in kinds:
        try:
            fg, bg = A.generate_scribble(mask, seed)
            images["scribble_fg"], images["scribble_bg"] = fg, bg
        except A.ScribbleError as exc:
            record["scribble_error"] = str(exc)
    return images, record


def cmd_annotate(args) -> int:
    kinds = [k.strip() for k in args.kinds.split(",") if k.strip()]
    bad = [k for k in kinds if k not in ANNOTATION_KINDS]
    if bad or not kinds:
        raise ValueError(f"unknown annotation kinds {bad}; choose from {','.join(ANNOTATION_KINDS)}")
    manifest = load_manifest(args.manifest)
    out = Path(args.out)

    def one(rec):
        clip = load_clip(rec)
        cdir = out / clip.clip_id
        written = 0
        for i, mask in enumerate(clip.masks):
            # seed depends only on the run seed and the frame position
            images, record = annotate_frame(mask, kinds, seed=args.seed * 1_000_003 + i)
            for name, img in images.items():
                (cdir / name).mkdir(parents=True, exist_ok=True)
                write_image(cdir / name / f"{i:05d}.pgm", img.astype(np.uint8) * 255)
            (cdir / "records").mkdir(parents=True, exist_ok=True)
            (cdir / "records" / f"{i:05d}.json").write_text(json.dumps(record, sort_keys=True) + "\n")
            written += 1
        return written

    total = sum(_map(one, _records(manifest, args.split), args.threads))
    print(f"annotated {total} frames ({','.join(kinds)}) -> {out}")
    return 0


# -------------------------------------------------------------------- stats


def cmd_stats(args) -> int:
    manifest = load_manifest(args.manifest)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    recs = _records(manifest, args.split)

    def one(rec):
        clip = load_clip(rec)
        rows = []
        for i, (frame, mask) in enumerate(zip(clip.frames, clip.masks)):
            cs = stats.contrast_stats(frame, mask)
            rows.append([clip.clip_id, i, repr(float(mask.mean())), repr(cs.global_contrast), repr(cs.local_contrast),
                         int(cs.flagged)])
        computed = sorted(t.code for t in stats.auto_attributes(clip.masks))
        return clip, rows, computed

    results = _map(one, recs, args.threads)
    size = tuple(args.size) if args.size else results[0][0].masks.shape[1:]
    frame_rows = [["clip_id", "frame", "ratio", "global_contrast", "local_contrast", "flagged"]]
    attr_rows = [["clip_id", "split", "manifest_attributes", "computed_attributes"]]
    masks = []
    for clip, rows, computed in results:
        frame_rows += rows
        attr_rows.append([clip.clip_id, clip.split, ";".join(clip.attributes), ";".join(computed)])
        masks.extend(clip.masks)
    _write_csv(out / "frames.csv", frame_rows)
    _write_csv(out / "attributes.csv", attr_rows)
    heat = stats.center_bias_map(masks, size)
    write_image(out / "center_bias.pgm", prob_to_u8(heat))
    dist = stats.size_distribution(masks)
    _write_csv(out / "size_histogram.csv", [["bin_lo", "bin_hi", "frames"]] + [
        [repr(float(lo)), repr(float(hi)), int(n)] for lo, hi, n in zip(dist.edges[:-1], dist.edges[1:], dist.counts)
    ])
    plotting.center_bias(heat, out / "center_bias.png")
    plotting.size_histogram(dist.ratios, out / "sizes.png")
    g = np.array([float(r[3]) for r in frame_rows[1:]])
    loc = np.array([float(r[4]) for r in frame_rows[1:]])
    ok = ~np.isnan(g)
    plotting.contrast_scatter(g[ok], loc[ok], out / "contrast.png")
    print(f"{len(results)} clips, {len(masks)} frames, mean ratio {dist.ratios.mean():.4f} -> {out}")
    return 0


# -------------------------------------------------------------------- synth


def cmd_synth(args) -> int:
    from .synth import synth_dataset

    path = synth_dataset(args.out, args.clips, args.frames, (args.height, args.width), seed=args.seed,
                         split=args.split, dataset=args.name)
    print(f"wrote {args.clips} clips -> {path}")
    return 0


# -------------------------------------------------------------------- bench


def cmd_bench(args) -> int:
    from .bench import bench_ns

    t, h, w, c = args.size
    res = bench_ns(t, h, w, c, groups=args.groups, kernel=args.kernel, seed=args.seed, repeats=args.repeats)
    print(res.summary())
    verdict = "meets" if res.speedup >= 5.0 else "below"
    print(f"speedup {verdict} the 5x target (informational)")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _write_csv(out / "bench.csv", [
            ["frames", "height", "width", "channels", "groups", "kernel", "fast_s", "oracle_s", "speedup", "max_abs_diff"],
            [t, h, w, c, args.groups, args.kernel, repr(res.fast_s), repr(res.oracle_s), repr(res.speedup),
             repr(res.max_abs_diff)],
        ])
        plotting.bench_bars({"ns_forward": res.fast_s, "oracle": res.oracle_s}, out / "bench.png")
    return 0


# ------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pnsplus", description="Video polyp segmentation toolkit.")
    p.add_argument("--threads", type=int, default=1, help="worker cap for per-frame/per-clip work")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("train", help="train a model on the train split")
    s.add_argument("--config", help="key=value config file (defaults if omitted)")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--split", default="train", choices=SPLITS)
    s.add_argument("--steps", type=int)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("infer", help="write probability maps for frames 1..n-1 of each clip")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--config", help="defaults to config.txt next to the checkpoint")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--split", choices=SPLITS)
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("eval", help="score predictions and write a CSV report with figures")
    s.add_argument("--pred", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--report", required=True)
    s.add_argument("--attrs", action="store_true", help="add per-attribute rows")
    s.add_argument("--attr-filter", help="only clips carrying this tag")
    s.add_argument("--split", choices=SPLITS)
    s.add_argument("--include-anchor", action="store_true", help="also score frame 0 (needs its prediction)")
    s.add_argument("--curves", action="store_true", help="dump per-threshold dataset curves")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("annotate", help="derive boundary/scribble/polygon/bbox annotations from masks")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--kinds", default=",".join(ANNOTATION_KINDS))
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--split", choices=SPLITS)
    s.set_defaults(func=cmd_annotate)

    s = sub.add_parser("stats", help="dataset statistics and computed attributes")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--size", type=int, nargs=2, metavar=("H", "W"), help="center-bias map size")
    s.add_argument("--split", choices=SPLITS)
    s.set_defaults(func=cmd_stats)

    s = sub.add_parser("synth", help="generate a synthetic dataset with a manifest")
    s.add_argument("--out", required=True)
    s.add_argument("--clips", type=int, default=4)
    s.add_argument("--frames", type=int, default=12)
    s.add_argument("--height", type=int, default=64)
    s.add_argument("--width", type=int, default=112)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--split", default="train", choices=SPLITS)
    s.add_argument("--name", default="synth")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("bench", help="time ns_forward against the brute-force reference")
    s.add_argument("--size", type=int, nargs=4, metavar=("T", "H", "W", "C"), default=[5, 32, 56, 32])
    s.add_argument("--groups", type=int, default=4)
    s.add_argument("--kernel", type=int, default=3)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--repeats", type=int, default=1)
    s.add_argument("--out")
    s.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.threads < 1:
        print("error: ValueError: --threads must be >= 1", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except KNOWN_ERRORS as exc:
        msg = str(exc.args[0]) if isinstance(exc, KeyError) and exc.args else str(exc)
        print(f"error: {type(exc).__name__}: {' '.join(msg.split())}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

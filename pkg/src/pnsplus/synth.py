"""Synthetic colonoscopy-like clips: a shaded ellipse moving over texture.

Clip kinds cycle with the clip index so a small dataset already covers the
auto-computable attributes:

``drift``  slow motion, medium polyp
``fast``   25 px steps (bounces inside the frame), medium polyp -> FM
``small``  slow motion, area ratio ~0.03 -> SO
``grow``   large polyp that doubles in linear size -> LO, SV
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .io import ClipRecord, VideoClip, write_image, write_manifest

KINDS = ("drift", "fast", "small", "grow")


def ellipse_mask(h: int, w: int, cx: float, cy: float, a: float, b: float, angle: float) -> np.ndarray:
    """Pixel-centre rasterisation of an ellipse; ``cx`` is a column, ``cy`` a row."""
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    dx, dy = xs - cx, ys - cy
    ca, sa = np.cos(angle), np.sin(angle)
    u = (dx * ca + dy * sa) / a
    v = (-dx * sa + dy * ca) / b
    return (u * u + v * v) <= 1.0


def _texture(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    field = np.zeros((h, w))
    for _ in range(4):
        fx, fy = rng.uniform(0.02, 0.12, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        field += np.sin(2 * np.pi * (fx * xs + fy * ys) + phase)
    field = 0.5 + 0.125 * field
    base = np.array([0.55, 0.30, 0.25]) + rng.uniform(-0.05, 0.05, size=3)
    img = base[None, None, :] * (0.7 + 0.6 * field[..., None])
    return img


def _bounce(pos: float, lo: float, hi: float) -> float:
    span = hi - lo
    r = (pos - lo) % (2 * span)
    return lo + (r if r <= span else 2 * span - r)


def _trajectory(kind: str, rng: np.random.Generator, n: int, h: int, w: int, a_max: float):
    margin = a_max + 1.0
    if kind == "fast":
        step = 25.0
        lo_x, hi_x = margin, w - 1 - margin
        x0 = rng.uniform(lo_x, hi_x)
        y0 = rng.uniform(margin, h - 1 - margin)
        direction = rng.choice([-1.0, 1.0])
        xs, x = [x0], x0
        for _ in range(n - 1):
            nx = x + direction * step
            if not lo_x <= nx <= hi_x:
                direction = -direction
                nx = x + direction * step
            x = nx
            xs.append(x)
        return np.array(xs), np.full(n, y0)
    speed = rng.uniform(1.0, 3.0)
    theta = rng.uniform(0, 2 * np.pi)
    x0 = rng.uniform(margin, w - 1 - margin)
    y0 = rng.uniform(margin, h - 1 - margin)
    t = np.arange(n)
    xs = [_bounce(x0 + speed * np.cos(theta) * i, margin, w - 1 - margin) for i in t]
    ys = [_bounce(y0 + speed * np.sin(theta) * i, margin, h - 1 - margin) for i in t]
    return np.array(xs), np.array(ys)


def render_clip(clip_id: str, kind: str, n_frames: int, h: int, w: int, rng: np.random.Generator) -> VideoClip:
    if kind not in KINDS:
        raise ValueError(f"unknown clip kind {kind!r}")
    area = h * w
    ratio = {"drift": 0.08, "fast": 0.07, "small": 0.03, "grow": 0.30}[kind]
    ratio *= rng.uniform(0.9, 1.1)
    aspect = rng.uniform(1.0, 1.2) if kind == "grow" else rng.uniform(1.1, 1.5)
    # pi * a * b = ratio * area, a = aspect * b
    b_end = np.sqrt(ratio * area / (np.pi * aspect))
    if kind == "grow":
        scales = np.linspace(0.5, 1.0, n_frames)
    else:
        scales = 1.0 + 0.05 * np.sin(np.linspace(0, np.pi, n_frames))
    a_max = aspect * b_end * scales.max()
    if 2 * (a_max + 1.0) >= min(h, w):
        raise ValueError(f"frame {h}x{w} too small for a {kind} clip")
    xs, ys = _trajectory(kind, rng, n_frames, h, w, a_max)
    angle = rng.uniform(0, np.pi)
    spin = rng.uniform(-0.05, 0.05)
    polyp = np.array([0.85, 0.62, 0.45]) + rng.uniform(-0.04, 0.04, size=3)

    frames = np.empty((n_frames, h, w, 3))
    masks = np.empty((n_frames, h, w), dtype=np.uint8)
    bg = _texture(rng, h, w)
    grid_y, grid_x = np.mgrid[0:h, 0:w].astype(np.float64)
    for i in range(n_frames):
        a, b = aspect * b_end * scales[i], b_end * scales[i]
        m = ellipse_mask(h, w, xs[i], ys[i], a, b, angle + spin * i)
        r2 = ((grid_x - xs[i]) ** 2 + (grid_y - ys[i]) ** 2) / max(a, 1.0) ** 2
        shade = 1.0 - 0.15 * np.clip(r2, 0, 1)
        img = bg * (1.0 + 0.03 * np.sin(0.3 * i))
        img = np.where(m[..., None], polyp[None, None, :] * shade[..., None], img)
        img = img + rng.normal(0.0, 0.02, size=img.shape)
        frames[i] = np.clip(img, 0.0, 1.0)
        masks[i] = m
    return VideoClip(clip_id, frames, masks, [], "train")


def synth_clips(n_clips: int, frames_per_clip: int, size=(64, 112), seed: int = 0, split: str = "train", kinds=None):
    """In-memory clips; clip ``i`` uses kind ``kinds[i % len(kinds)]``."""
    h, w = size
    if n_clips < 1 or frames_per_clip < 2 or h < 16 or w < 16:
        raise ValueError("need n_clips >= 1, frames_per_clip >= 2 and a frame of at least 16x16")
    kinds = tuple(kinds or KINDS)
    rng = np.random.default_rng(seed)
    clips = []
    for i in range(n_clips):
        clip = render_clip(f"clip{i:03d}", kinds[i % len(kinds)], frames_per_clip, h, w, rng)
        clip.split = split
        clips.append(clip)
    return clips


def quantize_clip(clip: VideoClip) -> VideoClip:
    """Round frames to 8-bit levels, matching what a written dataset reloads as."""
    frames = np.round(clip.frames * 255.0) / 255.0
    return VideoClip(clip.clip_id, frames, clip.masks.copy(), list(clip.attributes), clip.split)


def synth_dataset(out_dir, n_clips: int, frames_per_clip: int, size=(64, 112), seed: int = 0,
                  split: str = "train", dataset: str = "synth", tag_attributes: bool = True, kinds=None):
    """Write clips as PPM frames / PGM masks plus ``manifest.jsonl``; returns the manifest path."""
    from .stats import auto_attributes

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = []
    for clip in synth_clips(n_clips, frames_per_clip, size, seed, split, kinds):
        fdir = out / clip.clip_id / "frames"
        mdir = out / clip.clip_id / "masks"
        fdir.mkdir(parents=True, exist_ok=True)
        mdir.mkdir(parents=True, exist_ok=True)
        fpaths, mpaths = [], []
        for t in range(len(clip)):
            fp, mp = fdir / f"{t:05d}.ppm", mdir / f"{t:05d}.pgm"
            write_image(fp, np.round(clip.frames[t] * 255.0).astype(np.uint8))
            write_image(mp, (clip.masks[t] * 255).astype(np.uint8))
            fpaths.append(fp)
            mpaths.append(mp)
        attrs = sorted(t.code for t in auto_attributes(clip.masks)) if tag_attributes else []
        records.append(ClipRecord(clip.clip_id, fpaths, mpaths, attrs, split))
    manifest = out / "manifest.jsonl"
    write_manifest(manifest, dataset, records)
    return manifest

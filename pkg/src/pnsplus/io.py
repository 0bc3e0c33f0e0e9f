"""Image files, the JSON-lines clip manifest, and in-memory clips."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SPLITS = ("train", "easy-seen", "easy-unseen", "hard-seen", "hard-unseen")


class ManifestError(ValueError):
    """A manifest record is malformed, inconsistent or points at missing files."""


class ImageFormatError(ValueError):
    pass


# ------------------------------------------------------------------- images


def _read_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    n = len(buf)
    while pos < n:
        ch = buf[pos : pos + 1]
        if ch == b"#":
            while pos < n and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif ch.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos : pos + 1].isspace() and buf[pos : pos + 1] != b"#":
        pos += 1
    return buf[start:pos], pos


def read_pnm(path) -> np.ndarray:
    """Binary PGM (P5) or PPM (P6), 8-bit. Returns ``[H, W]`` or ``[H, W, 3]`` uint8."""
    buf = Path(path).read_bytes()
    magic, pos = _read_token(buf, 0)
    if magic not in (b"P5", b"P6"):
        raise ImageFormatError(f"{path}: not a binary PGM/PPM file")
    fields = []
    for _ in range(3):
        tok, pos = _read_token(buf, pos)
        fields.append(int(tok))
    w, h, maxval = fields
    if maxval != 255:
        raise ImageFormatError(f"{path}: only 8-bit images are supported (maxval={maxval})")
    pos += 1  # single whitespace after maxval
    channels = 3 if magic == b"P6" else 1
    data = np.frombuffer(buf, dtype=np.uint8, count=w * h * channels, offset=pos)
    return data.reshape((h, w, 3) if channels == 3 else (h, w)).copy()


def write_pnm(path, image: np.ndarray) -> None:
    img = np.asarray(image)
    if img.dtype != np.uint8:
        raise ImageFormatError("write_pnm expects uint8 data")
    if img.ndim == 2:
        magic = b"P5"
    elif img.ndim == 3 and img.shape[2] == 3:
        magic = b"P6"
    else:
        raise ImageFormatError(f"cannot write image of shape {img.shape}")
    h, w = img.shape[:2]
    Path(path).write_bytes(magic + f"\n{w} {h}\n255\n".encode() + np.ascontiguousarray(img).tobytes())


def read_image(path) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() in (".pgm", ".ppm", ".pnm"):
        return read_pnm(path)
    from PIL import Image  # optional, only for PNG/JPEG inputs

    with Image.open(path) as im:
        arr = np.asarray(im)
    if arr.ndim == 3 and arr.shape[2] == 4:
        arr = arr[..., :3]
    return arr.astype(np.uint8)


def write_image(path, image: np.ndarray) -> None:
    path = Path(path)
    if path.suffix.lower() in (".pgm", ".ppm", ".pnm"):
        write_pnm(path, image)
        return
    from PIL import Image

    Image.fromarray(np.asarray(image, dtype=np.uint8)).save(path)


def read_mask(path) -> np.ndarray:
    """Binary mask (any nonzero pixel is foreground) as uint8 {0, 1}."""
    img = read_image(path)
    if img.ndim == 3:
        img = img.max(axis=2)
    return (img > 127).astype(np.uint8)


def prob_to_u8(prob: np.ndarray) -> np.ndarray:
    return np.floor(np.clip(prob, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


# ----------------------------------------------------------------- manifest


@dataclass
class ClipRecord:
    clip_id: str
    frames: list[Path]
    masks: list[Path]
    attributes: list[str] = field(default_factory=list)
    split: str = "train"


@dataclass
class Manifest:
    dataset: str
    clips: list[ClipRecord]
    root: Path = Path(".")

    def by_split(self, split: str) -> list[ClipRecord]:
        return [c for c in self.clips if c.split == split]

    def clip(self, clip_id: str) -> ClipRecord:
        for c in self.clips:
            if c.clip_id == clip_id:
                return c
        raise KeyError(clip_id)


def _validate(rec: dict, lineno: int, root: Path) -> ClipRecord:
    clip_id = rec.get("clip_id")
    if not isinstance(clip_id, str) or not clip_id:
        raise ManifestError(f"line {lineno}: record has no clip_id")
    where = f"clip {clip_id!r}"
    frames, masks = rec.get("frames"), rec.get("masks")
    if not isinstance(frames, list) or not isinstance(masks, list):
        raise ManifestError(f"{where}: frames and masks must be lists")
    if len(frames) != len(masks):
        raise ManifestError(f"{where}: {len(frames)} frames but {len(masks)} masks")
    if len(frames) < 2:
        raise ManifestError(f"{where}: needs at least 2 frames")
    split = rec.get("split", "train")
    if split not in SPLITS:
        raise ManifestError(f"{where}: unknown split {split!r}")
    attrs = rec.get("attributes", [])
    if not isinstance(attrs, list) or not all(isinstance(a, str) for a in attrs):
        raise ManifestError(f"{where}: attributes must be a list of strings")
    fpaths = [root / f for f in frames]
    mpaths = [root / m for m in masks]
    for p in fpaths + mpaths:
        if not p.is_file():
            raise ManifestError(f"{where}: missing file {p}")
    return ClipRecord(clip_id, fpaths, mpaths, list(attrs), split)


def load_manifest(path) -> Manifest:
    """Read and eagerly validate a manifest; paths resolve against its folder."""
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")
    root = path.parent
    clips: list[ClipRecord] = []
    dataset = None
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"line {lineno}: invalid JSON ({exc.msg})") from exc
        if not isinstance(rec, dict):
            raise ManifestError(f"line {lineno}: expected a JSON object")
        name = rec.get("dataset", "")
        if dataset is None:
            dataset = name
        elif name != dataset:
            raise ManifestError(f"line {lineno}: dataset {name!r} differs from {dataset!r}")
        clip = _validate(rec, lineno, root)
        if any(c.clip_id == clip.clip_id for c in clips):
            raise ManifestError(f"clip {clip.clip_id!r}: duplicate clip_id")
        clips.append(clip)
    if not clips:
        raise ManifestError(f"{path}: no clip records")
    return Manifest(dataset or "", clips, root)


def write_manifest(path, dataset: str, clips: list[ClipRecord]) -> None:
    path = Path(path)
    root = path.parent
    lines = []
    for c in clips:
        rec = {
            "dataset": dataset,
            "clip_id": c.clip_id,
            "split": c.split,
            "attributes": list(c.attributes),
            "frames": [Path(os.path.relpath(f, root)).as_posix() for f in c.frames],
            "masks": [Path(os.path.relpath(m, root)).as_posix() for m in c.masks],
        }
        lines.append(json.dumps(rec, sort_keys=True))
    path.write_text("\n".join(lines) + "\n")


# -------------------------------------------------------------------- clips


@dataclass
class VideoClip:
    """Frames ``[T, H, W, 3]`` in [0, 1] and binary masks ``[T, H, W]``."""

    clip_id: str
    frames: np.ndarray
    masks: np.ndarray
    attributes: list[str] = field(default_factory=list)
    split: str = "train"

    def __len__(self) -> int:
        return len(self.frames)


def load_clip(rec: ClipRecord) -> VideoClip:
    frames = np.stack([read_image(p) for p in rec.frames]).astype(np.float64) / 255.0
    if frames.ndim == 3:
        frames = np.repeat(frames[..., None], 3, axis=3)
    masks = np.stack([read_mask(p) for p in rec.masks])
    return VideoClip(rec.clip_id, frames, masks, list(rec.attributes), rec.split)


def load_clips(manifest: Manifest, split: str | None = None) -> list[VideoClip]:
    recs = manifest.clips if split is None else manifest.by_split(split)
    return [load_clip(r) for r in recs]

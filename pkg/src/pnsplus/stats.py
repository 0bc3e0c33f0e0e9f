"""Dataset statistics and automatic clip attributes."""

from __future__ import annotations

from collections.abc import Iterable
from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy import ndimage

FM_MOTION_PX = 20.0
SO_RATIO = 0.05
LO_RATIO = 0.15
SV_AREA_RATIO = 0.5
HIST_BINS = 32
BAND_PX = 15


class Attr(str, Enum):
    SI = "SI"  # surgical instruments
    IB = "IB"  # indefinable boundaries
    HO = "HO"  # heterogeneous object
    GH = "GH"  # ghosting
    FM = "FM"  # fast motion
    SO = "SO"  # small object
    LO = "LO"  # large object
    OC = "OC"  # occlusion
    OV = "OV"  # out of view
    SV = "SV"  # scale variation


COMPUTABLE = frozenset({Attr.FM, Attr.SO, Attr.LO, Attr.SV, Attr.OV})
PROVENANCES = ("manifest", "computed")


@dataclass(frozen=True, order=True)
class AttributeTag:
    code: str
    provenance: str = "computed"

    def __post_init__(self):
        attr = Attr(self.code)
        if self.provenance not in PROVENANCES:
            raise ValueError(f"unknown provenance {self.provenance!r}")
        if self.provenance == "computed" and attr not in COMPUTABLE:
            raise ValueError(f"{self.code} cannot be computed from masks")

    def __str__(self) -> str:
        return self.code


def _stack(masks) -> np.ndarray:
    arr = np.asarray(masks)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise ValueError(f"masks must be [T, H, W], got {arr.shape}")
    return arr > 0


def foreground_ratios(masks) -> np.ndarray:
    m = _stack(masks)
    return m.reshape(len(m), -1).mean(axis=1)


def centroids(masks) -> list[tuple[float, float] | None]:
    """(x, y) centroid per frame, ``None`` for empty frames."""
    out = []
    for m in _stack(masks):
        if not m.any():
            out.append(None)
            continue
        ys, xs = np.nonzero(m)
        out.append((float(xs.mean()), float(ys.mean())))
    return out


def bbox_areas(masks) -> list[int]:
    """Inclusive pixel-extent box areas of non-empty frames."""
    areas = []
    for m in _stack(masks):
        if not m.any():
            continue
        rows = np.flatnonzero(m.any(axis=1))
        cols = np.flatnonzero(m.any(axis=0))
        areas.append(int((rows[-1] - rows[0] + 1) * (cols[-1] - cols[0] + 1)))
    return areas


def mean_motion(masks) -> float:
    """Mean centroid step between consecutive non-empty frames (0 if fewer than two)."""
    pts = [c for c in centroids(masks) if c is not None]
    if len(pts) < 2:
        return 0.0
    arr = np.array(pts)
    return float(np.hypot(*np.diff(arr, axis=0).T).mean())


def auto_attributes(clip) -> set[AttributeTag]:
    """FM, SO, LO, SV and OV from masks alone; accepts a clip or a mask stack."""
    masks = _stack(getattr(clip, "masks", clip))
    tags = set()
    if mean_motion(masks) > FM_MOTION_PX:
        tags.add(Attr.FM)
    ratio = float(foreground_ratios(masks).mean())
    if ratio < SO_RATIO:
        tags.add(Attr.SO)
    if ratio > LO_RATIO:
        tags.add(Attr.LO)
    areas = bbox_areas(masks)
    if areas and min(areas) / max(areas) < SV_AREA_RATIO:
        tags.add(Attr.SV)
    border = masks[:, 0, :].any() or masks[:, -1, :].any() or masks[:, :, 0].any() or masks[:, :, -1].any()
    if border:
        tags.add(Attr.OV)
    return {AttributeTag(a.value, "computed") for a in tags}


# ---------------------------------------------------------------- dataset-wide


def _nearest_resize(m: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = m.shape
    rows = np.minimum((np.arange(out_h) + 0.5) * h / out_h, h - 1).astype(np.int64)
    cols = np.minimum((np.arange(out_w) + 0.5) * w / out_w, w - 1).astype(np.int64)
    return m[rows[:, None], cols[None, :]]


def center_bias_map(masks: Iterable[np.ndarray], out_size: tuple[int, int]) -> np.ndarray:
    """Average of all masks after nearest-neighbour resizing to ``out_size``."""
    out_h, out_w = out_size
    acc = np.zeros((out_h, out_w))
    n = 0
    for m in masks:
        acc += _nearest_resize(np.asarray(m) > 0, out_h, out_w)
        n += 1
    if n == 0:
        raise ValueError("no masks")
    return acc / n


@dataclass
class SizeDistribution:
    ratios: np.ndarray
    counts: np.ndarray
    edges: np.ndarray


def size_distribution(masks: Iterable[np.ndarray], bins: int = 20) -> SizeDistribution:
    ratios = np.array([float(np.mean(np.asarray(m) > 0)) for m in masks])
    counts, edges = np.histogram(ratios, bins=bins, range=(0.0, 1.0))
    return SizeDistribution(ratios, counts, edges)


# ------------------------------------------------------------------- contrast


@dataclass
class ContrastStats:
    global_contrast: float
    local_contrast: float
    flagged: bool = False


def _color_hist(pixels: np.ndarray) -> np.ndarray:
    """Per-channel normalised histograms, ``[3, HIST_BINS]``."""
    if pixels.dtype == np.uint8:
        lv = pixels.astype(np.int64) * HIST_BINS // 256
    else:
        lv = np.clip((pixels * HIST_BINS).astype(np.int64), 0, HIST_BINS - 1)
    return np.stack([np.bincount(lv[:, c], minlength=HIST_BINS) / len(lv) for c in range(3)])


def chi2_distance(h1: np.ndarray, h2: np.ndarray) -> float:
    """Half chi-square summed per channel and averaged over channels; lies in [0, 1]."""
    den = h1 + h2
    terms = np.divide((h1 - h2) ** 2, den, out=np.zeros_like(den), where=den > 0)
    return float(0.5 * terms.sum(axis=-1).mean())


def contrast_stats(frame: np.ndarray, mask: np.ndarray, band: int = BAND_PX) -> ContrastStats:
    """Colour-histogram contrast between object and surroundings, globally and near the boundary."""
    img = np.asarray(frame)
    g = np.asarray(mask) > 0
    if img.shape[:2] != g.shape or img.ndim != 3 or img.shape[2] != 3:
        raise ValueError("frame must be [H, W, 3] matching the mask")
    if not g.any() or g.all():
        return ContrastStats(float("nan"), float("nan"), True)
    glob = chi2_distance(_color_hist(img[g]), _color_hist(img[~g]))
    near_fg = g & (ndimage.distance_transform_edt(g) <= band)
    near_bg = ~g & (ndimage.distance_transform_edt(~g) <= band)
    loc = chi2_distance(_color_hist(img[near_fg]), _color_hist(img[near_bg]))
    return ContrastStats(glob, loc, False)
